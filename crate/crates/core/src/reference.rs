//! Whole-image floating-point detector.
//!
//! This is the straightforward schedule: every scale's raw response image is
//! materialized, its ROI statistics are taken with a two-pass mean/variance,
//! and the standardized scales are averaged together with the standardized
//! inverted green channel. It keeps `n_scales` full images alive and serves as
//! the oracle for [`crate::streaming`].

use crate::detector::{orientation_lines, raw_response_with, MsldParams};
use crate::error::{Error, Result};
use crate::imageio::{GrayImage, Mask};

/// Standard deviations below this are treated as zero and the scale
/// standardizes to 0.
pub const SIGMA_EPSILON: f64 = 1e-12;

/// Row-major real-valued map. Pixels outside the ROI hold 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ResponseMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || width * height != data.len() {
            return Err(Error::InvalidImage(format!(
                "{width}x{height} response map with {} values",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Values of the ROI pixels in raster order.
    pub fn roi_values<'a>(&'a self, mask: &'a Mask) -> impl Iterator<Item = f64> + 'a {
        self.data
            .iter()
            .zip(mask.data())
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// ROI statistics of every scale and of the inverted green channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleStats {
    /// One entry per scale, `L = 1, 3, …, W`.
    pub scales: Vec<MeanStd>,
    pub igc: MeanStd,
    pub roi_count: usize,
    /// How many variances came out negative and were clamped to 0. Always 0
    /// for the reference engine.
    pub variance_clamps: usize,
}

impl ScaleStats {
    pub fn n_scales(&self) -> usize {
        self.scales.len()
    }
}

/// Population mean and standard deviation over the ROI (two-pass).
pub fn scale_stats(resp: &ResponseMap, mask: &Mask) -> Result<(MeanStd, usize)> {
    mask.expect_dims("mask", resp.dims())?;
    let n = mask.count();
    if n == 0 {
        return Err(Error::EmptyRoi);
    }
    let mean = resp.roi_values(mask).sum::<f64>() / n as f64;
    let var = resp
        .roi_values(mask)
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n as f64;
    Ok((
        MeanStd {
            mean,
            std: var.sqrt(),
        },
        n,
    ))
}

/// `(r - mean) / std`, or 0 when `std < SIGMA_EPSILON`.
pub fn standardize(r: f64, mean: f64, std: f64) -> f64 {
    if std < SIGMA_EPSILON {
        0.0
    } else {
        (r - mean) / std
    }
}

/// Average of the standardized scales and the standardized green channel.
pub fn combine(standardized: &[f64], igc_standardized: f64) -> f64 {
    (standardized.iter().sum::<f64>() + igc_standardized) / (standardized.len() + 1) as f64
}

pub(crate) fn check_inputs(img: &GrayImage, mask: &Mask) -> Result<()> {
    mask.expect_dims("mask", img.dims())?;
    if mask.count() == 0 {
        return Err(Error::EmptyRoi);
    }
    Ok(())
}

/// Raw response image of every scale; non-ROI pixels are 0.
pub fn raw_response_maps(
    img: &GrayImage,
    mask: &Mask,
    params: &MsldParams,
) -> Result<Vec<ResponseMap>> {
    check_inputs(img, mask)?;
    let (w, h) = img.dims();
    let lines = orientation_lines(params.window())?;
    let mut maps = vec![ResponseMap::zeros(w, h); params.n_scales()];
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let raw = raw_response_with(img, x, y, params, &lines);
            for (map, r) in maps.iter_mut().zip(raw.response) {
                map.set(x, y, r);
            }
        }
    }
    Ok(maps)
}

/// The inverted green channel as a real-valued map, zeroed outside the ROI.
pub fn igc_map(img: &GrayImage, mask: &Mask) -> ResponseMap {
    let data = img
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| if m { v as f64 } else { 0.0 })
        .collect();
    ResponseMap {
        width: img.width(),
        height: img.height(),
        data,
    }
}

/// Applies [`standardize`] to every ROI pixel of `map`.
pub fn standardize_map(map: &ResponseMap, mask: &Mask, stats: MeanStd) -> ResponseMap {
    let data = map
        .data
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| {
            if m {
                standardize(v, stats.mean, stats.std)
            } else {
                0.0
            }
        })
        .collect();
    ResponseMap {
        width: map.width,
        height: map.height,
        data,
    }
}

/// Per-scale standardized response images together with the statistics used.
pub fn standardized_maps(
    img: &GrayImage,
    mask: &Mask,
    params: &MsldParams,
) -> Result<(Vec<ResponseMap>, ScaleStats)> {
    let raw = raw_response_maps(img, mask, params)?;
    let mut scales = Vec::with_capacity(raw.len());
    let mut roi_count = 0;
    for map in &raw {
        let (s, n) = scale_stats(map, mask)?;
        scales.push(s);
        roi_count = n;
    }
    let (igc, _) = scale_stats(&igc_map(img, mask), mask)?;
    let standardized = raw
        .iter()
        .zip(&scales)
        .map(|(m, &s)| standardize_map(m, mask, s))
        .collect();
    Ok((
        standardized,
        ScaleStats {
            scales,
            igc,
            roi_count,
            variance_clamps: 0,
        },
    ))
}

/// Full multi-scale detector on an inverted-green image.
pub fn msld_reference(
    img: &GrayImage,
    mask: &Mask,
    params: &MsldParams,
) -> Result<(ResponseMap, ScaleStats)> {
    let (standardized, stats) = standardized_maps(img, mask, params)?;
    let (w, h) = img.dims();
    let mut out = ResponseMap::zeros(w, h);
    let mut terms = vec![0.0; standardized.len()];
    for i in 0..w * h {
        if !mask.data()[i] {
            continue;
        }
        for (t, m) in terms.iter_mut().zip(&standardized) {
            *t = m.data[i];
        }
        let g = standardize(img.data()[i] as f64, stats.igc.mean, stats.igc.std);
        out.data[i] = combine(&terms, g);
    }
    Ok((out, stats))
}
