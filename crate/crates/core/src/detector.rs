//! Line geometry and the per-pixel line-detector math shared by both engines.
//!
//! For a pixel, the window mean is the average of the `W × W` neighbourhood
//! and each scale `L` takes the brightest of twelve oriented lines of `L`
//! pixels. The raw response at scale `L` is that line mean minus the window
//! mean. Samples that fall outside the image are clamped to the nearest edge
//! pixel.

use crate::error::{Error, Result};
use crate::imageio::GrayImage;

/// Number of line orientations, 15° apart.
pub const ORIENTATIONS: usize = 12;

pub const DEFAULT_WINDOW: usize = 15;
pub const DEFAULT_FRAC_BITS: u32 = 18;

/// Detector configuration: window side `W` and the fixed-point width used by
/// the fixed-point streaming mode. The scales are always `1, 3, …, W`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MsldParams {
    window: usize,
    frac_bits: u32,
}

impl Default for MsldParams {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            frac_bits: DEFAULT_FRAC_BITS,
        }
    }
}

impl MsldParams {
    pub fn new(window: usize, frac_bits: u32) -> Result<Self> {
        if window < 3 || window.is_multiple_of(2) {
            return Err(Error::InvalidParams(format!(
                "window must be odd and at least 3, got {window}"
            )));
        }
        if frac_bits == 0 || frac_bits > crate::fixedpoint::MAX_FRAC_BITS {
            return Err(Error::InvalidParams(format!(
                "frac_bits must be in 1..={}, got {frac_bits}",
                crate::fixedpoint::MAX_FRAC_BITS
            )));
        }
        Ok(Self { window, frac_bits })
    }

    pub fn with_window(window: usize) -> Result<Self> {
        Self::new(window, DEFAULT_FRAC_BITS)
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    /// `(W - 1) / 2`.
    pub fn half(&self) -> usize {
        self.window / 2
    }

    /// `(W + 1) / 2`.
    pub fn n_scales(&self) -> usize {
        self.window.div_ceil(2)
    }

    pub fn orientations(&self) -> usize {
        ORIENTATIONS
    }

    /// Line lengths `1, 3, …, W`.
    pub fn scales(&self) -> impl Iterator<Item = usize> + Clone {
        (1..=self.window).step_by(2)
    }
}

/// One oriented line of `L` pixels centred on the origin.
///
/// Offsets are ordered along the line, so the central `L'` entries form the
/// pattern of any shorter odd length `L'` at the same orientation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinePattern {
    orientation: usize,
    offsets: Vec<(isize, isize)>,
}

impl LinePattern {
    pub fn orientation(&self) -> usize {
        self.orientation
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }

    /// Angle in degrees, `orientation × 15`.
    pub fn angle_degrees(&self) -> f64 {
        (self.orientation * 15) as f64
    }
}

// tan of the line angle relative to its dominant axis. Angles are reduced to
// (-45°, 45°] before calling tan so that mirrored and rotated orientations get
// exactly negated slopes.
fn slope(orientation: usize) -> (bool, f64) {
    let deg = (orientation % ORIENTATIONS) as i32 * 15;
    let x_major = deg <= 45 || deg >= 135;
    let reduced = if x_major {
        if deg >= 135 {
            deg - 180
        } else {
            deg
        }
    } else {
        90 - deg
    };
    let t = match reduced {
        0 => 0.0,
        45 => 1.0,
        -45 => -1.0,
        r if r > 0 => (r as f64).to_radians().tan(),
        r => -((-r) as f64).to_radians().tan(),
    };
    (x_major, t)
}

/// Rasterizes orientation `k` (angle `15k°`) at odd length `len`.
///
/// Steps one pixel at a time along the dominant axis: `(j, round(j·tanθ))`
/// when `|cosθ| ≥ |sinθ|`, `(round(j·cotθ), j)` otherwise, for
/// `j = -(len-1)/2 ..= (len-1)/2`.
pub fn line_offsets(orientation: usize, len: usize) -> Result<LinePattern> {
    if orientation >= ORIENTATIONS {
        return Err(Error::InvalidParams(format!(
            "orientation index {orientation} out of range 0..{ORIENTATIONS}"
        )));
    }
    if len == 0 || len.is_multiple_of(2) {
        return Err(Error::InvalidParams(format!(
            "line length must be odd and positive, got {len}"
        )));
    }
    let (x_major, t) = slope(orientation);
    let half = (len / 2) as isize;
    let offsets = (-half..=half)
        .map(|j| {
            let minor = (j as f64 * t).round() as isize;
            if x_major {
                (j, minor)
            } else {
                (minor, j)
            }
        })
        .collect();
    Ok(LinePattern {
        orientation,
        offsets,
    })
}

/// The twelve full-length (`W`) lines. Shorter scales are their central
/// slices.
pub fn orientation_lines(window: usize) -> Result<Vec<LinePattern>> {
    (0..ORIENTATIONS)
        .map(|k| line_offsets(k, window))
        .collect()
}

pub fn window_sum(img: &GrayImage, x: usize, y: usize, window: usize) -> u64 {
    let h = (window / 2) as isize;
    let (x, y) = (x as isize, y as isize);
    let mut sum = 0u64;
    for dy in -h..=h {
        for dx in -h..=h {
            sum += img.get_clamped(x + dx, y + dy) as u64;
        }
    }
    sum
}

/// Mean of the `W × W` window centred at `(x, y)`, edge-clamped.
pub fn window_mean(img: &GrayImage, x: usize, y: usize, window: usize) -> f64 {
    window_sum(img, x, y, window) as f64 / (window * window) as f64
}

/// Mean intensity along `pattern` centred at `(x, y)`, edge-clamped.
pub fn line_mean(img: &GrayImage, x: usize, y: usize, pattern: &LinePattern) -> f64 {
    offsets_mean(img, x, y, &pattern.offsets)
}

fn offsets_mean(img: &GrayImage, x: usize, y: usize, offsets: &[(isize, isize)]) -> f64 {
    let (x, y) = (x as isize, y as isize);
    let sum: u64 = offsets
        .iter()
        .map(|&(dx, dy)| img.get_clamped(x + dx, y + dy) as u64)
        .sum();
    sum as f64 / offsets.len() as f64
}

/// Per-pixel detector output for every scale.
#[derive(Clone, Debug, PartialEq)]
pub struct RawResponse {
    pub window_mean: f64,
    /// Brightest line mean per scale, `L = 1, 3, …, W`.
    pub line_max: Vec<f64>,
    /// `line_max[i] - window_mean`.
    pub response: Vec<f64>,
}

/// Computes the raw multi-scale response at `(x, y)` from precomputed lines.
pub fn raw_response_with(
    img: &GrayImage,
    x: usize,
    y: usize,
    params: &MsldParams,
    lines: &[LinePattern],
) -> RawResponse {
    let window_mean = window_mean(img, x, y, params.window());
    let half = params.half();
    let line_max: Vec<f64> = params
        .scales()
        .map(|len| {
            let lo = half - len / 2;
            lines
                .iter()
                .map(|line| offsets_mean(img, x, y, &line.offsets[lo..lo + len]))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let response = line_max.iter().map(|m| m - window_mean).collect();
    RawResponse {
        window_mean,
        line_max,
        response,
    }
}

pub fn raw_response(img: &GrayImage, x: usize, y: usize, params: &MsldParams) -> RawResponse {
    let lines = orientation_lines(params.window()).expect("validated window");
    raw_response_with(img, x, y, params, &lines)
}

/// Single-scale detector: brightest full-length line minus window mean.
pub fn basic_line_response(img: &GrayImage, x: usize, y: usize, window: usize) -> Result<f64> {
    let lines = orientation_lines(window)?;
    let max = lines
        .iter()
        .map(|l| line_mean(img, x, y, l))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(max - window_mean(img, x, y, window))
}
