//! Image and mask types plus a small netpbm codec.
//!
//! Only PGM (`P2`/`P5`) and PPM (`P3`/`P6`) with a maxval of exactly 255 are
//! understood. Anything else (TIFF, GIF, PNG) has to be converted beforehand,
//! e.g. with `convert 01_test.tif 01_test.ppm`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel 8-bit image stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        assert!(width >= 1 && height >= 1, "image must be at least 1x1");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self::from_fn(width, height, |_, _| value)
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

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Sample with coordinates clamped to the nearest edge pixel.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> u8 {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.data[cy * self.width + cx]
    }

    /// `255 - v` for every pixel.
    pub fn inverted(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| 255 - v).collect(),
        }
    }
}

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<[u8; 3]>) -> Result<Self> {
        check_dims(width, height, data.len())?;
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

    pub fn data(&self) -> &[[u8; 3]] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.data[y * self.width + x]
    }
}

/// Binary region-of-interest mask; `true` marks pixels inside the retina.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        assert!(width >= 1 && height >= 1, "mask must be at least 1x1");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self::from_fn(width, height, |_, _| true)
    }

    /// Thresholds a gray image: any value above zero is inside the ROI.
    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            width: img.width,
            height: img.height,
            data: img.data.iter().map(|&v| v > 0).collect(),
        }
    }

    /// 255 for `true`, 0 for `false`.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
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

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Errors with [`Error::DimensionMismatch`] unless the mask is `dims`.
    pub fn expect_dims(&self, what: &'static str, dims: (usize, usize)) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::DimensionMismatch {
                what,
                expected: dims,
                found: self.dims(),
            });
        }
        Ok(())
    }
}

/// A decoded netpbm file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PnmImage {
    Gray(GrayImage),
    Rgb(RgbImage),
}

impl PnmImage {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            PnmImage::Gray(g) => g.dims(),
            PnmImage::Rgb(c) => c.dims(),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            PnmImage::Gray(_) => "PGM",
            PnmImage::Rgb(_) => "PPM",
        }
    }

    pub fn into_gray(self) -> Result<GrayImage> {
        match self {
            PnmImage::Gray(g) => Ok(g),
            other => Err(Error::UnexpectedFormat {
                expected: "PGM",
                found: other.kind(),
            }),
        }
    }

    pub fn into_rgb(self) -> Result<RgbImage> {
        match self {
            PnmImage::Rgb(c) => Ok(c),
            other => Err(Error::UnexpectedFormat {
                expected: "PPM",
                found: other.kind(),
            }),
        }
    }
}

impl From<GrayImage> for PnmImage {
    fn from(g: GrayImage) -> Self {
        PnmImage::Gray(g)
    }
}

impl From<RgbImage> for PnmImage {
    fn from(c: RgbImage) -> Self {
        PnmImage::Rgb(c)
    }
}

fn check_dims(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidImage(format!(
            "dimensions must be at least 1x1, got {width}x{height}"
        )));
    }
    if width.checked_mul(height) != Some(len) {
        return Err(Error::InvalidImage(format!(
            "{width}x{height} image needs {} samples, got {len}",
            width.saturating_mul(height)
        )));
    }
    Ok(())
}

/// Inverted green channel: `255 - g` for every pixel. Vessels come out bright.
pub fn extract_inverted_green(rgb: &RgbImage) -> GrayImage {
    GrayImage {
        width: rgb.width,
        height: rgb.height,
        data: rgb.data.iter().map(|p| 255 - p[1]).collect(),
    }
}

/// Loads an image for the detector: PPM inputs go through
/// [`extract_inverted_green`], PGM inputs are taken to be a green channel and
/// are inverted.
pub fn load_detector_input(path: impl AsRef<Path>) -> Result<GrayImage> {
    Ok(match load_pnm(path)? {
        PnmImage::Rgb(c) => extract_inverted_green(&c),
        PnmImage::Gray(g) => g.inverted(),
    })
}

pub fn load_pnm(path: impl AsRef<Path>) -> Result<PnmImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let img = load_pnm(path)?.into_gray()?;
    Ok(Mask::from_gray(&img))
}

/// Writes binary `P5`/`P6`.
pub fn save_pnm(image: &PnmImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pnm(image)).map_err(|e| Error::io(path, e))
}

pub fn encode_pnm(image: &PnmImage) -> Vec<u8> {
    match image {
        PnmImage::Gray(g) => {
            let mut out = format!("P5\n{} {}\n255\n", g.width, g.height).into_bytes();
            out.extend_from_slice(&g.data);
            out
        }
        PnmImage::Rgb(c) => {
            let mut out = format!("P6\n{} {}\n255\n", c.width, c.height).into_bytes();
            out.reserve(c.data.len() * 3);
            for px in &c.data {
                out.extend_from_slice(px);
            }
            out
        }
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<PnmImage> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur
        .token()
        .ok_or_else(|| Error::MalformedHeader("missing magic number".into()))?;
    let (channels, binary) = match magic {
        b"P2" => (1, false),
        b"P5" => (1, true),
        b"P3" => (3, false),
        b"P6" => (3, true),
        other => {
            return Err(Error::MalformedHeader(format!(
                "unsupported magic {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let width = cur.header_number("width")?;
    let height = cur.header_number("height")?;
    let maxval = cur.header_number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader(format!(
            "zero dimension {width}x{height}"
        )));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    let expected = (width as usize)
        .checked_mul(height as usize)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::MalformedHeader("image dimensions overflow".into()))?;

    let samples = if binary {
        // exactly one whitespace byte separates maxval from the raster
        match cur.bytes.get(cur.pos) {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            _ => {
                return Err(Error::MalformedHeader(
                    "missing whitespace after maxval".into(),
                ))
            }
        }
        let payload = &cur.bytes[cur.pos..];
        if payload.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: payload.len(),
            });
        }
        payload[..expected].to_vec()
    } else {
        let mut out = Vec::with_capacity(expected);
        while out.len() < expected {
            let Some(tok) = cur.token() else { break };
            let v = parse_u32(tok)
                .filter(|&v| v <= 255)
                .ok_or_else(|| {
                    Error::MalformedPayload(format!(
                        "bad sample {:?}",
                        String::from_utf8_lossy(tok)
                    ))
                })?;
            out.push(v as u8);
        }
        if out.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: out.len(),
            });
        }
        out
    };

    let (width, height) = (width as usize, height as usize);
    Ok(if channels == 1 {
        PnmImage::Gray(GrayImage {
            width,
            height,
            data: samples,
        })
    } else {
        PnmImage::Rgb(RgbImage {
            width,
            height,
            data: samples
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect(),
        })
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    /// Next whitespace-delimited token, skipping `#` comments.
    fn token(&mut self) -> Option<&'a [u8]> {
        loop {
            match self.bytes.get(self.pos)? {
                b if b.is_ascii_whitespace() => self.pos += 1,
                b'#' => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' || b == b'\r' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = self.pos;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() || b == b'#' {
                break;
            }
            self.pos += 1;
        }
        Some(&self.bytes[start..self.pos])
    }

    fn header_number(&mut self, field: &str) -> Result<u32> {
        let tok = self
            .token()
            .ok_or_else(|| Error::MalformedHeader(format!("missing {field}")))?;
        parse_u32(tok).ok_or_else(|| {
            Error::MalformedHeader(format!(
                "{field} is not a number: {:?}",
                String::from_utf8_lossy(tok)
            ))
        })
    }
}

fn parse_u32(tok: &[u8]) -> Option<u32> {
    std::str::from_utf8(tok).ok()?.parse().ok()
}
