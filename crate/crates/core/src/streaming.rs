//! Memory-bounded two-pass detector.
//!
//! Pixels arrive once per pass in raster order and go through a line buffer
//! of `(W - 1) · Ncols + W` slots, which is exactly enough to expose the
//! `W × W` window around the pixel `(W - 1) / 2` rows and columns behind the
//! write cursor. For every window centre:
//!
//! * each of the twelve orientations reads its `W` pixels once and builds
//!   all scale sums incrementally (`S₁ = centre`, `S_{L+2} = S_L + both new
//!   endpoints`), then scales by `1/L` (a constant reciprocal in fixed
//!   point);
//! * the brightest line per scale is found with a pairwise comparison tree
//!   and the window mean is subtracted;
//! * the window sum comes from `W` column-sum registers and a rolling
//!   horizontal total.
//!
//! Pass 1 accumulates `Σx`, `Σx²` and the ROI count per scale (and for the
//! inverted green channel), then finalizes `m = Σx/N`,
//! `σ = sqrt(Σx²/N − m²)`. Pass 2 recomputes the raw responses, standardizes
//! them with the stored `(m, σ)` pairs, and writes the combined value
//! straight to the output. No per-scale image is ever held; the only
//! persistent state between passes is `2 · n_scales + 2` numbers.
//!
//! The datapath runs either in `f64` or in binary fixed point (see
//! [`crate::fixedpoint`]).

use std::collections::VecDeque;
use std::fmt;
use std::mem::size_of;

use crate::detector::{orientation_lines, MsldParams, ORIENTATIONS};
use crate::error::{Error, Result};
use crate::fixedpoint::{div_round, FixedError, FixedPoint};
use crate::imageio::{GrayImage, Mask};
use crate::reference::{check_inputs, MeanStd, ResponseMap, ScaleStats, SIGMA_EPSILON};

/// Number format used by the streaming datapath.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arithmetic {
    Float,
    /// Binary fixed point with the given number of fractional bits.
    Fixed(u32),
}

impl fmt::Display for Arithmetic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arithmetic::Float => f.write_str("float"),
            Arithmetic::Fixed(bits) => write!(f, "fixed({bits})"),
        }
    }
}

/// Rolling store of the most recent `(W - 1) · Ncols + W` pixels.
#[derive(Clone, Debug)]
pub struct LineBuffer {
    slots: Vec<u8>,
    ncols: usize,
    written: usize,
}

impl LineBuffer {
    pub fn capacity_for(window: usize, ncols: usize) -> usize {
        (window - 1) * ncols + window
    }

    pub fn new(window: usize, ncols: usize) -> Self {
        Self {
            slots: vec![0; Self::capacity_for(window, ncols)],
            ncols,
            written: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    /// Number of pixels pushed so far.
    pub fn written(&self) -> usize {
        self.written
    }

    pub fn push(&mut self, v: u8) {
        let cap = self.slots.len();
        self.slots[self.written % cap] = v;
        self.written += 1;
    }

    /// Whether pixel `(col, row)` is currently held.
    pub fn holds(&self, col: usize, row: usize) -> bool {
        let idx = row * self.ncols + col;
        idx < self.written && idx + self.slots.len() >= self.written
    }

    /// Pixel `(col, row)`. Panics if it has not arrived yet or was evicted.
    #[inline]
    pub fn get(&self, col: usize, row: usize) -> u8 {
        let idx = row * self.ncols + col;
        assert!(
            idx < self.written && idx + self.slots.len() >= self.written,
            "pixel ({col}, {row}) not in line buffer (written {})",
            self.written
        );
        self.slots[idx % self.slots.len()]
    }
}

/// Sizes of the auxiliary state held by the streaming engine. Input and output
/// images are not counted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemoryFootprint {
    pub line_buffer_slots: usize,
    /// `Σx`, `Σx²` per scale and for the green channel, plus the shared count.
    pub accumulator_words: usize,
    /// Bits each accumulator needs for this image size.
    pub accumulator_bits: u32,
    /// Mean and standard deviation per scale plus the green channel pair.
    pub stored_stats_values: usize,
    /// Stored `(mean, std)` pairs belonging to the scales alone.
    pub stored_scale_values: usize,
    /// Per-pixel working registers: column sums, line sums, responses.
    pub register_words: usize,
    /// Largest single auxiliary buffer, in bytes.
    pub largest_buffer_bytes: usize,
    pub peak_total_bytes: usize,
}

/// Sums of the central `L` samples for `L = 1, 3, …, len`, built outward
/// from the centre. `line` must have odd length with the centre in the
/// middle.
pub fn line_sums_incremental(line: &[u32]) -> Vec<u32> {
    let mut out = vec![0; line.len().div_ceil(2)];
    incremental_sums_into(line, &mut out);
    out
}

fn incremental_sums_into(line: &[u32], out: &mut [u32]) {
    let c = line.len() / 2;
    let mut s = line[c];
    out[0] = s;
    for k in 1..out.len() {
        s += line[c - k] + line[c + k];
        out[k] = s;
    }
}

/// Maximum by pairwise comparison, level by level.
pub fn max_tree<T: Copy + PartialOrd>(values: &[T]) -> T {
    assert!(!values.is_empty());
    let mut level: Vec<T> = values.to_vec();
    while level.len() > 1 {
        let next = level
            .chunks(2)
            .map(|p| match p {
                [a, b] => {
                    if b > a {
                        *b
                    } else {
                        *a
                    }
                }
                [a] => *a,
                _ => unreachable!(),
            })
            .collect();
        level = next;
    }
    level[0]
}

/// Brightest of the twelve line means minus the window mean.
pub fn rrcm_max_subtract(line_means: &[f64; ORIENTATIONS], window_mean: f64) -> f64 {
    max_tree(line_means) - window_mean
}

/// Number formats the datapath can run in.
trait Datapath {
    type Value: Copy + PartialOrd;
    type Acc: Clone;

    fn window_mean(&self, sum: u32) -> Result<Self::Value>;
    /// Mean of a line of scale index `k` (length `2k + 1`).
    fn line_mean(&self, sum: u32, k: usize) -> Result<Self::Value>;
    fn sub(&self, a: Self::Value, b: Self::Value) -> Result<Self::Value>;
    fn pixel(&self, v: u8) -> Result<Self::Value>;

    fn acc_zero(&self) -> Self::Acc;
    fn accumulate(&self, acc: &mut Self::Acc, x: Self::Value) -> Result<()>;
    /// `(mean, std, clamped)` from the accumulated sums over `n` samples.
    fn finalize(&self, acc: &Self::Acc, n: usize) -> Result<(Self::Value, Self::Value, bool)>;

    fn load_stat(&self, v: f64) -> Result<Self::Value>;
    fn to_f64(&self, v: Self::Value) -> f64;

    fn standardize(&self, x: Self::Value, mean: Self::Value, std: Self::Value)
        -> Result<Self::Value>;
    /// Average of `n_scales + 1` standardized terms.
    fn combine(&self, terms: &[Self::Value]) -> Result<f64>;
}

// Divides instead of multiplying by reciprocals so that exact means stay
// exact in f64.
struct FloatPath {
    window_area: f64,
    terms: f64,
}

impl FloatPath {
    fn new(params: &MsldParams) -> Self {
        let w = params.window();
        Self {
            window_area: (w * w) as f64,
            terms: (params.n_scales() + 1) as f64,
        }
    }
}

#[derive(Clone, Copy, Default)]
struct FloatAcc {
    sum: f64,
    sum_sq: f64,
}

impl Datapath for FloatPath {
    type Value = f64;
    type Acc = FloatAcc;

    fn window_mean(&self, sum: u32) -> Result<f64> {
        Ok(sum as f64 / self.window_area)
    }

    fn line_mean(&self, sum: u32, k: usize) -> Result<f64> {
        Ok(sum as f64 / (2 * k + 1) as f64)
    }

    fn sub(&self, a: f64, b: f64) -> Result<f64> {
        Ok(a - b)
    }

    fn pixel(&self, v: u8) -> Result<f64> {
        Ok(v as f64)
    }

    fn acc_zero(&self) -> FloatAcc {
        FloatAcc::default()
    }

    fn accumulate(&self, acc: &mut FloatAcc, x: f64) -> Result<()> {
        acc.sum += x;
        acc.sum_sq += x * x;
        Ok(())
    }

    fn finalize(&self, acc: &FloatAcc, n: usize) -> Result<(f64, f64, bool)> {
        let n = n as f64;
        let mean = acc.sum / n;
        let var = acc.sum_sq / n - mean * mean;
        if var < 0.0 {
            Ok((mean, 0.0, true))
        } else {
            Ok((mean, var.sqrt(), false))
        }
    }

    fn load_stat(&self, v: f64) -> Result<f64> {
        Ok(v)
    }

    fn to_f64(&self, v: f64) -> f64 {
        v
    }

    fn standardize(&self, x: f64, mean: f64, std: f64) -> Result<f64> {
        Ok(crate::reference::standardize(x, mean, std))
    }

    fn combine(&self, terms: &[f64]) -> Result<f64> {
        Ok(terms.iter().sum::<f64>() / self.terms)
    }
}

struct FixedPath {
    frac_bits: u32,
    recip_window: FixedPoint,
    recip_len: Vec<FixedPoint>,
    recip_terms: FixedPoint,
}

impl FixedPath {
    fn new(params: &MsldParams, frac_bits: u32) -> Result<Self> {
        let w = params.window() as i64;
        Ok(Self {
            frac_bits,
            recip_window: FixedPoint::from_ratio(1, w * w, frac_bits)?,
            recip_len: params
                .scales()
                .map(|l| FixedPoint::from_ratio(1, l as i64, frac_bits))
                .collect::<Result<_, FixedError>>()?,
            recip_terms: FixedPoint::from_ratio(1, params.n_scales() as i64 + 1, frac_bits)?,
        })
    }
}

/// `Σ raw` at `f` fractional bits and `Σ raw²` at `2f`.
#[derive(Clone, Copy, Default)]
struct FixedAcc {
    sum: i128,
    sum_sq: i128,
}

impl Datapath for FixedPath {
    type Value = FixedPoint;
    type Acc = FixedAcc;

    fn window_mean(&self, sum: u32) -> Result<FixedPoint> {
        Ok(FixedPoint::from_int(sum as i64, self.frac_bits)?.checked_mul(self.recip_window)?)
    }

    fn line_mean(&self, sum: u32, k: usize) -> Result<FixedPoint> {
        Ok(FixedPoint::from_int(sum as i64, self.frac_bits)?.checked_mul(self.recip_len[k])?)
    }

    fn sub(&self, a: FixedPoint, b: FixedPoint) -> Result<FixedPoint> {
        Ok(a.checked_sub(b)?)
    }

    fn pixel(&self, v: u8) -> Result<FixedPoint> {
        Ok(FixedPoint::from_int(v as i64, self.frac_bits)?)
    }

    fn acc_zero(&self) -> FixedAcc {
        FixedAcc::default()
    }

    fn accumulate(&self, acc: &mut FixedAcc, x: FixedPoint) -> Result<()> {
        let r = x.raw() as i128;
        acc.sum = acc.sum.checked_add(r).ok_or(FixedError::Overflow)?;
        acc.sum_sq = acc.sum_sq.checked_add(r * r).ok_or(FixedError::Overflow)?;
        Ok(())
    }

    fn finalize(&self, acc: &FixedAcc, n: usize) -> Result<(FixedPoint, FixedPoint, bool)> {
        let f = self.frac_bits;
        let n = n as i128;
        let to_fx = |raw: i128| -> Result<FixedPoint> {
            let raw = i64::try_from(raw).map_err(|_| FixedError::Overflow)?;
            Ok(FixedPoint::from_raw(raw, f)?)
        };
        let mean = to_fx(div_round(acc.sum, n))?;
        // Σ raw² carries 2f fractional bits: divide by N and drop f bits in one rounding
        let mean_sq_in = to_fx(div_round(acc.sum_sq, n << f))?;
        let var = mean_sq_in.checked_sub(mean.checked_mul(mean)?)?;
        if var.raw() < 0 {
            Ok((mean, FixedPoint::zero(f), true))
        } else {
            Ok((mean, var.checked_sqrt()?, false))
        }
    }

    fn load_stat(&self, v: f64) -> Result<FixedPoint> {
        Ok(FixedPoint::from_f64(v, self.frac_bits)?)
    }

    fn to_f64(&self, v: FixedPoint) -> f64 {
        v.to_f64()
    }

    fn standardize(&self, x: FixedPoint, mean: FixedPoint, std: FixedPoint) -> Result<FixedPoint> {
        if std.to_f64() < SIGMA_EPSILON {
            return Ok(FixedPoint::zero(self.frac_bits));
        }
        Ok(x.checked_sub(mean)?.checked_div(std)?)
    }

    fn combine(&self, terms: &[FixedPoint]) -> Result<f64> {
        let mut sum = FixedPoint::zero(self.frac_bits);
        for &t in terms {
            sum = sum.checked_add(t)?;
        }
        Ok(sum.checked_mul(self.recip_terms)?.to_f64())
    }
}

/// Per-pixel state shared by both passes: the line buffer and the working
/// registers of the line, window and max units.
struct Scanner {
    width: usize,
    height: usize,
    window: usize,
    n_scales: usize,
    /// Full-length offsets per orientation, ordered along the line.
    lines: Vec<Vec<(isize, isize)>>,
    buffer: LineBuffer,
    /// Column sums of the current window, left to right.
    columns: VecDeque<u32>,
    window_sum: u32,
    line_pixels: Vec<u32>,
    /// `[orientation][scale]`
    line_sums: Vec<u32>,
}

impl Scanner {
    fn new(img: &GrayImage, params: &MsldParams) -> Result<Self> {
        let window = params.window();
        let n_scales = params.n_scales();
        let lines = orientation_lines(window)?
            .into_iter()
            .map(|l| l.offsets().to_vec())
            .collect();
        Ok(Self {
            width: img.width(),
            height: img.height(),
            window,
            n_scales,
            lines,
            buffer: LineBuffer::new(window, img.width()),
            columns: VecDeque::with_capacity(window),
            window_sum: 0,
            line_pixels: vec![0; window],
            line_sums: vec![0; ORIENTATIONS * n_scales],
        })
    }

    fn register_words(&self) -> usize {
        self.window + self.window + ORIENTATIONS * self.n_scales + 1
    }

    fn register_bytes(&self) -> usize {
        (self.columns.capacity() + self.line_pixels.len() + self.line_sums.len() + 1)
            * size_of::<u32>()
    }

    #[inline]
    fn clamp_col(&self, c: isize) -> usize {
        c.clamp(0, self.width as isize - 1) as usize
    }

    #[inline]
    fn clamp_row(&self, r: isize) -> usize {
        r.clamp(0, self.height as isize - 1) as usize
    }

    /// Raster index of the last pixel the window at `(x, y)` reads.
    fn last_needed(&self, x: usize, y: usize) -> usize {
        let h = self.window / 2;
        (y + h).min(self.height - 1) * self.width + (x + h).min(self.width - 1)
    }

    fn column_sum(&self, col: usize, y: usize) -> u32 {
        let h = (self.window / 2) as isize;
        (-h..=h)
            .map(|dy| self.buffer.get(col, self.clamp_row(y as isize + dy)) as u32)
            .sum()
    }

    /// Updates the window-sum registers for centre `(x, y)`; centres must be
    /// visited in raster order.
    fn advance_window(&mut self, x: usize, y: usize) {
        let h = (self.window / 2) as isize;
        if x == 0 {
            self.columns.clear();
            self.window_sum = 0;
            for dx in -h..=h {
                let s = self.column_sum(self.clamp_col(dx), y);
                self.columns.push_back(s);
                self.window_sum += s;
            }
        } else {
            let s = self.column_sum(self.clamp_col(x as isize + h), y);
            let old = self.columns.pop_front().expect("window registers");
            self.columns.push_back(s);
            self.window_sum = self.window_sum + s - old;
        }
    }

    fn compute_line_sums(&mut self, x: usize, y: usize) {
        let (cx, cy) = (x as isize, y as isize);
        for o in 0..ORIENTATIONS {
            for (i, &(dx, dy)) in self.lines[o].iter().enumerate() {
                let col = self.clamp_col(cx + dx);
                let row = self.clamp_row(cy + dy);
                self.line_pixels[i] = self.buffer.get(col, row) as u32;
            }
            let out = &mut self.line_sums[o * self.n_scales..(o + 1) * self.n_scales];
            incremental_sums_into(&self.line_pixels, out);
        }
    }

    /// Raw responses of every scale at `(x, y)` into `out`.
    fn responses<D: Datapath>(
        &self,
        dp: &D,
        out: &mut [D::Value],
        means: &mut [D::Value; ORIENTATIONS],
    ) -> Result<()> {
        let wmean = dp.window_mean(self.window_sum)?;
        for (k, r) in out.iter_mut().enumerate() {
            for (o, m) in means.iter_mut().enumerate() {
                *m = dp.line_mean(self.line_sums[o * self.n_scales + k], k)?;
            }
            *r = dp.sub(max_tree(&means[..]), wmean)?;
        }
        Ok(())
    }

    /// Streams `img` through the buffer and calls `visit(x, y, centre_pixel)`
    /// for each window centre once its window is complete. Non-ROI centres
    /// are visited too so the window registers stay in step.
    fn run(
        &mut self,
        img: &GrayImage,
        mut visit: impl FnMut(&mut Self, usize, usize, u8) -> Result<()>,
    ) -> Result<()> {
        let total = self.width * self.height;
        let mut next = 0usize;
        for &px in img.data() {
            self.buffer.push(px);
            while next < total {
                let (x, y) = (next % self.width, next / self.width);
                if self.last_needed(x, y) >= self.buffer.written() {
                    break;
                }
                self.advance_window(x, y);
                let centre = self.buffer.get(x, y);
                visit(self, x, y, centre)?;
                next += 1;
            }
        }
        debug_assert_eq!(next, total);
        Ok(())
    }
}

/// Bits needed by `Σx²` for `n` samples of magnitude up to `max_abs_raw`.
fn accumulator_bits(n: usize, max_abs_raw: u128) -> u32 {
    let bound = (n as u128).saturating_mul(max_abs_raw.saturating_mul(max_abs_raw));
    128 - bound.leading_zeros() + 1
}

fn max_abs_raw(arith: Arithmetic) -> u128 {
    // |raw response| ≤ 255 and pixels ≤ 255
    match arith {
        Arithmetic::Float => 255,
        Arithmetic::Fixed(f) => 255u128 << f,
    }
}

fn pass1_with<D: Datapath>(
    dp: &D,
    img: &GrayImage,
    mask: &Mask,
    params: &MsldParams,
) -> Result<(ScaleStats, usize)> {
    let n_scales = params.n_scales();
    let mut scanner = Scanner::new(img, params)?;
    let mut accs = vec![dp.acc_zero(); n_scales];
    let mut igc_acc = dp.acc_zero();
    let mut count = 0usize;
    let mut resp = vec![dp.pixel(0)?; n_scales];
    let mut means = [dp.pixel(0)?; ORIENTATIONS];

    scanner.run(img, |s, x, y, centre| {
        if !mask.get(x, y) {
            return Ok(());
        }
        s.compute_line_sums(x, y);
        s.responses(dp, &mut resp, &mut means)?;
        for (acc, &r) in accs.iter_mut().zip(&resp) {
            dp.accumulate(acc, r)?;
        }
        dp.accumulate(&mut igc_acc, dp.pixel(centre)?)?;
        count += 1;
        Ok(())
    })?;

    if count == 0 {
        return Err(Error::EmptyRoi);
    }
    let mut clamps = 0;
    let mut finish = |acc: &D::Acc| -> Result<MeanStd> {
        let (m, s, clamped) = dp.finalize(acc, count)?;
        clamps += clamped as usize;
        Ok(MeanStd {
            mean: dp.to_f64(m),
            std: dp.to_f64(s),
        })
    };
    let scales = accs.iter().map(&mut finish).collect::<Result<Vec<_>>>()?;
    let igc = finish(&igc_acc)?;
    let regs = scanner.register_bytes()
        + (resp.len() + means.len()) * size_of::<D::Value>();
    let aux = scanner.buffer.capacity()
        + regs
        + (accs.len() + 1) * size_of::<D::Acc>()
        + size_of::<usize>();
    Ok((
        ScaleStats {
            scales,
            igc,
            roi_count: count,
            variance_clamps: clamps,
        },
        aux,
    ))
}

fn pass2_with<D: Datapath>(
    dp: &D,
    img: &GrayImage,
    mask: &Mask,
    params: &MsldParams,
    stats: &ScaleStats,
) -> Result<(ResponseMap, usize)> {
    let n_scales = params.n_scales();
    let stored: Vec<(D::Value, D::Value)> = stats
        .scales
        .iter()
        .chain(std::iter::once(&stats.igc))
        .map(|s| Ok((dp.load_stat(s.mean)?, dp.load_stat(s.std)?)))
        .collect::<Result<_>>()?;
    let mut scanner = Scanner::new(img, params)?;
    let mut out = ResponseMap::zeros(img.width(), img.height());
    let mut resp = vec![dp.pixel(0)?; n_scales];
    let mut terms = vec![dp.pixel(0)?; n_scales + 1];
    let mut means = [dp.pixel(0)?; ORIENTATIONS];

    scanner.run(img, |s, x, y, centre| {
        if !mask.get(x, y) {
            return Ok(());
        }
        s.compute_line_sums(x, y);
        s.responses(dp, &mut resp, &mut means)?;
        for ((t, &r), &(m, sd)) in terms.iter_mut().zip(&resp).zip(&stored) {
            *t = dp.standardize(r, m, sd)?;
        }
        let (gm, gs) = stored[n_scales];
        terms[n_scales] = dp.standardize(dp.pixel(centre)?, gm, gs)?;
        out.set(x, y, dp.combine(&terms)?);
        Ok(())
    })?;

    let regs = scanner.register_bytes()
        + (resp.len() + terms.len() + means.len()) * size_of::<D::Value>();
    let aux = scanner.buffer.capacity() + regs + stored.len() * 2 * size_of::<D::Value>();
    Ok((out, aux))
}

fn check_stats(mask: &Mask, params: &MsldParams, stats: &ScaleStats) -> Result<()> {
    if stats.scales.len() != params.n_scales() {
        return Err(Error::StatsMismatch(format!(
            "{} scale statistics for {} scales",
            stats.scales.len(),
            params.n_scales()
        )));
    }
    let n = mask.count();
    if stats.roi_count != n {
        return Err(Error::StatsMismatch(format!(
            "statistics cover {} ROI pixels, mask has {n}",
            stats.roi_count
        )));
    }
    Ok(())
}

fn check_accumulators(img: &GrayImage, arith: Arithmetic) -> Result<u32> {
    let bits = accumulator_bits(img.width() * img.height(), max_abs_raw(arith));
    if bits > 127 {
        return Err(FixedError::Overflow.into());
    }
    Ok(bits)
}

/// First pass: ROI mean and standard deviation of every scale and of the
/// green channel, without storing any response.
pub fn stream_pass1(
    img: &GrayImage,
    mask: &Mask,
    params: &MsldParams,
    arith: Arithmetic,
) -> Result<ScaleStats> {
    check_inputs(img, mask)?;
    check_accumulators(img, arith)?;
    Ok(match arith {
        Arithmetic::Float => pass1_with(&FloatPath::new(params), img, mask, params)?.0,
        Arithmetic::Fixed(f) => pass1_with(&FixedPath::new(params, f)?, img, mask, params)?.0,
    })
}

/// Second pass: recomputes the raw responses and emits the standardized,
/// combined value per pixel.
pub fn stream_pass2(
    img: &GrayImage,
    mask: &Mask,
    params: &MsldParams,
    stats: &ScaleStats,
    arith: Arithmetic,
) -> Result<ResponseMap> {
    check_inputs(img, mask)?;
    check_stats(mask, params, stats)?;
    Ok(match arith {
        Arithmetic::Float => pass2_with(&FloatPath::new(params), img, mask, params, stats)?.0,
        Arithmetic::Fixed(f) => {
            pass2_with(&FixedPath::new(params, f)?, img, mask, params, stats)?.0
        }
    })
}

/// Both passes plus the memory accounting.
pub fn msld_streaming(
    img: &GrayImage,
    mask: &Mask,
    params: &MsldParams,
    arith: Arithmetic,
) -> Result<(ResponseMap, ScaleStats, MemoryFootprint)> {
    check_inputs(img, mask)?;
    let accumulator_bits = check_accumulators(img, arith)?;
    let (out, stats, aux1, aux2, value_bytes) = match arith {
        Arithmetic::Float => {
            let dp = FloatPath::new(params);
            let (stats, a1) = pass1_with(&dp, img, mask, params)?;
            let (out, a2) = pass2_with(&dp, img, mask, params, &stats)?;
            (out, stats, a1, a2, size_of::<f64>())
        }
        Arithmetic::Fixed(f) => {
            let dp = FixedPath::new(params, f)?;
            let (stats, a1) = pass1_with(&dp, img, mask, params)?;
            let (out, a2) = pass2_with(&dp, img, mask, params, &stats)?;
            (out, stats, a1, a2, size_of::<FixedPoint>())
        }
    };
    let n = params.n_scales();
    let stored_stats_values = 2 * n + 2;
    let slots = LineBuffer::capacity_for(params.window(), img.width());
    let probe = Scanner::new(img, params)?;
    let footprint = MemoryFootprint {
        line_buffer_slots: slots,
        accumulator_words: 2 * (n + 1) + 1,
        accumulator_bits,
        stored_stats_values,
        stored_scale_values: 2 * n,
        register_words: probe.register_words(),
        largest_buffer_bytes: slots.max(ORIENTATIONS * n * size_of::<u32>()),
        // the stored statistics outlive pass 1 and coexist with pass 2
        peak_total_bytes: aux1.max(aux2) + stored_stats_values * value_bytes,
    };
    Ok((out, stats, footprint))
}

/// Raw per-scale response images computed by the streaming datapath.
///
/// This materializes `n_scales` full images and so is not memory bounded;
/// it exists for inspection and testing.
pub fn stream_raw_responses(
    img: &GrayImage,
    mask: &Mask,
    params: &MsldParams,
    arith: Arithmetic,
) -> Result<Vec<ResponseMap>> {
    fn collect<D: Datapath>(
        dp: &D,
        img: &GrayImage,
        mask: &Mask,
        params: &MsldParams,
    ) -> Result<Vec<ResponseMap>> {
        let n = params.n_scales();
        let mut maps = vec![ResponseMap::zeros(img.width(), img.height()); n];
        let mut scanner = Scanner::new(img, params)?;
        let mut resp = vec![dp.pixel(0)?; n];
        let mut means = [dp.pixel(0)?; ORIENTATIONS];
        scanner.run(img, |s, x, y, _| {
            if !mask.get(x, y) {
                return Ok(());
            }
            s.compute_line_sums(x, y);
            s.responses(dp, &mut resp, &mut means)?;
            for (m, &r) in maps.iter_mut().zip(&resp) {
                m.set(x, y, dp.to_f64(r));
            }
            Ok(())
        })?;
        Ok(maps)
    }
    check_inputs(img, mask)?;
    match arith {
        Arithmetic::Float => collect(&FloatPath::new(params), img, mask, params),
        Arithmetic::Fixed(f) => collect(&FixedPath::new(params, f)?, img, mask, params),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{msld_reference, raw_response_maps, scale_stats};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_case(seed: u64, w: usize, h: usize) -> (GrayImage, Mask) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let img = GrayImage::from_fn(w, h, |_, _| rng.gen());
        let mask = Mask::from_fn(w, h, |_, _| rng.gen_bool(0.85));
        (img, mask)
    }

    #[test]
    fn incremental_sums_examples() {
        assert_eq!(line_sums_incremental(&[1; 5]), vec![1, 3, 5]);
        assert_eq!(line_sums_incremental(&[5, 0, 2, 0, 5]), vec![2, 2, 12]);
        assert_eq!(line_sums_incremental(&[9]), vec![9]);
    }

    #[test]
    fn incremental_sums_exhaustive_small() {
        // every line of length ≤ 7 over the alphabet {0, 1, 255}
        let alphabet = [0u32, 1, 255];
        for len in [1usize, 3, 5, 7] {
            let total = alphabet.len().pow(len as u32);
            for code in 0..total {
                let mut c = code;
                let line: Vec<u32> = (0..len)
                    .map(|_| {
                        let v = alphabet[c % 3];
                        c /= 3;
                        v
                    })
                    .collect();
                let sums = line_sums_incremental(&line);
                for (k, s) in sums.iter().enumerate() {
                    let direct: u32 = line[len / 2 - k..=len / 2 + k].iter().sum();
                    assert_eq!(*s, direct);
                }
            }
        }
    }

    #[test]
    fn rrcm_examples() {
        assert_eq!(rrcm_max_subtract(&[7.5; 12], 7.5), 0.0);
        let mut m = [0.0; 12];
        m[11] = 100.0;
        assert_eq!(rrcm_max_subtract(&m, 20.0), 80.0);
    }

    #[test]
    fn max_tree_odd_lengths() {
        assert_eq!(max_tree(&[3]), 3);
        assert_eq!(max_tree(&[1, 5, 2]), 5);
        assert_eq!(max_tree(&[4, 1, 2, 3, 9, 0, 7]), 9);
    }

    #[test]
    fn line_buffer_eviction() {
        let mut b = LineBuffer::new(3, 4);
        assert_eq!(b.capacity(), 2 * 4 + 3);
        for v in 0..20u8 {
            b.push(v);
        }
        // holds raster indices 9..=19
        assert!(!b.holds(0, 2)); // index 8
        assert!(b.holds(1, 2));
        assert_eq!(b.get(1, 2), 9);
        assert_eq!(b.get(3, 4), 19);
        assert!(!b.holds(0, 5));
    }

    #[test]
    #[should_panic(expected = "not in line buffer")]
    fn line_buffer_rejects_evicted_reads() {
        let mut b = LineBuffer::new(3, 4);
        for v in 0..20u8 {
            b.push(v);
        }
        b.get(0, 0);
    }

    #[test]
    fn constant_image_zero_stats_and_output() {
        let img = GrayImage::filled(17, 9, 200);
        let mask = Mask::full(17, 9);
        let p = MsldParams::with_window(5).unwrap();
        for arith in [Arithmetic::Float, Arithmetic::Fixed(18)] {
            let (out, stats, _) = msld_streaming(&img, &mask, &p, arith).unwrap();
            assert!(stats.scales.iter().all(|s| s.std == 0.0));
            match arith {
                Arithmetic::Float => assert!(stats.scales.iter().all(|s| s.mean == 0.0)),
                // reciprocal rounding of 1/L and 1/W² leaves a constant offset
                Arithmetic::Fixed(_) => assert!(stats.scales.iter().all(|s| s.mean.abs() < 0.01)),
            }
            assert_eq!(stats.igc, MeanStd { mean: 200.0, std: 0.0 });
            assert_eq!(stats.variance_clamps, 0);
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn raw_responses_match_reference_including_borders() {
        // tall, wide and tiny shapes where the window overhangs every edge
        for (seed, (w, h), win) in [
            (1, (6, 20), 7),
            (2, (23, 5), 5),
            (3, (2, 2), 3),
            (4, (1, 9), 5),
            (5, (16, 16), 11),
        ] {
            let (img, mask) = random_case(seed, w, h);
            let mask = if mask.count() == 0 { Mask::full(w, h) } else { mask };
            let p = MsldParams::with_window(win).unwrap();
            let a = raw_response_maps(&img, &mask, &p).unwrap();
            let b = stream_raw_responses(&img, &mask, &p, Arithmetic::Float).unwrap();
            for (ma, mb) in a.iter().zip(&b) {
                for (va, vb) in ma.data().iter().zip(mb.data()) {
                    assert!((va - vb).abs() < 1e-12, "{w}x{h} W={win}: {va} vs {vb}");
                }
            }
        }
    }

    #[test]
    fn float_pass1_matches_reference_stats() {
        let (img, mask) = random_case(7, 30, 22);
        let p = MsldParams::with_window(7).unwrap();
        let stats = stream_pass1(&img, &mask, &p, Arithmetic::Float).unwrap();
        let raw = raw_response_maps(&img, &mask, &p).unwrap();
        assert_eq!(stats.variance_clamps, 0);
        for (m, s) in raw.iter().zip(&stats.scales) {
            let (r, n) = scale_stats(m, &mask).unwrap();
            assert_eq!(n, stats.roi_count);
            assert!((r.mean - s.mean).abs() <= 1e-9 * r.mean.abs().max(1e-300));
            assert!((r.std - s.std).abs() <= 1e-9 * r.std);
        }
    }

    #[test]
    fn float_streaming_matches_reference_output() {
        for (seed, win) in [(10, 5), (11, 7), (12, 11), (13, 15)] {
            let (img, mask) = random_case(seed, 28, 24);
            let p = MsldParams::with_window(win).unwrap();
            let (a, _) = msld_reference(&img, &mask, &p).unwrap();
            let (b, _, _) = msld_streaming(&img, &mask, &p, Arithmetic::Float).unwrap();
            let max = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(max <= 1e-9, "W={win}: {max}");
        }
    }

    #[test]
    fn fixed_mode_stays_close() {
        let (img, mask) = random_case(21, 24, 24);
        let p = MsldParams::with_window(7).unwrap();
        let (a, _) = msld_reference(&img, &mask, &p).unwrap();
        let (b, s, _) = msld_streaming(&img, &mask, &p, Arithmetic::Fixed(18)).unwrap();
        assert_eq!(s.variance_clamps, 0);
        let max = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-3, "{max}");
        // coarse format degrades gracefully
        let (c, _, _) = msld_streaming(&img, &mask, &p, Arithmetic::Fixed(6)).unwrap();
        let coarse = a
            .data()
            .iter()
            .zip(c.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(coarse > max);
    }

    #[test]
    fn pass2_rejects_mismatched_stats() {
        let (img, mask) = random_case(3, 12, 12);
        let p5 = MsldParams::with_window(5).unwrap();
        let p7 = MsldParams::with_window(7).unwrap();
        let stats = stream_pass1(&img, &mask, &p5, Arithmetic::Float).unwrap();
        assert!(matches!(
            stream_pass2(&img, &mask, &p7, &stats, Arithmetic::Float),
            Err(Error::StatsMismatch(_))
        ));
        let other = Mask::full(12, 12);
        assert!(matches!(
            stream_pass2(&img, &other, &p5, &stats, Arithmetic::Float),
            Err(Error::StatsMismatch(_))
        ));
    }

    #[test]
    fn empty_roi_rejected() {
        let img = GrayImage::filled(4, 4, 1);
        let mask = Mask::from_fn(4, 4, |_, _| false);
        let p = MsldParams::with_window(3).unwrap();
        assert!(matches!(
            stream_pass1(&img, &mask, &p, Arithmetic::Float),
            Err(Error::EmptyRoi)
        ));
    }

    #[test]
    fn footprint_counts() {
        let img = GrayImage::filled(565, 20, 3);
        let mask = Mask::full(565, 20);
        let p = MsldParams::with_window(15).unwrap();
        let (_, _, fp) = msld_streaming(&img, &mask, &p, Arithmetic::Fixed(18)).unwrap();
        assert_eq!(fp.line_buffer_slots, 7925);
        assert_eq!(fp.stored_stats_values, 18);
        assert_eq!(fp.stored_scale_values, 16);
        assert_eq!(fp.accumulator_words, 19);
        assert!(fp.peak_total_bytes < 565 * 20);

        let p41 = MsldParams::with_window(41).unwrap();
        let img = GrayImage::filled(60, 45, 3);
        let (_, _, fp) =
            msld_streaming(&img, &Mask::full(60, 45), &p41, Arithmetic::Float).unwrap();
        assert_eq!(fp.stored_stats_values, 2 * 21 + 2);
        assert_eq!(fp.line_buffer_slots, 40 * 60 + 41);
    }

    #[test]
    fn accumulator_sizing() {
        assert_eq!(accumulator_bits(1, 1), 2);
        // DRIVE-sized image at 18 fractional bits fits comfortably
        let bits = accumulator_bits(565 * 584, 255u128 << 18);
        assert!(bits < 96, "{bits}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn determinism(seed in any::<u64>(), fixed in any::<bool>()) {
            let (img, mask) = random_case(seed, 13, 11);
            prop_assume!(mask.count() > 0);
            let p = MsldParams::with_window(5).unwrap();
            let arith = if fixed { Arithmetic::Fixed(18) } else { Arithmetic::Float };
            let (a, sa, _) = msld_streaming(&img, &mask, &p, arith).unwrap();
            let (b, sb, _) = msld_streaming(&img, &mask, &p, arith).unwrap();
            prop_assert_eq!(sa, sb);
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits_a, bits_b);
        }

        #[test]
        fn incremental_sums_random(line in proptest::collection::vec(0u32..=255, 1..=41usize)) {
            let line = if line.len() % 2 == 0 { &line[1..] } else { &line[..] };
            let sums = line_sums_incremental(line);
            let c = line.len() / 2;
            for (k, s) in sums.iter().enumerate() {
                prop_assert_eq!(*s, line[c - k..=c + k].iter().sum::<u32>());
            }
        }

        #[test]
        fn rrcm_matches_linear_scan(vals in proptest::array::uniform12(-1e3f64..1e3), wm in -1e3f64..1e3) {
            let mut best = f64::NEG_INFINITY;
            for v in vals {
                if v > best {
                    best = v;
                }
            }
            prop_assert_eq!(rrcm_max_subtract(&vals, wm), best - wm);
        }
    }
}
