//! Command-line front end.
//!
//! Commands load their inputs and run to completion before writing anything,
//! so a failing command leaves no partial output behind.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::detector::{MsldParams, DEFAULT_FRAC_BITS, DEFAULT_WINDOW};
use crate::error::Error;
use crate::eval::{best_threshold, binarize, metrics_at, MetricsReport};
use crate::imageio::{load_detector_input, load_mask, save_pnm, GrayImage, Mask};
use crate::reference::{msld_reference, ResponseMap, ScaleStats};
use crate::streaming::{msld_streaming, stream_pass1, stream_pass2, Arithmetic, MemoryFootprint};

pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

const RESPONSE_MAGIC: &str = "MSLDF";

#[derive(Debug, Parser)]
#[command(
    name = "msld",
    version,
    about = "Multi-scale line detector for retinal vessel segmentation",
    after_help = "Inputs are netpbm files with maxval 255. Colour fundus images \
                  (PPM) are reduced to their inverted green channel; a PGM input \
                  is taken to be the green channel. Masks are PGM, any nonzero \
                  value is inside the region of interest. Convert TIFF/GIF \
                  sources first, e.g. `convert 01_test.tif 01_test.ppm`."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute the combined response of an image.
    Segment(SegmentArgs),
    /// Score a response file against a ground-truth vessel map.
    Eval(EvalArgs),
    /// Run the reference and a streaming engine and report their differences.
    Compare(CompareArgs),
    /// Time each engine and report the streaming engine's memory footprint.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Engine {
    Reference,
    StreamingFloat,
    StreamingFixed,
}

#[derive(Debug, Args)]
pub struct DetectorArgs {
    /// Fundus image (PPM) or green channel (PGM).
    #[arg(long)]
    pub input: PathBuf,
    /// Region-of-interest mask (PGM).
    #[arg(long)]
    pub mask: PathBuf,
    /// Window side W; odd, at least 3.
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    /// Fractional bits for the fixed-point engine.
    #[arg(long = "frac-bits", default_value_t = DEFAULT_FRAC_BITS)]
    pub frac_bits: u32,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[command(flatten)]
    pub detector: DetectorArgs,
    #[arg(long, value_enum, default_value_t = Engine::StreamingFixed)]
    pub engine: Engine,
    /// Response file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a binarized PGM next to `--out` (extension `.pgm`).
    #[arg(long, allow_negative_numbers = true)]
    pub threshold: Option<f64>,
    /// Where to write the footprint report; stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Response file produced by `segment`.
    #[arg(long)]
    pub input: PathBuf,
    /// Ground-truth vessel map (PGM, nonzero = vessel).
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// Fixed threshold; the accuracy-maximizing one is used when omitted.
    #[arg(long, allow_negative_numbers = true)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub detector: DetectorArgs,
    /// Streaming engine to compare with the reference.
    #[arg(long, value_enum, default_value_t = Engine::StreamingFixed)]
    pub engine: Engine,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub detector: DetectorArgs,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

/// A failed command: message plus process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. }
            | Error::MalformedHeader(_)
            | Error::MalformedPayload(_)
            | Error::Truncated { .. }
            | Error::UnsupportedMaxval(_) => EXIT_IO,
            Error::SingleClassRoi | Error::Fixed(_) => EXIT_NUMERIC,
            Error::UnexpectedFormat { .. }
            | Error::InvalidImage(_)
            | Error::DimensionMismatch { .. }
            | Error::InvalidParams(_)
            | Error::EmptyRoi
            | Error::StatsMismatch(_) => EXIT_VALIDATION,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Segment(a) => cmd_segment(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Bench(a) => cmd_bench(&a),
    }
}

/// `MSLDF <width> <height>\n` followed by little-endian `f32`s, row-major.
pub fn encode_response(map: &ResponseMap) -> Vec<u8> {
    let mut out = format!("{RESPONSE_MAGIC} {} {}\n", map.width(), map.height()).into_bytes();
    out.reserve(map.data().len() * 4);
    for &v in map.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_response(bytes: &[u8]) -> Result<ResponseMap, Error> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedHeader("response file has no header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::MalformedHeader("response header is not text".into()))?;
    let mut parts = header.split(' ');
    if parts.next() != Some(RESPONSE_MAGIC) {
        return Err(Error::MalformedHeader(format!(
            "expected `{RESPONSE_MAGIC}` header, got {header:?}"
        )));
    }
    let mut dim = || -> Result<usize, Error> {
        parts
            .next()
            .and_then(|s| s.parse().ok())
            .filter(|&v: &usize| v > 0)
            .ok_or_else(|| Error::MalformedHeader(format!("bad response header {header:?}")))
    };
    let (w, h) = (dim()?, dim()?);
    let payload = &bytes[nl + 1..];
    let expected = w * h;
    if payload.len() < expected * 4 {
        return Err(Error::Truncated {
            expected,
            found: payload.len() / 4,
        });
    }
    let data = payload[..expected * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    ResponseMap::new(w, h, data)
}

pub fn load_response(path: &Path) -> Result<ResponseMap, Error> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_response(&bytes)
}

/// Writes through a sibling temporary file and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn emit(report: Option<&Path>, text: &str) -> CliResult<()> {
    match report {
        Some(p) => Ok(write_atomic(p, text.as_bytes())?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_inputs(a: &DetectorArgs) -> CliResult<(GrayImage, Mask, MsldParams)> {
    let params = MsldParams::new(a.window, a.frac_bits)?;
    let img = load_detector_input(&a.input)?;
    let mask = load_mask(&a.mask)?;
    mask.expect_dims("mask", img.dims())?;
    Ok((img, mask, params))
}

fn arithmetic(engine: Engine, params: &MsldParams) -> Option<Arithmetic> {
    match engine {
        Engine::Reference => None,
        Engine::StreamingFloat => Some(Arithmetic::Float),
        Engine::StreamingFixed => Some(Arithmetic::Fixed(params.frac_bits())),
    }
}

fn footprint_report(fp: &MemoryFootprint, out: &mut String) {
    let _ = writeln!(out, "line_buffer_slots {}", fp.line_buffer_slots);
    let _ = writeln!(out, "accumulator_words {}", fp.accumulator_words);
    let _ = writeln!(out, "accumulator_bits {}", fp.accumulator_bits);
    let _ = writeln!(out, "stored_stats_values {}", fp.stored_stats_values);
    let _ = writeln!(out, "stored_scale_values {}", fp.stored_scale_values);
    let _ = writeln!(out, "register_words {}", fp.register_words);
    let _ = writeln!(out, "largest_buffer_bytes {}", fp.largest_buffer_bytes);
    let _ = writeln!(out, "peak_total_bytes {}", fp.peak_total_bytes);
}

fn stats_report(stats: &ScaleStats, out: &mut String) {
    let _ = writeln!(out, "roi_count {}", stats.roi_count);
    let _ = writeln!(out, "variance_clamps {}", stats.variance_clamps);
    for (i, s) in stats.scales.iter().enumerate() {
        let _ = writeln!(out, "scale_{} {} {}", 2 * i + 1, s.mean, s.std);
    }
    let _ = writeln!(out, "igc {} {}", stats.igc.mean, stats.igc.std);
}

pub fn cmd_segment(a: &SegmentArgs) -> CliResult<()> {
    let (img, mask, params) = load_inputs(&a.detector)?;
    let mut report = String::new();
    let _ = writeln!(report, "engine {:?}", a.engine);
    let _ = writeln!(report, "window {}", params.window());
    let map = match arithmetic(a.engine, &params) {
        None => {
            let (map, stats) = msld_reference(&img, &mask, &params)?;
            stats_report(&stats, &mut report);
            map
        }
        Some(arith) => {
            let (map, stats, fp) = msld_streaming(&img, &mask, &params, arith)?;
            let _ = writeln!(report, "arithmetic {arith}");
            stats_report(&stats, &mut report);
            footprint_report(&fp, &mut report);
            map
        }
    };
    let binary = match a.threshold {
        Some(t) if !t.is_finite() => {
            return Err(Error::InvalidParams(format!("threshold {t} is not finite")).into())
        }
        Some(t) => Some(binarize(&map, &mask, t)?),
        None => None,
    };
    write_atomic(&a.out, &encode_response(&map))?;
    if let Some(b) = binary {
        let path = a.out.with_extension("pgm");
        save_pnm(&b.to_gray().into(), &path)?;
    }
    emit(a.report.as_deref(), &report)
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let resp = load_response(&a.input)?;
    let truth = load_mask(&a.truth)?;
    let mask = load_mask(&a.mask)?;
    truth.expect_dims("ground truth", resp.dims())?;
    mask.expect_dims("mask", resp.dims())?;
    let report: MetricsReport = match a.threshold {
        Some(t) => metrics_at(&resp, &truth, &mask, t)?,
        None => best_threshold(&resp, &truth, &mask)?.1,
    };
    emit(a.report.as_deref(), &report.to_string())
}

pub fn cmd_compare(a: &CompareArgs) -> CliResult<()> {
    let (img, mask, params) = load_inputs(&a.detector)?;
    let arith = arithmetic(a.engine, &params).ok_or_else(|| {
        CliError::from(Error::InvalidParams(
            "compare needs a streaming engine".into(),
        ))
    })?;
    let (reference, ref_stats) = msld_reference(&img, &mask, &params)?;
    let (streamed, stats, _) = msld_streaming(&img, &mask, &params, arith)?;
    let diffs: Vec<f64> = reference
        .roi_values(&mask)
        .zip(streamed.roi_values(&mask))
        .map(|(r, s)| (r - s).abs())
        .collect();
    let max = diffs.iter().cloned().fold(0.0, f64::max);
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;

    let mut out = String::new();
    let _ = writeln!(out, "engine {arith}");
    let _ = writeln!(out, "window {}", params.window());
    let _ = writeln!(out, "roi_count {}", diffs.len());
    let _ = writeln!(out, "max_abs_diff {max}");
    let _ = writeln!(out, "mean_abs_diff {mean}");
    let _ = writeln!(out, "variance_clamps {}", stats.variance_clamps);
    for (i, (r, s)) in ref_stats.scales.iter().zip(&stats.scales).enumerate() {
        let _ = writeln!(
            out,
            "scale_{}_delta {} {}",
            2 * i + 1,
            s.mean - r.mean,
            s.std - r.std
        );
    }
    let _ = writeln!(
        out,
        "igc_delta {} {}",
        stats.igc.mean - ref_stats.igc.mean,
        stats.igc.std - ref_stats.igc.std
    );
    emit(a.report.as_deref(), &out)
}

pub fn cmd_bench(a: &BenchArgs) -> CliResult<()> {
    if a.reps == 0 {
        return Err(Error::InvalidParams("--reps must be at least 1".into()).into());
    }
    let (img, mask, params) = load_inputs(&a.detector)?;
    let mut out = String::new();
    let _ = writeln!(out, "width {}", img.width());
    let _ = writeln!(out, "height {}", img.height());
    let _ = writeln!(out, "window {}", params.window());
    let _ = writeln!(out, "n_scales {}", params.n_scales());
    let _ = writeln!(out, "reps {}", a.reps);

    for rep in 0..a.reps {
        let t = Instant::now();
        msld_reference(&img, &mask, &params)?;
        let _ = writeln!(out, "time reference total {rep} {:.6}", t.elapsed().as_secs_f64());

        for arith in [Arithmetic::Float, Arithmetic::Fixed(params.frac_bits())] {
            let t = Instant::now();
            let stats = stream_pass1(&img, &mask, &params, arith)?;
            let p1 = t.elapsed().as_secs_f64();
            let t = Instant::now();
            stream_pass2(&img, &mask, &params, &stats, arith)?;
            let p2 = t.elapsed().as_secs_f64();
            let _ = writeln!(out, "time {arith} pass1 {rep} {p1:.6}");
            let _ = writeln!(out, "time {arith} pass2 {rep} {p2:.6}");
        }
    }

    let (_, _, fp) = msld_streaming(&img, &mask, &params, Arithmetic::Fixed(params.frac_bits()))?;
    footprint_report(&fp, &mut out);
    // whole-image schedule keeps one raw image per scale alive
    let _ = writeln!(
        out,
        "reference_buffer_values {}",
        params.n_scales() * img.width() * img.height()
    );
    emit(a.report.as_deref(), &out)
}
