use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use msld::cli::{decode_response, encode_response, EXIT_IO, EXIT_NUMERIC, EXIT_VALIDATION};
use msld::imageio::{decode_pnm, save_pnm};
use msld::{GrayImage, Mask, MetricsReport, ResponseMap};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn msld(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msld"))
        .args(args)
        .output()
        .expect("spawn msld")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
    input: PathBuf,
    mask: PathBuf,
    truth: PathBuf,
}

impl Fixture {
    /// Dark vertical vessel on a brighter background (as in the green channel).
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let (w, h) = (40, 36);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let green = GrayImage::from_fn(w, h, |x, _| {
            let base: u8 = if (18..21).contains(&x) { 60 } else { 150 };
            base.saturating_add(rng.gen_range(0..10))
        });
        let mask = Mask::from_fn(w, h, |x, y| x > 1 && y > 1 && x < w - 2 && y < h - 2);
        let truth = Mask::from_fn(w, h, |x, _| (18..21).contains(&x));
        let input = dir.path().join("green.pgm");
        let mask_p = dir.path().join("mask.pgm");
        let truth_p = dir.path().join("truth.pgm");
        save_pnm(&green.into(), &input).unwrap();
        save_pnm(&mask.to_gray().into(), &mask_p).unwrap();
        save_pnm(&truth.to_gray().into(), &truth_p).unwrap();
        Fixture {
            dir,
            input,
            mask: mask_p,
            truth: truth_p,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn segment(&self, engine: &str, out: &Path, extra: &[&str]) -> Output {
        let mut args = vec![
            "segment",
            "--input",
            s(&self.input),
            "--mask",
            s(&self.mask),
            "--window",
            "7",
            "--engine",
            engine,
            "--out",
            s(out),
        ];
        args.extend_from_slice(extra);
        msld(&args)
    }
}

fn report(out: &Output) -> MetricsReport {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    MetricsReport::parse(&String::from_utf8_lossy(&out.stdout)).unwrap()
}

#[test]
fn segment_then_eval_finds_vessel() {
    let f = Fixture::new();
    for engine in ["reference", "streaming-float", "streaming-fixed"] {
        let out = f.path(&format!("{engine}.msldf"));
        let run = f.segment(engine, &out, &[]);
        assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
        let stdout = String::from_utf8_lossy(&run.stdout);
        assert!(stdout.contains("window 7"));
        if engine != "reference" {
            assert!(stdout.contains("line_buffer_slots 247"), "{stdout}");
        }
        let resp = decode_response(&std::fs::read(&out).unwrap()).unwrap();
        assert_eq!(resp.dims(), (40, 36));
        let m = report(&msld(&[
            "eval",
            "--input",
            s(&out),
            "--truth",
            s(&f.truth),
            "--mask",
            s(&f.mask),
        ]));
        assert!(m.auc > 0.95, "{engine}: auc {}", m.auc);
        assert!(m.acc > 0.9);
    }
}

#[test]
fn segment_threshold_writes_binary_map() {
    let f = Fixture::new();
    let out = f.path("r.msldf");
    let run = f.segment("reference", &out, &["--threshold", "0.5"]);
    assert!(run.status.success());
    let pgm = decode_pnm(&std::fs::read(out.with_extension("pgm")).unwrap())
        .unwrap()
        .into_gray()
        .unwrap();
    assert_eq!(pgm.dims(), (40, 36));
    assert!(pgm.data().iter().all(|&v| v == 0 || v == 255));
    assert!(pgm.get(19, 18) == 255 && pgm.get(5, 18) == 0);
}

#[test]
fn report_goes_to_file() {
    let f = Fixture::new();
    let out = f.path("r.msldf");
    let rep = f.path("rep.txt");
    let run = f.segment("streaming-float", &out, &["--report", s(&rep)]);
    assert!(run.status.success());
    assert!(run.stdout.is_empty());
    assert!(std::fs::read_to_string(rep).unwrap().contains("arithmetic float"));
}

#[test]
fn compare_reports_small_float_error() {
    let f = Fixture::new();
    let run = msld(&[
        "compare",
        "--input",
        s(&f.input),
        "--mask",
        s(&f.mask),
        "--window",
        "7",
        "--engine",
        "streaming-float",
    ]);
    assert!(run.status.success());
    let text = String::from_utf8_lossy(&run.stdout);
    let max: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("max_abs_diff "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(max <= 1e-9);
    assert!(text.contains("variance_clamps 0"));
    assert!(text.contains("scale_7_delta"));
    assert!(text.contains("igc_delta"));

    // the reference cannot be compared with itself
    let bad = msld(&[
        "compare", "--input", s(&f.input), "--mask", s(&f.mask), "--engine", "reference",
    ]);
    assert_eq!(bad.status.code(), Some(EXIT_VALIDATION));
}

#[test]
fn bench_reports_timings_and_footprint() {
    let f = Fixture::new();
    let run = msld(&[
        "bench", "--input", s(&f.input), "--mask", s(&f.mask), "--window", "5", "--reps", "2",
    ]);
    assert!(run.status.success());
    let text = String::from_utf8_lossy(&run.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("time ")).count(), 10);
    assert!(text.contains("line_buffer_slots 165"));
}

#[test]
fn exit_codes_by_failure_kind() {
    let f = Fixture::new();
    let out = f.path("x.msldf");

    // validation: even window, bad fraction bits, unknown flag
    assert_eq!(
        f.segment("reference", &out, &["--window", "8"]).status.code(),
        Some(EXIT_VALIDATION)
    );
    assert_eq!(
        f.segment("streaming-fixed", &out, &["--frac-bits", "60"]).status.code(),
        Some(EXIT_VALIDATION)
    );
    assert_eq!(msld(&["segment", "--nope"]).status.code(), Some(EXIT_VALIDATION));

    // io: missing input, malformed netpbm
    let missing = f.path("missing.pgm");
    let run = msld(&[
        "segment", "--input", s(&missing), "--mask", s(&f.mask), "--out", s(&out),
    ]);
    assert_eq!(run.status.code(), Some(EXIT_IO));
    assert!(String::from_utf8_lossy(&run.stderr).starts_with("msld: "));
    let junk = f.path("junk.pgm");
    std::fs::write(&junk, b"P5\n40 36\n65535\n").unwrap();
    let run = msld(&[
        "segment", "--input", s(&junk), "--mask", s(&f.mask), "--out", s(&out),
    ]);
    assert_eq!(run.status.code(), Some(EXIT_IO));

    // validation: mask of the wrong size
    let small = f.path("small.pgm");
    save_pnm(&Mask::full(10, 10).to_gray().into(), &small).unwrap();
    let run = msld(&[
        "segment", "--input", s(&f.input), "--mask", s(&small), "--out", s(&out),
    ]);
    assert_eq!(run.status.code(), Some(EXIT_VALIDATION));

    // numeric: ground truth with a single class inside the ROI
    let resp = f.path("ok.msldf");
    assert!(f.segment("reference", &resp, &[]).status.success());
    let empty = f.path("empty.pgm");
    save_pnm(&GrayImage::filled(40, 36, 0).into(), &empty).unwrap();
    let run = msld(&[
        "eval", "--input", s(&resp), "--truth", s(&empty), "--mask", s(&f.mask),
    ]);
    assert_eq!(run.status.code(), Some(EXIT_NUMERIC));

    assert!(!out.exists(), "a failed command left output behind");
    assert!(!out.with_extension("pgm").exists());
}

#[test]
fn failed_threshold_leaves_no_output() {
    let f = Fixture::new();
    let out = f.path("t.msldf");
    let run = f.segment("reference", &out, &["--threshold", "NaN"]);
    assert_eq!(run.status.code(), Some(EXIT_VALIDATION));
    assert!(!out.exists());
    assert!(!out.with_extension("pgm").exists());
}

#[test]
fn constant_image_gives_zero_response() {
    let f = Fixture::new();
    save_pnm(&GrayImage::filled(40, 36, 117).into(), &f.input).unwrap();
    for engine in ["reference", "streaming-float", "streaming-fixed"] {
        let out = f.path("c.msldf");
        assert!(f.segment(engine, &out, &[]).status.success());
        let resp = decode_response(&std::fs::read(&out).unwrap()).unwrap();
        assert!(resp.data().iter().all(|&v| v == 0.0), "{engine}");
    }
}

fn eval_map(f: &Fixture, map: &ResponseMap, truth: &Mask) -> MetricsReport {
    let resp = f.path("m.msldf");
    let truth_p = f.path("t.pgm");
    std::fs::write(&resp, encode_response(map)).unwrap();
    save_pnm(&truth.to_gray().into(), &truth_p).unwrap();
    report(&msld(&[
        "eval", "--input", s(&resp), "--truth", s(&truth_p), "--mask", s(&f.mask),
    ]))
}

#[test]
fn perfect_response_scores_one() {
    let f = Fixture::new();
    let truth = Mask::from_fn(40, 36, |x, y| (x * 7 + y * 3) % 5 == 0);
    let map = ResponseMap::new(
        40,
        36,
        truth.data().iter().map(|&t| if t { 2.0 } else { -1.0 }).collect(),
    )
    .unwrap();
    let m = eval_map(&f, &map, &truth);
    assert_eq!((m.auc, m.se, m.sp, m.acc), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn shuffled_truth_scores_chance() {
    let f = Fixture::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let map = ResponseMap::new(40, 36, (0..40 * 36).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let mut labels: Vec<bool> = (0..40 * 36).map(|i| i % 4 == 0).collect();
    labels.shuffle(&mut rng);
    let truth = Mask::from_fn(40, 36, |x, y| labels[y * 40 + x]);
    let m = eval_map(&f, &map, &truth);
    assert!((m.auc - 0.5).abs() <= 0.05, "auc {}", m.auc);
}

#[test]
fn fixed_threshold_eval() {
    let f = Fixture::new();
    let truth = Mask::from_fn(40, 36, |x, _| x < 20);
    let map = ResponseMap::new(40, 36, (0..40 * 36).map(|i| -((i % 40) as f64)).collect())
        .unwrap();
    let resp = f.path("m.msldf");
    let truth_p = f.path("t.pgm");
    std::fs::write(&resp, encode_response(&map)).unwrap();
    save_pnm(&truth.to_gray().into(), &truth_p).unwrap();
    let m = report(&msld(&[
        "eval", "--input", s(&resp), "--truth", s(&truth_p), "--mask", s(&f.mask),
        "--threshold", "-19.5",
    ]));
    assert_eq!((m.se, m.sp, m.acc), (1.0, 1.0, 1.0));
    assert_eq!(m.threshold, -19.5);
}
