//! End-to-end checks of the `vdpp` binary: exit codes, file layouts, config
//! echo round trips, and the cross-command workflows.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vdpp::io::{load_sequence, save_sequence, DepthSequence, FRAME_PATTERN};
use vdpp::tensor::Tensor;

fn vdpp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vdpp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vdpp(args);
    assert!(
        out.status.success(),
        "vdpp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

fn code(args: &[&str]) -> i32 {
    vdpp(args).status.code().expect("exit code")
}

fn pfm_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "pfm"))
        .collect();
    files.sort();
    files
}

fn dir_bytes(dir: &Path) -> Vec<Vec<u8>> {
    pfm_files(dir).iter().map(|p| fs::read(p).unwrap()).collect()
}

fn load(dir: &Path) -> DepthSequence {
    load_sequence(dir, FRAME_PATTERN).unwrap()
}

#[test]
fn synth_writes_frames_and_reruns_bit_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        ok(&[
            "synth", "--out", out.to_str().unwrap(),
            "--t", "6", "--h", "16", "--w", "16", "--seed", "3",
        ]);
    }
    assert_eq!(pfm_files(&a.join("gt")).len(), 6);
    assert!(a.join("manifest.json").is_file());
    assert!(a.join("run_config.json").is_file());
    assert_eq!(dir_bytes(&a.join("gt")), dir_bytes(&b.join("gt")));
}

#[test]
fn synth_lambda_gives_constant_per_frame_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    ok(&[
        "synth", "--out", out.to_str().unwrap(),
        "--t", "5", "--h", "12", "--w", "12", "--lambda", "0.3",
    ]);
    let gt = load(&out.join("gt"));
    let deg = load(&out.join("degraded"));
    // Frames live on disk as 32-bit floats, so the ratio holds to f32
    // precision only.
    for (g, d) in gt.frames().iter().zip(deg.frames()) {
        let ratio = d.data()[0] / g.data()[0];
        for (&dv, &gv) in d.data().iter().zip(g.data()) {
            assert!((dv - ratio * gv).abs() < 1e-5 * gv.abs().max(1.0));
        }
    }
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"t": 8, "h": 12, "w": 12}"#).unwrap();
    let out = tmp.path().join("o");
    ok(&[
        "synth", "--out", out.to_str().unwrap(),
        "--config", cfg.to_str().unwrap(), "--t", "4",
    ]);
    assert_eq!(pfm_files(&out.join("gt")).len(), 4);
    let echoed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(echoed["t"], 4);
    assert_eq!(echoed["h"], 12);
}

#[test]
fn echoed_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&[
        "synth", "--out", a.to_str().unwrap(),
        "--t", "5", "--h", "16", "--w", "16", "--lambda", "0.2", "--seed", "7",
    ]);
    ok(&[
        "synth", "--out", b.to_str().unwrap(),
        "--config", a.join("run_config.json").to_str().unwrap(),
    ]);
    assert_eq!(dir_bytes(&a.join("gt")), dir_bytes(&b.join("gt")));
    assert_eq!(dir_bytes(&a.join("degraded")), dir_bytes(&b.join("degraded")));
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    assert_eq!(code(&["synth", "--out", out.to_str().unwrap(), "--bogus"]), 2);
    assert_eq!(code(&["synth", "--out", out.to_str().unwrap(), "--lambda", "1.5"]), 2);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["eval", "--pred", "/definitely/missing", "--gt", "/also/missing"]), 1);
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"unknown-key": 1}"#).unwrap();
    assert_eq!(
        code(&["synth", "--out", out.to_str().unwrap(), "--config", cfg.to_str().unwrap()]),
        2
    );
    // stabilize needs exactly one model source
    assert_eq!(
        code(&["stabilize", "--input", "/nope", "--out", out.to_str().unwrap()]),
        2
    );
    // slit-scan images need somewhere to go
    assert_eq!(
        code(&["eval", "--pred", "/nope", "--gt", "/nope", "--slitscan", "row=1"]),
        2
    );
}

#[test]
fn stabilize_identity_round_trips_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    ok(&[
        "synth", "--out", scene.to_str().unwrap(),
        "--t", "5", "--h", "16", "--w", "16", "--seed", "11",
    ]);
    let out = tmp.path().join("stab");
    ok(&[
        "stabilize", "--input", scene.join("gt").to_str().unwrap(),
        "--out", out.to_str().unwrap(), "--identity",
    ]);
    let input = load(&scene.join("gt"));
    let refined = load(&out);
    assert_eq!(refined.len(), input.len());
    assert!(refined.bit_eq(&input));
}

#[test]
fn eval_of_a_sequence_against_itself_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    ok(&[
        "synth", "--out", scene.to_str().unwrap(),
        "--t", "4", "--h", "12", "--w", "12",
    ]);
    let gt = scene.join("gt");
    let csv = ok(&["eval", "--pred", gt.to_str().unwrap(), "--gt", gt.to_str().unwrap()]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "header + sequence + aggregate:\n{csv}");
    assert!(lines[0].starts_with("sequence_id,abs_rel,delta1,tgse"));
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(&fields[1..5], &["0", "1", "0", "0"]);
    assert!(lines[2].starts_with("aggregate,0,1,0,0"));
}

#[test]
fn eval_alignment_and_offset_behaviors() {
    let tmp = tempfile::tempdir().unwrap();
    let mk = |name: &str, f: &dyn Fn(usize, usize, usize) -> f64| {
        let frames = (0..3)
            .map(|t| {
                let data: Vec<f64> = (0..8 * 8).map(|i| f(t, i / 8, i % 8)).collect();
                Tensor::new(&[8, 8], data).unwrap()
            })
            .collect();
        let dir = tmp.path().join(name);
        save_sequence(&dir, &DepthSequence::new(frames, None).unwrap()).unwrap();
        dir
    };
    // Values on the k/64 grid survive the 32-bit frame files exactly, so
    // the offset really is a pure offset after the round trip.
    let base = |t: usize, y: usize, x: usize| 1.0 + (t * 64 + y * 8 + x) as f64 / 64.0;
    let gt = mk("gt", &|t, y, x| base(t, y, x));
    let doubled = mk("doubled", &|t, y, x| 2.0 * base(t, y, x));
    let offset = mk("offset", &|t, y, x| 5.0 + base(t, y, x));

    let absrel = |csv: &str| -> f64 {
        csv.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap()
    };
    let tgse_col = |csv: &str| -> f64 {
        csv.lines().nth(1).unwrap().split(',').nth(3).unwrap().parse().unwrap()
    };

    // A global rescale is absorbed by alignment but not without it.
    let aligned = ok(&["eval", "--pred", doubled.to_str().unwrap(), "--gt", gt.to_str().unwrap()]);
    let raw = ok(&[
        "eval", "--pred", doubled.to_str().unwrap(), "--gt", gt.to_str().unwrap(), "--no-align",
    ]);
    assert!(absrel(&aligned) < 1e-9);
    assert!((absrel(&raw) - 1.0).abs() < 1e-12);

    // A static offset never registers as temporal error, aligned or not.
    for flags in [&["eval"][..], &["eval", "--no-align"][..]] {
        let mut args: Vec<&str> = flags.to_vec();
        args.extend(["--pred", offset.to_str().unwrap(), "--gt", gt.to_str().unwrap()]);
        assert_eq!(tgse_col(&ok(&args)), 0.0);
    }
}

#[test]
fn eval_tgse_x100_column_is_scaled_copy() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("s");
    ok(&[
        "synth", "--out", scene.to_str().unwrap(),
        "--t", "4", "--h", "12", "--w", "12", "--lambda", "0.3",
    ]);
    let csv = ok(&[
        "eval", "--pred", scene.join("degraded").to_str().unwrap(),
        "--gt", scene.join("gt").to_str().unwrap(),
    ]);
    let fields: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let tgse: f64 = fields[3].parse().unwrap();
    let x100: f64 = fields[4].parse().unwrap();
    assert!(tgse > 0.0);
    assert!((x100 - 100.0 * tgse).abs() < 1e-9 * x100.abs().max(1.0));
}

#[test]
fn eval_pairs_nested_sequences_and_writes_scans() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("corpus");
    ok(&[
        "synth", "--out", root.to_str().unwrap(),
        "--count", "2", "--t", "4", "--h", "12", "--w", "12", "--lambda", "0.2",
    ]);
    // Build pred/gt roots with one child per scene.
    let pred_root = tmp.path().join("pred");
    let gt_root = tmp.path().join("gtr");
    for i in 0..2 {
        let scene = root.join(format!("scene_{i:03}"));
        fs::create_dir_all(&pred_root).unwrap();
        fs::create_dir_all(&gt_root).unwrap();
        save_sequence(pred_root.join(format!("scene_{i:03}")), &load(&scene.join("degraded"))).unwrap();
        save_sequence(gt_root.join(format!("scene_{i:03}")), &load(&scene.join("gt"))).unwrap();
    }
    let out = tmp.path().join("report");
    let csv = ok(&[
        "eval", "--pred", pred_root.to_str().unwrap(), "--gt", gt_root.to_str().unwrap(),
        "--out", out.to_str().unwrap(), "--slitscan", "row=6",
    ]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4, "header + 2 sequences + aggregate");
    assert!(lines[1].starts_with("scene_000,"));
    assert!(lines[2].starts_with("scene_001,"));
    assert!(lines[3].starts_with("aggregate,"));
    assert!(out.join("metrics.csv").is_file());
    for side in ["gt", "pred"] {
        assert!(out.join(format!("scene_000_{side}_scan.pgm")).is_file());
    }
}

#[test]
fn sweep_grid_layout_and_zero_lambda_row() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("s");
    ok(&[
        "synth", "--out", scene.to_str().unwrap(),
        "--t", "6", "--h", "12", "--w", "12",
    ]);
    let out = tmp.path().join("sw");
    let csv = ok(&[
        "sweep", "--gt", scene.to_str().unwrap(),
        "--max-lambda", "0.2", "--step", "0.1", "--seeds", "2",
        "--out", out.to_str().unwrap(), "--heatstrip",
    ]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4, "header + 3 grid points:\n{csv}");
    assert!(lines[1].starts_with("0,0,0,0,0,2"));
    assert!(out.join("sweep.csv").is_file());
    assert!(out.join("heatstrip.pgm").is_file());
    assert!(out.join("run_config.json").is_file());
}

#[test]
fn bench_reports_consistent_rate_and_context() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("s");
    ok(&[
        "synth", "--out", scene.to_str().unwrap(),
        "--t", "4", "--h", "16", "--w", "16",
    ]);
    let report = ok(&[
        "bench", "--input", scene.join("gt").to_str().unwrap(),
        "--identity", "--warmup", "1", "--reps", "3",
    ]);
    assert!(report.contains("resolution: 16x16"), "{report}");
    assert!(report.contains("window: 16"), "{report}");
    let get = |key: &str| -> f64 {
        report
            .lines()
            .find(|l| l.starts_with(key))
            .unwrap()
            .split_whitespace()
            .nth(1)
            .unwrap()
            .parse()
            .unwrap()
    };
    let (ms, fps) = (get("d2v:"), get("fps:"));
    assert!(ms.is_finite() && ms > 0.0);
    assert!((fps - 1000.0 / ms).abs() / fps < 0.01);
}

#[test]
fn train_writes_artifacts_and_resume_continues_numbering() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    ok(&[
        "synth", "--out", corpus.to_str().unwrap(),
        "--t", "6", "--h", "16", "--w", "16", "--lambda", "0.3", "--seed", "2",
    ]);
    let small = [
        "--crop", "16", "--clip-len", "4", "--batch", "1",
        "--patch", "4", "--embed-dim", "16", "--heads", "2",
        "--enc-blocks", "1", "--window", "4",
    ];

    // Zero steps still writes an untouched checkpoint.
    let zero = tmp.path().join("zero");
    let mut args = vec!["train", "--corpus", corpus.to_str().unwrap(), "--out", zero.to_str().unwrap(), "--steps", "0"];
    args.extend_from_slice(&small);
    let text = ok(&args);
    assert!(text.contains("no steps run"));
    assert!(zero.join("model.vdpp").is_file());
    assert!(zero.join("model.vdppo").is_file());

    let first = tmp.path().join("first");
    let mut args = vec!["train", "--corpus", corpus.to_str().unwrap(), "--out", first.to_str().unwrap(), "--steps", "2"];
    args.extend_from_slice(&small);
    ok(&args);
    let log = fs::read_to_string(first.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,lr,loss_spatial,loss_temporal,loss_total\n0,"));

    // Resuming picks up at the recorded step; model flags are refused.
    let second = tmp.path().join("second");
    let resumed = ok(&[
        "train", "--corpus", corpus.to_str().unwrap(), "--out", second.to_str().unwrap(),
        "--resume", first.join("model.vdpp").to_str().unwrap(),
        "--steps", "1", "--crop", "16", "--clip-len", "4", "--batch", "1",
    ]);
    assert!(resumed.contains("step 2 (started at 2)"), "{resumed}");
    let log2 = fs::read_to_string(second.join("train_log.csv")).unwrap();
    assert!(log2.lines().nth(1).unwrap().starts_with("2,"));
    assert_eq!(
        code(&[
            "train", "--corpus", corpus.to_str().unwrap(), "--out", second.to_str().unwrap(),
            "--resume", first.join("model.vdpp").to_str().unwrap(),
            "--steps", "1", "--patch", "8",
        ]),
        2
    );
}

#[test]
fn trained_model_flows_into_stabilize_and_bench() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    ok(&[
        "synth", "--out", corpus.to_str().unwrap(),
        "--t", "6", "--h", "16", "--w", "16", "--lambda", "0.3",
    ]);
    let run = tmp.path().join("run");
    ok(&[
        "train", "--corpus", corpus.to_str().unwrap(), "--out", run.to_str().unwrap(),
        "--steps", "1", "--crop", "16", "--clip-len", "4", "--batch", "1",
        "--patch", "4", "--embed-dim", "16", "--heads", "2",
        "--enc-blocks", "1", "--window", "4",
    ]);
    let model = run.join("model.vdpp");
    let out = tmp.path().join("stab");
    ok(&[
        "stabilize", "--input", corpus.join("degraded").to_str().unwrap(),
        "--out", out.to_str().unwrap(), "--model", model.to_str().unwrap(),
    ]);
    assert_eq!(pfm_files(&out).len(), 6);
    let report = ok(&[
        "bench", "--input", corpus.join("degraded").to_str().unwrap(),
        "--model", model.to_str().unwrap(), "--warmup", "0", "--reps", "1",
    ]);
    assert!(report.contains("window: 4"), "{report}");
}
