use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use morphseg::autodiff::{Checkpoint, Tensor};
use morphseg::network::Network;
use morphseg::volume::{load_mask, load_volume, normalize};

fn morphseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morphseg")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = morphseg(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

/// DICE column of the CSV printed by `eval`.
fn dice_of(csv: &str) -> f64 {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let k = header.iter().position(|&h| h == "DICE").unwrap();
    row[k].parse().unwrap()
}

const CLEAN_SPEC: &str = r#"{"shape":[16,32,32],"tube_count":1,"radius_range":[5.0,7.0],"noise_sigma":0.0,"seed":0}"#;

#[test]
fn phantom_acwe_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = write(d, "spec.json", CLEAN_SPEC);
    let (img, gt) = (d.join("img.nrrd"), d.join("gt.nrrd"));
    ok(&["phantom", "--spec", s(&spec), "--out", s(&img), "--gt", s(&gt)]);

    // Without smoothing the pointwise update separates a noiseless phantom exactly.
    let mask0 = d.join("mask0.nrrd");
    ok(&["acwe", "--in", s(&img), "--out", s(&mask0), "--mu", "0"]);
    let csv = ok(&["eval", "--pred", s(&mask0), "--gt", s(&gt)]);
    assert_eq!(dice_of(&csv), 1.0, "{csv}");

    // The curvature term shaves the extremal voxels of a bounded tube, so the
    // default run stays close to, but below, a perfect overlap.
    let (mask, log) = (d.join("mask.nrrd"), d.join("run.csv"));
    ok(&["acwe", "--in", s(&img), "--out", s(&mask), "--log", s(&log)]);
    let report = d.join("report.json");
    let csv = ok(&["eval", "--pred", s(&mask), "--gt", s(&gt), "--report", s(&report)]);
    assert!(dice_of(&csv) > 0.95, "{csv}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!((json["dice"].as_f64().unwrap() - dice_of(&csv)).abs() < 1e-6);
    assert!(fs::read_to_string(&log).unwrap().lines().count() > 1);
    assert_eq!(load_mask(&mask).unwrap().shape(), load_mask(&gt).unwrap().shape());
}

#[test]
fn phantom_is_deterministic_given_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = write(d, "spec.json", r#"{"shape":[8,16,16],"noise_sigma":0.1}"#);
    for name in ["a", "b"] {
        let (img, gt) = (d.join(format!("{name}.nrrd")), d.join(format!("{name}_gt.nrrd")));
        ok(&["phantom", "--spec", s(&spec), "--out", s(&img), "--gt", s(&gt), "--seed", "7"]);
    }
    assert_eq!(fs::read(d.join("a.nrrd")).unwrap(), fs::read(d.join("b.nrrd")).unwrap());
    assert_eq!(fs::read(d.join("a_gt.nrrd")).unwrap(), fs::read(d.join("b_gt.nrrd")).unwrap());
}

const TINY_TRAIN: &str = r#"{
    "steps": 3,
    "batch_size": 2,
    "crop_shape": [8, 16, 16],
    "network": {"encoder_widths": [4, 4, 8, 16], "decoder_widths": [8, 4, 4]}
}"#;

/// Writes `n` noisy phantoms of shape `[8, 16, 16]` into `dir/data`.
fn dataset(dir: &Path, n: u64) -> PathBuf {
    let data = dir.join("data");
    fs::create_dir_all(&data).unwrap();
    let spec = write(
        dir,
        "data_spec.json",
        r#"{"shape":[8,16,16],"tube_count":2,"radius_range":[1.5,3.0],"noise_sigma":0.1}"#,
    );
    for i in 0..n {
        let seed = i.to_string();
        let img = data.join(format!("v{i}.nrrd"));
        let gt = dir.join(format!("gt{i}.nrrd"));
        ok(&["phantom", "--spec", s(&spec), "--out", s(&img), "--gt", s(&gt), "--seed", &seed]);
    }
    data
}

#[test]
fn train_finetune_segment_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = dataset(d, 3);
    let cfg = write(d, "train.json", TINY_TRAIN);
    let ckpt = d.join("ckpt");
    ok(&["--deterministic", "train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ckpt)]);
    let log = fs::read_to_string(ckpt.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("step").is_some());
    }

    let ckpt2 = d.join("ckpt2");
    let out = ok(&["finetune", "--ckpt", s(&ckpt), "--data", s(&data), "--budget-steps", "2", "--out", s(&ckpt2)]);
    assert!(out.contains("2 steps"), "{out}");
    assert_eq!(Checkpoint::load(&ckpt2).unwrap().step, 5);

    // A window equal to the volume is one forward pass of the network.
    let img = data.join("v0.nrrd");
    let (prob, mask, slices) = (d.join("prob.nrrd"), d.join("mask.nrrd"), d.join("slices"));
    ok(&[
        "segment",
        "--ckpt",
        s(&ckpt2),
        "--in",
        s(&img),
        "--out",
        s(&prob),
        "--mask",
        s(&mask),
        "--window",
        "8,16,16",
        "--stride",
        "8,16,16",
        "--overlay-dir",
        s(&slices),
    ]);
    let net = Network::from_checkpoint(&Checkpoint::load(&ckpt2).unwrap()).unwrap();
    let vol = normalize(&load_volume(&img).unwrap());
    let direct = net.predict(&Tensor::new(vec![1, 1, 8, 16, 16], vol.data().to_vec()).unwrap()).unwrap();
    assert_eq!(load_volume(&prob).unwrap().data(), direct.data());
    let m = load_mask(&mask).unwrap();
    for (&b, &p) in m.data().iter().zip(direct.data()) {
        assert_eq!(b == 1, p > 0.5);
    }
    let pngs =
        fs::read_dir(&slices).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "png").count();
    assert_eq!(pngs, 8);
    let png = image::open(slices.join("slice_0000.png")).unwrap();
    assert_eq!((png.width(), png.height()), (16, 16));
}

#[test]
fn training_is_deterministic_given_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = dataset(d, 2);
    let cfg = write(d, "train.json", TINY_TRAIN);
    for name in ["a", "b"] {
        ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&d.join(name)), "--seed", "3"]);
    }
    let a = fs::read_to_string(d.join("a/train_log.jsonl")).unwrap();
    let b = fs::read_to_string(d.join("b/train_log.jsonl")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn dataset_normalization_is_stored_and_required() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = dataset(d, 2);
    let cfg = write(d, "train.json", TINY_TRAIN);
    let (ds, vol) = (d.join("ds"), d.join("vol"));
    ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ds), "--normalize", "dataset"]);
    let norm: serde_json::Value = serde_json::from_str(&fs::read_to_string(ds.join("norm.json")).unwrap()).unwrap();
    assert!(norm["std"].as_f64().unwrap() > 0.0);
    ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&vol)]);
    assert!(!vol.join("norm.json").exists());

    let img = data.join("v0.nrrd");
    let prob = d.join("p.nrrd");
    let seg = |ck: &Path| {
        morphseg(&[
            "segment",
            "--ckpt",
            s(ck),
            "--in",
            s(&img),
            "--out",
            s(&prob),
            "--window",
            "8,16,16",
            "--stride",
            "8,16,16",
            "--normalize",
            "dataset",
        ])
    };
    assert!(seg(&ds).status.success());
    let out = seg(&vol);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("missing_norm: "));
}

#[test]
fn gradcheck_end_to_end_exits_zero() {
    let out = ok(&["gradcheck", "--scope", "end2end", "--seed", "0"]);
    assert!(out.contains("compound_through_network") && out.contains(" ok"), "{out}");
}

#[test]
fn gradcheck_op_and_layer_report_every_case() {
    let out = ok(&["gradcheck", "--scope", "op"]);
    assert!(out.lines().count() >= 10 && out.lines().all(|l| l.ends_with("ok")), "{out}");
    let out = ok(&["gradcheck", "--scope", "layer", "--seed", "3"]);
    assert!(out.contains("masked_pool_si") && out.lines().all(|l| l.ends_with("ok")), "{out}");
}

/// Failures print exactly one `code: message` line and exit nonzero.
fn assert_one_line_error(out: &Output, code: &str) {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("{code}: ")), "{err}");
}

#[test]
fn errors_are_single_coded_lines() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = d.join("nope.nrrd");
    let out = morphseg(&["acwe", "--in", s(&missing), "--out", s(&d.join("m.nrrd"))]);
    assert_one_line_error(&out, "io");

    let garbage = write(d, "bad.nrrd", "not a volume");
    let out = morphseg(&["eval", "--pred", s(&garbage), "--gt", s(&garbage)]);
    assert_one_line_error(&out, "format");

    let empty = d.join("empty");
    fs::create_dir_all(&empty).unwrap();
    let cfg = write(d, "train.json", TINY_TRAIN);
    let out = morphseg(&["train", "--data", s(&empty), "--config", s(&cfg), "--out", s(&d.join("c"))]);
    assert_one_line_error(&out, "no_volumes");

    let spec = write(d, "spec.json", CLEAN_SPEC);
    let (img, gt) = (d.join("img.nrrd"), d.join("gt.nrrd"));
    ok(&["phantom", "--spec", s(&spec), "--out", s(&img), "--gt", s(&gt)]);
    let out = morphseg(&["acwe", "--in", s(&img), "--out", s(&d.join("m.nrrd")), "--alpha=-1"]);
    assert_one_line_error(&out, "invalid_argument");

    let out =
        morphseg(&["segment", "--ckpt", s(d), "--in", s(&img), "--out", s(&d.join("p.nrrd")), "--window", "8,16"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("usage: "));

    let out = morphseg(&["finetune", "--ckpt", s(d), "--data", s(d), "--out", s(d)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_succeeds() {
    let out = ok(&["--help"]);
    for sub in ["phantom", "acwe", "train", "finetune", "segment", "eval", "gradcheck"] {
        assert!(out.contains(sub), "{out}");
    }
}
