mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use defreg::eval::{Landmark, LandmarkSet, save_landmarks};
use defreg::volume::{rescale_to_u8, save_volume, Grid};
use defreg::warp::{jacobian_determinant, load_field, save_field, DisplacementField};
use serde_json::Value;

fn defreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_defreg"))
        .args(args)
        .env_remove("DEFREG_THREADS")
        .output()
        .expect("spawn defreg")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes a small textured pair into `dir` and returns (fixed, moving).
fn write_pair(dir: &Path) -> (PathBuf, PathBuf) {
    let f = common::smooth_volume([12, 12, 12], 1);
    let m = common::smooth_volume([12, 12, 12], 2);
    let (fp, mp) = (dir.join("f.vol"), dir.join("m.vol"));
    save_volume(&f, &fp).unwrap();
    save_volume(&m, &mp).unwrap();
    (fp, mp)
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn read_pgm(p: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = fs::read(p).unwrap();
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8(bytes[start..pos].to_vec()).unwrap());
    }
    assert_eq!(fields[0], "P5");
    assert_eq!(fields[3], "255");
    let (w, h) = (fields[1].parse().unwrap(), fields[2].parse().unwrap());
    let pixels = bytes[pos + 1..].to_vec();
    assert_eq!(pixels.len(), w * h);
    (w, h, pixels)
}

#[test]
fn version_prints_and_succeeds() {
    let o = defreg(&["version"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), format!("defreg {}", env!("CARGO_PKG_VERSION")));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (fp, mp) = write_pair(dir.path());
    let out = dir.path().join("out.dfield");

    let o = defreg(&["register", "--fixed", s(&fp), "--out-field", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert!(stdout(&o).is_empty());

    let o = defreg(&["register", "--fixed", s(&fp), "--moving", s(&mp), "--out-field", s(&out), "--ncc-window", "4"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr(&o).trim().lines().count(), 1, "{}", stderr(&o));
    assert!(!out.exists());

    let missing = dir.path().join("nope.vol");
    let o = defreg(&["register", "--fixed", s(&fp), "--moving", s(&missing), "--out-field", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr(&o).trim().lines().count(), 1);

    let o = defreg(&["synth", "--out", s(&dir.path().join("c")), "--max-disp", "-1"]);
    assert_eq!(o.status.code(), Some(1));

    assert_eq!(defreg(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(defreg(&["--help"]).status.code(), Some(0));
    assert_eq!(defreg(&["--threads", "x", "version"]).status.code(), Some(1));
}

#[test]
fn help_lists_flags_with_defaults() {
    let text = stdout(&defreg(&["register", "--help"]));
    for needle in [
        "--fixed",
        "--moving",
        "--out-field",
        "--out-warped",
        "--config",
        "--threads",
        "[default: freeform]",
        "[default: 3 freeform, 1 convnet]",
        "[default: 200 freeform, 100 convnet]",
        "[default: 1.0]",
        "[default: 9]",
        "[default: 1e-5]",
        "[default: 1.0 freeform, 1e-4 convnet]",
    ] {
        assert!(text.contains(needle), "register help lacks {needle}:\n{text}");
    }
    let text = stdout(&defreg(&["synth", "--help"]));
    for needle in ["--dims", "--seed", "--max-disp", "--num-landmarks", "--cavity"] {
        assert!(text.contains(needle), "synth help lacks {needle}");
    }
    let text = stdout(&defreg(&["slices", "--help"]));
    for needle in ["--volume", "--field", "--jacobian", "[default: z]", "--index", "--out"] {
        assert!(text.contains(needle), "slices help lacks {needle}");
    }
    let text = stdout(&defreg(&["eval", "--help"]));
    for needle in ["--summarize", "--field", "--fixed-landmarks", "--moving-landmarks", "[default: metrics.csv]"] {
        assert!(text.contains(needle), "eval help lacks {needle}");
    }
}

#[test]
fn register_writes_outputs_and_a_reproducing_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (fp, mp) = write_pair(dir.path());
    let out = dir.path().join("out.dfield");
    let warped = dir.path().join("warped.vol");
    let o = defreg(&[
        "--threads", "1", "register", "--fixed", s(&fp), "--moving", s(&mp), "--out-field", s(&out),
        "--out-warped", s(&warped), "--mode", "freeform", "--levels", "2", "--iters", "15", "--lambda", "1.0",
        "--ncc-window", "5",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.exists() && warped.exists());
    let report = read_json(&dir.path().join("out.report.json"));
    assert_eq!(report["levels"].as_array().unwrap().len(), 2);
    assert_eq!(report["config"]["loss"]["ncc_window"], 5);

    let manifest = read_json(&dir.path().join("out.manifest.json"));
    assert_eq!(manifest["command"], "register");
    assert_eq!(manifest["threads"], 1);
    let inputs = manifest["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 4, "volumes and their sidecars");
    assert!(inputs.iter().all(|d| d["sha256"].as_str().unwrap().len() == 64));

    // Rerun from the manifest's resolved config alone.
    let cfg = dir.path().join("resolved.json");
    fs::write(&cfg, manifest["config"].to_string()).unwrap();
    let again = dir.path().join("again.dfield");
    let o = defreg(&[
        "--threads", "1", "register", "--fixed", s(&fp), "--moving", s(&mp), "--out-field", s(&again),
        "--config", s(&cfg),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read(&out).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn zero_iterations_write_a_zero_field() {
    let dir = tempfile::tempdir().unwrap();
    let (fp, mp) = write_pair(dir.path());
    let out = dir.path().join("z.dfield");
    let o = defreg(&["register", "--fixed", s(&fp), "--moving", s(&mp), "--out-field", s(&out), "--iters", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let field = load_field(&out).unwrap();
    assert_eq!(field.dims(), [12, 12, 12]);
    assert!(field.as_flat().iter().all(|&v| v == 0.0));
}

fn landmarks(points: &[(i64, [f64; 3])]) -> LandmarkSet {
    LandmarkSet::new(points.iter().map(|&(id, [x, y, z])| Landmark { id, x, y, z }).collect()).unwrap()
}

#[test]
fn eval_zero_field_and_id_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let grid = Grid::new([8, 8, 8], [1.0; 3]).unwrap();
    let field = dir.path().join("zero.dfield");
    save_field(&DisplacementField::zeros(grid), &field).unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    save_landmarks(&landmarks(&[(1, [1.0, 2.0, 3.0]), (2, [4.0, 4.5, 5.0])]), &a).unwrap();
    save_landmarks(&landmarks(&[(1, [1.0, 2.0, 3.0]), (3, [4.0, 4.5, 5.0])]), &b).unwrap();
    let out = dir.path().join("m.csv");

    let o = defreg(&[
        "eval", "--field", s(&field), "--fixed-landmarks", s(&a), "--moving-landmarks", s(&a), "--case", "c1",
        "--out", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let line = stdout(&o);
    assert!(line.starts_with("case=c1 mae=0.0000 robustness=0.0000 "), "{line}");
    let csv = fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("case,initial_mae_median,method_mae_median,robustness,mtre,folding_fraction\n"));
    assert!(dir.path().join("m.json").exists());
    assert!(dir.path().join("m.manifest.json").exists());

    let o = defreg(&[
        "eval", "--field", s(&field), "--fixed-landmarks", s(&a), "--moving-landmarks", s(&b), "--out", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_summarize_reproduces_cohort_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("initial.csv");
    let mut text = String::from("case,initial_mae\n");
    for (i, v) in common::VALIDATION_INITIAL_MAE.iter().enumerate() {
        text.push_str(&format!("c{},{v:.2}\n", 141 + i));
    }
    fs::write(&path, text).unwrap();
    let o = defreg(&["eval", "--summarize", s(&path)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        stdout(&o).trim(),
        "n=20 mean=7.8000 stddev=5.6158 median=5.5000 q25=3.3750 q75=13.6250"
    );
    assert!(dir.path().join("initial.manifest.json").exists());
}

#[test]
fn synth_is_deterministic_and_writes_five_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = defreg(&["synth", "--dims", "24", "24", "24", "--seed", "7", "--max-disp", "3", "--out", s(d)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for name in ["fixed.vol", "moving.vol", "true.dfield", "fixed_landmarks.csv", "moving_landmarks.csv"] {
        let (x, y) = (fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
        assert!(!x.is_empty());
        assert_eq!(x, y, "{name} differs between identical runs");
    }
    let manifest = read_json(&a.join("manifest.json"));
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["config"]["seed"], 7);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 5);
}

#[test]
fn slices_midline_pixel_matches_the_jacobian() {
    let dir = tempfile::tempdir().unwrap();
    let case = dir.path().join("case7");
    let o = defreg(&["synth", "--dims", "32", "32", "48", "--seed", "7", "--max-disp", "5", "--out", s(&case)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let field_path = case.join("true.dfield");
    let pgm = dir.path().join("jac.pgm");
    let o = defreg(&[
        "slices", "--field", s(&field_path), "--jacobian", "--axis", "z", "--index", "24", "--out", s(&pgm),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (w, h, pixels) = read_pgm(&pgm);
    assert_eq!((w, h), (32, 32));

    let jac = jacobian_determinant(&load_field(&field_path).unwrap()).unwrap();
    let g = *jac.grid();
    let slice: Vec<f64> = (0..32)
        .flat_map(|j| (0..32).map(move |i| (i, j)))
        .map(|(i, j)| jac.data()[g.index(i, j, 24)])
        .collect();
    assert!(slice.iter().any(|&v| (v - 1.0).abs() > 1e-3), "slice should not be flat");
    let expect = rescale_to_u8(&slice);
    let mid = 16 * w + 16;
    assert_eq!(pixels[mid], expect[mid]);
    assert_eq!(pixels, expect);

    let o = defreg(&["slices", "--field", s(&field_path), "--jacobian", "--index", "48", "--out", s(&pgm)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn threads_flag_and_env_agree() {
    let dir = tempfile::tempdir().unwrap();
    let (fp, mp) = write_pair(dir.path());
    let a = dir.path().join("a.dfield");
    let b = dir.path().join("b.dfield");
    let args = |out: &Path| {
        vec![
            "register".to_string(), "--fixed".into(), s(&fp).into(), "--moving".into(), s(&mp).into(),
            "--out-field".into(), s(out).into(), "--levels".into(), "1".into(), "--iters".into(), "5".into(),
            "--ncc-window".into(), "3".into(),
        ]
    };
    let o = Command::new(env!("CARGO_BIN_EXE_defreg")).arg("--threads").arg("1").args(args(&a)).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let o = Command::new(env!("CARGO_BIN_EXE_defreg")).env("DEFREG_THREADS", "1").args(args(&b)).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(read_json(&dir.path().join("b.manifest.json"))["threads"], 1);
}
