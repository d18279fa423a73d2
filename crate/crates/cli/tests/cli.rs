use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
[model]
image_size = 16
depth = 3
word_dim = 4
noise_dim = 4
enc_channels = 3, 4, 4
dec_channels = 4, 4, 3
disc_channels = 3, 4, 4

[train]
batch_size = 2
steps = 2
checkpoint_every = 1

[eval]
scenes = 2

[output]
dir = from-config
";

fn daft(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_daft"))
        .args(args)
        .current_dir(dir)
        .env_remove("DAFT_OUT_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) {
    fs::write(dir.join("tiny.txt"), text).unwrap();
}

/// Trains the tiny config into `run/` and returns the final checkpoint path.
fn trained(dir: &Path, steps: u64) -> String {
    write_config(dir, &TINY.replace("steps = 2", &format!("steps = {steps}")));
    let o = daft(dir, &["train", "--config", "tiny.txt", "--out", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    "run/last.ckpt".into()
}

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let d = tempfile::tempdir().unwrap();
    let o = daft(d.path(), &["train", "--config", "absent.txt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.txt"));
}

#[test]
fn illegal_image_size_names_the_rule() {
    let d = tempfile::tempdir().unwrap();
    write_config(d.path(), "[model]\nimage_size = 48\n");
    let o = daft(d.path(), &["train", "--config", "tiny.txt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("image_size = 4 * 2^(depth - 1)"), "{}", stderr(&o));
}

#[test]
fn train_writes_metrics_checkpoints_and_scene_cache() {
    let d = tempfile::tempdir().unwrap();
    trained(d.path(), 2);
    let run = d.path().join("run");
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "step,d_total,g_total,d_real,d_fake,d_mismatch,d_penalty,g_rec,g_adv,g_attn,g_damsm,psnr,ssim"
    );
    assert_eq!(lines.len(), 3);
    for line in &lines[1..] {
        assert_eq!(line.split(',').count(), 13);
        assert!(!line.ends_with(','), "evaluated rows carry psnr/ssim: {line}");
    }
    for f in ["step_000001.ckpt", "step_000002.ckpt", "last.ckpt", "config.txt", "scenes/scene_00000.ppm", "scenes/scene_00000.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read(run.join("step_000002.ckpt")).unwrap(), fs::read(run.join("last.ckpt")).unwrap());
    assert!(!d.path().join("from-config").exists());
}

#[test]
fn out_flag_does_not_change_the_stored_config() {
    let d = tempfile::tempdir().unwrap();
    trained(d.path(), 1);
    let echo = fs::read_to_string(d.path().join("run/config.txt")).unwrap();
    assert!(echo.contains("dir = from-config"));
    let bytes = fs::read(d.path().join("run/last.ckpt")).unwrap();
    assert!(bytes.windows(15).any(|w| w == b"dir = from-conf"));
}

#[test]
fn output_directory_comes_from_the_environment() {
    let d = tempfile::tempdir().unwrap();
    write_config(d.path(), &TINY.replace("steps = 2", "steps = 0"));
    let o = Command::new(env!("CARGO_BIN_EXE_daft"))
        .args(["train", "--config", "tiny.txt"])
        .current_dir(d.path())
        .env("DAFT_OUT_DIR", "env-out")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.path().join("env-out/last.ckpt").exists());
}

#[test]
fn resume_with_no_remaining_steps_reproduces_the_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    trained(d.path(), 1);
    let o = daft(d.path(), &["train", "--resume", "run/last.ckpt", "--out", "again"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(d.path().join("run/last.ckpt")).unwrap(),
        fs::read(d.path().join("again/last.ckpt")).unwrap()
    );
}

#[test]
fn resume_continues_where_training_stopped() {
    let d = tempfile::tempdir().unwrap();
    trained(d.path(), 2);
    let o = daft(d.path(), &["train", "--resume", "run/step_000001.ckpt", "--out", "resumed"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(d.path().join("run/last.ckpt")).unwrap(),
        fs::read(d.path().join("resumed/last.ckpt")).unwrap()
    );
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("bad.ckpt"), b"not a checkpoint").unwrap();
    let o = daft(d.path(), &["eval", "--checkpoint", "bad.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checkpoint"));
}

/// Copies a cached 16 px scene to `image.ppm` and writes `mask.pgm`, either
/// all valid or with rows 4..12 as holes.
fn write_inputs(dir: &Path, valid: bool) {
    fs::copy(dir.join("run/scenes/scene_00000.ppm"), dir.join("image.ppm")).unwrap();
    let mut pgm = b"P5\n16 16\n255\n".to_vec();
    pgm.extend((0..256).map(|i| if !valid && (4..12).contains(&(i / 16)) { 255u8 } else { 0 }));
    fs::write(dir.join("mask.pgm"), pgm).unwrap();
}

/// Splits a 48x16 P6 triptych into its three panels' RGB bytes.
fn panels(bytes: &[u8]) -> [Vec<u8>; 3] {
    let header = b"P6\n48 16\n255\n";
    assert!(bytes.starts_with(header));
    let px = &bytes[header.len()..];
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for y in 0..16 {
        for (p, panel) in out.iter_mut().enumerate() {
            let start = (y * 48 + p * 16) * 3;
            panel.extend_from_slice(&px[start..start + 48]);
        }
    }
    out
}

#[test]
fn infer_with_all_valid_mask_returns_the_original() {
    let d = tempfile::tempdir().unwrap();
    let ckpt = trained(d.path(), 1);
    write_inputs(d.path(), true);
    let o = daft(d.path(), &["infer", "--checkpoint", &ckpt, "--image", "image.ppm", "--mask", "mask.pgm", "--caption", "large red circle center", "--out", "t.ppm"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let [corrupted, middle, right] = panels(&fs::read(d.path().join("t.ppm")).unwrap());
    assert_eq!(middle, right);
    assert_eq!(corrupted, right);
}

#[test]
fn infer_is_bit_deterministic_and_keeps_valid_pixels() {
    let d = tempfile::tempdir().unwrap();
    let ckpt = trained(d.path(), 1);
    write_inputs(d.path(), false);
    let run = |out: &str| {
        let o = daft(d.path(), &["infer", "--checkpoint", &ckpt, "--image", "image.ppm", "--mask", "mask.pgm", "--caption", "small blue bar left", "--seed", "3", "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(d.path().join(out)).unwrap()
    };
    let a = run("a.ppm");
    assert_eq!(a, run("b.ppm"));
    let [_, middle, right] = panels(&a);
    for y in 0..16 {
        if (4..12).contains(&y) {
            continue;
        }
        assert_eq!(middle[y * 48..(y + 1) * 48], right[y * 48..(y + 1) * 48], "row {y}");
    }
}

#[test]
fn infer_rejects_a_mismatched_image_size() {
    let d = tempfile::tempdir().unwrap();
    let ckpt = trained(d.path(), 0);
    let mut img = b"P6\n8 8\n255\n".to_vec();
    img.extend([0u8; 192]);
    fs::write(d.path().join("small.ppm"), img).unwrap();
    write_inputs(d.path(), true);
    let o = daft(d.path(), &["infer", "--checkpoint", &ckpt, "--image", "small.ppm", "--mask", "mask.pgm", "--caption", "x", "--out", "t.ppm"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("expects 16x16"), "{}", stderr(&o));
}

#[test]
fn eval_of_untrained_checkpoint_matches_the_baseline() {
    let d = tempfile::tempdir().unwrap();
    let ckpt = trained(d.path(), 0);
    let run = |out: &str| {
        let o = daft(d.path(), &["eval", "--checkpoint", &ckpt, "--scenes", "4", "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("baseline"));
        fs::read_to_string(d.path().join(out)).unwrap()
    };
    let csv = run("e1.csv");
    assert_eq!(csv, run("e2.csv"));
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(2).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert!(csv.lines().nth(2).unwrap().starts_with("baseline,4,"));
    assert!((rows[0][0] - rows[1][0]).abs() <= 0.5);
}

#[test]
fn grad_check_scopes() {
    let d = tempfile::tempdir().unwrap();
    let o = daft(d.path(), &["grad-check", "--scope", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
    let o = daft(d.path(), &["grad-check", "--scope", "tensor", "--seeds", "2"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("all targets passed"));
    let o = daft(d.path(), &["grad-check", "--scope", "magp", "--seeds", "1"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("loss/discriminator_magp"));
}

#[test]
fn mask_demo_center_quarter() {
    let d = tempfile::tempdir().unwrap();
    let o = daft(d.path(), &["mask-demo", "--kind", "center", "--ratio", "0.25", "--size", "32", "--out", "m.pgm"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("invalid_fraction 0.250000"));
    assert!(out.contains("square side 16 origin (8, 8)"));
    let bytes = fs::read(d.path().join("m.pgm")).unwrap();
    let px = &bytes[b"P5\n32 32\n255\n".len()..];
    for y in 0..32 {
        for x in 0..32 {
            let hole = (8..24).contains(&y) && (8..24).contains(&x);
            assert_eq!(px[y * 32 + x], if hole { 255 } else { 0 });
        }
    }
}

#[test]
fn mask_demo_is_reproducible_and_sweeps_within_bounds() {
    let d = tempfile::tempdir().unwrap();
    for out in ["a.pgm", "b.pgm"] {
        assert!(daft(d.path(), &["mask-demo", "--seed", "42", "--out", out]).status.success());
    }
    assert_eq!(fs::read(d.path().join("a.pgm")).unwrap(), fs::read(d.path().join("b.pgm")).unwrap());
    let o = daft(d.path(), &["mask-demo", "--sweep", "1000"]);
    let line = stdout(&o).lines().find(|l| l.starts_with("sweep")).unwrap().to_string();
    let nums: Vec<f64> = line
        .split_whitespace()
        .filter_map(|w| w.trim_matches(|c| c == '[' || c == ']' || c == ',').parse().ok())
        .collect();
    let (lo, hi) = (nums[1], nums[2]);
    assert!(lo >= 0.1 && hi <= 0.7, "{line}");
}

#[test]
fn mask_demo_bad_ratio_is_a_runtime_error() {
    let d = tempfile::tempdir().unwrap();
    let o = daft(d.path(), &["mask-demo", "--kind", "center", "--ratio", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
}
