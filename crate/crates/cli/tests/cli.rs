use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use spicer_core::{load_dataset, save_dataset, SaveOptions, TrainingPair};
use tempfile::TempDir;

const SMALL: &[&str] = &["--h", "32", "--w", "32", "--nc", "4", "--r", "4", "--acs", "8", "--n-train", "4", "--n-test", "2"];
const TINY_MODEL: &[&str] = &["--epochs", "2", "--k", "2", "--batch-size", "2", "--denoiser-width", "4", "--csm-width", "4"];

fn spicer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spicer")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = spicer(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with<'a>(head: &[&'a str], parts: &[&[&'a str]]) -> Vec<&'a str> {
    let mut v = head.to_vec();
    for p in parts {
        v.extend_from_slice(p);
    }
    v
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Simulated small dataset plus a two-epoch model in one directory.
fn trained_run() -> (TempDir, String) {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap().to_string();
    ok(&with(&["simulate", "--out", &out, "--seed", "3"], &[SMALL]));
    ok(&with(&["train", "--out", &out], &[SMALL, TINY_MODEL]));
    (dir, out)
}

#[test]
fn simulate_prints_sampling_rate_and_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let stdout = ok(&[
            "simulate", "--h", "256", "--w", "16", "--nc", "2", "--r", "4", "--acs", "24", "--n-train", "1", "--n-test", "1",
            "--seed", "9", "--out", out.to_str().unwrap(),
        ]);
        (out, stdout)
    };
    let (a, stdout) = run("a");
    let (b, _) = run("b");
    for line in stdout.lines().filter(|l| l.starts_with("mask")) {
        let rate: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
        assert!((rate - 0.32).abs() <= 0.01, "{line}");
    }
    for f in ["train.spcr", "test.spcr"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn oversized_acs_is_a_config_error_without_files() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let res = spicer(&["simulate", "--h", "256", "--acs", "300", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("ACS"));
    assert!(!out.exists());
}

#[test]
fn train_writes_artifacts_and_resume_continues_numbering() {
    let (_dir, out) = trained_run();
    let p = PathBuf::from(&out);
    for f in ["model.spck", "loss.json", "loss.png"] {
        assert!(p.join(f).is_file(), "{f} missing");
    }
    let loss = json(p.join("loss.json"));
    assert_eq!(loss["epochs"], 2);
    assert!(loss["heldout_map_roughness"].as_f64().unwrap() > 0.0);

    let ckpt = p.join("model.spck");
    let stdout = ok(&with(
        &["train", "--out", &out, "--resume", ckpt.to_str().unwrap()],
        &[SMALL, &["--epochs", "3", "--k", "2", "--batch-size", "2", "--denoiser-width", "4", "--csm-width", "4"]],
    ));
    let epochs: Vec<&str> = stdout.lines().filter(|l| l.starts_with("epoch")).collect();
    assert_eq!(epochs.len(), 1);
    assert!(epochs[0].starts_with("epoch   3/3"), "{}", epochs[0]);
    assert_eq!(json(p.join("loss.json"))["loss_history"].as_array().unwrap().len(), 3);
}

#[test]
fn validation_selects_a_resumable_epoch() {
    let (_dir, out) = trained_run();
    let p = PathBuf::from(&out);
    let val = p.join("test.spcr");
    let run = p.join("validated");
    let stdout = ok(&with(
        &["train", "--out", run.to_str().unwrap(), "--train-data", p.join("train.spcr").to_str().unwrap(), "--val-data", val.to_str().unwrap()],
        &[SMALL, &["--epochs", "3", "--k", "2", "--batch-size", "2", "--denoiser-width", "4", "--csm-width", "4", "--lr", "0.01"]],
    ));
    assert_eq!(stdout.lines().filter(|l| l.starts_with("epoch") && l.contains("val")).count(), 3);
    let loss = json(run.join("loss.json"));
    let history: Vec<f64> = loss["validation_loss"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(history.len(), 3);
    assert_eq!(loss["loss_history"].as_array().unwrap().len(), 3);
    let best = history.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 + 1;
    assert_eq!(loss["selected_epoch"].as_u64(), Some(best as u64));
    assert_eq!(spicer_core::load_checkpoint(run.join("model.spck")).unwrap().epoch, best);
    assert_eq!(spicer_core::load_checkpoint(run.join("model_last.spck")).unwrap().epoch, 3);

    let res = spicer(&["train", "--out", &out, "--val-data", val.to_str().unwrap(), "--resume", p.join("model.spck").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn reconstruct_psnr_matches_eval_and_reference_is_optional() {
    let (_dir, out) = trained_run();
    let p = PathBuf::from(&out);
    ok(&["reconstruct", "--out", &out]);
    ok(&["eval", "--out", &out, "--method", "spicer"]);
    let recon = json(p.join("reconstruct.json"));
    let cases = json(p.join("metrics_cases.json"));
    for (i, case) in recon.as_array().unwrap().iter().enumerate() {
        let a = case["scores"]["psnr"].as_f64().unwrap();
        let b = cases["spicer"][i]["psnr"].as_f64().unwrap();
        assert!((a - b).abs() <= 1e-9);
        assert!(p.join(format!("recon_{i}_error.png")).is_file());
    }

    // strip the references and reconstruct again
    let stripped: Vec<TrainingPair> = load_dataset(p.join("test.spcr"))
        .unwrap()
        .into_iter()
        .map(|t| TrainingPair::new(t.y.clone(), t.y_prime.clone(), None, None).unwrap())
        .collect();
    let input = p.join("noref.spcr");
    save_dataset(&stripped, &input, &SaveOptions::default()).unwrap();
    let out2 = p.join("noref");
    ok(&["reconstruct", "--out", out2.to_str().unwrap(), "--checkpoint", p.join("model.spck").to_str().unwrap(), "--input", input.to_str().unwrap()]);
    assert!(out2.join("recon_0.png").is_file());
    assert!(!out2.join("recon_0_error.png").exists());
    assert!(out2.join("recon.spcr").is_file());
}

#[test]
fn corrupt_checkpoint_is_a_checksum_error() {
    let (_dir, out) = trained_run();
    let ckpt = PathBuf::from(&out).join("model.spck");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&ckpt, bytes).unwrap();
    let res = spicer(&["reconstruct", "--out", &out]);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).to_lowercase().contains("checksum"));
}

#[test]
fn baselines_tv_is_monotone_and_grappa_keeps_acquired_lines() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    // ACS wide enough for the 5x4 kernel at R = 2
    ok(&["simulate", "--out", out, "--h", "32", "--w", "32", "--nc", "4", "--r", "2", "--acs", "12", "--n-train", "1", "--n-test", "2"]);
    ok(&["baseline", "--out", out, "--method", "zero_filled,tv,grappa", "--tv-iters", "30"]);
    let tv = json(dir.path().join("tv_history.json"));
    for h in tv["objective"].as_array().unwrap() {
        let h: Vec<f64> = h.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert!(h.windows(2).all(|w| w[1] <= w[0]));
    }
    assert_eq!(json(dir.path().join("grappa_check.json"))["acquired_unchanged"], true);
    for f in ["zero_filled_0.png", "tv_1.png", "grappa_0_error.png", "baseline_metrics.json"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
}

#[test]
fn unknown_baseline_method_is_a_usage_error() {
    let res = spicer(&["baseline", "--method", "wavelet"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn eval_json_matches_text_and_region_is_honored() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&with(&["simulate", "--out", out], &[SMALL]));
    let full = dir.path().join("full");
    ok(&["eval", "--out", out, "--method", "zero_filled,tv"]);
    ok(&["eval", "--out", full.to_str().unwrap(), "--test-data", dir.path().join("test.spcr").to_str().unwrap(), "--method", "zero_filled", "--region", "full"]);

    let rows = json(dir.path().join("metrics.json"));
    let text = std::fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
    for row in rows.as_array().unwrap() {
        let method = row["method"].as_str().unwrap();
        let line = text.lines().find(|l| l.starts_with(method)).unwrap();
        let nums: Vec<f64> = line.split_whitespace().filter_map(|t| t.parse().ok()).collect();
        let printed = [
            (row["psnr_mean"].as_f64().unwrap(), 2),
            (row["psnr_std"].as_f64().unwrap(), 2),
            (row["ssim_mean"].as_f64().unwrap(), 4),
            (row["ssim_std"].as_f64().unwrap(), 4),
            (row["nmse_mean"].as_f64().unwrap(), 5),
            (row["nmse_std"].as_f64().unwrap(), 5),
        ];
        assert_eq!(nums.len(), printed.len(), "{line}");
        for (n, (v, digits)) in nums.iter().zip(printed) {
            assert_eq!(format!("{v:.digits$}"), format!("{n:.digits$}"), "{line}");
        }
        assert_eq!(row["region"], "fov");
    }
    let full_rows = json(full.join("metrics.json"));
    assert_eq!(full_rows[0]["region"], "full");
    assert_ne!(full_rows[0]["psnr_mean"], rows[0]["psnr_mean"]);
}

#[test]
fn empty_split_is_rejected_before_any_file_is_written() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let res = spicer(&["simulate", "--h", "32", "--w", "32", "--acs", "8", "--n-test", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn report_orders_runs_by_heldout_roughness() {
    let (_dir, out) = trained_run();
    let smooth = PathBuf::from(&out).join("smooth");
    let rough = PathBuf::from(&out).join("rough");
    let data = PathBuf::from(&out).join("train.spcr");
    let test = PathBuf::from(&out).join("test.spcr");
    for (dir, lambda) in [(&smooth, "10"), (&rough, "0")] {
        ok(&with(
            &["train", "--out", dir.to_str().unwrap(), "--train-data", data.to_str().unwrap(), "--test-data", test.to_str().unwrap(), "--lambda", lambda, "--lr", "0.01"],
            &[SMALL, TINY_MODEL],
        ));
    }
    let rep = PathBuf::from(&out).join("report");
    ok(&["report", "--out", rep.to_str().unwrap(), "--runs", &format!("{},{}", rough.display(), smooth.display())]);
    let report = json(rep.join("report.json"));
    let order = report["roughness_ordering"].as_array().unwrap();
    assert_eq!(order.len(), 2);
    assert!(order[0]["heldout_map_roughness"].as_f64() <= order[1]["heldout_map_roughness"].as_f64());
    // a heavy smoothness weight yields the smoother held-out maps
    assert_eq!(order[0]["lambda"].as_f64(), Some(10.0));
    assert!(rep.join("report.txt").is_file());
}
