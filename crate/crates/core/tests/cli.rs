use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use semadv::io::{self, RunConfig};
use semadv::models::EnergyArch;
use semadv::samplers::DistanceKind;

fn semadv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semadv")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.data.synthetic_train = 200;
    cfg.data.synthetic_test = 40;
    cfg.classifier.train.epochs = 1;
    cfg.classifier.train.warmup_epochs = 0;
    cfg.classifier.pgd.steps = 2;
    cfg.ebm.arch = EnergyArch::compact();
    cfg.ebm.steps = 3;
    cfg.ebm.batch_size = 4;
    cfg.ebm.lmc_steps = 5;
    cfg.ebm.buffer_capacity = 16;
    cfg.attack.m = 6;
    cfg.attack.n = 3;
    cfg.attack.chunk = 4;
    cfg.attack.sampler.steps = 10;
    cfg.attack.energy.distance = DistanceKind::L2sq;
    cfg.baseline.linf.steps = 2;
    cfg.baseline.l2.steps = 2;
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn run_ok(args: &[&str]) -> String {
    let out = semadv(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    stdout(&out)
}

#[test]
fn unknown_subcommand_and_flag_exit_with_usage() {
    for args in [&["frobnicate"][..], &["selftest", "--no-such-flag"][..], &[][..]] {
        let out = semadv(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"), "{args:?}");
    }
}

#[test]
fn failures_print_a_diagnostic_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.ckpt");
    let out = semadv(&["eval", "--surrogate", missing.to_str().unwrap(), "--samples", "x", "--label", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[attack]\nmm = 3\n").unwrap();
    let out = semadv(&["selftest", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mm"));
}

#[test]
fn selftest_prints_one_line_per_suite() {
    let text = run_ok(&["selftest", "--seed", "3"]);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3, "{text}");
    assert!(lines.iter().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn attack_is_byte_identical_under_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("models");
    let out_s = out.to_str().unwrap();
    run_ok(&["train-classifier", "--config", cfg, "--out", out_s, "--name", "victim"]);
    run_ok(&["train-classifier", "--config", cfg, "--out", out_s, "--name", "aux", "--augment", "--seed", "5"]);
    assert!(out.join("victim_loss.csv").exists());
    let victim = out.join("victim.ckpt");
    let aux = out.join("aux.ckpt");

    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let dest = dir.path().join(run);
        let text = run_ok(&[
            "attack", "--config", cfg, "--seed", "7", "--out", dest.to_str().unwrap(),
            "--victim", victim.to_str().unwrap(), "--aux", aux.to_str().unwrap(),
            "--digit", "3", "--target", "8",
        ]);
        assert!(text.starts_with("accepted "), "{text}");
        reports.push((
            std::fs::read(dest.join("attack_report.json")).unwrap(),
            std::fs::read(dest.join("attack_records.json")).unwrap(),
        ));
    }
    assert_eq!(reports[0], reports[1]);
    let report: serde_json::Value = serde_json::from_slice(&reports[0].0).unwrap();
    assert_eq!(report["m"], 6);
    assert_eq!(report["y_tar"], 8);
    assert_eq!(report["y_ori"], 3);
    assert!(report["accepted"].as_u64().unwrap() > 0);

    let other = dir.path().join("c");
    run_ok(&[
        "attack", "--config", cfg, "--seed", "8", "--out", other.to_str().unwrap(),
        "--victim", victim.to_str().unwrap(), "--aux", aux.to_str().unwrap(),
        "--digit", "3", "--target", "8",
    ]);
    let c = std::fs::read(other.join("attack_records.json")).unwrap();
    assert_ne!(reports[0].1, c);
}

#[test]
fn grid_writes_matrix_reports_and_one_image_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    run_ok(&["train-classifier", "--config", cfg, "--out", out_s, "--name", "v"]);
    let ckpt = out.join("v.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let text = run_ok(&[
        "grid", "--config", cfg, "--out", out_s, "--seed", "1", "--victim", ckpt, "--aux", ckpt,
        "--surrogate", ckpt, "--sources", "0,1", "--targets", "0,1,2",
    ]);
    let csv = std::fs::read_to_string(out.join("success.csv")).unwrap();
    assert_eq!(text, csv);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0].split(',').count(), 3);
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("1,"));
    let jsonl = std::fs::read_to_string(out.join("reports.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 4);
    for line in jsonl.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
    for (s, t) in [(0, 1), (0, 2), (1, 0), (1, 2)] {
        let name = format!("grid_{s}_{t}.ppm");
        let refined = jsonl
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
            .find(|v| v["y_ori"] == s && v["y_tar"] == t)
            .unwrap()["refined"]
            .as_u64()
            .unwrap();
        assert_eq!(out.join(&name).exists(), refined > 0, "{name}");
    }
}

#[test]
fn ebm_sampling_baseline_and_eval_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();

    let text = run_ok(&["train-ebm", "--config", cfg, "--out", out_s, "--digit", "2"]);
    assert!(text.starts_with("tail positive-gap rate"));
    assert!(io::load_energy(&out.join("ebm_2.ckpt"), Some(EnergyArch::compact())).is_ok());
    let csv = std::fs::read_to_string(out.join("ebm_2.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,pos_energy,neg_energy"));
    assert_eq!(csv.lines().count(), 4);

    run_ok(&["adv-train", "--config", cfg, "--out", out_s]);
    let robust = out.join("robust.ckpt");
    let robust = robust.to_str().unwrap();

    let text = run_ok(&["sample-victim", "--config", cfg, "--out", out_s, "--victim", robust, "--target", "4", "--count", "5"]);
    assert!(text.starts_with("victim predicts target on"));
    let samples = out.join("victim_samples.saet");
    let x = io::load_tensor::<f32>(&samples).unwrap();
    assert_eq!(x.shape(), &[5, 1, 28, 28]);
    assert!(x.all_within(0.0, 1.0));
    assert!(out.join("victim_samples.ppm").exists());

    let text = run_ok(&["pgd-baseline", "--config", cfg, "--out", out_s, "--victim", robust]);
    assert!(text.starts_with("deceived "));
    assert!(out.join("baseline_linf.ppm").exists());
    run_ok(&["pgd-baseline", "--config", cfg, "--out", out_s, "--victim", robust, "--norm", "l2"]);
    assert!(out.join("baseline_l2.ppm").exists());

    let text = run_ok(&["eval", "--out", out_s, "--surrogate", robust, "--samples", samples.to_str().unwrap(), "--label", "4"]);
    assert!(text.starts_with("success rate "));
    let eval: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["count"], 5);
    let rate = eval["success_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
}
