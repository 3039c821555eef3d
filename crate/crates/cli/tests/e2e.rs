//! End-to-end test of the `pap` binary: a miniature
//! pretrain → train-prompts → evaluate pipeline plus the diagnostic and
//! attack commands, and the error-path exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;

fn pap() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pap"))
}

struct Run {
    status: Option<i32>,
    stdout: String,
    stderr: String,
}

fn run(args: &[&str]) -> Run {
    let output = pap().args(args).output().expect("pap runs");
    Run {
        status: output.status.code(),
        stdout: String::from_utf8_lossy(&output.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
    }
}

fn write(path: &Path, text: &str) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, text).unwrap();
}

fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()));
    serde_json::from_str(&text).unwrap()
}

fn jsonl_lines(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

const TINY_ATTACK: &str = "norm = \"linf\"\nepsilon = 0.03137254901960784\nsteps = 2\nstep_size = 0.00784313725490196\nrandom_start = true\n";

fn home() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("pap-e2e-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn full_pipeline_and_error_paths() {
    let home = home();

    // ---- pretrain (natural, tiny) ----
    let pretrain_cfg = home.join("pretrain.toml");
    write(
        &pretrain_cfg,
        &format!(
            "regime = \"natural\"\nseed = 3\nout_dir = {:?}\n\n\
             [dataset]\nseed = 5\ntrain_len = 48\ntest_len = 24\n\n\
             [optim]\nepochs = 1\nbatch_size = 24\nlr = 0.05\nmomentum = 0.9\n",
            home.join("nat").to_str().unwrap()
        ),
    );
    let r = run(&["pretrain", "--config", pretrain_cfg.to_str().unwrap()]);
    assert_eq!(r.status, Some(0), "stderr: {}", r.stderr);
    assert!(r.stdout.contains("pretrain[natural]"), "stdout: {}", r.stdout);
    let model_manifest = read_json(&home.join("nat/model/manifest.json"));
    assert_eq!(model_manifest["num_classes"], 10);
    assert_eq!(jsonl_lines(&home.join("nat/pretrain_log.jsonl")).len(), 1);
    let run_manifest = read_json(&home.join("nat/run_manifest.json"));
    assert_eq!(run_manifest["command"], "pretrain");
    assert!(run_manifest["config_digest"].as_str().unwrap().len() == 64);

    // ---- train-prompts ----
    let backbone = home.join("nat/model");
    let tp_cfg = home.join("train-prompts.toml");
    write(
        &tp_cfg,
        &format!(
            "seed = 9\nout_dir = {:?}\nbackbone = {:?}\npreset = \"natural\"\n\
             epochs = 1\nbatch_size = 24\n\n\
             [dataset]\nseed = 5\ntrain_len = 48\n\n[attack]\n{TINY_ATTACK}",
            home.join("bankrun").to_str().unwrap(),
            backbone.to_str().unwrap()
        ),
    );
    let r = run(&["train-prompts", "--config", tp_cfg.to_str().unwrap()]);
    assert_eq!(r.status, Some(0), "stderr: {}", r.stderr);
    let bank_manifest = read_json(&home.join("bankrun/bank/manifest.json"));
    assert_eq!(bank_manifest["num_classes"], 10);
    assert_eq!(jsonl_lines(&home.join("bankrun/epochs.jsonl")).len(), 1);

    // ---- evaluate (bank + raw and adaptive attacks) ----
    let eval_cfg = home.join("evaluate.toml");
    write(
        &eval_cfg,
        &format!(
            "seed = 11\nout_dir = {:?}\nbackbone = {:?}\nbank = {:?}\n\
             strategy = \"predicted_label\"\n\n\
             [dataset]\nseed = 5\ntest_len = 24\n\n\
             [[attacks]]\nname = \"pgd-linf-2\"\n{TINY_ATTACK}\n\
             [[attacks]]\nname = \"adaptive-pgd-2\"\nadaptive = true\n{TINY_ATTACK}",
            home.join("eval").to_str().unwrap(),
            backbone.to_str().unwrap(),
            home.join("bankrun/bank").to_str().unwrap()
        ),
    );
    let r = run(&["evaluate", "--config", eval_cfg.to_str().unwrap()]);
    assert_eq!(r.status, Some(0), "stderr: {}", r.stderr);
    let report = read_json(&home.join("eval/report.json"));
    let natural = report["natural_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&natural));
    for name in ["pgd-linf-2", "adaptive-pgd-2"] {
        let acc = report["robust_accuracy"][name].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc), "{name}: {acc}");
    }
    assert_eq!(report["model_calls_per_image"], 2);
    assert!(home.join("eval/accuracy.svg").exists());
    assert!(home.join("eval/weight_trajectory.svg").exists());

    // Round trip: evaluate consumed the bank exactly as train-prompts
    // saved it (checksums recorded in the run manifest match the bank's).
    let eval_manifest = read_json(&home.join("eval/run_manifest.json"));
    assert_eq!(
        eval_manifest["outputs"]["bank_checksums"],
        bank_manifest["checksums"]
    );
    assert_eq!(
        eval_manifest["outputs"]["backbone_digest"],
        model_manifest["param_digest"]
    );

    // ---- reproducibility: same config, fresh out_dir ----
    let r = run(&[
        "evaluate",
        "--config",
        eval_cfg.to_str().unwrap(),
        "--set",
        &format!("out_dir={:?}", home.join("eval2").to_str().unwrap()),
    ]);
    assert_eq!(r.status, Some(0), "stderr: {}", r.stderr);
    let report2 = read_json(&home.join("eval2/report.json"));
    assert_eq!(report2["natural_accuracy"], report["natural_accuracy"]);
    assert_eq!(report2["robust_accuracy"], report["robust_accuracy"]);
    assert_eq!(report2["dataset_digest"], report["dataset_digest"]);

    // ---- dotted-path override changes the dataset size ----
    let r = run(&[
        "evaluate",
        "--config",
        eval_cfg.to_str().unwrap(),
        "--set",
        &format!("out_dir={:?}", home.join("eval3").to_str().unwrap()),
        "--set",
        "dataset.test_len=16",
        "--set",
        "attacks.0.steps=1",
    ]);
    assert_eq!(r.status, Some(0), "stderr: {}", r.stderr);
    let report3 = read_json(&home.join("eval3/report.json"));
    assert_eq!(report3["examples"], 16);

    // ---- zero-prompt evaluate (no bank key) ----
    let eval_raw_cfg = home.join("evaluate-raw.toml");
    write(
        &eval_raw_cfg,
        &format!(
            "seed = 11\nout_dir = {:?}\nbackbone = {:?}\n\
             strategy = \"oracle_label\"\n\n[dataset]\nseed = 5\ntest_len = 24\n",
            home.join("eval-raw").to_str().unwrap(),
            backbone.to_str().unwrap()
        ),
    );
    let r = run(&["evaluate", "--config", eval_raw_cfg.to_str().unwrap()]);
    assert_eq!(r.status, Some(0), "stderr: {}", r.stderr);
    let raw_report = read_json(&home.join("eval-raw/report.json"));
    assert_eq!(raw_report["weight_used"], 1.0);

    // ---- diagnose-spectra ----
    let diag_cfg = home.join("diagnose.toml");
    write(
        &diag_cfg,
        &format!(
            "seed = 13\nout_dir = {:?}\nbackbone = {:?}\n\n\
             [dataset]\nseed = 5\ntest_len = 24\n\n[attack]\n{TINY_ATTACK}",
            home.join("diag").to_str().unwrap(),
            backbone.to_str().unwrap()
        ),
    );
    let r = run(&["diagnose-spectra", "--config", diag_cfg.to_str().unwrap()]);
    assert_eq!(r.status, Some(0), "stderr: {}", r.stderr);
    let table = read_json(&home.join("diag/swap_table.json"));
    for key in ["adv_all", "nat_phase", "nat_amplitude", "nat_both"] {
        let v = table[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }

    // ---- attack (save an adversarial batch) ----
    let attack_cfg = home.join("attack.toml");
    write(
        &attack_cfg,
        &format!(
            "seed = 15\nout_dir = {:?}\nbackbone = {:?}\nlimit = 8\n\n\
             [dataset]\nseed = 5\ntest_len = 24\n\n[attack]\n{TINY_ATTACK}",
            home.join("adv").to_str().unwrap(),
            backbone.to_str().unwrap()
        ),
    );
    let r = run(&["attack", "--config", attack_cfg.to_str().unwrap()]);
    assert_eq!(r.status, Some(0), "stderr: {}", r.stderr);
    let images = std::fs::read(home.join("adv/images.bin")).unwrap();
    assert_eq!(images.len(), 8 * 28 * 28 * 4);
    let labels = std::fs::read(home.join("adv/labels.bin")).unwrap();
    assert_eq!(labels.len(), 8 * 4);
    let adv_manifest = read_json(&home.join("adv/run_manifest.json"));
    assert_eq!(adv_manifest["outputs"]["count"], 8);
    assert_ne!(
        adv_manifest["outputs"]["natural_digest"],
        adv_manifest["outputs"]["adversarial_digest"]
    );

    // ---- error paths ----
    // Unknown config key: exit 2 before any compute.
    let bad_cfg = home.join("bad-key.toml");
    write(
        &bad_cfg,
        "regime = \"natural\"\nseed = 3\nbanana = 1\n\n[dataset]\nseed = 5\n",
    );
    let r = run(&["pretrain", "--config", bad_cfg.to_str().unwrap()]);
    assert_eq!(r.status, Some(2), "stderr: {}", r.stderr);
    assert!(r.stderr.contains("banana"), "stderr: {}", r.stderr);

    // Unknown strategy: exit 2.
    let r = run(&[
        "evaluate",
        "--config",
        eval_raw_cfg.to_str().unwrap(),
        "--set",
        "strategy=majority_vote",
    ]);
    assert_eq!(r.status, Some(2), "stderr: {}", r.stderr);

    // Missing checkpoint: exit 3, error names the path.
    let missing = home.join("no-such-model");
    let r = run(&[
        "evaluate",
        "--config",
        eval_raw_cfg.to_str().unwrap(),
        "--set",
        &format!("backbone={:?}", missing.to_str().unwrap()),
    ]);
    assert_eq!(r.status, Some(3), "stderr: {}", r.stderr);
    assert!(
        r.stderr.contains("no-such-model"),
        "stderr: {}",
        r.stderr
    );

    // Invalid attack norm: exit 2.
    let r = run(&[
        "attack",
        "--config",
        attack_cfg.to_str().unwrap(),
        "--set",
        "attack.norm=l7",
    ]);
    assert_eq!(r.status, Some(2), "stderr: {}", r.stderr);

    std::fs::remove_dir_all(&home).ok();
}
