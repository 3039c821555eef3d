//! The five batch commands. Each resolves its config, runs the
//! corresponding core pipeline, and writes a run manifest plus artifacts
//! into its run directory.

use std::io::Write as _;
use std::path::Path;

use pap_core::attack::{adaptive_pgd, pgd, AttackRegistry};
use pap_core::data::{self, Split};
use pap_core::error::{PapError, Result};
use pap_core::eval::{evaluate, spectrum_swap_diagnostic, write_report_artifacts};
use pap_core::model::checkpoint::{load_model, save_model, TrainingRecord};
use pap_core::model::cnn::ReferenceCnn;
use pap_core::model::pretrain::{
    accuracy_in_batches, pretrain_adversarial, pretrain_natural, PretrainConfig,
};
use pap_core::model::Classifier;
use pap_core::prompt::{load_bank, PromptBank};
use pap_core::train::{train_prompts, TrainConfig};
use pap_core::weighting::display_weight;
use serde::Serialize;

use crate::config::{
    self, resolve_out_dir, AttackCmdCfg, DiagnoseCfg, EvaluateCfg, PretrainCfg, TrainPromptsCfg,
};

/// Provenance header written into every run directory.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_digest: String,
    seed: u64,
    duration_s: f64,
    generator: String,
    dft_convention: String,
    outputs: serde_json::Value,
}

fn write_run_manifest(
    dir: &Path,
    command: &str,
    config_digest: &str,
    seed: u64,
    duration_s: f64,
    outputs: serde_json::Value,
) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        config_digest: config_digest.to_string(),
        seed,
        duration_s,
        generator: data::GENERATOR_VERSION.to_string(),
        dft_convention: pap_core::spectral::DFT_CONVENTION.to_string(),
        outputs,
    };
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("run_manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for row in rows {
        let line = serde_json::to_string(row)?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}

fn load_backbone(path: &str) -> Result<(ReferenceCnn<f32>, String)> {
    let (model, manifest) = load_model(Path::new(path))?;
    Ok((model, manifest.param_digest))
}

// ---- pretrain ----

pub fn pretrain(config_path: &Path, overrides: &[String]) -> Result<()> {
    let (cfg, digest) = config::load::<PretrainCfg>(config_path, overrides)?;
    let out = resolve_out_dir(&cfg.out_dir, "pretrain", cfg.seed, &digest);
    let started = std::time::Instant::now();

    let train = data::generate(Split::Train, cfg.dataset.seed, cfg.dataset.train_len)?;
    let test = data::generate(Split::Test, cfg.dataset.seed, cfg.dataset.test_len)?;

    let mut model = match &cfg.init {
        Some(path) => {
            let (model, _) = load_backbone(path)?;
            if model.num_classes() != data::NUM_CLASSES
                || model.input_shape() != (1, data::IMAGE_SIDE, data::IMAGE_SIDE)
            {
                return Err(PapError::Validation(format!(
                    "warm-start checkpoint {path} has shape {:?} with {} classes; \
                     the dataset needs (1,{},{}) with {}",
                    model.input_shape(),
                    model.num_classes(),
                    data::IMAGE_SIDE,
                    data::IMAGE_SIDE,
                    data::NUM_CLASSES
                )));
            }
            model
        }
        None => ReferenceCnn::<f32>::build(
            (1, data::IMAGE_SIDE, data::IMAGE_SIDE),
            data::NUM_CLASSES,
            cfg.seed,
        )?,
    };
    let optim = PretrainConfig {
        epochs: cfg.optim.epochs,
        batch_size: cfg.optim.batch_size,
        lr: cfg.optim.lr,
        momentum: cfg.optim.momentum,
        seed: cfg.seed,
        lr_drop_at: cfg.optim.lr_drop_at,
    };

    let (report, robust_accuracy) = match cfg.regime.as_str() {
        "natural" => {
            let report = pretrain_natural(&mut model, &train, &optim)?;
            (report, None)
        }
        "adversarial" => {
            let attack = cfg
                .attack
                .as_ref()
                .ok_or_else(|| {
                    PapError::Config("adversarial regime needs an [attack] table".into())
                })?
                .to_config()?;
            let report = pretrain_adversarial(&mut model, &train, &attack, &optim)?;
            // Robust accuracy on the test split under the training attack.
            let adv = pgd(&model, &test.images, &test.labels, &attack)?;
            let robust = accuracy_in_batches(&model, &adv, &test.labels, optim.batch_size)?;
            (report, Some(robust))
        }
        other => {
            return Err(PapError::Config(format!(
                "unknown regime {other:?}; expected \"natural\" or \"adversarial\""
            )))
        }
    };

    let clean = accuracy_in_batches(&model, &test.images, &test.labels, optim.batch_size)?;
    let record = TrainingRecord {
        regime: cfg.regime.clone(),
        epochs: report.epochs_run,
        clean_accuracy: clean,
        robust_accuracy,
    };
    let model_dir = out.join("model");
    let checkpoint = save_model(&model, &model_dir, cfg.seed, Some(record))?;

    #[derive(Serialize)]
    struct EpochRow {
        epoch: usize,
        mean_loss: f64,
    }
    let rows: Vec<EpochRow> = report
        .epoch_mean_losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| EpochRow { epoch: i + 1, mean_loss: loss })
        .collect();
    write_jsonl(&out.join("pretrain_log.jsonl"), &rows)?;

    write_run_manifest(
        &out,
        "pretrain",
        &digest,
        cfg.seed,
        started.elapsed().as_secs_f64(),
        serde_json::json!({
            "model_dir": model_dir,
            "param_digest": checkpoint.param_digest,
            "dataset": data::manifest(&train, &test, cfg.dataset.seed),
            "test_clean_accuracy": clean,
            "test_robust_accuracy": robust_accuracy,
        }),
    )?;
    println!(
        "pretrain[{}]: {} epochs, final train accuracy {:.4}, test clean accuracy {:.4}{}",
        cfg.regime,
        report.epochs_run,
        report.final_train_accuracy,
        clean,
        match robust_accuracy {
            Some(r) => format!(", test robust accuracy {r:.4}"),
            None => String::new(),
        }
    );
    println!("artifacts: {}", out.display());
    Ok(())
}

// ---- train-prompts ----

fn build_train_config(cfg: &TrainPromptsCfg) -> Result<TrainConfig> {
    let attack = cfg.attack.to_config()?;
    let mut train_cfg = match cfg.preset.as_str() {
        "natural" => TrainConfig::natural_defaults(attack, cfg.epochs, cfg.seed),
        "adversarial" => TrainConfig::adversarial_defaults(attack, cfg.epochs, cfg.seed),
        other => {
            return Err(PapError::Config(format!(
                "unknown preset {other:?}; expected \"natural\" or \"adversarial\""
            )))
        }
    };
    train_cfg.batch_size = cfg.batch_size;
    if let Some(obj) = &cfg.objective {
        if let Some(v) = obj.lambda1 {
            train_cfg.objective.lambda1 = v;
        }
        if let Some(v) = obj.lambda2 {
            train_cfg.objective.lambda2 = v;
        }
        if let Some(v) = obj.lambda3 {
            train_cfg.objective.lambda3 = v;
        }
        if let Some(v) = obj.tau {
            train_cfg.objective.tau = v;
        }
    }
    if let Some(v) = cfg.lr {
        train_cfg.lr = v;
    }
    if let Some(v) = cfg.momentum {
        train_cfg.momentum = v;
    }
    if let Some(v) = cfg.lr_drop_epoch {
        train_cfg.lr_drop_epoch = v;
    }
    if let Some(v) = cfg.lr_drop_factor {
        train_cfg.lr_drop_factor = v;
    }
    if let Some(v) = cfg.weight_update_period {
        train_cfg.weight_update_period = v;
    }
    train_cfg.adaptive_attack = cfg.adaptive_attack;
    train_cfg.clamp_in_graph = cfg.clamp_in_graph;
    train_cfg.validate()?;
    Ok(train_cfg)
}

pub fn train_prompts_cmd(config_path: &Path, overrides: &[String]) -> Result<()> {
    let (cfg, digest) = config::load::<TrainPromptsCfg>(config_path, overrides)?;
    let out = resolve_out_dir(&cfg.out_dir, "train-prompts", cfg.seed, &digest);
    let started = std::time::Instant::now();

    let (model, backbone_digest) = load_backbone(&cfg.backbone)?;
    let train = data::generate(Split::Train, cfg.dataset.seed, cfg.dataset.train_len)?;
    let train_cfg = build_train_config(&cfg)?;

    let (bank, logs) = train_prompts(&model, &train.images, &train.labels, &train_cfg)?;

    let bank_dir = out.join("bank");
    bank.save(&bank_dir)?;
    write_jsonl(&out.join("epochs.jsonl"), &logs)?;

    let last = logs.last().expect("at least one epoch");
    write_run_manifest(
        &out,
        "train-prompts",
        &digest,
        cfg.seed,
        started.elapsed().as_secs_f64(),
        serde_json::json!({
            "bank_dir": bank_dir,
            "backbone": cfg.backbone,
            "backbone_digest": backbone_digest,
            "train_digest": train.digest(),
            "final_weight": bank.weight,
            "final_weight_display": display_weight(bank.weight as f64),
            "final_robust_accuracy": last.robust_accuracy,
            "epochs": logs.len(),
        }),
    )?;
    println!(
        "train-prompts[{}]: {} epochs, final prompted robust accuracy {:.4}, weight {:.4}",
        cfg.preset,
        logs.len(),
        last.robust_accuracy,
        display_weight(bank.weight as f64)
    );
    println!("artifacts: {}", out.display());
    Ok(())
}

// ---- evaluate ----

pub fn evaluate_cmd(config_path: &Path, overrides: &[String]) -> Result<()> {
    let (cfg, digest) = config::load::<EvaluateCfg>(config_path, overrides)?;
    let out = resolve_out_dir(&cfg.out_dir, "evaluate", cfg.seed, &digest);
    let started = std::time::Instant::now();

    let (model, backbone_digest) = load_backbone(&cfg.backbone)?;
    let strategy = config::parse_strategy(&cfg.strategy)?;
    let test = data::generate(Split::Test, cfg.dataset.seed, cfg.dataset.test_len)?;

    let bank = match &cfg.bank {
        Some(dir) => {
            let bank = load_bank(Path::new(dir))?;
            if bank.image_shape != model.input_shape() || bank.num_classes != model.num_classes()
            {
                return Err(PapError::Validation(format!(
                    "bank ({} classes, shape {:?}) does not fit the backbone ({} classes, shape {:?})",
                    bank.num_classes,
                    bank.image_shape,
                    model.num_classes(),
                    model.input_shape()
                )));
            }
            bank
        }
        None => PromptBank::zeros(model.num_classes(), model.input_shape()),
    };

    let mut registry: AttackRegistry<f32> = AttackRegistry::new();
    let mut names = Vec::new();
    for spec in &cfg.attacks {
        let attack_cfg = spec.to_config()?;
        if spec.adaptive {
            let bank_for_attack = bank.clone();
            registry.register(
                &spec.name,
                Box::new(move |m, x, y| adaptive_pgd(m, &bank_for_attack, x, y, &attack_cfg)),
            )?;
        } else {
            registry.register(
                &spec.name,
                Box::new(move |m, x, y| pgd(m, x, y, &attack_cfg)),
            )?;
        }
        names.push(spec.name.clone());
    }

    let report = evaluate(
        &model,
        &bank,
        &test.images,
        &test.labels,
        &registry,
        &names,
        strategy,
        cfg.seed,
    )?;
    write_report_artifacts(&report, &bank, &out)?;

    // Bank identity as stored on disk, for round-trip verification.
    let bank_checksums = match &cfg.bank {
        Some(dir) => {
            let manifest_text = std::fs::read_to_string(Path::new(dir).join("manifest.json"))?;
            let manifest: serde_json::Value = serde_json::from_str(&manifest_text)?;
            manifest.get("checksums").cloned().unwrap_or(serde_json::Value::Null)
        }
        None => serde_json::Value::Null,
    };

    write_run_manifest(
        &out,
        "evaluate",
        &digest,
        cfg.seed,
        started.elapsed().as_secs_f64(),
        serde_json::json!({
            "report": out.join("report.json"),
            "backbone": cfg.backbone,
            "backbone_digest": backbone_digest,
            "bank": cfg.bank,
            "bank_checksums": bank_checksums,
            "test_digest": report.dataset_digest,
        }),
    )?;

    println!(
        "evaluate[{}]: natural accuracy {:.4} (weight {:.4}, {} calls/image)",
        cfg.strategy,
        report.natural_accuracy,
        display_weight(report.weight_used),
        report.model_calls_per_image
    );
    for (name, acc) in &report.robust_accuracy {
        println!("  {name}: robust accuracy {acc:.4}");
    }
    println!("artifacts: {}", out.display());
    Ok(())
}

// ---- diagnose-spectra ----

pub fn diagnose_spectra(config_path: &Path, overrides: &[String]) -> Result<()> {
    let (cfg, digest) = config::load::<DiagnoseCfg>(config_path, overrides)?;
    let out = resolve_out_dir(&cfg.out_dir, "diagnose-spectra", cfg.seed, &digest);
    let started = std::time::Instant::now();

    let (model, backbone_digest) = load_backbone(&cfg.backbone)?;
    let test = data::generate(Split::Test, cfg.dataset.seed, cfg.dataset.test_len)?;
    let attack = cfg.attack.to_config()?;

    let table = spectrum_swap_diagnostic(&model, &test.images, &test.labels, &attack)?;

    std::fs::create_dir_all(&out)?;
    std::fs::write(
        out.join("swap_table.json"),
        serde_json::to_string_pretty(&table)?,
    )?;
    write_run_manifest(
        &out,
        "diagnose-spectra",
        &digest,
        cfg.seed,
        started.elapsed().as_secs_f64(),
        serde_json::json!({
            "swap_table": out.join("swap_table.json"),
            "backbone": cfg.backbone,
            "backbone_digest": backbone_digest,
            "test_digest": test.digest(),
        }),
    )?;

    println!("spectrum-swap accuracies (attack: {} eps={}):", cfg.attack.norm, cfg.attack.epsilon);
    println!("  condition        accuracy");
    println!("  adv-all          {:.4}", table.adv_all);
    println!("  nat-phase        {:.4}", table.nat_phase);
    println!("  nat-amplitude    {:.4}", table.nat_amplitude);
    println!("  nat-both         {:.4}", table.nat_both);
    println!("artifacts: {}", out.display());
    Ok(())
}

// ---- attack ----

pub fn attack_cmd(config_path: &Path, overrides: &[String]) -> Result<()> {
    let (cfg, digest) = config::load::<AttackCmdCfg>(config_path, overrides)?;
    let out = resolve_out_dir(&cfg.out_dir, "attack", cfg.seed, &digest);
    let started = std::time::Instant::now();

    let (model, backbone_digest) = load_backbone(&cfg.backbone)?;
    let (split, len) = match cfg.split.as_str() {
        "train" => (Split::Train, cfg.dataset.train_len),
        "test" => (Split::Test, cfg.dataset.test_len),
        other => {
            return Err(PapError::Config(format!(
                "unknown split {other:?}; expected \"train\" or \"test\""
            )))
        }
    };
    let dataset = data::generate(split, cfg.dataset.seed, len)?;
    let take = cfg.limit.unwrap_or(len).min(len);
    let images = dataset
        .images
        .slice(ndarray::s![..take, .., .., ..])
        .to_owned();
    let labels = dataset.labels[..take].to_vec();

    let attack = cfg.attack.to_config()?;
    let adv = pgd(&model, &images, &labels, &attack)?;
    let robust = accuracy_in_batches(&model, &adv, &labels, 200)?;

    std::fs::create_dir_all(&out)?;
    let image_bytes = pap_core::bytes::array_to_le_bytes(&adv);
    std::fs::write(out.join("images.bin"), &image_bytes)?;
    let mut label_bytes = Vec::with_capacity(labels.len() * 4);
    for &y in &labels {
        label_bytes.extend_from_slice(&(y as u32).to_le_bytes());
    }
    std::fs::write(out.join("labels.bin"), &label_bytes)?;

    write_run_manifest(
        &out,
        "attack",
        &digest,
        cfg.seed,
        started.elapsed().as_secs_f64(),
        serde_json::json!({
            "images": out.join("images.bin"),
            "labels": out.join("labels.bin"),
            "count": take,
            "image_shape": [1, data::IMAGE_SIDE, data::IMAGE_SIDE],
            "backbone": cfg.backbone,
            "backbone_digest": backbone_digest,
            "natural_digest": data::digest_parts(&images, &labels),
            "adversarial_digest": data::digest_parts(&adv, &labels),
            "raw_robust_accuracy": robust,
        }),
    )?;
    println!(
        "attack[{} eps={}]: {} examples, raw robust accuracy {:.4}",
        cfg.attack.norm, cfg.attack.epsilon, take, robust
    );
    println!("artifacts: {}", out.display());
    Ok(())
}
