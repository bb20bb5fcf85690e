use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};

use ctcmix_core::data::{
    load_dataset, prepare_lines, read_genconfig, write_dataset, GenConfig, LineImage, Split,
};
use ctcmix_core::model::load_checkpoint;
use ctcmix_core::trainer::{evaluate, select_subset, train, EpochRecord, TrainOutcome};
use ctcmix_core::PreparedLine;

use crate::args::{EvalArgs, GenDataArgs, Overrides, SplitArg, TrainArgs};
use crate::config::{RunConfig, RESOLVED_CONFIG};
use crate::{ablate, selftest, CliError, Command};

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Selftest(a) => selftest::run(&a),
        Command::Ablate(a) => ablate::run(&a),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let cfg = GenConfig {
        lines: a.lines,
        val_fraction: a.val_fraction,
        alphabet: a.alphabet.clone(),
        min_len: a.min_len,
        max_len: a.max_len,
        seed: a.seed,
        ..GenConfig::default()
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if fs::read_dir(&a.out).is_ok_and(|mut d| d.next().is_some()) {
        return Err(CliError::Usage(format!(
            "{} exists and is not empty; choose a fresh directory",
            a.out.display()
        )));
    }
    let (n_train, n_valid) = write_dataset(&a.out, &cfg)
        .with_context(|| format!("gen-data: writing {}", a.out.display()))?;
    println!("train={n_train} valid={n_valid}");
    Ok(())
}

/// Defaults, then the config file, then `CTCMIX_*`, then flags.
pub fn resolve_config(
    file: Option<&Path>,
    overrides: &Overrides,
    data: Option<&Path>,
    out: Option<&Path>,
) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(f) = file {
        cfg.apply_file(f)?;
    }
    cfg.apply_env(std::env::vars())?;
    cfg.apply_pairs(overrides.pairs())?;
    if let Some(d) = data {
        cfg.data = Some(d.to_path_buf());
    }
    if let Some(o) = out {
        cfg.out = Some(o.to_path_buf());
    }
    Ok(cfg)
}

/// The model alphabet: the generator's when recorded, else every character
/// seen in the transcripts, sorted.
pub fn dataset_vocabulary(root: &Path, lines: &[&[LineImage]]) -> anyhow::Result<String> {
    if let Some(g) = read_genconfig(root)? {
        return Ok(g.alphabet);
    }
    let chars: BTreeSet<char> = lines
        .iter()
        .flat_map(|l| l.iter())
        .flat_map(|l| l.transcript.chars())
        .collect();
    if chars.is_empty() {
        return Err(anyhow!("dataset has no characters to build a vocabulary from"));
    }
    Ok(chars.into_iter().collect())
}

pub struct TrainingData {
    pub train: Vec<PreparedLine>,
    pub valid: Vec<PreparedLine>,
    pub vocabulary: String,
}

pub fn load_training_data(cfg: &RunConfig) -> Result<TrainingData, CliError> {
    let root = cfg.data.as_deref().ok_or(crate::ConfigError::Missing("data"))?;
    let train_raw = load_dataset(root, Split::Train)
        .with_context(|| format!("loading training split of {}", root.display()))?;
    let valid_raw = load_dataset(root, Split::Valid)
        .with_context(|| format!("loading validation split of {}", root.display()))?;
    let vocabulary = dataset_vocabulary(root, &[&train_raw, &valid_raw])?;
    let train_raw = match cfg.train_subset {
        Some(n) => select_subset(&train_raw, n, cfg.seed),
        None => train_raw,
    };
    let net = cfg.network_config(&vocabulary)?;
    let vocab = net.vocab().context("building vocabulary")?;
    let prep = |lines: &[LineImage], what: &str| {
        prepare_lines(lines, net.input_height, &vocab)
            .with_context(|| format!("preparing {what} lines"))
    };
    Ok(TrainingData {
        train: prep(&train_raw, "training")?,
        valid: prep(&valid_raw, "validation")?,
        vocabulary,
    })
}

/// Trains under `cfg`, writing `resolved.cfg`, checkpoints and the log into
/// its output directory.
pub fn run_training(
    cfg: &RunConfig,
    data: &TrainingData,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, CliError> {
    let out = cfg.out.as_deref().ok_or(crate::ConfigError::Missing("out"))?;
    let net = cfg.network_config(&data.vocabulary)?;
    let train_cfg = cfg.train_config()?;
    train_cfg
        .validate(&net)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let resolved = out.join(RESOLVED_CONFIG);
    fs::write(&resolved, cfg.to_text())
        .with_context(|| format!("writing {}", resolved.display()))?;
    let outcome = train(&data.train, &data.valid, net, &train_cfg, Some(out), on_epoch)
        .context("training")?;
    Ok(outcome)
}

fn train_cmd(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = resolve_config(
        a.config.as_deref(),
        &a.overrides,
        a.data.as_deref(),
        a.out.as_deref(),
    )?;
    let data = load_training_data(&cfg)?;
    eprintln!(
        "training on {} lines, validating on {}",
        data.train.len(),
        data.valid.len()
    );
    let outcome = run_training(&cfg, &data, &mut |r| {
        eprintln!(
            "epoch {} train_loss={:.4} val_loss={:.4} val_cer={:.4} lambda={:.3} skipped={} ({:.1}s)",
            r.epoch, r.train_loss, r.val_loss, r.val_cer, r.lambda_mean, r.skipped_pairs, r.seconds
        )
    })?;
    let best = outcome.log.best().expect("at least one epoch");
    println!(
        "best_epoch={} val_cer={} val_loss={} epochs={}",
        best.epoch,
        best.val_cer,
        best.val_loss,
        outcome.log.records.len()
    );
    Ok(())
}

fn default_report_path(checkpoint: &Path, split: Split) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(format!(".{split}.tsv"));
    PathBuf::from(name)
}

fn eval_cmd(a: &EvalArgs) -> Result<(), CliError> {
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Valid => Split::Valid,
    };
    if a.batch == 0 {
        return Err(CliError::Usage("batch must be at least 1".into()));
    }
    let net = load_checkpoint(&a.checkpoint).context("eval: loading checkpoint")?;
    let lines = load_dataset(&a.data, split)
        .with_context(|| format!("eval: loading {split} split of {}", a.data.display()))?;
    let report = evaluate(&net, &lines, a.batch).context("eval")?;
    let path = a
        .report
        .clone()
        .unwrap_or_else(|| default_report_path(&a.checkpoint, split));
    fs::write(&path, report.to_tsv())
        .with_context(|| format!("eval: writing {}", path.display()))?;
    println!("{}", report.summary());
    Ok(())
}
