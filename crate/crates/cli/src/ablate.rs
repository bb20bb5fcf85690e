//! Ablation sweeps: each arm is a set of config overrides trained over
//! several seeds, summarised as mean/min/max/median validation CER.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};

use ctcmix_core::data::{load_dataset, Split};

use crate::args::{AblateArgs, Axis};
use crate::commands::{load_training_data, resolve_config, run_training};
use crate::config::{RunConfig, RESOLVED_CONFIG};
use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: String,
    pub settings: Vec<(&'static str, String)>,
}

fn arm(name: impl Into<String>, settings: &[(&'static str, &str)]) -> Arm {
    Arm {
        name: name.into(),
        settings: settings.iter().map(|&(k, v)| (k, v.to_string())).collect(),
    }
}

pub fn axis_name(axis: Axis) -> &'static str {
    match axis {
        Axis::Position => "position",
        Axis::Nway => "nway",
        Axis::Gradmult => "gradmult",
        Axis::Dist => "dist",
        Axis::Datasize => "datasize",
        Axis::Dropout => "dropout",
    }
}

/// The arms of `axis`. `base_lines` is the training-set size the datasize
/// fractions apply to; `base_dropout` the dropout of the "on" dropout arms.
pub fn arms(axis: Axis, sizes: &[f64], base_lines: usize, base_dropout: f64) -> Vec<Arm> {
    let off = arm("no-mixup", &[("mixup", "off")]);
    match axis {
        Axis::Position => vec![
            off,
            arm("input", &[("mixup", "on"), ("mixup_positions", "0")]),
            arm("conv4", &[("mixup", "on"), ("mixup_positions", "4")]),
            arm("conv8", &[("mixup", "on"), ("mixup_positions", "8")]),
            arm("input+conv4+conv8", &[("mixup", "on"), ("mixup_positions", "0,4,8")]),
        ],
        Axis::Nway => vec![
            off,
            arm("2-way", &[("mixup", "on"), ("n_way", "2")]),
            arm("3-way", &[("mixup", "on"), ("n_way", "3")]),
        ],
        Axis::Gradmult => vec![
            off,
            arm("multiply", &[("mixup", "on"), ("grad_multiply", "on")]),
            arm("no-multiply", &[("mixup", "on"), ("grad_multiply", "off")]),
        ],
        Axis::Dist => vec![
            off,
            arm("beta", &[("mixup", "on"), ("mixup_dist", "beta")]),
            arm("uniform", &[("mixup", "on"), ("mixup_dist", "uniform")]),
        ],
        Axis::Datasize => sizes
            .iter()
            .flat_map(|&f| {
                let n = ((base_lines as f64 * f).round() as usize).max(1).to_string();
                ["off", "on"].map(|m| Arm {
                    name: format!("size={f} lines={n} mixup={m}"),
                    settings: vec![("train_subset", n.clone()), ("mixup", m.to_string())],
                })
            })
            .collect(),
        Axis::Dropout => {
            let on = if base_dropout > 0.0 { base_dropout } else { 0.5 }.to_string();
            [("0", "0"), ("on", on.as_str())]
                .iter()
                .flat_map(|&(label, rate)| {
                    ["off", "on"].map(|m| Arm {
                        name: format!("dropout={label} mixup={m}"),
                        settings: vec![("dropout", rate.to_string()), ("mixup", m.to_string())],
                    })
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub val_cer: f64,
    pub val_loss: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmSummary {
    pub arm: String,
    pub runs: Vec<RunResult>,
    pub failures: Vec<(u64, String)>,
}

pub const SUMMARY_HEADER: &str =
    "arm\truns\tfailed\tcer_mean\tcer_min\tcer_max\tcer_median\tval_loss_mean\tbest_epoch_mean";

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

impl ArmSummary {
    fn mean(&self, f: impl Fn(&RunResult) -> f64) -> f64 {
        self.runs.iter().map(f).sum::<f64>() / self.runs.len() as f64
    }

    pub fn row(&self) -> String {
        let cers: Vec<f64> = self.runs.iter().map(|r| r.val_cer).collect();
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.arm,
            self.runs.len(),
            self.failures.len(),
            self.mean(|r| r.val_cer),
            cers.iter().copied().fold(f64::INFINITY, f64::min),
            cers.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            median(cers),
            self.mean(|r| r.val_loss),
            self.mean(|r| r.best_epoch as f64),
        )
    }
}

pub fn summary_tsv(arms: &[ArmSummary]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for a in arms {
        let _ = writeln!(out, "{}", a.row());
    }
    out
}

pub fn runs_tsv(arms: &[ArmSummary]) -> String {
    let mut out = String::from("arm\tseed\tbest_epoch\tval_cer\tval_loss\tepochs\tstatus\n");
    for a in arms {
        for r in &a.runs {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\tok",
                a.arm, r.seed, r.best_epoch, r.val_cer, r.val_loss, r.epochs
            );
        }
        for (seed, e) in &a.failures {
            let _ = writeln!(out, "{}\t{seed}\t\t\t\t\terror: {}", a.arm, e.replace('\t', " "));
        }
    }
    out
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

fn run_arm(base: &RunConfig, arm: &Arm, seeds: usize, dir: &Path) -> ArmSummary {
    let mut summary = ArmSummary {
        arm: arm.name.clone(),
        runs: Vec::new(),
        failures: Vec::new(),
    };
    for k in 0..seeds as u64 {
        let seed = base.seed + k;
        let attempt = || -> Result<RunResult, CliError> {
            let mut cfg = base.clone();
            cfg.apply_pairs(arm.settings.iter().map(|(k, v)| (*k, v.clone())))?;
            cfg.seed = seed;
            cfg.out = Some(dir.join(slug(&arm.name)).join(format!("seed{seed}")));
            let data = load_training_data(&cfg)?;
            let outcome = run_training(&cfg, &data, &mut |_| {})?;
            let best = outcome
                .log
                .best()
                .ok_or_else(|| anyhow!("training produced no epochs"))?;
            Ok(RunResult {
                seed,
                best_epoch: best.epoch,
                val_cer: best.val_cer,
                val_loss: best.val_loss,
                epochs: outcome.log.records.len(),
            })
        };
        match attempt() {
            Ok(r) => {
                eprintln!(
                    "[{}] seed {seed}: val_cer={:.4} val_loss={:.4} best_epoch={}",
                    arm.name, r.val_cer, r.val_loss, r.best_epoch
                );
                summary.runs.push(r);
            }
            Err(e) => {
                eprintln!("[{}] seed {seed}: error: {e}", arm.name);
                summary.failures.push((seed, e.to_string()));
            }
        }
    }
    summary
}

pub fn run(a: &AblateArgs) -> Result<(), CliError> {
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    if a.sizes.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(CliError::Usage("--sizes must lie in (0, 1]".into()));
    }
    let base = resolve_config(a.config.as_deref(), &a.overrides, a.data.as_deref(), a.out.as_deref())?;
    // Fail fast on a bad base config rather than once per arm.
    base.train_config()?;
    let root = base.data.clone().ok_or(crate::ConfigError::Missing("data"))?;
    let out = base.out.clone().ok_or(crate::ConfigError::Missing("out"))?;
    let full = load_dataset(&root, Split::Train)
        .with_context(|| format!("ablate: loading training split of {}", root.display()))?
        .len();
    let base_lines = base.train_subset.map_or(full, |n| n.min(full));
    let name = axis_name(a.axis);
    let dir = out.join(name);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(out.join(RESOLVED_CONFIG), base.to_text()).context("writing resolved.cfg")?;

    let summaries: Vec<ArmSummary> = arms(a.axis, &a.sizes, base_lines, base.effective_dropout())
        .iter()
        .map(|arm| run_arm(&base, arm, a.seeds, &dir))
        .collect();
    let table = summary_tsv(&summaries);
    let path = out.join(format!("ablate_{name}.tsv"));
    fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
    let runs = out.join(format!("ablate_{name}_runs.tsv"));
    fs::write(&runs, runs_tsv(&summaries)).with_context(|| format!("writing {}", runs.display()))?;
    print!("{table}");

    let failed: usize = summaries.iter().map(|s| s.failures.len()).sum();
    if failed > 0 {
        return Err(anyhow!("{failed} ablation run(s) failed; see {}", runs.display()).into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn datasize_and_dropout_grids() {
        let a = arms(Axis::Datasize, &[1.0, 0.5, 0.25], 800, 0.5);
        assert_eq!(a.len(), 6);
        assert_eq!(a[4].settings[0], ("train_subset", "200".to_string()));
        let d = arms(Axis::Dropout, &[], 0, 0.0);
        assert_eq!(d.len(), 4);
        assert_eq!(d[3].settings[0], ("dropout", "0.5".to_string()));
        for axis in [Axis::Position, Axis::Nway, Axis::Gradmult, Axis::Dist] {
            assert_eq!(arms(axis, &[], 0, 0.5)[0].name, "no-mixup");
        }
    }

    #[test]
    fn every_arm_is_a_valid_config() {
        for axis in [
            Axis::Position,
            Axis::Nway,
            Axis::Gradmult,
            Axis::Dist,
            Axis::Datasize,
            Axis::Dropout,
        ] {
            for arm in arms(axis, &[1.0, 0.5], 100, 0.5) {
                let mut c = RunConfig::default();
                c.apply_pairs(arm.settings.clone()).unwrap();
                c.train_config().unwrap();
                c.network_config("0123456789").unwrap();
            }
        }
    }

    #[test]
    fn summary_statistics() {
        let s = ArmSummary {
            arm: "x".into(),
            runs: [0.3, 0.1, 0.2, 0.6]
                .iter()
                .enumerate()
                .map(|(i, &c)| RunResult {
                    seed: i as u64,
                    best_epoch: 10,
                    val_cer: c,
                    val_loss: 2.0,
                    epochs: 12,
                })
                .collect(),
            failures: vec![],
        };
        let row = s.row();
        let cols: Vec<&str> = row.split('\t').collect();
        assert_eq!(cols.len(), SUMMARY_HEADER.split('\t').count());
        assert_eq!(cols[1], "4");
        assert!((cols[3].parse::<f64>().unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(cols[4], "0.1");
        assert_eq!(cols[5], "0.6");
        assert!((cols[6].parse::<f64>().unwrap() - 0.25).abs() < 1e-12);
    }
}
