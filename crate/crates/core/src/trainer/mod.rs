//! RMSProp training with per-batch mixing plans, validation by character
//! error rate, early stopping and checkpointing.

mod audit;
mod eval;
mod objective;
mod optim;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ctc::CtcError;
use crate::data::{assemble_batch, partition_by_width, Batch, DataError, PreparedLine};
use crate::mixup::{make_plan, MixPlan, MixupConfig, MixupError};
use crate::model::{save_checkpoint, ModelError, Network, NetworkConfig};

pub use audit::{
    gradient_check, linearity_audit, GradCheckOptions, GradCheckReport, LinearityReport,
};
pub use eval::{evaluate, evaluate_prepared};
pub use objective::{
    batch_gradients, batch_loss, ctc_objective, gradients_for_targets, plan_targets,
    ObjectiveStats, Targets,
};
pub use optim::{clip_global_norm, global_norm, rmsprop_state, rmsprop_step, RmsProp};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("mixup: {0}")]
    Mixup(#[from] MixupError),
    #[error("ctc: {0}")]
    Ctc(#[from] CtcError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("checkpoint does not match the data: {0}")]
    ConfigMismatch(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Io(String),
}

/// Independent random streams derived from one seed, so that changing how
/// one stream is consumed (e.g. drawing mixing plans) leaves the others
/// untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Shuffle = 1,
    Plan = 2,
    Dropout = 3,
    Subset = 4,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: RmsProp,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub mixup: MixupConfig,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    /// Stop as soon as validation CER falls below this value.
    pub target_cer: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: RmsProp::default(),
            batch_size: 8,
            patience: 20,
            max_epochs: 300,
            seed: 0,
            mixup: MixupConfig::disabled(),
            clip_norm: 10.0,
            target_cer: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, net: &NetworkConfig) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        let o = &self.optimizer;
        if !(o.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", o.lr));
        }
        if !(o.rho > 0.0 && o.rho < 1.0) {
            return bad(format!("rmsprop decay must lie in (0, 1), got {}", o.rho));
        }
        if !(o.eps > 0.0) {
            return bad(format!("rmsprop epsilon must be positive, got {}", o.eps));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return bad("patience, batch size and max epochs must be at least 1".into());
        }
        if !(self.clip_norm >= 0.0) {
            return bad(format!("clip norm must be non-negative, got {}", self.clip_norm));
        }
        self.mixup.validate()?;
        if self.mixup.enabled {
            net.check_depths(&self.mixup.positions)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_cer: f64,
    /// Mean own-weight λ over the samples that went through a mixing plan
    /// (1 when nothing was mixed).
    pub lambda_mean: f64,
    /// Samples whose mix was altered or dropped because a label could not
    /// be aligned.
    pub skipped_pairs: usize,
    pub seconds: f64,
}

/// Append-only per-epoch history.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

pub const TRAINLOG_HEADER: &str =
    "epoch\ttrain_loss\tval_loss\tval_cer\tlambda_mean\tskipped_pairs\tseconds";

impl TrainLog {
    pub fn push(&mut self, record: EpochRecord) {
        assert!(
            self.records.last().map_or(true, |r| r.epoch < record.epoch),
            "epochs must increase"
        );
        self.records.push(record);
    }

    /// TSV with the header row. Floats use the shortest representation
    /// that round-trips exactly.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{TRAINLOG_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{:.3}",
                r.epoch,
                r.train_loss,
                r.val_loss,
                r.val_cer,
                r.lambda_mean,
                r.skipped_pairs,
                r.seconds
            );
        }
        out
    }

    /// The log without wall-clock times, for reproducibility comparisons.
    pub fn without_time(&self) -> Vec<EpochRecord> {
        self.records
            .iter()
            .map(|r| EpochRecord {
                seconds: 0.0,
                ..r.clone()
            })
            .collect()
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        let mut stop = EarlyStopping::new(usize::MAX);
        let mut best = None;
        for r in &self.records {
            if stop.update(r.epoch, r.val_cer, r.val_loss) {
                best = Some(r);
            }
        }
        best
    }
}

/// Tracks the best validation result: lower CER wins, ties go to the lower
/// loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_epoch: usize,
    pub best_cer: f64,
    pub best_loss: f64,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_epoch: 0,
            best_cer: f64::INFINITY,
            best_loss: f64::INFINITY,
        }
    }

    /// Records an epoch; returns whether it is the new best.
    pub fn update(&mut self, epoch: usize, cer: f64, loss: f64) -> bool {
        let loss = if loss.is_nan() { f64::INFINITY } else { loss };
        let better = cer < self.best_cer || (cer == self.best_cer && loss < self.best_loss);
        if better || self.best_epoch == 0 {
            self.best_epoch = epoch;
            self.best_cer = cer;
            self.best_loss = loss;
        }
        better || self.best_epoch == epoch
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        epoch.saturating_sub(self.best_epoch) >= self.patience
    }
}

/// First `n` lines after a seeded shuffle (all of them when `n` is larger).
pub fn select_subset<T: Clone>(lines: &[T], n: usize, seed: u64) -> Vec<T> {
    let mut order: Vec<usize> = (0..lines.len()).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Subset));
    order.truncate(n);
    order.into_iter().map(|i| lines[i].clone()).collect()
}

/// Assembles width-bucketed batches in partition order.
pub fn make_batches(lines: &[PreparedLine], batch_size: usize) -> Result<Vec<Batch>, TrainError> {
    let widths: Vec<usize> = lines.iter().map(|l| l.width).collect();
    Ok(partition_by_width(&widths, batch_size)?
        .iter()
        .enumerate()
        .map(|(b, idx)| assemble_batch(lines, idx, b))
        .collect())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Network,
    pub best_epoch: usize,
    pub log: TrainLog,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAINLOG: &str = "trainlog.tsv";

fn io_err(path: &Path, e: std::io::Error) -> TrainError {
    TrainError::Io(format!("{}: {e}", path.display()))
}

/// Trains a freshly initialised network (weights from the seed's init
/// stream).
pub fn train(
    train_set: &[PreparedLine],
    valid_set: &[PreparedLine],
    net_config: NetworkConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    let net = Network::init(net_config, &mut stream_rng(config.seed, Stream::Init))?;
    train_network(net, train_set, valid_set, config, out_dir, on_epoch)
}

/// One optimisation step on `batch`; returns the objective statistics, or
/// `None` when no sample in the batch could be aligned.
pub fn train_step(
    net: &mut Network,
    batch: &Batch,
    plan: &MixPlan,
    config: &TrainConfig,
    state: &mut [Vec<f64>],
    dropout: &mut ChaCha8Rng,
) -> Result<Option<ObjectiveStats>, TrainError> {
    let (stats, grads) = batch_gradients(
        net,
        batch,
        plan,
        config.mixup.multiply_gradients,
        Some(dropout),
    )?;
    let Some(mut grads) = grads else {
        return Ok(None);
    };
    clip_global_norm(&mut grads, config.clip_norm);
    rmsprop_step(
        net.params.tensors_mut(),
        &grads,
        state,
        &config.optimizer,
    );
    Ok(Some(stats))
}

/// Draws (or skips) the mixing plan for a batch and resolves label
/// alignability against the batch's frame count.
pub fn plan_for_batch(
    net: &Network,
    batch: &Batch,
    mixup: &MixupConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MixPlan, TrainError> {
    let frames = net.config.output_length(batch.padded_width())?;
    let mut plan = if mixup.enabled && batch.len() >= 2 {
        make_plan(batch.len(), rng, mixup)?
    } else {
        MixPlan::identity(batch.len())
    };
    plan.resolve_feasibility(&batch.labels, frames);
    Ok(plan)
}

/// Trains `net` in place of a fresh initialisation.
pub fn train_network(
    mut net: Network,
    train_set: &[PreparedLine],
    valid_set: &[PreparedLine],
    config: &TrainConfig,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    config.validate(&net.config)?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(DataError::EmptyDataset.into());
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let batches = make_batches(train_set, config.batch_size)?;
    let valid_batches = make_batches(valid_set, config.batch_size)?;
    let mut shuffle_rng = stream_rng(config.seed, Stream::Shuffle);
    let mut plan_rng = stream_rng(config.seed, Stream::Plan);
    let mut dropout_rng = stream_rng(config.seed, Stream::Dropout);
    let mut state = rmsprop_state(net.params.tensors());
    let mut stopper = EarlyStopping::new(config.patience);
    let mut log = TrainLog::default();
    let mut best = net.clone();

    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..batches.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut counted) = (0.0, 0usize);
        let (mut lambda_sum, mut lambda_n, mut skipped) = (0.0, 0usize, 0usize);
        for &bi in &order {
            let batch = &batches[bi];
            let plan = plan_for_batch(&net, batch, &config.mixup, &mut plan_rng)?;
            if plan.is_mixing() {
                lambda_sum += plan.lambdas().iter().sum::<f64>();
                lambda_n += batch.len();
            }
            let Some(stats) =
                train_step(&mut net, batch, &plan, config, &mut state, &mut dropout_rng)?
            else {
                skipped += batch.len();
                continue;
            };
            if !stats.loss.is_finite() || !net.params.all_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch.bucket,
                });
            }
            skipped += stats.skipped;
            loss_sum += stats.loss * stats.active as f64;
            counted += stats.active;
        }

        let report = eval::evaluate_batches(&net, valid_set, &valid_batches)?;
        let record = EpochRecord {
            epoch,
            train_loss: if counted > 0 {
                loss_sum / counted as f64
            } else {
                f64::NAN
            },
            val_loss: report.mean_loss.unwrap_or(f64::NAN),
            val_cer: report.cer,
            lambda_mean: if lambda_n > 0 {
                lambda_sum / lambda_n as f64
            } else {
                1.0
            },
            skipped_pairs: skipped,
            seconds: start.elapsed().as_secs_f64(),
        };
        let improved = stopper.update(epoch, record.val_cer, record.val_loss);
        if improved {
            best = net.clone();
        }
        on_epoch(&record);
        log.push(record);

        if let Some(dir) = out_dir {
            if improved {
                let p = dir.join(BEST_CHECKPOINT);
                save_checkpoint(&p, &best).map_err(|e| io_err(&p, e))?;
            }
            let p = dir.join(LAST_CHECKPOINT);
            save_checkpoint(&p, &net).map_err(|e| io_err(&p, e))?;
            let p = dir.join(TRAINLOG);
            fs::write(&p, log.to_tsv()).map_err(|e| io_err(&p, e))?;
        }
        let reached = config
            .target_cer
            .is_some_and(|t| stopper.best_cer < t);
        if reached || stopper.should_stop(epoch) {
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch: stopper.best_epoch,
        log,
    })
}
