//! Property suites bundled into `ctcmix selftest`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use ctcmix_core::ctc::{ctc_brute_force, ctc_brute_force_grad, ctc_loss_grad, CtcError};
use ctcmix_core::data::{assemble_batch, generate_dataset, prepare_lines, GenConfig};
use ctcmix_core::gradcheck::{ks_distance, max_relative_error};
use ctcmix_core::mixup::{arcsine_cdf, random_derangement, sample_lambda, LambdaDistribution};
use ctcmix_core::trainer::{
    gradient_check, linearity_audit, stream_rng, GradCheckOptions, Stream,
};
use ctcmix_core::{LabelSequence, MixPlan, Network, NetworkConfig, ProbSequence};

use crate::args::SelftestArgs;
use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    /// Error text when the suite could not run to completion.
    pub error: Option<String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_error <= self.tolerance
    }

    fn line(&self) -> String {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        let mut s = format!(
            "{:<16}\t{}\t{:.3e}\t{:.0e}\t{status}",
            self.name, self.cases, self.max_error, self.tolerance
        );
        if let Some(e) = &self.error {
            s.push_str(&format!("\t{e}"));
        }
        s
    }
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    stream_rng(seed.wrapping_mul(1_000_003).wrapping_add(salt), Stream::Init)
}

/// A random CTC problem small enough to enumerate: up to 8 frames, 4
/// symbols plus blank, labels of length up to 4 that fit the frames.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R) -> (ProbSequence, LabelSequence) {
    let symbols = rng.gen_range(1..=4);
    let frames = rng.gen_range(1..=8);
    let classes = symbols + 1;
    let labels = loop {
        let len = rng.gen_range(0..=4usize.min(frames));
        let l = LabelSequence((0..len).map(|_| rng.gen_range(0..symbols)).collect());
        if l.fits(frames) {
            break l;
        }
    };
    let logits: Vec<f64> = (0..frames * classes)
        .map(|_| rng.gen_range(-2.0..2.0))
        .collect();
    let y = ProbSequence::from_logits(frames, classes, &logits).expect("valid dimensions");
    (y, labels)
}

/// Dynamic-programming loss against path enumeration.
pub fn ctc_oracle_suite(seed: u64, cases: usize) -> SuiteResult {
    let mut r = rng(seed, 1);
    let mut worst: f64 = 0.0;
    let mut error = None;
    for _ in 0..cases {
        let (y, l) = random_instance(&mut r);
        match (ctc_loss_grad(&y, &l), ctc_brute_force(&y, &l)) {
            (Ok(dp), Ok(bf)) => worst = worst.max((dp.loss - bf).abs()),
            (Err(e), _) | (_, Err(e)) => {
                error = Some(e.to_string());
                break;
            }
        }
    }
    SuiteResult {
        name: "ctc_oracle",
        cases,
        max_error: worst,
        tolerance: 1e-9,
        error,
    }
}

pub type ProbGradient<'a> = &'a dyn Fn(&ProbSequence, &LabelSequence) -> Result<Vec<f64>, CtcError>;

/// Analytic gradient with respect to the probabilities against central
/// differences of the enumerated loss.
pub fn ctc_gradient_suite(seed: u64, cases: usize, gradient: ProbGradient<'_>) -> SuiteResult {
    let mut r = rng(seed, 2);
    let mut worst: f64 = 0.0;
    let mut error = None;
    for _ in 0..cases {
        let (y, l) = random_instance(&mut r);
        let res = gradient(&y, &l).and_then(|g| Ok((g, ctc_brute_force_grad(&y, &l, 1e-6)?)));
        match res {
            Ok((g, fd)) => worst = worst.max(max_relative_error(&g, &fd, 1e-6)),
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        }
    }
    SuiteResult {
        name: "ctc_gradient",
        cases,
        max_error: worst,
        tolerance: 1e-5,
        error,
    }
}

pub fn analytic_prob_gradient(y: &ProbSequence, l: &LabelSequence) -> Result<Vec<f64>, CtcError> {
    ctc_loss_grad(y, l).map(|o| o.grad_probs)
}

/// Kolmogorov–Smirnov distance of Beta(0.5, 0.5) draws to the arcsine law.
pub fn beta_suite(seed: u64, draws: usize) -> SuiteResult {
    let mut r = rng(seed, 3);
    let dist = LambdaDistribution::Beta { alpha: 0.5 };
    let mut xs: Vec<f64> = (0..draws).map(|_| sample_lambda(&mut r, &dist)).collect();
    SuiteResult {
        name: "beta_ks",
        cases: draws,
        max_error: ks_distance(&mut xs, arcsine_cdf),
        tolerance: 0.01,
        error: None,
    }
}

/// Uniform[0.1, 0.9] draws: stay in bounds, mean within 0.01 of 0.5.
pub fn uniform_suite(seed: u64, draws: usize) -> SuiteResult {
    let mut r = rng(seed, 4);
    let dist = LambdaDistribution::Uniform { lo: 0.1, hi: 0.9 };
    let xs: Vec<f64> = (0..draws).map(|_| sample_lambda(&mut r, &dist)).collect();
    let out_of_bounds = xs.iter().any(|&x| !(0.1..=0.9).contains(&x));
    let mean = xs.iter().sum::<f64>() / draws as f64;
    SuiteResult {
        name: "uniform_lambda",
        cases: draws,
        max_error: (mean - 0.5).abs(),
        tolerance: 0.01,
        error: out_of_bounds.then(|| "draw outside [0.1, 0.9]".to_string()),
    }
}

fn probe_model(seed: u64, lines: usize) -> Result<(Network, ctcmix_core::Batch), String> {
    let g = GenConfig {
        lines: lines * 2,
        val_fraction: 0.5,
        max_len: 3,
        seed,
        ..GenConfig::default()
    };
    let (tr, _) = generate_dataset(&g).map_err(|e| e.to_string())?;
    let cfg = NetworkConfig::tiny(&g.alphabet);
    let vocab = cfg.vocab().map_err(|e| e.to_string())?;
    let prepared = prepare_lines(&tr, cfg.input_height, &vocab).map_err(|e| e.to_string())?;
    let idx: Vec<usize> = (0..lines).collect();
    let batch = assemble_batch(&prepared, &idx, 0);
    let net = Network::init(cfg, &mut stream_rng(seed, Stream::Init)).map_err(|e| e.to_string())?;
    Ok((net, batch))
}

fn shared_plan(batch: usize, depth: usize, pairing: Vec<usize>, lambda: f64) -> MixPlan {
    MixPlan {
        depth: Some(depth),
        partners: vec![pairing],
        weights: vec![vec![lambda, 1.0 - lambda]; batch],
        skipped: vec![false; batch],
    }
}

/// Mixed objective against the λ-weighted single-label evaluations.
pub fn linearity_suite(seed: u64, draws: usize) -> SuiteResult {
    let mut res = SuiteResult {
        name: "mixup_linearity",
        cases: draws,
        max_error: 0.0,
        tolerance: 1e-10,
        error: None,
    };
    let (net, batch) = match probe_model(seed, 4) {
        Ok(p) => p,
        Err(e) => {
            res.error = Some(e);
            return res;
        }
    };
    let mut r = rng(seed, 5);
    for d in 0..draws {
        let plan = shared_plan(
            batch.len(),
            [0, 4, 8][d % 3],
            random_derangement(batch.len(), &mut r),
            r.gen(),
        );
        match linearity_audit(&net, &batch, &plan) {
            Ok(a) => res.max_error = res.max_error.max(a.loss_error).max(a.grad_error),
            Err(e) => {
                res.error = Some(e.to_string());
                break;
            }
        }
    }
    res
}

/// Backprop against finite differences on the tiny model, without and
/// with a mixing plan. `stride` thins the checked entries.
pub fn model_gradient_suite(seed: u64, stride: usize) -> SuiteResult {
    let mut res = SuiteResult {
        name: "model_gradient",
        cases: 0,
        max_error: 0.0,
        tolerance: 1e-4,
        error: None,
    };
    let (net, batch) = match probe_model(seed, 2) {
        Ok(p) => p,
        Err(e) => {
            res.error = Some(e);
            return res;
        }
    };
    let opts = GradCheckOptions {
        stride,
        ..GradCheckOptions::default()
    };
    for plan in [MixPlan::identity(2), shared_plan(2, 4, vec![1, 0], 0.3)] {
        match gradient_check(&net, &batch, &plan, true, &opts) {
            Ok(r) => {
                res.cases += r.parameters;
                res.max_error = res.max_error.max(r.max_relative_error);
            }
            Err(e) => {
                res.error = Some(e.to_string());
                break;
            }
        }
    }
    res
}

pub fn all_suites(seed: u64, full: bool) -> Vec<SuiteResult> {
    vec![
        ctc_oracle_suite(seed, 1000),
        ctc_gradient_suite(seed, 100, &analytic_prob_gradient),
        beta_suite(seed, 100_000),
        uniform_suite(seed, 100_000),
        linearity_suite(seed, 6),
        model_gradient_suite(seed, if full { 1 } else { 53 }),
    ]
}

pub fn run(a: &SelftestArgs) -> Result<(), CliError> {
    println!("suite\tcases\tmax_error\ttolerance\tstatus");
    let results = all_suites(a.seed, a.full);
    for r in &results {
        println!("{}", r.line());
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("failing suites: {}", failed.join(", "))))
    }
}
