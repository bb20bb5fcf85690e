//! Run settings merged from defaults, a `key=value` file, `CTCMIX_*`
//! environment variables and command-line flags, in that order.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ctcmix_core::mixup::{LambdaDistribution, MixupConfig};
use ctcmix_core::model::NetworkConfig;
use ctcmix_core::trainer::{RmsProp, TrainConfig};

pub const ENV_PREFIX: &str = "CTCMIX_";
pub const RESOLVED_CONFIG: &str = "resolved.cfg";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigError {
    UnknownKey { key: String, origin: String },
    BadValue { key: String, value: String, reason: String },
    Syntax { origin: String, line: usize, text: String },
    Missing(&'static str),
    Io(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::UnknownKey { key, origin } => write!(f, "unknown config key {key:?} ({origin})"),
            Self::BadValue { key, value, reason } => {
                write!(f, "bad value {value:?} for {key}: {reason}")
            }
            Self::Syntax { origin, line, text } => {
                write!(f, "{origin}:{line}: expected key=value, got {text:?}")
            }
            Self::Missing(key) => write!(f, "missing required setting {key}"),
            Self::Io(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Every setting of a training run. `patience` and `dropout` fall back to
/// the preset's defaults when unset.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub preset: String,
    pub mixup: bool,
    pub mixup_alpha: f64,
    pub mixup_positions: Vec<usize>,
    pub mixup_dist: String,
    pub n_way: usize,
    pub grad_multiply: bool,
    pub allow_no_fusion: bool,
    pub no_fusion_prob: f64,
    pub dropout: Option<f64>,
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub batch: usize,
    pub patience: Option<usize>,
    pub max_epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub train_subset: Option<usize>,
    pub target_cer: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mix = MixupConfig::default();
        let opt = RmsProp::default();
        let train = TrainConfig::default();
        Self {
            data: None,
            out: None,
            preset: "tiny".into(),
            mixup: false,
            mixup_alpha: 0.5,
            mixup_positions: mix.positions,
            mixup_dist: "beta".into(),
            n_way: mix.n_way,
            grad_multiply: mix.multiply_gradients,
            allow_no_fusion: mix.allow_no_fusion,
            no_fusion_prob: mix.no_fusion_probability,
            dropout: None,
            lr: opt.lr,
            rho: opt.rho,
            eps: opt.eps,
            batch: train.batch_size,
            patience: None,
            max_epochs: train.max_epochs,
            seed: 0,
            clip_norm: train.clip_norm,
            train_subset: None,
            target_cer: None,
        }
    }
}

/// Config keys in the order they are written.
pub const KEYS: &[&str] = &[
    "data",
    "out",
    "preset",
    "mixup",
    "mixup_alpha",
    "mixup_positions",
    "mixup_dist",
    "n_way",
    "grad_multiply",
    "allow_no_fusion",
    "no_fusion_prob",
    "dropout",
    "lr",
    "rho",
    "eps",
    "batch",
    "patience",
    "max_epochs",
    "seed",
    "clip_norm",
    "train_subset",
    "target_cer",
];

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err("expected on or off".into()),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse().map_err(|e: T::Err| e.to_string())
}

/// `none`/`all` or a number.
fn parse_opt<T: std::str::FromStr>(v: &str) -> Result<Option<T>, String>
where
    T::Err: fmt::Display,
{
    match v {
        "none" | "all" | "" => Ok(None),
        _ => parse_num(v).map(Some),
    }
}

fn show_opt<T: fmt::Display>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), T::to_string)
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        let r: Result<(), String> = (|| {
            match key {
                "data" => self.data = Some(PathBuf::from(value)),
                "out" => self.out = Some(PathBuf::from(value)),
                "preset" => {
                    if !matches!(value, "paper" | "tiny") {
                        return Err("expected paper or tiny".into());
                    }
                    self.preset = value.into();
                }
                "mixup" => self.mixup = parse_bool(value)?,
                "mixup_alpha" => self.mixup_alpha = parse_num(value)?,
                "mixup_positions" => {
                    self.mixup_positions = value
                        .split(',')
                        .map(|p| parse_num(p.trim()))
                        .collect::<Result<_, _>>()?;
                }
                "mixup_dist" => {
                    value
                        .parse::<LambdaDistribution>()
                        .map_err(|e| e.to_string())?;
                    self.mixup_dist = value.into();
                }
                "n_way" => self.n_way = parse_num(value)?,
                "grad_multiply" => self.grad_multiply = parse_bool(value)?,
                "allow_no_fusion" => self.allow_no_fusion = parse_bool(value)?,
                "no_fusion_prob" => self.no_fusion_prob = parse_num(value)?,
                "dropout" => self.dropout = parse_opt(value)?,
                "lr" => self.lr = parse_num(value)?,
                "rho" => self.rho = parse_num(value)?,
                "eps" => self.eps = parse_num(value)?,
                "batch" => self.batch = parse_num(value)?,
                "patience" => self.patience = parse_opt(value)?,
                "max_epochs" => self.max_epochs = parse_num(value)?,
                "seed" => self.seed = parse_num(value)?,
                "clip_norm" => self.clip_norm = parse_num(value)?,
                "train_subset" => self.train_subset = parse_opt(value)?,
                "target_cer" => self.target_cer = parse_opt(value)?,
                _ => return Err(String::new()),
            }
            Ok(())
        })();
        r.map_err(|reason| {
            if KEYS.contains(&key) {
                ConfigError::BadValue {
                    key: key.into(),
                    value: value.into(),
                    reason,
                }
            } else {
                ConfigError::UnknownKey {
                    key: key.into(),
                    origin: "set".into(),
                }
            }
        })
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                origin: origin.into(),
                line: n + 1,
                text: raw.into(),
            })?;
            self.set_from(k.trim(), v, origin)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies `CTCMIX_<KEY>` variables, e.g. `CTCMIX_LR=1e-3`.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(
        &mut self,
        vars: I,
    ) -> Result<(), ConfigError> {
        let mut vars: Vec<(String, String)> = vars
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        vars.sort();
        for (k, v) in vars {
            let key = k[ENV_PREFIX.len()..].to_ascii_lowercase();
            self.set_from(&key, &v, &format!("environment {k}"))?;
        }
        Ok(())
    }

    pub fn apply_pairs<'a, I: IntoIterator<Item = (&'a str, String)>>(
        &mut self,
        pairs: I,
    ) -> Result<(), ConfigError> {
        for (k, v) in pairs {
            self.set_from(k, &v, "command line")?;
        }
        Ok(())
    }

    fn set_from(&mut self, key: &str, value: &str, origin: &str) -> Result<(), ConfigError> {
        self.set(key, value).map_err(|e| match e {
            ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey {
                key,
                origin: origin.into(),
            },
            other => other,
        })
    }

    pub fn effective_patience(&self) -> usize {
        self.patience
            .unwrap_or(if self.preset == "paper" { 200 } else { 20 })
    }

    pub fn effective_dropout(&self) -> f64 {
        self.dropout.unwrap_or(0.5)
    }

    /// Fully resolved settings, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# ctcmix run configuration\n");
        for key in KEYS {
            let value = match *key {
                "data" => show_opt(&self.data.as_ref().map(|p| p.display()), ""),
                "out" => show_opt(&self.out.as_ref().map(|p| p.display()), ""),
                "preset" => self.preset.clone(),
                "mixup" => on_off(self.mixup).into(),
                "mixup_alpha" => self.mixup_alpha.to_string(),
                "mixup_positions" => self
                    .mixup_positions
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
                "mixup_dist" => self.mixup_dist.clone(),
                "n_way" => self.n_way.to_string(),
                "grad_multiply" => on_off(self.grad_multiply).into(),
                "allow_no_fusion" => on_off(self.allow_no_fusion).into(),
                "no_fusion_prob" => self.no_fusion_prob.to_string(),
                "dropout" => self.effective_dropout().to_string(),
                "lr" => self.lr.to_string(),
                "rho" => self.rho.to_string(),
                "eps" => self.eps.to_string(),
                "batch" => self.batch.to_string(),
                "patience" => self.effective_patience().to_string(),
                "max_epochs" => self.max_epochs.to_string(),
                "seed" => self.seed.to_string(),
                "clip_norm" => self.clip_norm.to_string(),
                "train_subset" => show_opt(&self.train_subset, "all"),
                "target_cer" => show_opt(&self.target_cer, "none"),
                _ => unreachable!("every key is listed"),
            };
            out.push_str(&format!("{key}={value}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text, "config")?;
        Ok(c)
    }

    /// The λ distribution; a bare `beta` takes its shape from `mixup_alpha`.
    pub fn distribution(&self) -> Result<LambdaDistribution, ConfigError> {
        if self.mixup_dist == "beta" {
            return Ok(LambdaDistribution::Beta {
                alpha: self.mixup_alpha,
            });
        }
        self.mixup_dist
            .parse()
            .map_err(|e: ctcmix_core::mixup::MixupError| ConfigError::BadValue {
                key: "mixup_dist".into(),
                value: self.mixup_dist.clone(),
                reason: e.to_string(),
            })
    }

    pub fn mixup_config(&self) -> Result<MixupConfig, ConfigError> {
        let cfg = MixupConfig {
            enabled: self.mixup,
            distribution: self.distribution()?,
            positions: self.mixup_positions.clone(),
            n_way: self.n_way,
            multiply_gradients: self.grad_multiply,
            allow_no_fusion: self.allow_no_fusion,
            no_fusion_probability: self.no_fusion_prob,
        };
        cfg.validate().map_err(|e| ConfigError::BadValue {
            key: "mixup".into(),
            value: on_off(self.mixup).into(),
            reason: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn network_config(&self, vocabulary: &str) -> Result<NetworkConfig, ConfigError> {
        let mut net = NetworkConfig::preset(&self.preset, vocabulary).map_err(|e| {
            ConfigError::BadValue {
                key: "preset".into(),
                value: self.preset.clone(),
                reason: e.to_string(),
            }
        })?;
        net.dropout = self.effective_dropout();
        net.validate().map_err(|e| ConfigError::BadValue {
            key: "dropout".into(),
            value: net.dropout.to_string(),
            reason: e.to_string(),
        })?;
        Ok(net)
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        Ok(TrainConfig {
            optimizer: RmsProp {
                lr: self.lr,
                rho: self.rho,
                eps: self.eps,
            },
            batch_size: self.batch,
            patience: self.effective_patience(),
            max_epochs: self.max_epochs,
            seed: self.seed,
            mixup: self.mixup_config()?,
            clip_norm: self.clip_norm,
            target_cer: self.target_cer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_stable() {
        let mut c = RunConfig::default();
        c.apply_text(
            "# comment\nlr = 1e-3\nmixup=on # inline\nmixup_positions=0,8\ntrain_subset=200\n",
            "t",
        )
        .unwrap();
        assert_eq!(c.lr, 1e-3);
        assert!(c.mixup);
        assert_eq!(c.mixup_positions, vec![0, 8]);
        let text = c.to_text();
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.patience, Some(20));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut c = RunConfig::default();
        assert!(matches!(
            c.apply_text("learning_rate=1", "f"),
            Err(ConfigError::UnknownKey { .. })
        ));
        assert!(matches!(c.set("mixup", "maybe"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(c.apply_text("lr", "f"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(c.set("mixup_dist", "gauss").is_err());
    }

    #[test]
    fn layers_override_in_order() {
        let mut c = RunConfig::default();
        c.apply_text("lr=0.1\nseed=3\nbatch=4", "file").unwrap();
        c.apply_env(vec![
            ("CTCMIX_LR".to_string(), "0.2".to_string()),
            ("PATH".to_string(), "/bin".to_string()),
        ])
        .unwrap();
        c.apply_pairs(vec![("seed", "9".to_string())]).unwrap();
        assert_eq!((c.lr, c.seed, c.batch), (0.2, 9, 4));
        let err = c
            .apply_env(vec![("CTCMIX_BOGUS".to_string(), "1".to_string())])
            .unwrap_err();
        assert!(err.to_string().contains("CTCMIX_BOGUS"));
    }

    #[test]
    fn preset_dependent_defaults() {
        let mut c = RunConfig::default();
        assert_eq!(c.effective_patience(), 20);
        c.set("preset", "paper").unwrap();
        assert_eq!(c.effective_patience(), 200);
        assert_eq!(c.train_config().unwrap().patience, 200);
    }

    #[test]
    fn distribution_resolution() {
        let mut c = RunConfig::default();
        c.set("mixup_alpha", "2").unwrap();
        assert_eq!(c.distribution().unwrap(), LambdaDistribution::Beta { alpha: 2.0 });
        c.set("mixup_dist", "uniform:0.1:0.9").unwrap();
        assert_eq!(
            c.distribution().unwrap(),
            LambdaDistribution::Uniform { lo: 0.1, hi: 0.9 }
        );
        c.set("n_way", "5").unwrap();
        c.set("mixup", "on").unwrap();
        assert!(c.mixup_config().is_err());
    }
}
