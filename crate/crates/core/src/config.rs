//! Flat `key = value` experiment files.
//!
//! ```text
//! # budget=10 uniform baseline
//! data_dir = data/mnist
//! arm = manual
//! bits = 22222
//! epochs = 5
//! seed = 1
//! ```
//!
//! Keys: `data_dir`, `output_dir`, `arm` (`manual` | `learned`), `bits`
//! (manual arm), `budget` (learned arm; optional cross-check for manual),
//! `layers`, `epochs`, `batch_size`, `seed`, `lr`, `logit_lr`, `tau0`,
//! `tau_min`, `decay_rate`, `crossing_fraction`, `hard_threshold`,
//! `hard_trials`, `train_limit`, `val_limit`. Lines starting with `#` and
//! blank lines are ignored; unknown or repeated keys are errors.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::alloc::{TemperatureSchedule, DEFAULT_HARD_TRIALS};
use crate::error::{Error, Result};

pub const MNIST_LAYERS: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Arm {
    /// Fixed per-layer bits; their sum is the budget.
    Manual(Vec<u32>),
    Learned {
        budget: u32,
    },
}

impl Arm {
    pub fn budget(&self) -> u32 {
        match self {
            Arm::Manual(bits) => bits.iter().sum(),
            Arm::Learned { budget } => *budget,
        }
    }

    /// `budget=10_22222` or `budget=10_learn`.
    pub fn label(&self) -> String {
        match self {
            Arm::Manual(bits) => format!("budget={}_{}", self.budget(), allocation_string(bits)),
            Arm::Learned { budget } => format!("budget={budget}_learn"),
        }
    }
}

/// Digits when every layer fits one digit, comma form otherwise.
pub fn allocation_string(bits: &[u32]) -> String {
    if bits.iter().all(|&b| b < 10) {
        bits.iter().map(|b| b.to_string()).collect()
    } else {
        bits.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(",")
    }
}

/// `"22222"` or `"10,2,2"` into per-layer bits.
pub fn parse_allocation(s: &str) -> Result<Vec<u32>> {
    let s = s.trim();
    if s.is_empty() {
        return Err(Error::Validation("empty allocation".into()));
    }
    let bits: Vec<u32> = if s.contains(',') {
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse::<u32>()
                    .map_err(|_| Error::Validation(format!("bad layer width {p:?} in {s:?}")))
            })
            .collect::<Result<_>>()?
    } else {
        s.chars()
            .map(|c| {
                c.to_digit(10)
                    .ok_or_else(|| Error::Validation(format!("bad digit {c:?} in {s:?}")))
            })
            .collect::<Result<_>>()?
    };
    if let Some(i) = bits.iter().position(|&b| b == 0) {
        return Err(Error::Validation(format!("0-bit layer at position {i} in {s:?}")));
    }
    Ok(bits)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub arm: Arm,
    pub layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub logit_lr: f64,
    pub schedule: TemperatureSchedule,
    pub hard_trials: usize,
    /// Use only the first `n` training images.
    pub train_limit: Option<usize>,
    pub val_limit: Option<usize>,
}

impl ExperimentConfig {
    pub fn new(arm: Arm, data_dir: impl Into<PathBuf>) -> Self {
        let epochs = 5;
        ExperimentConfig {
            data_dir: data_dir.into(),
            output_dir: PathBuf::from("runs"),
            arm,
            layers: MNIST_LAYERS,
            epochs,
            batch_size: 64,
            seed: 0,
            lr: 1e-3,
            logit_lr: 1e-3,
            schedule: TemperatureSchedule::for_epochs(epochs as f64, 0.4),
            hard_trials: DEFAULT_HARD_TRIALS,
            train_limit: None,
            val_limit: None,
        }
    }

    pub fn budget(&self) -> u32 {
        self.arm.budget()
    }

    /// Sets the epoch count and re-derives the decay so the temperature
    /// still crosses the hard threshold at the same fraction of training.
    pub fn with_epochs(mut self, epochs: usize, crossing_fraction: f64) -> Self {
        self.epochs = epochs;
        self.schedule.decay_rate = self.schedule.decay_to_cross_at(epochs as f64 * crossing_fraction);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        match &self.arm {
            Arm::Manual(bits) if bits.len() != self.layers => {
                return bad(format!(
                    "manual allocation has {} layers, model has {}",
                    bits.len(),
                    self.layers
                ))
            }
            Arm::Manual(bits) if bits.contains(&0) => return bad("0-bit layer in manual allocation".into()),
            Arm::Learned { budget } if (*budget as usize) < self.layers => {
                return bad(format!(
                    "learned budget {budget} cannot give each of {} layers a bit",
                    self.layers
                ))
            }
            _ => {}
        }
        if self.layers == 0 || self.epochs == 0 || self.batch_size == 0 || self.hard_trials == 0 {
            return bad("layers, epochs, batch_size and hard_trials must be positive".into());
        }
        if !(self.lr > 0.0 && self.logit_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        let s = &self.schedule;
        if !(s.initial > 0.0 && s.floor > 0.0 && s.decay_rate >= 0.0 && s.hard_threshold > 0.0) {
            return bad(format!("invalid temperature schedule {s:?}"));
        }
        if self.train_limit == Some(0) || self.val_limit == Some(0) {
            return bad("limits must be positive".into());
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        std::fs::read_to_string(path)?.parse()
    }

    /// Experiment name as used in result tables.
    pub fn label(&self) -> String {
        self.arm.label()
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        line,
        msg: format!("cannot parse {key} from {v:?}"),
    })
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut kv: HashMap<String, (usize, String)> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (k, v) = t.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected key = value, got {t:?}"),
            })?;
            let key = k.trim().to_string();
            if kv.insert(key.clone(), (line, v.trim().to_string())).is_some() {
                return Err(Error::Config {
                    line,
                    msg: format!("duplicate key {key}"),
                });
            }
        }

        const KEYS: &[&str] = &[
            "data_dir",
            "output_dir",
            "arm",
            "bits",
            "budget",
            "layers",
            "epochs",
            "batch_size",
            "seed",
            "lr",
            "logit_lr",
            "tau0",
            "tau_min",
            "decay_rate",
            "crossing_fraction",
            "hard_threshold",
            "hard_trials",
            "train_limit",
            "val_limit",
        ];
        if let Some((k, (line, _))) = kv.iter().find(|(k, _)| !KEYS.contains(&k.as_str())) {
            return Err(Error::Config {
                line: *line,
                msg: format!("unknown key {k}"),
            });
        }

        let mut take = |key: &str| kv.remove(key);
        let missing = |key: &str| Error::Config {
            line: 0,
            msg: format!("missing required key {key}"),
        };

        let (_, data_dir) = take("data_dir").ok_or_else(|| missing("data_dir"))?;
        let (arm_line, arm_name) = take("arm").ok_or_else(|| missing("arm"))?;
        let budget = take("budget")
            .map(|(l, v)| parse_value::<u32>(l, "budget", &v).map(|b| (l, b)))
            .transpose()?;
        let arm = match arm_name.as_str() {
            "manual" => {
                let (line, bits) = take("bits").ok_or_else(|| missing("bits"))?;
                let bits = parse_allocation(&bits).map_err(|e| Error::Config {
                    line,
                    msg: e.to_string(),
                })?;
                if let Some((l, b)) = budget {
                    if b != bits.iter().sum::<u32>() {
                        return Err(Error::Config {
                            line: l,
                            msg: format!("budget {b} disagrees with bits summing to {}", bits.iter().sum::<u32>()),
                        });
                    }
                }
                Arm::Manual(bits)
            }
            "learned" => {
                if let Some((line, _)) = take("bits") {
                    return Err(Error::Config {
                        line,
                        msg: "bits is only valid for the manual arm".into(),
                    });
                }
                let (_, budget) = budget.ok_or_else(|| missing("budget"))?;
                Arm::Learned { budget }
            }
            other => {
                return Err(Error::Config {
                    line: arm_line,
                    msg: format!("arm must be manual or learned, got {other:?}"),
                })
            }
        };

        let mut cfg = ExperimentConfig::new(arm, data_dir);
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some((l, v)) = take($key) {
                    $field = parse_value(l, $key, &v)?;
                }
            };
        }
        if let Some((_, v)) = take("output_dir") {
            cfg.output_dir = PathBuf::from(v);
        }
        set!("layers", cfg.layers);
        set!("epochs", cfg.epochs);
        set!("batch_size", cfg.batch_size);
        set!("seed", cfg.seed);
        set!("lr", cfg.lr);
        set!("logit_lr", cfg.logit_lr);
        set!("tau0", cfg.schedule.initial);
        set!("tau_min", cfg.schedule.floor);
        set!("hard_threshold", cfg.schedule.hard_threshold);
        set!("hard_trials", cfg.hard_trials);
        if let Some((l, v)) = take("train_limit") {
            cfg.train_limit = Some(parse_value(l, "train_limit", &v)?);
        }
        if let Some((l, v)) = take("val_limit") {
            cfg.val_limit = Some(parse_value(l, "val_limit", &v)?);
        }
        let crossing = take("crossing_fraction");
        match (take("decay_rate"), crossing) {
            (Some((l, _)), Some(_)) => {
                return Err(Error::Config {
                    line: l,
                    msg: "give decay_rate or crossing_fraction, not both".into(),
                })
            }
            (Some((l, v)), None) => cfg.schedule.decay_rate = parse_value(l, "decay_rate", &v)?,
            (None, c) => {
                let frac = match c {
                    Some((l, v)) => parse_value::<f64>(l, "crossing_fraction", &v)?,
                    None => 0.4,
                };
                if !(frac > 0.0) {
                    return Err(Error::Validation(format!("crossing_fraction {frac} must be positive")));
                }
                cfg.schedule.decay_rate = cfg.schedule.decay_to_cross_at(cfg.epochs as f64 * frac);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "data_dir = {}", self.data_dir.display())?;
        writeln!(f, "output_dir = {}", self.output_dir.display())?;
        match &self.arm {
            Arm::Manual(bits) => {
                writeln!(f, "arm = manual")?;
                writeln!(f, "bits = {}", allocation_string(bits))?;
            }
            Arm::Learned { budget } => {
                writeln!(f, "arm = learned")?;
                writeln!(f, "budget = {budget}")?;
            }
        }
        writeln!(f, "layers = {}", self.layers)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "lr = {}", self.lr)?;
        writeln!(f, "logit_lr = {}", self.logit_lr)?;
        writeln!(f, "tau0 = {}", self.schedule.initial)?;
        writeln!(f, "tau_min = {}", self.schedule.floor)?;
        writeln!(f, "decay_rate = {}", self.schedule.decay_rate)?;
        writeln!(f, "hard_threshold = {}", self.schedule.hard_threshold)?;
        writeln!(f, "hard_trials = {}", self.hard_trials)?;
        if let Some(n) = self.train_limit {
            writeln!(f, "train_limit = {n}")?;
        }
        if let Some(n) = self.val_limit {
            writeln!(f, "val_limit = {n}")?;
        }
        Ok(())
    }
}
