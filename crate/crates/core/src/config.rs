//! The declarative run configuration: a flat `key = value` text format with
//! documented defaults, strict unknown-key rejection, and a canonical
//! resolved form that gets written next to every run's outputs and embedded
//! in checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use crate::bank::IndicatorKind;
use crate::error::{Error, Result};
use crate::loss::WeightSource;
use crate::synth::Protocol;

/// Every knob of a training run. Field defaults are the documented defaults
/// of the corresponding config keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// `seed`: master seed; every random decision derives from it.
    pub seed: u64,
    /// `max_iter`: number of training steps.
    pub max_iter: usize,
    /// `data.dir`: dataset root holding `train/` and `val/`.
    pub data_dir: String,
    /// `data.protocol`: labeled fraction (1/2 .. 1/32).
    pub protocol: Protocol,
    /// `data.fold`: which of the 5 data folds.
    pub fold: usize,
    /// `data.partition_seed`: seed of the labeled/unlabeled split.
    pub partition_seed: u64,
    /// `batch.labeled` / `batch.unlabeled`: per-step batch composition.
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    /// `model.base_lr`: base learning rate of the poly schedule.
    pub base_lr: f64,
    /// `model.teacher_momentum`: EMA momentum of the teacher weights.
    pub teacher_momentum: f64,
    /// `bank.indicator`: confidence | margin | entropy.
    pub bank_indicator: IndicatorKind,
    /// `bank.tau`: EMA momentum of the confidence bank.
    pub bank_tau: f64,
    /// `bank.margin_exclude_target`: margin subtrahend excludes the target class.
    pub margin_exclude_target: bool,
    /// `loss.alpha` / `loss.beta` / `loss.gamma`.
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// `loss.weight_source`: teacher | student-detached.
    pub weight_source: WeightSource,
    /// `loss.warmup_steps`: supervised-only steps before the unsupervised
    /// term activates, standing in for the pretrained backbone the full-size
    /// pipeline starts from (without it the initial teacher labels
    /// everything as one class and poisons pseudo-labeling).
    pub warmup_steps: usize,
    /// `aug.r_star`: presence-dictionary ratio threshold.
    pub r_star: f64,
    /// `aug.copy_paste_k`: categories sampled per Copy-Paste.
    pub copy_paste_k: usize,
    /// `aug.scale_jitter_min` / `aug.scale_jitter_max`.
    pub scale_jitter_min: f64,
    pub scale_jitter_max: f64,
    /// `aug.crop_fraction`: CutMix window side as a fraction of the image side.
    pub crop_fraction: f64,
    /// `aug.cutmix_pool`: let adaptive CutMix pull crop sources from any
    /// presence-dictionary entry, materializing out-of-batch images on
    /// demand. Off by default: with small images the ratio filter passes
    /// tiny pseudo-label blobs, and chasing them pool-wide without dynamic
    /// re-weighting amplifies teacher hallucinations.
    pub cutmix_pool: bool,
    /// `ael.dr` / `ael.aes` / `ael.acm` / `ael.acp`: component switches.
    pub dr: bool,
    pub aes: bool,
    pub acm: bool,
    pub acp: bool,
    /// `checkpoint.every`: checkpoint period in steps (0 = final only).
    pub checkpoint_every: usize,
    /// `out`: output directory (usually set by `--out`).
    pub out: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_iter: 2000,
            data_dir: "data".into(),
            protocol: Protocol::Eighth,
            fold: 0,
            partition_seed: 0,
            batch_labeled: 4,
            batch_unlabeled: 4,
            base_lr: 0.5,
            teacher_momentum: 0.999,
            bank_indicator: IndicatorKind::Confidence,
            bank_tau: 0.999,
            margin_exclude_target: false,
            alpha: 1.0,
            beta: 1.0,
            gamma: 2.0,
            weight_source: WeightSource::Teacher,
            warmup_steps: 400,
            r_star: 0.005,
            copy_paste_k: 3,
            scale_jitter_min: 0.5,
            scale_jitter_max: 2.0,
            crop_fraction: 0.5,
            cutmix_pool: false,
            dr: true,
            aes: true,
            acm: true,
            acp: true,
            checkpoint_every: 500,
            out: "runs/out".into(),
        }
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("key '{key}': expected a boolean, got '{value}'"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{value}'")))
}

impl RunConfig {
    /// Apply one `key = value` assignment. Unknown keys are rejected.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "max_iter" => self.max_iter = parse_num(key, value)?,
            "data.dir" => self.data_dir = value.to_string(),
            "data.protocol" => self.protocol = Protocol::parse(value)?,
            "data.fold" => self.fold = parse_num(key, value)?,
            "data.partition_seed" => self.partition_seed = parse_num(key, value)?,
            "batch.labeled" => self.batch_labeled = parse_num(key, value)?,
            "batch.unlabeled" => self.batch_unlabeled = parse_num(key, value)?,
            "model.base_lr" => self.base_lr = parse_num(key, value)?,
            "model.teacher_momentum" => self.teacher_momentum = parse_num(key, value)?,
            "bank.indicator" => self.bank_indicator = IndicatorKind::parse(value)?,
            "bank.tau" => self.bank_tau = parse_num(key, value)?,
            "bank.margin_exclude_target" => self.margin_exclude_target = parse_bool(key, value)?,
            "loss.alpha" => self.alpha = parse_num(key, value)?,
            "loss.beta" => self.beta = parse_num(key, value)?,
            "loss.gamma" => self.gamma = parse_num(key, value)?,
            "loss.weight_source" => self.weight_source = WeightSource::parse(value)?,
            "loss.warmup_steps" => self.warmup_steps = parse_num(key, value)?,
            "aug.r_star" => self.r_star = parse_num(key, value)?,
            "aug.copy_paste_k" => self.copy_paste_k = parse_num(key, value)?,
            "aug.scale_jitter_min" => self.scale_jitter_min = parse_num(key, value)?,
            "aug.scale_jitter_max" => self.scale_jitter_max = parse_num(key, value)?,
            "aug.crop_fraction" => self.crop_fraction = parse_num(key, value)?,
            "aug.cutmix_pool" => self.cutmix_pool = parse_bool(key, value)?,
            "ael.dr" => self.dr = parse_bool(key, value)?,
            "ael.aes" => self.aes = parse_bool(key, value)?,
            "ael.acm" => self.acm = parse_bool(key, value)?,
            "ael.acp" => self.acp = parse_bool(key, value)?,
            "checkpoint.every" => self.checkpoint_every = parse_num(key, value)?,
            "out" => self.out = value.to_string(),
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parse a `key = value` config text (one pair per line, `#` comments).
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            message: format!("cannot read config: {e}"),
        })?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Apply `key=value` override strings (the CLI's `--set`).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let Some((key, value)) = item.split_once('=') else {
                return Err(Error::Config(format!("override '{item}' is not key=value")));
            };
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// The canonical resolved form: every key, fixed order, diff-able.
    /// The output directory is run metadata rather than experiment config
    /// and is deliberately absent, so identically configured runs produce
    /// identical resolved text (and identical checkpoints) regardless of
    /// where their artifacts land.
    pub fn to_resolved_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("max_iter", self.max_iter.to_string());
        kv("data.dir", self.data_dir.clone());
        kv("data.protocol", self.protocol.name().to_string());
        kv("data.fold", self.fold.to_string());
        kv("data.partition_seed", self.partition_seed.to_string());
        kv("batch.labeled", self.batch_labeled.to_string());
        kv("batch.unlabeled", self.batch_unlabeled.to_string());
        kv("model.base_lr", format_f64(self.base_lr));
        kv("model.teacher_momentum", format_f64(self.teacher_momentum));
        kv("bank.indicator", self.bank_indicator.name().to_string());
        kv("bank.tau", format_f64(self.bank_tau));
        kv("bank.margin_exclude_target", self.margin_exclude_target.to_string());
        kv("loss.alpha", format_f64(self.alpha));
        kv("loss.beta", format_f64(self.beta));
        kv("loss.gamma", format_f64(self.gamma));
        kv("loss.weight_source", self.weight_source.name().to_string());
        kv("loss.warmup_steps", self.warmup_steps.to_string());
        kv("aug.r_star", format_f64(self.r_star));
        kv("aug.copy_paste_k", self.copy_paste_k.to_string());
        kv("aug.scale_jitter_min", format_f64(self.scale_jitter_min));
        kv("aug.scale_jitter_max", format_f64(self.scale_jitter_max));
        kv("aug.crop_fraction", format_f64(self.crop_fraction));
        kv("aug.cutmix_pool", self.cutmix_pool.to_string());
        kv("ael.dr", self.dr.to_string());
        kv("ael.aes", self.aes.to_string());
        kv("ael.acm", self.acm.to_string());
        kv("ael.acp", self.acp.to_string());
        kv("checkpoint.every", self.checkpoint_every.to_string());
        s
    }

    pub fn aug_config(&self) -> crate::aug::AugConfig {
        crate::aug::AugConfig {
            r_star: self.r_star,
            copy_paste_k: self.copy_paste_k,
            scale_jitter_min: self.scale_jitter_min,
            scale_jitter_max: self.scale_jitter_max,
            crop_fraction: self.crop_fraction,
        }
    }

    pub fn loss_config(&self) -> crate::loss::LossConfig {
        crate::loss::LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            weight_source: self.weight_source,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be positive".into()));
        }
        if self.batch_labeled == 0 {
            return Err(Error::Config("batch.labeled must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.bank_tau) {
            return Err(Error::Config(format!("bank.tau {} outside [0, 1)", self.bank_tau)));
        }
        if !(0.0..1.0).contains(&self.teacher_momentum) {
            return Err(Error::Config(format!(
                "model.teacher_momentum {} outside [0, 1)",
                self.teacher_momentum
            )));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::Config("model.base_lr must be positive".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("loss.alpha/beta/gamma must be >= 0".into()));
        }
        self.aug_config().validate()?;
        Ok(())
    }
}

/// Format floats so the resolved text parses back to the identical value.
fn format_f64(v: f64) -> String {
    let s = format!("{v}");
    debug_assert_eq!(s.parse::<f64>().unwrap(), v);
    s
}
