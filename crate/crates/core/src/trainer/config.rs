//! Training configuration and its flat `key = value` file format.

use std::fmt::Write as _;
use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::{CorrNorm, LossWeights};
use crate::metrics::LogisticForm;
use crate::pairing::PairSelectionConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub input_size: usize,
    pub scale_factor: f64,
    pub source_pairs_per_batch: usize,
    pub target_pairs_per_batch: usize,
    pub learning_rate: f64,
    pub regression_learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub patience: usize,
    pub rank_max_epochs: usize,
    /// Source-only epochs (rank + source MSE) that pre-train the encoder
    /// once before the first iteration; 0 starts every iteration from
    /// random weights.
    pub warmup_epochs: usize,
    pub regression_max_epochs: usize,
    pub regression_batch_size: usize,
    pub pipeline_iterations: usize,
    pub tau_source: f64,
    pub tau_target: f64,
    pub ssim_threshold: f64,
    /// 0 means no cap.
    pub max_source_pairs: usize,
    pub max_target_pairs: usize,
    /// Opponents per image in the tournament; 0 compares against all.
    pub aggregate_sample: usize,
    pub corr_norm: CorrNorm,
    pub logistic_form: LogisticForm,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            input_size: 224,
            scale_factor: 1.0,
            source_pairs_per_batch: 8,
            target_pairs_per_batch: 8,
            learning_rate: 5e-5,
            regression_learning_rate: 5e-5,
            weight_decay: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            patience: 2,
            rank_max_epochs: 50,
            warmup_epochs: 0,
            regression_max_epochs: 50,
            regression_batch_size: 16,
            pipeline_iterations: 2,
            tau_source: 0.07,
            tau_target: 0.6,
            ssim_threshold: 0.75,
            max_source_pairs: 0,
            max_target_pairs: 0,
            aggregate_sample: 0,
            corr_norm: CorrNorm::Squared,
            logistic_form: LogisticForm::Exponential,
            weights: LossWeights::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 30] = [
        "seed",
        "input_size",
        "scale_factor",
        "source_pairs_per_batch",
        "target_pairs_per_batch",
        "learning_rate",
        "regression_learning_rate",
        "weight_decay",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "patience",
        "rank_max_epochs",
        "warmup_epochs",
        "regression_max_epochs",
        "regression_batch_size",
        "pipeline_iterations",
        "tau_source",
        "tau_target",
        "ssim_threshold",
        "max_source_pairs",
        "max_target_pairs",
        "aggregate_sample",
        "corr_norm",
        "logistic_form",
        "lambda_mmd",
        "lambda_center",
        "lambda_rec",
        "lambda_cor",
        "lambda_mse",
    ];

    /// Set one field from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "input_size" => self.input_size = parse_num(key, v)?,
            "scale_factor" => self.scale_factor = parse_num(key, v)?,
            "source_pairs_per_batch" => self.source_pairs_per_batch = parse_num(key, v)?,
            "target_pairs_per_batch" => self.target_pairs_per_batch = parse_num(key, v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "regression_learning_rate" => self.regression_learning_rate = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse_num(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse_num(key, v)?,
            "adam_eps" => self.adam_eps = parse_num(key, v)?,
            "patience" => self.patience = parse_num(key, v)?,
            "rank_max_epochs" => self.rank_max_epochs = parse_num(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse_num(key, v)?,
            "regression_max_epochs" => self.regression_max_epochs = parse_num(key, v)?,
            "regression_batch_size" => self.regression_batch_size = parse_num(key, v)?,
            "pipeline_iterations" => self.pipeline_iterations = parse_num(key, v)?,
            "tau_source" => self.tau_source = parse_num(key, v)?,
            "tau_target" => self.tau_target = parse_num(key, v)?,
            "ssim_threshold" => self.ssim_threshold = parse_num(key, v)?,
            "max_source_pairs" => self.max_source_pairs = parse_num(key, v)?,
            "max_target_pairs" => self.max_target_pairs = parse_num(key, v)?,
            "aggregate_sample" => self.aggregate_sample = parse_num(key, v)?,
            "corr_norm" => {
                self.corr_norm = match v {
                    "squared" => CorrNorm::Squared,
                    "plain" => CorrNorm::Plain,
                    _ => return Err(Error::Config(format!("corr_norm: unknown value {v:?}"))),
                }
            }
            "logistic_form" => {
                self.logistic_form = match v {
                    "exponential" => LogisticForm::Exponential,
                    "sigmoid" => LogisticForm::Sigmoid,
                    _ => return Err(Error::Config(format!("logistic_form: unknown value {v:?}"))),
                }
            }
            "lambda_mmd" => self.weights.mmd = parse_num(key, v)?,
            "lambda_center" => self.weights.center = parse_num(key, v)?,
            "lambda_rec" => self.weights.rec = parse_num(key, v)?,
            "lambda_cor" => self.weights.cor = parse_num(key, v)?,
            "lambda_mse" => self.weights.mse = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let w = &self.weights;
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("input_size", self.input_size.to_string());
        put("scale_factor", format!("{:?}", self.scale_factor));
        put("source_pairs_per_batch", self.source_pairs_per_batch.to_string());
        put("target_pairs_per_batch", self.target_pairs_per_batch.to_string());
        put("learning_rate", format!("{:?}", self.learning_rate));
        put("regression_learning_rate", format!("{:?}", self.regression_learning_rate));
        put("weight_decay", format!("{:?}", self.weight_decay));
        put("adam_beta1", format!("{:?}", self.adam_beta1));
        put("adam_beta2", format!("{:?}", self.adam_beta2));
        put("adam_eps", format!("{:?}", self.adam_eps));
        put("patience", self.patience.to_string());
        put("rank_max_epochs", self.rank_max_epochs.to_string());
        put("warmup_epochs", self.warmup_epochs.to_string());
        put("regression_max_epochs", self.regression_max_epochs.to_string());
        put("regression_batch_size", self.regression_batch_size.to_string());
        put("pipeline_iterations", self.pipeline_iterations.to_string());
        put("tau_source", format!("{:?}", self.tau_source));
        put("tau_target", format!("{:?}", self.tau_target));
        put("ssim_threshold", format!("{:?}", self.ssim_threshold));
        put("max_source_pairs", self.max_source_pairs.to_string());
        put("max_target_pairs", self.max_target_pairs.to_string());
        put("aggregate_sample", self.aggregate_sample.to_string());
        put(
            "corr_norm",
            match self.corr_norm {
                CorrNorm::Squared => "squared",
                CorrNorm::Plain => "plain",
            }
            .into(),
        );
        put(
            "logistic_form",
            match self.logistic_form {
                LogisticForm::Exponential => "exponential",
                LogisticForm::Sigmoid => "sigmoid",
            }
            .into(),
        );
        put("lambda_mmd", format!("{:?}", w.mmd));
        put("lambda_center", format!("{:?}", w.center));
        put("lambda_rec", format!("{:?}", w.rec));
        put("lambda_cor", format!("{:?}", w.cor));
        put("lambda_mse", format!("{:?}", w.mse));
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.pipeline_iterations < 1 {
            return Err(Error::Config("pipeline_iterations must be at least 1".into()));
        }
        if self.source_pairs_per_batch < 2 {
            return Err(Error::Config("source_pairs_per_batch must be at least 2".into()));
        }
        if self.rank_max_epochs < 1 || self.regression_max_epochs < 1 || self.regression_batch_size < 1 {
            return Err(Error::Config("epoch caps and batch sizes must be positive".into()));
        }
        for (k, v) in [
            ("learning_rate", self.learning_rate),
            ("regression_learning_rate", self.regression_learning_rate),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        for (k, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{k} must lie in [0, 1), got {v}")));
            }
        }
        self.weights.validate()?;
        self.pair_config(0).validate()?;
        self.encoder_config().validate()
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig::scaled(self.input_size, self.scale_factor)
    }

    pub fn pair_config(&self, seed: u64) -> PairSelectionConfig {
        PairSelectionConfig {
            tau_source: self.tau_source,
            tau_target: self.tau_target,
            ssim_threshold: self.ssim_threshold,
            max_pairs: None,
            seed,
        }
    }
}
