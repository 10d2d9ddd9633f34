//! Flat `key = value` run configuration.
//!
//! One struct covers data, model, and training knobs so a run can be pinned
//! by a single small file. Parsing is strict: an unknown key is an error,
//! not a silent ignore, because a typo like `grou_size` would otherwise
//! change results without a trace. `render` writes every key back out in a
//! fixed order, which is what run manifests embed.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::{LossKind, NegMode, DEFAULT_FF_THETA, DEFAULT_LAMBDA, DEFAULT_MARGIN};
use crate::samples::EmbedMode;
use crate::train::{Strategy, TrainConfig, DEFAULT_FEEDBACK_SCALE};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // data
    pub dataset: String,
    pub normalize: bool,
    /// Truncate splits to the first n examples; 0 keeps everything.
    pub train_limit: usize,
    pub test_limit: usize,
    // model
    pub arch: String,
    pub embed: String,
    // training
    pub strategy: String,
    pub group_size: usize,
    pub feedback_scale: f64,
    pub loss: String,
    pub theta: f64,
    pub margin: f64,
    pub lambda: f64,
    pub neg_mode: String,
    pub n_negs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub grad_noise_sigma: f64,
    pub augment: bool,
    // evaluation
    pub skip_units: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: "synthetic".into(),
            normalize: true,
            train_limit: 0,
            test_limit: 0,
            arch: "mlp(500,500,500)".into(),
            embed: "learnable_channel".into(),
            strategy: "df_o".into(),
            group_size: 2,
            feedback_scale: DEFAULT_FEEDBACK_SCALE,
            loss: "df_margin".into(),
            theta: DEFAULT_FF_THETA,
            margin: DEFAULT_MARGIN,
            lambda: DEFAULT_LAMBDA,
            neg_mode: "max".into(),
            n_negs: 1,
            epochs: 10,
            batch_size: 100,
            lr: 1e-3,
            seed: 0,
            grad_noise_sigma: 0.0,
            augment: false,
            skip_units: 1,
        }
    }
}

fn parse_as<V: std::str::FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("bad value '{value}' for {key}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("bad value '{value}' for {key}: expected a boolean"))),
    }
}

impl RunConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "dataset" => self.dataset = value.into(),
            "normalize" => self.normalize = parse_bool(key, value)?,
            "train_limit" => self.train_limit = parse_as(key, value)?,
            "test_limit" => self.test_limit = parse_as(key, value)?,
            "arch" => self.arch = value.into(),
            "embed" => self.embed = value.into(),
            "strategy" => self.strategy = value.into(),
            "group_size" => self.group_size = parse_as(key, value)?,
            "feedback_scale" => self.feedback_scale = parse_as(key, value)?,
            "loss" => self.loss = value.into(),
            "theta" => self.theta = parse_as(key, value)?,
            "margin" => self.margin = parse_as(key, value)?,
            "lambda" => self.lambda = parse_as(key, value)?,
            "neg_mode" => self.neg_mode = value.into(),
            "n_negs" => self.n_negs = parse_as(key, value)?,
            "epochs" => self.epochs = parse_as(key, value)?,
            "batch_size" => self.batch_size = parse_as(key, value)?,
            "lr" => self.lr = parse_as(key, value)?,
            "seed" => self.seed = parse_as(key, value)?,
            "grad_noise_sigma" => self.grad_noise_sigma = parse_as(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "skip_units" => self.skip_units = parse_as(key, value)?,
            other => return Err(Error::config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Apply a `key=value` override (the CLI's `--set`).
    pub fn set_kv(&mut self, assignment: &str) -> Result<()> {
        let Some((k, v)) = assignment.split_once('=') else {
            return Err(Error::config(format!(
                "override '{assignment}' is not of the form key=value"
            )));
        };
        self.set(k.trim(), v)
    }

    /// Parse a config file: `key = value` lines, `#` comments, blank lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "line {}: '{line}' is not of the form key = value",
                    lineno + 1
                )));
            };
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key in a fixed order; `parse(render(c)) == c`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset = {}", self.dataset);
        let _ = writeln!(s, "normalize = {}", self.normalize);
        let _ = writeln!(s, "train_limit = {}", self.train_limit);
        let _ = writeln!(s, "test_limit = {}", self.test_limit);
        let _ = writeln!(s, "arch = {}", self.arch);
        let _ = writeln!(s, "embed = {}", self.embed);
        let _ = writeln!(s, "strategy = {}", self.strategy);
        let _ = writeln!(s, "group_size = {}", self.group_size);
        let _ = writeln!(s, "feedback_scale = {}", self.feedback_scale);
        let _ = writeln!(s, "loss = {}", self.loss);
        let _ = writeln!(s, "theta = {}", self.theta);
        let _ = writeln!(s, "margin = {}", self.margin);
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "neg_mode = {}", self.neg_mode);
        let _ = writeln!(s, "n_negs = {}", self.n_negs);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "grad_noise_sigma = {}", self.grad_noise_sigma);
        let _ = writeln!(s, "augment = {}", self.augment);
        let _ = writeln!(s, "skip_units = {}", self.skip_units);
        s
    }

    pub fn loss_kind(&self) -> Result<LossKind> {
        match self.loss.as_str() {
            "ff" => Ok(LossKind::Ff { theta: self.theta }),
            "symba" => Ok(LossKind::SymBa),
            "df_margin" => Ok(LossKind::DfMargin {
                margin: self.margin,
                lambda: self.lambda,
                neg_mode: NegMode::parse(&self.neg_mode)?,
            }),
            other => Err(Error::config(format!(
                "unknown loss '{other}' (expected ff | symba | df_margin)"
            ))),
        }
    }

    pub fn strategy_kind(&self) -> Result<Strategy> {
        Strategy::parse(&self.strategy, self.group_size, self.feedback_scale)
    }

    pub fn embed_mode(&self) -> Result<EmbedMode> {
        EmbedMode::parse(&self.embed)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            strategy: self.strategy_kind()?,
            loss: self.loss_kind()?,
            n_negs: self.n_negs,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            grad_noise_sigma: self.grad_noise_sigma,
            augment: self.augment,
        })
    }
}
