//! Run settings: defaults, key=value file parsing, flag overrides, and the
//! digest that ties checkpoints to the settings that shape a trajectory.

use crate::losses::{LossWeights, Schedule};
use crate::nn::Geometry;
use sha2::{Digest, Sha256};
use std::fmt::Display;
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: expected KEY=VALUE, got '{text}'")]
    Syntax { line: usize, text: String },
    #[error("unknown config key '{key}'")]
    UnknownKey { key: String },
    #[error("config key '{key}': cannot parse '{value}' ({why})")]
    BadValue { key: String, value: String, why: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub t_total: usize,
    pub batch: usize,
    pub lr_mae: f64,
    pub lr_cmm: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub lambda_gauss: f64,
    pub lambda_kl: f64,
    pub lambda_div: f64,
    pub mu: f64,
    pub sigma: f64,
    pub rho: f64,
    pub lambda_end: f64,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub p: usize,
    pub d: usize,
    pub heads: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub dec_width: usize,
    pub dec_heads: usize,
    pub cmm_depth: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
    pub data: String,
    pub out: String,
    pub checkpoint_every: usize,
    pub mask_dump_steps: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t_total: 3000,
            batch: 32,
            lr_mae: 1.5e-4,
            lr_cmm: 1.5e-4,
            weight_decay: 0.05,
            warmup: 150,
            lambda_gauss: 10.0,
            lambda_kl: 1.0,
            lambda_div: 2.0,
            mu: 0.5,
            sigma: 0.12,
            rho: 0.75,
            lambda_end: -0.1,
            h: 32,
            w: 32,
            c: 3,
            p: 8,
            d: 64,
            heads: 4,
            enc_depth: 4,
            dec_depth: 2,
            dec_width: 32,
            dec_heads: 4,
            cmm_depth: 5,
            mlp_ratio: 4,
            seed: 42,
            data: "data/train.clmds".into(),
            out: "runs/clmae".into(),
            checkpoint_every: 1000,
            mask_dump_steps: Vec::new(),
        }
    }
}

fn parse_as<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        why: e.to_string(),
    })
}

fn parse_steps(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|part| parse_as(key, part.trim())).collect()
}

impl TrainConfig {
    /// Every key the file format and `--set` accept, in render order.
    pub const KEYS: [&'static str; 30] = [
        "t_total",
        "batch",
        "lr_mae",
        "lr_cmm",
        "weight_decay",
        "warmup",
        "lambda_gauss",
        "lambda_kl",
        "lambda_div",
        "mu",
        "sigma",
        "rho",
        "lambda_end",
        "h",
        "w",
        "c",
        "p",
        "d",
        "heads",
        "enc_depth",
        "dec_depth",
        "dec_width",
        "dec_heads",
        "cmm_depth",
        "mlp_ratio",
        "seed",
        "data",
        "out",
        "checkpoint_every",
        "mask_dump_steps",
    ];

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "t_total" => self.t_total = parse_as(key, value)?,
            "batch" => self.batch = parse_as(key, value)?,
            "lr_mae" => self.lr_mae = parse_as(key, value)?,
            "lr_cmm" => self.lr_cmm = parse_as(key, value)?,
            "weight_decay" => self.weight_decay = parse_as(key, value)?,
            "warmup" => self.warmup = parse_as(key, value)?,
            "lambda_gauss" => self.lambda_gauss = parse_as(key, value)?,
            "lambda_kl" => self.lambda_kl = parse_as(key, value)?,
            "lambda_div" => self.lambda_div = parse_as(key, value)?,
            "mu" => self.mu = parse_as(key, value)?,
            "sigma" => self.sigma = parse_as(key, value)?,
            "rho" => self.rho = parse_as(key, value)?,
            "lambda_end" => self.lambda_end = parse_as(key, value)?,
            "h" => self.h = parse_as(key, value)?,
            "w" => self.w = parse_as(key, value)?,
            "c" => self.c = parse_as(key, value)?,
            "p" => self.p = parse_as(key, value)?,
            "d" => self.d = parse_as(key, value)?,
            "heads" => self.heads = parse_as(key, value)?,
            "enc_depth" => self.enc_depth = parse_as(key, value)?,
            "dec_depth" => self.dec_depth = parse_as(key, value)?,
            "dec_width" => self.dec_width = parse_as(key, value)?,
            "dec_heads" => self.dec_heads = parse_as(key, value)?,
            "cmm_depth" => self.cmm_depth = parse_as(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse_as(key, value)?,
            "seed" => self.seed = parse_as(key, value)?,
            "data" => self.data = value.to_string(),
            "out" => self.out = value.to_string(),
            "checkpoint_every" => self.checkpoint_every = parse_as(key, value)?,
            "mask_dump_steps" => self.mask_dump_steps = parse_steps(key, value)?,
            _ => return Err(ConfigError::UnknownKey { key: key.into() }),
        }
        Ok(())
    }

    /// Apply `key = value` lines. '#' starts a comment; blank lines are
    /// skipped; later lines win over earlier ones.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax { line: idx + 1, text: raw.trim().into() });
            };
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &str) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.into(), source })?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.t_total < 1 {
            return bad("t_total must be at least 1".into());
        }
        if self.batch < 1 {
            return bad("batch must be at least 1".into());
        }
        if !(self.lr_mae > 0.0 && self.lr_cmm > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must not be negative".into());
        }
        if self.warmup > self.t_total {
            return bad(format!("warmup {} exceeds t_total {}", self.warmup, self.t_total));
        }
        for (name, v) in [
            ("lambda_gauss", self.lambda_gauss),
            ("lambda_kl", self.lambda_kl),
            ("lambda_div", self.lambda_div),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative weight, got {v}"));
            }
        }
        if !self.mu.is_finite() {
            return bad("mu must be finite".into());
        }
        if !(self.sigma > 0.0) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad(format!("rho must lie strictly inside (0, 1), got {}", self.rho));
        }
        if !(-1.0..=1.0).contains(&self.lambda_end) {
            return bad(format!("lambda_end must lie in [-1, 1], got {}", self.lambda_end));
        }
        if self.checkpoint_every < 1 {
            return bad("checkpoint_every must be at least 1".into());
        }
        if let Some(&s) = self.mask_dump_steps.iter().find(|&&s| s > self.t_total) {
            return bad(format!("mask dump step {s} is past t_total {}", self.t_total));
        }
        self.geometry().validate().map_err(ConfigError::Invalid)
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            h: self.h,
            w: self.w,
            c: self.c,
            p: self.p,
            d: self.d,
            heads: self.heads,
            enc_depth: self.enc_depth,
            dec_width: self.dec_width,
            dec_heads: self.dec_heads,
            dec_depth: self.dec_depth,
            cmm_depth: self.cmm_depth,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { gauss: self.lambda_gauss, kl: self.lambda_kl, div: self.lambda_div }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::new(self.lambda_end, self.t_total)
    }

    /// Steps at which binary masks are rendered: the configured list, or the
    /// start, quarter points, and end of the run.
    pub fn dump_steps(&self) -> Vec<usize> {
        let mut steps = if self.mask_dump_steps.is_empty() {
            let t = self.t_total;
            vec![0, t / 4, t / 2, 3 * t / 4, t]
        } else {
            self.mask_dump_steps.clone()
        };
        steps.sort_unstable();
        steps.dedup();
        steps
    }

    fn value_string(&self, key: &str) -> String {
        match key {
            "t_total" => self.t_total.to_string(),
            "batch" => self.batch.to_string(),
            "lr_mae" => self.lr_mae.to_string(),
            "lr_cmm" => self.lr_cmm.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "warmup" => self.warmup.to_string(),
            "lambda_gauss" => self.lambda_gauss.to_string(),
            "lambda_kl" => self.lambda_kl.to_string(),
            "lambda_div" => self.lambda_div.to_string(),
            "mu" => self.mu.to_string(),
            "sigma" => self.sigma.to_string(),
            "rho" => self.rho.to_string(),
            "lambda_end" => self.lambda_end.to_string(),
            "h" => self.h.to_string(),
            "w" => self.w.to_string(),
            "c" => self.c.to_string(),
            "p" => self.p.to_string(),
            "d" => self.d.to_string(),
            "heads" => self.heads.to_string(),
            "enc_depth" => self.enc_depth.to_string(),
            "dec_depth" => self.dec_depth.to_string(),
            "dec_width" => self.dec_width.to_string(),
            "dec_heads" => self.dec_heads.to_string(),
            "cmm_depth" => self.cmm_depth.to_string(),
            "mlp_ratio" => self.mlp_ratio.to_string(),
            "seed" => self.seed.to_string(),
            "data" => self.data.clone(),
            "out" => self.out.clone(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "mask_dump_steps" => {
                self.mask_dump_steps.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            }
            _ => unreachable!("render covers exactly the known keys"),
        }
    }

    /// Full settings as parseable text, one `key = value` line per key.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.value_string(key));
            out.push('\n');
        }
        out
    }

    /// Hash of every setting that shapes the optimization trajectory.
    /// Seed, paths, and artifact cadence are deliberately left out: the seed
    /// only feeds the initial state, which a checkpoint already carries.
    pub fn digest(&self) -> [u8; 32] {
        const TRAJECTORY_KEYS: [&str; 25] = [
            "t_total",
            "batch",
            "lr_mae",
            "lr_cmm",
            "weight_decay",
            "warmup",
            "lambda_gauss",
            "lambda_kl",
            "lambda_div",
            "mu",
            "sigma",
            "rho",
            "lambda_end",
            "h",
            "w",
            "c",
            "p",
            "d",
            "heads",
            "enc_depth",
            "dec_depth",
            "dec_width",
            "dec_heads",
            "cmm_depth",
            "mlp_ratio",
        ];
        let mut hasher = Sha256::new();
        for key in TRAJECTORY_KEYS {
            hasher.update(key.as_bytes());
            hasher.update(b"=");
            hasher.update(self.value_string(key).as_bytes());
            hasher.update(b"\n");
        }
        hasher.finalize().into()
    }
}
