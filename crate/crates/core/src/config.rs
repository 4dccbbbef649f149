//! Run configuration.
//!
//! The on-disk format is flat `key = value` text; `#` starts a comment.
//! Every key can also be set from the command line, which wins over the file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::LogFormat;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    /// Rank the target against every item the user never interacted with.
    Full,
    /// Rank the target against `o` sampled non-interacted items.
    Sampled,
}

impl FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(EvalMode::Full),
            "sampled" => Ok(EvalMode::Sampled),
            other => Err(Error::Config(format!("eval_mode `{other}` (expected full|sampled)"))),
        }
    }
}

impl EvalMode {
    pub fn key(self) -> &'static str {
        match self {
            EvalMode::Full => "full",
            EvalMode::Sampled => "sampled",
        }
    }
}

/// How an item updates the representation of the sub-sequence it joins.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    /// Arithmetic mean of the user embedding and every assigned item.
    Running,
    /// `(p + F) / 2`: the literal two-argument average.
    Pairwise,
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "running" => Ok(Pooling::Running),
            "pairwise" => Ok(Pooling::Pairwise),
            other => Err(Error::Config(format!("pooling `{other}` (expected running|pairwise)"))),
        }
    }
}

impl Pooling {
    pub fn key(self) -> &'static str {
        match self {
            Pooling::Running => "running",
            Pooling::Pairwise => "pairwise",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub format: LogFormat,
    pub min_user: usize,
    pub min_item: usize,
    /// Embedding size.
    pub d: usize,
    /// Window length.
    pub t: usize,
    /// Maximum interest count.
    pub k: usize,
    /// Sampled negatives per training window (and per user in sampled evaluation).
    pub o: usize,
    pub temperature: f64,
    pub lambda_o: f64,
    pub beta: f64,
    pub num_blocks: usize,
    /// Hidden width of the policy network; 0 means `d`.
    pub policy_hidden: usize,
    /// Hidden width of the count head's position attention; 0 means `d`.
    pub attn_hidden: usize,
    pub lr: f64,
    /// `None` picks 256 for datasets under 5000 users, else 2048.
    pub batch_size: Option<usize>,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Fixed interest count (count head disabled).
    pub fixed_h: Option<usize>,
    pub eval_mode: EvalMode,
    pub pooling: Pooling,
    /// Reserved; residual connections and normalization are not implemented.
    pub residual: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            format: LogFormat::UserItemRatingTime,
            min_user: 10,
            min_item: 10,
            d: 64,
            t: 10,
            k: 4,
            o: 99,
            temperature: 10.0,
            lambda_o: 0.001,
            beta: 1.0,
            num_blocks: 2,
            policy_hidden: 0,
            attn_hidden: 0,
            lr: 0.001,
            batch_size: None,
            epochs: 100,
            patience: 10,
            seed: 42,
            fixed_h: None,
            eval_mode: EvalMode::Full,
            pooling: Pooling::Running,
            residual: false,
        }
    }
}

pub const KEYS: &[&str] = &[
    "dataset",
    "format",
    "min_user",
    "min_item",
    "d",
    "t",
    "k",
    "o",
    "temperature",
    "lambda_o",
    "beta",
    "num_blocks",
    "policy_hidden",
    "attn_hidden",
    "lr",
    "batch_size",
    "epochs",
    "patience",
    "seed",
    "fixed_h",
    "eval_mode",
    "pooling",
    "residual",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value {
        "none" | "auto" | "" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

impl RunConfig {
    /// Reads a config file on top of the defaults.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        // relative dataset paths resolve against the config's directory
        if let (Some(ds), Some(dir)) = (cfg.dataset.as_ref(), path.parent()) {
            if ds.is_relative() && !ds.exists() {
                cfg.dataset = Some(dir.join(ds));
            }
        }
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = optional::<PathBuf>(key, value)?,
            "format" => self.format = value.parse().map_err(|e| Error::Config(format!("{e}")))?,
            "min_user" => self.min_user = parse(key, value)?,
            "min_item" => self.min_item = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "t" => self.t = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "o" => self.o = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "lambda_o" => self.lambda_o = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "num_blocks" => self.num_blocks = parse(key, value)?,
            "policy_hidden" => self.policy_hidden = parse(key, value)?,
            "attn_hidden" => self.attn_hidden = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = optional(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "fixed_h" => self.fixed_h = optional(key, value)?,
            "eval_mode" => self.eval_mode = value.parse()?,
            "pooling" => self.pooling = value.parse()?,
            "residual" => self.residual = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.k < 1 {
            return fail("k must be at least 1".into());
        }
        if self.t < 1 {
            return fail("t must be at least 1".into());
        }
        if self.d < 1 || self.num_blocks < 1 {
            return fail("d and num_blocks must be at least 1".into());
        }
        if self.o < 1 {
            return fail("o must be at least 1".into());
        }
        if let Some(h) = self.fixed_h {
            if h < 1 || h > self.k {
                return fail(format!("fixed_h = {h} must lie in 1..=k ({})", self.k));
            }
        }
        for (name, v) in [
            ("temperature", self.temperature),
            ("lambda_o", self.lambda_o),
            ("beta", self.beta),
            ("lr", self.lr),
        ] {
            if !v.is_finite() {
                return fail(format!("{name} must be finite"));
            }
        }
        if self.temperature <= 0.0 {
            return fail("temperature must be positive".into());
        }
        if self.lambda_o < 0.0 || self.beta < 0.0 || self.lr < 0.0 {
            return fail("lambda_o, beta and lr must be non-negative".into());
        }
        if self.batch_size == Some(0) {
            return fail("batch_size must be positive".into());
        }
        if self.residual {
            return fail("residual connections are not supported (key reserved)".into());
        }
        Ok(())
    }

    pub fn effective_batch_size(&self, users: usize) -> usize {
        match self.batch_size {
            Some(b) => b,
            None if users < 5000 => 256,
            None => 2048,
        }
    }

    /// Canonical `key = value` listing, one line per key in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        for &key in KEYS {
            let value = match key {
                "dataset" => opt(self.dataset.as_ref().map(|p| p.display().to_string())),
                "format" => self.format.key().into(),
                "min_user" => self.min_user.to_string(),
                "min_item" => self.min_item.to_string(),
                "d" => self.d.to_string(),
                "t" => self.t.to_string(),
                "k" => self.k.to_string(),
                "o" => self.o.to_string(),
                "temperature" => fmt_f64(self.temperature),
                "lambda_o" => fmt_f64(self.lambda_o),
                "beta" => fmt_f64(self.beta),
                "num_blocks" => self.num_blocks.to_string(),
                "policy_hidden" => self.policy_hidden.to_string(),
                "attn_hidden" => self.attn_hidden.to_string(),
                "lr" => fmt_f64(self.lr),
                "batch_size" => self
                    .batch_size
                    .map(|b| b.to_string())
                    .unwrap_or_else(|| "auto".into()),
                "epochs" => self.epochs.to_string(),
                "patience" => self.patience.to_string(),
                "seed" => self.seed.to_string(),
                "fixed_h" => opt(self.fixed_h.map(|h| h.to_string())),
                "eval_mode" => self.eval_mode.key().into(),
                "pooling" => self.pooling.key().into(),
                "residual" => self.residual.to_string(),
                _ => unreachable!(),
            };
            let _ = writeln!(s, "{key} = {value}");
        }
        s
    }

    /// Short stable digest of everything that affects model behaviour.
    /// The dataset path, epoch budget and patience are excluded so that a
    /// checkpoint can be evaluated from a different working directory.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.dataset = None;
        canon.epochs = 0;
        canon.patience = 0;
        let digest = Sha256::digest(canon.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn fmt_f64(v: f64) -> String {
    // shortest round-trip representation
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_settings() {
        let c = RunConfig::default();
        assert_eq!((c.d, c.t, c.k, c.o), (64, 10, 4, 99));
        assert_eq!(c.temperature, 10.0);
        assert_eq!(c.lambda_o, 0.001);
        assert_eq!(c.beta, 1.0);
        assert_eq!(c.lr, 0.001);
        assert_eq!(c.effective_batch_size(943), 256);
        assert_eq!(c.effective_batch_size(10_000), 2048);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nk = 3  # trailing\nfixed_h = 2\neval_mode = sampled\nbatch_size = 64\n")
            .unwrap();
        assert_eq!(c.k, 3);
        assert_eq!(c.fixed_h, Some(2));
        assert_eq!(c.batch_size, Some(64));
        let mut again = RunConfig::default();
        again.apply_text(&c.to_text()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut c = RunConfig::default();
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("k", "x").is_err());
        c.set("fixed_h", "9").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.set("residual", "true").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_tracks_model_settings_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.epochs = 3;
        b.dataset = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.k = 5;
        assert_ne!(a.hash(), b.hash());
    }
}
