//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Every key has a
//! default; unknown keys and unparsable values are errors naming the key.

use crate::bagging::{SplitRatios, DEFAULT_BLOCK, DEFAULT_PER_BAG, DEFAULT_STRIDE, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::eval::{DEFAULT_DELTA_SR, DEFAULT_K};
use crate::ingest::{LogFormat, DEFAULT_DIM};
use crate::model::ModelConfig;
use crate::synthgen::SynthSpec;
use crate::training::TrainConfig;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BagMode {
    Sliding,
    Block,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: String,
    pub format: LogFormat,
    pub hash_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub bagging: BagMode,
    pub window: usize,
    pub stride: usize,
    pub block: usize,
    pub per_bag: usize,
    pub ratios: SplitRatios,
    pub shuffle: bool,
    pub k: usize,
    pub delta_sr: f64,
    pub synth: SynthSpec,
    pub input: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: "synth".into(),
            format: LogFormat::BglStyle,
            hash_seed: 0,
            model: ModelConfig {
                d: DEFAULT_DIM,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            bagging: BagMode::Sliding,
            window: DEFAULT_WINDOW,
            stride: DEFAULT_STRIDE,
            block: DEFAULT_BLOCK,
            per_bag: DEFAULT_PER_BAG,
            ratios: SplitRatios::default(),
            shuffle: false,
            k: DEFAULT_K,
            delta_sr: DEFAULT_DELTA_SR,
            synth: SynthSpec::default(),
            input: None,
            cache: None,
            checkpoint: None,
            metrics: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value for `{key}`: `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value for `{key}`: `{value}`"))),
    }
}

fn path_opt(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Set one key. The `seed` key also seeds model init and the sampler.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let m = &mut self.model;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "dataset" => {
                if v.is_empty() || v.contains(',') {
                    return Err(Error::Config(format!("bad value for `dataset`: `{v}`")));
                }
                self.dataset = v.to_string()
            }
            "format" => self.format = v.parse().map_err(|_| Error::Config(format!("bad value for `format`: `{v}`")))?,
            "hash_seed" => self.hash_seed = parse(key, v)?,
            "d" => m.d = parse(key, v)?,
            "d_h" => m.d_h = parse(key, v)?,
            "n_proto" => m.n_proto = parse(key, v)?,
            "k_heads" => m.k_heads = parse(key, v)?,
            "d_a" => m.d_a = parse(key, v)?,
            "heads_enc" => m.heads_enc = parse(key, v)?,
            "h_c" => m.h_c = parse(key, v)?,
            "lambda_p" => t.lambda_p = parse(key, v)?,
            "lambda_a" => t.lambda_a = parse(key, v)?,
            "lambda_c" => t.lambda_c = parse(key, v)?,
            "delta_p" => t.delta_p = parse(key, v)?,
            "delta_e" => t.delta_e = parse(key, v)?,
            "w_ent" => t.w_ent = parse(key, v)?,
            "delta_c" => t.delta_c = parse(key, v)?,
            "eps" => t.eps = parse(key, v)?,
            "gamma" => t.gamma = parse(key, v)?,
            "alpha" => t.alpha = parse(key, v)?,
            "use_consistency" => t.use_consistency = parse_bool(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "patience" => t.patience = parse(key, v)?,
            "bagging" => {
                self.bagging = match v {
                    "sliding" => BagMode::Sliding,
                    "block" => BagMode::Block,
                    _ => return Err(Error::Config(format!("bad value for `bagging`: `{v}`"))),
                }
            }
            "window" => self.window = parse(key, v)?,
            "stride" => self.stride = parse(key, v)?,
            "block" => self.block = parse(key, v)?,
            "per_bag" => self.per_bag = parse(key, v)?,
            "train_ratio" => self.ratios.train = parse(key, v)?,
            "val_ratio" => self.ratios.val = parse(key, v)?,
            "test_ratio" => self.ratios.test = parse(key, v)?,
            "shuffle" => self.shuffle = parse_bool(key, v)?,
            "k" => self.k = parse(key, v)?,
            "delta_sr" => self.delta_sr = parse(key, v)?,
            "lines" => self.synth.n_lines = parse(key, v)?,
            "anomaly_rate" => self.synth.anomaly_rate = parse(key, v)?,
            "vocab_normal" => self.synth.vocab_normal = parse(key, v)?,
            "vocab_anom" => self.synth.vocab_anom = parse(key, v)?,
            "distractor_rate" => self.synth.distractor_rate = parse(key, v)?,
            "burst_weights" => {
                let w: Vec<f64> = v.split(',').map(|x| parse(key, x.trim())).collect::<Result<_>>()?;
                self.synth.burst_weights = w
                    .try_into()
                    .map_err(|_| Error::Config("`burst_weights` needs three comma-separated values".into()))?;
            }
            "input" => self.input = path_opt(v),
            "cache" => self.cache = path_opt(v),
            "checkpoint" => self.checkpoint = path_opt(v),
            "metrics" => self.metrics = path_opt(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        self.sync_seed();
        Ok(())
    }

    fn sync_seed(&mut self) {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if !(self.delta_sr >= 0.0 && self.delta_sr < 1.0) {
            return Err(Error::Config(format!("delta_sr must lie in [0, 1), got {}", self.delta_sr)));
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let m = &self.model;
        let s = &self.synth;
        let w = s.burst_weights;
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("dataset", self.dataset.clone()),
            ("format", self.format.to_string()),
            ("hash_seed", self.hash_seed.to_string()),
            ("d", m.d.to_string()),
            ("d_h", m.d_h.to_string()),
            ("n_proto", m.n_proto.to_string()),
            ("k_heads", m.k_heads.to_string()),
            ("d_a", m.d_a.to_string()),
            ("heads_enc", m.heads_enc.to_string()),
            ("h_c", m.h_c.to_string()),
            ("lambda_p", t.lambda_p.to_string()),
            ("lambda_a", t.lambda_a.to_string()),
            ("lambda_c", t.lambda_c.to_string()),
            ("delta_p", t.delta_p.to_string()),
            ("delta_e", t.delta_e.to_string()),
            ("w_ent", t.w_ent.to_string()),
            ("delta_c", t.delta_c.to_string()),
            ("eps", t.eps.to_string()),
            ("gamma", t.gamma.to_string()),
            ("alpha", t.alpha.to_string()),
            ("use_consistency", t.use_consistency.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("patience", t.patience.to_string()),
            (
                "bagging",
                match self.bagging {
                    BagMode::Sliding => "sliding",
                    BagMode::Block => "block",
                }
                .into(),
            ),
            ("window", self.window.to_string()),
            ("stride", self.stride.to_string()),
            ("block", self.block.to_string()),
            ("per_bag", self.per_bag.to_string()),
            ("train_ratio", self.ratios.train.to_string()),
            ("val_ratio", self.ratios.val.to_string()),
            ("test_ratio", self.ratios.test.to_string()),
            ("shuffle", self.shuffle.to_string()),
            ("k", self.k.to_string()),
            ("delta_sr", self.delta_sr.to_string()),
            ("lines", s.n_lines.to_string()),
            ("anomaly_rate", s.anomaly_rate.to_string()),
            ("vocab_normal", s.vocab_normal.to_string()),
            ("vocab_anom", s.vocab_anom.to_string()),
            ("distractor_rate", s.distractor_rate.to_string()),
            ("burst_weights", format!("{},{},{}", w[0], w[1], w[2])),
            ("input", show_path(&self.input)),
            ("cache", show_path(&self.cache)),
            ("checkpoint", show_path(&self.checkpoint)),
            ("metrics", show_path(&self.metrics)),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
