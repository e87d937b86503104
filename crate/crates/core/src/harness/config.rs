//! Run configuration stored as a flat `key = value` text file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::listops::MedianRule;
use crate::model::ModelConfig;
use crate::optim::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "single" => Ok(Precision::F32),
            "f64" | "double" => Ok(Precision::F64),
            _ => Err(Error::config(format!("unknown precision {s:?} (f32 or f64)"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip: f64,
    pub batch_size: usize,
    /// Group examples of similar length into the same batch.
    pub length_buckets: bool,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub tests: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub precision: Precision,
    pub median_rule: MedianRule,
    /// Use only the first `max_train` training examples (0 keeps all).
    pub max_train: usize,
    /// Evaluate on at most this many dev/test examples (0 keeps all).
    pub max_eval: usize,
    /// Also report accuracy on the training set after every epoch.
    pub train_accuracy: bool,
    /// Stop after the first epoch that ends past this many seconds (0 = no limit).
    /// Runs cut short this way depend on machine speed.
    pub max_seconds: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            clip: 5.0,
            batch_size: 32,
            length_buckets: true,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            train: None,
            dev: None,
            tests: Vec::new(),
            out_dir: PathBuf::from("run"),
            precision: Precision::F32,
            median_rule: MedianRule::default(),
            max_train: 0,
            max_eval: 0,
            train_accuracy: false,
            max_seconds: 0.0,
        }
    }
}

/// Every key accepted by [`RunConfig::set`], in file order.
pub const KEYS: &[&str] = &[
    "encoder",
    "cell",
    "beam_size",
    "topk",
    "stochastic",
    "temperature",
    "use_h0",
    "cell_dropout",
    "vocab",
    "d_e",
    "d_h",
    "hidden",
    "classes",
    "input_dropout",
    "head_dropout",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "clip",
    "batch_size",
    "length_buckets",
    "max_epochs",
    "patience",
    "seed",
    "train",
    "dev",
    "test",
    "out_dir",
    "precision",
    "median_rule",
    "max_train",
    "max_eval",
    "train_accuracy",
    "max_seconds",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::config(format!("bad boolean {value:?} for {key}"))),
    }
}

fn path_value(value: &str, base: &Path) -> Option<PathBuf> {
    if value.is_empty() {
        return None;
    }
    let p = PathBuf::from(value);
    Some(if p.is_absolute() { p } else { base.join(p) })
}

impl RunConfig {
    /// Sets one key. Relative paths are resolved against `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let value = value.trim();
        let m = &mut self.model;
        let e = &mut m.encoder;
        match key {
            "encoder" => e.kind = value.parse()?,
            "cell" => e.cell = value.parse()?,
            "beam_size" => e.beam_size = parse(key, value)?,
            "topk" => e.topk = value.parse()?,
            "stochastic" => e.stochastic = parse_bool(key, value)?,
            "temperature" => e.temperature = parse(key, value)?,
            "use_h0" => e.use_h0 = parse_bool(key, value)?,
            "cell_dropout" => e.cell_dropout = parse(key, value)?,
            "vocab" => m.vocab = parse(key, value)?,
            "d_e" => m.d_e = parse(key, value)?,
            "d_h" => m.d_h = parse(key, value)?,
            "hidden" => m.hidden = parse(key, value)?,
            "classes" => m.classes = parse(key, value)?,
            "input_dropout" => m.input_dropout = parse(key, value)?,
            "head_dropout" => m.head_dropout = parse(key, value)?,
            "dropout" => {
                m.input_dropout = parse(key, value)?;
                m.head_dropout = m.input_dropout;
            }
            "lr" => self.adam.lr = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "eps" => self.adam.eps = parse(key, value)?,
            "clip" => self.clip = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "length_buckets" => self.length_buckets = parse_bool(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "train" => self.train = path_value(value, base),
            "dev" => self.dev = path_value(value, base),
            "test" => self.tests = value.split(',').filter_map(|p| path_value(p.trim(), base)).collect(),
            "out_dir" => self.out_dir = path_value(value, base).unwrap_or_else(|| PathBuf::from(".")),
            "precision" => self.precision = value.parse()?,
            "median_rule" => self.median_rule = value.parse()?,
            "max_train" => self.max_train = parse(key, value)?,
            "max_eval" => self.max_eval = parse(key, value)?,
            "train_accuracy" => self.train_accuracy = parse_bool(key, value)?,
            "max_seconds" => self.max_seconds = parse(key, value)?,
            _ => return Err(Error::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Later keys win.
    pub fn parse_text(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value, got {raw:?}", no + 1)))?;
            cfg.set(k.trim(), v, base)
                .map_err(|e| Error::config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse_text(&text, base)
    }

    /// Applies `--key=value` (or `key=value`) overrides relative to the working directory.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref().trim_start_matches("--");
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v, Path::new(""))?;
        }
        Ok(())
    }

    /// Serializes every key. Paths are written as given (absolute when they
    /// were resolved from a file).
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let e = &m.encoder;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let tests: Vec<String> = self.tests.iter().map(|p| p.display().to_string()).collect();
        let values: Vec<String> = vec![
            e.kind.to_string(),
            e.cell.to_string(),
            e.beam_size.to_string(),
            e.topk.to_string(),
            e.stochastic.to_string(),
            e.temperature.to_string(),
            e.use_h0.to_string(),
            e.cell_dropout.to_string(),
            m.vocab.to_string(),
            m.d_e.to_string(),
            m.d_h.to_string(),
            m.hidden.to_string(),
            m.classes.to_string(),
            m.input_dropout.to_string(),
            m.head_dropout.to_string(),
            self.adam.lr.to_string(),
            self.adam.beta1.to_string(),
            self.adam.beta2.to_string(),
            self.adam.eps.to_string(),
            self.clip.to_string(),
            self.batch_size.to_string(),
            self.length_buckets.to_string(),
            self.max_epochs.to_string(),
            self.patience.to_string(),
            self.seed.to_string(),
            path(&self.train),
            path(&self.dev),
            tests.join(","),
            self.out_dir.display().to_string(),
            self.precision.to_string(),
            self.median_rule.to_string(),
            self.max_train.to_string(),
            self.max_eval.to_string(),
            self.train_accuracy.to_string(),
            self.max_seconds.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be >= 1"));
        }
        if self.adam.lr.is_nan()
            || self.adam.lr <= 0.0
            || !(0.0..1.0).contains(&self.adam.beta1)
            || !(0.0..1.0).contains(&self.adam.beta2)
        {
            return Err(Error::config("Adam needs lr > 0 and betas in [0, 1)"));
        }
        if self.clip < 0.0 {
            return Err(Error::config("clip must be >= 0"));
        }
        Ok(())
    }

    /// Checks that every dataset path exists.
    pub fn check_paths(&self, need_train: bool) -> Result<()> {
        let mut paths: Vec<&PathBuf> = self.tests.iter().collect();
        if need_train {
            let train = self
                .train
                .as_ref()
                .ok_or_else(|| Error::config("no training set configured"))?;
            let dev = self
                .dev
                .as_ref()
                .ok_or_else(|| Error::config("no dev set configured"))?;
            paths.extend([train, dev]);
        }
        for p in paths {
            if !p.is_file() {
                return Err(Error::config(format!("dataset {} not found", p.display())));
            }
        }
        Ok(())
    }
}
