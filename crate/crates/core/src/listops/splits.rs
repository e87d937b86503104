//! Generalization split builders and the dataset file format.
//!
//! A dataset file is UTF-8 TSV with one `source<TAB>label` line per example.
//! Next to it, `<file>.meta` holds `key = value` lines recording the
//! generator config and the bounds the examples actually realize.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::generate::generate_excluding;
use super::{Example, GenConfig, MedianRule};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    /// Test sequences are longer than anything in training.
    LengthGen,
    /// Test expressions nest deeper than anything in training.
    DepthGen,
    /// Every test example contains an operator with more arguments than training allows.
    ArgGen,
    /// Train, dev and test drawn from one distribution.
    LraStyle,
}

impl FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "length_gen" => Ok(SplitKind::LengthGen),
            "depth_gen" => Ok(SplitKind::DepthGen),
            "arg_gen" => Ok(SplitKind::ArgGen),
            "lra_style" | "iid" => Ok(SplitKind::LraStyle),
            other => Err(Error::config(format!("unknown split kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for SplitKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitKind::LengthGen => "length_gen",
            SplitKind::DepthGen => "depth_gen",
            SplitKind::ArgGen => "arg_gen",
            SplitKind::LraStyle => "lra_style",
        })
    }
}

/// High-level knobs from which a [`SplitPlan`] is derived.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitParams {
    pub train_count: usize,
    pub dev_count: usize,
    pub test_count: usize,
    pub train_max_length: usize,
    pub train_max_depth: usize,
    pub min_args: usize,
    pub train_max_args: usize,
    pub nest_prob: f64,
    /// Nesting probability for generalization test sets, which usually need
    /// bushier expressions to reach their bounds.
    pub test_nest_prob: f64,
    /// Inclusive length ranges, one test set each (length_gen).
    pub test_lengths: Vec<(usize, usize)>,
    /// Inclusive depth ranges, one test set each (depth_gen).
    pub test_depths: Vec<(usize, usize)>,
    /// Required arities, one test set each (arg_gen).
    pub test_arities: Vec<usize>,
    /// Depth cap for length_gen and arg_gen test sets.
    pub test_max_depth: usize,
    /// Length cap for depth_gen and arg_gen test sets.
    pub test_max_length: usize,
    pub median_rule: MedianRule,
    pub seed: u64,
}

impl Default for SplitParams {
    /// The desk-scale recipe: 20k training examples up to 50 tokens, depth 4,
    /// three arguments, tested on 80 to 120 tokens.
    fn default() -> Self {
        SplitParams {
            train_count: 20_000,
            dev_count: 2_000,
            test_count: 2_000,
            train_max_length: 50,
            train_max_depth: 4,
            min_args: 2,
            train_max_args: 3,
            nest_prob: 0.4,
            test_nest_prob: 0.75,
            test_lengths: vec![(80, 120)],
            test_depths: vec![(5, 6)],
            test_arities: vec![6],
            test_max_depth: 4,
            test_max_length: 200,
            median_rule: MedianRule::Lower,
            seed: 1,
        }
    }
}

impl SplitParams {
    /// The large-scale recipe: training up to 100 tokens, depth 20 and five
    /// arguments; length tests at 200-300, 500-600 and 900-1000 tokens and
    /// argument tests at 10 and 15 arguments.
    pub fn paper_scale() -> Self {
        SplitParams {
            train_count: 90_000,
            dev_count: 10_000,
            test_count: 2_000,
            train_max_length: 100,
            train_max_depth: 20,
            min_args: 2,
            train_max_args: 5,
            nest_prob: 0.25,
            test_nest_prob: 0.3,
            test_lengths: vec![(200, 300), (500, 600), (900, 1000)],
            test_depths: vec![(21, 25)],
            test_arities: vec![10, 15],
            test_max_depth: 20,
            test_max_length: 1000,
            median_rule: MedianRule::Lower,
            seed: 1,
        }
    }
}

/// Fully resolved generator configs for every file in a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub kind: SplitKind,
    pub train: GenConfig,
    pub dev: GenConfig,
    pub tests: Vec<(String, GenConfig)>,
}

impl SplitPlan {
    pub fn new(kind: SplitKind, p: &SplitParams) -> Result<Self> {
        let train = GenConfig {
            min_length: 1,
            max_length: p.train_max_length,
            min_depth: 1,
            max_depth: p.train_max_depth,
            min_args: p.min_args,
            max_args: p.train_max_args,
            nest_prob: p.nest_prob,
            count: p.train_count,
            seed: p.seed,
            median_rule: p.median_rule,
            ..GenConfig::default()
        };
        let dev = GenConfig {
            count: p.dev_count,
            seed: p.seed.wrapping_add(1),
            ..train.clone()
        };
        let test_base = GenConfig {
            count: p.test_count,
            nest_prob: p.test_nest_prob,
            ..train.clone()
        };
        let seed_for = |i: usize| p.seed.wrapping_add(100 + i as u64);
        let tests: Vec<(String, GenConfig)> = match kind {
            SplitKind::LraStyle => vec![(
                "test".into(),
                GenConfig {
                    seed: seed_for(0),
                    nest_prob: p.nest_prob,
                    ..test_base
                },
            )],
            SplitKind::LengthGen => p
                .test_lengths
                .iter()
                .enumerate()
                .map(|(i, &(lo, hi))| {
                    let cfg = GenConfig {
                        min_length: lo,
                        max_length: hi,
                        max_depth: p.test_max_depth,
                        seed: seed_for(i),
                        ..test_base.clone()
                    };
                    (format!("test_len_{lo}_{hi}"), cfg)
                })
                .collect(),
            SplitKind::DepthGen => p
                .test_depths
                .iter()
                .enumerate()
                .map(|(i, &(lo, hi))| {
                    let cfg = GenConfig {
                        min_depth: lo,
                        max_depth: hi,
                        max_length: p.test_max_length,
                        seed: seed_for(i),
                        ..test_base.clone()
                    };
                    (format!("test_depth_{lo}_{hi}"), cfg)
                })
                .collect(),
            SplitKind::ArgGen => p
                .test_arities
                .iter()
                .enumerate()
                .map(|(i, &k)| {
                    let cfg = GenConfig {
                        max_args: k,
                        required_arity: Some(k),
                        max_depth: p.test_max_depth,
                        max_length: p.test_max_length,
                        seed: seed_for(i),
                        ..test_base.clone()
                    };
                    (format!("test_args_{k}"), cfg)
                })
                .collect(),
        };
        let plan = SplitPlan {
            kind,
            train,
            dev,
            tests,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Checks that each test set sits strictly outside the training bounds
    /// along the split's axis, and that every config is satisfiable on paper.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.dev.validate()?;
        if self.tests.is_empty() {
            return Err(Error::config(format!("{} split has no test sets", self.kind)));
        }
        for (name, t) in &self.tests {
            t.validate().map_err(|e| Error::config(format!("{name}: {e}")))?;
            let ok = match self.kind {
                SplitKind::LraStyle => true,
                SplitKind::LengthGen => t.min_length > self.train.max_length,
                SplitKind::DepthGen => t.min_depth > self.train.max_depth,
                SplitKind::ArgGen => t.required_arity.is_some_and(|k| k > self.train.max_args),
            };
            if !ok {
                return Err(Error::config(format!(
                    "{name}: test bounds overlap the training bounds of this {} split",
                    self.kind
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitFiles {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub tests: Vec<(String, PathBuf)>,
}

/// Generates every set of `plan` into `dir`. Sources never repeat across
/// files: each set excludes everything generated before it.
pub fn build_splits(plan: &SplitPlan, dir: &Path) -> Result<SplitFiles> {
    plan.validate()?;
    fs::create_dir_all(dir)?;
    let mut taken: HashSet<String> = HashSet::new();
    let mut emit = |name: &str, cfg: &GenConfig| -> Result<PathBuf> {
        let examples = generate_excluding(cfg, &taken).map_err(|e| Error::config(format!("{name}: {e}")))?;
        taken.extend(examples.iter().map(|e| e.source.clone()));
        let path = dir.join(format!("{name}.tsv"));
        write_dataset(&path, &examples, Some(cfg))?;
        Ok(path)
    };
    let train = emit("train", &plan.train)?;
    let dev = emit("dev", &plan.dev)?;
    let tests = plan
        .tests
        .iter()
        .map(|(name, cfg)| Ok((name.clone(), emit(name, cfg)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitFiles { train, dev, tests })
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes the TSV and its `.meta` companion.
pub fn write_dataset(path: &Path, examples: &[Example], cfg: Option<&GenConfig>) -> Result<()> {
    let mut body = String::with_capacity(examples.len() * 64);
    for ex in examples {
        writeln!(body, "{}\t{}", ex.source, ex.label).expect("write to String");
    }
    fs::write(path, body)?;

    let mut meta = String::new();
    let mut kv = |k: &str, v: String| writeln!(meta, "{k} = {v}").expect("write to String");
    if let Some(c) = cfg {
        kv("gen.min_length", c.min_length.to_string());
        kv("gen.max_length", c.max_length.to_string());
        kv("gen.min_depth", c.min_depth.to_string());
        kv("gen.max_depth", c.max_depth.to_string());
        kv("gen.min_args", c.min_args.to_string());
        kv("gen.max_args", c.max_args.to_string());
        kv(
            "gen.required_arity",
            c.required_arity.map_or("none".into(), |k| k.to_string()),
        );
        let ops: Vec<&str> = c.operators.iter().map(|o| o.name()).collect();
        kv("gen.operators", ops.join(","));
        kv("gen.nest_prob", c.nest_prob.to_string());
        kv("gen.count", c.count.to_string());
        kv("gen.seed", c.seed.to_string());
        kv("gen.median_rule", c.median_rule.to_string());
    }
    kv("realized.count", examples.len().to_string());
    let stat = |f: fn(&Example) -> usize| {
        let lo = examples.iter().map(f).min().unwrap_or(0);
        let hi = examples.iter().map(f).max().unwrap_or(0);
        format!("{lo}..{hi}")
    };
    kv("realized.length", stat(|e| e.meta.length));
    kv("realized.depth", stat(|e| e.meta.depth));
    kv("realized.max_args", stat(|e| e.meta.max_args));
    let mut hist = [0usize; 10];
    for ex in examples {
        hist[ex.label as usize] += 1;
    }
    kv("realized.label_counts", hist.map(|c| c.to_string()).join(","));
    fs::write(meta_path(path), meta)?;
    Ok(())
}

/// Reads a TSV dataset, re-deriving metadata and checking every label against the interpreter.
pub fn read_dataset(path: &Path, rule: MedianRule) -> Result<Vec<Example>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let (source, label) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(format!("{}:{}: expected source<TAB>label", path.display(), i + 1)))?;
            let label: u8 = label
                .trim()
                .parse()
                .map_err(|_| Error::parse(format!("{}:{}: bad label {label:?}", path.display(), i + 1)))?;
            let ex = Example::from_source(source, rule)?;
            if ex.label != label {
                return Err(Error::parse(format!(
                    "{}:{}: label {label} disagrees with evaluation {}",
                    path.display(),
                    i + 1,
                    ex.label
                )));
            }
            Ok(ex)
        })
        .collect()
}
