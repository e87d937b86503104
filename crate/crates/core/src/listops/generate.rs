use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Expr, MedianRule, Operator};
use crate::error::{Error, Result};
use crate::rng;

/// Bounds and sampling knobs for one generated set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub min_length: usize,
    pub max_length: usize,
    pub min_depth: usize,
    pub max_depth: usize,
    pub min_args: usize,
    pub max_args: usize,
    /// When set, every example contains an operator with exactly this many arguments.
    pub required_arity: Option<usize>,
    pub operators: Vec<Operator>,
    /// Probability that an argument is a nested operator (0 at `max_depth`).
    pub nest_prob: f64,
    pub count: usize,
    pub seed: u64,
    pub median_rule: MedianRule,
    /// Rejection-sampling budget per example before the config is declared unsatisfiable.
    pub max_attempts: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            min_length: 1,
            max_length: 100,
            min_depth: 1,
            max_depth: 6,
            min_args: 2,
            max_args: 5,
            required_arity: None,
            operators: Operator::ALL.to_vec(),
            nest_prob: 0.5,
            count: 1000,
            seed: 0,
            median_rule: MedianRule::Lower,
            max_attempts: 200_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub length: usize,
    pub depth: usize,
    pub max_args: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub source: String,
    pub label: u8,
    pub meta: ExampleMeta,
}

impl Example {
    pub fn from_source(source: &str, rule: MedianRule) -> Result<Self> {
        let expr = Expr::parse(source)?;
        Ok(Example::from_expr(&expr, rule))
    }

    fn from_expr(expr: &Expr, rule: MedianRule) -> Self {
        Example {
            source: expr.to_string(),
            label: expr.eval(rule),
            meta: ExampleMeta {
                length: expr.token_len(),
                depth: expr.depth(),
                max_args: expr.max_args(),
            },
        }
    }
}

impl GenConfig {
    /// Longest expression the depth/arity bounds permit (ignoring `max_length`).
    fn longest_possible(&self) -> usize {
        let mut len = 1usize;
        for _ in 0..self.max_depth {
            len = len.saturating_mul(self.max_args).saturating_add(2);
        }
        len
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.min_args == 0 || self.min_args > self.max_args {
            return fail(format!(
                "need 1 <= min_args <= max_args, got {}..{}",
                self.min_args, self.max_args
            ));
        }
        if self.max_depth == 0 || self.min_depth > self.max_depth {
            return fail(format!(
                "need 1 <= max_depth and min_depth <= max_depth, got {}..{}",
                self.min_depth, self.max_depth
            ));
        }
        if !(0.0..=1.0).contains(&self.nest_prob) {
            return fail(format!("nest_prob {} outside [0, 1]", self.nest_prob));
        }
        if self.operators.is_empty() {
            return fail("operator set is empty".into());
        }
        if let Some(k) = self.required_arity {
            if k < self.min_args || k > self.max_args {
                return fail(format!(
                    "required arity {k} outside {}..{}",
                    self.min_args, self.max_args
                ));
            }
        }
        if self.min_length > self.max_length {
            return fail(format!(
                "min_length {} > max_length {}",
                self.min_length, self.max_length
            ));
        }
        let shortest = 2 + self.required_arity.unwrap_or(self.min_args).max(self.min_args);
        if self.max_length < shortest + 2 * (self.min_depth - 1) {
            return fail(format!(
                "max_length {} cannot hold the smallest expression of depth {}",
                self.max_length, self.min_depth
            ));
        }
        if self.min_depth > 1 && self.nest_prob == 0.0 {
            return fail("min_depth > 1 requires nest_prob > 0".into());
        }
        let longest = if self.nest_prob == 0.0 {
            2 + self.max_args
        } else {
            self.longest_possible()
        };
        if self.min_length > longest {
            return fail(format!(
                "min_length {} exceeds the longest possible expression ({longest})",
                self.min_length
            ));
        }
        Ok(())
    }

    fn accepts(&self, expr: &Expr) -> bool {
        let len = expr.token_len();
        let depth = expr.depth();
        len >= self.min_length
            && len <= self.max_length
            && depth >= self.min_depth
            && depth <= self.max_depth
            && self.required_arity.is_none_or(|k| expr.has_arity(k))
    }
}

/// Draws one operator expression top-down. Returns `None` as soon as the
/// partial expression exceeds `budget` tokens.
fn draw<R: Rng + ?Sized>(cfg: &GenConfig, depth: usize, budget: &mut isize, rng: &mut R) -> Option<Expr> {
    let op = *cfg.operators.choose(rng).expect("non-empty operator set");
    let arity = rng.gen_range(cfg.min_args..=cfg.max_args);
    *budget -= 2;
    if *budget < 0 {
        return None;
    }
    let mut args = Vec::with_capacity(arity);
    for _ in 0..arity {
        if depth < cfg.max_depth && rng.gen::<f64>() < cfg.nest_prob {
            args.push(draw(cfg, depth + 1, budget, rng)?);
        } else {
            *budget -= 1;
            if *budget < 0 {
                return None;
            }
            args.push(Expr::Digit(rng.gen_range(0..10)));
        }
    }
    Some(Expr::Op(op, args))
}

/// Generates `cfg.count` distinct examples satisfying every bound in `cfg`.
/// Sources listed in `exclude` are never emitted.
pub fn generate_excluding(cfg: &GenConfig, exclude: &HashSet<String>) -> Result<Vec<Example>> {
    cfg.validate()?;
    let mut seen: HashSet<String> = HashSet::with_capacity(cfg.count);
    let mut out = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let mut stream = rng::stream(cfg.seed, i as u64);
        let mut attempts = 0;
        let ex = loop {
            attempts += 1;
            if attempts > cfg.max_attempts {
                return Err(Error::config(format!(
                    "no example satisfying the bounds after {} attempts (example {i})",
                    cfg.max_attempts
                )));
            }
            let mut budget = cfg.max_length as isize;
            let Some(expr) = draw(cfg, 1, &mut budget, &mut stream) else {
                continue;
            };
            if !cfg.accepts(&expr) {
                continue;
            }
            let ex = Example::from_expr(&expr, cfg.median_rule);
            if exclude.contains(&ex.source) || seen.contains(&ex.source) {
                continue;
            }
            break ex;
        };
        seen.insert(ex.source.clone());
        out.push(ex);
    }
    Ok(out)
}

pub fn generate(cfg: &GenConfig) -> Result<Vec<Example>> {
    generate_excluding(cfg, &HashSet::new())
}
