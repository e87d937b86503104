//! ListOps: nested prefix expressions over MAX, MIN, MED and SM (sum mod 10).
//!
//! Sources are space-separated tokens in the usual ListOps convention, with the
//! opening bracket fused to the operator: `[MAX 2 [MIN 8 3 ] 1 ]`.

mod generate;
mod splits;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::ParseTree;

pub use generate::{generate, Example, ExampleMeta, GenConfig};
pub use splits::{build_splits, read_dataset, write_dataset, SplitFiles, SplitKind, SplitParams, SplitPlan};

/// Token vocabulary, in id order.
pub const VOCAB: [&str; 15] = [
    "[MAX", "[MIN", "[MED", "[SM", "]", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
];
pub const CLOSE_ID: usize = 4;
pub const DIGIT_BASE: usize = 5;
pub const NUM_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operator {
    Max,
    Min,
    Med,
    Sm,
}

impl Operator {
    pub const ALL: [Operator; 4] = [Operator::Max, Operator::Min, Operator::Med, Operator::Sm];

    pub fn token(self) -> &'static str {
        VOCAB[self.id()]
    }

    pub fn id(self) -> usize {
        match self {
            Operator::Max => 0,
            Operator::Min => 1,
            Operator::Med => 2,
            Operator::Sm => 3,
        }
    }

    fn from_token(tok: &str) -> Option<Self> {
        Operator::ALL.into_iter().find(|op| op.token() == tok)
    }

    pub fn name(self) -> &'static str {
        &self.token()[1..]
    }
}

impl FromStr for Operator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim_start_matches('[').to_ascii_uppercase();
        Operator::ALL
            .into_iter()
            .find(|op| op.name() == upper)
            .ok_or_else(|| Error::parse(format!("unknown operator {s:?}")))
    }
}

/// How MED resolves an even number of arguments.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MedianRule {
    /// Lower of the two middle values.
    #[default]
    Lower,
    /// Upper of the two middle values.
    Upper,
    /// Floor of the mean of the two middle values.
    MeanFloor,
}

impl FromStr for MedianRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lower" => Ok(MedianRule::Lower),
            "upper" => Ok(MedianRule::Upper),
            "mean_floor" => Ok(MedianRule::MeanFloor),
            other => Err(Error::config(format!("unknown median rule {other:?}"))),
        }
    }
}

impl fmt::Display for MedianRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MedianRule::Lower => "lower",
            MedianRule::Upper => "upper",
            MedianRule::MeanFloor => "mean_floor",
        })
    }
}

impl Operator {
    pub fn apply(self, args: &[u8], rule: MedianRule) -> u8 {
        debug_assert!(!args.is_empty());
        match self {
            Operator::Max => *args.iter().max().unwrap(),
            Operator::Min => *args.iter().min().unwrap(),
            Operator::Sm => (args.iter().map(|&a| a as u32).sum::<u32>() % 10) as u8,
            Operator::Med => {
                let mut sorted = args.to_vec();
                sorted.sort_unstable();
                let n = sorted.len();
                if n % 2 == 1 {
                    sorted[n / 2]
                } else {
                    let (lo, hi) = (sorted[n / 2 - 1], sorted[n / 2]);
                    match rule {
                        MedianRule::Lower => lo,
                        MedianRule::Upper => hi,
                        MedianRule::MeanFloor => (lo + hi) / 2,
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Expr {
    Digit(u8),
    Op(Operator, Vec<Expr>),
}

impl Expr {
    pub fn eval(&self, rule: MedianRule) -> u8 {
        match self {
            Expr::Digit(d) => *d,
            Expr::Op(op, args) => {
                let vals: Vec<u8> = args.iter().map(|a| a.eval(rule)).collect();
                op.apply(&vals, rule)
            }
        }
    }

    /// Maximum number of nested operators.
    pub fn depth(&self) -> usize {
        match self {
            Expr::Digit(_) => 0,
            Expr::Op(_, args) => 1 + args.iter().map(Expr::depth).max().unwrap_or(0),
        }
    }

    pub fn token_len(&self) -> usize {
        match self {
            Expr::Digit(_) => 1,
            Expr::Op(_, args) => 2 + args.iter().map(Expr::token_len).sum::<usize>(),
        }
    }

    /// Largest operator arity anywhere in the expression.
    pub fn max_args(&self) -> usize {
        match self {
            Expr::Digit(_) => 0,
            Expr::Op(_, args) => args.iter().map(Expr::max_args).max().unwrap_or(0).max(args.len()),
        }
    }

    pub fn has_arity(&self, k: usize) -> bool {
        match self {
            Expr::Digit(_) => false,
            Expr::Op(_, args) => args.len() == k || args.iter().any(|a| a.has_arity(k)),
        }
    }

    pub fn parse(source: &str) -> Result<Expr> {
        let toks: Vec<&str> = source.split_whitespace().collect();
        let mut pos = 0;
        let expr = parse_expr(&toks, &mut pos)?;
        if pos != toks.len() {
            return Err(Error::parse(format!("trailing tokens after expression at {pos}")));
        }
        Ok(expr)
    }
}

fn parse_expr(toks: &[&str], pos: &mut usize) -> Result<Expr> {
    let tok = *toks
        .get(*pos)
        .ok_or_else(|| Error::parse("unexpected end of expression"))?;
    *pos += 1;
    if let Some(op) = Operator::from_token(tok) {
        let mut args = Vec::new();
        loop {
            match toks.get(*pos) {
                None => return Err(Error::parse(format!("unclosed {tok}"))),
                Some(&"]") => {
                    *pos += 1;
                    break;
                }
                Some(_) => args.push(parse_expr(toks, pos)?),
            }
        }
        if args.is_empty() {
            return Err(Error::parse(format!("{tok} has no arguments")));
        }
        Ok(Expr::Op(op, args))
    } else if tok == "]" {
        Err(Error::parse("unbalanced ']'"))
    } else if let Some(d) = digit(tok) {
        Ok(Expr::Digit(d))
    } else {
        Err(Error::parse(format!("unknown token {tok:?}")))
    }
}

fn digit(tok: &str) -> Option<u8> {
    match tok.as_bytes() {
        [b @ b'0'..=b'9'] => Some(b - b'0'),
        _ => None,
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Digit(d) => write!(f, "{d}"),
            Expr::Op(op, args) => {
                f.write_str(op.token())?;
                for a in args {
                    write!(f, " {a}")?;
                }
                f.write_str(" ]")
            }
        }
    }
}

/// Evaluates a source string with the default (lower) median rule.
pub fn eval_listops(source: &str) -> Result<u8> {
    eval_with(source, MedianRule::Lower)
}

pub fn eval_with(source: &str, rule: MedianRule) -> Result<u8> {
    Ok(Expr::parse(source)?.eval(rule))
}

pub fn tokenize(source: &str) -> Result<Vec<usize>> {
    source
        .split_whitespace()
        .map(|t| {
            VOCAB
                .iter()
                .position(|v| *v == t)
                .ok_or_else(|| Error::parse(format!("unknown token {t:?}")))
        })
        .collect()
}

pub fn detokenize(ids: &[usize]) -> Result<String> {
    let words = ids
        .iter()
        .map(|&i| {
            VOCAB
                .get(i)
                .copied()
                .ok_or_else(|| Error::parse(format!("unknown token id {i}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(words.join(" "))
}

/// Gold tree: within each operator scope, a left-branching chain over
/// `(operator, arg_1, ..., arg_j, ])`, where nested scopes are their own subtrees.
pub fn gold_tree<S: AsRef<str>>(tokens: &[S]) -> Result<ParseTree> {
    let n = tokens.len();
    if n == 0 {
        return Err(Error::Empty("gold tree"));
    }
    let mut merges = Vec::with_capacity(n - 1);
    let mut pos = 0;
    gold_scope(tokens, &mut pos, &mut merges)?;
    if pos != n {
        return Err(Error::parse("trailing tokens after expression"));
    }
    ParseTree::from_merges(n, merges)
}

fn gold_scope<S: AsRef<str>>(tokens: &[S], pos: &mut usize, merges: &mut Vec<(usize, usize)>) -> Result<usize> {
    let n = tokens.len();
    let tok = tokens
        .get(*pos)
        .ok_or_else(|| Error::parse("unexpected end of expression"))?
        .as_ref();
    let start = *pos;
    *pos += 1;
    if Operator::from_token(tok).is_some() {
        let mut cur = start;
        let mut nargs = 0;
        loop {
            let next = tokens
                .get(*pos)
                .ok_or_else(|| Error::parse(format!("unclosed {tok}")))?
                .as_ref();
            let child = if next == "]" {
                if nargs == 0 {
                    return Err(Error::parse(format!("{tok} has no arguments")));
                }
                *pos += 1;
                *pos - 1
            } else {
                nargs += 1;
                gold_scope(tokens, pos, merges)?
            };
            merges.push((cur, child));
            cur = n + merges.len() - 1;
            if next == "]" {
                return Ok(cur);
            }
        }
    } else if digit(tok).is_some() {
        Ok(start)
    } else if tok == "]" {
        Err(Error::parse("unbalanced ']'"))
    } else {
        Err(Error::parse(format!("unknown token {tok:?}")))
    }
}
