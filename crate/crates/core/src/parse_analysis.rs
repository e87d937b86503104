//! Post-processing of encoder hypotheses: per-beam parse trees, duplicate
//! collapsing, and agreement with a reference tree.

use std::collections::{BTreeSet, HashMap};

use serde::Serialize;

use crate::encoders::Encoded;
use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::tree::ParseTree;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BeamParse {
    /// Bracketed tree over the input tokens, e.g. `((a b) c)`.
    pub tree: String,
    /// Softmax of the beam score over the beam set.
    pub probability: f64,
    pub actions: Vec<usize>,
}

impl BeamParse {
    /// Re-reads the bracketed string into a tree.
    pub fn parse_tree(&self) -> Result<ParseTree> {
        Ok(ParseTree::parse_bracketed(&self.tree)?.0)
    }
}

/// Numerically stable softmax of plain numbers.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Replays every beam's action history into a tree over `tokens` and attaches
/// the softmaxed beam scores. Fails if a history does not reduce the input to
/// a single node.
pub fn extract_parses<T: Real, S: AsRef<str>>(encoded: &Encoded<'_, T>, tokens: &[S]) -> Result<Vec<BeamParse>> {
    let trees = encoded.trees(tokens.len())?;
    let scores: Vec<f64> = encoded.beams.iter().map(|b| b.score_value()).collect();
    trees
        .iter()
        .zip(softmax(&scores))
        .zip(&encoded.beams)
        .map(|((tree, probability), beam)| {
            Ok(BeamParse {
                tree: tree.to_bracketed(tokens)?,
                probability,
                actions: beam.actions.clone(),
            })
        })
        .collect()
}

/// Merges parses with identical tree strings, summing their probabilities,
/// and sorts by probability (descending; ties by tree string). A merged entry
/// keeps the action history of its first occurrence.
pub fn collapse_duplicates(parses: Vec<BeamParse>) -> Vec<BeamParse> {
    let mut slot: HashMap<String, usize> = HashMap::new();
    let mut out: Vec<BeamParse> = Vec::new();
    for p in parses {
        match slot.get(&p.tree) {
            Some(&i) => out[i].probability += p.probability,
            None => {
                slot.insert(p.tree.clone(), out.len());
                out.push(p);
            }
        }
    }
    out.sort_by(|a, b| {
        b.probability
            .total_cmp(&a.probability)
            .then_with(|| a.tree.cmp(&b.tree))
    });
    out
}

/// Unlabelled bracketing F1 over internal-node spans. The full span is
/// counted, since every binary tree contains it.
pub fn tree_agreement(pred: &ParseTree, gold: &ParseTree) -> Result<f64> {
    if pred.n_leaves() != gold.n_leaves() {
        return Err(Error::Shape {
            op: "tree_agreement",
            detail: format!("{} vs {} leaves", pred.n_leaves(), gold.n_leaves()),
        });
    }
    let p: BTreeSet<(usize, usize)> = pred.internal_spans().into_iter().collect();
    let g: BTreeSet<(usize, usize)> = gold.internal_spans().into_iter().collect();
    if p.is_empty() && g.is_empty() {
        // single leaf: no brackets on either side
        return Ok(1.0);
    }
    let shared = p.intersection(&g).count() as f64;
    let precision = shared / p.len() as f64;
    let recall = shared / g.len() as f64;
    Ok(if shared == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Summary of one input's beam set.
#[derive(Clone, Debug, Serialize)]
pub struct ParseReport {
    pub parses: Vec<BeamParse>,
    /// Entropy (nats) of the collapsed structure distribution.
    pub entropy: f64,
    /// F1 of the most probable structure against the reference, when given.
    pub top_f1: Option<f64>,
    /// Probability-weighted F1 against the reference, when given.
    pub expected_f1: Option<f64>,
}

pub fn report(parses: Vec<BeamParse>, gold: Option<&ParseTree>) -> Result<ParseReport> {
    let parses = collapse_duplicates(parses);
    let entropy = -parses
        .iter()
        .filter(|p| p.probability > 0.0)
        .map(|p| p.probability * p.probability.ln())
        .sum::<f64>();
    let (top_f1, expected_f1) = match gold {
        Some(g) => {
            let f1s = parses
                .iter()
                .map(|p| tree_agreement(&p.parse_tree()?, g))
                .collect::<Result<Vec<_>>>()?;
            let expected = parses.iter().zip(&f1s).map(|(p, f)| p.probability * f).sum();
            (f1s.first().copied(), Some(expected))
        }
        None => (None, None),
    };
    Ok(ParseReport {
        parses,
        entropy,
        top_f1,
        expected_f1,
    })
}
