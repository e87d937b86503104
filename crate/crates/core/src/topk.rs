//! Beam truncation: plain top-k (deterministic or Gumbel-perturbed), OneSoft
//! top-k, and the final softmax-weighted merge of beam encodings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::cells::NodeState;
use crate::error::{Error, Result};
use crate::tensor::Real;

/// How plain top-k ranks its inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopKMode {
    Deterministic,
    /// Rank by `score + Gumbel(0, 1)` noise, which samples without replacement
    /// from `softmax(scores)`.
    Gumbel,
}

/// Which operator truncates the beam pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopKVariant {
    Plain,
    OneSoft,
}

impl std::str::FromStr for TopKVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(TopKVariant::Plain),
            "onesoft" | "one_soft" => Ok(TopKVariant::OneSoft),
            other => Err(Error::config(format!("unknown top-k variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for TopKVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TopKVariant::Plain => "plain",
            TopKVariant::OneSoft => "onesoft",
        })
    }
}

/// One draw of standard Gumbel noise, `-ln(-ln u)`.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // open interval keeps both logarithms finite
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Indices of the `k` largest values, best first; ties go to the lower index.
/// Asking for more than are available returns all of them.
pub fn rank_desc(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // stable sort keeps lower indices first among equal values
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx.truncate(k);
    idx
}

/// Plain top-k selection over raw scores.
pub fn plain_topk<R: Rng + ?Sized>(scores: &[f64], k: usize, mode: TopKMode, rng: &mut R) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::Empty("plain_topk"));
    }
    if k == 0 {
        return Err(Error::config("top-k needs k >= 1"));
    }
    Ok(match mode {
        TopKMode::Deterministic => rank_desc(scores, k),
        TopKMode::Gumbel => {
            let noisy: Vec<f64> = scores.iter().map(|&s| s + gumbel(rng)).collect();
            rank_desc(&noisy, k)
        }
    })
}

/// One hypothesis: a partially reduced node sequence, its accumulated
/// log-probability, and the merge (or transition) actions that produced it.
#[derive(Clone, Debug)]
pub struct BeamState<'t, T> {
    pub nodes: Vec<NodeState<'t, T>>,
    pub score: Var<'t, T>,
    pub actions: Vec<usize>,
}

impl<'t, T: Real> BeamState<'t, T> {
    pub fn score_value(&self) -> f64 {
        self.score.item().to_f64()
    }
}

fn score_values<T: Real>(beams: &[BeamState<'_, T>]) -> Vec<f64> {
    beams.iter().map(BeamState::score_value).collect()
}

/// Keeps the beams at `idx`, in that order.
pub fn select<'t, T: Real>(beams: &[BeamState<'t, T>], idx: &[usize]) -> Vec<BeamState<'t, T>> {
    idx.iter().map(|&i| beams[i].clone()).collect()
}

/// Plain top-k truncation of a beam pool.
pub fn plain_topk_beams<'t, T: Real, R: Rng + ?Sized>(
    beams: Vec<BeamState<'t, T>>,
    k: usize,
    mode: TopKMode,
    rng: &mut R,
) -> Result<Vec<BeamState<'t, T>>> {
    let idx = plain_topk(&score_values(&beams), k, mode, rng)?;
    Ok(select(&beams, &idx))
}

/// Softmax-weighted average of row vectors: `softmax(w)·[v_1; ...; v_b]`.
/// When every `v_i` is the same recorded value it is returned as is, which is
/// the same function (the weights sum to one) with a smaller graph.
fn interpolate<'t, T: Real>(weights: Var<'t, T>, rows: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    if rows.iter().all(|r| r.id() == rows[0].id()) {
        return Ok(rows[0]);
    }
    weights.matmul(weights.tape().concat(rows, true)?)
}

/// OneSoft top-k: the best `k-1` beams are kept as they are and the rest are
/// collapsed into one beam whose nodes and score are averages weighted by
/// `softmax` of the bottom scores. Node memories follow the same weights.
/// The collapsed beam reports the action history of its heaviest member.
pub fn onesoft_topk<'t, T: Real, R: Rng + ?Sized>(
    beams: Vec<BeamState<'t, T>>,
    k: usize,
    mode: TopKMode,
    rng: &mut R,
) -> Result<Vec<BeamState<'t, T>>> {
    let m = beams.len();
    if k < 2 {
        return Err(Error::config(format!("OneSoft top-k needs k >= 2, got {k}")));
    }
    if k > m {
        return Err(Error::config(format!("OneSoft top-k with k = {k} > m = {m} beams")));
    }
    let len = beams[0].nodes.len();
    if beams.iter().any(|b| b.nodes.len() != len) {
        return Err(Error::shape("onesoft_topk", "beams have different sequence lengths"));
    }
    let order = plain_topk(&score_values(&beams), m, mode, rng)?;
    let (top, bottom) = order.split_at(k - 1);
    let mut out = select(&beams, top);
    if bottom.len() == 1 {
        out.push(beams[bottom[0]].clone());
        return Ok(out);
    }

    let tape = beams[0].score.tape();
    let scores: Vec<Var<'t, T>> = bottom.iter().map(|&i| beams[i].score).collect();
    let w = tape.concat(&scores, false)?.softmax()?;
    let score = w.matmul(tape.concat(&scores, true)?)?;
    let heaviest = {
        let wv = w.to_vec();
        bottom[rank_desc(&wv.iter().map(|x| x.to_f64()).collect::<Vec<_>>(), 1)[0]]
    };
    let mut nodes = Vec::with_capacity(len);
    for j in 0..len {
        let hs: Vec<Var<'t, T>> = bottom.iter().map(|&i| beams[i].nodes[j].h).collect();
        let h = interpolate(w, &hs)?;
        let c = match beams[bottom[0]].nodes[j].c {
            None => None,
            Some(_) => {
                let cs = bottom
                    .iter()
                    .map(|&i| {
                        beams[i].nodes[j]
                            .c
                            .ok_or_else(|| Error::shape("onesoft_topk", "missing cell memory"))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(interpolate(w, &cs)?)
            }
        };
        nodes.push(NodeState::new(h, c));
    }
    out.push(BeamState {
        nodes,
        score,
        actions: beams[heaviest].actions.clone(),
    });
    Ok(out)
}

/// Truncates a pool to `k` beams with the chosen operator. OneSoft falls back
/// to plain selection when the pool already fits.
pub fn truncate<'t, T: Real, R: Rng + ?Sized>(
    beams: Vec<BeamState<'t, T>>,
    k: usize,
    variant: TopKVariant,
    mode: TopKMode,
    rng: &mut R,
) -> Result<Vec<BeamState<'t, T>>> {
    match variant {
        TopKVariant::OneSoft if beams.len() > k && k >= 2 => onesoft_topk(beams, k, mode, rng),
        _ => plain_topk_beams(beams, k, mode, rng),
    }
}

/// `Σ softmax(scores)_i · o_i` over `k` encodings.
pub fn merge_beams<'t, T: Real>(encodings: &[Var<'t, T>], scores: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    if encodings.len() != scores.len() {
        return Err(Error::shape(
            "merge_beams",
            format!("{} encodings and {} scores", encodings.len(), scores.len()),
        ));
    }
    let first = encodings.first().ok_or(Error::Empty("merge_beams"))?;
    if encodings.len() == 1 {
        return Ok(*first);
    }
    let tape = first.tape();
    let w = tape.concat(scores, false)?.softmax()?;
    w.matmul(tape.concat(encodings, true)?)
}
