use rand::Rng;

use super::{ActionKind, BoundEncoder, Composer, Encoded, EncoderConfig};
use crate::autograd::Var;
use crate::error::Result;
use crate::tensor::Real;
use crate::topk::{self, merge_beams, plain_topk, BeamState};

/// Beam tree cell.
///
/// Each round, every beam scores all of its adjacent candidate parents,
/// turns the scores into log-probabilities with a log-softmax, and branches
/// on its `k` best candidates; a branch's score is the parent beam's score
/// plus the chosen log-probability. The pooled branches (up to `k²`) are cut
/// back to `k` with the configured top-k operator. Once two nodes remain each
/// beam composes them without changing its score. The encoding is the
/// softmax-of-scores weighted sum of the beams' roots.
///
/// Beams that reach the same structure through different action orders are
/// kept as separate hypotheses.
pub fn encode_bt_cell<'t, T: Real, R: Rng + ?Sized>(
    enc: &BoundEncoder<'t, T>,
    cfg: &EncoderConfig,
    leaves: Var<'t, T>,
    rng: &mut R,
) -> Result<Encoded<'t, T>> {
    let k = cfg.beam_size;
    let mode = cfg.topk_mode();
    let variant = cfg.effective_topk();
    let tape = leaves.tape();
    let mut composer = Composer::new(enc, cfg);
    let mut beams = vec![BeamState {
        nodes: enc.leaves(leaves)?,
        score: tape.scalar(T::zero())?,
        actions: Vec::new(),
    }];

    loop {
        let len = beams[0].nodes.len();
        if len == 1 {
            break;
        }
        if len == 2 {
            composer.ensure(beams.iter().map(|b| (b.nodes[0], b.nodes[1])), false, rng)?;
            for b in &mut beams {
                let root = composer.get(&b.nodes[0], &b.nodes[1]).node;
                b.nodes = vec![root];
                b.actions.push(0);
            }
            break;
        }

        composer.ensure(
            beams.iter().flat_map(|b| b.nodes.windows(2).map(|w| (w[0], w[1]))),
            true,
            rng,
        )?;
        let mut pool = Vec::with_capacity(beams.len() * k.min(len - 1));
        for beam in &beams {
            let log_probs = composer.candidate_scores(&beam.nodes)?.log_softmax()?;
            let values: Vec<f64> = log_probs.to_vec().iter().map(|x| x.to_f64()).collect();
            for j in plain_topk(&values, k, mode, rng)? {
                let parent = composer.get(&beam.nodes[j], &beam.nodes[j + 1]).node;
                let mut nodes = Vec::with_capacity(len - 1);
                nodes.extend_from_slice(&beam.nodes[..j]);
                nodes.push(parent);
                nodes.extend_from_slice(&beam.nodes[j + 2..]);
                let mut actions = beam.actions.clone();
                actions.push(j);
                pool.push(BeamState {
                    nodes,
                    score: beam.score.add(log_probs.elem(j)?)?,
                    actions,
                });
            }
        }
        beams = topk::truncate(pool, k, variant, mode, rng)?;
    }

    let roots: Vec<Var<'t, T>> = beams.iter().map(|b| b.nodes[0].h).collect();
    let scores: Vec<Var<'t, T>> = beams.iter().map(|b| b.score).collect();
    Ok(Encoded {
        vector: merge_beams(&roots, &scores)?,
        beams,
        action_kind: ActionKind::EasyFirst,
    })
}
