use rand::Rng;

use super::{ActionKind, BoundEncoder, Composer, Encoded, EncoderConfig};
use crate::autograd::Var;
use crate::cells::NodeState;
use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::topk::{self, merge_beams, BeamState, TopKVariant};
use crate::tree::{REDUCE, SHIFT};

struct Derivation<'t, T> {
    stack: Vec<NodeState<'t, T>>,
    next: usize,
    score: Var<'t, T>,
    actions: Vec<usize>,
}

/// Beam search over shift-reduce derivations.
///
/// At each step a beam reads `[stack[-2]; stack[-1]; queue[0]]` (missing
/// items are zero vectors) and computes `s = sigmoid(x·W + b)`. Reducing
/// scores `log s` and shifting scores `log(1 - s)`. An action that is not
/// available (reduce with fewer than two stack items, shift with an empty
/// queue) is pruned, and the remaining forced action then has probability
/// one, scoring 0. Every complete derivation takes `2n - 1` actions, so all
/// beams finish together and are merged like the beam tree cell's.
pub fn encode_bsrp<'t, T: Real, R: Rng + ?Sized>(
    enc: &BoundEncoder<'t, T>,
    cfg: &EncoderConfig,
    leaves: Var<'t, T>,
    rng: &mut R,
) -> Result<Encoded<'t, T>> {
    let (w, b) = enc
        .bsrp
        .ok_or_else(|| Error::config("encoder was built without shift-reduce parameters"))?;
    let queue = enc.leaves(leaves)?;
    let n = queue.len();
    let k = cfg.beam_size;
    let mode = cfg.topk_mode();
    let tape = leaves.tape();
    let zero = tape.zeros(1, enc.d_h);
    let zero_score = tape.scalar(T::zero())?;
    let mut composer = Composer::new(enc, cfg);
    let mut beams = vec![Derivation {
        stack: Vec::new(),
        next: 0,
        score: zero_score,
        actions: Vec::new(),
    }];

    for _ in 0..2 * n - 1 {
        let can_shift = |d: &Derivation<'t, T>| d.next < n;
        let can_reduce = |d: &Derivation<'t, T>| d.stack.len() >= 2;

        // decision log-probabilities for beams with a real choice
        let choosing: Vec<usize> = (0..beams.len())
            .filter(|&i| can_shift(&beams[i]) && can_reduce(&beams[i]))
            .collect();
        let mut log_probs: Vec<Option<Var<'t, T>>> = vec![None; beams.len()];
        if !choosing.is_empty() {
            let rows = choosing
                .iter()
                .map(|&i| {
                    let d = &beams[i];
                    let top = |back: usize| d.stack.len().checked_sub(back).map_or(zero, |j| d.stack[j].h);
                    let front = queue.get(d.next).map_or(zero, |x| x.h);
                    tape.concat(&[top(2), top(1), front], false)
                })
                .collect::<Result<Vec<_>>>()?;
            let logits = tape.concat(&rows, true)?.matmul(w)?.add_bias(b)?;
            // log_softmax([x, 0]) = [log σ(x), log(1 - σ(x))], computed stably
            let pairs = tape
                .concat(&[logits, tape.zeros(choosing.len(), 1)], false)?
                .log_softmax()?;
            for (r, &i) in choosing.iter().enumerate() {
                log_probs[i] = Some(if choosing.len() == 1 { pairs } else { pairs.row(r)? });
            }
        }

        composer.ensure(
            beams
                .iter()
                .filter(|d| can_reduce(d))
                .map(|d| (d.stack[d.stack.len() - 2], d.stack[d.stack.len() - 1])),
            false,
            rng,
        )?;

        let mut pool = Vec::with_capacity(2 * beams.len());
        for (d, lp) in beams.iter().zip(&log_probs) {
            let increment = |col: usize| -> Result<Var<'t, T>> {
                match lp {
                    Some(p) => p.elem(col),
                    None => Ok(zero_score),
                }
            };
            if can_shift(d) {
                let mut stack = d.stack.clone();
                stack.push(queue[d.next]);
                let mut actions = d.actions.clone();
                actions.push(SHIFT);
                pool.push(Derivation {
                    stack,
                    next: d.next + 1,
                    score: d.score.add(increment(1)?)?,
                    actions,
                });
            }
            if can_reduce(d) {
                let mut stack = d.stack.clone();
                let r = stack.pop().expect("two items");
                let l = stack.pop().expect("two items");
                stack.push(composer.get(&l, &r).node);
                let mut actions = d.actions.clone();
                actions.push(REDUCE);
                pool.push(Derivation {
                    stack,
                    next: d.next,
                    score: d.score.add(increment(0)?)?,
                    actions,
                });
            }
        }
        beams = truncate(pool, k, cfg, rng, mode)?;
    }

    let finals: Vec<BeamState<'t, T>> = beams
        .into_iter()
        .map(|d| BeamState {
            nodes: d.stack,
            score: d.score,
            actions: d.actions,
        })
        .collect();
    let roots: Vec<Var<'t, T>> = finals.iter().map(|b| b.nodes[0].h).collect();
    let scores: Vec<Var<'t, T>> = finals.iter().map(|b| b.score).collect();
    Ok(Encoded {
        vector: merge_beams(&roots, &scores)?,
        beams: finals,
        action_kind: ActionKind::ShiftReduce,
    })
}

fn truncate<'t, T: Real, R: Rng + ?Sized>(
    pool: Vec<Derivation<'t, T>>,
    k: usize,
    cfg: &EncoderConfig,
    rng: &mut R,
    mode: topk::TopKMode,
) -> Result<Vec<Derivation<'t, T>>> {
    debug_assert_eq!(cfg.effective_topk(), TopKVariant::Plain);
    let scores: Vec<f64> = pool.iter().map(|d| d.score.item().to_f64()).collect();
    let keep = topk::plain_topk(&scores, k, mode, rng)?;
    let mut slots: Vec<Option<Derivation<'t, T>>> = pool.into_iter().map(Some).collect();
    Ok(keep
        .into_iter()
        .map(|i| slots[i].take().expect("distinct indices"))
        .collect())
}
