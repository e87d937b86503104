use rand::Rng;

use super::{single, ActionKind, BoundEncoder, Composer, Encoded, EncoderConfig};
use crate::autograd::Var;
use crate::cells::NodeState;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::topk::{gumbel, rank_desc, BeamState};

/// Greedy easy-first composition. Each round composes every adjacent pair,
/// scores the candidates and commits one merge.
///
/// In training the choice is the argmax of Gumbel-perturbed scores (noise only
/// when `cfg.stochastic`), applied as a straight-through one-hot over the
/// stacked candidates: the forward pass picks exactly one parent, the backward
/// pass sees `softmax((scores + noise) / temperature)`. Evaluation uses the
/// plain argmax. Ties go to the leftmost candidate.
pub fn encode_easy_first_gumbel<'t, T: Real, R: Rng + ?Sized>(
    enc: &BoundEncoder<'t, T>,
    cfg: &EncoderConfig,
    leaves: Var<'t, T>,
    rng: &mut R,
) -> Result<Encoded<'t, T>> {
    let mut composer = Composer::new(enc, cfg);
    easy_first(&mut composer, cfg, enc.leaves(leaves)?, rng)
}

fn easy_first<'t, T: Real, R: Rng + ?Sized>(
    composer: &mut Composer<'_, 't, T>,
    cfg: &EncoderConfig,
    mut nodes: Vec<NodeState<'t, T>>,
    rng: &mut R,
) -> Result<Encoded<'t, T>> {
    let tape = nodes[0].h.tape();
    let mut actions = Vec::with_capacity(nodes.len().saturating_sub(1));
    loop {
        match nodes.len() {
            1 => return single(nodes[0], actions),
            2 => {
                let root = composer.compose(nodes[0], nodes[1], rng)?;
                actions.push(0);
                return single(root, actions);
            }
            _ => {}
        }
        composer.ensure(nodes.windows(2).map(|w| (w[0], w[1])), true, rng)?;
        let raw = composer.candidate_scores(&nodes)?;
        let values: Vec<f64> = raw.to_vec().iter().map(|x| x.to_f64()).collect();

        let (j, parent) = if cfg.training {
            let (perturbed, noisy) = if cfg.stochastic {
                let noise: Vec<f64> = values.iter().map(|_| gumbel(rng)).collect();
                let nv = tape.constant(&Tensor::new(
                    vec![1, noise.len()],
                    noise.iter().map(|&g| T::from_f64(g)).collect(),
                )?)?;
                let p: Vec<f64> = values.iter().zip(&noise).map(|(s, g)| s + g).collect();
                (p, raw.add(nv)?)
            } else {
                (values.clone(), raw)
            };
            let j = rank_desc(&perturbed, 1)[0];
            let soft = noisy.scale(T::from_f64(1.0 / cfg.temperature))?.softmax()?;
            let sel = soft.straight_through(j)?;
            let cands: Vec<NodeState<'t, T>> = nodes.windows(2).map(|w| composer.get(&w[0], &w[1]).node).collect();
            let h = sel.matmul(tape.concat(&cands.iter().map(|c| c.h).collect::<Vec<_>>(), true)?)?;
            let c = match cands[0].c {
                None => None,
                Some(_) => {
                    let cs = cands.iter().map(|c| c.c.expect("memory cell")).collect::<Vec<_>>();
                    Some(sel.matmul(tape.concat(&cs, true)?)?)
                }
            };
            (j, NodeState::new(h, c))
        } else {
            let j = rank_desc(&values, 1)[0];
            (j, composer.get(&nodes[j], &nodes[j + 1]).node)
        };
        nodes[j] = parent;
        nodes.remove(j + 1);
        actions.push(j);
    }
}

/// Averages `samples` independent easy-first passes that share parameters
/// and compositions but draw their own noise.
pub fn encode_mc_gumbel<'t, T: Real, R: Rng + ?Sized>(
    enc: &BoundEncoder<'t, T>,
    cfg: &EncoderConfig,
    leaves: Var<'t, T>,
    samples: usize,
    rng: &mut R,
) -> Result<Encoded<'t, T>> {
    if samples == 0 {
        return Err(Error::config("Monte-Carlo Gumbel needs at least one sample"));
    }
    let nodes = enc.leaves(leaves)?;
    let tape = leaves.tape();
    let mut composer = Composer::new(enc, cfg);
    let mut beams: Vec<BeamState<'t, T>> = Vec::with_capacity(samples);
    for _ in 0..samples {
        beams.extend(easy_first(&mut composer, cfg, nodes.clone(), rng)?.beams);
    }
    let vector = if samples == 1 {
        beams[0].nodes[0].h
    } else {
        let w = tape.constant(&Tensor::full(&[1, samples], T::from_f64(1.0 / samples as f64)))?;
        w.matmul(tape.concat(&beams.iter().map(|b| b.nodes[0].h).collect::<Vec<_>>(), true)?)?
    };
    Ok(Encoded {
        vector,
        beams,
        action_kind: ActionKind::EasyFirst,
    })
}

#[cfg(test)]
mod tests {
    use super::super::test_support::fixture;
    use super::super::{encode_fixed_tree, EncoderKind};
    use super::*;
    use crate::autograd::Tape;
    use crate::tree::ParseTree;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(kind: EncoderKind) -> EncoderConfig {
        EncoderConfig {
            kind,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn two_leaves_compose_directly() {
        let c = cfg(EncoderKind::GumbelTree);
        let f = fixture(&c, 2, 8, 1);
        let tape = Tape::new();
        let enc = f.params.bind(&f.store, &tape).unwrap();
        let leaves = tape.var(&f.leaves).unwrap();
        let out = encode_easy_first_gumbel(&enc, &c.train(), leaves, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let nodes = enc.leaves(leaves).unwrap();
        let direct = enc.cell.compose(nodes[0], nodes[1], None::<&mut ChaCha8Rng>).unwrap();
        assert_eq!(out.vector.to_vec(), direct.h.to_vec());
        assert_eq!(out.trees(2).unwrap()[0].to_string(), "(0 1)");
    }

    #[test]
    fn rigged_scorer_picks_forced_merge() {
        // A scorer that reads one coordinate; the leaf at position 2 and 3 are
        // given a huge value there so their parent dominates.
        let c = cfg(EncoderKind::GumbelTree);
        let mut f = fixture(&c, 5, 4, 2);
        let w_v = f.params.scorer.as_ref().unwrap().w_v;
        f.store
            .get_mut(w_v)
            .value
            .data_mut()
            .copy_from_slice(&[0.0, 0.0, 0.0, 1.0]);
        let g = match &f.params.cell {
            super::super::CellParams::Grc(g) => g.clone(),
            _ => unreachable!(),
        };
        // zero the cell so the parent is LN(0.5 l + 0.5 r); column 3 is then
        // largest where the children are largest there
        for id in [g.w1, g.b1, g.w2, g.b2] {
            f.store.get_mut(id).value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let rows = [
            [0.0, 1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 5.0],
            [0.0, 0.0, 0.0, 5.0],
            [0.0, 1.0, 0.0, 0.0],
        ];
        f.leaves.data_mut().copy_from_slice(&rows.concat());
        let tape = Tape::new();
        let enc = f.params.bind(&f.store, &tape).unwrap();
        let leaves = tape.var(&f.leaves).unwrap();
        let out = encode_easy_first_gumbel(&enc, &c.eval(), leaves, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.beams[0].actions[0], 2);
    }

    #[test]
    fn hard_forward_matches_eval_without_noise() {
        for temperature in [1.0, 1e-3] {
            let c = EncoderConfig {
                stochastic: false,
                temperature,
                ..cfg(EncoderKind::GumbelTree)
            };
            let f = fixture(&c, 7, 8, 3);
            let tape = Tape::new();
            let enc = f.params.bind(&f.store, &tape).unwrap();
            let leaves = tape.var(&f.leaves).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let tr = encode_easy_first_gumbel(&enc, &c.train(), leaves, &mut r).unwrap();
            let ev = encode_easy_first_gumbel(&enc, &c.eval(), leaves, &mut r).unwrap();
            assert_eq!(tr.vector.to_vec(), ev.vector.to_vec());
            assert_eq!(tr.beams[0].actions, ev.beams[0].actions);
        }
    }

    #[test]
    fn induced_tree_reproduces_encoding() {
        let c = cfg(EncoderKind::GumbelTree);
        let f = fixture(&c, 9, 8, 4);
        let tape = Tape::new();
        let enc = f.params.bind(&f.store, &tape).unwrap();
        let leaves = tape.var(&f.leaves).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let out = encode_easy_first_gumbel(&enc, &c.train(), leaves, &mut r).unwrap();
        let tree: ParseTree = out.trees(9).unwrap().remove(0);
        assert!(tree.is_projective() && tree.n_internal() == 8);
        let replay = encode_fixed_tree(&enc, &c.eval(), leaves, &tree, &mut r).unwrap();
        for (a, b) in out.vector.to_vec().iter().zip(replay.vector.to_vec()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_reaches_scorer_through_selection() {
        let c = EncoderConfig {
            stochastic: false,
            ..cfg(EncoderKind::GumbelTree)
        };
        let f = fixture(&c, 6, 8, 5);
        let tape = Tape::new();
        let enc = f.params.bind(&f.store, &tape).unwrap();
        let leaves = tape.var(&f.leaves).unwrap();
        let out = encode_easy_first_gumbel(&enc, &c.train(), leaves, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // the cell output is layer-normalised, so a plain sum would be constant
        let probe = Tensor::new(vec![8, 1], (0..8).map(|i| i as f64 - 3.5).collect()).unwrap();
        let loss = out
            .vector
            .matmul(tape.constant(&probe).unwrap())
            .unwrap()
            .sum()
            .unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(enc.w_v.unwrap()).unwrap().iter().any(|g| g.abs() > 0.0));
    }

    #[test]
    fn mc_single_sample_and_noise_free_mean() {
        let c = cfg(EncoderKind::McGumbel);
        let f = fixture(&c, 6, 8, 6);
        let tape = Tape::new();
        let enc = f.params.bind(&f.store, &tape).unwrap();
        let leaves = tape.var(&f.leaves).unwrap();
        let one = encode_mc_gumbel(&enc, &c.train(), leaves, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let sample = encode_easy_first_gumbel(&enc, &c.train(), leaves, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(one.vector.to_vec(), sample.vector.to_vec());

        let ev = encode_mc_gumbel(&enc, &c.eval(), leaves, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let single = encode_easy_first_gumbel(&enc, &c.eval(), leaves, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(ev.beams.windows(2).all(|w| w[0].actions == w[1].actions));
        for (a, b) in ev.vector.to_vec().iter().zip(single.vector.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
