//! Finite-difference gradient checks in double precision.
//!
//! Every check builds a scalar loss from the tensors in a [`ParamStore`],
//! compares the tape gradient of each tensor with central differences
//! `(L(x+h) - L(x-h)) / 2h`, and reports the relative error
//! `‖g_tape - g_fd‖ / max(‖g_tape‖, ‖g_fd‖, floor)` per tensor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::cells::{score, GrcParams, LeafParams, ScorerParams, TreeLstmParams};
use crate::encoders::{EncoderConfig, EncoderKind};
use crate::error::Result;
use crate::model::{cross_entropy, HeadParams, Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::topk::TopKVariant;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Norm floor for the relative error, so tensors whose true gradient is
/// (numerically) zero are judged by absolute error instead.
pub const NORM_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub rel_error: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub suite: String,
    pub tensors: Vec<TensorCheck>,
}

impl SuiteResult {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() <= tolerance
    }
}

/// Checks every tensor in `store` against central differences of `loss`.
pub fn check<F>(suite: &str, store: &mut ParamStore<f64>, step: f64, loss: F) -> Result<SuiteResult>
where
    F: for<'t> Fn(&ParamStore<f64>, &'t Tape<f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let l = loss(store, &tape)?;
    let grads = tape.backward(l)?;
    store.zero_grad();
    store.accumulate(&grads);
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.clone()).collect();

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        Ok(loss(s, &tape)?.item())
    };
    let mut tensors = Vec::new();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (id, g) in ids.into_iter().zip(analytic) {
        let n = store.get(id).value.numel();
        let mut fd = vec![0.0; n];
        for (i, slot) in fd.iter_mut().enumerate() {
            let x = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = x + step;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = x - step;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = x;
            *slot = (up - down) / (2.0 * step);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
        let scale = norm(&g).max(norm(&fd)).max(NORM_FLOOR);
        tensors.push(TensorCheck {
            name: store.get(id).name.clone(),
            entries: n,
            rel_error: norm(&diff) / scale,
            grad_norm: norm(&g),
        });
    }
    Ok(SuiteResult {
        suite: suite.to_string(),
        tensors,
    })
}

fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// Makes biases and layer-norm affine parameters non-trivial so their
/// gradients are exercised away from the initial values.
fn jitter<R: Rng>(store: &mut ParamStore<f64>, rng: &mut R) {
    for p in store.iter_mut() {
        for x in p.value.data_mut() {
            *x += rng.gen_range(-0.2..0.2);
        }
    }
}

/// `sum(x ⊙ probe)` for a fixed random probe, which avoids the constant sums
/// of layer-normalised outputs.
fn probe<'t>(x: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    x.mul_const(mask)?.sum()
}

pub fn grc_suite(d_h: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = GrcParams::init(&mut store, "grc", d_h, &mut rng);
    let l = store.add("input.left", random_tensor(&[1, d_h], &mut rng));
    let r = store.add("input.right", random_tensor(&[1, d_h], &mut rng));
    jitter(&mut store, &mut rng);
    check("grc", &mut store, DEFAULT_STEP, |s, tape| {
        let grc = p.bind(s, tape)?;
        let out = grc.compose::<ChaCha8Rng>(s.bind(tape, l)?, s.bind(tape, r)?, None)?;
        probe(out, seed)
    })
}

pub fn tree_lstm_suite(d_h: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = TreeLstmParams::init(&mut store, "lstm", d_h, &mut rng);
    let inputs: Vec<_> = ["input.h_left", "input.c_left", "input.h_right", "input.c_right"]
        .iter()
        .map(|name| store.add(*name, random_tensor(&[1, d_h], &mut rng)))
        .collect();
    jitter(&mut store, &mut rng);
    check("tree_lstm", &mut store, DEFAULT_STEP, |s, tape| {
        let cell = p.bind(s, tape)?;
        let v = inputs.iter().map(|&id| s.bind(tape, id)).collect::<Result<Vec<_>>>()?;
        let (h, c) = cell.compose((v[0], v[1]), (v[2], v[3]))?;
        probe(h, seed)?.add(probe(c, seed + 1)?)
    })
}

pub fn scorer_suite(d_h: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = ScorerParams::init(&mut store, "scorer", d_h, &mut rng);
    let v = store.add("input.candidates", random_tensor(&[3, d_h], &mut rng));
    check("scorer", &mut store, DEFAULT_STEP, |s, tape| {
        // log-softmax over candidate scores, as in beam branching
        let scores = score(s.bind(tape, v)?, s.bind(tape, p.w_v)?)?;
        let row = tape.concat(&[scores.row(0)?, scores.row(1)?, scores.row(2)?], false)?;
        row.log_softmax()?.elem(1)
    })
}

pub fn leaf_suite(d_e: usize, d_h: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = LeafParams::init(&mut store, "leaf", 15, d_e, d_h, &mut rng);
    jitter(&mut store, &mut rng);
    let tokens = [3, 1, 3, 7, 4];
    check("leaf_transform", &mut store, DEFAULT_STEP, |s, tape| {
        let out = p.transform::<_, ChaCha8Rng>(s, tape, &tokens, None)?;
        probe(out, seed)
    })
}

pub fn head_suite(d_h: usize, hidden: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = HeadParams::init(&mut store, d_h, hidden, 10, &mut rng);
    let x = store.add("input.encoding", random_tensor(&[1, d_h], &mut rng));
    jitter(&mut store, &mut rng);
    check("classifier_head", &mut store, DEFAULT_STEP, |s, tape| {
        let logits = p.classify::<_, ChaCha8Rng>(s, s.bind(tape, x)?, None)?;
        cross_entropy(logits, 4)
    })
}

/// Full classifier (leaf transform, encoder, head) in training mode with
/// deterministic top-k, so the discrete choices are fixed around the point.
pub fn end_to_end_suite(encoder: EncoderConfig, source: &str, d_h: usize, seed: u64) -> Result<SuiteResult> {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            stochastic: false,
            ..encoder
        },
        d_e: d_h,
        d_h,
        hidden: d_h,
        input_dropout: 0.0,
        head_dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = Model::init(&mut store, &cfg, &mut rng)?;
    jitter(&mut store, &mut rng);
    let tokens = crate::listops::tokenize(source)?;
    let label = crate::listops::eval_listops(source)? as usize;
    let name = format!(
        "{}_{}_k{}_n{}",
        cfg.encoder.kind,
        cfg.encoder.topk,
        cfg.encoder.beam_size,
        tokens.len()
    );
    check(&name, &mut store, DEFAULT_STEP, |s, tape| {
        let out = model.forward(s, tape, &tokens, true, &mut ChaCha8Rng::seed_from_u64(0))?;
        cross_entropy(out.logits, label)
    })
}

/// The full double-precision suite: every cell, the scorer, the leaf
/// transform, the classifier head, and end-to-end beam tree cell models with
/// OneSoft top-k on short inputs (n ≤ 6, d_h = 8).
pub fn standard_suites(seed: u64) -> Result<Vec<SuiteResult>> {
    let onesoft = |k| EncoderConfig {
        kind: EncoderKind::BtCell,
        beam_size: k,
        topk: TopKVariant::OneSoft,
        ..EncoderConfig::default()
    };
    Ok(vec![
        grc_suite(8, seed)?,
        tree_lstm_suite(8, seed)?,
        scorer_suite(8, seed)?,
        leaf_suite(6, 8, seed)?,
        head_suite(8, 8, seed)?,
        end_to_end_suite(onesoft(2), "[MIN 1 [SM 2 ] ]", 8, seed)?,
        end_to_end_suite(onesoft(3), "[MIN 1 [SM 2 ] ]", 8, seed)?,
        end_to_end_suite(onesoft(2), "[MAX 5 9 ]", 8, seed)?,
    ])
}
