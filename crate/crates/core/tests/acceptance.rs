//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any executed criterion fails.
//!
//! Criteria 4 and 5 train two dozen models on the desk-scale ListOps split.
//! They only run when `BEAMTREE_FULL_PROTOCOL=1` is set; otherwise they are
//! reported as FAIL (not executed) without failing the target. Set
//! `BEAMTREE_PROTOCOL_DIR` to keep the generated data and runs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use beamtree::encoders::{encode_fixed_tree, EncoderParams};
use beamtree::gradcheck::{self, DEFAULT_TOLERANCE};
use beamtree::harness::{self, RunConfig};
use beamtree::listops::{self, build_splits, generate, write_dataset, SplitPlan};
use beamtree::parse_analysis::{collapse_duplicates, extract_parses, softmax, BeamParse};
use beamtree::topk::{merge_beams, onesoft_topk, truncate};
use beamtree::tree::{REDUCE, SHIFT};
use beamtree::{
    checkpoint, encode, ActionKind, BeamState, EncodeInput, EncoderConfig, EncoderKind, GenConfig, NodeState,
    ParamStore, SplitKind, SplitParams, Tape, Tensor, TopKMode, TopKVariant,
};
use common::{dot, jitter, log_sum_exp, max_abs_diff, random_expr, sigmoid, stack_eval, PlainGrc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

/// Actions, score and root vector of one final hypothesis.
type BeamRecord = (Vec<usize>, f64, Vec<f64>);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- fixtures

struct Fixture {
    cfg: EncoderConfig,
    store: ParamStore<f64>,
    params: EncoderParams,
    leaves: Tensor<f64>,
}

fn fixture(cfg: EncoderConfig, n: usize, d_h: usize, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let params = EncoderParams::init(&mut store, &cfg, d_h, &mut rng).expect("valid config");
    jitter(&mut store, seed ^ 0x5eed);
    if let Some(s) = &params.scorer {
        // spread candidate scores out so the beams differ visibly
        store.get_mut(s.w_v).value.data_mut().iter_mut().for_each(|w| *w *= 4.0);
    }
    let leaves = Tensor::new(vec![n, d_h], (0..n * d_h).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    Fixture {
        cfg,
        store,
        params,
        leaves,
    }
}

fn leaf_rows(f: &Fixture) -> Vec<Vec<f64>> {
    let d = f.leaves.shape()[1];
    f.leaves.data().chunks(d).map(<[f64]>::to_vec).collect()
}

fn beam_cfg(kind: EncoderKind, k: usize, topk: TopKVariant) -> EncoderConfig {
    EncoderConfig {
        kind,
        beam_size: k,
        topk,
        stochastic: false,
        training: false,
        ..EncoderConfig::default()
    }
}

/// (actions, score, root vector) of every final beam, sorted by actions.
fn run_beams(f: &Fixture) -> (Vec<BeamRecord>, Vec<f64>) {
    let tape = Tape::new();
    let enc = f.params.bind(&f.store, &tape).unwrap();
    let out = encode(
        &enc,
        &f.cfg,
        tape.var(&f.leaves).unwrap(),
        EncodeInput::default(),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let mut beams: Vec<_> = out
        .beams
        .iter()
        .map(|b| (b.actions.clone(), b.score_value(), b.nodes[0].h.to_vec()))
        .collect();
    beams.sort_by(|a, b| a.0.cmp(&b.0));
    (beams, out.vector.to_vec())
}

// ---------------------------------------------------------------- criterion 1

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let suites = ok(gradcheck::standard_suites(0))?;
    let elapsed = start.elapsed().as_secs_f64();
    let worst = suites.iter().map(|s| s.max_rel_error()).fold(0.0, f64::max);
    for s in &suites {
        ensure!(
            s.passes(DEFAULT_TOLERANCE),
            "suite {} max relative error {:.3e}",
            s.suite,
            s.max_rel_error()
        );
        ensure!(
            s.tensors.iter().all(|t| t.grad_norm > 0.0),
            "suite {} has a parameter with an all-zero gradient",
            s.suite
        );
    }
    let names: Vec<&str> = suites.iter().map(|s| s.suite.as_str()).collect();
    for needed in ["grc", "tree_lstm", "scorer", "leaf_transform", "classifier_head"] {
        ensure!(names.contains(&needed), "suite {needed} missing");
    }
    ensure!(
        names.iter().any(|n| n.starts_with("bt_cell_onesoft")),
        "no end-to-end OneSoft suite"
    );
    ensure!(elapsed < 120.0, "took {elapsed:.1}s");
    Ok(format!(
        "{} suites, {} tensors, max rel err {worst:.2e}, {elapsed:.1}s",
        suites.len(),
        suites.iter().map(|s| s.tensors.len()).sum::<usize>()
    ))
}

// ---------------------------------------------------------------- criterion 2

/// Every easy-first merge order, scored by summing the log-softmax of the
/// candidate scores at each step (a single remaining pair adds 0).
fn enumerate_easy_first(
    grc: &PlainGrc,
    w_v: &[f64],
    nodes: Vec<Vec<f64>>,
    score: f64,
    actions: Vec<usize>,
    out: &mut Vec<BeamRecord>,
) {
    match nodes.len() {
        1 => out.push((actions, score, nodes.into_iter().next().unwrap())),
        2 => {
            let root = grc.compose(&nodes[0], &nodes[1]);
            let mut a = actions;
            a.push(0);
            out.push((a, score, root));
        }
        len => {
            let parents: Vec<Vec<f64>> = (0..len - 1).map(|j| grc.compose(&nodes[j], &nodes[j + 1])).collect();
            let raw: Vec<f64> = parents.iter().map(|p| dot(p, w_v)).collect();
            let lse = log_sum_exp(&raw);
            for (j, parent) in parents.into_iter().enumerate() {
                let mut next = nodes[..j].to_vec();
                next.push(parent);
                next.extend_from_slice(&nodes[j + 2..]);
                let mut a = actions.clone();
                a.push(j);
                enumerate_easy_first(grc, w_v, next, score + raw[j] - lse, a, out);
            }
        }
    }
}

/// Every shift-reduce derivation. With both actions available the decision
/// `s = σ([stack[-2]; stack[-1]; queue[0]]·W + b)` gives reduce `ln s` and
/// shift `ln(1-s)`; a forced action adds 0.
#[allow(clippy::too_many_arguments)]
fn enumerate_shift_reduce(
    grc: &PlainGrc,
    w: &[f64],
    b: f64,
    queue: &[Vec<f64>],
    stack: Vec<Vec<f64>>,
    next: usize,
    score: f64,
    actions: Vec<usize>,
    out: &mut Vec<BeamRecord>,
) {
    let n = queue.len();
    if actions.len() == 2 * n - 1 {
        out.push((actions, score, stack.into_iter().next().unwrap()));
        return;
    }
    let can_shift = next < n;
    let can_reduce = stack.len() >= 2;
    let (shift_lp, reduce_lp) = if can_shift && can_reduce {
        let x: Vec<f64> = [&stack[stack.len() - 2], &stack[stack.len() - 1], &queue[next]]
            .into_iter()
            .flat_map(|v| v.iter().copied())
            .collect();
        let s = sigmoid(dot(&x, w) + b);
        ((1.0 - s).ln(), s.ln())
    } else {
        (0.0, 0.0)
    };
    if can_shift {
        let mut st = stack.clone();
        st.push(queue[next].clone());
        let mut a = actions.clone();
        a.push(SHIFT);
        enumerate_shift_reduce(grc, w, b, queue, st, next + 1, score + shift_lp, a, out);
    }
    if can_reduce {
        let mut st = stack;
        let r = st.pop().unwrap();
        let l = st.pop().unwrap();
        st.push(grc.compose(&l, &r));
        let mut a = actions;
        a.push(REDUCE);
        enumerate_shift_reduce(grc, w, b, queue, st, next, score + reduce_lp, a, out);
    }
}

fn compare_to_oracle(what: &str, got: &[BeamRecord], mut want: Vec<BeamRecord>) -> Result<f64, String> {
    want.sort_by(|a, b| a.0.cmp(&b.0));
    ensure!(
        got.len() == want.len(),
        "{what}: {} beams, oracle has {} derivations",
        got.len(),
        want.len()
    );
    let mut worst = 0.0f64;
    for (g, w) in got.iter().zip(&want) {
        ensure!(g.0 == w.0, "{what}: action sequences differ: {:?} vs {:?}", g.0, w.0);
        let err = (g.1 - w.1).abs();
        ensure!(err <= 1e-9, "{what}: score {} vs oracle {} for {:?}", g.1, w.1, g.0);
        let verr = max_abs_diff(&g.2, &w.2);
        ensure!(verr <= 1e-9, "{what}: root vector differs by {verr:.2e} for {:?}", g.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn factorial(n: usize) -> usize {
    (1..=n).product()
}

fn beam_oracle_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for n in 3..=6 {
        for seed in 0..3u64 {
            let k = factorial(n - 1);
            let f = fixture(
                beam_cfg(EncoderKind::BtCell, k, TopKVariant::Plain),
                n,
                8,
                100 * n as u64 + seed,
            );
            let grc = PlainGrc::from_store(&f.store, "grc");
            let w_v = f.store.get(f.params.scorer.as_ref().unwrap().w_v).value.data().to_vec();
            let mut want = Vec::new();
            enumerate_easy_first(&grc, &w_v, leaf_rows(&f), 0.0, Vec::new(), &mut want);
            ensure!(want.len() == k, "oracle found {} orders for n = {n}", want.len());
            let (got, vector) = run_beams(&f);
            worst = worst.max(compare_to_oracle(
                &format!("bt_cell n={n} seed={seed}"),
                &got,
                want.clone(),
            )?);
            // the merged encoding is the score-softmax average of all roots
            let p = softmax(&want.iter().map(|w| w.1).collect::<Vec<_>>());
            let merged: Vec<f64> = (0..vector.len())
                .map(|i| want.iter().zip(&p).map(|(w, p)| p * w.2[i]).sum())
                .collect();
            ensure!(
                max_abs_diff(&merged, &vector) <= 1e-9,
                "bt_cell n={n}: merged encoding differs"
            );
            checked += 1;
        }
    }
    for (n, k) in [(3, 8), (4, 8), (3, 2), (4, 5)] {
        for seed in 0..3u64 {
            let f = fixture(
                beam_cfg(EncoderKind::Bsrp, k, TopKVariant::Plain),
                n,
                8,
                700 + 10 * n as u64 + seed,
            );
            let grc = PlainGrc::from_store(&f.store, "grc");
            let bsrp = f.params.bsrp.as_ref().unwrap();
            let w = f.store.get(bsrp.w).value.data().to_vec();
            let b = f.store.get(bsrp.b).value.data()[0];
            let mut want = Vec::new();
            enumerate_shift_reduce(&grc, &w, b, &leaf_rows(&f), Vec::new(), 0, 0.0, Vec::new(), &mut want);
            let catalan = if n == 3 { 2 } else { 5 };
            ensure!(
                want.len() == catalan,
                "oracle found {} derivations for n = {n}",
                want.len()
            );
            let (got, _) = run_beams(&f);
            worst = worst.max(compare_to_oracle(&format!("bsrp n={n} k={k} seed={seed}"), &got, want)?);
            checked += 1;
        }
    }
    Ok(format!("{checked} instances, max score error {worst:.2e}"))
}

// ---------------------------------------------------------------- criterion 3

fn random_pool<'t>(
    tape: &'t Tape<f64>,
    m: usize,
    len: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<BeamState<'t, f64>>, Vec<beamtree::Var<'t, f64>>) {
    let mut scores = Vec::new();
    let beams = (0..m)
        .map(|i| {
            let nodes = (0..len)
                .map(|_| {
                    let h = Tensor::new(vec![1, d], (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
                    NodeState::new(tape.var(&h).unwrap(), None)
                })
                .collect();
            let score = tape
                .var(&Tensor::new(vec![1, 1], vec![rng.gen_range(-3.0..0.0)]).unwrap())
                .unwrap();
            scores.push(score);
            BeamState {
                nodes,
                score,
                actions: vec![i],
            }
        })
        .collect();
    (beams, scores)
}

fn onesoft_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // k = m keeps the input set untouched
    for _ in 0..10 {
        let tape = Tape::new();
        let m = rng.gen_range(2..7);
        let (beams, _) = random_pool(&tape, m, 3, 4, &mut rng);
        let out = ok(onesoft_topk(beams.clone(), m, TopKMode::Deterministic, &mut rng))?;
        ensure!(out.len() == m, "k = m returned {} beams", out.len());
        let key = |b: &BeamState<'_, f64>| {
            let mut v = vec![b.score_value()];
            v.extend(b.actions.iter().map(|&a| a as f64));
            for n in &b.nodes {
                v.extend(n.h.to_vec());
            }
            v
        };
        let mut a: Vec<Vec<f64>> = beams.iter().map(key).collect();
        let mut b: Vec<Vec<f64>> = out.iter().map(key).collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        ensure!(a == b, "k = m changed the beam set");
    }

    // evaluation switches OneSoft to plain top-k
    let train_cfg = EncoderConfig {
        training: true,
        ..beam_cfg(EncoderKind::BtCell, 3, TopKVariant::OneSoft)
    };
    ensure!(
        train_cfg.effective_topk() == TopKVariant::OneSoft,
        "training should use OneSoft"
    );
    ensure!(
        train_cfg.eval().effective_topk() == TopKVariant::Plain,
        "eval() keeps OneSoft"
    );
    for seed in 0..10 {
        let soft = fixture(beam_cfg(EncoderKind::BtCell, 3, TopKVariant::OneSoft), 7, 6, 40 + seed);
        let plain = Fixture {
            cfg: beam_cfg(EncoderKind::BtCell, 3, TopKVariant::Plain),
            ..fixture(beam_cfg(EncoderKind::BtCell, 3, TopKVariant::OneSoft), 7, 6, 40 + seed)
        };
        let (a, va) = run_beams(&soft);
        let (b, vb) = run_beams(&plain);
        ensure!(
            a == b && va == vb,
            "eval-mode OneSoft differs from plain top-k (seed {seed})"
        );
    }

    // gradient to the scores of pruned beams
    let mut nonzero = Vec::new();
    for variant in [TopKVariant::Plain, TopKVariant::OneSoft] {
        for _ in 0..10 {
            let tape = Tape::new();
            let (m, k) = (rng.gen_range(4..8), 3);
            let (pool, scores) = random_pool(&tape, m, 1, 5, &mut rng);
            let values: Vec<f64> = scores.iter().map(|s| s.item()).collect();
            let kept = beamtree::topk::rank_desc(&values, k);
            let kept_out = ok(truncate(pool, k, variant, TopKMode::Deterministic, &mut rng))?;
            let roots: Vec<_> = kept_out.iter().map(|b| b.nodes[0].h).collect();
            let s: Vec<_> = kept_out.iter().map(|b| b.score).collect();
            let encoding = ok(merge_beams(&roots, &s))?;
            let probe: Vec<f64> = (0..encoding.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = ok(ok(encoding.mul_const(probe))?.sum())?;
            let grads = ok(tape.backward(loss))?;
            let pruned: Vec<f64> = (0..m)
                .filter(|i| !kept.contains(i))
                .map(|i| grads.get_or_zero(scores[i])[0].abs())
                .collect();
            let g = pruned.iter().copied().fold(0.0, f64::max);
            match variant {
                TopKVariant::Plain => ensure!(g == 0.0, "plain top-k leaks gradient {g:.2e} to a pruned beam"),
                TopKVariant::OneSoft => {
                    ensure!(
                        pruned.iter().all(|&x| x > 1e-10),
                        "OneSoft pruned-beam gradients {pruned:?}"
                    );
                    nonzero.push(g);
                }
            }
        }
    }
    Ok(format!(
        "identity, eval switch, pruned-score grads 0 under plain and up to {:.2e} under OneSoft",
        nonzero.iter().copied().fold(0.0, f64::max)
    ))
}

// ---------------------------------------------------------------- criteria 4 and 5

struct ProtocolRun {
    name: &'static str,
    kind: EncoderKind,
    k: usize,
    topk: TopKVariant,
}

const PROTOCOL_SEEDS: [u64; 3] = [0, 1, 2];

const PROTOCOL: [ProtocolRun; 8] = [
    ProtocolRun {
        name: "gold_tree",
        kind: EncoderKind::GoldTree,
        k: 1,
        topk: TopKVariant::Plain,
    },
    ProtocolRun {
        name: "gumbel_tree",
        kind: EncoderKind::GumbelTree,
        k: 1,
        topk: TopKVariant::Plain,
    },
    ProtocolRun {
        name: "recurrent",
        kind: EncoderKind::Recurrent,
        k: 1,
        topk: TopKVariant::Plain,
    },
    ProtocolRun {
        name: "bt_onesoft_k3",
        kind: EncoderKind::BtCell,
        k: 3,
        topk: TopKVariant::OneSoft,
    },
    ProtocolRun {
        name: "bt_plain_k3",
        kind: EncoderKind::BtCell,
        k: 3,
        topk: TopKVariant::Plain,
    },
    ProtocolRun {
        name: "bt_onesoft_k2",
        kind: EncoderKind::BtCell,
        k: 2,
        topk: TopKVariant::OneSoft,
    },
    ProtocolRun {
        name: "bt_plain_k2",
        kind: EncoderKind::BtCell,
        k: 2,
        topk: TopKVariant::Plain,
    },
    ProtocolRun {
        name: "bt_plain_k5",
        kind: EncoderKind::BtCell,
        k: 5,
        topk: TopKVariant::Plain,
    },
];

/// Median over seeds of (in-distribution dev accuracy, length-gen accuracy).
type ProtocolResults = BTreeMap<&'static str, (f64, f64)>;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn run_protocol(dir: &Path) -> Result<ProtocolResults, String> {
    let data = dir.join("data");
    let files = if data.join("train.tsv").exists() {
        beamtree::listops::SplitFiles {
            train: data.join("train.tsv"),
            dev: data.join("dev.tsv"),
            tests: vec![("test_len_80_120".into(), data.join("test_len_80_120.tsv"))],
        }
    } else {
        let plan = ok(SplitPlan::new(SplitKind::LengthGen, &SplitParams::default()))?;
        ok(build_splits(&plan, &data))?
    };
    let (test_name, test_path) = files.tests[0].clone();
    let mut results = ProtocolResults::new();
    for run in &PROTOCOL {
        let mut dev = Vec::new();
        let mut gen = Vec::new();
        for seed in PROTOCOL_SEEDS {
            let mut cfg = RunConfig {
                seed,
                train: Some(files.train.clone()),
                dev: Some(files.dev.clone()),
                tests: vec![test_path.clone()],
                out_dir: dir.join(format!("{}_seed{seed}", run.name)),
                ..RunConfig::default()
            };
            cfg.model.encoder.kind = run.kind;
            cfg.model.encoder.beam_size = run.k;
            cfg.model.encoder.topk = run.topk;
            let outcome = ok(harness::train(&cfg, &mut |m| {
                eprintln!("  {} seed {seed} epoch {} dev {:.4}", run.name, m.epoch, m.dev_accuracy)
            }))?;
            dev.push(outcome.summary.dev_accuracy);
            gen.push(outcome.summary.test_accuracy[&test_name]);
        }
        results.insert(run.name, (median(dev), median(gen)));
    }
    Ok(results)
}

fn table_one_orderings(r: &ProtocolResults) -> Outcome {
    let pts = |x: f64| 100.0 * x;
    let gold_in = pts(r["gold_tree"].0);
    let gumbel = pts(r["gumbel_tree"].1);
    let onesoft = pts(r["bt_onesoft_k3"].1);
    let plain = pts(r["bt_plain_k3"].1);
    let (rec_in, rec_gen) = (pts(r["recurrent"].0), pts(r["recurrent"].1));
    let detail = format!(
        "gold in-dist {gold_in:.1}, length-gen: BT+OneSoft {onesoft:.1}, BT plain {plain:.1}, Gumbel {gumbel:.1}, recurrent {rec_gen:.1} (in-dist {rec_in:.1})"
    );
    ensure!(gold_in >= 95.0, "gold tree in-distribution below 95: {detail}");
    ensure!(
        onesoft - gumbel >= 10.0,
        "BT+OneSoft margin over Gumbel below 10: {detail}"
    );
    ensure!(plain - gumbel >= 5.0, "BT plain margin over Gumbel below 5: {detail}");
    ensure!(rec_in - rec_gen >= 10.0, "recurrent drop below 10: {detail}");
    Ok(detail)
}

fn beam_size_effect(r: &ProtocolResults) -> Outcome {
    let pts = |name: &str| 100.0 * r[name].1;
    let (soft2, plain2, plain5) = (pts("bt_onesoft_k2"), pts("bt_plain_k2"), pts("bt_plain_k5"));
    let detail = format!("length-gen: OneSoft k=2 {soft2:.1}, plain k=2 {plain2:.1}, plain k=5 {plain5:.1}");
    ensure!(
        plain5 - soft2 <= 10.0,
        "OneSoft k=2 more than 10 below plain k=5: {detail}"
    );
    ensure!(soft2 >= plain2, "OneSoft k=2 below plain k=2: {detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 6

fn listops_oracle_agreement() -> Outcome {
    let examples = ok(generate(&GenConfig {
        count: 10_000,
        seed: 11,
        max_length: 100,
        max_depth: 6,
        max_args: 5,
        ..GenConfig::default()
    }))?;
    ensure!(examples.len() == 10_000, "generated {} examples", examples.len());
    for ex in &examples {
        let recursive = ok(listops::eval_listops(&ex.source))?;
        let stack = stack_eval(&ex.source);
        ensure!(
            stack == Some(recursive) && recursive == ex.label,
            "{}: recursive {recursive}, stack {stack:?}, label {}",
            ex.source,
            ex.label
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut by_op = BTreeMap::new();
    for _ in 0..10_000 {
        let e = random_expr(&mut rng, 4);
        let args: Vec<u8> = e.args.iter().map(|a| stack_eval(a).expect("well-formed")).collect();
        let v = ok(listops::eval_listops(&e.source()))?;
        let (lo, hi) = (*args.iter().min().unwrap(), *args.iter().max().unwrap());
        match e.op {
            "MAX" => ensure!(v >= hi && args.contains(&v), "{}: MAX {v} vs args {args:?}", e.source()),
            "MIN" => ensure!(v <= lo && args.contains(&v), "{}: MIN {v} vs args {args:?}", e.source()),
            "MED" => ensure!(lo <= v && v <= hi, "{}: MED {v} outside [{lo}, {hi}]", e.source()),
            _ => {}
        }
        let mut shuffled = e.args.clone();
        shuffled.shuffle(&mut rng);
        let permuted = beamtree::listops::eval_listops(&format!("[{} {} ]", e.op, shuffled.join(" ")));
        ensure!(
            ok(permuted)? == v,
            "{}: not invariant under argument permutation",
            e.source()
        );
        *by_op.entry(e.op).or_insert(0) += 1;
    }
    Ok(format!(
        "10000 generated expressions agree; 10000 metamorphic cases ({})",
        by_op
            .iter()
            .map(|(k, v)| format!("{k} {v}"))
            .collect::<Vec<_>>()
            .join(", ")
    ))
}

// ---------------------------------------------------------------- criterion 7

fn parse_bookkeeping() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst_mass = 0.0f64;
    let mut worst_replay = 0.0f64;
    let mut beams_checked = 0;
    let mut sets = 0;
    let kinds = [
        (EncoderKind::BtCell, TopKVariant::Plain),
        (EncoderKind::BtCell, TopKVariant::OneSoft),
        (EncoderKind::Bsrp, TopKVariant::Plain),
    ];
    for round in 0..60u64 {
        let (kind, topk) = kinds[round as usize % kinds.len()];
        let n = rng.gen_range(2..13);
        let k = rng.gen_range(if topk == TopKVariant::OneSoft { 2 } else { 1 }..7);
        let cfg = EncoderConfig {
            training: topk == TopKVariant::OneSoft,
            ..beam_cfg(kind, k, topk)
        };
        let f = fixture(cfg, n, 8, 1000 + round);
        let tape = Tape::new();
        let enc = f.params.bind(&f.store, &tape).unwrap();
        let leaves = tape.var(&f.leaves).unwrap();
        let out = ok(encode(
            &enc,
            &f.cfg,
            leaves,
            EncodeInput::default(),
            &mut ChaCha8Rng::seed_from_u64(round),
        ))?;
        let labels: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        let parses = ok(extract_parses(&out, &labels))?;
        let collapsed = collapse_duplicates(parses.clone());
        let mass: f64 = collapsed.iter().map(|p| p.probability).sum();
        let before: f64 = parses.iter().map(|p| p.probability).sum();
        worst_mass = worst_mass.max((mass - 1.0).abs()).max((mass - before).abs());
        sets += 1;

        // replay discrete beams (the OneSoft interpolated beam is not a tree)
        if topk == TopKVariant::Plain {
            for (parse, beam) in parses.iter().zip(&out.beams) {
                let tree = ok(parse.parse_tree())?;
                let replay = ok(encode_fixed_tree(
                    &enc,
                    &f.cfg,
                    leaves,
                    &tree,
                    &mut ChaCha8Rng::seed_from_u64(0),
                ))?;
                let err = max_abs_diff(&replay.vector.to_vec(), &beam.nodes[0].h.to_vec());
                worst_replay = worst_replay.max(err);
                beams_checked += 1;
            }
            ensure!(
                out.action_kind
                    == if kind == EncoderKind::Bsrp {
                        ActionKind::ShiftReduce
                    } else {
                        ActionKind::EasyFirst
                    },
                "unexpected action kind"
            );
        }
    }
    for _ in 0..1000 {
        let m = rng.gen_range(1..30);
        let scores: Vec<f64> = (0..m).map(|_| rng.gen_range(-30.0..5.0)).collect();
        let parses: Vec<BeamParse> = softmax(&scores)
            .into_iter()
            .map(|probability| BeamParse {
                tree: format!("t{}", rng.gen_range(0..5)),
                probability,
                actions: Vec::new(),
            })
            .collect();
        let mass: f64 = collapse_duplicates(parses).iter().map(|p| p.probability).sum();
        worst_mass = worst_mass.max((mass - 1.0).abs());
        sets += 1;
    }
    ensure!(worst_mass <= 1e-9, "probability mass drifts by {worst_mass:.2e}");
    ensure!(worst_replay <= 1e-6, "replayed tree differs by {worst_replay:.2e}");
    Ok(format!(
        "{sets} beam sets conserve mass (max drift {worst_mass:.1e}); {beams_checked} replays, max diff {worst_replay:.1e}"
    ))
}

// ---------------------------------------------------------------- criterion 8

fn small_run(dir: &Path, data: &Path, out: &str) -> RunConfig {
    let mut cfg = RunConfig {
        seed: 5,
        batch_size: 8,
        max_epochs: 3,
        patience: 2,
        train: Some(data.join("train.tsv")),
        dev: Some(data.join("dev.tsv")),
        tests: vec![data.join("test.tsv")],
        out_dir: dir.join(out),
        train_accuracy: true,
        ..RunConfig::default()
    };
    cfg.model.d_e = 16;
    cfg.model.d_h = 16;
    cfg.model.hidden = 16;
    cfg.model.encoder = EncoderConfig {
        kind: EncoderKind::BtCell,
        beam_size: 2,
        topk: TopKVariant::OneSoft,
        stochastic: true,
        ..EncoderConfig::default()
    };
    cfg
}

fn determinism() -> Outcome {
    let tmp = ok(tempfile::tempdir())?;
    let data = tmp.path().join("data");
    ok(std::fs::create_dir_all(&data))?;
    for (name, count, seed) in [("train", 96, 1), ("dev", 40, 2), ("test", 40, 3)] {
        let gen = GenConfig {
            count,
            seed,
            max_length: 20,
            max_depth: 3,
            max_args: 3,
            ..GenConfig::default()
        };
        ok(write_dataset(
            &data.join(format!("{name}.tsv")),
            &ok(generate(&gen))?,
            Some(&gen),
        ))?;
    }
    let read = |p: PathBuf| ok(std::fs::read(p));
    let mut summaries = Vec::new();
    for out in ["a", "b"] {
        let cfg = small_run(tmp.path(), &data, out);
        let outcome = ok(harness::train(&cfg, &mut |_| {}))?;
        summaries.push((outcome, cfg));
    }
    let (a, b) = (&summaries[0].0, &summaries[1].0);
    let metrics = read(a.metrics_path.clone())?;
    ensure!(
        metrics == read(b.metrics_path.clone())?,
        "metrics.jsonl differs between identical runs"
    );
    ensure!(
        serde_json::to_string(&a.summary).unwrap() == serde_json::to_string(&b.summary).unwrap(),
        "final summaries differ"
    );
    let ckpt = read(a.checkpoint.clone())?;
    ensure!(
        ckpt == read(b.checkpoint.clone())?,
        "checkpoints differ between identical runs"
    );

    // save/load round trip
    let store: ParamStore<f32> = ok(checkpoint::decode(&ckpt))?;
    ensure!(checkpoint::encode(&store) == ckpt, "decode/encode is not bit-exact");
    let (_, _, loaded) = ok(harness::load_checkpoint(&a.checkpoint))?;
    for ((_, x), (_, y)) in loaded.iter().zip(store.iter()) {
        ensure!(
            x.value
                .data()
                .iter()
                .zip(y.value.data())
                .all(|(p, q)| p.to_bits() == q.to_bits()),
            "loaded parameter {} differs",
            x.name
        );
    }

    // repeated eval invocations
    let test = data.join("test.tsv");
    let e1 = ok(harness::evaluate(&a.checkpoint, &test))?;
    let e2 = ok(harness::evaluate(&a.checkpoint, &test))?;
    ensure!(e1 == e2, "repeated eval differs: {e1:?} vs {e2:?}");
    let reported = a.summary.test_accuracy["test"];
    ensure!(
        e1.accuracy == reported,
        "eval of the checkpoint {} vs in-run {reported}",
        e1.accuracy
    );
    Ok(format!(
        "{} metric lines identical, {} checkpoint bytes round-trip, eval accuracy {:.3} reproduced",
        metrics.iter().filter(|&&c| c == b'\n').count(),
        ckpt.len(),
        e1.accuracy
    ))
}

// ---------------------------------------------------------------- driver

fn main() -> ExitCode {
    let full = std::env::var("BEAMTREE_FULL_PROTOCOL").is_ok_and(|v| v == "1");
    let mut failed = 0;
    let mut report = |id: usize, title: &str, result: std::thread::Result<Outcome>| {
        let (status, detail) = match result {
            Ok(Ok(d)) => ("PASS", d),
            Ok(Err(e)) => ("FAIL", e),
            Err(p) => (
                "FAIL",
                p.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into()),
            ),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("{status} criterion {id}: {title}: {detail}");
    };
    let run = |f: fn() -> Outcome| catch_unwind(AssertUnwindSafe(f));

    report(1, "gradient correctness", run(gradient_correctness));
    report(2, "beam-search oracle equivalence", run(beam_oracle_equivalence));
    report(3, "OneSoft identities", run(onesoft_identities));
    if full {
        let dir = std::env::var_os("BEAMTREE_PROTOCOL_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| std::env::temp_dir().join("beamtree_protocol"));
        match catch_unwind(AssertUnwindSafe(|| run_protocol(&dir))) {
            Ok(Ok(results)) => {
                report(4, "desk-scale length generalization", Ok(table_one_orderings(&results)));
                report(5, "beam-size effect", Ok(beam_size_effect(&results)));
            }
            Ok(Err(e)) => {
                report(4, "desk-scale length generalization", Ok(Err(e.clone())));
                report(5, "beam-size effect", Ok(Err(e)));
            }
            Err(p) => {
                report(4, "desk-scale length generalization", Err(p));
                report(5, "beam-size effect", Ok(Err("protocol panicked".into())));
            }
        }
    } else {
        for (id, title) in [(4, "desk-scale length generalization"), (5, "beam-size effect")] {
            println!(
                "FAIL criterion {id}: {title}: not executed (needs {} training runs; set BEAMTREE_FULL_PROTOCOL=1)",
                PROTOCOL.len() * PROTOCOL_SEEDS.len()
            );
        }
    }
    report(6, "ListOps oracle agreement", run(listops_oracle_agreement));
    report(7, "parse bookkeeping", run(parse_bookkeeping));
    report(8, "determinism", run(determinism));

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} executed criteria failed");
        ExitCode::FAILURE
    }
}
