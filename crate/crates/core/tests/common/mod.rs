//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the crate's numerics: the cells are re-derived on
//! plain `Vec<f64>` and the ListOps evaluator is a separate stack machine.

#![allow(dead_code)]

use beamtree::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erfc;

/// `x·Φ(x)` with `Φ(x) = erfc(-x/√2)/2`. The statrs routine agrees with a
/// 30-digit reference to about 1e-10 relative, which bounds how tightly the
/// cell oracles can be compared.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x (1×rows) · w (rows×cols)` for a row-major `w`.
pub fn vec_mat(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    assert_eq!(x.len() * cols, w.len());
    let mut out = vec![0.0; cols];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
            *o += xi * wij;
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn values(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    let id = store.find(name).unwrap_or_else(|| panic!("missing parameter {name}"));
    store.get(id).value.data().to_vec()
}

/// Gated recursive cell written out scalar by scalar.
pub struct PlainGrc {
    d: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
}

impl PlainGrc {
    pub fn from_store(store: &ParamStore<f64>, prefix: &str) -> Self {
        let gamma = values(store, &format!("{prefix}.ln.gamma"));
        PlainGrc {
            d: gamma.len(),
            w1: values(store, &format!("{prefix}.W1")),
            b1: values(store, &format!("{prefix}.b1")),
            w2: values(store, &format!("{prefix}.W2")),
            b2: values(store, &format!("{prefix}.b2")),
            gamma,
            beta: values(store, &format!("{prefix}.ln.beta")),
        }
    }

    pub fn compose(&self, l: &[f64], r: &[f64]) -> Vec<f64> {
        let d = self.d;
        let x: Vec<f64> = l.iter().chain(r).copied().collect();
        let hidden: Vec<f64> = vec_mat(&x, &self.w1, 4 * d)
            .iter()
            .zip(&self.b1)
            .map(|(a, b)| gelu(a + b))
            .collect();
        let g: Vec<f64> = vec_mat(&hidden, &self.w2, 4 * d)
            .iter()
            .zip(&self.b2)
            .map(|(a, b)| a + b)
            .collect();
        let pre: Vec<f64> = (0..d)
            .map(|i| sigmoid(g[i]) * l[i] + sigmoid(g[d + i]) * r[i] + sigmoid(g[2 * d + i]) * g[3 * d + i])
            .collect();
        let mean = pre.iter().sum::<f64>() / d as f64;
        let var = pre.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + 1e-5).sqrt();
        (0..d)
            .map(|i| (pre[i] - mean) * rstd * self.gamma[i] + self.beta[i])
            .collect()
    }
}

/// Shifts every parameter by a small random amount so biases and the
/// normalisation affine are away from their initial constants.
pub fn jitter(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        for x in p.value.data_mut() {
            *x += rng.gen_range(-0.2..0.2);
        }
    }
}

/// Evaluates a ListOps source with an explicit operand stack: `[OP` opens a
/// frame, digits are pushed into the innermost frame, `]` folds the frame
/// into a digit. Returns `None` on malformed input. MED takes the lower
/// middle element for an even count.
pub fn stack_eval(source: &str) -> Option<u8> {
    let mut frames: Vec<(String, Vec<u8>)> = Vec::new();
    let mut result = None;
    for tok in source.split_whitespace() {
        if let Some(op) = tok.strip_prefix('[') {
            if result.is_some() {
                return None;
            }
            frames.push((op.to_string(), Vec::new()));
        } else if tok == "]" {
            let (op, mut args) = frames.pop()?;
            if args.is_empty() {
                return None;
            }
            let v = match op.as_str() {
                "MAX" => *args.iter().max()?,
                "MIN" => *args.iter().min()?,
                "SM" => (args.iter().map(|&a| a as u32).sum::<u32>() % 10) as u8,
                "MED" => {
                    args.sort_unstable();
                    args[(args.len() - 1) / 2]
                }
                _ => return None,
            };
            match frames.last_mut() {
                Some(f) => f.1.push(v),
                None => result = Some(v),
            }
        } else {
            let digit: u8 = tok.parse().ok().filter(|&d: &u8| d < 10)?;
            match frames.last_mut() {
                Some(f) => f.1.push(digit),
                None if result.is_none() && source.split_whitespace().count() == 1 => result = Some(digit),
                None => return None,
            }
        }
    }
    if frames.is_empty() {
        result
    } else {
        None
    }
}

/// A random expression tree with its operator and argument sources kept
/// separately so tests can permute arguments.
pub struct RandomExpr {
    pub op: &'static str,
    pub args: Vec<String>,
}

impl RandomExpr {
    pub fn source(&self) -> String {
        format!("[{} {} ]", self.op, self.args.join(" "))
    }
}

pub fn random_source<R: Rng>(rng: &mut R, depth: usize) -> String {
    if depth == 0 || rng.gen_bool(0.45) {
        return rng.gen_range(0..10u8).to_string();
    }
    random_expr(rng, depth).source()
}

pub fn random_expr<R: Rng>(rng: &mut R, depth: usize) -> RandomExpr {
    const OPS: [&str; 4] = ["MAX", "MIN", "MED", "SM"];
    let op = OPS[rng.gen_range(0..4)];
    let arity = rng.gen_range(1..=5);
    RandomExpr {
        op,
        args: (0..arity)
            .map(|_| random_source(rng, depth.saturating_sub(1)))
            .collect(),
    }
}
