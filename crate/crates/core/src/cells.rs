//! Composition functions `R(left, right)`, the parse scorer and the leaf transform.
//!
//! All compose routines are batched over rows: `left` and `right` are `r×d_h`
//! and row `i` of the output composes row `i` of each input.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Which composition function an encoder uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Grc,
    TreeLstm,
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grc" => Ok(CellKind::Grc),
            "tree_lstm" | "lstm" => Ok(CellKind::TreeLstm),
            other => Err(Error::config(format!("unknown cell kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CellKind::Grc => "grc",
            CellKind::TreeLstm => "tree_lstm",
        })
    }
}

/// A node in a partially reduced sequence: hidden vector plus the cell
/// memory when the composition function carries one.
#[derive(Clone, Copy, Debug)]
pub struct NodeState<'t, T> {
    pub h: Var<'t, T>,
    pub c: Option<Var<'t, T>>,
}

impl<'t, T: Real> NodeState<'t, T> {
    pub fn new(h: Var<'t, T>, c: Option<Var<'t, T>>) -> Self {
        NodeState { h, c }
    }
}

/// Splits stacked `h` (and `c`) rows into one node per row.
pub fn split_rows<'t, T: Real>(h: Var<'t, T>, c: Option<Var<'t, T>>) -> Result<Vec<NodeState<'t, T>>> {
    if h.rows() == 1 {
        return Ok(vec![NodeState::new(h, c)]);
    }
    (0..h.rows())
        .map(|i| Ok(NodeState::new(h.row(i)?, c.map(|c| c.row(i)).transpose()?)))
        .collect()
}

/// Inverted dropout: zeroes each entry with probability `rate`, rescales the rest.
pub fn dropout<'t, T: Real, R: Rng + ?Sized>(x: Var<'t, T>, rate: f64, rng: &mut R) -> Result<Var<'t, T>> {
    if rate <= 0.0 {
        return Ok(x);
    }
    if rate >= 1.0 {
        return Err(Error::config(format!("dropout rate {rate} must be < 1")));
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let mask = (0..x.len())
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    x.mul_const(mask)
}

#[derive(Clone, Debug)]
pub struct GrcParams {
    pub d_h: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    /// Dropout on the GELU hidden layer during training; 0 disables it.
    pub hidden_dropout: f64,
}

impl GrcParams {
    pub fn init<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, d_h: usize, rng: &mut R) -> Self {
        GrcParams {
            d_h,
            w1: store.add(format!("{prefix}.W1"), Tensor::glorot(2 * d_h, 4 * d_h, rng)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[4 * d_h])),
            // four d_h gate blocks (z, h, c, u)
            w2: store.add(format!("{prefix}.W2"), Tensor::glorot(4 * d_h, 4 * d_h, rng)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[4 * d_h])),
            ln_gamma: store.add(format!("{prefix}.ln.gamma"), Tensor::ones(&[d_h])),
            ln_beta: store.add(format!("{prefix}.ln.beta"), Tensor::zeros(&[d_h])),
            hidden_dropout: 0.0,
        }
    }

    pub fn bind<'t, T: Real>(&self, store: &ParamStore<T>, tape: &'t Tape<T>) -> Result<Grc<'t, T>> {
        Ok(Grc {
            d_h: self.d_h,
            w1: store.bind(tape, self.w1)?,
            b1: store.bind(tape, self.b1)?,
            w2: store.bind(tape, self.w2)?,
            b2: store.bind(tape, self.b2)?,
            gamma: store.bind(tape, self.ln_gamma)?,
            beta: store.bind(tape, self.ln_beta)?,
            hidden_dropout: self.hidden_dropout,
        })
    }
}

/// Gated Recursive Cell bound to a tape.
pub struct Grc<'t, T> {
    d_h: usize,
    w1: Var<'t, T>,
    b1: Var<'t, T>,
    w2: Var<'t, T>,
    b2: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    hidden_dropout: f64,
}

impl<'t, T: Real> Grc<'t, T> {
    /// `[z;h;c;u] = GELU([l;r]W1 + b1)W2 + b2`,
    /// `out = LN(σ(z)⊙l + σ(h)⊙r + σ(c)⊙u)`.
    pub fn compose<R: Rng + ?Sized>(
        &self,
        left: Var<'t, T>,
        right: Var<'t, T>,
        dropout_rng: Option<&mut R>,
    ) -> Result<Var<'t, T>> {
        let d = self.d_h;
        if left.dims() != right.dims() || left.cols() != d {
            return Err(Error::shape(
                "grc_compose",
                format!("children {:?} and {:?}, d_h = {d}", left.dims(), right.dims()),
            ));
        }
        let tape = left.tape();
        let x = tape.concat(&[left, right], false)?;
        let mut hidden = x.matmul(self.w1)?.add_bias(self.b1)?.gelu()?;
        if let Some(rng) = dropout_rng {
            hidden = dropout(hidden, self.hidden_dropout, rng)?;
        }
        let gates = hidden.matmul(self.w2)?.add_bias(self.b2)?;
        let z = gates.slice_cols(0, d)?.sigmoid()?;
        let h = gates.slice_cols(d, d)?.sigmoid()?;
        let c = gates.slice_cols(2 * d, d)?.sigmoid()?;
        let u = gates.slice_cols(3 * d, d)?;
        let pre = z.mul(left)?.add(h.mul(right)?)?.add(c.mul(u)?)?;
        pre.layer_norm(self.gamma, self.beta, T::from_f64(LN_EPS))
    }
}

#[derive(Clone, Debug)]
pub struct TreeLstmParams {
    pub d_h: usize,
    /// `[h_l; h_r] (2d_h) → [i, f_l, f_r, o, g] (5d_h)`
    pub w: ParamId,
    pub b: ParamId,
}

impl TreeLstmParams {
    pub const GATES: usize = 5;

    pub fn init<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, d_h: usize, rng: &mut R) -> Self {
        TreeLstmParams {
            d_h,
            w: store.add(format!("{prefix}.W"), Tensor::glorot(2 * d_h, Self::GATES * d_h, rng)),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[Self::GATES * d_h])),
        }
    }

    pub fn bind<'t, T: Real>(&self, store: &ParamStore<T>, tape: &'t Tape<T>) -> Result<TreeLstm<'t, T>> {
        Ok(TreeLstm {
            d_h: self.d_h,
            w: store.bind(tape, self.w)?,
            b: store.bind(tape, self.b)?,
        })
    }
}

/// Binary tree-LSTM with one forget gate per child.
pub struct TreeLstm<'t, T> {
    d_h: usize,
    w: Var<'t, T>,
    b: Var<'t, T>,
}

impl<'t, T: Real> TreeLstm<'t, T> {
    /// Returns `(h', c')` with `c' = σ(f_l)⊙c_l + σ(f_r)⊙c_r + σ(i)⊙tanh(g)` and `h' = σ(o)⊙tanh(c')`.
    pub fn compose(
        &self,
        left: (Var<'t, T>, Var<'t, T>),
        right: (Var<'t, T>, Var<'t, T>),
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let d = self.d_h;
        let dims = left.0.dims();
        if [left.1, right.0, right.1].iter().any(|v| v.dims() != dims) || dims.1 != d {
            return Err(Error::shape("tree_lstm_compose", format!("children must all be r×{d}")));
        }
        let tape = left.0.tape();
        let gates = tape
            .concat(&[left.0, right.0], false)?
            .matmul(self.w)?
            .add_bias(self.b)?;
        let i = gates.slice_cols(0, d)?.sigmoid()?;
        let fl = gates.slice_cols(d, d)?.sigmoid()?;
        let fr = gates.slice_cols(2 * d, d)?.sigmoid()?;
        let o = gates.slice_cols(3 * d, d)?.sigmoid()?;
        let g = gates.slice_cols(4 * d, d)?.tanh()?;
        let c = fl.mul(left.1)?.add(fr.mul(right.1)?)?.add(i.mul(g)?)?;
        let h = o.mul(c.tanh()?)?;
        Ok((h, c))
    }
}

type Pair<'t, T> = (NodeState<'t, T>, NodeState<'t, T>);

/// Composition function bound to a tape.
pub enum BoundCell<'t, T> {
    Grc(Grc<'t, T>),
    TreeLstm(TreeLstm<'t, T>),
}

impl<'t, T: Real> BoundCell<'t, T> {
    pub fn has_memory(&self) -> bool {
        matches!(self, BoundCell::TreeLstm(_))
    }

    /// Composes each `(left, right)` pair in one batched matmul chain and
    /// returns the parents stacked as rows (`h`, and `c` for memory cells).
    pub fn compose_batch<R: Rng + ?Sized>(
        &self,
        pairs: &[(NodeState<'t, T>, NodeState<'t, T>)],
        dropout_rng: Option<&mut R>,
    ) -> Result<(Var<'t, T>, Option<Var<'t, T>>)> {
        let first = pairs.first().ok_or(Error::Empty("compose"))?;
        let tape = first.0.h.tape();
        let stack = |f: &dyn Fn(&Pair<'t, T>) -> Result<Var<'t, T>>| -> Result<Var<'t, T>> {
            let rows = pairs.iter().map(f).collect::<Result<Vec<_>>>()?;
            tape.concat(&rows, true)
        };
        let memory = |n: &NodeState<'t, T>| {
            n.c.ok_or_else(|| Error::shape("tree_lstm_compose", "missing cell memory"))
        };
        match self {
            BoundCell::Grc(grc) => {
                let l = stack(&|p| Ok(p.0.h))?;
                let r = stack(&|p| Ok(p.1.h))?;
                Ok((grc.compose(l, r, dropout_rng)?, None))
            }
            BoundCell::TreeLstm(lstm) => {
                let lh = stack(&|p| Ok(p.0.h))?;
                let lc = stack(&|p| memory(&p.0))?;
                let rh = stack(&|p| Ok(p.1.h))?;
                let rc = stack(&|p| memory(&p.1))?;
                let (h, c) = lstm.compose((lh, lc), (rh, rc))?;
                Ok((h, Some(c)))
            }
        }
    }

    /// Like [`BoundCell::compose_batch`] but split back into one node per pair.
    pub fn compose_pairs<R: Rng + ?Sized>(
        &self,
        pairs: &[(NodeState<'t, T>, NodeState<'t, T>)],
        dropout_rng: Option<&mut R>,
    ) -> Result<Vec<NodeState<'t, T>>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let (h, c) = self.compose_batch(pairs, dropout_rng)?;
        split_rows(h, c)
    }

    pub fn compose<R: Rng + ?Sized>(
        &self,
        left: NodeState<'t, T>,
        right: NodeState<'t, T>,
        dropout_rng: Option<&mut R>,
    ) -> Result<NodeState<'t, T>> {
        Ok(self.compose_pairs(&[(left, right)], dropout_rng)?.remove(0))
    }
}

#[derive(Clone, Debug)]
pub struct ScorerParams {
    pub w_v: ParamId,
}

impl ScorerParams {
    pub fn init<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, d_h: usize, rng: &mut R) -> Self {
        ScorerParams {
            w_v: store.add(format!("{prefix}.W_v"), Tensor::glorot(d_h, 1, rng)),
        }
    }
}

/// `score(v) = v·W_v`, batched over rows: `r×d_h → r×1`.
pub fn score<'t, T: Real>(v: Var<'t, T>, w_v: Var<'t, T>) -> Result<Var<'t, T>> {
    if w_v.cols() != 1 {
        return Err(Error::shape(
            "score",
            format!("W_v must have one column, got {}", w_v.cols()),
        ));
    }
    v.matmul(w_v)
        .map_err(|_| Error::shape("score", format!("{:?} · {:?}", v.dims(), w_v.dims())))
}

#[derive(Clone, Debug)]
pub struct LeafParams {
    pub vocab: usize,
    pub d_e: usize,
    pub d_h: usize,
    pub embedding: ParamId,
    pub projection: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

impl LeafParams {
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        vocab: usize,
        d_e: usize,
        d_h: usize,
        rng: &mut R,
    ) -> Self {
        LeafParams {
            vocab,
            d_e,
            d_h,
            embedding: store.add(format!("{prefix}.embedding"), Tensor::glorot(vocab, d_e, rng)),
            projection: store.add(format!("{prefix}.projection"), Tensor::glorot(d_e, d_h, rng)),
            ln_gamma: store.add(format!("{prefix}.ln.gamma"), Tensor::ones(&[d_h])),
            ln_beta: store.add(format!("{prefix}.ln.beta"), Tensor::zeros(&[d_h])),
        }
    }

    /// `LN(embed(token)·projection)` for every token; returns an `n×d_h` matrix.
    /// `dropout` is `Some((rate, rng))` only in training mode and applies to the embeddings.
    pub fn transform<'t, T: Real, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<T>,
        tape: &'t Tape<T>,
        tokens: &[usize],
        dropout_cfg: Option<(f64, &mut R)>,
    ) -> Result<Var<'t, T>> {
        if tokens.is_empty() {
            return Err(Error::Empty("leaf_transform"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::shape(
                "leaf_transform",
                format!("token id {bad} outside vocabulary of {}", self.vocab),
            ));
        }
        let mut e = store.bind(tape, self.embedding)?.gather_rows(tokens)?;
        if let Some((rate, rng)) = dropout_cfg {
            e = dropout(e, rate, rng)?;
        }
        let proj = e.matmul(store.bind(tape, self.projection)?)?;
        proj.layer_norm(
            store.bind(tape, self.ln_gamma)?,
            store.bind(tape, self.ln_beta)?,
            T::from_f64(LN_EPS),
        )
    }
}
