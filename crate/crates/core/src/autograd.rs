//! Tape-based reverse-mode automatic differentiation over 2-D values.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Each
//! [`Var`] is a cheap `Copy` handle into the tape. Calling
//! [`Tape::backward`] on a scalar walks the records in reverse and returns
//! [`Gradients`] for every leaf and parameter that reaches the loss.
//!
//! Values are matrices; a vector of size `d` is a `1×d` row and a scalar is
//! `1×1`. Binary elementwise ops accept either equal shapes or one `1×1`
//! operand. Every op checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`] instead of recording a poisoned value.

use std::cell::{Cell, Ref, RefCell};

use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tensor::{Real, Tensor};

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, T),
    AddConst(usize),
    Neg(usize),
    Sigmoid(usize),
    Tanh(usize),
    Gelu(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Concat {
        inputs: Vec<usize>,
        rows: bool,
    },
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    RowScale(usize, usize),
    Sum(usize),
    MulConst(usize, Vec<T>),
    StraightThrough(usize),
}

struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of primitive applications for one forward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(usize, ParamId)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf or parameter var; `None` when the loss does not depend on it.
    pub fn get(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but returns zeros for unreachable vars.
    pub fn get_or_zero(&self, var: Var<'_, T>) -> Vec<T> {
        match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); var.len()],
        }
    }

    /// Per-parameter gradient contributions, in recording order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> + '_ {
        self.params
            .iter()
            .filter_map(|&(node, pid)| self.grads[node].as_deref().map(|g| (pid, g)))
    }
}

fn same_or_scalar(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    if a == b {
        Ok(a)
    } else if a == (1, 1) {
        Ok(b)
    } else if b == (1, 1) {
        Ok(a)
    } else {
        Err(Error::shape(op, format!("{}x{} vs {}x{}", a.0, a.1, b.0, b.1)))
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn std_normal_cdf<T: Real>(x: T) -> T {
    T::from_f64(0.5) * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn std_normal_pdf<T: Real>(x: T) -> T {
    T::from_f64(0.398_942_280_401_432_7) * (T::from_f64(-0.5) * x * x).exp()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        name: &'static str,
        rows: usize,
        cols: usize,
        value: Vec<T>,
        op: Op<T>,
        needs_grad: bool,
    ) -> Result<Var<'_, T>> {
        debug_assert_eq!(rows * cols, value.len());
        if !value.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn leaf_from(&self, name: &'static str, t: &Tensor<T>, op: Op<T>, grad: bool) -> Result<Var<'_, T>> {
        let (r, c) = t.matrix_dims();
        self.push(name, r, c, t.data().to_vec(), op, grad)
    }

    /// A differentiable leaf.
    pub fn var(&self, t: &Tensor<T>) -> Result<Var<'_, T>> {
        self.leaf_from("leaf", t, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, t: &Tensor<T>) -> Result<Var<'_, T>> {
        self.leaf_from("constant", t, Op::Constant, false)
    }

    pub fn scalar(&self, x: T) -> Result<Var<'_, T>> {
        self.push("constant", 1, 1, vec![x], Op::Constant, false)
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Var<'_, T> {
        self.push(
            "constant",
            rows,
            cols,
            vec![T::zero(); rows * cols],
            Op::Constant,
            false,
        )
        .expect("zeros are finite")
    }

    /// Registers a parameter value so its gradient is reported under `id`.
    pub fn param(&self, id: ParamId, t: &Tensor<T>) -> Result<Var<'_, T>> {
        self.leaf_from("param", t, Op::Param(id), true)
    }

    /// Row- (`rows = true`) or column-wise concatenation.
    pub fn concat(&self, parts: &[Var<'_, T>], rows: bool) -> Result<Var<'_, T>> {
        let first = parts.first().ok_or(Error::Empty("concat"))?;
        if parts.len() == 1 {
            return Ok(Var {
                tape: self,
                id: first.id,
            });
        }
        let nodes = self.nodes.borrow();
        let dims: Vec<(usize, usize)> = parts.iter().map(|p| (nodes[p.id].rows, nodes[p.id].cols)).collect();
        let needs_grad = parts.iter().any(|p| nodes[p.id].needs_grad);
        let (out_r, out_c, value) = if rows {
            let c = dims[0].1;
            if dims.iter().any(|d| d.1 != c) {
                return Err(Error::shape("concat", format!("column counts differ: {dims:?}")));
            }
            let r = dims.iter().map(|d| d.0).sum();
            let mut v = Vec::with_capacity(r * c);
            for p in parts {
                v.extend_from_slice(&nodes[p.id].value);
            }
            (r, c, v)
        } else {
            let r = dims[0].0;
            if dims.iter().any(|d| d.0 != r) {
                return Err(Error::shape("concat", format!("row counts differ: {dims:?}")));
            }
            let c = dims.iter().map(|d| d.1).sum();
            let mut v = Vec::with_capacity(r * c);
            for i in 0..r {
                for (p, d) in parts.iter().zip(&dims) {
                    v.extend_from_slice(&nodes[p.id].value[i * d.1..(i + 1) * d.1]);
                }
            }
            (r, c, v)
        };
        let inputs = parts.iter().map(|p| p.id).collect();
        drop(nodes);
        self.push("concat", out_r, out_c, value, Op::Concat { inputs, rows }, needs_grad)
    }

    /// Runs reverse accumulation from a scalar `loss`. A tape supports one backward pass.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.rows != 1 || root.cols != 1 {
            return Err(Error::NonScalarLoss {
                rows: root.rows,
                cols: root.cols,
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(g) = grads[id].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[id] = Some(g);
            }
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(pid) => Some((i, pid)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: usize, f: impl FnOnce(&mut [T])) {
    let node = &nodes[id];
    if !node.needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![T::zero(); node.value.len()]);
    f(slot);
}

/// Adds `g` (shaped like the op output) into an operand that may be a broadcast scalar.
fn accumulate_broadcast<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    g: &[T],
    factor: Option<&[T]>,
    negate: bool,
) {
    let n = nodes[id].value.len();
    let sign = if negate { -T::one() } else { T::one() };
    accumulate(nodes, grads, id, |acc| {
        let term = |i: usize| -> T {
            let f = factor.map_or(T::one(), |f| if f.len() == 1 { f[0] } else { f[i] });
            sign * g[i] * f
        };
        if n == g.len() {
            for (i, a) in acc.iter_mut().enumerate() {
                *a += term(i);
            }
        } else {
            let mut s = T::zero();
            for i in 0..g.len() {
                s += term(i);
            }
            acc[0] += s;
        }
    });
}

fn backprop<T: Real>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    let y = &node.value;
    match &node.op {
        Op::Leaf | Op::Param(_) | Op::Constant => {}
        &Op::MatMul(a, b) => {
            let (m, k) = (nodes[a].rows, nodes[a].cols);
            let n = nodes[b].cols;
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            accumulate(nodes, grads, a, |ga| {
                // ga += g(m×n) · bᵀ(n×k)
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    g,
                    n as isize,
                    1,
                    bv,
                    1,
                    n as isize,
                    T::one(),
                    ga,
                    k as isize,
                    1,
                );
            });
            accumulate(nodes, grads, b, |gb| {
                // gb += aᵀ(k×m) · g(m×n)
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    av,
                    1,
                    k as isize,
                    g,
                    n as isize,
                    1,
                    T::one(),
                    gb,
                    n as isize,
                    1,
                );
            });
        }
        &Op::Add(a, b) => {
            accumulate_broadcast(nodes, grads, a, g, None, false);
            accumulate_broadcast(nodes, grads, b, g, None, false);
        }
        &Op::Sub(a, b) => {
            accumulate_broadcast(nodes, grads, a, g, None, false);
            accumulate_broadcast(nodes, grads, b, g, None, true);
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            accumulate_broadcast(nodes, grads, a, g, Some(bv), false);
            accumulate_broadcast(nodes, grads, b, g, Some(av), false);
        }
        &Op::AddBias(x, bias) => {
            let cols = node.cols;
            accumulate(nodes, grads, x, |gx| {
                for (a, &gi) in gx.iter_mut().zip(g) {
                    *a += gi;
                }
            });
            accumulate(nodes, grads, bias, |gb| {
                for row in g.chunks_exact(cols) {
                    for (a, &gi) in gb.iter_mut().zip(row) {
                        *a += gi;
                    }
                }
            });
        }
        &Op::Scale(x, s) => accumulate(nodes, grads, x, |gx| {
            for (a, &gi) in gx.iter_mut().zip(g) {
                *a += s * gi;
            }
        }),
        &Op::AddConst(x) => accumulate(nodes, grads, x, |gx| {
            for (a, &gi) in gx.iter_mut().zip(g) {
                *a += gi;
            }
        }),
        &Op::Neg(x) => accumulate(nodes, grads, x, |gx| {
            for (a, &gi) in gx.iter_mut().zip(g) {
                *a -= gi;
            }
        }),
        &Op::Sigmoid(x) => accumulate(nodes, grads, x, |gx| {
            for ((a, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                *a += gi * yi * (T::one() - yi);
            }
        }),
        &Op::Tanh(x) => accumulate(nodes, grads, x, |gx| {
            for ((a, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                *a += gi * (T::one() - yi * yi);
            }
        }),
        &Op::Gelu(x) => {
            let xv = &nodes[x].value;
            accumulate(nodes, grads, x, |gx| {
                for ((a, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    *a += gi * (std_normal_cdf(xi) + xi * std_normal_pdf(xi));
                }
            })
        }
        &Op::Exp(x) => accumulate(nodes, grads, x, |gx| {
            for ((a, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                *a += gi * yi;
            }
        }),
        &Op::Log(x) => {
            let xv = &nodes[x].value;
            accumulate(nodes, grads, x, |gx| {
                for ((a, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    *a += gi / xi;
                }
            })
        }
        &Op::Softmax(x) => {
            let cols = node.cols;
            accumulate(nodes, grads, x, |gx| {
                for ((ga, gr), yr) in gx
                    .chunks_exact_mut(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(y.chunks_exact(cols))
                {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((a, &gi), &yi) in ga.iter_mut().zip(gr).zip(yr) {
                        *a += yi * (gi - dot);
                    }
                }
            })
        }
        &Op::LogSoftmax(x) => {
            let cols = node.cols;
            accumulate(nodes, grads, x, |gx| {
                for ((ga, gr), yr) in gx
                    .chunks_exact_mut(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(y.chunks_exact(cols))
                {
                    let total: T = gr.iter().copied().sum();
                    for ((a, &gi), &yi) in ga.iter_mut().zip(gr).zip(yr) {
                        *a += gi - yi.exp() * total;
                    }
                }
            })
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let cols = node.cols;
            let gv = &nodes[*gamma].value;
            accumulate(nodes, grads, *gamma, |gg| {
                for (gr, xr) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                    for ((a, &gi), &xi) in gg.iter_mut().zip(gr).zip(xr) {
                        *a += gi * xi;
                    }
                }
            });
            accumulate(nodes, grads, *beta, |gb| {
                for gr in g.chunks_exact(cols) {
                    for (a, &gi) in gb.iter_mut().zip(gr) {
                        *a += gi;
                    }
                }
            });
            accumulate(nodes, grads, *x, |gx| {
                let inv_n = T::one() / T::from_f64(cols as f64);
                let mut dxhat = vec![T::zero(); cols];
                for (row, ((ga, gr), xr)) in gx
                    .chunks_exact_mut(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(xhat.chunks_exact(cols))
                    .enumerate()
                {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..cols {
                        dxhat[j] = gr[j] * gv[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xr[j];
                    }
                    mean_d *= inv_n;
                    mean_dx *= inv_n;
                    let r = rstd[row];
                    for j in 0..cols {
                        ga[j] += r * (dxhat[j] - mean_d - xr[j] * mean_dx);
                    }
                }
            });
        }
        Op::Concat { inputs, rows } => {
            if *rows {
                let mut offset = 0;
                for &p in inputs {
                    let len = nodes[p].value.len();
                    accumulate(nodes, grads, p, |gp| {
                        for (a, &gi) in gp.iter_mut().zip(&g[offset..offset + len]) {
                            *a += gi;
                        }
                    });
                    offset += len;
                }
            } else {
                let total = node.cols;
                let mut offset = 0;
                for &p in inputs {
                    let c = nodes[p].cols;
                    accumulate(nodes, grads, p, |gp| {
                        for (ga, gr) in gp.chunks_exact_mut(c).zip(g.chunks_exact(total)) {
                            for (a, &gi) in ga.iter_mut().zip(&gr[offset..offset + c]) {
                                *a += gi;
                            }
                        }
                    });
                    offset += c;
                }
            }
        }
        &Op::SliceRows(x, start) => {
            let c = node.cols;
            accumulate(nodes, grads, x, |gx| {
                for (a, &gi) in gx[start * c..start * c + g.len()].iter_mut().zip(g) {
                    *a += gi;
                }
            })
        }
        &Op::SliceCols(x, start) => {
            let (c, total) = (node.cols, nodes[x].cols);
            accumulate(nodes, grads, x, |gx| {
                for (ga, gr) in gx.chunks_exact_mut(total).zip(g.chunks_exact(c)) {
                    for (a, &gi) in ga[start..start + c].iter_mut().zip(gr) {
                        *a += gi;
                    }
                }
            })
        }
        Op::GatherRows(x, idx) => {
            let c = node.cols;
            accumulate(nodes, grads, *x, |gx| {
                for (&r, gr) in idx.iter().zip(g.chunks_exact(c)) {
                    for (a, &gi) in gx[r * c..(r + 1) * c].iter_mut().zip(gr) {
                        *a += gi;
                    }
                }
            })
        }
        &Op::RowScale(m, w) => {
            let c = node.cols;
            let (mv, wv) = (&nodes[m].value, &nodes[w].value);
            accumulate(nodes, grads, m, |gm| {
                for ((ga, gr), &wi) in gm.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(wv) {
                    for (a, &gi) in ga.iter_mut().zip(gr) {
                        *a += wi * gi;
                    }
                }
            });
            accumulate(nodes, grads, w, |gw| {
                for ((a, gr), mr) in gw.iter_mut().zip(g.chunks_exact(c)).zip(mv.chunks_exact(c)) {
                    *a += gr.iter().zip(mr).map(|(&p, &q)| p * q).sum::<T>();
                }
            });
        }
        &Op::Sum(x) => accumulate(nodes, grads, x, |gx| {
            for a in gx.iter_mut() {
                *a += g[0];
            }
        }),
        Op::MulConst(x, mask) => accumulate(nodes, grads, *x, |gx| {
            for ((a, &gi), &mi) in gx.iter_mut().zip(g).zip(mask) {
                *a += gi * mi;
            }
        }),
        &Op::StraightThrough(soft) => accumulate(nodes, grads, soft, |gs| {
            for (a, &gi) in gs.iter_mut().zip(g) {
                *a += gi;
            }
        }),
    }
}

// The arithmetic methods return `Result`, so the operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn dims(&self) -> (usize, usize) {
        let nodes = self.tape.nodes.borrow();
        (nodes[self.id].rows, nodes[self.id].cols)
    }

    pub fn rows(&self) -> usize {
        self.dims().0
    }

    pub fn cols(&self) -> usize {
        self.dims().1
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Borrowed view of the value; drop it before recording further ops.
    pub fn value(&self) -> Ref<'t, [T]> {
        Ref::map(self.tape.nodes.borrow(), |n| n[self.id].value.as_slice())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.value().to_vec()
    }

    /// Value of a `1×1` var.
    pub fn item(&self) -> T {
        let v = self.value();
        debug_assert_eq!(v.len(), 1);
        v[0]
    }

    fn unary(self, name: &'static str, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var<'t, T>> {
        let (rows, cols, value, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.rows, n.cols, n.value.iter().map(|&x| f(x)).collect(), n.needs_grad)
        };
        self.tape.push(name, rows, cols, value, op, ng)
    }

    fn binary(self, other: Var<'t, T>, name: &'static str, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var<'t, T>> {
        let (rows, cols, value, ng) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (rows, cols) = same_or_scalar(name, (a.rows, a.cols), (b.rows, b.cols))?;
            let n = rows * cols;
            let pick = |v: &[T], i: usize| if v.len() == 1 { v[0] } else { v[i] };
            let value = (0..n).map(|i| f(pick(&a.value, i), pick(&b.value, i))).collect();
            (rows, cols, value, a.needs_grad || b.needs_grad)
        };
        self.tape.push(name, rows, cols, value, op, ng)
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (value, m, n, ng) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.cols != b.rows {
                return Err(Error::shape(
                    "matmul",
                    format!("{}x{} · {}x{}", a.rows, a.cols, b.rows, b.cols),
                ));
            }
            let (m, k, n) = (a.rows, a.cols, b.cols);
            let mut out = vec![T::zero(); m * n];
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &a.value,
                k as isize,
                1,
                &b.value,
                n as isize,
                1,
                T::zero(),
                &mut out,
                n as isize,
                1,
            );
            (out, m, n, a.needs_grad || b.needs_grad)
        };
        self.tape.push("matmul", m, n, value, Op::MatMul(self.id, other.id), ng)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Adds a `1×cols` bias to every row.
    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (rows, cols, value, ng) = {
            let nodes = self.tape.nodes.borrow();
            let (x, b) = (&nodes[self.id], &nodes[bias.id]);
            if b.value.len() != x.cols {
                return Err(Error::shape(
                    "add_bias",
                    format!("bias of {} for {} columns", b.value.len(), x.cols),
                ));
            }
            let mut v = x.value.clone();
            for row in v.chunks_exact_mut(x.cols) {
                for (a, &bi) in row.iter_mut().zip(&b.value) {
                    *a += bi;
                }
            }
            (x.rows, x.cols, v, x.needs_grad || b.needs_grad)
        };
        self.tape
            .push("add_bias", rows, cols, value, Op::AddBias(self.id, bias.id), ng)
    }

    pub fn scale(self, s: T) -> Result<Var<'t, T>> {
        self.unary("scale", Op::Scale(self.id, s), |x| x * s)
    }

    pub fn add_const(self, c: T) -> Result<Var<'t, T>> {
        self.unary("add_const", Op::AddConst(self.id), |x| x + c)
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.unary("neg", Op::Neg(self.id), |x| -x)
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(self) -> Result<Var<'t, T>> {
        self.unary("tanh", Op::Tanh(self.id), |x| x.tanh())
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(self) -> Result<Var<'t, T>> {
        self.unary("gelu", Op::Gelu(self.id), |x| x * std_normal_cdf(x))
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        self.unary("exp", Op::Exp(self.id), |x| x.exp())
    }

    pub fn log(self) -> Result<Var<'t, T>> {
        if let Some(bad) = self.value().iter().find(|&&x| x <= T::zero()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive argument {bad}"),
            });
        }
        self.unary("log", Op::Log(self.id), |x| x.ln())
    }

    fn rowwise(self, name: &'static str, op: Op<T>, f: impl Fn(&[T], &mut Vec<T>)) -> Result<Var<'t, T>> {
        let (rows, cols, value, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if n.cols == 0 {
                return Err(Error::Empty(name));
            }
            let mut out = Vec::with_capacity(n.value.len());
            for row in n.value.chunks_exact(n.cols) {
                f(row, &mut out);
            }
            (n.rows, n.cols, out, n.needs_grad)
        };
        self.tape.push(name, rows, cols, value, op, ng)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(self) -> Result<Var<'t, T>> {
        self.rowwise("softmax", Op::Softmax(self.id), |row, out| {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let start = out.len();
            let mut z = T::zero();
            for &x in row {
                let e = (x - m).exp();
                z += e;
                out.push(e);
            }
            for v in &mut out[start..] {
                *v = *v / z;
            }
        })
    }

    /// Row-wise `log ∘ softmax`, evaluated as `x - max - log Σ exp(x - max)`.
    pub fn log_softmax(self) -> Result<Var<'t, T>> {
        self.rowwise("log_softmax", Op::LogSoftmax(self.id), |row, out| {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let z: T = row.iter().map(|&x| (x - m).exp()).sum();
            let lz = z.ln();
            out.extend(row.iter().map(|&x| x - m - lz));
        })
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let (rows, cols, value, xhat, rstd, ng) = {
            let nodes = self.tape.nodes.borrow();
            let (x, g, b) = (&nodes[self.id], &nodes[gamma.id], &nodes[beta.id]);
            if g.value.len() != x.cols || b.value.len() != x.cols {
                return Err(Error::shape(
                    "layer_norm",
                    format!(
                        "gamma/beta of {}/{} for {} columns",
                        g.value.len(),
                        b.value.len(),
                        x.cols
                    ),
                ));
            }
            let inv_n = T::one() / T::from_f64(x.cols as f64);
            let mut xhat = Vec::with_capacity(x.value.len());
            let mut rstd = Vec::with_capacity(x.rows);
            let mut out = Vec::with_capacity(x.value.len());
            for row in x.value.chunks_exact(x.cols) {
                let mean = row.iter().copied().sum::<T>() * inv_n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
                let r = T::one() / (var + eps).sqrt();
                rstd.push(r);
                for (j, &v) in row.iter().enumerate() {
                    let h = (v - mean) * r;
                    xhat.push(h);
                    out.push(h * g.value[j] + b.value[j]);
                }
            }
            (
                x.rows,
                x.cols,
                out,
                xhat,
                rstd,
                x.needs_grad || g.needs_grad || b.needs_grad,
            )
        };
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            rstd,
        };
        self.tape.push("layer_norm", rows, cols, value, op, ng)
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let (cols, value, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if len == 0 || start + len > n.rows {
                return Err(Error::shape(
                    "slice_rows",
                    format!("rows {start}..{} of {}", start + len, n.rows),
                ));
            }
            (
                n.cols,
                n.value[start * n.cols..(start + len) * n.cols].to_vec(),
                n.needs_grad,
            )
        };
        self.tape
            .push("slice_rows", len, cols, value, Op::SliceRows(self.id, start), ng)
    }

    pub fn row(self, i: usize) -> Result<Var<'t, T>> {
        self.slice_rows(i, 1)
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let (rows, value, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if len == 0 || start + len > n.cols {
                return Err(Error::shape(
                    "slice_cols",
                    format!("cols {start}..{} of {}", start + len, n.cols),
                ));
            }
            let v = n
                .value
                .chunks_exact(n.cols)
                .flat_map(|r| r[start..start + len].iter().copied())
                .collect();
            (n.rows, v, n.needs_grad)
        };
        self.tape
            .push("slice_cols", rows, len, value, Op::SliceCols(self.id, start), ng)
    }

    /// Element `i` of a row vector as a `1×1` var.
    pub fn elem(self, i: usize) -> Result<Var<'t, T>> {
        if self.rows() == 1 {
            self.slice_cols(i, 1)
        } else {
            self.slice_rows(i, 1).and_then(|r| {
                if r.cols() == 1 {
                    Ok(r)
                } else {
                    Err(Error::shape("elem", "not a vector"))
                }
            })
        }
    }

    /// Stacks the selected rows, e.g. an embedding lookup.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t, T>> {
        let (cols, value, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let mut v = Vec::with_capacity(idx.len() * n.cols);
            for &r in idx {
                if r >= n.rows {
                    return Err(Error::shape("gather_rows", format!("row {r} of {}", n.rows)));
                }
                v.extend_from_slice(&n.value[r * n.cols..(r + 1) * n.cols]);
            }
            (n.cols, v, n.needs_grad)
        };
        if idx.is_empty() {
            return Err(Error::Empty("gather_rows"));
        }
        self.tape.push(
            "gather_rows",
            idx.len(),
            cols,
            value,
            Op::GatherRows(self.id, idx.to_vec()),
            ng,
        )
    }

    /// Multiplies row `i` by `w[i]`; `w` holds one weight per row.
    pub fn row_scale(self, w: Var<'t, T>) -> Result<Var<'t, T>> {
        let (rows, cols, value, ng) = {
            let nodes = self.tape.nodes.borrow();
            let (m, wn) = (&nodes[self.id], &nodes[w.id]);
            if wn.value.len() != m.rows {
                return Err(Error::shape(
                    "row_scale",
                    format!("{} weights for {} rows", wn.value.len(), m.rows),
                ));
            }
            let mut v = m.value.clone();
            for (row, &wi) in v.chunks_exact_mut(m.cols).zip(&wn.value) {
                for a in row {
                    *a *= wi;
                }
            }
            (m.rows, m.cols, v, m.needs_grad || wn.needs_grad)
        };
        self.tape
            .push("row_scale", rows, cols, value, Op::RowScale(self.id, w.id), ng)
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let (value, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.value.iter().copied().sum::<T>(), n.needs_grad)
        };
        self.tape.push("sum", 1, 1, vec![value], Op::Sum(self.id), ng)
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mul_const(self, mask: Vec<T>) -> Result<Var<'t, T>> {
        if mask.len() != self.len() {
            return Err(Error::shape(
                "mul_const",
                format!("mask of {} for {}", mask.len(), self.len()),
            ));
        }
        let (rows, cols, value, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (
                n.rows,
                n.cols,
                n.value.iter().zip(&mask).map(|(&a, &b)| a * b).collect(),
                n.needs_grad,
            )
        };
        self.tape
            .push("mul_const", rows, cols, value, Op::MulConst(self.id, mask), ng)
    }

    /// Straight-through one-hot: the forward value is exactly `onehot(index)`,
    /// the backward pass hands the incoming gradient to `self` unchanged.
    pub fn straight_through(self, index: usize) -> Result<Var<'t, T>> {
        let (rows, cols, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.rows, n.cols, n.needs_grad)
        };
        if index >= rows * cols {
            return Err(Error::shape(
                "straight_through",
                format!("index {index} of {}", rows * cols),
            ));
        }
        let mut v = vec![T::zero(); rows * cols];
        v[index] = T::one();
        self.tape
            .push("straight_through", rows, cols, v, Op::StraightThrough(self.id), ng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let tape = Tape::<f64>::new();
        let a = tape.var(&t(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let b = tape.var(&t(&[&[1.0], &[1.0]])).unwrap();
        let c = a.matmul(b).unwrap();
        assert_eq!(c.dims(), (2, 1));
        assert_eq!(c.to_vec(), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::<f64>::new();
        let a = tape.var(&t(&[&[1.5, -2.0, 0.25], &[3.0, 4.0, 9.0]])).unwrap();
        let i = tape
            .constant(&t(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]))
            .unwrap();
        assert_eq!(a.matmul(i).unwrap().to_vec(), a.to_vec());
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let tape = Tape::<f64>::new();
        let a = tape.var(&t(&[&[1.0, 2.0]])).unwrap();
        assert!(matches!(a.matmul(a), Err(Error::Shape { .. })));
    }

    #[test]
    fn pointwise_anchors() {
        let tape = Tape::<f64>::new();
        let z = tape.scalar(0.0).unwrap();
        assert_eq!(z.sigmoid().unwrap().item(), 0.5);
        assert_eq!(z.gelu().unwrap().item(), 0.0);
        let neg = tape.scalar(-1.0).unwrap();
        assert!(matches!(neg.log(), Err(Error::Domain { .. })));
        let big = tape.scalar(1000.0).unwrap();
        assert!(matches!(big.exp(), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn softmax_anchors() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::vector(&[0.0, 0.0])).unwrap();
        assert_eq!(x.softmax().unwrap().to_vec(), vec![0.5, 0.5]);
        let x = tape.constant(&Tensor::vector(&[1000.0, 0.0])).unwrap();
        let s = x.softmax().unwrap().to_vec();
        assert!((s[0] - 1.0).abs() < 1e-9 && s[1].abs() < 1e-9);
        let x = tape.constant(&Tensor::vector(&[2.0, 1.0, 0.0])).unwrap();
        let ls = x.log_softmax().unwrap().to_vec();
        for (got, want) in ls.iter().zip([-0.40761, -1.40761, -2.40761]) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn layer_norm_anchors() {
        let tape = Tape::<f64>::new();
        let g = tape.constant(&Tensor::ones(&[4])).unwrap();
        let b = tape.constant(&Tensor::zeros(&[4])).unwrap();
        let x = tape.constant(&Tensor::vector(&[3.0; 4])).unwrap();
        assert!(x
            .layer_norm(g, b, 1e-5)
            .unwrap()
            .to_vec()
            .iter()
            .all(|v| v.abs() < 1e-12));

        let g = tape.constant(&Tensor::ones(&[2])).unwrap();
        let b = tape.constant(&Tensor::zeros(&[2])).unwrap();
        let x = tape.constant(&Tensor::vector(&[1.0, -1.0])).unwrap();
        let y = x.layer_norm(g, b, 0.0).unwrap().to_vec();
        assert_eq!(y, vec![1.0, -1.0]);
    }

    #[test]
    fn square_gradient_and_unreachable_leaf() {
        let tape = Tape::<f64>::new();
        let x = tape.var(&Tensor::vector(&[3.0])).unwrap();
        let p = tape.var(&Tensor::vector(&[5.0])).unwrap();
        let loss = x.mul(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x), Some(&[6.0][..]));
        assert_eq!(grads.get_or_zero(p), vec![0.0]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::<f64>::new();
        let x = tape.var(&Tensor::vector(&[1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss { .. })));

        let tape = Tape::<f64>::new();
        let x = tape.var(&Tensor::vector(&[1.0])).unwrap();
        let y = x.scale(2.0).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
    }

    #[test]
    fn straight_through_is_exact_one_hot() {
        let tape = Tape::<f64>::new();
        let soft = tape.var(&Tensor::vector(&[0.2, 0.7, 0.1])).unwrap();
        let hard = soft.straight_through(1).unwrap();
        assert_eq!(hard.to_vec(), vec![0.0, 1.0, 0.0]);
        let w = tape.constant(&Tensor::vector(&[1.0, 2.0, 3.0])).unwrap();
        let loss = hard.mul(w).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(soft).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn scalar_broadcast_only() {
        let tape = Tape::<f64>::new();
        let a = tape.var(&Tensor::vector(&[1.0, 2.0, 3.0])).unwrap();
        let s = tape.var(&Tensor::vector(&[2.0])).unwrap();
        let b = tape.var(&Tensor::vector(&[1.0, 2.0])).unwrap();
        assert_eq!(a.mul(s).unwrap().to_vec(), vec![2.0, 4.0, 6.0]);
        assert!(a.add(b).is_err());
        let loss = a.mul(s).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(s).unwrap(), &[6.0]);
    }
}
