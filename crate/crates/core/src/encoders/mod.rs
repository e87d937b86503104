//! Sequence encoders: a recurrent fold, fixed-tree recursion, easy-first
//! Gumbel-Tree composition, the beam tree cell, a beam shift-reduce parser
//! and a Monte-Carlo average of Gumbel-Tree samples.
//!
//! Every encoder maps an `n×d_h` matrix of leaf vectors to one `1×d_h`
//! encoding and reports the hypotheses it kept as [`BeamState`]s so parses can
//! be extracted afterwards.

mod beam;
mod easy_first;
mod fixed;
mod shift_reduce;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::cells::{self, BoundCell, CellKind, GrcParams, NodeState, ScorerParams, TreeLstmParams};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::topk::{BeamState, TopKMode, TopKVariant};
use crate::tree::ParseTree;

pub use beam::encode_bt_cell;
pub use easy_first::{encode_easy_first_gumbel, encode_mc_gumbel};
pub use fixed::{encode_fixed_tree, encode_recurrent};
pub use shift_reduce::encode_bsrp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Recurrent,
    GoldTree,
    Balanced,
    RandomTree,
    GumbelTree,
    BtCell,
    Bsrp,
    McGumbel,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 8] = [
        EncoderKind::Recurrent,
        EncoderKind::GoldTree,
        EncoderKind::Balanced,
        EncoderKind::RandomTree,
        EncoderKind::GumbelTree,
        EncoderKind::BtCell,
        EncoderKind::Bsrp,
        EncoderKind::McGumbel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Recurrent => "recurrent",
            EncoderKind::GoldTree => "gold_tree",
            EncoderKind::Balanced => "balanced",
            EncoderKind::RandomTree => "random_tree",
            EncoderKind::GumbelTree => "gumbel_tree",
            EncoderKind::BtCell => "bt_cell",
            EncoderKind::Bsrp => "bsrp",
            EncoderKind::McGumbel => "mc_gumbel",
        }
    }

    /// Whether the encoder needs the parse scorer `W_v`.
    pub fn uses_scorer(self) -> bool {
        matches!(
            self,
            EncoderKind::GumbelTree | EncoderKind::BtCell | EncoderKind::McGumbel
        )
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EncoderKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown encoder kind {s:?}")))
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub cell: CellKind,
    /// Beam size for beam encoders, sample count for Monte-Carlo Gumbel.
    pub beam_size: usize,
    pub topk: TopKVariant,
    /// Training-time randomness: Gumbel noise for tree selection and
    /// stochastic top-k. Evaluation is always deterministic.
    pub stochastic: bool,
    pub temperature: f64,
    pub training: bool,
    /// Recurrent encoder starts its fold from a learned `h0`.
    pub use_h0: bool,
    /// Dropout on the GRC hidden layer during training.
    pub cell_dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::BtCell,
            cell: CellKind::Grc,
            beam_size: 5,
            topk: TopKVariant::Plain,
            stochastic: true,
            temperature: 1.0,
            training: false,
            use_h0: true,
            cell_dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::config("beam size must be >= 1"));
        }
        if self.topk == TopKVariant::OneSoft && self.beam_size < 2 && self.kind == EncoderKind::BtCell {
            return Err(Error::config("OneSoft top-k needs beam size >= 2"));
        }
        if self.kind == EncoderKind::Bsrp && self.topk == TopKVariant::OneSoft {
            return Err(Error::config(
                "the shift-reduce beam supports plain top-k only (its beams hold stacks of different depths)",
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..1.0).contains(&self.cell_dropout) {
            return Err(Error::config(format!(
                "cell dropout {} outside [0, 1)",
                self.cell_dropout
            )));
        }
        Ok(())
    }

    /// Ranking mode for top-k and Gumbel selection under this config.
    pub fn topk_mode(&self) -> TopKMode {
        if self.training && self.stochastic {
            TopKMode::Gumbel
        } else {
            TopKMode::Deterministic
        }
    }

    /// Pool truncation operator: OneSoft is a training-time operator and is
    /// replaced by plain top-k in evaluation.
    pub fn effective_topk(&self) -> TopKVariant {
        if self.training {
            self.topk
        } else {
            TopKVariant::Plain
        }
    }

    pub fn eval(&self) -> Self {
        EncoderConfig {
            training: false,
            ..self.clone()
        }
    }

    pub fn train(&self) -> Self {
        EncoderConfig {
            training: true,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub enum CellParams {
    Grc(GrcParams),
    TreeLstm(TreeLstmParams),
}

#[derive(Clone, Debug)]
pub struct BsrpParams {
    /// `[stack[-2]; stack[-1]; queue[0]] (3d_h) → 1`
    pub w: ParamId,
    pub b: ParamId,
}

/// Parameter handles for one encoder.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub d_h: usize,
    pub cell: CellParams,
    pub scorer: Option<ScorerParams>,
    pub h0: Option<ParamId>,
    pub bsrp: Option<BsrpParams>,
}

impl EncoderParams {
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &EncoderConfig,
        d_h: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let cell = match cfg.cell {
            CellKind::Grc => {
                let mut p = GrcParams::init(store, "grc", d_h, rng);
                p.hidden_dropout = cfg.cell_dropout;
                CellParams::Grc(p)
            }
            CellKind::TreeLstm => CellParams::TreeLstm(TreeLstmParams::init(store, "lstm", d_h, rng)),
        };
        let scorer = cfg
            .kind
            .uses_scorer()
            .then(|| ScorerParams::init(store, "scorer", d_h, rng));
        let h0 = (cfg.kind == EncoderKind::Recurrent && cfg.use_h0)
            .then(|| store.add("recurrent.h0", Tensor::zeros(&[d_h])));
        let bsrp = (cfg.kind == EncoderKind::Bsrp).then(|| BsrpParams {
            w: store.add("bsrp.W", Tensor::glorot(3 * d_h, 1, rng)),
            b: store.add("bsrp.b", Tensor::zeros(&[1])),
        });
        Ok(EncoderParams {
            d_h,
            cell,
            scorer,
            h0,
            bsrp,
        })
    }

    pub fn bind<'t, T: Real>(&self, store: &ParamStore<T>, tape: &'t Tape<T>) -> Result<BoundEncoder<'t, T>> {
        let cell = match &self.cell {
            CellParams::Grc(p) => BoundCell::Grc(p.bind(store, tape)?),
            CellParams::TreeLstm(p) => BoundCell::TreeLstm(p.bind(store, tape)?),
        };
        let memory = || cell_memory(tape, 1, self.d_h, matches!(self.cell, CellParams::TreeLstm(_)));
        Ok(BoundEncoder {
            d_h: self.d_h,
            w_v: self.scorer.as_ref().map(|s| store.bind(tape, s.w_v)).transpose()?,
            h0: self
                .h0
                .map(|id| Ok::<_, Error>(NodeState::new(store.bind(tape, id)?, memory())))
                .transpose()?,
            bsrp: self
                .bsrp
                .as_ref()
                .map(|p| Ok::<_, Error>((store.bind(tape, p.w)?, store.bind(tape, p.b)?)))
                .transpose()?,
            cell,
        })
    }
}

fn cell_memory<T: Real>(tape: &Tape<T>, rows: usize, d_h: usize, has_memory: bool) -> Option<Var<'_, T>> {
    has_memory.then(|| tape.zeros(rows, d_h))
}

/// Encoder parameters recorded on a tape.
pub struct BoundEncoder<'t, T> {
    pub d_h: usize,
    pub cell: BoundCell<'t, T>,
    pub w_v: Option<Var<'t, T>>,
    pub h0: Option<NodeState<'t, T>>,
    pub bsrp: Option<(Var<'t, T>, Var<'t, T>)>,
}

impl<'t, T: Real> BoundEncoder<'t, T> {
    /// Splits an `n×d_h` leaf matrix into nodes; memory cells start at zero.
    pub fn leaves(&self, leaves: Var<'t, T>) -> Result<Vec<NodeState<'t, T>>> {
        if leaves.cols() != self.d_h {
            return Err(Error::shape(
                "encode",
                format!("leaves have {} columns, d_h = {}", leaves.cols(), self.d_h),
            ));
        }
        let c = cell_memory(leaves.tape(), leaves.rows(), self.d_h, self.cell.has_memory());
        cells::split_rows(leaves, c)
    }

    fn scorer(&self) -> Result<Var<'t, T>> {
        self.w_v
            .ok_or_else(|| Error::config("encoder was built without a parse scorer"))
    }
}

/// How a beam's `actions` are to be read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionKind {
    /// Action `j` merges positions `j` and `j+1` of the current sequence.
    EasyFirst,
    /// [`crate::tree::SHIFT`] / [`crate::tree::REDUCE`] transitions.
    ShiftReduce,
}

/// Output of an encoder.
pub struct Encoded<'t, T> {
    pub vector: Var<'t, T>,
    /// Final hypotheses, each reduced to a single node.
    pub beams: Vec<BeamState<'t, T>>,
    pub action_kind: ActionKind,
}

impl<T: Real> Encoded<'_, T> {
    /// Replays each beam's actions into a tree over `n` leaves.
    pub fn trees(&self, n: usize) -> Result<Vec<ParseTree>> {
        self.beams
            .iter()
            .map(|b| match self.action_kind {
                ActionKind::EasyFirst => ParseTree::from_actions(n, &b.actions),
                ActionKind::ShiftReduce => ParseTree::from_transitions(n, &b.actions),
            })
            .collect()
    }
}

/// A composed candidate parent and, for scored encoders, its raw score.
#[derive(Clone, Copy)]
struct Candidate<'t, T> {
    node: NodeState<'t, T>,
    score: Option<Var<'t, T>>,
}

/// Per-example composition cache keyed by the recorded ids of the two
/// children. A pair of identical recorded children always composes to the
/// same parent, so beams and steps share compositions instead of recomputing
/// them. Misses are composed together in one batch.
struct Composer<'e, 't, T> {
    enc: &'e BoundEncoder<'t, T>,
    memo: HashMap<(usize, usize), Candidate<'t, T>>,
    dropout: bool,
}

impl<'e, 't, T: Real> Composer<'e, 't, T> {
    fn new(enc: &'e BoundEncoder<'t, T>, cfg: &EncoderConfig) -> Self {
        Composer {
            enc,
            memo: HashMap::new(),
            dropout: cfg.training && cfg.cell_dropout > 0.0,
        }
    }

    fn key(l: &NodeState<'t, T>, r: &NodeState<'t, T>) -> (usize, usize) {
        (l.h.id(), r.h.id())
    }

    /// Composes (and scores, when `scored`) every pair not yet cached.
    fn ensure<R: Rng + ?Sized>(
        &mut self,
        pairs: impl IntoIterator<Item = (NodeState<'t, T>, NodeState<'t, T>)>,
        scored: bool,
        rng: &mut R,
    ) -> Result<()> {
        let mut misses = Vec::new();
        let mut queued = std::collections::HashSet::new();
        for (l, r) in pairs {
            let key = Self::key(&l, &r);
            if !self.memo.contains_key(&key) && queued.insert(key) {
                misses.push((l, r));
            }
        }
        if misses.is_empty() {
            return Ok(());
        }
        let drop_rng = if self.dropout { Some(&mut *rng) } else { None };
        let (h, c) = self.enc.cell.compose_batch(&misses, drop_rng)?;
        let scores = if scored {
            Some(cells::score(h, self.enc.scorer()?)?)
        } else {
            None
        };
        let nodes = cells::split_rows(h, c)?;
        for (i, ((l, r), node)) in misses.iter().zip(nodes).enumerate() {
            let score = match scores {
                Some(s) if s.rows() == 1 => Some(s),
                Some(s) => Some(s.elem(i)?),
                None => None,
            };
            self.memo.insert(Self::key(l, r), Candidate { node, score });
        }
        Ok(())
    }

    fn get(&self, l: &NodeState<'t, T>, r: &NodeState<'t, T>) -> Candidate<'t, T> {
        self.memo[&Self::key(l, r)]
    }

    fn compose<R: Rng + ?Sized>(
        &mut self,
        l: NodeState<'t, T>,
        r: NodeState<'t, T>,
        rng: &mut R,
    ) -> Result<NodeState<'t, T>> {
        self.ensure([(l, r)], false, rng)?;
        Ok(self.get(&l, &r).node)
    }

    /// Raw scores of all adjacent candidates of `nodes` as a `1×(len-1)` row.
    fn candidate_scores(&self, nodes: &[NodeState<'t, T>]) -> Result<Var<'t, T>> {
        let scores = nodes
            .windows(2)
            .map(|w| {
                self.get(&w[0], &w[1])
                    .score
                    .ok_or_else(|| Error::config("candidate was not scored"))
            })
            .collect::<Result<Vec<_>>>()?;
        nodes[0].h.tape().concat(&scores, false)
    }
}

/// Optional inputs some encoders need.
#[derive(Default)]
pub struct EncodeInput<'a> {
    /// Structure for fixed-tree encoders (gold, balanced or random).
    pub tree: Option<&'a ParseTree>,
}

/// Dispatches to the encoder selected by `cfg.kind`. Fixed-tree kinds build
/// their tree here unless `input.tree` supplies one (required for gold).
pub fn encode<'t, T: Real, R: Rng + ?Sized>(
    enc: &BoundEncoder<'t, T>,
    cfg: &EncoderConfig,
    leaves: Var<'t, T>,
    input: EncodeInput<'_>,
    rng: &mut R,
) -> Result<Encoded<'t, T>> {
    cfg.validate()?;
    let n = leaves.rows();
    let fixed = |tree: &ParseTree, rng: &mut R| encode_fixed_tree(enc, cfg, leaves, tree, rng);
    match cfg.kind {
        EncoderKind::Recurrent => encode_recurrent(enc, cfg, leaves, rng),
        EncoderKind::GoldTree => {
            let tree = input
                .tree
                .ok_or_else(|| Error::config("gold-tree encoder needs a tree"))?;
            fixed(tree, rng)
        }
        EncoderKind::Balanced => match input.tree {
            Some(t) => fixed(t, rng),
            None => fixed(&ParseTree::balanced(n)?, rng),
        },
        EncoderKind::RandomTree => match input.tree {
            Some(t) => fixed(t, rng),
            None => {
                let tree = ParseTree::random(n, rng)?;
                fixed(&tree, rng)
            }
        },
        EncoderKind::GumbelTree => encode_easy_first_gumbel(enc, cfg, leaves, rng),
        EncoderKind::BtCell => encode_bt_cell(enc, cfg, leaves, rng),
        EncoderKind::Bsrp => encode_bsrp(enc, cfg, leaves, rng),
        EncoderKind::McGumbel => encode_mc_gumbel(enc, cfg, leaves, cfg.beam_size, rng),
    }
}

/// A single-hypothesis result with score 0.
fn single<'t, T: Real>(node: NodeState<'t, T>, actions: Vec<usize>) -> Result<Encoded<'t, T>> {
    let tape = node.h.tape();
    Ok(Encoded {
        vector: node.h,
        beams: vec![BeamState {
            nodes: vec![node],
            score: tape.scalar(T::zero())?,
            actions,
        }],
        action_kind: ActionKind::EasyFirst,
    })
}
