//! Sequence classifier: leaf transform, encoder and a two-layer head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::cells::{dropout, LeafParams, LN_EPS};
use crate::encoders::{encode, EncodeInput, Encoded, EncoderConfig, EncoderKind, EncoderParams};
use crate::error::{Error, Result};
use crate::listops::{self, VOCAB};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::tree::ParseTree;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub vocab: usize,
    pub d_e: usize,
    pub d_h: usize,
    pub hidden: usize,
    pub classes: usize,
    /// Dropout on the token embeddings.
    pub input_dropout: f64,
    /// Dropout between the two head layers.
    pub head_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            vocab: VOCAB.len(),
            d_e: 128,
            d_h: 128,
            hidden: 128,
            classes: listops::NUM_CLASSES,
            input_dropout: 0.1,
            head_dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        for (name, v) in [
            ("vocab", self.vocab),
            ("d_e", self.d_e),
            ("d_h", self.d_h),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.classes < 2 {
            return Err(Error::config("a classifier needs at least two classes"));
        }
        for (name, r) in [
            ("input_dropout", self.input_dropout),
            ("head_dropout", self.head_dropout),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config(format!("{name} {r} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// `LN → linear(d_h→hidden) → GELU → dropout → linear(hidden→classes)`.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl HeadParams {
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        d_h: usize,
        hidden: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        HeadParams {
            ln_gamma: store.add("head.ln.gamma", Tensor::ones(&[d_h])),
            ln_beta: store.add("head.ln.beta", Tensor::zeros(&[d_h])),
            w1: store.add("head.W1", Tensor::glorot(d_h, hidden, rng)),
            b1: store.add("head.b1", Tensor::zeros(&[hidden])),
            w2: store.add("head.W2", Tensor::glorot(hidden, classes, rng)),
            b2: store.add("head.b2", Tensor::zeros(&[classes])),
        }
    }

    /// Logits (`1×classes`) for an encoding. `dropout_cfg` is set in training.
    pub fn classify<'t, T: Real, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<T>,
        encoding: Var<'t, T>,
        dropout_cfg: Option<(f64, &mut R)>,
    ) -> Result<Var<'t, T>> {
        let tape = encoding.tape();
        let bind = |id| store.bind(tape, id);
        let d_h = store.get(self.ln_gamma).value.numel();
        if encoding.cols() != d_h {
            return Err(Error::shape(
                "classify",
                format!("encoding has {} columns, head expects {d_h}", encoding.cols()),
            ));
        }
        let x = encoding.layer_norm(bind(self.ln_gamma)?, bind(self.ln_beta)?, T::from_f64(LN_EPS))?;
        let mut hidden = x.matmul(bind(self.w1)?)?.add_bias(bind(self.b1)?)?.gelu()?;
        if let Some((rate, rng)) = dropout_cfg {
            hidden = dropout(hidden, rate, rng)?;
        }
        hidden.matmul(bind(self.w2)?)?.add_bias(bind(self.b2)?)
    }
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy<'t, T: Real>(logits: Var<'t, T>, label: usize) -> Result<Var<'t, T>> {
    if label >= logits.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("label {label} for {} classes", logits.len()),
        ));
    }
    logits.log_softmax()?.elem(label)?.neg()
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub leaf: LeafParams,
    pub encoder: EncoderParams,
    pub head: HeadParams,
}

/// Result of one forward pass.
pub struct Forward<'t, T> {
    pub logits: Var<'t, T>,
    pub encoded: Encoded<'t, T>,
}

impl<'t, T: Real> Forward<'t, T> {
    pub fn prediction(&self) -> usize {
        let v = self.logits.to_vec();
        // first maximum, matching the top-k tie rule
        (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
    }
}

impl Model {
    /// Registers every parameter in `store`. Parameter order (and hence the
    /// checkpoint layout) is leaf, encoder, head.
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let leaf = LeafParams::init(store, "leaf", config.vocab, config.d_e, config.d_h, rng);
        let encoder = EncoderParams::init(store, &config.encoder, config.d_h, rng)?;
        let head = HeadParams::init(store, config.d_h, config.hidden, config.classes, rng);
        Ok(Model {
            config: config.clone(),
            leaf,
            encoder,
            head,
        })
    }

    /// Encodes and classifies one token sequence. `training` switches on
    /// dropout, Gumbel noise and the configured training top-k; all draws
    /// come from `rng`.
    pub fn forward<'t, T: Real, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<T>,
        tape: &'t Tape<T>,
        tokens: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<Forward<'t, T>> {
        let cfg = if training {
            self.config.encoder.train()
        } else {
            self.config.encoder.eval()
        };
        let input_drop = (training && self.config.input_dropout > 0.0).then_some(self.config.input_dropout);
        let leaves = self
            .leaf
            .transform(store, tape, tokens, input_drop.map(|r| (r, &mut *rng)))?;
        let gold = match cfg.kind {
            EncoderKind::GoldTree => Some(gold_tree_for(tokens)?),
            _ => None,
        };
        let bound = self.encoder.bind(store, tape)?;
        let encoded = encode(&bound, &cfg, leaves, EncodeInput { tree: gold.as_ref() }, rng)?;
        let head_drop = (training && self.config.head_dropout > 0.0).then_some(self.config.head_dropout);
        let logits = self
            .head
            .classify(store, encoded.vector, head_drop.map(|r| (r, &mut *rng)))?;
        Ok(Forward { logits, encoded })
    }
}

/// Gold ListOps tree for a sequence of token ids.
pub fn gold_tree_for(tokens: &[usize]) -> Result<ParseTree> {
    let words = tokens
        .iter()
        .map(|&t| {
            VOCAB
                .get(t)
                .copied()
                .ok_or_else(|| Error::parse(format!("token id {t} is not a ListOps token")))
        })
        .collect::<Result<Vec<_>>>()?;
    listops::gold_tree(&words)
}
