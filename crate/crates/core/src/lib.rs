//! Latent-tree sequence encoders built around the beam tree cell.
//!
//! The crate contains a small reverse-mode autodiff engine over 2-D values
//! ([`autograd`]), composition cells and the parse scorer ([`cells`]), beam
//! truncation operators ([`topk`]), the encoders themselves ([`encoders`]),
//! a ListOps generator and interpreter ([`listops`]), a classifier and
//! training driver ([`model`], [`harness`]) and parse post-processing
//! ([`parse_analysis`]).
//!
//! ```
//! use beamtree::{encode, EncodeInput, EncoderConfig, EncoderKind, EncoderParams, ParamStore, Tape, Tensor};
//! use rand::SeedableRng;
//!
//! let cfg = EncoderConfig { kind: EncoderKind::BtCell, beam_size: 2, ..EncoderConfig::default() };
//! let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
//! let mut store = ParamStore::<f64>::new();
//! let params = EncoderParams::init(&mut store, &cfg, 4, &mut rng).unwrap();
//!
//! let tape = Tape::new();
//! let enc = params.bind(&store, &tape).unwrap();
//! let leaves = tape.var(&Tensor::glorot(5, 4, &mut rng)).unwrap();
//! let out = encode(&enc, &cfg, leaves, EncodeInput::default(), &mut rng).unwrap();
//! assert_eq!(out.vector.dims(), (1, 4));
//! assert_eq!(out.trees(5).unwrap().len(), 2);
//! ```

pub mod autograd;
pub mod cells;
pub mod checkpoint;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod listops;
pub mod model;
pub mod optim;
pub mod params;
pub mod parse_analysis;
pub mod rng;
pub mod tensor;
pub mod topk;
pub mod tree;

pub use autograd::{Gradients, Tape, Var};
pub use cells::{CellKind, NodeState};
pub use encoders::{encode, ActionKind, EncodeInput, Encoded, EncoderConfig, EncoderKind, EncoderParams};
pub use error::{Error, Result};
pub use harness::{Precision, RunConfig};
pub use listops::{Example, GenConfig, MedianRule, SplitKind, SplitParams};
pub use model::{Model, ModelConfig};
pub use optim::{AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use parse_analysis::BeamParse;
pub use tensor::{Real, Tensor};
pub use topk::{BeamState, TopKMode, TopKVariant};
pub use tree::ParseTree;
