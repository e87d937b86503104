//! Shared fixtures for the benchmarks.

use beamtree::encoders::{encode, EncodeInput, EncoderConfig, EncoderParams};
use beamtree::{ParamStore, ParseTree, Result, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Encoder parameters plus a fixed `n × d_h` block of leaf vectors.
pub struct EncoderFixture {
    pub cfg: EncoderConfig,
    pub store: ParamStore<f32>,
    pub params: EncoderParams,
    pub leaves: Tensor<f32>,
    pub tree: ParseTree,
}

impl EncoderFixture {
    pub fn new(cfg: EncoderConfig, n: usize, d_h: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = EncoderParams::init(&mut store, &cfg, d_h, &mut rng).expect("valid encoder config");
        let leaves = random_tensor(&[n, d_h], &mut rng);
        let tree = ParseTree::balanced(n).expect("n > 0");
        EncoderFixture {
            cfg,
            store,
            params,
            leaves,
            tree,
        }
    }

    /// One forward pass, plus a backward pass from the sum of the encoding
    /// when `backward` is set. Returns the sum so the work is observable.
    pub fn run(&self, backward: bool, seed: u64) -> Result<f32> {
        let tape = Tape::new();
        let enc = self.params.bind(&self.store, &tape)?;
        let leaves = tape.var(&self.leaves)?;
        let input = EncodeInput { tree: Some(&self.tree) };
        let out = encode(&enc, &self.cfg, leaves, input, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let loss = out.vector.sum()?;
        if backward {
            tape.backward(loss)?;
        }
        Ok(loss.item())
    }
}

pub fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}
