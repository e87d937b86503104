use rand::Rng;

use super::{single, BoundEncoder, Composer, Encoded, EncoderConfig};
use crate::autograd::Var;
use crate::cells::NodeState;
use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::tree::ParseTree;

/// Left-to-right fold `R(...R(R(h0, x_1), x_2)..., x_n)`. Without a learned
/// `h0` the fold starts from `x_1`, which is the left-branching tree.
pub fn encode_recurrent<'t, T: Real, R: Rng + ?Sized>(
    enc: &BoundEncoder<'t, T>,
    cfg: &EncoderConfig,
    leaves: Var<'t, T>,
    rng: &mut R,
) -> Result<Encoded<'t, T>> {
    let nodes = enc.leaves(leaves)?;
    let n = nodes.len();
    let mut composer = Composer::new(enc, cfg);
    let (mut acc, rest) = match enc.h0 {
        Some(h0) => (h0, &nodes[..]),
        None => (nodes[0], &nodes[1..]),
    };
    for &x in rest {
        acc = composer.compose(acc, x, rng)?;
    }
    single(acc, vec![0; n - 1])
}

/// Bottom-up evaluation along `tree`. Nodes of equal height are composed in
/// one batch.
pub fn encode_fixed_tree<'t, T: Real, R: Rng + ?Sized>(
    enc: &BoundEncoder<'t, T>,
    cfg: &EncoderConfig,
    leaves: Var<'t, T>,
    tree: &ParseTree,
    rng: &mut R,
) -> Result<Encoded<'t, T>> {
    let leaf_nodes = enc.leaves(leaves)?;
    let n = leaf_nodes.len();
    if tree.n_leaves() != n {
        return Err(Error::shape(
            "encode_fixed_tree",
            format!("tree has {} leaves for {n} tokens", tree.n_leaves()),
        ));
    }
    if !tree.is_projective() {
        return Err(Error::parse("tree is not projective"));
    }
    let merges = tree.merges();
    let mut height = vec![0usize; n + merges.len()];
    for (i, &(l, r)) in merges.iter().enumerate() {
        height[n + i] = 1 + height[l].max(height[r]);
    }
    let mut nodes: Vec<Option<NodeState<'t, T>>> = leaf_nodes.into_iter().map(Some).collect();
    nodes.resize(n + merges.len(), None);
    let mut composer = Composer::new(enc, cfg);
    let top = height.iter().copied().max().unwrap_or(0);
    for level in 1..=top {
        let ids: Vec<usize> = (0..merges.len()).filter(|&i| height[n + i] == level).collect();
        let pairs: Vec<_> = ids
            .iter()
            .map(|&i| {
                let (l, r) = merges[i];
                (nodes[l].expect("child below"), nodes[r].expect("child below"))
            })
            .collect();
        composer.ensure(pairs.iter().copied(), false, rng)?;
        for (&i, (l, r)) in ids.iter().zip(&pairs) {
            nodes[n + i] = Some(composer.get(l, r).node);
        }
    }
    let root = nodes[tree.root()].expect("root composed");
    single(root, tree.to_actions())
}
