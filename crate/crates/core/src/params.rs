//! Named parameter trees.
//!
//! Every parameter container in this crate is generic over its leaf type:
//! the same struct holds a layout ([`ParamSpec`]), concrete values
//! ([`Tensor`]) or graph handles ([`Var`]). [`ParamTree::map_named`] walks
//! the leaves in a fixed order with dotted names, which gives checkpoints,
//! freeze partitions and optimizer state one shared naming scheme.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

pub trait ParamTree {
    type Leaf;
    type Mapped<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &Self::Leaf) -> U) -> Self::Mapped<U>;

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Self::Leaf));

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Self::Leaf)) {
        self.map_named(prefix, &mut |n, l| f(n, l));
    }

    fn names(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |n, _| out.push(n.to_string()));
        out
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// How a leaf is filled at initialization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound)`.
    Uniform(f64),
}

/// Shape and initializer of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(shape: impl Into<Vec<usize>>, init: Init) -> Self {
        Self { shape: shape.into(), init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Fills the tensor from a stream keyed on `(seed, name)`, so a leaf's
    /// initial value does not depend on which other leaves exist.
    pub fn materialize(&self, seed: u64, name: &str) -> Tensor {
        match self.init {
            Init::Zeros => Tensor::zeros(self.shape.clone()),
            Init::Ones => Tensor::ones(self.shape.clone()),
            Init::Uniform(bound) => {
                let mut rng = leaf_rng(seed, name);
                Tensor::uniform(self.shape.clone(), bound, &mut rng)
            }
        }
    }
}

fn leaf_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(name.as_bytes()).finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Uniform bound `sqrt(6 / fan_in)`.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

pub fn materialize<P>(layout: &P, prefix: &str, seed: u64) -> P::Mapped<Tensor>
where
    P: ParamTree<Leaf = ParamSpec>,
{
    layout.map_named(prefix, &mut |name, spec| spec.materialize(seed, name))
}

/// Places every leaf on the graph, tracking those selected by `trainable`.
pub fn bind<P>(g: &mut Graph, params: &P, prefix: &str, trainable: &dyn Fn(&str) -> bool) -> P::Mapped<Var>
where
    P: ParamTree<Leaf = Tensor>,
{
    params.map_named(prefix, &mut |name, t| g.input(t.clone(), trainable(name)))
}

pub fn named_tensors<P>(params: &P, prefix: &str) -> Vec<(String, Tensor)>
where
    P: ParamTree<Leaf = Tensor>,
{
    let mut out = Vec::new();
    params.visit(prefix, &mut |n, t| out.push((n.to_string(), t.clone())));
    out
}

/// Total scalar count over all leaves.
pub fn count_scalars<P>(layout: &P) -> usize
where
    P: ParamTree<Leaf = ParamSpec>,
{
    let mut n = 0;
    layout.visit("", &mut |_, s| n += s.numel());
    n
}
