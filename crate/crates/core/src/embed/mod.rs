//! Unit-hypersphere embeddings and the embedder backends that produce them.

mod vit;

pub use vit::{
    AttentionCapture, BatchNorm, Block, HeadLayer, LayerNorm, Linear, PatchEmbed, SimilarityGrad,
    VitConfig, VitWeights,
};

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{bail, Result};
use crate::prep::{NormalizedCrop, CROP_SIDE};

/// Default embedding dimension.
pub const EMBED_DIM: usize = 128;

/// Tolerance on `| ||e|| - 1 |` for anything called an embedding.
pub const UNIT_TOL: f64 = 1e-5;

/// A point on the unit hypersphere.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wraps values that are already unit-norm (within [`UNIT_TOL`]).
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let n = norm(&values);
        if values.is_empty() || (n - 1.0).abs() > UNIT_TOL || !n.is_finite() {
            bail!(Precondition, "embedding norm {n} is not 1");
        }
        Ok(Self(values))
    }

    /// Projects `values` onto the sphere.
    pub fn normalized(values: &[f64]) -> Result<Self> {
        l2_normalize(values).map(Self)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn distance(&self, other: &Embedding) -> f64 {
        euclidean(&self.0, &other.0)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `v / ||v||`; vectors with norm at or below `1e-12` are rejected.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > 1e-12) || !n.is_finite() {
        bail!(Degenerate, "cannot normalise a vector of norm {n}");
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Returns `(||a - b||^2, cos(a, b))` for unit vectors; on the sphere the
/// first equals `2 (1 - cos)`.
pub fn sphere_distance_identity_check(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        bail!(Dimension, "vector lengths {} and {} differ", a.len(), b.len());
    }
    for (name, v) in [("a", a), ("b", b)] {
        let n = norm(v);
        if (n - 1.0).abs() > UNIT_TOL {
            bail!(Precondition, "{name} is not unit norm ({n})");
        }
    }
    let d2 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((d2, dot(a, b)))
}

/// Anything that maps a normalised crop onto the sphere.
pub trait Embedder {
    fn dim(&self) -> usize;

    /// Side of the square crops this embedder expects.
    fn input_side(&self) -> usize {
        CROP_SIDE
    }

    fn embed(&self, crop: &NormalizedCrop) -> Result<Embedding>;

    /// Final-block attention with gradients of `cos(embedding, centroid)`,
    /// or `None` when the backend cannot expose its internals.
    fn explain(&self, _crop: &NormalizedCrop, _centroid: &Embedding) -> Option<Result<AttentionCapture>> {
        None
    }
}

/// Deterministic hash-seeded embedder for tests and dry runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockEmbedder {
    dim: usize,
    seed: u64,
    side: usize,
}

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            bail!(Parameter, "mock embedding dimension must be at least 2, got {dim}");
        }
        Ok(Self { dim, seed, side: CROP_SIDE })
    }

    pub fn with_input_side(mut self, side: usize) -> Self {
        self.side = side;
        self
    }
}

/// Hashes the tensor bytes with `seed`, seeds a PRNG from the digest, draws
/// a Gaussian vector and normalises it.
pub fn mock_embed(crop: &NormalizedCrop, dim: usize, seed: u64) -> Result<Embedding> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((crop.side() as u64).to_le_bytes());
    for v in crop.tensor() {
        hasher.update(v.to_le_bytes());
    }
    let digest: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    Embedding::normalized(&v)
}

impl Embedder for MockEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn input_side(&self) -> usize {
        self.side
    }

    fn embed(&self, crop: &NormalizedCrop) -> Result<Embedding> {
        mock_embed(crop, self.dim, self.seed)
    }
}
