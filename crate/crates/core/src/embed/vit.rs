//! Reference vision transformer: patch embedding, pre-norm encoder blocks
//! with multi-head self-attention and a SwiGLU MLP, patch-token mean
//! pooling, a BatchNorm projection head and L2 normalisation.
//!
//! Weights are stored as `f32`; activations and gradients are `f64`.
//! Besides the plain forward pass the model can expose its final block's
//! attention and QKV activations, and back-propagate `cos(embedding, c)`
//! down to those QKV activations.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{dot, norm, Embedder, Embedding};
use crate::error::{bail, Result};
use crate::prep::NormalizedCrop;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_chans: usize,
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Projection head widths, starting at `hidden` and ending at the
    /// embedding dimension.
    pub proj_dims: Vec<usize>,
}

pub const LN_EPS: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;

impl VitConfig {
    /// ViT-S/14 at 252 px: 18x18 patches, 384 wide, 12 blocks, 6 heads.
    pub fn small() -> Self {
        Self {
            image_size: 252,
            patch_size: 14,
            in_chans: 3,
            hidden: 384,
            depth: 12,
            heads: 6,
            mlp_hidden: 1536,
            proj_dims: vec![384, 512, 256, 128],
        }
    }

    /// 42 px, 3x3 patches, width 16, two blocks of two heads. For tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 42,
            patch_size: 14,
            in_chans: 3,
            hidden: 16,
            depth: 2,
            heads: 2,
            mlp_hidden: 64,
            proj_dims: vec![16, 32, 16, 8],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            bail!(Format, "image size {} is not a multiple of patch size {}", self.image_size, self.patch_size);
        }
        if self.heads == 0 || self.hidden == 0 || self.hidden % self.heads != 0 {
            bail!(Format, "hidden size {} is not divisible by {} heads", self.hidden, self.heads);
        }
        if self.in_chans == 0 || self.depth == 0 || self.mlp_hidden == 0 {
            bail!(Format, "channels, depth and mlp width must be positive");
        }
        if self.proj_dims.len() < 2 || self.proj_dims[0] != self.hidden || self.proj_dims.contains(&0) {
            bail!(Format, "projection head must start at the hidden size and have at least one layer");
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patch tokens plus the CLS token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn embed_dim(&self) -> usize {
        *self.proj_dims.last().expect("validated")
    }

    pub fn patch_dim(&self) -> usize {
        self.in_chans * self.patch_size * self.patch_size
    }
}

/// `y = x W^T + b`, `W` stored row-major as `out x inp`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub out: usize,
    pub inp: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self { out, inp, weight: vec![0.0; out * inp], bias: vec![0.0; out] }
    }

    /// Applies the layer to `rows` stacked inputs.
    fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), rows * self.inp);
        let mut y = Vec::with_capacity(rows * self.out);
        for r in 0..rows {
            let xr = &x[r * self.inp..(r + 1) * self.inp];
            for o in 0..self.out {
                let wr = &self.weight[o * self.inp..(o + 1) * self.inp];
                let mut acc = f64::from(self.bias[o]);
                for (a, &w) in xr.iter().zip(wr) {
                    acc += a * f64::from(w);
                }
                y.push(acc);
            }
        }
        y
    }

    /// Gradient w.r.t. the input given the gradient w.r.t. the output.
    fn backward_input(&self, dy: &[f64], rows: usize) -> Vec<f64> {
        let mut dx = vec![0.0; rows * self.inp];
        for r in 0..rows {
            let dxr = &mut dx[r * self.inp..(r + 1) * self.inp];
            for o in 0..self.out {
                let g = dy[r * self.out + o];
                if g == 0.0 {
                    continue;
                }
                let wr = &self.weight[o * self.inp..(o + 1) * self.inp];
                for (d, &w) in dxr.iter_mut().zip(wr) {
                    *d += g * f64::from(w);
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

/// Per-row statistics kept for the backward pass.
struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        Self { gamma: vec![1.0; dim], beta: vec![0.0; dim] }
    }

    fn forward(&self, x: &[f64], rows: usize) -> (Vec<f64>, LnCache) {
        let d = self.gamma.len();
        let mut y = Vec::with_capacity(rows * d);
        let mut xhat = Vec::with_capacity(rows * d);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (i, v) in xr.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                y.push(h * f64::from(self.gamma[i]) + f64::from(self.beta[i]));
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    fn backward(&self, dy: &[f64], cache: &LnCache, rows: usize) -> Vec<f64> {
        let d = self.gamma.len();
        let mut dx = vec![0.0; rows * d];
        for r in 0..rows {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let dxhat: Vec<f64> = (0..d).map(|i| dy[r * d + i] * f64::from(self.gamma[i])).collect();
            let m1 = dxhat.iter().sum::<f64>() / d as f64;
            let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for i in 0..d {
                dx[r * d + i] = cache.inv_std[r] * (dxhat[i] - m1 - xh[i] * m2);
            }
        }
        dx
    }
}

/// Inference-mode batch normalisation with stored statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl BatchNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }

    fn scale(&self, i: usize) -> f64 {
        f64::from(self.gamma[i]) / (f64::from(self.running_var[i]) + BN_EPS).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    /// Fused gate/value projection, `2 * mlp_hidden x hidden`.
    pub w12: Linear,
    pub w3: Linear,
}

/// Linear -> BatchNorm -> ReLU (dropout is inactive at inference).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLayer {
    pub linear: Linear,
    pub bn: BatchNorm,
}

/// Patch projection, CLS token and positional encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbed {
    /// `hidden x (in_chans * patch * patch)`, i.e. the flattened conv kernel.
    pub proj: Linear,
    pub cls: Vec<f32>,
    /// `num_tokens x hidden`, CLS first.
    pub pos: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitWeights {
    pub config: VitConfig,
    pub embed: PatchEmbed,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Vec<HeadLayer>,
    pub head_out: Linear,
}

/// Final-block internals for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture {
    pub heads: usize,
    pub tokens: usize,
    pub grid: usize,
    pub hidden: usize,
    /// `heads x tokens x tokens` softmax attention.
    pub attention: Vec<f64>,
    /// `tokens x 3 * hidden`, laid out as `[Q | K | V]` with head `j`
    /// occupying columns `j * head_dim .. (j + 1) * head_dim` of each part.
    pub qkv: Vec<f64>,
    /// Same layout as `qkv`; set by the similarity backward pass.
    pub qkv_grad: Option<Vec<f64>>,
}

impl AttentionCapture {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn num_patches(&self) -> usize {
        self.tokens - 1
    }

    /// CLS row of each head without the CLS column: `heads x num_patches`.
    pub fn cls_attention(&self) -> Vec<f64> {
        let t = self.tokens;
        (0..self.heads)
            .flat_map(|h| self.attention[h * t * t + 1..h * t * t + t].iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGrad {
    pub similarity: f64,
    pub embedding: Embedding,
    pub capture: AttentionCapture,
    /// Residual input of the final block, `tokens x hidden`.
    pub block_input: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, mean: f64, std: f64) -> Vec<f32> {
    let dist = Normal::new(mean, std).expect("valid normal");
    (0..n).map(|_| dist.sample(rng) as f32).collect()
}

impl PatchEmbed {
    pub fn zeros(cfg: &VitConfig) -> Self {
        Self {
            proj: Linear::zeros(cfg.hidden, cfg.patch_dim()),
            cls: vec![0.0; cfg.hidden],
            pos: vec![0.0; cfg.num_tokens() * cfg.hidden],
        }
    }

    fn random(cfg: &VitConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut e = Self::zeros(cfg);
        e.proj.weight = gaussian_vec(rng, e.proj.weight.len(), 0.0, 0.02);
        e.proj.bias = gaussian_vec(rng, e.proj.bias.len(), 0.0, 0.02);
        e.cls = gaussian_vec(rng, e.cls.len(), 0.0, 0.02);
        e.pos = gaussian_vec(rng, e.pos.len(), 0.0, 0.02);
        e
    }

    /// Seeded Gaussian (std 0.02) patch embedding on its own.
    pub fn seeded(cfg: &VitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::random(cfg, &mut ChaCha8Rng::seed_from_u64(seed)))
    }

    /// Token sequence (`num_tokens x hidden`): CLS followed by the patches in
    /// row-major grid order, positional encodings added.
    pub fn tokens(&self, cfg: &VitConfig, crop: &NormalizedCrop) -> Result<Vec<f64>> {
        if crop.side() != cfg.image_size {
            bail!(Dimension, "crop side {} does not match model input {}", crop.side(), cfg.image_size);
        }
        let (g, p, d) = (cfg.grid(), cfg.patch_size, cfg.hidden);
        let mut patches = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
        for gy in 0..g {
            for gx in 0..g {
                for c in 0..cfg.in_chans {
                    for y in 0..p {
                        for x in 0..p {
                            patches.push(f64::from(crop.get(c, gy * p + y, gx * p + x)));
                        }
                    }
                }
            }
        }
        let proj = self.proj.forward(&patches, cfg.num_patches());
        let mut tokens = Vec::with_capacity(cfg.num_tokens() * d);
        tokens.extend(self.cls.iter().map(|&v| f64::from(v)));
        tokens.extend(proj);
        for (t, p) in tokens.iter_mut().zip(&self.pos) {
            *t += f64::from(*p);
        }
        Ok(tokens)
    }
}

/// Intermediates of one block that the backward pass needs.
struct BlockTrace {
    qkv: Vec<f64>,
    attention: Vec<f64>,
    x1: Vec<f64>,
    ln2: LnCache,
    u: Vec<f64>,
    out: Vec<f64>,
}

/// Everything after the encoder needed to back-propagate the similarity.
struct HeadTrace {
    final_ln: LnCache,
    /// Pre-activation BatchNorm outputs of each hidden head layer.
    bn_out: Vec<Vec<f64>>,
    raw: Vec<f64>,
}

impl VitWeights {
    pub fn zeros(config: VitConfig) -> Result<Self> {
        config.validate()?;
        let (d, m) = (config.hidden, config.mlp_hidden);
        let block = Block {
            norm1: LayerNorm::identity(d),
            qkv: Linear::zeros(3 * d, d),
            proj: Linear::zeros(d, d),
            norm2: LayerNorm::identity(d),
            w12: Linear::zeros(2 * m, d),
            w3: Linear::zeros(d, m),
        };
        let dims = &config.proj_dims;
        let n = dims.len();
        let head = (0..n - 2)
            .map(|i| HeadLayer { linear: Linear::zeros(dims[i + 1], dims[i]), bn: BatchNorm::identity(dims[i + 1]) })
            .collect();
        Ok(Self {
            embed: PatchEmbed::zeros(&config),
            blocks: vec![block; config.depth],
            norm: LayerNorm::identity(d),
            head,
            head_out: Linear::zeros(dims[n - 1], dims[n - 2]),
            config,
        })
    }

    /// Seeded test weights: Gaussian (std 0.02) for linear layers, tokens and
    /// biases; normalisation parameters jittered around the identity.
    pub fn seeded(config: VitConfig, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        w.embed = PatchEmbed::random(&w.config, &mut rng);
        let lin = |rng: &mut ChaCha8Rng, l: &mut Linear| {
            l.weight = gaussian_vec(rng, l.weight.len(), 0.0, 0.02);
            l.bias = gaussian_vec(rng, l.bias.len(), 0.0, 0.02);
        };
        let ln = |rng: &mut ChaCha8Rng, l: &mut LayerNorm| {
            l.gamma = gaussian_vec(rng, l.gamma.len(), 1.0, 0.02);
            l.beta = gaussian_vec(rng, l.beta.len(), 0.0, 0.02);
        };
        for b in &mut w.blocks {
            ln(&mut rng, &mut b.norm1);
            lin(&mut rng, &mut b.qkv);
            lin(&mut rng, &mut b.proj);
            ln(&mut rng, &mut b.norm2);
            lin(&mut rng, &mut b.w12);
            lin(&mut rng, &mut b.w3);
        }
        ln(&mut rng, &mut w.norm);
        for h in &mut w.head {
            lin(&mut rng, &mut h.linear);
            let n = h.bn.gamma.len();
            h.bn.gamma = gaussian_vec(&mut rng, n, 1.0, 0.02);
            h.bn.beta = gaussian_vec(&mut rng, n, 0.0, 0.02);
            h.bn.running_mean = gaussian_vec(&mut rng, n, 0.0, 0.02);
            h.bn.running_var = gaussian_vec(&mut rng, n, 0.0, 0.02).iter().map(|v| 1.0 + v.abs()).collect();
        }
        lin(&mut rng, &mut w.head_out);
        Ok(w)
    }

    /// Every parameter tensor in serialisation order.
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut t: Vec<&[f32]> = vec![&self.embed.proj.weight, &self.embed.proj.bias, &self.embed.cls, &self.embed.pos];
        for b in &self.blocks {
            t.extend([
                &b.norm1.gamma[..],
                &b.norm1.beta,
                &b.qkv.weight,
                &b.qkv.bias,
                &b.proj.weight,
                &b.proj.bias,
                &b.norm2.gamma,
                &b.norm2.beta,
                &b.w12.weight,
                &b.w12.bias,
                &b.w3.weight,
                &b.w3.bias,
            ]);
        }
        t.extend([&self.norm.gamma[..], &self.norm.beta]);
        for h in &self.head {
            t.extend([
                &h.linear.weight[..],
                &h.linear.bias,
                &h.bn.gamma,
                &h.bn.beta,
                &h.bn.running_mean,
                &h.bn.running_var,
            ]);
        }
        t.extend([&self.head_out.weight[..], &self.head_out.bias]);
        t
    }

    /// Mutable view of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut t: Vec<&mut Vec<f32>> =
            vec![&mut self.embed.proj.weight, &mut self.embed.proj.bias, &mut self.embed.cls, &mut self.embed.pos];
        for b in &mut self.blocks {
            t.extend([
                &mut b.norm1.gamma,
                &mut b.norm1.beta,
                &mut b.qkv.weight,
                &mut b.qkv.bias,
                &mut b.proj.weight,
                &mut b.proj.bias,
                &mut b.norm2.gamma,
                &mut b.norm2.beta,
                &mut b.w12.weight,
                &mut b.w12.bias,
                &mut b.w3.weight,
                &mut b.w3.bias,
            ]);
        }
        t.extend([&mut self.norm.gamma, &mut self.norm.beta]);
        for h in &mut self.head {
            t.extend([
                &mut h.linear.weight,
                &mut h.linear.bias,
                &mut h.bn.gamma,
                &mut h.bn.beta,
                &mut h.bn.running_mean,
                &mut h.bn.running_var,
            ]);
        }
        t.extend([&mut self.head_out.weight, &mut self.head_out.bias]);
        t
    }

    pub fn tokens(&self, crop: &NormalizedCrop) -> Result<Vec<f64>> {
        self.embed.tokens(&self.config, crop)
    }

    fn run_block(&self, block: &Block, x: &[f64]) -> BlockTrace {
        let t = self.config.num_tokens();
        let (ln1, _) = block.norm1.forward(x, t);
        let qkv = block.qkv.forward(&ln1, t);
        self.block_tail(block, x, qkv)
    }

    /// Everything in a block after the QKV projection.
    fn block_tail(&self, block: &Block, x: &[f64], qkv: Vec<f64>) -> BlockTrace {
        let cfg = &self.config;
        let (t, d, h, dh, m) = (cfg.num_tokens(), cfg.hidden, cfg.heads, cfg.head_dim(), cfg.mlp_hidden);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attention = vec![0.0; h * t * t];
        let mut concat = vec![0.0; t * d];
        for head in 0..h {
            let q = |i: usize, k: usize| qkv[i * 3 * d + head * dh + k];
            let kk = |i: usize, k: usize| qkv[i * 3 * d + d + head * dh + k];
            let v = |i: usize, k: usize| qkv[i * 3 * d + 2 * d + head * dh + k];
            for i in 0..t {
                let row = &mut attention[(head * t + i) * t..(head * t + i + 1) * t];
                for (j, r) in row.iter_mut().enumerate() {
                    *r = (0..dh).map(|k| q(i, k) * kk(j, k)).sum::<f64>() * scale;
                }
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - mx).exp();
                    sum += *r;
                }
                row.iter_mut().for_each(|r| *r /= sum);
                for k in 0..dh {
                    concat[i * d + head * dh + k] = (0..t).map(|j| row[j] * v(j, k)).sum();
                }
            }
        }
        let y = block.proj.forward(&concat, t);
        let x1: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let (n2, ln2) = block.norm2.forward(&x1, t);
        let u = block.w12.forward(&n2, t);
        let mut hid = Vec::with_capacity(t * m);
        for r in 0..t {
            let ur = &u[r * 2 * m..(r + 1) * 2 * m];
            for k in 0..m {
                let a = ur[k];
                hid.push(a * sigmoid(a) * ur[m + k]);
            }
        }
        let mlp = block.w3.forward(&hid, t);
        let out = x1.iter().zip(&mlp).map(|(a, b)| a + b).collect();
        BlockTrace { qkv, attention, x1, ln2, u, out }
    }

    /// Final norm, patch mean-pooling and the projection head.
    fn head_forward(&self, x: &[f64]) -> (Vec<f64>, HeadTrace) {
        let cfg = &self.config;
        let (t, d) = (cfg.num_tokens(), cfg.hidden);
        let (z, final_ln) = self.norm.forward(x, t);
        let np = cfg.num_patches() as f64;
        let mut h: Vec<f64> = (0..d).map(|k| (1..t).map(|i| z[i * d + k]).sum::<f64>() / np).collect();
        let mut bn_out = Vec::with_capacity(self.head.len());
        for layer in &self.head {
            let pre = layer.linear.forward(&h, 1);
            let bn: Vec<f64> = pre
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    (v - f64::from(layer.bn.running_mean[i])) * layer.bn.scale(i) + f64::from(layer.bn.beta[i])
                })
                .collect();
            h = bn.iter().map(|v| v.max(0.0)).collect();
            bn_out.push(bn);
        }
        let raw = self.head_out.forward(&h, 1);
        (raw.clone(), HeadTrace { final_ln, bn_out, raw })
    }

    fn check_input(&self, crop: &NormalizedCrop) -> Result<()> {
        if crop.side() != self.config.image_size {
            bail!(Format, "crop side {} does not match model input {}", crop.side(), self.config.image_size);
        }
        Ok(())
    }

    /// Runs all but the last block and returns the last block's input.
    fn encode_to_last(&self, crop: &NormalizedCrop) -> Result<Vec<f64>> {
        self.check_input(crop)?;
        let mut x = self.tokens(crop)?;
        for b in &self.blocks[..self.blocks.len() - 1] {
            x = self.run_block(b, &x).out;
        }
        Ok(x)
    }

    pub fn forward(&self, crop: &NormalizedCrop, capture: bool) -> Result<(Embedding, Option<AttentionCapture>)> {
        let x = self.encode_to_last(crop)?;
        let last = self.run_block(self.blocks.last().expect("depth >= 1"), &x);
        let (raw, _) = self.head_forward(&last.out);
        let emb = Embedding::normalized(&raw)?;
        let cap = capture.then(|| self.capture_of(last.attention, last.qkv, None));
        Ok((emb, cap))
    }

    fn capture_of(&self, attention: Vec<f64>, qkv: Vec<f64>, qkv_grad: Option<Vec<f64>>) -> AttentionCapture {
        let cfg = &self.config;
        AttentionCapture {
            heads: cfg.heads,
            tokens: cfg.num_tokens(),
            grid: cfg.grid(),
            hidden: cfg.hidden,
            attention,
            qkv,
            qkv_grad,
        }
    }

    fn check_centroid(&self, centroid: &Embedding) -> Result<()> {
        if centroid.dim() != self.config.embed_dim() {
            bail!(Dimension, "centroid has {} dims, model embeds into {}", centroid.dim(), self.config.embed_dim());
        }
        if (norm(centroid.values()) - 1.0).abs() > super::UNIT_TOL {
            bail!(Precondition, "centroid is not unit norm");
        }
        Ok(())
    }

    /// `cos(embedding, centroid)` recomputed from the final block's input and
    /// a (possibly perturbed) QKV activation. Used for gradient checking.
    pub fn similarity_from_qkv(&self, block_input: &[f64], qkv: &[f64], centroid: &Embedding) -> Result<f64> {
        self.check_centroid(centroid)?;
        let cfg = &self.config;
        if block_input.len() != cfg.num_tokens() * cfg.hidden || qkv.len() != cfg.num_tokens() * 3 * cfg.hidden {
            bail!(Dimension, "activation shapes do not match the model");
        }
        let last = self.block_tail(self.blocks.last().expect("depth >= 1"), block_input, qkv.to_vec());
        let (raw, _) = self.head_forward(&last.out);
        let n = norm(&raw);
        Ok(dot(&raw, centroid.values()) / n)
    }

    /// Forward pass plus the gradient of `cos(embedding, centroid)` with
    /// respect to the final block's QKV activations.
    pub fn similarity_grad(&self, crop: &NormalizedCrop, centroid: &Embedding) -> Result<SimilarityGrad> {
        self.check_centroid(centroid)?;
        let cfg = &self.config;
        let (t, d, h, dh, m) = (cfg.num_tokens(), cfg.hidden, cfg.heads, cfg.head_dim(), cfg.mlp_hidden);
        let x = self.encode_to_last(crop)?;
        let block = self.blocks.last().expect("depth >= 1");
        let last = self.run_block(block, &x);
        let (raw, trace) = self.head_forward(&last.out);
        let emb = Embedding::normalized(&raw)?;
        let c = centroid.values();
        let similarity = emb.dot(centroid);

        // d sim / d raw through the L2 normalisation.
        let rn = norm(&trace.raw);
        let mut g: Vec<f64> = c.iter().zip(emb.values()).map(|(ci, ei)| (ci - similarity * ei) / rn).collect();

        // Projection head.
        g = self.head_out.backward_input(&g, 1);
        for (layer, bn) in self.head.iter().zip(&trace.bn_out).rev() {
            let dpre: Vec<f64> = g
                .iter()
                .zip(bn)
                .enumerate()
                .map(|(i, (gi, b))| if *b > 0.0 { gi * layer.bn.scale(i) } else { 0.0 })
                .collect();
            g = layer.linear.backward_input(&dpre, 1);
        }

        // Mean pooling over patch tokens, then the final norm.
        let np = cfg.num_patches() as f64;
        let mut dz = vec![0.0; t * d];
        for i in 1..t {
            for k in 0..d {
                dz[i * d + k] = g[k] / np;
            }
        }
        let dx2 = self.norm.backward(&dz, &trace.final_ln, t);

        // SwiGLU MLP branch.
        let dhid = block.w3.backward_input(&dx2, t);
        let mut du = vec![0.0; t * 2 * m];
        for r in 0..t {
            for k in 0..m {
                let a = last.u[r * 2 * m + k];
                let gate = last.u[r * 2 * m + m + k];
                let s = sigmoid(a);
                let dhk = dhid[r * m + k];
                du[r * 2 * m + k] = dhk * gate * s * (1.0 + a * (1.0 - s));
                du[r * 2 * m + m + k] = dhk * a * s;
            }
        }
        let dn2 = block.w12.backward_input(&du, t);
        let dln2 = block.norm2.backward(&dn2, &last.ln2, t);
        let dx1: Vec<f64> = dx2.iter().zip(&dln2).map(|(a, b)| a + b).collect();
        debug_assert_eq!(dx1.len(), last.x1.len());

        // Attention output projection, then per-head attention.
        let dconcat = block.proj.backward_input(&dx1, t);
        let qkv = &last.qkv;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dqkv = vec![0.0; t * 3 * d];
        for head in 0..h {
            let a = &last.attention[head * t * t..(head + 1) * t * t];
            let col = |part: usize, k: usize| part * d + head * dh + k;
            for i in 0..t {
                // dA[i][j] = dO[i] . V[j]
                let da: Vec<f64> = (0..t)
                    .map(|j| (0..dh).map(|k| dconcat[i * d + head * dh + k] * qkv[j * 3 * d + col(2, k)]).sum())
                    .collect();
                let row = &a[i * t..(i + 1) * t];
                let inner: f64 = row.iter().zip(&da).map(|(p, q)| p * q).sum();
                for j in 0..t {
                    let ds = row[j] * (da[j] - inner) * scale;
                    for k in 0..dh {
                        dqkv[i * 3 * d + col(0, k)] += ds * qkv[j * 3 * d + col(1, k)];
                        dqkv[j * 3 * d + col(1, k)] += ds * qkv[i * 3 * d + col(0, k)];
                        // dV[j] += A[i][j] dO[i]
                        dqkv[j * 3 * d + col(2, k)] += row[j] * dconcat[i * d + head * dh + k];
                    }
                }
            }
        }

        let capture = self.capture_of(last.attention, last.qkv, Some(dqkv));
        Ok(SimilarityGrad { similarity, embedding: emb, capture, block_input: x })
    }
}

impl Embedder for VitWeights {
    fn dim(&self) -> usize {
        self.config.embed_dim()
    }

    fn input_side(&self) -> usize {
        self.config.image_size
    }

    fn embed(&self, crop: &NormalizedCrop) -> Result<crate::embed::Embedding> {
        self.forward(crop, false).map(|(e, _)| e)
    }

    fn explain(&self, crop: &NormalizedCrop, centroid: &Embedding) -> Option<Result<AttentionCapture>> {
        Some(self.similarity_grad(crop, centroid).map(|g| g.capture))
    }
}
