//! Multi-Similarity loss over a labelled batch of unit embeddings, its exact
//! gradient, and a small sphere-constrained optimiser.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embed::{dot, l2_normalize, norm, UNIT_TOL};
use crate::error::{bail, Result};
use crate::metrics::distance_ratio;

/// Bound on exponent arguments.
pub const EXP_CLAMP: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsParams {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for MsParams {
    fn default() -> Self {
        Self { alpha: 2.0, beta: 50.0, lambda: 0.5 }
    }
}

impl MsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta > 0.0) || !(self.lambda > -1.0 && self.lambda < 1.0) {
            bail!(Parameter, "need alpha > 0, beta > 0 and lambda in (-1, 1), got {self:?}");
        }
        Ok(())
    }
}

/// `m` unit rows of dimension `d` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    dim: usize,
    embeddings: Vec<f64>,
    labels: Vec<u32>,
}

impl Batch {
    pub fn new(dim: usize, embeddings: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        let b = Self::unchecked(dim, embeddings, labels)?;
        b.check_unit()?;
        Ok(b)
    }

    fn unchecked(dim: usize, embeddings: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        if dim == 0 || embeddings.len() != dim * labels.len() {
            bail!(Dimension, "{} values do not form {} rows of {dim}", embeddings.len(), labels.len());
        }
        if labels.len() < 2 {
            bail!(Precondition, "a batch needs at least two rows");
        }
        Ok(Self { dim, embeddings, labels })
    }

    /// Normalises each row of `rows` first.
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<u32>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut embeddings = Vec::with_capacity(dim * rows.len());
        for r in rows {
            if r.len() != dim {
                bail!(Dimension, "ragged rows");
            }
            embeddings.extend(l2_normalize(r)?);
        }
        Self::new(dim, embeddings, labels)
    }

    fn check_unit(&self) -> Result<()> {
        for i in 0..self.len() {
            let n = norm(self.row(i));
            if !((n - 1.0).abs() <= UNIT_TOL) {
                bail!(Precondition, "row {i} has norm {n}");
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn embeddings(&self) -> &[f64] {
        &self.embeddings
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
}

fn clamped_exp(x: f64) -> f64 {
    x.clamp(-EXP_CLAMP, EXP_CLAMP).exp()
}

fn similarity(b: &Batch, i: usize, k: usize) -> f64 {
    dot(b.row(i), b.row(k))
}

fn loss_unchecked(b: &Batch, p: &MsParams) -> f64 {
    let m = b.len();
    let mut total = 0.0;
    for i in 0..m {
        let (mut pos, mut neg) = (0.0, 0.0);
        for k in 0..m {
            if k == i {
                continue;
            }
            let s = similarity(b, i, k);
            if b.labels[k] == b.labels[i] {
                pos += clamped_exp(-p.alpha * (s - p.lambda));
            } else {
                neg += clamped_exp(p.beta * (s - p.lambda));
            }
        }
        total += pos.ln_1p() / p.alpha + neg.ln_1p() / p.beta;
    }
    total / m as f64
}

pub fn ms_loss(b: &Batch, p: &MsParams) -> Result<f64> {
    p.validate()?;
    b.check_unit()?;
    Ok(loss_unchecked(b, p))
}

/// Loss of arbitrary (not necessarily unit) rows; similarities are plain
/// dot products. Used for gradient checking.
pub fn ms_loss_raw(dim: usize, rows: &[f64], labels: &[u32], p: &MsParams) -> Result<f64> {
    p.validate()?;
    let b = Batch::unchecked(dim, rows.to_vec(), labels.to_vec())?;
    Ok(loss_unchecked(&b, p))
}

fn grad_unchecked(b: &Batch, p: &MsParams) -> Vec<f64> {
    let (m, d) = (b.len(), b.dim);
    let mut g = vec![0.0; m * d];
    let inv_m = 1.0 / m as f64;
    for i in 0..m {
        let mut pos_w = vec![0.0; m];
        let mut neg_w = vec![0.0; m];
        let (mut pos, mut neg) = (0.0, 0.0);
        for k in 0..m {
            if k == i {
                continue;
            }
            let s = similarity(b, i, k);
            if b.labels[k] == b.labels[i] {
                let a = -p.alpha * (s - p.lambda);
                // The clamp is flat outside its range.
                let e = clamped_exp(a);
                pos += e;
                pos_w[k] = if a.abs() < EXP_CLAMP { e } else { 0.0 };
            } else {
                let a = p.beta * (s - p.lambda);
                let e = clamped_exp(a);
                neg += e;
                neg_w[k] = if a.abs() < EXP_CLAMP { e } else { 0.0 };
            }
        }
        for k in 0..m {
            // dL_i / dS_ik
            let c = (-pos_w[k] / (1.0 + pos) + neg_w[k] / (1.0 + neg)) * inv_m;
            if c == 0.0 {
                continue;
            }
            for j in 0..d {
                g[i * d + j] += c * b.embeddings[k * d + j];
                g[k * d + j] += c * b.embeddings[i * d + j];
            }
        }
    }
    g
}

/// Gradient of [`ms_loss`] with respect to every coordinate, rows treated
/// as free vectors.
pub fn ms_grad(b: &Batch, p: &MsParams) -> Result<Vec<f64>> {
    p.validate()?;
    b.check_unit()?;
    Ok(grad_unchecked(b, p))
}

/// Removes the radial component of each row's gradient.
pub fn project_tangent(b: &Batch, grad: &[f64]) -> Vec<f64> {
    let d = b.dim;
    let mut out = grad.to_vec();
    for i in 0..b.len() {
        let r = b.row(i);
        let radial = dot(r, &grad[i * d..(i + 1) * d]);
        for j in 0..d {
            out[i * d + j] -= radial * r[j];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceStep {
    pub loss: f64,
    /// Distance ratio; `None` for single-class batches.
    pub rho: Option<f64>,
}

/// Plain gradient descent, re-projecting every row onto the sphere after
/// each step. `trace[0]` describes the input; `trace[s]` the batch after `s`
/// steps.
pub fn toy_optimize(b: &Batch, p: &MsParams, lr: f64, steps: usize) -> Result<(Batch, Vec<TraceStep>)> {
    if !(lr > 0.0) {
        bail!(Parameter, "learning rate must be positive, got {lr}");
    }
    p.validate()?;
    b.check_unit()?;
    let mut cur = b.clone();
    let d = b.dim;
    let mut trace = Vec::with_capacity(steps + 1);
    let record = |cur: &Batch| -> Result<TraceStep> {
        let loss = loss_unchecked(cur, p);
        if !loss.is_finite() {
            bail!(Numeric, "loss diverged");
        }
        let rho = distance_ratio(&cur.rows(), cur.labels()).ok().map(|r| r.ratio);
        Ok(TraceStep { loss, rho })
    };
    trace.push(record(&cur)?);
    for _ in 0..steps {
        let g = grad_unchecked(&cur, p);
        for i in 0..cur.len() {
            let row = &mut cur.embeddings[i * d..(i + 1) * d];
            for (x, gx) in row.iter_mut().zip(&g[i * d..(i + 1) * d]) {
                *x -= lr * gx;
            }
            let n = norm(row);
            if !(n > 1e-12) || !n.is_finite() {
                bail!(Numeric, "row {i} collapsed during optimisation");
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        trace.push(record(&cur)?);
    }
    Ok((cur, trace))
}

/// `classes x per_class` unit points: each class is a random centre with
/// members tilted away from it by `spread` radians in random directions.
pub fn clustered_batch(classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Batch> {
    if dim < 2 || classes == 0 || per_class == 0 {
        bail!(Parameter, "need dim >= 2 and non-empty classes");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for c in 0..classes {
        let centre = l2_normalize(&gauss(dim))?;
        for _ in 0..per_class {
            let mut t = gauss(dim);
            let along = dot(&t, &centre);
            t.iter_mut().zip(&centre).for_each(|(x, c)| *x -= along * c);
            let t = l2_normalize(&t)?;
            let (s, co) = spread.sin_cos();
            rows.push(centre.iter().zip(&t).map(|(c, t)| co * c + s * t).collect());
            labels.push(c as u32);
        }
    }
    Batch::from_rows(&rows, labels)
}
