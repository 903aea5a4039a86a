//! Embedding-space analytics: centroids and nearest-centroid classification,
//! retrieval metrics, clustering quality, separability and leave-one-out
//! confusion.
//!
//! Labelled sets are passed as parallel slices of points and `u32` labels.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{euclidean, l2_normalize, norm, Embedding, UNIT_TOL};
use crate::error::{bail, Result};

/// Default softmin temperature for classification confidence.
pub const DEFAULT_TAU: f64 = 0.1;
pub const KMEANS_MAX_ITER: usize = 300;

fn check_set(points: &[Vec<f64>], labels: &[u32]) -> Result<usize> {
    if points.len() != labels.len() {
        bail!(Input, "{} points but {} labels", points.len(), labels.len());
    }
    let d = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != d) {
        bail!(Dimension, "points have differing dimensions");
    }
    Ok(points.len())
}

/// Indices of all other points, nearest first; ties go to the lower index.
pub fn neighbours(points: &[Vec<f64>], q: usize) -> Vec<(usize, f64)> {
    let mut v: Vec<(usize, f64)> = (0..points.len())
        .filter(|&j| j != q)
        .map(|j| (j, euclidean(&points[q], &points[j])))
        .collect();
    v.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidSet {
    pub classes: Vec<String>,
    pub centroids: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl CentroidSet {
    pub fn validate(&self) -> Result<()> {
        let n = self.classes.len();
        if self.centroids.len() != n || self.counts.len() != n {
            bail!(Format, "centroid set has mismatched lengths");
        }
        let d = self.dim();
        for (name, c) in self.classes.iter().zip(&self.centroids) {
            if c.len() != d {
                bail!(Format, "centroid {name} has {} dims, expected {d}", c.len());
            }
            if (norm(c) - 1.0).abs() > UNIT_TOL {
                bail!(Format, "centroid {name} is not unit norm");
            }
        }
        for (i, a) in self.classes.iter().enumerate() {
            if self.classes[..i].contains(a) {
                bail!(Format, "duplicate class {a}");
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    pub fn centroid(&self, class: &str) -> Option<Embedding> {
        self.index_of(class).and_then(|i| Embedding::from_unit(self.centroids[i].clone()).ok())
    }
}

/// Normalised class means. `labels[i]` indexes into `classes`.
pub fn fit_centroids(classes: &[String], points: &[Vec<f64>], labels: &[usize]) -> Result<CentroidSet> {
    if points.len() != labels.len() {
        bail!(Input, "{} points but {} labels", points.len(), labels.len());
    }
    let d = points.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; d]; classes.len()];
    let mut counts = vec![0usize; classes.len()];
    for (p, &l) in points.iter().zip(labels) {
        if l >= classes.len() {
            bail!(Input, "label {l} is not a declared class");
        }
        if p.len() != d {
            bail!(Dimension, "points have differing dimensions");
        }
        counts[l] += 1;
        sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    let mut centroids = Vec::with_capacity(classes.len());
    for (i, s) in sums.iter().enumerate() {
        if counts[i] == 0 {
            bail!(Input, "class {} has no samples", classes[i]);
        }
        let mean: Vec<f64> = s.iter().map(|v| v / counts[i] as f64).collect();
        centroids.push(l2_normalize(&mean)?);
    }
    let cs = CentroidSet { classes: classes.to_vec(), centroids, counts };
    cs.validate()?;
    Ok(cs)
}

/// [`fit_centroids`] over string labels; classes in sorted order.
pub fn fit_centroids_named<S: AsRef<str>>(points: &[Vec<f64>], names: &[S]) -> Result<CentroidSet> {
    let mut classes: Vec<String> = names.iter().map(|s| String::from(s.as_ref())).collect();
    classes.sort();
    classes.dedup();
    let labels: Vec<usize> = names
        .iter()
        .map(|n| classes.binary_search_by(|c| c.as_str().cmp(n.as_ref())).expect("present"))
        .collect();
    fit_centroids(&classes, points, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class_name: String,
    pub class_index: usize,
    pub distance: f64,
    pub confidence: f64,
    /// Softmin confidence of every class, in class order.
    pub distribution: Vec<f64>,
}

/// Nearest centroid with softmin confidence `exp(-d_c/tau) / sum exp(-d_k/tau)`.
pub fn classify(e: &[f64], cs: &CentroidSet, tau: f64) -> Result<Prediction> {
    if cs.is_empty() {
        bail!(Input, "no centroids to classify against");
    }
    if !(tau > 0.0) {
        bail!(Parameter, "temperature must be positive, got {tau}");
    }
    if e.len() != cs.dim() {
        bail!(Dimension, "embedding has {} dims, centroids {}", e.len(), cs.dim());
    }
    let dists: Vec<f64> = cs.centroids.iter().map(|c| euclidean(e, c)).collect();
    let mut best = 0;
    for (i, d) in dists.iter().enumerate() {
        if *d < dists[best] {
            best = i;
        }
    }
    let dmin = dists[best];
    let w: Vec<f64> = dists.iter().map(|d| (-(d - dmin) / tau).exp()).collect();
    let z: f64 = w.iter().sum();
    let distribution: Vec<f64> = w.iter().map(|v| v / z).collect();
    Ok(Prediction {
        class_name: cs.classes[best].clone(),
        class_index: best,
        distance: dmin,
        confidence: distribution[best],
        distribution,
    })
}

/// Fraction of queries with a same-label point among their `k` nearest others.
pub fn recall_at_k(points: &[Vec<f64>], labels: &[u32], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let n = check_set(points, labels)?;
    if n < 2 {
        bail!(Input, "recall needs at least two points");
    }
    for &k in ks {
        if k == 0 || k >= n {
            bail!(Parameter, "K = {k} must be in 1..{n}");
        }
    }
    // Rank of the first same-label neighbour for each query.
    let first_hit: Vec<Option<usize>> = (0..n)
        .map(|q| neighbours(points, q).iter().position(|&(j, _)| labels[j] == labels[q]))
        .collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = first_hit.iter().filter(|r| r.is_some_and(|r| r < k)).count();
            (k, hits as f64 / n as f64)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapAtR {
    pub value: f64,
    pub evaluated: usize,
    /// Queries whose class has no other member.
    pub skipped: usize,
}

pub fn map_at_r(points: &[Vec<f64>], labels: &[u32]) -> Result<MapAtR> {
    let n = check_set(points, labels)?;
    let (mut total, mut evaluated, mut skipped) = (0.0, 0, 0);
    for q in 0..n {
        let r = labels.iter().filter(|&&l| l == labels[q]).count() - 1;
        if r == 0 {
            skipped += 1;
            continue;
        }
        let nb = neighbours(points, q);
        let (mut hits, mut ap) = (0usize, 0.0);
        for (rank, &(j, _)) in nb.iter().take(r).enumerate() {
            if labels[j] == labels[q] {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        total += ap / r as f64;
        evaluated += 1;
    }
    let value = if evaluated == 0 { 0.0 } else { total / evaluated as f64 };
    Ok(MapAtR { value, evaluated, skipped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Inertia after each assignment step.
    pub inertia: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iter` is reached. Empty clusters keep their centre.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    let n = points.len();
    if k == 0 || k > n {
        bail!(Parameter, "k = {k} must be in 1..={n}");
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        bail!(Dimension, "points have differing dimensions");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, w) in d2.iter().enumerate() {
                if *w > 0.0 {
                    pick = Some(i);
                    if r < *w {
                        break;
                    }
                    r -= w;
                }
            }
            pick.expect("positive total")
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (w, p) in d2.iter_mut().zip(points) {
            *w = w.min(sq_dist(p, &points[next]));
        }
    }
    let mut centroids: Vec<Vec<f64>> = chosen.iter().map(|&i| points[i].clone()).collect();
    let mut assignment = vec![usize::MAX; n];
    let mut inertia = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut total = 0.0;
        for (a, p) in assignment.iter_mut().zip(points) {
            let (c, dist) = nearest(p, &centroids);
            total += dist;
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        inertia.push(total);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignment.iter().zip(points) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    Ok(KMeans { assignment, centroids, inertia })
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts.filter(|&c| c > 0).map(|c| c as f64 / n).map(|p| -p * p.ln()).sum()
}

/// `I(A; B) / sqrt(H(A) H(B))` with natural logarithms.
pub fn nmi<A: Ord + Copy, B: Ord + Copy>(a: &[A], b: &[B]) -> Result<f64> {
    if a.len() != b.len() {
        bail!(Input, "partitions have lengths {} and {}", a.len(), b.len());
    }
    if a.is_empty() {
        bail!(Input, "empty partitions");
    }
    let n = a.len() as f64;
    let mut ca: BTreeMap<A, usize> = BTreeMap::new();
    let mut cb: BTreeMap<B, usize> = BTreeMap::new();
    let mut joint: BTreeMap<(A, B), usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
        *joint.entry((x, y)).or_default() += 1;
    }
    let ha = entropy(ca.values().copied(), n);
    let hb = entropy(cb.values().copied(), n);
    if ha == 0.0 || hb == 0.0 {
        return Ok(if ha == 0.0 && hb == 0.0 { 1.0 } else { 0.0 });
    }
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        let pxy = c as f64 / n;
        let px = ca[&x] as f64 / n;
        let py = cb[&y] as f64 / n;
        mi += pxy * (pxy / (px * py)).ln();
    }
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceRatio {
    #[serde(with = "inf_float")]
    pub ratio: f64,
    pub inter_mean: f64,
    pub intra_mean: f64,
    /// Both means are zero, so the ratio carries no information.
    pub degenerate: bool,
}

/// Mean inter-class over mean intra-class pairwise distance.
pub fn distance_ratio(points: &[Vec<f64>], labels: &[u32]) -> Result<DistanceRatio> {
    let n = check_set(points, labels)?;
    let (mut inter, mut ni, mut intra, mut na) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(&points[i], &points[j]);
            if labels[i] == labels[j] {
                intra += d;
                na += 1;
            } else {
                inter += d;
                ni += 1;
            }
        }
    }
    if na == 0 {
        bail!(Input, "no intra-class pairs");
    }
    if ni == 0 {
        bail!(Input, "need at least two classes");
    }
    let inter_mean = inter / ni as f64;
    let intra_mean = intra / na as f64;
    let ratio = if intra_mean == 0.0 { f64::INFINITY } else { inter_mean / intra_mean };
    Ok(DistanceRatio { ratio, inter_mean, intra_mean, degenerate: intra_mean == 0.0 && inter_mean == 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnConfusion {
    /// Distinct labels in ascending order; rows and columns follow it.
    pub classes: Vec<u32>,
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<u32>,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Majority label among the `k` nearest others; a tied vote goes to the
/// label whose closest member ranks first.
pub fn knn_predict(points: &[Vec<f64>], labels: &[u32], q: usize, k: usize) -> u32 {
    let nb = neighbours(points, q);
    let top = &nb[..k.min(nb.len())];
    let mut votes: Vec<(u32, usize, usize)> = Vec::new(); // label, count, first rank
    for (rank, &(j, _)) in top.iter().enumerate() {
        match votes.iter_mut().find(|v| v.0 == labels[j]) {
            Some(v) => v.1 += 1,
            None => votes.push((labels[j], 1, rank)),
        }
    }
    votes.iter().max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2))).expect("k >= 1").0
}

pub fn knn_confusion(points: &[Vec<f64>], labels: &[u32], k: usize) -> Result<KnnConfusion> {
    let n = check_set(points, labels)?;
    if n < 2 {
        bail!(Input, "leave-one-out needs at least two points");
    }
    if k == 0 {
        bail!(Parameter, "k must be positive");
    }
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let idx = |l: u32| classes.binary_search(&l).expect("known label");
    let c = classes.len();
    let mut confusion = vec![vec![0usize; c]; c];
    let predictions: Vec<u32> = (0..n).map(|q| knn_predict(points, labels, q, k)).collect();
    for (t, p) in labels.iter().zip(&predictions) {
        confusion[idx(*t)][idx(*p)] += 1;
    }
    let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
    let macro_f1 = macro_f1(&confusion);
    Ok(KnnConfusion { classes, confusion, predictions, accuracy: correct as f64 / n as f64, macro_f1 })
}

/// Unweighted mean of per-class F1; rows are true classes.
pub fn macro_f1(confusion: &[Vec<usize>]) -> f64 {
    let c = confusion.len();
    if c == 0 {
        return 0.0;
    }
    let sum: f64 = (0..c)
        .map(|i| {
            let tp = confusion[i][i] as f64;
            let predicted: usize = (0..c).map(|r| confusion[r][i]).sum();
            let actual: usize = confusion[i].iter().sum();
            if predicted == 0 || tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (predicted as f64 + actual as f64)
            }
        })
        .sum();
    sum / c as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntraClassStats {
    pub class_name: String,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

/// Mean and population std of distances to each class's centroid.
pub fn intra_class_stats<S: AsRef<str>>(
    points: &[Vec<f64>],
    names: &[S],
    cs: &CentroidSet,
) -> Result<Vec<IntraClassStats>> {
    if points.len() != names.len() {
        bail!(Input, "{} points but {} labels", points.len(), names.len());
    }
    let mut dists: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (p, name) in points.iter().zip(names) {
        let Some(i) = cs.index_of(name.as_ref()) else {
            bail!(Input, "class {} is not in the centroid set", name.as_ref());
        };
        if p.len() != cs.dim() {
            bail!(Dimension, "point has {} dims, centroids {}", p.len(), cs.dim());
        }
        dists.entry(name.as_ref()).or_default().push(euclidean(p, &cs.centroids[i]));
    }
    Ok(dists
        .into_iter()
        .map(|(name, d)| {
            let m = d.len() as f64;
            let mean = d.iter().sum::<f64>() / m;
            let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m;
            IntraClassStats { class_name: String::from(name), count: d.len(), mean, std: var.sqrt() }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub map_at_r: MapAtR,
    pub nmi: f64,
    pub rho: DistanceRatio,
    pub knn: KnnConfusion,
    pub intra_class: Vec<IntraClassStats>,
}

/// Every metric over a labelled set: Recall@K for the given `ks` (those not
/// below `n` are dropped), mAP@R, NMI of k-means with one cluster per class,
/// the distance ratio, 1-NN leave-one-out confusion and intra-class spread.
pub fn evaluate<S: AsRef<str>>(points: &[Vec<f64>], names: &[S], ks: &[usize], seed: u64) -> Result<EvalReport> {
    let cs = fit_centroids_named(points, names)?;
    let labels: Vec<u32> = names.iter().map(|n| cs.index_of(n.as_ref()).expect("fitted") as u32).collect();
    let n = points.len();
    let ks: Vec<usize> = ks.iter().copied().filter(|&k| k >= 1 && k < n).collect();
    let clusters = kmeans(points, cs.len(), seed, KMEANS_MAX_ITER)?;
    Ok(EvalReport {
        n,
        recall_at_k: recall_at_k(points, &labels, &ks)?,
        map_at_r: map_at_r(points, &labels)?,
        nmi: nmi(&clusters.assignment, &labels)?,
        rho: distance_ratio(points, &labels)?,
        knn: knn_confusion(points, &labels, 1)?,
        intra_class: intra_class_stats(points, names, &cs)?,
    })
}

/// Serialises non-finite floats as the strings `"inf"`, `"-inf"` and `"nan"`.
pub mod inf_float {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> core::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(alloc::string::String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> core::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(D::Error::custom(alloc::format!("unexpected float {other:?}"))),
            },
        }
    }
}
