//! Training objectives.
//!
//! All classification terms are computed on a [`PassBundle`]: the query
//! embeddings, per-pass prototypes and softmax probabilities of the `n`
//! stochastic passes of one episode.
//!
//! * prototypical: `-log softmax(-d(q, c))[true]`, mean over queries, mean over passes
//! * triplet: `max(0, m + d(q, c_true) - d(q, c_hard))`, `c_hard` the nearest wrong prototype
//! * reconstruction: masked L1 + global L1 per image, mean over images and passes
//! * variance: population std of the true-class probability across passes,
//!   summed over queries
//! * total: `proto + α·variance + β·triplet + λ·recon`

use serde::{Deserialize, Serialize};

use crate::error::{Result, RgfsError};
use crate::masking::BlockMask;
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the cross-pass variance term.
    pub alpha: f64,
    /// Weight of the triplet term.
    pub beta: f64,
    /// Weight of the reconstruction term.
    pub lambda: f64,
    pub margin: f64,
    pub n_passes: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.01,
            beta: 1.0,
            lambda: 5.0,
            margin: 1.5,
            n_passes: 4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(RgfsError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(RgfsError::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        if self.n_passes == 0 {
            return Err(RgfsError::Config("n_passes must be at least 1".into()));
        }
        Ok(())
    }
}

/// How the two L1 terms of the reconstruction loss are reduced per image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconReduction {
    /// Mean over all `H·W·C` elements.
    #[default]
    Mean,
    /// Raw L1 sum.
    Sum,
}

pub fn sq_euclidean(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per-class means of class-major support embeddings (`N·K` rows).
pub fn compute_prototypes(support: &[Vec<f64>], n_way: usize, k_shot: usize) -> Result<Vec<Vec<f64>>> {
    if k_shot == 0 {
        return Err(RgfsError::Data("prototype of an empty class".into()));
    }
    if support.len() != n_way * k_shot {
        return Err(RgfsError::Shape(format!(
            "{} support embeddings for {n_way}-way {k_shot}-shot",
            support.len()
        )));
    }
    let dim = support.first().map_or(0, |v| v.len());
    Ok(support
        .chunks(k_shot)
        .map(|class| {
            let mut c = vec![0.0; dim];
            for e in class {
                for (ci, v) in c.iter_mut().zip(e) {
                    *ci += v;
                }
            }
            c.iter_mut().for_each(|v| *v /= k_shot as f64);
            c
        })
        .collect())
}

/// Softmax of negative distances, shifted by the minimum distance.
pub fn softmax_neg(dists: &[f64]) -> Vec<f64> {
    let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let ex: Vec<f64> = dists.iter().map(|d| (min - d).exp()).collect();
    let z: f64 = ex.iter().sum();
    ex.into_iter().map(|e| e / z).collect()
}

/// Outputs of one stochastic pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PassOutput {
    pub query_embeddings: Vec<Vec<f64>>,
    pub prototypes: Vec<Vec<f64>>,
    /// `|Q| × N` squared distances.
    pub distances: Vec<Vec<f64>>,
    /// `|Q| × N` class probabilities.
    pub probs: Vec<Vec<f64>>,
}

impl PassOutput {
    pub fn new(query_embeddings: Vec<Vec<f64>>, prototypes: Vec<Vec<f64>>) -> Self {
        let distances: Vec<Vec<f64>> = query_embeddings
            .iter()
            .map(|q| prototypes.iter().map(|c| sq_euclidean(q, c)).collect())
            .collect();
        let probs = distances.iter().map(|d| softmax_neg(d)).collect();
        PassOutput {
            query_embeddings,
            prototypes,
            distances,
            probs,
        }
    }
}

/// Everything the classification losses need from `n` passes of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct PassBundle {
    pub n_way: usize,
    /// Episode-local true class (`0..N`) of each query.
    pub labels: Vec<usize>,
    pub passes: Vec<PassOutput>,
    /// `|Q| × N` mean of the per-pass probabilities.
    pub mean_probs: Vec<Vec<f64>>,
}

impl PassBundle {
    pub fn new(n_way: usize, labels: Vec<usize>, passes: Vec<PassOutput>) -> Result<Self> {
        if passes.is_empty() {
            return Err(RgfsError::Config("a pass bundle needs at least one pass".into()));
        }
        if n_way < 2 {
            return Err(RgfsError::Config(format!("n_way must be at least 2, got {n_way}")));
        }
        for p in &passes {
            if p.prototypes.len() != n_way || p.probs.len() != labels.len() {
                return Err(RgfsError::Shape("pass output does not match bundle size".into()));
            }
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_way) {
            return Err(RgfsError::Shape(format!("query label {l} outside 0..{n_way}")));
        }
        let n = passes.len() as f64;
        let mean_probs = (0..labels.len())
            .map(|i| (0..n_way).map(|k| passes.iter().map(|p| p.probs[i][k]).sum::<f64>() / n).collect())
            .collect();
        Ok(PassBundle {
            n_way,
            labels,
            passes,
            mean_probs,
        })
    }

    pub fn n_passes(&self) -> usize {
        self.passes.len()
    }

    pub fn n_queries(&self) -> usize {
        self.labels.len()
    }

    /// `p_{i,k}^{(j)}` for the true class `k` of query `i`.
    pub fn true_prob(&self, pass: usize, query: usize) -> f64 {
        self.passes[pass].probs[query][self.labels[query]]
    }
}

/// Index of the nearest incorrect prototype (lowest index on ties).
pub fn hard_negative(dists: &[f64], true_class: usize) -> usize {
    let mut best = usize::MAX;
    let mut best_d = f64::INFINITY;
    for (k, &d) in dists.iter().enumerate() {
        if k != true_class && (best == usize::MAX || d < best_d) {
            best = k;
            best_d = d;
        }
    }
    best
}

pub fn proto_loss(bundle: &PassBundle) -> Result<f64> {
    let mut total = 0.0;
    for p in &bundle.passes {
        let mut acc = 0.0;
        for (i, d) in p.distances.iter().enumerate() {
            if d.iter().any(|v| !v.is_finite()) {
                return Err(RgfsError::NonFinite("prototype distance".into()));
            }
            // log-sum-exp over -d
            let min = d.iter().copied().fold(f64::INFINITY, f64::min);
            let lse = -min + d.iter().map(|v| (min - v).exp()).sum::<f64>().ln();
            acc += d[bundle.labels[i]] + lse;
        }
        total += acc / bundle.n_queries() as f64;
    }
    Ok(total / bundle.n_passes() as f64)
}

pub fn triplet_loss(bundle: &PassBundle, margin: f64) -> f64 {
    let mut total = 0.0;
    for p in &bundle.passes {
        let mut acc = 0.0;
        for (i, d) in p.distances.iter().enumerate() {
            let k = bundle.labels[i];
            let neg = hard_negative(d, k);
            acc += (margin + d[k] - d[neg]).max(0.0);
        }
        total += acc / bundle.n_queries() as f64;
    }
    total / bundle.n_passes() as f64
}

pub fn variance_loss(bundle: &PassBundle) -> f64 {
    let n = bundle.n_passes() as f64;
    (0..bundle.n_queries())
        .map(|i| {
            let k = bundle.labels[i];
            let mean = bundle.mean_probs[i][k];
            let ss: f64 = bundle.passes.iter().map(|p| (p.probs[i][k] - mean).powi(2)).sum();
            (ss / n).sqrt()
        })
        .sum()
}

fn check_recon_shapes(original: &Tensor3, recon: &Tensor3, mask: &BlockMask) -> Result<()> {
    if original.shape() != recon.shape() {
        return Err(RgfsError::Shape(format!(
            "reconstruction {:?} vs original {:?}",
            recon.shape(),
            original.shape()
        )));
    }
    if mask.height != original.height || mask.width != original.width {
        return Err(RgfsError::Shape(format!(
            "mask {}x{} vs image {}x{}",
            mask.height, mask.width, original.height, original.width
        )));
    }
    Ok(())
}

/// Masked + global L1 for one image.
pub fn recon_image_loss(original: &Tensor3, recon: &Tensor3, mask: &BlockMask, reduction: ReconReduction) -> Result<f64> {
    check_recon_shapes(original, recon, mask)?;
    let plane = original.plane();
    let mut masked = 0.0;
    let mut global = 0.0;
    for (i, (x, y)) in original.data.iter().zip(&recon.data).enumerate() {
        let a = (x - y).abs();
        global += a;
        if mask.bits[i % plane] == 1 {
            masked += a;
        }
    }
    let norm = match reduction {
        ReconReduction::Mean => original.len() as f64,
        ReconReduction::Sum => 1.0,
    };
    Ok((masked + global) / norm)
}

/// `recons[j][b]` is the pass-`j` reconstruction of `originals[b]`.
pub fn recon_loss(originals: &[Tensor3], recons: &[Vec<Tensor3>], masks: &[BlockMask], reduction: ReconReduction) -> Result<f64> {
    if recons.is_empty() || originals.is_empty() {
        return Err(RgfsError::Shape("reconstruction loss needs at least one pass and one image".into()));
    }
    if masks.len() != originals.len() {
        return Err(RgfsError::Shape("one mask per image required".into()));
    }
    let mut total = 0.0;
    for pass in recons {
        if pass.len() != originals.len() {
            return Err(RgfsError::Shape("reconstruction batch size mismatch".into()));
        }
        let mut acc = 0.0;
        for ((x, y), m) in originals.iter().zip(pass).zip(masks) {
            acc += recon_image_loss(x, y, m, reduction)?;
        }
        total += acc / originals.len() as f64;
    }
    Ok(total / recons.len() as f64)
}

/// Gradient of `scale · recon_image_loss` with respect to the reconstruction.
/// `sign(0)` is taken as 0.
pub fn recon_image_grad(original: &Tensor3, recon: &Tensor3, mask: &BlockMask, reduction: ReconReduction, scale: f64) -> Tensor3 {
    let plane = original.plane();
    let norm = match reduction {
        ReconReduction::Mean => original.len() as f64,
        ReconReduction::Sum => 1.0,
    };
    let s = scale / norm;
    let data = original
        .data
        .iter()
        .zip(&recon.data)
        .enumerate()
        .map(|(i, (x, y))| {
            let sign = if y > x {
                1.0
            } else if y < x {
                -1.0
            } else {
                0.0
            };
            let w = 1.0 + f64::from(mask.bits[i % plane]);
            s * sign * w
        })
        .collect();
    Tensor3::from_vec(recon.channels, recon.height, recon.width, data)
}

/// Raw loss components before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub proto: f64,
    pub triplet: f64,
    pub recon: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub proto: f64,
    pub triplet: f64,
    pub recon: f64,
    pub variance: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "episode_index,proto,triplet,recon,variance,total";

    pub fn csv_row(&self, episode: usize) -> String {
        format!(
            "{episode},{},{},{},{},{}",
            self.proto, self.triplet, self.recon, self.variance, self.total
        )
    }
}

pub fn total_loss(c: LossComponents, w: &LossWeights) -> Result<LossReport> {
    for (name, v) in [("proto", c.proto), ("triplet", c.triplet), ("recon", c.recon), ("variance", c.variance)] {
        if !v.is_finite() {
            return Err(RgfsError::NonFinite(format!("{name} loss")));
        }
    }
    Ok(LossReport {
        proto: c.proto,
        triplet: c.triplet,
        recon: c.recon,
        variance: c.variance,
        total: c.proto + w.alpha * c.variance + w.beta * c.triplet + w.lambda * c.recon,
    })
}

/// Gradients of the weighted classification terms for one pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PassGrads {
    /// `|Q| × D`
    pub query: Vec<Vec<f64>>,
    /// `N × D`; each support embedding of class `k` receives `prototype[k] / K`.
    pub prototype: Vec<Vec<f64>>,
}

/// Gradient of `proto + α·variance + β·triplet` with respect to every pass's
/// query embeddings and prototypes.
pub fn classification_grads(bundle: &PassBundle, w: &LossWeights) -> Vec<PassGrads> {
    let n = bundle.n_passes();
    let nq = bundle.n_queries();
    let nway = bundle.n_way;
    let per = 1.0 / (n as f64 * nq as f64);

    // dL/dd[j][i][c]
    let mut gd = vec![vec![vec![0.0; nway]; nq]; n];
    for (j, p) in bundle.passes.iter().enumerate() {
        for i in 0..nq {
            let k = bundle.labels[i];
            for c in 0..nway {
                // d(-log p_k)/d d_c = 1[c = k] - p_c
                let ind = if c == k { 1.0 } else { 0.0 };
                gd[j][i][c] += per * (ind - p.probs[i][c]);
            }
            if w.beta != 0.0 {
                let d = &p.distances[i];
                let neg = hard_negative(d, k);
                if w.margin + d[k] - d[neg] > 0.0 {
                    gd[j][i][k] += w.beta * per;
                    gd[j][i][neg] -= w.beta * per;
                }
            }
        }
    }
    if w.alpha != 0.0 && n > 1 {
        let nf = n as f64;
        for i in 0..nq {
            let k = bundle.labels[i];
            let mean = bundle.mean_probs[i][k];
            let ss: f64 = bundle.passes.iter().map(|p| (p.probs[i][k] - mean).powi(2)).sum();
            let sd = (ss / nf).sqrt();
            if sd == 0.0 {
                continue;
            }
            for (j, p) in bundle.passes.iter().enumerate() {
                let pk = p.probs[i][k];
                let dsd_dp = (pk - mean) / (nf * sd);
                // dp_k/d d_c = -p_k (1[c = k] - p_c)
                for c in 0..nway {
                    let ind = if c == k { 1.0 } else { 0.0 };
                    gd[j][i][c] += w.alpha * dsd_dp * (-pk * (ind - p.probs[i][c]));
                }
            }
        }
    }

    bundle
        .passes
        .iter()
        .zip(gd)
        .map(|(p, gdj)| {
            let dim = p.query_embeddings.first().map_or(0, |q| q.len());
            let mut gq = vec![vec![0.0; dim]; nq];
            let mut gc = vec![vec![0.0; dim]; nway];
            for i in 0..nq {
                let q = &p.query_embeddings[i];
                for c in 0..nway {
                    let g = gdj[i][c];
                    if g == 0.0 {
                        continue;
                    }
                    for t in 0..dim {
                        let diff = 2.0 * (q[t] - p.prototypes[c][t]);
                        gq[i][t] += g * diff;
                        gc[c][t] -= g * diff;
                    }
                }
            }
            PassGrads { query: gq, prototype: gc }
        })
        .collect()
}
