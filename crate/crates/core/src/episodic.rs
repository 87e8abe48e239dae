//! Episode construction and multi-pass execution.

use std::sync::Arc;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetSplit, ImageSample};
use crate::error::{Result, RgfsError};
use crate::losses::{compute_prototypes, PassBundle, PassOutput};
use crate::masking::{generate_block_mask, mask_tensor, BlockMask, MaskConfig};
use crate::network::{Mode, Network};
use crate::rng::{derive_seed, rng_from, stream};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassPool {
    Base,
    Novel,
    All,
}

impl ClassPool {
    pub fn classes(self, split: &DatasetSplit) -> Vec<usize> {
        match self {
            ClassPool::Base => split.base.clone(),
            ClassPool::Novel => split.novel.clone(),
            ClassPool::All => split.all(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassPool::Base => "base",
            ClassPool::Novel => "novel",
            ClassPool::All => "all",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    /// Queries per class.
    pub q_queries: usize,
    /// Reconstruction batch size; `None` means `n_way × k_shot`.
    #[serde(default)]
    pub recon_batch: Option<usize>,
    pub class_pool: ClassPool,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            n_way: 5,
            k_shot: 5,
            q_queries: 15,
            recon_batch: None,
            class_pool: ClassPool::Base,
        }
    }
}

impl EpisodeSpec {
    pub fn recon_size(&self) -> usize {
        self.recon_batch.unwrap_or(self.n_way * self.k_shot)
    }

    pub fn with_pool(mut self, pool: ClassPool) -> Self {
        self.class_pool = pool;
        self
    }

    /// Checks the spec alone and against every class of its pool.
    pub fn validate(&self, dataset: &Dataset, split: &DatasetSplit) -> Result<()> {
        if self.n_way < 2 {
            return Err(RgfsError::Config(format!("n_way must be at least 2, got {}", self.n_way)));
        }
        if self.k_shot == 0 || self.q_queries == 0 {
            return Err(RgfsError::Config("k_shot and q_queries must be at least 1".into()));
        }
        let pool = self.class_pool.classes(split);
        if pool.len() < self.n_way {
            return Err(RgfsError::Config(format!(
                "pool too small: {}-way episodes requested from the {} pool of {} classes",
                self.n_way,
                self.class_pool.name(),
                pool.len()
            )));
        }
        let needed = self.k_shot + self.q_queries;
        for &c in &pool {
            let available = dataset.indices_of(c).len();
            if available < needed {
                return Err(RgfsError::InsufficientSamples {
                    class: dataset.manifest.class_name(c).to_string(),
                    needed,
                    available,
                });
            }
        }
        let total: usize = pool.iter().map(|&c| dataset.indices_of(c).len()).sum();
        if self.recon_size() > total {
            return Err(RgfsError::Config(format!(
                "recon_batch {} exceeds the {total} samples of the pool",
                self.recon_size()
            )));
        }
        Ok(())
    }
}

/// One N-way K-shot task. Support and query lists are class-major: entries
/// `[k*K, (k+1)*K)` of `support` belong to `class_ids[k]`.
#[derive(Debug, Clone)]
pub struct Episode {
    pub support: Vec<Arc<ImageSample>>,
    pub query: Vec<Arc<ImageSample>>,
    pub recon_images: Vec<Arc<ImageSample>>,
    pub class_ids: Vec<usize>,
    pub k_shot: usize,
    pub q_queries: usize,
    pub seed: u64,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.class_ids.len()
    }

    /// Episode-local label (`0..N`) of each query.
    pub fn query_labels(&self) -> Vec<usize> {
        (0..self.query.len()).map(|i| i / self.q_queries).collect()
    }

    /// Debug dump listing the source ids of each role.
    pub fn to_json(&self) -> serde_json::Value {
        let ids = |v: &[Arc<ImageSample>]| v.iter().map(|s| s.source_id.clone()).collect::<Vec<_>>();
        serde_json::json!({
            "seed": self.seed,
            "class_ids": self.class_ids,
            "support": ids(&self.support),
            "query": ids(&self.query),
            "recon": ids(&self.recon_images),
        })
    }
}

/// Draws an episode: `N` classes uniformly without replacement from the pool,
/// `K + q` samples per class without replacement (first `K` are support), and
/// `R` reconstruction images uniformly without replacement from the pool.
pub fn sample_episode(dataset: &Dataset, split: &DatasetSplit, spec: &EpisodeSpec, seed: u64) -> Result<Episode> {
    spec.validate(dataset, split)?;
    let pool = spec.class_pool.classes(split);
    let mut rng = rng_from(seed);
    let classes: Vec<usize> = index::sample(&mut rng, pool.len(), spec.n_way)
        .into_iter()
        .map(|i| pool[i])
        .collect();

    let per = spec.k_shot + spec.q_queries;
    let mut support = Vec::with_capacity(spec.n_way * spec.k_shot);
    let mut query = Vec::with_capacity(spec.n_way * spec.q_queries);
    for &c in &classes {
        let idx = dataset.indices_of(c);
        let picks = index::sample(&mut rng, idx.len(), per).into_vec();
        for (n, p) in picks.into_iter().enumerate() {
            let s = Arc::clone(dataset.sample(idx[p]));
            if n < spec.k_shot {
                support.push(s);
            } else {
                query.push(s);
            }
        }
    }

    let pool_samples: Vec<usize> = pool.iter().flat_map(|&c| dataset.indices_of(c).iter().copied()).collect();
    let recon_images = index::sample(&mut rng, pool_samples.len(), spec.recon_size())
        .into_iter()
        .map(|i| Arc::clone(dataset.sample(pool_samples[i])))
        .collect();

    Ok(Episode {
        support,
        query,
        recon_images,
        class_ids: classes,
        k_shot: spec.k_shot,
        q_queries: spec.q_queries,
        seed,
    })
}

/// Seed of the DropBlock realisation for image `slot` in pass `pass`.
/// Slots number support, then query, then reconstruction images.
pub fn pass_seed(base_seed: u64, pass: usize, slot: usize) -> u64 {
    derive_seed(base_seed, stream::PASS, &[pass as u64, slot as u64])
}

/// Mask of reconstruction image `index`; shared by all passes of an episode.
pub fn recon_mask(base_seed: u64, index: usize, height: usize, width: usize, cfg: &MaskConfig) -> Result<BlockMask> {
    generate_block_mask(
        height,
        width,
        cfg.block_size,
        cfg.mask_ratio,
        derive_seed(base_seed, stream::MASK, &[index as u64]),
    )
}

/// Result of [`run_passes`].
#[derive(Debug, Clone)]
pub struct PassRun {
    pub bundle: PassBundle,
    /// `reconstructions[j][r]`: pass `j` reconstruction of recon image `r`.
    pub reconstructions: Vec<Vec<Tensor3>>,
    pub masks: Vec<BlockMask>,
}

fn embed_all(net: &Network, trunks: &[Tensor3], mode: Mode, base_seed: u64, pass: usize) -> Vec<Vec<f64>> {
    trunks
        .iter()
        .enumerate()
        .map(|(slot, t)| {
            let b = net.branch_forward(t, mode, pass_seed(base_seed, pass, slot));
            net.head_forward(&b.z).0 .0
        })
        .collect()
}

/// Runs `n` stochastic passes over an episode.
///
/// Support and query images go through the classification pathway unmasked;
/// reconstruction images are masked (when `mask` is given) and decoded. In
/// eval mode DropBlock is inactive, so a single pass is computed and repeated.
pub fn run_passes(
    net: &Network,
    episode: &Episode,
    n: usize,
    mode: Mode,
    base_seed: u64,
    mask: Option<&MaskConfig>,
) -> Result<PassRun> {
    if n == 0 {
        return Err(RgfsError::Config("n_passes must be at least 1".into()));
    }
    let images: Vec<&Arc<ImageSample>> = episode.support.iter().chain(&episode.query).collect();
    let trunks = images
        .iter()
        .map(|s| net.trunk_forward(&s.pixels).map(|t| t.output))
        .collect::<Result<Vec<_>>>()?;
    let n_sup = episode.support.len();
    let computed = if mode.is_train() { n } else { 1 };

    let mut passes = Vec::with_capacity(n);
    for j in 0..computed {
        let emb = embed_all(net, &trunks, mode, base_seed, j);
        let (sup, qry) = emb.split_at(n_sup);
        let protos = compute_prototypes(sup, episode.n_way(), episode.k_shot)?;
        passes.push(PassOutput::new(qry.to_vec(), protos));
    }
    while passes.len() < n {
        passes.push(passes[0].clone());
    }
    let bundle = PassBundle::new(episode.n_way(), episode.query_labels(), passes)?;

    let mut reconstructions = vec![Vec::new(); n];
    let mut masks = Vec::new();
    if let Some(cfg) = mask {
        let first_slot = images.len();
        for (r, s) in episode.recon_images.iter().enumerate() {
            let m = recon_mask(base_seed, r, s.pixels.height, s.pixels.width, cfg)?;
            let trunk = net.trunk_forward(&mask_tensor(&s.pixels, &m)?)?;
            for (j, out) in reconstructions.iter_mut().enumerate().take(computed) {
                let b = net.branch_forward(&trunk.output, mode, pass_seed(base_seed, j, first_slot + r));
                out.push(net.decoder_forward(&b.z).0);
            }
            masks.push(m);
        }
        for j in computed..n {
            reconstructions[j] = reconstructions[0].clone();
        }
    }
    Ok(PassRun {
        bundle,
        reconstructions,
        masks,
    })
}

/// Argmax of the pass-averaged probabilities; ties go to the lowest index.
pub fn predict(bundle: &PassBundle) -> Vec<usize> {
    bundle
        .mean_probs
        .iter()
        .map(|row| {
            let mut best = 0;
            for (k, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(bundle: &PassBundle) -> f64 {
    let pred = predict(bundle);
    let correct = pred.iter().zip(&bundle.labels).filter(|(p, l)| p == l).count();
    correct as f64 / bundle.labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, ImageShape, SyntheticParams};
    use crate::losses::softmax_neg;

    fn dataset(classes: usize, per: usize) -> (Dataset, DatasetSplit) {
        let ds = generate_synthetic_dataset(&SyntheticParams {
            num_classes: classes,
            samples_per_class: per,
            shape: ImageShape::new(16, 16, 3),
            seed: 3,
        })
        .unwrap();
        let half = classes / 2;
        let split = DatasetSplit::new((0..half).collect(), (half..classes).collect()).unwrap();
        (ds, split)
    }

    fn bundle_with_probs(probs: Vec<Vec<f64>>) -> PassBundle {
        // distances reproducing given 2-class probabilities: d = -ln p
        let passes = probs
            .into_iter()
            .map(|p| {
                let d: Vec<f64> = p.iter().map(|v| -v.ln()).collect();
                PassOutput {
                    query_embeddings: vec![vec![]],
                    prototypes: vec![vec![]; d.len()],
                    probs: vec![softmax_neg(&d)],
                    distances: vec![d],
                }
            })
            .collect();
        PassBundle::new(2, vec![0], passes).unwrap()
    }

    #[test]
    fn cardinalities_and_disjointness() {
        let (ds, split) = dataset(10, 20);
        let spec = EpisodeSpec {
            n_way: 5,
            k_shot: 5,
            q_queries: 15,
            recon_batch: None,
            class_pool: ClassPool::All,
        };
        let ep = sample_episode(&ds, &split, &spec, 9).unwrap();
        assert_eq!(ep.support.len(), 25);
        assert_eq!(ep.query.len(), 75);
        assert_eq!(ep.recon_images.len(), 25);
        for k in 0..5 {
            let sup: Vec<_> = ep.support[k * 5..(k + 1) * 5].iter().map(|s| s.source_id.clone()).collect();
            for q in &ep.query[k * 15..(k + 1) * 15] {
                assert!(!sup.contains(&q.source_id));
                assert_eq!(q.class_id, ep.class_ids[k]);
            }
        }
    }

    #[test]
    fn deterministic_and_forced_pool() {
        let (ds, split) = dataset(10, 8);
        let spec = EpisodeSpec {
            n_way: 5,
            k_shot: 1,
            q_queries: 2,
            recon_batch: Some(3),
            class_pool: ClassPool::Novel,
        };
        let a = sample_episode(&ds, &split, &spec, 4).unwrap();
        let b = sample_episode(&ds, &split, &spec, 4).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let mut cls = a.class_ids.clone();
        cls.sort();
        assert_eq!(cls, split.novel);
    }

    #[test]
    fn insufficient_and_small_pool() {
        let (ds, split) = dataset(4, 3);
        let spec = EpisodeSpec {
            n_way: 2,
            k_shot: 2,
            q_queries: 2,
            recon_batch: None,
            class_pool: ClassPool::Base,
        };
        let err = sample_episode(&ds, &split, &spec, 0).unwrap_err();
        assert!(err.to_string().contains("class_0"), "{err}");
        let spec = EpisodeSpec {
            n_way: 3,
            k_shot: 1,
            q_queries: 1,
            recon_batch: Some(0),
            class_pool: ClassPool::Novel,
        };
        let err = sample_episode(&ds, &split, &spec, 0).unwrap_err();
        assert!(err.to_string().contains("pool too small"), "{err}");
    }

    #[test]
    fn predict_examples() {
        let b = bundle_with_probs(vec![vec![0.6, 0.4], vec![0.2, 0.8]]);
        assert!((b.mean_probs[0][0] - 0.4).abs() < 1e-12);
        assert_eq!(predict(&b), vec![1]);
        let tie = bundle_with_probs(vec![vec![0.5, 0.5]]);
        assert_eq!(predict(&tie), vec![0]);
        let single = bundle_with_probs(vec![vec![0.3, 0.7]]);
        assert_eq!(predict(&single), vec![1]);
    }
}
