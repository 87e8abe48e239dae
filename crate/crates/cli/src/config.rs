//! Run configuration file (TOML). Every table rejects unknown keys.
//!
//! ```toml
//! seed = 7
//!
//! [dataset]                 # exactly one of `path` or `[dataset.synthetic]`
//! path = "data/scenes"
//!
//! [split]
//! base_classes = 5          # a count, or a list of class names
//!
//! [network]                 # input = [H, W, C] also sets the image size
//! [episode]                 # n_way, k_shot, q_queries, recon_batch
//! [loss]                    # alpha, beta, lambda, margin, n_passes
//! [mask]                    # block_size, mask_ratio
//! [train]                   # episodes, learning_rate, freeze_encoder, ...
//! [eval]                    # episodes, pools, settings = [{ n_way, k_shot }]
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use rgfs_core::data::{BaseSelection, ImageShape, SyntheticParams};
use rgfs_core::episodic::{ClassPool, EpisodeSpec};
use rgfs_core::losses::{LossWeights, ReconReduction};
use rgfs_core::masking::MaskConfig;
use rgfs_core::network::ArchitectureConfig;
use rgfs_core::trainer::TrainConfig;

/// Bad configuration; mapped to exit status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub network: ArchitectureConfig,
    #[serde(default)]
    pub episode: EpisodeSection,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub mask: MaskSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Image-folder root, relative paths resolved against the config file.
    pub path: Option<PathBuf>,
    pub synthetic: Option<SyntheticSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Defaults to the top-level seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum BaseClasses {
    Count(usize),
    Names(Vec<String>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub base_classes: BaseClasses,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            base_classes: BaseClasses::Count(5),
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSection {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub recon_batch: Option<usize>,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        let d = EpisodeSpec::default();
        EpisodeSection {
            n_way: d.n_way,
            k_shot: d.k_shot,
            q_queries: d.q_queries,
            recon_batch: d.recon_batch,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSection {
    pub block_size: usize,
    pub mask_ratio: f64,
    /// Number of sample masks written by `inspect-mask`.
    pub samples: usize,
}

impl Default for MaskSection {
    fn default() -> Self {
        let d = MaskConfig::default();
        MaskSection {
            block_size: d.block_size,
            mask_ratio: d.mask_ratio,
            samples: 4,
        }
    }
}

impl MaskSection {
    pub fn config(&self) -> MaskConfig {
        MaskConfig {
            block_size: self.block_size,
            mask_ratio: self.mask_ratio,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub episodes: usize,
    pub learning_rate: f64,
    pub freeze_encoder: bool,
    pub checkpoint_every: usize,
    pub baseline_mode: bool,
    pub recon_reduction: ReconReduction,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            episodes: d.episodes,
            learning_rate: d.learning_rate,
            freeze_encoder: d.freeze_encoder,
            checkpoint_every: d.checkpoint_every,
            baseline_mode: d.baseline_mode,
            recon_reduction: d.recon_reduction,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSetting {
    pub n_way: usize,
    pub k_shot: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub episodes: usize,
    /// Defaults to `loss.n_passes`.
    pub n_passes: Option<usize>,
    /// Defaults to `episode.q_queries`.
    pub q_queries: Option<usize>,
    /// Defaults to the top-level seed.
    pub seed: Option<u64>,
    pub pools: Vec<ClassPool>,
    /// Defaults to the training episode shape.
    pub settings: Vec<EvalSetting>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            episodes: 600,
            n_passes: None,
            q_queries: None,
            seed: None,
            pools: vec![ClassPool::All, ClassPool::Novel],
            settings: Vec::new(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a config file. Relative dataset paths are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))?;
        if let Some(p) = &cfg.dataset.path {
            if p.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.dataset.path = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        match (&cfg.dataset.path, &cfg.dataset.synthetic) {
            (Some(_), Some(_)) => {
                return Err(ConfigError(
                    "dataset: give either `path` or `[dataset.synthetic]`, not both".into(),
                ))
            }
            (None, None) => {
                return Err(ConfigError("dataset: one of `path` or `[dataset.synthetic]` is required".into()))
            }
            _ => {}
        }
        if let Some(s) = &cfg.dataset.synthetic {
            if s.num_classes < 2 {
                return Err(ConfigError(format!(
                    "dataset.synthetic.num_classes must be at least 2, got {}",
                    s.num_classes
                )));
            }
        }
        cfg.network.validate().map_err(|e| ConfigError(format!("network: {e}")))?;
        cfg.loss.validate().map_err(|e| ConfigError(format!("loss: {e}")))?;
        if cfg.mask.samples == 0 {
            return Err(ConfigError("mask.samples must be at least 1".into()));
        }
        if cfg.eval.episodes == 0 {
            return Err(ConfigError("eval.episodes must be at least 1".into()));
        }
        if cfg.eval.pools.is_empty() {
            return Err(ConfigError("eval.pools must not be empty".into()));
        }
        Ok(cfg)
    }

    /// Fails when the image-folder root does not exist.
    pub fn check_paths(&self) -> Result<(), ConfigError> {
        if let Some(p) = &self.dataset.path {
            if !p.is_dir() {
                return Err(ConfigError(format!("dataset.path {} is not a directory", p.display())));
            }
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self
    }

    pub fn shape(&self) -> ImageShape {
        self.network.input
    }

    pub fn synthetic_params(&self) -> Option<SyntheticParams> {
        self.dataset.synthetic.as_ref().map(|s| SyntheticParams {
            num_classes: s.num_classes,
            samples_per_class: s.samples_per_class,
            shape: self.shape(),
            seed: s.seed.unwrap_or(self.seed),
        })
    }

    pub fn base_selection(&self) -> BaseSelection {
        match &self.split.base_classes {
            BaseClasses::Count(n) => BaseSelection::Count(*n),
            BaseClasses::Names(v) => BaseSelection::Names(v.clone()),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            episodes: t.episodes,
            learning_rate: t.learning_rate,
            weights: self.loss,
            spec: EpisodeSpec {
                n_way: self.episode.n_way,
                k_shot: self.episode.k_shot,
                q_queries: self.episode.q_queries,
                recon_batch: self.episode.recon_batch,
                class_pool: ClassPool::Base,
            },
            seed: self.seed,
            freeze_encoder: t.freeze_encoder,
            checkpoint_every: t.checkpoint_every,
            baseline_mode: t.baseline_mode,
            mask: self.mask.config(),
            recon_reduction: t.recon_reduction,
        }
    }

    /// Every requested `(setting, pool)` evaluation spec, settings outer.
    pub fn eval_specs(&self) -> Vec<EpisodeSpec> {
        let settings = if self.eval.settings.is_empty() {
            vec![EvalSetting {
                n_way: self.episode.n_way,
                k_shot: self.episode.k_shot,
            }]
        } else {
            self.eval.settings.clone()
        };
        let q = self.eval.q_queries.unwrap_or(self.episode.q_queries);
        settings
            .iter()
            .flat_map(|s| {
                self.eval.pools.iter().map(move |&pool| EpisodeSpec {
                    n_way: s.n_way,
                    k_shot: s.k_shot,
                    q_queries: q,
                    recon_batch: Some(0),
                    class_pool: pool,
                })
            })
            .collect()
    }

    pub fn eval_passes(&self) -> usize {
        self.eval.n_passes.unwrap_or(self.loss.n_passes)
    }

    pub fn eval_seed(&self) -> u64 {
        self.eval.seed.unwrap_or(self.seed)
    }
}
