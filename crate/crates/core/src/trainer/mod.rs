//! Episodic optimisation: sample an episode from the base classes, run `n`
//! stochastic passes, compute the weighted objective, take one Adam step.
//!
//! All randomness is keyed by `(seed, episode_index, ...)`, never by wall
//! state, so a run resumed from a checkpoint replays exactly the episodes,
//! DropBlock masks and reconstruction masks of an uninterrupted run.

mod adam;
mod eval;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainingSnapshot};
use crate::data::{Dataset, DatasetSplit, ImageSample};
use crate::episodic::{pass_seed, recon_mask, run_passes, sample_episode, ClassPool, Episode, EpisodeSpec};
use crate::error::{Result, RgfsError};
use crate::losses::{
    classification_grads, compute_prototypes, proto_loss, recon_image_grad, recon_image_loss, recon_loss, total_loss,
    triplet_loss, variance_loss, LossComponents, LossReport, LossWeights, PassBundle, PassOutput, ReconReduction,
};
use crate::masking::{mask_tensor, MaskConfig};
use crate::network::{is_encoder_param, ArchitectureConfig, Mode, Network, ParamStore};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor3;

pub use adam::Adam;
pub use eval::{evaluate, mean_ci95, AccuracyReport};

/// Gradient norm above which gradients are rescaled.
pub const GRAD_CLIP_NORM: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    /// Episode shape; training always draws from the base pool.
    pub spec: EpisodeSpec,
    pub seed: u64,
    pub freeze_encoder: bool,
    /// Write a checkpoint every this many episodes (0 disables).
    pub checkpoint_every: usize,
    /// Prototypical + variance terms only: triplet and reconstruction weights
    /// are forced to zero and the decoder is never run.
    pub baseline_mode: bool,
    pub mask: MaskConfig,
    pub recon_reduction: ReconReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 1000,
            learning_rate: 1e-3,
            weights: LossWeights::default(),
            spec: EpisodeSpec::default(),
            seed: 0,
            freeze_encoder: false,
            checkpoint_every: 0,
            baseline_mode: false,
            mask: MaskConfig::default(),
            recon_reduction: ReconReduction::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(RgfsError::Config("episodes must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(RgfsError::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        self.weights.validate()
    }

    /// Loss weights actually optimised (baseline mode zeroes β and λ).
    pub fn effective_weights(&self) -> LossWeights {
        if self.baseline_mode {
            LossWeights {
                beta: 0.0,
                lambda: 0.0,
                ..self.weights
            }
        } else {
            self.weights
        }
    }

    pub fn train_spec(&self) -> EpisodeSpec {
        let mut spec = self.spec.with_pool(ClassPool::Base);
        if self.baseline_mode {
            spec.recon_batch = Some(0);
        }
        spec
    }

    pub fn episode_seed(&self, episode: usize) -> u64 {
        derive_seed(self.seed, stream::TRAIN_EPISODE, &[episode as u64])
    }

    /// Base seed for the DropBlock and mask draws of an episode.
    pub fn pass_base_seed(&self, episode: usize) -> u64 {
        derive_seed(self.seed, stream::PASS, &[episode as u64])
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub episode: usize,
    pub report: LossReport,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "episode,proto,triplet,recon,variance,total,grad_norm";

    pub fn csv_row(&self) -> String {
        format!("{},{}", self.report.csv_row(self.episode), self.grad_norm)
    }
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LogRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Loss report and parameter gradients of one episode.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub report: LossReport,
    pub grads: ParamStore,
}

/// Forward-only objective of an episode in train mode, computed through the
/// plain inference path ([`run_passes`]). Used as the reference the
/// analytic gradients are checked against.
pub fn episode_loss(net: &Network, episode: &Episode, cfg: &TrainConfig, base_seed: u64) -> Result<LossReport> {
    let w = cfg.effective_weights();
    let mask = (!cfg.baseline_mode).then_some(&cfg.mask);
    let run = run_passes(net, episode, w.n_passes, Mode::Train, base_seed, mask)?;
    let recon = if cfg.baseline_mode || episode.recon_images.is_empty() {
        0.0
    } else {
        let originals: Vec<Tensor3> = episode.recon_images.iter().map(|s| s.pixels.clone()).collect();
        recon_loss(&originals, &run.reconstructions, &run.masks, cfg.recon_reduction)?
    };
    total_loss(
        LossComponents {
            proto: proto_loss(&run.bundle)?,
            triplet: triplet_loss(&run.bundle, w.margin),
            recon,
            variance: variance_loss(&run.bundle),
        },
        &w,
    )
}

/// Objective and analytic gradients of one episode.
///
/// Deterministic encoder stages run once per image; the stochastic stages are
/// run once per pass for the forward sweep and re-run (same seeds, hence the
/// same DropBlock realisation) while backpropagating, which keeps memory flat
/// in the number of passes.
pub fn episode_loss_and_grads(net: &Network, episode: &Episode, cfg: &TrainConfig, base_seed: u64) -> Result<EpisodeOutcome> {
    let w = cfg.effective_weights();
    let n = w.n_passes;
    let n_way = episode.n_way();
    let k_shot = episode.k_shot;
    let mut grads = net.zero_grads();

    let images: Vec<&Arc<ImageSample>> = episode.support.iter().chain(&episode.query).collect();
    let n_sup = episode.support.len();
    let trunks = images
        .iter()
        .map(|s| net.trunk_forward(&s.pixels))
        .collect::<Result<Vec<_>>>()?;

    let mut passes = Vec::with_capacity(n);
    for j in 0..n {
        let emb: Vec<Vec<f64>> = trunks
            .iter()
            .enumerate()
            .map(|(slot, t)| {
                let b = net.branch_forward(&t.output, Mode::Train, pass_seed(base_seed, j, slot));
                net.head_forward(&b.z).0 .0
            })
            .collect();
        let (sup, qry) = emb.split_at(n_sup);
        passes.push(PassOutput::new(qry.to_vec(), compute_prototypes(sup, n_way, k_shot)?));
    }
    let bundle = PassBundle::new(n_way, episode.query_labels(), passes)?;
    let proto = proto_loss(&bundle)?;
    let triplet = triplet_loss(&bundle, w.margin);
    let variance = variance_loss(&bundle);
    let pass_grads = classification_grads(&bundle, &w);

    for (slot, trunk) in trunks.iter().enumerate() {
        let mut g_trunk: Option<Tensor3> = None;
        for (j, pg) in pass_grads.iter().enumerate() {
            let ge: Vec<f64> = if slot < n_sup {
                pg.prototype[slot / k_shot].iter().map(|g| g / k_shot as f64).collect()
            } else {
                pg.query[slot - n_sup].clone()
            };
            let b = net.branch_forward(&trunk.output, Mode::Train, pass_seed(base_seed, j, slot));
            let (_, head) = net.head_forward(&b.z);
            let gz = net.head_backward(&head, &ge, &mut grads);
            let gt = net.branch_backward(&b, &gz, &mut grads);
            accumulate(&mut g_trunk, gt);
        }
        if let Some(g) = g_trunk {
            net.trunk_backward(trunk, &g, &mut grads);
        }
    }
    drop(trunks);

    let mut recon = 0.0;
    if !cfg.baseline_mode && !episode.recon_images.is_empty() {
        let r_count = episode.recon_images.len();
        let scale = w.lambda / (r_count as f64 * n as f64);
        let first_slot = images.len();
        for (r, s) in episode.recon_images.iter().enumerate() {
            let m = recon_mask(base_seed, r, s.pixels.height, s.pixels.width, &cfg.mask)?;
            let trunk = net.trunk_forward(&mask_tensor(&s.pixels, &m)?)?;
            let mut g_trunk: Option<Tensor3> = None;
            for j in 0..n {
                let b = net.branch_forward(&trunk.output, Mode::Train, pass_seed(base_seed, j, first_slot + r));
                let (xhat, dec) = net.decoder_forward(&b.z);
                recon += recon_image_loss(&s.pixels, &xhat, &m, cfg.recon_reduction)?;
                if scale != 0.0 {
                    let gx = recon_image_grad(&s.pixels, &xhat, &m, cfg.recon_reduction, scale);
                    let gz = net.decoder_backward(&dec, &gx, &mut grads);
                    let gt = net.branch_backward(&b, &gz, &mut grads);
                    accumulate(&mut g_trunk, gt);
                }
            }
            if let Some(g) = g_trunk {
                net.trunk_backward(&trunk, &g, &mut grads);
            }
        }
        recon /= (r_count * n) as f64;
    }

    let report = total_loss(
        LossComponents {
            proto,
            triplet,
            recon,
            variance,
        },
        &w,
    )?;
    Ok(EpisodeOutcome { report, grads })
}

fn accumulate(acc: &mut Option<Tensor3>, g: Tensor3) {
    match acc {
        Some(a) => {
            for (x, y) in a.data.iter_mut().zip(&g.data) {
                *x += y;
            }
        }
        None => *acc = Some(g),
    }
}

/// Everything needed to continue training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: Network,
    pub adam: Adam,
    /// Number of completed episodes; also the seed cursor.
    pub episode_index: usize,
    pub config: TrainConfig,
}

impl TrainState {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            arch: self.net.arch().clone(),
            params: self.net.params().clone(),
            training: Some(TrainingSnapshot {
                config: self.config.clone(),
                episode_index: self.episode_index,
                adam_step: self.adam.step,
                first_moment: self.adam.first_moment.clone(),
                second_moment: self.adam.second_moment.clone(),
            }),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let t = ckpt
            .training
            .ok_or_else(|| RgfsError::Checkpoint("checkpoint carries no training state".into()))?;
        if !ckpt.params.same_layout(&t.first_moment) || !ckpt.params.same_layout(&t.second_moment) {
            return Err(RgfsError::Checkpoint("optimiser moments do not match parameters".into()));
        }
        let net = Network::from_params(ckpt.arch, ckpt.params)?;
        Ok(TrainState {
            adam: Adam {
                learning_rate: t.config.learning_rate,
                step: t.adam_step,
                first_moment: t.first_moment,
                second_moment: t.second_moment,
            },
            net,
            episode_index: t.episode_index,
            config: t.config,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.episode_index >= self.config.episodes
    }
}

/// Loads a training checkpoint.
pub fn resume(checkpoint_path: &Path) -> Result<TrainState> {
    TrainState::from_checkpoint(Checkpoint::load(checkpoint_path)?)
}

pub fn checkpoint_file_name(episode_index: usize) -> String {
    format!("ckpt_{episode_index:06}.rgfs")
}

#[derive(Debug)]
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    split: &'a DatasetSplit,
    state: TrainState,
    checkpoint_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    /// Fresh run with parameters initialised from `config.seed`.
    pub fn new(dataset: &'a Dataset, split: &'a DatasetSplit, arch: ArchitectureConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let shape = dataset.shape();
        if arch.input != shape {
            return Err(RgfsError::Config(format!(
                "architecture input {:?} does not match dataset shape {:?}",
                arch.input, shape
            )));
        }
        let net = Network::new(arch, derive_seed(config.seed, stream::INIT, &[]))?;
        let adam = Adam::new(net.params(), config.learning_rate);
        Trainer::from_state(
            dataset,
            split,
            TrainState {
                net,
                adam,
                episode_index: 0,
                config,
            },
        )
    }

    pub fn from_state(dataset: &'a Dataset, split: &'a DatasetSplit, state: TrainState) -> Result<Self> {
        state.config.validate()?;
        split.validate(dataset.num_classes())?;
        state.config.train_spec().validate(dataset, split)?;
        let m = &state.config.mask;
        crate::masking::generate_block_mask(dataset.shape().height, dataset.shape().width, m.block_size, m.mask_ratio, 0)?;
        Ok(Trainer {
            dataset,
            split,
            state,
            checkpoint_dir: None,
        })
    }

    pub fn with_checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    /// Runs one episode and one parameter update.
    pub fn step(&mut self) -> Result<LogRow> {
        let e = self.state.episode_index;
        let cfg = &self.state.config;
        let episode = sample_episode(self.dataset, self.split, &cfg.train_spec(), cfg.episode_seed(e))?;
        let EpisodeOutcome { report, mut grads } =
            episode_loss_and_grads(&self.state.net, &episode, cfg, cfg.pass_base_seed(e))?;
        if !report.total.is_finite() {
            return Err(RgfsError::NonFinite(format!("total loss at episode {e}")));
        }
        let freeze = cfg.freeze_encoder;
        let frozen = |name: &str| freeze && is_encoder_param(name);
        for t in grads.iter_mut() {
            if frozen(&t.name) {
                t.values.fill(0.0);
            }
        }
        let grad_norm = grads.l2_norm();
        if !grad_norm.is_finite() {
            return Err(RgfsError::NonFinite(format!("gradient at episode {e}")));
        }
        if grad_norm > GRAD_CLIP_NORM {
            warn!("episode {e}: gradient norm {grad_norm:.3e} clipped to {GRAD_CLIP_NORM:e}");
            grads.scale(GRAD_CLIP_NORM / grad_norm);
        }
        let mut params = self.state.net.params().clone();
        self.state.adam.update(&mut params, &grads, frozen);
        if !params.all_finite() {
            return Err(RgfsError::NonFinite(format!("parameters after update {e}")));
        }
        *self.state.net.params_mut() = params;
        self.state.episode_index += 1;
        Ok(LogRow {
            episode: e,
            report,
            grad_norm,
        })
    }

    /// Trains until `config.episodes` episodes are complete, writing
    /// checkpoints along the way. On failure the checkpoints already written
    /// stay on disk.
    pub fn run(&mut self) -> Result<Vec<LogRow>> {
        let mut log = Vec::new();
        while !self.state.is_finished() {
            let row = self.step()?;
            if row.episode % 50 == 0 {
                info!(
                    "episode {} total {:.4} proto {:.4} triplet {:.4} recon {:.4} var {:.4}",
                    row.episode, row.report.total, row.report.proto, row.report.triplet, row.report.recon, row.report.variance
                );
            }
            log.push(row);
            let every = self.state.config.checkpoint_every;
            if every > 0 && self.state.episode_index.is_multiple_of(every) {
                self.save_checkpoint()?;
            }
        }
        Ok(log)
    }

    pub fn save_checkpoint(&self) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.checkpoint_dir else {
            return Ok(None);
        };
        std::fs::create_dir_all(dir).map_err(|e| RgfsError::io(dir, e))?;
        let path = dir.join(checkpoint_file_name(self.state.episode_index));
        self.state.to_checkpoint().save(&path)?;
        Ok(Some(path))
    }
}

/// Trains from scratch and returns the final state with the loss log.
pub fn train(
    dataset: &Dataset,
    split: &DatasetSplit,
    arch: ArchitectureConfig,
    config: TrainConfig,
) -> Result<(TrainState, Vec<LogRow>)> {
    let mut t = Trainer::new(dataset, split, arch, config)?;
    let log = t.run()?;
    Ok((t.into_state(), log))
}
