//! The trainable model.
//!
//! ```text
//!  image ─► encoder stages ─► bottleneck (1×1 conv) ─► z ─┬─► decoder ─► reconstruction
//!           conv→norm→act→[DropBlock]→pool                └─► GAP → FC ─► embedding
//! ```
//!
//! Encoder stages before the first DropBlock stage are deterministic (the
//! "trunk"); the remaining stages plus the bottleneck (the "branch") differ
//! between stochastic passes. Training code exploits this by running the
//! trunk once per image and the branch once per pass.

mod model;
pub mod ops;
mod params;

use serde::{Deserialize, Serialize};

use crate::data::ImageShape;
use crate::error::{Result, RgfsError};
use crate::tensor::Tensor3;

pub use model::{BranchTrace, DecoderTrace, HeadTrace, Network, TrunkTrace};
pub use ops::{dropblock, sample_drop_mask, DropMask};
pub use params::{ParamStore, ParamTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropBlockConfig {
    pub block_size: usize,
    pub drop_prob: f64,
}

impl Default for DropBlockConfig {
    fn default() -> Self {
        DropBlockConfig {
            block_size: 3,
            drop_prob: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    pub input: ImageShape,
    /// Output channels of each encoder stage; each stage halves H and W.
    pub stage_channels: Vec<usize>,
    pub bottleneck_channels: usize,
    pub embedding_dim: usize,
    pub norm_groups: usize,
    pub dropblock: DropBlockConfig,
    /// DropBlock is applied in this many trailing encoder stages.
    pub dropblock_stages: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            input: ImageShape::new(64, 64, 3),
            stage_channels: vec![32, 64, 128, 128],
            bottleneck_channels: 64,
            embedding_dim: 128,
            norm_groups: 1,
            dropblock: DropBlockConfig::default(),
            dropblock_stages: 2,
        }
    }
}

impl ArchitectureConfig {
    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Index of the first stage with DropBlock; stages before it are deterministic.
    pub fn trunk_stages(&self) -> usize {
        self.num_stages().saturating_sub(self.dropblock_stages)
    }

    /// `(d, h, w)` of the latent map.
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let f = 1 << self.num_stages();
        (self.bottleneck_channels, self.input.height / f, self.input.width / f)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.num_stages();
        if s == 0 {
            return Err(RgfsError::Config("stage_channels must not be empty".into()));
        }
        let f = 1usize << s;
        let ImageShape { height, width, channels } = self.input;
        if channels == 0 || height % f != 0 || width % f != 0 || height < f || width < f {
            return Err(RgfsError::Config(format!(
                "input {height}x{width} must be divisible by 2^{s} = {f}"
            )));
        }
        if self.bottleneck_channels == 0 || self.embedding_dim == 0 {
            return Err(RgfsError::Config("bottleneck_channels and embedding_dim must be positive".into()));
        }
        if self.norm_groups == 0 {
            return Err(RgfsError::Config("norm_groups must be positive".into()));
        }
        if let Some(c) = self.stage_channels.iter().find(|&&c| c == 0 || c % self.norm_groups != 0) {
            return Err(RgfsError::Config(format!(
                "stage width {c} is not a positive multiple of norm_groups {}",
                self.norm_groups
            )));
        }
        let p = self.dropblock.drop_prob;
        if !(0.0..1.0).contains(&p) {
            return Err(RgfsError::Config(format!("dropblock drop_prob must be in [0, 1), got {p}")));
        }
        if self.dropblock_stages > s {
            return Err(RgfsError::Config(format!(
                "dropblock_stages {} exceeds the {s} encoder stages",
                self.dropblock_stages
            )));
        }
        if self.dropblock_stages > 0 && p > 0.0 {
            // smallest map DropBlock sees: input of the last stage (before its pool)
            let side = height.min(width) >> (s - 1);
            let b = self.dropblock.block_size;
            if b == 0 || b > side {
                return Err(RgfsError::Config(format!(
                    "dropblock block_size {b} must be in 1..={side} (smallest feature map side)"
                )));
            }
        }
        Ok(())
    }
}

/// Latent map `z` (`d × h × w`).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMap(pub Tensor3);

/// Embedding vector `e ∈ R^D`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// True for parameters belonging to the convolutional encoder stages (the
/// part that `freeze_encoder` holds fixed).
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("encoder.")
}

pub fn is_decoder_param(name: &str) -> bool {
    name.starts_with("decoder.")
}
