//! Datasets: samples, manifests, base/novel splits, folder ingestion and the
//! procedural generator used for desk-scale runs.

mod folder;
mod split;
mod synthetic;

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RgfsError};
use crate::tensor::Tensor3;

pub use folder::{load_image_folder, save_png, write_image_folder, LoadReport};
pub use split::{make_split, BaseSelection};
pub use synthetic::{generate_synthetic_dataset, SyntheticParams};

/// Spatial/channel shape shared by every image of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        ImageShape {
            height,
            width,
            channels,
        }
    }

    pub fn numel(&self) -> usize {
        self.height * self.width * self.channels
    }
}

impl Default for ImageShape {
    fn default() -> Self {
        ImageShape::new(64, 64, 3)
    }
}

impl From<[usize; 3]> for ImageShape {
    fn from(v: [usize; 3]) -> Self {
        ImageShape::new(v[0], v[1], v[2])
    }
}

impl From<ImageShape> for [usize; 3] {
    fn from(s: ImageShape) -> Self {
        [s.height, s.width, s.channels]
    }
}

/// One labelled image. Pixels are stored channel-major (see [`Tensor3`]) with
/// values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub pixels: Tensor3,
    pub class_id: usize,
    pub source_id: String,
}

impl ImageSample {
    pub fn new(pixels: Tensor3, class_id: usize, source_id: impl Into<String>) -> Result<Self> {
        if !pixels.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(RgfsError::Data(String::from(
                "pixel values must be finite and within [0, 1]"
            )));
        }
        Ok(ImageSample {
            pixels,
            class_id,
            source_id: source_id.into(),
        })
    }

    pub fn shape(&self) -> ImageShape {
        ImageShape::new(self.pixels.height, self.pixels.width, self.pixels.channels)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: usize,
    pub name: String,
    pub count: usize,
}

/// Disjoint base (seen) and novel (unseen) class sets.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
}

impl DatasetSplit {
    pub fn new(base: Vec<usize>, novel: Vec<usize>) -> Result<Self> {
        let b: BTreeSet<_> = base.iter().collect();
        if b.len() != base.len() {
            return Err(RgfsError::Config("duplicate class in base set".into()));
        }
        let n: BTreeSet<_> = novel.iter().collect();
        if n.len() != novel.len() {
            return Err(RgfsError::Config("duplicate class in novel set".into()));
        }
        if b.intersection(&n).next().is_some() {
            return Err(RgfsError::Config("base and novel classes overlap".into()));
        }
        Ok(DatasetSplit { base, novel })
    }

    pub fn all(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.base.iter().chain(self.novel.iter()).copied().collect();
        v.sort_unstable();
        v
    }

    /// Checks disjointness and that the union is exactly `0..num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        DatasetSplit::new(self.base.clone(), self.novel.clone())?;
        let all = self.all();
        if all != (0..num_classes).collect::<Vec<_>>() {
            return Err(RgfsError::Config(format!(
                "split does not cover the {num_classes} dataset classes exactly"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub shape: ImageShape,
    pub classes: Vec<ClassInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<DatasetSplit>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn total_samples(&self) -> usize {
        self.classes.iter().map(|c| c.count).sum()
    }

    pub fn class_name(&self, id: usize) -> &str {
        &self.classes[id].name
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Immutable collection of samples plus its manifest. Samples are shared via
/// `Arc` so episodes can reference them without copying pixels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    samples: Vec<Arc<ImageSample>>,
    by_class: Vec<Vec<usize>>,
}

impl Dataset {
    /// Builds a dataset from samples whose class ids index into `class_names`.
    pub fn from_samples(
        shape: ImageShape,
        class_names: Vec<String>,
        samples: Vec<ImageSample>,
    ) -> Result<Self> {
        let mut by_class = vec![Vec::new(); class_names.len()];
        for (i, s) in samples.iter().enumerate() {
            if s.class_id >= class_names.len() {
                return Err(RgfsError::Data(format!(
                    "sample {} has class id {} outside 0..{}",
                    s.source_id,
                    s.class_id,
                    class_names.len()
                )));
            }
            if s.shape() != shape {
                return Err(RgfsError::Shape(format!(
                    "sample {} has shape {:?}, dataset declares {:?}",
                    s.source_id,
                    s.shape(),
                    shape
                )));
            }
            by_class[s.class_id].push(i);
        }
        let classes = class_names
            .into_iter()
            .enumerate()
            .map(|(id, name)| ClassInfo {
                id,
                name,
                count: by_class[id].len(),
            })
            .collect();
        Ok(Dataset {
            manifest: DatasetManifest {
                shape,
                classes,
                split: None,
            },
            samples: samples.into_iter().map(Arc::new).collect(),
            by_class,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn shape(&self) -> ImageShape {
        self.manifest.shape
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes()
    }

    pub fn samples(&self) -> &[Arc<ImageSample>] {
        &self.samples
    }

    pub fn sample(&self, index: usize) -> &Arc<ImageSample> {
        &self.samples[index]
    }

    /// Indices of the samples belonging to `class_id`, in dataset order.
    pub fn indices_of(&self, class_id: usize) -> &[usize] {
        &self.by_class[class_id]
    }

    pub fn with_split(mut self, split: DatasetSplit) -> Result<Self> {
        split.validate(self.num_classes())?;
        self.manifest.split = Some(split);
        Ok(self)
    }

    /// Replaces the class labels of every sample; used to build label-noise
    /// controls where content carries no class information.
    pub fn relabel(&self, labels: &[usize]) -> Result<Self> {
        if labels.len() != self.samples.len() {
            return Err(RgfsError::Data("relabel needs one label per sample".into()));
        }
        let samples = self
            .samples
            .iter()
            .zip(labels)
            .map(|(s, &l)| ImageSample {
                pixels: s.pixels.clone(),
                class_id: l,
                source_id: s.source_id.clone(),
            })
            .collect();
        let names = self.manifest.classes.iter().map(|c| c.name.clone()).collect();
        Dataset::from_samples(self.shape(), names, samples)
    }
}
