use rand::seq::SliceRandom;

use super::{DatasetManifest, DatasetSplit};
use crate::error::{Result, RgfsError};
use crate::rng::{derive_rng, stream};

/// How the base (training) classes are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum BaseSelection {
    /// Seeded random choice of this many classes.
    Count(usize),
    /// Explicit class names; overrides the seed.
    Names(Vec<String>),
}

/// Splits the manifest's classes into disjoint base and novel sets.
pub fn make_split(manifest: &DatasetManifest, base: &BaseSelection, seed: u64) -> Result<DatasetSplit> {
    let total = manifest.num_classes();
    let mut base_ids = match base {
        BaseSelection::Count(n) => {
            if *n == 0 || *n >= total {
                return Err(RgfsError::Config(format!(
                    "base class count {n} must be in 1..{total} (dataset has {total} classes)"
                )));
            }
            let mut ids: Vec<usize> = (0..total).collect();
            ids.shuffle(&mut derive_rng(seed, stream::SPLIT, &[]));
            ids.truncate(*n);
            ids
        }
        BaseSelection::Names(names) => {
            let mut ids = Vec::with_capacity(names.len());
            for name in names {
                let id = manifest
                    .classes
                    .iter()
                    .find(|c| &c.name == name)
                    .map(|c| c.id)
                    .ok_or_else(|| RgfsError::Config(format!("unknown class name `{name}`")))?;
                ids.push(id);
            }
            if ids.is_empty() || ids.len() >= total {
                return Err(RgfsError::Config(format!(
                    "{} base classes requested, dataset has {total}",
                    ids.len()
                )));
            }
            ids
        }
    };
    base_ids.sort_unstable();
    let novel: Vec<usize> = (0..total).filter(|i| !base_ids.contains(i)).collect();
    DatasetSplit::new(base_ids, novel)
}
