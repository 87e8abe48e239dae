use rayon::prelude::*;
use serde::Serialize;

use crate::data::{Dataset, DatasetSplit};
use crate::episodic::{accuracy, run_passes, sample_episode, ClassPool, EpisodeSpec};
use crate::error::{Result, RgfsError};
use crate::network::{Mode, Network};
use crate::rng::{derive_seed, stream};

/// Mean episode accuracy with a 95% normal-approximation interval half-width.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyReport {
    pub pool: ClassPool,
    pub n_way: usize,
    pub k_shot: usize,
    pub episodes: usize,
    pub mean_acc: f64,
    pub ci95: f64,
}

/// Evaluates `net` on `episodes` episodes from `spec.class_pool`, DropBlock
/// off. Episodes run in parallel; the result does not depend on thread count.
pub fn evaluate(
    net: &Network,
    dataset: &Dataset,
    split: &DatasetSplit,
    spec: &EpisodeSpec,
    episodes: usize,
    n_passes: usize,
    seed: u64,
) -> Result<AccuracyReport> {
    if episodes == 0 {
        return Err(RgfsError::Config("evaluation needs at least 1 episode".into()));
    }
    let mut spec = *spec;
    spec.recon_batch = Some(0);
    spec.validate(dataset, split)?;
    let accs = (0..episodes)
        .into_par_iter()
        .map(|e| {
            let ep_seed = derive_seed(seed, stream::EVAL_EPISODE, &[e as u64]);
            let ep = sample_episode(dataset, split, &spec, ep_seed)?;
            let run = run_passes(net, &ep, n_passes, Mode::Eval, ep_seed, None)?;
            Ok(accuracy(&run.bundle))
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean_acc, ci95) = mean_ci95(&accs);
    Ok(AccuracyReport {
        pool: spec.class_pool,
        n_way: spec.n_way,
        k_shot: spec.k_shot,
        episodes,
        mean_acc,
        ci95,
    })
}

/// Mean and 1.96·s/√E, with `s` the sample standard deviation (0 for E = 1).
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let e = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / e;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (e - 1.0);
    (mean, 1.96 * var.sqrt() / e.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_of_known_sample() {
        let (m, ci) = mean_ci95(&[0.2, 0.4, 0.6]);
        assert!((m - 0.4).abs() < 1e-12);
        assert!((ci - 1.96 * 0.2 / 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_ci95(&[0.7]), (0.7, 0.0));
    }
}
