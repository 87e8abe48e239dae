use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, warn};
use serde::Serialize;

use rgfs_core::checkpoint::Checkpoint;
use rgfs_core::data::{
    generate_synthetic_dataset, load_image_folder, make_split, save_png, write_image_folder, Dataset, DatasetManifest,
    DatasetSplit, ImageShape,
};
use rgfs_core::masking::{generate_block_mask, mask_tensor};
use rgfs_core::network::ArchitectureConfig;
use rgfs_core::rng::{derive_seed, stream};
use rgfs_core::trainer::{self, evaluate, LogRow, TrainConfig, TrainState, Trainer};

use crate::config::{ConfigError, RunConfig};
use crate::GlobalArgs;

fn load_config(g: &GlobalArgs) -> Result<RunConfig> {
    let path = g
        .config
        .as_deref()
        .ok_or_else(|| ConfigError("--config is required".into()))?;
    let cfg = RunConfig::load(path)?.with_seed(g.seed);
    cfg.check_paths()?;
    Ok(cfg)
}

/// Refuses to touch existing outputs unless `--overwrite` is set, in which
/// case exactly those paths are removed.
fn claim_outputs(g: &GlobalArgs, paths: &[PathBuf]) -> Result<()> {
    let existing: Vec<&PathBuf> = paths.iter().filter(|p| p.exists()).collect();
    if !existing.is_empty() && !g.overwrite {
        return Err(ConfigError(format!(
            "{} already exists; pass --overwrite to replace it",
            existing[0].display()
        ))
        .into());
    }
    for p in existing {
        if p.is_dir() {
            fs::remove_dir_all(p)
        } else {
            fs::remove_file(p)
        }
        .with_context(|| format!("removing {}", p.display()))?;
    }
    fs::create_dir_all(&g.out).with_context(|| format!("creating {}", g.out.display()))?;
    Ok(())
}

struct LoadedData {
    dataset: Dataset,
    split: DatasetSplit,
    skipped: Vec<String>,
}

fn load_dataset(cfg: &RunConfig, shape: ImageShape, split_seed: u64) -> Result<LoadedData> {
    let (dataset, skipped) = match cfg.synthetic_params() {
        Some(mut p) => {
            p.shape = shape;
            (generate_synthetic_dataset(&p)?, Vec::new())
        }
        None => {
            let root = cfg.dataset.path.as_ref().expect("validated dataset source");
            let (ds, report) = load_image_folder(root, shape)?;
            for (path, why) in &report.skipped {
                warn!("skipped {}: {why}", path.display());
            }
            let skipped = report.skipped.iter().map(|(p, _)| p.display().to_string()).collect();
            (ds, skipped)
        }
    };
    let split = make_split(&dataset.manifest, &cfg.base_selection(), split_seed)?;
    let dataset = dataset.with_split(split.clone())?;
    info!(
        "dataset: {} images, {} classes ({} base, {} novel)",
        dataset.len(),
        dataset.num_classes(),
        split.base.len(),
        split.novel.len()
    );
    Ok(LoadedData { dataset, split, skipped })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct TrainManifest<'a> {
    dataset: &'a DatasetManifest,
    skipped_files: &'a [String],
    architecture: &'a ArchitectureConfig,
    train: &'a TrainConfig,
    episodes_completed: usize,
    final_checkpoint: &'a Path,
    checkpoints: &'a [PathBuf],
    last_row: Option<&'a LogRow>,
}

/// Rows of an existing loss CSV for episodes before `start`.
fn kept_rows(path: &Path, start: usize) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for line in BufReader::new(file).lines().skip(1) {
        let line = line?;
        let episode: Option<usize> = line.split(',').next().and_then(|s| s.parse().ok());
        if episode.is_some_and(|e| e < start) {
            rows.push(line);
        }
    }
    Ok(rows)
}

pub fn train(g: &GlobalArgs, resume_from: Option<&Path>) -> Result<()> {
    let cfg = load_config(g)?;
    let csv_path = g.out.join("loss.csv");
    let ckpt_dir = g.out.join("checkpoints");
    let final_path = g.out.join("final.rgfs");
    let manifest_path = g.out.join("manifest.json");

    let (state, previous_rows) = match resume_from {
        Some(p) => {
            let state = trainer::resume(p)?;
            info!("resuming at episode {} of {}", state.episode_index, state.config.episodes);
            let rows = kept_rows(&csv_path, state.episode_index)?;
            fs::create_dir_all(&g.out)?;
            (Some(state), rows)
        }
        None => {
            claim_outputs(g, &[csv_path.clone(), ckpt_dir.clone(), final_path.clone(), manifest_path.clone()])?;
            (None, Vec::new())
        }
    };

    let arch = match &state {
        Some(s) => s.net.arch().clone(),
        None => cfg.network.clone(),
    };
    let train_cfg = match &state {
        Some(s) => s.config.clone(),
        None => cfg.train_config(),
    };
    let every = train_cfg.checkpoint_every;
    let data = load_dataset(&cfg, arch.input, train_cfg.seed)?;
    let mut t = match state {
        Some(s) => Trainer::from_state(&data.dataset, &data.split, s)?,
        None => Trainer::new(&data.dataset, &data.split, arch.clone(), train_cfg)?,
    }
    .with_checkpoint_dir(&ckpt_dir);

    let mut csv = File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    writeln!(csv, "{}", LogRow::CSV_HEADER)?;
    for r in &previous_rows {
        writeln!(csv, "{r}")?;
    }
    let mut checkpoints = Vec::new();
    let mut last = None;
    while !t.state().is_finished() {
        let row = t.step()?;
        writeln!(csv, "{}", row.csv_row())?;
        csv.flush()?;
        if row.episode % 50 == 0 {
            info!("episode {} total loss {:.4}", row.episode, row.report.total);
        }
        if every > 0 && t.state().episode_index.is_multiple_of(every) {
            checkpoints.extend(t.save_checkpoint()?);
        }
        last = Some(row);
    }

    let state: TrainState = t.into_state();
    state.to_checkpoint().save(&final_path)?;
    write_json(
        &manifest_path,
        &TrainManifest {
            dataset: &data.dataset.manifest,
            skipped_files: &data.skipped,
            architecture: state.net.arch(),
            train: &state.config,
            episodes_completed: state.episode_index,
            final_checkpoint: &final_path,
            checkpoints: &checkpoints,
            last_row: last.as_ref(),
        },
    )?;
    info!("wrote {}", g.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalRecord {
    #[serde(flatten)]
    report: trainer::AccuracyReport,
    n_passes: usize,
    seed: u64,
}

pub fn eval(g: &GlobalArgs, checkpoint: &Path) -> Result<()> {
    let cfg = load_config(g)?;
    let out = g.out.join("accuracy.json");
    claim_outputs(g, std::slice::from_ref(&out))?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let split_seed = ckpt.training.as_ref().map_or(cfg.seed, |t| t.config.seed);
    let net = ckpt.network()?;
    let data = load_dataset(&cfg, net.arch().input, split_seed)?;
    let (passes, seed) = (cfg.eval_passes(), cfg.eval_seed());
    let mut records = Vec::new();
    for spec in cfg.eval_specs() {
        let report = evaluate(&net, &data.dataset, &data.split, &spec, cfg.eval.episodes, passes, seed)?;
        info!(
            "{}-way {}-shot on {}: {:.4} ± {:.4}",
            report.n_way,
            report.k_shot,
            report.pool.name(),
            report.mean_acc,
            report.ci95
        );
        records.push(EvalRecord {
            report,
            n_passes: passes,
            seed,
        });
    }
    write_json(&out, &records)
}

pub fn synth(g: &GlobalArgs) -> Result<()> {
    let cfg = load_config(g)?;
    let params = cfg
        .synthetic_params()
        .ok_or_else(|| ConfigError("synth needs a [dataset.synthetic] section".into()))?;
    let ds = generate_synthetic_dataset(&params)?;
    let mut outputs: Vec<PathBuf> = ds.manifest.classes.iter().map(|c| g.out.join(&c.name)).collect();
    outputs.push(g.out.join("manifest.json"));
    claim_outputs(g, &outputs)?;
    let n = write_image_folder(&ds, &g.out)?;
    write_json(&g.out.join("manifest.json"), &ds.manifest)?;
    info!("wrote {n} images to {}", g.out.display());
    Ok(())
}

pub fn inspect_mask(g: &GlobalArgs) -> Result<()> {
    let cfg = load_config(g)?;
    let shape = cfg.shape();
    let m = cfg.mask;
    let names = |i: usize| {
        [
            g.out.join(format!("mask_{i:03}.pgm")),
            g.out.join(format!("image_{i:03}.png")),
            g.out.join(format!("masked_{i:03}.png")),
        ]
    };
    let outputs: Vec<PathBuf> = (0..m.samples).flat_map(names).collect();
    claim_outputs(g, &outputs)?;

    let data = load_dataset(&cfg, shape, cfg.seed)?;
    let n = data.dataset.len();
    for i in 0..m.samples {
        let seed = derive_seed(cfg.seed, stream::MASK, &[i as u64]);
        let mask = generate_block_mask(shape.height, shape.width, m.block_size, m.mask_ratio, seed)?;
        let [pgm, image, masked] = names(i);
        fs::write(&pgm, mask.to_pgm()).with_context(|| format!("writing {}", pgm.display()))?;
        let sample = data.dataset.sample(i * n / m.samples);
        save_png(&sample.pixels, &image)?;
        save_png(&mask_tensor(&sample.pixels, &mask)?, &masked)?;
        info!("{}: {} of {} pixels masked", pgm.display(), mask.masked_pixels(), mask.bits.len());
    }
    Ok(())
}
