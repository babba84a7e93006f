//! The `train-denoiser` subcommand: SGD on the noise-prediction
//! objective over a manifest of latent/condition pairs.
//!
//! Training runs on the same respaced schedule the sampler will use, so
//! the learned per-timestep table indexes sampled steps directly.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Deserialize;

use voxdiff_core::codec::LatentVolume;
use voxdiff_core::condition::ConditioningField;
use voxdiff_core::denoiser::{train_affine_denoiser, TrainConfig, TrainSample};
use voxdiff_core::error::{Error, Result};

use crate::args::TrainArgs;
use crate::config::PipelineConfig;
use crate::manifest::RunManifest;
use crate::util::with_path;

#[derive(Deserialize)]
struct DataItem {
    latent: PathBuf,
    #[serde(default)]
    condition: Option<PathBuf>,
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let started = Instant::now();
    let cfg = PipelineConfig::resolve(&args.pipeline)?;
    let mut run = RunManifest::new(
        "train-denoiser",
        serde_json::json!({
            "schedule": cfg.schedule,
            "steps": args.steps,
            "learning_rate": args.learning_rate,
            "seed": cfg.sampler.seed,
        }),
    );
    run.add_input(&args.data)?;

    let bytes = std::fs::read(&args.data).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", args.data.display()),
        ))
    })?;
    let items: Vec<DataItem> = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", args.data.display())))?;
    let base = args.data.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };

    let mut dataset = Vec::with_capacity(items.len());
    for item in &items {
        let latent_path = resolve(&item.latent);
        run.add_input(&latent_path)?;
        let latent = with_path(LatentVolume::load(&latent_path), &latent_path)?;
        let condition = item
            .condition
            .as_ref()
            .map(|p| {
                let path = resolve(p);
                run.add_input(&path)?;
                with_path(ConditioningField::load(&path), &path)
            })
            .transpose()?;
        dataset.push(TrainSample { latent, condition });
    }

    let schedule = cfg.sampling_schedule()?;
    let (denoiser, report) = train_affine_denoiser(
        &dataset,
        &schedule,
        &TrainConfig {
            steps: args.steps,
            learning_rate: args.learning_rate,
            seed: cfg.sampler.seed,
        },
    )?;
    let (final_loss, zero_loss) = report.final_window();
    println!(
        "trained {} steps: final-window loss {final_loss:.6} (zero predictor {zero_loss:.6})",
        args.steps
    );

    denoiser.save(&args.out)?;
    run.add_output(&args.out);
    run.run.wall_time_secs = started.elapsed().as_secs_f64();
    run.write_for(&args.out)?;
    Ok(())
}
