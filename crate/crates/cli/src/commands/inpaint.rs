//! The `inpaint` and `synth` subcommands: read → normalize → pad →
//! encode → condition → sample → decode → crop → postprocess → write.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::Deserialize;

use voxdiff_core::codec::{BlockMomentCodec, LatentCodec, LatentVolume, BLOCK, LATENT_CHANNELS};
use voxdiff_core::condition::ConditioningField;
use voxdiff_core::error::{Error, Result};
use voxdiff_core::sampler::repaint_inpaint;
use voxdiff_core::volume::{write_volume, MaskVolume, Shape3, Volume3, VolumeFormat};

use crate::args::{InpaintArgs, ModeArg, PostFlags, SynthArgs};
use crate::config::PipelineConfig;
use crate::manifest::RunManifest;
use crate::util::{fnv1a64, load_mask, load_volume, parse_triple, with_path};

use super::postproc::apply_postprocessing;

/// Padding granularity of the uniform grid. A multiple of 8 keeps the
/// codec's 4-divisibility and lands clinical 155-slice volumes on the
/// standard 160-slice grid (latent depth 40).
const PAD_MULTIPLE: usize = 8;

fn pad_shape(shape: Shape3) -> Shape3 {
    let up = |n: usize| n.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
    (up(shape.0), up(shape.1), up(shape.2))
}

/// Pads a known-mask by appending *known* voxels: the appended border is
/// synthetic background, not content to generate. Implemented through the
/// complement so only zero-appending padding is ever used.
fn pad_mask_known(mask: &MaskVolume, target: Shape3) -> Result<MaskVolume> {
    let unknown = mask.complement().to_volume().pad_to(target)?;
    Ok(MaskVolume::from_volume(&unknown)?.complement())
}

fn composite_image(reference: &Volume3, inner: &Volume3, region: &MaskVolume) -> Volume3 {
    let mut out = reference.clone();
    for v in 0..out.num_voxels() {
        if region.data()[v] == 1 {
            out.data_mut()[v] = inner.data()[v];
        }
    }
    out
}

/// Loads a conditioning field and registers its files in the manifest.
fn load_condition(manifest_path: &Path, run: &mut RunManifest) -> Result<ConditioningField> {
    run.add_input(manifest_path)?;
    // hash the channel payloads behind the manifest as well
    if let Ok(bytes) = std::fs::read(manifest_path) {
        if let Ok(value) = serde_json::from_slice::<serde_json::Value>(&bytes) {
            if let Some(files) = value.get("files").and_then(|f| f.as_array()) {
                let dir = manifest_path.parent().unwrap_or(Path::new("."));
                for f in files.iter().filter_map(|f| f.as_str()) {
                    run.add_input(&dir.join(f))?;
                }
            }
        }
    }
    with_path(ConditioningField::load(manifest_path), manifest_path)
}

struct InpaintJob<'a> {
    input: &'a Path,
    mask: &'a Path,
    condition: Option<&'a Path>,
    tissue_labels: Option<&'a Path>,
    tumor_conc: Option<&'a Path>,
    mode: ModeArg,
    format: VolumeFormat,
    out: &'a Path,
    no_postprocess: bool,
    post: &'a PostFlags,
    seed: u64,
}

fn run_single(cfg: &PipelineConfig, job: &InpaintJob) -> Result<()> {
    let started = Instant::now();
    // the manifest records the effective per-subject seed
    let mut resolved = cfg.clone();
    resolved.sampler.seed = job.seed;
    let mut run = RunManifest::new(
        "inpaint",
        serde_json::json!({
            "pipeline": serde_json::to_value(&resolved).map_err(|e| Error::Format(e.to_string()))?,
            "mode": format!("{:?}", job.mode),
            "no_postprocess": job.no_postprocess,
            "postprocess": {
                "order": format!("{:?}", job.post.order),
                "match": job.post.match_enabled(),
                "blend": job.post.blend_enabled(),
                "black_threshold": job.post.black_threshold,
                "bins": job.post.bins,
                "exact_quantiles": job.post.exact_quantiles,
                "cg_tolerance": job.post.cg_tolerance,
                "cg_max_iters": job.post.cg_max_iters,
            },
        }),
    );
    run.add_input(job.input)?;
    run.add_input(job.mask)?;

    let volume = load_volume(job.input, job.format)?;
    let mask = load_mask(job.mask, job.format)?;
    if mask.shape() != volume.shape() {
        return Err(Error::ShapeMismatch(format!(
            "mask shape {:?} does not match input shape {:?}",
            mask.shape(),
            volume.shape()
        )));
    }

    let normalized = volume.normalize_intensity()?;
    let original_shape = normalized.shape();
    let padded_shape = pad_shape(original_shape);
    let padded = normalized.pad_to(padded_shape)?;
    let padded_mask = pad_mask_known(&mask, padded_shape)?;
    let latent_mask = padded_mask.downsample_all_set((BLOCK, BLOCK, BLOCK))?;

    let codec = BlockMomentCodec;
    let z0_gt = codec.encode(&padded)?;
    let latent_shape = z0_gt.shape();

    let condition = match (job.condition, job.tissue_labels) {
        (Some(path), _) => Some(load_condition(path, &mut run)?),
        (None, Some(labels_path)) => {
            let conc_path = job.tumor_conc.expect("clap enforces --tumor-conc");
            run.add_input(labels_path)?;
            run.add_input(conc_path)?;
            let labels = load_volume(labels_path, job.format)?.pad_to(padded_shape)?;
            let conc = load_volume(conc_path, job.format)?.pad_to(padded_shape)?;
            Some(ConditioningField::build(&labels, &conc, BLOCK)?)
        }
        (None, None) => None,
    };
    let condition = condition
        .map(|c| -> Result<ConditioningField> {
            if c.latent_shape() != latent_shape {
                return Err(Error::ShapeMismatch(format!(
                    "conditioning latent shape {:?} does not match volume latent shape {:?}",
                    c.latent_shape(),
                    latent_shape
                )));
            }
            Ok(match job.mode {
                ModeArg::Healthy => c.zero_tumor(),
                ModeArg::Tumor => c,
            })
        })
        .transpose()?;

    let schedule = cfg.sampling_schedule()?;
    let config_dir = Path::new(".");
    let denoiser = cfg.build_denoiser(latent_shape, &schedule, config_dir)?;
    let mut sampler_cfg = cfg.sampler_config();
    sampler_cfg.seed = job.seed;

    let result = repaint_inpaint(
        &z0_gt,
        &latent_mask,
        denoiser.as_ref(),
        condition.as_ref(),
        &schedule,
        &sampler_cfg,
    )?;
    run.plan_transitions = Some(result.executed.len());

    let decoded = codec
        .decode(&result.latent)?
        .crop_to(original_shape)?
        .with_spacing(volume.spacing())?;

    let output = if job.no_postprocess {
        decoded
    } else {
        let unknown = mask.complement();
        let processed = apply_postprocessing(&decoded, &normalized, &unknown, job.post)?;
        composite_image(&normalized, &processed, &unknown)
    };

    write_volume(&output, job.out, job.format)?;
    run.add_output(job.out);
    run.run.wall_time_secs = started.elapsed().as_secs_f64();
    run.write_for(job.out)?;
    Ok(())
}

#[derive(Deserialize)]
struct BatchItem {
    id: String,
    input: PathBuf,
    mask: PathBuf,
    #[serde(default)]
    condition: Option<PathBuf>,
}

pub fn run(args: &InpaintArgs) -> Result<()> {
    let cfg = PipelineConfig::resolve(&args.pipeline)?;
    if let Some(batch_path) = &args.batch {
        return run_batch(&cfg, args, batch_path);
    }
    let job = InpaintJob {
        input: args.input.as_deref().expect("clap enforces --input"),
        mask: args.mask.as_deref().expect("clap enforces --mask"),
        condition: args.condition.as_deref(),
        tissue_labels: args.tissue_labels.as_deref(),
        tumor_conc: args.tumor_conc.as_deref(),
        mode: args.mode,
        format: args.format.to_format(),
        out: args.out.as_deref().expect("clap enforces --out"),
        no_postprocess: args.no_postprocess,
        post: &args.post,
        seed: cfg.sampler.seed,
    };
    run_single(&cfg, &job)
}

/// Worker cap: VOXDIFF_THREADS, else the machine's parallelism.
fn worker_count(jobs: usize) -> usize {
    let env_cap = std::env::var("VOXDIFF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    let hw = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    env_cap.unwrap_or(hw).min(jobs).max(1)
}

fn run_batch(cfg: &PipelineConfig, args: &InpaintArgs, batch_path: &Path) -> Result<()> {
    let out_dir = args
        .out_dir
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("batch mode requires --out-dir".into()))?;
    std::fs::create_dir_all(out_dir)?;
    let bytes = std::fs::read(batch_path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", batch_path.display()),
        ))
    })?;
    let items: Vec<BatchItem> = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", batch_path.display())))?;
    if items.is_empty() {
        return Err(Error::InvalidInput("batch manifest lists no subjects".into()));
    }
    let ext = match args.format {
        crate::args::FormatArg::Nifti1Raw => "nii",
        crate::args::FormatArg::F32Raw => "f32",
    };

    let next = AtomicUsize::new(0);
    let failures: Mutex<Vec<(String, Error)>> = Mutex::new(Vec::new());
    let workers = worker_count(items.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= items.len() {
                    break;
                }
                let item = &items[idx];
                let out = out_dir.join(format!("{}.{ext}", item.id));
                // each subject gets an independent stream from (seed, id)
                let job = InpaintJob {
                    input: &item.input,
                    mask: &item.mask,
                    condition: item.condition.as_deref(),
                    tissue_labels: None,
                    tumor_conc: None,
                    mode: args.mode,
                    format: args.format.to_format(),
                    out: &out,
                    no_postprocess: args.no_postprocess,
                    post: &args.post,
                    seed: cfg.sampler.seed ^ fnv1a64(&item.id),
                };
                if let Err(e) = run_single(cfg, &job) {
                    failures.lock().unwrap().push((item.id.clone(), e));
                }
            });
        }
    });
    let failures = failures.into_inner().unwrap();
    if let Some((id, err)) = failures.into_iter().next() {
        return Err(match err {
            Error::Io(io) => Error::Io(std::io::Error::new(
                io.kind(),
                format!("subject {id}: {io}"),
            )),
            Error::Format(m) => Error::Format(format!("subject {id}: {m}")),
            Error::ShapeMismatch(m) => Error::ShapeMismatch(format!("subject {id}: {m}")),
            Error::InvalidInput(m) => Error::InvalidInput(format!("subject {id}: {m}")),
            Error::Solver(m) => Error::Solver(format!("subject {id}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("subject {id}: {m}")),
        });
    }
    Ok(())
}

pub fn run_synth(args: &SynthArgs) -> Result<()> {
    let started = Instant::now();
    let cfg = PipelineConfig::resolve(&args.pipeline)?;
    let mut run = RunManifest::new(
        "synth",
        serde_json::json!({
            "pipeline": serde_json::to_value(&cfg).map_err(|e| Error::Format(e.to_string()))?,
            "mode": format!("{:?}", args.mode),
        }),
    );

    let condition = match &args.condition {
        Some(path) => Some(load_condition(path, &mut run)?),
        None => None,
    };
    let image_shape: Shape3 = match (&args.shape, &condition) {
        (Some(text), _) => {
            let (x, y, z) = parse_triple::<usize>(text, "--shape")?;
            if x % BLOCK != 0 || y % BLOCK != 0 || z % BLOCK != 0 {
                return Err(Error::InvalidInput(format!(
                    "--shape components must be divisible by {BLOCK}, got {text}"
                )));
            }
            (x, y, z)
        }
        (None, Some(c)) => {
            let l = c.latent_shape();
            (l.0 * BLOCK, l.1 * BLOCK, l.2 * BLOCK)
        }
        (None, None) => {
            return Err(Error::InvalidInput(
                "synth needs --shape or --condition to fix the output geometry".into(),
            ))
        }
    };
    let latent_shape = (
        image_shape.0 / BLOCK,
        image_shape.1 / BLOCK,
        image_shape.2 / BLOCK,
    );
    let condition = condition
        .map(|c| -> Result<ConditioningField> {
            if c.latent_shape() != latent_shape {
                return Err(Error::ShapeMismatch(format!(
                    "conditioning latent shape {:?} does not match requested {:?}",
                    c.latent_shape(),
                    latent_shape
                )));
            }
            Ok(match args.mode {
                ModeArg::Healthy => c.zero_tumor(),
                ModeArg::Tumor => c,
            })
        })
        .transpose()?;

    let schedule = cfg.sampling_schedule()?;
    let denoiser = cfg.build_denoiser(latent_shape, &schedule, Path::new("."))?;
    let sampler_cfg = cfg.sampler_config();
    let z0 = LatentVolume::zeros(LATENT_CHANNELS, latent_shape);
    let mask = MaskVolume::zeros(latent_shape);
    let result = repaint_inpaint(
        &z0,
        &mask,
        denoiser.as_ref(),
        condition.as_ref(),
        &schedule,
        &sampler_cfg,
    )?;
    run.plan_transitions = Some(result.executed.len());

    let volume = BlockMomentCodec.decode(&result.latent)?;
    write_volume(&volume, &args.out, args.format.to_format())?;
    run.add_output(&args.out);
    run.run.wall_time_secs = started.elapsed().as_secs_f64();
    run.write_for(&args.out)?;
    Ok(())
}
