//! The `maskgen` subcommand: tumor/healthy evaluation mask pairs with a
//! seed manifest.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use voxdiff_core::error::Result;
use voxdiff_core::evalkit::{generate_masks, MaskSpec};
use voxdiff_core::volume::{write_volume, MaskVolume};

use crate::args::MaskgenArgs;
use crate::manifest::RunManifest;
use crate::util::{load_mask, load_volume, parse_triple};

pub fn run(args: &MaskgenArgs) -> Result<()> {
    let started = Instant::now();
    let format = args.format.to_format();
    let semi_axes = parse_triple::<f64>(&args.semi_axes, "--semi-axes")?;
    let spec = MaskSpec {
        semi_axes,
        tumor_dilate: args.tumor_dilate,
        black_threshold: args.black_threshold,
        ..MaskSpec::default()
    };
    let mut run = RunManifest::new(
        "maskgen",
        serde_json::json!({
            "seed": args.seed,
            "semi_axes": [semi_axes.0, semi_axes.1, semi_axes.2],
            "tumor_dilate": args.tumor_dilate,
            "black_threshold": args.black_threshold,
        }),
    );
    run.add_input(&args.gt)?;

    let gt = load_volume(&args.gt, format)?;
    let tumor_seg = match &args.tumor_seg {
        Some(path) => {
            run.add_input(path)?;
            load_mask(path, format)?
        }
        None => MaskVolume::zeros(gt.shape()),
    };
    let mut rng = ChaCha12Rng::seed_from_u64(args.seed);
    let (tumor_mask, healthy_mask) = generate_masks(&gt, &tumor_seg, &spec, &mut rng)?;

    write_volume(&tumor_mask.to_volume(), &args.out_tumor, format)?;
    write_volume(&healthy_mask.to_volume(), &args.out_healthy, format)?;
    run.add_output(&args.out_tumor);
    run.add_output(&args.out_healthy);
    if let Some(path) = &args.out_known {
        let voided = MaskVolume::from_fn(gt.shape(), |i, j, k| {
            tumor_mask.get(i, j, k) || healthy_mask.get(i, j, k)
        });
        write_volume(&voided.complement().to_volume(), path, format)?;
        run.add_output(path);
    }
    run.run.wall_time_secs = started.elapsed().as_secs_f64();
    run.write_for(&args.out_healthy)?;
    Ok(())
}
