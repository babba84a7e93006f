//! The `postprocess` subcommand and the shared matching/blending chain.

use std::time::Instant;

use voxdiff_core::error::{Error, Result};
use voxdiff_core::postprocess::{histogram_match, poisson_blend, BlendConfig, MatchConfig};
use voxdiff_core::volume::{write_volume, MaskVolume, Volume3};

use crate::args::{OrderArg, PostFlags, PostprocessArgs};
use crate::manifest::RunManifest;
use crate::util::{load_mask, load_volume};

/// Runs the configured combination of histogram matching and Poisson
/// blending. The returned volume still needs region compositing against
/// the reference (blending composites implicitly, matching does not).
pub fn apply_postprocessing(
    generated: &Volume3,
    reference: &Volume3,
    region: &MaskVolume,
    flags: &PostFlags,
) -> Result<Volume3> {
    let match_cfg = MatchConfig {
        bins: flags.bins,
        exact: flags.exact_quantiles,
    };
    let blend_cfg = BlendConfig {
        cg_tolerance: flags.cg_tolerance,
        cg_max_iters: flags.cg_max_iters,
    };
    let matcher = |v: &Volume3| histogram_match(v, reference, flags.black_threshold, &match_cfg);
    let blender = |v: &Volume3| poisson_blend(reference, v, region, &blend_cfg).map(|(out, _)| out);

    let out = match (flags.match_enabled(), flags.blend_enabled(), flags.order) {
        (false, false, _) => generated.clone(),
        (true, false, _) => matcher(generated)?,
        (false, true, _) => blender(generated)?,
        (true, true, OrderArg::HeFirst) => blender(&matcher(generated)?)?,
        (true, true, OrderArg::PbFirst) => matcher(&blender(generated)?)?,
    };
    Ok(out)
}

pub fn run(args: &PostprocessArgs) -> Result<()> {
    let started = Instant::now();
    let format = args.format.to_format();
    let mut run = RunManifest::new(
        "postprocess",
        serde_json::json!({
            "order": format!("{:?}", args.post.order),
            "match": args.post.match_enabled(),
            "blend": args.post.blend_enabled(),
            "black_threshold": args.post.black_threshold,
            "bins": args.post.bins,
            "exact_quantiles": args.post.exact_quantiles,
            "cg_tolerance": args.post.cg_tolerance,
            "cg_max_iters": args.post.cg_max_iters,
        }),
    );
    run.add_input(&args.generated)?;
    run.add_input(&args.reference)?;
    run.add_input(&args.region)?;

    let generated = load_volume(&args.generated, format)?;
    let reference = load_volume(&args.reference, format)?;
    let region = load_mask(&args.region, format)?;
    if generated.shape() != reference.shape() || generated.shape() != region.shape() {
        return Err(Error::ShapeMismatch(format!(
            "generated {:?}, reference {:?}, region {:?} must share a shape",
            generated.shape(),
            reference.shape(),
            region.shape()
        )));
    }

    let processed = apply_postprocessing(&generated, &reference, &region, &args.post)?;
    // known context stays reference data
    let mut output = reference.clone();
    for v in 0..output.num_voxels() {
        if region.data()[v] == 1 {
            output.data_mut()[v] = processed.data()[v];
        }
    }

    write_volume(&output, &args.out, format)?;
    run.add_output(&args.out);
    run.run.wall_time_secs = started.elapsed().as_secs_f64();
    run.write_for(&args.out)?;
    Ok(())
}
