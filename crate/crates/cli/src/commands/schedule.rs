//! The `schedule-dump` subcommand: β/α/ᾱ tables and the resampling plan
//! as CSV for inspection and test fixtures.

use std::path::Path;
use std::time::Instant;

use voxdiff_core::error::{Error, Result};
use voxdiff_core::schedule::{NoiseSchedule, RePaintPlan};

use crate::args::ScheduleDumpArgs;
use crate::manifest::RunManifest;
use crate::util::write_atomic;

pub fn run(args: &ScheduleDumpArgs) -> Result<()> {
    let started = Instant::now();
    let mut run = RunManifest::new(
        "schedule-dump",
        serde_json::json!({
            "t_train": args.t_train,
            "beta_start": args.beta_start,
            "beta_end": args.beta_end,
            "t_sample": args.t_sample,
            "jump_length": args.jump_length,
            "n_resample": args.n_resample,
        }),
    );
    let mut schedule = NoiseSchedule::linear(args.t_train, args.beta_start, args.beta_end)?;
    if let Some(t_sample) = args.t_sample {
        schedule = schedule.subsample(t_sample)?;
    }

    let mut csv = String::from("t,source_t,beta,alpha,alpha_bar\n");
    for t in 1..=schedule.len() {
        csv.push_str(&format!(
            "{t},{},{},{},{}\n",
            schedule.source_timestep(t),
            schedule.beta(t),
            schedule.alpha(t),
            schedule.alpha_bar(t)
        ));
    }
    if args.out == "-" {
        print!("{csv}");
    } else {
        write_atomic(Path::new(&args.out), csv.as_bytes())?;
        run.add_output(Path::new(&args.out));
    }

    match (args.jump_length, args.n_resample, &args.plan_out) {
        (None, None, None) => {}
        (Some(jump), Some(resample), Some(plan_out)) => {
            let plan = RePaintPlan::new(schedule.len(), jump, resample)?;
            run.plan_transitions = Some(plan.len());
            let mut csv = String::from("step,t_from,t_to,direction\n");
            for (i, (from, to)) in plan.transitions().iter().enumerate() {
                let dir = if to < from { "down" } else { "up" };
                csv.push_str(&format!("{i},{from},{to},{dir}\n"));
            }
            write_atomic(plan_out, csv.as_bytes())?;
            run.add_output(plan_out);
        }
        _ => {
            return Err(Error::InvalidInput(
                "plan dumping needs --jump-length, --n-resample, and --plan-out together".into(),
            ))
        }
    }
    if args.out != "-" {
        run.run.wall_time_secs = started.elapsed().as_secs_f64();
        run.write_for(Path::new(&args.out))?;
    }
    Ok(())
}
