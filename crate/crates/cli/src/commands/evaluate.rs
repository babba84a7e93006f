//! The `evaluate` subcommand: masked metrics per region plus pooled
//! values, aggregated over subjects, emitted as CSV and JSON.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Deserialize;

use voxdiff_core::error::{Error, Result};
use voxdiff_core::evalkit::{
    aggregate_report, masked_metrics, reference, MetricConfig, MetricValues, StdConvention,
    SubjectMetrics,
};
use voxdiff_core::volume::{MaskVolume, VolumeFormat};

use crate::args::EvaluateArgs;
use crate::manifest::RunManifest;
use crate::util::{load_mask, load_volume, write_atomic};

#[derive(Deserialize)]
struct BatchSubject {
    id: String,
    pred: PathBuf,
    gt: PathBuf,
    masks: BTreeMap<String, PathBuf>,
}

struct SubjectRow {
    subject: String,
    region: String,
    values: MetricValues,
}

fn union_mask(masks: &[&MaskVolume]) -> MaskVolume {
    let shape = masks[0].shape();
    MaskVolume::from_fn(shape, |i, j, k| masks.iter().any(|m| m.get(i, j, k)))
}

#[allow(clippy::too_many_arguments)]
fn evaluate_subject(
    id: &str,
    pred_path: &Path,
    gt_path: &Path,
    mask_paths: &BTreeMap<String, PathBuf>,
    format: VolumeFormat,
    cfg: &MetricConfig,
    normalize: bool,
    run: &mut RunManifest,
) -> Result<Vec<SubjectRow>> {
    run.add_input(pred_path)?;
    run.add_input(gt_path)?;
    let mut pred = load_volume(pred_path, format)?;
    let mut gt = load_volume(gt_path, format)?;
    if normalize {
        pred = pred.normalize_intensity()?;
        gt = gt.normalize_intensity()?;
    }
    let mut masks = Vec::new();
    for (name, path) in mask_paths {
        run.add_input(path)?;
        masks.push((name.clone(), load_mask(path, format)?));
    }
    if masks.is_empty() {
        return Err(Error::InvalidInput(
            "evaluate needs at least one --mask name=path".into(),
        ));
    }
    let mut rows = Vec::new();
    for (name, mask) in &masks {
        let values = masked_metrics(&pred, &gt, mask, cfg)?;
        rows.push(SubjectRow {
            subject: id.to_string(),
            region: name.clone(),
            values,
        });
    }
    if masks.len() > 1 {
        let all: Vec<&MaskVolume> = masks.iter().map(|(_, m)| m).collect();
        let pooled = union_mask(&all);
        let values = masked_metrics(&pred, &gt, &pooled, cfg)?;
        rows.push(SubjectRow {
            subject: id.to_string(),
            region: "pooled".into(),
            values,
        });
    }
    Ok(rows)
}

fn parse_mask_flag(flag: &str) -> Result<(String, PathBuf)> {
    match flag.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(Error::InvalidInput(format!(
            "--mask expects NAME=PATH, got \"{flag}\""
        ))),
    }
}

fn csv_row(subject: &str, region: &str, v: &MetricValues) -> String {
    format!(
        "{subject},{region},{},{},{},{},{},{}\n",
        v.ssim, v.psnr, v.mae, v.mse, v.rmse, v.msle
    )
}

pub fn run(args: &EvaluateArgs) -> Result<()> {
    let started = Instant::now();
    let format = args.format.to_format();
    let cfg = MetricConfig {
        ssim_window_radius: args.ssim_window,
    };
    let convention = if args.sample_std {
        StdConvention::Sample
    } else {
        StdConvention::Population
    };
    let mut run = RunManifest::new(
        "evaluate",
        serde_json::json!({
            "ssim_window": args.ssim_window,
            "std": if args.sample_std { "sample" } else { "population" },
            "normalize": args.normalize,
            "reference_table": args.reference_table,
        }),
    );

    let mut rows: Vec<SubjectRow> = Vec::new();
    if let Some(batch_path) = &args.batch {
        run.add_input(batch_path)?;
        let bytes = std::fs::read(batch_path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", batch_path.display()),
            ))
        })?;
        let subjects: Vec<BatchSubject> = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", batch_path.display())))?;
        let base = batch_path.parent().unwrap_or(Path::new("."));
        let resolve =
            |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        for s in &subjects {
            let masks: BTreeMap<String, PathBuf> = s
                .masks
                .iter()
                .map(|(k, v)| (k.clone(), resolve(v)))
                .collect();
            rows.extend(evaluate_subject(
                &s.id,
                &resolve(&s.pred),
                &resolve(&s.gt),
                &masks,
                format,
                &cfg,
                args.normalize,
                &mut run,
            )?);
        }
    } else {
        let pred = args.pred.as_deref().expect("clap enforces --pred");
        let gt = args.gt.as_deref().expect("clap enforces --gt");
        let mut masks = BTreeMap::new();
        for flag in &args.masks {
            let (name, path) = parse_mask_flag(flag)?;
            masks.insert(name, path);
        }
        rows.extend(evaluate_subject(
            "subject", pred, gt, &masks, format, &cfg, args.normalize, &mut run,
        )?);
    }

    // aggregate per region across subjects
    let mut by_region: BTreeMap<String, Vec<SubjectMetrics>> = BTreeMap::new();
    for row in &rows {
        by_region
            .entry(row.region.clone())
            .or_default()
            .push(SubjectMetrics {
                id: row.subject.clone(),
                values: row.values,
            });
    }

    let mut csv = String::from("subject,region,ssim,psnr,mae,mse,rmse,msle\n");
    for row in &rows {
        csv.push_str(&csv_row(&row.subject, &row.region, &row.values));
    }
    let mut summary_json = serde_json::Map::new();
    for (region, entries) in &by_region {
        let report = aggregate_report(entries, convention)?;
        csv.push_str(&csv_row("mean", region, &report.mean));
        csv.push_str(&csv_row("median", region, &report.median));
        csv.push_str(&csv_row("std", region, &report.std));
        summary_json.insert(
            region.clone(),
            serde_json::json!({
                "mean": report.mean,
                "median": report.median,
                "std": report.std,
            }),
        );
    }

    if let Some(table) = &args.reference_table {
        let rows = match table.as_str() {
            "healthy" => &reference::HEALTHY_INPAINTING,
            _ => &reference::TUMOR_INPAINTING,
        };
        for r in rows {
            csv.push_str(&format!(
                "reference,{}-{},{}={} median={} std={}\n",
                table,
                r.metric.to_lowercase(),
                "mean",
                r.mean,
                r.median,
                r.std
            ));
        }
        summary_json.insert(
            "reference".into(),
            serde_json::json!({
                "table": table,
                "rows": rows
                    .iter()
                    .map(|r| serde_json::json!({
                        "metric": r.metric,
                        "mean": r.mean,
                        "median": r.median,
                        "std": r.std,
                    }))
                    .collect::<Vec<_>>(),
            }),
        );
    }

    print!("{csv}");
    if let Some(path) = &args.out_csv {
        write_atomic(path, csv.as_bytes())?;
        run.add_output(path);
    }
    if let Some(path) = &args.out_json {
        let per_subject: Vec<serde_json::Value> = rows
            .iter()
            .map(|r| {
                serde_json::json!({
                    "subject": r.subject,
                    "region": r.region,
                    "metrics": r.values,
                })
            })
            .collect();
        let doc = serde_json::json!({
            "subjects": per_subject,
            "summary": summary_json,
        });
        let bytes = serde_json::to_vec_pretty(&doc)
            .map_err(|e| Error::Format(format!("report encode: {e}")))?;
        write_atomic(path, &bytes)?;
        run.add_output(path);
    }
    run.run.wall_time_secs = started.elapsed().as_secs_f64();
    if let Some(path) = args.out_csv.as_ref().or(args.out_json.as_ref()) {
        run.write_for(path)?;
    }
    Ok(())
}
