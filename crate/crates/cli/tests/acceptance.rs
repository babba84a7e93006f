//! Acceptance criterion 11 — the end-to-end CLI pipeline on a synthetic
//! 32³ fixture: completes in under 60 s single-threaded and is
//! deterministic across repeated runs with the same manifest.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use voxdiff_core::condition::ConditioningField;
use voxdiff_core::volume::{read_volume, write_volume, MaskVolume, Volume3, VolumeFormat};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_voxdiff")
}

fn fixture_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("voxdiff-c11-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// A smooth synthetic head: bright ball over dark background.
fn synthetic_volume() -> Volume3 {
    Volume3::from_fn((32, 32, 32), |i, j, k| {
        let d = ((i as f64 - 16.0).powi(2) + (j as f64 - 16.0).powi(2) + (k as f64 - 16.0).powi(2))
            .sqrt();
        if d < 13.0 {
            600.0 + 300.0 * ((i as f64 * 0.4).sin() * (j as f64 * 0.3).cos() + (k as f64 * 0.2).sin())
        } else {
            0.0
        }
    })
}

fn write_fixture(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let volume = synthetic_volume();
    let input = dir.join("subject.nii");
    write_volume(&volume, &input, VolumeFormat::Nifti1Raw).unwrap();

    // unknown box strictly inside the head
    let mask = MaskVolume::from_fn((32, 32, 32), |i, j, k| {
        !((12..20).contains(&i) && (12..20).contains(&j) && (12..20).contains(&k))
    });
    let mask_path = dir.join("mask.nii");
    write_volume(&mask.to_volume(), &mask_path, VolumeFormat::Nifti1Raw).unwrap();

    let labels = Volume3::from_fn((32, 32, 32), |i, j, k| {
        let d = ((i as f64 - 16.0).powi(2) + (j as f64 - 16.0).powi(2) + (k as f64 - 16.0).powi(2))
            .sqrt();
        if d < 6.0 {
            3.0
        } else if d < 10.0 {
            2.0
        } else if d < 13.0 {
            1.0
        } else {
            0.0
        }
    });
    let conc = Volume3::from_fn((32, 32, 32), |i, j, k| {
        let d = ((i as f64 - 14.0).powi(2) + (j as f64 - 14.0).powi(2) + (k as f64 - 16.0).powi(2))
            .sqrt();
        (1.0 - d / 8.0).clamp(0.0, 1.0)
    });
    let field = ConditioningField::build(&labels, &conc, 4).unwrap();
    let condition = dir.join("condition.json");
    field.save(&condition).unwrap();
    (input, mask_path, condition)
}

#[test]
fn c11_end_to_end_cli() {
    let started = Instant::now();
    let dir = fixture_dir("main");
    let (input, mask, condition) = write_fixture(&dir);

    let run = |out: &Path| {
        let status = Command::new(bin())
            .env("VOXDIFF_THREADS", "1")
            .args([
                "inpaint",
                "--input",
                input.to_str().unwrap(),
                "--mask",
                mask.to_str().unwrap(),
                "--condition",
                condition.to_str().unwrap(),
                "--mode",
                "healthy",
                "--seed",
                "7",
                "--out",
                out.to_str().unwrap(),
            ])
            .status()
            .expect("spawn voxdiff");
        assert!(status.success(), "inpaint exited with {status}");
    };

    let out1 = dir.join("out1.nii");
    let out2 = dir.join("out2.nii");
    run(&out1);
    run(&out2);

    // deterministic: identical manifests give byte-identical outputs
    let bytes1 = std::fs::read(&out1).unwrap();
    let bytes2 = std::fs::read(&out2).unwrap();
    assert_eq!(bytes1, bytes2, "repeated runs differ");

    // manifest written with the full plan length of the default config
    let manifest: serde_json::Value = serde_json::from_slice(
        &std::fs::read(dir.join("out1.nii.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["plan_transitions"], 4570);
    assert_eq!(manifest["config"]["pipeline"]["schedule"]["t_sample"], 250);
    assert_eq!(manifest["config"]["pipeline"]["sampler"]["seed"], 7);
    assert!(manifest["inputs"].as_object().unwrap().len() >= 3);

    // with postprocessing on, the known region is the normalized input
    // exactly (the blend only rewrites the unknown region)
    let output = read_volume(&out1, VolumeFormat::Nifti1Raw).unwrap();
    let normalized = read_volume(&input, VolumeFormat::Nifti1Raw)
        .unwrap()
        .normalize_intensity()
        .unwrap();
    let mask_vol = read_volume(&mask, VolumeFormat::Nifti1Raw).unwrap();
    let mut checked = 0usize;
    for v in 0..output.num_voxels() {
        if mask_vol.data()[v] == 1.0 {
            let want = f64::from(normalized.data()[v] as f32);
            assert_eq!(output.data()[v], want, "known voxel {v} modified");
            checked += 1;
        }
    }
    assert!(checked > 30_000);

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "end-to-end runtime {elapsed:.1}s exceeds 60s");
    println!("[acceptance] C11 end-to-end-cli: PASS ({elapsed:.2}s for two runs)");
    std::fs::remove_dir_all(&dir).ok();
}
