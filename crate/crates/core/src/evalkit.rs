//! Masked-region image-quality metrics, evaluation-mask generation, and
//! aggregate report tables.
//!
//! All error metrics (MAE, MSE, RMSE, MSLE) are computed over region
//! voxels only. PSNR uses data range 1 and is capped at 100 dB when
//! MSE < 1e-10. SSIM is the mean of the local SSIM map over voxels whose
//! window center lies in the region, with a uniform cubic window (7×7×7
//! by default, cropped at the volume bounds), constants k1 = 0.01,
//! k2 = 0.03, L = 1, and population window statistics. Window sums are
//! evaluated through 3D integral volumes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{MaskVolume, Shape3, Volume3};

const SSIM_C1: f64 = 1e-4; // (0.01 * 1)^2
const SSIM_C2: f64 = 9e-4; // (0.03 * 1)^2
const PSNR_CAP: f64 = 100.0;
const PSNR_MSE_FLOOR: f64 = 1e-10;

/// One subject's metric values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub ssim: f64,
    pub psnr: f64,
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    pub msle: f64,
}

impl MetricValues {
    /// Metric (name, value) pairs in report order.
    pub fn rows(&self) -> [(&'static str, f64); 6] {
        [
            ("SSIM", self.ssim),
            ("PSNR", self.psnr),
            ("MAE", self.mae),
            ("MSE", self.mse),
            ("RMSE", self.rmse),
            ("MSLE", self.msle),
        ]
    }

    fn from_rows(vals: [f64; 6]) -> Self {
        Self {
            ssim: vals[0],
            psnr: vals[1],
            mae: vals[2],
            mse: vals[3],
            rmse: vals[4],
            msle: vals[5],
        }
    }
}

/// Metric computation knobs.
#[derive(Debug, Clone)]
pub struct MetricConfig {
    /// Half-width of the cubic SSIM window (3 gives 7×7×7).
    pub ssim_window_radius: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            ssim_window_radius: 3,
        }
    }
}

/// Computes all metrics over the region voxels of a prediction /
/// ground-truth pair. Intensities are expected in [0, 1].
pub fn masked_metrics(
    pred: &Volume3,
    gt: &Volume3,
    region: &MaskVolume,
    cfg: &MetricConfig,
) -> Result<MetricValues> {
    if pred.shape() != gt.shape() || pred.shape() != region.shape() {
        return Err(Error::ShapeMismatch(format!(
            "pred {:?}, gt {:?}, region {:?} must share a shape",
            pred.shape(),
            gt.shape(),
            region.shape()
        )));
    }
    let count = region.count_set();
    if count == 0 {
        return Err(Error::InvalidInput("metric region is empty".into()));
    }

    let (mut abs_sum, mut sq_sum, mut log_sq_sum) = (0.0f64, 0.0f64, 0.0f64);
    for (v, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if region.data()[v] == 1 {
            let d = p - g;
            abs_sum += d.abs();
            sq_sum += d * d;
            let ld = (1.0 + p).ln() - (1.0 + g).ln();
            log_sq_sum += ld * ld;
        }
    }
    let n = count as f64;
    let mae = abs_sum / n;
    let mse = sq_sum / n;
    let rmse = mse.sqrt();
    let msle = log_sq_sum / n;
    let psnr = if mse < PSNR_MSE_FLOOR {
        PSNR_CAP
    } else {
        10.0 * (1.0 / mse).log10()
    };
    let ssim = masked_ssim(pred, gt, region, cfg.ssim_window_radius);

    Ok(MetricValues {
        ssim,
        psnr,
        mae,
        mse,
        rmse,
        msle,
    })
}

/// 3D integral volume: `sum(i, j, k)` is the sum over the inclusive box
/// [0, i)×[0, j)×[0, k).
struct IntegralVolume {
    table: Vec<f64>,
    nx: usize,
    ny: usize,
}

impl IntegralVolume {
    fn build(shape: Shape3, value: impl Fn(usize) -> f64) -> Self {
        let (nx, ny, nz) = shape;
        let (tx, ty) = (nx + 1, ny + 1);
        let mut table = vec![0.0f64; tx * ty * (nz + 1)];
        for k in 0..nz {
            for j in 0..ny {
                let mut row = 0.0;
                for i in 0..nx {
                    row += value(i + nx * (j + ny * k));
                    let idx = |a: usize, b: usize, c: usize| a + tx * (b + ty * c);
                    table[idx(i + 1, j + 1, k + 1)] = row
                        + table[idx(i + 1, j, k + 1)]
                        + table[idx(i + 1, j + 1, k)]
                        - table[idx(i + 1, j, k)];
                }
            }
        }
        Self { table, nx, ny }
    }

    /// Sum over the half-open box [x0, x1)×[y0, y1)×[z0, z1).
    fn box_sum(&self, x0: usize, x1: usize, y0: usize, y1: usize, z0: usize, z1: usize) -> f64 {
        let idx = |a: usize, b: usize, c: usize| a + (self.nx + 1) * (b + (self.ny + 1) * c);
        self.table[idx(x1, y1, z1)] - self.table[idx(x0, y1, z1)] - self.table[idx(x1, y0, z1)]
            + self.table[idx(x0, y0, z1)]
            - self.table[idx(x1, y1, z0)]
            + self.table[idx(x0, y1, z0)]
            + self.table[idx(x1, y0, z0)]
            - self.table[idx(x0, y0, z0)]
    }
}

fn masked_ssim(pred: &Volume3, gt: &Volume3, region: &MaskVolume, radius: usize) -> f64 {
    let shape = pred.shape();
    let (nx, ny, nz) = shape;
    let p = pred.data();
    let g = gt.data();
    let sp = IntegralVolume::build(shape, |v| p[v]);
    let sg = IntegralVolume::build(shape, |v| g[v]);
    let spp = IntegralVolume::build(shape, |v| p[v] * p[v]);
    let sgg = IntegralVolume::build(shape, |v| g[v] * g[v]);
    let spg = IntegralVolume::build(shape, |v| p[v] * g[v]);

    let mut total = 0.0f64;
    let mut centers = 0usize;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if !region.get(i, j, k) {
                    continue;
                }
                let x0 = i.saturating_sub(radius);
                let y0 = j.saturating_sub(radius);
                let z0 = k.saturating_sub(radius);
                let x1 = (i + radius + 1).min(nx);
                let y1 = (j + radius + 1).min(ny);
                let z1 = (k + radius + 1).min(nz);
                let n = ((x1 - x0) * (y1 - y0) * (z1 - z0)) as f64;
                let mp = sp.box_sum(x0, x1, y0, y1, z0, z1) / n;
                let mg = sg.box_sum(x0, x1, y0, y1, z0, z1) / n;
                let vp = spp.box_sum(x0, x1, y0, y1, z0, z1) / n - mp * mp;
                let vg = sgg.box_sum(x0, x1, y0, y1, z0, z1) / n - mg * mg;
                let cov = spg.box_sum(x0, x1, y0, y1, z0, z1) / n - mp * mg;
                let val = ((2.0 * mp * mg + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mp * mp + mg * mg + SSIM_C1) * (vp + vg + SSIM_C2));
                total += val;
                centers += 1;
            }
        }
    }
    total / centers as f64
}

/// Geometry and search controls for evaluation-mask generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskSpec {
    /// Ellipsoid semi-axes in voxels.
    pub semi_axes: (f64, f64, f64),
    /// Dilation iterations applied to the tumor segmentation.
    pub tumor_dilate: usize,
    /// Voxels above this value count as brain tissue.
    pub black_threshold: f64,
    /// Rejection-sampling budget for the healthy placement.
    pub max_attempts: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            semi_axes: (8.0, 8.0, 8.0),
            tumor_dilate: 0,
            black_threshold: 0.0,
            max_attempts: 10_000,
        }
    }
}

/// Produces the two evaluation masks: the (optionally dilated) tumor
/// region, and a random ellipsoid placed entirely inside non-black tissue
/// and disjoint from the tumor. Placement is rejection-sampled from `rng`,
/// so results are fully determined by the seed.
pub fn generate_masks<R: Rng>(
    gt: &Volume3,
    tumor_seg: &MaskVolume,
    spec: &MaskSpec,
    rng: &mut R,
) -> Result<(MaskVolume, MaskVolume)> {
    if gt.shape() != tumor_seg.shape() {
        return Err(Error::ShapeMismatch(format!(
            "volume {:?} vs tumor segmentation {:?}",
            gt.shape(),
            tumor_seg.shape()
        )));
    }
    let (ax, ay, az) = spec.semi_axes;
    if !(ax > 0.0 && ay > 0.0 && az > 0.0) {
        return Err(Error::InvalidInput(format!(
            "semi-axes must be positive, got {:?}",
            spec.semi_axes
        )));
    }
    let tumor_mask = tumor_seg.dilate(spec.tumor_dilate);
    let (nx, ny, nz) = gt.shape();

    for _ in 0..spec.max_attempts {
        let c = (
            rng.random_range(0..nx) as f64,
            rng.random_range(0..ny) as f64,
            rng.random_range(0..nz) as f64,
        );
        if let Some(mask) = try_ellipsoid(gt, &tumor_mask, spec, c) {
            return Ok((tumor_mask, mask));
        }
    }
    Err(Error::Numeric(format!(
        "no feasible healthy-mask placement after {} attempts",
        spec.max_attempts
    )))
}

fn try_ellipsoid(
    gt: &Volume3,
    tumor: &MaskVolume,
    spec: &MaskSpec,
    center: (f64, f64, f64),
) -> Option<MaskVolume> {
    let (nx, ny, nz) = gt.shape();
    let (ax, ay, az) = spec.semi_axes;
    let lo = (
        (center.0 - ax).floor(),
        (center.1 - ay).floor(),
        (center.2 - az).floor(),
    );
    let hi = (
        (center.0 + ax).ceil(),
        (center.1 + ay).ceil(),
        (center.2 + az).ceil(),
    );
    if lo.0 < 0.0 || lo.1 < 0.0 || lo.2 < 0.0 {
        return None;
    }
    if hi.0 >= nx as f64 || hi.1 >= ny as f64 || hi.2 >= nz as f64 {
        return None;
    }
    let inside = |i: usize, j: usize, k: usize| {
        let dx = (i as f64 - center.0) / ax;
        let dy = (j as f64 - center.1) / ay;
        let dz = (k as f64 - center.2) / az;
        dx * dx + dy * dy + dz * dz <= 1.0
    };
    let mut voxels = Vec::new();
    for k in lo.2 as usize..=hi.2 as usize {
        for j in lo.1 as usize..=hi.1 as usize {
            for i in lo.0 as usize..=hi.0 as usize {
                if inside(i, j, k) {
                    if gt.get(i, j, k) <= spec.black_threshold || tumor.get(i, j, k) {
                        return None;
                    }
                    voxels.push((i, j, k));
                }
            }
        }
    }
    if voxels.is_empty() {
        return None;
    }
    let mask = MaskVolume::zeros(gt.shape());
    let mut data = mask.data().to_vec();
    for (i, j, k) in voxels {
        data[mask.index(i, j, k)] = 1;
    }
    Some(MaskVolume::new(gt.shape(), data).expect("binary by construction"))
}

/// Standard-deviation convention for report summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdConvention {
    Population,
    Sample,
}

/// Metrics of one subject, tagged with an identifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub id: String,
    pub values: MetricValues,
}

/// Per-subject values plus mean / median / population-or-sample std.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub subjects: Vec<SubjectMetrics>,
    pub mean: MetricValues,
    pub median: MetricValues,
    pub std: MetricValues,
}

/// Aggregates per-subject entries. Median uses the midpoint convention
/// for even counts.
pub fn aggregate_report(
    entries: &[SubjectMetrics],
    convention: StdConvention,
) -> Result<MetricReport> {
    if entries.is_empty() {
        return Err(Error::InvalidInput("no metric entries to aggregate".into()));
    }
    let n = entries.len() as f64;
    let mut mean = [0.0f64; 6];
    let mut median = [0.0f64; 6];
    let mut std = [0.0f64; 6];
    for m in 0..6 {
        let mut vals: Vec<f64> = entries.iter().map(|e| e.values.rows()[m].1).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mu = vals.iter().sum::<f64>() / n;
        mean[m] = mu;
        let mid = vals.len() / 2;
        median[m] = if vals.len() % 2 == 1 {
            vals[mid]
        } else {
            0.5 * (vals[mid - 1] + vals[mid])
        };
        let ss: f64 = vals.iter().map(|v| (v - mu) * (v - mu)).sum();
        std[m] = match convention {
            StdConvention::Population => (ss / n).sqrt(),
            StdConvention::Sample => {
                if vals.len() > 1 {
                    (ss / (n - 1.0)).sqrt()
                } else {
                    0.0
                }
            }
        };
    }
    Ok(MetricReport {
        subjects: entries.to_vec(),
        mean: MetricValues::from_rows(mean),
        median: MetricValues::from_rows(median),
        std: MetricValues::from_rows(std),
    })
}

/// Published reference values for the full-scale trained pipeline.
/// Desk-scale runs are not expected to reproduce them; they are report
/// context only.
pub mod reference {
    /// Mean / median / std of one metric.
    #[derive(Debug, Clone, Copy)]
    pub struct ReferenceRow {
        pub metric: &'static str,
        pub mean: f64,
        pub median: f64,
        pub std: f64,
    }

    /// Healthy-tissue inpainting reference table.
    pub const HEALTHY_INPAINTING: [ReferenceRow; 6] = [
        ReferenceRow { metric: "SSIM", mean: 0.754, median: 0.746, std: 0.134 },
        ReferenceRow { metric: "PSNR", mean: 18.542, median: 18.140, std: 3.121 },
        ReferenceRow { metric: "MAE", mean: 0.088, median: 0.084, std: 0.032 },
        ReferenceRow { metric: "MSE", mean: 0.017, median: 0.015, std: 0.011 },
        ReferenceRow { metric: "RMSE", mean: 0.123, median: 0.121, std: 0.040 },
        ReferenceRow { metric: "MSLE", mean: 0.007, median: 0.006, std: 0.005 },
    ];

    /// Tumor inpainting reference table.
    pub const TUMOR_INPAINTING: [ReferenceRow; 6] = [
        ReferenceRow { metric: "SSIM", mean: 0.578, median: 0.576, std: 0.090 },
        ReferenceRow { metric: "PSNR", mean: 17.360, median: 17.664, std: 2.262 },
        ReferenceRow { metric: "MAE", mean: 0.104, median: 0.095, std: 0.041 },
        ReferenceRow { metric: "MSE", mean: 0.022, median: 0.017, std: 0.024 },
        ReferenceRow { metric: "RMSE", mean: 0.141, median: 0.131, std: 0.047 },
        ReferenceRow { metric: "MSLE", mean: 0.009, median: 0.007, std: 0.011 },
    ];

    /// Mean / std of one metric on a challenge split.
    #[derive(Debug, Clone, Copy)]
    pub struct ChallengeRow {
        pub metric: &'static str,
        pub mean: f64,
        pub std: f64,
    }

    /// Challenge validation-split reference values.
    pub const CHALLENGE_VALIDATION: [ChallengeRow; 4] = [
        ChallengeRow { metric: "SSIM", mean: 0.756, std: 0.133 },
        ChallengeRow { metric: "PSNR", mean: 18.589, std: 2.884 },
        ChallengeRow { metric: "MSE", mean: 0.017, std: 0.009 },
        ChallengeRow { metric: "RMSE", mean: 0.129, std: 0.036 },
    ];

    /// Challenge test-split reference values.
    pub const CHALLENGE_TEST: [ChallengeRow; 4] = [
        ChallengeRow { metric: "SSIM", mean: 0.786, std: 0.145 },
        ChallengeRow { metric: "PSNR", mean: 17.737, std: 3.469 },
        ChallengeRow { metric: "MSE", mean: 0.019, std: 0.015 },
        ChallengeRow { metric: "RMSE", mean: 0.139, std: 0.056 },
    ];
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn identical_images_are_perfect() {
        let v = Volume3::from_fn((8, 8, 8), |i, j, k| ((i + j * k) % 7) as f64 / 7.0);
        let region = MaskVolume::from_fn((8, 8, 8), |i, _, _| i > 2);
        let m = masked_metrics(&v, &v, &region, &MetricConfig::default()).unwrap();
        assert_eq!(m.ssim, 1.0);
        assert_eq!(m.psnr, 100.0);
        assert_eq!(m.mae, 0.0);
        assert_eq!(m.mse, 0.0);
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.msle, 0.0);
    }

    #[test]
    fn constant_error_closed_form() {
        let gt = Volume3::filled((6, 6, 6), 0.4);
        let pred = Volume3::filled((6, 6, 6), 0.5);
        let region = MaskVolume::ones((6, 6, 6));
        let m = masked_metrics(&pred, &gt, &region, &MetricConfig::default()).unwrap();
        assert!((m.mae - 0.1).abs() < 1e-12);
        assert!((m.mse - 0.01).abs() < 1e-12);
        assert!((m.rmse - 0.1).abs() < 1e-12);
        assert!((m.psnr - 20.0).abs() < 1e-9);
        let expected_msle = (1.5f64.ln() - 1.4f64.ln()).powi(2);
        assert!((m.msle - expected_msle).abs() < 1e-12);
    }

    #[test]
    fn psnr_mse_consistency() {
        let gt = Volume3::from_fn((8, 8, 8), |i, j, k| ((i * j + k) % 5) as f64 / 5.0);
        let pred = Volume3::from_fn((8, 8, 8), |i, j, k| ((i + j + k) % 4) as f64 / 4.0);
        let region = MaskVolume::from_fn((8, 8, 8), |_, j, _| j < 5);
        let m = masked_metrics(&pred, &gt, &region, &MetricConfig::default()).unwrap();
        assert!(m.mse >= 1e-10);
        assert!((m.psnr - 10.0 * (1.0 / m.mse).log10()).abs() < 1e-12);
    }

    #[test]
    fn empty_region_rejected() {
        let v = Volume3::zeros((4, 4, 4));
        let region = MaskVolume::zeros((4, 4, 4));
        assert!(masked_metrics(&v, &v, &region, &MetricConfig::default()).is_err());
    }

    #[test]
    fn mae_scales_linearly() {
        let gt = Volume3::from_fn((6, 6, 6), |i, _, _| i as f64 / 10.0);
        let pred = Volume3::from_fn((6, 6, 6), |i, _, _| i as f64 / 10.0 + 0.05);
        let region = MaskVolume::ones((6, 6, 6));
        let cfg = MetricConfig::default();
        let base = masked_metrics(&pred, &gt, &region, &cfg).unwrap();
        let scale = 0.5;
        let gt2 = Volume3::new(
            gt.shape(),
            gt.spacing(),
            gt.data().iter().map(|v| v * scale).collect(),
        )
        .unwrap();
        let pred2 = Volume3::new(
            pred.shape(),
            pred.spacing(),
            pred.data().iter().map(|v| v * scale).collect(),
        )
        .unwrap();
        let scaled = masked_metrics(&pred2, &gt2, &region, &cfg).unwrap();
        assert!((scaled.mae - scale * base.mae).abs() < 1e-12);
    }

    #[test]
    fn masks_are_disjoint_and_inside_tissue() {
        let gt = Volume3::from_fn((24, 24, 24), |i, j, k| {
            let d = (i as f64 - 12.0).powi(2) + (j as f64 - 12.0).powi(2) + (k as f64 - 12.0).powi(2);
            if d.sqrt() < 10.0 {
                0.5
            } else {
                0.0
            }
        });
        let tumor = MaskVolume::from_fn((24, 24, 24), |i, j, k| {
            ((i as f64 - 8.0).powi(2) + (j as f64 - 12.0).powi(2) + (k as f64 - 12.0).powi(2))
                .sqrt()
                < 3.0
        });
        let spec = MaskSpec {
            semi_axes: (2.5, 2.5, 2.5),
            ..MaskSpec::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let (tumor_mask, healthy) = generate_masks(&gt, &tumor, &spec, &mut rng).unwrap();
        assert!(healthy.count_set() > 0);
        for v in 0..healthy.data().len() {
            if healthy.data()[v] == 1 {
                assert_eq!(tumor_mask.data()[v], 0, "overlap at {v}");
                assert!(gt.data()[v] > 0.0, "healthy mask outside tissue at {v}");
            }
        }
    }

    #[test]
    fn mask_generation_is_seed_deterministic() {
        let gt = Volume3::filled((16, 16, 16), 0.5);
        let tumor = MaskVolume::zeros((16, 16, 16));
        let spec = MaskSpec {
            semi_axes: (3.0, 2.0, 2.0),
            ..MaskSpec::default()
        };
        let mut rng1 = ChaCha12Rng::seed_from_u64(7);
        let mut rng2 = ChaCha12Rng::seed_from_u64(7);
        let (_, h1) = generate_masks(&gt, &tumor, &spec, &mut rng1).unwrap();
        let (_, h2) = generate_masks(&gt, &tumor, &spec, &mut rng2).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn fully_tumorous_brain_is_infeasible() {
        let gt = Volume3::filled((12, 12, 12), 0.5);
        let tumor = MaskVolume::ones((12, 12, 12));
        let spec = MaskSpec {
            semi_axes: (2.0, 2.0, 2.0),
            max_attempts: 200,
            ..MaskSpec::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        assert!(matches!(
            generate_masks(&gt, &tumor, &spec, &mut rng),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn aggregate_single_entry() {
        let values = MetricValues {
            ssim: 0.9,
            psnr: 30.0,
            mae: 0.01,
            mse: 0.001,
            rmse: 0.0316,
            msle: 0.0005,
        };
        let report = aggregate_report(
            &[SubjectMetrics {
                id: "s0".into(),
                values,
            }],
            StdConvention::Population,
        )
        .unwrap();
        assert_eq!(report.mean, values);
        assert_eq!(report.median, values);
        assert!(report.std.rows().iter().all(|(_, v)| *v == 0.0));
    }

    #[test]
    fn aggregate_population_convention_by_hand() {
        let mk = |x: f64| SubjectMetrics {
            id: format!("s{x}"),
            values: MetricValues {
                ssim: x,
                psnr: x,
                mae: x,
                mse: x,
                rmse: x,
                msle: x,
            },
        };
        let report = aggregate_report(
            &[mk(1.0), mk(2.0), mk(3.0)],
            StdConvention::Population,
        )
        .unwrap();
        assert!((report.mean.ssim - 2.0).abs() < 1e-15);
        assert!((report.median.ssim - 2.0).abs() < 1e-15);
        assert!((report.std.ssim - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn median_midpoint_for_even_counts() {
        let mk = |x: f64| SubjectMetrics {
            id: format!("s{x}"),
            values: MetricValues {
                ssim: x,
                psnr: 0.0,
                mae: 0.0,
                mse: 0.0,
                rmse: 0.0,
                msle: 0.0,
            },
        };
        let report = aggregate_report(
            &[mk(1.0), mk(4.0), mk(2.0), mk(9.0)],
            StdConvention::Population,
        )
        .unwrap();
        assert!((report.median.ssim - 3.0).abs() < 1e-15);
    }
}
