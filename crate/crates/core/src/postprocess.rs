//! Image-space boundary harmonization: gradient-domain Poisson blending
//! and histogram matching over non-black voxels.
//!
//! [`poisson_blend`] solves the discrete Poisson equation ∇²f = ∇²(source)
//! inside the blend region on the 6-neighbor Laplacian, with Dirichlet
//! boundary values taken from the target, using matrix-free conjugate
//! gradient. Outside the region the output equals the target bitwise.
//! Since guidance gradients are unchanged, a source that differs from a
//! harmonic target by a constant inside the region blends back to the
//! target: constant seams vanish.
//!
//! [`histogram_match`] computes a monotone quantile mapping from the
//! generated volume's non-black intensity distribution onto the
//! reference's, leaving voxels at or below the black threshold untouched.

use crate::error::{Error, Result};
use crate::volume::{MaskVolume, Volume3};

/// Solver controls for [`poisson_blend`].
#[derive(Debug, Clone)]
pub struct BlendConfig {
    /// Relative residual bound ‖b − Ax‖/‖b‖.
    pub cg_tolerance: f64,
    /// Iteration cap; `None` uses 10·√(region voxels) + 1000.
    pub cg_max_iters: Option<usize>,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self {
            cg_tolerance: 1e-6,
            cg_max_iters: None,
        }
    }
}

/// Outcome diagnostics of an accepted blend.
#[derive(Debug, Clone, Copy)]
pub struct BlendReport {
    pub iterations: usize,
    pub relative_residual: f64,
    pub region_voxels: usize,
}

/// Matrix-free conjugate gradient for SPD systems.
///
/// `observer` sees every iterate (including the initial guess); the final
/// reported residual is recomputed from scratch, and the solver restarts
/// on the true residual if recursion drift left it above tolerance.
/// Returns (solution, iterations, relative true residual, converged).
pub fn conjugate_gradient(
    apply_a: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    x0: Vec<f64>,
    tol: f64,
    max_iters: usize,
    mut observer: impl FnMut(&[f64]),
) -> (Vec<f64>, usize, f64, bool) {
    let n = b.len();
    let norm_b = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm_b == 0.0 {
        // the unique solution of an SPD system with zero right-hand side
        return (vec![0.0; n], 0, 0.0, true);
    }
    let mut x = x0;
    observer(&x);
    let mut ax = vec![0.0; n];
    let mut ap = vec![0.0; n];
    let mut iterations = 0usize;

    let true_residual = |x: &[f64], ax: &mut [f64]| -> (Vec<f64>, f64) {
        apply_a(x, ax);
        let r: Vec<f64> = b.iter().zip(ax.iter()).map(|(bi, axi)| bi - axi).collect();
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        (r, norm)
    };

    loop {
        let (mut r, norm_r) = true_residual(&x, &mut ax);
        if norm_r / norm_b <= tol {
            return (x, iterations, norm_r / norm_b, true);
        }
        if iterations >= max_iters {
            return (x, iterations, norm_r / norm_b, false);
        }
        let mut p = r.clone();
        let mut rs = norm_r * norm_r;
        while iterations < max_iters {
            apply_a(&p, &mut ap);
            let p_ap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            if p_ap <= 0.0 {
                // loss of positive definiteness in finite precision;
                // restart on the true residual
                break;
            }
            let alpha = rs / p_ap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            iterations += 1;
            observer(&x);
            let rs_new: f64 = r.iter().map(|v| v * v).sum();
            if rs_new.sqrt() / norm_b <= tol {
                break;
            }
            let beta = rs_new / rs;
            rs = rs_new;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
        }
    }
}

/// Gradient-domain compositing of `source` into `target` over `region`.
pub fn poisson_blend(
    target: &Volume3,
    source: &Volume3,
    region: &MaskVolume,
    cfg: &BlendConfig,
) -> Result<(Volume3, BlendReport)> {
    if target.shape() != source.shape() || target.shape() != region.shape() {
        return Err(Error::ShapeMismatch(format!(
            "target {:?}, source {:?}, region {:?} must share a shape",
            target.shape(),
            source.shape(),
            region.shape()
        )));
    }
    if cfg.cg_tolerance.is_nan() || cfg.cg_tolerance <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "cg_tolerance must be positive, got {}",
            cfg.cg_tolerance
        )));
    }
    let (nx, ny, nz) = target.shape();
    let n_voxels = nx * ny * nz;

    // local index per region voxel, -1 elsewhere
    let mut local = vec![-1i64; n_voxels];
    let mut cells: Vec<(usize, usize, usize)> = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if region.get(i, j, k) {
                    if i == 0 || j == 0 || k == 0 || i == nx - 1 || j == ny - 1 || k == nz - 1 {
                        return Err(Error::InvalidInput(format!(
                            "region voxel ({i}, {j}, {k}) touches the volume boundary"
                        )));
                    }
                    local[i + nx * (j + ny * k)] = cells.len() as i64;
                    cells.push((i, j, k));
                }
            }
        }
    }
    let n = cells.len();
    if n == 0 {
        return Ok((
            target.clone(),
            BlendReport {
                iterations: 0,
                relative_residual: 0.0,
                region_voxels: 0,
            },
        ));
    }

    let lin = |i: usize, j: usize, k: usize| i + nx * (j + ny * k);
    let neighbors = |(i, j, k): (usize, usize, usize)| {
        [
            (i - 1, j, k),
            (i + 1, j, k),
            (i, j - 1, k),
            (i, j + 1, k),
            (i, j, k - 1),
            (i, j, k + 1),
        ]
    };

    // right-hand side: source Laplacian plus Dirichlet contributions
    let s = source.data();
    let t = target.data();
    let mut b = vec![0.0f64; n];
    for (row, &cell) in cells.iter().enumerate() {
        let (i, j, k) = cell;
        let mut val = 6.0 * s[lin(i, j, k)];
        for (ni, nj, nk) in neighbors(cell) {
            let nl = lin(ni, nj, nk);
            val -= s[nl];
            if local[nl] < 0 {
                val += t[nl];
            }
        }
        b[row] = val;
    }

    let apply_a = |x: &[f64], out: &mut [f64]| {
        for (row, &cell) in cells.iter().enumerate() {
            let mut acc = 6.0 * x[row];
            for (ni, nj, nk) in neighbors(cell) {
                let nl = local[lin(ni, nj, nk)];
                if nl >= 0 {
                    acc -= x[nl as usize];
                }
            }
            out[row] = acc;
        }
    };

    let x0: Vec<f64> = cells.iter().map(|&(i, j, k)| s[lin(i, j, k)]).collect();
    let max_iters = cfg
        .cg_max_iters
        .unwrap_or_else(|| 10 * (n as f64).sqrt() as usize + 1000);
    let (x, iterations, residual, converged) =
        conjugate_gradient(apply_a, &b, x0, cfg.cg_tolerance, max_iters, |_| {});
    if !converged {
        return Err(Error::Solver(format!(
            "conjugate gradient did not reach {} within {} iterations (relative residual {:.3e})",
            cfg.cg_tolerance, max_iters, residual
        )));
    }

    let mut out = target.clone();
    for (row, &(i, j, k)) in cells.iter().enumerate() {
        let idx = out.index(i, j, k);
        out.data_mut()[idx] = x[row];
    }
    Ok((
        out,
        BlendReport {
            iterations,
            relative_residual: residual,
            region_voxels: n,
        },
    ))
}

/// Quantile-mapping controls for [`histogram_match`].
#[derive(Debug, Clone)]
pub struct MatchConfig {
    /// Histogram resolution of the binned mapping.
    pub bins: usize,
    /// Use exact empirical quantiles instead of binned CDFs
    /// (memory-heavier; intended for small volumes).
    pub exact: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            bins: 256,
            exact: false,
        }
    }
}

/// Maps the non-black intensity distribution of `generated` onto the
/// reference's. Shapes may differ; only distributions matter. Voxels at
/// or below `black_threshold` pass through unchanged.
pub fn histogram_match(
    generated: &Volume3,
    reference: &Volume3,
    black_threshold: f64,
    cfg: &MatchConfig,
) -> Result<Volume3> {
    if cfg.bins < 2 {
        return Err(Error::InvalidInput(format!(
            "histogram needs at least 2 bins, got {}",
            cfg.bins
        )));
    }
    let g_vals: Vec<f64> = generated
        .data()
        .iter()
        .copied()
        .filter(|&v| v > black_threshold)
        .collect();
    let r_vals: Vec<f64> = reference
        .data()
        .iter()
        .copied()
        .filter(|&v| v > black_threshold)
        .collect();
    if g_vals.len() < 2 || r_vals.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "histogram matching needs at least 2 non-black voxels in each input \
             (generated has {}, reference has {})",
            g_vals.len(),
            r_vals.len()
        )));
    }

    let map: Box<dyn Fn(f64) -> f64> = if cfg.exact {
        Box::new(exact_quantile_map(g_vals, r_vals))
    } else {
        Box::new(binned_quantile_map(&g_vals, &r_vals, cfg.bins))
    };

    let mut out = generated.clone();
    for v in out.data_mut() {
        if *v > black_threshold {
            *v = map(*v);
        }
    }
    Ok(out)
}

/// Midrank empirical CDF composed with the inverse empirical reference CDF.
fn exact_quantile_map(mut g: Vec<f64>, mut r: Vec<f64>) -> impl Fn(f64) -> f64 {
    g.sort_by(|a, b| a.partial_cmp(b).unwrap());
    r.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = g.len() as f64;
    let m = r.len();
    move |v: f64| {
        let below = g.partition_point(|&x| x < v) as f64;
        let at_or_below = g.partition_point(|&x| x <= v) as f64;
        let p = 0.5 * (below + at_or_below) / n;
        // reference order statistic at plotting position (i - 0.5)/m
        let pos = (p * m as f64 - 0.5).clamp(0.0, (m - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        r[lo] + frac * (r[hi] - r[lo])
    }
}

/// Piecewise-linear binned CDF of `g` composed with the piecewise-linear
/// inverse CDF of `r`. Endpoints snap exactly: the generated minimum maps
/// to the reference minimum and the maximum to the maximum.
fn binned_quantile_map(g: &[f64], r: &[f64], bins: usize) -> impl Fn(f64) -> f64 {
    let (g_min, g_max) = min_max(g);
    let (r_min, r_max) = min_max(r);
    let r_hist = Histogram::build(r, r_min, r_max, bins);
    let g_hist = if g_min < g_max {
        Some(Histogram::build(g, g_min, g_max, bins))
    } else {
        None
    };
    move |v: f64| {
        let Some(gh) = &g_hist else {
            // a single generated intensity level: send it to the
            // reference median
            return r_hist.quantile(0.5, r_min, r_max);
        };
        if v <= g_min {
            return r_min;
        }
        if v >= g_max {
            return r_max;
        }
        let p = gh.cdf(v);
        if p <= 0.0 {
            r_min
        } else if p >= 1.0 {
            r_max
        } else {
            r_hist.quantile(p, r_min, r_max)
        }
    }
}

fn min_max(vals: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

struct Histogram {
    counts: Vec<f64>,
    total: f64,
    lo: f64,
    width: f64,
}

/// Mass added to every bin. Keeps the piecewise-linear CDF strictly
/// increasing across empty bins, so the quantile inversion is exact at
/// bin edges (in particular, matching a distribution onto itself is the
/// identity up to bin resolution). Negligible against real counts.
const BIN_SMOOTHING: f64 = 1e-9;

impl Histogram {
    fn build(vals: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![BIN_SMOOTHING; bins];
        for &v in vals {
            let b = if width > 0.0 {
                (((v - lo) / width) as usize).min(bins - 1)
            } else {
                0
            };
            counts[b] += 1.0;
        }
        Self {
            counts,
            total: vals.len() as f64 + BIN_SMOOTHING * bins as f64,
            lo,
            width,
        }
    }

    /// Piecewise-linear CDF at `v` (assumes lo < v < hi).
    fn cdf(&self, v: f64) -> f64 {
        let bins = self.counts.len();
        let b = (((v - self.lo) / self.width) as usize).min(bins - 1);
        let frac = ((v - (self.lo + b as f64 * self.width)) / self.width).clamp(0.0, 1.0);
        let before: f64 = self.counts[..b].iter().sum();
        (before + frac * self.counts[b]) / self.total
    }

    /// Piecewise-linear inverse CDF: the smallest x with CDF(x) >= p.
    fn quantile(&self, p: f64, lo: f64, hi: f64) -> f64 {
        let target = p * self.total;
        let mut before = 0.0;
        for (b, &c) in self.counts.iter().enumerate() {
            if before + c >= target {
                let frac = ((target - before) / c).clamp(0.0, 1.0);
                return self.lo + (b as f64 + frac) * self.width;
            }
            before += c;
        }
        // p at or beyond the top of the distribution
        if p <= 0.0 {
            lo
        } else {
            hi
        }
    }
}
