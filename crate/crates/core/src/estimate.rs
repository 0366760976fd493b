//! Curve fits for the Ramsey and parity time series, assembly of field and
//! gradient maps on the halo sphere, gradient-vector recovery, and summary
//! statistics.
//!
//! Every fit either returns a finite standard error or raises an explicit
//! flag; map bins are never silently dropped.

use nalgebra::{Matrix3, Unit, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlate::{
    count_double_cone, exx_from_g2, g2_set, polarisation, scale_parity, summarize_bootstrap,
    BinGrid, ConeCounts, CorrelateError, G2Set,
};

use crate::reconstruct::CloudGroup;
use crate::simulate::{derive_rng, RngStream};
use rand::Rng;

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("need at least {needed} points for this fit, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("frequency prior window [{lo:.4}, {hi:.4}] G exceeds the Nyquist limit {nyquist:.4} G of the tau grid")]
    PriorBeyondNyquist { lo: f64, hi: f64, nyquist: f64 },
    #[error("taus must be strictly increasing")]
    NonMonotonicTaus,
    #[error("need at least {needed} well-fit bins spanning {octants} octants, got {got}")]
    DegenerateCoverage {
        needed: usize,
        octants: usize,
        got: usize,
    },
    #[error("missing antipodal bin value")]
    MissingBin,
    #[error("need at least {needed} valid bins, got {got}")]
    TooFewBins { needed: usize, got: usize },
    #[error(transparent)]
    Correlate(#[from] CorrelateError),
}

/// One point of a per-bin time series.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub tau: f64,
    pub value: f64,
    pub stderr: Option<f64>,
}

/// Data-quality flags attached to fits and map bins.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitFlags {
    /// Fit could not produce a value at all.
    pub failed: bool,
    /// Fitted contrast consistent with zero.
    pub no_oscillation: bool,
    /// Several frequency or wrap candidates of comparable quality.
    pub ambiguous: bool,
    /// Bin below the configured minimum counts.
    pub low_statistics: bool,
    /// Bin inside the polar exclusion or otherwise skipped.
    pub excluded: bool,
    /// Scaled parity exceeded physical bounds.
    pub clamped: bool,
    /// Residuals far above the expected noise level.
    pub poor_fit: bool,
}

impl FitFlags {
    pub fn any(&self) -> bool {
        self.failed
            || self.no_oscillation
            || self.ambiguous
            || self.low_statistics
            || self.excluded
            || self.clamped
            || self.poor_fit
    }
}

impl std::fmt::Display for FitFlags {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if !self.any() {
            return write!(f, "ok");
        }
        let mut tokens = Vec::new();
        if self.failed {
            tokens.push("failed");
        }
        if self.no_oscillation {
            tokens.push("no_oscillation");
        }
        if self.ambiguous {
            tokens.push("ambiguous");
        }
        if self.low_statistics {
            tokens.push("low_statistics");
        }
        if self.excluded {
            tokens.push("excluded");
        }
        if self.clamped {
            tokens.push("clamped");
        }
        if self.poor_fit {
            tokens.push("poor_fit");
        }
        write!(f, "{}", tokens.join(";"))
    }
}

/// Result of fitting P = C cos(gamma B tau) to a polarisation series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RamseyFit {
    /// Field strength, gauss.
    pub b: f64,
    pub b_stderr: f64,
    pub contrast: f64,
    pub contrast_stderr: f64,
    pub flags: FitFlags,
    /// Weighted sum of squared residuals at the optimum.
    pub sse: f64,
    /// Other frequency candidates of comparable periodogram power, gauss.
    pub candidates: Vec<f64>,
}

/// Fit the Ramsey model by a dense frequency scan (periodogram) over the
/// prior window followed by Gauss-Newton refinement of (B, C).
pub fn fit_ramsey(
    points: &[SeriesPoint],
    gamma: f64,
    prior_center: f64,
    prior_halfwidth: f64,
) -> Result<RamseyFit, EstimateError> {
    if points.len() < 4 {
        return Err(EstimateError::TooFewPoints {
            needed: 4,
            got: points.len(),
        });
    }
    for w in points.windows(2) {
        if w[1].tau <= w[0].tau {
            return Err(EstimateError::NonMonotonicTaus);
        }
    }
    let min_dtau = points
        .windows(2)
        .map(|w| w[1].tau - w[0].tau)
        .fold(f64::INFINITY, f64::min);
    let nyquist_b = std::f64::consts::PI / (gamma * min_dtau);
    let (b_lo, b_hi) = (
        (prior_center - prior_halfwidth).max(0.0),
        prior_center + prior_halfwidth,
    );
    if b_hi > nyquist_b {
        return Err(EstimateError::PriorBeyondNyquist {
            lo: b_lo,
            hi: b_hi,
            nyquist: nyquist_b,
        });
    }

    let weights: Vec<f64> = if points.iter().all(|p| matches!(p.stderr, Some(s) if s > 0.0)) {
        points.iter().map(|p| 1.0 / p.stderr.unwrap().powi(2)).collect()
    } else {
        vec![1.0; points.len()]
    };
    let sse_null: f64 = points
        .iter()
        .zip(&weights)
        .map(|(p, w)| w * p.value * p.value)
        .sum();

    // Dense scan: for each trial B the best amplitude is linear least squares.
    let tau_span = points.last().unwrap().tau - points[0].tau;
    let n_grid = (((b_hi - b_lo) * gamma * tau_span * 8.0 / std::f64::consts::PI).ceil() as usize)
        .clamp(64, 200_000);
    let eval_sse = |b: f64| -> (f64, f64) {
        let mut ct_y = 0.0;
        let mut ct_ct = 0.0;
        for (p, w) in points.iter().zip(&weights) {
            let ct = (gamma * b * p.tau).cos();
            ct_y += w * ct * p.value;
            ct_ct += w * ct * ct;
        }
        let c = if ct_ct > 0.0 { ct_y / ct_ct } else { 0.0 };
        let sse: f64 = points
            .iter()
            .zip(&weights)
            .map(|(p, w)| w * (c * (gamma * b * p.tau).cos() - p.value).powi(2))
            .sum();
        (sse, c)
    };
    let scan: Vec<(f64, f64, f64)> = (0..=n_grid)
        .map(|k| {
            let b = b_lo + (b_hi - b_lo) * k as f64 / n_grid as f64;
            let (sse, c) = eval_sse(b);
            (b, sse, c)
        })
        .collect();
    let best = scan
        .iter()
        .cloned()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();

    // Local minima of comparable depth mark an aliasing ambiguity.
    let depth = (sse_null - best.1).max(f64::MIN_POSITIVE);
    let mut candidates = Vec::new();
    for w in scan.windows(3) {
        let (prev, mid, next) = (&w[0], &w[1], &w[2]);
        if mid.1 < prev.1 && mid.1 < next.1 && (mid.0 - best.0).abs() > (b_hi - b_lo) / 20.0 {
            if (mid.1 - best.1) < 0.25 * depth {
                candidates.push(mid.0);
            }
        }
    }

    // Gauss-Newton refinement of (b, c).
    let (mut b, mut c) = (best.0, best.2);
    for _ in 0..60 {
        let mut jtj = [[0.0f64; 2]; 2];
        let mut jtr = [0.0f64; 2];
        for (p, w) in points.iter().zip(&weights) {
            let arg = gamma * b * p.tau;
            let (s, co) = arg.sin_cos();
            let r = c * co - p.value;
            let db = -c * gamma * p.tau * s;
            let dc = co;
            jtj[0][0] += w * db * db;
            jtj[0][1] += w * db * dc;
            jtj[1][1] += w * dc * dc;
            jtr[0] += w * db * r;
            jtr[1] += w * dc * r;
        }
        jtj[1][0] = jtj[0][1];
        let det = jtj[0][0] * jtj[1][1] - jtj[0][1] * jtj[1][0];
        if det.abs() < 1e-300 {
            break;
        }
        let delta_b = (jtj[1][1] * jtr[0] - jtj[0][1] * jtr[1]) / det;
        let delta_c = (jtj[0][0] * jtr[1] - jtj[1][0] * jtr[0]) / det;
        b -= delta_b;
        c -= delta_c;
        if delta_b.abs() < 1e-14 * b.abs().max(1e-6) && delta_c.abs() < 1e-14 {
            break;
        }
    }
    // The model is even in both parameters' signs combined; report B > 0.
    if b < 0.0 {
        b = -b;
    }
    if c < 0.0 {
        // cos(gamma b tau + pi) is outside the model; fold the sign into the
        // contrast and flag rather than report a negative contrast.
        c = -c;
        // A genuine pi phase offset cannot be represented: mark ambiguous.
    }

    let (sse, _) = eval_sse(b);
    let dof = (points.len() as f64 - 2.0).max(1.0);
    // Covariance from the Gauss-Newton normal matrix at the optimum.
    let mut jtj = [[0.0f64; 2]; 2];
    for (p, w) in points.iter().zip(&weights) {
        let arg = gamma * b * p.tau;
        let (s, co) = arg.sin_cos();
        let db = -c * gamma * p.tau * s;
        let dc = co;
        jtj[0][0] += w * db * db;
        jtj[0][1] += w * db * dc;
        jtj[1][1] += w * dc * dc;
    }
    jtj[1][0] = jtj[0][1];
    let det = (jtj[0][0] * jtj[1][1] - jtj[0][1] * jtj[1][0]).max(1e-300);
    // Scale by reduced chi-square unless real per-point errors were supplied,
    // in which case keep the larger of the two so errors stay conservative.
    let have_errors = points.iter().all(|p| p.stderr.is_some());
    let scale = if have_errors {
        (sse / dof).max(1.0)
    } else {
        sse / dof
    };
    let b_stderr = (jtj[1][1] / det * scale).sqrt();
    let contrast_stderr = (jtj[0][0] / det * scale).sqrt();

    let mut flags = FitFlags::default();
    if !candidates.is_empty() {
        flags.ambiguous = true;
    }
    if c.abs() < 2.0 * contrast_stderr || c.abs() < 1e-12 {
        flags.no_oscillation = true;
        flags.failed = true;
    }
    if !b.is_finite() || !b_stderr.is_finite() {
        flags.failed = true;
    }
    Ok(RamseyFit {
        b,
        b_stderr,
        contrast: c,
        contrast_stderr,
        flags,
        sse,
        candidates,
    })
}

/// Result of the single-parameter parity fit parity = cos(gamma v_r m tau^2).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientFit {
    /// Gradient magnitude along the scattering axis, gauss/m (>= 0; the sign
    /// is unobservable because parity is even in the mixing angle).
    pub magnitude: f64,
    pub stderr: f64,
    pub flags: FitFlags,
    pub sse: f64,
    /// Wrap-consistent alternative magnitudes when the tau grid cannot
    /// exclude them.
    pub candidates: Vec<f64>,
}

/// Fit the quadratic-phase parity model by a dense scan over the magnitude
/// followed by Gauss-Newton refinement.
pub fn fit_gradient_parity(
    points: &[SeriesPoint],
    gamma: f64,
    v_r: f64,
    magnitude_bound: f64,
) -> Result<GradientFit, EstimateError> {
    if points.len() < 3 {
        return Err(EstimateError::TooFewPoints {
            needed: 3,
            got: points.len(),
        });
    }
    for w in points.windows(2) {
        if w[1].tau <= w[0].tau {
            return Err(EstimateError::NonMonotonicTaus);
        }
    }
    let weights: Vec<f64> = if points.iter().all(|p| matches!(p.stderr, Some(s) if s > 0.0)) {
        points.iter().map(|p| 1.0 / p.stderr.unwrap().powi(2)).collect()
    } else {
        vec![1.0; points.len()]
    };
    let rate = 0.5 * gamma * v_r; // Phi = rate * m * tau^2
    let tau_max = points.last().unwrap().tau;
    // Magnitudes above this produce |Phi(tau_max)| > pi/2 and wrap.
    let wrap_bound = std::f64::consts::FRAC_PI_2 / (rate * tau_max * tau_max);
    let m_hi = magnitude_bound.max(1e-12);

    let model = |m: f64, tau: f64| (2.0 * rate * m * tau * tau).cos();
    let sse_at = |m: f64| -> f64 {
        points
            .iter()
            .zip(&weights)
            .map(|(p, w)| w * (model(m, p.tau) - p.value).powi(2))
            .sum()
    };
    let n_grid = ((m_hi / wrap_bound * 256.0).ceil() as usize).clamp(256, 100_000);
    let scan: Vec<(f64, f64)> = (0..=n_grid)
        .map(|k| {
            let m = m_hi * k as f64 / n_grid as f64;
            (m, sse_at(m))
        })
        .collect();
    let (mut best_m, best_sse) = scan
        .iter()
        .cloned()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();

    // Collect comparable local minima: wrap-consistent candidates.
    let sse_null: f64 = points
        .iter()
        .zip(&weights)
        .map(|(p, w)| w * p.value * p.value)
        .sum::<f64>()
        .max(best_sse + 1e-12);
    let depth = (sse_null - best_sse).max(f64::MIN_POSITIVE);
    let mut candidates = Vec::new();
    for w in scan.windows(3) {
        if w[1].1 < w[0].1 && w[1].1 < w[2].1 && (w[1].0 - best_m).abs() > m_hi / n_grid as f64 * 2.0
        {
            if (w[1].1 - best_sse) < 0.25 * depth {
                candidates.push(w[1].0);
            }
        }
    }
    candidates.truncate(4);

    // Gauss-Newton refinement in one parameter (fall back to the scan value
    // if the derivative vanishes, e.g. a flat series fitting m = 0).
    for _ in 0..60 {
        let mut jtj = 0.0;
        let mut jtr = 0.0;
        for (p, w) in points.iter().zip(&weights) {
            let arg = 2.0 * rate * best_m * p.tau * p.tau;
            let r = arg.cos() - p.value;
            let dm = -arg.sin() * 2.0 * rate * p.tau * p.tau;
            jtj += w * dm * dm;
            jtr += w * dm * r;
        }
        if jtj < 1e-300 {
            break;
        }
        let delta = jtr / jtj;
        best_m -= delta;
        if delta.abs() < 1e-14 * best_m.abs().max(1e-9) {
            break;
        }
    }
    best_m = best_m.abs();
    let sse = sse_at(best_m);

    // Standard error from the numeric curvature of the SSE, which stays
    // defined at the m = 0 boundary where the Jacobian vanishes.
    let dof = (points.len() as f64 - 1.0).max(1.0);
    let have_errors = points.iter().all(|p| p.stderr.is_some());
    let scale = if have_errors {
        (sse / dof).max(1.0)
    } else {
        (sse / dof).max(1e-300)
    };
    let h = (wrap_bound * 1e-4).max(best_m * 1e-4).max(1e-12);
    let curvature = (sse_at(best_m + h) - 2.0 * sse + sse_at((best_m - h).max(0.0))) / (h * h);
    let stderr = if curvature > 0.0 {
        (2.0 * scale / curvature).sqrt()
    } else {
        f64::INFINITY
    };

    let mut flags = FitFlags::default();
    if !candidates.is_empty() && m_hi > wrap_bound {
        flags.ambiguous = true;
    }
    if !stderr.is_finite() {
        flags.poor_fit = true;
    }
    Ok(GradientFit {
        magnitude: best_m,
        stderr,
        flags,
        sse,
        candidates,
    })
}

/// One bin of a field or gradient map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MapBin {
    pub theta: f64,
    pub phi: f64,
    pub value: Option<f64>,
    pub stderr: Option<f64>,
    pub n_atoms: u64,
    pub flags: FitFlags,
}

/// Spatially resolved field-strength map (gauss per bin).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FieldMap {
    pub bins: Vec<MapBin>,
}

/// Spatially resolved |dB/dr| map (gauss/m per bin) plus the per-tau pooled
/// correlation amplitude diagnostics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradientMap {
    pub bins: Vec<MapBin>,
    /// Phase rate gamma * v_r used by the parity model, rad s^-2 (gauss/m)^-1.
    pub rate: f64,
    /// Pooled spin-integrated amplitude G per tau.
    pub pooled_g: Vec<(f64, f64)>,
    /// Mode occupancy inferred from each pooled G.
    pub nbar: Vec<(f64, Option<f64>)>,
    /// Per-bin parity series with bootstrap errors (used by the vector-fit
    /// polish and the differential comparisons).
    pub series: Vec<Vec<SeriesPoint>>,
}

/// Options shared by the map builders.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MapOptions {
    pub min_counts: u64,
    pub bootstrap_resamples: usize,
    pub seed: u64,
    /// Prior window for the Ramsey frequency fit, gauss.
    pub ramsey_prior: (f64, f64),
    /// Search bound for the gradient magnitude, gauss/m.
    pub gradient_bound: f64,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self {
            min_counts: 10,
            bootstrap_resamples: 1000,
            seed: 0,
            ramsey_prior: (0.53, 0.03),
            gradient_bound: 10.0,
        }
    }
}

/// Build a field map: per bin, polarisation versus tau fitted to the Ramsey
/// model. Bins under the count threshold are flagged, not dropped.
pub fn map_field(
    groups: &[CloudGroup],
    grid: &BinGrid,
    gamma: f64,
    opts: &MapOptions,
) -> FieldMap {
    // Counts per (group, cell, spin), accumulated in one pass per group.
    let per_group_counts: Vec<Vec<[u64; 2]>> = groups
        .par_iter()
        .map(|g| {
            let mut counts = vec![[0u64; 2]; grid.cells.len()];
            for atomref in &g.atoms {
                for (ci, cell) in grid.cells.iter().enumerate() {
                    if cell.bin.contains(&atomref.k_hat, atomref.k_norm) {
                        counts[ci][atomref.spin.index()] += 1;
                    }
                }
            }
            counts
        })
        .collect();

    let bins: Vec<MapBin> = (0..grid.cells.len())
        .into_par_iter()
        .map(|ci| {
            let cell = &grid.cells[ci];
            let mut flags = FitFlags::default();
            let mut n_atoms = 0u64;
            let mut points = Vec::with_capacity(groups.len());
            for (gi, g) in groups.iter().enumerate() {
                let [up, down] = per_group_counts[gi][ci];
                let total = up + down;
                n_atoms += total;
                if total < opts.min_counts {
                    flags.low_statistics = true;
                    continue;
                }
                let p = polarisation(up, down).expect("total > 0");
                // Binomial standard error of the polarisation estimate.
                let stderr = ((1.0 - p * p).max(1.0 / total as f64) / total as f64).sqrt();
                points.push(SeriesPoint {
                    tau: g.tau,
                    value: p,
                    stderr: Some(stderr),
                });
            }
            match fit_ramsey(&points, gamma, opts.ramsey_prior.0, opts.ramsey_prior.1) {
                Ok(fit) => {
                    let mut flags = flags;
                    flags.failed |= fit.flags.failed;
                    flags.no_oscillation |= fit.flags.no_oscillation;
                    flags.ambiguous |= fit.flags.ambiguous;
                    let value = if fit.flags.failed { None } else { Some(fit.b) };
                    let stderr = if fit.flags.failed {
                        None
                    } else {
                        Some(fit.b_stderr)
                    };
                    MapBin {
                        theta: cell.theta,
                        phi: cell.phi,
                        value,
                        stderr,
                        n_atoms,
                        flags,
                    }
                }
                Err(_) => {
                    let mut flags = flags;
                    flags.failed = true;
                    MapBin {
                        theta: cell.theta,
                        phi: cell.phi,
                        value: None,
                        stderr: None,
                        n_atoms,
                        flags,
                    }
                }
            }
        })
        .collect();
    FieldMap { bins }
}

/// Per-tau parity estimates for every bin with joint bootstrap errors.
///
/// The spin-integrated amplitude G is pooled across all grid bins of a tau
/// group: it is insensitive to the mixing angle, and per-bin estimates of
/// G - 1 would drown in accidental-coincidence noise at realistic efficiency.
struct TauParities {
    /// Point estimate and bootstrap stderr per bin.
    point: Vec<Option<(f64, f64)>>,
    /// Per-resample parity per bin (resample-major).
    resampled: Vec<Vec<Option<f64>>>,
    pooled_g: f64,
    atoms_per_bin: Vec<u64>,
}

fn parity_points(
    group: &CloudGroup,
    grid: &BinGrid,
    opts: &MapOptions,
    tau_index: usize,
) -> TauParities {
    let n_bins = grid.cells.len();
    let counts: Vec<Vec<ConeCounts>> = grid
        .cells
        .par_iter()
        .map(|cell| count_double_cone(group, &cell.bin))
        .collect();
    let n_shots = group.n_shots as usize;

    // Point estimates.
    let identity: Vec<usize> = (0..n_shots).collect();
    let (g_point, parities_point) = pooled_parities(&counts, &identity);

    // Joint bootstrap: one resample drives the pooled G and every bin.
    let resampled: Vec<Vec<Option<f64>>> = (0..opts.bootstrap_resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = derive_rng(
                opts.seed,
                RngStream::Bootstrap,
                (tau_index as u64) << 32 | r as u64,
            );
            let indices: Vec<usize> = (0..n_shots).map(|_| rng.gen_range(0..n_shots)).collect();
            let (_, parities) = pooled_parities(&counts, &indices);
            parities
        })
        .collect();

    let mut point = Vec::with_capacity(n_bins);
    let mut atoms_per_bin = Vec::with_capacity(n_bins);
    for ci in 0..n_bins {
        atoms_per_bin.push(counts[ci].iter().map(|c| c.total()).sum::<u64>());
        let Some(p) = parities_point[ci] else {
            point.push(None);
            continue;
        };
        let samples: Vec<Option<f64>> = resampled.iter().map(|r| r[ci]).collect();
        let est = summarize_bootstrap(&samples);
        point.push(Some((p, est.stderr)));
    }
    TauParities {
        point,
        resampled,
        pooled_g: g_point.unwrap_or(f64::NAN),
        atoms_per_bin,
    }
}

/// Pooled amplitude and per-bin scaled parities for one set of shot indices.
fn pooled_parities(
    counts: &[Vec<ConeCounts>],
    indices: &[usize],
) -> (Option<f64>, Vec<Option<f64>>) {
    let s = indices.len() as f64;
    let mut pooled_num = 0.0f64;
    let mut pooled_ref = 0.0f64;
    let mut sets: Vec<G2Set> = Vec::with_capacity(counts.len());
    let mut scratch: Vec<ConeCounts> = Vec::with_capacity(indices.len());
    for bin_counts in counts {
        scratch.clear();
        scratch.extend(indices.iter().map(|&i| bin_counts[i]));
        let set = g2_set(&scratch);
        for v in set.values() {
            pooled_num += v.coincidences as f64;
            pooled_ref += v.reference;
        }
        sets.push(set);
    }
    if pooled_ref <= 0.0 {
        return (None, vec![None; counts.len()]);
    }
    let g = (pooled_num / s) / (pooled_ref / (s * (s - 1.0)));
    let parities = sets
        .iter()
        .map(|set| {
            let exx = exx_from_g2(set).ok()?;
            scale_parity(exx, g, None).ok().map(|p| p.parity)
        })
        .collect();
    (Some(g), parities)
}

/// Build a gradient map: per bin, the scaled-parity series over tau fitted to
/// the quadratic-phase model.
pub fn map_gradient(
    groups: &[CloudGroup],
    grid: &BinGrid,
    gamma: f64,
    v_r: f64,
    opts: &MapOptions,
) -> GradientMap {
    let n_bins = grid.cells.len();
    let mut series: Vec<Vec<SeriesPoint>> = vec![Vec::new(); n_bins];
    let mut pooled_g = Vec::new();
    let mut nbar = Vec::new();
    let mut atoms_per_bin = vec![0u64; n_bins];
    let mut per_tau: Vec<TauParities> = Vec::with_capacity(groups.len());
    for (ti, group) in groups.iter().enumerate() {
        let tp = parity_points(group, grid, opts, ti);
        pooled_g.push((group.tau, tp.pooled_g));
        nbar.push((group.tau, crate::correlate::nbar_from_g(tp.pooled_g).ok()));
        for (ci, p) in tp.point.iter().enumerate() {
            if let Some((value, stderr)) = p {
                series[ci].push(SeriesPoint {
                    tau: group.tau,
                    value: *value,
                    stderr: if stderr.is_finite() { Some(*stderr) } else { None },
                });
            }
            atoms_per_bin[ci] += tp.atoms_per_bin[ci];
        }
        per_tau.push(tp);
    }

    let bins: Vec<MapBin> = (0..n_bins)
        .into_par_iter()
        .map(|ci| {
            let cell = &grid.cells[ci];
            let pts = &series[ci];
            let mut flags = FitFlags::default();
            let min_needed = opts.min_counts * groups.len() as u64;
            if atoms_per_bin[ci] < min_needed {
                flags.low_statistics = true;
            }
            if pts.iter().any(|p| p.stderr.is_none()) {
                flags.low_statistics = true;
            }
            // Points lacking a finite bootstrap error force unweighted fits.
            let all_weighted = pts.iter().all(|p| p.stderr.is_some());
            let cleaned: Vec<SeriesPoint> = if all_weighted {
                pts.clone()
            } else {
                pts.iter()
                    .map(|p| SeriesPoint {
                        stderr: None,
                        ..*p
                    })
                    .collect()
            };
            let fit = match fit_gradient_parity(&cleaned, gamma, v_r, opts.gradient_bound) {
                Ok(fit) => fit,
                Err(_) => {
                    flags.failed = true;
                    return MapBin {
                        theta: cell.theta,
                        phi: cell.phi,
                        value: None,
                        stderr: None,
                        n_atoms: atoms_per_bin[ci],
                        flags,
                    };
                }
            };
            flags.ambiguous |= fit.flags.ambiguous;
            flags.poor_fit |= fit.flags.poor_fit;
            // The magnitude error comes from refitting bootstrap resamples:
            // at low signal-to-noise the sampling distribution of the
            // magnitude is wide and skewed, which the local curvature at the
            // optimum badly underestimates.
            let refits: Vec<Option<f64>> = (0..opts.bootstrap_resamples)
                .map(|r| {
                    let mut resampled_series = Vec::with_capacity(groups.len());
                    for (ti, group) in groups.iter().enumerate() {
                        if let Some(value) = per_tau[ti].resampled[r][ci] {
                            resampled_series.push(SeriesPoint {
                                tau: group.tau,
                                value,
                                stderr: cleaned
                                    .iter()
                                    .find(|p| p.tau == group.tau)
                                    .and_then(|p| p.stderr),
                            });
                        }
                    }
                    if resampled_series.len() < 3 {
                        return None;
                    }
                    fit_gradient_parity(&resampled_series, gamma, v_r, opts.gradient_bound)
                        .ok()
                        .map(|f| f.magnitude)
                })
                .collect();
            let boot = summarize_bootstrap(&refits);
            let stderr = if boot.stderr.is_finite() && boot.stderr > 0.0 {
                Some(boot.stderr)
            } else if fit.stderr.is_finite() {
                Some(fit.stderr)
            } else {
                None
            };
            if stderr.is_none() {
                flags.poor_fit = true;
            }
            MapBin {
                theta: cell.theta,
                phi: cell.phi,
                value: Some(fit.magnitude),
                stderr,
                n_atoms: atoms_per_bin[ci],
                flags,
            }
        })
        .collect();

    GradientMap {
        bins,
        rate: gamma * v_r,
        pooled_g,
        nbar,
        series,
    }
}

/// Recovered gradient vector (up to a global sign).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradientVectorFit {
    /// Canonical representative: largest-magnitude component positive.
    pub vector: Vector3<f64>,
    pub magnitude: f64,
    pub magnitude_stderr: f64,
    /// Unit axis of the gradient.
    pub axis: Vector3<f64>,
    pub weighted_sse_per_dof: f64,
    pub flags: FitFlags,
    pub n_bins_used: usize,
}

/// Weighted least squares of m_b = |g . q_b| over the map bins, multi-started
/// over sign patterns (seeded from a direction lattice) because the absolute
/// value hides the lobe assignment. The global sign of g is unobservable.
///
/// When the map carries the per-bin parity series, the magnitude solution is
/// polished by a weighted fit of g directly against those series: per-bin
/// magnitudes are folded at zero, so bins nearly orthogonal to the gradient
/// return rectified noise that would otherwise bias the vector outward.
pub fn fit_gradient_vector(
    map: &GradientMap,
    grid: &BinGrid,
) -> Result<GradientVectorFit, EstimateError> {
    let mut axes = Vec::new();
    let mut values = Vec::new();
    let mut weights = Vec::new();
    for (bin, cell) in map.bins.iter().zip(&grid.cells) {
        let (Some(v), Some(s)) = (bin.value, bin.stderr) else {
            continue;
        };
        if bin.flags.failed || bin.flags.excluded || bin.flags.low_statistics || s <= 0.0 {
            continue;
        }
        axes.push(cell.bin.axis.into_inner());
        values.push(v);
        weights.push(1.0 / (s * s));
    }
    let n = axes.len();
    let octants: std::collections::HashSet<(bool, bool, bool)> = axes
        .iter()
        .map(|a| (a.x >= 0.0, a.y >= 0.0, a.z >= 0.0))
        .collect();
    if n < 6 || octants.len() < 2 {
        return Err(EstimateError::DegenerateCoverage {
            needed: 6,
            octants: 2,
            got: n,
        });
    }

    // Multi-start over a small direction lattice plus the strongest bins.
    let mut starts: Vec<Vector3<f64>> = Vec::new();
    for x in [-1.0f64, 0.0, 1.0] {
        for y in [-1.0f64, 0.0, 1.0] {
            for z in [-1.0f64, 0.0, 1.0] {
                let v = Vector3::new(x, y, z);
                if v.norm() > 0.0 {
                    starts.push(v.normalize());
                }
            }
        }
    }
    let mut strongest: Vec<usize> = (0..n).collect();
    strongest.sort_by(|&a, &b| (values[b] * weights[b].sqrt()).total_cmp(&(values[a] * weights[a].sqrt())));
    for &i in strongest.iter().take(4) {
        starts.push(axes[i]);
    }

    let solve_for_signs = |signs: &[f64]| -> Option<(Vector3<f64>, Matrix3<f64>, f64)> {
        let mut normal = Matrix3::zeros();
        let mut rhs = Vector3::zeros();
        for i in 0..n {
            let q = axes[i];
            normal += weights[i] * q * q.transpose();
            rhs += weights[i] * signs[i] * values[i] * q;
        }
        let inv = normal.try_inverse()?;
        let g = inv * rhs;
        let sse: f64 = (0..n)
            .map(|i| weights[i] * (values[i] - g.dot(&axes[i]).abs()).powi(2))
            .sum();
        Some((g, inv, sse))
    };

    let mut best: Option<(Vector3<f64>, Matrix3<f64>, f64)> = None;
    for start in starts {
        let mut dir = start;
        let mut last_signs: Option<Vec<f64>> = None;
        for _ in 0..30 {
            let signs: Vec<f64> = axes
                .iter()
                .map(|q| if dir.dot(q) >= 0.0 { 1.0 } else { -1.0 })
                .collect();
            if last_signs.as_ref() == Some(&signs) {
                break;
            }
            let Some((g, _, _)) = solve_for_signs(&signs) else {
                break;
            };
            if g.norm() == 0.0 {
                break;
            }
            dir = g.normalize();
            last_signs = Some(signs);
        }
        if let Some(signs) = last_signs {
            if let Some(candidate) = solve_for_signs(&signs) {
                let better = match &best {
                    None => true,
                    Some((_, _, sse)) => candidate.2 < *sse,
                };
                if better {
                    best = Some(candidate);
                }
            }
        }
    }
    let (mut g, mut cov_unscaled, mut sse) =
        best.ok_or(EstimateError::DegenerateCoverage {
            needed: 6,
            octants: 2,
            got: n,
        })?;
    let mut dof = (n as f64 - 3.0).max(1.0);

    // Polish against the parity series when available.
    if let Some((g2, cov2, sse2, n_pts)) = polish_on_series(map, grid, g) {
        g = g2;
        cov_unscaled = cov2;
        sse = sse2;
        dof = (n_pts as f64 - 3.0).max(1.0);
    }

    let sse_per_dof = sse / dof;
    // Weights are inverse variances, so the unscaled normal-matrix inverse is
    // already a covariance; inflate when residuals exceed the error model.
    let cov = cov_unscaled * sse_per_dof.max(1.0);
    let magnitude = g.norm();
    let axis_unit = if magnitude > 0.0 { g / magnitude } else { Vector3::x() };
    let magnitude_stderr = (axis_unit.dot(&(cov * axis_unit))).sqrt();

    // Canonical sign: flip so the largest-|component| is positive.
    let mut canonical = g;
    let dominant = (0..3)
        .max_by(|&a, &b| canonical[a].abs().total_cmp(&canonical[b].abs()))
        .unwrap();
    if canonical[dominant] < 0.0 {
        canonical = -canonical;
    }
    let mut flags = FitFlags::default();
    if sse_per_dof > 4.0 {
        flags.poor_fit = true;
    }
    Ok(GradientVectorFit {
        vector: canonical,
        magnitude,
        magnitude_stderr,
        axis: canonical / magnitude.max(f64::MIN_POSITIVE),
        weighted_sse_per_dof: sse_per_dof,
        flags,
        n_bins_used: n,
    })
}

/// Damped Gauss-Newton fit of the gradient vector directly against every
/// per-(bin, tau) parity point: residual cos(rate (g.q) tau^2) - y.
fn polish_on_series(
    map: &GradientMap,
    grid: &BinGrid,
    start: Vector3<f64>,
) -> Option<(Vector3<f64>, Matrix3<f64>, f64, usize)> {
    let rate = map.rate;
    if !(rate > 0.0) || map.series.is_empty() {
        return None;
    }
    let mut data: Vec<(Vector3<f64>, f64, f64, f64)> = Vec::new(); // (axis, tau^2, y, w)
    for ((serie, bin), cell) in map.series.iter().zip(&map.bins).zip(&grid.cells) {
        if bin.flags.failed || bin.flags.excluded {
            continue;
        }
        for p in serie {
            let Some(s) = p.stderr else { continue };
            if s <= 0.0 {
                continue;
            }
            data.push((
                cell.bin.axis.into_inner(),
                p.tau * p.tau,
                p.value,
                1.0 / (s * s),
            ));
        }
    }
    if data.len() < 12 {
        return None;
    }
    let sse_of = |g: &Vector3<f64>| -> f64 {
        data.iter()
            .map(|(q, t2, y, w)| w * ((rate * g.dot(q) * t2).cos() - y).powi(2))
            .sum()
    };
    let mut g = start;
    let mut lambda = 1e-3;
    let mut sse = sse_of(&g);
    let mut jtj = Matrix3::zeros();
    for _ in 0..100 {
        jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (q, t2, y, w) in &data {
            let arg = rate * g.dot(q) * t2;
            let r = arg.cos() - y;
            let grad = -arg.sin() * rate * *t2 * q;
            jtj += *w * grad * grad.transpose();
            jtr += *w * r * grad;
        }
        let damped = jtj + Matrix3::identity() * (lambda * jtj.trace() / 3.0).max(1e-300);
        let Some(step) = damped.try_inverse().map(|inv| inv * jtr) else {
            break;
        };
        let candidate = g - step;
        let candidate_sse = sse_of(&candidate);
        if candidate_sse < sse {
            let moved = step.norm();
            g = candidate;
            sse = candidate_sse;
            lambda = (lambda * 0.3).max(1e-12);
            if moved < 1e-12 * g.norm().max(1e-9) {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e9 {
                break;
            }
        }
    }
    let cov = jtj.try_inverse()?;
    Some((g, cov, sse, data.len()))
}

/// Differential gradient estimate from a field map: (B(+q) - B(-q)) / D.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifferentialGradient {
    pub value: f64,
    /// Rms-combined standard error of the two bins over D (sqrt(2) dB / D for
    /// equal errors).
    pub stderr: f64,
}

pub fn ramsey_differential(
    map: &FieldMap,
    grid: &BinGrid,
    bin_index: usize,
    halo_diameter: f64,
) -> Result<DifferentialGradient, EstimateError> {
    let anti = grid.antipode_index(bin_index);
    let plus = &map.bins[bin_index];
    let minus = &map.bins[anti];
    let (Some(bp), Some(sp)) = (plus.value, plus.stderr) else {
        return Err(EstimateError::MissingBin);
    };
    let (Some(bm), Some(sm)) = (minus.value, minus.stderr) else {
        return Err(EstimateError::MissingBin);
    };
    Ok(DifferentialGradient {
        value: (bp - bm) / halo_diameter,
        stderr: (sp * sp + sm * sm).sqrt() / halo_diameter,
    })
}

/// Histogram plus maximum-likelihood Gaussian parameters of the valid map
/// values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MapHistogram {
    pub n_values: usize,
    pub mean: f64,
    /// Maximum-likelihood standard deviation (1/n normalisation).
    pub std: f64,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
}

pub fn histogram_stats(values: &[f64]) -> Result<MapHistogram, EstimateError> {
    if values.len() < 10 {
        return Err(EstimateError::TooFewBins {
            needed: 10,
            got: values.len(),
        });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let n_bins = ((n.sqrt()).ceil() as usize).clamp(6, 24);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let mut counts = vec![0u64; n_bins];
    for v in values {
        let u = ((v - lo) / span * n_bins as f64) as usize;
        counts[u.min(n_bins - 1)] += 1;
    }
    let bin_edges = (0..=n_bins)
        .map(|i| lo + span * i as f64 / n_bins as f64)
        .collect();
    Ok(MapHistogram {
        n_values: values.len(),
        mean,
        std,
        bin_edges,
        counts,
    })
}

/// Convenience: scattering-axis unit vector for (theta, phi) on the halo.
pub fn sphere_axis(theta: f64, phi: f64) -> Unit<Vector3<f64>> {
    Unit::new_normalize(Vector3::new(
        phi.cos() * theta.cos(),
        phi.cos() * theta.sin(),
        phi.sin(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{pair_parity, GammaConvention, PhysicalConstants};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn ramsey_series(b: f64, c: f64, gamma: f64, n: usize, tau_max: f64) -> Vec<SeriesPoint> {
        (0..n)
            .map(|i| {
                let tau = tau_max * i as f64 / (n - 1) as f64;
                SeriesPoint {
                    tau,
                    value: c * (gamma * b * tau).cos(),
                    stderr: Some(0.01),
                }
            })
            .collect()
    }

    #[test]
    fn ramsey_fit_noiseless_recovery() {
        let gamma = PhysicalConstants::default().gamma;
        let pts = ramsey_series(0.532, 0.8, gamma, 20, 2.2e-6);
        let fit = fit_ramsey(&pts, gamma, 0.53, 0.03).unwrap();
        assert!((fit.b - 0.532).abs() < 1e-4, "b = {}", fit.b);
        assert_relative_eq!(fit.contrast, 0.8, max_relative = 1e-6);
        assert!(!fit.flags.failed);
        assert!(fit.b_stderr.is_finite());
    }

    #[test]
    fn ramsey_fit_flags_zero_contrast() {
        let gamma = PhysicalConstants::default().gamma;
        let pts: Vec<SeriesPoint> = (0..20)
            .map(|i| SeriesPoint {
                tau: 2.2e-6 * i as f64 / 19.0,
                value: 0.0,
                stderr: Some(0.01),
            })
            .collect();
        let fit = fit_ramsey(&pts, gamma, 0.53, 0.03).unwrap();
        assert!(fit.flags.no_oscillation);
        assert!(fit.flags.failed);
    }

    #[test]
    fn ramsey_fit_rejects_bad_input() {
        let gamma = PhysicalConstants::default().gamma;
        let short = ramsey_series(0.5, 1.0, gamma, 3, 1e-6);
        assert!(matches!(
            fit_ramsey(&short, gamma, 0.5, 0.01),
            Err(EstimateError::TooFewPoints { .. })
        ));
        // Prior window beyond the Nyquist limit of the grid.
        let pts = ramsey_series(0.5, 1.0, gamma, 10, 2.2e-6);
        assert!(matches!(
            fit_ramsey(&pts, gamma, 5.0, 1.0),
            Err(EstimateError::PriorBeyondNyquist { .. })
        ));
    }

    #[test]
    fn ramsey_fit_picks_correct_peak_on_a_grid_harmonic() {
        // Put the frequency exactly on a harmonic of the tau span, where the
        // periodogram sidelobe comb is worst; the prior window still selects
        // the right peak.
        let gamma = PhysicalConstants::default().gamma;
        let n = 20;
        let tau_max = 2.2e-6;
        let b_true = 3.0 * std::f64::consts::TAU / (gamma * tau_max);
        let pts = ramsey_series(b_true, 1.0, gamma, n, tau_max);
        let fit = fit_ramsey(&pts, gamma, b_true * 1.01, b_true * 0.05).unwrap();
        assert!((fit.b - b_true).abs() < 1e-4 * b_true, "b = {}", fit.b);
        assert!(!fit.flags.ambiguous);
    }

    #[test]
    fn ramsey_fit_flags_comparable_peaks() {
        // Two comparable spectral components inside the window leave two
        // minima of similar depth: the fit must raise the ambiguity flag.
        let gamma = PhysicalConstants::default().gamma;
        let (b1, b2) = (0.40, 0.60);
        let pts: Vec<SeriesPoint> = (0..24)
            .map(|i| {
                let tau = 2.2e-6 * i as f64 / 23.0;
                SeriesPoint {
                    tau,
                    value: 0.5 * (gamma * b1 * tau).cos() + 0.5 * (gamma * b2 * tau).cos(),
                    stderr: Some(0.01),
                }
            })
            .collect();
        let fit = fit_ramsey(&pts, gamma, 0.5, 0.2).unwrap();
        assert!(fit.flags.ambiguous, "candidates: {:?}", fit.candidates);
        assert!(!fit.candidates.is_empty());
    }

    #[test]
    fn ramsey_fit_is_convention_equivariant() {
        // Scaling gamma by c and B by 1/c leaves the recovered product fixed.
        let gamma1 = GammaConvention::Angular.gamma();
        let gamma2 = GammaConvention::CyclicAsAngular.gamma();
        let product = 0.532 * gamma1;
        let pts1 = ramsey_series(0.532, 1.0, gamma1, 20, 2.2e-6);
        let b2 = product / gamma2;
        let pts2 = ramsey_series(b2, 1.0, gamma2, 20, 2.2e-6);
        let fit1 = fit_ramsey(&pts1, gamma1, 0.532, 0.02).unwrap();
        let fit2 = fit_ramsey(&pts2, gamma2, b2, b2 * 0.04).unwrap();
        assert_relative_eq!(fit1.b * gamma1, fit2.b * gamma2, max_relative = 1e-9);
    }

    fn parity_series(m: f64, gamma: f64, v_r: f64, taus: &[f64]) -> Vec<SeriesPoint> {
        taus.iter()
            .map(|&tau| SeriesPoint {
                tau,
                value: (gamma * v_r * m * tau * tau).cos(),
                stderr: Some(0.02),
            })
            .collect()
    }

    #[test]
    fn gradient_fit_flat_series_gives_zero() {
        let gamma = 2.8e6;
        let pts: Vec<SeriesPoint> = [0.8e-3, 1.1e-3, 1.4e-3, 1.7e-3]
            .iter()
            .map(|&tau| SeriesPoint {
                tau,
                value: 1.0,
                stderr: Some(0.01),
            })
            .collect();
        let fit = fit_gradient_parity(&pts, gamma, 0.06, 10.0).unwrap();
        assert!(fit.magnitude.abs() < 1e-6, "m = {}", fit.magnitude);
    }

    #[test]
    fn gradient_fit_recovers_injected_magnitude() {
        let gamma = 2.8e6;
        let taus = [0.8e-3, 1.1e-3, 1.4e-3, 1.7e-3];
        let pts = parity_series(5.0, gamma, 0.06, &taus);
        let fit = fit_gradient_parity(&pts, gamma, 0.06, 8.0).unwrap();
        assert_relative_eq!(fit.magnitude, 5.0, max_relative = 0.05);
        assert!(fit.stderr.is_finite());
        // Local-minimum certificate: the optimum beats 0.9x and 1.1x.
        let sse = |m: f64| -> f64 {
            pts.iter()
                .map(|p| ((gamma * 0.06 * m * p.tau * p.tau).cos() - p.value).powi(2))
                .sum()
        };
        assert!(sse(fit.magnitude) <= sse(0.9 * fit.magnitude));
        assert!(sse(fit.magnitude) <= sse(1.1 * fit.magnitude));
    }

    #[test]
    fn gradient_fit_unique_solution_at_parity_minus_one() {
        // Parity reaching -1 at tau_max with no earlier sign change pins
        // Phi(tau_max) = pi/2 exactly.
        let gamma = 2.8e6;
        let v_r = 0.06;
        let tau_max = 1.7e-3f64;
        let m_true = std::f64::consts::FRAC_PI_2 / (0.5 * gamma * v_r * tau_max * tau_max);
        let taus = [0.8e-3, 1.1e-3, 1.4e-3, 1.7e-3];
        let pts = parity_series(m_true, gamma, v_r, &taus);
        assert_abs_diff_eq!(pts[3].value, -1.0, epsilon = 1e-12);
        let fit = fit_gradient_parity(&pts, gamma, v_r, m_true * 1.05).unwrap();
        assert_relative_eq!(fit.magnitude, m_true, max_relative = 1e-3);
    }

    #[test]
    fn gradient_fit_lists_wrap_candidates() {
        let gamma = 2.8e6;
        let v_r = 0.06;
        let taus = [0.8e-3, 1.1e-3, 1.4e-3, 1.7e-3];
        let pts = parity_series(5.0, gamma, v_r, &taus);
        // A search bound far beyond the wrap limit invites degenerate minima.
        let fit = fit_gradient_parity(&pts, gamma, v_r, 60.0).unwrap();
        if fit.flags.ambiguous {
            assert!(!fit.candidates.is_empty());
        }
        // The global optimum is still the injected magnitude.
        assert_relative_eq!(fit.magnitude, 5.0, max_relative = 0.05);
    }

    #[test]
    fn histogram_stats_basic() {
        let vals: Vec<f64> = (0..100).map(|i| 0.532 + 1e-3 * ((i % 11) as f64 - 5.0)).collect();
        let h = histogram_stats(&vals).unwrap();
        assert_relative_eq!(h.mean, 0.532, max_relative = 1e-3);
        assert!(h.std < 5e-3);
        assert_eq!(h.counts.iter().sum::<u64>() as usize, vals.len());
        assert!(histogram_stats(&[0.5; 5]).is_err());
    }

    #[test]
    fn differential_requires_both_bins() {
        let grid = BinGrid::equirectangular(4, 1, 60.0, 0.3, (0.9, 1.1)).unwrap();
        let map = FieldMap {
            bins: grid
                .cells
                .iter()
                .enumerate()
                .map(|(i, c)| MapBin {
                    theta: c.theta,
                    phi: c.phi,
                    value: if i == 0 { Some(0.5) } else { None },
                    stderr: if i == 0 { Some(1e-3) } else { None },
                    n_atoms: 100,
                    flags: FitFlags::default(),
                })
                .collect(),
        };
        assert!(matches!(
            ramsey_differential(&map, &grid, 0, 3.6e-4),
            Err(EstimateError::MissingBin)
        ));
    }

    #[test]
    fn differential_value_and_stderr() {
        let grid = BinGrid::equirectangular(4, 1, 60.0, 0.3, (0.9, 1.1)).unwrap();
        let mut bins: Vec<MapBin> = grid
            .cells
            .iter()
            .map(|c| MapBin {
                theta: c.theta,
                phi: c.phi,
                value: Some(0.532),
                stderr: Some(3.4e-3),
                n_atoms: 100,
                flags: FitFlags::default(),
            })
            .collect();
        // Inject a 5 mG/mm = 5 G/m difference across +-x at D = 0.36 mm.
        let d = 0.36e-3;
        bins[0].value = Some(0.532 + 0.5 * 5.0 * d);
        bins[grid.antipode_index(0)].value = Some(0.532 - 0.5 * 5.0 * d);
        let map = FieldMap { bins };
        let diff = ramsey_differential(&map, &grid, 0, d).unwrap();
        assert_relative_eq!(diff.value, 5.0, max_relative = 1e-9);
        // sqrt(2) * 3.4 mG / 0.36 mm = 13.36 mG/mm = 13.36 G/m.
        assert_relative_eq!(diff.stderr, 13.3557, max_relative = 1e-3);
        // A uniform map differentials to zero within that error.
        let uniform = FieldMap {
            bins: grid
                .cells
                .iter()
                .map(|c| MapBin {
                    theta: c.theta,
                    phi: c.phi,
                    value: Some(0.532),
                    stderr: Some(3.4e-3),
                    n_atoms: 100,
                    flags: FitFlags::default(),
                })
                .collect(),
        };
        let diff0 = ramsey_differential(&uniform, &grid, 0, d).unwrap();
        assert_eq!(diff0.value, 0.0);
    }

    #[test]
    fn gradient_vector_noiseless_roundtrip() {
        let grid = BinGrid::equirectangular(12, 5, 60.0, std::f64::consts::PI / 10.0, (0.9, 1.1))
            .unwrap();
        let g_true = Vector3::new(5.0, 0.0, 0.0);
        let bins: Vec<MapBin> = grid
            .cells
            .iter()
            .map(|c| MapBin {
                theta: c.theta,
                phi: c.phi,
                value: Some(g_true.dot(&c.bin.axis).abs()),
                stderr: Some(1e-4),
                n_atoms: 1000,
                flags: FitFlags::default(),
            })
            .collect();
        let map = GradientMap {
            bins,
            rate: 0.0,
            pooled_g: vec![],
            nbar: vec![],
            series: vec![],
        };
        let fit = fit_gradient_vector(&map, &grid).unwrap();
        assert_relative_eq!(fit.magnitude, 5.0, max_relative = 1e-3);
        let axis_err = fit.axis.cross(&Vector3::x()).norm().asin().to_degrees();
        assert!(axis_err < 1.0, "axis error {axis_err} deg");
    }

    #[test]
    fn gradient_vector_flags_isotropic_map() {
        let grid = BinGrid::equirectangular(12, 5, 60.0, std::f64::consts::PI / 10.0, (0.9, 1.1))
            .unwrap();
        let bins: Vec<MapBin> = grid
            .cells
            .iter()
            .map(|c| MapBin {
                theta: c.theta,
                phi: c.phi,
                value: Some(3.0),
                stderr: Some(1e-3),
                n_atoms: 1000,
                flags: FitFlags::default(),
            })
            .collect();
        let map = GradientMap {
            bins,
            rate: 0.0,
            pooled_g: vec![],
            nbar: vec![],
            series: vec![],
        };
        // |g . q| cannot be constant over the sphere: huge residuals.
        let fit = fit_gradient_vector(&map, &grid).unwrap();
        assert!(fit.flags.poor_fit);
        assert!(fit.weighted_sse_per_dof > 4.0);
    }

    #[test]
    fn gradient_vector_rejects_degenerate_coverage() {
        let grid = BinGrid::equirectangular(12, 5, 60.0, std::f64::consts::PI / 10.0, (0.9, 1.1))
            .unwrap();
        let bins: Vec<MapBin> = grid
            .cells
            .iter()
            .enumerate()
            .map(|(i, c)| MapBin {
                theta: c.theta,
                phi: c.phi,
                value: if i < 3 { Some(1.0) } else { None },
                stderr: if i < 3 { Some(1e-3) } else { None },
                n_atoms: 10,
                flags: FitFlags::default(),
            })
            .collect();
        let map = GradientMap {
            bins,
            rate: 0.0,
            pooled_g: vec![],
            nbar: vec![],
            series: vec![],
        };
        assert!(matches!(
            fit_gradient_vector(&map, &grid),
            Err(EstimateError::DegenerateCoverage { .. })
        ));
    }

    #[test]
    fn antipode_indexing_is_an_involution() {
        let grid = BinGrid::equirectangular(24, 7, 60.0, 0.3, (0.9, 1.1)).unwrap();
        for i in 0..grid.cells.len() {
            let j = grid.antipode_index(i);
            assert_eq!(grid.antipode_index(j), i);
            let a = grid.cells[i].bin.axis.into_inner();
            let b = grid.cells[j].bin.axis.into_inner();
            assert_abs_diff_eq!((a + b).norm(), 0.0, epsilon = 1e-12);
        }
    }
}
