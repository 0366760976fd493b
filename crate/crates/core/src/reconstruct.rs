//! Inversion of detector events to CM-frame velocities, spin classification
//! from the Stern-Gerlach bands, ellipsoid-based lensing correction,
//! unit-sphere normalisation, and the free-expansion spatial-resolution
//! formulas.

use nalgebra::{DMatrix, Matrix3, Vector3};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{PhysicalConstants, SpinState};
use crate::simulate::{derive_rng, DetectionEvent, DetectorConfig, RngStream};

#[derive(Debug, Error)]
pub enum ReconstructError {
    #[error("arrival time must be positive, got {0}")]
    NonPositiveArrivalTime(f64),
    #[error("spin bands overlap: separation {separation:.3e} m/s < required {required:.3e} m/s")]
    BandsOverlap { separation: f64, required: f64 },
    #[error("too few points for an ellipsoid fit: need {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("fitted quadric is not an ellipsoid")]
    DegenerateQuadric,
    #[error("numerical failure in ellipsoid fit: {0}")]
    NumericalFailure(&'static str),
    #[error("empty cloud")]
    EmptyCloud,
    #[error("invalid resolution parameters: {0}")]
    InvalidResolutionParams(String),
}

/// Invert the free-fall map: v_x = x/t*, v_y = y/t*, v_z = g t*/2 - d/t*.
/// Source offsets are negligible against the free-expansion displacement and
/// are taken as zero.
pub fn invert_tof(
    event: &DetectionEvent,
    det: &DetectorConfig,
    c: &PhysicalConstants,
) -> Result<Vector3<f64>, ReconstructError> {
    let t = event.t_star;
    if !(t > 0.0) {
        return Err(ReconstructError::NonPositiveArrivalTime(t));
    }
    Ok(Vector3::new(
        event.x / t,
        event.y / t,
        0.5 * c.gravity * t - det.fall_distance / t,
    ))
}

/// First-order vertical velocity reconstruction and its error budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FirstOrderVz {
    /// Normalised relative arrival time (t* - T*) / T*.
    pub tau_n: f64,
    /// First-order estimate g T* tau_n, m/s.
    pub value: f64,
    /// Exact inversion g t*/2 - d/t*, m/s.
    pub exact: f64,
    /// |first-order - exact| / |exact| (0 at tau_n = 0).
    pub relative_error: f64,
}

/// First-order v_z = g T* tau_n together with its relative error against the
/// exact inversion. The error follows tau_n / (2 + tau_n), crossing 1% just
/// above tau_n = 0.02.
pub fn vz_first_order(t_star: f64, c: &PhysicalConstants) -> Result<FirstOrderVz, ReconstructError> {
    if !(t_star > 0.0) {
        return Err(ReconstructError::NonPositiveArrivalTime(t_star));
    }
    let t0 = c.stationary_fall_time();
    let tau_n = (t_star - t0) / t0;
    let value = c.gravity * t0 * tau_n;
    let exact = 0.5 * c.gravity * t_star - c.fall_distance / t_star;
    let relative_error = if exact == 0.0 {
        0.0
    } else {
        ((value - exact) / exact).abs()
    };
    Ok(FirstOrderVz {
        tau_n,
        value,
        exact,
        relative_error,
    })
}

/// Outcome of Stern-Gerlach band classification.
#[derive(Clone, Debug)]
pub struct SpinClassification {
    /// Events with `spin` set to the assigned class, input order preserved.
    pub events: Vec<DetectionEvent>,
    /// Fraction of events falling outside both nominal bands.
    pub ambiguous_fraction: f64,
    /// Fraction of events whose assigned class disagrees with an input label,
    /// among events that carried one.
    pub disagreement_fraction: f64,
    /// Band centres in v_z, m/s (up, down).
    pub band_centers: (f64, f64),
}

/// Assign spin classes by nearest expected Stern-Gerlach band centre in
/// reconstructed v_z. `band_halfwidth` is the expected half-extent of one
/// band (halo v_z span plus blur margin); overlapping bands are a reported
/// failure, not a silent guess.
pub fn classify_spin(
    events: &[DetectionEvent],
    det: &DetectorConfig,
    c: &PhysicalConstants,
    band_halfwidth: f64,
) -> Result<SpinClassification, ReconstructError> {
    let center_up = 0.5 * det.sg_velocity_kick;
    let center_down = -0.5 * det.sg_velocity_kick;
    let separation = center_up - center_down;
    let required = 2.0 * band_halfwidth;
    if separation < required {
        return Err(ReconstructError::BandsOverlap {
            separation,
            required,
        });
    }
    let mut out = Vec::with_capacity(events.len());
    let mut ambiguous = 0usize;
    let mut labelled = 0usize;
    let mut disagreements = 0usize;
    for ev in events {
        let vz = invert_tof(ev, det, c)?.z;
        let (d_up, d_down) = ((vz - center_up).abs(), (vz - center_down).abs());
        let assigned = if d_up <= d_down {
            SpinState::Up
        } else {
            SpinState::Down
        };
        if d_up.min(d_down) > band_halfwidth {
            ambiguous += 1;
        }
        if let Some(prev) = ev.spin {
            labelled += 1;
            if prev != assigned {
                disagreements += 1;
            }
        }
        out.push(DetectionEvent {
            spin: Some(assigned),
            ..*ev
        });
    }
    let n = events.len().max(1) as f64;
    Ok(SpinClassification {
        events: out,
        ambiguous_fraction: ambiguous as f64 / n,
        disagreement_fraction: if labelled == 0 {
            0.0
        } else {
            disagreements as f64 / labelled as f64
        },
        band_centers: (center_up, center_down),
    })
}

/// Geometric description of a fitted ellipsoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidFit {
    pub center: Vector3<f64>,
    /// Semi-axes sorted in descending order.
    pub semi_axes: Vector3<f64>,
    /// Orthonormal rotation, columns are the axis directions (det = +1).
    pub rotation: Matrix3<f64>,
}

impl EllipsoidFit {
    pub fn unit_sphere() -> Self {
        Self {
            center: Vector3::zeros(),
            semi_axes: Vector3::new(1.0, 1.0, 1.0),
            rotation: Matrix3::identity(),
        }
    }

    /// Map a point into the frame where the ellipsoid is the unit sphere.
    pub fn to_unit_sphere(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let local = self.rotation.transpose() * (p - self.center);
        let scaled = Vector3::new(
            local.x / self.semi_axes.x,
            local.y / self.semi_axes.y,
            local.z / self.semi_axes.z,
        );
        self.rotation * scaled
    }
}

/// Radial prefilter window in units of the first-approximation radius.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialPrefilter {
    pub lo: f64,
    pub hi: f64,
    /// First-approximation radius; estimated from the median distance to the
    /// centroid when `None`.
    pub r0: Option<f64>,
}

impl Default for RadialPrefilter {
    fn default() -> Self {
        Self {
            lo: 0.6,
            hi: 1.2,
            r0: None,
        }
    }
}

/// Algebraic least-squares ellipsoid fit.
///
/// Minimises the algebraic residual of the general quadric over the unit
/// coefficient sphere (smallest right singular vector of the design matrix)
/// after shifting/scaling the points for conditioning, then decomposes the
/// quadric into centre, semi-axes, and rotation. Non-ellipsoidal quadrics are
/// a reported failure.
pub fn fit_ellipsoid(
    points: &[Vector3<f64>],
    prefilter: Option<RadialPrefilter>,
) -> Result<EllipsoidFit, ReconstructError> {
    let filtered: Vec<Vector3<f64>> = match prefilter {
        None => points.to_vec(),
        Some(f) => {
            let centroid = mean_point(points).ok_or(ReconstructError::EmptyCloud)?;
            let r0 = match f.r0 {
                Some(r) => r,
                None => {
                    let mut d: Vec<f64> = points.iter().map(|p| (p - centroid).norm()).collect();
                    d.sort_by(|a, b| a.total_cmp(b));
                    d[d.len() / 2]
                }
            };
            points
                .iter()
                .filter(|p| {
                    let r = (*p - centroid).norm() / r0;
                    r > f.lo && r < f.hi
                })
                .copied()
                .collect()
        }
    };
    if filtered.len() < 9 {
        return Err(ReconstructError::TooFewPoints {
            needed: 9,
            got: filtered.len(),
        });
    }

    let centroid = mean_point(&filtered).unwrap();
    let scale = filtered.iter().map(|p| (p - centroid).norm()).sum::<f64>() / filtered.len() as f64;
    if !(scale > 0.0) {
        return Err(ReconstructError::NumericalFailure("degenerate point cloud"));
    }
    let inv_s = 1.0 / scale;

    // Design matrix rows: [x^2, y^2, z^2, xy, xz, yz, x, y, z, 1].
    let mut design = DMatrix::<f64>::zeros(filtered.len(), 10);
    for (row, p) in filtered.iter().enumerate() {
        let q = (p - centroid) * inv_s;
        design[(row, 0)] = q.x * q.x;
        design[(row, 1)] = q.y * q.y;
        design[(row, 2)] = q.z * q.z;
        design[(row, 3)] = q.x * q.y;
        design[(row, 4)] = q.x * q.z;
        design[(row, 5)] = q.y * q.z;
        design[(row, 6)] = q.x;
        design[(row, 7)] = q.y;
        design[(row, 8)] = q.z;
        design[(row, 9)] = 1.0;
    }
    let svd = design.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or(ReconstructError::NumericalFailure("SVD failed"))?;
    let mut min_idx = 0;
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s < svd.singular_values[min_idx] {
            min_idx = i;
        }
    }
    let p = v_t.row(min_idx);

    let quad = Matrix3::new(
        p[0],
        0.5 * p[3],
        0.5 * p[4],
        0.5 * p[3],
        p[1],
        0.5 * p[5],
        0.5 * p[4],
        0.5 * p[5],
        p[2],
    );
    let linear = 0.5 * Vector3::new(p[6], p[7], p[8]);
    let constant = p[9];

    let quad_inv = quad
        .try_inverse()
        .ok_or(ReconstructError::DegenerateQuadric)?;
    let center_n = -(quad_inv * linear);
    // (x - c)^T Q (x - c) = c^T Q c - j on the quadric.
    let k = (quad * center_n).dot(&center_n) - constant;
    let eig = quad.symmetric_eigen();
    let mut axes = [0.0f64; 3];
    for i in 0..3 {
        let ratio = k / eig.eigenvalues[i];
        if !(ratio > 0.0) {
            return Err(ReconstructError::DegenerateQuadric);
        }
        axes[i] = ratio.sqrt();
    }

    // Sort axes descending, keep eigenvector columns aligned.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| axes[b].total_cmp(&axes[a]));
    let semi_axes = Vector3::new(axes[order[0]], axes[order[1]], axes[order[2]]) * scale;
    let mut rotation = Matrix3::from_columns(&[
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvectors.column(order[1]).into_owned(),
        eig.eigenvectors.column(order[2]).into_owned(),
    ]);
    if rotation.determinant() < 0.0 {
        rotation.set_column(2, &(-rotation.column(2)));
    }

    Ok(EllipsoidFit {
        center: centroid + center_n * scale,
        semi_axes,
        rotation,
    })
}

/// Optional geometric refinement: Gauss-Newton on the radial residual
/// |D R^T (p - c)| - 1 over centre, log semi-axes, and a small rotation.
pub fn refine_ellipsoid(
    points: &[Vector3<f64>],
    fit: &EllipsoidFit,
    iterations: usize,
) -> EllipsoidFit {
    let mut current = fit.clone();
    for _ in 0..iterations {
        let n = points.len();
        if n < 9 {
            return current;
        }
        // Parameters: c (3), log a (3), rotation vector (3).
        let mut jtj = DMatrix::<f64>::zeros(9, 9);
        let mut jtr = DMatrix::<f64>::zeros(9, 1);
        let residual = |f: &EllipsoidFit, p: &Vector3<f64>| f.to_unit_sphere(p).norm() - 1.0;
        let step = 1e-7 * current.semi_axes.x.max(1e-12);
        for p in points {
            let r0 = residual(&current, p);
            let mut grad = [0.0f64; 9];
            for k in 0..9 {
                let perturbed = perturb(&current, k, step);
                grad[k] = (residual(&perturbed, p) - r0) / step;
            }
            for i in 0..9 {
                for j in 0..9 {
                    jtj[(i, j)] += grad[i] * grad[j];
                }
                jtr[(i, 0)] += grad[i] * r0;
            }
        }
        for i in 0..9 {
            jtj[(i, i)] += 1e-9;
        }
        let Some(delta) = jtj.lu().solve(&jtr) else {
            return current;
        };
        let mut next = current.clone();
        for k in 0..9 {
            next = perturb(&next, k, -delta[(k, 0)]);
        }
        current = next;
    }
    current
}

fn perturb(fit: &EllipsoidFit, param: usize, delta: f64) -> EllipsoidFit {
    let mut out = fit.clone();
    match param {
        0..=2 => out.center[param] += delta,
        3..=5 => out.semi_axes[param - 3] *= delta.exp(),
        _ => {
            let mut axis = Vector3::zeros();
            axis[param - 6] = delta;
            let rot = nalgebra::Rotation3::from_scaled_axis(axis);
            out.rotation = rot.matrix() * out.rotation;
        }
    }
    out
}

fn mean_point(points: &[Vector3<f64>]) -> Option<Vector3<f64>> {
    if points.is_empty() {
        return None;
    }
    Some(points.iter().sum::<Vector3<f64>>() / points.len() as f64)
}

/// One reconstructed halo atom on the normalised momentum sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CloudAtom {
    pub shot_id: u64,
    /// Unit direction on the halo sphere.
    pub k_hat: Vector3<f64>,
    /// Normalised radius r / r0 after lensing correction.
    pub k_norm: f64,
    /// Helper column z* = v_z t* for detector-space visualisation, m.
    pub z_star: f64,
    pub spin: SpinState,
}

/// A reconstructed cloud for one interrogation delay. `n_shots` counts all
/// shots in the group including those that produced no atoms, which matters
/// for the cross-shot correlation denominators.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CloudGroup {
    pub tau: f64,
    pub first_shot: u64,
    pub n_shots: u64,
    /// Atoms sorted by shot id.
    pub atoms: Vec<CloudAtom>,
}

impl CloudGroup {
    /// Local (dense) shot index of an atom.
    pub fn shot_index(&self, atom: &CloudAtom) -> usize {
        (atom.shot_id - self.first_shot) as usize
    }
}

/// Map velocities onto the unit sphere with a fitted ellipsoid: subtract the
/// centre, rescale along the principal axes, then normalise so the mean
/// radius of the cloud is exactly one.
pub fn normalize_halo(points: &[Vector3<f64>], fit: &EllipsoidFit) -> Vec<Vector3<f64>> {
    let unit: Vec<Vector3<f64>> = points.iter().map(|p| fit.to_unit_sphere(p)).collect();
    let mean_r = unit.iter().map(|k| k.norm()).sum::<f64>() / unit.len().max(1) as f64;
    if !(mean_r > 0.0) {
        return unit;
    }
    unit.into_iter().map(|k| k / mean_r).collect()
}

/// Descriptive statistics of a normalised halo cloud.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HaloStatistics {
    pub n_atoms: usize,
    pub mean_radius: f64,
    /// Rms width of k_norm about its mean (the measured dk).
    pub radial_rms_width: f64,
    /// Histogram of k_norm over [0.8, 1.2].
    pub radial_hist: Vec<u64>,
    pub radial_range: (f64, f64),
    /// Histogram of azimuth over [0, 2 pi).
    pub azimuthal_hist: Vec<u64>,
    /// Histogram of elevation over [-pi/2, pi/2].
    pub polar_hist: Vec<u64>,
}

pub const HALO_HIST_BINS: usize = 36;

pub fn halo_statistics(atoms: &[CloudAtom]) -> Result<HaloStatistics, ReconstructError> {
    if atoms.is_empty() {
        return Err(ReconstructError::EmptyCloud);
    }
    let n = atoms.len();
    let mean_radius = atoms.iter().map(|a| a.k_norm).sum::<f64>() / n as f64;
    let var = atoms
        .iter()
        .map(|a| (a.k_norm - mean_radius).powi(2))
        .sum::<f64>()
        / n as f64;
    let radial_range = (0.8, 1.2);
    let mut radial_hist = vec![0u64; HALO_HIST_BINS];
    let mut azimuthal_hist = vec![0u64; HALO_HIST_BINS];
    let mut polar_hist = vec![0u64; HALO_HIST_BINS];
    for a in atoms {
        let r = (a.k_norm - radial_range.0) / (radial_range.1 - radial_range.0);
        if (0.0..1.0).contains(&r) {
            radial_hist[(r * HALO_HIST_BINS as f64) as usize] += 1;
        }
        let theta = a.k_hat.y.atan2(a.k_hat.x).rem_euclid(std::f64::consts::TAU);
        azimuthal_hist
            [((theta / std::f64::consts::TAU * HALO_HIST_BINS as f64) as usize).min(HALO_HIST_BINS - 1)] += 1;
        let elev = a.k_hat.z.clamp(-1.0, 1.0).asin();
        let u = (elev + std::f64::consts::FRAC_PI_2) / std::f64::consts::PI;
        polar_hist[((u * HALO_HIST_BINS as f64) as usize).min(HALO_HIST_BINS - 1)] += 1;
    }
    Ok(HaloStatistics {
        n_atoms: n,
        mean_radius,
        radial_rms_width: var.sqrt(),
        radial_hist,
        radial_range,
        azimuthal_hist,
        polar_hist,
    })
}

/// Dimensionless parameters of the free-expansion resolution analysis
/// (one-dimensional, gravity ignored).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionParams {
    /// Source position spread, m.
    pub sigma: f64,
    /// Source velocity spread, m/s.
    pub sigma_v: f64,
    /// Detection time T, s.
    pub detection_time: f64,
    /// Interrogation time t*, s.
    pub interrogation_time: f64,
    /// Mean expansion speed v0, m/s.
    pub mean_speed: f64,
}

impl ResolutionParams {
    /// Interrogation time as a fraction of the detection time, t*/T.
    pub fn tau(&self) -> f64 {
        self.interrogation_time / self.detection_time
    }

    /// Near-field parameter xi = sigma / (sigma_v T).
    pub fn xi(&self) -> f64 {
        self.sigma / (self.sigma_v * self.detection_time)
    }

    /// Relative velocity spread w = sigma_v / v0.
    pub fn w(&self) -> f64 {
        self.sigma_v / self.mean_speed
    }

    /// Build from the dimensionless triple (tau, xi, w) and a source width.
    pub fn from_dimensionless(
        sigma: f64,
        tau: f64,
        xi: f64,
        w: f64,
        detection_time: f64,
    ) -> Self {
        let sigma_v = sigma / (xi * detection_time);
        Self {
            sigma,
            sigma_v,
            detection_time,
            interrogation_time: tau * detection_time,
            mean_speed: sigma_v / w,
        }
    }

    pub fn validate(&self) -> Result<(), ReconstructError> {
        let tau = self.tau();
        if !(0.0..1.0).contains(&tau) {
            return Err(ReconstructError::InvalidResolutionParams(format!(
                "tau = t*/T must lie in [0, 1), got {tau}"
            )));
        }
        if !(self.sigma > 0.0 && self.sigma_v > 0.0 && self.mean_speed > 0.0) {
            return Err(ReconstructError::InvalidResolutionParams(
                "sigma, sigma_v, v0 must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Conditional moments of the interrogation-point position s* given a
/// detected final position S, plus their far-field limits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionMoments {
    pub mean: f64,
    pub width: f64,
    pub far_field_mean: f64,
    pub far_field_width: f64,
}

/// Closed-form conditional moments:
/// mean = [(tau + xi^2) S - sigma xi w^-1 (1 - tau)] / (1 + xi^2),
/// width = sigma (1 - tau) / sqrt(1 + xi^2);
/// far field (xi -> 0, w -> 0): mean = tau S, width = sigma (1 - tau).
pub fn resolution_moments(
    p: &ResolutionParams,
    s_detected: f64,
) -> Result<ResolutionMoments, ReconstructError> {
    p.validate()?;
    let tau = p.tau();
    let xi = p.xi();
    let w = p.w();
    let denom = 1.0 + xi * xi;
    let mean = ((tau + xi * xi) * s_detected - p.sigma * xi * (1.0 - tau) / w) / denom;
    let width = p.sigma * (1.0 - tau) / denom.sqrt();
    Ok(ResolutionMoments {
        mean,
        width,
        far_field_mean: tau * s_detected,
        far_field_width: p.sigma * (1.0 - tau),
    })
}

/// Monte Carlo estimate of the same conditional moments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McMoments {
    pub mean: f64,
    pub width: f64,
    /// Effective sample count of the conditioning kernel.
    pub effective_samples: f64,
}

/// Sample trajectories (r, v), condition on the final position via a Gaussian
/// kernel of width `kernel_frac * width` around `s_detected`, and return the
/// weighted mean and width of s*.
pub fn resolution_monte_carlo(
    p: &ResolutionParams,
    s_detected: f64,
    n_samples: usize,
    kernel_frac: f64,
    seed: u64,
) -> Result<McMoments, ReconstructError> {
    p.validate()?;
    let closed = resolution_moments(p, s_detected)?;
    let kernel = kernel_frac * closed.width;
    let mut rng = derive_rng(seed, RngStream::ResolutionMc, 0);
    let r_dist = Normal::new(0.0, p.sigma).unwrap();
    let v_dist = Normal::new(p.mean_speed, p.sigma_v).unwrap();
    let mut w_sum = 0.0;
    let mut w_sq_sum = 0.0;
    let mut mean_acc = 0.0;
    let mut m2_acc = 0.0;
    for _ in 0..n_samples {
        let r = r_dist.sample(&mut rng);
        let v = v_dist.sample(&mut rng);
        let s_star = r + v * p.interrogation_time;
        let s_final = r + v * p.detection_time;
        let z = (s_final - s_detected) / kernel;
        let weight = (-0.5 * z * z).exp();
        if weight < 1e-12 {
            continue;
        }
        w_sum += weight;
        w_sq_sum += weight * weight;
        let delta = s_star - mean_acc;
        mean_acc += weight / w_sum * delta;
        m2_acc += weight * delta * (s_star - mean_acc);
    }
    if w_sum <= 0.0 {
        return Err(ReconstructError::NumericalFailure(
            "conditioning kernel collected no weight",
        ));
    }
    Ok(McMoments {
        mean: mean_acc,
        width: (m2_acc / w_sum).sqrt(),
        effective_samples: w_sum * w_sum / w_sq_sum,
    })
}

/// Generate deterministic, roughly uniform unit vectors (Fibonacci sphere);
/// used to build synthetic shells in tests and diagnostics.
pub fn fibonacci_sphere(n: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let rho = (1.0 - z * z).sqrt();
            let theta = golden * i as f64;
            Vector3::new(rho * theta.cos(), rho * theta.sin(), z)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PhysicalConstants;
    use crate::simulate::fall_time;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::Rng;

    fn constants() -> PhysicalConstants {
        PhysicalConstants::default()
    }

    fn detector_no_blur() -> DetectorConfig {
        DetectorConfig {
            efficiency_eta: 1.0,
            t_star_resolution: 0.0,
            xy_resolution: 0.0,
            sg_velocity_kick: 0.0,
            ..DetectorConfig::default()
        }
    }

    #[test]
    fn stationary_atom_inverts_to_zero() {
        let c = constants();
        let det = detector_no_blur();
        let ev = DetectionEvent {
            shot_id: 0,
            t_star: c.stationary_fall_time(),
            x: 0.0,
            y: 0.0,
            spin: None,
        };
        let v = invert_tof(&ev, &det, &c).unwrap();
        assert_abs_diff_eq!(v.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn recoil_displacement_inverts_to_recoil_velocity() {
        let c = constants();
        let det = detector_no_blur();
        let t = c.stationary_fall_time();
        let ev = DetectionEvent {
            shot_id: 0,
            t_star: t,
            x: t * c.recoil_velocity(), // about 38.3 mm
            y: 0.0,
            spin: None,
        };
        assert_abs_diff_eq!(ev.x, 38.3e-3, epsilon = 0.1e-3);
        let v = invert_tof(&ev, &det, &c).unwrap();
        assert_relative_eq!(v.x, c.recoil_velocity(), max_relative = 1e-12);
    }

    #[test]
    fn forward_map_roundtrip_is_exact() {
        let c = constants();
        let det = detector_no_blur();
        let mut rng = derive_rng(11, RngStream::Shot, 0);
        for _ in 0..200 {
            let v = Vector3::new(
                rng.gen_range(-0.08..0.08),
                rng.gen_range(-0.08..0.08),
                rng.gen_range(-0.08..0.08),
            );
            let t = fall_time(v.z, c.gravity, det.fall_distance);
            let ev = DetectionEvent {
                shot_id: 0,
                t_star: t,
                x: v.x * t,
                y: v.y * t,
                spin: None,
            };
            let back = invert_tof(&ev, &det, &c).unwrap();
            assert_relative_eq!(back.x, v.x, max_relative = 1e-9);
            assert_relative_eq!(back.y, v.y, max_relative = 1e-9);
            if v.z.abs() > 1e-6 {
                assert_relative_eq!(back.z, v.z, max_relative = 1e-9);
            } else {
                assert_abs_diff_eq!(back.z, v.z, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn invert_tof_rejects_bad_arrival_time() {
        let c = constants();
        let det = detector_no_blur();
        let ev = DetectionEvent {
            shot_id: 0,
            t_star: 0.0,
            x: 0.0,
            y: 0.0,
            spin: None,
        };
        assert!(invert_tof(&ev, &det, &c).is_err());
    }

    #[test]
    fn first_order_vz_error_law() {
        let c = constants();
        let t0 = c.stationary_fall_time();
        let at = |tau_n: f64| vz_first_order(t0 * (1.0 + tau_n), &c).unwrap();
        assert_eq!(at(0.0).value, 0.0);
        assert_eq!(at(0.0).relative_error, 0.0);
        // Exact law: relative error = tau / (2 + tau).
        for tau in [0.01, 0.02, 0.03, 0.05, 0.1] {
            let fo = at(tau);
            assert_relative_eq!(fo.relative_error, tau / (2.0 + tau), max_relative = 1e-9);
        }
        // Crossing of the 1% level sits just above tau_n = 0.0202.
        assert!(at(0.02).relative_error < 0.01);
        assert!(at(0.021).relative_error > 0.01);
        assert!(at(0.1).relative_error > 0.01);
        // Monotone growth in |tau_n|.
        let mut last = 0.0;
        for tau in [0.005, 0.01, 0.02, 0.04, 0.08, 0.15] {
            let e = at(tau).relative_error;
            assert!(e > last);
            last = e;
        }
    }

    #[test]
    fn classify_clean_bands_is_exact() {
        let c = constants();
        let det = DetectorConfig {
            efficiency_eta: 1.0,
            t_star_resolution: 0.0,
            xy_resolution: 0.0,
            sg_velocity_kick: 0.3,
            ..DetectorConfig::default()
        };
        let mut rng = derive_rng(3, RngStream::Shot, 1);
        let mut events = Vec::new();
        for i in 0..500 {
            let spin = if i % 2 == 0 {
                SpinState::Up
            } else {
                SpinState::Down
            };
            let vz = 0.5 * det.sg_velocity_kick * spin.sign() + rng.gen_range(-0.05..0.05);
            let t = fall_time(vz, c.gravity, det.fall_distance);
            events.push(DetectionEvent {
                shot_id: 0,
                t_star: t,
                x: 0.0,
                y: 0.0,
                spin: Some(spin),
            });
        }
        let out = classify_spin(&events, &det, &c, 0.06).unwrap();
        assert_eq!(out.disagreement_fraction, 0.0);
        assert_eq!(out.ambiguous_fraction, 0.0);
    }

    #[test]
    fn classify_zero_kick_fails() {
        let c = constants();
        let det = DetectorConfig {
            sg_velocity_kick: 0.0,
            ..DetectorConfig::default()
        };
        let err = classify_spin(&[], &det, &c, 0.06);
        assert!(matches!(err, Err(ReconstructError::BandsOverlap { .. })));
    }

    fn shell_points(
        n: usize,
        axes: Vector3<f64>,
        center: Vector3<f64>,
        radial_jitter: f64,
        seed: u64,
    ) -> Vec<Vector3<f64>> {
        let mut rng = derive_rng(seed, RngStream::Synthetic, 0);
        fibonacci_sphere(n)
            .into_iter()
            .map(|d| {
                let r = if radial_jitter > 0.0 {
                    1.0 + radial_jitter * rng.sample::<f64, _>(rand_distr::StandardNormal)
                } else {
                    1.0
                };
                center + Vector3::new(d.x * axes.x * r, d.y * axes.y * r, d.z * axes.z * r)
            })
            .collect()
    }

    #[test]
    fn fit_exact_unit_sphere() {
        let pts = shell_points(400, Vector3::new(1.0, 1.0, 1.0), Vector3::zeros(), 0.0, 0);
        let fit = fit_ellipsoid(&pts, None).unwrap();
        assert_abs_diff_eq!(fit.center.norm(), 0.0, epsilon = 1e-6);
        for i in 0..3 {
            assert_abs_diff_eq!(fit.semi_axes[i], 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn fit_scaled_sphere_recovers_axes() {
        let axes = Vector3::new(1.05, 1.0, 0.95);
        let pts = shell_points(2000, axes, Vector3::new(0.3, -0.2, 0.1), 0.0, 1);
        let fit = fit_ellipsoid(&pts, None).unwrap();
        assert_relative_eq!(fit.semi_axes.x, 1.05, max_relative = 5e-3);
        assert_relative_eq!(fit.semi_axes.y, 1.0, max_relative = 5e-3);
        assert_relative_eq!(fit.semi_axes.z, 0.95, max_relative = 5e-3);
        assert_abs_diff_eq!((fit.center - Vector3::new(0.3, -0.2, 0.1)).norm(), 0.0, epsilon = 1e-6);
    }

    #[test]
    fn fit_noisy_shell_within_one_percent() {
        let axes = Vector3::new(1.05, 1.0, 0.95);
        let pts = shell_points(10_000, axes, Vector3::zeros(), 0.03, 2);
        let fit = fit_ellipsoid(&pts, Some(RadialPrefilter::default())).unwrap();
        assert_relative_eq!(fit.semi_axes.x, 1.05, max_relative = 0.01);
        assert_relative_eq!(fit.semi_axes.y, 1.0, max_relative = 0.01);
        assert_relative_eq!(fit.semi_axes.z, 0.95, max_relative = 0.01);
    }

    #[test]
    fn fit_rejects_degenerate_inputs() {
        let few: Vec<Vector3<f64>> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(
            fit_ellipsoid(&few, None),
            Err(ReconstructError::TooFewPoints { .. })
        ));
        // Coplanar points cannot define an ellipsoid.
        let plane: Vec<Vector3<f64>> = (0..40)
            .map(|i| {
                let t = i as f64 / 40.0 * std::f64::consts::TAU;
                Vector3::new(t.cos(), t.sin(), 0.0)
            })
            .collect();
        assert!(fit_ellipsoid(&plane, None).is_err());
    }

    #[test]
    fn geometric_refinement_does_not_degrade_a_clean_fit() {
        let axes = Vector3::new(1.08, 1.0, 0.93);
        let pts = shell_points(3000, axes, Vector3::zeros(), 0.01, 7);
        let fit = fit_ellipsoid(&pts, None).unwrap();
        let refined = refine_ellipsoid(&pts, &fit, 3);
        assert_relative_eq!(refined.semi_axes.x, 1.08, max_relative = 0.01);
        assert_relative_eq!(refined.semi_axes.z, 0.93, max_relative = 0.01);
    }

    #[test]
    fn normalize_identity_fit_keeps_radii() {
        let pts = shell_points(200, Vector3::new(2.0, 2.0, 2.0), Vector3::zeros(), 0.0, 3);
        let fit = EllipsoidFit {
            center: Vector3::zeros(),
            semi_axes: Vector3::new(2.0, 2.0, 2.0),
            rotation: Matrix3::identity(),
        };
        let normed = normalize_halo(&pts, &fit);
        for k in &normed {
            assert_relative_eq!(k.norm(), 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn normalize_undoes_distortion() {
        let axes = Vector3::new(1.05, 1.0, 0.95);
        let pts = shell_points(8000, axes, Vector3::zeros(), 0.03, 4);
        let fit = fit_ellipsoid(&pts, Some(RadialPrefilter::default())).unwrap();
        let normed = normalize_halo(&pts, &fit);
        let radii: Vec<f64> = normed.iter().map(|k| k.norm()).collect();
        let mean = radii.iter().sum::<f64>() / radii.len() as f64;
        let rms =
            (radii.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / radii.len() as f64).sqrt();
        assert_relative_eq!(mean, 1.0, max_relative = 1e-9);
        assert_relative_eq!(rms, 0.03, max_relative = 0.1);
    }

    #[test]
    fn normalize_is_invariant_under_rigid_rotation_with_refit() {
        let axes = Vector3::new(1.06, 1.0, 0.96);
        let pts = shell_points(4000, axes, Vector3::new(0.1, 0.0, -0.05), 0.0, 5);
        let rot = nalgebra::Rotation3::from_euler_angles(0.4, -0.7, 1.1);
        let rotated: Vec<Vector3<f64>> = pts.iter().map(|p| rot * p).collect();

        let fit_a = fit_ellipsoid(&pts, None).unwrap();
        let fit_b = fit_ellipsoid(&rotated, None).unwrap();
        let normed_a = normalize_halo(&pts, &fit_a);
        let normed_b = normalize_halo(&rotated, &fit_b);
        for (a, b) in normed_a.iter().zip(normed_b.iter()) {
            let back = rot.inverse() * b;
            assert_abs_diff_eq!((a - back).norm(), 0.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn halo_statistics_report_shape() {
        let mut atoms = Vec::new();
        let dirs = fibonacci_sphere(5000);
        let mut rng = derive_rng(6, RngStream::Synthetic, 0);
        for d in dirs {
            if d.z.abs() > 60f64.to_radians().sin() {
                continue;
            }
            atoms.push(CloudAtom {
                shot_id: 0,
                k_hat: d,
                k_norm: 1.0 + 0.03 * rng.sample::<f64, _>(rand_distr::StandardNormal),
                z_star: 0.0,
                spin: SpinState::Up,
            });
        }
        let stats = halo_statistics(&atoms).unwrap();
        assert_relative_eq!(stats.radial_rms_width, 0.03, max_relative = 0.1);
        // Polar cap exclusion shows up as empty elevation bins.
        let cap_bin = ((60f64.to_radians() + std::f64::consts::FRAC_PI_2) / std::f64::consts::PI
            * HALO_HIST_BINS as f64) as usize;
        for (i, count) in stats.polar_hist.iter().enumerate() {
            if i > cap_bin {
                assert_eq!(*count, 0);
            }
        }
        assert!(halo_statistics(&[]).is_err());
    }

    #[test]
    fn resolution_moments_far_field_limits() {
        // xi -> 0, w -> 0: exact and far-field forms agree to first order
        // for detected positions on the halo scale S ~ v0 T.
        let p = ResolutionParams::from_dimensionless(35.4e-6, 0.01, 1e-4, 1e-4, 0.416);
        let s = p.mean_speed * p.detection_time;
        let m = resolution_moments(&p, s).unwrap();
        assert_relative_eq!(m.mean, m.far_field_mean, max_relative = 1e-4);
        assert_relative_eq!(m.width, m.far_field_width, max_relative = 1e-6);
    }

    #[test]
    fn resolution_far_field_width_is_35_micron() {
        let p = ResolutionParams::from_dimensionless(35.4e-6, 0.01, 0.1, 0.03, 0.416);
        let m = resolution_moments(&p, 0.012).unwrap();
        assert_abs_diff_eq!(m.far_field_width, 35.0e-6, epsilon = 0.1e-6);
    }

    #[test]
    fn resolution_width_decreases_with_tau() {
        let mut last = f64::INFINITY;
        for tau in [0.0, 0.2, 0.4, 0.6, 0.8, 0.99] {
            let p = ResolutionParams::from_dimensionless(35.4e-6, tau, 0.1, 0.03, 0.416);
            let m = resolution_moments(&p, 0.012).unwrap();
            assert!(m.width < last);
            last = m.width;
        }
        let p0 = ResolutionParams::from_dimensionless(35.4e-6, 0.0, 0.1, 0.03, 0.416);
        let m0 = resolution_moments(&p0, 0.012).unwrap();
        assert_relative_eq!(
            m0.width,
            35.4e-6 / (1.0f64 + 0.01).sqrt(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn resolution_monte_carlo_matches_closed_form() {
        let p = ResolutionParams::from_dimensionless(35.4e-6, 0.01, 0.1, 0.03, 0.416);
        let s = p.mean_speed * p.detection_time * 1.05;
        let closed = resolution_moments(&p, s).unwrap();
        let mc = resolution_monte_carlo(&p, s, 3_000_000, 0.1, 99).unwrap();
        assert_relative_eq!(mc.mean, closed.mean, max_relative = 0.02);
        assert_relative_eq!(mc.width, closed.width, max_relative = 0.02);
    }

    #[test]
    fn resolution_params_validation() {
        let p = ResolutionParams::from_dimensionless(35.4e-6, 1.5, 0.1, 0.03, 0.416);
        assert!(p.validate().is_err());
    }
}
