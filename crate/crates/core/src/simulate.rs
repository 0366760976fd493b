//! Ground-truth halo generation, interrogation sequences, and the detection
//! chain.
//!
//! Shots are independent units of work. All randomness flows through
//! explicitly seeded, per-shot ChaCha streams derived with [`derive_rng`], so
//! a dataset is bit-identical for a given seed regardless of how many workers
//! generate it.

use nalgebra::{Matrix3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    bell_mixing, joint_xbasis_distribution, larmor_phase, FieldModel, ModelError,
    PairState, PhysicalConstants, SpinState,
};

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("invalid halo config: {0}")]
    InvalidHalo(String),
    #[error("invalid sequence config: {0}")]
    InvalidSequence(String),
    #[error("invalid detector config: {0}")]
    InvalidDetector(String),
    #[error("sequence scheme mismatch: expected {expected}, got {got}")]
    SchemeMismatch {
        expected: &'static str,
        got: &'static str,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Source and halo geometry parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HaloConfig {
    /// Poisson mean of scattered pairs per shot.
    pub mean_pairs_per_shot: f64,
    /// Scattering speed of each atom in the CM frame, m/s.
    pub v_r: f64,
    /// Normalised rms radial width dk of the halo shell.
    pub radial_width_frac: f64,
    /// Source position spread sigma = R_TF / sqrt(2), m.
    pub source_sigma: f64,
    /// Source velocity spread sigma_v, m/s.
    pub source_velocity_sigma: f64,
    /// Elevation cutoff in degrees: atoms with |elevation| above this are
    /// excluded (polar caps around +-z).
    pub polar_cap_deg: f64,
    /// Target mode occupancy used to size pair brightness for a given
    /// analysis cone; see [`HaloConfig::mean_pairs_for_occupancy`].
    pub mode_occupancy_nbar: f64,
}

impl Default for HaloConfig {
    fn default() -> Self {
        Self {
            mean_pairs_per_shot: 100.0,
            v_r: 0.06,
            radial_width_frac: 0.03,
            source_sigma: 35.4e-6,
            source_velocity_sigma: 0.6e-3,
            polar_cap_deg: 60.0,
            mode_occupancy_nbar: 0.1,
        }
    }
}

impl HaloConfig {
    pub fn validate(&self) -> Result<(), SimulateError> {
        if !(self.mean_pairs_per_shot >= 0.0) {
            return Err(SimulateError::InvalidHalo(format!(
                "mean_pairs_per_shot must be >= 0, got {}",
                self.mean_pairs_per_shot
            )));
        }
        if !(self.v_r > 0.0) {
            return Err(SimulateError::InvalidHalo(format!(
                "v_r must be positive, got {}",
                self.v_r
            )));
        }
        if !(self.radial_width_frac > 0.0 && self.radial_width_frac < 0.2) {
            return Err(SimulateError::InvalidHalo(format!(
                "radial_width_frac must lie in (0, 0.2), got {}",
                self.radial_width_frac
            )));
        }
        if !(self.source_sigma > 0.0 && self.source_velocity_sigma > 0.0) {
            return Err(SimulateError::InvalidHalo(
                "source spreads must be positive".into(),
            ));
        }
        if !(self.polar_cap_deg >= 0.0 && self.polar_cap_deg < 90.0) {
            return Err(SimulateError::InvalidHalo(format!(
                "polar_cap_deg must lie in [0, 90), got {}",
                self.polar_cap_deg
            )));
        }
        Ok(())
    }

    /// Fraction of scattered pairs whose axis falls inside a double cone of
    /// half-angle `alpha` placed inside the allowed band.
    pub fn double_cone_fraction(&self, alpha: f64) -> f64 {
        let cap = self.polar_cap_deg.to_radians();
        (1.0 - alpha.cos()) / cap.sin()
    }

    /// Expected pairs per shot in one double-cone bin of half-angle `alpha`.
    pub fn expected_pairs_in_double_cone(&self, alpha: f64) -> f64 {
        self.mean_pairs_per_shot * self.double_cone_fraction(alpha)
    }

    /// Effective mode occupancy seen through a double-cone bin of half-angle
    /// `alpha`: the spin-integrated correlation amplitude of this source obeys
    /// G = 1 + 1/(2 nbar) with nbar = pairs-per-bin / 2.
    pub fn effective_occupancy(&self, alpha: f64) -> f64 {
        0.5 * self.expected_pairs_in_double_cone(alpha)
    }

    /// Pair brightness that realises `mode_occupancy_nbar` for bins of
    /// half-angle `alpha`.
    pub fn mean_pairs_for_occupancy(&self, alpha: f64) -> f64 {
        2.0 * self.mode_occupancy_nbar / self.double_cone_fraction(alpha)
    }

    /// Time for the two source condensates to fully separate,
    /// t_sep = R_TF / (2 v_r) with R_TF = sqrt(2) sigma.
    pub fn separation_time(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.source_sigma / (2.0 * self.v_r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Ramsey,
    Parity,
}

impl Scheme {
    pub fn label(self) -> &'static str {
        match self {
            Scheme::Ramsey => "ramsey",
            Scheme::Parity => "parity",
        }
    }
}

/// Interrogation sequence parameters for one dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceConfig {
    pub scheme: Scheme,
    /// Ramsey: time of the first pi/2 pulse after the collision, s.
    pub pulse1_time: f64,
    /// Delay between pulses (Ramsey) or readout time after the collision
    /// (parity), s.
    pub interrogation_tau: f64,
    /// Interferometric contrast used when drawing Ramsey outcomes.
    pub contrast: f64,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Ramsey,
            pulse1_time: 3e-3,
            interrogation_tau: 1e-6,
            contrast: 1.0,
        }
    }
}

impl SequenceConfig {
    pub fn validate(&self, halo: &HaloConfig) -> Result<(), SimulateError> {
        if !(self.interrogation_tau >= 0.0) {
            return Err(SimulateError::InvalidSequence(format!(
                "interrogation_tau must be >= 0, got {}",
                self.interrogation_tau
            )));
        }
        if !(0.0..=1.0).contains(&self.contrast) {
            return Err(SimulateError::InvalidSequence(format!(
                "contrast must lie in [0, 1], got {}",
                self.contrast
            )));
        }
        match self.scheme {
            Scheme::Ramsey => {
                if !(self.pulse1_time >= 0.0) {
                    return Err(SimulateError::InvalidSequence(
                        "pulse1_time must be >= 0".into(),
                    ));
                }
            }
            Scheme::Parity => {
                // The readout pulse must come after the condensates have
                // separated, otherwise pairs keep being scattered into the
                // halo after the basis rotation.
                let t_sep = halo.separation_time();
                if self.interrogation_tau < t_sep {
                    return Err(SimulateError::InvalidSequence(format!(
                        "parity readout at {:.3e} s precedes source separation at {:.3e} s",
                        self.interrogation_tau, t_sep
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Detection chain parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Quantum efficiency of the detector.
    pub efficiency_eta: f64,
    /// Free-fall distance to the detector plane, m.
    pub fall_distance: f64,
    /// Gaussian blur of the arrival time, s (1 sigma).
    pub t_star_resolution: f64,
    /// Gaussian blur of the in-plane position, m (1 sigma).
    pub xy_resolution: f64,
    /// Full Stern-Gerlach velocity separation between the two spin bands
    /// along z, m/s. Up receives +kick/2, down receives -kick/2.
    pub sg_velocity_kick: f64,
    /// Symmetric near-identity distortion applied to the velocities of the
    /// magnetically sensitive m_J = +1 (up) atoms.
    pub lensing_matrix: Matrix3<f64>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            efficiency_eta: 0.1,
            fall_distance: 0.848,
            t_star_resolution: 3e-6,
            xy_resolution: 120e-6,
            // Twice the scattering speed: the band centroids then sit at
            // +-v_r, mirroring the separation of the two collision sources.
            sg_velocity_kick: 0.12,
            lensing_matrix: Matrix3::identity(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), SimulateError> {
        if !(0.0..=1.0).contains(&self.efficiency_eta) {
            return Err(SimulateError::InvalidDetector(format!(
                "efficiency_eta must lie in [0, 1], got {}",
                self.efficiency_eta
            )));
        }
        if !(self.fall_distance > 0.0) {
            return Err(SimulateError::InvalidDetector(
                "fall_distance must be positive".into(),
            ));
        }
        if self.t_star_resolution < 0.0 || self.xy_resolution < 0.0 {
            return Err(SimulateError::InvalidDetector(
                "resolutions must be >= 0".into(),
            ));
        }
        // Positive definite check via symmetric eigenvalues.
        let sym = 0.5 * (self.lensing_matrix + self.lensing_matrix.transpose());
        if sym != self.lensing_matrix {
            return Err(SimulateError::InvalidDetector(
                "lensing_matrix must be symmetric".into(),
            ));
        }
        let eig = sym.symmetric_eigen();
        if eig.eigenvalues.iter().any(|l| *l <= 0.0) {
            return Err(SimulateError::InvalidDetector(
                "lensing_matrix must be positive definite".into(),
            ));
        }
        Ok(())
    }
}

/// One simulated atom in the CM frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AtomRecord {
    pub pair_id: u32,
    /// Shared source position of the pair, m.
    pub source_position: Vector3<f64>,
    /// CM-frame velocity, m/s.
    pub velocity_cm: Vector3<f64>,
    /// Spin outcome; assigned by an interrogation sequence.
    pub spin: Option<SpinState>,
    /// Ground-truth interferometric phase (Ramsey) or mixing angle (parity).
    pub truth_phi: f64,
}

/// One experimental shot.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Shot {
    pub shot_id: u64,
    pub atoms: Vec<AtomRecord>,
}

impl Shot {
    /// Iterate pairs as (atom a, atom b) index tuples. Pairs are stored
    /// contiguously, so this is just a chunk walk.
    pub fn pair_indices(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.atoms.len() / 2).map(|p| (2 * p, 2 * p + 1))
    }
}

/// Detector-space record of a single atom impact.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionEvent {
    pub shot_id: u64,
    /// Arrival time, s.
    pub t_star: f64,
    pub x: f64,
    pub y: f64,
    /// Spin class; `Some` from the simulator (the Stern-Gerlach band is
    /// known), possibly re-assigned by classification.
    pub spin: Option<SpinState>,
}

/// Named logical RNG streams, combined with the run seed and a per-item index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RngStream {
    Shot = 1,
    Bootstrap = 2,
    ResolutionMc = 3,
    Synthetic = 4,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic per-item generator: the same (seed, stream, index) triple
/// yields the same stream on any worker.
pub fn derive_rng(seed: u64, stream: RngStream, index: u64) -> ChaCha12Rng {
    let mixed = splitmix64(seed ^ splitmix64((stream as u64) << 32 ^ splitmix64(index)));
    ChaCha12Rng::seed_from_u64(mixed)
}

fn sample_standard_normal3(rng: &mut impl Rng) -> Vector3<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

/// Draw one shot of the scattering halo: a Poisson number of pairs with
/// directions uniform on the sphere inside the allowed elevation band, speeds
/// normal around `v_r`, and a shared Gaussian source position per pair. Pair
/// atoms sit at exactly opposite CM velocities.
pub fn sample_halo(cfg: &HaloConfig, shot_id: u64, rng: &mut impl Rng) -> Shot {
    let n_pairs = if cfg.mean_pairs_per_shot > 0.0 {
        Poisson::new(cfg.mean_pairs_per_shot).unwrap().sample(rng) as usize
    } else {
        0
    };
    let z_max = cfg.polar_cap_deg.to_radians().sin();
    let speed_dist = Normal::new(cfg.v_r, cfg.radial_width_frac * cfg.v_r).unwrap();
    let mut atoms = Vec::with_capacity(2 * n_pairs);
    for pair_id in 0..n_pairs {
        let source = cfg.source_sigma * sample_standard_normal3(rng);
        let z = rng.gen_range(-z_max..=z_max);
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let rho = (1.0 - z * z).max(0.0).sqrt();
        let dir = Vector3::new(rho * theta.cos(), rho * theta.sin(), z);
        let speed = speed_dist.sample(rng).abs();
        let v = dir * speed;
        for sign in [1.0, -1.0] {
            atoms.push(AtomRecord {
                pair_id: pair_id as u32,
                source_position: source,
                velocity_cm: sign * v,
                spin: None,
                truth_phi: 0.0,
            });
        }
    }
    Shot { shot_id, atoms }
}

/// Apply a Ramsey sequence: each atom independently ends up in `up` with
/// probability (1 + C cos(phi)) / 2, where phi is the Larmor phase
/// accumulated along the atom's moving trajectory between the two pulses.
pub fn run_ramsey(
    shot: &mut Shot,
    field: &FieldModel,
    seq: &SequenceConfig,
    c: &PhysicalConstants,
    rng: &mut impl Rng,
) -> Result<(), SimulateError> {
    if seq.scheme != Scheme::Ramsey {
        return Err(SimulateError::SchemeMismatch {
            expected: "ramsey",
            got: seq.scheme.label(),
        });
    }
    let t0 = seq.pulse1_time;
    let t1 = seq.pulse1_time + seq.interrogation_tau;
    for atom in &mut shot.atoms {
        let phi = larmor_phase(c, field, &atom.source_position, &atom.velocity_cm, t0, t1)?;
        let p_up = (0.5 * (1.0 + seq.contrast * phi.cos())).clamp(0.0, 1.0);
        atom.truth_phi = phi;
        atom.spin = Some(if rng.gen_bool(p_up) {
            SpinState::Up
        } else {
            SpinState::Down
        });
    }
    Ok(())
}

/// Apply the parity readout: each pair's mixing angle is evolved to the
/// readout time and the joint x-basis spin outcome is drawn from the
/// corresponding two-body distribution.
pub fn run_parity(
    shot: &mut Shot,
    field: &FieldModel,
    seq: &SequenceConfig,
    c: &PhysicalConstants,
    rng: &mut impl Rng,
) -> Result<(), SimulateError> {
    if seq.scheme != Scheme::Parity {
        return Err(SimulateError::SchemeMismatch {
            expected: "parity",
            got: seq.scheme.label(),
        });
    }
    let n_atoms = shot.atoms.len();
    for p in 0..n_atoms / 2 {
        let (ia, ib) = (2 * p, 2 * p + 1);
        let v = shot.atoms[ia].velocity_cm;
        let speed = v.norm();
        let pair = PairState {
            mixing_angle: 0.0,
            direction: Unit::new_normalize(v),
            speed,
            birth_time: 0.0,
            source_position: shot.atoms[ia].source_position,
        };
        let phi = bell_mixing(c, field, &pair, seq.interrogation_tau)?;
        let probs = joint_xbasis_distribution(phi);
        let u: f64 = rng.gen();
        let outcome = if u < probs[0] {
            (SpinState::Up, SpinState::Up)
        } else if u < probs[0] + probs[1] {
            (SpinState::Up, SpinState::Down)
        } else if u < probs[0] + probs[1] + probs[2] {
            (SpinState::Down, SpinState::Up)
        } else {
            (SpinState::Down, SpinState::Down)
        };
        shot.atoms[ia].spin = Some(outcome.0);
        shot.atoms[ib].spin = Some(outcome.1);
        shot.atoms[ia].truth_phi = phi;
        shot.atoms[ib].truth_phi = phi;
    }
    Ok(())
}

/// Forward free-fall arrival time for a launch velocity `v_z` (positive up).
pub fn fall_time(v_z: f64, gravity: f64, fall_distance: f64) -> f64 {
    (v_z + (v_z * v_z + 2.0 * gravity * fall_distance).sqrt()) / gravity
}

/// Push a shot through the detection chain: Bernoulli(eta) thinning, the
/// spin-dependent Stern-Gerlach kick, lensing distortion of the up-class
/// velocities, the free-fall map, and Gaussian detector blur.
///
/// Atoms without an assigned spin (no sequence applied) are skipped.
pub fn detect(
    shot: &Shot,
    det: &DetectorConfig,
    c: &PhysicalConstants,
    rng: &mut impl Rng,
) -> Vec<DetectionEvent> {
    let t_blur = Normal::new(0.0, det.t_star_resolution).unwrap();
    let xy_blur = Normal::new(0.0, det.xy_resolution).unwrap();
    let mut events = Vec::new();
    for atom in &shot.atoms {
        let Some(spin) = atom.spin else { continue };
        if !rng.gen_bool(det.efficiency_eta) {
            continue;
        }
        let mut v = atom.velocity_cm;
        if spin == SpinState::Up {
            v = det.lensing_matrix * v;
        }
        v.z += 0.5 * det.sg_velocity_kick * spin.sign();
        let t_star = fall_time(v.z, c.gravity, det.fall_distance);
        let mut event = DetectionEvent {
            shot_id: shot.shot_id,
            t_star: t_star + t_blur.sample(rng),
            x: v.x * t_star + xy_blur.sample(rng),
            y: v.y * t_star + xy_blur.sample(rng),
            spin: Some(spin),
        };
        if event.t_star <= 0.0 {
            // Blur can in principle push t* negative; clamp to the unblurred
            // value rather than emit an unphysical record.
            event.t_star = t_star;
        }
        events.push(event);
    }
    events
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::pair_parity;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn rng(i: u64) -> ChaCha12Rng {
        derive_rng(0xD0_0D, RngStream::Shot, i)
    }

    #[test]
    fn empty_halo_when_mean_is_zero() {
        let cfg = HaloConfig {
            mean_pairs_per_shot: 0.0,
            ..HaloConfig::default()
        };
        let shot = sample_halo(&cfg, 0, &mut rng(0));
        assert!(shot.atoms.is_empty());
    }

    #[test]
    fn pair_momentum_sums_to_zero_exactly() {
        let cfg = HaloConfig {
            mean_pairs_per_shot: 50.0,
            ..HaloConfig::default()
        };
        let shot = sample_halo(&cfg, 0, &mut rng(1));
        assert!(!shot.atoms.is_empty());
        for (a, b) in shot.pair_indices() {
            let total = shot.atoms[a].velocity_cm + shot.atoms[b].velocity_cm;
            assert_eq!(total, Vector3::zeros());
            assert_eq!(
                shot.atoms[a].source_position,
                shot.atoms[b].source_position
            );
        }
    }

    #[test]
    fn halo_speed_and_width_match_config() {
        let cfg = HaloConfig {
            mean_pairs_per_shot: 1e5,
            ..HaloConfig::default()
        };
        let shot = sample_halo(&cfg, 0, &mut rng(2));
        let speeds: Vec<f64> = shot
            .pair_indices()
            .map(|(a, _)| shot.atoms[a].velocity_cm.norm())
            .collect();
        let n = speeds.len() as f64;
        let mean = speeds.iter().sum::<f64>() / n;
        let var = speeds.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let stderr = (var / n).sqrt();
        assert!((mean - cfg.v_r).abs() < 3.0 * stderr, "mean speed off");
        let measured_dk = var.sqrt() / mean;
        assert_relative_eq!(measured_dk, cfg.radial_width_frac, max_relative = 0.05);
    }

    #[test]
    fn halo_respects_polar_exclusion_and_azimuthal_uniformity() {
        let cfg = HaloConfig {
            mean_pairs_per_shot: 1e5,
            ..HaloConfig::default()
        };
        let shot = sample_halo(&cfg, 0, &mut rng(3));
        let z_max = cfg.polar_cap_deg.to_radians().sin();
        let mut azim = [0u64; 36];
        let mut n_pairs = 0u64;
        for (a, _) in shot.pair_indices() {
            let v = shot.atoms[a].velocity_cm;
            let dir = v / v.norm();
            assert!(dir.z.abs() <= z_max + 1e-12);
            let theta = v.y.atan2(v.x).rem_euclid(std::f64::consts::TAU);
            azim[(theta / std::f64::consts::TAU * 36.0) as usize % 36] += 1;
            n_pairs += 1;
        }
        // Chi-squared uniformity over 36 azimuthal bins at 1% significance
        // (99th percentile of chi2 with 35 dof).
        let expected = n_pairs as f64 / 36.0;
        let chi2: f64 = azim
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 57.342, "chi2 = {chi2}");
    }

    #[test]
    fn sampling_is_deterministic_for_fixed_seed() {
        let cfg = HaloConfig::default();
        let a = sample_halo(&cfg, 7, &mut rng(7));
        let b = sample_halo(&cfg, 7, &mut rng(7));
        assert_eq!(a, b);
    }

    #[test]
    fn ramsey_all_up_at_zero_phase_full_contrast() {
        let cfg = HaloConfig {
            mean_pairs_per_shot: 200.0,
            ..HaloConfig::default()
        };
        let c = PhysicalConstants::default();
        // Zero field means zero phase for every atom.
        let field = FieldModel::uniform(0.0);
        let seq = SequenceConfig {
            scheme: Scheme::Ramsey,
            pulse1_time: 3e-3,
            interrogation_tau: 1e-6,
            contrast: 1.0,
        };
        let mut shot = sample_halo(&cfg, 0, &mut rng(4));
        run_ramsey(&mut shot, &field, &seq, &c, &mut rng(5)).unwrap();
        assert!(shot
            .atoms
            .iter()
            .all(|a| a.spin == Some(SpinState::Up) && a.truth_phi == 0.0));
    }

    #[test]
    fn ramsey_zero_contrast_is_a_coin_flip() {
        let cfg = HaloConfig {
            mean_pairs_per_shot: 5000.0,
            ..HaloConfig::default()
        };
        let c = PhysicalConstants::default();
        let field = FieldModel::uniform(0.5);
        let seq = SequenceConfig {
            contrast: 0.0,
            ..SequenceConfig::default()
        };
        let mut shot = sample_halo(&cfg, 0, &mut rng(6));
        run_ramsey(&mut shot, &field, &seq, &c, &mut rng(7)).unwrap();
        let n = shot.atoms.len() as f64;
        let ups = shot
            .atoms
            .iter()
            .filter(|a| a.spin == Some(SpinState::Up))
            .count() as f64;
        let sigma = 0.5 * n.sqrt();
        assert!((ups - 0.5 * n).abs() < 4.0 * sigma);
    }

    #[test]
    fn ramsey_antipodal_up_probability_difference_matches_phase() {
        // Two still atoms at mirrored positions in a linear field; the
        // difference of up-probabilities follows the closed-form phases.
        let c = PhysicalConstants::default();
        let field = FieldModel::with_gradient(0.5, Vector3::new(4.0, 0.0, 0.0));
        let seq = SequenceConfig {
            scheme: Scheme::Ramsey,
            pulse1_time: 0.0,
            interrogation_tau: 2.0e-7,
            contrast: 1.0,
        };
        let r = Vector3::new(1.5e-4, 0.0, 0.0);
        let make_shot = |pos: Vector3<f64>| Shot {
            shot_id: 0,
            atoms: vec![AtomRecord {
                pair_id: 0,
                source_position: pos,
                velocity_cm: Vector3::zeros(),
                spin: None,
                truth_phi: 0.0,
            }],
        };
        let mut sa = make_shot(r);
        let mut sb = make_shot(-r);
        run_ramsey(&mut sa, &field, &seq, &c, &mut rng(8)).unwrap();
        run_ramsey(&mut sb, &field, &seq, &c, &mut rng(9)).unwrap();
        let expected =
            c.gamma * field.gradient.dot(&(2.0 * r)) * seq.interrogation_tau;
        assert_relative_eq!(
            sa.atoms[0].truth_phi - sb.atoms[0].truth_phi,
            expected,
            max_relative = 1e-12
        );
    }

    #[test]
    fn parity_zero_mixing_gives_only_correlated_outcomes() {
        let cfg = HaloConfig {
            mean_pairs_per_shot: 500.0,
            ..HaloConfig::default()
        };
        let c = PhysicalConstants::default();
        let field = FieldModel::uniform(0.5); // uniform: delta B = 0, Phi = 0
        let seq = SequenceConfig {
            scheme: Scheme::Parity,
            interrogation_tau: 1e-3,
            ..SequenceConfig::default()
        };
        let mut shot = sample_halo(&cfg, 0, &mut rng(10));
        run_parity(&mut shot, &field, &seq, &c, &mut rng(11)).unwrap();
        for (a, b) in shot.pair_indices() {
            assert_eq!(shot.atoms[a].spin, shot.atoms[b].spin);
            assert_eq!(shot.atoms[a].truth_phi, 0.0);
        }
    }

    #[test]
    fn parity_signed_sum_matches_multinomial_statistics() {
        // 1e4 pairs pinned at Phi = pi/4: the empirical signed sum of joint
        // outcomes estimates cos(pi/2) = 0 with binomial scatter.
        let c = PhysicalConstants::with_convention(crate::model::GammaConvention::CyclicAsAngular);
        let phi_target = std::f64::consts::FRAC_PI_4;
        // Pick a gradient and tau so that the mixing angle is exactly pi/4.
        let tau = 1.0e-3;
        let v_r = 0.06;
        let grad = 2.0 * phi_target / (c.gamma * v_r * tau * tau);
        let field = FieldModel::with_gradient(0.5, Vector3::new(grad, 0.0, 0.0));
        let seq = SequenceConfig {
            scheme: Scheme::Parity,
            interrogation_tau: tau,
            ..SequenceConfig::default()
        };
        let n_pairs = 10_000usize;
        let mut shot = Shot::default();
        for p in 0..n_pairs {
            for sign in [1.0, -1.0f64] {
                shot.atoms.push(AtomRecord {
                    pair_id: p as u32,
                    source_position: Vector3::zeros(),
                    velocity_cm: Vector3::new(sign * v_r, 0.0, 0.0),
                    spin: None,
                    truth_phi: 0.0,
                });
            }
        }
        run_parity(&mut shot, &field, &seq, &c, &mut rng(12)).unwrap();
        let mut signed = 0i64;
        for (a, b) in shot.pair_indices() {
            assert_relative_eq!(shot.atoms[a].truth_phi, phi_target, max_relative = 1e-12);
            let same = shot.atoms[a].spin == shot.atoms[b].spin;
            signed += if same { 1 } else { -1 };
        }
        let mean = signed as f64 / n_pairs as f64;
        let sigma = (1.0 - pair_parity(phi_target).powi(2)).sqrt() / (n_pairs as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "signed sum {mean} vs 3 sigma {}", 3.0 * sigma);
    }

    #[test]
    fn stationary_atom_arrival_time() {
        let c = PhysicalConstants::default();
        let det = DetectorConfig {
            t_star_resolution: 0.0,
            xy_resolution: 0.0,
            sg_velocity_kick: 0.0,
            efficiency_eta: 1.0,
            ..DetectorConfig::default()
        };
        let shot = Shot {
            shot_id: 0,
            atoms: vec![AtomRecord {
                pair_id: 0,
                source_position: Vector3::zeros(),
                velocity_cm: Vector3::zeros(),
                spin: Some(SpinState::Down),
                truth_phi: 0.0,
            }],
        };
        let events = detect(&shot, &det, &c, &mut rng(13));
        assert_eq!(events.len(), 1);
        // T* = sqrt(2 d / g) = 415.8 ms, i.e. about 416 ms.
        assert_abs_diff_eq!(events[0].t_star, 0.415_794, epsilon = 1e-5);
        assert_eq!(events[0].x, 0.0);
        assert_eq!(events[0].y, 0.0);
    }

    #[test]
    fn zero_efficiency_detects_nothing() {
        let cfg = HaloConfig {
            mean_pairs_per_shot: 100.0,
            ..HaloConfig::default()
        };
        let c = PhysicalConstants::default();
        let det = DetectorConfig {
            efficiency_eta: 0.0,
            ..DetectorConfig::default()
        };
        let mut shot = sample_halo(&cfg, 0, &mut rng(14));
        for a in &mut shot.atoms {
            a.spin = Some(SpinState::Up);
        }
        assert!(detect(&shot, &det, &c, &mut rng(15)).is_empty());
    }

    #[test]
    fn detected_count_is_binomial_in_eta() {
        let cfg = HaloConfig {
            mean_pairs_per_shot: 200.0,
            ..HaloConfig::default()
        };
        let c = PhysicalConstants::default();
        let det = DetectorConfig::default();
        let mut total_atoms = 0u64;
        let mut total_events = 0u64;
        for s in 0..200u64 {
            let mut shot = sample_halo(&cfg, s, &mut rng(100 + s));
            for a in &mut shot.atoms {
                a.spin = Some(if a.velocity_cm.x > 0.0 {
                    SpinState::Up
                } else {
                    SpinState::Down
                });
            }
            total_atoms += shot.atoms.len() as u64;
            total_events += detect(&shot, &det, &c, &mut rng(10_000 + s)).len() as u64;
        }
        let expected = det.efficiency_eta * total_atoms as f64;
        let sigma = (total_atoms as f64 * det.efficiency_eta * (1.0 - det.efficiency_eta)).sqrt();
        assert!(
            (total_events as f64 - expected).abs() < 3.0 * sigma,
            "events {total_events} vs expected {expected} +- {sigma}"
        );
    }

    #[test]
    fn occupancy_helpers_are_consistent() {
        let mut cfg = HaloConfig {
            mode_occupancy_nbar: 0.1,
            ..HaloConfig::default()
        };
        let alpha = std::f64::consts::PI / 10.0;
        cfg.mean_pairs_per_shot = cfg.mean_pairs_for_occupancy(alpha);
        assert_relative_eq!(cfg.effective_occupancy(alpha), 0.1, max_relative = 1e-12);
    }

    #[test]
    fn parity_sequence_validates_readout_time() {
        let halo = HaloConfig::default();
        let seq = SequenceConfig {
            scheme: Scheme::Parity,
            interrogation_tau: 1e-4, // before source separation (~0.4 ms)
            ..SequenceConfig::default()
        };
        assert!(seq.validate(&halo).is_err());
        let seq = SequenceConfig {
            scheme: Scheme::Parity,
            interrogation_tau: 0.8e-3,
            ..SequenceConfig::default()
        };
        assert!(seq.validate(&halo).is_ok());
    }
}
