//! Conical binning on the halo sphere, spin-resolved counting, back-to-back
//! second-order correlation functions, parity extraction, and bootstrap
//! uncertainties.
//!
//! All counting is integer-exact and accumulated in shot order, so results
//! are bit-identical regardless of worker count. Correlation denominators use
//! the standard uncorrelated reference built from atoms of different shots.

use nalgebra::{Unit, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::SpinState;
use crate::reconstruct::{CloudAtom, CloudGroup};
use crate::simulate::{derive_rng, RngStream};

#[derive(Debug, Error)]
pub enum CorrelateError {
    #[error("polarisation undefined: no atoms in bin")]
    EmptyBin,
    #[error("invalid bin: {0}")]
    InvalidBin(String),
    #[error("correlation amplitude G = {0} does not exceed 1; occupancy saturated")]
    SaturatedAmplitude(f64),
    #[error("zero denominator in correlation ratio")]
    ZeroDenominator,
    #[error("need at least two shots for cross-shot normalisation, got {0}")]
    TooFewShots(u64),
}

/// Conical integration volume: apex at the halo centre, axis on the unit
/// sphere, half-angle `alpha`, and a radial window in r/r0. Membership is
/// inclusive at the boundary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConicalBin {
    pub axis: Unit<Vector3<f64>>,
    pub half_angle: f64,
    pub radial_window: (f64, f64),
}

impl ConicalBin {
    pub fn new(
        axis: Unit<Vector3<f64>>,
        half_angle: f64,
        radial_window: (f64, f64),
    ) -> Result<Self, CorrelateError> {
        if !(half_angle > 0.0 && half_angle <= std::f64::consts::PI) {
            return Err(CorrelateError::InvalidBin(format!(
                "half_angle must lie in (0, pi], got {half_angle}"
            )));
        }
        if !(radial_window.0 < radial_window.1) {
            return Err(CorrelateError::InvalidBin(format!(
                "radial window must have lo < hi, got {radial_window:?}"
            )));
        }
        Ok(Self {
            axis,
            half_angle,
            radial_window,
        })
    }

    fn in_window(&self, k_norm: f64) -> bool {
        k_norm >= self.radial_window.0 && k_norm <= self.radial_window.1
    }

    /// Atom inside the single cone around `axis`.
    pub fn contains(&self, k_hat: &Vector3<f64>, k_norm: f64) -> bool {
        if !self.in_window(k_norm) {
            return false;
        }
        k_hat.dot(&self.axis).clamp(-1.0, 1.0).acos() <= self.half_angle
    }

    /// Which lobe of the double cone along +-axis the atom falls in, if any.
    pub fn double_cone_side(&self, k_hat: &Vector3<f64>, k_norm: f64) -> Option<Side> {
        if !self.in_window(k_norm) {
            return None;
        }
        let angle = k_hat.dot(&self.axis).clamp(-1.0, 1.0).acos();
        if angle <= self.half_angle {
            Some(Side::Plus)
        } else if std::f64::consts::PI - angle <= self.half_angle {
            Some(Side::Minus)
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Plus,
    Minus,
}

/// Equirectangular lattice of conical bins covering azimuth [0, 2 pi) and
/// elevation [-phi_max, phi_max], the band left open by the polar exclusion.
#[derive(Clone, Debug)]
pub struct BinGrid {
    pub n_theta: usize,
    pub n_phi: usize,
    pub phi_max_deg: f64,
    pub half_angle: f64,
    pub radial_window: (f64, f64),
    /// Bin centres, theta-major order.
    pub cells: Vec<GridCell>,
}

#[derive(Clone, Copy, Debug)]
pub struct GridCell {
    /// Azimuth of the axis, radians in [0, 2 pi).
    pub theta: f64,
    /// Elevation of the axis, radians.
    pub phi: f64,
    pub bin: ConicalBin,
}

impl BinGrid {
    /// Build the lattice. `n_theta` must be even so that every cell has its
    /// antipode on the grid.
    pub fn equirectangular(
        n_theta: usize,
        n_phi: usize,
        phi_max_deg: f64,
        half_angle: f64,
        radial_window: (f64, f64),
    ) -> Result<Self, CorrelateError> {
        if n_theta == 0 || n_theta % 2 != 0 || n_phi == 0 {
            return Err(CorrelateError::InvalidBin(format!(
                "grid must have even n_theta >= 2 and n_phi >= 1, got {n_theta} x {n_phi}"
            )));
        }
        let phi_max = phi_max_deg.to_radians();
        let d_theta = std::f64::consts::TAU / n_theta as f64;
        let d_phi = 2.0 * phi_max / n_phi as f64;
        let mut cells = Vec::with_capacity(n_theta * n_phi);
        for it in 0..n_theta {
            let theta = it as f64 * d_theta;
            for ip in 0..n_phi {
                let phi = -phi_max + (ip as f64 + 0.5) * d_phi;
                let axis = Vector3::new(
                    phi.cos() * theta.cos(),
                    phi.cos() * theta.sin(),
                    phi.sin(),
                );
                cells.push(GridCell {
                    theta,
                    phi,
                    bin: ConicalBin::new(Unit::new_normalize(axis), half_angle, radial_window)?,
                });
            }
        }
        Ok(Self {
            n_theta,
            n_phi,
            phi_max_deg,
            half_angle,
            radial_window,
            cells,
        })
    }

    /// Index of the cell whose axis is the antipode of cell `i`.
    pub fn antipode_index(&self, i: usize) -> usize {
        let it = i / self.n_phi;
        let ip = i % self.n_phi;
        let it_opp = (it + self.n_theta / 2) % self.n_theta;
        let ip_opp = self.n_phi - 1 - ip;
        it_opp * self.n_phi + ip_opp
    }
}

/// Count atoms of one spin inside a single cone.
pub fn atoms_in_bin(atoms: &[CloudAtom], bin: &ConicalBin, spin: SpinState) -> u64 {
    atoms
        .iter()
        .filter(|a| a.spin == spin && bin.contains(&a.k_hat, a.k_norm))
        .count() as u64
}

/// Normalised polarisation (n_up - n_down) / (n_up + n_down).
pub fn polarisation(n_up: u64, n_down: u64) -> Result<f64, CorrelateError> {
    let total = n_up + n_down;
    if total == 0 {
        return Err(CorrelateError::EmptyBin);
    }
    Ok((n_up as f64 - n_down as f64) / total as f64)
}

/// Per-shot, spin-resolved counts in the two lobes of a double cone.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ConeCounts {
    /// [up, down] counts in the +axis lobe.
    pub plus: [u32; 2],
    /// [up, down] counts in the -axis lobe.
    pub minus: [u32; 2],
}

impl ConeCounts {
    pub fn total(&self) -> u64 {
        (self.plus[0] + self.plus[1] + self.minus[0] + self.minus[1]) as u64
    }
}

/// Count a cloud group into per-shot double-cone tallies. The result has one
/// entry per shot in the group, including shots with no atoms.
pub fn count_double_cone(group: &CloudGroup, bin: &ConicalBin) -> Vec<ConeCounts> {
    let mut counts = vec![ConeCounts::default(); group.n_shots as usize];
    for atom in &group.atoms {
        if let Some(side) = bin.double_cone_side(&atom.k_hat, atom.k_norm) {
            let slot = &mut counts[group.shot_index(atom)];
            match side {
                Side::Plus => slot.plus[atom.spin.index()] += 1,
                Side::Minus => slot.minus[atom.spin.index()] += 1,
            }
        }
    }
    counts
}

/// One localised back-to-back correlation value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct G2Value {
    pub value: f64,
    /// Within-shot coincidence count (numerator, unnormalised).
    pub coincidences: u64,
    /// Cross-shot reference count (denominator, unnormalised).
    pub reference: f64,
    pub valid: bool,
}

/// The four spin-resolved localised correlation values of one bin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct G2Set {
    pub uu: G2Value,
    pub ud: G2Value,
    pub du: G2Value,
    pub dd: G2Value,
}

impl G2Set {
    pub fn values(&self) -> [&G2Value; 4] {
        [&self.uu, &self.ud, &self.du, &self.dd]
    }

    pub fn all_valid(&self) -> bool {
        self.values().iter().all(|v| v.valid)
    }

    /// Spin-integrated correlation amplitude G (mean of the four values).
    pub fn spin_integrated(&self) -> f64 {
        self.values().iter().map(|v| v.value).sum::<f64>() / 4.0
    }
}

/// Localised back-to-back g2 for spins (i, j) from per-shot double-cone
/// counts: within-shot coincidences across the two lobes over the cross-shot
/// product-of-singles reference.
pub fn g2_bb_local(counts: &[ConeCounts], i: SpinState, j: SpinState) -> G2Value {
    let s = counts.len() as u64;
    if s < 2 {
        return G2Value {
            value: f64::NAN,
            coincidences: 0,
            reference: 0.0,
            valid: false,
        };
    }
    let (ii, jj) = (i.index(), j.index());
    let mut num = 0u64;
    let mut diag = 0u64;
    let mut plus_i = 0u64;
    let mut minus_j = 0u64;
    let mut minus_i = 0u64;
    let mut plus_j = 0u64;
    for c in counts {
        let pi = c.plus[ii] as u64;
        let mj = c.minus[jj] as u64;
        let mi = c.minus[ii] as u64;
        let pj = c.plus[jj] as u64;
        num += pi * mj + mi * pj;
        diag += pi * mj + mi * pj;
        plus_i += pi;
        minus_j += mj;
        minus_i += mi;
        plus_j += pj;
    }
    // Sum over ordered shot pairs (s != s') of the same cross products.
    let cross = (plus_i * minus_j + minus_i * plus_j) as f64 - diag as f64;
    let num_rate = num as f64 / s as f64;
    let ref_rate = cross / (s as f64 * (s as f64 - 1.0));
    if ref_rate <= 0.0 {
        return G2Value {
            value: f64::NAN,
            coincidences: num,
            reference: cross,
            valid: false,
        };
    }
    G2Value {
        value: num_rate / ref_rate,
        coincidences: num,
        reference: cross,
        valid: true,
    }
}

/// All four spin combinations for one bin.
pub fn g2_set(counts: &[ConeCounts]) -> G2Set {
    G2Set {
        uu: g2_bb_local(counts, SpinState::Up, SpinState::Up),
        ud: g2_bb_local(counts, SpinState::Up, SpinState::Down),
        du: g2_bb_local(counts, SpinState::Down, SpinState::Up),
        dd: g2_bb_local(counts, SpinState::Down, SpinState::Down),
    }
}

/// x-basis correlation coefficient from the four localised correlation
/// values: (uu - ud - du + dd) / (uu + ud + du + dd).
pub fn exx_from_g2(set: &G2Set) -> Result<f64, CorrelateError> {
    let [uu, ud, du, dd] = set.values().map(|v| v.value);
    let denom = uu + ud + du + dd;
    if !set.all_valid() || denom == 0.0 {
        return Err(CorrelateError::ZeroDenominator);
    }
    Ok((uu - ud - du + dd) / denom)
}

/// Direct x-basis correlation coefficient from per-shot angular momentum
/// components: sum_s J(+q) J(-q) / sum_s N(+q) N(-q).
pub fn exx_direct(counts: &[ConeCounts]) -> Result<f64, CorrelateError> {
    let mut num = 0i64;
    let mut den = 0i64;
    for c in counts {
        let j_plus = c.plus[0] as i64 - c.plus[1] as i64;
        let j_minus = c.minus[0] as i64 - c.minus[1] as i64;
        let n_plus = (c.plus[0] + c.plus[1]) as i64;
        let n_minus = (c.minus[0] + c.minus[1]) as i64;
        num += j_plus * j_minus;
        den += n_plus * n_minus;
    }
    if den == 0 {
        return Err(CorrelateError::ZeroDenominator);
    }
    Ok(num as f64 / den as f64)
}

/// Result of rescaling a measured correlation coefficient to single-pair
/// parity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaledParity {
    pub parity: f64,
    /// Set when |parity| exceeds 1 by more than 3 standard errors.
    pub clamped: bool,
}

/// Undo the finite-occupancy reduction of the correlation coefficient:
/// parity = (1 - 1/G)^-1 E_xx. Requires G > 1.
pub fn scale_parity(exx: f64, g: f64, stderr: Option<f64>) -> Result<ScaledParity, CorrelateError> {
    if !(g > 1.0) {
        return Err(CorrelateError::SaturatedAmplitude(g));
    }
    let parity = exx / (1.0 - 1.0 / g);
    let tol = 1.0 + 3.0 * stderr.unwrap_or(0.0);
    Ok(ScaledParity {
        parity,
        clamped: parity.abs() > tol,
    })
}

/// Mode occupancy from the spin-integrated correlation amplitude,
/// nbar = 1 / (2 (G - 1)). G <= 1 is reported as saturated.
pub fn nbar_from_g(g: f64) -> Result<f64, CorrelateError> {
    if !(g > 1.0) {
        return Err(CorrelateError::SaturatedAmplitude(g));
    }
    Ok(1.0 / (2.0 * (g - 1.0)))
}

/// Radial grid over |k + k'| for the halo-integrated correlation function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaKGrid {
    pub max: f64,
    pub n_cells: usize,
}

impl DeltaKGrid {
    fn cell(&self, dk: f64) -> Option<usize> {
        if dk >= self.max {
            return None;
        }
        Some((dk / self.max * self.n_cells as f64) as usize)
    }

    pub fn edges(&self, cell: usize) -> (f64, f64) {
        let w = self.max / self.n_cells as f64;
        (cell as f64 * w, (cell + 1) as f64 * w)
    }
}

/// One cell of the halo-integrated correlation curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct G2Cell {
    pub lo: f64,
    pub hi: f64,
    /// Per-shot coincidence rate.
    pub numerator: f64,
    /// Cross-shot reference rate.
    pub denominator: f64,
    /// None when the reference is empty (flagged invalid).
    pub value: Option<f64>,
}

/// Halo-integrated back-to-back correlation versus |k + k'| for spins (i, j).
///
/// The numerator histograms within-shot pairs; the reference mixes each shot
/// with the following `mix_window` shots (cyclically), which leaves the
/// estimator deterministic.
pub fn g2_bb_integrated(
    group: &CloudGroup,
    i: SpinState,
    j: SpinState,
    grid: &DeltaKGrid,
    mix_window: usize,
) -> Result<Vec<G2Cell>, CorrelateError> {
    if group.n_shots < 2 {
        return Err(CorrelateError::TooFewShots(group.n_shots));
    }
    let n_shots = group.n_shots as usize;
    let mix_window = mix_window.clamp(1, n_shots - 1);

    // Split atoms into per-shot spin-filtered momentum vectors.
    let mut per_shot_i: Vec<Vec<Vector3<f64>>> = vec![Vec::new(); n_shots];
    let mut per_shot_j: Vec<Vec<Vector3<f64>>> = vec![Vec::new(); n_shots];
    for atom in &group.atoms {
        let k = atom.k_hat * atom.k_norm;
        let idx = group.shot_index(atom);
        if atom.spin == i {
            per_shot_i[idx].push(k);
        }
        if atom.spin == j {
            per_shot_j[idx].push(k);
        }
    }

    let hist_pairs = |cell_counts: &mut Vec<u64>, a: &[Vector3<f64>], b: &[Vector3<f64>], same_shot: bool| {
        for (ai, ka) in a.iter().enumerate() {
            for (bi, kb) in b.iter().enumerate() {
                if same_shot && i == j && ai == bi {
                    continue; // an atom does not pair with itself
                }
                if let Some(cell) = grid.cell((ka + kb).norm()) {
                    cell_counts[cell] += 1;
                }
            }
        }
    };

    let (num_hist, den_hist) = (0..n_shots)
        .into_par_iter()
        .map(|s| {
            let mut num = vec![0u64; grid.n_cells];
            let mut den = vec![0u64; grid.n_cells];
            hist_pairs(&mut num, &per_shot_i[s], &per_shot_j[s], true);
            for w in 1..=mix_window {
                let other = (s + w) % n_shots;
                hist_pairs(&mut den, &per_shot_i[s], &per_shot_j[other], false);
            }
            (num, den)
        })
        .reduce(
            || (vec![0u64; grid.n_cells], vec![0u64; grid.n_cells]),
            |(mut na, mut da), (nb, db)| {
                for (x, y) in na.iter_mut().zip(nb) {
                    *x += y;
                }
                for (x, y) in da.iter_mut().zip(db) {
                    *x += y;
                }
                (na, da)
            },
        );

    let n_pairs_mixed = (n_shots * mix_window) as f64;
    Ok((0..grid.n_cells)
        .map(|cidx| {
            let (lo, hi) = grid.edges(cidx);
            let numerator = num_hist[cidx] as f64 / n_shots as f64;
            let denominator = den_hist[cidx] as f64 / n_pairs_mixed;
            let value = if denominator > 0.0 {
                Some(numerator / denominator)
            } else {
                None
            };
            G2Cell {
                lo,
                hi,
                numerator,
                denominator,
                value,
            }
        })
        .collect())
}

/// Bootstrap standard error of a shot-level estimator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapEstimate {
    pub stderr: f64,
    pub mean: f64,
    /// Resamples skipped because the estimator failed on them.
    pub skipped: usize,
}

/// Resample shot indices with replacement and return the standard deviation
/// of the estimator across resamples. Resamples draw from per-index ChaCha
/// streams, so the result is deterministic for a given seed under any worker
/// count; estimator failures skip the resample and are counted.
pub fn bootstrap_stderr<F>(
    n_items: usize,
    estimator: F,
    n_resamples: usize,
    seed: u64,
) -> BootstrapEstimate
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    let values: Vec<Option<f64>> = (0..n_resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = derive_rng(seed, RngStream::Bootstrap, r as u64);
            let indices: Vec<usize> = (0..n_items).map(|_| rng.gen_range(0..n_items)).collect();
            estimator(&indices)
        })
        .collect();
    summarize_bootstrap(&values)
}

pub(crate) fn summarize_bootstrap(values: &[Option<f64>]) -> BootstrapEstimate {
    let kept: Vec<f64> = values.iter().flatten().copied().collect();
    let skipped = values.len() - kept.len();
    if kept.len() < 2 {
        return BootstrapEstimate {
            stderr: f64::INFINITY,
            mean: kept.first().copied().unwrap_or(f64::NAN),
            skipped,
        };
    }
    let n = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / n;
    let var = kept.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    BootstrapEstimate {
        stderr: var.sqrt(),
        mean,
        skipped,
    }
}
