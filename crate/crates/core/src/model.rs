//! Physical constants, magnetic field model, spin/pair states, and the
//! closed-form interferometry formulas shared by the simulator and the
//! estimators.
//!
//! Everything here is pure and stateless; all quantities are SI (m, s, kg)
//! except magnetic field strength, which is kept in gauss throughout.

use nalgebra::{Matrix3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TAU_RAD: f64 = std::f64::consts::TAU;

/// Reduced Planck constant, J s.
pub const HBAR: f64 = 1.054_571_817e-34;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("contrast must lie in [0, 1], got {0}")]
    ContrastOutOfRange(f64),
    #[error("detection efficiency must lie in (0, 1], got {0}")]
    EfficiencyOutOfRange(f64),
    #[error("atom count must be at least 1")]
    ZeroAtoms,
    #[error("interrogation time must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("reversed time interval: t1 = {t1} < t0 = {t0}")]
    ReversedInterval { t0: f64, t1: f64 },
    #[error("negative interrogation delay {0}")]
    NegativeDelay(f64),
    #[error("quadrature failed to converge (depth {depth}, residual {residual:.3e})")]
    QuadratureNonConvergent { depth: u32, residual: f64 },
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
}

/// Convention used for the gyromagnetic ratio of the 2^3S_1 manifold.
///
/// The ratio is usually quoted as 2.8 MHz/G, which is ambiguous between a
/// cyclic and an angular frequency. Both simulator and estimators always share
/// one constant, so recovered fields are convention independent; the flag only
/// fixes how phases map onto seconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaConvention {
    /// gamma = 2*pi*2.8e6 rad s^-1 G^-1 (default).
    Angular,
    /// gamma = 2.8e6 rad s^-1 G^-1, i.e. the cyclic number used directly.
    CyclicAsAngular,
}

impl GammaConvention {
    pub fn gamma(self) -> f64 {
        match self {
            GammaConvention::Angular => TAU_RAD * 2.8e6,
            GammaConvention::CyclicAsAngular => 2.8e6,
        }
    }
}

/// Physical constants of the apparatus and the atom.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    /// Gyromagnetic ratio, rad s^-1 G^-1.
    pub gamma: f64,
    /// Gravitational acceleration, m s^-2.
    pub gravity: f64,
    /// Free-fall distance from the source to the detector plane, m.
    pub fall_distance: f64,
    /// Mass of a helium-4 atom, kg.
    pub mass: f64,
    /// Wavevector of the Raman laser, m^-1 (2*pi / 1.083 um).
    pub photon_wavevector: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self::with_convention(GammaConvention::Angular)
    }
}

impl PhysicalConstants {
    pub fn with_convention(convention: GammaConvention) -> Self {
        Self {
            gamma: convention.gamma(),
            gravity: 9.81,
            fall_distance: 0.848,
            mass: 6.646_473_1e-27,
            photon_wavevector: TAU_RAD / 1.083e-6,
        }
    }

    /// Time of flight of an initially stationary atom, sqrt(2d/g).
    pub fn stationary_fall_time(&self) -> f64 {
        (2.0 * self.fall_distance / self.gravity).sqrt()
    }

    /// Single-photon recoil velocity, hbar k / m.
    pub fn recoil_velocity(&self) -> f64 {
        HBAR * self.photon_wavevector / self.mass
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            self.gamma,
            self.gravity,
            self.fall_distance,
            self.mass,
            self.photon_wavevector,
        ];
        if fields.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(ModelError::NonFinite("physical constants"));
        }
        Ok(())
    }
}

/// Magnetic field strength model B(r) = B0 + grad.r + r^T C r / 2.
///
/// The quadratic term exists to drive the lensing-distortion analysis path
/// and defaults to zero, in which case every phase integral below has a
/// closed form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldModel {
    /// Uniform field strength, gauss.
    pub b0: f64,
    /// Linear gradient, gauss / m.
    pub gradient: Vector3<f64>,
    /// Symmetric curvature term, gauss / m^2.
    pub curvature: Matrix3<f64>,
}

impl FieldModel {
    pub fn uniform(b0: f64) -> Self {
        Self {
            b0,
            gradient: Vector3::zeros(),
            curvature: Matrix3::zeros(),
        }
    }

    pub fn with_gradient(b0: f64, gradient: Vector3<f64>) -> Self {
        Self {
            b0,
            gradient,
            curvature: Matrix3::zeros(),
        }
    }

    pub fn is_linear(&self) -> bool {
        self.curvature == Matrix3::zeros()
    }

    /// Field strength at position `r` (gauss).
    pub fn field_at(&self, r: &Vector3<f64>) -> f64 {
        self.b0 + self.gradient.dot(r) + 0.5 * (self.curvature * r).dot(r)
    }
}

/// Spin label for the two Raman-coupled sublevels: m_J = +1 is "up",
/// m_J = 0 is "down".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpinState {
    Up,
    Down,
}

impl SpinState {
    pub fn sign(self) -> f64 {
        match self {
            SpinState::Up => 1.0,
            SpinState::Down => -1.0,
        }
    }

    pub fn index(self) -> usize {
        match self {
            SpinState::Up => 0,
            SpinState::Down => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SpinState::Up => "up",
            SpinState::Down => "down",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "up" => Some(SpinState::Up),
            "down" => Some(SpinState::Down),
            _ => None,
        }
    }
}

/// Kinematic state of one scattered pair in the centre-of-mass frame.
///
/// The two atoms fly apart at `+- speed * direction` from a shared source
/// position. `mixing_angle` tracks the accumulated symmetric/antisymmetric
/// superposition angle.
#[derive(Clone, Debug, PartialEq)]
pub struct PairState {
    /// Accumulated mixing angle, radians.
    pub mixing_angle: f64,
    /// Scattering axis, unit vector.
    pub direction: Unit<Vector3<f64>>,
    /// Scattering speed of each atom in the CM frame, m/s.
    pub speed: f64,
    /// Pair creation time, s.
    pub birth_time: f64,
    /// Shared source position, m.
    pub source_position: Vector3<f64>,
}

impl PairState {
    pub fn new(direction: Unit<Vector3<f64>>, speed: f64, source_position: Vector3<f64>) -> Self {
        Self {
            mixing_angle: 0.0,
            direction,
            speed,
            birth_time: 0.0,
            source_position,
        }
    }
}

/// Larmor phase gamma * integral of B along the moving trajectory
/// r(t) = r0 + v t over [t0, t1].
///
/// Linear fields use the closed form; curvature falls back to adaptive
/// quadrature and reports non-convergence instead of returning silently.
pub fn larmor_phase(
    c: &PhysicalConstants,
    field: &FieldModel,
    r0: &Vector3<f64>,
    v: &Vector3<f64>,
    t0: f64,
    t1: f64,
) -> Result<f64, ModelError> {
    if !(t0.is_finite() && t1.is_finite()) {
        return Err(ModelError::NonFinite("time interval"));
    }
    if t1 < t0 {
        return Err(ModelError::ReversedInterval { t0, t1 });
    }
    if field.is_linear() {
        let dt = t1 - t0;
        let quad = 0.5 * (t1 * t1 - t0 * t0);
        return Ok(c.gamma * (field.field_at(r0) * dt + field.gradient.dot(v) * quad));
    }
    let scale = (field.field_at(r0).abs() * (t1 - t0)).max(f64::MIN_POSITIVE);
    let integral = adaptive_simpson(&|t| field.field_at(&(r0 + v * t)), t0, t1, 1e-13 * scale)?;
    Ok(c.gamma * integral)
}

/// Bell mixing angle of a counter-propagating pair after delay `tau`:
/// Phi = gamma/2 * integral of [B(r0 + v s) - B(r0 - v s)] ds over [0, tau].
///
/// For a linear field this reduces to (gamma v_r / 2) (dB/dr) tau^2 with
/// dB/dr the gradient projected on the scattering axis.
pub fn bell_mixing(
    c: &PhysicalConstants,
    field: &FieldModel,
    pair: &PairState,
    tau: f64,
) -> Result<f64, ModelError> {
    if !tau.is_finite() {
        return Err(ModelError::NonFinite("tau"));
    }
    if tau < 0.0 {
        return Err(ModelError::NegativeDelay(tau));
    }
    let v = pair.direction.into_inner() * pair.speed;
    if field.is_linear() {
        return Ok(0.5 * c.gamma * field.gradient.dot(&v) * tau * tau);
    }
    let r0 = pair.source_position;
    let delta_b = |s: f64| field.field_at(&(r0 + v * s)) - field.field_at(&(r0 - v * s));
    let scale = (field.gradient.norm() * pair.speed * tau * tau).max(f64::MIN_POSITIVE);
    let integral = adaptive_simpson(&delta_b, 0.0, tau, 1e-13 * scale)?;
    Ok(0.5 * c.gamma * integral)
}

/// Two-body x-basis parity of a pair at mixing angle `phi`: cos(2 phi).
pub fn pair_parity(phi: f64) -> f64 {
    (2.0 * phi).cos()
}

/// Joint x-basis outcome probabilities (up-up, up-down, down-up, down-down)
/// for a pair at mixing angle `phi`.
pub fn joint_xbasis_distribution(phi: f64) -> [f64; 4] {
    let c2 = phi.cos().powi(2);
    let s2 = phi.sin().powi(2);
    [0.5 * c2, 0.5 * s2, 0.5 * s2, 0.5 * c2]
}

/// Ramsey polarisation P = C cos(phase).
pub fn ramsey_polarisation(phase: f64, contrast: f64) -> Result<f64, ModelError> {
    if !(0.0..=1.0).contains(&contrast) {
        return Err(ModelError::ContrastOutOfRange(contrast));
    }
    Ok(contrast * phase.cos())
}

/// Standard quantum limit of a Larmor-precession magnetometer,
/// Delta B = 1 / (gamma sqrt(N tau)), in gauss.
pub fn sql_delta_b(c: &PhysicalConstants, n_atoms: u64, tau: f64) -> Result<f64, ModelError> {
    if n_atoms == 0 {
        return Err(ModelError::ZeroAtoms);
    }
    if !(tau > 0.0) {
        return Err(ModelError::NonPositiveTime(tau));
    }
    Ok(1.0 / (c.gamma * (n_atoms as f64 * tau).sqrt()))
}

/// Minimum phase uncertainty of an N-atom coherent-state Ramsey sequence at
/// detection efficiency `eta`: 1 / sqrt(N eta).
pub fn min_phase_ramsey(n_atoms: u64, eta: f64) -> Result<f64, ModelError> {
    if n_atoms == 0 {
        return Err(ModelError::ZeroAtoms);
    }
    check_eta(eta)?;
    Ok(1.0 / (n_atoms as f64 * eta).sqrt())
}

/// Minimum phase uncertainty of the two-atom entangled scheme at detection
/// efficiency `eta`: 1 / (2 eta). Reaches the Heisenberg value 1/2 at eta = 1
/// and beats the ideal N = 2 standard quantum limit only for eta > 1/sqrt(2).
pub fn min_phase_bell(eta: f64) -> Result<f64, ModelError> {
    check_eta(eta)?;
    Ok(1.0 / (2.0 * eta))
}

fn check_eta(eta: f64) -> Result<(), ModelError> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(ModelError::EfficiencyOutOfRange(eta));
    }
    Ok(())
}

/// Adaptive Simpson quadrature with an absolute tolerance.
pub(crate) fn adaptive_simpson(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    tol: f64,
) -> Result<f64, ModelError> {
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = simpson(a, b, fa, fm, fb);
    simpson_recurse(f, a, b, fa, fm, fb, whole, tol.max(1e-300), 48)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn simpson_recurse(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64, ModelError> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let residual = left + right - whole;
    if residual.abs() <= 15.0 * tol {
        return Ok(left + right + residual / 15.0);
    }
    if depth == 0 {
        return Err(ModelError::QuadratureNonConvergent {
            depth: 0,
            residual: residual.abs(),
        });
    }
    let lv = simpson_recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?;
    let rv = simpson_recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?;
    Ok(lv + rv)
}
