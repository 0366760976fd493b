//! End-to-end orchestration of the simulation and analysis chain, shared by
//! the command-line tools and the integration tests.
//!
//! Stages communicate through plain data (shots, events, clouds, maps);
//! file I/O lives with the CLI. Shot generation is parallel over per-shot
//! derived RNG streams and reduces in shot order, so every stage is
//! deterministic for a fixed seed under any worker count.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlate::BinGrid;
use crate::estimate::{
    fit_gradient_vector, fit_ramsey, histogram_stats, map_field, map_gradient, EstimateError,
    FieldMap, GradientMap, GradientVectorFit, MapHistogram, MapOptions, RamseyFit, SeriesPoint,
};
use crate::model::{min_phase_bell, min_phase_ramsey, sql_delta_b, FieldModel, ModelError,
    PhysicalConstants, SpinState};
use crate::reconstruct::{
    classify_spin, fit_ellipsoid, halo_statistics, invert_tof, normalize_halo, refine_ellipsoid,
    resolution_moments, resolution_monte_carlo, CloudAtom, CloudGroup, EllipsoidFit,
    HaloStatistics, McMoments, RadialPrefilter, ReconstructError, ResolutionMoments,
    ResolutionParams,
};
use crate::simulate::{
    derive_rng, detect, run_parity, run_ramsey, sample_halo, DetectionEvent, DetectorConfig,
    HaloConfig, RngStream, Scheme, SequenceConfig, Shot, SimulateError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Reconstruct(#[from] ReconstructError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error("scheme mismatch: this analysis needs {expected} data")]
    WrongScheme { expected: &'static str },
    #[error("no events to reconstruct")]
    EmptyInput,
    #[error("too few {side} atoms for the lensing fit: {got}")]
    TooFewClassAtoms { side: &'static str, got: usize },
}

/// Interrogation plan: one scheme swept over a list of delays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequencePlan {
    pub scheme: Scheme,
    pub pulse1_time: f64,
    pub taus: Vec<f64>,
    pub shots_per_tau: u64,
    pub contrast: f64,
}

impl SequencePlan {
    pub fn sequence_at(&self, tau: f64) -> SequenceConfig {
        SequenceConfig {
            scheme: self.scheme,
            pulse1_time: self.pulse1_time,
            interrogation_tau: tau,
            contrast: self.contrast,
        }
    }

    pub fn validate(&self, halo: &HaloConfig) -> Result<(), SimulateError> {
        if self.taus.is_empty() {
            return Err(SimulateError::InvalidSequence("taus must be nonempty".into()));
        }
        for w in self.taus.windows(2) {
            if w[1] <= w[0] {
                return Err(SimulateError::InvalidSequence(
                    "taus must be strictly increasing".into(),
                ));
            }
        }
        if self.shots_per_tau == 0 {
            return Err(SimulateError::InvalidSequence(
                "shots_per_tau must be positive".into(),
            ));
        }
        for &tau in &self.taus {
            self.sequence_at(tau).validate(halo)?;
        }
        Ok(())
    }
}

/// Analysis-stage configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub n_theta: usize,
    pub n_phi: usize,
    /// Integration half-cone angle for the Ramsey field map, radians.
    pub alpha_ramsey: f64,
    /// Integration half-cone angle for the parity gradient map, radians.
    pub alpha_parity: f64,
    /// Radial window in r/r0 applied when counting atoms into bins.
    pub radial_window: (f64, f64),
    pub bootstrap_resamples: usize,
    pub min_counts: u64,
    /// Centre and half-width of the Ramsey frequency prior, gauss.
    pub ramsey_prior_center: f64,
    pub ramsey_prior_halfwidth: f64,
    /// Upper search bound for gradient magnitudes, gauss/m.
    pub gradient_bound: f64,
    /// Override for the first-approximation halo radius, m/s; estimated from
    /// the spin-band centroids when absent.
    pub r0_override: Option<f64>,
    /// Radial prefilter window for the lensing ellipsoid fit.
    pub prefilter_window: (f64, f64),
    /// Run the optional geometric refinement pass after the algebraic fit.
    pub geometric_refine: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            n_theta: 24,
            n_phi: 7,
            alpha_ramsey: 0.062 * std::f64::consts::PI,
            alpha_parity: std::f64::consts::PI / 10.0,
            radial_window: (0.94, 1.06),
            bootstrap_resamples: 1000,
            min_counts: 10,
            ramsey_prior_center: 0.53,
            ramsey_prior_halfwidth: 0.03,
            gradient_bound: 10.0,
            r0_override: None,
            prefilter_window: (0.6, 1.2),
            geometric_refine: false,
        }
    }
}

/// Full experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub constants: PhysicalConstants,
    pub field: FieldModel,
    pub halo: HaloConfig,
    pub sequence: SequencePlan,
    pub detector: DetectorConfig,
    pub analysis: AnalysisConfig,
    pub seed: u64,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.constants.validate()?;
        self.halo.validate()?;
        self.sequence.validate(&self.halo)?;
        self.detector.validate()?;
        Ok(())
    }

    fn map_options(&self) -> MapOptions {
        MapOptions {
            min_counts: self.analysis.min_counts,
            bootstrap_resamples: self.analysis.bootstrap_resamples,
            seed: self.seed,
            ramsey_prior: (
                self.analysis.ramsey_prior_center,
                self.analysis.ramsey_prior_halfwidth,
            ),
            gradient_bound: self.analysis.gradient_bound,
        }
    }

    pub fn ramsey_grid(&self) -> Result<BinGrid, PipelineError> {
        Ok(BinGrid::equirectangular(
            self.analysis.n_theta,
            self.analysis.n_phi,
            self.halo.polar_cap_deg,
            self.analysis.alpha_ramsey,
            self.analysis.radial_window,
        )
        .map_err(EstimateError::from)?)
    }

    pub fn parity_grid(&self) -> Result<BinGrid, PipelineError> {
        Ok(BinGrid::equirectangular(
            self.analysis.n_theta,
            self.analysis.n_phi,
            self.halo.polar_cap_deg,
            self.analysis.alpha_parity,
            self.analysis.radial_window,
        )
        .map_err(EstimateError::from)?)
    }
}

/// Simulated data for one interrogation delay.
#[derive(Clone, Debug, PartialEq)]
pub struct SimGroup {
    pub tau: f64,
    pub first_shot: u64,
    pub n_shots: u64,
    pub shots: Vec<Shot>,
    pub events: Vec<DetectionEvent>,
}

/// Generate ground truth and detector events for every (tau, shot) cell of
/// the plan.
pub fn simulate_dataset(plan: &ExperimentPlan) -> Result<Vec<SimGroup>, PipelineError> {
    plan.validate()?;
    let shots_per_tau = plan.sequence.shots_per_tau;
    let mut groups = Vec::with_capacity(plan.sequence.taus.len());
    for (ti, &tau) in plan.sequence.taus.iter().enumerate() {
        let seq = plan.sequence.sequence_at(tau);
        let first_shot = ti as u64 * shots_per_tau;
        let shots_events: Result<Vec<(Shot, Vec<DetectionEvent>)>, SimulateError> = (0
            ..shots_per_tau)
            .into_par_iter()
            .map(|k| {
                let shot_id = first_shot + k;
                let mut rng = derive_rng(plan.seed, RngStream::Shot, shot_id);
                let mut shot = sample_halo(&plan.halo, shot_id, &mut rng);
                match seq.scheme {
                    Scheme::Ramsey => {
                        run_ramsey(&mut shot, &plan.field, &seq, &plan.constants, &mut rng)?
                    }
                    Scheme::Parity => {
                        run_parity(&mut shot, &plan.field, &seq, &plan.constants, &mut rng)?
                    }
                }
                let events = detect(&shot, &plan.detector, &plan.constants, &mut rng);
                Ok((shot, events))
            })
            .collect();
        let mut shots = Vec::with_capacity(shots_per_tau as usize);
        let mut events = Vec::new();
        for (shot, evs) in shots_events? {
            shots.push(shot);
            events.extend(evs);
        }
        groups.push(SimGroup {
            tau,
            first_shot,
            n_shots: shots_per_tau,
            shots,
            events,
        });
    }
    Ok(groups)
}

/// Events grouped by tau, the minimal input of the reconstruction stage.
#[derive(Clone, Debug, PartialEq)]
pub struct EventGroup {
    pub tau: f64,
    pub first_shot: u64,
    pub n_shots: u64,
    pub events: Vec<DetectionEvent>,
}

impl From<&SimGroup> for EventGroup {
    fn from(g: &SimGroup) -> Self {
        EventGroup {
            tau: g.tau,
            first_shot: g.first_shot,
            n_shots: g.n_shots,
            events: g.events.clone(),
        }
    }
}

/// Per spin class diagnostics of the reconstruction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassReport {
    pub spin: SpinState,
    pub n_atoms: usize,
    pub fit: EllipsoidFit,
}

/// Reconstruction summary for the whole dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconReport {
    /// First-approximation halo radius (velocity units, m/s).
    pub r0: f64,
    pub ambiguous_fraction: f64,
    /// Disagreement between carried simulation labels and band assignment.
    pub label_disagreement: f64,
    pub class_fits: Vec<ClassReport>,
    pub statistics: HaloStatistics,
}

/// Invert events to CM velocities, classify spins, correct lensing per spin
/// class by an ellipsoid fit, and normalise onto the unit sphere.
///
/// The lensing distortion is static, so each spin class is fitted once,
/// pooled across all interrogation delays; this also keeps fringe extrema
/// (where one Ramsey output port is nearly empty for a single tau) from
/// starving the fit.
pub fn reconstruct_dataset(
    groups: &[EventGroup],
    plan: &ExperimentPlan,
) -> Result<(Vec<CloudGroup>, ReconReport), PipelineError> {
    if groups.iter().all(|g| g.events.is_empty()) {
        return Err(PipelineError::EmptyInput);
    }
    let c = &plan.constants;
    let det = &plan.detector;
    // Expected half-extent of one spin band in v_z: the polar cap limits
    // |v_z| to v_r sin(cap), widened by the shell width and detector blur.
    let cap_sin = plan.halo.polar_cap_deg.to_radians().sin();
    let blur_v = det.xy_resolution / c.stationary_fall_time();
    let band_halfwidth =
        plan.halo.v_r * (1.0 + 3.0 * plan.halo.radial_width_frac) * cap_sin + 3.0 * blur_v;

    // Classify and invert everything first; the lensing fit pools groups.
    struct Inverted {
        group: usize,
        shot_id: u64,
        velocity: Vector3<f64>,
        z_star: f64,
    }
    let mut per_spin: [Vec<Inverted>; 2] = [Vec::new(), Vec::new()];
    let mut ambiguous = 0.0;
    let mut disagreement = 0.0;
    let mut n_events_total = 0usize;
    for (gi, group) in groups.iter().enumerate() {
        let classified = classify_spin(&group.events, det, c, band_halfwidth)?;
        ambiguous += classified.ambiguous_fraction * group.events.len() as f64;
        disagreement += classified.disagreement_fraction * group.events.len() as f64;
        n_events_total += group.events.len();
        for ev in &classified.events {
            let v = invert_tof(ev, det, c)?;
            per_spin[ev.spin.expect("classified").index()].push(Inverted {
                group: gi,
                shot_id: ev.shot_id,
                velocity: v,
                z_star: v.z * ev.t_star,
            });
        }
    }

    // First-approximation radius: half the distance between the spin-band
    // centroids (the analog of half the source separation), unless
    // overridden.
    let centroid = |vs: &[Inverted]| -> Vector3<f64> {
        if vs.is_empty() {
            return Vector3::zeros();
        }
        vs.iter().map(|e| e.velocity).sum::<Vector3<f64>>() / vs.len() as f64
    };
    let r0 = plan
        .analysis
        .r0_override
        .unwrap_or_else(|| 0.5 * (centroid(&per_spin[0]) - centroid(&per_spin[1])).norm());

    let mut class_fits: Vec<ClassReport> = Vec::new();
    let mut per_group_atoms: Vec<Vec<CloudAtom>> = vec![Vec::new(); groups.len()];
    for spin in [SpinState::Up, SpinState::Down] {
        let class = &per_spin[spin.index()];
        if class.is_empty() {
            continue;
        }
        let points: Vec<Vector3<f64>> = class.iter().map(|e| e.velocity).collect();
        if points.len() < 9 {
            return Err(PipelineError::TooFewClassAtoms {
                side: spin.label(),
                got: points.len(),
            });
        }
        let prefilter = RadialPrefilter {
            lo: plan.analysis.prefilter_window.0,
            hi: plan.analysis.prefilter_window.1,
            r0: Some(r0),
        };
        let mut fit = fit_ellipsoid(&points, Some(prefilter))?;
        if plan.analysis.geometric_refine {
            fit = refine_ellipsoid(&points, &fit, 4);
        }
        let normalized = normalize_halo(&points, &fit);
        for (k, entry) in normalized.iter().zip(class.iter()) {
            let norm = k.norm();
            if norm == 0.0 {
                continue;
            }
            per_group_atoms[entry.group].push(CloudAtom {
                shot_id: entry.shot_id,
                k_hat: k / norm,
                k_norm: norm,
                z_star: entry.z_star,
                spin,
            });
        }
        class_fits.push(ClassReport {
            spin,
            n_atoms: points.len(),
            fit,
        });
    }

    let mut clouds = Vec::with_capacity(groups.len());
    let mut all_atoms: Vec<CloudAtom> = Vec::new();
    for (group, mut atoms) in groups.iter().zip(per_group_atoms) {
        atoms.sort_by_key(|a| a.shot_id);
        all_atoms.extend(atoms.iter().cloned());
        clouds.push(CloudGroup {
            tau: group.tau,
            first_shot: group.first_shot,
            n_shots: group.n_shots,
            atoms,
        });
    }

    let statistics = halo_statistics(&all_atoms)?;
    let n = n_events_total.max(1) as f64;
    let report = ReconReport {
        r0,
        ambiguous_fraction: ambiguous / n,
        label_disagreement: disagreement / n,
        class_fits,
        statistics,
    };
    Ok((clouds, report))
}

/// Field tomography output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TomographyResult {
    pub map: FieldMap,
    pub histogram: Option<MapHistogram>,
    /// Halo-integrated fit (single bin with half-angle pi).
    pub integrated: Option<RamseyFit>,
    pub integrated_n_atoms: u64,
}

/// Run the Ramsey tomography analysis over reconstructed clouds.
pub fn run_tomography(
    clouds: &[CloudGroup],
    plan: &ExperimentPlan,
) -> Result<TomographyResult, PipelineError> {
    if plan.sequence.scheme != Scheme::Ramsey {
        return Err(PipelineError::WrongScheme { expected: "ramsey" });
    }
    let grid = plan.ramsey_grid()?;
    let opts = plan.map_options();
    let map = map_field(clouds, &grid, plan.constants.gamma, &opts);

    // Halo-integrated series: everything inside the radial window.
    let mut points = Vec::with_capacity(clouds.len());
    let mut total_atoms = 0u64;
    for g in clouds {
        let (mut up, mut down) = (0u64, 0u64);
        for a in &g.atoms {
            if a.k_norm < plan.analysis.radial_window.0 || a.k_norm > plan.analysis.radial_window.1
            {
                continue;
            }
            match a.spin {
                SpinState::Up => up += 1,
                SpinState::Down => down += 1,
            }
        }
        let total = up + down;
        total_atoms += total;
        if total == 0 {
            continue;
        }
        let p = (up as f64 - down as f64) / total as f64;
        let stderr = ((1.0 - p * p).max(1.0 / total as f64) / total as f64).sqrt();
        points.push(SeriesPoint {
            tau: g.tau,
            value: p,
            stderr: Some(stderr),
        });
    }
    let integrated = fit_ramsey(
        &points,
        plan.constants.gamma,
        plan.analysis.ramsey_prior_center,
        plan.analysis.ramsey_prior_halfwidth,
    )
    .ok();

    let values: Vec<f64> = map.bins.iter().filter_map(|b| b.value).collect();
    let histogram = histogram_stats(&values).ok();
    Ok(TomographyResult {
        map,
        histogram,
        integrated,
        integrated_n_atoms: total_atoms,
    })
}

/// Gradiometry output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradiometryResult {
    pub map: GradientMap,
    pub vector: Option<GradientVectorFit>,
    pub histogram: Option<MapHistogram>,
}

/// Run the parity gradiometry analysis over reconstructed clouds.
pub fn run_gradiometry(
    clouds: &[CloudGroup],
    plan: &ExperimentPlan,
) -> Result<GradiometryResult, PipelineError> {
    if plan.sequence.scheme != Scheme::Parity {
        return Err(PipelineError::WrongScheme { expected: "parity" });
    }
    let grid = plan.parity_grid()?;
    let opts = plan.map_options();
    let map = map_gradient(
        clouds,
        &grid,
        plan.constants.gamma,
        plan.halo.v_r,
        &opts,
    );
    let vector = fit_gradient_vector(&map, &grid).ok();
    let values: Vec<f64> = map.bins.iter().filter_map(|b| b.value).collect();
    let histogram = histogram_stats(&values).ok();
    Ok(GradiometryResult {
        map,
        vector,
        histogram,
    })
}

/// One row of the spatial-resolution report.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ResolutionRow {
    pub s_detected: f64,
    pub closed: ResolutionMoments,
    pub monte_carlo: McMoments,
    pub mean_rel_err: f64,
    pub width_rel_err: f64,
}

/// Compare closed-form conditional moments against the Monte Carlo estimate
/// for a set of detected positions.
pub fn resolution_report(
    params: &ResolutionParams,
    s_values: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<ResolutionRow>, PipelineError> {
    let mut rows = Vec::with_capacity(s_values.len());
    for (i, &s) in s_values.iter().enumerate() {
        let closed = resolution_moments(params, s)?;
        let mc = resolution_monte_carlo(params, s, n_samples, 0.1, seed.wrapping_add(i as u64))?;
        rows.push(ResolutionRow {
            s_detected: s,
            closed,
            monte_carlo: mc,
            mean_rel_err: ((mc.mean - closed.mean) / closed.mean).abs(),
            width_rel_err: ((mc.width - closed.width) / closed.width).abs(),
        });
    }
    Ok(rows)
}

/// One row of the sensitivity-bounds report.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BoundsRow {
    pub eta: f64,
    pub min_phase_ramsey_n: f64,
    pub min_phase_bell: f64,
    /// Ideal (eta = 1) N-atom standard quantum limit for reference.
    pub sql_phase_ideal: f64,
    pub bell_beats_ideal_sql: bool,
}

/// Phase-uncertainty bounds versus efficiency plus the SQL crossing report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundsReport {
    pub n_atoms: u64,
    pub interrogation_tau: f64,
    pub sql_delta_b: f64,
    pub rows: Vec<BoundsRow>,
    /// Efficiency where the entangled bound crosses the ideal N = 2 SQL.
    pub crossing_eta: f64,
}

/// `pair_atoms` sets the coherent-scheme reference for the phase rows (2 for
/// the entangled-pair comparison); `sql_atoms` sets the atom number of the
/// field-sensitivity SQL row.
pub fn bounds_report(
    c: &PhysicalConstants,
    pair_atoms: u64,
    sql_atoms: u64,
    tau: f64,
    etas: &[f64],
) -> Result<BoundsReport, PipelineError> {
    let sql_ideal = min_phase_ramsey(pair_atoms, 1.0)?;
    let mut rows = Vec::with_capacity(etas.len());
    for &eta in etas {
        let ramsey = min_phase_ramsey(pair_atoms, eta)?;
        let bell = min_phase_bell(eta)?;
        rows.push(BoundsRow {
            eta,
            min_phase_ramsey_n: ramsey,
            min_phase_bell: bell,
            sql_phase_ideal: sql_ideal,
            bell_beats_ideal_sql: bell < sql_ideal,
        });
    }
    // Bisect the crossing of 1/(2 eta) against the ideal SQL.
    let (mut lo, mut hi) = (1e-3, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if min_phase_bell(mid)? > sql_ideal {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(BoundsReport {
        n_atoms: sql_atoms,
        interrogation_tau: tau,
        sql_delta_b: sql_delta_b(c, sql_atoms, tau)?,
        rows,
        crossing_eta: 0.5 * (lo + hi),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_plan(scheme: Scheme) -> ExperimentPlan {
        let constants = PhysicalConstants::default();
        let taus = match scheme {
            Scheme::Ramsey => (0..6).map(|i| 0.2e-6 + i as f64 * 0.4e-6).collect(),
            Scheme::Parity => vec![0.8e-3, 1.1e-3, 1.4e-3, 1.7e-3],
        };
        ExperimentPlan {
            constants,
            field: FieldModel::uniform(0.532),
            halo: HaloConfig {
                mean_pairs_per_shot: 300.0,
                ..HaloConfig::default()
            },
            sequence: SequencePlan {
                scheme,
                pulse1_time: 3e-3,
                taus,
                shots_per_tau: 8,
                contrast: 1.0,
            },
            detector: DetectorConfig {
                efficiency_eta: 0.5,
                ..DetectorConfig::default()
            },
            analysis: AnalysisConfig {
                n_theta: 8,
                n_phi: 3,
                bootstrap_resamples: 50,
                ..AnalysisConfig::default()
            },
            seed: 11,
        }
    }

    #[test]
    fn dataset_simulation_is_deterministic() {
        let plan = small_plan(Scheme::Ramsey);
        let a = simulate_dataset(&plan).unwrap();
        let b = simulate_dataset(&plan).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), plan.sequence.taus.len());
        assert_eq!(a[0].shots.len(), 8);
    }

    #[test]
    fn reconstruction_runs_and_reports() {
        let plan = small_plan(Scheme::Ramsey);
        let sim = simulate_dataset(&plan).unwrap();
        let events: Vec<EventGroup> = sim.iter().map(EventGroup::from).collect();
        let (clouds, report) = reconstruct_dataset(&events, &plan).unwrap();
        assert_eq!(clouds.len(), sim.len());
        // Band classification should agree with the simulation labels.
        assert!(report.label_disagreement < 1e-3);
        // r0 estimate lands near the scattering speed.
        assert_relative_eq!(report.r0, plan.halo.v_r, max_relative = 0.05);
        // Mean radius is pinned to 1 by construction.
        assert_relative_eq!(report.statistics.mean_radius, 1.0, max_relative = 1e-6);
    }

    #[test]
    fn tomography_rejects_wrong_scheme() {
        let plan = small_plan(Scheme::Parity);
        assert!(matches!(
            run_tomography(&[], &plan),
            Err(PipelineError::WrongScheme { .. })
        ));
    }

    #[test]
    fn empty_input_is_an_error() {
        let plan = small_plan(Scheme::Ramsey);
        let empty = vec![EventGroup {
            tau: 1e-6,
            first_shot: 0,
            n_shots: 4,
            events: vec![],
        }];
        assert!(matches!(
            reconstruct_dataset(&empty, &plan),
            Err(PipelineError::EmptyInput)
        ));
    }

    #[test]
    fn bounds_report_crossing() {
        let c = PhysicalConstants::default();
        let report = bounds_report(&c, 2, 68_000, 2.2e-6, &[0.1, 0.5, 1.0]).unwrap();
        assert_relative_eq!(
            report.crossing_eta,
            std::f64::consts::FRAC_1_SQRT_2,
            max_relative = 1e-6
        );
        assert!(!report.rows[0].bell_beats_ideal_sql);
        assert!(report.rows[2].bell_beats_ideal_sql);
    }
}
