//! One function per pipeline stage. Each command reads its inputs, runs the
//! core analysis, writes deterministic output tables plus a JSON summary, and
//! records a manifest with the config hash and timing.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use halomag_core::pipeline::{
    bounds_report, reconstruct_dataset, resolution_report, run_gradiometry, run_tomography,
    simulate_dataset, EventGroup, ExperimentPlan, PipelineError,
};
use halomag_core::reconstruct::ResolutionParams;
use halomag_core::simulate::Scheme;

use crate::io;
use crate::{CliError, OutputFormat};

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Simulate(_) | PipelineError::Model(_) => {
                CliError::Config(format!("{e}"))
            }
            other => CliError::Analysis(format!("{other}")),
        }
    }
}

pub struct CommandContext {
    pub plan: ExperimentPlan,
    pub config_text: String,
    pub out_dir: PathBuf,
    pub format: OutputFormat,
}

impl CommandContext {
    fn manifest(&self, command: &str, started: Instant, outputs: Vec<PathBuf>) -> io::RunManifest {
        io::RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.plan.seed,
            config_sha256: io::config_hash(&self.config_text, self.plan.seed),
            stage_ms: started.elapsed().as_millis(),
            outputs,
        }
    }

    fn emit<T: Serialize>(&self, summary: &T, table: String) -> Result<(), CliError> {
        match self.format {
            OutputFormat::JsonLikeSummary => {
                let text = serde_json::to_string_pretty(summary)
                    .map_err(|e| CliError::Analysis(format!("summary: {e}")))?;
                println!("{text}");
            }
            OutputFormat::Table => print!("{table}"),
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct SimulateSummary {
    taus: Vec<f64>,
    shots_per_tau: u64,
    total_atoms: u64,
    total_events: u64,
    events_per_shot: f64,
}

pub fn cmd_simulate(ctx: &CommandContext) -> Result<(), CliError> {
    let started = Instant::now();
    let groups = simulate_dataset(&ctx.plan)?;
    let shots_path = ctx.out_dir.join("shots.tsv");
    let events_path = ctx.out_dir.join("events.tsv");
    io::write_shots(&shots_path, &groups)?;
    io::write_events(&events_path, &groups)?;
    let total_atoms: u64 = groups
        .iter()
        .flat_map(|g| g.shots.iter())
        .map(|s| s.atoms.len() as u64)
        .sum();
    let total_events: u64 = groups.iter().map(|g| g.events.len() as u64).sum();
    let n_shots: u64 = ctx.plan.sequence.shots_per_tau * ctx.plan.sequence.taus.len() as u64;
    let summary = SimulateSummary {
        taus: ctx.plan.sequence.taus.clone(),
        shots_per_tau: ctx.plan.sequence.shots_per_tau,
        total_atoms,
        total_events,
        events_per_shot: total_events as f64 / n_shots.max(1) as f64,
    };
    let summary_path = ctx.out_dir.join("summary_simulate.json");
    io::write_json(&summary_path, &summary)?;
    io::write_manifest(
        &ctx.out_dir,
        &ctx.manifest("simulate", started, vec![shots_path, events_path, summary_path]),
    )?;
    let table = format!(
        "stage\tatoms\tevents\tevents_per_shot\nsimulate\t{}\t{}\t{:.2}\n",
        total_atoms, total_events, summary.events_per_shot
    );
    ctx.emit(&summary, table)
}

pub fn cmd_reconstruct(ctx: &CommandContext, events: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let groups: Vec<EventGroup> = io::read_events(
        events,
        &ctx.plan.sequence.taus,
        ctx.plan.sequence.shots_per_tau,
    )?;
    let (clouds, report) = reconstruct_dataset(&groups, &ctx.plan)?;
    let clouds_path = ctx.out_dir.join("clouds.tsv");
    io::write_clouds(&clouds_path, &clouds)?;
    let summary_path = ctx.out_dir.join("summary_reconstruct.json");
    io::write_json(&summary_path, &report)?;
    io::write_manifest(
        &ctx.out_dir,
        &ctx.manifest("reconstruct", started, vec![clouds_path, summary_path]),
    )?;
    let table = format!(
        "stage\tatoms\tdk_rms\tr0[m/s]\tambiguous\nreconstruct\t{}\t{:.4}\t{:.4e}\t{:.4}\n",
        report.statistics.n_atoms,
        report.statistics.radial_rms_width,
        report.r0,
        report.ambiguous_fraction
    );
    ctx.emit(&report, table)
}

pub fn cmd_tomography(ctx: &CommandContext, clouds: &Path) -> Result<(), CliError> {
    if ctx.plan.sequence.scheme != Scheme::Ramsey {
        return Err(CliError::Config(
            "tomography needs a ramsey-scheme config".into(),
        ));
    }
    let started = Instant::now();
    let groups = io::read_clouds(
        clouds,
        &ctx.plan.sequence.taus,
        ctx.plan.sequence.shots_per_tau,
    )?;
    let result = run_tomography(&groups, &ctx.plan)?;
    let map_path = ctx.out_dir.join("field_map.tsv");
    io::write_map(&map_path, "b[gauss]", &result.map.bins)?;
    let summary_path = ctx.out_dir.join("summary_tomography.json");
    io::write_json(&summary_path, &result)?;
    io::write_manifest(
        &ctx.out_dir,
        &ctx.manifest("tomography", started, vec![map_path, summary_path]),
    )?;
    let mut table = String::from("bin\ttheta[rad]\tphi[rad]\tb[gauss]\tstderr\tflags\n");
    for (i, b) in result.map.bins.iter().enumerate() {
        table.push_str(&format!(
            "{}\t{:.4}\t{:.4}\t{}\t{}\t{}\n",
            i,
            b.theta,
            b.phi,
            b.value.map_or("nan".into(), |v| format!("{v:.6}")),
            b.stderr.map_or("nan".into(), |v| format!("{v:.2e}")),
            b.flags
        ));
    }
    if let Some(fit) = &result.integrated {
        table.push_str(&format!(
            "integrated\t-\t-\t{:.6}\t{:.2e}\t{}\n",
            fit.b, fit.b_stderr, fit.flags
        ));
    }
    ctx.emit(&result, table)
}

pub fn cmd_gradiometry(ctx: &CommandContext, clouds: &Path) -> Result<(), CliError> {
    if ctx.plan.sequence.scheme != Scheme::Parity {
        return Err(CliError::Config(
            "gradiometry needs a parity-scheme config".into(),
        ));
    }
    let started = Instant::now();
    let groups = io::read_clouds(
        clouds,
        &ctx.plan.sequence.taus,
        ctx.plan.sequence.shots_per_tau,
    )?;
    let result = run_gradiometry(&groups, &ctx.plan)?;
    let map_path = ctx.out_dir.join("gradient_map.tsv");
    io::write_map(&map_path, "db_dr[gauss/m]", &result.map.bins)?;
    let summary_path = ctx.out_dir.join("summary_gradiometry.json");
    io::write_json(&summary_path, &result)?;
    io::write_manifest(
        &ctx.out_dir,
        &ctx.manifest("gradiometry", started, vec![map_path, summary_path]),
    )?;
    let mut table = String::from("quantity\tvalue\n");
    if let Some(v) = &result.vector {
        table.push_str(&format!(
            "gradient_magnitude[gauss/m]\t{:.4} +- {:.4}\naxis\t[{:.4}, {:.4}, {:.4}]\nbins_used\t{}\n",
            v.magnitude, v.magnitude_stderr, v.axis.x, v.axis.y, v.axis.z, v.n_bins_used
        ));
    } else {
        table.push_str("gradient_vector\tfit unavailable\n");
    }
    for (tau, g) in &result.map.pooled_g {
        table.push_str(&format!("pooled_G(tau={tau:.2e})\t{g:.4}\n"));
    }
    ctx.emit(&result, table)
}

#[derive(Serialize)]
struct ResolutionSummary {
    params: ResolutionParams,
    tau: f64,
    xi: f64,
    w: f64,
    rows: Vec<halomag_core::pipeline::ResolutionRow>,
}

pub fn cmd_resolution(ctx: &CommandContext) -> Result<(), CliError> {
    let started = Instant::now();
    let c = &ctx.plan.constants;
    let halo = &ctx.plan.halo;
    let detection_time = c.stationary_fall_time();
    let interrogation = match ctx.plan.sequence.scheme {
        Scheme::Ramsey => {
            ctx.plan.sequence.pulse1_time + ctx.plan.sequence.taus.last().copied().unwrap_or(0.0)
        }
        Scheme::Parity => ctx.plan.sequence.taus.last().copied().unwrap_or(0.0),
    };
    let params = ResolutionParams {
        sigma: halo.source_sigma,
        sigma_v: halo.source_velocity_sigma,
        detection_time,
        interrogation_time: interrogation,
        mean_speed: halo.v_r,
    };
    let s_halo = halo.v_r * detection_time;
    let s_values = [0.9 * s_halo, s_halo, 1.1 * s_halo];
    let rows = resolution_report(&params, &s_values, 2_000_000, ctx.plan.seed)?;
    let summary = ResolutionSummary {
        params,
        tau: params.tau(),
        xi: params.xi(),
        w: params.w(),
        rows,
    };
    let table_path = ctx.out_dir.join("resolution.tsv");
    let mut table = String::from(
        "s_detected[m]\tmean[m]\twidth[m]\tfar_mean[m]\tfar_width[m]\tmc_mean[m]\tmc_width[m]\tmean_rel_err\twidth_rel_err\n",
    );
    for r in &summary.rows {
        table.push_str(&format!(
            "{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.4e}\t{:.4e}\n",
            r.s_detected,
            r.closed.mean,
            r.closed.width,
            r.closed.far_field_mean,
            r.closed.far_field_width,
            r.monte_carlo.mean,
            r.monte_carlo.width,
            r.mean_rel_err,
            r.width_rel_err
        ));
    }
    std::fs::create_dir_all(&ctx.out_dir)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", ctx.out_dir.display())))?;
    std::fs::write(&table_path, &table)
        .map_err(|e| CliError::Io(format!("writing {}: {e}", table_path.display())))?;
    let summary_path = ctx.out_dir.join("summary_resolution.json");
    io::write_json(&summary_path, &summary)?;
    io::write_manifest(
        &ctx.out_dir,
        &ctx.manifest("resolution", started, vec![table_path, summary_path]),
    )?;
    ctx.emit(&summary, table)
}

pub fn cmd_bounds(ctx: &CommandContext) -> Result<(), CliError> {
    let started = Instant::now();
    let etas: Vec<f64> = (1..=20).map(|i| i as f64 * 0.05).collect();
    let tau = ctx.plan.sequence.taus.last().copied().unwrap_or(1e-6);
    // Expected atoms over one full scan, for the field-sensitivity SQL row.
    let sql_atoms = (2.0
        * ctx.plan.halo.mean_pairs_per_shot
        * ctx.plan.sequence.shots_per_tau as f64)
        .round()
        .max(1.0) as u64;
    let report = bounds_report(&ctx.plan.constants, 2, sql_atoms, tau, &etas)?;
    let table_path = ctx.out_dir.join("bounds.tsv");
    let mut table =
        String::from("eta\tmin_phase_ramsey_n2\tmin_phase_bell\tsql_phase_ideal\tbeats_sql\n");
    for r in &report.rows {
        table.push_str(&format!(
            "{:.2}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
            r.eta, r.min_phase_ramsey_n, r.min_phase_bell, r.sql_phase_ideal, r.bell_beats_ideal_sql
        ));
    }
    table.push_str(&format!(
        "# entangled bound beats the ideal pair SQL for eta > {:.6}\n",
        report.crossing_eta
    ));
    table.push_str(&format!(
        "# SQL field sensitivity at N = {}, tau = {:.3e} s: {:.6e} gauss\n",
        report.n_atoms, report.interrogation_tau, report.sql_delta_b
    ));
    std::fs::create_dir_all(&ctx.out_dir)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", ctx.out_dir.display())))?;
    std::fs::write(&table_path, &table)
        .map_err(|e| CliError::Io(format!("writing {}: {e}", table_path.display())))?;
    let summary_path = ctx.out_dir.join("summary_bounds.json");
    io::write_json(&summary_path, &report)?;
    io::write_manifest(
        &ctx.out_dir,
        &ctx.manifest("bounds", started, vec![table_path, summary_path]),
    )?;
    ctx.emit(&report, table)
}
