//! Newline-delimited tabular I/O for events, ground-truth shots, clouds, and
//! maps, plus JSON summaries and the run manifest.
//!
//! Columns carry their units in the header. Floats are written with a fixed
//! scientific format so identical runs produce byte-identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::Serialize;

use halomag_core::model::SpinState;
use halomag_core::pipeline::{EventGroup, SimGroup};
use halomag_core::reconstruct::{CloudAtom, CloudGroup};
use halomag_core::simulate::DetectionEvent;

use crate::CliError;

fn fmt(v: f64) -> String {
    format!("{v:.12e}")
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Io(format!("creating {}: {e}", parent.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))
}

pub const EVENTS_HEADER: &str = "shot_id\ttau[s]\tt_star[s]\tx[m]\ty[m]\tspin";

pub fn write_events(path: &Path, groups: &[SimGroup]) -> Result<(), CliError> {
    let mut out = String::new();
    out.push_str(EVENTS_HEADER);
    out.push('\n');
    for g in groups {
        for ev in &g.events {
            let spin = ev.spin.map_or("?", SpinState::label);
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                ev.shot_id,
                fmt(g.tau),
                fmt(ev.t_star),
                fmt(ev.x),
                fmt(ev.y),
                spin
            );
        }
    }
    write_file(path, &out)
}

/// Read an events table back into tau groups. The shot layout (which shots
/// belong to which tau, including atomless shots) comes from the plan.
pub fn read_events(
    path: &Path,
    taus: &[f64],
    shots_per_tau: u64,
) -> Result<Vec<EventGroup>, CliError> {
    let text = read_file(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == EVENTS_HEADER => {}
        other => {
            return Err(CliError::Config(format!(
                "unexpected events header: {other:?}"
            )))
        }
    }
    let mut groups: Vec<EventGroup> = taus
        .iter()
        .enumerate()
        .map(|(i, &tau)| EventGroup {
            tau,
            first_shot: i as u64 * shots_per_tau,
            n_shots: shots_per_tau,
            events: Vec::new(),
        })
        .collect();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(CliError::Config(format!(
                "events line {}: expected 6 columns, got {}",
                lineno + 2,
                cols.len()
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64, CliError> {
            s.parse()
                .map_err(|e| CliError::Config(format!("events line {}: {what}: {e}", lineno + 2)))
        };
        let shot_id: u64 = cols[0]
            .parse()
            .map_err(|e| CliError::Config(format!("events line {}: shot_id: {e}", lineno + 2)))?;
        let tau = parse_f(cols[1], "tau")?;
        let ev = DetectionEvent {
            shot_id,
            t_star: parse_f(cols[2], "t_star")?,
            x: parse_f(cols[3], "x")?,
            y: parse_f(cols[4], "y")?,
            spin: SpinState::from_label(cols[5]),
        };
        let gi = taus
            .iter()
            .position(|&t| (t - tau).abs() <= 1e-12 * t.abs().max(1e-30))
            .ok_or_else(|| {
                CliError::Config(format!(
                    "events line {}: tau {tau:e} not in the configured tau list",
                    lineno + 2
                ))
            })?;
        let g = &mut groups[gi];
        if shot_id < g.first_shot || shot_id >= g.first_shot + g.n_shots {
            return Err(CliError::Config(format!(
                "events line {}: shot {shot_id} outside the range of tau group {gi}",
                lineno + 2
            )));
        }
        g.events.push(ev);
    }
    Ok(groups)
}

pub const SHOTS_HEADER: &str = "shot_id\ttau[s]\tpair_id\tsx[m]\tsy[m]\tsz[m]\tvx[m/s]\tvy[m/s]\tvz[m/s]\tspin\ttruth_phi[rad]";

pub fn write_shots(path: &Path, groups: &[SimGroup]) -> Result<(), CliError> {
    let mut out = String::new();
    out.push_str(SHOTS_HEADER);
    out.push('\n');
    for g in groups {
        for shot in &g.shots {
            for a in &shot.atoms {
                let spin = a.spin.map_or("?", SpinState::label);
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    shot.shot_id,
                    fmt(g.tau),
                    a.pair_id,
                    fmt(a.source_position.x),
                    fmt(a.source_position.y),
                    fmt(a.source_position.z),
                    fmt(a.velocity_cm.x),
                    fmt(a.velocity_cm.y),
                    fmt(a.velocity_cm.z),
                    spin,
                    fmt(a.truth_phi)
                );
            }
        }
    }
    write_file(path, &out)
}

pub const CLOUDS_HEADER: &str = "shot_id\ttau[s]\tkx\tky\tkz\tk_norm\tz_star[m]\tspin";

pub fn write_clouds(path: &Path, groups: &[CloudGroup]) -> Result<(), CliError> {
    let mut out = String::new();
    out.push_str(CLOUDS_HEADER);
    out.push('\n');
    for g in groups {
        for a in &g.atoms {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                a.shot_id,
                fmt(g.tau),
                fmt(a.k_hat.x),
                fmt(a.k_hat.y),
                fmt(a.k_hat.z),
                fmt(a.k_norm),
                fmt(a.z_star),
                a.spin.label()
            );
        }
    }
    write_file(path, &out)
}

pub fn read_clouds(
    path: &Path,
    taus: &[f64],
    shots_per_tau: u64,
) -> Result<Vec<CloudGroup>, CliError> {
    let text = read_file(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CLOUDS_HEADER => {}
        other => {
            return Err(CliError::Config(format!(
                "unexpected clouds header: {other:?}"
            )))
        }
    }
    let mut groups: Vec<CloudGroup> = taus
        .iter()
        .enumerate()
        .map(|(i, &tau)| CloudGroup {
            tau,
            first_shot: i as u64 * shots_per_tau,
            n_shots: shots_per_tau,
            atoms: Vec::new(),
        })
        .collect();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 8 {
            return Err(CliError::Config(format!(
                "clouds line {}: expected 8 columns, got {}",
                lineno + 2,
                cols.len()
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64, CliError> {
            s.parse()
                .map_err(|e| CliError::Config(format!("clouds line {}: {what}: {e}", lineno + 2)))
        };
        let shot_id: u64 = cols[0]
            .parse()
            .map_err(|e| CliError::Config(format!("clouds line {}: shot_id: {e}", lineno + 2)))?;
        let tau = parse_f(cols[1], "tau")?;
        let spin = SpinState::from_label(cols[7]).ok_or_else(|| {
            CliError::Config(format!("clouds line {}: bad spin label", lineno + 2))
        })?;
        let atom = CloudAtom {
            shot_id,
            k_hat: Vector3::new(
                parse_f(cols[2], "kx")?,
                parse_f(cols[3], "ky")?,
                parse_f(cols[4], "kz")?,
            ),
            k_norm: parse_f(cols[5], "k_norm")?,
            z_star: parse_f(cols[6], "z_star")?,
            spin,
        };
        let gi = taus
            .iter()
            .position(|&t| (t - tau).abs() <= 1e-12 * t.abs().max(1e-30))
            .ok_or_else(|| {
                CliError::Config(format!(
                    "clouds line {}: tau {tau:e} not in the configured tau list",
                    lineno + 2
                ))
            })?;
        groups[gi].atoms.push(atom);
    }
    for g in &mut groups {
        g.atoms.sort_by_key(|a| a.shot_id);
    }
    Ok(groups)
}

/// Write a map table: one row per bin with provenance and flags.
pub fn write_map(
    path: &Path,
    value_header: &str,
    bins: &[halomag_core::estimate::MapBin],
) -> Result<(), CliError> {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "theta[rad]\tphi[rad]\t{value_header}\tstderr\tn_atoms\tflags"
    );
    for b in bins {
        let value = b.value.map_or("nan".to_string(), fmt);
        let stderr = b.stderr.map_or("nan".to_string(), fmt);
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            fmt(b.theta),
            fmt(b.phi),
            value,
            stderr,
            b.n_atoms,
            b.flags
        );
    }
    write_file(path, &out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Analysis(format!("serialising {}: {e}", path.display())))?;
    write_file(path, &(text + "\n"))
}

/// Provenance record for one command invocation.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub stage_ms: u128,
    pub outputs: Vec<PathBuf>,
}

pub fn config_hash(config_text: &str, seed: u64) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(config_text.as_bytes());
    hasher.update(seed.to_le_bytes());
    format!("{:x}", hasher.finalize())
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    write_json(&dir.join(format!("manifest_{}.json", manifest.command)), manifest)
}
