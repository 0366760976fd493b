//! Monte Carlo simulator and estimation toolkit for magnetometry with
//! spin-entangled atom-pair scattering halos.
//!
//! The crate is organised along the analysis chain:
//!
//! - [`model`] — constants, field model, spin/pair algebra, closed-form
//!   interferometry formulas;
//! - [`simulate`] — ground-truth halo shots, Ramsey/parity interrogation,
//!   and the detection chain (efficiency, Stern-Gerlach, lensing, blur,
//!   free fall);
//! - [`reconstruct`] — time-of-flight inversion, spin classification,
//!   ellipsoid lensing correction, unit-sphere normalisation, spatial
//!   resolution formulas;
//! - [`correlate`] — conical binning, spin-resolved counting, back-to-back
//!   second-order correlation functions, parity extraction, bootstrap errors;
//! - [`estimate`] — Ramsey and parity curve fits, field / gradient maps,
//!   gradient-vector recovery, summary statistics;
//! - [`pipeline`] — end-to-end orchestration shared by the CLI and tests.

pub mod correlate;
pub mod estimate;
pub mod model;
pub mod pipeline;
pub mod reconstruct;
pub mod simulate;

pub use model::{
    bell_mixing, joint_xbasis_distribution, larmor_phase, min_phase_bell, min_phase_ramsey,
    pair_parity, ramsey_polarisation, sql_delta_b, FieldModel, GammaConvention, ModelError,
    PairState, PhysicalConstants, SpinState,
};
pub use simulate::{
    derive_rng, detect, run_parity, run_ramsey, sample_halo, AtomRecord, DetectionEvent,
    DetectorConfig, HaloConfig, RngStream, Scheme, SequenceConfig, Shot, SimulateError,
};
