//! Synthetic multi-cell channel-sounding toolkit.
//!
//! The crate models a switched massive antenna array riding on a vehicle
//! that overhears the always-on downlink reference signals of several LTE
//! base stations at once, and turns those observations into propagation
//! paths. The pipeline has four stages, each usable on its own:
//!
//! 1. [`crs`] builds the cell-specific reference signals (Gold-sequence
//!    QPSK symbols on a six-subcarrier comb) that the base stations emit.
//! 2. [`synth`] plays the forward model: specular paths plus dense multipath
//!    plus noise, observed one antenna per slot through the array switch,
//!    written to a portable snapshot container.
//! 3. [`icancel`] separates the superimposed cells per antenna with an
//!    iterative serial-cancellation scheme built around per-antenna channel
//!    correlation priors.
//! 4. [`rimax`] runs gradient-based maximum-likelihood estimation of each
//!    cell's paths (delay, azimuth, elevation, polarimetric weights) plus
//!    the dense-multipath statistics, with the receiver velocity folded
//!    into the angular model.
//!
//! [`eval`] closes the loop: it matches estimates against ground truth,
//! compares errors against the Fisher-information bound, and sweeps whole
//! trajectories.

pub mod crs;
pub mod error;
pub mod eval;
pub mod icancel;
pub mod linalg;
pub mod manifold;
pub mod rimax;
pub mod synth;

pub use error::{Error, Result};

/// Complex double: the element type of every signal vector in the crate.
pub type C64 = num_complex::Complex<f64>;

/// Speed of light in m/s, rounded as is customary in link-budget work.
pub const C_LIGHT: f64 = 3.0e8;

pub use crs::{CpType, CrsConfig, CrsGrid};
pub use manifold::{ArrayManifold, StructuralParams};
pub use eval::{
    crlb_compare, error_stats, evaluate, match_paths, trajectory_sweep, Assignment, EvalReport,
    MatchGates, MatchedPair, ParamStats, PathObs, SweepRow,
};
pub use icancel::{separate, IcConfig, IcOutcome};
pub use rimax::{
    estimate_dmc, estimate_snapshot_set, rimax_estimate, DmcFit, DmcParams, EstimateRun,
    PathRecord, PathSet, RimaxConfig, RimaxOutcome, SpEstimate,
};
pub use synth::{DmcSpec, ScenarioConfig, SnapshotSet};
