//! Inter-cell interference cancellation on superposed pilot observations.
//!
//! Every antenna of the switched array sees the sum of all cells whose pilot
//! combs collide, masked by each cell's own pilot sequence. This module
//! separates them with a serial expectation-maximisation scheme, one antenna
//! and port at a time:
//!
//! 1. Cells are grouped by comb placement. Colliding cells share every
//!    resource element of a group; non-colliding groups are independent.
//! 2. Within a group, cells are processed in descending matched-filter
//!    power. Each pass re-estimates one cell from the observation minus the
//!    reconstructions of all others (least squares on the unit-modulus
//!    pilots), de-rotates it by its coarse arrival time so the channel is
//!    maximally smooth, and shrinks it in the eigenbasis of a learned
//!    per-cell correlation prior (a Wiener filter with a per-pass noise
//!    estimate from adjacent-bin differences).
//! 3. Across snapshots the prior is updated with an exponential (alpha)
//!    filter of the estimate outer products; its eigendecomposition and the
//!    processing order are refreshed on a configurable cadence rather than
//!    every snapshot.
//!
//! The output is one single-cell snapshot container per cell, holding the
//! observation with every other cell's reconstruction subtracted — what the
//! receiver would have seen had that cell been alone on air — plus the
//! filtered channel estimates and a per-sweep residual telemetry table.
//!
//! No time-frequency interpolation is performed anywhere: only the resource
//! elements a cell actually transmits on are touched.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::crs::CrsGrid;
use crate::error::{Error, Result};
use crate::linalg::hermitian_eig_desc;
use crate::synth::{SnapshotSet, Truth};
use crate::C64;

const TAU: f64 = std::f64::consts::TAU;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Tuning knobs of the separation loop.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcConfig {
    /// Full passes over the cell set per snapshot.
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Exponential-filter weight of the correlation update, in (0, 1].
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Eigenmodes kept from the correlation prior; `None` keeps the smallest
    /// set capturing 99.9% of the trace.
    #[serde(default)]
    pub rank: Option<usize>,
    /// Halve the adjacent-difference noise estimate so it is unbiased for
    /// white noise; `false` keeps the literal pair-difference average.
    #[serde(default = "default_true")]
    pub bias_correction: bool,
    /// Snapshots between eigendecomposition / processing-order refreshes.
    #[serde(default = "default_refresh")]
    pub refresh_period: usize,
    /// Zero-padding factor of the arrival-time scan.
    #[serde(default = "default_pad")]
    pub toa_pad: usize,
}

fn default_iterations() -> usize {
    5
}
fn default_alpha() -> f64 {
    0.05
}
fn default_true() -> bool {
    true
}
fn default_refresh() -> usize {
    20
}
fn default_pad() -> usize {
    8
}

impl Default for IcConfig {
    fn default() -> Self {
        IcConfig {
            iterations: default_iterations(),
            alpha: default_alpha(),
            rank: None,
            bias_correction: true,
            refresh_period: default_refresh(),
            toa_pad: default_pad(),
        }
    }
}

impl IcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("alpha must lie in (0, 1]"));
        }
        if self.refresh_period == 0 {
            return Err(Error::config("refresh_period must be at least 1"));
        }
        if self.toa_pad == 0 {
            return Err(Error::config("toa_pad must be at least 1"));
        }
        if self.rank == Some(0) {
            return Err(Error::config("rank must be at least 1 when given"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Primitive estimators
// ---------------------------------------------------------------------------

/// Delay scan of a comb-domain channel: zero-padded inverse DFT, peak pick,
/// parabolic sub-bin refinement. Returns `(fractional delay bin in
/// [0, n), peak power)`.
pub fn delay_scan(h: &[C64], pad: usize) -> Result<(f64, f64)> {
    let n = h.len();
    if n == 0 {
        return Err(Error::config("delay scan of an empty vector"));
    }
    if h.iter().all(|v| v.re == 0.0 && v.im == 0.0) {
        return Err(Error::numerical("delay scan of an all-zero vector"));
    }
    let len = n * pad.max(1);
    let mut buf: Vec<C64> = Vec::with_capacity(len);
    buf.extend_from_slice(h);
    buf.resize(len, C64::new(0.0, 0.0));
    FftPlanner::<f64>::new().plan_fft_inverse(len).process(&mut buf);

    let power: Vec<f64> = buf.iter().map(|v| v.norm_sqr()).collect();
    let (peak, &p0) = power
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty scan");
    let pm = power[(peak + len - 1) % len];
    let pp = power[(peak + 1) % len];
    let den = pm - 2.0 * p0 + pp;
    let delta = if den < 0.0 { (0.5 * (pm - pp) / den).clamp(-0.5, 0.5) } else { 0.0 };
    let bin = ((peak as f64 + delta).rem_euclid(len as f64)) / pad.max(1) as f64;
    Ok((bin, p0))
}

/// Coarse arrival time of a comb-domain channel in seconds, over the
/// unambiguous range `[0, 1/comb_spacing)`.
pub fn estimate_toa(h: &[C64], comb_spacing_hz: f64, pad: usize) -> Result<f64> {
    if !(comb_spacing_hz > 0.0) {
        return Err(Error::config("comb spacing must be positive"));
    }
    let (bin, _) = delay_scan(h, pad)?;
    Ok(bin / (h.len() as f64 * comb_spacing_hz))
}

/// Multiply a comb-domain vector by the phase ramp `exp(j 2 pi f_n (tau -
/// tau_min))` with `f_n = n * comb_spacing`. With `tau` equal to a channel's
/// arrival time this cancels its delay ramp down to the `tau_min` reference;
/// the mask is unit-modulus, so applying it with swapped arguments inverts it
/// exactly.
pub fn phase_derotate(h: &[C64], tau_s: f64, tau_min_s: f64, comb_spacing_hz: f64) -> Vec<C64> {
    let step = TAU * comb_spacing_hz * (tau_s - tau_min_s);
    h.iter()
        .enumerate()
        .map(|(n, &v)| v * Complex::from_polar(1.0, step * n as f64))
        .collect()
}

/// Noise variance estimate from non-overlapping adjacent-bin differences:
/// `mean over pairs of |h[2n+1] - h[2n]|^2`, halved when `bias_correction`
/// is set (the raw pair difference carries twice the per-bin variance for
/// white noise). A smooth, de-rotated channel contributes almost nothing to
/// the differences, so the estimate isolates the white part. Odd-length
/// inputs ignore the final unpaired bin.
pub fn estimate_noise_adjacent(h: &[C64], bias_correction: bool) -> Result<f64> {
    let pairs = h.len() / 2;
    if pairs == 0 {
        return Err(Error::config("noise estimate needs at least two bins"));
    }
    let sum: f64 = (0..pairs).map(|n| (h[2 * n + 1] - h[2 * n]).norm_sqr()).sum();
    let est = sum / pairs as f64;
    Ok(if bias_correction { est / 2.0 } else { est })
}

// ---------------------------------------------------------------------------
// Correlation prior
// ---------------------------------------------------------------------------

/// Smallest eigenvalue count capturing 99.9% of the (clamped) trace,
/// optionally capped.
fn select_rank(lam: &DVector<f64>, cap: Option<usize>) -> usize {
    let total: f64 = lam.iter().map(|&v| v.max(0.0)).sum();
    let mut rank = lam.len().max(1);
    if total > 0.0 {
        let target = 0.999 * total;
        let mut acc = 0.0;
        for (i, &v) in lam.iter().enumerate() {
            acc += v.max(0.0);
            if acc >= target {
                rank = i + 1;
                break;
            }
        }
    }
    rank.min(cap.unwrap_or(usize::MAX)).clamp(1, lam.len())
}

/// Per-(antenna, port, cell) channel correlation prior in the de-rotated
/// domain, with its retained eigenbasis.
#[derive(Clone, Debug)]
struct Prior {
    /// Exponentially filtered correlation matrix.
    r: DMatrix<C64>,
    /// Retained eigenvectors, `n x rank`.
    u: DMatrix<C64>,
    /// Retained eigenvalues, descending, non-negative.
    lam: DVector<f64>,
}

impl Prior {
    /// Cold start: scaled identity, so the first Wiener pass reduces to a
    /// uniformly shrunk least-squares estimate.
    fn cold(power: f64, n: usize) -> Prior {
        let p = power.max(0.0);
        Prior {
            r: DMatrix::from_diagonal_element(n, n, C64::new(p, 0.0)),
            u: DMatrix::identity(n, n),
            lam: DVector::from_element(n, p),
        }
    }

    /// Start from a supplied correlation matrix (eigendecomposed once).
    fn seeded(r: DMatrix<C64>, cap: Option<usize>) -> Result<Prior> {
        let mut p = Prior { r, u: DMatrix::zeros(0, 0), lam: DVector::zeros(0) };
        p.refresh(cap)?;
        Ok(p)
    }

    /// Re-eigendecompose the filtered correlation and re-select the rank.
    fn refresh(&mut self, cap: Option<usize>) -> Result<()> {
        // guard hermitian drift from accumulated rank-1 updates
        let herm = (&self.r + self.r.adjoint()).scale(0.5);
        self.r = herm;
        let (vecs, vals) = hermitian_eig_desc(&self.r)?;
        let rank = select_rank(&vals, cap);
        self.u = vecs.columns(0, rank).into_owned();
        self.lam = DVector::from_fn(rank, |i, _| vals[i].max(0.0));
        Ok(())
    }

    /// Exponential update towards the outer product of a fresh estimate.
    fn alpha_update(&mut self, h: &DVector<C64>, alpha: f64) {
        let keep = 1.0 - alpha;
        let n = self.r.nrows();
        for j in 0..n {
            let hj = h[j].conj() * alpha;
            for i in 0..n {
                self.r[(i, j)] = self.r[(i, j)] * keep + h[i] * hj;
            }
        }
    }

    /// Eigen-domain Wiener shrinkage `U diag(lam/(lam+sigma2)) U^H h`. Every
    /// gain lies in [0, 1], so output energy never exceeds input energy; with
    /// zero noise and a full-rank basis the filter is the identity.
    fn wiener(&self, sigma2: f64, h: &DVector<C64>) -> DVector<C64> {
        let mut coeff = self.u.adjoint() * h;
        for (i, c) in coeff.iter_mut().enumerate() {
            let lam = self.lam[i];
            let den = lam + sigma2;
            *c *= if den > 0.0 { lam / den } else { 0.0 };
        }
        &self.u * coeff
    }
}

// ---------------------------------------------------------------------------
// Comb grouping
// ---------------------------------------------------------------------------

/// Cells whose pilots occupy the same resource elements of one port.
#[derive(Clone, Debug)]
struct Group {
    port: usize,
    /// Global cell indices.
    cells: Vec<usize>,
    /// Indices into the union port block (slot-invariant).
    positions: Vec<usize>,
    comb_spacing_hz: f64,
    /// Processing order as indices into `cells`, strongest first.
    order: Vec<usize>,
}

fn build_groups(set: &SnapshotSet) -> Result<Vec<Group>> {
    let layout = &set.layout;
    let grid0 = CrsGrid::new(set.scenario.crs_config(0))?;
    let mut groups = Vec::new();
    for port in 0..layout.n_ports {
        let mut by_positions: HashMap<&[usize], Vec<usize>> = HashMap::new();
        for q in 0..set.scenario.bs.len() {
            let positions = &layout.per_bs[q][port][0].positions;
            for slot in 1..layout.n_slots {
                if layout.per_bs[q][port][slot].positions != *positions {
                    return Err(Error::numerical(
                        "pilot placement varies across slots; comb grouping is undefined",
                    ));
                }
            }
            by_positions.entry(positions.as_slice()).or_default().push(q);
        }
        // full collision or none: partially overlapping combs are unsupported
        let keys: Vec<&[usize]> = by_positions.keys().copied().collect();
        for (i, a) in keys.iter().enumerate() {
            for b in &keys[i + 1..] {
                let sa: std::collections::BTreeSet<_> = a.iter().collect();
                if b.iter().any(|x| sa.contains(x)) {
                    return Err(Error::numerical(
                        "cells overlap on part of a comb; separation expects \
                         colliding combs to coincide exactly",
                    ));
                }
            }
        }
        let spacing = grid0.comb_spacing_hz(port as u8)?;
        for (positions, cells) in by_positions {
            let order = (0..cells.len()).collect();
            groups.push(Group {
                port,
                cells,
                positions: positions.to_vec(),
                comb_spacing_hz: spacing,
                order,
            });
        }
    }
    // deterministic iteration order regardless of hash state
    groups.sort_by_key(|g| (g.port, g.positions.clone()));
    Ok(groups)
}

// ---------------------------------------------------------------------------
// Per-(antenna, group) working state
// ---------------------------------------------------------------------------

/// One cell's running estimate at one antenna: the Wiener-filtered channel
/// in the de-rotated domain, its arrival-time reference and the latest noise
/// estimate.
#[derive(Clone, Debug)]
struct Chan {
    h: DVector<C64>,
    tau_s: f64,
    sigma2: f64,
}

impl Chan {
    fn empty(n: usize) -> Chan {
        Chan { h: DVector::zeros(n), tau_s: 0.0, sigma2: 0.0 }
    }
}

fn demask(z: &DVector<C64>, x: &[C64]) -> DVector<C64> {
    DVector::from_fn(z.len(), |i, _| z[i] * x[i].conj())
}

/// Observation-domain reconstruction of one cell: re-apply the delay ramp,
/// then the pilot mask.
fn remask(chan: &Chan, x: &[C64], comb_spacing_hz: f64) -> DVector<C64> {
    let step = -TAU * comb_spacing_hz * chan.tau_s;
    DVector::from_fn(chan.h.len(), |n, _| {
        chan.h[n] * Complex::from_polar(1.0, step * n as f64) * x[n]
    })
}

/// The serial separation passes for one (antenna, group) cell set.
struct GroupPass<'a> {
    y: DVector<C64>,
    pilots: Vec<&'a [C64]>,
    comb_spacing_hz: f64,
    pad: usize,
    bias_correction: bool,
    order: &'a [usize],
    chans: &'a mut [Chan],
    priors: &'a mut [Prior],
    /// Running observation-domain reconstruction of every cell.
    recon: DVector<C64>,
}

impl<'a> GroupPass<'a> {
    /// Sequential least-squares initialisation: each cell is de-masked from
    /// the observation minus the reconstructions of the cells before it, its
    /// arrival time estimated, and the de-rotated raw estimate stored. Cold
    /// priors are seeded as identity scaled to the estimate power.
    fn init(&mut self, seed_priors: bool, prior_r: Option<&DMatrix<C64>>, cap: Option<usize>) -> Result<()> {
        let n = self.y.len();
        for &ci in self.order {
            let z = &self.y - &self.recon;
            let h_raw = demask(&z, self.pilots[ci]);
            let chan = &mut self.chans[ci];
            if h_raw.iter().all(|v| v.re == 0.0 && v.im == 0.0) {
                chan.h = DVector::zeros(n);
                chan.tau_s = 0.0;
            } else {
                let tau = estimate_toa(h_raw.as_slice(), self.comb_spacing_hz, self.pad)?;
                chan.tau_s = tau;
                chan.h = DVector::from_vec(phase_derotate(
                    h_raw.as_slice(),
                    tau,
                    0.0,
                    self.comb_spacing_hz,
                ));
            }
            if seed_priors {
                self.priors[ci] = match prior_r {
                    Some(r) => {
                        if r.nrows() != n || r.ncols() != n {
                            return Err(Error::dims(format!(
                                "prior correlation is {}x{}, comb has {} bins",
                                r.nrows(),
                                r.ncols(),
                                n
                            )));
                        }
                        Prior::seeded(r.clone(), cap)?
                    }
                    None => {
                        // On a fully shared comb the first cell's
                        // least-squares pass absorbs the whole observation,
                        // leaving later cells with zero power; a zero prior
                        // would pin their estimates at zero for good, so
                        // fall back to the observation power.
                        let ls_power = self.chans[ci].h.norm_squared() / n as f64;
                        let obs_power = self.y.norm_squared() / n as f64;
                        let power =
                            if ls_power > obs_power * 1e-12 { ls_power } else { obs_power };
                        Prior::cold(power, n)
                    }
                };
            }
            let own = remask(&self.chans[ci], self.pilots[ci], self.comb_spacing_hz);
            self.recon += own;
        }
        Ok(())
    }

    /// One full pass over the cells: re-estimate each from the observation
    /// minus all other reconstructions, then Wiener-shrink in the prior's
    /// eigenbasis with a fresh noise estimate. Returns the residual energy
    /// after the pass.
    fn sweep(&mut self) -> Result<f64> {
        for &ci in self.order {
            let own = remask(&self.chans[ci], self.pilots[ci], self.comb_spacing_hz);
            self.recon -= &own;
            let z = &self.y - &self.recon;
            let h_raw = demask(&z, self.pilots[ci]);
            let h_bar = DVector::from_vec(phase_derotate(
                h_raw.as_slice(),
                self.chans[ci].tau_s,
                0.0,
                self.comb_spacing_hz,
            ));
            let sigma2 = estimate_noise_adjacent(h_bar.as_slice(), self.bias_correction)?;
            self.chans[ci].sigma2 = sigma2;
            self.chans[ci].h = self.priors[ci].wiener(sigma2, &h_bar);
            let own = remask(&self.chans[ci], self.pilots[ci], self.comb_spacing_hz);
            self.recon += own;
        }
        Ok((&self.y - &self.recon).norm_squared())
    }

    /// Observation with every cell but `ci` subtracted.
    fn separated(&self, ci: usize) -> DVector<C64> {
        let own = remask(&self.chans[ci], self.pilots[ci], self.comb_spacing_hz);
        &self.y - &self.recon + own
    }

    /// Observation-domain channel estimate of cell `ci` (delay ramp
    /// restored, pilot mask off).
    fn estimate(&self, ci: usize) -> DVector<C64> {
        let chan = &self.chans[ci];
        DVector::from_vec(phase_derotate(
            chan.h.as_slice(),
            0.0,
            chan.tau_s,
            self.comb_spacing_hz,
        ))
    }
}

// ---------------------------------------------------------------------------
// Telemetry
// ---------------------------------------------------------------------------

/// Residual after one pass, aggregated over antennas and groups.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TelemetryRow {
    pub snapshot: usize,
    pub sweep: usize,
    /// `‖y − sum of reconstructions‖² / ‖y‖²` over every processed element.
    pub residual_nmse: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Telemetry {
    pub rows: Vec<TelemetryRow>,
}

impl Telemetry {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "snapshot,sweep,residual_nmse")?;
        for row in &self.rows {
            writeln!(f, "{},{},{:.12e}", row.snapshot, row.sweep, row.residual_nmse)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

/// Result of a separation run.
pub struct IcOutcome {
    /// One single-cell container per cell: the observation with every other
    /// cell's reconstruction subtracted, on the cell's own comb.
    pub separated: Vec<SnapshotSet>,
    /// `[cell][snapshot]`: observation-domain Wiener channel estimates,
    /// antennas by rows, the cell's port combs concatenated by columns.
    pub channels: Vec<Vec<DMatrix<C64>>>,
    pub telemetry: Telemetry,
}

/// Separate every cell of a snapshot container. See [`separate_with_prior`].
pub fn separate(set: &SnapshotSet, cfg: &IcConfig) -> Result<IcOutcome> {
    separate_with_prior(set, cfg, None)
}

/// Separate every cell of a snapshot container, optionally seeding every
/// correlation prior with a known matrix (e.g. a model covariance) instead
/// of the scaled-identity cold start.
pub fn separate_with_prior(
    set: &SnapshotSet,
    cfg: &IcConfig,
    prior_r: Option<&DMatrix<C64>>,
) -> Result<IcOutcome> {
    cfg.validate()?;
    let layout = &set.layout;
    let m_ant = set.m_antennas();
    let n_cells = set.scenario.bs.len();
    let n_snapshots = set.n_snapshots();
    let mut groups = build_groups(set)?;

    // reduced single-cell containers (layout identical for every cell)
    let mut reduced: Vec<SnapshotSet> = (0..n_cells)
        .map(|q| {
            let mut scenario = set.scenario.clone();
            scenario.bs = vec![set.scenario.bs[q].clone()];
            let layout_q = crate::synth::ReLayout::build(&scenario)?;
            let truth = set.truth.as_ref().map(|t| Truth {
                speed_mps: t.speed_mps,
                noise_sigma2: t.noise_sigma2,
                snapshots: t
                    .snapshots
                    .iter()
                    .map(|s| crate::synth::SnapshotTruth {
                        rx_position_m: s.rx_position_m,
                        heading_rad: s.heading_rad,
                        bs: vec![s.bs[q].clone()],
                    })
                    .collect(),
            });
            Ok(SnapshotSet { scenario, layout: layout_q, data: Vec::new(), truth })
        })
        .collect::<Result<_>>()?;
    let red_stride = reduced[0].layout.stride;
    let red_offsets = reduced[0].layout.port_offsets.clone();

    // state: [antenna][group][cell-in-group]
    let mut chans: Vec<Vec<Vec<Chan>>> = (0..m_ant)
        .map(|_| {
            groups
                .iter()
                .map(|g| vec![Chan::empty(g.positions.len()); g.cells.len()])
                .collect()
        })
        .collect();
    let mut priors: Vec<Vec<Vec<Prior>>> = (0..m_ant)
        .map(|_| {
            groups
                .iter()
                .map(|g| vec![Prior::cold(0.0, g.positions.len()); g.cells.len()])
                .collect()
        })
        .collect();

    let mut telemetry = Telemetry::default();
    let mut channels: Vec<Vec<DMatrix<C64>>> = vec![Vec::with_capacity(n_snapshots); n_cells];

    for t in 0..n_snapshots {
        let refresh_now = t > 0 && t % cfg.refresh_period == 0;
        if refresh_now {
            for m in 0..m_ant {
                for g in 0..groups.len() {
                    for prior in &mut priors[m][g] {
                        prior.refresh(cfg.rank)?;
                    }
                }
            }
        }
        if t == 0 || refresh_now {
            reorder_groups(&mut groups, set, t, cfg.toa_pad)?;
        }

        let mut resid = vec![0.0f64; cfg.iterations];
        let mut obs_energy = 0.0f64;
        let mut sep_rows: Vec<Vec<C64>> =
            vec![vec![C64::new(0.0, 0.0); m_ant * red_stride]; n_cells];
        let mut est_rows: Vec<DMatrix<C64>> =
            (0..n_cells).map(|_| DMatrix::zeros(m_ant, red_stride)).collect();

        for m in 0..m_ant {
            for (gi, grp) in groups.iter().enumerate() {
                let slot = layout.slot_of_antenna(m);
                let block = set.block(t, m, grp.port);
                let y = DVector::from_fn(grp.positions.len(), |k, _| block[grp.positions[k]]);
                obs_energy += y.norm_squared();
                let pilots: Vec<&[C64]> = grp
                    .cells
                    .iter()
                    .map(|&q| layout.per_bs[q][grp.port][slot].values.as_slice())
                    .collect();
                let mut pass = GroupPass {
                    y,
                    pilots,
                    comb_spacing_hz: grp.comb_spacing_hz,
                    pad: cfg.toa_pad,
                    bias_correction: cfg.bias_correction,
                    order: &grp.order,
                    chans: &mut chans[m][gi],
                    priors: &mut priors[m][gi],
                    recon: DVector::zeros(grp.positions.len()),
                };
                pass.init(t == 0, prior_r, cfg.rank)?;
                for sweep in 0..cfg.iterations {
                    resid[sweep] += pass.sweep()?;
                }
                for (ci, &q) in grp.cells.iter().enumerate() {
                    let sep = pass.separated(ci);
                    let est = pass.estimate(ci);
                    let base = m * red_stride + red_offsets[grp.port];
                    for k in 0..sep.len() {
                        sep_rows[q][base + k] = sep[k];
                        est_rows[q][(m, red_offsets[grp.port] + k)] = est[k];
                    }
                }
                for (ci, prior) in pass.priors.iter_mut().enumerate() {
                    prior.alpha_update(&pass.chans[ci].h, cfg.alpha);
                }
            }
        }

        for sweep in 0..cfg.iterations {
            telemetry.rows.push(TelemetryRow {
                snapshot: t,
                sweep: sweep + 1,
                residual_nmse: if obs_energy > 0.0 { resid[sweep] / obs_energy } else { 0.0 },
            });
        }
        for q in 0..n_cells {
            reduced[q].data.push(std::mem::take(&mut sep_rows[q]));
            channels[q].push(std::mem::take(&mut est_rows[q]));
        }
    }

    Ok(IcOutcome { separated: reduced, channels, telemetry })
}

/// Re-rank the cells of every group by wideband matched-filter peak power,
/// summed over antennas, strongest first.
fn reorder_groups(groups: &mut [Group], set: &SnapshotSet, t: usize, pad: usize) -> Result<()> {
    let layout = &set.layout;
    let m_ant = set.m_antennas();
    for grp in groups.iter_mut() {
        let mut powers = vec![0.0f64; grp.cells.len()];
        for m in 0..m_ant {
            let slot = layout.slot_of_antenna(m);
            let block = set.block(t, m, grp.port);
            let y = DVector::from_fn(grp.positions.len(), |k, _| block[grp.positions[k]]);
            for (ci, &q) in grp.cells.iter().enumerate() {
                let x = layout.per_bs[q][grp.port][slot].values.as_slice();
                let h = demask(&y, x);
                if let Ok((_, peak)) = delay_scan(h.as_slice(), pad.min(2)) {
                    powers[ci] += peak;
                }
            }
        }
        let mut order: Vec<usize> = (0..grp.cells.len()).collect();
        order.sort_by(|&a, &b| powers[b].total_cmp(&powers[a]).then(a.cmp(&b)));
        grp.order = order;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
