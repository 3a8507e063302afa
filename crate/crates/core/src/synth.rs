//! Forward simulation of multi-cell downlink pilots seen by a switched array.
//!
//! A scenario describes a receiver (array geometry, trajectory, speed) and a
//! set of transmitting cells (pilot configuration, specular paths, diffuse
//! scattering, transmit polarisation). Synthesis walks the snapshot schedule:
//! for every snapshot it resolves each cell's paths against the receiver
//! state, evaluates the polarimetric array response on the cell's own pilot
//! comb, draws the diffuse component and measurement noise from
//! counter-keyed generators, masks everything with the cell's pilot values
//! and accumulates into the union resource-element buffer that the container
//! stores.
//!
//! Everything downstream (interference cancellation, high-resolution
//! estimation, evaluation) consumes the [`SnapshotSet`] produced here, either
//! in memory or through its on-disk directory form.
//!
//! Randomness is *counter based*: every noise or diffuse draw is generated by
//! a fresh stream keyed on `(master seed, snapshot, antenna, component)`.
//! Outputs are therefore bit-identical regardless of antenna processing
//! order or thread count, and a cell's contribution does not depend on which
//! other cells are present (additive superposition, testable).

use std::collections::{BTreeSet, HashMap};
use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::crs::{CpType, CrsConfig, CrsGrid};
use crate::error::{Error, Result};
use crate::linalg::hermitian_eig_desc;
use crate::manifold::{
    synthesize_eadf, synthetic_pattern_samples, system_response, wrap_phi, ArrayConfig,
    ArrayManifold, StructuralParams,
};
use crate::{C64, C_LIGHT};

const SLOTS_PER_FRAME: usize = 20;
const DATA_MAGIC: &[u8; 6] = b"CHSND1";
const DATA_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Counter-keyed randomness
// ---------------------------------------------------------------------------

const TAG_NOISE: u64 = 0;
const TAG_DMC: u64 = 1;

/// Component tag for a diffuse draw of one `(port, cell stream)`.
fn dmc_tag(port: u8, stream: u64) -> u64 {
    TAG_DMC | ((port as u64) << 8) | (stream << 16)
}

/// A deterministic generator for one `(snapshot, antenna, component)` cell of
/// the synthesis. Streams never depend on evaluation order.
pub fn component_rng(master_seed: u64, snapshot: u64, antenna: u64, tag: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&master_seed.to_le_bytes());
    key[8..16].copy_from_slice(&snapshot.to_le_bytes());
    key[16..24].copy_from_slice(&antenna.to_le_bytes());
    key[24..32].copy_from_slice(&tag.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// `n` draws of a circular complex normal with variance `sigma2` per entry.
pub fn draw_cn(rng: &mut ChaCha8Rng, n: usize, sigma2: f64) -> DVector<C64> {
    let s = (sigma2 / 2.0).sqrt();
    DVector::from_fn(n, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(re * s, im * s)
    })
}

// ---------------------------------------------------------------------------
// Diffuse multipath model
// ---------------------------------------------------------------------------

/// Dense multipath description: a one-sided exponential power-delay profile
/// with total power `alpha1`, normalised decay rate `beta_d` (per comb bin)
/// and normalised base delay `tau_d` in `[0, 1)` of the unambiguous range.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmcSpec {
    /// Total diffuse power (variance per comb bin).
    pub alpha1: f64,
    /// Decay rate per comb bin; the effective rate is `beta_d * n_f`.
    pub beta_d: f64,
    /// Onset of the profile as a fraction of the unambiguous delay range.
    #[serde(default)]
    pub tau_d: f64,
}

impl DmcSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 >= 0.0 && self.alpha1.is_finite()) {
            return Err(Error::config("dmc alpha1 must be finite and non-negative"));
        }
        if !(self.beta_d > 0.0 && self.beta_d.is_finite()) {
            return Err(Error::config("dmc beta_d must be finite and positive"));
        }
        if !(0.0..1.0).contains(&self.tau_d) {
            return Err(Error::config("dmc tau_d must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn is_off(&self) -> bool {
        self.alpha1 <= 0.0
    }
}

/// Frequency correlation of the exponential profile at bin lag `delta`:
/// `kappa(d) = alpha1 * exp(-j 2 pi tau_d d) / (1 + j 2 pi d / (beta_d n_f))`.
pub fn dmc_kappa(spec: &DmcSpec, n_f: usize, delta: i64) -> C64 {
    let beta_eff = spec.beta_d * n_f as f64;
    let d = delta as f64;
    let rot = Complex::from_polar(1.0, -std::f64::consts::TAU * spec.tau_d * d);
    spec.alpha1 * rot / C64::new(1.0, std::f64::consts::TAU * d / beta_eff)
}

/// Toeplitz frequency covariance `R_f` of the diffuse component on an
/// `n_f`-bin comb.
pub fn dmc_covariance(spec: &DmcSpec, n_f: usize) -> DMatrix<C64> {
    DMatrix::from_fn(n_f, n_f, |r, c| dmc_kappa(spec, n_f, r as i64 - c as i64))
}

/// Eigen square-root factor `(V, sqrt(lambda))` of a diffuse covariance, used
/// to draw correlated complex normals as `V (sqrt(lambda) .* w)`.
fn covariance_sqrt(r: &DMatrix<C64>) -> Result<(DMatrix<C64>, DVector<f64>)> {
    let (vecs, vals) = hermitian_eig_desc(r)?;
    Ok((vecs, vals.map(|v| v.max(0.0).sqrt())))
}

// ---------------------------------------------------------------------------
// Scenario configuration
// ---------------------------------------------------------------------------

fn cx(v: [f64; 2]) -> C64 {
    C64::new(v[0], v[1])
}

/// Polarimetric weight matrix of one path; complex values as `[re, im]`.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolWeights {
    #[serde(default)]
    pub hh: [f64; 2],
    #[serde(default)]
    pub hv: [f64; 2],
    #[serde(default)]
    pub vh: [f64; 2],
    #[serde(default)]
    pub vv: [f64; 2],
}

impl PolWeights {
    /// Horizontal-only coupling, handy in tests and simple scenes.
    pub fn hh_only(re: f64, im: f64) -> Self {
        PolWeights { hh: [re, im], ..Default::default() }
    }

    /// Effective receive-side weights for a transmit polarisation `(th, tv)`:
    /// `gamma_h = th*hh + tv*vh`, `gamma_v = th*hv + tv*vv`.
    pub fn combine(&self, tx: (C64, C64)) -> (C64, C64) {
        (
            tx.0 * cx(self.hh) + tx.1 * cx(self.vh),
            tx.0 * cx(self.hv) + tx.1 * cx(self.vv),
        )
    }
}

fn default_true() -> bool {
    true
}

fn default_ref_distance() -> f64 {
    100.0
}

/// One specular propagation path of a cell.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PathSpec {
    /// Pinned parameters in the array frame, identical in every snapshot.
    Fixed {
        delay_s: f64,
        azimuth_rad: f64,
        elevation_rad: f64,
        weights: PolWeights,
    },
    /// Line of sight from the transmitter, resolved against the trajectory.
    /// The weights apply at `reference_distance_m`; amplitude scales with
    /// inverse distance and, when `carrier_phase` is set, rotates with the
    /// carrier over the path length.
    Direct {
        weights: PolWeights,
        #[serde(default = "default_ref_distance")]
        reference_distance_m: f64,
        #[serde(default = "default_true")]
        carrier_phase: bool,
    },
    /// Single bounce over a fixed scattering point.
    Bounce {
        via_m: [f64; 3],
        weights: PolWeights,
        #[serde(default = "default_ref_distance")]
        reference_distance_m: f64,
        #[serde(default = "default_true")]
        carrier_phase: bool,
    },
}

/// One transmitting cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsConfig {
    /// Physical cell identity, 0..=503; determines pilot values and comb
    /// placement.
    pub cell_id: u16,
    #[serde(default = "default_bs_position")]
    pub position_m: [f64; 3],
    /// Transmit antenna response `(H, V)` as `[re, im]` pairs, shared by all
    /// pilot ports; an omnidirectional horizontal transmitter by default.
    #[serde(default = "default_tx_pol")]
    pub tx_pol: [[f64; 2]; 2],
    #[serde(default)]
    pub paths: Vec<PathSpec>,
    #[serde(default)]
    pub dmc: Option<DmcSpec>,
    /// Seed stream of this cell's stochastic terms; defaults to its index in
    /// the cell list. Pin it when comparing scenarios with different cell
    /// subsets.
    #[serde(default)]
    pub rng_stream: Option<u64>,
}

fn default_bs_position() -> [f64; 3] {
    [300.0, 0.0, 30.0]
}

fn default_tx_pol() -> [[f64; 2]; 2] {
    [[1.0, 0.0], [0.0, 0.0]]
}

/// Heading change applied from a given snapshot onwards.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadingLeg {
    pub from_snapshot: usize,
    pub heading_rad: f64,
}

/// Receiver (vehicle) description: array build, motion, snapshot schedule.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReceiverConfig {
    #[serde(default)]
    pub array: ArrayConfig,
    #[serde(default = "default_n_snapshots")]
    pub n_snapshots: usize,
    #[serde(default = "default_snapshot_period")]
    pub snapshot_period_s: f64,
    #[serde(default)]
    pub start_position_m: [f64; 3],
    /// Ground speed in m/s along the current heading.
    #[serde(default)]
    pub speed_mps: f64,
    /// Piecewise-constant heading schedule; heading 0 (the array's forward
    /// axis pointing along +x) before the first leg.
    #[serde(default)]
    pub heading: Vec<HeadingLeg>,
}

fn default_n_snapshots() -> usize {
    1
}

fn default_snapshot_period() -> f64 {
    75e-3
}

impl Default for ReceiverConfig {
    fn default() -> Self {
        ReceiverConfig {
            array: ArrayConfig::default(),
            n_snapshots: default_n_snapshots(),
            snapshot_period_s: default_snapshot_period(),
            start_position_m: [0.0; 3],
            speed_mps: 0.0,
            heading: Vec::new(),
        }
    }
}

fn default_version() -> u32 {
    1
}

fn default_n_ports() -> u8 {
    1
}

fn default_n_subcarriers() -> usize {
    1200
}

fn default_scs() -> f64 {
    15e3
}

fn default_cp() -> CpType {
    CpType::Normal
}

/// Complete description of one synthetic measurement run.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub master_seed: u64,
    /// Pilot ports transmitted by every cell (1, 2 or 4).
    #[serde(default = "default_n_ports")]
    pub n_ports: u8,
    #[serde(default = "default_n_subcarriers")]
    pub n_subcarriers: usize,
    #[serde(default = "default_scs")]
    pub subcarrier_spacing_hz: f64,
    #[serde(default = "default_cp")]
    pub cp_type: CpType,
    /// Measurement noise variance per resource element.
    #[serde(default)]
    pub noise_sigma2: f64,
    /// Optional band-edge taper fraction of the system response.
    #[serde(default)]
    pub edge_taper: Option<f64>,
    pub rx: ReceiverConfig,
    pub bs: Vec<BsConfig>,
}

impl ScenarioConfig {
    /// Pilot configuration of cell `q`.
    pub fn crs_config(&self, q: usize) -> CrsConfig {
        CrsConfig {
            cell_id: self.bs[q].cell_id,
            n_ports: self.n_ports,
            n_subcarriers: self.n_subcarriers,
            subcarrier_spacing_hz: self.subcarrier_spacing_hz,
            cp_type: self.cp_type,
            n_slots_per_frame: SLOTS_PER_FRAME,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::config(format!("unsupported scenario version {}", self.version)));
        }
        if self.bs.is_empty() {
            return Err(Error::config("scenario has no transmitting cells"));
        }
        if !(self.noise_sigma2 >= 0.0 && self.noise_sigma2.is_finite()) {
            return Err(Error::config("noise_sigma2 must be finite and non-negative"));
        }
        if self.rx.n_snapshots == 0 {
            return Err(Error::config("n_snapshots must be positive"));
        }
        if !(self.rx.snapshot_period_s > 0.0) {
            return Err(Error::config("snapshot_period_s must be positive"));
        }
        if !(self.rx.speed_mps >= 0.0 && self.rx.speed_mps.is_finite()) {
            return Err(Error::config("speed_mps must be finite and non-negative"));
        }
        for w in self.rx.heading.windows(2) {
            if w[1].from_snapshot <= w[0].from_snapshot {
                return Err(Error::config("heading legs must have increasing from_snapshot"));
            }
        }
        for q in 0..self.bs.len() {
            self.crs_config(q).validate()?;
            if let Some(dmc) = &self.bs[q].dmc {
                dmc.validate()?;
            }
            for (i, p) in self.bs[q].paths.iter().enumerate() {
                match p {
                    PathSpec::Fixed { delay_s, elevation_rad, .. } => {
                        if !(*delay_s >= 0.0 && delay_s.is_finite()) {
                            return Err(Error::config(format!(
                                "cell {q} path {i}: delay must be finite and non-negative"
                            )));
                        }
                        if !(0.0..=std::f64::consts::PI).contains(elevation_rad) {
                            return Err(Error::config(format!(
                                "cell {q} path {i}: elevation outside [0, pi]"
                            )));
                        }
                    }
                    PathSpec::Direct { reference_distance_m, .. }
                    | PathSpec::Bounce { reference_distance_m, .. } => {
                        if !(*reference_distance_m > 0.0) {
                            return Err(Error::config(format!(
                                "cell {q} path {i}: reference distance must be positive"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Resource-element layout
// ---------------------------------------------------------------------------

/// Where one cell's pilots sit inside a union block, together with the pilot
/// values, for one `(port, slot)`.
#[derive(Clone, Debug)]
pub struct PilotMap {
    /// Indices into the union resource-element list, increasing.
    pub positions: Vec<usize>,
    /// Unit-modulus pilot values aligned with `positions`.
    pub values: Vec<C64>,
}

/// Union resource-element layout of a scenario and each cell's place in it.
///
/// The layout is fully determined by the pilot configurations, so it is
/// recomputed from the scenario echo when a container is loaded rather than
/// stored.
#[derive(Clone, Debug)]
pub struct ReLayout {
    pub n_ports: usize,
    pub n_slots: usize,
    /// `[port][slot]` union resource elements as `(symbol, subcarrier)`,
    /// sorted by subcarrier then symbol.
    pub union_res: Vec<Vec<Vec<(usize, usize)>>>,
    /// `[cell][port][slot]` pilot placement inside the union.
    pub per_bs: Vec<Vec<Vec<PilotMap>>>,
    /// Union length per port (constant over slots).
    pub re_counts: Vec<usize>,
    /// Offset of each port's block inside an antenna record.
    pub port_offsets: Vec<usize>,
    /// Total union length per antenna (sum of `re_counts`).
    pub stride: usize,
}

impl ReLayout {
    pub fn build(scenario: &ScenarioConfig) -> Result<Self> {
        let grids: Vec<CrsGrid> = (0..scenario.bs.len())
            .map(|q| CrsGrid::new(scenario.crs_config(q)))
            .collect::<Result<_>>()?;
        Self::from_grids(&grids, scenario.n_ports as usize)
    }

    pub fn from_grids(grids: &[CrsGrid], n_ports: usize) -> Result<Self> {
        if grids.is_empty() {
            return Err(Error::config("resource layout needs at least one cell"));
        }
        let n_slots = SLOTS_PER_FRAME;
        let mut union_res = vec![vec![Vec::new(); n_slots]; n_ports];
        let mut per_bs = vec![vec![vec![]; n_ports]; grids.len()];
        let mut re_counts = vec![0usize; n_ports];

        for port in 0..n_ports {
            for slot in 0..n_slots {
                // union keyed (subcarrier, symbol) for subcarrier-major order
                let mut union: BTreeSet<(usize, usize)> = BTreeSet::new();
                for grid in grids {
                    for &(sym, sc) in &grid.slot_comb(port as u8, slot)?.res {
                        union.insert((sc, sym));
                    }
                }
                let ordered: Vec<(usize, usize)> =
                    union.iter().map(|&(sc, sym)| (sym, sc)).collect();
                let index: HashMap<(usize, usize), usize> = ordered
                    .iter()
                    .enumerate()
                    .map(|(i, &re)| (re, i))
                    .collect();
                for (q, grid) in grids.iter().enumerate() {
                    let comb = grid.slot_comb(port as u8, slot)?;
                    let positions = comb.res.iter().map(|re| index[re]).collect();
                    per_bs[q][port].push(PilotMap {
                        positions,
                        values: comb.values.clone(),
                    });
                }
                if slot == 0 {
                    re_counts[port] = ordered.len();
                } else if re_counts[port] != ordered.len() {
                    return Err(Error::numerical(format!(
                        "union block size changed between slots for port {port}: \
                         {} vs {}",
                        re_counts[port],
                        ordered.len()
                    )));
                }
                union_res[port][slot] = ordered;
            }
        }
        let mut port_offsets = Vec::with_capacity(n_ports);
        let mut acc = 0usize;
        for &c in &re_counts {
            port_offsets.push(acc);
            acc += c;
        }
        Ok(ReLayout {
            n_ports,
            n_slots,
            union_res,
            per_bs,
            re_counts,
            port_offsets,
            stride: acc,
        })
    }

    /// Slot observed by a given antenna of the switch sequence.
    pub fn slot_of_antenna(&self, antenna: usize) -> usize {
        antenna % self.n_slots
    }
}

// ---------------------------------------------------------------------------
// Trajectory
// ---------------------------------------------------------------------------

/// Receiver position and heading at the start of every snapshot.
pub fn rx_states(rx: &ReceiverConfig) -> Vec<([f64; 3], f64)> {
    let heading_at = |snapshot: usize| -> f64 {
        rx.heading
            .iter()
            .take_while(|leg| leg.from_snapshot <= snapshot)
            .last()
            .map_or(0.0, |leg| leg.heading_rad)
    };
    let mut out = Vec::with_capacity(rx.n_snapshots);
    let mut pos = rx.start_position_m;
    for i in 0..rx.n_snapshots {
        let h = heading_at(i);
        out.push((pos, h));
        let step = rx.speed_mps * rx.snapshot_period_s;
        pos[0] += step * h.cos();
        pos[1] += step * h.sin();
    }
    out
}

// ---------------------------------------------------------------------------
// Path resolution
// ---------------------------------------------------------------------------

/// Physical parameters of one path at one snapshot, in the array frame, with
/// the transmit polarisation already folded into the weights.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ResolvedPath {
    pub delay_s: f64,
    pub azimuth_rad: f64,
    pub elevation_rad: f64,
    pub gamma_h: [f64; 2],
    pub gamma_v: [f64; 2],
}

impl ResolvedPath {
    pub fn gamma(&self) -> (C64, C64) {
        (cx(self.gamma_h), cx(self.gamma_v))
    }
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Arrival direction of a source seen from `rx` with the array rotated to
/// `heading`: `(azimuth in the array frame, elevation)`. Sources below the
/// array horizon are outside the angular chart and rejected.
fn arrival_angles(rx: [f64; 3], heading: f64, source: [f64; 3]) -> Result<(f64, f64)> {
    let d = sub3(source, rx);
    let r = norm3(d);
    if !(r > 0.0) {
        return Err(Error::config("path endpoint coincides with the receiver"));
    }
    let sin_el = (d[2] / r).clamp(-1.0, 1.0);
    if sin_el < -1e-12 {
        return Err(Error::config(format!(
            "arrival from below the array horizon (sin elevation {sin_el:.3e}) \
             is outside the angular domain"
        )));
    }
    let el = sin_el.max(0.0).asin();
    let az = wrap_phi(d[1].atan2(d[0]) - heading);
    Ok((az, el))
}

/// Resolve every path of cell `q` against a receiver state.
pub fn resolve_paths(
    scenario: &ScenarioConfig,
    q: usize,
    rx_pos: [f64; 3],
    heading: f64,
) -> Result<Vec<ResolvedPath>> {
    let bs = &scenario.bs[q];
    let tx = (cx(bs.tx_pol[0]), cx(bs.tx_pol[1]));
    let f_c = scenario.rx.array.f_c_hz;
    let mut out = Vec::with_capacity(bs.paths.len());
    for p in &bs.paths {
        let rp = match *p {
            PathSpec::Fixed { delay_s, azimuth_rad, elevation_rad, weights } => {
                let (gh, gv) = weights.combine(tx);
                ResolvedPath {
                    delay_s,
                    azimuth_rad: wrap_phi(azimuth_rad),
                    elevation_rad,
                    gamma_h: [gh.re, gh.im],
                    gamma_v: [gv.re, gv.im],
                }
            }
            PathSpec::Direct { weights, reference_distance_m, carrier_phase } => {
                let (az, el) = arrival_angles(rx_pos, heading, bs.position_m)?;
                let d = norm3(sub3(bs.position_m, rx_pos));
                let (gh, gv) = weights.combine(tx);
                let scale = propagation_scale(d, reference_distance_m, carrier_phase, f_c);
                ResolvedPath {
                    delay_s: d / C_LIGHT,
                    azimuth_rad: az,
                    elevation_rad: el,
                    gamma_h: [(gh * scale).re, (gh * scale).im],
                    gamma_v: [(gv * scale).re, (gv * scale).im],
                }
            }
            PathSpec::Bounce { via_m, weights, reference_distance_m, carrier_phase } => {
                let (az, el) = arrival_angles(rx_pos, heading, via_m)?;
                let d = norm3(sub3(via_m, bs.position_m)) + norm3(sub3(via_m, rx_pos));
                let (gh, gv) = weights.combine(tx);
                let scale = propagation_scale(d, reference_distance_m, carrier_phase, f_c);
                ResolvedPath {
                    delay_s: d / C_LIGHT,
                    azimuth_rad: az,
                    elevation_rad: el,
                    gamma_h: [(gh * scale).re, (gh * scale).im],
                    gamma_v: [(gv * scale).re, (gv * scale).im],
                }
            }
        };
        out.push(rp);
    }
    Ok(out)
}

fn propagation_scale(d: f64, ref_d: f64, carrier_phase: bool, f_c_hz: f64) -> C64 {
    let amp = ref_d / d.max(1e-9);
    if carrier_phase {
        Complex::from_polar(amp, -std::f64::consts::TAU * f_c_hz * d / C_LIGHT)
    } else {
        C64::new(amp, 0.0)
    }
}

// ---------------------------------------------------------------------------
// Forward response
// ---------------------------------------------------------------------------

/// Specular response of a path set on one manifold: an `M x n_f` matrix whose
/// row `m` is antenna `m`'s comb observation,
/// `sum_l (b_RH[m,l] gamma_h[l] + b_RV[m,l] gamma_v[l]) * b_f[.,l]`.
pub fn sp_matrix(
    mf: &ArrayManifold,
    sp: &StructuralParams,
    gamma_h: &[C64],
    gamma_v: &[C64],
    v: f64,
) -> Result<DMatrix<C64>> {
    if gamma_h.len() != sp.len() || gamma_v.len() != sp.len() {
        return Err(Error::dims("sp_matrix: weight vectors must match the path count"));
    }
    let basis = mf.polarimetric_basis(sp, v)?;
    let m = mf.m_antennas();
    let n_f = mf.n_f();
    let mut s = DMatrix::<C64>::zeros(m, n_f);
    for l in 0..sp.len() {
        for row in 0..m {
            let w = basis.b_rh[(row, l)] * gamma_h[l] + basis.b_rv[(row, l)] * gamma_v[l];
            for col in 0..n_f {
                s[(row, col)] += w * basis.b_f[(col, l)];
            }
        }
    }
    Ok(s)
}

/// One calibrated manifold per pilot port (the comb length and spacing differ
/// between the merged two-symbol ports and the single-symbol ports). The
/// aperture synthesis runs once and is shared.
pub fn build_port_manifolds(scenario: &ScenarioConfig) -> Result<Vec<ArrayManifold>> {
    let cfg = &scenario.rx.array;
    let (h, v) = synthetic_pattern_samples(cfg);
    let g_rh = synthesize_eadf(&h, cfg.m_az, cfg.m_el, cfg.recon_tol)?;
    let g_rv = synthesize_eadf(&v, cfg.m_az, cfg.m_el, cfg.recon_tol)?;
    let grid = CrsGrid::new(scenario.crs_config(0))?;
    let t_s: Vec<f64> = (0..cfg.geometry.n_ports()).map(|m| m as f64 * cfg.t0_s).collect();
    (0..scenario.n_ports as usize)
        .map(|p| {
            ArrayManifold::new(
                g_rh.clone(),
                g_rv.clone(),
                system_response(grid.n_f(p as u8)?, scenario.edge_taper)?,
                cfg.m_az,
                cfg.m_el,
                t_s.clone(),
                cfg.t0_s,
                cfg.f_c_hz,
                grid.comb_spacing_hz(p as u8)?,
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Ground truth
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BsTruth {
    pub cell_id: u16,
    pub paths: Vec<ResolvedPath>,
    pub dmc: Option<DmcSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SnapshotTruth {
    pub rx_position_m: [f64; 3],
    pub heading_rad: f64,
    pub bs: Vec<BsTruth>,
}

/// Per-snapshot resolved parameters, written next to the samples so the
/// evaluation stage never re-derives geometry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Truth {
    pub speed_mps: f64,
    pub noise_sigma2: f64,
    pub snapshots: Vec<SnapshotTruth>,
}

// ---------------------------------------------------------------------------
// Snapshot container
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    n_snapshots: usize,
    m_antennas: usize,
    n_ports: usize,
    re_counts: Vec<usize>,
    scenario: ScenarioConfig,
}

/// A complete synthetic measurement: scenario echo, union layout, samples,
/// and ground truth. On disk this is a directory holding `manifest.json`,
/// `y.bin` and `truth.json`.
#[derive(Clone, Debug)]
pub struct SnapshotSet {
    pub scenario: ScenarioConfig,
    pub layout: ReLayout,
    /// `[snapshot]` flat antenna-major records: antenna, then port, then
    /// union resource element.
    pub data: Vec<Vec<C64>>,
    pub truth: Option<Truth>,
}

impl SnapshotSet {
    pub fn n_snapshots(&self) -> usize {
        self.data.len()
    }

    pub fn m_antennas(&self) -> usize {
        self.scenario.rx.array.geometry.n_ports()
    }

    pub fn n_ports(&self) -> usize {
        self.layout.n_ports
    }

    /// One antenna's block of one port's union comb.
    pub fn block(&self, snapshot: usize, antenna: usize, port: usize) -> &[C64] {
        let start = antenna * self.layout.stride + self.layout.port_offsets[port];
        &self.data[snapshot][start..start + self.layout.re_counts[port]]
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = Manifest {
            version: DATA_VERSION,
            n_snapshots: self.n_snapshots(),
            m_antennas: self.m_antennas(),
            n_ports: self.n_ports(),
            re_counts: self.layout.re_counts.clone(),
            scenario: self.scenario.clone(),
        };
        let mj = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(dir.join("manifest.json"), mj)?;
        if let Some(truth) = &self.truth {
            std::fs::write(dir.join("truth.json"), serde_json::to_string_pretty(truth)?)?;
        }

        let mut buf = Vec::with_capacity(64 + self.data.len() * self.layout.stride * 8);
        buf.extend_from_slice(DATA_MAGIC);
        buf.extend_from_slice(&DATA_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.n_snapshots() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.m_antennas() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.n_ports() as u32).to_le_bytes());
        for &c in &self.layout.re_counts {
            buf.extend_from_slice(&(c as u32).to_le_bytes());
        }
        for snap in &self.data {
            for v in snap {
                buf.extend_from_slice(&(v.re as f32).to_le_bytes());
                buf.extend_from_slice(&(v.im as f32).to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(dir.join("y.bin"))?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let mj = std::fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: Manifest = serde_json::from_str(&mj)?;
        if manifest.version != DATA_VERSION {
            return Err(Error::format(format!(
                "unsupported container version {}",
                manifest.version
            )));
        }
        manifest.scenario.validate()?;
        let layout = ReLayout::build(&manifest.scenario)?;
        if layout.re_counts != manifest.re_counts {
            return Err(Error::format(
                "manifest re_counts disagree with the layout derived from the scenario",
            ));
        }
        let m = manifest.scenario.rx.array.geometry.n_ports();
        if m != manifest.m_antennas {
            return Err(Error::format("manifest antenna count disagrees with the array build"));
        }

        let mut bytes = Vec::new();
        std::fs::File::open(dir.join("y.bin"))?.read_to_end(&mut bytes)?;
        let header = 6 + 4 + 8 + 4 + 4 + 4 * layout.n_ports;
        if bytes.len() < header || &bytes[..6] != DATA_MAGIC {
            return Err(Error::format("not a snapshot container (bad magic)"));
        }
        let mut pos = 6;
        let u32_at = |pos: &mut usize| {
            let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
            *pos += 4;
            v as usize
        };
        let version = u32_at(&mut pos);
        let n_snapshots = {
            let v = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
            pos += 8;
            v as usize
        };
        let m_antennas = u32_at(&mut pos);
        let n_ports = u32_at(&mut pos);
        let counts: Vec<usize> = (0..n_ports).map(|_| u32_at(&mut pos)).collect();
        if version != DATA_VERSION as usize
            || n_snapshots != manifest.n_snapshots
            || m_antennas != manifest.m_antennas
            || n_ports != manifest.n_ports
            || counts != layout.re_counts
        {
            return Err(Error::format("sample header disagrees with the manifest"));
        }
        let want = header + n_snapshots * m_antennas * layout.stride * 8;
        if bytes.len() != want {
            return Err(Error::format(format!(
                "sample payload is {} bytes, expected {}",
                bytes.len(),
                want
            )));
        }
        let mut data = Vec::with_capacity(n_snapshots);
        for s in 0..n_snapshots {
            let base = header + s * m_antennas * layout.stride * 8;
            let mut snap = Vec::with_capacity(m_antennas * layout.stride);
            for k in 0..m_antennas * layout.stride {
                let o = base + k * 8;
                let re = f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
                let im = f32::from_le_bytes(bytes[o + 4..o + 8].try_into().unwrap());
                snap.push(C64::new(re as f64, im as f64));
            }
            data.push(snap);
        }

        let truth = match std::fs::read_to_string(dir.join("truth.json")) {
            Ok(t) => Some(serde_json::from_str(&t)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        Ok(SnapshotSet { scenario: manifest.scenario, layout, data, truth })
    }
}

// ---------------------------------------------------------------------------
// Synthesis driver
// ---------------------------------------------------------------------------

/// Run the forward simulation of a scenario.
pub fn synthesize(scenario: &ScenarioConfig) -> Result<SnapshotSet> {
    scenario.validate()?;
    let layout = ReLayout::build(scenario)?;
    let manifolds = build_port_manifolds(scenario)?;
    let m = scenario.rx.array.geometry.n_ports();
    let states = rx_states(&scenario.rx);
    let speed = scenario.rx.speed_mps;

    // Diffuse covariance factors, keyed by (cell, comb length); ports with
    // the same comb length share one factorisation.
    let mut dmc_factors: HashMap<(usize, usize), (DMatrix<C64>, DVector<f64>)> = HashMap::new();
    for (q, bs) in scenario.bs.iter().enumerate() {
        if let Some(spec) = &bs.dmc {
            if !spec.is_off() {
                for mf in &manifolds {
                    let key = (q, mf.n_f());
                    if !dmc_factors.contains_key(&key) {
                        let r = dmc_covariance(spec, mf.n_f());
                        dmc_factors.insert(key, covariance_sqrt(&r)?);
                    }
                }
            }
        }
    }

    let mut data = Vec::with_capacity(states.len());
    let mut truth_snaps = Vec::with_capacity(states.len());
    for (i, &(pos, heading)) in states.iter().enumerate() {
        let mut buf = vec![C64::new(0.0, 0.0); m * layout.stride];
        let mut bs_truth = Vec::with_capacity(scenario.bs.len());

        for (q, bs) in scenario.bs.iter().enumerate() {
            let stream = bs.rng_stream.unwrap_or(q as u64);
            let paths = resolve_paths(scenario, q, pos, heading)?;
            bs_truth.push(BsTruth { cell_id: bs.cell_id, paths: paths.clone(), dmc: bs.dmc });

            for (p, mf) in manifolds.iter().enumerate() {
                let s = if paths.is_empty() {
                    None
                } else {
                    let sp = StructuralParams::new(
                        paths.iter().map(|r| mf.mu_tau_from_seconds(r.delay_s)).collect(),
                        paths.iter().map(|r| r.azimuth_rad).collect(),
                        paths.iter().map(|r| r.elevation_rad).collect(),
                    )?;
                    let gh: Vec<C64> = paths.iter().map(|r| r.gamma().0).collect();
                    let gv: Vec<C64> = paths.iter().map(|r| r.gamma().1).collect();
                    Some(sp_matrix(mf, &sp, &gh, &gv, speed)?)
                };
                let factor = dmc_factors.get(&(q, mf.n_f()));
                let n_f = mf.n_f();

                for ant in 0..m {
                    let slot = layout.slot_of_antenna(ant);
                    let map = &layout.per_bs[q][p][slot];
                    let diffuse = factor.map(|(vecs, sq)| {
                        let mut w = draw_cn(
                            &mut component_rng(
                                scenario.master_seed,
                                i as u64,
                                ant as u64,
                                dmc_tag(p as u8, stream),
                            ),
                            n_f,
                            1.0,
                        );
                        for (k, wv) in w.iter_mut().enumerate() {
                            *wv *= sq[k];
                        }
                        vecs * w
                    });
                    let base = ant * layout.stride + layout.port_offsets[p];
                    for (k, &pos_k) in map.positions.iter().enumerate() {
                        let mut val = C64::new(0.0, 0.0);
                        if let Some(sm) = &s {
                            val += sm[(ant, k)];
                        }
                        if let Some(d) = &diffuse {
                            val += d[k];
                        }
                        buf[base + pos_k] += val * map.values[k];
                    }
                }
            }
        }

        if scenario.noise_sigma2 > 0.0 {
            for ant in 0..m {
                let noise = draw_cn(
                    &mut component_rng(scenario.master_seed, i as u64, ant as u64, TAG_NOISE),
                    layout.stride,
                    scenario.noise_sigma2,
                );
                for k in 0..layout.stride {
                    buf[ant * layout.stride + k] += noise[k];
                }
            }
        }

        data.push(buf);
        truth_snaps.push(SnapshotTruth {
            rx_position_m: pos,
            heading_rad: heading,
            bs: bs_truth,
        });
    }

    Ok(SnapshotSet {
        scenario: scenario.clone(),
        layout,
        data,
        truth: Some(Truth {
            speed_mps: speed,
            noise_sigma2: scenario.noise_sigma2,
            snapshots: truth_snaps,
        }),
    })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::ArrayGeometry;
    use proptest::prelude::*;

    // -- 1. diffuse frequency correlation ------------------------------------

    /// Independent quadrature of the one-sided exponential profile:
    /// `integral alpha1 beta e^{-beta u} e^{-j 2 pi d (u + tau_d)} du`
    /// over `[0, 40/beta]` with composite Simpson.
    fn kappa_by_quadrature(alpha1: f64, beta_eff: f64, tau_d: f64, delta: i64) -> C64 {
        let n = 1 << 15;
        let upper = 40.0 / beta_eff;
        let h = upper / n as f64;
        let f = |u: f64| {
            Complex::from_polar(
                alpha1 * beta_eff * (-beta_eff * u).exp(),
                -std::f64::consts::TAU * delta as f64 * (u + tau_d),
            )
        };
        let mut s = f(0.0) + f(upper);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(k as f64 * h);
        }
        s * (h / 3.0)
    }

    #[test]
    fn dmc_kappa_matches_quadrature_oracle() {
        let spec = DmcSpec { alpha1: 2.5, beta_d: 0.25, tau_d: 0.2 };
        let n_f = 200; // beta_eff = 50
        for &delta in &[0i64, 1, 7, 33] {
            let want = kappa_by_quadrature(2.5, 50.0, 0.2, delta);
            let got = dmc_kappa(&spec, n_f, delta);
            assert!(
                (got - want).norm() / want.norm() < 1e-9,
                "delta {delta}: {got} vs {want}"
            );
        }
        // frozen quadrature values
        let frozen = [
            (0i64, C64::new(2.5, 0.0)),
            (1, C64::new(0.466394266416, -2.436250122780)),
            (7, C64::new(-1.868977777494, 0.174575588808)),
            (33, C64::new(0.223730427530, 0.541674905624)),
        ];
        for (delta, want) in frozen {
            let got = dmc_kappa(&spec, n_f, delta);
            assert!((got - want).norm() < 1e-9, "delta {delta}: {got} vs {want}");
        }
    }

    #[test]
    fn dmc_covariance_is_hermitian_with_total_power_diagonal() {
        let spec = DmcSpec { alpha1: 1.7, beta_d: 0.3, tau_d: 0.1 };
        let r = dmc_covariance(&spec, 16);
        for i in 0..16 {
            assert!((r[(i, i)] - C64::new(1.7, 0.0)).norm() < 1e-14);
            for j in 0..16 {
                assert!((r[(i, j)] - r[(j, i)].conj()).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn dmc_flat_profile_limit_is_white() {
        // A vanishing decay rate spreads the profile over the whole
        // unambiguous range: off-diagonal correlation disappears.
        let spec = DmcSpec { alpha1: 1.0, beta_d: 1e-9, tau_d: 0.0 };
        let r = dmc_covariance(&spec, 8);
        for i in 0..8 {
            for j in 0..8 {
                if i != j {
                    assert!(r[(i, j)].norm() < 1e-7, "({i},{j}) = {}", r[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn dmc_sqrt_factor_reproduces_covariance() {
        let spec = DmcSpec { alpha1: 0.8, beta_d: 0.4, tau_d: 0.25 };
        let r = dmc_covariance(&spec, 12);
        let (vecs, sq) = covariance_sqrt(&r).unwrap();
        let mut half = vecs.clone();
        for c in 0..half.ncols() {
            for v in half.column_mut(c).iter_mut() {
                *v *= sq[c];
            }
        }
        let back = &half * half.adjoint();
        let err: f64 = (&back - &r).iter().map(|x| x.norm()).sum::<f64>() / r.iter().map(|x| x.norm()).sum::<f64>();
        assert!(err < 1e-10, "relative factorisation error {err}");
    }

    // -- 2. counter-keyed randomness ------------------------------------------

    #[test]
    fn component_rng_is_keyed_and_reproducible() {
        let a: Vec<f64> = draw_cn(&mut component_rng(7, 1, 2, 3), 8, 1.0)
            .iter()
            .map(|c| c.re)
            .collect();
        let b: Vec<f64> = draw_cn(&mut component_rng(7, 1, 2, 3), 8, 1.0)
            .iter()
            .map(|c| c.re)
            .collect();
        assert_eq!(a, b);
        for key in [(8, 1, 2, 3), (7, 2, 2, 3), (7, 1, 3, 3), (7, 1, 2, 4)] {
            let c: Vec<f64> = draw_cn(&mut component_rng(key.0, key.1, key.2, key.3), 8, 1.0)
                .iter()
                .map(|c| c.re)
                .collect();
            assert_ne!(a, c, "stream for {key:?} collides with the base key");
        }
    }

    // -- 3. scenario configuration --------------------------------------------

    fn tiny_array() -> ArrayConfig {
        ArrayConfig {
            geometry: ArrayGeometry {
                n_rings: 1,
                elems_per_ring: 6,
                radius_m: 0.025,
                ring_spacing_m: 0.02,
            },
            m_az: 17,
            m_el: 9,
            grid_az: 32,
            grid_el: 16,
            ..ArrayConfig::default()
        }
    }

    fn tiny_scenario() -> ScenarioConfig {
        ScenarioConfig {
            version: 1,
            master_seed: 42,
            n_ports: 1,
            n_subcarriers: 120,
            subcarrier_spacing_hz: 15e3,
            cp_type: CpType::Normal,
            noise_sigma2: 0.0,
            edge_taper: None,
            rx: ReceiverConfig {
                array: tiny_array(),
                n_snapshots: 1,
                snapshot_period_s: 75e-3,
                start_position_m: [0.0; 3],
                speed_mps: 0.0,
                heading: Vec::new(),
            },
            bs: vec![BsConfig {
                cell_id: 376,
                position_m: [200.0, 0.0, 20.0],
                tx_pol: default_tx_pol(),
                paths: vec![PathSpec::Fixed {
                    delay_s: 0.0,
                    azimuth_rad: 0.4,
                    elevation_rad: 0.2,
                    weights: PolWeights::hh_only(1.0, 0.0),
                }],
                dmc: None,
                rng_stream: None,
            }],
        }
    }

    #[test]
    fn scenario_round_trips_through_json_and_rejects_unknown_fields() {
        let sc = tiny_scenario();
        let js = serde_json::to_string(&sc).unwrap();
        let back: ScenarioConfig = serde_json::from_str(&js).unwrap();
        assert_eq!(back.bs[0].cell_id, 376);
        assert_eq!(back.n_subcarriers, 120);

        let bad = js.replace("\"master_seed\":42", "\"master_seed\":42,\"mystery\":1");
        assert!(serde_json::from_str::<ScenarioConfig>(&bad).is_err());
    }

    #[test]
    fn scenario_validation_catches_bad_values() {
        let mut sc = tiny_scenario();
        sc.noise_sigma2 = -1.0;
        assert!(sc.validate().is_err());

        let mut sc = tiny_scenario();
        sc.bs.clear();
        assert!(sc.validate().is_err());

        let mut sc = tiny_scenario();
        sc.bs[0].paths = vec![PathSpec::Fixed {
            delay_s: 1e-6,
            azimuth_rad: 0.0,
            elevation_rad: 4.0,
            weights: PolWeights::default(),
        }];
        assert!(sc.validate().is_err(), "elevation outside [0, pi] must be rejected");

        let mut sc = tiny_scenario();
        sc.rx.heading = vec![
            HeadingLeg { from_snapshot: 3, heading_rad: 0.0 },
            HeadingLeg { from_snapshot: 3, heading_rad: 1.0 },
        ];
        assert!(sc.validate().is_err(), "non-increasing heading legs must be rejected");
    }

    // -- 4. resource-element layout -------------------------------------------

    fn layout_for_cells(cells: &[u16], n_ports: u8, n_sc: usize) -> ReLayout {
        let mut sc = tiny_scenario();
        sc.n_ports = n_ports;
        sc.n_subcarriers = n_sc;
        sc.bs = cells
            .iter()
            .map(|&cell_id| BsConfig {
                cell_id,
                position_m: [200.0, 0.0, 20.0],
                tx_pol: default_tx_pol(),
                paths: Vec::new(),
                dmc: None,
                rng_stream: None,
            })
            .collect();
        ReLayout::build(&sc).unwrap()
    }

    #[test]
    fn congruent_cells_collide_on_every_pilot() {
        // 376 % 6 == 178 % 6 == 4: identical combs, union equals either comb,
        // and both cells map to the same positions.
        let layout = layout_for_cells(&[376, 178], 1, 120);
        assert_eq!(layout.re_counts[0], 2 * 120 / 6);
        for slot in 0..layout.n_slots {
            let a = &layout.per_bs[0][0][slot];
            let b = &layout.per_bs[1][0][slot];
            assert_eq!(a.positions, b.positions);
            assert_eq!(a.positions, (0..layout.re_counts[0]).collect::<Vec<_>>());
            assert_ne!(a.values, b.values, "different cells scramble differently");
        }
    }

    #[test]
    fn offset_cells_are_disjoint() {
        let layout = layout_for_cells(&[0, 1], 1, 120);
        assert_eq!(layout.re_counts[0], 2 * (2 * 120 / 6));
        for slot in 0..layout.n_slots {
            let a = &layout.per_bs[0][0][slot];
            let b = &layout.per_bs[1][0][slot];
            let sa: BTreeSet<_> = a.positions.iter().collect();
            let sb: BTreeSet<_> = b.positions.iter().collect();
            assert!(sa.is_disjoint(&sb));
        }
    }

    proptest! {
        #[test]
        fn union_blocks_are_sorted_and_slot_invariant(
            cell_a in 0u16..504,
            cell_b in 0u16..504,
            ports in prop::sample::select(vec![1u8, 2, 4]),
        ) {
            let layout = layout_for_cells(&[cell_a, cell_b], ports, 48);
            for port in 0..layout.n_ports {
                for slot in 0..layout.n_slots {
                    let res = &layout.union_res[port][slot];
                    prop_assert_eq!(res.len(), layout.re_counts[port]);
                    for w in res.windows(2) {
                        // sorted by subcarrier, then symbol
                        prop_assert!(w[0].1 < w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
                    }
                }
            }
        }
    }

    // -- 5. trajectory ---------------------------------------------------------

    #[test]
    fn trajectory_integrates_heading_schedule() {
        let rx = ReceiverConfig {
            n_snapshots: 4,
            snapshot_period_s: 1.0,
            speed_mps: 2.0,
            heading: vec![HeadingLeg {
                from_snapshot: 2,
                heading_rad: std::f64::consts::FRAC_PI_2,
            }],
            ..ReceiverConfig::default()
        };
        let states = rx_states(&rx);
        assert_eq!(states[0].0, [0.0, 0.0, 0.0]);
        assert_eq!(states[1].0, [2.0, 0.0, 0.0]);
        assert_eq!(states[2].0, [4.0, 0.0, 0.0]);
        // snapshot 2 onwards heads +y
        assert!((states[3].0[0] - 4.0).abs() < 1e-12);
        assert!((states[3].0[1] - 2.0).abs() < 1e-12);
        assert_eq!(states[1].1, 0.0);
        assert!((states[2].1 - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    }

    // -- 6. synthesis ----------------------------------------------------------

    #[test]
    fn flat_channel_reproduces_pilots_up_to_antenna_gain() {
        // Zero delay, no noise, no diffuse power: each antenna observes its
        // (constant) complex gain times the pilot values, so the derotated
        // block is constant across the comb.
        let set = synthesize(&tiny_scenario()).unwrap();
        assert_eq!(set.n_snapshots(), 1);
        let m = set.m_antennas();
        for ant in 0..m {
            let slot = set.layout.slot_of_antenna(ant);
            let map = &set.layout.per_bs[0][0][slot];
            let block = set.block(0, ant, 0);
            let first = block[map.positions[0]] / map.values[0];
            assert!(first.norm() > 1e-6, "antenna {ant} response vanished");
            for (k, &pos) in map.positions.iter().enumerate() {
                let ratio = block[pos] / map.values[k];
                assert!(
                    (ratio - first).norm() < 1e-10,
                    "antenna {ant} entry {k}: {ratio} vs {first}"
                );
            }
        }
    }

    #[test]
    fn synthesis_is_deterministic_and_seed_sensitive() {
        let mut sc = tiny_scenario();
        sc.noise_sigma2 = 0.5;
        sc.bs[0].dmc = Some(DmcSpec { alpha1: 0.2, beta_d: 0.3, tau_d: 0.1 });
        let a = synthesize(&sc).unwrap();
        let b = synthesize(&sc).unwrap();
        assert_eq!(a.data, b.data, "same scenario must synthesise identical samples");

        sc.master_seed += 1;
        let c = synthesize(&sc).unwrap();
        assert_ne!(a.data, c.data, "a different master seed must change the draws");
    }

    #[test]
    fn congruent_cells_superpose_additively() {
        // Cells 376 and 178 share one comb. With pinned seed streams, the
        // two-cell observation equals the sum of the single-cell runs (noise
        // drawn once, keyed independently of the cell set).
        let mut both = tiny_scenario();
        both.noise_sigma2 = 0.3;
        both.bs = vec![
            BsConfig {
                cell_id: 376,
                rng_stream: Some(11),
                dmc: Some(DmcSpec { alpha1: 0.4, beta_d: 0.2, tau_d: 0.05 }),
                ..both.bs[0].clone()
            },
            BsConfig {
                cell_id: 178,
                rng_stream: Some(12),
                paths: vec![PathSpec::Fixed {
                    delay_s: 2e-6,
                    azimuth_rad: -1.0,
                    elevation_rad: 0.5,
                    weights: PolWeights::hh_only(0.0, 0.7),
                }],
                ..both.bs[0].clone()
            },
        ];
        let y_both = synthesize(&both).unwrap();

        let mut only_a = both.clone();
        only_a.bs = vec![both.bs[0].clone()];
        let y_a = synthesize(&only_a).unwrap(); // carries the shared noise

        let mut only_b = both.clone();
        only_b.noise_sigma2 = 0.0;
        only_b.bs = vec![both.bs[1].clone()];
        let y_b = synthesize(&only_b).unwrap();

        let scale: f64 = y_both.data[0].iter().map(|v| v.norm()).sum();
        let err: f64 = y_both.data[0]
            .iter()
            .zip(y_a.data[0].iter().zip(y_b.data[0].iter()))
            .map(|(y, (a, b))| (y - (a + b)).norm())
            .sum();
        assert!(err / scale < 1e-12, "superposition violated: {err} vs scale {scale}");
    }

    #[test]
    fn noise_matches_configured_variance() {
        let mut sc = tiny_scenario();
        sc.bs[0].paths.clear();
        sc.noise_sigma2 = 0.7;
        sc.n_subcarriers = 1200;
        sc.rx.n_snapshots = 2;
        let set = synthesize(&sc).unwrap();
        let n: usize = set.data.iter().map(|s| s.len()).sum();
        let power: f64 = set.data.iter().flatten().map(|v| v.norm_sqr()).sum::<f64>() / n as f64;
        assert!(
            (power - 0.7).abs() / 0.7 < 0.05,
            "noise power {power} vs configured 0.7 over {n} draws"
        );
    }

    #[test]
    fn diffuse_power_matches_alpha() {
        let mut sc = tiny_scenario();
        sc.bs[0].paths.clear();
        sc.bs[0].dmc = Some(DmcSpec { alpha1: 1.3, beta_d: 0.25, tau_d: 0.1 });
        sc.n_subcarriers = 1200;
        sc.rx.n_snapshots = 2;
        let set = synthesize(&sc).unwrap();
        let n: usize = set.data.iter().map(|s| s.len()).sum();
        let power: f64 = set.data.iter().flatten().map(|v| v.norm_sqr()).sum::<f64>() / n as f64;
        assert!(
            (power - 1.3).abs() / 1.3 < 0.1,
            "diffuse power {power} vs alpha1 1.3 over {n} draws"
        );
    }

    #[test]
    fn receding_transmitter_has_increasing_delay_truth() {
        let mut sc = tiny_scenario();
        sc.rx.n_snapshots = 5;
        sc.rx.speed_mps = 10.0;
        sc.rx.heading = Vec::new(); // forward along +x
        sc.bs[0].position_m = [-100.0, 0.0, 10.0];
        sc.bs[0].paths = vec![PathSpec::Direct {
            weights: PolWeights::hh_only(1.0, 0.0),
            reference_distance_m: 100.0,
            carrier_phase: true,
        }];
        let set = synthesize(&sc).unwrap();
        let truth = set.truth.unwrap();
        let delays: Vec<f64> = truth
            .snapshots
            .iter()
            .map(|s| s.bs[0].paths[0].delay_s)
            .collect();
        for w in delays.windows(2) {
            assert!(w[1] > w[0], "delay not increasing: {delays:?}");
        }
        // arrival from behind: azimuth near pi in the array frame
        let az = truth.snapshots[0].bs[0].paths[0].azimuth_rad;
        assert!(az.abs() > std::f64::consts::FRAC_PI_2, "azimuth {az} should point backwards");
    }

    #[test]
    fn below_horizon_sources_are_rejected() {
        let mut sc = tiny_scenario();
        sc.rx.start_position_m = [0.0, 0.0, 50.0];
        sc.bs[0].position_m = [100.0, 0.0, 0.0];
        sc.bs[0].paths = vec![PathSpec::Direct {
            weights: PolWeights::hh_only(1.0, 0.0),
            reference_distance_m: 100.0,
            carrier_phase: false,
        }];
        assert!(synthesize(&sc).is_err());
    }

    #[test]
    fn container_round_trips_through_directory() {
        let mut sc = tiny_scenario();
        sc.noise_sigma2 = 0.2;
        sc.rx.n_snapshots = 2;
        let set = synthesize(&sc).unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.write_dir(dir.path()).unwrap();
        let back = SnapshotSet::read_dir(dir.path()).unwrap();
        assert_eq!(back.n_snapshots(), 2);
        assert_eq!(back.m_antennas(), set.m_antennas());
        assert_eq!(back.layout.re_counts, set.layout.re_counts);
        assert_eq!(back.scenario.bs[0].cell_id, 376);
        let worst = set.data[1]
            .iter()
            .zip(back.data[1].iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-5, "storage round-trip error {worst}");
        let t = back.truth.expect("truth must round-trip");
        assert_eq!(t.snapshots.len(), 2);
        assert!((t.noise_sigma2 - 0.2).abs() < 1e-12);
    }

    #[test]
    fn corrupted_container_is_rejected() {
        let sc = tiny_scenario();
        let set = synthesize(&sc).unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.write_dir(dir.path()).unwrap();
        // truncate the samples
        let y = dir.path().join("y.bin");
        let bytes = std::fs::read(&y).unwrap();
        std::fs::write(&y, &bytes[..bytes.len() - 4]).unwrap();
        assert!(SnapshotSet::read_dir(dir.path()).is_err());
    }

    #[test]
    fn forward_response_matches_port_gains() {
        // Single path: every antenna's flat-channel value equals its
        // polarimetric port gain times the weight.
        let sc = tiny_scenario();
        let mfs = build_port_manifolds(&sc).unwrap();
        let sp = StructuralParams::new(vec![0.0], vec![0.4], vec![0.2]).unwrap();
        let s = sp_matrix(&mfs[0], &sp, &[C64::new(1.0, 0.0)], &[C64::new(0.0, 0.0)], 0.0).unwrap();
        let (h, _) = mfs[0].port_response(0.4, 0.2, 0.0);
        for ant in 0..mfs[0].m_antennas() {
            assert!((s[(ant, 0)] - h[ant]).norm() < 1e-12);
            assert!((s[(ant, mfs[0].n_f() - 1)] - h[ant]).norm() < 1e-12);
        }
    }
}
