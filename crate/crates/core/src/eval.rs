//! Scoring harness for path estimates: gated one-to-one assignment against
//! ground truth, error statistics with confidence-bound ratios, and
//! trajectory sweep tables.
//!
//! The matcher treats a path as a point `(delay, azimuth, elevation)` and
//! finds the minimum-cost one-to-one assignment between estimates and truth
//! under a normalized weighted distance: delay is measured in resolution
//! bins, angles in degrees, each divided by its gate. Pairs outside any gate
//! are inadmissible, so surplus estimates become false alarms and unexplained
//! truth paths become misses rather than being force-matched.
//!
//! Downstream of the assignment, [`error_stats`] reduces the matched pairs
//! to per-parameter RMSE and bias, and [`crlb_compare`] relates RMSE to the
//! estimator's own reported standard deviations (an efficient estimator in
//! the asymptotic regime sits near ratio one). [`trajectory_sweep`] flattens
//! an estimation run into per-snapshot rows next to the line-of-sight truth
//! track, ready for plotting delay/azimuth against snapshot index.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rimax::PathRecord;
use crate::synth::Truth;

// ---------------------------------------------------------------------------
// Gates and observations
// ---------------------------------------------------------------------------

/// Admissibility gates of the matcher. A candidate pair is admissible only
/// if all three errors fall inside their gate; the gates also normalize the
/// assignment cost, so at the gate edge each term contributes one.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchGates {
    /// Delay gate in resolution bins (the bin width itself is a separate
    /// argument of [`match_paths`], because it depends on the capture).
    pub delay_bins: f64,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
}

impl Default for MatchGates {
    fn default() -> Self {
        MatchGates { delay_bins: 2.0, azimuth_deg: 5.0, elevation_deg: 5.0 }
    }
}

impl MatchGates {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("delay_bins", self.delay_bins),
            ("azimuth_deg", self.azimuth_deg),
            ("elevation_deg", self.elevation_deg),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "match gate {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// A path reduced to the three structural parameters the matcher scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PathObs {
    pub delay_s: f64,
    pub azimuth_rad: f64,
    pub elevation_rad: f64,
}

impl PathObs {
    pub fn new(delay_s: f64, azimuth_rad: f64, elevation_rad: f64) -> Self {
        PathObs { delay_s, azimuth_rad, elevation_rad }
    }

    /// View of an estimator record (which stores angles in degrees).
    pub fn from_record(r: &PathRecord) -> Self {
        PathObs {
            delay_s: r.tau_s,
            azimuth_rad: r.phi_deg.to_radians(),
            elevation_rad: r.theta_deg.to_radians(),
        }
    }
}

/// Per-parameter triple used for RMSE, bias and bound summaries. Delay is in
/// seconds; both angles are in radians.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStats {
    pub delay_s: f64,
    pub azimuth_rad: f64,
    pub elevation_rad: f64,
}

impl ParamStats {
    /// Estimator-reported standard deviations of one record, converted from
    /// the record's degree columns.
    pub fn from_record_stds(r: &PathRecord) -> Self {
        ParamStats {
            delay_s: r.crlb_tau_s,
            azimuth_rad: r.crlb_phi_deg.to_radians(),
            elevation_rad: r.crlb_theta_deg.to_radians(),
        }
    }
}

/// Wrap an angle difference onto `[-pi, pi)`.
fn wrap_angle(x: f64) -> f64 {
    let w = (x + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI && x > 0.0 { PI } else { w }
}

// ---------------------------------------------------------------------------
// Assignment
// ---------------------------------------------------------------------------

/// Cost of an inadmissible pairing; large enough that the solver always
/// prefers leaving both sides unmatched.
const INADMISSIBLE: f64 = 1e9;

/// Cost of leaving one path unmatched. Any admissible pair costs at most
/// three (three normalized squares of at most one each), and matching beats
/// unmatching both sides as long as the pair cost stays below twice this.
const UNMATCHED: f64 = 4.0;

/// One estimate/truth pairing. Errors are signed, estimate minus truth, with
/// the azimuth error wrapped onto a half-open circle.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MatchedPair {
    pub est: usize,
    pub truth: usize,
    /// Normalized squared distance under the gates, in `[0, 3]`.
    pub cost: f64,
    pub delay_err_s: f64,
    pub azimuth_err_rad: f64,
    pub elevation_err_rad: f64,
}

/// Result of the gated assignment.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Assignment {
    /// Matched pairs, sorted by estimate index.
    pub pairs: Vec<MatchedPair>,
    /// Truth indices no estimate explains.
    pub misses: Vec<usize>,
    /// Estimate indices matching no truth path.
    pub false_alarms: Vec<usize>,
    /// Total normalized cost over the matched pairs.
    pub total_cost: f64,
}

/// Signed errors and the normalized cost of one candidate pairing, or `None`
/// when any component violates its gate.
fn pair_cost(
    e: &PathObs,
    t: &PathObs,
    gates: &MatchGates,
    delay_bin_s: f64,
) -> Option<(f64, [f64; 3])> {
    let d_tau = e.delay_s - t.delay_s;
    let d_az = wrap_angle(e.azimuth_rad - t.azimuth_rad);
    let d_el = e.elevation_rad - t.elevation_rad;
    let n_tau = d_tau / (gates.delay_bins * delay_bin_s);
    let n_az = d_az.to_degrees() / gates.azimuth_deg;
    let n_el = d_el.to_degrees() / gates.elevation_deg;
    if n_tau.abs() <= 1.0 && n_az.abs() <= 1.0 && n_el.abs() <= 1.0 {
        Some((n_tau * n_tau + n_az * n_az + n_el * n_el, [d_tau, d_az, d_el]))
    } else {
        None
    }
}

/// Minimum-cost perfect assignment on a square matrix (Hungarian method with
/// potentials, `O(n^3)`). Returns the column of each row.
fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // One-based arrays with a virtual column 0, the standard formulation.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=n {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Match estimated paths to truth paths one-to-one, minimizing the summed
/// normalized distance while honoring the gates. `delay_bin_s` is the delay
/// resolution of the capture (typically the reciprocal of the spanned
/// bandwidth), which scales the delay gate into seconds.
///
/// The square problem pads both sides with per-path "unmatched" slots so the
/// optimum trades a weak pairing against a miss plus a false alarm; with the
/// costs above, any admissible pairing wins that trade.
pub fn match_paths(
    est: &[PathObs],
    truth: &[PathObs],
    gates: &MatchGates,
    delay_bin_s: f64,
) -> Result<Assignment> {
    gates.validate()?;
    if !(delay_bin_s > 0.0 && delay_bin_s.is_finite()) {
        return Err(Error::config(format!(
            "delay bin width must be positive and finite, got {delay_bin_s}"
        )));
    }
    for (side, list) in [("estimated", est), ("truth", truth)] {
        for (i, p) in list.iter().enumerate() {
            if !(p.delay_s.is_finite() && p.azimuth_rad.is_finite() && p.elevation_rad.is_finite())
            {
                return Err(Error::numerical(format!(
                    "{side} path {i} has a non-finite parameter"
                )));
            }
        }
    }

    let ne = est.len();
    let nt = truth.len();
    let n = ne + nt;
    if n == 0 {
        return Ok(Assignment::default());
    }

    // Rows: estimates then truth-side dummies; columns: truths then
    // estimate-side dummies. Each real path has exactly one unmatched slot.
    let mut cost = vec![vec![INADMISSIBLE; n]; n];
    let mut errs = vec![vec![[0.0f64; 3]; nt]; ne];
    for (i, e) in est.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            if let Some((c, err)) = pair_cost(e, t, gates, delay_bin_s) {
                cost[i][j] = c;
                errs[i][j] = err;
            }
        }
        cost[i][nt + i] = UNMATCHED;
    }
    for j in 0..nt {
        cost[ne + j][j] = UNMATCHED;
    }
    for i in 0..nt {
        for j in 0..ne {
            cost[ne + i][nt + j] = 0.0;
        }
    }

    let row_to_col = min_cost_assignment(&cost);

    let mut pairs = Vec::new();
    let mut matched_truth = vec![false; nt];
    let mut false_alarms = Vec::new();
    let mut total_cost = 0.0;
    for (i, &j) in row_to_col.iter().enumerate().take(ne) {
        if j < nt && cost[i][j] < INADMISSIBLE {
            let err = errs[i][j];
            pairs.push(MatchedPair {
                est: i,
                truth: j,
                cost: cost[i][j],
                delay_err_s: err[0],
                azimuth_err_rad: err[1],
                elevation_err_rad: err[2],
            });
            matched_truth[j] = true;
            total_cost += cost[i][j];
        } else {
            false_alarms.push(i);
        }
    }
    let misses = (0..nt).filter(|&j| !matched_truth[j]).collect();
    Ok(Assignment { pairs, misses, false_alarms, total_cost })
}

// ---------------------------------------------------------------------------
// Error statistics
// ---------------------------------------------------------------------------

/// Per-parameter RMSE and signed mean error over the matched pairs. Empty
/// input yields zeros; check the pair count before trusting them.
pub fn error_stats(pairs: &[MatchedPair]) -> (ParamStats, ParamStats) {
    if pairs.is_empty() {
        return (ParamStats::default(), ParamStats::default());
    }
    let n = pairs.len() as f64;
    let mut sq = [0.0f64; 3];
    let mut mean = [0.0f64; 3];
    for p in pairs {
        let e = [p.delay_err_s, p.azimuth_err_rad, p.elevation_err_rad];
        for k in 0..3 {
            sq[k] += e[k] * e[k];
            mean[k] += e[k];
        }
    }
    let rmse = ParamStats {
        delay_s: (sq[0] / n).sqrt(),
        azimuth_rad: (sq[1] / n).sqrt(),
        elevation_rad: (sq[2] / n).sqrt(),
    };
    let bias = ParamStats {
        delay_s: mean[0] / n,
        azimuth_rad: mean[1] / n,
        elevation_rad: mean[2] / n,
    };
    (rmse, bias)
}

/// Root-mean-square of per-path standard deviations: the aggregate bound an
/// ensemble RMSE is compared against. `None` when the list is empty.
pub fn bound_rms(stds: &[ParamStats]) -> Option<ParamStats> {
    if stds.is_empty() {
        return None;
    }
    let n = stds.len() as f64;
    let mut sq = [0.0f64; 3];
    for s in stds {
        sq[0] += s.delay_s * s.delay_s;
        sq[1] += s.azimuth_rad * s.azimuth_rad;
        sq[2] += s.elevation_rad * s.elevation_rad;
    }
    Some(ParamStats {
        delay_s: (sq[0] / n).sqrt(),
        azimuth_rad: (sq[1] / n).sqrt(),
        elevation_rad: (sq[2] / n).sqrt(),
    })
}

/// RMSE-to-bound ratios. A ratio is `None` when its bound is unavailable
/// (no matched paths, or a degenerate information matrix reported the bound
/// as zero, infinite or not-a-number).
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct EfficiencyRatios {
    pub delay: Option<f64>,
    pub azimuth: Option<f64>,
    pub elevation: Option<f64>,
    /// True when any available ratio exceeds the caller's threshold.
    pub flagged: bool,
}

/// Relate achieved RMSE to the aggregate reported bound, flagging parameters
/// whose ratio exceeds `threshold` (estimators operating in their asymptotic
/// regime should sit near one).
pub fn crlb_compare(
    rmse: &ParamStats,
    bound: Option<&ParamStats>,
    threshold: f64,
) -> EfficiencyRatios {
    let ratio = |r: f64, b: f64| -> Option<f64> {
        if b.is_finite() && b > 0.0 {
            Some(r / b)
        } else {
            None
        }
    };
    let (delay, azimuth, elevation) = match bound {
        Some(b) => (
            ratio(rmse.delay_s, b.delay_s),
            ratio(rmse.azimuth_rad, b.azimuth_rad),
            ratio(rmse.elevation_rad, b.elevation_rad),
        ),
        None => (None, None, None),
    };
    let flagged = [delay, azimuth, elevation]
        .iter()
        .any(|r| r.map(|v| v > threshold).unwrap_or(false));
    EfficiencyRatios { delay, azimuth, elevation, flagged }
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// One scoring pass over a set of estimates: assignment outcome, error
/// statistics, bound comparison, plus room for stage telemetry and metadata
/// the pipeline wants to carry along.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub matched: usize,
    pub missed: usize,
    pub false_alarms: usize,
    pub total_cost: f64,
    pub pairs: Vec<MatchedPair>,
    /// Per-parameter RMSE over matched pairs (zeros when nothing matched).
    pub rmse: ParamStats,
    /// Per-parameter signed mean error over matched pairs.
    pub bias: ParamStats,
    /// Aggregate reported bound over the matched estimates, when available.
    pub bound: Option<ParamStats>,
    pub efficiency: EfficiencyRatios,
    /// Final-sweep interference-cancellation residual per snapshot, when the
    /// pipeline ran that stage.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ic_nmse: Vec<f64>,
    /// Free-form provenance (config digest, seed, stage timings, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

/// Score one list of estimates against truth in a single call. `stds` are
/// the estimator-reported standard deviations, indexed like `est`; pass
/// `None` when the estimator could not provide them.
pub fn evaluate(
    est: &[PathObs],
    truth: &[PathObs],
    stds: Option<&[ParamStats]>,
    gates: &MatchGates,
    delay_bin_s: f64,
    efficiency_threshold: f64,
) -> Result<EvalReport> {
    if let Some(s) = stds {
        if s.len() != est.len() {
            return Err(Error::dims(format!(
                "{} bound triples for {} estimates",
                s.len(),
                est.len()
            )));
        }
    }
    let assignment = match_paths(est, truth, gates, delay_bin_s)?;
    let (rmse, bias) = error_stats(&assignment.pairs);
    let matched_stds: Vec<ParamStats> = match stds {
        Some(s) => assignment.pairs.iter().map(|p| s[p.est]).collect(),
        None => Vec::new(),
    };
    let bound = bound_rms(&matched_stds);
    let efficiency = crlb_compare(&rmse, bound.as_ref(), efficiency_threshold);
    Ok(EvalReport {
        matched: assignment.pairs.len(),
        missed: assignment.misses.len(),
        false_alarms: assignment.false_alarms.len(),
        total_cost: assignment.total_cost,
        pairs: assignment.pairs,
        rmse,
        bias,
        bound,
        efficiency,
        ic_nmse: Vec::new(),
        meta: BTreeMap::new(),
    })
}

pub fn write_report_json(report: &EvalReport, path: &Path) -> Result<()> {
    let s = serde_json::to_string_pretty(report)?;
    std::fs::write(path, s)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Trajectory sweep
// ---------------------------------------------------------------------------

/// One detected path at one snapshot, flattened for plotting, with the
/// line-of-sight truth track alongside when ground truth is available.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub snapshot: usize,
    pub cell_id: u16,
    pub path_id: usize,
    pub delay_s: f64,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub power_db: f64,
    /// Shortest truth-path delay of this cell at this snapshot.
    pub los_delay_s: Option<f64>,
    pub los_azimuth_deg: Option<f64>,
}

/// Flatten estimator records into sweep rows, one per detected path per
/// snapshot, annotated with the line-of-sight truth track (the minimum-delay
/// resolved path of the matching cell).
pub fn trajectory_sweep(records: &[PathRecord], truth: Option<&Truth>) -> Vec<SweepRow> {
    records
        .iter()
        .map(|r| {
            let los = truth
                .and_then(|t| t.snapshots.get(r.snapshot))
                .and_then(|snap| snap.bs.iter().find(|b| b.cell_id == r.cell_id))
                .and_then(|b| {
                    b.paths
                        .iter()
                        .min_by(|a, c| a.delay_s.total_cmp(&c.delay_s))
                });
            SweepRow {
                snapshot: r.snapshot,
                cell_id: r.cell_id,
                path_id: r.path_id,
                delay_s: r.tau_s,
                azimuth_deg: r.phi_deg,
                elevation_deg: r.theta_deg,
                power_db: r.power_db,
                los_delay_s: los.map(|p| p.delay_s),
                los_azimuth_deg: los.map(|p| p.azimuth_rad.to_degrees()),
            }
        })
        .collect()
}

/// Write sweep rows as CSV; the optional truth columns are left empty when
/// no ground truth accompanied the capture.
pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "snapshot,cell_id,path_id,delay_s,azimuth_deg,elevation_deg,power_db,\
         los_delay_s,los_azimuth_deg"
    )?;
    for r in rows {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            r.snapshot,
            r.cell_id,
            r.path_id,
            r.delay_s,
            r.azimuth_deg,
            r.elevation_deg,
            r.power_db,
            opt(r.los_delay_s),
            opt(r.los_azimuth_deg),
        )?;
    }
    f.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    use rand::rngs::SmallRng;
    use rand::{Rng, SeedableRng};

    use crate::rimax::{estimate_snapshot_set, RimaxConfig};
    use crate::synth::{
        synthesize, BsConfig, HeadingLeg, PathSpec, PolWeights, ReceiverConfig, ScenarioConfig,
    };
    use crate::crs::CpType;
    use crate::manifold::{ArrayConfig, ArrayGeometry};

    const BIN: f64 = 25e-9; // delay resolution used by the matcher tests

    fn obs(delay_ns: f64, az_deg: f64, el_deg: f64) -> PathObs {
        PathObs::new(delay_ns * 1e-9, az_deg.to_radians(), el_deg.to_radians())
    }

    // -- 1. gated matching ---------------------------------------------------

    #[test]
    fn identical_lists_match_exactly_with_zero_cost() {
        let truth = vec![obs(100.0, 10.0, 5.0), obs(400.0, -60.0, 12.0), obs(900.0, 170.0, 2.0)];
        let a = match_paths(&truth, &truth, &MatchGates::default(), BIN).unwrap();
        assert_eq!(a.pairs.len(), 3);
        assert!(a.misses.is_empty());
        assert!(a.false_alarms.is_empty());
        assert!(a.total_cost < 1e-12);
        for p in &a.pairs {
            assert_eq!(p.est, p.truth);
            assert!(p.delay_err_s.abs() < 1e-18);
        }
    }

    #[test]
    fn out_of_gate_estimate_becomes_a_false_alarm() {
        let truth = vec![obs(500.0, 0.0, 5.0)];
        // First estimate sits within all gates, second is ten bins away.
        let est = vec![obs(505.0, 1.0, 4.5), obs(750.0, 0.0, 5.0)];
        let a = match_paths(&est, &truth, &MatchGates::default(), BIN).unwrap();
        assert_eq!(a.pairs.len(), 1);
        assert_eq!(a.pairs[0].est, 0);
        assert_eq!(a.pairs[0].truth, 0);
        assert_eq!(a.false_alarms, vec![1]);
        assert!(a.misses.is_empty());
    }

    #[test]
    fn unexplained_truth_paths_count_as_misses() {
        let truth = vec![obs(100.0, 0.0, 5.0), obs(400.0, 40.0, 5.0), obs(800.0, -40.0, 5.0)];
        let est = vec![obs(402.0, 41.0, 5.2)];
        let a = match_paths(&est, &truth, &MatchGates::default(), BIN).unwrap();
        assert_eq!(a.pairs.len(), 1);
        assert_eq!(a.pairs[0].truth, 1);
        assert_eq!(a.misses, vec![0, 2]);
        assert!(a.false_alarms.is_empty());
    }

    #[test]
    fn azimuth_errors_wrap_across_the_circle_seam() {
        let truth = vec![obs(300.0, 179.0, 0.0)];
        let est = vec![obs(300.0, -179.0, 0.0)];
        let a = match_paths(&est, &truth, &MatchGates::default(), BIN).unwrap();
        assert_eq!(a.pairs.len(), 1, "a two-degree wrapped error must match");
        let err_deg = a.pairs[0].azimuth_err_rad.to_degrees();
        assert!((err_deg - 2.0).abs() < 1e-9, "wrapped error should be +2 deg, got {err_deg}");
    }

    #[test]
    fn matcher_prefers_the_cheaper_of_two_admissible_pairings() {
        // Both estimates are admissible against both truths; the optimum is
        // the crossing assignment (0->1, 1->0), not the identity.
        let truth = vec![obs(500.0, 0.0, 0.0), obs(520.0, 0.0, 0.0)];
        let est = vec![obs(519.0, 0.0, 0.0), obs(501.0, 0.0, 0.0)];
        let a = match_paths(&est, &truth, &MatchGates::default(), BIN).unwrap();
        assert_eq!(a.pairs.len(), 2);
        let as_map: Vec<(usize, usize)> = a.pairs.iter().map(|p| (p.est, p.truth)).collect();
        assert!(as_map.contains(&(0, 1)));
        assert!(as_map.contains(&(1, 0)));
    }

    #[test]
    fn empty_inputs_produce_an_empty_assignment() {
        let a = match_paths(&[], &[], &MatchGates::default(), BIN).unwrap();
        assert!(a.pairs.is_empty() && a.misses.is_empty() && a.false_alarms.is_empty());
        let t = vec![obs(100.0, 0.0, 0.0)];
        let a = match_paths(&[], &t, &MatchGates::default(), BIN).unwrap();
        assert_eq!(a.misses, vec![0]);
        let a = match_paths(&t, &[], &MatchGates::default(), BIN).unwrap();
        assert_eq!(a.false_alarms, vec![0]);
    }

    #[test]
    fn non_finite_parameters_are_rejected() {
        let bad = vec![PathObs::new(f64::NAN, 0.0, 0.0)];
        let good = vec![obs(100.0, 0.0, 0.0)];
        assert!(match_paths(&bad, &good, &MatchGates::default(), BIN).is_err());
        assert!(match_paths(&good, &good, &MatchGates::default(), 0.0).is_err());
        let gates = MatchGates { delay_bins: -1.0, ..MatchGates::default() };
        assert!(match_paths(&good, &good, &gates, BIN).is_err());
    }

    // -- 2. assignment optimality against brute force -------------------------

    /// Brute-force minimum over all row permutations of a square matrix.
    fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
        fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == cost.len() {
                if acc < *best {
                    *best = acc;
                }
                return;
            }
            if acc >= *best {
                return;
            }
            for j in 0..cost.len() {
                if !used[j] {
                    used[j] = true;
                    rec(cost, row + 1, used, acc + cost[row][j], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cost.len()], 0.0, &mut best);
        best
    }

    #[test]
    fn assignment_cost_equals_the_permutation_minimum_on_random_matrices() {
        let mut rng = SmallRng::seed_from_u64(0x5eed_a551);
        for _ in 0..30 {
            let n = 5;
            let cost: Vec<Vec<f64>> =
                (0..n).map(|_| (0..n).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
            let cols = min_cost_assignment(&cost);
            let total: f64 = cols.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            let best = brute_force_min(&cost);
            assert!(
                (total - best).abs() < 1e-9,
                "solver found {total}, permutation minimum is {best}"
            );
        }
    }

    #[test]
    fn gated_matching_agrees_with_brute_force_on_random_path_sets() {
        // Randomized five-by-five instances where roughly half the pairs are
        // admissible; the matcher's matched cost plus unmatched penalties
        // must equal the brute-force optimum of the padded square problem.
        let mut rng = SmallRng::seed_from_u64(0xbead_cafe);
        let gates = MatchGates::default();
        for _ in 0..20 {
            let truth: Vec<PathObs> = (0..5)
                .map(|_| {
                    obs(
                        rng.random_range(0.0..400.0),
                        rng.random_range(-170.0..170.0),
                        rng.random_range(0.0..40.0),
                    )
                })
                .collect();
            let est: Vec<PathObs> = truth
                .iter()
                .map(|t| {
                    PathObs::new(
                        t.delay_s + rng.random_range(-3.0..3.0) * BIN,
                        t.azimuth_rad + rng.random_range(-8.0f64..8.0).to_radians(),
                        t.elevation_rad + rng.random_range(-8.0f64..8.0).to_radians(),
                    )
                })
                .collect();
            let a = match_paths(&est, &truth, &gates, BIN).unwrap();

            // Rebuild the padded matrix and brute-force it.
            let (ne, nt) = (est.len(), truth.len());
            let n = ne + nt;
            let mut cost = vec![vec![INADMISSIBLE; n]; n];
            for (i, e) in est.iter().enumerate() {
                for (j, t) in truth.iter().enumerate() {
                    if let Some((c, _)) = pair_cost(e, t, &gates, BIN) {
                        cost[i][j] = c;
                    }
                }
                cost[i][nt + i] = UNMATCHED;
            }
            for j in 0..nt {
                cost[ne + j][j] = UNMATCHED;
            }
            for i in 0..nt {
                for j in 0..ne {
                    cost[ne + i][nt + j] = 0.0;
                }
            }
            let best = brute_force_min(&cost);
            let got = a.total_cost
                + UNMATCHED * (a.misses.len() + a.false_alarms.len()) as f64;
            assert!(
                (got - best).abs() < 1e-9,
                "matcher total {got} differs from brute-force optimum {best}"
            );
        }
    }

    // -- 3. error statistics and bound ratios ---------------------------------

    #[test]
    fn rmse_and_bias_match_hand_computed_values() {
        let pairs = vec![
            MatchedPair {
                est: 0,
                truth: 0,
                cost: 0.0,
                delay_err_s: 1e-9,
                azimuth_err_rad: 0.02,
                elevation_err_rad: -0.01,
            },
            MatchedPair {
                est: 1,
                truth: 1,
                cost: 0.0,
                delay_err_s: -2e-9,
                azimuth_err_rad: 0.04,
                elevation_err_rad: 0.03,
            },
        ];
        let (rmse, bias) = error_stats(&pairs);
        assert!((rmse.delay_s - (2.5e-18f64).sqrt()).abs() < 1e-24);
        assert!((rmse.azimuth_rad - (0.001f64).sqrt()).abs() < 1e-12);
        assert!((rmse.elevation_rad - (0.0005f64).sqrt()).abs() < 1e-12);
        assert!((bias.delay_s + 0.5e-9).abs() < 1e-24);
        assert!((bias.azimuth_rad - 0.03).abs() < 1e-12);
        assert!((bias.elevation_rad - 0.01).abs() < 1e-12);
    }

    #[test]
    fn bound_rms_aggregates_per_path_deviations() {
        let stds = vec![
            ParamStats { delay_s: 3e-9, azimuth_rad: 0.01, elevation_rad: 0.02 },
            ParamStats { delay_s: 4e-9, azimuth_rad: 0.01, elevation_rad: 0.02 },
        ];
        let b = bound_rms(&stds).unwrap();
        // sqrt((9 + 16)/2) ns = sqrt(12.5) ns
        assert!((b.delay_s - (12.5e-18f64).sqrt()).abs() < 1e-24);
        assert!((b.azimuth_rad - 0.01).abs() < 1e-15);
        assert!(bound_rms(&[]).is_none());
    }

    #[test]
    fn efficiency_ratios_flag_only_threshold_violations() {
        let rmse = ParamStats { delay_s: 2e-9, azimuth_rad: 0.02, elevation_rad: 0.001 };
        let bound = ParamStats { delay_s: 1e-9, azimuth_rad: 0.01, elevation_rad: 0.01 };
        let r = crlb_compare(&rmse, Some(&bound), 3.0);
        assert!((r.delay.unwrap() - 2.0).abs() < 1e-12);
        assert!((r.azimuth.unwrap() - 2.0).abs() < 1e-12);
        assert!((r.elevation.unwrap() - 0.1).abs() < 1e-12);
        assert!(!r.flagged);
        let r = crlb_compare(&rmse, Some(&bound), 1.5);
        assert!(r.flagged);
    }

    #[test]
    fn degenerate_bounds_are_reported_as_unavailable() {
        let rmse = ParamStats { delay_s: 1e-9, azimuth_rad: 0.01, elevation_rad: 0.01 };
        let bound =
            ParamStats { delay_s: f64::INFINITY, azimuth_rad: 0.0, elevation_rad: f64::NAN };
        let r = crlb_compare(&rmse, Some(&bound), 3.0);
        assert!(r.delay.is_none() && r.azimuth.is_none() && r.elevation.is_none());
        assert!(!r.flagged, "unavailable ratios must not trip the flag");
        let r = crlb_compare(&rmse, None, 3.0);
        assert!(r.delay.is_none());
    }

    // -- 4. end-to-end report -------------------------------------------------

    #[test]
    fn evaluate_assembles_counts_stats_and_ratios() {
        let truth = vec![obs(100.0, 10.0, 5.0), obs(400.0, -60.0, 12.0)];
        let est = vec![obs(101.0, 10.5, 5.1), obs(900.0, 0.0, 0.0)];
        let stds = vec![
            ParamStats { delay_s: 1e-9, azimuth_rad: 0.01, elevation_rad: 0.01 },
            ParamStats { delay_s: 1e-9, azimuth_rad: 0.01, elevation_rad: 0.01 },
        ];
        let report =
            evaluate(&est, &truth, Some(&stds), &MatchGates::default(), BIN, 3.0).unwrap();
        assert_eq!(report.matched, 1);
        assert_eq!(report.missed, 1);
        assert_eq!(report.false_alarms, 1);
        assert!((report.rmse.delay_s - 1e-9).abs() < 1e-22);
        let b = report.bound.expect("bound should aggregate the matched estimate");
        assert!((b.delay_s - 1e-9).abs() < 1e-22);
        assert!((report.efficiency.delay.unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn evaluate_rejects_mismatched_bound_lists() {
        let truth = vec![obs(100.0, 0.0, 0.0)];
        let est = vec![obs(100.0, 0.0, 0.0)];
        let stds = vec![ParamStats::default(), ParamStats::default()];
        assert!(evaluate(&est, &truth, Some(&stds), &MatchGates::default(), BIN, 3.0).is_err());
    }

    #[test]
    fn report_round_trips_through_json() {
        let truth = vec![obs(100.0, 10.0, 5.0)];
        let mut report =
            evaluate(&truth, &truth, None, &MatchGates::default(), BIN, 3.0).unwrap();
        report.ic_nmse = vec![0.5, 0.25];
        report.meta.insert("seed".into(), "7".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        write_report_json(&report, &path).unwrap();
        let back: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back.matched, 1);
        assert_eq!(back.ic_nmse, vec![0.5, 0.25]);
        assert_eq!(back.meta.get("seed").map(String::as_str), Some("7"));
    }

    // -- 5. trajectory sweeps -------------------------------------------------

    /// Small single-cell scene on a one-ring array: quick to synthesize and
    /// to estimate, yet exercises the full capture-to-records chain.
    fn sweep_scenario(
        bs_position: [f64; 3],
        speed_mps: f64,
        heading: Vec<HeadingLeg>,
        n_snapshots: usize,
    ) -> ScenarioConfig {
        ScenarioConfig {
            version: 1,
            master_seed: 0x7ea1,
            n_ports: 1,
            n_subcarriers: 120,
            subcarrier_spacing_hz: 15e3,
            cp_type: CpType::Normal,
            noise_sigma2: 0.0,
            edge_taper: None,
            rx: ReceiverConfig {
                array: ArrayConfig {
                    geometry: ArrayGeometry {
                        n_rings: 1,
                        elems_per_ring: 6,
                        radius_m: 0.025,
                        ring_spacing_m: 0.02,
                    },
                    f_c_hz: 2.66e9,
                    t0_s: 0.5e-3,
                    m_az: 17,
                    m_el: 9,
                    grid_az: 32,
                    grid_el: 16,
                    recon_tol: 5e-3,
                },
                n_snapshots,
                snapshot_period_s: 0.1,
                start_position_m: [0.0, 0.0, 0.0],
                speed_mps,
                heading,
            },
            bs: vec![BsConfig {
                cell_id: 211,
                position_m: bs_position,
                tx_pol: [[1.0, 0.0], [0.0, 0.0]],
                paths: vec![PathSpec::Direct {
                    weights: PolWeights::hh_only(1.0, 0.0),
                    reference_distance_m: 100.0,
                    carrier_phase: true,
                }],
                dmc: None,
                rng_stream: None,
            }],
        }
    }

    fn run_sweep(scenario: &ScenarioConfig) -> (Vec<SweepRow>, crate::rimax::EstimateRun) {
        let set = synthesize(scenario).unwrap();
        let cfg = RimaxConfig { max_paths: 2, max_alternations: 3, ..RimaxConfig::default() };
        let run = estimate_snapshot_set(&set, &cfg, None).unwrap();
        let rows = trajectory_sweep(&run.records, set.truth.as_ref());
        (rows, run)
    }

    /// Strongest detected path per snapshot, in snapshot order.
    fn dominant_rows(rows: &[SweepRow], n_snapshots: usize) -> Vec<SweepRow> {
        (0..n_snapshots)
            .map(|s| {
                rows.iter()
                    .filter(|r| r.snapshot == s)
                    .max_by(|a, b| a.power_db.total_cmp(&b.power_db))
                    .expect("each snapshot should detect at least one path")
                    .clone()
            })
            .collect()
    }

    #[test]
    fn static_receiver_produces_constant_tracks() {
        let scenario = sweep_scenario([200.0, 100.0, 25.0], 0.0, vec![], 3);
        let (rows, _) = run_sweep(&scenario);
        let dom = dominant_rows(&rows, 3);
        // Identical geometry at every snapshot: identical inputs, identical
        // estimates.
        for r in &dom[1..] {
            assert!((r.delay_s - dom[0].delay_s).abs() < 1e-15);
            assert!((r.azimuth_deg - dom[0].azimuth_deg).abs() < 1e-9);
            assert!((r.elevation_deg - dom[0].elevation_deg).abs() < 1e-9);
        }
        // Geometry sanity: 225 m range, azimuth atan2(100, 200).
        let true_delay = 225.0 / crate::C_LIGHT;
        assert!((dom[0].delay_s - true_delay).abs() < 0.2e-9);
        assert!((dom[0].azimuth_deg - 100f64.atan2(200.0).to_degrees()).abs() < 0.2);
        // Truth columns carry the same line of sight.
        for r in &dom {
            assert!((r.los_delay_s.unwrap() - true_delay).abs() < 1e-18);
        }
    }

    #[test]
    fn receding_line_of_sight_delay_increases_monotonically() {
        // The transmitter sits behind the receiver, which drives away along
        // +x at 10 m/s: range grows by roughly a metre per snapshot.
        let scenario = sweep_scenario([-300.0, 40.0, 25.0], 10.0, vec![], 4);
        let (rows, _) = run_sweep(&scenario);
        let dom = dominant_rows(&rows, 4);
        for w in dom.windows(2) {
            assert!(
                w[1].delay_s > w[0].delay_s,
                "estimated delay must recede: {} then {}",
                w[0].delay_s,
                w[1].delay_s
            );
            assert!(w[1].los_delay_s.unwrap() > w[0].los_delay_s.unwrap());
        }
        // Estimates track the truth columns closely in a noiseless scene.
        for r in &dom {
            assert!((r.delay_s - r.los_delay_s.unwrap()).abs() < 0.2e-9);
            let az_err = wrap_angle(
                (r.azimuth_deg - r.los_azimuth_deg.unwrap()).to_radians(),
            )
            .to_degrees();
            assert!(az_err.abs() < 0.2, "azimuth off truth by {az_err} deg");
        }
    }

    #[test]
    fn heading_turn_shifts_the_apparent_azimuth() {
        // Transmitter due north; the receiver pivots ninety degrees in place
        // between snapshots one and two, so the bearing seen by the array
        // swings from about +90 to about 0 degrees.
        let scenario = sweep_scenario(
            [0.0, 500.0, 30.0],
            0.0,
            vec![HeadingLeg { from_snapshot: 2, heading_rad: std::f64::consts::FRAC_PI_2 }],
            4,
        );
        let (rows, _) = run_sweep(&scenario);
        let dom = dominant_rows(&rows, 4);
        for r in &dom[..2] {
            assert!((r.azimuth_deg - 90.0).abs() < 0.5, "before the turn: {}", r.azimuth_deg);
        }
        for r in &dom[2..] {
            assert!(r.azimuth_deg.abs() < 0.5, "after the turn: {}", r.azimuth_deg);
        }
        let jump = dom[1].azimuth_deg - dom[2].azimuth_deg;
        assert!((jump - 90.0).abs() < 0.5, "turn should shift azimuth by 90 deg, got {jump}");
        // Delay is heading-invariant.
        for r in &dom[1..] {
            assert!((r.delay_s - dom[0].delay_s).abs() < 0.05e-9);
        }
    }

    #[test]
    fn sweep_rows_and_csv_are_deterministic() {
        let scenario = sweep_scenario([200.0, 100.0, 25.0], 0.0, vec![], 2);
        let (rows_a, run_a) = run_sweep(&scenario);
        let (rows_b, run_b) = run_sweep(&scenario);
        assert_eq!(
            serde_json::to_string(&rows_a).unwrap(),
            serde_json::to_string(&rows_b).unwrap(),
            "repeated runs must produce identical sweep rows"
        );
        assert_eq!(
            serde_json::to_string(&run_a.records).unwrap(),
            serde_json::to_string(&run_b.records).unwrap()
        );
        let dir = tempfile::tempdir().unwrap();
        let pa = dir.path().join("a.csv");
        let pb = dir.path().join("b.csv");
        write_sweep_csv(&rows_a, &pa).unwrap();
        write_sweep_csv(&rows_b, &pb).unwrap();
        let ca = std::fs::read(&pa).unwrap();
        assert_eq!(ca, std::fs::read(&pb).unwrap());
        let text = String::from_utf8(ca).unwrap();
        assert!(text.starts_with(
            "snapshot,cell_id,path_id,delay_s,azimuth_deg,elevation_deg,power_db,"
        ));
        assert_eq!(text.lines().count(), rows_a.len() + 1);
    }

    #[test]
    fn sweep_without_truth_leaves_los_columns_empty() {
        let scenario = sweep_scenario([200.0, 100.0, 25.0], 0.0, vec![], 1);
        let mut set = synthesize(&scenario).unwrap();
        set.truth = None;
        let cfg = RimaxConfig { max_paths: 1, max_alternations: 2, ..RimaxConfig::default() };
        let run = estimate_snapshot_set(&set, &cfg, Some(0.0)).unwrap();
        let rows = trajectory_sweep(&run.records, None);
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|r| r.los_delay_s.is_none()));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        write_sweep_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.lines().nth(1).unwrap();
        assert!(first.ends_with(",,"), "empty truth columns expected: {first}");
    }
}
