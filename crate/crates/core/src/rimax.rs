//! High-resolution multipath estimation on a single-cell switched-array
//! capture: velocity-extended RIMAX.
//!
//! One pilot port of one snapshot is an `M x N_f` matrix `Z`: `M` switched
//! antennas (each dwelling one slot, so antenna index doubles as a time
//! stamp) by `N_f` comb bins. The model is
//!
//! ```text
//! Z = sum_l (b_RH[:,l] gamma_H[l] + b_RV[:,l] gamma_V[l]) b_f[:,l]^T  +  X
//! ```
//!
//! with the polarimetric/doppler and delay factors from [`ArrayManifold`] and
//! `X` the sum of dense multipath (Toeplitz frequency covariance, independent
//! across antennas) and white measurement noise. Estimation alternates three
//! stages until the joint log-likelihood settles:
//!
//! 1. Gauss-Newton / Levenberg-Marquardt refinement of the structural
//!    parameters `(mu_tau, mu_phi, mu_theta)` per path with best-linear
//!    unbiased weight re-estimation,
//! 2. a Whittle fit of the diffuse parameters `(alpha1, beta_d, tau_d,
//!    sigma2)` to the averaged residual periodogram, and
//! 3. add/drop bookkeeping: grid scans of the correlation objective seed new
//!    paths, paths whose weight magnitude is not significant against its
//!    standard error are removed.
//!
//! Every path response is a Kronecker product `a ⊗ f` of an antenna factor
//! and a frequency factor, and the noise covariance is `I_M ⊗ (R_f +
//! sigma2 I)`. Whitening therefore only touches the frequency factor, inner
//! products split into two small dot products, and the score and Fisher
//! information are assembled from Gram matrices of the factor pools instead
//! of ever forming the `M N_f`-dimensional responses. The dense and the
//! factorized formulations agree to numerical precision; the dense one is
//! kept (for small problems) as [`jacobian`] and in the test oracles.

use std::f64::consts::PI;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{hermitian_eig_desc, solve_hermitian_damped};
use crate::manifold::{wrap_mu_tau, wrap_phi, ArrayManifold, StructuralParams};
use crate::synth::{build_port_manifolds, dmc_covariance, DmcSpec, SnapshotSet};
use crate::C64;

const TWO_PI: f64 = std::f64::consts::TAU;

// ---------------------------------------------------------------------------
// Diffuse + noise parameters
// ---------------------------------------------------------------------------

/// Dense-multipath and measurement-noise parameters of one observation:
/// exponential power-delay profile (total power `alpha1`, normalised decay
/// `beta_d`, onset `tau_d` as a fraction of the unambiguous range) plus white
/// noise of variance `sigma2` per resource element.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmcParams {
    pub alpha1: f64,
    pub beta_d: f64,
    pub tau_d: f64,
    pub sigma2: f64,
}

impl DmcParams {
    /// White measurement noise only, no diffuse component.
    pub fn white(sigma2: f64) -> Self {
        DmcParams { alpha1: 0.0, beta_d: 1.0, tau_d: 0.0, sigma2 }
    }

    /// The all-zero element returned for an exactly empty residual.
    pub fn zero() -> Self {
        DmcParams { alpha1: 0.0, beta_d: 1.0, tau_d: 0.0, sigma2: 0.0 }
    }

    pub fn is_white(&self) -> bool {
        self.alpha1 <= 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha1", self.alpha1),
            ("beta_d", self.beta_d),
            ("tau_d", self.tau_d),
            ("sigma2", self.sigma2),
        ] {
            if !v.is_finite() {
                return Err(Error::config(format!("dmc parameter {name} must be finite")));
            }
        }
        if self.alpha1 < 0.0 || self.sigma2 < 0.0 {
            return Err(Error::config("dmc powers must be non-negative"));
        }
        if self.alpha1 > 0.0 {
            if self.beta_d <= 0.0 {
                return Err(Error::config("dmc beta_d must be positive"));
            }
            if !(0.0..1.0).contains(&self.tau_d) {
                return Err(Error::config("dmc tau_d must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    fn spec(&self) -> DmcSpec {
        DmcSpec { alpha1: self.alpha1, beta_d: self.beta_d.max(1e-12), tau_d: self.tau_d }
    }
}

// ---------------------------------------------------------------------------
// Whitener
// ---------------------------------------------------------------------------

/// Square root of the inverse per-antenna covariance `R = R_f + sigma2 I`.
///
/// The full covariance of the flattened observation is `I_M ⊗ R`, so
/// whitening acts on the frequency axis of each antenna row independently.
/// A purely white model skips the eigendecomposition.
pub(crate) struct Whitener {
    sigma: f64,
    /// Eigenbasis of `R_f` and `1/sqrt(lambda_i + sigma2)`; `None` when the
    /// diffuse component is off and whitening is a scalar.
    eig: Option<(DMatrix<C64>, DVector<f64>)>,
    logdet: f64,
}

impl Whitener {
    pub fn new(d: &DmcParams, n_f: usize) -> Result<Self> {
        d.validate()?;
        if n_f == 0 {
            return Err(Error::dims("whitener needs at least one comb bin"));
        }
        if d.is_white() {
            if d.sigma2 <= 0.0 {
                return Err(Error::numerical(format!(
                    "noise covariance is not positive definite; smallest eigenvalue {:e}",
                    d.sigma2
                )));
            }
            return Ok(Whitener {
                sigma: d.sigma2.sqrt(),
                eig: None,
                logdet: n_f as f64 * d.sigma2.ln(),
            });
        }
        let r = dmc_covariance(&d.spec(), n_f);
        let (u, lam) = hermitian_eig_desc(&r)?;
        let smallest = lam[n_f - 1] + d.sigma2;
        if !(smallest > 0.0) || !smallest.is_finite() {
            return Err(Error::numerical(format!(
                "noise covariance is not positive definite; smallest eigenvalue {smallest:e}"
            )));
        }
        let mut logdet = 0.0;
        let inv_sqrt = DVector::from_fn(n_f, |i, _| {
            let v = lam[i] + d.sigma2;
            logdet += v.ln();
            1.0 / v.sqrt()
        });
        Ok(Whitener { sigma: d.sigma2.sqrt(), eig: Some((u, inv_sqrt)), logdet })
    }

    /// `ln det(R_f + sigma2 I)` of one antenna row.
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// `W x` for one frequency-axis vector.
    pub fn whiten_vec(&self, x: &DVector<C64>) -> DVector<C64> {
        match &self.eig {
            None => x / C64::new(self.sigma, 0.0),
            Some((u, s)) => {
                let mut t = u.adjoint() * x;
                for i in 0..t.len() {
                    t[i] *= s[i];
                }
                u * t
            }
        }
    }

    /// Whitens every antenna row of an `M x N_f` observation.
    pub fn whiten_rows(&self, z: &DMatrix<C64>) -> DMatrix<C64> {
        match &self.eig {
            None => z / C64::new(self.sigma, 0.0),
            Some((u, s)) => {
                // (W z_row^T)^T for all rows at once: Z conj(U) S U^T.
                let mut t = z * u.conjugate();
                for c in 0..t.ncols() {
                    let sc = s[c];
                    t.column_mut(c).iter_mut().for_each(|e| *e *= sc);
                }
                t * u.transpose()
            }
        }
    }

    /// `W B` for a matrix of frequency-axis columns.
    pub fn whiten_cols(&self, b: &DMatrix<C64>) -> DMatrix<C64> {
        match &self.eig {
            None => b / C64::new(self.sigma, 0.0),
            Some((u, s)) => {
                let mut t = u.adjoint() * b;
                for r in 0..t.nrows() {
                    let sr = s[r];
                    t.row_mut(r).iter_mut().for_each(|e| *e *= sr);
                }
                u * t
            }
        }
    }
}

/// Whitens a raw `M x N_f` observation under the given diffuse + noise
/// parameters; rows are antennas, columns comb bins.
pub fn whiten(z: &DMatrix<C64>, d: &DmcParams) -> Result<DMatrix<C64>> {
    Whitener::new(d, z.ncols()).map(|w| w.whiten_rows(z))
}

// ---------------------------------------------------------------------------
// Path sets
// ---------------------------------------------------------------------------

/// Structural parameters plus polarimetric weights of the current path set.
#[derive(Clone, Debug, Default)]
pub struct PathSet {
    pub sp: StructuralParams,
    pub gamma_h: Vec<C64>,
    pub gamma_v: Vec<C64>,
    /// Paths whose elevation hit the domain edge; their azimuth is frozen in
    /// subsequent refinement steps because it degenerates there.
    pub boundary: Vec<bool>,
}

impl PathSet {
    pub fn new(sp: StructuralParams, gamma_h: Vec<C64>, gamma_v: Vec<C64>) -> Result<Self> {
        sp.validate()?;
        if gamma_h.len() != sp.len() || gamma_v.len() != sp.len() {
            return Err(Error::dims("weight vectors differ in length from the path count"));
        }
        let boundary = vec![false; sp.len()];
        Ok(PathSet { sp, gamma_h, gamma_v, boundary })
    }

    pub fn len(&self) -> usize {
        self.sp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sp.is_empty()
    }

    /// Joint polarimetric power of one path.
    pub fn power(&self, l: usize) -> f64 {
        self.gamma_h[l].norm_sqr() + self.gamma_v[l].norm_sqr()
    }

    fn remove(&mut self, l: usize) {
        self.sp.mu_tau.remove(l);
        self.sp.mu_phi.remove(l);
        self.sp.mu_theta.remove(l);
        self.gamma_h.remove(l);
        self.gamma_v.remove(l);
        self.boundary.remove(l);
    }

    fn push(&mut self, mu_tau: f64, mu_phi: f64, mu_theta: f64) {
        self.sp.mu_tau.push(mu_tau);
        self.sp.mu_phi.push(mu_phi);
        self.sp.mu_theta.push(mu_theta);
        self.gamma_h.push(C64::new(0.0, 0.0));
        self.gamma_v.push(C64::new(0.0, 0.0));
        self.boundary.push(false);
    }
}

/// Noise-free specular contribution of a path set, `M x N_f`, in the
/// observation domain. This is the model the estimator fits.
pub fn model_signal(set: &PathSet, mf: &ArrayManifold, v: f64) -> Result<DMatrix<C64>> {
    if set.is_empty() {
        return Ok(DMatrix::zeros(mf.m_antennas(), mf.n_f()));
    }
    let basis = mf.polarimetric_basis(&set.sp, v)?;
    Ok(weighted_antenna_factor(&basis.b_rh, &basis.b_rv, &set.gamma_h, &set.gamma_v)
        * basis.b_f.transpose())
}

/// `A = B_RH diag(gamma_H) + B_RV diag(gamma_V)`, `M x L`.
fn weighted_antenna_factor(
    ah: &DMatrix<C64>,
    av: &DMatrix<C64>,
    gamma_h: &[C64],
    gamma_v: &[C64],
) -> DMatrix<C64> {
    let (m, l) = ah.shape();
    DMatrix::from_fn(m, l, |r, c| ah[(r, c)] * gamma_h[c] + av[(r, c)] * gamma_v[c])
}

// ---------------------------------------------------------------------------
// Factorized model context
// ---------------------------------------------------------------------------

/// Whitened factor pools of one path set: antenna factors stay untouched,
/// frequency factors carry the whitening. All score/FIM/weight computations
/// reduce to Gram matrices of these pools.
struct FactorCtx {
    l: usize,
    ah: DMatrix<C64>,
    av: DMatrix<C64>,
    dh_phi: DMatrix<C64>,
    dv_phi: DMatrix<C64>,
    dh_theta: DMatrix<C64>,
    dv_theta: DMatrix<C64>,
    /// Whitened delay basis and its `mu_tau` derivative, `N_f x L`.
    fb: DMatrix<C64>,
    fd: DMatrix<C64>,
}

fn build_ctx(mf: &ArrayManifold, wh: &Whitener, sp: &StructuralParams, v: f64) -> Result<FactorCtx> {
    let basis = mf.polarimetric_basis(sp, v)?;
    let jac = mf.angular_jacobian_blocks(sp, v)?;
    let fd_raw = mf.delay_basis_derivative(&sp.mu_tau);
    Ok(FactorCtx {
        l: sp.len(),
        ah: basis.b_rh,
        av: basis.b_rv,
        dh_phi: jac.d_rh_phi,
        dv_phi: jac.d_rv_phi,
        dh_theta: jac.d_rh_theta,
        dv_theta: jac.d_rv_theta,
        fb: wh.whiten_cols(&basis.b_f),
        fd: wh.whiten_cols(&fd_raw),
    })
}

impl FactorCtx {
    /// Whitened model signal `M x N_f`.
    fn model_rows(&self, gamma_h: &[C64], gamma_v: &[C64]) -> DMatrix<C64> {
        if self.l == 0 {
            return DMatrix::zeros(self.ah.nrows(), self.fb.nrows());
        }
        weighted_antenna_factor(&self.ah, &self.av, gamma_h, gamma_v) * self.fb.transpose()
    }
}

fn loglik_of(resid_w: &DMatrix<C64>, wh: &Whitener) -> f64 {
    let m = resid_w.nrows() as f64;
    let n = resid_w.ncols() as f64;
    -resid_w.norm_squared() - m * wh.logdet() - m * n * PI.ln()
}

/// Parameter layout of the real score/FIM: `[mu_tau (L) | mu_phi (L) |
/// mu_theta (L) | Re gamma_H | Im gamma_H | Re gamma_V | Im gamma_V]`.
fn real_dim(l: usize) -> usize {
    7 * l
}

/// Factorized score `q = 2 Re{D^H R^-1 r}` and Fisher information
/// `J = 2 Re{D^H R^-1 D}` in the real parameter layout. Every column of the
/// expanded Jacobian is a sum of at most two Kronecker terms
/// `coefficient * (antenna factor ⊗ frequency factor)`, so only Gram
/// matrices of the factor pools are ever formed.
fn score_and_fim_ctx(
    ctx: &FactorCtx,
    gamma_h: &[C64],
    gamma_v: &[C64],
    resid_w: &DMatrix<C64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let l = ctx.l;
    let dim = real_dim(l);
    if l == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let m = ctx.ah.nrows();
    let n_f = ctx.fb.nrows();

    // Antenna pool [ah | av | dh_phi | dv_phi | dh_theta | dv_theta].
    let mut ang = DMatrix::zeros(m, 6 * l);
    for (b, block) in
        [&ctx.ah, &ctx.av, &ctx.dh_phi, &ctx.dv_phi, &ctx.dh_theta, &ctx.dv_theta]
            .iter()
            .enumerate()
    {
        for c in 0..l {
            ang.set_column(b * l + c, &block.column(c));
        }
    }
    // Frequency pool [fb | fd].
    let mut freq = DMatrix::zeros(n_f, 2 * l);
    for c in 0..l {
        freq.set_column(c, &ctx.fb.column(c));
        freq.set_column(l + c, &ctx.fd.column(c));
    }

    let g_ang = ang.adjoint() * &ang; // 6L x 6L
    let g_freq = freq.adjoint() * &freq; // 2L x 2L
    let w = resid_w * freq.conjugate(); // M x 2L, columns r~ conj(f_t)
    let p = ang.adjoint() * w; // 6L x 2L, entries a^H (r~ conj(f))

    // Term lists: column -> [(antenna pool idx, frequency pool idx, coef)].
    let i = C64::new(0.0, 1.0);
    let one = C64::new(1.0, 0.0);
    let mut cols: Vec<Vec<(usize, usize, C64)>> = Vec::with_capacity(dim);
    for p_l in 0..l {
        cols.push(vec![(p_l, l + p_l, gamma_h[p_l]), (l + p_l, l + p_l, gamma_v[p_l])]);
    }
    for p_l in 0..l {
        cols.push(vec![(2 * l + p_l, p_l, gamma_h[p_l]), (3 * l + p_l, p_l, gamma_v[p_l])]);
    }
    for p_l in 0..l {
        cols.push(vec![(4 * l + p_l, p_l, gamma_h[p_l]), (5 * l + p_l, p_l, gamma_v[p_l])]);
    }
    for p_l in 0..l {
        cols.push(vec![(p_l, p_l, one)]);
    }
    for p_l in 0..l {
        cols.push(vec![(p_l, p_l, i)]);
    }
    for p_l in 0..l {
        cols.push(vec![(l + p_l, p_l, one)]);
    }
    for p_l in 0..l {
        cols.push(vec![(l + p_l, p_l, i)]);
    }

    let mut q = DVector::zeros(dim);
    for (c, terms) in cols.iter().enumerate() {
        let mut acc = C64::new(0.0, 0.0);
        for &(a, f, coef) in terms {
            acc += coef.conj() * p[(a, f)];
        }
        q[c] = 2.0 * acc.re;
    }
    let mut j = DMatrix::zeros(dim, dim);
    for c1 in 0..dim {
        for c2 in c1..dim {
            let mut acc = C64::new(0.0, 0.0);
            for &(a1, f1, k1) in &cols[c1] {
                for &(a2, f2, k2) in &cols[c2] {
                    acc += k1.conj() * k2 * g_ang[(a1, a2)] * g_freq[(f1, f2)];
                }
            }
            let v = 2.0 * acc.re;
            j[(c1, c2)] = v;
            j[(c2, c1)] = v;
        }
    }
    (q, j)
}

/// Score and Fisher information of a path set against an observation, in the
/// real parameter layout documented at [`PathSet`]: gradient of the
/// log-likelihood and `2 Re{D^H R^-1 D}`.
pub fn score_and_fim(
    set: &PathSet,
    z: &DMatrix<C64>,
    d: &DmcParams,
    mf: &ArrayManifold,
    v: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_observation(z, mf)?;
    let wh = Whitener::new(d, mf.n_f())?;
    let z_w = wh.whiten_rows(z);
    let ctx = build_ctx(mf, &wh, &set.sp, v)?;
    let resid = z_w - ctx.model_rows(&set.gamma_h, &set.gamma_v);
    Ok(score_and_fim_ctx(&ctx, &set.gamma_h, &set.gamma_v, &resid))
}

fn check_observation(z: &DMatrix<C64>, mf: &ArrayManifold) -> Result<()> {
    if z.nrows() != mf.m_antennas() || z.ncols() != mf.n_f() {
        return Err(Error::dims(format!(
            "observation is {}x{} but the manifold expects {}x{}",
            z.nrows(),
            z.ncols(),
            mf.m_antennas(),
            mf.n_f()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dense Jacobian (small problems and oracles)
// ---------------------------------------------------------------------------

/// Dense complex Jacobian of the model in the observation domain, flattened
/// antenna-major: `M N_f` rows, columns `[mu_tau | mu_phi | mu_theta |
/// gamma_H | gamma_V]` per path. Structural columns are the derivatives of
/// the signal; weight columns are the (complex-linear) basis responses, and
/// each expands into two real parameters `(Re, Im)` with the imaginary
/// column being `j` times the listed one.
pub fn jacobian(set: &PathSet, mf: &ArrayManifold, v: f64) -> Result<DMatrix<C64>> {
    let basis = mf.polarimetric_basis(&set.sp, v)?;
    let jac = mf.angular_jacobian_blocks(&set.sp, v)?;
    let fd = mf.delay_basis_derivative(&set.sp.mu_tau);
    let m = mf.m_antennas();
    let n_f = mf.n_f();
    let l = set.len();
    let mut d = DMatrix::zeros(m * n_f, 5 * l);
    let mut fill = |col: usize, a: DVector<C64>, f: DVector<C64>| {
        for ant in 0..m {
            for k in 0..n_f {
                d[(ant * n_f + k, col)] = a[ant] * f[k];
            }
        }
    };
    for p_l in 0..l {
        let gh = set.gamma_h[p_l];
        let gv = set.gamma_v[p_l];
        let ah = basis.b_rh.column(p_l).into_owned();
        let av = basis.b_rv.column(p_l).into_owned();
        let fb = basis.b_f.column(p_l).into_owned();
        // Delay: the derivative moves to the frequency factor.
        fill(p_l, &ah * gh + &av * gv, fd.column(p_l).into_owned());
        // Azimuth / elevation: the derivative moves to the antenna factor.
        fill(
            l + p_l,
            jac.d_rh_phi.column(p_l).into_owned() * gh
                + jac.d_rv_phi.column(p_l).into_owned() * gv,
            fb.clone(),
        );
        fill(
            2 * l + p_l,
            jac.d_rh_theta.column(p_l).into_owned() * gh
                + jac.d_rv_theta.column(p_l).into_owned() * gv,
            fb.clone(),
        );
        fill(3 * l + p_l, ah, fb.clone());
        fill(4 * l + p_l, av, fb);
    }
    Ok(d)
}

// ---------------------------------------------------------------------------
// Correlation objective and BLUE weights
// ---------------------------------------------------------------------------

/// Gram system of the weight basis `[gamma_H columns | gamma_V columns]`
/// under the whitened inner product, plus the projected observation.
fn weight_system(
    ctx: &FactorCtx,
    z_w: &DMatrix<C64>,
) -> (DMatrix<C64>, DVector<C64>) {
    let l = ctx.l;
    let m = ctx.ah.nrows();
    let mut ang = DMatrix::zeros(m, 2 * l);
    for c in 0..l {
        ang.set_column(c, &ctx.ah.column(c));
        ang.set_column(l + c, &ctx.av.column(c));
    }
    let g_ang = ang.adjoint() * &ang; // 2L x 2L
    let g_fb = ctx.fb.adjoint() * &ctx.fb; // L x L
    let w = z_w * ctx.fb.conjugate(); // M x L
    let p = ang.adjoint() * w; // 2L x L
    let mut gb = DMatrix::zeros(2 * l, 2 * l);
    for r in 0..2 * l {
        for c in 0..2 * l {
            gb[(r, c)] = g_ang[(r, c)] * g_fb[(r % l, c % l)];
        }
    }
    let rhs = DVector::from_fn(2 * l, |r, _| p[(r, r % l)]);
    (gb, rhs)
}

/// Best linear unbiased weights of a path set under the whitened metric,
/// solved jointly for all paths; returns `(gamma_H, gamma_V)`.
fn blue_fit(ctx: &FactorCtx, z_w: &DMatrix<C64>) -> Result<(Vec<C64>, Vec<C64>)> {
    let l = ctx.l;
    if l == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let (gb, rhs) = weight_system(ctx, z_w);
    let sol = solve_hermitian_damped(&gb, &rhs, 0.0)?;
    Ok((sol.as_slice()[..l].to_vec(), sol.as_slice()[l..].to_vec()))
}

/// Compression objective `C = (B^H R^-1 z)^H (B^H R^-1 B)^-1 (B^H R^-1 z)`
/// of candidate structural parameters: the power the weight basis captures
/// from the observation after noise whitening. Maximizing it over the
/// structural parameters is equivalent to maximizing the concentrated
/// likelihood with the weights solved out.
pub fn correlation_objective(
    sp: &StructuralParams,
    z: &DMatrix<C64>,
    d: &DmcParams,
    mf: &ArrayManifold,
    v: f64,
) -> Result<f64> {
    check_observation(z, mf)?;
    let wh = Whitener::new(d, mf.n_f())?;
    let z_w = wh.whiten_rows(z);
    let ctx = build_ctx(mf, &wh, sp, v)?;
    if ctx.l == 0 {
        return Ok(0.0);
    }
    let (gb, rhs) = weight_system(&ctx, &z_w);
    let sol = solve_hermitian_damped(&gb, &rhs, 0.0)?;
    Ok(rhs.dotc(&sol).re)
}

/// Best linear unbiased estimate of the polarimetric weights given the
/// structural parameters; the residual `z - B gamma` is `R^-1`-orthogonal to
/// the basis.
pub fn blue_gamma(
    sp: &StructuralParams,
    z: &DMatrix<C64>,
    d: &DmcParams,
    mf: &ArrayManifold,
    v: f64,
) -> Result<(Vec<C64>, Vec<C64>)> {
    check_observation(z, mf)?;
    let wh = Whitener::new(d, mf.n_f())?;
    let z_w = wh.whiten_rows(z);
    let ctx = build_ctx(mf, &wh, sp, v)?;
    blue_fit(&ctx, &z_w)
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Knobs of the alternating estimator. Defaults are sized for a switched
/// array with a few hundred antennas and comb bins.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RimaxConfig {
    /// Hard cap on the number of extracted paths; zero estimates only the
    /// diffuse statistics.
    pub max_paths: usize,
    /// Initialization stops once the whitened residual power falls below
    /// this fraction of the initial whitened observation power.
    pub residual_threshold: f64,
    /// Initial Levenberg-Marquardt damping and its schedule.
    pub lm_xi_init: f64,
    pub lm_grow: f64,
    pub lm_shrink: f64,
    /// Damping retries within one step before giving up on improvement.
    pub lm_retries: usize,
    /// Refinement steps per alternation.
    pub lm_max_iters: usize,
    /// Relative log-likelihood change treated as converged.
    pub tol_loglik: f64,
    /// Paths whose weight magnitude has a relative standard error above this
    /// are dropped.
    pub drop_rel_std: f64,
    /// Delay grid density as a multiple of the delay mode count.
    pub tau_grid_mult: usize,
    /// Angle grid density as a multiple of the aperture mode counts.
    pub angle_grid_mult: usize,
    /// Joint local refinement radius around the 1-D scan peaks, in grid
    /// cells per dimension.
    pub refine_radius: usize,
    /// Cap on specular/diffuse alternations.
    pub max_alternations: usize,
}

impl Default for RimaxConfig {
    fn default() -> Self {
        RimaxConfig {
            max_paths: 8,
            residual_threshold: 0.05,
            lm_xi_init: 1e-2,
            lm_grow: 10.0,
            lm_shrink: 0.1,
            lm_retries: 8,
            lm_max_iters: 30,
            tol_loglik: 1e-6,
            drop_rel_std: 1.0,
            tau_grid_mult: 4,
            angle_grid_mult: 2,
            refine_radius: 3,
            max_alternations: 10,
        }
    }
}

impl RimaxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.residual_threshold >= 0.0 && self.residual_threshold <= 1.0) {
            return Err(Error::config("residual_threshold must lie in [0, 1]"));
        }
        if !(self.lm_xi_init > 0.0) || !(self.lm_grow > 1.0) || !(self.lm_shrink <= 1.0)
            || !(self.lm_shrink > 0.0)
        {
            return Err(Error::config(
                "damping schedule needs xi_init > 0, grow > 1 and 0 < shrink <= 1",
            ));
        }
        if !(self.tol_loglik > 0.0) {
            return Err(Error::config("tol_loglik must be positive"));
        }
        if !(self.drop_rel_std > 0.0) {
            return Err(Error::config("drop_rel_std must be positive"));
        }
        if self.tau_grid_mult == 0 || self.angle_grid_mult == 0 {
            return Err(Error::config("grid multipliers must be at least 1"));
        }
        if self.max_alternations == 0 {
            return Err(Error::config("max_alternations must be at least 1"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Levenberg-Marquardt step
// ---------------------------------------------------------------------------

/// One damped refinement attempt: outcome of the accept/reject schedule.
#[derive(Clone, Debug)]
pub struct LmOutcome {
    pub set: PathSet,
    pub xi: f64,
    pub loglik: f64,
    pub accepted: bool,
    /// The damped system stayed singular at maximum damping; the caller
    /// should remove a path.
    pub singular: bool,
}

fn apply_step(set: &PathSet, dx: &DVector<f64>) -> PathSet {
    let l = set.len();
    let mut out = set.clone();
    for p_l in 0..l {
        out.sp.mu_tau[p_l] = wrap_mu_tau(set.sp.mu_tau[p_l] + dx[p_l]);
        if !set.boundary[p_l] {
            out.sp.mu_phi[p_l] = wrap_phi(set.sp.mu_phi[p_l] + dx[l + p_l]);
        }
        let t = set.sp.mu_theta[p_l] + dx[2 * l + p_l];
        if t < 0.0 {
            out.sp.mu_theta[p_l] = 0.0;
            out.boundary[p_l] = true;
        } else if t > PI {
            out.sp.mu_theta[p_l] = PI;
            out.boundary[p_l] = true;
        } else {
            out.sp.mu_theta[p_l] = t;
        }
        out.gamma_h[p_l] += C64::new(dx[3 * l + p_l], dx[4 * l + p_l]);
        out.gamma_v[p_l] += C64::new(dx[5 * l + p_l], dx[6 * l + p_l]);
    }
    out
}

fn lm_step_w(
    set: &PathSet,
    z_w: &DMatrix<C64>,
    wh: &Whitener,
    mf: &ArrayManifold,
    v: f64,
    xi0: f64,
    cfg: &RimaxConfig,
) -> Result<LmOutcome> {
    let ctx = build_ctx(mf, wh, &set.sp, v)?;
    let resid = z_w - ctx.model_rows(&set.gamma_h, &set.gamma_v);
    let ll0 = loglik_of(&resid, wh);
    let (mut q, mut j) = score_and_fim_ctx(&ctx, &set.gamma_h, &set.gamma_v, &resid);
    let l = set.len();
    let dim = real_dim(l);
    // Boundary paths keep their azimuth: zero its row/column so the damped
    // system stays well posed and the step component vanishes.
    for p_l in 0..l {
        if set.boundary[p_l] {
            let c = l + p_l;
            q[c] = 0.0;
            for k in 0..dim {
                j[(c, k)] = 0.0;
                j[(k, c)] = 0.0;
            }
            j[(c, c)] = 1.0;
        }
    }
    let floor = 1e-12 * (j.trace() / dim.max(1) as f64).abs() + 1e-300;
    let mut xi = xi0;
    let mut solved_any = false;
    for _ in 0..=cfg.lm_retries {
        let mut a = j.clone();
        for idx in 0..dim {
            a[(idx, idx)] += xi * j[(idx, idx)].abs() + floor;
        }
        let Some(chol) = a.cholesky() else {
            xi *= cfg.lm_grow;
            continue;
        };
        solved_any = true;
        let dx = chol.solve(&q);
        let cand = apply_step(set, &dx);
        let ctx2 = build_ctx(mf, wh, &cand.sp, v)?;
        let r2 = z_w - ctx2.model_rows(&cand.gamma_h, &cand.gamma_v);
        let ll1 = loglik_of(&r2, wh);
        if ll1.is_finite() && ll1 >= ll0 {
            return Ok(LmOutcome {
                set: cand,
                xi: (xi * cfg.lm_shrink).max(1e-14),
                loglik: ll1,
                accepted: true,
                singular: false,
            });
        }
        xi *= cfg.lm_grow;
    }
    Ok(LmOutcome { set: set.clone(), xi, loglik: ll0, accepted: false, singular: !solved_any })
}

/// One Levenberg-Marquardt step on all parameters with diagonal damping
/// `J + xi diag(J)`. A proposal is accepted only if the log-likelihood does
/// not decrease, so the returned value is never below the current one;
/// rejection grows the damping and retries a bounded number of times.
pub fn lm_step(
    set: &PathSet,
    z: &DMatrix<C64>,
    d: &DmcParams,
    mf: &ArrayManifold,
    v: f64,
    xi: f64,
    cfg: &RimaxConfig,
) -> Result<LmOutcome> {
    check_observation(z, mf)?;
    let wh = Whitener::new(d, mf.n_f())?;
    let z_w = wh.whiten_rows(z);
    lm_step_w(set, &z_w, &wh, mf, v, xi, cfg)
}

// ---------------------------------------------------------------------------
// Initialization scans
// ---------------------------------------------------------------------------

/// Delay-scan machinery of one whitener: the correlation denominator
/// `|W b_f(mu)|^2` over the whole grid, evaluated once via anti-diagonal
/// sums of the whitened system-response Gram and one FFT.
struct DelayScan {
    grid: usize,
    den: Vec<f64>,
}

fn delay_scan_ctx(mf: &ArrayManifold, wh: &Whitener, grid_mult: usize) -> DelayScan {
    let m_tau = mf.m_tau();
    let grid = (grid_mult * m_tau).max(8);
    let bw = wh.whiten_cols(mf.g_f());
    let qm = bw.adjoint() * &bw; // M_tau x M_tau
    let mut buf = vec![C64::new(0.0, 0.0); grid];
    for d in 0..m_tau {
        let mut s = C64::new(0.0, 0.0);
        for k in 0..m_tau - d {
            s += qm[(k + d, k)];
        }
        if d == 0 {
            buf[0] = s;
        } else {
            buf[d] += s;
            buf[grid - d] += s.conj();
        }
    }
    FftPlanner::<f64>::new().plan_fft_inverse(grid).process(&mut buf);
    let den = buf.iter().map(|c| c.re.max(1e-300)).collect();
    DelayScan { grid, den }
}

/// Matched-filter delay spectrum of the whitened residual: per-antenna
/// correlations against the whitened delay basis over the full grid via
/// zero-padded FFTs, combined incoherently across antennas. Returns the best
/// grid index and the per-antenna matched output there.
fn delay_scan(
    mf: &ArrayManifold,
    wh: &Whitener,
    sc: &DelayScan,
    resid_w: &DMatrix<C64>,
) -> (usize, DVector<C64>) {
    let m = resid_w.nrows();
    let m_tau = mf.m_tau();
    let fft = FftPlanner::<f64>::new().plan_fft_inverse(sc.grid);
    let mut num = vec![0.0f64; sc.grid];
    let mut matched = DMatrix::zeros(m, sc.grid);
    for ant in 0..m {
        let row = resid_w.row(ant).transpose().into_owned();
        // Second application of W turns the whitened row into R^-1 r.
        let y = wh.whiten_vec(&row);
        let v = mf.g_f().adjoint() * y;
        let mut buf = vec![C64::new(0.0, 0.0); sc.grid];
        buf[..m_tau].copy_from_slice(v.as_slice());
        fft.process(&mut buf);
        for g in 0..sc.grid {
            num[g] += buf[g].norm_sqr();
            matched[(ant, g)] = buf[g];
        }
    }
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for g in 0..sc.grid {
        let val = num[g] / sc.den[g];
        if val > best_val {
            best_val = val;
            best = g;
        }
    }
    (best, matched.column(best).into_owned())
}

/// Two-column polarimetric projection objective of one arrival direction:
/// power captured by `[a_H | a_V]` from the matched antenna vector, with the
/// delay-basis norm folded into the Gram.
fn pol_objective(ah: &DVector<C64>, av: &DVector<C64>, w0: &DVector<C64>, den: f64) -> f64 {
    let g = [
        [ah.dotc(ah) * den, ah.dotc(av) * den],
        [av.dotc(ah) * den, av.dotc(av) * den],
    ];
    let rhs = [ah.dotc(w0), av.dotc(w0)];
    let ridge = 1e-12 * (g[0][0].re + g[1][1].re) + 1e-300;
    let (a, b, c, dd) = (g[0][0] + ridge, g[0][1], g[1][0], g[1][1] + ridge);
    let det = a * dd - b * c;
    if det.norm() <= 1e-300 {
        return 0.0;
    }
    let x0 = (dd * rhs[0] - b * rhs[1]) / det;
    let x1 = (a * rhs[1] - c * rhs[0]) / det;
    (rhs[0].conj() * x0 + rhs[1].conj() * x1).re
}

/// Reference elevation used while scanning azimuth before the elevation is
/// known: mid-range, so the motion-induced phase ramp is partially
/// represented; the joint local refinement repairs the coupling.
const THETA_REF: f64 = std::f64::consts::FRAC_PI_4;

/// Appends paths to `base` by sequential grid scans (delay, then azimuth,
/// then elevation, then a joint local refinement) with a joint weight re-fit
/// after every addition. Stops at the path cap, at the residual threshold,
/// or when an addition no longer pays for its degrees of freedom.
fn initialize_w(
    mf: &ArrayManifold,
    wh: &Whitener,
    z_w: &DMatrix<C64>,
    cfg: &RimaxConfig,
    v: f64,
    base: PathSet,
) -> Result<PathSet> {
    let m = mf.m_antennas();
    let n_f = mf.n_f();
    let init_pow = z_w.norm_squared();
    if init_pow <= 0.0 {
        return Ok(base);
    }
    let floor = cfg.residual_threshold * init_pow;
    let sc = delay_scan_ctx(mf, wh, cfg.tau_grid_mult);
    let n_phi = (cfg.angle_grid_mult * mf.m_az()).max(4);
    let n_theta = (cfg.angle_grid_mult * mf.m_el()).max(4);
    let phi_step = TWO_PI / n_phi as f64;
    let theta_step = PI / (n_theta - 1) as f64;
    let tau_step = TWO_PI / sc.grid as f64;
    // A candidate must remove more than what a best-of-grid pick would strip
    // from pure noise, otherwise it is treated as spurious and discarded.
    let candidates = (sc.grid * n_phi * n_theta) as f64;
    let min_gain = (2.0 * (4.0 + candidates.ln()) / (m * n_f) as f64).clamp(1e-4, 0.25);

    let mut set = base;
    let mut resid = {
        let ctx = build_ctx(mf, wh, &set.sp, v)?;
        z_w - ctx.model_rows(&set.gamma_h, &set.gamma_v)
    };
    while set.len() < cfg.max_paths {
        let prev_pow = resid.norm_squared();
        if prev_pow <= floor {
            break;
        }
        // 1-D delay scan.
        let (g_best, w0) = delay_scan(mf, wh, &sc, &resid);
        let mu_tau0 = wrap_mu_tau(g_best as f64 * tau_step);
        // 1-D azimuth scan at the reference elevation.
        let mut phi0 = -PI;
        let mut best = f64::NEG_INFINITY;
        for i in 0..n_phi {
            let phi = -PI + i as f64 * phi_step;
            let (ah, av) = mf.port_response(phi, THETA_REF, v);
            let val = pol_objective(&ah, &av, &w0, sc.den[g_best]);
            if val > best {
                best = val;
                phi0 = phi;
            }
        }
        // 1-D elevation scan at the azimuth estimate.
        let mut theta0 = 0.0;
        best = f64::NEG_INFINITY;
        for i in 0..n_theta {
            let theta = i as f64 * theta_step;
            let (ah, av) = mf.port_response(phi0, theta, v);
            let val = pol_objective(&ah, &av, &w0, sc.den[g_best]);
            if val > best {
                best = val;
                theta0 = theta;
            }
        }
        // Joint local refinement around the scan peaks.
        let r = cfg.refine_radius as isize;
        let (mut mu_tau, mut phi, mut theta) = (mu_tau0, phi0, theta0);
        best = f64::NEG_INFINITY;
        for dt in -r..=r {
            let mu = wrap_mu_tau(mu_tau0 + dt as f64 * tau_step);
            let fb = wh.whiten_cols(&mf.delay_basis(&[mu]));
            let f_col = fb.column(0).into_owned();
            let den = f_col.norm_squared();
            let w = &resid * f_col.conjugate();
            for dp in -r..=r {
                let cand_phi = wrap_phi(phi0 + dp as f64 * phi_step);
                for de in -r..=r {
                    let cand_theta = (theta0 + de as f64 * theta_step).clamp(0.0, PI);
                    let (ah, av) = mf.port_response(cand_phi, cand_theta, v);
                    let val = pol_objective(&ah, &av, &w, den);
                    if val > best {
                        best = val;
                        mu_tau = mu;
                        phi = cand_phi;
                        theta = cand_theta;
                    }
                }
            }
        }
        // Tentatively add the path and re-fit all weights jointly.
        let snapshot = set.clone();
        set.push(mu_tau, phi, theta);
        let ctx = build_ctx(mf, wh, &set.sp, v)?;
        let (gh, gv) = blue_fit(&ctx, z_w)?;
        set.gamma_h = gh;
        set.gamma_v = gv;
        let new_resid = z_w - ctx.model_rows(&set.gamma_h, &set.gamma_v);
        let new_pow = new_resid.norm_squared();
        if new_pow >= prev_pow * (1.0 - min_gain) {
            set = snapshot;
            break;
        }
        resid = new_resid;
    }
    Ok(set)
}

/// Seeds a path set from scratch by sequential coarse grid scans of the
/// correlation objective with joint weight re-fits; see the module
/// documentation for the stop rules. Stronger paths are found first because
/// every scan works on the residual of the previous ones.
pub fn initialize_paths(
    z: &DMatrix<C64>,
    d: &DmcParams,
    cfg: &RimaxConfig,
    mf: &ArrayManifold,
    v: f64,
) -> Result<PathSet> {
    check_observation(z, mf)?;
    cfg.validate()?;
    let wh = Whitener::new(d, mf.n_f())?;
    let z_w = wh.whiten_rows(z);
    initialize_w(mf, &wh, &z_w, cfg, v, PathSet::default())
}

// ---------------------------------------------------------------------------
// Diffuse spectrum fit
// ---------------------------------------------------------------------------

/// Result of the diffuse + noise fit; on non-convergence the prior is
/// returned and the flag cleared.
#[derive(Clone, Copy, Debug)]
pub struct DmcFit {
    pub params: DmcParams,
    pub converged: bool,
}

/// Mean periodogram across antennas under the unitary DFT; its expectation
/// is the triangle-weighted spectrum of the row covariance.
fn averaged_periodogram(z: &DMatrix<C64>) -> Vec<f64> {
    let (m, n) = z.shape();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut psi = vec![0.0f64; n];
    let scale = 1.0 / (n as f64 * m as f64);
    let mut buf = vec![C64::new(0.0, 0.0); n];
    for ant in 0..m {
        for k in 0..n {
            buf[k] = z[(ant, k)];
        }
        fft.process(&mut buf);
        for k in 0..n {
            psi[k] += buf[k].norm_sqr() * scale;
        }
    }
    psi
}

/// Model spectrum `lambda_k = sigma2 + alpha1 c_k(beta, tau)` and the
/// partial derivatives with respect to `[ln alpha1, ln beta, tau, ln
/// sigma2]`. `c_k` is the triangle-weighted DFT of the unit-power lag
/// profile, matching the expectation of the finite-window periodogram.
fn whittle_model(x: &[f64; 4], n: usize) -> (Vec<f64>, [Vec<f64>; 4]) {
    let (a1, b, td, s2) = (x[0].exp(), x[1].exp(), x[2], x[3].exp());
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut g = vec![C64::new(0.0, 0.0); n];
    let mut gt = vec![C64::new(0.0, 0.0); n];
    let mut gb = vec![C64::new(0.0, 0.0); n];
    g[0] = C64::new(1.0, 0.0);
    for d in 1..n {
        let df = d as f64;
        let w = 1.0 - df / n as f64;
        let denom = C64::new(1.0, TWO_PI * df / (b * n as f64));
        let rot = Complex::from_polar(1.0, -TWO_PI * td * df);
        let kap = rot / denom;
        g[d] = w * kap;
        gt[d] = C64::new(0.0, -TWO_PI * df) * w * kap;
        gb[d] = C64::new(0.0, TWO_PI * df / (b * b * n as f64)) * w * kap / denom;
    }
    fft.process(&mut g);
    fft.process(&mut gt);
    fft.process(&mut gb);
    let mut lam = vec![0.0f64; n];
    let mut d_la = vec![0.0f64; n];
    let mut d_lb = vec![0.0f64; n];
    let mut d_t = vec![0.0f64; n];
    let mut d_ls = vec![0.0f64; n];
    for k in 0..n {
        let c = 2.0 * g[k].re - 1.0;
        lam[k] = (s2 + a1 * c).max(1e-300);
        d_la[k] = a1 * c;
        d_lb[k] = a1 * b * 2.0 * gb[k].re;
        d_t[k] = a1 * 2.0 * gt[k].re;
        d_ls[k] = s2;
    }
    (lam, [d_la, d_lb, d_t, d_ls])
}

/// Whittle deviance of the averaged periodogram against the model spectrum.
fn whittle_cost(lam: &[f64], psi: &[f64]) -> f64 {
    lam.iter().zip(psi).map(|(&l, &p)| l.ln() + p / l).sum()
}

/// Fits the diffuse + noise parameters to the averaged periodogram of a
/// residual by damped Fisher scoring on the Whittle deviance in
/// log-transformed coordinates. An exactly zero residual yields the all-zero
/// element; non-convergence returns the prior with the flag cleared.
pub fn estimate_dmc(residual: &DMatrix<C64>, prior: &DmcParams) -> Result<DmcFit> {
    let (m, n) = residual.shape();
    if m == 0 || n == 0 {
        return Err(Error::dims("diffuse fit needs a non-empty residual"));
    }
    if residual.norm_squared() <= 0.0 {
        return Ok(DmcFit { params: DmcParams::zero(), converged: true });
    }
    let psi = averaged_periodogram(residual);
    let mean_psi = psi.iter().sum::<f64>() / n as f64;
    if n < 8 {
        // Too few bins to resolve a profile: report the white-noise moment.
        return Ok(DmcFit { params: DmcParams::white(mean_psi), converged: true });
    }
    // Initialization: noise floor from the lower decile of the periodogram,
    // onset from the spectral peak (the lag kernel aligns at tau = 1 - k/N),
    // diffuse power from what the floor leaves unexplained.
    let mut sorted = psi.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let decile = sorted[..(n / 10).max(1)].iter().sum::<f64>() / (n / 10).max(1) as f64;
    let peak_k = psi
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .unwrap_or(0);
    let sigma2_0 = if prior.sigma2 > 0.0 { prior.sigma2 } else { decile.max(1e-12 * mean_psi) };
    let alpha1_0 = if prior.alpha1 > 0.0 {
        prior.alpha1
    } else {
        (mean_psi - sigma2_0).max(1e-2 * sigma2_0)
    };
    let beta_0 = if prior.alpha1 > 0.0 { prior.beta_d } else { 0.3 };
    let tau_0 = if prior.alpha1 > 0.0 {
        prior.tau_d
    } else {
        (1.0 - peak_k as f64 / n as f64).rem_euclid(1.0)
    };
    let mut x = [alpha1_0.ln(), beta_0.ln(), tau_0, sigma2_0.ln()];
    let clamp = |x: &mut [f64; 4]| {
        x[0] = x[0].clamp(-600.0, 600.0);
        x[1] = x[1].clamp(-30.0, 30.0);
        x[2] = x[2].rem_euclid(1.0);
        x[3] = x[3].clamp(-600.0, 600.0);
    };
    clamp(&mut x);

    let (mut lam, mut dlam) = whittle_model(&x, n);
    let mut cost = whittle_cost(&lam, &psi);
    let mut xi = 1e-2f64;
    let mut converged = false;
    for _ in 0..120 {
        // Gradient and Fisher information of the deviance.
        let mut grad: DVector<f64> = DVector::zeros(4);
        let mut fim: DMatrix<f64> = DMatrix::zeros(4, 4);
        for k in 0..n {
            let wk = (lam[k] - psi[k]) / (lam[k] * lam[k]);
            for i in 0..4 {
                grad[i] += wk * dlam[i][k];
                for jj in i..4 {
                    fim[(i, jj)] += dlam[i][k] * dlam[jj][k] / (lam[k] * lam[k]);
                }
            }
        }
        for i in 0..4 {
            for jj in 0..i {
                fim[(i, jj)] = fim[(jj, i)];
            }
        }
        let floor = 1e-12 * (fim.trace() / 4.0).abs() + 1e-300;
        let mut accepted = false;
        for _ in 0..10 {
            let mut a = fim.clone();
            for i in 0..4 {
                a[(i, i)] += xi * fim[(i, i)].abs() + floor;
            }
            let Some(chol) = a.cholesky() else {
                xi *= 10.0;
                continue;
            };
            let dx = chol.solve(&(-&grad));
            let mut x1 = x;
            for i in 0..4 {
                x1[i] += dx[i];
            }
            clamp(&mut x1);
            let (lam1, dlam1) = whittle_model(&x1, n);
            let cost1 = whittle_cost(&lam1, &psi);
            if cost1.is_finite() && cost1 < cost {
                let delta = cost - cost1;
                x = x1;
                lam = lam1;
                dlam = dlam1;
                cost = cost1;
                xi = (xi * 0.1).max(1e-14);
                accepted = true;
                if delta <= 1e-12 * (1.0 + cost.abs()) {
                    converged = true;
                }
                break;
            }
            xi *= 10.0;
        }
        if !accepted {
            // No damping level improves the deviance: stationary.
            converged = true;
        }
        if converged {
            break;
        }
    }
    if !converged {
        return Ok(DmcFit { params: *prior, converged: false });
    }
    let params =
        DmcParams { alpha1: x[0].exp(), beta_d: x[1].exp(), tau_d: x[2], sigma2: x[3].exp() };
    Ok(DmcFit { params, converged: true })
}

// ---------------------------------------------------------------------------
// Full alternating estimator
// ---------------------------------------------------------------------------

/// One extracted propagation path: structural parameters, polarimetric
/// weights, the ratio of the joint weight magnitude to its standard error
/// (larger is better; removal triggers below the configured threshold), the
/// elevation-boundary flag, and the Cramer-Rao variances of
/// `(mu_tau, mu_phi, mu_theta)`.
#[derive(Clone, Debug)]
pub struct SpEstimate {
    pub mu_tau: f64,
    pub mu_phi: f64,
    pub mu_theta: f64,
    pub gamma_h: C64,
    pub gamma_v: C64,
    pub reliability: f64,
    pub boundary: bool,
    pub crlb_mu: [f64; 3],
}

impl SpEstimate {
    pub fn power(&self) -> f64 {
        self.gamma_h.norm_sqr() + self.gamma_v.norm_sqr()
    }
}

/// Bookkeeping of one estimator run.
#[derive(Clone, Debug, Default)]
pub struct RimaxDiagnostics {
    /// Accepted refinement log-likelihoods, one inner list per alternation;
    /// non-decreasing within each list.
    pub loglik: Vec<Vec<f64>>,
    pub alternations: usize,
    pub converged: bool,
    /// All diffuse fits converged.
    pub dmc_converged: bool,
    pub dropped_paths: usize,
}

/// Full estimator output for one observation.
#[derive(Clone, Debug)]
pub struct RimaxOutcome {
    /// Extracted paths, strongest first.
    pub paths: Vec<SpEstimate>,
    pub dmc: DmcParams,
    pub diagnostics: RimaxDiagnostics,
}

/// Relative standard error of each path's joint weight magnitude from the
/// inverse Fisher information; `usize::MAX` entries never trigger drops.
fn weight_rel_std(set: &PathSet, j: &DMatrix<f64>) -> Vec<f64> {
    let l = set.len();
    let dim = real_dim(l);
    let floor = 1e-10 * (j.trace() / dim.max(1) as f64).abs() + 1e-300;
    let mut a = j.clone();
    for i in 0..dim {
        a[(i, i)] += floor;
    }
    let Some(chol) = a.cholesky() else {
        return vec![f64::INFINITY; l];
    };
    let cov = chol.inverse();
    (0..l)
        .map(|p_l| {
            let g = set.power(p_l).sqrt();
            if g <= 0.0 {
                return f64::INFINITY;
            }
            // Gradient of |gamma| joint magnitude in the four weight slots.
            let u = [
                set.gamma_h[p_l].re / g,
                set.gamma_h[p_l].im / g,
                set.gamma_v[p_l].re / g,
                set.gamma_v[p_l].im / g,
            ];
            let idx = [3 * l + p_l, 4 * l + p_l, 5 * l + p_l, 6 * l + p_l];
            let mut var = 0.0;
            for (i, &ri) in idx.iter().enumerate() {
                for (jj, &cj) in idx.iter().enumerate() {
                    var += u[i] * cov[(ri, cj)] * u[jj];
                }
            }
            var.max(0.0).sqrt() / g
        })
        .collect()
}

/// Maximum-likelihood extraction of specular paths and diffuse statistics
/// from one `M x N_f` observation. Alternates Levenberg-Marquardt path
/// refinement, a Whittle diffuse fit on the residual, and add/drop
/// bookkeeping until the joint log-likelihood settles or the alternation cap
/// is reached; see the module documentation.
pub fn rimax_estimate(
    z: &DMatrix<C64>,
    cfg: &RimaxConfig,
    mf: &ArrayManifold,
    v: f64,
) -> Result<RimaxOutcome> {
    cfg.validate()?;
    check_observation(z, mf)?;
    let n_f = mf.n_f();
    if z.norm_squared() <= 0.0 {
        return Ok(RimaxOutcome {
            paths: Vec::new(),
            dmc: DmcParams::zero(),
            diagnostics: RimaxDiagnostics { converged: true, dmc_converged: true, ..Default::default() },
        });
    }
    // Initial noise floor from the quiet quarter of the periodogram; the
    // specular part occupies few spectral degrees of freedom, so the lower
    // bins track sigma2 + the diffuse floor well enough to whiten with.
    let psi = averaged_periodogram(z);
    let mean_psi = psi.iter().sum::<f64>() / n_f as f64;
    let mut sorted = psi.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let quarter = (n_f / 4).max(1);
    let floor = sorted[..quarter].iter().sum::<f64>() / quarter as f64;
    let mut d = DmcParams::white(floor.max(1e-12 * mean_psi).max(1e-300));

    let mut diagnostics = RimaxDiagnostics { dmc_converged: true, ..Default::default() };
    if cfg.max_paths == 0 {
        let fit = estimate_dmc(z, &d)?;
        diagnostics.dmc_converged = fit.converged;
        diagnostics.converged = fit.converged;
        return Ok(RimaxOutcome { paths: Vec::new(), dmc: fit.params, diagnostics });
    }

    let mut wh = Whitener::new(&d, n_f)?;
    let mut z_w = wh.whiten_rows(z);
    let mut set = initialize_w(mf, &wh, &z_w, cfg, v, PathSet::default())?;
    let mut prev_ll = f64::NEG_INFINITY;
    for alt in 0..cfg.max_alternations {
        diagnostics.alternations = alt + 1;
        // Stage 1: damped refinement under the current whitener.
        let mut lls = Vec::new();
        let mut xi = cfg.lm_xi_init;
        while !set.is_empty() {
            if lls.len() >= cfg.lm_max_iters {
                break;
            }
            let out = lm_step_w(&set, &z_w, &wh, mf, v, xi, cfg)?;
            xi = out.xi;
            if out.singular {
                // Degenerate information even at maximum damping: remove the
                // weakest path and let the weight re-fit absorb its energy.
                let weakest = (0..set.len())
                    .min_by(|&a, &b| set.power(a).total_cmp(&set.power(b)))
                    .expect("non-empty set");
                set.remove(weakest);
                diagnostics.dropped_paths += 1;
                if !set.is_empty() {
                    let ctx = build_ctx(mf, &wh, &set.sp, v)?;
                    let (gh, gv) = blue_fit(&ctx, &z_w)?;
                    set.gamma_h = gh;
                    set.gamma_v = gv;
                }
                continue;
            }
            if !out.accepted {
                break;
            }
            let delta = out.loglik - lls.last().copied().unwrap_or(f64::NEG_INFINITY);
            lls.push(out.loglik);
            set = out.set;
            if delta.abs() <= cfg.tol_loglik * (1.0 + out.loglik.abs()) {
                break;
            }
        }
        diagnostics.loglik.push(lls);

        // Stage 2: drop paths whose weight is not significant.
        let mut dropped = 0;
        if !set.is_empty() {
            let ctx = build_ctx(mf, &wh, &set.sp, v)?;
            let resid = &z_w - ctx.model_rows(&set.gamma_h, &set.gamma_v);
            let (_, j) = score_and_fim_ctx(&ctx, &set.gamma_h, &set.gamma_v, &resid);
            let rel = weight_rel_std(&set, &j);
            for p_l in (0..set.len()).rev() {
                if rel[p_l] > cfg.drop_rel_std {
                    set.remove(p_l);
                    dropped += 1;
                }
            }
            if dropped > 0 && !set.is_empty() {
                let ctx = build_ctx(mf, &wh, &set.sp, v)?;
                let (gh, gv) = blue_fit(&ctx, &z_w)?;
                set.gamma_h = gh;
                set.gamma_v = gv;
            }
            diagnostics.dropped_paths += dropped;
        }

        // Stage 3: diffuse fit on the observation-domain residual.
        let resid_obs = z - model_signal(&set, mf, v)?;
        let fit = estimate_dmc(&resid_obs, &d)?;
        diagnostics.dmc_converged &= fit.converged;
        // Keep the previous whitener when the fit degenerates (for example
        // an exactly zero residual, whose covariance cannot be inverted).
        match Whitener::new(&fit.params, n_f) {
            Ok(new_wh) => {
                d = fit.params;
                wh = new_wh;
                z_w = wh.whiten_rows(z);
                if !set.is_empty() {
                    let ctx = build_ctx(mf, &wh, &set.sp, v)?;
                    let (gh, gv) = blue_fit(&ctx, &z_w)?;
                    set.gamma_h = gh;
                    set.gamma_v = gv;
                }
            }
            Err(_) => {}
        }

        // Stage 4: seed further paths from the residual if there is room.
        let before = set.len();
        if set.len() < cfg.max_paths {
            set = initialize_w(mf, &wh, &z_w, cfg, v, set)?;
        }
        let added = set.len() - before;

        let ctx = build_ctx(mf, &wh, &set.sp, v)?;
        let resid = &z_w - ctx.model_rows(&set.gamma_h, &set.gamma_v);
        let ll_full = loglik_of(&resid, &wh);
        let stable = dropped == 0 && added == 0;
        if stable && (ll_full - prev_ll).abs() <= cfg.tol_loglik * (1.0 + ll_full.abs()) {
            diagnostics.converged = true;
            break;
        }
        prev_ll = ll_full;
    }

    // Package: reliabilities and Cramer-Rao variances from the final Fisher
    // information, strongest path first.
    let mut paths = Vec::with_capacity(set.len());
    if !set.is_empty() {
        let ctx = build_ctx(mf, &wh, &set.sp, v)?;
        let resid = &z_w - ctx.model_rows(&set.gamma_h, &set.gamma_v);
        let (_, j) = score_and_fim_ctx(&ctx, &set.gamma_h, &set.gamma_v, &resid);
        let rel = weight_rel_std(&set, &j);
        let l = set.len();
        let dim = real_dim(l);
        let floor = 1e-10 * (j.trace() / dim as f64).abs() + 1e-300;
        let mut a = j.clone();
        for i in 0..dim {
            a[(i, i)] += floor;
        }
        let cov = a.cholesky().map(|c| c.inverse());
        for p_l in 0..l {
            let crlb_mu = match &cov {
                Some(c) => [c[(p_l, p_l)], c[(l + p_l, l + p_l)], c[(2 * l + p_l, 2 * l + p_l)]],
                None => [f64::INFINITY; 3],
            };
            let reliability = if rel[p_l].is_finite() && rel[p_l] > 0.0 {
                (1.0 / rel[p_l]).min(1e12)
            } else if rel[p_l] == 0.0 {
                1e12
            } else {
                0.0
            };
            paths.push(SpEstimate {
                mu_tau: set.sp.mu_tau[p_l],
                mu_phi: set.sp.mu_phi[p_l],
                mu_theta: set.sp.mu_theta[p_l],
                gamma_h: set.gamma_h[p_l],
                gamma_v: set.gamma_v[p_l],
                reliability,
                boundary: set.boundary[p_l],
                crlb_mu,
            });
        }
        paths.sort_by(|a, b| b.power().total_cmp(&a.power()));
    }
    Ok(RimaxOutcome { paths, dmc: d, diagnostics })
}

// ---------------------------------------------------------------------------
// Container driver and records
// ---------------------------------------------------------------------------

/// One extracted path in engineering units, flattened for CSV/JSON export.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PathRecord {
    pub snapshot: usize,
    pub cell_id: u16,
    pub port: u8,
    /// Rank of the path within its snapshot/port, strongest first.
    pub path_id: usize,
    pub tau_s: f64,
    pub phi_deg: f64,
    pub theta_deg: f64,
    pub mag_gamma_h: f64,
    pub mag_gamma_v: f64,
    pub power_db: f64,
    pub reliability: f64,
    pub boundary: bool,
    /// Square-root Cramer-Rao bounds in the same units as the estimates.
    pub crlb_tau_s: f64,
    pub crlb_phi_deg: f64,
    pub crlb_theta_deg: f64,
}

/// Full output of a container run: flattened records plus the per-snapshot,
/// per-port outcomes with diagnostics.
#[derive(Debug)]
pub struct EstimateRun {
    pub records: Vec<PathRecord>,
    pub outcomes: Vec<Vec<RimaxOutcome>>,
    pub dmc: Vec<Vec<DmcParams>>,
}

/// De-masked `M x N_f` observation of one snapshot and pilot port: the raw
/// resource elements multiplied by the conjugate pilot values, each antenna
/// reading the slot its switch dwell falls into.
pub fn port_observation(set: &SnapshotSet, snapshot: usize, port: usize) -> Result<DMatrix<C64>> {
    if set.scenario.bs.len() != 1 {
        return Err(Error::config(
            "estimation expects a single-cell capture; separate interfering cells first",
        ));
    }
    let m = set.m_antennas();
    let map0 = &set.layout.per_bs[0][port][0];
    let n_f = map0.positions.len();
    let mut z = DMatrix::zeros(m, n_f);
    for ant in 0..m {
        let slot = set.layout.slot_of_antenna(ant);
        let map = &set.layout.per_bs[0][port][slot];
        if map.positions.len() != n_f {
            return Err(Error::format("pilot count varies across slots"));
        }
        let block = set.block(snapshot, ant, port);
        for k in 0..n_f {
            z[(ant, k)] = block[map.positions[k]] * map.values[k].conj();
        }
    }
    Ok(z)
}

/// Runs the estimator on every snapshot and pilot port of a single-cell
/// capture (raw synthesis output or one separated stream). The receiver
/// speed comes from the truth sidecar when present, else from the scenario
/// echo; `speed_override` wins over both.
pub fn estimate_snapshot_set(
    set: &SnapshotSet,
    cfg: &RimaxConfig,
    speed_override: Option<f64>,
) -> Result<EstimateRun> {
    if set.scenario.bs.len() != 1 {
        return Err(Error::config(
            "estimation expects a single-cell capture; separate interfering cells first",
        ));
    }
    cfg.validate()?;
    let manifolds = build_port_manifolds(&set.scenario)?;
    let v = speed_override
        .or_else(|| set.truth.as_ref().map(|t| t.speed_mps))
        .unwrap_or(set.scenario.rx.speed_mps);
    let cell_id = set.scenario.bs[0].cell_id;
    // Snapshots are independent problems: estimate them in parallel and
    // flatten in snapshot order, so the output is identical for any thread
    // count.
    let per_snapshot: Vec<(Vec<PathRecord>, Vec<RimaxOutcome>, Vec<DmcParams>)> = (0..set
        .n_snapshots())
        .into_par_iter()
        .map(|t| {
            let mut recs = Vec::new();
            let mut per_port = Vec::with_capacity(set.n_ports());
            let mut dmc_port = Vec::with_capacity(set.n_ports());
            for p in 0..set.n_ports() {
                let mf = &manifolds[p];
                let z = port_observation(set, t, p)?;
                let out = rimax_estimate(&z, cfg, mf, v)?;
                for (rank, est) in out.paths.iter().enumerate() {
                    let deg = 180.0 / PI;
                    let mu_std = est.crlb_mu.map(|c| c.max(0.0).sqrt());
                    recs.push(PathRecord {
                        snapshot: t,
                        cell_id,
                        port: p as u8,
                        path_id: rank,
                        tau_s: mf.seconds_from_mu_tau(est.mu_tau),
                        phi_deg: est.mu_phi * deg,
                        theta_deg: est.mu_theta * deg,
                        mag_gamma_h: est.gamma_h.norm(),
                        mag_gamma_v: est.gamma_v.norm(),
                        power_db: 10.0 * est.power().max(1e-300).log10(),
                        reliability: est.reliability,
                        boundary: est.boundary,
                        crlb_tau_s: mu_std[0] / (TWO_PI * mf.comb_spacing_hz()),
                        crlb_phi_deg: mu_std[1] * deg,
                        crlb_theta_deg: mu_std[2] * deg,
                    });
                }
                dmc_port.push(out.dmc);
                per_port.push(out);
            }
            Ok((recs, per_port, dmc_port))
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut outcomes = Vec::with_capacity(set.n_snapshots());
    let mut dmc = Vec::with_capacity(set.n_snapshots());
    for (recs, per_port, dmc_port) in per_snapshot {
        records.extend(recs);
        outcomes.push(per_port);
        dmc.push(dmc_port);
    }
    Ok(EstimateRun { records, outcomes, dmc })
}

/// Writes path records as CSV with a fixed header.
pub fn write_records_csv(path: &Path, records: &[PathRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "snapshot,cell_id,port,path_id,tau_s,phi_deg,theta_deg,mag_gamma_h,mag_gamma_v,\
         power_db,reliability,boundary,crlb_tau_s,crlb_phi_deg,crlb_theta_deg"
    )?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{:.9e},{:.6},{:.6},{:.9e},{:.9e},{:.4},{:.4},{},{:.9e},{:.6},{:.6}",
            r.snapshot,
            r.cell_id,
            r.port,
            r.path_id,
            r.tau_s,
            r.phi_deg,
            r.theta_deg,
            r.mag_gamma_h,
            r.mag_gamma_v,
            r.power_db,
            r.reliability,
            r.boundary,
            r.crlb_tau_s,
            r.crlb_phi_deg,
            r.crlb_theta_deg
        )?;
    }
    Ok(())
}

/// Writes path records as a JSON array.
pub fn write_records_json(path: &Path, records: &[PathRecord]) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(f, records)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
