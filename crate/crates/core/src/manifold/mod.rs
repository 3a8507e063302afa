//! Array manifold: how a propagation path maps onto the switched array.
//!
//! A path is described by three normalised structural parameters, one per
//! sampling aperture:
//!
//! * delay     `mu_tau   = 2 pi tau df_eff` in `[0, 2pi)`, where `df_eff`
//!   is the effective frequency spacing of the observed pilot comb,
//! * azimuth   `mu_phi   = phi`   in `[-pi, pi)`,
//! * elevation `mu_theta = theta` in `[0, pi]`.
//!
//! Each aperture contributes a Vandermonde-style phase-shift matrix
//! [`steering_matrix`]; the antenna patterns enter through a pair of
//! effective-aperture matrices (`G_RH`, `G_RV`) holding truncated 2-D
//! Fourier coefficients of every port's complex gain over (azimuth,
//! elevation), one matrix per incident polarisation. Because the array
//! switches through its ports over time, receiver motion adds a
//! per-antenna Doppler phase ramp that depends on the arrival angles; the
//! angular basis therefore carries the scalar speed `v` and the Jacobians
//! pick up an extra Doppler term.
//!
//! Everything downstream (forward simulation, initialization scans,
//! gradient estimation) consumes the basis matrices and derivative blocks
//! produced here, so simulator and estimator share one model by
//! construction.

mod array;
mod eadf;

pub use array::{
    synthetic_manifold, synthetic_pattern_samples, system_response, uniform_manifold, ArrayConfig,
    ArrayGeometry,
};
pub use eadf::{eadf_response, read_eadf, synthesize_eadf, write_eadf, EadfFile};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;

use crate::error::{Error, Result};
use crate::{C64, C_LIGHT};

const TWO_PI: f64 = std::f64::consts::TAU;

// ---------------------------------------------------------------------------
// Structural parameters
// ---------------------------------------------------------------------------

/// Normalised structural parameters of a set of paths (one entry per path).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StructuralParams {
    /// Normalised delays in `[0, 2pi)`.
    pub mu_tau: Vec<f64>,
    /// Azimuths in `[-pi, pi)`.
    pub mu_phi: Vec<f64>,
    /// Elevations in `[0, pi]`.
    pub mu_theta: Vec<f64>,
}

impl StructuralParams {
    pub fn new(mu_tau: Vec<f64>, mu_phi: Vec<f64>, mu_theta: Vec<f64>) -> Result<Self> {
        let sp = StructuralParams { mu_tau, mu_phi, mu_theta };
        sp.validate()?;
        Ok(sp)
    }

    pub fn len(&self) -> usize {
        self.mu_tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu_tau.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu_phi.len() != self.mu_tau.len() || self.mu_theta.len() != self.mu_tau.len() {
            return Err(Error::dims("structural parameter vectors differ in length"));
        }
        for (i, &t) in self.mu_tau.iter().enumerate() {
            if !(0.0..TWO_PI).contains(&t) {
                return Err(Error::config(format!("mu_tau[{i}] = {t} outside [0, 2pi)")));
            }
        }
        for (i, &p) in self.mu_phi.iter().enumerate() {
            if !(-std::f64::consts::PI..std::f64::consts::PI).contains(&p) {
                return Err(Error::config(format!("mu_phi[{i}] = {p} outside [-pi, pi)")));
            }
        }
        for (i, &t) in self.mu_theta.iter().enumerate() {
            if !(0.0..=std::f64::consts::PI).contains(&t) {
                return Err(Error::config(format!("mu_theta[{i}] = {t} outside [0, pi]")));
            }
        }
        Ok(())
    }
}

/// Wrap an azimuth to `[-pi, pi)`.
pub fn wrap_phi(phi: f64) -> f64 {
    let mut p = (phi + std::f64::consts::PI).rem_euclid(TWO_PI) - std::f64::consts::PI;
    if p >= std::f64::consts::PI {
        p = -std::f64::consts::PI;
    }
    p
}

/// Wrap a normalised delay to `[0, 2pi)`.
pub fn wrap_mu_tau(mu: f64) -> f64 {
    let m = mu.rem_euclid(TWO_PI);
    if m >= TWO_PI {
        0.0
    } else {
        m
    }
}

// ---------------------------------------------------------------------------
// Phase-shift matrices
// ---------------------------------------------------------------------------

/// Phase-shift (steering) matrix of one sampling aperture: entry `(k, l)` is
/// `exp(j (k - floor(m_i/2)) mu[l])` for `k = 0..m_i`, so the exponents run
/// symmetrically from `-floor(m_i/2)` to `ceil(m_i/2) - 1`.
pub fn steering_matrix(mu: &[f64], m_i: usize) -> DMatrix<C64> {
    let half = (m_i / 2) as f64;
    DMatrix::from_fn(m_i, mu.len(), |k, l| {
        Complex::from_polar(1.0, (k as f64 - half) * mu[l])
    })
}

/// Derivative of [`steering_matrix`] with respect to each column's `mu`:
/// `j Xi A(mu)` where `Xi` is the diagonal of exponents.
pub fn steering_derivative(mu: &[f64], m_i: usize) -> DMatrix<C64> {
    let half = (m_i / 2) as f64;
    DMatrix::from_fn(m_i, mu.len(), |k, l| {
        let e = k as f64 - half;
        Complex::from_polar(1.0, e * mu[l]) * Complex::new(0.0, e)
    })
}

/// Column-wise Kronecker (Khatri-Rao) product of two matrices with an equal
/// column count: column `l` of the result is `a[:,l] kron b[:,l]`.
pub fn khatri_rao(a: &DMatrix<C64>, b: &DMatrix<C64>) -> DMatrix<C64> {
    assert_eq!(a.ncols(), b.ncols(), "khatri_rao: column counts differ");
    let (ma, mb, l) = (a.nrows(), b.nrows(), a.ncols());
    DMatrix::from_fn(ma * mb, l, |row, col| {
        let ia = row / mb;
        let ib = row % mb;
        a[(ia, col)] * b[(ib, col)]
    })
}

// ---------------------------------------------------------------------------
// Array manifold
// ---------------------------------------------------------------------------

/// Basis matrices of a path set: the angular factors are `M x L` (Doppler
/// phase included), the delay factor is `N_f x L`. The full response of path
/// `l` is `(b_rh[:,l] kron b_f[:,l]) gamma_h[l] + (b_rv[:,l] kron b_f[:,l])
/// gamma_v[l]`, flattened antenna-major.
#[derive(Clone, Debug)]
pub struct Basis {
    pub b_rh: DMatrix<C64>,
    pub b_rv: DMatrix<C64>,
    pub b_f: DMatrix<C64>,
}

/// Angular derivative blocks (Doppler term included), each `M x L`.
#[derive(Clone, Debug)]
pub struct AngularJacobian {
    pub d_rh_phi: DMatrix<C64>,
    pub d_rh_theta: DMatrix<C64>,
    pub d_rv_phi: DMatrix<C64>,
    pub d_rv_theta: DMatrix<C64>,
}

/// Calibrated description of the switched array and its observed comb.
#[derive(Clone, Debug)]
pub struct ArrayManifold {
    /// Effective aperture for horizontally polarised incidence, `M x (m_az*m_el)`.
    g_rh: DMatrix<C64>,
    /// Effective aperture for vertically polarised incidence.
    g_rv: DMatrix<C64>,
    /// System frequency response, `n_f x m_tau`. Identity when uncalibrated.
    g_f: DMatrix<C64>,
    /// Switch start time of each antenna in seconds, strictly increasing.
    t_s: Vec<f64>,
    /// Switch dwell (slot duration) in seconds; phase normalisation interval.
    t0_s: f64,
    /// Carrier frequency in Hz.
    f_c_hz: f64,
    /// Effective frequency spacing of the observed pilot comb in Hz.
    comb_spacing_hz: f64,
    m_az: usize,
    m_el: usize,
}

impl ArrayManifold {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        g_rh: DMatrix<C64>,
        g_rv: DMatrix<C64>,
        g_f: DMatrix<C64>,
        m_az: usize,
        m_el: usize,
        t_s: Vec<f64>,
        t0_s: f64,
        f_c_hz: f64,
        comb_spacing_hz: f64,
    ) -> Result<Self> {
        if m_az == 0 || m_el == 0 {
            return Err(Error::config("mode counts must be positive"));
        }
        if g_rh.ncols() != m_az * m_el || g_rv.ncols() != m_az * m_el {
            return Err(Error::dims(format!(
                "aperture matrices must have m_az*m_el = {} columns, got {} / {}",
                m_az * m_el,
                g_rh.ncols(),
                g_rv.ncols()
            )));
        }
        if g_rh.nrows() != g_rv.nrows() || g_rh.nrows() == 0 {
            return Err(Error::dims("aperture matrices must share a positive port count"));
        }
        if t_s.len() != g_rh.nrows() {
            return Err(Error::dims(format!(
                "switch schedule has {} entries for {} ports",
                t_s.len(),
                g_rh.nrows()
            )));
        }
        if t_s.iter().any(|t| !t.is_finite()) || t_s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("switch times must be finite and strictly increasing"));
        }
        if !(t0_s > 0.0) || !(f_c_hz > 0.0) || !(comb_spacing_hz > 0.0) {
            return Err(Error::config("t0_s, f_c_hz and comb_spacing_hz must be positive"));
        }
        if g_f.nrows() == 0 || g_f.ncols() == 0 {
            return Err(Error::dims("g_f must be non-empty"));
        }
        Ok(ArrayManifold {
            g_rh,
            g_rv,
            g_f,
            t_s,
            t0_s,
            f_c_hz,
            comb_spacing_hz,
            m_az,
            m_el,
        })
    }

    pub fn m_antennas(&self) -> usize {
        self.g_rh.nrows()
    }
    pub fn n_f(&self) -> usize {
        self.g_f.nrows()
    }
    pub fn m_tau(&self) -> usize {
        self.g_f.ncols()
    }
    pub fn m_az(&self) -> usize {
        self.m_az
    }
    pub fn m_el(&self) -> usize {
        self.m_el
    }
    pub fn f_c_hz(&self) -> f64 {
        self.f_c_hz
    }
    pub fn t0_s(&self) -> f64 {
        self.t0_s
    }
    pub fn t_s(&self) -> &[f64] {
        &self.t_s
    }
    pub fn comb_spacing_hz(&self) -> f64 {
        self.comb_spacing_hz
    }
    pub fn g_rh(&self) -> &DMatrix<C64> {
        &self.g_rh
    }
    pub fn g_rv(&self) -> &DMatrix<C64> {
        &self.g_rv
    }
    pub fn g_f(&self) -> &DMatrix<C64> {
        &self.g_f
    }

    /// Largest unambiguously resolvable delay, `1 / comb_spacing`.
    pub fn unambiguous_delay_s(&self) -> f64 {
        1.0 / self.comb_spacing_hz
    }

    /// Normalised delay for a physical delay in seconds.
    pub fn mu_tau_from_seconds(&self, tau_s: f64) -> f64 {
        wrap_mu_tau(TWO_PI * tau_s * self.comb_spacing_hz)
    }

    /// Physical delay in seconds for a normalised delay.
    pub fn seconds_from_mu_tau(&self, mu_tau: f64) -> f64 {
        mu_tau / (TWO_PI * self.comb_spacing_hz)
    }

    /// Doppler phase accumulated over one dwell by a receiver moving at `v`
    /// m/s towards azimuth 0, for a path from `(phi, theta)`:
    /// `f = (2 pi f_c v t0 / c) cos(phi) cos(theta)` radians.
    pub fn doppler_rate(&self, v: f64, phi: f64, theta: f64) -> f64 {
        self.doppler_scale(v) * phi.cos() * theta.cos()
    }

    fn doppler_scale(&self, v: f64) -> f64 {
        TWO_PI * self.f_c_hz * v * self.t0_s / C_LIGHT
    }

    /// Doppler phase matrix `A_t`, `M x L`: entry `(m, l)` is
    /// `exp(j (t_m / t0) f(v, phi_l, theta_l))`.
    pub fn doppler_phase(&self, v: f64, phi: &[f64], theta: &[f64]) -> DMatrix<C64> {
        assert_eq!(phi.len(), theta.len());
        let m = self.m_antennas();
        let mut out = DMatrix::zeros(m, phi.len());
        for l in 0..phi.len() {
            let f = self.doppler_rate(v, phi[l], theta[l]);
            for (row, &t) in self.t_s.iter().enumerate() {
                out[(row, l)] = Complex::from_polar(1.0, t / self.t0_s * f);
            }
        }
        out
    }

    /// Derivatives of [`Self::doppler_phase`] with respect to azimuth and
    /// elevation: `(j Psi ⊙ A_t, j Phi ⊙ A_t)` where `Psi` / `Phi` hold
    /// `(t_m / t0)` times the angle derivative of the Doppler rate.
    pub fn doppler_derivatives(
        &self,
        v: f64,
        phi: &[f64],
        theta: &[f64],
    ) -> (DMatrix<C64>, DMatrix<C64>) {
        assert_eq!(phi.len(), theta.len());
        let m = self.m_antennas();
        let scale = self.doppler_scale(v);
        let mut d_phi = DMatrix::zeros(m, phi.len());
        let mut d_theta = DMatrix::zeros(m, phi.len());
        for l in 0..phi.len() {
            let f = scale * phi[l].cos() * theta[l].cos();
            let df_dphi = -scale * phi[l].sin() * theta[l].cos();
            let df_dtheta = -scale * phi[l].cos() * theta[l].sin();
            for (row, &t) in self.t_s.iter().enumerate() {
                let r = t / self.t0_s;
                let a = Complex::from_polar(1.0, r * f);
                d_phi[(row, l)] = Complex::new(0.0, r * df_dphi) * a;
                d_theta[(row, l)] = Complex::new(0.0, r * df_dtheta) * a;
            }
        }
        (d_phi, d_theta)
    }

    /// Angular response without motion: `G (A(phi) ⋄ A(theta))`, `M x L`.
    pub fn angular_response(&self, g: &DMatrix<C64>, phi: &[f64], theta: &[f64]) -> DMatrix<C64> {
        let a_phi = steering_matrix(phi, self.m_az);
        let a_theta = steering_matrix(theta, self.m_el);
        g * khatri_rao(&a_phi, &a_theta)
    }

    /// Delay basis `B_f = G_f A(-mu_tau)`, `n_f x L`.
    pub fn delay_basis(&self, mu_tau: &[f64]) -> DMatrix<C64> {
        let neg: Vec<f64> = mu_tau.iter().map(|&t| -t).collect();
        &self.g_f * steering_matrix(&neg, self.m_tau())
    }

    /// Derivative of the delay basis with respect to `mu_tau`
    /// (`-j G_f Xi A(-mu_tau)` columnwise).
    pub fn delay_basis_derivative(&self, mu_tau: &[f64]) -> DMatrix<C64> {
        let neg: Vec<f64> = mu_tau.iter().map(|&t| -t).collect();
        let d = steering_derivative(&neg, self.m_tau());
        &self.g_f * d.map(|x| -x)
    }

    /// Full polarimetric basis of a path set at receiver speed `v`:
    /// `B_RH = [G_RH (A(phi) ⋄ A(theta))] ⊙ A_t` and likewise for `B_RV`,
    /// plus the delay factor.
    pub fn polarimetric_basis(&self, sp: &StructuralParams, v: f64) -> Result<Basis> {
        sp.validate()?;
        let a_t = self.doppler_phase(v, &sp.mu_phi, &sp.mu_theta);
        let b_rh = self
            .angular_response(&self.g_rh, &sp.mu_phi, &sp.mu_theta)
            .component_mul(&a_t);
        let b_rv = self
            .angular_response(&self.g_rv, &sp.mu_phi, &sp.mu_theta)
            .component_mul(&a_t);
        let b_f = self.delay_basis(&sp.mu_tau);
        Ok(Basis { b_rh, b_rv, b_f })
    }

    /// Angular derivative blocks of the polarimetric basis. Each block is the
    /// product rule across the aperture term and the Doppler term:
    /// `D_RH^phi = [G_RH (D(phi) ⋄ A(theta))] ⊙ A_t
    ///           + [G_RH (A(phi) ⋄ A(theta))] ⊙ D_t^phi`.
    pub fn angular_jacobian_blocks(
        &self,
        sp: &StructuralParams,
        v: f64,
    ) -> Result<AngularJacobian> {
        sp.validate()?;
        let a_phi = steering_matrix(&sp.mu_phi, self.m_az);
        let a_theta = steering_matrix(&sp.mu_theta, self.m_el);
        let d_phi = steering_derivative(&sp.mu_phi, self.m_az);
        let d_theta = steering_derivative(&sp.mu_theta, self.m_el);
        let a_t = self.doppler_phase(v, &sp.mu_phi, &sp.mu_theta);
        let (dt_phi, dt_theta) = self.doppler_derivatives(v, &sp.mu_phi, &sp.mu_theta);

        let kr_aa = khatri_rao(&a_phi, &a_theta);
        let kr_da = khatri_rao(&d_phi, &a_theta);
        let kr_ad = khatri_rao(&a_phi, &d_theta);

        let block = |g: &DMatrix<C64>, kr_deriv: &DMatrix<C64>, dt: &DMatrix<C64>| {
            (g * kr_deriv).component_mul(&a_t) + (g * &kr_aa).component_mul(dt)
        };
        Ok(AngularJacobian {
            d_rh_phi: block(&self.g_rh, &kr_da, &dt_phi),
            d_rh_theta: block(&self.g_rh, &kr_ad, &dt_theta),
            d_rv_phi: block(&self.g_rv, &kr_da, &dt_phi),
            d_rv_theta: block(&self.g_rv, &kr_ad, &dt_theta),
        })
    }

    /// Response of every port to a single arrival, Doppler included; column
    /// vector of length `M` per polarisation.
    pub fn port_response(
        &self,
        phi: f64,
        theta: f64,
        v: f64,
    ) -> (DVector<C64>, DVector<C64>) {
        let sp = StructuralParams {
            mu_tau: vec![0.0],
            mu_phi: vec![phi],
            mu_theta: vec![theta],
        };
        let a_t = self.doppler_phase(v, &sp.mu_phi, &sp.mu_theta);
        let h = self
            .angular_response(&self.g_rh, &sp.mu_phi, &sp.mu_theta)
            .component_mul(&a_t);
        let vv = self
            .angular_response(&self.g_rv, &sp.mu_phi, &sp.mu_theta)
            .component_mul(&a_t);
        (h.column(0).into_owned(), vv.column(0).into_owned())
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
