//! Synthetic stacked-ring array and its calibration model.
//!
//! The measurement system this toolkit mimics carries a cylindrical array:
//! a few vertically stacked rings of dual-polarised patch elements, sampled
//! one port at a time through a fast switch. For simulation and testing we
//! generate the per-port complex gain patterns from a smooth analytic patch
//! model (cosine-shaped azimuth lobe, mild elevation shaping, phase centre
//! at the element position) and compress them into effective-aperture
//! matrices with [`synthesize_eadf`]. Both polarisation matrices come from
//! the same geometry but deliberately different co- and cross-polar
//! shaping, so the polarimetric estimation problem stays well conditioned.
//!
//! All geometry values are configurable; whatever is used ends up echoed in
//! the output metadata of the simulator rather than being asserted anywhere.

use nalgebra::DMatrix;
use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{C64, C_LIGHT};

use super::{synthesize_eadf, ArrayManifold};

/// Mechanical layout of the stacked-ring array.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayGeometry {
    pub n_rings: usize,
    pub elems_per_ring: usize,
    /// Ring radius in metres.
    pub radius_m: f64,
    /// Vertical spacing between adjacent rings in metres.
    pub ring_spacing_m: f64,
}

impl Default for ArrayGeometry {
    fn default() -> Self {
        // 4 x 16 dual-polarised elements = 128 ports. The radius and ring
        // spacing are kept small enough that the default mode counts below
        // represent the patterns to well under a percent.
        ArrayGeometry {
            n_rings: 4,
            elems_per_ring: 16,
            radius_m: 0.055,
            ring_spacing_m: 0.022,
        }
    }
}

impl ArrayGeometry {
    pub fn n_elements(&self) -> usize {
        self.n_rings * self.elems_per_ring
    }

    /// Ports: element index major, polarisation (A then B) minor half.
    pub fn n_ports(&self) -> usize {
        2 * self.n_elements()
    }

    /// Cartesian position of element `e` in metres, array centre at origin.
    pub fn element_position(&self, e: usize) -> [f64; 3] {
        let ring = e / self.elems_per_ring;
        let pos = e % self.elems_per_ring;
        let alpha = std::f64::consts::TAU * pos as f64 / self.elems_per_ring as f64;
        let z = (ring as f64 - (self.n_rings as f64 - 1.0) / 2.0) * self.ring_spacing_m;
        [self.radius_m * alpha.cos(), self.radius_m * alpha.sin(), z]
    }

    /// Boresight azimuth of element `e`.
    pub fn element_azimuth(&self, e: usize) -> f64 {
        std::f64::consts::TAU * (e % self.elems_per_ring) as f64 / self.elems_per_ring as f64
    }
}

/// Build parameters for a synthetic calibrated manifold.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayConfig {
    pub geometry: ArrayGeometry,
    /// Carrier frequency in Hz.
    pub f_c_hz: f64,
    /// Switch dwell (slot duration) in seconds.
    pub t0_s: f64,
    /// Azimuth mode count of the aperture representation (odd centres zero).
    pub m_az: usize,
    /// Elevation mode count.
    pub m_el: usize,
    /// Angular sampling grid used for the synthesis.
    pub grid_az: usize,
    pub grid_el: usize,
    /// Worst accepted relative reconstruction error of the truncated series.
    pub recon_tol: f64,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        ArrayConfig {
            geometry: ArrayGeometry::default(),
            f_c_hz: 2.66e9,
            t0_s: 0.5e-3,
            m_az: 31,
            m_el: 15,
            grid_az: 64,
            grid_el: 32,
            recon_tol: 5e-3,
        }
    }
}

// ---------------------------------------------------------------------------
// Patch model
// ---------------------------------------------------------------------------

/// Direction cosine phase of an element at `r` for an arrival `(phi, theta)`;
/// elevation is measured from the horizon, so the direction vector is
/// `(cos t cos p, cos t sin p, sin t)` and the expression is periodic in both
/// angles, which the Fourier synthesis requires.
fn position_phase(k_wave: f64, r: [f64; 3], phi: f64, theta: f64) -> C64 {
    let u = [theta.cos() * phi.cos(), theta.cos() * phi.sin(), theta.sin()];
    Complex::from_polar(1.0, k_wave * (r[0] * u[0] + r[1] * u[1] + r[2] * u[2]))
}

fn co_a(dphi: f64, theta: f64) -> f64 {
    (0.6 + 0.4 * dphi.cos()) * (0.8 + 0.2 * theta.cos())
}

fn co_b(dphi: f64, theta: f64) -> f64 {
    (0.55 + 0.45 * dphi.cos()) * (0.75 + 0.25 * (theta - 0.2).cos())
}

fn cross(dphi: f64, theta: f64, extra: f64) -> C64 {
    let a = 0.15 * (0.5 + 0.5 * dphi.cos()) * (0.9 + 0.1 * (theta + 0.3).cos());
    Complex::from_polar(a, 0.4 + extra)
}

/// Complex gain of port `port` for an incident field of the given
/// polarisation (`true` = horizontal).
fn port_gain(geom: &ArrayGeometry, k_wave: f64, port: usize, h_pol: bool, phi: f64, theta: f64) -> C64 {
    let n = geom.n_elements();
    let e = port % n;
    let pol_a = port < n;
    let dphi = phi - geom.element_azimuth(e);
    let pos = position_phase(k_wave, geom.element_position(e), phi, theta);
    let shaped = match (pol_a, h_pol) {
        (true, true) => C64::new(co_a(dphi, theta), 0.0),
        (true, false) => cross(dphi, theta, 0.0),
        (false, true) => cross(dphi, theta, -0.2),
        (false, false) => C64::new(co_b(dphi, theta), 0.0),
    };
    shaped * pos
}

/// Gain samples of every port on the synthesis grid, one matrix per port:
/// `(h_incidence, v_incidence)`.
pub fn synthetic_pattern_samples(cfg: &ArrayConfig) -> (Vec<DMatrix<C64>>, Vec<DMatrix<C64>>) {
    let k_wave = std::f64::consts::TAU * cfg.f_c_hz / C_LIGHT;
    let sample = |port: usize, h_pol: bool| {
        DMatrix::from_fn(cfg.grid_az, cfg.grid_el, |a, b| {
            let phi = std::f64::consts::TAU * a as f64 / cfg.grid_az as f64;
            let theta = std::f64::consts::TAU * b as f64 / cfg.grid_el as f64;
            port_gain(&cfg.geometry, k_wave, port, h_pol, phi, theta)
        })
    };
    let ports = cfg.geometry.n_ports();
    (
        (0..ports).map(|p| sample(p, true)).collect(),
        (0..ports).map(|p| sample(p, false)).collect(),
    )
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

/// System frequency response: identity, or a diagonal raised-cosine band-edge
/// taper descending smoothly to 0.5 over `edge_frac` of the band at each end.
pub fn system_response(n_f: usize, edge_taper_frac: Option<f64>) -> Result<DMatrix<C64>> {
    match edge_taper_frac {
        None => Ok(DMatrix::identity(n_f, n_f)),
        Some(beta) => {
            if !(0.0 < beta && beta <= 0.5) {
                return Err(Error::config(format!("edge taper fraction {beta} outside (0, 0.5]")));
            }
            let mut g = DMatrix::<C64>::zeros(n_f, n_f);
            for n in 0..n_f {
                let d = (n.min(n_f - 1 - n)) as f64 / (n_f - 1).max(1) as f64;
                let w = if d < beta {
                    0.75 + 0.25 * (std::f64::consts::PI * (beta - d) / beta).cos()
                } else {
                    1.0
                };
                g[(n, n)] = C64::new(w, 0.0);
            }
            Ok(g)
        }
    }
}

/// Build a fully calibrated manifold for the synthetic stacked-ring array.
///
/// `n_f` and `comb_spacing_hz` describe the pilot comb this manifold will be
/// used against (one manifold per comb layout).
pub fn synthetic_manifold(
    cfg: &ArrayConfig,
    n_f: usize,
    comb_spacing_hz: f64,
    edge_taper_frac: Option<f64>,
) -> Result<ArrayManifold> {
    let (h_samples, v_samples) = synthetic_pattern_samples(cfg);
    let g_rh = synthesize_eadf(&h_samples, cfg.m_az, cfg.m_el, cfg.recon_tol)?;
    let g_rv = synthesize_eadf(&v_samples, cfg.m_az, cfg.m_el, cfg.recon_tol)?;
    let g_f = system_response(n_f, edge_taper_frac)?;
    let t_s = (0..cfg.geometry.n_ports()).map(|m| m as f64 * cfg.t0_s).collect();
    ArrayManifold::new(
        g_rh,
        g_rv,
        g_f,
        cfg.m_az,
        cfg.m_el,
        t_s,
        cfg.t0_s,
        cfg.f_c_hz,
        comb_spacing_hz,
    )
}

/// Minimal manifold for unit tests: isotropic ports (a single central mode
/// with unit coefficient for horizontal incidence, `rv_scale` for vertical),
/// identity system response, regular switch schedule.
pub fn uniform_manifold(
    m_antennas: usize,
    n_f: usize,
    comb_spacing_hz: f64,
    f_c_hz: f64,
    t0_s: f64,
    rv_scale: C64,
) -> Result<ArrayManifold> {
    let g_rh = DMatrix::from_element(m_antennas, 1, C64::new(1.0, 0.0));
    let g_rv = DMatrix::from_element(m_antennas, 1, rv_scale);
    ArrayManifold::new(
        g_rh,
        g_rv,
        DMatrix::identity(n_f, n_f),
        1,
        1,
        (0..m_antennas).map(|m| m as f64 * t0_s).collect(),
        t0_s,
        f_c_hz,
        comb_spacing_hz,
    )
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
