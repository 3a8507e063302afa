//! Effective-aperture synthesis and calibration-file handling.
//!
//! An effective-aperture matrix stores, per port, the 2-D Fourier
//! coefficients of the complex element gain over azimuth and elevation.
//! Given gain samples on a regular angular grid covering one full period in
//! both angles, the synthesis is a truncated 2-D DFT; the response at an
//! arbitrary angle is then the matching Fourier series, which is exactly
//! what the steering-matrix formulation of the manifold evaluates.
//!
//! The calibration container is a flat little-endian binary file:
//!
//! ```text
//! magic  "EADF1"                      5 bytes
//! u32    version (1)
//! u32    ports M
//! u32    azimuth modes m_az
//! u32    elevation modes m_el
//! u32    n_f   (0 when no system frequency response is stored)
//! u32    m_tau (0 when no system frequency response is stored)
//! c64    G_RH, row-major M x (m_az*m_el), interleaved f32 re/im
//! c64    G_RV, same shape
//! c64    G_f,  row-major n_f x m_tau, only when n_f > 0
//! ```

use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::C64;

const MAGIC: &[u8; 5] = b"EADF1";
const VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Synthesis
// ---------------------------------------------------------------------------

/// Build an effective-aperture matrix from per-port gain samples.
///
/// `samples[m]` holds port `m`'s complex gain on a regular grid:
/// `n_az` rows at azimuths `2 pi a / n_az` and `n_el` columns at elevations
/// `2 pi b / n_el` (the elevation pattern must be supplied over its full
/// periodic extension). The returned matrix is `M x (m_az * m_el)` with the
/// azimuth mode index major, matching the Khatri-Rao ordering of the
/// steering matrices.
///
/// After truncation to `(m_az, m_el)` modes the series is re-evaluated on
/// the sample grid; if the worst-case relative reconstruction error exceeds
/// `tol` the grid is too coarse (or the mode count too small) and an error
/// is returned.
pub fn synthesize_eadf(
    samples: &[DMatrix<C64>],
    m_az: usize,
    m_el: usize,
    tol: f64,
) -> Result<DMatrix<C64>> {
    if samples.is_empty() {
        return Err(Error::config("synthesize_eadf: no pattern samples"));
    }
    let (n_az, n_el) = samples[0].shape();
    if samples.iter().any(|s| s.shape() != (n_az, n_el)) {
        return Err(Error::dims("synthesize_eadf: pattern grids differ in shape"));
    }
    if m_az == 0 || m_el == 0 {
        return Err(Error::config("synthesize_eadf: mode counts must be positive"));
    }
    if m_az > n_az || m_el > n_el {
        return Err(Error::config(format!(
            "synthesize_eadf: grid {n_az}x{n_el} cannot resolve {m_az}x{m_el} modes"
        )));
    }

    let mut planner = FftPlanner::<f64>::new();
    let fft_az = planner.plan_fft_forward(n_az);
    let fft_el = planner.plan_fft_forward(n_el);
    let ifft_az = planner.plan_fft_inverse(n_az);
    let ifft_el = planner.plan_fft_inverse(n_el);

    let mut g = DMatrix::<C64>::zeros(samples.len(), m_az * m_el);
    let norm = 1.0 / (n_az * n_el) as f64;
    let half_az = (m_az / 2) as i64;
    let half_el = (m_el / 2) as i64;

    let mut worst_rel = 0.0f64;
    for (port, pat) in samples.iter().enumerate() {
        // forward 2-D DFT: rows (elevation direction) first, then columns
        let mut work: Vec<Vec<C64>> = (0..n_az)
            .map(|a| (0..n_el).map(|b| pat[(a, b)]).collect())
            .collect();
        for row in work.iter_mut() {
            fft_el.process(row);
        }
        let mut cols: Vec<Vec<C64>> = (0..n_el)
            .map(|b| (0..n_az).map(|a| work[a][b]).collect())
            .collect();
        for col in cols.iter_mut() {
            fft_az.process(col);
        }
        // coefficient for mode (n, k): forward-DFT bin (n mod n_az, k mod n_el)
        for (ia, na) in mode_range(m_az, half_az).enumerate() {
            let bin_a = na.rem_euclid(n_az as i64) as usize;
            for (ie, ke) in mode_range(m_el, half_el).enumerate() {
                let bin_e = ke.rem_euclid(n_el as i64) as usize;
                g[(port, ia * m_el + ie)] = cols[bin_e][bin_a] * norm;
            }
        }
        // reconstruction check on the sample grid: embed the kept modes back
        // into their DFT bins and inverse-transform (an unnormalised inverse
        // FFT is exactly the series evaluated at the grid angles)
        let mut embed: Vec<Vec<C64>> = vec![vec![C64::new(0.0, 0.0); n_az]; n_el];
        for (ia, na) in mode_range(m_az, half_az).enumerate() {
            let bin_a = na.rem_euclid(n_az as i64) as usize;
            for (ie, ke) in mode_range(m_el, half_el).enumerate() {
                let bin_e = ke.rem_euclid(n_el as i64) as usize;
                embed[bin_e][bin_a] = g[(port, ia * m_el + ie)];
            }
        }
        for col in embed.iter_mut() {
            ifft_az.process(col);
        }
        let mut rows: Vec<Vec<C64>> = (0..n_az)
            .map(|a| (0..n_el).map(|bin_e| embed[bin_e][a]).collect())
            .collect();
        for row in rows.iter_mut() {
            ifft_el.process(row);
        }
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for a in 0..n_az {
            for b in 0..n_el {
                num += (rows[a][b] - pat[(a, b)]).norm_sqr();
                den += pat[(a, b)].norm_sqr();
            }
        }
        if den > 0.0 {
            worst_rel = worst_rel.max((num / den).sqrt());
        }
    }
    if worst_rel > tol {
        return Err(Error::numerical(format!(
            "synthesize_eadf: reconstruction error {worst_rel:.3e} exceeds tolerance {tol:.3e}; \
             the angular grid is too coarse for the requested mode count"
        )));
    }
    Ok(g)
}

fn mode_range(count: usize, half: i64) -> impl Iterator<Item = i64> {
    (0..count as i64).map(move |k| k - half)
}

/// Evaluate one port's truncated Fourier series at an arbitrary angle.
/// Row `port` of `g` must be laid out azimuth-mode major.
pub fn eadf_response(g: &DMatrix<C64>, m_az: usize, m_el: usize, phi: f64, theta: f64) -> Vec<C64> {
    let half_az = (m_az / 2) as i64;
    let half_el = (m_el / 2) as i64;
    let mut out = vec![C64::new(0.0, 0.0); g.nrows()];
    for (ia, na) in mode_range(m_az, half_az).enumerate() {
        let ea = Complex::from_polar(1.0, na as f64 * phi);
        for (ie, ke) in mode_range(m_el, half_el).enumerate() {
            let ee = Complex::from_polar(1.0, ke as f64 * theta);
            let w = ea * ee;
            for (port, o) in out.iter_mut().enumerate() {
                *o += g[(port, ia * m_el + ie)] * w;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Calibration file
// ---------------------------------------------------------------------------

/// In-memory contents of a calibration file.
#[derive(Clone, Debug)]
pub struct EadfFile {
    pub g_rh: DMatrix<C64>,
    pub g_rv: DMatrix<C64>,
    pub m_az: usize,
    pub m_el: usize,
    /// Optional system frequency response.
    pub g_f: Option<DMatrix<C64>>,
}

fn write_matrix(buf: &mut Vec<u8>, m: &DMatrix<C64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            buf.extend_from_slice(&(m[(r, c)].re as f32).to_le_bytes());
            buf.extend_from_slice(&(m[(r, c)].im as f32).to_le_bytes());
        }
    }
}

fn read_matrix(bytes: &[u8], pos: &mut usize, rows: usize, cols: usize) -> Result<DMatrix<C64>> {
    let need = rows * cols * 8;
    if bytes.len() < *pos + need {
        return Err(Error::format("calibration file truncated"));
    }
    let mut m = DMatrix::<C64>::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let re = f32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
            let im = f32::from_le_bytes(bytes[*pos + 4..*pos + 8].try_into().unwrap());
            m[(r, c)] = C64::new(re as f64, im as f64);
            *pos += 8;
        }
    }
    Ok(m)
}

pub fn write_eadf(path: &Path, file: &EadfFile) -> Result<()> {
    let m = file.g_rh.nrows();
    if file.g_rv.nrows() != m
        || file.g_rh.ncols() != file.m_az * file.m_el
        || file.g_rv.ncols() != file.m_az * file.m_el
    {
        return Err(Error::dims("write_eadf: inconsistent matrix shapes"));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        m as u32,
        file.m_az as u32,
        file.m_el as u32,
        file.g_f.as_ref().map_or(0, |g| g.nrows() as u32),
        file.g_f.as_ref().map_or(0, |g| g.ncols() as u32),
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_matrix(&mut buf, &file.g_rh);
    write_matrix(&mut buf, &file.g_rv);
    if let Some(g_f) = &file.g_f {
        write_matrix(&mut buf, g_f);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_eadf(path: &Path) -> Result<EadfFile> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 5 + 6 * 4 || &bytes[..5] != MAGIC {
        return Err(Error::format("not a calibration file (bad magic)"));
    }
    let mut pos = 5;
    let next_u32 = |pos: &mut usize| {
        let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        v
    };
    let version = next_u32(&mut pos);
    if version != VERSION {
        return Err(Error::format(format!("unsupported calibration version {version}")));
    }
    let m = next_u32(&mut pos) as usize;
    let m_az = next_u32(&mut pos) as usize;
    let m_el = next_u32(&mut pos) as usize;
    let n_f = next_u32(&mut pos) as usize;
    let m_tau = next_u32(&mut pos) as usize;
    if m == 0 || m_az == 0 || m_el == 0 {
        return Err(Error::format("calibration header has zero dimensions"));
    }
    let g_rh = read_matrix(&bytes, &mut pos, m, m_az * m_el)?;
    let g_rv = read_matrix(&bytes, &mut pos, m, m_az * m_el)?;
    let g_f = if n_f > 0 {
        Some(read_matrix(&bytes, &mut pos, n_f, m_tau)?)
    } else {
        None
    };
    if pos != bytes.len() {
        return Err(Error::format("calibration file has trailing bytes"));
    }
    Ok(EadfFile { g_rh, g_rv, m_az, m_el, g_f })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
