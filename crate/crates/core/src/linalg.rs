//! Small dense linear-algebra helpers shared by the simulator and the
//! estimators: Hermitian eigendecompositions with deterministic ordering,
//! damped Hermitian solves, and a couple of vector conveniences.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::C64;

/// Eigendecomposition of a Hermitian matrix with eigenvalues sorted in
/// descending order. The input is symmetrised first so that tiny round-off
/// asymmetry from accumulated updates cannot leak into complex eigenvalues.
pub fn hermitian_eig_desc(a: &DMatrix<C64>) -> Result<(DMatrix<C64>, DVector<f64>)> {
    if a.nrows() != a.ncols() {
        return Err(Error::dims(format!(
            "hermitian_eig_desc: matrix is {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let n = a.nrows();
    let mut h = a.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (h[(i, j)] + h[(j, i)].conj());
            h[(i, j)] = m;
            h[(j, i)] = m.conj();
        }
        h[(i, i)] = C64::new(h[(i, i)].re, 0.0);
    }
    let eig = h.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .expect("eigenvalue is NaN")
    });
    let mut u = DMatrix::<C64>::zeros(n, n);
    let mut vals = DVector::<f64>::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        u.set_column(dst, &eig.eigenvectors.column(src));
        vals[dst] = eig.eigenvalues[src];
    }
    Ok((u, vals))
}

/// Solve (A + damping I) x = b for Hermitian positive semi-definite A.
/// Falls back to progressively larger jitter when the Cholesky fails; the
/// caller gets an error only if even a heavily regularised solve is
/// impossible, which for a finite input means NaNs.
pub fn solve_hermitian_damped(
    a: &DMatrix<C64>,
    b: &DVector<C64>,
    damping: f64,
) -> Result<DVector<C64>> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(Error::dims("solve_hermitian_damped: shape mismatch"));
    }
    let scale = a.diagonal().iter().map(|d| d.re.abs()).fold(0.0, f64::max);
    let mut jitter = damping.max(0.0);
    for _ in 0..8 {
        let mut m = a.clone();
        for i in 0..n {
            m[(i, i)] += C64::new(jitter, 0.0);
        }
        if let Some(chol) = m.cholesky() {
            return Ok(chol.solve(b));
        }
        jitter = if jitter > 0.0 {
            jitter * 100.0
        } else {
            1e-14 * scale.max(1e-300)
        };
    }
    Err(Error::numerical(
        "solve_hermitian_damped: Cholesky failed at maximum regularisation",
    ))
}

/// Squared Euclidean norm of a complex slice.
pub fn energy(v: &[C64]) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum()
}

/// Hermitian inner product conj(a) . b.
pub fn inner(a: &DVector<C64>, b: &DVector<C64>) -> C64 {
    a.dotc(b)
}
