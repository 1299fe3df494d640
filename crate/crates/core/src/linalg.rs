//! Small dense complex linear-algebra helpers on top of `ndarray`.

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;

pub type CMatrix = Array2<Complex64>;

pub fn identity(n: usize) -> CMatrix {
    Array2::from_diag_elem(n, Complex64::new(1.0, 0.0))
}

/// `h · psi · hᵗ` (plain transpose, not adjoint): the two-photon congruence.
pub fn congruence(h: ArrayView2<Complex64>, psi: ArrayView2<Complex64>) -> CMatrix {
    h.dot(&psi).dot(&h.t())
}

/// Kronecker product `a ⊗ b`, with `a` acting on the slow (row) index.
pub fn kron(a: ArrayView2<Complex64>, b: ArrayView2<Complex64>) -> CMatrix {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    Array2::from_shape_fn((ar * br, ac * bc), |(i, j)| {
        a[[i / br, j / bc]] * b[[i % br, j % bc]]
    })
}

pub fn adjoint(m: ArrayView2<Complex64>) -> CMatrix {
    m.t().mapv(|z| z.conj())
}

/// Largest elementwise deviation of `m · m†` from the identity.
pub fn unitarity_defect(m: ArrayView2<Complex64>) -> f64 {
    let prod = m.dot(&adjoint(m));
    prod.indexed_iter()
        .map(|((i, j), z)| {
            let target = if i == j { 1.0 } else { 0.0 };
            (z - Complex64::new(target, 0.0)).norm()
        })
        .fold(0.0, f64::max)
}

pub fn max_abs_diff(a: ArrayView2<Complex64>, b: ArrayView2<Complex64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

/// Σ |m_ij|².
pub fn mass(m: ArrayView2<Complex64>) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum()
}

/// Multiply column `k` by `d[k]`, i.e. `m · diag(d)`.
pub fn scale_columns(m: &mut CMatrix, d: &[Complex64]) {
    for (mut col, &s) in m.columns_mut().into_iter().zip(d) {
        col.mapv_inplace(|z| z * s);
    }
}
