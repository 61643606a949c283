//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// (A + Aᵀ) / 2
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Row-major upper triangle, d·(d+1)/2 entries.
pub fn pack_upper(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in i..d {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Inverse of [`pack_upper`]; mirrors the upper triangle into the lower one.
pub fn unpack_upper(d: usize, packed: &[f64]) -> DMatrix<f64> {
    debug_assert_eq!(packed.len(), d * (d + 1) / 2);
    let mut m = DMatrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in i..d {
            m[(i, j)] = packed[k];
            m[(j, i)] = packed[k];
            k += 1;
        }
    }
    m
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Symmetric within `tol` and no eigenvalue below `-tol`.
pub fn is_symmetric_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    let asym = (m - m.transpose()).amax();
    asym <= tol && min_eigenvalue(m) >= -tol
}

/// max |a - b| / max(max |b|, floor): a scale-aware relative error for vectors and matrices.
pub fn rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(floor, |acc, v| acc.max(v.abs()));
    a.iter()
        .zip(b)
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
        / scale
}

pub fn outer(v: &DVector<f64>) -> DMatrix<f64> {
    v * v.transpose()
}
