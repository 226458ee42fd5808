//! Small dense linear-algebra and scalar helpers shared by the modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(x)) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// ½(A + Aᵀ).
pub fn symmetrize(a: &Mat) -> Mat {
    let mut out = a.clone();
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order
/// and each eigenvector's first significant component made positive.
pub fn sym_eigen_desc(a: &Mat) -> (Vector, Mat) {
    let n = a.nrows();
    let eig = symmetrize(a).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut values = Vector::zeros(n);
    let mut vectors = Mat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = eig.eigenvalues[src];
        let mut col = eig.eigenvectors.column(src).into_owned();
        let scale = col.amax();
        if let Some(first) = col.iter().find(|v| v.abs() > 1e-8 * scale) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
        vectors.set_column(dst, &col);
    }
    (values, vectors)
}

/// Symmetrize, then floor eigenvalues at `rel_floor · λ_max` when the smallest
/// one falls below it.
pub fn spd_repair(a: &Mat, rel_floor: f64) -> Mat {
    let sym = symmetrize(a);
    let (values, vectors) = sym_eigen_desc(&sym);
    let n = values.len();
    if n == 0 {
        return sym;
    }
    let floor = rel_floor * values[0].max(0.0);
    if values[n - 1] >= floor && values[n - 1] > 0.0 {
        return sym;
    }
    let floor = if floor > 0.0 { floor } else { f64::MIN_POSITIVE.sqrt() };
    let clipped = values.map(|v| v.max(floor));
    symmetrize(&(&vectors * Mat::from_diagonal(&clipped) * vectors.transpose()))
}

pub fn cholesky(a: &Mat, what: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    symmetrize(a)
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

pub fn logdet_spd(a: &Mat, what: &str) -> Result<f64> {
    let chol = cholesky(a, what)?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

pub fn inv_spd(a: &Mat, what: &str) -> Result<Mat> {
    let chol = cholesky(a, what)?;
    Ok(symmetrize(&chol.inverse()))
}

pub fn all_finite(a: &Mat) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Condition number of a symmetric PSD matrix (∞ when singular).
pub fn condition_number(a: &Mat) -> f64 {
    let (values, _) = sym_eigen_desc(a);
    let max = values[0];
    let min = values[values.len() - 1];
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Pairwise (tree) summation for order-independent accuracy.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 16 {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}
