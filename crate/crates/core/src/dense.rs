//! Small dense kernels on top of nalgebra: truncated bases, orthogonal
//! completion, and QR with a rank check.

use nalgebra::{DMatrix, DVector};

/// Result of a truncated left-singular-subspace computation.
#[derive(Debug, Clone)]
pub struct Truncation {
    /// Orthonormal columns spanning the kept subspace (`m x k`).
    pub basis: DMatrix<f64>,
    /// All computed singular values, descending.
    pub singular_values: Vec<f64>,
    /// True when the rank cap cut off singular values above the tolerance.
    pub capped: bool,
}

impl Truncation {
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }
}

/// Left singular vectors of `m` with `sigma_k >= eps * sigma_1`, keeping at most `max_rank`.
///
/// Wide inputs are first reduced by a Householder QR of the transpose so the
/// SVD only ever sees a square factor of the row dimension.
pub fn truncated_left_basis(m: &DMatrix<f64>, eps: f64, max_rank: usize) -> Truncation {
    let rows = m.nrows();
    if rows == 0 || m.ncols() == 0 {
        return Truncation { basis: DMatrix::zeros(rows, 0), singular_values: vec![], capped: false };
    }
    let core = if m.ncols() > rows {
        // m^T = Q R  =>  m = R^T Q^T, and R^T shares m's left singular vectors
        m.transpose().qr().r().transpose()
    } else {
        m.clone()
    };
    let svd = core.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let sigma1 = sv.first().copied().unwrap_or(0.0);
    let keep = if sigma1 > 0.0 { sv.iter().take_while(|&&s| s >= eps * sigma1).count() } else { 0 };
    let rank = keep.min(max_rank);
    let mut basis = DMatrix::zeros(rows, rank);
    for (c, &src) in order.iter().take(rank).enumerate() {
        basis.set_column(c, &u.column(src));
    }
    Truncation { basis, singular_values: sv, capped: keep > rank }
}

/// Extends an `m x k` matrix with orthonormal columns to an `m x m`
/// orthogonal matrix whose first `k` columns are exactly the input.
pub fn orthogonal_completion(q: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, k) = q.shape();
    if k == 0 {
        return DMatrix::identity(m, m);
    }
    let mut full = DMatrix::identity(m, m);
    if k < m {
        let qr = q.clone().qr();
        // applying the reflectors to the identity yields the full orthogonal factor (transposed)
        qr.q_tr_mul(&mut full);
        full.transpose_mut();
    }
    full.view_mut((0, 0), (m, k)).copy_from(q);
    full
}

/// `||Q^T Q - I||_F`.
pub fn orthogonality_defect(q: &DMatrix<f64>) -> f64 {
    let k = q.ncols();
    (q.transpose() * q - DMatrix::<f64>::identity(k, k)).norm()
}

/// Orthonormalization of a (possibly rank-deficient) basis.
///
/// Returns `(q, x)` with `basis ≈ q * x`, `q` orthonormal with `r <= k`
/// columns. `x` is upper triangular unless the rank had to be reduced.
pub fn orthonormalize(basis: &DMatrix<f64>, rank_tol: f64) -> (DMatrix<f64>, DMatrix<f64>, bool) {
    let (m, k) = basis.shape();
    if k == 0 {
        return (DMatrix::zeros(m, 0), DMatrix::zeros(0, 0), false);
    }
    if k <= m {
        let qr = basis.clone().qr();
        let r = qr.r();
        let scale = r.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let deficient = scale == 0.0 || r.diagonal().iter().any(|v| v.abs() <= rank_tol * scale);
        if !deficient {
            return (qr.q(), r, false);
        }
    }
    let svd = basis.clone().svd(true, true);
    let u = svd.u.expect("requested");
    let vt = svd.v_t.expect("requested");
    let s1 = svd.singular_values.max();
    let kept: Vec<usize> =
        (0..svd.singular_values.len()).filter(|&i| s1 > 0.0 && svd.singular_values[i] > rank_tol * s1).collect();
    let mut q = DMatrix::zeros(m, kept.len());
    let mut x = DMatrix::zeros(kept.len(), k);
    for (c, &i) in kept.iter().enumerate() {
        q.set_column(c, &u.column(i));
        x.set_row(c, &(vt.row(i) * svd.singular_values[i]));
    }
    (q, x, kept.len() < k)
}

/// Symmetric eigenvalue-based spectral condition number `max|λ| / min|λ|`.
pub fn symmetric_condition_number(a: &DMatrix<f64>) -> f64 {
    let eig = a.clone().symmetric_eigenvalues();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for v in eig.iter() {
        lo = lo.min(v.abs());
        hi = hi.max(v.abs());
    }
    hi / lo
}

pub fn relative_error(approx: &DVector<f64>, exact: &DVector<f64>) -> f64 {
    (approx - exact).norm() / exact.norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo_random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        DMatrix::from_fn(rows, cols, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    #[test]
    fn truncation_recovers_exact_rank() {
        let a = pseudo_random(20, 3, 1) * pseudo_random(3, 500, 2);
        let t = truncated_left_basis(&a, 1e-10, 20);
        assert_eq!(t.rank(), 3);
        let proj = &t.basis * (t.basis.transpose() * &a);
        assert!((proj - &a).norm() <= 1e-12 * a.norm());
        assert!(!t.capped);
        let capped = truncated_left_basis(&a, 1e-10, 2);
        assert_eq!(capped.rank(), 2);
        assert!(capped.capped);
    }

    #[test]
    fn zero_matrix_has_rank_zero() {
        let t = truncated_left_basis(&DMatrix::zeros(5, 9), 1e-6, 5);
        assert_eq!(t.rank(), 0);
    }

    #[test]
    fn completion_keeps_leading_columns_and_is_orthogonal() {
        let (q, _) = (pseudo_random(12, 4, 3).qr().q(), ());
        let full = orthogonal_completion(&q);
        assert_eq!(full.shape(), (12, 12));
        assert_eq!(full.columns(0, 4), q.columns(0, 4));
        assert!(orthogonality_defect(&full) < 1e-13);
        assert_eq!(orthogonal_completion(&DMatrix::zeros(5, 0)), DMatrix::identity(5, 5));
    }

    #[test]
    fn orthonormalize_reduces_deficient_rank() {
        let b = pseudo_random(10, 2, 5);
        let mut deficient = DMatrix::zeros(10, 3);
        deficient.columns_mut(0, 2).copy_from(&b);
        deficient.set_column(2, &(b.column(0) * 2.0 - b.column(1)));
        let (q, x, reduced) = orthonormalize(&deficient, 1e-14);
        assert!(reduced);
        assert_eq!(q.ncols(), 2);
        assert!((&q * &x - &deficient).norm() < 1e-12);
        let (q, x, reduced) = orthonormalize(&b, 1e-14);
        assert!(!reduced);
        assert!((&q * &x - &b).norm() < 1e-13);
        assert!(x[(1, 0)] == 0.0);
    }
}
