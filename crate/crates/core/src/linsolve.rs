//! Sparse direct and iterative solvers for the factorization core `S`.
//!
//! Exact factorizations: up-looking Cholesky driven by the elimination tree
//! and a left-looking (Gilbert-Peierls) LU with threshold partial pivoting.
//! Both use an approximate-minimum-degree preordering by default.
//! Incomplete factorization: row-wise ILUT with threshold and fill caps.
//! Iterative: right-preconditioned restarted GMRES.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;
use crate::sparsifier::SparseFactorization;

const NONE: usize = usize::MAX;

/// Diagonal preference for LU: the diagonal entry is taken as pivot whenever
/// it is at least this fraction of the largest candidate in its column.
pub const LU_PIVOT_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    Natural,
    FillReducing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    Cholesky,
    Lu,
    Ilut,
}

/// `L U = P S Q` with `(P S Q)[(i, j)] = S[(row_perm[i], col_perm[j])]`.
/// `lower` carries its diagonal explicitly (ones for LU and ILUT); for
/// Cholesky `upper = lower^T`.
#[derive(Debug, Clone)]
pub struct TriangularFactors {
    pub kind: FactorKind,
    pub lower: SparseMatrix,
    pub upper: SparseMatrix,
    pub row_perm: Vec<usize>,
    pub col_perm: Vec<usize>,
    /// ILUT pivots that were zero and got replaced.
    pub replaced_pivots: usize,
}

fn check_square(s: &SparseMatrix) -> Result<usize> {
    if s.n_rows != s.n_cols {
        return Err(Error::DimensionMismatch { expected: s.n_rows, got: s.n_cols });
    }
    Ok(s.n_rows)
}

/// Approximate minimum degree ordering of the pattern of `S + S^T`.
/// `perm[k]` is the index eliminated at step `k`.
pub fn fill_reducing_order(s: &SparseMatrix) -> Result<Vec<usize>> {
    let n = check_square(s)?;
    if n == 0 {
        return Ok(vec![]);
    }
    let (p, _, _) = amd::order::<usize>(n, &s.row_ptr, &s.col_idx, &amd::Control::default())
        .map_err(|status| Error::InvalidArgument(format!("ordering failed: {status:?}")))?;
    Ok(p)
}

fn ordering_for(s: &SparseMatrix, ordering: Ordering) -> Result<Vec<usize>> {
    match ordering {
        Ordering::Natural => Ok((0..s.n_rows).collect()),
        Ordering::FillReducing => fill_reducing_order(s),
    }
}

/// Elimination tree of a symmetric matrix given by its full pattern.
fn etree(c: &SparseMatrix) -> Vec<usize> {
    let n = c.n_rows;
    let mut parent = vec![NONE; n];
    let mut ancestor = vec![NONE; n];
    for k in 0..n {
        for &i0 in c.row(k).0 {
            let mut i = i0;
            while i != NONE && i < k {
                let next = ancestor[i];
                ancestor[i] = k;
                if next == NONE {
                    parent[i] = k;
                }
                i = next;
            }
        }
    }
    parent
}

/// Nonzero pattern of row `k` of the Cholesky factor, written topologically
/// into `stack[top..]`; returns `top`.
fn ereach(c: &SparseMatrix, k: usize, parent: &[usize], stack: &mut [usize], mark: &mut [usize]) -> usize {
    let n = c.n_rows;
    let mut top = n;
    mark[k] = k;
    let mut path = Vec::new();
    for &i0 in c.row(k).0 {
        if i0 > k {
            continue;
        }
        let mut i = i0;
        while mark[i] != k {
            path.push(i);
            mark[i] = k;
            i = parent[i];
        }
        while let Some(j) = path.pop() {
            top -= 1;
            stack[top] = j;
        }
    }
    top
}

/// Sparse Cholesky `P S P^T = L L^T`.
pub fn sparse_cholesky(s: &SparseMatrix, ordering: Ordering) -> Result<TriangularFactors> {
    let n = check_square(s)?;
    let perm = ordering_for(s, ordering)?;
    let c = s.permute(&perm, &perm);
    let parent = etree(&c);

    let mut stack = vec![0; n];
    let mut mark = vec![NONE; n];
    let mut counts = vec![1usize; n];
    for k in 0..n {
        let top = ereach(&c, k, &parent, &mut stack, &mut mark);
        for &j in &stack[top..] {
            counts[j] += 1;
        }
    }
    let mut col_ptr = vec![0; n + 1];
    for j in 0..n {
        col_ptr[j + 1] = col_ptr[j] + counts[j];
    }
    let nnz = col_ptr[n];
    let mut li = vec![0usize; nnz];
    let mut lx = vec![0.0; nnz];
    let mut next: Vec<usize> = col_ptr[..n].to_vec();
    let mut x = vec![0.0; n];
    mark.fill(NONE);
    for k in 0..n {
        let top = ereach(&c, k, &parent, &mut stack, &mut mark);
        x[k] = 0.0;
        let (cols, vals) = c.row(k);
        for (&i, &v) in cols.iter().zip(vals) {
            if i <= k {
                x[i] = v;
            }
        }
        let mut d = x[k];
        x[k] = 0.0;
        for &i in &stack[top..] {
            let lki = x[i] / lx[col_ptr[i]];
            x[i] = 0.0;
            for q in col_ptr[i] + 1..next[i] {
                x[li[q]] -= lx[q] * lki;
            }
            d -= lki * lki;
            li[next[i]] = k;
            lx[next[i]] = lki;
            next[i] += 1;
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotSpd { column: k, pivot: d });
        }
        li[next[k]] = k;
        lx[next[k]] = d.sqrt();
        next[k] += 1;
    }
    // column storage of L is row storage of L^T
    let upper = SparseMatrix { n_rows: n, n_cols: n, row_ptr: col_ptr, col_idx: li, values: lx };
    let lower = upper.transpose();
    Ok(TriangularFactors { kind: FactorKind::Cholesky, lower, upper, row_perm: perm.clone(), col_perm: perm, replaced_pivots: 0 })
}

/// Growing compressed-column storage.
struct Columns {
    ptr: Vec<usize>,
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl Columns {
    fn new(n: usize) -> Self {
        Self { ptr: Vec::with_capacity(n + 1), idx: vec![], val: vec![] }
    }

    fn push(&mut self, i: usize, v: f64) {
        self.idx.push(i);
        self.val.push(v);
    }

    /// Row storage of the transpose, rows sorted.
    fn into_transposed(self, n: usize) -> SparseMatrix {
        let mut trip = Vec::with_capacity(self.idx.len());
        for j in 0..n {
            for p in self.ptr[j]..self.ptr[j + 1] {
                trip.push((self.idx[p], j, self.val[p]));
            }
        }
        SparseMatrix::from_triplets(n, n, &trip).expect("indices in range")
    }
}

/// Sparse LU `P S Q = L U` with threshold partial pivoting.
pub fn sparse_lu(s: &SparseMatrix, ordering: Ordering) -> Result<TriangularFactors> {
    sparse_lu_with_threshold(s, ordering, LU_PIVOT_THRESHOLD)
}

pub fn sparse_lu_with_threshold(s: &SparseMatrix, ordering: Ordering, threshold: f64) -> Result<TriangularFactors> {
    let n = check_square(s)?;
    let q = match ordering {
        Ordering::Natural => (0..n).collect(),
        Ordering::FillReducing => {
            let sym = s.add_scaled(1.0, &s.transpose(), 1.0)?;
            fill_reducing_order(&sym)?
        }
    };
    let at = s.transpose();
    let mut l = Columns::new(n);
    let mut u = Columns::new(n);
    let mut pinv = vec![NONE; n];
    let mut x = vec![0.0; n];
    let mut marked = vec![false; n];
    let mut xi = vec![0usize; n];
    let mut stack = vec![0usize; n];
    let mut pstack = vec![0usize; n];

    for k in 0..n {
        l.ptr.push(l.idx.len());
        u.ptr.push(u.idx.len());
        let col = q[k];
        let (rows, vals) = at.row(col);

        // symbolic: rows reachable from the column pattern through L
        let mut top = n;
        for &start in rows {
            if marked[start] {
                continue;
            }
            let mut head = 0usize;
            stack[0] = start;
            loop {
                let j = stack[head];
                let jcol = pinv[j];
                if !marked[j] {
                    marked[j] = true;
                    pstack[head] = if jcol == NONE { 0 } else { l.ptr[jcol] };
                }
                let end = if jcol == NONE { 0 } else { l.ptr[jcol + 1] };
                let mut descended = false;
                let mut p = pstack[head];
                while p < end {
                    let i = l.idx[p];
                    p += 1;
                    if !marked[i] {
                        pstack[head] = p;
                        head += 1;
                        stack[head] = i;
                        descended = true;
                        break;
                    }
                }
                if !descended {
                    top -= 1;
                    xi[top] = j;
                    if head == 0 {
                        break;
                    }
                    head -= 1;
                }
            }
        }
        for &i in &xi[top..] {
            marked[i] = false;
            x[i] = 0.0;
        }

        // numeric: x = L \ S(:, col)
        for (&i, &v) in rows.iter().zip(vals) {
            x[i] = v;
        }
        for &j in &xi[top..] {
            let jcol = pinv[j];
            if jcol == NONE {
                continue;
            }
            x[j] /= l.val[l.ptr[jcol]];
            let xj = x[j];
            for p in l.ptr[jcol] + 1..l.ptr[jcol + 1] {
                x[l.idx[p]] -= l.val[p] * xj;
            }
        }

        let mut ipiv = NONE;
        let mut best = -1.0f64;
        for &i in &xi[top..] {
            if pinv[i] == NONE {
                if x[i].abs() > best {
                    best = x[i].abs();
                    ipiv = i;
                }
            } else {
                u.push(pinv[i], x[i]);
            }
        }
        if ipiv == NONE || !(best > 0.0) {
            return Err(Error::Singular(k));
        }
        if pinv[col] == NONE && x[col].abs() >= threshold * best {
            ipiv = col;
        }
        let pivot = x[ipiv];
        u.push(k, pivot);
        pinv[ipiv] = k;
        l.push(ipiv, 1.0);
        for &i in &xi[top..] {
            if pinv[i] == NONE {
                l.push(i, x[i] / pivot);
            }
            x[i] = 0.0;
        }
    }
    l.ptr.push(l.idx.len());
    u.ptr.push(u.idx.len());
    for i in l.idx.iter_mut() {
        *i = pinv[*i];
    }
    let mut row_perm = vec![0; n];
    for (orig, &k) in pinv.iter().enumerate() {
        row_perm[k] = orig;
    }
    Ok(TriangularFactors {
        kind: FactorKind::Lu,
        lower: l.into_transposed(n),
        upper: u.into_transposed(n),
        row_perm,
        col_perm: q,
        replaced_pivots: 0,
    })
}

/// Row-wise threshold incomplete LU of `P S P^T`.
///
/// Multipliers and entries below `tau * ||row||_2` are dropped, and at most
/// `max_fill` entries are kept in each of the strictly lower and strictly
/// upper parts of a row (largest magnitudes win). Zero pivots are replaced
/// by `tau * ||row||_2` and counted.
pub fn ilut(s: &SparseMatrix, tau: f64, max_fill: usize, ordering: Ordering) -> Result<TriangularFactors> {
    let n = check_square(s)?;
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be non-negative, got {tau}")));
    }
    let perm = ordering_for(s, ordering)?;
    let b = s.permute(&perm, &perm);
    let mut u_rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    let mut diag = vec![0.0; n];
    let mut l_trip: Vec<(usize, usize, f64)> = Vec::new();
    let mut w = vec![0.0; n];
    let mut in_row = vec![false; n];
    let mut pattern: Vec<usize> = Vec::new();
    let mut replaced = 0;

    for i in 0..n {
        let (cols, vals) = b.row(i);
        let norm = vals.iter().map(|v| v * v).sum::<f64>().sqrt();
        let tol = tau * norm;
        let mut heap = BinaryHeap::new();
        pattern.clear();
        for (&j, &v) in cols.iter().zip(vals) {
            w[j] = v;
            in_row[j] = true;
            pattern.push(j);
            if j < i {
                heap.push(Reverse(j));
            }
        }
        let mut lower: Vec<(usize, f64)> = Vec::new();
        while let Some(Reverse(j)) = heap.pop() {
            let m = w[j] / diag[j];
            w[j] = 0.0;
            if m.abs() < tol || m == 0.0 {
                continue;
            }
            for &(c, uv) in &u_rows[j] {
                if !in_row[c] {
                    in_row[c] = true;
                    pattern.push(c);
                    w[c] = 0.0;
                    if c < i {
                        heap.push(Reverse(c));
                    }
                }
                w[c] -= m * uv;
            }
            lower.push((j, m));
        }
        let mut d = w[i];
        let mut upper: Vec<(usize, f64)> =
            pattern.iter().filter(|&&c| c > i).map(|&c| (c, w[c])).filter(|&(_, v)| v != 0.0 && v.abs() >= tol).collect();
        for &c in &pattern {
            w[c] = 0.0;
            in_row[c] = false;
        }
        for part in [&mut lower, &mut upper] {
            if part.len() > max_fill {
                part.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
                part.truncate(max_fill);
            }
            part.sort_by_key(|e| e.0);
        }
        if d == 0.0 {
            d = if tol > 0.0 { tol } else if norm > 0.0 { norm } else { 1.0 };
            replaced += 1;
        }
        diag[i] = d;
        l_trip.extend(lower.iter().map(|&(j, m)| (i, j, m)));
        l_trip.push((i, i, 1.0));
        u_rows.push(upper);
    }
    if replaced > 0 {
        log::warn!("ilut: {replaced} zero pivot(s) replaced");
    }
    let mut u_trip = Vec::new();
    for (i, row) in u_rows.iter().enumerate() {
        u_trip.push((i, i, diag[i]));
        u_trip.extend(row.iter().map(|&(c, v)| (i, c, v)));
    }
    Ok(TriangularFactors {
        kind: FactorKind::Ilut,
        lower: SparseMatrix::from_triplets(n, n, &l_trip)?,
        upper: SparseMatrix::from_triplets(n, n, &u_trip)?,
        row_perm: perm.clone(),
        col_perm: perm,
        replaced_pivots: replaced,
    })
}

impl TriangularFactors {
    pub fn size(&self) -> usize {
        self.lower.n_rows
    }

    /// Solves `S x = b` (approximately for ILUT).
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.size();
        if b.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: b.len() });
        }
        let mut y: Vec<f64> = self.row_perm.iter().map(|&i| b[i]).collect();
        for i in 0..n {
            let (cols, vals) = self.lower.row(i);
            let mut acc = y[i];
            let mut d = 0.0;
            for (&j, &v) in cols.iter().zip(vals) {
                if j < i {
                    acc -= v * y[j];
                } else if j == i {
                    d = v;
                }
            }
            y[i] = acc / d;
        }
        for i in (0..n).rev() {
            let (cols, vals) = self.upper.row(i);
            let mut acc = y[i];
            let mut d = 0.0;
            for (&j, &v) in cols.iter().zip(vals) {
                if j > i {
                    acc -= v * y[j];
                } else if j == i {
                    d = v;
                }
            }
            y[i] = acc / d;
        }
        let mut x = vec![0.0; n];
        for (j, &c) in self.col_perm.iter().enumerate() {
            x[c] = y[j];
        }
        Ok(x)
    }

    /// `||L U - P S Q||_F / ||S||_F`.
    pub fn residual(&self, s: &SparseMatrix) -> Result<f64> {
        let lu = self.lower.matmul(&self.upper)?;
        let psq = s.permute(&self.row_perm, &self.col_perm);
        Ok(lu.add_scaled(1.0, &psq, -1.0)?.frobenius_norm() / s.frobenius_norm())
    }

    pub fn nnz(&self) -> usize {
        match self.kind {
            FactorKind::Cholesky => self.lower.nnz(),
            _ => self.lower.nnz() + self.upper.nnz(),
        }
    }
}

/// `x = V S^{-1} U^T b` through the triangular factors of `S`.
pub fn direct_solve(f: &SparseFactorization, factors: &TriangularFactors, b: &[f64]) -> Result<Vec<f64>> {
    let y = f.u.apply(b, true)?;
    let z = factors.solve(&y)?;
    f.v.apply(&z, false)
}

/// Preconditioner application; identical composition to [`direct_solve`].
pub fn precond_apply(f: &SparseFactorization, factors: &TriangularFactors, r: &[f64]) -> Result<Vec<f64>> {
    direct_solve(f, factors, r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GmresOptions {
    pub tol: f64,
    pub restart: usize,
    pub max_iter: usize,
}

impl Default for GmresOptions {
    fn default() -> Self {
        Self { tol: 1e-10, restart: 100, max_iter: 1000 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SolveReport {
    /// Relative residual after each iteration, starting with the initial one.
    /// Inner entries are Arnoldi recurrence estimates; the entry closing each
    /// restart cycle is the true residual `||b - A x|| / ||b||`.
    pub residual_history: Vec<f64>,
    pub iterations: usize,
    pub setup_seconds: f64,
    pub solve_seconds: f64,
    pub final_relative_residual: f64,
    pub converged: bool,
    /// A full restart cycle made no progress.
    pub stagnated: bool,
}

type Operator<'a> = &'a dyn Fn(&[f64]) -> Result<Vec<f64>>;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn givens(a: f64, b: f64) -> (f64, f64) {
    if b == 0.0 {
        (1.0, 0.0)
    } else {
        let r = a.hypot(b);
        (a / r, b / r)
    }
}

/// Right-preconditioned restarted GMRES from a zero initial guess.
pub fn gmres(matvec: Operator, b: &[f64], precond: Option<Operator>, opts: &GmresOptions) -> Result<(Vec<f64>, SolveReport)> {
    if !(opts.tol > 0.0) || opts.restart == 0 {
        return Err(Error::InvalidArgument("gmres needs tol > 0 and restart > 0".into()));
    }
    let start = Instant::now();
    let n = b.len();
    let bnorm = norm(b);
    let mut x = vec![0.0; n];
    let mut report = SolveReport { residual_history: vec![1.0], ..Default::default() };
    if bnorm == 0.0 {
        report.residual_history = vec![0.0];
        report.converged = true;
        return Ok((x, report));
    }
    let apply_m = |v: &[f64]| -> Result<Vec<f64>> {
        match precond {
            Some(m) => m(v),
            None => Ok(v.to_vec()),
        }
    };
    let mut r = b.to_vec();
    let mut rel = 1.0;
    while report.iterations < opts.max_iter {
        let beta = norm(&r);
        let cycle_start = rel;
        let m = opts.restart.min(opts.max_iter - report.iterations);
        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut h = vec![vec![0.0; m]; m + 1];
        let mut cs = vec![0.0; m];
        let mut sn = vec![0.0; m];
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut used = 0;
        for j in 0..m {
            let z = apply_m(&basis[j])?;
            let mut w = matvec(&z)?;
            if w.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: w.len() });
            }
            for (i, v) in basis.iter().enumerate() {
                let hij: f64 = w.iter().zip(v).map(|(a, b)| a * b).sum();
                h[i][j] = hij;
                w.iter_mut().zip(v).for_each(|(a, b)| *a -= hij * b);
            }
            let hnext = norm(&w);
            h[j + 1][j] = hnext;
            for i in 0..j {
                let t = cs[i] * h[i][j] + sn[i] * h[i + 1][j];
                h[i + 1][j] = -sn[i] * h[i][j] + cs[i] * h[i + 1][j];
                h[i][j] = t;
            }
            let (c, s) = givens(h[j][j], h[j + 1][j]);
            cs[j] = c;
            sn[j] = s;
            h[j][j] = c * h[j][j] + s * h[j + 1][j];
            h[j + 1][j] = 0.0;
            g[j + 1] = -s * g[j];
            g[j] *= c;
            used = j + 1;
            report.iterations += 1;
            rel = g[j + 1].abs() / bnorm;
            report.residual_history.push(rel);
            if rel <= opts.tol || hnext <= 1e-14 * beta {
                break;
            }
            basis.push(w.iter().map(|v| v / hnext).collect());
        }
        // back substitution for the least-squares coefficients
        let mut y = vec![0.0; used];
        for i in (0..used).rev() {
            let mut acc = g[i];
            for k in i + 1..used {
                acc -= h[i][k] * y[k];
            }
            y[i] = acc / h[i][i];
        }
        let mut comb = vec![0.0; n];
        for (k, yk) in y.iter().enumerate() {
            comb.iter_mut().zip(&basis[k]).for_each(|(a, b)| *a += yk * b);
        }
        let dx = apply_m(&comb)?;
        x.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
        let ax = matvec(&x)?;
        r = b.iter().zip(&ax).map(|(a, b)| a - b).collect();
        rel = norm(&r) / bnorm;
        *report.residual_history.last_mut().expect("non-empty") = rel;
        if rel <= opts.tol {
            report.converged = true;
            break;
        }
        if rel >= cycle_start * (1.0 - 1e-10) {
            report.stagnated = true;
            log::warn!("gmres stagnated at relative residual {rel:e}");
            break;
        }
    }
    report.final_relative_residual = rel;
    report.solve_seconds = start.elapsed().as_secs_f64();
    Ok((x, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sparse(n: usize, per_row: usize, seed: u64, symmetric: bool) -> SparseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trip = Vec::new();
        for i in 0..n {
            let mut rowsum = 0.0;
            for _ in 0..per_row {
                let j = rng.gen_range(0..n);
                if j == i {
                    continue;
                }
                let v: f64 = rng.gen_range(-1.0..1.0);
                rowsum += v.abs();
                trip.push((i, j, v));
                if symmetric {
                    trip.push((j, i, v));
                }
            }
            trip.push((i, i, rowsum + 1.0 + if symmetric { per_row as f64 } else { 0.0 }));
        }
        SparseMatrix::from_triplets(n, n, &trip).unwrap()
    }

    #[test]
    fn cholesky_of_identity_is_identity() {
        let f = sparse_cholesky(&SparseMatrix::identity(5), Ordering::FillReducing).unwrap();
        assert_eq!(f.lower.to_dense(), DMatrix::identity(5, 5));
    }

    #[test]
    fn cholesky_reproduces_spd_matrix() {
        let s = random_sparse(300, 4, 1, true);
        for ordering in [Ordering::Natural, Ordering::FillReducing] {
            let f = sparse_cholesky(&s, ordering).unwrap();
            assert!(f.residual(&s).unwrap() <= 1e-14);
            let b: Vec<f64> = (0..300).map(|i| (i as f64).cos()).collect();
            let x = f.solve(&b).unwrap();
            let r: f64 = s.matvec(&x).unwrap().iter().zip(&b).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(r <= 1e-12 * norm(&b));
        }
    }

    #[test]
    fn indefinite_matrix_is_not_spd() {
        let s = SparseMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 1, -1.0)]).unwrap();
        assert!(matches!(sparse_cholesky(&s, Ordering::Natural), Err(Error::NotSpd { column: 1, .. })));
    }

    #[test]
    fn lu_of_permutation_matrix() {
        let s = SparseMatrix::from_triplets(3, 3, &[(0, 2, 1.0), (1, 0, 1.0), (2, 1, 1.0)]).unwrap();
        let f = sparse_lu(&s, Ordering::Natural).unwrap();
        assert_eq!(f.lower.to_dense(), DMatrix::identity(3, 3));
        assert_eq!(f.upper.to_dense(), DMatrix::identity(3, 3));
        assert_eq!(f.solve(&[1.0, 2.0, 3.0]).unwrap(), vec![2.0, 3.0, 1.0]);
    }

    #[test]
    fn lu_reproduces_diagonally_dominant_matrix() {
        let s = random_sparse(500, 5, 2, false);
        for ordering in [Ordering::Natural, Ordering::FillReducing] {
            let f = sparse_lu(&s, ordering).unwrap();
            assert!(f.residual(&s).unwrap() <= 1e-12);
        }
        // pure partial pivoting on a matrix that needs it
        let d = DMatrix::from_row_slice(3, 3, &[1e-12, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 3.0]);
        let s = SparseMatrix::from_dense(&d, 0.0);
        let f = sparse_lu(&s, Ordering::Natural).unwrap();
        assert_eq!(f.row_perm[0], 1);
        let x = f.solve(&[1.0, 2.0, 3.0]).unwrap();
        let expect = d.lu().solve(&DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        assert!((DVector::from_vec(x) - expect).norm() < 1e-12);
    }

    #[test]
    fn duplicate_rows_are_singular() {
        let s = SparseMatrix::from_triplets(3, 3, &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 1.0), (1, 1, 2.0), (2, 2, 1.0)]).unwrap();
        assert!(matches!(sparse_lu(&s, Ordering::Natural), Err(Error::Singular(_))));
    }

    #[test]
    fn ilut_limits() {
        let s = random_sparse(200, 4, 3, false);
        let exact = ilut(&s, 0.0, 200, Ordering::Natural).unwrap();
        assert!(exact.residual(&s).unwrap() <= 1e-12);
        let jacobi = ilut(&s, 1e9, 200, Ordering::Natural).unwrap();
        assert_eq!(jacobi.lower.nnz(), 200);
        assert_eq!(jacobi.upper.nnz(), 200);
        for i in 0..200 {
            assert_eq!(jacobi.upper.get(i, i), s.get(i, i));
        }
        let capped = ilut(&s, 0.0, 2, Ordering::Natural).unwrap();
        for i in 0..200 {
            assert!(capped.lower.row(i).0.len() <= 3);
            assert!(capped.upper.row(i).0.len() <= 3);
        }
    }

    #[test]
    fn ilut_replaces_zero_pivots() {
        let s = SparseMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)]).unwrap();
        let f = ilut(&s, 0.1, 10, Ordering::Natural).unwrap();
        assert_eq!(f.replaced_pivots, 1);
        assert_eq!(f.upper.get(0, 0), 0.1);
    }

    #[test]
    fn gmres_identity_converges_in_one_step() {
        let b = vec![1.0, -2.0, 3.0];
        let id = |v: &[f64]| Ok(v.to_vec());
        let (x, rep) = gmres(&id, &b, None, &GmresOptions::default()).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(rep.converged);
        assert!(x.iter().zip(&b).all(|(a, b)| (a - b).abs() < 1e-15));
        assert_eq!(*rep.residual_history.last().unwrap(), rep.final_relative_residual);
    }

    #[test]
    fn gmres_matches_dense_solve() {
        let m = DMatrix::from_fn(10, 10, |i, j| if i == j { 4.0 } else { 1.0 / (1.0 + (i + j) as f64) });
        let b: Vec<f64> = (0..10).map(|i| i as f64 - 4.5).collect();
        let op = |v: &[f64]| Ok((&m * DVector::from_column_slice(v)).as_slice().to_vec());
        let opts = GmresOptions { tol: 1e-12, restart: 3, max_iter: 200 };
        let (x, rep) = gmres(&op, &b, None, &opts).unwrap();
        assert!(rep.converged);
        let expect = m.clone().lu().solve(&DVector::from_vec(b)).unwrap();
        assert!((DVector::from_vec(x) - &expect).norm() <= 1e-10 * expect.norm());
        // recurrence residuals never increase inside a cycle
        for w in rep.residual_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn gmres_flags_stagnation() {
        // a rotation: one-step cycles never reduce the residual
        let op = |v: &[f64]| Ok(vec![-v[1], v[0]]);
        let opts = GmresOptions { tol: 1e-10, restart: 1, max_iter: 50 };
        let (_, rep) = gmres(&op, &[1.0, 0.0], None, &opts).unwrap();
        assert!(rep.stagnated);
        assert!(!rep.converged);
    }
}
