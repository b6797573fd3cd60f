//! Compressed sparse row storage and the MatrixMarket coordinate format.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// CSR matrix with sorted, duplicate-free column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self { n_rows, n_cols, row_ptr: vec![0; n_rows + 1], col_idx: vec![], values: vec![] }
    }

    pub fn identity(n: usize) -> Self {
        Self { n_rows: n, n_cols: n, row_ptr: (0..=n).collect(), col_idx: (0..n).collect(), values: vec![1.0; n] }
    }

    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    /// Entries that sum to exactly zero are kept.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut counts = vec![0usize; n_rows + 1];
        for &(r, c, _) in triplets {
            if r >= n_rows || c >= n_cols {
                return Err(Error::InvalidArgument(format!(
                    "entry ({r}, {c}) outside a {n_rows}x{n_cols} matrix"
                )));
            }
            counts[r + 1] += 1;
        }
        for i in 0..n_rows {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            cols[next[r]] = c;
            vals[next[r]] = v;
            next[r] += 1;
        }
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        let mut order: Vec<usize> = Vec::new();
        for r in 0..n_rows {
            let (lo, hi) = (counts[r], counts[r + 1]);
            order.clear();
            order.extend(lo..hi);
            order.sort_by_key(|&k| cols[k]);
            for &k in &order {
                if col_idx.len() > row_ptr[r] && *col_idx.last().unwrap() == cols[k] {
                    *values.last_mut().unwrap() += vals[k];
                } else {
                    col_idx.push(cols[k]);
                    values.push(vals[k]);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self { n_rows, n_cols, row_ptr, col_idx, values })
    }

    /// Keeps entries with `|a_ij| > tol` (or all nonzeros for `tol = 0`).
    pub fn from_dense(a: &DMatrix<f64>, tol: f64) -> Self {
        let mut trip = Vec::new();
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                let v = a[(i, j)];
                if v != 0.0 && v.abs() > tol {
                    trip.push((i, j, v));
                }
            }
        }
        Self::from_triplets(a.nrows(), a.ncols(), &trip).expect("indices in range")
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n_rows, self.n_cols);
        for (i, j, v) in self.iter() {
            a[(i, j)] += v;
        }
        a
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |i| {
            let (c, v) = self.row(i);
            c.iter().zip(v).map(move |(&j, &x)| (i, j, x))
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (c, v) = self.row(i);
        c.binary_search(&j).map(|k| v[k]).unwrap_or(0.0)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_cols {
            return Err(Error::DimensionMismatch { expected: self.n_cols, got: x.len() });
        }
        Ok((0..self.n_rows)
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter().zip(v).map(|(&j, &a)| a * x[j]).sum()
            })
            .collect())
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.n_cols + 1];
        for &j in &self.col_idx {
            counts[j + 1] += 1;
        }
        for j in 0..self.n_cols {
            counts[j + 1] += counts[j];
        }
        let mut next = counts.clone();
        let mut col_idx = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for (i, j, v) in self.iter() {
            col_idx[next[j]] = i;
            values[next[j]] = v;
            next[j] += 1;
        }
        Self { n_rows: self.n_cols, n_cols: self.n_rows, row_ptr: counts, col_idx, values }
    }

    /// `P A Q` with `result[(i, j)] = A[(row_perm[i], col_perm[j])]`.
    pub fn permute(&self, row_perm: &[usize], col_perm: &[usize]) -> Self {
        let mut col_inv = vec![0; self.n_cols];
        for (j, &c) in col_perm.iter().enumerate() {
            col_inv[c] = j;
        }
        let mut trip = Vec::with_capacity(self.nnz());
        for (i, &r) in row_perm.iter().enumerate() {
            let (c, v) = self.row(r);
            trip.extend(c.iter().zip(v).map(|(&j, &x)| (i, col_inv[j], x)));
        }
        Self::from_triplets(self.n_rows, self.n_cols, &trip).expect("permutation in range")
    }

    /// Sparse product `self * other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.n_cols != other.n_rows {
            return Err(Error::DimensionMismatch { expected: self.n_cols, got: other.n_rows });
        }
        let mut acc = vec![0.0; other.n_cols];
        let mut seen = vec![usize::MAX; other.n_cols];
        let mut pattern = Vec::new();
        let mut row_ptr = vec![0];
        let (mut col_idx, mut values) = (Vec::new(), Vec::new());
        for i in 0..self.n_rows {
            pattern.clear();
            let (ac, av) = self.row(i);
            for (&k, &a) in ac.iter().zip(av) {
                let (bc, bv) = other.row(k);
                for (&j, &b) in bc.iter().zip(bv) {
                    if seen[j] != i {
                        seen[j] = i;
                        acc[j] = 0.0;
                        pattern.push(j);
                    }
                    acc[j] += a * b;
                }
            }
            pattern.sort_unstable();
            for &j in &pattern {
                col_idx.push(j);
                values.push(acc[j]);
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self { n_rows: self.n_rows, n_cols: other.n_cols, row_ptr, col_idx, values })
    }

    /// Elementwise `alpha * self + beta * other`.
    pub fn add_scaled(&self, alpha: f64, other: &Self, beta: f64) -> Result<Self> {
        if (self.n_rows, self.n_cols) != (other.n_rows, other.n_cols) {
            return Err(Error::DimensionMismatch { expected: self.n_rows, got: other.n_rows });
        }
        let trip: Vec<_> = self
            .iter()
            .map(|(i, j, v)| (i, j, alpha * v))
            .chain(other.iter().map(|(i, j, v)| (i, j, beta * v)))
            .collect();
        Self::from_triplets(self.n_rows, self.n_cols, &trip)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    /// `||A - A^T||_F / ||A||_F` (zero for the zero matrix).
    pub fn asymmetry(&self) -> f64 {
        let norm = self.frobenius_norm();
        if norm == 0.0 {
            return 0.0;
        }
        self.add_scaled(1.0, &self.transpose(), -1.0).map(|d| d.frobenius_norm() / norm).unwrap_or(f64::INFINITY)
    }

    /// Writes the MatrixMarket `coordinate real general` format with 1-based indices.
    /// Each `comments` line is emitted after the banner prefixed by `%`.
    pub fn write_matrix_market<W: Write>(&self, mut w: W, comments: &[String]) -> Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        for c in comments {
            writeln!(w, "% {c}")?;
        }
        writeln!(w, "{} {} {}", self.n_rows, self.n_cols, self.nnz())?;
        for (i, j, v) in self.iter() {
            writeln!(w, "{} {} {:.17e}", i + 1, j + 1, v)?;
        }
        Ok(())
    }

    pub fn read_matrix_market<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let banner = lines.next().ok_or_else(|| Error::Format("empty MatrixMarket file".into()))??;
        let lower = banner.to_ascii_lowercase();
        if !lower.starts_with("%%matrixmarket matrix coordinate real") {
            return Err(Error::Format(format!("unsupported banner '{banner}'")));
        }
        let symmetric = lower.contains("symmetric");
        let mut header: Option<(usize, usize, usize)> = None;
        let mut trip = Vec::new();
        for line in lines {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('%') {
                continue;
            }
            let fields: Vec<&str> = t.split_whitespace().collect();
            let parse_err = || Error::Format(format!("bad line '{t}'"));
            match header {
                None => {
                    if fields.len() != 3 {
                        return Err(parse_err());
                    }
                    let p = |s: &str| s.parse::<usize>().map_err(|_| parse_err());
                    header = Some((p(fields[0])?, p(fields[1])?, p(fields[2])?));
                }
                Some((m, n, _)) => {
                    if fields.len() != 3 {
                        return Err(parse_err());
                    }
                    let i: usize = fields[0].parse().map_err(|_| parse_err())?;
                    let j: usize = fields[1].parse().map_err(|_| parse_err())?;
                    let v: f64 = fields[2].parse().map_err(|_| parse_err())?;
                    if i == 0 || j == 0 || i > m || j > n {
                        return Err(Error::Format(format!("index ({i}, {j}) out of range")));
                    }
                    trip.push((i - 1, j - 1, v));
                    if symmetric && i != j {
                        trip.push((j - 1, i - 1, v));
                    }
                }
            }
        }
        let (m, n, nnz) = header.ok_or_else(|| Error::Format("missing size line".into()))?;
        let expected = if symmetric { trip.iter().filter(|t| t.0 >= t.1).count() } else { trip.len() };
        if expected != nnz {
            return Err(Error::Format(format!("expected {nnz} entries, found {expected}")));
        }
        Self::from_triplets(m, n, &trip)
    }
}
