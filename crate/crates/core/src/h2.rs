//! H² matrices: `A = C + sum_b R_t D_b E_s^T` with nested cluster bases.
//!
//! Bases are stored per cluster: a leaf holds its explicit `|t| x k_t`
//! basis, an internal cluster holds a transfer matrix of shape
//! `(k_c1 + k_c2) x k_t` expressing its basis in the stacked bases of its two
//! children. Close blocks and interaction matrices are stored in the order
//! of the block cluster tree's nearfield / farfield lists.
//!
//! Construction samples the dense kernel: for every cluster the whole
//! farfield block row (own admissible blocks plus those inherited from
//! ancestors) is compressed by a truncated SVD. The cost is `O(N^2)` kernel
//! evaluations; this is a reference constructor, not a fast one.

use std::ops::Range;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::dense::truncated_left_basis;
use crate::error::{Error, Result};
use crate::geometry::{BlockClusterTree, ClusterTree};
use crate::kernels::{EntrySource, ORACLE_CAP};

/// Per-cluster basis storage (leaf bases and transfer matrices).
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterBasis {
    pub mats: Vec<DMatrix<f64>>,
}

impl ClusterBasis {
    pub fn rank(&self, cluster: usize) -> usize {
        self.mats[cluster].ncols()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.mats.iter().map(|m| m.ncols()).collect()
    }

    /// Explicit `|t| x k_t` bases for every cluster, expanded through the transfers.
    pub fn expand(&self, tree: &ClusterTree) -> Vec<DMatrix<f64>> {
        let mut out: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); tree.clusters.len()];
        for level in tree.levels.iter().rev() {
            for &t in level {
                out[t] = match tree.clusters[t].children {
                    None => self.mats[t].clone(),
                    Some([a, b]) => {
                        let ka = self.rank(a);
                        let transfer = &self.mats[t];
                        let top = &out[a] * transfer.rows(0, ka);
                        let bottom = &out[b] * transfer.rows(ka, transfer.nrows() - ka);
                        let mut full = DMatrix::zeros(tree.clusters[t].size(), transfer.ncols());
                        full.rows_mut(0, top.nrows()).copy_from(&top);
                        full.rows_mut(top.nrows(), bottom.nrows()).copy_from(&bottom);
                        full
                    }
                };
            }
        }
        out
    }
}

/// Diagnostics gathered while building.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BuildReport {
    /// Clusters whose rank was capped at the block size with singular values above eps left over.
    pub insufficient_block_size: usize,
    pub max_rank: usize,
}

#[derive(Debug, Clone)]
pub struct H2Matrix {
    pub bct: BlockClusterTree,
    /// Dense nearfield blocks, aligned with `bct.inadmissible`.
    pub close: Vec<DMatrix<f64>>,
    pub row_basis: ClusterBasis,
    pub col_basis: ClusterBasis,
    /// Coupling matrices `D_b`, aligned with `bct.admissible`.
    pub interactions: Vec<DMatrix<f64>>,
    pub eps: f64,
    /// Shared trees, `R_t = E_t` and `D_(t,s) = D_(s,t)^T`.
    pub symmetric: bool,
    pub report: BuildReport,
}

/// Stored-reals breakdown of an H² matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StorageReport {
    pub close: usize,
    pub leaf_bases: usize,
    pub transfers: usize,
    pub interactions: usize,
    pub total: usize,
    pub dense: usize,
}

/// Admissible partners of every row cluster (or column cluster when `by_col`).
fn partners(bct: &BlockClusterTree, by_col: bool) -> Vec<Vec<usize>> {
    let n = if by_col { bct.col_tree.clusters.len() } else { bct.row_tree.clusters.len() };
    let mut out = vec![Vec::new(); n];
    for &(t, s) in &bct.admissible {
        if by_col {
            out[s].push(t);
        } else {
            out[t].push(s);
        }
    }
    out
}

/// Merges sorted position lists.
fn merge_sorted(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Positions of `sub` inside the sorted superset `sup`.
fn locate(sup: &[usize], sub: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(sub.len());
    let mut k = 0;
    for &x in sub {
        while sup[k] != x {
            k += 1;
        }
        out.push(k);
    }
    out
}

struct BasisBuilder<'a> {
    tree: &'a ClusterTree,
    other: &'a ClusterTree,
    partners: Vec<Vec<usize>>,
    /// entry(row_original, col_original) of the matrix whose rows are being compressed
    entry: &'a (dyn Fn(usize, usize) -> f64 + Sync),
    eps: f64,
    max_rank: usize,
    mats: Vec<OnceLock<DMatrix<f64>>>,
    capped: Vec<OnceLock<bool>>,
}

impl BasisBuilder<'_> {
    /// Far column positions of `t`, given those inherited from its parent.
    fn far_positions(&self, t: usize, inherited: &[usize]) -> Vec<usize> {
        let mut own: Vec<usize> =
            self.partners[t].iter().flat_map(|&s| self.other.clusters[s].range.clone()).collect();
        own.sort_unstable();
        merge_sorted(inherited, &own)
    }

    /// Builds the basis of `t` and its subtree. Returns the coefficient
    /// matrix `basis^T * A(t, far)` so the parent can compress further.
    fn build(&self, t: usize, inherited: &[usize]) -> (DMatrix<f64>, Vec<usize>) {
        let far = self.far_positions(t, inherited);
        let cluster = &self.tree.clusters[t];
        let sample = match cluster.children {
            None => {
                let rows: Vec<usize> = cluster.range.clone().map(|p| self.tree.perm[p]).collect();
                let cols: Vec<usize> = far.iter().map(|&q| self.other.perm[q]).collect();
                DMatrix::from_fn(rows.len(), cols.len(), |i, j| (self.entry)(rows[i], cols[j]))
            }
            Some([a, b]) => {
                let ((wa, fa), (wb, fb)) =
                    rayon::join(|| self.build(a, &far), || self.build(b, &far));
                let (ia, ib) = (locate(&fa, &far), locate(&fb, &far));
                let mut z = DMatrix::zeros(wa.nrows() + wb.nrows(), far.len());
                for (j, (&ja, &jb)) in ia.iter().zip(&ib).enumerate() {
                    z.view_mut((0, j), (wa.nrows(), 1)).copy_from(&wa.column(ja));
                    z.view_mut((wa.nrows(), j), (wb.nrows(), 1)).copy_from(&wb.column(jb));
                }
                z
            }
        };
        let trunc = truncated_left_basis(&sample, self.eps, self.max_rank);
        let coef = trunc.basis.transpose() * &sample;
        let _ = self.capped[t].set(trunc.capped);
        let _ = self.mats[t].set(trunc.basis);
        (coef, far)
    }

    fn run(self) -> (ClusterBasis, usize) {
        let root = self.tree.root();
        self.build(root, &[]);
        let capped = self.capped.iter().filter(|c| c.get().copied().unwrap_or(false)).count();
        let mats = self.mats.into_iter().map(|m| m.into_inner().expect("every cluster visited")).collect();
        (ClusterBasis { mats }, capped)
    }
}

fn evaluate_block<S: EntrySource + ?Sized>(
    source: &S,
    rows: &[usize],
    cols: &[usize],
) -> Result<DMatrix<f64>> {
    let mut block = DMatrix::zeros(rows.len(), cols.len());
    for (j, &c) in cols.iter().enumerate() {
        for (i, &r) in rows.iter().enumerate() {
            let v = source.entry(r, c);
            block[(i, j)] = if v.is_finite() { v } else { source.checked_entry(r, c)? };
        }
    }
    Ok(block)
}

fn originals(tree: &ClusterTree, range: Range<usize>) -> Vec<usize> {
    range.map(|p| tree.perm[p]).collect()
}

/// `basis_t^T A(t, s) basis_s`, tiled over columns to bound the scratch size.
fn project_block<S: EntrySource + ?Sized>(
    source: &S,
    rows: &[usize],
    cols: &[usize],
    left: &DMatrix<f64>,
    right: &DMatrix<f64>,
) -> DMatrix<f64> {
    const TILE: usize = 256;
    let mut d = DMatrix::zeros(left.ncols(), right.ncols());
    let lt = left.transpose();
    for start in (0..cols.len()).step_by(TILE) {
        let width = TILE.min(cols.len() - start);
        let a = DMatrix::from_fn(rows.len(), width, |i, j| source.entry(rows[i], cols[start + j]));
        d += (&lt * a) * right.rows(start, width);
    }
    d
}

impl H2Matrix {
    /// Builds the H² approximation of `source` on the block structure `bct`
    /// with relative truncation tolerance `eps`.
    pub fn build<S: EntrySource + ?Sized>(source: &S, bct: BlockClusterTree, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::InvalidArgument(format!("eps must lie in (0, 1), got {eps}")));
        }
        let n = source.size();
        for got in [bct.row_tree.n_points(), bct.col_tree.n_points()] {
            if got != n {
                return Err(Error::DimensionMismatch { expected: n, got });
            }
        }
        let symmetric = source.is_symmetric() && bct.is_symmetric();
        let max_rank = bct.row_tree.leaf_size.min(bct.col_tree.leaf_size);

        // nearfield blocks, mirrored in the symmetric case
        let close_index = |t: usize, s: usize| bct.inadmissible.binary_search(&(t, s)).ok();
        let computed: Vec<Option<DMatrix<f64>>> = bct
            .inadmissible
            .par_iter()
            .map(|&(t, s)| {
                if symmetric && t > s {
                    return Ok(None);
                }
                let rows = originals(&bct.row_tree, bct.row_tree.clusters[t].range.clone());
                let cols = originals(&bct.col_tree, bct.col_tree.clusters[s].range.clone());
                evaluate_block(source, &rows, &cols).map(Some)
            })
            .collect::<Result<_>>()?;
        let close: Vec<DMatrix<f64>> = bct
            .inadmissible
            .iter()
            .enumerate()
            .map(|(i, &(t, s))| match &computed[i] {
                Some(m) => m.clone(),
                None => computed[close_index(s, t).expect("symmetric partition")]
                    .as_ref()
                    .expect("upper block computed")
                    .transpose(),
            })
            .collect();
        drop(computed);

        let row_entry = |i: usize, j: usize| source.entry(i, j);
        let (row_basis, capped_rows) = BasisBuilder {
            tree: &bct.row_tree,
            other: &bct.col_tree,
            partners: partners(&bct, false),
            entry: &row_entry,
            eps,
            max_rank,
            mats: (0..bct.row_tree.clusters.len()).map(|_| OnceLock::new()).collect(),
            capped: (0..bct.row_tree.clusters.len()).map(|_| OnceLock::new()).collect(),
        }
        .run();
        let (col_basis, capped_cols) = if symmetric {
            (row_basis.clone(), 0)
        } else {
            let col_entry = |j: usize, i: usize| source.entry(i, j);
            BasisBuilder {
                tree: &bct.col_tree,
                other: &bct.row_tree,
                partners: partners(&bct, true),
                entry: &col_entry,
                eps,
                max_rank,
                mats: (0..bct.col_tree.clusters.len()).map(|_| OnceLock::new()).collect(),
                capped: (0..bct.col_tree.clusters.len()).map(|_| OnceLock::new()).collect(),
            }
            .run()
        };
        let report = BuildReport {
            insufficient_block_size: capped_rows + capped_cols,
            max_rank: row_basis.ranks().into_iter().chain(col_basis.ranks()).max().unwrap_or(0),
        };
        if report.insufficient_block_size > 0 {
            log::warn!(
                "insufficient block size: {} cluster(s) hit rank {} with singular values above eps",
                report.insufficient_block_size,
                max_rank
            );
        }

        let row_eff = row_basis.expand(&bct.row_tree);
        let col_eff = if symmetric { row_eff.clone() } else { col_basis.expand(&bct.col_tree) };
        let far_index = |t: usize, s: usize| bct.admissible.binary_search(&(t, s)).ok();
        let computed: Vec<Option<DMatrix<f64>>> = bct
            .admissible
            .par_iter()
            .map(|&(t, s)| {
                if symmetric && t > s {
                    return None;
                }
                let rows = originals(&bct.row_tree, bct.row_tree.clusters[t].range.clone());
                let cols = originals(&bct.col_tree, bct.col_tree.clusters[s].range.clone());
                Some(project_block(source, &rows, &cols, &row_eff[t], &col_eff[s]))
            })
            .collect();
        let interactions = bct
            .admissible
            .iter()
            .enumerate()
            .map(|(i, &(t, s))| match &computed[i] {
                Some(m) => m.clone(),
                None => computed[far_index(s, t).expect("symmetric partition")]
                    .as_ref()
                    .expect("upper block computed")
                    .transpose(),
            })
            .collect();

        Ok(Self { bct, close, row_basis, col_basis, interactions, eps, symmetric, report })
    }

    /// Assembles an H² matrix from explicit coefficients, checking every shape.
    pub fn from_parts(
        bct: BlockClusterTree,
        close: Vec<DMatrix<f64>>,
        row_basis: ClusterBasis,
        col_basis: ClusterBasis,
        interactions: Vec<DMatrix<f64>>,
        eps: f64,
        symmetric: bool,
    ) -> Result<Self> {
        let bad = |what: String| Error::InvalidArgument(what);
        if close.len() != bct.inadmissible.len() || interactions.len() != bct.admissible.len() {
            return Err(bad("block counts do not match the block cluster tree".into()));
        }
        for (tree, basis) in [(&bct.row_tree, &row_basis), (&bct.col_tree, &col_basis)] {
            if basis.mats.len() != tree.clusters.len() {
                return Err(bad("one basis matrix per cluster required".into()));
            }
            for (t, c) in tree.clusters.iter().enumerate() {
                let rows = match c.children {
                    None => c.size(),
                    Some([a, b]) => basis.rank(a) + basis.rank(b),
                };
                if basis.mats[t].nrows() != rows {
                    return Err(bad(format!("basis of cluster {t} has {} rows, expected {rows}", basis.mats[t].nrows())));
                }
                if basis.rank(t) > tree.leaf_size {
                    return Err(Error::InvalidRank { rank: basis.rank(t), size: tree.leaf_size });
                }
            }
        }
        for (m, &(t, s)) in close.iter().zip(&bct.inadmissible) {
            if m.shape() != (bct.row_tree.clusters[t].size(), bct.col_tree.clusters[s].size()) {
                return Err(bad(format!("close block ({t}, {s}) has wrong shape")));
            }
        }
        for (m, &(t, s)) in interactions.iter().zip(&bct.admissible) {
            if m.shape() != (row_basis.rank(t), col_basis.rank(s)) {
                return Err(bad(format!("interaction ({t}, {s}) has wrong shape")));
            }
        }
        if symmetric && (!bct.is_symmetric() || row_basis != col_basis) {
            return Err(bad("symmetric flag needs shared trees and bases".into()));
        }
        let max_rank = row_basis.ranks().into_iter().chain(col_basis.ranks()).max().unwrap_or(0);
        Ok(Self {
            bct,
            close,
            row_basis,
            col_basis,
            interactions,
            eps,
            symmetric,
            report: BuildReport { insufficient_block_size: 0, max_rank },
        })
    }

    pub fn size(&self) -> usize {
        self.bct.row_tree.n_points()
    }

    /// `y = A x` in input ordering via upward, interaction, downward and nearfield passes.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.size();
        if x.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: x.len() });
        }
        let (rt, ct) = (&self.bct.row_tree, &self.bct.col_tree);
        let xt = DVector::from_iterator(n, ct.perm.iter().map(|&i| x[i]));

        // upward pass over the column tree
        let mut xhat: Vec<DVector<f64>> = vec![DVector::zeros(0); ct.clusters.len()];
        for level in ct.levels.iter().rev() {
            let vals: Vec<DVector<f64>> = level
                .par_iter()
                .map(|&s| {
                    let basis = &self.col_basis.mats[s];
                    match ct.clusters[s].children {
                        None => basis.tr_mul(&xt.rows_range(ct.clusters[s].range.clone())),
                        Some([a, b]) => {
                            let stacked = DVector::from_iterator(
                                xhat[a].len() + xhat[b].len(),
                                xhat[a].iter().chain(xhat[b].iter()).copied(),
                            );
                            basis.tr_mul(&stacked)
                        }
                    }
                })
                .collect();
            for (&s, v) in level.iter().zip(vals) {
                xhat[s] = v;
            }
        }

        // interaction pass, grouped by row cluster in list order
        let mut yhat: Vec<DVector<f64>> = (0..rt.clusters.len()).map(|t| DVector::zeros(self.row_basis.rank(t))).collect();
        for (i, &(t, s)) in self.bct.admissible.iter().enumerate() {
            yhat[t] += &self.interactions[i] * &xhat[s];
        }

        // downward pass over the row tree
        let mut yt = DVector::zeros(n);
        for level in &rt.levels {
            for &t in level {
                let basis = &self.row_basis.mats[t];
                let contribution = basis * &yhat[t];
                match rt.clusters[t].children {
                    None => {
                        let mut seg = yt.rows_range_mut(rt.clusters[t].range.clone());
                        seg += contribution;
                    }
                    Some([a, b]) => {
                        let ka = yhat[a].len();
                        yhat[a] += contribution.rows(0, ka);
                        yhat[b] += contribution.rows(ka, contribution.len() - ka);
                    }
                }
            }
        }

        for (i, &(t, s)) in self.bct.inadmissible.iter().enumerate() {
            let prod = &self.close[i] * xt.rows_range(ct.clusters[s].range.clone());
            let mut seg = yt.rows_range_mut(rt.clusters[t].range.clone());
            seg += prod;
        }

        let mut y = vec![0.0; n];
        for (p, &orig) in rt.perm.iter().enumerate() {
            y[orig] = yt[p];
        }
        Ok(y)
    }

    /// Dense `N x N` expansion of the representation, in input ordering.
    pub fn densify(&self) -> Result<DMatrix<f64>> {
        self.densify_capped(ORACLE_CAP)
    }

    pub fn densify_capped(&self, cap: usize) -> Result<DMatrix<f64>> {
        let n = self.size();
        if n > cap {
            return Err(Error::OracleTooLarge { n, cap });
        }
        let (rt, ct) = (&self.bct.row_tree, &self.bct.col_tree);
        let mut tree_order = DMatrix::zeros(n, n);
        for (i, &(t, s)) in self.bct.inadmissible.iter().enumerate() {
            let (r, c) = (&rt.clusters[t].range, &ct.clusters[s].range);
            tree_order.view_mut((r.start, c.start), (r.len(), c.len())).copy_from(&self.close[i]);
        }
        let row_eff = self.row_basis.expand(rt);
        let col_eff = if self.symmetric { row_eff.clone() } else { self.col_basis.expand(ct) };
        for (i, &(t, s)) in self.bct.admissible.iter().enumerate() {
            let (r, c) = (&rt.clusters[t].range, &ct.clusters[s].range);
            let block = &row_eff[t] * &self.interactions[i] * col_eff[s].transpose();
            tree_order.view_mut((r.start, c.start), (r.len(), c.len())).copy_from(&block);
        }
        let mut out = DMatrix::zeros(n, n);
        for q in 0..n {
            for p in 0..n {
                out[(rt.perm[p], ct.perm[q])] = tree_order[(p, q)];
            }
        }
        Ok(out)
    }

    pub fn storage(&self) -> StorageReport {
        let close = self.close.iter().map(|m| m.len()).sum();
        let mut leaf_bases = 0;
        let mut transfers = 0;
        let mut count = |tree: &ClusterTree, basis: &ClusterBasis| {
            for (t, m) in basis.mats.iter().enumerate() {
                if tree.clusters[t].is_leaf() {
                    leaf_bases += m.len();
                } else {
                    transfers += m.len();
                }
            }
        };
        count(&self.bct.row_tree, &self.row_basis);
        if !self.symmetric {
            count(&self.bct.col_tree, &self.col_basis);
        }
        let interactions = self.interactions.iter().map(|m| m.len()).sum();
        let n = self.size();
        StorageReport {
            close,
            leaf_bases,
            transfers,
            interactions,
            total: close + leaf_bases + transfers + interactions,
            dense: n * n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ClusterTree, PointCloud};
    use crate::kernels::{dense_assemble, FnSource, KernelMatrix, KernelSpec};

    fn setup(n: usize, dim: usize, leaf: usize, eta: f64) -> (PointCloud, BlockClusterTree) {
        let cloud = PointCloud::uniform_random(dim, n, 42).unwrap();
        let tree = ClusterTree::build(&cloud, leaf).unwrap();
        (cloud, BlockClusterTree::symmetric(tree, eta).unwrap())
    }

    fn identity(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn no_farfield_means_exact_close_matrix() {
        let (cloud, bct) = setup(200, 2, 16, 0.0);
        let spec = KernelSpec::GaussShifted;
        let h2 = H2Matrix::build(&KernelMatrix::new(spec, &cloud).unwrap(), bct, 1e-6).unwrap();
        assert!(h2.interactions.is_empty());
        assert!(h2.row_basis.ranks().iter().all(|&k| k == 0));
        let a = dense_assemble(&spec, &cloud, &identity(200)).unwrap();
        assert_eq!(h2.densify().unwrap(), a);
        let x: Vec<f64> = (0..200).map(|i| (i as f64).sin()).collect();
        let y = h2.matvec(&x).unwrap();
        let exact = &a * DVector::from_vec(x);
        for (u, v) in y.iter().zip(exact.iter()) {
            assert!((u - v).abs() <= 1e-13 * v.abs().max(1.0));
        }
        assert_eq!(h2.storage().total, h2.storage().close);
        assert_eq!(h2.storage().close, 200 * 200);
    }

    #[test]
    fn separable_kernel_has_rank_one_and_exact_reconstruction() {
        let (cloud, bct) = setup(512, 2, 16, 1.0);
        let f = |i: usize| 1.0 + cloud.point(i)[0];
        let g = |j: usize| (cloud.point(j)[1] * 3.0).cos() + 2.0;
        let source = FnSource { n: 512, f: |i: usize, j: usize| f(i) * g(j), symmetric: false };
        let h2 = H2Matrix::build(&source, bct.clone(), 1e-8).unwrap();
        assert!(!h2.symmetric);
        let has_far: Vec<bool> = {
            let mut v = vec![false; bct.row_tree.clusters.len()];
            for &(t, _) in &bct.admissible {
                // descendants of a far cluster carry its farfield too
                let mut stack = vec![t];
                while let Some(x) = stack.pop() {
                    v[x] = true;
                    if let Some(k) = bct.row_tree.clusters[x].children {
                        stack.extend(k);
                    }
                }
            }
            v
        };
        for (t, &far) in has_far.iter().enumerate() {
            assert_eq!(h2.row_basis.rank(t), usize::from(far), "cluster {t}");
        }
        let dense = dense_from(&source, 512);
        let err = (h2.densify().unwrap() - &dense).norm() / dense.norm();
        assert!(err < 1e-13, "err {err}");
    }

    fn dense_from<S: EntrySource>(s: &S, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| s.entry(i, j))
    }

    #[test]
    fn gauss_approximation_and_matvec_accuracy() {
        let (cloud, bct) = setup(1024, 2, 32, 1.0);
        let spec = KernelSpec::GaussShifted;
        let h2 = H2Matrix::build(&KernelMatrix::new(spec, &cloud).unwrap(), bct, 1e-6).unwrap();
        assert!(h2.symmetric);
        assert!(!h2.interactions.is_empty());
        let a = dense_assemble(&spec, &cloud, &identity(1024)).unwrap();
        let dense = h2.densify().unwrap();
        let err = (&dense - &a).norm() / a.norm();
        assert!(err <= 1e-5, "relative error {err}");

        let x = DVector::from_fn(1024, |i, _| ((i * 37 % 101) as f64 / 50.0) - 1.0);
        let y = DVector::from_vec(h2.matvec(x.as_slice()).unwrap());
        let ax = &a * &x;
        assert!((&y - &ax).norm() / ax.norm() <= 1e-5);
        let yd = &dense * &x;
        assert!((&y - &yd).norm() / yd.norm() <= 1e-12);
    }

    #[test]
    fn matvec_columns_match_densify() {
        let (cloud, bct) = setup(300, 3, 16, 1.5);
        let h2 = H2Matrix::build(&KernelMatrix::new(KernelSpec::InvDistance, &cloud).unwrap(), bct, 1e-6).unwrap();
        let dense = h2.densify().unwrap();
        for j in [0, 17, 299] {
            let mut e = vec![0.0; 300];
            e[j] = 1.0;
            let col = DVector::from_vec(h2.matvec(&e).unwrap());
            let expect = dense.column(j).into_owned();
            assert!((&col - &expect).norm() <= 1e-12 * expect.norm());
        }
        assert!(h2.matvec(&[0.0; 299]).is_err());
        assert!(h2.matvec(&[0.0; 300]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn symmetric_build_mirrors_interactions() {
        let (cloud, bct) = setup(512, 2, 16, 1.0);
        let h2 = H2Matrix::build(&KernelMatrix::new(KernelSpec::InvDistance, &cloud).unwrap(), bct, 1e-6).unwrap();
        assert_eq!(h2.row_basis, h2.col_basis);
        for (i, &(t, s)) in h2.bct.admissible.iter().enumerate() {
            let j = h2.bct.admissible.binary_search(&(s, t)).unwrap();
            assert_eq!(h2.interactions[i], h2.interactions[j].transpose());
        }
        for (i, &(t, s)) in h2.bct.inadmissible.iter().enumerate() {
            let j = h2.bct.inadmissible.binary_search(&(s, t)).unwrap();
            assert_eq!(h2.close[i], h2.close[j].transpose());
        }
    }

    #[test]
    fn nested_basis_expansion_matches_explicit_product() {
        let (cloud, bct) = setup(256, 2, 16, 1.0);
        let h2 = H2Matrix::build(&KernelMatrix::new(KernelSpec::GaussShifted, &cloud).unwrap(), bct, 1e-6).unwrap();
        let tree = &h2.bct.row_tree;
        let eff = h2.row_basis.expand(tree);
        for t in 0..tree.clusters.len() {
            assert!(h2.row_basis.rank(t) <= tree.leaf_size);
            if let Some([a, b]) = tree.clusters[t].children {
                let mut stacked = DMatrix::zeros(tree.clusters[t].size(), eff[a].ncols() + eff[b].ncols());
                stacked.view_mut((0, 0), eff[a].shape()).copy_from(&eff[a]);
                stacked.view_mut((eff[a].nrows(), eff[a].ncols()), eff[b].shape()).copy_from(&eff[b]);
                let expect = stacked * &h2.row_basis.mats[t];
                assert!((&eff[t] - expect).norm() <= 1e-14 * (1.0 + eff[t].norm()));
            }
        }
    }

    #[test]
    fn invalid_eps_is_rejected() {
        let (cloud, bct) = setup(64, 2, 16, 1.0);
        let src = KernelMatrix::new(KernelSpec::GaussShifted, &cloud).unwrap();
        assert!(H2Matrix::build(&src, bct.clone(), 0.0).is_err());
        assert!(H2Matrix::build(&src, bct, 1.0).is_err());
    }
}
