//! Non-extensive sparse factorization `A = U S V^T` of an H² matrix.
//!
//! Every cluster `t` owns a local index space of size `m_t`: its points for a
//! leaf, the stacked basis slots of its two children otherwise. Its square
//! completion `Q_t = [basis | complement]` rotates that space so that only the
//! first `k_t` slots ("basis") still couple to the farfield. The remaining
//! `m_t - k_t` slots are final and go straight into `S`; the basis slots of two
//! siblings form the parent's local space and the process repeats one level
//! up. Level by level this gives
//!
//! ```text
//! S = U_L^T (... U_1^T (U_0^T C V_0 + F_1) V_1 + ...) V_L + F_top
//! ```
//!
//! where `F_d` are the interaction matrices of depth `d`, already expressed in
//! rotated coordinates. `S` is assembled blockwise from the H² coefficients;
//! no `N x N` operator is ever formed.
//!
//! Final index order in `S`: the non-basis slots of the leaves (cluster
//! order), then those of the next level up, and so on, with the root's basis
//! slots last.

use std::collections::{BTreeMap, HashSet};

use nalgebra::{DMatrix, DMatrixView};
use rayon::prelude::*;
use serde::Serialize;

use crate::dense::{orthogonal_completion, orthogonality_defect, orthonormalize};
use crate::error::{Error, Result};
use crate::geometry::ClusterTree;
use crate::h2::{ClusterBasis, H2Matrix};
use crate::sparse::SparseMatrix;

const ORTHONORMAL_TOL: f64 = 1e-13;
const RANK_TOL: f64 = 1e-14;
/// Bases with a larger defect are rejected by the assembly.
const ASSEMBLY_ORTHO_TOL: f64 = 1e-10;
/// Relative (to `eps * max|C|`) magnitude below which entries of `S` are dropped.
pub const DROP_FACTOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RankReduction {
    pub cluster: usize,
    pub column_tree: bool,
    pub from: usize,
    pub to: usize,
}

/// H² matrix with orthonormal bases plus the square completion of every
/// cluster basis (`None` stands for the identity of a rank-0 cluster).
#[derive(Debug, Clone)]
pub struct OrthogonalizedH2 {
    pub h2: H2Matrix,
    pub row_completions: Vec<Option<DMatrix<f64>>>,
    pub col_completions: Vec<Option<DMatrix<f64>>>,
    pub rank_reductions: Vec<RankReduction>,
}

/// Rewrites one cluster basis with orthonormal columns. Returns the new basis
/// and, per cluster, the factor `X_t` with `old basis = new basis * X_t`
/// (`None` when the basis was already orthonormal).
fn orthogonalize_basis(
    tree: &ClusterTree,
    basis: &ClusterBasis,
    column_tree: bool,
) -> (ClusterBasis, Vec<Option<DMatrix<f64>>>, Vec<RankReduction>) {
    let n = tree.clusters.len();
    let mut mats: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); n];
    let mut factors: Vec<Option<DMatrix<f64>>> = vec![None; n];
    let mut reductions = Vec::new();
    for level in tree.levels.iter().rev() {
        for &t in level {
            let old = &basis.mats[t];
            let adjusted = match tree.clusters[t].children {
                Some([a, b]) if factors[a].is_some() || factors[b].is_some() => {
                    let ka = basis.rank(a);
                    let kb = basis.rank(b);
                    let top = match &factors[a] {
                        Some(x) => x * old.rows(0, ka),
                        None => old.rows(0, ka).into_owned(),
                    };
                    let bottom = match &factors[b] {
                        Some(x) => x * old.rows(ka, kb),
                        None => old.rows(ka, kb).into_owned(),
                    };
                    let mut m = DMatrix::zeros(top.nrows() + bottom.nrows(), old.ncols());
                    m.rows_mut(0, top.nrows()).copy_from(&top);
                    m.rows_mut(top.nrows(), bottom.nrows()).copy_from(&bottom);
                    m
                }
                _ => old.clone(),
            };
            if adjusted.ncols() == 0 || orthogonality_defect(&adjusted) <= ORTHONORMAL_TOL {
                mats[t] = adjusted;
                continue;
            }
            let (q, x, reduced) = orthonormalize(&adjusted, RANK_TOL);
            if reduced {
                log::warn!("cluster {t}: basis rank reduced from {} to {}", adjusted.ncols(), q.ncols());
                reductions.push(RankReduction { cluster: t, column_tree, from: adjusted.ncols(), to: q.ncols() });
            }
            mats[t] = q;
            factors[t] = Some(x);
        }
    }
    (ClusterBasis { mats }, factors, reductions)
}

fn completions(basis: &ClusterBasis) -> Vec<Option<DMatrix<f64>>> {
    basis.mats.iter().map(|b| (b.ncols() > 0).then(|| orthogonal_completion(b))).collect()
}

/// Orthonormalizes all leaf bases and transfer matrices bottom-up and folds the
/// triangular factors into the parents and the interaction matrices, so the
/// represented operator is unchanged.
pub fn orthogonalize_bases(h2: &H2Matrix) -> OrthogonalizedH2 {
    let (row_basis, row_x, mut reductions) = orthogonalize_basis(&h2.bct.row_tree, &h2.row_basis, false);
    let (col_basis, col_x) = if h2.symmetric {
        (row_basis.clone(), row_x.clone())
    } else {
        let (b, x, r) = orthogonalize_basis(&h2.bct.col_tree, &h2.col_basis, true);
        reductions.extend(r);
        (b, x)
    };
    let interactions = h2
        .bct
        .admissible
        .iter()
        .zip(&h2.interactions)
        .map(|(&(t, s), d)| {
            let left = match &row_x[t] {
                Some(x) => x * d,
                None => d.clone(),
            };
            match &col_x[s] {
                Some(x) => left * x.transpose(),
                None => left,
            }
        })
        .collect();
    let row_completions = completions(&row_basis);
    let col_completions = if h2.symmetric { row_completions.clone() } else { completions(&col_basis) };
    let mut out = h2.clone();
    out.row_basis = row_basis;
    out.col_basis = col_basis;
    out.interactions = interactions;
    out.report.max_rank = out.row_basis.ranks().into_iter().chain(out.col_basis.ranks()).max().unwrap_or(0);
    OrthogonalizedH2 { h2: out, row_completions, col_completions, rank_reductions: reductions }
}

/// One factor of a cascade: a gather permutation followed by a
/// block-diagonal orthogonal matrix (identity outside the listed blocks).
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeStage {
    /// `None` for the identity; otherwise `y[i] = x[perm[i]]`.
    pub perm: Option<Vec<usize>>,
    /// `(offset, Q)` square orthogonal diagonal blocks.
    pub blocks: Vec<(usize, DMatrix<f64>)>,
}

/// `U^T = B_K P_K ... B_0 P_0`: applying `U^T` runs the stages in order.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalCascade {
    pub n: usize,
    pub stages: Vec<CascadeStage>,
}

impl OrthogonalCascade {
    pub fn identity(n: usize) -> Self {
        Self { n, stages: vec![] }
    }

    /// `U x`, or `U^T x` when `transposed`.
    pub fn apply(&self, x: &[f64], transposed: bool) -> Result<Vec<f64>> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: x.len() });
        }
        let mut v = x.to_vec();
        if transposed {
            for stage in &self.stages {
                if let Some(p) = &stage.perm {
                    v = p.iter().map(|&i| v[i]).collect();
                }
                for (off, q) in &stage.blocks {
                    let seg = nalgebra::DVectorView::from_slice(&v[*off..*off + q.nrows()], q.nrows());
                    let r = q.tr_mul(&seg);
                    v[*off..*off + q.nrows()].copy_from_slice(r.as_slice());
                }
            }
        } else {
            for stage in self.stages.iter().rev() {
                for (off, q) in &stage.blocks {
                    let seg = nalgebra::DVectorView::from_slice(&v[*off..*off + q.nrows()], q.nrows());
                    let r = q * seg;
                    v[*off..*off + q.nrows()].copy_from_slice(r.as_slice());
                }
                if let Some(p) = &stage.perm {
                    let mut w = vec![0.0; self.n];
                    for (i, &src) in p.iter().enumerate() {
                        w[src] = v[i];
                    }
                    v = w;
                }
            }
        }
        Ok(v)
    }

    /// Overwrites `m` with `U m` (or `U^T m`), acting on all columns at once.
    pub fn apply_to_columns(&self, m: &mut DMatrix<f64>, transposed: bool) -> Result<()> {
        if m.nrows() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: m.nrows() });
        }
        let rotate = |m: &mut DMatrix<f64>, stage: &CascadeStage| {
            for (off, q) in &stage.blocks {
                let rows = m.rows(*off, q.nrows());
                let r = if transposed { q.tr_mul(&rows) } else { q * rows };
                m.rows_mut(*off, q.nrows()).copy_from(&r);
            }
        };
        if transposed {
            for stage in &self.stages {
                if let Some(p) = &stage.perm {
                    *m = m.select_rows(p.iter());
                }
                rotate(m, stage);
            }
        } else {
            for stage in self.stages.iter().rev() {
                rotate(m, stage);
                if let Some(p) = &stage.perm {
                    let mut inv = vec![0; self.n];
                    for (i, &src) in p.iter().enumerate() {
                        inv[src] = i;
                    }
                    *m = m.select_rows(inv.iter());
                }
            }
        }
        Ok(())
    }

    /// Dense `U` (column `j` is `U e_j`).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut u = DMatrix::identity(self.n, self.n);
        self.apply_to_columns(&mut u, false).expect("sized");
        u
    }

    /// Largest `||Q^T Q - I||_F` over all stage blocks.
    pub fn max_stage_defect(&self) -> f64 {
        self.stages
            .iter()
            .flat_map(|s| s.blocks.iter())
            .map(|(_, q)| orthogonality_defect(q))
            .fold(0.0, f64::max)
    }

    pub fn stored_reals(&self) -> usize {
        self.stages.iter().flat_map(|s| s.blocks.iter()).map(|(_, q)| q.len()).sum()
    }
}

/// Per-level "non-basis first" permutation of the active region.
///
/// The active region starts at `active_start` and holds, for every cluster
/// of the level in order, `sizes[i]` local slots whose first `ranks[i]` are
/// basis slots. Non-basis slots of all clusters move to the front of the
/// region, basis slots after them; relative order is kept within each class.
pub fn build_level_permutation(n: usize, active_start: usize, sizes: &[usize], ranks: &[usize]) -> Result<Vec<usize>> {
    if sizes.len() != ranks.len() {
        return Err(Error::DimensionMismatch { expected: sizes.len(), got: ranks.len() });
    }
    if let Some((&m, &k)) = sizes.iter().zip(ranks).find(|(&m, &k)| k > m) {
        return Err(Error::InvalidRank { rank: k, size: m });
    }
    let total: usize = sizes.iter().sum();
    if active_start + total != n {
        return Err(Error::DimensionMismatch { expected: n, got: active_start + total });
    }
    let mut perm: Vec<usize> = (0..active_start).collect();
    let mut off = active_start;
    let mut basis = Vec::new();
    for (&m, &k) in sizes.iter().zip(ranks) {
        basis.extend(off..off + k);
        perm.extend(off + k..off + m);
        off += m;
    }
    perm.extend(basis);
    Ok(perm)
}

/// Index bookkeeping of one cluster tree. Cluster id `clusters.len()` is a
/// virtual "top" node holding the root's basis slots; it is never rotated.
struct Layout {
    rank: Vec<usize>,
    size: Vec<usize>,
    parent: Vec<usize>,
    /// Offset inside the parent's local slots.
    offset: Vec<usize>,
    /// First position in `S` of the cluster's non-basis slots.
    fin: Vec<usize>,
    /// First position of each depth's active region.
    active_start: Vec<usize>,
    /// Offset of each cluster inside its depth's active region.
    active_off: Vec<usize>,
    top: usize,
}

impl Layout {
    fn new(tree: &ClusterTree, basis: &ClusterBasis) -> Self {
        let nc = tree.clusters.len();
        let top = nc;
        let mut rank: Vec<usize> = basis.ranks();
        rank.push(0);
        let mut size = vec![0; nc + 1];
        let mut parent = vec![usize::MAX; nc + 1];
        let mut offset = vec![0; nc + 1];
        for (t, c) in tree.clusters.iter().enumerate() {
            size[t] = match c.children {
                None => c.size(),
                Some([a, b]) => {
                    parent[a] = t;
                    parent[b] = t;
                    offset[b] = rank[a];
                    rank[a] + rank[b]
                }
            };
        }
        parent[tree.root()] = top;
        size[top] = rank[tree.root()];
        let mut fin = vec![0; nc + 1];
        let mut active_start = vec![0; tree.levels.len()];
        let mut active_off = vec![0; nc + 1];
        let mut finalized = 0;
        for d in (0..tree.levels.len()).rev() {
            active_start[d] = finalized;
            let mut off = 0;
            for &t in &tree.levels[d] {
                active_off[t] = off;
                off += size[t];
            }
            for &t in &tree.levels[d] {
                fin[t] = finalized;
                finalized += size[t] - rank[t];
            }
        }
        fin[top] = finalized;
        Self { rank, size, parent, offset, fin, active_start, active_off, top }
    }

    fn cascade(&self, tree: &ClusterTree, completions: &[Option<DMatrix<f64>>]) -> Result<OrthogonalCascade> {
        let n = tree.n_points();
        let depth = tree.depth();
        let blocks_at = |d: usize| -> Vec<(usize, DMatrix<f64>)> {
            tree.levels[d]
                .iter()
                .filter_map(|&t| completions[t].as_ref().map(|q| (self.active_start[d] + self.active_off[t], q.clone())))
                .collect()
        };
        let identity_or = |p: Vec<usize>| (p.iter().enumerate().any(|(i, &j)| i != j)).then_some(p);
        let mut stages = vec![CascadeStage { perm: identity_or(tree.perm.clone()), blocks: blocks_at(depth) }];
        for d in (0..=depth).rev() {
            let level = &tree.levels[d];
            let sizes: Vec<usize> = level.iter().map(|&t| self.size[t]).collect();
            let ranks: Vec<usize> = level.iter().map(|&t| self.rank[t]).collect();
            let perm = build_level_permutation(n, self.active_start[d], &sizes, &ranks)?;
            let blocks = if d > 0 { blocks_at(d - 1) } else { vec![] };
            let stage = CascadeStage { perm: identity_or(perm), blocks };
            if stage.perm.is_some() || !stage.blocks.is_empty() {
                stages.push(stage);
            }
        }
        Ok(OrthogonalCascade { n, stages })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AssemblyReport {
    /// Entries of magnitude below `drop_threshold` left out of `S`.
    pub dropped: usize,
    pub drop_threshold: f64,
    /// Number of tree depths with a positive-rank cluster (compression levels).
    pub levels: usize,
    pub rank_reductions: Vec<RankReduction>,
}

/// `A = U S V^T` with orthogonal cascades `U`, `V` and an `N x N` sparse `S`.
#[derive(Debug, Clone)]
pub struct SparseFactorization {
    pub u: OrthogonalCascade,
    pub v: OrthogonalCascade,
    pub s: SparseMatrix,
    pub symmetric: bool,
    pub report: AssemblyReport,
}

impl SparseFactorization {
    /// Orthogonalizes the bases of `h2` and assembles the factorization.
    pub fn from_h2(h2: &H2Matrix) -> Result<Self> {
        let orth = orthogonalize_bases(h2);
        let mut f = assemble_sparse_factor(&orth.h2, &orth.row_completions, &orth.col_completions)?;
        f.report.rank_reductions = orth.rank_reductions;
        Ok(f)
    }

    pub fn size(&self) -> usize {
        self.s.n_rows
    }

    /// `U S V^T x` in input ordering.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let y = self.v.apply(x, true)?;
        let z = self.s.matvec(&y)?;
        self.u.apply(&z, false)
    }

    /// Dense `U S V^T` for oracle comparisons.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let u = self.u.to_dense();
        let v = if self.symmetric { u.clone() } else { self.v.to_dense() };
        u * self.s.to_dense() * v.transpose()
    }

    /// `||U^T A V - S||_F`, which equals `||A - U S V^T||_F` for orthogonal
    /// cascades but costs no dense products with `S`. `a` is in input ordering.
    pub fn projected_distance(&self, a: &DMatrix<f64>) -> Result<f64> {
        let mut r = a.clone();
        self.u.apply_to_columns(&mut r, true)?;
        let mut rt = r.transpose();
        self.v.apply_to_columns(&mut rt, true)?;
        for (i, j, v) in self.s.iter() {
            rt[(j, i)] -= v;
        }
        Ok(rt.norm())
    }

    pub fn stored_reals(&self) -> usize {
        let cascades = self.u.stored_reals() + if self.symmetric { 0 } else { self.v.stored_reals() };
        cascades + self.s.nnz()
    }
}

type Corner<'a> = DMatrixView<'a, f64>;

/// Adds `piece` into `map[key]` (created as a zero `shape` matrix) at `at`.
fn accumulate<K: Ord>(map: &mut BTreeMap<K, DMatrix<f64>>, key: K, shape: (usize, usize), at: (usize, usize), piece: Corner) {
    if piece.nrows() == 0 || piece.ncols() == 0 {
        return;
    }
    let target = map.entry(key).or_insert_with(|| DMatrix::zeros(shape.0, shape.1));
    let mut view = target.view_mut(at, piece.shape());
    view += piece;
}

type Entry = (u32, u32, f64);

fn push_entries(out: &mut Vec<Entry>, row0: usize, col0: usize, m: Corner) {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            let v = m[(i, j)];
            if v != 0.0 {
                out.push(((row0 + i) as u32, (col0 + j) as u32, v));
            }
        }
    }
}

/// CSR from entries, sorted in place to keep the peak footprint low.
fn compress(n: usize, mut entries: Vec<Entry>) -> SparseMatrix {
    entries.sort_unstable_by_key(|e| (e.0, e.1));
    let mut row_ptr = vec![0usize; n + 1];
    let mut col_idx: Vec<usize> = Vec::with_capacity(entries.len());
    let mut values: Vec<f64> = Vec::with_capacity(entries.len());
    let mut last = None;
    for (i, j, v) in entries {
        if last == Some((i, j)) {
            *values.last_mut().expect("entry present") += v;
            continue;
        }
        last = Some((i, j));
        row_ptr[i as usize + 1] += 1;
        col_idx.push(j as usize);
        values.push(v);
    }
    for i in 0..n {
        row_ptr[i + 1] += row_ptr[i];
    }
    SparseMatrix { n_rows: n, n_cols: n, row_ptr, col_idx, values }
}

/// `(S + S^T) / 2`, in place when the pattern is already symmetric.
fn symmetrize(mut s: SparseMatrix) -> Result<SparseMatrix> {
    let mirror = |s: &SparseMatrix, i: usize, j: usize| {
        let lo = s.row_ptr[j];
        s.col_idx[lo..s.row_ptr[j + 1]].binary_search(&i).ok().map(|p| lo + p)
    };
    let symmetric_pattern = (0..s.n_rows).all(|i| {
        (s.row_ptr[i]..s.row_ptr[i + 1]).all(|k| mirror(&s, i, s.col_idx[k]).is_some())
    });
    if !symmetric_pattern {
        return s.add_scaled(0.5, &s.transpose(), 0.5);
    }
    for i in 0..s.n_rows {
        for k in s.row_ptr[i]..s.row_ptr[i + 1] {
            let j = s.col_idx[k];
            if j > i {
                let m = mirror(&s, i, j).expect("pattern checked");
                let avg = 0.5 * (s.values[k] + s.values[m]);
                s.values[k] = avg;
                s.values[m] = avg;
            }
        }
    }
    Ok(s)
}

/// Drops entries with magnitude below `threshold`; returns how many went.
fn drop_small(s: &mut SparseMatrix, threshold: f64) -> usize {
    let mut w = 0;
    let mut start = 0;
    for i in 0..s.n_rows {
        let end = s.row_ptr[i + 1];
        for k in start..end {
            if s.values[k].abs() >= threshold {
                s.col_idx[w] = s.col_idx[k];
                s.values[w] = s.values[k];
                w += 1;
            }
        }
        start = end;
        s.row_ptr[i + 1] = w;
    }
    let dropped = s.values.len() - w;
    s.col_idx.truncate(w);
    s.values.truncate(w);
    s.col_idx.shrink_to_fit();
    s.values.shrink_to_fit();
    dropped
}

fn check_orthonormal(basis: &ClusterBasis) -> Result<()> {
    for (t, m) in basis.mats.iter().enumerate() {
        if m.ncols() > 0 {
            let defect = orthogonality_defect(m);
            if defect > ASSEMBLY_ORTHO_TOL {
                return Err(Error::BasesNotOrthogonal { cluster: t, defect });
            }
        }
    }
    Ok(())
}

/// Assembles `S` from the coefficients of an H² matrix with orthonormal bases.
pub fn assemble_sparse_factor(
    h2: &H2Matrix,
    row_completions: &[Option<DMatrix<f64>>],
    col_completions: &[Option<DMatrix<f64>>],
) -> Result<SparseFactorization> {
    let (rt, ct) = (&h2.bct.row_tree, &h2.bct.col_tree);
    if rt.depth() != ct.depth() {
        return Err(Error::UnbalancedTrees { row: rt.depth(), col: ct.depth() });
    }
    check_orthonormal(&h2.row_basis)?;
    check_orthonormal(&h2.col_basis)?;
    let rl = Layout::new(rt, &h2.row_basis);
    let cl = Layout::new(ct, &h2.col_basis);
    for (layout, comps) in [(&rl, row_completions), (&cl, col_completions)] {
        for (t, q) in comps.iter().enumerate() {
            let expect = if layout.rank[t] > 0 { Some(layout.size[t]) } else { None };
            if q.as_ref().map(|q| q.nrows()) != expect {
                return Err(Error::InvalidArgument(format!("completion of cluster {t} has the wrong shape")));
            }
        }
    }
    let n = rt.n_points();
    if n > u32::MAX as usize {
        return Err(Error::InvalidArgument(format!("N = {n} is too large for the assembly index type")));
    }
    let depth = rt.depth();

    let mut far_by_level: Vec<Vec<usize>> = vec![Vec::new(); depth + 1];
    for (i, &(t, _)) in h2.bct.admissible.iter().enumerate() {
        far_by_level[rt.clusters[t].level].push(i);
    }

    let mut core: BTreeMap<(usize, usize), DMatrix<f64>> =
        h2.bct.inadmissible.iter().copied().zip(h2.close.iter().cloned()).collect();
    // finalized rows x active column slots, keyed by (column cluster, first row)
    let mut row_strips: BTreeMap<(usize, usize), DMatrix<f64>> = BTreeMap::new();
    // active row slots x finalized columns, keyed by (row cluster, first column)
    let mut col_strips: BTreeMap<(usize, usize), DMatrix<f64>> = BTreeMap::new();
    let mut triplets: Vec<Entry> = Vec::new();

    let rotate_rows = |t: usize, m: &DMatrix<f64>| -> DMatrix<f64> {
        match row_completions.get(t).and_then(|q| q.as_ref()) {
            Some(q) => q.tr_mul(m),
            None => m.clone(),
        }
    };
    let rotate_cols = |s: usize, m: &DMatrix<f64>| -> DMatrix<f64> {
        match col_completions.get(s).and_then(|q| q.as_ref()) {
            Some(q) => m * q,
            None => m.clone(),
        }
    };

    // depth `depth` down to 0, then the virtual top (`None`)
    let steps: Vec<Option<usize>> = (0..=depth).rev().map(Some).chain([None]).collect();
    for step in steps {
        let rotated: Vec<((usize, usize), DMatrix<f64>)> = std::mem::take(&mut core)
            .into_par_iter()
            .map(|((t, s), blk)| {
                let r = rotate_cols(s, &rotate_rows(t, &blk));
                ((t, s), r)
            })
            .collect();
        let mut next: BTreeMap<(usize, usize), DMatrix<f64>> = BTreeMap::new();
        for ((t, s), m) in rotated {
            let (kt, ks) = (rl.rank[t], cl.rank[s]);
            let (mt, ms) = m.shape();
            push_entries(&mut triplets, rl.fin[t], cl.fin[s], m.view((kt, ks), (mt - kt, ms - ks)));
            if step.is_none() {
                continue;
            }
            let (pt, ps) = (rl.parent[t], cl.parent[s]);
            accumulate(&mut col_strips, (pt, cl.fin[s]), (rl.size[pt], ms - ks), (rl.offset[t], 0), m.view((0, ks), (kt, ms - ks)));
            accumulate(&mut row_strips, (ps, rl.fin[t]), (mt - kt, cl.size[ps]), (0, cl.offset[s]), m.view((kt, 0), (mt - kt, ks)));
            accumulate(&mut next, (pt, ps), (rl.size[pt], cl.size[ps]), (rl.offset[t], cl.offset[s]), m.view((0, 0), (kt, ks)));
        }

        let level_cols: Vec<usize> = match step {
            Some(d) => ct.levels[d].clone(),
            None => vec![cl.top],
        };
        let level_rows: Vec<usize> = match step {
            Some(d) => rt.levels[d].clone(),
            None => vec![rl.top],
        };
        for &s in &level_cols {
            let keys: Vec<(usize, usize)> = row_strips.range((s, 0)..(s + 1, 0)).map(|(k, _)| *k).collect();
            for key in keys {
                let strip = rotate_cols(s, &row_strips.remove(&key).expect("key listed"));
                let row0 = key.1;
                let ks = cl.rank[s];
                push_entries(&mut triplets, row0, cl.fin[s], strip.view((0, ks), (strip.nrows(), strip.ncols() - ks)));
                if step.is_some() {
                    let ps = cl.parent[s];
                    accumulate(&mut row_strips, (ps, row0), (strip.nrows(), cl.size[ps]), (0, cl.offset[s]), strip.view((0, 0), (strip.nrows(), ks)));
                }
            }
        }
        for &t in &level_rows {
            let keys: Vec<(usize, usize)> = col_strips.range((t, 0)..(t + 1, 0)).map(|(k, _)| *k).collect();
            for key in keys {
                let strip = rotate_rows(t, &col_strips.remove(&key).expect("key listed"));
                let col0 = key.1;
                let kt = rl.rank[t];
                push_entries(&mut triplets, rl.fin[t], col0, strip.view((kt, 0), (strip.nrows() - kt, strip.ncols())));
                if step.is_some() {
                    let pt = rl.parent[t];
                    accumulate(&mut col_strips, (pt, col0), (rl.size[pt], strip.ncols()), (rl.offset[t], 0), strip.view((0, 0), (kt, strip.ncols())));
                }
            }
        }

        if let Some(d) = step {
            for &i in &far_by_level[d] {
                let (t, s) = h2.bct.admissible[i];
                let (pt, ps) = (rl.parent[t], cl.parent[s]);
                accumulate(&mut next, (pt, ps), (rl.size[pt], cl.size[ps]), (rl.offset[t], cl.offset[s]), h2.interactions[i].as_view());
            }
        }
        core = next;
    }
    debug_assert!(core.is_empty() && row_strips.is_empty() && col_strips.is_empty());

    let c_max = h2.close.iter().flat_map(|m| m.iter()).fold(0.0f64, |a, v| a.max(v.abs()));
    let drop_threshold = DROP_FACTOR * h2.eps * c_max;
    let mut s = compress(n, triplets);
    if h2.symmetric {
        s = symmetrize(s)?;
    }
    let dropped = drop_small(&mut s, drop_threshold);

    let u = rl.cascade(rt, row_completions)?;
    let v = if h2.symmetric { u.clone() } else { cl.cascade(ct, col_completions)? };
    let positive_depths: HashSet<usize> = rt
        .clusters
        .iter()
        .enumerate()
        .filter(|(t, _)| rl.rank[*t] > 0)
        .map(|(_, c)| c.level)
        .chain(ct.clusters.iter().enumerate().filter(|(s, _)| cl.rank[*s] > 0).map(|(_, c)| c.level))
        .collect();
    let report = AssemblyReport { dropped, drop_threshold, levels: positive_depths.len(), rank_reductions: vec![] };
    Ok(SparseFactorization { u, v, s, symmetric: h2.symmetric, report })
}

/// Outcome of comparing the nonzero block count of `S` with
/// `(4L + 6(2^-L - 1)) * #bsp(C)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub levels: usize,
    pub block_size: usize,
    /// Counting block size `r = B/2`.
    pub r: usize,
    /// Nonzero `B x B` blocks of the close matrix.
    pub close_blocks: usize,
    pub bound: f64,
    /// Nonzero `r x r` blocks of `S`.
    pub actual_blocks: usize,
    /// Every leaf has exactly `B` points and every rank is at most `B/2`.
    pub hypothesis_holds: bool,
    /// False when there are no compression levels (`L = 0`).
    pub applicable: bool,
    pub within_bound: bool,
}

pub fn check_sparsity_bound(f: &SparseFactorization, h2: &H2Matrix) -> BoundReport {
    let tree = &h2.bct.row_tree;
    let b = tree.leaf_size;
    let r = (b / 2).max(1);
    let levels = f.report.levels;
    let close_blocks = h2.close.iter().filter(|m| m.iter().any(|&v| v != 0.0)).count();
    let bound = (4.0 * levels as f64 + 6.0 * (0.5f64.powi(levels as i32) - 1.0)) * close_blocks as f64;
    let blocks: HashSet<(usize, usize)> = f.s.iter().map(|(i, j, _)| (i / r, j / r)).collect();
    let actual_blocks = blocks.len();
    let leaves_full = tree.leaves().iter().all(|&l| tree.clusters[l].size() == b)
        && h2.bct.col_tree.leaves().iter().all(|&l| h2.bct.col_tree.clusters[l].size() == b);
    let ranks_ok = h2.row_basis.ranks().into_iter().chain(h2.col_basis.ranks()).all(|k| k <= r);
    let applicable = levels > 0;
    BoundReport {
        levels,
        block_size: b,
        r,
        close_blocks,
        bound,
        actual_blocks,
        hypothesis_holds: leaves_full && ranks_ok,
        applicable,
        within_bound: (actual_blocks as f64) <= bound,
    }
}
