//! Point clouds, balanced cluster trees and admissibility-labelled block
//! cluster trees.
//!
//! Cluster trees are built by recursive median splits along the longest
//! bounding-box axis. Every split sends `ceil(n/2)` indices to the left
//! child, so all leaves end up at the same depth and hold between
//! `leaf_size/2` and `leaf_size` indices.

use std::io::{BufRead, Read, Write};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    dim: usize,
    coords: Vec<f64>,
}

impl PointCloud {
    /// Builds a cloud from a flat row-major coordinate array.
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::InvalidCloud(format!("dimension {dim} (expected 2 or 3)")));
        }
        if coords.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if coords.len() % dim != 0 {
            return Err(Error::InvalidCloud(format!(
                "{} coordinates is not a multiple of dim {dim}",
                coords.len()
            )));
        }
        if let Some(bad) = coords.iter().position(|c| !c.is_finite()) {
            return Err(Error::InvalidCloud(format!("non-finite coordinate in point {}", bad / dim)));
        }
        Ok(Self { dim, coords })
    }

    pub fn from_points(dim: usize, points: &[Vec<f64>]) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| p.len() != dim) {
            return Err(Error::InvalidCloud(format!("point with {} coordinates, dim {dim}", p.len())));
        }
        Self::new(dim, points.iter().flatten().copied().collect())
    }

    /// `n` points drawn uniformly from the unit square/cube with a ChaCha8 stream.
    pub fn uniform_random(dim: usize, n: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = (0..n * dim).map(|_| rng.gen::<f64>()).collect();
        Self::new(dim, coords)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Reads whitespace-separated rows `x y [z]`. Blank lines and `#` comments are skipped.
    pub fn read_text<R: BufRead>(reader: R) -> Result<Self> {
        let mut dim = 0;
        let mut coords = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|tok| tok.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
            if dim == 0 {
                dim = row.len();
            } else if row.len() != dim {
                return Err(Error::Format(format!(
                    "line {}: expected {dim} coordinates, found {}",
                    lineno + 1,
                    row.len()
                )));
            }
            coords.extend(row);
        }
        if coords.is_empty() {
            return Err(Error::EmptyCloud);
        }
        Self::new(dim, coords)
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        for i in 0..self.len() {
            let row: Vec<String> = self.point(i).iter().map(|c| format!("{c:.17e}")).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        Ok(())
    }

    /// Binary cache: little-endian `u64` dim, `u64` N, then `N*dim` `f64` values.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for c in &self.coords {
            w.write_all(&c.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        let dim = u64::from_le_bytes(buf) as usize;
        r.read_exact(&mut buf)?;
        let n = u64::from_le_bytes(buf) as usize;
        let mut coords = Vec::with_capacity(n * dim);
        for _ in 0..n * dim {
            r.read_exact(&mut buf)?;
            coords.push(f64::from_le_bytes(buf));
        }
        Self::new(dim, coords)
    }
}

/// Axis-aligned box given by per-axis `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundingBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoundingBox {
    fn of(points: &PointCloud, indices: &[usize]) -> Self {
        let dim = points.dim();
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for &i in indices {
            for (k, &c) in points.point(i).iter().enumerate() {
                lo[k] = lo[k].min(c);
                hi[k] = hi[k].max(c);
            }
        }
        Self { lo, hi }
    }

    pub fn diameter(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| (h - l) * (h - l)).sum::<f64>().sqrt()
    }

    /// Euclidean distance between the two boxes (zero when they overlap).
    pub fn distance(&self, other: &BoundingBox) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .zip(other.lo.iter().zip(&other.hi))
            .map(|((&l1, &h1), (&l2, &h2))| {
                let gap = (l2 - h1).max(l1 - h2).max(0.0);
                gap * gap
            })
            .sum::<f64>()
            .sqrt()
    }

    fn longest_axis(&self) -> usize {
        let mut best = 0;
        for k in 1..self.lo.len() {
            if self.hi[k] - self.lo[k] > self.hi[best] - self.lo[best] {
                best = k;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Contiguous range into the tree's permuted index array.
    pub range: Range<usize>,
    pub bbox: BoundingBox,
    pub children: Option<[usize; 2]>,
    pub parent: Option<usize>,
    pub level: usize,
}

impl Cluster {
    pub fn size(&self) -> usize {
        self.range.len()
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

/// Balanced binary cluster tree. Cluster ids are assigned breadth first, so
/// `levels[d]` lists the clusters of depth `d` from left to right.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTree {
    pub clusters: Vec<Cluster>,
    /// `perm[p]` is the original index of the point stored at tree position `p`.
    pub perm: Vec<usize>,
    pub levels: Vec<Vec<usize>>,
    pub leaf_size: usize,
}

impl ClusterTree {
    pub fn build(points: &PointCloud, leaf_size: usize) -> Result<Self> {
        if leaf_size < 2 {
            return Err(Error::InvalidLeafSize(leaf_size));
        }
        let n = points.len();
        if n == 0 {
            return Err(Error::EmptyCloud);
        }
        let mut depth = 0;
        while n.div_ceil(1 << depth) > leaf_size {
            depth += 1;
        }

        let mut perm: Vec<usize> = (0..n).collect();
        let mut clusters = vec![Cluster {
            range: 0..n,
            bbox: BoundingBox::of(points, &perm),
            children: None,
            parent: None,
            level: 0,
        }];
        let mut levels = vec![vec![0]];
        for level in 0..depth {
            let mut next = Vec::with_capacity(2 * levels[level].len());
            for &id in &levels[level] {
                let range = clusters[id].range.clone();
                let axis = clusters[id].bbox.longest_axis();
                let slice = &mut perm[range.clone()];
                // stable sort keeps index order for ties, including fully degenerate clouds
                slice.sort_by(|&a, &b| points.point(a)[axis].total_cmp(&points.point(b)[axis]));
                let mid = range.start + range.len().div_ceil(2);
                let mut kids = [0; 2];
                for (slot, sub) in [range.start..mid, mid..range.end].into_iter().enumerate() {
                    let child = clusters.len();
                    clusters.push(Cluster {
                        bbox: BoundingBox::of(points, &perm[sub.clone()]),
                        range: sub,
                        children: None,
                        parent: Some(id),
                        level: level + 1,
                    });
                    kids[slot] = child;
                    next.push(child);
                }
                clusters[id].children = Some(kids);
            }
            levels.push(next);
        }
        Ok(Self { clusters, perm, levels, leaf_size })
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn n_points(&self) -> usize {
        self.perm.len()
    }

    /// Depth of the (uniform-depth) leaves; 0 when the root is a leaf.
    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn leaves(&self) -> &[usize] {
        &self.levels[self.depth()]
    }

    /// `inverse[original index] = tree position`.
    pub fn inverse_perm(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (pos, &orig) in self.perm.iter().enumerate() {
            inv[orig] = pos;
        }
        inv
    }
}

/// Strong admissibility: `max(diam_t, diam_s) <= eta * dist(t, s)` with a
/// strictly positive distance. Shrinking boxes can only make it easier to
/// satisfy, so admissibility is inherited by children.
pub fn is_admissible(t: &Cluster, s: &Cluster, eta: f64) -> bool {
    let dist = t.bbox.distance(&s.bbox);
    if dist <= 0.0 || eta <= 0.0 {
        return false;
    }
    t.bbox.diameter().max(s.bbox.diameter()) <= eta * dist
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockClusterTree {
    pub row_tree: ClusterTree,
    pub col_tree: ClusterTree,
    /// Farfield leaves `(t, s)`, sorted.
    pub admissible: Vec<(usize, usize)>,
    /// Nearfield leaves `(t, s)`, sorted. Always pairs of leaf clusters.
    pub inadmissible: Vec<(usize, usize)>,
    pub eta: f64,
}

impl BlockClusterTree {
    pub fn build(row_tree: ClusterTree, col_tree: ClusterTree, eta: f64) -> Result<Self> {
        if row_tree.depth() != col_tree.depth() {
            return Err(Error::UnbalancedTrees { row: row_tree.depth(), col: col_tree.depth() });
        }
        if eta.is_nan() || eta < 0.0 {
            return Err(Error::InvalidArgument(format!("eta must be non-negative, got {eta}")));
        }
        let mut admissible = Vec::new();
        let mut inadmissible = Vec::new();
        let mut stack = vec![(row_tree.root(), col_tree.root())];
        while let Some((t, s)) = stack.pop() {
            let (ct, cs) = (&row_tree.clusters[t], &col_tree.clusters[s]);
            if is_admissible(ct, cs, eta) {
                admissible.push((t, s));
                continue;
            }
            match (ct.children, cs.children) {
                (None, None) => inadmissible.push((t, s)),
                (Some(tk), Some(sk)) => {
                    for &a in &tk {
                        for &b in &sk {
                            stack.push((a, b));
                        }
                    }
                }
                _ => {
                    return Err(Error::UnbalancedTrees { row: ct.level, col: cs.level });
                }
            }
        }
        admissible.sort_unstable();
        inadmissible.sort_unstable();
        Ok(Self { row_tree, col_tree, admissible, inadmissible, eta })
    }

    /// Convenience constructor for the square case with one shared tree.
    pub fn symmetric(tree: ClusterTree, eta: f64) -> Result<Self> {
        Self::build(tree.clone(), tree, eta)
    }

    /// Whether row and column trees are the same object (same partition and permutation).
    pub fn is_symmetric(&self) -> bool {
        self.row_tree.perm == self.col_tree.perm
            && self.row_tree.clusters.len() == self.col_tree.clusters.len()
            && self
                .row_tree
                .clusters
                .iter()
                .zip(&self.col_tree.clusters)
                .all(|(a, b)| a.range == b.range)
    }

    /// Accumulates every leaf block into an `n_rows x n_cols` counter grid;
    /// a valid partition leaves exactly one hit per cell.
    pub fn coverage_counts(&self) -> Vec<u8> {
        let nr = self.row_tree.n_points();
        let nc = self.col_tree.n_points();
        let mut mask = vec![0u8; nr * nc];
        for &(t, s) in self.admissible.iter().chain(&self.inadmissible) {
            for i in self.row_tree.clusters[t].range.clone() {
                for j in self.col_tree.clusters[s].range.clone() {
                    mask[i * nc + j] = mask[i * nc + j].saturating_add(1);
                }
            }
        }
        mask
    }
}
