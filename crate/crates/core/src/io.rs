//! Binary container files and vector IO.
//!
//! All numbers are little endian. A container starts with the 8-byte magic
//! `H2SPARSE`, a `u32` kind (1 = H² matrix, 2 = sparse factorization) and a
//! `u32` format version. Matrices are written as `u64` rows, `u64` cols and
//! then the entries in column-major order as `f64`.
//!
//! H² payload:
//! header `u64 N`, `u64 dim`, `f64 eps`, `f64 eta`, `u8 symmetric`;
//! row tree, column tree; `u64` count and `(u64, u64)` pairs of the
//! admissible and inadmissible lists; close blocks; row basis matrices;
//! column basis matrices (omitted when symmetric); interaction matrices;
//! `u64` insufficient-block-size count.
//!
//! A tree is `u64 leaf_size`, `u64 clusters`, then per cluster
//! `u64 start, u64 end, i64 parent, i64 child0, i64 child1, u64 level`,
//! the bounding box (`dim` lows then `dim` highs), and finally the
//! permutation (`N` values of `u64`). Missing links are `-1`.
//!
//! Factorization payload:
//! `u64 N`, `u8 symmetric`, the `U` cascade, the `V` cascade (omitted when
//! symmetric), `S` in CSR form (`u64 rows, u64 cols, u64 nnz`, row pointers,
//! column indices, values) and the assembly report (`u64 dropped`,
//! `f64 threshold`, `u64 levels`). A cascade is `u64 stages`, then per stage
//! `u8 has_perm` (+ `N` indices), `u64 blocks` and per block `u64 offset`
//! followed by the matrix.

use std::io::{BufRead, Read, Write};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geometry::{BlockClusterTree, BoundingBox, Cluster, ClusterTree};
use crate::h2::{ClusterBasis, H2Matrix};
use crate::sparse::SparseMatrix;
use crate::sparsifier::{AssemblyReport, CascadeStage, OrthogonalCascade, SparseFactorization};

pub const MAGIC: &[u8; 8] = b"H2SPARSE";
pub const VERSION: u32 = 1;
const KIND_H2: u32 = 1;
const KIND_FACTOR: u32 = 2;

/// Refuse to allocate more than this many elements from a length field.
const MAX_LEN: u64 = 1 << 34;

struct Out<W: Write>(W);

impl<W: Write> Out<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.0.write_all(&[v])?)
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn u64(&mut self, v: usize) -> Result<()> {
        Ok(self.0.write_all(&(v as u64).to_le_bytes())?)
    }
    fn i64(&mut self, v: Option<usize>) -> Result<()> {
        let v = v.map_or(-1, |x| x as i64);
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn indices(&mut self, v: &[usize]) -> Result<()> {
        v.iter().try_for_each(|&x| self.u64(x))
    }
    fn floats(&mut self, v: &[f64]) -> Result<()> {
        v.iter().try_for_each(|&x| self.f64(x))
    }
    fn matrix(&mut self, m: &DMatrix<f64>) -> Result<()> {
        self.u64(m.nrows())?;
        self.u64(m.ncols())?;
        self.floats(m.as_slice())
    }
    fn header(&mut self, kind: u32) -> Result<()> {
        self.0.write_all(MAGIC)?;
        self.u32(kind)?;
        self.u32(VERSION)
    }
}

struct In<R: Read>(R);

impl<R: Read> In<R> {
    fn bytes<const K: usize>(&mut self) -> Result<[u8; K]> {
        let mut buf = [0u8; K];
        self.0.read_exact(&mut buf)?;
        Ok(buf)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.bytes()?);
        usize::try_from(v).map_err(|_| Error::Format(format!("value {v} does not fit in usize")))
    }
    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v as u64 > MAX_LEN {
            return Err(Error::Format(format!("length {v} is implausibly large")));
        }
        Ok(v)
    }
    fn i64(&mut self) -> Result<Option<usize>> {
        let v = i64::from_le_bytes(self.bytes()?);
        match v {
            -1 => Ok(None),
            v if v >= 0 => Ok(Some(v as usize)),
            v => Err(Error::Format(format!("invalid link {v}"))),
        }
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn indices(&mut self, n: usize) -> Result<Vec<usize>> {
        (0..n).map(|_| self.u64()).collect()
    }
    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let rows = self.len()?;
        let cols = self.len()?;
        if (rows as u64) * (cols as u64) > MAX_LEN {
            return Err(Error::Format(format!("matrix {rows} x {cols} is implausibly large")));
        }
        Ok(DMatrix::from_vec(rows, cols, self.floats(rows * cols)?))
    }
    fn matrices(&mut self, n: usize) -> Result<Vec<DMatrix<f64>>> {
        (0..n).map(|_| self.matrix()).collect()
    }
    fn header(&mut self, kind: u32) -> Result<()> {
        if &self.bytes::<8>()? != MAGIC {
            return Err(Error::Format("not an h2sparse container (bad magic)".into()));
        }
        let got = self.u32()?;
        if got != kind {
            return Err(Error::Format(format!("container kind {got}, expected {kind}")));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        Ok(())
    }
}

fn write_tree<W: Write>(out: &mut Out<W>, tree: &ClusterTree) -> Result<()> {
    out.u64(tree.leaf_size)?;
    out.u64(tree.clusters.len())?;
    for c in &tree.clusters {
        out.u64(c.range.start)?;
        out.u64(c.range.end)?;
        out.i64(c.parent)?;
        out.i64(c.children.map(|[a, _]| a))?;
        out.i64(c.children.map(|[_, b]| b))?;
        out.u64(c.level)?;
        out.floats(&c.bbox.lo)?;
        out.floats(&c.bbox.hi)?;
    }
    out.indices(&tree.perm)
}

fn read_tree<R: Read>(inp: &mut In<R>, n: usize, dim: usize) -> Result<ClusterTree> {
    let leaf_size = inp.u64()?;
    let count = inp.len()?;
    let mut clusters = Vec::with_capacity(count);
    for _ in 0..count {
        let start = inp.u64()?;
        let end = inp.u64()?;
        let parent = inp.i64()?;
        let children = match (inp.i64()?, inp.i64()?) {
            (Some(a), Some(b)) => Some([a, b]),
            (None, None) => None,
            _ => return Err(Error::Format("cluster with a single child".into())),
        };
        let level = inp.u64()?;
        let lo = inp.floats(dim)?;
        let hi = inp.floats(dim)?;
        if start > end || end > n {
            return Err(Error::Format(format!("cluster range {start}..{end} outside 0..{n}")));
        }
        clusters.push(Cluster { range: start..end, bbox: BoundingBox { lo, hi }, children, parent, level });
    }
    let perm = inp.indices(n)?;
    let mut seen = vec![false; n];
    for &p in &perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Format("tree permutation is not a bijection".into()));
        }
    }
    let mut levels: Vec<Vec<usize>> = Vec::new();
    for (id, c) in clusters.iter().enumerate() {
        let links = c.parent.into_iter().chain(c.children.into_iter().flatten());
        if links.into_iter().any(|x| x >= count) {
            return Err(Error::Format(format!("cluster {id} links outside the tree")));
        }
        if levels.len() <= c.level {
            levels.resize(c.level + 1, Vec::new());
        }
        levels[c.level].push(id);
    }
    if clusters.first().is_none_or(|r| r.range != (0..n)) {
        return Err(Error::Format("root cluster must cover all points".into()));
    }
    Ok(ClusterTree { clusters, perm, levels, leaf_size })
}

fn write_pairs<W: Write>(out: &mut Out<W>, pairs: &[(usize, usize)]) -> Result<()> {
    out.u64(pairs.len())?;
    pairs.iter().try_for_each(|&(t, s)| {
        out.u64(t)?;
        out.u64(s)
    })
}

fn read_pairs<R: Read>(inp: &mut In<R>, rows: usize, cols: usize) -> Result<Vec<(usize, usize)>> {
    let count = inp.len()?;
    (0..count)
        .map(|_| {
            let (t, s) = (inp.u64()?, inp.u64()?);
            if t >= rows || s >= cols {
                return Err(Error::Format(format!("block ({t}, {s}) outside the trees")));
            }
            Ok((t, s))
        })
        .collect()
}

/// Writes an H² matrix. `dim` is taken from the bounding boxes of the row tree.
pub fn write_h2<W: Write>(w: W, h2: &H2Matrix) -> Result<()> {
    let mut out = Out(w);
    let bct = &h2.bct;
    out.header(KIND_H2)?;
    out.u64(h2.size())?;
    out.u64(bct.row_tree.clusters[0].bbox.lo.len())?;
    out.f64(h2.eps)?;
    out.f64(bct.eta)?;
    out.u8(h2.symmetric as u8)?;
    write_tree(&mut out, &bct.row_tree)?;
    write_tree(&mut out, &bct.col_tree)?;
    write_pairs(&mut out, &bct.admissible)?;
    write_pairs(&mut out, &bct.inadmissible)?;
    h2.close.iter().try_for_each(|m| out.matrix(m))?;
    h2.row_basis.mats.iter().try_for_each(|m| out.matrix(m))?;
    if !h2.symmetric {
        h2.col_basis.mats.iter().try_for_each(|m| out.matrix(m))?;
    }
    h2.interactions.iter().try_for_each(|m| out.matrix(m))?;
    out.u64(h2.report.insufficient_block_size)?;
    out.0.flush()?;
    Ok(())
}

pub fn read_h2<R: Read>(r: R) -> Result<H2Matrix> {
    let mut inp = In(r);
    inp.header(KIND_H2)?;
    let n = inp.len()?;
    let dim = inp.len()?;
    let eps = inp.f64()?;
    let eta = inp.f64()?;
    let symmetric = inp.u8()? != 0;
    let row_tree = read_tree(&mut inp, n, dim)?;
    let col_tree = read_tree(&mut inp, n, dim)?;
    let (nr, nc) = (row_tree.clusters.len(), col_tree.clusters.len());
    let admissible = read_pairs(&mut inp, nr, nc)?;
    let inadmissible = read_pairs(&mut inp, nr, nc)?;
    let close = inp.matrices(inadmissible.len())?;
    let row_basis = ClusterBasis { mats: inp.matrices(nr)? };
    let col_basis = if symmetric { row_basis.clone() } else { ClusterBasis { mats: inp.matrices(nc)? } };
    let interactions = inp.matrices(admissible.len())?;
    let insufficient = inp.u64()?;
    let bct = BlockClusterTree { row_tree, col_tree, admissible, inadmissible, eta };
    let mut h2 = H2Matrix::from_parts(bct, close, row_basis, col_basis, interactions, eps, symmetric)?;
    h2.report.insufficient_block_size = insufficient;
    Ok(h2)
}

fn write_cascade<W: Write>(out: &mut Out<W>, c: &OrthogonalCascade) -> Result<()> {
    out.u64(c.stages.len())?;
    for stage in &c.stages {
        match &stage.perm {
            Some(p) => {
                out.u8(1)?;
                out.indices(p)?;
            }
            None => out.u8(0)?,
        }
        out.u64(stage.blocks.len())?;
        for (off, m) in &stage.blocks {
            out.u64(*off)?;
            out.matrix(m)?;
        }
    }
    Ok(())
}

fn read_cascade<R: Read>(inp: &mut In<R>, n: usize) -> Result<OrthogonalCascade> {
    let count = inp.len()?;
    let mut stages = Vec::with_capacity(count);
    for _ in 0..count {
        let perm = match inp.u8()? {
            0 => None,
            _ => Some(inp.indices(n)?),
        };
        let nb = inp.len()?;
        let mut blocks = Vec::with_capacity(nb);
        for _ in 0..nb {
            let off = inp.u64()?;
            let m = inp.matrix()?;
            if !m.is_square() || off + m.nrows() > n {
                return Err(Error::Format(format!("cascade block at {off} does not fit")));
            }
            blocks.push((off, m));
        }
        stages.push(CascadeStage { perm, blocks });
    }
    Ok(OrthogonalCascade { n, stages })
}

pub fn write_factorization<W: Write>(w: W, f: &SparseFactorization) -> Result<()> {
    let mut out = Out(w);
    out.header(KIND_FACTOR)?;
    out.u64(f.size())?;
    out.u8(f.symmetric as u8)?;
    write_cascade(&mut out, &f.u)?;
    if !f.symmetric {
        write_cascade(&mut out, &f.v)?;
    }
    let s = &f.s;
    out.u64(s.n_rows)?;
    out.u64(s.n_cols)?;
    out.u64(s.nnz())?;
    out.indices(&s.row_ptr)?;
    out.indices(&s.col_idx)?;
    out.floats(&s.values)?;
    out.u64(f.report.dropped)?;
    out.f64(f.report.drop_threshold)?;
    out.u64(f.report.levels)?;
    out.0.flush()?;
    Ok(())
}

pub fn read_factorization<R: Read>(r: R) -> Result<SparseFactorization> {
    let mut inp = In(r);
    inp.header(KIND_FACTOR)?;
    let n = inp.len()?;
    let symmetric = inp.u8()? != 0;
    let u = read_cascade(&mut inp, n)?;
    let v = if symmetric { u.clone() } else { read_cascade(&mut inp, n)? };
    let rows = inp.len()?;
    let cols = inp.len()?;
    let nnz = inp.len()?;
    let row_ptr = inp.indices(rows + 1)?;
    let col_idx = inp.indices(nnz)?;
    let values = inp.floats(nnz)?;
    if rows != n || cols != n || row_ptr.first() != Some(&0) || row_ptr.last() != Some(&nnz) {
        return Err(Error::Format("inconsistent sparse matrix header".into()));
    }
    if row_ptr.windows(2).any(|w| w[0] > w[1]) || col_idx.iter().any(|&j| j >= cols) {
        return Err(Error::Format("corrupt sparse matrix structure".into()));
    }
    let s = SparseMatrix { n_rows: rows, n_cols: cols, row_ptr, col_idx, values };
    let report = AssemblyReport {
        dropped: inp.u64()?,
        drop_threshold: inp.f64()?,
        levels: inp.u64()?,
        rank_reductions: Vec::new(),
    };
    Ok(SparseFactorization { u, v, s, symmetric, report })
}

/// One value per line; blank lines and `#` comments are skipped.
pub fn read_vector_text<R: BufRead>(r: R) -> Result<Vec<f64>> {
    let mut v = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        v.push(line.parse().map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?);
    }
    Ok(v)
}

pub fn write_vector_text<W: Write>(mut w: W, v: &[f64]) -> Result<()> {
    for x in v {
        writeln!(w, "{x:.17e}")?;
    }
    Ok(())
}

/// `u64` length followed by the values as `f64`.
pub fn write_vector_binary<W: Write>(w: W, v: &[f64]) -> Result<()> {
    let mut out = Out(w);
    out.u64(v.len())?;
    out.floats(v)
}

pub fn read_vector_binary<R: Read>(r: R) -> Result<Vec<f64>> {
    let mut inp = In(r);
    let n = inp.len()?;
    inp.floats(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PointCloud;
    use crate::kernels::{KernelMatrix, KernelSpec};

    fn sample(symmetric: bool) -> H2Matrix {
        let cloud = PointCloud::uniform_random(2, 300, 4).unwrap();
        let tree = ClusterTree::build(&cloud, 20).unwrap();
        let bct = if symmetric {
            BlockClusterTree::symmetric(tree, 1.0).unwrap()
        } else {
            BlockClusterTree::build(tree.clone(), tree, 1.0).unwrap()
        };
        let km = KernelMatrix::new(KernelSpec::GaussShifted, &cloud).unwrap();
        H2Matrix::build(&km, bct, 1e-6).unwrap()
    }

    #[test]
    fn h2_round_trip_is_exact() {
        for symmetric in [true, false] {
            let h2 = sample(symmetric);
            let mut buf = Vec::new();
            write_h2(&mut buf, &h2).unwrap();
            let back = read_h2(&buf[..]).unwrap();
            assert_eq!(back.bct, h2.bct);
            assert_eq!(back.close, h2.close);
            assert_eq!(back.row_basis, h2.row_basis);
            assert_eq!(back.col_basis, h2.col_basis);
            assert_eq!(back.interactions, h2.interactions);
            assert_eq!(back.symmetric, h2.symmetric);
            assert_eq!(back.eps, h2.eps);
        }
    }

    #[test]
    fn factorization_round_trip_is_exact() {
        let f = SparseFactorization::from_h2(&sample(true)).unwrap();
        let mut buf = Vec::new();
        write_factorization(&mut buf, &f).unwrap();
        let back = read_factorization(&buf[..]).unwrap();
        assert_eq!(back.u, f.u);
        assert_eq!(back.v, f.v);
        assert_eq!(back.s, f.s);
        assert_eq!(back.report.levels, f.report.levels);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let h2 = sample(true);
        let mut buf = Vec::new();
        write_h2(&mut buf, &h2).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_h2(&bad[..]), Err(Error::Format(_))));
        assert!(matches!(read_h2(&buf[..buf.len() - 3]), Err(Error::Io(_))));
        assert!(matches!(read_factorization(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn vectors_round_trip() {
        let v = vec![1.0, -2.5e-300, std::f64::consts::PI, 0.0];
        let mut text = Vec::new();
        write_vector_text(&mut text, &v).unwrap();
        assert_eq!(read_vector_text(&text[..]).unwrap(), v);
        let mut bin = Vec::new();
        write_vector_binary(&mut bin, &v).unwrap();
        assert_eq!(read_vector_binary(&bin[..]).unwrap(), v);
    }
}
