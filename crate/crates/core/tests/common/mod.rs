#![allow(dead_code)]

use h2sparse::geometry::{BlockClusterTree, ClusterTree, PointCloud};
use h2sparse::h2::{ClusterBasis, H2Matrix};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0));
    m.qr().q().columns(0, cols).into_owned()
}

/// Symmetric H² on `leaves * b` collinear points with exactly `b` points per
/// leaf, random orthonormal bases of rank `r` on every non-root cluster and
/// random coefficients. Returns the matrix and its number of compression levels.
pub fn uniform_rank_h2(leaves: usize, b: usize, r: usize, eta: f64, seed: u64) -> H2Matrix {
    let n = leaves * b;
    let points: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 / n as f64, 0.0]).collect();
    let cloud = PointCloud::from_points(2, &points).unwrap();
    let tree = ClusterTree::build(&cloud, b).unwrap();
    assert!(tree.leaves().iter().all(|&l| tree.clusters[l].size() == b));
    let bct = BlockClusterTree::symmetric(tree, eta).unwrap();
    let tree = &bct.row_tree;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rank = |t: usize| if t == tree.root() { 0 } else { r };
    let mats = tree
        .clusters
        .iter()
        .enumerate()
        .map(|(t, c)| match c.children {
            None => random_orthonormal(c.size(), rank(t), &mut rng),
            Some([a, bb]) => random_orthonormal(rank(a) + rank(bb), rank(t), &mut rng),
        })
        .collect();
    let basis = ClusterBasis { mats };
    let mut close = Vec::new();
    for &(t, s) in &bct.inadmissible {
        let (mt, ms) = (tree.clusters[t].size(), tree.clusters[s].size());
        let m = if t <= s {
            DMatrix::from_fn(mt, ms, |_, _| rng.gen_range(-1.0..1.0))
        } else {
            DMatrix::zeros(mt, ms)
        };
        close.push(m);
    }
    mirror(&bct.inadmissible, &mut close);
    let mut interactions: Vec<DMatrix<f64>> = bct
        .admissible
        .iter()
        .map(|&(t, s)| {
            if t <= s {
                DMatrix::from_fn(rank(t), rank(s), |_, _| rng.gen_range(-1.0..1.0))
            } else {
                DMatrix::zeros(rank(t), rank(s))
            }
        })
        .collect();
    mirror(&bct.admissible, &mut interactions);
    H2Matrix::from_parts(bct, close, basis.clone(), basis, interactions, 1e-6, true).unwrap()
}

/// Makes the block list symmetric: `(s, t)` becomes the transpose of `(t, s)` for `t < s`,
/// and diagonal blocks are symmetrized.
fn mirror(pairs: &[(usize, usize)], blocks: &mut [DMatrix<f64>]) {
    for (i, &(t, s)) in pairs.iter().enumerate() {
        if t == s {
            blocks[i] = (&blocks[i] + blocks[i].transpose()) * 0.5;
        } else if t > s {
            let j = pairs.iter().position(|&p| p == (s, t)).unwrap();
            blocks[i] = blocks[j].transpose();
        }
    }
}
