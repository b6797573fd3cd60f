//! Entry generators for the dense kernel matrices that get approximated.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Default size cap for dense oracle assembly.
pub const ORACLE_CAP: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `1/|r_i - r_j|` off the diagonal, `0` on it.
    InvDistance,
    /// `2 delta_ij + exp(-|r_i - r_j|^2)`.
    GaussShifted,
    /// `1` on the diagonal, `|r|/d` inside radius `d`, `d/|r|` outside.
    PiecewiseD { d: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::PiecewiseD { d } if !(d > 0.0 && d.is_finite()) => {
                Err(Error::InvalidKernel(format!("piecewise kernel needs d > 0, got {d}")))
            }
            _ => Ok(()),
        }
    }

    /// CLI short name (`inv`, `exp`, `piecewise`).
    pub fn short_name(&self) -> &'static str {
        match self {
            KernelSpec::InvDistance => "inv",
            KernelSpec::GaussShifted => "exp",
            KernelSpec::PiecewiseD { .. } => "piecewise",
        }
    }

    pub fn is_symmetric(&self) -> bool {
        true
    }

    /// Builds a spec from the CLI name plus the optional `--d` value.
    pub fn from_cli(name: &str, d: Option<f64>) -> Result<Self> {
        let spec = match name {
            "inv" => KernelSpec::InvDistance,
            "exp" => KernelSpec::GaussShifted,
            "piecewise" => KernelSpec::PiecewiseD { d: d.unwrap_or(1e-3) },
            other => return Err(Error::InvalidKernel(format!("unknown kernel '{other}'"))),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Evaluates the kernel for a distance `r` between distinct indices.
    /// Returns `None` for `r == 0` where the kernel is undefined.
    #[inline]
    fn off_diagonal(&self, r: f64) -> Option<f64> {
        match *self {
            KernelSpec::InvDistance => (r > 0.0).then(|| 1.0 / r),
            KernelSpec::GaussShifted => Some((-r * r).exp()),
            KernelSpec::PiecewiseD { d } => {
                if r <= 0.0 {
                    None
                } else if r < d {
                    Some(r / d)
                } else {
                    Some(d / r)
                }
            }
        }
    }

    #[inline]
    fn diagonal(&self) -> f64 {
        match self {
            KernelSpec::InvDistance => 0.0,
            KernelSpec::GaussShifted => 3.0,
            KernelSpec::PiecewiseD { .. } => 1.0,
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::PiecewiseD { d } => write!(f, "piecewise(d={d})"),
            other => f.write_str(other.short_name()),
        }
    }
}

impl FromStr for KernelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_cli(s, None)
    }
}

#[inline]
fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// One kernel matrix entry for points `r_i`, `r_j` with indices `i`, `j`.
pub fn kernel_entry(spec: &KernelSpec, r_i: &[f64], r_j: &[f64], i: usize, j: usize) -> Result<f64> {
    if r_i.len() != r_j.len() {
        return Err(Error::DimensionMismatch { expected: r_i.len(), got: r_j.len() });
    }
    if i == j {
        return Ok(spec.diagonal());
    }
    spec.off_diagonal(distance(r_i, r_j)).ok_or(Error::SingularPair(i, j))
}

/// Anything that can produce entries of a square matrix indexed by original
/// (input-order) indices. The H² constructor only talks to this trait.
pub trait EntrySource: Sync {
    fn size(&self) -> usize;

    /// Entry `(i, j)`; may return a non-finite value where the underlying
    /// function is undefined (see [`EntrySource::checked_entry`]).
    fn entry(&self, i: usize, j: usize) -> f64;

    fn checked_entry(&self, i: usize, j: usize) -> Result<f64> {
        Ok(self.entry(i, j))
    }

    fn is_symmetric(&self) -> bool {
        false
    }
}

/// A kernel bound to a point cloud.
#[derive(Debug, Clone, Copy)]
pub struct KernelMatrix<'a> {
    pub spec: KernelSpec,
    pub points: &'a PointCloud,
}

impl<'a> KernelMatrix<'a> {
    pub fn new(spec: KernelSpec, points: &'a PointCloud) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, points })
    }
}

impl EntrySource for KernelMatrix<'_> {
    fn size(&self) -> usize {
        self.points.len()
    }

    #[inline]
    fn entry(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return self.spec.diagonal();
        }
        self.spec
            .off_diagonal(distance(self.points.point(i), self.points.point(j)))
            .unwrap_or(f64::INFINITY)
    }

    fn checked_entry(&self, i: usize, j: usize) -> Result<f64> {
        kernel_entry(&self.spec, self.points.point(i), self.points.point(j), i, j)
    }

    fn is_symmetric(&self) -> bool {
        self.spec.is_symmetric()
    }
}

/// Entry source backed by a closure, for synthetic matrices in tests and benchmarks.
pub struct FnSource<F> {
    pub n: usize,
    pub f: F,
    pub symmetric: bool,
}

impl<F: Fn(usize, usize) -> f64 + Sync> EntrySource for FnSource<F> {
    fn size(&self) -> usize {
        self.n
    }

    fn entry(&self, i: usize, j: usize) -> f64 {
        (self.f)(i, j)
    }

    fn is_symmetric(&self) -> bool {
        self.symmetric
    }
}

/// Dense `N x N` matrix with rows/columns ordered by `perm`
/// (`result[(p, q)] = A[perm[p], perm[q]]`). Pass the identity for input order.
pub fn dense_assemble(spec: &KernelSpec, points: &PointCloud, perm: &[usize]) -> Result<DMatrix<f64>> {
    dense_assemble_capped(spec, points, perm, ORACLE_CAP)
}

pub fn dense_assemble_capped(
    spec: &KernelSpec,
    points: &PointCloud,
    perm: &[usize],
    cap: usize,
) -> Result<DMatrix<f64>> {
    let n = points.len();
    if n > cap {
        return Err(Error::OracleTooLarge { n, cap });
    }
    if perm.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: perm.len() });
    }
    let source = KernelMatrix::new(*spec, points)?;
    dense_from_source(&source, perm)
}

/// Dense assembly from any entry source, permuted as in [`dense_assemble`].
pub fn dense_from_source<S: EntrySource + ?Sized>(source: &S, perm: &[usize]) -> Result<DMatrix<f64>> {
    let n = perm.len();
    let mut a = DMatrix::zeros(n, n);
    for q in 0..n {
        for p in 0..n {
            let v = source.entry(perm[p], perm[q]);
            if !v.is_finite() {
                source.checked_entry(perm[p], perm[q])?;
            }
            a[(p, q)] = v;
        }
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_values() {
        let p = [0.1, 0.2];
        assert_eq!(kernel_entry(&KernelSpec::GaussShifted, &p, &p, 3, 3).unwrap(), 3.0);
        assert_eq!(kernel_entry(&KernelSpec::InvDistance, &p, &p, 3, 3).unwrap(), 0.0);
        assert_eq!(kernel_entry(&KernelSpec::PiecewiseD { d: 0.5 }, &p, &p, 3, 3).unwrap(), 1.0);
    }

    #[test]
    fn piecewise_is_continuous_at_d() {
        let spec = KernelSpec::PiecewiseD { d: 1e-2 };
        // d/r for r = d exactly
        assert_eq!(kernel_entry(&spec, &[0.0, 0.0], &[1e-2, 0.0], 0, 1).unwrap(), 1.0);
        assert_eq!(spec.off_diagonal(1e-2), Some(1.0));
        let below = spec.off_diagonal(1e-2 * (1.0 - 1e-12)).unwrap();
        assert!((below - 1.0).abs() < 1e-11);
    }

    #[test]
    fn coincident_points_are_singular() {
        let p = [0.3, 0.3];
        assert!(matches!(
            kernel_entry(&KernelSpec::InvDistance, &p, &p, 0, 1),
            Err(Error::SingularPair(0, 1))
        ));
        assert!(kernel_entry(&KernelSpec::PiecewiseD { d: 0.1 }, &p, &p, 0, 1).is_err());
        assert_eq!(kernel_entry(&KernelSpec::GaussShifted, &p, &p, 0, 1).unwrap(), 1.0);
    }

    #[test]
    fn invalid_d_is_rejected() {
        assert!(KernelSpec::PiecewiseD { d: 0.0 }.validate().is_err());
        assert!(KernelSpec::from_cli("piecewise", Some(-1.0)).is_err());
        assert!(KernelSpec::from_cli("laplace", None).is_err());
    }

    #[test]
    fn two_point_gauss_matrix() {
        let cloud = PointCloud::new(2, vec![0.0, 0.0, 0.3, 0.4]).unwrap();
        let a = dense_assemble(&KernelSpec::GaussShifted, &cloud, &[0, 1]).unwrap();
        let k = (-0.25f64).exp();
        assert_eq!(a[(0, 0)], 3.0);
        assert_eq!(a[(1, 1)], 3.0);
        assert!((a[(0, 1)] - k).abs() < 1e-15);
        assert_eq!(a[(0, 1)], a[(1, 0)]);
    }

    #[test]
    fn dense_matrices_are_bitwise_symmetric() {
        let cloud = PointCloud::uniform_random(3, 60, 2).unwrap();
        for spec in [KernelSpec::InvDistance, KernelSpec::GaussShifted, KernelSpec::PiecewiseD { d: 0.05 }] {
            let a = dense_assemble(&spec, &cloud, &(0..60).collect::<Vec<_>>()).unwrap();
            assert_eq!(a, a.transpose());
        }
    }

    #[test]
    fn oracle_cap_is_enforced() {
        let cloud = PointCloud::uniform_random(2, 10, 2).unwrap();
        let perm: Vec<usize> = (0..10).collect();
        assert!(matches!(
            dense_assemble_capped(&KernelSpec::GaussShifted, &cloud, &perm, 8),
            Err(Error::OracleTooLarge { n: 10, cap: 8 })
        ));
    }

    #[test]
    fn dense_assembly_reports_singular_pairs() {
        let cloud = PointCloud::new(2, vec![0.1, 0.1, 0.1, 0.1]).unwrap();
        assert!(matches!(
            dense_assemble(&KernelSpec::InvDistance, &cloud, &[0, 1]),
            Err(Error::SingularPair(..))
        ));
    }
}
