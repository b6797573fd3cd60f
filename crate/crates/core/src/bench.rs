//! End-to-end experiment pipeline behind the `bench` command.
//!
//! For every size the pipeline samples a seeded cloud, builds the H²
//! approximation, sparsifies it, factors `S` and solves against a seeded
//! random right-hand side. One [`MetricsRow`] is produced per size and the
//! run is recorded in `metrics.csv` plus `manifest.json`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{BlockClusterTree, ClusterTree, PointCloud};
use crate::h2::H2Matrix;
use crate::kernels::{dense_from_source, EntrySource, KernelMatrix, KernelSpec, ORACLE_CAP};
use crate::linsolve::{
    direct_solve, gmres, ilut, precond_apply, sparse_cholesky, sparse_lu, GmresOptions, Ordering, SolveReport,
    TriangularFactors,
};
use crate::sparsifier::SparseFactorization;

/// Column order of `metrics.csv`.
pub const METRICS_HEADER: [&str; 15] = [
    "N",
    "nnz_S",
    "nnz_per_row",
    "mem_dense",
    "mem_h2",
    "mem_factorization",
    "mem_S",
    "t_approx",
    "t_sparsify",
    "t_factor",
    "t_solve",
    "iterations",
    "final_residual",
    "factorization_error",
    "status",
];

/// Largest size for which `verify_factorization` densifies all three operators.
pub const VERIFY_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    Chol,
    Lu,
    GmresIlut,
    GmresNone,
}

impl Solver {
    pub fn name(self) -> &'static str {
        match self {
            Solver::Chol => "chol",
            Solver::Lu => "lu",
            Solver::GmresIlut => "gmres-ilut",
            Solver::GmresNone => "gmres-none",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    #[serde(serialize_with = "kernel_name")]
    pub kernel: KernelSpec,
    pub dim: usize,
    pub sizes: Vec<usize>,
    pub eps_build: f64,
    pub eps_precond: f64,
    pub eta: f64,
    pub leaf_size: usize,
    pub seed: u64,
    pub solver: Solver,
    pub tau: f64,
    pub tol: f64,
    /// ILUT fill cap per row of each triangular part.
    pub max_fill: usize,
    pub restart: usize,
    pub max_iter: usize,
    pub output_dir: PathBuf,
    pub dump_s: bool,
}

fn kernel_name<S: serde::Serializer>(k: &KernelSpec, s: S) -> std::result::Result<S::Ok, S::Error> {
    match k {
        KernelSpec::PiecewiseD { d } => s.serialize_str(&format!("piecewise(d={d})")),
        other => s.serialize_str(other.short_name()),
    }
}

impl RunConfig {
    pub fn new(kernel: KernelSpec, dim: usize, sizes: Vec<usize>) -> Self {
        Self {
            kernel,
            dim,
            sizes,
            eps_build: 1e-6,
            eps_precond: 1e-3,
            eta: 1.0,
            leaf_size: 32,
            seed: 7,
            solver: Solver::Chol,
            tau: 1e-2,
            tol: 1e-10,
            max_fill: 200,
            restart: 100,
            max_iter: 1000,
            output_dir: PathBuf::from("."),
            dump_s: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        self.kernel.validate()?;
        if !(self.dim == 2 || self.dim == 3) {
            return bad(format!("dim must be 2 or 3, got {}", self.dim));
        }
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return bad("sizes must be a non-empty list of positive integers".into());
        }
        if self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return bad("sizes must be strictly ascending".into());
        }
        for (name, e) in [("eps", self.eps_build), ("eps-precond", self.eps_precond)] {
            if !(e > 0.0 && e < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {e}"));
            }
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be finite and non-negative, got {}", self.eta));
        }
        if self.leaf_size < 2 {
            return Err(Error::InvalidLeafSize(self.leaf_size));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) || !(self.tol > 0.0) {
            return bad("tau must be >= 0 and tol > 0".into());
        }
        if self.restart == 0 || self.max_iter == 0 || self.max_fill == 0 {
            return bad("restart, max-iter and max-fill must be positive".into());
        }
        Ok(())
    }

    fn gmres_options(&self) -> GmresOptions {
        GmresOptions { tol: self.tol, restart: self.restart, max_iter: self.max_iter }
    }
}

/// One line of `metrics.csv`. Memory columns are bytes; times are seconds.
/// Optional values are written as empty fields.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "nnz_S")]
    pub nnz_s: usize,
    pub nnz_per_row: f64,
    pub mem_dense: usize,
    pub mem_h2: usize,
    pub mem_factorization: usize,
    #[serde(rename = "mem_S")]
    pub mem_s: usize,
    pub t_approx: f64,
    pub t_sparsify: f64,
    pub t_factor: f64,
    pub t_solve: f64,
    pub iterations: usize,
    pub final_residual: Option<f64>,
    pub factorization_error: Option<f64>,
    pub status: RowStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    /// The pipeline ran but a check failed.
    VerifyFailed,
    /// A stage returned an error; the remaining columns are zero.
    Error,
}

impl MetricsRow {
    fn failure(n: usize) -> Self {
        Self {
            n,
            nnz_s: 0,
            nnz_per_row: 0.0,
            mem_dense: 8 * n * n,
            mem_h2: 0,
            mem_factorization: 0,
            mem_s: 0,
            t_approx: 0.0,
            t_sparsify: 0.0,
            t_factor: 0.0,
            t_solve: 0.0,
            iterations: 0,
            final_residual: None,
            factorization_error: None,
            status: RowStatus::Error,
        }
    }
}

/// Dense-oracle vs H² vs `U S V^T` comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VerifyReport {
    pub h2_error: f64,
    pub factorization_error: f64,
    pub passed: bool,
}

/// Relative Frobenius errors of `h2` and `f` against the dense operator of
/// `source`. Passes when the factorization error is at most twice the H²
/// error; when the H² error vanishes the factorization must be exact to `1e-12`.
///
/// The factorization error is measured as `||U^T A V - S||_F`, so the check
/// also requires every cascade block to be orthogonal to `1e-10`.
pub fn verify_factorization<S: EntrySource + ?Sized>(
    source: &S,
    h2: &H2Matrix,
    f: &SparseFactorization,
    cap: usize,
) -> Result<VerifyReport> {
    let n = source.size();
    if n > cap {
        return Err(Error::OracleTooLarge { n, cap });
    }
    let identity: Vec<usize> = (0..n).collect();
    let a = dense_from_source(source, &identity)?;
    let norm = a.norm();
    let rel = |m: DMatrix<f64>| if norm > 0.0 { (m - &a).norm() / norm } else { m.norm() };
    let h2_error = rel(h2.densify_capped(cap)?);
    let distance = f.projected_distance(&a)?;
    let factorization_error = if norm > 0.0 { distance / norm } else { distance };
    let orthogonal = f.u.max_stage_defect().max(f.v.max_stage_defect()) <= 1e-10;
    let accurate = if h2_error > 0.0 { factorization_error <= 2.0 * h2_error } else { factorization_error <= 1e-12 };
    let passed = orthogonal && accurate;
    Ok(VerifyReport { h2_error, factorization_error, passed })
}

/// `A x` straight from kernel entries, without storing `A`.
pub fn oracle_matvec<S: EntrySource + ?Sized>(source: &S, x: &[f64]) -> Result<Vec<f64>> {
    let n = source.size();
    if x.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: x.len() });
    }
    (0..n)
        .into_par_iter()
        .map(|i| (0..n).try_fold(0.0, |acc, j| Ok(acc + source.checked_entry(i, j)? * x[j])))
        .collect()
}

pub fn random_rhs(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Everything measured for one size beyond the CSV columns.
#[derive(Debug, Clone, Serialize)]
pub struct SizeDetails {
    pub n: usize,
    pub h2_error: Option<f64>,
    pub max_rank: usize,
    pub levels: usize,
    pub insufficient_block_size: usize,
    pub dropped_entries: usize,
    pub replaced_pivots: usize,
    /// `final_residual` measured against kernel entries (true) or the H² operator (false).
    pub residual_from_oracle: bool,
    pub converged: Option<bool>,
    pub stagnated: Option<bool>,
    #[serde(skip)]
    pub residual_history: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SizeOutcome {
    pub row: MetricsRow,
    pub details: SizeDetails,
}

/// Runs the full pipeline for one size.
pub fn run_size(cfg: &RunConfig, n: usize) -> Result<SizeOutcome> {
    let cloud = PointCloud::uniform_random(cfg.dim, n, cfg.seed)?;
    let source = KernelMatrix::new(cfg.kernel, &cloud)?;
    let tree = ClusterTree::build(&cloud, cfg.leaf_size)?;

    let t0 = Instant::now();
    let bct = BlockClusterTree::symmetric(tree, cfg.eta)?;
    let operator = H2Matrix::build(&source, bct.clone(), cfg.eps_build)?;
    let precond_h2 = match cfg.solver {
        Solver::GmresIlut => Some(H2Matrix::build(&source, bct, cfg.eps_precond)?),
        _ => None,
    };
    let t_approx = t0.elapsed().as_secs_f64();
    let factored_h2 = precond_h2.as_ref().unwrap_or(&operator);

    let t0 = Instant::now();
    let f = SparseFactorization::from_h2(factored_h2)?;
    let t_sparsify = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let factors: Option<TriangularFactors> = match cfg.solver {
        Solver::Chol => Some(sparse_cholesky(&f.s, Ordering::FillReducing)?),
        Solver::Lu => Some(sparse_lu(&f.s, Ordering::FillReducing)?),
        Solver::GmresIlut => Some(ilut(&f.s, cfg.tau, cfg.max_fill, Ordering::FillReducing)?),
        Solver::GmresNone => None,
    };
    let t_factor = t0.elapsed().as_secs_f64();

    let b = random_rhs(n, cfg.seed.wrapping_add(n as u64));
    let t0 = Instant::now();
    let (x, report): (Vec<f64>, Option<SolveReport>) = match (cfg.solver, &factors) {
        (Solver::Chol | Solver::Lu, Some(tf)) => (direct_solve(&f, tf, &b)?, None),
        (_, tf) => {
            let op = |v: &[f64]| operator.matvec(v);
            let fr = &f;
            let pre = tf.as_ref().map(|tf| move |r: &[f64]| precond_apply(fr, tf, r));
            let (x, rep) = match &pre {
                Some(p) => gmres(&op, &b, Some(p), &cfg.gmres_options())?,
                None => gmres(&op, &b, None, &cfg.gmres_options())?,
            };
            (x, Some(rep))
        }
    };
    let t_solve = t0.elapsed().as_secs_f64();

    let residual_from_oracle = n <= ORACLE_CAP;
    let ax = if residual_from_oracle { oracle_matvec(&source, &x)? } else { operator.matvec(&x)? };
    let r: Vec<f64> = ax.iter().zip(&b).map(|(a, b)| a - b).collect();
    let final_residual = norm(&r) / norm(&b);

    let verify = if n <= VERIFY_CAP { Some(verify_factorization(&source, factored_h2, &f, VERIFY_CAP)?) } else { None };

    let residual_ok = match &report {
        None => final_residual <= 10.0 * cfg.eps_build,
        Some(rep) => rep.converged,
    };
    let verify_ok = verify.is_none_or(|v| v.passed);
    let nnz = f.s.nnz();
    let mem_s = 8 * (2 * nnz + n + 1);
    let row = MetricsRow {
        n,
        nnz_s: nnz,
        nnz_per_row: nnz as f64 / n as f64,
        mem_dense: 8 * n * n,
        mem_h2: 8 * operator.storage().total,
        mem_factorization: 8 * (f.stored_reals() - nnz) + mem_s,
        mem_s,
        t_approx,
        t_sparsify,
        t_factor,
        t_solve,
        iterations: report.as_ref().map_or(0, |r| r.iterations),
        final_residual: Some(final_residual),
        factorization_error: verify.map(|v| v.factorization_error),
        status: if residual_ok && verify_ok { RowStatus::Ok } else { RowStatus::VerifyFailed },
    };
    let details = SizeDetails {
        n,
        h2_error: verify.map(|v| v.h2_error),
        max_rank: factored_h2.report.max_rank,
        levels: f.report.levels,
        insufficient_block_size: factored_h2.report.insufficient_block_size,
        dropped_entries: f.report.dropped,
        replaced_pivots: factors.as_ref().map_or(0, |tf| tf.replaced_pivots),
        residual_from_oracle,
        converged: report.as_ref().map(|r| r.converged),
        stagnated: report.as_ref().map(|r| r.stagnated),
        residual_history: report.map(|r| r.residual_history).unwrap_or_default(),
        error: None,
    };
    if cfg.dump_s {
        let path = cfg.output_dir.join(format!("S_{n}.mtx"));
        let comments = vec![
            format!("N = {n}"),
            format!("eps = {:e}", factored_h2.eps),
            format!("kernel = {}", cfg.kernel.short_name()),
        ];
        f.s.write_matrix_market(BufWriter::new(File::create(path)?), &comments)?;
    }
    Ok(SizeOutcome { row, details })
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a RunConfig,
    environment: Environment,
    sizes: Vec<&'a SizeDetails>,
    all_passed: bool,
}

#[derive(Debug, Clone, Serialize)]
struct Environment {
    os: &'static str,
    arch: &'static str,
    threads: usize,
    oracle_cap: usize,
    verify_cap: usize,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub rows: Vec<MetricsRow>,
    pub details: Vec<SizeDetails>,
}

impl RunSummary {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.status == RowStatus::Ok)
    }
}

/// Runs every size and writes `metrics.csv`, `residuals.csv` and `manifest.json`.
/// A stage error for one size is recorded as an error row and does not stop the run.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let mut rows = Vec::new();
    let mut details = Vec::new();
    for &n in &cfg.sizes {
        log::info!("N = {n}: running {} with {}", cfg.kernel.short_name(), cfg.solver.name());
        match run_size(cfg, n) {
            Ok(out) => {
                rows.push(out.row);
                details.push(out.details);
            }
            Err(e) => {
                log::error!("N = {n}: {e}");
                rows.push(MetricsRow::failure(n));
                details.push(SizeDetails {
                    n,
                    h2_error: None,
                    max_rank: 0,
                    levels: 0,
                    insufficient_block_size: 0,
                    dropped_entries: 0,
                    replaced_pivots: 0,
                    residual_from_oracle: false,
                    converged: None,
                    stagnated: None,
                    residual_history: Vec::new(),
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let summary = RunSummary { rows, details };
    write_metrics(&cfg.output_dir.join("metrics.csv"), &summary.rows)?;
    write_residuals(&cfg.output_dir.join("residuals.csv"), &summary.details)?;
    let manifest = Manifest {
        tool: "h2sparse",
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        environment: Environment {
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            threads: rayon::current_num_threads(),
            oracle_cap: ORACLE_CAP,
            verify_cap: VERIFY_CAP,
        },
        sizes: summary.details.iter().collect(),
        all_passed: summary.all_passed(),
    };
    let file = BufWriter::new(File::create(cfg.output_dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(file, &manifest).map_err(|e| Error::Format(e.to_string()))?;
    Ok(summary)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_error)?;
    w.write_record(METRICS_HEADER).map_err(csv_error)?;
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// GMRES histories as `N,iteration,relative_residual`.
fn write_residuals(path: &Path, details: &[SizeDetails]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(["N", "iteration", "relative_residual"]).map_err(csv_error)?;
    for d in details {
        for (it, r) in d.residual_history.iter().enumerate() {
            w.serialize((d.n, it, r)).map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}
