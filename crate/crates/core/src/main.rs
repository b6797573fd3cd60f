use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use h2sparse::bench::{run_pipeline, RowStatus, RunConfig, Solver};
use h2sparse::geometry::{BlockClusterTree, ClusterTree, PointCloud};
use h2sparse::h2::H2Matrix;
use h2sparse::io;
use h2sparse::kernels::{KernelMatrix, KernelSpec};
use h2sparse::linsolve::{direct_solve, sparse_cholesky, sparse_lu, Ordering};
use h2sparse::sparsifier::SparseFactorization;
use h2sparse::Error;

#[derive(Parser)]
#[command(name = "h2sparse", version, about = "H2 approximation, sparse U S V^T factorization and solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Inv,
    Exp,
    Piecewise,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Chol,
    Lu,
    GmresIlut,
    GmresNone,
}

#[derive(clap::Args)]
struct KernelOpts {
    #[arg(long, value_enum, default_value = "inv")]
    kernel: KernelArg,
    /// Radius of the piecewise kernel.
    #[arg(long, default_value_t = 1e-3)]
    d: f64,
}

impl KernelOpts {
    fn spec(&self) -> h2sparse::Result<KernelSpec> {
        let name = match self.kernel {
            KernelArg::Inv => "inv",
            KernelArg::Exp => "exp",
            KernelArg::Piecewise => "piecewise",
        };
        KernelSpec::from_cli(name, Some(self.d))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline over a size sweep; writes metrics.csv and manifest.json.
    Bench {
        #[command(flatten)]
        kernel: KernelOpts,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, value_delimiter = ',', default_value = "512,1024,2048")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, default_value_t = 1e-3)]
        eps_precond: f64,
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
        #[arg(long, default_value_t = 32)]
        leaf: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, value_enum, default_value = "chol")]
        solver: SolverArg,
        #[arg(long, default_value_t = 1e-2)]
        tau: f64,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long, default_value_t = 200)]
        max_fill: usize,
        #[arg(long, default_value_t = 100)]
        restart: usize,
        #[arg(long, default_value_t = 1000)]
        max_iter: usize,
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
        /// Also write each S as S_<N>.mtx.
        #[arg(long)]
        dump_s: bool,
    },
    /// Writes a seeded uniform random cloud (text unless the name ends in `.bin`).
    Points {
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Builds an H2 matrix from a point file and stores it in a container.
    Build {
        #[arg(long)]
        points: PathBuf,
        #[command(flatten)]
        kernel: KernelOpts,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
        #[arg(long, default_value_t = 32)]
        leaf: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sparsifies a stored H2 matrix; optionally exports S.
    Sparsify {
        #[arg(long)]
        h2: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_s: Option<PathBuf>,
    },
    /// Direct solve with a stored factorization.
    Solve {
        #[arg(long)]
        factorization: PathBuf,
        /// Right-hand side, one value per line (or binary if the name ends in `.bin`).
        #[arg(long)]
        rhs: PathBuf,
        #[arg(long, value_enum, default_value = "lu")]
        solver: SolverArg,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Config(Error),
    Run(Error),
    Verify,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::InvalidKernel(_) | Error::InvalidLeafSize(_) => Failure::Config(e),
            e => Failure::Run(e),
        }
    }
}

fn is_binary(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}

fn create(path: &Path) -> h2sparse::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> h2sparse::Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Bench {
            kernel,
            dim,
            sizes,
            eps,
            eps_precond,
            eta,
            leaf,
            seed,
            solver,
            tau,
            tol,
            max_fill,
            restart,
            max_iter,
            out,
            dump_s,
        } => {
            let mut cfg = RunConfig::new(kernel.spec()?, dim, sizes);
            cfg.eps_build = eps;
            cfg.eps_precond = eps_precond;
            cfg.eta = eta;
            cfg.leaf_size = leaf;
            cfg.seed = seed;
            cfg.solver = match solver {
                SolverArg::Chol => Solver::Chol,
                SolverArg::Lu => Solver::Lu,
                SolverArg::GmresIlut => Solver::GmresIlut,
                SolverArg::GmresNone => Solver::GmresNone,
            };
            cfg.tau = tau;
            cfg.tol = tol;
            cfg.max_fill = max_fill;
            cfg.restart = restart;
            cfg.max_iter = max_iter;
            cfg.output_dir = out;
            cfg.dump_s = dump_s;
            cfg.validate().map_err(Failure::Config)?;
            let summary = run_pipeline(&cfg)?;
            for row in &summary.rows {
                println!(
                    "N={} nnz/N={:.1} residual={} iterations={} status={:?}",
                    row.n,
                    row.nnz_per_row,
                    row.final_residual.map_or("-".into(), |r| format!("{r:.2e}")),
                    row.iterations,
                    row.status
                );
            }
            if summary.rows.iter().any(|r| r.status != RowStatus::Ok) {
                return Err(Failure::Verify);
            }
        }
        Command::Points { dim, n, seed, out } => {
            let cloud = PointCloud::uniform_random(dim, n, seed)?;
            if is_binary(&out) {
                cloud.write_binary(create(&out)?)?;
            } else {
                cloud.write_text(create(&out)?)?;
            }
        }
        Command::Build { points, kernel, eps, eta, leaf, out } => {
            let spec = kernel.spec()?;
            if !(eps > 0.0 && eps < 1.0) {
                return Err(Failure::Config(Error::InvalidArgument(format!("eps must lie in (0, 1), got {eps}"))));
            }
            let cloud = if is_binary(&points) {
                PointCloud::read_binary(open(&points)?)?
            } else {
                PointCloud::read_text(open(&points)?)?
            };
            let bct = BlockClusterTree::symmetric(ClusterTree::build(&cloud, leaf)?, eta)?;
            let h2 = H2Matrix::build(&KernelMatrix::new(spec, &cloud)?, bct, eps)?;
            let st = h2.storage();
            println!(
                "N={} max_rank={} storage={} reals ({:.1}% of dense)",
                h2.size(),
                h2.report.max_rank,
                st.total,
                100.0 * st.total as f64 / st.dense as f64
            );
            io::write_h2(create(&out)?, &h2)?;
        }
        Command::Sparsify { h2, out, dump_s } => {
            let h2 = io::read_h2(open(&h2)?)?;
            let f = SparseFactorization::from_h2(&h2)?;
            println!("N={} nnz(S)={} levels={}", f.size(), f.s.nnz(), f.report.levels);
            io::write_factorization(create(&out)?, &f)?;
            if let Some(path) = dump_s {
                let comments = vec![format!("N = {}", f.size()), format!("eps = {:e}", h2.eps)];
                f.s.write_matrix_market(create(&path)?, &comments)?;
            }
        }
        Command::Solve { factorization, rhs, solver, out } => {
            let f = io::read_factorization(open(&factorization)?)?;
            let b = if is_binary(&rhs) { io::read_vector_binary(open(&rhs)?)? } else { io::read_vector_text(open(&rhs)?)? };
            let factors = match solver {
                SolverArg::Chol => sparse_cholesky(&f.s, Ordering::FillReducing)?,
                SolverArg::Lu => sparse_lu(&f.s, Ordering::FillReducing)?,
                _ => return Err(Failure::Config(Error::InvalidArgument("solve supports chol and lu".into()))),
            };
            let x = direct_solve(&f, &factors, &b)?;
            if is_binary(&out) {
                io::write_vector_binary(create(&out)?, &x)?;
            } else {
                io::write_vector_text(create(&out)?, &x)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify) => ExitCode::from(1),
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(2)
        }
    }
}
