mod common;

use std::path::Path;
use std::process::Command;

use nalgebra::DVector;

use h2sparse::bench::{run_pipeline, RunConfig, Solver, METRICS_HEADER};
use h2sparse::kernels::KernelSpec;
use h2sparse::sparsifier::{check_sparsity_bound, SparseFactorization};

const BIN: &str = env!("CARGO_BIN_EXE_h2sparse");

fn without_timings(path: &Path) -> Vec<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header = rdr.headers().unwrap().clone();
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            header.iter().zip(r.iter()).filter(|(h, _)| !h.starts_with("t_")).map(|(_, v)| v.to_string()).collect()
        })
        .collect()
}

#[test]
fn pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let mut cfg = RunConfig::new(KernelSpec::PiecewiseD { d: 1e-2 }, 3, vec![300, 700]);
        cfg.solver = Solver::Lu;
        cfg.output_dir = dir.path().join(run);
        let summary = run_pipeline(&cfg).unwrap();
        assert!(summary.all_passed());
        outputs.push(without_timings(&cfg.output_dir.join("metrics.csv")));
    }
    assert_eq!(outputs[0].len(), 2);
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn bound_holds_for_other_shapes() {
    for (leaves, b, r, levels) in [(16, 8, 4, 4), (4, 24, 12, 2), (32, 6, 2, 5), (8, 10, 5, 3)] {
        let h2 = common::uniform_rank_h2(leaves, b, r, 1.0, 11);
        let f = SparseFactorization::from_h2(&h2).unwrap();
        let rep = check_sparsity_bound(&f, &h2);
        assert!(rep.applicable && rep.hypothesis_holds, "{rep:?}");
        assert_eq!(rep.levels, levels);
        let closed = (4.0 * levels as f64 + 6.0 * (0.5f64.powi(levels as i32) - 1.0)) * rep.close_blocks as f64;
        assert_eq!(rep.bound, closed);
        // per-level block counts summed over all (i, j) level pairs
        let summed: f64 = (0..=levels)
            .flat_map(|i| (0..=levels).map(move |j| 0.5f64.powi(i.min(j) as i32)))
            .sum::<f64>()
            * rep.close_blocks as f64;
        assert!(rep.actual_blocks as f64 <= summed, "{rep:?}");
        // the closed form undercuts the summed count for L < 3
        if levels >= 3 {
            assert!(rep.within_bound, "{rep:?}");
        }

        let a = h2.densify().unwrap();
        assert!((f.to_dense() - &a).norm() <= 1e-12 * a.norm());
    }
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let status = Command::new(BIN)
        .args(["bench", "--kernel", "exp", "--dim", "2", "--sizes", "256,512", "--solver", "chol", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), METRICS_HEADER.join(","));
    assert_eq!(metrics.lines().count(), 3);
    assert!(out.join("manifest.json").exists());

    for args in [
        vec!["bench", "--eps", "2", "--sizes", "64"],
        vec!["bench", "--leaf", "1", "--sizes", "64"],
        vec!["bench", "--kernel", "piecewise", "--d", "-1", "--sizes", "64"],
    ] {
        let status = Command::new(BIN).args(&args).arg("--out").arg(dir.path().join("bad")).status().unwrap();
        assert_eq!(status.code(), Some(2), "{args:?}");
    }

    let status = Command::new(BIN)
        .args(["bench", "--kernel", "inv", "--sizes", "128", "--solver", "chol", "--out"])
        .arg(dir.path().join("notspd"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn cli_stages_compose() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let run = |args: &[&str]| {
        let out = Command::new(BIN).args(args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    let s = |path: &Path| path.to_str().unwrap().to_string();

    run(&["points", "--dim", "3", "--n", "500", "--seed", "3", "--out", &s(&p("pts.bin"))]);
    run(&["build", "--points", &s(&p("pts.bin")), "--kernel", "exp", "--eps", "1e-8", "--out", &s(&p("a.h2"))]);
    run(&["sparsify", "--h2", &s(&p("a.h2")), "--out", &s(&p("a.fac")), "--dump-s", &s(&p("s.mtx"))]);
    let rhs: String = (0..500).map(|i| format!("{}\n", (i % 7) as f64 - 3.0)).collect();
    std::fs::write(p("b.txt"), &rhs).unwrap();
    run(&["solve", "--factorization", &s(&p("a.fac")), "--rhs", &s(&p("b.txt")), "--solver", "chol", "--out", &s(&p("x.txt"))]);

    let h2 = h2sparse::io::read_h2(std::fs::File::open(p("a.h2")).unwrap()).unwrap();
    let x = h2sparse::io::read_vector_text(std::io::BufReader::new(std::fs::File::open(p("x.txt")).unwrap())).unwrap();
    let b = DVector::from_iterator(500, rhs.lines().map(|l| l.parse::<f64>().unwrap()));
    let ax = DVector::from_vec(h2.matvec(&x).unwrap());
    assert!((ax - &b).norm() <= 1e-7 * b.norm());
    assert!(std::fs::read_to_string(p("s.mtx")).unwrap().starts_with("%%MatrixMarket"));
}
