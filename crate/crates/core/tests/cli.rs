use std::fs;
use std::path::Path;

use lrqk::cli::run_cli;
use lrqk::workload::{heads_to_tensors, save_trace, HeadTensors};
use lrqk::Matrix;

fn run(args: &[&str]) -> i32 {
    run_cli(std::iter::once("lrqk").chain(args.iter().copied()))
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

const SMALL: [&str; 8] = [
    "--len",
    "96",
    "--dim",
    "16",
    "--true-rank",
    "4",
    "--recency",
    "1.0",
];

#[test]
fn simulate_is_deterministic_and_well_formed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = dir.path().to_str().unwrap();
        let mut args = vec![
            "simulate", "--rank", "4", "--topk", "8", "--lite", "4", "--steps", "40", "--heads",
            "2",
        ];
        args.extend(SMALL);
        args.extend(["--out", out]);
        assert_eq!(run(&args), 0);
    }
    for name in [
        "report_h0.csv",
        "report_h1.csv",
        "stats_h1.csv",
        "miss_hist_h0.csv",
        "summary.json",
    ] {
        let x = fs::read(a.path().join(name)).unwrap();
        assert_eq!(x, fs::read(b.path().join(name)).unwrap(), "{name} differs");
    }
    let (header, rows) = read_csv(&a.path().join("report_h0.csv"));
    assert_eq!(header, ["step", "selected", "miss", "recall", "output_err"]);
    assert_eq!(rows.len(), 40);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0].parse::<usize>().unwrap(), 96 + i);
        assert_eq!(r[1].parse::<usize>().unwrap(), 12);
        let recall: f64 = r[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&recall));
        assert!(r[4].parse::<f64>().unwrap() >= 0.0);
    }
    let (_, hist) = read_csv(&a.path().join("miss_hist_h0.csv"));
    assert_eq!(
        hist.iter()
            .map(|r| r[2].parse::<usize>().unwrap())
            .sum::<usize>(),
        40
    );
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(a.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["heads"].as_array().unwrap().len(), 2);
    assert_eq!(summary["heads"][0]["config"]["k_budget"], 8);
}

#[test]
fn factorize_writes_trajectory_and_residuals() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut args = vec![
        "factorize",
        "--rank",
        "4",
        "--max-iter",
        "5",
        "--tol",
        "1e-30",
        "--init",
        "topcol",
    ];
    args.extend(SMALL);
    args.extend(["--out", out]);
    assert_eq!(run(&args), 0);
    let (header, rows) = read_csv(&dir.path().join("trajectory_h0.csv"));
    assert_eq!(header, ["sweep", "lagrangian", "factor_change"]);
    assert_eq!(rows.len(), 6);
    assert!(rows[0][2].is_empty());
    let values: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(values.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    let (header, rows) = read_csv(&dir.path().join("residuals.csv"));
    assert_eq!(
        header,
        ["head", "q_rel", "k_rel", "qk_rel", "sweeps", "converged"]
    );
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0][4].as_str(), rows[0][5].as_str()), ("5", "false"));
}

#[test]
fn synth_then_spectrum_and_recency_from_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.lrqk");
    let trace_s = trace.to_str().unwrap();
    let mut args = vec!["synth", "--heads", "2", "--out", trace_s];
    args.extend(SMALL);
    assert_eq!(run(&args), 0);
    let out = dir.path().join("diag");
    let out_s = out.to_str().unwrap();
    assert_eq!(run(&["spectrum", "--trace", trace_s, "--out", out_s]), 0);
    assert_eq!(
        run(&["recency", "--trace", trace_s, "--window", "8", "--out", out_s]),
        0
    );
    for name in [
        "spectrum_q_h0.csv",
        "spectrum_k_h1.csv",
        "spectrum_q_mean.csv",
    ] {
        let (header, rows) = read_csv(&out.join(name));
        assert_eq!(header, ["index", "sigma"]);
        assert_eq!(rows.len(), 16);
    }
    let (header, rows) = read_csv(&out.join("profile_mean.csv"));
    assert_eq!(header, ["offset", "weight"]);
    assert_eq!(rows.first().unwrap()[0], "-7");
    assert_eq!(rows.last().unwrap()[0], "0");
}

#[test]
fn rank_one_trace_has_one_dominant_sigma() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("r1.lrqk");
    let u = [1.0, -2.0, 0.5, 3.0, 1.5];
    let v = [2.0, 1.0, -1.0];
    let rows: Vec<Vec<f64>> = u
        .iter()
        .map(|a| v.iter().map(|b| a * b).collect())
        .collect();
    let m = Matrix::from_rows(&rows).unwrap();
    save_trace(
        &trace,
        &heads_to_tensors(&[HeadTensors {
            q: m.clone(),
            k: m.clone(),
            v: m,
        }]),
    )
    .unwrap();
    let out = dir.path().join("s");
    assert_eq!(
        run(&[
            "spectrum",
            "--trace",
            trace.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let (_, rows) = read_csv(&out.join("spectrum_q_h0.csv"));
    let s: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(s[0] > 1.0);
    assert!(s[1..].iter().all(|&x| x < 1e-6 * s[0]), "{s:?}");
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(run(&["simulate", "--trace", "a", "--dim", "8"]), 2);
    assert_eq!(
        run(&[
            "simulate",
            "--len",
            "8",
            "--dim",
            "4",
            "--true-rank",
            "2",
            "--rank",
            "2",
            "--topk",
            "0",
            "--out",
            out
        ]),
        2
    );
    assert_eq!(
        run(&[
            "recency",
            "--len",
            "8",
            "--dim",
            "4",
            "--true-rank",
            "2",
            "--window",
            "9",
            "--out",
            out
        ]),
        2
    );
    let bad = dir.path().join("bad.lrqk");
    fs::write(&bad, b"NOPE").unwrap();
    assert_eq!(
        run(&["spectrum", "--trace", bad.to_str().unwrap(), "--out", out]),
        1
    );
}
