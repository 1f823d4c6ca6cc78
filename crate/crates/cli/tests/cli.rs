//! End-to-end tests of the `fuselvm` binary: every subcommand, exit codes,
//! output layout, and byte-level reproducibility.

use std::path::Path;
use std::process::{Command, Output};

fn fuselvm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fuselvm"))
        .args(args)
        .output()
        .expect("failed to run fuselvm")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn simulate_small(dir: &Path, seed: u64) {
    let out = fuselvm(&[
        "simulate",
        "--preset",
        "community",
        "--seed",
        &seed.to_string(),
        "--out",
        dir.to_str().unwrap(),
        "--dims",
        "5,3",
        "--replicates",
        "12",
        "--rate",
        "60",
    ]);
    assert_success(&out);
}

#[test]
fn simulate_writes_dataset_and_truth() {
    let tmp = tempfile::tempdir().unwrap();
    simulate_small(tmp.path(), 7);
    assert!(tmp.path().join("manifest.json").exists());
    assert!(tmp.path().join("counts_k0_l0.csv").exists());
    assert!(tmp.path().join("counts_k0_l1.csv").exists());
    let truth: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("truth.json")).unwrap())
            .unwrap();
    assert_eq!(truth["blocks"][0]["cov_dim"], 8);

    // Same seed, fresh directory: byte-identical outputs.
    let tmp2 = tempfile::tempdir().unwrap();
    simulate_small(tmp2.path(), 7);
    for name in ["manifest.json", "counts_k0_l0.csv", "truth.json"] {
        assert_eq!(
            std::fs::read(tmp.path().join(name)).unwrap(),
            std::fs::read(tmp2.path().join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn fit_writes_model_trace_and_embeddings() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate_small(&sim, 1);
    let manifest = sim.join("manifest.json");
    let run = tmp.path().join("run");
    let args = [
        "fit",
        "--data",
        manifest.to_str().unwrap(),
        "--rank",
        "2",
        "--seed",
        "42",
        "--out",
        run.to_str().unwrap(),
    ];
    let out = fuselvm(&args);
    assert_success(&out);
    assert!(run.join("model.json").exists());
    assert!(run.join("embeddings_k0.csv").exists());
    let elbo = std::fs::read_to_string(run.join("elbo.csv")).unwrap();
    assert!(elbo.starts_with("# fuselvm"), "missing metadata line: {elbo}");
    assert!(elbo.lines().nth(1).unwrap().starts_with("iteration,elbo"));

    // Rerun with the same flags: identical model bytes.
    let run2 = tmp.path().join("run2");
    let mut args2 = args;
    args2[8] = run2.to_str().unwrap();
    assert_success(&fuselvm(&args2));
    assert_eq!(
        std::fs::read(run.join("model.json")).unwrap(),
        std::fs::read(run2.join("model.json")).unwrap()
    );
}

#[test]
fn fit_reports_missing_manifest() {
    let out = fuselvm(&[
        "fit",
        "--data",
        "/nonexistent/manifest.json",
        "--rank",
        "2",
        "--out",
        "/tmp/fuselvm-unused",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/nonexistent/manifest.json"), "{stderr}");
}

#[test]
fn fit_exit_code_two_when_not_converged() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate_small(&sim, 3);
    let run = tmp.path().join("run");
    let out = fuselvm(&[
        "fit",
        "--data",
        sim.join("manifest.json").to_str().unwrap(),
        "--rank",
        "2",
        "--max-iters",
        "2",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    // The model is still written.
    assert!(run.join("model.json").exists());
}

#[test]
fn select_writes_sweep_and_selected_rank() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate_small(&sim, 5);
    let out_dir = tmp.path().join("select");
    let out = fuselvm(&[
        "select",
        "--data",
        sim.join("manifest.json").to_str().unwrap(),
        "--ranks",
        "1:3",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_success(&out);
    let sweep = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    // Metadata line, header, one row per rank.
    assert_eq!(sweep.lines().count(), 5, "{sweep}");
    let selected: usize = std::fs::read_to_string(out_dir.join("selected_rank.txt"))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!((1..=3).contains(&selected));

    // The selected-rank file feeds back into fit.
    let refit = tmp.path().join("refit");
    assert_success(&fuselvm(&[
        "fit",
        "--data",
        sim.join("manifest.json").to_str().unwrap(),
        "--rank-file",
        out_dir.join("selected_rank.txt").to_str().unwrap(),
        "--out",
        refit.to_str().unwrap(),
    ]));
}

#[test]
fn covnet_exports_networks_and_degree_differences() {
    let tmp = tempfile::tempdir().unwrap();
    let mut models = Vec::new();
    for seed in [11u64, 12] {
        let sim = tmp.path().join(format!("sim{seed}"));
        simulate_small(&sim, seed);
        let run = tmp.path().join(format!("run{seed}"));
        assert_success(&fuselvm(&[
            "fit",
            "--data",
            sim.join("manifest.json").to_str().unwrap(),
            "--rank",
            "2",
            "--out",
            run.to_str().unwrap(),
        ]));
        models.push(run.join("model.json"));
    }
    let net = tmp.path().join("net");
    let out = fuselvm(&[
        "covnet",
        "--model",
        models[0].to_str().unwrap(),
        "--model",
        models[1].to_str().unwrap(),
        "--threshold",
        "0.5",
        "--out",
        net.to_str().unwrap(),
    ]);
    assert_success(&out);
    for name in [
        "corr_m0_k0_l0.csv",
        "edges_m0_k0_l0.csv",
        "degree_m0_k0_l0.csv",
        "corr_m1_k0_l1.csv",
        "degree_diff_k0_l0.csv",
        "degree_diff_k0_l1.csv",
    ] {
        assert!(net.join(name).exists(), "missing {name}");
    }
    // Degree differences are sorted in decreasing order.
    let diff = std::fs::read_to_string(net.join("degree_diff_k0_l0.csv")).unwrap();
    let diffs: Vec<i64> = diff
        .lines()
        .skip(2)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(diffs.windows(2).all(|w| w[0] >= w[1]), "{diffs:?}");

    // Inter scope stacks species into one network per condition.
    let net_inter = tmp.path().join("net_inter");
    assert_success(&fuselvm(&[
        "covnet",
        "--model",
        models[0].to_str().unwrap(),
        "--scope",
        "inter",
        "--threshold",
        "0.5",
        "--out",
        net_inter.to_str().unwrap(),
    ]));
    let corr = std::fs::read_to_string(net_inter.join("corr_m0_k0_inter.csv")).unwrap();
    let header = corr.lines().nth(1).unwrap();
    assert_eq!(header.split(',').count(), 8);
    assert!(header.starts_with("species0:f000"));
}

#[test]
fn compare_writes_one_row_per_method() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("cmp");
    let out = fuselvm(&[
        "compare",
        "--preset",
        "community",
        "--seeds",
        "2",
        "--methods",
        "empirical,ledoit_wolf,proposed",
        "--rank",
        "2",
        "--dims",
        "4,3",
        "--replicates",
        "15",
        "--rate",
        "80",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_success(&out);
    let csv = std::fs::read_to_string(out_dir.join("compare.csv")).unwrap();
    // Metadata line, header, three method rows.
    assert_eq!(csv.lines().count(), 5, "{csv}");
    assert!(csv.contains("\nproposed,"));
}

#[test]
fn embed_recomputes_embeddings_from_saved_model() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate_small(&sim, 21);
    let run = tmp.path().join("run");
    assert_success(&fuselvm(&[
        "fit",
        "--data",
        sim.join("manifest.json").to_str().unwrap(),
        "--rank",
        "2",
        "--out",
        run.to_str().unwrap(),
    ]));
    let emb_dir = tmp.path().join("emb");
    assert_success(&fuselvm(&[
        "embed",
        "--model",
        run.join("model.json").to_str().unwrap(),
        "--data",
        sim.join("manifest.json").to_str().unwrap(),
        "--out",
        emb_dir.to_str().unwrap(),
    ]));
    let text = std::fs::read_to_string(emb_dir.join("embeddings_k0.csv")).unwrap();
    // Metadata line, header, one row per replicate.
    assert_eq!(text.lines().count(), 14, "{text}");

    // A structurally different dataset is rejected by the fingerprint check
    // (the fingerprint digests shapes and labels).
    let other = tmp.path().join("other");
    assert_success(&fuselvm(&[
        "simulate",
        "--preset",
        "community",
        "--seed",
        "22",
        "--out",
        other.to_str().unwrap(),
        "--dims",
        "6,3",
        "--replicates",
        "12",
        "--rate",
        "60",
    ]));
    let out = fuselvm(&[
        "embed",
        "--model",
        run.join("model.json").to_str().unwrap(),
        "--data",
        other.join("manifest.json").to_str().unwrap(),
        "--out",
        emb_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
