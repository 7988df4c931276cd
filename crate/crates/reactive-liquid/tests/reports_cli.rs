//! Report files and the command-line surface: CSV schemas, accounting between
//! completion rows and processed counts, and the run/compare subcommands.

use std::process::Command;

use reactive_liquid::harness::{
    compare::compare_series,
    report::{emit_comparison, emit_reports, read_cumulative},
    run_experiment, InputSpec, Mode, RunConfig,
};

fn tiny_cfg(points_per_taxi: u32) -> RunConfig {
    RunConfig {
        mode: Mode::Liquid { tasks: 3 },
        seed: 61,
        duration_s: 20,
        quiesce_grace_s: 20,
        input: InputSpec::Synth {
            taxis: 10,
            points_per_taxi,
            hotspots: 3,
        },
        ..RunConfig::default()
    }
}

#[test]
fn empty_run_emits_headers_only_completion_csv() {
    // One unavoidable point (the generator minimum is 1 per taxi with 1 taxi),
    // so make a truly empty run by never letting ingestion publish: rate-based
    // source with zero-duration horizon is overkill; instead check headers on
    // the completion file of a run whose workload never reaches the horizon.
    let mut cfg = tiny_cfg(1);
    cfg.input = InputSpec::Synth {
        taxis: 1,
        points_per_taxi: 1,
        hotspots: 1,
    };
    cfg.rate = Some(1_000_000); // live source publishes after t=0
    cfg.duration_s = 1;
    cfg.quiesce_grace_s = 0;
    // Kill all workers instantly so nothing processes within the horizon.
    let mut sim = reactive_liquid::harness::build_world(&cfg).unwrap();
    for n in 0..3 {
        sim.kill_node(reactive_liquid::mailbox::NodeId(n));
    }
    sim.run();
    let out = reactive_liquid::harness::collect_output(&cfg, &sim);
    assert_eq!(out.metrics.completions.len(), 0);
    assert_eq!(out.macro_emissions, 0, "no input, no macro epochs");
    let dir = tempfile::tempdir().unwrap();
    emit_reports(dir.path(), &out).unwrap();
    let completion = std::fs::read_to_string(dir.path().join("completion.csv")).unwrap();
    assert_eq!(completion, "msg_id,consume_us,complete_us\n");
    let throughput = std::fs::read_to_string(dir.path().join("throughput.csv")).unwrap();
    assert_eq!(throughput, "t_sec,count\n1,0\n");
}

#[test]
fn completion_rows_match_processed_count_and_cumulative_is_monotone() {
    let cfg = tiny_cfg(200);
    let out = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_reports(dir.path(), &out).unwrap();

    let completion = std::fs::read_to_string(dir.path().join("completion.csv")).unwrap();
    let rows = completion.lines().count() - 1;
    assert_eq!(
        rows as u64,
        out.metrics.unique_count + out.metrics.duplicate_count,
        "completion.csv rows = processed count including duplicates"
    );

    let cumulative = read_cumulative(&dir.path().join("cumulative.csv")).unwrap();
    assert!(cumulative.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(cumulative.len() as u64, cfg.duration_s);
}

#[test]
fn comparison_csv_pairs_runs_on_the_shared_grid() {
    let a = run_experiment(&tiny_cfg(200)).unwrap();
    let b = run_experiment(&tiny_cfg(400)).unwrap();
    let report = compare_series(&a.metrics.cumulative, &b.metrics.cumulative).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_comparison(dir.path(), &report, "a", "b").unwrap();
    let csv = std::fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    assert!(csv.starts_with("t_sec,a_total,b_total\n"));
    assert_eq!(csv.lines().count() - 1, report.points.len());
    let text = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(text.contains("slope:"));
    assert!(text.contains("r_squared:"));
}

#[test]
fn cli_run_and_compare_round_trip() {
    let bin = env!("CARGO_BIN_EXE_rliquid");
    let dir = tempfile::tempdir().unwrap();
    let liquid_dir = dir.path().join("liquid");
    let reactive_dir = dir.path().join("reactive");

    for (mode, out_dir, extra) in [
        ("liquid", &liquid_dir, vec!["--tasks", "3"]),
        (
            "reactive",
            &reactive_dir,
            vec!["--pool-min", "3", "--pool-max", "12"],
        ),
    ] {
        let mut cmd = Command::new(bin);
        cmd.args([
            "run",
            "--mode",
            mode,
            "--duration",
            "30",
            "--seed",
            "9",
            "--input",
            "synth:taxis=20,points=1000,hotspots=3",
            "--deterministic",
            "--out",
        ])
        .arg(out_dir)
        .args(&extra);
        let status = cmd.status().unwrap();
        assert!(status.success(), "rliquid run --mode {mode} failed");
        for file in [
            "throughput.csv",
            "cumulative.csv",
            "completion.csv",
            "summary.txt",
        ] {
            assert!(out_dir.join(file).exists(), "{file} missing for {mode}");
        }
    }

    let report_dir = dir.path().join("report");
    let status = Command::new(bin)
        .arg("compare")
        .arg(&liquid_dir)
        .arg(&reactive_dir)
        .arg("--out")
        .arg(&report_dir)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(report_dir.join("comparison.csv").exists());
    let report = std::fs::read_to_string(report_dir.join("report.txt")).unwrap();
    assert!(report.contains("slope:"));
}

#[test]
fn cli_rejects_bad_config() {
    let bin = env!("CARGO_BIN_EXE_rliquid");
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(bin)
        .args(["run", "--mode", "warp", "--deterministic", "--out"])
        .arg(dir.path().join("x"))
        .status()
        .unwrap();
    assert!(!status.success());

    let status = Command::new(bin)
        .arg("compare")
        .arg(dir.path().join("missing-a"))
        .arg(dir.path().join("missing-b"))
        .arg("--out")
        .arg(dir.path().join("r"))
        .status()
        .unwrap();
    assert!(!status.success());
}
