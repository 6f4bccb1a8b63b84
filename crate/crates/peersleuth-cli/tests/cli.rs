//! End-to-end tests driving the compiled binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use peersleuth::pipeline::{CSV_SUMMARY_HEADER, HOST_STATS_CSV_HEADER};

const SMALL_GEN_CONFIG: &str = r#"{
  "internal_hosts": 60,
  "seed": 1,
  "min_injected_dd": 20,
  "background": { "private_server_pool": 400 },
  "botnets": [
    { "family": "alpha", "bot_count": 4, "peer_pool_size": 120, "shared_contact_rate": 0.5 }
  ],
  "p2p_apps": [
    { "app": "share-a", "host_count": 3, "universe_size": 2000,
      "universe_prefixes": 50, "contacts_per_host": 300 }
  ]
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_peersleuth"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// Generates the small dataset into `dir` and returns the flow path,
/// truth path, and `--internal-cidr` flag pairs from the manifest.
fn generate_dataset(dir: &Path) -> (PathBuf, PathBuf, Vec<String>) {
    let gen_config = dir.join("gen.json");
    std::fs::write(&gen_config, SMALL_GEN_CONFIG).unwrap();
    let data = dir.join("data");
    run_ok(&[
        "generate",
        "--config",
        gen_config.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap())
            .unwrap();
    let mut cidr_flags = Vec::new();
    for cidr in manifest["internal_cidrs"].as_array().unwrap() {
        cidr_flags.push("--internal-cidr".to_string());
        cidr_flags.push(cidr.as_str().unwrap().to_string());
    }
    (data.join("flows.csv"), data.join("truth.csv"), cidr_flags)
}

fn detect_args<'a>(
    flows: &'a Path,
    cidr_flags: &'a [String],
    rest: &[&'a str],
) -> Vec<&'a str> {
    let mut args = vec!["detect", "--flows", flows.to_str().unwrap(), "--theta-dd", "20"];
    args.extend(cidr_flags.iter().map(String::as_str));
    args.extend_from_slice(rest);
    args
}

#[test]
fn generate_detect_score_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (flows, truth, cidr_flags) = generate_dataset(dir.path());
    let report_path = dir.path().join("report.json");

    run_ok(&detect_args(
        &flows,
        &cidr_flags,
        &[
            "--truth",
            truth.to_str().unwrap(),
            "--report",
            report_path.to_str().unwrap(),
        ],
    ));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["stageCounts"]["internalHosts"], 60);
    assert_eq!(report["stageCounts"]["p2pHosts"], 7);
    assert_eq!(report["stageCounts"]["communityHosts"], 7);
    assert_eq!(report["stageCounts"]["botCandidates"], 4);
    assert_eq!(report["metrics"]["dr"], 1.0);
    assert_eq!(report["metrics"]["fp"], 0);

    let out = run_ok(&[
        "score",
        "--report",
        report_path.to_str().unwrap(),
        "--truth",
        truth.to_str().unwrap(),
    ]);
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(metrics, report["metrics"]);
}

#[test]
fn generate_is_deterministic_and_seed_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let gen_config = dir.path().join("gen.json");
    std::fs::write(&gen_config, SMALL_GEN_CONFIG).unwrap();

    for out in ["a", "b"] {
        run_ok(&[
            "generate",
            "--config",
            gen_config.to_str().unwrap(),
            "--out",
            dir.path().join(out).to_str().unwrap(),
        ]);
    }
    run_ok(&[
        "generate",
        "--config",
        gen_config.to_str().unwrap(),
        "--seed",
        "7",
        "--out",
        dir.path().join("c").to_str().unwrap(),
    ]);

    let read = |name: &str| std::fs::read(dir.path().join(name).join("flows.csv")).unwrap();
    assert_eq!(read("a"), read("b"), "same seed, same bytes");
    assert_ne!(read("a"), read("c"), "the seed flag changes the dataset");
}

#[test]
fn detect_without_internal_cidr_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let (flows, _, _) = generate_dataset(dir.path());
    let out = run(&["detect", "--flows", flows.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("internal CIDR"));
}

#[test]
fn missing_and_malformed_inputs_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (_, truth, cidr_flags) = generate_dataset(dir.path());

    let missing = dir.path().join("nope.csv");
    let out = run(&detect_args(&missing, &cidr_flags, &[]));
    assert_eq!(exit_code(&out), 3);

    let out = run(&detect_args(&truth, &cidr_flags, &[]));
    assert_eq!(exit_code(&out), 3, "a truth csv is not a flow csv");
    assert!(String::from_utf8_lossy(&out.stderr).contains("header"));
}

#[test]
fn config_file_applies_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let (flows, _, cidr_flags) = generate_dataset(dir.path());
    let cidrs: Vec<&str> = cidr_flags
        .iter()
        .filter(|s| *s != "--internal-cidr")
        .map(String::as_str)
        .collect();
    let config = dir.path().join("run.conf");
    let mut text = String::from("theta-dd = 50\n");
    for cidr in &cidrs {
        text.push_str(&format!("internal-cidr = {cidr}\n"));
    }
    std::fs::write(&config, text).unwrap();

    let out = run_ok(&[
        "detect",
        "--flows",
        flows.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--theta-dd",
        "20",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(
        report["stageCounts"]["p2pHosts"], 7,
        "the flag's theta-dd 20 wins over the file's 50"
    );
    assert_eq!(report["config"]["thetaDd"], 20);

    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "bogus = 1\n").unwrap();
    let out = run(&[
        "detect",
        "--flows",
        flows.to_str().unwrap(),
        "--config",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn csv_summary_format_prints_one_row_per_community() {
    let dir = tempfile::tempdir().unwrap();
    let (flows, _, cidr_flags) = generate_dataset(dir.path());
    let out = run_ok(&detect_args(&flows, &cidr_flags, &["--format", "csv-summary"]));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], CSV_SUMMARY_HEADER);
    assert_eq!(lines.len(), 3, "header plus one bot and one p2p community");
}

#[test]
fn dump_flags_write_stage_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (flows, _, cidr_flags) = generate_dataset(dir.path());
    let hosts = dir.path().join("hosts.csv");
    let edges = dir.path().join("edges.txt");
    let vertices = dir.path().join("vertices.txt");
    let partition = dir.path().join("partition.txt");

    run_ok(&detect_args(
        &flows,
        &cidr_flags,
        &[
            "--dump-p2p-hosts",
            hosts.to_str().unwrap(),
            "--dump-edges",
            edges.to_str().unwrap(),
            "--dump-vertices",
            vertices.to_str().unwrap(),
            "--dump-partition",
            partition.to_str().unwrap(),
        ],
    ));

    let hosts = std::fs::read_to_string(hosts).unwrap();
    assert_eq!(hosts.lines().next().unwrap(), HOST_STATS_CSV_HEADER);
    assert_eq!(hosts.lines().count(), 8, "header plus seven survivors");

    let vertices = std::fs::read_to_string(vertices).unwrap();
    assert_eq!(vertices.lines().count(), 7);
    let edges = std::fs::read_to_string(edges).unwrap();
    assert_eq!(
        edges.lines().count(),
        9,
        "a four-clique of bots plus a p2p triangle"
    );
    for line in edges.lines() {
        assert_eq!(line.split(' ').count(), 3);
    }

    let partition = std::fs::read_to_string(partition).unwrap();
    assert_eq!(partition.lines().count(), 7);
    for line in partition.lines() {
        assert_eq!(line.split(' ').count(), 2);
    }
}

#[test]
fn sweep_writes_a_metric_curve() {
    let dir = tempfile::tempdir().unwrap();
    let (flows, truth, cidr_flags) = generate_dataset(dir.path());
    let out_path = dir.path().join("curve.csv");

    let mut args = vec![
        "sweep",
        "--flows",
        flows.to_str().unwrap(),
        "--truth",
        truth.to_str().unwrap(),
        "--theta-dd",
        "20",
        "--param",
        "theta-avgmcr",
        "--values",
        "0.25,0.45,0.8",
        "--out",
        out_path.to_str().unwrap(),
    ];
    args.extend(cidr_flags.iter().map(String::as_str));
    run_ok(&args);

    let text = std::fs::read_to_string(&out_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("theta-avgmcr,"));
    assert!(lines[1].starts_with("0.25,"));
    assert!(lines[3].ends_with(",0,0,0,0,0,0,0,0,0"), "detection dies at 0.8");

    let out = run(&[
        "sweep",
        "--flows",
        flows.to_str().unwrap(),
        "--truth",
        truth.to_str().unwrap(),
        "--param",
        "gamma",
        "--values",
        "1",
    ]);
    assert_eq!(exit_code(&out), 2, "unknown parameter is a usage error");
}
