use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_moe-offload"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn run(args: &[&std::ffi::OsStr]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn run_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "run".as_ref(),
        config("four_experts.json").as_os_str(),
        "--out".as_ref(),
        dir.path().as_os_str(),
        "--trace-format".as_ref(),
        "both".as_ref(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for policy in ["greedy", "naive", "serial", "exact"] {
        for file in [
            format!("trace_{policy}.json"),
            format!("events_{policy}.csv"),
            format!("report_{policy}.json"),
        ] {
            assert!(dir.path().join(&file).is_file(), "{file}");
        }
    }
    let trace: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("trace_greedy.json")).unwrap())
            .unwrap();
    assert_eq!(trace["otherData"]["policy"], "greedy");
    assert!(trace["otherData"]["prng"]
        .as_str()
        .unwrap()
        .contains("chacha20"));

    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(
        summary.contains("four-experts,greedy,greedy,2,1,4,1.0,4.0,2.0,5.0,5.0,0.0,"),
        "{summary}"
    );
    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("run_meta.json")).unwrap()).unwrap();
    assert!(meta["started_unix_s"].as_f64().unwrap() > 0.0);
}

#[test]
fn verify_accepts_clean_traces_and_flags_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "run".as_ref(),
        config("cpm2_zipf.json").as_os_str(),
        "--out".as_ref(),
        dir.path().as_os_str(),
        "--trace-format".as_ref(),
        "csv".as_ref(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let resolved = dir.path().join("scenario.resolved.json");
    let events = dir.path().join("events_greedy.csv");
    let ok = run(&["verify".as_ref(), events.as_os_str(), resolved.as_os_str()]);
    assert!(ok.status.success(), "{}", stderr(&ok));

    // Start the second compute event 1 ms early.
    let text = std::fs::read_to_string(&events).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let row = lines
        .iter()
        .position(|l| l.starts_with("compute,"))
        .unwrap()
        + 2;
    let mut fields: Vec<String> = lines[row].split(',').map(String::from).collect();
    for f in &mut fields[3..5] {
        *f = (f.parse::<f64>().unwrap() - 1e-3).to_string();
    }
    lines[row] = fields.join(",");
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, lines.join("\n")).unwrap();
    let out = run(&["verify".as_ref(), bad.as_os_str(), resolved.as_os_str()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("causality"));
}

#[test]
fn config_errors_exit_2_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\n  \"name\": \"x\",\n  \"k\": \"lots\"\n}\n").unwrap();
    let out = run(&[
        "run".as_ref(),
        path.as_os_str(),
        "--out".as_ref(),
        dir.path().as_os_str(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("field `k`") && err.contains("line 3"), "{err}");

    let out = run(&["run".as_ref(), dir.path().join("missing.json").as_os_str()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oversized_experts_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("cpm2_zipf.json"))
        .unwrap()
        .replace(
            "\"device_memory\": 17179869184",
            "\"device_memory\": 8600000000",
        );
    let path = dir.path().join("small.json");
    std::fs::write(&path, text).unwrap();
    let out = run(&[
        "run".as_ref(),
        path.as_os_str(),
        "--out".as_ref(),
        dir.path().as_os_str(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn sweep_output_is_independent_of_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = |jobs: &str, out: &Path| {
        let o = run(&[
            "sweep".as_ref(),
            config("cpm2_zipf.json").as_os_str(),
            "--axis".as_ref(),
            "zipf_s".as_ref(),
            "--values".as_ref(),
            "0.5,1.0,1.5,2.0".as_ref(),
            "--jobs".as_ref(),
            jobs.as_ref(),
            "--out".as_ref(),
            out.as_os_str(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read_to_string(out.join("sweep.csv")).unwrap()
    };
    let one = sweep("1", &dir.path().join("one"));
    let four = sweep("4", &dir.path().join("four"));
    assert_eq!(one, four);
    assert_eq!(one.lines().count(), 1 + 4 * 3);
    assert!(dir
        .path()
        .join("four/zipf_s_1.5/report_greedy.json")
        .is_file());

    let bad = run(&[
        "sweep".as_ref(),
        config("four_experts.json").as_os_str(),
        "--axis".as_ref(),
        "bandwidth".as_ref(),
        "--values".as_ref(),
        "1e9".as_ref(),
        "--out".as_ref(),
        dir.path().join("bad").as_os_str(),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn resolved_scenario_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("cpm_small_lsh.json"))
        .unwrap()
        .replace("\"seed\": 11", "\"output_dir\": \"ignored\"");
    let path = dir.path().join("unseeded.json");
    std::fs::write(&path, text).unwrap();
    let first = dir.path().join("first");
    let out = run(&[
        "run".as_ref(),
        path.as_os_str(),
        "--out".as_ref(),
        first.as_os_str(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));

    let resolved = first.join("scenario.resolved.json");
    let scenario: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&resolved).unwrap()).unwrap();
    assert!(scenario["seed"].is_u64());
    assert!(scenario["workload"]["projection_seed"].is_u64());

    let second = dir.path().join("second");
    let out = run(&[
        "run".as_ref(),
        resolved.as_os_str(),
        "--out".as_ref(),
        second.as_os_str(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for file in [
        "summary.csv",
        "report_greedy.json",
        "trace_greedy.json",
        "scenario.resolved.json",
    ] {
        assert_eq!(
            std::fs::read(first.join(file)).unwrap(),
            std::fs::read(second.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn seed_flag_overrides_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "run".as_ref(),
        config("cpm2_zipf.json").as_os_str(),
        "--seed".as_ref(),
        "99".as_ref(),
        "--out".as_ref(),
        dir.path().as_os_str(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let scenario: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("scenario.resolved.json")).unwrap())
            .unwrap();
    assert_eq!(scenario["seed"], 99);
}

#[test]
fn presets_load_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("tiny.json"),
        r#"{"n_layers": 2, "d_model": 64, "d_ff": 256, "n_experts_per_layer": 4}"#,
    )
    .unwrap();
    let scenario = dir.path().join("tiny-run.json");
    std::fs::write(
        &scenario,
        r#"{
            "name": "tiny",
            "geometry": {"preset": "tiny", "bytes_per_param": 4},
            "hardware": {"peak_flops": 1e9, "h2d_bandwidth": 1e8,
                         "device_memory": 1048576, "reserved_memory": 0},
            "workload": {"kind": "balanced", "total_tokens": 400},
            "seed": 1
        }"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = bin()
        .env("MOE_SIM_PRESETS", dir.path())
        .args([
            "run".as_ref(),
            scenario.as_os_str(),
            "--out".as_ref(),
            out_dir.as_os_str(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let resolved: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("scenario.resolved.json")).unwrap())
            .unwrap();
    assert_eq!(resolved["geometry"]["d_ff"], 256);
    // 1 MiB / (2 * 64 * 256 * 4 bytes) = 8 experts.
    assert_eq!(resolved["k"], 8);

    let out = bin()
        .env_remove("MOE_SIM_PRESETS")
        .args([
            "run".as_ref(),
            scenario.as_os_str(),
            "--out".as_ref(),
            out_dir.as_os_str(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown preset"));
}

#[test]
fn csv_workload_is_inlined() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "run".as_ref(),
        config("csv_workload.json").as_os_str(),
        "--out".as_ref(),
        dir.path().as_os_str(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let resolved: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("scenario.resolved.json")).unwrap())
            .unwrap();
    assert_eq!(resolved["workload"]["kind"], "explicit");
    assert_eq!(resolved["workload"]["counts"][2], 2400);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("report_greedy.json")).unwrap())
            .unwrap();
    // Experts 1 and 6 have no tokens and are skipped.
    assert_eq!(
        report["layers"][0]["schedule"]["order"]
            .as_array()
            .unwrap()
            .len(),
        6
    );
}

fn sweep_rows(
    axis: &str,
    values: &str,
    out: &Path,
) -> Vec<std::collections::HashMap<String, String>> {
    let o = run(&[
        "sweep".as_ref(),
        config("cpm2_balanced.json").as_os_str(),
        "--axis".as_ref(),
        axis.as_ref(),
        "--values".as_ref(),
        values.as_ref(),
        "--out".as_ref(),
        out.as_os_str(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(out.join("sweep.csv")).unwrap();
    rdr.deserialize().map(|r| r.unwrap()).collect()
}

fn num(row: &std::collections::HashMap<String, String>, column: &str) -> f64 {
    row[column].parse().unwrap()
}

fn alphas(dir: &Path) -> Vec<f64> {
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("report_greedy.json")).unwrap()).unwrap();
    serde_json::from_value(report["layers"][0]["alphas"].clone()).unwrap()
}

#[test]
fn greedy_beats_serial_on_balanced_cpm2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "run".as_ref(),
        config("cpm2_balanced.json").as_os_str(),
        "--out".as_ref(),
        dir.path().as_os_str(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let mut rdr = csv::Reader::from_path(dir.path().join("summary.csv")).unwrap();
    let rows: Vec<std::collections::HashMap<String, String>> =
        rdr.deserialize().map(|r| r.unwrap()).collect();
    assert_eq!(rows[0]["policy"], "greedy");
    assert_eq!(rows[1]["policy"], "serial");
    assert!(num(&rows[0], "makespan") < num(&rows[1], "makespan"));
}

#[test]
fn empty_policy_list_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("none.json");
    std::fs::write(
        &path,
        r#"{"name": "none", "costs": {"alphas": [1], "beta": 1}, "k": 1, "policies": []}"#,
    )
    .unwrap();
    let out = run(&[
        "run".as_ref(),
        path.as_os_str(),
        "--out".as_ref(),
        dir.path().as_os_str(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("policies"));
}

#[test]
fn k_sweep_makespan_is_non_increasing() {
    let dir = tempfile::tempdir().unwrap();
    let rows = sweep_rows("k", "1,2,3,4,5,6,7,8,16,51", dir.path());
    let greedy: Vec<f64> = rows
        .iter()
        .filter(|r| r["policy"] == "greedy")
        .map(|r| num(r, "makespan"))
        .collect();
    assert_eq!(greedy.len(), 10);
    assert!(greedy.windows(2).all(|w| w[1] <= w[0]), "{greedy:?}");
    // Large enough K makes the balanced instance gapless.
    let last = rows.iter().rev().find(|r| r["policy"] == "greedy").unwrap();
    let (makespan, bound) = (num(last, "makespan"), num(last, "lower_bound"));
    assert!(
        (makespan - bound).abs() <= 1e-9 * bound,
        "{makespan} vs {bound}"
    );
}

#[test]
fn doubling_bandwidth_halves_beta_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let rows = sweep_rows("bandwidth", "1.6e10,3.2e10", dir.path());
    assert_eq!(num(&rows[0], "beta"), 2.0 * num(&rows[2], "beta"));
    assert_eq!(num(&rows[0], "sum_alpha"), num(&rows[2], "sum_alpha"));
}

#[test]
fn doubling_tokens_doubles_alphas_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let rows = sweep_rows("total_tokens", "131072,262144", dir.path());
    assert_eq!(num(&rows[0], "beta"), num(&rows[2], "beta"));
    let small = alphas(&dir.path().join("total_tokens_131072"));
    let large = alphas(&dir.path().join("total_tokens_262144"));
    assert_eq!(small.len(), 32);
    assert!(small.iter().zip(&large).all(|(a, b)| 2.0 * a == *b));
}
