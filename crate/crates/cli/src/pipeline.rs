//! Running prepared scenarios and writing their artifacts.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use moe_offload::gating::PRNG_ALGORITHM;
use moe_offload::simulator::{chrome_trace, write_events_csv};
use moe_offload::simulator::{simulate_layers, ModelRun};
use moe_offload::verification::{check_report, Violation};
use moe_offload::{replay_check, CostVector, Method, Schedule, SimReport};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::scenario::{prepare, KSpec, Policy, Prepared, Scenario, WorkloadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum TraceFormat {
    #[default]
    Chrome,
    Csv,
    Both,
}

impl TraceFormat {
    fn chrome(self) -> bool {
        matches!(self, TraceFormat::Chrome | TraceFormat::Both)
    }

    fn csv(self) -> bool {
        matches!(self, TraceFormat::Csv | TraceFormat::Both)
    }
}

pub struct PolicyOutcome {
    pub policy: Policy,
    pub run: ModelRun,
    /// Replay findings; empty unless the simulator is broken.
    pub violations: Vec<Violation>,
}

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub policy: String,
    /// Distinct ordering methods used across layers, joined by `+`.
    pub method: String,
    pub k: usize,
    pub layers: usize,
    pub experts: usize,
    pub beta: f64,
    pub sum_alpha: f64,
    pub max_alpha: f64,
    pub makespan: f64,
    pub lower_bound: f64,
    pub compute_stall: f64,
    pub compute_busy: f64,
    pub load_busy: f64,
    pub overlap_efficiency: f64,
    pub peak_resident_experts: usize,
    pub feasible_layers: usize,
    pub greedy_counterexamples: usize,
}

pub const SUMMARY_HEADER: &[&str] = &[
    "scenario",
    "policy",
    "method",
    "k",
    "layers",
    "experts",
    "beta",
    "sum_alpha",
    "max_alpha",
    "makespan",
    "lower_bound",
    "compute_stall",
    "compute_busy",
    "load_busy",
    "overlap_efficiency",
    "peak_resident_experts",
    "feasible_layers",
    "greedy_counterexamples",
];

fn method_name(method: Method) -> &'static str {
    match method {
        Method::Greedy => "greedy",
        Method::ExactFallback => "exact_fallback",
        Method::Exact => "exact",
        Method::Naive => "naive",
    }
}

impl SummaryRow {
    pub fn new(prepared: &Prepared, outcome: &PolicyOutcome) -> Self {
        let layers = &prepared.layers;
        let mut methods: Vec<&str> = Vec::new();
        for s in &outcome.run.schedules {
            let name = method_name(s.method);
            if !methods.contains(&name) {
                methods.push(name);
            }
        }
        let report = &outcome.run.report;
        SummaryRow {
            scenario: prepared.scenario.name.clone(),
            policy: outcome.policy.name().into(),
            method: methods.join("+"),
            k: prepared.k,
            layers: layers.len(),
            experts: layers.first().map_or(0, CostVector::len),
            beta: layers.first().map_or(0.0, |c| c.beta),
            sum_alpha: layers.iter().map(CostVector::total_alpha).sum(),
            max_alpha: layers
                .iter()
                .flat_map(|c| c.alphas.iter().copied())
                .fold(0.0, f64::max),
            makespan: report.makespan,
            lower_bound: report
                .per_layer_breakdown
                .iter()
                .map(|l| l.lower_bound)
                .sum(),
            compute_stall: report.compute_stall,
            compute_busy: report.compute_busy,
            load_busy: report.load_busy,
            overlap_efficiency: report.overlap_efficiency,
            peak_resident_experts: report.peak_resident_experts,
            feasible_layers: outcome.run.schedules.iter().filter(|s| s.feasible).count(),
            greedy_counterexamples: outcome
                .run
                .schedules
                .iter()
                .filter(|s| s.greedy_counterexample)
                .count(),
        }
    }
}

/// Simulates every policy of the scenario and replays each timeline.
pub fn run_policies(prepared: &Prepared) -> Result<Vec<PolicyOutcome>> {
    prepared
        .scenario
        .policies
        .iter()
        .map(|&policy| {
            let options = policy.options(&prepared.scenario);
            let run = simulate_layers(&prepared.layers, prepared.k, &options)?;
            let mut violations = replay_check(&run.events, &prepared.layers, prepared.k);
            violations.extend(check_report(&run.events, &run.report));
            Ok(PolicyOutcome {
                policy,
                run,
                violations,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct LayerEntry<'a> {
    layer: usize,
    beta: f64,
    alphas: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    token_counts: Option<&'a [u64]>,
    schedule: &'a Schedule,
}

#[derive(Serialize)]
struct PolicyReport<'a> {
    scenario: &'a str,
    policy: Policy,
    k: usize,
    seed: u64,
    prng: &'a str,
    layers: Vec<LayerEntry<'a>>,
    report: &'a SimReport,
    #[serde(skip_serializing_if = "<[Violation]>::is_empty")]
    violations: &'a [Violation],
}

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let context = || format!("writing {}", path.display());
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(CliError::io(context()))?;
    tmp.write_all(bytes).map_err(CliError::io(context()))?;
    tmp.as_file().sync_all().map_err(CliError::io(context()))?;
    tmp.persist(path).map_err(|e| CliError::Io {
        context: context(),
        source: e.error,
    })?;
    Ok(())
}

fn json_bytes<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serialisable");
    bytes.push(b'\n');
    bytes
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("output directory {}: {e}", dir.display())))
}

fn summary_csv(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for row in rows {
        wtr.serialize(row)
            .map_err(|e| CliError::Invariant(e.to_string()))?;
    }
    wtr.into_inner()
        .map_err(|e| CliError::Invariant(e.to_string()))
}

/// Writes traces, reports, `summary.csv` and `scenario.resolved.json` into
/// `out_dir`. Everything but `run_meta.json` is a pure function of the
/// resolved scenario.
pub fn write_outputs(
    prepared: &Prepared,
    outcomes: &[PolicyOutcome],
    out_dir: &Path,
    format: TraceFormat,
) -> Result<Vec<SummaryRow>> {
    let started = unix_time();
    create_dir(out_dir)?;
    let scenario = &prepared.scenario;

    write_atomic(
        &out_dir.join("scenario.resolved.json"),
        &json_bytes(scenario),
    )?;

    let mut rows = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        let policy = outcome.policy.name();
        if format.chrome() {
            let metadata = BTreeMap::from([
                ("scenario".to_string(), scenario.name.clone()),
                ("policy".to_string(), policy.to_string()),
                ("k".to_string(), prepared.k.to_string()),
                ("seed".to_string(), prepared.seed.to_string()),
                ("prng".to_string(), PRNG_ALGORITHM.to_string()),
            ]);
            let trace = chrome_trace(&outcome.run.events, &metadata);
            write_atomic(
                &out_dir.join(format!("trace_{policy}.json")),
                &json_bytes(&trace),
            )?;
        }
        if format.csv() {
            let mut buf = Vec::new();
            write_events_csv(&mut buf, &outcome.run.events)?;
            write_atomic(&out_dir.join(format!("events_{policy}.csv")), &buf)?;
        }

        let layers = prepared
            .layers
            .iter()
            .zip(&outcome.run.schedules)
            .enumerate()
            .map(|(layer, (costs, schedule))| LayerEntry {
                layer,
                beta: costs.beta,
                alphas: &costs.alphas,
                token_counts: prepared
                    .workloads
                    .get(layer)
                    .map(|w| w.token_counts.as_slice()),
                schedule,
            })
            .collect();
        let report = PolicyReport {
            scenario: &scenario.name,
            policy: outcome.policy,
            k: prepared.k,
            seed: prepared.seed,
            prng: PRNG_ALGORITHM,
            layers,
            report: &outcome.run.report,
            violations: &outcome.violations,
        };
        write_atomic(
            &out_dir.join(format!("report_{policy}.json")),
            &json_bytes(&report),
        )?;
        rows.push(SummaryRow::new(prepared, outcome));
    }
    write_atomic(&out_dir.join("summary.csv"), &summary_csv(&rows)?)?;

    let meta = serde_json::json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "scenario": scenario.name,
        "seed": prepared.seed,
        "prng": PRNG_ALGORITHM,
        "started_unix_s": started,
        "finished_unix_s": unix_time(),
    });
    write_atomic(&out_dir.join("run_meta.json"), &json_bytes(&meta))?;
    Ok(rows)
}

fn unix_time() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Fails with an invariant breach if any policy's replay found violations.
fn ensure_clean(outcomes: &[PolicyOutcome]) -> Result<()> {
    for outcome in outcomes {
        if let Some(first) = outcome.violations.first() {
            return Err(CliError::Invariant(format!(
                "policy {}: {} replay violation(s), first: {first:?}",
                outcome.policy,
                outcome.violations.len()
            )));
        }
    }
    Ok(())
}

/// Runs all policies, writes the artifacts and checks the replays. Artifacts
/// are written even when a replay fails so the breach can be inspected.
pub fn run_scenario(
    prepared: &Prepared,
    out_dir: &Path,
    format: TraceFormat,
) -> Result<Vec<SummaryRow>> {
    let outcomes = run_policies(prepared)?;
    let rows = write_outputs(prepared, &outcomes, out_dir, format)?;
    ensure_clean(&outcomes)?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum SweepAxis {
    K,
    TotalTokens,
    ZipfS,
    Bandwidth,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::K => "k",
            SweepAxis::TotalTokens => "total_tokens",
            SweepAxis::ZipfS => "zipf_s",
            SweepAxis::Bandwidth => "bandwidth",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &Scenario, value: &str) -> Result<Scenario> {
        let bad = |what: &str| {
            CliError::Config(format!("sweep value `{value}` for {}: {what}", self.name()))
        };
        let mut s = base.clone();
        match self {
            SweepAxis::K => {
                let k: usize = value
                    .parse()
                    .map_err(|_| bad("expected a positive integer"))?;
                if k == 0 {
                    return Err(bad("expected a positive integer"));
                }
                s.k = KSpec::Fixed(k);
            }
            SweepAxis::TotalTokens => {
                let n: u64 = value.parse().map_err(|_| bad("expected a token count"))?;
                match &mut s.workload {
                    Some(
                        WorkloadSpec::Balanced { total_tokens }
                        | WorkloadSpec::Uniform { total_tokens }
                        | WorkloadSpec::Zipf { total_tokens, .. }
                        | WorkloadSpec::Lsh { total_tokens, .. },
                    ) => *total_tokens = n,
                    _ => return Err(bad("the workload has no `total_tokens`")),
                }
            }
            SweepAxis::ZipfS => {
                let v: f64 = value.parse().map_err(|_| bad("expected a number"))?;
                match &mut s.workload {
                    Some(WorkloadSpec::Zipf { s, .. }) => *s = v,
                    _ => return Err(bad("the workload is not zipf")),
                }
            }
            SweepAxis::Bandwidth => {
                let v: f64 = value
                    .parse()
                    .map_err(|_| bad("expected bytes per second"))?;
                match &mut s.hardware {
                    Some(hw) => hw.h2d_bandwidth = v,
                    None => return Err(bad("the scenario has no `hardware`")),
                }
            }
        }
        Ok(s)
    }
}

/// What to vary and how to run it.
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<String>,
    /// Wins over the scenario's seed.
    pub seed: Option<u64>,
    pub jobs: usize,
    pub format: TraceFormat,
}

/// One sweep point: its value, output directory and summary rows.
pub struct SweepPoint {
    pub value: String,
    pub dir: PathBuf,
    pub rows: Vec<SummaryRow>,
}

/// Runs `base` once per value of the axis on up to `jobs` threads. Every
/// point shares one seed, writes into `<out_dir>/<axis>_<value>/`, and
/// `sweep.csv` lists the rows in input order whatever the thread count.
pub fn sweep(
    base: &Scenario,
    base_dir: &Path,
    spec: &SweepSpec,
    out_dir: &Path,
) -> Result<Vec<SweepPoint>> {
    let SweepSpec {
        axis,
        ref values,
        seed,
        jobs,
        format,
    } = *spec;
    if values.is_empty() {
        return Err(CliError::Config(
            "--values must list at least one value".into(),
        ));
    }
    let mut base = base.clone();
    base.seed = Some(seed.or(base.seed).unwrap_or_else(rand::random));
    // Validate every point before spending time on any.
    let points = values
        .iter()
        .map(|v| {
            let scenario = axis.apply(&base, v)?;
            let prepared = prepare(&scenario, base_dir, None)?;
            Ok((v.clone(), prepared))
        })
        .collect::<Result<Vec<_>>>()?;
    create_dir(out_dir)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("--jobs: {e}")))?;
    let results: Vec<Result<SweepPoint>> = pool.install(|| {
        points
            .par_iter()
            .map(|(value, prepared)| {
                let dir = out_dir.join(format!("{}_{value}", axis.name()));
                let rows = run_scenario(prepared, &dir, format)?;
                Ok(SweepPoint {
                    value: value.clone(),
                    dir,
                    rows,
                })
            })
            .collect()
    });
    let points = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut wtr = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    let invariant = |e: csv::Error| CliError::Invariant(e.to_string());
    let mut header = vec!["axis", "value"];
    header.extend_from_slice(SUMMARY_HEADER);
    wtr.write_record(&header).map_err(invariant)?;
    for point in &points {
        for row in &point.rows {
            wtr.serialize((axis.name(), &point.value, row))
                .map_err(invariant)?;
        }
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| CliError::Invariant(e.to_string()))?;
    write_atomic(&out_dir.join("sweep.csv"), &bytes)?;
    Ok(points)
}
