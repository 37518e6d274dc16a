//! Scenario files: what to simulate and how.
//!
//! A scenario either derives costs from a geometry, a hardware profile and a
//! workload, or gives `costs` directly. [`prepare`] turns it into per-layer
//! cost vectors plus a resolved copy in which every default, preset and
//! external input has been made explicit, so that re-running the resolved
//! copy reproduces the run bit for bit.

use std::fmt;
use std::path::{Path, PathBuf};

use moe_offload::gating::{gaussian_tokens, read_workload_csv, seeded_rng, ExpertWorkload};
use moe_offload::model_config::{builtin_preset, PartialGeometry};
use moe_offload::simulator::{repeat_layers, ModelOptions, OrderPolicy};
use moe_offload::{
    compute_costs, resident_capacity, route_tokens, synthetic_workload, Capacity, CostVector,
    GatingModel, HardwareProfile, Mode, ModelGeometry, WorkloadKind,
};
use rand::Rng;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{CliError, Result};

/// Directory of extra geometry presets, one `<name>.json` per preset.
pub const PRESETS_ENV: &str = "MOE_SIM_PRESETS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Geometry fields, or just a preset name.
    #[serde(
        default,
        deserialize_with = "geometry_or_preset",
        skip_serializing_if = "Option::is_none"
    )]
    pub geometry: Option<PartialGeometry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hardware: Option<HardwareProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workload: Option<WorkloadSpec>,
    /// Direct costs, used instead of geometry, hardware and workload.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub costs: Option<DirectCosts>,
    /// Number of MoE layers simulated back to back.
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default)]
    pub k: KSpec,
    #[serde(default = "default_policies")]
    pub policies: Vec<Policy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub continuous_load_stream: bool,
    #[serde(default)]
    pub skip_empty_experts: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn geometry_or_preset<'de, D: Deserializer<'de>>(
    deserializer: D,
) -> std::result::Result<Option<PartialGeometry>, D::Error> {
    struct GeometryVisitor;

    impl<'de> Visitor<'de> for GeometryVisitor {
        type Value = Option<PartialGeometry>;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a geometry object or a preset name")
        }

        fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Self::Value, E> {
            Ok(Some(PartialGeometry {
                preset: Some(v.to_string()),
                ..PartialGeometry::default()
            }))
        }

        fn visit_map<A: de::MapAccess<'de>>(
            self,
            map: A,
        ) -> std::result::Result<Self::Value, A::Error> {
            PartialGeometry::deserialize(de::value::MapAccessDeserializer::new(map)).map(Some)
        }
    }

    deserializer.deserialize_any(GeometryVisitor)
}

fn default_layers() -> usize {
    1
}

fn default_policies() -> Vec<Policy> {
    vec![Policy::Greedy, Policy::Naive, Policy::Serial]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectCosts {
    pub alphas: Vec<f64>,
    pub beta: f64,
}

/// Per-layer token counts. Every layer draws from its own seed stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum WorkloadSpec {
    Balanced {
        total_tokens: u64,
    },
    Uniform {
        total_tokens: u64,
    },
    Zipf {
        s: f64,
        total_tokens: u64,
    },
    /// The same counts in every layer.
    Explicit {
        counts: Vec<u64>,
    },
    /// `expert_id,token_count` file, relative to the scenario file.
    Csv {
        path: PathBuf,
    },
    /// Gaussian hidden states routed by a random-projection hash.
    Lsh {
        total_tokens: u64,
        hidden_dim: usize,
        n_hash_bits: u32,
        /// Defaults to the scenario seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        projection_seed: Option<u64>,
    },
}

/// Resident capacity: `"auto"` (from device memory) or a fixed count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum KSpec {
    #[default]
    Auto,
    Fixed(usize),
}

impl KSpec {
    pub fn fixed(self) -> Option<usize> {
        match self {
            KSpec::Auto => None,
            KSpec::Fixed(k) => Some(k),
        }
    }
}

impl Serialize for KSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            KSpec::Auto => serializer.serialize_str("auto"),
            KSpec::Fixed(k) => serializer.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for KSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct KVisitor;

        impl Visitor<'_> for KVisitor {
            type Value = KSpec;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("\"auto\" or a positive integer")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<KSpec, E> {
                if v == 0 {
                    return Err(E::invalid_value(de::Unexpected::Unsigned(v), &self));
                }
                usize::try_from(v)
                    .map(KSpec::Fixed)
                    .map_err(|_| E::invalid_value(de::Unexpected::Unsigned(v), &self))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<KSpec, E> {
                match u64::try_from(v) {
                    Ok(v) => self.visit_u64(v),
                    Err(_) => Err(E::invalid_value(de::Unexpected::Signed(v), &self)),
                }
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<KSpec, E> {
                match v {
                    "auto" => Ok(KSpec::Auto),
                    _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
                }
            }
        }

        deserializer.deserialize_any(KVisitor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Greedy order (exact fallback on small layers), overlapped streams.
    Greedy,
    /// Index order, overlapped streams.
    Naive,
    /// Index order, one stream at a time.
    Serial,
    /// Exact search per layer, overlapped streams.
    Exact,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::Greedy => "greedy",
            Policy::Naive => "naive",
            Policy::Serial => "serial",
            Policy::Exact => "exact",
        }
    }

    pub fn options(self, scenario: &Scenario) -> ModelOptions {
        let (policy, mode) = match self {
            Policy::Greedy => (OrderPolicy::PerLayerGreedy, Mode::Overlapped),
            Policy::Naive => (OrderPolicy::NaiveOrder, Mode::Overlapped),
            Policy::Serial => (OrderPolicy::NaiveOrder, Mode::Serial),
            Policy::Exact => (OrderPolicy::Exact, Mode::Overlapped),
        };
        ModelOptions {
            policy,
            mode,
            continuous_load_stream: scenario.continuous_load_stream,
            skip_empty_experts: scenario.skip_empty_experts,
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses a scenario file. Errors name the offending field and position.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_scenario(&text).map_err(|e| match e {
        CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            CliError::Config(e.inner().to_string())
        } else {
            CliError::Config(format!("field `{path}`: {}", e.inner()))
        }
    })
}

/// Looks a geometry preset up in [`PRESETS_ENV`] first, then among the
/// built-in presets.
pub fn find_preset(name: &str) -> Result<PartialGeometry> {
    if let Some(dir) = std::env::var_os(PRESETS_ENV) {
        let path = Path::new(&dir).join(format!("{name}.json"));
        if path.is_file() {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            let preset: PartialGeometry = serde_path_to_error::deserialize(de).map_err(|e| {
                CliError::Config(format!(
                    "{}: field `{}`: {}",
                    path.display(),
                    e.path(),
                    e.inner()
                ))
            })?;
            if preset.preset.is_some() {
                return Err(CliError::Config(format!(
                    "{}: presets cannot refer to other presets",
                    path.display()
                )));
            }
            return Ok(preset);
        }
    }
    builtin_preset(name).ok_or_else(|| {
        CliError::Config(format!(
            "geometry.preset: unknown preset `{name}` (built-in: {}; more via ${PRESETS_ENV})",
            moe_offload::model_config::BUILTIN_PRESETS.join(", ")
        ))
    })
}

/// Expands the preset (if any) under the explicit fields and validates.
pub fn resolve_geometry(partial: &PartialGeometry) -> Result<ModelGeometry> {
    let merged = match &partial.preset {
        Some(name) => partial.clone().or(&find_preset(name)?),
        None => partial.clone(),
    };
    let geometry = merged.resolve()?;
    for warning in geometry.validate()? {
        log::warn!("{warning}");
    }
    Ok(geometry)
}

/// Everything a run needs, derived from a scenario.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Fully explicit copy of the input scenario.
    pub scenario: Scenario,
    pub seed: u64,
    pub k: usize,
    pub capacity: Option<Capacity>,
    pub geometry: Option<ModelGeometry>,
    /// Empty when costs were given directly.
    pub workloads: Vec<ExpertWorkload>,
    pub layers: Vec<CostVector>,
}

/// Seed for layer `layer` derived from the scenario seed.
pub fn layer_seed(seed: u64, layer: usize) -> u64 {
    seeded_rng(seed, layer as u64).random()
}

/// Validates `scenario` and derives per-layer costs. Relative paths are
/// resolved against `base_dir`. `seed_override` wins over the file's seed;
/// with neither, a fresh seed is drawn and recorded in the resolved copy.
pub fn prepare(
    scenario: &Scenario,
    base_dir: &Path,
    seed_override: Option<u64>,
) -> Result<Prepared> {
    if scenario.name.trim().is_empty() {
        return Err(CliError::Config("field `name` must not be empty".into()));
    }
    if scenario.layers == 0 {
        return Err(CliError::Config("field `layers` must be >= 1".into()));
    }
    if scenario.policies.is_empty() {
        return Err(CliError::Config(
            "field `policies` must not be empty".into(),
        ));
    }
    let seed = seed_override
        .or(scenario.seed)
        .unwrap_or_else(|| rand::rng().random());
    log::info!("scenario {}: seed {seed}", scenario.name);

    let mut resolved = scenario.clone();
    resolved.seed = Some(seed);
    let mut policies = Vec::new();
    for p in &scenario.policies {
        if !policies.contains(p) {
            policies.push(*p);
        }
    }
    resolved.policies = policies;

    if let Some(costs) = &scenario.costs {
        if scenario.geometry.is_some() || scenario.hardware.is_some() || scenario.workload.is_some()
        {
            return Err(CliError::Config(
                "field `costs` cannot be combined with `geometry`, `hardware` or `workload`".into(),
            ));
        }
        let k = scenario.k.fixed().ok_or_else(|| {
            CliError::Config(
                "field `k`: \"auto\" needs geometry and hardware; give a number".into(),
            )
        })?;
        let base = CostVector::new(costs.alphas.clone(), costs.beta)
            .map_err(|e| CliError::Config(format!("field `costs`: {e}")))?;
        return Ok(Prepared {
            scenario: resolved,
            seed,
            k,
            capacity: None,
            geometry: None,
            workloads: Vec::new(),
            layers: repeat_layers(&base, scenario.layers),
        });
    }

    let missing =
        |field: &str| CliError::Config(format!("field `{field}` is required (or give `costs`)"));
    let geometry = resolve_geometry(
        scenario
            .geometry
            .as_ref()
            .ok_or_else(|| missing("geometry"))?,
    )?;
    let hardware = scenario
        .hardware
        .clone()
        .ok_or_else(|| missing("hardware"))?;
    hardware.validate()?;
    let spec = scenario
        .workload
        .as_ref()
        .ok_or_else(|| missing("workload"))?;

    let capacity = resident_capacity(&geometry, &hardware, scenario.k.fixed())?;
    if scenario.layers > geometry.n_layers as usize {
        log::warn!(
            "simulating {} layers but the geometry has {}",
            scenario.layers,
            geometry.n_layers
        );
    }

    let spec = resolve_workload(spec, base_dir, geometry.n_experts_per_layer, seed)?;
    let workloads = (0..scenario.layers)
        .map(|l| layer_workload(&spec, l, seed, geometry.n_experts_per_layer))
        .collect::<Result<Vec<_>>>()?;
    let layers = workloads
        .iter()
        .map(|w| compute_costs(w, &geometry, &hardware))
        .collect::<moe_offload::Result<Vec<_>>>()?;

    resolved.geometry = Some(PartialGeometry::from(&geometry));
    resolved.workload = Some(spec);
    resolved.k = KSpec::Fixed(capacity.k);
    Ok(Prepared {
        scenario: resolved,
        seed,
        k: capacity.k,
        capacity: Some(capacity),
        geometry: Some(geometry),
        workloads,
        layers,
    })
}

/// Inlines external inputs and fills seeded defaults.
fn resolve_workload(
    spec: &WorkloadSpec,
    base_dir: &Path,
    n_experts: usize,
    seed: u64,
) -> Result<WorkloadSpec> {
    Ok(match spec {
        WorkloadSpec::Csv { path } => {
            let path = base_dir.join(path);
            let file = std::fs::File::open(&path).map_err(|e| {
                CliError::Config(format!(
                    "workload.path: cannot open {}: {e}",
                    path.display()
                ))
            })?;
            let counts = read_workload_csv(file, n_experts)
                .map_err(|e| CliError::Config(format!("workload.path: {}: {e}", path.display())))?;
            WorkloadSpec::Explicit { counts }
        }
        WorkloadSpec::Lsh {
            total_tokens,
            hidden_dim,
            n_hash_bits,
            projection_seed,
        } => WorkloadSpec::Lsh {
            total_tokens: *total_tokens,
            hidden_dim: *hidden_dim,
            n_hash_bits: *n_hash_bits,
            projection_seed: Some(projection_seed.unwrap_or(seed)),
        },
        other => other.clone(),
    })
}

fn layer_workload(
    spec: &WorkloadSpec,
    layer: usize,
    seed: u64,
    n_experts: usize,
) -> Result<ExpertWorkload> {
    let seed = layer_seed(seed, layer);
    let workload = match spec {
        WorkloadSpec::Balanced { total_tokens } => {
            synthetic_workload(&WorkloadKind::Balanced, *total_tokens, n_experts, seed)?
        }
        WorkloadSpec::Uniform { total_tokens } => {
            synthetic_workload(&WorkloadKind::Uniform, *total_tokens, n_experts, seed)?
        }
        WorkloadSpec::Zipf { s, total_tokens } => synthetic_workload(
            &WorkloadKind::Zipf { s: *s },
            *total_tokens,
            n_experts,
            seed,
        )?,
        WorkloadSpec::Explicit { counts } => {
            let total = counts.iter().sum();
            synthetic_workload(
                &WorkloadKind::Explicit {
                    counts: counts.clone(),
                },
                total,
                n_experts,
                seed,
            )
            .map_err(|e| CliError::Config(format!("workload.counts: {e}")))?
        }
        WorkloadSpec::Csv { .. } => unreachable!("csv workloads are inlined before use"),
        WorkloadSpec::Lsh {
            total_tokens,
            hidden_dim,
            n_hash_bits,
            projection_seed,
        } => {
            let model = GatingModel {
                projection_seed: layer_seed(projection_seed.expect("resolved"), layer),
                n_hash_bits: *n_hash_bits,
                hidden_dim: *hidden_dim,
            };
            let tokens = gaussian_tokens(seed, 0, *hidden_dim).take(*total_tokens as usize);
            route_tokens(&model, tokens, n_experts)?
        }
    };
    Ok(workload.with_layer(layer))
}
