//! Scheduling and simulation toolkit for Mixture-of-Experts inference with
//! expert parameters offloaded to host memory.
//!
//! The pipeline is:
//!
//! 1. [`model_config`] derives per-expert FLOPs and parameter bytes from the
//!    model geometry.
//! 2. [`gating`] produces per-expert token counts for a layer, either through
//!    random-projection hashing of hidden states or from a synthetic
//!    distribution.
//! 3. [`cost_model`] turns counts into per-expert compute times `alpha[i]`
//!    and the uniform load time `beta`.
//! 4. [`scheduler`] orders the experts so that every prefix of compute time
//!    stays inside the band `[m * beta, (m + K) * beta]`.
//! 5. [`simulator`] replays an order on a load stream and a compute stream
//!    and reports makespan, stalls and residency.
//!
//! [`verification`] holds the exhaustive oracles used to audit steps 4 and 5.

pub mod cost_model;
pub mod error;
pub mod gating;
pub mod model_config;
pub mod scheduler;
pub mod simulator;
pub mod verification;

pub use cost_model::{compute_costs, resident_capacity, Capacity, CostVector};
pub use error::{Error, Result};
pub use gating::{route_tokens, synthetic_workload, ExpertWorkload, GatingModel, WorkloadKind};
pub use model_config::{expert_flops, expert_param_bytes, HardwareProfile, ModelGeometry};
pub use scheduler::{
    check_constraints, diagnose, exact_order, greedy_order, plan, Diagnosis, Method, Schedule,
};
pub use simulator::{
    lower_bound, simulate, simulate_model, Mode, SimReport, Stream, TimelineEvent,
};
pub use verification::{enumerate_feasibility, replay_check, OracleResult, Violation};
