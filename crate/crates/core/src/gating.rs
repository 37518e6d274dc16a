//! Token-to-expert workloads.
//!
//! Routing follows an untrained random-projection hash: a fixed Gaussian
//! matrix projects each hidden state onto `n_hash_bits` directions, the sign
//! bits form an integer code and the expert is `code mod n_experts`. When
//! `n_experts` is not a power of two the modulo folds some codes together,
//! so low expert ids receive slightly more hash buckets than high ones.

use std::io::Read;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier of the pseudo-random stream behind every seeded draw in this
/// crate. Written into trace headers so a run can be replayed elsewhere.
pub const PRNG_ALGORITHM: &str = "chacha20/rand_chacha-0.9+StandardNormal/rand_distr-0.5";

/// Deterministic generator for `(seed, stream)`. Different streams of the same
/// seed are independent, which is how per-layer draws are separated.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertWorkload {
    pub layer_id: usize,
    pub token_counts: Vec<u64>,
    pub total_tokens: u64,
}

impl ExpertWorkload {
    pub fn new(layer_id: usize, token_counts: Vec<u64>) -> Self {
        let total_tokens = token_counts.iter().sum();
        ExpertWorkload {
            layer_id,
            token_counts,
            total_tokens,
        }
    }

    pub fn with_layer(mut self, layer_id: usize) -> Self {
        self.layer_id = layer_id;
        self
    }

    pub fn n_experts(&self) -> usize {
        self.token_counts.len()
    }

    pub fn validate(&self, n_experts: usize) -> Result<()> {
        if self.token_counts.len() != n_experts {
            return Err(Error::input(format!(
                "workload for layer {} has {} experts, expected {n_experts}",
                self.layer_id,
                self.token_counts.len()
            )));
        }
        let sum: u64 = self.token_counts.iter().sum();
        if sum != self.total_tokens {
            return Err(Error::input(format!(
                "workload for layer {}: counts sum to {sum}, total_tokens is {}",
                self.layer_id, self.total_tokens
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatingModel {
    pub projection_seed: u64,
    pub n_hash_bits: u32,
    pub hidden_dim: usize,
}

impl GatingModel {
    /// Builds the projection for routing to `n_experts` experts.
    pub fn router(&self, n_experts: usize) -> Result<Router> {
        if n_experts == 0 {
            return Err(Error::input("n_experts must be >= 1"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::config("gating.hidden_dim must be > 0"));
        }
        if self.n_hash_bits == 0 || self.n_hash_bits > 32 {
            return Err(Error::config("gating.n_hash_bits must be in 1..=32"));
        }
        if (1u64 << self.n_hash_bits) < n_experts as u64 {
            return Err(Error::config(format!(
                "gating.n_hash_bits = {} gives {} codes, fewer than {n_experts} experts",
                self.n_hash_bits,
                1u64 << self.n_hash_bits
            )));
        }
        let mut rng = seeded_rng(self.projection_seed, 0);
        let bits = self.n_hash_bits as usize;
        // Stored column-major: one contiguous hyperplane normal per hash bit.
        let planes = (0..bits * self.hidden_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Router {
            planes,
            hidden_dim: self.hidden_dim,
            n_hash_bits: bits,
            n_experts,
        })
    }
}

/// A materialised gating projection.
#[derive(Debug, Clone)]
pub struct Router {
    planes: Vec<f64>,
    hidden_dim: usize,
    n_hash_bits: usize,
    n_experts: usize,
}

impl Router {
    /// Sign-bit code of `token`; bit `b` is set when the projection onto
    /// plane `b` is non-negative.
    pub fn hash(&self, token: &[f64]) -> Result<u64> {
        if token.len() != self.hidden_dim {
            return Err(Error::input(format!(
                "hidden state has length {}, gating expects {}",
                token.len(),
                self.hidden_dim
            )));
        }
        let code = self.planes.chunks_exact(self.hidden_dim).enumerate().fold(
            0u64,
            |code, (bit, plane)| {
                let dot: f64 = plane.iter().zip(token).map(|(w, x)| w * x).sum();
                if dot >= 0.0 {
                    code | (1 << bit)
                } else {
                    code
                }
            },
        );
        Ok(code)
    }

    pub fn assign(&self, token: &[f64]) -> Result<usize> {
        Ok((self.hash(token)? % self.n_experts as u64) as usize)
    }

    pub fn n_hash_bits(&self) -> usize {
        self.n_hash_bits
    }
}

/// Routes every token to exactly one expert and counts tokens per expert.
pub fn route_tokens<I, T>(
    model: &GatingModel,
    tokens: I,
    n_experts: usize,
) -> Result<ExpertWorkload>
where
    I: IntoIterator<Item = T>,
    T: AsRef<[f64]>,
{
    let router = model.router(n_experts)?;
    let mut counts = vec![0u64; n_experts];
    for token in tokens {
        counts[router.assign(token.as_ref())?] += 1;
    }
    Ok(ExpertWorkload::new(0, counts))
}

/// Endless stream of i.i.d. standard-normal hidden states.
pub struct GaussianTokens {
    rng: ChaCha20Rng,
    hidden_dim: usize,
}

pub fn gaussian_tokens(seed: u64, stream: u64, hidden_dim: usize) -> GaussianTokens {
    GaussianTokens {
        rng: seeded_rng(seed, stream),
        hidden_dim,
    }
}

impl Iterator for GaussianTokens {
    type Item = Vec<f64>;

    fn next(&mut self) -> Option<Vec<f64>> {
        Some(
            (0..self.hidden_dim)
                .map(|_| self.rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )
    }
}

/// Parametric token distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum WorkloadKind {
    /// Every token picks an expert uniformly at random.
    Uniform,
    /// Every token picks expert `i` with probability proportional to `(i + 1)^-s`.
    Zipf { s: f64 },
    /// Equal shares, remainder going to the lowest expert ids.
    Balanced,
    /// Fixed counts.
    Explicit { counts: Vec<u64> },
}

pub fn synthetic_workload(
    kind: &WorkloadKind,
    total_tokens: u64,
    n_experts: usize,
    seed: u64,
) -> Result<ExpertWorkload> {
    if n_experts == 0 {
        return Err(Error::config("n_experts must be >= 1"));
    }
    let counts = match kind {
        WorkloadKind::Balanced => {
            let n = n_experts as u64;
            let (share, rem) = (total_tokens / n, total_tokens % n);
            (0..n).map(|i| share + u64::from(i < rem)).collect()
        }
        WorkloadKind::Uniform => {
            let mut rng = seeded_rng(seed, 0);
            let mut counts = vec![0u64; n_experts];
            for _ in 0..total_tokens {
                counts[rng.random_range(0..n_experts)] += 1;
            }
            counts
        }
        WorkloadKind::Zipf { s } => {
            if !(s.is_finite() && *s > 0.0) {
                return Err(Error::config(format!("zipf exponent must be > 0, got {s}")));
            }
            let weights = (1..=n_experts).map(|rank| (rank as f64).powf(-s));
            let dist = WeightedIndex::new(weights)
                .map_err(|e| Error::config(format!("zipf weights: {e}")))?;
            let mut rng = seeded_rng(seed, 0);
            let mut counts = vec![0u64; n_experts];
            for _ in 0..total_tokens {
                counts[dist.sample(&mut rng)] += 1;
            }
            counts
        }
        WorkloadKind::Explicit { counts } => {
            if counts.len() != n_experts {
                return Err(Error::config(format!(
                    "explicit workload has {} counts, expected {n_experts}",
                    counts.len()
                )));
            }
            let sum: u64 = counts.iter().sum();
            if sum != total_tokens {
                return Err(Error::config(format!(
                    "explicit counts sum to {sum}, total_tokens is {total_tokens}"
                )));
            }
            counts.clone()
        }
    };
    Ok(ExpertWorkload::new(0, counts))
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    expert_id: usize,
    token_count: u64,
}

/// Reads `expert_id,token_count` rows (with header). Every expert id in
/// `0..n_experts` must appear exactly once.
pub fn read_workload_csv<R: Read>(reader: R, n_experts: usize) -> Result<Vec<u64>> {
    let mut counts: Vec<Option<u64>> = vec![None; n_experts];
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    for (line, row) in rdr.deserialize::<CsvRow>().enumerate() {
        let row = row?;
        let slot = counts.get_mut(row.expert_id).ok_or_else(|| {
            Error::input(format!(
                "row {}: expert_id {} out of range 0..{n_experts}",
                line + 2,
                row.expert_id
            ))
        })?;
        if slot.replace(row.token_count).is_some() {
            return Err(Error::input(format!(
                "row {}: duplicate expert_id {}",
                line + 2,
                row.expert_id
            )));
        }
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(id, c)| c.ok_or_else(|| Error::input(format!("expert_id {id} missing from csv"))))
        .collect()
}
