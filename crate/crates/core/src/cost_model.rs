//! Expert compute and load times.
//!
//! `alpha[i] = flops(tokens[i]) / peak_flops` and
//! `beta = expert_bytes / h2d_bandwidth`. Costs are idealised: the only
//! non-ratio term is the optional per-event overhead of the hardware profile,
//! which is added to `beta` and to the `alpha` of every expert that has at
//! least one token (an expert without tokens launches no kernel).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::ExpertWorkload;
use crate::model_config::{expert_flops, expert_param_bytes, HardwareProfile, ModelGeometry};

/// Which inputs a [`CostVector`] came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Derivation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hardware: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workload: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostVector {
    /// Compute time of each expert, seconds.
    pub alphas: Vec<f64>,
    /// Load time of any one expert, seconds.
    pub beta: f64,
    #[serde(default)]
    pub derivation: Derivation,
}

impl CostVector {
    pub fn new(alphas: Vec<f64>, beta: f64) -> Result<Self> {
        let costs = CostVector {
            alphas,
            beta,
            derivation: Derivation::default(),
        };
        costs.validate()?;
        Ok(costs)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::config(format!(
                "beta must be finite and > 0, got {}",
                self.beta
            )));
        }
        if self.alphas.is_empty() {
            return Err(Error::config("cost vector needs at least one expert"));
        }
        if let Some((i, a)) = self
            .alphas
            .iter()
            .enumerate()
            .find(|(_, a)| !(a.is_finite() && **a >= 0.0))
        {
            return Err(Error::config(format!(
                "alphas[{i}] must be finite and >= 0, got {a}"
            )));
        }
        Ok(())
    }

    /// Number of experts, `T`.
    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn total_alpha(&self) -> f64 {
        self.alphas.iter().sum()
    }

    /// Drops zero-alpha experts. Returns the reduced costs and, for each kept
    /// position, the original expert id. `None` if every alpha is zero.
    pub fn without_empty(&self) -> Option<(CostVector, Vec<usize>)> {
        let ids: Vec<usize> = (0..self.len()).filter(|&i| self.alphas[i] > 0.0).collect();
        if ids.is_empty() {
            return None;
        }
        let costs = CostVector {
            alphas: ids.iter().map(|&i| self.alphas[i]).collect(),
            beta: self.beta,
            derivation: self.derivation.clone(),
        };
        Some((costs, ids))
    }
}

pub fn compute_costs(
    workload: &ExpertWorkload,
    geometry: &ModelGeometry,
    hw: &HardwareProfile,
) -> Result<CostVector> {
    hw.validate()?;
    workload.validate(geometry.n_experts_per_layer)?;

    let alphas = workload
        .token_counts
        .iter()
        .map(|&tokens| {
            if tokens == 0 {
                0.0
            } else {
                expert_flops(geometry, tokens) as f64 / hw.peak_flops + hw.event_overhead_s
            }
        })
        .collect();
    let beta = expert_param_bytes(geometry) as f64 / hw.h2d_bandwidth + hw.event_overhead_s;

    Ok(CostVector {
        alphas,
        beta,
        derivation: Derivation {
            geometry: Some(format!(
                "d_model={},d_ff={},bytes_per_param={}",
                geometry.d_model, geometry.d_ff, geometry.bytes_per_param
            )),
            hardware: Some(hw.name.clone().unwrap_or_else(|| {
                format!(
                    "peak_flops={:e},h2d_bandwidth={:e}",
                    hw.peak_flops, hw.h2d_bandwidth
                )
            })),
            workload: Some(format!(
                "layer={},total_tokens={}",
                workload.layer_id, workload.total_tokens
            )),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capacity {
    /// Effective K.
    pub k: usize,
    /// What the memory formula allows.
    pub formula_k: usize,
    /// An explicit request above `formula_k` was cut down.
    pub clamped: bool,
}

/// `K = floor((device_memory - reserved_memory) / expert_bytes)`, optionally
/// lowered by an explicit request. Requests above the formula are clamped.
pub fn resident_capacity(
    geometry: &ModelGeometry,
    hw: &HardwareProfile,
    explicit_k: Option<usize>,
) -> Result<Capacity> {
    if hw.device_memory <= hw.reserved_memory {
        return Err(Error::config(format!(
            "hardware.device_memory ({}) must exceed hardware.reserved_memory ({})",
            hw.device_memory, hw.reserved_memory
        )));
    }
    let expert_bytes = expert_param_bytes(geometry);
    let free_bytes = hw.free_memory();
    let formula_k = usize::try_from(free_bytes / expert_bytes).unwrap_or(usize::MAX);
    if formula_k < 1 {
        return Err(Error::Capacity {
            expert_bytes,
            free_bytes,
        });
    }
    match explicit_k {
        None => Ok(Capacity {
            k: formula_k,
            formula_k,
            clamped: false,
        }),
        Some(0) => Err(Error::config("k must be >= 1")),
        Some(k) if k > formula_k => {
            log::warn!("requested k = {k} exceeds device capacity {formula_k}; clamping");
            Ok(Capacity {
                k: formula_k,
                formula_k,
                clamped: true,
            })
        }
        Some(k) => Ok(Capacity {
            k,
            formula_k,
            clamped: false,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cpm2() -> ModelGeometry {
        ModelGeometry {
            n_layers: 24,
            n_heads: Some(64),
            d_head: Some(64),
            d_model: 4096,
            d_ff: 10_240,
            n_experts_per_layer: 4,
            bytes_per_param: 2,
        }
    }

    fn hw(free_bytes: u64) -> HardwareProfile {
        HardwareProfile {
            name: None,
            peak_flops: 1.0e14,
            h2d_bandwidth: 16.0e9,
            device_memory: free_bytes + 1024,
            reserved_memory: 1024,
            event_overhead_s: 0.0,
        }
    }

    #[test]
    fn empty_workload_has_zero_alphas() {
        let costs =
            compute_costs(&ExpertWorkload::new(0, vec![0; 4]), &cpm2(), &hw(1 << 34)).unwrap();
        assert!(costs.alphas.iter().all(|&a| a == 0.0));
        assert!(costs.beta > 0.0);
    }

    #[test]
    fn beta_at_16_gb_per_s() {
        let costs =
            compute_costs(&ExpertWorkload::new(0, vec![1; 4]), &cpm2(), &hw(1 << 34)).unwrap();
        let expected = 167_772_160.0 / 16.0e9;
        assert!(((costs.beta - expected) / expected).abs() < 1e-12);
        assert!((costs.beta - 0.010486).abs() < 5e-7);
    }

    #[test]
    fn alphas_scale_with_tokens() {
        let g = cpm2();
        let h = hw(1 << 34);
        let a = compute_costs(&ExpertWorkload::new(0, vec![3, 0, 7, 100]), &g, &h).unwrap();
        let b = compute_costs(&ExpertWorkload::new(0, vec![6, 0, 14, 200]), &g, &h).unwrap();
        for (x, y) in a.alphas.iter().zip(&b.alphas) {
            assert_eq!(2.0 * x, *y);
        }
        assert_eq!(a.beta, b.beta);
    }

    #[test]
    fn overhead_skips_idle_experts() {
        let mut h = hw(1 << 34);
        h.event_overhead_s = 1e-5;
        let costs = compute_costs(&ExpertWorkload::new(0, vec![0, 1, 0, 0]), &cpm2(), &h).unwrap();
        assert_eq!(costs.alphas[0], 0.0);
        assert!(costs.alphas[1] > 1e-5);
        assert!(costs.beta > 167_772_160.0 / 16.0e9);
    }

    #[test]
    fn mismatched_expert_count() {
        assert!(compute_costs(&ExpertWorkload::new(0, vec![1; 3]), &cpm2(), &hw(1 << 34)).is_err());
    }

    #[test]
    fn zero_bandwidth_is_config_error() {
        let mut h = hw(1 << 34);
        h.h2d_bandwidth = 0.0;
        let err = compute_costs(&ExpertWorkload::new(0, vec![1; 4]), &cpm2(), &h).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        h.h2d_bandwidth = 1.0;
        h.peak_flops = 0.0;
        assert!(matches!(
            compute_costs(&ExpertWorkload::new(0, vec![1; 4]), &cpm2(), &h),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn capacity_floor() {
        let g = cpm2();
        let bytes = expert_param_bytes(&g);
        assert_eq!(resident_capacity(&g, &hw(3 * bytes), None).unwrap().k, 3);
        assert_eq!(
            resident_capacity(&g, &hw(3 * bytes + 9 * bytes / 10), None)
                .unwrap()
                .k,
            3
        );

        let device = HardwareProfile {
            device_memory: 16 << 30,
            reserved_memory: 8 << 30,
            ..hw(0)
        };
        assert_eq!(resident_capacity(&g, &device, None).unwrap().k, 51);
    }

    #[test]
    fn capacity_errors_and_clamping() {
        let g = cpm2();
        let bytes = expert_param_bytes(&g);
        assert!(matches!(
            resident_capacity(&g, &hw(bytes - 1), None),
            Err(Error::Capacity { .. })
        ));
        let c = resident_capacity(&g, &hw(4 * bytes), Some(9)).unwrap();
        assert_eq!((c.k, c.clamped), (4, true));
        let c = resident_capacity(&g, &hw(4 * bytes), Some(2)).unwrap();
        assert_eq!((c.k, c.clamped), (2, false));
        assert!(resident_capacity(&g, &hw(4 * bytes), Some(0)).is_err());
    }

    #[test]
    fn cost_vector_validation() {
        assert!(CostVector::new(vec![1.0], 0.0).is_err());
        assert!(CostVector::new(vec![], 1.0).is_err());
        assert!(CostVector::new(vec![-1.0], 1.0).is_err());
        assert!(CostVector::new(vec![f64::NAN], 1.0).is_err());
        let c = CostVector::new(vec![0.0, 2.0, 0.0, 1.0], 1.0).unwrap();
        let (reduced, ids) = c.without_empty().unwrap();
        assert_eq!(reduced.alphas, vec![2.0, 1.0]);
        assert_eq!(ids, vec![1, 3]);
        assert!(CostVector::new(vec![0.0], 1.0)
            .unwrap()
            .without_empty()
            .is_none());
    }
}
