//! Model geometry and hardware descriptions.
//!
//! FLOP convention: one multiply-add counts as 2 FLOPs. An expert is one
//! feed-forward block made of two projection matrices (`d_model x d_ff` and
//! `d_ff x d_model`); biases and layer norms are not counted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelGeometry {
    pub n_layers: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_heads: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_head: Option<u32>,
    pub d_model: u64,
    pub d_ff: u64,
    pub n_experts_per_layer: usize,
    pub bytes_per_param: u64,
}

impl ModelGeometry {
    /// Checks the hard invariants and returns soft warnings.
    ///
    /// A `d_model != n_heads * d_head` mismatch is only a warning since the
    /// cost model never looks at attention dimensions.
    pub fn validate(&self) -> Result<Vec<String>> {
        let positive = [
            ("n_layers", self.n_layers as u64),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_experts_per_layer", self.n_experts_per_layer as u64),
            ("bytes_per_param", self.bytes_per_param),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(Error::config(format!("geometry.{field} must be > 0")));
            }
        }
        for (field, value) in [("n_heads", self.n_heads), ("d_head", self.d_head)] {
            if value == Some(0) {
                return Err(Error::config(format!("geometry.{field} must be > 0")));
            }
        }

        let mut warnings = Vec::new();
        if let (Some(heads), Some(d_head)) = (self.n_heads, self.d_head) {
            let attn = heads as u64 * d_head as u64;
            if attn != self.d_model {
                let msg = format!(
                    "geometry: d_model ({}) != n_heads * d_head ({heads} * {d_head} = {attn})",
                    self.d_model
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
        Ok(warnings)
    }
}

/// Geometry with every field optional: the shape of presets and of the
/// `geometry` block in scenario files before resolution.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialGeometry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_layers: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_heads: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_head: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_model: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_ff: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_experts_per_layer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytes_per_param: Option<u64>,
}

impl PartialGeometry {
    /// Fills every unset field of `self` from `base`.
    pub fn or(self, base: &PartialGeometry) -> PartialGeometry {
        PartialGeometry {
            preset: self.preset.or_else(|| base.preset.clone()),
            n_layers: self.n_layers.or(base.n_layers),
            n_heads: self.n_heads.or(base.n_heads),
            d_head: self.d_head.or(base.d_head),
            d_model: self.d_model.or(base.d_model),
            d_ff: self.d_ff.or(base.d_ff),
            n_experts_per_layer: self.n_experts_per_layer.or(base.n_experts_per_layer),
            bytes_per_param: self.bytes_per_param.or(base.bytes_per_param),
        }
    }

    /// Requires every mandatory field. `bytes_per_param` has no default on
    /// purpose: presets leave it unset and the caller must choose.
    pub fn resolve(&self) -> Result<ModelGeometry> {
        fn need<T: Copy>(value: Option<T>, field: &str) -> Result<T> {
            value.ok_or_else(|| Error::config(format!("geometry.{field} is required")))
        }
        let geometry = ModelGeometry {
            n_layers: need(self.n_layers, "n_layers")?,
            n_heads: self.n_heads,
            d_head: self.d_head,
            d_model: need(self.d_model, "d_model")?,
            d_ff: need(self.d_ff, "d_ff")?,
            n_experts_per_layer: need(self.n_experts_per_layer, "n_experts_per_layer")?,
            bytes_per_param: need(self.bytes_per_param, "bytes_per_param")?,
        };
        geometry.validate()?;
        Ok(geometry)
    }
}

impl From<&ModelGeometry> for PartialGeometry {
    fn from(g: &ModelGeometry) -> Self {
        PartialGeometry {
            preset: None,
            n_layers: Some(g.n_layers),
            n_heads: g.n_heads,
            d_head: g.d_head,
            d_model: Some(g.d_model),
            d_ff: Some(g.d_ff),
            n_experts_per_layer: Some(g.n_experts_per_layer),
            bytes_per_param: Some(g.bytes_per_param),
        }
    }
}

/// Built-in geometry presets. Neither sets `bytes_per_param`.
///
/// * `cpm2`: 24 layers, 64 heads of 64, d_model 4096, d_ff 10240, 32 experts.
/// * `cpm-small`: 12 layers, 12 heads of 64, d_model 768, d_ff 3072, 32 experts.
pub fn builtin_preset(name: &str) -> Option<PartialGeometry> {
    let (n_layers, n_heads, d_head, d_ff, d_model) = match name {
        "cpm2" => (24, 64, 64, 10_240, 4_096),
        "cpm-small" => (12, 12, 64, 3_072, 768),
        _ => return None,
    };
    Some(PartialGeometry {
        preset: None,
        n_layers: Some(n_layers),
        n_heads: Some(n_heads),
        d_head: Some(d_head),
        d_model: Some(d_model),
        d_ff: Some(d_ff),
        n_experts_per_layer: Some(32),
        bytes_per_param: None,
    })
}

pub const BUILTIN_PRESETS: &[&str] = &["cpm2", "cpm-small"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Peak device throughput in FLOP/s.
    pub peak_flops: f64,
    /// Host-to-device copy bandwidth in bytes/s.
    pub h2d_bandwidth: f64,
    /// Device memory in bytes.
    pub device_memory: u64,
    /// Bytes held by non-MoE parameters and activations.
    pub reserved_memory: u64,
    /// Fixed cost added to every load and compute event, in seconds.
    #[serde(default)]
    pub event_overhead_s: f64,
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_flops.is_finite() && self.peak_flops > 0.0) {
            return Err(Error::config(
                "hardware.peak_flops must be a finite value > 0",
            ));
        }
        if !(self.h2d_bandwidth.is_finite() && self.h2d_bandwidth > 0.0) {
            return Err(Error::config(
                "hardware.h2d_bandwidth must be a finite value > 0",
            ));
        }
        if self.device_memory <= self.reserved_memory {
            return Err(Error::config(format!(
                "hardware.device_memory ({}) must exceed hardware.reserved_memory ({})",
                self.device_memory, self.reserved_memory
            )));
        }
        if !(self.event_overhead_s.is_finite() && self.event_overhead_s >= 0.0) {
            return Err(Error::config("hardware.event_overhead_s must be >= 0"));
        }
        Ok(())
    }

    pub fn free_memory(&self) -> u64 {
        self.device_memory.saturating_sub(self.reserved_memory)
    }
}

/// Bytes of one expert: `2 * d_model * d_ff * bytes_per_param`.
pub fn expert_param_bytes(geometry: &ModelGeometry) -> u64 {
    2 * geometry.d_model * geometry.d_ff * geometry.bytes_per_param
}

/// FLOPs of one expert over `n_tokens` tokens: `4 * n_tokens * d_model * d_ff`.
pub fn expert_flops(geometry: &ModelGeometry, n_tokens: u64) -> u128 {
    4 * n_tokens as u128 * geometry.d_model as u128 * geometry.d_ff as u128
}
