//! Branch integration and the transformer density predictor.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LmrlError, Result};
use crate::tensorcore::{
    apply_layer_norm, apply_linear, heads_for, register_attention, register_layer_norm,
    register_linear, self_attention, AttentionWeights, Init, ParamStore, Tape, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    RflOnly,
    MprOnly,
    WeightedAvg,
    Concat,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::RflOnly,
        FusionMode::MprOnly,
        FusionMode::WeightedAvg,
        FusionMode::Concat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::RflOnly => "rfl_only",
            FusionMode::MprOnly => "mpr_only",
            FusionMode::WeightedAvg => "weighted_avg",
            FusionMode::Concat => "concat",
        }
    }
}

impl FromStr for FusionMode {
    type Err = LmrlError;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| LmrlError::Config(format!("unknown fusion mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub fused_dim: usize,
    pub predictor_layers: usize,
    pub predictor_heads: usize,
    /// Feed-forward width as a multiple of `fused_dim`.
    pub ff_mult: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mode: FusionMode::WeightedAvg,
            fused_dim: 32,
            predictor_layers: 1,
            predictor_heads: 4,
            ff_mult: 4,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fused_dim == 0 || !self.fused_dim.is_multiple_of(2) {
            return Err(LmrlError::Config(format!(
                "fused_dim must be even and positive, got {}",
                self.fused_dim
            )));
        }
        if self.predictor_heads == 0 || self.ff_mult == 0 {
            return Err(LmrlError::Config(
                "predictor heads and ff_mult must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-frame density; `count` is always the sum of `values`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    values: Vec<f64>,
    count: f64,
}

impl DensityMap {
    pub fn new(values: Vec<f64>) -> Self {
        let count = values.iter().sum();
        DensityMap { values, count }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn count(&self) -> f64 {
        self.count
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn count_from_density(d: &DensityMap) -> f64 {
    d.values.iter().sum()
}

pub fn register_params(
    store: &mut ParamStore,
    cfg: &FusionConfig,
    k: usize,
    rfl_channels: usize,
) -> Result<()> {
    cfg.validate()?;
    let c = cfg.fused_dim;
    match cfg.mode {
        FusionMode::Concat => {
            register_linear(store, "fusion.mpr_proj", k, c / 2)?;
            register_linear(store, "fusion.rfl_proj", rfl_channels, c / 2)?;
        }
        FusionMode::WeightedAvg => {
            register_linear(store, "fusion.mpr_proj", k, c)?;
            register_linear(store, "fusion.rfl_proj", rfl_channels, c)?;
            store.register("fusion.sigma_mpr", &[1], Init::Constant(0.5))?;
            store.register("fusion.sigma_rfl", &[1], Init::Constant(0.5))?;
        }
        FusionMode::MprOnly => register_linear(store, "fusion.mpr_proj", k, c)?,
        FusionMode::RflOnly => register_linear(store, "fusion.rfl_proj", rfl_channels, c)?,
    }
    register_layer_norm(store, "fusion.norm", c)?;
    for l in 0..cfg.predictor_layers {
        let prefix = format!("pred.layer{l}");
        register_attention(store, &format!("{prefix}.attn"), c)?;
        register_layer_norm(store, &format!("{prefix}.norm1"), c)?;
        register_linear(store, &format!("{prefix}.ff1"), c, cfg.ff_mult * c)?;
        register_linear(store, &format!("{prefix}.ff2"), cfg.ff_mult * c, c)?;
        register_layer_norm(store, &format!("{prefix}.norm2"), c)?;
    }
    register_linear(store, "pred.head", c, 1)
}

/// Combines `P` (`[N×K]`) and TCN features (`[N×channels]`) into `[N×C']`.
pub fn integrate<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    mpr_out: &Var<'t>,
    rfl_out: &Var<'t>,
    cfg: &FusionConfig,
) -> Result<Var<'t>> {
    let mixed = match cfg.mode {
        FusionMode::Concat => {
            let a = apply_linear(tape, store, "fusion.mpr_proj", mpr_out)?;
            let b = apply_linear(tape, store, "fusion.rfl_proj", rfl_out)?;
            tape.concat_cols(&[a, b])?
        }
        FusionMode::WeightedAvg => {
            let a = apply_linear(tape, store, "fusion.mpr_proj", mpr_out)?;
            let b = apply_linear(tape, store, "fusion.rfl_proj", rfl_out)?;
            let sa = tape.param(store, "fusion.sigma_mpr")?;
            let sb = tape.param(store, "fusion.sigma_rfl")?;
            a.mul_scalar_var(&sa)?.add(&b.mul_scalar_var(&sb)?)?
        }
        FusionMode::MprOnly => apply_linear(tape, store, "fusion.mpr_proj", mpr_out)?,
        FusionMode::RflOnly => apply_linear(tape, store, "fusion.rfl_proj", rfl_out)?,
    };
    Ok(apply_layer_norm(tape, store, "fusion.norm", &mixed)?.relu())
}

/// Post-norm transformer encoder layers followed by a per-frame linear head.
/// Returns the `[N×1]` density.
pub fn predict_density<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    fused: &Var<'t>,
    cfg: &FusionConfig,
) -> Result<Var<'t>> {
    let mut h = *fused;
    let heads = heads_for(cfg.fused_dim, cfg.predictor_heads);
    for l in 0..cfg.predictor_layers {
        let prefix = format!("pred.layer{l}");
        let w = AttentionWeights::from_store(tape, store, &format!("{prefix}.attn"))?;
        let attended = self_attention(&h, &w, heads)?.output;
        h = apply_layer_norm(tape, store, &format!("{prefix}.norm1"), &h.add(&attended)?)?;
        let ff = apply_linear(tape, store, &format!("{prefix}.ff1"), &h)?.relu();
        let ff = apply_linear(tape, store, &format!("{prefix}.ff2"), &ff)?;
        h = apply_layer_norm(tape, store, &format!("{prefix}.norm2"), &h.add(&ff)?)?;
    }
    apply_linear(tape, store, "pred.head", &h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_count_is_sum() {
        assert_eq!(count_from_density(&DensityMap::new(vec![0.0; 5])), 0.0);
        let d = DensityMap::new(vec![0.1; 30]);
        assert!((d.count() - 3.0).abs() < 1e-12);
        assert_eq!(d.count(), count_from_density(&d));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("concat".parse::<FusionMode>().unwrap(), FusionMode::Concat);
        assert!(matches!(
            "sum".parse::<FusionMode>(),
            Err(LmrlError::Config(_))
        ));
        let json = serde_json::to_string(&FusionMode::WeightedAvg).unwrap();
        assert_eq!(json, "\"weighted_avg\"");
    }

    #[test]
    fn odd_fused_dim_rejected() {
        let cfg = FusionConfig {
            fused_dim: 7,
            ..FusionConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
