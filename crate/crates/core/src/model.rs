//! The assembled counting network: MPR and RFL branches, fusion, and the
//! density predictor.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fusion::{self, DensityMap, FusionConfig};
use crate::mpr::{self, MprConfig, SimilarityStack};
use crate::rfl::{self, ForegroundPrediction, RflConfig};
use crate::tensorcore::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub mpr: MprConfig,
    pub rfl: RflConfig,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    /// Registers all parameters for sequences of `n` frames with `c`
    /// channels, in a fixed order.
    pub fn build(&self, n: usize, c: usize, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new(seed);
        mpr::register_params(&mut store, &self.mpr, n, c)?;
        rfl::register_params(&mut store, &self.rfl, c)?;
        fusion::register_params(
            &mut store,
            &self.fusion,
            self.mpr.scales(),
            self.rfl.channels,
        )?;
        Ok(store)
    }
}

/// Everything one forward pass produces.
pub struct Forward<'t> {
    pub mpr: SimilarityStack<'t>,
    pub rfl_features: Var<'t>,
    pub foreground: ForegroundPrediction<'t>,
    pub fused: Var<'t>,
    /// `[N×1]`
    pub density: Var<'t>,
}

impl Forward<'_> {
    pub fn density_map(&self) -> DensityMap {
        DensityMap::new(self.density.value().data().to_vec())
    }

    pub fn count(&self) -> f64 {
        self.density_map().count()
    }
}

/// Runs both branches, fuses them and predicts the density.
///
/// The RFL head is evaluated in every mode so localization can be measured
/// even when its features do not reach the counter.
pub fn forward<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    x: &Var<'t>,
    cfg: &ModelConfig,
) -> Result<Forward<'t>> {
    let stack = mpr::mpr_forward(tape, store, x, &cfg.mpr)?;
    let rfl_features = rfl::tcn_forward(tape, store, x, &cfg.rfl)?;
    let foreground = rfl::foreground_logits(tape, store, &rfl_features)?;
    let fused = fusion::integrate(tape, store, &stack.p, &rfl_features, &cfg.fusion)?;
    let density = fusion::predict_density(tape, store, &fused, &cfg.fusion)?;
    Ok(Forward {
        mpr: stack,
        rfl_features,
        foreground,
        fused,
        density,
    })
}

/// Inference-only result for one sequence.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub density: DensityMap,
    pub fg_prob: Vec<f64>,
    pub mask: Vec<bool>,
}

pub fn predict(store: &ParamStore, x: &Tensor, cfg: &ModelConfig) -> Result<Prediction> {
    let tape = Tape::new();
    let input = tape.constant(x.clone());
    let out = forward(&tape, store, &input, cfg)?;
    let probs = out.foreground.probs.value();
    Ok(Prediction {
        density: out.density_map(),
        fg_prob: probs.data().chunks(2).map(|r| r[1]).collect(),
        mask: out.foreground.hard_mask.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionMode;

    #[test]
    fn every_mode_builds_and_runs() {
        let x = Tensor::from_fn(&[16, 4], |i| ((i * 7) % 11) as f64 / 11.0 - 0.5);
        for mode in FusionMode::ALL {
            let mut cfg = ModelConfig::default();
            cfg.fusion.mode = mode;
            let store = cfg.build(16, 4, 3).unwrap();
            let p = predict(&store, &x, &cfg).unwrap();
            assert_eq!(p.density.len(), 16);
            assert_eq!(p.mask.len(), 16);
        }
    }
}
