//! Repetition foreground localization: a dilated residual temporal
//! convolution stack with a per-frame foreground/background head.

use serde::{Deserialize, Serialize};

use crate::error::{LmrlError, Result};
use crate::tensorcore::{apply_linear, register_linear, Init, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RflConfig {
    pub n_blocks: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub dilation_base: usize,
}

impl Default for RflConfig {
    fn default() -> Self {
        RflConfig {
            n_blocks: 6,
            channels: 32,
            kernel_size: 3,
            dilation_base: 2,
        }
    }
}

impl RflConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.dilation_base == 0 {
            return Err(LmrlError::Config(
                "RFL channels and dilation base must be positive".into(),
            ));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(LmrlError::Config(format!(
                "RFL kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    pub fn dilation(&self, block: usize) -> usize {
        self.dilation_base.pow(block as u32)
    }

    /// `1 + (k − 1) · Σ dilation_i`.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel_size - 1) * (0..self.n_blocks).map(|i| self.dilation(i)).sum::<usize>()
    }

    /// Warning text when the receptive field dwarfs the sequence length.
    pub fn receptive_field_warning(&self, n: usize) -> Option<String> {
        let rf = self.receptive_field();
        (rf > 4 * n).then(|| {
            format!("RFL receptive field {rf} exceeds 4x the sequence length {n}; later blocks only see padding")
        })
    }
}

pub fn register_params(store: &mut ParamStore, cfg: &RflConfig, c: usize) -> Result<()> {
    cfg.validate()?;
    let ch = cfg.channels;
    store.register("rfl.entry.k", &[1, c, ch], Init::Uniform { fan_in: c })?;
    store.register("rfl.entry.b", &[ch], Init::Uniform { fan_in: c })?;
    for i in 0..cfg.n_blocks {
        let fan = cfg.kernel_size * ch;
        store.register(
            &format!("rfl.block{i}.dil.k"),
            &[cfg.kernel_size, ch, ch],
            Init::Uniform { fan_in: fan },
        )?;
        store.register(
            &format!("rfl.block{i}.dil.b"),
            &[ch],
            Init::Uniform { fan_in: fan },
        )?;
        store.register(
            &format!("rfl.block{i}.pw.k"),
            &[1, ch, ch],
            Init::Uniform { fan_in: ch },
        )?;
        store.register(
            &format!("rfl.block{i}.pw.b"),
            &[ch],
            Init::Uniform { fan_in: ch },
        )?;
    }
    register_linear(store, "rfl.head", ch, 2)
}

/// Entry 1×1 projection followed by `n_blocks` residual blocks of
/// dilated conv → ReLU → 1×1 conv; block `i` uses dilation `base^i`.
pub fn tcn_forward<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    x: &Var<'t>,
    cfg: &RflConfig,
) -> Result<Var<'t>> {
    cfg.validate()?;
    let p = |name: String| tape.param(store, &name);
    let mut h = x
        .conv1d(&p("rfl.entry.k".into())?, 1)?
        .add_bias(&p("rfl.entry.b".into())?)?;
    for i in 0..cfg.n_blocks {
        let inner = h
            .conv1d(&p(format!("rfl.block{i}.dil.k"))?, cfg.dilation(i))?
            .add_bias(&p(format!("rfl.block{i}.dil.b"))?)?
            .relu()
            .conv1d(&p(format!("rfl.block{i}.pw.k"))?, 1)?
            .add_bias(&p(format!("rfl.block{i}.pw.b"))?)?;
        h = h.add(&inner)?;
    }
    Ok(h)
}

/// Per-frame class scores; class 1 is foreground.
pub struct ForegroundPrediction<'t> {
    pub logits: Var<'t>,
    pub probs: Var<'t>,
    /// Argmax with ties going to background.
    pub hard_mask: Vec<bool>,
}

pub fn foreground_logits<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    features: &Var<'t>,
) -> Result<ForegroundPrediction<'t>> {
    let logits = apply_linear(tape, store, "rfl.head", features)?;
    let probs = logits.softmax_rows()?;
    let hard_mask = probs
        .value()
        .data()
        .chunks(2)
        .map(|row| row[1] > row[0])
        .collect();
    Ok(ForegroundPrediction {
        logits,
        probs,
        hard_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn receptive_field_closed_form() {
        for n in 1..7 {
            let cfg = RflConfig {
                n_blocks: n,
                ..RflConfig::default()
            };
            assert_eq!(cfg.receptive_field(), 1 + 2 * ((1 << n) - 1));
        }
        assert_eq!(RflConfig::default().receptive_field(), 127);
        assert!(RflConfig::default().receptive_field_warning(64).is_none());
        assert!(RflConfig::default().receptive_field_warning(16).is_some());
    }

    #[test]
    fn even_kernel_rejected() {
        let cfg = RflConfig {
            kernel_size: 4,
            ..RflConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
