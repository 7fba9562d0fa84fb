//! Parameterized building blocks assembled from tape operations.

use crate::error::{LmrlError, Result};

use super::params::{Init, ParamStore};
use super::tape::{Tape, Var};

/// `x · weight + bias`.
pub fn linear<'t>(x: &Var<'t>, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
    x.matmul(weight)?.add_bias(bias)
}

pub fn register_linear(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    store.register(
        &format!("{prefix}.w"),
        &[fan_in, fan_out],
        Init::Uniform { fan_in },
    )?;
    store.register(&format!("{prefix}.b"), &[fan_out], Init::Uniform { fan_in })
}

pub fn apply_linear<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    prefix: &str,
    x: &Var<'t>,
) -> Result<Var<'t>> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    linear(x, &w, &b)
}

pub fn register_layer_norm(store: &mut ParamStore, prefix: &str, width: usize) -> Result<()> {
    store.register(&format!("{prefix}.gain"), &[width], Init::Constant(1.0))?;
    store.register(&format!("{prefix}.shift"), &[width], Init::Constant(0.0))
}

pub fn apply_layer_norm<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    prefix: &str,
    x: &Var<'t>,
) -> Result<Var<'t>> {
    let gain = tape.param(store, &format!("{prefix}.gain"))?;
    let shift = tape.param(store, &format!("{prefix}.shift"))?;
    x.layer_norm(&gain, &shift, LAYER_NORM_EPS)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Projections of one multi-head self-attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights<'t> {
    pub wq: Var<'t>,
    pub bq: Var<'t>,
    pub wk: Var<'t>,
    pub bk: Var<'t>,
    pub wv: Var<'t>,
    pub bv: Var<'t>,
    pub wo: Var<'t>,
    pub bo: Var<'t>,
}

impl<'t> AttentionWeights<'t> {
    pub fn from_store(tape: &'t Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        let p = |n: &str| tape.param(store, &format!("{prefix}.{n}"));
        Ok(AttentionWeights {
            wq: p("wq")?,
            bq: p("bq")?,
            wk: p("wk")?,
            bk: p("bk")?,
            wv: p("wv")?,
            bv: p("bv")?,
            wo: p("wo")?,
            bo: p("bo")?,
        })
    }
}

pub fn register_attention(store: &mut ParamStore, prefix: &str, width: usize) -> Result<()> {
    for proj in ["q", "k", "v", "o"] {
        store.register(
            &format!("{prefix}.w{proj}"),
            &[width, width],
            Init::Uniform { fan_in: width },
        )?;
        store.register(
            &format!("{prefix}.b{proj}"),
            &[width],
            Init::Uniform { fan_in: width },
        )?;
    }
    Ok(())
}

/// Output of [`self_attention`]; `weights` holds one `[M×M]` row-stochastic
/// matrix per head.
pub struct Attended<'t> {
    pub output: Var<'t>,
    pub weights: Vec<Var<'t>>,
}

/// Scaled dot-product multi-head self-attention over the rows of `x`.
pub fn self_attention<'t>(
    x: &Var<'t>,
    w: &AttentionWeights<'t>,
    heads: usize,
) -> Result<Attended<'t>> {
    let shape = x.shape();
    let width = shape[1];
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(LmrlError::Config(format!(
            "attention width {width} is not divisible by {heads} heads"
        )));
    }
    let head_dim = width / heads;
    let q = linear(x, &w.wq, &w.bq)?;
    let k = linear(x, &w.wk, &w.bk)?;
    let v = linear(x, &w.wv, &w.bv)?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outputs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let start = h * head_dim;
        let qh = q.slice_cols(start, head_dim)?;
        let kh = k.slice_cols(start, head_dim)?;
        let vh = v.slice_cols(start, head_dim)?;
        let attn = qh.matmul(&kh.transpose()?)?.scale(scale).softmax_rows()?;
        outputs.push(attn.matmul(&vh)?);
        weights.push(attn);
    }
    let merged = if heads == 1 {
        outputs[0]
    } else {
        x.tape().concat_cols(&outputs)?
    };
    Ok(Attended {
        output: linear(&merged, &w.wo, &w.bo)?,
        weights,
    })
}

/// Largest head count `<= preferred` dividing `width`, preferring `preferred`
/// itself and otherwise falling back to a single head.
pub fn heads_for(width: usize, preferred: usize) -> usize {
    if preferred > 0 && width.is_multiple_of(preferred) {
        preferred
    } else {
        1
    }
}
