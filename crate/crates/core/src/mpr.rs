//! Multi-scale period-aware representation.
//!
//! A learnable bilinear similarity over frame embeddings is refined by a
//! small 2-D convolution stack, then pooled at several temporal scales. Each
//! pooled map is treated as a token sequence (rows are tokens), passed
//! through a residual self-attention sublayer with layer norm, reduced to one
//! value per token, and stretched back to the sequence length. The per-scale vectors form the columns of `P`.

use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, LmrlError, Result};
use crate::tensorcore::{
    apply_layer_norm, apply_linear, heads_for, register_attention, register_layer_norm,
    register_linear, self_attention, AttentionWeights, Init, ParamStore, Tape, Tensor, Var,
    LAYER_NORM_EPS,
};

/// How frame-to-frame similarity is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    /// `x_iᵀ W x_j` with learnable `W`.
    Bilinear,
    /// Fixed `−‖x_i − x_j‖² / C`.
    NegSqDistance,
}

/// What produces the `[N×K]` periodic representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentationKind {
    /// Full multi-scale branch.
    MultiScale,
    /// Raw distance matrix rows projected straight to `K` columns.
    PlainTsm,
    /// Self-attention over the embeddings projected to `K` columns.
    SelfAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MprConfig {
    /// Scale orders `k_i`; pooling window and stride are `2·k_i`.
    pub scale_orders: Vec<usize>,
    /// One dilated 3×3 convolution per entry in the refinement stack.
    pub dilation_rates: Vec<usize>,
    pub attention_heads: usize,
    /// Channels inside the refinement stack.
    pub mid_channels: usize,
    pub similarity: SimilarityKind,
    pub representation: RepresentationKind,
}

impl Default for MprConfig {
    fn default() -> Self {
        MprConfig {
            scale_orders: vec![1, 2, 3],
            dilation_rates: vec![2],
            attention_heads: 4,
            mid_channels: 8,
            similarity: SimilarityKind::Bilinear,
            representation: RepresentationKind::MultiScale,
        }
    }
}

impl MprConfig {
    pub fn scales(&self) -> usize {
        self.scale_orders.len()
    }

    pub fn pooled_size(n: usize, order: usize) -> usize {
        n.div_ceil(2 * order)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.scale_orders.is_empty() || self.scale_orders.contains(&0) {
            return Err(LmrlError::Config(format!(
                "scale orders must be non-empty and positive, got {:?}",
                self.scale_orders
            )));
        }
        if self.dilation_rates.contains(&0) || self.mid_channels == 0 || self.attention_heads == 0 {
            return Err(LmrlError::Config(
                "dilation rates, mid channels and attention heads must be positive".into(),
            ));
        }
        if let Some(&k) = self.scale_orders.iter().find(|&&k| 2 * k > n) {
            return Err(LmrlError::Config(format!(
                "scale order {k} pools with window {} which exceeds sequence length {n}",
                2 * k
            )));
        }
        Ok(())
    }
}

fn scale_prefix(order: usize) -> String {
    format!("mpr.scale_k{order}")
}

/// Registers every parameter the configured branch reads.
pub fn register_params(store: &mut ParamStore, cfg: &MprConfig, n: usize, c: usize) -> Result<()> {
    cfg.validate(n)?;
    let k = cfg.scales();
    match cfg.representation {
        RepresentationKind::PlainTsm => return register_linear(store, "mpr.tsm_proj", n, k),
        RepresentationKind::SelfAttention => {
            register_attention(store, "mpr.sa", c)?;
            register_layer_norm(store, "mpr.sa.norm", c)?;
            return register_linear(store, "mpr.sa_proj", c, k);
        }
        RepresentationKind::MultiScale => {}
    }
    if cfg.similarity == SimilarityKind::Bilinear {
        // Identity scaled by 1/C starts from a normalized dot-product similarity.
        store.register("mpr.w", &[c, c], Init::Identity)?;
        store.set("mpr.w", Tensor::eye(c).map(|v| v / c as f64))?;
    }
    let cm = cfg.mid_channels;
    store.register("mpr.expand.k", &[cm, 1, 1, 1], Init::Uniform { fan_in: 1 })?;
    store.register("mpr.expand.b", &[cm], Init::Uniform { fan_in: 1 })?;
    for (i, _) in cfg.dilation_rates.iter().enumerate() {
        let fan_in = cm * 9;
        store.register(
            &format!("mpr.dilated{i}.k"),
            &[cm, cm, 3, 3],
            Init::Uniform { fan_in },
        )?;
        store.register(
            &format!("mpr.dilated{i}.b"),
            &[cm],
            Init::Uniform { fan_in },
        )?;
    }
    store.register(
        "mpr.collapse.k",
        &[1, cm, 1, 1],
        Init::Uniform { fan_in: cm },
    )?;
    store.register("mpr.collapse.b", &[1], Init::Uniform { fan_in: cm })?;
    for &order in &cfg.scale_orders {
        let m = MprConfig::pooled_size(n, order);
        let prefix = scale_prefix(order);
        register_attention(store, &format!("{prefix}.attn"), m)?;
        register_layer_norm(store, &format!("{prefix}.norm"), m)?;
        register_linear(store, &format!("{prefix}.reduce"), m, 1)?;
    }
    Ok(())
}

/// `S[i,j] = x_iᵀ W x_j`.
pub fn similarity_matrix<'t>(x: &Var<'t>, w: &Var<'t>) -> Result<Var<'t>> {
    let (xs, ws) = (x.shape(), w.shape());
    if ws.len() != 2 || ws[0] != ws[1] || xs.len() != 2 || xs[1] != ws[0] {
        return shape_err("similarity_matrix", &xs, &ws);
    }
    x.matmul(w)?.matmul(&x.transpose()?)
}

/// `S[i,j] = −‖x_i − x_j‖² / C`.
pub fn neg_sq_distance<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let (n, c) = (shape[0], shape[1]);
    let tape = x.tape();
    let gram = x.matmul(&x.transpose()?)?;
    let norms = x.square()?.row_sum()?.reshape(&[n, 1])?;
    let ones = tape.constant(Tensor::filled(&[1, n], 1.0));
    let rows = norms.matmul(&ones)?;
    let cols = rows.transpose()?;
    Ok(gram
        .scale(2.0)
        .sub(&rows)?
        .sub(&cols)?
        .scale(1.0 / c as f64))
}

/// Kernels of the refinement stack.
pub struct RefineWeights<'t> {
    pub expand_k: Var<'t>,
    pub expand_b: Var<'t>,
    pub dilated: Vec<(Var<'t>, Var<'t>, usize)>,
    pub collapse_k: Var<'t>,
    pub collapse_b: Var<'t>,
}

impl<'t> RefineWeights<'t> {
    pub fn from_store(tape: &'t Tape, store: &ParamStore, cfg: &MprConfig) -> Result<Self> {
        let dilated = cfg
            .dilation_rates
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                Ok((
                    tape.param(store, &format!("mpr.dilated{i}.k"))?,
                    tape.param(store, &format!("mpr.dilated{i}.b"))?,
                    d,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RefineWeights {
            expand_k: tape.param(store, "mpr.expand.k")?,
            expand_b: tape.param(store, "mpr.expand.b")?,
            dilated,
            collapse_k: tape.param(store, "mpr.collapse.k")?,
            collapse_b: tape.param(store, "mpr.collapse.b")?,
        })
    }
}

/// 1×1 expansion, dilated 3×3 convolutions with ReLU, 1×1 collapse; the
/// `N×N` size is preserved.
pub fn refine_similarity<'t>(s: &Var<'t>, w: &RefineWeights<'t>) -> Result<Var<'t>> {
    let shape = s.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return shape_err("refine_similarity", &shape, &[shape[0], shape[0]]);
    }
    let n = shape[0];
    let mut h = s
        .reshape(&[1, n, n])?
        .conv2d(&w.expand_k, 1)?
        .add_channel_bias(&w.expand_b)?;
    for (k, b, d) in &w.dilated {
        h = h.conv2d(k, *d)?.add_channel_bias(b)?.relu();
    }
    h.conv2d(&w.collapse_k, 1)?
        .add_channel_bias(&w.collapse_b)?
        .reshape(&[n, n])
}

/// `[N×M]` linear interpolation matrix with half-frame alignment; every row
/// sums to one.
pub fn interpolation_matrix(n: usize, m: usize) -> Tensor {
    let mut data = vec![0.0; n * m];
    for t in 0..n {
        let src = ((t as f64 + 0.5) * m as f64 / n as f64 - 0.5).clamp(0.0, (m - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(m - 1);
        let frac = src - lo as f64;
        data[t * m + lo] += 1.0 - frac;
        data[t * m + hi] += frac;
    }
    Tensor::matrix(n, m, data).expect("interpolation shape")
}

/// Parameters of one scale.
pub struct ScaleWeights<'t> {
    pub attn: AttentionWeights<'t>,
    pub norm_gain: Var<'t>,
    pub norm_shift: Var<'t>,
    pub reduce_w: Var<'t>,
    pub reduce_b: Var<'t>,
}

impl<'t> ScaleWeights<'t> {
    pub fn from_store(tape: &'t Tape, store: &ParamStore, order: usize) -> Result<Self> {
        let prefix = scale_prefix(order);
        let p = |n: &str| tape.param(store, &format!("{prefix}.{n}"));
        Ok(ScaleWeights {
            attn: AttentionWeights::from_store(tape, store, &format!("{prefix}.attn"))?,
            norm_gain: p("norm.gain")?,
            norm_shift: p("norm.shift")?,
            reduce_w: p("reduce.w")?,
            reduce_b: p("reduce.b")?,
        })
    }
}

/// Intermediates of one scale.
pub struct ScaleOutput<'t> {
    pub pooled: Var<'t>,
    pub attention: Vec<Var<'t>>,
    pub vector: Var<'t>,
}

/// Pool with window `2k`, apply `LayerNorm(x + attention(x))` over pooled
/// rows, reduce each row to one value, and interpolate back to `N×1`.
pub fn scale_branch<'t>(
    refined: &Var<'t>,
    order: usize,
    heads: usize,
    w: &ScaleWeights<'t>,
) -> Result<ScaleOutput<'t>> {
    let n = refined.shape()[0];
    if order == 0 || MprConfig::pooled_size(n, order) == 0 || 2 * order > n {
        return Err(LmrlError::Config(format!(
            "scale order {order} gives no pooled cells for length {n}"
        )));
    }
    let window = 2 * order;
    let pooled = refined.max_pool2d(window, window)?;
    let m = pooled.shape()[0];
    let attended = self_attention(&pooled, &w.attn, heads_for(m, heads))?;
    let mixed = pooled
        .add(&attended.output)?
        .layer_norm(&w.norm_gain, &w.norm_shift, LAYER_NORM_EPS)?;
    let reduced = mixed.matmul(&w.reduce_w)?.add_bias(&w.reduce_b)?;
    let vector = reduced.fixed_left_matmul(Rc::new(interpolation_matrix(n, m)))?;
    Ok(ScaleOutput {
        pooled,
        attention: attended.weights,
        vector,
    })
}

/// Every intermediate of the branch, retained for inspection.
pub struct SimilarityStack<'t> {
    pub raw: Option<Var<'t>>,
    pub refined: Option<Var<'t>>,
    pub scales: Vec<ScaleOutput<'t>>,
    /// `[N×K]`
    pub p: Var<'t>,
}

pub fn mpr_forward<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    x: &Var<'t>,
    cfg: &MprConfig,
) -> Result<SimilarityStack<'t>> {
    let n = x.shape()[0];
    cfg.validate(n)?;
    match cfg.representation {
        RepresentationKind::PlainTsm => {
            let raw = neg_sq_distance(x)?;
            let p = apply_linear(tape, store, "mpr.tsm_proj", &raw)?;
            return Ok(SimilarityStack {
                raw: Some(raw),
                refined: None,
                scales: Vec::new(),
                p,
            });
        }
        RepresentationKind::SelfAttention => {
            let w = AttentionWeights::from_store(tape, store, "mpr.sa")?;
            let c = x.shape()[1];
            let attended = self_attention(x, &w, heads_for(c, cfg.attention_heads))?;
            let mixed = apply_layer_norm(tape, store, "mpr.sa.norm", &x.add(&attended.output)?)?;
            let p = apply_linear(tape, store, "mpr.sa_proj", &mixed)?;
            return Ok(SimilarityStack {
                raw: None,
                refined: None,
                scales: Vec::new(),
                p,
            });
        }
        RepresentationKind::MultiScale => {}
    }
    let raw = match cfg.similarity {
        SimilarityKind::Bilinear => similarity_matrix(x, &tape.param(store, "mpr.w")?)?,
        SimilarityKind::NegSqDistance => neg_sq_distance(x)?,
    };
    let refined = refine_similarity(&raw, &RefineWeights::from_store(tape, store, cfg)?)?;
    let mut scales = Vec::with_capacity(cfg.scales());
    for &order in &cfg.scale_orders {
        let w = ScaleWeights::from_store(tape, store, order)?;
        scales.push(scale_branch(&refined, order, cfg.attention_heads, &w)?);
    }
    let vectors: Vec<Var<'t>> = scales.iter().map(|s| s.vector).collect();
    let p = tape.concat_cols(&vectors)?;
    Ok(SimilarityStack {
        raw: Some(raw),
        refined: Some(refined),
        scales,
        p,
    })
}

/// Writes a matrix as comma-separated rows.
pub fn write_matrix_csv(path: &Path, m: &Tensor) -> Result<()> {
    let (_, cols) = m.dims2()?;
    let mut out = Vec::new();
    for row in m.data().chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(",")).expect("write to vec");
    }
    std::fs::write(path, out).map_err(|e| LmrlError::io(path, e))
}

/// Dumps raw, refined and pooled maps of `stack` under `dir` with `stem`.
pub fn dump_stack(dir: &Path, stem: &str, stack: &SimilarityStack<'_>) -> Result<()> {
    if let Some(raw) = &stack.raw {
        write_matrix_csv(&dir.join(format!("{stem}_raw.csv")), &raw.value())?;
    }
    if let Some(refined) = &stack.refined {
        write_matrix_csv(&dir.join(format!("{stem}_refined.csv")), &refined.value())?;
    }
    for (i, s) in stack.scales.iter().enumerate() {
        write_matrix_csv(
            &dir.join(format!("{stem}_pooled{i}.csv")),
            &s.pooled.value(),
        )?;
    }
    Ok(())
}
