//! Tape-recorded reverse-mode differentiation.
//!
//! Every operation on a [`Var`] evaluates eagerly, stores its output value on
//! the [`Tape`], and records which inputs it consumed. [`Tape::backward`]
//! walks the records in reverse and returns the gradient of a scalar loss with
//! respect to every leaf that requires a gradient. The tape owns the graph, so
//! dropping it after backward frees every intermediate.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{shape_err, LmrlError, Result};

use super::params::ParamStore;
use super::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    AddChannelBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MulScalarVar(usize, usize),
    Relu(usize),
    Abs(usize),
    Sqrt(usize),
    Log {
        x: usize,
        floor: f64,
    },
    Sum(usize),
    RowSum(usize),
    Transpose(usize),
    SoftmaxRows(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    GatherRows {
        x: usize,
        rows: Vec<usize>,
    },
    Reshape(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        shift: usize,
        eps: f64,
    },
    Conv1d {
        x: usize,
        kernel: usize,
        dilation: usize,
    },
    Conv2d {
        x: usize,
        kernel: usize,
        dilation: usize,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
    Fixed {
        x: usize,
        matrix: Rc<Tensor>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<BTreeMap<String, usize>>,
    kink: Cell<Option<f64>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, usize>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .get(name)
            .and_then(|&id| self.grads.get(id))
            .and_then(Option::as_ref)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().filter_map(|(name, &id)| {
            self.grads
                .get(id)
                .and_then(Option::as_ref)
                .map(|g| (name.as_str(), g))
        })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Smallest distance from a differentiable input of a piecewise op
    /// (ReLU, abs, sqrt, clamped log, max pooling) to one of its kinks.
    /// `None` when no such op saw a differentiable input.
    pub fn kink_margin(&self) -> Option<f64> {
        self.kink.get()
    }

    fn note_kink(&self, id: usize, distance: impl Fn() -> f64) {
        if self.needs(&[id]) {
            let d = distance();
            self.kink.set(Some(self.kink.get().map_or(d, |k| k.min(d))));
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf bound to a named parameter; repeated lookups share one leaf.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Var<'_>> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Ok(Var { tape: self, id });
        }
        let value = store
            .get(name)
            .ok_or_else(|| LmrlError::MissingParam(name.to_string()))?
            .clone();
        let var = self.push(value, Op::Leaf, true);
        self.params.borrow_mut().insert(name.to_string(), var.id);
        Ok(var)
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| LmrlError::Config("concat of zero tensors".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let (rows, _) = values[0].dims2()?;
        let mut total = 0;
        for v in &values {
            let (r, c) = v.dims2()?;
            if r != rows {
                return shape_err("concat_cols", first.value().shape(), v.shape());
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.needs(&ids);
        Ok(self.push(Tensor::matrix(rows, total, data)?, Op::ConcatCols(ids), rg))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(LmrlError::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::filled(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            params: self.params.borrow().clone(),
        })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let gd = g.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (r, k) = val(*a).dims2().unwrap();
            let c = val(*b).shape()[1];
            if nodes[*a].requires_grad {
                let da = matmul_nt(gd, val(*b).data(), r, c, k);
                accumulate(nodes, grads, *a, Tensor::new(vec![r, k], da).unwrap());
            }
            if nodes[*b].requires_grad {
                let db = matmul_tn(val(*a).data(), gd, r, k, c);
                accumulate(nodes, grads, *b, Tensor::new(vec![k, c], db).unwrap());
            }
        }
        Op::AddBias(x, b) => {
            accumulate(nodes, grads, *x, g.clone());
            if nodes[*b].requires_grad {
                let cols = g.shape()[1];
                let mut db = vec![0.0; cols];
                for row in gd.chunks(cols) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(nodes, grads, *b, Tensor::vector(db));
            }
        }
        Op::AddChannelBias(x, b) => {
            accumulate(nodes, grads, *x, g.clone());
            if nodes[*b].requires_grad {
                let ch = g.shape()[0];
                let plane = g.len() / ch;
                let db = gd.chunks(plane).map(|p| p.iter().sum()).collect();
                accumulate(nodes, grads, *b, Tensor::vector(db));
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if nodes[*a].requires_grad {
                let d = gd.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                accumulate(
                    nodes,
                    grads,
                    *a,
                    Tensor::new(av.shape().to_vec(), d).unwrap(),
                );
            }
            if nodes[*b].requires_grad {
                let d = gd.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                accumulate(
                    nodes,
                    grads,
                    *b,
                    Tensor::new(bv.shape().to_vec(), d).unwrap(),
                );
            }
        }
        Op::Scale(x, c) => accumulate(nodes, grads, *x, g.map(|v| v * c)),
        Op::AddScalar(x) => accumulate(nodes, grads, *x, g.clone()),
        Op::MulScalarVar(x, s) => {
            let sv = val(*s).data()[0];
            accumulate(nodes, grads, *x, g.map(|v| v * sv));
            if nodes[*s].requires_grad {
                let ds: f64 = gd.iter().zip(val(*x).data()).map(|(g, x)| g * x).sum();
                accumulate(
                    nodes,
                    grads,
                    *s,
                    Tensor::new(val(*s).shape().to_vec(), vec![ds]).unwrap(),
                );
            }
        }
        Op::Relu(x) => {
            let d = gd
                .iter()
                .zip(out.data())
                .map(|(g, o)| if *o > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(
                nodes,
                grads,
                *x,
                Tensor::new(out.shape().to_vec(), d).unwrap(),
            );
        }
        Op::Abs(x) => {
            let d = gd
                .iter()
                .zip(val(*x).data())
                .map(|(g, v)| {
                    if *v > 0.0 {
                        *g
                    } else if *v < 0.0 {
                        -*g
                    } else {
                        0.0
                    }
                })
                .collect();
            accumulate(
                nodes,
                grads,
                *x,
                Tensor::new(out.shape().to_vec(), d).unwrap(),
            );
        }
        Op::Sqrt(x) => {
            let d = gd
                .iter()
                .zip(out.data())
                .map(|(g, o)| if *o > 0.0 { g / (2.0 * o) } else { 0.0 })
                .collect();
            accumulate(
                nodes,
                grads,
                *x,
                Tensor::new(out.shape().to_vec(), d).unwrap(),
            );
        }
        Op::Log { x, floor } => {
            let d = gd
                .iter()
                .zip(val(*x).data())
                .map(|(g, v)| if *v > *floor { g / v } else { 0.0 })
                .collect();
            accumulate(
                nodes,
                grads,
                *x,
                Tensor::new(out.shape().to_vec(), d).unwrap(),
            );
        }
        Op::Sum(x) => {
            accumulate(nodes, grads, *x, Tensor::filled(val(*x).shape(), gd[0]));
        }
        Op::RowSum(x) => {
            let shape = val(*x).shape().to_vec();
            let cols = shape[1];
            let d = Tensor::from_fn(&shape, |i| gd[i / cols]);
            accumulate(nodes, grads, *x, d);
        }
        Op::Transpose(x) => accumulate(nodes, grads, *x, g.transpose().unwrap()),
        Op::SoftmaxRows(x) => {
            let cols = out.shape()[1];
            let mut d = vec![0.0; out.len()];
            for ((dr, sr), gr) in d
                .chunks_mut(cols)
                .zip(out.data().chunks(cols))
                .zip(gd.chunks(cols))
            {
                let dot: f64 = sr.iter().zip(gr).map(|(s, g)| s * g).sum();
                for ((dv, s), gv) in dr.iter_mut().zip(sr).zip(gr) {
                    *dv = s * (gv - dot);
                }
            }
            accumulate(
                nodes,
                grads,
                *x,
                Tensor::new(out.shape().to_vec(), d).unwrap(),
            );
        }
        Op::SliceCols { x, start } => {
            let shape = val(*x).shape().to_vec();
            let (rows, cols) = (shape[0], shape[1]);
            let width = out.shape()[1];
            let mut d = vec![0.0; rows * cols];
            for r in 0..rows {
                d[r * cols + start..r * cols + start + width]
                    .copy_from_slice(&gd[r * width..(r + 1) * width]);
            }
            accumulate(nodes, grads, *x, Tensor::new(shape, d).unwrap());
        }
        Op::ConcatCols(parts) => {
            let (rows, total) = (out.shape()[0], out.shape()[1]);
            let mut offset = 0;
            for &p in parts {
                let width = val(p).shape()[1];
                if nodes[p].requires_grad {
                    let mut d = Vec::with_capacity(rows * width);
                    for r in 0..rows {
                        d.extend_from_slice(&gd[r * total + offset..r * total + offset + width]);
                    }
                    accumulate(nodes, grads, p, Tensor::new(vec![rows, width], d).unwrap());
                }
                offset += width;
            }
        }
        Op::GatherRows { x, rows } => {
            let shape = val(*x).shape().to_vec();
            let cols = shape[1];
            let mut d = Tensor::zeros(&shape);
            for (r, &src) in rows.iter().enumerate() {
                for c in 0..cols {
                    d.data_mut()[src * cols + c] += gd[r * cols + c];
                }
            }
            accumulate(nodes, grads, *x, d);
        }
        Op::Reshape(x) => {
            accumulate(nodes, grads, *x, g.reshape(val(*x).shape()).unwrap());
        }
        Op::Fixed { x, matrix } => {
            // out = M · x, so dx = Mᵀ · g
            let (r, k) = matrix.dims2().unwrap();
            let c = val(*x).shape()[1];
            let d = matmul_tn(matrix.data(), gd, r, k, c);
            accumulate(nodes, grads, *x, Tensor::new(vec![k, c], d).unwrap());
        }
        Op::LayerNorm {
            x,
            gain,
            shift,
            eps,
        } => {
            let xv = val(*x);
            let gv = val(*gain).data();
            let cols = xv.shape()[1];
            let n = cols as f64;
            let mut dx = vec![0.0; xv.len()];
            let mut dgain = vec![0.0; cols];
            let mut dshift = vec![0.0; cols];
            for ((xr, gr), dr) in xv
                .data()
                .chunks(cols)
                .zip(gd.chunks(cols))
                .zip(dx.chunks_mut(cols))
            {
                let (mean, rstd) = row_stats(xr, *eps);
                let mut sum_dy = 0.0;
                let mut sum_dy_y = 0.0;
                for j in 0..cols {
                    let y = (xr[j] - mean) * rstd;
                    dgain[j] += gr[j] * y;
                    dshift[j] += gr[j];
                    let dy = gr[j] * gv[j];
                    sum_dy += dy;
                    sum_dy_y += dy * y;
                }
                for j in 0..cols {
                    let y = (xr[j] - mean) * rstd;
                    let dy = gr[j] * gv[j];
                    dr[j] = rstd / n * (n * dy - sum_dy - y * sum_dy_y);
                }
            }
            accumulate(
                nodes,
                grads,
                *x,
                Tensor::new(xv.shape().to_vec(), dx).unwrap(),
            );
            accumulate(nodes, grads, *gain, Tensor::vector(dgain));
            accumulate(nodes, grads, *shift, Tensor::vector(dshift));
        }
        Op::Conv1d {
            x,
            kernel,
            dilation,
        } => {
            let (xv, kv) = (val(*x), val(*kernel));
            let (len, cin) = (xv.shape()[0], xv.shape()[1]);
            let (taps, cout) = (kv.shape()[0], kv.shape()[2]);
            let half = (taps - 1) / 2;
            let mut dx = vec![0.0; xv.len()];
            let mut dk = vec![0.0; kv.len()];
            for tap in 0..taps {
                let offset = (tap as isize - half as isize) * *dilation as isize;
                let kslice = &kv.data()[tap * cin * cout..(tap + 1) * cin * cout];
                let dkslice = &mut dk[tap * cin * cout..(tap + 1) * cin * cout];
                for t in 0..len {
                    let src = t as isize + offset;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let src = src as usize;
                    let grow = &gd[t * cout..(t + 1) * cout];
                    let xrow = &xv.data()[src * cin..(src + 1) * cin];
                    let dxrow = &mut dx[src * cin..(src + 1) * cin];
                    for i in 0..cin {
                        let krow = &kslice[i * cout..(i + 1) * cout];
                        let dkrow = &mut dkslice[i * cout..(i + 1) * cout];
                        let mut acc = 0.0;
                        for o in 0..cout {
                            acc += grow[o] * krow[o];
                            dkrow[o] += xrow[i] * grow[o];
                        }
                        dxrow[i] += acc;
                    }
                }
            }
            if nodes[*x].requires_grad {
                accumulate(
                    nodes,
                    grads,
                    *x,
                    Tensor::new(xv.shape().to_vec(), dx).unwrap(),
                );
            }
            accumulate(
                nodes,
                grads,
                *kernel,
                Tensor::new(kv.shape().to_vec(), dk).unwrap(),
            );
        }
        Op::Conv2d {
            x,
            kernel,
            dilation,
        } => {
            let (xv, kv) = (val(*x), val(*kernel));
            let (dx, dk) = conv2d_backward(xv, kv, g, *dilation);
            if nodes[*x].requires_grad {
                accumulate(nodes, grads, *x, dx);
            }
            accumulate(nodes, grads, *kernel, dk);
        }
        Op::MaxPool2d { x, argmax } => {
            let mut d = Tensor::zeros(val(*x).shape());
            for (&src, gv) in argmax.iter().zip(gd) {
                d.data_mut()[src] += gv;
            }
            accumulate(nodes, grads, *x, d);
        }
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

struct Conv2dGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
}

impl Conv2dGeom {
    fn of(x: &Tensor, k: &Tensor) -> Self {
        Conv2dGeom {
            cin: x.shape()[0],
            h: x.shape()[1],
            w: x.shape()[2],
            cout: k.shape()[0],
            kh: k.shape()[2],
            kw: k.shape()[3],
        }
    }

    /// Valid destination range and source shift for one tap along one axis.
    fn span(extent: usize, tap: usize, taps: usize, dilation: usize) -> (usize, usize, isize) {
        let shift = (tap as isize - ((taps - 1) / 2) as isize) * dilation as isize;
        let lo = (-shift).max(0) as usize;
        let hi = (extent as isize - shift.max(0)).max(0) as usize;
        (lo.min(hi), hi, shift)
    }
}

fn conv2d_forward(x: &Tensor, k: &Tensor, dilation: usize) -> Tensor {
    let gm = Conv2dGeom::of(x, k);
    let plane = gm.h * gm.w;
    let mut out = vec![0.0; gm.cout * plane];
    for o in 0..gm.cout {
        let oplane = &mut out[o * plane..(o + 1) * plane];
        for i in 0..gm.cin {
            let iplane = &x.data()[i * plane..(i + 1) * plane];
            for u in 0..gm.kh {
                let (ylo, yhi, dy) = Conv2dGeom::span(gm.h, u, gm.kh, dilation);
                for v in 0..gm.kw {
                    let wv = k.data()[((o * gm.cin + i) * gm.kh + u) * gm.kw + v];
                    if wv == 0.0 {
                        continue;
                    }
                    let (xlo, xhi, dx) = Conv2dGeom::span(gm.w, v, gm.kw, dilation);
                    for y in ylo..yhi {
                        let sy = (y as isize + dy) as usize;
                        let orow = &mut oplane[y * gm.w + xlo..y * gm.w + xhi];
                        let srow_start = (sy * gm.w) as isize + xlo as isize + dx;
                        let srow = &iplane[srow_start as usize..srow_start as usize + (xhi - xlo)];
                        for (ov, sv) in orow.iter_mut().zip(srow) {
                            *ov += wv * sv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![gm.cout, gm.h, gm.w], out).unwrap()
}

fn conv2d_backward(x: &Tensor, k: &Tensor, g: &Tensor, dilation: usize) -> (Tensor, Tensor) {
    let gm = Conv2dGeom::of(x, k);
    let plane = gm.h * gm.w;
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    for o in 0..gm.cout {
        let gplane = &g.data()[o * plane..(o + 1) * plane];
        for i in 0..gm.cin {
            let iplane = &x.data()[i * plane..(i + 1) * plane];
            let dplane = &mut dx[i * plane..(i + 1) * plane];
            for u in 0..gm.kh {
                let (ylo, yhi, dy) = Conv2dGeom::span(gm.h, u, gm.kh, dilation);
                for v in 0..gm.kw {
                    let widx = ((o * gm.cin + i) * gm.kh + u) * gm.kw + v;
                    let wv = k.data()[widx];
                    let (xlo, xhi, dxs) = Conv2dGeom::span(gm.w, v, gm.kw, dilation);
                    let mut acc = 0.0;
                    for y in ylo..yhi {
                        let sy = (y as isize + dy) as usize;
                        let grow = &gplane[y * gm.w + xlo..y * gm.w + xhi];
                        let s0 = ((sy * gm.w) as isize + xlo as isize + dxs) as usize;
                        let srow = &iplane[s0..s0 + (xhi - xlo)];
                        let drow = &mut dplane[s0..s0 + (xhi - xlo)];
                        for ((gv, sv), dv) in grow.iter().zip(srow).zip(drow.iter_mut()) {
                            acc += gv * sv;
                            *dv += wv * gv;
                        }
                    }
                    dk[widx] += acc;
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(k.shape().to_vec(), dk).unwrap(),
    )
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    fn note_kink_at(&self, at: f64) {
        self.tape.note_kink(self.id, || {
            self.value()
                .data()
                .iter()
                .map(|v| (v - at).abs())
                .fold(f64::INFINITY, f64::min)
        });
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.needs(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return shape_err(op, a.shape(), b.shape());
        }
        Ok((a, b))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (r, k) = a.dims2()?;
        let (k2, c) = b.dims2()?;
        if k != k2 {
            return shape_err("matmul", a.shape(), b.shape());
        }
        let out = Tensor::new(vec![r, c], matmul_raw(a.data(), b.data(), r, k, c))?;
        Ok(self.binary(other, out, Op::MatMul(self.id, other.id)))
    }

    /// Adds a length-`B` bias to every row of an `[N×B]` matrix.
    pub fn add_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        let (_, cols) = x.dims2()?;
        if b.len() != cols {
            return shape_err("add_bias", x.shape(), b.shape());
        }
        let data = x
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b.data()).map(|(v, c)| v + c))
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.binary(bias, out, Op::AddBias(self.id, bias.id)))
    }

    /// Adds one bias per leading channel of a `[C×H×W]` map.
    pub fn add_channel_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        if x.rank() != 3 || b.len() != x.shape()[0] {
            return shape_err("add_channel_bias", x.shape(), b.shape());
        }
        let plane = x.len() / x.shape()[0];
        let data = x
            .data()
            .chunks(plane)
            .zip(b.data())
            .flat_map(|(p, c)| p.iter().map(move |v| v + c))
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.binary(bias, out, Op::AddChannelBias(self.id, bias.id)))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "add")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.binary(other, out, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "sub")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.binary(other, out, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "mul")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.binary(other, out, Op::Mul(self.id, other.id)))
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.mul(self)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v * c);
        self.unary(out, Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v + c);
        self.unary(out, Op::AddScalar(self.id))
    }

    /// Multiplies every element by the single value held in `s`.
    pub fn mul_scalar_var(&self, s: &Var<'t>) -> Result<Var<'t>> {
        let sv = s.value();
        if sv.len() != 1 {
            return shape_err("mul_scalar_var", &self.shape(), sv.shape());
        }
        let c = sv.data()[0];
        let out = self.value().map(|v| v * c);
        Ok(self.binary(s, out, Op::MulScalarVar(self.id, s.id)))
    }

    pub fn relu(&self) -> Var<'t> {
        self.note_kink_at(0.0);
        let out = self.value().map(|v| v.max(0.0));
        self.unary(out, Op::Relu(self.id))
    }

    pub fn abs(&self) -> Var<'t> {
        self.note_kink_at(0.0);
        let out = self.value().map(f64::abs);
        self.unary(out, Op::Abs(self.id))
    }

    /// Square root with a zero subgradient at the origin.
    pub fn sqrt(&self) -> Var<'t> {
        self.note_kink_at(0.0);
        let out = self.value().map(|v| v.max(0.0).sqrt());
        self.unary(out, Op::Sqrt(self.id))
    }

    /// `ln(max(x, floor))`.
    pub fn log_clamped(&self, floor: f64) -> Var<'t> {
        self.note_kink_at(floor);
        let out = self.value().map(|v| v.max(floor).ln());
        self.unary(out, Op::Log { x: self.id, floor })
    }

    pub fn sum(&self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.unary(out, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums each row of `[N×C]` into a length-`N` vector.
    pub fn row_sum(&self) -> Result<Var<'t>> {
        let x = self.value();
        let (_, cols) = x.dims2()?;
        let out = Tensor::vector(x.data().chunks(cols).map(|r| r.iter().sum()).collect());
        Ok(self.unary(out, Op::RowSum(self.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let out = self.value().transpose()?;
        Ok(self.unary(out, Op::Transpose(self.id)))
    }

    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let x = self.value();
        let (_, cols) = x.dims2()?;
        let mut data = Vec::with_capacity(x.len());
        for row in x.data().chunks(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.into_iter().map(|e| e / z));
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.unary(out, Op::SoftmaxRows(self.id)))
    }

    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = x.dims2()?;
        if width == 0 || start + width > cols {
            return shape_err("slice_cols", x.shape(), &[start, width]);
        }
        let data = (0..rows)
            .flat_map(|r| x.row(r)[start..start + width].iter().copied())
            .collect();
        let out = Tensor::matrix(rows, width, data)?;
        Ok(self.unary(out, Op::SliceCols { x: self.id, start }))
    }

    pub fn gather_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (n, cols) = x.dims2()?;
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return shape_err("gather_rows", x.shape(), rows);
        }
        let data = rows
            .iter()
            .flat_map(|&r| x.row(r).iter().copied())
            .collect();
        let out = Tensor::matrix(rows.len(), cols, data)?;
        Ok(self.unary(
            out,
            Op::GatherRows {
                x: self.id,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    /// Left-multiplies by a constant matrix: `M · x`.
    pub fn fixed_left_matmul(&self, matrix: Rc<Tensor>) -> Result<Var<'t>> {
        let x = self.value();
        let (r, k) = matrix.dims2()?;
        let (k2, c) = x.dims2()?;
        if k != k2 {
            return shape_err("fixed_left_matmul", matrix.shape(), x.shape());
        }
        let out = Tensor::new(vec![r, c], matmul_raw(matrix.data(), x.data(), r, k, c))?;
        Ok(self.unary(out, Op::Fixed { x: self.id, matrix }))
    }

    /// Row-wise normalization followed by a per-column affine map.
    pub fn layer_norm(&self, gain: &Var<'t>, shift: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        if eps <= 0.0 {
            return Err(LmrlError::Config(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let (x, gv, sv) = (self.value(), gain.value(), shift.value());
        let (_, cols) = x.dims2()?;
        if gv.len() != cols || sv.len() != cols {
            return shape_err("layer_norm", x.shape(), gv.shape());
        }
        let mut data = Vec::with_capacity(x.len());
        for row in x.data().chunks(cols) {
            let (mean, rstd) = row_stats(row, eps);
            for ((v, g), b) in row.iter().zip(gv.data()).zip(sv.data()) {
                data.push((v - mean) * rstd * g + b);
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.tape.needs(&[self.id, gain.id, shift.id]);
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                shift: shift.id,
                eps,
            },
            rg,
        ))
    }

    /// Same-length dilated convolution of `[N×C_in]` with a `[k×C_in×C_out]` kernel.
    pub fn conv1d(&self, kernel: &Var<'t>, dilation: usize) -> Result<Var<'t>> {
        let (x, k) = (self.value(), kernel.value());
        let (len, cin) = x.dims2()?;
        if k.rank() != 3 || k.shape()[1] != cin {
            return shape_err("conv1d", x.shape(), k.shape());
        }
        let (taps, cout) = (k.shape()[0], k.shape()[2]);
        if taps % 2 == 0 {
            return Err(LmrlError::Config(format!(
                "conv1d kernel size must be odd, got {taps}"
            )));
        }
        if dilation == 0 {
            return Err(LmrlError::Config(
                "conv1d dilation must be at least 1".into(),
            ));
        }
        let half = (taps - 1) / 2;
        let mut out = vec![0.0; len * cout];
        for tap in 0..taps {
            let offset = (tap as isize - half as isize) * dilation as isize;
            let kslice = &k.data()[tap * cin * cout..(tap + 1) * cin * cout];
            for t in 0..len {
                let src = t as isize + offset;
                if src < 0 || src >= len as isize {
                    continue;
                }
                let xrow = x.row(src as usize);
                let orow = &mut out[t * cout..(t + 1) * cout];
                for (i, &xv) in xrow.iter().enumerate() {
                    for (o, kv) in orow.iter_mut().zip(&kslice[i * cout..(i + 1) * cout]) {
                        *o += xv * kv;
                    }
                }
            }
        }
        let out = Tensor::matrix(len, cout, out)?;
        Ok(self.binary(
            kernel,
            out,
            Op::Conv1d {
                x: self.id,
                kernel: kernel.id,
                dilation,
            },
        ))
    }

    /// Same-size dilated convolution of a `[C_in×H×W]` map with a
    /// `[C_out×C_in×kh×kw]` kernel.
    pub fn conv2d(&self, kernel: &Var<'t>, dilation: usize) -> Result<Var<'t>> {
        let (x, k) = (self.value(), kernel.value());
        if x.rank() != 3 || k.rank() != 4 || k.shape()[1] != x.shape()[0] {
            return shape_err("conv2d", x.shape(), k.shape());
        }
        if k.shape()[2] % 2 == 0 || k.shape()[3] % 2 == 0 {
            return Err(LmrlError::Config(format!(
                "conv2d kernel size must be odd, got {:?}",
                &k.shape()[2..]
            )));
        }
        if dilation == 0 {
            return Err(LmrlError::Config(
                "conv2d dilation must be at least 1".into(),
            ));
        }
        let out = conv2d_forward(&x, &k, dilation);
        Ok(self.binary(
            kernel,
            out,
            Op::Conv2d {
                x: self.id,
                kernel: kernel.id,
                dilation,
            },
        ))
    }

    /// Non-overlapping max pooling of an `[H×W]` map; a trailing partial
    /// window pools over its actual extent.
    pub fn max_pool2d(&self, window: usize, stride: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (h, w) = x.dims2()?;
        if window == 0 || stride != window {
            return Err(LmrlError::Config(format!(
                "max_pool2d requires stride == window > 0, got window {window} stride {stride}"
            )));
        }
        if window > h || window > w {
            return Err(LmrlError::Config(format!(
                "pooling window {window} exceeds map size {h}x{w}"
            )));
        }
        let (mh, mw) = (h.div_ceil(window), w.div_ceil(window));
        let mut data = Vec::with_capacity(mh * mw);
        let mut argmax = Vec::with_capacity(mh * mw);
        let mut gap = f64::INFINITY;
        for by in 0..mh {
            for bx in 0..mw {
                let mut best = f64::NEG_INFINITY;
                let mut second = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for y in by * window..((by + 1) * window).min(h) {
                    for xx in bx * window..((bx + 1) * window).min(w) {
                        let v = x.data()[y * w + xx];
                        if v > best {
                            second = best;
                            best = v;
                            best_idx = y * w + xx;
                        } else if v > second {
                            second = v;
                        }
                    }
                }
                data.push(best);
                argmax.push(best_idx);
                gap = gap.min(best - second);
            }
        }
        self.tape.note_kink(self.id, || gap);
        let out = Tensor::matrix(mh, mw, data)?;
        Ok(self.unary(out, Op::MaxPool2d { x: self.id, argmax }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let loss = x.square().unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![2.0]));
        let y = x.add(&x).unwrap().add(&x.scale(3.0)).unwrap();
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(LmrlError::Usage(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let g = tape.backward(x.mul(&c).unwrap().sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn pooling_routes_to_first_max() {
        let tape = Tape::new();
        let x = tape.input(Tensor::matrix(2, 2, vec![5.0, 5.0, 1.0, 5.0]).unwrap());
        let p = x.max_pool2d(2, 2).unwrap();
        assert_eq!(p.value().data(), &[5.0]);
        let g = tape.backward(p.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pooling_rejects_oversized_window() {
        let tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[3, 3]));
        assert!(matches!(x.max_pool2d(4, 4), Err(LmrlError::Config(_))));
        assert!(matches!(x.max_pool2d(2, 1), Err(LmrlError::Config(_))));
    }

    #[test]
    fn even_kernels_are_rejected() {
        let tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[5, 1]));
        let k = tape.input(Tensor::zeros(&[2, 1, 1]));
        assert!(matches!(x.conv1d(&k, 1), Err(LmrlError::Config(_))));
        let m = tape.input(Tensor::zeros(&[1, 4, 4]));
        let k2 = tape.input(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(matches!(m.conv2d(&k2, 1), Err(LmrlError::Config(_))));
    }
}
