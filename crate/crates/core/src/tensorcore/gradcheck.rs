//! Central finite-difference oracle for analytic gradients.
//!
//! The oracle only ever evaluates forward values; it never consults the
//! recorded backward rules it is checking.

use crate::error::Result;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

pub const STEP: f64 = 1e-5;

/// `‖a − b‖ / (‖a‖ + ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let norm =
        a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        diff
    } else {
        diff / norm
    }
}

/// Comparison results for one scalar function.
///
/// `entries` holds the per-tensor relative error. A tensor whose true
/// gradient is zero (a softmax shift, say) only ever shows finite-difference
/// noise there, so [`GradReport::overall`] is the pass criterion: the
/// norm-wise relative error of the whole gradient vector.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub entries: Vec<(String, f64)>,
    /// See [`Tape::kink_margin`]. Central differences are only meaningful
    /// when this is well above [`STEP`].
    pub kink_margin: Option<f64>,
    analytic: Vec<f64>,
    numeric: Vec<f64>,
}

impl GradReport {
    pub fn overall(&self) -> f64 {
        relative_error(&self.analytic, &self.numeric)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst_entry(&self) -> Option<&(String, f64)> {
        self.entries
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
    }
}

fn evaluate<F>(store: &ParamStore, inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &ParamStore, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    Ok(f(&tape, store, &vars)?.item())
}

/// Checks the gradient of the scalar `f` with respect to every input tensor
/// and every parameter in `store` the function touches.
pub fn check<F>(store: &ParamStore, inputs: &[Tensor], f: F) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&tape, store, &vars)?;
    let grads = tape.backward(loss)?;

    let mut entries = Vec::new();
    let mut all_analytic = Vec::new();
    let mut all_numeric = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = vec![0.0; input.len()];
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let up = evaluate(store, &work, &f)?;
            work[i].data_mut()[j] = orig - STEP;
            let down = evaluate(store, &work, &f)?;
            work[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * STEP);
        }
        entries.push((format!("input{i}"), relative_error(&analytic, &numeric)));
        all_analytic.extend(analytic);
        all_numeric.extend(numeric);
    }

    let touched: Vec<(String, Vec<f64>)> = grads
        .params()
        .map(|(n, g)| (n.to_string(), g.data().to_vec()))
        .collect();
    let mut work = store.clone();
    for (name, analytic) in touched {
        let original = store.get(&name).expect("touched param exists").clone();
        let mut numeric = vec![0.0; original.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut probe = original.clone();
            probe.data_mut()[j] += STEP;
            work.set(&name, probe.clone())?;
            let up = evaluate(&work, inputs, &f)?;
            probe.data_mut()[j] -= 2.0 * STEP;
            work.set(&name, probe)?;
            let down = evaluate(&work, inputs, &f)?;
            *slot = (up - down) / (2.0 * STEP);
        }
        work.set(&name, original)?;
        entries.push((name, relative_error(&analytic, &numeric)));
        all_analytic.extend(analytic);
        all_numeric.extend(numeric);
    }
    Ok(GradReport {
        entries,
        kink_margin: tape.kink_margin(),
        analytic: all_analytic,
        numeric: all_numeric,
    })
}

/// Weighted sum `Σ r ∘ out` with fixed coefficients, turning any output
/// into a scalar that exercises every element.
pub fn project<'t>(out: &Var<'t>, coeffs: &Tensor) -> Result<Var<'t>> {
    let c = out.tape().constant(coeffs.reshape(&out.shape())?);
    Ok(out.mul(&c)?.sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_correct_and_wrong_gradients() {
        let store = ParamStore::new(0);
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let ok = check(&store, std::slice::from_ref(&x), |_, _, v| Ok(v[0].square()?.sum())).unwrap();
        assert!(ok.worst() < 1e-8);
        assert!(ok.overall() < 1e-8);
        assert!(relative_error(&[1.0, 2.0], &[1.0, 2.5]) > 0.05);
    }
}
