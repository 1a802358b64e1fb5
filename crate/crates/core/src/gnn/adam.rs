//! Adam over a `ParamSet` (minimization).

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::gnn::params::ParamSet;
use crate::gnn::tape::Gradients;

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: usize,
    hyper: AdamHyper,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState::with_hyper(params, AdamHyper::default())
    }

    pub fn with_hyper(params: &ParamSet, hyper: AdamHyper) -> Self {
        let zeros: Vec<Array2<f64>> = params
            .tensors
            .iter()
            .map(|t| Array2::zeros(t.value.dim()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            hyper,
        }
    }
}

/// One Adam step on every parameter slot with a gradient. A non-finite
/// gradient is reported and the whole step is skipped.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &Gradients,
    lr: f64,
    state: &mut AdamState,
) -> Result<()> {
    if params.tensors.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            context: "adam state",
            expected: params.tensors.len(),
            found: state.m.len(),
        });
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    state.t += 1;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(state.t as i32);
    let bc2 = 1.0 - h.beta2.powi(state.t as i32);
    for (slot, g) in &grads.by_slot {
        let p = &mut params.tensors[*slot].value;
        let m = &mut state.m[*slot];
        let v = &mut state.v[*slot];
        ndarray::Zip::from(p)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|p, m, v, &g| {
                *m = h.beta1 * *m + (1.0 - h.beta1) * g;
                *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + h.eps);
            });
    }
    Ok(())
}
