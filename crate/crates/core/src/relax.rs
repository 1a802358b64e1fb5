//! Sound intermediate bounds and per-neuron ReLU relaxation quantities.
//!
//! Two intermediate bound methods are provided: plain interval propagation
//! and a linear backward propagation that pushes coefficient vectors through
//! single-slope ReLU envelopes (upper envelope `α·ẑ + β`, lower envelope
//! `α·ẑ`) down to the input box. Backward bounds are always intersected with
//! the interval bounds, so they are at least as tight by construction.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InputDomain, VerificationNetwork};

/// Phase of a ReLU given its pre-activation bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Blocked,
    Passing,
    Ambiguous,
}

/// Gate ratio α, relaxation intercept β and phase for one neuron.
#[derive(Debug, Clone, Copy)]
pub struct ReluState {
    pub phase: Phase,
    pub alpha: f64,
    pub beta: f64,
}

/// Relaxation quantities for pre-activation bounds `[l, u]`.
///
/// Blocked (`u <= 0`): α = 0, β = 0. Passing (`l >= 0`): α = 1, β = 0.
/// Ambiguous (`l < 0 < u`): α = u/(u−l), β = −l·u/(u−l). Degenerate `l = u`
/// neurons are classified by the sign of `u` with β = 0 from the limit.
pub fn relu_quantities(l: f64, u: f64) -> Result<ReluState> {
    if l > u {
        return Err(Error::InconsistentSplit(format!("bounds crossed: l={l} > u={u}")));
    }
    if u <= 0.0 {
        Ok(ReluState { phase: Phase::Blocked, alpha: 0.0, beta: 0.0 })
    } else if l >= 0.0 {
        Ok(ReluState { phase: Phase::Passing, alpha: 1.0, beta: 0.0 })
    } else {
        let alpha = u / (u - l);
        let beta = -l * u / (u - l);
        Ok(ReluState { phase: Phase::Ambiguous, alpha, beta })
    }
}

/// Which side of zero a split fixes a neuron to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSign {
    Active,
    Inactive,
}

/// A consistent set of ReLU split decisions, keyed by (layer, neuron) with
/// layers 1-based. At most one decision per neuron can be represented.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitSet {
    map: BTreeMap<(usize, usize), SplitSign>,
}

impl SplitSet {
    pub fn new() -> Self {
        SplitSet::default()
    }

    /// Add a decision; rejects a contradictory decision on the same neuron.
    pub fn insert(&mut self, layer: usize, index: usize, sign: SplitSign) -> Result<()> {
        match self.map.get(&(layer, index)) {
            Some(existing) if *existing != sign => Err(Error::InconsistentSplit(format!(
                "neuron ({layer},{index}) split both active and inactive"
            ))),
            _ => {
                self.map.insert((layer, index), sign);
                Ok(())
            }
        }
    }

    pub fn get(&self, layer: usize, index: usize) -> Option<SplitSign> {
        self.map.get(&(layer, index)).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, SplitSign)> + '_ {
        self.map.iter().map(|(&(l, i), &s)| (l, i, s))
    }

    fn validate(&self, net: &VerificationNetwork) -> Result<()> {
        for ((layer, index), _) in self.map.iter() {
            if *layer == 0 || *layer >= net.depth() {
                return Err(Error::InconsistentSplit(format!(
                    "split layer {layer} outside hidden range 1..{}",
                    net.depth() - 1
                )));
            }
            if *index >= net.layer_dim(*layer) {
                return Err(Error::InconsistentSplit(format!(
                    "split index {index} out of range for layer {layer}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-layer pre-activation bounds `l_k <= ẑ_k <= u_k` for `k = 1..=L`, plus
/// the input box.
#[derive(Debug, Clone)]
pub struct BoundsStack {
    pub input_lower: Array1<f64>,
    pub input_upper: Array1<f64>,
    lower: Vec<Array1<f64>>,
    upper: Vec<Array1<f64>>,
}

impl BoundsStack {
    /// Rebuild a stack from stored bounds (dataset records).
    pub fn from_parts(
        input_lower: Array1<f64>,
        input_upper: Array1<f64>,
        lower: Vec<Array1<f64>>,
        upper: Vec<Array1<f64>>,
    ) -> BoundsStack {
        let stack = BoundsStack {
            input_lower,
            input_upper,
            lower,
            upper,
        };
        stack.check_sorted();
        stack
    }

    pub fn depth(&self) -> usize {
        self.lower.len()
    }

    /// Lower bounds of layer `k` (1-based).
    pub fn lower(&self, k: usize) -> &Array1<f64> {
        &self.lower[k - 1]
    }

    pub fn upper(&self, k: usize) -> &Array1<f64> {
        &self.upper[k - 1]
    }

    pub fn output_lower(&self) -> f64 {
        self.lower[self.lower.len() - 1][0]
    }

    pub fn output_upper(&self) -> f64 {
        self.upper[self.upper.len() - 1][0]
    }

    pub fn relu_state(&self, k: usize, j: usize) -> ReluState {
        relu_quantities(self.lower[k - 1][j], self.upper[k - 1][j])
            .expect("stack invariant: lower <= upper")
    }

    /// Ambiguous neurons of the hidden layers, in (layer, index) order.
    pub fn ambiguous_neurons(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for k in 1..self.depth() {
            let (l, u) = (&self.lower[k - 1], &self.upper[k - 1]);
            for j in 0..l.len() {
                if l[j] < 0.0 && u[j] > 0.0 {
                    out.push((k, j));
                }
            }
        }
        out
    }

    fn check_sorted(&self) {
        for (l, u) in self.lower.iter().zip(self.upper.iter()) {
            debug_assert!(l.iter().zip(u.iter()).all(|(a, b)| a <= b));
        }
    }
}

/// Intermediate-bound method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMethod {
    Interval,
    LinearBackward,
}

fn clamp_split(l: &mut f64, u: &mut f64, sign: SplitSign) {
    match sign {
        SplitSign::Active => {
            *l = l.max(0.0);
            *u = u.max(0.0);
        }
        SplitSign::Inactive => {
            *u = u.min(0.0);
            *l = l.min(0.0);
        }
    }
}

/// Layer-by-layer interval arithmetic. Split neurons have their interval
/// clamped before further propagation.
pub fn interval_bounds(
    net: &VerificationNetwork,
    domain: &InputDomain,
    splits: &SplitSet,
) -> Result<BoundsStack> {
    splits.validate(net)?;
    if domain.dim() != net.input_dim() {
        return Err(Error::ShapeMismatch {
            context: "domain",
            expected: net.input_dim(),
            found: domain.dim(),
        });
    }
    let depth = net.depth();
    let mut lower = Vec::with_capacity(depth);
    let mut upper = Vec::with_capacity(depth);
    let mut zl = domain.lower.clone();
    let mut zu = domain.upper.clone();
    for k in 1..=depth {
        let (w, b) = net.layer_view(k);
        let n = w.nrows();
        let mut pl = Array1::zeros(n);
        let mut pu = Array1::zeros(n);
        for j in 0..n {
            let mut lo = b[j];
            let mut hi = b[j];
            for (i, &wij) in w.row(j).iter().enumerate() {
                if wij >= 0.0 {
                    lo += wij * zl[i];
                    hi += wij * zu[i];
                } else {
                    lo += wij * zu[i];
                    hi += wij * zl[i];
                }
            }
            pl[j] = lo;
            pu[j] = hi;
            if let Some(sign) = splits.get(k, j) {
                clamp_split(&mut pl[j], &mut pu[j], sign);
            }
        }
        if k < depth {
            zl = pl.mapv(|v| v.max(0.0));
            zu = pu.mapv(|v| v.max(0.0));
        }
        lower.push(pl);
        upper.push(pu);
    }
    let stack = BoundsStack {
        input_lower: domain.lower.clone(),
        input_upper: domain.upper.clone(),
        lower,
        upper,
    };
    stack.check_sorted();
    Ok(stack)
}

/// Backward-propagated bounds for layer `k`, using the ReLU states of the
/// already-finalized layers `1..k-1` in `stack`. Also returns the coefficient
/// matrix on the input, which callers use to pick minimizing corners.
fn backward_layer_bounds(
    net: &VerificationNetwork,
    domain: &InputDomain,
    stack_lower: &[Array1<f64>],
    stack_upper: &[Array1<f64>],
    k: usize,
) -> (Array1<f64>, Array1<f64>, Array2<f64>) {
    let (w_k, b_k) = net.layer_view(k);
    let mut coeff = w_k.clone(); // on z_{m}, starting at m = k-1
    let mut c_lo = b_k.clone();
    let mut c_up = b_k.clone();
    for m in (1..k).rev() {
        // Relax z_m in terms of ẑ_m: both envelopes share slope α; only the
        // constants differ (β enters the upper side for positive coefficients
        // and the lower side for negative ones).
        for j in 0..coeff.ncols() {
            let st = relu_quantities(stack_lower[m - 1][j], stack_upper[m - 1][j])
                .expect("finalized bounds are sorted");
            for i in 0..coeff.nrows() {
                let a = coeff[(i, j)];
                if a > 0.0 {
                    c_up[i] += a * st.beta;
                } else if a < 0.0 {
                    c_lo[i] += a * st.beta;
                }
                coeff[(i, j)] = a * st.alpha;
            }
        }
        // Substitute ẑ_m = W_m z_{m-1} + b_m.
        let (w_m, b_m) = net.layer_view(m);
        let shift = coeff.dot(b_m);
        c_lo += &shift;
        c_up += &shift;
        coeff = coeff.dot(w_m);
    }
    // Optimize the affine expression over the input box.
    let n = coeff.nrows();
    let mut lo = Array1::zeros(n);
    let mut hi = Array1::zeros(n);
    for i in 0..n {
        let mut acc_lo = c_lo[i];
        let mut acc_hi = c_up[i];
        for (j, &a) in coeff.row(i).iter().enumerate() {
            if a >= 0.0 {
                acc_lo += a * domain.lower[j];
                acc_hi += a * domain.upper[j];
            } else {
                acc_lo += a * domain.upper[j];
                acc_hi += a * domain.lower[j];
            }
        }
        lo[i] = acc_lo;
        hi[i] = acc_hi;
    }
    (lo, hi, coeff)
}

/// Linear backward bounds, layer by layer, intersected with interval bounds.
pub fn linear_backward_bounds(
    net: &VerificationNetwork,
    domain: &InputDomain,
    splits: &SplitSet,
) -> Result<BoundsStack> {
    let ib = interval_bounds(net, domain, splits)?;
    let depth = net.depth();
    let mut lower: Vec<Array1<f64>> = Vec::with_capacity(depth);
    let mut upper: Vec<Array1<f64>> = Vec::with_capacity(depth);
    for k in 1..=depth {
        let (mut lo, mut hi, _) = backward_layer_bounds(net, domain, &lower, &upper, k);
        for j in 0..lo.len() {
            lo[j] = lo[j].max(ib.lower(k)[j]);
            hi[j] = hi[j].min(ib.upper(k)[j]);
            if let Some(sign) = splits.get(k, j) {
                clamp_split(&mut lo[j], &mut hi[j], sign);
            }
            // Crossed bounds signal an empty region (or float noise at its
            // boundary); widen back to a sound point interval.
            if lo[j] > hi[j] {
                hi[j] = lo[j];
            }
        }
        lower.push(lo);
        upper.push(hi);
    }
    let stack = BoundsStack {
        input_lower: domain.lower.clone(),
        input_upper: domain.upper.clone(),
        lower,
        upper,
    };
    stack.check_sorted();
    Ok(stack)
}

pub fn compute_stack(
    net: &VerificationNetwork,
    domain: &InputDomain,
    splits: &SplitSet,
    method: BoundMethod,
) -> Result<BoundsStack> {
    match method {
        BoundMethod::Interval => interval_bounds(net, domain, splits),
        BoundMethod::LinearBackward => linear_backward_bounds(net, domain, splits),
    }
}

/// Refresh a parent stack after one new split.
///
/// The split neuron's bound is clamped at zero; layers strictly after the
/// split layer are recomputed with backward propagation (earlier layers
/// retain the parent bounds) and every layer is intersected with the parent,
/// so the child is element-wise at least as tight. `full_recompute` instead
/// rebuilds the whole stack from scratch.
pub fn refresh_after_split(
    net: &VerificationNetwork,
    domain: &InputDomain,
    parent: &BoundsStack,
    child_splits: &SplitSet,
    new_split: (usize, usize, SplitSign),
    full_recompute: bool,
) -> Result<BoundsStack> {
    let (layer, index, sign) = new_split;
    if layer == 0 || layer >= net.depth() || index >= net.layer_dim(layer) {
        return Err(Error::NonAmbiguousSplit { layer, index });
    }
    let (pl, pu) = (parent.lower(layer)[index], parent.upper(layer)[index]);
    if !(pl < 0.0 && pu > 0.0) {
        return Err(Error::NonAmbiguousSplit { layer, index });
    }

    if full_recompute {
        let fresh = linear_backward_bounds(net, domain, child_splits)?;
        let mut child = fresh;
        for k in 1..=net.depth() {
            for j in 0..child.lower[k - 1].len() {
                child.lower[k - 1][j] = child.lower[k - 1][j].max(parent.lower(k)[j]);
                child.upper[k - 1][j] = child.upper[k - 1][j].min(parent.upper(k)[j]);
                if child.lower[k - 1][j] > child.upper[k - 1][j] {
                    child.upper[k - 1][j] = child.lower[k - 1][j];
                }
            }
        }
        child.check_sorted();
        return Ok(child);
    }

    let ib = interval_bounds(net, domain, child_splits)?;
    let mut child = parent.clone();
    {
        let (l, u) = (
            &mut child.lower[layer - 1][index],
            &mut child.upper[layer - 1][index],
        );
        clamp_split(l, u, sign);
    }
    for k in (layer + 1)..=net.depth() {
        let (lo, hi, _) = backward_layer_bounds(net, domain, &child.lower, &child.upper, k);
        for j in 0..lo.len() {
            let mut l = lo[j].max(ib.lower(k)[j]).max(parent.lower(k)[j]);
            let mut u = hi[j].min(ib.upper(k)[j]).min(parent.upper(k)[j]);
            if let Some(s) = child_splits.get(k, j) {
                clamp_split(&mut l, &mut u, s);
            }
            if l > u {
                u = l;
            }
            child.lower[k - 1][j] = l;
            child.upper[k - 1][j] = u;
        }
    }
    child.check_sorted();
    Ok(child)
}

/// Backward coefficient of each hidden neuron's post-activation value on the
/// output, propagated through the single-slope relaxation. `result[k-1][j]`
/// is the coefficient for neuron (k, j).
pub fn backward_output_coefficients(
    net: &VerificationNetwork,
    stack: &BoundsStack,
) -> Vec<Array1<f64>> {
    let depth = net.depth();
    let mut lambdas: Vec<Array1<f64>> = vec![Array1::zeros(0); depth - 1];
    let (w_l, _) = net.layer_view(depth);
    let mut coeff: Array1<f64> = w_l.row(0).to_owned(); // on z_{L-1}
    for m in (1..depth).rev() {
        lambdas[m - 1] = coeff.clone();
        if m > 1 {
            let mut scaled = coeff.clone();
            for j in 0..scaled.len() {
                scaled[j] *= stack.relu_state(m, j).alpha;
            }
            let (w_m, _) = net.layer_view(m);
            coeff = scaled.dot(w_m);
        }
    }
    lambdas
}

/// Output lower bound by backward propagation plus the input-box corner that
/// attains it (ties resolved to the midpoint coordinate).
pub fn output_lower_corner(
    net: &VerificationNetwork,
    domain: &InputDomain,
    stack: &BoundsStack,
) -> (f64, Array1<f64>) {
    let depth = net.depth();
    let (lo, _, coeff) =
        backward_layer_bounds(net, domain, &stack.lower, &stack.upper, depth);
    let mut corner = Array1::zeros(domain.dim());
    for j in 0..domain.dim() {
        let a = coeff[(0, j)];
        corner[j] = if a > 0.0 {
            domain.lower[j]
        } else if a < 0.0 {
            domain.upper[j]
        } else {
            0.5 * (domain.lower[j] + domain.upper[j])
        };
    }
    (lo[0], corner)
}
