//! Lagrangian decomposition of the Planet relaxation.
//!
//! Layer variables are duplicated into copies A and B and their equality is
//! dualized with multipliers ρ. For any ρ the inner minimization decomposes
//! into independent subproblems — a box corner pick for the input and a
//! per-neuron vertex scan over the relaxation triangle (or segment) for each
//! hidden layer — so q(ρ) and its supergradient ẑ_B − ẑ_A come out in closed
//! form, and every q(ρ) is a sound output lower bound.

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::model::VerificationNetwork;
use crate::relax::{BoundsStack, Phase};

/// Lagrange multipliers, one vector per hidden layer `k = 1..=L-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub rho: Vec<Array1<f64>>,
}

impl DualState {
    pub fn zeros(net: &VerificationNetwork) -> Self {
        DualState {
            rho: (1..net.depth())
                .map(|k| Array1::zeros(net.layer_dim(k)))
                .collect(),
        }
    }

    pub fn check_shapes(&self, net: &VerificationNetwork) -> Result<()> {
        if self.rho.len() != net.depth() - 1 {
            return Err(Error::ShapeMismatch {
                context: "dual layers",
                expected: net.depth() - 1,
                found: self.rho.len(),
            });
        }
        for (k, r) in self.rho.iter().enumerate() {
            if r.len() != net.layer_dim(k + 1) {
                return Err(Error::ShapeMismatch {
                    context: "dual layer width",
                    expected: net.layer_dim(k + 1),
                    found: r.len(),
                });
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.rho.iter().all(|r| r.iter().all(|v| v.is_finite()))
    }
}

/// Closed-form minimizers of the decomposed objective plus the dual value.
#[derive(Debug, Clone)]
pub struct InnerSolution {
    /// Input box minimizer.
    pub z0: Array1<f64>,
    /// Copy-A minimizers ẑ_A,k per hidden layer.
    pub zhat_a: Vec<Array1<f64>>,
    /// Post-activation minimizers z_k of each hidden subproblem.
    pub z_post: Vec<Array1<f64>>,
    /// Copy-B values ẑ_B,k (affine image of the previous minimizer).
    pub zhat_b: Vec<Array1<f64>>,
    /// Final-layer value at the minimizer, W_L z_{L-1} + b_L.
    pub output: f64,
    /// Dual value q(ρ).
    pub q: f64,
}

/// Minimize the decomposed objective subproblem by subproblem.
///
/// Subproblem 0 puts each input coordinate at the box corner selected by the
/// sign of W_1ᵀρ_1 (exact zeros take the midpoint). Hidden subproblem k
/// minimizes `c·ẑ + d·z` with `c = −ρ_k` and `d = W_{k+1}ᵀρ_{k+1}` (output
/// weights for the last), scanning the triangle vertices {(0,0),(l,0),(u,u)}
/// for ambiguous neurons and the segment/floor endpoints otherwise; ties go
/// to the earliest vertex in that order, i.e. toward (0,0).
pub fn inner_minimize(
    net: &VerificationNetwork,
    stack: &BoundsStack,
    rho: &DualState,
) -> Result<InnerSolution> {
    rho.check_shapes(net)?;
    let depth = net.depth();
    let hidden = depth - 1;

    // d_k = W_{k+1}ᵀ ρ_{k+1}; the last uses the output row.
    let mut d: Vec<Array1<f64>> = Vec::with_capacity(hidden);
    for k in 1..=hidden {
        let (w_next, _) = net.layer_view(k + 1);
        if k == hidden {
            d.push(w_next.row(0).to_owned());
        } else {
            d.push(w_next.t().dot(&rho.rho[k]));
        }
    }

    // Subproblem 0: minimize ρ_1ᵀ(W_1 z_0 + b_1) over the input box.
    let (w1, b1) = net.layer_view(1);
    let coef = w1.t().dot(&rho.rho[0]);
    let mut z0 = Array1::zeros(net.input_dim());
    let mut q = rho.rho[0].dot(b1);
    for j in 0..z0.len() {
        z0[j] = if coef[j] > 0.0 {
            stack.input_lower[j]
        } else if coef[j] < 0.0 {
            stack.input_upper[j]
        } else {
            0.5 * (stack.input_lower[j] + stack.input_upper[j])
        };
        q += coef[j] * z0[j];
    }

    let mut zhat_a = Vec::with_capacity(hidden);
    let mut z_post = Vec::with_capacity(hidden);
    let mut zhat_b = Vec::with_capacity(hidden);

    let mut prev_post = z0.clone();
    for k in 1..=hidden {
        let (w_k, b_k) = net.layer_view(k);
        let zb = w_k.dot(&prev_post) + b_k;
        let n = net.layer_dim(k);
        let mut za = Array1::zeros(n);
        let mut zp = Array1::zeros(n);
        for j in 0..n {
            let c = -rho.rho[k - 1][j];
            let dj = d[k - 1][j];
            let (l, u) = (stack.lower(k)[j], stack.upper(k)[j]);
            let st = stack.relu_state(k, j);
            let vertices: &[(f64, f64)] = match st.phase {
                Phase::Ambiguous => &[(0.0, 0.0), (l, 0.0), (u, u)],
                Phase::Passing => &[(l, l), (u, u)],
                Phase::Blocked => &[(l, 0.0), (u, 0.0)],
            };
            let mut best = f64::INFINITY;
            let mut pick = vertices[0];
            for &(vz, vp) in vertices {
                let val = c * vz + dj * vp;
                if val < best {
                    best = val;
                    pick = (vz, vp);
                }
            }
            za[j] = pick.0;
            zp[j] = pick.1;
            q += best;
        }
        // Bias term of the affine map leaving this subproblem.
        if k < hidden {
            let (_, b_next) = net.layer_view(k + 1);
            q += rho.rho[k].dot(b_next);
        }
        zhat_a.push(za);
        zhat_b.push(zb);
        prev_post = zp.clone();
        z_post.push(zp);
    }

    let (w_out, b_out) = net.layer_view(depth);
    let output = w_out.row(0).dot(&z_post[hidden - 1]) + b_out[0];
    q += b_out[0];

    if !q.is_finite() {
        return Err(Error::NonFiniteDual);
    }
    Ok(InnerSolution {
        z0,
        zhat_a,
        z_post,
        zhat_b,
        output,
        q,
    })
}

/// Convenience wrapper returning only q(ρ).
pub fn dual_value(
    net: &VerificationNetwork,
    stack: &BoundsStack,
    rho: &DualState,
) -> Result<f64> {
    Ok(inner_minimize(net, stack, rho)?.q)
}

/// Supergradient of q at the solution: ẑ_B,k − ẑ_A,k per hidden layer.
pub fn supergradient(sol: &InnerSolution) -> Vec<Array1<f64>> {
    sol.zhat_a
        .iter()
        .zip(sol.zhat_b.iter())
        .map(|(a, b)| b - a)
        .collect()
}

/// Adam constants for supergradient ascent (step count and learning rate are
/// the caller's operating point).
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AscentResult {
    /// Final multipliers after the last step.
    pub rho: DualState,
    /// Best dual value seen anywhere along the trajectory.
    pub best_q: f64,
    /// Multipliers achieving `best_q`.
    pub best_rho: DualState,
}

/// Supergradient ascent on q with Adam-style steps.
pub fn supergradient_ascent(
    net: &VerificationNetwork,
    stack: &BoundsStack,
    rho0: &DualState,
    steps: usize,
    lr: f64,
) -> Result<AscentResult> {
    supergradient_ascent_with(net, stack, rho0, steps, lr, AdamConfig::default())
}

pub fn supergradient_ascent_with(
    net: &VerificationNetwork,
    stack: &BoundsStack,
    rho0: &DualState,
    steps: usize,
    lr: f64,
    adam: AdamConfig,
) -> Result<AscentResult> {
    let mut rho = rho0.clone();
    let mut sol = inner_minimize(net, stack, &rho)?;
    let mut best_q = sol.q;
    let mut best_rho = rho.clone();
    let mut m: Vec<Array1<f64>> = rho.rho.iter().map(|r| Array1::zeros(r.len())).collect();
    let mut v: Vec<Array1<f64>> = m.clone();
    for t in 1..=steps {
        let g = supergradient(&sol);
        let bc1 = 1.0 - adam.beta1.powi(t as i32);
        let bc2 = 1.0 - adam.beta2.powi(t as i32);
        for k in 0..rho.rho.len() {
            for j in 0..rho.rho[k].len() {
                let gj = g[k][j];
                m[k][j] = adam.beta1 * m[k][j] + (1.0 - adam.beta1) * gj;
                v[k][j] = adam.beta2 * v[k][j] + (1.0 - adam.beta2) * gj * gj;
                let mhat = m[k][j] / bc1;
                let vhat = v[k][j] / bc2;
                rho.rho[k][j] += lr * mhat / (vhat.sqrt() + adam.eps);
            }
        }
        if !rho.is_finite() {
            return Err(Error::NonFiniteDual);
        }
        sol = inner_minimize(net, stack, &rho)?;
        if sol.q > best_q {
            best_q = sol.q;
            best_rho = rho.clone();
        }
    }
    Ok(AscentResult {
        rho,
        best_q,
        best_rho,
    })
}

/// Plain (non-Adam) supergradient ascent with caller-supplied step sizes,
/// recording the full trajectory. Used to cross-check that the bounding GNN
/// with the identity construction reproduces this trajectory exactly.
#[derive(Debug, Clone)]
pub struct PlainAscentTrace {
    pub rho: DualState,
    pub best_q: f64,
    /// ρ after each update, t = 1..=steps.
    pub rho_trajectory: Vec<DualState>,
    /// q(ρ^t) after each update.
    pub q_trajectory: Vec<f64>,
}

pub fn plain_ascent<F: Fn(usize) -> f64>(
    net: &VerificationNetwork,
    stack: &BoundsStack,
    rho0: &DualState,
    steps: usize,
    step_size: F,
) -> Result<PlainAscentTrace> {
    let mut rho = rho0.clone();
    let mut sol = inner_minimize(net, stack, &rho)?;
    let mut best_q = sol.q;
    let mut rho_trajectory = Vec::with_capacity(steps);
    let mut q_trajectory = Vec::with_capacity(steps);
    for t in 1..=steps {
        let g = supergradient(&sol);
        let eta = step_size(t);
        for k in 0..rho.rho.len() {
            rho.rho[k].scaled_add(eta, &g[k]);
        }
        if !rho.is_finite() {
            return Err(Error::NonFiniteDual);
        }
        sol = inner_minimize(net, stack, &rho)?;
        best_q = best_q.max(sol.q);
        rho_trajectory.push(rho.clone());
        q_trajectory.push(sol.q);
    }
    Ok(PlainAscentTrace {
        rho,
        best_q,
        rho_trajectory,
        q_trajectory,
    })
}
