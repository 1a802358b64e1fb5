//! The bounding GNN: one node per dual variable, 4-dimensional features
//! (ρ, ẑ_A, ẑ_B, ẑ_B−ẑ_A), an init MLP, and three-term forward/backward
//! passes with neighbour normalization. Each iteration emits a dual ascent
//! direction; the bound that is reported is always q(ρ) for a concrete ρ,
//! so soundness never depends on the quality of the learned model.
//!
//! Training unrolls the update loop and minimizes a decayed sum of dual
//! values, truncated per sample once the final value beats the supergradient
//! reference plus a slack κ. Backpropagation treats the inner-minimization
//! outputs as constants (they are piecewise constant in ρ, so this is the
//! exact gradient almost everywhere) while the ρ-feature path flows.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dual::{inner_minimize, supergradient, DualState, InnerSolution};
use crate::error::{Error, Result};
use crate::gnn::{
    adam_step, load_params, save_params, AdamState, ArchitectureMeta, Gradients, Mlp, ParamSet,
    Tape, Var,
};
use crate::model::{Layer, VerificationNetwork};
use crate::relax::BoundsStack;

/// Embedding dimension p.
pub const BOUND_EMBEDDING_DIM: usize = 32;
/// Init-MLP depth parameter T1 (the MLP has T1+1 linear layers).
pub const BOUND_INIT_DEPTH: usize = 1;
/// Forward/backward pass rounds T2.
pub const BOUND_PASSES: usize = 1;
/// Feature dimension per dual node.
pub const BOUND_FEATURES: usize = 4;
/// Default initial step size μ of the dual update.
pub const DEFAULT_ETA0: f64 = 1e-3;
/// Iterations of the GNN loop at verification time.
pub const DEFAULT_GNN_ITERS: usize = 100;
/// Absolute fail-safe threshold (base-model operating point).
pub const DEFAULT_BOUND_FAILSAFE: f64 = 0.05;

/// Step-size schedule for the dual update. The decaying form is the default;
/// the growing form is selectable for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    /// η_t = η₀ / √t
    DecaySqrt,
    /// η_t = η₀ · √t
    GrowSqrt,
}

pub fn step_size(schedule: StepSchedule, eta0: f64, t: usize) -> f64 {
    match schedule {
        StepSchedule::DecaySqrt => eta0 / (t as f64).sqrt(),
        StepSchedule::GrowSqrt => eta0 * (t as f64).sqrt(),
    }
}

/// Learnable parameters: init MLP, three forward and three backward pass
/// matrices, and the scoring vector.
#[derive(Debug, Clone)]
pub struct BoundGnnParameters {
    pub params: ParamSet,
    pub p: usize,
    pub t1: usize,
    pub t2: usize,
    init: Mlp,
    fwd: [usize; 3],
    bwd: [usize; 3],
    score: usize,
}

impl BoundGnnParameters {
    pub fn init(seed: u64) -> Self {
        Self::init_with(seed, BOUND_EMBEDDING_DIM, BOUND_INIT_DEPTH, BOUND_PASSES)
    }

    pub fn init_with(seed: u64, p: usize, t1: usize, t2: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut dims = vec![BOUND_FEATURES];
        dims.extend(std::iter::repeat(p).take(t1 + 1));
        let init = Mlp::register(&mut params, "init", &dims, false, &mut rng);
        let bound = 1.0 / (p as f64).sqrt();
        let mat = |params: &mut ParamSet, name: &str, rng: &mut ChaCha8Rng| {
            params.push(
                name,
                Array2::from_shape_fn((p, p), |_| {
                    rand::Rng::gen_range(rng, -bound..bound)
                }),
            )
        };
        let fwd = [
            mat(&mut params, "fwd1", &mut rng),
            mat(&mut params, "fwd2", &mut rng),
            mat(&mut params, "fwd3", &mut rng),
        ];
        let bwd = [
            mat(&mut params, "bwd1", &mut rng),
            mat(&mut params, "bwd2", &mut rng),
            mat(&mut params, "bwd3", &mut rng),
        ];
        let score = params.push(
            "score",
            Array2::from_shape_fn((1, p), |_| rand::Rng::gen_range(&mut rng, -bound..bound)),
        );
        BoundGnnParameters {
            params,
            p,
            t1,
            t2,
            init,
            fwd,
            bwd,
            score,
        }
    }

    /// The identity construction: Θ₀ maps the supergradient feature to
    /// (x₊, (−x)₊), the passes are identities, and the score vector
    /// recombines x₊ − (−x)₊ = x, so every update direction equals the
    /// supergradient exactly.
    pub fn prop1_parameters(p: usize) -> Result<Self> {
        if p < 2 {
            return Err(Error::ArchitectureMismatch(
                "identity construction needs p >= 2".into(),
            ));
        }
        let mut gnn = Self::init_with(0, p, 1, BOUND_PASSES);
        for t in gnn.params.tensors.iter_mut() {
            t.value.fill(0.0);
        }
        let (w0, _b0) = gnn.init.layers[0];
        gnn.params.value_mut(w0)[(0, 3)] = 1.0;
        gnn.params.value_mut(w0)[(1, 3)] = -1.0;
        let (w1, _b1) = gnn.init.layers[1];
        for i in 0..p {
            gnn.params.value_mut(w1)[(i, i)] = 1.0;
        }
        for i in 0..p {
            gnn.params.value_mut(gnn.fwd[0])[(i, i)] = 1.0;
            gnn.params.value_mut(gnn.bwd[0])[(i, i)] = 1.0;
        }
        gnn.params.value_mut(gnn.score)[(0, 0)] = 1.0;
        gnn.params.value_mut(gnn.score)[(0, 1)] = -1.0;
        Ok(gnn)
    }

    pub fn meta(&self) -> ArchitectureMeta {
        let mut feature_dims = std::collections::BTreeMap::new();
        feature_dims.insert("dual".into(), BOUND_FEATURES);
        ArchitectureMeta {
            variant: "bound".into(),
            embedding_dim: self.p,
            init_depth: self.t1,
            passes: self.t2,
            feature_dims,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_params(path, &self.meta(), &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (meta, params) = load_params(path)?;
        if meta.variant != "bound" {
            return Err(Error::ArchitectureMismatch(format!(
                "expected bound parameters, found {}",
                meta.variant
            )));
        }
        let mut fresh = Self::init_with(0, meta.embedding_dim, meta.init_depth, meta.passes);
        if fresh.params.len() != params.len() {
            return Err(Error::ArchitectureMismatch("tensor count mismatch".into()));
        }
        for (a, b) in fresh.params.tensors.iter().zip(params.tensors.iter()) {
            if a.name != b.name || a.value.dim() != b.value.dim() {
                return Err(Error::ArchitectureMismatch(format!(
                    "tensor {} has unexpected shape",
                    b.name
                )));
            }
        }
        fresh.params = params;
        Ok(fresh)
    }
}

/// Per-dual-node features, one matrix per hidden layer.
#[derive(Debug, Clone)]
pub struct BoundFeatures {
    pub layers: Vec<Array2<f64>>,
}

pub fn build_bound_features(rho: &DualState, sol: &InnerSolution) -> BoundFeatures {
    let layers = rho
        .rho
        .iter()
        .zip(sol.zhat_a.iter().zip(sol.zhat_b.iter()))
        .map(|(r, (za, zb))| {
            let n = r.len();
            let mut f = Array2::zeros((n, BOUND_FEATURES));
            for j in 0..n {
                f[(j, 0)] = r[j];
                f[(j, 1)] = za[j];
                f[(j, 2)] = zb[j];
                f[(j, 3)] = zb[j] - za[j];
            }
            f
        })
        .collect();
    BoundFeatures { layers }
}

/// Structural neighbour-count normalizers Q (previous layer) and Q' (next
/// layer) per dual node, as row-normalized averaging matrices.
#[derive(Debug, Clone)]
pub struct NeighborCounts {
    /// avg_prev[k-1]: (n_k × n_{k-1}) for the map into hidden layer k ≥ 2.
    pub avg_prev: Vec<Array2<f64>>,
    /// avg_next[k-1]: (n_k × n_{k+1}) for the map out of hidden layer k.
    pub avg_next: Vec<Array2<f64>>,
}

fn connects(layer: &Layer, out_idx: usize, in_idx: usize) -> bool {
    match layer {
        Layer::Dense(_) => true,
        Layer::Conv2d(c) => {
            let [_, h, w] = c.in_shape;
            let [_, oh, ow] = c.out_shape();
            let (_, _, kh, kw) = c.kernel.dim();
            let spatial_out = out_idx % (oh * ow);
            let (oy, ox) = (spatial_out / ow, spatial_out % ow);
            let spatial_in = in_idx % (h * w);
            let (iy, ix) = (spatial_in / w, spatial_in % w);
            let ky = iy as isize + c.padding as isize - (oy * c.stride) as isize;
            let kx = ix as isize + c.padding as isize - (ox * c.stride) as isize;
            ky >= 0 && kx >= 0 && (ky as usize) < kh && (kx as usize) < kw
        }
    }
}

fn averaging_matrix(layer: &Layer, transpose: bool) -> Array2<f64> {
    let (rows, cols) = if transpose {
        (layer.in_dim(), layer.out_dim())
    } else {
        (layer.out_dim(), layer.in_dim())
    };
    let mut m = Array2::zeros((rows, cols));
    for r in 0..rows {
        let mut count = 0usize;
        for c in 0..cols {
            let conn = if transpose {
                connects(layer, c, r)
            } else {
                connects(layer, r, c)
            };
            if conn {
                m[(r, c)] = 1.0;
                count += 1;
            }
        }
        if count > 0 {
            let inv = 1.0 / count as f64;
            for c in 0..cols {
                m[(r, c)] *= inv;
            }
        }
    }
    m
}

impl NeighborCounts {
    pub fn build(net: &VerificationNetwork) -> Self {
        let hidden = net.depth() - 1;
        let mut avg_prev = Vec::with_capacity(hidden);
        let mut avg_next = Vec::with_capacity(hidden);
        for k in 1..=hidden {
            if k >= 2 {
                avg_prev.push(averaging_matrix(&net.layers()[k - 1], false));
            } else {
                avg_prev.push(Array2::zeros((net.layer_dim(1), 0)));
            }
            if k + 1 <= hidden {
                avg_next.push(averaging_matrix(&net.layers()[k], true));
            } else {
                avg_next.push(Array2::zeros((net.layer_dim(k), 0)));
            }
        }
        NeighborCounts { avg_prev, avg_next }
    }
}

struct BoundTapeState {
    /// One embedding matrix per hidden layer.
    layers: Vec<Var>,
}

/// Outer product b·1ᵀ broadcast of a bias column over p embedding columns.
fn bias_broadcast(b: &Array1<f64>, p: usize) -> Array2<f64> {
    let mut m = Array2::zeros((b.len(), p));
    for (j, &v) in b.iter().enumerate() {
        m.row_mut(j).fill(v);
    }
    m
}

fn init_embed_on_tape(
    tape: &mut Tape,
    gnn: &BoundGnnParameters,
    features: &BoundFeatures,
    rho_inputs: Option<&[Var]>,
) -> Result<BoundTapeState> {
    let mut layers = Vec::with_capacity(features.layers.len());
    for (k, f) in features.layers.iter().enumerate() {
        let feat = match rho_inputs {
            Some(inputs) => {
                let rest = tape.constant(f.slice(ndarray::s![.., 1..]).to_owned());
                tape.concat_cols(inputs[k], rest)
            }
            None => tape.constant(f.clone()),
        };
        layers.push(crate::gnn::mlp_forward(tape, &gnn.params, &gnn.init, feat)?);
    }
    Ok(BoundTapeState { layers })
}

fn passes_on_tape(
    tape: &mut Tape,
    gnn: &BoundGnnParameters,
    net: &VerificationNetwork,
    counts: &NeighborCounts,
    state: &mut BoundTapeState,
) -> Result<()> {
    let hidden = net.depth() - 1;
    for _ in 0..gnn.t2 {
        // Forward sweep: dual layers 2..=L-1 pull from the layer below.
        for k in 2..=hidden {
            let (w, b) = net.layer_view(k);
            let f1 = tape.param(gnn.fwd[0], gnn.params.value(gnn.fwd[0]).clone());
            let f2 = tape.param(gnn.fwd[1], gnn.params.value(gnn.fwd[1]).clone());
            let f3 = tape.param(gnn.fwd[2], gnn.params.value(gnn.fwd[2]).clone());
            let term1 = tape.matmul_nt(state.layers[k - 1], f1);
            let w_const = tape.constant(w.clone());
            let wm = tape.matmul(w_const, state.layers[k - 2]);
            let bb = tape.constant(bias_broadcast(b, gnn.p));
            let wmb = tape.add(wm, bb);
            let term2 = tape.matmul_nt(wmb, f2);
            let avg = tape.constant(counts.avg_prev[k - 1].clone());
            let av = tape.matmul(avg, state.layers[k - 2]);
            let term3 = tape.matmul_nt(av, f3);
            let s = tape.add(term1, term2);
            let s = tape.add(s, term3);
            state.layers[k - 1] = tape.relu(s);
        }
        // Backward sweep: dual layers L-2..=1 pull from the layer above.
        for k in (1..hidden).rev() {
            let (w_next, b_next) = net.layer_view(k + 1);
            let b1 = tape.param(gnn.bwd[0], gnn.params.value(gnn.bwd[0]).clone());
            let b2 = tape.param(gnn.bwd[1], gnn.params.value(gnn.bwd[1]).clone());
            let b3 = tape.param(gnn.bwd[2], gnn.params.value(gnn.bwd[2]).clone());
            let term1 = tape.matmul_nt(state.layers[k - 1], b1);
            let neg_bias = tape.constant(bias_broadcast(&(-b_next), gnn.p));
            let shifted = tape.add(state.layers[k], neg_bias);
            let w_t = tape.constant(w_next.t().to_owned());
            let wm = tape.matmul(w_t, shifted);
            let term2 = tape.matmul_nt(wm, b2);
            let avg = tape.constant(counts.avg_next[k - 1].clone());
            let av = tape.matmul(avg, state.layers[k]);
            let term3 = tape.matmul_nt(av, b3);
            let s = tape.add(term1, term2);
            let s = tape.add(s, term3);
            state.layers[k - 1] = tape.relu(s);
        }
    }
    Ok(())
}

fn direction_on_tape(
    tape: &mut Tape,
    gnn: &BoundGnnParameters,
    state: &BoundTapeState,
) -> Vec<Var> {
    state
        .layers
        .iter()
        .map(|&m| {
            let theta = tape.param(gnn.score, gnn.params.value(gnn.score).clone());
            tape.matmul_nt(m, theta)
        })
        .collect()
}

/// Initial embeddings per dual node (inference view of the init MLP).
pub fn bound_init_embed(
    features: &BoundFeatures,
    gnn: &BoundGnnParameters,
) -> Result<Vec<Array2<f64>>> {
    let mut tape = Tape::new();
    let state = init_embed_on_tape(&mut tape, gnn, features, None)?;
    Ok(state
        .layers
        .iter()
        .map(|v| tape.value(*v).clone())
        .collect())
}

/// T2 rounds of forward/backward passes over given embeddings.
pub fn bound_forward_backward(
    embeddings: &[Array2<f64>],
    net: &VerificationNetwork,
    gnn: &BoundGnnParameters,
    counts: &NeighborCounts,
) -> Result<Vec<Array2<f64>>> {
    let mut tape = Tape::new();
    let mut state = BoundTapeState {
        layers: embeddings.iter().map(|e| tape.constant(e.clone())).collect(),
    };
    passes_on_tape(&mut tape, gnn, net, counts, &mut state)?;
    Ok(state
        .layers
        .iter()
        .map(|v| tape.value(*v).clone())
        .collect())
}

/// Per-node inner product with the score vector: the dual ascent direction.
pub fn bound_output_duals(
    embeddings: &[Array2<f64>],
    gnn: &BoundGnnParameters,
) -> Vec<Array1<f64>> {
    let theta = gnn.params.value(gnn.score);
    embeddings
        .iter()
        .map(|m| {
            Array1::from_iter(
                m.rows()
                    .into_iter()
                    .map(|row| row.iter().zip(theta.row(0)).map(|(a, b)| a * b).sum()),
            )
        })
        .collect()
}

/// ρ′ = ρ + η_t · direction.
pub fn dual_update(
    rho: &DualState,
    direction: &[Array1<f64>],
    t: usize,
    eta0: f64,
    schedule: StepSchedule,
) -> DualState {
    let eta = step_size(schedule, eta0, t);
    DualState {
        rho: rho
            .rho
            .iter()
            .zip(direction.iter())
            .map(|(r, d)| r + &(d * eta))
            .collect(),
    }
}

fn infer_direction(
    gnn: &BoundGnnParameters,
    net: &VerificationNetwork,
    counts: &NeighborCounts,
    features: &BoundFeatures,
) -> Result<Vec<Array1<f64>>> {
    let mut tape = Tape::new();
    let mut state = init_embed_on_tape(&mut tape, gnn, features, None)?;
    passes_on_tape(&mut tape, gnn, net, counts, &mut state)?;
    let dirs = direction_on_tape(&mut tape, gnn, &state);
    Ok(dirs
        .iter()
        .map(|v| tape.value(*v).column(0).to_owned())
        .collect())
}

#[derive(Debug, Clone)]
pub struct BoundSolveOutcome {
    pub rho: DualState,
    pub best_q: f64,
    /// q(ρ^t) after each update, t = 1..=iters.
    pub q_trajectory: Vec<f64>,
    /// ρ^t after each update.
    pub rho_trajectory: Vec<DualState>,
}

/// The iterative bounding loop: features → embeddings → passes → direction →
/// dual update → dual value. Returns the best q seen; every reported bound
/// is q(ρ) for a concrete ρ and therefore sound.
pub fn gnn_bound_solve(
    net: &VerificationNetwork,
    stack: &BoundsStack,
    rho0: &DualState,
    gnn: &BoundGnnParameters,
    iters: usize,
    eta0: f64,
    schedule: StepSchedule,
) -> Result<BoundSolveOutcome> {
    let counts = NeighborCounts::build(net);
    let mut rho = rho0.clone();
    let mut sol = inner_minimize(net, stack, &rho)?;
    let mut best_q = sol.q;
    let mut q_trajectory = Vec::with_capacity(iters);
    let mut rho_trajectory = Vec::with_capacity(iters);
    for t in 1..=iters {
        let features = build_bound_features(&rho, &sol);
        let direction = infer_direction(gnn, net, &counts, &features)?;
        rho = dual_update(&rho, &direction, t, eta0, schedule);
        if !rho.is_finite() {
            return Err(Error::NonFiniteDual);
        }
        sol = inner_minimize(net, stack, &rho)?;
        best_q = best_q.max(sol.q);
        q_trajectory.push(sol.q);
        rho_trajectory.push(rho.clone());
    }
    Ok(BoundSolveOutcome {
        rho,
        best_q,
        q_trajectory,
        rho_trajectory,
    })
}

/// Truncated decayed loss of one sample's q trajectory:
/// −Σ_t q(ρ^t)·γ^t, gated out entirely once q(ρ^K) ≥ q_supg + κ.
pub fn bound_loss(q_trajectory: &[f64], q_supg: f64, gamma: f64, kappa: f64) -> f64 {
    let Some(&q_final) = q_trajectory.last() else {
        return 0.0;
    };
    if q_final >= q_supg + kappa {
        return 0.0;
    }
    -q_trajectory
        .iter()
        .enumerate()
        .map(|(i, &q)| q * gamma.powi(i as i32 + 1))
        .sum::<f64>()
}

/// Clamp slack κ: a fraction of |q_supg| with an absolute floor.
pub fn kappa_for(q_supg: f64, rel: f64, floor: f64) -> f64 {
    (rel * q_supg.abs()).max(floor)
}

/// Routing decision of the bounding fail-safe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundRoute {
    Accept,
    SupergradientQueue,
}

/// Accept a GNN bound only if it beats the parent bound by the absolute
/// threshold; otherwise the subdomain (and, by stickiness, its subtree) is
/// solved with supergradient ascent.
pub fn failsafe_bound(child_q: f64, parent_q: f64, threshold: f64) -> BoundRoute {
    if child_q >= parent_q + threshold {
        BoundRoute::Accept
    } else {
        BoundRoute::SupergradientQueue
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One training subdomain: bounds, inherited duals, and the supergradient
/// reference value used for loss truncation.
#[derive(Debug, Clone)]
pub struct BoundTrainItem {
    pub net: Arc<VerificationNetwork>,
    pub stack: BoundsStack,
    pub parent_rho: DualState,
    pub q_supg: f64,
}

#[derive(Debug, Clone)]
pub struct BoundTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Unroll horizon K.
    pub horizon: usize,
    pub gamma: f64,
    pub kappa_rel: f64,
    pub kappa_floor: f64,
    pub eta0: f64,
    pub schedule: StepSchedule,
    /// Epochs of stagnant training loss before dividing lr by 10.
    pub lr_patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BoundTrainConfig {
    fn default() -> Self {
        BoundTrainConfig {
            lr: 1e-2,
            epochs: 50,
            horizon: 100,
            gamma: 0.99,
            kappa_rel: 0.01,
            kappa_floor: 1e-3,
            eta0: DEFAULT_ETA0,
            schedule: StepSchedule::DecaySqrt,
            lr_patience: 2,
            batch_size: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundTrainReport {
    pub epoch_loss: Vec<f64>,
    pub best_loss: f64,
    pub epochs: usize,
}

struct UnrollRecord {
    features: BoundFeatures,
    q: f64,
    grad_q: Vec<Array1<f64>>,
}

/// Forward pass of the unrolled loop, keeping what the backward sweep needs.
fn unroll_forward(
    gnn: &BoundGnnParameters,
    item: &BoundTrainItem,
    counts: &NeighborCounts,
    config: &BoundTrainConfig,
) -> Result<(Vec<UnrollRecord>, f64)> {
    let net = &*item.net;
    let mut rho = item.parent_rho.clone();
    let mut sol = inner_minimize(net, &item.stack, &rho)?;
    let mut records = Vec::with_capacity(config.horizon);
    for t in 1..=config.horizon {
        let features = build_bound_features(&rho, &sol);
        let direction = infer_direction(gnn, net, counts, &features)?;
        rho = dual_update(&rho, &direction, t, config.eta0, config.schedule);
        if !rho.is_finite() {
            return Err(Error::NonFiniteDual);
        }
        sol = inner_minimize(net, &item.stack, &rho)?;
        records.push(UnrollRecord {
            features,
            q: sol.q,
            grad_q: supergradient(&sol),
        });
    }
    let q_final = records.last().map(|r| r.q).unwrap_or(f64::NEG_INFINITY);
    Ok((records, q_final))
}

/// Loss and parameter gradients of one sample through the unrolled loop.
fn sample_loss_and_grads(
    gnn: &BoundGnnParameters,
    item: &BoundTrainItem,
    counts: &NeighborCounts,
    config: &BoundTrainConfig,
    want_grads: bool,
) -> Result<(f64, Option<Gradients>)> {
    let (records, q_final) = unroll_forward(gnn, item, counts, config)?;
    let kappa = kappa_for(item.q_supg, config.kappa_rel, config.kappa_floor);
    let qs: Vec<f64> = records.iter().map(|r| r.q).collect();
    let loss = bound_loss(&qs, item.q_supg, config.gamma, kappa);
    if !want_grads || q_final >= item.q_supg + kappa {
        return Ok((loss, want_grads.then(|| Gradients {
            by_slot: Default::default(),
            by_input: Default::default(),
        })));
    }

    let net = &*item.net;
    // Adjoint λ_t = ∂loss/∂ρ^t, swept backwards. The q-path contributes
    // c_t·g_t with c_t = −γ^t; each step's direction feeds the parameters
    // (scaled by η_t) and the ρ-feature path back into λ_{t-1}.
    let mut total = Gradients {
        by_slot: Default::default(),
        by_input: Default::default(),
    };
    let k = records.len();
    let mut lambda: Vec<Array1<f64>> = records[k - 1]
        .grad_q
        .iter()
        .map(|g| g * (-config.gamma.powi(k as i32)))
        .collect();
    for t in (1..=k).rev() {
        let rec = &records[t - 1];
        let eta = step_size(config.schedule, config.eta0, t);
        // Rebuild the step-t graph with the ρ feature column as an input.
        let mut tape = Tape::new();
        let rho_inputs: Vec<Var> = rec
            .features
            .layers
            .iter()
            .enumerate()
            .map(|(kk, f)| tape.input(kk, f.slice(ndarray::s![.., ..1]).to_owned()))
            .collect();
        let mut state = init_embed_on_tape(&mut tape, gnn, &rec.features, Some(&rho_inputs))?;
        passes_on_tape(&mut tape, gnn, net, counts, &mut state)?;
        let dirs = direction_on_tape(&mut tape, gnn, &state);
        // Seed each layer's direction with η_t·λ_t and pull gradients.
        for (kk, &dir) in dirs.iter().enumerate() {
            let n = lambda[kk].len();
            let mut seed = Array2::zeros((n, 1));
            for j in 0..n {
                seed[(j, 0)] = eta * lambda[kk][j];
            }
            let grads = tape.backward_with(dir, seed)?;
            for (slot, g) in &grads.by_slot {
                total
                    .by_slot
                    .entry(*slot)
                    .and_modify(|acc| *acc += g)
                    .or_insert_with(|| g.clone());
            }
            for (tag, g) in &grads.by_input {
                // ∂dir/∂(ρ-feature) flows into λ_{t-1}.
                for j in 0..g.nrows() {
                    lambda[*tag][j] += g[(j, 0)];
                }
            }
        }
        // Direct q-term of step t-1 plus the identity path ρ^t = ρ^{t-1} + …
        if t >= 2 {
            let prev = &records[t - 2];
            let c = -config.gamma.powi((t - 1) as i32);
            for (kk, g) in prev.grad_q.iter().enumerate() {
                lambda[kk].scaled_add(c, g);
            }
        }
    }
    Ok((loss, Some(total)))
}

/// Loss of one sample at the current parameters (no gradients).
pub fn evaluate_bound_loss(
    gnn: &BoundGnnParameters,
    item: &BoundTrainItem,
    config: &BoundTrainConfig,
) -> Result<f64> {
    let counts = NeighborCounts::build(&item.net);
    Ok(sample_loss_and_grads(gnn, item, &counts, config, false)?.0)
}

/// Central finite-difference check of the truncated decayed loss through the
/// unrolled loop (`config.horizon` steps): every parameter tensor is probed
/// at `per_tensor` seeded entries; entries below the difference-quotient
/// resolution floor are skipped. Returns (entries compared, worst relative
/// error).
pub fn finite_difference_check(
    gnn: &BoundGnnParameters,
    item: &BoundTrainItem,
    config: &BoundTrainConfig,
    per_tensor: usize,
    seed: u64,
) -> Result<(usize, f64)> {
    let counts = NeighborCounts::build(&item.net);
    let (_, grads) = sample_loss_and_grads(gnn, item, &counts, config, true)?;
    let grads = grads.expect("requested");
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0usize;
    let mut worst = 0.0_f64;
    for slot in 0..gnn.params.len() {
        let dims = gnn.params.value(slot).dim();
        for _ in 0..per_tensor {
            let (i, j) = (rng.gen_range(0..dims.0), rng.gen_range(0..dims.1));
            let mut up = gnn.clone();
            up.params.value_mut(slot)[(i, j)] += h;
            let mut dn = gnn.clone();
            dn.params.value_mut(slot)[(i, j)] -= h;
            let lu = sample_loss_and_grads(&up, item, &counts, config, false)?.0;
            let ld = sample_loss_and_grads(&dn, item, &counts, config, false)?.0;
            let fd = (lu - ld) / (2.0 * h);
            let ad = grads.slot(slot).map_or(0.0, |g| g[(i, j)]);
            let denom = fd.abs().max(ad.abs());
            if denom < 1e-6 {
                continue;
            }
            let rel = (fd - ad).abs() / denom;
            if rel > 1e-3 {
                return Err(Error::NonFiniteGradient);
            }
            worst = worst.max(rel);
            checked += 1;
        }
    }
    Ok((checked, worst))
}

/// Minimize the summed truncated loss by Adam through the unrolled loop.
/// The learning rate decays by 10 after `lr_patience` stagnant epochs.
/// Returns the best-loss parameters.
pub fn train_bound_gnn(
    items: &[BoundTrainItem],
    params0: BoundGnnParameters,
    config: &BoundTrainConfig,
) -> Result<(BoundGnnParameters, BoundTrainReport)> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let counts: Vec<NeighborCounts> =
        items.iter().map(|it| NeighborCounts::build(&it.net)).collect();
    let mut gnn = params0;
    let mut adam = AdamState::new(&gnn.params);
    let mut lr = config.lr;
    let mut best_loss = f64::INFINITY;
    let mut best_params = gnn.params.clone();
    let mut stagnant = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = BoundTrainReport {
        epoch_loss: Vec::new(),
        best_loss: f64::INFINITY,
        epochs: 0,
    };
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size.max(1)) {
            use rayon::prelude::*;
            let results: Vec<Result<(f64, Option<Gradients>)>> = batch
                .par_iter()
                .map(|&i| sample_loss_and_grads(&gnn, &items[i], &counts[i], config, true))
                .collect();
            let mut merged: Option<Gradients> = None;
            for r in results {
                let (loss, grads) = r?;
                epoch_loss += loss;
                if let Some(g) = grads {
                    match &mut merged {
                        Some(acc) => acc.merge(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            if let Some(grads) = merged {
                if !grads.by_slot.is_empty() {
                    adam_step(&mut gnn.params, &grads, lr, &mut adam)?;
                }
            }
        }
        report.epoch_loss.push(epoch_loss);
        report.epochs = epoch + 1;
        if epoch_loss < best_loss - 1e-12 {
            best_loss = epoch_loss;
            best_params = gnn.params.clone();
            stagnant = 0;
        } else {
            stagnant += 1;
            if stagnant % config.lr_patience == 0 {
                lr /= 10.0;
            }
        }
    }
    report.best_loss = best_loss;
    gnn.params = best_params;
    Ok((gnn, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual::plain_ascent;
    use crate::model::InputDomain;
    use crate::relax::{linear_backward_bounds, SplitSet};
    use ndarray::array;

    fn setup(seed: u64) -> (VerificationNetwork, BoundsStack, DualState) {
        let net = crate::relax::tests::random_net(seed, &[3, 6, 5, 1], 1.3);
        let dom = InputDomain::new(array![-1.0, -1.0, -1.0], array![1.0, 1.0, 1.0]).unwrap();
        let stack = linear_backward_bounds(&net, &dom, &SplitSet::new()).unwrap();
        let rho = DualState::zeros(&net);
        (net, stack, rho)
    }

    #[test]
    fn features_anchor_values() {
        let (net, stack, rho) = setup(1);
        let sol = inner_minimize(&net, &stack, &rho).unwrap();
        let f = build_bound_features(&rho, &sol);
        for (k, layer) in f.layers.iter().enumerate() {
            for j in 0..layer.nrows() {
                assert_eq!(layer[(j, 0)], 0.0); // ρ = 0
                assert_eq!(layer[(j, 3)], layer[(j, 2)] - layer[(j, 1)]);
                assert_eq!(layer[(j, 1)], sol.zhat_a[k][j]);
            }
        }
    }

    #[test]
    fn features_finite_on_random_duals() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (net, stack, _) = setup(2);
        for _ in 0..100 {
            let rho = DualState {
                rho: (1..net.depth())
                    .map(|k| {
                        Array1::from_shape_fn(net.layer_dim(k), |_| rng.gen_range(-2.0..2.0))
                    })
                    .collect(),
            };
            let sol = inner_minimize(&net, &stack, &rho).unwrap();
            let f = build_bound_features(&rho, &sol);
            assert!(f.layers.iter().all(|m| m.iter().all(|v| v.is_finite())));
        }
    }

    #[test]
    fn identity_passes_preserve_nonnegative_embeddings() {
        let (net, stack, rho) = setup(4);
        let counts = NeighborCounts::build(&net);
        let gnn = BoundGnnParameters::prop1_parameters(8).unwrap();
        let sol = inner_minimize(&net, &stack, &rho).unwrap();
        let f = build_bound_features(&rho, &sol);
        let emb = bound_init_embed(&f, &gnn).unwrap();
        assert!(emb.iter().all(|m| m.iter().all(|v| *v >= 0.0)));
        let after = bound_forward_backward(&emb, &net, &gnn, &counts).unwrap();
        for (a, b) in emb.iter().zip(after.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_everything_stays_zero() {
        let (net, stack, rho) = setup(5);
        let counts = NeighborCounts::build(&net);
        let mut gnn = BoundGnnParameters::init_with(9, 8, 1, 1);
        for t in gnn.params.tensors.iter_mut() {
            t.value.fill(0.0);
        }
        let sol = inner_minimize(&net, &stack, &rho).unwrap();
        let f = build_bound_features(&rho, &sol);
        let emb = bound_init_embed(&f, &gnn).unwrap();
        assert!(emb.iter().all(|m| m.iter().all(|v| *v == 0.0)));
        let after = bound_forward_backward(&emb, &net, &gnn, &counts).unwrap();
        assert!(after.iter().all(|m| m.iter().all(|v| *v == 0.0)));
        let dirs = bound_output_duals(&after, &gnn);
        assert!(dirs.iter().all(|d| d.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn score_basis_vector_reads_first_coordinate() {
        let (net, stack, rho) = setup(6);
        let mut gnn = BoundGnnParameters::init_with(10, 8, 1, 1);
        gnn.params.value_mut(gnn.score).fill(0.0);
        gnn.params.value_mut(gnn.score)[(0, 0)] = 1.0;
        let sol = inner_minimize(&net, &stack, &rho).unwrap();
        let f = build_bound_features(&rho, &sol);
        let emb = bound_init_embed(&f, &gnn).unwrap();
        let dirs = bound_output_duals(&emb, &gnn);
        for (m, d) in emb.iter().zip(dirs.iter()) {
            for j in 0..m.nrows() {
                assert_eq!(d[j], m[(j, 0)]);
            }
        }
    }

    #[test]
    fn prop1_direction_equals_supergradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let gnn = BoundGnnParameters::prop1_parameters(BOUND_EMBEDDING_DIM).unwrap();
        for trial in 0..100 {
            let net = crate::relax::tests::random_net(400 + trial, &[2, 5, 4, 1], 1.3);
            let dom = InputDomain::new(array![-1.0, -1.0], array![1.0, 1.0]).unwrap();
            let stack = linear_backward_bounds(&net, &dom, &SplitSet::new()).unwrap();
            let counts = NeighborCounts::build(&net);
            let rho = DualState {
                rho: (1..net.depth())
                    .map(|k| {
                        Array1::from_shape_fn(net.layer_dim(k), |_| rng.gen_range(-1.0..1.0))
                    })
                    .collect(),
            };
            let sol = inner_minimize(&net, &stack, &rho).unwrap();
            let g = supergradient(&sol);
            let f = build_bound_features(&rho, &sol);
            let dirs = infer_direction(&gnn, &net, &counts, &f).unwrap();
            for (d, gk) in dirs.iter().zip(g.iter()) {
                let err = (d - gk).iter().map(|v| v.abs()).fold(0.0, f64::max);
                assert!(err <= 1e-12, "direction deviates from supergradient: {err}");
            }
            // Difference-zero feature gives a zero direction.
            let zero_rho = DualState::zeros(&net);
            let mut sol0 = inner_minimize(&net, &stack, &zero_rho).unwrap();
            sol0.zhat_b = sol0.zhat_a.clone();
            let f0 = build_bound_features(&zero_rho, &sol0);
            let d0 = infer_direction(&gnn, &net, &counts, &f0).unwrap();
            assert!(d0.iter().all(|d| d.iter().all(|v| v.abs() <= 1e-15)));
        }
    }

    #[test]
    fn prop1_solve_matches_plain_supergradient_ascent() {
        let (net, stack, rho) = setup(8);
        let gnn = BoundGnnParameters::prop1_parameters(BOUND_EMBEDDING_DIM).unwrap();
        let iters = 50;
        let out = gnn_bound_solve(
            &net,
            &stack,
            &rho,
            &gnn,
            iters,
            DEFAULT_ETA0,
            StepSchedule::DecaySqrt,
        )
        .unwrap();
        let trace = plain_ascent(&net, &stack, &rho, iters, |t| {
            step_size(StepSchedule::DecaySqrt, DEFAULT_ETA0, t)
        })
        .unwrap();
        assert_eq!(out.q_trajectory.len(), trace.q_trajectory.len());
        for (a, b) in out.q_trajectory.iter().zip(trace.q_trajectory.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
        for (ra, rb) in out.rho_trajectory.iter().zip(trace.rho_trajectory.iter()) {
            for (va, vb) in ra.rho.iter().zip(rb.rho.iter()) {
                let err = (va - vb).iter().map(|v| v.abs()).fold(0.0, f64::max);
                assert!(err <= 1e-12);
            }
        }
        assert!((out.best_q - trace.best_q).abs() <= 1e-12);
    }

    #[test]
    fn golden_snapshot_passes() {
        // Frozen at the first correct build: fixed net, seed-3030 params,
        // seed-31 duals.
        let (net, stack, _) = setup(30);
        let counts = NeighborCounts::build(&net);
        let gnn = BoundGnnParameters::init_with(3030, 8, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let rho = DualState {
            rho: (1..net.depth())
                .map(|k| Array1::from_shape_fn(net.layer_dim(k), |_| rng.gen_range(-1.0..1.0)))
                .collect(),
        };
        let sol = inner_minimize(&net, &stack, &rho).unwrap();
        let f = build_bound_features(&rho, &sol);
        let emb = bound_init_embed(&f, &gnn).unwrap();
        let after = bound_forward_backward(&emb, &net, &gnn, &counts).unwrap();
        let dirs = bound_output_duals(&after, &gnn);
        let golden = [
            (1.1364827453466109e0, 0.0000000000000000e0, 4.2742765047702608e-2),
            (3.1311996345488415e0, 2.0769167307105912e-1, 6.5261224844835345e-3),
        ];
        for (k, &(sum, e00, d0)) in golden.iter().enumerate() {
            assert!((after[k].sum() - sum).abs() < 1e-12);
            assert!((after[k][(0, 0)] - e00).abs() < 1e-12);
            assert!((dirs[k][0] - d0).abs() < 1e-12);
        }
    }

    #[test]
    fn dual_update_anchors() {
        let rho = DualState {
            rho: vec![array![1.0, -1.0]],
        };
        let zero_dir = vec![Array1::zeros(2)];
        let same = dual_update(&rho, &zero_dir, 3, 1e-3, StepSchedule::DecaySqrt);
        assert_eq!(same.rho[0], rho.rho[0]);

        assert_eq!(step_size(StepSchedule::DecaySqrt, 1e-3, 4), 5e-4);
        assert_eq!(step_size(StepSchedule::GrowSqrt, 1e-3, 4), 2e-3);
        let mut prev = f64::INFINITY;
        for t in 1..50 {
            let s = step_size(StepSchedule::DecaySqrt, 1e-3, t);
            assert!(s < prev);
            prev = s;
        }
    }

    #[test]
    fn solve_applies_exactly_iters_updates() {
        let (net, stack, rho) = setup(9);
        let gnn = BoundGnnParameters::init_with(11, 8, 1, 1);
        let out =
            gnn_bound_solve(&net, &stack, &rho, &gnn, 1, 1e-3, StepSchedule::DecaySqrt).unwrap();
        assert_eq!(out.q_trajectory.len(), 1);
        assert_eq!(out.rho_trajectory.len(), 1);
    }

    #[test]
    fn bound_loss_anchors() {
        assert!((bound_loss(&[0.5], 100.0, 0.99, 0.01) - (-0.495)).abs() < 1e-12);
        // Final value beats the reference plus slack: clamped to zero.
        assert_eq!(bound_loss(&[0.5], 0.3, 0.99, 0.01), 0.0);
        let l = bound_loss(&[0.5, 1.0], 100.0, 0.99, 0.01);
        assert!((l - (-1.47510)).abs() < 1e-10, "loss {l}");
        assert_eq!(bound_loss(&[], 0.0, 0.99, 0.01), 0.0);
    }

    #[test]
    fn failsafe_bound_anchors() {
        assert_eq!(failsafe_bound(-0.9, -1.0, 0.05), BoundRoute::Accept);
        assert_eq!(
            failsafe_bound(-0.97, -1.0, 0.05),
            BoundRoute::SupergradientQueue
        );
    }

    #[test]
    fn training_gradients_match_finite_differences() {
        let (net, stack, rho) = setup(10);
        let gnn = BoundGnnParameters::init_with(13, 6, 1, 1);
        let item = BoundTrainItem {
            net: Arc::new(net),
            stack,
            parent_rho: rho,
            q_supg: 1e6, // indicator stays on
        };
        let config = BoundTrainConfig {
            horizon: 3,
            ..BoundTrainConfig::default()
        };
        let counts = NeighborCounts::build(&item.net);
        let (_, grads) = sample_loss_and_grads(&gnn, &item, &counts, &config, true).unwrap();
        let grads = grads.unwrap();
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut checked = 0;
        for slot in 0..gnn.params.len() {
            let dims = gnn.params.value(slot).dim();
            for _ in 0..4 {
                let (i, j) = (rng.gen_range(0..dims.0), rng.gen_range(0..dims.1));
                let mut up = gnn.clone();
                up.params.value_mut(slot)[(i, j)] += h;
                let mut dn = gnn.clone();
                dn.params.value_mut(slot)[(i, j)] -= h;
                let lu = sample_loss_and_grads(&up, &item, &counts, &config, false)
                    .unwrap()
                    .0;
                let ld = sample_loss_and_grads(&dn, &item, &counts, &config, false)
                    .unwrap()
                    .0;
                let fd = (lu - ld) / (2.0 * h);
                let ad = grads.slot(slot).map_or(0.0, |g| g[(i, j)]);
                let denom = fd.abs().max(ad.abs());
                if denom < 1e-6 {
                    continue;
                }
                assert!(
                    (fd - ad).abs() / denom <= 1e-3,
                    "slot {slot} ({i},{j}): fd {fd} vs ad {ad}"
                );
                checked += 1;
            }
        }
        assert!(checked > 10, "only {checked} informative entries");
    }

    #[test]
    fn prop1_initialization_anchors_supergradient_loss() {
        let (net, stack, rho) = setup(11);
        let gnn = BoundGnnParameters::prop1_parameters(8).unwrap();
        let item = BoundTrainItem {
            net: Arc::new(net.clone()),
            stack: stack.clone(),
            parent_rho: rho.clone(),
            q_supg: 1e6,
        };
        let config = BoundTrainConfig {
            horizon: 20,
            ..BoundTrainConfig::default()
        };
        let loss = evaluate_bound_loss(&gnn, &item, &config).unwrap();
        let trace = plain_ascent(&net, &stack, &rho, 20, |t| {
            step_size(config.schedule, config.eta0, t)
        })
        .unwrap();
        let kappa = kappa_for(item.q_supg, config.kappa_rel, config.kappa_floor);
        let reference = bound_loss(&trace.q_trajectory, item.q_supg, config.gamma, kappa);
        assert!((loss - reference).abs() <= 1e-12);
    }

    #[test]
    fn single_sample_overfit_improves_final_q() {
        // Fixture with a wide gap between q(0) = −1 and the dual optimum
        // −0.5, so 15 decaying steps leave plenty of improvement to learn.
        let net = VerificationNetwork::new(vec![
            crate::model::Layer::dense(array![[1.0], [1.0]], array![0.05, -0.05]).unwrap(),
            crate::model::Layer::dense(array![[1.0, -1.0]], array![0.0]).unwrap(),
        ])
        .unwrap();
        let dom = InputDomain::new(array![-1.0], array![1.0]).unwrap();
        let stack = linear_backward_bounds(&net, &dom, &SplitSet::new()).unwrap();
        let rho = DualState::zeros(&net);
        let gnn = BoundGnnParameters::prop1_parameters(8).unwrap();
        let item = BoundTrainItem {
            net: Arc::new(net.clone()),
            stack: stack.clone(),
            parent_rho: rho.clone(),
            q_supg: 1e6,
        };
        let config = BoundTrainConfig {
            horizon: 15,
            epochs: 30,
            lr: 1e-2,
            batch_size: 1,
            ..BoundTrainConfig::default()
        };
        let before = gnn_bound_solve(&net, &stack, &rho, &gnn, 15, config.eta0, config.schedule)
            .unwrap();
        let (trained, report) =
            train_bound_gnn(std::slice::from_ref(&item), gnn, &config).unwrap();
        let after = gnn_bound_solve(
            &net,
            &stack,
            &rho,
            &trained,
            15,
            config.eta0,
            config.schedule,
        )
        .unwrap();
        assert!(
            after.q_trajectory.last().unwrap() > before.q_trajectory.last().unwrap(),
            "final q {} -> {} (report {:?})",
            before.q_trajectory.last().unwrap(),
            after.q_trajectory.last().unwrap(),
            report.epoch_loss
        );
        assert!(report.best_loss < report.epoch_loss[0]);
    }

    #[test]
    fn empty_dataset_rejected() {
        let gnn = BoundGnnParameters::init_with(1, 4, 1, 1);
        assert!(matches!(
            train_bound_gnn(&[], gnn, &BoundTrainConfig::default()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bound.json");
        let gnn = BoundGnnParameters::init_with(21, 8, 1, 1);
        gnn.save(&path).unwrap();
        let loaded = BoundGnnParameters::load(&path).unwrap();
        for (a, b) in gnn.params.tensors.iter().zip(loaded.params.tensors.iter()) {
            assert_eq!(a.value, b.value);
        }
        // Branch parameters do not load into the bounding slot.
        let bpath = dir.path().join("branch.json");
        crate::branchgnn::BranchGnnParameters::init_with(1, 8, true)
            .save(&bpath)
            .unwrap();
        assert!(BoundGnnParameters::load(&bpath).is_err());
    }

    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;
}
