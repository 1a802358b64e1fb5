//! The branching GNN: it mirrors the verification network as a graph (input
//! nodes, combined pre/post activation nodes, output node), runs layered
//! forward/backward embedding updates, and scores ambiguous neurons to pick
//! the next ReLU split.
//!
//! Update functions are 2-layer fully connected nets with ReLU between the
//! layers (the output local-feature function is a single ReLU layer). Local
//! information enters through the relaxation features; neighbourhood
//! information flows through the network's own weights, gated by the ReLU
//! ratio α (and its complement) in both directions; the backward pass also
//! reweights local terms by the node's dual value.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dual::{DualState, InnerSolution};
use crate::error::{Error, Result};
use crate::gnn::{
    adam_step, load_params, mlp_forward, save_params, AdamState, ArchitectureMeta, Mlp,
    ParamSet, Tape, Var,
};
use crate::model::VerificationNetwork;
use crate::relax::{BoundsStack, Phase};

/// Embedding dimension p of the branching GNN.
pub const BRANCH_EMBEDDING_DIM: usize = 64;
/// Rounds of forward+backward updates before scoring.
pub const BRANCH_ROUNDS: usize = 2;
/// Fail-safe threshold on the relative improvement of a GNN decision.
pub const BRANCH_FAILSAFE_THRESHOLD: f64 = 0.2;

const INPUT_FEATURES: usize = 3; // l0, u0, input primal
const ACT_FEATURES: usize = 7; // l, u, β, layer bias, pre/post primal, dual
const OUT_FEATURES: usize = 4; // l_L, u_L, output primal, output bias
const INPUT_BACKWARD_FEATURES: usize = 2; // l0, u0

/// All learnable functions of the branching GNN over one `ParamSet`.
#[derive(Debug, Clone)]
pub struct BranchGnnParameters {
    pub params: ParamSet,
    pub p: usize,
    /// With false, primal and dual feature columns are zeroed (the reduced
    /// GNN-R variant).
    pub include_primal_dual: bool,
    f_inp: Mlp,
    f_act_lf: Mlp,
    f_act_nb: Mlp,
    f_act_com: Mlp,
    f_out_lf: Mlp,
    f_out_com: Mlp,
    b_act_lf1: Mlp,
    b_act_lf2: Mlp,
    b_act_nb: Mlp,
    b_act_com: Mlp,
    b_inp_lf: Mlp,
    b_inp_com: Mlp,
    score: Mlp,
}

impl BranchGnnParameters {
    pub fn init(seed: u64) -> Self {
        Self::init_with(seed, BRANCH_EMBEDDING_DIM, true)
    }

    pub fn init_with(seed: u64, p: usize, include_primal_dual: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let two = |params: &mut ParamSet, name: &str, d_in: usize, rng: &mut ChaCha8Rng| {
            Mlp::register(params, name, &[d_in, p, p], false, rng)
        };
        let f_inp = two(&mut params, "f_inp", INPUT_FEATURES, &mut rng);
        let f_act_lf = two(&mut params, "f_act_lf", ACT_FEATURES, &mut rng);
        let f_act_nb = two(&mut params, "f_act_nb", 2 * p, &mut rng);
        let f_act_com = two(&mut params, "f_act_com", 2 * p, &mut rng);
        let f_out_lf = Mlp::register(&mut params, "f_out_lf", &[OUT_FEATURES, p], true, &mut rng);
        let f_out_com = two(&mut params, "f_out_com", 2 * p, &mut rng);
        let b_act_lf1 = two(&mut params, "b_act_lf1", ACT_FEATURES, &mut rng);
        let b_act_lf2 = two(&mut params, "b_act_lf2", 2 * p, &mut rng);
        let b_act_nb = two(&mut params, "b_act_nb", 2 * p, &mut rng);
        let b_act_com = two(&mut params, "b_act_com", 2 * p, &mut rng);
        let b_inp_lf = two(&mut params, "b_inp_lf", INPUT_BACKWARD_FEATURES, &mut rng);
        let b_inp_com = two(&mut params, "b_inp_com", 2 * p, &mut rng);
        let score = Mlp::register(&mut params, "score", &[p, p, 1], false, &mut rng);
        BranchGnnParameters {
            params,
            p,
            include_primal_dual,
            f_inp,
            f_act_lf,
            f_act_nb,
            f_act_com,
            f_out_lf,
            f_out_com,
            b_act_lf1,
            b_act_lf2,
            b_act_nb,
            b_act_com,
            b_inp_lf,
            b_inp_com,
            score,
        }
    }

    pub fn meta(&self) -> ArchitectureMeta {
        let mut feature_dims = std::collections::BTreeMap::new();
        feature_dims.insert("input".into(), INPUT_FEATURES);
        feature_dims.insert("act".into(), ACT_FEATURES);
        feature_dims.insert("out".into(), OUT_FEATURES);
        feature_dims.insert(
            "primal_dual".into(),
            if self.include_primal_dual { 1 } else { 0 },
        );
        ArchitectureMeta {
            variant: "branch".into(),
            embedding_dim: self.p,
            init_depth: 0,
            passes: BRANCH_ROUNDS,
            feature_dims,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_params(path, &self.meta(), &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (meta, params) = load_params(path)?;
        if meta.variant != "branch" {
            return Err(Error::ArchitectureMismatch(format!(
                "expected branch parameters, found {}",
                meta.variant
            )));
        }
        let include_primal_dual = meta
            .feature_dims
            .get("primal_dual")
            .copied()
            .unwrap_or(1)
            == 1;
        let mut fresh = Self::init_with(0, meta.embedding_dim, include_primal_dual);
        if fresh.params.len() != params.len() {
            return Err(Error::ArchitectureMismatch(
                "tensor count mismatch".into(),
            ));
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

/// Per-node features plus the relaxation quantities the passes need.
#[derive(Debug, Clone)]
pub struct BranchFeatures {
    pub input: Array2<f64>,
    pub act: Vec<Array2<f64>>,
    pub out: Array2<f64>,
    pub alpha: Vec<Array1<f64>>,
    pub alpha_prime: Vec<Array1<f64>>,
    /// 1.0 for ambiguous nodes, 0.0 otherwise (the "0 otherwise" gate).
    pub ambiguous_mask: Vec<Array1<f64>>,
    /// Dual value per activation node, used to weight backward local terms.
    pub dual: Vec<Array1<f64>>,
}

/// Assemble node features from the relaxation and the dual inner solution.
pub fn build_branch_features(
    net: &VerificationNetwork,
    stack: &BoundsStack,
    sol: &InnerSolution,
    rho: &DualState,
    include_primal_dual: bool,
) -> Result<BranchFeatures> {
    rho.check_shapes(net)?;
    let d = net.input_dim();
    let depth = net.depth();
    let pd = if include_primal_dual { 1.0 } else { 0.0 };

    let mut input = Array2::zeros((d, INPUT_FEATURES));
    for j in 0..d {
        input[(j, 0)] = stack.input_lower[j];
        input[(j, 1)] = stack.input_upper[j];
        input[(j, 2)] = pd * sol.z0[j];
    }

    let mut act = Vec::with_capacity(depth - 1);
    let mut alpha = Vec::with_capacity(depth - 1);
    let mut alpha_prime = Vec::with_capacity(depth - 1);
    let mut ambiguous_mask = Vec::with_capacity(depth - 1);
    let mut dual = Vec::with_capacity(depth - 1);
    for k in 1..depth {
        let n = net.layer_dim(k);
        let (_, bias) = net.layer_view(k);
        let mut feats = Array2::zeros((n, ACT_FEATURES));
        let mut a = Array1::zeros(n);
        let mut ap = Array1::zeros(n);
        let mut mask = Array1::zeros(n);
        let mut du = Array1::zeros(n);
        for j in 0..n {
            let st = stack.relu_state(k, j);
            feats[(j, 0)] = stack.lower(k)[j];
            feats[(j, 1)] = stack.upper(k)[j];
            feats[(j, 2)] = st.beta;
            feats[(j, 3)] = bias[j];
            feats[(j, 4)] = pd * sol.zhat_a[k - 1][j];
            feats[(j, 5)] = pd * sol.z_post[k - 1][j];
            feats[(j, 6)] = pd * rho.rho[k - 1][j];
            a[j] = st.alpha;
            ap[j] = if st.phase == Phase::Ambiguous {
                1.0 - st.alpha
            } else {
                st.alpha
            };
            mask[j] = if st.phase == Phase::Ambiguous { 1.0 } else { 0.0 };
            du[j] = pd * rho.rho[k - 1][j];
        }
        act.push(feats);
        alpha.push(a);
        alpha_prime.push(ap);
        ambiguous_mask.push(mask);
        dual.push(du);
    }

    let (_, b_out) = net.layer_view(depth);
    let mut out = Array2::zeros((1, OUT_FEATURES));
    out[(0, 0)] = stack.output_lower();
    out[(0, 1)] = stack.output_upper();
    out[(0, 2)] = pd * sol.output;
    out[(0, 3)] = b_out[0];

    let f = BranchFeatures {
        input,
        act,
        out,
        alpha,
        alpha_prime,
        ambiguous_mask,
        dual,
    };
    let finite = f.input.iter().all(|v| v.is_finite())
        && f.act.iter().all(|m| m.iter().all(|v| v.is_finite()))
        && f.out.iter().all(|v| v.is_finite());
    if !finite {
        return Err(Error::InvalidProperty("non-finite branch features".into()));
    }
    Ok(f)
}

/// Node embeddings: [input, hidden layers..., output], one row per node.
#[derive(Debug, Clone)]
pub struct BranchGraphState {
    pub embeddings: Vec<Array2<f64>>,
}

impl BranchGraphState {
    /// All-zero embeddings (the initial state of every round-based update).
    pub fn zeros(net: &VerificationNetwork, p: usize) -> Self {
        let mut embeddings = vec![Array2::zeros((net.input_dim(), p))];
        for k in 1..net.depth() {
            embeddings.push(Array2::zeros((net.layer_dim(k), p)));
        }
        embeddings.push(Array2::zeros((1, p)));
        BranchGraphState { embeddings }
    }
}

struct TapeState {
    /// [input, hidden..., output] embedding vars.
    layers: Vec<Var>,
}

fn forward_pass_on_tape(
    tape: &mut Tape,
    gnn: &BranchGnnParameters,
    net: &VerificationNetwork,
    features: &BranchFeatures,
    state: &mut TapeState,
    inputs_are_zero: bool,
) -> Result<()> {
    let depth = net.depth();
    if inputs_are_zero {
        let feat = tape.constant(features.input.clone());
        state.layers[0] = mlp_forward(tape, &gnn.params, &gnn.f_inp, feat)?;
    }
    for k in 1..depth {
        let feat = tape.constant(features.act[k - 1].clone());
        let local = mlp_forward(tape, &gnn.params, &gnn.f_act_lf, feat)?;
        let local = tape.scale_rows(local, features.ambiguous_mask[k - 1].clone());
        let (w, _) = net.layer_view(k);
        let w_const = tape.constant(w.clone());
        let nb = tape.matmul(w_const, state.layers[k - 1]);
        let gated_a = tape.scale_rows(nb, features.alpha[k - 1].clone());
        let gated_b = tape.scale_rows(nb, features.alpha_prime[k - 1].clone());
        let gates = tape.concat_cols(gated_a, gated_b);
        let nb_info = mlp_forward(tape, &gnn.params, &gnn.f_act_nb, gates)?;
        let combined = tape.concat_cols(local, nb_info);
        state.layers[k] = mlp_forward(tape, &gnn.params, &gnn.f_act_com, combined)?;
    }
    let feat = tape.constant(features.out.clone());
    let local = mlp_forward(tape, &gnn.params, &gnn.f_out_lf, feat)?;
    let (w, _) = net.layer_view(depth);
    let w_const = tape.constant(w.clone());
    let nb = tape.matmul(w_const, state.layers[depth - 1]);
    let combined = tape.concat_cols(local, nb);
    state.layers[depth] = mlp_forward(tape, &gnn.params, &gnn.f_out_com, combined)?;
    Ok(())
}

fn backward_pass_on_tape(
    tape: &mut Tape,
    gnn: &BranchGnnParameters,
    net: &VerificationNetwork,
    features: &BranchFeatures,
    state: &mut TapeState,
) -> Result<()> {
    let depth = net.depth();
    for k in (1..depth).rev() {
        let feat = tape.constant(features.act[k - 1].clone());
        let local = mlp_forward(tape, &gnn.params, &gnn.b_act_lf1, feat)?;
        let local = tape.scale_rows(local, features.ambiguous_mask[k - 1].clone());
        let dual_weighted = tape.scale_rows(local, features.dual[k - 1].clone());
        let pair = tape.concat_cols(dual_weighted, local);
        let refined = mlp_forward(tape, &gnn.params, &gnn.b_act_lf2, pair)?;
        let refined = tape.scale_rows(refined, features.ambiguous_mask[k - 1].clone());

        let (w_next, _) = net.layer_view(k + 1);
        let w_t = tape.constant(w_next.t().to_owned());
        let mut nb = tape.matmul(w_t, state.layers[k + 1]);
        if net.layers()[k].is_conv() {
            // Average the neighbourhood term by each node's fan-out.
            let counts = net.layers()[k].fanout_counts();
            let inv: Array1<f64> = counts.iter().map(|&c| 1.0 / (c.max(1) as f64)).collect();
            nb = tape.scale_rows(nb, inv);
        }
        let gated_a = tape.scale_rows(nb, features.alpha[k - 1].clone());
        let gated_b = tape.scale_rows(nb, features.alpha_prime[k - 1].clone());
        let gates = tape.concat_cols(gated_a, gated_b);
        let nb_info = mlp_forward(tape, &gnn.params, &gnn.b_act_nb, gates)?;
        let combined = tape.concat_cols(refined, nb_info);
        state.layers[k] = mlp_forward(tape, &gnn.params, &gnn.b_act_com, combined)?;
    }
    // Input nodes: local features are the domain bounds only.
    let inp_feat = tape.constant(
        features
            .input
            .slice(ndarray::s![.., ..INPUT_BACKWARD_FEATURES])
            .to_owned(),
    );
    let local = mlp_forward(tape, &gnn.params, &gnn.b_inp_lf, inp_feat)?;
    let (w1, _) = net.layer_view(1);
    let w_t = tape.constant(w1.t().to_owned());
    let mut nb = tape.matmul(w_t, state.layers[1]);
    if net.layers()[0].is_conv() {
        let counts = net.layers()[0].fanout_counts();
        let inv: Array1<f64> = counts.iter().map(|&c| 1.0 / (c.max(1) as f64)).collect();
        nb = tape.scale_rows(nb, inv);
    }
    let combined = tape.concat_cols(local, nb);
    state.layers[0] = mlp_forward(tape, &gnn.params, &gnn.b_inp_com, combined)?;
    Ok(())
}

fn rounds_on_tape(
    tape: &mut Tape,
    gnn: &BranchGnnParameters,
    net: &VerificationNetwork,
    features: &BranchFeatures,
    rounds: usize,
) -> Result<TapeState> {
    let depth = net.depth();
    let mut state = TapeState {
        layers: {
            let mut v = vec![tape.constant(Array2::zeros((net.input_dim(), gnn.p)))];
            for k in 1..depth {
                v.push(tape.constant(Array2::zeros((net.layer_dim(k), gnn.p))));
            }
            v.push(tape.constant(Array2::zeros((1, gnn.p))));
            v
        },
    };
    for round in 0..rounds {
        forward_pass_on_tape(tape, gnn, net, features, &mut state, round == 0)?;
        backward_pass_on_tape(tape, gnn, net, features, &mut state)?;
    }
    Ok(state)
}

/// One forward sweep over a materialized state (inference building block).
pub fn branch_forward_pass(
    state: &BranchGraphState,
    features: &BranchFeatures,
    net: &VerificationNetwork,
    gnn: &BranchGnnParameters,
) -> Result<BranchGraphState> {
    let mut tape = Tape::new();
    let mut ts = TapeState {
        layers: state
            .embeddings
            .iter()
            .map(|e| tape.constant(e.clone()))
            .collect(),
    };
    let inputs_zero = state.embeddings[0].iter().all(|v| *v == 0.0);
    forward_pass_on_tape(&mut tape, gnn, net, features, &mut ts, inputs_zero)?;
    Ok(BranchGraphState {
        embeddings: ts.layers.iter().map(|v| tape.value(*v).clone()).collect(),
    })
}

/// One backward sweep over a materialized state.
pub fn branch_backward_pass(
    state: &BranchGraphState,
    features: &BranchFeatures,
    net: &VerificationNetwork,
    gnn: &BranchGnnParameters,
) -> Result<BranchGraphState> {
    let mut tape = Tape::new();
    let mut ts = TapeState {
        layers: state
            .embeddings
            .iter()
            .map(|e| tape.constant(e.clone()))
            .collect(),
    };
    backward_pass_on_tape(&mut tape, gnn, net, features, &mut ts)?;
    Ok(BranchGraphState {
        embeddings: ts.layers.iter().map(|v| tape.value(*v).clone()).collect(),
    })
}

/// A branching decision: the ambiguous neuron with the best score.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchDecision {
    pub layer: usize,
    pub index: usize,
    pub score: f64,
}

fn candidate_scores_on_tape(
    tape: &mut Tape,
    gnn: &BranchGnnParameters,
    net: &VerificationNetwork,
    features: &BranchFeatures,
    candidates: &[(usize, usize)],
) -> Result<Var> {
    let state = rounds_on_tape(tape, gnn, net, features, BRANCH_ROUNDS)?;
    let mut per_layer: Vec<(usize, Vec<usize>)> = Vec::new();
    for &(layer, idx) in candidates {
        match per_layer.last_mut() {
            Some((l, rows)) if *l == layer => rows.push(idx),
            _ => per_layer.push((layer, vec![idx])),
        }
    }
    let mut gathered: Option<Var> = None;
    for (layer, rows) in per_layer {
        let g = tape.gather_rows(state.layers[layer], rows);
        gathered = Some(match gathered {
            Some(acc) => tape.concat_rows(acc, g),
            None => g,
        });
    }
    let emb = gathered.ok_or(Error::EmptyCandidates)?;
    mlp_forward(tape, &gnn.params, &gnn.score, emb)
}

/// Scores for an ordered candidate list (ambiguous neurons).
pub fn score_candidates(
    net: &VerificationNetwork,
    features: &BranchFeatures,
    candidates: &[(usize, usize)],
    gnn: &BranchGnnParameters,
) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mut tape = Tape::new();
    let scores = candidate_scores_on_tape(&mut tape, gnn, net, features, candidates)?;
    Ok(tape.value(scores).column(0).to_vec())
}

/// Run the rounds, score every candidate, and return the argmax (ties break
/// on (layer, index) order).
pub fn score_and_decide(
    net: &VerificationNetwork,
    features: &BranchFeatures,
    candidates: &[(usize, usize)],
    gnn: &BranchGnnParameters,
) -> Result<BranchDecision> {
    let scores = score_candidates(net, features, candidates, gnn)?;
    let mut best = 0usize;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    Ok(BranchDecision {
        layer: candidates[best].0,
        index: candidates[best].1,
        score: scores[best],
    })
}

/// Relative improvement of a split: children lower bounds against the
/// parent's, normalized by the maximum possible improvement −parent_lb.
pub fn improvement_measure(parent_lb: f64, child_lb1: f64, child_lb2: f64) -> Result<f64> {
    if parent_lb >= 0.0 {
        return Err(Error::InvalidProperty(
            "improvement undefined for nonnegative parent bound".into(),
        ));
    }
    Ok((child_lb1.min(0.0) + child_lb2.min(0.0) - 2.0 * parent_lb) / (-2.0 * parent_lb))
}

/// Plain hinge-rank loss over scores with ascending labels.
pub fn hinge_rank_loss(scores: &[f64], labels: &[u32]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for j in 0..scores.len() {
        for i in 0..scores.len() {
            if labels[j] > labels[i] {
                pairs += 1;
                total += (1.0 - (scores[j] - scores[i])).max(0.0);
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Bin improvement values into `classes` ascending labels, normalizing by
/// the sample's own maximum.
pub fn assign_labels(m_values: &[f64], classes: usize) -> Vec<u32> {
    let max = m_values.iter().copied().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return vec![0; m_values.len()];
    }
    m_values
        .iter()
        .map(|m| {
            let norm = (m / max).clamp(0.0, 1.0);
            ((norm * classes as f64) as u32).min(classes as u32 - 1)
        })
        .collect()
}

/// One training item: everything needed to rebuild the scoring graph.
#[derive(Debug, Clone)]
pub struct BranchTrainItem {
    pub net: Arc<VerificationNetwork>,
    pub features: BranchFeatures,
    pub candidates: Vec<(usize, usize)>,
    pub m_values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BranchTrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub m_classes: usize,
    /// Epochs of stagnant validation loss before dividing the lr by 5.
    pub lr_patience: usize,
    /// Epochs of stagnant validation loss before stopping.
    pub stop_patience: usize,
    pub max_epochs: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for BranchTrainConfig {
    fn default() -> Self {
        BranchTrainConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            batch_size: 2,
            m_classes: 10,
            lr_patience: 10,
            stop_patience: 20,
            max_epochs: 60,
            val_fraction: 0.25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BranchTrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_val: f64,
    pub epochs: usize,
}

fn item_loss_and_grads(
    gnn: &BranchGnnParameters,
    item: &BranchTrainItem,
    labels: &[u32],
    want_grads: bool,
) -> Result<(f64, Option<crate::gnn::Gradients>)> {
    let mut tape = Tape::new();
    let scores =
        candidate_scores_on_tape(&mut tape, gnn, &item.net, &item.features, &item.candidates)?;
    let loss = tape.hinge_rank(scores, labels.to_vec());
    let value = tape.scalar(loss);
    if want_grads {
        let grads = tape.backward(loss, 1.0)?;
        Ok((value, Some(grads)))
    } else {
        Ok((value, None))
    }
}

/// Train by Adam on the ℓ2-regularized mean hinge-rank loss; the schedule
/// divides the learning rate by 5 after `lr_patience` stagnant validation
/// epochs and stops after `stop_patience`. Returns the best-validation
/// parameters.
pub fn train_branch_gnn(
    items: &[BranchTrainItem],
    params0: BranchGnnParameters,
    config: &BranchTrainConfig,
) -> Result<(BranchGnnParameters, BranchTrainReport)> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels: Vec<Vec<u32>> = items
        .iter()
        .map(|it| assign_labels(&it.m_values, config.m_classes))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((items.len() as f64 * config.val_fraction) as usize)
        .min(items.len().saturating_sub(1));
    let (val_idx, train_idx) = order.split_at(n_val);
    let train_idx = train_idx.to_vec();
    let val_idx = val_idx.to_vec();

    let mut gnn = params0;
    let mut adam = AdamState::new(&gnn.params);
    let mut lr = config.lr;
    let mut best_val = f64::INFINITY;
    let mut best_params = gnn.params.clone();
    let mut stagnant = 0usize;
    let mut report = BranchTrainReport {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_val: f64::INFINITY,
        epochs: 0,
    };

    let eval_split = |gnn: &BranchGnnParameters, idx: &[usize]| -> Result<f64> {
        if idx.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for &i in idx {
            total += item_loss_and_grads(gnn, &items[i], &labels[i], false)?.0;
        }
        Ok(total / idx.len() as f64)
    };

    for epoch in 0..config.max_epochs {
        let mut shuffled = train_idx.clone();
        shuffled.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in shuffled.chunks(config.batch_size.max(1)) {
            let mut merged: Option<crate::gnn::Gradients> = None;
            let mut batch_loss = 0.0;
            for &i in batch {
                let (loss, grads) = item_loss_and_grads(&gnn, &items[i], &labels[i], true)?;
                batch_loss += loss;
                let g = grads.expect("requested");
                match &mut merged {
                    Some(acc) => acc.merge(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            epoch_loss += batch_loss;
            let mut grads = merged.expect("non-empty batch");
            grads.scale(1.0 / batch.len() as f64);
            // ℓ2 penalty λ/2·‖Θ‖² contributes λ·Θ to every slot.
            for (slot, tensor) in gnn.params.tensors.iter().enumerate() {
                let reg = tensor.value.mapv(|v| v * config.weight_decay);
                grads
                    .by_slot
                    .entry(slot)
                    .and_modify(|g| *g += &reg)
                    .or_insert(reg);
            }
            adam_step(&mut gnn.params, &grads, lr, &mut adam)?;
        }
        let train_loss = epoch_loss / train_idx.len().max(1) as f64;
        let val_loss = if val_idx.is_empty() {
            train_loss
        } else {
            eval_split(&gnn, &val_idx)?
        };
        report.train_loss.push(train_loss);
        report.val_loss.push(val_loss);
        report.epochs = epoch + 1;
        if val_loss < best_val - 1e-12 {
            best_val = val_loss;
            best_params = gnn.params.clone();
            stagnant = 0;
        } else {
            stagnant += 1;
            if stagnant >= config.stop_patience {
                break;
            }
            if stagnant % config.lr_patience == 0 {
                lr /= 5.0;
            }
        }
    }
    report.best_val = best_val;
    gnn.params = best_params;
    Ok((gnn, report))
}

/// Fail-safe comparison: keep the decision with the higher improvement.
pub fn failsafe_choose(m_gnn: f64, m_backup: f64) -> bool {
    // true = keep the GNN decision
    m_gnn >= m_backup
}

/// Central finite-difference check of the hinge-rank training gradient:
/// every parameter tensor is probed at `per_tensor` seeded entries
/// (h = 1e-6); entries below the difference-quotient resolution floor are
/// skipped. Returns (entries compared, worst relative error).
pub fn finite_difference_check(
    gnn: &BranchGnnParameters,
    item: &BranchTrainItem,
    labels: &[u32],
    per_tensor: usize,
    seed: u64,
) -> Result<(usize, f64)> {
    let (_, grads) = item_loss_and_grads(gnn, item, labels, true)?;
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
            let lu = item_loss_and_grads(&up, item, labels, false)?.0;
            let ld = item_loss_and_grads(&dn, item, labels, false)?.0;
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
