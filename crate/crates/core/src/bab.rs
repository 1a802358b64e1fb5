//! The branch-and-bound engine: batched best-first search over ReLU splits
//! with pluggable branching strategies and bounding backends.
//!
//! The global upper bound starts at 0 (satisfiability form), subdomains with
//! lower bound at or above it are pruned, and the search exits early as soon
//! as any evaluated input goes negative. Subdomains whose learned bound fails
//! the bounding fail-safe are re-solved with supergradient ascent and their
//! whole subtree stays on the supergradient queue.

use std::collections::BinaryHeap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boundgnn::{
    failsafe_bound, gnn_bound_solve, BoundGnnParameters, BoundRoute, StepSchedule,
};
use crate::branchgnn::{
    build_branch_features, improvement_measure, score_and_decide, BranchDecision,
    BranchGnnParameters,
};
use crate::dual::{inner_minimize, supergradient_ascent, DualState, InnerSolution};
use crate::error::{Error, Result};
use crate::model::{evaluate, InputDomain, VerificationNetwork};
use crate::oracle::planet_lp_bound;
use crate::relax::{
    backward_output_coefficients, compute_stack, output_lower_corner, refresh_after_split,
    BoundMethod, BoundsStack, SplitSet, SplitSign,
};

/// Which queue a subdomain lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueueTag {
    Main,
    /// Fail-safe route: this subtree is bounded by supergradient ascent.
    Supergradient,
}

/// One node of the BaB tree.
#[derive(Debug, Clone)]
pub struct Subdomain {
    pub id: u64,
    pub splits: SplitSet,
    pub stack: BoundsStack,
    pub lower_bound: f64,
    /// Duals this subdomain's bound was computed with; children warm-start
    /// from them.
    pub parent_rho: DualState,
    pub depth: usize,
    pub queue_tag: QueueTag,
}

/// Branching strategies.
#[derive(Clone)]
pub enum BranchStrategy {
    Random,
    /// β · |backward output coefficient| substitute heuristic.
    BabsrSub,
    /// Bound both children of every candidate; pick the best improvement.
    Strong,
    Gnn {
        params: Arc<BranchGnnParameters>,
        failsafe_threshold: f64,
    },
}

impl BranchStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            BranchStrategy::Random => "random",
            BranchStrategy::BabsrSub => "babsr_sub",
            BranchStrategy::Strong => "strong",
            BranchStrategy::Gnn { .. } => "gnn",
        }
    }
}

/// Bounding backends.
#[derive(Clone)]
pub enum BoundBackend {
    Interval,
    LinearBackward,
    LpOracle,
    Supergradient {
        steps: usize,
        lr: f64,
    },
    Gnn {
        params: Arc<BoundGnnParameters>,
        iters: usize,
        eta0: f64,
        schedule: StepSchedule,
        failsafe_threshold: f64,
        fallback_steps: usize,
        fallback_lr: f64,
    },
    /// Stress backend: emits diverging duals. Bounds stay sound because the
    /// reported value is still q(ρ); used to exercise the fail-safe route.
    DivergingDuals {
        scale: f64,
        failsafe_threshold: f64,
        fallback_steps: usize,
        fallback_lr: f64,
    },
}

impl BoundBackend {
    pub fn name(&self) -> &'static str {
        match self {
            BoundBackend::Interval => "interval",
            BoundBackend::LinearBackward => "linear",
            BoundBackend::LpOracle => "lp",
            BoundBackend::Supergradient { .. } => "supergradient",
            BoundBackend::Gnn { .. } => "gnn",
            BoundBackend::DivergingDuals { .. } => "diverging_stub",
        }
    }

}

#[derive(Debug, Clone)]
pub struct BabConfig {
    pub intermediate: BoundMethod,
    pub batch_size: usize,
    pub timeout: Option<Duration>,
    pub seed: u64,
    /// Convergence slack of the classic BaB loop; 0 keeps the pure
    /// satisfiability behaviour.
    pub eps_gap: f64,
    /// Safety valve for runaway trees.
    pub max_branches: Option<u64>,
    pub full_recompute: bool,
}

impl Default for BabConfig {
    fn default() -> Self {
        BabConfig {
            intermediate: BoundMethod::LinearBackward,
            batch_size: 200,
            timeout: None,
            seed: 0,
            eps_gap: 0.0,
            max_branches: None,
            full_recompute: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Verified,
    Falsified,
    Timeout,
}

#[derive(Debug, Clone, Default)]
pub struct BabStats {
    pub gnn_branch_decisions: u64,
    pub backup_branch_decisions: u64,
    pub bound_failsafe_triggers: u64,
    pub supergradient_queue_subdomains: u64,
    pub exact_leaf_bounds: u64,
}

#[derive(Debug, Clone)]
pub struct VerificationResult {
    pub status: Status,
    pub witness: Option<Array1<f64>>,
    pub branches: u64,
    pub wall_time: f64,
    pub global_lb: f64,
    pub global_ub: f64,
    pub global_lb_trajectory: Vec<f64>,
    pub global_ub_trajectory: Vec<f64>,
    pub stats: BabStats,
}

/// JSON-lines record of one verification run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRecord {
    pub property_id: String,
    pub status: Status,
    pub time_s: f64,
    pub branches: u64,
    pub strategy: String,
    pub backend: String,
    pub global_lb: f64,
    pub global_ub: f64,
}

// ---------------------------------------------------------------------------
// Queue
// ---------------------------------------------------------------------------

struct HeapItem(Subdomain, u64);

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.0.lower_bound == other.0.lower_bound && self.1 == other.1
    }
}
impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // BinaryHeap is a max-heap; invert so the lowest bound (then the
        // earliest insertion) pops first.
        other
            .0
            .lower_bound
            .total_cmp(&self.0.lower_bound)
            .then_with(|| other.1.cmp(&self.1))
    }
}

/// Two-queue best-first frontier: the main queue plus the supergradient
/// fail-safe queue. Picking always takes the globally lowest lower bound.
#[derive(Default)]
pub struct DomainQueue {
    main: BinaryHeap<HeapItem>,
    supg: BinaryHeap<HeapItem>,
    seq: u64,
}

impl DomainQueue {
    pub fn new() -> Self {
        DomainQueue::default()
    }

    pub fn push(&mut self, sub: Subdomain) {
        let item = HeapItem(sub, self.seq);
        self.seq += 1;
        match item.0.queue_tag {
            QueueTag::Main => self.main.push(item),
            QueueTag::Supergradient => self.supg.push(item),
        }
    }

    pub fn len(&self) -> usize {
        self.main.len() + self.supg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn supergradient_len(&self) -> usize {
        self.supg.len()
    }

    pub fn min_lb(&self) -> Option<f64> {
        let a = self.main.peek().map(|i| i.0.lower_bound);
        let b = self.supg.peek().map(|i| i.0.lower_bound);
        match (a, b) {
            (Some(x), Some(y)) => Some(x.min(y)),
            (x, y) => x.or(y),
        }
    }

    /// Remove and return up to `n` lowest-lower-bound subdomains.
    pub fn pick_out_batch(&mut self, n: usize) -> Result<Vec<Subdomain>> {
        if self.is_empty() {
            return Err(Error::EmptyQueue);
        }
        let mut out = Vec::with_capacity(n.min(self.len()));
        while out.len() < n && !self.is_empty() {
            let take_main = match (self.main.peek(), self.supg.peek()) {
                (Some(m), Some(s)) => {
                    m.0.lower_bound < s.0.lower_bound
                        || (m.0.lower_bound == s.0.lower_bound && m.1 < s.1)
                }
                (Some(_), None) => true,
                (None, _) => false,
            };
            let item = if take_main {
                self.main.pop()
            } else {
                self.supg.pop()
            };
            out.push(item.expect("non-empty").0);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Bounding
// ---------------------------------------------------------------------------

/// Outcome of bounding one subdomain.
pub struct BoundOutcome {
    pub lb: f64,
    pub rho: DualState,
    /// Input point whose true network value serves as an upper bound.
    pub candidate_input: Array1<f64>,
    pub failsafe_triggered: bool,
}

fn supergradient_fallback(
    net: &VerificationNetwork,
    stack: &BoundsStack,
    rho0: &DualState,
    steps: usize,
    lr: f64,
    domain: &InputDomain,
) -> Result<(f64, DualState, Array1<f64>)> {
    match supergradient_ascent(net, stack, rho0, steps, lr) {
        Ok(res) => {
            let sol = inner_minimize(net, stack, &res.best_rho)?;
            Ok((res.best_q, res.rho, domain.clip(&sol.z0)))
        }
        Err(Error::NonFiniteDual) => {
            // Bound blow-up: fall back to the interval bound.
            Ok((stack.output_lower(), rho0.clone(), domain.midpoint()))
        }
        Err(e) => Err(e),
    }
}

/// Bound one subdomain with the configured backend, honouring the queue tag
/// (supergradient-tagged subtrees never use the learned backend) and the
/// bounding fail-safe.
pub fn bound_subdomain(
    net: &VerificationNetwork,
    domain: &InputDomain,
    stack: &BoundsStack,
    splits: &SplitSet,
    parent_rho: &DualState,
    parent_lb: Option<f64>,
    backend: &BoundBackend,
    tag: QueueTag,
) -> Result<BoundOutcome> {
    let plain = |lb: f64, input: Array1<f64>| BoundOutcome {
        lb,
        rho: parent_rho.clone(),
        candidate_input: input,
        failsafe_triggered: false,
    };
    match backend {
        BoundBackend::Interval => Ok(plain(stack.output_lower(), domain.midpoint())),
        BoundBackend::LinearBackward => {
            let (lb, corner) = output_lower_corner(net, domain, stack);
            Ok(plain(lb, corner))
        }
        BoundBackend::LpOracle => {
            let b = planet_lp_bound(net, stack, splits)?;
            let input = b.input.unwrap_or_else(|| domain.midpoint());
            Ok(plain(b.value, input))
        }
        BoundBackend::Supergradient { steps, lr } => {
            let (lb, rho, input) =
                supergradient_fallback(net, stack, parent_rho, *steps, *lr, domain)?;
            Ok(BoundOutcome {
                lb,
                rho,
                candidate_input: input,
                failsafe_triggered: false,
            })
        }
        BoundBackend::Gnn {
            params,
            iters,
            eta0,
            schedule,
            failsafe_threshold,
            fallback_steps,
            fallback_lr,
        } => {
            if tag == QueueTag::Supergradient {
                let (lb, rho, input) = supergradient_fallback(
                    net,
                    stack,
                    parent_rho,
                    *fallback_steps,
                    *fallback_lr,
                    domain,
                )?;
                return Ok(BoundOutcome {
                    lb,
                    rho,
                    candidate_input: input,
                    failsafe_triggered: false,
                });
            }
            let solved = gnn_bound_solve(net, stack, parent_rho, params, *iters, *eta0, *schedule);
            let (gnn_q, gnn_rho, gnn_input) = match solved {
                Ok(out) => {
                    let sol = inner_minimize(net, stack, &out.rho)?;
                    (out.best_q, out.rho, domain.clip(&sol.z0))
                }
                Err(Error::NonFiniteDual) => (f64::NEG_INFINITY, parent_rho.clone(), domain.midpoint()),
                Err(e) => return Err(e),
            };
            let route = match parent_lb {
                Some(p) => failsafe_bound(gnn_q, p, *failsafe_threshold),
                // The root has no parent bound; accept unless it blew up.
                None if gnn_q.is_finite() => BoundRoute::Accept,
                None => BoundRoute::SupergradientQueue,
            };
            match route {
                BoundRoute::Accept => Ok(BoundOutcome {
                    lb: gnn_q,
                    rho: gnn_rho,
                    candidate_input: gnn_input,
                    failsafe_triggered: false,
                }),
                BoundRoute::SupergradientQueue => {
                    let (supg_q, rho, input) = supergradient_fallback(
                        net,
                        stack,
                        parent_rho,
                        *fallback_steps,
                        *fallback_lr,
                        domain,
                    )?;
                    Ok(BoundOutcome {
                        lb: supg_q.max(gnn_q),
                        rho,
                        candidate_input: input,
                        failsafe_triggered: true,
                    })
                }
            }
        }
        BoundBackend::DivergingDuals {
            scale,
            failsafe_threshold,
            fallback_steps,
            fallback_lr,
        } => {
            if tag == QueueTag::Supergradient {
                let (lb, rho, input) = supergradient_fallback(
                    net,
                    stack,
                    parent_rho,
                    *fallback_steps,
                    *fallback_lr,
                    domain,
                )?;
                return Ok(BoundOutcome {
                    lb,
                    rho,
                    candidate_input: input,
                    failsafe_triggered: false,
                });
            }
            // Adversarial duals: large magnitude, alternating sign. The
            // reported bound is still the sound q(ρ).
            let rho = DualState {
                rho: (1..net.depth())
                    .map(|k| {
                        Array1::from_shape_fn(net.layer_dim(k), |j| {
                            if j % 2 == 0 {
                                *scale
                            } else {
                                -*scale
                            }
                        })
                    })
                    .collect(),
            };
            let sol = inner_minimize(net, stack, &rho)?;
            let route = match parent_lb {
                Some(p) => failsafe_bound(sol.q, p, *failsafe_threshold),
                None => BoundRoute::SupergradientQueue,
            };
            match route {
                BoundRoute::Accept => Ok(BoundOutcome {
                    lb: sol.q,
                    rho,
                    candidate_input: domain.clip(&sol.z0),
                    failsafe_triggered: false,
                }),
                BoundRoute::SupergradientQueue => {
                    let (supg_q, frho, input) = supergradient_fallback(
                        net,
                        stack,
                        parent_rho,
                        *fallback_steps,
                        *fallback_lr,
                        domain,
                    )?;
                    Ok(BoundOutcome {
                        lb: supg_q.max(sol.q),
                        rho: frho,
                        candidate_input: input,
                        failsafe_triggered: true,
                    })
                }
            }
        }
    }
}

/// Evaluate the true network at the inner solution's input (clipped into the
/// domain); any such value upper-bounds the global minimum.
pub fn compute_ub(
    net: &VerificationNetwork,
    domain: &InputDomain,
    inner: &InnerSolution,
) -> Result<(f64, Array1<f64>)> {
    let x = domain.clip(&inner.z0);
    let v = evaluate(net, &x)?;
    Ok((v, x))
}

// ---------------------------------------------------------------------------
// Branching
// ---------------------------------------------------------------------------

/// β·|λ| substitute scores for every ambiguous neuron, in candidate order.
pub fn babsr_scores(net: &VerificationNetwork, stack: &BoundsStack) -> Vec<((usize, usize), f64)> {
    let lambdas = backward_output_coefficients(net, stack);
    stack
        .ambiguous_neurons()
        .into_iter()
        .map(|(k, j)| {
            let beta = stack.relu_state(k, j).beta;
            ((k, j), beta * lambdas[k - 1][j].abs())
        })
        .collect()
}

fn babsr_decide(net: &VerificationNetwork, stack: &BoundsStack) -> Option<BranchDecision> {
    let scores = babsr_scores(net, stack);
    let mut best: Option<((usize, usize), f64)> = None;
    for (cand, s) in scores {
        match best {
            Some((_, bs)) if s <= bs => {}
            _ => best = Some((cand, s)),
        }
    }
    best.map(|((layer, index), score)| BranchDecision { layer, index, score })
}

/// Split one subdomain on a decision: two children with refreshed bounds,
/// incremented depth, and the parent duals attached.
pub fn split_relu(
    net: &VerificationNetwork,
    domain: &InputDomain,
    sub: &Subdomain,
    decision: (usize, usize),
    full_recompute: bool,
) -> Result<(Subdomain, Subdomain)> {
    let (layer, index) = decision;
    let make = |sign: SplitSign| -> Result<Subdomain> {
        let mut splits = sub.splits.clone();
        splits.insert(layer, index, sign)?;
        let stack = refresh_after_split(
            net,
            domain,
            &sub.stack,
            &splits,
            (layer, index, sign),
            full_recompute,
        )?;
        Ok(Subdomain {
            id: 0, // assigned by the engine on admission
            splits,
            stack,
            lower_bound: sub.lower_bound,
            parent_rho: sub.parent_rho.clone(),
            depth: sub.depth + 1,
            queue_tag: sub.queue_tag,
        })
    };
    Ok((make(SplitSign::Active)?, make(SplitSign::Inactive)?))
}

/// A bounded child: the subdomain plus its upper-bound evaluation.
pub struct BoundedChild {
    pub sub: Subdomain,
    pub ub_value: f64,
    pub ub_input: Array1<f64>,
    pub failsafe_triggered: bool,
}

fn bound_child(
    net: &VerificationNetwork,
    domain: &InputDomain,
    mut child: Subdomain,
    parent_lb: f64,
    backend: &BoundBackend,
) -> Result<BoundedChild> {
    let outcome = bound_subdomain(
        net,
        domain,
        &child.stack,
        &child.splits,
        &child.parent_rho,
        Some(parent_lb),
        backend,
        child.queue_tag,
    )?;
    child.lower_bound = outcome.lb;
    child.parent_rho = outcome.rho;
    if outcome.failsafe_triggered {
        child.queue_tag = QueueTag::Supergradient;
    }
    let ub_input = outcome.candidate_input;
    let ub_value = evaluate(net, &domain.clip(&ub_input))?;
    Ok(BoundedChild {
        sub: child,
        ub_value,
        ub_input,
        failsafe_triggered: outcome.failsafe_triggered,
    })
}

/// Bound both children of every candidate with the configured backend and
/// return the argmax-improvement decision, the full improvement vector, and
/// the chosen children (so the engine does not re-bound them).
pub fn strong_branch(
    net: &VerificationNetwork,
    domain: &InputDomain,
    sub: &Subdomain,
    backend: &BoundBackend,
    candidates: &[(usize, usize)],
    full_recompute: bool,
) -> Result<(BranchDecision, Vec<f64>, [BoundedChild; 2])> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mut ms = Vec::with_capacity(candidates.len());
    let mut best: Option<(usize, f64, [BoundedChild; 2])> = None;
    for (i, &cand) in candidates.iter().enumerate() {
        let (a, b) = split_relu(net, domain, sub, cand, full_recompute)?;
        let ca = bound_child(net, domain, a, sub.lower_bound, backend)?;
        let cb = bound_child(net, domain, b, sub.lower_bound, backend)?;
        let m = improvement_measure(sub.lower_bound, ca.sub.lower_bound, cb.sub.lower_bound)?;
        ms.push(m);
        let better = match &best {
            Some((_, bm, _)) => m > *bm,
            None => true,
        };
        if better {
            best = Some((i, m, [ca, cb]));
        }
    }
    let (idx, m, children) = best.expect("non-empty candidates");
    Ok((
        BranchDecision {
            layer: candidates[idx].0,
            index: candidates[idx].1,
            score: m,
        },
        ms,
        children,
    ))
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

enum Processed {
    Sat {
        witness: Array1<f64>,
        value: f64,
    },
    Children {
        children: Vec<BoundedChild>,
        min_ub: f64,
        used_backup: bool,
        used_gnn: bool,
        exact_leaf: bool,
    },
}

struct Engine<'a> {
    net: &'a VerificationNetwork,
    domain: &'a InputDomain,
    strategy: &'a BranchStrategy,
    backend: &'a BoundBackend,
    config: &'a BabConfig,
}

impl<'a> Engine<'a> {
    fn process(&self, sub: &Subdomain) -> Result<Processed> {
        let candidates = sub.stack.ambiguous_neurons();
        if candidates.is_empty() {
            // No ReLU left to split: the Planet LP is exact here.
            let b = planet_lp_bound(self.net, &sub.stack, &sub.splits)?;
            if let Some(input) = &b.input {
                let v = evaluate(self.net, &self.domain.clip(input))?;
                if v < 0.0 {
                    return Ok(Processed::Sat {
                        witness: self.domain.clip(input),
                        value: v,
                    });
                }
            }
            // Exact bound is nonnegative (or region empty): prune.
            return Ok(Processed::Children {
                children: Vec::new(),
                min_ub: f64::INFINITY,
                used_backup: false,
                used_gnn: false,
                exact_leaf: true,
            });
        }

        let mut used_backup = false;
        let mut used_gnn = false;
        let children: Vec<BoundedChild> = match self.strategy {
            BranchStrategy::Random => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(self.config.seed ^ sub.id.wrapping_mul(0x9E3779B97F4A7C15));
                let cand = candidates[rng.gen_range(0..candidates.len())];
                let (a, b) = split_relu(self.net, self.domain, sub, cand, self.config.full_recompute)?;
                vec![
                    bound_child(self.net, self.domain, a, sub.lower_bound, self.backend)?,
                    bound_child(self.net, self.domain, b, sub.lower_bound, self.backend)?,
                ]
            }
            BranchStrategy::BabsrSub => {
                let dec = babsr_decide(self.net, &sub.stack).ok_or(Error::EmptyCandidates)?;
                let (a, b) = split_relu(
                    self.net,
                    self.domain,
                    sub,
                    (dec.layer, dec.index),
                    self.config.full_recompute,
                )?;
                vec![
                    bound_child(self.net, self.domain, a, sub.lower_bound, self.backend)?,
                    bound_child(self.net, self.domain, b, sub.lower_bound, self.backend)?,
                ]
            }
            BranchStrategy::Strong => {
                let (_, _, children) = strong_branch(
                    self.net,
                    self.domain,
                    sub,
                    self.backend,
                    &candidates,
                    self.config.full_recompute,
                )?;
                children.into()
            }
            BranchStrategy::Gnn {
                params,
                failsafe_threshold,
            } => {
                used_gnn = true;
                let sol = inner_minimize(self.net, &sub.stack, &sub.parent_rho)?;
                let features = build_branch_features(
                    self.net,
                    &sub.stack,
                    &sol,
                    &sub.parent_rho,
                    params.include_primal_dual,
                )?;
                let dec = score_and_decide(self.net, &features, &candidates, params)?;
                let (a, b) = split_relu(
                    self.net,
                    self.domain,
                    sub,
                    (dec.layer, dec.index),
                    self.config.full_recompute,
                )?;
                let ca = bound_child(self.net, self.domain, a, sub.lower_bound, self.backend)?;
                let cb = bound_child(self.net, self.domain, b, sub.lower_bound, self.backend)?;
                let m_gnn =
                    improvement_measure(sub.lower_bound, ca.sub.lower_bound, cb.sub.lower_bound)?;
                let mut chosen = vec![ca, cb];
                if m_gnn < *failsafe_threshold {
                    if let Some(backup) = babsr_decide(self.net, &sub.stack) {
                        if (backup.layer, backup.index) != (dec.layer, dec.index) {
                            let (ba, bb) = split_relu(
                                self.net,
                                self.domain,
                                sub,
                                (backup.layer, backup.index),
                                self.config.full_recompute,
                            )?;
                            let cba =
                                bound_child(self.net, self.domain, ba, sub.lower_bound, self.backend)?;
                            let cbb =
                                bound_child(self.net, self.domain, bb, sub.lower_bound, self.backend)?;
                            let m_backup = improvement_measure(
                                sub.lower_bound,
                                cba.sub.lower_bound,
                                cbb.sub.lower_bound,
                            )?;
                            if !crate::branchgnn::failsafe_choose(m_gnn, m_backup) {
                                chosen = vec![cba, cbb];
                                used_backup = true;
                            }
                        }
                    }
                }
                chosen
            }
        };
        let min_ub = children
            .iter()
            .map(|c| c.ub_value)
            .fold(f64::INFINITY, f64::min);
        Ok(Processed::Children {
            children,
            min_ub,
            used_backup,
            used_gnn,
            exact_leaf: false,
        })
    }
}

/// Run branch and bound to completion, counterexample, or timeout.
pub fn verify(
    net: &VerificationNetwork,
    domain: &InputDomain,
    strategy: &BranchStrategy,
    backend: &BoundBackend,
    config: &BabConfig,
) -> Result<VerificationResult> {
    let start = Instant::now();
    let timed_out = |start: &Instant| match config.timeout {
        Some(t) => start.elapsed() >= t,
        None => false,
    };
    let mut stats = BabStats::default();
    let mut global_ub = 0.0_f64;
    let mut lb_traj = Vec::new();
    let mut ub_traj = Vec::new();
    let mut branches = 0u64;
    let mut next_id = 0u64;

    let finish = |status: Status,
                  witness: Option<Array1<f64>>,
                  branches: u64,
                  global_lb: f64,
                  global_ub: f64,
                  lb_traj: Vec<f64>,
                  ub_traj: Vec<f64>,
                  stats: BabStats,
                  start: &Instant| {
        Ok(VerificationResult {
            status,
            witness,
            branches,
            wall_time: start.elapsed().as_secs_f64(),
            global_lb,
            global_ub,
            global_lb_trajectory: lb_traj,
            global_ub_trajectory: ub_traj,
            stats,
        })
    };

    if timed_out(&start) {
        return finish(
            Status::Timeout,
            None,
            0,
            f64::NEG_INFINITY,
            global_ub,
            lb_traj,
            ub_traj,
            stats,
            &start,
        );
    }

    // Root.
    let root_stack = compute_stack(net, domain, &SplitSet::new(), config.intermediate)?;
    let rho0 = DualState::zeros(net);
    let root_outcome = bound_subdomain(
        net,
        domain,
        &root_stack,
        &SplitSet::new(),
        &rho0,
        None,
        backend,
        QueueTag::Main,
    )?;
    let root_ub = evaluate(net, &domain.clip(&root_outcome.candidate_input))?;
    if root_ub < 0.0 {
        let witness = domain.clip(&root_outcome.candidate_input);
        return finish(
            Status::Falsified,
            Some(witness),
            0,
            root_outcome.lb,
            root_ub,
            lb_traj,
            ub_traj,
            stats,
            &start,
        );
    }
    global_ub = global_ub.min(root_ub);
    let mut root = Subdomain {
        id: next_id,
        splits: SplitSet::new(),
        stack: root_stack,
        lower_bound: root_outcome.lb,
        parent_rho: root_outcome.rho,
        depth: 0,
        queue_tag: if root_outcome.failsafe_triggered {
            stats.supergradient_queue_subdomains += 1;
            stats.bound_failsafe_triggers += 1;
            QueueTag::Supergradient
        } else {
            QueueTag::Main
        },
    };
    next_id += 1;
    lb_traj.push(root.lower_bound);
    ub_traj.push(global_ub.min(0.0));
    if root.lower_bound >= global_ub.min(0.0) {
        return finish(
            Status::Verified,
            None,
            0,
            root.lower_bound,
            global_ub,
            lb_traj,
            ub_traj,
            stats,
            &start,
        );
    }
    let mut queue = DomainQueue::new();
    root.id = 0;
    queue.push(root);

    let engine = Engine {
        net,
        domain,
        strategy,
        backend,
        config,
    };

    loop {
        if queue.is_empty() {
            let lb = lb_traj.last().copied().unwrap_or(0.0);
            return finish(
                Status::Verified,
                None,
                branches,
                lb.max(0.0),
                global_ub,
                lb_traj,
                ub_traj,
                stats,
                &start,
            );
        }
        if timed_out(&start) {
            let lb = queue.min_lb().unwrap_or(0.0);
            return finish(
                Status::Timeout,
                None,
                branches,
                lb,
                global_ub,
                lb_traj,
                ub_traj,
                stats,
                &start,
            );
        }
        if let Some(cap) = config.max_branches {
            if branches >= cap {
                let lb = queue.min_lb().unwrap_or(0.0);
                return finish(
                    Status::Timeout,
                    None,
                    branches,
                    lb,
                    global_ub,
                    lb_traj,
                    ub_traj,
                    stats,
                    &start,
                );
            }
        }
        let prune_at = global_ub.min(0.0);
        if config.eps_gap > 0.0 {
            let lb = queue.min_lb().unwrap_or(prune_at);
            if prune_at - lb < config.eps_gap {
                let status = if lb >= 0.0 {
                    Status::Verified
                } else {
                    Status::Timeout
                };
                return finish(
                    status, None, branches, lb, global_ub, lb_traj, ub_traj, stats, &start,
                );
            }
        }

        let batch = queue.pick_out_batch(config.batch_size)?;
        let results: Vec<Result<Processed>> =
            batch.par_iter().map(|sub| engine.process(sub)).collect();

        for result in results {
            match result? {
                Processed::Sat { witness, value } => {
                    return finish(
                        Status::Falsified,
                        Some(witness),
                        branches,
                        queue.min_lb().unwrap_or(value),
                        value,
                        lb_traj,
                        ub_traj,
                        stats,
                        &start,
                    );
                }
                Processed::Children {
                    children,
                    min_ub,
                    used_backup,
                    used_gnn,
                    exact_leaf,
                } => {
                    if exact_leaf {
                        stats.exact_leaf_bounds += 1;
                        continue;
                    }
                    if used_gnn {
                        stats.gnn_branch_decisions += 1;
                    }
                    if used_backup {
                        stats.backup_branch_decisions += 1;
                    }
                    if min_ub < 0.0 {
                        let witness_child = children
                            .iter()
                            .find(|c| c.ub_value == min_ub)
                            .expect("min over children");
                        let witness = domain.clip(&witness_child.ub_input);
                        return finish(
                            Status::Falsified,
                            Some(witness),
                            branches + 2,
                            queue.min_lb().unwrap_or(min_ub),
                            min_ub,
                            lb_traj,
                            ub_traj,
                            stats,
                            &start,
                        );
                    }
                    global_ub = global_ub.min(min_ub);
                    branches += 2;
                    for mut child in children {
                        if child.failsafe_triggered {
                            stats.bound_failsafe_triggers += 1;
                        }
                        if child.sub.queue_tag == QueueTag::Supergradient {
                            stats.supergradient_queue_subdomains += 1;
                        }
                        if child.sub.lower_bound >= global_ub.min(0.0) {
                            continue; // pruned
                        }
                        child.sub.id = next_id;
                        next_id += 1;
                        queue.push(child.sub);
                    }
                }
            }
        }
        let lb_now = queue.min_lb().unwrap_or(0.0);
        lb_traj.push(lb_now.min(0.0).max(-1e30));
        ub_traj.push(global_ub.min(0.0));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Layer;
    use crate::oracle::{exhaustive_min, exhaustive_verify, VerifyStatus};
    use ndarray::array;

    fn one_d_net(slope: f64, offset: f64) -> VerificationNetwork {
        // f(x) = slope·x + offset on [0,1] via a passing hidden layer.
        VerificationNetwork::new(vec![
            Layer::dense(array![[1.0]], array![2.0]).unwrap(),
            Layer::dense(array![[slope]], array![offset - 2.0 * slope]).unwrap(),
        ])
        .unwrap()
    }

    fn unit_domain(d: usize) -> InputDomain {
        InputDomain::new(Array1::zeros(d), Array1::ones(d)).unwrap()
    }

    #[test]
    fn trivially_true_property_verifies_without_branching() {
        let net = one_d_net(1.0, 1.0); // x + 1 >= 1 on [0,1]
        let r = verify(
            &net,
            &unit_domain(1),
            &BranchStrategy::BabsrSub,
            &BoundBackend::LpOracle,
            &BabConfig::default(),
        )
        .unwrap();
        assert_eq!(r.status, Status::Verified);
        assert_eq!(r.branches, 0);
    }

    #[test]
    fn counterexample_found_with_valid_witness() {
        let net = one_d_net(1.0, -0.5); // x − 0.5 < 0 for x < 0.5
        let r = verify(
            &net,
            &unit_domain(1),
            &BranchStrategy::BabsrSub,
            &BoundBackend::LpOracle,
            &BabConfig::default(),
        )
        .unwrap();
        assert_eq!(r.status, Status::Falsified);
        let w = r.witness.unwrap();
        assert!(evaluate(&net, &w).unwrap() < 0.0);
        assert!(unit_domain(1).contains(&w, 1e-12));
    }

    #[test]
    fn zero_timeout_reports_timeout() {
        let net = one_d_net(1.0, 1.0);
        let config = BabConfig {
            timeout: Some(Duration::from_secs(0)),
            ..BabConfig::default()
        };
        let r = verify(
            &net,
            &unit_domain(1),
            &BranchStrategy::Random,
            &BoundBackend::Interval,
            &config,
        )
        .unwrap();
        assert_eq!(r.status, Status::Timeout);
    }

    #[test]
    fn queue_picks_lowest_bounds_first() {
        let net = one_d_net(1.0, 1.0);
        let dom = unit_domain(1);
        let stack = compute_stack(&net, &dom, &SplitSet::new(), BoundMethod::Interval).unwrap();
        let mk = |id: u64, lb: f64| Subdomain {
            id,
            splits: SplitSet::new(),
            stack: stack.clone(),
            lower_bound: lb,
            parent_rho: DualState::zeros(&net),
            depth: 0,
            queue_tag: QueueTag::Main,
        };
        let mut q = DomainQueue::new();
        q.push(mk(0, -3.0));
        q.push(mk(1, -1.0));
        q.push(mk(2, -2.0));
        let batch = q.pick_out_batch(2).unwrap();
        assert_eq!(batch[0].lower_bound, -3.0);
        assert_eq!(batch[1].lower_bound, -2.0);
        // n larger than the queue drains it.
        let rest = q.pick_out_batch(10).unwrap();
        assert_eq!(rest.len(), 1);
        assert!(q.pick_out_batch(1).is_err());
        // Repeated pick_out yields nondecreasing minima.
        let mut q = DomainQueue::new();
        for (i, lb) in [-0.5, -4.0, -2.0, -1.0, -3.0].iter().enumerate() {
            q.push(mk(i as u64, *lb));
        }
        let mut prev = f64::NEG_INFINITY;
        while !q.is_empty() {
            let s = q.pick_out_batch(1).unwrap();
            assert!(s[0].lower_bound >= prev);
            prev = s[0].lower_bound;
        }
    }

    #[test]
    fn split_children_differ_only_at_decision() {
        let net = crate::relax::tests::random_net(4, &[2, 6, 1], 1.4);
        let dom = InputDomain::new(array![-1.0, -1.0], array![1.0, 1.0]).unwrap();
        let stack = compute_stack(&net, &dom, &SplitSet::new(), BoundMethod::LinearBackward)
            .unwrap();
        let sub = Subdomain {
            id: 0,
            splits: SplitSet::new(),
            stack: stack.clone(),
            lower_bound: -1.0,
            parent_rho: DualState::zeros(&net),
            depth: 3,
            queue_tag: QueueTag::Main,
        };
        let cand = stack.ambiguous_neurons()[0];
        let (a, b) = split_relu(&net, &dom, &sub, cand, false).unwrap();
        assert_eq!(a.depth, 4);
        assert_eq!(b.depth, 4);
        assert_eq!(a.splits.len(), 1);
        assert_eq!(a.splits.get(cand.0, cand.1), Some(SplitSign::Active));
        assert_eq!(b.splits.get(cand.0, cand.1), Some(SplitSign::Inactive));
    }

    #[test]
    fn split_partitions_the_exact_minimum() {
        for seed in 0..5u64 {
            let net = crate::relax::tests::random_net(seed + 40, &[2, 5, 1], 1.5);
            let dom = InputDomain::new(array![-1.0, -1.0], array![1.0, 1.0]).unwrap();
            let stack =
                compute_stack(&net, &dom, &SplitSet::new(), BoundMethod::LinearBackward).unwrap();
            let Some(&cand) = stack.ambiguous_neurons().first() else {
                continue;
            };
            let parent = exhaustive_verify(&net, &dom).unwrap();
            let mut sa = SplitSet::new();
            sa.insert(cand.0, cand.1, SplitSign::Active).unwrap();
            let mut sb = SplitSet::new();
            sb.insert(cand.0, cand.1, SplitSign::Inactive).unwrap();
            let ma = exhaustive_min(&net, &dom, &sa).unwrap().min_value;
            let mb = exhaustive_min(&net, &dom, &sb).unwrap().min_value;
            assert!(
                (parent.min_value - ma.min(mb)).abs() <= 1e-7,
                "partition broke: parent {} vs children {} / {}",
                parent.min_value,
                ma,
                mb
            );
        }
    }

    #[test]
    fn babsr_scores_zero_for_unambiguous() {
        let net = crate::relax::tests::random_net(5, &[2, 5, 1], 1.3);
        let dom = InputDomain::new(array![-1.0, -1.0], array![1.0, 1.0]).unwrap();
        let stack =
            compute_stack(&net, &dom, &SplitSet::new(), BoundMethod::LinearBackward).unwrap();
        for ((k, j), score) in babsr_scores(&net, &stack) {
            let st = stack.relu_state(k, j);
            assert!(st.beta > 0.0);
            assert!(score >= 0.0);
        }
        // Output-adjacent neuron score is |w|·β.
        let net = VerificationNetwork::new(vec![
            Layer::dense(array![[1.0], [1.0]], array![0.0, 0.5]).unwrap(),
            Layer::dense(array![[2.0, -3.0]], array![0.0]).unwrap(),
        ])
        .unwrap();
        let dom = InputDomain::new(array![-1.0], array![1.0]).unwrap();
        let stack =
            compute_stack(&net, &dom, &SplitSet::new(), BoundMethod::LinearBackward).unwrap();
        let scores = babsr_scores(&net, &stack);
        for ((k, j), s) in scores {
            let beta = stack.relu_state(k, j).beta;
            let w = if j == 0 { 2.0 } else { 3.0 };
            assert!((s - beta * w).abs() < 1e-12);
        }
    }

    fn status_of(r: &crate::oracle::ExhaustiveResult) -> Status {
        match r.status {
            VerifyStatus::Unsat => Status::Verified,
            VerifyStatus::Sat => Status::Falsified,
        }
    }

    #[test]
    fn engine_agrees_with_oracle_on_tiny_nets() {
        let strategies: Vec<BranchStrategy> =
            vec![BranchStrategy::Random, BranchStrategy::BabsrSub];
        let backends: Vec<BoundBackend> = vec![
            BoundBackend::LpOracle,
            BoundBackend::Supergradient { steps: 300, lr: 1e-2 },
            BoundBackend::LinearBackward,
        ];
        for seed in 0..8u64 {
            let net = crate::relax::tests::random_net(seed + 900, &[2, 5, 1], 1.6);
            let dom = InputDomain::new(array![-1.0, -1.0], array![1.0, 1.0]).unwrap();
            let oracle = exhaustive_verify(&net, &dom).unwrap();
            for strategy in &strategies {
                for backend in &backends {
                    let r = verify(
                        &net,
                        &dom,
                        strategy,
                        backend,
                        &BabConfig {
                            batch_size: 4,
                            seed,
                            ..BabConfig::default()
                        },
                    )
                    .unwrap();
                    assert_eq!(
                        r.status,
                        status_of(&oracle),
                        "seed {seed} strategy {} backend {}",
                        strategy.name(),
                        backend.name()
                    );
                    if let Some(w) = &r.witness {
                        assert!(evaluate(&net, w).unwrap() < 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn batch_size_does_not_change_status() {
        for seed in 0..4u64 {
            let net = crate::relax::tests::random_net(seed + 300, &[2, 6, 1], 1.5);
            let dom = InputDomain::new(array![-1.0, -1.0], array![1.0, 1.0]).unwrap();
            let mut statuses = Vec::new();
            for batch in [1usize, 3, 16] {
                let r = verify(
                    &net,
                    &dom,
                    &BranchStrategy::BabsrSub,
                    &BoundBackend::LpOracle,
                    &BabConfig {
                        batch_size: batch,
                        ..BabConfig::default()
                    },
                )
                .unwrap();
                statuses.push(r.status);
            }
            assert!(statuses.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn anytime_lower_bound_nondecreasing_with_exact_bounding() {
        let net = crate::relax::tests::random_net(larger_seed(), &[2, 7, 1], 1.6);
        let dom = InputDomain::new(array![-1.0, -1.0], array![1.0, 1.0]).unwrap();
        let r = verify(
            &net,
            &dom,
            &BranchStrategy::BabsrSub,
            &BoundBackend::LpOracle,
            &BabConfig {
                batch_size: 1,
                ..BabConfig::default()
            },
        )
        .unwrap();
        if r.status == Status::Verified && r.global_lb_trajectory.len() > 2 {
            for w in r.global_lb_trajectory.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "trajectory decreased: {w:?}");
            }
        }
    }

    fn larger_seed() -> u64 {
        606
    }

    #[test]
    fn diverging_stub_routes_to_supergradient_queue_and_stays_sound() {
        for seed in 0..4u64 {
            let net = crate::relax::tests::random_net(seed + 700, &[2, 5, 1], 1.6);
            let dom = InputDomain::new(array![-1.0, -1.0], array![1.0, 1.0]).unwrap();
            let oracle = exhaustive_verify(&net, &dom).unwrap();
            let backend = BoundBackend::DivergingDuals {
                scale: 1e3,
                failsafe_threshold: 0.05,
                fallback_steps: 300,
                fallback_lr: 1e-2,
            };
            let r = verify(
                &net,
                &dom,
                &BranchStrategy::BabsrSub,
                &backend,
                &BabConfig {
                    batch_size: 4,
                    ..BabConfig::default()
                },
            )
            .unwrap();
            assert_eq!(r.status, status_of(&oracle), "seed {seed}");
            if let Some(w) = &r.witness {
                assert!(evaluate(&net, w).unwrap() < 0.0);
            }
            // The stub's bounds are terrible, so any run that had to search
            // must have engaged the fail-safe queue.
            if r.status == Status::Verified {
                assert!(
                    r.stats.supergradient_queue_subdomains > 0,
                    "fail-safe queue never used on a verified run"
                );
            }
        }
    }

    #[test]
    fn gnn_strategy_and_backend_run_end_to_end() {
        let bparams = Arc::new(BranchGnnParameters::init_with(5, 16, true));
        let gparams = Arc::new(BoundGnnParameters::prop1_parameters(8).unwrap());
        for seed in 0..3u64 {
            let net = crate::relax::tests::random_net(seed + 800, &[2, 5, 1], 1.6);
            let dom = InputDomain::new(array![-1.0, -1.0], array![1.0, 1.0]).unwrap();
            let oracle = exhaustive_verify(&net, &dom).unwrap();
            let r = verify(
                &net,
                &dom,
                &BranchStrategy::Gnn {
                    params: bparams.clone(),
                    failsafe_threshold: crate::branchgnn::BRANCH_FAILSAFE_THRESHOLD,
                },
                &BoundBackend::Gnn {
                    params: gparams.clone(),
                    iters: 30,
                    eta0: 1e-2,
                    schedule: StepSchedule::DecaySqrt,
                    failsafe_threshold: 0.05,
                    fallback_steps: 300,
                    fallback_lr: 1e-2,
                },
                &BabConfig {
                    batch_size: 8,
                    ..BabConfig::default()
                },
            )
            .unwrap();
            assert_eq!(r.status, status_of(&oracle), "seed {seed}");
        }
    }

    #[test]
    fn compute_ub_matches_direct_evaluation() {
        let net = crate::relax::tests::random_net(12, &[3, 6, 1], 1.2);
        let dom =
            InputDomain::new(array![-1.0, -1.0, -1.0], array![1.0, 1.0, 1.0]).unwrap();
        let stack =
            compute_stack(&net, &dom, &SplitSet::new(), BoundMethod::LinearBackward).unwrap();
        let exact = exhaustive_verify(&net, &dom).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let rho = DualState {
                rho: (1..net.depth())
                    .map(|k| {
                        Array1::from_shape_fn(net.layer_dim(k), |_| rng.gen_range(-1.0..1.0))
                    })
                    .collect(),
            };
            let sol = inner_minimize(&net, &stack, &rho).unwrap();
            let (ub, x) = compute_ub(&net, &dom, &sol).unwrap();
            assert_eq!(ub, evaluate(&net, &x).unwrap());
            assert!(ub >= exact.min_value - 1e-9);
            assert!(dom.contains(&x, 1e-12));
        }
    }

    #[test]
    fn strong_branching_picks_argmax_improvement() {
        let net = crate::relax::tests::random_net(13, &[2, 5, 1], 1.5);
        let dom = InputDomain::new(array![-1.0, -1.0], array![1.0, 1.0]).unwrap();
        let stack =
            compute_stack(&net, &dom, &SplitSet::new(), BoundMethod::LinearBackward).unwrap();
        let root_bound = planet_lp_bound(&net, &stack, &SplitSet::new()).unwrap();
        if root_bound.value >= 0.0 {
            return;
        }
        let sub = Subdomain {
            id: 0,
            splits: SplitSet::new(),
            stack: stack.clone(),
            lower_bound: root_bound.value,
            parent_rho: DualState::zeros(&net),
            depth: 0,
            queue_tag: QueueTag::Main,
        };
        let candidates = stack.ambiguous_neurons();
        let (dec, ms, _) = strong_branch(
            &net,
            &dom,
            &sub,
            &BoundBackend::LpOracle,
            &candidates,
            false,
        )
        .unwrap();
        let best = ms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let pos = candidates
            .iter()
            .position(|&c| c == (dec.layer, dec.index))
            .unwrap();
        assert_eq!(ms[pos], best);
        // With exact bounding, improvements live in [0, 1].
        assert!(ms.iter().all(|m| *m >= -1e-9 && *m <= 1.0 + 1e-9));
        // Single candidate: it gets chosen.
        let (dec1, ms1, _) = strong_branch(
            &net,
            &dom,
            &sub,
            &BoundBackend::LpOracle,
            &candidates[..1],
            false,
        )
        .unwrap();
        assert_eq!((dec1.layer, dec1.index), candidates[0]);
        assert_eq!(ms1.len(), 1);
    }

    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;
}
