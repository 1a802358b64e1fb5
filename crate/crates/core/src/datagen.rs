//! Desk-scale data generation: random verification networks with a target
//! ambiguity level, verification properties via ε binary search, branching
//! training data (interleaved cheap/strong branching), and bounding training
//! data collected from complete BaB runs.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bab::{
    bound_subdomain, split_relu, strong_branch, BabConfig, BoundBackend, BranchStrategy,
    DomainQueue, QueueTag, Status, Subdomain, VerificationResult,
};
use crate::boundgnn::{BoundTrainConfig, BoundTrainItem};
use crate::branchgnn::{build_branch_features, BranchTrainItem};
use crate::dual::{inner_minimize, supergradient_ascent, DualState};
use crate::error::{Error, Result};
use crate::jsonfmt;
use crate::model::{
    evaluate, load_network, merge_property, save_network, save_property, InputDomain, Layer,
    Network, PropertyFile, PropertySpec, VerificationNetwork,
};
use crate::relax::{interval_bounds, BoundsStack, SplitSet, SplitSign};

// ---------------------------------------------------------------------------
// Random networks
// ---------------------------------------------------------------------------

/// Shape and calibration of a generated network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Input, hidden..., output dimensions.
    pub layer_sizes: Vec<usize>,
    /// Target fraction of ambiguous ReLUs at the reference domain.
    pub ambiguity_target: f64,
    /// Reference ℓ∞ radius around the reference center.
    pub reference_radius: f64,
    pub reference_center: f64,
    pub weight_scale: f64,
    /// Separate scale for the output layer (defaults to `weight_scale`);
    /// Small output weights keep dual magnitudes inside a low-learning-rate
    /// ascent's reach.
    pub output_scale: Option<f64>,
    pub seed: u64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            layer_sizes: vec![2, 8, 1],
            ambiguity_target: 0.5,
            reference_radius: 0.25,
            reference_center: 0.5,
            weight_scale: 1.0,
            output_scale: None,
            seed: 0,
        }
    }
}

impl NetworkSpec {
    pub fn reference_domain(&self) -> InputDomain {
        let d = self.layer_sizes[0];
        InputDomain::new(
            Array1::from_elem(d, self.reference_center - self.reference_radius),
            Array1::from_elem(d, self.reference_center + self.reference_radius),
        )
        .expect("radius positive")
    }
}

fn ambiguous_fraction(net: &Network, domain: &InputDomain) -> Result<f64> {
    let scalar = as_probe_verification_net(net)?;
    let stack = interval_bounds(&scalar, domain, &SplitSet::new())?;
    let total: usize = (1..scalar.depth()).map(|k| scalar.layer_dim(k)).sum();
    Ok(stack.ambiguous_neurons().len() as f64 / total.max(1) as f64)
}

/// View a (possibly multi-output) network as scalar-output by summing output
/// rows; hidden-layer bounds are unaffected by the output map.
fn as_probe_verification_net(net: &Network) -> Result<VerificationNetwork> {
    if net.output_dim() == 1 {
        return VerificationNetwork::new(net.layers().to_vec());
    }
    let mut layers = net.layers().to_vec();
    let last = layers.pop().expect("depth >= 2");
    let (w, b) = last.linear_view();
    let row = w.sum_axis(ndarray::Axis(0));
    let merged = Array2::from_shape_vec((1, row.len()), row.to_vec()).expect("shape");
    layers.push(Layer::dense(merged, Array1::from(vec![b.sum()]))?);
    VerificationNetwork::new(layers)
}

/// Generate a network whose ambiguous-ReLU fraction at the reference domain
/// is within ±0.1 of the target, deterministic per seed. Biases are placed
/// per layer to push each neuron's interval onto the wanted side of zero.
pub fn random_network(spec: &NetworkSpec) -> Result<Network> {
    let mut best_fraction = f64::NAN;
    for attempt in 0..8u64 {
        let net = random_network_attempt(spec, attempt)?;
        let fraction = ambiguous_fraction(&net, &spec.reference_domain())?;
        if (fraction - spec.ambiguity_target).abs() <= 0.1 {
            return Ok(net);
        }
        if best_fraction.is_nan()
            || (fraction - spec.ambiguity_target).abs() < (best_fraction - spec.ambiguity_target).abs()
        {
            best_fraction = fraction;
        }
    }
    Err(Error::AmbiguityTargetUnreachable {
        target: spec.ambiguity_target,
        best: best_fraction,
        attempts: 8,
    })
}

fn random_network_attempt(spec: &NetworkSpec, attempt: u64) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(attempt.wrapping_mul(0xA5A5_5A5A)));
    let sizes = &spec.layer_sizes;
    if sizes.len() < 3 {
        return Err(Error::InvalidNetwork(
            "need at least input, one hidden, and output sizes".into(),
        ));
    }
    let domain = spec.reference_domain();
    let mut layers: Vec<Layer> = Vec::with_capacity(sizes.len() - 1);

    // Post-activation bounds of the previous layer under the biases fixed so
    // far; starts at the input box.
    let mut zl = domain.lower.clone();
    let mut zu = domain.upper.clone();
    for li in 0..sizes.len() - 1 {
        let (din, dout) = (sizes[li], sizes[li + 1]);
        let is_output = li == sizes.len() - 2;
        let base_scale = if is_output {
            spec.output_scale.unwrap_or(spec.weight_scale)
        } else {
            spec.weight_scale
        };
        let scale = base_scale / (din as f64).sqrt();
        let weights = Array2::from_shape_fn((dout, din), |_| rng.gen_range(-scale..scale));
        let bias = if is_output {
            Array1::from_shape_fn(dout, |_| rng.gen_range(-0.1..0.1))
        } else {
            // Zero-bias interval per neuron, then place the bias so the
            // interval straddles zero (ambiguous) or clears it (fixed).
            let mut bias = Array1::zeros(dout);
            let n_amb = (spec.ambiguity_target * dout as f64).round() as usize;
            let mut idx: Vec<usize> = (0..dout).collect();
            idx.shuffle(&mut rng);
            let ambiguous: std::collections::BTreeSet<usize> =
                idx.into_iter().take(n_amb).collect();
            for j in 0..dout {
                let (mut lo, mut hi) = (0.0, 0.0);
                for (i, &w) in weights.row(j).iter().enumerate() {
                    if w >= 0.0 {
                        lo += w * zl[i];
                        hi += w * zu[i];
                    } else {
                        lo += w * zu[i];
                        hi += w * zl[i];
                    }
                }
                let mid = 0.5 * (lo + hi);
                let rad = 0.5 * (hi - lo);
                if rad < 1e-9 {
                    bias[j] = if ambiguous.contains(&j) { -mid } else { -mid + 1.0 };
                    continue;
                }
                bias[j] = if ambiguous.contains(&j) {
                    -mid + rng.gen_range(-0.4..0.4) * rad
                } else {
                    let side: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    -mid + side * rad * rng.gen_range(1.1..1.6)
                };
            }
            bias
        };
        let layer = Layer::dense(weights, bias)?;
        if !is_output {
            // Propagate for the next layer's calibration.
            let dout = layer.out_dim();
            let (w, b) = layer.linear_view();
            let mut nl = Array1::zeros(dout);
            let mut nu = Array1::zeros(dout);
            for j in 0..dout {
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
                nl[j] = lo.max(0.0);
                nu[j] = hi.max(0.0);
            }
            zl = nl;
            zu = nu;
        }
        layers.push(layer);
    }
    Network::new(layers)
}

/// Shift the output bias so the exact minimum over the domain equals
/// `target_min` (oracle-calibrated; test de support for building SAT/UNSAT
/// instances with known margins).
pub fn calibrate_output_min(
    net: &Network,
    domain: &InputDomain,
    target_min: f64,
) -> Result<VerificationNetwork> {
    let scalar = VerificationNetwork::new(net.layers().to_vec())?;
    let exact = crate::oracle::exhaustive_verify(&scalar, domain)?;
    let mut layers = scalar.layers().to_vec();
    let last = layers.pop().expect("depth >= 2");
    let (w, b) = last.linear_view();
    let mut nb = b.clone();
    nb[0] += target_min - exact.min_value;
    layers.push(Layer::dense(w.clone(), nb)?);
    VerificationNetwork::new(layers)
}

// ---------------------------------------------------------------------------
// Properties
// ---------------------------------------------------------------------------

/// Everything of a property except ε.
#[derive(Debug, Clone)]
pub struct PropertyTemplate {
    pub network: Network,
    pub center: Array1<f64>,
    pub label: usize,
    pub adv_label: usize,
    pub clip: Option<(f64, f64)>,
}

impl PropertyTemplate {
    pub fn with_epsilon(&self, epsilon: f64) -> PropertySpec {
        PropertySpec {
            network: self.network.clone(),
            center: self.center.clone(),
            epsilon,
            label: self.label,
            adv_label: self.adv_label,
            clip: self.clip,
        }
    }
}

/// Manifest record of one generated property.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropertyRecord {
    pub id: String,
    pub network: String,
    pub center: Vec<f64>,
    pub epsilon: f64,
    pub label: usize,
    pub adv_label: usize,
    pub clip: Option<(f64, f64)>,
    pub difficulty: String,
    pub solve_time_s: f64,
    pub status: Status,
}

/// Difficulty tiers as fractions of the desk timeout, mirroring the
/// 800s/2400s cuts of a 3600s budget.
pub fn difficulty_tier(solve_time: f64, timeout: f64) -> &'static str {
    if solve_time <= 0.22 * timeout {
        "easy"
    } else if solve_time <= 0.67 * timeout {
        "medium"
    } else {
        "hard"
    }
}

/// A ready-to-verify property: merged scalar network plus domain, with the
/// provenance needed to reference it from dataset records.
#[derive(Debug, Clone)]
pub struct PropertyInstance {
    pub id: String,
    pub network: String,
    pub labels: Option<(usize, usize)>,
    pub net: VerificationNetwork,
    pub domain: InputDomain,
}

pub struct BinarySearchOutcome {
    pub epsilon: f64,
    pub solve_time: f64,
    pub result: VerificationResult,
}

/// Largest ε (within `tol`) whose property verifies within the timeout.
pub fn binary_search_epsilon(
    template: &PropertyTemplate,
    lo: f64,
    hi: f64,
    tol: f64,
    strategy: &BranchStrategy,
    backend: &BoundBackend,
    config: &BabConfig,
) -> Result<BinarySearchOutcome> {
    if !(lo < hi) {
        return Err(Error::InvalidProperty("binary search needs lo < hi".into()));
    }
    let run = |eps: f64| -> Result<VerificationResult> {
        let (net, dom) = merge_property(&template.with_epsilon(eps))?;
        crate::bab::verify(&net, &dom, strategy, backend, config)
    };
    let first = run(lo)?;
    if first.status != Status::Verified {
        return Err(Error::InvalidProperty(format!(
            "property unverified even at epsilon {lo}"
        )));
    }
    let mut best = lo;
    let (mut lo, mut hi) = (lo, hi);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let r = run(mid)?;
        if r.status == Status::Verified {
            best = mid;
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let fin = run(best)?;
    Ok(BinarySearchOutcome {
        epsilon: best,
        solve_time: fin.wall_time,
        result: fin,
    })
}

/// Generate `count` properties on fresh random base networks: write network
/// and property files plus a JSON-lines manifest, all under `dir`. Network
/// paths in the manifest are relative to it. With `deterministic`, recorded
/// solve times are zeroed so identical seeds give byte-identical manifests.
#[allow(clippy::too_many_arguments)]
pub fn gen_property_set(
    dir: &Path,
    count: usize,
    base_spec: &NetworkSpec,
    eps_hi: f64,
    tol: f64,
    strategy: &BranchStrategy,
    backend: &BoundBackend,
    config: &BabConfig,
    timeout_for_tiers: f64,
    seed: u64,
    deterministic: bool,
) -> Result<Vec<PropertyRecord>> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(count);
    let mut manifest = String::new();
    for i in 0..count {
        let mut spec = base_spec.clone();
        spec.seed = seed.wrapping_add(i as u64 * 7919);
        *spec.layer_sizes.last_mut().expect("sizes") = spec.layer_sizes.last().copied().unwrap().max(2);
        let net = random_network(&spec)?;
        let d = net.input_dim();
        let center = Array1::from_shape_fn(d, |_| rng.gen_range(0.35..0.65));
        let out = net.output_dim();
        let label = rng.gen_range(0..out);
        let adv_label = (label + 1 + rng.gen_range(0..out - 1)) % out;
        let template = PropertyTemplate {
            network: net.clone(),
            center,
            label,
            adv_label,
            clip: Some((0.0, 1.0)),
        };
        // Guarantee verifiability at the low end by shifting the logit gap.
        let lo = tol;
        let template = ensure_true_at(&template, lo, strategy, backend, config)?;
        let search =
            binary_search_epsilon(&template, lo, eps_hi, tol, strategy, backend, config)?;
        let net_path = dir.join(format!("net_{i:03}.json"));
        save_network(&template.network, &net_path)?;
        let prop_path = dir.join(format!("prop_{i:03}.json"));
        let prop_file = PropertyFile {
            network: format!("net_{i:03}.json"),
            center: template.center.to_vec(),
            epsilon: search.epsilon,
            label: template.label,
            adv_label: template.adv_label,
            clip: template.clip,
        };
        save_property(&prop_file, &prop_path)?;
        let record = PropertyRecord {
            id: format!("prop_{i:03}"),
            network: format!("net_{i:03}.json"),
            center: template.center.to_vec(),
            epsilon: search.epsilon,
            label: template.label,
            adv_label: template.adv_label,
            clip: template.clip,
            difficulty: difficulty_tier(search.solve_time, timeout_for_tiers).to_string(),
            solve_time_s: if deterministic { 0.0 } else { search.solve_time },
            status: search.result.status,
        };
        manifest.push_str(&jsonfmt::to_line(&record)?);
        records.push(record);
    }
    std::fs::write(dir.join("manifest.jsonl"), manifest)?;
    Ok(records)
}

/// Shift the adversarial-label bias until the property is true at ε = lo.
fn ensure_true_at(
    template: &PropertyTemplate,
    lo: f64,
    strategy: &BranchStrategy,
    backend: &BoundBackend,
    config: &BabConfig,
) -> Result<PropertyTemplate> {
    let mut t = template.clone();
    for _ in 0..32 {
        let (net, dom) = merge_property(&t.with_epsilon(lo))?;
        let r = crate::bab::verify(&net, &dom, strategy, backend, config)?;
        if r.status == Status::Verified {
            return Ok(t);
        }
        // Margin at the center tells how far to shift.
        let margin = evaluate(&net, &dom.clip(&t.center))?;
        let mut layers = t.network.layers().to_vec();
        let last = layers.pop().expect("depth >= 2");
        let (w, b) = last.linear_view();
        let mut nb = b.clone();
        nb[t.adv_label] -= (-margin).max(0.05) + 0.05;
        layers.push(Layer::dense(w.clone(), nb)?);
        t.network = Network::new(layers)?;
    }
    Err(Error::InvalidProperty(
        "could not calibrate a verifiable property".into(),
    ))
}

// ---------------------------------------------------------------------------
// Branch training data (interleaved cheap/strong collection)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchSampleRecord {
    pub property_id: String,
    pub network: String,
    /// Label pair of the merged property; absent when the network file is
    /// already scalar-output.
    pub labels: Option<(usize, usize)>,
    pub splits: Vec<(usize, usize, SplitSign)>,
    pub parent_lb: f64,
    pub parent_rho: Vec<Vec<f64>>,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
    pub stack_lower: Vec<Vec<f64>>,
    pub stack_upper: Vec<Vec<f64>>,
    pub candidates: Vec<(usize, usize)>,
    pub m_values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BranchGenConfig {
    /// Minimum samples per non-fully-explored property.
    pub samples_per_property: usize, // B
    /// Maximum cheap-heuristic steps between strong-branching samples.
    pub max_cheap_steps: usize, // q
    /// Fraction of properties explored with full strong-branching BaB.
    pub full_fraction: f64,
    /// Strong-branching candidate subset: top fraction by the cheap
    /// heuristic plus random fill to the per-layer coverage floor.
    pub top_fraction: f64,
    pub min_layer_coverage: f64,
    pub seed: u64,
    /// Safety cap on processed subdomains per property.
    pub max_steps: usize,
}

impl Default for BranchGenConfig {
    fn default() -> Self {
        BranchGenConfig {
            samples_per_property: 20,
            max_cheap_steps: 10,
            full_fraction: 0.25,
            top_fraction: 0.3,
            min_layer_coverage: 0.05,
            seed: 0,
            max_steps: 4000,
        }
    }
}

/// Top-k by the substitute heuristic plus random fill to ≥ the coverage
/// fraction on each layer.
pub fn candidate_subset(
    net: &VerificationNetwork,
    stack: &BoundsStack,
    top_fraction: f64,
    min_layer_coverage: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let scored = crate::bab::babsr_scores(net, stack);
    if scored.is_empty() {
        return Vec::new();
    }
    let mut by_score = scored.clone();
    by_score.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let take = ((scored.len() as f64 * top_fraction).ceil() as usize).max(1);
    let mut chosen: std::collections::BTreeSet<(usize, usize)> =
        by_score.iter().take(take).map(|(c, _)| *c).collect();
    // Random fill per layer up to the coverage floor.
    for k in 1..net.depth() {
        let layer_cands: Vec<(usize, usize)> = scored
            .iter()
            .map(|(c, _)| *c)
            .filter(|(l, _)| *l == k)
            .collect();
        if layer_cands.is_empty() {
            continue;
        }
        let needed = ((layer_cands.len() as f64 * min_layer_coverage).ceil() as usize).max(1);
        let mut have = layer_cands.iter().filter(|c| chosen.contains(c)).count();
        let mut pool: Vec<_> = layer_cands
            .iter()
            .filter(|c| !chosen.contains(c))
            .copied()
            .collect();
        pool.shuffle(rng);
        while have < needed {
            match pool.pop() {
                Some(c) => {
                    chosen.insert(c);
                    have += 1;
                }
                None => break,
            }
        }
    }
    chosen.into_iter().collect()
}

struct StepDriver<'a> {
    net: &'a VerificationNetwork,
    domain: &'a InputDomain,
    backend: &'a BoundBackend,
    queue: DomainQueue,
    next_id: u64,
    terminated: bool,
    steps: usize,
}

impl<'a> StepDriver<'a> {
    fn new(
        net: &'a VerificationNetwork,
        domain: &'a InputDomain,
        backend: &'a BoundBackend,
    ) -> Result<Self> {
        let stack = crate::relax::linear_backward_bounds(net, domain, &SplitSet::new())?;
        let rho0 = DualState::zeros(net);
        let outcome = bound_subdomain(
            net,
            domain,
            &stack,
            &SplitSet::new(),
            &rho0,
            None,
            backend,
            QueueTag::Main,
        )?;
        let mut driver = StepDriver {
            net,
            domain,
            backend,
            queue: DomainQueue::new(),
            next_id: 1,
            terminated: false,
            steps: 0,
        };
        let ub = evaluate(net, &domain.clip(&outcome.candidate_input))?;
        if ub < 0.0 || outcome.lb >= 0.0 {
            driver.terminated = true;
            return Ok(driver);
        }
        driver.queue.push(Subdomain {
            id: 0,
            splits: SplitSet::new(),
            stack,
            lower_bound: outcome.lb,
            parent_rho: outcome.rho,
            depth: 0,
            queue_tag: QueueTag::Main,
        });
        Ok(driver)
    }

    fn done(&self) -> bool {
        self.terminated || self.queue.is_empty()
    }

    fn pop(&mut self) -> Option<Subdomain> {
        if self.done() {
            return None;
        }
        self.queue.pick_out_batch(1).ok().map(|mut v| v.remove(0))
    }

    fn admit(&mut self, children: Vec<crate::bab::BoundedChild>) -> Result<()> {
        self.steps += 1;
        for mut c in children {
            if c.ub_value < 0.0 {
                self.terminated = true;
                return Ok(());
            }
            if c.sub.lower_bound >= 0.0 {
                continue;
            }
            c.sub.id = self.next_id;
            self.next_id += 1;
            self.queue.push(c.sub);
        }
        Ok(())
    }

    /// One cheap-heuristic step (substitute BaBSR decision).
    fn cheap_step(&mut self) -> Result<()> {
        let Some(sub) = self.pop() else { return Ok(()) };
        let candidates = sub.stack.ambiguous_neurons();
        if candidates.is_empty() {
            // Exact leaf; resolved by the LP either way.
            let b = crate::oracle::planet_lp_bound(self.net, &sub.stack, &sub.splits)?;
            if b.value < 0.0 {
                self.terminated = true;
            }
            return Ok(());
        }
        let scored = crate::bab::babsr_scores(self.net, &sub.stack);
        let (cand, _) = scored
            .iter()
            .fold(None::<((usize, usize), f64)>, |acc, &(c, s)| match acc {
                Some((_, bs)) if s <= bs => acc,
                _ => Some((c, s)),
            })
            .expect("non-empty");
        let (a, b) = split_relu(self.net, self.domain, &sub, cand, false)?;
        let ca = self.bound(a, sub.lower_bound)?;
        let cb = self.bound(b, sub.lower_bound)?;
        self.admit(vec![ca, cb])
    }

    fn bound(&self, child: Subdomain, parent_lb: f64) -> Result<crate::bab::BoundedChild> {
        let outcome = bound_subdomain(
            self.net,
            self.domain,
            &child.stack,
            &child.splits,
            &child.parent_rho,
            Some(parent_lb),
            self.backend,
            child.queue_tag,
        )?;
        let mut sub = child;
        sub.lower_bound = outcome.lb;
        let pre_rho = sub.parent_rho.clone();
        sub.parent_rho = outcome.rho;
        let ub_input = outcome.candidate_input.clone();
        let ub_value = evaluate(self.net, &self.domain.clip(&ub_input))?;
        let _ = pre_rho;
        Ok(crate::bab::BoundedChild {
            sub,
            ub_value,
            ub_input,
            failsafe_triggered: outcome.failsafe_triggered,
        })
    }
}

fn record_from(
    prop: &PropertyInstance,
    sub: &Subdomain,
    candidates: &[(usize, usize)],
    m_values: &[f64],
) -> BranchSampleRecord {
    BranchSampleRecord {
        property_id: prop.id.clone(),
        network: prop.network.clone(),
        labels: prop.labels,
        splits: sub.splits.iter().collect(),
        parent_lb: sub.lower_bound,
        parent_rho: sub.parent_rho.rho.iter().map(|r| r.to_vec()).collect(),
        input_lower: sub.stack.input_lower.to_vec(),
        input_upper: sub.stack.input_upper.to_vec(),
        stack_lower: (1..=sub.stack.depth()).map(|k| sub.stack.lower(k).to_vec()).collect(),
        stack_upper: (1..=sub.stack.depth()).map(|k| sub.stack.upper(k).to_vec()).collect(),
        candidates: candidates.to_vec(),
        m_values: m_values.to_vec(),
    }
}

/// Collect branching samples for one property: with probability
/// `full_fraction` a complete strong-branching BaB records every decision;
/// otherwise cheap steps (a random count in [0, q]) are interleaved with one
/// strong-branching sample until `samples_per_property` are gathered or the
/// process terminates.
pub fn gen_branch_samples_for_property(
    prop: &PropertyInstance,
    backend: &BoundBackend,
    config: &BranchGenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BranchSampleRecord>> {
    let (net, domain) = (&prop.net, &prop.domain);
    let mut samples = Vec::new();
    let mut driver = StepDriver::new(net, domain, backend)?;
    let full = rng.gen_range(0.0..1.0) <= config.full_fraction;

    let strong_step = |driver: &mut StepDriver,
                           samples: &mut Vec<BranchSampleRecord>,
                           rng: &mut ChaCha8Rng|
     -> Result<bool> {
        let Some(sub) = driver.pop() else {
            return Ok(false);
        };
        let all = sub.stack.ambiguous_neurons();
        if all.is_empty() {
            let b = crate::oracle::planet_lp_bound(net, &sub.stack, &sub.splits)?;
            if b.value < 0.0 {
                driver.terminated = true;
            }
            return Ok(true);
        }
        let subset = candidate_subset(
            net,
            &sub.stack,
            config.top_fraction,
            config.min_layer_coverage,
            rng,
        );
        let (_, ms, children) = strong_branch(net, domain, &sub, backend, &subset, false)?;
        samples.push(record_from(prop, &sub, &subset, &ms));
        driver.admit(children.into())?;
        Ok(true)
    };

    if full {
        while !driver.done() && driver.steps < config.max_steps {
            if !strong_step(&mut driver, &mut samples, rng)? {
                break;
            }
        }
    } else {
        let mut collected = 0usize;
        while collected < config.samples_per_property
            && !driver.done()
            && driver.steps < config.max_steps
        {
            let k = rng.gen_range(0..=config.max_cheap_steps);
            for _ in 0..k {
                if driver.done() {
                    break;
                }
                driver.cheap_step()?;
            }
            if driver.done() {
                break;
            }
            if !strong_step(&mut driver, &mut samples, rng)? {
                break;
            }
            collected += 1;
        }
    }
    Ok(samples)
}

pub fn write_branch_samples(path: &Path, samples: &[BranchSampleRecord]) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&jsonfmt::to_line(s)?);
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_branch_samples(path: &Path) -> Result<Vec<BranchSampleRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn net_from_record(
    nets: &mut std::collections::BTreeMap<(String, Option<(usize, usize)>), Arc<VerificationNetwork>>,
    base_dir: &Path,
    network: &str,
    labels: Option<(usize, usize)>,
) -> Result<Arc<VerificationNetwork>> {
    let key = (network.to_string(), labels);
    if let Some(n) = nets.get(&key) {
        return Ok(n.clone());
    }
    let base = load_network(&resolve(base_dir, network))?;
    let merged = match labels {
        Some((c, c2)) => crate::model::merge_labels(&base, c, c2)?,
        None => VerificationNetwork::from_network(base)?,
    };
    let arc = Arc::new(merged);
    nets.insert(key, arc.clone());
    Ok(arc)
}

fn stack_from_record(
    lower: &[Vec<f64>],
    upper: &[Vec<f64>],
    input_lower: &[f64],
    input_upper: &[f64],
) -> BoundsStack {
    BoundsStack::from_parts(
        Array1::from(input_lower.to_vec()),
        Array1::from(input_upper.to_vec()),
        lower.iter().map(|v| Array1::from(v.clone())).collect(),
        upper.iter().map(|v| Array1::from(v.clone())).collect(),
    )
}

/// Materialize training items from records; networks are loaded (and shared)
/// per distinct path, relative to `base_dir` when relative.
pub fn branch_items_from_records(
    records: &[BranchSampleRecord],
    base_dir: &Path,
    include_primal_dual: bool,
) -> Result<Vec<BranchTrainItem>> {
    let mut nets = std::collections::BTreeMap::new();
    let mut items = Vec::with_capacity(records.len());
    for r in records {
        let net = net_from_record(&mut nets, base_dir, &r.network, r.labels)?;
        let stack =
            stack_from_record(&r.stack_lower, &r.stack_upper, &r.input_lower, &r.input_upper);
        let rho = DualState {
            rho: r.parent_rho.iter().map(|v| Array1::from(v.clone())).collect(),
        };
        let sol = inner_minimize(&net, &stack, &rho)?;
        let features = build_branch_features(&net, &stack, &sol, &rho, include_primal_dual)?;
        items.push(BranchTrainItem {
            net,
            features,
            candidates: r.candidates.clone(),
            m_values: r.m_values.clone(),
        });
    }
    Ok(items)
}

fn resolve(base: &Path, p: &str) -> std::path::PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

// ---------------------------------------------------------------------------
// Bound training data (iterative self-play)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundSampleRecord {
    pub property_id: String,
    pub network: String,
    pub labels: Option<(usize, usize)>,
    pub splits: Vec<(usize, usize, SplitSign)>,
    pub depth: usize,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
    pub stack_lower: Vec<Vec<f64>>,
    pub stack_upper: Vec<Vec<f64>>,
    pub parent_rho: Vec<Vec<f64>>,
    pub q_supg: f64,
}

#[derive(Debug, Clone)]
pub struct BoundGenConfig {
    /// Supergradient reference operating point.
    pub supg_steps: usize,
    pub supg_lr: f64,
    /// Per-property sample cap after stratification, per round.
    pub per_property: usize,
    pub seed: u64,
    pub max_steps: usize,
}

impl Default for BoundGenConfig {
    fn default() -> Self {
        BoundGenConfig {
            supg_steps: 500,
            supg_lr: 1e-4,
            per_property: 60,
            seed: 0,
            max_steps: 2500,
        }
    }
}

/// Run a complete BaB on one property with the given backend, recording every
/// bounded child (its pre-solve duals and a supergradient reference value),
/// then stratify by depth quartile.
pub fn gen_bound_samples_for_property(
    prop: &PropertyInstance,
    backend: &BoundBackend,
    config: &BoundGenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BoundSampleRecord>> {
    let (net, domain) = (&prop.net, &prop.domain);
    let mut driver = StepDriver::new(net, domain, backend)?;
    let mut raw: Vec<BoundSampleRecord> = Vec::new();
    while !driver.done() && driver.steps < config.max_steps {
        let Some(sub) = driver.pop() else { break };
        let candidates = sub.stack.ambiguous_neurons();
        if candidates.is_empty() {
            let b = crate::oracle::planet_lp_bound(net, &sub.stack, &sub.splits)?;
            if b.value < 0.0 {
                driver.terminated = true;
            }
            continue;
        }
        let scored = crate::bab::babsr_scores(net, &sub.stack);
        let (cand, _) = scored
            .iter()
            .fold(None::<((usize, usize), f64)>, |acc, &(c, s)| match acc {
                Some((_, bs)) if s <= bs => acc,
                _ => Some((c, s)),
            })
            .expect("non-empty");
        let (a, b) = split_relu(net, domain, &sub, cand, false)?;
        for child in [a, b] {
            // Record before solving: inherited duals are the sample's start.
            let pre_rho = child.parent_rho.clone();
            let q_supg = match backend {
                BoundBackend::Supergradient { steps, lr } => {
                    // The backend itself is the reference; reuse its result.
                    let res = supergradient_ascent(net, &child.stack, &pre_rho, *steps, *lr)?;
                    res.best_q
                }
                _ => {
                    supergradient_ascent(
                        net,
                        &child.stack,
                        &pre_rho,
                        config.supg_steps,
                        config.supg_lr,
                    )?
                    .best_q
                }
            };
            raw.push(BoundSampleRecord {
                property_id: prop.id.clone(),
                network: prop.network.clone(),
                labels: prop.labels,
                splits: child.splits.iter().collect(),
                depth: child.depth,
                input_lower: child.stack.input_lower.to_vec(),
                input_upper: child.stack.input_upper.to_vec(),
                stack_lower: (1..=child.stack.depth())
                    .map(|k| child.stack.lower(k).to_vec())
                    .collect(),
                stack_upper: (1..=child.stack.depth())
                    .map(|k| child.stack.upper(k).to_vec())
                    .collect(),
                parent_rho: pre_rho.rho.iter().map(|r| r.to_vec()).collect(),
                q_supg,
            });
            let bounded = driver.bound(
                Subdomain {
                    id: 0,
                    ..child
                },
                sub.lower_bound,
            )?;
            driver.admit(vec![bounded])?;
        }
    }
    Ok(stratify_by_depth(raw, config.per_property, rng))
}

/// Keep at most `cap` samples, drawing evenly from depth quartiles (each
/// quartile contributes at least one sample when available).
fn stratify_by_depth(
    mut raw: Vec<BoundSampleRecord>,
    cap: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<BoundSampleRecord> {
    if raw.len() <= cap {
        return raw;
    }
    let max_depth = raw.iter().map(|r| r.depth).max().unwrap_or(0).max(1);
    let mut buckets: Vec<Vec<BoundSampleRecord>> = vec![Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for r in raw.drain(..) {
        let q = ((4 * r.depth.saturating_sub(1)) / max_depth).min(3);
        buckets[q].push(r);
    }
    for b in buckets.iter_mut() {
        b.shuffle(rng);
    }
    let mut out = Vec::with_capacity(cap);
    let mut idx = 0usize;
    while out.len() < cap && buckets.iter().any(|b| !b.is_empty()) {
        if let Some(r) = buckets[idx % 4].pop() {
            out.push(r);
        }
        idx += 1;
    }
    out.sort_by(|a, b| {
        (a.depth, &a.splits).cmp(&(b.depth, &b.splits))
    });
    out
}

pub fn write_bound_samples(path: &Path, samples: &[BoundSampleRecord]) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&jsonfmt::to_line(s)?);
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_bound_samples(path: &Path) -> Result<Vec<BoundSampleRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn bound_items_from_records(
    records: &[BoundSampleRecord],
    base_dir: &Path,
) -> Result<Vec<BoundTrainItem>> {
    let mut nets = std::collections::BTreeMap::new();
    let mut items = Vec::with_capacity(records.len());
    for r in records {
        let net = net_from_record(&mut nets, base_dir, &r.network, r.labels)?;
        let stack =
            stack_from_record(&r.stack_lower, &r.stack_upper, &r.input_lower, &r.input_upper);
        items.push(BoundTrainItem {
            net,
            stack,
            parent_rho: DualState {
                rho: r.parent_rho.iter().map(|v| Array1::from(v.clone())).collect(),
            },
            q_supg: r.q_supg,
        });
    }
    Ok(items)
}

/// The iterative procedure: round 1 collects subdomains from
/// supergradient-driven BaB; each later round trains the current GNN on
/// everything collected so far and re-runs BaB with it to extend the
/// dataset.
pub struct IterativeBoundGen<'a> {
    pub properties: Vec<PropertyInstance>,
    pub gen_config: BoundGenConfig,
    pub train_config: BoundTrainConfig,
    pub gnn_iters: usize,
    pub failsafe_threshold: f64,
    pub seed: u64,
    pub on_round: Option<&'a mut dyn FnMut(usize, usize)>,
}

impl<'a> IterativeBoundGen<'a> {
    pub fn run(
        mut self,
        rounds: usize,
        params0: crate::boundgnn::BoundGnnParameters,
    ) -> Result<(Vec<BoundSampleRecord>, crate::boundgnn::BoundGnnParameters)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut all: Vec<BoundSampleRecord> = Vec::new();
        let mut gnn = params0;
        for round in 0..rounds.max(1) {
            let backend = if round == 0 {
                BoundBackend::Supergradient {
                    steps: self.gen_config.supg_steps,
                    lr: self.gen_config.supg_lr,
                }
            } else {
                BoundBackend::Gnn {
                    params: Arc::new(gnn.clone()),
                    iters: self.gnn_iters,
                    eta0: self.train_config.eta0,
                    schedule: self.train_config.schedule,
                    failsafe_threshold: self.failsafe_threshold,
                    fallback_steps: self.gen_config.supg_steps,
                    fallback_lr: self.gen_config.supg_lr,
                }
            };
            for prop in &self.properties {
                let samples =
                    gen_bound_samples_for_property(prop, &backend, &self.gen_config, &mut rng)?;
                all.extend(samples);
            }
            if let Some(cb) = self.on_round.as_mut() {
                cb(round, all.len());
            }
            if round + 1 < rounds {
                let items: Vec<BoundTrainItem> = all
                    .iter()
                    .map(|r| {
                        let net = self
                            .properties
                            .iter()
                            .find(|p| p.id == r.property_id)
                            .map(|p| Arc::new(p.net.clone()))
                            .expect("property id known");
                        BoundTrainItem {
                            net,
                            stack: stack_from_record(
                                &r.stack_lower,
                                &r.stack_upper,
                                &r.input_lower,
                                &r.input_upper,
                            ),
                            parent_rho: DualState {
                                rho: r
                                    .parent_rho
                                    .iter()
                                    .map(|v| Array1::from(v.clone()))
                                    .collect(),
                            },
                            q_supg: r.q_supg,
                        }
                    })
                    .collect();
                let (trained, _) =
                    crate::boundgnn::train_bound_gnn(&items, gnn, &self.train_config)?;
                gnn = trained;
            }
        }
        Ok((all, gnn))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn random_network_hits_ambiguity_target() {
        for (target, seed) in [(0.0, 1u64), (0.5, 2), (1.0, 3)] {
            let spec = NetworkSpec {
                layer_sizes: vec![2, 16, 16, 1],
                ambiguity_target: target,
                seed,
                ..NetworkSpec::default()
            };
            let net = random_network(&spec).unwrap();
            let f = ambiguous_fraction(&net, &spec.reference_domain()).unwrap();
            assert!(
                (f - target).abs() <= 0.1,
                "target {target}: measured {f}"
            );
        }
    }

    #[test]
    fn random_network_deterministic_per_seed() {
        let spec = NetworkSpec {
            layer_sizes: vec![2, 8, 1],
            seed: 42,
            ..NetworkSpec::default()
        };
        let a = random_network(&spec).unwrap();
        let b = random_network(&spec).unwrap();
        let x = array![0.3, 0.6];
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
        let (wa, ba) = a.layer_view(1);
        let (wb, bb) = b.layer_view(1);
        assert_eq!(wa, wb);
        assert_eq!(ba, bb);
    }

    #[test]
    fn zero_ambiguity_makes_verification_single_shot() {
        let spec = NetworkSpec {
            layer_sizes: vec![2, 10, 1],
            ambiguity_target: 0.0,
            seed: 9,
            ..NetworkSpec::default()
        };
        let net = random_network(&spec).unwrap();
        let vnet = calibrate_output_min(&net, &spec.reference_domain(), 0.5).unwrap();
        let r = crate::bab::verify(
            &vnet,
            &spec.reference_domain(),
            &BranchStrategy::BabsrSub,
            &BoundBackend::LpOracle,
            &BabConfig::default(),
        )
        .unwrap();
        assert_eq!(r.status, Status::Verified);
        assert_eq!(r.branches, 0);
    }

    fn analytic_template() -> PropertyTemplate {
        // f'(x) = [x, 0.5]; property label 0 vs 1 is x − 0.5 >= 0 over the
        // ball around 0.8 clipped to [0,1]: true iff ε <= 0.3.
        let network = Network::new(vec![
            Layer::dense(array![[1.0], [0.0]], array![2.0, 2.5]).unwrap(),
            Layer::dense(array![[1.0, 0.0], [0.0, 1.0]], array![-2.0, -2.0]).unwrap(),
        ])
        .unwrap();
        PropertyTemplate {
            network,
            center: array![0.8],
            label: 0,
            adv_label: 1,
            clip: Some((0.0, 1.0)),
        }
    }

    #[test]
    fn binary_search_converges_to_analytic_radius() {
        let template = analytic_template();
        let out = binary_search_epsilon(
            &template,
            1e-3,
            0.8,
            1e-3,
            &BranchStrategy::BabsrSub,
            &BoundBackend::LpOracle,
            &BabConfig::default(),
        )
        .unwrap();
        assert!(
            (out.epsilon - 0.3).abs() <= 2e-3,
            "epsilon {} vs analytic 0.3",
            out.epsilon
        );
        assert_eq!(out.result.status, Status::Verified);
        // Post-check: ε is verified, ε + 2·tol is not.
        let (net, dom) = merge_property(&template.with_epsilon(out.epsilon + 2e-3)).unwrap();
        let r = crate::bab::verify(
            &net,
            &dom,
            &BranchStrategy::BabsrSub,
            &BoundBackend::LpOracle,
            &BabConfig::default(),
        )
        .unwrap();
        assert_ne!(r.status, Status::Verified);
    }

    #[test]
    fn binary_search_rejects_false_floor() {
        let mut template = analytic_template();
        template.center = array![0.2]; // property false at any ε
        assert!(binary_search_epsilon(
            &template,
            1e-3,
            0.5,
            1e-3,
            &BranchStrategy::BabsrSub,
            &BoundBackend::LpOracle,
            &BabConfig::default(),
        )
        .is_err());
    }

    #[test]
    fn tight_bracket_needs_single_call() {
        let template = analytic_template();
        let out = binary_search_epsilon(
            &template,
            0.1,
            0.1 + 5e-4,
            1e-3,
            &BranchStrategy::BabsrSub,
            &BoundBackend::LpOracle,
            &BabConfig::default(),
        )
        .unwrap();
        assert_eq!(out.epsilon, 0.1);
    }

    #[test]
    fn difficulty_tiers_follow_timeout_fractions() {
        assert_eq!(difficulty_tier(1.0, 10.0), "easy");
        assert_eq!(difficulty_tier(3.0, 10.0), "medium");
        assert_eq!(difficulty_tier(8.0, 10.0), "hard");
    }

    fn desk_property(seed: u64) -> (VerificationNetwork, InputDomain) {
        // UNSAT with a margin of a quarter of the root relaxation gap, so
        // the root bound is negative and branching is required.
        let spec = NetworkSpec {
            layer_sizes: vec![2, 6, 5, 1],
            ambiguity_target: 0.8,
            weight_scale: 1.3,
            seed,
            ..NetworkSpec::default()
        };
        let net = random_network(&spec).unwrap();
        let dom = spec.reference_domain();
        let vnet = VerificationNetwork::new(net.layers().to_vec()).unwrap();
        let exact = crate::oracle::exhaustive_verify(&vnet, &dom).unwrap();
        let stack =
            crate::relax::linear_backward_bounds(&vnet, &dom, &SplitSet::new()).unwrap();
        let root_lp = crate::oracle::planet_lp_bound(&vnet, &stack, &SplitSet::new()).unwrap();
        let gap = exact.min_value - root_lp.value;
        assert!(gap > 1e-3, "fixture needs a relaxation gap, got {gap}");
        let vnet = calibrate_output_min(&net, &dom, 0.25 * gap).unwrap();
        (vnet, dom)
    }

    #[test]
    fn branch_samples_have_valid_improvements() {
        let (net, dom) = desk_property(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prop = PropertyInstance {
            id: "p0".into(),
            network: "net.json".into(),
            labels: None,
            net,
            domain: dom,
        };
        let samples = gen_branch_samples_for_property(
            &prop,
            &BoundBackend::LpOracle,
            &BranchGenConfig {
                samples_per_property: 6,
                max_cheap_steps: 3,
                full_fraction: 0.0,
                ..BranchGenConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        assert!(!samples.is_empty());
        for s in &samples {
            assert_eq!(s.candidates.len(), s.m_values.len());
            assert!(!s.candidates.is_empty());
            for m in &s.m_values {
                assert!(*m >= -1e-9 && *m <= 1.0 + 1e-9, "m out of range: {m}");
            }
        }
    }

    #[test]
    fn candidate_subset_covers_every_layer() {
        let (net, dom) = desk_property(6);
        let stack =
            crate::relax::linear_backward_bounds(&net, &dom, &SplitSet::new()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let subset = candidate_subset(&net, &stack, 0.2, 0.05, &mut rng);
        let all = stack.ambiguous_neurons();
        for k in 1..net.depth() {
            let total = all.iter().filter(|(l, _)| *l == k).count();
            if total > 0 {
                let had = subset.iter().filter(|(l, _)| *l == k).count();
                assert!(had >= 1, "layer {k} uncovered");
            }
        }
        // Subset is ordered and deduplicated.
        assert!(subset.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn branch_sample_files_round_trip_and_materialize() {
        let dir = tempfile::tempdir().unwrap();
        let (net, dom) = desk_property(7);
        save_network(&Network::new(net.layers().to_vec()).unwrap(), &dir.path().join("net.json"))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prop = PropertyInstance {
            id: "p0".into(),
            network: "net.json".into(),
            labels: None,
            net,
            domain: dom,
        };
        let samples = gen_branch_samples_for_property(
            &prop,
            &BoundBackend::LpOracle,
            &BranchGenConfig {
                samples_per_property: 4,
                full_fraction: 0.0,
                ..BranchGenConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let path = dir.path().join("branch.jsonl");
        write_branch_samples(&path, &samples).unwrap();
        let loaded = read_branch_samples(&path).unwrap();
        assert_eq!(loaded.len(), samples.len());
        // Byte-for-byte reproducibility.
        let path2 = dir.path().join("branch2.jsonl");
        write_branch_samples(&path2, &loaded).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
        let items = branch_items_from_records(&loaded, dir.path(), true).unwrap();
        assert_eq!(items.len(), samples.len());
        for it in &items {
            assert_eq!(it.candidates.len(), it.m_values.len());
        }
    }

    #[test]
    fn bound_samples_store_matching_shapes_and_finite_targets() {
        let dir = tempfile::tempdir().unwrap();
        let (net, dom) = desk_property(8);
        save_network(&Network::new(net.layers().to_vec()).unwrap(), &dir.path().join("net.json"))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let prop = PropertyInstance {
            id: "p0".into(),
            network: "net.json".into(),
            labels: None,
            net: net.clone(),
            domain: dom,
        };
        let samples = gen_bound_samples_for_property(
            &prop,
            &BoundBackend::Supergradient { steps: 80, lr: 1e-2 },
            &BoundGenConfig {
                supg_steps: 80,
                supg_lr: 1e-2,
                per_property: 12,
                ..BoundGenConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        assert!(!samples.is_empty());
        for s in &samples {
            assert!(s.q_supg.is_finite());
            assert_eq!(s.parent_rho.len(), net.depth() - 1);
            for (k, r) in s.parent_rho.iter().enumerate() {
                assert_eq!(r.len(), net.layer_dim(k + 1));
            }
        }
        let path = dir.path().join("bound.jsonl");
        write_bound_samples(&path, &samples).unwrap();
        let loaded = read_bound_samples(&path).unwrap();
        let items = bound_items_from_records(&loaded, dir.path()).unwrap();
        assert_eq!(items.len(), samples.len());
    }

    #[test]
    fn stratification_covers_available_depth_quartiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mk = |depth: usize| BoundSampleRecord {
            property_id: "p".into(),
            network: "n".into(),
            labels: None,
            splits: vec![],
            depth,
            input_lower: vec![],
            input_upper: vec![],
            stack_lower: vec![],
            stack_upper: vec![],
            parent_rho: vec![],
            q_supg: 0.0,
        };
        let raw: Vec<BoundSampleRecord> = (1..=40).map(mk).collect();
        let kept = stratify_by_depth(raw, 8, &mut rng);
        assert_eq!(kept.len(), 8);
        let max_depth = 40;
        let mut quartiles = [0usize; 4];
        for r in &kept {
            quartiles[((4 * (r.depth - 1)) / max_depth).min(3)] += 1;
        }
        assert!(quartiles.iter().all(|&c| c >= 1), "{quartiles:?}");
    }

    #[test]
    fn iterative_bound_gen_rounds_extend_dataset() {
        let (net, dom) = desk_property(9);
        let props = vec![PropertyInstance {
            id: "p0".into(),
            network: "net.json".into(),
            labels: None,
            net,
            domain: dom,
        }];
        let gen = IterativeBoundGen {
            properties: props.clone(),
            gen_config: BoundGenConfig {
                supg_steps: 60,
                supg_lr: 1e-2,
                per_property: 8,
                ..BoundGenConfig::default()
            },
            train_config: BoundTrainConfig {
                horizon: 10,
                epochs: 2,
                batch_size: 4,
                ..BoundTrainConfig::default()
            },
            gnn_iters: 10,
            failsafe_threshold: 0.05,
            seed: 11,
            on_round: None,
        };
        let params0 = crate::boundgnn::BoundGnnParameters::prop1_parameters(8).unwrap();
        let (one_round, _) = IterativeBoundGen {
            properties: props,
            on_round: None,
            ..gen_clone(&gen)
        }
        .run(1, params0.clone())
        .unwrap();
        let (three_rounds, _) = gen.run(3, params0).unwrap();
        assert!(!one_round.is_empty());
        assert!(three_rounds.len() > one_round.len());
    }

    fn gen_clone<'a>(g: &IterativeBoundGen<'a>) -> IterativeBoundGen<'static> {
        IterativeBoundGen {
            properties: g.properties.clone(),
            gen_config: g.gen_config.clone(),
            train_config: g.train_config.clone(),
            gnn_iters: g.gnn_iters,
            failsafe_threshold: g.failsafe_threshold,
            seed: g.seed,
            on_round: None,
        }
    }
}
