//! Run configuration: one JSON file plus flag overrides (flags win), with
//! defaults pinned to the standard operating points (500-step/1e-4
//! supergradient ascent, 100 GNN iterations, fail-safe thresholds 0.2 and
//! 0.05, γ = 0.99, embedding sizes 64/32, M = 10 ranking classes).

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use babverify_core::bab::{BabConfig, BoundBackend, BranchStrategy};
use babverify_core::boundgnn::StepSchedule;
use babverify_core::relax::BoundMethod;
use babverify_core::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub strategy: String,
    pub backend: String,
    pub intermediate: BoundMethod,
    pub batch_size: usize,
    pub timeout_s: Option<f64>,
    pub eps_gap: f64,
    pub max_branches: Option<u64>,
    /// Zero out wall-clock fields in output records so identical runs are
    /// byte-identical.
    pub deterministic_output: bool,

    pub supg_steps: usize,
    pub supg_lr: f64,
    pub gnn_iters: usize,
    pub eta0: f64,
    pub step_schedule: StepSchedule,
    pub branch_failsafe: f64,
    pub bound_failsafe: f64,
    pub diverging_scale: f64,
    pub branch_params: Option<String>,
    pub bound_params: Option<String>,

    // Training operating points.
    pub branch_lr: f64,
    pub branch_weight_decay: f64,
    pub branch_batch_size: usize,
    pub branch_max_epochs: usize,
    pub m_classes: usize,
    pub bound_lr: f64,
    pub bound_epochs: usize,
    pub loss_horizon: usize,
    pub loss_gamma: f64,
    pub kappa_rel: f64,
    pub kappa_floor: f64,

    // Data generation.
    pub gen_count: usize,
    pub gen_layer_sizes: Vec<usize>,
    pub gen_ambiguity: f64,
    pub gen_weight_scale: f64,
    pub gen_eps_hi: f64,
    pub gen_eps_tol: f64,
    pub samples_per_property: usize,
    pub max_cheap_steps: usize,
    pub full_fraction: f64,
    pub bound_rounds: usize,
    pub bound_per_property: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            strategy: "babsr_sub".into(),
            backend: "supergradient".into(),
            intermediate: BoundMethod::LinearBackward,
            batch_size: 200,
            timeout_s: None,
            eps_gap: 0.0,
            max_branches: None,
            deterministic_output: false,
            supg_steps: 500,
            supg_lr: 1e-4,
            gnn_iters: 100,
            eta0: 1e-3,
            step_schedule: StepSchedule::DecaySqrt,
            branch_failsafe: 0.2,
            bound_failsafe: 0.05,
            diverging_scale: 1e3,
            branch_params: None,
            bound_params: None,
            branch_lr: 1e-4,
            branch_weight_decay: 1e-4,
            branch_batch_size: 2,
            branch_max_epochs: 60,
            m_classes: 10,
            bound_lr: 1e-2,
            bound_epochs: 50,
            loss_horizon: 100,
            loss_gamma: 0.99,
            kappa_rel: 0.01,
            kappa_floor: 1e-3,
            gen_count: 10,
            gen_layer_sizes: vec![2, 8, 6, 2],
            gen_ambiguity: 0.6,
            gen_weight_scale: 1.2,
            gen_eps_hi: 0.5,
            gen_eps_tol: 1e-3,
            samples_per_property: 20,
            max_cheap_steps: 10,
            full_fraction: 0.25,
            bound_rounds: 3,
            bound_per_property: 60,
        }
    }
}

impl RunConfig {
    /// Load from an optional JSON file, then apply the seed override from
    /// the BABVERIFY_SEED environment variable if present.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text)?
            }
            None => RunConfig::default(),
        };
        if let Ok(seed) = std::env::var("BABVERIFY_SEED") {
            config.seed = seed
                .parse()
                .map_err(|_| Error::InvalidProperty(format!("bad BABVERIFY_SEED: {seed}")))?;
        }
        Ok(config)
    }

    pub fn bab_config(&self) -> BabConfig {
        BabConfig {
            intermediate: self.intermediate,
            batch_size: self.batch_size,
            timeout: self.timeout_s.map(Duration::from_secs_f64),
            seed: self.seed,
            eps_gap: self.eps_gap,
            max_branches: self.max_branches,
            full_recompute: false,
        }
    }

    pub fn strategy(&self, base_dir: &Path) -> Result<BranchStrategy> {
        Ok(match self.strategy.as_str() {
            "random" => BranchStrategy::Random,
            "babsr_sub" => BranchStrategy::BabsrSub,
            "strong" => BranchStrategy::Strong,
            "gnn" => {
                let path = self.branch_params.as_ref().ok_or_else(|| {
                    Error::InvalidProperty("gnn strategy needs branch_params".into())
                })?;
                let params = babverify_core::branchgnn::BranchGnnParameters::load(
                    &resolve(base_dir, path),
                )?;
                BranchStrategy::Gnn {
                    params: Arc::new(params),
                    failsafe_threshold: self.branch_failsafe,
                }
            }
            other => {
                return Err(Error::InvalidProperty(format!("unknown strategy: {other}")))
            }
        })
    }

    pub fn backend(&self, base_dir: &Path) -> Result<BoundBackend> {
        Ok(match self.backend.as_str() {
            "interval" => BoundBackend::Interval,
            "linear" => BoundBackend::LinearBackward,
            "lp" => BoundBackend::LpOracle,
            "supergradient" => BoundBackend::Supergradient {
                steps: self.supg_steps,
                lr: self.supg_lr,
            },
            "gnn" => {
                let path = self.bound_params.as_ref().ok_or_else(|| {
                    Error::InvalidProperty("gnn backend needs bound_params".into())
                })?;
                let params =
                    babverify_core::boundgnn::BoundGnnParameters::load(&resolve(base_dir, path))?;
                BoundBackend::Gnn {
                    params: Arc::new(params),
                    iters: self.gnn_iters,
                    eta0: self.eta0,
                    schedule: self.step_schedule,
                    failsafe_threshold: self.bound_failsafe,
                    fallback_steps: self.supg_steps,
                    fallback_lr: self.supg_lr,
                }
            }
            "diverging_stub" => BoundBackend::DivergingDuals {
                scale: self.diverging_scale,
                failsafe_threshold: self.bound_failsafe,
                fallback_steps: self.supg_steps,
                fallback_lr: self.supg_lr,
            },
            other => return Err(Error::InvalidProperty(format!("unknown backend: {other}"))),
        })
    }
}

pub fn resolve(base: &Path, p: &str) -> std::path::PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}
