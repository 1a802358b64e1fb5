//! Library behind the `babverify` binary: each subcommand is a plain
//! function over a `RunConfig`, so tests drive them directly.

pub mod config;

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use babverify_core::bab::{self, ResultRecord, Status};
use babverify_core::boundgnn::{
    gnn_bound_solve, kappa_for, BoundGnnParameters, BoundTrainConfig,
};
use babverify_core::branchgnn::{BranchGnnParameters, BranchTrainConfig};
use babverify_core::datagen;
use babverify_core::dual::supergradient_ascent;
use babverify_core::model::{load_property, merge_property};
use babverify_core::{jsonfmt, Error, Result};

pub use config::RunConfig;

/// Exit codes: 0 verified, 1 falsified, 2 timeout, 3 bad input, 4 internal.
pub fn exit_code_for(status: Status) -> i32 {
    match status {
        Status::Verified => 0,
        Status::Falsified => 1,
        Status::Timeout => 2,
    }
}

/// Append-only run log: messages go to stderr and, when given, a file.
pub struct RunLog {
    file: Option<std::fs::File>,
}

impl RunLog {
    pub fn new(path: Option<&Path>) -> Result<RunLog> {
        let file = match path {
            Some(p) => Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)?,
            ),
            None => None,
        };
        Ok(RunLog { file })
    }

    pub fn line(&mut self, msg: &str) {
        eprintln!("{msg}");
        if let Some(f) = &mut self.file {
            let _ = writeln!(f, "{msg}");
        }
    }
}

#[derive(Serialize)]
struct ResultHeader<'a> {
    header: &'a RunConfig,
}

/// Verify one or more property files; append a header plus one record per
/// property to `results_path`. Returns the aggregate status.
pub fn cli_verify(
    properties: &[String],
    cfg: &RunConfig,
    results_path: &Path,
    log: &mut RunLog,
) -> Result<Status> {
    if properties.is_empty() {
        return Err(Error::InvalidProperty("no property files given".into()));
    }
    let mut out = String::new();
    out.push_str(&jsonfmt::to_line(&ResultHeader { header: cfg })?);
    let mut aggregate = Status::Verified;
    for prop_path in properties {
        let path = Path::new(prop_path);
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let prop = load_property(path)?;
        let (net, domain) = merge_property(&prop)?;
        let strategy = cfg.strategy(base)?;
        let backend = cfg.backend(base)?;
        let result = bab::verify(&net, &domain, &strategy, &backend, &cfg.bab_config())?;
        let record = ResultRecord {
            property_id: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| prop_path.clone()),
            status: result.status,
            time_s: if cfg.deterministic_output {
                0.0
            } else {
                result.wall_time
            },
            branches: result.branches,
            strategy: strategy.name().to_string(),
            backend: backend.name().to_string(),
            global_lb: result.global_lb,
            global_ub: result.global_ub,
        };
        log.line(&format!(
            "{}: {:?} in {:.3}s, {} branches (lb {:.6}, ub {:.6})",
            record.property_id,
            record.status,
            result.wall_time,
            record.branches,
            record.global_lb,
            record.global_ub
        ));
        if let Some(w) = &result.witness {
            let witness_record = serde_json::json!({
                "property_id": record.property_id,
                "witness": w.to_vec(),
            });
            out.push_str(&jsonfmt::to_line(&witness_record)?);
        }
        out.push_str(&jsonfmt::to_line(&record)?);
        aggregate = match (aggregate, result.status) {
            (_, Status::Falsified) | (Status::Falsified, _) => Status::Falsified,
            (_, Status::Timeout) | (Status::Timeout, _) => Status::Timeout,
            _ => Status::Verified,
        };
    }
    if let Some(parent) = results_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(results_path)?;
    file.write_all(out.as_bytes())?;
    Ok(aggregate)
}

/// Generate a desk-scale property set (networks, property files, manifest).
pub fn cli_gen_properties(cfg: &RunConfig, out_dir: &Path, log: &mut RunLog) -> Result<usize> {
    let spec = datagen::NetworkSpec {
        layer_sizes: cfg.gen_layer_sizes.clone(),
        ambiguity_target: cfg.gen_ambiguity,
        weight_scale: cfg.gen_weight_scale,
        seed: cfg.seed,
        ..datagen::NetworkSpec::default()
    };
    let strategy = cfg.strategy(out_dir)?;
    let backend = cfg.backend(out_dir)?;
    let records = datagen::gen_property_set(
        out_dir,
        cfg.gen_count,
        &spec,
        cfg.gen_eps_hi,
        cfg.gen_eps_tol,
        &strategy,
        &backend,
        &cfg.bab_config(),
        cfg.timeout_s.unwrap_or(60.0),
        cfg.seed,
        cfg.deterministic_output,
    )?;
    log.line(&format!(
        "generated {} properties under {}",
        records.len(),
        out_dir.display()
    ));
    Ok(records.len())
}

fn load_manifest(manifest: &Path) -> Result<Vec<datagen::PropertyRecord>> {
    let text = std::fs::read_to_string(manifest)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn properties_from_manifest(manifest: &Path) -> Result<Vec<datagen::PropertyInstance>> {
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let records = load_manifest(manifest)?;
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let prop_path = base.join(format!("{}.json", r.id));
        let prop = load_property(&prop_path)?;
        let (net, domain) = merge_property(&prop)?;
        out.push(datagen::PropertyInstance {
            id: r.id.clone(),
            network: r.network.clone(),
            labels: Some((r.label, r.adv_label)),
            net,
            domain,
        });
    }
    Ok(out)
}

/// Collect branching training samples for every property in the manifest.
pub fn cli_gen_branch_data(
    cfg: &RunConfig,
    manifest: &Path,
    out_path: &Path,
    log: &mut RunLog,
) -> Result<usize> {
    use rand::SeedableRng;
    let props = properties_from_manifest(manifest)?;
    if props.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let backend = cfg.backend(manifest.parent().unwrap_or_else(|| Path::new(".")))?;
    let gen_cfg = datagen::BranchGenConfig {
        samples_per_property: cfg.samples_per_property,
        max_cheap_steps: cfg.max_cheap_steps,
        full_fraction: cfg.full_fraction,
        seed: cfg.seed,
        ..datagen::BranchGenConfig::default()
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut all = Vec::new();
    for prop in &props {
        let samples =
            datagen::gen_branch_samples_for_property(prop, &backend, &gen_cfg, &mut rng)?;
        log.line(&format!("{}: {} branch samples", prop.id, samples.len()));
        all.extend(samples);
    }
    datagen::write_branch_samples(out_path, &all)?;
    log.line(&format!("wrote {} samples to {}", all.len(), out_path.display()));
    Ok(all.len())
}

/// Iterative bounding-data generation (round 1 supergradient, later rounds
/// driven by the freshly trained GNN).
pub fn cli_gen_bound_data(
    cfg: &RunConfig,
    manifest: &Path,
    out_path: &Path,
    params_out: Option<&Path>,
    log: &mut RunLog,
) -> Result<usize> {
    let props = properties_from_manifest(manifest)?;
    if props.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut report = |round: usize, total: usize| {
        log.line(&format!("round {round}: dataset now {total} subdomains"));
    };
    let gen = datagen::IterativeBoundGen {
        properties: props,
        gen_config: datagen::BoundGenConfig {
            supg_steps: cfg.supg_steps,
            supg_lr: cfg.supg_lr,
            per_property: cfg.bound_per_property,
            seed: cfg.seed,
            ..datagen::BoundGenConfig::default()
        },
        train_config: bound_train_config(cfg),
        gnn_iters: cfg.gnn_iters,
        failsafe_threshold: cfg.bound_failsafe,
        seed: cfg.seed,
        on_round: Some(&mut report),
    };
    let params0 = BoundGnnParameters::init(cfg.seed);
    let (samples, trained) = gen.run(cfg.bound_rounds, params0)?;
    datagen::write_bound_samples(out_path, &samples)?;
    if let Some(p) = params_out {
        trained.save(p)?;
    }
    log.line(&format!("wrote {} samples to {}", samples.len(), out_path.display()));
    Ok(samples.len())
}

fn branch_train_config(cfg: &RunConfig) -> BranchTrainConfig {
    BranchTrainConfig {
        lr: cfg.branch_lr,
        weight_decay: cfg.branch_weight_decay,
        batch_size: cfg.branch_batch_size,
        m_classes: cfg.m_classes,
        max_epochs: cfg.branch_max_epochs,
        seed: cfg.seed,
        ..BranchTrainConfig::default()
    }
}

fn bound_train_config(cfg: &RunConfig) -> BoundTrainConfig {
    BoundTrainConfig {
        lr: cfg.bound_lr,
        epochs: cfg.bound_epochs,
        horizon: cfg.loss_horizon,
        gamma: cfg.loss_gamma,
        kappa_rel: cfg.kappa_rel,
        kappa_floor: cfg.kappa_floor,
        eta0: cfg.eta0,
        schedule: cfg.step_schedule,
        seed: cfg.seed,
        ..BoundTrainConfig::default()
    }
}

pub fn cli_train_branch(
    cfg: &RunConfig,
    data: &Path,
    out_params: &Path,
    log: &mut RunLog,
) -> Result<()> {
    let records = datagen::read_branch_samples(data)?;
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let base = data.parent().unwrap_or_else(|| Path::new("."));
    let items = datagen::branch_items_from_records(&records, base, true)?;
    let params0 = BranchGnnParameters::init(cfg.seed);
    let (trained, report) = babverify_core::branchgnn::train_branch_gnn(
        &items,
        params0,
        &branch_train_config(cfg),
    )?;
    for (e, (t, v)) in report
        .train_loss
        .iter()
        .zip(report.val_loss.iter())
        .enumerate()
    {
        log.line(&format!("epoch {e}: train {t:.6} val {v:.6}"));
    }
    log.line(&format!(
        "best validation loss {:.6} after {} epochs",
        report.best_val, report.epochs
    ));
    trained.save(out_params)?;
    Ok(())
}

pub fn cli_train_bound(
    cfg: &RunConfig,
    data: &Path,
    out_params: &Path,
    log: &mut RunLog,
) -> Result<()> {
    let records = datagen::read_bound_samples(data)?;
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let base = data.parent().unwrap_or_else(|| Path::new("."));
    let items = datagen::bound_items_from_records(&records, base)?;
    let params0 = BoundGnnParameters::init(cfg.seed);
    let (trained, report) =
        babverify_core::boundgnn::train_bound_gnn(&items, params0, &bound_train_config(cfg))?;
    for (e, l) in report.epoch_loss.iter().enumerate() {
        log.line(&format!("epoch {e}: loss {l:.6}"));
    }
    log.line(&format!("best loss {:.6}", report.best_loss));
    trained.save(out_params)?;
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    index: usize,
    property_id: String,
    q_supergradient: f64,
    q_gnn: f64,
    kappa: f64,
    gnn_reaches_reference: bool,
}

/// Compare the supergradient and GNN backends per subdomain; emits a JSONL
/// table plus a summary line. Returns the fraction of subdomains where the
/// GNN bound reaches the supergradient reference minus κ.
pub fn cli_eval_bounds(
    cfg: &RunConfig,
    data: &Path,
    out_table: &Path,
    log: &mut RunLog,
) -> Result<f64> {
    let records = datagen::read_bound_samples(data)?;
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let base = data.parent().unwrap_or_else(|| Path::new("."));
    let items = datagen::bound_items_from_records(&records, base)?;
    let params_path = cfg
        .bound_params
        .as_ref()
        .ok_or_else(|| Error::InvalidProperty("eval-bounds needs bound_params".into()))?;
    let gnn = Arc::new(BoundGnnParameters::load(&config::resolve(base, params_path))?);
    let mut out = String::new();
    let mut reached = 0usize;
    for (i, (item, record)) in items.iter().zip(records.iter()).enumerate() {
        let supg = supergradient_ascent(
            &item.net,
            &item.stack,
            &item.parent_rho,
            cfg.supg_steps,
            cfg.supg_lr,
        )?
        .best_q;
        let gnn_q = gnn_bound_solve(
            &item.net,
            &item.stack,
            &item.parent_rho,
            &gnn,
            cfg.gnn_iters,
            cfg.eta0,
            cfg.step_schedule,
        )?
        .best_q;
        let kappa = kappa_for(supg, cfg.kappa_rel, cfg.kappa_floor);
        let ok = gnn_q >= supg - kappa;
        if ok {
            reached += 1;
        }
        out.push_str(&jsonfmt::to_line(&EvalRow {
            index: i,
            property_id: record.property_id.clone(),
            q_supergradient: supg,
            q_gnn: gnn_q,
            kappa,
            gnn_reaches_reference: ok,
        })?);
    }
    let fraction = reached as f64 / items.len() as f64;
    out.push_str(&jsonfmt::to_line(&serde_json::json!({
        "summary": {"total": items.len(), "reached": reached, "fraction": fraction}
    }))?);
    std::fs::write(out_table, out)?;
    log.line(&format!(
        "GNN reaches the supergradient reference on {reached}/{} subdomains ({:.1}%)",
        items.len(),
        100.0 * fraction
    ));
    Ok(fraction)
}

/// Cactus-plot data: per method, sorted solve times with cumulative solved
/// percentages. Timeouts sit at the timeout value and never count as solved.
pub fn export_cactus(results_path: &Path, out_csv: &Path, timeout_s: f64) -> Result<()> {
    let text = std::fs::read_to_string(results_path)?;
    let mut per_method: std::collections::BTreeMap<String, (Vec<f64>, usize)> = Default::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v.get("header").is_some() || v.get("witness").is_some() || v.get("summary").is_some() {
            continue;
        }
        let record: ResultRecord = serde_json::from_value(v)?;
        let method = format!("{}+{}", record.strategy, record.backend);
        let entry = per_method.entry(method).or_default();
        entry.1 += 1;
        if record.status != Status::Timeout {
            entry.0.push(record.time_s.min(timeout_s));
        }
    }
    let mut csv = String::from("method,time_s,solved_percent\n");
    for (method, (mut times, total)) in per_method {
        times.sort_by(f64::total_cmp);
        for (i, t) in times.iter().enumerate() {
            let pct = 100.0 * (i + 1) as f64 / total as f64;
            csv.push_str(&format!("{method},{t:.6},{pct:.6}\n"));
        }
    }
    std::fs::write(out_csv, csv)?;
    Ok(())
}
