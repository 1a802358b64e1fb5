//! `babverify` — branch-and-bound neural network verification.
//!
//! Subcommands: verify, gen-properties, gen-branch-data, gen-bound-data,
//! train-branch, train-bound, eval-bounds, export-cactus. Options from the
//! JSON config file are overridden by flags; BABVERIFY_SEED overrides the
//! configured seed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use babverify_cli::{
    cli_eval_bounds, cli_gen_bound_data, cli_gen_branch_data, cli_gen_properties,
    cli_train_branch, cli_train_bound, cli_verify, config::RunConfig, exit_code_for,
    export_cactus, RunLog,
};
use babverify_core::Error;

#[derive(Parser)]
#[command(name = "babverify", about = "Complete neural network verification by branch and bound")]
struct Cli {
    /// JSON configuration file (flags win over file values).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run log file (appended).
    #[arg(long, global = true)]
    log: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    strategy: Option<String>,
    #[arg(long, global = true)]
    backend: Option<String>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    timeout_s: Option<f64>,
    #[arg(long, global = true)]
    branch_params: Option<String>,
    #[arg(long, global = true)]
    bound_params: Option<String>,
    /// Zero wall-clock fields in output records (byte-reproducible runs).
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Verify one or more property files.
    Verify {
        /// Property JSON files.
        #[arg(required = true)]
        properties: Vec<String>,
        /// JSON-lines results file (appended).
        #[arg(long, default_value = "results.jsonl")]
        results: PathBuf,
    },
    /// Generate desk-scale networks and properties via ε binary search.
    GenProperties {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Collect branching training samples along BaB runs.
    GenBranchData {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect bounding training subdomains (iterative self-play).
    GenBoundData {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also save the GNN trained during the final round.
        #[arg(long)]
        params_out: Option<PathBuf>,
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Train the branching GNN on collected samples.
    TrainBranch {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the bounding GNN on collected subdomains.
    TrainBound {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-subdomain comparison of the supergradient and GNN backends.
    EvalBounds {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export cumulative solved-percentage data for cactus plots.
    ExportCactus {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3600.0)]
        timeout_s: f64,
    },
}

fn run(cli: Cli) -> Result<i32, Error> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = cli.strategy {
        cfg.strategy = s;
    }
    if let Some(b) = cli.backend {
        cfg.backend = b;
    }
    if let Some(b) = cli.batch_size {
        cfg.batch_size = b;
    }
    if let Some(t) = cli.timeout_s {
        cfg.timeout_s = Some(t);
    }
    if cli.branch_params.is_some() {
        cfg.branch_params = cli.branch_params;
    }
    if cli.bound_params.is_some() {
        cfg.bound_params = cli.bound_params;
    }
    if cli.deterministic {
        cfg.deterministic_output = true;
    }
    let mut log = RunLog::new(cli.log.as_deref())?;

    match cli.command {
        Command::Verify { properties, results } => {
            let status = cli_verify(&properties, &cfg, &results, &mut log)?;
            Ok(exit_code_for(status))
        }
        Command::GenProperties { out_dir, count } => {
            if let Some(c) = count {
                cfg.gen_count = c;
            }
            cli_gen_properties(&cfg, &out_dir, &mut log)?;
            Ok(0)
        }
        Command::GenBranchData { manifest, out } => {
            cli_gen_branch_data(&cfg, &manifest, &out, &mut log)?;
            Ok(0)
        }
        Command::GenBoundData {
            manifest,
            out,
            params_out,
            rounds,
        } => {
            if let Some(r) = rounds {
                cfg.bound_rounds = r;
            }
            cli_gen_bound_data(&cfg, &manifest, &out, params_out.as_deref(), &mut log)?;
            Ok(0)
        }
        Command::TrainBranch { data, out } => {
            cli_train_branch(&cfg, &data, &out, &mut log)?;
            Ok(0)
        }
        Command::TrainBound { data, out } => {
            cli_train_bound(&cfg, &data, &out, &mut log)?;
            Ok(0)
        }
        Command::EvalBounds { data, out } => {
            cli_eval_bounds(&cfg, &data, &out, &mut log)?;
            Ok(0)
        }
        Command::ExportCactus {
            results,
            out,
            timeout_s,
        } => {
            export_cactus(&results, &out, timeout_s)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Io(_)
                | Error::Json(_)
                | Error::InvalidNetwork(_)
                | Error::InvalidProperty(_)
                | Error::EmptyDataset
                | Error::ArchitectureMismatch(_) => 3,
                _ => 4,
            };
            ExitCode::from(code)
        }
    }
}
