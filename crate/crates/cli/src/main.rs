//! Command-line driver.
//!
//! Each subcommand prints a JSON summary on stdout. Failures print
//! `{"error": .., "message": ..}` on stderr and exit with status 1.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::json;

use failmass::config::{ConfigError, RunConfig, Runtime};
use failmass::harness::{run_dataset, DatasetInstance};
use failmass::mass_oracle::{self, EditKernel};
use failmass::optimizer::{eval_fixed_set, Hyperparams, RunSeeds};
use failmass::report::{self, ReportError, RunReport};
use failmass::signature::SignatureSpace;

#[derive(Parser)]
#[command(name = "failmass", version, about = "Failure-mass driven workflow graph optimizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full optimization loop and write the run artifacts.
    Optimize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "max-iters")]
        max_iters: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact mass-bound sweeps and greedy descent on synthetic densities.
    Oracle {
        #[arg(long, default_value = "oracle_out")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        grid: usize,
        #[arg(long, default_value_t = 100)]
        kernels: usize,
    },
    /// Fit the mixture, quality metrics and PCA on a saved pool file.
    Cluster {
        #[arg(long)]
        pool: PathBuf,
        /// Take hyperparameters from this run config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "cluster_out")]
        out: PathBuf,
    },
    /// Evaluate a saved graph on the dataset splits and, given a report, on E_0.
    Eval {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug)]
struct Failure {
    kind: &'static str,
    message: String,
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure {
            kind: "config",
            message: e.to_string(),
        }
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        Failure {
            kind: "io",
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        kind: "io",
        message: format!("{}: {e}", path.display()),
    }
}

fn optimize(config: &Path, seed: Option<u64>, max_iters: Option<usize>, out: Option<PathBuf>) -> Result<serde_json::Value, Failure> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = max_iters {
        cfg.hyperparams.t_max = t;
    }
    if let Some(o) = out {
        cfg.out = o;
    }
    cfg.validate()?;
    let graph = cfg.load_graph()?;
    let data = cfg.load_dataset()?;
    let splits = cfg.splits(&data)?;
    let runtime = Runtime::from_config(&cfg)?;
    let started = Instant::now();
    let (_, state) = runtime.run(&graph, &splits)?;
    let files = report::emit_report(&state, &cfg.out)?;
    Ok(json!({
        "rounds": state.rounds.len(),
        "stop_reason": state.stop_reason,
        "final_scores": state.final_scores,
        "e0_trajectory": state.e0_trajectory,
        "cost_units": state.cost_units,
        "out": cfg.out,
        "files": files.len(),
        "seconds": started.elapsed().as_secs_f64(),
    }))
}

fn oracle(out: &Path, seed: u64, grid: usize, kernels: usize) -> Result<serde_json::Value, Failure> {
    let started = Instant::now();
    let sweep = mass_oracle::mass_bound_sweep(grid, kernels, seed);
    let sweep_secs = started.elapsed().as_secs_f64();
    let mut csv = String::from("# schema_version=1\nkernel,target,delta,eps_realized,mass_before,mass_after,slack,holds,bound,radius,lipschitz\n");
    for r in &sweep {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.kernel,
            r.target,
            r.delta,
            r.check.eps_realized,
            r.check.mass_before,
            r.check.mass_after,
            r.check.slack,
            r.check.holds,
            r.realized.bound,
            r.realized.radius,
            r.realized.lipschitz
        ));
    }

    // Greedy descent over three disjoint region-clearing kernels.
    let (rho, kernels) = mass_oracle::planted_modes(grid, &[0.30, 0.15, 0.05], seed);
    let mut menu = vec![EditKernel::identity(rho.cells())];
    menu.extend(kernels);
    let descent = mass_oracle::greedy_kernel_descent(&rho, &menu, 10).map_err(|e| io_failure(out, e))?;

    let files = [
        (out.join("mass_bound_sweep.csv"), csv),
        (out.join("descent.csv"), format!("# schema_version=1\n{}", descent.to_csv())),
        (out.join("density.csv"), format!("# schema_version=1\n{}", rho.to_csv())),
    ];
    std::fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    for (p, c) in &files {
        std::fs::write(p, c).map_err(|e| io_failure(p, e))?;
    }
    let applicable: Vec<_> = sweep.iter().filter(|r| r.check.applicable).collect();
    Ok(json!({
        "kernels": sweep.len(),
        "applicable": applicable.len(),
        "holds": applicable.iter().filter(|r| r.check.holds).count(),
        "min_slack": applicable.iter().map(|r| r.check.slack).fold(f64::INFINITY, f64::min),
        "sweep_seconds": sweep_secs,
        "descent": descent,
        "out": out,
    }))
}

fn cluster(pool: &Path, config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<serde_json::Value, Failure> {
    let mut hp = match config {
        Some(c) => RunConfig::load(c)?.hyperparams(),
        None => Hyperparams::default(),
    };
    if let Some(s) = seed {
        hp.seed = s;
    }
    let entries = report::read_pool(pool)?;
    let mut space = SignatureSpace::hashing(hp.dim, hp.embed_seed, hp.w_struct).map_err(|e| Failure {
        kind: "config",
        message: e.to_string(),
    })?;
    let result = report::cluster_pool(&entries, &hp, &mut space);
    report::emit_cluster(&result, &space.registry.to_json(), hp.dim, out)?;
    let (c, _, _) = result;
    Ok(json!({
        "signatures": c.signatures,
        "undiagnosable": c.undiagnosable,
        "k_fit": c.model.as_ref().map(|m| m.k_fit),
        "mode": c.mode.as_ref().map(|m| m.text()),
        "quality": c.quality,
        "out": out,
    }))
}

fn eval(graph: &Path, config: &Path, report_path: Option<&Path>, seed: Option<u64>) -> Result<serde_json::Value, Failure> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.graph = graph.to_path_buf();
    let g = cfg.load_graph()?;
    let data = cfg.load_dataset()?;
    let splits = cfg.splits(&data)?;
    let runtime = Runtime::from_config(&cfg)?;
    let seeds = RunSeeds::new(cfg.seed);
    let rate = |xs: &[DatasetInstance], s: u64| {
        run_dataset(&g, xs, runtime.backend.as_ref(), s)
            .ok()
            .map(|o| o.success_rate)
    };
    let mut out = json!({
        "graph_version": g.version(),
        "train": rate(&splits.train, seeds.train),
        "validation": rate(&splits.validation, seeds.validation),
        "test": rate(&splits.test, seeds.test),
    });
    if let Some(rp) = report_path {
        let text = std::fs::read_to_string(rp).map_err(|e| io_failure(rp, e))?;
        let rep: RunReport = serde_json::from_str(&text).map_err(|e| io_failure(rp, e))?;
        let e0: Vec<&DatasetInstance> = rep
            .e0_ids
            .iter()
            .filter_map(|id| splits.train.iter().find(|x| &x.id == id))
            .collect();
        if e0.len() != rep.e0_ids.len() {
            return Err(Failure {
                kind: "config",
                message: "report E_0 ids are not all in the train split".into(),
            });
        }
        let (acc, _) = eval_fixed_set(&g, &e0, runtime.backend.as_ref(), seeds.e0);
        out["e0_accuracy"] = json!(if e0.is_empty() { None } else { Some(acc) });
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Optimize {
            config,
            seed,
            max_iters,
            out,
        } => optimize(config, *seed, *max_iters, out.clone()),
        Command::Oracle {
            out,
            seed,
            grid,
            kernels,
        } => oracle(out, *seed, *grid, *kernels),
        Command::Cluster { pool, config, seed, out } => cluster(pool, config.as_deref(), *seed, out),
        Command::Eval {
            graph,
            config,
            report,
            seed,
        } => eval(graph, config, report.as_deref(), *seed),
    };
    match result {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", json!({"error": f.kind, "message": f.message}));
            ExitCode::FAILURE
        }
    }
}
