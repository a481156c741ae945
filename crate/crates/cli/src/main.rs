//! Command-line front end: simulate panels, run the estimation pipeline,
//! and drive replication studies.
//!
//! Exit codes: 0 success, 2 validation error, 3 convergence failure,
//! 4 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use peerclust::bootstrap::BootstrapConfig;
use peerclust::classo::ClassoConfig;
use peerclust::data::{load_panel_from_paths, save_panel_to_paths};
use peerclust::equilibrium::EquilibriumConfig;
use peerclust::npl::NplConfig;
use peerclust::pipeline::{PipelineConfig, ic_table_csv, render_text, run_pipeline};
use peerclust::simulation::{
    DgpConfig, McOptions, accuracy_table_csv, generate_panel, run_monte_carlo, run_oracle_study,
    selection_table_csv,
};
use peerclust::{Error, Result};

#[derive(Parser)]
#[command(
    name = "peerclust",
    about = "Peer effects in binary-choice social interaction models with \
             group fixed effects and latent cluster structure",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic panel (nodes.csv, edges.csv, truth.json).
    Simulate(SimulateArgs),
    /// Estimate, classify, select the cluster count, and bootstrap.
    Pipeline(PipelineArgs),
    /// Replication studies over freshly simulated panels.
    Montecarlo(MontecarloArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Number of groups.
    #[arg(long = "G")]
    group_count: usize,
    /// Individuals per group.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for nodes.csv, edges.csv, truth.json.
    #[arg(long)]
    out: PathBuf,
    /// Maximum number of friends per individual.
    #[arg(long, default_value_t = 5)]
    max_friends: usize,
}

#[derive(Args)]
struct CommonKnobs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = one per logical CPU).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(long, default_value_t = 4)]
    k_max: usize,
    /// Classification penalty level (default: automatic).
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    rho_scale: f64,
    /// Selection criterion level (default: recommended).
    #[arg(long)]
    lambda: Option<f64>,
    /// Belief-iteration stop tolerance.
    #[arg(long, default_value_t = 1e-5)]
    ccp_tol: f64,
    /// Equilibrium fixed-point tolerance.
    #[arg(long, default_value_t = 1e-10)]
    eq_tol: f64,
    /// Outer iteration budget of the estimator.
    #[arg(long, default_value_t = 500)]
    max_outer: usize,
    #[arg(long, default_value_t = 500)]
    boot_reps: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Fixed-effect box bound.
    #[arg(long, default_value_t = 10.0)]
    mu_bound: f64,
}

impl CommonKnobs {
    fn npl(&self) -> NplConfig {
        NplConfig {
            ccp_tol: self.ccp_tol,
            max_outer: self.max_outer,
            mu_bound: self.mu_bound,
            equilibrium: EquilibriumConfig { tol: self.eq_tol, ..Default::default() },
            ..Default::default()
        }
    }

    fn classo(&self) -> ClassoConfig {
        ClassoConfig {
            rho: self.rho,
            rho_scale: self.rho_scale,
            mu_bound: self.mu_bound,
            seed: self.seed,
            ..Default::default()
        }
    }

    fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            k_max: self.k_max,
            npl: self.npl(),
            classo: self.classo(),
            lambda: self.lambda,
            bootstrap: BootstrapConfig {
                replications: self.boot_reps,
                alpha: self.alpha,
                seed: self.seed,
                ..Default::default()
            },
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct PipelineArgs {
    /// Nodes CSV (group_id,individual_id,y,x_1,...,x_p).
    #[arg(long)]
    nodes: PathBuf,
    /// Edges CSV (group_id,from_id,to_id).
    #[arg(long)]
    edges: PathBuf,
    /// Report JSON path; an IC CSV is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    knobs: CommonKnobs,
}

#[derive(Args)]
struct MontecarloArgs {
    /// Study preset: table1 (selection and classification),
    /// table2-oracle (oracle-grouping bias and coverage),
    /// table3 (post-classification vs pooled).
    #[arg(long)]
    preset: String,
    /// Replications.
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long = "G", default_value_t = 100)]
    group_count: usize,
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    knobs: CommonKnobs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Pipeline(args) => with_pool(args.knobs.threads, || cmd_pipeline(&args)),
        Command::Montecarlo(args) => with_pool(args.knobs.threads, || cmd_montecarlo(&args)),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code())
        }
    }
}

#[cfg(feature = "parallel")]
fn with_pool<T>(threads: usize, run: impl FnOnce() -> Result<T> + Send) -> Result<T>
where
    T: Send,
{
    if threads == 0 {
        return run();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot build a {threads}-thread pool: {e}")))?;
    pool.install(run)
}

#[cfg(not(feature = "parallel"))]
fn with_pool<T>(threads: usize, run: impl FnOnce() -> Result<T>) -> Result<T> {
    if threads > 1 {
        eprintln!("note: built without the parallel feature; --threads ignored");
    }
    run()
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let config = DgpConfig {
        group_count: args.group_count,
        group_size: args.n,
        max_friends: args.max_friends,
        seed: args.seed,
        ..Default::default()
    };
    let (panel, truth) = generate_panel(&config, 0)?;
    std::fs::create_dir_all(&args.out)?;
    save_panel_to_paths(&panel, &args.out.join("nodes.csv"), &args.out.join("edges.csv"))?;
    let truth_json = serde_json::json!({
        "format_version": 1,
        "seed": args.seed,
        "truth": truth,
    });
    write_string(&args.out.join("truth.json"), &pretty(&truth_json)?)?;
    eprintln!(
        "wrote {} groups ({} individuals) to {}",
        panel.n_groups(),
        panel.total_individuals(),
        args.out.display()
    );
    Ok(())
}

fn cmd_pipeline(args: &PipelineArgs) -> Result<()> {
    let panel = load_panel_from_paths(&args.nodes, &args.edges)?;
    let config = args.knobs.pipeline();
    let report = run_pipeline(&panel, &config)?;
    write_string(&args.out, &pretty(&report)?)?;
    let ic_path = args.out.with_extension("ic.csv");
    write_string(&ic_path, &ic_table_csv(&report))?;
    print!("{}", render_text(&report));
    eprintln!("report: {}   ic table: {}", args.out.display(), ic_path.display());
    Ok(())
}

fn cmd_montecarlo(args: &MontecarloArgs) -> Result<()> {
    let config = DgpConfig {
        group_count: args.group_count,
        group_size: args.n,
        seed: args.knobs.seed,
        ..Default::default()
    };
    let mut options = McOptions {
        replications: args.reps,
        k_max: args.knobs.k_max,
        bootstrap_replications: args.knobs.boot_reps,
        npl: args.knobs.npl(),
        classo: args.knobs.classo(),
        lambda: args.knobs.lambda,
        alpha: args.knobs.alpha,
        ..Default::default()
    };
    let (summary, csv_name, csv) = match args.preset.as_str() {
        "table1" => {
            options.bootstrap_replications = 0;
            let summary = run_monte_carlo(&config, &options)?;
            let csv = selection_table_csv(&summary);
            (summary, "table1.csv", csv)
        }
        "table2-oracle" => {
            let summary = run_oracle_study(&config, &options)?;
            let csv = accuracy_table_csv(&summary);
            (summary, "table2.csv", csv)
        }
        "table3" => {
            options.pooled = true;
            let summary = run_monte_carlo(&config, &options)?;
            let csv = accuracy_table_csv(&summary);
            (summary, "table3.csv", csv)
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown preset '{other}' (expected table1, table2-oracle, or table3)"
            )));
        }
    };
    std::fs::create_dir_all(&args.out)?;
    write_string(&args.out.join("summary.json"), &pretty(&summary)?)?;
    write_string(&args.out.join(csv_name), &csv)?;
    eprintln!(
        "completed {} replications in {:.1}s; wrote {}",
        summary.replications,
        summary.runtime_secs,
        args.out.display()
    );
    Ok(())
}

fn pretty<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| Error::Data(format!("serialization failed: {e}")))
}

fn write_string(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents)?;
    Ok(())
}
