use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use prism_fcp::harness::{self, ExperimentConfig, Scenario, SWEEP_RATIOS};
use prism_fcp::Result;

#[derive(Parser)]
#[command(name = "prism-fcp", version, about = "Byzantine-robust federated conformal prediction simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file (or the defaults).
    Run(Common),
    /// Sweep PRISM-FCP over sharing ratios 0.1, 0.3, 0.5, 0.7, 1.0.
    Sweep(Common),
    /// Synthetic benchmark: all methods and attacks at M/D = 0.3.
    ReplicateTable1(Common),
    /// Real-data benchmark at M/D = 0.25 and 1.0 (needs the CSV path).
    ReplicateTable2(Common),
    /// Only the histogram and maliciousness dumps.
    EmitFigs(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config file; keys not present keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    /// Dotted override such as `filter.mode=mad`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self, base: ExperimentConfig) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_json_file(p)?,
            None => base,
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        if let Some(t) = self.trials {
            cfg.n_trials = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_summary(out: &harness::ExperimentOutput) {
    println!(
        "{:<10} {:<11} {:>6} {:>16} {:>16} {:>10} {:>8} {:>6}",
        "method", "attack", "M/D", "coverage %", "width", "MSE dB", "|q-q*|", "TP/FP"
    );
    for c in &out.summary.cells {
        println!(
            "{:<10} {:<11} {:>6.2} {:>8.2} ± {:<5.2} {:>8.3} ± {:<5.3} {:>10.2} {:>8.4} {:>3.0}/{:<3.1}",
            c.method.label(),
            c.attack.as_str(),
            c.m_over_d,
            100.0 * c.coverage.mean,
            100.0 * c.coverage.std,
            c.mean_width.mean,
            c.mean_width.std,
            c.final_mse_db.mean,
            c.quantile_deviation.mean,
            c.tp.mean,
            c.fp.mean,
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    let (common, cfg) = match &cli.command {
        Command::Run(c) => (c, c.resolve(ExperimentConfig::default())?),
        Command::Sweep(c) => {
            let mut cfg = c.resolve(ExperimentConfig::sweep())?;
            if c.config.is_none() && !c.overrides.iter().any(|o| o.starts_with("m_over_d=")) {
                cfg.m_over_d = SWEEP_RATIOS.to_vec();
            }
            (c, cfg)
        }
        Command::ReplicateTable1(c) => (c, c.resolve(ExperimentConfig::table1())?),
        Command::ReplicateTable2(c) => {
            let mut cfg = c.resolve(ExperimentConfig::table2())?;
            cfg.scenario = Scenario::Uci;
            (c, cfg)
        }
        Command::EmitFigs(c) => {
            let cfg = c.resolve(ExperimentConfig::default())?;
            harness::emit_figures(&cfg, &cfg.out_dir)?;
            println!("wrote histograms and maliciousness scores to {}", cfg.out_dir.display());
            return Ok(());
        }
    };
    let _ = common;
    let out = harness::run_experiment(&cfg)?;
    print_summary(&out);
    println!("wrote {} rows to {}", out.rows.len(), cfg.out_dir.join("results.csv").display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
