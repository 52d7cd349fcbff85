use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use lmbtrack::adaptive_birth::GateMode;
use lmbtrack::harness::{
    compare_runs, emit_comparison, emit_report, load_report, run_on_scenario, RunConfig, Toggles,
};
use lmbtrack::scenario::Scenario;

#[derive(Parser)]
#[command(name = "lmbtrack", version, about = "Adaptive-birth LMB tracking experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one seeded experiment and write its report.
    Run(RunArgs),
    /// Compare candidate reports against a baseline.
    Compare {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        candidates: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    preprune: bool,
    /// Enables gating; `off`, `pseudo:<t>`, `euclidean:<meters>` or `mahalanobis:<prob>`.
    #[arg(long)]
    gate: Option<GateMode>,
    #[arg(long)]
    memoize: bool,
    #[arg(long)]
    prune_cap: bool,
    /// Enables missed-detection skipping with this maximum miss count.
    #[arg(long)]
    skip_miss: Option<usize>,
    #[arg(long)]
    all_on: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    label: Option<String>,
    /// Reuse a scenario dump instead of simulating.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Write the simulated scenario to this path.
    #[arg(long)]
    dump_scenario: Option<PathBuf>,
}

fn apply_overrides(cfg: &mut RunConfig, args: &RunArgs) {
    if let Some(seed) = args.seed {
        cfg.scenario.seed = seed;
    }
    if args.all_on {
        cfg.toggles = Toggles::all_on();
    }
    cfg.toggles.preprune |= args.preprune;
    cfg.toggles.memoize |= args.memoize;
    cfg.toggles.prune_cap |= args.prune_cap;
    if let Some(gate) = args.gate {
        cfg.toggles.gate = gate != GateMode::Off;
        cfg.birth.gate = gate;
    }
    if let Some(k) = args.skip_miss {
        cfg.toggles.skip_miss = true;
        cfg.birth.max_missed = k;
    }
    if let Some(out) = &args.out {
        cfg.output.dir = out.clone();
    }
    if let Some(label) = &args.label {
        cfg.output.label = label.clone();
    }
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = RunConfig::from_file(&args.config)?;
    apply_overrides(&mut cfg, &args);
    cfg.validate()?;
    let scenario = match &args.scenario {
        Some(path) => {
            let sc = Scenario::read(path)?;
            if sc.seed != cfg.scenario.seed {
                bail!(
                    "scenario dump {} was generated with seed {}, config uses {}",
                    path.display(),
                    sc.seed,
                    cfg.scenario.seed
                );
            }
            sc
        }
        None => Scenario::generate(&cfg.scenario)?,
    };
    if let Some(path) = &args.dump_scenario {
        scenario.write(path)?;
    }
    let report = run_on_scenario(&cfg, &scenario)?;
    let files = emit_report(&report, &cfg.output.dir)?;
    println!(
        "{}: {} steps, {} psi evaluations, {} memo hits, mean OSPA(2) {:.2}, wall {:.2}s (birth {:.1}%)",
        report.label,
        report.steps.len(),
        report.totals.computed,
        report.totals.memo_hits,
        report.mean_ospa2(),
        report.wall_time,
        100.0 * report.birth_fraction()
    );
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Compare {
            baseline,
            candidates,
            out,
        } => {
            let base = load_report(&baseline).with_context(|| format!("loading baseline {}", baseline.display()))?;
            let cands = candidates
                .iter()
                .map(|d| load_report(d).with_context(|| format!("loading candidate {}", d.display())))
                .collect::<Result<Vec<_>>>()?;
            let cmp = compare_runs(&base, &cands)?;
            print!("{}", cmp.to_csv());
            let path = emit_comparison(&cmp, &out)?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}
