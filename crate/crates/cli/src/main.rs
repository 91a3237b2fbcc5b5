use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use csfl_core::config::ExperimentConfig;
use csfl_core::overhead::overhead;
use csfl_core::planner::plan_with;
use csfl_core::protocol::{simulate, write_trace_csv, RoundTrace, Setup};
use csfl_core::{OverheadMode, Scheme};

/// Split-federated learning lab: split planning, delay and overhead models,
/// and a small training simulator.
#[derive(Parser, Debug)]
#[command(name = "csfl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    opts: Opts,
}

#[derive(clap::Args, Debug)]
struct Opts {
    /// Experiment file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory. CSFL_OUT takes precedence when set.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Overrides `run.seed`.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Schemes to run. Defaults to `scheme.name`, else all.
    #[arg(long, global = true, value_enum)]
    scheme: Option<SchemeArg>,

    /// Count activation and gradient traffic once per round, as in the
    /// closed forms, instead of once per epoch.
    #[arg(long, global = true)]
    paper_verbatim: bool,

    /// Smallest collaborative layer the planner considers.
    #[arg(long, global = true, value_name = "K")]
    min_h: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Exhaustive (h, v) search; writes plan.csv and prints the best pair.
    Plan,
    /// Train each scheme and write trace_<scheme>.csv.
    Simulate,
    /// Print per-round communication overhead of each scheme.
    Overhead,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SchemeArg {
    Sfl,
    Locsplitfed,
    Csfl,
    All,
}

struct Run {
    cfg: ExperimentConfig,
    seed: u64,
    out: PathBuf,
    schemes: Vec<Scheme>,
    verbatim: bool,
    min_h: usize,
}

impl Run {
    fn new(opts: &Opts) -> Result<Self> {
        let path = opts.config.as_deref().context("--config is required")?;
        let cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
        let out = std::env::var_os("CSFL_OUT")
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .or_else(|| opts.out.clone())
            .or_else(|| cfg.run.out.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        let schemes = match opts.scheme {
            Some(SchemeArg::Sfl) => vec![Scheme::Sfl],
            Some(SchemeArg::Locsplitfed) => vec![Scheme::LocSplitFed],
            Some(SchemeArg::Csfl) => vec![Scheme::Csfl],
            Some(SchemeArg::All) => Scheme::ALL.to_vec(),
            None => cfg.scheme_name()?.map_or(Scheme::ALL.to_vec(), |s| vec![s]),
        };
        Ok(Self {
            seed: opts.seed.unwrap_or(cfg.run.seed),
            verbatim: opts.paper_verbatim || cfg.run.paper_verbatim,
            min_h: opts.min_h.unwrap_or_else(|| cfg.min_h()),
            cfg,
            out,
            schemes,
        })
    }

    fn overhead_mode(&self) -> OverheadMode {
        if self.verbatim {
            OverheadMode::VERBATIM
        } else {
            OverheadMode::per_epoch(self.cfg.scheme.epochs)
        }
    }

    fn out_file(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(self.out.join(name))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn cmd_plan(run: &Run) -> Result<()> {
    let profile = run.cfg.profile()?;
    let fleet = run.cfg.fleet()?;
    fleet.validate()?;
    let batches = run.cfg.batches(run.seed)?;
    let result = plan_with(
        &profile,
        &fleet,
        run.cfg.scheme.epochs,
        batches,
        run.min_h,
        &run.cfg.delay_options()?,
        run.overhead_mode(),
    )?;
    let path = run.out_file("plan.csv")?;
    result.write_csv(create(&path)?)?;
    println!(
        "best split (h, v) = ({}, {})  d_round = {} s  [{} candidates -> {}]",
        result.best.h(),
        result.best.v(),
        result.best_delay.d_round,
        result.candidates.len(),
        path.display()
    );
    Ok(())
}

fn cmd_simulate(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    let net = cfg.net_spec(run.seed)?;
    let profile = cfg.profile()?;
    let fleet = cfg.fleet()?;
    fleet.validate()?;
    let dataset = cfg.dataset(run.seed)?;
    let shards = cfg.shards(&dataset, fleet.len(), run.seed)?;
    let configs = run
        .schemes
        .iter()
        .map(|&s| {
            let c = cfg.scheme_config(s)?;
            c.validate(net.blocks())?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let setup = Setup {
        net: &net,
        profile: &profile,
        fleet: &fleet,
        dataset: &dataset,
        shards: &shards,
    };

    // schemes are independent; each writes its own file
    let traces: Vec<Result<Vec<RoundTrace>>> = thread::scope(|scope| {
        let handles: Vec<_> = configs
            .iter()
            .map(|c| scope.spawn(|| simulate(c, &setup, run.seed).map_err(anyhow::Error::from)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| bail!("simulation thread panicked")))
            .collect()
    });

    for (c, trace) in configs.iter().zip(traces) {
        let trace = trace.with_context(|| format!("simulating {}", c.scheme))?;
        let path = run.out_file(&format!("trace_{}.csv", c.scheme.key()))?;
        write_trace_csv(&trace, create(&path)?)?;
        match trace.last() {
            Some(t) => println!(
                "{:<12} final_acc={:.4} total_delay_s={:.6} total_bits={} rounds={} -> {}",
                c.scheme.to_string(),
                t.test_acc,
                t.cum_delay_s,
                t.cum_bits,
                t.round,
                path.display()
            ),
            None => println!("{:<12} no rounds -> {}", c.scheme.to_string(), path.display()),
        }
    }
    Ok(())
}

fn cmd_overhead(run: &Run) -> Result<()> {
    let profile = run.cfg.profile()?;
    let fleet = run.cfg.fleet()?;
    let split = run.cfg.split()?;
    let batches = run.cfg.batches(run.seed)?;
    let lambda = fleet.aggregator_fraction;
    let mode = run.overhead_mode();
    println!(
        "N={} B={batches} lambda={lambda} h={} v={} mode={}",
        fleet.len(),
        split.h(),
        split.v(),
        if run.verbatim { "verbatim" } else { "per-epoch" }
    );
    for &scheme in &run.schemes {
        let r = overhead(scheme, &profile, fleet.len(), batches, split, lambda, mode)?;
        println!("{:<12} {} bits", scheme.to_string(), r.bits_per_round);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = Run::new(&cli.opts).and_then(|run| match cli.command {
        Command::Plan => cmd_plan(&run),
        Command::Simulate => cmd_simulate(&run),
        Command::Overhead => cmd_overhead(&run),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
