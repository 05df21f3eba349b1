//! `seqfa`: sequential Bayesian factor analysis with evidence tracking.

mod config;
mod ingest;
mod output;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use clap::{Parser, Subcommand};
use serde::Serialize;

use seqfa_core::distributions::RngStream;
use seqfa_core::model::{simulate_scenario, DataKind, Dataset, FactorModel, ModelSpec, Theta};
use seqfa_core::modelselect::{run_menu, run_tag, MenuHooks, ModelRun};
use seqfa_core::smc::{FactorSequential, Smc, StepReport};
use seqfa_core::{Error, Result};

use config::{parse_scenario, RunConfig};
use output::DrawSnapshot;

#[derive(Parser)]
#[command(name = "seqfa", version, about = "Sequential Bayesian factor analysis and model comparison")]
struct Cli {
    /// Raise log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset from one of the built-in scenarios.
    Simulate {
        /// continuous1, continuous2 or binary1
        #[arg(long)]
        scenario: String,
        /// Number of rows (defaults to the scenario's size).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: u64,
        /// Output CSV; the true parameters go to `<out>.truth.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every model of a configuration file over its data.
    Run {
        config: PathBuf,
        /// Continue from the checkpoints in the output directory.
        #[arg(long)]
        resume: bool,
        /// Worker threads (default: SEQFA_THREADS or all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print the summary of a finished run directory.
    Report { run_dir: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) => 3,
        Error::DegeneratePopulation { .. } => 4,
        Error::TuningFailure { .. } => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let res = match cli.command {
        Command::Simulate { scenario, n, seed, out } => simulate(&scenario, n, seed, &out),
        Command::Run { config, resume, threads } => run(&config, resume, threads),
        Command::Report { run_dir } => report::render(&run_dir).map(|s| print!("{s}")),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[derive(Serialize)]
struct Truth<'a> {
    scenario: &'a str,
    n: usize,
    seed: u64,
    spec: ModelSpec,
    theta: Theta,
}

fn simulate(name: &str, n: Option<usize>, seed: u64, out: &Path) -> Result<()> {
    let scenario = parse_scenario(name)?;
    let n = n.unwrap_or_else(|| scenario.default_n());
    if n == 0 {
        return Err(Error::Config("--n must be positive".into()));
    }
    let data = simulate_scenario(&scenario, n, &mut RngStream::new(seed, 0))?;
    ingest::write_csv(out, &data)?;
    let (spec, theta) = scenario.truth();
    let truth = Truth {
        scenario: name,
        n,
        seed,
        spec,
        theta,
    };
    let mut sidecar = out.as_os_str().to_owned();
    sidecar.push(".truth.json");
    std::fs::write(sidecar, serde_json::to_string_pretty(&truth)? + "\n")?;
    Ok(())
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    if let Some(path) = &d.path {
        return ingest::ingest_csv(path, d.kind, d.standardize);
    }
    let name = d.scenario.as_deref().expect("validated config has a data source");
    let scenario = parse_scenario(name)?;
    let n = d.n.unwrap_or_else(|| scenario.default_n());
    let data = simulate_scenario(&scenario, n, &mut RngStream::new(d.seed.unwrap_or(cfg.seed), 0))?;
    match (d.kind, data.kind()) {
        (Some(config::KindOverride::Binary), DataKind::Continuous)
        | (Some(config::KindOverride::Continuous), DataKind::Binary) => {
            return Err(Error::Config(format!("data.kind contradicts scenario {name}")))
        }
        _ => {}
    }
    if d.standardize {
        if data.kind() == DataKind::Binary {
            return Err(Error::Data("binary data cannot be standardized".into()));
        }
        return data.standardized();
    }
    Ok(data)
}

fn set_threads(threads: Option<usize>) -> Result<()> {
    let threads = match threads {
        Some(t) => Some(t),
        None => match std::env::var("SEQFA_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("SEQFA_THREADS={v:?} is not a number")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::Config("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(config_path: &Path, resume: bool, threads: Option<usize>) -> Result<()> {
    set_threads(threads)?;
    let cfg = RunConfig::from_file(config_path)?;
    let data = Arc::new(load_data(&cfg)?);
    let menu = cfg.menu(data.p(), data.kind() == DataKind::Binary)?;
    let engine = cfg.engine_config();
    if engine.init.n_init >= data.n() {
        return Err(Error::Config(format!(
            "engine.n_init ({}) must be below the number of observations ({})",
            engine.init.n_init,
            data.n()
        )));
    }
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out)?;
    let n = data.n();
    let labels: Vec<String> = menu.labels().iter().map(|s| s.to_string()).collect();

    let mut all_runs: Vec<Vec<ModelRun>> = Vec::with_capacity(cfg.replicates);
    let mut snaps: Vec<(usize, DrawSnapshot)> = Vec::new();
    for rep in 0..cfg.replicates {
        let failure: Mutex<Option<Error>> = Mutex::new(None);
        let collected: Mutex<Vec<(usize, DrawSnapshot)>> = Mutex::new(Vec::new());
        let on_step = |idx: usize, smc: &Smc<'_, FactorSequential>, r: &StepReport| {
            let last = smc.particles().i_processed == n;
            if !(r.triggered || last) {
                return;
            }
            if cfg.output.checkpoints {
                let path = output::checkpoint_path(&out, &labels[idx], rep);
                if let Err(e) = output::write_checkpoint(&path, &smc.checkpoint()) {
                    failure.lock().unwrap().get_or_insert(e);
                }
            }
            if r.triggered && !last && cfg.output.draws_at_checkpoints {
                let snap = output::snapshot(&smc.model().model, smc.particles(), rep);
                collected.lock().unwrap().push((idx, snap));
            }
        };
        let resume_from = |idx: usize| -> Result<Option<seqfa_core::smc::Checkpoint>> {
            let path = output::checkpoint_path(&out, &labels[idx], rep);
            let Some(cp) = output::read_checkpoint(&path)? else {
                return Ok(None);
            };
            if cp.settings != engine.smc_settings(cfg.seed, run_tag(rep as u64, idx as u64)) {
                return Err(Error::Config(format!(
                    "checkpoint {} was written with different engine settings",
                    path.display()
                )));
            }
            log::info!("{}: resuming replicate {} at observation {}", labels[idx], rep + 1, cp.particles.i_processed);
            Ok(Some(cp))
        };
        let hooks = MenuHooks {
            on_step: Some(&on_step),
            resume_from: if resume { Some(&resume_from) } else { None },
        };
        let runs = run_menu(&menu, data.clone(), &engine, cfg.seed, rep as u64, hooks)?;
        if let Some(e) = failure.into_inner().unwrap() {
            return Err(e);
        }
        snaps.extend(collected.into_inner().unwrap());
        for (idx, r) in runs.iter().enumerate() {
            let model = FactorModel::new(r.spec.clone(), data.clone())?;
            snaps.push((idx, output::snapshot(&model, &r.particles, rep)));
        }
        all_runs.push(runs);
    }

    let start = output::first_index(&cfg);
    output::write_evidence(&out, &all_runs, start, n)?;
    output::write_lbf(&out, &all_runs, start, n)?;
    output::write_triggers(&out, &all_runs)?;
    // completion order of parallel engines is arbitrary
    snaps.sort_by_key(|(idx, s)| (*idx, s.replicate, s.index));
    for (idx, label) in labels.iter().enumerate() {
        let mine: Vec<DrawSnapshot> = snaps
            .iter()
            .filter(|(i, _)| *i == idx)
            .map(|(_, s)| s.clone())
            .collect();
        output::write_draws(&output::draws_path(&out, label), &mine)?;
    }
    output::write_meta(&out, &cfg, &data, &all_runs)?;
    let summary = report::render(&out)?;
    std::fs::write(out.join(output::SUMMARY_FILE), &summary)?;
    print!("{summary}");
    Ok(())
}
