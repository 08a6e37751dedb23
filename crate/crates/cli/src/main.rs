use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use klevel::harness::{
    evaluate, grad_check, mi_audit, parse_config, parse_seed_range, prepare_out_dir, run_training,
    write_audit_csv, RunConfig, GRAD_TOL,
};
use klevel::policy::ActionMode;

#[derive(Parser)]
#[command(name = "klevel", version, about = "Decentralized k-level policy gradient experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run and write metrics plus a final checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint without learning.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value = "map")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check the MI bounds and the chain-expansion identity on random tables.
    MiAudit {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// Write the sampled bounds here.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare reverse-mode gradients with central differences.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Parameter coordinates sampled per network.
        #[arg(long, default_value_t = 40)]
        coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train every `*.cfg` in a directory over a seed range, one process per run.
    Sweep {
        #[arg(long)]
        configs: PathBuf,
        /// End-exclusive range, e.g. 0..5.
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Concurrent runs; defaults to the number of CPUs.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

/// Failure before any work started (exit 1) or during it (exit 2).
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(usage)?;
    parse_config(&text)
        .with_context(|| format!("in {}", path.display()))
        .map_err(usage)
}

fn train(config: &Path, seed: u64, out: &Path, force: bool) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    cfg.seed = seed;
    prepare_out_dir(out, force).map_err(usage)?;
    let outcome = run_training(&cfg, Some(out), true).map_err(runtime)?;
    if let Some(last) = outcome.metrics.last() {
        println!(
            "trained {} epochs; final team reward {:.4}, mean episode length {:.1}",
            outcome.metrics.len(),
            last.team_reward,
            last.mean_episode_length
        );
    } else {
        println!("no epochs run; checkpoint holds the initialization");
    }
    Ok(())
}

fn eval(checkpoint: &Path, config: &Path, episodes: usize, mode: &str, seed: u64) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    cfg.seed = seed;
    let mode: ActionMode = mode.parse().map_err(|e: String| usage(anyhow!(e)))?;
    let s = evaluate(checkpoint, &cfg, episodes, mode).map_err(runtime)?;
    println!(
        "episodes {}\nteam reward {:.4} ± {:.4}\nsteps {:.2} ± {:.2}\nsolve rate {:.3}",
        s.episodes, s.mean_team_reward, s.stderr_team_reward, s.mean_steps, s.stderr_steps, s.solve_rate
    );
    Ok(())
}

fn audit(trials: usize, csv: Option<&Path>, seed: u64) -> Result<(), Failure> {
    let report = mi_audit(trials, seed).map_err(runtime)?;
    for c in &report.checks {
        println!("{c}");
    }
    if let Some(path) = csv {
        write_audit_csv(path, &report.rows).map_err(runtime)?;
    }
    if !report.passed() {
        return Err(runtime(anyhow!("mi audit failed")));
    }
    Ok(())
}

fn gradients(trials: usize, coords: usize, seed: u64) -> Result<(), Failure> {
    let r = grad_check(trials, coords, seed).map_err(runtime)?;
    let tag = if r.passed() { "PASS" } else { "FAIL" };
    println!(
        "{tag} grad_check: {} networks, {} coordinates, max rel error {:.3e} (tolerance {GRAD_TOL:e})",
        r.trials, r.coordinates, r.max_rel_error
    );
    if !r.passed() {
        println!("worst: {}", r.worst);
        return Err(runtime(anyhow!("gradient check failed")));
    }
    Ok(())
}

fn sweep(configs: &Path, seeds: &str, out: &Path, force: bool, jobs: Option<usize>) -> Result<(), Failure> {
    let seeds = parse_seed_range(seeds).map_err(usage)?;
    let mut files: Vec<PathBuf> = fs::read_dir(configs)
        .with_context(|| format!("reading {}", configs.display()))
        .map_err(usage)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "cfg"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(usage(anyhow!("no .cfg files in {}", configs.display())));
    }
    for f in &files {
        load_config(f)?;
    }
    let exe = std::env::current_exe().map_err(runtime)?;
    let jobs = jobs
        .or_else(|| std::thread::available_parallelism().ok().map(|n| n.get()))
        .unwrap_or(1)
        .max(1);

    let mut queue = Vec::new();
    for f in &files {
        let stem = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        for seed in seeds.clone() {
            queue.push((f.clone(), seed, out.join(&stem).join(format!("seed_{seed}"))));
        }
    }
    queue.reverse();
    let mut running: Vec<(String, Child)> = Vec::new();
    let mut failed = Vec::new();
    while !queue.is_empty() || !running.is_empty() {
        while running.len() < jobs {
            let Some((cfg, seed, dir)) = queue.pop() else { break };
            let mut cmd = Command::new(&exe);
            cmd.arg("train")
                .arg("--config")
                .arg(&cfg)
                .arg("--seed")
                .arg(seed.to_string())
                .arg("--out")
                .arg(&dir);
            if force {
                cmd.arg("--force");
            }
            let label = format!("{} seed {seed}", cfg.display());
            running.push((label, cmd.spawn().map_err(runtime)?));
        }
        let (label, mut child) = running.remove(0);
        let status = child.wait().map_err(runtime)?;
        if status.success() {
            println!("done {label}");
        } else {
            eprintln!("failed {label} ({status})");
            failed.push(label);
        }
    }
    if !failed.is_empty() {
        return Err(runtime(anyhow!("{} of the sweep's runs failed", failed.len())));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::Train { config, seed, out, force } => train(config, *seed, out, *force),
        Cmd::Eval {
            checkpoint,
            config,
            episodes,
            mode,
            seed,
        } => eval(checkpoint, config, *episodes, mode, *seed),
        Cmd::MiAudit { trials, csv, seed } => audit(*trials, csv.as_deref(), *seed),
        Cmd::GradCheck { trials, coords, seed } => gradients(*trials, *coords, *seed),
        Cmd::Sweep {
            configs,
            seeds,
            out,
            force,
            jobs,
        } => sweep(configs, seeds, out, *force, *jobs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
