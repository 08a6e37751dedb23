//! The outer training loop and checkpoint evaluation.

use std::path::Path;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
use super::config::RunConfig;
use super::metrics::{prepare_out_dir, EpochMetrics, MetricsWriter, CHECKPOINT_FILE};
use super::rng::Streams;
use super::rollout::{run_episode, Episode, RolloutSettings};
use crate::diffkit::Graph;
use crate::envs::{Action, ActionSpace, Environment};
use crate::error::{contract, Error, Result};
use crate::policy::{ActionMode, BoundPolicy, PolicyBundle, PolicySpec};
use crate::trainers::{
    consensus_average, update_agent, AgentBatch, AgentState, Algorithm, UpdateConfig, Variant,
};

/// Builds the run's environment with its seed drawn from the "env" stream.
pub fn build_env(cfg: &RunConfig, streams: &Streams) -> Result<Box<dyn Environment>> {
    let mut env_cfg = cfg.env.clone();
    env_cfg.seed = streams.seed("env", 0);
    env_cfg.build()
}

pub fn policy_spec(cfg: &RunConfig, env: &dyn Environment) -> PolicySpec {
    let graph = env.comm_graph();
    let slots = if cfg.algorithm == Algorithm::Moa {
        (0..env.agent_count()).map(|i| graph.neighbors(i).len()).max().unwrap_or(0)
    } else {
        0
    };
    PolicySpec {
        obs_width: env.obs_width(),
        latent: cfg.latent,
        hidden: cfg.hidden,
        actions: env.action_space(),
        cell: cfg.cell,
        gaussian_std: cfg.gaussian_std,
        predictor_slots: slots,
    }
}

/// Fresh agents, each initialized from its own "init" stream.
pub fn init_agents(cfg: &RunConfig, env: &dyn Environment, streams: &Streams) -> Result<Vec<AgentState>> {
    let spec = policy_spec(cfg, env);
    (0..env.agent_count())
        .map(|i| {
            let mut rng = streams.stream("init", i as u64);
            let bundle = PolicyBundle::new(spec.clone(), &mut rng)?;
            let mut state = AgentState::new(i, bundle, cfg.optimizer, cfg.lr)?;
            state.frozen = env.fraud_agent() == Some(i);
            Ok(state)
        })
        .collect()
}

fn sample_streams(streams: &Streams, name: &str, n: usize) -> Vec<ChaCha8Rng> {
    (0..n).map(|i| streams.stream(name, i as u64)).collect()
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Summary of one batch of episodes.
pub fn epoch_metrics(epoch: usize, episodes: &[Episode], agents: usize) -> EpochMetrics {
    let count = episodes.len().max(1) as f64;
    let per_agent_reward: Vec<f64> = (0..agents)
        .map(|i| episodes.iter().map(|e| e.returns[i]).sum::<f64>() / count)
        .collect();
    let bounds = episodes.iter().flat_map(|e| e.bounds.iter());
    let mi_midpoint = mean(bounds.clone().map(|b| b.midpoint));
    let mi_lower = mean(bounds.clone().map(|b| b.lower));
    let mi_upper = mean(bounds.map(|b| b.upper));
    EpochMetrics {
        epoch,
        team_reward: per_agent_reward.iter().sum(),
        per_agent_reward,
        mean_episode_length: episodes.iter().map(|e| e.steps as f64).sum::<f64>() / count,
        mi_midpoint,
        mi_lower,
        mi_upper,
    }
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub agents: Vec<AgentState>,
    pub initial_checksums: Vec<u64>,
    pub stopped_early: bool,
}

fn diverged(epoch: usize, agent: usize, op: &str, episodes: &[Episode]) -> Error {
    let offending = episodes
        .iter()
        .flat_map(|e| e.transitions[agent].iter())
        .find(|t| !t.reward.is_finite() || t.obs.iter().chain(&t.next_obs).any(|v| !v.is_finite()))
        .or_else(|| episodes.iter().flat_map(|e| e.transitions[agent].first()).next());
    let dump = offending.map_or_else(
        || "no transitions".to_string(),
        |t| {
            format!(
                "obs={:?} action={:?} reward={} next_obs={:?} done={}",
                t.obs, t.action, t.reward, t.next_obs, t.done
            )
        },
    );
    Error::Diverged(format!("epoch {epoch}, agent {agent}: non-finite {op}; transition {dump}"))
}

/// Trains per `cfg`. With `out` set, metrics are written there as the run
/// progresses and the final parameters are saved to `checkpoint.bin`.
pub fn run_training(cfg: &RunConfig, out: Option<&Path>, force: bool) -> Result<TrainingOutcome> {
    cfg.validate()?;
    let streams = Streams::new(cfg.seed);
    let mut env = build_env(cfg, &streams)?;
    let n = env.agent_count();
    let mut agents = init_agents(cfg, env.as_ref(), &streams)?;
    let initial_checksums = agents.iter().map(|a| a.bundle.checksum()).collect();
    let mut writer = match out {
        Some(dir) => {
            prepare_out_dir(dir, force)?;
            Some(MetricsWriter::create(dir, n)?)
        }
        None => None,
    };

    let mut sample_rngs = sample_streams(&streams, "sample", n);
    let mut noise_rng = streams.stream("noise", 0);
    let k = cfg.effective_k();
    let settings = RolloutSettings {
        k,
        mode: cfg.action_mode,
        guess_noise: cfg.guess_noise,
        fraud_latents: cfg.env.fraud_latents,
        record_bounds: matches!(env.action_space(), ActionSpace::Discrete(_)),
    };
    let variant = Variant::for_algorithm(cfg.algorithm, cfg.beta);
    let update_cfg = UpdateConfig {
        gamma: cfg.gamma,
        grad_cap: cfg.grad_cap,
        advantage: cfg.advantage,
    };

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut g = Graph::new();
        let bound: Vec<BoundPolicy> = agents.iter().map(|a| a.bundle.bind(&mut g)).collect::<Result<_>>()?;
        let refs: Vec<&BoundPolicy> = bound.iter().collect();
        let mut episodes = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            episodes.push(run_episode(
                &mut g,
                env.as_mut(),
                &refs,
                &settings,
                &mut sample_rngs,
                &mut noise_rng,
            )?);
        }
        let m = epoch_metrics(epoch, &episodes, n);

        for (i, state) in agents.iter_mut().enumerate() {
            if state.frozen {
                continue;
            }
            let transitions: Vec<_> = episodes.iter().flat_map(|e| e.transitions[i].iter().cloned()).collect();
            let batch = AgentBatch {
                actor_vars: bound[i].actor_vars(),
                critic: state.bundle.bind_critic(&mut g)?,
                predictor: bound[i].predictor().cloned(),
                transitions,
            };
            match update_agent(&mut g, state, &batch, variant, &update_cfg) {
                Ok(_) => {}
                Err(Error::Numeric { op }) => return Err(diverged(epoch, i, op, &episodes)),
                Err(e) => return Err(e),
            }
            if !state.bundle.named_tensors().iter().all(|(_, t)| t.is_finite()) {
                return Err(diverged(epoch, i, "parameters", &episodes));
            }
        }
        if cfg.algorithm == Algorithm::Cu {
            consensus_average(&mut agents, &env.comm_graph())?;
        }
        g.release();

        if let Some(w) = writer.as_mut() {
            w.write(&m, start.elapsed().as_secs_f64())?;
        }
        let team = m.team_reward;
        metrics.push(m);
        if team > best {
            best = team;
            best_epoch = epoch;
        }
        if cfg.plateau > 0 && epoch - best_epoch >= cfg.plateau {
            stopped_early = true;
            break;
        }
    }

    if let Some(dir) = out {
        let spec = policy_spec(cfg, env.as_ref());
        let header = CheckpointHeader::new(cfg.env.kind.name(), cfg.algorithm.as_str(), k, n, &spec);
        let bundles: Vec<&PolicyBundle> = agents.iter().map(|a| &a.bundle).collect();
        save_checkpoint(&dir.join(CHECKPOINT_FILE), &header, &bundles)?;
    }
    Ok(TrainingOutcome {
        metrics,
        agents,
        initial_checksums,
        stopped_early,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_team_reward: f64,
    pub stderr_team_reward: f64,
    pub mean_steps: f64,
    pub stderr_steps: f64,
    pub solve_rate: f64,
}

/// Mean and standard error (sample std / √n) of `xs`.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// Plays `episodes` episodes with fixed parameters; no learning.
pub fn evaluate_bundles(
    cfg: &RunConfig,
    bundles: &[PolicyBundle],
    episodes: usize,
    mode: ActionMode,
) -> Result<EvalSummary> {
    if episodes == 0 {
        return contract("evaluation needs at least one episode");
    }
    let streams = Streams::new(cfg.seed);
    let mut env_cfg = cfg.env.clone();
    env_cfg.seed = streams.seed("eval_env", 0);
    let mut env = env_cfg.build()?;
    let spec = policy_spec(cfg, env.as_ref());
    if bundles.len() != env.agent_count() || bundles.iter().any(|b| b.spec != spec) {
        return contract("policy architecture does not match the config");
    }
    let n = env.agent_count();
    let mut sample_rngs = sample_streams(&streams, "eval_sample", n);
    let mut noise_rng = streams.stream("eval_noise", 0);
    let settings = RolloutSettings {
        k: cfg.effective_k(),
        mode,
        guess_noise: cfg.guess_noise,
        fraud_latents: cfg.env.fraud_latents,
        record_bounds: false,
    };
    let mut rewards = Vec::with_capacity(episodes);
    let mut steps = Vec::with_capacity(episodes);
    let mut solved = 0usize;
    for _ in 0..episodes {
        let mut g = Graph::new();
        let bound: Vec<BoundPolicy> = bundles.iter().map(|b| b.bind(&mut g)).collect::<Result<_>>()?;
        let refs: Vec<&BoundPolicy> = bound.iter().collect();
        let ep = run_episode(&mut g, env.as_mut(), &refs, &settings, &mut sample_rngs, &mut noise_rng)?;
        rewards.push(ep.team_return());
        steps.push(ep.steps as f64);
        solved += ep.solved as usize;
        g.release();
    }
    Ok(summarize(&rewards, &steps, solved))
}

fn summarize(rewards: &[f64], steps: &[f64], solved: usize) -> EvalSummary {
    let (mean_team_reward, stderr_team_reward) = mean_stderr(rewards);
    let (mean_steps, stderr_steps) = mean_stderr(steps);
    EvalSummary {
        episodes: rewards.len(),
        mean_team_reward,
        stderr_team_reward,
        mean_steps,
        stderr_steps,
        solve_rate: solved as f64 / rewards.len() as f64,
    }
}

/// Evaluates a hand-written joint policy mapping observations to actions.
pub fn evaluate_scripted<F>(cfg: &RunConfig, episodes: usize, mut policy: F) -> Result<EvalSummary>
where
    F: FnMut(&[Vec<f64>]) -> Vec<Action>,
{
    if episodes == 0 {
        return contract("evaluation needs at least one episode");
    }
    let streams = Streams::new(cfg.seed);
    let mut env_cfg = cfg.env.clone();
    env_cfg.seed = streams.seed("eval_env", 0);
    let mut env = env_cfg.build()?;
    let mut rewards = Vec::with_capacity(episodes);
    let mut steps = Vec::with_capacity(episodes);
    let mut solved = 0usize;
    for _ in 0..episodes {
        let mut obs = env.reset().observations;
        let (mut total, mut t) = (0.0, 0usize);
        loop {
            let step = env.step(&policy(&obs))?;
            total += step.rewards.iter().sum::<f64>();
            t += 1;
            obs = step.observations;
            if step.done {
                solved += step.solved as usize;
                break;
            }
        }
        rewards.push(total);
        steps.push(t as f64);
    }
    Ok(summarize(&rewards, &steps, solved))
}

/// Loads a checkpoint written by [`run_training`] and evaluates it.
pub fn evaluate(checkpoint: &Path, cfg: &RunConfig, episodes: usize, mode: ActionMode) -> Result<EvalSummary> {
    cfg.validate()?;
    let ck = load_checkpoint(checkpoint)?;
    let streams = Streams::new(cfg.seed);
    let env = build_env(cfg, &streams)?;
    let bundles = ck.restore(&policy_spec(cfg, env.as_ref()), env.agent_count())?;
    evaluate_bundles(cfg, &bundles, episodes, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvKind, PistonLineParams};
    use crate::harness::metrics::{METRICS_CSV, METRICS_JSONL};

    fn tiny(algo: Algorithm) -> RunConfig {
        let mut cfg = RunConfig::defaults(EnvKind::PistonLine(PistonLineParams::default()), algo);
        cfg.env.agents = 3;
        cfg.env.max_cycles = 8;
        cfg.latent = 4;
        cfg.hidden = 4;
        cfg.batch = 2;
        cfg.epochs = 3;
        cfg.seed = 11;
        cfg
    }

    #[test]
    fn standard_error_formula() {
        let (m, se) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert!((m - 2.5).abs() < 1e-15);
        // sample std sqrt(5/3), over sqrt(4)
        assert!((se - (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-15);
        assert_eq!(mean_stderr(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let mut cfg = tiny(Algorithm::AdvInfoPg);
        cfg.epochs = 0;
        let dir = tempfile::tempdir().unwrap();
        let out = run_training(&cfg, Some(dir.path()), true).unwrap();
        assert!(out.metrics.is_empty());
        let checks: Vec<u64> = out.agents.iter().map(|a| a.bundle.checksum()).collect();
        assert_eq!(checks, out.initial_checksums);
        let ck = load_checkpoint(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        let env = build_env(&cfg, &Streams::new(cfg.seed)).unwrap();
        let restored = ck.restore(&policy_spec(&cfg, env.as_ref()), 3).unwrap();
        assert_eq!(restored.iter().map(PolicyBundle::checksum).collect::<Vec<_>>(), checks);
        assert_eq!(std::fs::read_to_string(dir.path().join(METRICS_JSONL)).unwrap(), "");
    }

    #[test]
    fn every_algorithm_runs_and_conserves_team_reward() {
        for algo in Algorithm::ALL {
            let out = run_training(&tiny(algo), None, false).unwrap();
            assert_eq!(out.metrics.len(), 3);
            for m in &out.metrics {
                let sum: f64 = m.per_agent_reward.iter().sum();
                assert!((m.team_reward - sum).abs() <= 1e-9);
                assert_eq!(m.mi_midpoint.is_some(), algo.communicates(), "{algo:?}");
            }
            assert!(out
                .agents
                .iter()
                .zip(&out.initial_checksums)
                .any(|(a, c)| a.bundle.checksum() != *c));
        }
    }

    #[test]
    fn metrics_files_are_reproducible() {
        let cfg = tiny(Algorithm::InfoPg);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_training(&cfg, Some(a.path()), true).unwrap();
        run_training(&cfg, Some(b.path()), true).unwrap();
        for f in [METRICS_JSONL, METRICS_CSV, CHECKPOINT_FILE] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn fraud_agent_is_never_updated() {
        let mut cfg = tiny(Algorithm::AdvInfoPg);
        cfg.env.agents = 5;
        cfg.env.fraud_agent = Some(2);
        let out = run_training(&cfg, None, false).unwrap();
        assert!(out.agents[2].frozen);
        assert_eq!(out.agents[2].bundle.checksum(), out.initial_checksums[2]);
        assert_ne!(out.agents[1].bundle.checksum(), out.initial_checksums[1]);
    }

    #[test]
    fn plateau_stops_early() {
        let mut cfg = tiny(Algorithm::NcA2c);
        cfg.epochs = 200;
        cfg.plateau = 2;
        let out = run_training(&cfg, None, false).unwrap();
        assert!(out.stopped_early);
        assert!(out.metrics.len() < 200);
    }

    #[test]
    fn existing_output_needs_force() {
        let cfg = tiny(Algorithm::NcA2c);
        let dir = tempfile::tempdir().unwrap();
        run_training(&cfg, Some(dir.path()), false).unwrap();
        assert!(run_training(&cfg, Some(dir.path()), false).is_err());
        run_training(&cfg, Some(dir.path()), true).unwrap();
    }

    #[test]
    fn evaluation_rejects_mismatched_architecture() {
        let cfg = tiny(Algorithm::AdvInfoPg);
        let out = run_training(&cfg, None, false).unwrap();
        let bundles: Vec<PolicyBundle> = out.agents.into_iter().map(|a| a.bundle).collect();
        let s = evaluate_bundles(&cfg, &bundles, 3, ActionMode::Map).unwrap();
        assert_eq!(s.episodes, 3);
        let mut other = cfg.clone();
        other.latent = 5;
        assert!(evaluate_bundles(&other, &bundles, 3, ActionMode::Map).is_err());
    }
}
