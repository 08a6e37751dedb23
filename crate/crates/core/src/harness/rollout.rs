//! Episode rollouts on a shared graph.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffkit::Graph;
use crate::envs::{ActionSpace, Environment, FraudLatents, MessageRule};
use crate::error::{contract, Result};
use crate::mi::BoundSample;
use crate::policy::{k_level_forward, log_prob, select_action, ActionMode, BoundPolicy, ForwardOptions, Messages};
use crate::trainers::Transition;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutSettings {
    pub k: usize,
    pub mode: ActionMode,
    /// Std of the perturbation on level-0 latents; only used in sample mode.
    pub guess_noise: f64,
    pub fraud_latents: FraudLatents,
    /// Record MAP-probability bound samples for every (agent, neighbor) pair.
    pub record_bounds: bool,
}

#[derive(Clone, Debug)]
pub struct Episode {
    /// Per-agent transitions; empty for the fraud agent.
    pub transitions: Vec<Vec<Transition>>,
    pub returns: Vec<f64>,
    pub steps: usize,
    pub solved: bool,
    pub bounds: Vec<BoundSample>,
}

impl Episode {
    pub fn team_return(&self) -> f64 {
        self.returns.iter().sum()
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, width: usize, std: f64) -> Vec<f64> {
    (0..width).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Plays one episode. `sample_rngs[i]` drives agent i's action sampling,
/// `noise_rng` the latent perturbations.
pub fn run_episode(
    g: &mut Graph,
    env: &mut dyn Environment,
    policies: &[&BoundPolicy],
    settings: &RolloutSettings,
    sample_rngs: &mut [ChaCha8Rng],
    noise_rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let n = env.agent_count();
    if policies.len() != n || sample_rngs.len() != n {
        return contract(format!(
            "{n} agents, {} policies, {} sampling streams",
            policies.len(),
            sample_rngs.len()
        ));
    }
    let width = policies[0].latent_width();
    let fraud = env.fraud_agent();
    let hub = env.message_rule() == MessageRule::HoldAtEvent;
    let discrete = match env.action_space() {
        ActionSpace::Discrete(a) => Some(a),
        ActionSpace::Continuous(_) => None,
    };
    let k = settings.k;

    let reset = env.reset();
    let mut obs = reset.observations;
    let mut graph = reset.graph;
    let mut held: Vec<Option<Vec<Vec<f64>>>> = vec![None; n];
    if hub {
        held = vec![Some(vec![vec![0.0; width]; k]); n];
    }
    let mut ep = Episode {
        transitions: vec![Vec::new(); n],
        returns: vec![0.0; n],
        steps: 0,
        solved: false,
        bounds: Vec::new(),
    };

    loop {
        let mut overrides = held.clone();
        if let (Some(m), FraudLatents::Noise) = (fraud, settings.fraud_latents) {
            overrides[m] = Some((0..k).map(|_| gaussian_vec(noise_rng, width, 1.0)).collect());
        }
        let use_override = overrides.iter().any(Option::is_some);
        let noise: Option<Vec<Vec<f64>>> = (settings.mode == ActionMode::Sample && settings.guess_noise > 0.0)
            .then(|| (0..n).map(|_| gaussian_vec(noise_rng, width, settings.guess_noise)).collect());
        let options = ForwardOptions {
            messages: if use_override {
                Messages::Override(&overrides)
            } else {
                Messages::Live
            },
            level0_noise: noise.as_deref(),
        };
        let forward = k_level_forward(g, policies, &obs, &graph, k, options)?;

        let mut actions = Vec::with_capacity(n);
        for (f, rng) in forward.iter().zip(sample_rngs.iter_mut()) {
            actions.push(select_action(&f.dist, settings.mode, rng)?);
        }
        if settings.record_bounds && k >= 1 {
            if let Some(a) = discrete {
                for i in (0..n).filter(|&i| Some(i) != fraud) {
                    let p = forward[i].dist.map_probability().expect("categorical head");
                    for j in graph.neighbors(i) {
                        ep.bounds.push(BoundSample::new(ep.steps, (i, j), p, a)?);
                    }
                }
            }
        }

        let step = env.step(&actions)?;
        for i in 0..n {
            ep.returns[i] += step.rewards[i];
            if Some(i) == fraud {
                continue;
            }
            let neighbors = graph.neighbors(i);
            let neighbor_actions = neighbors.iter().map(|&j| step.executed[j].clone()).collect();
            let lp = log_prob(g, &forward[i].dist, &actions[i])?;
            ep.transitions[i].push(Transition {
                agent: i,
                obs: obs[i].clone(),
                trace: forward[i].trace.clone(),
                action: actions[i].clone(),
                log_prob: lp,
                reward: step.rewards[i],
                next_obs: step.observations[i].clone(),
                done: step.done,
                neighbors,
                neighbor_actions,
            });
        }
        if hub {
            for (j, hit) in step.events.iter().enumerate() {
                if *hit {
                    let levels = forward[j].trace[..k]
                        .iter()
                        .map(|l| g.value(l.vector).map(<[f64]>::to_vec))
                        .collect::<Result<Vec<_>>>()?;
                    held[j] = Some(levels);
                }
            }
        }
        ep.steps += 1;
        obs = step.observations;
        graph = step.graph;
        if step.done {
            ep.solved = step.solved;
            return Ok(ep);
        }
    }
}
