//! Decentralized actor-critic updates: InfoPG, Adv. InfoPG, NC-A2C, consensus
//! averaging and the action-prediction (MOA) regularizer.
//!
//! All transitions of one update batch live on a single [`Graph`]. Each agent
//! builds its own loss on that graph, runs one backward sweep and steps only
//! its own optimizers. Neighbors' latents enter an agent's loss as graph
//! nodes, so the chain through the communicative policy is differentiated,
//! but only the agent's own parameter gradients are read.

use crate::diffkit::{
    clip_global_norm, collect_grads, mlp_forward, BoundMlp, Graph, OptimizerKind, OptimizerState, Parameterized,
    Tensor, Var,
};
use crate::envs::{Action, CommGraph};
use crate::error::{contract, Error, Result};
use crate::policy::{BoundCritic, LatentAction, PolicyBundle, LOG_PROB_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    InfoPg,
    AdvInfoPg,
    NcA2c,
    Cu,
    Moa,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [Self::InfoPg, Self::AdvInfoPg, Self::NcA2c, Self::Cu, Self::Moa];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::InfoPg => "infopg",
            Self::AdvInfoPg => "adv_infopg",
            Self::NcA2c => "nc_a2c",
            Self::Cu => "cu",
            Self::Moa => "moa",
        }
    }

    /// Whether the k-level rounds run at all.
    pub fn communicates(&self) -> bool {
        matches!(self, Self::InfoPg | Self::AdvInfoPg)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown algorithm `{s}` (expected infopg, adv_infopg, nc_a2c, cu or moa)"))
    }
}

/// How the actor weights each log-probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    /// `max(0, A)`.
    InfoPg,
    /// `A` as is.
    AdvInfoPg,
    /// `A` plus `beta` times the neighbor-action cross-entropy.
    Moa { beta: f64 },
}

impl Variant {
    pub fn for_algorithm(algo: Algorithm, beta: f64) -> Self {
        match algo {
            Algorithm::InfoPg => Self::InfoPg,
            Algorithm::AdvInfoPg | Algorithm::NcA2c | Algorithm::Cu => Self::AdvInfoPg,
            Algorithm::Moa => Self::Moa { beta },
        }
    }

    pub fn gate(&self, advantage: f64) -> f64 {
        match self {
            Self::InfoPg => advantage.max(0.0),
            Self::AdvInfoPg | Self::Moa { .. } => advantage,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AdvantageMode {
    /// One-step bootstrapped `r + γV(o′) − V(o)`.
    #[default]
    TemporalDifference,
    /// Discounted return-to-go as the actor weight.
    MonteCarlo,
}

impl std::str::FromStr for AdvantageMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "td" => Ok(Self::TemporalDifference),
            "monte_carlo" => Ok(Self::MonteCarlo),
            other => Err(format!("unknown advantage mode `{other}` (expected td or monte_carlo)")),
        }
    }
}

/// One agent-timestep.
#[derive(Clone, Debug)]
pub struct Transition {
    pub agent: usize,
    pub obs: Vec<f64>,
    pub trace: Vec<LatentAction>,
    pub action: Action,
    pub log_prob: Var,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
    /// Neighbors at this timestep, ascending, with the actions they executed.
    pub neighbors: Vec<usize>,
    pub neighbor_actions: Vec<Action>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvantageEstimate {
    pub advantage: f64,
    pub value: f64,
    pub next_value: f64,
}

/// `A = r + γ·V(o′)·(1 − done) − V(o)`.
pub fn advantage(reward: f64, value: f64, next_value: f64, done: bool, gamma: f64) -> AdvantageEstimate {
    let bootstrap = if done { 0.0 } else { gamma * next_value };
    AdvantageEstimate {
        advantage: reward + bootstrap - value,
        value,
        next_value,
    }
}

/// Advantage of one transition plus the `V(o)` node that carries the critic
/// gradient. `V(o′)` is read as a number only.
pub fn compute_advantage(
    g: &mut Graph,
    critic: &BoundCritic,
    t: &Transition,
    gamma: f64,
) -> Result<(AdvantageEstimate, Var)> {
    if !(0.0..1.0).contains(&gamma) {
        return contract(format!("discount must lie in [0, 1), got {gamma}"));
    }
    let v = critic.value(g, &t.obs)?;
    let next = if t.done {
        0.0
    } else {
        let nv = critic.value(g, &t.next_obs)?;
        g.scalar(nv)?
    };
    Ok((advantage(t.reward, g.scalar(v)?, next, t.done, gamma), v))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateConfig {
    pub gamma: f64,
    pub grad_cap: f64,
    pub advantage: AdvantageMode,
}

/// One agent's learnable state: its bundle and two optimizers.
#[derive(Clone, Debug)]
pub struct AgentState {
    pub id: usize,
    pub bundle: PolicyBundle,
    pub actor_opt: OptimizerState,
    pub critic_opt: OptimizerState,
    /// A frozen agent never receives an update.
    pub frozen: bool,
}

impl AgentState {
    pub fn new(id: usize, bundle: PolicyBundle, kind: OptimizerKind, lr: f64) -> Result<Self> {
        let actor_opt = OptimizerState::new(kind, lr, &bundle.actor_tensors())?;
        let critic_opt = OptimizerState::new(kind, lr, &bundle.critic_tensors())?;
        Ok(Self {
            id,
            bundle,
            actor_opt,
            critic_opt,
            frozen: false,
        })
    }
}

/// What an agent contributed to a batch graph.
#[derive(Clone, Debug)]
pub struct AgentBatch {
    pub actor_vars: Vec<Var>,
    pub critic: BoundCritic,
    pub predictor: Option<BoundMlp>,
    pub transitions: Vec<Transition>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub aux_loss: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
    pub advantages: Vec<AdvantageEstimate>,
    /// False when every gated weight was zero and the actor was left alone.
    pub actor_stepped: bool,
}

fn discounted_returns(transitions: &[Transition], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; transitions.len()];
    let mut running = 0.0;
    for (k, t) in transitions.iter().enumerate().rev() {
        if t.done {
            running = 0.0;
        }
        running = t.reward + gamma * running;
        out[k] = running;
    }
    out
}

/// Cross-entropy of the prediction head against neighbors' executed actions,
/// summed over neighbors and timesteps.
fn prediction_loss(g: &mut Graph, predictor: &BoundMlp, transitions: &[Transition], actions: usize) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    for t in transitions {
        if t.neighbors.len() != t.neighbor_actions.len() {
            return contract(format!(
                "agent {} has {} neighbors but {} neighbor actions",
                t.agent,
                t.neighbors.len(),
                t.neighbor_actions.len()
            ));
        }
        if t.neighbors.is_empty() {
            continue;
        }
        let latent = t.trace.last().ok_or_else(|| Error::Contract("empty level trace".into()))?;
        let logits = mlp_forward(g, predictor, latent.vector)?;
        let slots = g.shape(logits)?[0] / actions;
        for (slot, a) in t.neighbor_actions.iter().enumerate() {
            if slot >= slots {
                return contract(format!("agent {} has more neighbors than prediction slots", t.agent));
            }
            let Action::Discrete(a) = *a else {
                return contract("action prediction needs discrete neighbor actions");
            };
            let part = g.slice(logits, slot * actions, actions)?;
            let probs = g.softmax(part)?;
            let p = g.pick(probs, a)?;
            let lp = g.log_floor(p, LOG_PROB_FLOOR)?;
            terms.push(g.scale(lp, -1.0)?);
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    Ok(Some(g.add_all(&terms)?))
}

/// Builds the agent's loss on `g`, backpropagates once, clips actor and
/// critic gradients separately and steps both optimizers.
pub fn update_agent(
    g: &mut Graph,
    state: &mut AgentState,
    batch: &AgentBatch,
    variant: Variant,
    cfg: &UpdateConfig,
) -> Result<UpdateStats> {
    if state.frozen {
        return contract(format!("agent {} is frozen", state.id));
    }
    if g.is_released() {
        return contract(format!("graph {} was already released", g.id()));
    }
    if batch.transitions.is_empty() {
        return contract(format!("agent {} has no transitions", state.id));
    }
    if batch.transitions.iter().any(|t| t.agent != state.id) {
        return contract(format!("batch for agent {} holds foreign transitions", state.id));
    }
    let returns = match cfg.advantage {
        AdvantageMode::MonteCarlo => Some(discounted_returns(&batch.transitions, cfg.gamma)),
        AdvantageMode::TemporalDifference => None,
    };

    let mut actor_terms = Vec::new();
    let mut critic_terms = Vec::new();
    let mut advantages = Vec::with_capacity(batch.transitions.len());
    let mut any_weight = false;
    for (k, t) in batch.transitions.iter().enumerate() {
        if !t.reward.is_finite() {
            return Err(Error::Numeric { op: "reward" });
        }
        let (est, v) = compute_advantage(g, &batch.critic, t, cfg.gamma)?;
        let signal = returns.as_ref().map_or(est.advantage, |r| r[k]);
        let weight = variant.gate(signal);
        any_weight |= weight != 0.0;
        actor_terms.push(g.scale(t.log_prob, -weight)?);
        // (r + γV(o′) − V(o))² with V(o′) held fixed
        let target = est.advantage + est.value;
        let td = g.offset(v, -target)?;
        critic_terms.push(g.square(td)?);
        advantages.push(est);
    }
    let actor_loss = g.add_all(&actor_terms)?;
    let critic_loss = g.add_all(&critic_terms)?;
    let mut total = g.add(actor_loss, critic_loss)?;
    let mut aux_loss = 0.0;
    if let Variant::Moa { beta } = variant {
        let predictor = batch
            .predictor
            .as_ref()
            .ok_or_else(|| Error::Contract("MOA update needs a prediction head".into()))?;
        let actions = state.bundle.spec.actions.width();
        if let Some(aux) = prediction_loss(g, predictor, &batch.transitions, actions)? {
            aux_loss = g.scalar(aux)?;
            if beta != 0.0 {
                let weighted = g.scale(aux, beta)?;
                total = g.add(total, weighted)?;
                any_weight = true;
            }
        }
    }
    let loss_value = g.scalar(total)?;
    if !loss_value.is_finite() {
        return Err(Error::Numeric { op: "loss" });
    }
    let grads = g.backward(total)?;

    let mut stats = UpdateStats {
        actor_loss: g.scalar(actor_loss)?,
        critic_loss: g.scalar(critic_loss)?,
        aux_loss,
        advantages,
        ..UpdateStats::default()
    };

    let critic_like = state.bundle.critic_tensors();
    let mut critic_grads = collect_grads(&grads, batch.critic.vars(), &critic_like);
    stats.critic_grad_norm = clip_global_norm(&mut critic_grads, cfg.grad_cap)?;
    state
        .critic_opt
        .step(&mut state.bundle.critic.tensors_mut(), &critic_grads)?;

    if any_weight {
        let actor_like = state.bundle.actor_tensors();
        if actor_like.len() != batch.actor_vars.len() {
            return contract("actor variables do not match the bundle");
        }
        let mut actor_grads = collect_grads(&grads, &batch.actor_vars, &actor_like);
        stats.actor_grad_norm = clip_global_norm(&mut actor_grads, cfg.grad_cap)?;
        state
            .actor_opt
            .step(&mut state.bundle.actor_tensors_mut(), &actor_grads)?;
        stats.actor_stepped = true;
    }
    Ok(stats)
}

pub fn policy_gradient_update(
    g: &mut Graph,
    state: &mut AgentState,
    batch: &AgentBatch,
    variant: Variant,
    cfg: &UpdateConfig,
) -> Result<UpdateStats> {
    if matches!(variant, Variant::Moa { .. }) {
        return contract("use moa_update for the MOA variant");
    }
    update_agent(g, state, batch, variant, cfg)
}

/// Same rule as Adv. InfoPG; the caller rolls out with K = 0.
pub fn nc_a2c_update(g: &mut Graph, state: &mut AgentState, batch: &AgentBatch, cfg: &UpdateConfig) -> Result<UpdateStats> {
    if batch.transitions.iter().any(|t| t.trace.len() != 1) {
        return contract("nc_a2c transitions must come from a K = 0 rollout");
    }
    update_agent(g, state, batch, Variant::AdvInfoPg, cfg)
}

pub fn moa_update(
    g: &mut Graph,
    state: &mut AgentState,
    batch: &AgentBatch,
    beta: f64,
    cfg: &UpdateConfig,
) -> Result<UpdateStats> {
    update_agent(g, state, batch, Variant::Moa { beta }, cfg)
}

/// Replaces every non-frozen agent's actor with the mean over its closed
/// neighborhood. Critics are left alone.
pub fn consensus_average(states: &mut [AgentState], graph: &CommGraph) -> Result<()> {
    if graph.agent_count() != states.len() {
        return contract(format!(
            "graph over {} agents, {} states",
            graph.agent_count(),
            states.len()
        ));
    }
    let snapshot: Vec<Vec<Tensor>> = states
        .iter()
        .map(|s| s.bundle.actor_tensors().into_iter().cloned().collect())
        .collect();
    for (i, s) in snapshot.iter().enumerate().skip(1) {
        let same = s.len() == snapshot[0].len() && s.iter().zip(&snapshot[0]).all(|(a, b)| a.same_shape(b));
        if !same {
            return contract(format!("agent {i} actor shapes differ from agent 0"));
        }
    }
    for (i, state) in states.iter_mut().enumerate() {
        let hood = graph.neighbors(i);
        if state.frozen || hood.is_empty() {
            continue;
        }
        let mut members = vec![i];
        members.extend(hood);
        members.sort_unstable();
        let inv = 1.0 / members.len() as f64;
        for (k, t) in state.bundle.actor_tensors_mut().into_iter().enumerate() {
            let out = t.data_mut();
            out.iter_mut().for_each(|v| *v = 0.0);
            for &m in &members {
                out.iter_mut().zip(snapshot[m][k].data()).for_each(|(o, v)| *o += v);
            }
            out.iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok(())
}
