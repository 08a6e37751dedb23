//! Per-agent encoder + communicative policy and the k-level forward pass.
//!
//! Every agent owns one [`PolicyBundle`]. For an episode the bundle is bound
//! onto the episode's [`Graph`] once; the resulting [`BoundPolicy`] is then
//! reused at every timestep, so parameter gradients accumulate over the whole
//! episode in a single backward sweep.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffkit::{
    mlp_forward, Activation, BoundCell, BoundMlp, CellKind, Graph, Mlp, Parameterized, RecurrentCell, Tensor,
    Var,
};
use crate::envs::{Action, ActionSpace, CommGraph};
use crate::error::{contract, Error, Result};

/// Probabilities below this are floored before taking the log.
pub const LOG_PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_GAUSSIAN_STD: f64 = 0.2;

/// Architecture of one agent's networks.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySpec {
    pub obs_width: usize,
    pub latent: usize,
    pub hidden: usize,
    pub actions: ActionSpace,
    pub cell: CellKind,
    pub gaussian_std: f64,
    /// Neighbor slots of the action-prediction head; 0 disables it.
    pub predictor_slots: usize,
}

impl PolicySpec {
    pub fn validate(&self) -> Result<()> {
        if self.obs_width == 0 || self.latent == 0 || self.hidden == 0 || self.actions.width() == 0 {
            return contract(format!("policy widths must be positive: {self:?}"));
        }
        if matches!(self.actions, ActionSpace::Continuous(_)) && !(self.gaussian_std > 0.0) {
            return contract("gaussian std must be positive");
        }
        if self.predictor_slots > 0 && matches!(self.actions, ActionSpace::Continuous(_)) {
            return contract("action prediction needs a discrete action space");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyBundle {
    pub spec: PolicySpec,
    pub encoder: Mlp,
    pub comm: RecurrentCell,
    pub head: Mlp,
    pub critic: Mlp,
    pub predictor: Option<Mlp>,
}

impl PolicyBundle {
    pub fn new(spec: PolicySpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let (o, d, h, a) = (spec.obs_width, spec.latent, spec.hidden, spec.actions.width());
        let encoder = Mlp::glorot(&[o, h, d], Activation::Tanh, rng);
        let comm = RecurrentCell::new(spec.cell, d, rng);
        let head = Mlp::glorot(&[d, a], Activation::Tanh, rng);
        let critic = Mlp::glorot(&[o, h, 1], Activation::Tanh, rng);
        let predictor = (spec.predictor_slots > 0)
            .then(|| Mlp::glorot(&[d, spec.predictor_slots * a], Activation::Tanh, rng));
        Ok(Self {
            spec,
            encoder,
            comm,
            head,
            critic,
            predictor,
        })
    }

    /// Encoder, communicative cell, head and predictor tensors in bind order.
    pub fn actor_tensors(&self) -> Vec<&Tensor> {
        let mut out = self.encoder.tensors();
        out.extend(self.comm.tensors());
        out.extend(self.head.tensors());
        if let Some(p) = &self.predictor {
            out.extend(p.tensors());
        }
        out
    }

    pub fn actor_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.comm.tensors_mut());
        out.extend(self.head.tensors_mut());
        if let Some(p) = &mut self.predictor {
            out.extend(p.tensors_mut());
        }
        out
    }

    pub fn critic_tensors(&self) -> Vec<&Tensor> {
        self.critic.tensors()
    }

    pub fn critic_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.critic.tensors_mut()
    }

    /// Every tensor with a stable name, actor first.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut groups = vec![
            ("encoder", self.encoder.tensors()),
            ("comm", self.comm.tensors()),
            ("head", self.head.tensors()),
        ];
        if let Some(p) = &self.predictor {
            groups.push(("predictor", p.tensors()));
        }
        groups.push(("critic", self.critic.tensors()));
        groups
            .into_iter()
            .flat_map(|(prefix, ts)| {
                ts.into_iter()
                    .enumerate()
                    .map(move |(k, t)| (format!("{prefix}.{k}"), t))
            })
            .collect()
    }

    pub fn all_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.comm.tensors_mut());
        out.extend(self.head.tensors_mut());
        if let Some(p) = &mut self.predictor {
            out.extend(p.tensors_mut());
        }
        out.extend(self.critic.tensors_mut());
        out
    }

    /// Order-sensitive checksum of every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.named_tensors() {
            for v in t.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn bind(&self, g: &mut Graph) -> Result<BoundPolicy> {
        Ok(BoundPolicy {
            encoder: self.encoder.bind(g)?,
            comm: self.comm.bind(g)?,
            head: self.head.bind(g)?,
            predictor: self.predictor.as_ref().map(|p| p.bind(g)).transpose()?,
            actions: self.spec.actions,
            std: self.spec.gaussian_std,
            obs_width: self.spec.obs_width,
            latent: self.spec.latent,
        })
    }

    pub fn bind_critic(&self, g: &mut Graph) -> Result<BoundCritic> {
        Ok(BoundCritic(self.critic.bind(g)?))
    }
}

/// A bundle's actor registered on one graph.
#[derive(Clone, Debug)]
pub struct BoundPolicy {
    encoder: BoundMlp,
    comm: BoundCell,
    head: BoundMlp,
    predictor: Option<BoundMlp>,
    actions: ActionSpace,
    std: f64,
    obs_width: usize,
    latent: usize,
}

impl BoundPolicy {
    /// Vars in the order of [`PolicyBundle::actor_tensors`].
    pub fn actor_vars(&self) -> Vec<Var> {
        let mut out = self.encoder.vars().to_vec();
        out.extend_from_slice(self.comm.vars());
        out.extend_from_slice(self.head.vars());
        if let Some(p) = &self.predictor {
            out.extend_from_slice(p.vars());
        }
        out
    }

    pub fn latent_width(&self) -> usize {
        self.latent
    }

    pub fn action_space(&self) -> ActionSpace {
        self.actions
    }

    pub fn predictor(&self) -> Option<&BoundMlp> {
        self.predictor.as_ref()
    }
}

#[derive(Clone, Debug)]
pub struct BoundCritic(BoundMlp);

impl BoundCritic {
    pub fn vars(&self) -> &[Var] {
        self.0.vars()
    }

    /// Scalar value estimate `V(obs)`.
    pub fn value(&self, g: &mut Graph, obs: &[f64]) -> Result<Var> {
        let x = g.vector(obs)?;
        mlp_forward(g, &self.0, x)
    }
}

/// The latent "action guess" of one agent at one reasoning level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentAction {
    pub level: usize,
    pub vector: Var,
}

#[derive(Clone, Debug)]
pub enum ActionDistribution {
    Categorical { probs: Var, values: Vec<f64> },
    Gaussian { mean: Var, mu: Vec<f64>, std: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Map,
}

impl std::str::FromStr for ActionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sample" => Ok(Self::Sample),
            "map" => Ok(Self::Map),
            other => Err(format!("unknown action mode `{other}` (expected sample or map)")),
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = k;
        }
    }
    best
}

impl ActionDistribution {
    pub fn map_action(&self) -> Action {
        match self {
            Self::Categorical { values, .. } => Action::Discrete(argmax(values)),
            Self::Gaussian { mu, .. } => Action::Continuous(mu.clone()),
        }
    }

    /// Probability of the MAP action (categorical only).
    pub fn map_probability(&self) -> Option<f64> {
        match self {
            Self::Categorical { values, .. } => Some(values[argmax(values)]),
            Self::Gaussian { .. } => None,
        }
    }

    pub fn probabilities(&self) -> Option<&[f64]> {
        match self {
            Self::Categorical { values, .. } => Some(values),
            Self::Gaussian { .. } => None,
        }
    }

    pub fn node(&self) -> Var {
        match self {
            Self::Categorical { probs, .. } => *probs,
            Self::Gaussian { mean, .. } => *mean,
        }
    }
}

pub fn select_action(dist: &ActionDistribution, mode: ActionMode, rng: &mut impl Rng) -> Result<Action> {
    if mode == ActionMode::Map {
        return Ok(dist.map_action());
    }
    match dist {
        ActionDistribution::Categorical { values, .. } => {
            let w = WeightedIndex::new(values).map_err(|e| Error::Domain {
                op: "select_action",
                detail: e.to_string(),
            })?;
            Ok(Action::Discrete(w.sample(rng)))
        }
        ActionDistribution::Gaussian { mu, std, .. } => Ok(Action::Continuous(
            mu.iter()
                .map(|m| m + std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )),
    }
}

pub fn log_prob(g: &mut Graph, dist: &ActionDistribution, action: &Action) -> Result<Var> {
    match (dist, action) {
        (ActionDistribution::Categorical { probs, values }, Action::Discrete(a)) => {
            if *a >= values.len() {
                return contract(format!("action {a} outside {} choices", values.len()));
            }
            let p = g.pick(*probs, *a)?;
            g.log_floor(p, LOG_PROB_FLOOR)
        }
        (ActionDistribution::Gaussian { mean, mu, std }, Action::Continuous(x)) => {
            if x.len() != mu.len() {
                return Err(Error::Dimension {
                    op: "log_prob",
                    left: vec![mu.len()],
                    right: vec![x.len()],
                });
            }
            let xs = g.vector(x)?;
            let diff = g.sub(*mean, xs)?;
            let sq = g.square(diff)?;
            let total = g.sum(sq)?;
            let quad = g.scale(total, -1.0 / (2.0 * std * std))?;
            let norm = 0.5 * (2.0 * std::f64::consts::PI * std * std).ln();
            g.offset(quad, -(mu.len() as f64) * norm)
        }
        _ => contract(format!("action {action:?} does not match the distribution kind")),
    }
}

pub fn encode_level0(g: &mut Graph, policy: &BoundPolicy, obs: &[f64]) -> Result<LatentAction> {
    if obs.len() != policy.obs_width {
        return Err(Error::Dimension {
            op: "encode_level0",
            left: vec![policy.obs_width],
            right: vec![obs.len()],
        });
    }
    let x = g.vector(obs)?;
    let vector = mlp_forward(g, &policy.encoder, x)?;
    Ok(LatentAction { level: 0, vector })
}

/// Mean of neighbor latents, or zeros of `width` when there are none.
/// Inputs are ordered by node before summing, so any permutation of
/// `latents` gives a bit-identical result.
pub fn fuse_neighbors(g: &mut Graph, latents: &[LatentAction], width: usize) -> Result<Var> {
    let Some(first) = latents.first() else {
        return g.zeros(width);
    };
    if latents.iter().any(|l| l.level != first.level) {
        return contract("neighbor latents from mixed levels");
    }
    let mut vars: Vec<Var> = latents.iter().map(|l| l.vector).collect();
    vars.sort_unstable();
    if vars.len() == 1 {
        return Ok(vars[0]);
    }
    g.mean(&vars)
}

/// One recurrent step: hidden = own latent at level `level − 1`, input = fused.
pub fn communicate_level(
    g: &mut Graph,
    policy: &BoundPolicy,
    own: &LatentAction,
    fused: Var,
    level: usize,
) -> Result<LatentAction> {
    if level == 0 || own.level + 1 != level {
        return contract(format!(
            "level {level} needs a level-{} latent, got level {}",
            level.saturating_sub(1),
            own.level
        ));
    }
    let vector = policy.comm.step(g, own.vector, fused)?;
    Ok(LatentAction { level, vector })
}

pub fn action_distribution(g: &mut Graph, policy: &BoundPolicy, latent: &LatentAction) -> Result<ActionDistribution> {
    let out = mlp_forward(g, &policy.head, latent.vector)?;
    match policy.actions {
        ActionSpace::Discrete(_) => {
            let probs = g.softmax(out)?;
            let values = g.value(probs)?.to_vec();
            Ok(ActionDistribution::Categorical { probs, values })
        }
        ActionSpace::Continuous(_) => {
            let mean = g.tanh(out)?;
            let mu = g.value(mean)?.to_vec();
            Ok(ActionDistribution::Gaussian {
                mean,
                mu,
                std: policy.std,
            })
        }
    }
}

/// Where neighbor latents come from during the k-level rounds.
#[derive(Clone, Copy, Debug, Default)]
pub enum Messages<'a> {
    #[default]
    Live,
    /// `Some(fixed)` replaces agent j's broadcast: neighbors see the constant
    /// `fixed[k]` as its level-k latent. `None` keeps the live latent.
    Override(&'a [Option<Vec<Vec<f64>>>]),
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub messages: Messages<'a>,
    /// Per-agent perturbation added to the level-0 latent.
    pub level0_noise: Option<&'a [Vec<f64>]>,
}

#[derive(Clone, Debug)]
pub struct AgentForward {
    /// Latents for levels `0..=K`.
    pub trace: Vec<LatentAction>,
    pub dist: ActionDistribution,
}

impl AgentForward {
    pub fn final_latent(&self) -> LatentAction {
        *self.trace.last().expect("trace holds level 0")
    }
}

pub fn k_level_forward(
    g: &mut Graph,
    policies: &[&BoundPolicy],
    observations: &[Vec<f64>],
    graph: &CommGraph,
    k: usize,
    options: ForwardOptions<'_>,
) -> Result<Vec<AgentForward>> {
    let n = policies.len();
    if observations.len() != n || graph.agent_count() != n {
        return contract(format!(
            "{n} policies, {} observations, graph over {} agents",
            observations.len(),
            graph.agent_count()
        ));
    }
    let width = policies.first().map(|p| p.latent).unwrap_or(0);
    if policies.iter().any(|p| p.latent != width) {
        return contract("agents disagree on latent width");
    }
    let mut traces: Vec<Vec<LatentAction>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut l0 = encode_level0(g, policies[i], &observations[i])?;
        if let Some(noise) = options.level0_noise {
            let e = g.vector(&noise[i])?;
            l0.vector = g.add(l0.vector, e)?;
        }
        traces.push(vec![l0]);
    }
    let neighbors: Vec<Vec<usize>> = (0..n).map(|i| graph.neighbors(i)).collect();
    for level in 1..=k {
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let incoming = neighbors[i]
                .iter()
                .map(|&j| {
                    let fixed = match options.messages {
                        Messages::Live => None,
                        Messages::Override(all) => all.get(j).and_then(Option::as_ref),
                    };
                    let Some(fixed) = fixed else {
                        return Ok(traces[j][level - 1]);
                    };
                    let v = fixed
                        .get(level - 1)
                        .ok_or_else(|| Error::Contract(format!("no level-{} override for agent {j}", level - 1)))?;
                    Ok(LatentAction {
                        level: level - 1,
                        vector: g.vector(v)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let fused = fuse_neighbors(g, &incoming, width)?;
            next.push(communicate_level(g, policies[i], &traces[i][level - 1], fused, level)?);
        }
        for (trace, latent) in traces.iter_mut().zip(next) {
            trace.push(latent);
        }
    }
    traces
        .into_iter()
        .zip(policies)
        .map(|(trace, p)| {
            let dist = action_distribution(g, p, trace.last().expect("level 0"))?;
            Ok(AgentForward { trace, dist })
        })
        .collect()
}

/// Probability agent `i` assigns to its MAP action after the k-level pass.
pub fn map_conditional_prob(
    policies: &[&PolicyBundle],
    observations: &[Vec<f64>],
    graph: &CommGraph,
    k: usize,
    pair: (usize, usize),
) -> Result<f64> {
    if !graph.contains(pair.0, pair.1) {
        return contract(format!("agents {} and {} are not adjacent", pair.0, pair.1));
    }
    let mut g = Graph::new();
    let bound = policies.iter().map(|p| p.bind(&mut g)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&BoundPolicy> = bound.iter().collect();
    let out = k_level_forward(&mut g, &refs, observations, graph, k, ForwardOptions::default())?;
    out[pair.0]
        .dist
        .map_probability()
        .ok_or_else(|| Error::Contract("MAP probability needs a categorical head".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(cell: CellKind, actions: usize) -> PolicySpec {
        PolicySpec {
            obs_width: 3,
            latent: 4,
            hidden: 5,
            actions: ActionSpace::Discrete(actions),
            cell,
            gaussian_std: DEFAULT_GAUSSIAN_STD,
            predictor_slots: 0,
        }
    }

    fn bundles(n: usize, cell: CellKind, seed: u64) -> Vec<PolicyBundle> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| PolicyBundle::new(spec(cell, 3), &mut rng).unwrap()).collect()
    }

    fn forward_probs(bs: &[PolicyBundle], obs: &[Vec<f64>], graph: &CommGraph, k: usize) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let bound: Vec<_> = bs.iter().map(|b| b.bind(&mut g).unwrap()).collect();
        let refs: Vec<_> = bound.iter().collect();
        k_level_forward(&mut g, &refs, obs, graph, k, ForwardOptions::default())
            .unwrap()
            .into_iter()
            .map(|f| f.dist.probabilities().unwrap().to_vec())
            .collect()
    }

    #[test]
    fn zero_encoder_gives_zero_latent() {
        let mut b = bundles(1, CellKind::Gru, 1).remove(0);
        b.encoder = Mlp::zeros(&[3, 5, 4], Activation::Tanh);
        let mut g = Graph::new();
        let p = b.bind(&mut g).unwrap();
        let l = encode_level0(&mut g, &p, &[0.3, -0.2, 0.9]).unwrap();
        assert_eq!(l.level, 0);
        assert_eq!(g.value(l.vector).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn encoder_width_mismatch() {
        let b = bundles(1, CellKind::Gru, 1).remove(0);
        let mut g = Graph::new();
        let p = b.bind(&mut g).unwrap();
        assert!(matches!(encode_level0(&mut g, &p, &[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn identical_agents_identical_latents() {
        let b = bundles(1, CellKind::Gru, 2).remove(0);
        let mut g = Graph::new();
        let p1 = b.bind(&mut g).unwrap();
        let p2 = b.bind(&mut g).unwrap();
        let obs = [0.1, 0.2, -0.3];
        let l1 = encode_level0(&mut g, &p1, &obs).unwrap();
        let l2 = encode_level0(&mut g, &p2, &obs).unwrap();
        assert_eq!(g.value(l1.vector).unwrap(), g.value(l2.vector).unwrap());
    }

    #[test]
    fn fuse_single_and_opposite() {
        let mut g = Graph::new();
        let v = g.vector(&[0.25, -1.0, 3.0]).unwrap();
        let w = g.vector(&[-0.25, 1.0, -3.0]).unwrap();
        let one = fuse_neighbors(&mut g, &[LatentAction { level: 0, vector: v }], 3).unwrap();
        assert_eq!(g.value(one).unwrap(), &[0.25, -1.0, 3.0]);
        let both = fuse_neighbors(
            &mut g,
            &[LatentAction { level: 0, vector: v }, LatentAction { level: 0, vector: w }],
            3,
        )
        .unwrap();
        assert_eq!(g.value(both).unwrap(), &[0.0; 3]);
        let none = fuse_neighbors(&mut g, &[], 3).unwrap();
        assert_eq!(g.value(none).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn fuse_is_permutation_invariant() {
        let mut g = Graph::new();
        let vals = [[0.1, 0.7], [1e-17, -0.3], [0.3, 1e16]];
        let ls: Vec<_> = vals
            .iter()
            .map(|v| LatentAction {
                level: 1,
                vector: g.vector(v).unwrap(),
            })
            .collect();
        let a = fuse_neighbors(&mut g, &ls, 2).unwrap();
        let b = fuse_neighbors(&mut g, &[ls[2], ls[0], ls[1]], 2).unwrap();
        let c = fuse_neighbors(&mut g, &[ls[1], ls[2], ls[0]], 2).unwrap();
        let av = g.value(a).unwrap().to_vec();
        assert_eq!(av, g.value(b).unwrap());
        assert_eq!(av, g.value(c).unwrap());
    }

    #[test]
    fn fuse_rejects_mixed_levels() {
        let mut g = Graph::new();
        let v = g.vector(&[1.0]).unwrap();
        let r = fuse_neighbors(&mut g, &[LatentAction { level: 0, vector: v }, LatentAction { level: 1, vector: v }], 1);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn vrnn_identity_init_echoes_own_latent() {
        let b = bundles(1, CellKind::Vrnn, 3).remove(0);
        let mut g = Graph::new();
        let p = b.bind(&mut g).unwrap();
        let own = LatentAction {
            level: 0,
            vector: g.vector(&[0.5, -0.2, 0.1, 0.9]).unwrap(),
        };
        let fused = g.zeros(4).unwrap();
        let out = communicate_level(&mut g, &p, &own, fused, 1).unwrap();
        assert_eq!(out.level, 1);
        for (v, h) in g.value(out.vector).unwrap().iter().zip([0.5f64, -0.2, 0.1, 0.9]) {
            assert!((v - (h + 1e-3).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn communicate_checks_levels() {
        let b = bundles(1, CellKind::Gru, 3).remove(0);
        let mut g = Graph::new();
        let p = b.bind(&mut g).unwrap();
        let own = LatentAction {
            level: 1,
            vector: g.vector(&[0.0; 4]).unwrap(),
        };
        let fused = g.zeros(4).unwrap();
        assert!(communicate_level(&mut g, &p, &own, fused, 1).is_err());
        let l2 = communicate_level(&mut g, &p, &own, fused, 2).unwrap();
        assert_eq!(l2.level, 2);
    }

    #[test]
    fn k_zero_is_plain_actor() {
        let bs = bundles(2, CellKind::Gru, 4);
        let obs = vec![vec![0.1, 0.2, 0.3], vec![-0.4, 0.5, 0.0]];
        let with_graph = forward_probs(&bs, &obs, &CommGraph::chain(2), 0);
        let mut g = Graph::new();
        let p = bs[0].bind(&mut g).unwrap();
        let l0 = encode_level0(&mut g, &p, &obs[0]).unwrap();
        let d = action_distribution(&mut g, &p, &l0).unwrap();
        assert_eq!(with_graph[0], d.probabilities().unwrap());
    }

    #[test]
    fn isolated_agents_ignore_others() {
        let bs = bundles(3, CellKind::Gru, 5);
        let obs = vec![vec![0.1, 0.2, 0.3], vec![-0.4, 0.5, 0.0], vec![0.9, -0.9, 0.2]];
        let base = forward_probs(&bs, &obs, &CommGraph::empty(3), 2);
        let mut moved = obs.clone();
        moved[1] = vec![5.0, -3.0, 1.0];
        let after = forward_probs(&bs, &moved, &CommGraph::empty(3), 2);
        assert_eq!(base[0], after[0]);
        assert_eq!(base[2], after[2]);
        assert_ne!(base[1], after[1]);
    }

    #[test]
    fn k1_depends_on_neighbor_observation() {
        let bs = bundles(2, CellKind::Gru, 6);
        let obs = vec![vec![0.1, 0.2, 0.3], vec![-0.4, 0.5, 0.0]];
        let base = forward_probs(&bs, &obs, &CommGraph::chain(2), 1);
        let mut moved = obs.clone();
        moved[1][0] += 1e-4;
        let after = forward_probs(&bs, &moved, &CommGraph::chain(2), 1);
        let delta: f64 = base[0].iter().zip(&after[0]).map(|(a, b)| (a - b).abs()).sum();
        assert!(delta > 1e-10, "delta {delta}");
    }

    #[test]
    fn level_tags_follow_rounds() {
        let bs = bundles(2, CellKind::Vrnn, 7);
        let mut g = Graph::new();
        let bound: Vec<_> = bs.iter().map(|b| b.bind(&mut g).unwrap()).collect();
        let refs: Vec<_> = bound.iter().collect();
        let obs = vec![vec![0.0; 3], vec![0.0; 3]];
        let out = k_level_forward(&mut g, &refs, &obs, &CommGraph::chain(2), 2, ForwardOptions::default()).unwrap();
        let levels: Vec<_> = out[0].trace.iter().map(|l| l.level).collect();
        assert_eq!(levels, vec![0, 1, 2]);
        assert_eq!(out[1].final_latent().level, 2);
    }

    #[test]
    fn forward_rejects_agent_mismatch() {
        let bs = bundles(2, CellKind::Gru, 8);
        let mut g = Graph::new();
        let bound: Vec<_> = bs.iter().map(|b| b.bind(&mut g).unwrap()).collect();
        let refs: Vec<_> = bound.iter().collect();
        let obs = vec![vec![0.0; 3], vec![0.0; 3]];
        let r = k_level_forward(&mut g, &refs, &obs, &CommGraph::chain(3), 1, ForwardOptions::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn uniform_log_prob() {
        let mut g = Graph::new();
        let z = g.zeros(3).unwrap();
        let probs = g.softmax(z).unwrap();
        let d = ActionDistribution::Categorical {
            probs,
            values: g.value(probs).unwrap().to_vec(),
        };
        let lp = log_prob(&mut g, &d, &Action::Discrete(2)).unwrap();
        assert!((g.scalar(lp).unwrap() - (-1.0986122886681098)).abs() < 1e-12);
        assert!(log_prob(&mut g, &d, &Action::Discrete(3)).is_err());
    }

    #[test]
    fn zero_probability_is_floored() {
        let mut g = Graph::new();
        let v = g.vector(&[0.0, 1.0]).unwrap();
        let d = ActionDistribution::Categorical {
            probs: v,
            values: vec![0.0, 1.0],
        };
        let lp = log_prob(&mut g, &d, &Action::Discrete(0)).unwrap();
        assert_eq!(g.scalar(lp).unwrap(), LOG_PROB_FLOOR.ln());
    }

    #[test]
    fn gaussian_mode_log_prob() {
        let mut g = Graph::new();
        let m = g.vector(&[0.3]).unwrap();
        let d = ActionDistribution::Gaussian {
            mean: m,
            mu: vec![0.3],
            std: 0.2,
        };
        let lp = log_prob(&mut g, &d, &Action::Continuous(vec![0.3])).unwrap();
        let expected = -(2.0 * std::f64::consts::PI * 0.04f64).sqrt().ln();
        assert!((g.scalar(lp).unwrap() - expected).abs() < 1e-14);
        let off = log_prob(&mut g, &d, &Action::Continuous(vec![0.5])).unwrap();
        assert!((g.scalar(off).unwrap() - (expected - 0.04 / 0.08)).abs() < 1e-14);
        assert_eq!(d.map_action(), Action::Continuous(vec![0.3]));
    }

    fn categorical(values: &[f64]) -> ActionDistribution {
        let mut g = Graph::new();
        let v = g.vector(values).unwrap();
        ActionDistribution::Categorical {
            probs: v,
            values: values.to_vec(),
        }
    }

    #[test]
    fn map_selection_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = categorical(&[0.1, 0.7, 0.2]);
        assert_eq!(select_action(&d, ActionMode::Map, &mut rng).unwrap(), Action::Discrete(1));
        let t = categorical(&[0.5, 0.5]);
        assert_eq!(select_action(&t, ActionMode::Map, &mut rng).unwrap(), Action::Discrete(0));
    }

    #[test]
    fn sampling_matches_probabilities() {
        let probs = [0.15, 0.5, 0.35];
        let d = categorical(&probs);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[select_action(&d, ActionMode::Sample, &mut rng).unwrap().discrete().unwrap()] += 1;
        }
        for (c, p) in counts.iter().zip(probs) {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let d = categorical(&[0.3, 0.3, 0.4]);
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            (0..50)
                .map(|_| select_action(&d, ActionMode::Sample, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn map_probability_saturation_and_uniform() {
        let mut bs = bundles(2, CellKind::Gru, 9);
        let obs = vec![vec![0.2, 0.1, 0.0], vec![0.3, 0.3, 0.3]];
        let graph = CommGraph::chain(2);
        let refs: Vec<_> = bs.iter().collect();
        let p = map_conditional_prob(&refs, &obs, &graph, 1, (0, 1)).unwrap();
        assert!((1.0 / 3.0 - 1e-15..=1.0).contains(&p));

        for b in bs.iter_mut() {
            b.head = Mlp::zeros(&[4, 3], Activation::Tanh);
        }
        let refs: Vec<_> = bs.iter().collect();
        let uniform = map_conditional_prob(&refs, &obs, &graph, 1, (0, 1)).unwrap();
        assert!((uniform - 1.0 / 3.0).abs() < 1e-15);

        for b in bs.iter_mut() {
            b.head.layers[0].bias = Tensor::from_vec(vec![0.0, 60.0, 0.0]);
        }
        let refs: Vec<_> = bs.iter().collect();
        let saturated = map_conditional_prob(&refs, &obs, &graph, 1, (0, 1)).unwrap();
        assert!((saturated - 1.0).abs() < 1e-12);

        assert!(map_conditional_prob(&refs, &obs, &CommGraph::empty(2), 1, (0, 1)).is_err());
    }

    #[test]
    fn map_probability_at_least_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..500 {
            let n = rng.gen_range(2..7);
            let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            let d = categorical(&raw.iter().map(|v| v / s).collect::<Vec<_>>());
            assert!(d.map_probability().unwrap() >= 1.0 / n as f64 - 1e-15);
        }
    }

    #[test]
    fn frozen_messages_replace_partner() {
        let bs = bundles(2, CellKind::Gru, 13);
        let obs = vec![vec![0.1, 0.2, 0.3], vec![-0.4, 0.5, 0.0]];
        let frozen = vec![Some(vec![vec![0.0; 4]]), Some(vec![vec![0.0; 4]])];
        let run = |o: &[Vec<f64>]| {
            let mut g = Graph::new();
            let bound: Vec<_> = bs.iter().map(|b| b.bind(&mut g).unwrap()).collect();
            let refs: Vec<_> = bound.iter().collect();
            let opts = ForwardOptions {
                messages: Messages::Override(&frozen),
                level0_noise: None,
            };
            k_level_forward(&mut g, &refs, o, &CommGraph::chain(2), 1, opts).unwrap()[0]
                .dist
                .probabilities()
                .unwrap()
                .to_vec()
        };
        let mut moved = obs.clone();
        moved[1] = vec![3.0, 3.0, 3.0];
        assert_eq!(run(&obs), run(&moved));
    }

    #[test]
    fn actor_vars_follow_tensor_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = spec(CellKind::Gru, 3);
        s.predictor_slots = 2;
        let b = PolicyBundle::new(s, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = b.bind(&mut g).unwrap();
        let vars = p.actor_vars();
        let tensors = b.actor_tensors();
        assert_eq!(vars.len(), tensors.len());
        for (v, t) in vars.iter().zip(tensors) {
            assert_eq!(g.value(*v).unwrap(), t.data());
        }
    }
}
