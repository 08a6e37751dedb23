//! Desk-scale cooperative environments with local rewards and per-timestep
//! communication graphs.

mod fraud;
mod matrixclimb;
mod pistonline;
mod relaypong;

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

pub use fraud::{FraudLatents, FraudWrapper};
pub use matrixclimb::{climb_payoff, MatrixClimb, CLIMB_PAYOFFS, CLIMB_SCALE};
pub use pistonline::{PistonLine, PistonLineParams, TIME_PENALTY};
pub use relaypong::{RelayPong, RelayPongParams};

/// Undirected communication graph over `agents` vertices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommGraph {
    agents: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl CommGraph {
    /// Pairs may be given in either orientation; they are stored once.
    pub fn new(agents: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut edges = BTreeSet::new();
        for (i, j) in pairs {
            if i == j {
                return contract(format!("self-loop on agent {i}"));
            }
            if i >= agents || j >= agents {
                return contract(format!("edge ({i}, {j}) outside {agents} agents"));
            }
            edges.insert((i.min(j), i.max(j)));
        }
        Ok(Self { agents, edges })
    }

    pub fn empty(agents: usize) -> Self {
        Self {
            agents,
            edges: BTreeSet::new(),
        }
    }

    /// `(i, i+1)` for every consecutive pair.
    pub fn chain(agents: usize) -> Self {
        Self {
            agents,
            edges: (1..agents).map(|i| (i - 1, i)).collect(),
        }
    }

    pub fn agent_count(&self) -> usize {
        self.agents
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    /// Edges with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Neighbors of `i` in ascending order.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == i {
                    Some(b)
                } else if b == i {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

impl ActionSpace {
    pub fn width(&self) -> usize {
        match *self {
            Self::Discrete(n) | Self::Continuous(n) => n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn discrete(&self) -> Option<usize> {
        match self {
            Self::Discrete(a) => Some(*a),
            Self::Continuous(_) => None,
        }
    }
}

pub(crate) fn discrete_actions(actions: &[Action], agents: usize, choices: usize) -> Result<Vec<usize>> {
    if actions.len() != agents {
        return contract(format!("expected {agents} actions, got {}", actions.len()));
    }
    actions
        .iter()
        .enumerate()
        .map(|(i, a)| match a {
            Action::Discrete(k) if *k < choices => Ok(*k),
            other => contract(format!("invalid action {other:?} for agent {i}")),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observations: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub done: bool,
    pub solved: bool,
    pub graph: CommGraph,
    /// Actions the environment actually executed (differs from the submitted
    /// ones for a fraudulent agent).
    pub executed: Vec<Action>,
    /// Per-agent flag for message-hub events (a paddle hit in RelayPong).
    pub events: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reset {
    pub observations: Vec<Vec<f64>>,
    pub graph: CommGraph,
}

/// How neighbor latents reach an agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MessageRule {
    /// Current-timestep latents of neighbors.
    Live,
    /// The partner's latents frozen at its last event; zeros before any event.
    HoldAtEvent,
}

pub trait Environment: Send {
    fn name(&self) -> &'static str;
    fn agent_count(&self) -> usize;
    fn obs_width(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    fn max_cycles(&self) -> usize;
    fn reset(&mut self) -> Reset;
    fn step(&mut self, actions: &[Action]) -> Result<StepResult>;
    fn comm_graph(&self) -> CommGraph;

    fn message_rule(&self) -> MessageRule {
        MessageRule::Live
    }

    /// Index of an uncontrollable agent, if any.
    fn fraud_agent(&self) -> Option<usize> {
        None
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EnvKind {
    PistonLine(PistonLineParams),
    RelayPong(RelayPongParams),
    MatrixClimb { continuous: bool },
}

impl EnvKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::PistonLine(_) => "pistonline",
            Self::RelayPong(_) => "relaypong",
            Self::MatrixClimb { continuous: false } => "matrixclimb",
            Self::MatrixClimb { continuous: true } => "matrixclimb_continuous",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub agents: usize,
    pub max_cycles: usize,
    pub seed: u64,
    pub fraud_agent: Option<usize>,
    pub fraud_latents: FraudLatents,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_cycles == 0 {
            return contract("max_cycles must be at least 1");
        }
        match &self.kind {
            EnvKind::PistonLine(p) => p.validate(self.agents)?,
            EnvKind::RelayPong(p) => {
                if self.agents != 2 {
                    return contract("relaypong has exactly 2 agents");
                }
                p.validate()?;
            }
            EnvKind::MatrixClimb { .. } => {
                if self.agents != 2 {
                    return contract("matrixclimb has exactly 2 agents");
                }
            }
        }
        if let Some(m) = self.fraud_agent {
            if m >= self.agents {
                return contract(format!("fraud agent {m} outside {} agents", self.agents));
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn Environment>> {
        self.validate()?;
        let inner: Box<dyn Environment> = match &self.kind {
            EnvKind::PistonLine(p) => Box::new(PistonLine::new(
                self.agents,
                p.clone(),
                self.max_cycles,
                self.seed,
            )?),
            EnvKind::RelayPong(p) => Box::new(RelayPong::new(p.clone(), self.max_cycles, self.seed)?),
            EnvKind::MatrixClimb { continuous } => {
                Box::new(MatrixClimb::new(*continuous, self.max_cycles))
            }
        };
        Ok(match self.fraud_agent {
            Some(m) => Box::new(FraudWrapper::new(inner, m, self.seed ^ 0x9e37_79b9_7f4a_7c15)?),
            None => inner,
        })
    }
}

pub(crate) fn rng_from(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_edges() {
        let g = CommGraph::chain(5);
        let edges: Vec<_> = g.edges().collect();
        assert_eq!(edges, vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
        assert_eq!(g.neighbors(0), vec![1]);
        assert_eq!(g.neighbors(2), vec![1, 3]);
    }

    #[test]
    fn graph_is_symmetric() {
        let g = CommGraph::new(4, [(2, 0), (1, 3)]).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(g.contains(i, j), g.contains(j, i));
            }
        }
        assert!(g.contains(0, 2));
    }

    #[test]
    fn graph_rejects_bad_edges() {
        assert!(CommGraph::new(3, [(1, 1)]).is_err());
        assert!(CommGraph::new(3, [(0, 3)]).is_err());
    }
}
