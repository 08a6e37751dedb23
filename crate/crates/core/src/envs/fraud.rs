//! Byzantine-agent wrapper: one agent's submitted action is replaced by a
//! uniformly random one.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{rng_from, Action, ActionSpace, CommGraph, Environment, MessageRule, Reset, StepResult};
use crate::error::{contract, Result};

/// What the fraudulent agent broadcasts as its latents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FraudLatents {
    /// Output of its frozen, randomly initialized policy.
    #[default]
    FrozenPolicy,
    /// Fresh standard-normal noise each timestep.
    Noise,
}

impl std::str::FromStr for FraudLatents {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "frozen_policy" => Ok(Self::FrozenPolicy),
            "noise" => Ok(Self::Noise),
            other => Err(format!("unknown fraud latents `{other}` (expected frozen_policy or noise)")),
        }
    }
}

pub struct FraudWrapper {
    inner: Box<dyn Environment>,
    index: usize,
    rng: ChaCha8Rng,
}

impl FraudWrapper {
    pub fn new(inner: Box<dyn Environment>, index: usize, seed: u64) -> Result<Self> {
        if index >= inner.agent_count() {
            return contract(format!(
                "fraud agent {index} outside {} agents",
                inner.agent_count()
            ));
        }
        Ok(Self {
            inner,
            index,
            rng: rng_from(seed),
        })
    }

    fn random_action(&mut self) -> Action {
        match self.inner.action_space() {
            ActionSpace::Discrete(n) => Action::Discrete(self.rng.gen_range(0..n)),
            ActionSpace::Continuous(d) => Action::Continuous((0..d).map(|_| self.rng.gen_range(-1.0..=1.0)).collect()),
        }
    }
}

impl Environment for FraudWrapper {
    fn name(&self) -> &'static str {
        self.inner.name()
    }

    fn agent_count(&self) -> usize {
        self.inner.agent_count()
    }

    fn obs_width(&self) -> usize {
        self.inner.obs_width()
    }

    fn action_space(&self) -> ActionSpace {
        self.inner.action_space()
    }

    fn max_cycles(&self) -> usize {
        self.inner.max_cycles()
    }

    fn reset(&mut self) -> Reset {
        self.inner.reset()
    }

    fn step(&mut self, actions: &[Action]) -> Result<StepResult> {
        if actions.len() != self.agent_count() {
            return contract(format!(
                "expected {} actions, got {}",
                self.agent_count(),
                actions.len()
            ));
        }
        let mut executed = actions.to_vec();
        executed[self.index] = self.random_action();
        self.inner.step(&executed)
    }

    fn comm_graph(&self) -> CommGraph {
        self.inner.comm_graph()
    }

    fn message_rule(&self) -> MessageRule {
        self.inner.message_rule()
    }

    fn fraud_agent(&self) -> Option<usize> {
        Some(self.index)
    }
}
