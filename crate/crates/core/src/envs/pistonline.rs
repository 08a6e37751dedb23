//! A line of pistons passing a ball leftward.
//!
//! The ball rests on the span `(x, x + 1)` and rolls one cell left whenever the
//! right support stands at least `lift` above the left one. Actions are
//! `0 = down`, `1 = stay`, `2 = up`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{discrete_actions, rng_from, Action, ActionSpace, CommGraph, Environment, Reset, StepResult};
use crate::error::{contract, Result};

pub const TIME_PENALTY: f64 = 0.007;
pub const DOWN: usize = 0;
pub const STAY: usize = 1;
pub const UP: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct PistonLineParams {
    /// Maximum piston height `H`.
    pub height: i64,
    pub lift: i64,
    /// Ball offsets beyond this many cells read as the edge value.
    pub view: usize,
    /// Initial heights are drawn from `0..=init_height`.
    pub init_height: i64,
    /// Initial ball position is drawn from `start_min..=start_max`
    /// (clamped to the line).
    pub start_min: usize,
    pub start_max: usize,
}

impl Default for PistonLineParams {
    fn default() -> Self {
        Self {
            height: 4,
            lift: 1,
            view: 2,
            init_height: 4,
            start_min: 1,
            start_max: usize::MAX,
        }
    }
}

impl PistonLineParams {
    pub fn validate(&self, agents: usize) -> Result<()> {
        if agents < 3 {
            return contract(format!("pistonline needs at least 3 pistons, got {agents}"));
        }
        if self.lift < 1 || self.height < 1 {
            return contract("pistonline height and lift must be at least 1");
        }
        if self.height < self.lift * (agents as i64 - 1) {
            return contract(format!(
                "height {} cannot hold a staircase of {} steps of {}",
                self.height,
                agents - 1,
                self.lift
            ));
        }
        if self.init_height < 0 || self.init_height > self.height {
            return contract("init_height must lie in [0, height]");
        }
        if self.start_min == 0 || self.start_min > self.start_max.min(agents - 2) {
            return contract("ball start range must lie in [1, agents - 2]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PistonLine {
    agents: usize,
    params: PistonLineParams,
    max_cycles: usize,
    rng: ChaCha8Rng,
    heights: Vec<i64>,
    ball: usize,
    t: usize,
}

impl PistonLine {
    pub fn new(agents: usize, params: PistonLineParams, max_cycles: usize, seed: u64) -> Result<Self> {
        params.validate(agents)?;
        Ok(Self {
            agents,
            params,
            max_cycles,
            rng: rng_from(seed),
            heights: vec![0; agents],
            ball: 1,
            t: 0,
        })
    }

    pub fn heights(&self) -> &[i64] {
        &self.heights
    }

    /// Index of the left support.
    pub fn ball(&self) -> usize {
        self.ball
    }

    /// Places the line in a given state (tests and oracles).
    pub fn set_state(&mut self, heights: &[i64], ball: usize) -> Result<()> {
        if heights.len() != self.agents || ball + 1 >= self.agents {
            return contract("state does not fit the line");
        }
        if heights.iter().any(|h| *h < 0 || *h > self.params.height) {
            return contract("heights outside [0, H]");
        }
        self.heights = heights.to_vec();
        self.ball = ball;
        self.t = 0;
        Ok(())
    }

    fn scale_height(&self, h: i64) -> f64 {
        2.0 * h as f64 / self.params.height as f64 - 1.0
    }

    fn observe(&self, i: usize) -> Vec<f64> {
        let left = if i == 0 { -1.0 } else { self.scale_height(self.heights[i - 1]) };
        let right = if i + 1 == self.agents {
            -1.0
        } else {
            self.scale_height(self.heights[i + 1])
        };
        let reach = self.params.view as f64 + 1.0;
        let offset = (self.ball as f64 - i as f64) / reach;
        let ball_height = self.heights[self.ball].max(self.heights[self.ball + 1]);
        vec![
            self.scale_height(self.heights[i]),
            left,
            right,
            offset.clamp(-1.0, 1.0),
            self.scale_height(ball_height),
        ]
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        (0..self.agents).map(|i| self.observe(i)).collect()
    }

    /// Current observations without stepping.
    pub fn current_observations(&self) -> Vec<Vec<f64>> {
        self.observations()
    }

    /// Descending-staircase script: pistons at or left of the right support
    /// move toward `min(i * lift, H)`, the rest stay.
    pub fn staircase_action(&self, i: usize) -> usize {
        if i > self.ball + 1 {
            return STAY;
        }
        let target = (i as i64 * self.params.lift).min(self.params.height);
        match self.heights[i].cmp(&target) {
            std::cmp::Ordering::Less => UP,
            std::cmp::Ordering::Greater => DOWN,
            std::cmp::Ordering::Equal => STAY,
        }
    }

    pub fn staircase_actions(&self) -> Vec<Action> {
        (0..self.agents).map(|i| Action::Discrete(self.staircase_action(i))).collect()
    }
}

impl Environment for PistonLine {
    fn name(&self) -> &'static str {
        "pistonline"
    }

    fn agent_count(&self) -> usize {
        self.agents
    }

    fn obs_width(&self) -> usize {
        5
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(3)
    }

    fn max_cycles(&self) -> usize {
        self.max_cycles
    }

    fn reset(&mut self) -> Reset {
        let p = &self.params;
        self.heights = (0..self.agents).map(|_| self.rng.gen_range(0..=p.init_height)).collect();
        let hi = p.start_max.min(self.agents - 2);
        self.ball = self.rng.gen_range(p.start_min..=hi);
        self.t = 0;
        Reset {
            observations: self.observations(),
            graph: self.comm_graph(),
        }
    }

    fn step(&mut self, actions: &[Action]) -> Result<StepResult> {
        let acts = discrete_actions(actions, self.agents, 3)?;
        for (h, a) in self.heights.iter_mut().zip(&acts) {
            *h = match *a {
                DOWN => (*h - 1).max(0),
                UP => (*h + 1).min(self.params.height),
                _ => *h,
            };
        }
        let before = self.ball;
        if before > 0 && self.heights[before + 1] >= self.heights[before] + self.params.lift {
            self.ball -= 1;
        }
        let moved = (before - self.ball) as f64;
        let rewards = (0..self.agents)
            .map(|i| {
                if i == before || i == before + 1 {
                    moved - TIME_PENALTY
                } else {
                    -TIME_PENALTY
                }
            })
            .collect();
        self.t += 1;
        let solved = self.ball == 0;
        Ok(StepResult {
            observations: self.observations(),
            rewards,
            done: solved || self.t >= self.max_cycles,
            solved,
            graph: self.comm_graph(),
            executed: actions.to_vec(),
            events: vec![false; self.agents],
        })
    }

    fn comm_graph(&self) -> CommGraph {
        CommGraph::chain(self.agents)
    }
}
