//! Two paddles keeping a ball in play on a 1-D court.
//!
//! The ball travels along `x ∈ [0, W)` and bounces vertically within
//! `y ∈ [0, P)`. Paddle 0 guards `x = 0`, paddle 1 guards `x = W − 1`.
//! Actions are `0 = down`, `1 = stay`, `2 = up`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{discrete_actions, rng_from, Action, ActionSpace, CommGraph, Environment, MessageRule, Reset, StepResult};
use crate::error::{contract, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RelayPongParams {
    pub width: i64,
    pub axis: i64,
    pub paddle: i64,
}

impl Default for RelayPongParams {
    fn default() -> Self {
        Self {
            width: 8,
            axis: 5,
            paddle: 2,
        }
    }
}

impl RelayPongParams {
    pub fn validate(&self) -> Result<()> {
        if self.width < 3 || self.axis < 2 || self.paddle < 1 || self.paddle > self.axis {
            return contract(format!("invalid relaypong geometry {self:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ball {
    pub x: i64,
    pub y: i64,
    pub vx: i64,
    pub vy: i64,
}

#[derive(Clone, Debug)]
pub struct RelayPong {
    params: RelayPongParams,
    max_cycles: usize,
    rng: ChaCha8Rng,
    ball: Ball,
    /// Lowest cell of each paddle.
    paddles: [i64; 2],
    t: usize,
}

impl RelayPong {
    pub fn new(params: RelayPongParams, max_cycles: usize, seed: u64) -> Result<Self> {
        params.validate()?;
        let mid = (params.axis - params.paddle) / 2;
        Ok(Self {
            ball: Ball {
                x: params.width / 2,
                y: params.axis / 2,
                vx: 1,
                vy: 0,
            },
            paddles: [mid, mid],
            params,
            max_cycles,
            rng: rng_from(seed),
            t: 0,
        })
    }

    pub fn ball(&self) -> &Ball {
        &self.ball
    }

    pub fn paddles(&self) -> [i64; 2] {
        self.paddles
    }

    pub fn set_state(&mut self, ball: Ball, paddles: [i64; 2]) -> Result<()> {
        let p = &self.params;
        let ok_ball = (0..p.width).contains(&ball.x)
            && (0..p.axis).contains(&ball.y)
            && ball.vx.abs() == 1
            && ball.vy.abs() <= 1;
        let ok_paddles = paddles.iter().all(|q| (0..=p.axis - p.paddle).contains(q));
        if !ok_ball || !ok_paddles {
            return contract("relaypong state out of range");
        }
        self.ball = ball;
        self.paddles = paddles;
        self.t = 0;
        Ok(())
    }

    fn scale(v: i64, max: i64) -> f64 {
        if max == 0 {
            0.0
        } else {
            2.0 * v as f64 / max as f64 - 1.0
        }
    }

    fn observe(&self, i: usize) -> Vec<f64> {
        let p = &self.params;
        let b = &self.ball;
        let (distance, toward) = if i == 0 {
            (b.x, -b.vx)
        } else {
            (p.width - 1 - b.x, b.vx)
        };
        let centre = 2 * self.paddles[i] + p.paddle - 1;
        vec![
            Self::scale(centre, 2 * p.axis - 2),
            Self::scale(distance, p.width - 1),
            Self::scale(b.y, p.axis - 1),
            toward as f64,
            b.vy as f64,
        ]
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        vec![self.observe(0), self.observe(1)]
    }

    fn covers(&self, i: usize, y: i64) -> bool {
        (self.paddles[i]..self.paddles[i] + self.params.paddle).contains(&y)
    }

    /// Vertical velocity after a hit at cell `y` of paddle `i`.
    fn deflect(&self, i: usize, y: i64) -> i64 {
        let rel = 2 * (y - self.paddles[i]) - (self.params.paddle - 1);
        rel.signum()
    }
}

impl Environment for RelayPong {
    fn name(&self) -> &'static str {
        "relaypong"
    }

    fn agent_count(&self) -> usize {
        2
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
        let mid = (p.axis - p.paddle) / 2;
        self.paddles = [mid, mid];
        self.ball = Ball {
            x: p.width / 2,
            y: self.rng.gen_range(0..p.axis),
            vx: if self.rng.gen_bool(0.5) { 1 } else { -1 },
            vy: self.rng.gen_range(-1..=1),
        };
        self.t = 0;
        Reset {
            observations: self.observations(),
            graph: self.comm_graph(),
        }
    }

    fn step(&mut self, actions: &[Action]) -> Result<StepResult> {
        let acts = discrete_actions(actions, 2, 3)?;
        let top = self.params.axis - self.params.paddle;
        for (q, a) in self.paddles.iter_mut().zip(&acts) {
            *q = match *a {
                0 => (*q - 1).max(0),
                2 => (*q + 1).min(top),
                _ => *q,
            };
        }
        let b = &mut self.ball;
        b.x += b.vx;
        b.y += b.vy;
        if b.y < 0 || b.y >= self.params.axis {
            b.vy = -b.vy;
            b.y += 2 * b.vy;
        }
        let mut rewards = vec![0.0, 0.0];
        let mut events = vec![false, false];
        let mut missed = false;
        let wall = if self.ball.x <= 0 {
            Some(0)
        } else if self.ball.x >= self.params.width - 1 {
            Some(1)
        } else {
            None
        };
        if let Some(i) = wall {
            let y = self.ball.y;
            if self.covers(i, y) {
                rewards[i] = 1.0;
                events[i] = true;
                self.ball.vx = -self.ball.vx;
                self.ball.vy = self.deflect(i, y);
            } else {
                rewards[i] = -1.0;
                missed = true;
            }
        }
        self.t += 1;
        Ok(StepResult {
            observations: self.observations(),
            rewards,
            done: missed || self.t >= self.max_cycles,
            solved: false,
            graph: self.comm_graph(),
            executed: actions.to_vec(),
            events,
        })
    }

    fn comm_graph(&self) -> CommGraph {
        CommGraph::chain(2)
    }

    fn message_rule(&self) -> MessageRule {
        MessageRule::HoldAtEvent
    }
}
