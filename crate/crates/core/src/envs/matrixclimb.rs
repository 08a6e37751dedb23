//! The two-player climb game as a repeated, stateless environment.
//!
//! The continuous variant maps each action in `[−1, 1]` onto the payoff grid
//! `u = x + 1 ∈ [0, 2]` and interpolates the matrix bilinearly.

use super::{discrete_actions, Action, ActionSpace, CommGraph, Environment, Reset, StepResult};
use crate::error::{contract, Result};

pub const CLIMB_PAYOFFS: [[f64; 3]; 3] = [[11.0, -30.0, 0.0], [-30.0, 7.0, 6.0], [0.0, 6.0, 5.0]];
pub const CLIMB_SCALE: f64 = 1.0 / 30.0;

pub fn climb_payoff(a: usize, b: usize) -> f64 {
    CLIMB_PAYOFFS[a][b] * CLIMB_SCALE
}

fn interpolated(u: f64, v: f64) -> f64 {
    let (i0, j0) = ((u.floor() as usize).min(1), (v.floor() as usize).min(1));
    let (fu, fv) = (u - i0 as f64, v - j0 as f64);
    let r = |i: usize, j: usize| climb_payoff(i, j);
    (1.0 - fu) * (1.0 - fv) * r(i0, j0)
        + fu * (1.0 - fv) * r(i0 + 1, j0)
        + (1.0 - fu) * fv * r(i0, j0 + 1)
        + fu * fv * r(i0 + 1, j0 + 1)
}

#[derive(Clone, Debug)]
pub struct MatrixClimb {
    continuous: bool,
    max_cycles: usize,
    t: usize,
}

impl MatrixClimb {
    pub fn new(continuous: bool, max_cycles: usize) -> Self {
        Self {
            continuous,
            max_cycles,
            t: 0,
        }
    }

    fn observations() -> Vec<Vec<f64>> {
        vec![vec![1.0], vec![1.0]]
    }

    fn continuous_actions(actions: &[Action]) -> Result<[f64; 2]> {
        if actions.len() != 2 {
            return contract(format!("expected 2 actions, got {}", actions.len()));
        }
        let mut out = [0.0; 2];
        for (i, a) in actions.iter().enumerate() {
            match a {
                Action::Continuous(x) if x.len() == 1 && x[0].is_finite() => {
                    out[i] = x[0].clamp(-1.0, 1.0) + 1.0;
                }
                other => return contract(format!("invalid action {other:?} for agent {i}")),
            }
        }
        Ok(out)
    }
}

impl Environment for MatrixClimb {
    fn name(&self) -> &'static str {
        if self.continuous {
            "matrixclimb_continuous"
        } else {
            "matrixclimb"
        }
    }

    fn agent_count(&self) -> usize {
        2
    }

    fn obs_width(&self) -> usize {
        1
    }

    fn action_space(&self) -> ActionSpace {
        if self.continuous {
            ActionSpace::Continuous(1)
        } else {
            ActionSpace::Discrete(3)
        }
    }

    fn max_cycles(&self) -> usize {
        self.max_cycles
    }

    fn reset(&mut self) -> Reset {
        self.t = 0;
        Reset {
            observations: Self::observations(),
            graph: self.comm_graph(),
        }
    }

    fn step(&mut self, actions: &[Action]) -> Result<StepResult> {
        let (reward, solved) = if self.continuous {
            let [u, v] = Self::continuous_actions(actions)?;
            (interpolated(u, v), u.round() == 0.0 && v.round() == 0.0)
        } else {
            let a = discrete_actions(actions, 2, 3)?;
            (climb_payoff(a[0], a[1]), a == [0, 0])
        };
        self.t += 1;
        Ok(StepResult {
            observations: Self::observations(),
            rewards: vec![reward, reward],
            done: solved || self.t >= self.max_cycles,
            solved,
            graph: self.comm_graph(),
            executed: actions.to_vec(),
            events: vec![false, false],
        })
    }

    fn comm_graph(&self) -> CommGraph {
        CommGraph::chain(2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn play(a: usize, b: usize) -> StepResult {
        let mut env = MatrixClimb::new(false, 10);
        env.reset();
        env.step(&[Action::Discrete(a), Action::Discrete(b)]).unwrap()
    }

    #[test]
    fn payoff_lookup() {
        let r = play(0, 0);
        assert!((r.rewards[0] - 11.0 / 30.0).abs() < 1e-15);
        assert!(r.solved && r.done);
        assert_eq!(play(0, 1).rewards, vec![-1.0, -1.0]);
        assert!((play(2, 2).rewards[1] - 5.0 / 30.0).abs() < 1e-15);
        assert!(!play(2, 2).done);
    }

    #[test]
    fn payoffs_are_symmetric() {
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(climb_payoff(a, b), climb_payoff(b, a));
            }
        }
    }

    #[test]
    fn continuous_matches_grid_points() {
        let mut env = MatrixClimb::new(true, 5);
        for a in 0..3 {
            for b in 0..3 {
                let x = |k: usize| Action::Continuous(vec![k as f64 - 1.0]);
                let r = env.step(&[x(a), x(b)]).unwrap();
                assert!((r.rewards[0] - climb_payoff(a, b)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn continuous_interpolates_and_clamps() {
        let mut env = MatrixClimb::new(true, 5);
        let r = env
            .step(&[Action::Continuous(vec![-0.5]), Action::Continuous(vec![-1.0])])
            .unwrap();
        assert!((r.rewards[0] - 0.5 * (11.0 + -30.0) / 30.0).abs() < 1e-15);
        let c = env
            .step(&[Action::Continuous(vec![-7.0]), Action::Continuous(vec![-3.0])])
            .unwrap();
        assert!((c.rewards[0] - 11.0 / 30.0).abs() < 1e-15);
        assert!(c.solved);
    }

    #[test]
    fn rejects_bad_actions() {
        let mut env = MatrixClimb::new(false, 5);
        assert!(env.step(&[Action::Discrete(3), Action::Discrete(0)]).is_err());
        let mut c = MatrixClimb::new(true, 5);
        assert!(c.step(&[Action::Discrete(0), Action::Continuous(vec![0.0])]).is_err());
    }
}
