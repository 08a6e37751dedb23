//! Mutual information between action-conditional policies (in nats) and the
//! MAP-probability bounds used to instrument training.
//!
//! Throughout, the marginal over the conditioning action is taken to be
//! uniform, `p(a^j) = 1/|A|`. Bounds are evaluated at `p`, the probability an
//! agent's policy assigns to its MAP action, so `p ∈ [1/|A|, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

const ROW_SUM_TOL: f64 = 1e-9;

/// Largest action space the exhaustive chain oracle accepts.
pub const MAX_ORACLE_ACTIONS: usize = 6;

/// `x·ln x` with the `0·ln 0 = 0` convention.
pub fn xlogx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Shannon entropy (nats) of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|v| xlogx(*v)).sum::<f64>()
}

fn validate_distribution(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return contract(format!("{what} has negative or non-finite entries"));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_SUM_TOL {
        return contract(format!("{what} sums to {s}, not 1"));
    }
    Ok(())
}

/// `π[a^i | a^j]` for one agent pair; row `j` is the distribution of `a^i`
/// given the partner played `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalPolicyTable {
    actions: usize,
    probs: Vec<f64>,
}

impl ConditionalPolicyTable {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let actions = rows.len();
        if actions == 0 {
            return contract("empty policy table");
        }
        let mut probs = Vec::with_capacity(actions * actions);
        for (j, row) in rows.iter().enumerate() {
            if row.len() != actions {
                return contract(format!("row {j} has {} entries, expected {actions}", row.len()));
            }
            validate_distribution(row, &format!("row {j}"))?;
            probs.extend_from_slice(row);
        }
        Ok(Self { actions, probs })
    }

    pub fn uniform(actions: usize) -> Self {
        Self {
            actions,
            probs: vec![1.0 / actions as f64; actions * actions],
        }
    }

    pub fn action_count(&self) -> usize {
        self.actions
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.probs[j * self.actions..(j + 1) * self.actions]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.actions)
    }
}

/// `I = Σ_j (1/|A|) Σ_i π(i|j)·ln(|A|·π(i|j))`, always ≥ 0.
pub fn exact_avg_mi(table: &ConditionalPolicyTable) -> f64 {
    let n = table.action_count() as f64;
    let total: f64 = table
        .rows()
        .map(|row| {
            row.iter()
                .map(|&p| if p > 0.0 { p * (n * p).ln() } else { 0.0 })
                .sum::<f64>()
        })
        .sum();
    (total / n).max(0.0)
}

/// `ln|A| − H(π(·|a^j))` for a single conditioning action.
pub fn row_mi(row: &[f64]) -> f64 {
    let n = row.len() as f64;
    (n.ln() - entropy(row)).max(0.0)
}

pub fn row_conditional_mi(table: &ConditionalPolicyTable, j: usize) -> Result<f64> {
    if j >= table.action_count() {
        return contract(format!(
            "conditioning action {j} out of range for |A| = {}",
            table.action_count()
        ));
    }
    Ok(row_mi(table.row(j)))
}

/// Probability of the MAP action of a distribution.
pub fn map_probability(row: &[f64]) -> f64 {
    row.iter().cloned().fold(0.0, f64::max)
}

/// `p·ln p`, which never exceeds the MI.
pub fn mi_lower_bound(p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return contract(format!("MAP probability {p} outside (0, 1]"));
    }
    Ok(xlogx(p))
}

/// `2·ln|A| + 2·ln p`, an upper bound on the MI for a MAP probability `p`.
pub fn mi_upper_bound(p: f64, actions: usize) -> Result<f64> {
    if actions == 0 {
        return contract("action space must be non-empty");
    }
    let floor = 1.0 / actions as f64;
    // a few ulps of slack so that the exact uniform MAP passes
    if !(p <= 1.0 && p >= floor * (1.0 - 1e-12)) {
        return contract(format!(
            "p = {p} is not a MAP probability for |A| = {actions} (needs p ≥ {floor})"
        ));
    }
    Ok((2.0 * (actions as f64).ln() + 2.0 * p.ln()).max(0.0))
}

/// Average of the lower and upper bounds; the per-sample MI estimate.
pub fn mi_midpoint(p: f64, actions: usize) -> Result<f64> {
    Ok(0.5 * (mi_lower_bound(p)? + mi_upper_bound(p, actions)?))
}

/// One (agent pair, timestep) bound record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSample {
    pub timestep: usize,
    pub agent: usize,
    pub neighbor: usize,
    pub map_prob: f64,
    pub lower: f64,
    pub upper: f64,
    pub midpoint: f64,
}

impl BoundSample {
    pub fn new(timestep: usize, pair: (usize, usize), map_prob: f64, actions: usize) -> Result<Self> {
        let lower = mi_lower_bound(map_prob)?;
        let upper = mi_upper_bound(map_prob, actions)?;
        Ok(Self {
            timestep,
            agent: pair.0,
            neighbor: pair.1,
            map_prob,
            lower,
            upper,
            midpoint: 0.5 * (lower + upper),
        })
    }
}

/// Level-k conditional policy of one agent given the previous-level action
/// pair: `π(a^{(k)} | a^{i,(k−1)} = x, a^{j,(k−1)} = y)`, stored as `|A|²` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelPolicy {
    actions: usize,
    probs: Vec<f64>,
}

impl LevelPolicy {
    /// `rows[x * |A| + y]` is the distribution given `(x, y)`.
    pub fn new(actions: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != actions * actions {
            return contract(format!(
                "level policy needs {} rows, got {}",
                actions * actions,
                rows.len()
            ));
        }
        let mut probs = Vec::with_capacity(actions.pow(3));
        for (r, row) in rows.iter().enumerate() {
            if row.len() != actions {
                return contract(format!("row {r} has wrong width"));
            }
            validate_distribution(row, &format!("level row {r}"))?;
            probs.extend_from_slice(row);
        }
        Ok(Self { actions, probs })
    }

    pub fn action_count(&self) -> usize {
        self.actions
    }

    pub fn prob(&self, action: usize, x: usize, y: usize) -> f64 {
        self.probs[(x * self.actions + y) * self.actions + action]
    }
}

/// Joint level-k distribution of a pair obtained by exhaustive
/// marginalization over the previous level.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainExpansion {
    actions: usize,
    /// `joint[a_i * |A| + a_j]`
    joint: Vec<f64>,
}

impl ChainExpansion {
    pub fn joint(&self, a_i: usize, a_j: usize) -> f64 {
        self.joint[a_i * self.actions + a_j]
    }

    /// `|A|·p(a^i, a^j)`: the conditional under a uniform marginal on `a^j`,
    /// indexed `[a_j][a_i]`.
    pub fn uniform_conditional(&self) -> Vec<Vec<f64>> {
        let n = self.actions;
        (0..n)
            .map(|aj| (0..n).map(|ai| n as f64 * self.joint(ai, aj)).collect())
            .collect()
    }

    /// Bayes conditional `p(a^i | a^j) = p(a^i, a^j) / p(a^j)`. Rows with zero
    /// marginal mass fall back to uniform.
    pub fn conditional(&self) -> ConditionalPolicyTable {
        let n = self.actions;
        let rows = (0..n)
            .map(|aj| {
                let col: Vec<f64> = (0..n).map(|ai| self.joint(ai, aj)).collect();
                let mass: f64 = col.iter().sum();
                if mass > 0.0 {
                    col.iter().map(|v| v / mass).collect()
                } else {
                    vec![1.0 / n as f64; n]
                }
            })
            .collect();
        ConditionalPolicyTable::new(rows).expect("normalized rows")
    }
}

/// Brute-force Bayesian expansion of the level-k pair distribution:
/// `p(a^i, a^j) = Σ_x Σ_y π_i(a^i|x,y)·π_j(a^j|x,y)·prior(x,y)`.
///
/// `prior[x * |A| + y]` is the joint over previous-level actions.
pub fn bayes_chain_oracle(
    pi_i: &LevelPolicy,
    pi_j: &LevelPolicy,
    prior: &[f64],
) -> Result<ChainExpansion> {
    let n = pi_i.action_count();
    if n > MAX_ORACLE_ACTIONS {
        return contract(format!(
            "chain oracle is exhaustive and limited to |A| ≤ {MAX_ORACLE_ACTIONS}, got {n}"
        ));
    }
    if pi_j.action_count() != n || prior.len() != n * n {
        return contract("chain oracle inputs disagree on |A|");
    }
    validate_distribution(prior, "prior")?;
    let mut joint = vec![0.0; n * n];
    for a_i in 0..n {
        for a_j in 0..n {
            let mut acc = 0.0;
            for x in 0..n {
                for y in 0..n {
                    acc += pi_i.prob(a_i, x, y) * pi_j.prob(a_j, x, y) * prior[x * n + y];
                }
            }
            joint[a_i * n + a_j] = acc;
        }
    }
    Ok(ChainExpansion { actions: n, joint })
}
