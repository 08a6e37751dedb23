//! Numerical audits: MI bound suites and gradient checks against finite
//! differences, plus seed-range parsing for sweeps.

use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffkit::{collect_grads, CellKind, Graph};
use crate::envs::{Action, ActionSpace, CommGraph};
use crate::error::{contract, Error, Result};
use crate::mi::{
    bayes_chain_oracle, exact_avg_mi, map_probability, mi_lower_bound, mi_upper_bound, row_conditional_mi,
    ConditionalPolicyTable, LevelPolicy,
};
use crate::policy::{k_level_forward, log_prob, BoundPolicy, ForwardOptions, PolicyBundle, PolicySpec};

pub const BOUND_SLACK: f64 = 1e-12;
pub const ORACLE_TOL: f64 = 1e-12;
pub const GRAD_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// One sampled row of the sandwich suite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AuditRow {
    pub trial: usize,
    pub actions: usize,
    pub map_prob: f64,
    pub lower: f64,
    pub row_mi: f64,
    pub upper: f64,
    pub avg_mi: f64,
}

#[derive(Clone, Debug)]
pub struct MiAudit {
    pub checks: Vec<CheckResult>,
    pub rows: Vec<AuditRow>,
}

impl MiAudit {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// A random distribution over `n` outcomes. Some draws are sparse or
/// one-hot so the edges of the simplex get exercised.
pub fn random_distribution(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let style = rng.gen_range(0..10);
    let mut w: Vec<f64> = (0..n).map(|_| -rng.gen_range(f64::EPSILON..1.0).ln()).collect();
    match style {
        0 => {
            let hot = rng.gen_range(0..n);
            w.iter_mut().enumerate().for_each(|(k, v)| *v = if k == hot { 1.0 } else { 0.0 });
        }
        1 => w.iter_mut().for_each(|v| *v = 1.0),
        2 | 3 => {
            let keep = rng.gen_range(1..=n);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            idx[keep..].iter().for_each(|&k| w[k] = 0.0);
        }
        4 => {
            let peak = rng.gen_range(0..n);
            w[peak] += 20.0;
        }
        _ => {}
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

pub fn random_table(rng: &mut impl Rng, n: usize) -> Result<ConditionalPolicyTable> {
    ConditionalPolicyTable::new((0..n).map(|_| random_distribution(rng, n)).collect())
}

fn random_level_policy(rng: &mut impl Rng, n: usize) -> Result<LevelPolicy> {
    LevelPolicy::new(n, (0..n * n).map(|_| random_distribution(rng, n)).collect())
}

/// Sandwich suite: `p·log p ≤ row MI ≤ 2log|A| + 2log p` on random rows, and
/// the averaged MI is non-negative and above `p·log p`.
pub fn sandwich_suite(trials: usize, seed: u64) -> Result<(CheckResult, Vec<AuditRow>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(trials);
    let mut failures = 0usize;
    let mut first_failure = None;
    for trial in 0..trials {
        let n = rng.gen_range(2..=6);
        let table = random_table(&mut rng, n)?;
        let j = rng.gen_range(0..n);
        let p = map_probability(table.row(j));
        let row = AuditRow {
            trial,
            actions: n,
            map_prob: p,
            lower: mi_lower_bound(p)?,
            row_mi: row_conditional_mi(&table, j)?,
            upper: mi_upper_bound(p, n)?,
            avg_mi: exact_avg_mi(&table),
        };
        let ok = row.lower <= row.row_mi + BOUND_SLACK
            && row.row_mi <= row.upper + BOUND_SLACK
            && row.avg_mi >= -BOUND_SLACK
            && row.avg_mi >= row.lower - BOUND_SLACK;
        if !ok {
            failures += 1;
            first_failure.get_or_insert(row);
        }
        rows.push(row);
    }
    let detail = match first_failure {
        None => format!("{trials} rows, |A| in 2..=6, slack {BOUND_SLACK:e}"),
        Some(r) => format!("{failures}/{trials} rows violate; first {r:?}"),
    };
    Ok((
        CheckResult {
            name: "mi_sandwich".into(),
            passed: failures == 0 && trials > 0,
            detail,
        },
        rows,
    ))
}

/// Proportionality suite: the level-k conditional rebuilt term by term from
/// `(1/|A|)·Σ_x Σ_y π_i(a^i|x,y)·π_j(a^j|x,y)` matches the oracle under a
/// uniform previous-level prior.
pub fn proportionality_suite(trials: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = rng.gen_range(2..=4);
        let pi_i = random_level_policy(&mut rng, n)?;
        let pi_j = random_level_policy(&mut rng, n)?;
        let prior = vec![1.0 / (n * n) as f64; n * n];
        let oracle = bayes_chain_oracle(&pi_i, &pi_j, &prior)?.uniform_conditional();
        for (a_j, row) in oracle.iter().enumerate() {
            for (a_i, got) in row.iter().enumerate() {
                let mut rhs = 0.0;
                for y in 0..n {
                    for x in 0..n {
                        rhs += pi_j.prob(a_j, x, y) * pi_i.prob(a_i, x, y);
                    }
                }
                worst = worst.max((rhs / n as f64 - got).abs());
            }
        }
    }
    Ok(CheckResult {
        name: "chain_proportionality".into(),
        passed: worst <= ORACLE_TOL && trials > 0,
        detail: format!("{trials} instances, |A| in 2..=4, max abs diff {worst:.3e}"),
    })
}

pub fn mi_audit(trials: usize, seed: u64) -> Result<MiAudit> {
    let (sandwich, rows) = sandwich_suite(trials, seed)?;
    let prop = proportionality_suite(trials.div_ceil(10).max(100), seed ^ 0x5eed)?;
    Ok(MiAudit {
        checks: vec![sandwich, prop],
        rows,
    })
}

pub fn write_audit_csv(path: &Path, rows: &[AuditRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub trials: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOL && self.trials > 0
    }
}

/// One random instance: agents, graph, observations, actions and depth.
struct Instance {
    bundles: Vec<PolicyBundle>,
    graph: CommGraph,
    obs: Vec<Vec<f64>>,
    actions: Vec<Action>,
    k: usize,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let agents = rng.gen_range(2..=3);
    let continuous = rng.gen_bool(0.25);
    let width = rng.gen_range(1..=4);
    let spec = PolicySpec {
        obs_width: rng.gen_range(1..=8),
        latent: rng.gen_range(1..=8),
        hidden: rng.gen_range(1..=8),
        actions: if continuous {
            ActionSpace::Continuous(width)
        } else {
            ActionSpace::Discrete(width + 1)
        },
        cell: if rng.gen_bool(0.5) { CellKind::Gru } else { CellKind::Vrnn },
        gaussian_std: rng.gen_range(0.3..1.0),
        predictor_slots: 0,
    };
    let mut bundles = Vec::with_capacity(agents);
    for _ in 0..agents {
        let mut b = PolicyBundle::new(spec.clone(), rng)?;
        for t in b.all_tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
        }
        bundles.push(b);
    }
    let pairs: Vec<(usize, usize)> = (0..agents)
        .flat_map(|i| (i + 1..agents).map(move |j| (i, j)))
        .filter(|_| rng.gen_bool(0.8))
        .collect();
    let graph = CommGraph::new(agents, pairs)?;
    let obs = (0..agents)
        .map(|_| (0..spec.obs_width).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let actions = (0..agents)
        .map(|_| match spec.actions {
            ActionSpace::Discrete(n) => Action::Discrete(rng.gen_range(0..n)),
            ActionSpace::Continuous(d) => Action::Continuous((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        })
        .collect();
    Ok(Instance {
        bundles,
        graph,
        obs,
        actions,
        k: rng.gen_range(0..=2),
    })
}

/// `Σ_i log π_i(a_i)` after the full k-level pass, with its graph.
fn joint_log_prob(inst: &Instance) -> Result<(Graph, Vec<BoundPolicy>, crate::diffkit::Var)> {
    let mut g = Graph::new();
    let bound = inst.bundles.iter().map(|b| b.bind(&mut g)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&BoundPolicy> = bound.iter().collect();
    let out = k_level_forward(&mut g, &refs, &inst.obs, &inst.graph, inst.k, ForwardOptions::default())?;
    let terms = out
        .iter()
        .zip(&inst.actions)
        .map(|(f, a)| log_prob(&mut g, &f.dist, a))
        .collect::<Result<Vec<_>>>()?;
    let total = g.add_all(&terms)?;
    Ok((g, bound, total))
}

fn objective(inst: &Instance) -> Result<f64> {
    let (g, _, total) = joint_log_prob(inst)?;
    g.scalar(total)
}

/// Reverse-mode gradients of the joint k-level log-probability against
/// central differences, on up to `coords_per_trial` random actor coordinates
/// per instance.
pub fn grad_check(trials: usize, coords_per_trial: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        trials,
        coordinates: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for trial in 0..trials {
        let mut inst = random_instance(&mut rng)?;
        let (g, bound, total) = joint_log_prob(&inst)?;
        let grads = g.backward(total)?;
        let analytic: Vec<Vec<Vec<f64>>> = inst
            .bundles
            .iter()
            .zip(&bound)
            .map(|(b, bp)| {
                collect_grads(&grads, &bp.actor_vars(), &b.actor_tensors())
                    .into_iter()
                    .map(|t| t.into_data())
                    .collect()
            })
            .collect();
        drop(g);

        let mut coords: Vec<(usize, usize, usize)> = Vec::new();
        for (a, tensors) in analytic.iter().enumerate() {
            for (t, data) in tensors.iter().enumerate() {
                coords.extend((0..data.len()).map(|c| (a, t, c)));
            }
        }
        coords.shuffle(&mut rng);
        coords.truncate(coords_per_trial);
        for (a, t, c) in coords {
            let original = inst.bundles[a].actor_tensors()[t].data()[c];
            let at = |v: f64, inst: &mut Instance| -> Result<f64> {
                inst.bundles[a].actor_tensors_mut()[t].data_mut()[c] = v;
                objective(inst)
            };
            let plus = at(original + FD_STEP, &mut inst)?;
            let minus = at(original - FD_STEP, &mut inst)?;
            at(original, &mut inst)?;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let an = analytic[a][t][c];
            if !fd.is_finite() || !an.is_finite() {
                return Err(Error::Numeric { op: "grad_check" });
            }
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = format!(
                    "trial {trial}, agent {a}, tensor {t}, coord {c}, K {}: analytic {an:.6e}, fd {fd:.6e}",
                    inst.k
                );
            }
        }
    }
    Ok(report)
}

/// Parses `a..b` (end exclusive) into a seed range.
pub fn parse_seed_range(text: &str) -> Result<Range<u64>> {
    let (a, b) = text
        .split_once("..")
        .ok_or_else(|| Error::Contract(format!("seed range `{text}` is not of the form a..b")))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<u64>()
            .map_err(|_| Error::Contract(format!("bad seed `{s}` in range `{text}`")))
    };
    let (a, b) = (parse(a)?, parse(b)?);
    if a >= b {
        return contract(format!("empty seed range `{text}`"));
    }
    Ok(a..b)
}
