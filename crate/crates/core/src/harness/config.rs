//! Run configuration and its text format.
//!
//! ```text
//! # comment
//! [env]
//! name = pistonline
//! agents = 5
//!
//! [algo]
//! name = adv_infopg
//! k = 1
//!
//! [train]
//! epochs = 200
//! ```
//!
//! Every key is optional except `env.name` and `algo.name`; the rest default
//! per environment. Unknown or misplaced keys are errors carrying their line.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use crate::diffkit::{CellKind, OptimizerKind};
use crate::envs::{EnvConfig, EnvKind, FraudLatents, PistonLineParams, RelayPongParams};
use crate::error::{Error, Result};
use crate::policy::{ActionMode, DEFAULT_GAUSSIAN_STD};
use crate::trainers::{AdvantageMode, Algorithm};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub algorithm: Algorithm,
    /// Requested reasoning depth; see [`RunConfig::effective_k`].
    pub k: usize,
    pub latent: usize,
    pub hidden: usize,
    pub cell: CellKind,
    pub beta: f64,
    pub action_mode: ActionMode,
    pub advantage: AdvantageMode,
    /// Std of Gaussian noise added to level-0 latents in sampled rollouts.
    pub guess_noise: f64,
    pub gaussian_std: f64,
    pub lr: f64,
    pub gamma: f64,
    /// Episodes per update.
    pub batch: usize,
    pub grad_cap: f64,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    /// Early stop after this many epochs without improvement; 0 disables.
    pub plateau: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Reasoning depth actually used: baselines never communicate.
    pub fn effective_k(&self) -> usize {
        if self.algorithm.communicates() {
            self.k
        } else {
            0
        }
    }

    /// Defaults for an environment and algorithm.
    pub fn defaults(env: EnvKind, algorithm: Algorithm) -> Self {
        let fraud = None;
        let (agents, max_cycles) = match env {
            EnvKind::PistonLine(_) => (5, 200),
            EnvKind::RelayPong(_) => (2, 300),
            EnvKind::MatrixClimb { .. } => (2, 1),
        };
        let mut cfg = Self {
            env: EnvConfig {
                kind: env.clone(),
                agents,
                max_cycles,
                seed: 0,
                fraud_agent: fraud,
                fraud_latents: FraudLatents::default(),
            },
            algorithm,
            k: 1,
            latent: 20,
            hidden: 16,
            cell: CellKind::Gru,
            beta: 1.0,
            action_mode: ActionMode::Sample,
            advantage: AdvantageMode::TemporalDifference,
            guess_noise: 0.0,
            gaussian_std: DEFAULT_GAUSSIAN_STD,
            lr: 1e-3,
            gamma: 0.99,
            batch: 4,
            grad_cap: 0.75,
            epochs: 1000,
            optimizer: OptimizerKind::Adam,
            plateau: 0,
            seed: 0,
            out: None,
        };
        match env {
            EnvKind::PistonLine(_) => {}
            EnvKind::RelayPong(_) => {
                cfg.lr = 4e-4;
                cfg.latent = 30;
                cfg.cell = CellKind::Vrnn;
                cfg.epochs = 4000;
                cfg.beta = 0.1;
                cfg.gamma = 0.95;
                cfg.batch = 16;
                cfg.grad_cap = 10.0;
            }
            EnvKind::MatrixClimb { continuous: false } => {
                cfg.latent = 8;
                cfg.hidden = 8;
                cfg.epochs = 500;
                cfg.batch = 8;
                cfg.grad_cap = 1.0;
                cfg.beta = 0.1;
            }
            EnvKind::MatrixClimb { continuous: true } => {
                cfg.lr = 4e-4;
                cfg.latent = 30;
                cfg.hidden = 8;
                cfg.gamma = 0.95;
                cfg.batch = 16;
                cfg.grad_cap = 5.0;
                cfg.beta = 0.1;
            }
        }
        cfg
    }

    /// Applies the fraud-experiment overrides (batch 2, gradient cap 0.5) for
    /// PistonLine when a fraud agent is configured.
    fn apply_fraud_defaults(&mut self) {
        if matches!(self.env.kind, EnvKind::PistonLine(_)) && self.env.fraud_agent.is_some() {
            self.batch = 2;
            self.grad_cap = 0.5;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Contract(msg));
        self.env.validate()?;
        if self.latent == 0 || self.hidden == 0 {
            return bad("latent and hidden widths must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if !(self.grad_cap > 0.0 && self.grad_cap.is_finite()) {
            return bad(format!("grad_cap must be positive, got {}", self.grad_cap));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.guess_noise >= 0.0 && self.guess_noise.is_finite()) {
            return bad(format!("guess_noise must be non-negative, got {}", self.guess_noise));
        }
        if !(self.gaussian_std > 0.0 && self.gaussian_std.is_finite()) {
            return bad(format!("gaussian_std must be positive, got {}", self.gaussian_std));
        }
        if self.algorithm == Algorithm::Moa && matches!(self.env.kind, EnvKind::MatrixClimb { continuous: true }) {
            return bad("moa needs a discrete action space".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Section {
    Env,
    Algo,
    Train,
}

impl Section {
    fn name(&self) -> &'static str {
        match self {
            Self::Env => "env",
            Self::Algo => "algo",
            Self::Train => "train",
        }
    }
}

struct Entry {
    line: usize,
    value: String,
}

fn parse_error<T>(line: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse { line, msg: msg.into() })
}

fn unquote(raw: &str) -> &str {
    let v = raw.trim();
    if v.len() >= 2 && v.starts_with('"') && v.ends_with('"') {
        &v[1..v.len() - 1]
    } else {
        v
    }
}

fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

/// Entries of a document, keyed by section then key.
fn tokenize(text: &str) -> Result<BTreeMap<(Section, String), Entry>> {
    let mut out = BTreeMap::new();
    let mut section = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = strip_comment(raw).trim();
        if body.is_empty() {
            continue;
        }
        if let Some(rest) = body.strip_prefix('[') {
            let Some(name) = rest.strip_suffix(']') else {
                return parse_error(line, format!("malformed section header `{body}`"));
            };
            section = Some(match name.trim() {
                "env" => Section::Env,
                "algo" => Section::Algo,
                "train" => Section::Train,
                other => return parse_error(line, format!("unknown section `[{other}]`")),
            });
            continue;
        }
        let Some((key, value)) = body.split_once('=') else {
            return parse_error(line, format!("expected `key = value`, got `{body}`"));
        };
        let key = key.trim();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return parse_error(line, format!("invalid key `{key}`"));
        }
        let Some(sec) = section else {
            return parse_error(line, format!("key `{key}` appears before any section header"));
        };
        let value = unquote(value).to_string();
        if value.is_empty() {
            return parse_error(line, format!("key `{key}` has an empty value"));
        }
        if let Some(prev) = out.insert((sec, key.to_string()), Entry { line, value }) {
            return parse_error(line, format!("duplicate key `{key}` (first set on line {})", prev.line));
        }
    }
    Ok(out)
}

struct Reader {
    entries: BTreeMap<(Section, String), Entry>,
    last_line: usize,
}

impl Reader {
    fn take(&mut self, sec: Section, key: &str) -> Option<Entry> {
        self.entries.remove(&(sec, key.to_string()))
    }

    fn parsed<T: FromStr>(&mut self, sec: Section, key: &str, what: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(sec, key) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(Some).or_else(|err| {
                parse_error(
                    e.line,
                    format!("`{key}` expects {what}, got `{}` ({err})", e.value),
                )
            }),
        }
    }

    fn set<T: FromStr>(&mut self, sec: Section, key: &str, what: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.parsed(sec, key, what)? {
            *slot = v;
        }
        Ok(())
    }

    fn required(&mut self, sec: Section, key: &str) -> Result<Entry> {
        self.take(sec, key).ok_or_else(|| Error::Parse {
            line: self.last_line,
            msg: format!("missing required key `{key}` in [{}]", sec.name()),
        })
    }
}

fn env_kind(name: &Entry) -> Result<EnvKind> {
    Ok(match name.value.as_str() {
        "pistonline" => EnvKind::PistonLine(PistonLineParams::default()),
        "relaypong" => EnvKind::RelayPong(RelayPongParams::default()),
        "matrixclimb" => EnvKind::MatrixClimb { continuous: false },
        "matrixclimb_continuous" => EnvKind::MatrixClimb { continuous: true },
        other => {
            return parse_error(
                name.line,
                format!("unknown environment `{other}` (expected pistonline, relaypong, matrixclimb or matrixclimb_continuous)"),
            )
        }
    })
}

const INT: &str = "a non-negative integer";
const REAL: &str = "a number";

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut r = Reader {
        entries: tokenize(text)?,
        last_line: text.lines().count().max(1),
    };
    let env_name = r.required(Section::Env, "name")?;
    let algo_name = r.required(Section::Algo, "name")?;
    let mut kind = env_kind(&env_name)?;
    let algorithm = algo_name
        .value
        .parse::<Algorithm>()
        .or_else(|e| parse_error(algo_name.line, e))?;

    // fraud keys first: they change the defaults
    let fraud_agent: Option<usize> = r.parsed(Section::Env, "fraud_agent", INT)?;
    let mut cfg = RunConfig::defaults(kind.clone(), algorithm);
    cfg.env.fraud_agent = fraud_agent;
    cfg.apply_fraud_defaults();
    r.set(Section::Env, "fraud_latents", "frozen_policy or noise", &mut cfg.env.fraud_latents)?;

    r.set(Section::Env, "agents", INT, &mut cfg.env.agents)?;
    r.set(Section::Env, "max_cycles", INT, &mut cfg.env.max_cycles)?;
    match &mut kind {
        EnvKind::PistonLine(p) => {
            r.set(Section::Env, "height", INT, &mut p.height)?;
            r.set(Section::Env, "lift", INT, &mut p.lift)?;
            r.set(Section::Env, "view", INT, &mut p.view)?;
            r.set(Section::Env, "init_height", INT, &mut p.init_height)?;
            r.set(Section::Env, "start_min", INT, &mut p.start_min)?;
            r.set(Section::Env, "start_max", INT, &mut p.start_max)?;
        }
        EnvKind::RelayPong(p) => {
            r.set(Section::Env, "width", INT, &mut p.width)?;
            r.set(Section::Env, "axis", INT, &mut p.axis)?;
            r.set(Section::Env, "paddle", INT, &mut p.paddle)?;
        }
        EnvKind::MatrixClimb { .. } => {}
    }
    cfg.env.kind = kind;

    r.set(Section::Algo, "k", INT, &mut cfg.k)?;
    r.set(Section::Algo, "latent", INT, &mut cfg.latent)?;
    r.set(Section::Algo, "hidden", INT, &mut cfg.hidden)?;
    r.set(Section::Algo, "cell", "gru or vrnn", &mut cfg.cell)?;
    r.set(Section::Algo, "beta", REAL, &mut cfg.beta)?;
    r.set(Section::Algo, "action_mode", "sample or map", &mut cfg.action_mode)?;
    r.set(Section::Algo, "advantage", "td or monte_carlo", &mut cfg.advantage)?;
    r.set(Section::Algo, "guess_noise", REAL, &mut cfg.guess_noise)?;
    r.set(Section::Algo, "gaussian_std", REAL, &mut cfg.gaussian_std)?;

    r.set(Section::Train, "lr", REAL, &mut cfg.lr)?;
    r.set(Section::Train, "gamma", REAL, &mut cfg.gamma)?;
    r.set(Section::Train, "batch", INT, &mut cfg.batch)?;
    r.set(Section::Train, "grad_cap", REAL, &mut cfg.grad_cap)?;
    r.set(Section::Train, "epochs", INT, &mut cfg.epochs)?;
    r.set(Section::Train, "optimizer", "adam or sgd", &mut cfg.optimizer)?;
    r.set(Section::Train, "plateau", INT, &mut cfg.plateau)?;
    r.set(Section::Train, "seed", INT, &mut cfg.seed)?;
    if let Some(e) = r.take(Section::Train, "out") {
        cfg.out = Some(PathBuf::from(e.value));
    }

    if let Some(((sec, key), e)) = r.entries.iter().min_by_key(|(_, e)| e.line) {
        return parse_error(
            e.line,
            format!("unknown key `{key}` in [{}] for {}", sec.name(), env_name.value),
        );
    }
    cfg.validate().map_err(|e| match e {
        Error::Contract(msg) => Error::Parse {
            line: r.last_line,
            msg,
        },
        other => other,
    })?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(env: &str, algo: &str, extra: &str) -> String {
        format!("[env]\nname = {env}\n[algo]\nname = {algo}\n{extra}")
    }

    #[test]
    fn pistonline_defaults() {
        let c = parse_config(&doc("pistonline", "adv_infopg", "")).unwrap();
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.gamma, 0.99);
        assert_eq!(c.latent, 20);
        assert_eq!(c.grad_cap, 0.75);
        assert_eq!(c.batch, 4);
        assert_eq!(c.epochs, 1000);
        assert_eq!(c.cell, CellKind::Gru);
        assert_eq!(c.env.max_cycles, 200);
        assert_eq!(c.env.agents, 5);
    }

    #[test]
    fn relaypong_defaults() {
        let c = parse_config(&doc("relaypong", "infopg", "")).unwrap();
        assert_eq!(c.lr, 4e-4);
        assert_eq!(c.gamma, 0.95);
        assert_eq!(c.latent, 30);
        assert_eq!(c.cell, CellKind::Vrnn);
        assert_eq!(c.batch, 16);
        assert_eq!(c.grad_cap, 10.0);
        assert_eq!(c.env.max_cycles, 300);
        assert_eq!(c.beta, 0.1);
    }

    #[test]
    fn fraud_pistonline_defaults() {
        let c = parse_config(&doc("pistonline", "moa", "")).unwrap();
        assert_eq!(c.beta, 1.0);
        let f = parse_config("[env]\nname = pistonline\nfraud_agent = 2\n[algo]\nname = moa\n").unwrap();
        assert_eq!(f.batch, 2);
        assert_eq!(f.grad_cap, 0.5);
        assert_eq!(f.env.fraud_agent, Some(2));
    }

    #[test]
    fn negative_k_is_rejected_with_line() {
        let err = parse_config(&doc("pistonline", "infopg", "k = -1\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 5, .. }), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let text = "[env]\nname = relaypong\n\n[algo]\nname = cu\n[train]\nlr = 1e-3\nmomentum = 0.9\n";
        let err = parse_config(text).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 8, .. }), "{err}");
        // valid key in the wrong environment
        let err = parse_config("[env]\nname = relaypong\nheight = 3\n[algo]\nname = cu\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn missing_required_key() {
        let err = parse_config("[env]\nname = pistonline\n").unwrap_err();
        assert!(err.to_string().contains("missing required key `name` in [algo]"), "{err}");
    }

    #[test]
    fn type_errors_and_syntax() {
        let err = parse_config(&doc("pistonline", "infopg", "[train]\nlr = fast\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 6, .. }));
        assert!(matches!(parse_config("name = x\n").unwrap_err(), Error::Parse { line: 1, .. }));
        assert!(matches!(parse_config("[env\n").unwrap_err(), Error::Parse { line: 1, .. }));
        assert!(matches!(parse_config("[env]\njunk\n").unwrap_err(), Error::Parse { line: 2, .. }));
        let dup = "[env]\nname = pistonline\nname = relaypong\n";
        assert!(matches!(parse_config(dup).unwrap_err(), Error::Parse { line: 3, .. }));
    }

    #[test]
    fn comments_quotes_and_overrides() {
        let text = r#"
# a run
[env]
name = "pistonline"   # quoted
agents = 4
max_cycles = 50
height = 6
[algo]
name = infopg
k = 2
cell = vrnn
[train]
epochs = 3
seed = 9
out = "runs/a b"
"#;
        let c = parse_config(text).unwrap();
        assert_eq!(c.env.agents, 4);
        assert_eq!(c.env.max_cycles, 50);
        assert_eq!(c.k, 2);
        assert_eq!(c.cell, CellKind::Vrnn);
        assert_eq!(c.epochs, 3);
        assert_eq!(c.seed, 9);
        assert_eq!(c.out, Some(PathBuf::from("runs/a b")));
        let EnvKind::PistonLine(p) = &c.env.kind else { panic!() };
        assert_eq!(p.height, 6);
    }

    #[test]
    fn semantic_validation() {
        assert!(parse_config(&doc("pistonline", "infopg", "[train]\ngamma = 1.0\n")).is_err());
        assert!(parse_config("[env]\nname = pistonline\nagents = 2\n[algo]\nname = infopg\n").is_err());
        assert!(parse_config("[env]\nname = matrixclimb\nagents = 3\n[algo]\nname = infopg\n").is_err());
    }

    #[test]
    fn baselines_run_without_communication() {
        let c = parse_config(&doc("pistonline", "cu", "k = 2\n")).unwrap();
        assert_eq!(c.effective_k(), 0);
        let c = parse_config(&doc("pistonline", "infopg", "k = 2\n")).unwrap();
        assert_eq!(c.effective_k(), 2);
    }
}
