//! Per-epoch metrics as JSON lines and CSV.
//!
//! `metrics.jsonl` and `metrics.csv` hold only quantities that are a pure
//! function of (config, seed), so reruns are byte-identical. Wall-clock time
//! goes to `timing.jsonl` beside them.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub per_agent_reward: Vec<f64>,
    pub team_reward: f64,
    pub mean_episode_length: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mi_midpoint: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mi_lower: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mi_upper: Option<f64>,
}

impl EpochMetrics {
    fn csv_header(agents: usize) -> Vec<String> {
        let mut h = vec!["epoch".to_string()];
        h.extend((0..agents).map(|i| format!("per_agent_reward_{i}")));
        h.extend(
            ["team_reward", "mean_episode_length", "mi_midpoint", "mi_lower", "mi_upper"]
                .iter()
                .map(|s| s.to_string()),
        );
        h
    }

    fn csv_row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut row = vec![self.epoch.to_string()];
        row.extend(self.per_agent_reward.iter().map(f64::to_string));
        row.push(self.team_reward.to_string());
        row.push(self.mean_episode_length.to_string());
        row.push(opt(self.mi_midpoint));
        row.push(opt(self.mi_lower));
        row.push(opt(self.mi_upper));
        row
    }
}

#[derive(Serialize)]
struct Timing {
    epoch: usize,
    wall_clock_seconds: f64,
}

pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const TIMING_JSONL: &str = "timing.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Prepares `dir` for a run. An existing non-empty directory is refused
/// unless `force` is set.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return contract(format!(
                "output directory {} already exists; pass --force to overwrite",
                dir.display()
            ));
        }
    }
    fs::create_dir_all(dir)?;
    // surface permission problems now rather than after the first epoch
    let probe = dir.join(".write_probe");
    File::create(&probe)?;
    fs::remove_file(probe)?;
    Ok(())
}

pub struct MetricsWriter {
    dir: PathBuf,
    jsonl: BufWriter<File>,
    csv: csv::Writer<File>,
    timing: BufWriter<File>,
    agents: usize,
}

impl MetricsWriter {
    /// Creates the metrics files in an already prepared directory.
    pub fn create(dir: &Path, agents: usize) -> Result<Self> {
        let jsonl = BufWriter::new(File::create(dir.join(METRICS_JSONL))?);
        let mut csv = csv::Writer::from_path(dir.join(METRICS_CSV))?;
        csv.write_record(EpochMetrics::csv_header(agents))?;
        csv.flush()?;
        let timing = BufWriter::new(File::create(dir.join(TIMING_JSONL))?);
        Ok(Self {
            dir: dir.to_path_buf(),
            jsonl,
            csv,
            timing,
            agents,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, m: &EpochMetrics, wall_clock_seconds: f64) -> Result<()> {
        if m.per_agent_reward.len() != self.agents {
            return contract(format!(
                "metrics for {} agents written to a {}-agent file",
                m.per_agent_reward.len(),
                self.agents
            ));
        }
        serde_json::to_writer(&mut self.jsonl, m)?;
        self.jsonl.write_all(b"\n")?;
        self.jsonl.flush()?;
        self.csv.write_record(m.csv_row())?;
        self.csv.flush()?;
        serde_json::to_writer(
            &mut self.timing,
            &Timing {
                epoch: m.epoch,
                wall_clock_seconds,
            },
        )?;
        self.timing.write_all(b"\n")?;
        self.timing.flush()?;
        Ok(())
    }
}

/// Reads a metrics JSON-lines file back.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
