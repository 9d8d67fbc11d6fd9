use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use crate::controller::ControllerOutput;
use crate::error::{Error, Result};
use crate::estimation::TargetBelief;

pub const LOG_FILE: &str = "log.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CONFIG_FILE: &str = "config.resolved.json";
pub const BELIEF_FILE: &str = "beliefs.jsonl";

/// An accepted insertion as seen by one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsertionRecord {
    pub tau: f64,
    pub lambda: f64,
    pub u: Vec<f64>,
    pub predicted_delta: f64,
    pub cost_before: f64,
    pub cost_after: f64,
}

impl InsertionRecord {
    /// `None` unless the step accepted an insertion. `channels` picks one
    /// agent's part of a stacked control.
    pub fn from_output(out: &ControllerOutput, channels: Option<Range<usize>>) -> Option<Self> {
        if !out.accepted() {
            return None;
        }
        let u = out.u_star_at_tau.as_ref()?;
        let u = match channels {
            Some(r) => u[r].to_vec(),
            None => u.clone(),
        };
        Some(InsertionRecord {
            tau: out.tau?,
            lambda: out.lambda,
            u,
            predicted_delta: out.predicted_delta,
            cost_before: out.cost_before,
            cost_after: out.cost_after,
        })
    }
}

/// State of the run at one sampling instant `t_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub states: Vec<Vec<f64>>,
    /// Control in effect at `t`.
    pub controls: Vec<Vec<f64>>,
    /// Each agent's own full-history metric against its target.
    pub agent_metrics: Vec<f64>,
    /// Metric of all agents' combined full-history statistics.
    pub collective_metric: f64,
    /// Largest pairwise distance between the agents' shared coefficients.
    pub disagreement: f64,
    /// Insertion each agent accepted at `t`.
    pub insertions: Vec<Option<InsertionRecord>>,
    /// Stored memory values per agent.
    pub history_len: Vec<usize>,
    /// Worst error over agents, per target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_errors: Option<Vec<f64>>,
    /// Smallest signed obstacle distance over the interval that follows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obstacle_clearance: Option<f64>,
}

impl StepRecord {
    pub fn target_rmse(&self) -> Option<f64> {
        let e = self.target_errors.as_ref()?;
        Some((e.iter().map(|x| x * x).sum::<f64>() / e.len() as f64).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefRecord {
    pub t: f64,
    pub agent: usize,
    pub target: usize,
    pub mean: [f64; 2],
    pub covariance: [[f64; 2]; 2],
}

impl BeliefRecord {
    pub fn new(t: f64, agent: usize, target: usize, b: &TargetBelief) -> Self {
        let c = &b.covariance;
        BeliefRecord {
            t,
            agent,
            target,
            mean: [b.mean.x, b.mean.y],
            covariance: [[c[(0, 0)], c[(0, 1)]], [c[(1, 0)], c[(1, 1)]]],
        }
    }
}

/// Tidy numeric table with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{}", self.columns.join(","))?;
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty CSV".into()))??;
        let columns: Vec<String> = header.split(',').map(str::to_string).collect();
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|c| c.parse::<f64>().map_err(|e| Error::Parse(format!("row {}: {e}", n + 1))))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != columns.len() {
                return Err(Error::Parse(format!("row {} has {} cells, header has {}", n + 1, row.len(), columns.len())));
            }
            rows.push(row);
        }
        Ok(Table { columns, rows })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    /// Resolved configuration that produced the run.
    pub config: ScenarioConfig,
    pub records: Vec<StepRecord>,
    pub beliefs: Vec<BeliefRecord>,
}

fn write_jsonl<T: Serialize>(items: &[T], mut w: impl Write) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(r: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

impl RunLog {
    pub fn write_records(&self, w: impl Write) -> Result<()> {
        write_jsonl(&self.records, w)
    }

    pub fn read_records(r: impl BufRead) -> Result<Vec<StepRecord>> {
        read_jsonl(r)
    }

    pub fn write_beliefs(&self, w: impl Write) -> Result<()> {
        write_jsonl(&self.beliefs, w)
    }

    pub fn read_beliefs(r: impl BufRead) -> Result<Vec<BeliefRecord>> {
        read_jsonl(r)
    }

    /// `t, E_collective, E_agent_1..N, consensus_disagreement[, target_rmse]`.
    pub fn summary(&self) -> Table {
        let n = self.config.agents.len();
        let localization = self.records.first().is_some_and(|r| r.target_errors.is_some());
        let mut columns = vec!["t".to_string(), "E_collective".to_string()];
        columns.extend((1..=n).map(|j| format!("E_agent_{j}")));
        columns.push("consensus_disagreement".into());
        if localization {
            columns.push("target_rmse".into());
        }
        let rows = self
            .records
            .iter()
            .map(|r| {
                let mut row = vec![r.t, r.collective_metric];
                row.extend(&r.agent_metrics);
                row.push(r.disagreement);
                if let Some(e) = r.target_rmse() {
                    row.push(e);
                }
                row
            })
            .collect();
        Table { columns, rows }
    }

    /// Writes the log, summary and resolved config (plus beliefs for
    /// localization runs) into `dir` and returns the paths.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut create = |name: &str| -> Result<BufWriter<File>> {
            let path = dir.join(name);
            let f = File::create(&path)?;
            written.push(path);
            Ok(BufWriter::new(f))
        };
        let mut w = create(LOG_FILE)?;
        self.write_records(&mut w)?;
        w.flush()?;
        let mut w = create(SUMMARY_FILE)?;
        self.summary().write_csv(&mut w)?;
        w.flush()?;
        let mut w = create(CONFIG_FILE)?;
        writeln!(w, "{}", self.config.to_json_pretty())?;
        w.flush()?;
        if !self.beliefs.is_empty() {
            let mut w = create(BELIEF_FILE)?;
            self.write_beliefs(&mut w)?;
            w.flush()?;
        }
        Ok(written)
    }
}

/// Per-step `E_dec`, `E_cen` and their ratio.
pub fn comparison_table(dec: &RunLog, cen: &RunLog) -> Result<Table> {
    if dec.records.len() != cen.records.len() {
        return Err(Error::InvalidArgument("runs have different lengths".into()));
    }
    let rows = dec
        .records
        .iter()
        .zip(&cen.records)
        .map(|(d, c)| {
            let ratio = if d.collective_metric == c.collective_metric {
                1.0
            } else {
                d.collective_metric / c.collective_metric
            };
            vec![d.t, d.collective_metric, c.collective_metric, ratio]
        })
        .collect();
    Ok(Table { columns: vec!["t".into(), "E_dec".into(), "E_cen".into(), "ratio".into()], rows })
}
