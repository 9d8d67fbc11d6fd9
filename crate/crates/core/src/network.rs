//! Consensus over per-agent coefficient vectors.
//!
//! A [`ConsensusMatrix`] is doubly stochastic with a strongly connected link
//! graph. One [`consensus_round`] replaces every agent's vector by the
//! `P`-weighted average of its neighbours' vectors, which conserves the
//! network mean and contracts disagreement at rate `sigma_2(P)`.

use std::collections::VecDeque;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NotSquare { rows: usize, cols: usize },
    Empty,
    NonFinite { row: usize, col: usize },
    Negative { row: usize, col: usize, value: f64 },
    RowSum { row: usize, sum: f64 },
    ColumnSum { col: usize, sum: f64 },
    Disconnected,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NotSquare { rows, cols } => write!(f, "matrix is {rows}x{cols}, not square"),
            Violation::Empty => write!(f, "matrix has no agents"),
            Violation::NonFinite { row, col } => write!(f, "entry ({row}, {col}) is not finite"),
            Violation::Negative { row, col, value } => {
                write!(f, "non-negativity: entry ({row}, {col}) = {value}")
            }
            Violation::RowSum { row, sum } => {
                write!(f, "row-stochasticity: row {row} sums to {sum}")
            }
            Violation::ColumnSum { col, sum } => {
                write!(f, "column-stochasticity: column {col} sums to {sum}")
            }
            Violation::Disconnected => write!(f, "connectivity: link graph is not strongly connected"),
        }
    }
}

fn describe(violations: &[Violation]) -> String {
    violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

/// Checks square shape, non-negativity, row and column sums, and that the
/// graph of non-zero off-diagonal entries is strongly connected.
pub fn validate(rows: &[Vec<f64>]) -> std::result::Result<(), Vec<Violation>> {
    let n = rows.len();
    if n == 0 {
        return Err(vec![Violation::Empty]);
    }
    if let Some(r) = rows.iter().find(|r| r.len() != n) {
        return Err(vec![Violation::NotSquare { rows: n, cols: r.len() }]);
    }
    let mut out = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            if !v.is_finite() {
                out.push(Violation::NonFinite { row: i, col: j });
            } else if v < 0.0 {
                out.push(Violation::Negative { row: i, col: j, value: v });
            }
        }
    }
    if !out.is_empty() {
        return Err(out);
    }
    for (i, r) in rows.iter().enumerate() {
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            out.push(Violation::RowSum { row: i, sum });
        }
    }
    for j in 0..n {
        let sum: f64 = rows.iter().map(|r| r[j]).sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            out.push(Violation::ColumnSum { col: j, sum });
        }
    }
    if !strongly_connected(rows) {
        out.push(Violation::Disconnected);
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

fn strongly_connected(rows: &[Vec<f64>]) -> bool {
    let n = rows.len();
    let reach = |forward: bool| -> usize {
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = queue.pop_front() {
            for j in 0..n {
                let w = if forward { rows[i][j] } else { rows[j][i] };
                if w > 0.0 && !seen[j] {
                    seen[j] = true;
                    count += 1;
                    queue.push_back(j);
                }
            }
        }
        count
    };
    reach(true) == n && reach(false) == n
}

/// Doubly stochastic consensus weights over `n` agents.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusMatrix {
    p: DMatrix<f64>,
}

impl ConsensusMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        validate(&rows).map_err(|v| Error::InvalidNetwork(describe(&v)))?;
        let n = rows.len();
        Ok(ConsensusMatrix { p: DMatrix::from_fn(n, n, |i, j| rows[i][j]) })
    }

    /// Metropolis-Hastings weights for an undirected link list:
    /// `P_ij = 1 / (1 + max(d_i, d_j))` on links and the remainder on the
    /// diagonal. Symmetric and doubly stochastic by construction.
    pub fn metropolis(n: usize, links: &[(usize, usize)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidNetwork(Violation::Empty.to_string()));
        }
        let mut adj = vec![vec![false; n]; n];
        for &(a, b) in links {
            if a >= n || b >= n {
                return Err(Error::InvalidNetwork(format!("link ({a}, {b}) names an agent outside 0..{n}")));
            }
            if a != b {
                adj[a][b] = true;
                adj[b][a] = true;
            }
        }
        let degree: Vec<usize> = adj.iter().map(|r| r.iter().filter(|&&x| x).count()).collect();
        let mut rows = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                if adj[i][j] {
                    rows[i][j] = 1.0 / (1.0 + degree[i].max(degree[j]) as f64);
                }
            }
            let off: f64 = rows[i].iter().sum();
            rows[i][i] = 1.0 - off;
        }
        ConsensusMatrix::from_rows(rows)
    }

    /// Uniform averaging over the complete graph, `P = (1/n) 1 1^T`.
    pub fn complete(n: usize) -> Self {
        let w = 1.0 / n.max(1) as f64;
        ConsensusMatrix { p: DMatrix::from_element(n.max(1), n.max(1), w) }
    }

    pub fn ring(n: usize) -> Result<Self> {
        let links: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        ConsensusMatrix::metropolis(n, &links)
    }

    pub fn len(&self) -> usize {
        self.p.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.p.nrows() == 0
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.p[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.p.row(i).iter().copied().collect()).collect()
    }

    /// Second-largest singular value, computed as the spectral norm of
    /// `P - (1/n) 1 1^T`.
    pub fn second_singular_value(&self) -> f64 {
        let n = self.len();
        if n == 1 {
            return 0.0;
        }
        let centered = &self.p - DMatrix::from_element(n, n, 1.0 / n as f64);
        centered.singular_values().max()
    }
}

/// `new_i = sum_j P_ij local_j`, applied coefficient-wise.
pub fn consensus_round(locals: &[Vec<f64>], p: &ConsensusMatrix) -> Result<Vec<Vec<f64>>> {
    if locals.len() != p.len() {
        return Err(Error::DimensionMismatch { expected: p.len(), got: locals.len() });
    }
    let len = locals.first().map_or(0, Vec::len);
    if let Some(bad) = locals.iter().find(|l| l.len() != len) {
        return Err(Error::DimensionMismatch { expected: len, got: bad.len() });
    }
    Ok((0..p.len())
        .map(|i| {
            let mut out = vec![0.0; len];
            for (j, local) in locals.iter().enumerate() {
                let w = p.weight(i, j);
                if w != 0.0 {
                    for (o, x) in out.iter_mut().zip(local) {
                        *o += w * x;
                    }
                }
            }
            out
        })
        .collect())
}

/// Euclidean norm of every agent's deviation from the network mean, stacked.
pub fn deviation_norm(locals: &[Vec<f64>]) -> f64 {
    let n = locals.len() as f64;
    let len = locals.first().map_or(0, Vec::len);
    let mean: Vec<f64> = (0..len).map(|k| locals.iter().map(|l| l[k]).sum::<f64>() / n).collect();
    locals
        .iter()
        .flat_map(|l| l.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)))
        .sum::<f64>()
        .sqrt()
}

/// Largest coefficient-wise gap between any two agents.
pub fn max_disagreement(locals: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, a) in locals.iter().enumerate() {
        for b in &locals[i + 1..] {
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    worst
}

/// Rounds needed to shrink a deviation of size `spread0` below `eps`:
/// `ceil(ln(eps / spread0) / ln sigma_2)`.
pub fn rounds_to_tolerance(p: &ConsensusMatrix, spread0: f64, eps: f64) -> Result<usize> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    if spread0 <= eps {
        return Ok(0);
    }
    let sigma = p.second_singular_value();
    if sigma >= 1.0 - 1e-12 {
        return Err(Error::InvalidNetwork(format!(
            "second singular value {sigma} >= 1; the network does not mix"
        )));
    }
    if sigma <= 1e-15 {
        return Ok(1);
    }
    Ok(((eps / spread0).ln() / sigma.ln()).ceil() as usize)
}

pub const MESSAGE_VERSION: u32 = 1;

/// What an agent broadcasts each communication round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientMessage {
    pub sender: u32,
    pub round: u32,
    pub coefficients: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
}

impl CoefficientMessage {
    /// Little-endian layout: `version, sender, round, len` as `u32`, then
    /// `len` `f64` coefficients. When target coefficients are attached they
    /// follow as a second `u32` length and its `f64` values.
    pub fn encode(&self) -> Vec<u8> {
        let extra = self.target.as_ref().map_or(0, |t| 4 + 8 * t.len());
        let mut out = Vec::with_capacity(16 + 8 * self.coefficients.len() + extra);
        out.extend_from_slice(&MESSAGE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&(self.coefficients.len() as u32).to_le_bytes());
        for c in &self.coefficients {
            out.extend_from_slice(&c.to_le_bytes());
        }
        if let Some(t) = &self.target {
            out.extend_from_slice(&(t.len() as u32).to_le_bytes());
            for c in t {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let version = take_u32(&mut cur)?;
        if version != MESSAGE_VERSION {
            return Err(Error::Parse(format!("unsupported message version {version}")));
        }
        let sender = take_u32(&mut cur)?;
        let round = take_u32(&mut cur)?;
        let len = take_u32(&mut cur)? as usize;
        let coefficients = take_f64s(&mut cur, len)?;
        let target = if cur.is_empty() {
            None
        } else {
            let len = take_u32(&mut cur)? as usize;
            Some(take_f64s(&mut cur, len)?)
        };
        if !cur.is_empty() {
            return Err(Error::Parse(format!("{} trailing bytes in message", cur.len())));
        }
        Ok(CoefficientMessage { sender, round, coefficients, target })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn take_u32(cur: &mut &[u8]) -> Result<u32> {
    if cur.len() < 4 {
        return Err(Error::Parse("truncated message header".into()));
    }
    let (head, rest) = cur.split_at(4);
    *cur = rest;
    Ok(u32::from_le_bytes(head.try_into().expect("4 bytes")))
}

fn take_f64s(cur: &mut &[u8], len: usize) -> Result<Vec<f64>> {
    if cur.len() < 8 * len {
        return Err(Error::Parse("truncated message payload".into()));
    }
    let (head, rest) = cur.split_at(8 * len);
    *cur = rest;
    Ok(head
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}
