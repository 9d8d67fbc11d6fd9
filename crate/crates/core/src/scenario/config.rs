use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::BoxDomain;
use crate::controller::{ControllerConfig, Obstacle};
use crate::dynamics::{AgentModel, Dynamics};
use crate::error::{Error, Result};
use crate::estimation::SensorModel;
use crate::network::{self, ConsensusMatrix};
use crate::spatial::{EidOptions, GaussianComponent, Region};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    #[serde(alias = "dec")]
    Decentralized,
    #[serde(alias = "cen")]
    Centralized,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dec" | "decentralized" => Ok(Mode::Decentralized),
            "cen" | "centralized" => Ok(Mode::Centralized),
            other => Err(Error::Parse(format!("unknown mode `{other}` (expected dec or cen)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Decentralized => "dec",
            Mode::Centralized => "cen",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub model: AgentModel,
    /// Full initial state. Left out, the agent starts at rest at a seeded
    /// random position clear of obstacles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<Vec<f64>>,
}

/// How the target distribution is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetSpec {
    Uniform,
    Mixture {
        components: Vec<GaussianComponent>,
    },
    /// `base` with everything outside `region` removed.
    Masked {
        base: Box<TargetSpec>,
        region: Region,
    },
    /// Expected information density over bearing-only beliefs of stationary targets.
    Localization {
        targets: Vec<Vec<f64>>,
        sensor: SensorModel,
        #[serde(default)]
        eid: EidOptions,
        /// Seconds between EID refreshes.
        #[serde(default = "default_update_period")]
        update_period: f64,
        /// Run consensus on the target coefficients as well.
        #[serde(default = "default_true")]
        share_phi: bool,
    },
    /// Two players with opposing, state-dependent targets.
    PursuitEvasion {
        pursuer: usize,
        evader: usize,
        sensor: SensorModel,
        /// Isotropic variance of the pursuer's belief about the evader.
        belief_variance: f64,
        /// Length scale of the evader's pursuer-proximity field.
        proximity_scale: f64,
        #[serde(default)]
        eid: EidOptions,
    },
}

fn default_update_period() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

impl TargetSpec {
    pub fn is_localization(&self) -> bool {
        matches!(self, TargetSpec::Localization { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetworkSpec {
    Complete,
    Ring,
    /// Undirected links with Metropolis-Hastings weights.
    Links { links: Vec<[usize; 2]> },
    /// Explicit consensus matrix.
    Matrix { rows: Vec<Vec<f64>> },
}

impl NetworkSpec {
    pub fn build(&self, n: usize) -> Result<ConsensusMatrix> {
        match self {
            NetworkSpec::Complete => Ok(ConsensusMatrix::complete(n)),
            NetworkSpec::Ring => ConsensusMatrix::ring(n),
            NetworkSpec::Links { links } => {
                let pairs: Vec<(usize, usize)> = links.iter().map(|l| (l[0], l[1])).collect();
                ConsensusMatrix::metropolis(n, &pairs)
            }
            NetworkSpec::Matrix { rows } => {
                if rows.len() != n {
                    return Err(Error::InvalidNetwork(format!("matrix has {} rows for {n} agents", rows.len())));
                }
                network::validate(rows).map_err(|v| {
                    Error::InvalidNetwork(v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; "))
                })?;
                ConsensusMatrix::from_rows(rows.clone())
            }
        }
    }
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

fn default_order() -> usize {
    5
}

fn default_grid() -> usize {
    100
}

fn default_rounds() -> usize {
    1
}

fn default_controller() -> ControllerConfig {
    ControllerConfig::default()
}

fn default_network() -> NetworkSpec {
    NetworkSpec::Complete
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default)]
    pub name: String,
    pub domain: BoxDomain,
    /// Per-axis truncation `K`.
    #[serde(default = "default_order")]
    pub basis_order: usize,
    /// Grid cells per axis for target fields.
    #[serde(default = "default_grid")]
    pub grid: usize,
    pub agents: Vec<AgentSpec>,
    pub target: TargetSpec,
    #[serde(default = "default_network")]
    pub network: NetworkSpec,
    #[serde(default = "default_controller")]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    /// Simulated time `t_f` (s).
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_rounds")]
    pub rounds_per_step: usize,
    /// Worker threads; `None` uses all cores. Results do not depend on it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

impl ScenarioConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Reads TOML when the extension is `.toml`, JSON otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "toml") {
            Self::from_toml_str(&text)
        } else {
            Self::from_json_str(&text)
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.controller.sample_time).round() as usize
    }

    /// Checks everything that can be checked without running.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        if self.agents.is_empty() {
            return bad("at least one agent is required".into());
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        if self.grid == 0 {
            return bad("grid must be positive".into());
        }
        self.controller.validate()?;
        let steps = self.duration / self.controller.sample_time;
        if (steps - steps.round()).abs() > 1e-6 {
            return bad("duration must be a multiple of sample_time".into());
        }
        let v = self.domain.dim();
        for (i, a) in self.agents.iter().enumerate() {
            if a.model.search_slots()[0].len() != v {
                return bad(format!("agent {i}: search space does not match the domain dimension"));
            }
            if let Some(x) = &a.initial_state {
                if x.len() != a.model.state_dim() {
                    return bad(format!(
                        "agent {i}: initial state has {} entries, {} needs {}",
                        x.len(),
                        a.model.name(),
                        a.model.state_dim()
                    ));
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return bad(format!("agent {i}: initial state is not finite"));
                }
            }
            if !self.controller.r_diag.is_empty() && self.controller.r_diag.len() != a.model.control_dim() {
                return bad(format!("agent {i}: r_diag length does not match its control dimension"));
            }
        }
        for (i, ob) in self.obstacles.iter().enumerate() {
            if ob.lo.len() != v || ob.hi.len() != v || ob.lo.iter().zip(&ob.hi).any(|(l, h)| !(l < h)) {
                return bad(format!("obstacle {i}: needs lo < hi in {v} dimensions"));
            }
        }
        self.validate_target(&self.target)?;
        if self.mode == Mode::Decentralized || self.target.is_localization() {
            if self.rounds_per_step == 0 && self.agents.len() > 1 {
                return bad("rounds_per_step must be at least 1".into());
            }
            self.network.build(self.agents.len())?;
        }
        Ok(())
    }

    fn validate_target(&self, target: &TargetSpec) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let v = self.domain.dim();
        match target {
            TargetSpec::Uniform => {}
            TargetSpec::Mixture { components } => {
                if components.is_empty() {
                    return bad("mixture needs at least one component".into());
                }
                for c in components {
                    if c.mean.len() != v || c.covariance.len() != v * v || !(c.weight >= 0.0) {
                        return bad("mixture component has the wrong shape or a negative weight".into());
                    }
                }
            }
            TargetSpec::Masked { base, .. } => self.validate_target(base)?,
            TargetSpec::Localization { targets, sensor, update_period, eid, .. } => {
                if v != 2 {
                    return bad("localization needs a planar domain".into());
                }
                if targets.is_empty() {
                    return bad("localization needs at least one target".into());
                }
                for t in targets {
                    if t.len() != 2 || !self.domain.contains(t) {
                        return bad(format!("target {t:?} is not inside the domain"));
                    }
                }
                sensor.validate()?;
                if !(update_period > &0.0) || eid.samples == 0 {
                    return bad("localization needs a positive update period and EID samples".into());
                }
            }
            TargetSpec::PursuitEvasion { pursuer, evader, sensor, belief_variance, proximity_scale, eid } => {
                if v != 2 {
                    return bad("pursuit-evasion needs a planar domain".into());
                }
                let n = self.agents.len();
                if n != 2 || pursuer == evader || *pursuer >= n || *evader >= n {
                    return bad("pursuit-evasion needs exactly two distinct agents".into());
                }
                if self.mode == Mode::Centralized {
                    return bad("pursuit-evasion players are independent; centralized mode does not apply".into());
                }
                sensor.validate()?;
                if !(*belief_variance > 0.0) || !(*proximity_scale > 0.0) || eid.samples == 0 {
                    return bad("pursuit-evasion needs positive variance, scale and EID samples".into());
                }
            }
        }
        Ok(())
    }

    /// Copy with every default made explicit, including seeded initial states.
    pub fn resolved(&self) -> Result<Self> {
        let mut out = self.clone();
        let c = &mut out.controller;
        c.memory = Some(c.memory());
        c.line_search.lambda0 = Some(c.lambda0());
        c.tau_window = Some(c.tau_window());
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        let lengths = self.domain.lengths().to_vec();
        let clear = |s: &[f64]| {
            self.obstacles.iter().all(|ob| ob.signed_distance(s).0 > self.controller.obstacle_margin)
        };
        for agent in &mut out.agents {
            if agent.initial_state.is_some() {
                continue;
            }
            let mut pos = vec![0.0; lengths.len()];
            let mut found = false;
            for _ in 0..1000 {
                for (p, l) in pos.iter_mut().zip(&lengths) {
                    *p = rng.random_range(0.1 * l..0.9 * l);
                }
                if clear(&pos) {
                    found = true;
                    break;
                }
            }
            if !found {
                return Err(Error::InvalidConfig("could not place an agent clear of obstacles".into()));
            }
            let mut x = vec![0.0; agent.model.state_dim()];
            x[..pos.len()].copy_from_slice(&pos);
            if let AgentModel::Quadrotor(_) = agent.model {
                x[2] = 1.0;
            }
            agent.initial_state = Some(x);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> &'static str {
        r#"{
            "domain": {"lengths": [1.0, 1.0]},
            "agents": [
                {"model": {"type": "double_integrator", "max_accel": 2.0}, "initial_state": [0.2, 0.2, 0.0, 0.0]},
                {"model": {"type": "single_integrator", "max_speed": 1.0}}
            ],
            "target": {"kind": "uniform"},
            "duration": 1.0
        }"#
    }

    #[test]
    fn parses_with_defaults() {
        let c = ScenarioConfig::from_json_str(minimal_json()).unwrap();
        assert_eq!(c.version, 1);
        assert_eq!(c.basis_order, 5);
        assert_eq!(c.network, NetworkSpec::Complete);
        assert_eq!(c.mode, Mode::Decentralized);
        assert_eq!(c.controller, ControllerConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn toml_and_json_agree() {
        let toml_src = r#"
            duration = 1.0
            seed = 4
            mode = "cen"

            [domain]
            lengths = [1.0, 1.0]

            [target]
            kind = "uniform"

            [[agents]]
            model = { type = "double_integrator", max_accel = 2.0 }
            initial_state = [0.2, 0.2, 0.0, 0.0]

            [[agents]]
            model = { type = "single_integrator", max_speed = 1.0 }
        "#;
        let mut a = ScenarioConfig::from_toml_str(toml_src).unwrap();
        let b = ScenarioConfig::from_json_str(minimal_json()).unwrap();
        assert_eq!(a.mode, Mode::Centralized);
        a.mode = Mode::Decentralized;
        a.seed = 0;
        assert_eq!(a, b);
    }

    #[test]
    fn resolved_materializes_defaults() {
        let c = ScenarioConfig::from_json_str(minimal_json()).unwrap();
        let r = c.resolved().unwrap();
        assert_eq!(r.controller.memory, Some(2.0));
        assert_eq!(r.controller.line_search.lambda0, Some(0.1));
        let x = r.agents[1].initial_state.as_ref().unwrap();
        assert!(x.iter().all(|v| (0.1..0.9).contains(v)));
        assert_eq!(r.agents[0].initial_state, c.agents[0].initial_state);
        assert_eq!(r.resolved().unwrap(), r);
        // the snapshot parses back to itself
        assert_eq!(ScenarioConfig::from_json_str(&r.to_json_pretty()).unwrap(), r);
    }

    #[test]
    fn validation_errors() {
        let base = ScenarioConfig::from_json_str(minimal_json()).unwrap();
        let mut c = base.clone();
        c.agents.clear();
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));

        let mut c = base.clone();
        c.agents[0].initial_state = Some(vec![0.0; 3]);
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));

        let mut c = base.clone();
        c.network = NetworkSpec::Matrix { rows: vec![vec![1.0, 0.0], vec![0.0, 1.0]] };
        match c.validate() {
            Err(Error::InvalidNetwork(msg)) => assert!(msg.contains("connectivity"), "{msg}"),
            other => panic!("{other:?}"),
        }

        let mut c = base.clone();
        c.duration = 1.05;
        assert!(c.validate().is_err());

        let mut c = base;
        c.version = 7;
        assert!(c.validate().is_err());
        assert!(matches!(ScenarioConfig::from_json_str("{\"domain\": 3}"), Err(Error::Parse(_))));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("dec".parse::<Mode>().unwrap(), Mode::Decentralized);
        assert_eq!("centralized".parse::<Mode>().unwrap(), Mode::Centralized);
        assert!("both".parse::<Mode>().is_err());
        assert_eq!(Mode::Centralized.to_string(), "cen");
    }
}
