use super::config::{AgentSpec, Mode, NetworkSpec, ScenarioConfig, TargetSpec, CONFIG_VERSION};
use crate::basis::BoxDomain;
use crate::controller::{ControllerConfig, Obstacle};
use crate::dynamics::AgentModel;
use crate::error::{Error, Result};
use crate::estimation::SensorModel;
use crate::spatial::{EidOptions, GaussianComponent, Region};

pub const PRESETS: [&str; 4] = ["coverage3", "corridor", "localization", "nash-demo"];

pub fn preset(name: &str) -> Result<ScenarioConfig> {
    match name {
        "coverage3" => Ok(coverage3()),
        "corridor" => Ok(corridor()),
        "localization" => Ok(localization()),
        "nash-demo" => Ok(nash_demo()),
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}

/// One-line description per preset, for listings.
pub fn describe(name: &str) -> Option<&'static str> {
    Some(match name {
        "coverage3" => "3 double integrators covering a bimodal Gaussian target, 30 s",
        "corridor" => "3 double integrators covering an L-shaped corridor, 30 s",
        "localization" => "3 agents localizing 4 bearing-only targets among obstacles, 20 s",
        "nash-demo" => "pursuer and evader with opponent-dependent targets, 30 s",
        _ => return None,
    })
}

fn at_rest(x: f64, y: f64) -> AgentSpec {
    AgentSpec { model: AgentModel::double_integrator(), initial_state: Some(vec![x, y, 0.0, 0.0]) }
}

fn base(name: &str, agents: Vec<AgentSpec>, target: TargetSpec, duration: f64) -> ScenarioConfig {
    ScenarioConfig {
        version: CONFIG_VERSION,
        name: name.to_string(),
        domain: BoxDomain::unit(2),
        basis_order: 5,
        grid: 100,
        agents,
        target,
        network: NetworkSpec::Complete,
        controller: ControllerConfig::default(),
        obstacles: Vec::new(),
        duration,
        seed: 0,
        mode: Mode::Decentralized,
        rounds_per_step: 1,
        threads: None,
    }
}

fn coverage3() -> ScenarioConfig {
    let target = TargetSpec::Mixture {
        components: vec![
            GaussianComponent::isotropic(vec![0.3, 0.3], 0.01, 0.5),
            GaussianComponent::isotropic(vec![0.7, 0.7], 0.01, 0.5),
        ],
    };
    base("coverage3", vec![at_rest(0.2, 0.8), at_rest(0.5, 0.5), at_rest(0.8, 0.2)], target, 30.0)
}

/// Half of the unit square: an L along the left and bottom edges.
pub fn corridor_region() -> Region {
    let w = 1.0 - 0.5f64.sqrt();
    Region::Union {
        parts: vec![Region::rect(vec![0.0, 0.0], vec![w, 1.0]), Region::rect(vec![0.0, 0.0], vec![1.0, w])],
    }
}

fn corridor() -> ScenarioConfig {
    let target = TargetSpec::Masked { base: Box::new(TargetSpec::Uniform), region: corridor_region() };
    // all three enter at the corner
    base("corridor", vec![at_rest(0.1, 0.1), at_rest(0.14, 0.1), at_rest(0.1, 0.14)], target, 30.0)
}

fn localization() -> ScenarioConfig {
    let target = TargetSpec::Localization {
        targets: vec![vec![0.2, 0.25], vec![0.75, 0.2], vec![0.25, 0.8], vec![0.8, 0.75]],
        sensor: SensorModel { noise_var: 0.01, range: 0.36, min_range: 0.05 },
        eid: EidOptions::default(),
        update_period: 1.0,
        share_phi: true,
    };
    let agents = (0..3).map(|_| AgentSpec { model: AgentModel::double_integrator(), initial_state: None }).collect();
    let mut c = base("localization", agents, target, 20.0);
    c.grid = 50;
    c.controller.obstacle_weight = 1e4;
    c.obstacles = vec![
        Obstacle { lo: vec![0.42, 0.42], hi: vec![0.58, 0.58] },
        Obstacle { lo: vec![0.05, 0.45], hi: vec![0.15, 0.55] },
        Obstacle { lo: vec![0.85, 0.45], hi: vec![0.95, 0.55] },
    ];
    c
}

fn nash_demo() -> ScenarioConfig {
    let target = TargetSpec::PursuitEvasion {
        pursuer: 0,
        evader: 1,
        sensor: SensorModel { noise_var: 0.01, range: 2.0, min_range: 0.05 },
        belief_variance: 0.02,
        proximity_scale: 0.2,
        eid: EidOptions { samples: 30, ..EidOptions::default() },
    };
    let mut c = base("nash-demo", vec![at_rest(0.2, 0.2), at_rest(0.8, 0.8)], target, 30.0);
    c.grid = 50;
    c
}
