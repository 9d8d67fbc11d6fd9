//! Browser bindings. Each exported function takes and returns JSON so the
//! page needs no generated types.

use ergoswarm::basis::BoxDomain;
use ergoswarm::dynamics::AgentModel;
use ergoswarm::scenario::{self, AgentSpec, Mode, NetworkSpec, ScenarioConfig, TargetSpec};
use ergoswarm::spatial::{gaussian_mixture, GaussianComponent};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

/// A clicked peak on the unit square.
#[derive(Debug, Clone, Deserialize)]
pub struct Peak {
    pub x: f64,
    pub y: f64,
    #[serde(default = "default_spread")]
    pub spread: f64,
}

fn default_spread() -> f64 {
    0.01
}

#[derive(Debug, Clone, Deserialize)]
pub struct CoverageRequest {
    pub peaks: Vec<Peak>,
    pub agents: usize,
    pub duration: f64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ring: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageTrace {
    pub t: Vec<f64>,
    /// `positions[step][agent] = [x, y]`
    pub positions: Vec<Vec<[f64; 2]>>,
    pub collective: Vec<f64>,
    pub agents: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub t: Vec<f64>,
    pub dec: Vec<f64>,
    pub cen: Vec<f64>,
}

fn target(peaks: &[Peak]) -> TargetSpec {
    if peaks.is_empty() {
        return TargetSpec::Uniform;
    }
    let w = 1.0 / peaks.len() as f64;
    TargetSpec::Mixture {
        components: peaks.iter().map(|p| GaussianComponent::isotropic(vec![p.x, p.y], p.spread, w)).collect(),
    }
}

pub fn config(req: &CoverageRequest) -> Result<ScenarioConfig, String> {
    if req.agents == 0 || req.agents > 8 {
        return Err("between 1 and 8 agents".into());
    }
    let mut c = scenario::preset("coverage3").map_err(|e| e.to_string())?;
    c.name = "demo".into();
    c.agents = (0..req.agents).map(|_| AgentSpec { model: AgentModel::double_integrator(), initial_state: None }).collect();
    c.target = target(&req.peaks);
    c.duration = (req.duration / 0.1).round() * 0.1;
    c.mode = req.mode;
    c.seed = req.seed;
    c.grid = 50;
    if req.ring && req.agents > 2 {
        c.network = NetworkSpec::Ring;
    }
    Ok(c)
}

/// Row-major target density on a `grid x grid` raster, rows bottom to top.
pub fn density(peaks: &[Peak], grid: usize) -> Result<Vec<f64>, String> {
    let domain = BoxDomain::unit(2);
    let field = match peaks.is_empty() {
        true => return Ok(vec![1.0; grid * grid]),
        false => {
            let w = 1.0 / peaks.len() as f64;
            let comps: Vec<GaussianComponent> =
                peaks.iter().map(|p| GaussianComponent::isotropic(vec![p.x, p.y], p.spread, w)).collect();
            gaussian_mixture(&domain, &[grid, grid], &comps).map_err(|e| e.to_string())?
        }
    };
    Ok(field.values().to_vec())
}

pub fn coverage(req: &CoverageRequest) -> Result<CoverageTrace, String> {
    let log = scenario::run(&config(req)?).map_err(|e| e.to_string())?;
    let n = req.agents;
    Ok(CoverageTrace {
        t: log.records.iter().map(|r| r.t).collect(),
        positions: log.records.iter().map(|r| r.states.iter().map(|s| [s[0], s[1]]).collect()).collect(),
        collective: log.records.iter().map(|r| r.collective_metric).collect(),
        agents: (0..n).map(|j| log.records.iter().map(|r| r.agent_metrics[j]).collect()).collect(),
    })
}

pub fn compare(req: &CoverageRequest) -> Result<Comparison, String> {
    let c = config(req)?;
    let dec = scenario::run_decentralized(&c).map_err(|e| e.to_string())?;
    let cen = scenario::run_centralized(&c).map_err(|e| e.to_string())?;
    Ok(Comparison {
        t: dec.records.iter().map(|r| r.t).collect(),
        dec: dec.records.iter().map(|r| r.collective_metric).collect(),
        cen: cen.records.iter().map(|r| r.collective_metric).collect(),
    })
}

fn parse<T: for<'de> Deserialize<'de>>(json: &str) -> Result<T, JsError> {
    serde_json::from_str(json).map_err(|e| JsError::new(&e.to_string()))
}

fn to_json<T: Serialize>(v: &T) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = targetDensity)]
pub fn target_density(peaks_json: &str, grid: usize) -> Result<Vec<f64>, JsError> {
    density(&parse::<Vec<Peak>>(peaks_json)?, grid).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = runCoverage)]
pub fn run_coverage(request_json: &str) -> Result<String, JsError> {
    to_json(&coverage(&parse(request_json)?).map_err(|e| JsError::new(&e))?)
}

#[wasm_bindgen(js_name = compareModes)]
pub fn compare_modes(request_json: &str) -> Result<String, JsError> {
    to_json(&compare(&parse(request_json)?).map_err(|e| JsError::new(&e))?)
}
