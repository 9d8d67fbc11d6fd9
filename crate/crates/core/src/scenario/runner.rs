use nalgebra::{DVector, Matrix2, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Mode, ScenarioConfig, TargetSpec};
use super::log::{BeliefRecord, InsertionRecord, RunLog, StepRecord};
use crate::basis::BasisContext;
use crate::controller::{
    control_step, ergodic_metric, integrate_path, ControlSchedule, ControllerOutput, ErgodicMemory,
    ErgodicObjective, ObstaclePenalty, Trajectory, predict,
};
use crate::dynamics::{AgentModel, CollectiveDynamics, Dynamics};
use crate::error::{check_dim, Error, Result};
use crate::estimation::{ekf_update, fuse_beliefs, measure, SensorModel, TargetBelief};
use crate::network::{consensus_round, max_disagreement, ConsensusMatrix};
use crate::spatial::{apply_mask, decompose, eid, gaussian_mixture, normalize, EidOptions, SpatialField};

/// Runs the scenario in its configured mode.
pub fn run(config: &ScenarioConfig) -> Result<RunLog> {
    run_mode(config, config.mode)
}

/// Every agent runs its own controller; past statistics are shared by consensus.
pub fn run_decentralized(config: &ScenarioConfig) -> Result<RunLog> {
    run_mode(config, Mode::Decentralized)
}

/// One controller over the stacked system of all agents.
pub fn run_centralized(config: &ScenarioConfig) -> Result<RunLog> {
    run_mode(config, Mode::Centralized)
}

fn run_mode(config: &ScenarioConfig, mode: Mode) -> Result<RunLog> {
    let mut cfg = config.resolved()?;
    cfg.mode = mode;
    cfg.validate()?;
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads.unwrap_or(0))
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| Simulation::new(&cfg)?.run())
    }
    #[cfg(not(feature = "parallel"))]
    Simulation::new(&cfg)?.run()
}

/// Metric of the time-averaged statistics of `paths` (positions sampled every
/// `dt`, all of equal length). A single sample is treated as a point average.
pub fn evaluate_metric(paths: &[Vec<Vec<f64>>], dt: f64, phi: &[f64], ctx: &BasisContext, q: f64) -> Result<f64> {
    let first = paths.first().ok_or_else(|| Error::InvalidArgument("no trajectories".into()))?;
    if first.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    check_dim(ctx.len(), phi.len())?;
    let mut acc = vec![0.0; ctx.len()];
    for path in paths {
        check_dim(first.len(), path.len())?;
        for s in path {
            check_dim(ctx.dim(), s.len())?;
        }
        integrate_path(ctx, path, dt, &mut acc);
    }
    let duration = (first.len() - 1) as f64 * dt;
    let c: Vec<f64> = if duration > 0.0 {
        acc.iter().map(|a| a / (duration * paths.len() as f64)).collect()
    } else {
        point_average(ctx, paths.iter().map(|p| p[0].as_slice()))?
    };
    ergodic_metric(&c, phi, ctx.lambda(), q)
}

fn point_average<'a>(ctx: &BasisContext, points: impl Iterator<Item = &'a [f64]>) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; ctx.len()];
    let mut n = 0usize;
    for s in points {
        for (a, f) in acc.iter_mut().zip(ctx.eval_all(s)?) {
            *a += f;
        }
        n += 1;
    }
    Ok(acc.into_iter().map(|a| a / n as f64).collect())
}

/// Target field of a static specification, or `None` for state-dependent ones.
pub fn static_field(cfg: &ScenarioConfig, spec: &TargetSpec) -> Result<Option<SpatialField>> {
    let res: Vec<usize> = vec![cfg.grid; cfg.domain.dim()];
    Ok(match spec {
        TargetSpec::Uniform => Some(SpatialField::uniform(cfg.domain.clone(), res)?),
        TargetSpec::Mixture { components } => Some(gaussian_mixture(&cfg.domain, &res, components)?),
        TargetSpec::Masked { base, region } => match static_field(cfg, base)? {
            Some(f) => Some(apply_mask(&f, |s| region.contains(s))?),
            None => None,
        },
        TargetSpec::Localization { .. } | TargetSpec::PursuitEvasion { .. } => None,
    })
}

/// Consensus rounds on per-agent vectors; a single agent keeps its own.
fn mix(values: &[Vec<f64>], p: &ConsensusMatrix, rounds: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = values.to_vec();
    if values.len() > 1 {
        for _ in 0..rounds {
            out = consensus_round(&out, p)?;
        }
    }
    Ok(out)
}

fn prior_trace(domain: &crate::basis::BoxDomain) -> f64 {
    TargetBelief::uniform_prior(domain).covariance.trace()
}

enum Targets {
    Static,
    Localization {
        truths: Vec<Vector2<f64>>,
        sensor: SensorModel,
        eid: EidOptions,
        period_steps: usize,
        share_phi: bool,
        /// `beliefs[agent][target]`
        beliefs: Vec<Vec<TargetBelief>>,
    },
    Pursuit {
        pursuer: usize,
        evader: usize,
        sensor: SensorModel,
        belief_variance: f64,
        scale: f64,
        eid: EidOptions,
    },
}

struct AgentRuntime {
    x: DVector<f64>,
    schedule: ControlSchedule,
    memory: ErgodicMemory,
    /// `int_0^t F_k(x(s)) ds` over the whole run.
    history: Vec<f64>,
    rng: ChaCha8Rng,
}

struct Simulation<'a> {
    cfg: &'a ScenarioConfig,
    ctx: BasisContext,
    models: Vec<AgentModel>,
    p: ConsensusMatrix,
    penalty: ObstaclePenalty,
    agents: Vec<AgentRuntime>,
    /// Stacked schedule for centralized runs.
    stacked: Option<ControlSchedule>,
    targets: Targets,
    phis: Vec<Vec<f64>>,
    /// Agents plan alone (no shared statistics), as the pursuit-evasion players do.
    independent: bool,
}

impl<'a> Simulation<'a> {
    fn new(cfg: &'a ScenarioConfig) -> Result<Self> {
        let ctx = BasisContext::new(cfg.domain.clone(), cfg.basis_order);
        let n = cfg.agents.len();
        let cc = &cfg.controller;
        let models: Vec<AgentModel> = cfg.agents.iter().map(|a| a.model.clone()).collect();
        let p = if n > 1 { cfg.network.build(n)? } else { ConsensusMatrix::complete(1) };
        let penalty = ObstaclePenalty::new(cfg.obstacles.clone(), Some(cfg.domain.lengths().to_vec()), cc);
        let steps = cc.horizon_steps();
        let agents = cfg
            .agents
            .iter()
            .enumerate()
            .map(|(j, a)| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(j as u64);
                AgentRuntime {
                    x: DVector::from_column_slice(a.initial_state.as_ref().expect("resolved config")),
                    schedule: ControlSchedule::constant(0.0, cc.dt, steps, a.model.nominal_control()),
                    memory: ErgodicMemory::new(ctx.len(), cc),
                    history: vec![0.0; ctx.len()],
                    rng,
                }
            })
            .collect();
        let stacked = (cfg.mode == Mode::Centralized).then(|| {
            let c = CollectiveDynamics::new(&models);
            ControlSchedule::constant(0.0, cc.dt, steps, c.nominal_control())
        });
        let (targets, phis, independent) = match &cfg.target {
            TargetSpec::Localization { targets, sensor, eid, update_period, share_phi } => {
                let prior = TargetBelief::uniform_prior(&cfg.domain);
                let period_steps = ((update_period / cc.sample_time).round() as usize).max(1);
                let t = Targets::Localization {
                    truths: targets.iter().map(|t| Vector2::new(t[0], t[1])).collect(),
                    sensor: sensor.clone(),
                    eid: eid.clone(),
                    period_steps,
                    share_phi: *share_phi,
                    beliefs: vec![vec![prior; targets.len()]; n],
                };
                (t, vec![vec![0.0; ctx.len()]; n], false)
            }
            TargetSpec::PursuitEvasion { pursuer, evader, sensor, belief_variance, proximity_scale, eid } => {
                let t = Targets::Pursuit {
                    pursuer: *pursuer,
                    evader: *evader,
                    sensor: sensor.clone(),
                    belief_variance: *belief_variance,
                    scale: *proximity_scale,
                    eid: eid.clone(),
                };
                (t, vec![vec![0.0; ctx.len()]; n], true)
            }
            spec => {
                let field = static_field(cfg, spec)?.expect("static target");
                let phi = decompose(&field, &ctx)?.0;
                (Targets::Static, vec![phi; n], false)
            }
        };
        Ok(Simulation { cfg, ctx, models, p, penalty, agents, stacked, targets, phis, independent })
    }

    fn run(mut self) -> Result<RunLog> {
        let steps = self.cfg.steps();
        let ts = self.cfg.controller.sample_time;
        let mut records = Vec::with_capacity(steps + 1);
        let mut beliefs = Vec::new();
        for i in 0..=steps {
            let t = i as f64 * ts;
            self.step(i, t, &mut records, &mut beliefs)
                .map_err(|e| Error::StepFailed { t, message: e.to_string() })?;
        }
        Ok(RunLog { config: self.cfg.clone(), records, beliefs })
    }

    fn step(&mut self, i: usize, t: f64, records: &mut Vec<StepRecord>, beliefs: &mut Vec<BeliefRecord>) -> Result<()> {
        let n = self.agents.len();
        self.sense()?;
        self.update_targets(i)?;
        if let Targets::Localization { beliefs: b, .. } = &self.targets {
            for (j, row) in b.iter().enumerate() {
                for (k, belief) in row.iter().enumerate() {
                    beliefs.push(BeliefRecord::new(t, j, k, belief));
                }
            }
        }

        let past: Vec<Vec<f64>> = self.agents.iter().map(|a| a.memory.past_integral().to_vec()).collect();
        let shared = if self.independent { past } else { mix(&past, &self.p, self.cfg.rounds_per_step)? };
        let window = self.agents[0].memory.window_length();
        let total_time = window + self.cfg.controller.horizon;
        let disagreement = if self.independent { 0.0 } else { max_disagreement(&shared) / total_time };

        let mut record = StepRecord {
            t,
            states: self.agents.iter().map(|a| a.x.iter().copied().collect()).collect(),
            controls: Vec::with_capacity(n),
            agent_metrics: self.agent_metrics(t)?,
            collective_metric: self.collective_metric(t)?,
            disagreement,
            insertions: vec![None; n],
            history_len: self.agents.iter().map(|a| a.memory.history_len()).collect(),
            target_errors: self.target_errors(),
            obstacle_clearance: None,
        };

        if i == self.cfg.steps() {
            record.controls = self.agents.iter().map(|a| a.schedule.control_at(t).iter().copied().collect()).collect();
            record.obstacle_clearance = self.clearance(record.states.iter().map(|s| s.as_slice()));
            records.push(record);
            return Ok(());
        }

        let flown = match self.cfg.mode {
            Mode::Decentralized => self.plan_decentralized(&shared, total_time, &mut record)?,
            Mode::Centralized => self.plan_centralized(&shared, total_time, &mut record)?,
        };
        let mut clearance: Option<f64> = None;
        for (j, traj) in flown.into_iter().enumerate() {
            let slots = self.models[j].search_slots();
            let positions = traj.positions(&slots[0]);
            if let Some(c) = self.clearance(positions.iter().map(|p| p.as_slice())) {
                clearance = Some(clearance.map_or(c, |m: f64| m.min(c)));
            }
            let a = &mut self.agents[j];
            a.memory.record(&self.ctx, &traj, &slots);
            for s in &slots {
                integrate_path(&self.ctx, &traj.positions(s), traj.dt, &mut a.history);
            }
            a.x = traj.states.last().expect("non-empty interval").clone();
        }
        record.obstacle_clearance = clearance;
        records.push(record);
        Ok(())
    }

    /// Smallest signed distance to any obstacle over the given positions.
    fn clearance<'b>(&self, positions: impl Iterator<Item = &'b [f64]>) -> Option<f64> {
        if self.cfg.obstacles.is_empty() {
            return None;
        }
        let v = self.cfg.domain.dim();
        positions
            .flat_map(|s| self.cfg.obstacles.iter().map(move |ob| ob.signed_distance(&s[..v]).0))
            .reduce(f64::min)
    }

    fn interval(&self, traj: &Trajectory) -> Trajectory {
        let k = self.cfg.controller.interval_steps();
        Trajectory { t0: traj.t0, dt: traj.dt, states: traj.states[..=k].to_vec() }
    }

    fn plan_decentralized(&mut self, shared: &[Vec<f64>], total_time: f64, record: &mut StepRecord) -> Result<Vec<Trajectory>> {
        let n = self.agents.len();
        let cc = &self.cfg.controller;
        let coupled = !self.independent && n > 1;
        let share = if coupled { 1.0 / n as f64 } else { 1.0 };
        // peers' horizons enter through their shared nominal predictions
        let (own, peers) = if coupled {
            let own = self.nominal_horizons()?;
            let peers = mix(&own, &self.p, self.cfg.rounds_per_step)?;
            (own, peers)
        } else {
            (Vec::new(), Vec::new())
        };
        let this = &*self;
        let plan = |j: usize| -> Result<ControllerOutput> {
            let phi = &this.phis[j];
            let fixed: Vec<f64> = if coupled {
                (0..phi.len()).map(|k| shared[j][k] + peers[j][k] - share * own[j][k]).collect()
            } else {
                shared[j].clone()
            };
            let objective = ErgodicObjective {
                ctx: &this.ctx,
                phi,
                q: cc.q,
                total_time,
                share,
                fixed,
                slots: this.models[j].search_slots(),
                penalty: Some(&this.penalty),
            };
            let a = &this.agents[j];
            control_step(&this.models[j], &a.x, &a.schedule, &objective, cc)
        };
        #[cfg(feature = "parallel")]
        let outputs: Vec<Result<ControllerOutput>> = {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(plan).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let outputs: Vec<Result<ControllerOutput>> = (0..n).map(plan).collect();

        let next = self.agents[0].schedule.t0() + cc.sample_time;
        let mut flown = Vec::with_capacity(n);
        for (j, out) in outputs.into_iter().enumerate() {
            let out = out?;
            let t0 = out.schedule.t0();
            record.controls.push(out.schedule.control_at(t0).iter().copied().collect());
            record.insertions[j] = InsertionRecord::from_output(&out, None);
            flown.push(self.interval(&out.trajectory));
            let nominal = self.models[j].nominal_control();
            let a = &mut self.agents[j];
            a.schedule = out.schedule;
            a.schedule.advance(next, &nominal);
        }
        Ok(flown)
    }

    /// Integrals of each agent's predicted horizon under its current schedule.
    fn nominal_horizons(&self) -> Result<Vec<Vec<f64>>> {
        let steps = self.cfg.controller.horizon_steps();
        let one = |j: usize| -> Result<Vec<f64>> {
            let a = &self.agents[j];
            let traj = predict(&self.models[j], &a.x, &a.schedule, steps)?;
            let mut acc = vec![0.0; self.ctx.len()];
            for slot in self.models[j].search_slots() {
                integrate_path(&self.ctx, &traj.positions(&slot), traj.dt, &mut acc);
            }
            Ok(acc)
        };
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            (0..self.agents.len()).into_par_iter().map(one).collect()
        }
        #[cfg(not(feature = "parallel"))]
        (0..self.agents.len()).map(one).collect()
    }

    fn plan_centralized(&mut self, shared: &[Vec<f64>], total_time: f64, record: &mut StepRecord) -> Result<Vec<Trajectory>> {
        let n = self.agents.len();
        let cc = &self.cfg.controller;
        let collective = CollectiveDynamics::new(&self.models);
        let xs: Vec<DVector<f64>> = self.agents.iter().map(|a| a.x.clone()).collect();
        let x = CollectiveDynamics::stack(&xs);
        // with one agent the mean is its own statistic, bit for bit
        let fixed = mix(shared, &ConsensusMatrix::complete(n), 1)?.swap_remove(0);
        let phi = if self.phis.iter().all(|p| p == &self.phis[0]) {
            self.phis[0].clone()
        } else {
            mix(&self.phis, &ConsensusMatrix::complete(n), 1)?.swap_remove(0)
        };
        let objective = ErgodicObjective {
            ctx: &self.ctx,
            phi: &phi,
            q: cc.q,
            total_time,
            share: 1.0 / n as f64,
            fixed,
            slots: collective.search_slots(),
            penalty: Some(&self.penalty),
        };
        let schedule = self.stacked.as_ref().expect("centralized schedule");
        let out = control_step(&collective, &x, schedule, &objective, cc)?;
        let t0 = out.schedule.t0();
        let u0 = out.schedule.control_at(t0);
        let interval = self.interval(&out.trajectory);
        let mut flown: Vec<Trajectory> = (0..n)
            .map(|_| Trajectory { t0: interval.t0, dt: interval.dt, states: Vec::with_capacity(interval.len()) })
            .collect();
        for x in &interval.states {
            for (j, part) in collective.split_state(x).into_iter().enumerate() {
                flown[j].states.push(part);
            }
        }
        for j in 0..n {
            let range = collective.control_range(j);
            record.controls.push(u0.rows_range(range.clone()).iter().copied().collect());
            record.insertions[j] = InsertionRecord::from_output(&out, Some(range));
        }
        let next = t0 + cc.sample_time;
        let nominal = collective.nominal_control();
        let mut schedule = out.schedule;
        schedule.advance(next, &nominal);
        for (j, a) in self.agents.iter_mut().enumerate() {
            let m = &self.models[j];
            a.schedule.advance(next, &m.nominal_control());
        }
        self.stacked = Some(schedule);
        Ok(flown)
    }

    fn agent_metrics(&self, t: f64) -> Result<Vec<f64>> {
        let q = self.cfg.controller.q;
        self.agents
            .iter()
            .enumerate()
            .map(|(j, a)| {
                let c: Vec<f64> = if t > 0.0 {
                    a.history.iter().map(|h| h / t).collect()
                } else {
                    point_average(&self.ctx, std::iter::once(&a.x.as_slice()[..self.ctx.dim()]))?
                };
                ergodic_metric(&c, &self.phis[j], self.ctx.lambda(), q)
            })
            .collect()
    }

    fn collective_metric(&self, t: f64) -> Result<f64> {
        let n = self.agents.len() as f64;
        let v = self.ctx.dim();
        let c: Vec<f64> = if t > 0.0 {
            let mut c = vec![0.0; self.ctx.len()];
            for a in &self.agents {
                for (ci, h) in c.iter_mut().zip(&a.history) {
                    *ci += h;
                }
            }
            c.iter().map(|x| x / (n * t)).collect()
        } else {
            point_average(&self.ctx, self.agents.iter().map(|a| &a.x.as_slice()[..v]))?
        };
        let phi = if self.phis.iter().all(|p| p == &self.phis[0]) {
            self.phis[0].clone()
        } else {
            let mut m = vec![0.0; self.ctx.len()];
            for p in &self.phis {
                for (mi, pi) in m.iter_mut().zip(p) {
                    *mi += pi / n;
                }
            }
            m
        };
        ergodic_metric(&c, &phi, self.ctx.lambda(), self.cfg.controller.q)
    }

    /// Per-target error, worst over agents.
    fn target_errors(&self) -> Option<Vec<f64>> {
        let Targets::Localization { truths, beliefs, .. } = &self.targets else { return None };
        Some(
            truths
                .iter()
                .enumerate()
                .map(|(k, truth)| beliefs.iter().map(|row| row[k].error(truth)).fold(0.0, f64::max))
                .collect(),
        )
    }

    /// Bearings at the current positions, local EKF updates, then fusion.
    fn sense(&mut self) -> Result<()> {
        let Targets::Localization { truths, sensor, beliefs, .. } = &mut self.targets else { return Ok(()) };
        let fresh = prior_trace(&self.cfg.domain) * 0.5;
        for (a, row) in self.agents.iter_mut().zip(beliefs.iter_mut()) {
            let pos = Vector2::new(a.x[0], a.x[1]);
            for (truth, belief) in truths.iter().zip(row.iter_mut()) {
                if pos == *truth {
                    continue;
                }
                let Some(z) = measure(sensor, &pos, truth, &mut a.rng)? else { continue };
                if belief.covariance.trace() > fresh {
                    *belief = TargetBelief::from_first_bearing(&pos, z, sensor);
                } else {
                    match ekf_update(belief, z, &pos, sensor) {
                        Ok(b) => *belief = b,
                        Err(Error::DegenerateGeometry { .. }) => {}
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        if beliefs.len() > 1 {
            for k in 0..truths.len() {
                let column: Vec<TargetBelief> = beliefs.iter().map(|row| row[k].clone()).collect();
                let fused = fuse_beliefs(&column, &self.p, self.cfg.rounds_per_step)?;
                for (row, b) in beliefs.iter_mut().zip(fused) {
                    row[k] = b;
                }
            }
        }
        Ok(())
    }

    fn update_targets(&mut self, i: usize) -> Result<()> {
        let cfg = self.cfg;
        let res = vec![cfg.grid; 2];
        let obstacles = &cfg.obstacles;
        let clear = |s: &[f64]| !obstacles.iter().any(|ob| ob.contains(s));
        match &self.targets {
            Targets::Static => {}
            Targets::Localization { sensor, eid: opts, period_steps, share_phi, beliefs, .. } => {
                if i % period_steps != 0 {
                    return Ok(());
                }
                let opts = EidOptions { seed: opts.seed ^ cfg.seed.wrapping_add(i as u64), ..opts.clone() };
                let mut phis = Vec::with_capacity(beliefs.len());
                for row in beliefs {
                    let mut field = eid(row, sensor, &cfg.domain, &res, &opts)?;
                    if !obstacles.is_empty() {
                        field = apply_mask(&field, clear)?;
                    }
                    phis.push(decompose(&field, &self.ctx)?.0);
                }
                self.phis = if *share_phi { mix(&phis, &self.p, cfg.rounds_per_step)? } else { phis };
            }
            Targets::Pursuit { pursuer, evader, sensor, belief_variance, scale, eid: opts } => {
                let e = &self.agents[*evader].x;
                let p = &self.agents[*pursuer].x;
                let belief = TargetBelief::new(
                    clamp2(&cfg.domain, Vector2::new(e[0], e[1])),
                    Matrix2::identity() * *belief_variance,
                )?;
                let opts = EidOptions { seed: opts.seed ^ cfg.seed.wrapping_add(i as u64), ..opts.clone() };
                let chase = eid(&[belief], sensor, &cfg.domain, &res, &opts)?;
                let (px, py, s2) = (p[0], p[1], 2.0 * scale * scale);
                let flee = normalize(&SpatialField::from_fn(cfg.domain.clone(), res.clone(), |s| {
                    let d2 = (s[0] - px).powi(2) + (s[1] - py).powi(2);
                    1.0 - (-d2 / s2).exp()
                })?)?;
                self.phis[*pursuer] = decompose(&chase, &self.ctx)?.0;
                self.phis[*evader] = decompose(&flee, &self.ctx)?.0;
            }
        }
        Ok(())
    }
}

fn clamp2(domain: &crate::basis::BoxDomain, v: Vector2<f64>) -> Vector2<f64> {
    let l = domain.lengths();
    Vector2::new(v.x.clamp(0.0, l[0]), v.y.clamp(0.0, l[1]))
}
