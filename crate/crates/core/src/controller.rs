//! Receding-horizon ergodic controller built on the mode insertion gradient.
//!
//! One call to [`control_step`] predicts the horizon under the default
//! schedule, integrates the adjoint backward, forms the closed-form control
//! `u* = u_def - R^-1 h^T rho`, picks the application time with the most
//! negative insertion gradient and backtracks on the insertion duration.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::BasisContext;
use crate::dynamics::{rk4_unchecked, ControlBound, Dynamics};
use crate::error::{check_dim, Error, Result};

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LineSearchParams {
    /// Initial duration; `None` means ten integration steps.
    pub lambda0: Option<f64>,
    pub beta: f64,
    pub gamma: f64,
    pub max_iter: usize,
}

impl Default for LineSearchParams {
    fn default() -> Self {
        LineSearchParams { lambda0: None, beta: 0.5, gamma: 0.1, max_iter: 12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Prediction horizon `T` (s).
    pub horizon: f64,
    /// Sampling time `t_s` between control updates (s).
    pub sample_time: f64,
    /// Integration step (s).
    pub dt: f64,
    /// Ergodic memory `dt_E` (s); `None` means twice the horizon.
    pub memory: Option<f64>,
    pub q: f64,
    /// Diagonal of `R`. Empty means `control_weight` on every channel.
    pub r_diag: Vec<f64>,
    pub control_weight: f64,
    pub line_search: LineSearchParams,
    /// Application times are searched over `[t_i, t_i + tau_window)`;
    /// `None` means one sampling interval.
    pub tau_window: Option<f64>,
    pub obstacle_weight: f64,
    pub obstacle_margin: f64,
    pub boundary_weight: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            horizon: 1.0,
            sample_time: 0.1,
            dt: 0.01,
            memory: None,
            q: 1.0,
            r_diag: Vec::new(),
            control_weight: 0.01,
            line_search: LineSearchParams::default(),
            tau_window: None,
            obstacle_weight: 100.0,
            obstacle_margin: 0.05,
            boundary_weight: 100.0,
        }
    }
}

impl ControllerConfig {
    pub fn memory(&self) -> f64 {
        self.memory.unwrap_or(2.0 * self.horizon)
    }

    pub fn lambda0(&self) -> f64 {
        self.line_search.lambda0.unwrap_or(10.0 * self.dt)
    }

    pub fn tau_window(&self) -> f64 {
        self.tau_window.unwrap_or(self.sample_time)
    }

    /// Integration steps per horizon.
    pub fn horizon_steps(&self) -> usize {
        (self.horizon / self.dt + TIME_EPS).floor() as usize
    }

    /// Integration steps per sampling interval.
    pub fn interval_steps(&self) -> usize {
        (self.sample_time / self.dt).round() as usize
    }

    /// Sampling intervals held in the ergodic memory.
    pub fn memory_intervals(&self) -> usize {
        (self.memory() / self.sample_time).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("horizon", self.horizon),
            ("sample_time", self.sample_time),
            ("dt", self.dt),
            ("q", self.q),
            ("control_weight", self.control_weight),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        let ratio = self.sample_time / self.dt;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::InvalidConfig("sample_time must be a multiple of dt".into()));
        }
        if self.sample_time > self.horizon + TIME_EPS {
            return Err(Error::InvalidConfig("sample_time must not exceed the horizon".into()));
        }
        if !(self.memory() >= 0.0) {
            return Err(Error::InvalidConfig("memory must be non-negative".into()));
        }
        let ls = &self.line_search;
        if !(ls.beta > 0.0 && ls.beta < 1.0) || !(ls.gamma > 0.0 && ls.gamma < 1.0) || !(self.lambda0() > 0.0) {
            return Err(Error::InvalidConfig("line search needs lambda0 > 0 and beta, gamma in (0, 1)".into()));
        }
        if self.r_diag.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::InvalidConfig("r_diag entries must be positive".into()));
        }
        if self.obstacle_weight < 0.0 || self.obstacle_margin < 0.0 || self.boundary_weight < 0.0 {
            return Err(Error::InvalidConfig("penalty parameters must be non-negative".into()));
        }
        Ok(())
    }

    /// `R` for a model with `m` control channels.
    pub fn r_matrix(&self, m: usize) -> Result<DMatrix<f64>> {
        if self.r_diag.is_empty() {
            Ok(DMatrix::identity(m, m) * self.control_weight)
        } else {
            check_dim(m, self.r_diag.len())?;
            Ok(DMatrix::from_diagonal(&DVector::from_column_slice(&self.r_diag)))
        }
    }
}

/// An accepted insertion: `u` is applied on `[tau, tau + lambda)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Insertion {
    pub tau: f64,
    pub lambda: f64,
    pub u: Vec<f64>,
}

impl Insertion {
    fn covers(&self, t: f64) -> bool {
        t >= self.tau && t < self.tau + self.lambda
    }
}

/// Piecewise-constant default control over the horizon plus insertions.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSchedule {
    t0: f64,
    dt: f64,
    samples: Vec<DVector<f64>>,
    insertions: Vec<Insertion>,
}

impl ControlSchedule {
    /// `steps` samples of `nominal` starting at `t0`.
    pub fn constant(t0: f64, dt: f64, steps: usize, nominal: DVector<f64>) -> Self {
        ControlSchedule { t0, dt, samples: vec![nominal; steps], insertions: Vec::new() }
    }

    pub fn from_samples(t0: f64, dt: f64, samples: Vec<DVector<f64>>) -> Self {
        ControlSchedule { t0, dt, samples, insertions: Vec::new() }
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn end(&self) -> f64 {
        self.t0 + self.samples.len() as f64 * self.dt
    }

    pub fn samples(&self) -> &[DVector<f64>] {
        &self.samples
    }

    pub fn insertions(&self) -> &[Insertion] {
        &self.insertions
    }

    pub fn insert(&mut self, insertion: Insertion) {
        if insertion.lambda > 0.0 {
            self.insertions.push(insertion);
        }
    }

    /// Default control on step `j`, ignoring insertions.
    pub fn base(&self, j: usize) -> &DVector<f64> {
        &self.samples[j.min(self.samples.len() - 1)]
    }

    /// Control in effect at `t`; later insertions override earlier ones.
    pub fn control_at(&self, t: f64) -> DVector<f64> {
        if let Some(ins) = self.insertions.iter().rev().find(|ins| ins.covers(t)) {
            return DVector::from_column_slice(&ins.u);
        }
        let j = ((t - self.t0) / self.dt + TIME_EPS).floor().max(0.0) as usize;
        self.base(j).clone()
    }

    /// Insertion edges strictly inside `(a, b)`.
    fn breakpoints(&self, a: f64, b: f64, out: &mut Vec<f64>) {
        out.clear();
        for ins in &self.insertions {
            for e in [ins.tau, ins.tau + ins.lambda] {
                if e > a + TIME_EPS && e < b - TIME_EPS {
                    out.push(e);
                }
            }
        }
        out.sort_by(|x, y| x.total_cmp(y));
        out.dedup();
    }

    /// Moves the start to `t_new`, dropping elapsed samples and insertions and
    /// padding the tail with `nominal`.
    pub fn advance(&mut self, t_new: f64, nominal: &DVector<f64>) {
        let shift = ((t_new - self.t0) / self.dt).round().max(0.0) as usize;
        let n = self.samples.len();
        self.samples.drain(..shift.min(n));
        self.samples.resize(n, nominal.clone());
        self.t0 = t_new;
        self.insertions.retain(|ins| ins.tau + ins.lambda > t_new + TIME_EPS);
    }
}

/// States sampled every `dt` from `t0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t0: f64,
    pub dt: f64,
    pub states: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, j: usize) -> f64 {
        self.t0 + j as f64 * self.dt
    }

    pub fn end(&self) -> f64 {
        self.time(self.states.len().saturating_sub(1))
    }

    /// Sample index of time `t`.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        if t < self.t0 - TIME_EPS || t > self.end() + TIME_EPS {
            return Err(Error::OutsideHorizon { t, start: self.t0, end: self.end() });
        }
        let r = (t - self.t0) / self.dt;
        let j = r.round();
        if (r - j).abs() > 1e-6 {
            return Err(Error::Misaligned(format!("t = {t} is not on the sample grid")));
        }
        Ok(j as usize)
    }

    /// Search-space positions of `slot` along the trajectory.
    pub fn positions(&self, slot: &[usize]) -> Vec<Vec<f64>> {
        self.states.iter().map(|x| slot.iter().map(|&i| x[i]).collect()).collect()
    }
}

/// RK4 rollout over `steps` intervals of `schedule.dt()`. Steps are split at
/// insertion edges so short insertions are integrated exactly.
pub fn predict(model: &dyn Dynamics, x0: &DVector<f64>, schedule: &ControlSchedule, steps: usize) -> Result<Trajectory> {
    check_dim(model.state_dim(), x0.len())?;
    check_dim(model.control_dim(), schedule.base(0).len())?;
    if schedule.samples.len() < steps {
        return Err(Error::Misaligned(format!(
            "schedule has {} samples, horizon needs {steps}",
            schedule.samples.len()
        )));
    }
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x0.clone());
    let mut cuts = Vec::new();
    let dt = schedule.dt;
    for j in 0..steps {
        let a = schedule.t0 + j as f64 * dt;
        let b = a + dt;
        let mut x = states[j].clone();
        schedule.breakpoints(a, b, &mut cuts);
        let mut start = a;
        for end in cuts.iter().copied().chain(std::iter::once(b)) {
            let u = schedule.control_at(0.5 * (start + end));
            x = rk4_unchecked(model, &x, &u, end - start);
            start = end;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { t: b });
        }
        states.push(x);
    }
    Ok(Trajectory { t0: schedule.t0, dt, states })
}

/// Axis-aligned box the agents must keep clear of.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Obstacle {
    pub fn contains(&self, s: &[f64]) -> bool {
        s.iter().zip(self.lo.iter().zip(&self.hi)).all(|(&x, (&l, &h))| x >= l && x <= h)
    }

    /// Signed distance (negative inside) and its gradient.
    pub fn signed_distance(&self, s: &[f64]) -> (f64, Vec<f64>) {
        let v = s.len();
        if self.contains(s) {
            let mut best = (f64::INFINITY, 0usize, 0.0);
            for i in 0..v {
                let to_lo = s[i] - self.lo[i];
                let to_hi = self.hi[i] - s[i];
                if to_lo < best.0 {
                    best = (to_lo, i, -1.0);
                }
                if to_hi < best.0 {
                    best = (to_hi, i, 1.0);
                }
            }
            let mut g = vec![0.0; v];
            g[best.1] = best.2;
            (-best.0, g)
        } else {
            let d: Vec<f64> = (0..v)
                .map(|i| {
                    if s[i] < self.lo[i] {
                        s[i] - self.lo[i]
                    } else if s[i] > self.hi[i] {
                        s[i] - self.hi[i]
                    } else {
                        0.0
                    }
                })
                .collect();
            let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            (n, d.iter().map(|x| x / n).collect())
        }
    }
}

/// Running cost `Theta(s)`: quadratic hinges around obstacles and outside the domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ObstaclePenalty {
    pub obstacles: Vec<Obstacle>,
    pub weight: f64,
    pub margin: f64,
    /// Domain box for the boundary term; `None` disables it.
    pub bounds: Option<Vec<f64>>,
    pub boundary_weight: f64,
}

impl ObstaclePenalty {
    pub fn new(obstacles: Vec<Obstacle>, lengths: Option<Vec<f64>>, config: &ControllerConfig) -> Self {
        ObstaclePenalty {
            obstacles,
            weight: config.obstacle_weight,
            margin: config.obstacle_margin,
            bounds: lengths,
            boundary_weight: config.boundary_weight,
        }
    }

    pub fn value(&self, s: &[f64]) -> f64 {
        let mut total = 0.0;
        for ob in &self.obstacles {
            let (d, _) = ob.signed_distance(s);
            let gap = (self.margin - d).max(0.0);
            total += self.weight * gap * gap;
        }
        if let Some(l) = &self.bounds {
            for (i, &x) in s.iter().enumerate() {
                let out = (-x).max(0.0) + (x - l[i]).max(0.0);
                total += self.boundary_weight * out * out;
            }
        }
        total
    }

    /// Adds `dTheta/ds` to `grad`.
    pub fn add_gradient(&self, s: &[f64], grad: &mut [f64]) {
        for ob in &self.obstacles {
            let (d, g) = ob.signed_distance(s);
            let gap = self.margin - d;
            if gap > 0.0 {
                for (gi, dg) in grad.iter_mut().zip(&g) {
                    *gi -= 2.0 * self.weight * gap * dg;
                }
            }
        }
        if let Some(l) = &self.bounds {
            for (i, &x) in s.iter().enumerate() {
                if x < 0.0 {
                    grad[i] += 2.0 * self.boundary_weight * x;
                } else if x > l[i] {
                    grad[i] += 2.0 * self.boundary_weight * (x - l[i]);
                }
            }
        }
    }

    pub fn is_active(&self) -> bool {
        !self.obstacles.is_empty() || self.bounds.is_some()
    }
}

/// `E = q sum_k Lambda_k (c_k - phi_k)^2`.
pub fn ergodic_metric(c: &[f64], phi: &[f64], lambda: &[f64], q: f64) -> Result<f64> {
    check_dim(phi.len(), c.len())?;
    check_dim(lambda.len(), c.len())?;
    Ok(q * c.iter().zip(phi).zip(lambda).map(|((c, p), l)| l * (c - p) * (c - p)).sum::<f64>())
}

/// Adds `int F_k` along the piecewise-linear path through `positions`.
pub fn integrate_path(ctx: &BasisContext, positions: &[Vec<f64>], dt: f64, acc: &mut [f64]) {
    for w in positions.windows(2) {
        ctx.integrate_segment(&w[0], &w[1], dt, acc);
    }
}

/// Memory-augmented objective for one controller.
///
/// `c_k = (fixed_k + share * sum_slots int_horizon F_k(x_slot)) / total_time`,
/// cost `= q sum Lambda (c - phi)^2 + int Theta`.
pub struct ErgodicObjective<'a> {
    pub ctx: &'a BasisContext,
    pub phi: &'a [f64],
    pub q: f64,
    /// `T_E`, past window plus horizon.
    pub total_time: f64,
    /// Weight of this controller's horizon integrals in `c_k`.
    pub share: f64,
    /// Everything in `c_k` the horizon does not change, in integral units.
    pub fixed: Vec<f64>,
    pub slots: Vec<Vec<usize>>,
    pub penalty: Option<&'a ObstaclePenalty>,
}

impl ErgodicObjective<'_> {
    fn check(&self) -> Result<()> {
        check_dim(self.ctx.len(), self.phi.len())?;
        check_dim(self.ctx.len(), self.fixed.len())?;
        if !(self.total_time > 0.0) {
            return Err(Error::InvalidArgument("total time must be positive".into()));
        }
        Ok(())
    }

    /// Trajectory coefficients `c_k` including the predicted horizon.
    pub fn coefficients(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        self.check()?;
        if traj.is_empty() {
            return Err(Error::InvalidArgument("empty trajectory".into()));
        }
        let mut horizon = vec![0.0; self.ctx.len()];
        for slot in &self.slots {
            check_dim(self.ctx.dim(), slot.len())?;
            integrate_path(self.ctx, &traj.positions(slot), traj.dt, &mut horizon);
        }
        Ok(self
            .fixed
            .iter()
            .zip(&horizon)
            .map(|(f, h)| (f + self.share * h) / self.total_time)
            .collect())
    }

    /// Trapezoidal `int Theta` over the trajectory.
    pub fn penalty_integral(&self, traj: &Trajectory) -> f64 {
        let Some(p) = self.penalty else { return 0.0 };
        let n = traj.len();
        let mut total = 0.0;
        for slot in &self.slots {
            for (j, s) in traj.positions(slot).iter().enumerate() {
                let w = if j == 0 || j + 1 == n { 0.5 } else { 1.0 };
                total += w * p.value(s);
            }
        }
        total * traj.dt
    }

    pub fn cost(&self, traj: &Trajectory) -> Result<f64> {
        let c = self.coefficients(traj)?;
        Ok(ergodic_metric(&c, self.phi, self.ctx.lambda(), self.q)? + self.penalty_integral(traj))
    }

    /// `dl/dx`, the adjoint forcing at state `x` given the current `c_k`.
    pub fn forcing(&self, c: &[f64], x: &DVector<f64>) -> Result<DVector<f64>> {
        let scale = 2.0 * self.q * self.share / self.total_time;
        let weights: Vec<f64> = c
            .iter()
            .zip(self.phi)
            .zip(self.ctx.lambda())
            .map(|((c, p), l)| scale * l * (c - p))
            .collect();
        let mut out = DVector::zeros(x.len());
        for slot in &self.slots {
            let s: Vec<f64> = slot.iter().map(|&i| x[i]).collect();
            let mut g = self.ctx.weighted_grad(&s, &weights)?;
            if let Some(p) = self.penalty {
                p.add_gradient(&s, &mut g);
            }
            for (&i, gi) in slot.iter().zip(&g) {
                out[i] += gi;
            }
        }
        Ok(out)
    }
}

/// Backward RK4 for `rho' = -forcing(x) - f_x(x, u_def)^T rho`, `rho(end) = 0`.
/// Midpoint states are linear interpolations of the samples.
pub fn integrate_adjoint(
    model: &dyn Dynamics,
    traj: &Trajectory,
    schedule: &ControlSchedule,
    forcing: impl Fn(&DVector<f64>) -> Result<DVector<f64>>,
) -> Result<Vec<DVector<f64>>> {
    if traj.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    if (traj.t0 - schedule.t0).abs() > TIME_EPS || (traj.dt - schedule.dt).abs() > TIME_EPS {
        return Err(Error::Misaligned(format!(
            "trajectory starts at {} with step {}, schedule at {} with step {}",
            traj.t0, traj.dt, schedule.t0, schedule.dt
        )));
    }
    let n = model.state_dim();
    check_dim(n, traj.states[0].len())?;
    let last = traj.len() - 1;
    let mut rho = vec![DVector::zeros(n); traj.len()];
    let h = traj.dt;
    let mut l_next = forcing(&traj.states[last])?;
    for j in (0..last).rev() {
        let (xa, xb) = (&traj.states[j], &traj.states[j + 1]);
        let xm = (xa + xb) * 0.5;
        let u = schedule.control_at(traj.time(j) + 0.5 * h);
        let (ja, jm, jb) = (model.jacobian(xa, &u), model.jacobian(&xm, &u), model.jacobian(xb, &u));
        let (la, lm) = (forcing(xa)?, forcing(&xm)?);
        let rhs = |l: &DVector<f64>, a: &DMatrix<f64>, r: &DVector<f64>| -(l + a.tr_mul(r));
        // integrate in reversed time from t_{j+1} to t_j
        let r1 = &rho[j + 1];
        let k1 = rhs(&l_next, &jb, r1);
        let k2 = rhs(&lm, &jm, &(r1 - &k1 * (h / 2.0)));
        let k3 = rhs(&lm, &jm, &(r1 - &k2 * (h / 2.0)));
        let k4 = rhs(&la, &ja, &(r1 - &k3 * h));
        let next = r1 - (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { t: traj.time(j) });
        }
        rho[j] = next;
        l_next = la;
    }
    Ok(rho)
}

/// Adjoint of the ergodic objective along `traj`, with `c` the coefficients it produces.
pub fn adjoint(
    model: &dyn Dynamics,
    traj: &Trajectory,
    schedule: &ControlSchedule,
    objective: &ErgodicObjective,
    c: &[f64],
) -> Result<Vec<DVector<f64>>> {
    objective.check()?;
    check_dim(objective.ctx.len(), c.len())?;
    integrate_adjoint(model, traj, schedule, |x| objective.forcing(c, x))
}

/// Cholesky factor of `R`, rejecting anything not symmetric positive definite.
pub fn control_weight_factor(r: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if !r.is_square() {
        return Err(Error::NotPositiveDefinite("R is not square".into()));
    }
    let asym = (r - r.transpose()).amax();
    if asym > 1e-12 * r.amax().max(1.0) {
        return Err(Error::NotPositiveDefinite("R is not symmetric".into()));
    }
    r.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite("R has a non-positive pivot".into()))
}

/// Unsaturated `u*(t_j) = u_def(t_j) - R^-1 h(x_j)^T rho_j` at every sample.
pub fn u_star(
    model: &dyn Dynamics,
    traj: &Trajectory,
    rho: &[DVector<f64>],
    r: &DMatrix<f64>,
    schedule: &ControlSchedule,
) -> Result<Vec<DVector<f64>>> {
    let chol = control_weight_factor(r)?;
    check_dim(model.control_dim(), r.nrows())?;
    if rho.len() != traj.len() {
        return Err(Error::Misaligned(format!("{} costates for {} states", rho.len(), traj.len())));
    }
    Ok(traj
        .states
        .iter()
        .zip(rho)
        .enumerate()
        .map(|(j, (x, p))| {
            let htp = model.response(x).tr_mul(p);
            schedule.control_at(traj.time(j)) - chol.solve(&htp)
        })
        .collect())
}

/// `rho^T (f(x, u_new) - f(x, u_def))`. Only `h(x)` matters since the drift cancels.
pub fn insertion_gradient(model: &dyn Dynamics, x: &DVector<f64>, rho: &DVector<f64>, u_new: &DVector<f64>, u_def: &DVector<f64>) -> f64 {
    let du = u_new - u_def;
    rho.dot(&(model.response(x) * du))
}

/// Mode insertion gradient at sample time `t`.
pub fn mode_insertion_gradient(
    model: &dyn Dynamics,
    traj: &Trajectory,
    rho: &[DVector<f64>],
    u_new: &[DVector<f64>],
    schedule: &ControlSchedule,
    t: f64,
) -> Result<f64> {
    let j = traj.index_of(t)?;
    if rho.len() != traj.len() || u_new.len() != traj.len() {
        return Err(Error::Misaligned("costate, control and state samples differ in length".into()));
    }
    Ok(insertion_gradient(model, &traj.states[j], &rho[j], &u_new[j], &schedule.control_at(t)))
}

/// Channel-wise clamp.
pub fn saturate(u: &DVector<f64>, bounds: &[ControlBound]) -> DVector<f64> {
    DVector::from_iterator(u.len(), u.iter().zip(bounds).map(|(&x, b)| x.clamp(b.min, b.max)))
}

/// Index of the most negative gradient, earliest on ties; `None` if none is negative.
pub fn choose_tau(gradients: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, &g) in gradients.iter().enumerate() {
        if g < 0.0 && best.is_none_or(|(_, b)| g < b) {
            best = Some((j, g));
        }
    }
    best.map(|(j, _)| j)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchResult {
    /// Accepted duration; zero when every candidate failed.
    pub lambda: f64,
    /// Cost at the accepted duration (the baseline when rejected).
    pub cost: f64,
    pub iterations: usize,
}

/// Armijo backtracking on the insertion duration.
///
/// Candidates are `lambda0 * beta^j`; `max_duration` clips each candidate to
/// the part that will actually be applied and `resimulate` receives the
/// clipped value. Acceptance needs `E(l) - E(0) <= gamma * l * gradient` and a
/// strict decrease.
pub fn line_search_lambda(
    gradient: f64,
    baseline: f64,
    max_duration: f64,
    params: &LineSearchParams,
    lambda0: f64,
    mut resimulate: impl FnMut(f64) -> Result<f64>,
) -> Result<LineSearchResult> {
    let rejected = |iterations| LineSearchResult { lambda: 0.0, cost: baseline, iterations };
    if !(gradient < 0.0) || !(max_duration > 0.0) {
        return Ok(rejected(0));
    }
    let mut candidate = lambda0;
    for j in 0..=params.max_iter {
        let lambda = candidate.min(max_duration);
        let cost = resimulate(lambda)?;
        if cost - baseline <= params.gamma * lambda * gradient && cost < baseline {
            return Ok(LineSearchResult { lambda, cost, iterations: j + 1 });
        }
        candidate *= params.beta;
    }
    Ok(rejected(params.max_iter + 1))
}

/// Past-window statistics kept by one agent: per-interval basis integrals
/// over the last `dt_E` seconds plus the matching state samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ErgodicMemory {
    capacity: usize,
    interval: f64,
    contributions: VecDeque<Vec<f64>>,
    sum: Vec<f64>,
    states: VecDeque<DVector<f64>>,
}

impl ErgodicMemory {
    pub fn new(len: usize, config: &ControllerConfig) -> Self {
        ErgodicMemory {
            capacity: config.memory_intervals(),
            interval: config.sample_time,
            contributions: VecDeque::new(),
            sum: vec![0.0; len],
            states: VecDeque::new(),
        }
    }

    /// Appends the interval just flown; `states` are the `dt` samples over it.
    pub fn record(&mut self, ctx: &BasisContext, traj: &Trajectory, slots: &[Vec<usize>]) {
        let mut contrib = vec![0.0; self.sum.len()];
        for slot in slots {
            integrate_path(ctx, &traj.positions(slot), traj.dt, &mut contrib);
        }
        if self.capacity == 0 {
            return;
        }
        if self.contributions.len() == self.capacity {
            let old = self.contributions.pop_front().unwrap();
            for (s, o) in self.sum.iter_mut().zip(&old) {
                *s -= o;
            }
            self.states.pop_front();
        }
        for (s, c) in self.sum.iter_mut().zip(&contrib) {
            *s += c;
        }
        self.contributions.push_back(contrib);
        if let Some(x) = traj.states.last() {
            self.states.push_back(x.clone());
        }
    }

    /// Covered past time `W = min(dt_E, elapsed)`.
    pub fn window_length(&self) -> f64 {
        self.contributions.len() as f64 * self.interval
    }

    /// `int_{t_i - W}^{t_i} F_k(x) dt`, maintained recursively.
    pub fn past_integral(&self) -> &[f64] {
        &self.sum
    }

    /// The same integral summed afresh from the stored intervals.
    pub fn recompute(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.sum.len()];
        for c in &self.contributions {
            for (o, v) in out.iter_mut().zip(c) {
                *o += v;
            }
        }
        out
    }

    /// Stored state values (samples times state dimension).
    pub fn history_len(&self) -> usize {
        self.states.iter().map(|x| x.len()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct ControllerOutput {
    /// Application time, `None` when no sample had a negative gradient.
    pub tau: Option<f64>,
    /// Applied duration (zero when rejected).
    pub lambda: f64,
    pub u_star_at_tau: Option<Vec<f64>>,
    /// Insertion gradient at `tau` with the saturated control.
    pub gradient: f64,
    /// `gradient * lambda`, first-order change in cost.
    pub predicted_delta: f64,
    pub cost_before: f64,
    pub cost_after: f64,
    /// Unsaturated `u*` over the horizon.
    pub u_star: Vec<DVector<f64>>,
    /// Schedule with the accepted insertion written in.
    pub schedule: ControlSchedule,
    /// Prediction under the updated schedule.
    pub trajectory: Trajectory,
}

impl ControllerOutput {
    pub fn accepted(&self) -> bool {
        self.lambda > 0.0
    }
}

/// One receding-horizon update from state `x0` at `schedule.t0()`.
pub fn control_step(
    model: &dyn Dynamics,
    x0: &DVector<f64>,
    schedule: &ControlSchedule,
    objective: &ErgodicObjective,
    config: &ControllerConfig,
) -> Result<ControllerOutput> {
    let steps = config.horizon_steps();
    let r = config.r_matrix(model.control_dim())?;
    let traj = predict(model, x0, schedule, steps)?;
    let c = objective.coefficients(&traj)?;
    let cost_before = ergodic_metric(&c, objective.phi, objective.ctx.lambda(), objective.q)?
        + objective.penalty_integral(&traj);
    let rho = adjoint(model, &traj, schedule, objective, &c)?;
    let ustar = u_star(model, &traj, &rho, &r, schedule)?;
    let bounds = model.bounds();

    let t0 = schedule.t0();
    let apply_end = t0 + config.sample_time;
    let search = ((config.tau_window() / config.dt).round() as usize).clamp(1, steps);
    let saturated: Vec<DVector<f64>> = ustar[..search].iter().map(|u| saturate(u, &bounds)).collect();
    let gradients: Vec<f64> = (0..search)
        .map(|j| insertion_gradient(model, &traj.states[j], &rho[j], &saturated[j], &schedule.control_at(traj.time(j))))
        .collect();

    let unchanged = |tau, gradient| ControllerOutput {
        tau,
        lambda: 0.0,
        u_star_at_tau: None,
        gradient,
        predicted_delta: 0.0,
        cost_before,
        cost_after: cost_before,
        u_star: ustar.clone(),
        schedule: schedule.clone(),
        trajectory: traj.clone(),
    };
    let Some(j) = choose_tau(&gradients) else {
        return Ok(unchanged(None, 0.0));
    };
    let tau = traj.time(j);
    let gradient = gradients[j];
    let u_tau: Vec<f64> = saturated[j].iter().copied().collect();

    let mut best: Option<(ControlSchedule, Trajectory)> = None;
    let result = line_search_lambda(
        gradient,
        cost_before,
        apply_end - tau,
        &config.line_search,
        config.lambda0(),
        |lambda| {
            let mut candidate = schedule.clone();
            candidate.insert(Insertion { tau, lambda, u: u_tau.clone() });
            let resim = predict(model, x0, &candidate, steps)?;
            let cost = objective.cost(&resim)?;
            best = Some((candidate, resim));
            Ok(cost)
        },
    )?;
    if result.lambda <= 0.0 {
        return Ok(unchanged(Some(tau), gradient));
    }
    // the closure keeps the last candidate tried, which is the accepted one
    let (new_schedule, new_traj) = best.expect("accepted line search evaluated a candidate");
    Ok(ControllerOutput {
        tau: Some(tau),
        lambda: result.lambda,
        u_star_at_tau: Some(u_tau),
        gradient,
        predicted_delta: gradient * result.lambda,
        cost_before,
        cost_after: result.cost,
        u_star: ustar,
        schedule: new_schedule,
        trajectory: new_traj,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BoxDomain;
    use crate::dynamics::AgentModel;
    use crate::spatial::{decompose, gaussian_mixture, GaussianComponent, SpatialField};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ctx() -> BasisContext {
        BasisContext::new(BoxDomain::unit(2), 5)
    }

    fn bimodal(ctx: &BasisContext) -> Vec<f64> {
        let f = gaussian_mixture(
            ctx.domain(),
            &[100, 100],
            &[
                GaussianComponent::isotropic(vec![0.3, 0.3], 0.01, 1.0),
                GaussianComponent::isotropic(vec![0.7, 0.7], 0.01, 1.0),
            ],
        )
        .unwrap();
        decompose(&f, ctx).unwrap().0
    }

    fn objective<'a>(ctx: &'a BasisContext, phi: &'a [f64], cfg: &ControllerConfig) -> ErgodicObjective<'a> {
        ErgodicObjective {
            ctx,
            phi,
            q: cfg.q,
            total_time: cfg.horizon,
            share: 1.0,
            fixed: vec![0.0; ctx.len()],
            slots: vec![vec![0, 1]],
            penalty: None,
        }
    }

    fn zero_schedule(model: &AgentModel, cfg: &ControllerConfig, t0: f64) -> ControlSchedule {
        ControlSchedule::constant(t0, cfg.dt, cfg.horizon_steps(), model.nominal_control())
    }

    #[test]
    fn predict_examples() {
        let cfg = ControllerConfig::default();
        let si = AgentModel::single_integrator();
        let x0 = DVector::from_vec(vec![0.3, 0.4]);
        let traj = predict(&si, &x0, &zero_schedule(&si, &cfg, 0.0), cfg.horizon_steps()).unwrap();
        assert_eq!(traj.len(), 101);
        assert!(traj.states.iter().all(|x| x == &x0));

        let di = AgentModel::double_integrator();
        let a = DVector::from_vec(vec![0.5, -0.2]);
        let sched = ControlSchedule::constant(0.0, cfg.dt, cfg.horizon_steps(), a.clone());
        let x0 = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.0]);
        let traj = predict(&di, &x0, &sched, cfg.horizon_steps()).unwrap();
        for (j, x) in traj.states.iter().enumerate() {
            let t = j as f64 * cfg.dt;
            assert_relative_eq!(x[0], 0.1 + 0.3 * t + 0.25 * t * t, epsilon = 1e-12);
            assert_relative_eq!(x[1], 0.2 - 0.1 * t * t, epsilon = 1e-12);
        }

        let odd = ControllerConfig { horizon: 0.555, dt: 0.01, ..cfg };
        assert_eq!(odd.horizon_steps() + 1, 56);
    }

    #[test]
    fn short_insertions_are_integrated_exactly() {
        let di = AgentModel::double_integrator();
        let mut sched = ControlSchedule::constant(0.0, 0.01, 10, DVector::zeros(2));
        sched.insert(Insertion { tau: 0.0323, lambda: 0.0041, u: vec![1.0, 0.0] });
        let traj = predict(&di, &DVector::zeros(4), &sched, 10).unwrap();
        // velocity 0.0041 after the pulse, position 0.5 a l^2 + v (t - 0.0364)
        let v = 0.0041;
        let p = 0.5 * 0.0041 * 0.0041 + v * (0.1 - 0.0364);
        assert_relative_eq!(traj.states[10][2], v, epsilon = 1e-15);
        assert_relative_eq!(traj.states[10][0], p, epsilon = 1e-15);
    }

    #[test]
    fn parked_agent_has_point_coefficients() {
        let ctx = ctx();
        let cfg = ControllerConfig::default();
        let si = AgentModel::single_integrator();
        let phi = vec![0.0; ctx.len()];
        let obj = objective(&ctx, &phi, &cfg);
        let s0 = vec![0.37, 0.81];
        let traj = predict(&si, &DVector::from_column_slice(&s0), &zero_schedule(&si, &cfg, 0.0), 100).unwrap();
        let c = obj.coefficients(&traj).unwrap();
        let point = ctx.eval_all(&s0).unwrap();
        for (a, b) in c.iter().zip(&point) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        assert_relative_eq!(c[0], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn metric_examples() {
        let lambda = [1.0, 2f64.powf(-1.5)];
        let e = ergodic_metric(&[0.1, 0.2], &[0.0, 0.0], &lambda, 1.0).unwrap();
        assert_relative_eq!(e, 0.01 + 2f64.powf(-1.5) * 0.04, epsilon = 1e-15);
        assert_relative_eq!(e, 0.024142, epsilon = 1e-6);
        assert_eq!(ergodic_metric(&[0.4, 0.3], &[0.4, 0.3], &lambda, 1.0).unwrap(), 0.0);
        let e2 = ergodic_metric(&[0.1, 0.2], &[0.0, 0.0], &lambda, 2.0).unwrap();
        assert_relative_eq!(e2, 2.0 * e, epsilon = 1e-15);
        assert!(ergodic_metric(&[0.1], &[0.0, 0.0], &lambda, 1.0).is_err());
    }

    #[test]
    fn adjoint_of_constant_forcing_is_linear_ramp() {
        let si = AgentModel::single_integrator();
        let cfg = ControllerConfig::default();
        let sched = zero_schedule(&si, &cfg, 2.0);
        let traj = predict(&si, &DVector::from_vec(vec![0.5, 0.5]), &sched, 100).unwrap();
        let w = DVector::from_vec(vec![0.7, -1.3]);
        let rho = integrate_adjoint(&si, &traj, &sched, |_| Ok(w.clone())).unwrap();
        for (j, r) in rho.iter().enumerate() {
            let expected = &w * (3.0 - traj.time(j));
            assert!((r - expected).amax() < 1e-12);
        }
        assert_eq!(rho.last().unwrap().amax(), 0.0);

        let other = zero_schedule(&si, &cfg, 2.05);
        assert!(matches!(integrate_adjoint(&si, &traj, &other, |_| Ok(w.clone())), Err(Error::Misaligned(_))));
    }

    #[test]
    fn matching_coefficients_give_zero_costate() {
        let ctx = ctx();
        let cfg = ControllerConfig::default();
        let di = AgentModel::double_integrator();
        let x0 = DVector::from_vec(vec![0.2, 0.6, 0.3, -0.1]);
        let sched = zero_schedule(&di, &cfg, 0.0);
        let traj = predict(&di, &x0, &sched, 100).unwrap();
        // phi chosen as the trajectory's own statistics
        let zero = vec![0.0; ctx.len()];
        let c = objective(&ctx, &zero, &cfg).coefficients(&traj).unwrap();
        let obj = objective(&ctx, &c, &cfg);
        let rho = adjoint(&di, &traj, &sched, &obj, &c).unwrap();
        assert!(rho.iter().all(|r| r.amax() == 0.0));
        let us = u_star(&di, &traj, &rho, &cfg.r_matrix(2).unwrap(), &sched).unwrap();
        assert!(us.iter().all(|u| u == sched.base(0)));
        let out = control_step(&di, &x0, &sched, &obj, &cfg).unwrap();
        assert!(out.tau.is_none());
        assert_eq!(out.schedule, sched);
    }

    #[test]
    fn u_star_scales_inversely_with_r() {
        let di = AgentModel::double_integrator();
        let cfg = ControllerConfig::default();
        let sched = zero_schedule(&di, &cfg, 0.0);
        let traj = predict(&di, &DVector::from_vec(vec![0.5, 0.5, 0.1, 0.0]), &sched, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rho: Vec<DVector<f64>> = (0..traj.len()).map(|_| DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0))).collect();
        let r = DMatrix::from_row_slice(2, 2, &[0.02, 0.005, 0.005, 0.03]);
        let a = u_star(&di, &traj, &rho, &r, &sched).unwrap();
        let b = u_star(&di, &traj, &rho, &(&r * 4.0), &sched).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y * 4.0).amax() < 1e-12);
        }
        let zero = vec![DVector::zeros(4); traj.len()];
        assert!(u_star(&di, &traj, &zero, &r, &sched).unwrap().iter().all(|u| u.amax() == 0.0));
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(u_star(&di, &traj, &rho, &bad, &sched), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn u_star_minimizes_pointwise_objective_over_grid() {
        // integrand: (dE/dlambda)(u) + 0.5 ||u - u_def||_R^2, minimized by u*
        let di = AgentModel::double_integrator();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let x = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let rho = DVector::from_fn(4, |_, _| rng.random_range(-0.02..0.02));
            let u_def = DVector::from_fn(2, |_, _| rng.random_range(-0.5..0.5));
            let l = DMatrix::from_row_slice(2, 2, &[rng.random_range(0.5..1.5), 0.0, rng.random_range(-0.3..0.3), rng.random_range(0.5..1.5)]);
            let r = &l * l.transpose();
            let sched = ControlSchedule::constant(0.0, 0.01, 1, u_def.clone());
            let traj = Trajectory { t0: 0.0, dt: 0.01, states: vec![x.clone()] };
            let us = u_star(&di, &traj, std::slice::from_ref(&rho), &r, &sched).unwrap().remove(0);
            let cost = |u: &DVector<f64>| {
                let d = u - &u_def;
                insertion_gradient(&di, &x, &rho, u, &u_def) + 0.5 * d.dot(&(&r * &d))
            };
            let (mut best, mut best_u) = (f64::INFINITY, DVector::zeros(2));
            for a in 0..=100 {
                for b in 0..=100 {
                    let u = DVector::from_vec(vec![-0.5 + a as f64 * 0.01, -0.5 + b as f64 * 0.01]);
                    let c = cost(&u);
                    if c < best {
                        best = c;
                        best_u = u;
                    }
                }
            }
            assert!(cost(&us) <= best + 1e-12);
            assert!((us - best_u).amax() <= 0.01, "grid optimum far from u*");
        }
    }

    #[test]
    fn insertion_gradient_examples() {
        let di = AgentModel::double_integrator();
        let cfg = ControllerConfig::default();
        let sched = zero_schedule(&di, &cfg, 1.0);
        let traj = predict(&di, &DVector::from_vec(vec![0.5, 0.5, 0.0, 0.0]), &sched, 100).unwrap();
        let rho: Vec<DVector<f64>> = (0..traj.len()).map(|j| DVector::from_vec(vec![0.0, 0.0, 0.1 * j as f64, 0.02])).collect();
        let r = cfg.r_matrix(2).unwrap();
        let us = u_star(&di, &traj, &rho, &r, &sched).unwrap();
        let unchanged: Vec<DVector<f64>> = (0..traj.len()).map(|_| DVector::zeros(2)).collect();
        assert_eq!(mode_insertion_gradient(&di, &traj, &rho, &unchanged, &sched, 1.5).unwrap(), 0.0);
        let g = mode_insertion_gradient(&di, &traj, &rho, &us, &sched, 1.5).unwrap();
        let htp = DVector::from_vec(vec![5.0, 0.02]);
        assert_relative_eq!(g, -htp.dot(&htp) / 0.01, max_relative = 1e-12);
        assert!(matches!(
            mode_insertion_gradient(&di, &traj, &rho, &us, &sched, 2.5),
            Err(Error::OutsideHorizon { .. })
        ));
        assert!(matches!(
            mode_insertion_gradient(&di, &traj, &rho, &us, &sched, 1.5031),
            Err(Error::Misaligned(_))
        ));
    }

    #[test]
    fn saturate_examples() {
        let b = vec![ControlBound::symmetric(1.0); 2];
        let inside = DVector::from_vec(vec![0.3, -0.9]);
        assert_eq!(saturate(&inside, &b), inside);
        let big = DVector::from_vec(vec![10.0, -10.0]);
        assert_eq!(saturate(&big, &b).as_slice(), &[1.0, -1.0]);
        assert_eq!(saturate(&saturate(&big, &b), &b), saturate(&big, &b));
    }

    #[test]
    fn choose_tau_examples() {
        assert_eq!(choose_tau(&[0.1, -0.3, -1.2, -0.5]), Some(2));
        assert_eq!(choose_tau(&[0.0, 0.2, 0.0]), None);
        assert_eq!(choose_tau(&[-0.1, -2.0, 0.3, -2.0]), Some(1));
        assert_eq!(choose_tau(&[]), None);
    }

    #[test]
    fn line_search_on_quadratic_toy() {
        // E(l) = (l - 0.03)^2 - 0.03^2 has E(0) = 0 and slope -0.06 at zero
        let params = LineSearchParams::default();
        let g = -0.06;
        let toy = |l: f64| Ok((l - 0.03) * (l - 0.03) - 0.0009);
        let res = line_search_lambda(g, 0.0, f64::INFINITY, &params, 0.1, toy).unwrap();
        // Armijo needs l^2 - 0.06 l <= -0.006 l, i.e. l <= 0.054: 0.1 fails, 0.05 passes
        assert_eq!(res.iterations, 2);
        assert_relative_eq!(res.lambda, 0.05);
        assert!(res.cost < 0.0);

        let never = line_search_lambda(g, 0.0, f64::INFINITY, &params, 0.1, |_| Ok(1.0)).unwrap();
        assert_eq!(never.lambda, 0.0);
        assert_eq!(never.cost, 0.0);
        assert_eq!(never.iterations, 13);

        let mut seen = Vec::new();
        line_search_lambda(g, 0.0, 0.02, &params, 0.1, |l| {
            seen.push(l);
            Ok(1.0)
        })
        .unwrap();
        assert_eq!(seen[0], 0.02);
        assert_eq!(seen[4], 0.1 * 0.5f64.powi(4));
    }

    #[test]
    fn schedule_advance_drops_elapsed_parts() {
        let mut s = ControlSchedule::from_samples(0.0, 0.01, (0..100).map(|j| DVector::from_vec(vec![j as f64])).collect());
        s.insert(Insertion { tau: 0.03, lambda: 0.05, u: vec![-1.0] });
        assert_eq!(s.control_at(0.05)[0], -1.0);
        assert_eq!(s.control_at(0.085)[0], 8.0);
        s.advance(0.1, &DVector::from_vec(vec![0.5]));
        assert_eq!(s.samples().len(), 100);
        assert_eq!(s.base(0)[0], 10.0);
        assert_eq!(s.base(99)[0], 0.5);
        assert!(s.insertions().is_empty());
        assert_eq!(s.control_at(0.1)[0], 10.0);
    }

    #[test]
    fn obstacle_penalty_gradient_matches_differences() {
        let cfg = ControllerConfig { obstacle_margin: 0.1, ..Default::default() };
        let p = ObstaclePenalty::new(
            vec![Obstacle { lo: vec![0.4, 0.4], hi: vec![0.6, 0.55] }],
            Some(vec![1.0, 1.0]),
            &cfg,
        );
        for s in [[0.35, 0.45], [0.45, 0.48], [0.65, 0.62], [-0.02, 0.5], [0.5, 1.03], [0.2, 0.2]] {
            let mut g = vec![0.0; 2];
            p.add_gradient(&s, &mut g);
            for i in 0..2 {
                let h = 1e-7;
                let mut a = s;
                let mut b = s;
                a[i] += h;
                b[i] -= h;
                let fd = (p.value(&a) - p.value(&b)) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-5, "{s:?}: {fd} vs {}", g[i]);
            }
        }
        assert_eq!(p.value(&[0.2, 0.2]), 0.0);
        assert!(p.value(&[0.5, 0.5]) > p.value(&[0.38, 0.5]));
    }

    #[test]
    fn memory_windows_and_recomputes() {
        let ctx = ctx();
        let cfg = ControllerConfig { memory: Some(0.3), ..Default::default() };
        let mut mem = ErgodicMemory::new(ctx.len(), &cfg);
        let di = AgentModel::double_integrator();
        let mut x = DVector::from_vec(vec![0.2, 0.3, 0.4, 0.1]);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut all = Vec::new();
        for i in 0..7 {
            let u = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            let sched = ControlSchedule::constant(i as f64 * 0.1, 0.01, 10, u);
            let piece = predict(&di, &x, &sched, 10).unwrap();
            mem.record(&ctx, &piece, &[vec![0, 1]]);
            x = piece.states.last().unwrap().clone();
            all.push(piece);
        }
        assert_relative_eq!(mem.window_length(), 0.3, epsilon = 1e-12);
        assert_eq!(mem.history_len(), 3 * 4);
        let mut direct = vec![0.0; ctx.len()];
        for piece in &all[4..] {
            integrate_path(&ctx, &piece.positions(&[0, 1]), 0.01, &mut direct);
        }
        for ((a, b), c) in mem.past_integral().iter().zip(&mem.recompute()).zip(&direct) {
            assert!((a - b).abs() < 1e-12 && (a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn accepted_insertions_decrease_the_cost() {
        let ctx = ctx();
        let phi = bimodal(&ctx);
        let cfg = ControllerConfig::default();
        let di = AgentModel::double_integrator();
        let obj = objective(&ctx, &phi, &cfg);
        let x0 = DVector::from_vec(vec![0.5, 0.2, 0.0, 0.0]);
        let out = control_step(&di, &x0, &zero_schedule(&di, &cfg, 0.0), &obj, &cfg).unwrap();
        assert!(out.accepted());
        assert!(out.cost_after < out.cost_before);
        assert!(out.predicted_delta < 0.0);
        let tau = out.tau.unwrap();
        assert!(tau < cfg.sample_time);
        assert!(tau + out.lambda <= cfg.sample_time + 1e-12);
        assert_eq!(out.schedule.insertions().len(), 1);
        assert_relative_eq!(obj.cost(&out.trajectory).unwrap(), out.cost_after);
    }

    #[test]
    fn control_step_is_deterministic() {
        let ctx = ctx();
        let phi = bimodal(&ctx);
        let cfg = ControllerConfig::default();
        let di = AgentModel::double_integrator();
        let obj = objective(&ctx, &phi, &cfg);
        let x0 = DVector::from_vec(vec![0.1, 0.8, 0.2, -0.3]);
        let a = control_step(&di, &x0, &zero_schedule(&di, &cfg, 0.0), &obj, &cfg).unwrap();
        let b = control_step(&di, &x0, &zero_schedule(&di, &cfg, 0.0), &obj, &cfg).unwrap();
        assert_eq!(a.schedule, b.schedule);
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.cost_after.to_bits(), b.cost_after.to_bits());
    }

    #[test]
    fn single_agent_covers_bimodal_target() {
        // closed loop with memory, 20 s
        let ctx = ctx();
        let phi = bimodal(&ctx);
        let cfg = ControllerConfig::default();
        let di = AgentModel::double_integrator();
        let mut mem = ErgodicMemory::new(ctx.len(), &cfg);
        let mut x = DVector::from_vec(vec![0.5, 0.1, 0.0, 0.0]);
        let mut sched = zero_schedule(&di, &cfg, 0.0);
        let mut history = vec![0.0; ctx.len()];
        let metric = |hist: &[f64], t: f64, x: &DVector<f64>| {
            let c: Vec<f64> = if t > 0.0 {
                hist.iter().map(|h| h / t).collect()
            } else {
                ctx.eval_all(&[x[0], x[1]]).unwrap()
            };
            ergodic_metric(&c, &phi, ctx.lambda(), 1.0).unwrap()
        };
        let initial = metric(&history, 0.0, &x);
        let nominal = di.nominal_control();
        for i in 0..200 {
            let t = i as f64 * cfg.sample_time;
            let w = mem.window_length();
            let obj = ErgodicObjective {
                ctx: &ctx,
                phi: &phi,
                q: cfg.q,
                total_time: w + cfg.horizon,
                share: 1.0,
                fixed: mem.past_integral().to_vec(),
                slots: vec![vec![0, 1]],
                penalty: None,
            };
            let out = control_step(&di, &x, &sched, &obj, &cfg).unwrap();
            let flown = Trajectory { t0: t, dt: cfg.dt, states: out.trajectory.states[..=10].to_vec() };
            mem.record(&ctx, &flown, &[vec![0, 1]]);
            integrate_path(&ctx, &flown.positions(&[0, 1]), cfg.dt, &mut history);
            x = flown.states.last().unwrap().clone();
            sched = out.schedule;
            sched.advance((i + 1) as f64 * cfg.sample_time, &nominal);
        }
        let last = metric(&history, 20.0, &x);
        assert!(last < 0.1 * initial, "metric {last} vs initial {initial}");
    }

    #[test]
    fn uniform_target_with_uniform_history_leaves_schedule() {
        // synthetic c_k = phi_k through the fixed part: uniform past and a
        // horizon whose share is zero
        let ctx = ctx();
        let f = SpatialField::uniform(ctx.domain().clone(), vec![50, 50]).unwrap();
        let phi = decompose(&f, &ctx).unwrap().0;
        let cfg = ControllerConfig::default();
        let di = AgentModel::double_integrator();
        let obj = ErgodicObjective {
            ctx: &ctx,
            phi: &phi,
            q: 1.0,
            total_time: 2.0,
            share: 0.0,
            fixed: phi.iter().map(|p| 2.0 * p).collect(),
            slots: vec![vec![0, 1]],
            penalty: None,
        };
        let sched = zero_schedule(&di, &cfg, 0.0);
        let out = control_step(&di, &DVector::from_vec(vec![0.3, 0.3, 0.1, 0.0]), &sched, &obj, &cfg).unwrap();
        assert!(!out.accepted());
        assert_eq!(out.schedule, sched);
    }
}
