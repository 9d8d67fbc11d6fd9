//! Control-affine agent models `x' = g(x) + h(x) u`.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Per-channel actuator limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlBound {
    pub min: f64,
    pub max: f64,
}

impl ControlBound {
    pub fn symmetric(limit: f64) -> Self {
        ControlBound { min: -limit, max: limit }
    }
}

/// Everything the controller needs from a model.
pub trait Dynamics: Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    /// Unactuated drift `g(x)`.
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Control response `h(x)`, `n x m`.
    fn response(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// `d f / d x` at `(x, u)`.
    fn jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    fn bounds(&self) -> Vec<ControlBound>;
    /// State indices of each agent's position in the search space. Single
    /// agents have one slot; stacked systems have one per member.
    fn search_slots(&self) -> Vec<Vec<usize>>;
    /// Control held when nothing better is scheduled.
    fn nominal_control(&self) -> DVector<f64> {
        DVector::zeros(self.control_dim())
    }
}

/// `f(x, u) = g(x) + h(x) u`. No saturation is applied.
pub fn eval_f(model: &dyn Dynamics, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(model.state_dim(), x.len())?;
    check_dim(model.control_dim(), u.len())?;
    Ok(f_unchecked(model, x, u))
}

fn f_unchecked(model: &dyn Dynamics, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut f = model.drift(x);
    f.gemv(1.0, &model.response(x), u, 1.0);
    f
}

/// Classical RK4 with `u` held over the step.
pub fn rk4_step(model: &dyn Dynamics, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> Result<DVector<f64>> {
    check_dim(model.state_dim(), x.len())?;
    check_dim(model.control_dim(), u.len())?;
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {dt}")));
    }
    let next = rk4_unchecked(model, x, u, dt);
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(Error::NonFinite { t: dt })
    }
}

pub(crate) fn rk4_unchecked(model: &dyn Dynamics, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> DVector<f64> {
    let k1 = f_unchecked(model, x, u);
    let k2 = f_unchecked(model, &(x + &k1 * (dt / 2.0)), u);
    let k3 = f_unchecked(model, &(x + &k2 * (dt / 2.0)), u);
    let k4 = f_unchecked(model, &(x + &k3 * dt), u);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

pub fn linearize(model: &dyn Dynamics, x: &DVector<f64>, u: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_dim(model.state_dim(), x.len())?;
    check_dim(model.control_dim(), u.len())?;
    Ok(model.jacobian(x, u))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrotorParams {
    pub mass: f64,
    /// Principal moments of inertia.
    pub inertia: [f64; 3],
    pub gravity: f64,
    pub max_thrust: f64,
    pub max_angular_accel: f64,
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        QuadrotorParams {
            mass: 1.0,
            inertia: [0.01, 0.01, 0.01],
            gravity: 9.81,
            max_thrust: 2.0 * 9.81,
            max_angular_accel: 20.0,
        }
    }
}

/// Agent models available to scenarios.
///
/// * `SingleIntegrator`: `x = (p1, p2)`, `u` is velocity.
/// * `DoubleIntegrator`: `x = (p1, p2, v1, v2)`, `u` is acceleration.
/// * `Quadrotor`: `x = (position, velocity, roll/pitch/yaw, body rates)`,
///   `u = (thrust, roll, pitch and yaw angular accelerations)`. Euler angles
///   follow the Z-Y-X convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AgentModel {
    SingleIntegrator { max_speed: f64 },
    DoubleIntegrator { max_accel: f64 },
    Quadrotor(QuadrotorParams),
}

impl AgentModel {
    pub fn single_integrator() -> Self {
        AgentModel::SingleIntegrator { max_speed: 1.0 }
    }

    pub fn double_integrator() -> Self {
        AgentModel::DoubleIntegrator { max_accel: 2.0 }
    }

    pub fn quadrotor() -> Self {
        AgentModel::Quadrotor(QuadrotorParams::default())
    }

    pub fn name(&self) -> &'static str {
        match self {
            AgentModel::SingleIntegrator { .. } => "single_integrator",
            AgentModel::DoubleIntegrator { .. } => "double_integrator",
            AgentModel::Quadrotor(_) => "quadrotor",
        }
    }

    /// A state at rest at planar position `(p1, p2)`; the quadrotor hovers at `altitude`.
    pub fn rest_state(&self, p1: f64, p2: f64, altitude: f64) -> DVector<f64> {
        let mut x = DVector::zeros(self.state_dim());
        x[0] = p1;
        x[1] = p2;
        if let AgentModel::Quadrotor(_) = self {
            x[2] = altitude;
        }
        x
    }
}

impl Dynamics for AgentModel {
    fn state_dim(&self) -> usize {
        match self {
            AgentModel::SingleIntegrator { .. } => 2,
            AgentModel::DoubleIntegrator { .. } => 4,
            AgentModel::Quadrotor(_) => 12,
        }
    }

    fn control_dim(&self) -> usize {
        match self {
            AgentModel::SingleIntegrator { .. } | AgentModel::DoubleIntegrator { .. } => 2,
            AgentModel::Quadrotor(_) => 4,
        }
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            AgentModel::SingleIntegrator { .. } => DVector::zeros(2),
            AgentModel::DoubleIntegrator { .. } => DVector::from_vec(vec![x[2], x[3], 0.0, 0.0]),
            AgentModel::Quadrotor(q) => quad_drift(q, x),
        }
    }

    fn response(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match self {
            AgentModel::SingleIntegrator { .. } => DMatrix::identity(2, 2),
            AgentModel::DoubleIntegrator { .. } => {
                let mut h = DMatrix::zeros(4, 2);
                h[(2, 0)] = 1.0;
                h[(3, 1)] = 1.0;
                h
            }
            AgentModel::Quadrotor(q) => {
                let mut h = DMatrix::zeros(12, 4);
                let a = thrust_axis(x[6], x[7], x[8]);
                for i in 0..3 {
                    h[(3 + i, 0)] = a[i] / q.mass;
                    h[(9 + i, 1 + i)] = 1.0;
                }
                h
            }
        }
    }

    fn jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        match self {
            AgentModel::SingleIntegrator { .. } => DMatrix::zeros(2, 2),
            AgentModel::DoubleIntegrator { .. } => {
                let mut j = DMatrix::zeros(4, 4);
                j[(0, 2)] = 1.0;
                j[(1, 3)] = 1.0;
                j
            }
            AgentModel::Quadrotor(q) => quad_jacobian(q, x, u),
        }
    }

    fn bounds(&self) -> Vec<ControlBound> {
        match self {
            AgentModel::SingleIntegrator { max_speed } => vec![ControlBound::symmetric(*max_speed); 2],
            AgentModel::DoubleIntegrator { max_accel } => vec![ControlBound::symmetric(*max_accel); 2],
            AgentModel::Quadrotor(q) => {
                let mut b = vec![ControlBound { min: 0.0, max: q.max_thrust }];
                b.extend(std::iter::repeat_n(ControlBound::symmetric(q.max_angular_accel), 3));
                b
            }
        }
    }

    fn search_slots(&self) -> Vec<Vec<usize>> {
        vec![vec![0, 1]]
    }

    fn nominal_control(&self) -> DVector<f64> {
        match self {
            AgentModel::Quadrotor(q) => DVector::from_vec(vec![q.mass * q.gravity, 0.0, 0.0, 0.0]),
            _ => DVector::zeros(self.control_dim()),
        }
    }
}

/// Body z-axis in the world frame, `R(roll, pitch, yaw) e3`.
fn thrust_axis(roll: f64, pitch: f64, yaw: f64) -> Vector3<f64> {
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    Vector3::new(cr * sp * cy + sr * sy, cr * sp * sy - sr * cy, cr * cp)
}

/// Columns are `d (R e3) / d roll`, `/ d pitch`, `/ d yaw`.
fn thrust_axis_partials(roll: f64, pitch: f64, yaw: f64) -> Matrix3<f64> {
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    Matrix3::new(
        -sr * sp * cy + cr * sy, cr * cp * cy, -cr * sp * sy + sr * cy,
        -sr * sp * sy - cr * cy, cr * cp * sy, cr * sp * cy + sr * sy,
        -sr * cp, -cr * sp, 0.0,
    )
}

/// Maps body rates to Euler angle rates.
fn euler_rate_map(roll: f64, pitch: f64) -> Matrix3<f64> {
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let tp = sp / cp;
    Matrix3::new(1.0, sr * tp, cr * tp, 0.0, cr, -sr, 0.0, sr / cp, cr / cp)
}

fn quad_drift(q: &QuadrotorParams, x: &DVector<f64>) -> DVector<f64> {
    let mut f = DVector::zeros(12);
    let omega = Vector3::new(x[9], x[10], x[11]);
    let rates = euler_rate_map(x[6], x[7]) * omega;
    let inertia = Vector3::from(q.inertia);
    let gyro = omega.cross(&inertia.component_mul(&omega)).component_div(&inertia);
    for i in 0..3 {
        f[i] = x[3 + i];
        f[6 + i] = rates[i];
        f[9 + i] = -gyro[i];
    }
    f[5] = -q.gravity;
    f
}

fn quad_jacobian(q: &QuadrotorParams, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(12, 12);
    let (roll, pitch, yaw) = (x[6], x[7], x[8]);
    let (p, qr, r) = (x[9], x[10], x[11]);
    for i in 0..3 {
        j[(i, 3 + i)] = 1.0;
    }
    let da = thrust_axis_partials(roll, pitch, yaw) * (u[0] / q.mass);
    for i in 0..3 {
        for k in 0..3 {
            j[(3 + i, 6 + k)] = da[(i, k)];
        }
    }
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let tp = sp / cp;
    let sec2 = 1.0 / (cp * cp);
    let a = sr * qr + cr * r;
    // d(W omega)/d roll, d pitch
    j[(6, 6)] = cr * tp * qr - sr * tp * r;
    j[(7, 6)] = -sr * qr - cr * r;
    j[(8, 6)] = (cr * qr - sr * r) / cp;
    j[(6, 7)] = a * sec2;
    j[(8, 7)] = a * sp * sec2;
    let w = euler_rate_map(roll, pitch);
    for i in 0..3 {
        for k in 0..3 {
            j[(6 + i, 9 + k)] = w[(i, k)];
        }
    }
    // -J^-1 d(omega x J omega)/d omega = -J^-1 ([omega]x J - [J omega]x)
    let inertia = Vector3::from(q.inertia);
    let omega = Vector3::new(p, qr, r);
    let jw = inertia.component_mul(&omega);
    let d = omega.cross_matrix() * Matrix3::from_diagonal(&inertia) - jw.cross_matrix();
    for i in 0..3 {
        for k in 0..3 {
            j[(9 + i, 9 + k)] = -d[(i, k)] / inertia[i];
        }
    }
    j
}

/// Block-diagonal stack of independent agents, state `(x_1, ..., x_N)`.
pub struct CollectiveDynamics<'a> {
    members: &'a [AgentModel],
    state_offsets: Vec<usize>,
    control_offsets: Vec<usize>,
}

impl<'a> CollectiveDynamics<'a> {
    pub fn new(members: &'a [AgentModel]) -> Self {
        let mut state_offsets = vec![0];
        let mut control_offsets = vec![0];
        for m in members {
            state_offsets.push(state_offsets.last().unwrap() + m.state_dim());
            control_offsets.push(control_offsets.last().unwrap() + m.control_dim());
        }
        CollectiveDynamics { members, state_offsets, control_offsets }
    }

    pub fn members(&self) -> &[AgentModel] {
        self.members
    }

    pub fn state_range(&self, i: usize) -> std::ops::Range<usize> {
        self.state_offsets[i]..self.state_offsets[i + 1]
    }

    pub fn control_range(&self, i: usize) -> std::ops::Range<usize> {
        self.control_offsets[i]..self.control_offsets[i + 1]
    }

    pub fn stack(parts: &[DVector<f64>]) -> DVector<f64> {
        DVector::from_iterator(parts.iter().map(|p| p.len()).sum(), parts.iter().flat_map(|p| p.iter().copied()))
    }

    pub fn split_state(&self, x: &DVector<f64>) -> Vec<DVector<f64>> {
        (0..self.members.len()).map(|i| x.rows_range(self.state_range(i)).into_owned()).collect()
    }

    pub fn split_control(&self, u: &DVector<f64>) -> Vec<DVector<f64>> {
        (0..self.members.len()).map(|i| u.rows_range(self.control_range(i)).into_owned()).collect()
    }
}

impl Dynamics for CollectiveDynamics<'_> {
    fn state_dim(&self) -> usize {
        *self.state_offsets.last().unwrap()
    }

    fn control_dim(&self) -> usize {
        *self.control_offsets.last().unwrap()
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        let parts: Vec<DVector<f64>> = self
            .members
            .iter()
            .enumerate()
            .map(|(i, m)| m.drift(&x.rows_range(self.state_range(i)).into_owned()))
            .collect();
        Self::stack(&parts)
    }

    fn response(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.state_dim(), self.control_dim());
        for (i, m) in self.members.iter().enumerate() {
            let (sr, cr) = (self.state_range(i), self.control_range(i));
            let block = m.response(&x.rows_range(sr.clone()).into_owned());
            h.view_mut((sr.start, cr.start), (sr.len(), cr.len())).copy_from(&block);
        }
        h
    }

    fn jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let n = self.state_dim();
        let mut j = DMatrix::zeros(n, n);
        for (i, m) in self.members.iter().enumerate() {
            let (sr, cr) = (self.state_range(i), self.control_range(i));
            let block = m.jacobian(
                &x.rows_range(sr.clone()).into_owned(),
                &u.rows_range(cr).into_owned(),
            );
            j.view_mut((sr.start, sr.start), (sr.len(), sr.len())).copy_from(&block);
        }
        j
    }

    fn bounds(&self) -> Vec<ControlBound> {
        self.members.iter().flat_map(|m| m.bounds()).collect()
    }

    fn search_slots(&self) -> Vec<Vec<usize>> {
        self.members
            .iter()
            .enumerate()
            .flat_map(|(i, m)| {
                let off = self.state_offsets[i];
                m.search_slots()
                    .into_iter()
                    .map(move |slot| slot.into_iter().map(|s| s + off).collect::<Vec<_>>())
            })
            .collect()
    }

    fn nominal_control(&self) -> DVector<f64> {
        let parts: Vec<DVector<f64>> = self.members.iter().map(|m| m.nominal_control()).collect();
        Self::stack(&parts)
    }
}
