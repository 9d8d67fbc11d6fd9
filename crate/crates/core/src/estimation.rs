//! Bearing-only sensing of stationary planar targets, per-agent EKF
//! corrections and information-form belief fusion over the network.

use std::f64::consts::PI;

use nalgebra::{Matrix2, RowVector2, Vector2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::basis::BoxDomain;
use crate::error::{Error, Result};
use crate::network::{consensus_round, ConsensusMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    /// Bearing noise variance (rad^2).
    pub noise_var: f64,
    /// Sensing radius (m); targets farther away are not observed.
    pub range: f64,
    /// Ranges below this are floored when forming bearing Jacobians for the
    /// information density, which is otherwise singular at the target.
    #[serde(default = "default_min_range")]
    pub min_range: f64,
}

fn default_min_range() -> f64 {
    1e-3
}

impl SensorModel {
    pub fn new(noise_var: f64, range: f64) -> Result<Self> {
        let s = SensorModel { noise_var, range, min_range: default_min_range() };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sensor noise variance must be positive, got {}",
                self.noise_var
            )));
        }
        if !(self.range > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sensing range must be positive, got {}",
                self.range
            )));
        }
        if !(self.min_range >= 0.0) {
            return Err(Error::InvalidArgument("minimum range must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetBelief {
    pub mean: Vector2<f64>,
    pub covariance: Matrix2<f64>,
}

impl TargetBelief {
    pub fn new(mean: Vector2<f64>, covariance: Matrix2<f64>) -> Result<Self> {
        let b = TargetBelief { mean, covariance };
        if !is_spd(&covariance) || !mean.iter().all(|m| m.is_finite()) {
            return Err(Error::NotPositiveDefinite(format!("{covariance:?}")));
        }
        Ok(b)
    }

    /// Moment-matched Gaussian for a uniform prior over a planar box.
    pub fn uniform_prior(domain: &BoxDomain) -> Self {
        let l = domain.lengths();
        TargetBelief {
            mean: Vector2::new(l[0] / 2.0, l[1] / 2.0),
            covariance: Matrix2::new(l[0] * l[0] / 12.0, 0.0, 0.0, l[1] * l[1] / 12.0),
        }
    }

    /// Belief after a first detection: the target lies somewhere along the
    /// measured ray within sensing range.
    pub fn from_first_bearing(position: &Vector2<f64>, bearing: f64, sensor: &SensorModel) -> Self {
        let half = sensor.range / 2.0;
        let dir = Vector2::new(bearing.cos(), bearing.sin());
        let normal = Vector2::new(-dir.y, dir.x);
        let along = sensor.range * sensor.range / 12.0;
        let across = sensor.noise_var * half * half;
        TargetBelief {
            mean: position + dir * half,
            covariance: dir * dir.transpose() * along + normal * normal.transpose() * across,
        }
    }

    pub fn error(&self, truth: &Vector2<f64>) -> f64 {
        (self.mean - truth).norm()
    }
}

fn is_spd(m: &Matrix2<f64>) -> bool {
    (m[(0, 1)] - m[(1, 0)]).abs() <= 1e-12 * m.amax().max(1e-300)
        && m[(0, 0)] > 0.0
        && m.determinant() > 0.0
        && m.iter().all(|v| v.is_finite())
}

fn symmetrize(m: &Matrix2<f64>) -> Matrix2<f64> {
    (m + m.transpose()) * 0.5
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Noise-free bearing from `position` to `target`.
pub fn bearing(position: &Vector2<f64>, target: &Vector2<f64>) -> f64 {
    let d = target - position;
    d.y.atan2(d.x)
}

/// `d bearing / d target` evaluated at `target`.
pub fn bearing_jacobian(position: &Vector2<f64>, target: &Vector2<f64>) -> Result<RowVector2<f64>> {
    let d = target - position;
    let r2 = d.norm_squared();
    if r2.sqrt() < 1e-9 {
        return Err(Error::DegenerateGeometry { range: r2.sqrt() });
    }
    Ok(RowVector2::new(-d.y / r2, d.x / r2))
}

/// One noisy bearing, or `None` when the target is out of range.
pub fn measure(
    sensor: &SensorModel,
    position: &Vector2<f64>,
    target: &Vector2<f64>,
    rng: &mut impl Rng,
) -> Result<Option<f64>> {
    let d = target - position;
    let r = d.norm();
    if r == 0.0 {
        return Err(Error::CoincidentPositions);
    }
    if r > sensor.range {
        return Ok(None);
    }
    let noise = if sensor.noise_var > 0.0 {
        Normal::new(0.0, sensor.noise_var.sqrt())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .sample(rng)
    } else {
        0.0
    };
    Ok(Some(wrap_angle(d.y.atan2(d.x) + noise)))
}

/// EKF correction with one bearing. Targets are stationary, so there is no
/// prediction step.
pub fn ekf_update(
    belief: &TargetBelief,
    measurement: f64,
    position: &Vector2<f64>,
    sensor: &SensorModel,
) -> Result<TargetBelief> {
    let h = bearing_jacobian(position, &belief.mean)?;
    let predicted = bearing(position, &belief.mean);
    let innovation = wrap_angle(measurement - predicted);
    let p = belief.covariance;
    let s = (h * p * h.transpose())[(0, 0)] + sensor.noise_var;
    let k = p * h.transpose() / s;
    let mean = belief.mean + k * innovation;
    // Joseph form keeps the covariance symmetric positive definite
    let i_kh = Matrix2::identity() - k * h;
    let mut cov = symmetrize(&(i_kh * p * i_kh.transpose() + k * k.transpose() * sensor.noise_var));
    if !is_spd(&cov) {
        cov += Matrix2::identity() * 1e-12;
    }
    Ok(TargetBelief { mean, covariance: cov })
}

/// Information-form consensus over one target's per-agent beliefs.
///
/// Each agent's `(Sigma^-1, Sigma^-1 mean)` is flattened, averaged with
/// `rounds` consensus rounds, and converted back.
pub fn fuse_beliefs(
    beliefs: &[TargetBelief],
    p: &ConsensusMatrix,
    rounds: usize,
) -> Result<Vec<TargetBelief>> {
    let mut info: Vec<Vec<f64>> = beliefs
        .iter()
        .map(|b| {
            let y = b
                .covariance
                .try_inverse()
                .ok_or_else(|| Error::NotPositiveDefinite("belief covariance is singular".into()))?;
            let eta = y * b.mean;
            Ok(vec![y[(0, 0)], y[(0, 1)], y[(1, 0)], y[(1, 1)], eta.x, eta.y])
        })
        .collect::<Result<_>>()?;
    for _ in 0..rounds {
        info = consensus_round(&info, p)?;
    }
    info.into_iter()
        .map(|v| {
            let mut y = symmetrize(&Matrix2::new(v[0], v[1], v[2], v[3]));
            if y.determinant() <= 0.0 {
                y += Matrix2::identity() * 1e-12;
            }
            let cov = symmetrize(
                &y.try_inverse()
                    .ok_or_else(|| Error::NotPositiveDefinite("fused information is singular".into()))?,
            );
            Ok(TargetBelief { mean: cov * Vector2::new(v[4], v[5]), covariance: cov })
        })
        .collect()
}
