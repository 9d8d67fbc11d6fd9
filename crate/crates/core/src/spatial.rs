//! Target densities on a regular grid and their cosine-basis coefficients.
//!
//! Grids store cell values with axis 0 varying fastest. Cell `i` along an
//! axis of length `L` split into `n` cells has its center at `(i + 0.5) L / n`.

use std::io::{BufRead, Write};
use std::ops::{Deref, DerefMut};

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::{BasisContext, BoxDomain};
use crate::error::{check_dim, Error, Result};
use crate::estimation::{SensorModel, TargetBelief};

/// Coefficients over a [`BasisContext`]'s index set, in the same order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CoefficientVector(pub Vec<f64>);

impl CoefficientVector {
    pub fn zeros(len: usize) -> Self {
        CoefficientVector(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &[f64]) {
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += alpha * b;
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        CoefficientVector(self.0.iter().map(|x| alpha * x).collect())
    }

    pub fn max_abs_diff(&self, other: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Deref for CoefficientVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for CoefficientVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for CoefficientVector {
    fn from(v: Vec<f64>) -> Self {
        CoefficientVector(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialField {
    domain: BoxDomain,
    resolution: Vec<usize>,
    values: Vec<f64>,
}

impl SpatialField {
    pub fn new(domain: BoxDomain, resolution: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        check_dim(domain.dim(), resolution.len())?;
        if resolution.iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument("grid resolution must be positive".into()));
        }
        check_dim(resolution.iter().product(), values.len())?;
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(
                "field values must be finite and non-negative".into(),
            ));
        }
        Ok(SpatialField { domain, resolution, values })
    }

    /// Samples `f` at every cell center. Negative samples are an error.
    pub fn from_fn(
        domain: BoxDomain,
        resolution: Vec<usize>,
        f: impl Fn(&[f64]) -> f64,
    ) -> Result<Self> {
        check_dim(domain.dim(), resolution.len())?;
        let count: usize = resolution.iter().product();
        let mut values = Vec::with_capacity(count);
        let mut s = vec![0.0; domain.dim()];
        for i in 0..count {
            cell_center(&domain, &resolution, i, &mut s);
            values.push(f(&s));
        }
        SpatialField::new(domain, resolution, values)
    }

    pub fn uniform(domain: BoxDomain, resolution: Vec<usize>) -> Result<Self> {
        let density = 1.0 / domain.volume();
        SpatialField::from_fn(domain, resolution, |_| density)
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cell_volume(&self) -> f64 {
        self.domain
            .lengths()
            .iter()
            .zip(&self.resolution)
            .map(|(l, n)| l / *n as f64)
            .product()
    }

    pub fn center(&self, cell: usize) -> Vec<f64> {
        let mut s = vec![0.0; self.domain.dim()];
        cell_center(&self.domain, &self.resolution, cell, &mut s);
        s
    }

    /// Grid coordinates of a flat cell index.
    pub fn cell_coords(&self, cell: usize) -> Vec<usize> {
        let mut rem = cell;
        self.resolution
            .iter()
            .map(|&n| {
                let c = rem % n;
                rem /= n;
                c
            })
            .collect()
    }

    /// Riemann sum of the field over the domain.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_volume()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        best
    }

    /// Value of the cell containing `s` (clamped into the box).
    pub fn value_at(&self, s: &[f64]) -> f64 {
        let mut idx = 0;
        let mut stride = 1;
        for ((x, l), n) in s.iter().zip(self.domain.lengths()).zip(&self.resolution) {
            let c = ((x / l * *n as f64).floor().max(0.0) as usize).min(n - 1);
            idx += c * stride;
            stride *= n;
        }
        self.values[idx]
    }
}

fn cell_center(domain: &BoxDomain, resolution: &[usize], cell: usize, out: &mut [f64]) {
    let mut rem = cell;
    for ((o, l), n) in out.iter_mut().zip(domain.lengths()).zip(resolution) {
        let c = rem % n;
        rem /= n;
        *o = (c as f64 + 0.5) * l / *n as f64;
    }
}

/// Rescales the field so its Riemann sum is one.
pub fn normalize(field: &SpatialField) -> Result<SpatialField> {
    let mass = field.mass();
    if !(mass > 0.0) {
        return Err(Error::EmptyField);
    }
    let scale = 1.0 / mass;
    Ok(SpatialField {
        domain: field.domain.clone(),
        resolution: field.resolution.clone(),
        values: field.values.iter().map(|v| v * scale).collect(),
    })
}

/// Midpoint-rule coefficients `phi_k = int phi(s) F_k(s) ds`.
pub fn decompose(field: &SpatialField, ctx: &BasisContext) -> Result<CoefficientVector> {
    if field.domain != *ctx.domain() {
        return Err(Error::DomainMismatch);
    }
    let vol = field.cell_volume();
    let mut coeffs = vec![0.0; ctx.len()];
    let mut basis = vec![0.0; ctx.len()];
    let mut s = vec![0.0; ctx.dim()];
    for (cell, &value) in field.values.iter().enumerate() {
        if value == 0.0 {
            continue;
        }
        cell_center(&field.domain, &field.resolution, cell, &mut s);
        ctx.eval_all_into(&s, &mut basis)?;
        let w = value * vol;
        for (c, b) in coeffs.iter_mut().zip(&basis) {
            *c += w * b;
        }
    }
    Ok(CoefficientVector(coeffs))
}

/// `sum_k coeffs_k F_k(s)`.
pub fn reconstruct(coeffs: &[f64], ctx: &BasisContext, s: &[f64]) -> Result<f64> {
    check_dim(ctx.len(), coeffs.len())?;
    let basis = ctx.eval_all(s)?;
    Ok(coeffs.iter().zip(&basis).map(|(c, b)| c * b).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub mean: Vec<f64>,
    /// Row-major `v x v` covariance.
    pub covariance: Vec<f64>,
    pub weight: f64,
}

impl GaussianComponent {
    pub fn isotropic(mean: Vec<f64>, variance: f64, weight: f64) -> Self {
        let v = mean.len();
        let mut covariance = vec![0.0; v * v];
        for i in 0..v {
            covariance[i * v + i] = variance;
        }
        GaussianComponent { mean, covariance, weight }
    }
}

/// Normalized Gaussian mixture sampled at cell centers.
pub fn gaussian_mixture(
    domain: &BoxDomain,
    resolution: &[usize],
    components: &[GaussianComponent],
) -> Result<SpatialField> {
    let v = domain.dim();
    if components.is_empty() {
        return Err(Error::InvalidArgument("mixture needs at least one component".into()));
    }
    let mut prepared = Vec::with_capacity(components.len());
    for c in components {
        check_dim(v, c.mean.len())?;
        check_dim(v * v, c.covariance.len())?;
        if !(c.weight >= 0.0 && c.weight.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad mixture weight {}", c.weight)));
        }
        let cov = DMatrix::from_row_slice(v, v, &c.covariance);
        if (&cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
            return Err(Error::DegenerateCovariance("covariance is not symmetric".into()));
        }
        let chol = cov.clone().cholesky().ok_or_else(|| {
            Error::DegenerateCovariance(format!("covariance {:?} is not positive definite", c.covariance))
        })?;
        let det = chol.l().diagonal().iter().map(|d| d * d).product::<f64>();
        let norm = 1.0 / ((2.0 * std::f64::consts::PI).powi(v as i32) * det).sqrt();
        prepared.push((DVector::from_column_slice(&c.mean), chol.inverse(), c.weight * norm));
    }
    if prepared.iter().all(|p| p.2 == 0.0) {
        return Err(Error::InvalidArgument("all mixture weights are zero".into()));
    }
    let field = SpatialField::from_fn(domain.clone(), resolution.to_vec(), |s| {
        let x = DVector::from_column_slice(s);
        prepared
            .iter()
            .map(|(mean, prec, w)| {
                if *w == 0.0 {
                    return 0.0;
                }
                let d = &x - mean;
                w * (-0.5 * d.dot(&(prec * &d))).exp()
            })
            .sum()
    })?;
    normalize(&field)
}

/// Region predicates used to carve corridors and obstacles out of a field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    Everywhere,
    /// Axis-aligned box `lo <= s <= hi`.
    Rect { lo: Vec<f64>, hi: Vec<f64> },
    Union { parts: Vec<Region> },
    Difference { base: Box<Region>, minus: Box<Region> },
}

impl Region {
    pub fn rect(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        Region::Rect { lo, hi }
    }

    pub fn contains(&self, s: &[f64]) -> bool {
        match self {
            Region::Everywhere => true,
            Region::Rect { lo, hi } => s
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(x, (a, b))| *x >= *a && *x <= *b),
            Region::Union { parts } => parts.iter().any(|p| p.contains(s)),
            Region::Difference { base, minus } => base.contains(s) && !minus.contains(s),
        }
    }
}

/// Zeroes every cell whose center falls outside `inside`, then renormalizes.
pub fn apply_mask(field: &SpatialField, inside: impl Fn(&[f64]) -> bool) -> Result<SpatialField> {
    let mut s = vec![0.0; field.domain.dim()];
    let mut removed = false;
    let values = field
        .values
        .iter()
        .enumerate()
        .map(|(cell, &v)| {
            cell_center(&field.domain, &field.resolution, cell, &mut s);
            if inside(&s) {
                v
            } else {
                removed |= v > 0.0;
                0.0
            }
        })
        .collect();
    if !removed {
        return Ok(field.clone());
    }
    let masked = SpatialField {
        domain: field.domain.clone(),
        resolution: field.resolution.clone(),
        values,
    };
    normalize(&masked)
}

/// How per-target information maps are merged into one density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EidCombination {
    /// Raw per-target maps are added, then the total is normalized.
    #[default]
    Sum,
    /// Each per-target map is normalized to unit mass before adding, so every
    /// target claims an equal share of the density.
    EqualShare,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EidOptions {
    pub samples: usize,
    pub seed: u64,
    pub combination: EidCombination,
}

impl Default for EidOptions {
    fn default() -> Self {
        EidOptions { samples: 100, seed: 0, combination: EidCombination::Sum }
    }
}

/// Expected information density for bearing-only sensing of stationary targets.
///
/// At each cell center `s` the expected Fisher information
/// `E_theta[H^T H] / sigma^2` is approximated with `opts.samples` draws from
/// each belief, where `H` is the bearing Jacobian with respect to the target
/// position and draws beyond the sensing range contribute nothing. The cell
/// value is the determinant of that matrix. All beliefs reuse the same
/// standard-normal draws.
pub fn eid(
    beliefs: &[TargetBelief],
    sensor: &SensorModel,
    domain: &BoxDomain,
    resolution: &[usize],
    opts: &EidOptions,
) -> Result<SpatialField> {
    check_dim(2, domain.dim())?;
    check_dim(2, resolution.len())?;
    if beliefs.is_empty() {
        return Err(Error::InvalidArgument("EID needs at least one target belief".into()));
    }
    if !(sensor.noise_var > 0.0) {
        return Err(Error::DegenerateCovariance("sensor noise variance must be positive".into()));
    }
    if opts.samples == 0 {
        return Err(Error::InvalidArgument("EID needs at least one sample".into()));
    }
    let count = resolution[0] * resolution[1];
    let mut total = vec![0.0; count];
    for belief in beliefs {
        let draws = sample_belief(belief, opts.samples, opts.seed)?;
        let map = information_map(&draws, sensor, domain, resolution);
        let scale = match opts.combination {
            EidCombination::Sum => 1.0,
            EidCombination::EqualShare => {
                let s: f64 = map.iter().sum();
                if s > 0.0 {
                    1.0 / s
                } else {
                    0.0
                }
            }
        };
        for (acc, m) in total.iter_mut().zip(&map) {
            *acc += scale * m;
        }
    }
    let field = SpatialField::new(domain.clone(), resolution.to_vec(), total)?;
    normalize(&field)
}

/// Draws in sign-flipped quadruples `(+-z_x, +-z_y)`, so the sample set keeps
/// the mirror symmetries of an axis-aligned belief. `n` is rounded up to a
/// multiple of four.
fn sample_belief(belief: &TargetBelief, n: usize, seed: u64) -> Result<Vec<Vector2<f64>>> {
    let chol = belief
        .covariance
        .cholesky()
        .ok_or_else(|| Error::DegenerateCovariance("belief covariance is not SPD".into()))?;
    let l = chol.l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n.div_ceil(4) * 4);
    for _ in 0..n.div_ceil(4) {
        let (a, b): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
        for z in [Vector2::new(a, b), Vector2::new(-a, b), Vector2::new(a, -b), Vector2::new(-a, -b)] {
            out.push(belief.mean + l * z);
        }
    }
    Ok(out)
}

fn information_map(
    draws: &[Vector2<f64>],
    sensor: &SensorModel,
    domain: &BoxDomain,
    resolution: &[usize],
) -> Vec<f64> {
    let (nx, ny) = (resolution[0], resolution[1]);
    let (lx, ly) = (domain.lengths()[0], domain.lengths()[1]);
    let inv_m = 1.0 / (draws.len() as f64 * sensor.noise_var);
    let min_sq = sensor.min_range * sensor.min_range;
    let range_sq = sensor.range * sensor.range;
    let row = |j: usize| -> Vec<f64> {
        let y = (j as f64 + 0.5) * ly / ny as f64;
        (0..nx)
            .map(|i| {
                let x = (i as f64 + 0.5) * lx / nx as f64;
                let mut fim = Matrix2::zeros();
                for th in draws {
                    let (dx, dy) = (th.x - x, th.y - y);
                    let d2 = dx * dx + dy * dy;
                    if d2 > range_sq {
                        continue;
                    }
                    let d2 = d2.max(min_sq);
                    let h = Vector2::new(-dy / d2, dx / d2);
                    fim += h * h.transpose();
                }
                (fim * inv_m).determinant().max(0.0)
            })
            .collect()
    };
    #[cfg(feature = "parallel")]
    let rows: Vec<Vec<f64>> = {
        use rayon::prelude::*;
        (0..ny).into_par_iter().map(row).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<Vec<f64>> = (0..ny).map(row).collect();
    rows.concat()
}

/// Writes the field as CSV: a header row, a row of `v, lengths.., resolution..`,
/// then the values in rows of `resolution[0]` entries.
pub fn write_csv(field: &SpatialField, mut w: impl Write) -> Result<()> {
    let v = field.domain.dim();
    let mut header = vec!["v".to_string()];
    header.extend((1..=v).map(|i| format!("L{i}")));
    header.extend((1..=v).map(|i| format!("n{i}")));
    writeln!(w, "{}", header.join(","))?;
    let mut meta = vec![v.to_string()];
    meta.extend(field.domain.lengths().iter().map(|l| format!("{l:?}")));
    meta.extend(field.resolution.iter().map(|n| n.to_string()));
    writeln!(w, "{}", meta.join(","))?;
    for row in field.values.chunks(field.resolution[0]) {
        let line: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn read_csv(r: impl BufRead) -> Result<SpatialField> {
    let mut lines = r.lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Parse("unexpected end of field CSV".into()))?
            .map_err(Error::from)
    };
    let _header = next()?;
    let meta = next()?;
    let parts: Vec<&str> = meta.split(',').map(str::trim).collect();
    let v: usize = parts
        .first()
        .and_then(|p| p.parse().ok())
        .ok_or_else(|| Error::Parse("missing dimension in field CSV".into()))?;
    if parts.len() != 1 + 2 * v {
        return Err(Error::Parse(format!("expected {} metadata columns", 1 + 2 * v)));
    }
    let parse_f = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("{s}: {e}")));
    let lengths = parts[1..=v].iter().map(|s| parse_f(s)).collect::<Result<Vec<_>>>()?;
    let resolution = parts[v + 1..]
        .iter()
        .map(|s| s.parse::<usize>().map_err(|e| Error::Parse(format!("{s}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut values = Vec::new();
    loop {
        match next() {
            Ok(line) if line.trim().is_empty() => continue,
            Ok(line) => {
                for s in line.split(',') {
                    values.push(parse_f(s.trim())?);
                }
            }
            Err(Error::Parse(_)) => break,
            Err(e) => return Err(e),
        }
    }
    SpatialField::new(BoxDomain::new(lengths)?, resolution, values)
}
