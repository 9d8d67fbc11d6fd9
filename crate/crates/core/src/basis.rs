//! Cosine basis over a box `[0, L_1] x ... x [0, L_v]`.
//!
//! Basis functions are indexed by multi-indices `k` in `{0..=K}^v`, stored in
//! lexicographic order with the last axis varying fastest. Each function is
//!
//! ```text
//! F_k(s) = (1 / h_k) * prod_i cos(k_i * pi * s_i / L_i)
//! ```
//!
//! where `h_k` makes `F_k` unit-norm on the box, and every coefficient carries
//! the weight `Lambda_k = (1 + |k|^2)^(-(v + 1) / 2)`.
//!
//! Points outside the box are clamped coordinate-wise before evaluation, for
//! both values and gradients.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoxDomainRepr", into = "BoxDomainRepr")]
pub struct BoxDomain {
    lengths: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BoxDomainRepr {
    lengths: Vec<f64>,
}

impl TryFrom<BoxDomainRepr> for BoxDomain {
    type Error = Error;

    fn try_from(r: BoxDomainRepr) -> Result<Self> {
        BoxDomain::new(r.lengths)
    }
}

impl From<BoxDomain> for BoxDomainRepr {
    fn from(d: BoxDomain) -> Self {
        BoxDomainRepr { lengths: d.lengths }
    }
}

impl BoxDomain {
    pub fn new(lengths: Vec<f64>) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::InvalidDomain("domain needs at least one axis".into()));
        }
        if let Some(l) = lengths.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::InvalidDomain(format!(
                "axis length must be positive and finite, got {l}"
            )));
        }
        Ok(BoxDomain { lengths })
    }

    /// The unit box `[0, 1]^v`.
    pub fn unit(v: usize) -> Self {
        BoxDomain { lengths: vec![1.0; v.max(1)] }
    }

    pub fn dim(&self) -> usize {
        self.lengths.len()
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn volume(&self) -> f64 {
        self.lengths.iter().product()
    }

    pub fn contains(&self, s: &[f64]) -> bool {
        s.iter()
            .zip(&self.lengths)
            .all(|(x, l)| *x >= 0.0 && *x <= *l)
    }

    pub fn clamp_into(&self, s: &[f64], out: &mut [f64]) {
        for ((o, x), l) in out.iter_mut().zip(s).zip(&self.lengths) {
            *o = x.clamp(0.0, *l);
        }
    }

    pub fn clamp(&self, s: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.clamp_into(s, &mut out);
        out
    }
}

/// All multi-indices in `{0..=order}^dim`, lexicographic, zero index first.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierIndexSet {
    dim: usize,
    order: usize,
    flat: Vec<usize>,
}

impl FourierIndexSet {
    pub fn new(dim: usize, order: usize) -> Self {
        let per_axis = order + 1;
        let count = per_axis.pow(dim as u32);
        let mut flat = Vec::with_capacity(count * dim);
        let mut k = vec![0usize; dim];
        for _ in 0..count {
            flat.extend_from_slice(&k);
            // odometer increment, last axis fastest
            for axis in (0..dim).rev() {
                k[axis] += 1;
                if k[axis] <= order {
                    break;
                }
                k[axis] = 0;
            }
        }
        FourierIndexSet { dim, order, flat }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.flat.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn get(&self, i: usize) -> &[usize] {
        &self.flat[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.flat.chunks_exact(self.dim)
    }

    pub fn position(&self, k: &[usize]) -> Option<usize> {
        if k.len() != self.dim || k.iter().any(|&ki| ki > self.order) {
            return None;
        }
        Some(k.iter().fold(0, |acc, &ki| acc * (self.order + 1) + ki))
    }
}

/// Normalizer `h_k` such that `F_k` has unit L2 norm over the box.
pub fn normalizer(lengths: &[f64], k: &[usize]) -> f64 {
    k.iter()
        .zip(lengths)
        .map(|(&ki, &l)| if ki == 0 { l } else { l / 2.0 })
        .product::<f64>()
        .sqrt()
}

/// Spectral weight `Lambda_k = (1 + |k|^2)^(-(v + 1) / 2)`.
pub fn weight(k: &[usize]) -> f64 {
    let norm_sq: f64 = k.iter().map(|&ki| (ki * ki) as f64).sum();
    (1.0 + norm_sq).powf(-(k.len() as f64 + 1.0) / 2.0)
}

/// Precomputed basis constants. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisContext {
    domain: BoxDomain,
    indices: FourierIndexSet,
    h: Vec<f64>,
    lambda: Vec<f64>,
    // k_i * pi / L_i, laid out per axis: omega[axis * (order + 1) + k_i]
    omega: Vec<f64>,
}

impl BasisContext {
    pub fn new(domain: BoxDomain, order: usize) -> Self {
        let v = domain.dim();
        let indices = FourierIndexSet::new(v, order);
        let h = indices.iter().map(|k| normalizer(domain.lengths(), k)).collect();
        let lambda = indices.iter().map(weight).collect();
        let mut omega = Vec::with_capacity(v * (order + 1));
        for l in domain.lengths() {
            omega.extend((0..=order).map(|ki| ki as f64 * PI / l));
        }
        BasisContext { domain, indices, h, lambda, omega }
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn indices(&self) -> &FourierIndexSet {
        &self.indices
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn order(&self) -> usize {
        self.indices.order()
    }

    /// Number of coefficients, `(K + 1)^v`.
    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    fn omega(&self, axis: usize, ki: usize) -> f64 {
        self.omega[axis * (self.order() + 1) + ki]
    }

    fn position_of(&self, k: &[usize]) -> Result<usize> {
        check_dim(self.dim(), k.len())?;
        self.indices.position(k).ok_or_else(|| {
            Error::InvalidArgument(format!("index {k:?} exceeds truncation {}", self.order()))
        })
    }

    /// `F_k(s)` for a single multi-index.
    pub fn eval(&self, k: &[usize], s: &[f64]) -> Result<f64> {
        let pos = self.position_of(k)?;
        check_dim(self.dim(), s.len())?;
        let s = self.domain.clamp(s);
        let prod: f64 = k
            .iter()
            .enumerate()
            .map(|(i, &ki)| (self.omega(i, ki) * s[i]).cos())
            .product();
        Ok(prod / self.h[pos])
    }

    /// `dF_k/ds` for a single multi-index.
    pub fn grad(&self, k: &[usize], s: &[f64]) -> Result<Vec<f64>> {
        let pos = self.position_of(k)?;
        check_dim(self.dim(), s.len())?;
        let s = self.domain.clamp(s);
        let v = self.dim();
        let cosines: Vec<f64> = (0..v).map(|i| (self.omega(i, k[i]) * s[i]).cos()).collect();
        Ok((0..v)
            .map(|i| {
                let w = self.omega(i, k[i]);
                let others: f64 = (0..v).filter(|&j| j != i).map(|j| cosines[j]).product();
                -w * (w * s[i]).sin() * others / self.h[pos]
            })
            .collect())
    }

    /// Per-axis tables `cos(omega * s_i)` and `sin(omega * s_i)` at the clamped point.
    fn tables(&self, s: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let per = self.order() + 1;
        let mut c = vec![0.0; self.dim() * per];
        let mut sn = vec![0.0; self.dim() * per];
        for (axis, (&x, &l)) in s.iter().zip(self.domain.lengths()).enumerate() {
            let x = x.clamp(0.0, l);
            for ki in 0..per {
                let (sv, cv) = (self.omega(axis, ki) * x).sin_cos();
                c[axis * per + ki] = cv;
                sn[axis * per + ki] = sv;
            }
        }
        (c, sn)
    }

    /// Writes `F_k(s)` for every index into `out`.
    pub fn eval_all_into(&self, s: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.dim(), s.len())?;
        check_dim(self.len(), out.len())?;
        let per = self.order() + 1;
        let (c, _) = self.tables(s);
        for (n, k) in self.indices.iter().enumerate() {
            let mut p = 1.0;
            for (axis, &ki) in k.iter().enumerate() {
                p *= c[axis * per + ki];
            }
            out[n] = p / self.h[n];
        }
        Ok(())
    }

    pub fn eval_all(&self, s: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.len()];
        self.eval_all_into(s, &mut out)?;
        Ok(out)
    }

    /// `sum_k weights[k] * dF_k/ds`, the only gradient form the controller needs.
    pub fn weighted_grad(&self, s: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), s.len())?;
        check_dim(self.len(), weights.len())?;
        let v = self.dim();
        let per = self.order() + 1;
        let (c, sn) = self.tables(s);
        let mut g = vec![0.0; v];
        for (n, k) in self.indices.iter().enumerate() {
            let w = weights[n] / self.h[n];
            if w == 0.0 {
                continue;
            }
            for i in 0..v {
                let mut p = -self.omega(i, k[i]) * sn[i * per + k[i]];
                for (j, &kj) in k.iter().enumerate() {
                    if j != i {
                        p *= c[j * per + kj];
                    }
                }
                g[i] += w * p;
            }
        }
        Ok(g)
    }

    /// Adds `int_0^duration F_k(x(t)) dt` to `acc` for every index, where `x`
    /// moves linearly from `a` to `b`. Exact for the linear path, including
    /// stretches outside the box (which are clamped onto its faces).
    pub fn integrate_segment(&self, a: &[f64], b: &[f64], duration: f64, acc: &mut [f64]) {
        debug_assert_eq!(a.len(), self.dim());
        debug_assert_eq!(b.len(), self.dim());
        debug_assert_eq!(acc.len(), self.len());
        if duration <= 0.0 {
            return;
        }
        let lengths = self.domain.lengths();
        // Clamping is piecewise linear in t; split where any coordinate crosses a face.
        let mut cuts = vec![0.0, 1.0];
        for i in 0..self.dim() {
            let d = b[i] - a[i];
            if d != 0.0 {
                for face in [0.0, lengths[i]] {
                    let r = (face - a[i]) / d;
                    if r > 0.0 && r < 1.0 {
                        cuts.push(r);
                    }
                }
            }
        }
        if cuts.len() > 2 {
            cuts.sort_by(|x, y| x.total_cmp(y));
        }
        let lerp = |r: f64| -> Vec<f64> {
            a.iter()
                .zip(b)
                .zip(lengths)
                .map(|((&p, &q), &l)| (p + (q - p) * r).clamp(0.0, l))
                .collect()
        };
        for w in cuts.windows(2) {
            let span = (w[1] - w[0]) * duration;
            if span > 0.0 {
                self.integrate_inside(&lerp(w[0]), &lerp(w[1]), span, acc);
            }
        }
    }

    fn integrate_inside(&self, a: &[f64], b: &[f64], duration: f64, acc: &mut [f64]) {
        let v = self.dim();
        let signs = 1usize << (v - 1);
        let scale = 1.0 / (signs as f64);
        let mut alpha = vec![0.0; v];
        let mut beta = vec![0.0; v];
        for (n, k) in self.indices.iter().enumerate() {
            for i in 0..v {
                let w = self.omega(i, k[i]);
                alpha[i] = w * a[i];
                beta[i] = w * (b[i] - a[i]) / duration;
            }
            // prod_i cos(theta_i) = 2^(1-v) * sum over sign patterns of cos(sum_i s_i theta_i)
            let mut total = 0.0;
            for mask in 0..signs {
                let (mut al, mut be) = (alpha[0], beta[0]);
                for i in 1..v {
                    if mask & (1 << (i - 1)) != 0 {
                        al -= alpha[i];
                        be -= beta[i];
                    } else {
                        al += alpha[i];
                        be += beta[i];
                    }
                }
                total += integral_cos_linear(al, be, duration);
            }
            acc[n] += scale * total / self.h[n];
        }
    }
}

/// `int_0^d cos(alpha + beta t) dt`, stable as `beta -> 0`.
fn integral_cos_linear(alpha: f64, beta: f64, d: f64) -> f64 {
    let half = 0.5 * beta * d;
    let sinc = if half.abs() < 1e-4 {
        1.0 - half * half / 6.0
    } else {
        half.sin() / half
    };
    d * (alpha + half).cos() * sinc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit2(order: usize) -> BasisContext {
        BasisContext::new(BoxDomain::unit(2), order)
    }

    #[test]
    fn rejects_bad_domains() {
        assert!(BoxDomain::new(vec![]).is_err());
        assert!(BoxDomain::new(vec![1.0, 0.0]).is_err());
        assert!(BoxDomain::new(vec![-1.0]).is_err());
        assert!(BoxDomain::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn index_set_order() {
        let set = FourierIndexSet::new(2, 2);
        let all: Vec<Vec<usize>> = set.iter().map(|k| k.to_vec()).collect();
        assert_eq!(all.len(), 9);
        assert_eq!(all[0], vec![0, 0]);
        assert_eq!(all[1], vec![0, 1]);
        assert_eq!(all[3], vec![1, 0]);
        assert_eq!(all[8], vec![2, 2]);
        for (i, k) in set.iter().enumerate() {
            assert_eq!(set.position(k), Some(i));
        }
        assert_eq!(set.position(&[3, 0]), None);
    }

    #[test]
    fn constants_match_examples() {
        let ctx = unit2(5);
        assert_eq!(ctx.len(), 36);
        assert_eq!(ctx.h()[0], 1.0);
        assert_eq!(ctx.lambda()[0], 1.0);
        let k10 = ctx.indices().position(&[1, 0]).unwrap();
        assert_relative_eq!(ctx.lambda()[k10], 2f64.powf(-1.5), max_relative = 1e-12);
        assert_relative_eq!(ctx.lambda()[k10], 0.353553, epsilon = 1e-6);

        let one_d = BasisContext::new(BoxDomain::new(vec![2.0]).unwrap(), 3);
        assert_relative_eq!(one_d.h()[3], 1.0, max_relative = 1e-15);
    }

    #[test]
    fn eval_examples() {
        let ctx = unit2(3);
        let s = [0.37, 0.81];
        assert_eq!(ctx.eval(&[0, 0], &s).unwrap(), 1.0 / ctx.h()[0]);

        let one_d = BasisContext::new(BoxDomain::unit(1), 2);
        assert!(one_d.eval(&[1], &[0.5]).unwrap().abs() < 1e-15);

        let pos = ctx.indices().position(&[1, 1]).unwrap();
        let got = ctx.eval(&[1, 1], &[0.25, 0.25]).unwrap();
        assert_relative_eq!(got, 0.5 / ctx.h()[pos], max_relative = 1e-14);
    }

    #[test]
    fn eval_rejects_dimension_mismatch() {
        let ctx = unit2(2);
        assert!(matches!(
            ctx.eval(&[0, 0], &[0.1]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(ctx.grad(&[0], &[0.1, 0.2]).is_err());
        assert!(ctx.eval(&[9, 0], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn grad_examples() {
        let ctx = unit2(4);
        for k in ctx.indices().iter() {
            assert!(ctx.grad(k, &[0.0, 0.0]).unwrap().iter().all(|g| *g == 0.0));
        }
        assert!(ctx.grad(&[0, 0], &[0.3, 0.6]).unwrap().iter().all(|g| *g == 0.0));

        let one_d = BasisContext::new(BoxDomain::unit(1), 1);
        let g = one_d.grad(&[1], &[0.25]).unwrap();
        let expected = -(PI / one_d.h()[1]) * (PI / 4.0).sin();
        assert_relative_eq!(g[0], expected, max_relative = 1e-14);
        let step = 1e-6;
        let fd = (one_d.eval(&[1], &[0.25 + step]).unwrap()
            - one_d.eval(&[1], &[0.25 - step]).unwrap())
            / (2.0 * step);
        assert_relative_eq!(g[0], fd, max_relative = 1e-6);
    }

    #[test]
    fn clamps_points_outside() {
        let ctx = unit2(3);
        let outside = ctx.eval(&[1, 2], &[-0.5, 1.7]).unwrap();
        let edge = ctx.eval(&[1, 2], &[0.0, 1.0]).unwrap();
        assert_eq!(outside, edge);
    }

    #[test]
    fn eval_all_and_weighted_grad_agree_with_single() {
        let ctx = BasisContext::new(BoxDomain::new(vec![1.5, 0.8]).unwrap(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let s = [rng.random_range(0.0..1.5), rng.random_range(0.0..0.8)];
            let all = ctx.eval_all(&s).unwrap();
            let w: Vec<f64> = (0..ctx.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut expect = [0.0; 2];
            for (n, k) in ctx.indices().iter().enumerate() {
                assert_relative_eq!(all[n], ctx.eval(k, &s).unwrap(), epsilon = 1e-13);
                let g = ctx.grad(k, &s).unwrap();
                expect[0] += w[n] * g[0];
                expect[1] += w[n] * g[1];
            }
            let got = ctx.weighted_grad(&s, &w).unwrap();
            assert_relative_eq!(got[0], expect[0], epsilon = 1e-11);
            assert_relative_eq!(got[1], expect[1], epsilon = 1e-11);
        }
    }

    /// Dense composite Simpson along the linear path, independent of the closed form.
    fn simpson_path(ctx: &BasisContext, a: &[f64], b: &[f64], d: f64, n: usize) -> Vec<f64> {
        let mut acc = vec![0.0; ctx.len()];
        let hstep = d / n as f64;
        for i in 0..=n {
            let r = i as f64 / n as f64;
            let p: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + (y - x) * r).collect();
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let f = ctx.eval_all(&p).unwrap();
            for (o, fv) in acc.iter_mut().zip(f) {
                *o += w * fv * hstep / 3.0;
            }
        }
        acc
    }

    #[test]
    fn segment_integral_matches_dense_quadrature() {
        let ctx = BasisContext::new(BoxDomain::new(vec![1.0, 1.3]).unwrap(), 5);
        let cases: [([f64; 2], [f64; 2]); 4] = [
            ([0.1, 0.2], [0.7, 1.1]),
            ([0.5, 0.5], [0.5, 0.5]),
            ([0.3, 0.9], [0.3, 0.1]),
            // leaves the box through two faces
            ([0.6, 0.4], [1.4, -0.3]),
        ];
        for (a, b) in cases {
            let mut got = vec![0.0; ctx.len()];
            ctx.integrate_segment(&a, &b, 0.37, &mut got);
            let oracle = simpson_path(&ctx, &a, &b, 0.37, 20_000);
            for (g, o) in got.iter().zip(&oracle) {
                assert!((g - o).abs() < 1e-9, "{g} vs {o} for {a:?}->{b:?}");
            }
        }
    }

    #[test]
    fn three_dimensional_segment() {
        let ctx = BasisContext::new(BoxDomain::new(vec![1.0, 2.0, 0.5]).unwrap(), 2);
        let (a, b) = ([0.1, 0.3, 0.05], [0.8, 1.7, 0.4]);
        let mut got = vec![0.0; ctx.len()];
        ctx.integrate_segment(&a, &b, 1.1, &mut got);
        let oracle = simpson_path(&ctx, &a, &b, 1.1, 20_000);
        for (g, o) in got.iter().zip(&oracle) {
            assert!((g - o).abs() < 1e-9);
        }
    }
}
