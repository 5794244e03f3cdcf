//! Bounded axis-aligned Gaussian mixtures.

use libm::erfc;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Weight sums are accepted within this tolerance and renormalized.
pub const WEIGHT_RENORM_TOL: f64 = 1e-9;
/// Weights of a constructed model sum to one within this tolerance.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// The parameter box: every coordinate mean lies in `[-mu_max, mu_max]` and
/// every coordinate variance in `[sigma2_min, sigma2_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoundsSpec", into = "BoundsSpec")]
pub struct Bounds {
    mu_max: f64,
    sigma2_min: f64,
    sigma2_max: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct BoundsSpec {
    mu_max: f64,
    sigma2_min: f64,
    sigma2_max: f64,
}

impl TryFrom<BoundsSpec> for Bounds {
    type Error = Error;
    fn try_from(s: BoundsSpec) -> Result<Self> {
        Bounds::new(s.mu_max, s.sigma2_min, s.sigma2_max)
    }
}

impl From<Bounds> for BoundsSpec {
    fn from(b: Bounds) -> Self {
        BoundsSpec {
            mu_max: b.mu_max,
            sigma2_min: b.sigma2_min,
            sigma2_max: b.sigma2_max,
        }
    }
}

impl Bounds {
    pub fn new(mu_max: f64, sigma2_min: f64, sigma2_max: f64) -> Result<Self> {
        if !(mu_max.is_finite() && sigma2_min.is_finite() && sigma2_max.is_finite()) {
            return Err(Error::invalid("bounds must be finite"));
        }
        if mu_max < 1.0 {
            return Err(Error::invalid(format!("mu_max = {mu_max} must be at least 1")));
        }
        if !(sigma2_min > 0.0 && sigma2_min <= 1.0) {
            return Err(Error::invalid(format!("sigma2_min = {sigma2_min} must lie in (0, 1]")));
        }
        if sigma2_max < 1.0 {
            return Err(Error::invalid(format!("sigma2_max = {sigma2_max} must be at least 1")));
        }
        Ok(Bounds {
            mu_max,
            sigma2_min,
            sigma2_max,
        })
    }

    pub fn mu_max(&self) -> f64 {
        self.mu_max
    }
    pub fn sigma2_min(&self) -> f64 {
        self.sigma2_min
    }
    pub fn sigma2_max(&self) -> f64 {
        self.sigma2_max
    }
    pub fn sigma_min(&self) -> f64 {
        self.sigma2_min.sqrt()
    }
    pub fn sigma_max(&self) -> f64 {
        self.sigma2_max.sqrt()
    }

    /// `L = mu_max * sigma_max / sigma_min`.
    pub fn l(&self) -> f64 {
        self.mu_max * (self.sigma2_max / self.sigma2_min).sqrt()
    }

    /// Largest possible coordinate second moment, `sigma2_max + mu_max^2`.
    pub fn second_moment_max(&self) -> f64 {
        self.sigma2_max + self.mu_max * self.mu_max
    }

    pub fn contains(&self, mean: f64, variance: f64) -> bool {
        mean.abs() <= self.mu_max && variance >= self.sigma2_min && variance <= self.sigma2_max
    }
}

/// Tail probability policy shared by moment estimation, truncation and the
/// learner: `theta = eps / (100 n (sigma2_max + mu_max^2) max(1, L^2))`.
pub fn theta_for(eps: f64, bounds: &Bounds, n: usize) -> f64 {
    let l = bounds.l();
    eps / (100.0 * n.max(1) as f64 * bounds.second_moment_max() * l.powi(2).max(1.0))
}

/// One axis-aligned Gaussian component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl Component {
    pub fn new(means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        if means.len() != variances.len() {
            return Err(Error::DimensionMismatch {
                expected: means.len(),
                found: variances.len(),
            });
        }
        Ok(Component { means, variances })
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    /// Log density of the product Gaussian at `x`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.means
            .iter()
            .zip(&self.variances)
            .zip(x)
            .map(|((&m, &v), &xi)| -0.5 * (LN_2PI + v.ln()) - (xi - m) * (xi - m) / (2.0 * v))
            .sum()
    }
}

/// Anything with an evaluable log density on R^n.
pub trait Density {
    fn dim(&self) -> usize;
    /// Log density at `x`; callers guarantee `x.len() == self.dim()`.
    fn log_density(&self, x: &[f64]) -> f64;

    fn checked_log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        Ok(self.log_density(x))
    }
}

#[derive(Debug, Clone)]
struct ComponentCache {
    log_weight: f64,
    log_norm: f64,
    half_precision: Vec<f64>,
}

/// A mixture of `k` bounded axis-aligned Gaussians in `n` dimensions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "MixtureSpec", into = "MixtureSpec")]
pub struct MixtureModel {
    bounds: Bounds,
    weights: Vec<f64>,
    components: Vec<Component>,
    cache: Vec<ComponentCache>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MixtureSpec {
    bounds: Bounds,
    weights: Vec<f64>,
    components: Vec<Component>,
}

impl TryFrom<MixtureSpec> for MixtureModel {
    type Error = Error;
    fn try_from(s: MixtureSpec) -> Result<Self> {
        MixtureModel::new(s.bounds, s.weights, s.components)
    }
}

impl From<MixtureModel> for MixtureSpec {
    fn from(m: MixtureModel) -> Self {
        MixtureSpec {
            bounds: m.bounds,
            weights: m.weights,
            components: m.components,
        }
    }
}

impl PartialEq for MixtureModel {
    fn eq(&self, other: &Self) -> bool {
        self.bounds == other.bounds && self.weights == other.weights && self.components == other.components
    }
}

/// Rescale `weights` to sum to one. The last entry absorbs the rounding so
/// that a left-to-right sum is exactly 1 whenever the other weights sum to at
/// most 1.
pub(crate) fn normalize_weights(weights: &mut [f64]) {
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    if let Some((last, head)) = weights.split_last_mut() {
        let s: f64 = head.iter().sum();
        if s <= 1.0 {
            *last = 1.0 - s;
            // 1 - s can round; a couple of ulp nudges restore an exact sum.
            for _ in 0..4 {
                let gap = 1.0 - (s + *last);
                if gap == 0.0 {
                    break;
                }
                *last = (*last + gap).max(0.0);
            }
        }
    }
}

impl MixtureModel {
    /// Builds a model, renormalizing weights whose sum is within `1e-9` of one.
    pub fn new(bounds: Bounds, mut weights: Vec<f64>, components: Vec<Component>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::invalid("a mixture needs at least one component"));
        }
        if components.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                found: components.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_RENORM_TOL {
            return Err(Error::invalid(format!("weights sum to {total}, not 1")));
        }
        if total != 1.0 {
            normalize_weights(&mut weights);
        }
        let n = components[0].dim();
        if n == 0 {
            return Err(Error::invalid("components must have dimension at least 1"));
        }
        for (i, c) in components.iter().enumerate() {
            if c.means.len() != n || c.variances.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: c.means.len().min(c.variances.len()),
                });
            }
            for (j, (&mu, &var)) in c.means.iter().zip(&c.variances).enumerate() {
                if !mu.is_finite() || !var.is_finite() {
                    return Err(Error::NonFinite(format!("component {i}, coordinate {j}")));
                }
                if !bounds.contains(mu, var) {
                    return Err(Error::invalid(format!(
                        "component {i}, coordinate {j}: (mean {mu}, variance {var}) outside bounds {bounds:?}"
                    )));
                }
            }
        }
        let cache = weights
            .iter()
            .zip(&components)
            .map(|(&w, c)| ComponentCache {
                log_weight: w.ln(),
                log_norm: c.variances.iter().map(|v| -0.5 * (LN_2PI + v.ln())).sum(),
                half_precision: c.variances.iter().map(|v| 0.5 / v).collect(),
            })
            .collect();
        Ok(MixtureModel {
            bounds,
            weights,
            components,
            cache,
        })
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn components(&self) -> &[Component] {
        &self.components
    }
    pub fn k(&self) -> usize {
        self.weights.len()
    }
    pub fn n(&self) -> usize {
        self.components[0].dim()
    }

    /// `ln sum_i pi_i prod_j phi(x_j; mu_ij, sigma2_ij)` by log-sum-exp.
    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        self.checked_log_density(x)
    }

    /// Same model with different weights, bounds and components unchanged.
    pub fn with_components(&self, weights: Vec<f64>, components: Vec<Component>) -> Result<Self> {
        MixtureModel::new(self.bounds, weights, components)
    }
}

impl Density for MixtureModel {
    fn dim(&self) -> usize {
        self.n()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let mut best = f64::NEG_INFINITY;
        let mut terms = [0.0f64; 16];
        let mut spill = Vec::new();
        let k = self.cache.len();
        let buf: &mut [f64] = if k <= terms.len() {
            &mut terms[..k]
        } else {
            spill.resize(k, 0.0);
            &mut spill
        };
        for ((slot, cache), comp) in buf.iter_mut().zip(&self.cache).zip(&self.components) {
            let mut quad = 0.0;
            for ((&xi, &m), &hp) in x.iter().zip(&comp.means).zip(&cache.half_precision) {
                let d = xi - m;
                quad += d * d * hp;
            }
            *slot = cache.log_weight + cache.log_norm - quad;
            if *slot > best {
                best = *slot;
            }
        }
        if best == f64::NEG_INFINITY {
            return best;
        }
        let s: f64 = buf.iter().map(|t| (t - best).exp()).sum();
        best + s.ln()
    }
}

/// Free-function form of [`MixtureModel::log_pdf`].
pub fn log_pdf(model: &MixtureModel, x: &[f64]) -> Result<f64> {
    model.log_pdf(x)
}

pub(crate) fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// `P(|X| <= m_box)` for `X ~ N(mean, variance)`.
pub fn interval_mass(mean: f64, variance: f64, m_box: f64) -> f64 {
    let sd = variance.sqrt();
    let upper = erfc(-(m_box - mean) / (sd * SQRT_2));
    let lower = erfc(-(-m_box - mean) / (sd * SQRT_2));
    (0.5 * (upper - lower)).clamp(0.0, 1.0)
}

/// The three tail integrals controlled by the tail threshold, for a single
/// univariate Gaussian: mass, first absolute moment and second moment over
/// `|x| >= m_box`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailIntegrals {
    pub mass: f64,
    pub abs_first: f64,
    pub second: f64,
}

impl TailIntegrals {
    pub fn max(&self) -> f64 {
        self.mass.max(self.abs_first).max(self.second)
    }
}

pub fn tail_integrals(mean: f64, variance: f64, m_box: f64) -> TailIntegrals {
    let sd = variance.sqrt();
    // Upper tail x >= M, with a = (M - mu)/sd.
    let a = (m_box - mean) / sd;
    let q_a = 0.5 * erfc(a / SQRT_2);
    let phi_a = std_normal_pdf(a);
    // Lower tail x <= -M, with b = (-M - mu)/sd.
    let b = (-m_box - mean) / sd;
    let p_b = 0.5 * erfc(-b / SQRT_2);
    let phi_b = std_normal_pdf(b);

    let mass = q_a + p_b;
    // On the upper tail x > 0, on the lower tail x < 0 (M > 0).
    let upper_first = mean * q_a + sd * phi_a;
    let lower_first = -(mean * p_b - sd * phi_b);
    let upper_second = mean * mean * q_a + 2.0 * mean * sd * phi_a + variance * (a * phi_a + q_a);
    let lower_second = mean * mean * p_b - 2.0 * mean * sd * phi_b + variance * (p_b - b * phi_b);
    TailIntegrals {
        mass,
        abs_first: upper_first + lower_first,
        second: upper_second + lower_second,
    }
}

/// Worst tail integral over a grid of bounded parameters that includes the
/// four extreme corners.
pub fn worst_tail(bounds: &Bounds, m_box: f64) -> f64 {
    let mus = [
        -bounds.mu_max,
        -0.5 * bounds.mu_max,
        0.0,
        0.5 * bounds.mu_max,
        bounds.mu_max,
    ];
    let (lo, hi) = (bounds.sigma2_min.ln(), bounds.sigma2_max.ln());
    let mut worst: f64 = 0.0;
    for &mu in &mus {
        for t in 0..=4 {
            let var = (lo + (hi - lo) * t as f64 / 4.0).exp();
            let var = if t == 0 {
                bounds.sigma2_min
            } else if t == 4 {
                bounds.sigma2_max
            } else {
                var
            };
            worst = worst.max(tail_integrals(mu, var, m_box).max());
        }
    }
    worst
}

/// A threshold `M` beyond which every bounded univariate Gaussian has mass,
/// first absolute moment and second moment below `theta`.
///
/// Starts from
/// `mu_max + sigma_max (2 + sqrt(2 ln(3 (sigma2_max + mu_max^2) / (theta sigma_min))))`
/// and grows it by 10% steps until the closed-form tail integrals confirm
/// the three conditions.
pub fn tail_threshold(bounds: &Bounds, theta: f64) -> Result<f64> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::invalid(format!("theta = {theta} must lie in (0, 1)")));
    }
    let arg = 3.0 * bounds.second_moment_max() / (theta * bounds.sigma_min());
    let mut m = bounds.mu_max + bounds.sigma_max() * (2.0 + (2.0 * arg.ln()).sqrt());
    for _ in 0..200 {
        if worst_tail(bounds, m) < theta {
            return Ok(m);
        }
        m *= 1.1;
    }
    Err(Error::invalid(format!(
        "tail threshold did not converge for theta = {theta}"
    )))
}

/// `ln(alpha0)` and `ln(beta0)`: lower and upper bounds on the pdf of any
/// bounded mixture over the box `[-M, M]^n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdfBounds {
    pub log_alpha0: f64,
    pub log_beta0: f64,
}

impl PdfBounds {
    pub fn alpha0(&self) -> f64 {
        self.log_alpha0.exp()
    }
    pub fn beta0(&self) -> f64 {
        self.log_beta0.exp()
    }
    /// `ln(beta0 / alpha0)`.
    pub fn log_ratio(&self) -> f64 {
        self.log_beta0 - self.log_alpha0
    }
}

pub fn pdf_bounds(bounds: &Bounds, m_box: f64, n: usize) -> Result<PdfBounds> {
    if !(m_box > bounds.mu_max) {
        return Err(Error::invalid(format!(
            "box half-width {m_box} must exceed mu_max = {}",
            bounds.mu_max
        )));
    }
    let n = n as f64;
    let per_coord_alpha = -2.0 * m_box * m_box / bounds.sigma2_min - 0.5 * LN_2PI - bounds.sigma_max().ln();
    let per_coord_beta = -0.5 * LN_2PI - bounds.sigma_min().ln();
    Ok(PdfBounds {
        log_alpha0: n * per_coord_alpha,
        log_beta0: n * per_coord_beta,
    })
}

/// A mixture restricted to `[-M, M]^n` and renormalized.
#[derive(Debug, Clone)]
pub struct TruncatedMixture {
    base: MixtureModel,
    m_box: f64,
    log_norm: f64,
}

impl TruncatedMixture {
    pub fn new(base: MixtureModel, m_box: f64) -> Result<Self> {
        if !(m_box > 0.0 && m_box.is_finite()) {
            return Err(Error::invalid(format!("box half-width {m_box} must be positive")));
        }
        let mass: f64 = base
            .weights()
            .iter()
            .zip(base.components())
            .map(|(w, c)| {
                w * c
                    .means
                    .iter()
                    .zip(&c.variances)
                    .map(|(&mu, &v)| interval_mass(mu, v, m_box))
                    .product::<f64>()
            })
            .sum();
        if !(mass > 0.0) {
            return Err(Error::invalid("truncation box carries no mass"));
        }
        Ok(TruncatedMixture {
            base,
            m_box,
            log_norm: -mass.ln(),
        })
    }

    pub fn base(&self) -> &MixtureModel {
        &self.base
    }
    pub fn m_box(&self) -> f64 {
        self.m_box
    }
    /// `ln c` where `c = 1 / P(box)`.
    pub fn log_norm(&self) -> f64 {
        self.log_norm
    }
    /// Probability of the box under the untruncated model.
    pub fn box_mass(&self) -> f64 {
        (-self.log_norm).exp()
    }

    pub fn in_box(&self, x: &[f64]) -> bool {
        x.iter().all(|v| v.abs() <= self.m_box)
    }
}

impl Density for TruncatedMixture {
    fn dim(&self) -> usize {
        self.base.n()
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        if self.in_box(x) {
            self.base.log_density(x) + self.log_norm
        } else {
            f64::NEG_INFINITY
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature;

    fn unit_bounds() -> Bounds {
        Bounds::new(1.0, 1.0, 1.0).unwrap()
    }

    fn single(mean: f64, var: f64) -> MixtureModel {
        MixtureModel::new(
            Bounds::new(1.0, 0.25, 4.0).unwrap(),
            vec![1.0],
            vec![Component::new(vec![mean], vec![var]).unwrap()],
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_at_zero() {
        let m = single(0.0, 1.0);
        let v = m.log_pdf(&[0.0]).unwrap();
        assert!((v - (-0.918_938_533_204_672_7)).abs() < 1e-12);
    }

    #[test]
    fn identical_components_match_single() {
        let b = unit_bounds();
        let c = Component::new(vec![0.3, -0.2], vec![1.0, 1.0]).unwrap();
        let mix = MixtureModel::new(b, vec![0.5, 0.5], vec![c.clone(), c.clone()]).unwrap();
        let one = MixtureModel::new(b, vec![1.0], vec![c]).unwrap();
        for x in [[0.0, 0.0], [1.5, -2.0], [-3.0, 4.0]] {
            let a = mix.log_pdf(&x).unwrap();
            let e = one.log_pdf(&x).unwrap();
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn log_sum_exp_matches_direct_summation() {
        let b = Bounds::new(1.0, 0.5, 2.0).unwrap();
        let m = MixtureModel::new(
            b,
            vec![0.3, 0.7],
            vec![
                Component::new(vec![0.5, -0.25], vec![1.0, 0.5]).unwrap(),
                Component::new(vec![-1.0, 0.75], vec![2.0, 1.5]).unwrap(),
            ],
        )
        .unwrap();
        let x = [1.0, -1.0];
        // Direct density sum, no logs until the end.
        let mut direct = 0.0;
        for (w, c) in m.weights().iter().zip(m.components()) {
            let mut p = *w;
            for j in 0..2 {
                let d = x[j] - c.means[j];
                p *= (-(d * d) / (2.0 * c.variances[j])).exp() / (2.0 * PI * c.variances[j]).sqrt();
            }
            direct += p;
        }
        let v = m.log_pdf(&x).unwrap();
        assert!((v - direct.ln()).abs() < 1e-13, "{v} vs {}", direct.ln());
    }

    #[test]
    fn log_pdf_rejects_wrong_dimension() {
        let m = single(0.0, 1.0);
        assert!(matches!(m.log_pdf(&[0.0, 1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn far_points_do_not_underflow() {
        let m = single(0.0, 1.0);
        let v = m.log_pdf(&[60.0]).unwrap();
        assert!(v.is_finite() && v < -1700.0);
    }

    #[test]
    fn bounds_validation() {
        assert!(Bounds::new(0.5, 1.0, 1.0).is_err());
        assert!(Bounds::new(1.0, 1.5, 2.0).is_err());
        assert!(Bounds::new(1.0, 0.0, 2.0).is_err());
        assert!(Bounds::new(1.0, 0.5, 0.9).is_err());
        let b = Bounds::new(2.0, 0.25, 4.0).unwrap();
        assert!((b.l() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn weights_renormalize_within_tolerance_only() {
        let b = unit_bounds();
        let c = || Component::new(vec![0.0], vec![1.0]).unwrap();
        let m = MixtureModel::new(b, vec![0.3 + 5e-10, 0.7], vec![c(), c()]).unwrap();
        assert!((m.weights().iter().sum::<f64>() - 1.0).abs() <= WEIGHT_SUM_TOL);
        assert!(MixtureModel::new(b, vec![0.3 + 1e-6, 0.7], vec![c(), c()]).is_err());
        assert!(MixtureModel::new(b, vec![-0.1, 1.1], vec![c(), c()]).is_err());
    }

    #[test]
    fn out_of_bounds_component_is_rejected() {
        let b = unit_bounds();
        let c = Component::new(vec![1.5], vec![1.0]).unwrap();
        assert!(MixtureModel::new(b, vec![1.0], vec![c]).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let b = Bounds::new(1.0, 0.5, 2.0).unwrap();
        let m = MixtureModel::new(
            b,
            vec![0.1 + 0.2, 1.0 - (0.1 + 0.2)],
            vec![
                Component::new(vec![0.1, 1.0 / 3.0], vec![0.7, 1.1]).unwrap(),
                Component::new(vec![-0.9, 0.123456789012345], vec![1.9, 0.5]).unwrap(),
            ],
        )
        .unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.starts_with("{\"bounds\":{\"mu_max\":1.0,\"sigma2_min\":0.5,\"sigma2_max\":2.0},\"weights\":"));
        let back: MixtureModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn json_with_invalid_bounds_fails() {
        let s = r#"{"bounds":{"mu_max":0.5,"sigma2_min":1,"sigma2_max":1},"weights":[1],"components":[{"means":[0],"variances":[1]}]}"#;
        assert!(serde_json::from_str::<MixtureModel>(s).is_err());
    }

    #[test]
    fn pdf_integrates_to_one_in_two_dimensions() {
        let b = Bounds::new(1.0, 0.5, 2.0).unwrap();
        let m = MixtureModel::new(
            b,
            vec![0.4, 0.6],
            vec![
                Component::new(vec![1.0, -0.5], vec![0.5, 2.0]).unwrap(),
                Component::new(vec![-1.0, 0.5], vec![1.0, 0.7]).unwrap(),
            ],
        )
        .unwrap();
        let total = quadrature::integrate_2d(|x, y| m.log_density(&[x, y]).exp(), (-14.0, 14.0), (-14.0, 14.0), 1e-10);
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn tail_integrals_match_quadrature() {
        for &(mu, var, m) in &[(1.0, 1.0, 3.0), (-0.5, 2.0, 4.0), (0.0, 0.25, 1.0)] {
            let t = tail_integrals(mu, var, m);
            let pdf = |x: f64| (-(x - mu) * (x - mu) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt();
            let far = mu.abs() + 40.0 * var.sqrt() + m;
            let q = |f: &dyn Fn(f64) -> f64| {
                quadrature::integrate(&f, m, far, 1e-14) + quadrature::integrate(&f, -far, -m, 1e-14)
            };
            let (qm, qf, qs) = (q(&|x| pdf(x)), q(&|x| x.abs() * pdf(x)), q(&|x| x * x * pdf(x)));
            assert!((qm - t.mass).abs() < 1e-12, "{mu} {var} {m}: {qm} vs {t:?}");
            assert!((qf - t.abs_first).abs() < 1e-12);
            assert!((qs - t.second).abs() < 1e-12);
        }
    }

    #[test]
    fn tail_threshold_properties() {
        let b = unit_bounds();
        assert!(tail_threshold(&b, 0.0).is_err());
        assert!(tail_threshold(&b, 1.0).is_err());
        assert!(tail_threshold(&b, 0.5).unwrap() >= b.mu_max());
        let mut prev = 0.0;
        for theta in [0.9, 0.5, 0.1, 1e-2, 1e-4, 1e-8, 1e-12] {
            let m = tail_threshold(&b, theta).unwrap();
            assert!(m >= prev, "not monotone at {theta}");
            prev = m;
        }
        let wide = Bounds::new(3.0, 0.1, 5.0).unwrap();
        let m = tail_threshold(&wide, 1e-6).unwrap();
        assert!(worst_tail(&wide, m) < 1e-6);
    }

    #[test]
    fn pdf_bounds_substitution_and_scaling() {
        let b = unit_bounds();
        let p = pdf_bounds(&b, 2.0, 1).unwrap();
        assert!((p.alpha0() - (-8.0f64).exp() / (2.0 * PI).sqrt()).abs() < 1e-15);
        assert!((p.beta0() - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-15);
        let p2 = pdf_bounds(&b, 2.0, 2).unwrap();
        assert!((p2.log_alpha0 - 2.0 * p.log_alpha0).abs() < 1e-12);
        assert!((p2.log_beta0 - 2.0 * p.log_beta0).abs() < 1e-12);
        assert!(pdf_bounds(&b, 1.0, 1).is_err());
    }

    #[test]
    fn truncated_mixture_integrates_to_one() {
        let b = Bounds::new(1.0, 0.5, 2.0).unwrap();
        let base = MixtureModel::new(
            b,
            vec![0.5, 0.5],
            vec![
                Component::new(vec![1.0], vec![2.0]).unwrap(),
                Component::new(vec![-0.5], vec![0.5]).unwrap(),
            ],
        )
        .unwrap();
        let t = TruncatedMixture::new(base, 1.5).unwrap();
        assert!(t.log_density(&[1.6]).is_infinite());
        let total = quadrature::integrate(|x| t.log_density(&[x]).exp(), -1.5, 1.5, 1e-13);
        assert!((total - 1.0).abs() < 1e-10, "{total}");
    }
}
