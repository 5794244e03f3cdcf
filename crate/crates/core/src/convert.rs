//! Turning candidate parameters into a bona fide bounded mixture, and the KL
//! guarantee that conversion carries.

use crate::candidates::CandidateWMV;
use crate::error::{Error, Result};
use crate::model::{normalize_weights, Bounds, Component, MixtureModel};

/// Largest `eps_wts` for which [`eta_bound`] applies: `(12 k)^-3`.
pub fn max_eps_wts(k: usize) -> f64 {
    (12.0 * k as f64).powi(-3)
}

/// Clamps means to `[-mu_max, mu_max]` and standard deviations to
/// `[sigma_min, sigma_max]`, floors weights at `eps_wts` and rescales them
/// to sum to one. Negative candidate variances clamp to `sigma2_min`.
pub fn convert(candidate: &CandidateWMV, bounds: &Bounds, eps_wts: f64) -> Result<MixtureModel> {
    let k = candidate.k();
    if k == 0 {
        return Err(Error::invalid("candidate has no components"));
    }
    if !(eps_wts > 0.0 && eps_wts.is_finite()) {
        return Err(Error::invalid(format!("eps_wts = {eps_wts} must be positive")));
    }
    if eps_wts > max_eps_wts(k) {
        log::warn!(
            "eps_wts = {eps_wts:.3e} exceeds (12k)^-3 = {:.3e}; the KL guarantee does not apply",
            max_eps_wts(k)
        );
    }
    let finite = candidate
        .weights
        .iter()
        .chain(candidate.means.iter().flatten())
        .chain(candidate.variances.iter().flatten())
        .all(|v| v.is_finite());
    if !finite {
        return Err(Error::NonFinite("candidate parameters".into()));
    }
    let mu = bounds.mu_max();
    // Clamping sigma to [sigma_min, sigma_max] is clamping sigma^2 to
    // [sigma2_min, sigma2_max]; working on variances avoids sqrt round-off.
    let components = candidate
        .means
        .iter()
        .zip(&candidate.variances)
        .map(|(m, v)| {
            Component::new(
                m.iter().map(|x| x.clamp(-mu, mu)).collect(),
                v.iter()
                    .map(|x| x.clamp(bounds.sigma2_min(), bounds.sigma2_max()))
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut weights: Vec<f64> = candidate.weights.iter().map(|&w| w.max(eps_wts)).collect();
    if weights.iter().sum::<f64>() != 1.0 {
        normalize_weights(&mut weights);
    }
    MixtureModel::new(*bounds, weights, components)
}

/// KL guarantee of conversion for a candidate within the given tolerances:
///
/// `n (e_v / (2 s2min) + (e_m^2 + e_v) / (2 (s2min - e_v)))
///  + k e_minwt n (s2max + 2 mu_max^2) / s2min + 13 k e_wts^(1/3)`.
pub fn eta_bound(
    bounds: &Bounds,
    n: usize,
    k: usize,
    eps_means: f64,
    eps_vars: f64,
    eps_wts: f64,
    eps_minwt: f64,
) -> Result<f64> {
    let s2min = bounds.sigma2_min();
    if !(eps_vars < s2min) {
        return Err(Error::invalid(format!(
            "eps_vars = {eps_vars} must be below sigma2_min = {s2min}"
        )));
    }
    if [eps_means, eps_vars, eps_wts, eps_minwt].iter().any(|e| !(*e >= 0.0)) {
        return Err(Error::invalid("tolerances must be nonnegative"));
    }
    let (n, k) = (n as f64, k as f64);
    let per_coord = eps_vars / (2.0 * s2min) + (eps_means * eps_means + eps_vars) / (2.0 * (s2min - eps_vars));
    let spread = (bounds.sigma2_max() + 2.0 * bounds.mu_max().powi(2)) / s2min;
    Ok(n * per_coord + k * eps_minwt * n * spread + 13.0 * k * eps_wts.cbrt())
}

/// Arguments of the mixture KL bound: weight perturbation `eps1`, weight
/// floor `eps2`, heavy-component threshold `eps3`, free parameter
/// `eps4 > eps1`, and the per-component KL bounds `eps_i` (heavy components)
/// and `eps_all` (every component).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixKlArgs {
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
    pub eps4: f64,
    pub eps_i: f64,
    pub eps_all: f64,
    pub k: usize,
}

/// `eps_i + k eps3 eps_all + k eps4 ln(eps4 / eps2) + eps1 / (eps4 - eps1)`.
pub fn mixture_kl_upper_bound(a: &MixKlArgs) -> Result<f64> {
    if !(a.eps4 > a.eps1) {
        return Err(Error::invalid("eps4 must exceed eps1"));
    }
    if !(a.eps2 > 0.0) {
        return Err(Error::invalid("eps2 must be positive"));
    }
    let k = a.k as f64;
    Ok(a.eps_i + k * a.eps3 * a.eps_all + k * a.eps4 * (a.eps4 / a.eps2).ln() + a.eps1 / (a.eps4 - a.eps1))
}

/// The weight-dependent part of the mixture bound at the instantiation used
/// for conversion: `eps1 = 3 k e`, `eps2 = e / 2`, `eps4 = e^(2/3) / 2`, and no
/// other terms.
pub fn conversion_weight_term(k: usize, eps_wts: f64) -> Result<f64> {
    mixture_kl_upper_bound(&MixKlArgs {
        eps1: 3.0 * k as f64 * eps_wts,
        eps2: eps_wts / 2.0,
        eps3: 0.0,
        eps4: eps_wts.powf(2.0 / 3.0) / 2.0,
        eps_i: 0.0,
        eps_all: 0.0,
        k,
    })
}
