//! Two WAM runs, one on the raw draws and one on their squares, crossed into
//! candidates that carry weights, means and variances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Bounds, MixtureModel};
use crate::sampling::{estimate_moment_table_with, MomentOptions, MomentTable, SampleSet, SampleUse};
use crate::wam::{run_wam, CandidateWM, GridIndex, WamConfig, WamStats};

/// Weights, means and variances; variances may still be negative here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateWMV {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    pub negative_variance: bool,
    /// Indices of the two parents in the raw and squared lists.
    pub parents: Option<(usize, usize)>,
    pub parent_grid: Option<(GridIndex, GridIndex)>,
}

impl CandidateWMV {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if means.len() != k || variances.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                found: means.len().min(variances.len()),
            });
        }
        let n = means.first().map_or(0, |m| m.len());
        if means.iter().chain(&variances).any(|r| r.len() != n) {
            return Err(Error::invalid("ragged candidate parameters"));
        }
        let negative_variance = variances.iter().flatten().any(|&v| v < 0.0);
        Ok(CandidateWMV {
            weights,
            means,
            variances,
            negative_variance,
            parents: None,
            parent_grid: None,
        })
    }

    /// The exact parameters of `model`.
    pub fn from_model(model: &MixtureModel) -> Self {
        let c = model.components();
        CandidateWMV {
            weights: model.weights().to_vec(),
            means: c.iter().map(|c| c.means.clone()).collect(),
            variances: c.iter().map(|c| c.variances.clone()).collect(),
            negative_variance: false,
            parents: None,
            parent_grid: None,
        }
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }
    pub fn n(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }
}

/// Tolerances of parametric accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracySpec {
    pub eps_wts: f64,
    pub eps_means: f64,
    pub eps_vars: f64,
    pub eps_minwt: f64,
}

impl AccuracySpec {
    pub fn new(eps_wts: f64, eps_means: f64, eps_vars: f64, eps_minwt: f64) -> Result<Self> {
        let s = AccuracySpec {
            eps_wts,
            eps_means,
            eps_vars,
            eps_minwt,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn uniform(eps: f64) -> Result<Self> {
        AccuracySpec::new(eps, eps, eps, eps)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.eps_wts, self.eps_means, self.eps_vars, self.eps_minwt];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "accuracy tolerances must be positive: {self:?}"
            )))
        }
    }

    pub fn min(&self) -> f64 {
        self.eps_wts.min(self.eps_means).min(self.eps_vars).min(self.eps_minwt)
    }
}

/// Entrywise square of every sample.
pub fn square_samples(samples: &SampleSet) -> SampleSet {
    samples
        .map(|v| v * v, "squared")
        .expect("squares of finite values are finite")
}

/// Every pairing of a means candidate with a second-moments candidate, in
/// lexicographic order of `(index1, index2)`. Weights and means come from
/// `list1`; variances are `s^2 - mu^2`.
pub fn cross_product(list1: &[CandidateWM], list2: &[CandidateWM]) -> Result<Vec<CandidateWMV>> {
    cross_product_capped(list1, list2, None)
}

/// [`cross_product`] keeping at most `cap` products, chosen at evenly spaced
/// positions of the full order.
pub fn cross_product_capped(
    list1: &[CandidateWM],
    list2: &[CandidateWM],
    cap: Option<usize>,
) -> Result<Vec<CandidateWMV>> {
    let (Some(a), Some(b)) = (list1.first(), list2.first()) else {
        return Err(Error::EmptyCandidates {
            stage: "cross product".into(),
            advice: "both candidate lists must be nonempty".into(),
        });
    };
    for c in list1.iter().chain(list2) {
        if c.k() != a.k() || c.n() != a.n() {
            return Err(Error::DimensionMismatch {
                expected: a.k() * a.n(),
                found: c.k() * c.n(),
            });
        }
    }
    if b.k() != a.k() || b.n() != a.n() {
        return Err(Error::DimensionMismatch {
            expected: a.k(),
            found: b.k(),
        });
    }
    let total = list1.len() * list2.len();
    let picks: Box<dyn Iterator<Item = usize>> = match cap {
        Some(c) if c < total => Box::new((0..c).map(move |t| t * total / c)),
        _ => Box::new(0..total),
    };
    Ok(picks
        .map(|p| {
            let (i1, i2) = (p / list2.len(), p % list2.len());
            let (m, s) = (&list1[i1], &list2[i2]);
            let variances: Vec<Vec<f64>> = m
                .means
                .iter()
                .zip(&s.means)
                .map(|(mu, s2)| mu.iter().zip(s2).map(|(mu, s2)| s2 - mu * mu).collect())
                .collect();
            let negative_variance = variances.iter().flatten().any(|&v| v < 0.0);
            CandidateWMV {
                weights: m.weights.clone(),
                means: m.means.clone(),
                variances,
                negative_variance,
                parents: Some((i1, i2)),
                parent_grid: m.grid_index.zip(s.grid_index),
            }
        })
        .collect())
}

/// WAM settings for both runs. `None` fields take the defaults derived from
/// the accuracy spec.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CandidateConfig {
    pub raw: Option<WamConfig>,
    pub squared: Option<WamConfig>,
    pub max_products: Option<usize>,
}

/// Default WAM configs: the raw run uses `U = L` at accuracy `eps / (6 mu_max)`,
/// the squared run `U = sigma2_max + mu_max^2` at `eps / 2` over `[0, U]`,
/// where `eps` is the smallest tolerance in `spec`.
pub fn default_wam_configs(bounds: &Bounds, spec: &AccuracySpec, k: usize, seed: u64) -> (WamConfig, WamConfig) {
    let eps = spec.min();
    let mut raw = WamConfig::new(k, bounds.l(), eps / (6.0 * bounds.mu_max()));
    raw.seed = seed;
    let u2 = bounds.second_moment_max();
    let mut sq = WamConfig::new(k, u2, eps / 2.0);
    sq.mean_range = (0.0, u2);
    sq.seed = seed.wrapping_add(1);
    (raw, sq)
}

/// Everything the two runs produced.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub means_list: Vec<CandidateWM>,
    pub second_moment_list: Vec<CandidateWM>,
    pub products: Vec<CandidateWMV>,
    pub raw_stats: WamStats,
    pub squared_stats: WamStats,
    pub raw_config: WamConfig,
    pub squared_config: WamConfig,
}

/// Both WAM runs on one moment table and their cross product.
pub fn candidates_from_moments(
    table: &MomentTable,
    raw: &WamConfig,
    squared: &WamConfig,
    max_products: Option<usize>,
) -> Result<CandidateSet> {
    let (a, b) = rayon::join(|| run_wam(&table.raw(), raw), || run_wam(&table.squared(), squared));
    let (a, b) = (a?, b?);
    let products = cross_product_capped(&a.candidates, &b.candidates, max_products)?;
    Ok(CandidateSet {
        means_list: a.candidates,
        second_moment_list: b.candidates,
        products,
        raw_stats: a.stats,
        squared_stats: b.stats,
        raw_config: raw.clone(),
        squared_config: squared.clone(),
    })
}

/// Candidates from samples with explicit WAM settings. Moments of the squared
/// data are read from the same table (`E[Z^2]`, `E[Z_j^2 Z_l^2]`), which keeps
/// one consistent set of truncation caps.
pub fn generate_candidates_with(
    samples: &SampleSet,
    bounds: &Bounds,
    spec: &AccuracySpec,
    k: usize,
    delta: f64,
    seed: u64,
    config: &CandidateConfig,
) -> Result<CandidateSet> {
    spec.validate()?;
    let table = estimate_moment_table_with(
        samples,
        bounds,
        &MomentOptions {
            eps: spec.min(),
            delta,
            sample_use: SampleUse::AllRows,
            theta: None,
        },
    )?;
    let (raw_default, sq_default) = default_wam_configs(bounds, spec, k, seed);
    let raw = config.raw.clone().unwrap_or(raw_default);
    let sq = config.squared.clone().unwrap_or(sq_default);
    candidates_from_moments(&table, &raw, &sq, config.max_products)
}

/// [`generate_candidates_with`] at the default grids.
pub fn generate_candidates(
    samples: &SampleSet,
    bounds: &Bounds,
    spec: &AccuracySpec,
    k: usize,
    delta: f64,
    seed: u64,
) -> Result<Vec<CandidateWMV>> {
    Ok(generate_candidates_with(samples, bounds, spec, k, delta, seed, &CandidateConfig::default())?.products)
}

/// Outcome of matching a candidate against the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub pass: bool,
    /// `permutation[i]` is the candidate component matched to true component `i`.
    pub permutation: Vec<usize>,
    pub max_weight_error: f64,
    pub max_mean_error: f64,
    pub max_variance_error: f64,
    pub violations: Vec<String>,
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out.sort();
    out
}

fn score_permutation(
    perm: &[usize],
    weights: &[f64],
    means: &[Vec<f64>],
    variances: Option<&[Vec<f64>]>,
    truth: &MixtureModel,
    spec: &AccuracySpec,
) -> AccuracyReport {
    let mut r = AccuracyReport {
        pass: true,
        permutation: perm.to_vec(),
        max_weight_error: 0.0,
        max_mean_error: 0.0,
        max_variance_error: 0.0,
        violations: Vec::new(),
    };
    for (i, (&tw, tc)) in truth.weights().iter().zip(truth.components()).enumerate() {
        let c = perm[i];
        let we = (weights[c] - tw).abs();
        r.max_weight_error = r.max_weight_error.max(we);
        if we > spec.eps_wts {
            r.violations
                .push(format!("component {i}: weight error {we:.3e} > {:.3e}", spec.eps_wts));
        }
        if tw < spec.eps_minwt {
            continue;
        }
        for j in 0..tc.dim() {
            let me = (means[c][j] - tc.means[j]).abs();
            r.max_mean_error = r.max_mean_error.max(me);
            if me > spec.eps_means {
                r.violations.push(format!(
                    "component {i}, coordinate {j}: mean error {me:.3e} > {:.3e}",
                    spec.eps_means
                ));
            }
            if let Some(v) = variances {
                let ve = (v[c][j] - tc.variances[j]).abs();
                r.max_variance_error = r.max_variance_error.max(ve);
                if ve > spec.eps_vars {
                    r.violations.push(format!(
                        "component {i}, coordinate {j}: variance error {ve:.3e} > {:.3e}",
                        spec.eps_vars
                    ));
                }
            }
        }
    }
    r.pass = r.violations.is_empty();
    r
}

/// Parametric accuracy up to relabeling, for weights, means and optional
/// variances. Passes if any permutation of the candidate's components meets
/// every tolerance; otherwise reports the permutation with the fewest
/// violations.
pub fn check_accuracy_parts(
    weights: &[f64],
    means: &[Vec<f64>],
    variances: Option<&[Vec<f64>]>,
    truth: &MixtureModel,
    spec: &AccuracySpec,
) -> Result<AccuracyReport> {
    let k = truth.k();
    if weights.len() != k || means.len() != k || variances.is_some_and(|v| v.len() != k) {
        return Err(Error::DimensionMismatch {
            expected: k,
            found: weights.len(),
        });
    }
    if means
        .iter()
        .chain(variances.unwrap_or(&[]))
        .any(|r| r.len() != truth.n())
    {
        return Err(Error::DimensionMismatch {
            expected: truth.n(),
            found: means[0].len(),
        });
    }
    let mut best: Option<AccuracyReport> = None;
    for perm in permutations(k) {
        let r = score_permutation(&perm, weights, means, variances, truth, spec);
        if r.pass {
            return Ok(r);
        }
        if best.as_ref().is_none_or(|b| r.violations.len() < b.violations.len()) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one permutation"))
}

pub fn check_parametric_accuracy(
    candidate: &CandidateWMV,
    truth: &MixtureModel,
    spec: &AccuracySpec,
) -> Result<AccuracyReport> {
    check_accuracy_parts(
        &candidate.weights,
        &candidate.means,
        Some(&candidate.variances),
        truth,
        spec,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Component;

    fn wm(weights: Vec<f64>, means: Vec<Vec<f64>>) -> CandidateWM {
        CandidateWM {
            weights,
            means,
            seed_coords: vec![0],
            grid_index: None,
            residual: None,
        }
    }

    fn truth() -> MixtureModel {
        MixtureModel::new(
            Bounds::new(1.0, 0.5, 2.0).unwrap(),
            vec![0.3, 0.7],
            vec![
                Component::new(vec![0.5, -0.5], vec![1.0, 1.5]).unwrap(),
                Component::new(vec![-1.0, 0.25], vec![0.5, 2.0]).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn squaring() {
        let s = SampleSet::new(vec![1.0, -2.0], 2, 0, "t").unwrap();
        assert_eq!(square_samples(&s).as_slice(), &[1.0, 4.0]);
        assert_eq!(square_samples(&square_samples(&s)).as_slice(), &[1.0, 16.0]);
    }

    #[test]
    fn variance_from_second_moment() {
        let out = cross_product(
            &[wm(vec![1.0], vec![vec![2.0, 2.0]])],
            &[wm(vec![0.9], vec![vec![5.0, 1.0]])],
        )
        .unwrap();
        assert_eq!(out[0].variances[0], vec![1.0, -3.0]);
        assert!(out[0].negative_variance);
        assert_eq!(out[0].weights, vec![1.0]);
    }

    #[test]
    fn product_order_and_size() {
        let l1: Vec<_> = (0..3).map(|i| wm(vec![1.0], vec![vec![i as f64]])).collect();
        let l2: Vec<_> = (0..4).map(|i| wm(vec![1.0], vec![vec![10.0 + i as f64]])).collect();
        let out = cross_product(&l1, &l2).unwrap();
        assert_eq!(out.len(), 12);
        let parents: Vec<_> = out.iter().map(|c| c.parents.unwrap()).collect();
        let expected: Vec<_> = (0..3).flat_map(|a| (0..4).map(move |b| (a, b))).collect();
        assert_eq!(parents, expected);
        let capped = cross_product_capped(&l1, &l2, Some(5)).unwrap();
        assert_eq!(capped.len(), 5);
        assert!(cross_product(&[], &l2).is_err());
        assert!(cross_product(&l1, &[wm(vec![0.5, 0.5], vec![vec![0.0], vec![0.0]])]).is_err());
    }

    #[test]
    fn accuracy_of_truth_and_perturbations() {
        let t = truth();
        let spec = AccuracySpec::uniform(0.05).unwrap();
        let mut c = CandidateWMV::from_model(&t);
        assert!(check_parametric_accuracy(&c, &t, &spec).unwrap().pass);
        // Relabeling does not matter.
        c.weights.swap(0, 1);
        c.means.swap(0, 1);
        c.variances.swap(0, 1);
        let r = check_parametric_accuracy(&c, &t, &spec).unwrap();
        assert!(r.pass);
        assert_eq!(r.permutation, vec![1, 0]);
        let mut c = CandidateWMV::from_model(&t);
        c.weights[0] += 0.1;
        assert!(!check_parametric_accuracy(&c, &t, &spec).unwrap().pass);
    }

    #[test]
    fn light_components_are_exempt_from_parameter_checks() {
        let b = Bounds::new(1.0, 1.0, 1.0).unwrap();
        let spec = AccuracySpec::new(0.01, 0.01, 0.01, 0.1).unwrap();
        let t = MixtureModel::new(
            b,
            vec![0.95, 0.05],
            vec![
                Component::new(vec![0.0], vec![1.0]).unwrap(),
                Component::new(vec![0.5], vec![1.0]).unwrap(),
            ],
        )
        .unwrap();
        let mut c = CandidateWMV::from_model(&t);
        c.means[1][0] += 10.0 * spec.eps_means;
        assert!(check_parametric_accuracy(&c, &t, &spec).unwrap().pass);
    }

    #[test]
    fn permutations_are_complete() {
        let p = permutations(3);
        assert_eq!(p.len(), 6);
        assert_eq!(p[0], vec![0, 1, 2]);
    }
}
