//! The end-to-end learner: schedule, candidates, conversion, truncated-target
//! maximum-likelihood selection, and a report that reproduces the run.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::candidates::{
    candidates_from_moments, check_parametric_accuracy, AccuracyReport, AccuracySpec, CandidateWMV,
};
use crate::convert::{convert, eta_bound};
use crate::divergence::{kl_monte_carlo, KlEstimate};
use crate::error::{Error, Result};
use crate::mlselect::{ml_required_samples, select_ml};
use crate::model::{pdf_bounds, tail_threshold, theta_for, Bounds, MixtureModel, PdfBounds};
use crate::rng::derive_seed;
use crate::sampling::{
    draw_mixture, draw_truncated_counted, estimate_moment_table_with, MomentOptions, SampleSet, SampleUse,
};
use crate::wam::{PruneConfig, WamConfig, WamStats};

/// `eps_means = eps s2min / (12 n)`, `eps_vars = 2 eps_means`,
/// `eps_minwt = eps s2min / (3 k n (s2max + 2 mu_max^2))`, `eps_wts = (eps / (39 k))^3`.
pub fn parameter_schedule(eps: f64, bounds: &Bounds, n: usize, k: usize) -> Result<AccuracySpec> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid("eps must be positive"));
    }
    if n == 0 || k == 0 {
        return Err(Error::invalid("n and k must be positive"));
    }
    let (nf, kf) = (n as f64, k as f64);
    let s2min = bounds.sigma2_min();
    let eps_means = eps * s2min / (12.0 * nf);
    AccuracySpec::new(
        (eps / (39.0 * kf)).powi(3),
        eps_means,
        2.0 * eps_means,
        eps * s2min / (3.0 * kf * nf * (bounds.sigma2_max() + 2.0 * bounds.mu_max().powi(2))),
    )
}

/// `eta` at the schedule for `eps`; at most `eps` by construction.
pub fn schedule_eta(eps: f64, bounds: &Bounds, n: usize, k: usize) -> Result<f64> {
    let s = parameter_schedule(eps, bounds, n, k)?;
    eta_bound(bounds, n, k, s.eps_means, s.eps_vars, s.eps_wts, s.eps_minwt)
}

/// Desk-scale limits on the candidate grids and selection sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridBudget {
    pub weight_step: f64,
    pub mean_step: f64,
    pub second_moment_step: f64,
    /// Candidates kept per WAM run, by moment residual.
    pub max_list: Option<usize>,
    /// Search nodes allowed per WAM run.
    pub max_work: Option<u64>,
    /// Cap on the number of hypotheses, by stratified subsampling.
    pub max_hypotheses: Option<usize>,
    pub prune: Option<PruneConfig>,
    /// Overrides the default `eps / (4k)` singular value threshold.
    pub cond_threshold: Option<f64>,
    pub max_ml_samples: usize,
    /// Share of supplied rows used for selection rather than moments.
    pub ml_fraction: f64,
    /// Draws for the Monte-Carlo KL to the truth, when a truth is given.
    pub kl_samples: usize,
}

impl Default for GridBudget {
    fn default() -> Self {
        GridBudget {
            weight_step: 0.25,
            mean_step: 0.25,
            second_moment_step: 0.25,
            max_list: Some(48),
            max_work: Some(50_000_000),
            max_hypotheses: None,
            prune: Some(PruneConfig::default()),
            cond_threshold: None,
            max_ml_samples: 20_000,
            ml_fraction: 0.5,
            kl_samples: 100_000,
        }
    }
}

impl GridBudget {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("weight_step", self.weight_step),
            ("mean_step", self.mean_step),
            ("second_moment_step", self.second_moment_step),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::invalid(format!("{name} = {v} must lie in (0, 1]")));
            }
        }
        if !(self.ml_fraction > 0.0 && self.ml_fraction < 1.0) {
            return Err(Error::invalid("ml_fraction must lie in (0, 1)"));
        }
        if self.max_ml_samples == 0 {
            return Err(Error::invalid("max_ml_samples must be positive"));
        }
        Ok(())
    }

    /// WAM settings for the raw and squared runs under this budget.
    pub fn wam_configs(&self, bounds: &Bounds, k: usize, seed: u64) -> (WamConfig, WamConfig) {
        let eps_raw = self.weight_step.max(self.mean_step);
        let mut raw = WamConfig::new(k, bounds.l(), eps_raw);
        raw.grid_weights = self.weight_step;
        raw.grid_means = self.mean_step;
        raw.mean_range = (-bounds.mu_max(), bounds.mu_max());
        let eps_sq = self.weight_step.max(self.second_moment_step);
        let u2 = bounds.second_moment_max();
        let mut sq = WamConfig::new(k, u2, eps_sq);
        sq.grid_weights = self.weight_step;
        sq.grid_means = self.second_moment_step;
        sq.mean_range = (0.0, u2);
        for (c, s) in [(&mut raw, seed), (&mut sq, seed.wrapping_add(1))] {
            c.prune = self.prune;
            c.max_list = self.max_list;
            c.max_work = self.max_work;
            c.seed = s;
            if let Some(t) = self.cond_threshold {
                c.cond_threshold = t;
            }
        }
        (raw, sq)
    }
}

/// Where the learner gets draws of the target.
pub enum Target<'a> {
    /// A fixed sample: split between moments and (box-filtered) selection.
    Samples(&'a SampleSet),
    /// A generator: `moment_rows` fresh draws for moments, selection draws by
    /// rejection from the same model.
    Sampler {
        model: &'a MixtureModel,
        moment_rows: usize,
    },
}

/// Grid resolution actually used, the accuracy the grids can certify.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveEps {
    pub weights: f64,
    pub means: f64,
    pub second_moments: f64,
    /// Hoeffding accuracy of the moment table at `delta`.
    pub moments: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub moments_ms: u128,
    pub candidates_ms: u128,
    pub convert_ms: u128,
    pub select_ms: u128,
}

/// Everything needed to audit and reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub k: usize,
    pub n: usize,
    pub eps: f64,
    pub delta: f64,
    pub bounds: Bounds,
    pub budget: GridBudget,
    pub schedule: AccuracySpec,
    pub schedule_eta: f64,
    pub effective_eps: EffectiveEps,
    pub theta: f64,
    pub m_box: f64,
    pub pdf_bounds: PdfBounds,
    pub rows_supplied: Option<usize>,
    pub moment_rows: Option<usize>,
    pub wam_raw: Option<WamStats>,
    pub wam_squared: Option<WamStats>,
    pub means_list_len: Option<usize>,
    pub second_moment_list_len: Option<usize>,
    pub hypotheses: Option<usize>,
    pub negative_variance_candidates: Option<usize>,
    pub ml_kl_eps: f64,
    pub ml_required_samples: Option<u64>,
    pub ml_samples: Option<usize>,
    pub ml_proposals: Option<u64>,
    pub selected_index: Option<usize>,
    pub selected_log_likelihood: Option<f64>,
    pub selected_parents: Option<(usize, usize)>,
    pub best_candidate_accuracy: Option<AccuracyReport>,
    pub kl_to_truth: Option<KlEstimate>,
    pub kl_truncated_to_truth: Option<KlEstimate>,
    pub times: Option<StageTimes>,
    pub error: Option<String>,
}

/// A failed run with the report filled up to the failing stage.
#[derive(Debug)]
pub struct LearnFailure {
    pub error: Error,
    pub partial: Box<RunReport>,
}

impl std::fmt::Display for LearnFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for LearnFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Inputs besides the target.
#[derive(Debug, Clone)]
pub struct LearnConfig {
    pub k: usize,
    pub eps: f64,
    pub delta: f64,
    pub seed: u64,
    /// Tail mass policy; defaults to `theta_for(eps)`.
    pub theta: Option<f64>,
    pub budget: GridBudget,
}

impl LearnConfig {
    pub fn new(k: usize, eps: f64, delta: f64, seed: u64) -> Self {
        LearnConfig {
            k,
            eps,
            delta,
            seed,
            theta: None,
            budget: GridBudget::default(),
        }
    }
}

/// Seeds of the independent random stages, all derived from the master seed.
pub mod stage {
    pub const MOMENT_DRAWS: u64 = 1;
    pub const SELECTION_DRAWS: u64 = 2;
    pub const WAM: u64 = 3;
    pub const KL: u64 = 4;
}

/// Learned model and report, or the failure with a partial report.
pub type LearnResult = std::result::Result<(MixtureModel, RunReport), LearnFailure>;

fn score_accuracy(r: &AccuracyReport) -> (usize, f64) {
    (
        r.violations.len(),
        r.max_weight_error + r.max_mean_error + r.max_variance_error,
    )
}

/// Runs the learner. `truth`, when known, adds parametric accuracy of the
/// best pre-conversion candidate and Monte-Carlo KLs to the report.
pub fn learn(target: Target<'_>, bounds: &Bounds, config: &LearnConfig, truth: Option<&MixtureModel>) -> LearnResult {
    let n = match &target {
        Target::Samples(s) => s.n(),
        Target::Sampler { model, .. } => model.n(),
    };
    let mut report = match initial_report(n, bounds, config) {
        Ok(r) => r,
        Err(error) => {
            return Err(LearnFailure {
                error,
                partial: Box::new(blank_report(n, bounds, config)),
            })
        }
    };
    match run(target, bounds, config, truth, &mut report) {
        Ok(model) => Ok((model, report)),
        Err(error) => {
            report.error = Some(error.to_string());
            Err(LearnFailure {
                error,
                partial: Box::new(report),
            })
        }
    }
}

fn blank_report(n: usize, bounds: &Bounds, config: &LearnConfig) -> RunReport {
    RunReport {
        seed: config.seed,
        k: config.k,
        n,
        eps: config.eps,
        delta: config.delta,
        bounds: *bounds,
        budget: config.budget.clone(),
        schedule: AccuracySpec {
            eps_wts: f64::NAN,
            eps_means: f64::NAN,
            eps_vars: f64::NAN,
            eps_minwt: f64::NAN,
        },
        schedule_eta: f64::NAN,
        effective_eps: EffectiveEps {
            weights: config.budget.weight_step,
            means: config.budget.mean_step,
            second_moments: config.budget.second_moment_step,
            moments: None,
        },
        theta: f64::NAN,
        m_box: f64::NAN,
        pdf_bounds: PdfBounds {
            log_alpha0: f64::NAN,
            log_beta0: f64::NAN,
        },
        rows_supplied: None,
        moment_rows: None,
        wam_raw: None,
        wam_squared: None,
        means_list_len: None,
        second_moment_list_len: None,
        hypotheses: None,
        negative_variance_candidates: None,
        ml_kl_eps: 7.0 * config.eps,
        ml_required_samples: None,
        ml_samples: None,
        ml_proposals: None,
        selected_index: None,
        selected_log_likelihood: None,
        selected_parents: None,
        best_candidate_accuracy: None,
        kl_to_truth: None,
        kl_truncated_to_truth: None,
        times: None,
        error: None,
    }
}

fn initial_report(n: usize, bounds: &Bounds, config: &LearnConfig) -> Result<RunReport> {
    if !(config.delta > 0.0 && config.delta < 1.0) {
        return Err(Error::invalid("delta must lie in (0, 1)"));
    }
    config.budget.validate()?;
    let mut r = blank_report(n, bounds, config);
    r.schedule = parameter_schedule(config.eps, bounds, n, config.k)?;
    r.schedule_eta = schedule_eta(config.eps, bounds, n, config.k)?;
    r.theta = config.theta.unwrap_or_else(|| theta_for(config.eps, bounds, n));
    r.m_box = tail_threshold(bounds, r.theta)?;
    r.pdf_bounds = pdf_bounds(bounds, r.m_box, n)?;
    Ok(r)
}

fn run(
    target: Target<'_>,
    bounds: &Bounds,
    config: &LearnConfig,
    truth: Option<&MixtureModel>,
    report: &mut RunReport,
) -> Result<MixtureModel> {
    let budget = &config.budget;
    let (n, k) = (report.n, config.k);
    let t0 = Instant::now();

    // Moment and selection draws.
    let (moment_samples, selection_pool) = match &target {
        Target::Samples(s) => {
            report.rows_supplied = Some(s.rows());
            let ml_rows = ((s.rows() as f64) * budget.ml_fraction).round() as usize;
            let (a, b) = s.split_at(s.rows() - ml_rows)?;
            (a, Some(b))
        }
        Target::Sampler { model, moment_rows } => (
            draw_mixture(model, *moment_rows, derive_seed(config.seed, stage::MOMENT_DRAWS))?,
            None,
        ),
    };
    report.moment_rows = Some(moment_samples.rows());
    let table = estimate_moment_table_with(
        &moment_samples,
        bounds,
        &MomentOptions {
            eps: config.eps,
            delta: config.delta,
            sample_use: SampleUse::AllRows,
            theta: Some(report.theta),
        },
    )?;
    report.effective_eps.moments = table.certified_eps;
    let t1 = Instant::now();

    // Candidate lists.
    let (raw_cfg, sq_cfg) = budget.wam_configs(bounds, k, derive_seed(config.seed, stage::WAM));
    let set = candidates_from_moments(&table, &raw_cfg, &sq_cfg, budget.max_hypotheses)?;
    report.wam_raw = Some(set.raw_stats);
    report.wam_squared = Some(set.squared_stats);
    report.means_list_len = Some(set.means_list.len());
    report.second_moment_list_len = Some(set.second_moment_list.len());
    report.hypotheses = Some(set.products.len());
    report.negative_variance_candidates = Some(set.products.iter().filter(|c| c.negative_variance).count());
    if let Some(t) = truth {
        report.best_candidate_accuracy = best_candidate(&set.products, t, config.eps)?;
    }
    let t2 = Instant::now();

    // Conversion.
    let eps_wts = report.schedule.eps_wts;
    let hypotheses: Vec<MixtureModel> = set
        .products
        .iter()
        .map(|c| convert(c, bounds, eps_wts))
        .collect::<Result<_>>()?;
    let t3 = Instant::now();

    // Selection on draws from the box-truncated target.
    let required = ml_required_samples(
        hypotheses.len(),
        report.ml_kl_eps,
        report.pdf_bounds.log_ratio(),
        config.delta / 2.0,
    )?;
    report.ml_required_samples = Some(required);
    let want = (required as usize).min(budget.max_ml_samples);
    let m_box = report.m_box;
    let selection = match (&target, selection_pool) {
        (Target::Samples(_), Some(pool)) => {
            let mut rows = Vec::with_capacity(want * n);
            let mut seen = 0u64;
            for r in pool.iter_rows() {
                if rows.len() == want * n {
                    break;
                }
                seen += 1;
                if r.iter().all(|v| v.abs() <= m_box) {
                    rows.extend_from_slice(r);
                }
            }
            let accepted = (rows.len() / n) as u64;
            if 2 * accepted < seen {
                return Err(Error::AcceptanceRate {
                    rate: accepted as f64 / seen as f64,
                    cap: m_box,
                });
            }
            report.ml_proposals = Some(seen);
            SampleSet::new(
                rows,
                n,
                pool.seed,
                format!("{}; truncated to M={m_box}", pool.source_desc),
            )?
        }
        (Target::Sampler { model, .. }, _) => {
            let (s, proposed) =
                draw_truncated_counted(model, m_box, want, derive_seed(config.seed, stage::SELECTION_DRAWS))?;
            report.ml_proposals = Some(proposed);
            s
        }
        (Target::Samples(_), None) => unreachable!("sample targets always reserve a selection pool"),
    };
    report.ml_samples = Some(selection.rows());
    let ml = select_ml(&hypotheses, &selection)?;
    report.selected_index = Some(ml.index);
    report.selected_log_likelihood = Some(ml.log_likelihoods[ml.index]);
    report.selected_parents = set.products[ml.index].parents;
    let t4 = Instant::now();
    let chosen = hypotheses[ml.index].clone();

    if let Some(t) = truth {
        let kl_seed = derive_seed(config.seed, stage::KL);
        report.kl_to_truth = Some(kl_monte_carlo(t, &chosen, budget.kl_samples, kl_seed)?);
        let tm = crate::model::TruncatedMixture::new(t.clone(), m_box)?;
        report.kl_truncated_to_truth = Some(kl_monte_carlo(&tm, &chosen, budget.kl_samples, kl_seed)?);
    }
    report.times = Some(StageTimes {
        moments_ms: (t1 - t0).as_millis(),
        candidates_ms: (t2 - t1).as_millis(),
        convert_ms: (t3 - t2).as_millis(),
        select_ms: (t4 - t3).as_millis(),
    });
    log::info!(
        "selected hypothesis {} of {} ({} selection draws)",
        ml.index,
        hypotheses.len(),
        selection.rows()
    );
    Ok(chosen)
}

fn best_candidate(products: &[CandidateWMV], truth: &MixtureModel, eps: f64) -> Result<Option<AccuracyReport>> {
    let spec = AccuracySpec::uniform(eps)?;
    let mut best: Option<AccuracyReport> = None;
    for c in products {
        let r = check_parametric_accuracy(c, truth, &spec)?;
        if best.as_ref().is_none_or(|b| score_accuracy(&r) < score_accuracy(b)) {
            best = Some(r);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Component;

    #[test]
    fn schedule_substitution() {
        let b = Bounds::new(1.0, 1.0, 1.0).unwrap();
        let s = parameter_schedule(1.0, &b, 1, 1).unwrap();
        assert!((s.eps_means - 1.0 / 12.0).abs() < 1e-15);
        assert!((s.eps_vars - 1.0 / 6.0).abs() < 1e-15);
        assert!((s.eps_minwt - 1.0 / 9.0).abs() < 1e-15);
        assert!((s.eps_wts - 1.0 / 39f64.powi(3)).abs() < 1e-18);
    }

    #[test]
    fn schedule_scales_homogeneously() {
        let b = Bounds::new(2.0, 0.5, 3.0).unwrap();
        let a = parameter_schedule(0.2, &b, 3, 2).unwrap();
        let h = parameter_schedule(0.1, &b, 3, 2).unwrap();
        assert!((a.eps_means / h.eps_means - 2.0).abs() < 1e-12);
        assert!((a.eps_wts / h.eps_wts - 8.0).abs() < 1e-12);
    }

    #[test]
    fn each_eta_term_is_at_most_a_third() {
        for &(mu, s2min, s2max) in &[(1.0, 1.0, 1.0), (1.0, 0.25, 4.0), (3.0, 0.1, 2.0), (1.5, 0.9, 10.0)] {
            let b = Bounds::new(mu, s2min, s2max).unwrap();
            for n in 1..=6 {
                for k in 1..=5 {
                    for &eps in &[1.0, 0.5, 0.1, 1e-3] {
                        let s = parameter_schedule(eps, &b, n, k).unwrap();
                        let third = eps / 3.0 * (1.0 + 1e-12);
                        let t1 = eta_bound(&b, n, k, s.eps_means, s.eps_vars, 0.0, 0.0).unwrap();
                        let t2 = eta_bound(&b, n, k, 0.0, 0.0, 0.0, s.eps_minwt).unwrap();
                        let t3 = eta_bound(&b, n, k, 0.0, 0.0, s.eps_wts, 0.0).unwrap();
                        assert!(t1 <= third && t2 <= third && t3 <= third, "{b:?} n={n} k={k} eps={eps}");
                    }
                }
            }
        }
    }

    #[test]
    fn single_gaussian_end_to_end() {
        let b = Bounds::new(1.0, 1.0, 1.0).unwrap();
        let truth = MixtureModel::new(b, vec![1.0], vec![Component::new(vec![0.5], vec![1.0]).unwrap()]).unwrap();
        let samples = draw_mixture(&truth, 40_000, 5).unwrap();
        let mut cfg = LearnConfig::new(1, 0.2, 0.05, 9);
        cfg.budget.kl_samples = 20_000;
        let (model, report) = learn(Target::Samples(&samples), &b, &cfg, Some(&truth)).unwrap();
        let kl = report.kl_to_truth.unwrap();
        assert!(kl.value <= 0.2 + 3.0 * kl.std_error, "{kl:?}");
        let (again, _) = learn(Target::Samples(&samples), &b, &cfg, Some(&truth)).unwrap();
        assert_eq!(model, again);
    }

    #[test]
    fn budget_exhaustion_returns_partial_report() {
        let b = Bounds::new(1.0, 1.0, 1.0).unwrap();
        let truth = MixtureModel::new(
            b,
            vec![1.0],
            vec![Component::new(vec![0.5, 0.0], vec![1.0, 1.0]).unwrap()],
        )
        .unwrap();
        let samples = draw_mixture(&truth, 2_000, 5).unwrap();
        let mut cfg = LearnConfig::new(2, 0.2, 0.05, 9);
        cfg.budget.max_work = Some(5);
        let err = learn(Target::Samples(&samples), &b, &cfg, None).unwrap_err();
        assert!(matches!(err.error, Error::BudgetExhausted { .. }));
        assert!(err.partial.moment_rows.is_some());
        assert!(err.partial.error.is_some());
    }
}
