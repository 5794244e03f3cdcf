//! Maximum-likelihood selection from a finite hypothesis list.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Density;
use crate::sampling::SampleSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlSelection {
    pub index: usize,
    pub log_likelihoods: Vec<f64>,
}

/// Index of the hypothesis with the largest total log-likelihood on
/// `samples`; ties go to the lowest index.
pub fn select_ml<H: Density + Sync>(hypotheses: &[H], samples: &SampleSet) -> Result<MlSelection> {
    if hypotheses.is_empty() {
        return Err(Error::EmptyCandidates {
            stage: "ml selection".into(),
            advice: "the hypothesis list is empty".into(),
        });
    }
    if let Some(h) = hypotheses.iter().find(|h| h.dim() != samples.n()) {
        return Err(Error::DimensionMismatch {
            expected: samples.n(),
            found: h.dim(),
        });
    }
    let scores: Vec<Result<f64>> = hypotheses
        .par_iter()
        .enumerate()
        .map(|(h, hyp)| {
            let mut total = 0.0;
            for (r, x) in samples.iter_rows().enumerate() {
                let v = hyp.log_density(x);
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "log-likelihood of hypothesis {h} at row {r}: {v}"
                    )));
                }
                total += v;
            }
            Ok(total)
        })
        .collect();
    let log_likelihoods = scores.into_iter().collect::<Result<Vec<f64>>>()?;
    let mut index = 0;
    for (i, &s) in log_likelihoods.iter().enumerate() {
        if s > log_likelihoods[index] {
            index = i;
        }
    }
    Ok(MlSelection { index, log_likelihoods })
}

/// `(list_size + 1) exp(-2 m kl_eps^2 / log_ratio^2)` with `log_ratio = ln(beta / alpha)`.
pub fn ml_failure_bound_log(list_size: usize, m: u64, kl_eps: f64, log_ratio: f64) -> Result<f64> {
    if !(kl_eps > 0.0) {
        return Err(Error::invalid("kl_eps must be positive"));
    }
    if !(log_ratio > 0.0 && log_ratio.is_finite()) {
        return Err(Error::invalid("need 0 < alpha < beta"));
    }
    Ok((list_size as f64 + 1.0) * (-2.0 * m as f64 * kl_eps * kl_eps / (log_ratio * log_ratio)).exp())
}

/// Probability that selection misses the `4 kl_eps` guarantee, for pdfs in
/// `[alpha, beta]` on the support.
pub fn ml_failure_bound(list_size: usize, m: u64, kl_eps: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < beta) {
        return Err(Error::invalid("need 0 < alpha < beta"));
    }
    ml_failure_bound_log(list_size, m, kl_eps, (beta / alpha).ln())
}

/// Smallest `m` with `ml_failure_bound_log(list_size, m, kl_eps, log_ratio) <= delta`.
pub fn ml_required_samples(list_size: usize, kl_eps: f64, log_ratio: f64, delta: f64) -> Result<u64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid("delta must lie in (0, 1)"));
    }
    ml_failure_bound_log(list_size, 0, kl_eps, log_ratio)?;
    let m = ((list_size as f64 + 1.0) / delta).ln() * log_ratio * log_ratio / (2.0 * kl_eps * kl_eps);
    Ok(m.max(1.0).ceil() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{pdf_bounds, Bounds, Component, MixtureModel};
    use crate::sampling::draw_mixture;

    fn gauss(mu: f64) -> MixtureModel {
        MixtureModel::new(
            Bounds::new(2.0, 1.0, 1.0).unwrap(),
            vec![1.0],
            vec![Component::new(vec![mu], vec![1.0]).unwrap()],
        )
        .unwrap()
    }

    #[test]
    fn singleton_and_ties() {
        let s = draw_mixture(&gauss(0.0), 50, 1).unwrap();
        assert_eq!(select_ml(&[gauss(0.3)], &s).unwrap().index, 0);
        let list = [gauss(2.0), gauss(0.0), gauss(-2.0), gauss(0.0)];
        let r = select_ml(&list, &s).unwrap();
        assert_eq!(r.index, 1);
        assert_eq!(r.log_likelihoods[1], r.log_likelihoods[3]);
    }

    #[test]
    fn truth_beats_a_distant_model() {
        // KL(N(0,1) || N(1.5,1)) = 1.125.
        let list = [gauss(0.0), gauss(1.5)];
        let wins = (0..100)
            .filter(|&seed| {
                select_ml(&list, &draw_mixture(&list[0], 500, seed).unwrap())
                    .unwrap()
                    .index
                    == 0
            })
            .count();
        assert!(wins >= 95);
    }

    #[test]
    fn empty_list_is_an_error() {
        let s = draw_mixture(&gauss(0.0), 5, 1).unwrap();
        assert!(select_ml::<MixtureModel>(&[], &s).is_err());
    }

    #[test]
    fn failure_bound_behaviour() {
        let a = ml_failure_bound(10, 100, 0.1, 0.01, 1.0).unwrap();
        let b = ml_failure_bound(10, 10_000, 0.1, 0.01, 1.0).unwrap();
        assert!(b < a && ml_failure_bound(10, 10_000_000, 0.1, 0.01, 1.0).unwrap() == 0.0);
        let l = 3.0;
        let x = ml_failure_bound_log(10, 1000, 0.1, l).unwrap();
        let y = ml_failure_bound_log(10, 4000, 0.1, 2.0 * l).unwrap();
        assert!((x - y).abs() < 1e-15 * x.max(1.0));
        assert!(ml_failure_bound(10, 1, 0.1, 1.0, 0.5).is_err());
    }

    #[test]
    fn required_samples_invert_the_bound() {
        let b = Bounds::new(1.0, 1.0, 1.0).unwrap();
        let p = pdf_bounds(&b, 3.0, 3).unwrap();
        let m = ml_required_samples(1000, 0.1, p.log_ratio(), 0.01).unwrap();
        assert!(ml_failure_bound_log(1000, m, 0.1, p.log_ratio()).unwrap() <= 0.01);
        assert!(ml_failure_bound_log(1000, m - 1, 0.1, p.log_ratio()).unwrap() > 0.01);
    }
}
