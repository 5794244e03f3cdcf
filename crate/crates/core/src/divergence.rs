//! KL divergences: closed form for univariate Gaussians and their products,
//! quadrature at n <= 2, Monte Carlo for mixtures, and the truncation gap.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{tail_threshold, theta_for, Density, MixtureModel, TruncatedMixture};
use crate::quadrature;
use crate::sampling::Sampler;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMethod {
    ClosedForm,
    MonteCarlo,
    Quadrature,
}

/// A KL value in nats. `std_error` is zero exactly for the deterministic methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub value: f64,
    pub std_error: f64,
    pub m: u64,
    pub method: KlMethod,
    pub seed: Option<u64>,
}

impl KlEstimate {
    pub fn exact(value: f64, method: KlMethod) -> Self {
        KlEstimate {
            value,
            std_error: 0.0,
            m: 0,
            method,
            seed: None,
        }
    }

    /// `value + z * std_error`.
    pub fn upper(&self, z: f64) -> f64 {
        self.value + z * self.std_error
    }
}

/// `KL(N(mu_p, var_p) || N(mu_q, var_q))`.
pub fn kl_gaussian_1d(p: (f64, f64), q: (f64, f64)) -> Result<f64> {
    let ((mp, vp), (mq, vq)) = (p, q);
    if !(vp > 0.0 && vq > 0.0) {
        return Err(Error::invalid(format!("variances must be positive, got {vp} and {vq}")));
    }
    Ok(0.5 * (vq / vp).ln() + ((mp - mq).powi(2) + vp - vq) / (2.0 * vq))
}

/// Upper bound on the KL between univariate Gaussians whose means differ by
/// at most `eps_means` and variances by at most `eps_vars`, both variances at
/// least `sigma2_min`.
pub fn kl_gaussian_bound(eps_means: f64, eps_vars: f64, sigma2_min: f64) -> Result<f64> {
    if !(eps_vars < sigma2_min) {
        return Err(Error::invalid(format!(
            "eps_vars = {eps_vars} must be below sigma2_min = {sigma2_min}"
        )));
    }
    if eps_means < 0.0 || eps_vars < 0.0 {
        return Err(Error::invalid("tolerances must be nonnegative"));
    }
    Ok(eps_vars / (2.0 * sigma2_min) + (eps_means * eps_means + eps_vars) / (2.0 * (sigma2_min - eps_vars)))
}

/// KL between product distributions, from per-coordinate KLs.
pub fn kl_product(per_coord: &[f64]) -> f64 {
    per_coord.iter().sum()
}

/// Exact KL between two single-component models (products of Gaussians).
pub fn kl_closed_form(p: &MixtureModel, q: &MixtureModel) -> Result<KlEstimate> {
    if p.k() != 1 || q.k() != 1 {
        return Err(Error::invalid("closed-form KL needs single-component models"));
    }
    if p.n() != q.n() {
        return Err(Error::DimensionMismatch {
            expected: p.n(),
            found: q.n(),
        });
    }
    let (a, b) = (&p.components()[0], &q.components()[0]);
    let per: Result<Vec<f64>> = (0..p.n())
        .map(|j| kl_gaussian_1d((a.means[j], a.variances[j]), (b.means[j], b.variances[j])))
        .collect();
    Ok(KlEstimate::exact(kl_product(&per?), KlMethod::ClosedForm))
}

/// `int p ln(p / q)` over a box by adaptive quadrature, for `n <= 2`.
pub fn kl_quadrature<P: Density, Q: Density>(p: &P, q: &Q, half_width: f64, tol: f64) -> Result<KlEstimate> {
    let integrand = |x: &[f64]| {
        let lp = p.log_density(x);
        if lp == f64::NEG_INFINITY {
            0.0
        } else {
            lp.exp() * (lp - q.log_density(x))
        }
    };
    let r = (-half_width, half_width);
    let value = match p.dim() {
        1 => quadrature::integrate(|x| integrand(&[x]), r.0, r.1, tol),
        2 => quadrature::integrate_2d(|x, y| integrand(&[x, y]), r, r, tol),
        n => return Err(Error::invalid(format!("quadrature KL supports n <= 2, got {n}"))),
    };
    Ok(KlEstimate::exact(value, KlMethod::Quadrature))
}

/// Mean and sum of squared deviations of one chunk, merged pairwise.
#[derive(Clone, Copy)]
struct Moments {
    count: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn merge(self, o: Moments) -> Moments {
        if self.count == 0.0 {
            return o;
        }
        let count = self.count + o.count;
        let d = o.mean - self.mean;
        Moments {
            count,
            mean: self.mean + d * o.count / count,
            m2: self.m2 + o.m2 + d * d * self.count * o.count / count,
        }
    }
}

const CHUNK: usize = 4096;

/// Monte-Carlo `KL(p || q)` from `m` draws of `p`.
pub fn kl_monte_carlo<P, Q>(p: &P, q: &Q, m: usize, seed: u64) -> Result<KlEstimate>
where
    P: Density + Sampler + Sync,
    Q: Density + Sync,
{
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            found: q.dim(),
        });
    }
    let samples = p.sample(m, seed)?;
    let n = samples.n();
    let chunks: Vec<Result<Moments>> = samples
        .as_slice()
        .par_chunks(CHUNK * n)
        .enumerate()
        .map(|(c, chunk)| {
            let mut acc = Moments {
                count: 0.0,
                mean: 0.0,
                m2: 0.0,
            };
            for (r, x) in chunk.chunks_exact(n).enumerate() {
                let v = p.log_density(x) - q.log_density(x);
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "log ratio {v} at draw {} = {x:?}",
                        c * CHUNK + r
                    )));
                }
                acc.count += 1.0;
                let d = v - acc.mean;
                acc.mean += d / acc.count;
                acc.m2 += d * (v - acc.mean);
            }
            Ok(acc)
        })
        .collect();
    let mut total = Moments {
        count: 0.0,
        mean: 0.0,
        m2: 0.0,
    };
    for c in chunks {
        total = total.merge(c?);
    }
    let var = if total.count > 1.0 {
        total.m2 / (total.count - 1.0)
    } else {
        0.0
    };
    Ok(KlEstimate {
        value: total.mean,
        std_error: (var / total.count).sqrt(),
        m: m as u64,
        method: KlMethod::MonteCarlo,
        seed: Some(seed),
    })
}

/// Comparison of `KL(P_M || Q)` with `KL(P || Q)` for the box-truncated `P_M`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruncationGapReport {
    pub eps: f64,
    pub theta: f64,
    pub m_box: f64,
    pub kl_truncated: KlEstimate,
    pub kl_full: KlEstimate,
    pub gap: f64,
    pub combined_std_error: f64,
    /// `4 eps + 2 eps KL(P || Q)`.
    pub bound: f64,
    pub pass: bool,
}

/// Estimates both divergences with `m` draws each and checks
/// `|gap| <= 4 eps + 2 eps KL(P || Q) + 3 combined standard errors`.
pub fn truncation_kl_gap(
    p: &MixtureModel,
    q: &MixtureModel,
    eps: f64,
    m: usize,
    seed: u64,
) -> Result<TruncationGapReport> {
    if p.bounds() != q.bounds() {
        return Err(Error::invalid("both models must share bounds"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("eps must be positive"));
    }
    let theta = theta_for(eps, p.bounds(), p.n());
    let m_box = tail_threshold(p.bounds(), theta)?;
    let pm = TruncatedMixture::new(p.clone(), m_box)?;
    let kl_truncated = kl_monte_carlo(&pm, q, m, seed)?;
    let kl_full = kl_monte_carlo(p, q, m, seed)?;
    let gap = kl_truncated.value - kl_full.value;
    let combined = kl_truncated.std_error.hypot(kl_full.std_error);
    let bound = 4.0 * eps + 2.0 * eps * kl_full.value.max(0.0);
    Ok(TruncationGapReport {
        eps,
        theta,
        m_box,
        kl_truncated,
        kl_full,
        gap,
        combined_std_error: combined,
        bound,
        pass: gap.abs() <= bound + 3.0 * combined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Bounds, Component};

    fn gauss(mean: f64, var: f64) -> MixtureModel {
        MixtureModel::new(
            Bounds::new(3.0, 0.5, 10.0).unwrap(),
            vec![1.0],
            vec![Component::new(vec![mean], vec![var]).unwrap()],
        )
        .unwrap()
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(kl_gaussian_1d((0.3, 1.7), (0.3, 1.7)).unwrap(), 0.0);
        assert!((kl_gaussian_1d((0.0, 1.0), (1.0, 1.0)).unwrap() - 0.5).abs() < 1e-15);
        let v = kl_gaussian_1d((0.0, 1.0), (0.0, 2.0)).unwrap();
        assert!((v - (0.5 * 2f64.ln() - 0.25)).abs() < 1e-15);
        let q = kl_quadrature(&gauss(0.0, 1.0), &gauss(0.0, 2.0), 40.0, 1e-12).unwrap();
        assert!((q.value - v).abs() < 1e-8);
        assert!(kl_gaussian_1d((0.0, 0.0), (0.0, 1.0)).is_err());
    }

    #[test]
    fn bound_examples() {
        assert_eq!(kl_gaussian_bound(0.0, 0.0, 0.7).unwrap(), 0.0);
        let v = kl_gaussian_bound(0.1, 0.01, 1.0).unwrap();
        assert!((v - (0.005 + 0.02 / 1.98)).abs() < 1e-15);
        assert!(kl_gaussian_bound(0.1, 1.0, 1.0).is_err());
    }

    #[test]
    fn product_sums() {
        assert_eq!(kl_product(&[0.0, 0.0]), 0.0);
        assert!((kl_product(&[0.5, 0.0965736]) - 0.5965736).abs() < 1e-15);
    }

    #[test]
    fn monte_carlo_is_zero_for_identical() {
        let p = gauss(0.5, 2.0);
        let e = kl_monte_carlo(&p, &p, 1000, 1).unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.std_error, 0.0);
    }

    #[test]
    fn monte_carlo_matches_closed_form() {
        let (p, q) = (gauss(0.0, 1.0), gauss(0.7, 2.5));
        let e = kl_monte_carlo(&p, &q, 200_000, 3).unwrap();
        let exact = kl_gaussian_1d((0.0, 1.0), (0.7, 2.5)).unwrap();
        assert!((e.value - exact).abs() < 3.0 * e.std_error, "{e:?} vs {exact}");
        assert_eq!(e, kl_monte_carlo(&p, &q, 200_000, 3).unwrap());
    }

    #[test]
    fn monte_carlo_matches_quadrature_for_bimodal() {
        let p = MixtureModel::new(
            Bounds::new(3.0, 0.5, 10.0).unwrap(),
            vec![0.5, 0.5],
            vec![
                Component::new(vec![-3.0], vec![1.0]).unwrap(),
                Component::new(vec![3.0], vec![1.0]).unwrap(),
            ],
        )
        .unwrap();
        let q = gauss(0.0, 10.0);
        let exact = kl_quadrature(&p, &q, 60.0, 1e-11).unwrap();
        let e = kl_monte_carlo(&p, &q, 200_000, 8).unwrap();
        assert!((e.value - exact.value).abs() < 3.0 * e.std_error, "{e:?} vs {exact:?}");
    }

    #[test]
    fn truncation_gap_passes_for_shifted_gaussian() {
        let b = Bounds::new(1.0, 1.0, 1.0).unwrap();
        let one =
            |mu: f64| MixtureModel::new(b, vec![1.0], vec![Component::new(vec![mu], vec![1.0]).unwrap()]).unwrap();
        let r = truncation_kl_gap(&one(0.0), &one(0.5), 0.1, 100_000, 2).unwrap();
        assert!(r.pass, "{r:?}");
        assert!((r.kl_full.value - 0.125).abs() < 3.0 * r.kl_full.std_error);
    }

    #[test]
    fn estimate_serializes_with_method_tag() {
        let s = serde_json::to_string(&KlEstimate::exact(0.5, KlMethod::ClosedForm)).unwrap();
        assert_eq!(
            s,
            r#"{"value":0.5,"std_error":0.0,"m":0,"method":"closed_form","seed":null}"#
        );
    }
}
