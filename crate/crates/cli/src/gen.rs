//! Synthetic instance configs for `pacmix gen`.

use pacmix::rng::stream_rng;
use pacmix::{Bounds, Component, Error, MixtureModel, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One flat JSON file per instance. Parameters left out are drawn at random.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub k: usize,
    pub n: usize,
    pub mu_max: f64,
    pub sigma2_min: f64,
    pub sigma2_max: f64,
    pub seed: u64,
    /// Rows of the sample CSV.
    pub m: usize,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub means: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub variances: Option<Vec<Vec<f64>>>,
    /// Snap weights, means and second moments to multiples of `grid_step`.
    #[serde(default)]
    pub on_grid: bool,
    #[serde(default = "default_step")]
    pub grid_step: f64,
}

fn default_step() -> f64 {
    0.25
}

fn check_shape(what: &str, rows: &[Vec<f64>], k: usize, n: usize) -> Result<()> {
    if rows.len() != k || rows.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidInput(format!("{what} must be {k} rows of {n} values")));
    }
    Ok(())
}

fn snap(v: f64, step: f64) -> f64 {
    (v / step).round() * step
}

/// Largest-remainder rounding to multiples of `1 / units`, each at least one unit.
fn snap_weights(w: &[f64], units: usize) -> Result<Vec<f64>> {
    let k = w.len();
    if k > units {
        return Err(Error::InvalidInput(format!(
            "{k} components do not fit a grid of {units} weight units"
        )));
    }
    let total: f64 = w.iter().sum();
    let spare = (units - k) as f64;
    let raw: Vec<f64> = w.iter().map(|x| (x / total * units as f64 - 1.0).max(0.0)).collect();
    let raw_sum: f64 = raw.iter().sum();
    let scaled: Vec<f64> = raw
        .iter()
        .map(|r| {
            if raw_sum > 0.0 {
                r / raw_sum * spare
            } else {
                spare / k as f64
            }
        })
        .collect();
    let mut count: Vec<usize> = scaled.iter().map(|s| s.floor() as usize).collect();
    let mut left = units - k - count.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        (scaled[b] - scaled[b].floor())
            .total_cmp(&(scaled[a] - scaled[a].floor()))
            .then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        count[i] += 1;
        left -= 1;
    }
    Ok(count.iter().map(|&c| (c + 1) as f64 / units as f64).collect())
}

impl GenConfig {
    pub fn bounds(&self) -> Result<Bounds> {
        Bounds::new(self.mu_max, self.sigma2_min, self.sigma2_max)
    }

    pub fn build(&self) -> Result<MixtureModel> {
        let (k, n) = (self.k, self.n);
        if k == 0 || n == 0 {
            return Err(Error::InvalidInput("k and n must be positive".into()));
        }
        let b = self.bounds()?;
        let step = self.grid_step;
        if !(step > 0.0 && step <= 1.0) {
            return Err(Error::InvalidInput("grid_step must lie in (0, 1]".into()));
        }
        let mut rng = stream_rng(self.seed, u64::MAX);

        let mut weights = match &self.weights {
            Some(w) if w.len() != k => return Err(Error::InvalidInput(format!("weights must have {k} entries"))),
            Some(w) => w.clone(),
            None => {
                let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
                let total: f64 = w.iter().sum();
                w.into_iter().map(|x| x / total).collect()
            }
        };
        let mut means = match &self.means {
            Some(m) => {
                check_shape("means", m, k, n)?;
                m.clone()
            }
            None => (0..k)
                .map(|_| (0..n).map(|_| rng.random_range(-b.mu_max()..=b.mu_max())).collect())
                .collect(),
        };
        let mut variances = match &self.variances {
            Some(v) => {
                check_shape("variances", v, k, n)?;
                v.clone()
            }
            None => (0..k)
                .map(|_| {
                    (0..n)
                        .map(|_| rng.random_range(b.sigma2_min()..=b.sigma2_max()))
                        .collect()
                })
                .collect(),
        };

        if self.on_grid {
            let units = (1.0 / step).round() as usize;
            if ((units as f64) * step - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput(
                    "on-grid weights need 1 / grid_step to be an integer".into(),
                ));
            }
            weights = snap_weights(&weights, units)?;
            let lim = (b.mu_max() / step).floor() * step;
            for (mrow, vrow) in means.iter_mut().zip(variances.iter_mut()) {
                for (mu, var) in mrow.iter_mut().zip(vrow.iter_mut()) {
                    *mu = snap(*mu, step).clamp(-lim, lim);
                    // Put the second moment mu^2 + var on the grid when a grid point fits the variance range.
                    let lo = ((*mu * *mu + b.sigma2_min()) / step - 1e-9).ceil() * step;
                    let hi = ((*mu * *mu + b.sigma2_max()) / step + 1e-9).floor() * step;
                    if lo <= hi {
                        let s = snap(*mu * *mu + *var, step).clamp(lo, hi);
                        *var = (s - *mu * *mu).clamp(b.sigma2_min(), b.sigma2_max());
                    }
                }
            }
        }
        let comps = means
            .into_iter()
            .zip(variances)
            .map(|(m, v)| Component::new(m, v))
            .collect::<Result<Vec<_>>>()?;
        MixtureModel::new(b, weights, comps)
    }
}

/// Smallest over component pairs of the largest per-coordinate mean gap in
/// units of the larger standard deviation.
pub fn separation(model: &MixtureModel) -> Option<f64> {
    let cs = model.components();
    let mut best: Option<f64> = None;
    for i in 0..cs.len() {
        for l in i + 1..cs.len() {
            let gap = (0..model.n())
                .map(|j| {
                    let s = cs[i].variances[j].max(cs[l].variances[j]).sqrt();
                    (cs[i].means[j] - cs[l].means[j]).abs() / s
                })
                .fold(0.0, f64::max);
            best = Some(best.map_or(gap, |b: f64| b.min(gap)));
        }
    }
    best
}
