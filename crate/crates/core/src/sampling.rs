//! Drawing from mixtures, truncated product-moment estimation, and rejection
//! sampling from the box-truncated target.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{tail_threshold, theta_for, Bounds, MixtureModel, TruncatedMixture};
use crate::rng::{stream_rng, DRAW_BLOCK};

/// Rows of i.i.d. draws, stored row-major, with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    data: Vec<f64>,
    n: usize,
    pub seed: u64,
    pub source_desc: String,
}

impl SampleSet {
    pub fn new(data: Vec<f64>, n: usize, seed: u64, source_desc: impl Into<String>) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("samples need at least one column"));
        }
        if data.is_empty() || !data.len().is_multiple_of(n) {
            return Err(Error::invalid(format!(
                "{} values do not form a nonempty matrix with {n} columns",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sample row {}, column {}", pos / n, pos % n)));
        }
        Ok(SampleSet {
            data,
            n,
            seed,
            source_desc: source_desc.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn rows(&self) -> usize {
        self.data.len() / self.n
    }
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.n)
    }
    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().skip(j).step_by(self.n).copied()
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Splits into the first `rows` rows and the remainder.
    pub fn split_at(&self, rows: usize) -> Result<(SampleSet, SampleSet)> {
        if rows == 0 || rows >= self.rows() {
            return Err(Error::invalid(format!("cannot split {} rows at {rows}", self.rows())));
        }
        let (a, b) = self.data.split_at(rows * self.n);
        Ok((
            SampleSet::new(
                a.to_vec(),
                self.n,
                self.seed,
                format!("{} [rows 0..{rows}]", self.source_desc),
            )?,
            SampleSet::new(
                b.to_vec(),
                self.n,
                self.seed,
                format!("{} [rows {rows}..{}]", self.source_desc, self.rows()),
            )?,
        ))
    }

    /// Entrywise map, keeping shape and seed.
    pub fn map(&self, f: impl Fn(f64) -> f64, note: &str) -> Result<SampleSet> {
        SampleSet::new(
            self.data.iter().map(|&v| f(v)).collect(),
            self.n,
            self.seed,
            format!("{}; {note}", self.source_desc),
        )
    }
}

/// Anything that can produce seeded i.i.d. draws.
pub trait Sampler {
    fn sample(&self, m: usize, seed: u64) -> Result<SampleSet>;
}

impl Sampler for MixtureModel {
    fn sample(&self, m: usize, seed: u64) -> Result<SampleSet> {
        draw_mixture(self, m, seed)
    }
}

impl Sampler for TruncatedMixture {
    fn sample(&self, m: usize, seed: u64) -> Result<SampleSet> {
        draw_truncated(self.base(), self.m_box(), m, seed)
    }
}

/// Endless stream of mixture draws in blocks of [`DRAW_BLOCK`] rows. Block
/// `b` comes from ChaCha stream `b`, so any prefix is reproducible.
pub struct DrawStream<'a> {
    model: &'a MixtureModel,
    cumulative: Vec<f64>,
    fallback: usize,
    seed: u64,
    block: u64,
    buf: Vec<f64>,
}

impl<'a> DrawStream<'a> {
    pub fn new(model: &'a MixtureModel, seed: u64) -> Self {
        let mut acc = 0.0;
        let cumulative = model
            .weights()
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        let fallback = model.weights().iter().rposition(|&w| w > 0.0).unwrap_or(0);
        DrawStream {
            model,
            cumulative,
            fallback,
            seed,
            block: 0,
            buf: Vec::with_capacity(DRAW_BLOCK * model.n()),
        }
    }

    /// Fills and returns the next block of rows, row-major.
    pub fn next_block(&mut self) -> &[f64] {
        let mut rng = stream_rng(self.seed, self.block);
        self.block += 1;
        self.buf.clear();
        let comps = self.model.components();
        for _ in 0..DRAW_BLOCK {
            let u: f64 = rng.random();
            let i = self.cumulative.iter().position(|&c| u < c).unwrap_or(self.fallback);
            let c = &comps[i];
            for (&mu, &var) in c.means.iter().zip(&c.variances) {
                let z: f64 = rng.sample(StandardNormal);
                self.buf.push(mu + var.sqrt() * z);
            }
        }
        &self.buf
    }
}

fn source(model: &MixtureModel, what: &str, seed: u64) -> String {
    format!("{what} k={} n={} seed={seed}", model.k(), model.n())
}

/// `m` i.i.d. rows from `model`, deterministic in `seed`.
pub fn draw_mixture(model: &MixtureModel, m: usize, seed: u64) -> Result<SampleSet> {
    if m == 0 {
        return Err(Error::invalid("need at least one draw"));
    }
    let n = model.n();
    let mut data = Vec::with_capacity(m * n);
    let mut stream = DrawStream::new(model, seed);
    while data.len() < m * n {
        let need = m * n - data.len();
        let block = stream.next_block();
        data.extend_from_slice(&block[..need.min(block.len())]);
    }
    SampleSet::new(data, n, seed, source(model, "mixture", seed))
}

/// `m` draws from `model` restricted to `[-m_box, m_box]^n`, by rejection
/// from the same stream [`draw_mixture`] uses. More than `2 m` proposals, an
/// acceptance rate under 1/2, is an error.
pub fn draw_truncated(model: &MixtureModel, m_box: f64, m: usize, seed: u64) -> Result<SampleSet> {
    Ok(draw_truncated_counted(model, m_box, m, seed)?.0)
}

/// [`draw_truncated`] that also returns the number of proposals consumed.
pub fn draw_truncated_counted(model: &MixtureModel, m_box: f64, m: usize, seed: u64) -> Result<(SampleSet, u64)> {
    if m == 0 {
        return Err(Error::invalid("need at least one draw"));
    }
    if !(m_box > 0.0) {
        return Err(Error::invalid(format!("box half-width {m_box} must be positive")));
    }
    let n = model.n();
    let limit = 2 * m as u64;
    let mut data = Vec::with_capacity(m * n);
    let mut proposed = 0u64;
    let mut stream = DrawStream::new(model, seed);
    'outer: loop {
        for row in stream.next_block().chunks_exact(n) {
            proposed += 1;
            if row.iter().all(|v| v.abs() <= m_box) {
                data.extend_from_slice(row);
                if data.len() == m * n {
                    break 'outer;
                }
            }
            if proposed > limit {
                return Err(Error::AcceptanceRate {
                    rate: (data.len() / n) as f64 / proposed as f64,
                    cap: m_box,
                });
            }
        }
    }
    let set = SampleSet::new(data, n, seed, source(model, &format!("truncated M={m_box}"), seed))?;
    Ok((set, proposed))
}

/// Result of the truncated empirical mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedMean {
    pub mean: f64,
    pub std_error: f64,
    pub accepted: u64,
    pub proposed: u64,
}

/// Smallest `m` with `(cap / eps)^2 ln(2 / delta) / 2 <= m`.
pub fn hoeffding_count(cap: f64, eps: f64, delta: f64) -> u64 {
    ((cap / eps).powi(2) * (2.0 / delta).ln() / 2.0).ceil() as u64
}

/// Accuracy certified by Hoeffding for `m` draws: inverse of [`hoeffding_count`].
pub fn hoeffding_eps(cap: f64, m: u64, delta: f64) -> f64 {
    cap * ((2.0 / delta).ln() / (2.0 * m as f64)).sqrt()
}

/// Mean of the first `m` values with `|v| <= c_cap`, with the acceptance
/// guard: if the rate over at most `10 m` proposals drops below 1/2 the
/// estimate is refused.
pub fn truncated_mean(values: impl IntoIterator<Item = f64>, c_cap: f64, m: u64) -> Result<TruncatedMean> {
    if !(c_cap > 0.0) {
        return Err(Error::invalid(format!("cap {c_cap} must be positive")));
    }
    if m == 0 {
        return Err(Error::invalid("need at least one accepted value"));
    }
    let window = 10 * m;
    let (mut accepted, mut proposed) = (0u64, 0u64);
    // Welford accumulation keeps the variance stable for large caps.
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for v in values {
        proposed += 1;
        if v.abs() <= c_cap {
            accepted += 1;
            let d = v - mean;
            mean += d / accepted as f64;
            m2 += d * (v - mean);
            if accepted == m {
                break;
            }
        }
        if proposed >= window {
            break;
        }
    }
    let rate = if proposed == 0 {
        0.0
    } else {
        accepted as f64 / proposed as f64
    };
    if accepted < m && proposed < window {
        return Err(Error::InsufficientSamples {
            what: format!("truncated mean with cap {c_cap}"),
            required: m,
            available: accepted,
        });
    }
    if accepted < m || rate < 0.5 {
        return Err(Error::AcceptanceRate { rate, cap: c_cap });
    }
    let var = if accepted > 1 { m2 / (accepted - 1) as f64 } else { 0.0 };
    Ok(TruncatedMean {
        mean,
        std_error: (var / accepted as f64).sqrt(),
        accepted,
        proposed,
    })
}

/// The truncated empirical mean itself.
pub fn estimate_truncated_mean(values: impl IntoIterator<Item = f64>, c_cap: f64, m: u64) -> Result<f64> {
    truncated_mean(values, c_cap, m).map(|t| t.mean)
}

/// Mean over every value with `|v| <= c_cap`, acceptance guard included.
fn truncated_mean_all(values: impl Iterator<Item = f64>, c_cap: f64) -> Result<TruncatedMean> {
    let (mut accepted, mut proposed) = (0u64, 0u64);
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for v in values {
        proposed += 1;
        if v.abs() <= c_cap {
            accepted += 1;
            let d = v - mean;
            mean += d / accepted as f64;
            m2 += d * (v - mean);
        }
    }
    let rate = if proposed == 0 {
        0.0
    } else {
        accepted as f64 / proposed as f64
    };
    if accepted == 0 || rate < 0.5 {
        return Err(Error::AcceptanceRate { rate, cap: c_cap });
    }
    let var = if accepted > 1 { m2 / (accepted - 1) as f64 } else { 0.0 };
    Ok(TruncatedMean {
        mean,
        std_error: (var / accepted as f64).sqrt(),
        accepted,
        proposed,
    })
}

/// Off-diagonal symmetric matrix: one stored value per unordered pair, so
/// `get(j, l) == get(l, j)` holds exactly. Serialized as a full matrix with
/// `null` on the unused diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMatrix<T> {
    n: usize,
    vals: Vec<T>,
}

impl<T: Copy + Default> PairMatrix<T> {
    pub fn new(n: usize) -> Self {
        PairMatrix {
            n,
            vals: vec![T::default(); n * n.saturating_sub(1) / 2],
        }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut p = PairMatrix::new(n);
        for j in 0..n {
            for l in j + 1..n {
                let idx = p.index(j, l);
                p.vals[idx] = f(j, l);
            }
        }
        p
    }

    fn index(&self, j: usize, l: usize) -> usize {
        assert!(j != l && j < self.n && l < self.n, "pair ({j}, {l}) out of range");
        let (a, b) = if j < l { (j, l) } else { (l, j) };
        // Row-major upper triangle.
        a * (2 * self.n - a - 1) / 2 + (b - a - 1)
    }

    pub fn get(&self, j: usize, l: usize) -> T {
        self.vals[self.index(j, l)]
    }

    pub fn set(&mut self, j: usize, l: usize, v: T) {
        let idx = self.index(j, l);
        self.vals[idx] = v;
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }
    pub fn values(&self) -> &[T] {
        &self.vals
    }
}

impl<T: Copy + Default + Serialize> Serialize for PairMatrix<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let full: Vec<Vec<Option<T>>> = (0..self.n)
            .map(|j| (0..self.n).map(|l| (j != l).then(|| self.get(j, l))).collect())
            .collect();
        full.serialize(s)
    }
}

impl<'de, T: Copy + Default + PartialEq + Deserialize<'de>> Deserialize<'de> for PairMatrix<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let full: Vec<Vec<Option<T>>> = Vec::deserialize(d)?;
        let n = full.len();
        let mut p = PairMatrix::new(n);
        for (j, row) in full.iter().enumerate() {
            if row.len() != n {
                return Err(D::Error::custom("pair matrix must be square"));
            }
            for l in j + 1..n {
                match (row[l], full[l][j]) {
                    (Some(a), Some(b)) if a == b => p.set(j, l, a),
                    _ => return Err(D::Error::custom(format!("pair ({j}, {l}) missing or asymmetric"))),
                }
            }
        }
        Ok(p)
    }
}

/// Truncation caps used for each family of moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentCaps {
    pub first: f64,
    pub second: f64,
    pub pair: f64,
    pub pair_sq: f64,
}

impl MomentCaps {
    pub fn from_box(m_box: f64) -> Self {
        let m2 = m_box * m_box;
        MomentCaps {
            first: m_box,
            second: m2,
            pair: m2,
            pair_sq: m2 * m2,
        }
    }
}

/// Accepted-value counts per entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentCounts {
    pub first: Vec<u64>,
    pub second: Vec<u64>,
    pub pair: PairMatrix<u64>,
    pub pair_sq: PairMatrix<u64>,
}

/// How many rows each entry may consume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleUse {
    /// Exactly the Hoeffding count per entry; too few rows is an error.
    Hoeffding,
    /// Every row; the certified accuracy is reported instead.
    AllRows,
}

/// Estimated first, second and pairwise product moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentTable {
    pub n: usize,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub pair: PairMatrix<f64>,
    pub pair_sq: PairMatrix<f64>,
    pub first_se: Vec<f64>,
    pub second_se: Vec<f64>,
    pub pair_se: PairMatrix<f64>,
    pub pair_sq_se: PairMatrix<f64>,
    pub sample_counts: MomentCounts,
    pub caps: Option<MomentCaps>,
    pub theta: Option<f64>,
    /// Hoeffding accuracy of the least accurate entry family at `delta`.
    pub certified_eps: Option<f64>,
    pub delta: Option<f64>,
}

impl MomentTable {
    /// The exact moments of `model`, with zero standard errors.
    pub fn exact(model: &MixtureModel) -> Self {
        let n = model.n();
        let w = model.weights();
        let c = model.components();
        let sum = |f: &dyn Fn(usize) -> f64| (0..model.k()).map(|i| w[i] * f(i)).sum::<f64>();
        let s2 = |i: usize, j: usize| c[i].means[j].powi(2) + c[i].variances[j];
        MomentTable {
            n,
            first: (0..n).map(|j| sum(&|i| c[i].means[j])).collect(),
            second: (0..n).map(|j| sum(&|i| s2(i, j))).collect(),
            pair: PairMatrix::from_fn(n, |j, l| sum(&|i| c[i].means[j] * c[i].means[l])),
            pair_sq: PairMatrix::from_fn(n, |j, l| sum(&|i| s2(i, j) * s2(i, l))),
            first_se: vec![0.0; n],
            second_se: vec![0.0; n],
            pair_se: PairMatrix::new(n),
            pair_sq_se: PairMatrix::new(n),
            sample_counts: MomentCounts {
                first: vec![0; n],
                second: vec![0; n],
                pair: PairMatrix::new(n),
                pair_sq: PairMatrix::new(n),
            },
            caps: None,
            theta: None,
            certified_eps: None,
            delta: None,
        }
    }
}

/// Options for [`estimate_moment_table_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentOptions {
    pub eps: f64,
    pub delta: f64,
    pub sample_use: SampleUse,
    /// Overrides the default tail probability policy.
    pub theta: Option<f64>,
}

/// Hoeffding-sized table: every entry uses its own required count and too
/// few rows is an error naming that count.
pub fn estimate_moment_table(samples: &SampleSet, bounds: &Bounds, eps: f64, delta: f64) -> Result<MomentTable> {
    estimate_moment_table_with(
        samples,
        bounds,
        &MomentOptions {
            eps,
            delta,
            sample_use: SampleUse::Hoeffding,
            theta: None,
        },
    )
}

pub fn estimate_moment_table_with(samples: &SampleSet, bounds: &Bounds, opts: &MomentOptions) -> Result<MomentTable> {
    if !(opts.eps > 0.0) || !(opts.delta > 0.0 && opts.delta < 1.0) {
        return Err(Error::invalid("eps must be positive and delta in (0, 1)"));
    }
    let n = samples.n();
    let theta = opts.theta.unwrap_or_else(|| theta_for(opts.eps, bounds, n));
    let m_box = tail_threshold(bounds, theta)?;
    let caps = MomentCaps::from_box(m_box);
    let rows = samples.rows() as u64;

    let need = |cap: f64| hoeffding_count(cap, opts.eps, opts.delta);
    let estimate = |values: &mut dyn Iterator<Item = f64>, cap: f64| -> Result<TruncatedMean> {
        match opts.sample_use {
            SampleUse::Hoeffding => {
                let m = need(cap);
                if m > rows {
                    return Err(Error::InsufficientSamples {
                        what: format!("moment estimate with cap {cap:.4e}"),
                        required: m,
                        available: rows,
                    });
                }
                truncated_mean(values, cap, m)
            }
            SampleUse::AllRows => truncated_mean_all(values, cap),
        }
    };

    let mut first = Vec::with_capacity(n);
    let mut second = Vec::with_capacity(n);
    let mut first_se = Vec::with_capacity(n);
    let mut second_se = Vec::with_capacity(n);
    let mut counts_first = Vec::with_capacity(n);
    let mut counts_second = Vec::with_capacity(n);
    for j in 0..n {
        let t = estimate(&mut samples.column(j), caps.first)?;
        first.push(t.mean);
        first_se.push(t.std_error);
        counts_first.push(t.accepted);
        let t = estimate(&mut samples.column(j).map(|v| v * v), caps.second)?;
        second.push(t.mean);
        second_se.push(t.std_error);
        counts_second.push(t.accepted);
    }
    let mut pair = PairMatrix::new(n);
    let mut pair_sq = PairMatrix::new(n);
    let mut pair_se = PairMatrix::new(n);
    let mut pair_sq_se = PairMatrix::new(n);
    let mut counts_pair = PairMatrix::new(n);
    let mut counts_pair_sq = PairMatrix::new(n);
    for j in 0..n {
        for l in j + 1..n {
            let mut prod = samples.iter_rows().map(|r| r[j] * r[l]);
            let t = estimate(&mut prod, caps.pair)?;
            pair.set(j, l, t.mean);
            pair_se.set(j, l, t.std_error);
            counts_pair.set(j, l, t.accepted);
            let mut prod = samples.iter_rows().map(|r| (r[j] * r[l]).powi(2));
            let t = estimate(&mut prod, caps.pair_sq)?;
            pair_sq.set(j, l, t.mean);
            pair_sq_se.set(j, l, t.std_error);
            counts_pair_sq.set(j, l, t.accepted);
        }
    }

    // Worst certified accuracy over the entry families actually present.
    let family_eps = |cap: f64, counts: &[u64]| {
        counts
            .iter()
            .map(|&c| hoeffding_eps(cap, c, opts.delta))
            .fold(0.0f64, f64::max)
    };
    let certified = family_eps(caps.first, &counts_first)
        .max(family_eps(caps.second, &counts_second))
        .max(family_eps(caps.pair, counts_pair.values()))
        .max(family_eps(caps.pair_sq, counts_pair_sq.values()));

    Ok(MomentTable {
        n,
        first,
        second,
        pair,
        pair_sq,
        first_se,
        second_se,
        pair_se,
        pair_sq_se,
        sample_counts: MomentCounts {
            first: counts_first,
            second: counts_second,
            pair: counts_pair,
            pair_sq: counts_pair_sq,
        },
        caps: Some(caps),
        theta: Some(theta),
        certified_eps: Some(certified),
        delta: Some(opts.delta),
    })
}
