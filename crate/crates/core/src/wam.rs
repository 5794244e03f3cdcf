//! Weights-and-means candidate generation.
//!
//! Every guess fixes the mixing weights and the means of the active
//! components on a few seed coordinates. The remaining means follow from the
//! pair moments by a linear solve, because within one component coordinates
//! are independent: `E[Z_s Z_j] = sum_i pi_i mu_is mu_ij`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::sampling::{MomentTable, PairMatrix};

/// Which moments a run reads: the raw ones, or those of the squared data.
#[derive(Debug, Clone, Copy)]
pub struct MomentView<'a> {
    pub first: &'a [f64],
    pub first_se: &'a [f64],
    pub pair: &'a PairMatrix<f64>,
    pub pair_se: &'a PairMatrix<f64>,
}

impl<'a> MomentView<'a> {
    pub fn n(&self) -> usize {
        self.first.len()
    }
}

impl MomentTable {
    /// `E[Z_j]` and `E[Z_j Z_l]`.
    pub fn raw(&self) -> MomentView<'_> {
        MomentView {
            first: &self.first,
            first_se: &self.first_se,
            pair: &self.pair,
            pair_se: &self.pair_se,
        }
    }

    /// The same moments of `(Z_1^2, ..., Z_n^2)`: `E[Z_j^2]` and `E[Z_j^2 Z_l^2]`.
    pub fn squared(&self) -> MomentView<'_> {
        MomentView {
            first: &self.second,
            first_se: &self.second_se,
            pair: &self.pair_sq,
            pair_se: &self.pair_sq_se,
        }
    }
}

/// Consistency pruning of partial guesses against first and pair moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Standard errors allowed for sampling noise.
    pub z: f64,
    /// Multiplier on the worst-case grid rounding error; 0 for exact grids.
    pub slack: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig { z: 4.0, slack: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WamConfig {
    pub k: usize,
    pub u_bound: f64,
    pub eps: f64,
    pub grid_weights: f64,
    pub grid_means: f64,
    pub seed_coords: usize,
    pub cond_threshold: f64,
    /// Interval of the mean grid; `[-U, U]` unless the values are known to be signed.
    pub mean_range: (f64, f64),
    /// Add `sum_i pi_i mu_ij = E[Z_j]` to each solve as an extra row.
    pub first_moment_row: bool,
    pub prune: Option<PruneConfig>,
    /// Keep only this many candidates with the smallest moment residual.
    pub max_list: Option<usize>,
    /// Limit on visited search nodes.
    pub max_work: Option<u64>,
    /// Drop candidates within this max-abs distance of an earlier one.
    pub dedup_tol: Option<f64>,
    /// Random seed-coordinate subsets tried if the first one yields nothing.
    pub retries: usize,
    pub seed: u64,
}

impl WamConfig {
    /// Defaults: both grid steps `eps / 2`, threshold `eps / (4k)`, `k` retries,
    /// and the first-moment row in every solve.
    pub fn new(k: usize, u_bound: f64, eps: f64) -> Self {
        WamConfig {
            k,
            u_bound,
            eps,
            grid_weights: eps / 2.0,
            grid_means: eps / 2.0,
            seed_coords: k,
            cond_threshold: eps / (4.0 * k.max(1) as f64),
            mean_range: (-u_bound, u_bound),
            first_moment_row: true,
            prune: None,
            max_list: None,
            max_work: None,
            dedup_tol: None,
            retries: k,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if !(self.u_bound > 0.0 && self.u_bound.is_finite()) {
            return Err(Error::invalid("U must be positive and finite"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("eps must be positive"));
        }
        for (name, step) in [("weight", self.grid_weights), ("mean", self.grid_means)] {
            if !(step > 0.0 && step <= self.eps) {
                return Err(Error::invalid(format!(
                    "{name} grid step {step} must lie in (0, eps = {}]",
                    self.eps
                )));
            }
        }
        if self.grid_weights > 1.0 {
            return Err(Error::invalid("weight grid step must be at most 1"));
        }
        if self.seed_coords != self.k {
            return Err(Error::invalid("seed_coords must equal k"));
        }
        if !(self.cond_threshold >= 0.0) {
            return Err(Error::invalid("cond_threshold must be nonnegative"));
        }
        let (lo, hi) = self.mean_range;
        if !(lo < hi && lo >= -self.u_bound && hi <= self.u_bound) {
            return Err(Error::invalid(format!(
                "mean range ({lo}, {hi}) must be a nonempty subset of [-U, U]"
            )));
        }
        Ok(())
    }
}

/// Position of a candidate in the enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridIndex {
    pub attempt: u32,
    pub weights: u64,
    pub means: u64,
}

/// Raw weight guesses and a full mean matrix (`means[i][j]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateWM {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub seed_coords: Vec<usize>,
    pub grid_index: Option<GridIndex>,
    /// Standardized squared misfit to all first and pair moments.
    pub residual: Option<f64>,
}

impl CandidateWM {
    pub fn k(&self) -> usize {
        self.weights.len()
    }
    pub fn n(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }
}

/// A guess on the seed coordinates only: `seed_means[i][t]` is the mean of
/// component `i` on coordinate `seed_coords[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedGuess {
    pub weights: Vec<f64>,
    pub seed_coords: Vec<usize>,
    pub seed_means: Vec<Vec<f64>>,
}

/// Counters from one run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WamStats {
    pub attempts: u32,
    pub nodes: u64,
    pub enumerated: u64,
    pub rejected: u64,
    pub pruned: u128,
    pub emitted: u64,
    pub kept: u64,
}

impl WamStats {
    fn add(&mut self, o: &WamStats) {
        self.nodes += o.nodes;
        self.enumerated += o.enumerated;
        self.rejected += o.rejected;
        self.pruned = self.pruned.saturating_add(o.pruned);
        self.emitted += o.emitted;
    }
}

#[derive(Debug, Clone)]
pub struct WamOutput {
    pub candidates: Vec<CandidateWM>,
    pub stats: WamStats,
}

fn grid_points(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let first = (lo / step - 1e-9).ceil() as i64;
    let last = (hi / step + 1e-9).floor() as i64;
    let mut pts: Vec<f64> = (first..=last).map(|t| t as f64 * step).collect();
    pts.retain(|&v| v >= lo - 1e-12 && v <= hi + 1e-12);
    for v in pts.iter_mut() {
        *v = v.clamp(lo, hi);
    }
    if pts.first().is_none_or(|&v| v - lo > 1e-12) {
        pts.insert(0, lo);
    }
    if pts.last().is_none_or(|&v| hi - v > 1e-12) {
        pts.push(hi);
    }
    pts
}

/// Grid of guessed means: the multiples of `step` in `[lo, hi]`, plus the ends.
pub fn mean_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    grid_points(lo, hi, step)
}

/// All `k`-tuples from `{0, step, 2 step, ..., 1}` with sum in
/// `[1 - k step, 1 + k step]`, in lexicographic order.
pub fn weight_grid(k: usize, step: f64) -> Vec<Vec<f64>> {
    let values = grid_points(0.0, 1.0, step);
    let slack = k as f64 * step + 1e-12;
    let mut out = Vec::new();
    let mut idx = vec![0usize; k];
    loop {
        let s: f64 = idx.iter().map(|&i| values[i]).sum();
        if (s - 1.0).abs() <= slack {
            out.push(idx.iter().map(|&i| values[i]).collect());
        }
        // Mixed-radix increment, last position fastest.
        let mut pos = k;
        loop {
            if pos == 0 {
                return out;
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < values.len() {
                break;
            }
            idx[pos] = 0;
        }
    }
}

fn active_count(weights: &[f64]) -> usize {
    weights.iter().filter(|&&w| w > 0.0).count()
}

/// Leaves of the full search (before rejection or pruning) for one attempt.
pub fn enumeration_count(config: &WamConfig, n: usize) -> u128 {
    let g = mean_grid(config.mean_range.0, config.mean_range.1, config.grid_means).len() as u128;
    weight_grid(config.k, config.grid_weights)
        .iter()
        .map(|w| {
            let kp = active_count(w);
            if kp == 0 {
                0
            } else {
                g.saturating_pow((kp * kp.min(n)) as u32)
            }
        })
        .fold(0u128, |a, b| a.saturating_add(b))
}

/// Search nodes visited with no pruning, for one attempt.
pub fn node_count(config: &WamConfig, n: usize) -> u128 {
    let g = mean_grid(config.mean_range.0, config.mean_range.1, config.grid_means).len() as u128;
    weight_grid(config.k, config.grid_weights)
        .iter()
        .map(|w| {
            let kp = active_count(w);
            let depth = if kp == 0 { 0 } else { kp * kp.min(n) };
            (1..=depth as u32).fold(0u128, |a, d| a.saturating_add(g.saturating_pow(d)))
        })
        .fold(0u128, |a, b| a.saturating_add(b))
}

/// Least-squares solver for one leaf: `x = (A^T A)^{-1} A^T b`.
struct LeafSolver {
    kp: usize,
    rows: usize,
    /// `(A^T A)^{-1} A^T`, `kp x rows`, row-major.
    pinv: Vec<f64>,
    sigma_min: f64,
}

impl LeafSolver {
    fn new(a: &[f64], rows: usize, kp: usize) -> Option<LeafSolver> {
        // Gram matrix G = A^T A.
        let mut g = vec![0.0; kp * kp];
        for r in 0..rows {
            for i in 0..kp {
                for l in 0..kp {
                    g[i * kp + l] += a[r * kp + i] * a[r * kp + l];
                }
            }
        }
        let (lambda_min, ginv) = match kp {
            1 => (g[0], vec![1.0 / g[0]]),
            2 => {
                let (p, q, s) = (g[0], g[1], g[3]);
                let disc = ((p - s) * (p - s) + 4.0 * q * q).sqrt();
                let lmax = 0.5 * (p + s + disc);
                let det = p * s - q * q;
                // det / lmax avoids the cancellation in (tr - disc) / 2.
                let lmin = if lmax > 0.0 { (det / lmax).max(0.0) } else { 0.0 };
                (lmin, vec![s / det, -q / det, -q / det, p / det])
            }
            _ => {
                let gm = DMatrix::from_row_slice(kp, kp, &g);
                let lmin = gm.clone().symmetric_eigenvalues().min();
                let inv = gm.try_inverse()?;
                (lmin, (0..kp * kp).map(|t| inv[(t / kp, t % kp)]).collect())
            }
        };
        if !(lambda_min > 0.0) || ginv.iter().any(|v| !v.is_finite()) {
            return Some(LeafSolver {
                kp,
                rows,
                pinv: Vec::new(),
                sigma_min: 0.0,
            });
        }
        let mut pinv = vec![0.0; kp * rows];
        for i in 0..kp {
            for r in 0..rows {
                let mut acc = 0.0;
                for l in 0..kp {
                    acc += ginv[i * kp + l] * a[r * kp + l];
                }
                pinv[i * rows + r] = acc;
            }
        }
        Some(LeafSolver {
            kp,
            rows,
            pinv,
            sigma_min: lambda_min.sqrt(),
        })
    }

    fn solve(&self, b: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate().take(self.kp) {
            *o = (0..self.rows).map(|r| self.pinv[i * self.rows + r] * b[r]).sum();
        }
    }
}

/// Smallest singular value of the `rows x cols` row-major matrix `a`.
pub fn smallest_singular_value(a: &[f64], rows: usize, cols: usize) -> f64 {
    let m = DMatrix::from_row_slice(rows, cols, a);
    let sv: DVector<f64> = m.singular_values();
    if rows < cols {
        0.0
    } else {
        sv.min()
    }
}

/// Completes `guess` from the moments, or returns `None` if its solve matrix
/// has smallest singular value below `config.cond_threshold`.
pub fn reconstruct_means(
    guess: &SeedGuess,
    moments: &MomentView<'_>,
    config: &WamConfig,
) -> Result<Option<CandidateWM>> {
    let k = guess.weights.len();
    let n = moments.n();
    if k != config.k || guess.seed_means.len() != k {
        return Err(Error::DimensionMismatch {
            expected: config.k,
            found: k,
        });
    }
    let active: Vec<usize> = (0..k).filter(|&i| guess.weights[i] > 0.0).collect();
    let kp = active.len();
    if kp == 0 {
        return Ok(None);
    }
    let s = guess.seed_coords.len();
    if s < kp.min(n) || guess.seed_means.iter().any(|r| r.len() != s) {
        return Err(Error::DimensionMismatch {
            expected: kp.min(n),
            found: s,
        });
    }
    if guess.seed_coords.iter().any(|&c| c >= n) {
        return Err(Error::invalid("seed coordinate out of range"));
    }
    let used_seeds = &guess.seed_coords[..kp.min(n)];
    let mut vals = vec![vec![0.0; kp.min(n)]; kp];
    for (a, &i) in active.iter().enumerate() {
        vals[a].copy_from_slice(&guess.seed_means[i][..kp.min(n)]);
    }
    let weights: Vec<f64> = active.iter().map(|&i| guess.weights[i]).collect();
    let ctx = SolveCtx::new(moments, config, n);
    let Some(result) = ctx.complete(&weights, used_seeds, &vals) else {
        return Ok(None);
    };
    let mut means = vec![vec![0.0; n]; k];
    for (a, &i) in active.iter().enumerate() {
        means[i] = result.means[a].clone();
    }
    Ok(Some(CandidateWM {
        weights: guess.weights.clone(),
        means,
        seed_coords: guess.seed_coords.clone(),
        grid_index: None,
        residual: Some(result.residual),
    }))
}

struct Completed {
    means: Vec<Vec<f64>>,
    residual: f64,
}

struct SolveCtx<'a> {
    view: &'a MomentView<'a>,
    config: &'a WamConfig,
    n: usize,
}

impl<'a> SolveCtx<'a> {
    fn new(view: &'a MomentView<'a>, config: &'a WamConfig, n: usize) -> Self {
        SolveCtx { view, config, n }
    }

    /// Solves for all non-seed coordinates of the active components. `vals[a][t]`
    /// holds the guessed mean of active component `a` on `seeds[t]`.
    fn complete(&self, weights: &[f64], seeds: &[usize], vals: &[Vec<f64>]) -> Option<Completed> {
        let kp = weights.len();
        let n = self.n;
        let (lo, hi) = self.config.mean_range;
        let mut means = vec![vec![0.0; n]; kp];
        for a in 0..kp {
            for (t, &c) in seeds.iter().enumerate() {
                means[a][c] = vals[a][t];
            }
        }
        if seeds.len() == kp {
            let rows = kp + self.config.first_moment_row as usize;
            let mut amat = vec![0.0; rows * kp];
            for m in 0..kp {
                for i in 0..kp {
                    amat[m * kp + i] = weights[i] * vals[i][m];
                }
            }
            if self.config.first_moment_row {
                amat[kp * kp..].copy_from_slice(weights);
            }
            let solver = LeafSolver::new(&amat, rows, kp)?;
            if solver.sigma_min < self.config.cond_threshold || solver.pinv.is_empty() {
                return None;
            }
            let mut b = vec![0.0; rows];
            let mut x = vec![0.0; kp];
            for j in (0..n).filter(|j| !seeds.contains(j)) {
                for (m, &s) in seeds.iter().enumerate() {
                    b[m] = self.view.pair.get(s, j);
                }
                if self.config.first_moment_row {
                    b[kp] = self.view.first[j];
                }
                solver.solve(&b, &mut x);
                for a in 0..kp {
                    means[a][j] = if x[a].is_finite() { x[a].clamp(lo, hi) } else { 0.0 };
                }
            }
        }
        let residual = self.residual(weights, &means);
        Some(Completed { means, residual })
    }

    fn residual(&self, weights: &[f64], means: &[Vec<f64>]) -> f64 {
        let n = self.n;
        let mut r = 0.0;
        for j in 0..n {
            let pred: f64 = weights.iter().zip(means).map(|(w, m)| w * m[j]).sum();
            let z = (pred - self.view.first[j]) / (self.view.first_se[j] + 1e-9);
            r += z * z;
            for l in j + 1..n {
                let pred: f64 = weights.iter().zip(means).map(|(w, m)| w * m[j] * m[l]).sum();
                let z = (pred - self.view.pair.get(j, l)) / (self.view.pair_se.get(j, l) + 1e-9);
                r += z * z;
            }
        }
        r
    }
}

/// Residual-ordered entry for the bounded candidate heap.
struct Ranked(CandidateWM);

impl Ranked {
    fn key(&self) -> (f64, GridIndex) {
        (
            self.0.residual.unwrap_or(f64::INFINITY),
            self.0.grid_index.expect("indexed"),
        )
    }
}
impl PartialEq for Ranked {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Ranked {}
impl PartialOrd for Ranked {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Ranked {
    fn cmp(&self, o: &Self) -> Ordering {
        let (a, b) = (self.key(), o.key());
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
    }
}

enum Sink {
    All(Vec<CandidateWM>),
    Best(usize, BinaryHeap<Ranked>),
}

impl Sink {
    fn new(cap: Option<usize>) -> Sink {
        match cap {
            Some(c) => Sink::Best(c, BinaryHeap::with_capacity(c + 1)),
            None => Sink::All(Vec::new()),
        }
    }

    fn wants(&self, residual: f64, idx: GridIndex) -> bool {
        match self {
            Sink::All(_) => true,
            Sink::Best(cap, heap) => {
                *cap > 0
                    && (heap.len() < *cap
                        || heap.peek().is_some_and(|w| {
                            let (r, i) = w.key();
                            residual.total_cmp(&r).then(idx.cmp(&i)) == Ordering::Less
                        }))
            }
        }
    }

    fn push(&mut self, c: CandidateWM) {
        match self {
            Sink::All(v) => v.push(c),
            Sink::Best(cap, heap) => {
                heap.push(Ranked(c));
                if heap.len() > *cap {
                    heap.pop();
                }
            }
        }
    }

    fn merge(self, other: Sink) -> Sink {
        match (self, other) {
            (Sink::All(mut a), Sink::All(b)) => {
                a.extend(b);
                Sink::All(a)
            }
            (Sink::Best(cap, mut a), Sink::Best(_, b)) => {
                for r in b {
                    a.push(r);
                    if a.len() > cap {
                        a.pop();
                    }
                }
                Sink::Best(cap, a)
            }
            _ => unreachable!("sinks share one mode"),
        }
    }

    fn into_sorted(self) -> Vec<CandidateWM> {
        let mut v = match self {
            Sink::All(v) => v,
            Sink::Best(_, h) => h.into_iter().map(|r| r.0).collect(),
        };
        v.sort_by_key(|c| c.grid_index);
        v
    }
}

struct TupleSearch<'a> {
    ctx: SolveCtx<'a>,
    grid: &'a [f64],
    weights: Vec<f64>,
    active: Vec<usize>,
    seeds: Vec<usize>,
    k: usize,
    attempt: u32,
    w_index: u64,
    tau_first: Vec<f64>,
    tau_pair: Vec<Vec<f64>>,
    work: &'a AtomicU64,
    stats: WamStats,
    sink: Sink,
}

impl<'a> TupleSearch<'a> {
    fn depth(&self) -> usize {
        self.active.len() * self.seeds.len()
    }

    fn charge(&mut self) -> Result<()> {
        self.stats.nodes += 1;
        if let Some(limit) = self.ctx.config.max_work {
            let used = self.work.fetch_add(1, AtomicOrdering::Relaxed) + 1;
            if used > limit {
                return Err(Error::BudgetExhausted {
                    stage: "wam".into(),
                    used,
                    limit,
                });
            }
        }
        Ok(())
    }

    /// Checks coordinate `t` against its first moment and the pair moments
    /// with earlier seed coordinates.
    fn consistent(&self, t: usize, vals: &[Vec<f64>]) -> bool {
        let view = self.ctx.view;
        let c = self.seeds[t];
        let pred: f64 = self.weights.iter().zip(vals).map(|(w, v)| w * v[t]).sum();
        if (pred - view.first[c]).abs() > self.tau_first[t] {
            return false;
        }
        for u in 0..t {
            let pred: f64 = self.weights.iter().zip(vals).map(|(w, v)| w * v[t] * v[u]).sum();
            if (pred - view.pair.get(self.seeds[u], c)).abs() > self.tau_pair[t][u] {
                return false;
            }
        }
        true
    }

    fn run(&mut self) -> Result<()> {
        let kp = self.active.len();
        let mut vals = vec![vec![0.0; self.seeds.len()]; kp];
        let mut idx = vec![0usize; self.depth()];
        self.dfs(0, &mut vals, &mut idx)
    }

    fn dfs(&mut self, d: usize, vals: &mut [Vec<f64>], idx: &mut [usize]) -> Result<()> {
        let kp = self.active.len();
        let depth = self.depth();
        if d == depth {
            self.leaf(vals, idx);
            return Ok(());
        }
        let (t, a) = (d / kp, d % kp);
        let g = self.grid.len();
        for gi in 0..g {
            self.charge()?;
            vals[a][t] = self.grid[gi];
            idx[d] = gi;
            if a + 1 == kp && self.ctx.config.prune.is_some() && !self.consistent(t, vals) {
                let below = (g as u128).saturating_pow((depth - d - 1) as u32);
                self.stats.pruned = self.stats.pruned.saturating_add(below);
                continue;
            }
            self.dfs(d + 1, vals, idx)?;
        }
        Ok(())
    }

    fn leaf(&mut self, vals: &[Vec<f64>], idx: &[usize]) {
        self.stats.enumerated += 1;
        let g = self.grid.len() as u64;
        let m_index = idx
            .iter()
            .fold(0u64, |acc, &i| acc.wrapping_mul(g).wrapping_add(i as u64));
        let Some(done) = self.ctx.complete(&self.weights, &self.seeds, vals) else {
            self.stats.rejected += 1;
            return;
        };
        self.stats.emitted += 1;
        let gidx = GridIndex {
            attempt: self.attempt,
            weights: self.w_index,
            means: m_index,
        };
        if !self.sink.wants(done.residual, gidx) {
            return;
        }
        let n = self.ctx.n;
        let mut weights = vec![0.0; self.k];
        let mut means = vec![vec![0.0; n]; self.k];
        for (a, &i) in self.active.iter().enumerate() {
            weights[i] = self.weights[a];
            means[i] = done.means[a].clone();
        }
        self.sink.push(CandidateWM {
            weights,
            means,
            seed_coords: self.seeds.clone(),
            grid_index: Some(gidx),
            residual: Some(done.residual),
        });
    }
}

fn seed_subsets(config: &WamConfig, n: usize) -> Vec<Vec<usize>> {
    let s = config.seed_coords.min(n);
    let mut out = vec![(0..s).collect::<Vec<_>>()];
    if n > s {
        for r in 0..config.retries {
            let mut rng = stream_rng(config.seed, r as u64 + 1);
            let mut pick = rand::seq::index::sample(&mut rng, n, s).into_vec();
            pick.sort_unstable();
            out.push(pick);
        }
    }
    out
}

fn one_attempt(
    view: &MomentView<'_>,
    config: &WamConfig,
    seeds: &[usize],
    attempt: u32,
    work: &AtomicU64,
) -> Result<(Sink, WamStats)> {
    let n = view.n();
    let grid = mean_grid(config.mean_range.0, config.mean_range.1, config.grid_means);
    let tuples = weight_grid(config.k, config.grid_weights);
    let u_abs = config.mean_range.0.abs().max(config.mean_range.1.abs());
    let (ws, ms, k) = (config.grid_weights, config.grid_means, config.k as f64);
    let prune = config.prune.unwrap_or_default();
    let weight_mass = 1.0 + k * ws / 2.0;
    let round_first = k * (ws / 2.0) * u_abs + weight_mass * ms / 2.0;
    let round_pair = k * (ws / 2.0) * u_abs * u_abs + weight_mass * (u_abs * ms + ms * ms / 4.0);
    let floor = |est: f64| 1e-9 * est.abs().max(1.0);

    let results: Vec<Result<(Sink, WamStats)>> = tuples
        .par_iter()
        .enumerate()
        .map(|(w_index, w)| {
            let active: Vec<usize> = (0..config.k).filter(|&i| w[i] > 0.0).collect();
            let mut stats = WamStats::default();
            if active.is_empty() {
                return Ok((Sink::new(config.max_list), stats));
            }
            let used: Vec<usize> = seeds[..active.len().min(n)].to_vec();
            let tau_first = used
                .iter()
                .map(|&c| (prune.z * view.first_se[c] + prune.slack * round_first).max(floor(view.first[c])))
                .collect();
            let tau_pair = used
                .iter()
                .map(|&c| {
                    used.iter()
                        .take_while(|&&u| u != c)
                        .map(|&u| {
                            (prune.z * view.pair_se.get(u, c) + prune.slack * round_pair)
                                .max(floor(view.pair.get(u, c)))
                        })
                        .collect()
                })
                .collect();
            let mut search = TupleSearch {
                ctx: SolveCtx::new(view, config, n),
                grid: &grid,
                weights: active.iter().map(|&i| w[i]).collect(),
                active,
                seeds: used,
                k: config.k,
                attempt,
                w_index: w_index as u64,
                tau_first,
                tau_pair,
                work,
                stats: WamStats::default(),
                sink: Sink::new(config.max_list),
            };
            search.run()?;
            stats.add(&search.stats);
            Ok((search.sink, stats))
        })
        .collect();

    let mut sink = Sink::new(config.max_list);
    let mut stats = WamStats::default();
    for r in results {
        let (s, st) = r?;
        sink = sink.merge(s);
        stats.add(&st);
    }
    Ok((sink, stats))
}

fn dedup(cands: Vec<CandidateWM>, tol: f64) -> Vec<CandidateWM> {
    let mut kept: Vec<CandidateWM> = Vec::new();
    for c in cands {
        let close = kept.iter().any(|o| {
            c.weights.iter().zip(&o.weights).all(|(a, b)| (a - b).abs() <= tol)
                && c.means
                    .iter()
                    .flatten()
                    .zip(o.means.iter().flatten())
                    .all(|(a, b)| (a - b).abs() <= tol)
        });
        if !close {
            kept.push(c);
        }
    }
    kept
}

/// Enumerates the full guess grid and returns every accepted reconstruction,
/// ordered by grid index.
pub fn run_wam(moments: &MomentView<'_>, config: &WamConfig) -> Result<WamOutput> {
    config.validate()?;
    let n = moments.n();
    if n == 0 || moments.pair.n() != n || moments.first_se.len() != n {
        return Err(Error::invalid("moment view is inconsistent"));
    }
    if let (Some(limit), None) = (config.max_work, config.prune) {
        let predicted = node_count(config, n);
        if predicted > limit as u128 {
            return Err(Error::BudgetExhausted {
                stage: "wam (predicted)".into(),
                used: u64::try_from(predicted).unwrap_or(u64::MAX),
                limit,
            });
        }
    }
    let work = AtomicU64::new(0);
    let mut total = WamStats::default();
    for (attempt, seeds) in seed_subsets(config, n).iter().enumerate() {
        let (sink, stats) = one_attempt(moments, config, seeds, attempt as u32, &work)?;
        total.add(&stats);
        total.attempts += 1;
        let mut cands = sink.into_sorted();
        if let Some(tol) = config.dedup_tol {
            cands = dedup(cands, tol);
        }
        if !cands.is_empty() {
            total.kept = cands.len() as u64;
            log::debug!("wam attempt {attempt}: {total:?}");
            return Ok(WamOutput {
                candidates: cands,
                stats: total,
            });
        }
    }
    Err(Error::EmptyCandidates {
        stage: "wam".into(),
        advice: format!(
            "all {} guesses were rejected or pruned; lower cond_threshold (now {}) or widen the grid",
            total.enumerated, config.cond_threshold
        ),
    })
}
