//! Exact t-SNE.
//!
//! High-dimensional similarities are Gaussian conditionals whose bandwidths
//! are calibrated per point to a target perplexity, symmetrized into a joint
//! distribution `P`. Low-dimensional similarities use the Student-t kernel
//! `(1 + |y_i - y_j|^2)^-1`, normalized over all pairs into `Q`. The map
//! minimizes `KL(P || Q)` with momentum gradient descent, per-coordinate
//! adaptive gains and an early-exaggeration phase.
//!
//! Everything is O(n^2). Row work may run on the rayon pool, but every
//! reduction is accumulated in a fixed order, so results do not depend on
//! the number of threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::FeatureMatrix;
use crate::{Embedding, Point2};

/// Lower bound applied to every off-diagonal entry of `P` and `Q`.
pub const PROB_FLOOR: f64 = 1e-12;
/// Allowed |H(P_i) - log2(perplexity)|, in bits.
pub const ENTROPY_TOL: f64 = 1e-5;
pub const MAX_BISECTIONS: usize = 50;
const MAX_BRACKET_STEPS: usize = 200;
const INIT_STD: f64 = 1e-4;
/// Cost is recorded every this many iterations and at the last one.
pub const COST_EVERY: usize = 50;
const PAR_MIN_ROWS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub exaggeration_factor: f64,
    pub exaggeration_iters: usize,
    pub learning_rate: f64,
    pub max_iters: usize,
    pub momentum_early: f64,
    pub momentum_late: f64,
    pub momentum_switch_iter: usize,
    pub seed: u64,
    pub min_gain: f64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            exaggeration_factor: 12.0,
            exaggeration_iters: 250,
            learning_rate: 200.0,
            max_iters: 1000,
            momentum_early: 0.5,
            momentum_late: 0.8,
            momentum_switch_iter: 250,
            seed: 0,
            min_gain: 0.01,
        }
    }
}

impl TsneConfig {
    /// Set the iteration budget. The exaggeration phase and the momentum
    /// switch are shortened to a quarter of budgets below four times their
    /// configured length.
    pub fn with_budget(self, max_iters: usize) -> Self {
        Self {
            max_iters,
            exaggeration_iters: self.exaggeration_iters.min(max_iters / 4),
            momentum_switch_iter: self.momentum_switch_iter.min(max_iters / 4),
            ..self
        }
    }

    /// Check the configuration against a point count.
    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.perplexity > 0.0) || !self.perplexity.is_finite() {
            return bad(format!("perplexity must be positive, got {}", self.perplexity));
        }
        if self.perplexity >= n as f64 {
            return Err(Error::PerplexityTooLarge {
                perplexity: self.perplexity,
                n,
            });
        }
        if !(self.exaggeration_factor >= 1.0) {
            return bad(format!(
                "exaggeration factor must be >= 1, got {}",
                self.exaggeration_factor
            ));
        }
        if self.exaggeration_iters > self.max_iters {
            return bad(format!(
                "exaggeration_iters ({}) exceeds max_iters ({})",
                self.exaggeration_iters, self.max_iters
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.min_gain > 0.0) {
            return bad(format!("min_gain must be positive, got {}", self.min_gain));
        }
        Ok(())
    }
}

/// Dense square matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            values: vec![0.0; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Sum over all entries, diagonal included.
    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    fn set_pair(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.n + j] = v;
        self.values[j * self.n + i] = v;
    }
}

/// A joint distribution over ordered pairs with zero diagonal.
pub type AffinityMatrix = SquareMatrix;

/// Squared Euclidean distances between the rows of `fm`.
pub fn pairwise_sq_dists(fm: &FeatureMatrix) -> Result<SquareMatrix> {
    let rows: Vec<&[f64]> = fm.rows().collect();
    sq_dists_of_rows(&rows)
}

pub(crate) fn sq_dists_of_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<SquareMatrix> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::TooFewPoints {
            required: 2,
            actual: n,
        });
    }
    if rows.iter().flat_map(|r| r.as_ref()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input points"));
    }
    let mut d = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = rows[i]
                .as_ref()
                .iter()
                .zip(rows[j].as_ref())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d.set_pair(i, j, s);
        }
    }
    Ok(d)
}

/// Outcome of the bandwidth search for one point.
#[derive(Debug, Clone, PartialEq)]
pub struct RowCalibration {
    pub sigma: f64,
    /// Conditional distribution over the other points, in input order.
    pub probs: Vec<f64>,
    pub entropy_bits: f64,
    pub perplexity: f64,
    /// False when the target was unattainable and the nearest achievable
    /// distribution was returned instead.
    pub converged: bool,
}

fn conditional(dist_row: &[f64], dmin: f64, sigma: f64, out: &mut [f64]) -> f64 {
    let beta = 1.0 / (2.0 * sigma * sigma);
    let mut sum = 0.0;
    for (p, &d) in out.iter_mut().zip(dist_row) {
        let shifted = d - dmin;
        *p = if shifted == 0.0 { 1.0 } else { (-shifted * beta).exp() };
        sum += *p;
    }
    let mut h = 0.0;
    for p in out.iter_mut() {
        *p /= sum;
        if *p > 0.0 {
            h -= *p * p.log2();
        }
    }
    h
}

/// Find the Gaussian bandwidth whose conditional distribution over
/// `dist_row` (squared distances to the other n-1 points) has the target
/// perplexity `2^H`.
///
/// The bracket is grown by doubling or halving sigma, then bisected at most
/// [`MAX_BISECTIONS`] times until `|H - log2(perplexity)| <= ENTROPY_TOL`.
pub fn calibrate_sigma(dist_row: &[f64], perplexity: f64) -> Result<RowCalibration> {
    let m = dist_row.len();
    if m == 0 {
        return Err(Error::TooFewPoints {
            required: 2,
            actual: 1,
        });
    }
    if !(perplexity > 0.0) || !perplexity.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "perplexity must be positive, got {perplexity}"
        )));
    }
    if perplexity >= (m + 1) as f64 {
        return Err(Error::PerplexityTooLarge {
            perplexity,
            n: m + 1,
        });
    }
    if dist_row.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::NonFinite("distance row"));
    }

    let target = perplexity.log2();
    let dmin = dist_row.iter().cloned().fold(f64::INFINITY, f64::min);
    let positive: Vec<f64> = dist_row.iter().cloned().filter(|d| *d > 0.0).collect();
    let sigma0 = if positive.is_empty() {
        1.0
    } else {
        (positive.iter().sum::<f64>() / positive.len() as f64).sqrt()
    };

    let mut probs = vec![0.0; m];
    let mut best = (f64::INFINITY, sigma0, 0.0);
    let mut eval = |sigma: f64, probs: &mut Vec<f64>| {
        let h = conditional(dist_row, dmin, sigma, probs);
        let err = (h - target).abs();
        if err < best.0 {
            best = (err, sigma, h);
        }
        h
    };
    let done = |sigma: f64, h: f64, probs: Vec<f64>| RowCalibration {
        sigma,
        probs,
        entropy_bits: h,
        perplexity: h.exp2(),
        converged: true,
    };

    let h0 = eval(sigma0, &mut probs);
    if (h0 - target).abs() <= ENTROPY_TOL {
        return Ok(done(sigma0, h0, probs));
    }

    // Entropy increases with sigma.
    let (mut lo, mut hi);
    let mut bracketed = false;
    if h0 < target {
        lo = sigma0;
        hi = sigma0;
        for _ in 0..MAX_BRACKET_STEPS {
            hi *= 2.0;
            let h = eval(hi, &mut probs);
            if (h - target).abs() <= ENTROPY_TOL {
                return Ok(done(hi, h, probs));
            }
            if h > target {
                bracketed = true;
                break;
            }
            lo = hi;
        }
    } else {
        lo = sigma0;
        hi = sigma0;
        for _ in 0..MAX_BRACKET_STEPS {
            lo *= 0.5;
            let h = eval(lo, &mut probs);
            if (h - target).abs() <= ENTROPY_TOL {
                return Ok(done(lo, h, probs));
            }
            if h < target {
                bracketed = true;
                break;
            }
            hi = lo;
        }
    }

    if bracketed {
        for _ in 0..MAX_BISECTIONS {
            let mid = 0.5 * (lo + hi);
            let h = eval(mid, &mut probs);
            if (h - target).abs() <= ENTROPY_TOL {
                return Ok(done(mid, h, probs));
            }
            if h < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }

    let (_, sigma, _) = best;
    let h = conditional(dist_row, dmin, sigma, &mut probs);
    Ok(RowCalibration {
        sigma,
        probs,
        entropy_bits: h,
        perplexity: h.exp2(),
        converged: false,
    })
}

/// Joint affinities plus per-point calibration results.
#[derive(Debug, Clone)]
pub struct JointAffinities {
    pub p: AffinityMatrix,
    pub sigmas: Vec<f64>,
    pub achieved_perplexity: Vec<f64>,
    /// Rows whose target perplexity was unattainable.
    pub unconverged_rows: Vec<usize>,
}

/// Raise off-diagonal entries below [`PROB_FLOOR`] to it and scale the rest
/// by one common factor so the off-diagonal total stays 1. Equal inputs stay
/// equal, so symmetry is preserved exactly.
fn floor_keeping_mass(values: &mut [f64], n: usize) {
    let off = |k: usize| k / n != k % n;
    let split = |scale: f64| {
        let (mut floored, mut rest) = (0usize, 0.0);
        for (k, &v) in values.iter().enumerate() {
            if off(k) {
                if v * scale < PROB_FLOOR {
                    floored += 1;
                } else {
                    rest += v;
                }
            }
        }
        (floored, rest)
    };
    let (mut floored, mut rest) = split(1.0);
    if floored == 0 {
        return;
    }
    let mut scale = 1.0;
    for _ in 0..8 {
        scale = (1.0 - floored as f64 * PROB_FLOOR) / rest;
        let (f, r) = split(scale);
        if f == floored {
            break;
        }
        (floored, rest) = (f, r);
    }
    for (k, v) in values.iter_mut().enumerate() {
        if off(k) {
            *v = (*v * scale).max(PROB_FLOOR);
        }
    }
}

/// `p_ij = (p_{j|i} + p_{i|j}) / 2n`, floored at [`PROB_FLOOR`] off the
/// diagonal with the floored mass taken back from the other entries.
pub fn joint_affinities(fm: &FeatureMatrix, perplexity: f64) -> Result<JointAffinities> {
    joint_affinities_from_dists(&pairwise_sq_dists(fm)?, perplexity)
}

pub fn joint_affinities_from_dists(dists: &SquareMatrix, perplexity: f64) -> Result<JointAffinities> {
    let n = dists.n();
    if perplexity >= n as f64 {
        return Err(Error::PerplexityTooLarge { perplexity, n });
    }
    let rows: Vec<RowCalibration> = (0..n)
        .into_par_iter()
        .map(|i| {
            let others: Vec<f64> = dists
                .row(i)
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, d)| *d)
                .collect();
            calibrate_sigma(&others, perplexity)
        })
        .collect::<Result<_>>()?;

    let cond = |i: usize, j: usize| {
        let k = if j < i { j } else { j - 1 };
        rows[i].probs[k]
    };
    let mut p = SquareMatrix::zeros(n);
    let denom = 2.0 * n as f64;
    for i in 0..n {
        for j in i + 1..n {
            p.set_pair(i, j, (cond(i, j) + cond(j, i)) / denom);
        }
    }
    floor_keeping_mass(&mut p.values, n);
    Ok(JointAffinities {
        p,
        sigmas: rows.iter().map(|r| r.sigma).collect(),
        achieved_perplexity: rows.iter().map(|r| r.perplexity).collect(),
        unconverged_rows: rows
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.converged)
            .map(|(i, _)| i)
            .collect(),
    })
}

#[inline]
fn kernel(a: &Point2, b: &Point2) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    1.0 / (1.0 + dx * dx + dy * dy)
}

/// Fill `w` with Student-t kernel values (zero diagonal) and return their
/// total, summed row by row in index order.
fn kernel_matrix(y: &[Point2], w: &mut [f64]) -> f64 {
    let n = y.len();
    let fill = |(i, row): (usize, &mut [f64])| -> f64 {
        let mut s = 0.0;
        for (j, out) in row.iter_mut().enumerate() {
            *out = if i == j { 0.0 } else { kernel(&y[i], &y[j]) };
            s += *out;
        }
        s
    };
    let row_sums: Vec<f64> = if n >= PAR_MIN_ROWS {
        w.par_chunks_mut(n).enumerate().map(fill).collect()
    } else {
        w.chunks_mut(n).enumerate().map(fill).collect()
    };
    row_sums.iter().sum()
}

/// Student-t affinities of a 2-D map, floored like the joint `P`.
pub fn low_dim_affinities(y: &[Point2]) -> Result<AffinityMatrix> {
    let n = y.len();
    if n < 2 {
        return Err(Error::TooFewPoints {
            required: 2,
            actual: n,
        });
    }
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding coordinates"));
    }
    let mut w = vec![0.0; n * n];
    let z = kernel_matrix(y, &mut w);
    w.iter_mut().for_each(|v| *v /= z);
    floor_keeping_mass(&mut w, n);
    Ok(SquareMatrix { n, values: w })
}

/// `KL(P || Q) = sum_{i != j} p_ij ln(p_ij / q_ij)`.
pub fn kl_cost(p: &AffinityMatrix, q: &AffinityMatrix) -> f64 {
    let n = p.n();
    let mut c = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let pij = p.get(i, j);
                if pij > 0.0 {
                    c += pij * (pij / q.get(i, j)).ln();
                }
            }
        }
    }
    c
}

/// `dC/dy_i = 4 sum_j (p_ij - q_ij)(y_i - y_j)(1 + |y_i - y_j|^2)^-1`.
pub fn gradient(p: &AffinityMatrix, q: &AffinityMatrix, y: &[Point2]) -> Result<Vec<Point2>> {
    let n = y.len();
    for actual in [p.n(), q.n()] {
        if actual != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual,
            });
        }
    }
    Ok((0..n)
        .map(|i| {
            let mut g = [0.0; 2];
            for j in 0..n {
                if j != i {
                    let m = 4.0 * (p.get(i, j) - q.get(i, j)) * kernel(&y[i], &y[j]);
                    g[0] += m * (y[i][0] - y[j][0]);
                    g[1] += m * (y[i][1] - y[j][1]);
                }
            }
            g
        })
        .collect())
}

/// Gradient of the cost with `P` scaled by `exaggeration`, using the kernel
/// matrix `w` and its total `z`.
fn gradient_into(p: &[f64], exaggeration: f64, y: &[Point2], w: &[f64], z: f64, grad: &mut [Point2]) {
    let n = y.len();
    let row = |(i, g): (usize, &mut Point2)| {
        let mut acc = [0.0; 2];
        let (pr, wr) = (&p[i * n..(i + 1) * n], &w[i * n..(i + 1) * n]);
        for j in 0..n {
            if j != i {
                let q = (wr[j] / z).max(PROB_FLOOR);
                let m = 4.0 * (exaggeration * pr[j] - q) * wr[j];
                acc[0] += m * (y[i][0] - y[j][0]);
                acc[1] += m * (y[i][1] - y[j][1]);
            }
        }
        *g = acc;
    };
    if n >= PAR_MIN_ROWS {
        grad.par_iter_mut().enumerate().for_each(row);
    } else {
        grad.iter_mut().enumerate().for_each(row);
    }
}

fn kl_from_kernel(p: &[f64], w: &[f64], z: f64, n: usize) -> f64 {
    let mut c = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p[i * n + j];
            if i != j && pij > 0.0 {
                c += pij * (pij / (w[i * n + j] / z).max(PROB_FLOOR)).ln();
            }
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSample {
    pub iter: usize,
    pub kl: f64,
}

/// A finished optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneRun {
    pub embedding: Embedding,
    /// KL (with unexaggerated `P`) at iteration 0, every
    /// [`COST_EVERY`] iterations and at the last iteration.
    pub cost_trace: Vec<CostSample>,
    /// KL when exaggeration was switched off.
    pub kl_at_release: f64,
    pub config: TsneConfig,
    /// Rows whose perplexity target was unattainable.
    pub unconverged_rows: Vec<usize>,
}

impl TsneRun {
    pub fn final_kl(&self) -> f64 {
        self.cost_trace.last().map_or(f64::NAN, |c| c.kl)
    }

    pub fn initial_kl(&self) -> f64 {
        self.cost_trace.first().map_or(f64::NAN, |c| c.kl)
    }
}

fn center(y: &mut [Point2]) {
    let n = y.len() as f64;
    let mean = y
        .iter()
        .fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
    let mean = [mean[0] / n, mean[1] / n];
    for p in y.iter_mut() {
        p[0] -= mean[0];
        p[1] -= mean[1];
    }
}

/// Embed the rows of `fm` in two dimensions.
pub fn run_tsne(fm: &FeatureMatrix, cfg: &TsneConfig) -> Result<TsneRun> {
    let n = fm.n();
    if n < 2 {
        return Err(Error::TooFewPoints {
            required: 2,
            actual: n,
        });
    }
    cfg.validate(n)?;
    let aff = joint_affinities(fm, cfg.perplexity)?;
    if !aff.unconverged_rows.is_empty() {
        log::warn!(
            "perplexity {} unattainable for {} row(s); using nearest achievable",
            cfg.perplexity,
            aff.unconverged_rows.len()
        );
    }
    let p = aff.p.values();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let mut y: Vec<Point2> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    center(&mut y);

    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    let mut grad = vec![[0.0; 2]; n];
    let mut w = vec![0.0; n * n];

    let diverged = |iteration| Error::Divergence {
        iteration,
        learning_rate: cfg.learning_rate,
    };
    let record = |y: &[Point2], w: &mut [f64], iteration: usize| -> Result<f64> {
        let z = kernel_matrix(y, w);
        let kl = kl_from_kernel(p, w, z, n);
        if z > 0.0 && z.is_finite() && kl.is_finite() {
            Ok(kl)
        } else {
            Err(diverged(iteration))
        }
    };

    let mut cost_trace = vec![CostSample {
        iter: 0,
        kl: record(&y, &mut w, 0)?,
    }];
    let mut kl_at_release = if cfg.exaggeration_iters == 0 {
        cost_trace[0].kl
    } else {
        f64::NAN
    };

    for it in 0..cfg.max_iters {
        let exaggeration = if it < cfg.exaggeration_iters {
            cfg.exaggeration_factor
        } else {
            1.0
        };
        let momentum = if it < cfg.momentum_switch_iter {
            cfg.momentum_early
        } else {
            cfg.momentum_late
        };
        let z = kernel_matrix(&y, &mut w);
        // every pairwise distance overflowed
        if !(z > 0.0 && z.is_finite()) {
            return Err(diverged(it));
        }
        gradient_into(p, exaggeration, &y, &w, z, &mut grad);

        for ((yi, vi), (gi, gain)) in y
            .iter_mut()
            .zip(velocity.iter_mut())
            .zip(grad.iter().zip(gains.iter_mut()))
        {
            for k in 0..2 {
                let g: f64 = if (gi[k] > 0.0) != (vi[k] > 0.0) {
                    gain[k] + 0.2
                } else {
                    gain[k] * 0.8
                };
                gain[k] = g.max(cfg.min_gain);
                vi[k] = momentum * vi[k] - cfg.learning_rate * gain[k] * gi[k];
                yi[k] += vi[k];
            }
        }
        center(&mut y);

        let done = it + 1;
        if y.iter().flatten().any(|v| !v.is_finite()) {
            return Err(diverged(done));
        }
        let at_release = done == cfg.exaggeration_iters;
        if done % COST_EVERY == 0 || done == cfg.max_iters || at_release {
            let kl = record(&y, &mut w, done)?;
            if at_release {
                kl_at_release = kl;
            }
            if done % COST_EVERY == 0 || done == cfg.max_iters {
                cost_trace.push(CostSample { iter: done, kl });
            }
        }
    }

    Ok(TsneRun {
        embedding: Embedding {
            region_ids: fm.region_ids().to_vec(),
            coords: y,
        },
        cost_trace,
        kl_at_release,
        config: *cfg,
        unconverged_rows: aff.unconverged_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect()
    }

    fn random_y(n: usize, seed: u64) -> Vec<Point2> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect()
    }

    fn fm(rows: &[Vec<f64>]) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows).unwrap()
    }

    fn entropy_bits(p: &[f64]) -> f64 {
        p.iter().filter(|&&x| x > 0.0).map(|x| -x * x.log2()).sum()
    }

    #[test]
    fn three_four_five() {
        let d = pairwise_sq_dists(&fm(&[vec![0.0, 0.0], vec![3.0, 4.0]])).unwrap();
        assert_eq!(d.get(0, 1), 25.0);
        assert_eq!(d.get(1, 0), 25.0);
        assert_eq!(d.get(0, 0), 0.0);
    }

    #[test]
    fn identical_points_have_zero_distance() {
        let d = pairwise_sq_dists(&fm(&vec![vec![1.5, -2.0]; 4])).unwrap();
        assert!(d.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distance_errors() {
        assert!(matches!(
            pairwise_sq_dists(&fm(&[vec![1.0]])),
            Err(Error::TooFewPoints { .. })
        ));
    }

    #[test]
    fn equidistant_three_points_uniform() {
        for sigma_scale in [1e-3, 1.0, 1e3] {
            let row = [sigma_scale, sigma_scale];
            let c = calibrate_sigma(&row, 2.0).unwrap();
            assert_eq!(c.probs, vec![0.5, 0.5]);
            assert_eq!(c.perplexity, 2.0);
            assert!(c.converged);
        }
    }

    #[test]
    fn equidistant_n_points_max_entropy() {
        let n = 9;
        let row = vec![4.0; n - 1];
        let c = calibrate_sigma(&row, (n - 1) as f64).unwrap();
        assert!(c.converged);
        assert!((c.perplexity - (n - 1) as f64).abs() < 1e-9);
        assert!(c.probs.iter().all(|&p| (p - 1.0 / (n - 1) as f64).abs() < 1e-15));
    }

    /// Grid scan over sigma for the entropy crossing, independent of the
    /// bracketing search.
    fn scan_sigma(row: &[f64], perplexity: f64) -> f64 {
        let target = perplexity.log2();
        let h = |sigma: f64| {
            let w: Vec<f64> = row.iter().map(|d| (-d / (2.0 * sigma * sigma)).exp()).collect();
            let s: f64 = w.iter().sum();
            entropy_bits(&w.iter().map(|x| x / s).collect::<Vec<_>>())
        };
        let grid: Vec<f64> = (0..10_000).map(|k| 0.05 + k as f64 * 5e-4).collect();
        let idx = grid
            .windows(2)
            .position(|s| (h(s[0]) - target) * (h(s[1]) - target) <= 0.0)
            .expect("crossing inside grid");
        0.5 * (grid[idx] + grid[idx + 1])
    }

    #[test]
    fn collinear_sigma_matches_grid_scan() {
        let xs: [f64; 5] = [0.0, 1.0, 2.0, 3.0, 4.0];
        for i in 0..5 {
            let row: Vec<f64> = (0..5)
                .filter(|&j| j != i)
                .map(|j| (xs[i] - xs[j]).powi(2))
                .collect();
            let c = calibrate_sigma(&row, 2.5).unwrap();
            assert!(c.converged);
            assert!((c.entropy_bits - 2.5f64.log2()).abs() <= ENTROPY_TOL);
            let oracle = scan_sigma(&row, 2.5);
            assert!((c.sigma - oracle).abs() < 1e-3, "row {i}: {} vs {oracle}", c.sigma);
        }
    }

    #[test]
    fn unattainable_perplexity_is_flagged() {
        // Three tied nearest neighbours: perplexity can never drop below 3.
        let row = [0.0, 0.0, 0.0, 9.0, 16.0];
        let c = calibrate_sigma(&row, 2.0).unwrap();
        assert!(!c.converged);
        assert!((c.perplexity - 3.0).abs() < 1e-6);
        assert!(matches!(
            calibrate_sigma(&row, 6.0),
            Err(Error::PerplexityTooLarge { .. })
        ));
    }

    #[test]
    fn heavy_flooring_keeps_unit_mass() {
        let rows: Vec<Vec<f64>> = (0..80).map(|i| vec![(i * i) as f64]).collect();
        let a = joint_affinities(&fm(&rows), 2.0).unwrap();
        let off: Vec<f64> = (0..80)
            .flat_map(|i| (0..80).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.p.get(i, j))
            .collect();
        assert!(off.iter().filter(|&&v| v == PROB_FLOOR).count() > 1000);
        assert!(off.iter().all(|&v| v >= PROB_FLOOR));
        assert!((a.p.sum() - 1.0).abs() < 1e-12);
        assert!(a.p.is_symmetric());
    }

    #[test]
    fn two_point_joint() {
        let a = joint_affinities(&fm(&[vec![0.0], vec![7.0]]), 1.0).unwrap();
        assert_eq!(a.p.get(0, 1), 0.5);
        assert_eq!(a.p.get(1, 0), 0.5);
        assert_eq!(a.p.get(0, 0), 0.0);
    }

    #[test]
    fn equilateral_joint_and_q() {
        let s = 3f64.sqrt() / 2.0;
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.5, s]];
        let a = joint_affinities(&fm(&pts), 2.0).unwrap();
        let y: Vec<Point2> = pts.iter().map(|p| [p[0], p[1]]).collect();
        let q = low_dim_affinities(&y).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!((a.p.get(i, j) - 1.0 / 6.0).abs() < 1e-12);
                    assert!((q.get(i, j) - 1.0 / 6.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn joint_rejects_large_perplexity() {
        let rows = random_rows(5, 3, 1);
        assert!(matches!(
            joint_affinities(&fm(&rows), 5.0),
            Err(Error::PerplexityTooLarge { .. })
        ));
    }

    #[test]
    fn two_points_q_half() {
        let q = low_dim_affinities(&[[1.0, -4.0], [100.0, 3.0]]).unwrap();
        assert_eq!(q.get(0, 1), 0.5);
        assert!(low_dim_affinities(&[[f64::NAN, 0.0], [0.0, 0.0]]).is_err());
    }

    #[test]
    fn kl_identity_and_pair() {
        let rows = random_rows(6, 3, 2);
        let a = joint_affinities(&fm(&rows), 3.0).unwrap();
        assert!(kl_cost(&a.p, &a.p).abs() < 1e-12);
        let half = low_dim_affinities(&[[0.0, 0.0], [1.0, 1.0]]).unwrap();
        assert_eq!(kl_cost(&half, &half), 0.0);
    }

    #[test]
    fn kl_hand_summed() {
        // Asymmetric toy on three points against uniform Q.
        let mut p = SquareMatrix::zeros(3);
        p.set_pair(0, 1, 0.45);
        p.set_pair(0, 2, 0.04);
        p.set_pair(1, 2, 0.01);
        let mut q = SquareMatrix::zeros(3);
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            q.set_pair(i, j, 1.0 / 6.0);
        }
        let want = 2.0 * (0.45 * (0.45f64 * 6.0).ln() + 0.04 * (0.04f64 * 6.0).ln() + 0.01 * (0.01f64 * 6.0).ln());
        assert!((kl_cost(&p, &q) - want).abs() < 1e-10);
    }

    #[test]
    fn gradient_zero_when_p_equals_q() {
        let y = random_y(7, 3);
        let q = low_dim_affinities(&y).unwrap();
        let g = gradient(&q, &q, &y).unwrap();
        assert!(g.iter().flatten().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn two_point_gradient_antisymmetric() {
        let mut p = SquareMatrix::zeros(2);
        p.set_pair(0, 1, 0.3);
        let y = [[0.2, -1.0], [1.5, 0.7]];
        let q = low_dim_affinities(&y).unwrap();
        let g = gradient(&p, &q, &y).unwrap();
        assert_eq!(g[0][0], -g[1][0]);
        assert_eq!(g[0][1], -g[1][1]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let rows = random_rows(10, 4, seed);
            let p = joint_affinities(&fm(&rows), 3.0).unwrap().p;
            let y = random_y(10, seed + 100);
            let q = low_dim_affinities(&y).unwrap();
            let g = gradient(&p, &q, &y).unwrap();
            let h = 1e-5;
            for i in 0..10 {
                for k in 0..2 {
                    let mut yp = y.clone();
                    let mut ym = y.clone();
                    yp[i][k] += h;
                    ym[i][k] -= h;
                    let cp = kl_cost(&p, &low_dim_affinities(&yp).unwrap());
                    let cm = kl_cost(&p, &low_dim_affinities(&ym).unwrap());
                    let fd = (cp - cm) / (2.0 * h);
                    let rel = (g[i][k] - fd).abs() / g[i][k].abs().max(fd.abs()).max(1e-8);
                    assert!(rel < 1e-4, "seed {seed} ({i},{k}): {} vs {fd}", g[i][k]);
                }
            }
        }
    }

    #[test]
    fn fused_gradient_matches_public_gradient() {
        let rows = random_rows(9, 3, 8);
        let p = joint_affinities(&fm(&rows), 3.0).unwrap().p;
        let y = random_y(9, 9);
        let q = low_dim_affinities(&y).unwrap();
        let g = gradient(&p, &q, &y).unwrap();
        let mut w = vec![0.0; 81];
        let z = kernel_matrix(&y, &mut w);
        let mut fused = vec![[0.0; 2]; 9];
        gradient_into(p.values(), 1.0, &y, &w, z, &mut fused);
        for (a, b) in g.iter().flatten().zip(fused.iter().flatten()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!((kl_from_kernel(p.values(), &w, z, 9) - kl_cost(&p, &q)).abs() < 1e-14);
    }

    #[test]
    fn two_point_run_stays_put() {
        let cfg = TsneConfig {
            perplexity: 1.0,
            exaggeration_factor: 1.0,
            max_iters: 100,
            exaggeration_iters: 50,
            ..TsneConfig::default()
        };
        let data = fm(&[vec![0.0, 1.0], vec![5.0, 2.0]]);
        let run = run_tsne(&data, &cfg).unwrap();
        let again = run_tsne(&data, &TsneConfig { max_iters: 0, exaggeration_iters: 0, ..cfg }).unwrap();
        for (a, b) in run.embedding.coords.iter().zip(&again.embedding.coords) {
            assert!((a[0] - b[0]).abs() < 1e-15 && (a[1] - b[1]).abs() < 1e-15);
        }
        assert!(run.cost_trace.iter().all(|c| c.kl.abs() < 1e-12));
    }

    #[test]
    fn budget_shortens_exaggeration() {
        let base = TsneConfig::default();
        let long = base.with_budget(5000);
        assert_eq!((long.exaggeration_iters, long.momentum_switch_iter), (250, 250));
        assert_eq!(base.with_budget(1000).exaggeration_iters, 250);
        let short = base.with_budget(200);
        assert_eq!((short.max_iters, short.exaggeration_iters, short.momentum_switch_iter), (200, 50, 50));
        assert!(short.validate(31).is_ok());
    }

    #[test]
    fn trace_schedule() {
        let rows = random_rows(12, 3, 4);
        let cfg = TsneConfig {
            perplexity: 3.0,
            max_iters: 120,
            exaggeration_iters: 30,
            momentum_switch_iter: 30,
            ..TsneConfig::default()
        };
        let run = run_tsne(&fm(&rows), &cfg).unwrap();
        let iters: Vec<usize> = run.cost_trace.iter().map(|c| c.iter).collect();
        assert_eq!(iters, vec![0, 50, 100, 120]);
        assert!(run.kl_at_release.is_finite());
        assert!(run.cost_trace.iter().all(|c| c.kl >= 0.0));
        assert!(run.final_kl() < run.kl_at_release);
    }

    #[test]
    fn run_is_reproducible() {
        let rows = random_rows(15, 5, 5);
        let cfg = TsneConfig {
            perplexity: 4.0,
            max_iters: 200,
            exaggeration_iters: 100,
            seed: 11,
            ..TsneConfig::default()
        };
        let a = run_tsne(&fm(&rows), &cfg).unwrap();
        let b = run_tsne(&fm(&rows), &cfg).unwrap();
        assert_eq!(a, b);
        let c = run_tsne(&fm(&rows), &TsneConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.embedding.coords, c.embedding.coords);
    }

    #[test]
    fn parallel_rows_match_sequential() {
        // PAR_MIN_ROWS switches code paths; both must agree bit for bit.
        let n = PAR_MIN_ROWS + 3;
        let y = random_y(n, 21);
        let mut w_par = vec![0.0; n * n];
        let z_par = kernel_matrix(&y, &mut w_par);
        let mut w_seq = vec![0.0; n * n];
        let fill = |(i, row): (usize, &mut [f64])| -> f64 {
            let mut s = 0.0;
            for (j, out) in row.iter_mut().enumerate() {
                *out = if i == j { 0.0 } else { kernel(&y[i], &y[j]) };
                s += *out;
            }
            s
        };
        let z_seq: f64 = w_seq.chunks_mut(n).enumerate().map(fill).collect::<Vec<_>>().iter().sum();
        assert_eq!(z_par, z_seq);
        assert_eq!(w_par, w_seq);
    }

    #[test]
    fn config_validation() {
        let ok = TsneConfig::default();
        assert!(matches!(ok.validate(30), Err(Error::PerplexityTooLarge { .. })));
        assert!(ok.validate(31).is_ok());
        assert!(TsneConfig { exaggeration_iters: 2000, ..ok }.validate(100).is_err());
        assert!(TsneConfig { learning_rate: 0.0, ..ok }.validate(100).is_err());
        assert!(TsneConfig { exaggeration_factor: 0.5, ..ok }.validate(100).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let rows = random_rows(10, 3, 6);
        let cfg = TsneConfig {
            perplexity: 3.0,
            learning_rate: 1e308,
            max_iters: 50,
            exaggeration_iters: 10,
            ..TsneConfig::default()
        };
        match run_tsne(&fm(&rows), &cfg) {
            Err(Error::Divergence { learning_rate, .. }) => assert_eq!(learning_rate, 1e308),
            other => panic!("expected divergence, got {other:?}"),
        }
        // coordinates stay finite but every distance overflows
        let cfg = TsneConfig { learning_rate: 1e300, ..cfg };
        assert!(matches!(run_tsne(&fm(&rows), &cfg), Err(Error::Divergence { .. })));
    }

    proptest! {
        #[test]
        fn kl_nonnegative(seed in 0u64..1000, n in 3usize..10) {
            let rows = random_rows(n, 3, seed);
            let p = joint_affinities(&fm(&rows), 2.0).unwrap().p;
            let q = low_dim_affinities(&random_y(n, seed ^ 77)).unwrap();
            prop_assert!(kl_cost(&p, &q) >= 0.0);
        }

        #[test]
        fn translation_invariance(seed in 0u64..1000, dx in -50.0f64..50.0, dy in -50.0f64..50.0) {
            let n = 8;
            let p = joint_affinities(&fm(&random_rows(n, 3, seed)), 3.0).unwrap().p;
            let y = random_y(n, seed + 1);
            let shifted: Vec<Point2> = y.iter().map(|v| [v[0] + dx, v[1] + dy]).collect();
            let (q1, q2) = (low_dim_affinities(&y).unwrap(), low_dim_affinities(&shifted).unwrap());
            prop_assert!((kl_cost(&p, &q1) - kl_cost(&p, &q2)).abs() < 1e-10);
            let g1 = gradient(&p, &q1, &y).unwrap();
            let g2 = gradient(&p, &q2, &shifted).unwrap();
            for (a, b) in g1.iter().flatten().zip(g2.iter().flatten()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn p_symmetric_normalized(seed in 0u64..1000, n in 4usize..40, frac in 0.1f64..0.9) {
            let perp = 1.0 + frac * (n as f64 - 2.0);
            let a = joint_affinities(&fm(&random_rows(n, 5, seed)), perp).unwrap();
            prop_assert!(a.p.is_symmetric());
            prop_assert!((a.p.sum() - 1.0).abs() < 1e-10);
        }
    }
}
