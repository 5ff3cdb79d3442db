//! Delay-vector construction, false-nearest-neighbor fractions, the binary
//! embedding mask, the masked autoencoder, and the reconstruction and
//! expansion losses.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Dual, Var};
use crate::error::{Error, Result};
use crate::nn::{BnObservation, BoundNetwork, Mode};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DelayConfig {
    /// Configuration-space dimension.
    pub m: usize,
    /// Delay, in the series' time units.
    pub tau: f64,
}

impl DelayConfig {
    pub fn new(m: usize, tau: f64) -> Self {
        assert!(m >= 2 && tau > 0.0, "invalid delay config");
        DelayConfig { m, tau }
    }

    /// Time span a delay vector reaches into the past.
    pub fn horizon(&self) -> f64 {
        (self.m - 1) as f64 * self.tau
    }
}

/// [u(t), u(t−τ), ..., u(t−(m−1)τ)] with a domain check on the oldest lag.
pub fn delay_vector(
    u: impl Fn(f64) -> f64,
    t: f64,
    cfg: &DelayConfig,
    domain: (f64, f64),
) -> Result<Vec<f64>> {
    if t - cfg.horizon() < domain.0 - 1e-12 || t > domain.1 + 1e-12 {
        return Err(Error::Usage(format!(
            "delay vector at t = {t} reaches outside the sampling domain [{}, {}]",
            domain.0, domain.1
        )));
    }
    Ok((0..cfg.m).map(|j| u(t - j as f64 * cfg.tau)).collect())
}

/// Delay rows on a uniform grid: row i (starting at index (m−1)·lag) is
/// [x[i], x[i−lag], ..., x[i−(m−1)lag]]. Returns a row-major M×m batch.
pub fn delay_rows(values: &[f64], m: usize, lag: usize, count: usize) -> Result<Vec<f64>> {
    assert!(m >= 2 && lag >= 1, "delay_rows preconditions");
    let first = (m - 1) * lag;
    if first + count > values.len() || count == 0 {
        return Err(Error::Usage(format!(
            "series of length {} cannot supply {count} delay rows at lag {lag}, m = {m}",
            values.len()
        )));
    }
    let mut out = Vec::with_capacity(count * m);
    for i in first..first + count {
        for j in 0..m {
            out.push(values[i - j * lag]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FnnThresholds {
    pub r_tol: f64,
    pub a_tol: f64,
}

impl Default for FnnThresholds {
    fn default() -> Self {
        FnnThresholds { r_tol: 10.0, a_tol: 2.0 }
    }
}

/// Floor on the squared previous-dimension neighbor distance; duplicate rows
/// then register as false neighbors instead of dividing by zero.
const RATIO_DENOM_FLOOR: f64 = 1e-12;

// The prefix-distance identity ‖a−b‖² = L²(a) + L²(b) − 2·a·b underlies both
// the matrix formulation and the pairwise oracle; keeping the arithmetic in
// one place makes the two bitwise-identical.
#[inline]
fn dist_from_parts(l2i: f64, l2j: f64, dot: f64) -> f64 {
    (l2i + l2j - 2.0 * dot).max(0.0).sqrt()
}

/// Squared prefix lengths L²_d[i] for one d (ascending-k accumulation).
fn prefix_sq_lengths(batch: &[f64], rows: usize, m: usize, d: usize) -> Vec<f64> {
    let mut l2 = vec![0.0; rows];
    for (i, slot) in l2.iter_mut().enumerate() {
        let mut acc = 0.0;
        for k in 0..d {
            let v = batch[i * m + k];
            acc += v * v;
        }
        *slot = acc;
    }
    l2
}

/// Nearest-neighbor distances per embedding prefix d = 1..m, matrix
/// formulation: Gram matrix, then D_d, then full off-diagonal row minima.
fn neighbor_distances_matrix(batch: &[f64], rows: usize, m: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(m);
    let mut dist = vec![0.0; rows * rows];
    for d in 1..=m {
        let l2 = prefix_sq_lengths(batch, rows, m, d);
        for i in 0..rows {
            for j in 0..rows {
                let mut dot = 0.0;
                for k in 0..d {
                    dot += batch[i * m + k] * batch[j * m + k];
                }
                dist[i * rows + j] = dist_from_parts(l2[i], l2[j], dot);
            }
        }
        let mut r = vec![f64::INFINITY; rows];
        for i in 0..rows {
            for j in 0..rows {
                if j != i && dist[i * rows + j] < r[i] {
                    r[i] = dist[i * rows + j];
                }
            }
        }
        out.push(r);
    }
    out
}

/// Pairwise-loop oracle: no distance matrix, identical arithmetic per pair.
fn neighbor_distances_bruteforce(batch: &[f64], rows: usize, m: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(m);
    for d in 1..=m {
        let l2 = prefix_sq_lengths(batch, rows, m, d);
        let mut r = vec![f64::INFINITY; rows];
        for i in 0..rows {
            for j in 0..rows {
                if j == i {
                    continue;
                }
                let mut dot = 0.0;
                for k in 0..d {
                    dot += batch[i * m + k] * batch[j * m + k];
                }
                let dist = dist_from_parts(l2[i], l2[j], dot);
                if dist < r[i] {
                    r[i] = dist;
                }
            }
        }
        out.push(r);
    }
    out
}

/// γ_d from the per-d neighbor distances: the ratio test compares the
/// squared separation gained at dimension d against the dimension-(d−1)
/// neighbor distance, and the amplitude test compares against the data
/// spread R_A (population std of the first column).
fn gammas_from_distances(
    batch: &[f64],
    rows: usize,
    m: usize,
    r_by_d: &[Vec<f64>],
    th: &FnnThresholds,
) -> Vec<f64> {
    let mut mean = 0.0;
    for i in 0..rows {
        mean += batch[i * m];
    }
    mean /= rows as f64;
    let mut var = 0.0;
    for i in 0..rows {
        let dev = batch[i * m] - mean;
        var += dev * dev;
    }
    let r_a = (var / rows as f64).sqrt();
    let mut gamma = Vec::with_capacity(m);
    gamma.push(1.0);
    for d in 2..=m {
        let (r_prev, r) = (&r_by_d[d - 2], &r_by_d[d - 1]);
        let mut count = 0usize;
        for i in 0..rows {
            let num = (r[i] * r[i] - r_prev[i] * r_prev[i]).max(0.0);
            let den = (r_prev[i] * r_prev[i]).max(RATIO_DENOM_FLOOR);
            let ratio_fires = (num / den).sqrt() > th.r_tol;
            let amplitude_fires = r[i] / r_a > th.a_tol;
            if ratio_fires || amplitude_fires {
                count += 1;
            }
        }
        gamma.push(count as f64 / rows as f64);
    }
    gamma
}

/// Fraction of false nearest neighbors per embedding prefix (γ_1..γ_m),
/// matrix formulation. `batch` is row-major M×m.
pub fn fnn_fractions(batch: &[f64], rows: usize, m: usize, th: &FnnThresholds) -> Result<Vec<f64>> {
    if rows < 2 || batch.len() != rows * m {
        return Err(Error::Usage(format!(
            "fnn_fractions needs at least 2 rows of width {m}, got {rows}"
        )));
    }
    let r = neighbor_distances_matrix(batch, rows, m);
    Ok(gammas_from_distances(batch, rows, m, &r, th))
}

/// O(M²m) double-loop oracle; equals `fnn_fractions` bit for bit.
pub fn fnn_fractions_bruteforce(
    batch: &[f64],
    rows: usize,
    m: usize,
    th: &FnnThresholds,
) -> Result<Vec<f64>> {
    if rows < 2 || batch.len() != rows * m {
        return Err(Error::Usage(format!(
            "fnn_fractions needs at least 2 rows of width {m}, got {rows}"
        )));
    }
    let r = neighbor_distances_bruteforce(batch, rows, m);
    Ok(gammas_from_distances(batch, rows, m, &r, th))
}

/// FNN fractions γ, the binary mask w, and the embedding dimension d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskState {
    pub gamma: Vec<f64>,
    pub w: Vec<f64>,
    pub d: usize,
    pub epsilon: f64,
    pub alpha: f64,
    pub thresholds: FnnThresholds,
}

/// Binary mask from γ: raw entries ceil(relu(γ−ε)), then prefix enforcement
/// (d = largest index with γ > ε; w = 1^d 0^(m−d)).
pub fn mask_from_gamma(gamma: &[f64], epsilon: f64) -> (Vec<f64>, usize) {
    let raw: Vec<f64> = gamma.iter().map(|&g| (g - epsilon).max(0.0).ceil()).collect();
    let d = raw
        .iter()
        .rposition(|&x| x == 1.0)
        .map(|i| i + 1)
        .unwrap_or(0)
        .max(1); // γ₁ = 1 by definition, so d ≥ 1 even on degenerate input
    let mut w = vec![0.0; gamma.len()];
    for slot in w.iter_mut().take(d) {
        *slot = 1.0;
    }
    (w, d)
}

impl MaskState {
    /// Fresh state with all dimensions active (γ = 1).
    pub fn full(m: usize, epsilon: f64, alpha: f64, thresholds: FnnThresholds) -> Self {
        let gamma = vec![1.0; m];
        let (w, d) = mask_from_gamma(&gamma, epsilon);
        MaskState { gamma, w, d, epsilon, alpha, thresholds }
    }

    /// Moving-average update γ ← (1−α)γ + αγ̂, then recompute w and d.
    pub fn update(&mut self, gamma_hat: &[f64]) {
        assert_eq!(gamma_hat.len(), self.gamma.len(), "gamma length mismatch");
        for (g, &h) in self.gamma.iter_mut().zip(gamma_hat) {
            *g = (1.0 - self.alpha) * *g + self.alpha * h;
        }
        let (w, d) = mask_from_gamma(&self.gamma, self.epsilon);
        self.w = w;
        self.d = d;
    }
}

/// w ⊙ N_e(corrupt(ũ)); corruption applies in train mode only.
pub fn encode<'t>(
    net: &BoundNetwork<'t>,
    u_tilde: Dual<'t>,
    w: &[f64],
    mode: Mode,
    rng: &mut ChaCha8Rng,
    corrupt_sigma: Option<f64>,
    obs: &mut Vec<BnObservation>,
) -> Result<Dual<'t>> {
    Ok(net.forward(u_tilde, mode, rng, corrupt_sigma, obs)?.mul_row_const(w))
}

/// Decoder N_d, no mask.
pub fn decode<'t>(
    net: &BoundNetwork<'t>,
    u: Dual<'t>,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    obs: &mut Vec<BnObservation>,
) -> Result<Dual<'t>> {
    net.forward(u, mode, rng, None, obs)
}

/// Reconstruction loss: (d / (M·m·Σ_{i≤d} σ²_{u_i})) · ΣΣ (û − ũ)², with the
/// per-dimension variances taken from the encoded batch as constants (the
/// normalizer is not a descent direction). Returns the loss and whether the
/// variance floor engaged.
pub fn loss_rec<'t>(
    u_hat: Var<'t>,
    u_tilde: Var<'t>,
    encoded_values: &[f64],
    d: usize,
) -> (Var<'t>, bool) {
    let rows = u_hat.rows();
    let m = u_hat.cols();
    let mut sigma_sq_sum = 0.0;
    for i in 0..d {
        let mut mean = 0.0;
        for r in 0..rows {
            mean += encoded_values[r * m + i];
        }
        mean /= rows as f64;
        let mut var = 0.0;
        for r in 0..rows {
            let dev = encoded_values[r * m + i] - mean;
            var += dev * dev;
        }
        sigma_sq_sum += var / rows as f64;
    }
    let floored = sigma_sq_sum < 1e-8;
    let denom = sigma_sq_sum.max(1e-8);
    let sse = (u_hat - u_tilde).square().sum_all();
    let coeff = d as f64 / (rows as f64 * m as f64 * denom);
    (sse.scale(coeff), floored)
}

/// Expansion loss over the embedded dimensions: mean squared off-diagonal
/// covariance (2/(d(d−1)) · Σ_{i<j≤d} K²_ij; zero when d = 1) plus the
/// variance of the per-dimension standard deviations (1/d · Σ (σ_i − σ̄)²).
/// Covariance is the biased batch estimate; gradients flow through it.
pub fn loss_exp<'t>(encoded: Var<'t>, d: usize) -> Var<'t> {
    let rows = encoded.rows();
    assert!(rows >= 2, "loss_exp needs a batch of at least 2");
    assert!(d >= 1 && d <= encoded.cols(), "embedded dimension out of range");
    let centered = encoded.sub_row(encoded.mean_rows());
    let k = centered.matmul_tn(centered).scale(1.0 / rows as f64);
    let tape = encoded.tape();
    let mut loss = tape.scalar(0.0);
    if d > 1 {
        let mut off = tape.scalar(0.0);
        for i in 0..d {
            for j in (i + 1)..d {
                off = off + k.index(i, j).square();
            }
        }
        loss = loss + off.scale(2.0 / (d as f64 * (d - 1) as f64));
    }
    // σ_i = sqrt(K_ii + 1e-12): the epsilon keeps the sqrt gradient finite
    // for a degenerate coordinate without disturbing the zero-loss cases.
    let sigmas: Vec<Var<'t>> = (0..d).map(|i| k.index(i, i).add_const(1e-12).sqrt()).collect();
    let mut sigma_mean = tape.scalar(0.0);
    for s in &sigmas {
        sigma_mean = sigma_mean + *s;
    }
    sigma_mean = sigma_mean.scale(1.0 / d as f64);
    let mut spread = tape.scalar(0.0);
    for s in &sigmas {
        spread = spread + (*s - sigma_mean).square();
    }
    loss + spread.scale(1.0 / d as f64)
}
