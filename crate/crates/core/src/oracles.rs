//! Reference values that do not go through the dynamics: the stationary
//! Gaussian theory for `p ≡ 0`, scalar quadrature for the one-mode nonlinear
//! law, and scalar simulation for the radial law of `|x|²`.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, SymmetricEigen};
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::reaction::{Drift, YosidaParam};
use crate::spectral::alpha;
use crate::stats::FunctionalEstimate;

/// Stationary variance `½ α_h^{-1-γ}` of mode `h` when `p ≡ 0`.
pub fn ou_variance(gamma: f64, h: usize) -> f64 {
    0.5 * alpha(h).powf(-1.0 - gamma)
}

/// The product Gaussian measure `N(0, ½(-A)^{-1-γ})`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianReference {
    pub gamma: f64,
}

impl GaussianReference {
    pub fn new(gamma: f64) -> Self {
        Self { gamma }
    }

    pub fn variance(&self, h: usize) -> f64 {
        ou_variance(self.gamma, h)
    }

    pub fn variances(&self, n: usize) -> Vec<f64> {
        (1..=n).map(|h| self.variance(h)).collect()
    }

    /// `E|x|²` restricted to the first `n` modes.
    pub fn trace(&self, n: usize) -> f64 {
        self.variances(n).iter().sum()
    }

    /// Variance of `⟨x, b⟩`.
    pub fn linear_variance(&self, b: &[f64]) -> f64 {
        b.iter().enumerate().map(|(i, b)| b * b * self.variance(i + 1)).sum()
    }

    /// `E cos(⟨x,λ⟩ + θ) = e^{-V/2} cos θ` with `V` the variance of `⟨x,λ⟩`.
    pub fn trig_mean(&self, lambda: &[f64], theta: f64) -> f64 {
        (-0.5 * self.linear_variance(lambda)).exp() * theta.cos()
    }

    /// `∫ ⟨Dφ, e_k⟩ dν = -λ_k e^{-V/2} sin θ` for `φ = cos(⟨x,λ⟩ + θ)`.
    pub fn trig_ibp_lhs(&self, lambda: &[f64], theta: f64, k: usize) -> f64 {
        let lk = lambda.get(k - 1).copied().unwrap_or(0.0);
        -lk * (-0.5 * self.linear_variance(lambda)).exp() * theta.sin()
    }

    /// `‖cos(⟨x,λ⟩ + θ)‖_{L²(ν)} = (½(1 + e^{-2V} cos 2θ))^{1/2}`.
    pub fn trig_l2_norm(&self, lambda: &[f64], theta: f64) -> f64 {
        let v = self.linear_variance(lambda);
        (0.5 * (1.0 + (-2.0 * v).exp() * (2.0 * theta).cos())).sqrt()
    }
}

/// Gaussian value of `|∫⟨Dφ, e_k⟩dν| / (‖φ‖_{L²(ν)} |e_k|_{1+δ+γ})` for
/// `φ = cos(⟨x,λ⟩ + θ)`.
pub fn gaussian_certification_ratio(lambda: &[f64], theta: f64, k: usize, gamma: f64, delta: f64) -> f64 {
    let g = GaussianReference::new(gamma);
    let strong = alpha(k).powf(0.5 * (1.0 + delta + gamma));
    g.trig_ibp_lhs(lambda, theta, k).abs() / (g.trig_l2_norm(lambda, theta) * strong)
}

/// Largest Gaussian certification ratio over the trig members of `dict` and
/// directions `e_k`, `k ∈ modes`, with the maximizing `k`.
pub fn gaussian_certification_sup(
    dict: &[crate::cylinder::CylinderFunction],
    modes: std::ops::RangeInclusive<usize>,
    gamma: f64,
    delta: f64,
) -> (f64, usize) {
    let mut best = (0.0, 0);
    for f in dict {
        let crate::cylinder::CylinderFunction::Trig { lambda, theta } = f else { continue };
        for k in modes.clone() {
            let r = gaussian_certification_ratio(lambda, *theta, k, gamma, delta);
            if r > best.0 {
                best = (r, k);
            }
        }
    }
    best
}

/// Exact Fomin density `v_z(x) = 2 ⟨(-A)^{(1+γ-δ)/2} z, x⟩` of the Gaussian
/// measure in direction `(-A)^{-β} z`.
pub fn gaussian_vz(z: &[f64], x: &[f64], gamma: f64, delta: f64) -> f64 {
    let s = 0.5 * (1.0 + gamma - delta);
    z.iter()
        .zip(x)
        .enumerate()
        .map(|(i, (z, x))| 2.0 * alpha(i + 1).powf(s) * z * x)
        .sum()
}

/// Coefficient of `x_h` in the Gaussian `v_h = v_{e_h}`.
pub fn gaussian_vh_coefficient(h: usize, gamma: f64, delta: f64) -> f64 {
    2.0 * alpha(h).powf(0.5 * (1.0 + gamma - delta))
}

/// `‖v_h‖_{L²(ν)} = √2 α_h^{-δ/2}` in the Gaussian case.
pub fn gaussian_vh_norm(h: usize, delta: f64) -> f64 {
    SQRT_2 * alpha(h).powf(-0.5 * delta)
}

/// Gaussian `M*(F)` for the half-space field `F = (-A)^{-β} b / |(-A)^{-β} b|²`:
/// `2 Σ_j α_j^{-δ} b_j x_j / Σ_j α_j^{-2β} b_j²`.
pub fn gaussian_mstar_halfspace(x: &[f64], b: &[f64], gamma: f64, delta: f64) -> f64 {
    let beta = 0.5 * (1.0 + gamma + delta);
    let num: f64 = b
        .iter()
        .zip(x)
        .enumerate()
        .map(|(i, (b, x))| 2.0 * alpha(i + 1).powf(-delta) * b * x)
        .sum();
    let den: f64 = b.iter().enumerate().map(|(i, b)| alpha(i + 1).powf(-2.0 * beta) * b * b).sum();
    num / den
}

/// Gaussian `M*(x_1 e_1) = -α_1^{-β} + 2 α_1^{(1+γ-δ)/2} x_1²`.
pub fn gaussian_mstar_coordinate_field(x1: f64, gamma: f64, delta: f64) -> f64 {
    let beta = 0.5 * (1.0 + gamma + delta);
    -alpha(1).powf(-beta) + gaussian_vh_coefficient(1, gamma, delta) * x1 * x1
}

/// Nodes and weights of the `n`-point Gauss–Hermite rule for `∫ f(y) e^{-y²} dy`,
/// from the eigen-decomposition of the Jacobi matrix.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// `E f(Y)` for `Y ~ N(0, variance)` by `n`-point Gauss–Hermite quadrature.
pub fn gaussian_expectation<F: Fn(f64) -> f64>(f: F, variance: f64, n: usize) -> f64 {
    let (nodes, weights) = gauss_hermite(n);
    let s = (2.0 * variance).sqrt();
    nodes.iter().zip(&weights).map(|(y, w)| w * f(s * y)).sum::<f64>() / PI.sqrt()
}

/// Adaptive Simpson quadrature of `f` on `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, fa: f64, b: f64, fb: f64, m: f64, fm: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1) + rec(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1)
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, fa, b, fb, m, fm, whole, tol, 48)
}

/// Closed-form terms of the integration-by-parts-in-time identity
/// `P_t⟨Dφ,h⟩ = ⟨DP_tφ,h⟩ - ∫₀ᵗ P_{t-s}⟨Ah, DP_sφ⟩ ds` for `p ≡ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityTerms {
    /// `P_t(⟨Dφ, h⟩)(x)`.
    pub lhs: f64,
    /// `⟨D P_tφ(x), h⟩`.
    pub gradient: f64,
    /// `∫₀ᵗ P_{t-s}(⟨Ah, D P_sφ⟩)(x) ds`, by quadrature in `s`.
    pub integral: f64,
}

impl IdentityTerms {
    pub fn residual(&self) -> f64 {
        self.lhs - self.gradient + self.integral
    }
}

/// Identity terms for `φ = cos(⟨x,λ⟩ + θ)` under the Ornstein–Uhlenbeck
/// semigroup: with `m_t = ⟨e^{tA}x, λ⟩` and `V_t = Σ λ_h² σ_h²(1 - e^{-2α_h t})`,
/// `P_tφ(x) = e^{-V_t/2} cos(m_t + θ)`.
pub fn gaussian_identity_trig(gamma: f64, x: &[f64], lambda: &[f64], theta: f64, h: &[f64], t: f64) -> IdentityTerms {
    let g = GaussianReference::new(gamma);
    let n = lambda.len().max(h.len()).max(x.len());
    let get = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
    let mut m_t = 0.0;
    let mut v_t = 0.0;
    let mut lam_h = 0.0;
    let mut semigroup_lam_h = 0.0;
    for i in 0..n {
        let a = alpha(i + 1);
        let decay = (-a * t).exp();
        m_t += decay * get(x, i) * get(lambda, i);
        v_t += get(lambda, i).powi(2) * g.variance(i + 1) * (1.0 - (-2.0 * a * t).exp());
        lam_h += get(lambda, i) * get(h, i);
        semigroup_lam_h += decay * get(lambda, i) * get(h, i);
    }
    let amp = (-0.5 * v_t).exp() * (m_t + theta).sin();
    // ⟨Ah, e^{sA}λ⟩ = -Σ α h λ e^{-α s}; the semigroup P_{t-s} then contributes
    // the remaining variance so every s carries the same prefactor `amp`.
    let integrand = |s: f64| {
        let mut acc = 0.0;
        for i in 0..n {
            let a = alpha(i + 1);
            acc += a * get(h, i) * get(lambda, i) * (-a * s).exp();
        }
        amp * acc
    };
    IdentityTerms {
        lhs: -lam_h * amp,
        gradient: -amp * semigroup_lam_h,
        integral: adaptive_simpson(&integrand, 0.0, t, 1e-15),
    }
}

/// Identity terms for the linear `φ(x) = ⟨x, λ⟩`.
pub fn gaussian_identity_linear(lambda: &[f64], h: &[f64], t: f64) -> IdentityTerms {
    let n = lambda.len().min(h.len());
    let mut lhs = 0.0;
    let mut gradient = 0.0;
    for i in 0..n {
        lhs += lambda[i] * h[i];
        gradient += (-alpha(i + 1) * t).exp() * lambda[i] * h[i];
    }
    let integrand = |s: f64| {
        (0..n)
            .map(|i| -alpha(i + 1) * h[i] * lambda[i] * (-alpha(i + 1) * s).exp())
            .sum::<f64>()
    };
    IdentityTerms {
        lhs,
        gradient,
        integral: adaptive_simpson(&integrand, 0.0, t, 1e-15),
    }
}

/// Stationary law of the single-mode equation
/// `dy = b(y) dt + α_1^{-γ/2} dβ`, `b(y) = -α_1 y + ⟨p_ε(y e_1), e_1⟩`,
/// whose density is proportional to `exp(2 ∫₀ʸ b / σ²)`, `σ² = α_1^{-γ}`.
///
/// `b` is tabulated on a fine grid with the projection computed by adaptive
/// quadrature in the space variable; the log-density is its integral, and the
/// density and distribution function are interpolated by cubic Hermite
/// polynomials using their known derivatives.
#[derive(Debug, Clone)]
pub struct OneModeDensity {
    sigma2: f64,
    grid: Vec<f64>,
    drift: Vec<f64>,
    log_density: Vec<f64>,
    cdf: Vec<f64>,
    log_norm: f64,
}

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let kf = k as f64;
        let b = kf / (4.0 * kf * kf - 1.0).sqrt();
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], 2.0 * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// `⟨p_ε(y e_1), e_1⟩ = ∫₀¹ p_ε(y √2 sin πξ) √2 sin πξ dξ`, by composite
/// Gauss–Legendre quadrature in `ξ` (the integrand is analytic in `ξ`).
pub fn projected_drift(drift: &Drift, eps: YosidaParam, y: f64) -> Result<f64> {
    if drift.is_zero() {
        return Ok(0.0);
    }
    thread_local! {
        static RULE: (Vec<f64>, Vec<f64>) = gauss_legendre(40);
    }
    RULE.with(|(nodes, weights)| {
        // Symmetric about ξ = 1/2: integrate over [0, 1/2] in four panels.
        let panels = 4;
        let width = 0.5 / panels as f64;
        let mut acc = 0.0;
        for p in 0..panels {
            let mid = (p as f64 + 0.5) * width;
            for (u, w) in nodes.iter().zip(weights) {
                let xi = mid + 0.5 * width * u;
                let e = SQRT_2 * (PI * xi).sin();
                let (v, _) = drift.regularized(eps, y * e)?;
                acc += 0.5 * width * w * v * e;
            }
        }
        Ok(2.0 * acc)
    })
}

pub fn one_mode_invariant_density(drift: &Drift, eps: YosidaParam, gamma: f64) -> Result<OneModeDensity> {
    let a1 = alpha(1);
    let sigma2 = a1.powf(-gamma);
    // Dissipative drift: tails are no heavier than the linear Gaussian's.
    let sd_lin = (sigma2 / (2.0 * a1)).sqrt();
    let half_width = 14.0 * sd_lin;
    let n = 8000usize;
    let step = 2.0 * half_width / n as f64;
    let grid: Vec<f64> = (0..=n).map(|k| -half_width + k as f64 * step).collect();
    let drift_vals: Vec<f64> = grid
        .par_iter()
        .map(|&y| projected_drift(drift, eps, y).map(|p| -a1 * y + p))
        .collect::<Result<_>>()?;
    let u_prime = |k: usize| 2.0 * drift_vals[k] / sigma2;
    // Log-density U = 2∫b/σ², cell by cell with Simpson's rule on exact values
    // of b at the cell ends and midpoint, accumulated outward from y = 0.
    let mut log_density = vec![0.0; n + 1];
    let mid = n / 2;
    let cell_integral = |k: usize| -> Result<f64> {
        let ym = grid[k] + 0.5 * step;
        let bm = -a1 * ym + projected_drift(drift, eps, ym)?;
        Ok(step / 6.0 * (drift_vals[k] + 4.0 * bm + drift_vals[k + 1]) * 2.0 / sigma2)
    };
    let cells: Vec<f64> = (0..n).into_par_iter().map(cell_integral).collect::<Result<_>>()?;
    for k in mid + 1..=n {
        log_density[k] = log_density[k - 1] + cells[k - 1];
    }
    for k in (0..mid).rev() {
        log_density[k] = log_density[k + 1] - cells[k];
    }
    // Normalize: adaptive Simpson of exp(U) on each cell with U interpolated by
    // cubic Hermite from U and U' = 2b/σ².
    let shift = log_density.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let hermite = |k: usize, y: f64| -> f64 {
        let s = (y - grid[k]) / step;
        let (h00, h10, h01, h11) = hermite_basis(s);
        h00 * log_density[k] + h10 * step * u_prime(k) + h01 * log_density[k + 1] + h11 * step * u_prime(k + 1)
    };
    let cell_mass: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|k| {
            let f = |y: f64| (hermite(k, y) - shift).exp();
            adaptive_simpson(&f, grid[k], grid[k + 1], 1e-16)
        })
        .collect();
    let total: f64 = cell_mass.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::Numerical {
            what: "one-mode density normalization",
            detail: format!("mass {total}"),
        });
    }
    let log_norm = shift + total.ln();
    let mut cdf = vec![0.0; n + 1];
    for k in 0..n {
        cdf[k + 1] = cdf[k] + cell_mass[k] / total;
    }
    Ok(OneModeDensity {
        sigma2,
        grid,
        drift: drift_vals,
        log_density,
        cdf,
        log_norm,
    })
}

fn hermite_basis(s: f64) -> (f64, f64, f64, f64) {
    let s2 = s * s;
    let s3 = s2 * s;
    (2.0 * s3 - 3.0 * s2 + 1.0, s3 - 2.0 * s2 + s, -2.0 * s3 + 3.0 * s2, s3 - s2)
}

impl OneModeDensity {
    pub fn noise_variance(&self) -> f64 {
        self.sigma2
    }

    pub fn support(&self) -> (f64, f64) {
        (self.grid[0], *self.grid.last().unwrap())
    }

    fn cell(&self, y: f64) -> Option<(usize, f64)> {
        let (lo, hi) = self.support();
        if !(y >= lo && y <= hi) {
            return None;
        }
        let step = self.grid[1] - self.grid[0];
        let k = (((y - lo) / step).floor() as usize).min(self.grid.len() - 2);
        Some((k, step))
    }

    fn log_density_at(&self, k: usize, step: f64, y: f64) -> f64 {
        let s = (y - self.grid[k]) / step;
        let (h00, h10, h01, h11) = hermite_basis(s);
        let up = |j: usize| 2.0 * self.drift[j] / self.sigma2;
        h00 * self.log_density[k] + h10 * step * up(k) + h01 * self.log_density[k + 1] + h11 * step * up(k + 1)
    }

    /// Normalized density at `y` (zero outside the tabulated support).
    pub fn density(&self, y: f64) -> f64 {
        match self.cell(y) {
            Some((k, step)) => (self.log_density_at(k, step, y) - self.log_norm).exp(),
            None => 0.0,
        }
    }

    pub fn cdf(&self, y: f64) -> f64 {
        let (lo, hi) = self.support();
        if y <= lo {
            return 0.0;
        }
        if y >= hi {
            return 1.0;
        }
        let (k, step) = self.cell(y).expect("inside support");
        let s = (y - self.grid[k]) / step;
        let (h00, h10, h01, h11) = hermite_basis(s);
        let f0 = (self.log_density[k] - self.log_norm).exp();
        let f1 = (self.log_density[k + 1] - self.log_norm).exp();
        (h00 * self.cdf[k] + h10 * step * f0 + h01 * self.cdf[k + 1] + h11 * step * f1).clamp(0.0, 1.0)
    }

    /// Total mass by adaptive quadrature of the normalized density.
    pub fn total_mass(&self) -> f64 {
        let step = self.grid[1] - self.grid[0];
        (0..self.grid.len() - 1)
            .map(|k| {
                let f = |y: f64| (self.log_density_at(k, step, y) - self.log_norm).exp();
                adaptive_simpson(&f, self.grid[k], self.grid[k + 1], 1e-16)
            })
            .sum()
    }

    /// `∫ y² f(y) dy`.
    pub fn second_moment(&self) -> f64 {
        let step = self.grid[1] - self.grid[0];
        (0..self.grid.len() - 1)
            .map(|k| {
                let f = |y: f64| y * y * (self.log_density_at(k, step, y) - self.log_norm).exp();
                adaptive_simpson(&f, self.grid[k], self.grid[k + 1], 1e-18)
            })
            .sum()
    }
}

/// Density at `r` of `⟨x, b⟩` under the Gaussian reference.
pub fn halfspace_density(b: &[f64], r: f64, gamma: f64) -> f64 {
    let v = GaussianReference::new(gamma).linear_variance(b);
    Normal::new(0.0, v.sqrt()).expect("positive variance").pdf(r)
}

/// Distribution function at `r` of `⟨x, b⟩` under the Gaussian reference.
pub fn halfspace_cdf(b: &[f64], r: f64, gamma: f64) -> f64 {
    let v = GaussianReference::new(gamma).linear_variance(b);
    Normal::new(0.0, v.sqrt()).expect("positive variance").cdf(r)
}

/// Draws of `R = Σ_{h ≤ n} σ_h² Z_h²` with independent standard normals `Z_h`.
#[derive(Debug, Clone)]
pub struct RadialSample {
    draws: Vec<f64>,
    bandwidth: f64,
}

impl RadialSample {
    pub fn simulate(gamma: f64, n_modes: usize, n_draws: usize, seed: u64) -> Self {
        let var = GaussianReference::new(gamma).variances(n_modes);
        let chunk = 1 << 16;
        let n_chunks = n_draws.div_ceil(chunk);
        let draws: Vec<f64> = (0..n_chunks)
            .into_par_iter()
            .flat_map_iter(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(c as u64);
                let len = chunk.min(n_draws - c * chunk);
                let var = &var;
                (0..len)
                    .map(move |_| {
                        var.iter()
                            .map(|s2| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                s2 * z * z
                            })
                            .sum::<f64>()
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let mut sorted = draws.clone();
        let mut q = |p: f64| {
            let k = ((n - 1.0) * p) as usize;
            *sorted.select_nth_unstable_by(k, |a, b| a.total_cmp(b)).1
        };
        let iqr = q(0.75) - q(0.25);
        // Silverman's rule.
        let bandwidth = 0.9 * sd.min(iqr / 1.34) * n.powf(-0.2);
        Self { draws, bandwidth }
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn draws(&self) -> &[f64] {
        &self.draws
    }

    /// Gaussian-kernel density at `r` with bandwidths `b` and `2b`, combined as
    /// `(4 f_b - f_{2b})/3` to cancel the `O(b²)` bias. The standard error is
    /// that of the per-draw kernel values.
    pub fn density(&self, r: f64) -> FunctionalEstimate {
        let b = self.bandwidth;
        let c1 = 1.0 / (b * (2.0 * PI).sqrt());
        let c2 = 0.5 * c1;
        let vals: Vec<f64> = self
            .draws
            .par_iter()
            .map(|&d| {
                let u = (r - d) / b;
                if u.abs() > 20.0 {
                    return 0.0;
                }
                let k1 = c1 * (-0.5 * u * u).exp();
                let k2 = c2 * (-0.125 * u * u).exp();
                (4.0 * k1 - k2) / 3.0
            })
            .collect();
        FunctionalEstimate::iid(&vals)
    }
}

/// Density of `|x|²` at `r` under the `n_modes` Gaussian reference, from `10⁷`
/// scalar draws.
pub fn ball_radial_density(r: f64, gamma: f64, n_modes: usize) -> FunctionalEstimate {
    RadialSample::simulate(gamma, n_modes, 10_000_000, 0x0B_A11).density(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reaction::OddPolynomial;

    #[test]
    fn ou_variances() {
        assert!((ou_variance(0.0, 1) - 1.0 / (2.0 * PI * PI)).abs() < 1e-16);
        assert!((ou_variance(1.0, 1) - 1.0 / (2.0 * PI.powi(4))).abs() < 1e-17);
        for g in [0.0, 0.5, 0.9] {
            let r = ou_variance(g, 2) / ou_variance(g, 1);
            assert!((r - 2f64.powf(-2.0 * (1.0 + g))).abs() < 1e-14);
        }
        let g = GaussianReference::new(0.5);
        let v = g.variances(10);
        assert!(v.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn gauss_hermite_moments() {
        let (x, w) = gauss_hermite(20);
        let m0: f64 = w.iter().sum();
        assert!((m0 - PI.sqrt()).abs() < 1e-13);
        let m2: f64 = x.iter().zip(&w).map(|(x, w)| x * x * w).sum();
        assert!((m2 - PI.sqrt() / 2.0).abs() < 1e-13);
        let e = gaussian_expectation(|y| y.cos(), 0.3, 30);
        assert!((e - (-0.15f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn gaussian_vz_integration_by_parts_by_quadrature() {
        // ∫ ∂φ α_1^{-β} dν = ∫ φ v dν in one mode for φ = cos(c y + θ).
        let (gamma, delta) = (0.5, 0.25);
        let beta = 0.5 * (1.0 + gamma + delta);
        let var = ou_variance(gamma, 1);
        let coef = gaussian_vh_coefficient(1, gamma, delta);
        for (c, th) in [(1.0, 0.3), (4.0, -1.1), (10.0, 2.0)] {
            let lhs = gaussian_expectation(|y| -c * (c * y + th).sin() * alpha(1).powf(-beta), var, 60);
            let rhs = gaussian_expectation(|y| (c * y + th).cos() * coef * y, var, 60);
            assert!((lhs - rhs).abs() < 1e-8, "{lhs} vs {rhs}");
        }
        assert_eq!(gaussian_vz(&[1.0], &[0.0], gamma, delta), 0.0);
        assert!((gaussian_vz(&[1.0, 0.0], &[0.7, 3.0], gamma, delta) - coef * 0.7).abs() < 1e-14);
        assert!((gaussian_vh_norm(1, delta) - coef * var.sqrt()).abs() < 1e-13);
    }

    #[test]
    fn closed_form_identity_balances() {
        let x = [0.4, -0.3, 0.2];
        let lam = [1.5, -0.7, 0.4];
        let h = [1.0, 0.5, -0.25];
        for t in [1e-3, 0.05, 0.1, 0.5] {
            let terms = gaussian_identity_trig(0.5, &x, &lam, 0.3, &h, t);
            assert!(terms.residual().abs() < 1e-10, "t = {t}: {terms:?}");
            let lin = gaussian_identity_linear(&lam, &h, t);
            assert!(lin.residual().abs() < 1e-10);
        }
        let e1 = [1.0];
        let lin = gaussian_identity_linear(&e1, &e1, 0.1);
        assert!((lin.gradient - (-alpha(1) * 0.1).exp()).abs() < 1e-15);
    }

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        let (x, w) = gauss_legendre(10);
        let m: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(18)).sum();
        assert!((m - 2.0 / 19.0).abs() < 1e-14);
        // ⟨(y e_1)³, e_1⟩ = 1.5 y³.
        let cubic = Drift::Polynomial(OddPolynomial::new(vec![0.0, 0.0, 0.0, -1.0]).unwrap());
        let b = projected_drift(&cubic, YosidaParam::new(1e-14).unwrap(), 0.7).unwrap();
        assert!((b + 1.5 * 0.343).abs() < 1e-12, "{b}");
    }

    #[test]
    fn gaussian_one_mode_density_is_exact() {
        let gamma = 0.5;
        let d = one_mode_invariant_density(&Drift::Zero, YosidaParam::new(1e-3).unwrap(), gamma).unwrap();
        assert!((d.total_mass() - 1.0).abs() < 1e-10);
        let normal = Normal::new(0.0, ou_variance(gamma, 1).sqrt()).unwrap();
        let (lo, hi) = d.support();
        let mut worst: f64 = 0.0;
        let mut worst_cdf: f64 = 0.0;
        for k in 0..=2000 {
            let y = lo + (hi - lo) * k as f64 / 2000.0 * 0.999_9;
            worst = worst.max((d.density(y) - normal.pdf(y)).abs());
            worst_cdf = worst_cdf.max((d.cdf(y) - normal.cdf(y)).abs());
        }
        assert!(worst < 1e-10, "{worst}");
        assert!(worst_cdf < 1e-10, "{worst_cdf}");
    }

    #[test]
    fn cubic_one_mode_density_shape() {
        let p = Drift::Polynomial(OddPolynomial::new(vec![0.0, 0.0, 0.0, -400.0]).unwrap());
        let eps = YosidaParam::new(1e-8).unwrap();
        // ⟨-400 (y e_1)³, e_1⟩ = -600 y³ up to the Yosida correction.
        let b = projected_drift(&p, eps, 0.2).unwrap();
        assert!((b + 600.0 * 0.008).abs() < 1e-4, "{b}");
        let d = one_mode_invariant_density(&p, eps, 0.5).unwrap();
        assert!((d.total_mass() - 1.0).abs() < 1e-10);
        for y in [0.01, 0.05, 0.1, 0.2] {
            assert!((d.density(y) - d.density(-y)).abs() < 1e-9 * d.density(0.0));
            assert!(d.density(y) < d.density(y * 0.5));
        }
        assert!((d.cdf(0.0) - 0.5).abs() < 1e-10);
        // Lighter tails than the linear Gaussian.
        assert!(d.second_moment() < ou_variance(0.5, 1));
    }

    #[test]
    fn scalar_gaussian_densities() {
        let g = 0.5;
        let s1 = ou_variance(g, 1);
        assert!((halfspace_density(&[1.0], 0.0, g) - 1.0 / (2.0 * PI * s1).sqrt()).abs() < 1e-12);
        let v = GaussianReference::new(g).linear_variance(&[1.0, 1.0]);
        assert!((v - s1 - ou_variance(g, 2)).abs() < 1e-16);
        assert!((halfspace_cdf(&[1.0], 0.0, g) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn radial_kde_integrates_to_one() {
        let s = RadialSample::simulate(0.5, 8, 100_000, 7);
        let hi = s.draws().iter().cloned().fold(0.0, f64::max) * 1.5;
        let lo = -10.0 * s.bandwidth();
        let n = 2000;
        let step = (hi - lo) / n as f64;
        let mass: f64 = (0..=n)
            .map(|k| {
                let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                w * s.density(lo + k as f64 * step).mean
            })
            .sum::<f64>()
            * step;
        assert!((mass - 1.0).abs() < 1e-3, "{mass}");
    }
}
