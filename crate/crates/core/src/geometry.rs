//! Surface measures on level sets `{g = r}` of balls and half-spaces.
//!
//! The surface integral of `φ` is the derivative in `r` of the occupation
//! function `G_φ(r) = ∫_{g ≤ r} φ dν`. Two estimators of it are kept apart:
//! shell averages `(1/2ε) E[φ 1_{|g-r| ≤ ε}]` extrapolated to `ε = 0`, and a
//! kernel-smoothed derivative of `G_φ`.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cylinder::CylinderFunction;
use crate::error::{Error, Result};
use crate::invariant::SampleEnsemble;
use crate::malliavin::{AdjointField, FominDensities};
use crate::spectral::alpha;
use crate::stats::{mean, quantile, variance, FunctionalEstimate};

/// The function whose level set carries the surface measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LevelFunction {
    /// `g(x) = |x|²`.
    Ball,
    /// `g(x) = ⟨x, b⟩`.
    HalfSpace { b: Vec<f64> },
}

impl LevelFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            LevelFunction::Ball => x.iter().map(|v| v * v).sum(),
            LevelFunction::HalfSpace { b } => b.iter().zip(x).map(|(b, x)| b * x).sum(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LevelFunction::Ball => "ball",
            LevelFunction::HalfSpace { .. } => "halfspace",
        }
    }

    /// The half-space through `e_1`.
    pub fn first_halfspace(n_modes: usize) -> Self {
        let mut b = vec![0.0; n_modes];
        b[0] = 1.0;
        LevelFunction::HalfSpace { b }
    }
}

/// Shell half-widths, strictly decreasing, at least three of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShellConfig {
    pub epsilons: Vec<f64>,
}

/// Default shell widths as fractions of the spread of `g`.
pub const DEFAULT_SHELL_FRACTIONS: [f64; 5] = [0.4, 0.3, 0.2, 0.15, 0.1];

impl ShellConfig {
    pub fn new(epsilons: Vec<f64>) -> Result<Self> {
        if epsilons.len() < 3 {
            return Err(Error::Config {
                key: "eps_schedule".into(),
                message: format!("need at least 3 shell widths, got {}", epsilons.len()),
            });
        }
        if epsilons.iter().any(|e| !(*e > 0.0 && e.is_finite())) || epsilons.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config {
                key: "eps_schedule".into(),
                message: "shell widths must be positive and strictly decreasing".into(),
            });
        }
        Ok(Self { epsilons })
    }

    /// `fractions × sd(g)` under the ensemble.
    pub fn relative(ens: &SampleEnsemble, g: &LevelFunction, fractions: &[f64]) -> Result<Self> {
        let vals = ens.map(|x| g.eval(x));
        let sd = variance(&vals).sqrt();
        Self::new(fractions.iter().map(|f| f * sd).collect())
    }
}

/// `E[φ 1_{g ≤ r}]`.
pub fn occupation_cdf(ens: &SampleEnsemble, g: &LevelFunction, phi: &CylinderFunction, r: f64) -> FunctionalEstimate {
    let vals = ens.map(|x| if g.eval(x) <= r { phi.value(x) } else { 0.0 });
    ens.estimate_values(&vals)
}

/// `(1/2ε) E[φ 1_{|g - r| ≤ ε}]`; an empty shell is an error, never a zero.
pub fn shell_estimate(ens: &SampleEnsemble, g: &LevelFunction, phi: &CylinderFunction, r: f64, eps: f64) -> Result<FunctionalEstimate> {
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("shell half-width must be positive, got {eps}")));
    }
    let vals = ens.map(|x| if (g.eval(x) - r).abs() <= eps { phi.value(x) / (2.0 * eps) } else { 0.0 });
    if vals.iter().all(|v| *v == 0.0) && ens.samples().all(|x| (g.eval(x) - r).abs() > eps) {
        return Err(Error::EmptyShell { r, eps });
    }
    Ok(ens.estimate_values(&vals))
}

#[derive(Debug, Clone, Serialize)]
pub struct SurfaceReport {
    pub g: LevelFunction,
    pub r: f64,
    pub epsilons: Vec<f64>,
    /// `None` for an empty shell.
    pub shell_values: Vec<Option<f64>>,
    pub stderr: Vec<Option<f64>>,
    pub hits: Vec<usize>,
    pub extrapolated: f64,
    /// Statistical standard error of the extrapolated value.
    pub extrapolated_stderr: f64,
    /// Change of the extrapolated value when the widest shell is dropped.
    pub extrapolation_residual: f64,
    /// Kernel-smoothed derivative of the occupation function at `r`.
    pub cdf_diff_value: f64,
    pub cdf_diff_stderr: f64,
    pub bandwidth: f64,
    /// Standard error of the difference between the two estimators, computed
    /// per sample so their correlation is accounted for.
    pub difference_stderr: f64,
    pub agreement_flag: bool,
    /// Set when shells were empty or the extrapolation residual exceeds three
    /// statistical standard errors.
    pub degraded: bool,
    /// Set when a negative estimate of a nonnegative integrand was raised to 0.
    pub projected: bool,
}

impl SurfaceReport {
    /// Error budget `(statistical, extrapolation)`.
    pub fn error_budget(&self) -> (f64, f64) {
        (self.extrapolated_stderr, self.extrapolation_residual)
    }

    /// Both error sources in quadrature.
    pub fn combined_error(&self) -> f64 {
        self.extrapolated_stderr.hypot(self.extrapolation_residual)
    }
}

/// Weights `ℓ_k` with `a = Σ ℓ_k S_k` the weighted least-squares intercept of
/// `S(ε) = a + c ε²`.
fn richardson_weights(eps: &[f64], se: &[f64]) -> Vec<f64> {
    let w: Vec<f64> = se.iter().map(|s| if *s > 0.0 { 1.0 / (s * s) } else { 1.0 }).collect();
    let (mut s0, mut s2, mut s4) = (0.0, 0.0, 0.0);
    for (w, e) in w.iter().zip(eps) {
        let e2 = e * e;
        s0 += w;
        s2 += w * e2;
        s4 += w * e2 * e2;
    }
    let det = s0 * s4 - s2 * s2;
    w.iter().zip(eps).map(|(w, e)| w * (s4 - e * e * s2) / det).collect()
}

/// Silverman bandwidth for the values of `g`.
fn silverman(values: &[f64]) -> f64 {
    let sd = variance(values).sqrt();
    let iqr = quantile(values, 0.75) - quantile(values, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * (values.len() as f64).powf(-0.2)
}

/// Surface integral of `φ` on `{g = r}`.
///
/// Non-empty shells are combined by a weighted fit of `a + c ε²`, evaluated
/// per sample so the standard error accounts for the overlap of nested
/// shells. The cross-check differentiates a Gaussian-kernel smoothing of the
/// occupation function with bandwidths `b` and `2b` combined to cancel the
/// leading bias.
pub fn surface_integral(ens: &SampleEnsemble, g: &LevelFunction, phi: &CylinderFunction, r: f64, cfg: &ShellConfig) -> Result<SurfaceReport> {
    let cfg = ShellConfig::new(cfg.epsilons.clone())?;
    let n = ens.len();
    let gv = ens.map(|x| g.eval(x));
    let pv = ens.map(|x| phi.value(x));
    let eps = &cfg.epsilons;

    let mut shell_values = Vec::with_capacity(eps.len());
    let mut stderr = Vec::with_capacity(eps.len());
    let mut hits = Vec::with_capacity(eps.len());
    let mut series: Vec<Vec<f64>> = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    for (k, &e) in eps.iter().enumerate() {
        let count = gv.iter().filter(|v| (*v - r).abs() <= e).count();
        hits.push(count);
        if count == 0 {
            shell_values.push(None);
            stderr.push(None);
            continue;
        }
        let s: Vec<f64> = (0..n)
            .map(|i| if (gv[i] - r).abs() <= e { pv[i] / (2.0 * e) } else { 0.0 })
            .collect();
        let est = ens.estimate_values(&s);
        shell_values.push(Some(est.mean));
        stderr.push(Some(est.stderr));
        series.push(s);
        kept.push(k);
    }
    if kept.len() < 3 {
        let widest = eps[0];
        return Err(Error::EmptyShell { r, eps: widest });
    }

    let fit = |idx: &[usize]| -> Vec<f64> {
        let e: Vec<f64> = idx.iter().map(|&j| eps[kept[j]]).collect();
        let s: Vec<f64> = idx.iter().map(|&j| stderr[kept[j]].unwrap()).collect();
        let l = richardson_weights(&e, &s);
        (0..n).map(|i| idx.iter().zip(&l).map(|(&j, l)| l * series[j][i]).sum()).collect()
    };
    let all: Vec<usize> = (0..kept.len()).collect();
    let extrap_series = fit(&all);
    let extrap = ens.estimate_values(&extrap_series);
    let without_widest = mean(&fit(&all[1..]));
    let extrapolation_residual = (extrap.mean - without_widest).abs();

    let b = silverman(&gv);
    let c1 = 1.0 / (b * (2.0 * PI).sqrt());
    let kde_series: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let u = (gv[i] - r) / b;
            if u.abs() > 40.0 {
                return 0.0;
            }
            let k1 = c1 * (-0.5 * u * u).exp();
            let k2 = 0.5 * c1 * (-0.125 * u * u).exp();
            pv[i] * (4.0 * k1 - k2) / 3.0
        })
        .collect();
    let kde = ens.estimate_values(&kde_series);
    let diff: Vec<f64> = extrap_series.iter().zip(&kde_series).map(|(a, k)| a - k).collect();
    let diff_se = ens.estimate_values(&diff).stderr;
    let tolerance = 3.0 * diff_se.hypot(extrapolation_residual);
    // A nonnegative integrand has a nonnegative surface measure, but the
    // extrapolation and the bias-corrected kernel both carry negative
    // weights; project onto [0, ∞) in that case.
    let nonnegative = pv.iter().all(|v| *v >= 0.0);
    let project = |v: f64| if nonnegative { v.max(0.0) } else { v };
    let (value, kde_value) = (project(extrap.mean), project(kde.mean));
    let projected = value != extrap.mean || kde_value != kde.mean;
    let agreement_flag = (value - kde_value).abs() <= tolerance;
    let degraded = kept.len() < eps.len() || extrapolation_residual > 3.0 * extrap.stderr;

    Ok(SurfaceReport {
        g: g.clone(),
        r,
        epsilons: eps.clone(),
        shell_values,
        stderr,
        hits,
        extrapolated: value,
        extrapolated_stderr: extrap.stderr,
        extrapolation_residual,
        cdf_diff_value: kde_value,
        cdf_diff_stderr: kde.stderr,
        bandwidth: b,
        difference_stderr: diff_se,
        agreement_flag,
        degraded,
        projected,
    })
}

/// Median of `g` under the ensemble; the default level for balls.
pub fn median_level(ens: &SampleEnsemble, g: &LevelFunction) -> f64 {
    quantile(&ens.map(|x| g.eval(x)), 0.5)
}

/// `n⁻¹ + 2|(-A)^{-β} x|²`.
fn ball_denominator(x: &[f64], n: usize, beta: f64) -> f64 {
    let s: f64 = x.iter().enumerate().map(|(i, v)| alpha(i + 1).powf(-2.0 * beta) * v * v).sum();
    1.0 / n as f64 + 2.0 * s
}

/// `F_n(x) = (-A)^{-β} P_n x / (n⁻¹ + 2|(-A)^{-β} x|²)`.
pub fn ball_field(x: &[f64], n: usize, beta: f64) -> Vec<f64> {
    let d = ball_denominator(x, n, beta);
    x.iter()
        .enumerate()
        .map(|(i, v)| if i < n { alpha(i + 1).powf(-beta) * v / d } else { 0.0 })
        .collect()
}

/// `Tr[P_n (-A)^{-2β}] = Σ_{h ≤ n} α_h^{-2β}`.
pub fn projected_trace(n: usize, beta: f64) -> f64 {
    (1..=n).map(|h| alpha(h).powf(-2.0 * beta)).sum()
}

/// `M*(F_n)(x) = -Tr[P_n(-A)^{-2β}]/D + 4|(-A)^{-2β}P_n x|²/D² + Σ_{h≤n} α_h^{-β} x_h v_h(x)/D`.
pub fn mstar_ball(x: &[f64], n: usize, v: &FominDensities) -> Result<f64> {
    let beta = v.beta();
    let d = ball_denominator(x, n, beta);
    let m = n.min(x.len());
    let mut quad = 0.0;
    let mut dens = 0.0;
    for h in 1..=m {
        let a = alpha(h);
        let xh = x[h - 1];
        quad += a.powf(-4.0 * beta) * xh * xh;
        dens += a.powf(-beta) * xh * v.value(h, x)?;
    }
    Ok(-projected_trace(m, beta) / d + 4.0 * quad / (d * d) + dens / d)
}

/// `M*(F) = Σ_j α_j^{-β} b_j v_j(x) / |(-A)^{-β} b|²` for the constant field
/// `F = (-A)^{-β} b / |(-A)^{-β} b|²`.
pub fn mstar_halfspace(x: &[f64], b: &[f64], v: &FominDensities) -> Result<f64> {
    let beta = v.beta();
    let mut num = 0.0;
    let mut den = 0.0;
    for (j, bj) in b.iter().enumerate() {
        if *bj == 0.0 {
            continue;
        }
        let w = alpha(j + 1).powf(-beta);
        num += w * bj * v.value(j + 1, x)?;
        den += w * w * bj * bj;
    }
    if den == 0.0 {
        return Err(Error::Domain("half-space normal must be nonzero".into()));
    }
    Ok(num / den)
}

/// The ball field `F_n` as an adjoint field.
#[derive(Debug, Clone, Copy)]
pub struct BallField {
    pub n: usize,
    pub beta: f64,
}

impl AdjointField for BallField {
    fn value(&self, x: &[f64]) -> Vec<f64> {
        ball_field(x, self.n, self.beta)
    }

    fn required_modes(&self, n_modes: usize) -> Vec<usize> {
        (1..=self.n.min(n_modes)).collect()
    }

    fn mstar(&self, x: &[f64], v: &FominDensities) -> Result<f64> {
        mstar_ball(x, self.n, v)
    }
}

/// The constant half-space field `(-A)^{-β} b / |(-A)^{-β} b|²`.
#[derive(Debug, Clone)]
pub struct HalfSpaceField {
    pub b: Vec<f64>,
    pub beta: f64,
}

impl AdjointField for HalfSpaceField {
    fn value(&self, x: &[f64]) -> Vec<f64> {
        let w: Vec<f64> = (1..=self.b.len()).map(|j| alpha(j).powf(-self.beta)).collect();
        let den: f64 = self.b.iter().zip(&w).map(|(b, w)| (w * b).powi(2)).sum();
        (0..x.len()).map(|j| self.b.get(j).map_or(0.0, |b| w[j] * b / den)).collect()
    }

    fn required_modes(&self, _n_modes: usize) -> Vec<usize> {
        self.b.iter().enumerate().filter(|(_, b)| **b != 0.0).map(|(j, _)| j + 1).collect()
    }

    fn mstar(&self, x: &[f64], v: &FominDensities) -> Result<f64> {
        mstar_halfspace(x, &self.b, v)
    }
}

/// `E[(2|(-A)^{-β} x|²)^{-q}]`, the negative moment that keeps the ball field
/// integrable as the regularization is removed.
pub fn negative_moment(ens: &SampleEnsemble, beta: f64, q: f64) -> FunctionalEstimate {
    let w: Vec<f64> = (1..=ens.n_modes()).map(|h| alpha(h).powf(-2.0 * beta)).collect();
    let vals = ens.map(|x| {
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        (2.0 * s).powf(-q)
    });
    ens.estimate_values(&vals)
}
