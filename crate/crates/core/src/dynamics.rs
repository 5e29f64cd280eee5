//! Time stepping of the Galerkin-truncated equation, its tangent flow and the
//! Bismut–Elworthy–Li weight.
//!
//! One step of size `dt` is an exponential Euler step per mode `h`:
//!
//! ```text
//! x_h ← e^{-α_h dt} x_h + (1 - e^{-α_h dt})/α_h · [p_ε(X)]_h + α_h^{-γ/2} s_h ζ_h
//! s_h = ((1 - e^{-2α_h dt}) / (2α_h))^{1/2}
//! ```
//!
//! with the drift projected through the collocation grid. For `p ≡ 0` this is
//! the exact Ornstein–Uhlenbeck transition. The tangent step is the exact
//! derivative of the map above in `x`, with `p_ε'(X)` taken at the start of
//! the step.
//!
//! The weight accumulates `Σ_h α_h^{γ/2} η_h dβ̃_h` where `η` is the tangent
//! after the step and `dβ̃_h = κ_h dβ_h`, `κ_h = √dt / s_h`. With this
//! calibration the Gaussian integration by parts on each step is exact, so the
//! estimator `φ(X_T) W / T` is unbiased for the gradient of the *discrete*
//! semigroup; `κ_h → 1` as `dt → 0`.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::noise::{NoiseIncrement, NoiseSource};
use crate::reaction::YosidaParam;
use crate::spectral::{alpha, alpha_powers, Collocation, SpectralVector};

/// Per-mode coefficients of the scheme for a fixed `(cfg, dt)`.
#[derive(Debug, Clone)]
pub struct Integrator {
    cfg: ModelConfig,
    eps: YosidaParam,
    coll: Collocation,
    decay: Vec<f64>,
    phi1_dt: Vec<f64>,
    noise_amp: Vec<f64>,
    bel_coef: Vec<f64>,
    calibration: Vec<f64>,
    gamma_half: Vec<f64>,
}

/// Scratch buffers reused across steps.
#[derive(Debug, Clone)]
pub struct Workspace {
    grid: Vec<f64>,
    value: Vec<f64>,
    slope: Vec<f64>,
    tmp_grid: Vec<f64>,
    drift: Vec<f64>,
    tmp_modes: Vec<f64>,
}

impl Workspace {
    pub fn new(integ: &Integrator) -> Self {
        let m = integ.coll.n_nodes();
        let n = integ.coll.n_modes();
        Self {
            grid: vec![0.0; m],
            value: vec![0.0; m],
            slope: vec![0.0; m],
            tmp_grid: vec![0.0; m],
            drift: vec![0.0; n],
            tmp_modes: vec![0.0; n],
        }
    }

    /// `sup_ξ |p_ε'(X(ξ))|` on the grid from the last drift evaluation.
    pub fn slope_sup(&self) -> f64 {
        self.slope.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

impl Integrator {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_modes;
        let dt = cfg.dt;
        let mut decay = Vec::with_capacity(n);
        let mut phi1_dt = Vec::with_capacity(n);
        let mut noise_amp = Vec::with_capacity(n);
        let mut bel_coef = Vec::with_capacity(n);
        let mut calibration = Vec::with_capacity(n);
        let gamma_half = alpha_powers(0.5 * cfg.gamma, n);
        for h in 1..=n {
            let a = alpha(h);
            let e = (-a * dt).exp();
            decay.push(e);
            phi1_dt.push(-(-a * dt).exp_m1() / a);
            let s = (-(-2.0 * a * dt).exp_m1() / (2.0 * a)).sqrt();
            noise_amp.push(a.powf(-0.5 * cfg.gamma) * s);
            let kappa = dt.sqrt() / s;
            calibration.push(kappa);
            bel_coef.push(gamma_half[h - 1] * kappa);
        }
        Ok(Self {
            cfg: cfg.clone(),
            eps: cfg.yosida(),
            coll: Collocation::new(n),
            decay,
            phi1_dt,
            noise_amp,
            bel_coef,
            calibration,
            gamma_half,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn n_modes(&self) -> usize {
        self.cfg.n_modes
    }

    pub fn dt(&self) -> f64 {
        self.cfg.dt
    }

    pub fn collocation(&self) -> &Collocation {
        &self.coll
    }

    /// `κ_h = √dt / s_h`, the factor mapping Brownian increments to the
    /// increments the weight integrates against.
    pub fn calibration(&self) -> &[f64] {
        &self.calibration
    }

    /// Evaluate `p_ε(X)` and `p_ε'(X)` on the grid and project the drift.
    /// Fills `ws.drift`, `ws.value`, `ws.slope`.
    fn evaluate_drift(&self, x: &[f64], ws: &mut Workspace) -> Result<()> {
        let cap = self.cfg.blowup_cap;
        if self.cfg.drift.is_zero() {
            ws.drift.iter_mut().for_each(|d| *d = 0.0);
            ws.slope.iter_mut().for_each(|d| *d = 0.0);
            let bound = std::f64::consts::SQRT_2 * x.iter().map(|c| c.abs()).sum::<f64>();
            if !bound.is_finite() || bound > cap {
                self.coll.synthesize(x, &mut ws.grid);
                let sup = ws.grid.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                if !(sup <= cap) {
                    return Err(blow_up(sup, cap));
                }
            }
            return Ok(());
        }
        self.coll.synthesize(x, &mut ws.grid);
        for j in 0..ws.grid.len() {
            let v = ws.grid[j];
            if !(v.abs() <= cap) {
                let sup = ws.grid.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                return Err(blow_up(sup, cap));
            }
            let (val, slope) = self.cfg.drift.regularized(self.eps, v)?;
            ws.value[j] = val;
            ws.slope[j] = slope;
        }
        self.coll.analyze(&ws.value, &mut ws.drift);
        Ok(())
    }

    fn advance_state(&self, x: &mut [f64], dw: &NoiseIncrement, ws: &Workspace) {
        let isdt = 1.0 / dw.dt.sqrt();
        for h in 0..x.len() {
            x[h] = self.decay[h] * x[h] + self.phi1_dt[h] * ws.drift[h] + self.noise_amp[h] * dw.dbeta[h] * isdt;
        }
    }

    /// Tangent update using the slopes stored in `ws`.
    fn advance_tangent(&self, eta: &mut [f64], ws: &mut Workspace) {
        if self.cfg.drift.is_zero() {
            for h in 0..eta.len() {
                eta[h] *= self.decay[h];
            }
            return;
        }
        self.coll.synthesize(eta, &mut ws.tmp_grid);
        for (g, s) in ws.tmp_grid.iter_mut().zip(&ws.slope) {
            *g *= s;
        }
        self.coll.analyze(&ws.tmp_grid, &mut ws.tmp_modes);
        for h in 0..eta.len() {
            eta[h] = self.decay[h] * eta[h] + self.phi1_dt[h] * ws.tmp_modes[h];
        }
    }

    /// One step of the state equation.
    pub fn step_spde(&self, x: &SpectralVector, dw: &NoiseIncrement) -> Result<SpectralVector> {
        self.check_width(x.n_modes())?;
        let mut ws = Workspace::new(self);
        self.evaluate_drift(x, &mut ws)?;
        let mut out = x.clone();
        self.advance_state(&mut out, dw, &ws);
        SpectralVector::new(out.into_inner())
    }

    /// One step of the tangent equation along the state `x` at the start of the step.
    pub fn step_tangent(&self, x: &SpectralVector, eta: &SpectralVector) -> Result<SpectralVector> {
        self.check_width(x.n_modes())?;
        self.check_width(eta.n_modes())?;
        let mut ws = Workspace::new(self);
        self.evaluate_drift(x, &mut ws)?;
        let mut out = eta.clone();
        self.advance_tangent(&mut out, &mut ws);
        Ok(out)
    }

    /// `acc + Σ_h α_h^{γ/2} η_h dβ_h`. The increment must be the one driving the
    /// state over the same step; callers inside this crate pass calibrated
    /// increments, see [`Integrator::calibrate`].
    pub fn accumulate_bel(&self, eta: &[f64], dw: &NoiseIncrement, acc: f64) -> f64 {
        acc + eta
            .iter()
            .zip(&dw.dbeta)
            .zip(&self.gamma_half)
            .map(|((e, b), g)| g * e * b)
            .sum::<f64>()
    }

    /// `dβ̃_h = κ_h dβ_h`.
    pub fn calibrate(&self, dw: &NoiseIncrement) -> NoiseIncrement {
        NoiseIncrement {
            dbeta: dw.dbeta.iter().zip(&self.calibration).map(|(b, k)| b * k).collect(),
            dt: dw.dt,
        }
    }

    fn check_width(&self, n: usize) -> Result<()> {
        if n != self.cfg.n_modes {
            return Err(Error::Shape {
                expected: self.cfg.n_modes,
                found: n,
            });
        }
        Ok(())
    }

    /// Run the coupled state / tangent / weight recursion.
    ///
    /// `observe` is called after every step with the step count and the
    /// current state; it may be a no-op.
    pub fn simulate_path<F>(&self, spec: &PathSpec<'_>, mut observe: F) -> Result<(PathState, PathDiagnostics)>
    where
        F: FnMut(u64, &PathState),
    {
        let n = self.cfg.n_modes;
        self.check_width(spec.x0.len())?;
        for d in spec.directions {
            self.check_width(d.len())?;
        }
        let dt = self.cfg.dt;
        let dt_fine = dt / (1u64 << spec.level) as f64;
        let mut noise = NoiseSource::new(self.cfg.seed, spec.stream, n);
        let mut dw = NoiseIncrement::zeros(n, dt);
        let mut ws = Workspace::new(self);

        let mut state = PathState {
            x: SpectralVector::new(spec.x0.to_vec())?,
            tangents: spec
                .directions
                .iter()
                .map(|h| TangentState {
                    eta: h.clone(),
                    bel_integral: 0.0,
                    bel_tilted: 0.0,
                })
                .collect(),
            t: 0.0,
            step: 0,
        };

        let cfg_alpha = self.cfg.alpha();
        let orders = [1.0 - cfg_alpha, -cfg_alpha, 1.0 - cfg_alpha - self.cfg.delta];
        let mut norm_tracks: Vec<TangentNorms> = if spec.track_tangent_norms {
            state
                .tangents
                .iter()
                .map(|t| TangentNorms::start(&t.eta, orders))
                .collect()
        } else {
            Vec::new()
        };

        let mut slope_sup_max: f64 = 0.0;
        let mut sup_history = spec.record_sup.then(Vec::new);
        let with_location = |e: Error, step: u64| match e {
            Error::BlowUp { sup_norm, cap, .. } => Error::BlowUp {
                chain: spec.stream,
                step,
                sup_norm,
                cap,
            },
            other => other,
        };

        for k in 0..spec.steps {
            self.evaluate_drift(&state.x, &mut ws).map_err(|e| with_location(e, k))?;
            if !self.cfg.drift.is_zero() {
                slope_sup_max = slope_sup_max.max(ws.slope_sup());
            }
            if let Some(hist) = sup_history.as_mut() {
                if self.cfg.drift.is_zero() {
                    self.coll.synthesize(&state.x, &mut ws.grid);
                }
                hist.push(ws.grid.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
            }
            noise.increment(k, spec.level, dt_fine, &mut dw);
            let s_k = k as f64 * dt;
            for (d, tan) in state.tangents.iter_mut().enumerate() {
                let tilt = (spec.tilts.get(d).copied().unwrap_or(0.0) * s_k).exp();
                self.advance_tangent(&mut tan.eta, &mut ws);
                let term: f64 = (0..n).map(|h| self.bel_coef[h] * tan.eta[h] * dw.dbeta[h]).sum();
                tan.bel_integral += term;
                tan.bel_tilted += tilt * term;
            }
            self.advance_state(&mut state.x, &dw, &ws);
            state.step = k + 1;
            state.t = (k + 1) as f64 * dt;
            for (track, tan) in norm_tracks.iter_mut().zip(&state.tangents) {
                track.push(&tan.eta, dt);
            }
            observe(state.step, &state);
        }
        // Δ_T includes the terminal state.
        self.evaluate_drift(&state.x, &mut ws)
            .map_err(|e| with_location(e, spec.steps))?;
        if !self.cfg.drift.is_zero() {
            slope_sup_max = slope_sup_max.max(ws.slope_sup());
        }

        let diagnostics = PathDiagnostics {
            delta_t: slope_sup_max * slope_sup_max + 1.0,
            sup_norm_history: sup_history,
            tangent_norms: norm_tracks,
        };
        Ok((state, diagnostics))
    }

    /// Advance the state only, calling `observe` after each step; used by the
    /// ergodic sampler where no tangent is needed.
    pub fn run_chain<F>(&self, x: &mut [f64], steps: u64, stream: u64, mut observe: F) -> Result<()>
    where
        F: FnMut(u64, &[f64]),
    {
        self.check_width(x.len())?;
        let n = self.cfg.n_modes;
        let mut noise = NoiseSource::new(self.cfg.seed, stream, n);
        let mut dw = NoiseIncrement::zeros(n, self.cfg.dt);
        let mut ws = Workspace::new(self);
        for k in 0..steps {
            self.evaluate_drift(x, &mut ws).map_err(|e| match e {
                Error::BlowUp { sup_norm, cap, .. } => Error::BlowUp {
                    chain: stream,
                    step: k,
                    sup_norm,
                    cap,
                },
                other => other,
            })?;
            noise.increment(k, 0, self.cfg.dt, &mut dw);
            self.advance_state(x, &dw, &ws);
            observe(k + 1, x);
        }
        Ok(())
    }

    /// Pointwise `p_ε'(X)` on the grid for a state `x`; used by the
    /// integration-by-parts identity checks.
    pub fn grid_slopes(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut ws = Workspace::new(self);
        self.evaluate_drift(x, &mut ws)?;
        Ok(ws.slope)
    }

    /// Galerkin projection of `p_ε'(X) h`.
    pub fn multiply_by_slope(&self, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        let mut ws = Workspace::new(self);
        self.evaluate_drift(x, &mut ws)?;
        if self.cfg.drift.is_zero() {
            return Ok(vec![0.0; h.len()]);
        }
        self.coll.synthesize(h, &mut ws.tmp_grid);
        for (g, s) in ws.tmp_grid.iter_mut().zip(&ws.slope) {
            *g *= s;
        }
        let mut out = vec![0.0; h.len()];
        self.coll.analyze(&ws.tmp_grid, &mut out);
        Ok(out)
    }
}

fn blow_up(sup_norm: f64, cap: f64) -> Error {
    Error::BlowUp {
        chain: 0,
        step: 0,
        sup_norm,
        cap,
    }
}

/// What to simulate along one path.
#[derive(Debug, Clone)]
pub struct PathSpec<'a> {
    pub x0: &'a [f64],
    pub steps: u64,
    /// Tangent directions `h`; each gets its own `η^h` and weight.
    pub directions: &'a [Vec<f64>],
    pub stream: u64,
    /// Noise is drawn on a grid `2^level` times finer than `dt` and summed.
    pub level: u32,
    /// Per-direction rate `λ` of the time weight `e^{λ s}` in the tilted
    /// weight; missing entries mean `λ = 0`.
    pub tilts: &'a [f64],
    pub record_sup: bool,
    pub track_tangent_norms: bool,
}

impl<'a> PathSpec<'a> {
    pub fn new(x0: &'a [f64], steps: u64, stream: u64) -> Self {
        Self {
            x0,
            steps,
            directions: &[],
            stream,
            level: 0,
            tilts: &[],
            record_sup: false,
            track_tangent_norms: false,
        }
    }

    pub fn with_directions(mut self, directions: &'a [Vec<f64>]) -> Self {
        self.directions = directions;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TangentState {
    pub eta: Vec<f64>,
    /// `∫₀ᵗ ⟨(-A)^{γ/2} η, dW⟩`.
    pub bel_integral: f64,
    /// `∫₀ᵗ e^{λ s} ⟨(-A)^{γ/2} η, dW⟩` for this direction's tilt `λ`.
    pub bel_tilted: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathState {
    pub x: SpectralVector,
    pub tangents: Vec<TangentState>,
    pub t: f64,
    pub step: u64,
}

impl PathState {
    /// Tangent of the first direction, if any.
    pub fn eta(&self) -> Option<&[f64]> {
        self.tangents.first().map(|t| t.eta.as_slice())
    }

    pub fn bel_integral(&self) -> f64 {
        self.tangents.first().map_or(0.0, |t| t.bel_integral)
    }
}

/// Time weight used to turn the stochastic integral into a gradient estimator.
/// Any deterministic density on `[0, t]` with unit mass gives an unbiased
/// estimator; `Uniform` is `1/t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BelWeight {
    Uniform,
    /// Density proportional to `e^{rate · s}`. Concentrating mass near `t`
    /// lowers the variance for rapidly decaying directions.
    Exponential { rate: f64 },
}

impl BelWeight {
    pub fn rate(self) -> f64 {
        match self {
            BelWeight::Uniform => 0.0,
            BelWeight::Exponential { rate } => rate,
        }
    }

    /// `Σ_{k<steps} e^{λ k dt} dt`, the discrete normalizer of the tilted weight.
    pub fn normalizer(self, steps: u64, dt: f64) -> f64 {
        let rate = self.rate();
        (0..steps).map(|k| (rate * k as f64 * dt).exp() * dt).sum()
    }

    /// Weight value `W` such that `E[φ(X_t) W] = ⟨D P_t φ, h⟩`.
    pub fn weight(self, tan: &TangentState, steps: u64, dt: f64) -> f64 {
        match self {
            BelWeight::Uniform => tan.bel_integral / (steps as f64 * dt),
            BelWeight::Exponential { .. } => tan.bel_tilted / self.normalizer(steps, dt),
        }
    }
}

/// Running norms of one tangent for the pathwise tangent ratios.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TangentNorms {
    /// Orders `(1-α, -α, 1-α-δ)`.
    pub orders: [f64; 3],
    /// `|h|_{-α}` of the initial direction.
    pub initial_neg: f64,
    /// `∫₀ᵀ |η|²_{1-α} dt`.
    pub integral_upper: f64,
    /// `sup_t |η(t)|_{-α}`.
    pub sup_neg: f64,
    /// `∫₀ᵀ |η|²_{1-α-δ} dt`.
    pub integral_mid: f64,
    #[serde(skip)]
    last: Vec<f64>,
    #[serde(skip)]
    weights: [Vec<f64>; 3],
}

impl TangentNorms {
    fn start(eta: &[f64], orders: [f64; 3]) -> Self {
        let n = eta.len();
        let weights = [
            alpha_powers(orders[0], n),
            alpha_powers(orders[1], n),
            alpha_powers(orders[2], n),
        ];
        let neg = weights[1].iter().zip(eta).map(|(w, e)| w * e * e).sum::<f64>().sqrt();
        Self {
            orders,
            initial_neg: neg,
            integral_upper: 0.0,
            sup_neg: neg,
            integral_mid: 0.0,
            last: eta.iter().map(|e| e * e).collect(),
            weights,
        }
    }

    /// Per mode, `η_h²` is integrated over the step as the exponential through
    /// its end values (the log-mean), which is exact for the linear decay and
    /// stays accurate when `α_h dt` is large. A sign change falls back to the
    /// trapezoid rule.
    fn push(&mut self, eta: &[f64], dt: f64) {
        let mut up = 0.0;
        let mut mid = 0.0;
        let mut neg = 0.0;
        for (h, e) in eta.iter().enumerate() {
            let (a, b) = (self.last[h], e * e);
            let area = if a > 0.0 && b > 0.0 && (a - b).abs() > 1e-9 * a {
                (a - b) / (a / b).ln() * dt
            } else {
                0.5 * (a + b) * dt
            };
            up += self.weights[0][h] * area;
            mid += self.weights[2][h] * area;
            neg += self.weights[1][h] * b;
            self.last[h] = b;
        }
        self.integral_upper += up;
        self.integral_mid += mid;
        self.sup_neg = self.sup_neg.max(neg.sqrt());
    }

    /// `∫|η|²_{1-α} / (Δ |h|²_{-α})`.
    pub fn energy_ratio(&self, delta_t: f64) -> f64 {
        self.integral_upper / (delta_t * self.initial_neg * self.initial_neg)
    }

    /// `sup_t |η(t)|_{-α} / (Δ |h|_{-α})`.
    pub fn negative_norm_ratio(&self, delta_t: f64) -> f64 {
        self.sup_neg / (delta_t * self.initial_neg)
    }

    /// `∫|η|²_{1-α-δ} / (Δ |h|²_{-α})`.
    pub fn interpolated_ratio(&self, delta_t: f64) -> f64 {
        self.integral_mid / (delta_t * self.initial_neg * self.initial_neg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathDiagnostics {
    /// `Δ_{T,ε}(X) = sup_t |p_ε'(X(t))|²_∞ + 1`, sup over the grid.
    pub delta_t: f64,
    pub sup_norm_history: Option<Vec<f64>>,
    /// One entry per direction when norm tracking was requested.
    pub tangent_norms: Vec<TangentNorms>,
}

/// One state step for a given configuration.
pub fn step_spde(cfg: &ModelConfig, x: &SpectralVector, dw: &NoiseIncrement) -> Result<SpectralVector> {
    Integrator::new(cfg)?.step_spde(x, dw)
}

/// One tangent step along `x`.
pub fn step_tangent(cfg: &ModelConfig, x: &SpectralVector, eta: &SpectralVector) -> Result<SpectralVector> {
    Integrator::new(cfg)?.step_tangent(x, eta)
}

/// `acc + Σ_h α_h^{γ/2} η_h dβ_h`.
pub fn accumulate_bel(cfg: &ModelConfig, eta: &[f64], dw: &NoiseIncrement, acc: f64) -> Result<f64> {
    Ok(Integrator::new(cfg)?.accumulate_bel(eta, dw, acc))
}

/// Simulate to time `t_final` (a multiple of `dt`) from `x0`, optionally with a
/// tangent in direction `h`. The noise stream is `cfg.chain_id`.
pub fn simulate_path(
    cfg: &ModelConfig,
    x0: &SpectralVector,
    t_final: f64,
    direction: Option<&SpectralVector>,
) -> Result<(PathState, PathDiagnostics)> {
    let integ = Integrator::new(cfg)?;
    let steps = steps_for(t_final, cfg.dt)?;
    let dirs: Vec<Vec<f64>> = direction.map(|h| h.to_vec()).into_iter().collect();
    let mut spec = PathSpec::new(x0, steps, cfg.chain_id).with_directions(&dirs);
    spec.track_tangent_norms = direction.is_some();
    integ.simulate_path(&spec, |_, _| {})
}

/// Number of steps of size `dt` in `t`, which must be a positive multiple.
pub fn steps_for(t: f64, dt: f64) -> Result<u64> {
    let k = (t / dt).round();
    if !(t > 0.0) || k < 1.0 || ((k * dt - t).abs() > 1e-9 * t) {
        return Err(Error::Domain(format!("horizon {t} is not a positive multiple of dt = {dt}")));
    }
    Ok(k as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{stream_id, tags};
    use crate::reaction::{Drift, OddPolynomial};

    fn cfg(drift: Drift, n: usize) -> ModelConfig {
        ModelConfig {
            drift,
            n_modes: n,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn linear_decay_without_noise() {
        let c = cfg(Drift::Zero, 4);
        let e1 = SpectralVector::unit(1, 4).unwrap();
        let x = step_spde(&c, &e1, &NoiseIncrement::zeros(4, c.dt)).unwrap();
        assert!((x.mode(1) - (-alpha(1) * c.dt).exp()).abs() < 1e-15);
        let zero = SpectralVector::zeros(4);
        let c3 = cfg(Drift::Polynomial(OddPolynomial::cubic()), 4);
        assert_eq!(step_spde(&c3, &zero, &NoiseIncrement::zeros(4, c.dt)).unwrap(), zero);
    }

    #[test]
    fn tangent_is_heat_semigroup_for_zero_drift() {
        let c = cfg(Drift::Zero, 3);
        let integ = Integrator::new(&c).unwrap();
        let x = SpectralVector::new(vec![0.3, -0.2, 0.1]).unwrap();
        let mut eta = SpectralVector::unit(1, 3).unwrap();
        for _ in 0..25 {
            eta = integ.step_tangent(&x, &eta).unwrap();
        }
        assert!((eta.mode(1) - (-alpha(1) * 25.0 * c.dt).exp()).abs() < 1e-14);
    }

    #[test]
    fn tangent_step_is_linear() {
        let c = cfg(Drift::Polynomial(OddPolynomial::cubic()), 6);
        let integ = Integrator::new(&c).unwrap();
        let x = SpectralVector::new(vec![1.2, -0.4, 0.5, 0.1, -0.3, 0.2]).unwrap();
        let e1 = SpectralVector::new(vec![0.1, 0.2, -0.3, 0.4, 0.0, 1.0]).unwrap();
        let e2 = SpectralVector::new(vec![-1.0, 0.5, 0.25, 0.0, 0.3, -0.2]).unwrap();
        let (a, b) = (1.7, -0.6);
        let comb = SpectralVector::new(e1.iter().zip(e2.iter()).map(|(u, v)| a * u + b * v).collect()).unwrap();
        let lhs = integ.step_tangent(&x, &comb).unwrap();
        let t1 = integ.step_tangent(&x, &e1).unwrap();
        let t2 = integ.step_tangent(&x, &e2).unwrap();
        for h in 0..6 {
            assert!((lhs[h] - (a * t1[h] + b * t2[h])).abs() < 1e-12);
        }
    }

    #[test]
    fn bel_accumulation_single_term() {
        let c = cfg(Drift::Zero, 2);
        let mut dw = NoiseIncrement::zeros(2, c.dt);
        assert_eq!(accumulate_bel(&c, &[0.0, 0.0], &dw, 1.5).unwrap(), 1.5);
        dw.dbeta[0] = 0.3;
        let acc = accumulate_bel(&c, &[1.0, 0.0], &dw, 0.0).unwrap();
        assert!((acc - alpha(1).powf(0.25) * 0.3).abs() < 1e-15);
    }

    #[test]
    fn one_step_reproduces_exact_ou_transition() {
        // Mean e^{-α dt} x and variance α^{-γ}(1 - e^{-2α dt})/(2α) per mode.
        let c = cfg(Drift::Zero, 3);
        let integ = Integrator::new(&c).unwrap();
        let x = SpectralVector::new(vec![0.4, -0.1, 0.05]).unwrap();
        let mut dw = NoiseIncrement::zeros(3, c.dt);
        let mean = integ.step_spde(&x, &dw).unwrap();
        for h in 1..=3 {
            let a = alpha(h);
            assert!((mean.mode(h) - (-a * c.dt).exp() * x.mode(h)).abs() < 1e-15);
            // Response to a unit standardized increment equals the exact sd.
            dw.dbeta.iter_mut().for_each(|b| *b = 0.0);
            dw.dbeta[h - 1] = c.dt.sqrt();
            let y = integ.step_spde(&x, &dw).unwrap();
            let sd = (a.powf(-c.gamma) * (1.0 - (-2.0 * a * c.dt).exp()) / (2.0 * a)).sqrt();
            assert!(((y.mode(h) - mean.mode(h)) - sd).abs() < 1e-12 * sd);
        }
    }

    #[test]
    fn second_moment_matches_ou_recursion() {
        // x_1(T)² over 10⁵ paths from x_1(0) = 0.2 with p ≡ 0.
        let c = ModelConfig {
            dt: 1e-2,
            ..cfg(Drift::Zero, 2)
        };
        let integ = Integrator::new(&c).unwrap();
        let steps = 10;
        let x0 = [0.2, 0.0];
        let n = 100_000;
        let vals: Vec<f64> = (0..n)
            .map(|i| {
                let mut x = x0;
                integ.run_chain(&mut x, steps, stream_id(tags::ORACLE, i), |_, _| {}).unwrap();
                x[0] * x[0]
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        // Independent recursion m_{k+1} = a² m_k + q.
        let a = (-alpha(1) * c.dt).exp();
        let q = alpha(1).powf(-c.gamma) * (1.0 - a * a) / (2.0 * alpha(1));
        let mut m = 0.04;
        for _ in 0..steps {
            m = a * a * m + q;
        }
        assert!((mean - m).abs() < 3.0 * se, "{mean} vs {m} (se {se})");
    }

    #[test]
    fn bel_weight_is_a_martingale_and_satisfies_isometry() {
        let c = ModelConfig {
            dt: 1e-3,
            ..cfg(Drift::Zero, 4)
        };
        let integ = Integrator::new(&c).unwrap();
        let e1 = vec![vec![1.0, 0.0, 0.0, 0.0]];
        let x0 = [0.0; 4];
        let steps = 50;
        let n = 10_000;
        let w: Vec<f64> = (0..n)
            .map(|i| {
                let spec = PathSpec::new(&x0, steps, stream_id(tags::BEL, i)).with_directions(&e1);
                integ.simulate_path(&spec, |_, _| {}).unwrap().0.bel_integral()
            })
            .collect();
        let mean = w.iter().sum::<f64>() / n as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 3.0 * (var / n as f64).sqrt());
        // ∫₀ᵀ α^γ e^{-2α s} ds with the deterministic tangent e^{-α s}.
        let a = alpha(1);
        let t = steps as f64 * c.dt;
        let iso = a.powf(c.gamma) * (1.0 - (-2.0 * a * t).exp()) / (2.0 * a);
        assert!((var / iso - 1.0).abs() < 0.05, "var {var} vs {iso}");
    }

    #[test]
    fn tangent_matches_common_noise_difference_quotient() {
        let c = cfg(Drift::Polynomial(OddPolynomial::cubic()), 8);
        let integ = Integrator::new(&c).unwrap();
        let steps = steps_for(0.1, c.dt).unwrap();
        let x0 = vec![1.0, -0.5, 0.3, 0.0, 0.2, 0.0, 0.0, 0.1];
        let h = vec![vec![0.0, 1.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0]];
        let kappa = 1e-4;
        for path in 0..5 {
            let stream = stream_id(tags::BEL, path);
            let (base, _) = integ
                .simulate_path(&PathSpec::new(&x0, steps, stream).with_directions(&h), |_, _| {})
                .unwrap();
            let shifted: Vec<f64> = x0.iter().zip(&h[0]).map(|(x, d)| x + kappa * d).collect();
            let (bumped, _) = integ.simulate_path(&PathSpec::new(&shifted, steps, stream), |_, _| {}).unwrap();
            let fd: Vec<f64> = bumped.x.iter().zip(base.x.iter()).map(|(a, b)| (a - b) / kappa).collect();
            let eta = base.eta().unwrap();
            let err: f64 = fd.iter().zip(eta).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let size: f64 = eta.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err < 1e-2 * size, "path {path}: rel err {}", err / size);
        }
    }

    #[test]
    fn diagnostics_and_blow_up() {
        let c = cfg(Drift::Polynomial(OddPolynomial::cubic()), 4);
        let x0 = SpectralVector::new(vec![0.5, 0.1, 0.0, 0.0]).unwrap();
        let (_, diag) = simulate_path(&c, &x0, 0.05, Some(&SpectralVector::unit(1, 4).unwrap())).unwrap();
        assert!(diag.delta_t >= 1.0);
        let (_, diag0) = simulate_path(&cfg(Drift::Zero, 4), &x0, 0.05, None).unwrap();
        assert_eq!(diag0.delta_t, 1.0);

        let bad = ModelConfig {
            blowup_cap: 1.0,
            ..c.clone()
        };
        let big = SpectralVector::new(vec![5.0, 0.0, 0.0, 0.0]).unwrap();
        match simulate_path(&bad, &big, 0.01, None) {
            Err(Error::BlowUp { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected blow-up, got {other:?}"),
        }
        assert!(simulate_path(&c, &x0, 0.00051, None).is_err());
    }

    #[test]
    fn identical_streams_are_bit_identical() {
        let c = cfg(Drift::Polynomial(OddPolynomial::cubic()), 8);
        let x0 = SpectralVector::new(vec![0.1; 8]).unwrap();
        let a = simulate_path(&c, &x0, 0.02, Some(&SpectralVector::unit(2, 8).unwrap())).unwrap();
        let b = simulate_path(&c, &x0, 0.02, Some(&SpectralVector::unit(2, 8).unwrap())).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn exponential_weight_normalizer() {
        let w = BelWeight::Exponential { rate: 20.0 };
        let dt = 1e-3;
        let z = w.normalizer(100, dt);
        // Left Riemann sum of ∫₀^0.1 e^{20 s} ds.
        let exact = ((20.0f64 * 0.1).exp() - 1.0) / 20.0;
        assert!((z - exact).abs() < 0.02 * exact);
        assert!((BelWeight::Uniform.normalizer(100, dt) - 0.1).abs() < 1e-12);
    }
}
