//! Gradient weights and integration by parts under the invariant measure.
//!
//! * Monte-Carlo gradients `⟨D P_tφ(x), h⟩` by the Bismut–Elworthy–Li weight,
//!   with a central finite difference under common random numbers as the
//!   independent route.
//! * The integration-by-parts-in-time identity
//!   `P_t⟨Dφ,h⟩ = ⟨DP_tφ,h⟩ - ∫₀ᵗ P_{t-s}(⟨Ah + p_ε'h, DP_sφ⟩) ds`.
//! * The ensemble ratio `|∫⟨Dφ,h⟩dν| / (‖φ‖_{L^p(ν)} |h|_{1+δ+γ})`.
//! * Fomin densities `v_z` with `∫⟨(-A)^{-β}Dφ, z⟩dν = ∫φ v_z dν`, and the
//!   adjoint `M*(F) = -div[(-A)^{-β}F] + Σ f_h v_h`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::cylinder::{CylinderField, CylinderFunction};
use crate::dynamics::{steps_for, BelWeight, Integrator, PathSpec};
use crate::error::{Error, Result};
use crate::invariant::SampleEnsemble;
use crate::noise::{stream_id, tags};
use crate::oracles::{gaussian_identity_trig, gaussian_vh_coefficient, IdentityTerms};
use crate::spectral::{alpha, sobolev_norm_sq};
use crate::stats::{mean, variance, FunctionalEstimate};

/// Condition number above which a Gram system is rejected.
pub const DEFAULT_CONDITION_LIMIT: f64 = 1e10;

/// Which gradients to estimate along one batch of paths from `x0`.
#[derive(Debug, Clone)]
pub struct GradientPlan {
    pub directions: Vec<Vec<f64>>,
    /// Step counts at which the gradient is read, strictly increasing. Every
    /// observation reuses the same paths.
    pub observe_steps: Vec<u64>,
    pub functions: Vec<CylinderFunction>,
    pub n_paths: u64,
    /// One time weight per direction.
    pub weights: Vec<BelWeight>,
    /// Replace `φ` by `φ - mean(φ)`; the weight has mean zero, so this only
    /// removes variance.
    pub control_variate: bool,
    pub stream_offset: u64,
    pub level: u32,
}

impl GradientPlan {
    pub fn new(directions: Vec<Vec<f64>>, observe_steps: Vec<u64>, functions: Vec<CylinderFunction>, n_paths: u64) -> Self {
        let weights = vec![BelWeight::Uniform; directions.len()];
        Self {
            directions,
            observe_steps,
            functions,
            n_paths,
            weights,
            control_variate: false,
            stream_offset: 0,
            level: 0,
        }
    }

    pub fn with_weights(mut self, weights: Vec<BelWeight>) -> Self {
        self.weights = weights;
        self
    }

    pub fn with_control_variate(mut self, on: bool) -> Self {
        self.control_variate = on;
        self
    }

    pub fn with_stream_offset(mut self, offset: u64) -> Self {
        self.stream_offset = offset;
        self
    }

    fn validate(&self, n_modes: usize) -> Result<u64> {
        if self.n_paths < 2 {
            return Err(Error::Domain("need at least two paths".into()));
        }
        if self.directions.is_empty() || self.functions.is_empty() {
            return Err(Error::Empty("gradient plan without directions or functions"));
        }
        if self.weights.len() != self.directions.len() {
            return Err(Error::Shape {
                expected: self.directions.len(),
                found: self.weights.len(),
            });
        }
        for d in &self.directions {
            if d.len() != n_modes {
                return Err(Error::Shape {
                    expected: n_modes,
                    found: d.len(),
                });
            }
        }
        let ok = !self.observe_steps.is_empty()
            && self.observe_steps[0] >= 1
            && self.observe_steps.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::Domain("observation steps must be positive and strictly increasing".into()));
        }
        Ok(*self.observe_steps.last().unwrap())
    }
}

/// Estimates indexed by `[observation][direction][function]`.
#[derive(Debug, Clone, Serialize)]
pub struct GradientTable {
    pub observe_steps: Vec<u64>,
    pub estimates: Vec<Vec<Vec<FunctionalEstimate>>>,
}

impl GradientTable {
    pub fn get(&self, obs: usize, direction: usize, function: usize) -> FunctionalEstimate {
        self.estimates[obs][direction][function]
    }
}

/// Bismut–Elworthy–Li gradients `E[φ(X_t) W]` for every entry of the plan.
/// Paths are independent and indexed, so the result does not depend on the
/// worker count.
pub fn bel_gradients(integ: &Integrator, x0: &[f64], plan: &GradientPlan) -> Result<GradientTable> {
    let steps = plan.validate(integ.n_modes())?;
    let dt = integ.dt();
    let tilts: Vec<f64> = plan.weights.iter().map(|w| w.rate()).collect();
    let normalizers: Vec<Vec<f64>> = plan
        .observe_steps
        .iter()
        .map(|&m| plan.weights.iter().map(|w| w.normalizer(m, dt)).collect())
        .collect();
    let (nf, nd, no) = (plan.functions.len(), plan.directions.len(), plan.observe_steps.len());
    let stride = nf + nd;

    let records = (0..plan.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rec = vec![0.0; no * stride];
            let mut spec = PathSpec::new(x0, steps, stream_id(tags::BEL, plan.stream_offset + i))
                .with_directions(&plan.directions);
            spec.tilts = &tilts;
            spec.level = plan.level;
            let mut next = 0;
            integ.simulate_path(&spec, |step, state| {
                if next < no && plan.observe_steps[next] == step {
                    let row = &mut rec[next * stride..(next + 1) * stride];
                    for (slot, f) in row.iter_mut().zip(&plan.functions) {
                        *slot = f.value(&state.x);
                    }
                    for (d, tan) in state.tangents.iter().enumerate() {
                        let raw = match plan.weights[d] {
                            BelWeight::Uniform => tan.bel_integral,
                            BelWeight::Exponential { .. } => tan.bel_tilted,
                        };
                        row[nf + d] = raw / normalizers[next][d];
                    }
                    next += 1;
                }
            })?;
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;

    let column = |idx: usize| -> Vec<f64> { records.iter().map(|r| r[idx]).collect() };
    let estimates = (0..no)
        .map(|o| {
            (0..nd)
                .map(|d| {
                    let w = column(o * stride + nf + d);
                    (0..nf)
                        .map(|j| {
                            let phi = column(o * stride + j);
                            let c = if plan.control_variate { mean(&phi) } else { 0.0 };
                            let vals: Vec<f64> = phi.iter().zip(&w).map(|(p, w)| (p - c) * w).collect();
                            FunctionalEstimate::iid(&vals)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(GradientTable {
        observe_steps: plan.observe_steps.clone(),
        estimates,
    })
}

/// Central difference `(P_tφ(x+κh) - P_tφ(x-κh)) / 2κ` with both paths driven
/// by the same noise. Weights and control variates in the plan are ignored.
pub fn fd_gradients(integ: &Integrator, x0: &[f64], plan: &GradientPlan, kappa: f64) -> Result<GradientTable> {
    let steps = plan.validate(integ.n_modes())?;
    if !(kappa > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {kappa}")));
    }
    let (nf, nd, no) = (plan.functions.len(), plan.directions.len(), plan.observe_steps.len());
    let records = (0..plan.n_paths)
        .into_par_iter()
        .map(|i| {
            let stream = stream_id(tags::FD, plan.stream_offset + i);
            let mut rec = vec![0.0; no * nd * nf];
            for (d, h) in plan.directions.iter().enumerate() {
                for sign in [1.0, -1.0] {
                    let start: Vec<f64> = x0.iter().zip(h).map(|(x, h)| x + sign * kappa * h).collect();
                    let mut spec = PathSpec::new(&start, steps, stream);
                    spec.level = plan.level;
                    let mut next = 0;
                    integ.simulate_path(&spec, |step, state| {
                        if next < no && plan.observe_steps[next] == step {
                            for (j, f) in plan.functions.iter().enumerate() {
                                rec[(next * nd + d) * nf + j] += sign * f.value(&state.x) / (2.0 * kappa);
                            }
                            next += 1;
                        }
                    })?;
                }
            }
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    let estimates = (0..no)
        .map(|o| {
            (0..nd)
                .map(|d| {
                    (0..nf)
                        .map(|j| {
                            let vals: Vec<f64> = records.iter().map(|r| r[(o * nd + d) * nf + j]).collect();
                            FunctionalEstimate::iid(&vals)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(GradientTable {
        observe_steps: plan.observe_steps.clone(),
        estimates,
    })
}

/// `⟨D P_tφ(x), h⟩` by the uniform-weight estimator `φ(X_t) W / t`.
pub fn bel_gradient(
    cfg: &ModelConfig,
    x: &[f64],
    h: &[f64],
    t: f64,
    phi: &CylinderFunction,
    n_paths: u64,
) -> Result<FunctionalEstimate> {
    let integ = Integrator::new(cfg)?;
    let steps = steps_for(t, cfg.dt)?;
    let plan = GradientPlan::new(vec![h.to_vec()], vec![steps], vec![phi.clone()], n_paths);
    Ok(bel_gradients(&integ, x, &plan)?.get(0, 0, 0))
}

/// Settings for the Monte-Carlo evaluation of the identity.
#[derive(Debug, Clone)]
pub struct IdentityPlan {
    pub t: f64,
    /// Spacing of the `s`-grid in steps; must divide the horizon.
    pub node_stride: u64,
    pub n_paths: u64,
    pub weight: BelWeight,
    pub stream_offset: u64,
}

impl IdentityPlan {
    /// About twenty trapezoid intervals over `[0, t]`.
    pub fn new(t: f64, dt: f64, n_paths: u64) -> Result<Self> {
        let steps = steps_for(t, dt)?;
        let mut stride = (steps / 20).max(1);
        while steps % stride != 0 {
            stride -= 1;
        }
        Ok(Self {
            t,
            node_stride: stride,
            n_paths,
            weight: BelWeight::Uniform,
            stream_offset: 0,
        })
    }
}

/// Serializable copy of the closed-form terms.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ClosedFormTerms {
    pub lhs: f64,
    pub gradient: f64,
    pub integral: f64,
    pub residual: f64,
}

impl From<IdentityTerms> for ClosedFormTerms {
    fn from(t: IdentityTerms) -> Self {
        Self {
            lhs: t.lhs,
            gradient: t.gradient,
            integral: t.integral,
            residual: t.residual(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityReport {
    pub t: f64,
    /// `P_t⟨Dφ,h⟩(x)`, pathwise.
    pub lhs: FunctionalEstimate,
    /// `⟨DP_tφ(x),h⟩` through the gradient weight.
    pub gradient: FunctionalEstimate,
    /// `∫₀ᵗ P_{t-s}(⟨Ah + p_ε'h, DP_sφ⟩)(x) ds`, nested paths on a trapezoid grid.
    pub integral: FunctionalEstimate,
    /// `lhs - gradient + integral` per path, so its stderr includes the
    /// correlation between the three terms.
    pub residual: FunctionalEstimate,
    /// Present for `p ≡ 0` with a trig `φ`.
    pub closed_form: Option<ClosedFormTerms>,
}

/// Evaluate the three terms of the identity along shared outer paths.
///
/// Outer path `i` is assigned the grid node `s_j`, `j = i mod (J+1)`: the
/// state `y = X_{t-s_j}` is read from it, the direction
/// `k = Ah + P(p_ε'(y) h)` is formed there, and an inner path from `y` over
/// `s_j` carries the tangent `η^k` so that `⟨Dφ(Y_s), η^k_s⟩` is an unbiased
/// sample of `⟨DP_sφ(y), k⟩`. The trapezoid weight is scaled by `J+1` to undo
/// the stratification.
pub fn verify_time_identity(
    cfg: &ModelConfig,
    x: &[f64],
    phi: &CylinderFunction,
    h: &[f64],
    plan: &IdentityPlan,
) -> Result<IdentityReport> {
    let integ = Integrator::new(cfg)?;
    let n = cfg.n_modes;
    if x.len() != n || h.len() != n {
        return Err(Error::Shape {
            expected: n,
            found: if x.len() != n { x.len() } else { h.len() },
        });
    }
    if plan.n_paths < 2 {
        return Err(Error::Domain("need at least two paths".into()));
    }
    let steps = steps_for(plan.t, cfg.dt)?;
    let q = plan.node_stride;
    if q == 0 || steps % q != 0 {
        return Err(Error::Domain(format!("node stride {q} does not divide {steps} steps")));
    }
    let nodes = (steps / q) as usize + 1;
    let ds = q as f64 * cfg.dt;
    let node_weight = |j: usize| if j == 0 || j + 1 == nodes { 0.5 * ds } else { ds };
    let dirs = vec![h.to_vec()];
    let tilts = [plan.weight.rate()];
    let normalizer = plan.weight.normalizer(steps, cfg.dt);

    let per_path = (0..plan.n_paths)
        .into_par_iter()
        .map(|i| -> Result<[f64; 4]> {
            let j = (i % nodes as u64) as usize;
            let capture = steps - j as u64 * q;
            let mut y = if capture == 0 { Some(x.to_vec()) } else { None };
            let mut spec = PathSpec::new(x, steps, stream_id(tags::BEL, plan.stream_offset + i)).with_directions(&dirs);
            spec.tilts = &tilts;
            let (state, _) = integ.simulate_path(&spec, |step, s| {
                if step == capture {
                    y = Some(s.x.to_vec());
                }
            })?;
            let tan = &state.tangents[0];
            let w = match plan.weight {
                BelWeight::Uniform => tan.bel_integral,
                BelWeight::Exponential { .. } => tan.bel_tilted,
            } / normalizer;
            let lhs = phi.directional(&state.x, h);
            let y = y.expect("capture step lies on the path");
            let mut k = integ.multiply_by_slope(&y, h)?;
            for (m, kv) in k.iter_mut().enumerate() {
                *kv -= alpha(m + 1) * h[m];
            }
            let inner = if j == 0 {
                phi.directional(&y, &k)
            } else {
                let kd = vec![k];
                let ispec = PathSpec::new(&y, j as u64 * q, stream_id(tags::NESTED, plan.stream_offset + i)).with_directions(&kd);
                let (istate, _) = integ.simulate_path(&ispec, |_, _| {})?;
                phi.directional(&istate.x, &istate.tangents[0].eta)
            };
            Ok([lhs, phi.value(&state.x), w, nodes as f64 * node_weight(j) * inner])
        })
        .collect::<Result<Vec<_>>>()?;

    let phis: Vec<f64> = per_path.iter().map(|r| r[1]).collect();
    let c = mean(&phis);
    let lhs: Vec<f64> = per_path.iter().map(|r| r[0]).collect();
    let grad: Vec<f64> = per_path.iter().map(|r| (r[1] - c) * r[2]).collect();
    let integral: Vec<f64> = per_path.iter().map(|r| r[3]).collect();
    let residual: Vec<f64> = (0..per_path.len()).map(|i| lhs[i] - grad[i] + integral[i]).collect();
    let closed_form = match phi {
        CylinderFunction::Trig { lambda, theta } if cfg.drift.is_zero() => {
            Some(gaussian_identity_trig(cfg.gamma, x, lambda, *theta, h, plan.t).into())
        }
        _ => None,
    };
    Ok(IdentityReport {
        t: plan.t,
        lhs: FunctionalEstimate::iid(&lhs),
        gradient: FunctionalEstimate::iid(&grad),
        integral: FunctionalEstimate::iid(&integral),
        residual: FunctionalEstimate::iid(&residual),
        closed_form,
    })
}

/// `∫⟨Dφ(x), h⟩ ν(dx)` by ensemble averaging.
pub fn ibp_lhs(ens: &SampleEnsemble, phi: &CylinderFunction, h: &[f64]) -> Result<FunctionalEstimate> {
    ens.require_width(h.len())?;
    let values = ens.map(|x| phi.directional(x, h));
    Ok(ens.estimate_values(&values))
}

/// Per-mode standard deviations of an ensemble, used to put dictionary
/// frequencies on the scale of the data.
pub fn empirical_scales(ens: &SampleEnsemble) -> Vec<f64> {
    (1..=ens.n_modes())
        .map(|h| {
            let c = ens.coordinate(h);
            let m = mean(&c);
            (variance(&c) + m * m).sqrt()
        })
        .collect()
}

/// Twelve trig test functions with frequencies scaled by `scales`: sines and
/// shifted cosines of single low modes, two-mode combinations and two that
/// spread over every mode.
pub fn certification_dictionary(scales: &[f64]) -> Vec<CylinderFunction> {
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, FRAC_PI_4};
    let n = scales.len();
    let single = |j: usize, c: f64| {
        let mut l = vec![0.0; n];
        if j < n {
            l[j] = c / scales[j];
        }
        l
    };
    let mut dict = Vec::with_capacity(12);
    for j in 0..4 {
        dict.push(CylinderFunction::trig(single(j, 1.0), FRAC_PI_2));
    }
    for j in 0..4 {
        dict.push(CylinderFunction::trig(single(j, 0.5), FRAC_PI_3));
    }
    for (a, b) in [(0, 1), (2, 3)] {
        let mut l = single(a, 0.7);
        if b < n {
            l[b] = 0.7 / scales[b];
        }
        dict.push(CylinderFunction::trig(l, FRAC_PI_4));
    }
    let spread: Vec<f64> = scales.iter().map(|s| 1.0 / (s * (n as f64).sqrt())).collect();
    dict.push(CylinderFunction::trig(spread.clone(), FRAC_PI_2));
    dict.push(CylinderFunction::trig(spread.iter().map(|l| 0.5 * l).collect(), FRAC_PI_3));
    dict
}

/// `e_k` for each `k` in `modes`, labelled `e{k}`.
pub fn unit_directions(modes: impl IntoIterator<Item = usize>, n_modes: usize) -> Vec<(String, Vec<f64>)> {
    modes
        .into_iter()
        .filter(|k| *k >= 1 && *k <= n_modes)
        .map(|k| {
            let mut e = vec![0.0; n_modes];
            e[k - 1] = 1.0;
            (format!("e{k}"), e)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct CertificationRow {
    pub phi_id: String,
    pub h_id: String,
    pub lhs: f64,
    pub lhs_stderr: f64,
    #[serde(rename = "norm_phi_Lp")]
    pub norm_phi_lp: f64,
    pub norm_h_strong: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CertificationTable {
    pub rows: Vec<CertificationRow>,
    pub p_exponent: f64,
    pub delta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DirectionSup {
    pub h_id: String,
    pub sup_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CertificationSummary {
    pub sup_ratio: f64,
    pub argmax_phi: String,
    pub argmax_h: String,
    pub p_exponent: f64,
    pub n_samples: usize,
    pub per_direction: Vec<DirectionSup>,
    pub config: ModelConfig,
}

impl CertificationTable {
    /// The row attaining the largest ratio.
    pub fn sup(&self) -> &CertificationRow {
        self.rows
            .iter()
            .max_by(|a, b| a.ratio.total_cmp(&b.ratio))
            .expect("certification table is never empty")
    }

    /// Largest ratio for each direction, in table order.
    pub fn sup_by_direction(&self) -> Vec<DirectionSup> {
        let mut out: Vec<DirectionSup> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|d| d.h_id == r.h_id) {
                Some(d) => d.sup_ratio = d.sup_ratio.max(r.ratio),
                None => out.push(DirectionSup {
                    h_id: r.h_id.clone(),
                    sup_ratio: r.ratio,
                }),
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("phi_id,h_id,lhs,lhs_stderr,norm_phi_Lp,norm_h_strong,ratio\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}\n",
                r.phi_id, r.h_id, r.lhs, r.lhs_stderr, r.norm_phi_lp, r.norm_h_strong, r.ratio
            ));
        }
        s
    }

    pub fn summary(&self, ens: &SampleEnsemble) -> CertificationSummary {
        let top = self.sup();
        CertificationSummary {
            sup_ratio: top.ratio,
            argmax_phi: top.phi_id.clone(),
            argmax_h: top.h_id.clone(),
            p_exponent: self.p_exponent,
            n_samples: ens.len(),
            per_direction: self.sup_by_direction(),
            config: ens.config().clone(),
        }
    }
}

/// Ratios `|∫⟨Dφ,h⟩dν| / (‖φ‖_{L^p(ν)} |h|_{1+δ+γ})` for every pair of the
/// dictionary and the direction family.
pub fn certify_ibp_constant(
    ens: &SampleEnsemble,
    dict: &[CylinderFunction],
    h_family: &[(String, Vec<f64>)],
    p_exponent: f64,
    delta: f64,
) -> Result<CertificationTable> {
    if dict.is_empty() || h_family.is_empty() {
        return Err(Error::Empty("certification needs test functions and directions"));
    }
    if !(p_exponent >= 1.0) {
        return Err(Error::Domain(format!("L^p exponent must be at least 1, got {p_exponent}")));
    }
    let gamma = ens.config().gamma;
    let mut rows = Vec::with_capacity(dict.len() * h_family.len());
    for (i, phi) in dict.iter().enumerate() {
        let norm = mean(&ens.map(|x| phi.value(x).abs().powf(p_exponent))).powf(1.0 / p_exponent);
        for (h_id, h) in h_family {
            let lhs = ibp_lhs(ens, phi, h)?;
            let strong = sobolev_norm_sq(1.0 + delta + gamma, h).sqrt();
            rows.push(CertificationRow {
                phi_id: format!("phi{i}"),
                h_id: h_id.clone(),
                lhs: lhs.mean,
                lhs_stderr: lhs.stderr,
                norm_phi_lp: norm,
                norm_h_strong: strong,
                ratio: lhs.mean.abs() / (norm * strong),
            });
        }
    }
    Ok(CertificationTable {
        rows,
        p_exponent,
        delta,
        gamma,
    })
}

/// Options for the Fomin density fit.
#[derive(Debug, Clone, Copy)]
pub struct VzOptions {
    pub condition_limit: f64,
    /// Contiguous blocks used for the coefficient standard errors.
    pub batches: usize,
}

impl Default for VzOptions {
    fn default() -> Self {
        Self {
            condition_limit: DEFAULT_CONDITION_LIMIT,
            batches: 10,
        }
    }
}

/// `v_z ≈ Σ c_k ψ_k` fitted from the moment equations
/// `Σ_k c_k E[ψ_j ψ_k] = E[⟨(-A)^{-β} Dψ_j, z⟩]`.
#[derive(Debug, Clone, Serialize)]
pub struct VzEstimate {
    pub z: Vec<f64>,
    pub basis: Vec<CylinderFunction>,
    pub coefficients: Vec<f64>,
    pub coefficient_stderr: Vec<f64>,
    /// `‖G c - b‖ / ‖b‖` of the solved system (0 when `b = 0`).
    pub residual_norm: f64,
    /// `‖v_z‖_{L²(ν)}` of the fitted expansion.
    pub l2_norm: f64,
    pub condition_number: f64,
    /// `‖v_z‖_{L²(ν)} / |z|`, to compare with the certified constant.
    pub bound_ratio: Option<f64>,
}

impl VzEstimate {
    pub fn value(&self, x: &[f64]) -> f64 {
        self.basis.iter().zip(&self.coefficients).map(|(f, c)| c * f.value(x)).sum()
    }

    /// Coefficient of the basis function `x_mode`, if present.
    pub fn linear_coefficient(&self, mode: usize) -> Option<(f64, f64)> {
        self.basis
            .iter()
            .position(|f| matches!(f, CylinderFunction::PolyCoordinate { mode: m, power: 1 } if *m == mode))
            .map(|k| (self.coefficients[k], self.coefficient_stderr[k]))
    }
}

/// Linear coordinates `x_1..x_{n_linear}` together with `sin` and `cos` of
/// `x_j / scale_j` for the first `n_trig` modes.
pub fn vz_dictionary(scales: &[f64], n_linear: usize, n_trig: usize) -> Vec<CylinderFunction> {
    let n = scales.len();
    let mut dict: Vec<CylinderFunction> = (1..=n_linear.min(n)).map(CylinderFunction::coordinate).collect();
    for j in 0..n_trig.min(n) {
        let mut l = vec![0.0; j + 1];
        l[j] = 1.0 / scales[j];
        dict.push(CylinderFunction::sine(l.clone()));
        dict.push(CylinderFunction::trig(l, 0.0));
    }
    dict
}

fn solve_gram(gram: &DMatrix<f64>, rhs: &DVector<f64>, limit: f64) -> Result<(DVector<f64>, f64)> {
    let svd = gram.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond <= limit) {
        return Err(Error::IllConditioned { condition: cond, limit });
    }
    let sol = svd
        .solve(rhs, 0.0)
        .map_err(|e| Error::Numerical {
            what: "gram solve",
            detail: e.to_string(),
        })?;
    Ok((sol, cond))
}

/// Condition number of the RMS-normalized Gram matrix `E[ψ_j ψ_k]` of a
/// dictionary under `ens`; an error when it exceeds `limit` or an element
/// vanishes on every sample.
pub fn dictionary_condition(ens: &SampleEnsemble, dictionary: &[CylinderFunction], limit: f64) -> Result<f64> {
    let k = dictionary.len();
    if k == 0 {
        return Err(Error::Empty("empty dictionary"));
    }
    let mut g = DMatrix::<f64>::zeros(k, k);
    let mut psi = vec![0.0; k];
    for x in ens.samples() {
        for (p, f) in psi.iter_mut().zip(dictionary) {
            *p = f.value(x);
        }
        for a in 0..k {
            for c in 0..=a {
                g[(a, c)] += psi[a] * psi[c];
            }
        }
    }
    for a in 0..k {
        for c in 0..a {
            g[(c, a)] = g[(a, c)];
        }
    }
    let scale: Vec<f64> = (0..k).map(|a| g[(a, a)].sqrt()).collect();
    if scale.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::IllConditioned { condition: f64::INFINITY, limit });
    }
    let gn = DMatrix::from_fn(k, k, |a, c| g[(a, c)] / (scale[a] * scale[c]));
    let sv = gn.singular_values();
    let cond = if sv.min() > 0.0 { sv.max() / sv.min() } else { f64::INFINITY };
    if !(cond <= limit) {
        return Err(Error::IllConditioned { condition: cond, limit });
    }
    Ok(cond)
}

/// Fit `v_z` over `dictionary` by the moment equations under `ens`.
pub fn estimate_vz(ens: &SampleEnsemble, z: &[f64], dictionary: &[CylinderFunction], opts: VzOptions) -> Result<VzEstimate> {
    ens.require_width(z.len())?;
    let k = dictionary.len();
    if k == 0 {
        return Err(Error::Empty("empty dictionary"));
    }
    if ens.len() < 2 * opts.batches.max(1) {
        return Err(Error::Empty("too few samples for the density fit"));
    }
    let beta = ens.config().beta();
    // (-A)^{-β} z, the direction each gradient is paired with.
    let bz: Vec<f64> = z.iter().enumerate().map(|(i, z)| alpha(i + 1).powf(-beta) * z).collect();
    let n = ens.len();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = ens.sample(i);
            let psi: Vec<f64> = dictionary.iter().map(|f| f.value(x)).collect();
            let rhs: Vec<f64> = dictionary.iter().map(|f| f.directional(x, &bz)).collect();
            (psi, rhs)
        })
        .collect();

    let batches = opts.batches.max(1);
    let accumulate = |range: std::ops::Range<usize>| {
        let mut g = DMatrix::<f64>::zeros(k, k);
        let mut b = DVector::<f64>::zeros(k);
        for (psi, rhs) in &rows[range.clone()] {
            for a in 0..k {
                b[a] += rhs[a];
                for c in 0..=a {
                    g[(a, c)] += psi[a] * psi[c];
                }
            }
        }
        let m = range.len() as f64;
        for a in 0..k {
            for c in 0..a {
                g[(c, a)] = g[(a, c)];
            }
        }
        (g / m, b / m)
    };
    let (gram, rhs) = accumulate(0..n);
    let scale: Vec<f64> = (0..k).map(|a| gram[(a, a)].sqrt()).collect();
    if let Some(a) = scale.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::Domain(format!("dictionary element {} vanishes on the ensemble", dictionary[a].label())));
    }
    let normalize = |g: &DMatrix<f64>, b: &DVector<f64>| {
        let gn = DMatrix::from_fn(k, k, |a, c| g[(a, c)] / (scale[a] * scale[c]));
        let bn = DVector::from_fn(k, |a, _| b[a] / scale[a]);
        (gn, bn)
    };
    let (gn, bn) = normalize(&gram, &rhs);
    let (sol, cond) = solve_gram(&gn, &bn, opts.condition_limit)?;
    let coefficients: Vec<f64> = (0..k).map(|a| sol[a] / scale[a]).collect();

    let size = n / batches;
    let mut batch_coeffs: Vec<Vec<f64>> = Vec::with_capacity(batches);
    for b in 0..batches {
        let end = if b + 1 == batches { n } else { (b + 1) * size };
        let (g, r) = accumulate(b * size..end);
        let (g, r) = normalize(&g, &r);
        // A batch that is singular on its own contributes nothing to the spread.
        if let Ok((s, _)) = solve_gram(&g, &r, f64::INFINITY) {
            batch_coeffs.push((0..k).map(|a| s[a] / scale[a]).collect());
        }
    }
    let coefficient_stderr: Vec<f64> = (0..k)
        .map(|a| {
            let col: Vec<f64> = batch_coeffs.iter().map(|c| c[a]).collect();
            (variance(&col) / col.len().max(1) as f64).sqrt()
        })
        .collect();

    let c = DVector::from_vec(coefficients.clone());
    let resid = &gram * &c - &rhs;
    let residual_norm = if rhs.norm() > 0.0 { resid.norm() / rhs.norm() } else { resid.norm() };
    let l2_norm = c.dot(&(&gram * &c)).max(0.0).sqrt();
    let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(VzEstimate {
        z: z.to_vec(),
        basis: dictionary.to_vec(),
        coefficients,
        coefficient_stderr,
        residual_norm,
        l2_norm,
        condition_number: cond,
        bound_ratio: (zn > 0.0).then(|| l2_norm / zn),
    })
}

/// A Fomin density `v_h`, either fitted or known in closed form.
#[derive(Debug, Clone)]
pub enum FominDensity {
    /// `v_h(x) = ⟨c, x⟩`.
    Linear(Vec<f64>),
    Fitted(VzEstimate),
}

impl FominDensity {
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            FominDensity::Linear(c) => c.iter().zip(x).map(|(c, x)| c * x).sum(),
            FominDensity::Fitted(v) => v.value(x),
        }
    }
}

/// The densities `v_h = v_{e_h}` available to `M*`.
#[derive(Debug, Clone)]
pub struct FominDensities {
    beta: f64,
    by_mode: BTreeMap<usize, FominDensity>,
}

impl FominDensities {
    pub fn new(beta: f64) -> Self {
        Self {
            beta,
            by_mode: BTreeMap::new(),
        }
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn insert(&mut self, h: usize, v: FominDensity) {
        self.by_mode.insert(h, v);
    }

    pub fn modes(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_mode.keys().copied()
    }

    pub fn get(&self, h: usize) -> Result<&FominDensity> {
        self.by_mode.get(&h).ok_or(Error::MissingDensity(h))
    }

    pub fn require(&self, modes: &[usize]) -> Result<()> {
        modes.iter().try_for_each(|h| self.get(*h).map(|_| ()))
    }

    pub fn value(&self, h: usize, x: &[f64]) -> Result<f64> {
        Ok(self.get(h)?.value(x))
    }

    /// Closed-form Gaussian densities `v_h = 2 α_h^{(1+γ-δ)/2} x_h`.
    pub fn gaussian(cfg: &ModelConfig, modes: impl IntoIterator<Item = usize>) -> Self {
        let mut out = Self::new(cfg.beta());
        for h in modes {
            let mut c = vec![0.0; cfg.n_modes.max(h)];
            c[h - 1] = gaussian_vh_coefficient(h, cfg.gamma, cfg.delta);
            out.insert(h, FominDensity::Linear(c));
        }
        out
    }

    /// Fit `v_h` for each mode from the ensemble.
    pub fn estimate(
        ens: &SampleEnsemble,
        modes: impl IntoIterator<Item = usize>,
        dictionary: &[CylinderFunction],
        opts: VzOptions,
    ) -> Result<Self> {
        let mut out = Self::new(ens.config().beta());
        for h in modes {
            let z = unit_directions([h], ens.n_modes())
                .pop()
                .ok_or_else(|| Error::Domain(format!("mode {h} outside the ensemble")))?
                .1;
            out.insert(h, FominDensity::Fitted(estimate_vz(ens, &z, dictionary, opts)?));
        }
        Ok(out)
    }
}

/// A vector field in the domain of `M*` with an explicit adjoint.
pub trait AdjointField: Sync {
    /// Coefficients of `F(x)` on the width of `x`.
    fn value(&self, x: &[f64]) -> Vec<f64>;
    /// Modes whose densities `v_h` enter `M*(F)`.
    fn required_modes(&self, n_modes: usize) -> Vec<usize>;
    fn mstar(&self, x: &[f64], v: &FominDensities) -> Result<f64>;
}

impl AdjointField for CylinderField {
    fn value(&self, x: &[f64]) -> Vec<f64> {
        CylinderField::value(self, x, x.len())
    }

    fn required_modes(&self, _n_modes: usize) -> Vec<usize> {
        self.modes()
    }

    /// `-Σ_h α_h^{-β} ∂_h f_h(x) + Σ_h f_h(x) v_h(x)`.
    fn mstar(&self, x: &[f64], v: &FominDensities) -> Result<f64> {
        let mut acc = 0.0;
        for (h, f) in self.components() {
            acc -= alpha(*h).powf(-v.beta()) * f.partial(x, *h);
            acc += f.value(x) * v.value(*h, x)?;
        }
        Ok(acc)
    }
}

/// Pointwise evaluator of `M*(F)`.
pub struct MStar<'a, F: AdjointField + ?Sized> {
    field: &'a F,
    densities: &'a FominDensities,
}

impl<F: AdjointField + ?Sized> MStar<'_, F> {
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        self.field.mstar(x, self.densities)
    }
}

/// `M*(F)` for a cylinder field; fails up front when a needed `v_h` is missing.
pub fn mstar_apply<'a>(field: &'a CylinderField, v: &'a FominDensities) -> Result<MStar<'a, CylinderField>> {
    v.require(&field.modes())?;
    Ok(MStar { field, densities: v })
}

#[derive(Debug, Clone, Serialize)]
pub struct DualityReport {
    /// `E⟨(-A)^{-β}Dφ, F⟩`.
    pub pairing: FunctionalEstimate,
    /// `E[φ M*(F)]`.
    pub adjoint: FunctionalEstimate,
    /// Per-sample difference of the two.
    pub residual: FunctionalEstimate,
}

/// Check `E⟨(-A)^{-β}Dφ, F⟩ = E[φ M*(F)]` on an ensemble.
pub fn duality_check<F: AdjointField + ?Sized>(
    ens: &SampleEnsemble,
    phi: &CylinderFunction,
    field: &F,
    v: &FominDensities,
) -> Result<DualityReport> {
    v.require(&field.required_modes(ens.n_modes()))?;
    let weights: Vec<f64> = (1..=ens.n_modes()).map(|h| alpha(h).powf(-v.beta())).collect();
    let pairs = (0..ens.len())
        .into_par_iter()
        .map(|i| {
            let x = ens.sample(i);
            let f = field.value(x);
            let g = phi.gradient(x);
            let pairing: f64 = g.iter().zip(&f).zip(&weights).map(|((g, f), w)| g * f * w).sum();
            Ok((pairing, phi.value(x) * field.mstar(x, v)?))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let d: Vec<f64> = pairs.iter().map(|p| p.0 - p.1).collect();
    Ok(DualityReport {
        pairing: ens.estimate_values(&a),
        adjoint: ens.estimate_values(&b),
        residual: ens.estimate_values(&d),
    })
}

/// Per-path values of the three pathwise tangent ratios for one direction.
#[derive(Debug, Clone, Serialize)]
pub struct TangentRatios {
    pub direction: usize,
    /// `∫|η|²_{1-α} / (Δ|h|²_{-α})`.
    pub energy: Vec<f64>,
    /// `sup|η|_{-α} / (Δ|h|_{-α})`.
    pub negative_norm: Vec<f64>,
    /// `∫|η|²_{1-α-δ} / (Δ|h|²_{-α})`.
    pub interpolated: Vec<f64>,
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

impl TangentRatios {
    /// Empirical constants: the largest ratio over paths, in the order
    /// energy, negative norm, interpolated.
    pub fn constants(&self) -> [f64; 3] {
        [max_of(&self.energy), max_of(&self.negative_norm), max_of(&self.interpolated)]
    }
}

/// Run `n_paths` paths from `x0` carrying one tangent per direction and
/// collect the pathwise ratios. `level` refines the noise grid, so runs at
/// `(dt, level + 1)` and `(dt/2, level)` share their Brownian paths.
pub fn tangent_ratio_study(
    integ: &Integrator,
    x0: &[f64],
    steps: u64,
    directions: &[Vec<f64>],
    n_paths: u64,
    level: u32,
    stream_offset: u64,
) -> Result<Vec<TangentRatios>> {
    let per_path = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut spec = PathSpec::new(x0, steps, stream_id(tags::TANGENT, stream_offset + i)).with_directions(directions);
            spec.level = level;
            spec.track_tangent_norms = true;
            let (_, diag) = integ.simulate_path(&spec, |_, _| {})?;
            Ok(diag
                .tangent_norms
                .iter()
                .map(|t| {
                    [
                        t.energy_ratio(diag.delta_t),
                        t.negative_norm_ratio(diag.delta_t),
                        t.interpolated_ratio(diag.delta_t),
                    ]
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..directions.len())
        .map(|d| TangentRatios {
            direction: d,
            energy: per_path.iter().map(|p| p[d][0]).collect(),
            negative_norm: per_path.iter().map(|p| p[d][1]).collect(),
            interpolated: per_path.iter().map(|p| p[d][2]).collect(),
        })
        .collect())
}
