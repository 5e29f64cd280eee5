use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reaction::{Drift, OddPolynomial, YosidaParam};

/// Default `|x|_∞` beyond which a path is declared to have blown up.
pub const DEFAULT_BLOWUP_CAP: f64 = 1e6;

/// Parameters of the regularized equation
/// `dX = (AX + p_ε(X)) dt + (-A)^{-γ/2} dW` on `n_modes` Galerkin modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub gamma: f64,
    pub delta: f64,
    pub n_modes: usize,
    pub dt: f64,
    pub epsilon: f64,
    #[serde(rename = "p_coeffs")]
    pub drift: Drift,
    pub seed: u64,
    /// Base stream index; chain `c` of a run uses stream `chain_id + c`.
    pub chain_id: u64,
    #[serde(default = "default_cap")]
    pub blowup_cap: f64,
}

fn default_cap() -> f64 {
    DEFAULT_BLOWUP_CAP
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            delta: 0.25,
            n_modes: 32,
            dt: 1e-3,
            epsilon: 1e-3,
            drift: Drift::Polynomial(OddPolynomial::cubic()),
            seed: 20_150_301,
            chain_id: 0,
            blowup_cap: DEFAULT_BLOWUP_CAP,
        }
    }
}

impl ModelConfig {
    /// The default configuration with `p ≡ 0`.
    pub fn gaussian() -> Self {
        Self {
            drift: Drift::Zero,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                key: key.into(),
                message,
            })
        };
        // n = 1: n/2 - 1 < γ < 1.
        if !(self.gamma.is_finite() && self.gamma > -0.5 && self.gamma < 1.0) {
            return bad("gamma", format!("need -1/2 < gamma < 1, got {}", self.gamma));
        }
        if !(self.delta.is_finite() && self.delta > 0.0 && self.delta < 1.0 - self.gamma) {
            return bad(
                "delta",
                format!(
                    "need 0 < delta < 1 - gamma, got (gamma, delta) = ({}, {})",
                    self.gamma, self.delta
                ),
            );
        }
        if self.n_modes == 0 {
            return bad("n_modes", "must be positive".into());
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad("dt", format!("must be positive, got {}", self.dt));
        }
        YosidaParam::new(self.epsilon)?;
        if !(self.blowup_cap.is_finite() && self.blowup_cap > 0.0) {
            return bad("blowup_cap", format!("must be positive, got {}", self.blowup_cap));
        }
        Ok(())
    }

    /// `α = 1 - γ - δ ∈ (0, 1)`.
    pub fn alpha(&self) -> f64 {
        1.0 - self.gamma - self.delta
    }

    /// `β = (1 + γ + δ)/2 > 1/2`.
    pub fn beta(&self) -> f64 {
        0.5 * (1.0 + self.gamma + self.delta)
    }

    pub fn yosida(&self) -> YosidaParam {
        YosidaParam::new(self.epsilon).expect("validated epsilon")
    }

    /// Default burn-in: ten relaxation times of the slowest mode.
    pub fn default_burn_in(&self) -> u64 {
        (10.0 / (crate::spectral::alpha(1) * self.dt)).ceil() as u64
    }

    /// Smallest stride whose slowest-mode linear autocorrelation is below 0.1.
    pub fn default_thinning(&self) -> u64 {
        ((10.0f64).ln() / (crate::spectral::alpha(1) * self.dt)).ceil().max(1.0) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_derive_exponents() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert!((c.alpha() - 0.25).abs() < 1e-15);
        assert!((c.beta() - 0.875).abs() < 1e-15);
        assert_eq!(c.default_burn_in(), 1014);
        assert_eq!(c.default_thinning(), 234);
    }

    #[test]
    fn gamma_delta_constraints() {
        let mut c = ModelConfig::default();
        c.delta = 0.5;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("delta") && err.contains("gamma"), "{err}");
        c.delta = 0.0;
        assert!(c.validate().is_err());
        c.delta = 0.1;
        c.gamma = -0.5;
        assert!(c.validate().is_err());
        c.gamma = 1.0;
        assert!(c.validate().is_err());
        c.gamma = -0.4;
        c.validate().unwrap();
    }

    #[test]
    fn json_round_trip_uses_coefficient_list() {
        let c = ModelConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"p_coeffs\":[0.0,0.0,0.0,-1.0]"), "{s}");
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        let g: ModelConfig = serde_json::from_str(&serde_json::to_string(&ModelConfig::gaussian()).unwrap()).unwrap();
        assert!(g.drift.is_zero());
    }
}
