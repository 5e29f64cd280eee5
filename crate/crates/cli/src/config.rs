use std::path::Path;

use serde::Deserialize;
use srd_core::{Drift, ModelConfig};

use crate::error::CliError;

/// Run file: flat `key = value` TOML. Every key is optional and falls back
/// to the library default; unknown keys are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub gamma: Option<f64>,
    pub delta: Option<f64>,
    pub n_modes: Option<usize>,
    pub dt: Option<f64>,
    pub epsilon: Option<f64>,
    pub p_coeffs: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub chain_id: Option<u64>,
    pub blowup_cap: Option<f64>,
    pub chains: Option<usize>,
    pub steps: Option<u64>,
    pub burn_in: Option<u64>,
    pub thin: Option<u64>,
}

/// Sampling parameters after flags, file and defaults are merged.
#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
pub struct SamplePlan {
    pub config: ModelConfig,
    pub chains: usize,
    pub steps: u64,
    pub burn_in: u64,
    pub thin: u64,
}

pub const DEFAULT_CHAINS: usize = 4;
/// Samples kept per chain when `steps` is not given.
pub const DEFAULT_KEPT: u64 = 1000;

impl RunFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config {
            key: "config".into(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            key: "config".into(),
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn model(&self) -> Result<ModelConfig, CliError> {
        let d = ModelConfig::default();
        let drift = match &self.p_coeffs {
            Some(c) => Drift::from_coefficients(c.clone()).map_err(|e| CliError::Config {
                key: "p_coeffs".into(),
                message: e.to_string(),
            })?,
            None => d.drift.clone(),
        };
        let cfg = ModelConfig {
            gamma: self.gamma.unwrap_or(d.gamma),
            delta: self.delta.unwrap_or(d.delta),
            n_modes: self.n_modes.unwrap_or(d.n_modes),
            dt: self.dt.unwrap_or(d.dt),
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            drift,
            seed: self.seed.unwrap_or(d.seed),
            chain_id: self.chain_id.unwrap_or(d.chain_id),
            blowup_cap: self.blowup_cap.unwrap_or(d.blowup_cap),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Merge with command-line overrides, which win over the file.
    pub fn plan(
        &self,
        chains: Option<usize>,
        steps: Option<u64>,
        burn_in: Option<u64>,
        thin: Option<u64>,
    ) -> Result<SamplePlan, CliError> {
        let config = self.model()?;
        let burn_in = burn_in.or(self.burn_in).unwrap_or_else(|| config.default_burn_in());
        let thin = thin.or(self.thin).unwrap_or_else(|| config.default_thinning());
        let steps = steps.or(self.steps).unwrap_or(burn_in + DEFAULT_KEPT * thin);
        Ok(SamplePlan {
            config,
            chains: chains.or(self.chains).unwrap_or(DEFAULT_CHAINS),
            steps,
            burn_in,
            thin,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let plan = RunFile::parse("").unwrap().plan(None, None, None, None).unwrap();
        assert_eq!(plan.config, ModelConfig::default());
        assert_eq!(plan.chains, DEFAULT_CHAINS);
        assert_eq!(plan.steps, plan.burn_in + DEFAULT_KEPT * plan.thin);
    }

    #[test]
    fn flags_override_file() {
        let f = RunFile::parse("chains = 2\nthin = 7\np_coeffs = [0, 0, 0, -2]\n").unwrap();
        let plan = f.plan(Some(3), Some(500), Some(100), None).unwrap();
        assert_eq!((plan.chains, plan.steps, plan.burn_in, plan.thin), (3, 500, 100, 7));
        assert_eq!(plan.config.drift.coefficients(), vec![0.0, 0.0, 0.0, -2.0]);
    }

    #[test]
    fn unknown_and_mistyped_keys_are_named() {
        let e = RunFile::parse("gama = 0.5\n").unwrap_err().to_string();
        assert!(e.contains("gama"), "{e}");
        let e = RunFile::parse("n_modes = \"many\"\n").unwrap_err().to_string();
        assert!(e.contains("n_modes"), "{e}");
    }

    #[test]
    fn exponent_constraint_is_reported() {
        let e = RunFile::parse("gamma = 0.5\ndelta = 0.6\n").unwrap().model().unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("delta < 1 - gamma"), "{e}");
    }

    #[test]
    fn even_polynomial_is_rejected() {
        let e = RunFile::parse("p_coeffs = [0, 0, -1]\n").unwrap().model().unwrap_err();
        assert!(e.to_string().contains("p_coeffs"), "{e}");
    }
}
