use std::path::Path;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use srd_core::geometry::{median_level, surface_integral, LevelFunction, ShellConfig, SurfaceReport, DEFAULT_SHELL_FRACTIONS};
use srd_core::invariant::{decode_ensemble, encode_ensemble, sample_invariant};
use srd_core::malliavin::{
    certification_dictionary, certify_ibp_constant, dictionary_condition, empirical_scales, unit_directions,
    CertificationSummary,
};
use srd_core::oracles::{
    gaussian_certification_sup, halfspace_cdf, halfspace_density, one_mode_invariant_density, ou_variance,
};
use srd_core::stats::ks_distance;
use srd_core::{CylinderFunction, ModelConfig, SampleEnsemble};

use crate::config::SamplePlan;
use crate::error::CliError;
use crate::manifest::{Artifact, OutputDir};

pub const ENSEMBLE_NAME: &str = "ensemble.srd";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DictKind {
    /// Twelve trig functions scaled by the empirical spread of each mode.
    Trig,
    /// The same functions scaled by the Gaussian standard deviations.
    TrigGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum LevelKind {
    Ball,
    Halfspace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Gaussian,
    OneMode,
}

/// A fully resolved command, as recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Invocation {
    Sample(SamplePlan),
    CertifyIbp {
        ensemble: String,
        p: f64,
        /// Inclusive; `None` means `1..=min(16, n_modes)`.
        modes: Option<(usize, usize)>,
        dict: DictKind,
        condition_limit: f64,
    },
    Surface {
        ensemble: String,
        g: LevelKind,
        normal: Option<Vec<f64>>,
        r: Option<f64>,
        eps_schedule: Option<Vec<f64>>,
    },
    OracleCompare {
        ensemble: String,
        suite: Suite,
        gamma: Option<f64>,
    },
}

pub struct Executed {
    pub config: ModelConfig,
    pub inputs: Vec<Artifact>,
    pub failed_checks: usize,
    pub summary: String,
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Sample(_) => "sample",
            Invocation::CertifyIbp { .. } => "certify-ibp",
            Invocation::Surface { .. } => "surface",
            Invocation::OracleCompare { .. } => "oracle-compare",
        }
    }

    pub fn execute(&self, out: &mut OutputDir) -> Result<Executed, CliError> {
        match self {
            Invocation::Sample(plan) => sample(plan, out),
            Invocation::CertifyIbp {
                ensemble,
                p,
                modes,
                dict,
                condition_limit,
            } => certify(ensemble, *p, *modes, *dict, *condition_limit, out),
            Invocation::Surface {
                ensemble,
                g,
                normal,
                r,
                eps_schedule,
            } => surface(ensemble, *g, normal.as_deref(), *r, eps_schedule.clone(), out),
            Invocation::OracleCompare { ensemble, suite, gamma } => oracle_compare(ensemble, *suite, *gamma, out),
        }
    }
}

/// Parse `k1..k2` (inclusive) or a single `k`.
pub fn parse_modes(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::config("modes", format!("expected k1..k2 or k, got {s:?}"));
    let (a, b) = match s.split_once("..") {
        Some((a, b)) => (a, b.trim_start_matches('=')),
        None => (s, s),
    };
    let a = a.trim().parse().map_err(|_| bad())?;
    let b = b.trim().parse().map_err(|_| bad())?;
    Ok((a, b))
}

pub fn parse_list(key: &str, s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| CliError::config(key, format!("{t:?} is not a number")))
        })
        .collect()
}

fn load(path: &str) -> Result<(SampleEnsemble, Artifact), CliError> {
    let p = Path::new(path);
    let bytes = std::fs::read(p).map_err(|e| CliError::io(p.display(), e))?;
    let ens = decode_ensemble(&bytes)?;
    let abs = std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    Ok((ens, Artifact::of(abs.display().to_string(), &bytes)))
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("reports serialize");
    s.push(b'\n');
    s
}

fn sample(plan: &SamplePlan, out: &mut OutputDir) -> Result<Executed, CliError> {
    let ens = sample_invariant(&plan.config, plan.chains, plan.steps, plan.burn_in, plan.thin)?;
    let bytes = encode_ensemble(&ens)?;
    out.write(ENSEMBLE_NAME, &bytes)?;
    Ok(Executed {
        config: plan.config.clone(),
        inputs: Vec::new(),
        failed_checks: 0,
        summary: format!(
            "{} samples ({} chains × {}) of {} modes written to {}",
            ens.len(),
            ens.chains(),
            ens.per_chain(),
            ens.n_modes(),
            out.path().join(ENSEMBLE_NAME).display()
        ),
    })
}

#[derive(Serialize)]
struct GaussianOracle {
    sup_ratio: f64,
    argmax_k: usize,
    relative_difference: f64,
}

#[derive(Serialize)]
struct CertificationReport {
    #[serde(flatten)]
    summary: CertificationSummary,
    modes: (usize, usize),
    dictionary: DictKind,
    dictionary_condition: f64,
    /// Present for a Gaussian ensemble with `p = 2`.
    gaussian_oracle: Option<GaussianOracle>,
}

fn certify(
    path: &str,
    p: f64,
    modes: Option<(usize, usize)>,
    dict: DictKind,
    condition_limit: f64,
    out: &mut OutputDir,
) -> Result<Executed, CliError> {
    if !(p.is_finite() && p >= 1.0) {
        return Err(CliError::config("p", format!("need p >= 1, got {p}")));
    }
    let (ens, input) = load(path)?;
    let cfg = ens.config().clone();
    let (k1, k2) = modes.unwrap_or((1, cfg.n_modes.min(16)));
    if k1 == 0 || k1 > k2 || k2 > cfg.n_modes {
        return Err(CliError::config(
            "modes",
            format!("direction range {k1}..{k2} is empty or outside 1..{}", cfg.n_modes),
        ));
    }
    let scales: Vec<f64> = match dict {
        DictKind::Trig => empirical_scales(&ens),
        DictKind::TrigGaussian => (1..=cfg.n_modes).map(|h| ou_variance(cfg.gamma, h).sqrt()).collect(),
    };
    let dictionary = certification_dictionary(&scales);
    let condition = dictionary_condition(&ens, &dictionary, condition_limit)?;
    let family = unit_directions(k1..=k2, cfg.n_modes);
    let table = certify_ibp_constant(&ens, &dictionary, &family, p, cfg.delta)?;
    let summary = table.summary(&ens);
    let gaussian_oracle = (cfg.drift.is_zero() && p == 2.0).then(|| {
        let (sup, k) = gaussian_certification_sup(&dictionary, k1..=k2, cfg.gamma, cfg.delta);
        GaussianOracle {
            sup_ratio: sup,
            argmax_k: k,
            relative_difference: (summary.sup_ratio - sup).abs() / sup,
        }
    });
    let mut line = format!(
        "sup ratio {:.5} at ({}, {}) over {} pairs",
        summary.sup_ratio,
        summary.argmax_phi,
        summary.argmax_h,
        table.rows.len()
    );
    if let Some(o) = &gaussian_oracle {
        line.push_str(&format!("; Gaussian oracle {:.5} at e{}", o.sup_ratio, o.argmax_k));
    }
    out.write("certification.csv", table.to_csv().as_bytes())?;
    out.write(
        "certification.json",
        &json(&CertificationReport {
            summary,
            modes: (k1, k2),
            dictionary: dict,
            dictionary_condition: condition,
            gaussian_oracle,
        }),
    )?;
    Ok(Executed {
        config: cfg,
        inputs: vec![input],
        failed_checks: 0,
        summary: line,
    })
}

#[derive(Serialize)]
struct SurfaceOutput {
    #[serde(flatten)]
    report: SurfaceReport,
    phi: &'static str,
    r_source: &'static str,
    /// Exact value for a half-space under a Gaussian ensemble.
    gaussian_density: Option<f64>,
}

fn surface(
    path: &str,
    kind: LevelKind,
    normal: Option<&[f64]>,
    r: Option<f64>,
    eps: Option<Vec<f64>>,
    out: &mut OutputDir,
) -> Result<Executed, CliError> {
    let (ens, input) = load(path)?;
    let cfg = ens.config().clone();
    let n = cfg.n_modes;
    let g = match kind {
        LevelKind::Ball => {
            if normal.is_some() {
                return Err(CliError::config("normal", "only meaningful for a half-space"));
            }
            LevelFunction::Ball
        }
        LevelKind::Halfspace => match normal {
            None => LevelFunction::first_halfspace(n),
            Some(b) => {
                if b.len() > n || b.iter().all(|v| *v == 0.0) || b.iter().any(|v| !v.is_finite()) {
                    return Err(CliError::config(
                        "normal",
                        format!("need a finite nonzero vector of at most {n} entries"),
                    ));
                }
                let mut full = b.to_vec();
                full.resize(n, 0.0);
                LevelFunction::HalfSpace { b: full }
            }
        },
    };
    let (r, r_source) = match r {
        Some(r) => (r, "given"),
        None => (median_level(&ens, &g), "median"),
    };
    if !r.is_finite() || (kind == LevelKind::Ball && r <= 0.0) {
        return Err(CliError::config("r", format!("need a finite level (positive for a ball), got {r}")));
    }
    let shells = match eps {
        Some(e) => ShellConfig::new(e)?,
        None => ShellConfig::relative(&ens, &g, &DEFAULT_SHELL_FRACTIONS)?,
    };
    let report = surface_integral(&ens, &g, &CylinderFunction::constant_one(), r, &shells)?;
    let gaussian_density = match (&g, cfg.drift.is_zero()) {
        (LevelFunction::HalfSpace { b }, true) => Some(halfspace_density(b, r, cfg.gamma)),
        _ => None,
    };
    let mut line = format!(
        "{} at r = {r:.5}: {:.5} ± {:.5} (shells), {:.5} (kernel), agreement {}",
        g.name(),
        report.extrapolated,
        report.combined_error(),
        report.cdf_diff_value,
        report.agreement_flag
    );
    if let Some(d) = gaussian_density {
        line.push_str(&format!("; Gaussian density {d:.5}"));
    }
    out.write(
        "surface.json",
        &json(&SurfaceOutput {
            report,
            phi: "1",
            r_source,
            gaussian_density,
        }),
    )?;
    Ok(Executed {
        config: cfg,
        inputs: vec![input],
        failed_checks: 0,
        summary: line,
    })
}

#[derive(Debug, Serialize)]
struct Check {
    name: String,
    statistic: f64,
    threshold: f64,
    pass: bool,
}

#[derive(Serialize)]
struct Verdict<'a> {
    suite: Suite,
    gamma: f64,
    n_samples: usize,
    passed: bool,
    checks: &'a [Check],
}

fn oracle_compare(path: &str, suite: Suite, gamma: Option<f64>, out: &mut OutputDir) -> Result<Executed, CliError> {
    let (ens, input) = load(path)?;
    let cfg = ens.config().clone();
    let gamma = gamma.unwrap_or(cfg.gamma);
    if !(gamma > -0.5 && gamma < 1.0) {
        return Err(CliError::config("gamma", format!("need -1/2 < gamma < 1, got {gamma}")));
    }
    let n = ens.len();
    let mut checks = Vec::new();
    match suite {
        Suite::Gaussian => {
            for h in 1..=cfg.n_modes {
                let sq: Vec<f64> = ens.coordinate(h).iter().map(|x| x * x).collect();
                let z = ens.estimate_values(&sq).z_score(ou_variance(gamma, h));
                checks.push(Check {
                    name: format!("variance e{h} (stderr units)"),
                    statistic: z,
                    threshold: 3.0,
                    pass: z <= 3.0,
                });
            }
            // The 1% Kolmogorov critical value, but never looser than 0.01 at
            // large sample sizes.
            let limit = (1.63 / (n as f64).sqrt()).max(0.01);
            let ks = ks_distance(&ens.coordinate(1), |y| halfspace_cdf(&[1.0], y, gamma));
            checks.push(Check {
                name: "KS e1 vs Gaussian".into(),
                statistic: ks,
                threshold: limit,
                pass: ks < limit,
            });
        }
        Suite::OneMode => {
            if cfg.n_modes != 1 {
                return Err(CliError::config(
                    "suite",
                    format!("one-mode suite needs a 1-mode ensemble, got {} modes", cfg.n_modes),
                ));
            }
            let oracle = one_mode_invariant_density(&cfg.drift, cfg.yosida(), gamma)?;
            let xs = ens.coordinate(1);
            let ks = ks_distance(&xs, |y| oracle.cdf(y));
            checks.push(Check {
                name: "KS vs quadrature density".into(),
                statistic: ks,
                threshold: 0.02,
                pass: ks < 0.02,
            });
            let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
            let z = ens.estimate_values(&sq).z_score(oracle.second_moment());
            checks.push(Check {
                name: "second moment (stderr units)".into(),
                statistic: z,
                threshold: 3.0,
                pass: z <= 3.0,
            });
        }
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    let mut csv = String::from("check,statistic,threshold,pass\n");
    for c in &checks {
        csv.push_str(&format!("{},{:.6e},{:.6e},{}\n", c.name, c.statistic, c.threshold, c.pass));
    }
    out.write("verdict.csv", csv.as_bytes())?;
    out.write(
        "verdict.json",
        &json(&Verdict {
            suite,
            gamma,
            n_samples: n,
            passed: failed == 0,
            checks: &checks,
        }),
    )?;
    let mut summary = format!("{} of {} checks passed", checks.len() - failed, checks.len());
    for c in checks.iter().filter(|c| !c.pass) {
        summary.push_str(&format!("\nFAIL {}: {:.4} (threshold {:.4})", c.name, c.statistic, c.threshold));
    }
    Ok(Executed {
        config: cfg,
        inputs: vec![input],
        failed_checks: failed,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_ranges() {
        assert_eq!(parse_modes("1..16").unwrap(), (1, 16));
        assert_eq!(parse_modes("2..=5").unwrap(), (2, 5));
        assert_eq!(parse_modes("3").unwrap(), (3, 3));
        assert_eq!(parse_modes("a..b").unwrap_err().exit_code(), 2);
    }

    #[test]
    fn number_lists() {
        assert_eq!(parse_list("eps_schedule", "0.3, 0.2,0.1").unwrap(), vec![0.3, 0.2, 0.1]);
        let e = parse_list("eps_schedule", "0.3,x").unwrap_err();
        assert!(e.to_string().contains("eps_schedule"));
    }

    #[test]
    fn invocation_survives_the_manifest() {
        let inv = Invocation::Surface {
            ensemble: "/tmp/e.srd".into(),
            g: LevelKind::Halfspace,
            normal: Some(vec![1.0, 0.5]),
            r: None,
            eps_schedule: Some(vec![0.3, 0.2, 0.1]),
        };
        let text = serde_json::to_string(&inv).unwrap();
        assert!(text.contains("\"command\":\"surface\""));
        assert_eq!(serde_json::from_str::<Invocation>(&text).unwrap(), inv);
    }
}
