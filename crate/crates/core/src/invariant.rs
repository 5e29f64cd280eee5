//! Ergodic sampling of the invariant measure, ensemble estimators and the
//! ensemble file format.
//!
//! File layout: one JSON header line followed by one CSV row per sample,
//! chain-major. Values are written with 17 significant digits so that a
//! save/load cycle is exact. The header carries a SHA-256 digest of all bytes
//! after the header line.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::cylinder::CylinderFunction;
use crate::dynamics::Integrator;
use crate::error::{Error, Result};
use crate::noise::{stream_id, tags};
pub use crate::stats::FunctionalEstimate;

pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_ALGORITHM: &str = "sha256";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleMeta {
    pub config: ModelConfig,
    pub burn_in: u64,
    pub thinning: u64,
    pub chains: usize,
    pub total_steps: u64,
    /// Seconds since the Unix epoch; taken from `SOURCE_DATE_EPOCH` when set
    /// and zero otherwise, so that reruns produce identical files.
    pub created: u64,
    pub version: u32,
}

/// Draws from (an approximation of) the invariant measure, stored flat and
/// chain-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEnsemble {
    meta: EnsembleMeta,
    n_modes: usize,
    data: Vec<f64>,
}

impl SampleEnsemble {
    pub fn from_parts(meta: EnsembleMeta, n_modes: usize, data: Vec<f64>) -> Result<Self> {
        if n_modes == 0 {
            return Err(Error::Empty("ensemble width"));
        }
        if data.len() % n_modes != 0 {
            return Err(Error::Shape {
                expected: n_modes,
                found: data.len() % n_modes,
            });
        }
        let rows = data.len() / n_modes;
        if meta.chains == 0 || rows % meta.chains != 0 {
            return Err(Error::Integrity(format!(
                "{rows} samples do not split into {} equal chains",
                meta.chains
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integrity("non-finite sample value".into()));
        }
        Ok(Self { meta, n_modes, data })
    }

    pub fn meta(&self) -> &EnsembleMeta {
        &self.meta
    }

    pub fn config(&self) -> &ModelConfig {
        &self.meta.config
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.n_modes
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn chains(&self) -> usize {
        self.meta.chains
    }

    pub fn per_chain(&self) -> usize {
        self.len() / self.meta.chains
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_modes..(i + 1) * self.n_modes]
    }

    pub fn samples(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.n_modes)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Error unless the ensemble has exactly `n_modes` coefficients per sample.
    pub fn require_width(&self, n_modes: usize) -> Result<()> {
        if self.n_modes != n_modes {
            return Err(Error::Shape {
                expected: n_modes,
                found: self.n_modes,
            });
        }
        Ok(())
    }

    /// `f` evaluated on every sample, in storage order.
    pub fn map<F: Fn(&[f64]) -> f64 + Sync + Send>(&self, f: F) -> Vec<f64> {
        self.data.par_chunks_exact(self.n_modes).map(f).collect()
    }

    /// Estimate for per-sample values in storage order.
    pub fn estimate_values(&self, values: &[f64]) -> FunctionalEstimate {
        FunctionalEstimate::correlated(values, self.meta.chains)
    }

    fn select(&self, range: impl Fn(usize) -> std::ops::Range<usize>) -> Self {
        let per = self.per_chain();
        let mut data = Vec::new();
        for c in 0..self.meta.chains {
            let r = range(per);
            let start = (c * per + r.start) * self.n_modes;
            let end = (c * per + r.end) * self.n_modes;
            data.extend_from_slice(&self.data[start..end]);
        }
        Self {
            meta: self.meta.clone(),
            n_modes: self.n_modes,
            data,
        }
    }

    /// First and second half of every chain.
    pub fn split_halves(&self) -> (Self, Self) {
        (self.select(|p| 0..p / 2), self.select(|p| p / 2..2 * (p / 2)))
    }

    /// The first `k` chains.
    pub fn take_chains(&self, k: usize) -> Self {
        let k = k.clamp(1, self.meta.chains);
        let mut meta = self.meta.clone();
        meta.chains = k;
        Self {
            meta,
            n_modes: self.n_modes,
            data: self.data[..k * self.per_chain() * self.n_modes].to_vec(),
        }
    }

    /// Samples `x_mode` for a 1-based mode.
    pub fn coordinate(&self, mode: usize) -> Vec<f64> {
        self.samples().map(|x| x[mode - 1]).collect()
    }
}

fn creation_time() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(0)
}

/// Run `chains` independent chains from `x = 0` for `steps` steps each and
/// keep the states after steps `burn_in + j·thinning`, `j ≥ 1`.
///
/// Chain `c` draws its noise from stream `chain_id + c`, so the ensemble is
/// independent of how chains are scheduled.
pub fn sample_invariant(
    cfg: &ModelConfig,
    chains: usize,
    steps: u64,
    burn_in: u64,
    thinning: u64,
) -> Result<SampleEnsemble> {
    cfg.validate()?;
    if chains == 0 {
        return Err(Error::Config {
            key: "chains".into(),
            message: "need at least one chain".into(),
        });
    }
    if steps <= burn_in {
        return Err(Error::Config {
            key: "steps".into(),
            message: format!("steps ({steps}) must exceed burn_in ({burn_in})"),
        });
    }
    if thinning == 0 {
        return Err(Error::Config {
            key: "thinning".into(),
            message: "must be at least 1".into(),
        });
    }
    let per_chain = ((steps - burn_in) / thinning) as usize;
    if per_chain == 0 {
        return Err(Error::Config {
            key: "thinning".into(),
            message: format!("no samples: (steps - burn_in) = {} < thinning = {thinning}", steps - burn_in),
        });
    }
    let integ = Integrator::new(cfg)?;
    let n = cfg.n_modes;
    let chunks: Vec<Result<Vec<f64>>> = (0..chains)
        .into_par_iter()
        .map(|c| {
            let stream = stream_id(tags::CHAIN, cfg.chain_id + c as u64);
            let mut x = vec![0.0; n];
            let mut out = Vec::with_capacity(per_chain * n);
            let last = burn_in + per_chain as u64 * thinning;
            integ.run_chain(&mut x, last, stream, |k, x| {
                if k > burn_in && (k - burn_in) % thinning == 0 {
                    out.extend_from_slice(x);
                }
            })?;
            Ok(out)
        })
        .collect();
    let mut data = Vec::with_capacity(chains * per_chain * n);
    for (c, chunk) in chunks.into_iter().enumerate() {
        data.extend(chunk.map_err(|e| match e {
            Error::BlowUp { step, sup_norm, cap, .. } => Error::BlowUp {
                chain: cfg.chain_id + c as u64,
                step,
                sup_norm,
                cap,
            },
            other => other,
        })?);
    }
    let meta = EnsembleMeta {
        config: cfg.clone(),
        burn_in,
        thinning,
        chains,
        total_steps: steps,
        created: creation_time(),
        version: FORMAT_VERSION,
    };
    SampleEnsemble::from_parts(meta, n, data)
}

/// `∫ |x|^m dν` by ensemble averaging.
pub fn estimate_moment(ens: &SampleEnsemble, m: u32) -> Result<FunctionalEstimate> {
    if m == 0 {
        return Err(Error::Domain("moment order must be at least 1".into()));
    }
    if ens.is_empty() {
        return Err(Error::Empty("ensemble"));
    }
    let vals = ens.map(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt().powi(m as i32));
    Ok(ens.estimate_values(&vals))
}

/// `∫ φ dν` by ensemble averaging.
pub fn estimate_functional(ens: &SampleEnsemble, phi: &CylinderFunction) -> Result<FunctionalEstimate> {
    if ens.is_empty() {
        return Err(Error::Empty("ensemble"));
    }
    let vals = ens.map(|x| phi.value(x));
    Ok(ens.estimate_values(&vals))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: ModelConfig,
    burn_in: u64,
    thinning: u64,
    chains: usize,
    total_steps: u64,
    created: u64,
    n_modes: usize,
    rows: usize,
    checksum_algorithm: String,
    checksum: String,
}

fn encode_rows(ens: &SampleEnsemble) -> Vec<u8> {
    let mut body = Vec::with_capacity(ens.data.len() * 24);
    for x in ens.samples() {
        for (i, v) in x.iter().enumerate() {
            if i > 0 {
                body.push(b',');
            }
            write!(body, "{v:.16e}").expect("write to Vec");
        }
        body.push(b'\n');
    }
    body
}

/// Serialize to the ensemble text format.
pub fn encode_ensemble(ens: &SampleEnsemble) -> Result<Vec<u8>> {
    let body = encode_rows(ens);
    let header = Header {
        version: ens.meta.version,
        config: ens.meta.config.clone(),
        burn_in: ens.meta.burn_in,
        thinning: ens.meta.thinning,
        chains: ens.meta.chains,
        total_steps: ens.meta.total_steps,
        created: ens.meta.created,
        n_modes: ens.n_modes,
        rows: ens.len(),
        checksum_algorithm: CHECKSUM_ALGORITHM.into(),
        checksum: hex::encode(Sha256::digest(&body)),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn save_ensemble(ens: &SampleEnsemble, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_ensemble(ens)?)?;
    Ok(())
}

/// Parse the ensemble text format, checking version, row count and digest.
pub fn decode_ensemble(bytes: &[u8]) -> Result<SampleEnsemble> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Integrity("missing header line".into()))?;
    let (head, body) = (&bytes[..split], &bytes[split + 1..]);
    let probe: serde_json::Value = serde_json::from_slice(head)?;
    let found = probe.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(Error::Version {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let header: Header = serde_json::from_value(probe)?;
    if header.checksum_algorithm != CHECKSUM_ALGORITHM {
        return Err(Error::Integrity(format!(
            "unsupported checksum algorithm {}",
            header.checksum_algorithm
        )));
    }
    let text = std::str::from_utf8(body).map_err(|_| Error::Integrity("body is not UTF-8".into()))?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() < header.rows || !text.ends_with('\n') && header.rows > 0 {
        return Err(Error::Integrity(format!(
            "truncated file: {} of {} rows present",
            lines.len().min(header.rows),
            header.rows
        )));
    }
    if lines.len() > header.rows {
        return Err(Error::Integrity(format!(
            "{} rows present, header declares {}",
            lines.len(),
            header.rows
        )));
    }
    let digest = hex::encode(Sha256::digest(body));
    if digest != header.checksum {
        return Err(Error::Integrity(format!(
            "checksum mismatch: header {}, data {digest}",
            header.checksum
        )));
    }
    let mut data = Vec::with_capacity(header.rows * header.n_modes);
    for (r, line) in lines.iter().enumerate() {
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Integrity(format!("row {r}: bad number {field:?}")))?;
            data.push(v);
        }
        if data.len() - before != header.n_modes {
            return Err(Error::Shape {
                expected: header.n_modes,
                found: data.len() - before,
            });
        }
    }
    let meta = EnsembleMeta {
        config: header.config,
        burn_in: header.burn_in,
        thinning: header.thinning,
        chains: header.chains,
        total_steps: header.total_steps,
        created: header.created,
        version: header.version,
    };
    SampleEnsemble::from_parts(meta, header.n_modes, data)
}

pub fn load_ensemble(path: impl AsRef<Path>) -> Result<SampleEnsemble> {
    decode_ensemble(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reaction::Drift;
    use crate::spectral::alpha;

    fn gaussian(n: usize) -> ModelConfig {
        ModelConfig {
            n_modes: n,
            dt: 0.01,
            drift: Drift::Zero,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn sample_counts_and_validation() {
        let c = gaussian(4);
        let e = sample_invariant(&c, 3, 130, 20, 7).unwrap();
        assert_eq!(e.len(), 3 * 15);
        assert_eq!(e.per_chain(), 15);
        assert!(sample_invariant(&c, 0, 100, 10, 1).is_err());
        assert!(sample_invariant(&c, 1, 10, 10, 1).is_err());
        assert!(sample_invariant(&c, 1, 100, 10, 0).is_err());
    }

    #[test]
    fn chains_are_independent_of_each_other() {
        // Chain 1 of a two-chain run equals chain 0 of a run whose base
        // stream is one higher.
        let c = gaussian(3);
        let both = sample_invariant(&c, 2, 200, 50, 10).unwrap();
        let shifted = sample_invariant(&ModelConfig { chain_id: 1, ..c.clone() }, 1, 200, 50, 10).unwrap();
        let per = both.per_chain();
        for i in 0..per {
            assert_eq!(both.sample(per + i), shifted.sample(i));
        }
    }

    #[test]
    fn gaussian_variances_and_moments() {
        let c = gaussian(4);
        let e = sample_invariant(&c, 4, 25 * 5000 + 200, 200, 25).unwrap();
        for h in [1usize, 2, 4] {
            let v = e.estimate_values(&e.map(|x| x[h - 1] * x[h - 1]));
            let target = 0.5 * alpha(h).powf(-1.0 - c.gamma);
            assert!(v.within(target, 3.5), "mode {h}: {v:?} vs {target}");
            let m = e.estimate_values(&e.coordinate(h));
            assert!(m.within(0.0, 3.5));
        }
        let m1 = estimate_moment(&e, 1).unwrap();
        let m2 = estimate_moment(&e, 2).unwrap();
        assert!(m1.mean <= m2.mean.sqrt());
        let trace: f64 = (1..=4).map(|h| 0.5 * alpha(h).powf(-1.0 - c.gamma)).sum();
        assert!(m2.within(trace, 3.5));
        let one = estimate_functional(&e, &CylinderFunction::constant_one()).unwrap();
        assert_eq!((one.mean, one.stderr), (1.0, 0.0));
        assert!(estimate_moment(&e, 0).is_err());
    }

    #[test]
    fn save_load_is_exact_and_detects_damage() {
        let c = ModelConfig {
            n_modes: 3,
            ..ModelConfig::default()
        };
        let e = sample_invariant(&c, 2, 300, 100, 20).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ens.csv");
        save_ensemble(&e, &path).unwrap();
        let back = load_ensemble(&path).unwrap();
        assert_eq!(back, e);
        for (a, b) in back.as_flat().iter().zip(e.as_flat()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(back.require_width(4).is_err());

        let bytes = fs::read(&path).unwrap();
        // Corrupt the last record.
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 3] = if bad[n - 3] == b'1' { b'2' } else { b'1' };
        assert!(matches!(decode_ensemble(&bad), Err(Error::Integrity(_))));
        // Drop the last record.
        let cut = bytes[..n - 1].iter().rposition(|&b| b == b'\n').unwrap() + 1;
        assert!(matches!(decode_ensemble(&bytes[..cut]), Err(Error::Integrity(_))));
        // Wrong version.
        let text = String::from_utf8(bytes).unwrap().replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(
            decode_ensemble(text.as_bytes()),
            Err(Error::Version { found: 9, .. })
        ));
    }

    #[test]
    fn halves_and_chain_subsets() {
        let e = sample_invariant(&gaussian(2), 2, 110, 10, 10).unwrap();
        let (a, b) = e.split_halves();
        assert_eq!(a.len(), 10);
        assert_eq!(b.len(), 10);
        assert_eq!(a.sample(0), e.sample(0));
        assert_eq!(b.sample(0), e.sample(5));
        assert_eq!(e.take_chains(1).len(), 10);
    }
}
