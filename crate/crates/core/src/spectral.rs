//! Dirichlet Laplacian on (0,1) in its sine eigenbasis.
//!
//! `A e_h = -α_h e_h` with `α_h = π² h²` and `e_h(ξ) = √2 sin(hπξ)`. Every
//! vector in `H = L²(0,1)` is carried by its first `n_modes` coefficients.
//! Fractional powers of `-A` and the Sobolev scale `|·|_a` act diagonally on
//! those coefficients. Pointwise nonlinearities go through [`Collocation`],
//! a discrete sine transform on the interior nodes `ξ_j = j/(M+1)`.

use std::f64::consts::{PI, SQRT_2};
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Range of fractional exponents accepted by [`fractional_apply`].
pub const POWER_RANGE: (f64, f64) = (-4.0, 4.0);
/// Range of Sobolev orders accepted by [`SobolevIndex::new`].
pub const SOBOLEV_RANGE: (f64, f64) = (-2.0, 4.0);

/// `α_h = π² h²`, the `h`-th eigenvalue of `-A`.
pub fn eigenvalue(h: i64) -> Result<f64> {
    if h < 1 {
        return Err(Error::Domain(format!("eigenvalue index must be >= 1, got {h}")));
    }
    Ok(alpha(h as usize))
}

/// Infallible form of [`eigenvalue`] for 1-based mode indices.
#[inline]
pub fn alpha(h: usize) -> f64 {
    debug_assert!(h >= 1);
    let h = h as f64;
    PI * PI * h * h
}

/// `e_h(ξ) = √2 sin(hπξ)`.
#[inline]
pub fn basis_function(h: usize, xi: f64) -> f64 {
    SQRT_2 * (h as f64 * PI * xi).sin()
}

/// Coefficients `(x_1, …, x_n)` of an element of `H` in the eigenbasis.
///
/// Index 0 of the backing vector holds the coefficient of `e_1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SpectralVector(Vec<f64>);

impl SpectralVector {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::Domain("a spectral vector needs at least one mode".into()));
        }
        if let Some(i) = coeffs.iter().position(|c| !c.is_finite()) {
            return Err(Error::Domain(format!(
                "coefficient of e_{} is not finite ({})",
                i + 1,
                coeffs[i]
            )));
        }
        Ok(Self(coeffs))
    }

    pub fn zeros(n_modes: usize) -> Self {
        assert!(n_modes >= 1, "n_modes must be positive");
        Self(vec![0.0; n_modes])
    }

    /// The eigenvector `e_h` (1-based) embedded in `n_modes` coefficients.
    pub fn unit(h: usize, n_modes: usize) -> Result<Self> {
        if h == 0 || h > n_modes {
            return Err(Error::Domain(format!("mode {h} outside 1..={n_modes}")));
        }
        let mut v = Self::zeros(n_modes);
        v.0[h - 1] = 1.0;
        Ok(v)
    }

    pub fn n_modes(&self) -> usize {
        self.0.len()
    }

    /// Coefficient of `e_h`, 1-based.
    pub fn mode(&self, h: usize) -> f64 {
        self.0[h - 1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Self) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.iter().map(|v| c * v).collect())
    }

    /// Orthogonal projection onto `span(e_h)`.
    pub fn project_mode(&self, h: usize) -> Self {
        let mut out = Self::zeros(self.n_modes());
        out.0[h - 1] = self.0[h - 1];
        out
    }
}

impl TryFrom<Vec<f64>> for SpectralVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SpectralVector> for Vec<f64> {
    fn from(v: SpectralVector) -> Self {
        v.0
    }
}

impl Deref for SpectralVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for SpectralVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Order `a` of the norm `|x|_a = |(-A)^{a/2} x|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SobolevIndex(f64);

impl SobolevIndex {
    pub fn new(a: f64) -> Result<Self> {
        if !a.is_finite() || a < SOBOLEV_RANGE.0 || a > SOBOLEV_RANGE.1 {
            return Err(Error::Domain(format!(
                "Sobolev order {a} outside [{}, {}]",
                SOBOLEV_RANGE.0, SOBOLEV_RANGE.1
            )));
        }
        Ok(Self(a))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `(-A)^s v`, coefficient-wise `α_h^s v_h`.
pub fn fractional_apply(s: f64, v: &SpectralVector) -> Result<SpectralVector> {
    if !s.is_finite() || s < POWER_RANGE.0 || s > POWER_RANGE.1 {
        return Err(Error::Domain(format!(
            "fractional power {s} outside [{}, {}]",
            POWER_RANGE.0, POWER_RANGE.1
        )));
    }
    let coeffs = v
        .iter()
        .enumerate()
        .map(|(i, c)| alpha(i + 1).powf(s) * c)
        .collect();
    SpectralVector::new(coeffs)
}

/// `|v|_a = (Σ α_h^a v_h²)^{1/2}`.
pub fn sobolev_norm(a: SobolevIndex, v: &[f64]) -> f64 {
    sobolev_norm_sq(a.value(), v).sqrt()
}

/// Squared Sobolev norm for an unchecked order; used in inner loops.
#[inline]
pub fn sobolev_norm_sq(a: f64, v: &[f64]) -> f64 {
    if a == 0.0 {
        return dot(v, v);
    }
    v.iter()
        .enumerate()
        .map(|(i, c)| alpha(i + 1).powf(a) * c * c)
        .sum()
}

/// Precomputed `α_h^s` for `h = 1..=n`; avoids `powf` in hot loops.
pub fn alpha_powers(s: f64, n_modes: usize) -> Vec<f64> {
    (1..=n_modes).map(|h| alpha(h).powf(s)).collect()
}

/// Values on the interior collocation nodes `ξ_j = j/(M+1)`, `j = 1..=M`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub values: Vec<f64>,
}

impl GridField {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Discrete `L^q(0,1)` norm with node weight `1/(M+1)`.
    pub fn lq_norm(&self, q: f64) -> f64 {
        let w = 1.0 / (self.values.len() as f64 + 1.0);
        let s: f64 = self.values.iter().map(|v| v.abs().powf(q)).sum();
        (w * s).powf(1.0 / q)
    }

    /// Mean square `(1/(M+1)) Σ f_j²`, equal to `|v|²` for band-limited fields.
    pub fn mean_square(&self) -> f64 {
        let w = 1.0 / (self.values.len() as f64 + 1.0);
        w * self.values.iter().map(|v| v * v).sum::<f64>()
    }
}

/// Discrete sine transform between `n_modes` coefficients and `M ≥ n_modes`
/// interior nodes.
///
/// With `M + 1 > 2 n_modes` the product of three band-limited fields aliases
/// only into modes above `n_modes`, so cubic drifts are projected exactly.
#[derive(Debug, Clone)]
pub struct Collocation {
    n_modes: usize,
    n_nodes: usize,
    /// Row-major `[j][h]` table of `√2 sin(hπ ξ_j)`.
    synth: Vec<f64>,
}

impl Collocation {
    /// Default grid: `M = 2 n_modes`.
    pub fn new(n_modes: usize) -> Self {
        Self::with_nodes(n_modes, 2 * n_modes).expect("2n >= n")
    }

    pub fn with_nodes(n_modes: usize, n_nodes: usize) -> Result<Self> {
        if n_modes == 0 {
            return Err(Error::Config {
                key: "n_modes".into(),
                message: "must be positive".into(),
            });
        }
        if n_nodes < n_modes {
            return Err(Error::Config {
                key: "grid_nodes".into(),
                message: format!("{n_nodes} collocation nodes cannot resolve {n_modes} modes"),
            });
        }
        let step = 1.0 / (n_nodes as f64 + 1.0);
        let mut synth = Vec::with_capacity(n_modes * n_nodes);
        for j in 1..=n_nodes {
            let xi = j as f64 * step;
            synth.extend((1..=n_modes).map(|h| basis_function(h, xi)));
        }
        Ok(Self {
            n_modes,
            n_nodes,
            synth,
        })
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        let step = 1.0 / (self.n_nodes as f64 + 1.0);
        (1..=self.n_nodes).map(move |j| j as f64 * step)
    }

    /// `f_j = Σ_h v_h e_h(ξ_j)` into a caller-provided buffer.
    pub fn synthesize(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.n_modes);
        debug_assert_eq!(out.len(), self.n_nodes);
        for (row, o) in self.synth.chunks_exact(self.n_modes).zip(out.iter_mut()) {
            *o = dot(row, v);
        }
    }

    /// `v_h = (1/(M+1)) Σ_j f_j e_h(ξ_j)` into a caller-provided buffer.
    pub fn analyze(&self, f: &[f64], out: &mut [f64]) {
        debug_assert_eq!(f.len(), self.n_nodes);
        debug_assert_eq!(out.len(), self.n_modes);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (row, &fj) in self.synth.chunks_exact(self.n_modes).zip(f) {
            for (o, s) in out.iter_mut().zip(row) {
                *o += fj * s;
            }
        }
        let w = 1.0 / (self.n_nodes as f64 + 1.0);
        out.iter_mut().for_each(|o| *o *= w);
    }

    pub fn to_physical(&self, v: &SpectralVector) -> Result<GridField> {
        if v.n_modes() != self.n_modes {
            return Err(Error::Shape {
                expected: self.n_modes,
                found: v.n_modes(),
            });
        }
        let mut values = vec![0.0; self.n_nodes];
        self.synthesize(v, &mut values);
        Ok(GridField { values })
    }

    pub fn to_spectral(&self, f: &GridField) -> Result<SpectralVector> {
        if f.len() != self.n_nodes {
            return Err(Error::Shape {
                expected: self.n_nodes,
                found: f.len(),
            });
        }
        let mut out = vec![0.0; self.n_modes];
        self.analyze(&f.values, &mut out);
        SpectralVector::new(out)
    }
}

/// Evaluate `v` on `M` nodes (`M ≥ n_modes`).
pub fn to_physical(v: &SpectralVector, n_nodes: usize) -> Result<GridField> {
    Collocation::with_nodes(v.n_modes(), n_nodes)?.to_physical(v)
}

/// Recover the first `n_modes` coefficients from nodal values.
pub fn to_spectral(f: &GridField, n_modes: usize) -> Result<SpectralVector> {
    Collocation::with_nodes(n_modes, f.len())?.to_spectral(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_vector(seed: u64, n: usize) -> SpectralVector {
        // Small LCG keeps these tests free of the noise module.
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let coeffs = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        SpectralVector::new(coeffs).unwrap()
    }

    #[test]
    fn eigenvalues() {
        assert!((eigenvalue(1).unwrap() - PI * PI).abs() < 1e-14);
        assert!((eigenvalue(2).unwrap() - 4.0 * PI * PI).abs() < 1e-13);
        assert!((eigenvalue(10).unwrap() - 100.0 * PI * PI).abs() < 1e-11);
        assert!(eigenvalue(0).is_err());
        assert!(eigenvalue(-3).is_err());
        for h in 1..50 {
            assert!(eigenvalue(h + 1).unwrap() > eigenvalue(h).unwrap());
        }
    }

    #[test]
    fn fractional_powers() {
        let v = random_vector(1, 12);
        assert_eq!(fractional_apply(0.0, &v).unwrap(), v);
        let e1 = SpectralVector::unit(1, 4).unwrap();
        let a = fractional_apply(1.0, &e1).unwrap();
        assert!((a.mode(1) - PI * PI).abs() < 1e-13);
        assert_eq!(&a[1..], &[0.0; 3]);

        let ab = fractional_apply(0.3, &fractional_apply(-0.7, &v).unwrap()).unwrap();
        let direct = fractional_apply(-0.4, &v).unwrap();
        for (x, y) in ab.iter().zip(direct.iter()) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1e-300));
        }
        assert!(fractional_apply(4.5, &v).is_err());
    }

    #[test]
    fn fractional_apply_commutes_with_mode_projection() {
        let v = random_vector(7, 9);
        for h in 1..=9 {
            let lhs = fractional_apply(0.6, &v.project_mode(h)).unwrap();
            let rhs = fractional_apply(0.6, &v).unwrap().project_mode(h);
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn sobolev_norms_of_eigenvectors() {
        let e1 = SpectralVector::unit(1, 3).unwrap();
        let n = |a: f64| sobolev_norm(SobolevIndex::new(a).unwrap(), &e1);
        assert!((n(0.0) - 1.0).abs() < 1e-15);
        assert!((n(2.0) - PI * PI).abs() < 1e-13);
        assert!((n(-1.0) - 1.0 / PI).abs() < 1e-15);
        assert!(SobolevIndex::new(4.5).is_err());
        assert!(SobolevIndex::new(-2.5).is_err());
    }

    #[test]
    fn synthesis_of_first_mode() {
        let e1 = SpectralVector::unit(1, 1).unwrap();
        let f = to_physical(&e1, 3).unwrap();
        let expected = [
            SQRT_2 * (PI / 4.0).sin(),
            SQRT_2 * (PI / 2.0).sin(),
            SQRT_2 * (3.0 * PI / 4.0).sin(),
        ];
        for (a, b) in f.values.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn too_few_nodes_is_a_config_error() {
        let v = SpectralVector::zeros(8);
        assert!(matches!(to_physical(&v, 7), Err(Error::Config { .. })));
    }

    #[test]
    fn parseval_on_dense_grid() {
        let v = random_vector(3, 16);
        let f = to_physical(&v, 4096).unwrap();
        let plain_mean = f.values.iter().map(|x| x * x).sum::<f64>() / f.len() as f64;
        let exact = v.dot(&v);
        assert!((f.mean_square() - exact).abs() < 1e-12 * exact);
        assert!((plain_mean - exact).abs() < 1e-2 * exact);
        // Riemann sum of (Σ v_h e_h)² on a fine uniform grid.
        let m = 200_000;
        let quad: f64 = (0..m)
            .map(|k| {
                let xi = (k as f64 + 0.5) / m as f64;
                let s: f64 = v.iter().enumerate().map(|(i, c)| c * basis_function(i + 1, xi)).sum();
                s * s
            })
            .sum::<f64>()
            / m as f64;
        assert!((quad - exact).abs() < 1e-6);
    }

    #[test]
    fn cubic_nonlinearity_is_dealiased_on_default_grid() {
        // e_1³ = (√2)³ (3 sin u - sin 3u)/4 ⇒ projections 3/2 on e_1 and -1/2 on e_3.
        let coll = Collocation::new(3);
        let e1 = SpectralVector::unit(1, 3).unwrap();
        let mut f = vec![0.0; coll.n_nodes()];
        coll.synthesize(&e1, &mut f);
        f.iter_mut().for_each(|v| *v = v.powi(3));
        let mut out = vec![0.0; 3];
        coll.analyze(&f, &mut out);
        assert!((out[0] - 1.5).abs() < 1e-14);
        assert!(out[1].abs() < 1e-14);
        assert!((out[2] + 0.5).abs() < 1e-14);
    }

    #[test]
    fn interpolation_inequality() {
        let (a, b, c) = (-0.25, 0.5, 0.75);
        let th_a = (c - b) / (c - a);
        let th_c = (b - a) / (c - a);
        for seed in 0..1000 {
            let v = random_vector(seed, 24);
            let nb = sobolev_norm_sq(b, &v).sqrt();
            let bound = sobolev_norm_sq(a, &v).sqrt().powf(th_a) * sobolev_norm_sq(c, &v).sqrt().powf(th_c);
            assert!(nb <= bound * (1.0 + 1e-12), "seed {seed}: {nb} > {bound}");
        }
        for h in 1..=24 {
            let e = SpectralVector::unit(h, 24).unwrap();
            let nb = sobolev_norm_sq(b, &e).sqrt();
            let bound = sobolev_norm_sq(a, &e).sqrt().powf(th_a) * sobolev_norm_sq(c, &e).sqrt().powf(th_c);
            assert!((nb - bound).abs() <= 1e-12 * nb);
        }
    }

    #[test]
    fn negative_norm_embedding_ratio_is_bounded() {
        // |x|_{-α} ≤ c |x|_{L^{2/(1+α)}} in one dimension.
        let alpha_ = 0.25;
        let q = 2.0 / (1.0 + alpha_);
        let coll = Collocation::with_nodes(32, 512).unwrap();
        let mut worst: f64 = 0.0;
        let mut buf = vec![0.0; 512];
        for seed in 0..1000 {
            // Mix smooth and rough spectra.
            let mut v = random_vector(seed, 32);
            if seed % 2 == 0 {
                v.iter_mut().enumerate().for_each(|(i, c)| *c /= (i + 1) as f64);
            }
            coll.synthesize(&v, &mut buf);
            let lq = GridField { values: buf.clone() }.lq_norm(q);
            worst = worst.max(sobolev_norm_sq(-alpha_, &v).sqrt() / lq);
        }
        assert!(worst.is_finite() && worst < 10.0, "embedding ratio {worst}");
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(coeffs in proptest::collection::vec(-10.0f64..10.0, 1..40)) {
            let v = SpectralVector::new(coeffs).unwrap();
            let coll = Collocation::new(v.n_modes());
            let back = coll.to_spectral(&coll.to_physical(&v).unwrap()).unwrap();
            for (a, b) in v.iter().zip(back.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
