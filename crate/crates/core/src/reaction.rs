//! Decreasing odd-degree polynomial drift and its Yosida regularization.
//!
//! For `ε > 0` the resolvent `J_ε(r)` is the unique solution of
//! `J - ε p(J) = r`; the map `s ↦ s - ε p(s)` is strictly increasing because
//! `p' ≤ 0`. The regularized drift is `p_ε = p ∘ J_ε = (J_ε - id)/ε`, which is
//! non-increasing, `1/ε`-Lipschitz and converges to `p` pointwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const RESOLVENT_MAX_ITER: usize = 200;
const MONOTONICITY_SAMPLES: usize = 20_001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct OddPolynomial {
    /// `c_0..=c_N`, `p(r) = Σ c_k r^k`.
    coeffs: Vec<f64>,
    /// `k c_k` for `k = 1..=N`, the coefficients of `p'`.
    deriv: Vec<f64>,
}

impl OddPolynomial {
    /// Validates odd degree `N > 1`, `c_N < 0` and `p' ≤ 0` on ℝ.
    pub fn new(mut coeffs: Vec<f64>) -> Result<Self> {
        let bad = |message: String| Error::Config {
            key: "p_coeffs".into(),
            message,
        };
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(bad("coefficients must be finite".into()));
        }
        while coeffs.len() > 1 && *coeffs.last().unwrap() == 0.0 {
            coeffs.pop();
        }
        let degree = coeffs.len() - 1;
        if degree < 3 || degree % 2 == 0 {
            return Err(bad(format!("degree must be odd and > 1, got {degree}")));
        }
        if coeffs[degree] >= 0.0 {
            return Err(bad(format!(
                "leading coefficient must be negative, got {}",
                coeffs[degree]
            )));
        }
        let p = Self::from_parts_unchecked(coeffs);
        if let Some(r) = p.find_increase() {
            return Err(bad(format!(
                "polynomial is not non-increasing: p'({r}) = {} > 0",
                p.deriv(r)
            )));
        }
        Ok(p)
    }

    /// `p(r) = -r³`.
    pub fn cubic() -> Self {
        Self::new(vec![0.0, 0.0, 0.0, -1.0]).expect("valid default drift")
    }

    fn from_parts_unchecked(coeffs: Vec<f64>) -> Self {
        let deriv = coeffs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(k, c)| k as f64 * c)
            .collect();
        Self { coeffs, deriv }
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    #[inline]
    pub fn eval(&self, r: f64) -> f64 {
        horner(&self.coeffs, r)
    }

    #[inline]
    pub fn deriv(&self, r: f64) -> f64 {
        horner(&self.deriv, r)
    }

    /// `p'` is of even degree with a negative leading coefficient, so its
    /// supremum is attained inside the Cauchy root bound of `p''`. Sample that
    /// interval and return a point where `p' > 0`, if any.
    fn find_increase(&self) -> Option<f64> {
        let lead = *self.deriv.last().unwrap();
        let radius = 1.0
            + self.deriv[..self.deriv.len() - 1]
                .iter()
                .map(|c| (c / lead).abs())
                .fold(0.0, f64::max);
        let scale = self.deriv.iter().map(|c| c.abs()).fold(0.0, f64::max);
        let tol = 1e-12 * scale;
        (0..MONOTONICITY_SAMPLES)
            .map(|i| -radius + 2.0 * radius * i as f64 / (MONOTONICITY_SAMPLES - 1) as f64)
            .find(|&r| self.deriv(r) > tol)
    }
}

impl TryFrom<Vec<f64>> for OddPolynomial {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<OddPolynomial> for Vec<f64> {
    fn from(p: OddPolynomial) -> Self {
        p.coeffs
    }
}

#[inline]
fn horner(coeffs: &[f64], r: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * r + c)
}

/// Regularization parameter `ε > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YosidaParam(f64);

impl YosidaParam {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::Config {
                key: "epsilon".into(),
                message: format!("Yosida parameter must be positive, got {epsilon}"),
            });
        }
        Ok(Self(epsilon))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Resolvent point together with the regularized drift and its slope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YosidaPoint {
    pub resolvent: f64,
    pub value: f64,
    pub slope: f64,
}

/// `J_ε(r)`: safeguarded Newton on `s - εp(s) - r` with a bisection fallback.
pub fn resolvent(p: &OddPolynomial, eps: YosidaParam, r: f64) -> Result<f64> {
    let e = eps.value();
    let residual = |s: f64| s - e * p.eval(s) - r;
    let tol = 1e-12 * (1.0 + r.abs());

    let width = e * p.eval(r).abs() + 1.0;
    let (mut lo, mut hi) = (r - width, r + width);
    let mut s = r;
    for _ in 0..RESOLVENT_MAX_ITER {
        let f = residual(s);
        if f.abs() <= tol {
            return Ok(s);
        }
        if f > 0.0 {
            hi = s;
        } else {
            lo = s;
        }
        let slope = 1.0 - e * p.deriv(s);
        let newton = s - f / slope;
        s = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= 4.0 * f64::EPSILON * s.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    let f = residual(s);
    if f.abs() <= tol {
        Ok(s)
    } else {
        Err(Error::Numerical {
            what: "Yosida resolvent",
            detail: format!(
                "r = {r}, eps = {e}: residual {f:e} after {RESOLVENT_MAX_ITER} iterations, bracket [{lo}, {hi}]"
            ),
        })
    }
}

/// `p_ε(r) = p(J_ε(r))`.
pub fn yosida_eval(p: &OddPolynomial, eps: YosidaParam, r: f64) -> Result<f64> {
    Ok(p.eval(resolvent(p, eps, r)?))
}

/// `p_ε'(r) = p'(J) / (1 - ε p'(J))`, `J = J_ε(r)`; lies in `[-1/ε, 0]`.
pub fn yosida_deriv(p: &OddPolynomial, eps: YosidaParam, r: f64) -> Result<f64> {
    let j = resolvent(p, eps, r)?;
    let d = p.deriv(j);
    Ok(d / (1.0 - eps.value() * d))
}

/// All three quantities from a single resolvent solve.
pub fn yosida_point(p: &OddPolynomial, eps: YosidaParam, r: f64) -> Result<YosidaPoint> {
    let j = resolvent(p, eps, r)?;
    let d = p.deriv(j);
    Ok(YosidaPoint {
        resolvent: j,
        value: p.eval(j),
        slope: d / (1.0 - eps.value() * d),
    })
}

/// Drift of the model: either identically zero (Gaussian case) or a
/// Yosida-regularized polynomial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub enum Drift {
    Zero,
    Polynomial(OddPolynomial),
}

impl Drift {
    pub fn is_zero(&self) -> bool {
        matches!(self, Drift::Zero)
    }

    /// Regularized value and slope at `r`.
    #[inline]
    pub fn regularized(&self, eps: YosidaParam, r: f64) -> Result<(f64, f64)> {
        match self {
            Drift::Zero => Ok((0.0, 0.0)),
            Drift::Polynomial(p) => {
                let pt = yosida_point(p, eps, r)?;
                Ok((pt.value, pt.slope))
            }
        }
    }

    /// Unregularized value `p(r)`.
    pub fn raw(&self, r: f64) -> f64 {
        match self {
            Drift::Zero => 0.0,
            Drift::Polynomial(p) => p.eval(r),
        }
    }

    /// Coefficient list `c_0..c_N`; all zeros for the Gaussian case.
    pub fn coefficients(&self) -> Vec<f64> {
        match self {
            Drift::Zero => vec![0.0],
            Drift::Polynomial(p) => p.coefficients().to_vec(),
        }
    }

    /// Parse a coefficient list, mapping an all-zero list to [`Drift::Zero`].
    pub fn from_coefficients(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.iter().all(|c| *c == 0.0) {
            Ok(Drift::Zero)
        } else {
            Ok(Drift::Polynomial(OddPolynomial::new(coeffs)?))
        }
    }
}

impl TryFrom<Vec<f64>> for Drift {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::from_coefficients(v)
    }
}

impl From<Drift> for Vec<f64> {
    fn from(d: Drift) -> Self {
        d.coefficients()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eps(e: f64) -> YosidaParam {
        YosidaParam::new(e).unwrap()
    }

    #[test]
    fn polynomial_validation() {
        assert!(OddPolynomial::new(vec![0.0, 0.0, 0.0, -1.0]).is_ok());
        assert!(OddPolynomial::new(vec![0.0, -1.0, 0.0, -1.0]).is_ok());
        assert!(OddPolynomial::new(vec![0.0, 0.0, 0.0, 1.0]).is_err());
        assert!(OddPolynomial::new(vec![0.0, 0.0, -1.0]).is_err());
        assert!(OddPolynomial::new(vec![0.0, -1.0]).is_err());
        // -r³ + 3r increases on (-1, 1).
        assert!(OddPolynomial::new(vec![0.0, 3.0, 0.0, -1.0]).is_err());
        // Trailing zeros are trimmed before the degree check.
        assert_eq!(OddPolynomial::new(vec![0.0, 0.0, 0.0, -1.0, 0.0]).unwrap().degree(), 3);
        assert!(OddPolynomial::new(vec![1.0, -2.0, 0.0, -0.5, 0.0, -3.0]).is_ok());
    }

    #[test]
    fn evaluation_and_derivative() {
        let p = OddPolynomial::cubic();
        assert_eq!(p.eval(2.0), -8.0);
        assert_eq!(p.deriv(1.0), -3.0);
        let q = OddPolynomial::new(vec![0.0, -1.0, 0.0, -1.0]).unwrap();
        assert_eq!(q.deriv(0.0), -1.0);
        for i in -100..=100 {
            assert!(q.deriv(i as f64 * 0.1) <= 0.0);
        }
    }

    #[test]
    fn resolvent_examples() {
        let p = OddPolynomial::cubic();
        let j = resolvent(&p, eps(1.0), 2.0).unwrap();
        assert!((j - 1.0).abs() < 1e-12);
        assert_eq!(resolvent(&p, eps(0.3), 0.0).unwrap(), 0.0);
        let j = resolvent(&p, eps(1e-6), 2.0).unwrap();
        assert!((j - 2.0).abs() < 1e-4);
        // Independent Newton oracle on s + 1e-6 s³ = 2.
        let mut s = 2.0_f64;
        for _ in 0..50 {
            s -= (s + 1e-6 * s.powi(3) - 2.0) / (1.0 + 3e-6 * s * s);
        }
        assert!((j - s).abs() < 1e-13);
    }

    #[test]
    fn yosida_examples() {
        let p = OddPolynomial::cubic();
        assert!((yosida_eval(&p, eps(1.0), 2.0).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(yosida_eval(&p, eps(0.1), 0.0).unwrap(), 0.0);
        assert_eq!(yosida_deriv(&p, eps(0.1), 0.0).unwrap(), 0.0);
        assert!((yosida_deriv(&p, eps(1.0), 2.0).unwrap() + 0.75).abs() < 1e-12);

        let mut last = f64::INFINITY;
        for e in [1e-1, 1e-2, 1e-3] {
            let v = yosida_eval(&p, eps(e), 1.0).unwrap();
            let gap = (v + 1.0).abs();
            assert!(gap < last, "ε = {e}: gap {gap} did not shrink");
            assert!(v > -1.0);
            last = gap;
        }
    }

    #[test]
    fn derivative_matches_central_difference() {
        let p = OddPolynomial::cubic();
        for e in [1.0, 0.1, 1e-3] {
            let k = 1e-5;
            let r = 0.7;
            let fd = (yosida_eval(&p, eps(e), r + k).unwrap() - yosida_eval(&p, eps(e), r - k).unwrap())
                / (2.0 * k);
            let d = yosida_deriv(&p, eps(e), r).unwrap();
            assert!((fd - d).abs() < 1e-6, "ε = {e}: fd {fd} vs {d}");
        }
    }

    #[test]
    fn first_order_consistency_in_epsilon() {
        let p = OddPolynomial::cubic();
        for i in -30..=30 {
            let r = i as f64 * 0.1;
            let g1 = (yosida_eval(&p, eps(1e-3), r).unwrap() - p.eval(r)).abs();
            let g2 = (yosida_eval(&p, eps(5e-4), r).unwrap() - p.eval(r)).abs();
            if g1 > 1e-10 {
                let ratio = g1 / g2;
                assert!((ratio - 2.0).abs() < 0.05, "r = {r}: ratio {ratio}");
            }
        }
    }

    #[test]
    fn resolvent_handles_large_arguments() {
        let p = OddPolynomial::new(vec![0.5, -2.0, 0.0, -1.0, 0.0, -4.0]).unwrap();
        for &r in &[-1e6, -1e3, -1.0, 0.0, 1e-9, 3.0, 1e4, 1e6] {
            for &e in &[1e-6, 1e-3, 1.0, 100.0] {
                let j = resolvent(&p, eps(e), r).unwrap();
                assert!((j - e * p.eval(j) - r).abs() <= 1e-12 * (1.0 + r.abs()));
            }
        }
    }

    proptest! {
        #[test]
        fn regularized_drift_is_monotone_and_bounded(
            r in -20.0f64..20.0, dr in 1e-6f64..5.0, e in 1e-4f64..2.0
        ) {
            let p = OddPolynomial::new(vec![0.0, -1.0, 0.0, -2.0]).unwrap();
            let y = eps(e);
            let a = yosida_eval(&p, y, r).unwrap();
            let b = yosida_eval(&p, y, r + dr).unwrap();
            prop_assert!(b <= a + 1e-12 * (1.0 + a.abs()));
            let d = yosida_deriv(&p, y, r).unwrap();
            prop_assert!(d <= 0.0 && d >= -1.0 / e * (1.0 + 1e-12));
            let ja = resolvent(&p, y, r).unwrap();
            let jb = resolvent(&p, y, r + dr).unwrap();
            prop_assert!((jb - ja).abs() <= dr * (1.0 + 1e-9));
        }
    }
}
