//! Smooth functions and vector fields on `H` that depend on finitely many
//! coordinates, with exact gradients.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// A user-supplied function with its gradient.
#[derive(Clone)]
pub struct CustomFunction {
    pub name: String,
    value: ScalarFn,
    gradient: GradFn,
}

impl CustomFunction {
    pub fn new<V, G>(name: impl Into<String>, value: V, gradient: G) -> Self
    where
        V: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            value: Arc::new(value),
            gradient: Arc::new(gradient),
        }
    }
}

impl fmt::Debug for CustomFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomFunction").field("name", &self.name).finish()
    }
}

/// `φ(x)` depending on finitely many coordinates `x_h = ⟨x, e_h⟩`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CylinderFunction {
    /// `cos(⟨x, λ⟩ + θ)`; `λ` may be shorter than `x`.
    Trig { lambda: Vec<f64>, theta: f64 },
    /// `x_mode^power`, `mode` 1-based.
    PolyCoordinate { mode: usize, power: u32 },
    #[serde(skip)]
    Custom(CustomFunction),
}

impl CylinderFunction {
    pub fn trig(lambda: Vec<f64>, theta: f64) -> Self {
        CylinderFunction::Trig { lambda, theta }
    }

    /// `sin(⟨x, λ⟩)`, written as a trig function with phase `-π/2`.
    pub fn sine(lambda: Vec<f64>) -> Self {
        Self::trig(lambda, -std::f64::consts::FRAC_PI_2)
    }

    pub fn coordinate(mode: usize) -> Self {
        CylinderFunction::PolyCoordinate { mode, power: 1 }
    }

    pub fn constant_one() -> Self {
        Self::trig(Vec::new(), 0.0)
    }

    fn phase(lambda: &[f64], theta: f64, x: &[f64]) -> f64 {
        lambda.iter().zip(x).map(|(l, x)| l * x).sum::<f64>() + theta
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            CylinderFunction::Trig { lambda, theta } => Self::phase(lambda, *theta, x).cos(),
            CylinderFunction::PolyCoordinate { mode, power } => mode.checked_sub(1).and_then(|i| x.get(i)).copied().unwrap_or(0.0).powi(*power as i32),
            CylinderFunction::Custom(c) => (c.value)(x),
        }
    }

    /// Write `Dφ(x)` into `out` (same length as `x`).
    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|g| *g = 0.0);
        match self {
            CylinderFunction::Trig { lambda, theta } => {
                let s = -Self::phase(lambda, *theta, x).sin();
                for (g, l) in out.iter_mut().zip(lambda) {
                    *g = s * l;
                }
            }
            CylinderFunction::PolyCoordinate { mode, power } => {
                if *power > 0 && *mode >= 1 && *mode <= x.len() {
                    out[mode - 1] = *power as f64 * x[mode - 1].powi(*power as i32 - 1);
                }
            }
            CylinderFunction::Custom(c) => (c.gradient)(x, out),
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.gradient_into(x, &mut g);
        g
    }

    /// `⟨Dφ(x), h⟩`.
    pub fn directional(&self, x: &[f64], h: &[f64]) -> f64 {
        match self {
            CylinderFunction::Trig { lambda, theta } => {
                -Self::phase(lambda, *theta, x).sin() * lambda.iter().zip(h).map(|(l, h)| l * h).sum::<f64>()
            }
            CylinderFunction::PolyCoordinate { mode, power } => {
                if *power == 0 || *mode == 0 || *mode > h.len() || *mode > x.len() {
                    0.0
                } else {
                    *power as f64 * x[mode - 1].powi(*power as i32 - 1) * h[mode - 1]
                }
            }
            CylinderFunction::Custom(_) => self.gradient(x).iter().zip(h).map(|(g, h)| g * h).sum(),
        }
    }

    /// `∂φ/∂x_h` (1-based `h`).
    pub fn partial(&self, x: &[f64], h: usize) -> f64 {
        match self {
            CylinderFunction::Trig { lambda, theta } => {
                lambda.get(h - 1).map_or(0.0, |l| -Self::phase(lambda, *theta, x).sin() * l)
            }
            CylinderFunction::PolyCoordinate { mode, power } => {
                if *mode != h || *power == 0 || h > x.len() {
                    0.0
                } else {
                    *power as f64 * x[h - 1].powi(*power as i32 - 1)
                }
            }
            CylinderFunction::Custom(_) => self.gradient(x)[h - 1],
        }
    }

    /// Modes the function depends on, when known.
    pub fn support(&self) -> Option<Vec<usize>> {
        match self {
            CylinderFunction::Trig { lambda, .. } => Some(
                lambda
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| **l != 0.0)
                    .map(|(i, _)| i + 1)
                    .collect(),
            ),
            CylinderFunction::PolyCoordinate { mode, power } => Some(if *power == 0 { vec![] } else { vec![*mode] }),
            CylinderFunction::Custom(_) => None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            CylinderFunction::Trig { lambda, theta } => {
                let terms: Vec<String> = lambda
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| **l != 0.0)
                    .map(|(i, l)| format!("{l:.4}*x{}", i + 1))
                    .collect();
                format!("cos({}{:+.4})", if terms.is_empty() { "0".into() } else { terms.join("+") }, theta)
            }
            CylinderFunction::PolyCoordinate { mode, power } => format!("x{mode}^{power}"),
            CylinderFunction::Custom(c) => c.name.clone(),
        }
    }
}

/// A vector field `F(x) = Σ_h f_h(x) e_h` with finitely many nonzero
/// cylinder components.
#[derive(Debug, Clone)]
pub struct CylinderField {
    components: Vec<(usize, CylinderFunction)>,
}

impl CylinderField {
    pub fn new(components: Vec<(usize, CylinderFunction)>) -> Result<Self> {
        for (h, _) in &components {
            if *h == 0 {
                return Err(Error::Domain("field component modes are 1-based".into()));
            }
        }
        Ok(Self { components })
    }

    /// The constant field `e_h`.
    pub fn constant(h: usize) -> Result<Self> {
        Self::new(vec![(h, CylinderFunction::constant_one())])
    }

    pub fn components(&self) -> &[(usize, CylinderFunction)] {
        &self.components
    }

    pub fn modes(&self) -> Vec<usize> {
        let mut m: Vec<usize> = self.components.iter().map(|(h, _)| *h).collect();
        m.sort_unstable();
        m.dedup();
        m
    }

    /// `F(x)` as a coefficient vector of the given width.
    pub fn value(&self, x: &[f64], width: usize) -> Vec<f64> {
        let mut out = vec![0.0; width];
        for (h, f) in &self.components {
            if *h <= width {
                out[h - 1] += f.value(x);
            }
        }
        out
    }

    /// `Σ_h w_h ∂_h f_h(x)`: the divergence of `diag(w) F`.
    pub fn weighted_divergence(&self, x: &[f64], weights: &[f64]) -> f64 {
        self.components
            .iter()
            .map(|(h, f)| weights.get(h - 1).copied().unwrap_or(0.0) * f.partial(x, *h))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_gradient(f: &CylinderFunction, x: &[f64]) -> Vec<f64> {
        let k = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += k;
                b[i] -= k;
                (f.value(&a) - f.value(&b)) / (2.0 * k)
            })
            .collect()
    }

    #[test]
    fn gradients_match_central_differences() {
        let x = [0.3, -1.2, 0.7];
        let fs = [
            CylinderFunction::trig(vec![1.0, 0.5], 0.3),
            CylinderFunction::sine(vec![0.0, 0.0, 2.0]),
            CylinderFunction::PolyCoordinate { mode: 2, power: 3 },
            CylinderFunction::Custom(CustomFunction::new(
                "x1*x3",
                |x| x[0] * x[2],
                |x, g| {
                    g[0] = x[2];
                    g[2] = x[0];
                },
            )),
        ];
        for f in &fs {
            let g = f.gradient(&x);
            let fd = fd_gradient(f, &x);
            for i in 0..3 {
                assert!((g[i] - fd[i]).abs() < 1e-8, "{}: {g:?} vs {fd:?}", f.label());
                assert!((f.partial(&x, i + 1) - g[i]).abs() < 1e-14);
            }
            let h = [0.2, -0.1, 0.4];
            let dir: f64 = g.iter().zip(&h).map(|(a, b)| a * b).sum();
            assert!((f.directional(&x, &h) - dir).abs() < 1e-14);
        }
    }

    #[test]
    fn trig_is_bounded_and_constant_case() {
        let f = CylinderFunction::trig(vec![3.0, -2.0], 1.0);
        for i in 0..100 {
            let x = [i as f64 * 0.37 - 10.0, (i as f64).sin() * 5.0];
            assert!(f.value(&x).abs() <= 1.0);
            let g = f.gradient(&x);
            assert!(g.iter().map(|v| v * v).sum::<f64>() <= 13.0 + 1e-12);
        }
        let one = CylinderFunction::constant_one();
        assert_eq!(one.value(&[4.0]), 1.0);
        assert_eq!(one.gradient(&[4.0]), vec![0.0]);
        assert_eq!(one.support().unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn field_value_and_divergence() {
        let f = CylinderField::new(vec![
            (1, CylinderFunction::coordinate(1)),
            (2, CylinderFunction::trig(vec![0.0, 1.0], 0.0)),
        ])
        .unwrap();
        let x = [2.0, 0.5];
        assert_eq!(f.value(&x, 3), vec![2.0, 0.5f64.cos(), 0.0]);
        let div = f.weighted_divergence(&x, &[1.0, 2.0]);
        assert!((div - (1.0 - 2.0 * 0.5f64.sin())).abs() < 1e-15);
        assert!(CylinderField::constant(0).is_err());
    }

    #[test]
    fn serde_round_trip_of_trig() {
        let f = CylinderFunction::trig(vec![1.0, 2.0], 0.5);
        let s = serde_json::to_string(&f).unwrap();
        let back: CylinderFunction = serde_json::from_str(&s).unwrap();
        assert_eq!(back.value(&[0.1, 0.2]), f.value(&[0.1, 0.2]));
    }
}
