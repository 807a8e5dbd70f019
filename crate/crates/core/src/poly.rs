//! Dense univariate polynomials expanded around an anchor point.

use nalgebra::Complex;
use serde::{Deserialize, Serialize};

/// `p(y) = sum_m coeffs[m] * (y - anchor)^m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub anchor: f64,
    pub coeffs: Vec<f64>,
}

impl Polynomial {
    pub fn new(anchor: f64, coeffs: Vec<f64>) -> Self {
        Polynomial { anchor, coeffs }
    }

    pub fn constant(anchor: f64, c: f64) -> Self {
        Polynomial { anchor, coeffs: vec![c] }
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    pub fn eval(&self, y: f64) -> f64 {
        let h = y - self.anchor;
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * h + c)
    }

    pub fn eval_complex(&self, z: Complex<f64>) -> Complex<f64> {
        let h = z - self.anchor;
        self.coeffs
            .iter()
            .rev()
            .fold(Complex::new(0.0, 0.0), |acc, c| acc * h + c)
    }

    pub fn derivative(&self) -> Polynomial {
        let coeffs = if self.coeffs.len() <= 1 {
            vec![0.0]
        } else {
            self.coeffs
                .iter()
                .enumerate()
                .skip(1)
                .map(|(m, c)| m as f64 * c)
                .collect()
        };
        Polynomial { anchor: self.anchor, coeffs }
    }

    /// Same polynomial expanded around `anchor`.
    pub fn recenter(&self, anchor: f64) -> Polynomial {
        let h = anchor - self.anchor;
        let mut c = self.coeffs.clone();
        let n = c.len();
        for i in 0..n {
            for j in (i..n.saturating_sub(1)).rev() {
                c[j] += h * c[j + 1];
            }
        }
        Polynomial { anchor, coeffs: c }
    }

    /// Product, expanded around `self.anchor`.
    pub fn mul(&self, other: &Polynomial) -> Polynomial {
        let other = if other.anchor == self.anchor {
            other.clone()
        } else {
            other.recenter(self.anchor)
        };
        if self.coeffs.is_empty() || other.coeffs.is_empty() {
            return Polynomial::constant(self.anchor, 0.0);
        }
        let mut out = vec![0.0; self.coeffs.len() + other.coeffs.len() - 1];
        for (i, a) in self.coeffs.iter().enumerate() {
            for (j, b) in other.coeffs.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Polynomial { anchor: self.anchor, coeffs: out }
    }

    pub fn add(&self, other: &Polynomial) -> Polynomial {
        self.combine(other, 1.0)
    }

    pub fn sub(&self, other: &Polynomial) -> Polynomial {
        self.combine(other, -1.0)
    }

    fn combine(&self, other: &Polynomial, sign: f64) -> Polynomial {
        let other = if other.anchor == self.anchor {
            other.clone()
        } else {
            other.recenter(self.anchor)
        };
        let n = self.coeffs.len().max(other.coeffs.len());
        let coeffs = (0..n)
            .map(|m| {
                self.coeffs.get(m).copied().unwrap_or(0.0)
                    + sign * other.coeffs.get(m).copied().unwrap_or(0.0)
            })
            .collect();
        Polynomial { anchor: self.anchor, coeffs }
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        Polynomial {
            anchor: self.anchor,
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
        }
    }

    /// Exact integral over `[a, b]`.
    pub fn integrate(&self, a: f64, b: f64) -> f64 {
        let (ha, hb) = (a - self.anchor, b - self.anchor);
        let anti = |h: f64| {
            self.coeffs
                .iter()
                .enumerate()
                .rev()
                .fold(0.0, |acc, (m, c)| acc * h + c / (m + 1) as f64)
                * h
        };
        anti(hb) - anti(ha)
    }

    /// `m`-th derivative evaluated at `y`.
    pub fn derivative_at(&self, m: usize, y: f64) -> f64 {
        let shifted = self.recenter(y);
        let mut fact = 1.0;
        for i in 1..=m {
            fact *= i as f64;
        }
        shifted.coeffs.get(m).copied().unwrap_or(0.0) * fact
    }
}
