//! Polynomial bases on a bounded support with an excluded window.
//!
//! Estimation works in a Legendre basis orthonormal on the full support;
//! the change-of-basis matrix to shifted monomials `(y - anchor)^m` is kept
//! so coefficients can be reported in monomial form.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, BunchingError, Result};
use crate::linalg;

/// A finite union of disjoint closed intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pieces: Vec<(f64, f64)>,
}

impl Region {
    pub fn new(mut pieces: Vec<(f64, f64)>) -> Result<Self> {
        pieces.retain(|(a, b)| b > a);
        pieces.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pieces.windows(2) {
            if w[1].0 < w[0].1 {
                return invalid(format!("region pieces overlap: {:?} and {:?}", w[0], w[1]));
            }
        }
        if pieces.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return invalid("region endpoints must be finite");
        }
        Ok(Region { pieces })
    }

    pub fn pieces(&self) -> &[(f64, f64)] {
        &self.pieces
    }

    pub fn length(&self) -> f64 {
        self.pieces.iter().map(|(a, b)| b - a).sum()
    }

    pub fn contains(&self, y: f64) -> bool {
        self.pieces.iter().any(|&(a, b)| y >= a && y <= b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    /// Basis dimension.
    pub degree: usize,
    pub anchor: f64,
    pub lo: f64,
    pub hi: f64,
    pub region: Region,
}

impl BasisSpec {
    pub fn new(degree: usize, anchor: f64, lo: f64, hi: f64, region: Region) -> Result<Self> {
        if degree == 0 {
            return invalid("basis dimension must be at least 1");
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return invalid(format!("invalid support [{lo}, {hi}]"));
        }
        if region.pieces().iter().any(|&(a, b)| a < lo || b > hi) {
            return invalid("estimation region must lie inside the support");
        }
        if region.length() <= 0.0 {
            return invalid("estimation region has zero length");
        }
        Ok(BasisSpec { degree, anchor, lo, hi, region })
    }

    /// Support with the window `(k0, kbar1)` removed.
    pub fn censored(degree: usize, lo: f64, k0: f64, kbar1: f64, hi: f64) -> Result<Self> {
        if !(lo < k0 && k0 <= kbar1 && kbar1 < hi) {
            return invalid(format!("need lo < k0 <= kbar1 < hi, got {lo} {k0} {kbar1} {hi}"));
        }
        BasisSpec::new(degree, k0, lo, hi, Region::new(vec![(lo, k0), (kbar1, hi)])?)
    }

    pub fn full(degree: usize, anchor: f64, lo: f64, hi: f64) -> Result<Self> {
        BasisSpec::new(degree, anchor, lo, hi, Region::new(vec![(lo, hi)])?)
    }

    pub fn is_full_support(&self) -> bool {
        let covered = self.region.length();
        covered >= (self.hi - self.lo) * (1.0 - 1e-15)
    }

    pub fn legendre(&self) -> LegendreBasis {
        LegendreBasis::new(self.degree, self.lo, self.hi, self.anchor)
    }
}

/// Shifted monomials `(y - anchor)^m`, `m = 0..degree`.
pub fn monomial_basis(y: f64, spec: &BasisSpec) -> Vec<f64> {
    let h = y - spec.anchor;
    let mut out = Vec::with_capacity(spec.degree);
    let mut p = 1.0;
    for _ in 0..spec.degree {
        out.push(p);
        p *= h;
    }
    out
}

/// `int (y - anchor)^m dy` over `[a, b]`.
fn monomial_integral(m: usize, anchor: f64, a: f64, b: f64) -> f64 {
    let e = (m + 1) as i32;
    ((b - anchor).powi(e) - (a - anchor).powi(e)) / (m + 1) as f64
}

/// Gram matrices of the monomial basis over the full support and over the
/// estimation region.
pub fn gram_matrices(spec: &BasisSpec) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = spec.degree;
    let mut full = DMatrix::zeros(k, k);
    let mut region = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            full[(a, b)] = monomial_integral(a + b, spec.anchor, spec.lo, spec.hi);
            region[(a, b)] = spec
                .region
                .pieces()
                .iter()
                .map(|&(l, u)| monomial_integral(a + b, spec.anchor, l, u))
                .sum();
        }
    }
    if full.iter().chain(region.iter()).any(|v| !v.is_finite()) {
        return Err(BunchingError::Numerical(format!(
            "Gram entries overflow at dimension {k}; rescale the support or lower the dimension"
        )));
    }
    Ok((full, region))
}

fn binomial(n: u64, r: u64) -> Option<u128> {
    if r > n {
        return Some(0);
    }
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc.checked_mul((n - i) as u128)? / (i + 1) as u128;
    }
    Some(acc)
}

/// Diagonal entry `j` (zero-based) of the inverse of the `k x k` Hilbert
/// matrix on `[0, 1]`.
pub fn hilbert_inverse_diag(k: usize, j: usize) -> Result<f64> {
    if k == 0 || j >= k {
        return invalid(format!("index {j} out of range for dimension {k}"));
    }
    let (k, j) = (k as u64, j as u64);
    let overflow = || BunchingError::Numerical(format!("closed form overflows at dimension {k}"));
    let a = binomial(k + j, k - j - 1).ok_or_else(overflow)? as f64;
    let b = binomial(2 * j, j).ok_or_else(overflow)? as f64;
    Ok((2 * j + 1) as f64 * a * a * b * b)
}

/// Diagonal entry `j` of the inverse Gram matrix of `1, u, ..., u^{k-1}`
/// over `[-1, 1]`, from the even/odd split of the basis.
pub fn centered_gram_inverse_diag(k: usize, j: usize) -> Result<f64> {
    if k == 0 || j >= k {
        return invalid(format!("index {j} out of range for dimension {k}"));
    }
    let fact = |n: usize| (1..=n).fold(1.0f64, |acc, i| acc * i as f64);
    let mut sum = 0.0;
    for r in 0..=((k - j - 1) / 2) {
        let ratio = fact(2 * j + 2 * r) / (fact(r) * fact(j + r));
        sum += ((2 * r + j) as f64 + 0.5) * 16f64.powi(-(r as i32)) * ratio * ratio;
    }
    Ok(sum / (4f64.powi(j as i32) * fact(j) * fact(j)))
}

/// Diagonal entry `j` of the inverse monomial Gram matrix on
/// `[center - half_width, center + half_width]` anchored at the center.
pub fn symmetric_gram_inverse_diag(k: usize, j: usize, half_width: f64) -> Result<f64> {
    if !(half_width > 0.0) {
        return invalid("half width must be positive");
    }
    Ok(centered_gram_inverse_diag(k, j)? / half_width.powi(2 * j as i32 + 1))
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    for i in 0..m.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for n in 2..=m {
                let p2 = ((2 * n - 1) as f64 * x * p1 - (n - 1) as f64 * p0) / n as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = m as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[m - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[m - 1 - i] = w;
    }
    (nodes, weights)
}

/// Legendre polynomials orthonormal on `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LegendreBasis {
    pub degree: usize,
    pub lo: f64,
    pub len: f64,
    pub anchor: f64,
}

impl LegendreBasis {
    pub fn new(degree: usize, lo: f64, hi: f64, anchor: f64) -> Self {
        LegendreBasis { degree, lo, len: hi - lo, anchor }
    }

    fn scaled(&self, y: f64) -> f64 {
        2.0 * (y - self.lo) / self.len - 1.0
    }

    /// Raw Legendre values `P_0..P_{n-1}` at scaled point `s`.
    fn raw(s: f64, n: usize, out: &mut [f64]) {
        if n == 0 {
            return;
        }
        out[0] = 1.0;
        if n > 1 {
            out[1] = s;
        }
        for m in 1..n.saturating_sub(1) {
            out[m + 1] = ((2 * m + 1) as f64 * s * out[m] - m as f64 * out[m - 1]) / (m + 1) as f64;
        }
    }

    pub fn eval_into(&self, y: f64, out: &mut [f64]) {
        Self::raw(self.scaled(y), self.degree, out);
        for (m, v) in out.iter_mut().enumerate().take(self.degree) {
            *v *= ((2 * m + 1) as f64 / self.len).sqrt();
        }
    }

    pub fn eval(&self, y: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.degree];
        self.eval_into(y, &mut out);
        out
    }

    /// `int_a^b o(y) dy`, exact.
    pub fn integral(&self, a: f64, b: f64) -> DVector<f64> {
        let n = self.degree;
        let anti = |y: f64| {
            let s = self.scaled(y);
            let mut p = vec![0.0; n + 1];
            Self::raw(s, n + 1, &mut p);
            (0..n)
                .map(|m| if m == 0 { s } else { (p[m + 1] - p[m - 1]) / (2 * m + 1) as f64 })
                .collect::<Vec<_>>()
        };
        let (fa, fb) = (anti(a), anti(b));
        DVector::from_iterator(
            n,
            (0..n).map(|m| (fb[m] - fa[m]) * 0.5 * self.len * ((2 * m + 1) as f64 / self.len).sqrt()),
        )
    }

    pub fn region_integral(&self, region: &Region) -> DVector<f64> {
        region
            .pieces()
            .iter()
            .fold(DVector::zeros(self.degree), |acc, &(a, b)| acc + self.integral(a, b))
    }

    /// Matrix `T` with `o(y) = T z(y)`, where `z` holds shifted monomials
    /// `(y - anchor)^m`.
    pub fn to_monomial(&self) -> DMatrix<f64> {
        let n = self.degree;
        let alpha = 2.0 / self.len;
        let beta = 2.0 * (self.anchor - self.lo) / self.len - 1.0;
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        rows.push(vec![1.0]);
        if n > 1 {
            rows.push(vec![beta, alpha]);
        }
        for m in 1..n.saturating_sub(1) {
            let mut next = vec![0.0; m + 2];
            for (i, c) in rows[m].iter().enumerate() {
                next[i] += (2 * m + 1) as f64 * beta * c;
                next[i + 1] += (2 * m + 1) as f64 * alpha * c;
            }
            for (i, c) in rows[m - 1].iter().enumerate() {
                next[i] -= m as f64 * c;
            }
            for v in next.iter_mut() {
                *v /= (m + 1) as f64;
            }
            rows.push(next);
        }
        let mut t = DMatrix::zeros(n, n);
        for (m, row) in rows.iter().enumerate() {
            let norm = ((2 * m + 1) as f64 / self.len).sqrt();
            for (i, c) in row.iter().enumerate() {
                t[(m, i)] = c * norm;
            }
        }
        t
    }

    /// `int_S o o' dy` by Gauss-Legendre quadrature, exact for the degrees
    /// involved.
    pub fn region_gram(&self, region: &Region) -> DMatrix<f64> {
        let n = self.degree;
        let (nodes, weights) = gauss_legendre(n + 1);
        let mut g = DMatrix::zeros(n, n);
        let mut o = vec![0.0; n];
        for &(a, b) in region.pieces() {
            let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
            for (x, w) in nodes.iter().zip(&weights) {
                self.eval_into(mid + half * x, &mut o);
                let v = DVector::from_column_slice(&o);
                g += (&v * v.transpose()) * (w * half);
            }
        }
        g
    }
}

/// Smallest eigenvalue of the region Gram matrix after whitening by the
/// full-support Gram matrix.
pub fn extrapolation_norm(spec: &BasisSpec) -> Result<f64> {
    if spec.is_full_support() {
        return Ok(1.0);
    }
    let g = spec.legendre().region_gram(&spec.region);
    let eig = SymmetricEigen::new(g);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-12 {
        return Err(BunchingError::Numerical(format!(
            "whitened region Gram is indefinite (smallest eigenvalue {min:.3e}); lower the basis dimension"
        )));
    }
    Ok(min.max(0.0))
}

/// Matrix `W` with `o = W z` orthonormal on the full support, built from the
/// symmetric inverse square root of the Gram matrix of rescaled monomials.
pub fn symmetric_orthonormalizer(spec: &BasisSpec) -> Result<DMatrix<f64>> {
    let len = spec.hi - spec.lo;
    let unit = BasisSpec::full(
        spec.degree,
        0.0,
        (spec.lo - spec.anchor) / len,
        (spec.hi - spec.anchor) / len,
    )?;
    let (h, _) = gram_matrices(&unit)?;
    let root = linalg::inverse_sqrt_spd(&h, "rescaled Gram matrix")?;
    let d_inv = DMatrix::from_diagonal(&DVector::from_iterator(
        spec.degree,
        (0..spec.degree).map(|m| len.powi(-(m as i32))),
    ));
    Ok(root * d_inv / len.sqrt())
}
