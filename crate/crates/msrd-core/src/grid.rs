//! Periodic step functions on N sites and their calculus: the projection
//! from functions on the unit interval, sup and L2 norms, forward/backward
//! gradients, the three-point Laplacian, its full eigenbasis, and the
//! discrete and continuous heat semigroups.

use crate::model::TrigPoly;
use std::ops::{Add, Mul, Sub};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("binary snapshot truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("binary snapshot declares {0} sites, which is not a sane size")]
    BadLength(u64),
    #[error("non-finite sample produced by the projected function at x = {0}")]
    NonFinite(f64),
}

/// Step function constant on each site I_j = ((j-1)/N, j/N], stored by
/// site value with periodic indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "a grid function needs at least one site");
        GridFunction { values }
    }

    pub fn constant(n: usize, c: f64) -> Self {
        Self::new(vec![c; n])
    }

    pub fn zero(n: usize) -> Self {
        Self::constant(n, 0.0)
    }

    /// Indicator of site j.
    pub fn indicator(n: usize, j: usize) -> Self {
        let mut v = vec![0.0; n];
        v[j] = 1.0;
        Self::new(v)
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Value at a possibly out-of-range index, wrapped periodically.
    pub fn at_wrapped(&self, i: isize) -> f64 {
        let n = self.values.len() as isize;
        self.values[i.rem_euclid(n) as usize]
    }

    /// Value at the point x in [0, 1): the site containing x.
    pub fn at_point(&self, x: f64) -> f64 {
        let n = self.values.len();
        // site j covers ((j-1)/N, j/N] with zero-based storage shifted by one,
        // so x = 0 wraps to the last site's closure; the half-open choice only
        // matters on a measure-zero set and we take the right-continuous cell
        let j = ((x.rem_euclid(1.0)) * n as f64).floor() as usize;
        self.values[j.min(n - 1)]
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| v.abs().max(m))
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Normalized inner product (1/N) sum f_j g_j, the L2 pairing of step
    /// functions.
    pub fn l2_inner(&self, other: &GridFunction) -> f64 {
        assert_eq!(self.n(), other.n());
        let mut acc = 0.0;
        for (a, b) in self.values.iter().zip(&other.values) {
            acc += a * b;
        }
        acc / self.n() as f64
    }

    pub fn l2_norm(&self) -> f64 {
        self.l2_inner(self).sqrt()
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    pub fn add_scaled_in_place(&mut self, other: &GridFunction, s: f64) {
        assert_eq!(self.n(), other.n());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
    }

    /// CSV rows "site,value" with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("site,value\n");
        for (j, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{j},{v}\n"));
        }
        out
    }

    /// Binary snapshot: site count as little-endian u64, then the values as
    /// little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.values.len());
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GridError> {
        if bytes.len() < 8 {
            return Err(GridError::Truncated { expected: 8, got: bytes.len() });
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        if n == 0 || n > (1 << 32) {
            return Err(GridError::BadLength(n));
        }
        let n = n as usize;
        let expected = 8 + 8 * n;
        if bytes.len() < expected {
            return Err(GridError::Truncated { expected, got: bytes.len() });
        }
        let values = (0..n)
            .map(|i| f64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap()))
            .collect();
        Ok(GridFunction { values })
    }
}

impl Add for &GridFunction {
    type Output = GridFunction;
    fn add(self, rhs: &GridFunction) -> GridFunction {
        let mut out = self.clone();
        out.add_scaled_in_place(rhs, 1.0);
        out
    }
}

impl Sub for &GridFunction {
    type Output = GridFunction;
    fn sub(self, rhs: &GridFunction) -> GridFunction {
        let mut out = self.clone();
        out.add_scaled_in_place(rhs, -1.0);
        out
    }
}

impl Mul<f64> for &GridFunction {
    type Output = GridFunction;
    fn mul(self, s: f64) -> GridFunction {
        let mut out = self.clone();
        out.scale_in_place(s);
        out
    }
}

/// State of both species on a common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PairField {
    pub u_c: GridFunction,
    pub u_d: GridFunction,
}

impl PairField {
    pub fn new(u_c: GridFunction, u_d: GridFunction) -> Self {
        assert_eq!(u_c.n(), u_d.n(), "components must share the grid");
        PairField { u_c, u_d }
    }

    pub fn n(&self) -> usize {
        self.u_c.n()
    }

    /// Sum of the component sup norms.
    pub fn norm_supsup(&self) -> f64 {
        self.u_c.sup_norm() + self.u_d.sup_norm()
    }
}

/// Site averages of an arbitrary function: value N * integral over I_j,
/// by 64-panel Gauss-Legendre per site (exact to machine precision for
/// smooth integrands, tolerance 1e-10 by construction for C4 ones).
pub fn project_pn(f: &dyn Fn(f64) -> f64, n: usize) -> Result<GridFunction, GridError> {
    // 4-point Gauss-Legendre nodes and weights on [-1, 1]
    const GL_X: [f64; 4] = [
        -0.8611363115940526,
        -0.33998104358485626,
        0.33998104358485626,
        0.8611363115940526,
    ];
    const GL_W: [f64; 4] = [
        0.34785484513745385,
        0.6521451548625461,
        0.6521451548625461,
        0.34785484513745385,
    ];
    const PANELS: usize = 64;
    let mut values = Vec::with_capacity(n);
    for j in 0..n {
        let lo = j as f64 / n as f64;
        let h = 1.0 / (n as f64 * PANELS as f64);
        let mut acc = 0.0;
        for p in 0..PANELS {
            let a = lo + p as f64 * h;
            let mid = a + 0.5 * h;
            for (x, w) in GL_X.iter().zip(GL_W) {
                let sample = f(mid + 0.5 * h * x);
                if !sample.is_finite() {
                    return Err(GridError::NonFinite(mid + 0.5 * h * x));
                }
                acc += w * sample;
            }
        }
        // quadrature weights sum to 2 per panel; rescale to the site average
        values.push(acc * 0.5 * h * n as f64);
    }
    Ok(GridFunction::new(values))
}

/// Site averages of a trigonometric polynomial, by exact antiderivative.
pub fn project_pn_exact(p: &TrigPoly, n: usize) -> GridFunction {
    GridFunction::new((0..n).map(|j| p.cell_average(n, j)).collect())
}

/// Three-point periodic Laplacian N^2 [f(j-1) - 2 f(j) + f(j+1)].
pub fn discrete_laplacian(f: &GridFunction) -> GridFunction {
    let n = f.n();
    let nf = (n * n) as f64;
    let v = f.values();
    let values = (0..n)
        .map(|j| {
            let left = v[(j + n - 1) % n];
            let right = v[(j + 1) % n];
            nf * (left - 2.0 * v[j] + right)
        })
        .collect();
    GridFunction::new(values)
}

/// Forward and backward periodic difference quotients,
/// N [f(j+1) - f(j)] and N [f(j) - f(j-1)]. Summation by parts on the ring
/// gives <fwd f, g>_2 = -<f, bwd g>_2, and the Laplacian factors as either
/// composition of the two.
pub fn discrete_gradients(f: &GridFunction) -> (GridFunction, GridFunction) {
    let n = f.n();
    let nf = n as f64;
    let v = f.values();
    let fwd = (0..n).map(|j| nf * (v[(j + 1) % n] - v[j])).collect();
    let bwd = (0..n).map(|j| nf * (v[j] - v[(j + n - 1) % n])).collect();
    (GridFunction::new(fwd), GridFunction::new(bwd))
}

/// One eigenpair of the discrete Laplacian.
#[derive(Debug, Clone)]
pub struct Mode {
    /// Frequency label in the even enumeration.
    pub m: usize,
    /// Eigenvalue of -Laplacian: beta = 2 N^2 (1 - cos(pi m / N)).
    pub beta: f64,
    pub func: GridFunction,
}

/// Full orthonormal eigenbasis of the discrete Laplacian on N sites: the
/// constant mode, a cos/sin pair for each even m strictly between 0 and N,
/// and the alternating-sign mode when N is even. Always N elements.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    n: usize,
    modes: Vec<Mode>,
}

impl SpectralBasis {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    /// Distinct frequency labels in ascending order.
    pub fn frequencies(&self) -> Vec<usize> {
        let mut ms: Vec<usize> = self.modes.iter().map(|e| e.m).collect();
        ms.dedup();
        ms
    }

    pub fn coefficients(&self, f: &GridFunction) -> Vec<f64> {
        self.modes.iter().map(|e| e.func.l2_inner(f)).collect()
    }

    pub fn reconstruct(&self, coeffs: &[f64]) -> GridFunction {
        assert_eq!(coeffs.len(), self.modes.len());
        let mut out = GridFunction::zero(self.n);
        for (c, e) in coeffs.iter().zip(&self.modes) {
            out.add_scaled_in_place(&e.func, *c);
        }
        out
    }
}

/// Build the eigenbasis; requires N >= 2.
pub fn spectral_basis(n: usize) -> SpectralBasis {
    assert!(n >= 2, "the spectral basis needs at least two sites");
    let beta_of = |m: usize| {
        2.0 * (n * n) as f64 * (1.0 - (std::f64::consts::PI * m as f64 / n as f64).cos())
    };
    let mut modes = Vec::with_capacity(n);
    modes.push(Mode { m: 0, beta: 0.0, func: GridFunction::constant(n, 1.0) });
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut m = 2;
    while m < n {
        let beta = beta_of(m);
        let ang = |j: usize| std::f64::consts::PI * (m * j) as f64 / n as f64;
        modes.push(Mode {
            m,
            beta,
            func: GridFunction::new((0..n).map(|j| sqrt2 * ang(j).cos()).collect()),
        });
        modes.push(Mode {
            m,
            beta,
            func: GridFunction::new((0..n).map(|j| sqrt2 * ang(j).sin()).collect()),
        });
        m += 2;
    }
    if n % 2 == 0 {
        modes.push(Mode {
            m: n,
            beta: beta_of(n),
            func: GridFunction::new((0..n).map(|j| if j % 2 == 0 { 1.0 } else { -1.0 }).collect()),
        });
    }
    SpectralBasis { n, modes }
}

/// Discrete heat semigroup by spectral expansion. Panics on negative t.
pub fn semigroup_apply(basis: &SpectralBasis, t: f64, f: &GridFunction) -> GridFunction {
    assert!(t >= 0.0, "the heat semigroup runs forward in time");
    assert_eq!(basis.n(), f.n());
    let mut out = GridFunction::zero(basis.n());
    for e in basis.modes() {
        let c = e.func.l2_inner(f) * (-e.beta * t).exp();
        out.add_scaled_in_place(&e.func, c);
    }
    out
}

/// Displacement kernel of the discrete heat semigroup:
/// [T_N(t) f]_j = (1/N) sum_i kappa[(i - j) mod N] f_i.
/// At t = 0 this is N at displacement 0 and zero elsewhere.
pub fn semigroup_kernel(n: usize, t: f64) -> Vec<f64> {
    assert!(t >= 0.0);
    let mut kappa = vec![0.0; n];
    for (d, k) in kappa.iter_mut().enumerate() {
        let mut acc = 1.0;
        let mut m = 2;
        while m < n {
            let beta = 2.0 * (n * n) as f64
                * (1.0 - (std::f64::consts::PI * m as f64 / n as f64).cos());
            acc += 2.0
                * (std::f64::consts::PI * (m * d) as f64 / n as f64).cos()
                * (-beta * t).exp();
            m += 2;
        }
        if n % 2 == 0 {
            let beta = 4.0 * (n * n) as f64;
            let sign = if d % 2 == 0 { 1.0 } else { -1.0 };
            acc += sign * (-beta * t).exp();
        }
        *k = acc;
    }
    kappa
}

/// Decay factor of the continuous heat semigroup on the frequency-m wave
/// cos(2 pi m x) or sin(2 pi m x).
pub fn heat_reference(t: f64, m: i64) -> f64 {
    assert!(t >= 0.0);
    let w = 2.0 * std::f64::consts::PI * m as f64;
    (-w * w * t).exp()
}

/// Spectral upper bound h_N(t) = 1 + 4 sum over positive frequencies of
/// e^{-2 beta t} (beta + 1); dominates the gradient-plus-value energy of the
/// evolved scaled site indicator.
pub fn h_n_bound(n: usize, t: f64) -> f64 {
    let mut acc = 1.0;
    let mut m = 2;
    // even frequencies up to N; parity keeps m = N out when N is odd
    while m <= n {
        let beta =
            2.0 * (n * n) as f64 * (1.0 - (std::f64::consts::PI * m as f64 / n as f64).cos());
        acc += 4.0 * (-2.0 * beta * t).exp() * (beta + 1.0);
        m += 2;
    }
    acc
}

/// Exact integral of the spectral bound: int_0^t h_N(s) ds =
/// t + 4 sum (beta + 1)(1 - e^{-2 beta t}) / (2 beta); grows like a
/// constant times N plus t.
pub fn h_n_integral(n: usize, t: f64) -> f64 {
    let mut acc = t;
    let mut m = 2;
    while m <= n {
        let beta =
            2.0 * (n * n) as f64 * (1.0 - (std::f64::consts::PI * m as f64 / n as f64).cos());
        acc += 4.0 * (beta + 1.0) * (1.0 - (-2.0 * beta * t).exp()) / (2.0 * beta);
        m += 2;
    }
    acc
}
