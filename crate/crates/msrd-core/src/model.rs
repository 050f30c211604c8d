//! Reaction network definition and validation: reaction classes, polynomial
//! rates, jump sizes, the spatial correlation kernel, the smoothing cutoff,
//! and the network file format.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parse error at line {line}, column {col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },
    #[error("expression error: {0}")]
    Expr(String),
    #[error("negative input to rate evaluation: u_c = {0}, u_d = {1}")]
    NegativeRateInput(f64, f64),
    #[error("unknown kernel '{name}', registered kernels: {known}")]
    UnknownKernel { name: String, known: String },
    #[error("kernel table: {0}")]
    KernelTable(String),
    #[error("scaling: {0}")]
    Scaling(String),
}

/// Speed/species classification of a reaction.
///
/// Fast classes run at rate mu times their rate law and move C by gamma_c/mu;
/// slow classes run at their bare rate law and can move D. A slow reaction
/// fired at one site is spread over all sites by the correlation kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReactionClass {
    /// Fast, touches C only; rate law may depend on u_C only.
    FastC,
    /// Fast, rate may depend on both species, but the jump leaves D unchanged.
    FastMixed,
    /// Slow, rate may depend on both species, jump may move both.
    SlowMixed,
    /// Slow, touches D only; rate law may depend on u_D only.
    SlowD,
}

impl ReactionClass {
    pub fn is_fast(self) -> bool {
        matches!(self, ReactionClass::FastC | ReactionClass::FastMixed)
    }

    pub fn is_slow(self) -> bool {
        !self.is_fast()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ReactionClass::FastC => "fast_c",
            ReactionClass::FastMixed => "fast_mixed",
            ReactionClass::SlowMixed => "slow_mixed",
            ReactionClass::SlowD => "slow_d",
        }
    }
}

impl fmt::Display for ReactionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One monomial coeff * u_C^deg_c * u_D^deg_d.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Monomial {
    pub coeff: f64,
    pub deg_c: u32,
    pub deg_d: u32,
}

/// Polynomial rate law in the two site values, lambda(u_C, u_D).
///
/// Kept as a term list in source order; the canonical text form (see
/// `Display`) re-parses to the same list, which is what makes network files
/// round-trip exactly.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolynomialRate {
    pub terms: Vec<Monomial>,
}

impl PolynomialRate {
    pub fn constant(c: f64) -> Self {
        PolynomialRate {
            terms: vec![Monomial { coeff: c, deg_c: 0, deg_d: 0 }],
        }
    }

    /// Evaluation without the sign guard, for hot loops that maintain
    /// non-negative states by construction.
    pub fn eval_unchecked(&self, u_c: f64, u_d: f64) -> f64 {
        let mut acc = 0.0;
        for t in &self.terms {
            acc += t.coeff * u_c.powi(t.deg_c as i32) * u_d.powi(t.deg_d as i32);
        }
        acc
    }

    /// Checked evaluation; rejects negative inputs.
    pub fn eval(&self, u_c: f64, u_d: f64) -> Result<f64, ModelError> {
        if u_c < 0.0 || u_d < 0.0 {
            return Err(ModelError::NegativeRateInput(u_c, u_d));
        }
        Ok(self.eval_unchecked(u_c, u_d))
    }

    pub fn depends_on_c(&self) -> bool {
        self.terms.iter().any(|t| t.coeff != 0.0 && t.deg_c > 0)
    }

    pub fn depends_on_d(&self) -> bool {
        self.terms.iter().any(|t| t.coeff != 0.0 && t.deg_d > 0)
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        parse_rate(text)
    }
}

impl fmt::Display for PolynomialRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return f.write_str("0");
        }
        for (i, t) in self.terms.iter().enumerate() {
            let mag = t.coeff.abs();
            if i == 0 {
                if t.coeff < 0.0 {
                    f.write_str("-")?;
                }
            } else if t.coeff < 0.0 {
                f.write_str(" - ")?;
            } else {
                f.write_str(" + ")?;
            }
            let mut factors: Vec<String> = Vec::new();
            if mag != 1.0 || (t.deg_c == 0 && t.deg_d == 0) {
                factors.push(format!("{mag}"));
            }
            if t.deg_c == 1 {
                factors.push("uC".into());
            } else if t.deg_c > 1 {
                factors.push(format!("uC^{}", t.deg_c));
            }
            if t.deg_d == 1 {
                factors.push("uD".into());
            } else if t.deg_d > 1 {
                factors.push(format!("uD^{}", t.deg_d));
            }
            f.write_str(&factors.join("*"))?;
        }
        Ok(())
    }
}

impl Serialize for PolynomialRate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PolynomialRate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        PolynomialRate::parse(&text).map_err(serde::de::Error::custom)
    }
}

/// Evaluate a rate law; rejects negative inputs.
pub fn eval_rate(rate: &PolynomialRate, u_c: f64, u_d: f64) -> Result<f64, ModelError> {
    rate.eval(u_c, u_d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wave {
    Cos,
    Sin,
}

/// One oscillatory term coeff * cos(2 pi k x) or coeff * sin(2 pi k x).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrigTerm {
    pub coeff: f64,
    /// Full cycles over the unit interval; text form writes 2k as the
    /// multiple of pi, so `cos(2*pi*x)` has k = 1.
    pub cycles: u32,
    pub wave: Wave,
}

/// Trigonometric polynomial on the unit circle, used for closed-form initial
/// data. Exactly integrable over any interval.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrigPoly {
    pub constant: f64,
    pub terms: Vec<TrigTerm>,
}

impl TrigPoly {
    pub fn constant(c: f64) -> Self {
        TrigPoly { constant: c, terms: Vec::new() }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let mut acc = self.constant;
        for t in &self.terms {
            let arg = 2.0 * std::f64::consts::PI * t.cycles as f64 * x;
            acc += t.coeff
                * match t.wave {
                    Wave::Cos => arg.cos(),
                    Wave::Sin => arg.sin(),
                };
        }
        acc
    }

    /// Antiderivative with value 0 at x = 0.
    pub fn antiderivative(&self, x: f64) -> f64 {
        let mut acc = self.constant * x;
        for t in &self.terms {
            let w = 2.0 * std::f64::consts::PI * t.cycles as f64;
            if t.cycles == 0 {
                // cos(0) = 1 integrates linearly, sin(0) = 0 contributes nothing
                if t.wave == Wave::Cos {
                    acc += t.coeff * x;
                }
                continue;
            }
            acc += t.coeff
                * match t.wave {
                    Wave::Cos => (w * x).sin() / w,
                    Wave::Sin => (1.0 - (w * x).cos()) / w,
                };
        }
        acc
    }

    /// Exact average over the site ((j-1)/n, j/n], zero-based j.
    pub fn cell_average(&self, n: usize, j: usize) -> f64 {
        let lo = j as f64 / n as f64;
        let hi = (j + 1) as f64 / n as f64;
        n as f64 * (self.antiderivative(hi) - self.antiderivative(lo))
    }

    /// Minimum over a uniform sample grid, used for non-negativity checks.
    pub fn min_on_grid(&self, samples: usize) -> f64 {
        (0..samples)
            .map(|i| self.eval(i as f64 / samples as f64))
            .fold(f64::INFINITY, f64::min)
    }

    /// Upper bound on the sup norm: |constant| plus the coefficient masses.
    pub fn sup_bound(&self) -> f64 {
        self.constant.abs() + self.terms.iter().map(|t| t.coeff.abs()).sum::<f64>()
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        parse_trig(text)
    }
}

impl fmt::Display for TrigPoly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut wrote = false;
        if self.constant != 0.0 || self.terms.is_empty() {
            write!(f, "{}", self.constant)?;
            wrote = true;
        }
        for t in &self.terms {
            let mag = t.coeff.abs();
            if wrote {
                f.write_str(if t.coeff < 0.0 { " - " } else { " + " })?;
            } else if t.coeff < 0.0 {
                f.write_str("-")?;
            }
            wrote = true;
            if mag != 1.0 {
                write!(f, "{mag}*")?;
            }
            let name = match t.wave {
                Wave::Cos => "cos",
                Wave::Sin => "sin",
            };
            write!(f, "{name}({}*pi*x)", 2 * t.cycles)?;
        }
        Ok(())
    }
}

impl Serialize for TrigPoly {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TrigPoly {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        TrigPoly::parse(&text).map_err(serde::de::Error::custom)
    }
}

/// One reaction: class, jump sizes, rate law.
///
/// gamma_c counts molecules of C created per firing (the site value moves by
/// gamma_c/mu for fast reactions); gamma_d counts molecules of D.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reaction {
    pub class: ReactionClass,
    #[serde(default)]
    pub gamma_c: i64,
    #[serde(default)]
    pub gamma_d: i64,
    pub rate: PolynomialRate,
}

/// Spatial correlation kernel: 1-periodic, even, maximal at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Kernel {
    /// a(x) = 1.
    ConstantBox,
    /// a(x) = 1 + cos(2 pi x).
    RaisedCosine,
    /// Piecewise-constant 1-periodic profile; `table[i]` is the value on the
    /// panel centered at i/M. Must be even (table[i] = table[M-i]) with max
    /// at 0.
    TableLookup { table: Vec<f64> },
}

/// Behavior of a correlation kernel shape. All site weights derive from the
/// two antiderivatives, so every implementation is exactly integrable.
pub trait CorrelationKernel: Send + Sync {
    fn name(&self) -> &'static str;
    /// Peak value a(0).
    fn peak(&self) -> f64;
    fn eval(&self, x: f64) -> f64;
    /// A(x) = integral of a from 0 to x, valid on all of R.
    fn antiderivative(&self, x: f64) -> f64;
    /// A2(x) = integral of A from 0 to x, valid on all of R.
    fn antiderivative2(&self, x: f64) -> f64;
    /// Mass over one period.
    fn mass(&self) -> f64 {
        self.antiderivative(1.0)
    }
    /// Points in [0, 1) where the profile jumps; quadrature against the
    /// kernel splits integration panels there. Empty for smooth shapes.
    fn discontinuities(&self) -> Vec<f64> {
        Vec::new()
    }
}

struct BoxKernel;

impl CorrelationKernel for BoxKernel {
    fn name(&self) -> &'static str {
        "constant_box"
    }
    fn peak(&self) -> f64 {
        1.0
    }
    fn eval(&self, _x: f64) -> f64 {
        1.0
    }
    fn antiderivative(&self, x: f64) -> f64 {
        x
    }
    fn antiderivative2(&self, x: f64) -> f64 {
        0.5 * x * x
    }
}

struct CosineKernel;

impl CorrelationKernel for CosineKernel {
    fn name(&self) -> &'static str {
        "raised_cosine"
    }
    fn peak(&self) -> f64 {
        2.0
    }
    fn eval(&self, x: f64) -> f64 {
        1.0 + (2.0 * std::f64::consts::PI * x).cos()
    }
    fn antiderivative(&self, x: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI;
        x + (w * x).sin() / w
    }
    fn antiderivative2(&self, x: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI;
        0.5 * x * x + (1.0 - (w * x).cos()) / (w * w)
    }
}

/// Piecewise-constant kernel with exact piecewise-linear/quadratic
/// antiderivatives, extended periodically. Panel i is centered at i/M, so
/// the evenness rule table[i] = table[M-i] makes `a` a genuinely even
/// function; then A is odd and A2 even, which handles negative arguments.
struct TableKernel {
    table: Vec<f64>,
    /// Segment breakpoints 0 = x_0 < ... < x_K = 1 with constant values
    /// seg_value[k] on (x_k, x_{k+1}); the half panels at both ends carry
    /// table[0].
    seg_x: Vec<f64>,
    seg_value: Vec<f64>,
    /// prefix[k] = integral of a over [0, x_k].
    prefix: Vec<f64>,
    /// prefix2[k] = integral of A over [0, x_k].
    prefix2: Vec<f64>,
}

impl TableKernel {
    fn new(table: Vec<f64>) -> Self {
        let m = table.len();
        let mut seg_x = vec![0.0];
        let mut seg_value = Vec::new();
        for i in 0..=m {
            seg_value.push(table[i % m]);
            let hi = ((i as f64 + 0.5) / m as f64).min(1.0);
            seg_x.push(hi);
        }
        let segs = seg_value.len();
        let mut prefix = vec![0.0; segs + 1];
        let mut prefix2 = vec![0.0; segs + 1];
        for k in 0..segs {
            let h = seg_x[k + 1] - seg_x[k];
            prefix[k + 1] = prefix[k] + seg_value[k] * h;
            prefix2[k + 1] = prefix2[k] + prefix[k] * h + 0.5 * seg_value[k] * h * h;
        }
        TableKernel { table, seg_x, seg_value, prefix, prefix2 }
    }

    fn segment(&self, r: f64) -> usize {
        // r in [0, 1]; segments are short, linear scan is fine
        let mut k = 0;
        while k + 1 < self.seg_value.len() && r >= self.seg_x[k + 1] {
            k += 1;
        }
        k
    }

    fn a01(&self, r: f64) -> f64 {
        let k = self.segment(r);
        self.prefix[k] + self.seg_value[k] * (r - self.seg_x[k])
    }

    fn a2_01(&self, r: f64) -> f64 {
        let k = self.segment(r);
        let dr = r - self.seg_x[k];
        self.prefix2[k] + self.prefix[k] * dr + 0.5 * self.seg_value[k] * dr * dr
    }
}

impl CorrelationKernel for TableKernel {
    fn name(&self) -> &'static str {
        "table_lookup"
    }
    fn peak(&self) -> f64 {
        self.table[0]
    }
    fn discontinuities(&self) -> Vec<f64> {
        // interior segment edges; 0 and 1 are the same periodic point and
        // the profile is continuous across it only by accident, so include it
        self.seg_x.iter().map(|x| x.rem_euclid(1.0)).collect()
    }
    fn eval(&self, x: f64) -> f64 {
        let r = x.rem_euclid(1.0);
        let m = self.table.len();
        let idx = ((r * m as f64 + 0.5).floor() as usize) % m;
        self.table[idx]
    }
    fn antiderivative(&self, x: f64) -> f64 {
        if x < 0.0 {
            return -self.antiderivative(-x);
        }
        let k = x.floor();
        let r = x - k;
        k * self.mass() + self.a01(r)
    }
    fn antiderivative2(&self, x: f64) -> f64 {
        if x < 0.0 {
            return self.antiderivative2(-x);
        }
        let k = x.floor();
        let r = x - k;
        // integral of A over [0, k] plus the tail; A(t + j) = A(t) + j*mass
        let a2_full = self.prefix2[self.seg_value.len()];
        let whole = k * a2_full + self.mass() * k * (k - 1.0) / 2.0;
        whole + self.a2_01(r) + r * k * self.mass()
    }
    fn mass(&self) -> f64 {
        self.prefix[self.seg_value.len()]
    }
}

type KernelCtor = fn(Option<Vec<f64>>) -> Result<Kernel, ModelError>;

fn make_box(table: Option<Vec<f64>>) -> Result<Kernel, ModelError> {
    match table {
        None => Ok(Kernel::ConstantBox),
        Some(_) => Err(ModelError::KernelTable(
            "constant_box takes no table".into(),
        )),
    }
}

fn make_cosine(table: Option<Vec<f64>>) -> Result<Kernel, ModelError> {
    match table {
        None => Ok(Kernel::RaisedCosine),
        Some(_) => Err(ModelError::KernelTable(
            "raised_cosine takes no table".into(),
        )),
    }
}

fn make_table(table: Option<Vec<f64>>) -> Result<Kernel, ModelError> {
    let table = table.ok_or_else(|| ModelError::KernelTable("table_lookup needs a table".into()))?;
    let k = Kernel::TableLookup { table };
    for v in validate_kernel(&k) {
        return Err(ModelError::KernelTable(v.message));
    }
    Ok(k)
}

/// Kernel registry: shapes selectable by name from configuration.
static KERNEL_REGISTRY: &[(&str, KernelCtor)] = &[
    ("constant_box", make_box),
    ("raised_cosine", make_cosine),
    ("table_lookup", make_table),
];

pub fn registered_kernels() -> Vec<&'static str> {
    KERNEL_REGISTRY.iter().map(|(n, _)| *n).collect()
}

pub fn kernel_by_name(name: &str, table: Option<Vec<f64>>) -> Result<Kernel, ModelError> {
    for (n, ctor) in KERNEL_REGISTRY {
        if *n == name {
            return ctor(table);
        }
    }
    Err(ModelError::UnknownKernel {
        name: name.into(),
        known: registered_kernels().join(", "),
    })
}

/// Materialize the shape behind its behavior trait.
pub fn kernel_impl(kernel: &Kernel) -> Box<dyn CorrelationKernel> {
    match kernel {
        Kernel::ConstantBox => Box::new(BoxKernel),
        Kernel::RaisedCosine => Box::new(CosineKernel),
        Kernel::TableLookup { table } => Box::new(TableKernel::new(table.clone())),
    }
}

fn validate_kernel(kernel: &Kernel) -> Vec<Violation> {
    let mut out = Vec::new();
    if let Kernel::TableLookup { table } = kernel {
        let m = table.len();
        if m == 0 {
            out.push(Violation::global("table_lookup table must be non-empty"));
            return out;
        }
        if table.iter().any(|v| !v.is_finite() || *v < 0.0) {
            out.push(Violation::global(
                "table_lookup values must be finite and non-negative",
            ));
        }
        let peak = table[0];
        if table.iter().any(|v| *v > peak) {
            out.push(Violation::global("kernel must attain its maximum at 0"));
        }
        for i in 1..m {
            if (table[i] - table[m - i]).abs() > 1e-12 * peak.max(1.0) {
                out.push(Violation::global("kernel table must be even: table[i] = table[M-i]"));
                break;
            }
        }
    }
    out
}

/// Cubic smoothstep cutoff: 0 below 0, 3y^2 - 2y^3 on (0,1), 1 above 1.
/// Monotone, C1, Lipschitz constant 3/2 (slope maximal at y = 1/2).
pub fn theta(y: f64) -> f64 {
    if y <= 0.0 {
        0.0
    } else if y >= 1.0 {
        1.0
    } else {
        y * y * (3.0 - 2.0 * y)
    }
}

/// The fixed smoothing cutoff, as a named unit type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SmoothingTheta;

impl SmoothingTheta {
    pub fn eval(&self, y: f64) -> f64 {
        theta(y)
    }
}

pub fn theta_eval(_theta: &SmoothingTheta, y: f64) -> f64 {
    theta(y)
}

/// Lattice size N and density parameter mu.
///
/// The standard constructor requires N >= 2 (a real ring) and mu >= 1.
/// The degenerate single-site ring, where the diffusion jump vector is
/// identically zero, is available through [`ScalingParams::single_site`] for
/// exactly solvable validation runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    n_sites: usize,
    mu: f64,
}

impl ScalingParams {
    pub fn new(n_sites: usize, mu: f64) -> Result<Self, ModelError> {
        if n_sites < 2 {
            return Err(ModelError::Scaling(format!(
                "n_sites must be >= 2, got {n_sites} (single_site covers the degenerate ring)"
            )));
        }
        Self::checked(n_sites, mu)
    }

    pub fn single_site(mu: f64) -> Result<Self, ModelError> {
        Self::checked(1, mu)
    }

    fn checked(n_sites: usize, mu: f64) -> Result<Self, ModelError> {
        if !(mu >= 1.0) || !mu.is_finite() {
            return Err(ModelError::Scaling(format!("mu must be finite and >= 1, got {mu}")));
        }
        Ok(ScalingParams { n_sites, mu })
    }

    pub fn n(&self) -> usize {
        self.n_sites
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }
}

/// Full network: reactions, kernel, cutoff, species labels, and closed-form
/// initial data for both species.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    pub species_fast: String,
    pub species_slow: String,
    pub reactions: Vec<Reaction>,
    pub kernel: Kernel,
    pub theta: SmoothingTheta,
    pub initial_c: TrigPoly,
    pub initial_d: TrigPoly,
}

impl NetworkSpec {
    /// Largest per-class sum of |gamma_c| over classes that move C.
    pub fn gamma_bar_c(&self) -> f64 {
        let mut fast_c = 0.0;
        let mut fast_mixed = 0.0;
        let mut slow_mixed = 0.0;
        for r in &self.reactions {
            let g = r.gamma_c.unsigned_abs() as f64;
            match r.class {
                ReactionClass::FastC => fast_c += g,
                ReactionClass::FastMixed => fast_mixed += g,
                ReactionClass::SlowMixed => slow_mixed += g,
                ReactionClass::SlowD => {}
            }
        }
        fast_c.max(fast_mixed).max(slow_mixed)
    }

    /// Largest per-class sum of |gamma_d| over classes that move D.
    pub fn gamma_bar_d(&self) -> f64 {
        let mut slow_mixed = 0.0;
        let mut slow_d = 0.0;
        for r in &self.reactions {
            let g = r.gamma_d.unsigned_abs() as f64;
            match r.class {
                ReactionClass::SlowMixed => slow_mixed += g,
                ReactionClass::SlowD => slow_d += g,
                _ => {}
            }
        }
        slow_mixed.max(slow_d)
    }
}

/// Pointwise drift of the fast reactions on C:
/// F(y) = sum over fast reactions of gamma_c * lambda(y).
pub fn fast_debit_point(spec: &NetworkSpec, y_c: f64, y_d: f64) -> f64 {
    let mut acc = 0.0;
    for r in &spec.reactions {
        if r.class.is_fast() {
            acc += r.gamma_c as f64 * r.rate.eval_unchecked(y_c, y_d);
        }
    }
    acc
}

/// Pointwise production density of the slow reactions on D:
/// g(y) = sum over slow reactions of gamma_d * lambda(y).
pub fn slow_debit_point(spec: &NetworkSpec, y_c: f64, y_d: f64) -> f64 {
    let mut acc = 0.0;
    for r in &spec.reactions {
        if r.class.is_slow() {
            acc += r.gamma_d as f64 * r.rate.eval_unchecked(y_c, y_d);
        }
    }
    acc
}

/// Same sum with absolute weights, |g|(y), the growth of which is what the
/// linear-growth check bounds.
pub fn slow_debit_abs_point(spec: &NetworkSpec, y_c: f64, y_d: f64) -> f64 {
    let mut acc = 0.0;
    for r in &spec.reactions {
        if r.class.is_slow() {
            acc += r.gamma_d.unsigned_abs() as f64 * r.rate.eval_unchecked(y_c, y_d);
        }
    }
    acc
}

/// One violated constraint; `reaction` indexes into `reactions` when the
/// violation is local to one reaction.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub reaction: Option<usize>,
    pub message: String,
}

impl Violation {
    fn global(message: impl Into<String>) -> Self {
        Violation { reaction: None, message: message.into() }
    }

    fn at(reaction: usize, message: impl Into<String>) -> Self {
        Violation { reaction: Some(reaction), message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.reaction {
            Some(i) => write!(f, "reaction {i}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Check every structural constraint; an empty list means the network is
/// well formed. Violations are data, not errors.
pub fn validate_network(spec: &NetworkSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    if spec.reactions.is_empty() {
        out.push(Violation::global("network must contain at least one reaction"));
    }
    for (i, r) in spec.reactions.iter().enumerate() {
        match r.class {
            ReactionClass::FastC => {
                if r.gamma_d != 0 {
                    out.push(Violation::at(i, "FastC must have gamma_d = 0"));
                }
                if r.rate.depends_on_d() {
                    out.push(Violation::at(i, "FastC rate must depend only on u_C"));
                }
            }
            ReactionClass::FastMixed => {
                if r.gamma_d != 0 {
                    out.push(Violation::at(i, "FastMixed must have gamma_d = 0"));
                }
            }
            ReactionClass::SlowMixed => {}
            ReactionClass::SlowD => {
                if r.gamma_c != 0 {
                    out.push(Violation::at(i, "SlowD must have gamma_c = 0"));
                }
                if r.rate.depends_on_c() {
                    out.push(Violation::at(i, "SlowD rate must depend only on u_D"));
                }
            }
        }
        for t in &r.rate.terms {
            if !t.coeff.is_finite() {
                out.push(Violation::at(i, "rate coefficient must be finite"));
            } else if t.coeff < 0.0 && (t.deg_c > 0 || t.deg_d > 0) {
                out.push(Violation::at(
                    i,
                    "rate coefficients must be >= 0 except the constant term",
                ));
            }
        }
        // coefficient sign rules still allow a negative constant, so sample
        // the rate over the standard box
        let mut min_rate = f64::INFINITY;
        for a in 0..=20 {
            for b in 0..=20 {
                let v = r.rate.eval_unchecked(a as f64 * 0.5, b as f64 * 0.5);
                min_rate = min_rate.min(v);
            }
        }
        if min_rate < 0.0 {
            out.push(Violation::at(
                i,
                format!("rate is negative on [0,10]^2 (min sampled value {min_rate})"),
            ));
        }
    }
    out.extend(validate_kernel(&spec.kernel));
    if spec.initial_c.min_on_grid(1024) < 0.0 {
        out.push(Violation::global("initial v_c must be non-negative"));
    }
    if spec.initial_d.min_on_grid(1024) < 0.0 {
        out.push(Violation::global("initial v_d must be non-negative"));
    }
    out
}

/// Circulant site-weight matrix gamma[i][j] = integral of a(x - j/N) over
/// site i. Stored by displacement; gamma[i][j] depends only on (i - j) mod N.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelWeights {
    n: usize,
    by_displacement: Vec<f64>,
}

impl KernelWeights {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        let d = (i + self.n - j % self.n) % self.n;
        self.by_displacement[d]
    }

    /// Weight as a function of target-minus-source displacement.
    pub fn by_displacement(&self) -> &[f64] {
        &self.by_displacement
    }

    pub fn row_sum(&self) -> f64 {
        self.by_displacement.iter().sum()
    }

    pub fn max_entry(&self) -> f64 {
        self.by_displacement.iter().fold(0.0, |m, v| v.max(m))
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.at(i, j)).collect())
            .collect()
    }
}

/// Exact site weights from the kernel antiderivative:
/// entry at displacement d is A(d/N) - A((d-1)/N).
pub fn kernel_weights(kernel: &Kernel, scaling: &ScalingParams) -> KernelWeights {
    let k = kernel_impl(kernel);
    let n = scaling.n();
    let by_displacement = (0..n)
        .map(|d| {
            k.antiderivative(d as f64 / n as f64) - k.antiderivative((d as f64 - 1.0) / n as f64)
        })
        .collect();
    KernelWeights { n, by_displacement }
}

/// Doubly cell-averaged weights W(d) = N * [A2((d+1)/N) - 2 A2(d/N) + A2((d-1)/N)],
/// the exact average over site pairs at displacement d of the kernel. Used to
/// reduce the continuous convolution debit to the grid.
pub fn kernel_pair_weights(kernel: &Kernel, n: usize) -> Vec<f64> {
    let k = kernel_impl(kernel);
    let nf = n as f64;
    (0..n)
        .map(|d| {
            let d = d as f64;
            nf * (k.antiderivative2((d + 1.0) / nf) - 2.0 * k.antiderivative2(d / nf)
                + k.antiderivative2((d - 1.0) / nf))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    VerifiedOnBox,
    Unverified,
    FailedOnBox,
}

impl fmt::Display for CheckStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckStatus::VerifiedOnBox => "VERIFIED-ON-BOX",
            CheckStatus::Unverified => "UNVERIFIED",
            CheckStatus::FailedOnBox => "FAILED-ON-BOX",
        })
    }
}

#[derive(Debug, Clone)]
pub struct CheckItem {
    pub status: CheckStatus,
    pub detail: String,
}

/// Sampling rectangle [0, c_max] x [0, d_max] in state space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateBox {
    pub c_max: f64,
    pub d_max: f64,
}

/// Advisory report on the structural assumptions behind well-posedness of
/// the deterministic limit. All conclusions are sampled on the box; a
/// property that holds on the box is reported VERIFIED-ON-BOX, never more.
#[derive(Debug, Clone)]
pub struct AssumptionReport {
    /// F non-negative on the face y_c = 0 (keeps C from going negative).
    pub c1: CheckItem,
    /// F negative for large y_c (confines C). Verified on the box only when
    /// F is also non-increasing in y_d beyond the radius, since growth in
    /// y_d would break confinement just outside any finite box.
    pub c2: CheckItem,
    /// |g| bounded by m1 * (|y_d| + 1) on the box (linear growth in D).
    pub d2: CheckItem,
    /// Smallest sampled y_c beyond which F < 0 at every sampled y_d, when
    /// one exists on the box.
    pub rho_c: Option<f64>,
    /// Fitted linear-growth constant for |g| on the box.
    pub m1: f64,
}

impl fmt::Display for AssumptionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "C1 {}: {}", self.c1.status, self.c1.detail)?;
        writeln!(f, "C2 {}: {}", self.c2.status, self.c2.detail)?;
        write!(f, "D2 {}: {}", self.d2.status, self.d2.detail)
    }
}

/// Sample the drift F and growth |g| over `bx` and report on the confinement
/// and growth assumptions. Grid resolution 64 x 64.
pub fn assumption_check(spec: &NetworkSpec, bx: StateBox) -> AssumptionReport {
    assert!(bx.c_max > 0.0 && bx.d_max > 0.0, "box must have positive extent");
    const RES: usize = 64;
    let cs: Vec<f64> = (0..=RES).map(|i| bx.c_max * i as f64 / RES as f64).collect();
    let ds: Vec<f64> = (0..=RES).map(|i| bx.d_max * i as f64 / RES as f64).collect();

    let min_f_on_face = ds
        .iter()
        .map(|&d| fast_debit_point(spec, 0.0, d))
        .fold(f64::INFINITY, f64::min);
    let c1 = CheckItem {
        status: if min_f_on_face >= 0.0 {
            CheckStatus::VerifiedOnBox
        } else {
            CheckStatus::FailedOnBox
        },
        detail: format!("min F(0, y_d) over box = {min_f_on_face}"),
    };

    // smallest sampled y_c such that F < 0 on every sampled y_d column
    // beyond it
    let mut rho_c: Option<f64> = None;
    for (i, &c) in cs.iter().enumerate().rev() {
        if c == 0.0 {
            break;
        }
        let all_negative = ds.iter().all(|&d| fast_debit_point(spec, c, d) < 0.0);
        if all_negative {
            rho_c = Some(if i > 0 { cs[i - 1] } else { 0.0 });
        } else {
            break;
        }
    }
    // growth probe: does F increase with y_d in the confinement region? If
    // so, the verdict cannot extrapolate past the box edge.
    let grows_in_d = {
        let c_probe = bx.c_max;
        ds.windows(2).any(|w| {
            fast_debit_point(spec, c_probe, w[1]) > fast_debit_point(spec, c_probe, w[0]) + 1e-12
        })
    };
    let c2 = match rho_c {
        Some(r) if !grows_in_d => CheckItem {
            status: CheckStatus::VerifiedOnBox,
            detail: format!(
                "F < 0 for sampled y_c > {r:.4}, non-increasing in y_d there; beyond the box nothing is claimed"
            ),
        },
        Some(r) => CheckItem {
            status: CheckStatus::Unverified,
            detail: format!(
                "F < 0 for sampled y_c > {r:.4} on this box, but F grows with y_d, so confinement fails outside any finite box"
            ),
        },
        None => CheckItem {
            status: CheckStatus::Unverified,
            detail: format!(
                "no sampled y_c <= {} has F < 0 across all sampled y_d; no confinement radius found on the box",
                bx.c_max
            ),
        },
    };

    let mut m1 = 0.0f64;
    for &c in &cs {
        for &d in &ds {
            let g = slow_debit_abs_point(spec, c, d);
            m1 = m1.max(g / (d + 1.0));
        }
    }
    let d2 = CheckItem {
        status: CheckStatus::VerifiedOnBox,
        detail: format!("|g|(y) <= {m1} * (|y_d| + 1) on the box (fitted constant)"),
    };

    AssumptionReport { c1, c2, d2, rho_c, m1 }
}

// ---- network file format ----

#[derive(Debug, Serialize, Deserialize)]
struct SpeciesSection {
    fast: String,
    slow: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct InitialSection {
    v_c: TrigPoly,
    v_d: TrigPoly,
}

/// On-disk layout of a network definition. Unknown extra sections (for
/// example a [run] block in a combined configuration file) are tolerated
/// here; the command-line config parser is the strict one.
#[derive(Debug, Serialize, Deserialize)]
struct NetworkFile {
    #[serde(default)]
    name: String,
    species: SpeciesSection,
    reactions: Vec<Reaction>,
    kernel: Kernel,
    initial: InitialSection,
}

fn line_col(text: &str, byte: usize) -> (usize, usize) {
    let clamped = byte.min(text.len());
    let upto = &text[..clamped];
    let line = upto.matches('\n').count() + 1;
    let col = upto.chars().rev().take_while(|c| *c != '\n').count() + 1;
    (line, col)
}

pub(crate) fn toml_error(text: &str, err: toml::de::Error) -> ModelError {
    let (line, col) = err
        .span()
        .map(|s| line_col(text, s.start))
        .unwrap_or((1, 1));
    ModelError::Parse { line, col, msg: err.message().to_string() }
}

/// Parse a network definition document.
pub fn parse_network(text: &str) -> Result<NetworkSpec, ModelError> {
    let file: NetworkFile = toml::from_str(text).map_err(|e| toml_error(text, e))?;
    Ok(NetworkSpec {
        name: file.name,
        species_fast: file.species.fast,
        species_slow: file.species.slow,
        reactions: file.reactions,
        kernel: file.kernel,
        theta: SmoothingTheta,
        initial_c: file.initial.v_c,
        initial_d: file.initial.v_d,
    })
}

/// Canonical text form; parse(serialize(spec)) == spec.
pub fn serialize_network(spec: &NetworkSpec) -> String {
    let file = NetworkFile {
        name: spec.name.clone(),
        species: SpeciesSection {
            fast: spec.species_fast.clone(),
            slow: spec.species_slow.clone(),
        },
        reactions: spec.reactions.clone(),
        kernel: spec.kernel.clone(),
        initial: InitialSection {
            v_c: spec.initial_c.clone(),
            v_d: spec.initial_d.clone(),
        },
    };
    toml::to_string(&file).expect("network spec serializes")
}

// ---- expression mini-grammar ----
//
// rates:        term ( (+|-) term )*, term = factor ( * factor )*,
//               factor = NUMBER | uC [^ INT] | uD [^ INT]
// initial data: term ( (+|-) term )*, term = NUMBER [* wave] | wave,
//               wave = (cos|sin) ( INT * pi * x ), INT even

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Caret,
    LParen,
    RParen,
}

fn lex(text: &str) -> Result<Vec<Tok>, ModelError> {
    let mut toks = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' => i += 1,
            '+' => {
                toks.push(Tok::Plus);
                i += 1;
            }
            '-' => {
                toks.push(Tok::Minus);
                i += 1;
            }
            '*' => {
                toks.push(Tok::Star);
                i += 1;
            }
            '^' => {
                toks.push(Tok::Caret);
                i += 1;
            }
            '(' => {
                toks.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                toks.push(Tok::RParen);
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() {
                    let c = bytes[i] as char;
                    if c.is_ascii_digit() || c == '.' {
                        i += 1;
                    } else if (c == 'e' || c == 'E')
                        && i + 1 < bytes.len()
                        && (bytes[i + 1].is_ascii_digit()
                            || bytes[i + 1] == b'+'
                            || bytes[i + 1] == b'-')
                    {
                        i += 2;
                    } else {
                        break;
                    }
                }
                let lit = &text[start..i];
                let v: f64 = lit
                    .parse()
                    .map_err(|_| ModelError::Expr(format!("bad number literal '{lit}'")))?;
                toks.push(Tok::Num(v));
            }
            _ if c.is_ascii_alphabetic() => {
                let start = i;
                while i < bytes.len() && (bytes[i] as char).is_ascii_alphanumeric() {
                    i += 1;
                }
                toks.push(Tok::Ident(text[start..i].to_string()));
            }
            _ => {
                return Err(ModelError::Expr(format!("unexpected character '{c}'")));
            }
        }
    }
    Ok(toks)
}

struct TokStream {
    toks: Vec<Tok>,
    pos: usize,
}

impl TokStream {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), ModelError> {
        match self.next() {
            Some(t) if t == want => Ok(()),
            other => Err(ModelError::Expr(format!("expected {what}, got {other:?}"))),
        }
    }
}

fn parse_rate(text: &str) -> Result<PolynomialRate, ModelError> {
    let mut s = TokStream { toks: lex(text)?, pos: 0 };
    let mut terms = Vec::new();
    let mut sign = 1.0;
    if matches!(s.peek(), Some(Tok::Minus)) {
        s.next();
        sign = -1.0;
    }
    loop {
        let mut coeff = sign;
        let mut deg_c = 0u32;
        let mut deg_d = 0u32;
        let mut saw_number = false;
        loop {
            match s.next() {
                Some(Tok::Num(v)) => {
                    if saw_number {
                        return Err(ModelError::Expr(
                            "two numeric factors in one term; write a single coefficient".into(),
                        ));
                    }
                    coeff *= v;
                    saw_number = true;
                }
                Some(Tok::Ident(name)) => {
                    let exp = if matches!(s.peek(), Some(Tok::Caret)) {
                        s.next();
                        match s.next() {
                            Some(Tok::Num(v)) if v.fract() == 0.0 && v >= 0.0 => v as u32,
                            other => {
                                return Err(ModelError::Expr(format!(
                                    "exponent must be a non-negative integer, got {other:?}"
                                )))
                            }
                        }
                    } else {
                        1
                    };
                    match name.as_str() {
                        "uC" => deg_c += exp,
                        "uD" => deg_d += exp,
                        _ => {
                            return Err(ModelError::Expr(format!(
                                "unknown variable '{name}' in rate (use uC, uD)"
                            )))
                        }
                    }
                }
                other => {
                    return Err(ModelError::Expr(format!(
                        "expected a factor (number, uC, uD), got {other:?}"
                    )))
                }
            }
            match s.peek() {
                Some(Tok::Star) => {
                    s.next();
                }
                _ => break,
            }
        }
        terms.push(Monomial { coeff, deg_c, deg_d });
        match s.next() {
            None => break,
            Some(Tok::Plus) => sign = 1.0,
            Some(Tok::Minus) => sign = -1.0,
            Some(other) => {
                return Err(ModelError::Expr(format!("expected + or -, got {other:?}")))
            }
        }
    }
    Ok(PolynomialRate { terms })
}

fn parse_wave(s: &mut TokStream, name: &str) -> Result<(u32, Wave), ModelError> {
    let wave = match name {
        "cos" => Wave::Cos,
        "sin" => Wave::Sin,
        _ => {
            return Err(ModelError::Expr(format!(
                "unknown function '{name}' in initial data (use cos, sin)"
            )))
        }
    };
    s.expect(Tok::LParen, "'('")?;
    let mult = match s.next() {
        Some(Tok::Num(v)) if v.fract() == 0.0 && v > 0.0 => v as u64,
        other => {
            return Err(ModelError::Expr(format!(
                "expected a positive integer multiple of pi, got {other:?}"
            )))
        }
    };
    s.expect(Tok::Star, "'*'")?;
    match s.next() {
        Some(Tok::Ident(p)) if p == "pi" => {}
        other => return Err(ModelError::Expr(format!("expected pi, got {other:?}"))),
    }
    s.expect(Tok::Star, "'*'")?;
    match s.next() {
        Some(Tok::Ident(x)) if x == "x" => {}
        other => return Err(ModelError::Expr(format!("expected x, got {other:?}"))),
    }
    s.expect(Tok::RParen, "')'")?;
    if mult % 2 != 0 {
        return Err(ModelError::Expr(format!(
            "frequency {mult}*pi*x is not 1-periodic; the multiple of pi must be even"
        )));
    }
    Ok(((mult / 2) as u32, wave))
}

fn parse_trig(text: &str) -> Result<TrigPoly, ModelError> {
    let mut s = TokStream { toks: lex(text)?, pos: 0 };
    let mut out = TrigPoly::default();
    let mut sign = 1.0;
    if matches!(s.peek(), Some(Tok::Minus)) {
        s.next();
        sign = -1.0;
    }
    loop {
        match s.next() {
            Some(Tok::Num(v)) => {
                let coeff = sign * v;
                if matches!(s.peek(), Some(Tok::Star)) {
                    s.next();
                    match s.next() {
                        Some(Tok::Ident(name)) => {
                            let (cycles, wave) = parse_wave(&mut s, &name)?;
                            out.terms.push(TrigTerm { coeff, cycles, wave });
                        }
                        other => {
                            return Err(ModelError::Expr(format!(
                                "expected cos or sin after '*', got {other:?}"
                            )))
                        }
                    }
                } else {
                    out.constant += coeff;
                }
            }
            Some(Tok::Ident(name)) => {
                let (cycles, wave) = parse_wave(&mut s, &name)?;
                out.terms.push(TrigTerm { coeff: sign, cycles, wave });
            }
            other => {
                return Err(ModelError::Expr(format!(
                    "expected a term (number or cos/sin), got {other:?}"
                )))
            }
        }
        match s.next() {
            None => break,
            Some(Tok::Plus) => sign = 1.0,
            Some(Tok::Minus) => sign = -1.0,
            Some(other) => {
                return Err(ModelError::Expr(format!("expected + or -, got {other:?}")))
            }
        }
    }
    Ok(out)
}
