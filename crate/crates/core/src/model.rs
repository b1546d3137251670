//! Datasets, base-function families, ranking scores and convex losses.
//!
//! A ranking rule is a linear combination `f_θ(x, x') = Σ_k θ_k ψ_k(x, x')` of
//! base functions evaluated on a pair of predictor vectors. A positive score
//! predicts that the first object has the larger response.

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// `n` observations of a `d`-dimensional predictor and a real response.
///
/// Predictors are stored row-major so that each observation is a contiguous
/// slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: Vec<f64>,
    y: Vec<f64>,
    d: usize,
}

impl Dataset {
    /// Builds a dataset from a row-major predictor buffer of length `n * d`.
    pub fn from_flat(x: Vec<f64>, y: Vec<f64>, d: usize) -> Result<Self> {
        if d == 0 {
            return invalid("predictor dimension must be at least 1");
        }
        let n = y.len();
        if x.len() != n * d {
            return invalid(format!(
                "predictor buffer has {} entries, expected {n} x {d}",
                x.len()
            ));
        }
        if n < 2 {
            return Err(Error::InsufficientData { needed: 2, got: n });
        }
        if let Some(pos) = x.iter().chain(y.iter()).position(|v| !v.is_finite()) {
            return invalid(format!("non-finite entry at flat position {pos}"));
        }
        Ok(Self { x, y, d })
    }

    pub fn from_rows(rows: &[Vec<f64>], y: Vec<f64>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.len() != y.len() {
            return invalid(format!("{} predictor rows but {} responses", rows.len(), y.len()));
        }
        if rows.iter().any(|r| r.len() != d) {
            return invalid("predictor rows have unequal lengths");
        }
        Self::from_flat(rows.concat(), y, d)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x_flat(&self) -> &[f64] {
        &self.x
    }

    /// Column `k` of the predictor matrix.
    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.n()).map(|i| self.x[i * self.d + k]).collect()
    }

    /// A new dataset holding the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut x = Vec::with_capacity(indices.len() * self.d);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n() {
                return invalid(format!("row index {i} out of range"));
            }
            x.extend_from_slice(self.row(i));
            y.push(self.y[i]);
        }
        Self::from_flat(x, y, self.d)
    }

    /// Reads the `x1,...,xd,y` CSV layout. The response is the column named `y`;
    /// lines starting with `#` are skipped.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let headers = rdr.headers().map_err(|e| csv_error(e, 1))?.clone();
        let y_col = headers
            .iter()
            .position(|h| h == "y")
            .ok_or_else(|| Error::Parse { line: 1, message: "header has no `y` column".into() })?;
        if headers.len() < 2 {
            return Err(Error::Parse { line: 1, message: "need at least one predictor column".into() });
        }
        let d = headers.len() - 1;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| csv_error(e, 0))?;
            let line = record.position().map_or(0, |p| p.line());
            if record.len() != headers.len() {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {} fields, found {}", headers.len(), record.len()),
                });
            }
            for (c, field) in record.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("`{field}` is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse { line, message: format!("non-finite value `{field}`") });
                }
                if c == y_col {
                    y.push(v);
                } else {
                    x.push(v);
                }
            }
        }
        Self::from_flat(x, y, d)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (1..=self.d).map(|k| format!("x{k}")).collect();
        header.push("y".into());
        w.write_record(&header).map_err(|e| csv_error(e, 0))?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self.row(i).iter().map(f64::to_string).collect();
            rec.push(self.y[i].to_string());
            w.write_record(&rec).map_err(|e| csv_error(e, 0))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error, fallback_line: u64) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse { line, message: format!("{kind:?}") },
    }
}

/// A user-supplied family of base functions on predictor pairs.
///
/// Implementations must be deterministic.
#[allow(clippy::len_without_is_empty)]
pub trait PairFeatures: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    /// Dimension of each predictor vector.
    fn input_dim(&self) -> usize;
    /// Number of base functions `m`.
    fn len(&self) -> usize;
    /// Writes `(ψ_1(x, x'), ..., ψ_m(x, x'))` into `out`.
    fn eval(&self, x: &[f64], xp: &[f64], out: &mut [f64]);
    /// True when `ψ(x', x) = -ψ(x, x')` for every pair.
    fn antisymmetric(&self) -> bool {
        false
    }
}

/// `ψ_k(x, x') = sign(x_k - x'_k)`.
#[derive(Clone, Debug)]
pub struct SignDifference {
    d: usize,
}

impl SignDifference {
    pub fn new(d: usize) -> Result<Self> {
        if d == 0 {
            return invalid("dimension must be at least 1");
        }
        Ok(Self { d })
    }
}

impl PairFeatures for SignDifference {
    fn name(&self) -> &str {
        "sign"
    }
    fn input_dim(&self) -> usize {
        self.d
    }
    fn len(&self) -> usize {
        self.d
    }
    fn eval(&self, x: &[f64], xp: &[f64], out: &mut [f64]) {
        for ((o, a), b) in out.iter_mut().zip(x).zip(xp) {
            *o = sign(a - b);
        }
    }
    fn antisymmetric(&self) -> bool {
        true
    }
}

/// A custom basis backed by a closure.
pub struct FnBasis<F> {
    name: String,
    d: usize,
    m: usize,
    f: F,
    antisymmetric: bool,
}

impl<F> FnBasis<F>
where
    F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync,
{
    pub fn new(name: impl Into<String>, d: usize, m: usize, f: F) -> Result<Self> {
        if d == 0 || m == 0 {
            return invalid("custom basis needs d >= 1 and m >= 1");
        }
        Ok(Self { name: name.into(), d, m, f, antisymmetric: false })
    }

    /// Declares the evaluator antisymmetric, enabling the half-pair sum.
    pub fn with_antisymmetry(mut self) -> Self {
        self.antisymmetric = true;
        self
    }
}

impl<F> fmt::Debug for FnBasis<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnBasis").field("name", &self.name).field("d", &self.d).field("m", &self.m).finish()
    }
}

impl<F> PairFeatures for FnBasis<F>
where
    F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }
    fn input_dim(&self) -> usize {
        self.d
    }
    fn len(&self) -> usize {
        self.m
    }
    fn eval(&self, x: &[f64], xp: &[f64], out: &mut [f64]) {
        (self.f)(x, xp, out)
    }
    fn antisymmetric(&self) -> bool {
        self.antisymmetric
    }
}

/// The collection `ψ_1, ..., ψ_m` spanning the family of ranking rules.
#[derive(Clone, Debug)]
pub enum BasisSpec {
    /// `ψ_k(x, x') = x_k - x'_k`, so `m = d` and the rules are linear.
    LinearDifference { d: usize },
    Custom(Arc<dyn PairFeatures>),
}

/// Linear ranking rules on `d` predictors.
pub fn make_linear_basis(d: usize) -> Result<BasisSpec> {
    if d == 0 {
        return invalid("linear basis needs d >= 1");
    }
    Ok(BasisSpec::LinearDifference { d })
}

impl BasisSpec {
    pub fn custom(features: impl PairFeatures + 'static) -> Self {
        BasisSpec::Custom(Arc::new(features))
    }

    /// Built-in bases addressable by name: `linear` and `sign`.
    pub fn named(name: &str, d: usize) -> Result<Self> {
        match name {
            "linear" => make_linear_basis(d),
            "sign" => Ok(Self::custom(SignDifference::new(d)?)),
            other => invalid(format!("unknown basis `{other}` (expected `linear` or `sign`)")),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            BasisSpec::LinearDifference { .. } => "linear",
            BasisSpec::Custom(f) => f.name(),
        }
    }

    /// Number of base functions.
    pub fn m(&self) -> usize {
        match self {
            BasisSpec::LinearDifference { d } => *d,
            BasisSpec::Custom(f) => f.len(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            BasisSpec::LinearDifference { d } => *d,
            BasisSpec::Custom(f) => f.input_dim(),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, BasisSpec::LinearDifference { .. })
    }

    pub fn antisymmetric(&self) -> bool {
        match self {
            BasisSpec::LinearDifference { .. } => true,
            BasisSpec::Custom(f) => f.antisymmetric(),
        }
    }

    /// Writes `Ψ(x, x')` into `out` (length `m`). Dimensions are not checked.
    #[inline]
    pub fn eval_into(&self, x: &[f64], xp: &[f64], out: &mut [f64]) {
        match self {
            BasisSpec::LinearDifference { .. } => {
                for ((o, a), b) in out.iter_mut().zip(x).zip(xp) {
                    *o = a - b;
                }
            }
            BasisSpec::Custom(f) => f.eval(x, xp, out),
        }
    }

    pub fn eval(&self, x: &[f64], xp: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(x, xp)?;
        let mut out = vec![0.0; self.m()];
        self.eval_into(x, xp, &mut out);
        Ok(out)
    }

    pub(crate) fn check_inputs(&self, x: &[f64], xp: &[f64]) -> Result<()> {
        let d = self.input_dim();
        if x.len() != d || xp.len() != d {
            return invalid(format!(
                "basis expects {d}-dimensional inputs, got {} and {}",
                x.len(),
                xp.len()
            ));
        }
        Ok(())
    }

    pub(crate) fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.d() != self.input_dim() {
            return invalid(format!(
                "data has {} predictors but basis `{}` expects {}",
                data.d(),
                self.name(),
                self.input_dim()
            ));
        }
        Ok(())
    }
}

/// Coefficients of a ranking rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Theta(Vec<f64>);

impl Theta {
    pub fn new(coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.iter().any(|c| !c.is_finite()) {
            return invalid("coefficients must be finite");
        }
        Ok(Self(coefficients))
    }

    pub fn zeros(m: usize) -> Self {
        Self(vec![0.0; m])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Indices of the nonzero coefficients, ascending.
    pub fn support(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(k, _)| k).collect()
    }

    pub fn l1_norm(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum()
    }

    pub fn l1_distance(&self, other: &Theta) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum()
    }

    pub(crate) fn check_basis(&self, basis: &BasisSpec) -> Result<()> {
        if self.len() != basis.m() {
            return invalid(format!("theta has {} coefficients, basis has m = {}", self.len(), basis.m()));
        }
        Ok(())
    }
}

impl From<Theta> for Vec<f64> {
    fn from(t: Theta) -> Self {
        t.0
    }
}

/// `sign(t)` with `sign(0) = 0`.
#[inline]
pub fn sign(t: f64) -> f64 {
    if t > 0.0 {
        1.0
    } else if t < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `f_θ(x, x') = Σ_k θ_k ψ_k(x, x')`.
pub fn score(theta: &Theta, basis: &BasisSpec, x: &[f64], xp: &[f64]) -> Result<f64> {
    theta.check_basis(basis)?;
    basis.check_inputs(x, xp)?;
    Ok(score_unchecked(theta.as_slice(), basis, x, xp, &mut vec![0.0; basis.m()]))
}

#[inline]
pub(crate) fn score_unchecked(theta: &[f64], basis: &BasisSpec, x: &[f64], xp: &[f64], buf: &mut [f64]) -> f64 {
    match basis {
        BasisSpec::LinearDifference { .. } => theta.iter().zip(x).zip(xp).map(|((t, a), b)| t * (a - b)).sum(),
        BasisSpec::Custom(f) => {
            f.eval(x, xp, buf);
            dot(theta, buf)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Hinge,
    Logistic,
    TruncatedQuadratic,
    Exponential,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hinge" => Ok(Self::Hinge),
            "logistic" => Ok(Self::Logistic),
            "truncated_quadratic" | "truncated-quadratic" => Ok(Self::TruncatedQuadratic),
            "exponential" => Ok(Self::Exponential),
            other => invalid(format!("unknown loss `{other}`")),
        }
    }
}

/// A convex margin loss `φ` together with its Lipschitz constant.
///
/// Hinge and logistic are globally 1-Lipschitz. Truncated quadratic and
/// exponential are Lipschitz only on bounded score ranges, so they carry the
/// bound `sup |f_θ|` that the constant was computed from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LossParams", into = "LossParams")]
pub struct LossSpec {
    kind: LossKind,
    lipschitz: f64,
    sup_bound: Option<f64>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LossParams {
    kind: LossKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sup_bound: Option<f64>,
}

impl TryFrom<LossParams> for LossSpec {
    type Error = Error;
    fn try_from(p: LossParams) -> Result<Self> {
        LossSpec::from_kind(p.kind, p.sup_bound)
    }
}

impl From<LossSpec> for LossParams {
    fn from(l: LossSpec) -> Self {
        LossParams { kind: l.kind, sup_bound: l.sup_bound }
    }
}

impl LossSpec {
    pub fn hinge() -> Self {
        Self { kind: LossKind::Hinge, lipschitz: 1.0, sup_bound: None }
    }

    pub fn logistic() -> Self {
        Self { kind: LossKind::Logistic, lipschitz: 1.0, sup_bound: None }
    }

    /// `(max(0, 1 - t))²` on `|t| ≤ sup_bound`, with `L = 2(1 + sup_bound)`.
    pub fn truncated_quadratic(sup_bound: f64) -> Result<Self> {
        check_sup_bound(sup_bound)?;
        Ok(Self {
            kind: LossKind::TruncatedQuadratic,
            lipschitz: 2.0 * (1.0 + sup_bound),
            sup_bound: Some(sup_bound),
        })
    }

    /// `e^{-t}` on `|t| ≤ sup_bound`, with `L = e^{sup_bound}`.
    pub fn exponential(sup_bound: f64) -> Result<Self> {
        check_sup_bound(sup_bound)?;
        Ok(Self { kind: LossKind::Exponential, lipschitz: sup_bound.exp(), sup_bound: Some(sup_bound) })
    }

    /// Builds a loss by kind; `sup_bound` is required exactly for the
    /// non-globally-Lipschitz losses.
    pub fn from_kind(kind: LossKind, sup_bound: Option<f64>) -> Result<Self> {
        match (kind, sup_bound) {
            (LossKind::Hinge, _) => Ok(Self::hinge()),
            (LossKind::Logistic, _) => Ok(Self::logistic()),
            (LossKind::TruncatedQuadratic, Some(b)) => Self::truncated_quadratic(b),
            (LossKind::Exponential, Some(b)) => Self::exponential(b),
            (k, None) => invalid(format!("{k:?} loss requires an explicit sup_bound")),
        }
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn sup_bound(&self) -> Option<f64> {
        self.sup_bound
    }

    /// Differentiable everywhere (hinge is not).
    pub fn is_smooth(&self) -> bool {
        self.kind != LossKind::Hinge
    }

    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        match self.kind {
            LossKind::Hinge => (1.0 - t).max(0.0),
            LossKind::Logistic => {
                if t > 0.0 {
                    (-t).exp().ln_1p()
                } else {
                    -t + t.exp().ln_1p()
                }
            }
            LossKind::TruncatedQuadratic => {
                let h = (1.0 - t).max(0.0);
                h * h
            }
            LossKind::Exponential => (-t).exp(),
        }
    }

    /// One element of the subdifferential at `t`. At the hinge kink `t = 1`
    /// this returns 0.
    #[inline]
    pub fn subgradient(&self, t: f64) -> f64 {
        match self.kind {
            LossKind::Hinge => {
                if t < 1.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            LossKind::Logistic => {
                if t > 0.0 {
                    let e = (-t).exp();
                    -e / (1.0 + e)
                } else {
                    -1.0 / (1.0 + t.exp())
                }
            }
            LossKind::TruncatedQuadratic => -2.0 * (1.0 - t).max(0.0),
            LossKind::Exponential => -(-t).exp(),
        }
    }
}

fn check_sup_bound(b: f64) -> Result<()> {
    if !(b.is_finite() && b > 0.0) {
        return invalid("sup_bound must be a positive finite number");
    }
    Ok(())
}

pub fn loss_value(loss: &LossSpec, t: f64) -> f64 {
    loss.value(t)
}

pub fn loss_subgradient(loss: &LossSpec, t: f64) -> f64 {
    loss.subgradient(t)
}

/// `φ(sign(y - y') f_θ(x, x'))` for observations `z = (x, y)` and `z' = (x', y')`.
pub fn pairwise_loss(
    loss: &LossSpec,
    theta: &Theta,
    basis: &BasisSpec,
    z: (&[f64], f64),
    zp: (&[f64], f64),
) -> Result<f64> {
    let f = score(theta, basis, z.0, zp.0)?;
    Ok(loss.value(sign(z.1 - zp.1) * f))
}
