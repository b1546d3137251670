//! Quantities behind the oracle inequality: Gram matrices, pseudonorms,
//! compatibility constants, the margin function and its conjugate, margin
//! constants, and the oracle `θ*`, `ε*`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf_inv;

use crate::error::{invalid, require_pairs, Error, Result};
use crate::model::{BasisSpec, Dataset, LossSpec, Theta};
use crate::simulate::{eta_of_signal, restricted_minimizer, ExcessRiskEvaluator, SyntheticModel};
use crate::urisk::CompensatedSum;

/// Largest number of candidate supports `oracle_search` accepts.
pub const MAX_CANDIDATES: usize = 500;
/// Largest support size `oracle_search` accepts.
pub const MAX_ORACLE_SUPPORT: usize = 4;
/// Largest `m` for the cone search.
pub const MAX_CONE_DIM: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramSource {
    EmpiricalPairs,
    ClosedFormLinearGaussian,
}

/// `Σ = E Ψ(X,X')Ψ(X,X')ᵀ` or an estimate of it.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    sigma: DMatrix<f64>,
    source: GramSource,
}

impl GramMatrix {
    pub fn new(sigma: DMatrix<f64>, source: GramSource) -> Result<Self> {
        if sigma.nrows() != sigma.ncols() || sigma.nrows() == 0 {
            return invalid("Gram matrix must be square and nonempty");
        }
        if sigma.iter().any(|v| !v.is_finite()) {
            return invalid("Gram matrix must be finite");
        }
        let scale = sigma.amax().max(1.0);
        if (&sigma - sigma.transpose()).amax() > 1e-10 * scale {
            return invalid("Gram matrix must be symmetric");
        }
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        let g = Self { sigma, source };
        if g.smallest_eigenvalue() < -1e-8 * scale {
            return invalid("Gram matrix must be positive semidefinite");
        }
        Ok(g)
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn source(&self) -> GramSource {
        self.source
    }

    pub fn m(&self) -> usize {
        self.sigma.nrows()
    }

    /// `ρ`, the smallest eigenvalue.
    pub fn smallest_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.sigma.clone()).eigenvalues.min()
    }

    pub fn quadratic_form(&self, theta: &[f64]) -> f64 {
        let v = DVector::from_column_slice(theta);
        v.dot(&(&self.sigma * &v))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.m()).map(|i| (0..self.m()).map(|j| self.sigma[(i, j)]).collect()).collect()
    }

    pub fn summary(&self) -> GramSummary {
        let eig = SymmetricEigen::new(self.sigma.clone()).eigenvalues;
        GramSummary {
            source: self.source,
            m: self.m(),
            smallest_eigenvalue: eig.min(),
            largest_eigenvalue: eig.max(),
            trace: self.sigma.trace(),
            diagonal: self.sigma.diagonal().iter().copied().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramSummary {
    pub source: GramSource,
    pub m: usize,
    pub smallest_eigenvalue: f64,
    pub largest_eigenvalue: f64,
    pub trace: f64,
    pub diagonal: Vec<f64>,
}

/// `1/(n(n-1)) Σ_{i≠j} Ψ(X_i,X_j)Ψ(X_i,X_j)ᵀ`.
pub fn gram_empirical(data: &Dataset, basis: &BasisSpec) -> Result<GramMatrix> {
    require_pairs(data.n())?;
    basis.check_data(data)?;
    let n = data.n();
    let m = basis.m();
    let sigma = if basis.is_linear() {
        // for differences this is twice the unbiased sample covariance
        let means: Vec<f64> = (0..m).map(|k| data.column(k).iter().sum::<f64>() / n as f64).collect();
        let mut s = DMatrix::zeros(m, m);
        for k in 0..m {
            for l in k..m {
                let acc: CompensatedSum =
                    (0..n).map(|i| (data.row(i)[k] - means[k]) * (data.row(i)[l] - means[l])).collect();
                let v = 2.0 * acc.value() / (n - 1) as f64;
                s[(k, l)] = v;
                s[(l, k)] = v;
            }
        }
        s
    } else {
        let mut s = DMatrix::zeros(m, m);
        let mut buf = vec![0.0; m];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                basis.eval_into(data.row(i), data.row(j), &mut buf);
                for k in 0..m {
                    for l in k..m {
                        s[(k, l)] += buf[k] * buf[l];
                    }
                }
            }
        }
        let pairs = (n * (n - 1)) as f64;
        for k in 0..m {
            for l in k..m {
                let v = s[(k, l)] / pairs;
                s[(k, l)] = v;
                s[(l, k)] = v;
            }
        }
        s
    };
    GramMatrix::new(sigma, GramSource::EmpiricalPairs)
}

/// `Σ = 2 Var(X)` for the linear basis under the Gaussian model.
pub fn gram_closed_form(model: &SyntheticModel, d_ambient: usize) -> Result<GramMatrix> {
    if d_ambient < model.dim() {
        return invalid("ambient dimension below model dimension");
    }
    GramMatrix::new(model.ambient_covariance(d_ambient) * 2.0, GramSource::ClosedFormLinearGaussian)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pseudonorm {
    /// `‖f‖₂ = √(E f²)`.
    L2,
    /// `‖f‖_c = √(E[(E_{X'} f(X, X'))²])`.
    Conditional,
}

/// Where a pseudonorm is computed from.
#[derive(Clone, Copy, Debug)]
pub enum NormSource<'a> {
    /// Closed form under the Gaussian model; linear basis only.
    Model { model: &'a SyntheticModel, basis: &'a BasisSpec },
    /// Sample version from observed rows.
    Data { data: &'a Dataset, basis: &'a BasisSpec },
}

/// `‖f_θ‖₂` or `‖f_θ‖_c`.
pub fn pseudonorm(theta: &Theta, which: Pseudonorm, source: NormSource<'_>) -> Result<f64> {
    match source {
        NormSource::Model { model, basis } => {
            theta.check_basis(basis)?;
            if !basis.is_linear() {
                return invalid("closed-form pseudonorms need the linear basis");
            }
            let v = model.ambient_covariance(basis.m());
            let t = DVector::from_column_slice(theta.as_slice());
            let q = t.dot(&(&v * &t)).max(0.0);
            Ok(match which {
                Pseudonorm::L2 => (2.0 * q).sqrt(),
                Pseudonorm::Conditional => q.sqrt(),
            })
        }
        NormSource::Data { data, basis } => {
            theta.check_basis(basis)?;
            require_pairs(data.n())?;
            basis.check_data(data)?;
            let n = data.n();
            let mut buf = vec![0.0; basis.m()];
            let mut sq = CompensatedSum::default();
            let mut cond = CompensatedSum::default();
            for i in 0..n {
                let mut row = CompensatedSum::default();
                for j in 0..n {
                    if i != j {
                        let f = crate::model::score_unchecked(theta.as_slice(), basis, data.row(i), data.row(j), &mut buf);
                        sq.add(f * f);
                        row.add(f);
                    }
                }
                let g = row.value() / (n - 1) as f64;
                cond.add(g * g);
            }
            Ok(match which {
                Pseudonorm::L2 => (sq.value() / (n * (n - 1)) as f64).sqrt(),
                // a sample mean of squares, so ‖·‖_c ≤ ‖·‖₂ holds exactly here too
                Pseudonorm::Conditional => (cond.value() / n as f64).sqrt(),
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompatibilityMode {
    EigenLowerBound,
    ConeSearch,
}

fn check_support(s: &[usize], m: usize) -> Result<()> {
    if s.is_empty() {
        return invalid("support must be nonempty");
    }
    let mut sorted = s.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != s.len() || sorted.last().is_some_and(|&k| k >= m) {
        return invalid(format!("support must hold distinct indices below {m}"));
    }
    Ok(())
}

/// `A(S)` such that `|θ_S|₁ ≤ ‖f_θ‖ √|S| / A(S)` on the cone
/// `|θ_{S'}|₁ ≤ 3|θ_S|₁`, with `‖f_θ‖² = θᵀΣθ`.
///
/// `EigenLowerBound` returns `√ρ`. `ConeSearch` computes
/// `√(|S| · min θᵀΣθ)` over `|θ_S|₁ = 1, |θ_{S'}|₁ ≤ 3`: one convex program per
/// sign pattern of `θ_S`, each solved to a certified lower bound, so the
/// result never exceeds the true constant by more than rounding. Past 512
/// sign patterns it samples 20 of them instead.
pub fn compatibility_constant(gram: &GramMatrix, support: &[usize], mode: CompatibilityMode) -> Result<f64> {
    let m = gram.m();
    check_support(support, m)?;
    let eig = gram.smallest_eigenvalue().max(0.0).sqrt();
    match mode {
        CompatibilityMode::EigenLowerBound => Ok(eig),
        CompatibilityMode::ConeSearch => {
            if m > MAX_CONE_DIM {
                return Err(Error::SizeLimit(format!("cone search supports m <= {MAX_CONE_DIM}, got {m}")));
            }
            let s = support.len();
            let patterns: Vec<u64> = if s <= 10 {
                // the overall sign is irrelevant, so fix the first entry to +
                (0..1u64 << (s - 1)).collect()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_c0de);
                (0..20).map(|_| rng.random::<u64>() & ((1u64 << (s - 1)) - 1)).collect()
            };
            let mut best = f64::INFINITY;
            for p in patterns {
                let signs: Vec<f64> = (0..s).map(|i| if i > 0 && (p >> (i - 1)) & 1 == 1 { -1.0 } else { 1.0 }).collect();
                best = best.min(cone_pattern_lower_bound(gram, support, &signs));
            }
            Ok((best.max(0.0) * s as f64).sqrt().max(eig))
        }
    }
}

/// Lower bound on `min θᵀΣθ` over `θ_S = signs ∘ u` with `u` in the simplex
/// and `|θ_{S'}|₁ ≤ 3`, via accelerated projected gradient and the
/// Frank-Wolfe gap.
fn cone_pattern_lower_bound(gram: &GramMatrix, support: &[usize], signs: &[f64]) -> f64 {
    let m = gram.m();
    let sig = gram.sigma();
    let lmax = SymmetricEigen::new(sig.clone()).eigenvalues.max();
    if lmax <= 0.0 {
        return 0.0;
    }
    let mut in_s = vec![None; m];
    for (pos, &k) in support.iter().enumerate() {
        in_s[k] = Some(pos);
    }
    let rest: Vec<usize> = (0..m).filter(|k| in_s[*k].is_none()).collect();
    let s = support.len() as f64;
    let mut x = DVector::zeros(m);
    for (pos, &k) in support.iter().enumerate() {
        x[k] = signs[pos] / s;
    }
    let mut y = x.clone();
    let mut t: f64 = 1.0;
    let step = 1.0 / (2.0 * lmax);
    let mut lower = f64::NEG_INFINITY;
    let mut u = vec![0.0; support.len()];
    let mut v = vec![0.0; rest.len()];
    for it in 0..20_000 {
        let gx = sig * &x * 2.0;
        let fx = x.dot(&(sig * &x));
        // linear minimization over the product set gives the gap
        let mut lin = 0.0;
        let mut min_s = f64::INFINITY;
        for (pos, &k) in support.iter().enumerate() {
            min_s = min_s.min(signs[pos] * gx[k]);
        }
        lin += min_s;
        let max_r = rest.iter().map(|&k| gx[k].abs()).fold(0.0, f64::max);
        lin -= 3.0 * max_r;
        lower = lower.max(fx + lin - gx.dot(&x));
        if fx - lower <= 1e-12 * fx.max(1e-300) || fx - lower <= 1e-15 {
            break;
        }
        let gy = sig * &y * 2.0;
        let z = &y - gy * step;
        for (pos, &k) in support.iter().enumerate() {
            u[pos] = signs[pos] * z[k];
        }
        project_simplex(&mut u, 1.0);
        for (pos, &k) in rest.iter().enumerate() {
            v[pos] = z[k];
        }
        project_l1_ball(&mut v, 3.0);
        let mut nx = DVector::zeros(m);
        for (pos, &k) in support.iter().enumerate() {
            nx[k] = signs[pos] * u[pos];
        }
        for (pos, &k) in rest.iter().enumerate() {
            nx[k] = v[pos];
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let fnx = nx.dot(&(sig * &nx));
        if fnx > fx && it > 0 {
            t = 1.0;
            y = x.clone();
            continue;
        }
        y = &nx + (&nx - &x) * ((t - 1.0) / t_next);
        x = nx;
        t = t_next;
    }
    lower
}

/// Euclidean projection onto `{u ≥ 0, Σu = r}`.
fn project_simplex(u: &mut [f64], r: f64) {
    let mut sorted = u.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, s) in sorted.iter().enumerate() {
        cum += s;
        let t = (cum - r) / (i + 1) as f64;
        if s - t > 0.0 {
            theta = t;
        }
    }
    for x in u.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}

/// Euclidean projection onto `{|v|₁ ≤ r}`.
fn project_l1_ball(v: &mut [f64], r: f64) {
    if v.iter().map(|x| x.abs()).sum::<f64>() <= r {
        return;
    }
    let mut a: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    project_simplex(&mut a, r);
    for (x, p) in v.iter_mut().zip(a) {
        *x = x.signum() * p;
    }
}

/// The margin function `G(u) = a u^{2/α}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MarginParams", into = "MarginParams")]
pub struct MarginSpec {
    a: f64,
    alpha: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct MarginParams {
    a: f64,
    alpha: f64,
}

impl TryFrom<MarginParams> for MarginSpec {
    type Error = Error;
    fn try_from(p: MarginParams) -> Result<Self> {
        MarginSpec::new(p.a, p.alpha)
    }
}

impl From<MarginSpec> for MarginParams {
    fn from(m: MarginSpec) -> Self {
        MarginParams { a: m.a, alpha: m.alpha }
    }
}

impl MarginSpec {
    pub fn new(a: f64, alpha: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return invalid("margin constant a must be positive");
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return invalid("alpha must lie in (0, 1]");
        }
        Ok(Self { a, alpha })
    }

    /// The margin implied by a margin constant: `a = [B(α) 2^{2-α}]^{-1/α}`.
    pub fn from_margin_constant(b_alpha: f64, alpha: f64) -> Result<Self> {
        if !(b_alpha > 0.0 && b_alpha.is_finite()) {
            return invalid("B(alpha) must be positive and finite");
        }
        Self::new((b_alpha * 2f64.powf(2.0 - alpha)).powf(-1.0 / alpha), alpha)
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn g(&self, u: f64) -> f64 {
        self.a * u.max(0.0).powf(2.0 / self.alpha)
    }

    /// `H(v) = sup_{u ≥ 0} (uv - G(u))`.
    pub fn h(&self, v: f64) -> f64 {
        let al = self.alpha;
        if v <= 0.0 {
            return 0.0;
        }
        (2.0 - al) / 2.0 * (al / (2.0 * self.a)).powf(al / (2.0 - al)) * v.powf(2.0 / (2.0 - al))
    }
}

/// The convex conjugate of the margin function.
pub fn conjugate_h(margin: &MarginSpec) -> impl Fn(f64) -> f64 {
    let m = *margin;
    move |v| m.h(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginConstant {
    /// `sup_x E_{X'} |2η(x, X') - 1|^{-α}` over the sampled `x`; infinite when
    /// divergent.
    pub estimate: f64,
    pub stderr: f64,
    pub divergent: bool,
    pub outer_samples: usize,
    pub inner_samples: usize,
}

const MARGIN_OUTER: usize = 64;

/// Monte Carlo `B(α)`. The inner expectation reduces to one dimension,
/// `θ₀ᵀ(x - X') ~ N(θ₀ᵀx, θ₀ᵀVθ₀)`, and is estimated with stratified normal
/// draws shared across the outer points.
pub fn margin_constant_mc(model: &SyntheticModel, alpha: f64, mc_samples: usize, rng_seed: u64) -> Result<MarginConstant> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid("alpha must lie in (0, 1)");
    }
    if mc_samples < 2 {
        return invalid("need at least 2 Monte Carlo samples");
    }
    let theta0 = DVector::from_column_slice(model.theta0());
    let spread = theta0.dot(&(model.covariance() * &theta0)).max(0.0).sqrt();
    if theta0.iter().all(|t| *t == 0.0) {
        return Ok(MarginConstant {
            estimate: f64::INFINITY,
            stderr: f64::NAN,
            divergent: true,
            outer_samples: 0,
            inner_samples: mc_samples,
        });
    }
    let sigma = model.sigma_noise();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let strata = mc_samples - mc_samples % 2;
    let z: Vec<f64> = (0..strata)
        .map(|j| {
            let u = (j as f64 + rng.random::<f64>()) / strata as f64;
            std::f64::consts::SQRT_2 * erf_inv(2.0 * u - 1.0)
        })
        .collect();
    let outer: Vec<f64> = (0..MARGIN_OUTER).map(|_| spread * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut best = (f64::NEG_INFINITY, 0.0);
    let mut divergent = false;
    for &a in &outer {
        let vals: Vec<f64> = z
            .iter()
            .map(|zj| {
                let t = a - spread * zj;
                (2.0 * eta_of_signal(t, sigma) - 1.0).abs().powf(-alpha)
            })
            .collect();
        if vals.iter().any(|v| !v.is_finite()) {
            divergent = true;
            continue;
        }
        let mean = vals.iter().sum::<f64>() / strata as f64;
        // neighbouring strata pairs give the stratified variance estimate
        let var: f64 = vals.chunks(2).map(|p| (p[0] - p[1]).powi(2) / 2.0).sum::<f64>() / (strata as f64).powi(2);
        if mean > best.0 {
            best = (mean, var.sqrt());
        }
    }
    if divergent {
        return Ok(MarginConstant {
            estimate: f64::INFINITY,
            stderr: f64::NAN,
            divergent: true,
            outer_samples: MARGIN_OUTER,
            inner_samples: strata,
        });
    }
    Ok(MarginConstant { estimate: best.0, stderr: best.1, divergent: false, outer_samples: MARGIN_OUTER, inner_samples: strata })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginEntry {
    pub theta: Vec<f64>,
    pub lhs: f64,
    pub lhs_stderr: f64,
    pub rhs: f64,
    pub rhs_stderr: f64,
    pub violated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub alpha: f64,
    pub b_alpha: f64,
    /// `[B(α) 2^{2-α}]^{-1/α}`.
    pub constant: f64,
    pub entries: Vec<MarginEntry>,
    pub violations: usize,
}

/// Checks `Q(f) - Q(f⁰) ≥ [B(α)2^{2-α}]^{-1/α} ‖f - f⁰‖_c^{2/α}` for hinge
/// loss and clipped linear scores `f = clip(θᵀ(x - x'), -1, 1)`.
///
/// The left side is `E|f - f⁰||2η - 1|` over fresh pairs. For `‖·‖_c²` each
/// outer `X` gets two independent inner batches whose means multiply to an
/// unbiased estimate of `(E_{X'}(f - f⁰))²`. An entry is a violation when the
/// left side falls short by more than three combined standard errors.
pub fn margin_inequality_check(
    model: &SyntheticModel,
    thetas: &[Theta],
    alpha: f64,
    b_alpha: f64,
    mc_samples: usize,
    rng_seed: u64,
) -> Result<MarginReport> {
    let margin = MarginSpec::from_margin_constant(b_alpha, alpha)?;
    if mc_samples < 100 {
        return invalid("margin check needs at least 100 Monte Carlo samples");
    }
    let d = model.dim();
    if let Some(t) = thetas.iter().find(|t| t.len() != d) {
        return invalid(format!("theta has {} coordinates, model has {d}", t.len()));
    }
    let sigma = model.sigma_noise();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let eig = SymmetricEigen::new(model.covariance().clone());
    let factor = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        (&factor * z).iter().copied().collect()
    };
    // pairs for the risk side
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..mc_samples).map(|_| (draw(&mut rng), draw(&mut rng))).collect();
    // outer points with two inner batches for the pseudonorm side
    let inner = 8usize;
    let outer_n = (mc_samples / (2 * inner)).max(50);
    let nested: Vec<(Vec<f64>, Vec<Vec<f64>>)> =
        (0..outer_n).map(|_| (draw(&mut rng), (0..2 * inner).map(|_| draw(&mut rng)).collect())).collect();
    let bayes = |t: f64| if t >= 0.0 { 1.0 } else { -1.0 };
    let dotp = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut entries = Vec::with_capacity(thetas.len());
    for th in thetas {
        let th = th.as_slice();
        let diff = |x: &[f64], xp: &[f64]| {
            let u: Vec<f64> = x.iter().zip(xp).map(|(a, b)| a - b).collect();
            let f = dotp(th, &u).clamp(-1.0, 1.0);
            let s = dotp(model.theta0(), &u);
            (f - bayes(s), s)
        };
        let risk: Vec<f64> = pairs
            .iter()
            .map(|(x, xp)| {
                let (g, s) = diff(x, xp);
                g.abs() * (2.0 * eta_of_signal(s, sigma) - 1.0).abs()
            })
            .collect();
        let (lhs, lhs_var) = crate::urisk::mean_var(&risk);
        let prods: Vec<f64> = nested
            .iter()
            .map(|(x, xs)| {
                let h1 = xs[..inner].iter().map(|xp| diff(x, xp).0).sum::<f64>() / inner as f64;
                let h2 = xs[inner..].iter().map(|xp| diff(x, xp).0).sum::<f64>() / inner as f64;
                h1 * h2
            })
            .collect();
        let (nc, nc_var) = crate::urisk::mean_var(&prods);
        let nc_se = (nc_var / prods.len() as f64).sqrt();
        let p = 1.0 / alpha;
        let nc_pos = nc.max(0.0);
        let rhs = margin.a() * nc_pos.powf(p);
        let rhs_se = margin.a() * p * nc_pos.powf(p - 1.0) * nc_se;
        let lhs_se = (lhs_var / risk.len() as f64).sqrt();
        let violated = lhs - rhs < -3.0 * (lhs_se * lhs_se + rhs_se * rhs_se).sqrt();
        entries.push(MarginEntry { theta: th.to_vec(), lhs, lhs_stderr: lhs_se, rhs, rhs_stderr: rhs_se, violated });
    }
    let violations = entries.iter().filter(|e| e.violated).count();
    Ok(MarginReport { alpha, b_alpha, constant: margin.a(), entries, violations })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub support: Vec<usize>,
    /// `A(S)`; absent for the empty support.
    pub a: Option<f64>,
    /// Monte Carlo `Q(f_θ) - Q(f⁰)` at the best `θ` on `S`, floored at 0.
    pub approximation: f64,
    pub criterion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub theta_star: Theta,
    pub s_star: Vec<usize>,
    /// `A(S*)`; absent when `S*` is empty.
    pub a_star: Option<f64>,
    pub epsilon_star: f64,
    pub delta: f64,
    pub lambda_n: f64,
    pub margin: MarginSpec,
    /// `Q(f_θ*) - Q(f⁰)`, floored at 0.
    pub approximation: f64,
    pub candidates: Vec<CandidateScore>,
}

impl OracleResult {
    /// `(1+4δ)·approximation + 8δ·H(λ_n √|S*| / (δ A*))`.
    pub fn recompute_epsilon(&self) -> f64 {
        criterion(self.approximation, self.s_star.len(), self.a_star, self.lambda_n, self.delta, &self.margin)
    }
}

fn criterion(approx: f64, s: usize, a: Option<f64>, lambda_n: f64, delta: f64, margin: &MarginSpec) -> f64 {
    let h = match a {
        None => 0.0,
        Some(a) if a > 0.0 => margin.h(lambda_n * (s as f64).sqrt() / (delta * a)),
        Some(_) => f64::INFINITY,
    };
    (1.0 + 4.0 * delta) * approx + 8.0 * delta * h
}

/// Minimizes the oracle criterion over candidate supports using fresh Monte
/// Carlo pairs from the model. The basis must be linear.
#[allow(clippy::too_many_arguments)]
pub fn oracle_search(
    model: &SyntheticModel,
    basis: &BasisSpec,
    loss: &LossSpec,
    lambda_n: f64,
    delta: f64,
    margin: &MarginSpec,
    pseudonorm: Pseudonorm,
    candidate_supports: &[Vec<usize>],
    inner_mc: usize,
    rng_seed: u64,
) -> Result<OracleResult> {
    if !basis.is_linear() {
        return invalid("oracle search needs the linear basis");
    }
    check_oracle_args(basis.m(), lambda_n, delta, candidate_supports)?;
    let eval = ExcessRiskEvaluator::new(model, loss, basis.m(), inner_mc, rng_seed)?;
    oracle_search_with(model, &eval, lambda_n, delta, margin, pseudonorm, candidate_supports)
}

fn check_oracle_args(m: usize, lambda_n: f64, delta: f64, candidates: &[Vec<usize>]) -> Result<()> {
    if !(delta > 0.0 && delta < 0.25) {
        return invalid("delta must lie in (0, 1/4)");
    }
    if !(lambda_n >= 0.0 && lambda_n.is_finite()) {
        return invalid("lambda_n must be nonnegative and finite");
    }
    if candidates.is_empty() {
        return invalid("no candidate supports");
    }
    if candidates.len() > MAX_CANDIDATES {
        return Err(Error::SizeLimit(format!("{} candidate supports exceed {MAX_CANDIDATES}", candidates.len())));
    }
    for s in candidates {
        if s.len() > MAX_ORACLE_SUPPORT {
            return Err(Error::SizeLimit(format!("support of size {} exceeds {MAX_ORACLE_SUPPORT}", s.len())));
        }
        if !s.is_empty() {
            check_support(s, m)?;
        }
    }
    Ok(())
}

pub(crate) fn oracle_search_with(
    model: &SyntheticModel,
    eval: &ExcessRiskEvaluator,
    lambda_n: f64,
    delta: f64,
    margin: &MarginSpec,
    pseudonorm: Pseudonorm,
    candidate_supports: &[Vec<usize>],
) -> Result<OracleResult> {
    let m = eval_dim(eval, model);
    check_oracle_args(m, lambda_n, delta, candidate_supports)?;
    let v = model.ambient_covariance(m);
    let sigma = match pseudonorm {
        Pseudonorm::L2 => v * 2.0,
        Pseudonorm::Conditional => v,
    };
    let gram = GramMatrix::new(sigma, GramSource::ClosedFormLinearGaussian)?;
    let mode = if m <= MAX_CONE_DIM { CompatibilityMode::ConeSearch } else { CompatibilityMode::EigenLowerBound };
    let mut candidates = Vec::with_capacity(candidate_supports.len());
    let mut best: Option<(f64, Vec<f64>, usize)> = None;
    for (idx, s) in candidate_supports.iter().enumerate() {
        let mut sorted = s.clone();
        sorted.sort_unstable();
        let a = if sorted.is_empty() { None } else { Some(compatibility_constant(&gram, &sorted, mode)?) };
        let (theta, approx) = restricted_minimizer(eval, &sorted, m)?;
        let approx = approx.max(0.0);
        let crit = criterion(approx, sorted.len(), a, lambda_n, delta, margin);
        candidates.push(CandidateScore { support: sorted, a, approximation: approx, criterion: crit });
        if best.as_ref().is_none_or(|b| crit < b.0) {
            best = Some((crit, theta, idx));
        }
    }
    let (eps, theta, idx) = best.expect("candidates are nonempty");
    let chosen = &candidates[idx];
    let mut theta_star = Theta::new(theta)?;
    // coordinates outside S* are exactly zero by construction
    let s_star = chosen.support.clone();
    if theta_star.support() != s_star {
        let mut t = theta_star.into_inner();
        for (k, v) in t.iter_mut().enumerate() {
            if !s_star.contains(&k) {
                *v = 0.0;
            }
        }
        theta_star = Theta::new(t)?;
    }
    Ok(OracleResult {
        theta_star,
        s_star,
        a_star: chosen.a,
        epsilon_star: eps,
        delta,
        lambda_n,
        margin: *margin,
        approximation: chosen.approximation,
        candidates,
    })
}

fn eval_dim(eval: &ExcessRiskEvaluator, model: &SyntheticModel) -> usize {
    eval.ambient_dim().max(model.dim())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_linear_basis;

    #[test]
    fn gram_small_example() {
        let data = Dataset::from_rows(&[vec![1.0], vec![2.0], vec![4.0]], vec![0.0, 1.0, 2.0]).unwrap();
        let g = gram_empirical(&data, &make_linear_basis(1).unwrap()).unwrap();
        assert!((g.sigma()[(0, 0)] - 14.0 / 3.0).abs() < 1e-13);
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, i as f64]).collect();
        let data = Dataset::from_rows(&rows, (0..6).map(f64::from).collect()).unwrap();
        let g = gram_empirical(&data, &make_linear_basis(2).unwrap()).unwrap();
        assert!(g.smallest_eigenvalue().abs() < 1e-10);
    }

    #[test]
    fn pseudonorm_closed_forms() {
        let model = SyntheticModel::isotropic(vec![1.0, 0.0], 1.0).unwrap();
        let b = make_linear_basis(2).unwrap();
        let th = Theta::new(vec![1.0, 0.0]).unwrap();
        let src = NormSource::Model { model: &model, basis: &b };
        assert!((pseudonorm(&th, Pseudonorm::L2, src).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!((pseudonorm(&th, Pseudonorm::Conditional, src).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(pseudonorm(&Theta::zeros(2), Pseudonorm::L2, src).unwrap(), 0.0);
        assert_eq!(pseudonorm(&Theta::zeros(2), Pseudonorm::Conditional, src).unwrap(), 0.0);
        assert!(pseudonorm(&Theta::zeros(3), Pseudonorm::L2, src).is_err());
    }

    #[test]
    fn compatibility_examples() {
        let id = GramMatrix::new(DMatrix::identity(4, 4), GramSource::ClosedFormLinearGaussian).unwrap();
        for s in [vec![0], vec![1, 2], vec![0, 1, 3]] {
            let e = compatibility_constant(&id, &s, CompatibilityMode::EigenLowerBound).unwrap();
            let c = compatibility_constant(&id, &s, CompatibilityMode::ConeSearch).unwrap();
            assert!((e - 1.0).abs() < 1e-12);
            assert!(c >= e - 1e-12);
            // at Σ = I the infimum is attained at θ_S uniform, θ_{S'} = 0
            assert!((c - 1.0).abs() < 1e-5, "{c}");
        }
        let q = GramMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![0.25, 1.0])), GramSource::EmpiricalPairs).unwrap();
        assert!((compatibility_constant(&q, &[1], CompatibilityMode::EigenLowerBound).unwrap() - 0.5).abs() < 1e-12);
        assert!(compatibility_constant(&id, &[], CompatibilityMode::ConeSearch).is_err());
        let big = GramMatrix::new(DMatrix::identity(31, 31), GramSource::EmpiricalPairs).unwrap();
        assert!(matches!(compatibility_constant(&big, &[0], CompatibilityMode::ConeSearch), Err(Error::SizeLimit(_))));
    }

    #[test]
    fn projections() {
        let mut u = vec![0.5, 2.0, -1.0];
        project_simplex(&mut u, 1.0);
        assert!((u.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(u.iter().all(|x| *x >= 0.0));
        assert_eq!(u, vec![0.0, 1.0, 0.0]);
        let mut v = vec![3.0, -3.0];
        project_l1_ball(&mut v, 3.0);
        assert_eq!(v, vec![1.5, -1.5]);
        let mut w = vec![0.5, -0.5];
        project_l1_ball(&mut w, 3.0);
        assert_eq!(w, vec![0.5, -0.5]);
    }

    #[test]
    fn conjugate_examples() {
        let m = MarginSpec::new(1.0, 1.0).unwrap();
        assert!((m.h(2.0) - 1.0).abs() < 1e-15);
        assert!((m.h(3.0) - 2.25).abs() < 1e-15);
        assert_eq!(m.h(0.0), 0.0);
        assert_eq!(MarginSpec::new(0.3, 0.4).unwrap().h(0.0), 0.0);
        assert!(MarginSpec::new(0.0, 0.5).is_err());
        assert!(MarginSpec::new(1.0, 1.5).is_err());
    }

    #[test]
    fn margin_constant_edge_cases() {
        let zero = SyntheticModel::isotropic(vec![0.0, 0.0], 0.5f64.sqrt()).unwrap();
        assert!(margin_constant_mc(&zero, 0.5, 1000, 1).unwrap().divergent);
        let model = SyntheticModel::isotropic(vec![1.0, 0.0, 0.0], 0.5f64.sqrt()).unwrap();
        assert!(margin_constant_mc(&model, 1.0, 1000, 1).is_err());
        let tiny = margin_constant_mc(&model, 1e-6, 2000, 1).unwrap();
        assert!((tiny.estimate - 1.0).abs() < 1e-3);
    }

    #[test]
    fn oracle_argument_checks() {
        let model = SyntheticModel::sparse(3, 1, 1.0, 0.5).unwrap();
        let b = make_linear_basis(3).unwrap();
        let l = LossSpec::logistic();
        let mg = MarginSpec::new(1.0, 1.0).unwrap();
        let run = |delta: f64, c: &[Vec<usize>]| oracle_search(&model, &b, &l, 0.1, delta, &mg, Pseudonorm::Conditional, c, 2000, 1);
        assert!(run(0.3, &[vec![0]]).is_err());
        assert!(run(0.1, &[]).is_err());
        assert!(matches!(run(0.1, &[vec![0, 1, 2, 3, 4]]), Err(Error::SizeLimit(_)) | Err(Error::InvalidArgument(_))));
        let too_many: Vec<Vec<usize>> = (0..501).map(|_| vec![0]).collect();
        assert!(matches!(run(0.1, &too_many), Err(Error::SizeLimit(_))));
    }
}
