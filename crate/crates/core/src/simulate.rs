//! Gaussian linear model, Monte Carlo excess risk, and the rate-sweep and
//! oracle-inequality frequency experiments.
//!
//! The model is `Y = θ₀ᵀX + ε` with `X ~ N(0, V)` and `ε ~ N(0, σ²)`. Extra
//! ambient coordinates beyond `dim(θ₀)` are independent standard normals that
//! carry no signal.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::diagnostics::{oracle_search_with, MarginSpec, OracleResult, Pseudonorm};
use crate::error::{invalid, require_pairs, Error, Result};
use crate::model::{dot, make_linear_basis, score_unchecked, sign, BasisSpec, Dataset, LossKind, LossSpec, Theta};
use crate::solver::{fit_lasso, minimize, threshold_support, ConvexRisk, SolverOptions};
use crate::tuning::{cross_validate_lambda, estimate_c_hat, lambda_hat, lambda_theoretical, LambdaGrid};
use crate::urisk::Surrogate;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelParams", into = "ModelParams")]
pub struct SyntheticModel {
    theta0: Vec<f64>,
    v: DMatrix<f64>,
    sigma_noise: f64,
    // V = F Fᵀ
    factor: DMatrix<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelParams {
    theta0: Vec<f64>,
    v: Vec<Vec<f64>>,
    sigma_noise: f64,
}

impl TryFrom<ModelParams> for SyntheticModel {
    type Error = Error;
    fn try_from(p: ModelParams) -> Result<Self> {
        let d = p.theta0.len();
        if p.v.len() != d || p.v.iter().any(|r| r.len() != d) {
            return invalid(format!("V must be {d} x {d}"));
        }
        let v = DMatrix::from_fn(d, d, |i, j| p.v[i][j]);
        SyntheticModel::new(p.theta0, v, p.sigma_noise)
    }
}

impl From<SyntheticModel> for ModelParams {
    fn from(m: SyntheticModel) -> Self {
        let d = m.dim();
        ModelParams {
            v: (0..d).map(|i| (0..d).map(|j| m.v[(i, j)]).collect()).collect(),
            theta0: m.theta0,
            sigma_noise: m.sigma_noise,
        }
    }
}

impl SyntheticModel {
    pub fn new(theta0: Vec<f64>, v: DMatrix<f64>, sigma_noise: f64) -> Result<Self> {
        let d = theta0.len();
        if d == 0 {
            return invalid("theta0 must have at least one coordinate");
        }
        if theta0.iter().any(|t| !t.is_finite()) {
            return invalid("theta0 must be finite");
        }
        if v.nrows() != d || v.ncols() != d {
            return invalid(format!("V must be {d} x {d}"));
        }
        if !(sigma_noise >= 0.0 && sigma_noise.is_finite()) {
            return invalid("sigma_noise must be nonnegative and finite");
        }
        let scale = v.amax().max(1.0);
        if v.iter().any(|x| !x.is_finite()) || (&v - v.transpose()).amax() > 1e-12 * scale {
            return invalid("V must be a finite symmetric matrix");
        }
        let eig = SymmetricEigen::new(v.clone());
        if eig.eigenvalues.min() < -1e-10 * scale {
            return invalid("V is not positive semidefinite");
        }
        let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let factor = &eig.eigenvectors * DMatrix::from_diagonal(&roots);
        Ok(Self { theta0, v, sigma_noise, factor })
    }

    /// `V = I`.
    pub fn isotropic(theta0: Vec<f64>, sigma_noise: f64) -> Result<Self> {
        let d = theta0.len();
        Self::new(theta0, DMatrix::identity(d, d), sigma_noise)
    }

    /// `θ₀` with `amplitude` on the first `s` of `d` coordinates, `V = I`.
    pub fn sparse(d: usize, s: usize, amplitude: f64, sigma_noise: f64) -> Result<Self> {
        if s > d {
            return invalid("sparsity exceeds dimension");
        }
        let theta0 = (0..d).map(|k| if k < s { amplitude } else { 0.0 }).collect();
        Self::isotropic(theta0, sigma_noise)
    }

    pub fn dim(&self) -> usize {
        self.theta0.len()
    }

    pub fn theta0(&self) -> &[f64] {
        &self.theta0
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// `Var(X)` for an ambient dimension, extended by the identity.
    pub fn ambient_covariance(&self, d_ambient: usize) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d_ambient, d_ambient, |i, j| {
            if i < d && j < d {
                self.v[(i, j)]
            } else if i == j {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn sigma_noise(&self) -> f64 {
        self.sigma_noise
    }

    /// `θ₀ᵀx` using the first `dim(θ₀)` coordinates of `x`.
    #[inline]
    pub fn signal(&self, x: &[f64]) -> f64 {
        dot(&self.theta0, &x[..self.dim()])
    }

    fn draw_x(&self, rng: &mut impl Rng, d_ambient: usize, z: &mut [f64], out: &mut [f64]) {
        let d = self.dim();
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        for (i, o) in out.iter_mut().enumerate().take(d) {
            *o = (0..d).map(|j| self.factor[(i, j)] * z[j]).sum();
        }
        for o in out.iter_mut().take(d_ambient).skip(d) {
            *o = rng.sample(StandardNormal);
        }
    }
}

/// `n` draws of `(X, Y)` in `d_ambient` dimensions, reproducible from the seed.
pub fn generate(model: &SyntheticModel, n: usize, d_ambient: usize, rng_seed: u64) -> Result<Dataset> {
    generate_with_rng(model, n, d_ambient, &mut ChaCha8Rng::seed_from_u64(rng_seed))
}

pub(crate) fn generate_with_rng(model: &SyntheticModel, n: usize, d_ambient: usize, rng: &mut impl Rng) -> Result<Dataset> {
    if d_ambient < model.dim() {
        return invalid(format!("ambient dimension {d_ambient} is below the model dimension {}", model.dim()));
    }
    require_pairs(n)?;
    let mut z = vec![0.0; model.dim()];
    let mut x = vec![0.0; n * d_ambient];
    let mut y = Vec::with_capacity(n);
    for row in x.chunks_mut(d_ambient) {
        model.draw_x(rng, d_ambient, &mut z, row);
        let eps: f64 = rng.sample(StandardNormal);
        y.push(model.signal(row) + model.sigma_noise * eps);
    }
    Dataset::from_flat(x, y, d_ambient)
}

/// Standard normal distribution function.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Bayes ranking rule `sign(θ₀ᵀ(x - x'))`, with ties sent to `+1`.
pub fn bayes_score(model: &SyntheticModel, x: &[f64], xp: &[f64]) -> f64 {
    let t = model.signal(x) - model.signal(xp);
    if t >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `P(Y > Y' | x, x') = Φ(θ₀ᵀ(x - x') / (σ√2))`; a step function when `σ = 0`.
pub fn eta(model: &SyntheticModel, x: &[f64], xp: &[f64]) -> f64 {
    eta_of_signal(model.signal(x) - model.signal(xp), model.sigma_noise)
}

#[inline]
pub(crate) fn eta_of_signal(t: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        if t > 0.0 {
            1.0
        } else if t < 0.0 {
            0.0
        } else {
            0.5
        }
    } else {
        std_normal_cdf(t / (sigma * std::f64::consts::SQRT_2))
    }
}

/// The rule excess risk is measured against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ReferenceRule {
    /// The Bayes rule `sign(θ₀ᵀ(x - x'))` (hinge loss).
    BayesSign,
    /// The best linear rule, which lies on the ray `c·θ₀` (smooth losses).
    Ray { scale: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcessRisk {
    pub estimate: f64,
    pub stderr: f64,
    pub pairs: usize,
}

/// Fresh Monte Carlo pairs from a model, with the reference rule's loss
/// precomputed per pair so that excess risks use common random numbers.
pub struct ExcessRiskEvaluator {
    loss: LossSpec,
    d_ambient: usize,
    xs: Vec<f64>,
    xps: Vec<f64>,
    signs: Vec<f64>,
    reference_loss: Vec<f64>,
    reference: ReferenceRule,
}

impl ExcessRiskEvaluator {
    pub fn new(model: &SyntheticModel, loss: &LossSpec, d_ambient: usize, mc_pairs: usize, rng_seed: u64) -> Result<Self> {
        if mc_pairs < 1000 {
            return invalid("excess risk needs at least 1000 Monte Carlo pairs");
        }
        if d_ambient < model.dim() {
            return invalid("ambient dimension below model dimension");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut z = vec![0.0; model.dim()];
        let mut xs = vec![0.0; mc_pairs * d_ambient];
        let mut xps = vec![0.0; mc_pairs * d_ambient];
        let mut signs = Vec::with_capacity(mc_pairs);
        let mut signal_diff = Vec::with_capacity(mc_pairs);
        for p in 0..mc_pairs {
            let x = &mut xs[p * d_ambient..(p + 1) * d_ambient];
            model.draw_x(&mut rng, d_ambient, &mut z, x);
            let xp = &mut xps[p * d_ambient..(p + 1) * d_ambient];
            model.draw_x(&mut rng, d_ambient, &mut z, xp);
            let e1: f64 = rng.sample(StandardNormal);
            let e2: f64 = rng.sample(StandardNormal);
            let u = model.signal(&xs[p * d_ambient..(p + 1) * d_ambient]) - model.signal(&xps[p * d_ambient..(p + 1) * d_ambient]);
            signs.push(sign(u + model.sigma_noise * (e1 - e2)));
            signal_diff.push(u);
        }
        let reference = if loss.kind() == LossKind::Hinge {
            ReferenceRule::BayesSign
        } else {
            ReferenceRule::Ray { scale: best_ray_scale(loss, &signs, &signal_diff) }
        };
        let reference_loss = signs
            .iter()
            .zip(&signal_diff)
            .map(|(s, u)| match reference {
                ReferenceRule::BayesSign => loss.value(s * if *u >= 0.0 { 1.0 } else { -1.0 }),
                ReferenceRule::Ray { scale } => loss.value(s * scale * u),
            })
            .collect();
        Ok(Self { loss: *loss, d_ambient, xs, xps, signs, reference_loss, reference })
    }

    pub fn ambient_dim(&self) -> usize {
        self.d_ambient
    }

    pub fn pairs(&self) -> usize {
        self.signs.len()
    }

    pub fn reference(&self) -> ReferenceRule {
        self.reference
    }

    /// Monte Carlo risk `Q(f⁰)` of the reference rule.
    pub fn reference_risk(&self) -> f64 {
        self.reference_loss.iter().sum::<f64>() / self.pairs() as f64
    }

    fn x(&self, p: usize) -> &[f64] {
        &self.xs[p * self.d_ambient..(p + 1) * self.d_ambient]
    }

    fn xp(&self, p: usize) -> &[f64] {
        &self.xps[p * self.d_ambient..(p + 1) * self.d_ambient]
    }

    /// `Q(f) - Q(f⁰)` for an arbitrary scorer.
    pub fn excess_scorer(&self, f: impl Fn(&[f64], &[f64]) -> f64) -> ExcessRisk {
        self.summarize((0..self.pairs()).map(|p| self.loss.value(self.signs[p] * f(self.x(p), self.xp(p))) - self.reference_loss[p]))
    }

    pub fn excess(&self, theta: &Theta, basis: &BasisSpec) -> Result<ExcessRisk> {
        theta.check_basis(basis)?;
        if basis.input_dim() != self.d_ambient {
            return invalid("basis input dimension differs from the evaluator's ambient dimension");
        }
        if basis.is_linear() {
            let support = theta.support();
            let th = theta.as_slice();
            Ok(self.summarize((0..self.pairs()).map(|p| {
                let (x, xp) = (self.x(p), self.xp(p));
                let f: f64 = support.iter().map(|&k| th[k] * (x[k] - xp[k])).sum();
                self.loss.value(self.signs[p] * f) - self.reference_loss[p]
            })))
        } else {
            let mut buf = vec![0.0; basis.m()];
            Ok(self.summarize((0..self.pairs()).map(|p| {
                let f = score_unchecked(theta.as_slice(), basis, self.x(p), self.xp(p), &mut buf);
                self.loss.value(self.signs[p] * f) - self.reference_loss[p]
            })))
        }
    }

    fn summarize(&self, diffs: impl Iterator<Item = f64>) -> ExcessRisk {
        let diffs: Vec<f64> = diffs.collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        ExcessRisk { estimate: mean, stderr: (var / n).sqrt(), pairs: diffs.len() }
    }

    /// The Monte Carlo risk restricted to linear rules supported on `support`.
    pub(crate) fn restricted_risk(&self, support: &[usize]) -> SampledPairRisk {
        let k = support.len();
        let mut design = Vec::with_capacity(self.pairs() * k);
        for p in 0..self.pairs() {
            let (x, xp) = (self.x(p), self.xp(p));
            design.extend(support.iter().map(|&j| self.signs[p] * (x[j] - xp[j])));
        }
        SampledPairRisk { loss: self.loss, k, design, offset: self.reference_risk() }
    }

}

/// Minimizer of `c ↦ mean φ(s_p c u_p)` over `c ≥ 0`.
fn best_ray_scale(loss: &LossSpec, signs: &[f64], u: &[f64]) -> f64 {
    let h = |c: f64| signs.iter().zip(u).map(|(s, u)| loss.value(s * c * u)).sum::<f64>();
    let mut hi = 1.0;
    while hi < 1e6 && h(2.0 * hi) < h(hi) {
        hi *= 2.0;
    }
    let (mut a, mut b) = (0.0, 2.0 * hi);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c1 = b - g * (b - a);
    let mut c2 = a + g * (b - a);
    let (mut h1, mut h2) = (h(c1), h(c2));
    for _ in 0..200 {
        if (b - a) <= 1e-10 * b.max(1.0) {
            break;
        }
        if h1 <= h2 {
            b = c2;
            c2 = c1;
            h2 = h1;
            c1 = b - g * (b - a);
            h1 = h(c1);
        } else {
            a = c1;
            c1 = c2;
            h1 = h2;
            c2 = a + g * (b - a);
            h2 = h(c2);
        }
    }
    0.5 * (a + b)
}

/// `θ_S ↦ mean_p φ(s_p θ_Sᵀ(x_p - x'_p)_S)` on fixed Monte Carlo pairs.
pub(crate) struct SampledPairRisk {
    loss: LossSpec,
    k: usize,
    // sign-folded differences, one row of length k per pair
    design: Vec<f64>,
    offset: f64,
}

impl SampledPairRisk {
    /// Risk minus the reference risk on the same pairs.
    pub(crate) fn excess(&self, theta: &[f64]) -> f64 {
        self.eval(theta, None, None) - self.offset
    }
}

impl ConvexRisk for SampledPairRisk {
    fn dim(&self) -> usize {
        self.k
    }

    fn eval(&self, theta: &[f64], grad: Option<&mut [f64]>, smoothing: Option<f64>) -> f64 {
        let surrogate = Surrogate::new(&self.loss, smoothing);
        let n = (self.design.len() / self.k.max(1)).max(1) as f64;
        if self.k == 0 {
            if let Some(g) = grad {
                g.fill(0.0);
            }
            return surrogate.value(0.0) * self.design.len().max(1) as f64 / n;
        }
        let mut total = 0.0;
        match grad {
            Some(g) => {
                g.fill(0.0);
                for row in self.design.chunks(self.k) {
                    let t = dot(theta, row);
                    total += surrogate.value(t);
                    let c = surrogate.deriv(t);
                    if c != 0.0 {
                        for (gj, r) in g.iter_mut().zip(row) {
                            *gj += c * r;
                        }
                    }
                }
                for gj in g.iter_mut() {
                    *gj /= n;
                }
            }
            None => {
                for row in self.design.chunks(self.k) {
                    total += surrogate.value(dot(theta, row));
                }
            }
        }
        total / n
    }
}

/// Monte Carlo excess risk `Q(f_θ) - Q(f⁰)` from `mc_pairs` fresh pairs.
pub fn excess_risk_mc(
    theta: &Theta,
    basis: &BasisSpec,
    loss: &LossSpec,
    model: &SyntheticModel,
    mc_pairs: usize,
    rng_seed: u64,
) -> Result<ExcessRisk> {
    ExcessRiskEvaluator::new(model, loss, basis.input_dim(), mc_pairs, rng_seed)?.excess(theta, basis)
}

/// Minimizes the Monte Carlo risk over linear rules supported on `support`;
/// returns the full-length coefficient vector and its excess risk.
pub(crate) fn restricted_minimizer(
    eval: &ExcessRiskEvaluator,
    support: &[usize],
    m: usize,
) -> Result<(Vec<f64>, f64)> {
    let risk = eval.restricted_risk(support);
    let mut theta = vec![0.0; m];
    if support.is_empty() {
        return Ok((theta, risk.excess(&[])));
    }
    let opts = SolverOptions { tol: 1e-10, max_iters: 20_000, ..Default::default() };
    let fit = minimize(&risk, 0.0, &vec![0.0; support.len()], &opts)?;
    let local = fit.theta_hat.into_inner();
    for (&k, v) in support.iter().zip(&local) {
        theta[k] = *v;
    }
    Ok((theta, risk.excess(&local)))
}

/// Deterministic per-stream seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut z = base;
    for &t in tags {
        z = splitmix(z ^ splitmix(t.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    z
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// How the penalty level is chosen in a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum LambdaMode {
    /// `λ̂_n = B L √(log m / n) max(Ĉ, 6)`.
    Formula { b: f64 },
    /// K-fold cross-validation over a log grid spanning
    /// `[min_ratio · λ_max, λ_max]`, where `λ_max` zeroes the fit.
    Cv { folds: usize, grid_points: usize, min_ratio: f64 },
    Fixed { value: f64 },
}

/// Oracle used for `|θ̂ - θ*|₁` in a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSearchSpec {
    pub delta: f64,
    pub margin: MarginSpec,
    pub pseudonorm: Pseudonorm,
    pub max_support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSweepConfig {
    pub n_grid: Vec<usize>,
    pub m_grid: Vec<usize>,
    pub s_true: usize,
    pub amplitude: f64,
    pub sigma: f64,
    pub loss: LossSpec,
    pub lambda_mode: LambdaMode,
    pub replications: usize,
    pub seed: u64,
    pub mc_pairs: usize,
    /// Thresholded-Lasso level; defaults to half the smallest true coefficient.
    pub threshold: Option<f64>,
    pub oracle: Option<OracleSearchSpec>,
    pub solver: SolverOptions,
}

impl RateSweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() || self.m_grid.is_empty() {
            return invalid("n_grid and m_grid must be nonempty");
        }
        if self.replications == 0 {
            return invalid("replications must be at least 1");
        }
        if self.n_grid.iter().any(|&n| n < 2) {
            return invalid("every n must be at least 2");
        }
        if self.m_grid.iter().any(|&m| m < self.s_true.max(2)) {
            return invalid("every m must be at least max(s_true, 2)");
        }
        if self.s_true == 0 {
            return invalid("s_true must be at least 1");
        }
        match &self.lambda_mode {
            LambdaMode::Formula { b } if !(*b > 0.0) => invalid("B must be positive"),
            LambdaMode::Cv { folds, grid_points, min_ratio }
                if *folds < 2 || *grid_points == 0 || !(*min_ratio > 0.0 && *min_ratio <= 1.0) =>
            {
                invalid("cv needs folds >= 2, grid_points >= 1 and min_ratio in (0, 1]")
            }
            LambdaMode::Fixed { value } if !(*value >= 0.0) => invalid("fixed lambda must be nonnegative"),
            _ => Ok(()),
        }
    }

    pub fn tau(&self) -> f64 {
        self.threshold.unwrap_or(self.amplitude.abs() / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRecord {
    pub n: usize,
    pub m: usize,
    pub s: usize,
    pub replicate: usize,
    pub excess_risk: f64,
    pub excess_stderr: f64,
    pub l1_to_oracle: f64,
    pub recovered: bool,
    pub lambda: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub n: usize,
    pub m: usize,
    pub median_excess: f64,
    pub mean_excess: f64,
    pub median_l1: f64,
    pub recovery_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub m: usize,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub flag: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSweepResult {
    pub records: Vec<RateRecord>,
    pub cells: Vec<CellSummary>,
    pub slopes: Vec<SlopeFit>,
    /// Per `m`: true when θ* fell back to the true-support minimizer.
    pub oracle_fallback: Vec<(usize, bool)>,
}

impl RateSweepResult {
    pub const CSV_HEADER: &'static str = "n,m,s,replicate,excess_risk,excess_stderr,l1_to_oracle,recovered,lambda,seed";

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                r.n, r.m, r.s, r.replicate, r.excess_risk, r.excess_stderr, r.l1_to_oracle, r.recovered, r.lambda, r.seed
            )?;
        }
        Ok(())
    }

    /// Plot-ready median excess risk per `(m, n)` with the fitted line.
    pub fn write_median_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "m,n,median_excess,fitted")?;
        for c in &self.cells {
            let fit = self.slopes.iter().find(|s| s.m == c.m);
            let fitted = match fit.and_then(|f| f.slope.zip(f.intercept)) {
                Some((b, a)) => (a + b * (c.n as f64).ln()).exp().to_string(),
                None => String::new(),
            };
            writeln!(w, "{},{},{},{}", c.m, c.n, c.median_excess, fitted)?;
        }
        Ok(())
    }
}

pub(crate) fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

/// Least-squares slope and intercept of `ln y` on `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> std::result::Result<(f64, f64), String> {
    let distinct = {
        let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        xs.len()
    };
    if distinct < 2 {
        return Err("insufficient grid".into());
    }
    if points.iter().any(|p| !(p.1 > 0.0)) {
        return Err("nonpositive excess risk".into());
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

fn choose_lambda(
    data: &Dataset,
    basis: &BasisSpec,
    loss: &LossSpec,
    mode: &LambdaMode,
    solver: &SolverOptions,
    seed: u64,
) -> Result<f64> {
    match mode {
        LambdaMode::Fixed { value } => Ok(*value),
        LambdaMode::Formula { b } => {
            let c_hat = estimate_c_hat(data, basis)?;
            lambda_hat(c_hat, loss.lipschitz(), data.n(), basis.m(), *b)
        }
        LambdaMode::Cv { folds, grid_points, min_ratio } => {
            let risk = crate::urisk::UStatRisk::new(data, basis, loss)?;
            let top = crate::solver::lambda_max(&risk, &vec![1.0; basis.m()]);
            let grid = LambdaGrid::log_between(top * min_ratio, top, *grid_points)?;
            let cv = cross_validate_lambda(data, basis, loss, grid.values(), *folds, seed, None, solver)?;
            Ok(cv.best_lambda)
        }
    }
}

fn n_choose_upto(m: usize, k: usize) -> usize {
    let mut total = 0usize;
    let mut c = 1usize;
    for j in 0..=k.min(m) {
        total = total.saturating_add(c);
        c = c.saturating_mul(m - j) / (j + 1);
    }
    total
}

/// All subsets of `{0..m}` with at most `k` elements, smallest first.
pub fn supports_up_to(m: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..k.min(m) {
        let mut next = Vec::new();
        for s in &frontier {
            let from = s.last().map_or(0, |l| l + 1);
            for j in from..m {
                let mut t = s.clone();
                t.push(j);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

struct ReplicateOutcome {
    theta_hat: Theta,
    lambda: f64,
    excess: ExcessRisk,
}

fn run_replicate(
    model: &SyntheticModel,
    basis: &BasisSpec,
    cfg: &RateSweepConfig,
    eval: &ExcessRiskEvaluator,
    n: usize,
    seed: u64,
) -> Result<ReplicateOutcome> {
    let data = generate(model, n, basis.input_dim(), seed)?;
    let lambda = choose_lambda(&data, basis, &cfg.loss, &cfg.lambda_mode, &cfg.solver, derive_seed(seed, &[7]))?;
    let fit = fit_lasso(&data, basis, &cfg.loss, lambda, None, &cfg.solver)?;
    let excess = eval.excess(&fit.theta_hat, basis)?;
    Ok(ReplicateOutcome { theta_hat: fit.theta_hat, lambda, excess })
}

/// Generates data, tunes, fits and scores every `(n, m, replicate)` cell.
pub fn run_rate_sweep(cfg: &RateSweepConfig) -> Result<RateSweepResult> {
    cfg.validate()?;
    let mut records = Vec::new();
    let mut cells = Vec::new();
    let mut slopes = Vec::new();
    let mut fallback = Vec::new();
    let tau = cfg.tau();
    let true_support: Vec<usize> = (0..cfg.s_true).collect();
    for &m in &cfg.m_grid {
        let model = SyntheticModel::sparse(m, cfg.s_true, cfg.amplitude, cfg.sigma)?;
        let basis = make_linear_basis(m)?;
        let eval = ExcessRiskEvaluator::new(&model, &cfg.loss, m, cfg.mc_pairs, derive_seed(cfg.seed, &[1, m as u64]))?;
        let (theta_star, used_fallback) = match &cfg.oracle {
            Some(spec) if n_choose_upto(m, spec.max_support) <= crate::diagnostics::MAX_CANDIDATES => {
                let n_ref = *cfg.n_grid.iter().max().expect("nonempty");
                let c = (2.0 * model.ambient_covariance(m).diagonal().max()).sqrt();
                let lam = lambda_theoretical(c, cfg.loss.lipschitz(), n_ref, m, 998.0)?;
                let res = oracle_search_with(
                    &model,
                    &eval,
                    lam,
                    spec.delta,
                    &spec.margin,
                    spec.pseudonorm,
                    &supports_up_to(m, spec.max_support),
                )?;
                (res.theta_star.into_inner(), false)
            }
            _ => (restricted_minimizer(&eval, &true_support, m)?.0, true),
        };
        fallback.push((m, cfg.oracle.is_some() && used_fallback));
        let theta_star = Theta::new(theta_star)?;
        let mut medians = Vec::new();
        for &n in &cfg.n_grid {
            let seeds: Vec<u64> =
                (0..cfg.replications).map(|r| derive_seed(cfg.seed, &[2, m as u64, n as u64, r as u64])).collect();
            let outcomes = map_replicates(&seeds, |seed| run_replicate(&model, &basis, cfg, &eval, n, seed))?;
            let mut excesses = Vec::new();
            let mut l1s = Vec::new();
            let mut hits = 0usize;
            for (r, (out, seed)) in outcomes.into_iter().zip(&seeds).enumerate() {
                let recovered = threshold_support(&out.theta_hat, tau)? == true_support;
                hits += usize::from(recovered);
                let l1 = out.theta_hat.l1_distance(&theta_star);
                excesses.push(out.excess.estimate);
                l1s.push(l1);
                records.push(RateRecord {
                    n,
                    m,
                    s: cfg.s_true,
                    replicate: r,
                    excess_risk: out.excess.estimate,
                    excess_stderr: out.excess.stderr,
                    l1_to_oracle: l1,
                    recovered,
                    lambda: out.lambda,
                    seed: *seed,
                });
            }
            let med = median(&excesses);
            medians.push((n as f64, med));
            cells.push(CellSummary {
                n,
                m,
                median_excess: med,
                mean_excess: excesses.iter().sum::<f64>() / excesses.len() as f64,
                median_l1: median(&l1s),
                recovery_rate: hits as f64 / cfg.replications as f64,
            });
        }
        slopes.push(match loglog_slope(&medians) {
            Ok((slope, intercept)) => SlopeFit { m, slope: Some(slope), intercept: Some(intercept), flag: None },
            Err(flag) => SlopeFit { m, slope: None, intercept: None, flag: Some(flag) },
        });
    }
    Ok(RateSweepResult { records, cells, slopes, oracle_fallback: fallback })
}

#[cfg(feature = "parallel")]
fn map_replicates<T: Send>(seeds: &[u64], f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    use rayon::prelude::*;
    seeds.par_iter().map(|s| f(*s)).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_replicates<T>(seeds: &[u64], f: impl Fn(u64) -> Result<T>) -> Result<Vec<T>> {
    seeds.iter().map(|s| f(*s)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleInequalityConfig {
    pub n: usize,
    pub m: usize,
    pub s_true: usize,
    pub amplitude: f64,
    pub sigma: f64,
    pub loss: LossSpec,
    pub b: f64,
    pub delta: f64,
    pub margin: MarginSpec,
    pub pseudonorm: Pseudonorm,
    pub max_support: usize,
    pub replications: usize,
    pub mc_pairs: usize,
    pub seed: u64,
    pub solver: SolverOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleInequalityReplicate {
    pub seed: u64,
    pub lambda_hat: f64,
    pub excess: f64,
    pub excess_stderr: f64,
    pub l1_to_oracle: f64,
    pub weighted_bound: bool,
    pub plain_bound: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleInequalityReport {
    pub frequency: f64,
    pub bound: f64,
    pub lambda_n: f64,
    pub oracle: OracleResult,
    pub replicates: Vec<OracleInequalityReplicate>,
}

/// Fraction of replicates in which
/// `(1-4δ)[Q(f_θ̂)-Q(f⁰)] + λ̂|θ̂-θ*|₁ ≤ 2ε*` or
/// `Q(f_θ̂)-Q(f⁰) + λ̂|θ̂-θ*|₁ ≤ 4ε*` holds.
pub fn oracle_inequality_frequency(cfg: &OracleInequalityConfig) -> Result<OracleInequalityReport> {
    if cfg.replications == 0 {
        return invalid("replications must be at least 1");
    }
    if !(cfg.delta > 0.0 && cfg.delta < 0.25) {
        return invalid("delta must lie in (0, 1/4)");
    }
    let model = SyntheticModel::sparse(cfg.m, cfg.s_true, cfg.amplitude, cfg.sigma)?;
    let basis = make_linear_basis(cfg.m)?;
    let eval = ExcessRiskEvaluator::new(&model, &cfg.loss, cfg.m, cfg.mc_pairs, derive_seed(cfg.seed, &[11]))?;
    let c_true = (2.0 * model.ambient_covariance(cfg.m).diagonal().max()).sqrt();
    let lambda_n = lambda_theoretical(c_true, cfg.loss.lipschitz(), cfg.n, cfg.m, cfg.b)?;
    let supports = supports_up_to(cfg.m, cfg.max_support);
    let oracle = oracle_search_with(&model, &eval, lambda_n, cfg.delta, &cfg.margin, cfg.pseudonorm, &supports)?;
    let theta_star = oracle.theta_star.clone();
    let eps = oracle.epsilon_star;
    let seeds: Vec<u64> = (0..cfg.replications).map(|r| derive_seed(cfg.seed, &[12, r as u64])).collect();
    let replicates = map_replicates(&seeds, |seed| {
        let data = generate(&model, cfg.n, cfg.m, seed)?;
        let c_hat = estimate_c_hat(&data, &basis)?;
        let lam = lambda_hat(c_hat, cfg.loss.lipschitz(), cfg.n, cfg.m, cfg.b)?;
        let fit = fit_lasso(&data, &basis, &cfg.loss, lam, None, &cfg.solver)?;
        let ex = eval.excess(&fit.theta_hat, &basis)?;
        let l1 = fit.theta_hat.l1_distance(&theta_star);
        Ok(OracleInequalityReplicate {
            seed,
            lambda_hat: lam,
            excess: ex.estimate,
            excess_stderr: ex.stderr,
            l1_to_oracle: l1,
            weighted_bound: (1.0 - 4.0 * cfg.delta) * ex.estimate + lam * l1 <= 2.0 * eps,
            plain_bound: ex.estimate + lam * l1 <= 4.0 * eps,
        })
    })?;
    let holds = replicates.iter().filter(|r| r.weighted_bound || r.plain_bound).count();
    Ok(OracleInequalityReport {
        frequency: holds as f64 / cfg.replications as f64,
        bound: 1.0 - 3.0 / (cfg.m * cfg.m) as f64,
        lambda_n,
        oracle,
        replicates,
    })
}
