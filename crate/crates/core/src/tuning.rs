//! Penalty level selection: the data-driven `λ̂_n`, normalization weights,
//! the envelope check, and K-fold cross-validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, require_pairs, Error, Result};
use crate::model::{BasisSpec, Dataset, LossSpec, Theta};
use crate::solver::{lambda_max, minimize, SolverOptions};
use crate::urisk::{empirical_risk_u, CompensatedSum, UStatRisk};

pub const DEFAULT_B: f64 = 998.0;

/// Per-coordinate U-statistics `1/(n(n-1)) Σ_{i≠j} ψ_k(X_i, X_j)²`.
fn squared_feature_means(data: &Dataset, basis: &BasisSpec) -> Result<Vec<f64>> {
    require_pairs(data.n())?;
    basis.check_data(data)?;
    let n = data.n();
    let m = basis.m();
    if basis.is_linear() {
        // Σ_{i≠j} (a_i - a_j)² = 2n Σ (a_i - ā)²
        return Ok((0..m)
            .map(|k| {
                let col = data.column(k);
                let mean = col.iter().sum::<f64>() / n as f64;
                let ss: CompensatedSum = col.iter().map(|a| (a - mean).powi(2)).collect();
                2.0 * ss.value() / (n - 1) as f64
            })
            .collect());
    }
    let mut sums = vec![CompensatedSum::default(); m];
    let mut buf = vec![0.0; m];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            basis.eval_into(data.row(i), data.row(j), &mut buf);
            for (s, v) in sums.iter_mut().zip(&buf) {
                s.add(v * v);
            }
        }
    }
    let pairs = (n * (n - 1)) as f64;
    Ok(sums.iter().map(|s| s.value() / pairs).collect())
}

/// `Ĉ = √(max_k U-statistic of ψ_k²)`.
pub fn estimate_c_hat(data: &Dataset, basis: &BasisSpec) -> Result<f64> {
    Ok(normalization_weights(data, basis)?.into_iter().fold(0.0, f64::max))
}

/// `w_k = √(U-statistic of ψ_k²)`.
pub fn normalization_weights(data: &Dataset, basis: &BasisSpec) -> Result<Vec<f64>> {
    Ok(squared_feature_means(data, basis)?.into_iter().map(|v| v.max(0.0).sqrt()).collect())
}

fn check_formula_args(c: f64, l: f64, n: usize, m: usize, b: f64) -> Result<()> {
    require_pairs(n)?;
    if m < 2 {
        return invalid("m must be at least 2 so that log m is positive");
    }
    if !(b > 0.0 && b.is_finite()) {
        return invalid("B must be positive");
    }
    if !(l > 0.0 && l.is_finite()) {
        return invalid("L must be positive");
    }
    if !(c >= 0.0 && c.is_finite()) {
        return invalid("C must be nonnegative");
    }
    Ok(())
}

/// `λ̂_n = B L √(log m / n) max(Ĉ, 6)`.
pub fn lambda_hat(c_hat: f64, l: f64, n: usize, m: usize, b: f64) -> Result<f64> {
    check_formula_args(c_hat, l, n, m, b)?;
    Ok(b * l * ((m as f64).ln() / n as f64).sqrt() * c_hat.max(6.0))
}

/// `λ_n = B L √(log m / n) max(C, 6)` for a known `C`.
pub fn lambda_theoretical(c: f64, l: f64, n: usize, m: usize, b: f64) -> Result<f64> {
    lambda_hat(c, l, n, m, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeCheck {
    pub ok: bool,
    pub max_observed: f64,
    pub threshold: f64,
}

/// Compares `max_k max_{i≠j} |ψ_k(X_i, X_j)|` with `√(n / log m)`.
///
/// The observed maximum only bounds the true supremum from below, so a pass
/// is not a proof.
pub fn check_envelope(data: &Dataset, basis: &BasisSpec) -> Result<EnvelopeCheck> {
    require_pairs(data.n())?;
    basis.check_data(data)?;
    let n = data.n();
    let m = basis.m();
    let threshold = if m < 2 { f64::INFINITY } else { (n as f64 / (m as f64).ln()).sqrt() };
    let max_observed = if basis.is_linear() {
        (0..m)
            .map(|k| {
                let col = data.column(k);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                hi - lo
            })
            .fold(0.0, f64::max)
    } else {
        let mut buf = vec![0.0; m];
        let mut best = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    basis.eval_into(data.row(i), data.row(j), &mut buf);
                    best = buf.iter().fold(best, |a, v| a.max(v.abs()));
                }
            }
        }
        best
    };
    Ok(EnvelopeCheck { ok: max_observed <= threshold, max_observed, threshold })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct TuningReport {
    pub C_hat: f64,
    pub C_true: Option<f64>,
    pub lambda_hat: f64,
    pub lambda_theoretical: Option<f64>,
    pub B: f64,
    pub L: f64,
    pub envelope_ok: bool,
    pub envelope_max: f64,
}

/// Everything needed to pick `λ` by formula. `c_true` is the population
/// constant when it is known.
pub fn tuning_report(data: &Dataset, basis: &BasisSpec, loss: &LossSpec, b: f64, c_true: Option<f64>) -> Result<TuningReport> {
    let c_hat = estimate_c_hat(data, basis)?;
    let lam = lambda_hat(c_hat, loss.lipschitz(), data.n(), basis.m(), b)?;
    let lambda_theoretical = c_true.map(|c| lambda_theoretical(c, loss.lipschitz(), data.n(), basis.m(), b)).transpose()?;
    let env = check_envelope(data, basis)?;
    Ok(TuningReport {
        C_hat: c_hat,
        C_true: c_true,
        lambda_hat: lam,
        lambda_theoretical,
        B: b,
        L: loss.lipschitz(),
        envelope_ok: env.ok,
        envelope_max: env.max_observed,
    })
}

/// A list of candidate penalty levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid(Vec<f64>);

impl LambdaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return invalid("lambda grid is empty");
        }
        if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return invalid("lambda grid values must be nonnegative and finite");
        }
        Ok(Self(values))
    }

    /// `10^a, …, 10^b` in `count` log-spaced steps.
    pub fn logspace(a: f64, b: f64, count: usize) -> Result<Self> {
        if count == 0 || !a.is_finite() || !b.is_finite() {
            return invalid("logspace needs finite endpoints and count >= 1");
        }
        if count == 1 {
            return Self::new(vec![10f64.powf(a)]);
        }
        let step = (b - a) / (count - 1) as f64;
        Self::new((0..count).map(|i| 10f64.powf(a + step * i as f64)).collect())
    }

    /// `count` log-spaced values from `lo` to `hi`, both positive.
    pub fn log_between(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if !(lo > 0.0 && hi > 0.0) {
            return invalid("log grid endpoints must be positive");
        }
        Self::logspace(lo.log10(), hi.log10(), count)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl std::str::FromStr for LambdaGrid {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(inner) = s.strip_prefix("logspace(").and_then(|r| r.strip_suffix(')')) {
            let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return invalid("logspace takes three arguments: logspace(a,b,count)");
            }
            let a: f64 = parts[0].parse().map_err(|_| Error::InvalidArgument(format!("bad number `{}`", parts[0])))?;
            let b: f64 = parts[1].parse().map_err(|_| Error::InvalidArgument(format!("bad number `{}`", parts[1])))?;
            let c: usize = parts[2].parse().map_err(|_| Error::InvalidArgument(format!("bad count `{}`", parts[2])))?;
            return Self::logspace(a, b, c);
        }
        let values = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad number `{p}`"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(values)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub lambda: f64,
    pub mean_risk: f64,
    pub fold_risks: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub best_lambda: f64,
    /// One row per grid value, in descending order of `λ`.
    pub table: Vec<CvRow>,
    pub folds: usize,
}

/// Random partition of `0..n` into `k` nearly equal folds.
pub fn make_folds(n: usize, k: usize, rng_seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return invalid("cross-validation needs at least 2 folds");
    }
    if n / k < 2 {
        return invalid(format!("{n} observations cannot fill {k} folds with at least 2 each"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    let mut folds = vec![Vec::new(); k];
    for (pos, i) in idx.into_iter().enumerate() {
        folds[pos % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Validation risks along the descending grid for one held-out fold, with
/// warm starts and the zero solution taken directly above `λ_max`.
fn fold_path(
    data: &Dataset,
    basis: &BasisSpec,
    loss: &LossSpec,
    grid_desc: &[f64],
    held_out: &[usize],
    weights: &[f64],
    solver: &SolverOptions,
) -> Result<Vec<f64>> {
    let mut in_fold = vec![false; data.n()];
    for &i in held_out {
        in_fold[i] = true;
    }
    let train_idx: Vec<usize> = (0..data.n()).filter(|i| !in_fold[*i]).collect();
    let train = data.select(&train_idx)?;
    let valid = data.select(held_out)?;
    let risk = UStatRisk::new(&train, basis, loss)?.with_partitions(solver.partitions);
    let top = lambda_max(&risk, weights);
    let mut opts = solver.clone();
    let mut theta = opts.theta0.clone().unwrap_or_else(|| vec![0.0; basis.m()]);
    let mut out = Vec::with_capacity(grid_desc.len());
    for &lam in grid_desc {
        if lam >= top {
            theta.fill(0.0);
        } else {
            opts.theta0 = Some(theta.clone());
            theta = minimize(&risk, lam, weights, &opts)?.theta_hat.into_inner();
        }
        out.push(empirical_risk_u(&Theta::new(theta.clone())?, basis, loss, &valid)?.value);
    }
    Ok(out)
}

/// K-fold cross-validation over observations. Each fold is scored by the
/// U-statistic risk over its own pairs; the smallest mean risk wins, ties
/// going to the larger `λ`.
#[allow(clippy::too_many_arguments)]
pub fn cross_validate_lambda(
    data: &Dataset,
    basis: &BasisSpec,
    loss: &LossSpec,
    lambda_grid: &[f64],
    folds: usize,
    rng_seed: u64,
    weights: Option<&[f64]>,
    solver: &SolverOptions,
) -> Result<CvResult> {
    let grid = LambdaGrid::new(lambda_grid.to_vec())?;
    basis.check_data(data)?;
    let parts = make_folds(data.n(), folds, rng_seed)?;
    let ones = vec![1.0; basis.m()];
    let w = weights.unwrap_or(&ones);
    let mut desc = grid.values().to_vec();
    desc.sort_by(|a, b| b.total_cmp(a));
    let per_fold = map_folds(&parts, |held| fold_path(data, basis, loss, &desc, held, w, solver))?;
    let mut table = Vec::with_capacity(desc.len());
    for (g, &lambda) in desc.iter().enumerate() {
        let fold_risks: Vec<f64> = per_fold.iter().map(|f| f[g]).collect();
        let mean_risk = fold_risks.iter().sum::<f64>() / folds as f64;
        table.push(CvRow { lambda, mean_risk, fold_risks });
    }
    let mut best = 0;
    for (g, row) in table.iter().enumerate() {
        if row.mean_risk < table[best].mean_risk {
            best = g;
        }
    }
    Ok(CvResult { best_lambda: table[best].lambda, table, folds })
}

#[cfg(feature = "parallel")]
fn map_folds(parts: &[Vec<usize>], f: impl Fn(&[usize]) -> Result<Vec<f64>> + Sync) -> Result<Vec<Vec<f64>>> {
    use rayon::prelude::*;
    parts.par_iter().map(|p| f(p)).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_folds(parts: &[Vec<usize>], f: impl Fn(&[usize]) -> Result<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    parts.iter().map(|p| f(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_linear_basis, FnBasis};

    fn ordered_pair_mean(xs: &[f64]) -> f64 {
        let mut s = 0.0;
        let mut c = 0.0;
        for (i, a) in xs.iter().enumerate() {
            for (j, b) in xs.iter().enumerate() {
                if i != j {
                    s += (a - b) * (a - b);
                    c += 1.0;
                }
            }
        }
        s / c
    }

    #[test]
    fn c_hat_small_example() {
        let data = Dataset::from_rows(&[vec![1.0], vec![2.0], vec![4.0]], vec![0.0, 1.0, 2.0]).unwrap();
        let b = make_linear_basis(1).unwrap();
        let want = ordered_pair_mean(&[1.0, 2.0, 4.0]).sqrt();
        assert!((estimate_c_hat(&data, &b).unwrap() - want).abs() < 1e-14);
        assert!((want - (14.0f64 / 3.0).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn c_hat_degenerate_cases() {
        let data = Dataset::from_rows(&[vec![3.0], vec![3.0], vec![3.0]], vec![0.0, 1.0, 2.0]).unwrap();
        assert_eq!(estimate_c_hat(&data, &make_linear_basis(1).unwrap()).unwrap(), 0.0);
        let data = Dataset::from_rows(&[vec![1.0], vec![2.0], vec![4.0]], vec![0.0, 1.0, 2.0]).unwrap();
        let dup = BasisSpec::custom(
            FnBasis::new("dup", 1, 2, |x: &[f64], xp: &[f64], out: &mut [f64]| {
                out[0] = x[0] - xp[0];
                out[1] = x[0] - xp[0];
            })
            .unwrap(),
        );
        let single = estimate_c_hat(&data, &make_linear_basis(1).unwrap()).unwrap();
        assert!((estimate_c_hat(&data, &dup).unwrap() - single).abs() < 1e-14);
        let one = Dataset::from_flat(vec![1.0], vec![1.0], 1);
        assert!(one.is_err() || estimate_c_hat(&one.unwrap(), &make_linear_basis(1).unwrap()).is_err());
    }

    #[test]
    fn lambda_formula_examples() {
        let v = lambda_hat(2.0, 1.0, 100, 10, 998.0).unwrap();
        let want = 998.0 * 6.0 * (10f64.ln() / 100.0).sqrt();
        assert!((v - want).abs() < 1e-9);
        assert!((v - 908.6).abs() < 0.05);
        let base = lambda_hat(6.0, 1.0, 100, 10, 998.0).unwrap();
        assert!((lambda_hat(12.0, 1.0, 100, 10, 998.0).unwrap() - 2.0 * base).abs() < 1e-9);
        assert!(lambda_hat(2.0, 1.0, 100, 10, 1e-12).unwrap() < 1e-8);
        assert!(lambda_hat(2.0, 1.0, 100, 1, 998.0).is_err());
        assert!(lambda_theoretical(2.0, 1.0, 100, 1, 998.0).is_err());
        assert!(lambda_hat(2.0, 1.0, 100, 10, 0.0).is_err());
    }

    #[test]
    fn envelope_examples() {
        let b = make_linear_basis(1).unwrap();
        let data = Dataset::from_rows(&[vec![0.0], vec![1.0]], vec![0.0, 1.0]).unwrap();
        let env = check_envelope(&data, &make_linear_basis(1).unwrap()).unwrap();
        assert_eq!(env.max_observed, 1.0);
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![if i == 0 { 1e6 } else { i as f64 / 10.0 }, 0.0]).collect();
        let data = Dataset::from_rows(&rows, (0..10).map(f64::from).collect()).unwrap();
        assert!(!check_envelope(&data, &make_linear_basis(2).unwrap()).unwrap().ok);
        let data = Dataset::from_rows(&[vec![0.0, 0.0], vec![0.5, 0.5]], vec![0.0, 1.0]).unwrap();
        let env = check_envelope(&data, &make_linear_basis(2).unwrap()).unwrap();
        assert!((env.threshold - (2.0 / 2f64.ln()).sqrt()).abs() < 1e-12);
        assert!((env.threshold - 1.699).abs() < 1e-3);
        let _ = b;
    }

    #[test]
    fn grid_parsing() {
        let g: LambdaGrid = "0.1, 0.2,0.3".parse().unwrap();
        assert_eq!(g.values(), &[0.1, 0.2, 0.3]);
        let g: LambdaGrid = "logspace(-2,0,3)".parse().unwrap();
        for (a, b) in g.values().iter().zip([0.01, 0.1, 1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!("".parse::<LambdaGrid>().is_err());
        assert!("1,x".parse::<LambdaGrid>().is_err());
        assert!("logspace(1,2)".parse::<LambdaGrid>().is_err());
        assert!("-1".parse::<LambdaGrid>().is_err());
    }

    #[test]
    fn folds_partition_observations() {
        let f = make_folds(11, 3, 5).unwrap();
        let mut all: Vec<usize> = f.concat();
        all.sort_unstable();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
        assert!(f.iter().all(|p| p.len() >= 3));
        assert!(make_folds(5, 3, 0).is_err());
        assert!(make_folds(10, 1, 0).is_err());
    }

    #[test]
    fn cv_single_and_duplicate_grids() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 1.3).cos()]).collect();
        let y: Vec<f64> = rows.iter().map(|r| r[0] + 0.2 * r[1]).collect();
        let data = Dataset::from_rows(&rows, y).unwrap();
        let b = make_linear_basis(2).unwrap();
        let l = LossSpec::logistic();
        let opts = SolverOptions::default();
        let cv = cross_validate_lambda(&data, &b, &l, &[0.05], 4, 1, None, &opts).unwrap();
        assert_eq!(cv.best_lambda, 0.05);
        let a = cross_validate_lambda(&data, &b, &l, &[0.01, 0.01, 1.0], 4, 1, None, &opts).unwrap();
        let again = cross_validate_lambda(&data, &b, &l, &[0.01, 0.01, 1.0], 4, 1, None, &opts).unwrap();
        assert_eq!(a, again);
        assert_eq!(a.table.len(), 3);
        assert!(cross_validate_lambda(&data, &b, &l, &[], 4, 1, None, &opts).is_err());
        assert!(cross_validate_lambda(&data, &b, &l, &[0.1], 11, 1, None, &opts).is_err());
    }
}
