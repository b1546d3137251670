//! U-statistic empirical risk over all ordered pairs, the half-sample
//! alternative, and their subgradients.
//!
//! The public functions walk every ordered pair with compensated summation.
//! [`UStatRisk`] is the evaluator the solver uses: rows are pre-sorted by
//! response so the pair sign is known from the index order, and for
//! antisymmetric bases each unordered pair is visited once.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, require_pairs, Error, Result};
use crate::model::{dot, score_unchecked, sign, BasisSpec, Dataset, LossKind, LossSpec, Theta};
use crate::simulate::{generate_with_rng, SyntheticModel};
use crate::solver::ConvexRisk;

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::default();
        for v in iter {
            s.add(v);
        }
        s
    }
}

/// An empirical risk together with the number of pair terms averaged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskValue {
    pub value: f64,
    pub pair_count: u64,
}

/// Evaluates `φ_f(Z_i, Z_j)` for index pairs of one dataset.
struct PairKernel<'a> {
    data: &'a Dataset,
    basis: &'a BasisSpec,
    loss: &'a LossSpec,
    theta: &'a [f64],
    // f_θ(x_i, x_j) = u_i - u_j for the linear basis
    scores: Option<Vec<f64>>,
    buf: Vec<f64>,
}

impl<'a> PairKernel<'a> {
    fn new(theta: &'a Theta, basis: &'a BasisSpec, loss: &'a LossSpec, data: &'a Dataset) -> Result<Self> {
        theta.check_basis(basis)?;
        basis.check_data(data)?;
        let scores = basis
            .is_linear()
            .then(|| (0..data.n()).map(|i| dot(theta.as_slice(), data.row(i))).collect());
        Ok(Self { data, basis, loss, theta: theta.as_slice(), scores, buf: vec![0.0; basis.m()] })
    }

    #[inline]
    fn score(&mut self, i: usize, j: usize) -> f64 {
        match &self.scores {
            Some(u) => u[i] - u[j],
            None => score_unchecked(self.theta, self.basis, self.data.row(i), self.data.row(j), &mut self.buf),
        }
    }

    #[inline]
    fn value(&mut self, i: usize, j: usize) -> f64 {
        let s = sign(self.data.y()[i] - self.data.y()[j]);
        let f = self.score(i, j);
        self.loss.value(s * f)
    }
}

/// `Q_n(f_θ) = (1 / n(n-1)) Σ_{i≠j} φ(sign(Y_i - Y_j) f_θ(X_i, X_j))`.
pub fn empirical_risk_u(theta: &Theta, basis: &BasisSpec, loss: &LossSpec, data: &Dataset) -> Result<RiskValue> {
    require_pairs(data.n())?;
    let mut kernel = PairKernel::new(theta, basis, loss, data)?;
    let n = data.n();
    let mut acc = CompensatedSum::default();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc.add(kernel.value(i, j));
            }
        }
    }
    let pairs = (n * (n - 1)) as u64;
    Ok(RiskValue { value: acc.value() / pairs as f64, pair_count: pairs })
}

/// Half-sample estimator `(1/N) Σ_{i=1}^{N} φ_f(Z_i, Z_{N+i})`, `N = ⌊n/2⌋`,
/// pairing rows in their stored order. With odd `n` the last row is unused.
pub fn empirical_risk_split(
    theta: &Theta,
    basis: &BasisSpec,
    loss: &LossSpec,
    data: &Dataset,
) -> Result<RiskValue> {
    require_pairs(data.n())?;
    let mut kernel = PairKernel::new(theta, basis, loss, data)?;
    let half = data.n() / 2;
    let acc: CompensatedSum = (0..half).map(|i| kernel.value(i, half + i)).collect();
    Ok(RiskValue { value: acc.value() / half as f64, pair_count: half as u64 })
}

/// A subgradient of `θ ↦ Q_n(f_θ)` by the chain rule on each pair term.
pub fn risk_subgradient_u(theta: &Theta, basis: &BasisSpec, loss: &LossSpec, data: &Dataset) -> Result<Vec<f64>> {
    require_pairs(data.n())?;
    theta.check_basis(basis)?;
    basis.check_data(data)?;
    let n = data.n();
    let m = basis.m();
    let mut psi = vec![0.0; m];
    let mut acc = vec![CompensatedSum::default(); m];
    for i in 0..n {
        for j in 0..n {
            let s = sign(data.y()[i] - data.y()[j]);
            if i == j || s == 0.0 {
                continue;
            }
            basis.eval_into(data.row(i), data.row(j), &mut psi);
            let g = loss.subgradient(s * dot(theta.as_slice(), &psi)) * s;
            if g != 0.0 {
                for (a, p) in acc.iter_mut().zip(&psi) {
                    a.add(g * p);
                }
            }
        }
    }
    let scale = (n * (n - 1)) as f64;
    Ok(acc.iter().map(|a| a.value() / scale).collect())
}

/// Largest sample accepted by [`permutation_average`].
pub const PERMUTATION_LIMIT: usize = 7;

/// Average of the half-sample estimator over all `n!` orderings of the
/// sample. Equals [`empirical_risk_u`] exactly in exact arithmetic.
pub fn permutation_average(theta: &Theta, basis: &BasisSpec, loss: &LossSpec, data: &Dataset) -> Result<f64> {
    require_pairs(data.n())?;
    let n = data.n();
    if n > PERMUTATION_LIMIT {
        return Err(Error::SizeLimit(format!(
            "permutation average enumerates n! orderings; n = {n} exceeds {PERMUTATION_LIMIT}"
        )));
    }
    let mut kernel = PairKernel::new(theta, basis, loss, data)?;
    // every pair value is needed many times; tabulate once
    let mut table = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                table[i * n + j] = kernel.value(i, j);
            }
        }
    }
    let half = n / 2;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut acc = CompensatedSum::default();
    let mut count = 0u64;
    let mut visit = |p: &[usize]| {
        for i in 0..half {
            acc.add(table[p[i] * n + p[half + i]]);
        }
        count += 1;
    };
    heap_permutations(&mut perm, &mut visit);
    Ok(acc.value() / (count as f64 * half as f64))
}

/// Visits every permutation of `items` (Heap's algorithm, iterative).
fn heap_permutations(items: &mut [usize], visit: &mut impl FnMut(&[usize])) {
    let n = items.len();
    let mut c = vec![0usize; n];
    visit(items);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                items.swap(0, i);
            } else {
                items.swap(c[i], i);
            }
            visit(items);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceComparison {
    pub var_u: f64,
    pub var_split: f64,
    pub mean_u: f64,
    pub mean_split: f64,
    pub replications: usize,
}

/// Sample variances of the U-statistic and half-sample risk estimators over
/// `replications` independent datasets drawn from `model`.
pub fn variance_comparison(
    loss: &LossSpec,
    basis: &BasisSpec,
    theta: &Theta,
    model: &SyntheticModel,
    n: usize,
    replications: usize,
    rng_seed: u64,
) -> Result<VarianceComparison> {
    if replications < 100 {
        return invalid("variance comparison needs at least 100 replications");
    }
    require_pairs(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut u_vals = Vec::with_capacity(replications);
    let mut s_vals = Vec::with_capacity(replications);
    for _ in 0..replications {
        let data = generate_with_rng(model, n, basis.input_dim(), &mut rng)?;
        u_vals.push(empirical_risk_u(theta, basis, loss, &data)?.value);
        s_vals.push(empirical_risk_split(theta, basis, loss, &data)?.value);
    }
    let (mean_u, var_u) = mean_var(&u_vals);
    let (mean_split, var_split) = mean_var(&s_vals);
    Ok(VarianceComparison { var_u, var_split, mean_u, mean_split, replications })
}

pub(crate) fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// The loss applied inside the fast evaluator: either the exact loss or a
/// Huber-smoothed hinge `h_μ` with `h - μ/2 ≤ h_μ ≤ h`.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Surrogate {
    Exact(LossSpec),
    HuberHinge(f64),
}

impl Surrogate {
    pub(crate) fn new(loss: &LossSpec, smoothing: Option<f64>) -> Self {
        match (loss.kind(), smoothing) {
            (LossKind::Hinge, Some(mu)) if mu > 0.0 => Surrogate::HuberHinge(mu),
            _ => Surrogate::Exact(*loss),
        }
    }

    #[inline]
    pub(crate) fn value(&self, t: f64) -> f64 {
        match self {
            Surrogate::Exact(l) => l.value(t),
            Surrogate::HuberHinge(mu) => {
                let r = 1.0 - t;
                if r <= 0.0 {
                    0.0
                } else if r < *mu {
                    r * r / (2.0 * mu)
                } else {
                    r - mu / 2.0
                }
            }
        }
    }

    #[inline]
    pub(crate) fn deriv(&self, t: f64) -> f64 {
        match self {
            Surrogate::Exact(l) => l.subgradient(t),
            Surrogate::HuberHinge(mu) => {
                let r = 1.0 - t;
                if r <= 0.0 {
                    0.0
                } else if r < *mu {
                    -r / mu
                } else {
                    -1.0
                }
            }
        }
    }

    fn is_logistic(&self) -> bool {
        matches!(self, Surrogate::Exact(l) if l.kind() == LossKind::Logistic)
    }
}

/// Fast evaluator of `Q_n` and its subgradient for repeated solver calls.
pub(crate) struct UStatRisk<'a> {
    basis: &'a BasisSpec,
    loss: LossSpec,
    d: usize,
    n: usize,
    // rows sorted by response, ascending
    x: Vec<f64>,
    // first row index with a strictly larger response than row i
    next_greater: Vec<usize>,
    tie_pairs: f64,
    partitions: usize,
}

impl<'a> UStatRisk<'a> {
    pub(crate) fn new(data: &Dataset, basis: &'a BasisSpec, loss: &LossSpec) -> Result<Self> {
        require_pairs(data.n())?;
        basis.check_data(data)?;
        let n = data.n();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| data.y()[a].total_cmp(&data.y()[b]));
        let y: Vec<f64> = order.iter().map(|&i| data.y()[i]).collect();
        let mut x = Vec::with_capacity(n * data.d());
        for &i in &order {
            x.extend_from_slice(data.row(i));
        }
        let mut next_greater = vec![n; n];
        let mut tie_pairs = 0.0;
        let mut start = 0;
        while start < n {
            let mut end = start + 1;
            while end < n && y[end] == y[start] {
                end += 1;
            }
            let block = (end - start) as f64;
            tie_pairs += block * (block - 1.0);
            for g in &mut next_greater[start..end] {
                *g = end;
            }
            start = end;
        }
        Ok(Self { basis, loss: *loss, d: data.d(), n, x, next_greater, tie_pairs, partitions: 1 })
    }

    pub(crate) fn with_partitions(mut self, partitions: usize) -> Self {
        self.partitions = partitions.max(1);
        self
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    fn blocks(&self) -> Vec<(usize, usize)> {
        let p = self.partitions.min(self.n);
        let n = self.n;
        // equal pair counts per block: row i owns about n - i pairs
        let total = (n * (n - 1) / 2) as f64;
        let mut bounds = vec![0];
        let mut seen = 0.0;
        for i in 0..n {
            seen += (n - 1 - i) as f64;
            if bounds.len() < p && seen >= total * bounds.len() as f64 / p as f64 {
                bounds.push(i + 1);
            }
        }
        bounds.push(n);
        bounds.dedup();
        bounds.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Linear basis: returns (Σ over ordered pairs of loss, per-row derivative weights).
    fn linear_block(&self, surrogate: &Surrogate, u: &[f64], rows: (usize, usize), want_grad: bool) -> (f64, Vec<f64>) {
        let mut r = if want_grad { vec![0.0; self.n] } else { Vec::new() };
        let mut acc = CompensatedSum::default();
        let logistic = surrogate.is_logistic();
        for i in rows.0..rows.1 {
            let ui = u[i];
            let tail = &u[self.next_greater[i]..];
            // pair (i, j), y_i < y_j: sign = -1 so the margin is u_j - u_i
            if want_grad {
                let mut row_sum = 0.0;
                let mut row_deriv = 0.0;
                let rj = &mut r[self.next_greater[i]..];
                if logistic {
                    let mut neg = 0.0;
                    let mut prod = 1.0;
                    for (k, (uj, rjk)) in tail.iter().zip(rj.iter_mut()).enumerate() {
                        let t = uj - ui;
                        let e = (-t.abs()).exp();
                        let g = if t > 0.0 { -e / (1.0 + e) } else { -1.0 / (1.0 + e) };
                        neg += (-t).max(0.0);
                        prod *= 1.0 + e;
                        if k % 64 == 63 {
                            row_sum += prod.ln();
                            prod = 1.0;
                        }
                        *rjk += g;
                        row_deriv += g;
                    }
                    row_sum += neg + prod.ln();
                } else {
                    for (uj, rjk) in tail.iter().zip(rj.iter_mut()) {
                        let t = uj - ui;
                        row_sum += surrogate.value(t);
                        let g = surrogate.deriv(t);
                        *rjk += g;
                        row_deriv += g;
                    }
                }
                r[i] -= row_deriv;
                acc.add(row_sum);
            } else if logistic {
                let mut neg = 0.0;
                let mut prod = 1.0;
                let mut row_sum = 0.0;
                for (k, uj) in tail.iter().enumerate() {
                    let t = uj - ui;
                    neg += (-t).max(0.0);
                    prod *= 1.0 + (-t.abs()).exp();
                    if k % 64 == 63 {
                        row_sum += prod.ln();
                        prod = 1.0;
                    }
                }
                acc.add(row_sum + neg + prod.ln());
            } else {
                acc.add(tail.iter().map(|uj| surrogate.value(uj - ui)).sum::<f64>());
            }
        }
        (acc.value(), r)
    }

    /// General basis: returns (Σ over ordered pairs of loss, Σ of subgradient terms).
    fn custom_block(&self, surrogate: &Surrogate, theta: &[f64], rows: (usize, usize), want_grad: bool) -> (f64, Vec<f64>) {
        let m = self.basis.m();
        let mut psi = vec![0.0; m];
        let mut g = if want_grad { vec![0.0; m] } else { Vec::new() };
        let mut acc = CompensatedSum::default();
        let both_orders = !self.basis.antisymmetric();
        for i in rows.0..rows.1 {
            let xi = self.row(i);
            for j in self.next_greater[i]..self.n {
                let xj = self.row(j);
                // ordered pair (j, i) has sign +1
                self.basis.eval_into(xj, xi, &mut psi);
                let t = dot(theta, &psi);
                acc.add(surrogate.value(t));
                if want_grad {
                    let c = surrogate.deriv(t);
                    if c != 0.0 {
                        for (gk, p) in g.iter_mut().zip(&psi) {
                            *gk += c * p;
                        }
                    }
                }
                if both_orders {
                    // ordered pair (i, j) has sign -1
                    self.basis.eval_into(xi, xj, &mut psi);
                    let t = -dot(theta, &psi);
                    acc.add(surrogate.value(t));
                    if want_grad {
                        let c = surrogate.deriv(t);
                        if c != 0.0 {
                            for (gk, p) in g.iter_mut().zip(&psi) {
                                *gk -= c * p;
                            }
                        }
                    }
                }
            }
        }
        (acc.value(), g)
    }

    fn evaluate(&self, theta: &[f64], grad: Option<&mut [f64]>, smoothing: Option<f64>) -> f64 {
        let surrogate = Surrogate::new(&self.loss, smoothing);
        let want_grad = grad.is_some();
        let blocks = self.blocks();
        let scale = (self.n * (self.n - 1)) as f64;
        let tie_term = self.tie_pairs * surrogate.value(0.0);
        // antisymmetric bases visit each unordered pair once
        let mult = if self.basis.antisymmetric() { 2.0 } else { 1.0 };
        if self.basis.is_linear() {
            let u: Vec<f64> = (0..self.n).map(|i| dot(theta, self.row(i))).collect();
            let parts = map_blocks(&blocks, |b| self.linear_block(&surrogate, &u, b, want_grad));
            let mut total = CompensatedSum::default();
            let mut r = vec![0.0; if want_grad { self.n } else { 0 }];
            for (v, rb) in parts {
                total.add(v);
                for (a, b) in r.iter_mut().zip(&rb) {
                    *a += b;
                }
            }
            if let Some(grad) = grad {
                grad.fill(0.0);
                for (i, ri) in r.iter().enumerate() {
                    if *ri != 0.0 {
                        for (g, x) in grad.iter_mut().zip(self.row(i)) {
                            *g += ri * x;
                        }
                    }
                }
                for g in grad.iter_mut() {
                    *g *= mult / scale;
                }
            }
            (mult * total.value() + tie_term) / scale
        } else {
            let parts = map_blocks(&blocks, |b| self.custom_block(&surrogate, theta, b, want_grad));
            let mut total = CompensatedSum::default();
            let mut g = vec![0.0; if want_grad { self.basis.m() } else { 0 }];
            for (v, gb) in parts {
                total.add(v);
                for (a, b) in g.iter_mut().zip(&gb) {
                    *a += b;
                }
            }
            if let Some(grad) = grad {
                for (out, gk) in grad.iter_mut().zip(&g) {
                    *out = mult * gk / scale;
                }
            }
            (mult * total.value() + tie_term) / scale
        }
    }
}

#[cfg(feature = "parallel")]
fn map_blocks<T: Send>(blocks: &[(usize, usize)], f: impl Fn((usize, usize)) -> T + Sync) -> Vec<T> {
    use rayon::prelude::*;
    if blocks.len() == 1 {
        return vec![f(blocks[0])];
    }
    blocks.par_iter().map(|b| f(*b)).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_blocks<T>(blocks: &[(usize, usize)], f: impl Fn((usize, usize)) -> T) -> Vec<T> {
    blocks.iter().map(|b| f(*b)).collect()
}

impl ConvexRisk for UStatRisk<'_> {
    fn dim(&self) -> usize {
        self.basis.m()
    }

    fn eval(&self, theta: &[f64], grad: Option<&mut [f64]>, smoothing: Option<f64>) -> f64 {
        self.evaluate(theta, grad, smoothing)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_linear_basis, FnBasis};
    use rand::Rng;

    fn toy() -> Dataset {
        Dataset::from_rows(&[vec![1.0], vec![0.0]], vec![2.0, 1.0]).unwrap()
    }

    fn random_data(rng: &mut ChaCha8Rng, n: usize, d: usize, ties: bool) -> Dataset {
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let y = (0..n)
            .map(|_| if ties { rng.random_range(0..3) as f64 } else { rng.random_range(-1.0..1.0) })
            .collect();
        Dataset::from_rows(&rows, y).unwrap()
    }

    #[test]
    fn hand_enumerated_risks() {
        let b = make_linear_basis(1).unwrap();
        let h = LossSpec::hinge();
        let one = Theta::new(vec![1.0]).unwrap();
        let r = empirical_risk_u(&one, &b, &h, &toy()).unwrap();
        assert_eq!((r.value, r.pair_count), (0.0, 2));
        assert_eq!(empirical_risk_u(&Theta::zeros(1), &b, &h, &toy()).unwrap().value, 1.0);
        let g = risk_subgradient_u(&Theta::zeros(1), &b, &h, &toy()).unwrap();
        assert_eq!(g, vec![-1.0]);
    }

    #[test]
    fn all_ties_give_phi_zero() {
        let data = Dataset::from_rows(&[vec![1.0], vec![-3.0], vec![2.5]], vec![4.0; 3]).unwrap();
        let b = make_linear_basis(1).unwrap();
        let th = Theta::new(vec![0.7]).unwrap();
        for loss in [LossSpec::hinge(), LossSpec::logistic()] {
            let u = empirical_risk_u(&th, &b, &loss, &data).unwrap().value;
            assert!((u - loss.value(0.0)).abs() < 1e-15);
            let s = empirical_risk_split(&th, &b, &loss, &data).unwrap().value;
            assert!((s - loss.value(0.0)).abs() < 1e-15);
            assert!((permutation_average(&th, &b, &loss, &data).unwrap() - loss.value(0.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn split_estimator_uses_file_order() {
        let b = make_linear_basis(1).unwrap();
        let h = LossSpec::hinge();
        let th = Theta::new(vec![0.5]).unwrap();
        let data = Dataset::from_rows(&[vec![1.0], vec![0.0], vec![9.0]], vec![2.0, 1.0, -5.0]).unwrap();
        let r = empirical_risk_split(&th, &b, &h, &data).unwrap();
        assert_eq!(r.pair_count, 1);
        assert_eq!(r.value, h.value(0.5));
        let two = toy();
        let s = empirical_risk_split(&th, &b, &h, &two).unwrap().value;
        assert_eq!(s, h.value(0.5));
    }

    #[test]
    fn insufficient_and_oversized_inputs() {
        let b = make_linear_basis(1).unwrap();
        let data = Dataset::from_rows(&(0..8).map(|i| vec![i as f64]).collect::<Vec<_>>(), (0..8).map(f64::from).collect())
            .unwrap();
        assert!(matches!(
            permutation_average(&Theta::zeros(1), &b, &LossSpec::hinge(), &data),
            Err(Error::SizeLimit(_))
        ));
        assert!(Dataset::from_rows(&[vec![1.0]], vec![1.0]).is_err());
    }

    #[test]
    fn permutation_identity_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = make_linear_basis(2).unwrap();
        for n in 2..=6 {
            let data = random_data(&mut rng, n, 2, n % 2 == 0);
            let th = Theta::new(vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).unwrap();
            for loss in [LossSpec::hinge(), LossSpec::logistic()] {
                let u = empirical_risk_u(&th, &b, &loss, &data).unwrap().value;
                let p = permutation_average(&th, &b, &loss, &data).unwrap();
                assert!((u - p).abs() < 1e-12, "n={n}: {u} vs {p}");
            }
        }
    }

    #[test]
    fn fast_evaluator_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let asym = BasisSpec::custom(
            FnBasis::new("mixed", 2, 3, |x: &[f64], xp: &[f64], out: &mut [f64]| {
                out[0] = x[0] - xp[0];
                out[1] = x[1] * x[1] - xp[0];
                out[2] = (x[0] * xp[1]).tanh();
            })
            .unwrap(),
        );
        let bases = [make_linear_basis(2).unwrap(), BasisSpec::named("sign", 2).unwrap(), asym];
        let losses = [
            LossSpec::hinge(),
            LossSpec::logistic(),
            LossSpec::truncated_quadratic(10.0).unwrap(),
            LossSpec::exponential(5.0).unwrap(),
        ];
        for basis in &bases {
            for loss in &losses {
                for ties in [false, true] {
                    let data = random_data(&mut rng, 150, 2, ties);
                    let th: Vec<f64> = (0..basis.m()).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let theta = Theta::new(th.clone()).unwrap();
                    let want = empirical_risk_u(&theta, basis, loss, &data).unwrap().value;
                    let want_g = risk_subgradient_u(&theta, basis, loss, &data).unwrap();
                    for parts in [1, 3] {
                        let fast = UStatRisk::new(&data, basis, loss).unwrap().with_partitions(parts);
                        let mut g = vec![0.0; basis.m()];
                        let v = fast.eval(&th, Some(&mut g), None);
                        assert!((v - want).abs() < 1e-12 * want.max(1.0), "{} {:?}: {v} vs {want}", basis.name(), loss.kind());
                        assert!((fast.eval(&th, None, None) - v).abs() < 1e-12 * v.max(1.0));
                        for (a, b) in g.iter().zip(&want_g) {
                            assert!((a - b).abs() < 1e-10, "{} {:?}: {a} vs {b}", basis.name(), loss.kind());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn huber_hinge_brackets_hinge() {
        let h = LossSpec::hinge();
        for mu in [0.5, 1e-2, 1e-4] {
            let s = Surrogate::new(&h, Some(mu));
            for k in -300..300 {
                let t = k as f64 / 100.0;
                let v = s.value(t);
                assert!(v <= h.value(t) + 1e-15 && v >= h.value(t) - mu / 2.0 - 1e-15);
            }
        }
    }

    #[test]
    fn compensated_sum_recovers_cancellation() {
        let s: CompensatedSum = [1e16, 1.0, -1e16, 1.0].into_iter().collect();
        assert_eq!(s.value(), 2.0);
    }
}
