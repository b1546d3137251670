//! Weighted-l1 penalized minimization of a convex pairwise risk.
//!
//! Two step rules are available. `FixedOverSqrtK` is the proximal subgradient
//! method with step `c/√k`. `Backtracking` is accelerated proximal gradient
//! with a backtracking Lipschitz estimate and function-value restarts; for the
//! hinge loss it runs on a Huber-smoothed surrogate whose smoothing is driven
//! to zero in stages. Both track the best iterate under the exact objective.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{BasisSpec, Dataset, LossSpec, Theta};
use crate::urisk::{empirical_risk_u, UStatRisk};

/// A convex risk in `θ` that the solver can query.
pub trait ConvexRisk {
    fn dim(&self) -> usize;

    /// Risk at `theta`; fills `grad` with a subgradient when given. With
    /// `smoothing = Some(μ)` a nonsmooth risk evaluates its smoothed
    /// surrogate instead; smooth risks ignore it.
    fn eval(&self, theta: &[f64], grad: Option<&mut [f64]>, smoothing: Option<f64>) -> f64;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    FixedOverSqrtK,
    Backtracking,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iters: usize,
    pub step_rule: StepRule,
    pub initial_step: f64,
    /// Relative objective change over [`SolverOptions::window`] iterations
    /// below which the run stops.
    pub tol: f64,
    pub window: usize,
    /// Start point; `None` means the zero vector.
    pub theta0: Option<Vec<f64>>,
    /// Smoothing levels for nonsmooth losses under `Backtracking`, visited in
    /// order.
    pub smoothing: Vec<f64>,
    /// Row blocks for the pair sums. Results are deterministic for a fixed
    /// value.
    pub partitions: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 50_000,
            step_rule: StepRule::Backtracking,
            initial_step: 1.0,
            tol: 1e-8,
            window: 10,
            theta0: None,
            smoothing: vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5],
            partitions: 1,
        }
    }
}

impl SolverOptions {
    fn validate(&self, m: usize) -> Result<()> {
        if self.max_iters == 0 {
            return invalid("max_iters must be at least 1");
        }
        if !(self.tol > 0.0) {
            return invalid("tol must be positive");
        }
        if !(self.initial_step > 0.0 && self.initial_step.is_finite()) {
            return invalid("initial_step must be a positive finite number");
        }
        if self.window == 0 {
            return invalid("window must be at least 1");
        }
        if let Some(t0) = &self.theta0 {
            if t0.len() != m || t0.iter().any(|v| !v.is_finite()) {
                return invalid(format!("theta0 must be a finite vector of length {m}"));
            }
        }
        if self.smoothing.iter().any(|mu| !(*mu > 0.0)) {
            return invalid("smoothing levels must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: Theta,
    pub lambda: f64,
    pub weights: Vec<f64>,
    /// Best objective seen after each iteration (non-increasing).
    pub objective_trace: Vec<f64>,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub support: Vec<usize>,
    pub step_rule: StepRule,
    pub partitions: usize,
}

/// Componentwise `sign(v_k) max(|v_k| - t_k, 0)`.
pub fn soft_threshold(v: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if v.len() != thresholds.len() {
        return invalid("value and threshold vectors differ in length");
    }
    if thresholds.iter().any(|t| !(*t >= 0.0)) {
        return invalid("thresholds must be nonnegative");
    }
    Ok(v.iter().zip(thresholds).map(|(x, t)| shrink(*x, *t)).collect())
}

#[inline]
fn shrink(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

fn penalty(theta: &[f64], lambda: f64, weights: &[f64]) -> f64 {
    lambda * theta.iter().zip(weights).map(|(t, w)| w * t.abs()).sum::<f64>()
}

fn check_penalty(m: usize, lambda: f64, weights: &[f64]) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return invalid("lambda must be a nonnegative finite number");
    }
    if weights.len() != m {
        return invalid(format!("expected {m} penalty weights, got {}", weights.len()));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return invalid("penalty weights must be nonnegative and finite");
    }
    Ok(())
}

/// `Q_n(f_θ) + λ Σ_k w_k |θ_k|`. `weights = None` means all ones.
pub fn objective(
    theta: &Theta,
    basis: &BasisSpec,
    loss: &LossSpec,
    data: &Dataset,
    lambda: f64,
    weights: Option<&[f64]>,
) -> Result<f64> {
    let ones = vec![1.0; basis.m()];
    let w = weights.unwrap_or(&ones);
    check_penalty(basis.m(), lambda, w)?;
    let risk = empirical_risk_u(theta, basis, loss, data)?.value;
    Ok(risk + penalty(theta.as_slice(), lambda, w))
}

/// Smallest `λ` at which zero is optimal: `max_k |g_k(0)| / w_k` over
/// penalized coordinates, where `g(0)` is the gradient at zero. Only exact for
/// smooth risks; for the hinge it uses the subgradient the loss reports.
/// Infinite when a zero-weight coordinate has a nonzero gradient.
pub fn lambda_max(risk: &dyn ConvexRisk, weights: &[f64]) -> f64 {
    let m = risk.dim();
    let mut g = vec![0.0; m];
    risk.eval(&vec![0.0; m], Some(&mut g), None);
    g.iter()
        .zip(weights)
        .map(|(gk, w)| if *w > 0.0 { gk.abs() / w } else if *gk != 0.0 { f64::INFINITY } else { 0.0 })
        .fold(0.0, f64::max)
}

/// Minimizes `Q_n(f_θ) + λ Σ w_k |θ_k|` over `θ ∈ R^m`.
pub fn fit_lasso(
    data: &Dataset,
    basis: &BasisSpec,
    loss: &LossSpec,
    lambda: f64,
    weights: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<FitResult> {
    let risk = UStatRisk::new(data, basis, loss)?.with_partitions(opts.partitions);
    let ones = vec![1.0; basis.m()];
    minimize(&risk, lambda, weights.unwrap_or(&ones), opts)
}

/// Penalized minimization of any [`ConvexRisk`].
pub fn minimize(risk: &dyn ConvexRisk, lambda: f64, weights: &[f64], opts: &SolverOptions) -> Result<FitResult> {
    let m = risk.dim();
    check_penalty(m, lambda, weights)?;
    opts.validate(m)?;
    let start = opts.theta0.clone().unwrap_or_else(|| vec![0.0; m]);
    let mut state = Tracker::new(risk, lambda, weights, start);
    let converged = match opts.step_rule {
        StepRule::FixedOverSqrtK => subgradient_run(risk, lambda, weights, opts, &mut state),
        StepRule::Backtracking => {
            let mut probe = vec![0.0; m];
            // smooth risks report identical values with and without smoothing
            let x = &state.best_theta;
            let nonsmooth = opts
                .smoothing
                .first()
                .is_some_and(|mu| risk.eval(x, Some(&mut probe), Some(*mu)) != risk.eval(x, None, None));
            if nonsmooth {
                let mut converged = false;
                for mu in &opts.smoothing {
                    let from = state.best_theta.clone();
                    converged = accelerated_run(risk, lambda, weights, opts, &mut state, from, Some(*mu));
                    if state.iterations >= opts.max_iters {
                        break;
                    }
                }
                converged
            } else {
                let from = state.best_theta.clone();
                accelerated_run(risk, lambda, weights, opts, &mut state, from, None)
            }
        }
    };
    Ok(state.finish(lambda, weights, converged, opts))
}

struct Tracker {
    best_theta: Vec<f64>,
    best: f64,
    trace: Vec<f64>,
    iterations: usize,
}

impl Tracker {
    fn new(risk: &dyn ConvexRisk, lambda: f64, weights: &[f64], start: Vec<f64>) -> Self {
        let best = risk.eval(&start, None, None) + penalty(&start, lambda, weights);
        Self { best_theta: start, best, trace: Vec::new(), iterations: 0 }
    }

    /// Records an iterate scored by the exact objective.
    fn offer(&mut self, theta: &[f64], exact_objective: f64) {
        if exact_objective < self.best {
            self.best = exact_objective;
            self.best_theta.copy_from_slice(theta);
        }
        self.trace.push(self.best);
        self.iterations += 1;
    }

    fn finish(self, lambda: f64, weights: &[f64], converged: bool, opts: &SolverOptions) -> FitResult {
        let theta_hat = Theta::new(self.best_theta).expect("iterates stay finite");
        let support = theta_hat.support();
        FitResult {
            theta_hat,
            lambda,
            weights: weights.to_vec(),
            objective: self.best,
            objective_trace: self.trace,
            converged,
            iterations: self.iterations,
            support,
            step_rule: opts.step_rule,
            partitions: opts.partitions,
        }
    }
}

fn window_converged(history: &[f64], window: usize, tol: f64) -> bool {
    if history.len() <= window {
        return false;
    }
    let now = history[history.len() - 1];
    let before = history[history.len() - 1 - window];
    (before - now).abs() <= tol * now.abs().max(1.0)
}

fn subgradient_run(
    risk: &dyn ConvexRisk,
    lambda: f64,
    weights: &[f64],
    opts: &SolverOptions,
    state: &mut Tracker,
) -> bool {
    let m = risk.dim();
    let mut x = state.best_theta.clone();
    let mut g = vec![0.0; m];
    let mut thresholds = vec![0.0; m];
    for k in 1..=opts.max_iters {
        risk.eval(&x, Some(&mut g), None);
        let step = opts.initial_step / (k as f64).sqrt();
        for ((xk, gk), (t, w)) in x.iter_mut().zip(&g).zip(thresholds.iter_mut().zip(weights)) {
            *t = step * lambda * w;
            *xk = shrink(*xk - step * gk, *t);
        }
        let f = risk.eval(&x, None, None) + penalty(&x, lambda, weights);
        state.offer(&x, f);
        // the best value can stall for a few steps while the iterate moves,
        // so require the window to be flat at a scale tied to the step size
        if window_converged(&state.trace, opts.window.max(100), opts.tol) {
            return true;
        }
    }
    false
}

#[allow(clippy::too_many_arguments)]
fn accelerated_run(
    risk: &dyn ConvexRisk,
    lambda: f64,
    weights: &[f64],
    opts: &SolverOptions,
    state: &mut Tracker,
    start: Vec<f64>,
    smoothing: Option<f64>,
) -> bool {
    let m = risk.dim();
    let mut x = start;
    let mut y = x.clone();
    let mut t: f64 = 1.0;
    let mut lip = 1.0 / opts.initial_step;
    let mut gy = vec![0.0; m];
    let mut cand = vec![0.0; m];
    let mut surrogate_obj = risk.eval(&x, None, smoothing) + penalty(&x, lambda, weights);
    let mut history = vec![surrogate_obj];
    while state.iterations < opts.max_iters {
        let fy = risk.eval(&y, Some(&mut gy), smoothing);
        let mut f_cand;
        loop {
            let step = 1.0 / lip;
            let mut quad = 0.0;
            let mut lin = 0.0;
            for k in 0..m {
                cand[k] = shrink(y[k] - step * gy[k], step * lambda * weights[k]);
                let diff = cand[k] - y[k];
                lin += gy[k] * diff;
                quad += diff * diff;
            }
            f_cand = risk.eval(&cand, None, smoothing);
            if f_cand <= fy + lin + 0.5 * lip * quad + 1e-14 * fy.abs() || lip > 1e300 {
                break;
            }
            lip *= 2.0;
        }
        let obj_cand = f_cand + penalty(&cand, lambda, weights);
        let exact = if smoothing.is_some() { risk.eval(&cand, None, None) + penalty(&cand, lambda, weights) } else { obj_cand };
        state.offer(&cand, exact);
        if obj_cand > surrogate_obj {
            // restart momentum from the better point
            t = 1.0;
            y.copy_from_slice(&x);
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            for k in 0..m {
                y[k] = cand[k] + beta * (cand[k] - x[k]);
            }
            x.copy_from_slice(&cand);
            surrogate_obj = obj_cand;
            t = t_next;
        }
        history.push(surrogate_obj);
        lip *= 0.9;
        if window_converged(&history, opts.window, opts.tol) {
            return true;
        }
    }
    false
}

/// `{k : |θ̂_k| > τ}`.
pub fn threshold_support(theta_hat: &Theta, tau: f64) -> Result<Vec<usize>> {
    if !(tau >= 0.0) {
        return invalid("threshold must be nonnegative");
    }
    Ok(theta_hat.as_slice().iter().enumerate().filter(|(_, v)| v.abs() > tau).map(|(k, _)| k).collect())
}
