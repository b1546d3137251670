//! WebAssembly bindings for the browser demo. Every export returns a JSON
//! string; the page in `www/` draws it on a canvas.

use serde::Serialize;
use urank::diagnostics::MarginSpec;
use urank::simulate::{generate, SyntheticModel};
use urank::solver::{fit_lasso, SolverOptions};
use urank::urisk::{risk_subgradient_u, variance_comparison};
use urank::{BasisSpec, LossSpec, Theta};
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct LassoPath {
    lambdas: Vec<f64>,
    /// `coefficients[k][i]` is `θ̂_k` at `lambdas[i]`.
    coefficients: Vec<Vec<f64>>,
    support_sizes: Vec<usize>,
    true_support: Vec<usize>,
    lambda_max: f64,
}

fn loss_named(name: &str) -> Result<LossSpec, String> {
    match name {
        "hinge" => Ok(LossSpec::hinge()),
        "logistic" => Ok(LossSpec::logistic()),
        other => Err(format!("unknown loss `{other}`")),
    }
}

fn json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

/// Regularization path on a fresh sparse Gaussian dataset, from the smallest
/// `λ` that zeroes the fit down to `λ_max / 1000`, with warm starts.
#[allow(clippy::too_many_arguments)]
pub fn lasso_path_json(
    n: usize,
    d: usize,
    s: usize,
    amplitude: f64,
    sigma: f64,
    loss: &str,
    points: usize,
    seed: u64,
) -> Result<String, String> {
    if !(2..=200).contains(&points) {
        return Err("points must lie in 2..=200".into());
    }
    if n > 400 || d > 50 {
        return Err("keep n <= 400 and d <= 50 in the browser".into());
    }
    let loss = loss_named(loss)?;
    let model = SyntheticModel::sparse(d, s, amplitude, sigma).map_err(|e| e.to_string())?;
    let data = generate(&model, n, d, seed).map_err(|e| e.to_string())?;
    let basis = BasisSpec::named("linear", d).map_err(|e| e.to_string())?;
    let g0 = risk_subgradient_u(&Theta::zeros(d), &basis, &loss, &data).map_err(|e| e.to_string())?;
    let lambda_max = g0.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    let lambdas: Vec<f64> =
        (0..points).map(|i| lambda_max * 10f64.powf(-3.0 * i as f64 / (points - 1) as f64)).collect();
    let mut coefficients = vec![Vec::with_capacity(points); d];
    let mut support_sizes = Vec::with_capacity(points);
    let mut opts = SolverOptions { max_iters: 5_000, tol: 1e-7, ..SolverOptions::default() };
    for &lam in &lambdas {
        let fit = fit_lasso(&data, &basis, &loss, lam, None, &opts).map_err(|e| e.to_string())?;
        for (k, c) in fit.theta_hat.as_slice().iter().enumerate() {
            coefficients[k].push(*c);
        }
        support_sizes.push(fit.support.len());
        opts.theta0 = Some(fit.theta_hat.into_inner());
    }
    let true_support = (0..d).filter(|&k| model.theta0()[k] != 0.0).collect();
    json(&LassoPath { lambdas, coefficients, support_sizes, true_support, lambda_max })
}

#[derive(Serialize)]
struct ConjugateCurve {
    v: Vec<f64>,
    h: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
    /// Maximizer `u*(v)` of `uv - G(u)`.
    argmax: Vec<f64>,
}

/// `G(u) = a u^{2/α}` and its conjugate `H` on `[0, v_max]`.
pub fn conjugate_curve_json(a: f64, alpha: f64, v_max: f64, points: usize) -> Result<String, String> {
    let m = MarginSpec::new(a, alpha).map_err(|e| e.to_string())?;
    if !(v_max > 0.0 && v_max.is_finite()) || !(2..=2000).contains(&points) {
        return Err("need v_max > 0 and 2 <= points <= 2000".into());
    }
    let step = v_max / (points - 1) as f64;
    let v: Vec<f64> = (0..points).map(|i| i as f64 * step).collect();
    let h = v.iter().map(|&x| m.h(x)).collect();
    let argmax: Vec<f64> = v.iter().map(|&x| (alpha * x / (2.0 * a)).powf(alpha / (2.0 - alpha))).collect();
    let u_max = argmax.last().copied().unwrap_or(1.0).max(1e-9);
    let u: Vec<f64> = (0..points).map(|i| u_max * i as f64 / (points - 1) as f64).collect();
    let g = u.iter().map(|&x| m.g(x)).collect();
    json(&ConjugateCurve { v, h, u, g, argmax })
}

#[derive(Serialize)]
struct VarianceRow {
    n: usize,
    var_u: f64,
    var_split: f64,
    ratio: f64,
}

/// Variance of the full-pair and half-sample risk estimators across sample
/// sizes, for the logistic loss at `θ = θ₀` on a one-dimensional model.
pub fn variance_demo_json(sizes: &[u32], replications: usize, seed: u64) -> Result<String, String> {
    if sizes.is_empty() || sizes.iter().any(|&n| !(4..=120).contains(&n)) {
        return Err("sample sizes must lie in 4..=120".into());
    }
    if !(100..=2000).contains(&replications) {
        return Err("replications must lie in 100..=2000".into());
    }
    let model = SyntheticModel::isotropic(vec![1.0], 1.0).map_err(|e| e.to_string())?;
    let basis = BasisSpec::named("linear", 1).map_err(|e| e.to_string())?;
    let theta = Theta::new(vec![1.0]).map_err(|e| e.to_string())?;
    let loss = LossSpec::logistic();
    let mut rows = Vec::with_capacity(sizes.len());
    for (i, &n) in sizes.iter().enumerate() {
        let vc = variance_comparison(&loss, &basis, &theta, &model, n as usize, replications, seed.wrapping_add(i as u64))
            .map_err(|e| e.to_string())?;
        rows.push(VarianceRow { n: n as usize, var_u: vc.var_u, var_split: vc.var_split, ratio: vc.var_u / vc.var_split });
    }
    json(&rows)
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn lasso_path(
    n: usize,
    d: usize,
    s: usize,
    amplitude: f64,
    sigma: f64,
    loss: &str,
    points: usize,
    seed: u64,
) -> Result<String, JsError> {
    lasso_path_json(n, d, s, amplitude, sigma, loss, points, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn conjugate_curve(a: f64, alpha: f64, v_max: f64, points: usize) -> Result<String, JsError> {
    conjugate_curve_json(a, alpha, v_max, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn variance_demo(sizes: Vec<u32>, replications: usize, seed: u64) -> Result<String, JsError> {
    variance_demo_json(&sizes, replications, seed).map_err(|e| JsError::new(&e))
}
