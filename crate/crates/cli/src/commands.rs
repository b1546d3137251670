use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use urank::diagnostics::{
    compatibility_constant, gram_closed_form, gram_empirical, margin_constant_mc, margin_inequality_check,
    oracle_search, CompatibilityMode, GramMatrix, MarginSpec, Pseudonorm,
};
use urank::model::score;
use urank::simulate::{
    generate, run_rate_sweep, supports_up_to, oracle_inequality_frequency, LambdaMode, RateSweepConfig,
    RateSweepResult, SyntheticModel, OracleInequalityConfig,
};
use urank::solver::{fit_lasso, SolverOptions};
use urank::tuning::{
    check_envelope, cross_validate_lambda, estimate_c_hat, lambda_hat, lambda_theoretical, normalization_weights, tuning_report,
    LambdaGrid, DEFAULT_B,
};
use urank::{BasisSpec, Dataset, LossKind, LossSpec, Theta};

use crate::config::{csv_preamble, envelope, resolve, to_value, write_json, write_output};
use crate::{CliError, DiagnoseFlags, FitFlags, RankFlags, RatesFlags, SimulateFlags, OracleFlags, TuneFlags, WeightMode};

type CliResult<T> = std::result::Result<T, CliError>;

fn read_dataset(path: &Path) -> CliResult<Dataset> {
    let f = File::open(path).map_err(|e| CliError::usage(format!("cannot open {}: {e}", path.display())))?;
    Dataset::read_csv(BufReader::new(f)).map_err(|e| {
        let mut err = CliError::from(e);
        err.message = format!("{}: {}", path.display(), err.message);
        err
    })
}

fn required<'a, T>(v: &'a Option<T>, field: &str) -> CliResult<&'a T> {
    v.as_ref().ok_or_else(|| CliError::usage(format!("missing required field `{field}`")))
}

fn loss_of(kind: LossKind, sup_bound: Option<f64>) -> CliResult<LossSpec> {
    Ok(LossSpec::from_kind(kind, sup_bound)?)
}

/// Penalty choice as written in configs: `"auto"`, `"cv"` or a number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum LambdaSetting {
    Value(f64),
    Mode(String),
}

enum LambdaChoice {
    Auto,
    Cv,
    Fixed(f64),
}

impl LambdaSetting {
    fn choice(&self) -> CliResult<LambdaChoice> {
        match self {
            LambdaSetting::Value(v) => fixed(*v),
            LambdaSetting::Mode(s) => match s.trim() {
                "auto" => Ok(LambdaChoice::Auto),
                "cv" => Ok(LambdaChoice::Cv),
                other => match other.parse::<f64>() {
                    Ok(v) => fixed(v),
                    Err(_) => Err(CliError::usage(format!(
                        "invalid config field `lambda`: expected auto, cv or a number, got `{other}`"
                    ))),
                },
            },
        }
    }
}

fn fixed(v: f64) -> CliResult<LambdaChoice> {
    if v >= 0.0 && v.is_finite() {
        Ok(LambdaChoice::Fixed(v))
    } else {
        Err(CliError::usage("invalid config field `lambda`: must be a nonnegative finite number"))
    }
}

fn parse_grid(s: &str) -> CliResult<Vec<f64>> {
    s.parse::<LambdaGrid>()
        .map(|g| g.values().to_vec())
        .map_err(|e| CliError::usage(format!("invalid config field `grid`: {e}")))
}

// fit

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FitConfig {
    data: Option<PathBuf>,
    loss: LossKind,
    sup_bound: Option<f64>,
    basis: String,
    lambda: LambdaSetting,
    weights: WeightMode,
    b: f64,
    folds: usize,
    grid: Option<String>,
    seed: u64,
    solver: SolverOptions,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            data: None,
            loss: LossKind::Logistic,
            sup_bound: None,
            basis: "linear".into(),
            lambda: LambdaSetting::Mode("auto".into()),
            weights: WeightMode::None,
            b: DEFAULT_B,
            folds: 5,
            grid: None,
            seed: 0,
            solver: SolverOptions::default(),
        }
    }
}

pub fn fit(flags: FitFlags) -> CliResult<()> {
    let cfg: FitConfig = resolve(to_value(&FitConfig::default()), flags.config.as_deref(), &flags)?;
    let data = read_dataset(required(&cfg.data, "data")?)?;
    let basis = BasisSpec::named(&cfg.basis, data.d())?;
    let loss = loss_of(cfg.loss, cfg.sup_bound)?;

    let c_hat = estimate_c_hat(&data, &basis)?;
    let weights = match cfg.weights {
        WeightMode::None => None,
        WeightMode::Normalize => Some(normalization_weights(&data, &basis)?),
    };
    // undefined for a single feature; only needed when λ is not fixed
    let lam_hat = lambda_hat(c_hat, loss.lipschitz(), data.n(), basis.m(), cfg.b);
    let need_hat = || lam_hat.as_ref().copied().map_err(|e| CliError::usage(e.to_string()));
    let mut cv = None;
    let (lambda, source) = match cfg.lambda.choice()? {
        LambdaChoice::Auto => (need_hat()?, "auto"),
        LambdaChoice::Fixed(v) => (v, "fixed"),
        LambdaChoice::Cv => {
            let grid = match &cfg.grid {
                Some(g) => parse_grid(g)?,
                None => {
                    let l = need_hat()?;
                    LambdaGrid::log_between(l / 1e4, l, 20)?.values().to_vec()
                }
            };
            let res = cross_validate_lambda(&data, &basis, &loss, &grid, cfg.folds, cfg.seed, weights.as_deref(), &cfg.solver)?;
            let best = res.best_lambda;
            cv = Some(res);
            (best, "cv")
        }
    };
    let res = fit_lasso(&data, &basis, &loss, lambda, weights.as_deref(), &cfg.solver)?;
    let env = check_envelope(&data, &basis)?;
    let trace = &res.objective_trace;
    let mut result = json!({
        "theta_hat": res.theta_hat.as_slice(),
        "support": res.support,
        "lambda": lambda,
        "lambda_source": source,
        "lambda_hat": lam_hat.as_ref().ok(),
        "C_hat": c_hat,
        "weights": res.weights,
        "objective": res.objective,
        "converged": res.converged,
        "iterations": res.iterations,
        "objective_trace": {
            "length": trace.len(),
            "first": trace.first(),
            "last": trace.last(),
        },
        "envelope": {
            "ok": env.ok,
            "max_observed": env.max_observed,
            "threshold": env.threshold,
        },
        "basis": { "name": basis.name(), "d": data.d(), "m": basis.m() },
        "loss": loss,
        "n": data.n(),
    });
    if !env.ok {
        result["envelope"]["warning"] =
            json!("max_k |psi_k| exceeds sqrt(n / log m); the data-driven penalty may be unreliable");
    }
    if let Some(cv) = cv {
        result["cv"] = to_value(&cv);
    }
    write_json(flags.out.as_deref(), &envelope("fit", &cfg, result))
}

// rank

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RankConfig {
    model: Option<PathBuf>,
    pairs: Option<PathBuf>,
}

fn load_fit(path: &Path) -> CliResult<(Theta, BasisSpec)> {
    let f = File::open(path).map_err(|e| CliError::usage(format!("cannot open {}: {e}", path.display())))?;
    let v: Value = serde_json::from_reader(BufReader::new(f))
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let bad = |what: &str| CliError::usage(format!("{}: not a fit result ({what})", path.display()));
    let r = v.get("result").ok_or_else(|| bad("missing `result`"))?;
    let theta: Vec<f64> = serde_json::from_value(r.get("theta_hat").cloned().ok_or_else(|| bad("missing `theta_hat`"))?)
        .map_err(|_| bad("`theta_hat` is not a list of numbers"))?;
    let name = r.pointer("/basis/name").and_then(Value::as_str).ok_or_else(|| bad("missing `basis.name`"))?;
    let d = r.pointer("/basis/d").and_then(Value::as_u64).ok_or_else(|| bad("missing `basis.d`"))? as usize;
    let basis = BasisSpec::named(name, d)?;
    let theta = Theta::new(theta)?;
    if theta.len() != basis.m() {
        return Err(bad("`theta_hat` length does not match the basis"));
    }
    Ok((theta, basis))
}

fn read_pairs(path: &Path, d: usize) -> CliResult<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| CliError::usage(format!("cannot open {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(idx as u64 + 1);
        let parsed: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        let row = match parsed {
            Ok(r) => r,
            // a header line is allowed before the first data row
            Err(_) if rows.is_empty() && idx == 0 => continue,
            Err(_) => return Err(CliError::usage(format!("{}: line {line}: non-numeric field", path.display()))),
        };
        if row.len() != 2 * d {
            return Err(CliError::usage(format!(
                "{}: line {line}: expected {} values (x then x'), found {}",
                path.display(),
                2 * d,
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(CliError::usage(format!("{}: line {line}: non-finite value", path.display())));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn rank(flags: RankFlags) -> CliResult<()> {
    let cfg: RankConfig = resolve(to_value(&RankConfig::default()), flags.config.as_deref(), &flags)?;
    let (theta, basis) = load_fit(required(&cfg.model, "model")?)?;
    let d = basis.input_dim();
    let rows = read_pairs(required(&cfg.pairs, "pairs")?, d)?;
    let mut out = csv_preamble("rank", &cfg).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["row", "score", "label"]).map_err(|e| CliError::usage(e.to_string()))?;
        for (i, r) in rows.iter().enumerate() {
            let s = score(&theta, &basis, &r[..d], &r[d..])?;
            let label = if s > 0.0 {
                "first"
            } else if s < 0.0 {
                "second"
            } else {
                "tie"
            };
            w.write_record([(i + 1).to_string(), s.to_string(), label.to_string()])
                .map_err(|e| CliError::usage(e.to_string()))?;
        }
        w.flush()?;
    }
    write_output(flags.out.as_deref(), &out)
}

// tune

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TuneConfig {
    data: Option<PathBuf>,
    loss: LossKind,
    sup_bound: Option<f64>,
    basis: String,
    b: f64,
    /// Population `C`, when known, for the theoretical penalty.
    c_true: Option<f64>,
    grid: Option<String>,
    folds: usize,
    seed: u64,
    solver: SolverOptions,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            data: None,
            loss: LossKind::Logistic,
            sup_bound: None,
            basis: "linear".into(),
            b: DEFAULT_B,
            c_true: None,
            grid: None,
            folds: 5,
            seed: 0,
            solver: SolverOptions::default(),
        }
    }
}

pub fn tune(flags: TuneFlags) -> CliResult<()> {
    let cfg: TuneConfig = resolve(to_value(&TuneConfig::default()), flags.config.as_deref(), &flags)?;
    let data = read_dataset(required(&cfg.data, "data")?)?;
    let basis = BasisSpec::named(&cfg.basis, data.d())?;
    let loss = loss_of(cfg.loss, cfg.sup_bound)?;
    let weights = normalization_weights(&data, &basis)?;
    let env = check_envelope(&data, &basis)?;
    let mut result = if basis.m() >= 2 {
        let report = tuning_report(&data, &basis, &loss, cfg.b, cfg.c_true)?;
        let mut r = to_value(&report);
        r["envelope_threshold"] = json!(env.threshold);
        r
    } else {
        // the penalty formula needs log m > 0
        json!({
            "C_hat": estimate_c_hat(&data, &basis)?,
            "C_true": cfg.c_true,
            "lambda_hat": null,
            "lambda_theoretical": null,
            "B": cfg.b,
            "L": loss.lipschitz(),
            "envelope_ok": env.ok,
            "envelope_max": env.max_observed,
            "envelope_threshold": null,
            "note": "penalty formula undefined for m < 2",
        })
    };
    result["weights"] = json!(weights);
    result["n"] = json!(data.n());
    result["m"] = json!(basis.m());
    if let Some(g) = &cfg.grid {
        let grid = parse_grid(g)?;
        let cv = cross_validate_lambda(&data, &basis, &loss, &grid, cfg.folds, cfg.seed, None, &cfg.solver)?;
        result["cv"] = to_value(&cv);
    }
    write_json(flags.out.as_deref(), &envelope("tune", &cfg, result))
}

// diagnose

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct OracleDiag {
    loss: LossSpec,
    /// Sample size entering the penalty.
    n: usize,
    b: f64,
    /// Overrides the formula penalty when set.
    lambda_n: Option<f64>,
    delta: f64,
    pseudonorm: Pseudonorm,
    max_support: usize,
    inner_mc: usize,
}

impl Default for OracleDiag {
    fn default() -> Self {
        Self {
            loss: LossSpec::hinge(),
            n: 200,
            b: DEFAULT_B,
            lambda_n: None,
            delta: 0.1,
            pseudonorm: Pseudonorm::Conditional,
            max_support: 2,
            inner_mc: 20_000,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DiagnoseConfig {
    /// Empirical Gram matrix from data; otherwise the model's closed form.
    data: Option<PathBuf>,
    basis: String,
    model: Option<SyntheticModel>,
    /// Ambient dimension for the model (defaults to its own).
    d_ambient: Option<usize>,
    /// Supports whose compatibility constant is reported.
    supports: Vec<Vec<usize>>,
    compatibility: CompatibilityMode,
    /// Margin exponent; the margin section needs `model`.
    alpha: f64,
    margin_mc: usize,
    margin_thetas: usize,
    oracle: Option<OracleDiag>,
    seed: u64,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            data: None,
            basis: "linear".into(),
            model: None,
            d_ambient: None,
            supports: Vec::new(),
            compatibility: CompatibilityMode::ConeSearch,
            alpha: 0.5,
            margin_mc: 100_000,
            margin_thetas: 20,
            oracle: None,
            seed: 0,
        }
    }
}

fn random_thetas(model: &SyntheticModel, count: usize, seed: u64) -> CliResult<Vec<Theta>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let t0 = model.theta0();
    (0..count)
        .map(|_| {
            let scale = rng.random_range(0.1..4.0);
            let th: Vec<f64> = t0.iter().map(|v| scale * v + rng.random_range(-0.5..0.5)).collect();
            Ok(Theta::new(th)?)
        })
        .collect()
}

pub fn diagnose(flags: DiagnoseFlags) -> CliResult<()> {
    let cfg: DiagnoseConfig = resolve(to_value(&DiagnoseConfig::default()), flags.config.as_deref(), &flags)?;
    let gram: GramMatrix = match (&cfg.data, &cfg.model) {
        (Some(path), _) => {
            let data = read_dataset(path)?;
            let basis = BasisSpec::named(&cfg.basis, data.d())?;
            gram_empirical(&data, &basis)?
        }
        (None, Some(model)) => gram_closed_form(model, cfg.d_ambient.unwrap_or(model.dim()))?,
        (None, None) => return Err(CliError::usage("missing required field `data` or `model`")),
    };
    let mut compat = Vec::new();
    for s in &cfg.supports {
        let a = compatibility_constant(&gram, s, cfg.compatibility)?;
        compat.push(json!({ "support": s, "A": a }));
    }
    let mut result = json!({
        "gram": gram.summary(),
        "compatibility": compat,
    });
    if let Some(model) = &cfg.model {
        let c = margin_constant_mc(model, cfg.alpha, cfg.margin_mc, cfg.seed)?;
        result["margin_constant"] = to_value(&c);
        if !c.divergent {
            let spec = MarginSpec::from_margin_constant(c.estimate, cfg.alpha)?;
            let thetas = random_thetas(model, cfg.margin_thetas, cfg.seed ^ 0x5eed)?;
            let check = margin_inequality_check(model, &thetas, cfg.alpha, c.estimate, cfg.margin_mc, cfg.seed)?;
            result["margin"] = json!({ "a": spec.a(), "alpha": spec.alpha() });
            result["margin_check"] = to_value(&check);
            if let Some(o) = &cfg.oracle {
                let d = cfg.d_ambient.unwrap_or(model.dim());
                let basis = BasisSpec::named("linear", d)?;
                let lambda_n = match o.lambda_n {
                    Some(l) => l,
                    None => {
                        // E ψ_k² = 2 V_kk for the linear basis
                        let c_true = (2.0 * model.ambient_covariance(d).diagonal().max()).sqrt();
                        lambda_theoretical(c_true, o.loss.lipschitz(), o.n, d, o.b)?
                    }
                };
                let candidates = supports_up_to(d, o.max_support);
                let res = oracle_search(
                    model, &basis, &o.loss, lambda_n, o.delta, &spec, o.pseudonorm, &candidates, o.inner_mc, cfg.seed,
                )?;
                result["oracle"] = to_value(&res);
            }
        } else if cfg.oracle.is_some() {
            return Err(CliError::usage("oracle diagnostics need a finite margin constant"));
        }
    } else if cfg.oracle.is_some() {
        return Err(CliError::usage("missing required field `model` for oracle diagnostics"));
    }
    write_json(flags.out.as_deref(), &envelope("diagnose", &cfg, result))
}

// simulate

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SimulateConfig {
    theta0: Vec<f64>,
    /// Covariance rows; identity when absent.
    v: Option<Vec<Vec<f64>>>,
    sigma: f64,
    n: usize,
    d_ambient: Option<usize>,
    seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { theta0: vec![1.0, 0.0, 0.0], v: None, sigma: 1.0, n: 100, d_ambient: None, seed: 0 }
    }
}

pub fn simulate(flags: SimulateFlags) -> CliResult<()> {
    let cfg: SimulateConfig = resolve(to_value(&SimulateConfig::default()), flags.config.as_deref(), &flags)?;
    let model = match &cfg.v {
        None => SyntheticModel::isotropic(cfg.theta0.clone(), cfg.sigma)?,
        Some(rows) => {
            let d = cfg.theta0.len();
            if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                return Err(CliError::usage(format!("invalid config field `v`: must be {d} x {d}")));
            }
            let v = nalgebra::DMatrix::from_fn(d, d, |i, j| rows[i][j]);
            SyntheticModel::new(cfg.theta0.clone(), v, cfg.sigma)?
        }
    };
    let d_amb = cfg.d_ambient.unwrap_or(model.dim());
    let data = generate(&model, cfg.n, d_amb, cfg.seed)?;
    let mut out = csv_preamble("simulate", &cfg).into_bytes();
    data.write_csv(&mut out)?;
    write_output(flags.out.as_deref(), &out)
}

// rates

fn default_rates() -> RateSweepConfig {
    RateSweepConfig {
        n_grid: vec![100, 200, 400, 800, 1600],
        m_grid: vec![50],
        s_true: 3,
        amplitude: 1.0,
        sigma: 1.0,
        loss: LossSpec::logistic(),
        lambda_mode: LambdaMode::Cv { folds: 5, grid_points: 10, min_ratio: 1e-2 },
        replications: 30,
        seed: 0,
        mc_pairs: 50_000,
        threshold: None,
        oracle: None,
        solver: SolverOptions::default(),
    }
}

fn create_file(path: &Path) -> CliResult<File> {
    File::create(path).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

pub fn rates(flags: RatesFlags) -> CliResult<()> {
    let cfg: RateSweepConfig = resolve(to_value(&default_rates()), flags.config.as_deref(), &flags)?;
    let res: RateSweepResult = run_rate_sweep(&cfg)?;
    let dir = &flags.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))?;
    let preamble = csv_preamble("rates", &cfg);

    let mut buf = preamble.clone().into_bytes();
    res.write_csv(&mut buf)?;
    std::fs::write(dir.join("records.csv"), buf)?;
    let mut buf = preamble.into_bytes();
    res.write_median_csv(&mut buf)?;
    std::fs::write(dir.join("medians.csv"), buf)?;

    let summary = json!({
        "cells": res.cells,
        "slopes": res.slopes,
        "oracle_fallback": res.oracle_fallback,
    });
    let f = create_file(&dir.join("summary.json"))?;
    serde_json::to_writer_pretty(f, &envelope("rates", &cfg, summary)).map_err(|e| CliError::usage(e.to_string()))?;
    Ok(())
}

// oracle inequality

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct OracleConfig {
    n: usize,
    m: usize,
    s_true: usize,
    amplitude: f64,
    sigma: f64,
    loss: LossSpec,
    b: f64,
    delta: f64,
    /// Margin `(a, α)`; estimated from the model at `alpha` when absent.
    margin: Option<MarginSpec>,
    alpha: f64,
    margin_mc: usize,
    pseudonorm: Pseudonorm,
    max_support: usize,
    replications: usize,
    mc_pairs: usize,
    seed: u64,
    solver: SolverOptions,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            n: 200,
            m: 10,
            s_true: 2,
            amplitude: 1.0,
            sigma: std::f64::consts::FRAC_1_SQRT_2,
            loss: LossSpec::hinge(),
            b: DEFAULT_B,
            delta: 0.1,
            margin: None,
            alpha: 0.5,
            margin_mc: 200_000,
            pseudonorm: Pseudonorm::Conditional,
            max_support: 3,
            replications: 20,
            mc_pairs: 20_000,
            seed: 0,
            solver: SolverOptions::default(),
        }
    }
}

pub fn oracle(flags: OracleFlags) -> CliResult<()> {
    let mut cfg: OracleConfig = resolve(to_value(&OracleConfig::default()), flags.config.as_deref(), &flags)?;
    let margin = match cfg.margin {
        Some(m) => m,
        None => {
            let model = SyntheticModel::sparse(cfg.m, cfg.s_true, cfg.amplitude, cfg.sigma)?;
            let c = margin_constant_mc(&model, cfg.alpha, cfg.margin_mc, cfg.seed)?;
            if c.divergent {
                return Err(CliError::usage("margin constant diverges for this model; set `margin` explicitly"));
            }
            MarginSpec::from_margin_constant(c.estimate, cfg.alpha)?
        }
    };
    cfg.margin = Some(margin);
    let run = OracleInequalityConfig {
        n: cfg.n,
        m: cfg.m,
        s_true: cfg.s_true,
        amplitude: cfg.amplitude,
        sigma: cfg.sigma,
        loss: cfg.loss,
        b: cfg.b,
        delta: cfg.delta,
        margin,
        pseudonorm: cfg.pseudonorm,
        max_support: cfg.max_support,
        replications: cfg.replications,
        mc_pairs: cfg.mc_pairs,
        seed: cfg.seed,
        solver: cfg.solver.clone(),
    };
    let report = oracle_inequality_frequency(&run)?;
    write_json(flags.out.as_deref(), &envelope("oracle", &cfg, to_value(&report)))
}
