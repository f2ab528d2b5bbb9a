//! Seeded Monte Carlo experiments and empirical convergence rates.
//!
//! Each cell `(n, replicate)` draws data from its own counter-derived seed,
//! fits the penalized estimator over a λ grid tuned against the known truth,
//! and records the achieved MSE next to the oracle bound implied by the
//! bandwidth and penalty schedules. Cells are independent jobs; they may run
//! on any number of threads in any order and still produce bit-identical
//! output, because results are sorted by `(n, replicate)` before aggregation
//! and every random draw is a pure function of `(seed, index)`.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{construct_kernel, derivative_bound};
use crate::oracle::{approx_error_sq, build_oracle, delta_schedule, lambda_schedule, OracleSpec};
use crate::pwpoly::{Interval, PiecewisePolynomial, Polynomial, TruncatedPowerTerm};
use crate::rng;
use crate::solver::{solve_warm, AdmmState, SolveOptions, TrendFilterProblem};
use crate::tv::tv_continuous;

/// Truth specification beyond the two built-in names.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CustomTruth {
    pub true_order: usize,
    /// Global polynomial coefficients, ascending degree.
    pub base: Vec<f64>,
    /// `(knot, degree, weight)` truncated-power terms on [0, 1].
    pub terms: Vec<(f64, usize, f64)>,
}

/// λ grid specification.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LambdaGrid {
    /// Log-spaced `points` values spanning `[schedule/span, schedule*span]`
    /// around the theoretical weight with C = 1.
    Schedule { points: usize, span: f64 },
    /// Fixed values used for every n.
    Explicit { values: Vec<f64> },
}

/// Full description of a Monte Carlo run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// "step3", "ramp3", or "custom".
    pub truth_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom: Option<CustomTruth>,
    pub penalty_order: usize,
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    pub sigma: f64,
    pub base_seed: u64,
    pub lambda_grid: LambdaGrid,
    pub output_path: String,
    #[serde(default = "default_solver_tol")]
    pub solver_tol: f64,
    #[serde(default = "default_solver_max_iter")]
    pub solver_max_iter: usize,
}

fn default_solver_tol() -> f64 {
    3e-5
}

fn default_solver_max_iter() -> usize {
    20_000
}

impl ExperimentConfig {
    /// Desk-scale defaults: n doubling from 256 to 8192, 40 replicates,
    /// unit noise, 30 scheduled λ values spanning four decades.
    pub fn desk_scale(truth_name: &str, penalty_order: usize, base_seed: u64) -> Self {
        ExperimentConfig {
            truth_name: truth_name.to_string(),
            custom: None,
            penalty_order,
            n_grid: vec![256, 512, 1024, 2048, 4096, 8192],
            replicates: 40,
            sigma: 1.0,
            base_seed,
            lambda_grid: LambdaGrid::Schedule {
                points: 30,
                span: 100.0,
            },
            output_path: String::new(),
            solver_tol: default_solver_tol(),
            solver_max_iter: default_solver_max_iter(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() {
            return Err(Error::param("empty n grid"));
        }
        for w in self.n_grid.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::param("n grid must be strictly increasing"));
            }
        }
        for &n in &self.n_grid {
            if n <= self.penalty_order + 1 {
                return Err(Error::param(format!(
                    "n = {n} too small for penalty order {}",
                    self.penalty_order
                )));
            }
        }
        if self.replicates < 1 {
            return Err(Error::param("need at least one replicate"));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::param(format!("bad noise level {}", self.sigma)));
        }
        if let LambdaGrid::Schedule { points, span } = &self.lambda_grid {
            if *points < 1 || !(span.is_finite() && *span >= 1.0) {
                return Err(Error::param("bad λ schedule grid"));
            }
        }
        if let LambdaGrid::Explicit { values } = &self.lambda_grid {
            if values.is_empty() || !values.iter().all(|l| l.is_finite() && *l >= 0.0) {
                return Err(Error::param("bad explicit λ grid"));
            }
        }
        if !(self.solver_tol > 0.0) || self.solver_max_iter == 0 {
            return Err(Error::param("bad solver options"));
        }
        self.resolve_truth().map(|_| ())
    }

    /// The truth function and its total-variation order ℓ.
    pub fn resolve_truth(&self) -> Result<(PiecewisePolynomial, usize)> {
        match self.truth_name.as_str() {
            "custom" => {
                let c = self
                    .custom
                    .as_ref()
                    .ok_or_else(|| Error::param("custom truth requires a definition"))?;
                if c.true_order < 1 {
                    return Err(Error::param("custom truth order must be at least 1"));
                }
                let terms: Vec<TruncatedPowerTerm> = c
                    .terms
                    .iter()
                    .map(|&(d, m, w)| TruncatedPowerTerm::new(d, m, w))
                    .collect();
                let f = PiecewisePolynomial::from_truncated_powers(
                    Interval::unit(),
                    &Polynomial::new(c.base.clone()),
                    &terms,
                )?;
                if !tv_continuous(&f, c.true_order).is_finite() {
                    return Err(Error::param(format!(
                        "custom truth has infinite order-{} variation",
                        c.true_order
                    )));
                }
                Ok((f, c.true_order))
            }
            name => make_truth(name),
        }
    }
}

/// Built-in truths: `step3` is `3·1(x >= 0.5)` (order 1) and `ramp3` is
/// `3(x - 0.5)_+` (order 2), both on [0, 1].
pub fn make_truth(name: &str) -> Result<(PiecewisePolynomial, usize)> {
    let (degree, ell) = match name {
        "step3" => (0, 1),
        "ramp3" => (1, 2),
        other => {
            return Err(Error::param(format!(
                "unknown truth \"{other}\" (expected step3, ramp3, or custom)"
            )))
        }
    };
    let f = PiecewisePolynomial::from_truncated_powers(
        Interval::unit(),
        &Polynomial::zero(),
        &[TruncatedPowerTerm::new(0.5, degree, 3.0)],
    )?;
    Ok((f, ell))
}

/// Sample `y_i = truth(i/n) + σ z_i` with the documented generator.
pub fn generate_data(truth: &PiecewisePolynomial, n: usize, sigma: f64, seed: u64) -> Vec<f64> {
    assert!(n >= 1, "need at least one observation");
    assert!(sigma >= 0.0, "noise level must be nonnegative");
    let (lo, len) = (truth.domain().lo(), truth.domain().len());
    (1..=n)
        .map(|i| {
            let x = lo + len * (i as f64 / n as f64);
            truth.eval_extended(x) + sigma * rng::standard_normal(seed, (i - 1) as u64)
        })
        .collect()
}

/// Solve at every λ of the grid (descending, warm-started from the fully
/// penalized polynomial fit) and return the `(λ, mse)` pair minimizing the
/// exact MSE against the truth values. Starting the path at the polynomial
/// fit keeps partially converged iterates on the smooth side, where their
/// error is overstated rather than understated, so the argmin cannot be won
/// by an unconverged fit.
pub fn fit_oracle_lambda(
    y: &[f64],
    truth_values: &[f64],
    k: usize,
    lambda_grid: &[f64],
    opts: &SolveOptions,
) -> Result<(f64, f64)> {
    if lambda_grid.is_empty() {
        return Err(Error::param("empty λ grid"));
    }
    assert_eq!(y.len(), truth_values.len());
    let mut order: Vec<f64> = lambda_grid.to_vec();
    order.sort_by(f64::total_cmp);
    order.reverse();

    let n = y.len() as f64;
    let mse_of = |theta: &[f64]| -> f64 {
        theta
            .iter()
            .zip(truth_values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    };

    let mut best: Option<(f64, f64)> = None;
    let mut state: Option<AdmmState> = None;
    for &lam in &order {
        let problem = TrendFilterProblem::new(y.to_vec(), k, lam)?;
        let (fit, s) = solve_warm(&problem, opts, state.take());
        if fit.converged(opts.tol) {
            // The splitting iterate's job is to identify a knot pattern; the
            // candidate actually scored is the exact solution of the program
            // restricted to that pattern (a small dense refit). Unlike the raw
            // iterate, a restricted solution cannot look good by virtue of
            // being half-converged.
            let (active, signs) = s.active_pattern();
            let refit = if active.len() <= 300 {
                crate::solver::refit_with_cleanup(&problem, &active, &signs, 3)
            } else {
                None
            };
            let mse = match &refit {
                Some(theta) => mse_of(theta),
                None => mse_of(&fit.theta),
            };
            if best.is_none_or(|(_, b)| mse < b) {
                best = Some((lam, mse));
            }
        }
        state = Some(s);
    }
    best.ok_or_else(|| Error::Numerical("solver failed to converge at every λ".into()))
}

/// One Monte Carlo cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub n: usize,
    pub replicate: usize,
    pub seed: u64,
    /// Oracle-selected penalty weight.
    pub lambda: f64,
    /// `||θ̂ - f*(x)||²_n` at that weight.
    pub mse: f64,
    /// `||f* - f_{δ,k}||²_n + λ_n P_k(f_{δ,k})` at the scheduled bandwidth.
    pub oracle_bound: f64,
}

/// Completed run: per-cell records plus bookkeeping for the summary.
#[derive(Clone, Debug)]
pub struct ExperimentRun {
    pub config: ExperimentConfig,
    pub true_order: usize,
    pub results: Vec<ReplicateResult>,
    pub failures: usize,
    pub wall_secs: f64,
}

/// Fitted log-log convergence rate.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RateEstimate {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub n_points: usize,
}

/// Execute every `(n, replicate)` cell of the configured grid.
///
/// Cells run in parallel on the global thread pool; the per-cell seed is
/// `cell_seed(base_seed, n, replicate)`, so the outcome does not depend on
/// execution order. Solver failures are skipped and counted.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentRun> {
    config.validate()?;
    let start = Instant::now();
    let (truth, ell) = config.resolve_truth()?;
    let k = config.penalty_order;
    if k <= ell {
        return Err(Error::param(format!(
            "experiment needs a misspecified penalty: k = {k} <= ℓ = {ell}"
        )));
    }
    let p_ell = tv_continuous(&truth, ell).total;
    let kernel = construct_kernel(k)?;
    let lemma_c = 2.0 * derivative_bound(&kernel, k - ell)?;

    struct CellPlan {
        n: usize,
        truth_values: Vec<f64>,
        lambdas: Vec<f64>,
        oracle_bound: f64,
    }

    let plans: Vec<CellPlan> = config
        .n_grid
        .iter()
        .map(|&n| -> Result<CellPlan> {
            let (lo, len) = (truth.domain().lo(), truth.domain().len());
            let truth_values = (1..=n)
                .map(|i| truth.eval_extended(lo + len * (i as f64 / n as f64)))
                .collect();
            let lambdas = match &config.lambda_grid {
                LambdaGrid::Explicit { values } => values.clone(),
                LambdaGrid::Schedule { points, span } => {
                    let center = lambda_schedule(n, k, ell, p_ell, 1.0)?;
                    log_spaced(center / span, center * span, *points)
                }
            };
            let delta = delta_schedule(n, k, ell)?;
            let spec = OracleSpec::new(truth.clone(), ell, k, delta)?;
            let oracle = build_oracle(&spec)?;
            let approx = approx_error_sq(&truth, &oracle, n);
            let lambda_n = lambda_schedule(n, k, ell, p_ell, lemma_c)?;
            let p_k = tv_continuous(&oracle, k).total;
            Ok(CellPlan {
                n,
                truth_values,
                lambdas,
                oracle_bound: approx + lambda_n * p_k,
            })
        })
        .collect::<Result<_>>()?;

    let opts_for = |n: usize| cell_solve_options(config, n);

    let cells: Vec<(usize, usize)> = plans
        .iter()
        .enumerate()
        .flat_map(|(pi, _)| (0..config.replicates).map(move |r| (pi, r)))
        .collect();

    let outcomes: Vec<Option<ReplicateResult>> = cells
        .par_iter()
        .map(|&(pi, replicate)| {
            let plan = &plans[pi];
            let seed = rng::cell_seed(config.base_seed, plan.n as u64, replicate as u64);
            let y = generate_data(&truth, plan.n, config.sigma, seed);
            let opts = opts_for(plan.n);
            fit_oracle_lambda(&y, &plan.truth_values, k, &plan.lambdas, &opts)
                .ok()
                .map(|(lambda, mse)| ReplicateResult {
                    n: plan.n,
                    replicate,
                    seed,
                    lambda,
                    mse,
                    oracle_bound: plan.oracle_bound,
                })
        })
        .collect();

    let failures = outcomes.iter().filter(|o| o.is_none()).count();
    let mut results: Vec<ReplicateResult> = outcomes.into_iter().flatten().collect();
    results.sort_by_key(|r| (r.n, r.replicate));

    Ok(ExperimentRun {
        config: config.clone(),
        true_order: ell,
        results,
        failures,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

/// Per-cell solver options. The splitting residual lives in `Δ^{k-1}` units,
/// which shrink with n relative to the fitted values, so the tolerance
/// tightens as the grid grows (at half the worst-case exponent; the exact
/// refit behind [`fit_oracle_lambda`] absorbs the remaining slack).
pub fn cell_solve_options(config: &ExperimentConfig, n: usize) -> SolveOptions {
    let n0 = config.n_grid.first().copied().unwrap_or(n) as f64;
    let scale = (n0 / n as f64).powf(0.5 * (config.penalty_order as f64 - 1.0));
    SolveOptions {
        // pinning the splitting weight at the conditioning cap keeps the
        // TV-prox threshold as small as the θ-step allows, which is what
        // makes knot patterns emerge quickly along a descending λ path
        rho: Some(crate::solver::conditioning_cap(n, config.penalty_order)),
        max_iter: config.solver_max_iter,
        tol: config.solver_tol * scale,
        certify: false,
    }
}

fn log_spaced(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![(lo * hi).sqrt()];
    }
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..points)
        .map(|i| (llo + (lhi - llo) * i as f64 / (points - 1) as f64).exp())
        .collect()
}

/// Ordinary least squares of `log(mean MSE at n)` on `log n`.
pub fn estimate_rate(results: &[ReplicateResult]) -> Result<RateEstimate> {
    let mut by_n: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for r in results {
        let e = by_n.entry(r.n).or_insert((0.0, 0));
        e.0 += r.mse;
        e.1 += 1;
    }
    if by_n.len() < 3 {
        return Err(Error::param(format!(
            "rate estimation needs at least 3 sample sizes, got {}",
            by_n.len()
        )));
    }
    let pts: Vec<(f64, f64)> = by_n
        .iter()
        .map(|(&n, &(sum, count))| {
            let mean = sum / count as f64;
            if mean <= 0.0 {
                return Err(Error::Numerical(format!("mean MSE at n = {n} not positive")));
            }
            Ok(((n as f64).ln(), mean.ln()))
        })
        .collect::<Result<_>>()?;

    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = pts
        .iter()
        .map(|p| {
            let r = p.1 - (intercept + slope * p.0);
            r * r
        })
        .sum();
    let slope_se = if pts.len() > 2 {
        (rss / (m - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(RateEstimate {
        slope,
        intercept,
        slope_se,
        n_points: pts.len(),
    })
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

pub const RESULTS_HEADER: &str = "truth,k,ell,n,replicate,seed,lambda,mse,oracle_bound";

/// Results CSV with one row per cell. Floats are formatted with Rust's
/// shortest round-trip notation, so identical runs produce identical bytes.
pub fn write_results_csv(path: &Path, run: &ExperimentRun) -> Result<()> {
    let mut out = String::new();
    out.push_str(RESULTS_HEADER);
    out.push('\n');
    for r in &run.results {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            run.config.truth_name,
            run.config.penalty_order,
            run.true_order,
            r.n,
            r.replicate,
            r.seed,
            r.lambda,
            r.mse,
            r.oracle_bound
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parsed results file.
#[derive(Clone, Debug)]
pub struct LoadedResults {
    pub truth: String,
    pub k: usize,
    pub ell: usize,
    pub results: Vec<ReplicateResult>,
}

pub fn read_results_csv(path: &Path) -> Result<LoadedResults> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Malformed("empty results file".into()))?;
    if header != RESULTS_HEADER {
        return Err(Error::Malformed(format!(
            "unexpected header {header:?}; expected {RESULTS_HEADER:?}"
        )));
    }
    let mut truth = String::new();
    let mut k = 0usize;
    let mut ell = 0usize;
    let mut results = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::Malformed(format!(
                "line {}: expected 9 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let parse_err =
            |what: &str| Error::Malformed(format!("line {}: bad {what}", lineno + 2));
        truth = fields[0].to_string();
        k = fields[1].parse().map_err(|_| parse_err("k"))?;
        ell = fields[2].parse().map_err(|_| parse_err("ell"))?;
        results.push(ReplicateResult {
            n: fields[3].parse().map_err(|_| parse_err("n"))?,
            replicate: fields[4].parse().map_err(|_| parse_err("replicate"))?,
            seed: fields[5].parse().map_err(|_| parse_err("seed"))?,
            lambda: fields[6].parse().map_err(|_| parse_err("lambda"))?,
            mse: fields[7].parse().map_err(|_| parse_err("mse"))?,
            oracle_bound: fields[8].parse().map_err(|_| parse_err("oracle_bound"))?,
        });
    }
    Ok(LoadedResults {
        truth,
        k,
        ell,
        results,
    })
}

/// Run summary written next to the results CSV. Unlike the CSV this includes
/// wall time, so it is not byte-stable across runs.
#[derive(Serialize)]
struct RunSummary<'a> {
    config: &'a ExperimentConfig,
    true_order: usize,
    generator: &'static str,
    cells: usize,
    failures: usize,
    deterministic: bool,
    wall_time_secs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    rate: Option<RateEstimate>,
}

pub fn write_summary_json(path: &Path, run: &ExperimentRun) -> Result<()> {
    let summary = RunSummary {
        config: &run.config,
        true_order: run.true_order,
        generator: rng::GENERATOR_ID,
        cells: run.results.len() + run.failures,
        failures: run.failures,
        deterministic: run.config.sigma == 0.0,
        wall_time_secs: run.wall_secs,
        rate: estimate_rate(&run.results).ok(),
    };
    let mut file = std::fs::File::create(path)?;
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Malformed(format!("summary serialization failed: {e}")))?;
    file.write_all(text.as_bytes())?;
    file.write_all(b"\n")?;
    Ok(())
}
