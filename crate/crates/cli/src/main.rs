//! `tvrate`: trend filtering under misspecified total-variation order.
//!
//! Subcommands: `kernel` (construct and dump higher-order kernels),
//! `verify-lemmas` (bandwidth scaling checks), `solve` (single penalized
//! fit), `experiment` (seeded Monte Carlo run), `rates` (theoretical MSE
//! exponent table) and `plot` (replot a results file).
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or config error,
//! 3 numerical failure.

mod config;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tvrate_core::experiments::{
    self, estimate_rate, make_truth, read_results_csv, run_experiment, write_results_csv,
    write_summary_json, ExperimentConfig, ReplicateResult,
};
use tvrate_core::kernel::{construct_kernel, derivative_bound, kernel_moment};
use tvrate_core::oracle::{
    approx_error_sq, build_oracle, penalty_bound, theoretical_rate, OracleSpec, RateMethod,
};
use tvrate_core::pwpoly::PiecewisePolynomial;
use tvrate_core::solver::{solve, SolveOptions, TrendFilterProblem};
use tvrate_core::tv::tv_continuous;

#[derive(Parser)]
#[command(name = "tvrate", version, about = "Trend filtering with misspecified total-variation order", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Construct an order-k kernel and dump samples, moments, and plots.
    Kernel {
        /// Kernel order, 1..=8.
        #[arg(long)]
        k: usize,
        /// Bandwidth for the scaled kernel dump.
        #[arg(long, default_value_t = 1.0)]
        delta: f64,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Overlay a named truth and its convolution oracle (step3 | ramp3).
        #[arg(long)]
        truth: Option<String>,
    },
    /// Check the bandwidth scaling of approximation error and penalty.
    VerifyLemmas {
        /// step3-k2 | step3-k3 | ramp3-k3 | all.
        #[arg(long, default_value = "all")]
        scenario: String,
        /// Design points for the approximation-error norm.
        #[arg(long, default_value_t = 65536)]
        n: usize,
        /// Report file.
        #[arg(long, default_value = "lemma_report.txt")]
        out: PathBuf,
    },
    /// Solve one penalized least-squares instance.
    Solve {
        /// Single-column CSV of responses (optional "y" header).
        #[arg(long)]
        input: PathBuf,
        /// Penalty order.
        #[arg(long)]
        k: usize,
        /// Penalty weight λ.
        #[arg(long)]
        lambda: f64,
        /// Output CSV for the fitted values.
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value_t = 20000)]
        max_iter: usize,
    },
    /// Run a Monte Carlo experiment from a config file or preset.
    Experiment {
        /// Config file path (see README for the format).
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Built-in preset: step3-k2 | step3-k3 | ramp3-k3.
        #[arg(long)]
        preset: Option<String>,
        /// Base seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV path override.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the theoretical MSE exponent table.
    Rates {
        /// Largest penalty order to tabulate.
        #[arg(long, default_value_t = 6)]
        k_max: usize,
    },
    /// Re-plot an existing results CSV with its fitted rate.
    Plot {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum CliError {
    Usage(String),
    Verification(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Verification(_) => 1,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Verification(m) | CliError::Numerical(m) => m,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn numerical(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("TVRATE_THREADS") {
        let threads: usize = threads.trim().parse().unwrap_or(0);
        if threads > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global()
                .ok();
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Kernel {
            k,
            delta,
            out_dir,
            truth,
        } => cmd_kernel(k, delta, &out_dir, truth.as_deref()),
        Command::VerifyLemmas { scenario, n, out } => cmd_verify_lemmas(&scenario, n, &out),
        Command::Solve {
            input,
            k,
            lambda,
            output,
            tol,
            max_iter,
        } => cmd_solve(&input, k, lambda, &output, tol, max_iter),
        Command::Experiment {
            config,
            preset,
            seed,
            out,
        } => cmd_experiment(config.as_deref(), preset.as_deref(), seed, out.as_deref()),
        Command::Rates { k_max } => cmd_rates(k_max),
        Command::Plot { results, out } => cmd_plot(&results, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

// ---------------------------------------------------------------------------
// kernel
// ---------------------------------------------------------------------------

fn cmd_kernel(k: usize, delta: f64, out_dir: &Path, truth: Option<&str>) -> Result<(), CliError> {
    let kernel = construct_kernel(k).map_err(usage)?;
    let scaled = kernel.scaled(delta).map_err(usage)?;
    std::fs::create_dir_all(out_dir).map_err(usage)?;

    // sampled kernel values
    let mut csv = String::from("u,H(u)\n");
    for i in 0..=1000 {
        let u = -delta + 2.0 * delta * i as f64 / 1000.0;
        csv.push_str(&format!("{},{}\n", u, scaled.eval(u)));
    }
    std::fs::write(out_dir.join("kernel.csv"), csv).map_err(usage)?;

    // moment table, orders 0..k
    let mut moments = String::from("j,moment\n");
    println!("kernel order k = {k}, bandwidth = {delta}");
    println!("moments ∫ u^j H(u) du:");
    for j in 0..k {
        let m = kernel_moment(&kernel, j);
        moments.push_str(&format!("{j},{m}\n"));
        println!("  j = {j}: {m:.3e}");
    }
    std::fs::write(out_dir.join("moments.csv"), moments).map_err(usage)?;

    println!("sup |H^(l)| bounds:");
    for ell in 0..k {
        println!(
            "  l = {ell}: {:.6}",
            derivative_bound(&kernel, ell).map_err(usage)?
        );
    }
    println!("max |H| = {:.6}", derivative_bound(&kernel, 0).map_err(usage)?);
    println!("∫ |u|^k H(u) du = {:.6e}", kernel.kth_abs_moment());

    let mut plot = svg::LinePlot::new(
        &format!("Order-{k} kernel, bandwidth {delta}"),
        "u",
        "H(u)",
    );
    plot.series.push(svg::Series {
        label: format!("H_{k} scaled"),
        points: (0..=1000)
            .map(|i| {
                let u = -delta + 2.0 * delta * i as f64 / 1000.0;
                (u, scaled.eval(u))
            })
            .collect(),
        color: "#1f77b4",
        markers: false,
    });
    std::fs::write(out_dir.join("kernel.svg"), plot.render()).map_err(usage)?;

    if let Some(name) = truth {
        let (truth_fn, ell) = make_truth(name).map_err(usage)?;
        let spec = OracleSpec::new(truth_fn.clone(), ell, k, delta).map_err(usage)?;
        let oracle = build_oracle(&spec).map_err(numerical)?;
        let sample = |f: &PiecewisePolynomial| -> Vec<(f64, f64)> {
            (0..=1000)
                .map(|i| {
                    let x = i as f64 / 1000.0;
                    (x, f.eval_extended(x))
                })
                .collect()
        };
        let mut overlay = svg::LinePlot::new(
            &format!("{name} and its order-{k} convolution, bandwidth {delta}"),
            "x",
            "f(x)",
        );
        overlay.series.push(svg::Series {
            label: format!("truth {name}"),
            points: sample(&truth_fn),
            color: "#111111",
            markers: false,
        });
        overlay.series.push(svg::Series {
            label: "convolution oracle".to_string(),
            points: sample(&oracle),
            color: "#1f77b4",
            markers: false,
        });
        std::fs::write(out_dir.join("overlay.svg"), overlay.render()).map_err(usage)?;
        println!("wrote kernel.csv, moments.csv, kernel.svg, overlay.svg");
    } else {
        println!("wrote kernel.csv, moments.csv, kernel.svg");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// verify-lemmas
// ---------------------------------------------------------------------------

struct Scenario {
    name: &'static str,
    truth: &'static str,
    ell: usize,
    k: usize,
}

const SCENARIOS: [Scenario; 3] = [
    Scenario {
        name: "step3-k2",
        truth: "step3",
        ell: 1,
        k: 2,
    },
    Scenario {
        name: "step3-k3",
        truth: "step3",
        ell: 1,
        k: 3,
    },
    Scenario {
        name: "ramp3-k3",
        truth: "ramp3",
        ell: 2,
        k: 3,
    },
];

const DELTAS: [f64; 5] = [0.2, 0.1, 0.05, 0.025, 0.0125];
const APPROX_SLOPE_TOL: f64 = 0.15;
const PENALTY_SLOPE_TOL: f64 = 0.05;

fn ols_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

fn cmd_verify_lemmas(scenario: &str, n: usize, out: &Path) -> Result<(), CliError> {
    let chosen: Vec<&Scenario> = if scenario == "all" {
        SCENARIOS.iter().collect()
    } else {
        let found = SCENARIOS.iter().find(|s| s.name == scenario);
        vec![found.ok_or_else(|| {
            usage(format!(
                "unknown scenario {scenario:?} (expected step3-k2, step3-k3, ramp3-k3, or all)"
            ))
        })?]
    };

    let mut report = String::new();
    let mut all_pass = true;
    for sc in chosen {
        let (truth, _) = make_truth(sc.truth).map_err(usage)?;
        let mut approx_pts = Vec::new();
        let mut penalty_pts = Vec::new();
        let mut bound_ok = true;
        let mut max_ratio = 0.0f64;
        for &delta in &DELTAS {
            let spec =
                OracleSpec::new(truth.clone(), sc.ell, sc.k, delta).map_err(numerical)?;
            let oracle = build_oracle(&spec).map_err(numerical)?;
            let err = approx_error_sq(&truth, &oracle, n);
            let pk = tv_continuous(&oracle, sc.k).total;
            let bound = penalty_bound(&spec).map_err(numerical)?;
            let ratio = pk / bound;
            max_ratio = max_ratio.max(ratio);
            if pk > bound * (1.0 + 1e-9) {
                bound_ok = false;
            }
            approx_pts.push((delta.ln(), err.ln()));
            penalty_pts.push((delta.ln(), pk.ln()));
        }
        let approx_slope = ols_slope(&approx_pts);
        let penalty_slope = ols_slope(&penalty_pts);
        let approx_target = (2 * sc.ell - 1) as f64;
        let penalty_target = -((sc.k - sc.ell) as f64);
        let approx_pass = (approx_slope - approx_target).abs() <= APPROX_SLOPE_TOL;
        let penalty_pass = (penalty_slope - penalty_target).abs() <= PENALTY_SLOPE_TOL;
        all_pass &= approx_pass && penalty_pass && bound_ok;

        for line in [
            format!(
                "scenario={} approx_slope={:.4} target={:.1} tol={} {}",
                sc.name,
                approx_slope,
                approx_target,
                APPROX_SLOPE_TOL,
                if approx_pass { "PASS" } else { "FAIL" }
            ),
            format!(
                "scenario={} penalty_slope={:.4} target={:.1} tol={} {}",
                sc.name,
                penalty_slope,
                penalty_target,
                PENALTY_SLOPE_TOL,
                if penalty_pass { "PASS" } else { "FAIL" }
            ),
            format!(
                "scenario={} penalty_within_bound max_ratio={:.4} {}",
                sc.name,
                max_ratio,
                if bound_ok { "PASS" } else { "FAIL" }
            ),
        ] {
            println!("{line}");
            report.push_str(&line);
            report.push('\n');
        }
    }
    std::fs::write(out, report).map_err(usage)?;
    if all_pass {
        Ok(())
    } else {
        Err(CliError::Verification(
            "one or more scaling checks failed".into(),
        ))
    }
}

// ---------------------------------------------------------------------------
// solve
// ---------------------------------------------------------------------------

fn read_column(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let mut values = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (idx == 0 && line.parse::<f64>().is_err()) {
            continue; // skip a header row
        }
        values.push(
            line.parse::<f64>()
                .map_err(|_| usage(format!("line {}: bad number {line:?}", idx + 1)))?,
        );
    }
    Ok(values)
}

fn cmd_solve(
    input: &Path,
    k: usize,
    lambda: f64,
    output: &Path,
    tol: f64,
    max_iter: usize,
) -> Result<(), CliError> {
    let y = read_column(input)?;
    let problem = TrendFilterProblem::new(y, k, lambda).map_err(usage)?;
    let opts = SolveOptions {
        tol,
        max_iter,
        ..Default::default()
    };
    let fit = solve(&problem, &opts).map_err(numerical)?;
    if !fit.converged(tol) {
        return Err(CliError::Numerical(format!(
            "solver did not converge: kkt gap {:.3e} after {} iterations",
            fit.kkt_gap, fit.iterations
        )));
    }
    let mut out = String::from("theta\n");
    for t in &fit.theta {
        out.push_str(&format!("{t}\n"));
    }
    std::fs::write(output, out).map_err(usage)?;
    eprintln!(
        "objective {:.6e}, {} iterations, kkt gap {:.3e}",
        fit.objective, fit.iterations, fit.kkt_gap
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// experiment
// ---------------------------------------------------------------------------

fn preset_config(name: &str, seed: u64) -> Result<ExperimentConfig, CliError> {
    let (truth, k) = match name {
        "step3-k2" => ("step3", 2),
        "step3-k3" => ("step3", 3),
        "ramp3-k3" => ("ramp3", 3),
        other => {
            return Err(usage(format!(
                "unknown preset {other:?} (expected step3-k2, step3-k3, ramp3-k3)"
            )))
        }
    };
    let mut config = ExperimentConfig::desk_scale(truth, k, seed);
    config.output_path = format!("{name}-results.csv");
    Ok(config)
}

fn results_plot(
    title: &str,
    results: &[ReplicateResult],
    rate: &experiments::RateEstimate,
) -> svg::LinePlot {
    let mut by_n: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for r in results {
        let e = by_n.entry(r.n).or_insert((0.0, 0));
        e.0 += r.mse;
        e.1 += 1;
    }
    let means: Vec<(f64, f64)> = by_n
        .iter()
        .map(|(&n, &(s, c))| (n as f64, s / c as f64))
        .collect();
    let fit_line: Vec<(f64, f64)> = means
        .iter()
        .map(|&(n, _)| (n, (rate.intercept + rate.slope * n.ln()).exp()))
        .collect();
    let mut plot = svg::LinePlot::new(title, "n", "MSE");
    plot.log_x = true;
    plot.log_y = true;
    plot.series.push(svg::Series {
        label: "replicates".into(),
        points: results.iter().map(|r| (r.n as f64, r.mse)).collect(),
        color: "#bbbbbb",
        markers: true,
    });
    plot.series.push(svg::Series {
        label: "mean MSE".into(),
        points: means,
        color: "#d62728",
        markers: true,
    });
    plot.series.push(svg::Series {
        label: format!("fit slope {:.3}", rate.slope),
        points: fit_line,
        color: "#1f77b4",
        markers: false,
    });
    plot.annotations
        .push(format!("slope = {:.3} (se {:.3})", rate.slope, rate.slope_se));
    plot
}

fn cmd_experiment(
    config_path: Option<&Path>,
    preset: Option<&str>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let mut config = match (config_path, preset) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            config::parse(&text).map_err(usage)?
        }
        (None, Some(name)) => preset_config(name, seed.unwrap_or(20260808))?,
        (None, None) => return Err(usage("provide --config or --preset")),
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };
    if let Some(seed) = seed {
        config.base_seed = seed;
    }
    if let Some(out) = out {
        config.output_path = out.display().to_string();
    }
    if config.output_path.is_empty() {
        config.output_path = "results.csv".into();
    }

    let run = run_experiment(&config).map_err(numerical)?;
    let csv_path = PathBuf::from(&config.output_path);
    if let Some(parent) = csv_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(usage)?;
        }
    }
    write_results_csv(&csv_path, &run).map_err(usage)?;
    let summary_path = csv_path.with_extension("summary.json");
    write_summary_json(&summary_path, &run).map_err(usage)?;

    println!(
        "{} cells ({} failures) in {:.1}s",
        run.results.len(),
        run.failures,
        run.wall_secs
    );
    let rate = estimate_rate(&run.results).map_err(numerical)?;
    let flag = if config.sigma == 0.0 {
        " [deterministic]"
    } else {
        ""
    };
    println!(
        "estimated rate: slope {:.3} (se {:.3}) over {} sample sizes{flag}",
        rate.slope, rate.slope_se, rate.n_points
    );
    let title = format!(
        "{} with P_{} penalty: MSE vs n",
        config.truth_name, config.penalty_order
    );
    let plot = results_plot(&title, &run.results, &rate);
    let svg_path = csv_path.with_extension("svg");
    std::fs::write(&svg_path, plot.render()).map_err(usage)?;
    println!(
        "wrote {}, {}, {}",
        csv_path.display(),
        summary_path.display(),
        svg_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// rates
// ---------------------------------------------------------------------------

fn cmd_rates(k_max: usize) -> Result<(), CliError> {
    if k_max < 2 || k_max > 8 {
        return Err(usage("k_max must be in 2..=8"));
    }
    println!("MSE exponents (mean squared error ~ n^e); penalty order k, truth order l");
    println!("{:>3} {:>3} {:>13} {:>13} {:>13}  note", "k", "l", "correct(k)", "prior", "kernel-oracle");
    for k in 2..=k_max {
        for ell in 1..k {
            let correct = theoretical_rate(RateMethod::CorrectSpec, k, k)
                .map_err(numerical)?
                .exponent;
            let prior = theoretical_rate(RateMethod::Simon2021, k, ell)
                .map_err(numerical)?
                .exponent;
            let ours = theoretical_rate(RateMethod::ThisPaper, k, ell)
                .map_err(numerical)?
                .exponent;
            let note = if ours < prior - 1e-12 {
                "improved"
            } else {
                "matches"
            };
            println!("{k:>3} {ell:>3} {correct:>13.3} {prior:>13.3} {ours:>13.3}  {note}");
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// plot
// ---------------------------------------------------------------------------

fn cmd_plot(results: &Path, out: &Path) -> Result<(), CliError> {
    let loaded = read_results_csv(results)
        .map_err(|e| usage(format!("cannot read {}: {e}", results.display())))?;
    let rate = estimate_rate(&loaded.results).map_err(numerical)?;
    let title = format!(
        "{} with P_{} penalty: MSE vs n",
        loaded.truth, loaded.k
    );
    let plot = results_plot(&title, &loaded.results, &rate);
    std::fs::write(out, plot.render()).map_err(usage)?;
    println!(
        "slope {:.3} (se {:.3}); wrote {}",
        rate.slope,
        rate.slope_se,
        out.display()
    );
    Ok(())
}
