//! Flat `key = value` experiment config files with `[section]` headers.
//!
//! ```text
//! [experiment]
//! truth = ramp3
//! k = 3
//! n_grid = 256,512,1024,2048,4096,8192
//! replicates = 40
//! sigma = 1.0
//! base_seed = 20260808
//! lambda_grid = schedule        # or a comma-separated list of values
//! lambda_points = 30
//! lambda_span = 100
//! output = results.csv
//!
//! [solver]
//! tol = 3e-5
//! max_iter = 20000
//! ```
//!
//! Custom truths add `custom_ell`, `custom_base` (comma-separated ascending
//! coefficients) and `custom_terms` (`knot:degree:weight` separated by `;`)
//! under `[experiment]`.

use tvrate_core::experiments::{CustomTruth, ExperimentConfig, LambdaGrid};

#[derive(Debug)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config line {}: {}", self.line, self.message)
    }
}

fn err(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        message: message.into(),
    }
}

pub fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut section = String::new();
    let mut truth = None;
    let mut k = None;
    let mut n_grid = None;
    let mut replicates = 40usize;
    let mut sigma = 1.0f64;
    let mut base_seed = 0u64;
    let mut lambda_mode = "schedule".to_string();
    let mut lambda_points = 30usize;
    let mut lambda_span = 100.0f64;
    let mut output = String::from("results.csv");
    let mut tol = 3e-5f64;
    let mut max_iter = 20_000usize;
    let mut custom_ell = None;
    let mut custom_base: Vec<f64> = Vec::new();
    let mut custom_terms: Vec<(f64, usize, f64)> = Vec::new();
    let mut lambda_mode_line = 0usize;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            if !line.ends_with(']') {
                return Err(err(lineno, "unterminated section header"));
            }
            section = line[1..line.len() - 1].trim().to_string();
            if section != "experiment" && section != "solver" {
                return Err(err(lineno, format!("unknown section [{section}]")));
            }
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(lineno, "expected key = value"))?;
        let key = key.trim();
        let value = value.trim();
        let parse_f64 = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| err(lineno, format!("bad number {v:?} for {key}")))
        };
        let parse_usize = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| err(lineno, format!("bad integer {v:?} for {key}")))
        };
        match (section.as_str(), key) {
            ("experiment", "truth") => truth = Some(value.to_string()),
            ("experiment", "k") => k = Some(parse_usize(value)?),
            ("experiment", "n_grid") => {
                let grid: Result<Vec<usize>, _> =
                    value.split(',').map(|v| parse_usize(v.trim())).collect();
                n_grid = Some(grid?);
            }
            ("experiment", "replicates") => replicates = parse_usize(value)?,
            ("experiment", "sigma") => sigma = parse_f64(value)?,
            ("experiment", "base_seed") => {
                base_seed = value
                    .parse::<u64>()
                    .map_err(|_| err(lineno, format!("bad seed {value:?}")))?;
            }
            ("experiment", "lambda_grid") => {
                lambda_mode = value.to_string();
                lambda_mode_line = lineno;
            }
            ("experiment", "lambda_points") => lambda_points = parse_usize(value)?,
            ("experiment", "lambda_span") => lambda_span = parse_f64(value)?,
            ("experiment", "output") => output = value.to_string(),
            ("experiment", "custom_ell") => custom_ell = Some(parse_usize(value)?),
            ("experiment", "custom_base") => {
                let coeffs: Result<Vec<f64>, _> =
                    value.split(',').map(|v| parse_f64(v.trim())).collect();
                custom_base = coeffs?;
            }
            ("experiment", "custom_terms") => {
                for term in value.split(';') {
                    let parts: Vec<&str> = term.trim().split(':').collect();
                    if parts.len() != 3 {
                        return Err(err(lineno, "custom term must be knot:degree:weight"));
                    }
                    custom_terms.push((
                        parse_f64(parts[0])?,
                        parse_usize(parts[1])?,
                        parse_f64(parts[2])?,
                    ));
                }
            }
            ("solver", "tol") => tol = parse_f64(value)?,
            ("solver", "max_iter") => max_iter = parse_usize(value)?,
            _ => return Err(err(lineno, format!("unknown key {key:?} in [{section}]"))),
        }
    }

    let truth_name = truth.ok_or_else(|| err(0, "missing truth under [experiment]"))?;
    let penalty_order = k.ok_or_else(|| err(0, "missing k under [experiment]"))?;
    let lambda_grid = if lambda_mode == "schedule" {
        LambdaGrid::Schedule {
            points: lambda_points,
            span: lambda_span,
        }
    } else {
        let values: Result<Vec<f64>, _> = lambda_mode
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| err(lambda_mode_line, format!("bad λ value {v:?}")))
            })
            .collect();
        LambdaGrid::Explicit { values: values? }
    };
    let custom = if truth_name == "custom" {
        Some(CustomTruth {
            true_order: custom_ell.ok_or_else(|| err(0, "custom truth requires custom_ell"))?,
            base: custom_base,
            terms: custom_terms,
        })
    } else {
        None
    };

    let config = ExperimentConfig {
        truth_name,
        custom,
        penalty_order,
        n_grid: n_grid.unwrap_or_else(|| vec![256, 512, 1024, 2048, 4096, 8192]),
        replicates,
        sigma,
        base_seed,
        lambda_grid,
        output_path: output,
        solver_tol: tol,
        solver_max_iter: max_iter,
    };
    config
        .validate()
        .map_err(|e| err(0, format!("invalid config: {e}")))?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_config() {
        let text = "\n[experiment]\ntruth = step3\nk = 2\nn_grid = 32, 64, 128\nreplicates = 3\nbase_seed = 5\n";
        let config = parse(text).unwrap();
        assert_eq!(config.truth_name, "step3");
        assert_eq!(config.penalty_order, 2);
        assert_eq!(config.n_grid, vec![32, 64, 128]);
        assert!(matches!(config.lambda_grid, LambdaGrid::Schedule { .. }));
    }

    #[test]
    fn reports_line_numbers() {
        let text = "[experiment]\ntruth = step3\nk = two\n";
        let e = parse(text).unwrap_err();
        assert_eq!(e.line, 3);
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = "[experiment]\ntruth = step3\nk = 2\nbogus = 1\n";
        assert!(parse(text).is_err());
        let text = "[mystery]\n";
        assert!(parse(text).is_err());
    }

    #[test]
    fn explicit_lambda_grid() {
        let text =
            "[experiment]\ntruth = ramp3\nk = 3\nn_grid = 32,64,128\nlambda_grid = 0.1, 0.01\n";
        let config = parse(text).unwrap();
        match config.lambda_grid {
            LambdaGrid::Explicit { values } => assert_eq!(values, vec![0.1, 0.01]),
            _ => panic!("expected explicit grid"),
        }
    }

    #[test]
    fn custom_truth_terms() {
        let text = "[experiment]\ntruth = custom\nk = 3\nn_grid = 32,64,128\ncustom_ell = 2\ncustom_base = 0,1\ncustom_terms = 0.3:1:2.0; 0.7:1:-1.0\n";
        let config = parse(text).unwrap();
        let custom = config.custom.clone().unwrap();
        assert_eq!(custom.true_order, 2);
        assert_eq!(custom.terms.len(), 2);
        config.validate().unwrap();
    }
}
