use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tvrate"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn tvrate")
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(tag);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    for sub in ["kernel", "verify-lemmas", "solve", "experiment", "rates", "plot"] {
        let out = run(&[sub, "--help"]);
        assert!(out.status.success(), "{sub} --help failed");
        let text = stdout(&out);
        assert!(text.contains("Usage"), "{sub} help has no usage section");
    }
    assert!(run(&["--help"]).status.success());
}

#[test]
fn unknown_flags_are_rejected() {
    let out = run(&["rates", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn rates_table_shows_the_headline_numbers() {
    let out = run(&["rates", "--k-max", "3"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("-0.750"), "missing prior rate: {text}");
    assert!(text.contains("-0.783"), "missing improved rate: {text}");
    assert!(text.contains("-0.571"), "missing order-one rate: {text}");
    assert!(text.contains("improved"));
    assert!(text.contains("matches"));

    assert_eq!(run(&["rates", "--k-max", "9"]).status.code(), Some(2));
}

#[test]
fn kernel_writes_samples_moments_and_svg() {
    let dir = tmp_dir("kernel-k2");
    let out = run(&[
        "kernel",
        "--k",
        "2",
        "--delta",
        "0.1",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("0.9375"), "missing sup bound: {text}");

    let moments = std::fs::read_to_string(dir.join("moments.csv")).unwrap();
    let mut lines = moments.lines();
    assert_eq!(lines.next(), Some("j,moment"));
    let row0 = lines.next().unwrap();
    assert!(row0.starts_with("0,"));
    let mass: f64 = row0[2..].parse().unwrap();
    assert!((mass - 1.0).abs() < 1e-10);

    let csv = std::fs::read_to_string(dir.join("kernel.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1002); // header + 1001 samples
    assert_eq!(csv.lines().next(), Some("u,H(u)"));

    check_svg(&dir.join("kernel.svg"));
}

#[test]
fn kernel_overlay_and_idempotency() {
    let dir = tmp_dir("kernel-k3");
    let args = [
        "kernel",
        "--k",
        "3",
        "--delta",
        "0.1",
        "--truth",
        "step3",
        "--out-dir",
        dir.to_str().unwrap(),
    ];
    assert!(run(&args).status.success());
    let first = std::fs::read(dir.join("overlay.svg")).unwrap();
    assert!(run(&args).status.success());
    let second = std::fs::read(dir.join("overlay.svg")).unwrap();
    assert_eq!(first, second, "kernel outputs are not idempotent");
    check_svg(&dir.join("overlay.svg"));

    // k = 0 is a usage error
    let out = run(&["kernel", "--k", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn solve_round_trips_csv() {
    let dir = tmp_dir("solve");
    let input = dir.join("y.csv");
    let output = dir.join("theta.csv");
    let y: Vec<f64> = (0..24).map(|i| (i as f64 * 0.7).sin()).collect();
    let mut text = String::from("y\n");
    for v in &y {
        text.push_str(&format!("{v}\n"));
    }
    std::fs::write(&input, text).unwrap();

    let out = run(&[
        "solve",
        "--input",
        input.to_str().unwrap(),
        "--k",
        "1",
        "--lambda",
        "0",
        "--output",
        output.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let fitted = std::fs::read_to_string(&output).unwrap();
    let mut lines = fitted.lines();
    assert_eq!(lines.next(), Some("theta"));
    for (line, want) in lines.zip(&y) {
        let got: f64 = line.parse().unwrap();
        assert_eq!(got, *want, "λ = 0 must return the data");
    }

    // missing input is a usage error
    let out = run(&[
        "solve",
        "--input",
        dir.join("nope.csv").to_str().unwrap(),
        "--k",
        "1",
        "--lambda",
        "0.1",
        "--output",
        output.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn experiment_runs_config_deterministically() {
    let dir = tmp_dir("experiment");
    let csv_a = dir.join("a.csv");
    let csv_b = dir.join("b.csv");
    let config = format!(
        "[experiment]\n\
         truth = step3\n\
         k = 2\n\
         n_grid = 32,64,128\n\
         replicates = 2\n\
         sigma = 0.5\n\
         base_seed = 42\n\
         lambda_points = 8\n\
         output = {}\n\
         [solver]\n\
         tol = 1e-6\n",
        csv_a.display()
    );
    let config_path = dir.join("run.conf");
    std::fs::write(&config_path, &config).unwrap();

    let out = run(&["experiment", "--config", config_path.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout(&out).contains("estimated rate"));

    // byte-identical rerun
    let out2 = run(&[
        "experiment",
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        csv_b.to_str().unwrap(),
    ]);
    assert!(out2.status.success());
    let a = std::fs::read(&csv_a).unwrap();
    let b = std::fs::read(&csv_b).unwrap();
    assert_eq!(a, b, "experiment CSVs are not reproducible");

    // artifacts exist and the SVG is self-contained
    assert!(dir.join("a.summary.json").exists());
    check_svg(&dir.join("a.svg"));
    let summary = std::fs::read_to_string(dir.join("a.summary.json")).unwrap();
    assert!(summary.contains("splitmix64-boxmuller-v1"));

    // plot from the results file
    let plot_path = dir.join("replot.svg");
    let out = run(&[
        "plot",
        "--results",
        csv_a.to_str().unwrap(),
        "--out",
        plot_path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    check_svg(&plot_path);
}

#[test]
fn experiment_usage_errors() {
    let out = run(&["experiment", "--config", "/definitely/not/here.conf"]);
    assert_eq!(out.status.code(), Some(2));

    let dir = tmp_dir("experiment-bad");
    let config_path = dir.join("bad.conf");
    std::fs::write(&config_path, "[experiment]\ntruth = step3\nk = nope\n").unwrap();
    let out = run(&["experiment", "--config", config_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    let out = run(&["experiment", "--preset", "unknown-preset"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["experiment"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_lemmas_small_grid_passes() {
    let dir = tmp_dir("lemmas");
    let report = dir.join("report.txt");
    let out = run(&[
        "verify-lemmas",
        "--scenario",
        "step3-k2",
        "--n",
        "16384",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("approx_slope"));
    assert!(text.contains("PASS"));
    assert!(!text.contains("FAIL"));

    let out = run(&["verify-lemmas", "--scenario", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
}

fn check_svg(path: &Path) {
    let bytes = std::fs::read(path).unwrap();
    assert!(bytes.len() < 1_000_000, "{} exceeds 1 MB", path.display());
    let text = String::from_utf8(bytes).unwrap();
    assert!(text.starts_with("<svg"), "{} is not an svg", path.display());
    assert!(text.trim_end().ends_with("</svg>"));
    // self-contained: no external references
    assert!(!text.contains("http://") || text.contains("xmlns=\"http://www.w3.org/2000/svg\""));
    assert!(!text.contains("href"));
    assert!(!text.contains("@import"));
}
