//! Convolution oracles, bandwidth/penalty schedules, and rate formulas.
//!
//! An order-ℓ truth convolved with an order-k kernel at bandwidth δ yields an
//! approximant with finite kth-order variation that coincides with the truth
//! away from its knots. Shrinking δ trades approximation error
//! (`O(δ^{2ℓ-1})` in squared empirical norm) against penalty growth
//! (`O(δ^{-(k-ℓ)})`); the schedules below balance the two, which is what
//! produces the `n^{-2k(2ℓ-1)/(4kℓ-1)}` MSE exponent.

use crate::error::{Error, Result};
use crate::kernel::{construct_kernel, convolve, derivative_bound};
use crate::pwpoly::PiecewisePolynomial;
use crate::tv::tv_continuous;

/// A truth of order ℓ paired with a penalty order k and bandwidth δ.
#[derive(Clone, Debug)]
pub struct OracleSpec {
    truth: PiecewisePolynomial,
    true_order: usize,
    penalty_order: usize,
    bandwidth: f64,
}

impl OracleSpec {
    /// Requires ℓ >= 1, finite `P_ℓ(truth)`, and positive bandwidth. The
    /// misspecified regime additionally needs `k > ℓ`, enforced by the
    /// operations that rely on it.
    pub fn new(
        truth: PiecewisePolynomial,
        true_order: usize,
        penalty_order: usize,
        bandwidth: f64,
    ) -> Result<Self> {
        if true_order < 1 {
            return Err(Error::param("true order must be at least 1"));
        }
        if penalty_order < 1 || penalty_order > 8 {
            return Err(Error::param("penalty order must be in 1..=8"));
        }
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::param(format!("bad bandwidth {bandwidth}")));
        }
        if !tv_continuous(&truth, true_order).is_finite() {
            return Err(Error::param(format!(
                "truth has infinite order-{true_order} total variation"
            )));
        }
        Ok(OracleSpec {
            truth,
            true_order,
            penalty_order,
            bandwidth,
        })
    }

    pub fn truth(&self) -> &PiecewisePolynomial {
        &self.truth
    }

    pub fn true_order(&self) -> usize {
        self.true_order
    }

    pub fn penalty_order(&self) -> usize {
        self.penalty_order
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }
}

/// Which rate formula to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RateMethod {
    /// Correctly specified smoothness (`k <= ℓ`): `n^{-2k/(2k+1)}`.
    CorrectSpec,
    /// Prior misspecified-smoothness rate: `n^{-2k/(4k-1)}` at ℓ = 1 and
    /// `n^{-2k/(3k-ℓ+1)}` for ℓ > 1.
    Simon2021,
    /// Convolution-oracle rate: `n^{-2k(2ℓ-1)/(4kℓ-1)}`.
    ThisPaper,
}

impl RateMethod {
    pub fn label(&self) -> &'static str {
        match self {
            RateMethod::CorrectSpec => "correct_spec",
            RateMethod::Simon2021 => "simon2021",
            RateMethod::ThisPaper => "this_paper",
        }
    }
}

/// MSE exponent: mean squared error decays like `n^exponent`.
#[derive(Clone, Copy, Debug)]
pub struct RateFormulaResult {
    pub method: RateMethod,
    pub exponent: f64,
}

/// Build the convolution oracle `truth ⋆ H_{k,δ}`.
pub fn build_oracle(spec: &OracleSpec) -> Result<PiecewisePolynomial> {
    let kernel = construct_kernel(spec.penalty_order)?;
    let scaled = kernel.scaled(spec.bandwidth)?;
    Ok(convolve(&spec.truth, &scaled))
}

/// Squared empirical distance `n^{-1} Σ_i (truth(x_i) - oracle(x_i))^2` on
/// the design grid `x_i = lo + (i/n)(hi - lo)`, i = 1..n.
pub fn approx_error_sq(
    truth: &PiecewisePolynomial,
    oracle: &PiecewisePolynomial,
    n: usize,
) -> f64 {
    assert!(n >= 1, "need at least one design point");
    assert!(
        truth.domain() == oracle.domain(),
        "truth and oracle must share a domain"
    );
    let (lo, len) = (truth.domain().lo(), truth.domain().len());
    let mut acc = 0.0;
    for i in 1..=n {
        let x = lo + len * (i as f64 / n as f64);
        let d = truth.eval_extended(x) - oracle.eval_extended(x);
        acc += d * d;
    }
    acc / n as f64
}

/// Analytic bound `2 C_{k,k-ℓ} P_ℓ(truth) / δ^{k-ℓ}` on the penalty of the
/// oracle. Infinite when `P_ℓ(truth)` is infinite.
pub fn penalty_bound(spec: &OracleSpec) -> Result<f64> {
    let (k, ell) = (spec.penalty_order, spec.true_order);
    if k <= ell {
        return Err(Error::param(format!(
            "penalty bound needs k > ℓ, got k = {k}, ℓ = {ell}"
        )));
    }
    let kernel = construct_kernel(k)?;
    let c = derivative_bound(&kernel, k - ell)?;
    let p_ell = tv_continuous(&spec.truth, ell).total;
    Ok(2.0 * c * p_ell / spec.bandwidth.powi((k - ell) as i32))
}

/// Bandwidth schedule `δ(n) = n^{-2k/(4kℓ-1)}` balancing approximation error
/// against the penalty term.
pub fn delta_schedule(n: usize, k: usize, ell: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::param(format!("need n >= 2, got {n}")));
    }
    if ell < 1 || k <= ell {
        return Err(Error::param(format!(
            "schedule needs k > ℓ >= 1, got k = {k}, ℓ = {ell}"
        )));
    }
    let expo = -2.0 * k as f64 / (4.0 * k as f64 * ell as f64 - 1.0);
    Ok((n as f64).powf(expo))
}

/// Penalty weight schedule
/// `λ_n = n^{-2k(k+ℓ-1)/(4kℓ-1)} (C P_ℓ)^{(1/k - 2)/(1/k + 2)}`.
pub fn lambda_schedule(n: usize, k: usize, ell: usize, p_ell: f64, c: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::param(format!("need n >= 2, got {n}")));
    }
    if ell < 1 || k <= ell {
        return Err(Error::param(format!(
            "schedule needs k > ℓ >= 1, got k = {k}, ℓ = {ell}"
        )));
    }
    if !(p_ell > 0.0) || !(c > 0.0) {
        return Err(Error::param(format!(
            "P_ℓ and C must be positive, got {p_ell} and {c}"
        )));
    }
    let (kf, lf) = (k as f64, ell as f64);
    let n_expo = -2.0 * kf * (kf + lf - 1.0) / (4.0 * kf * lf - 1.0);
    let inv_k = 1.0 / kf;
    let p_expo = (inv_k - 2.0) / (inv_k + 2.0);
    Ok((n as f64).powf(n_expo) * (c * p_ell).powf(p_expo))
}

/// Theoretical MSE exponent for the given method and smoothness pair.
pub fn theoretical_rate(method: RateMethod, k: usize, ell: usize) -> Result<RateFormulaResult> {
    if k < 1 || ell < 1 {
        return Err(Error::param("orders must be at least 1"));
    }
    let (kf, lf) = (k as f64, ell as f64);
    let exponent = match method {
        RateMethod::CorrectSpec => {
            if k > ell {
                return Err(Error::param(format!(
                    "correct specification needs k <= ℓ, got k = {k}, ℓ = {ell}"
                )));
            }
            -2.0 * kf / (2.0 * kf + 1.0)
        }
        RateMethod::Simon2021 => {
            if k <= ell {
                return Err(Error::param(format!(
                    "misspecified rate needs k > ℓ, got k = {k}, ℓ = {ell}"
                )));
            }
            if ell == 1 {
                -2.0 * kf / (4.0 * kf - 1.0)
            } else {
                -2.0 * kf / (3.0 * kf - lf + 1.0)
            }
        }
        RateMethod::ThisPaper => {
            if k <= ell {
                return Err(Error::param(format!(
                    "misspecified rate needs k > ℓ, got k = {k}, ℓ = {ell}"
                )));
            }
            -2.0 * kf * (2.0 * lf - 1.0) / (4.0 * kf * lf - 1.0)
        }
    };
    Ok(RateFormulaResult { method, exponent })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pwpoly::{Interval, Polynomial, TruncatedPowerTerm};

    fn step3() -> PiecewisePolynomial {
        PiecewisePolynomial::from_truncated_powers(
            Interval::unit(),
            &Polynomial::zero(),
            &[TruncatedPowerTerm::new(0.5, 0, 3.0)],
        )
        .unwrap()
    }

    fn ramp3() -> PiecewisePolynomial {
        PiecewisePolynomial::from_truncated_powers(
            Interval::unit(),
            &Polynomial::zero(),
            &[TruncatedPowerTerm::new(0.5, 1, 3.0)],
        )
        .unwrap()
    }

    #[test]
    fn oracle_of_step_is_smooth_sigmoid() {
        let spec = OracleSpec::new(step3(), 1, 2, 0.1).unwrap();
        let oracle = build_oracle(&spec).unwrap();
        assert!(oracle.evaluate(0.39).unwrap().abs() < 1e-12);
        assert!((oracle.evaluate(0.61).unwrap() - 3.0).abs() < 1e-12);
        let mid = oracle.evaluate(0.5).unwrap();
        assert!((mid - 1.5).abs() < 1e-12);
        // lives in F_2
        let tv = tv_continuous(&oracle, 2);
        assert!(tv.is_finite());
        assert!(tv.total > 0.0);
    }

    #[test]
    fn oracle_of_linear_truth_is_identity() {
        let truth = PiecewisePolynomial::from_polynomial(
            Interval::unit(),
            &Polynomial::new(vec![0.25, 2.0]),
        );
        let spec = OracleSpec::new(truth.clone(), 1, 2, 0.15).unwrap();
        let oracle = build_oracle(&spec).unwrap();
        for i in 0..=100 {
            let x = i as f64 / 100.0;
            let err = (oracle.evaluate(x).unwrap() - truth.evaluate(x).unwrap()).abs();
            assert!(err < 1e-12)
        }
    }

    #[test]
    fn ramp_oracle_has_finite_third_order_variation() {
        let spec = OracleSpec::new(ramp3(), 2, 3, 0.05).unwrap();
        let oracle = build_oracle(&spec).unwrap();
        let tv = tv_continuous(&oracle, 3);
        assert!(tv.is_finite());
        assert!(tv.total > 0.0);
    }

    #[test]
    fn oracle_spec_rejects_rough_truth() {
        // a step has no finite second-order variation
        assert!(OracleSpec::new(step3(), 2, 3, 0.1).is_err());
        assert!(OracleSpec::new(ramp3(), 2, 3, 0.0).is_err());
        assert!(OracleSpec::new(ramp3(), 0, 3, 0.1).is_err());
    }

    #[test]
    fn approx_error_zero_for_identical_functions() {
        let f = ramp3();
        assert_eq!(approx_error_sq(&f, &f.clone(), 500), 0.0);
    }

    #[test]
    fn approx_error_bounded_by_window_mass() {
        // error is supported on |x - 0.5| <= δ and bounded by the step height
        let delta = 0.1;
        let spec = OracleSpec::new(step3(), 1, 2, delta).unwrap();
        let oracle = build_oracle(&spec).unwrap();
        let n = 10_000;
        let err = approx_error_sq(&step3(), &oracle, n);
        let bound = 9.0 * (2.0 * delta + 2.0 / n as f64);
        assert!(err > 0.0);
        assert!(err <= bound, "err={err} bound={bound}");
    }

    #[test]
    fn penalty_bound_plugs_in() {
        // k=3, ℓ=2, ramp truth (P₂ = 3), δ = 0.1: bound = 60 C_{3,1}
        let spec = OracleSpec::new(ramp3(), 2, 3, 0.1).unwrap();
        let got = penalty_bound(&spec).unwrap();
        let kernel = construct_kernel(3).unwrap();
        let c31 = derivative_bound(&kernel, 1).unwrap();
        assert!((got - 60.0 * c31).abs() < 1e-9 * got);

        // halving δ multiplies the bound by 2^{k-ℓ}
        let half = OracleSpec::new(ramp3(), 2, 3, 0.05).unwrap();
        let got_half = penalty_bound(&half).unwrap();
        assert!((got_half / got - 2.0).abs() < 1e-12);

        // k = ℓ is rejected
        assert!(penalty_bound(&OracleSpec::new(ramp3(), 2, 2, 0.1).unwrap()).is_err());
    }

    #[test]
    fn measured_penalty_respects_bound() {
        for (truth, ell, k) in [(step3(), 1usize, 2usize), (ramp3(), 2, 3), (step3(), 1, 3)] {
            for delta in [0.2, 0.1, 0.05] {
                let spec = OracleSpec::new(truth.clone(), ell, k, delta).unwrap();
                let oracle = build_oracle(&spec).unwrap();
                let measured = tv_continuous(&oracle, k).total;
                let bound = penalty_bound(&spec).unwrap();
                assert!(
                    measured <= bound * (1.0 + 1e-9),
                    "ℓ={ell} k={k} δ={delta}: measured {measured} > bound {bound}"
                );
            }
        }
    }

    #[test]
    fn delta_schedule_values() {
        // k=3, ℓ=2: exponent -6/23
        let d = delta_schedule(1000, 3, 2).unwrap();
        let want = 1000f64.powf(-6.0 / 23.0);
        assert!((d - want).abs() < 1e-15);
        assert!((-6.0 / 23.0 + 0.2609f64).abs() < 1e-4);

        // k=2, ℓ=1, n = 10^4: 10^{-16/7}
        let d = delta_schedule(10_000, 2, 1).unwrap();
        let want = (-16.0 / 7.0 * 10f64.ln()).exp();
        assert!((d - want).abs() <= 1e-15 * want);
        assert!((d - 5.179e-3).abs() < 1e-6);

        assert!(delta_schedule(1, 2, 1).is_err());
        assert!(delta_schedule(100, 2, 2).is_err());
    }

    #[test]
    fn lambda_schedule_exponents() {
        // n-exponent at k=3, ℓ=2 is -24/23
        let l1 = lambda_schedule(1000, 3, 2, 3.0, 1.0).unwrap();
        let l2 = lambda_schedule(2000, 3, 2, 3.0, 1.0).unwrap();
        let measured = (l2 / l1).ln() / 2f64.ln();
        assert!((measured - (-24.0 / 23.0)).abs() < 1e-10);
        assert!((measured + 1.0435).abs() < 1e-4);

        // P_ℓ-exponent at k=3 is (1/3 - 2)/(1/3 + 2) = -5/7
        let p1 = lambda_schedule(1000, 3, 2, 1.0, 1.0).unwrap();
        let p2 = lambda_schedule(1000, 3, 2, 2.0, 1.0).unwrap();
        let measured = (p2 / p1).ln() / 2f64.ln();
        assert!((measured - (-5.0 / 7.0)).abs() < 1e-10);

        // doubling C rescales by the same power law
        let c2 = lambda_schedule(1000, 3, 2, 1.0, 2.0).unwrap();
        assert!((c2 / p1 - 2f64.powf(-5.0 / 7.0)).abs() < 1e-12);

        assert!(lambda_schedule(1000, 3, 2, 0.0, 1.0).is_err());
        assert!(lambda_schedule(1000, 3, 2, 1.0, -1.0).is_err());
    }

    #[test]
    fn rate_table_matches_fractions() {
        let cases = [
            (RateMethod::ThisPaper, 2, 1, -4.0 / 7.0),
            (RateMethod::Simon2021, 2, 1, -4.0 / 7.0),
            (RateMethod::ThisPaper, 3, 1, -6.0 / 11.0),
            (RateMethod::Simon2021, 3, 1, -6.0 / 11.0),
            (RateMethod::Simon2021, 3, 2, -0.75),
            (RateMethod::ThisPaper, 3, 2, -18.0 / 23.0),
        ];
        for (method, k, ell, want) in cases {
            let got = theoretical_rate(method, k, ell).unwrap().exponent;
            assert!(
                (got - want).abs() < 1e-12,
                "{method:?} k={k} ℓ={ell}: {got} vs {want}"
            );
        }
        let correct = theoretical_rate(RateMethod::CorrectSpec, 3, 3).unwrap();
        assert!((correct.exponent + 6.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn rates_coincide_at_order_one_and_improve_above() {
        for k in 2..=8usize {
            let ours = theoretical_rate(RateMethod::ThisPaper, k, 1).unwrap().exponent;
            let theirs = theoretical_rate(RateMethod::Simon2021, k, 1).unwrap().exponent;
            assert!((ours - theirs).abs() < 1e-14, "k={k}");
            for ell in 2..k {
                let ours = theoretical_rate(RateMethod::ThisPaper, k, ell).unwrap().exponent;
                let theirs = theoretical_rate(RateMethod::Simon2021, k, ell).unwrap().exponent;
                assert!(
                    ours < theirs - 1e-12,
                    "k={k} ℓ={ell}: {ours} not faster than {theirs}"
                );
            }
        }
    }

    #[test]
    fn rate_regime_errors() {
        assert!(theoretical_rate(RateMethod::CorrectSpec, 3, 2).is_err());
        assert!(theoretical_rate(RateMethod::Simon2021, 2, 2).is_err());
        assert!(theoretical_rate(RateMethod::ThisPaper, 2, 3).is_err());
        // exponents live in (-1, 0)
        for k in 2..=8usize {
            for ell in 1..k {
                let e = theoretical_rate(RateMethod::ThisPaper, k, ell).unwrap().exponent;
                assert!(e > -1.0 && e < 0.0);
            }
        }
    }

    #[test]
    fn schedule_balances_error_and_penalty_terms() {
        // at δ = δ(n) the two sides of the bandwidth trade-off agree up to a
        // constant factor
        for (k, ell) in [(2usize, 1usize), (3, 1), (3, 2)] {
            for log2n in [8u32, 10, 12, 14, 16] {
                let n = 1usize << log2n;
                let delta = delta_schedule(n, k, ell).unwrap();
                let approx_term = delta.powi(2 * ell as i32 - 1);
                let penalty_term = delta.powf(-2.0 * (k - ell) as f64 / (2.0 * k as f64 + 1.0))
                    * (n as f64).powf(-2.0 * k as f64 / (2.0 * k as f64 + 1.0));
                let ratio = approx_term / penalty_term;
                assert!(
                    (0.25..=4.0).contains(&ratio),
                    "k={k} ℓ={ell} n={n}: ratio {ratio}"
                );
            }
        }
    }

    #[test]
    fn approx_error_scales_with_bandwidth_smoke() {
        // coarse slope check; the full sweep runs in the acceptance suite
        let n = 8192;
        for (truth, ell, k) in [(step3(), 1usize, 2usize), (ramp3(), 2, 3)] {
            let deltas = [0.2, 0.1, 0.05];
            let mut pts = Vec::new();
            for &d in &deltas {
                let spec = OracleSpec::new(truth.clone(), ell, k, d).unwrap();
                let oracle = build_oracle(&spec).unwrap();
                let err = approx_error_sq(&truth, &oracle, n);
                pts.push((d.ln(), err.ln()));
            }
            let slope = ols_slope(&pts);
            let want = (2 * ell - 1) as f64;
            assert!(
                (slope - want).abs() < 0.3,
                "ℓ={ell} k={k}: slope {slope} target {want}"
            );
        }
    }

    fn ols_slope(pts: &[(f64, f64)]) -> f64 {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        sxy / sxx
    }
}
