//! Exact kth-order total variation and its discrete counterpart.
//!
//! For a piecewise polynomial the supremum over partitions collapses to a
//! closed form: the sum of `|jump|`s of the (k-1)th derivative at the
//! breakpoints plus `∫ |f^{(k)}|` over the smooth cells. A jump in any
//! derivative of order below k-1 makes the kth-order variation infinite.

use crate::error::{Error, Result};
use crate::pwpoly::PiecewisePolynomial;

/// Jumps whose magnitude is below `JUMP_TOL * max(1, |left|, |right|)` are
/// treated as floating-point continuity.
pub const JUMP_TOL: f64 = 1e-12;

/// Decomposition of the kth-order total variation `P_k(f)`.
#[derive(Clone, Copy, Debug)]
pub struct TVReport {
    /// Penalty order k.
    pub order: usize,
    /// Sum of `|f^{(k-1)}(d+) - f^{(k-1)}(d-)|` over breakpoints.
    pub jump_part: f64,
    /// `Σ_cells ∫ |f^{(k)}|`.
    pub smooth_part: f64,
    /// `jump_part + smooth_part`; infinite when some lower-order derivative
    /// already jumps.
    pub total: f64,
    /// First breakpoint carrying a jump in a derivative of order `< k-1`,
    /// when the variation is infinite.
    pub infinite_at: Option<f64>,
}

impl TVReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

fn jump_at(f: &PiecewisePolynomial, idx: usize) -> (f64, f64, f64) {
    let d = f.breakpoints()[idx];
    let left = f.pieces()[idx].eval(d);
    let right = f.pieces()[idx + 1].eval(d);
    (left, right, right - left)
}

fn is_jump(left: f64, right: f64, diff: f64) -> bool {
    diff.abs() > JUMP_TOL * left.abs().max(right.abs()).max(1.0)
}

/// Exact `P_k(f)` for `k >= 1`.
pub fn tv_continuous(f: &PiecewisePolynomial, k: usize) -> TVReport {
    assert!(k >= 1, "total variation order must be at least 1");

    // continuity of f, f', ..., f^{(k-2)} is required for finiteness
    let mut g = f.clone();
    let mut infinite_at = None;
    for _ in 0..k.saturating_sub(1) {
        for idx in 0..g.breakpoints().len() {
            let (l, r, diff) = jump_at(&g, idx);
            if is_jump(l, r, diff) {
                infinite_at = Some(g.breakpoints()[idx]);
                break;
            }
        }
        if infinite_at.is_some() {
            break;
        }
        g = g.derivative();
    }
    // g is now f^{(k-1)} when finite

    if let Some(d) = infinite_at {
        return TVReport {
            order: k,
            jump_part: f64::INFINITY,
            smooth_part: 0.0,
            total: f64::INFINITY,
            infinite_at: Some(d),
        };
    }

    let mut jump_part = 0.0;
    for idx in 0..g.breakpoints().len() {
        let (l, r, diff) = jump_at(&g, idx);
        if is_jump(l, r, diff) {
            jump_part += diff.abs();
        }
    }

    let edges = g.edges();
    let mut smooth_part = 0.0;
    for (piece, w) in g.pieces().iter().zip(edges.windows(2)) {
        if w[1] > w[0] {
            smooth_part += piece
                .poly()
                .derivative()
                .integrate_abs(w[0] - piece.center(), w[1] - piece.center());
        }
    }

    TVReport {
        order: k,
        jump_part,
        smooth_part,
        total: jump_part + smooth_part,
        infinite_at: None,
    }
}

/// kth forward differences of a sample vector; length `n - k`.
pub(crate) fn forward_differences(theta: &[f64], k: usize) -> Vec<f64> {
    let mut d = theta.to_vec();
    for _ in 0..k {
        for i in 0..d.len() - 1 {
            d[i] = d[i + 1] - d[i];
        }
        d.pop();
    }
    d
}

/// Discrete penalty `n^{k-1} Σ |Δ^k θ|`, the grid surrogate of `P_k` for
/// equally spaced designs: for samples of `f ∈ F_k` it converges to
/// [`tv_continuous`] as the grid refines.
pub fn tv_discrete(theta: &[f64], k: usize) -> Result<f64> {
    let n = theta.len();
    if k < 1 || n <= k {
        return Err(Error::param(format!(
            "need more than k = {k} samples, got {n}"
        )));
    }
    let sum: f64 = forward_differences(theta, k).iter().map(|d| d.abs()).sum();
    Ok((n as f64).powi(k as i32 - 1) * sum)
}

/// Piecewise-constant projection with matching cell integrals.
///
/// `partition` lists the interior cut points; on each resulting cell the
/// output takes the cell average of `f`, so the integral over every cell is
/// preserved exactly and the first-order variation can only shrink.
pub fn piecewise_constant_project(
    f: &PiecewisePolynomial,
    partition: &[f64],
) -> Result<PiecewisePolynomial> {
    let domain = f.domain();
    if partition.is_empty() {
        return Err(Error::param("empty partition"));
    }
    for w in partition.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::param("partition must be strictly increasing"));
        }
    }
    if partition[0] <= domain.lo() || partition[partition.len() - 1] >= domain.hi() {
        return Err(Error::param(
            "partition points must lie strictly inside the domain",
        ));
    }

    let mut edges = Vec::with_capacity(partition.len() + 2);
    edges.push(domain.lo());
    edges.extend_from_slice(partition);
    edges.push(domain.hi());

    let mut values = Vec::with_capacity(partition.len() + 1);
    for w in edges.windows(2) {
        let mass = f.integrate_range(w[0], w[1])?;
        values.push(mass / (w[1] - w[0]));
    }

    PiecewisePolynomial::from_pieces(
        domain,
        partition.to_vec(),
        values
            .into_iter()
            .map(crate::pwpoly::Polynomial::constant)
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pwpoly::{Interval, Polynomial, TruncatedPowerTerm};
    use proptest::prelude::*;

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
    fn step_has_first_order_variation_three() {
        let r = tv_continuous(&step3(), 1);
        assert!((r.total - 3.0).abs() < 1e-12);
        assert!((r.jump_part - 3.0).abs() < 1e-12);
        assert_eq!(r.smooth_part, 0.0);
    }

    #[test]
    fn ramp_has_second_order_variation_three() {
        let r = tv_continuous(&ramp3(), 2);
        assert!((r.total - 3.0).abs() < 1e-12);
        assert!(r.infinite_at.is_none());
    }

    #[test]
    fn step_has_infinite_second_order_variation() {
        let r = tv_continuous(&step3(), 2);
        assert!(r.total.is_infinite());
        assert_eq!(r.infinite_at, Some(0.5));
    }

    #[test]
    fn smooth_part_via_quadrature() {
        // f = x^3 on [0,1]: P_2 = ∫ |6x| = 3
        let f = PiecewisePolynomial::from_polynomial(
            Interval::unit(),
            &Polynomial::monomial(1.0, 3),
        );
        let r = tv_continuous(&f, 2);
        assert!((r.total - 3.0).abs() < 1e-12);
        assert_eq!(r.jump_part, 0.0);
    }

    #[test]
    fn discrete_examples() {
        assert!((tv_discrete(&[0.0, 0.0, 3.0, 3.0, 3.0], 1).unwrap() - 3.0).abs() < 1e-12);
        assert!(tv_discrete(&[0.0, 1.0, 2.0, 3.0], 2).unwrap().abs() < 1e-12);
        assert!((tv_discrete(&[0.0, 0.0, 1.0, 2.0], 2).unwrap() - 4.0).abs() < 1e-12);
        assert!(tv_discrete(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn discrete_tracks_continuous_on_grids() {
        let n = 4096;
        for (f, k) in [(step3(), 1usize), (ramp3(), 2usize)] {
            let theta: Vec<f64> = (1..=n)
                .map(|i| f.evaluate(i as f64 / n as f64).unwrap())
                .collect();
            let disc = tv_discrete(&theta, k).unwrap();
            let cont = tv_continuous(&f, k).total;
            assert!(
                (disc - cont).abs() <= 0.05 * cont,
                "k={k} discrete={disc} continuous={cont}"
            );
        }
    }

    #[test]
    fn projection_examples() {
        let c = PiecewisePolynomial::constant(Interval::unit(), 2.5);
        let p = piecewise_constant_project(&c, &[0.3, 0.7]).unwrap();
        for i in 0..=10 {
            assert!((p.evaluate(i as f64 / 10.0).unwrap() - 2.5).abs() < 1e-14);
        }

        let ident = PiecewisePolynomial::from_polynomial(
            Interval::unit(),
            &Polynomial::new(vec![0.0, 1.0]),
        );
        let p = piecewise_constant_project(&ident, &[0.5]).unwrap();
        assert!((p.evaluate(0.2).unwrap() - 0.25).abs() < 1e-14);
        assert!((p.evaluate(0.8).unwrap() - 0.75).abs() < 1e-14);
    }

    #[test]
    fn projection_of_ramp_is_exact_cell_averages() {
        let p = piecewise_constant_project(&ramp3(), &[0.25, 0.5, 0.75]).unwrap();
        // cell averages of 3(x-0.5)_+ on quarters: 0, 0, 3/8, 9/8
        let expect = [0.0, 0.0, 0.375, 1.125];
        for (i, &want) in expect.iter().enumerate() {
            let x = 0.125 + 0.25 * i as f64;
            assert!((p.evaluate(x).unwrap() - want).abs() < 1e-13);
        }
        // integrals over every cell must match exactly
        for w in [0.0, 0.25, 0.5, 0.75, 1.0].windows(2) {
            let a = ramp3().integrate_range(w[0], w[1]).unwrap();
            let b = p.integrate_range(w[0], w[1]).unwrap();
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn projection_rejects_bad_partitions() {
        let f = ramp3();
        assert!(piecewise_constant_project(&f, &[]).is_err());
        assert!(piecewise_constant_project(&f, &[0.5, 0.5]).is_err());
        assert!(piecewise_constant_project(&f, &[1.5]).is_err());
    }

    #[test]
    fn polynomials_below_order_have_zero_variation() {
        for k in 1..=4usize {
            for deg in 0..k {
                let f = PiecewisePolynomial::from_polynomial(
                    Interval::unit(),
                    &Polynomial::monomial(1.7, deg),
                );
                let r = tv_continuous(&f, k);
                assert!(r.total.abs() < 1e-12, "k={k} deg={deg} total={}", r.total);
            }
        }
    }

    proptest! {
        #[test]
        fn projection_contracts_first_order_variation(
            knots in proptest::collection::vec(0.02f64..0.98, 1..5),
            degrees_weights in proptest::collection::vec((0usize..2, -2.0f64..2.0), 5),
            cuts in proptest::collection::vec(0.05f64..0.95, 1..7),
        ) {
            let terms: Vec<TruncatedPowerTerm> = knots
                .iter()
                .zip(degrees_weights.iter())
                .map(|(&d, &(m, w))| TruncatedPowerTerm::new(d, m, w))
                .collect();
            let f = PiecewisePolynomial::from_truncated_powers(
                Interval::unit(),
                &Polynomial::new(vec![0.5, -1.0]),
                &terms,
            ).unwrap();
            let mut partition = cuts.clone();
            partition.sort_by(f64::total_cmp);
            partition.dedup_by(|b, a| *b - *a <= 1e-3);
            let proj = piecewise_constant_project(&f, &partition).unwrap();
            let tv_f = tv_continuous(&f, 1).total;
            let tv_p = tv_continuous(&proj, 1).total;
            prop_assert!(tv_p <= tv_f + 1e-10, "projected {} > original {}", tv_p, tv_f);
        }

        #[test]
        fn scaling_is_absolutely_homogeneous(
            c in -5.0f64..5.0,
            knot in 0.1f64..0.9,
            w in -3.0f64..3.0,
        ) {
            let f = PiecewisePolynomial::from_truncated_powers(
                Interval::unit(),
                &Polynomial::new(vec![0.0, 1.0]),
                &[TruncatedPowerTerm::new(knot, 1, w)],
            ).unwrap();
            let scaled = PiecewisePolynomial::linear_combine(
                Interval::unit(),
                &[(c, &f)],
            ).unwrap();
            for k in 1..=2usize {
                let a = tv_continuous(&scaled, k).total;
                let b = c.abs() * tv_continuous(&f, k).total;
                prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b), "k={} {} vs {}", k, a, b);
            }
        }
    }
}
