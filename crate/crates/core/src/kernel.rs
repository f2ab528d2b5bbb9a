//! Higher-order compactly supported kernels and exact convolution.
//!
//! A kernel of order `k` integrates to 1, has vanishing moments of orders
//! `1..k`, and is supported on `[-1, 1]`. The family used here is
//! `H_k(u) = (1 - u^2)^k * Σ_{m<M} a_m u^{2m}` with `M = ⌈k/2⌉`: the
//! `(1 - u^2)^k` factor makes the first `k-1` derivatives vanish at the
//! support edges, so convolutions pick up no boundary jumps, and the even
//! inner polynomial is solved from the `M x M` linear system of moment
//! conditions with closed-form moments of `(1 - u^2)^q u^{2m}`.
//!
//! Convolution with a piecewise polynomial is evaluated in closed form by
//! splitting the input into its global base polynomial plus truncated-power
//! jump terms at each breakpoint. Each jump term convolves to a fixed window
//! polynomial in the scaled variable `(x - knot)/δ`, so every coefficient is
//! computed at unit scale regardless of how small the bandwidth is.

use crate::error::{Error, Result};
use crate::pwpoly::{Piece, PiecewisePolynomial, Polynomial};

/// Moment and mass residuals of a constructed kernel must sit below this.
pub const MOMENT_TOL: f64 = 1e-10;

/// Order-`k` kernel on `[-1, 1]` with diagnostics.
#[derive(Clone, Debug)]
pub struct HigherOrderKernel {
    order: usize,
    smoothness: usize,
    poly: Polynomial,
    moments: Vec<f64>,
    deriv_bounds: Vec<f64>,
}

impl HigherOrderKernel {
    /// Kernel order `k`.
    pub fn order(&self) -> usize {
        self.order
    }

    /// Exponent `q` of the `(1 - u^2)^q` smoothness factor.
    pub fn smoothness_exponent(&self) -> usize {
        self.smoothness
    }

    /// The kernel as a single polynomial on `[-1, 1]`.
    pub fn poly(&self) -> &Polynomial {
        &self.poly
    }

    /// `∫ u^j H_k(u) du` for `j = 0..=k`, computed exactly at construction.
    pub fn moments(&self) -> &[f64] {
        &self.moments
    }

    /// `C_{k,ℓ} = sup_[-1,1] |H_k^{(ℓ)}|` for `ℓ = 0..k`.
    pub fn deriv_bounds(&self) -> &[f64] {
        &self.deriv_bounds
    }

    pub fn eval(&self, u: f64) -> f64 {
        if u.abs() > 1.0 {
            0.0
        } else {
            self.poly.eval(u)
        }
    }

    /// `∫ |u|^k H_k(u) du`, the remaining diagnostic of the construction.
    /// Signed: the kernel itself takes negative values for `k >= 3`.
    pub fn kth_abs_moment(&self) -> f64 {
        let shifted = self.poly.mul(&Polynomial::monomial(1.0, self.order));
        2.0 * shifted.integrate(0.0, 1.0)
    }

    /// Scale to bandwidth `delta`.
    pub fn scaled(&self, delta: f64) -> Result<ScaledKernel> {
        ScaledKernel::new(self.clone(), delta)
    }
}

/// `H_{k,δ}(u) = (1/δ) H_k(u/δ)`, supported on `[-δ, δ]`.
#[derive(Clone, Debug)]
pub struct ScaledKernel {
    base: HigherOrderKernel,
    bandwidth: f64,
}

impl ScaledKernel {
    pub fn new(base: HigherOrderKernel, bandwidth: f64) -> Result<Self> {
        if !bandwidth.is_finite() || bandwidth <= 0.0 {
            return Err(Error::param(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        Ok(ScaledKernel { base, bandwidth })
    }

    pub fn base(&self) -> &HigherOrderKernel {
        &self.base
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// The scaled kernel as a polynomial in `t` on `[-δ, δ]`.
    pub fn poly(&self) -> Polynomial {
        self.base
            .poly
            .scale_arg(1.0 / self.bandwidth)
            .scale(1.0 / self.bandwidth)
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.base.eval(t / self.bandwidth) / self.bandwidth
    }
}

/// Closed-form moments `∫_{-1}^{1} (1 - u^2)^q u^{2m} du`.
///
/// Recurrence `I(q, m) = I(q-1, m) - I(q-1, m+1)` from `I(0, m) = 2/(2m+1)`;
/// exact to machine precision for the small `q, m` used here.
fn weight_moment(q: usize, m: usize) -> f64 {
    let mut row: Vec<f64> = (0..=m + q).map(|j| 2.0 / (2 * j + 1) as f64).collect();
    for _ in 0..q {
        for j in 0..row.len() - 1 {
            row[j] -= row[j + 1];
        }
        row.pop();
    }
    row[m]
}

/// Solve a small dense linear system by Gaussian elimination with partial
/// pivoting. Panics on a singular matrix; the moment systems solved here are
/// Gram matrices of independent functions and cannot be singular.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        assert!(a[col][col] != 0.0, "singular moment system");
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[row][j] -= f * a[col][j];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for j in row + 1..n {
            acc -= a[row][j] * x[j];
        }
        x[row] = acc / a[row][row];
    }
    x
}

/// Construct the order-`k` kernel, `1 <= k <= 8`.
pub fn construct_kernel(k: usize) -> Result<HigherOrderKernel> {
    if !(1..=8).contains(&k) {
        return Err(Error::param(format!(
            "kernel order must be in 1..=8, got {k}"
        )));
    }
    let q = k;
    let m_dim = k.div_ceil(2);

    // Moment conditions: ∫ u^{2j} H = δ_{j0} for j < M, i.e.
    // Σ_m a_m ∫ (1-u²)^q u^{2(j+m)} = δ_{j0}.
    let a: Vec<Vec<f64>> = (0..m_dim)
        .map(|j| (0..m_dim).map(|m| weight_moment(q, j + m)).collect())
        .collect();
    let mut rhs = vec![0.0; m_dim];
    rhs[0] = 1.0;
    let coeffs = solve_dense(a, rhs);

    let mut inner = vec![0.0; 2 * m_dim - 1];
    for (m, &c) in coeffs.iter().enumerate() {
        inner[2 * m] = c;
    }
    let inner = Polynomial::new(inner);
    let mut weight = Polynomial::constant(1.0);
    let one_minus_u2 = Polynomial::new(vec![1.0, 0.0, -1.0]);
    for _ in 0..q {
        weight = weight.mul(&one_minus_u2);
    }
    let poly = weight.mul(&inner);

    let moments: Vec<f64> = (0..=k).map(|j| poly_moment(&poly, j)).collect();
    assert!(
        (moments[0] - 1.0).abs() <= MOMENT_TOL,
        "kernel mass off by {:e}",
        (moments[0] - 1.0).abs()
    );
    for (j, &m) in moments.iter().enumerate().take(k).skip(1) {
        assert!(m.abs() <= MOMENT_TOL, "moment {j} = {m:e} not vanishing");
    }

    let mut d = poly.clone();
    let deriv_bounds = (0..k)
        .map(|_| {
            let bound = d.sup_abs(-1.0, 1.0);
            d = d.derivative();
            bound
        })
        .collect();

    Ok(HigherOrderKernel {
        order: k,
        smoothness: q,
        poly,
        moments,
        deriv_bounds,
    })
}

fn poly_moment(poly: &Polynomial, j: usize) -> f64 {
    poly.mul(&Polynomial::monomial(1.0, j)).integrate(-1.0, 1.0)
}

/// Exact `∫ u^j H_k(u) du` over the support, any `j >= 0`.
pub fn kernel_moment(kernel: &HigherOrderKernel, j: usize) -> f64 {
    poly_moment(&kernel.poly, j)
}

/// `sup_[-1,1] |H_k^{(ℓ)}|` for `0 <= ℓ <= k-1`.
pub fn derivative_bound(kernel: &HigherOrderKernel, ell: usize) -> Result<f64> {
    if ell >= kernel.order {
        return Err(Error::param(format!(
            "derivative order {ell} out of range for kernel of order {}",
            kernel.order
        )));
    }
    Ok(kernel.deriv_bounds[ell])
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Truncated-power decomposition of a piecewise polynomial: the first piece
/// extended globally, plus per-knot jump polynomials expressed around the
/// knot. `f(x) = base(x) + Σ_d Σ_m gamma[d][m] (x - d)^m 1(x >= d)`.
struct JumpDecomposition<'a> {
    base: &'a Piece,
    knots: Vec<(f64, Vec<f64>)>,
}

fn decompose(f: &PiecewisePolynomial) -> JumpDecomposition<'_> {
    let pieces = f.pieces();
    let knots = f
        .breakpoints()
        .iter()
        .enumerate()
        .filter_map(|(i, &d)| {
            let left = pieces[i].recentered(d);
            let right = pieces[i + 1].recentered(d);
            let gamma = right.poly().sub(left.poly());
            if gamma.is_zero() {
                None
            } else {
                Some((d, gamma.coeffs().to_vec()))
            }
        })
        .collect();
    JumpDecomposition {
        base: &pieces[0],
        knots,
    }
}

/// Window polynomials for one truncated-power degree `m`:
/// `phi(v) = ∫_{-1}^{v} (v - s)^m H(s) ds` inside the window and
/// `psi(v) = ∫_{-1}^{1} (v - s)^m H(s) ds` past it, both in `v = (x - d)/δ`.
struct WindowPolys {
    phi: Polynomial,
    psi: Polynomial,
}

fn window_polys(kernel_poly: &Polynomial, m: usize) -> WindowPolys {
    let mut phi = Polynomial::zero();
    let mut psi = Polynomial::zero();
    let mut antider = kernel_poly.antiderivative(); // antiderivative of s^r H(s)
    let mut binom = 1.0;
    for r in 0..=m {
        let sign = if r % 2 == 0 { 1.0 } else { -1.0 };
        let v_pow = Polynomial::monomial(sign * binom, m - r);
        // ∫_{-1}^{v} s^r H(s) ds as a polynomial in v
        let cumulative = antider.sub(&Polynomial::constant(antider.eval(-1.0)));
        phi = phi.add(&v_pow.mul(&cumulative));
        psi = psi.add(&v_pow.scale(antider.eval(1.0) - antider.eval(-1.0)));
        binom *= (m - r) as f64 / (r + 1) as f64;
        antider = kernel_poly
            .mul(&Polynomial::monomial(1.0, r + 1))
            .antiderivative();
    }
    WindowPolys { phi, psi }
}

/// Rescale a polynomial in `v = (x - d)/δ` to one in `w = x - d`.
fn unscale(poly: &Polynomial, delta: f64) -> Polynomial {
    poly.scale_arg(1.0 / delta)
}

/// Exact convolution `(f ⋆ H_{k,δ})(x) = ∫_{-δ}^{δ} f(x - t) H_{k,δ}(t) dt`.
///
/// Outside its domain `f` is extended by the polynomials of its boundary
/// pieces, so the output is defined on the same domain as the input. New
/// breakpoints appear at `knot ± δ`; wherever `f` is locally a polynomial of
/// degree `< k` at distance more than `δ` from every breakpoint, the output
/// reproduces `f` to machine precision.
pub fn convolve(f: &PiecewisePolynomial, scaled: &ScaledKernel) -> PiecewisePolynomial {
    let delta = scaled.bandwidth();
    let kernel_poly = scaled.base().poly();
    let domain = f.domain();
    let decomp = decompose(f);

    // Smooth part: convolving the global base polynomial against the kernel is
    // the moment expansion Σ_r (-δ)^r m_r / r! * base^{(r)}.
    let base_conv = {
        let mut acc = Polynomial::zero();
        let mut d = decomp.base.poly().clone();
        let mut factor = 1.0; // (-δ)^r / r!
        let mut r = 0usize;
        while !d.is_zero() {
            let m_r = poly_moment(kernel_poly, r);
            acc = acc.add(&d.scale(factor * m_r));
            d = d.derivative();
            r += 1;
            factor *= -delta / r as f64;
        }
        Piece::new(decomp.base.center(), acc)
    };

    let mut breakpoints: Vec<f64> = decomp
        .knots
        .iter()
        .flat_map(|&(d, _)| [d - delta, d + delta])
        .filter(|&b| b > domain.lo() && b < domain.hi())
        .collect();
    breakpoints.sort_by(f64::total_cmp);
    breakpoints.dedup_by(|b, a| *b - *a <= crate::pwpoly::BREAKPOINT_MERGE_TOL);

    // Window polynomials per truncated-power degree present in the input.
    let max_deg = decomp
        .knots
        .iter()
        .map(|(_, g)| g.len().saturating_sub(1))
        .max()
        .unwrap_or(0);
    let windows: Vec<WindowPolys> = (0..=max_deg)
        .map(|m| window_polys(kernel_poly, m))
        .collect();

    let mut edges = Vec::with_capacity(breakpoints.len() + 2);
    edges.push(domain.lo());
    edges.extend_from_slice(&breakpoints);
    edges.push(domain.hi());

    let pieces = edges
        .windows(2)
        .map(|w| {
            let center = 0.5 * (w[0] + w[1]);
            let mut poly = base_conv.recentered(center).poly().clone();
            for (d, gamma) in &decomp.knots {
                for (m, &g) in gamma.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let scale = g * delta.powi(m as i32);
                    let local = if center < d - delta {
                        continue;
                    } else if center > d + delta {
                        unscale(&windows[m].psi, delta).scale(scale)
                    } else {
                        unscale(&windows[m].phi, delta).scale(scale)
                    };
                    // shift from knot-centered to cell-centered coordinates
                    poly = poly.add(&local.shift(center - d));
                }
            }
            Piece::new(center, poly)
        })
        .collect();

    PiecewisePolynomial::from_centered_pieces(domain, breakpoints, pieces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pwpoly::{Interval, TruncatedPowerTerm};

    fn simpson<F: Fn(f64) -> f64 + Copy>(f: F, a: f64, b: f64, tol: f64) -> f64 {
        fn simp<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
            (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
        }
        fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (l, r) = (simp(f, a, m), simp(f, m, b));
            if depth == 0 || (l + r - whole).abs() <= 15.0 * tol {
                l + r + (l + r - whole) / 15.0
            } else {
                rec(f, a, m, l, 0.5 * tol, depth - 1) + rec(f, m, b, r, 0.5 * tol, depth - 1)
            }
        }
        rec(&f, a, b, simp(&f, a, b), tol, 48)
    }

    /// Quadrature oracle for `(f ⋆ H_δ)(x)`: splits the integration range at
    /// every point where the integrand switches pieces (`t = x - knot`), since
    /// adaptive quadrature cannot see sliver-supported integrands on its own.
    fn quad_convolution(f: &PiecewisePolynomial, s: &ScaledKernel, x: f64, tol: f64) -> f64 {
        let delta = s.bandwidth();
        let mut cuts = vec![-delta];
        for &d in f.breakpoints() {
            let t = x - d;
            if t > -delta && t < delta {
                cuts.push(t);
            }
        }
        cuts.push(delta);
        cuts.sort_by(f64::total_cmp);
        cuts.windows(2)
            .filter(|w| w[1] > w[0])
            .map(|w| simpson(|t| f.eval_extended(x - t) * s.eval(t), w[0], w[1], tol))
            .sum()
    }

    fn step3() -> PiecewisePolynomial {
        PiecewisePolynomial::from_truncated_powers(
            Interval::unit(),
            &Polynomial::zero(),
            &[TruncatedPowerTerm::new(0.5, 0, 3.0)],
        )
        .unwrap()
    }

    #[test]
    fn quadratic_kernel_closed_form() {
        // H_2(u) = (15/16)(1 - u^2)^2
        let h = construct_kernel(2).unwrap();
        let want = [15.0 / 16.0, 0.0, -30.0 / 16.0, 0.0, 15.0 / 16.0];
        assert_eq!(h.poly().coeffs().len(), 5);
        for (got, want) in h.poly().coeffs().iter().zip(want) {
            assert!((got - want).abs() < 1e-13, "got {got}, want {want}");
        }
        assert!((h.eval(0.0) - 0.9375).abs() < 1e-13);
    }

    #[test]
    fn cubic_kernel_closed_form() {
        // H_3(u) = (1 - u^2)^3 (945 - 3465 u^2) / 512
        let h = construct_kernel(3).unwrap();
        assert!((h.eval(0.0) - 945.0 / 512.0).abs() < 1e-12);
        let negative = (0..=100).any(|i| h.eval(i as f64 / 100.0) < 0.0);
        assert!(negative, "order-3 kernel must take negative values");
    }

    #[test]
    fn moment_conditions_all_orders() {
        for k in 2..=6 {
            let h = construct_kernel(k).unwrap();
            assert!((kernel_moment(&h, 0) - 1.0).abs() <= MOMENT_TOL);
            for j in 1..k {
                assert!(
                    kernel_moment(&h, j).abs() <= MOMENT_TOL,
                    "k={k} j={j} moment={}",
                    kernel_moment(&h, j)
                );
            }
        }
    }

    #[test]
    fn odd_moments_vanish_exactly() {
        for k in 1..=8 {
            let h = construct_kernel(k).unwrap();
            assert_eq!(kernel_moment(&h, 1), 0.0);
            assert_eq!(kernel_moment(&h, 3), 0.0);
        }
    }

    #[test]
    fn order_bounds_rejected() {
        assert!(construct_kernel(0).is_err());
        assert!(construct_kernel(9).is_err());
    }

    #[test]
    fn scaled_kernel_mass_is_one() {
        let h = construct_kernel(3).unwrap();
        for delta in [0.05, 0.1, 0.2, 1.0, 2.5] {
            let s = h.scaled(delta).unwrap();
            let mass = s.poly().integrate(-delta, delta);
            assert!((mass - 1.0).abs() < 1e-12, "delta={delta} mass={mass}");
        }
        assert!(h.scaled(0.0).is_err());
        assert!(h.scaled(-0.1).is_err());
    }

    #[test]
    fn derivative_bounds_reported() {
        let h2 = construct_kernel(2).unwrap();
        assert!((derivative_bound(&h2, 0).unwrap() - 0.9375).abs() < 1e-12);
        let h3 = construct_kernel(3).unwrap();
        assert!((derivative_bound(&h3, 0).unwrap() - 945.0 / 512.0).abs() < 1e-11);
        assert!(derivative_bound(&h3, 3).is_err());
        for k in 2..=6 {
            let h = construct_kernel(k).unwrap();
            for ell in 0..k {
                let mut d = h.poly().clone();
                for _ in 0..ell {
                    d = d.derivative();
                }
                assert!(derivative_bound(&h, ell).unwrap() >= d.eval(0.0).abs());
            }
        }
    }

    #[test]
    fn convolution_identity_on_low_degree_polynomials() {
        for k in [2usize, 3] {
            let h = construct_kernel(k).unwrap();
            for m in 0..k {
                let f = PiecewisePolynomial::from_polynomial(
                    Interval::unit(),
                    &Polynomial::monomial(1.0, m),
                );
                let g = convolve(&f, &h.scaled(0.1).unwrap());
                for i in 0..=200 {
                    let x = i as f64 / 200.0;
                    let err = (g.evaluate(x).unwrap() - x.powi(m as i32)).abs();
                    assert!(err < 1e-12, "k={k} m={m} x={x} err={err:e}");
                }
            }
        }
    }

    #[test]
    fn step_convolution_locality_and_symmetry() {
        let h = construct_kernel(2).unwrap();
        let g = convolve(&step3(), &h.scaled(0.1).unwrap());
        assert_eq!(g.breakpoints().len(), 2);
        assert!((g.breakpoints()[0] - 0.4).abs() < 1e-12);
        assert!((g.breakpoints()[1] - 0.6).abs() < 1e-12);
        for x in [0.0, 0.1, 0.39] {
            assert!(g.evaluate(x).unwrap().abs() < 1e-12);
        }
        for x in [0.61, 0.8, 1.0] {
            assert!((g.evaluate(x).unwrap() - 3.0).abs() < 1e-12);
        }
        // even kernel: the smoothed step passes through half its height
        assert!((g.evaluate(0.5).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn convolution_matches_quadrature() {
        let domain = Interval::unit();
        let f = PiecewisePolynomial::from_truncated_powers(
            domain,
            &Polynomial::new(vec![0.5, 1.0]),
            &[
                TruncatedPowerTerm::new(0.35, 0, 2.0),
                TruncatedPowerTerm::new(0.65, 1, -3.0),
            ],
        )
        .unwrap();
        for k in [2usize, 3] {
            let h = construct_kernel(k).unwrap();
            let delta = 0.08;
            let s = h.scaled(delta).unwrap();
            let g = convolve(&f, &s);
            for i in 0..50 {
                let x = 0.01 + 0.98 * (i as f64 / 49.0);
                let direct = quad_convolution(&f, &s, x, 1e-13);
                let got = g.evaluate(x).unwrap();
                assert!(
                    (got - direct).abs() < 1e-8,
                    "k={k} x={x} got={got} direct={direct}"
                );
            }
        }
    }

    #[test]
    fn locality_coefficientwise_on_far_cells() {
        let f = step3();
        let h = construct_kernel(3).unwrap();
        let delta = 0.05;
        let g = convolve(&f, &h.scaled(delta).unwrap());
        // far cells: [0, 0.45) governed by input piece 0, (0.55, 1] by piece 1
        for (x, idx) in [(0.2, 0usize), (0.8, 2usize)] {
            let out = &g.pieces()[g.piece_index(x)];
            let inp = f.pieces()[f.piece_index(x)].recentered(out.center());
            let n = out.poly().coeffs().len().max(inp.poly().coeffs().len());
            for j in 0..n {
                let diff = (out.poly().coeff(j) - inp.poly().coeff(j)).abs();
                assert!(diff < 1e-10, "cell {idx} coeff {j} differs by {diff:e}");
            }
        }
    }

    #[test]
    fn small_bandwidth_is_well_conditioned() {
        // the regime that breaks a global monomial representation
        let h = construct_kernel(3).unwrap();
        let delta = 0.0125;
        let ramp = PiecewisePolynomial::from_truncated_powers(
            Interval::unit(),
            &Polynomial::zero(),
            &[TruncatedPowerTerm::new(0.5, 1, 3.0)],
        )
        .unwrap();
        let s = h.scaled(delta).unwrap();
        let g = convolve(&ramp, &s);
        for i in 0..25 {
            let x = 0.5 + delta * (-1.0 + 2.0 * i as f64 / 24.0);
            let direct = quad_convolution(&ramp, &s, x, 1e-14);
            let got = g.evaluate(x).unwrap();
            assert!(
                (got - direct).abs() < 1e-10,
                "x={x} got={got} direct={direct}"
            );
        }
    }
}
