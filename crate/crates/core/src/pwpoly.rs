//! Exact piecewise-polynomial algebra.
//!
//! Truths, kernels and their convolutions are all represented here. Every
//! operation is closed form; the only tolerance in the module is the
//! root-isolation width used by [`Polynomial::integrate_abs`].
//!
//! Pieces are stored in per-cell local coordinates (`value = poly(x - center)`
//! with `center` the cell midpoint). Narrow cells produced by small-bandwidth
//! convolutions carry coefficients that grow like `bandwidth^-degree`; in a
//! plain global monomial basis those coefficients reach ~1e17 at the smallest
//! bandwidths used by the rate checks and evaluation loses every significant
//! digit to cancellation. The local form keeps `|x - center| <=` cell radius,
//! so every Horner term stays on the scale of the function value.

use crate::error::{Error, Result};

/// Breakpoints closer than this are merged when piecewise functions are
/// combined; the rightmost representative survives.
pub const BREAKPOINT_MERGE_TOL: f64 = 1e-12;

/// Width to which sign-change roots are refined by bisection.
const ROOT_WIDTH: f64 = 1e-13;

// ---------------------------------------------------------------------------
// Interval
// ---------------------------------------------------------------------------

/// Closed, nondegenerate real interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    lo: f64,
    hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(Error::param(format!("invalid interval [{lo}, {hi}]")));
        }
        Ok(Interval { lo, hi })
    }

    /// The unit interval, domain of every built-in truth.
    pub fn unit() -> Self {
        Interval { lo: 0.0, hi: 1.0 }
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }
}

// ---------------------------------------------------------------------------
// Polynomial
// ---------------------------------------------------------------------------

/// Dense univariate polynomial, coefficients in ascending degree.
///
/// Canonical form: the trailing coefficient is nonzero, and the zero
/// polynomial is the empty coefficient list (degree `None`, value 0).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Polynomial {
    coeffs: Vec<f64>,
}

impl Polynomial {
    pub fn new(mut coeffs: Vec<f64>) -> Self {
        assert!(
            coeffs.iter().all(|c| c.is_finite()),
            "polynomial coefficients must be finite"
        );
        while coeffs.last() == Some(&0.0) {
            coeffs.pop();
        }
        Polynomial { coeffs }
    }

    pub fn zero() -> Self {
        Polynomial { coeffs: Vec::new() }
    }

    pub fn constant(c: f64) -> Self {
        Polynomial::new(vec![c])
    }

    /// The monomial `c * x^m`.
    pub fn monomial(c: f64, m: usize) -> Self {
        if c == 0.0 {
            return Polynomial::zero();
        }
        let mut coeffs = vec![0.0; m + 1];
        coeffs[m] = c;
        Polynomial { coeffs }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Coefficient of `x^j` (0 beyond the stored degree).
    pub fn coeff(&self, j: usize) -> f64 {
        self.coeffs.get(j).copied().unwrap_or(0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// `None` for the zero polynomial.
    pub fn degree(&self) -> Option<usize> {
        if self.coeffs.is_empty() {
            None
        } else {
            Some(self.coeffs.len() - 1)
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for &c in self.coeffs.iter().rev() {
            acc = acc * x + c;
        }
        acc
    }

    pub fn derivative(&self) -> Polynomial {
        if self.coeffs.len() <= 1 {
            return Polynomial::zero();
        }
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(j, &c)| j as f64 * c)
            .collect();
        Polynomial::new(coeffs)
    }

    /// Antiderivative with zero constant term.
    pub fn antiderivative(&self) -> Polynomial {
        if self.coeffs.is_empty() {
            return Polynomial::zero();
        }
        let mut coeffs = Vec::with_capacity(self.coeffs.len() + 1);
        coeffs.push(0.0);
        for (j, &c) in self.coeffs.iter().enumerate() {
            coeffs.push(c / (j + 1) as f64);
        }
        Polynomial::new(coeffs)
    }

    pub fn add(&self, other: &Polynomial) -> Polynomial {
        let n = self.coeffs.len().max(other.coeffs.len());
        let coeffs = (0..n).map(|j| self.coeff(j) + other.coeff(j)).collect();
        Polynomial::new(coeffs)
    }

    pub fn sub(&self, other: &Polynomial) -> Polynomial {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, c: f64) -> Polynomial {
        Polynomial::new(self.coeffs.iter().map(|&a| a * c).collect())
    }

    pub fn mul(&self, other: &Polynomial) -> Polynomial {
        if self.is_zero() || other.is_zero() {
            return Polynomial::zero();
        }
        let mut coeffs = vec![0.0; self.coeffs.len() + other.coeffs.len() - 1];
        for (i, &a) in self.coeffs.iter().enumerate() {
            for (j, &b) in other.coeffs.iter().enumerate() {
                coeffs[i + j] += a * b;
            }
        }
        Polynomial::new(coeffs)
    }

    /// Taylor shift: returns `q` with `q(x) = p(x + s)`.
    pub fn shift(&self, s: f64) -> Polynomial {
        if s == 0.0 || self.coeffs.len() <= 1 {
            return self.clone();
        }
        let mut c = self.coeffs.clone();
        let n = c.len();
        for i in 0..n - 1 {
            for j in (i..n - 1).rev() {
                c[j] += s * c[j + 1];
            }
        }
        Polynomial::new(c)
    }

    /// Argument scaling: returns `q` with `q(x) = p(a * x)`.
    pub fn scale_arg(&self, a: f64) -> Polynomial {
        let mut pow = 1.0;
        let coeffs = self
            .coeffs
            .iter()
            .map(|&c| {
                let v = c * pow;
                pow *= a;
                v
            })
            .collect();
        Polynomial::new(coeffs)
    }

    /// Exact `∫_a^b p`.
    pub fn integrate(&self, a: f64, b: f64) -> f64 {
        let f = self.antiderivative();
        f.eval(b) - f.eval(a)
    }

    /// Sign-change roots of `p` in `[a, b]`, strictly increasing.
    ///
    /// Roots of even multiplicity (where the sign does not flip) are not
    /// reported; callers below use the output only to split integration
    /// ranges at sign changes and to enumerate strict extrema, for which
    /// touching roots are irrelevant.
    pub fn sign_change_roots(&self, a: f64, b: f64) -> Vec<f64> {
        assert!(a <= b, "root isolation needs an ordered interval");
        let deg = match self.degree() {
            None | Some(0) => return Vec::new(),
            Some(d) => d,
        };
        if deg == 1 {
            let r = -self.coeffs[0] / self.coeffs[1];
            if r >= a && r <= b {
                return vec![r];
            }
            return Vec::new();
        }
        // Between consecutive critical points the polynomial is monotone, so a
        // sign change there isolates exactly one root.
        let crit = self.derivative().sign_change_roots(a, b);
        let mut pts = Vec::with_capacity(crit.len() + 2);
        pts.push(a);
        pts.extend(crit);
        pts.push(b);
        let mut roots = Vec::new();
        for w in pts.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if hi <= lo {
                continue;
            }
            let (flo, fhi) = (self.eval(lo), self.eval(hi));
            if flo == 0.0 {
                push_root(&mut roots, lo);
            }
            if flo * fhi < 0.0 {
                push_root(&mut roots, self.bisect_root(lo, hi, flo));
            }
        }
        if self.eval(b) == 0.0 {
            push_root(&mut roots, b);
        }
        roots
    }

    fn bisect_root(&self, mut lo: f64, mut hi: f64, flo: f64) -> f64 {
        let mut slo = flo.signum();
        while hi - lo > ROOT_WIDTH {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let fm = self.eval(mid);
            if fm == 0.0 {
                return mid;
            }
            if fm.signum() == slo {
                lo = mid;
                slo = fm.signum();
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Exact `∫_a^b |p|`, obtained by splitting at sign changes.
    pub fn integrate_abs(&self, a: f64, b: f64) -> f64 {
        assert!(a < b, "integrate_abs needs a < b");
        if self.is_zero() {
            return 0.0;
        }
        let mut cuts = vec![a];
        cuts.extend(self.sign_change_roots(a, b));
        cuts.push(b);
        let mut total = 0.0;
        for w in cuts.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if hi <= lo {
                continue;
            }
            total += self.integrate(lo, hi).abs();
        }
        total
    }

    /// `sup_[a,b] |p|` by critical-point enumeration.
    pub fn sup_abs(&self, a: f64, b: f64) -> f64 {
        assert!(a <= b);
        let mut best = self.eval(a).abs().max(self.eval(b).abs());
        for r in self.derivative().sign_change_roots(a, b) {
            best = best.max(self.eval(r).abs());
        }
        best
    }
}

fn push_root(roots: &mut Vec<f64>, r: f64) {
    if roots.last().is_none_or(|&last| r - last > ROOT_WIDTH) {
        roots.push(r);
    }
}

// ---------------------------------------------------------------------------
// Truncated powers
// ---------------------------------------------------------------------------

/// One term `weight * (x - knot)^degree * 1(x >= knot)`.
#[derive(Clone, Copy, Debug)]
pub struct TruncatedPowerTerm {
    pub knot: f64,
    pub degree: usize,
    pub weight: f64,
}

impl TruncatedPowerTerm {
    pub fn new(knot: f64, degree: usize, weight: f64) -> Self {
        TruncatedPowerTerm {
            knot,
            degree,
            weight,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        if x >= self.knot {
            self.weight * (x - self.knot).powi(self.degree as i32)
        } else {
            0.0
        }
    }
}

// ---------------------------------------------------------------------------
// PiecewisePolynomial
// ---------------------------------------------------------------------------

/// One cell of a piecewise polynomial: `value(x) = poly(x - center)`.
#[derive(Clone, Debug)]
pub struct Piece {
    center: f64,
    poly: Polynomial,
}

impl Piece {
    pub fn new(center: f64, poly: Polynomial) -> Self {
        Piece { center, poly }
    }

    pub fn center(&self) -> f64 {
        self.center
    }

    pub fn poly(&self) -> &Polynomial {
        &self.poly
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.poly.eval(x - self.center)
    }

    /// Same function re-expressed around `new_center`.
    pub fn recentered(&self, new_center: f64) -> Piece {
        Piece {
            center: new_center,
            poly: self.poly.shift(new_center - self.center),
        }
    }

    fn derivative(&self) -> Piece {
        Piece {
            center: self.center,
            poly: self.poly.derivative(),
        }
    }
}

/// Piecewise polynomial on a closed domain with strictly increasing interior
/// breakpoints. Evaluation is right-continuous: at a breakpoint the value
/// comes from the piece on the right.
#[derive(Clone, Debug)]
pub struct PiecewisePolynomial {
    domain: Interval,
    breakpoints: Vec<f64>,
    pieces: Vec<Piece>,
}

impl PiecewisePolynomial {
    /// Build from global-coordinate piece polynomials (`pieces[i]` applies on
    /// the i-th cell). Pieces are recentered internally.
    pub fn from_pieces(
        domain: Interval,
        breakpoints: Vec<f64>,
        pieces: Vec<Polynomial>,
    ) -> Result<Self> {
        if pieces.len() != breakpoints.len() + 1 {
            return Err(Error::param(format!(
                "{} pieces for {} breakpoints",
                pieces.len(),
                breakpoints.len()
            )));
        }
        for w in breakpoints.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::param("breakpoints must be strictly increasing"));
            }
        }
        if let (Some(&first), Some(&last)) = (breakpoints.first(), breakpoints.last()) {
            if first <= domain.lo() || last >= domain.hi() {
                return Err(Error::param(
                    "breakpoints must lie strictly inside the domain",
                ));
            }
        }
        let centered = {
            let mut edges = Vec::with_capacity(breakpoints.len() + 2);
            edges.push(domain.lo());
            edges.extend_from_slice(&breakpoints);
            edges.push(domain.hi());
            pieces
                .into_iter()
                .zip(edges.windows(2))
                .map(|(p, w)| Piece::new(0.0, p).recentered(0.5 * (w[0] + w[1])))
                .collect()
        };
        Ok(PiecewisePolynomial {
            domain,
            breakpoints,
            pieces: centered,
        })
    }

    pub(crate) fn from_centered_pieces(
        domain: Interval,
        breakpoints: Vec<f64>,
        pieces: Vec<Piece>,
    ) -> Self {
        debug_assert_eq!(pieces.len(), breakpoints.len() + 1);
        debug_assert!(breakpoints.windows(2).all(|w| w[1] > w[0]));
        PiecewisePolynomial {
            domain,
            breakpoints,
            pieces,
        }
    }

    pub fn zero(domain: Interval) -> Self {
        PiecewisePolynomial {
            domain,
            breakpoints: Vec::new(),
            pieces: vec![Piece::new(domain.midpoint(), Polynomial::zero())],
        }
    }

    pub fn constant(domain: Interval, c: f64) -> Self {
        PiecewisePolynomial {
            domain,
            breakpoints: Vec::new(),
            pieces: vec![Piece::new(domain.midpoint(), Polynomial::constant(c))],
        }
    }

    /// A single global polynomial viewed as a one-piece function.
    pub fn from_polynomial(domain: Interval, poly: &Polynomial) -> Self {
        let c = domain.midpoint();
        PiecewisePolynomial {
            domain,
            breakpoints: Vec::new(),
            pieces: vec![Piece::new(c, poly.shift(c))],
        }
    }

    /// Exact piecewise form of `base(x) + Σ_j w_j (x - d_j)^{m_j} 1(x >= d_j)`.
    ///
    /// `base` is given in global coordinates. Knots must satisfy
    /// `domain.lo() <= knot < domain.hi()`; a knot at the lower endpoint is
    /// active on the whole domain and creates no breakpoint.
    pub fn from_truncated_powers(
        domain: Interval,
        base: &Polynomial,
        terms: &[TruncatedPowerTerm],
    ) -> Result<Self> {
        for t in terms {
            if !t.knot.is_finite() || t.knot < domain.lo() || t.knot >= domain.hi() {
                return Err(Error::OutOfDomain {
                    x: t.knot,
                    lo: domain.lo(),
                    hi: domain.hi(),
                });
            }
        }
        let mut breakpoints: Vec<f64> = terms
            .iter()
            .map(|t| t.knot)
            .filter(|&d| d > domain.lo())
            .collect();
        breakpoints.sort_by(f64::total_cmp);
        breakpoints.dedup();

        let mut edges = Vec::with_capacity(breakpoints.len() + 2);
        edges.push(domain.lo());
        edges.extend_from_slice(&breakpoints);
        edges.push(domain.hi());

        let pieces = edges
            .windows(2)
            .map(|w| {
                let (lo, hi) = (w[0], w[1]);
                let center = 0.5 * (lo + hi);
                // base(x) = base(w + center) in local coordinates w = x - center
                let mut poly = base.shift(center);
                for t in terms {
                    if t.knot <= lo {
                        // w(x - knot)^m = ((x - center) + (center - knot))^m
                        let shifted =
                            Polynomial::monomial(t.weight, t.degree).shift(center - t.knot);
                        poly = poly.add(&shifted);
                    }
                }
                Piece::new(center, poly)
            })
            .collect();

        Ok(PiecewisePolynomial {
            domain,
            breakpoints,
            pieces,
        })
    }

    pub fn domain(&self) -> Interval {
        self.domain
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    /// Cell boundaries including the domain endpoints.
    pub fn edges(&self) -> Vec<f64> {
        let mut edges = Vec::with_capacity(self.breakpoints.len() + 2);
        edges.push(self.domain.lo());
        edges.extend_from_slice(&self.breakpoints);
        edges.push(self.domain.hi());
        edges
    }

    /// Index of the piece governing `x` (right-continuous at breakpoints).
    pub fn piece_index(&self, x: f64) -> usize {
        self.breakpoints.partition_point(|&d| d <= x)
    }

    /// Value at `x`; errors outside the domain.
    pub fn evaluate(&self, x: f64) -> Result<f64> {
        if !self.domain.contains(x) {
            return Err(Error::OutOfDomain {
                x,
                lo: self.domain.lo(),
                hi: self.domain.hi(),
            });
        }
        Ok(self.pieces[self.piece_index(x)].eval(x))
    }

    /// Value at `x` with the boundary pieces extended polynomially beyond the
    /// domain. This is the extension rule used by kernel convolution.
    pub fn eval_extended(&self, x: f64) -> f64 {
        let idx = if x < self.domain.lo() {
            0
        } else if x > self.domain.hi() {
            self.pieces.len() - 1
        } else {
            self.piece_index(x)
        };
        self.pieces[idx].eval(x)
    }

    /// Piecewise derivative: same breakpoints, each piece differentiated.
    pub fn derivative(&self) -> PiecewisePolynomial {
        PiecewisePolynomial {
            domain: self.domain,
            breakpoints: self.breakpoints.clone(),
            pieces: self.pieces.iter().map(Piece::derivative).collect(),
        }
    }

    pub fn derivative_n(&self, order: usize) -> PiecewisePolynomial {
        let mut out = self.clone();
        for _ in 0..order {
            out = out.derivative();
        }
        out
    }

    /// Exact `∫_a^b f` for `[a, b]` within the domain.
    pub fn integrate_range(&self, a: f64, b: f64) -> Result<f64> {
        if !self.domain.contains(a) || !self.domain.contains(b) || a > b {
            return Err(Error::param(format!(
                "integration range [{a}, {b}] not inside domain"
            )));
        }
        let edges = self.edges();
        let mut total = 0.0;
        for (piece, w) in self.pieces.iter().zip(edges.windows(2)) {
            let lo = w[0].max(a);
            let hi = w[1].min(b);
            if hi > lo {
                total += piece.poly.integrate(lo - piece.center, hi - piece.center);
            }
        }
        Ok(total)
    }

    /// Weighted sum `Σ w_i f_i` over an identical domain. Breakpoints are
    /// unioned; near-coincident ones (within [`BREAKPOINT_MERGE_TOL`]) merge
    /// and the rightmost survives. An empty list yields the zero function.
    pub fn linear_combine(
        domain: Interval,
        terms: &[(f64, &PiecewisePolynomial)],
    ) -> Result<PiecewisePolynomial> {
        for (_, f) in terms {
            if f.domain != domain {
                return Err(Error::DomainMismatch {
                    a_lo: domain.lo(),
                    a_hi: domain.hi(),
                    b_lo: f.domain.lo(),
                    b_hi: f.domain.hi(),
                });
            }
        }
        let mut all: Vec<f64> = terms
            .iter()
            .flat_map(|(_, f)| f.breakpoints.iter().copied())
            .collect();
        all.sort_by(f64::total_cmp);
        let breakpoints = merge_close(&all, domain);

        let mut edges = Vec::with_capacity(breakpoints.len() + 2);
        edges.push(domain.lo());
        edges.extend_from_slice(&breakpoints);
        edges.push(domain.hi());

        let pieces = edges
            .windows(2)
            .map(|w| {
                let center = 0.5 * (w[0] + w[1]);
                let mut poly = Polynomial::zero();
                for (weight, f) in terms {
                    let src = &f.pieces[f.piece_index(center)];
                    poly = poly.add(&src.poly.shift(center - src.center).scale(*weight));
                }
                Piece::new(center, poly)
            })
            .collect();

        Ok(PiecewisePolynomial {
            domain,
            breakpoints,
            pieces,
        })
    }
}

/// Collapse sorted breakpoints: drop entries outside the open domain and keep
/// the rightmost of every cluster tighter than the merge tolerance.
fn merge_close(sorted: &[f64], domain: Interval) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(sorted.len());
    for &b in sorted {
        if b <= domain.lo() || b >= domain.hi() {
            continue;
        }
        match out.last_mut() {
            Some(last) if b - *last <= BREAKPOINT_MERGE_TOL => *last = b,
            _ => out.push(b),
        }
    }
    out
}
