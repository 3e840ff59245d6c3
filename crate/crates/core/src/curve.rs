//! Thermo-majorization curves and the feasibility decision.
//!
//! The curve of a system plots cumulative populations against cumulative
//! Gibbs weights along the β-ordering, starting at (0,0). Levels with zero
//! weight and zero population are invisible and coalesced away; an occupied
//! infinite level contributes a vertical segment at x = 0. One state can be
//! transformed into another exactly when its curve never dips below the
//! other's.

use crate::error::{Result, ThermoError};
use crate::system::{beta_order, ThermoSystem};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;

/// Piecewise-linear concave curve through β-ordered cumulative sums.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermoCurve {
    points: Vec<(f64, f64)>,
}

impl ThermoCurve {
    #[inline]
    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Sum of finite Gibbs weights (the right end of the domain).
    #[inline]
    pub fn z_fin(&self) -> f64 {
        self.points.last().map(|p| p.0).unwrap_or(0.0)
    }

    #[inline]
    pub fn y_top(&self) -> f64 {
        self.points.last().map(|p| p.1).unwrap_or(0.0)
    }

    /// Linear interpolation; at a vertical segment returns the upper y.
    pub fn value_at(&self, x: f64) -> Result<f64> {
        let z = self.z_fin();
        let slack = 1e-9 * z.max(1.0);
        if x < -slack || x > z + slack {
            return Err(ThermoError::OutOfDomain(x, z));
        }
        let x = x.clamp(0.0, z);
        // First index with x_k > x; the point before it is the last with
        // x_k <= x, which is the top of any vertical run at x.
        let hi = self.points.partition_point(|p| p.0 <= x);
        if hi == self.points.len() {
            return Ok(self.y_top());
        }
        let (x0, y0) = self.points[hi - 1];
        if x == x0 {
            return Ok(y0);
        }
        let (x1, y1) = self.points[hi];
        Ok(y0 + (y1 - y0) * (x - x0) / (x1 - x0))
    }

    /// The smallest x with value_at(x) >= y; 0 when y <= 0.
    pub fn horizontal_distance(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return 0.0;
        }
        let y = y.min(self.y_top());
        let j = self.points.partition_point(|p| p.1 < y);
        if j == 0 {
            return 0.0;
        }
        if j == self.points.len() {
            return self.z_fin();
        }
        let (x0, y0) = self.points[j - 1];
        let (x1, y1) = self.points[j];
        if y1 == y0 || x1 == x0 {
            return x1.min(x0.max(x1));
        }
        x0 + (x1 - x0) * (y - y0) / (y1 - y0)
    }

    /// Segment slopes are non-increasing within a relative tolerance; a
    /// zero-width positive-height segment counts as slope +∞ and must sit at
    /// the front.
    pub fn is_concave(&self, rel_tol: f64) -> bool {
        let mut prev = f64::INFINITY;
        for w in self.points.windows(2) {
            let (dx, dy) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            let slope = if dx == 0.0 { f64::INFINITY } else { dy / dx };
            if slope > prev + rel_tol * prev.abs().max(1.0) {
                return false;
            }
            if slope.is_finite() {
                prev = slope;
            }
        }
        true
    }

    /// "x,y" header plus one breakpoint per row at 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y\n");
        for &(x, y) in &self.points {
            out.push_str(&format!("{:.16e},{:.16e}\n", x, y));
        }
        out
    }
}

/// Build the thermo-majorization curve of a system.
pub fn build_curve(s: &ThermoSystem) -> ThermoCurve {
    let order = beta_order(s);
    let mut points = Vec::with_capacity(s.n() + 1);
    points.push((0.0, 0.0));
    let (mut x, mut y) = (0.0, 0.0);
    for &i in order.perm() {
        let (w, p) = (s.weight(i), s.population(i));
        if w == 0.0 && p == 0.0 {
            continue; // invisible level
        }
        x += w;
        y += p;
        points.push((x, y));
    }
    ThermoCurve { points }
}

/// Evaluate `horizontal_distance` on a freshly built curve (the paper's L̃_y).
pub fn horizontal_distance(s: &ThermoSystem, y: f64) -> f64 {
    build_curve(s).horizontal_distance(y)
}

fn check_comparable(a: &ThermoSystem, b: &ThermoSystem, z_tol: f64) -> Result<(ThermoCurve, ThermoCurve)> {
    let (ba, bb) = (a.beta.get(), b.beta.get());
    if (ba - bb).abs() > 1e-12 * ba.max(bb) {
        return Err(ThermoError::BetaMismatch(ba, bb));
    }
    let (ca, cb) = (build_curve(a), build_curve(b));
    let (za, zb) = (ca.z_fin(), cb.z_fin());
    if (za - zb).abs() > z_tol * za.max(zb).max(1.0) {
        return Err(ThermoError::PartitionMismatch(za, zb));
    }
    Ok((ca, cb))
}

/// Minimum of curve(a) − curve(b) over the union of breakpoints, with the x
/// attaining it. Negative margin means `a` fails to thermo-majorize `b`.
pub fn majorization_margin(a: &ThermoSystem, b: &ThermoSystem, z_tol: f64) -> Result<(f64, f64)> {
    let (ca, cb) = check_comparable(a, b, z_tol)?;
    let z = ca.z_fin().min(cb.z_fin());
    let mut min_gap = f64::INFINITY;
    let mut arg = 0.0;
    for &(x, _) in ca.points().iter().chain(cb.points().iter()) {
        let x = x.min(z);
        let gap = ca.value_at(x)? - cb.value_at(x)?;
        if gap < min_gap {
            min_gap = gap;
            arg = x;
        }
    }
    Ok((min_gap, arg))
}

/// Curve comparison at every breakpoint of either system.
///
/// Requires matching β; Hamiltonians may differ but the partition functions
/// must agree within `tol` for a verdict.
pub fn thermo_majorizes(a: &ThermoSystem, b: &ThermoSystem, tol: f64) -> Result<bool> {
    Ok(majorization_margin(a, b, tol)?.0 >= -tol)
}

/// Default comparison tolerance for feasibility verdicts.
pub const DEFAULT_CURVE_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Exact rational re-check
// ---------------------------------------------------------------------------
//
// f64 inputs are dyadic rationals, so the curve comparison of the systems as
// represented can be decided exactly. Used to adjudicate float-level
// disagreements between the curve decision and the LP oracle.

struct ExactCurve {
    points: Vec<(BigRational, BigRational)>,
}

fn big(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite float")
}

fn exact_curve(s: &ThermoSystem) -> ExactCurve {
    // (weight, population) per level; weights of infinite levels are exactly 0.
    let n = s.n();
    let mut occupied_inf: Vec<usize> = Vec::new();
    let mut finite: Vec<usize> = Vec::new();
    for i in 0..n {
        let (w, p) = (s.weight(i), s.population(i));
        if w == 0.0 {
            if p > 0.0 {
                occupied_inf.push(i);
            }
        } else {
            finite.push(i);
        }
    }
    // key = p/w, descending, ties by ascending index (stable sort)
    finite.sort_by(|&a, &b| {
        let ka = big(s.population(a)) / big(s.weight(a));
        let kb = big(s.population(b)) / big(s.weight(b));
        kb.cmp(&ka)
    });
    let mut points = vec![(BigRational::zero(), BigRational::zero())];
    let mut x = BigRational::zero();
    let mut y = BigRational::zero();
    for &i in occupied_inf.iter().chain(finite.iter()) {
        x += big(s.weight(i));
        y += big(s.population(i));
        points.push((x.clone(), y.clone()));
    }
    ExactCurve { points }
}

fn exact_value(c: &ExactCurve, x: &BigRational) -> BigRational {
    let last = c.points.last().unwrap();
    if *x >= last.0 {
        return last.1.clone();
    }
    let hi = c.points.partition_point(|p| p.0 <= *x);
    let (x0, y0) = &c.points[hi - 1];
    if x == x0 {
        return y0.clone();
    }
    let (x1, y1) = &c.points[hi];
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// Exact-rational curve comparison of the systems as represented in f64.
pub fn thermo_majorizes_exact(a: &ThermoSystem, b: &ThermoSystem) -> Result<bool> {
    check_comparable(a, b, 1e-6)?;
    let (ca, cb) = (exact_curve(a), exact_curve(b));
    let zmin = ca.points.last().unwrap().0.clone().min(cb.points.last().unwrap().0.clone());
    let xs: Vec<BigRational> = ca
        .points
        .iter()
        .chain(cb.points.iter())
        .map(|p| p.0.clone().min(zmin.clone()))
        .collect();
    for x in &xs {
        if exact_value(&ca, x) < exact_value(&cb, x) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[allow(unused)]
fn _bigint_is_linked(_: BigInt) {}
