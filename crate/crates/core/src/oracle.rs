//! Independent brute-force verification of the curve decisions: a
//! Gibbs-stochastic feasibility LP solved by a self-contained phase-one
//! simplex, the explicit bath construction realizing a partial level
//! thermalization, and a grid-search transition-work oracle.

use crate::error::{Result, ThermoError};
use crate::system::{DiagonalState, ThermoSystem};
use crate::work::wit_composite;

/// Default dimension cap for the LP oracle.
pub const LP_DIM_CAP: usize = 6;

/// Default feasibility tolerance for the phase-one objective.
pub const LP_TOL: f64 = 1e-8;

const PIVOT_EPS: f64 = 1e-11;
const MAX_PIVOTS: usize = 50_000;

/// Phase-one simplex on `A x = b`, `x >= 0` with one artificial per row and
/// Bland's anti-cycling rule. Feasible iff the optimal artificial mass is at
/// most `tol`.
fn phase_one_feasible(a: &[Vec<f64>], b: &[f64], tol: f64) -> Result<bool> {
    let m = a.len();
    let nv = if m > 0 { a[0].len() } else { 0 };
    let total = nv + m; // structural + artificial columns
    // tableau rows: [A | I | b] with b >= 0
    let mut tab: Vec<Vec<f64>> = Vec::with_capacity(m);
    for (r, row) in a.iter().enumerate() {
        let flip = if b[r] < 0.0 { -1.0 } else { 1.0 };
        let mut t: Vec<f64> = row.iter().map(|&v| flip * v).collect();
        t.resize(total + 1, 0.0);
        t[nv + r] = 1.0;
        t[total] = flip * b[r];
        tab.push(t);
    }
    let mut basis: Vec<usize> = (nv..total).collect();
    // objective row: minimize the sum of artificials; reduced costs start as
    // -(column sums over A), objective value = -(sum b)
    let mut obj = vec![0.0; total + 1];
    for t in &tab {
        for c in 0..=total {
            obj[c] -= t[c];
        }
    }
    for c in nv..total {
        obj[c] = 0.0;
    }
    for _pivot in 0..MAX_PIVOTS {
        // Bland: first improving column
        let entering = (0..total).find(|&c| obj[c] < -PIVOT_EPS);
        let entering = match entering {
            Some(c) => c,
            None => return Ok(-obj[total] <= tol),
        };
        // ratio test, ties by smallest basis index
        let mut leaving: Option<usize> = None;
        let mut best = f64::INFINITY;
        for (r, t) in tab.iter().enumerate() {
            if t[entering] > PIVOT_EPS {
                let ratio = t[total] / t[entering];
                if ratio < best - PIVOT_EPS
                    || (ratio < best + PIVOT_EPS
                        && leaving.map(|l| basis[r] < basis[l]).unwrap_or(true))
                {
                    best = ratio;
                    leaving = Some(r);
                }
            }
        }
        let leaving = match leaving {
            // a zero-cost unbounded ray cannot occur in phase one; treat as stalled
            None => return Err(ThermoError::SimplexStall(_pivot)),
            Some(r) => r,
        };
        // pivot
        let piv = tab[leaving][entering];
        for c in 0..=total {
            tab[leaving][c] /= piv;
        }
        for r in 0..m {
            if r != leaving {
                let f = tab[r][entering];
                if f != 0.0 {
                    for c in 0..=total {
                        tab[r][c] -= f * tab[leaving][c];
                    }
                }
            }
        }
        let f = obj[entering];
        if f != 0.0 {
            for c in 0..=total {
                obj[c] -= f * tab[leaving][c];
            }
        }
        basis[leaving] = entering;
    }
    Err(ThermoError::SimplexStall(MAX_PIVOTS))
}

/// Decide whether some column-stochastic matrix G fixes the Gibbs state of
/// rho's Hamiltonian and maps rho's populations onto sigma. This is the
/// transition-feasibility question answered independently of the curves.
pub fn gibbs_stochastic_feasible(
    rho: &ThermoSystem,
    sigma: &DiagonalState,
    tol: f64,
) -> Result<bool> {
    gibbs_stochastic_feasible_capped(rho, sigma, tol, LP_DIM_CAP)
}

pub fn gibbs_stochastic_feasible_capped(
    rho: &ThermoSystem,
    sigma: &DiagonalState,
    tol: f64,
    dim_cap: usize,
) -> Result<bool> {
    let n = rho.n();
    if n > dim_cap {
        return Err(ThermoError::DimensionCap(n, dim_cap));
    }
    if sigma.len() != n {
        return Err(ThermoError::ShapeMismatch(n, sigma.len()));
    }
    for i in 0..n {
        if !rho.energy(i).is_finite() {
            return Err(ThermoError::InfiniteLevelInSubset(i));
        }
    }
    let z = rho.partition_function();
    let g: Vec<f64> = (0..n).map(|i| rho.weight(i) / z).collect();
    // variables G_ij at column i*n + j
    let rows = 3 * n;
    let mut a = vec![vec![0.0; n * n]; rows];
    let mut b = vec![0.0; rows];
    for j in 0..n {
        // column stochasticity: sum_i G_ij = 1
        for i in 0..n {
            a[j][i * n + j] = 1.0;
        }
        b[j] = 1.0;
    }
    for i in 0..n {
        // Gibbs fixed point: sum_j G_ij g_j = g_i
        for j in 0..n {
            a[n + i][i * n + j] = g[j];
        }
        b[n + i] = g[i];
        // state mapping: sum_j G_ij eta_j = zeta_i
        for j in 0..n {
            a[2 * n + i][i * n + j] = rho.population(j);
        }
        b[2 * n + i] = sigma.population(i);
    }
    phase_one_feasible(&a, &b, tol)
}

/// Size cap on |subset| * b for the explicit bath construction.
pub const BATH_SIZE_CAP: usize = 4096;

/// Realize PLT_subset(a/b) as an explicit thermal operation: append the
/// restricted Gibbs ancilla and a b-level maximally mixed register, apply the
/// energy-conserving swap permutation on the first `a` register slices, and
/// trace the ancillas out.
pub fn plt_via_bath(
    s: &ThermoSystem,
    subset: &[usize],
    a: usize,
    b: usize,
) -> Result<ThermoSystem> {
    if subset.is_empty() {
        return Err(ThermoError::EmptySubset);
    }
    if b == 0 || a > b {
        return Err(ThermoError::InvalidLambda(a as f64 / b as f64));
    }
    if subset.len() * b > BATH_SIZE_CAP {
        return Err(ThermoError::DimensionCap(subset.len() * b, BATH_SIZE_CAP));
    }
    let n = s.n();
    for &i in subset {
        if i >= n {
            return Err(ThermoError::IndexOutOfRange(i, n));
        }
        if !s.energy(i).is_finite() {
            return Err(ThermoError::InfiniteLevelInSubset(i));
        }
    }
    let p = subset.len();
    let z_a: f64 = subset.iter().map(|&i| s.weight(i)).sum();
    // q[r][sa][t]: system level r, ancilla level labeled subset[sa], register t
    let mut q = vec![vec![vec![0.0f64; b]; p]; n];
    for r in 0..n {
        for (sa, &lvl) in subset.iter().enumerate() {
            let cell = s.population(r) * s.weight(lvl) / z_a / b as f64;
            for t in 0..b {
                q[r][sa][t] = cell;
            }
        }
    }
    // swap |r_S, s_A, t> <-> |s_S, r_A, t> for r,s in the subset, t < a;
    // each swapped pair conserves the composite energy E_r + E_s
    for ra in 0..p {
        for sa in (ra + 1)..p {
            let (r_lvl, s_lvl) = (subset[ra], subset[sa]);
            for t in 0..a {
                let tmp = q[r_lvl][sa][t];
                q[r_lvl][sa][t] = q[s_lvl][ra][t];
                q[s_lvl][ra][t] = tmp;
            }
        }
    }
    let pops: Vec<f64> = (0..n)
        .map(|r| q[r].iter().map(|row| row.iter().sum::<f64>()).sum())
        .collect();
    s.with_populations(DiagonalState::from_raw(pops))
}

/// Dimension cap for the grid-search transition oracle.
pub const BRUTE_FORCE_DIM_CAP: usize = 3;

/// Grid-search oracle for the work of transition: evaluate the wit-composite
/// feasibility on a uniform grid over the bisection bracket and return the
/// largest feasible gap.
pub fn brute_force_transition_work(
    rho: &ThermoSystem,
    sigma: &DiagonalState,
    grid: usize,
) -> Result<f64> {
    let n = rho.n();
    if n > BRUTE_FORCE_DIM_CAP {
        return Err(ThermoError::DimensionCap(n, BRUTE_FORCE_DIM_CAP));
    }
    if grid < 2 {
        return Err(ThermoError::IndexOutOfRange(grid, 2));
    }
    let target = rho.with_populations(sigma.clone())?;
    let z = rho.partition_function();
    let w_max = (z.ln() + (n as f64).ln() + 40.0) / rho.beta.get();
    let mut best = None;
    for k in 0..grid {
        let w = -w_max + 2.0 * w_max * k as f64 / (grid - 1) as f64;
        let init = wit_composite(rho, w, 0)?;
        let fin = wit_composite(&target, w, 1)?;
        if crate::curve::thermo_majorizes(&init, &fin, 1e-11)? {
            best = Some(w);
        }
    }
    best.ok_or(ThermoError::BracketFailure(-w_max, w_max, false, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::apply_plt;
    use crate::system::gibbs_state;
    use crate::work::{distillable_work, work_of_transition};

    const LN2: f64 = std::f64::consts::LN_2;

    fn sys(energies: Vec<f64>, pops: Vec<f64>) -> ThermoSystem {
        ThermoSystem::from_parts(energies, pops, 1.0).unwrap()
    }

    #[test]
    fn lp_identity_and_thermalization_are_feasible() {
        let rho = sys(vec![0.0, LN2], vec![0.5, 0.5]);
        assert!(gibbs_stochastic_feasible(&rho, &rho.state, LP_TOL).unwrap());
        let gibbs = gibbs_state(&rho.hamiltonian, rho.beta);
        assert!(gibbs_stochastic_feasible(&rho, &gibbs, LP_TOL).unwrap());
    }

    #[test]
    fn lp_refuses_uphill_transitions() {
        let h = crate::system::Hamiltonian::new(vec![0.0, LN2]).unwrap();
        let b = crate::system::Beta::new(1.0).unwrap();
        let gibbs = ThermoSystem::new(h, gibbs_state(&crate::system::Hamiltonian::new(vec![0.0, LN2]).unwrap(), b), b).unwrap();
        let sigma = DiagonalState::new(vec![0.9, 0.1]).unwrap();
        assert!(!gibbs_stochastic_feasible(&gibbs, &sigma, LP_TOL).unwrap());
    }

    #[test]
    fn lp_agrees_with_curves_on_the_qubit_example() {
        let rho = sys(vec![0.0, LN2], vec![0.5, 0.5]);
        let sigma = DiagonalState::new(vec![0.7, 0.3]).unwrap();
        assert!(gibbs_stochastic_feasible(&rho, &sigma, LP_TOL).unwrap());
        // and the reverse is infeasible
        let back = sys(vec![0.0, LN2], vec![0.7, 0.3]);
        assert!(!gibbs_stochastic_feasible(&back, &DiagonalState::new(vec![0.5, 0.5]).unwrap(), LP_TOL).unwrap());
    }

    #[test]
    fn lp_rejects_oversized_systems() {
        let rho = sys(vec![0.0; 7], vec![1.0 / 7.0; 7]);
        assert!(matches!(
            gibbs_stochastic_feasible(&rho, &rho.state, LP_TOL),
            Err(ThermoError::DimensionCap(7, _))
        ));
    }

    #[test]
    fn bath_construction_matches_the_closed_form() {
        let s = sys(vec![0.0, LN2], vec![0.5, 0.5]);
        // a = 0: identity
        let id = plt_via_bath(&s, &[0, 1], 0, 2).unwrap();
        assert_eq!(id.state.populations(), s.state.populations());
        // a = b: full subset thermalization
        let full = plt_via_bath(&s, &[0, 1], 2, 2).unwrap();
        let plt = apply_plt(&s, &[0, 1], 1.0).unwrap();
        for i in 0..2 {
            assert!((full.population(i) - plt.population(i)).abs() < 1e-12);
        }
        // the derived half-thermalization example
        let half = plt_via_bath(&s, &[0, 1], 1, 2).unwrap();
        assert!((half.population(0) - 7.0 / 12.0).abs() < 1e-12);
        assert!((half.population(1) - 5.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn bath_construction_conserves_population() {
        let s = sys(vec![0.0, 0.3, 0.9, 1.4], vec![0.4, 0.3, 0.2, 0.1]);
        for b in [1usize, 3, 7, 16] {
            for a in 0..=b {
                let out = plt_via_bath(&s, &[1, 2, 3], a, b).unwrap();
                let total: f64 = out.state.populations().iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
                let plt = apply_plt(&s, &[1, 2, 3], a as f64 / b as f64).unwrap();
                for i in 0..4 {
                    assert!((out.population(i) - plt.population(i)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn brute_force_agrees_with_bisection() {
        let rho = sys(vec![0.0, 0.0], vec![1.0, 0.0]);
        let gibbs = gibbs_state(&rho.hamiltonian, rho.beta);
        let grid = 4001;
        let w = brute_force_transition_work(&rho, &gibbs, grid).unwrap();
        let z = rho.partition_function();
        let step = 2.0 * (z.ln() + 2f64.ln() + 40.0) / (grid - 1) as f64;
        assert!((w - LN2).abs() <= step, "w = {w}, step = {step}");
        assert!((w - distillable_work(&rho, 0.0).unwrap()).abs() <= step);
        let w_bis = work_of_transition(&rho, &gibbs, 1e-7).unwrap();
        assert!((w - w_bis).abs() <= step);
        // identity within one grid step
        let w_id = brute_force_transition_work(&rho, &rho.state, grid).unwrap();
        assert!(w_id.abs() <= step);
        // refinement consistency
        let w2 = brute_force_transition_work(&rho, &gibbs, 2 * grid).unwrap();
        assert!((w2 - w).abs() <= step);
    }
}
