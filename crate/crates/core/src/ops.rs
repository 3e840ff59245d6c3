//! Coarse operations: partial level thermalizations, level transformations,
//! the two-level isothermal macro (PITR) with its step-resolved work
//! distribution, points flows, and sequential protocol application.
//!
//! Work values are gain-positive throughout: raising an occupied level costs
//! (negative work), lowering one yields (positive work).

use crate::error::{Result, ThermoError};
use crate::exec::{chunked_triple_sum, ExecMode};
use crate::system::{
    beta_order, ext_from_json, ext_to_json, gibbs_state, DiagonalState, ExtRealJson, Hamiltonian,
    ThermoSystem,
};
use crate::workdist::{WorkBranch, WorkDistribution};
use serde::{Deserialize, Serialize};

/// Relative tolerance for recognizing a non-elbow (equal β-keys).
pub const NON_ELBOW_TOL: f64 = 1e-9;

/// A single coarse operation. Indices are 0-based.
#[derive(Debug, Clone, PartialEq)]
pub enum CoarseOp {
    Plt { subset: Vec<usize>, lambda: f64 },
    Lt { shifts: Vec<f64> },
    AppendThermalQubit { gap: f64 },
    DiscardLevels { factor: Vec<usize> },
    Pitr { j: usize, k: usize, kappa: f64, steps: u64 },
}

/// An ordered sequence of coarse operations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Protocol {
    pub ops: Vec<CoarseOp>,
    pub label: String,
}

impl Protocol {
    pub fn new(label: impl Into<String>) -> Self {
        Protocol { ops: Vec::new(), label: label.into() }
    }

    pub fn plt_count(&self) -> usize {
        self.ops.iter().filter(|op| matches!(op, CoarseOp::Plt { .. })).count()
    }

    pub fn uses_infinite_levels(&self) -> bool {
        self.ops.iter().any(|op| match op {
            CoarseOp::Pitr { kappa, .. } => !kappa.is_finite(),
            CoarseOp::Lt { shifts } => shifts.iter().any(|h| !h.is_finite()),
            _ => false,
        })
    }
}

fn check_index(i: usize, n: usize) -> Result<()> {
    if i >= n {
        return Err(ThermoError::IndexOutOfRange(i, n));
    }
    Ok(())
}

/// Partial level thermalization over `subset` with mixing weight `lambda`.
///
/// Populations on the subset move λ of the way toward the restricted Gibbs
/// distribution; everything else is untouched. Total population is conserved
/// exactly.
pub fn apply_plt(s: &ThermoSystem, subset: &[usize], lambda: f64) -> Result<ThermoSystem> {
    if !(0.0..=1.0).contains(&lambda) || lambda.is_nan() {
        return Err(ThermoError::InvalidLambda(lambda));
    }
    if subset.is_empty() {
        return Err(ThermoError::EmptySubset);
    }
    let n = s.n();
    let mut w_total = 0.0;
    let mut p_total = 0.0;
    for &i in subset {
        check_index(i, n)?;
        if !s.energy(i).is_finite() {
            return Err(ThermoError::InfiniteLevelInSubset(i));
        }
        w_total += s.weight(i);
        p_total += s.population(i);
    }
    let mut pops = s.state.populations().to_vec();
    for &i in subset {
        pops[i] = (1.0 - lambda) * pops[i] + lambda * s.weight(i) / w_total * p_total;
    }
    s.with_populations(DiagonalState::from_raw(pops))
}

fn shifted_energies(s: &ThermoSystem, shifts: &[f64]) -> Result<Vec<f64>> {
    if shifts.len() != s.n() {
        return Err(ThermoError::ShapeMismatch(s.n(), shifts.len()));
    }
    let mut energies = Vec::with_capacity(s.n());
    for (i, &h) in shifts.iter().enumerate() {
        let e = s.energy(i);
        if h.is_nan() || h == f64::NEG_INFINITY || (!e.is_finite() && h == f64::NEG_INFINITY) {
            return Err(ThermoError::UndefinedShift(i));
        }
        energies.push(e + h);
    }
    Ok(energies)
}

/// Level transformation: shift energies, keep populations. Returns the new
/// system and the worst-case work −max over occupied shifts (−∞ when an
/// occupied level is raised to +∞).
pub fn apply_lt(s: &ThermoSystem, shifts: &[f64]) -> Result<(ThermoSystem, f64)> {
    let energies = shifted_energies(s, shifts)?;
    let mut max_occupied = f64::NEG_INFINITY;
    for (i, &h) in shifts.iter().enumerate() {
        if s.population(i) > 0.0 && h > max_occupied {
            max_occupied = h;
        }
    }
    let work = if max_occupied == f64::NEG_INFINITY { 0.0 } else { -max_occupied };
    let sys = ThermoSystem::new(Hamiltonian::new(energies)?, s.state.clone(), s.beta)?;
    Ok((sys, work))
}

/// Per-level branch view of a level transformation: each occupied level i is
/// a branch of probability η_i and work −h_i.
pub fn lt_work_distribution(s: &ThermoSystem, shifts: &[f64]) -> Result<WorkDistribution> {
    shifted_energies(s, shifts)?; // validation only
    let branches = shifts
        .iter()
        .enumerate()
        .filter(|&(i, _)| s.population(i) > 0.0)
        .map(|(i, &h)| WorkBranch { prob: s.population(i), work: -h })
        .collect();
    Ok(WorkDistribution::from_branches(branches))
}

struct PitrSetup {
    w_j: f64,
    w_k: f64,
    /// Common key of the pre-thermalized pair (the constant C).
    c: f64,
    eta_tilde_j: f64,
}

fn pitr_setup(s: &ThermoSystem, j: usize, k: usize, kappa: f64) -> Result<PitrSetup> {
    let n = s.n();
    check_index(j, n)?;
    check_index(k, n)?;
    // The raised level must be finite. The lowered level may start at
    // infinite energy only while unoccupied (this is how a points flow
    // rematerializes a parked level).
    let k_ok = s.energy(k).is_finite() || s.population(k) == 0.0;
    if j == k || !s.energy(j).is_finite() || !k_ok {
        return Err(ThermoError::InvalidPitrPair(j, k));
    }
    if kappa.is_nan() || kappa < 0.0 {
        return Err(ThermoError::InvalidKappa(kappa));
    }
    let (w_j, w_k) = (s.weight(j), s.weight(k));
    let pair_pop = s.population(j) + s.population(k);
    let c = pair_pop / (w_j + w_k);
    Ok(PitrSetup { w_j, w_k, c, eta_tilde_j: c * w_j })
}

/// Closed-form endpoint of PITR_{j,k}(κ): raise level j by κ while keeping
/// the pair in mutual equilibrium, lowering level k to conserve the partition
/// function. A full two-level thermalization is folded in up front when the
/// pair is not already in the Gibbs ratio. κ = +∞ drains j entirely.
pub fn pitr_final_state(s: &ThermoSystem, j: usize, k: usize, kappa: f64) -> Result<ThermoSystem> {
    let p = pitr_setup(s, j, k, kappa)?;
    let beta = s.beta.get();
    let fade = if kappa.is_finite() { (-beta * kappa).exp() } else { 0.0 };
    let mut pops = s.state.populations().to_vec();
    let mut energies = s.hamiltonian.energies().to_vec();
    let eta_tilde_k = p.c * p.w_k;
    pops[j] = p.eta_tilde_j * fade;
    pops[k] = eta_tilde_k + (1.0 - fade) * p.eta_tilde_j;
    energies[j] = if kappa.is_finite() { s.energy(j) + kappa } else { f64::INFINITY };
    energies[k] = -(p.w_k + p.w_j * (1.0 - fade)).ln() / beta;
    Ok(ThermoSystem::new(
        Hamiltonian::new(energies)?,
        DiagonalState::from_raw(pops),
        s.beta,
    )?)
}

/// Mean, variance and worst case of the t-step PITR work distribution,
/// computed by exact summation over steps with a fixed chunked order.
///
/// For κ = +∞ the raise target is reparametrized as κ_eff = ln(max(t,2))/β so
/// the level climbs with the step count.
pub fn pitr_work_stats(
    s: &ThermoSystem,
    j: usize,
    k: usize,
    kappa: f64,
    steps: u64,
    mode: ExecMode,
) -> Result<(f64, f64, f64)> {
    let p = pitr_setup(s, j, k, kappa)?;
    let beta = s.beta.get();
    let t = steps.max(1);
    let kappa_eff = if kappa.is_finite() { kappa } else { ((t.max(2)) as f64).ln() / beta };
    if p.c == 0.0 || kappa_eff == 0.0 {
        return Ok((0.0, 0.0, 0.0));
    }
    let eps = kappa_eff / t as f64;
    let step = |r0: usize| {
        // r0 = r − 1: state before step r
        let r = r0 as f64;
        let fade_pre = (-beta * r * eps).exp();
        let fade_post = (-beta * (r + 1.0) * eps).exp();
        let wj_pre = p.w_j * fade_pre;
        let wk_pre = p.w_k + p.w_j * (1.0 - fade_pre);
        let wk_post = p.w_k + p.w_j * (1.0 - fade_post);
        let p_j = p.c * wj_pre;
        let p_k = p.c * wk_pre;
        let gain_k = if wk_pre > 0.0 { (wk_post / wk_pre).ln() / beta } else { 0.0 };
        let mean = -eps * p_j + gain_k * p_k;
        let second = eps * eps * p_j + gain_k * gain_k * p_k;
        (mean, second - mean * mean, -eps)
    };
    Ok(chunked_triple_sum(t as usize, mode, step))
}

/// Exact branch distribution for a small step count, by per-step convolution.
fn pitr_branch_distribution(
    s: &ThermoSystem,
    j: usize,
    k: usize,
    kappa: f64,
    steps: u64,
) -> Result<WorkDistribution> {
    let p = pitr_setup(s, j, k, kappa)?;
    let beta = s.beta.get();
    let t = steps.max(1);
    let kappa_eff = if kappa.is_finite() { kappa } else { ((t.max(2)) as f64).ln() / beta };
    if p.c == 0.0 || kappa_eff == 0.0 {
        return Ok(WorkDistribution::unit());
    }
    let eps = kappa_eff / t as f64;
    let mut dist = WorkDistribution::unit();
    for r0 in 0..t {
        let r = r0 as f64;
        let fade_pre = (-beta * r * eps).exp();
        let fade_post = (-beta * (r + 1.0) * eps).exp();
        let wj_pre = p.w_j * fade_pre;
        let wk_pre = p.w_k + p.w_j * (1.0 - fade_pre);
        let wk_post = p.w_k + p.w_j * (1.0 - fade_post);
        let p_j = p.c * wj_pre;
        let p_k = p.c * wk_pre;
        let gain_k = if wk_pre > 0.0 { (wk_post / wk_pre).ln() / beta } else { 0.0 };
        let dist_r = WorkDistribution::from_branches(vec![
            WorkBranch { prob: p_j, work: -eps },
            WorkBranch { prob: p_k, work: gain_k },
            WorkBranch { prob: (1.0 - p_j - p_k).max(0.0), work: 0.0 },
        ]);
        dist = dist.convolve(&dist_r);
    }
    Ok(dist)
}

/// Number of steps up to which `apply_pitr` keeps an explicit branch list.
const PITR_BRANCH_STEPS: u64 = 12;

/// PITR endpoint plus the t-step work distribution. The final state does not
/// depend on `steps`; only the distribution does.
pub fn apply_pitr(
    s: &ThermoSystem,
    j: usize,
    k: usize,
    kappa: f64,
    steps: u64,
) -> Result<(ThermoSystem, WorkDistribution)> {
    let out = pitr_final_state(s, j, k, kappa)?;
    let dist = if steps <= PITR_BRANCH_STEPS {
        pitr_branch_distribution(s, j, k, kappa, steps)?
    } else {
        let (mean, variance, worst_case) = pitr_work_stats(s, j, k, kappa, steps, ExecMode::auto())?;
        WorkDistribution::Summary(crate::workdist::WorkSummary { mean, variance, worst_case })
    };
    Ok((out, dist))
}

fn require_non_elbow(s: &ThermoSystem, j: usize, k: usize) -> Result<()> {
    let (kj, kk) = (s.key(j), s.key(k));
    if (kj - kk).abs() > NON_ELBOW_TOL * kj.abs().max(kk.abs()).max(1e-300) {
        return Err(ThermoError::NotANonElbow(j, k, kj, kk));
    }
    Ok(())
}

/// Relocate the non-elbow formed by (j, k) into the segment owned by level l,
/// allotting `weight_to_j` of l's Gibbs weight to level j. The curve is
/// preserved as a function; level j passes through infinite energy.
pub fn exact_points_flow(
    s: &ThermoSystem,
    j: usize,
    k: usize,
    l: usize,
    weight_to_j: f64,
) -> Result<ThermoSystem> {
    Ok(exact_points_flow_ops(s, j, k, l, weight_to_j)?.0)
}

pub(crate) fn exact_points_flow_ops(
    s: &ThermoSystem,
    j: usize,
    k: usize,
    l: usize,
    weight_to_j: f64,
) -> Result<(ThermoSystem, Vec<CoarseOp>)> {
    let n = s.n();
    check_index(l, n)?;
    require_non_elbow(s, j, k)?;
    if l == j || l == k || !s.energy(l).is_finite() {
        return Err(ThermoError::InvalidPitrPair(l, j));
    }
    let w_l = s.weight(l);
    if !(0.0..=w_l).contains(&weight_to_j) {
        return Err(ThermoError::OutOfDomain(weight_to_j, w_l));
    }
    let mut ops = vec![CoarseOp::Pitr { j, k, kappa: f64::INFINITY, steps: 1 }];
    let mut out = pitr_final_state(s, j, k, f64::INFINITY)?;
    if weight_to_j > 0.0 {
        let kappa = if weight_to_j >= w_l {
            f64::INFINITY
        } else {
            -(1.0 - weight_to_j / w_l).ln() / s.beta.get()
        };
        out = pitr_final_state(&out, l, j, kappa)?;
        ops.push(CoarseOp::Pitr { j: l, k: j, kappa, steps: 1 });
    }
    Ok((out, ops))
}

/// Move the non-elbow formed by (j, k) to `target_x`, crossing at most one
/// elbow, without any energy exceeding `e_cap`. Returns the flowed system and
/// an upper bound on the curve deformation; the bound shrinks as `e_cap`
/// grows.
pub fn approx_points_flow(
    s: &ThermoSystem,
    j: usize,
    k: usize,
    e_cap: f64,
    target_x: f64,
) -> Result<(ThermoSystem, f64)> {
    require_non_elbow(s, j, k)?;
    let cap_floor = s.energy(j).max(s.energy(k));
    if !(e_cap > cap_floor) {
        return Err(ThermoError::CapTooLow(e_cap, cap_floor));
    }
    let order = beta_order(s);
    let pos_of = |idx: usize| order.perm().iter().position(|&p| p == idx).unwrap();
    let (pj, pk) = (pos_of(j), pos_of(k));
    let (first_pos, second_pos) = (pj.min(pk), pj.max(pk));
    if second_pos != first_pos + 1 {
        return Err(ThermoError::NotANonElbow(j, k, s.key(j), s.key(k)));
    }
    // cumulative x positions along the order
    let xs: Vec<f64> = {
        let mut acc = 0.0;
        let mut v = vec![0.0];
        for &i in order.perm() {
            acc += s.weight(i);
            v.push(acc);
        }
        v
    };
    let (span_lo, span_hi) = (xs[first_pos], xs[second_pos + 1]);
    let beta = s.beta.get();
    if target_x >= span_lo && target_x <= span_hi {
        // in-segment slide: pure PITR, no deformation
        let first = order.at(first_pos);
        let second = order.at(second_pos);
        let want_first = if first < second { target_x - span_lo } else { span_hi - target_x };
        let out = slide_pair(s, first, second, want_first, beta)?;
        return Ok((out, 0.0));
    }
    // one-elbow crossing
    let (raised, partner, neighbor_pos) = if target_x > span_hi {
        let np = second_pos + 1;
        if np >= order.len() {
            return Err(ThermoError::OutOfDomain(target_x, xs[order.len()]));
        }
        (order.at(second_pos), order.at(first_pos), np)
    } else {
        if first_pos == 0 {
            return Err(ThermoError::OutOfDomain(target_x, 0.0));
        }
        (order.at(first_pos), order.at(second_pos), first_pos - 1)
    };
    let neighbor = order.at(neighbor_pos);
    if !s.energy(neighbor).is_finite() {
        return Err(ThermoError::InvalidPitrPair(neighbor, raised));
    }
    let (nb_lo, nb_hi) = (xs[neighbor_pos], xs[neighbor_pos + 1]);
    if !(target_x >= nb_lo - 1e-12 && target_x <= nb_hi + 1e-12) {
        return Err(ThermoError::OutOfDomain(target_x, nb_hi));
    }
    // stage 1: raise to the cap, sliding the breakpoint against the elbow
    let st1 = pitr_final_state(s, raised, partner, e_cap - s.energy(raised))?;
    // stage 2: thermalize across the crossed elbow; the curve flattens there
    // by at most the raised level's residual weight times the key gap
    let key_gap = (st1.key(raised) - st1.key(neighbor)).abs();
    let bound = st1.weight(raised) * key_gap;
    let st2 = apply_plt(&st1, &[raised, neighbor], 1.0)?;
    // stage 3: slide the new non-elbow to the target, using spans recomputed
    // on the current state
    let order2 = beta_order(&st2);
    let pos_raised = order2.perm().iter().position(|&p| p == raised).unwrap();
    let pos_nb = order2.perm().iter().position(|&p| p == neighbor).unwrap();
    let lead = pos_raised.min(pos_nb);
    if pos_raised.abs_diff(pos_nb) != 1 {
        return Err(ThermoError::SynthesisInternal("crossed pair not adjacent".into()));
    }
    let lo2: f64 = order2.perm()[..lead].iter().map(|&i| st2.weight(i)).sum();
    let hi2 = lo2 + st2.weight(raised) + st2.weight(neighbor);
    if !(target_x >= lo2 - 1e-12 && target_x <= hi2 + 1e-12) {
        return Err(ThermoError::OutOfDomain(target_x, hi2));
    }
    let want_raised = if raised < neighbor { target_x - lo2 } else { hi2 - target_x };
    let out = slide_pair(&st2, raised, neighbor, want_raised.max(0.0), st2.beta.get())?;
    if out.hamiltonian.energies().iter().any(|&e| e.is_finite() && e > e_cap + 1e-9) {
        return Err(ThermoError::CapTooLow(e_cap, cap_floor));
    }
    Ok((out, bound))
}

/// Slide the boundary inside a two-level Gibbs-ratio pair so that `first`
/// holds exactly `want_first` of the combined weight.
fn slide_pair(
    s: &ThermoSystem,
    first: usize,
    second: usize,
    want_first: f64,
    beta: f64,
) -> Result<ThermoSystem> {
    let (w_f, w_s) = (s.weight(first), s.weight(second));
    let total = w_f + w_s;
    let want = want_first.clamp(0.0, total);
    if (want - w_f).abs() <= 1e-15 * total {
        return Ok(s.clone());
    }
    if want < w_f {
        // shrink first: raise it
        let kappa = if want == 0.0 { f64::INFINITY } else { -(want / w_f).ln() / beta };
        pitr_final_state(s, first, second, kappa)
    } else {
        // grow first at second's expense
        let take = want - w_f;
        let kappa = if take >= w_s { f64::INFINITY } else { -(1.0 - take / w_s).ln() / beta };
        pitr_final_state(s, second, first, kappa)
    }
}

/// Gibbs qubit with level energies {0, gap}.
pub fn thermal_qubit(gap: f64, beta: crate::system::Beta) -> Result<ThermoSystem> {
    if !(gap > 0.0) || !gap.is_finite() {
        return Err(ThermoError::InvalidGap(gap));
    }
    let h = Hamiltonian::new(vec![0.0, gap])?;
    let g = gibbs_state(&h, beta);
    ThermoSystem::new(h, g, beta)
}

const DISCARD_TOL: f64 = 1e-9;

fn apply_discard(s: &ThermoSystem, factor: &[usize]) -> Result<ThermoSystem> {
    let n = s.n();
    let d = factor.len();
    let trailing: Vec<usize> = (0..d).collect();
    if d == 0 || factor != trailing.as_slice() || n % d != 0 {
        return Err(ThermoError::BadDiscardFactor(factor.to_vec(), n));
    }
    let m = n / d;
    // energy structure: E[i*d + a] = E_sys[i] + E_anc[a] with E_anc[0] = 0
    if !s.energy(0).is_finite() {
        return Err(ThermoError::BadDiscardFactor(factor.to_vec(), n));
    }
    let e_sys: Vec<f64> = (0..m).map(|i| s.energy(i * d)).collect();
    let e_anc: Vec<f64> = (0..d).map(|a| s.energy(a) - s.energy(0)).collect();
    for i in 0..m {
        for a in 0..d {
            let actual = s.energy(i * d + a);
            let expected = e_sys[i] + e_anc[a];
            let ok = if expected.is_finite() {
                (actual - expected).abs() <= DISCARD_TOL * expected.abs().max(1.0)
            } else {
                !actual.is_finite()
            };
            if !ok {
                return Err(ThermoError::BadDiscardFactor(factor.to_vec(), n));
            }
        }
    }
    let p_sys: Vec<f64> = (0..m).map(|i| (0..d).map(|a| s.population(i * d + a)).sum()).collect();
    let p_anc: Vec<f64> = (0..d).map(|a| (0..m).map(|i| s.population(i * d + a)).sum()).collect();
    let mut max_dev: f64 = 0.0;
    for i in 0..m {
        for a in 0..d {
            max_dev = max_dev.max((s.population(i * d + a) - p_sys[i] * p_anc[a]).abs());
        }
    }
    if max_dev > DISCARD_TOL {
        return Err(ThermoError::CorrelatedDiscard(max_dev));
    }
    Ok(ThermoSystem::new(
        Hamiltonian::new(e_sys)?,
        DiagonalState::from_raw(p_sys),
        s.beta,
    )?)
}

/// Apply one coarse operation, returning the new system and the op's work
/// distribution. Free operations (PLT, PITR, append, discard) report the
/// zero-work ledger; the PITR t-step ledger nets to zero in the slow limit.
pub fn apply_op(s: &ThermoSystem, op: &CoarseOp) -> Result<(ThermoSystem, WorkDistribution)> {
    match op {
        CoarseOp::Plt { subset, lambda } => {
            Ok((apply_plt(s, subset, *lambda)?, WorkDistribution::unit()))
        }
        CoarseOp::Lt { shifts } => {
            let dist = lt_work_distribution(s, shifts)?;
            let (sys, _) = apply_lt(s, shifts)?;
            Ok((sys, dist))
        }
        CoarseOp::AppendThermalQubit { gap } => {
            let qubit = thermal_qubit(*gap, s.beta)?;
            Ok((s.tensor(&qubit)?, WorkDistribution::unit()))
        }
        CoarseOp::DiscardLevels { factor } => {
            Ok((apply_discard(s, factor)?, WorkDistribution::unit()))
        }
        CoarseOp::Pitr { j, k, kappa, .. } => {
            Ok((pitr_final_state(s, *j, *k, *kappa)?, WorkDistribution::unit()))
        }
    }
}

/// Fold a protocol over a system left to right. Returns the final system, the
/// convolved work distribution, and the trace of snapshots (initial state
/// first, then one per op).
pub fn apply_protocol(
    s: &ThermoSystem,
    protocol: &Protocol,
) -> Result<(ThermoSystem, WorkDistribution, Vec<ThermoSystem>)> {
    let mut sys = s.clone();
    let mut dist = WorkDistribution::unit();
    let mut trace = vec![sys.clone()];
    for (step, op) in protocol.ops.iter().enumerate() {
        let (next, op_dist) = apply_op(&sys, op).map_err(|e| match e {
            ThermoError::IndexOutOfRange(_, _) | ThermoError::ShapeMismatch(_, _) => {
                ThermoError::ProtocolDimension(step, sys.n())
            }
            other => other,
        })?;
        dist = dist.convolve(&op_dist);
        sys = next;
        trace.push(sys.clone());
    }
    Ok((sys, dist, trace))
}

// ---------------------------------------------------------------------------
// Protocol JSON
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum OpJson {
    Plt { subset: Vec<usize>, lambda: f64 },
    Lt { shifts: Vec<ExtRealJson> },
    Append { gap: f64 },
    Discard { factor: Vec<usize> },
    Pitr { j: usize, k: usize, kappa: ExtRealJson, steps: u64 },
}

#[derive(Serialize, Deserialize)]
struct ProtocolJson {
    ops: Vec<OpJson>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    label: String,
}

impl Protocol {
    pub fn to_json(&self) -> serde_json::Value {
        let ops = self
            .ops
            .iter()
            .map(|op| match op {
                CoarseOp::Plt { subset, lambda } => {
                    OpJson::Plt { subset: subset.clone(), lambda: *lambda }
                }
                CoarseOp::Lt { shifts } => {
                    OpJson::Lt { shifts: shifts.iter().map(|&h| ext_to_json(h)).collect() }
                }
                CoarseOp::AppendThermalQubit { gap } => OpJson::Append { gap: *gap },
                CoarseOp::DiscardLevels { factor } => OpJson::Discard { factor: factor.clone() },
                CoarseOp::Pitr { j, k, kappa, steps } => {
                    OpJson::Pitr { j: *j, k: *k, kappa: ext_to_json(*kappa), steps: *steps }
                }
            })
            .collect();
        serde_json::to_value(ProtocolJson { ops, label: self.label.clone() })
            .expect("protocol serialization cannot fail")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let raw: ProtocolJson =
            serde_json::from_value(v.clone()).map_err(|e| ThermoError::Json(e.to_string()))?;
        let mut ops = Vec::with_capacity(raw.ops.len());
        for op in &raw.ops {
            ops.push(match op {
                OpJson::Plt { subset, lambda } => {
                    CoarseOp::Plt { subset: subset.clone(), lambda: *lambda }
                }
                OpJson::Lt { shifts } => CoarseOp::Lt {
                    shifts: shifts.iter().map(ext_from_json).collect::<Result<Vec<_>>>()?,
                },
                OpJson::Append { gap } => CoarseOp::AppendThermalQubit { gap: *gap },
                OpJson::Discard { factor } => CoarseOp::DiscardLevels { factor: factor.clone() },
                OpJson::Pitr { j, k, kappa, steps } => CoarseOp::Pitr {
                    j: *j,
                    k: *k,
                    kappa: ext_from_json(kappa)?,
                    steps: *steps,
                },
            });
        }
        Ok(Protocol { ops, label: raw.label })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let v: serde_json::Value =
            serde_json::from_str(s).map_err(|e| ThermoError::Json(e.to_string()))?;
        Protocol::from_json(&v)
    }
}

/// Snapshot trace as a JSON array of system objects.
pub fn trace_to_json(trace: &[ThermoSystem]) -> serde_json::Value {
    serde_json::Value::Array(trace.iter().map(|s| s.to_json()).collect())
}

/// Compile-by-simulation helper: every emitted op is applied to a live
/// system, so parameters computed downstream see the state they will act on.
pub(crate) struct Builder {
    pub sys: ThermoSystem,
    pub ops: Vec<CoarseOp>,
}

impl Builder {
    pub fn new(sys: ThermoSystem) -> Self {
        Builder { sys, ops: Vec::new() }
    }

    pub fn emit(&mut self, op: CoarseOp) -> Result<()> {
        let (next, _) = apply_op(&self.sys, &op)?;
        self.sys = next;
        self.ops.push(op);
        Ok(())
    }

    pub fn pitr(&mut self, j: usize, k: usize, kappa: f64) -> Result<()> {
        self.emit(CoarseOp::Pitr { j, k, kappa, steps: 1 })
    }

    pub fn plt(&mut self, subset: Vec<usize>, lambda: f64) -> Result<()> {
        if lambda <= 1e-15 {
            return Ok(());
        }
        self.emit(CoarseOp::Plt { subset, lambda: lambda.min(1.0) })
    }

    pub fn into_protocol(self, label: &str) -> (Protocol, ThermoSystem) {
        (Protocol { ops: self.ops, label: label.to_string() }, self.sys)
    }

    /// Redistribute the Gibbs weights of the listed mutually-thermal levels
    /// to `targets` exactly: drain everything into a host, then carve each
    /// level back at its target weight. Levels absent from `levels` are
    /// untouched; `targets` must sum to the levels' current total weight.
    pub fn carve_collinear(&mut self, levels: &[usize], targets: &[f64]) -> Result<()> {
        debug_assert_eq!(levels.len(), targets.len());
        let host_pos = targets
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .ok_or(ThermoError::EmptySubset)?;
        let host = levels[host_pos];
        let already = levels
            .iter()
            .zip(targets)
            .all(|(&i, &w)| (self.sys.weight(i) - w).abs() <= 1e-15 * w.max(1.0));
        if already {
            return Ok(());
        }
        for &i in levels {
            if i != host && self.sys.weight(i) > 0.0 {
                self.pitr(i, host, f64::INFINITY)?;
            }
        }
        let beta = self.sys.beta.get();
        for (pos, &i) in levels.iter().enumerate() {
            if i == host || targets[pos] <= 0.0 {
                continue;
            }
            let w_host = self.sys.weight(host);
            if targets[pos] >= w_host {
                return Err(ThermoError::SynthesisInternal("carve exceeds host weight".into()));
            }
            let kappa = -(1.0 - targets[pos] / w_host).ln() / beta;
            self.pitr(host, i, kappa)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curve::{build_curve, thermo_majorizes};

    const LN2: f64 = std::f64::consts::LN_2;

    fn sys(energies: Vec<f64>, pops: Vec<f64>) -> ThermoSystem {
        ThermoSystem::from_parts(energies, pops, 1.0).unwrap()
    }

    #[test]
    fn plt_examples() {
        let s = sys(vec![0.0, LN2], vec![0.5, 0.5]);
        let id = apply_plt(&s, &[0, 1], 0.0).unwrap();
        assert_eq!(id.state.populations(), s.state.populations());
        let full = apply_plt(&s, &[0, 1], 1.0).unwrap();
        assert!((full.population(0) - 2.0 / 3.0).abs() < 1e-15);
        let half = apply_plt(&s, &[0, 1], 0.5).unwrap();
        assert!((half.population(0) - 7.0 / 12.0).abs() < 1e-15);
        assert!((half.population(1) - 5.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn plt_rejects_bad_inputs() {
        let s = sys(vec![0.0, f64::INFINITY], vec![1.0, 0.0]);
        assert!(matches!(apply_plt(&s, &[0, 1], 0.5), Err(ThermoError::InfiniteLevelInSubset(1))));
        assert!(matches!(apply_plt(&s, &[0], 1.5), Err(ThermoError::InvalidLambda(_))));
        assert!(matches!(apply_plt(&s, &[], 0.5), Err(ThermoError::EmptySubset)));
    }

    #[test]
    fn plt_conserves_and_mixes_convexly() {
        let s = sys(vec![0.0, 0.3, 1.1], vec![0.6, 0.1, 0.3]);
        let lam = 0.37;
        let out = apply_plt(&s, &[0, 2], lam).unwrap();
        let total: f64 = out.state.populations().iter().sum();
        assert!((total - 1.0).abs() < 1e-14);
        let full = apply_plt(&s, &[0, 2], 1.0).unwrap();
        for i in 0..3 {
            let expect = (1.0 - lam) * s.population(i) + lam * full.population(i);
            assert!((out.population(i) - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn lt_examples() {
        let s = sys(vec![0.0, LN2], vec![0.5, 0.5]);
        let (same, w) = apply_lt(&s, &[0.0, 0.0]).unwrap();
        assert_eq!(w, 0.0);
        assert_eq!(same.hamiltonian.energies(), s.hamiltonian.energies());
        let pure = sys(vec![0.0, LN2], vec![1.0, 0.0]);
        let (_, w) = apply_lt(&pure, &[0.0, 100.0]).unwrap();
        assert_eq!(w, 0.0);
        let (_, w) = apply_lt(&s, &[0.2, 0.5]).unwrap();
        assert!((w + 0.5).abs() < 1e-15);
    }

    #[test]
    fn lt_work_distribution_examples() {
        let s = sys(vec![0.0, 0.0], vec![0.5, 0.5]);
        let d = lt_work_distribution(&s, &[0.7, 0.7]).unwrap();
        let br = d.branches().unwrap();
        assert_eq!(br.len(), 1);
        assert!((br[0].work + 0.7).abs() < 1e-15);
        let s = sys(vec![0.0, 0.0], vec![0.9, 0.1]);
        let d = lt_work_distribution(&s, &[0.0, 3.0]).unwrap();
        let br = d.branches().unwrap();
        assert_eq!(br.len(), 2);
        assert!((br[0].prob - 0.1).abs() < 1e-15 && (br[0].work + 3.0).abs() < 1e-15);
        // epsilon mass raised to infinity costs unboundedly
        let eps = 0.05;
        let s = sys(vec![0.0, 0.0], vec![1.0 - eps, eps]);
        let d = lt_work_distribution(&s, &[0.0, f64::INFINITY]).unwrap();
        assert_eq!(d.worst_case(), f64::NEG_INFINITY);
        let br = d.branches().unwrap();
        assert!((br[0].prob - eps).abs() < 1e-15);
    }

    #[test]
    fn pitr_closed_form_example() {
        let s = sys(vec![0.0, 0.0], vec![0.5, 0.5]);
        let (out, _) = apply_pitr(&s, 0, 1, LN2, 4).unwrap();
        assert!((out.population(0) - 0.25).abs() < 1e-15);
        assert!((out.population(1) - 0.75).abs() < 1e-15);
        assert!((out.energy(0) - LN2).abs() < 1e-15);
        assert!((out.energy(1) + 1.5f64.ln()).abs() < 1e-15);
        assert!((out.partition_function() - 2.0).abs() < 1e-14);
        assert!((out.key(0) - 0.5).abs() < 1e-14 && (out.key(1) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn pitr_zero_kappa_is_pair_thermalization() {
        let s = sys(vec![0.0, LN2], vec![0.9, 0.1]);
        let (out, _) = apply_pitr(&s, 0, 1, 0.0, 1).unwrap();
        let plt = apply_plt(&s, &[0, 1], 1.0).unwrap();
        assert!((out.population(0) - plt.population(0)).abs() < 1e-15);
        assert_eq!(out.hamiltonian.energies(), s.hamiltonian.energies());
    }

    #[test]
    fn pitr_final_state_is_step_independent() {
        let s = sys(vec![0.1, 0.8, 0.4], vec![0.5, 0.2, 0.3]);
        let (a, _) = apply_pitr(&s, 0, 2, 0.7, 1).unwrap();
        let (b, _) = apply_pitr(&s, 0, 2, 0.7, 1000).unwrap();
        for i in 0..3 {
            assert!((a.population(i) - b.population(i)).abs() < 1e-12);
            assert!((a.energy(i) - b.energy(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn pitr_work_concentrates_with_steps() {
        let s = sys(vec![0.0, 0.0], vec![0.5, 0.5]);
        let (m_small, v_small, _) = pitr_work_stats(&s, 0, 1, LN2, 100, ExecMode::Sequential).unwrap();
        let (m_big, v_big, worst) = pitr_work_stats(&s, 0, 1, LN2, 10_000, ExecMode::Sequential).unwrap();
        assert!(v_big < v_small / 50.0, "variance must shrink: {v_big} vs {v_small}");
        assert!(m_big.abs() < m_small.abs());
        assert!(m_big.abs() <= 1e-3 * LN2);
        assert!((worst + LN2).abs() < 1e-12);
        // branch-exact and summed stats agree
        let d = pitr_branch_distribution(&s, 0, 1, LN2, 9).unwrap();
        let (m9, v9, _) = pitr_work_stats(&s, 0, 1, LN2, 9, ExecMode::Sequential).unwrap();
        assert!((d.mean() - m9).abs() < 1e-12);
        assert!((d.variance() - v9).abs() < 1e-12);
    }

    #[test]
    fn pitr_infinite_kappa_drains_level() {
        let s = sys(vec![0.0, 0.0], vec![0.5, 0.5]);
        let (out, _) = apply_pitr(&s, 0, 1, f64::INFINITY, 100).unwrap();
        assert_eq!(out.population(0), 0.0);
        assert_eq!(out.energy(0), f64::INFINITY);
        assert!((out.energy(1) + 2.0f64.ln()).abs() < 1e-15);
        assert!((out.population(1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exact_points_flow_preserves_curve() {
        // non-elbow between levels 0 and 1 (equal keys), segment owner 2
        let s = sys(vec![0.0, 0.0, LN2], vec![0.3, 0.3, 0.4]);
        let before = build_curve(&s);
        let out = exact_points_flow(&s, 0, 1, 2, 0.2).unwrap();
        let after = build_curve(&out);
        for &(x, _) in before.points() {
            assert!((before.value_at(x).unwrap() - after.value_at(x).unwrap()).abs() < 1e-12);
        }
        for &(x, _) in after.points() {
            assert!((before.value_at(x).unwrap() - after.value_at(x).unwrap()).abs() < 1e-12);
        }
        assert!((out.weight(0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn exact_points_flow_rejects_elbow_pairs() {
        let s = sys(vec![0.0, 0.0, LN2], vec![0.5, 0.1, 0.4]);
        assert!(matches!(
            exact_points_flow(&s, 0, 1, 2, 0.1),
            Err(ThermoError::NotANonElbow(_, _, _, _))
        ));
    }

    #[test]
    fn approx_points_flow_converges_to_exact() {
        let s = sys(vec![0.0, 0.0, LN2], vec![0.3, 0.3, 0.4]);
        // move the (0,1) non-elbow into level 2's segment at x = 2.25
        let exact = exact_points_flow(&s, 1, 0, 2, 0.25).unwrap();
        let target_x = 2.25;
        let (approx, bound) = approx_points_flow(&s, 0, 1, 40.0, target_x).unwrap();
        assert!(bound < 1e-12);
        let (ce, ca) = (build_curve(&exact), build_curve(&approx));
        for &(x, _) in ce.points() {
            assert!((ce.value_at(x).unwrap() - ca.value_at(x).unwrap()).abs() < 1e-9);
        }
        // capped energies never exceed the cap
        assert!(approx.hamiltonian.energies().iter().all(|&e| e <= 40.0 + 1e-9));
    }

    #[test]
    fn approx_points_flow_bound_shrinks_with_cap() {
        let s = sys(vec![0.0, 0.0, LN2], vec![0.3, 0.3, 0.4]);
        let (_, b1) = approx_points_flow(&s, 0, 1, 5.0, 2.25).unwrap();
        let (_, b2) = approx_points_flow(&s, 0, 1, 15.0, 2.25).unwrap();
        assert!(b2 < b1);
        assert!(b1 > 0.0);
    }

    #[test]
    fn approx_points_flow_rejects_low_cap() {
        let s = sys(vec![0.0, 0.0, LN2], vec![0.3, 0.3, 0.4]);
        assert!(matches!(
            approx_points_flow(&s, 0, 1, 0.0, 2.25),
            Err(ThermoError::CapTooLow(_, _))
        ));
    }

    #[test]
    fn append_then_discard_is_identity() {
        let s = sys(vec![0.0, 0.7], vec![0.4, 0.6]);
        let p = Protocol {
            ops: vec![
                CoarseOp::AppendThermalQubit { gap: LN2 },
                CoarseOp::DiscardLevels { factor: vec![0, 1] },
            ],
            label: String::new(),
        };
        let (out, dist, trace) = apply_protocol(&s, &p).unwrap();
        assert_eq!(trace.len(), 3);
        assert_eq!(out.hamiltonian.energies(), s.hamiltonian.energies());
        for i in 0..2 {
            assert!((out.population(i) - s.population(i)).abs() < 1e-14);
        }
        assert_eq!(dist.worst_case(), 0.0);
    }

    #[test]
    fn empty_protocol_is_identity() {
        let s = sys(vec![0.0, 0.7], vec![0.4, 0.6]);
        let (out, dist, trace) = apply_protocol(&s, &Protocol::default()).unwrap();
        assert_eq!(out, s);
        assert_eq!(trace.len(), 1);
        let br = dist.branches().unwrap();
        assert_eq!((br.len(), br[0].work), (1, 0.0));
    }

    #[test]
    fn discard_rejects_correlated_factor() {
        // entangled-looking classical correlation: populations do not factorize
        let s = sys(vec![0.0, 0.0, 0.0, 0.0], vec![0.5, 0.0, 0.0, 0.5]);
        assert!(matches!(
            apply_discard(&s, &[0, 1]),
            Err(ThermoError::CorrelatedDiscard(_))
        ));
    }

    #[test]
    fn free_ops_are_monotone() {
        let s = sys(vec![0.0, 0.3, 1.0], vec![0.7, 0.1, 0.2]);
        let plt = apply_plt(&s, &[0, 1, 2], 0.6).unwrap();
        assert!(thermo_majorizes(&s, &plt, 1e-9).unwrap());
        let (pitr, _) = apply_pitr(&s, 0, 1, 0.4, 1).unwrap();
        assert!(thermo_majorizes(&s, &pitr, 1e-9).unwrap());
    }

    #[test]
    fn protocol_json_round_trip() {
        let p = Protocol {
            ops: vec![
                CoarseOp::Plt { subset: vec![0, 2], lambda: 0.25 },
                CoarseOp::Lt { shifts: vec![0.0, f64::INFINITY] },
                CoarseOp::AppendThermalQubit { gap: 0.5 },
                CoarseOp::Pitr { j: 1, k: 3, kappa: f64::INFINITY, steps: 100 },
                CoarseOp::DiscardLevels { factor: vec![0, 1] },
            ],
            label: "round-trip".into(),
        };
        let j = p.to_json();
        assert_eq!(j["ops"][1]["shifts"][1], serde_json::json!("inf"));
        assert_eq!(j["ops"][3]["kappa"], serde_json::json!("inf"));
        let back = Protocol::from_json(&j).unwrap();
        assert_eq!(back, p);
    }
}
