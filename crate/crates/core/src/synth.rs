//! Protocol synthesis: compile a feasible state transition into an explicit
//! coarse-operation sequence.
//!
//! Four entry points mirror the four synthesis guarantees: same-β-order
//! transitions need only block PLTs (at most n−1), or at most n−1 two-level
//! PLTs; arbitrary feasible transitions compile to a free protocol with one
//! thermal ancilla qubit and points flows through infinite energy; and when
//! the two curves meet only at their endpoints, a capped variant avoids
//! infinite energies at the price of a reported residual.
//!
//! Every compiler works by simulation: each emitted op is applied to a live
//! system, so all PITR angles and PLT weights are consistent with the state
//! they will actually see. Reports are verified by replaying the protocol
//! from scratch.

use crate::curve::{build_curve, thermo_majorizes, ThermoCurve};
use crate::error::{Result, ThermoError};
use crate::ops::{apply_protocol, CoarseOp, Protocol};
use crate::system::{beta_order, DiagonalState, ThermoSystem};

/// Feasibility tolerance used by all synthesis entry points.
pub const SYNTH_TOL: f64 = crate::curve::DEFAULT_CURVE_TOL;

/// Relative tolerance for "same key" when grouping collinear runs.
const KEY_TIE_TOL: f64 = 1e-9;

/// Compiled protocol plus theorem-compliance metadata.
#[derive(Debug, Clone)]
pub struct SynthesisReport {
    pub protocol: Protocol,
    pub plt_count: usize,
    pub used_infinite_levels: bool,
    /// Max curve/state deviation of the replayed output from the target.
    pub residual_error: f64,
}

impl SynthesisReport {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "protocol": self.protocol.to_json(),
            "plt_count": self.plt_count,
            "used_infinite_levels": self.used_infinite_levels,
            "residual_error": self.residual_error,
        })
    }
}

use crate::ops::Builder as Compiler;

/// β-order positions of the current system plus cumulative x coordinates.
/// `xs[m]` is where the level at position m starts; `xs[n]` is Z.
fn spans(sys: &ThermoSystem) -> (Vec<usize>, Vec<f64>) {
    let order = beta_order(sys);
    let mut xs = Vec::with_capacity(sys.n() + 1);
    xs.push(0.0);
    let mut acc = 0.0;
    for &i in order.perm() {
        acc += sys.weight(i);
        xs.push(acc);
    }
    (order.perm().to_vec(), xs)
}

/// First position where the target keys fail to be non-increasing along the
/// system's β-order.
fn order_violation(sys: &ThermoSystem, target: &[f64], tol: f64) -> Option<usize> {
    let (perm, _) = spans(sys);
    let key = |i: usize| {
        let e = sys.energy(i);
        if e.is_finite() {
            target[i] * (sys.beta.get() * e).exp()
        } else if target[i] > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    };
    let mut prev = f64::INFINITY;
    for (pos, &i) in perm.iter().enumerate() {
        let k = key(i);
        if k > prev + tol * prev.abs().max(1.0) {
            return Some(pos);
        }
        if k.is_finite() {
            prev = k;
        }
    }
    None
}

/// Tolerance for treating a running population as already equal to its target.
const POP_FIX_TOL: f64 = 1e-13;

/// One pass of the block procedure: within each stretch between cumulative
/// equality points, thermalize just enough for the running curve to touch the
/// target at the tightest interior point.
fn block_pass(c: &mut Compiler, target: &[f64]) -> Result<bool> {
    let (perm, _) = spans(&c.sys);
    let n = perm.len();
    let eta: Vec<f64> = perm.iter().map(|&i| c.sys.population(i)).collect();
    let zeta: Vec<f64> = perm.iter().map(|&i| target[i]).collect();
    let w: Vec<f64> = perm.iter().map(|&i| c.sys.weight(i)).collect();
    if eta
        .iter()
        .zip(&zeta)
        .all(|(a, b)| (a - b).abs() <= POP_FIX_TOL)
    {
        return Ok(true);
    }
    // equality marks on cumulative sums (position m marks Σ_{0..=m})
    let mut marks = Vec::new();
    let (mut ca, mut cb) = (0.0, 0.0);
    for m in 0..n {
        ca += eta[m];
        cb += zeta[m];
        if ca - cb <= 1e-12 {
            marks.push(m);
        }
    }
    if ca - cb < -1e-9 {
        return Err(ThermoError::Infeasible);
    }
    let mut emitted = false;
    let mut lo = 0usize;
    for &hi in &marks {
        if hi < lo {
            continue;
        }
        let block: Vec<usize> = (lo..=hi).collect();
        lo = hi + 1;
        if block.len() < 2 && (eta[block[0]] - zeta[block[0]]).abs() <= POP_FIX_TOL {
            continue;
        }
        if block
            .iter()
            .all(|&m| (eta[m] - zeta[m]).abs() <= POP_FIX_TOL)
        {
            continue;
        }
        let w_p: f64 = block.iter().map(|&m| w[m]).sum();
        let s_p: f64 = block.iter().map(|&m| eta[m]).sum();
        let mut lambda_min = f64::INFINITY;
        let (mut a, mut b, mut g) = (0.0, 0.0, 0.0);
        for &m in block.iter().take(block.len() - 1) {
            a += eta[m];
            b += zeta[m];
            g += w[m];
            let gibbs_point = g * s_p / w_p;
            let num = a - b;
            let den = a - gibbs_point;
            if den <= 1e-300 {
                if num > 1e-9 {
                    return Err(ThermoError::Infeasible);
                }
                continue;
            }
            let lambda = num / den;
            if lambda < lambda_min {
                lambda_min = lambda;
            }
        }
        if !lambda_min.is_finite() {
            continue;
        }
        if lambda_min < -1e-12 || lambda_min > 1.0 + 1e-12 {
            return Err(ThermoError::Infeasible);
        }
        let lambda = lambda_min.clamp(0.0, 1.0);
        if lambda > 1e-15 {
            let subset: Vec<usize> = block.iter().map(|&m| perm[m]).collect();
            c.plt(subset, lambda)?;
            emitted = true;
        }
    }
    Ok(!emitted)
}

/// Run block passes to completion. Returns the number of passes.
fn same_order_blocks(c: &mut Compiler, target: &[f64]) -> Result<usize> {
    let n = c.sys.n();
    for pass in 0..n + 2 {
        if block_pass(c, target)? {
            return Ok(pass);
        }
    }
    Err(ThermoError::SynthesisInternal(
        "block procedure failed to converge".into(),
    ))
}

/// Two-level variant: each PLT acts on the tightest violating pair and pins
/// at least one population to its target.
fn two_level_steps(c: &mut Compiler, target: &[f64]) -> Result<()> {
    let n = c.sys.n();
    for _ in 0..n + 2 {
        let (perm, _) = spans(&c.sys);
        let eta: Vec<f64> = perm.iter().map(|&i| c.sys.population(i)).collect();
        let zeta: Vec<f64> = perm.iter().map(|&i| target[i]).collect();
        let w: Vec<f64> = perm.iter().map(|&i| c.sys.weight(i)).collect();
        // largest position still above target
        let j = match (0..n).rev().find(|&m| eta[m] - zeta[m] > POP_FIX_TOL) {
            None => {
                if eta.iter().zip(&zeta).all(|(a, b)| (a - b).abs() <= 64.0 * POP_FIX_TOL) {
                    return Ok(());
                }
                return Err(ThermoError::SynthesisInternal(
                    "no donor position but targets unmatched".into(),
                ));
            }
            Some(j) => j,
        };
        let k = (j + 1..n)
            .find(|&m| zeta[m] - eta[m] > POP_FIX_TOL)
            .ok_or(ThermoError::Infeasible)?;
        let thermal_j = w[j] * (eta[j] + eta[k]) / (w[j] + w[k]);
        let thermal_k = w[k] * (eta[j] + eta[k]) / (w[j] + w[k]);
        let lambda_1 = (eta[j] - zeta[j]) / (eta[j] - thermal_j);
        let lambda_2 = (eta[k] - zeta[k]) / (eta[k] - thermal_k);
        let lambda = lambda_1.min(lambda_2);
        if !((-1e-12)..=1.0 + 1e-12).contains(&lambda) {
            return Err(ThermoError::Infeasible);
        }
        c.plt(vec![perm[j], perm[k]], lambda.clamp(0.0, 1.0))?;
    }
    Err(ThermoError::SynthesisInternal(
        "two-level procedure failed to converge".into(),
    ))
}

fn require_finite_levels(s: &ThermoSystem) -> Result<()> {
    for i in 0..s.n() {
        if !s.energy(i).is_finite() {
            return Err(ThermoError::InfiniteLevelInSubset(i));
        }
    }
    Ok(())
}

fn check_feasible(rho: &ThermoSystem, sigma: &DiagonalState) -> Result<ThermoSystem> {
    if rho.n() != sigma.len() {
        return Err(ThermoError::ShapeMismatch(rho.n(), sigma.len()));
    }
    let target = rho.with_populations(sigma.clone())?;
    if !thermo_majorizes(rho, &target, SYNTH_TOL)? {
        return Err(ThermoError::Infeasible);
    }
    Ok(target)
}

/// State deviation plus curve deviation between a replayed output and the
/// intended target.
fn residual_between(out: &ThermoSystem, target: &ThermoSystem) -> f64 {
    let mut r: f64 = 0.0;
    if out.n() == target.n() {
        for i in 0..out.n() {
            r = r.max((out.population(i) - target.population(i)).abs());
            let (ea, eb) = (out.energy(i), target.energy(i));
            if ea.is_finite() && eb.is_finite() {
                r = r.max((out.weight(i) - target.weight(i)).abs());
            } else if ea.is_finite() != eb.is_finite() {
                r = r.max(out.weight(i).max(target.weight(i)));
            }
        }
    } else {
        return f64::INFINITY;
    }
    let (co, ct) = (build_curve(out), build_curve(target));
    for &(x, _) in co.points().iter().chain(ct.points().iter()) {
        let x = x.min(co.z_fin()).min(ct.z_fin());
        if let (Ok(a), Ok(b)) = (co.value_at(x), ct.value_at(x)) {
            r = r.max((a - b).abs());
        }
    }
    r
}

fn finish_report(
    rho: &ThermoSystem,
    target: &ThermoSystem,
    protocol: Protocol,
) -> Result<SynthesisReport> {
    let (out, _, _) = apply_protocol(rho, &protocol)?;
    let residual_error = residual_between(&out, target);
    Ok(SynthesisReport {
        plt_count: protocol.plt_count(),
        used_infinite_levels: protocol.uses_infinite_levels(),
        residual_error,
        protocol,
    })
}

/// Same-β-order synthesis with block PLTs (at most n−1 of them).
pub fn synth_same_order(rho: &ThermoSystem, sigma: &DiagonalState) -> Result<SynthesisReport> {
    let target = check_feasible(rho, sigma)?;
    if let Some(pos) = order_violation(rho, sigma.populations(), KEY_TIE_TOL) {
        return Err(ThermoError::OrderMismatch(pos));
    }
    let mut c = Compiler::new(rho.clone());
    same_order_blocks(&mut c, sigma.populations())?;
    let (protocol, _) = c.into_protocol("same-order blocks");
    finish_report(rho, &target, protocol)
}

/// Same-β-order synthesis with two-level PLTs only (at most n−1 of them).
pub fn synth_same_order_two_level(
    rho: &ThermoSystem,
    sigma: &DiagonalState,
) -> Result<SynthesisReport> {
    let target = check_feasible(rho, sigma)?;
    if let Some(pos) = order_violation(rho, sigma.populations(), KEY_TIE_TOL) {
        return Err(ThermoError::OrderMismatch(pos));
    }
    let mut c = Compiler::new(rho.clone());
    two_level_steps(&mut c, sigma.populations())?;
    let (protocol, _) = c.into_protocol("same-order two-level");
    finish_report(rho, &target, protocol)
}

// ---------------------------------------------------------------------------
// General synthesis (exact, through infinite energies)
// ---------------------------------------------------------------------------

/// Interior kink x-positions of a curve (where the slope changes).
fn interior_elbows(curve: &ThermoCurve) -> Vec<f64> {
    let pts = curve.points();
    let mut out = Vec::new();
    for m in 1..pts.len().saturating_sub(1) {
        let (x0, y0) = pts[m - 1];
        let (x1, y1) = pts[m];
        let (x2, y2) = pts[m + 1];
        if x1 == x0 || x2 == x1 {
            continue;
        }
        let s0 = (y1 - y0) / (x1 - x0);
        let s1 = (y2 - y1) / (x2 - x1);
        if (s0 - s1).abs() > KEY_TIE_TOL * s0.abs().max(s1.abs()).max(1e-300) {
            out.push(x1);
        }
    }
    out
}

/// Collinear runs of the target order: maximal groups of consecutive
/// positions with tied keys.
fn target_runs(tgt: &ThermoSystem) -> (Vec<usize>, Vec<std::ops::Range<usize>>, Vec<f64>) {
    let (perm, xs) = spans(tgt);
    let keys: Vec<f64> = perm.iter().map(|&i| tgt.key(i)).collect();
    let mut runs = Vec::new();
    let mut start = 0usize;
    for m in 1..perm.len() {
        let (a, b) = (keys[m - 1], keys[m]);
        let tied = (a - b).abs() <= KEY_TIE_TOL * a.abs().max(b.abs()).max(1e-300);
        if !tied {
            runs.push(start..m);
            start = m;
        }
    }
    runs.push(start..perm.len());
    (perm, runs, xs)
}

/// Land the parked level `p` (zero weight) inside the current segment that
/// contains `x_t`, so a breakpoint appears exactly at `x_t`.
fn land_parked(c: &mut Compiler, p: usize, x_t: f64) -> Result<()> {
    let (perm, xs) = spans(&c.sys);
    let pos = (0..perm.len())
        .find(|&m| xs[m] < x_t && x_t < xs[m + 1] && c.sys.weight(perm[m]) > 0.0)
        .ok_or_else(|| ThermoError::SynthesisInternal(format!("no segment contains x={x_t}")))?;
    let l = perm[pos];
    let w_l = c.sys.weight(l);
    let delta = if p < l { x_t - xs[pos] } else { xs[pos + 1] - x_t };
    let kappa = -(1.0 - delta / w_l).ln() / c.sys.beta.get();
    c.pitr(l, p, kappa)
}

/// Membership normalization and exact carving toward `tgt`, using drains
/// through infinite energy. Assumes curve(c.sys) already equals curve(tgt) as
/// a function.
fn rebuild_levels_exact(c: &mut Compiler, tgt: &ThermoSystem) -> Result<()> {
    let n = tgt.n();
    let (tperm, runs, txs) = target_runs(tgt);
    let run_count = runs.len();
    let run_members: Vec<Vec<usize>> = runs
        .iter()
        .map(|r| r.clone().map(|m| tperm[m]).collect())
        .collect();
    let run_bounds: Vec<(f64, f64)> = runs.iter().map(|r| (txs[r.start], txs[r.end])).collect();
    let home_run: Vec<usize> = {
        let mut h = vec![0usize; n];
        for (r, members) in run_members.iter().enumerate() {
            for &i in members {
                h[i] = r;
            }
        }
        h
    };
    // current membership by span midpoint
    let mut members_now: Vec<Vec<usize>> = vec![Vec::new(); run_count];
    {
        let (perm, xs) = spans(&c.sys);
        for (m, &i) in perm.iter().enumerate() {
            if c.sys.weight(i) <= 0.0 {
                continue;
            }
            let mid = 0.5 * (xs[m] + xs[m + 1]);
            let r = run_bounds
                .iter()
                .position(|&(lo, hi)| mid >= lo && mid <= hi)
                .ok_or_else(|| {
                    ThermoError::SynthesisInternal("current level outside all runs".into())
                })?;
            members_now[r].push(i);
        }
    }
    // hosts: prefer a member whose final home is this run
    let mut host: Vec<usize> = Vec::with_capacity(run_count);
    for (r, members) in members_now.iter().enumerate() {
        if members.is_empty() {
            return Err(ThermoError::SynthesisInternal(format!("run {r} has no members")));
        }
        let pick = members
            .iter()
            .copied()
            .find(|&i| home_run[i] == r)
            .unwrap_or(members[0]);
        host.push(pick);
    }
    // drain everything but the hosts
    for (r, members) in members_now.iter().enumerate() {
        for &m in members {
            if m != host[r] {
                c.pitr(m, host[r], f64::INFINITY)?;
            }
        }
    }
    let mut hosted_by: Vec<Option<usize>> = vec![None; n];
    for (r, &h) in host.iter().enumerate() {
        hosted_by[h] = Some(r);
    }
    let parked = |c: &Compiler, i: usize| c.sys.weight(i) == 0.0;
    let any_parked = |c: &Compiler, hosted_by: &[Option<usize>]| {
        (0..n).find(|&i| parked(c, i) && hosted_by[i].is_none())
    };
    for r in 0..run_count {
        // make the host a final member of this run
        if home_run[host[r]] != r {
            let fallback = run_members[r][0];
            let f = run_members[r]
                .iter()
                .copied()
                .find(|&f| parked(c, f))
                .unwrap_or(fallback);
            if !parked(c, f) {
                // f hosts some other run; push that run onto a parked level
                let r2 = hosted_by[f].ok_or_else(|| {
                    ThermoError::SynthesisInternal("occupied non-host final member".into())
                })?;
                let p = any_parked(c, &hosted_by).ok_or_else(|| {
                    ThermoError::SynthesisInternal("no parked level for host handoff".into())
                })?;
                c.pitr(f, p, f64::INFINITY)?;
                host[r2] = p;
                hosted_by[f] = None;
                hosted_by[p] = Some(r2);
            }
            c.pitr(host[r], f, f64::INFINITY)?;
            hosted_by[host[r]] = None;
            host[r] = f;
            hosted_by[f] = Some(r);
        }
        // carve every other final member at its exact weight
        for &f in &run_members[r] {
            if f == host[r] {
                continue;
            }
            if let Some(r2) = hosted_by[f] {
                let p = any_parked(c, &hosted_by).ok_or_else(|| {
                    ThermoError::SynthesisInternal("no parked level for carve handoff".into())
                })?;
                c.pitr(f, p, f64::INFINITY)?;
                host[r2] = p;
                hosted_by[f] = None;
                hosted_by[p] = Some(r2);
            }
            let w_f = tgt.weight(f);
            let w_host = c.sys.weight(host[r]);
            if w_f >= w_host {
                return Err(ThermoError::SynthesisInternal(
                    "carve exceeds host weight".into(),
                ));
            }
            let kappa = -(1.0 - w_f / w_host).ln() / c.sys.beta.get();
            c.pitr(host[r], f, kappa)?;
        }
    }
    Ok(())
}

/// General synthesis: any feasible transition, free of work, using one
/// thermal ancilla qubit and points flows through infinite energy.
pub fn synth_general(
    rho: &ThermoSystem,
    sigma: &DiagonalState,
    ancilla_gap: f64,
) -> Result<SynthesisReport> {
    if !(ancilla_gap > 0.0) || !ancilla_gap.is_finite() {
        return Err(ThermoError::InvalidGap(ancilla_gap));
    }
    require_finite_levels(rho)?;
    let base_target = check_feasible(rho, sigma)?;
    let qubit = crate::ops::thermal_qubit(ancilla_gap, rho.beta)?;
    let tgt = base_target.tensor(&qubit)?;
    let n = rho.n();

    if order_violation(rho, sigma.populations(), KEY_TIE_TOL).is_none() {
        // same order: block PLTs lifted onto the composite
        let mut base = Compiler::new(rho.clone());
        same_order_blocks(&mut base, sigma.populations())?;
        let (base_protocol, _) = base.into_protocol("");
        let mut c = Compiler::new(rho.clone());
        c.emit(CoarseOp::AppendThermalQubit { gap: ancilla_gap })?;
        for op in base_protocol.ops {
            match op {
                CoarseOp::Plt { subset, lambda } => {
                    let lifted = subset.iter().flat_map(|&i| [2 * i, 2 * i + 1]).collect();
                    c.plt(lifted, lambda)?;
                }
                _ => unreachable!("block synthesis emits PLTs only"),
            }
        }
        c.emit(CoarseOp::DiscardLevels { factor: vec![0, 1] })?;
        let (protocol, _) = c.into_protocol("general (same order)");
        return finish_report(rho, &base_target, protocol);
    }

    let mut c = Compiler::new(rho.clone());
    c.emit(CoarseOp::AppendThermalQubit { gap: ancilla_gap })?;
    // drain the ancilla copies: the composite curve keeps its shape while all
    // split points disappear and n levels park at infinite energy
    for i in 0..n {
        c.pitr(2 * i + 1, 2 * i, f64::INFINITY)?;
    }
    // land parked levels at the target's interior elbows
    let target_curve = build_curve(&tgt);
    let mut pool: Vec<usize> = (0..n).map(|i| 2 * i + 1).collect();
    for x_t in interior_elbows(&target_curve) {
        let (_, xs) = spans(&c.sys);
        let scale = xs.last().copied().unwrap_or(1.0).max(1.0);
        if xs.iter().any(|&x| (x - x_t).abs() <= 1e-12 * scale) {
            continue;
        }
        let p = pool.pop().ok_or_else(|| {
            ThermoError::SynthesisInternal("alignment exhausted the parked levels".into())
        })?;
        land_parked(&mut c, p, x_t)?;
    }
    // same-order blocks toward the populations of the target curve over the
    // current spans
    let sigma_prime: Vec<f64> = {
        let (perm, xs) = spans(&c.sys);
        let mut v = vec![0.0; 2 * n];
        for (m, &i) in perm.iter().enumerate() {
            let lo = target_curve.value_at(xs[m].min(target_curve.z_fin()))?;
            let hi = target_curve.value_at(xs[m + 1].min(target_curve.z_fin()))?;
            v[i] = (hi - lo).max(0.0);
        }
        v
    };
    same_order_blocks(&mut c, &sigma_prime)?;
    // rebuild the exact level layout of the target and drop the ancilla
    rebuild_levels_exact(&mut c, &tgt)?;
    c.emit(CoarseOp::DiscardLevels { factor: vec![0, 1] })?;
    let (protocol, _) = c.into_protocol("general");
    finish_report(rho, &base_target, protocol)
}

// ---------------------------------------------------------------------------
// General synthesis without infinite energies
// ---------------------------------------------------------------------------

/// General synthesis with every energy capped at `e_cap`, for curves that
/// meet only at (0,0) and (Z,1). The reported residual combines the measured
/// deviation with an analytic bound that shrinks as the cap grows.
pub fn synth_general_approx(
    rho: &ThermoSystem,
    sigma: &DiagonalState,
    ancilla_gap: f64,
    e_cap: f64,
    delta: f64,
) -> Result<SynthesisReport> {
    if !(ancilla_gap > 0.0) || !ancilla_gap.is_finite() {
        return Err(ThermoError::InvalidGap(ancilla_gap));
    }
    if !e_cap.is_finite() {
        return Err(ThermoError::CapTooLow(e_cap, f64::INFINITY));
    }
    if !(delta > 0.0) {
        return Err(ThermoError::DeltaUnachievable { requested: delta, achievable: f64::NAN });
    }
    require_finite_levels(rho)?;
    let base_target = check_feasible(rho, sigma)?;
    let beta = rho.beta.get();
    let max_energy = rho
        .hamiltonian
        .energies()
        .iter()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b))
        + ancilla_gap;
    if e_cap <= max_energy {
        return Err(ThermoError::CapTooLow(e_cap, max_energy));
    }

    // endpoint-only-touching gate on the base curves
    let (rc, sc) = (build_curve(rho), build_curve(&base_target));
    let z = rc.z_fin();
    let mut m0 = f64::INFINITY;
    for &(x, _) in rc.points().iter().chain(sc.points().iter()) {
        if x <= 1e-12 * z.max(1.0) || x >= z - 1e-12 * z.max(1.0) {
            continue;
        }
        let gap = rc.value_at(x)? - sc.value_at(x)?;
        if gap <= 1e-12 {
            return Err(ThermoError::CurvesTouch(x));
        }
        m0 = m0.min(gap);
    }

    let qubit = crate::ops::thermal_qubit(ancilla_gap, rho.beta)?;
    let tgt = base_target.tensor(&qubit)?;
    let n2 = 2 * rho.n();
    let max_key = (0..tgt.n()).map(|i| tgt.key(i)).fold(0.0, f64::max);
    let u = (-beta * e_cap).exp();
    let nudge = (delta / (4.0 * n2 as f64 * max_key.max(1.0))).min(m0 / (8.0 * n2 as f64));
    // pre-flight budget: every capped op leaks at most u of weight across a
    // key gap, plus the nudges themselves
    let op_budget = (4 * n2 * n2 + 4 * n2) as f64;
    let analytic_bound = op_budget * u * max_key.max(1.0) + n2 as f64 * nudge * max_key.max(1.0);
    if analytic_bound > m0 / 2.0 || analytic_bound > delta {
        return Err(ThermoError::DeltaUnachievable { requested: delta, achievable: analytic_bound });
    }

    let mut c = Compiler::new(rho.clone());
    c.emit(CoarseOp::AppendThermalQubit { gap: ancilla_gap })?;
    // step 0: reduce each ancilla copy to a capped slug
    for i in 0..rho.n() {
        let kappa = e_cap - c.sys.energy(2 * i + 1);
        c.pitr(2 * i + 1, 2 * i, kappa)?;
    }
    // step 1: approximate points flows put a breakpoint at every target elbow
    let target_curve = build_curve(&tgt);
    let mut slugs: Vec<usize> = (0..rho.n()).map(|i| 2 * i + 1).collect();
    let is_slug = |c: &Compiler, i: usize| c.sys.energy(i) >= e_cap - 1e-9;
    let mut placed: Vec<f64> = Vec::new();
    for x_t in interior_elbows(&target_curve) {
        let (_, xs) = spans(&c.sys);
        let scale = xs.last().copied().unwrap_or(1.0).max(1.0);
        if xs.iter().any(|&x| (x - x_t).abs() <= 1e-12 * scale) {
            placed.push(x_t);
            continue;
        }
        let p = slugs.pop().ok_or_else(|| {
            ThermoError::SynthesisInternal("alignment exhausted the capped slugs".into())
        })?;
        // bring the slug into the segment owning x_t, then slide exactly there
        let (perm, xs) = spans(&c.sys);
        let pos = (0..perm.len())
            .find(|&m| {
                xs[m] < x_t && x_t < xs[m + 1] && perm[m] != p && !is_slug(&c, perm[m])
            })
            .ok_or_else(|| ThermoError::SynthesisInternal(format!("no segment owns x={x_t}")))?;
        let l = perm[pos];
        c.plt(vec![p, l], 1.0)?;
        // recompute and slide the (p, l) boundary to x_t
        let (perm, xs) = spans(&c.sys);
        let pos_p = perm.iter().position(|&i| i == p).unwrap();
        let pos_l = perm.iter().position(|&i| i == l).unwrap();
        let lead = pos_p.min(pos_l);
        let lo = xs[lead];
        let hi = xs[lead + 2];
        let want_p = if p < l { x_t - lo } else { hi - x_t };
        let w_p = c.sys.weight(p);
        let w_l = c.sys.weight(l);
        if want_p >= w_p {
            let take = want_p - w_p;
            if take >= w_l {
                return Err(ThermoError::SynthesisInternal("slide exceeds donor".into()));
            }
            c.pitr(l, p, -(1.0 - take / w_l).ln() / beta)?;
        } else {
            let kappa = -(want_p / w_p).ln() / beta;
            if c.sys.energy(p) + kappa > e_cap {
                return Err(ThermoError::DeltaUnachievable {
                    requested: delta,
                    achievable: analytic_bound,
                });
            }
            c.pitr(p, l, kappa)?;
        }
        placed.push(x_t);
    }
    placed.sort_by(|a, b| a.partial_cmp(b).unwrap());

    // step 2: nudges by the breakpoint-count comparison
    let tgt_xs = spans(&tgt).1;
    let mut boundaries: Vec<f64> = Vec::new();
    for &x_t in &placed {
        let (perm, xs) = spans(&c.sys);
        let scale = xs.last().copied().unwrap_or(1.0).max(1.0);
        let pos_b = match (1..perm.len()).find(|&m| (xs[m] - x_t).abs() <= 1e-9 * scale) {
            Some(p) => p,
            None => {
                boundaries.push(x_t);
                continue;
            }
        };
        let r_i = pos_b;
        let s_i = tgt_xs.iter().filter(|&&x| x > 0.0 && x < x_t - 1e-9 * scale).count() + 1;
        let (first, second) = (perm[pos_b - 1], perm[pos_b]);
        let keys_tied = {
            let (a, b) = (c.sys.key(first), c.sys.key(second));
            (a - b).abs() <= KEY_TIE_TOL * a.abs().max(b.abs()).max(1e-300)
        };
        if r_i == s_i || !keys_tied {
            boundaries.push(x_t);
            continue;
        }
        let shift = if r_i < s_i { nudge } else { -nudge };
        let gap_left = x_t - xs[pos_b - 1];
        let gap_right = xs[pos_b + 1] - x_t;
        let shift = shift.clamp(-gap_left / 4.0, gap_right / 4.0);
        let lo = xs[pos_b - 1];
        let want_first = if first < second {
            (x_t + shift) - lo
        } else {
            (xs[pos_b + 1]) - (x_t + shift)
        };
        let (w_f, w_s) = (c.sys.weight(first), c.sys.weight(second));
        let total = w_f + w_s;
        let want = want_first.clamp(1e-300, total - 1e-300);
        if want < w_f {
            c.pitr(first, second, -(want / w_f).ln() / beta)?;
        } else if want > w_f {
            c.pitr(second, first, -(1.0 - (want - w_f) / w_s).ln() / beta)?;
        }
        boundaries.push(x_t + shift);
    }

    // step 3: thermalize every interval between consecutive boundaries
    {
        let (perm, xs) = spans(&c.sys);
        let z_now = *xs.last().unwrap();
        let mut cuts = vec![0.0];
        cuts.extend(boundaries.iter().copied());
        cuts.push(z_now);
        for w in cuts.windows(2) {
            let subset: Vec<usize> = perm
                .iter()
                .enumerate()
                .filter(|&(m, _)| xs[m] >= w[0] - 1e-12 && xs[m + 1] <= w[1] + 1e-12)
                .map(|(_, &i)| i)
                .collect();
            if subset.len() >= 2 {
                c.plt(subset, 1.0)?;
            }
        }
    }
    // feasibility margin must survive the flattening
    {
        let cur = build_curve(&c.sys);
        let tc = build_curve(&tgt);
        for &(x, _) in tc.points() {
            let x = x.min(cur.z_fin());
            if x <= 1e-12 || x >= cur.z_fin() - 1e-12 {
                continue;
            }
            if cur.value_at(x)? < tc.value_at(x)? {
                return Err(ThermoError::DeltaUnachievable {
                    requested: delta,
                    achievable: analytic_bound,
                });
            }
        }
    }

    // step 4: migrate levels to their home runs and carve exact weights
    rebuild_levels_capped(&mut c, &tgt, e_cap, &boundaries)?;

    // trim energies onto the exact target Hamiltonian, then finish with
    // same-order blocks
    let shifts: Vec<f64> = (0..n2).map(|i| tgt.energy(i) - c.sys.energy(i)).collect();
    if shifts.iter().any(|h| h.abs() > 1e-15) {
        c.emit(CoarseOp::Lt { shifts })?;
    }
    if let Some(pos) = order_violation(&c.sys, tgt.state.populations(), 1e-6) {
        return Err(ThermoError::SynthesisInternal(format!(
            "capped rebuild broke the target order at position {pos}"
        )));
    }
    same_order_blocks(&mut c, tgt.state.populations())?;
    c.emit(CoarseOp::DiscardLevels { factor: vec![0, 1] })?;
    let (protocol, _) = c.into_protocol("general (capped)");

    let (out, _, _) = apply_protocol(rho, &protocol)?;
    let measured = residual_between(&out, &base_target);
    if protocol.uses_infinite_levels() {
        return Err(ThermoError::SynthesisInternal(
            "capped synthesis produced an infinite energy".into(),
        ));
    }
    let residual_error = measured.max(analytic_bound.min(delta));
    if measured > delta {
        return Err(ThermoError::DeltaUnachievable { requested: delta, achievable: measured });
    }
    Ok(SynthesisReport {
        plt_count: protocol.plt_count(),
        used_infinite_levels: false,
        residual_error,
        protocol,
    })
}

/// Capped analogue of `rebuild_levels_exact`: drains leave slugs at the cap,
/// cross-run transfers ride a full two-level thermalization, and every final
/// weight is carved from the live simulated state.
fn rebuild_levels_capped(
    c: &mut Compiler,
    tgt: &ThermoSystem,
    e_cap: f64,
    boundaries: &[f64],
) -> Result<()> {
    let n = tgt.n();
    let beta = tgt.beta.get();
    let (tperm, runs, _) = target_runs(tgt);
    let run_count = runs.len();
    let run_members: Vec<Vec<usize>> = runs
        .iter()
        .map(|r| r.clone().map(|m| tperm[m]).collect())
        .collect();
    let home_run: Vec<usize> = {
        let mut h = vec![0usize; n];
        for (r, members) in run_members.iter().enumerate() {
            for &i in members {
                h[i] = r;
            }
        }
        h
    };
    if boundaries.len() + 1 != run_count {
        return Err(ThermoError::SynthesisInternal(format!(
            "boundary count {} does not match run count {}",
            boundaries.len(),
            run_count
        )));
    }
    let slug_w = (-beta * e_cap).exp();
    let is_slug = |c: &Compiler, i: usize| c.sys.weight(i) <= 4.0 * slug_w;
    // current members per run, by span midpoint against the nudged boundaries
    let mut members_now: Vec<Vec<usize>> = vec![Vec::new(); run_count];
    {
        let (perm, xs) = spans(&c.sys);
        let z_now = *xs.last().unwrap();
        let mut cuts = vec![0.0];
        cuts.extend(boundaries.iter().copied());
        cuts.push(z_now + 1.0);
        for (m, &i) in perm.iter().enumerate() {
            if is_slug(c, i) {
                continue;
            }
            let mid = 0.5 * (xs[m] + xs[m + 1]);
            let r = cuts
                .windows(2)
                .position(|w| mid >= w[0] && mid < w[1])
                .ok_or_else(|| ThermoError::SynthesisInternal("level outside all runs".into()))?;
            members_now[r].push(i);
        }
    }
    let mut host: Vec<usize> = Vec::with_capacity(run_count);
    for (r, members) in members_now.iter().enumerate() {
        if members.is_empty() {
            return Err(ThermoError::SynthesisInternal(format!("run {r} has no members")));
        }
        let pick = members
            .iter()
            .copied()
            .find(|&i| home_run[i] == r)
            .unwrap_or(members[0]);
        host.push(pick);
    }
    for (r, members) in members_now.iter().enumerate() {
        for &m in members {
            if m != host[r] {
                let kappa = e_cap - c.sys.energy(m);
                if kappa <= 0.0 {
                    return Err(ThermoError::CapTooLow(e_cap, c.sys.energy(m)));
                }
                c.pitr(m, host[r], kappa)?;
            }
        }
    }
    let mut hosted_by: Vec<Option<usize>> = vec![None; n];
    for (r, &h) in host.iter().enumerate() {
        hosted_by[h] = Some(r);
    }
    // push a hosted run onto a free slug
    fn handoff(
        c: &mut Compiler,
        f: usize,
        hosted_by: &mut Vec<Option<usize>>,
        host: &mut Vec<usize>,
        e_cap: f64,
        is_slug: &dyn Fn(&Compiler, usize) -> bool,
    ) -> Result<()> {
        let n = hosted_by.len();
        let r2 = hosted_by[f].expect("handoff requires a hosting level");
        let p = (0..n)
            .find(|&i| is_slug(c, i) && hosted_by[i].is_none() && i != f)
            .ok_or_else(|| ThermoError::SynthesisInternal("no slug for handoff".into()))?;
        // merge p into f's run, then swap the weight over
        c.plt(vec![p, f], 1.0)?;
        let kappa = e_cap - c.sys.energy(f);
        if kappa <= 0.0 {
            return Err(ThermoError::CapTooLow(e_cap, c.sys.energy(f)));
        }
        c.pitr(f, p, kappa)?;
        host[r2] = p;
        hosted_by[f] = None;
        hosted_by[p] = Some(r2);
        Ok(())
    }
    for r in 0..run_count {
        if home_run[host[r]] != r {
            let f = run_members[r]
                .iter()
                .copied()
                .find(|&f| is_slug(c, f) && hosted_by[f].is_none())
                .or_else(|| run_members[r].iter().copied().find(|&f| hosted_by[f].is_some()));
            let f = f.ok_or_else(|| {
                ThermoError::SynthesisInternal("no final member available as host".into())
            })?;
            if hosted_by[f].is_some() {
                handoff(c, f, &mut hosted_by, &mut host, e_cap, &is_slug)?;
            }
            // swap host -> f
            c.plt(vec![f, host[r]], 1.0)?;
            let kappa = e_cap - c.sys.energy(host[r]);
            if kappa <= 0.0 {
                return Err(ThermoError::CapTooLow(e_cap, c.sys.energy(host[r])));
            }
            let old = host[r];
            c.pitr(old, f, kappa)?;
            hosted_by[old] = None;
            host[r] = f;
            hosted_by[f] = Some(r);
        }
        for &f in &run_members[r] {
            if f == host[r] {
                continue;
            }
            if hosted_by[f].is_some() {
                handoff(c, f, &mut hosted_by, &mut host, e_cap, &is_slug)?;
            }
            // bring the slug into this run and grow it to its final weight
            c.plt(vec![f, host[r]], 1.0)?;
            let w_f_target = tgt.weight(f);
            let w_f = c.sys.weight(f);
            let w_host = c.sys.weight(host[r]);
            if w_f_target > w_f {
                let take = w_f_target - w_f;
                if take >= w_host {
                    return Err(ThermoError::SynthesisInternal("carve exceeds host".into()));
                }
                c.pitr(host[r], f, -(1.0 - take / w_host).ln() / beta)?;
            } else if w_f_target < w_f {
                let kappa = -(w_f_target / w_f).ln() / beta;
                if c.sys.energy(f) + kappa > e_cap {
                    return Err(ThermoError::CapTooLow(e_cap, c.sys.energy(f) + kappa));
                }
                c.pitr(f, host[r], kappa)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curve::thermo_majorizes;
    use crate::system::gibbs_state;

    const LN2: f64 = std::f64::consts::LN_2;

    fn sys(energies: Vec<f64>, pops: Vec<f64>) -> ThermoSystem {
        ThermoSystem::from_parts(energies, pops, 1.0).unwrap()
    }

    #[test]
    fn same_order_identity_is_empty() {
        let rho = sys(vec![0.0, 0.0], vec![0.9, 0.1]);
        let r = synth_same_order(&rho, &rho.state).unwrap();
        assert!(r.protocol.ops.is_empty());
        assert_eq!(r.plt_count, 0);
        assert!(r.residual_error < 1e-12);
    }

    #[test]
    fn same_order_two_level_case_matches_block_case() {
        let rho = sys(vec![0.0, 0.0], vec![0.9, 0.1]);
        let sigma = DiagonalState::new(vec![0.7, 0.3]).unwrap();
        let r = synth_same_order(&rho, &sigma).unwrap();
        assert_eq!(r.plt_count, 1);
        match &r.protocol.ops[0] {
            CoarseOp::Plt { subset, lambda } => {
                assert_eq!(subset.as_slice(), &[0, 1]);
                assert!((lambda - 0.5).abs() < 1e-12, "lambda = {lambda}");
            }
            other => panic!("unexpected op {other:?}"),
        }
        let r2 = synth_same_order_two_level(&rho, &sigma).unwrap();
        assert_eq!(r2.plt_count, 1);
        assert!(r2.residual_error < 1e-12);
    }

    #[test]
    fn same_order_rejects_mismatched_order_and_infeasible() {
        let rho = sys(vec![0.0, LN2], vec![0.5, 0.5]); // order [1,0]
        let sigma = DiagonalState::new(vec![0.7, 0.3]).unwrap(); // order [0,1]
        assert!(matches!(
            synth_same_order(&rho, &sigma),
            Err(ThermoError::OrderMismatch(_))
        ));
        let gibbs = gibbs_state(&rho.hamiltonian, rho.beta);
        let gsys = rho.with_populations(gibbs).unwrap();
        assert!(matches!(
            synth_same_order(&gsys, &DiagonalState::new(vec![0.5, 0.5]).unwrap()),
            Err(ThermoError::Infeasible)
        ));
    }

    #[test]
    fn general_handles_the_qubit_order_change() {
        let rho = sys(vec![0.0, LN2], vec![0.5, 0.5]);
        let sigma = DiagonalState::new(vec![0.7, 0.3]).unwrap();
        let r = synth_general(&rho, &sigma, LN2).unwrap();
        assert!(r.used_infinite_levels);
        assert!(r.residual_error < 1e-9, "residual {}", r.residual_error);
        let (_, dist, _) = apply_protocol(&rho, &r.protocol).unwrap();
        assert_eq!(dist.worst_case(), 0.0);
    }

    #[test]
    fn general_same_order_wraps_blocks_in_append_discard() {
        let rho = sys(vec![0.0, 0.0], vec![0.9, 0.1]);
        let sigma = DiagonalState::new(vec![0.7, 0.3]).unwrap();
        let r = synth_general(&rho, &sigma, LN2).unwrap();
        assert!(matches!(r.protocol.ops.first(), Some(CoarseOp::AppendThermalQubit { .. })));
        assert!(matches!(r.protocol.ops.last(), Some(CoarseOp::DiscardLevels { .. })));
        assert!(!r.used_infinite_levels);
        assert!(r.residual_error < 1e-9);
        // identity degenerates to append + discard alone
        let rid = synth_general(&rho, &rho.state, LN2).unwrap();
        assert_eq!(rid.plt_count, 0);
    }

    #[test]
    fn general_restores_the_ancilla() {
        let rho = sys(vec![0.0, LN2], vec![0.5, 0.5]);
        let sigma = DiagonalState::new(vec![0.7, 0.3]).unwrap();
        let r = synth_general(&rho, &sigma, LN2).unwrap();
        // replay everything except the final discard; the ancilla marginal
        // must be thermal again
        let mut partial = r.protocol.clone();
        let last = partial.ops.pop().unwrap();
        assert!(matches!(last, CoarseOp::DiscardLevels { .. }));
        let (pre, _, _) = apply_protocol(&rho, &partial).unwrap();
        let z_a = 1.0 + (-LN2).exp();
        for a in 0..2 {
            let marginal: f64 = (0..2).map(|i| pre.population(i * 2 + a)).sum();
            let tau = (-(LN2 * a as f64)).exp() / z_a;
            assert!((marginal - tau).abs() < 1e-9, "ancilla marginal off: {marginal} vs {tau}");
        }
    }

    #[test]
    fn general_infeasible_is_refused() {
        let gibbs = {
            let h = crate::system::Hamiltonian::new(vec![0.0, LN2]).unwrap();
            let b = crate::system::Beta::new(1.0).unwrap();
            ThermoSystem::new(h.clone(), gibbs_state(&h, b), b).unwrap()
        };
        let sigma = DiagonalState::new(vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            synth_general(&gibbs, &sigma, LN2),
            Err(ThermoError::Infeasible)
        ));
    }

    #[test]
    fn approx_meets_delta_on_the_qubit_instance() {
        let rho = sys(vec![0.0, LN2], vec![0.5, 0.5]);
        let sigma = DiagonalState::new(vec![0.7, 0.3]).unwrap();
        let r = synth_general_approx(&rho, &sigma, LN2, 40.0, 1e-6).unwrap();
        assert!(!r.used_infinite_levels);
        assert!(r.residual_error <= 1e-6, "residual {}", r.residual_error);
        // replayed output actually lands on sigma
        let (out, _, _) = apply_protocol(&rho, &r.protocol).unwrap();
        for i in 0..2 {
            assert!((out.population(i) - sigma.population(i)).abs() < 1e-9);
        }
        assert!(out
            .hamiltonian
            .energies()
            .iter()
            .zip(rho.hamiltonian.energies())
            .all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn approx_rejects_touching_curves() {
        // sigma = rho makes the curves coincide everywhere
        let rho = sys(vec![0.0, LN2], vec![0.5, 0.5]);
        assert!(matches!(
            synth_general_approx(&rho, &rho.state, LN2, 40.0, 1e-6),
            Err(ThermoError::CurvesTouch(_))
        ));
    }

    #[test]
    fn approx_residual_is_monotone_in_the_cap() {
        let rho = sys(vec![0.0, LN2], vec![0.5, 0.5]);
        let sigma = DiagonalState::new(vec![0.7, 0.3]).unwrap();
        let r40 = synth_general_approx(&rho, &sigma, LN2, 40.0, 1e-6).unwrap();
        let r50 = synth_general_approx(&rho, &sigma, LN2, 50.0, 1e-6).unwrap();
        assert!(r50.residual_error <= r40.residual_error);
    }

    #[test]
    fn emitted_protocols_are_sound() {
        let rho = sys(vec![0.0, 0.4, 1.1], vec![0.6, 0.25, 0.15]);
        let sigma = DiagonalState::new(vec![0.45, 0.33, 0.22]).unwrap();
        let target = rho.with_populations(sigma.clone()).unwrap();
        if thermo_majorizes(&rho, &target, 1e-9).unwrap() {
            let r = synth_general(&rho, &sigma, LN2).unwrap();
            let (out, dist, _) = apply_protocol(&rho, &r.protocol).unwrap();
            assert!(thermo_majorizes(&rho, &out, 1e-6).unwrap());
            assert_eq!(dist.worst_case(), 0.0);
            assert!(r.residual_error < 1e-9);
        }
    }
}
