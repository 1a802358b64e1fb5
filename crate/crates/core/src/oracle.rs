//! Exact desk-scale references: a dense LP solver, the Planet-relaxation LP,
//! and a complete verifier by activation-pattern enumeration.
//!
//! These are test and acceptance oracles, deliberately favouring determinism
//! and checkability over speed. The simplex uses a dense tableau with
//! Dantzig pivoting, switching to Bland's rule after a run of degenerate
//! pivots.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::model::{evaluate, InputDomain, VerificationNetwork};
use crate::relax::{interval_bounds, relu_quantities, BoundsStack, Phase, SplitSet};

/// Hard cap on LP variables; the oracle is a desk-scale reference.
pub const LP_VAR_CAP: usize = 500;
/// Hard cap on total ReLUs for pattern enumeration.
pub const PATTERN_RELU_CAP: usize = 24;

const TOL: f64 = 1e-9;
const DEGENERATE_SWITCH: usize = 40;
const MAX_PIVOTS: usize = 100_000;

/// General-form linear program `min cᵀx` subject to `A_ub·x <= b_ub`,
/// `A_eq·x = b_eq` and element-wise variable bounds (±∞ allowed).
#[derive(Debug, Clone)]
pub struct LpProblem {
    pub objective: Array1<f64>,
    pub a_ub: Array2<f64>,
    pub b_ub: Array1<f64>,
    pub a_eq: Array2<f64>,
    pub b_eq: Array1<f64>,
    pub lower: Array1<f64>,
    pub upper: Array1<f64>,
}

impl LpProblem {
    pub fn new(objective: Array1<f64>) -> Self {
        let n = objective.len();
        LpProblem {
            objective,
            a_ub: Array2::zeros((0, n)),
            b_ub: Array1::zeros(0),
            a_eq: Array2::zeros((0, n)),
            b_eq: Array1::zeros(0),
            lower: Array1::from_elem(n, f64::NEG_INFINITY),
            upper: Array1::from_elem(n, f64::INFINITY),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn push_ub(&mut self, row: Array1<f64>, rhs: f64) {
        self.a_ub.push_row(row.view()).expect("row length");
        self.b_ub
            .append(ndarray::Axis(0), Array1::from(vec![rhs]).view())
            .unwrap();
    }

    pub fn push_eq(&mut self, row: Array1<f64>, rhs: f64) {
        self.a_eq.push_row(row.view()).expect("row length");
        self.b_eq
            .append(ndarray::Axis(0), Array1::from(vec![rhs]).view())
            .unwrap();
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Optimal point in the original variable space (when optimal).
    pub x: Option<Array1<f64>>,
    pub value: Option<f64>,
}

enum VarMap {
    /// x = lo + y[col]
    Shifted { col: usize, lo: f64 },
    /// x = hi − y[col]
    Flipped { col: usize, hi: f64 },
    /// x = y[pos] − y[neg]
    Free { pos: usize, neg: usize },
}

struct Tableau {
    a: Array2<f64>,   // m × n
    rhs: Array1<f64>, // m, kept nonnegative
    basis: Vec<usize>,
    banned: Vec<bool>, // columns that may never enter (artificials)
}

impl Tableau {
    /// Run the simplex for objective `cost` starting from the current basis.
    /// Returns (reduced costs, objective value, optimal?); `optimal = false`
    /// means an unbounded descent direction was found.
    fn optimize(&mut self, cost: &Array1<f64>) -> Result<(Array1<f64>, f64, bool)> {
        let (m, n) = self.a.dim();
        let mut r = cost.clone();
        let mut v = 0.0;
        for i in 0..m {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                for j in 0..n {
                    r[j] -= cb * self.a[(i, j)];
                }
                v += cb * self.rhs[i];
            }
        }
        let mut degenerate_run = 0usize;
        for _ in 0..MAX_PIVOTS {
            let bland = degenerate_run >= DEGENERATE_SWITCH;
            let mut enter: Option<usize> = None;
            if bland {
                for j in 0..n {
                    if !self.banned[j] && r[j] < -TOL {
                        enter = Some(j);
                        break;
                    }
                }
            } else {
                let mut best = -TOL;
                for j in 0..n {
                    if !self.banned[j] && r[j] < best {
                        best = r[j];
                        enter = Some(j);
                    }
                }
            }
            let Some(col) = enter else {
                return Ok((r, v, true));
            };
            // Ratio test; ties break on the smallest basic variable index,
            // which together with Bland's entering rule prevents cycling.
            let mut leave: Option<usize> = None;
            let mut best_ratio = f64::INFINITY;
            for i in 0..m {
                let aij = self.a[(i, col)];
                if aij > TOL {
                    let ratio = self.rhs[i] / aij;
                    let better = ratio < best_ratio - TOL
                        || (ratio < best_ratio + TOL
                            && leave.map_or(true, |l| self.basis[i] < self.basis[l]));
                    if better {
                        best_ratio = best_ratio.min(ratio);
                        leave = Some(i);
                    }
                }
            }
            let Some(row) = leave else {
                return Ok((r, v, false));
            };
            if best_ratio <= TOL {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            self.pivot(row, col, &mut r, &mut v);
        }
        Err(Error::Lp("pivot limit exceeded".into()))
    }

    fn pivot(&mut self, row: usize, col: usize, r: &mut Array1<f64>, v: &mut f64) {
        let (m, n) = self.a.dim();
        let piv = self.a[(row, col)];
        for j in 0..n {
            self.a[(row, j)] /= piv;
        }
        self.rhs[row] /= piv;
        for i in 0..m {
            if i == row {
                continue;
            }
            let factor = self.a[(i, col)];
            if factor != 0.0 {
                for j in 0..n {
                    self.a[(i, j)] -= factor * self.a[(row, j)];
                }
                self.rhs[i] -= factor * self.rhs[row];
                if self.rhs[i] < 0.0 && self.rhs[i] > -TOL {
                    self.rhs[i] = 0.0;
                }
            }
        }
        let rf = r[col];
        if rf != 0.0 {
            for j in 0..n {
                r[j] -= rf * self.a[(row, j)];
            }
            *v += rf * self.rhs[row];
        }
        self.basis[row] = col;
    }
}

/// Two-phase dense simplex. Returns an optimal basic solution, or the
/// infeasible/unbounded status.
pub fn solve_lp(p: &LpProblem) -> Result<LpSolution> {
    let n_orig = p.n_vars();
    if n_orig > LP_VAR_CAP {
        return Err(Error::SizeCapExceeded {
            limit: LP_VAR_CAP,
            requested: n_orig,
        });
    }
    if p.a_ub.ncols() != n_orig || p.a_eq.ncols() != n_orig {
        return Err(Error::Lp("constraint width mismatch".into()));
    }

    // --- standard form: all variables >= 0 ----------------------------------
    let mut maps: Vec<VarMap> = Vec::with_capacity(n_orig);
    let mut n_std = 0usize;
    let mut extra_ub: Vec<(usize, f64)> = Vec::new(); // y[col] <= bound
    for i in 0..n_orig {
        let (lo, hi) = (p.lower[i], p.upper[i]);
        if lo > hi {
            return Ok(LpSolution {
                status: LpStatus::Infeasible,
                x: None,
                value: None,
            });
        }
        if lo.is_finite() {
            maps.push(VarMap::Shifted { col: n_std, lo });
            if hi.is_finite() {
                extra_ub.push((n_std, hi - lo));
            }
            n_std += 1;
        } else if hi.is_finite() {
            maps.push(VarMap::Flipped { col: n_std, hi });
            n_std += 1;
        } else {
            maps.push(VarMap::Free {
                pos: n_std,
                neg: n_std + 1,
            });
            n_std += 2;
        }
    }

    let m_ub = p.a_ub.nrows() + extra_ub.len();
    let m_eq = p.a_eq.nrows();
    let m = m_ub + m_eq;
    let n_total = n_std + m_ub; // one slack per inequality row

    let mut a = Array2::zeros((m, n_total));
    let mut rhs = Array1::zeros(m);
    let mut c = Array1::zeros(n_total);
    let mut c_offset = 0.0_f64;

    let emit = |a: &mut Array2<f64>,
                dst_row: usize,
                src: ndarray::ArrayView1<f64>,
                rhs_slot: &mut f64,
                maps: &[VarMap]| {
        for (i, &coef) in src.iter().enumerate() {
            if coef == 0.0 {
                continue;
            }
            match &maps[i] {
                VarMap::Shifted { col, lo } => {
                    a[(dst_row, *col)] += coef;
                    *rhs_slot -= coef * lo;
                }
                VarMap::Flipped { col, hi } => {
                    a[(dst_row, *col)] -= coef;
                    *rhs_slot -= coef * hi;
                }
                VarMap::Free { pos, neg } => {
                    a[(dst_row, *pos)] += coef;
                    a[(dst_row, *neg)] -= coef;
                }
            }
        }
    };

    for r in 0..p.a_ub.nrows() {
        let mut slot = p.b_ub[r];
        emit(&mut a, r, p.a_ub.row(r), &mut slot, &maps);
        rhs[r] = slot;
        a[(r, n_std + r)] = 1.0;
    }
    for (k, (col, bound)) in extra_ub.iter().enumerate() {
        let r = p.a_ub.nrows() + k;
        a[(r, *col)] = 1.0;
        rhs[r] = *bound;
        a[(r, n_std + r)] = 1.0;
    }
    for r in 0..m_eq {
        let dst = m_ub + r;
        let mut slot = p.b_eq[r];
        emit(&mut a, dst, p.a_eq.row(r), &mut slot, &maps);
        rhs[dst] = slot;
    }
    for (i, &coef) in p.objective.iter().enumerate() {
        match &maps[i] {
            VarMap::Shifted { col, lo } => {
                c[*col] += coef;
                c_offset += coef * lo;
            }
            VarMap::Flipped { col, hi } => {
                c[*col] -= coef;
                c_offset += coef * hi;
            }
            VarMap::Free { pos, neg } => {
                c[*pos] += coef;
                c[*neg] -= coef;
            }
        }
    }

    // Nonnegative rhs; flipped slack columns lose their identity role.
    let mut needs_artificial = vec![false; m];
    for r in 0..m {
        if rhs[r] < 0.0 {
            for j in 0..n_total {
                a[(r, j)] = -a[(r, j)];
            }
            rhs[r] = -rhs[r];
            needs_artificial[r] = true;
        } else if r >= m_ub {
            needs_artificial[r] = true;
        }
    }

    // --- phase 1 -------------------------------------------------------------
    let n_art: usize = needs_artificial.iter().filter(|b| **b).count();
    let mut full = Array2::zeros((m, n_total + n_art));
    full.slice_mut(ndarray::s![.., ..n_total]).assign(&a);
    let mut basis = vec![0usize; m];
    let mut art_cols = Vec::new();
    let mut next_art = n_total;
    for r in 0..m {
        if needs_artificial[r] {
            full[(r, next_art)] = 1.0;
            basis[r] = next_art;
            art_cols.push(next_art);
            next_art += 1;
        } else {
            basis[r] = n_std + r;
        }
    }
    let mut tab = Tableau {
        a: full,
        rhs,
        basis,
        banned: vec![false; n_total + n_art],
    };
    if n_art > 0 {
        let mut phase1 = Array1::zeros(n_total + n_art);
        for &j in &art_cols {
            phase1[j] = 1.0;
        }
        let (_, v1, optimal) = tab.optimize(&phase1)?;
        if !optimal {
            return Err(Error::Lp("phase 1 unbounded".into()));
        }
        if v1 > 1e-7 {
            return Ok(LpSolution {
                status: LpStatus::Infeasible,
                x: None,
                value: None,
            });
        }
        for &j in &art_cols {
            tab.banned[j] = true;
        }
        // Drive remaining basic artificials out; rows where that is
        // impossible are linearly dependent and get dropped.
        let mut drop_rows = Vec::new();
        for i in 0..tab.basis.len() {
            if tab.basis[i] >= n_total {
                let mut pivoted = false;
                for j in 0..n_total {
                    if tab.a[(i, j)].abs() > 1e-7 {
                        let mut dummy_r = Array1::zeros(tab.a.ncols());
                        let mut dummy_v = 0.0;
                        tab.pivot(i, j, &mut dummy_r, &mut dummy_v);
                        pivoted = true;
                        break;
                    }
                }
                if !pivoted {
                    drop_rows.push(i);
                }
            }
        }
        if !drop_rows.is_empty() {
            let keep: Vec<usize> = (0..tab.basis.len())
                .filter(|i| !drop_rows.contains(i))
                .collect();
            tab.a = tab.a.select(ndarray::Axis(0), &keep);
            tab.rhs = tab.rhs.select(ndarray::Axis(0), &keep);
            tab.basis = keep.iter().map(|&i| tab.basis[i]).collect();
        }
    }

    // --- phase 2 -------------------------------------------------------------
    let mut cost = Array1::zeros(tab.a.ncols());
    cost.slice_mut(ndarray::s![..n_total]).assign(&c);
    let (reduced, v2, optimal) = tab.optimize(&cost)?;
    if !optimal {
        return Ok(LpSolution {
            status: LpStatus::Unbounded,
            x: None,
            value: None,
        });
    }
    debug_assert!(reduced
        .iter()
        .enumerate()
        .all(|(j, r)| tab.banned[j] || *r >= -1e-7));

    let mut y = vec![0.0_f64; n_total];
    for (i, &b) in tab.basis.iter().enumerate() {
        if b < n_total {
            y[b] = tab.rhs[i];
        }
    }
    let mut x = Array1::zeros(n_orig);
    for (i, map) in maps.iter().enumerate() {
        x[i] = match map {
            VarMap::Shifted { col, lo } => lo + y[*col],
            VarMap::Flipped { col, hi } => hi - y[*col],
            VarMap::Free { pos, neg } => y[*pos] - y[*neg],
        };
    }
    Ok(LpSolution {
        status: LpStatus::Optimal,
        x: Some(x),
        value: Some(v2 + c_offset),
    })
}

/// Outcome of the Planet LP on one subdomain. An infeasible subdomain (empty
/// split region) reports `+inf`, which prunes it.
#[derive(Debug, Clone)]
pub struct PlanetBound {
    pub value: f64,
    /// LP-optimal input point (absent when infeasible).
    pub input: Option<Array1<f64>>,
}

/// Exact optimum of the Planet relaxation: box constraints, per-neuron
/// triangle hulls, affine chaining, and split clamps (reflected both in the
/// stack's bounds and enforced here).
pub fn planet_lp_bound(
    net: &VerificationNetwork,
    stack: &BoundsStack,
    splits: &SplitSet,
) -> Result<PlanetBound> {
    let depth = net.depth();
    let d = net.input_dim();
    // Variable layout: z0 | (ẑ_k, z_k) for hidden k | ẑ_L.
    let mut offsets_pre = Vec::with_capacity(depth);
    let mut offsets_post = Vec::with_capacity(depth - 1);
    let mut n_vars = d;
    for k in 1..depth {
        offsets_pre.push(n_vars);
        n_vars += net.layer_dim(k);
        offsets_post.push(n_vars);
        n_vars += net.layer_dim(k);
    }
    offsets_pre.push(n_vars);
    n_vars += 1;
    if n_vars > LP_VAR_CAP {
        return Err(Error::SizeCapExceeded {
            limit: LP_VAR_CAP,
            requested: n_vars,
        });
    }

    let mut objective = Array1::zeros(n_vars);
    objective[offsets_pre[depth - 1]] = 1.0;
    let mut p = LpProblem::new(objective);

    for j in 0..d {
        p.lower[j] = stack.input_lower[j];
        p.upper[j] = stack.input_upper[j];
    }
    for k in 1..=depth {
        for j in 0..net.layer_dim(k) {
            let (mut lo, mut hi) = (stack.lower(k)[j], stack.upper(k)[j]);
            if let Some(sign) = splits.get(k, j) {
                match sign {
                    crate::relax::SplitSign::Active => lo = lo.max(0.0),
                    crate::relax::SplitSign::Inactive => hi = hi.min(0.0),
                }
            }
            if lo > hi {
                return Ok(PlanetBound {
                    value: f64::INFINITY,
                    input: None,
                });
            }
            p.lower[offsets_pre[k - 1] + j] = lo;
            p.upper[offsets_pre[k - 1] + j] = hi;
        }
    }

    for k in 1..=depth {
        let (w, b) = net.layer_view(k);
        for j in 0..net.layer_dim(k) {
            let mut row = Array1::zeros(n_vars);
            row[offsets_pre[k - 1] + j] = 1.0;
            if k == 1 {
                for i in 0..d {
                    row[i] -= w[(j, i)];
                }
            } else {
                for i in 0..net.layer_dim(k - 1) {
                    row[offsets_post[k - 2] + i] -= w[(j, i)];
                }
            }
            p.push_eq(row, b[j]);
        }
    }

    for k in 1..depth {
        for j in 0..net.layer_dim(k) {
            let pre = offsets_pre[k - 1] + j;
            let post = offsets_post[k - 1] + j;
            let st = relu_quantities(p.lower[pre], p.upper[pre])?;
            match st.phase {
                Phase::Blocked => {
                    p.lower[post] = 0.0;
                    p.upper[post] = 0.0;
                }
                Phase::Passing => {
                    let mut row = Array1::zeros(n_vars);
                    row[post] = 1.0;
                    row[pre] = -1.0;
                    p.push_eq(row, 0.0);
                    p.lower[post] = p.lower[pre].max(0.0);
                    p.upper[post] = p.upper[pre].max(0.0);
                }
                Phase::Ambiguous => {
                    p.lower[post] = 0.0;
                    p.upper[post] = p.upper[pre];
                    // z >= ẑ  ⇔  ẑ − z <= 0
                    let mut row = Array1::zeros(n_vars);
                    row[pre] = 1.0;
                    row[post] = -1.0;
                    p.push_ub(row, 0.0);
                    // z <= α·ẑ + β
                    let mut row = Array1::zeros(n_vars);
                    row[post] = 1.0;
                    row[pre] = -st.alpha;
                    p.push_ub(row, st.beta);
                }
            }
        }
    }

    let sol = solve_lp(&p)?;
    match sol.status {
        LpStatus::Optimal => {
            let x = sol.x.expect("optimal has point");
            let input = Array1::from_iter(x.iter().take(d).copied());
            Ok(PlanetBound {
                value: sol.value.expect("optimal has value"),
                input: Some(input),
            })
        }
        LpStatus::Infeasible => Ok(PlanetBound {
            value: f64::INFINITY,
            input: None,
        }),
        LpStatus::Unbounded => Err(Error::Lp("planet LP unbounded".into())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyStatus {
    /// Property holds: min over the domain is nonnegative.
    Unsat,
    /// Counterexample exists.
    Sat,
}

#[derive(Debug, Clone)]
pub struct ExhaustiveResult {
    pub status: VerifyStatus,
    /// Exact global minimum of the network over the domain.
    pub min_value: f64,
    /// Input achieving `f(x) < 0` when SAT.
    pub witness: Option<Array1<f64>>,
}

/// Complete verification by enumerating activation patterns consistent with
/// interval bounds. Each fixed pattern turns the network into an affine map
/// restricted to a polytope; a depth-first search with LP feasibility pruning
/// keeps the enumeration tractable.
pub fn exhaustive_verify(
    net: &VerificationNetwork,
    domain: &InputDomain,
) -> Result<ExhaustiveResult> {
    exhaustive_min(net, domain, &SplitSet::new())
}

/// Exact minimum over the subregion selected by `splits` (empty region gives
/// +inf). The split neurons are pre-assigned in the pattern search, so split
/// constraints hold exactly.
pub fn exhaustive_min(
    net: &VerificationNetwork,
    domain: &InputDomain,
    splits: &SplitSet,
) -> Result<ExhaustiveResult> {
    let total_relus: usize = (1..net.depth()).map(|k| net.layer_dim(k)).sum();
    if total_relus > PATTERN_RELU_CAP {
        return Err(Error::SizeCapExceeded {
            limit: PATTERN_RELU_CAP,
            requested: total_relus,
        });
    }
    let stack = interval_bounds(net, domain, &SplitSet::new())?;
    // Every neuron that is ambiguous on the full domain branches, except the
    // split ones, which are pinned to their decided phase.
    let mut ambiguous = Vec::new();
    let mut pinned = Vec::new();
    for (k, j) in stack.ambiguous_neurons() {
        match splits.get(k, j) {
            Some(crate::relax::SplitSign::Active) => pinned.push(((k, j), true)),
            Some(crate::relax::SplitSign::Inactive) => pinned.push(((k, j), false)),
            None => ambiguous.push((k, j)),
        }
    }
    // Order: pinned first (their assignment is fixed), then free ones — the
    // DFS below works over a single (layer, index)-sorted candidate list, so
    // rebuild it sorted with a fixed prefix mask instead.
    let mut all: Vec<(usize, usize)> = ambiguous.iter().chain(pinned.iter().map(|(n, _)| n)).copied().collect();
    all.sort_unstable();
    let fixed: std::collections::BTreeMap<(usize, usize), bool> =
        pinned.into_iter().collect();

    let mut best = ExhaustiveResult {
        status: VerifyStatus::Unsat,
        min_value: f64::INFINITY,
        witness: None,
    };
    let mut assignment: Vec<bool> = Vec::with_capacity(all.len());
    dfs(net, domain, &stack, &all, &fixed, &mut assignment, &mut best)?;
    if best.min_value.is_infinite() {
        if splits.is_empty() {
            return Err(Error::Lp("no feasible activation pattern".into()));
        }
        // Empty split region.
        return Ok(best);
    }
    best.status = if best.min_value < 0.0 {
        VerifyStatus::Sat
    } else {
        VerifyStatus::Unsat
    };
    if best.status == VerifyStatus::Unsat {
        best.witness = None;
    }
    Ok(best)
}

/// LP over the input box for a (partial) activation pattern. Constraints fix
/// the signs of the assigned ambiguous neurons; with `with_objective` the
/// objective is the network output on that pattern (up to its affine
/// constant, which cancels in the argmin).
fn pattern_lp(
    net: &VerificationNetwork,
    domain: &InputDomain,
    stack: &BoundsStack,
    ambiguous: &[(usize, usize)],
    assignment: &[bool],
    with_objective: bool,
) -> LpProblem {
    let d = net.input_dim();
    let mut p = LpProblem::new(Array1::zeros(d));
    p.lower = domain.lower.clone();
    p.upper = domain.upper.clone();

    let (w1, b1) = net.layer_view(1);
    let mut m = w1.clone();
    let mut v = b1.clone();

    let assigned: std::collections::BTreeMap<(usize, usize), bool> = ambiguous
        .iter()
        .take(assignment.len())
        .copied()
        .zip(assignment.iter().copied())
        .collect();
    let last_assigned_layer = assigned.keys().map(|(k, _)| *k).max().unwrap_or(0);

    for k in 1..=net.depth() {
        for j in 0..net.layer_dim(k) {
            if let Some(&active) = assigned.get(&(k, j)) {
                let row = m.row(j).to_owned();
                if active {
                    p.push_ub(-row, v[j]); // ẑ >= 0
                } else {
                    p.push_ub(row, -v[j]); // ẑ <= 0
                }
            }
        }
        if k == net.depth() || (!with_objective && k >= last_assigned_layer) {
            break;
        }
        // Gate the layer: passing keeps the row, blocked zeroes it. The
        // assignment covers all ambiguous neurons up to this layer, so the
        // fallback on phase only hits interval-fixed neurons.
        let mut gated_m = m.clone();
        let mut gated_v = v.clone();
        for j in 0..net.layer_dim(k) {
            let pass = match assigned.get(&(k, j)) {
                Some(&active) => active,
                None => stack.relu_state(k, j).phase == Phase::Passing,
            };
            if !pass {
                gated_m.row_mut(j).fill(0.0);
                gated_v[j] = 0.0;
            }
        }
        let (w, b) = net.layer_view(k + 1);
        m = w.dot(&gated_m);
        v = w.dot(&gated_v) + b;
    }
    if with_objective {
        p.objective = m.row(0).to_owned();
    }
    p
}

fn dfs(
    net: &VerificationNetwork,
    domain: &InputDomain,
    stack: &BoundsStack,
    ambiguous: &[(usize, usize)],
    fixed: &std::collections::BTreeMap<(usize, usize), bool>,
    assignment: &mut Vec<bool>,
    best: &mut ExhaustiveResult,
) -> Result<()> {
    if assignment.len() == ambiguous.len() {
        let p = pattern_lp(net, domain, stack, ambiguous, assignment, true);
        let sol = solve_lp(&p)?;
        if sol.status == LpStatus::Optimal {
            let x = sol.x.expect("optimal");
            // The LP objective omits the affine constant; the true network
            // value at the optimum is identical on this pattern.
            let value = evaluate(net, &x)?;
            if value < best.min_value {
                best.min_value = value;
                best.witness = Some(x);
            }
        }
        return Ok(());
    }
    let branches: &[bool] = match fixed.get(&ambiguous[assignment.len()]) {
        Some(&true) => &[true],
        Some(&false) => &[false],
        None => &[false, true],
    };
    for &branch in branches {
        assignment.push(branch);
        let feasible = {
            let mut p = pattern_lp(net, domain, stack, ambiguous, assignment, false);
            p.objective = Array1::zeros(p.n_vars());
            solve_lp(&p)?.status == LpStatus::Optimal
        };
        if feasible {
            dfs(net, domain, stack, ambiguous, fixed, assignment, best)?;
        }
        assignment.pop();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Layer;
    use crate::relax::linear_backward_bounds;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lp_simple_bound() {
        let mut p = LpProblem::new(array![1.0]);
        p.lower[0] = 0.3;
        let sol = solve_lp(&p).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!((sol.value.unwrap() - 0.3).abs() < 1e-9);
    }

    #[test]
    fn lp_triangle_vertex_optimum() {
        // min x+y over the triangle {(−1,0),(1,1),(0,0)} -> −1 at (−1,0).
        // Half-planes: edge (−1,0)-(1,1): −x+2y <= 1; edge (1,1)-(0,0):
        // x−y <= 0; edge (0,0)-(−1,0): −y <= 0.
        let mut p = LpProblem::new(array![1.0, 1.0]);
        p.push_ub(array![-1.0, 2.0], 1.0);
        p.push_ub(array![1.0, -1.0], 0.0);
        p.push_ub(array![0.0, -1.0], 0.0);
        let sol = solve_lp(&p).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!((sol.value.unwrap() - (-1.0)).abs() < 1e-9);
        let x = sol.x.unwrap();
        assert!((x[0] - (-1.0)).abs() < 1e-9 && x[1].abs() < 1e-9);
    }

    #[test]
    fn lp_detects_infeasible_and_unbounded() {
        let mut p = LpProblem::new(array![1.0]);
        p.push_ub(array![1.0], -1.0);
        p.lower[0] = 0.0;
        assert_eq!(solve_lp(&p).unwrap().status, LpStatus::Infeasible);

        let p = LpProblem::new(array![-1.0]);
        assert_eq!(solve_lp(&p).unwrap().status, LpStatus::Unbounded);
    }

    #[test]
    fn lp_equality_and_free_vars() {
        let mut p = LpProblem::new(array![1.0, 1.0]);
        p.push_eq(array![1.0, 1.0], 2.0);
        p.push_eq(array![1.0, -1.0], 0.0);
        let sol = solve_lp(&p).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        let x = sol.x.unwrap();
        assert!((x[0] - 1.0).abs() < 1e-9 && (x[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn lp_size_cap_enforced() {
        let p = LpProblem::new(Array1::zeros(LP_VAR_CAP + 1));
        assert!(matches!(
            solve_lp(&p),
            Err(Error::SizeCapExceeded { .. })
        ));
    }

    fn solve_dense(a: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
        let n = b.len();
        let mut m = a.clone();
        let mut r = b.clone();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| {
                m[(i, col)]
                    .abs()
                    .partial_cmp(&m[(j, col)].abs())
                    .unwrap()
            })?;
            if m[(piv, col)].abs() < 1e-10 {
                return None;
            }
            if piv != col {
                for j in 0..n {
                    m.swap((col, j), (piv, j));
                }
                r.swap(col, piv);
            }
            for i in 0..n {
                if i != col {
                    let f = m[(i, col)] / m[(col, col)];
                    if f != 0.0 {
                        for j in 0..n {
                            m[(i, j)] -= f * m[(col, j)];
                        }
                        r[i] -= f * r[col];
                    }
                }
            }
        }
        Some(Array1::from_shape_fn(n, |i| r[i] / m[(i, i)]))
    }

    /// Oracle-of-the-oracle: enumerate all constraint-plane intersections,
    /// keep the feasible ones, take the best objective.
    fn brute_force_vertex_min(p: &LpProblem) -> Option<f64> {
        let n = p.n_vars();
        let mut planes: Vec<(Array1<f64>, f64)> = Vec::new();
        for r in 0..p.a_ub.nrows() {
            planes.push((p.a_ub.row(r).to_owned(), p.b_ub[r]));
        }
        for r in 0..p.a_eq.nrows() {
            planes.push((p.a_eq.row(r).to_owned(), p.b_eq[r]));
        }
        for i in 0..n {
            let mut e = Array1::zeros(n);
            e[i] = 1.0;
            if p.lower[i].is_finite() {
                planes.push((e.clone(), p.lower[i]));
            }
            if p.upper[i].is_finite() {
                planes.push((e, p.upper[i]));
            }
        }
        let mut best: Option<f64> = None;
        let mut combo = vec![0usize; n];
        fn rec(
            planes: &[(Array1<f64>, f64)],
            combo: &mut Vec<usize>,
            depth: usize,
            start: usize,
            p: &LpProblem,
            best: &mut Option<f64>,
        ) {
            let n = p.n_vars();
            if depth == n {
                let mut a = Array2::zeros((n, n));
                let mut b = Array1::zeros(n);
                for (r, &pi) in combo.iter().enumerate() {
                    a.row_mut(r).assign(&planes[pi].0);
                    b[r] = planes[pi].1;
                }
                if let Some(x) = solve_dense(&a, &b) {
                    let feas = (0..p.a_ub.nrows())
                        .all(|r| p.a_ub.row(r).dot(&x) <= p.b_ub[r] + 1e-7)
                        && (0..p.a_eq.nrows())
                            .all(|r| (p.a_eq.row(r).dot(&x) - p.b_eq[r]).abs() <= 1e-7)
                        && (0..n)
                            .all(|i| x[i] >= p.lower[i] - 1e-7 && x[i] <= p.upper[i] + 1e-7);
                    if feas {
                        let v = p.objective.dot(&x);
                        *best = Some(best.map_or(v, |b: f64| b.min(v)));
                    }
                }
                return;
            }
            for s in start..planes.len() {
                combo[depth] = s;
                rec(planes, combo, depth + 1, s + 1, p, best);
            }
        }
        rec(&planes, &mut combo, 0, 0, p, &mut best);
        best
    }

    #[test]
    fn lp_matches_vertex_enumeration_on_random_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut solved = 0;
        for _ in 0..30 {
            let n = rng.gen_range(2..=3usize);
            let m = rng.gen_range(1..=4usize);
            let mut p =
                LpProblem::new(Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0)));
            for i in 0..n {
                p.lower[i] = rng.gen_range(-2.0..0.0);
                p.upper[i] = rng.gen_range(0.0..2.0);
            }
            for _ in 0..m {
                let row = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
                p.push_ub(row, rng.gen_range(-0.5..1.5));
            }
            let sol = solve_lp(&p).unwrap();
            let brute = brute_force_vertex_min(&p);
            match sol.status {
                LpStatus::Optimal => {
                    let v = sol.value.unwrap();
                    let b = brute.expect("brute force should find a vertex");
                    assert!((v - b).abs() < 1e-6, "simplex {v} vs brute {b}");
                    solved += 1;
                }
                LpStatus::Infeasible => assert!(brute.is_none()),
                LpStatus::Unbounded => unreachable!("boxed problems are bounded"),
            }
        }
        assert!(solved >= 10);
    }

    #[test]
    fn lp_solution_feasibility_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let n = rng.gen_range(2..=4usize);
            let mut p =
                LpProblem::new(Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0)));
            for i in 0..n {
                p.lower[i] = -1.0;
                p.upper[i] = 1.0;
            }
            let row = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
            p.push_eq(row, 0.1);
            let sol = solve_lp(&p).unwrap();
            if sol.status == LpStatus::Optimal {
                let x = sol.x.unwrap();
                assert!((p.a_eq.row(0).dot(&x) - 0.1).abs() <= 1e-9);
                for i in 0..n {
                    assert!(x[i] >= -1.0 - 1e-9 && x[i] <= 1.0 + 1e-9);
                }
            }
        }
    }

    fn hand_gap_net() -> (VerificationNetwork, InputDomain) {
        // Two identical neurons ẑ = x on [−1,1]; output z_1 − z_2. The
        // relaxation can put z_1 on its lower envelope and z_2 on its upper,
        // giving −0.5 at x = 0, while the true minimum is 0.
        let net = VerificationNetwork::new(vec![
            Layer::dense(array![[1.0], [1.0]], array![0.0, 0.0]).unwrap(),
            Layer::dense(array![[1.0, -1.0]], array![0.0]).unwrap(),
        ])
        .unwrap();
        let dom = InputDomain::new(array![-1.0], array![1.0]).unwrap();
        (net, dom)
    }

    #[test]
    fn planet_lp_hand_value() {
        let (net, dom) = hand_gap_net();
        let stack = linear_backward_bounds(&net, &dom, &SplitSet::new()).unwrap();
        let b = planet_lp_bound(&net, &stack, &SplitSet::new()).unwrap();
        assert!((b.value - (-0.5)).abs() < 1e-9, "value {}", b.value);
        let exact = exhaustive_verify(&net, &dom).unwrap();
        assert!((exact.min_value - 0.0).abs() < 1e-9);
    }

    #[test]
    fn planet_lp_exact_when_no_ambiguity() {
        let net = VerificationNetwork::new(vec![
            Layer::dense(array![[1.0, 0.5], [-0.5, 1.0]], array![3.0, 3.0]).unwrap(),
            Layer::dense(array![[1.0, -2.0]], array![0.25]).unwrap(),
        ])
        .unwrap();
        let dom = InputDomain::new(array![-1.0, -1.0], array![1.0, 1.0]).unwrap();
        let stack = linear_backward_bounds(&net, &dom, &SplitSet::new()).unwrap();
        assert!(stack.ambiguous_neurons().is_empty());
        let b = planet_lp_bound(&net, &stack, &SplitSet::new()).unwrap();
        let exact = exhaustive_verify(&net, &dom).unwrap();
        assert!((b.value - exact.min_value).abs() < 1e-7);
    }

    #[test]
    fn exhaustive_trivial_properties() {
        // f(x) = x + 1 on [0,1]: UNSAT with min 1.
        let net = VerificationNetwork::new(vec![
            Layer::dense(array![[1.0]], array![2.0]).unwrap(), // passing on [0,1]
            Layer::dense(array![[1.0]], array![-1.0]).unwrap(),
        ])
        .unwrap();
        let dom = InputDomain::new(array![0.0], array![1.0]).unwrap();
        let r = exhaustive_verify(&net, &dom).unwrap();
        assert_eq!(r.status, VerifyStatus::Unsat);
        assert!((r.min_value - 1.0).abs() < 1e-9);

        // f(x) = x - 0.5 on [0,1]: SAT with witness below 0.5.
        let net = VerificationNetwork::new(vec![
            Layer::dense(array![[1.0]], array![2.0]).unwrap(),
            Layer::dense(array![[1.0]], array![-2.5]).unwrap(),
        ])
        .unwrap();
        let r = exhaustive_verify(&net, &dom).unwrap();
        assert_eq!(r.status, VerifyStatus::Sat);
        let w = r.witness.unwrap();
        assert!(w[0] < 0.5);
        assert!(evaluate(&net, &w).unwrap() < 0.0);
    }

    #[test]
    fn exhaustive_matches_grid_minimum_on_random_nets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..8u64 {
            let net = crate::relax::tests::random_net(seed, &[2, 5, 1], 1.5);
            let dom = InputDomain::new(array![-1.0, -1.0], array![1.0, 1.0]).unwrap();
            let r = exhaustive_verify(&net, &dom).unwrap();
            let mut grid_min = f64::INFINITY;
            let steps = 60;
            for i in 0..=steps {
                for j in 0..=steps {
                    let x = array![
                        -1.0 + 2.0 * i as f64 / steps as f64,
                        -1.0 + 2.0 * j as f64 / steps as f64
                    ];
                    grid_min = grid_min.min(evaluate(&net, &x).unwrap());
                }
            }
            for _ in 0..500 {
                let x = array![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                grid_min = grid_min.min(evaluate(&net, &x).unwrap());
            }
            assert!(r.min_value <= grid_min + 1e-9);
            assert!(
                grid_min <= r.min_value + 0.05,
                "grid {grid_min} vs exact {}",
                r.min_value
            );
        }
    }

    #[test]
    fn planet_bound_below_exhaustive_minimum() {
        for seed in 0..10u64 {
            let net = crate::relax::tests::random_net(seed + 100, &[2, 6, 1], 1.5);
            let dom = InputDomain::new(array![-1.0, -1.0], array![1.0, 1.0]).unwrap();
            let stack = linear_backward_bounds(&net, &dom, &SplitSet::new()).unwrap();
            let lp = planet_lp_bound(&net, &stack, &SplitSet::new()).unwrap();
            let exact = exhaustive_verify(&net, &dom).unwrap();
            assert!(
                lp.value <= exact.min_value + 1e-7,
                "relaxation must lower-bound the exact minimum"
            );
        }
    }
}
