//! Bounded-variable primal simplex with an explicit basis inverse.
//!
//! Solves min cᵀx s.t. A_eq x = b_eq, G x ≤ h, l ≤ x ≤ u, with free
//! variables allowed (nonbasic free variables float at 0 and may enter in
//! either direction). Inequalities get internal slack columns; if the
//! caller's basis hint is unusable, equality rows get fixed artificial
//! columns and a composite phase 1 drives their violation to zero.
//!
//! Pricing is Dantzig (most negative reduced cost) with a Bland's-rule
//! fallback after 1000 consecutive degenerate pivots. The basis inverse is
//! updated by row elimination each pivot and refactorized periodically.

pub const FEAS_TOL: f64 = 1e-9;
pub const OPT_TOL: f64 = 1e-9;
pub const PIVOT_TOL: f64 = 1e-10;
const STALL_LIMIT: usize = 1000;
const REFACTOR_EVERY: usize = 128;
pub const DEFAULT_MAX_ITERS: usize = 200_000;

/// Sparse column as (row, coefficient) pairs, rows 0..n_eq are equalities.
#[derive(Clone, Debug, Default)]
pub struct SparseCol {
    pub entries: Vec<(usize, f64)>,
}

/// Internal standard form handed to the solver.
#[derive(Clone, Debug)]
pub struct SimplexProblem {
    pub n: usize,
    /// Minimization costs, length n.
    pub cost: Vec<f64>,
    /// Structural columns over stacked rows (equalities then inequalities).
    pub cols: Vec<SparseCol>,
    pub n_eq: usize,
    pub n_ineq: usize,
    /// b_eq followed by h.
    pub rhs: Vec<f64>,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
    /// One structural column id per equality row forming a nonsingular
    /// block (model builders pass the preactivation variables).
    pub basis_hint: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimplexStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

#[derive(Clone, Debug)]
pub struct RawSolution {
    pub status: SimplexStatus,
    /// Structural variable values (length n; meaningful at Optimal).
    pub x: Vec<f64>,
    /// Row duals y = c_B B⁻¹ of the minimization problem, length n_eq + n_ineq.
    pub row_duals: Vec<f64>,
    /// Reduced costs of structural variables at termination.
    pub reduced_costs: Vec<f64>,
    pub iterations: usize,
    /// |primal objective − dual objective| at Optimal.
    pub duality_gap: f64,
}

#[derive(Clone, Copy, PartialEq)]
enum Loc {
    Basic(usize),
    AtLb,
    AtUb,
    /// Free nonbasic variable floating at value 0.
    Floating,
}

struct Tableau {
    m: usize,
    n_total: usize,
    n_structural: usize,
    cols: Vec<SparseCol>,
    rhs: Vec<f64>,
    lb: Vec<f64>,
    ub: Vec<f64>,
    cost: Vec<f64>,
    basis: Vec<usize>,
    loc: Vec<Loc>,
    x: Vec<f64>,
    binv: Vec<f64>,
    pivots_since_refactor: usize,
}

impl Tableau {
    fn new(p: &SimplexProblem) -> Option<Tableau> {
        let m = p.n_eq + p.n_ineq;
        let n_slack = p.n_ineq;
        let n_art = p.n_eq;
        let n_total = p.n + n_slack + n_art;

        let mut cols = Vec::with_capacity(n_total);
        let mut lb = Vec::with_capacity(n_total);
        let mut ub = Vec::with_capacity(n_total);
        let mut cost = vec![0.0; n_total];
        for j in 0..p.n {
            cols.push(p.cols[j].clone());
            lb.push(p.lb[j]);
            ub.push(p.ub[j]);
            cost[j] = p.cost[j];
        }
        for i in 0..n_slack {
            cols.push(SparseCol { entries: vec![(p.n_eq + i, 1.0)] });
            lb.push(0.0);
            ub.push(f64::INFINITY);
        }
        for i in 0..n_art {
            cols.push(SparseCol { entries: vec![(i, 1.0)] });
            lb.push(0.0);
            ub.push(0.0);
        }

        // Basis: hinted structural columns per equality row when they form a
        // nonsingular block, otherwise artificials; slacks for inequalities.
        let mut basis: Vec<usize> = Vec::with_capacity(m);
        let hint_ok = p.basis_hint.as_ref().is_some_and(|h| h.len() == p.n_eq);
        if hint_ok {
            basis.extend(p.basis_hint.as_ref().unwrap().iter().copied());
        } else {
            basis.extend((0..n_art).map(|i| p.n + n_slack + i));
        }
        basis.extend((0..n_slack).map(|i| p.n + i));

        let mut t = Tableau {
            m,
            n_total,
            n_structural: p.n,
            cols,
            rhs: p.rhs.clone(),
            lb,
            ub,
            cost,
            basis,
            loc: Vec::new(),
            x: vec![0.0; n_total],
            binv: vec![0.0; m * m],
            pivots_since_refactor: 0,
        };
        if !t.refactor() {
            if !hint_ok {
                return None;
            }
            // Hint is singular; fall back to the artificial basis.
            for i in 0..p.n_eq {
                t.basis[i] = p.n + n_slack + i;
            }
            if !t.refactor() {
                return None;
            }
        }
        t.reset_locations();
        t.recompute_basic_values();
        Some(t)
    }

    fn reset_locations(&mut self) {
        self.loc = (0..self.n_total)
            .map(|j| {
                if self.lb[j].is_finite() {
                    Loc::AtLb
                } else if self.ub[j].is_finite() {
                    Loc::AtUb
                } else {
                    Loc::Floating
                }
            })
            .collect();
        for (i, &b) in self.basis.iter().enumerate() {
            self.loc[b] = Loc::Basic(i);
        }
        for j in 0..self.n_total {
            self.x[j] = match self.loc[j] {
                Loc::AtLb => self.lb[j],
                Loc::AtUb => self.ub[j],
                Loc::Floating => 0.0,
                Loc::Basic(_) => self.x[j],
            };
        }
    }

    /// Rebuilds B⁻¹ from the basis columns. False if singular.
    fn refactor(&mut self) -> bool {
        let m = self.m;
        let mut a = vec![0.0; m * m];
        for (i, &bj) in self.basis.iter().enumerate() {
            for &(r, v) in &self.cols[bj].entries {
                a[r * m + i] = v;
            }
        }
        // Gauss-Jordan with partial pivoting on [A | I].
        let mut inv = vec![0.0; m * m];
        for i in 0..m {
            inv[i * m + i] = 1.0;
        }
        for col in 0..m {
            let mut piv = col;
            let mut best = a[col * m + col].abs();
            for r in col + 1..m {
                let v = a[r * m + col].abs();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if best < 1e-12 {
                return false;
            }
            if piv != col {
                for k in 0..m {
                    a.swap(col * m + k, piv * m + k);
                    inv.swap(col * m + k, piv * m + k);
                }
            }
            let d = a[col * m + col];
            for k in 0..m {
                a[col * m + k] /= d;
                inv[col * m + k] /= d;
            }
            for r in 0..m {
                if r == col {
                    continue;
                }
                let f = a[r * m + col];
                if f == 0.0 {
                    continue;
                }
                for k in 0..m {
                    a[r * m + k] -= f * a[col * m + k];
                    inv[r * m + k] -= f * inv[col * m + k];
                }
            }
        }
        self.binv = inv;
        self.pivots_since_refactor = 0;
        true
    }

    /// x_B = B⁻¹ (rhs − N x_N).
    fn recompute_basic_values(&mut self) {
        let m = self.m;
        let mut r = self.rhs.clone();
        for j in 0..self.n_total {
            if matches!(self.loc[j], Loc::Basic(_)) || self.x[j] == 0.0 {
                continue;
            }
            for &(row, v) in &self.cols[j].entries {
                r[row] -= v * self.x[j];
            }
        }
        for i in 0..m {
            let mut acc = 0.0;
            let row = &self.binv[i * m..(i + 1) * m];
            for (k, &rv) in r.iter().enumerate() {
                if rv != 0.0 {
                    acc += row[k] * rv;
                }
            }
            self.x[self.basis[i]] = acc;
        }
    }

    /// y = costs_B · B⁻¹ for an arbitrary basic cost vector.
    fn btran(&self, cost_of: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        let m = self.m;
        let mut y = vec![0.0; m];
        for i in 0..m {
            let c = cost_of(i, self.basis[i]);
            if c == 0.0 {
                continue;
            }
            let row = &self.binv[i * m..(i + 1) * m];
            for k in 0..m {
                y[k] += c * row[k];
            }
        }
        y
    }

    /// w = B⁻¹ a_j.
    fn ftran(&self, j: usize) -> Vec<f64> {
        let m = self.m;
        let mut w = vec![0.0; m];
        for &(r, v) in &self.cols[j].entries {
            for i in 0..m {
                w[i] += self.binv[i * m + r] * v;
            }
        }
        w
    }

    fn infeasibility(&self) -> f64 {
        let mut total = 0.0;
        for &b in &self.basis {
            let v = self.x[b];
            if v < self.lb[b] {
                total += self.lb[b] - v;
            } else if v > self.ub[b] {
                total += v - self.ub[b];
            }
        }
        total
    }

    fn phase1_gamma(&self, i: usize) -> f64 {
        let b = self.basis[i];
        let v = self.x[b];
        if v < self.lb[b] - FEAS_TOL {
            -1.0
        } else if v > self.ub[b] + FEAS_TOL {
            1.0
        } else {
            0.0
        }
    }

    fn reduced_cost(&self, j: usize, y: &[f64], phase1: bool) -> f64 {
        let cj = if phase1 { 0.0 } else { self.cost[j] };
        let mut d = cj;
        for &(r, v) in &self.cols[j].entries {
            d -= y[r] * v;
        }
        d
    }

    /// Applies the pivot update B⁻¹ ← E B⁻¹ for entering column with
    /// representation w, leaving basis position r.
    fn update_binv(&mut self, w: &[f64], r: usize) {
        let m = self.m;
        let wr = w[r];
        let (before, rest) = self.binv.split_at_mut(r * m);
        let (prow, after) = rest.split_at_mut(m);
        for k in 0..m {
            prow[k] /= wr;
        }
        for (i, chunk) in before.chunks_mut(m).enumerate() {
            let f = w[i];
            if f != 0.0 {
                for k in 0..m {
                    chunk[k] -= f * prow[k];
                }
            }
        }
        for (off, chunk) in after.chunks_mut(m).enumerate() {
            let f = w[r + 1 + off];
            if f != 0.0 {
                for k in 0..m {
                    chunk[k] -= f * prow[k];
                }
            }
        }
        self.pivots_since_refactor += 1;
    }
}

struct Candidate {
    t: f64,
    basic_pos: usize,
    wi: f64,
    to_upper: bool,
}

pub fn solve(problem: &SimplexProblem, max_iters: usize) -> RawSolution {
    debug_assert_eq!(problem.cols.len(), problem.n);
    debug_assert_eq!(problem.rhs.len(), problem.n_eq + problem.n_ineq);

    let fail = |status: SimplexStatus| RawSolution {
        status,
        x: vec![0.0; problem.n],
        row_duals: vec![0.0; problem.n_eq + problem.n_ineq],
        reduced_costs: vec![0.0; problem.n],
        iterations: 0,
        duality_gap: f64::NAN,
    };

    let Some(mut t) = Tableau::new(problem) else {
        // No invertible starting basis exists even with artificials; the
        // row system is structurally deficient.
        return fail(SimplexStatus::Infeasible);
    };

    let mut iterations = 0usize;
    let mut stall = 0usize;
    let mut bland = false;
    let mut verified = false;
    let mut repairs = 0usize;

    let mut phase1 = t.infeasibility() > FEAS_TOL;
    loop {
        if iterations >= max_iters {
            return fail(SimplexStatus::IterationLimit);
        }
        iterations += 1;

        if t.pivots_since_refactor >= REFACTOR_EVERY {
            t.refactor();
            t.recompute_basic_values();
        }

        if phase1 && t.infeasibility() <= FEAS_TOL {
            phase1 = false;
            stall = 0;
            bland = false;
        }

        let y = if phase1 {
            t.btran(|i, _| t.phase1_gamma(i))
        } else {
            t.btran(|_, b| t.cost[b])
        };

        // Entering candidates, best first under the active rule.
        let mut entering: Vec<(usize, f64, f64)> = Vec::new(); // (j, d, sigma)
        for j in 0..t.n_total {
            let loc = t.loc[j];
            if matches!(loc, Loc::Basic(_)) || t.lb[j] == t.ub[j] {
                continue;
            }
            let d = t.reduced_cost(j, &y, phase1);
            let sigma = match loc {
                Loc::AtLb if d < -OPT_TOL => 1.0,
                Loc::AtUb if d > OPT_TOL => -1.0,
                Loc::Floating if d.abs() > OPT_TOL => -d.signum(),
                _ => continue,
            };
            entering.push((j, d, sigma));
            if bland {
                break; // lowest index is enough
            }
        }
        if entering.is_empty() {
            if phase1 {
                // Phase-1 optimum with residual infeasibility.
                if t.infeasibility() > FEAS_TOL {
                    return fail(SimplexStatus::Infeasible);
                }
                phase1 = false;
                continue;
            }
            if !verified {
                // Confirm optimality against a fresh factorization; drift
                // out of bounds sends the solve back through phase 1.
                t.refactor();
                t.recompute_basic_values();
                verified = true;
                if t.infeasibility() > FEAS_TOL && repairs < 3 {
                    repairs += 1;
                    phase1 = true;
                }
                continue;
            }
            break; // optimal
        }
        if !bland {
            entering.sort_by(|a, b| {
                b.1.abs().partial_cmp(&a.1.abs()).unwrap().then(a.0.cmp(&b.0))
            });
        }

        let mut stepped = false;
        for &(q, _dq, sigma) in entering.iter().take(if bland { 1 } else { 8 }) {
            let w = t.ftran(q);

            // Entering variable's own opposite bound.
            let t_flip = if sigma > 0.0 { t.ub[q] - t.x[q] } else { t.x[q] - t.lb[q] };

            let mut cands: Vec<Candidate> = Vec::new();
            for i in 0..t.m {
                let wi = w[i];
                if wi.abs() < 1e-11 {
                    continue;
                }
                let b = t.basis[i];
                let rate = -sigma * wi; // dx_b / dt
                let (xb, lbb, ubb) = (t.x[b], t.lb[b], t.ub[b]);
                let cand = if xb < lbb - FEAS_TOL {
                    // Infeasible below: blocks when rising to its lower bound.
                    (rate > 0.0).then(|| Candidate {
                        t: (lbb - xb) / rate,
                        basic_pos: i,
                        wi,
                        to_upper: false,
                    })
                } else if xb > ubb + FEAS_TOL {
                    (rate < 0.0).then(|| Candidate {
                        t: (ubb - xb) / rate,
                        basic_pos: i,
                        wi,
                        to_upper: true,
                    })
                } else if rate > 0.0 && ubb.is_finite() {
                    Some(Candidate { t: (ubb - xb) / rate, basic_pos: i, wi, to_upper: true })
                } else if rate < 0.0 && lbb.is_finite() {
                    Some(Candidate { t: (xb - lbb) / (-rate), basic_pos: i, wi, to_upper: false })
                } else {
                    None
                };
                if let Some(mut c) = cand {
                    c.t = c.t.max(0.0);
                    cands.push(c);
                }
            }

            let t_block = cands.iter().map(|c| c.t).fold(f64::INFINITY, f64::min);
            if t_flip < t_block - 1e-12 && t_flip.is_finite() {
                // Bound flip: no basis change.
                let step = t_flip;
                apply_step(&mut t, q, sigma, step, &w);
                t.x[q] = if sigma > 0.0 { t.ub[q] } else { t.lb[q] };
                t.loc[q] = if sigma > 0.0 { Loc::AtUb } else { Loc::AtLb };
                stall = if step > 1e-10 { 0 } else { stall + 1 };
                stepped = true;
                break;
            }
            if !t_block.is_finite() {
                if phase1 {
                    continue; // try another entering column
                }
                return RawSolution {
                    status: SimplexStatus::Unbounded,
                    x: t.x[..t.n_structural].to_vec(),
                    row_duals: vec![0.0; t.m],
                    reduced_costs: vec![0.0; t.n_structural],
                    iterations,
                    duality_gap: f64::NAN,
                };
            }

            // Leaving variable: min ratio, then max |pivot|, then min position.
            let window = t_block + 1e-9 * (1.0 + t_block.abs());
            let mut best: Option<&Candidate> = None;
            for c in cands.iter().filter(|c| c.t <= window) {
                best = match best {
                    None => Some(c),
                    Some(b2) => {
                        let better = if bland {
                            t.basis[c.basic_pos] < t.basis[b2.basic_pos]
                        } else {
                            c.wi.abs() > b2.wi.abs() + 1e-15
                                || (c.wi.abs() >= b2.wi.abs() - 1e-15
                                    && t.basis[c.basic_pos] < t.basis[b2.basic_pos])
                        };
                        if better {
                            Some(c)
                        } else {
                            Some(b2)
                        }
                    }
                };
            }
            let Some(chosen) = best else { continue };
            if chosen.wi.abs() < PIVOT_TOL {
                // Numerically unusable pivot; refactor once and retry later.
                t.refactor();
                t.recompute_basic_values();
                continue;
            }

            let r = chosen.basic_pos;
            let leaving = t.basis[r];
            let to_upper = chosen.to_upper;
            let step = chosen.t;
            apply_step(&mut t, q, sigma, step, &w);
            t.x[q] = match t.loc[q] {
                Loc::AtLb => t.lb[q] + sigma * step,
                Loc::AtUb => t.ub[q] + sigma * step,
                Loc::Floating => sigma * step,
                Loc::Basic(_) => unreachable!(),
            };
            t.x[leaving] = if to_upper { t.ub[leaving] } else { t.lb[leaving] };
            t.loc[leaving] = if to_upper { Loc::AtUb } else { Loc::AtLb };
            t.loc[q] = Loc::Basic(r);
            t.basis[r] = q;
            t.update_binv(&w, r);

            stall = if step > 1e-10 { 0 } else { stall + 1 };
            stepped = true;
            break;
        }

        if !stepped {
            if phase1 {
                if t.infeasibility() > FEAS_TOL {
                    return fail(SimplexStatus::Infeasible);
                }
                phase1 = false;
                continue;
            }
            if !verified {
                t.refactor();
                t.recompute_basic_values();
                verified = true;
                if t.infeasibility() > FEAS_TOL && repairs < 3 {
                    repairs += 1;
                    phase1 = true;
                }
                continue;
            }
            break; // no usable entering column: treat as optimal
        }
        verified = false;
        if stall > STALL_LIMIT {
            bland = true;
        } else if stall == 0 {
            bland = false;
        }
    }

    // Both loop exits arrive here with a freshly factorized basis.
    if t.infeasibility() > FEAS_TOL {
        return fail(SimplexStatus::IterationLimit);
    }
    let y = t.btran(|_, b| t.cost[b]);
    let reduced: Vec<f64> =
        (0..t.n_structural).map(|j| t.reduced_cost(j, &y, false)).collect();

    let primal: f64 = (0..t.n_structural).map(|j| t.cost[j] * t.x[j]).sum();
    let mut dual = y.iter().zip(&t.rhs).map(|(a, b)| a * b).sum::<f64>();
    for j in 0..t.n_structural {
        let d = reduced[j];
        if d > OPT_TOL {
            dual += d * t.lb[j];
        } else if d < -OPT_TOL {
            dual += d * t.ub[j];
        }
    }

    RawSolution {
        status: SimplexStatus::Optimal,
        x: t.x[..t.n_structural].to_vec(),
        row_duals: y,
        reduced_costs: reduced,
        iterations,
        duality_gap: (primal - dual).abs(),
    }
}

fn apply_step(t: &mut Tableau, _q: usize, sigma: f64, step: f64, w: &[f64]) {
    if step == 0.0 {
        return;
    }
    for i in 0..t.m {
        if w[i] != 0.0 {
            let b = t.basis[i];
            t.x[b] -= sigma * step * w[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cols_from_rows(n: usize, eq: &[Vec<f64>], ineq: &[Vec<f64>]) -> Vec<SparseCol> {
        let mut cols = vec![SparseCol::default(); n];
        for (r, row) in eq.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    cols[j].entries.push((r, v));
                }
            }
        }
        for (r, row) in ineq.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    cols[j].entries.push((eq.len() + r, v));
                }
            }
        }
        cols
    }

    #[test]
    fn min_x_with_lower_bound() {
        // min x s.t. x >= 1.
        let p = SimplexProblem {
            n: 1,
            cost: vec![1.0],
            cols: vec![SparseCol::default()],
            n_eq: 0,
            n_ineq: 0,
            rhs: vec![],
            lb: vec![1.0],
            ub: vec![f64::INFINITY],
            basis_hint: None,
        };
        let s = solve(&p, 1000);
        assert_eq!(s.status, SimplexStatus::Optimal);
        assert_eq!(s.x[0], 1.0);
        // Reduced cost 1 on the active lower bound is the dual pressure.
        assert!((s.reduced_costs[0] - 1.0).abs() < 1e-12);
        assert!(s.duality_gap < 1e-9);
    }

    #[test]
    fn two_var_equality_dual() {
        // min x1 + x2 s.t. x1 + x2 = 1, x >= 0 -> V = 1, eq dual 1.
        let p = SimplexProblem {
            n: 2,
            cost: vec![1.0, 1.0],
            cols: cols_from_rows(2, &[vec![1.0, 1.0]], &[]),
            n_eq: 1,
            n_ineq: 0,
            rhs: vec![1.0],
            lb: vec![0.0, 0.0],
            ub: vec![f64::INFINITY, f64::INFINITY],
            basis_hint: None,
        };
        let s = solve(&p, 1000);
        assert_eq!(s.status, SimplexStatus::Optimal);
        assert!((s.x[0] + s.x[1] - 1.0).abs() < 1e-12);
        assert!((s.row_duals[0] - 1.0).abs() < 1e-12);
        assert!(s.duality_gap < 1e-9);
    }

    #[test]
    fn inequality_dual_sign() {
        // min -x s.t. x <= 3, x >= 0: V = -3, mu = -row_dual = 1.
        let p = SimplexProblem {
            n: 1,
            cost: vec![-1.0],
            cols: cols_from_rows(1, &[], &[vec![1.0]]),
            n_eq: 0,
            n_ineq: 1,
            rhs: vec![3.0],
            lb: vec![0.0],
            ub: vec![f64::INFINITY],
            basis_hint: None,
        };
        let s = solve(&p, 1000);
        assert_eq!(s.status, SimplexStatus::Optimal);
        assert_eq!(s.x[0], 3.0);
        assert!((s.row_duals[0] - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn detects_unbounded() {
        // min -x, x >= 0, no upper bound.
        let p = SimplexProblem {
            n: 1,
            cost: vec![-1.0],
            cols: vec![SparseCol::default()],
            n_eq: 0,
            n_ineq: 0,
            rhs: vec![],
            lb: vec![0.0],
            ub: vec![f64::INFINITY],
            basis_hint: None,
        };
        assert_eq!(solve(&p, 1000).status, SimplexStatus::Unbounded);
    }

    #[test]
    fn detects_infeasible() {
        // x = 2 and x <= 1.
        let p = SimplexProblem {
            n: 1,
            cost: vec![0.0],
            cols: cols_from_rows(1, &[vec![1.0]], &[vec![1.0]]),
            n_eq: 1,
            n_ineq: 1,
            rhs: vec![2.0, 1.0],
            lb: vec![f64::NEG_INFINITY],
            ub: vec![f64::INFINITY],
            basis_hint: None,
        };
        assert_eq!(solve(&p, 1000).status, SimplexStatus::Infeasible);
    }

    #[test]
    fn degenerate_redundant_equality_still_optimal() {
        // Two identical equalities; duals split arbitrarily but must satisfy
        // stationarity: y1 + y2 = 1 with complementary slackness trivial.
        let p = SimplexProblem {
            n: 2,
            cost: vec![1.0, 1.0],
            cols: cols_from_rows(2, &[vec![1.0, 1.0], vec![1.0, 1.0]], &[]),
            n_eq: 2,
            n_ineq: 0,
            rhs: vec![1.0, 1.0],
            lb: vec![0.0, 0.0],
            ub: vec![f64::INFINITY, f64::INFINITY],
            basis_hint: None,
        };
        let s = solve(&p, 1000);
        assert_eq!(s.status, SimplexStatus::Optimal);
        assert!((s.x[0] + s.x[1] - 1.0).abs() < 1e-9);
        assert!((s.row_duals[0] + s.row_duals[1] - 1.0).abs() < 1e-9);
        assert!(s.duality_gap < 1e-8);
    }

    #[test]
    fn free_variable_enters_and_solves() {
        // min (x - 5)^1 over x free with x = y, y in [0, 3]:
        // min x s.t. x - y = 0, 0 <= y <= 3, x free -> V = 0.
        let p = SimplexProblem {
            n: 2,
            cost: vec![1.0, 0.0],
            cols: cols_from_rows(2, &[vec![1.0, -1.0]], &[]),
            n_eq: 1,
            n_ineq: 0,
            rhs: vec![0.0],
            lb: vec![f64::NEG_INFINITY, 0.0],
            ub: vec![f64::INFINITY, 3.0],
            basis_hint: Some(vec![0]),
        };
        let s = solve(&p, 1000);
        assert_eq!(s.status, SimplexStatus::Optimal);
        assert!((s.x[0]).abs() < 1e-12);
    }

    #[test]
    fn bound_flip_path() {
        // max x1 + x2 with x in [0,1]^2 and x1 + x2 <= 1.5:
        // minimize negative; forces one flip plus a pivot.
        let p = SimplexProblem {
            n: 2,
            cost: vec![-1.0, -1.0],
            cols: cols_from_rows(2, &[], &[vec![1.0, 1.0]]),
            n_eq: 0,
            n_ineq: 1,
            rhs: vec![1.5],
            lb: vec![0.0, 0.0],
            ub: vec![1.0, 1.0],
            basis_hint: None,
        };
        let s = solve(&p, 1000);
        assert_eq!(s.status, SimplexStatus::Optimal);
        assert!((s.x[0] + s.x[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn fixed_variables_respected() {
        // min x + y with x fixed at 2, y >= 0, x + y >= 3 (as -x - y <= -3).
        let p = SimplexProblem {
            n: 2,
            cost: vec![1.0, 1.0],
            cols: cols_from_rows(2, &[], &[vec![-1.0, -1.0]]),
            n_eq: 0,
            n_ineq: 1,
            rhs: vec![-3.0],
            lb: vec![2.0, 0.0],
            ub: vec![2.0, f64::INFINITY],
            basis_hint: None,
        };
        let s = solve(&p, 1000);
        assert_eq!(s.status, SimplexStatus::Optimal);
        assert_eq!(s.x[0], 2.0);
        assert!((s.x[1] - 1.0).abs() < 1e-12);
    }
}
