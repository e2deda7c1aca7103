//! Branch-and-bound solver for the big-M encoding of a ReLU network.
//!
//! The tree search relaxes every binary indicator to [0,1], picks the open
//! node with the best bound, branches on the most fractional variable, and
//! keeps a primal incumbent by evaluating the real network at each node
//! LP's input values. Stable neurons carry no indicator at all unless that
//! presolve step is explicitly disabled. Node LPs are solved from scratch;
//! the node count reported is the number of LPs solved in the tree (the
//! root counts as 1, so a solve that never branches reports 1).

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::{Duration, Instant};

use crate::ibp::{unstable_set, BoundsProfile, InputBox};
use crate::lp::{
    build_box_input_lp_with, BoundOverride, LpBuildError, LpBuildOptions, LpModel,
    LpObjective, LpSolution, LpStatus, Sense,
};
use crate::net::Network;

/// Input domain: a box, with any subset of coordinates restricted to {0,1}.
#[derive(Clone, Debug)]
pub struct InputDomain {
    bounds: InputBox,
    binary: Vec<bool>,
}

impl InputDomain {
    pub fn continuous(bounds: InputBox) -> Self {
        let n = bounds.dim();
        InputDomain { bounds, binary: vec![false; n] }
    }

    /// All coordinates binary: the box is forced to [0,1]^n.
    pub fn binary(n: usize) -> Self {
        InputDomain { bounds: InputBox::unit(n), binary: vec![true; n] }
    }

    pub fn mixed(bounds: InputBox, binary: Vec<bool>) -> Self {
        assert_eq!(bounds.dim(), binary.len());
        InputDomain { bounds, binary }
    }

    pub fn bounds(&self) -> &InputBox {
        &self.bounds
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn is_binary(&self, k: usize) -> bool {
        self.binary[k]
    }

    pub fn all_binary(&self) -> bool {
        self.binary.iter().all(|&b| b)
    }

    pub fn any_binary(&self) -> bool {
        self.binary.iter().any(|&b| b)
    }

    /// Clamps into the box and rounds binary coordinates.
    pub fn admit(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bounds.project(x);
        for (k, v) in out.iter_mut().enumerate() {
            if self.binary[k] {
                *v = if *v < 0.5 { 0.0 } else { 1.0 };
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MilpLimits {
    pub max_nodes: usize,
    pub max_time: Duration,
}

impl Default for MilpLimits {
    fn default() -> Self {
        MilpLimits { max_nodes: 200_000, max_time: Duration::from_secs(600) }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MilpTols {
    pub integrality: f64,
    pub abs_gap: f64,
}

impl Default for MilpTols {
    fn default() -> Self {
        MilpTols { integrality: 1e-6, abs_gap: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct MilpSpec {
    pub net: Network,
    pub domain: InputDomain,
    pub objective: LpObjective,
    pub sense: Sense,
    /// Linear cost on the inputs, added to the network objective.
    pub input_cost: Option<Vec<f64>>,
    pub limits: MilpLimits,
    pub tols: MilpTols,
    /// Substitute provably one-phase neurons instead of branching on them.
    pub fix_stable: bool,
}

impl MilpSpec {
    pub fn new(net: Network, domain: InputDomain, objective: LpObjective, sense: Sense) -> Self {
        MilpSpec {
            net,
            domain,
            objective,
            sense,
            input_cost: None,
            limits: MilpLimits::default(),
            tols: MilpTols::default(),
            fix_stable: true,
        }
    }

    fn validate(&self) -> Result<(), MilpError> {
        if self.domain.dim() != self.net.n_inputs() {
            return Err(MilpError::DomainDim {
                expected: self.net.n_inputs(),
                got: self.domain.dim(),
            });
        }
        if let LpObjective::Weights(w) = &self.objective {
            if !w.iter().all(|v| v.is_finite()) {
                return Err(MilpError::BadWeights);
            }
        }
        if let Some(cf) = &self.input_cost {
            if cf.len() != self.net.n_inputs() || !cf.iter().all(|v| v.is_finite()) {
                return Err(MilpError::BadInputCost);
            }
        }
        if self.limits.max_nodes == 0 || self.limits.max_time.is_zero() {
            return Err(MilpError::BadLimits);
        }
        if self.tols.integrality <= 0.0 || self.tols.abs_gap <= 0.0 {
            return Err(MilpError::BadLimits);
        }
        Ok(())
    }

    /// Objective value of the real network at an admissible input.
    pub fn true_objective(&self, x: &[f64]) -> f64 {
        let out = self.net.eval(x).expect("input dimension checked at validate");
        let mut v = match &self.objective {
            LpObjective::Output(k) => out[*k],
            LpObjective::Weights(w) => w.iter().zip(&out).map(|(a, b)| a * b).sum(),
        };
        if let Some(cf) = &self.input_cost {
            v += cf.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        v
    }

    /// Feasible objective value from a node LP: true network evaluated at
    /// the LP's input values after clamping and rounding.
    pub fn incumbent_from_lp(&self, model: &LpModel, sol: &LpSolution) -> (f64, Vec<f64>) {
        let raw: Vec<f64> = model.input_vars().iter().map(|&id| sol.y[id]).collect();
        let x = self.domain.admit(&raw);
        (self.true_objective(&x), x)
    }

    fn build_options(&self) -> LpBuildOptions {
        LpBuildOptions { fix_stable: self.fix_stable, input_cost: self.input_cost.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MilpStatus {
    Optimal,
    TimeLimit,
    NodeLimit,
}

#[derive(Clone, Debug)]
pub struct MilpResult {
    pub status: MilpStatus,
    /// Best feasible objective value found, in the requested sense.
    pub incumbent: f64,
    /// Input achieving the incumbent.
    pub incumbent_input: Vec<f64>,
    /// Proven bound on the optimum (lower for min, upper for max).
    pub best_bound: f64,
    /// LPs solved in the tree; the root alone is 1.
    pub nodes: usize,
    pub root_lp_value: f64,
    /// Incumbent minus root bound for min sense (root minus incumbent for
    /// max): how much the root relaxation undershoots what was achieved.
    pub root_lp_gap: f64,
    pub wall_time: Duration,
}

#[derive(Debug, thiserror::Error)]
pub enum MilpError {
    #[error("domain has {got} coordinates, network expects {expected}")]
    DomainDim { expected: usize, got: usize },
    #[error("objective weights must be finite")]
    BadWeights,
    #[error("input cost must match the input count and be finite")]
    BadInputCost,
    #[error("limits and tolerances must be positive")]
    BadLimits,
    #[error(transparent)]
    Build(#[from] LpBuildError),
    #[error("root LP terminated with {status:?}; the model should be feasible and bounded")]
    RootLp { status: LpStatus },
    #[error("branching on variable {var} with integral value {value}")]
    BranchOnIntegral { var: usize, value: f64 },
}

/// One open node: its bound fixes plus the LP evidence gathered at creation.
#[derive(Clone, Debug)]
pub struct BbNode {
    pub id: u64,
    pub fixes: Vec<BoundOverride>,
    /// Node LP value in the requested sense (the node's bound).
    pub bound: f64,
}

/// Splits a node on one relaxed binary variable. The children fix it to 0
/// and to 1; the big-M rows then collapse to the corresponding ReLU phase
/// on their own. Errors if the variable is already integral in `sol`.
pub fn branch(
    node: &BbNode,
    var: usize,
    sol: &LpSolution,
    integrality: f64,
    next_id: &mut u64,
) -> Result<(BbNode, BbNode), MilpError> {
    let v = sol.y[var];
    if (v - v.round()).abs() <= integrality {
        return Err(MilpError::BranchOnIntegral { var, value: v });
    }
    let mut child = |fix: f64| {
        let mut fixes = node.fixes.clone();
        fixes.push(BoundOverride { var, lb: fix, ub: fix });
        *next_id += 1;
        BbNode { id: *next_id, fixes, bound: node.bound }
    };
    Ok((child(0.0), child(1.0)))
}

struct HeapItem {
    key: f64,
    node: BbNode,
    sol: LpSolution,
}

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key && self.node.id == other.node.id
    }
}
impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapItem {
    // BinaryHeap is a max-heap; invert so the smallest key (ties: lowest
    // node id) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .key
            .total_cmp(&self.key)
            .then_with(|| other.node.id.cmp(&self.node.id))
    }
}

pub fn solve_milp(spec: &MilpSpec, profile: &BoundsProfile) -> Result<MilpResult, MilpError> {
    spec.validate()?;
    let start = Instant::now();

    let model = build_box_input_lp_with(
        &spec.net,
        profile,
        spec.domain.bounds(),
        spec.objective.clone(),
        spec.sense,
        &spec.build_options(),
    )?;

    // Variables subject to integrality: binary inputs first, then the
    // activation indicators in (layer, neuron) order.
    let mut branch_vars: Vec<usize> = Vec::new();
    for (k, &id) in model.input_vars().iter().enumerate() {
        if spec.domain.is_binary(k) {
            branch_vars.push(id);
        }
    }
    for ((_, _), a) in model.indicator_vars() {
        branch_vars.push(a);
    }

    // Orient everything as minimization internally.
    let key_of = |v: f64| match spec.sense {
        Sense::Min => v,
        Sense::Max => -v,
    };
    let unkey = key_of;

    let mut nodes = 0usize;
    let mut next_id = 0u64;

    let root_node = BbNode { id: 0, fixes: Vec::new(), bound: f64::NAN };
    let root_sol = model.solve_with(&root_node.fixes, crate::simplex::DEFAULT_MAX_ITERS);
    nodes += 1;
    if root_sol.status != LpStatus::Optimal {
        return Err(MilpError::RootLp { status: root_sol.status });
    }
    let root_lp_value = root_sol.value;

    let (mut incumbent, mut incumbent_input) = spec.incumbent_from_lp(&model, &root_sol);
    let mut inc_key = key_of(incumbent);

    let fractional = |sol: &LpSolution| -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for &v in &branch_vars {
            let val = sol.y[v];
            if (val - val.round()).abs() <= spec.tols.integrality {
                continue;
            }
            let score = (val - 0.5).abs();
            if best.is_none_or(|(s, _)| score < s) {
                best = Some((score, v));
            }
        }
        best.map(|(_, v)| v)
    };

    let mut heap: BinaryHeap<HeapItem> = BinaryHeap::new();
    let terminal = |status: MilpStatus,
                        best_key: f64,
                        incumbent: f64,
                        incumbent_input: Vec<f64>,
                        nodes: usize| MilpResult {
        status,
        incumbent,
        // The optimum is the incumbent or lives in an open node, so the
        // proven bound never needs to be worse than the incumbent itself.
        best_bound: unkey(best_key.min(key_of(incumbent))),
        incumbent_input,
        nodes,
        root_lp_value,
        root_lp_gap: key_of(incumbent) - key_of(root_lp_value),
        wall_time: start.elapsed(),
    };

    match fractional(&root_sol) {
        None => {
            // Integral relaxation: the root LP solution is itself feasible
            // for the integer model, so its value is the optimum.
            let (v, x) = if key_of(root_sol.value) < inc_key {
                let raw: Vec<f64> =
                    model.input_vars().iter().map(|&id| root_sol.y[id]).collect();
                (root_sol.value, spec.domain.admit(&raw))
            } else {
                (incumbent, incumbent_input)
            };
            return Ok(terminal(MilpStatus::Optimal, key_of(root_sol.value), v, x, nodes));
        }
        Some(_) => {
            let root = BbNode { id: 0, fixes: Vec::new(), bound: root_sol.value };
            heap.push(HeapItem { key: key_of(root_sol.value), node: root, sol: root_sol });
        }
    }

    loop {
        let Some(item) = heap.pop() else {
            // Tree exhausted: the incumbent is proven optimal.
            return Ok(terminal(
                MilpStatus::Optimal,
                inc_key,
                incumbent,
                incumbent_input,
                nodes,
            ));
        };
        if item.key >= inc_key - spec.tols.abs_gap {
            // Best-bound order: every open node is at least this bound.
            return Ok(terminal(
                MilpStatus::Optimal,
                item.key,
                incumbent,
                incumbent_input,
                nodes,
            ));
        }
        if start.elapsed() >= spec.limits.max_time {
            let best_key = item.key;
            return Ok(terminal(MilpStatus::TimeLimit, best_key, incumbent, incumbent_input, nodes));
        }
        if nodes >= spec.limits.max_nodes {
            let best_key = item.key;
            return Ok(terminal(MilpStatus::NodeLimit, best_key, incumbent, incumbent_input, nodes));
        }

        let var = fractional(&item.sol).expect("only fractional nodes are pushed");
        let (c0, c1) = branch(&item.node, var, &item.sol, spec.tols.integrality, &mut next_id)?;

        for child in [c0, c1] {
            let sol = model.solve_with(&child.fixes, crate::simplex::DEFAULT_MAX_ITERS);
            nodes += 1;
            match sol.status {
                LpStatus::Infeasible => continue,
                LpStatus::Optimal => {}
                // A node LP that cannot be finished denies us a sound
                // bound; give up with a resource status, never a wrong
                // "optimal".
                _ => {
                    let best_key = item.key;
                    return Ok(terminal(
                        MilpStatus::NodeLimit,
                        best_key,
                        incumbent,
                        incumbent_input,
                        nodes,
                    ));
                }
            }
            let bound_key = key_of(sol.value);
            if bound_key >= inc_key - spec.tols.abs_gap {
                continue; // dominated subtree
            }
            let (hval, hx) = spec.incumbent_from_lp(&model, &sol);
            if key_of(hval) < inc_key {
                incumbent = hval;
                incumbent_input = hx;
                inc_key = key_of(hval);
            }
            if fractional(&sol).is_none() {
                // Integral node: its LP value is feasible and exact here.
                if bound_key < inc_key {
                    incumbent = sol.value;
                    let raw: Vec<f64> =
                        model.input_vars().iter().map(|&id| sol.y[id]).collect();
                    incumbent_input = spec.domain.admit(&raw);
                    inc_key = bound_key;
                }
                continue;
            }
            let node = BbNode { bound: sol.value, ..child };
            heap.push(HeapItem { key: bound_key, node, sol });
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("{count} unstable neurons exceed the enumeration cap {cap}")]
    UnstableCap { count: usize, cap: usize },
    #[error("{count} binary inputs exceed the enumeration cap {cap}")]
    InputCap { count: usize, cap: usize },
    #[error("oracle supports all-binary or all-continuous inputs, not a mix")]
    MixedDomain,
    #[error(transparent)]
    Build(#[from] LpBuildError),
    #[error("pattern LP terminated with {status:?}")]
    PatternLp { status: LpStatus },
}

pub const ORACLE_UNSTABLE_CAP: usize = 16;
pub const ORACLE_INPUT_CAP: usize = 16;

#[derive(Clone, Debug)]
pub struct OracleResult {
    pub value: f64,
    pub input: Vec<f64>,
    /// Enumerated cases: activation patterns or input vectors.
    pub cases: usize,
}

/// Exhaustive ground truth, independent of the tree search. Box inputs:
/// every assignment of the unstable activations gives a plain LP; the best
/// feasible one is exact. Binary inputs: every input vector is evaluated
/// through the real network.
pub fn enumerate_oracle(
    spec: &MilpSpec,
    profile: &BoundsProfile,
) -> Result<OracleResult, OracleError> {
    if spec.domain.all_binary() && spec.domain.dim() > 0 {
        let n = spec.domain.dim();
        if n > ORACLE_INPUT_CAP {
            return Err(OracleError::InputCap { count: n, cap: ORACLE_INPUT_CAP });
        }
        let mut best = f64::INFINITY;
        let mut best_x = vec![0.0; n];
        let sign = match spec.sense {
            Sense::Min => 1.0,
            Sense::Max => -1.0,
        };
        for mask in 0..(1u32 << n) {
            let x: Vec<f64> =
                (0..n).map(|k| if mask >> k & 1 == 1 { 1.0 } else { 0.0 }).collect();
            let v = spec.true_objective(&x);
            if sign * v < sign * best || (mask == 0) {
                best = v;
                best_x = x;
            }
        }
        return Ok(OracleResult { value: best, input: best_x, cases: 1 << n });
    }
    if spec.domain.any_binary() {
        return Err(OracleError::MixedDomain);
    }

    let unstable = unstable_set(profile);
    if unstable.len() > ORACLE_UNSTABLE_CAP {
        return Err(OracleError::UnstableCap {
            count: unstable.len(),
            cap: ORACLE_UNSTABLE_CAP,
        });
    }
    let model = build_box_input_lp_with(
        &spec.net,
        profile,
        spec.domain.bounds(),
        spec.objective.clone(),
        spec.sense,
        &LpBuildOptions { fix_stable: true, input_cost: spec.input_cost.clone() },
    )?;
    let ids: Vec<usize> = unstable
        .iter()
        .map(|&(l, j)| model.neuron(l, j).a.expect("unstable neurons keep indicators"))
        .collect();

    let sign = match spec.sense {
        Sense::Min => 1.0,
        Sense::Max => -1.0,
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0..(1u64 << ids.len()) {
        let fixes: Vec<BoundOverride> = ids
            .iter()
            .enumerate()
            .map(|(i, &var)| {
                let v = if mask >> i & 1 == 1 { 1.0 } else { 0.0 };
                BoundOverride { var, lb: v, ub: v }
            })
            .collect();
        let sol = model.solve_with(&fixes, crate::simplex::DEFAULT_MAX_ITERS);
        match sol.status {
            LpStatus::Infeasible => continue,
            LpStatus::Optimal => {}
            status => return Err(OracleError::PatternLp { status }),
        }
        let x: Vec<f64> = model.input_vars().iter().map(|&id| sol.y[id]).collect();
        if best.as_ref().is_none_or(|(b, _)| sign * sol.value < sign * *b) {
            best = Some((sol.value, x));
        }
    }
    let (value, input) = best.expect("the true forward pass is always feasible");
    Ok(OracleResult { value, input, cases: 1usize << ids.len() })
}

/// Output weights blending the mean with a tail average: each of the K
/// outputs gets (1−λ)/K, and outputs whose level τ_k is at least α share λ
/// equally. λ = 0 is the plain mean; λ = 1 weighs only the tail.
pub fn mean_cvar_weights(taus: &[f64], lambda: f64, alpha: f64) -> Result<Vec<f64>, String> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(format!("lambda {lambda} outside [0, 1]"));
    }
    let k = taus.len();
    if k == 0 {
        return Err("no quantile levels".into());
    }
    let tail: Vec<usize> =
        taus.iter().enumerate().filter(|(_, &t)| t >= alpha).map(|(i, _)| i).collect();
    if lambda > 0.0 && tail.is_empty() {
        return Err(format!("no quantile level reaches alpha {alpha}"));
    }
    let mut w = vec![(1.0 - lambda) / k as f64; k];
    for &i in &tail {
        w[i] += lambda / tail.len() as f64;
    }
    Ok(w)
}
