//! LP relaxation of the big-M encoding of a ReLU network over a box.
//!
//! Every neuron keeps its preactivation as a free variable defined by an
//! equality row, so the row duals line up one-to-one with neurons and give
//! the sensitivity of the optimal value to each bias. Stable neurons are
//! substituted away by default: a stable-active unit contributes its
//! preactivation directly downstream, a stable-inactive unit contributes
//! nothing. Each unstable neuron gets a relaxed indicator a in [0,1], a
//! post-activation variable bounded below by zero, and three inequality
//! rows (with the zero lower bound, the four big-M facets).

use crate::ibp::{BoundsProfile, InputBox};
use crate::net::Network;
use crate::simplex::{self, SimplexProblem, SparseCol, DEFAULT_MAX_ITERS};

pub use crate::simplex::SimplexStatus as LpStatus;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sense {
    Min,
    Max,
}

#[derive(Clone, Debug)]
pub enum LpObjective {
    /// Optimize one output coordinate.
    Output(usize),
    /// Optimize a weighted combination of the outputs.
    Weights(Vec<f64>),
}

/// Where a neuron's post-activation lives in the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum XhatRef {
    /// Its own column (unstable neurons).
    Var(usize),
    /// Substituted by the preactivation column (stable active).
    AliasZ,
    /// Substituted by the constant zero (stable inactive).
    Zero,
}

/// Inequality-row ids of one unstable neuron's big-M facets.
#[derive(Clone, Copy, Debug)]
pub struct BigMRows {
    /// z − x̂ ≤ 0.
    pub ge_z: usize,
    /// x̂ − z − L·a ≤ −L.
    pub ub_shift: usize,
    /// x̂ − U·a ≤ 0.
    pub ub_gate: usize,
}

#[derive(Clone, Debug)]
pub struct NeuronVars {
    pub z: usize,
    pub xhat: XhatRef,
    pub a: Option<usize>,
    /// Equality row defining the preactivation.
    pub eq_row: usize,
    pub bigm: Option<BigMRows>,
    pub pre_lo: f64,
    pub pre_hi: f64,
}

#[derive(Clone, Debug)]
pub struct LpBuildOptions {
    /// Substitute stable neurons instead of giving them indicators.
    pub fix_stable: bool,
    /// Linear cost on the input variables, added to the objective.
    pub input_cost: Option<Vec<f64>>,
}

impl Default for LpBuildOptions {
    fn default() -> Self {
        LpBuildOptions { fix_stable: true, input_cost: None }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LpBuildError {
    #[error("input has {got} coordinates, network expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("box has {got} coordinates, network expects {expected}")]
    BoxDim { expected: usize, got: usize },
    #[error("bounds profile has {got} layers, network has {expected}")]
    ProfileLayers { expected: usize, got: usize },
    #[error("bounds profile layer {layer} has {got} neurons, network has {expected}")]
    ProfileShape { layer: usize, expected: usize, got: usize },
    #[error("bounds profile layer {layer} neuron {neuron} has lower bound above upper")]
    UnsoundProfile { layer: usize, neuron: usize },
    #[error("objective output {got} out of range, network has {n_outputs} outputs")]
    OutputIndex { got: usize, n_outputs: usize },
    #[error("objective weights have {got} entries, network has {expected} outputs")]
    WeightLen { expected: usize, got: usize },
    #[error("input cost has {got} entries, network has {expected} inputs")]
    InputCostLen { expected: usize, got: usize },
}

#[derive(Clone, Debug)]
pub struct LpModel {
    sense: Sense,
    c: Vec<f64>,
    eq_rows: Vec<Vec<(usize, f64)>>,
    b_eq: Vec<f64>,
    ineq_rows: Vec<Vec<(usize, f64)>>,
    h: Vec<f64>,
    lb: Vec<f64>,
    ub: Vec<f64>,
    input_vars: Vec<usize>,
    hidden: Vec<Vec<NeuronVars>>,
    output: Vec<NeuronVars>,
    basis_hint: Vec<usize>,
}

/// Replaces the bounds of one variable for a single solve.
#[derive(Clone, Copy, Debug)]
pub struct BoundOverride {
    pub var: usize,
    pub lb: f64,
    pub ub: f64,
}

#[derive(Clone, Debug)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Optimal value in the requested sense (NaN unless Optimal).
    pub value: f64,
    /// Structural variable values.
    pub y: Vec<f64>,
    /// Equality-row duals: d(value)/d(b_eq) in the requested sense.
    pub eq_duals: Vec<f64>,
    /// Inequality-row duals, nonnegative in both senses.
    pub ineq_duals: Vec<f64>,
    /// Sorted ids of tight inequality rows and variable bounds (within 1e-8).
    pub active_set: Vec<u32>,
    pub iterations: usize,
    pub duality_gap: f64,
    pub max_primal_violation: f64,
    pub max_compl_violation: f64,
}

impl LpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DualsError {
    #[error("layer duals require an optimal solution, got {status:?}")]
    NotOptimal { status: LpStatus },
}

fn validate(
    net: &Network,
    profile: &BoundsProfile,
    objective: &LpObjective,
    opts: &LpBuildOptions,
) -> Result<(), LpBuildError> {
    if profile.n_layers() != net.n_layers() {
        return Err(LpBuildError::ProfileLayers {
            expected: net.n_layers(),
            got: profile.n_layers(),
        });
    }
    for (l, lb) in profile.layers.iter().enumerate() {
        let expected = net.dims()[l + 1];
        if lb.pre_lo.len() != expected || lb.pre_hi.len() != expected {
            return Err(LpBuildError::ProfileShape {
                layer: l,
                expected,
                got: lb.pre_lo.len(),
            });
        }
        for j in 0..expected {
            if lb.pre_lo[j] > lb.pre_hi[j] {
                return Err(LpBuildError::UnsoundProfile { layer: l, neuron: j });
            }
        }
    }
    match objective {
        LpObjective::Output(k) if *k >= net.n_outputs() => {
            return Err(LpBuildError::OutputIndex { got: *k, n_outputs: net.n_outputs() })
        }
        LpObjective::Weights(w) if w.len() != net.n_outputs() => {
            return Err(LpBuildError::WeightLen { expected: net.n_outputs(), got: w.len() })
        }
        _ => {}
    }
    if let Some(cf) = &opts.input_cost {
        if cf.len() != net.n_inputs() {
            return Err(LpBuildError::InputCostLen { expected: net.n_inputs(), got: cf.len() });
        }
    }
    Ok(())
}

fn build(
    net: &Network,
    profile: &BoundsProfile,
    in_lb: &[f64],
    in_ub: &[f64],
    objective: LpObjective,
    sense: Sense,
    opts: &LpBuildOptions,
) -> Result<LpModel, LpBuildError> {
    validate(net, profile, &objective, opts)?;

    let n0 = net.n_inputs();
    let n_hidden = net.n_hidden_layers();

    let mut lb: Vec<f64> = in_lb.to_vec();
    let mut ub: Vec<f64> = in_ub.to_vec();
    let input_vars: Vec<usize> = (0..n0).collect();

    let mut eq_rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut b_eq: Vec<f64> = Vec::new();
    let mut ineq_rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut h: Vec<f64> = Vec::new();
    let mut basis_hint: Vec<usize> = Vec::new();

    let mut hidden: Vec<Vec<NeuronVars>> = Vec::new();
    let mut output: Vec<NeuronVars> = Vec::new();

    // Post-activation reference of the previous layer, per neuron.
    let mut prev_refs: Vec<(XhatRef, usize)> =
        input_vars.iter().map(|&id| (XhatRef::Var(id), id)).collect();

    for l in 0..net.n_layers() {
        let w = net.weight(l);
        let b = net.bias(l);
        let out_dim = net.dims()[l + 1];
        let is_hidden = l < n_hidden;

        let z_base = lb.len();
        for _ in 0..out_dim {
            lb.push(f64::NEG_INFINITY);
            ub.push(f64::INFINITY);
        }

        // Classify, then allocate post-activation and indicator columns.
        let mut layer_vars: Vec<NeuronVars> = Vec::with_capacity(out_dim);
        for j in 0..out_dim {
            let (plo, phi) = (profile.layers[l].pre_lo[j], profile.layers[l].pre_hi[j]);
            let (xhat, a) = if !is_hidden {
                (XhatRef::AliasZ, None)
            } else if opts.fix_stable && plo >= 0.0 {
                (XhatRef::AliasZ, None)
            } else if opts.fix_stable && phi <= 0.0 {
                (XhatRef::Zero, None)
            } else {
                let xh = lb.len();
                lb.push(0.0);
                ub.push(f64::INFINITY);
                (XhatRef::Var(xh), Some(usize::MAX))
            };
            layer_vars.push(NeuronVars {
                z: z_base + j,
                xhat,
                a,
                eq_row: usize::MAX,
                bigm: None,
                pre_lo: plo,
                pre_hi: phi,
            });
        }
        for nv in layer_vars.iter_mut() {
            if nv.a.is_some() {
                nv.a = Some(lb.len());
                lb.push(0.0);
                ub.push(1.0);
            }
        }

        // Preactivation definition rows: z − W·x̂_prev = b.
        for (j, nv) in layer_vars.iter_mut().enumerate() {
            let mut row: Vec<(usize, f64)> = vec![(nv.z, 1.0)];
            for (k, &(xref, zid)) in prev_refs.iter().enumerate() {
                let wjk = w[(j, k)];
                if wjk == 0.0 {
                    continue;
                }
                match xref {
                    XhatRef::Var(id) => row.push((id, -wjk)),
                    XhatRef::AliasZ => row.push((zid, -wjk)),
                    XhatRef::Zero => {}
                }
            }
            nv.eq_row = eq_rows.len();
            basis_hint.push(nv.z);
            eq_rows.push(row);
            b_eq.push(b[(j, 0)]);
        }

        // Big-M facets for each neuron that kept an indicator.
        for nv in layer_vars.iter_mut() {
            let (Some(a), XhatRef::Var(xh)) = (nv.a, nv.xhat) else { continue };
            let (plo, phi) = (nv.pre_lo, nv.pre_hi);
            let ge_z = ineq_rows.len();
            ineq_rows.push(vec![(nv.z, 1.0), (xh, -1.0)]);
            h.push(0.0);
            let ub_shift = ineq_rows.len();
            ineq_rows.push(vec![(xh, 1.0), (nv.z, -1.0), (a, -plo)]);
            h.push(-plo);
            let ub_gate = ineq_rows.len();
            ineq_rows.push(vec![(xh, 1.0), (a, -phi)]);
            h.push(0.0);
            nv.bigm = Some(BigMRows { ge_z, ub_shift, ub_gate });
        }

        prev_refs = layer_vars.iter().map(|nv| (nv.xhat, nv.z)).collect();
        if is_hidden {
            hidden.push(layer_vars);
        } else {
            output = layer_vars;
        }
    }

    let mut c = vec![0.0; lb.len()];
    match &objective {
        LpObjective::Output(k) => c[output[*k].z] = 1.0,
        LpObjective::Weights(wts) => {
            for (k, &wk) in wts.iter().enumerate() {
                c[output[k].z] = wk;
            }
        }
    }
    if let Some(cf) = &opts.input_cost {
        for (k, &v) in cf.iter().enumerate() {
            c[input_vars[k]] += v;
        }
    }

    Ok(LpModel {
        sense,
        c,
        eq_rows,
        b_eq,
        ineq_rows,
        h,
        lb,
        ub,
        input_vars,
        hidden,
        output,
        basis_hint,
    })
}

/// LP relaxation with the input pinned to a point.
pub fn build_fixed_input_lp(
    net: &Network,
    profile: &BoundsProfile,
    x: &[f64],
    objective: LpObjective,
    sense: Sense,
) -> Result<LpModel, LpBuildError> {
    build_fixed_input_lp_with(net, profile, x, objective, sense, &LpBuildOptions::default())
}

pub fn build_fixed_input_lp_with(
    net: &Network,
    profile: &BoundsProfile,
    x: &[f64],
    objective: LpObjective,
    sense: Sense,
    opts: &LpBuildOptions,
) -> Result<LpModel, LpBuildError> {
    if x.len() != net.n_inputs() {
        return Err(LpBuildError::InputDim { expected: net.n_inputs(), got: x.len() });
    }
    build(net, profile, x, x, objective, sense, opts)
}

/// LP relaxation with the input ranging over a box.
pub fn build_box_input_lp(
    net: &Network,
    profile: &BoundsProfile,
    input: &InputBox,
    objective: LpObjective,
    sense: Sense,
) -> Result<LpModel, LpBuildError> {
    build_box_input_lp_with(net, profile, input, objective, sense, &LpBuildOptions::default())
}

pub fn build_box_input_lp_with(
    net: &Network,
    profile: &BoundsProfile,
    input: &InputBox,
    objective: LpObjective,
    sense: Sense,
    opts: &LpBuildOptions,
) -> Result<LpModel, LpBuildError> {
    if input.dim() != net.n_inputs() {
        return Err(LpBuildError::BoxDim { expected: net.n_inputs(), got: input.dim() });
    }
    build(net, profile, input.lb(), input.ub(), objective, sense, opts)
}

impl LpModel {
    pub fn n_vars(&self) -> usize {
        self.lb.len()
    }

    pub fn n_eq_rows(&self) -> usize {
        self.eq_rows.len()
    }

    pub fn n_ineq_rows(&self) -> usize {
        self.ineq_rows.len()
    }

    pub fn sense(&self) -> Sense {
        self.sense
    }

    pub fn input_vars(&self) -> &[usize] {
        &self.input_vars
    }

    pub fn var_bounds(&self, var: usize) -> (f64, f64) {
        (self.lb[var], self.ub[var])
    }

    pub fn n_hidden_layers(&self) -> usize {
        self.hidden.len()
    }

    /// Hidden-neuron handle, layer 0-based over hidden layers.
    pub fn neuron(&self, layer: usize, j: usize) -> &NeuronVars {
        &self.hidden[layer][j]
    }

    pub fn output_neuron(&self, k: usize) -> &NeuronVars {
        &self.output[k]
    }

    pub fn layer_width(&self, layer: usize) -> usize {
        self.hidden[layer].len()
    }

    /// Indicator columns in (layer, neuron) order.
    pub fn indicator_vars(&self) -> Vec<((usize, usize), usize)> {
        let mut out = Vec::new();
        for (l, layer) in self.hidden.iter().enumerate() {
            for (j, nv) in layer.iter().enumerate() {
                if let Some(a) = nv.a {
                    out.push(((l, j), a));
                }
            }
        }
        out
    }

    pub fn n_indicators(&self) -> usize {
        self.hidden.iter().flatten().filter(|nv| nv.a.is_some()).count()
    }

    /// Constraints encoding one neuron's ReLU: three rows plus the
    /// post-activation's zero lower bound, or none when substituted.
    pub fn bigm_constraint_count(&self, layer: usize, j: usize) -> usize {
        if self.hidden[layer][j].bigm.is_some() {
            4
        } else {
            0
        }
    }

    /// Range the model permits for a neuron's post-activation value.
    pub fn xhat_bounds(&self, layer: usize, j: usize) -> (f64, f64) {
        let nv = &self.hidden[layer][j];
        match nv.xhat {
            XhatRef::Var(id) => (self.lb[id], self.ub[id]),
            XhatRef::AliasZ => (nv.pre_lo.max(0.0), nv.pre_hi),
            XhatRef::Zero => (0.0, 0.0),
        }
    }

    pub fn solve(&self) -> LpSolution {
        self.solve_with(&[], DEFAULT_MAX_ITERS)
    }

    pub fn solve_with(&self, overrides: &[BoundOverride], max_iters: usize) -> LpSolution {
        let n = self.n_vars();
        let mut lb = self.lb.clone();
        let mut ub = self.ub.clone();
        for o in overrides {
            lb[o.var] = o.lb;
            ub[o.var] = o.ub;
        }

        let cost: Vec<f64> = match self.sense {
            Sense::Min => self.c.clone(),
            Sense::Max => self.c.iter().map(|v| -v).collect(),
        };

        let mut cols = vec![SparseCol::default(); n];
        for (r, row) in self.eq_rows.iter().enumerate() {
            for &(j, v) in row {
                cols[j].entries.push((r, v));
            }
        }
        let n_eq = self.eq_rows.len();
        for (r, row) in self.ineq_rows.iter().enumerate() {
            for &(j, v) in row {
                cols[j].entries.push((n_eq + r, v));
            }
        }
        let mut rhs = self.b_eq.clone();
        rhs.extend_from_slice(&self.h);

        let problem = SimplexProblem {
            n,
            cost,
            cols,
            n_eq,
            n_ineq: self.ineq_rows.len(),
            rhs,
            lb: lb.clone(),
            ub: ub.clone(),
            basis_hint: Some(self.basis_hint.clone()),
        };
        let raw = simplex::solve(&problem, max_iters);

        if raw.status != LpStatus::Optimal {
            return LpSolution {
                status: raw.status,
                value: f64::NAN,
                y: raw.x,
                eq_duals: vec![0.0; n_eq],
                ineq_duals: vec![0.0; self.ineq_rows.len()],
                active_set: Vec::new(),
                iterations: raw.iterations,
                duality_gap: f64::NAN,
                max_primal_violation: f64::NAN,
                max_compl_violation: f64::NAN,
            };
        }

        let x = raw.x;
        let value: f64 = self.c.iter().zip(&x).map(|(c, v)| c * v).sum();

        let dual_sign = match self.sense {
            Sense::Min => 1.0,
            Sense::Max => -1.0,
        };
        let eq_duals: Vec<f64> =
            raw.row_duals[..n_eq].iter().map(|&d| dual_sign * d).collect();
        let ineq_duals: Vec<f64> = raw.row_duals[n_eq..]
            .iter()
            .map(|&d| {
                let mu = -d;
                if mu < 0.0 && mu > -1e-6 {
                    0.0
                } else {
                    mu
                }
            })
            .collect();

        let mut max_primal = 0.0f64;
        for (row, &b) in self.eq_rows.iter().zip(&self.b_eq) {
            let act: f64 = row.iter().map(|&(j, v)| v * x[j]).sum();
            max_primal = max_primal.max((act - b).abs());
        }
        let mut max_compl = 0.0f64;
        let mut active = Vec::new();
        for (r, (row, &hv)) in self.ineq_rows.iter().zip(&self.h).enumerate() {
            let act: f64 = row.iter().map(|&(j, v)| v * x[j]).sum();
            max_primal = max_primal.max(act - hv);
            let slack = hv - act;
            max_compl = max_compl.max((ineq_duals[r] * slack).abs());
            if slack.abs() <= 1e-8 {
                active.push(r as u32);
            }
        }
        let base = self.ineq_rows.len() as u32;
        for j in 0..n {
            if lb[j].is_finite() {
                max_primal = max_primal.max(lb[j] - x[j]);
                if (x[j] - lb[j]).abs() <= 1e-8 {
                    active.push(base + 2 * j as u32);
                }
            }
            if ub[j].is_finite() {
                max_primal = max_primal.max(x[j] - ub[j]);
                if (x[j] - ub[j]).abs() <= 1e-8 {
                    active.push(base + 2 * j as u32 + 1);
                }
            }
        }
        active.sort_unstable();

        LpSolution {
            status: LpStatus::Optimal,
            value,
            y: x,
            eq_duals,
            ineq_duals,
            active_set: active,
            iterations: raw.iterations,
            duality_gap: raw.duality_gap,
            max_primal_violation: max_primal,
            max_compl_violation: max_compl,
        }
    }

    /// Post-activation values per layer: index 0 is the input values, then
    /// one entry per hidden layer. Relaxed solutions need not satisfy
    /// x̂ = max(0, z); these are the values the LP actually used.
    pub fn post_activations(&self, sol: &LpSolution) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.hidden.len() + 1);
        out.push(self.input_vars.iter().map(|&id| sol.y[id]).collect());
        for layer in &self.hidden {
            out.push(
                layer
                    .iter()
                    .map(|nv| match nv.xhat {
                        XhatRef::Var(id) => sol.y[id],
                        XhatRef::AliasZ => sol.y[nv.z],
                        XhatRef::Zero => 0.0,
                    })
                    .collect(),
            );
        }
        out
    }

    /// Preactivation values per parameterized layer (hidden then output).
    pub fn preactivations(&self, sol: &LpSolution) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self
            .hidden
            .iter()
            .map(|layer| layer.iter().map(|nv| sol.y[nv.z]).collect())
            .collect();
        out.push(self.output.iter().map(|nv| sol.y[nv.z]).collect());
        out
    }

    pub fn output_values(&self, sol: &LpSolution) -> Vec<f64> {
        self.output.iter().map(|nv| sol.y[nv.z]).collect()
    }

    /// Text dump in LP format, for external inspection only.
    pub fn to_lp_format(&self) -> String {
        let name = |j: usize| -> String {
            if j < self.input_vars.len() {
                return format!("x0_{j}");
            }
            for (l, layer) in self.hidden.iter().enumerate() {
                for (i, nv) in layer.iter().enumerate() {
                    if nv.z == j {
                        return format!("z{}_{i}", l + 1);
                    }
                    if nv.xhat == XhatRef::Var(j) {
                        return format!("xh{}_{i}", l + 1);
                    }
                    if nv.a == Some(j) {
                        return format!("a{}_{i}", l + 1);
                    }
                }
            }
            for (k, nv) in self.output.iter().enumerate() {
                if nv.z == j {
                    return format!("out_{k}");
                }
            }
            format!("v{j}")
        };
        let term = |j: usize, v: f64| -> String {
            if v < 0.0 {
                format!("- {} {}", -v, name(j))
            } else {
                format!("+ {} {}", v, name(j))
            }
        };
        let mut s = String::new();
        s.push_str(match self.sense {
            Sense::Min => "Minimize\n obj:",
            Sense::Max => "Maximize\n obj:",
        });
        for (j, &v) in self.c.iter().enumerate() {
            if v != 0.0 {
                s.push(' ');
                s.push_str(&term(j, v));
            }
        }
        s.push_str("\nSubject To\n");
        for (r, (row, &b)) in self.eq_rows.iter().zip(&self.b_eq).enumerate() {
            s.push_str(&format!(" eq{r}:"));
            for &(j, v) in row {
                s.push(' ');
                s.push_str(&term(j, v));
            }
            s.push_str(&format!(" = {b}\n"));
        }
        for (r, (row, &hv)) in self.ineq_rows.iter().zip(&self.h).enumerate() {
            s.push_str(&format!(" ineq{r}:"));
            for &(j, v) in row {
                s.push(' ');
                s.push_str(&term(j, v));
            }
            s.push_str(&format!(" <= {hv}\n"));
        }
        s.push_str("Bounds\n");
        for j in 0..self.n_vars() {
            let (l, u) = (self.lb[j], self.ub[j]);
            if l.is_infinite() && u.is_infinite() {
                s.push_str(&format!(" {} free\n", name(j)));
            } else {
                let lo = if l.is_finite() { format!("{l}") } else { "-inf".into() };
                let hi = if u.is_finite() { format!("{u}") } else { "+inf".into() };
                s.push_str(&format!(" {lo} <= {} <= {hi}\n", name(j)));
            }
        }
        s.push_str("End\n");
        s
    }
}

/// Equality-row duals grouped by layer: entry l covers parameterized layer
/// l (hidden layers first, output last), one dual per neuron. These are the
/// bias sensitivities of the optimal value.
pub fn layer_duals(model: &LpModel, sol: &LpSolution) -> Result<Vec<Vec<f64>>, DualsError> {
    if sol.status != LpStatus::Optimal {
        return Err(DualsError::NotOptimal { status: sol.status });
    }
    let mut out = Vec::with_capacity(model.hidden.len() + 1);
    for layer in &model.hidden {
        out.push(layer.iter().map(|nv| sol.eq_duals[nv.eq_row]).collect());
    }
    out.push(model.output.iter().map(|nv| sol.eq_duals[nv.eq_row]).collect());
    Ok(out)
}
