//! Finite-difference audits of the analytic gradients.
//!
//! Two suites: the tape regularizers against central differences of an
//! independently computed forward value, and the LP dual channel against
//! rhs perturbations of the pointwise relaxation. Both skip probes that
//! straddle a kink (parameter sign change, bound sign change, active-set
//! move) and report what they skipped, so a clean pass means every
//! comparison that is mathematically meaningful actually agreed.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::ibp::{propagate_ibp, propagate_ibp_tape, BoundsProfile, InputBox};
use crate::lp::{build_fixed_input_lp, LpObjective, Sense};
use crate::mat::Mat;
use crate::net::Network;
use crate::reg::{reg_bw, reg_l1, reg_l2, reg_sn, reg_sn2, RegTerm};

/// The regularizers covered by the finite-difference suite, in run order.
pub const CHECKED_REGS: [RegTerm; 5] =
    [RegTerm::L1, RegTerm::L2, RegTerm::Bw, RegTerm::Sn, RegTerm::Sn2];

/// Name used when attributing a failure to a regularizer.
pub fn reg_label(term: RegTerm) -> &'static str {
    match term {
        RegTerm::L1 => "reg_l1",
        RegTerm::L2 => "reg_l2",
        RegTerm::Bw => "reg_bw",
        RegTerm::Sn => "reg_sn",
        RegTerm::Sn2 => "reg_sn2",
        RegTerm::Lp => "reg_lp",
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RegCheckOptions {
    /// Networks drawn for the suite.
    pub nets: usize,
    /// Central-difference step.
    pub eps: f64,
    /// Relative error threshold, denominator max(|fd|, 1).
    pub rel_tol: f64,
    /// A probe is skipped when any kink quantity comes this close to zero
    /// at either endpoint, or changes sign across them.
    pub kink_margin: f64,
}

impl Default for RegCheckOptions {
    fn default() -> Self {
        RegCheckOptions { nets: 50, eps: 1e-5, rel_tol: 1e-4, kink_margin: 1e-6 }
    }
}

/// One analytic-vs-numeric disagreement.
#[derive(Clone, Debug)]
pub struct GradFailure {
    pub regularizer: &'static str,
    pub net_index: usize,
    /// Flat index over (W0, b0, W1, b1, ...) in row-major entry order.
    pub param_index: usize,
    pub fd: f64,
    pub analytic: f64,
}

impl fmt::Display for GradFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} net {} param {}: fd {:.9e} vs analytic {:.9e}",
            self.regularizer, self.net_index, self.param_index, self.fd, self.analytic
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct RegSuiteReport {
    pub nets: usize,
    /// Probes compared against the analytic gradient.
    pub checked: usize,
    /// Probes excluded by the kink guard.
    pub skipped: usize,
    pub failures: Vec<GradFailure>,
}

impl RegSuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Hook applied to the analytic gradients before comparison. Lets a test
/// corrupt one regularizer's gradient and confirm the report attributes
/// the damage to that regularizer by name.
pub type GradTweak<'a> = &'a dyn Fn(RegTerm, &mut [Mat]);

pub fn check_regularizer_gradients(seed: u64, opts: &RegCheckOptions) -> RegSuiteReport {
    check_regularizer_gradients_with(seed, opts, None)
}

pub fn check_regularizer_gradients_with(
    seed: u64,
    opts: &RegCheckOptions,
    tweak: Option<GradTweak<'_>>,
) -> RegSuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = RegSuiteReport { nets: opts.nets, ..Default::default() };

    for net_index in 0..opts.nets {
        let dims = random_dims(&mut rng);
        let net = random_net(&mut rng, &dims, 1.2);
        let radius = rng.gen_range(0.6..1.4);
        let input = InputBox::symmetric(dims[0], radius);

        for term in CHECKED_REGS {
            check_one_term(term, net_index, &net, &input, opts, tweak, &mut report);
        }
    }
    report
}

fn random_dims(rng: &mut impl Rng) -> Vec<usize> {
    let mut dims = vec![rng.gen_range(1..=4)];
    for _ in 0..rng.gen_range(1..=3) {
        dims.push(rng.gen_range(2..=6));
    }
    dims.push(rng.gen_range(1..=2));
    dims
}

fn random_net(rng: &mut impl Rng, dims: &[usize], scale: f64) -> Network {
    let mut net = Network::init(dims, rng);
    net.visit_params_mut(|_, _, m| {
        for v in m.as_mut_slice() {
            *v = rng.gen_range(-scale..scale);
        }
    });
    net
}

/// Forward value computed without the tape, so the finite differences
/// exercise an independent code path.
fn concrete_value(term: RegTerm, net: &Network, profile: &BoundsProfile) -> f64 {
    match term {
        RegTerm::L1 | RegTerm::L2 => {
            let mut acc = 0.0;
            let mut scan = net.clone();
            scan.visit_params_mut(|_, _, m| {
                for v in m.as_slice() {
                    acc += if term == RegTerm::L1 { v.abs() } else { v * v };
                }
            });
            acc
        }
        RegTerm::Bw | RegTerm::Sn | RegTerm::Sn2 => {
            let mut acc = 0.0;
            let mut n = 0usize;
            for layer in &profile.layers[..profile.n_layers() - 1] {
                for (&lo, &hi) in layer.pre_lo.iter().zip(&layer.pre_hi) {
                    acc += match term {
                        RegTerm::Bw => hi - lo,
                        RegTerm::Sn => (-lo).max(0.0).min(hi.max(0.0)),
                        _ => -(1.0 + hi * lo).tanh(),
                    };
                    n += 1;
                }
            }
            if n == 0 { 0.0 } else { acc / n as f64 }
        }
        RegTerm::Lp => unreachable!("the dual channel has its own suite"),
    }
}

/// Quantities whose zero crossings are kinks of the given regularizer.
fn kink_quantities(term: RegTerm, net: &Network, profile: &BoundsProfile) -> Vec<f64> {
    let mut q = Vec::new();
    match term {
        RegTerm::L2 => {}
        RegTerm::L1 => {
            let mut scan = net.clone();
            scan.visit_params_mut(|_, _, m| q.extend_from_slice(m.as_slice()));
        }
        _ => {
            // The interval recursion splits on weight signs and clamps
            // bounds at zero; the stability distance also switches branch
            // where -L meets U.
            let mut scan = net.clone();
            scan.visit_params_mut(|_, is_weight, m| {
                if is_weight {
                    q.extend_from_slice(m.as_slice());
                }
            });
            for layer in &profile.layers[..profile.n_layers() - 1] {
                for (&lo, &hi) in layer.pre_lo.iter().zip(&layer.pre_hi) {
                    q.push(lo);
                    q.push(hi);
                    if term == RegTerm::Sn {
                        q.push(lo + hi);
                    }
                }
            }
        }
    }
    q
}

fn analytic_gradient(term: RegTerm, net: &Network, input: &InputBox) -> Vec<Mat> {
    let mut tape = Tape::new();
    let tn = net.on_tape(&mut tape);
    let out: Var = match term {
        RegTerm::L1 => reg_l1(&mut tape, &tn),
        RegTerm::L2 => reg_l2(&mut tape, &tn),
        _ => {
            let tb = propagate_ibp_tape(&mut tape, &tn, input)
                .expect("bounds propagate on a freshly built tape");
            match term {
                RegTerm::Bw => reg_bw(&mut tape, &tb),
                RegTerm::Sn => reg_sn(&mut tape, &tb),
                _ => reg_sn2(&mut tape, &tb),
            }
        }
    }
    .expect("regularizer builds on a fresh tape");
    tape.gradient(out, &tn.params()).expect("scalar output with tracked params")
}

fn check_one_term(
    term: RegTerm,
    net_index: usize,
    net: &Network,
    input: &InputBox,
    opts: &RegCheckOptions,
    tweak: Option<GradTweak<'_>>,
    report: &mut RegSuiteReport,
) {
    let mut grads = analytic_gradient(term, net, input);
    if let Some(t) = tweak {
        t(term, &mut grads);
    }

    let probe = |l: usize, is_weight: bool, r: usize, c: usize, d: f64| -> (f64, Vec<f64>) {
        let mut p = net.clone();
        if is_weight {
            p.weight_mut(l)[(r, c)] += d;
        } else {
            p.bias_mut(l)[(r, c)] += d;
        }
        let profile = propagate_ibp(&p, input);
        (concrete_value(term, &p, &profile), kink_quantities(term, &p, &profile))
    };

    let mut param_index = 0usize;
    for l in 0..net.n_layers() {
        for is_weight in [true, false] {
            let (pi, shape) = if is_weight {
                (2 * l, net.weight(l).shape())
            } else {
                (2 * l + 1, net.bias(l).shape())
            };
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let (vp, qp) = probe(l, is_weight, r, c, opts.eps);
                    let (vm, qm) = probe(l, is_weight, r, c, -opts.eps);
                    if !kink_free(&qp, &qm, opts.kink_margin) {
                        report.skipped += 1;
                        param_index += 1;
                        continue;
                    }
                    let fd = (vp - vm) / (2.0 * opts.eps);
                    let analytic = grads[pi][(r, c)];
                    if (fd - analytic).abs() / fd.abs().max(1.0) > opts.rel_tol {
                        report.failures.push(GradFailure {
                            regularizer: reg_label(term),
                            net_index,
                            param_index,
                            fd,
                            analytic,
                        });
                    }
                    report.checked += 1;
                    param_index += 1;
                }
            }
        }
    }
}

/// True when every kink quantity keeps its sign and a safe distance from
/// zero at both probe endpoints (a crossing strictly inside the interval
/// would flip the sign between them).
fn kink_free(qp: &[f64], qm: &[f64], margin: f64) -> bool {
    qp.iter().zip(qm).all(|(&a, &b)| a.abs() > margin && b.abs() > margin && a.signum() == b.signum())
}

#[derive(Clone, Copy, Debug)]
pub struct EnvelopeOptions {
    /// Fixed-input LPs drawn per batch.
    pub lps: usize,
    /// Bias entries probed per LP.
    pub probes_per_lp: usize,
    /// Perturbation applied to each probed rhs entry.
    pub eps: f64,
    /// Absolute tolerance on |central difference - dual|.
    pub tol: f64,
    /// Required fraction of probes with an unchanged active set.
    pub min_stable_fraction: f64,
    /// Batches to retry with a widened weight scale when too many probes
    /// land on degenerate solutions.
    pub max_widenings: usize,
}

impl Default for EnvelopeOptions {
    fn default() -> Self {
        EnvelopeOptions {
            lps: 100,
            probes_per_lp: 5,
            eps: 1e-5,
            tol: 1e-3,
            min_stable_fraction: 0.8,
            max_widenings: 3,
        }
    }
}

/// A dual that disagreed with the rhs finite difference despite a stable
/// active set.
#[derive(Clone, Debug)]
pub struct EnvelopeFailure {
    pub lp_index: usize,
    pub layer: usize,
    pub neuron: usize,
    pub fd: f64,
    pub dual: f64,
}

impl fmt::Display for EnvelopeFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "lp {} layer {} neuron {}: fd {:.9e} vs dual {:.9e}",
            self.lp_index, self.layer, self.neuron, self.fd, self.dual
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct EnvelopeReport {
    pub lps: usize,
    /// Probes attempted in the final batch.
    pub probes: usize,
    /// Probes whose active set held, hence compared.
    pub checked: usize,
    /// Probes skipped because the active set moved (degenerate sample).
    pub skipped: usize,
    pub widenings: usize,
    pub required_stable_fraction: f64,
    pub failures: Vec<EnvelopeFailure>,
}

impl EnvelopeReport {
    pub fn stable_fraction(&self) -> f64 {
        if self.probes == 0 {
            1.0
        } else {
            self.checked as f64 / self.probes as f64
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.stable_fraction() >= self.required_stable_fraction
    }
}

/// Checks that each equality-row dual predicts the LP value's response to
/// a small rhs shift. The bounds profile stays frozen while one bias entry
/// moves, so the rebuilt model differs from the base in exactly that rhs
/// entry; probes whose active-set fingerprint moves are skipped and
/// counted. If too few probes survive, the sampler widens its weight
/// scale and draws a fresh batch.
pub fn check_envelope_duals(seed: u64, opts: &EnvelopeOptions) -> EnvelopeReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = EnvelopeReport {
        required_stable_fraction: opts.min_stable_fraction,
        ..Default::default()
    };
    let mut scale = 1.2;

    loop {
        report.lps = 0;
        report.probes = 0;
        report.checked = 0;
        report.skipped = 0;
        for lp_index in 0..opts.lps {
            envelope_batch_one(lp_index, scale, &mut rng, opts, &mut report);
        }
        if report.stable_fraction() >= opts.min_stable_fraction
            || report.widenings >= opts.max_widenings
        {
            return report;
        }
        report.widenings += 1;
        scale *= 1.5;
    }
}

fn envelope_batch_one(
    lp_index: usize,
    scale: f64,
    rng: &mut ChaCha8Rng,
    opts: &EnvelopeOptions,
    report: &mut EnvelopeReport,
) {
    let dims = {
        let mut d = vec![rng.gen_range(1..=4)];
        for _ in 0..rng.gen_range(1..=3) {
            d.push(rng.gen_range(2..=8));
        }
        d.push(rng.gen_range(1..=2));
        d
    };
    let net = random_net(rng, &dims, scale);
    let radius = rng.gen_range(0.5..1.5);
    let input = InputBox::symmetric(dims[0], radius);
    let x = input.sample(rng);
    let profile = propagate_ibp(&net, &input);
    let objective = LpObjective::Output(rng.gen_range(0..net.n_outputs()));
    let sense = if rng.gen::<bool>() { Sense::Min } else { Sense::Max };

    let build = |p: &Network| {
        build_fixed_input_lp(p, &profile, &x, objective.clone(), sense)
            .expect("shapes match by construction")
    };
    let base_model = build(&net);
    let base = base_model.solve();
    if !base.is_optimal() {
        return;
    }
    report.lps += 1;

    let mut targets: Vec<(usize, usize)> = (0..net.n_layers())
        .flat_map(|l| (0..net.dims()[l + 1]).map(move |j| (l, j)))
        .collect();
    targets.shuffle(rng);
    targets.truncate(opts.probes_per_lp);

    for (l, j) in targets {
        report.probes += 1;
        let eq_row = if l < base_model.n_hidden_layers() {
            base_model.neuron(l, j).eq_row
        } else {
            base_model.output_neuron(j).eq_row
        };
        let dual = base.eq_duals[eq_row];

        let solve_at = |d: f64| {
            let mut p = net.clone();
            p.bias_mut(l)[(j, 0)] += d;
            build(&p).solve()
        };
        let sp = solve_at(opts.eps);
        let sm = solve_at(-opts.eps);
        if !sp.is_optimal()
            || !sm.is_optimal()
            || sp.active_set != base.active_set
            || sm.active_set != base.active_set
        {
            report.skipped += 1;
            continue;
        }
        let fd = (sp.value - sm.value) / (2.0 * opts.eps);
        if (fd - dual).abs() > opts.tol {
            report.failures.push(EnvelopeFailure { lp_index, layer: l, neuron: j, fd, dual });
        }
        report.checked += 1;
    }
}
