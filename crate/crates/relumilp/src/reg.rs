//! Training regularizers and their composition into the total loss.
//!
//! Weight shrinkage (L1/L2) is a raw sum over parameters; the bound-width,
//! stability, and relaxation-gap terms are means over hidden neurons or
//! over a subsample of inputs. The relaxation-gap term routes its gradient
//! through the LP duals: duals and post-activations are frozen as
//! constants and a straight-through construction keeps the forward value
//! equal to the solver's gap while the backward pass sees the dual-weighted
//! linear form.

use rand::Rng;

use crate::autodiff::{Tape, TapeError, Var};
use crate::ibp::{propagate_ibp, BoundsProfile, InputBox, TapeBounds};
use crate::lp::{
    build_fixed_input_lp, layer_duals, LpBuildError, LpModel, LpObjective, LpSolution, LpStatus,
    Sense,
};
use crate::mat::Mat;
use crate::net::{mse_loss, pinball_loss, NetError, Network, TapeNet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpDirection {
    Min,
    Max,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionMode {
    /// Uniform on the unit sphere.
    Sphere,
    /// Uniform on the sphere restricted to the nonnegative orthant.
    Nonnegative,
}

#[derive(Clone, Debug)]
pub struct RegularizerConfig {
    pub lambda_l1: f64,
    pub lambda_l2: f64,
    pub lambda_bw: f64,
    pub lambda_sn: f64,
    pub lambda_sn2: f64,
    pub lambda_lp: f64,
    pub lp_direction: LpDirection,
    /// Inputs drawn from the front of the batch for the gap term.
    pub lp_subsample: usize,
    pub projection: ProjectionMode,
    /// Pairs a bound-width term with the gap term: the effective
    /// bound-width weight becomes lambda_bw + alpha * lambda_lp.
    pub alpha: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            lambda_l1: 0.0,
            lambda_l2: 0.0,
            lambda_bw: 0.0,
            lambda_sn: 0.0,
            lambda_sn2: 0.0,
            lambda_lp: 0.0,
            lp_direction: LpDirection::Min,
            lp_subsample: 1,
            projection: ProjectionMode::Sphere,
            alpha: 0.0,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<(), RegError> {
        let named = [
            ("l1", self.lambda_l1),
            ("l2", self.lambda_l2),
            ("bw", self.lambda_bw),
            ("sn", self.lambda_sn),
            ("sn2", self.lambda_sn2),
            ("lp", self.lambda_lp),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(RegError::BadWeight { name, value: v });
            }
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(RegError::BadAlpha(self.alpha));
        }
        if self.lp_subsample == 0 {
            return Err(RegError::EmptySubsample);
        }
        Ok(())
    }

    pub fn effective_bw_weight(&self) -> f64 {
        self.lambda_bw + self.alpha * self.lambda_lp
    }

    /// True when interval bounds must live on the tape.
    pub fn needs_tape_bounds(&self) -> bool {
        self.effective_bw_weight() > 0.0 || self.lambda_sn > 0.0 || self.lambda_sn2 > 0.0
    }

    pub fn any_active(&self) -> bool {
        self.needs_tape_bounds()
            || self.lambda_l1 > 0.0
            || self.lambda_l2 > 0.0
            || self.lambda_lp > 0.0
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RegError {
    #[error("regularizer weight {name} is {value}; weights must be finite and nonnegative")]
    BadWeight { name: &'static str, value: f64 },
    #[error("alpha {0} must be finite and nonnegative")]
    BadAlpha(f64),
    #[error("lp subsample size must be at least 1")]
    EmptySubsample,
    #[error("lp subsample {subsample} exceeds batch size {batch}")]
    SubsampleTooLarge { subsample: usize, batch: usize },
    #[error("relaxation at sample {sample} terminated with {status:?}")]
    Lp { sample: usize, status: LpStatus },
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Build(#[from] LpBuildError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Sum of absolute parameter values, unnormalized.
pub fn reg_l1(tape: &mut Tape, net: &TapeNet) -> Result<Var, TapeError> {
    let mut acc: Option<Var> = None;
    for l in 0..net.n_layers() {
        for p in [net.ws[l], net.bs[l]] {
            let a = tape.abs(p)?;
            let s = tape.sum(a)?;
            acc = Some(match acc {
                None => s,
                Some(t) => tape.add(t, s)?,
            });
        }
    }
    Ok(acc.expect("networks have at least one layer"))
}

/// Sum of squared parameter values, unnormalized.
pub fn reg_l2(tape: &mut Tape, net: &TapeNet) -> Result<Var, TapeError> {
    let mut acc: Option<Var> = None;
    for l in 0..net.n_layers() {
        for p in [net.ws[l], net.bs[l]] {
            let sq = tape.mul(p, p)?;
            let s = tape.sum(sq)?;
            acc = Some(match acc {
                None => s,
                Some(t) => tape.add(t, s)?,
            });
        }
    }
    Ok(acc.expect("networks have at least one layer"))
}

fn hidden_neuron_count(tape: &Tape, bounds: &TapeBounds) -> usize {
    (0..bounds.n_layers() - 1).map(|l| tape.value(bounds.pre_lo[l]).len()).sum()
}

/// Mean preactivation bound width over hidden neurons.
pub fn reg_bw(tape: &mut Tape, bounds: &TapeBounds) -> Result<Var, TapeError> {
    let n = hidden_neuron_count(tape, bounds);
    if n == 0 {
        return Ok(tape.scalar(0.0));
    }
    let mut acc: Option<Var> = None;
    for l in 0..bounds.n_layers() - 1 {
        let width = tape.sub(bounds.pre_hi[l], bounds.pre_lo[l])?;
        let s = tape.sum(width)?;
        acc = Some(match acc {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    tape.scale(acc.unwrap(), 1.0 / n as f64)
}

/// Mean distance to stability, min([−L]⁺, [U]⁺): zero exactly on stable
/// neurons. At |L| = U the elementwise min splits its gradient evenly,
/// which is one valid subgradient of the min.
pub fn reg_sn(tape: &mut Tape, bounds: &TapeBounds) -> Result<Var, TapeError> {
    let n = hidden_neuron_count(tape, bounds);
    if n == 0 {
        return Ok(tape.scalar(0.0));
    }
    let mut acc: Option<Var> = None;
    for l in 0..bounds.n_layers() - 1 {
        let neg_lo = tape.neg(bounds.pre_lo[l])?;
        let lo_part = tape.pos_part(neg_lo)?;
        let hi_part = tape.pos_part(bounds.pre_hi[l])?;
        let m = tape.min(lo_part, hi_part)?;
        let s = tape.sum(m)?;
        acc = Some(match acc {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    tape.scale(acc.unwrap(), 1.0 / n as f64)
}

/// Mean smooth sign-agreement score, −tanh(1 + U·L).
pub fn reg_sn2(tape: &mut Tape, bounds: &TapeBounds) -> Result<Var, TapeError> {
    let n = hidden_neuron_count(tape, bounds);
    if n == 0 {
        return Ok(tape.scalar(0.0));
    }
    let mut acc: Option<Var> = None;
    for l in 0..bounds.n_layers() - 1 {
        let prod = tape.mul(bounds.pre_hi[l], bounds.pre_lo[l])?;
        let shifted = tape.add_scalar(prod, 1.0)?;
        let t = tape.tanh(shifted)?;
        let nt = tape.neg(t)?;
        let s = tape.sum(nt)?;
        acc = Some(match acc {
            None => s,
            Some(t2) => tape.add(t2, s)?,
        });
    }
    tape.scale(acc.unwrap(), 1.0 / n as f64)
}

/// Random unit direction for projecting multi-output networks to a scalar.
pub fn sample_projection(rng: &mut impl Rng, k: usize, mode: ProjectionMode) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..k)
            .map(|_| {
                let u1: f64 = 1.0 - rng.gen::<f64>();
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        if mode == ProjectionMode::Nonnegative {
            for x in &mut v {
                *x = x.abs();
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            for x in &mut v {
                *x /= norm;
            }
            return v;
        }
    }
}

/// Per-sample record of the relaxation gap term.
#[derive(Clone, Debug)]
pub struct LpSampleDiag {
    pub f_omega: f64,
    pub v_min: Option<f64>,
    pub v_max: Option<f64>,
    /// Gap value as it entered the loss (min, max, or their sum).
    pub gap: f64,
    pub omega: Option<Vec<f64>>,
}

/// Straight-through value for one solved relaxation: the forward pass is
/// exactly the LP optimum and the backward pass is the dual-weighted
/// affine form over the frozen activations.
fn dual_proxy(
    tape: &mut Tape,
    tnet: &TapeNet,
    model: &LpModel,
    sol: &LpSolution,
) -> Result<Var, RegError> {
    let nus = layer_duals(model, sol).expect("caller checked optimality");
    let xhats = model.post_activations(sol);

    let mut proxy: Option<Var> = None;
    for l in 0..tnet.n_layers() {
        let nu = tape.constant(Mat::column(&nus[l]));
        let xprev = tape.constant(Mat::column(&xhats[l]));
        let z = tape.affine(tnet.ws[l], xprev, tnet.bs[l])?;
        let weighted = tape.mul(nu, z)?;
        let s = tape.sum(weighted)?;
        proxy = Some(match proxy {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    let p = proxy.expect("networks have at least one layer");
    let frozen = tape.detach(p)?;
    let zero = tape.sub(p, frozen)?;
    Ok(tape.add_scalar(zero, sol.value)?)
}

/// Mean relaxation gap over the given sample columns. Each sample solves
/// the pointwise LP (in one or both senses) and contributes
/// f − V^min, V^max − f, or their sum; the value is the solver's gap and
/// the gradient flows through the network term and the dual proxy.
/// The LPs are independent and solved in parallel; tape composition is
/// sequential, so the result does not depend on scheduling.
pub fn reg_lp(
    tape: &mut Tape,
    net: &Network,
    tnet: &TapeNet,
    profile: &BoundsProfile,
    samples: &Mat,
    cfg: &RegularizerConfig,
    rng: &mut impl Rng,
) -> Result<(Var, Vec<LpSampleDiag>), RegError> {
    use rayon::prelude::*;

    assert_eq!(samples.rows(), net.n_inputs(), "sample rows must match inputs");
    let n = samples.cols();
    assert!(n > 0, "at least one sample required");
    let multi = net.n_outputs() > 1;
    let senses: &[Sense] = match cfg.lp_direction {
        LpDirection::Min => &[Sense::Min],
        LpDirection::Max => &[Sense::Max],
        LpDirection::Both => &[Sense::Min, Sense::Max],
    };

    let mut omegas = Vec::with_capacity(n);
    let mut models = Vec::with_capacity(n * senses.len());
    for i in 0..n {
        let x = samples.columns_range(i, i + 1);
        let omega = multi.then(|| sample_projection(rng, net.n_outputs(), cfg.projection));
        let objective = match &omega {
            None => LpObjective::Output(0),
            Some(w) => LpObjective::Weights(w.clone()),
        };
        for &sense in senses {
            models.push(build_fixed_input_lp(
                net,
                profile,
                x.as_slice(),
                objective.clone(),
                sense,
            )?);
        }
        omegas.push(omega);
    }
    let sols: Vec<LpSolution> = models.par_iter().map(|m| m.solve()).collect();
    for (j, s) in sols.iter().enumerate() {
        if !s.is_optimal() {
            return Err(RegError::Lp { sample: j / senses.len(), status: s.status });
        }
    }

    let mut acc: Option<Var> = None;
    let mut diags = Vec::with_capacity(n);
    for i in 0..n {
        let x = samples.columns_range(i, i + 1);
        let xc = tape.constant(x);
        let f = tnet.forward_batch(tape, xc)?;
        let f_omega = match &omegas[i] {
            None => tape.sum(f)?,
            Some(w) => {
                let wc = tape.constant(Mat::column(w));
                let prod = tape.mul(f, wc)?;
                tape.sum(prod)?
            }
        };

        let mut v_min = None;
        let mut v_max = None;
        let mut delta: Option<Var> = None;
        for (k, &sense) in senses.iter().enumerate() {
            let j = i * senses.len() + k;
            let vt = dual_proxy(tape, tnet, &models[j], &sols[j])?;
            let side = match sense {
                Sense::Min => {
                    v_min = Some(sols[j].value);
                    tape.sub(f_omega, vt)?
                }
                Sense::Max => {
                    v_max = Some(sols[j].value);
                    tape.sub(vt, f_omega)?
                }
            };
            delta = Some(match delta {
                None => side,
                Some(d) => tape.add(d, side)?,
            });
        }
        let delta = delta.expect("at least one sense");

        diags.push(LpSampleDiag {
            f_omega: tape.scalar_value(f_omega),
            v_min,
            v_max,
            gap: tape.scalar_value(delta),
            omega: omegas[i].clone(),
        });
        acc = Some(match acc {
            None => delta,
            Some(t) => tape.add(t, delta)?,
        });
    }
    let total = tape.scale(acc.unwrap(), 1.0 / n as f64)?;
    Ok((total, diags))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegTerm {
    L1,
    L2,
    Bw,
    Sn,
    Sn2,
    Lp,
}

impl RegTerm {
    pub fn name(self) -> &'static str {
        match self {
            RegTerm::L1 => "l1",
            RegTerm::L2 => "l2",
            RegTerm::Bw => "bw",
            RegTerm::Sn => "sn",
            RegTerm::Sn2 => "sn2",
            RegTerm::Lp => "lp",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum DataLoss<'a> {
    Mse,
    Pinball { taus: &'a [f64] },
}

#[derive(Clone, Debug)]
pub struct RegTermValue {
    pub term: RegTerm,
    pub weight: f64,
    pub value: f64,
}

#[derive(Debug)]
pub struct LossParts {
    pub total: Var,
    pub data: Var,
    pub terms: Vec<RegTermValue>,
    pub lp_diag: Vec<LpSampleDiag>,
}

/// Data loss plus every active regularizer. Terms with zero weight are
/// skipped entirely, so an all-zero config returns the bare data loss
/// node itself. Interval bounds are propagated once and shared between
/// the bound-based terms and the relaxation profile.
pub fn total_loss(
    tape: &mut Tape,
    net: &Network,
    tnet: &TapeNet,
    xs: &Mat,
    ys: &Mat,
    data: DataLoss,
    input: &InputBox,
    cfg: &RegularizerConfig,
    rng: &mut impl Rng,
) -> Result<LossParts, RegError> {
    cfg.validate()?;
    let batch = xs.cols();
    if cfg.lambda_lp > 0.0 && cfg.lp_subsample > batch {
        return Err(RegError::SubsampleTooLarge { subsample: cfg.lp_subsample, batch });
    }

    let data_var = match data {
        DataLoss::Mse => mse_loss(tape, tnet, xs, ys)?,
        DataLoss::Pinball { taus } => {
            let xc = tape.constant(xs.clone());
            let preds = tnet.forward_batch(tape, xc)?;
            assert_eq!(ys.rows(), 1, "pinball targets are a single row");
            pinball_loss(tape, preds, ys.as_slice(), taus)?
        }
    };

    let mut total = data_var;
    let mut terms = Vec::new();
    let mut push = |tape: &mut Tape, total: &mut Var, term, weight, var: Var| {
        let scaled = tape.scale(var, weight)?;
        *total = tape.add(*total, scaled)?;
        terms.push(RegTermValue { term, weight, value: tape.scalar_value(var) });
        Ok::<(), TapeError>(())
    };

    if cfg.lambda_l1 > 0.0 {
        let r = reg_l1(tape, tnet)?;
        push(tape, &mut total, RegTerm::L1, cfg.lambda_l1, r)?;
    }
    if cfg.lambda_l2 > 0.0 {
        let r = reg_l2(tape, tnet)?;
        push(tape, &mut total, RegTerm::L2, cfg.lambda_l2, r)?;
    }

    let bounds = if cfg.needs_tape_bounds() {
        Some(crate::ibp::propagate_ibp_tape(tape, tnet, input)?)
    } else {
        None
    };
    if let Some(tb) = &bounds {
        let eff_bw = cfg.effective_bw_weight();
        if eff_bw > 0.0 {
            let r = reg_bw(tape, tb)?;
            push(tape, &mut total, RegTerm::Bw, eff_bw, r)?;
        }
        if cfg.lambda_sn > 0.0 {
            let r = reg_sn(tape, tb)?;
            push(tape, &mut total, RegTerm::Sn, cfg.lambda_sn, r)?;
        }
        if cfg.lambda_sn2 > 0.0 {
            let r = reg_sn2(tape, tb)?;
            push(tape, &mut total, RegTerm::Sn2, cfg.lambda_sn2, r)?;
        }
    }

    let mut lp_diag = Vec::new();
    if cfg.lambda_lp > 0.0 {
        let profile = match &bounds {
            Some(tb) => tb.concrete(tape),
            None => propagate_ibp(net, input),
        };
        let samples = xs.columns_range(0, cfg.lp_subsample);
        let (r, diag) = reg_lp(tape, net, tnet, &profile, &samples, cfg, rng)?;
        push(tape, &mut total, RegTerm::Lp, cfg.lambda_lp, r)?;
        lp_diag = diag;
    }

    Ok(LossParts { total, data: data_var, terms, lp_diag })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ibp::propagate_ibp_tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tape_net(net: &Network) -> (Tape, TapeNet) {
        let mut tape = Tape::new();
        let tnet = net.on_tape(&mut tape);
        (tape, tnet)
    }

    fn single_layer(w: Vec<f64>, b: Vec<f64>) -> Network {
        let cols = w.len() / b.len();
        let rows: Vec<Vec<f64>> =
            w.chunks(cols).map(|c| c.to_vec()).collect();
        Network::from_layers(vec![Mat::from_rows(&rows)], vec![Mat::column(&b)])
    }

    fn scalar_relu_chain(w1: f64, b1: f64, w2: f64, b2: f64) -> Network {
        Network::from_layers(
            vec![Mat::from_rows(&[vec![w1]]), Mat::from_rows(&[vec![w2]])],
            vec![Mat::column(&[b1]), Mat::column(&[b2])],
        )
    }

    fn random_net(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Network {
        let mut net = Network::init(dims, rng);
        net.visit_params_mut(|_, is_weight, m| {
            if is_weight {
                *m = m.scale(scale);
            }
        });
        net
    }

    #[test]
    fn l1_value_and_gradient() {
        let net = single_layer(vec![1.0, -2.0], vec![3.0]);
        let (mut t, tn) = tape_net(&net);
        let r = reg_l1(&mut t, &tn).unwrap();
        assert_eq!(t.scalar_value(r), 6.0);
        let g = t.gradient(r, &tn.params()).unwrap();
        assert_eq!(g[0].as_slice(), &[1.0, -1.0]);
        assert_eq!(g[1].as_slice(), &[1.0]);

        let zero = single_layer(vec![0.0, 0.0], vec![0.0]);
        let (mut t, tn) = tape_net(&zero);
        let r = reg_l1(&mut t, &tn).unwrap();
        assert_eq!(t.scalar_value(r), 0.0);
    }

    #[test]
    fn l2_value_and_gradient() {
        let net = single_layer(vec![1.0, -2.0], vec![3.0]);
        let (mut t, tn) = tape_net(&net);
        let r = reg_l2(&mut t, &tn).unwrap();
        assert_eq!(t.scalar_value(r), 14.0);
        let g = t.gradient(r, &tn.params()).unwrap();
        assert_eq!(g[0].as_slice(), &[2.0, -4.0]);
        assert_eq!(g[1].as_slice(), &[6.0]);
    }

    #[test]
    fn bw_mean_of_constant_width() {
        // Three parallel neurons each with width |w| * (1 − (−1)) = 2.
        let net = Network::from_layers(
            vec![
                Mat::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]),
                Mat::from_rows(&[vec![1.0, 1.0, 1.0]]),
            ],
            vec![Mat::column(&[0.3, -0.2, 5.0]), Mat::column(&[0.0])],
        );
        let (mut t, tn) = tape_net(&net);
        let tb = propagate_ibp_tape(&mut t, &tn, &InputBox::symmetric(1, 1.0)).unwrap();
        let r = reg_bw(&mut t, &tb).unwrap();
        assert!((t.scalar_value(r) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn bw_zero_weight_net_is_zero() {
        let net = Network::from_layers(
            vec![
                Mat::from_rows(&[vec![0.0, 0.0]]),
                Mat::from_rows(&[vec![0.0]]),
            ],
            vec![Mat::column(&[7.0]), Mat::column(&[-3.0])],
        );
        let (mut t, tn) = tape_net(&net);
        let tb = propagate_ibp_tape(&mut t, &tn, &InputBox::unit(2)).unwrap();
        let r = reg_bw(&mut t, &tb).unwrap();
        assert_eq!(t.scalar_value(r), 0.0);
    }

    #[test]
    fn bw_agrees_with_concrete_profile() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = random_net(&mut rng, &[2, 2, 1], 1.0);
        let input = InputBox::symmetric(2, 1.0);
        let (mut t, tn) = tape_net(&net);
        let tb = propagate_ibp_tape(&mut t, &tn, &input).unwrap();
        let r = reg_bw(&mut t, &tb).unwrap();
        // Independent path: the concrete recursion through plain floats.
        let profile = propagate_ibp(&net, &input);
        let total: f64 = profile.layers[..profile.n_layers() - 1]
            .iter()
            .flat_map(|l| l.width())
            .sum();
        let want = total / profile.n_hidden_neurons() as f64;
        assert!((t.scalar_value(r) - want).abs() <= 1e-12);
    }

    fn bounds_for_box(lo: f64, hi: f64) -> (Tape, TapeBounds) {
        // One passthrough hidden neuron: L = lo, U = hi on the box.
        let net = scalar_relu_chain(1.0, 0.0, 1.0, 0.0);
        let mut t = Tape::new();
        let tn = net.on_tape(&mut t);
        let tb =
            propagate_ibp_tape(&mut t, &tn, &InputBox::new(vec![lo], vec![hi])).unwrap();
        (t, tb)
    }

    #[test]
    fn sn_examples() {
        let (mut t, tb) = bounds_for_box(-3.0, 1.0);
        let r = reg_sn(&mut t, &tb).unwrap();
        assert!((t.scalar_value(r) - 1.0).abs() < 1e-15);

        let (mut t, tb) = bounds_for_box(0.5, 2.0);
        let r = reg_sn(&mut t, &tb).unwrap();
        assert_eq!(t.scalar_value(r), 0.0);

        let (mut t, tb) = bounds_for_box(-2.0, -0.1);
        let r = reg_sn(&mut t, &tb).unwrap();
        assert_eq!(t.scalar_value(r), 0.0);
    }

    #[test]
    fn sn2_examples() {
        let (mut t, tb) = bounds_for_box(1.0, 2.0);
        let r = reg_sn2(&mut t, &tb).unwrap();
        assert!((t.scalar_value(r) - (-(3.0f64).tanh())).abs() < 1e-12);

        let (mut t, tb) = bounds_for_box(-2.0, 2.0);
        let r = reg_sn2(&mut t, &tb).unwrap();
        assert!((t.scalar_value(r) - (3.0f64).tanh()).abs() < 1e-12);

        let (mut t, tb) = bounds_for_box(0.0, 0.0);
        let r = reg_sn2(&mut t, &tb).unwrap();
        assert!((t.scalar_value(r) - (-(1.0f64).tanh())).abs() < 1e-12);
    }

    #[test]
    fn sn_at_most_half_bw_on_unstable_neurons() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let net = random_net(&mut rng, &[2, 5, 3, 1], 1.5);
            let profile = propagate_ibp(&net, &InputBox::symmetric(2, 1.0));
            for layer in &profile.layers[..profile.n_layers() - 1] {
                for (l, u) in layer.pre_lo.iter().zip(&layer.pre_hi) {
                    if *l < 0.0 && *u > 0.0 {
                        assert!((-l).min(*u) <= (u - l) / 2.0 + 1e-15);
                    }
                }
            }
        }
    }

    /// Central difference over every parameter entry; skips entries whose
    /// bound expressions sit near a kink of the interval recursion.
    fn fd_check(
        net: &Network,
        build: impl Fn(&mut Tape, &TapeNet) -> Var,
        rel_tol: f64,
        kink_guard: impl Fn(&Network) -> bool,
    ) -> usize {
        let eps = 1e-6;
        let (mut t, tn) = tape_net(net);
        let out = build(&mut t, &tn);
        let grads = t.gradient(out, &tn.params()).unwrap();

        let mut checked = 0;
        let n_layers = net.n_layers();
        for l in 0..n_layers {
            for (pi, is_weight) in [(2 * l, true), (2 * l + 1, false)] {
                let shape = if is_weight {
                    net.weight(l).shape()
                } else {
                    net.bias(l).shape()
                };
                for r in 0..shape.0 {
                    for c in 0..shape.1 {
                        let probe = |d: f64| -> Option<f64> {
                            let mut p = net.clone();
                            if is_weight {
                                p.weight_mut(l)[(r, c)] += d;
                            } else {
                                p.bias_mut(l)[(r, c)] += d;
                            }
                            if !kink_guard(&p) {
                                return None;
                            }
                            let (mut t2, tn2) = tape_net(&p);
                            let v = build(&mut t2, &tn2);
                            Some(t2.scalar_value(v))
                        };
                        let (Some(vp), Some(vm)) = (probe(eps), probe(-eps)) else {
                            continue;
                        };
                        let fd = (vp - vm) / (2.0 * eps);
                        let got = grads[pi][(r, c)];
                        let denom = fd.abs().max(1.0);
                        if (fd - got).abs() / denom > rel_tol {
                            panic!(
                                "layer {l} {} ({r},{c}): fd {fd} vs grad {got}",
                                if is_weight { "W" } else { "b" }
                            );
                        }
                        checked += 1;
                    }
                }
            }
        }
        checked
    }

    #[test]
    fn fd_gradients_for_tape_regularizers() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let input = InputBox::symmetric(2, 0.9);
        let mut net;
        // Keep weights clear of zero (L1 kink) and bound expressions away
        // from sign changes (width/stability kinks).
        loop {
            net = random_net(&mut rng, &[2, 4, 1], 1.2);
            let mut ok = true;
            net.visit_params_mut(|_, is_weight, m| {
                if is_weight && m.as_slice().iter().any(|v| v.abs() < 5e-3) {
                    ok = false;
                }
            });
            let profile = propagate_ibp(&net, &input);
            for layer in &profile.layers {
                for (l, u) in layer.pre_lo.iter().zip(&layer.pre_hi) {
                    if l.abs() < 0.05 || u.abs() < 0.05 || (l.abs() - u.abs()).abs() < 0.05 {
                        ok = false;
                    }
                }
            }
            if ok {
                break;
            }
        }

        let no_guard = |_: &Network| true;
        let n1 = fd_check(&net, |t, tn| reg_l1(t, tn).unwrap(), 1e-4, no_guard);
        let n2 = fd_check(&net, |t, tn| reg_l2(t, tn).unwrap(), 1e-4, no_guard);
        let ib = input.clone();
        let n3 = fd_check(
            &net,
            move |t, tn| {
                let tb = propagate_ibp_tape(t, tn, &ib).unwrap();
                reg_bw(t, &tb).unwrap()
            },
            1e-4,
            no_guard,
        );
        let ib = input.clone();
        let n4 = fd_check(
            &net,
            move |t, tn| {
                let tb = propagate_ibp_tape(t, tn, &ib).unwrap();
                reg_sn(t, &tb).unwrap()
            },
            1e-4,
            no_guard,
        );
        let ib = input.clone();
        let n5 = fd_check(
            &net,
            move |t, tn| {
                let tb = propagate_ibp_tape(t, tn, &ib).unwrap();
                reg_sn2(t, &tb).unwrap()
            },
            1e-4,
            no_guard,
        );
        let total = net.n_params();
        for (name, n) in [("l1", n1), ("l2", n2), ("bw", n3), ("sn", n4), ("sn2", n5)] {
            assert_eq!(n, total, "{name} skipped entries");
        }
    }

    #[test]
    fn lp_gap_zero_for_affine_net() {
        let net = single_layer(vec![1.5, -0.5], vec![0.25]);
        let input = InputBox::symmetric(2, 1.0);
        let profile = propagate_ibp(&net, &input);
        let (mut t, tn) = tape_net(&net);
        let samples = Mat::from_vec(2, 1, vec![0.3, -0.7]);
        let cfg = RegularizerConfig { lambda_lp: 1.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (r, diag) =
            reg_lp(&mut t, &net, &tn, &profile, &samples, &cfg, &mut rng).unwrap();
        // No hidden layers: nothing is relaxed, so the gap is solver noise.
        assert!(t.scalar_value(r).abs() <= 1e-12);
        assert_eq!(diag.len(), 1);
        assert!(diag[0].gap.abs() <= 1e-12);
    }

    #[test]
    fn lp_gap_zero_when_all_neurons_stable() {
        let net = scalar_relu_chain(1.0, 10.0, 2.0, 0.0);
        let input = InputBox::symmetric(1, 1.0);
        let profile = propagate_ibp(&net, &input);
        let (mut t, tn) = tape_net(&net);
        let samples = Mat::from_vec(1, 1, vec![0.4]);
        let cfg = RegularizerConfig { lambda_lp: 1.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (r, _) = reg_lp(&mut t, &net, &tn, &profile, &samples, &cfg, &mut rng).unwrap();
        assert!(t.scalar_value(r).abs() <= 1e-9);
    }

    #[test]
    fn lp_single_neuron_hand_oracle() {
        // Passthrough ReLU on [−1, 1] at x = 0.5. Minimizing pushes the
        // relaxed activation down to ReLU itself, so the gap is zero.
        let net = scalar_relu_chain(1.0, 0.0, 1.0, 0.0);
        let input = InputBox::symmetric(1, 1.0);
        let profile = propagate_ibp(&net, &input);
        let (mut t, tn) = tape_net(&net);
        let samples = Mat::from_vec(1, 1, vec![0.5]);
        let cfg = RegularizerConfig { lambda_lp: 1.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (r, diag) =
            reg_lp(&mut t, &net, &tn, &profile, &samples, &cfg, &mut rng).unwrap();
        assert!((diag[0].v_min.unwrap() - 0.5).abs() < 1e-9);
        assert!(t.scalar_value(r).abs() < 1e-9);

        // Negated output weight: minimizing wants the activation as large
        // as possible. By hand over the two upper facets with L = −1,
        // U = 1, z = 0.5: x̂ ≤ min(a, z − L(1 − a)) peaks where the facets
        // cross, a = (z + 1)/2 = 0.75, so V = −0.75 and the gap is 0.25.
        let net = scalar_relu_chain(1.0, 0.0, -1.0, 0.0);
        let profile = propagate_ibp(&net, &input);
        let (mut t, tn) = tape_net(&net);
        let (r, diag) =
            reg_lp(&mut t, &net, &tn, &profile, &samples, &cfg, &mut rng).unwrap();
        assert!((diag[0].v_min.unwrap() - (-0.75)).abs() < 1e-9);
        assert!((t.scalar_value(r) - 0.25).abs() < 1e-9);
        assert!((diag[0].f_omega - (-0.5)).abs() < 1e-12);
    }

    #[test]
    fn straight_through_forward_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let net = random_net(&mut rng, &[2, 5, 3], 1.3);
        let input = InputBox::symmetric(2, 1.0);
        let profile = propagate_ibp(&net, &input);
        let (mut t, tn) = tape_net(&net);
        let mut samples = Mat::zeros(2, 3);
        for c in 0..3 {
            let x = input.sample(&mut rng);
            samples[(0, c)] = x[0];
            samples[(1, c)] = x[1];
        }
        let cfg = RegularizerConfig {
            lambda_lp: 1.0,
            lp_direction: LpDirection::Both,
            ..Default::default()
        };
        let (r, diag) =
            reg_lp(&mut t, &net, &tn, &profile, &samples, &cfg, &mut rng).unwrap();
        // Reassemble the mean exactly as the tape did: left fold then scale.
        let mut acc = diag[0].gap;
        for d in &diag[1..] {
            acc += d.gap;
        }
        let want = acc * (1.0 / diag.len() as f64);
        assert_eq!(t.scalar_value(r), want, "forward value must be bit-exact");
        for d in &diag {
            assert!(d.omega.is_some());
            assert!(d.gap >= -2e-9);
        }
    }

    #[test]
    fn lp_gap_nonnegative_across_random_nets() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for trial in 0..15 {
            let net = random_net(&mut rng, &[2, 4, 2, 1], 1.4);
            let input = InputBox::symmetric(2, 0.8);
            let profile = propagate_ibp(&net, &input);
            let direction = match trial % 3 {
                0 => LpDirection::Min,
                1 => LpDirection::Max,
                _ => LpDirection::Both,
            };
            let cfg = RegularizerConfig {
                lambda_lp: 1.0,
                lp_direction: direction,
                ..Default::default()
            };
            let (mut t, tn) = tape_net(&net);
            let x = input.sample(&mut rng);
            let samples = Mat::from_vec(2, 1, x);
            let (r, diag) =
                reg_lp(&mut t, &net, &tn, &profile, &samples, &cfg, &mut rng).unwrap();
            assert!(t.scalar_value(r) >= -2e-9, "trial {trial} direction {direction:?}");
            if let Some(v) = diag[0].v_min {
                assert!(diag[0].f_omega - v >= -1e-9, "trial {trial}: min side negative");
            }
            if let Some(v) = diag[0].v_max {
                assert!(v - diag[0].f_omega >= -1e-9, "trial {trial}: max side negative");
            }
        }
    }

    #[test]
    fn lp_gradient_matches_envelope_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let mut checked = 0usize;
        for _ in 0..8 {
            let net = random_net(&mut rng, &[2, 3, 1], 1.4);
            let input = InputBox::symmetric(2, 0.9);
            let profile = propagate_ibp(&net, &input);
            let x = input.sample(&mut rng);
            let cfg = RegularizerConfig { lambda_lp: 1.0, ..Default::default() };

            let (mut t, tn) = tape_net(&net);
            let samples = Mat::from_vec(2, 1, x.clone());
            let (r, _) = reg_lp(
                &mut t,
                &net,
                &tn,
                &profile,
                &samples,
                &cfg,
                &mut ChaCha8Rng::seed_from_u64(1),
            )
            .unwrap();
            let grads = t.gradient(r, &tn.params()).unwrap();

            // Envelope finite differences: the bounds profile is frozen
            // while the parameter moves, matching the gradient the proxy
            // is supposed to deliver.
            let eps = 1e-5;
            let delta_at = |p: &Network| -> (f64, Vec<u32>) {
                let m = build_fixed_input_lp(p, &profile, &x, LpObjective::Output(0), Sense::Min)
                    .unwrap();
                let s = m.solve();
                assert!(s.is_optimal());
                (p.eval(&x).unwrap()[0] - s.value, s.active_set)
            };
            for l in 0..net.n_layers() {
                for (pi, is_weight) in [(2 * l, true), (2 * l + 1, false)] {
                    let shape = if is_weight {
                        net.weight(l).shape()
                    } else {
                        net.bias(l).shape()
                    };
                    for ri in 0..shape.0 {
                        for ci in 0..shape.1 {
                            let probe = |d: f64| -> (f64, Vec<u32>) {
                                let mut p = net.clone();
                                if is_weight {
                                    p.weight_mut(l)[(ri, ci)] += d;
                                } else {
                                    p.bias_mut(l)[(ri, ci)] += d;
                                }
                                delta_at(&p)
                            };
                            let (vp, ap) = probe(eps);
                            let (vm, am) = probe(-eps);
                            if ap != am {
                                continue; // active set moved; skip the kink
                            }
                            let fd = (vp - vm) / (2.0 * eps);
                            let got = grads[pi][(ri, ci)];
                            assert!(
                                (fd - got).abs() / fd.abs().max(1.0) < 1e-3,
                                "layer {l} {} ({ri},{ci}): fd {fd} vs {got}",
                                if is_weight { "W" } else { "b" }
                            );
                            checked += 1;
                        }
                    }
                }
            }
        }
        assert!(checked > 50, "only {checked} stable probes");
    }

    #[test]
    fn combined_gradient_decomposes() {
        // d(gap + α·Σwidth)/dθ must equal d(gap)/dθ + α·d(Σwidth)/dθ with
        // each side built on its own tape.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let net = random_net(&mut rng, &[1, 2, 1], 1.5);
        let input = InputBox::symmetric(1, 1.0);
        let profile = propagate_ibp(&net, &input);
        let x = vec![0.3];
        let alpha = 0.37;
        let cfg = RegularizerConfig { lambda_lp: 1.0, ..Default::default() };

        let raw_width = |t: &mut Tape, tn: &TapeNet| -> Var {
            let tb = propagate_ibp_tape(t, tn, &input).unwrap();
            let mut acc: Option<Var> = None;
            for l in 0..tb.n_layers() - 1 {
                let w = t.sub(tb.pre_hi[l], tb.pre_lo[l]).unwrap();
                let s = t.sum(w).unwrap();
                acc = Some(match acc {
                    None => s,
                    Some(a) => t.add(a, s).unwrap(),
                });
            }
            acc.unwrap()
        };

        // Left: one combined expression.
        let (mut t, tn) = tape_net(&net);
        let samples = Mat::from_vec(1, 1, x.clone());
        let (gap, _) = reg_lp(
            &mut t,
            &net,
            &tn,
            &profile,
            &samples,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        let width = raw_width(&mut t, &tn);
        let scaled = t.scale(width, alpha).unwrap();
        let combined = t.add(gap, scaled).unwrap();
        let left = t.gradient(combined, &tn.params()).unwrap();

        // Right: each channel on an independent tape.
        let (mut t1, tn1) = tape_net(&net);
        let (gap1, _) = reg_lp(
            &mut t1,
            &net,
            &tn1,
            &profile,
            &samples,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        let g_gap = t1.gradient(gap1, &tn1.params()).unwrap();
        let (mut t2, tn2) = tape_net(&net);
        let width2 = raw_width(&mut t2, &tn2);
        let g_width = t2.gradient(width2, &tn2.params()).unwrap();

        for i in 0..left.len() {
            for (k, &lv) in left[i].as_slice().iter().enumerate() {
                let rv = g_gap[i].as_slice()[k] + alpha * g_width[i].as_slice()[k];
                assert!(
                    (lv - rv).abs() <= 1e-10,
                    "param {i} entry {k}: combined {lv} vs decomposed {rv}"
                );
            }
        }
    }

    #[test]
    fn projection_sampling_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let v = sample_projection(&mut rng, 5, ProjectionMode::Sphere);
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            let w = sample_projection(&mut rng, 5, ProjectionMode::Nonnegative);
            assert!(w.iter().all(|&x| x >= 0.0));
            let norm: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_all_zero_is_bare_data_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let net = random_net(&mut rng, &[2, 4, 1], 1.0);
        let xs = Mat::from_vec(2, 5, (0..10).map(|i| i as f64 / 10.0 - 0.5).collect());
        let ys = Mat::from_vec(1, 5, vec![0.1, -0.2, 0.3, 0.0, 0.5]);
        let input = InputBox::symmetric(2, 1.0);

        let (mut t, tn) = tape_net(&net);
        let parts = total_loss(
            &mut t,
            &net,
            &tn,
            &xs,
            &ys,
            DataLoss::Mse,
            &input,
            &RegularizerConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(parts.total, parts.data, "no extra nodes for zero weights");
        assert!(parts.terms.is_empty());

        let (mut t2, tn2) = tape_net(&net);
        let bare = mse_loss(&mut t2, &tn2, &xs, &ys).unwrap();
        assert_eq!(t.scalar_value(parts.total), t2.scalar_value(bare));
        let g1 = t.gradient(parts.total, &tn.params()).unwrap();
        let g2 = t2.gradient(bare, &tn2.params()).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.as_slice(), b.as_slice());
        }
    }

    #[test]
    fn total_loss_combined_alpha_bookkeeping() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let net = random_net(&mut rng, &[2, 3, 1], 1.0);
        let xs = Mat::from_vec(2, 4, vec![0.1, 0.2, 0.3, 0.4, -0.1, -0.2, -0.3, -0.4]);
        let ys = Mat::from_vec(1, 4, vec![0.0, 0.1, 0.2, 0.3]);
        let input = InputBox::symmetric(2, 1.0);
        let cfg = RegularizerConfig {
            lambda_lp: 1e-3,
            alpha: 2.0,
            ..Default::default()
        };
        let (mut t, tn) = tape_net(&net);
        let parts = total_loss(
            &mut t, &net, &tn, &xs, &ys, DataLoss::Mse, &input, &cfg, &mut rng,
        )
        .unwrap();
        let bw = parts.terms.iter().find(|tv| tv.term == RegTerm::Bw).unwrap();
        assert!((bw.weight - 2e-3).abs() < 1e-18);
        let lp = parts.terms.iter().find(|tv| tv.term == RegTerm::Lp).unwrap();
        assert_eq!(lp.weight, 1e-3);
        assert_eq!(parts.lp_diag.len(), 1);

        // Total reassembles from the parts.
        let data = t.scalar_value(parts.data);
        let mut want = data;
        for tv in &parts.terms {
            want += tv.weight * tv.value;
        }
        let got = t.scalar_value(parts.total);
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn total_loss_pinball_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let net = random_net(&mut rng, &[1, 4, 3], 1.0);
        let xs = Mat::from_vec(1, 6, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]);
        let ys = Mat::from_vec(1, 6, vec![0.05, 0.1, 0.2, 0.25, 0.4, 0.45]);
        let input = InputBox::unit(1);
        let taus = [0.25, 0.5, 0.75];
        let cfg = RegularizerConfig { lambda_bw: 1e-2, ..Default::default() };
        let (mut t, tn) = tape_net(&net);
        let parts = total_loss(
            &mut t,
            &net,
            &tn,
            &xs,
            &ys,
            DataLoss::Pinball { taus: &taus },
            &input,
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert!(t.scalar_value(parts.data) >= 0.0);
        assert_eq!(parts.terms.len(), 1);
        assert_eq!(parts.terms[0].term, RegTerm::Bw);
    }

    #[test]
    fn config_validation_errors() {
        let mut cfg = RegularizerConfig { lambda_bw: -1.0, ..Default::default() };
        assert!(matches!(
            cfg.validate(),
            Err(RegError::BadWeight { name: "bw", .. })
        ));
        cfg.lambda_bw = f64::NAN;
        assert!(cfg.validate().is_err());
        cfg.lambda_bw = 0.0;
        cfg.lp_subsample = 0;
        assert!(matches!(cfg.validate(), Err(RegError::EmptySubsample)));
        cfg.lp_subsample = 1;
        cfg.alpha = -0.5;
        assert!(matches!(cfg.validate(), Err(RegError::BadAlpha(_))));

        // Subsample larger than the batch only matters when the LP term is on.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = random_net(&mut rng, &[1, 2, 1], 1.0);
        let xs = Mat::from_vec(1, 2, vec![0.1, 0.2]);
        let ys = Mat::from_vec(1, 2, vec![0.0, 0.1]);
        let cfg = RegularizerConfig {
            lambda_lp: 1.0,
            lp_subsample: 5,
            ..Default::default()
        };
        let (mut t, tn) = tape_net(&net);
        let err = total_loss(
            &mut t,
            &net,
            &tn,
            &xs,
            &ys,
            DataLoss::Mse,
            &InputBox::unit(1),
            &cfg,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, RegError::SubsampleTooLarge { subsample: 5, batch: 2 }));
    }

    #[test]
    fn multi_output_gap_uses_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let net = random_net(&mut rng, &[2, 4, 3], 1.2);
        let input = InputBox::symmetric(2, 0.8);
        let profile = propagate_ibp(&net, &input);
        let cfg = RegularizerConfig {
            lambda_lp: 1.0,
            projection: ProjectionMode::Nonnegative,
            ..Default::default()
        };
        let (mut t, tn) = tape_net(&net);
        let samples = Mat::from_vec(2, 2, vec![0.1, -0.3, 0.2, 0.4]);
        let (r, diag) =
            reg_lp(&mut t, &net, &tn, &profile, &samples, &cfg, &mut rng).unwrap();
        assert!(t.scalar_value(r) >= -1e-9);
        for d in &diag {
            let w = d.omega.as_ref().unwrap();
            assert!(w.iter().all(|&v| v >= 0.0));
            assert!((w.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        }
        // Same seed, same draws: the term is deterministic.
        let (mut t2, tn2) = tape_net(&net);
        let mut rng2 = ChaCha8Rng::seed_from_u64(43);
        let net2 = random_net(&mut rng2, &[2, 4, 3], 1.2);
        assert_eq!(net2.weight(0).as_slice(), net.weight(0).as_slice());
        let (r2, diag2) =
            reg_lp(&mut t2, &net2, &tn2, &profile, &samples, &cfg, &mut rng2).unwrap();
        assert_eq!(t.scalar_value(r), t2.scalar_value(r2));
        assert_eq!(diag[0].omega, diag2[0].omega);
    }
}
