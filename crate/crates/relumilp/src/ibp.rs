//! Interval bound propagation over an input box.
//!
//! Propagates [L, U] pre-activation and [l̂, û] post-activation bounds layer
//! by layer using the interval form of each affine map, splitting weights
//! into positive and negative parts. Bounds exist for every layer including
//! the output layer; the output layer never enters the unstable set.
//!
//! Neuron stability is strict: L ≥ 0 is stably active, U ≤ 0 is stably
//! inactive, and only L < 0 < U puts a neuron in the unstable set.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, TapeError, Var};
use crate::mat::Mat;
use crate::net::{Network, TapeNet};

/// Axis-aligned input domain [lb, ub].
#[derive(Clone, Debug, PartialEq)]
pub struct InputBox {
    lb: Vec<f64>,
    ub: Vec<f64>,
}

impl InputBox {
    /// Panics unless lb ≤ ub elementwise.
    pub fn new(lb: Vec<f64>, ub: Vec<f64>) -> Self {
        assert_eq!(lb.len(), ub.len(), "box bound lengths differ");
        assert!(
            lb.iter().zip(&ub).all(|(a, b)| a <= b),
            "box requires lb <= ub elementwise"
        );
        InputBox { lb, ub }
    }

    pub fn unit(dim: usize) -> Self {
        InputBox { lb: vec![0.0; dim], ub: vec![1.0; dim] }
    }

    pub fn symmetric(dim: usize, half_width: f64) -> Self {
        assert!(half_width >= 0.0);
        InputBox { lb: vec![-half_width; dim], ub: vec![half_width; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lb.len()
    }

    pub fn lb(&self) -> &[f64] {
        &self.lb
    }

    pub fn ub(&self) -> &[f64] {
        &self.ub
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter().zip(&self.lb).all(|(v, l)| v >= l)
            && x.iter().zip(&self.ub).all(|(v, u)| v <= u)
    }

    /// Clamps x into the box elementwise.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lb.iter().zip(&self.ub))
            .map(|(v, (l, u))| v.max(*l).min(*u))
            .collect()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.lb
            .iter()
            .zip(&self.ub)
            .map(|(l, u)| if l == u { *l } else { rng.gen_range(*l..=*u) })
            .collect()
    }
}

/// Bounds for one layer. Post-activation bounds are present for hidden
/// layers only.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerBounds {
    pub pre_lo: Vec<f64>,
    pub pre_hi: Vec<f64>,
    pub post_lo: Option<Vec<f64>>,
    pub post_hi: Option<Vec<f64>>,
}

impl LayerBounds {
    pub fn width(&self) -> Vec<f64> {
        self.pre_lo.iter().zip(&self.pre_hi).map(|(l, u)| u - l).collect()
    }
}

/// Interval bounds for every layer of a network over a box.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundsProfile {
    /// One entry per parameterized layer; the last entry is the output layer.
    pub layers: Vec<LayerBounds>,
}

impl BoundsProfile {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn output_bounds(&self) -> (&[f64], &[f64]) {
        let last = self.layers.last().unwrap();
        (&last.pre_lo, &last.pre_hi)
    }

    /// Total hidden-neuron count (the normalizer Σ n_ℓ over hidden layers).
    pub fn n_hidden_neurons(&self) -> usize {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.pre_lo.len()).sum()
    }

    /// Mean pre-activation bound width over hidden neurons.
    pub fn mean_hidden_width(&self) -> f64 {
        let total: f64 = self.layers[..self.layers.len() - 1]
            .iter()
            .flat_map(|l| l.width())
            .sum();
        total / self.n_hidden_neurons() as f64
    }
}

/// Hidden neurons with L < 0 < U, as (layer, neuron) with layer 0-based.
pub fn unstable_set(profile: &BoundsProfile) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (l, lay) in profile.layers[..profile.layers.len() - 1].iter().enumerate() {
        for (j, (&lo, &hi)) in lay.pre_lo.iter().zip(&lay.pre_hi).enumerate() {
            if lo < 0.0 && hi > 0.0 {
                out.push((l, j));
            }
        }
    }
    out
}

pub fn unstable_count(profile: &BoundsProfile) -> usize {
    unstable_set(profile).len()
}

/// IBP bounds as tape variables, differentiable with respect to parameters.
pub struct TapeBounds {
    pub pre_lo: Vec<Var>,
    pub pre_hi: Vec<Var>,
    pub post_lo: Vec<Var>,
    pub post_hi: Vec<Var>,
}

impl TapeBounds {
    pub fn n_layers(&self) -> usize {
        self.pre_lo.len()
    }

    pub fn concrete(&self, tape: &Tape) -> BoundsProfile {
        let n = self.pre_lo.len();
        let layers = (0..n)
            .map(|l| LayerBounds {
                pre_lo: tape.value(self.pre_lo[l]).as_slice().to_vec(),
                pre_hi: tape.value(self.pre_hi[l]).as_slice().to_vec(),
                post_lo: (l + 1 < n).then(|| tape.value(self.post_lo[l]).as_slice().to_vec()),
                post_hi: (l + 1 < n).then(|| tape.value(self.post_hi[l]).as_slice().to_vec()),
            })
            .collect();
        BoundsProfile { layers }
    }
}

/// Propagates interval bounds on tape:
/// L = [W]⁺ l̂ + [W]⁻ û + b, U = [W]⁺ û + [W]⁻ l̂ + b, with post-activation
/// clamping l̂ = max(L, 0), û = max(U, 0) on hidden layers.
pub fn propagate_ibp_tape(
    tape: &mut Tape,
    net: &TapeNet,
    input: &InputBox,
) -> Result<TapeBounds, TapeError> {
    let mut lo = tape.constant(Mat::column(input.lb()));
    let mut hi = tape.constant(Mat::column(input.ub()));
    let n = net.n_layers();
    let mut bounds =
        TapeBounds { pre_lo: Vec::new(), pre_hi: Vec::new(), post_lo: Vec::new(), post_hi: Vec::new() };
    for l in 0..n {
        let wp = tape.pos_part(net.ws[l])?;
        let wn = tape.neg_part(net.ws[l])?;
        let pre_lo = {
            let a = tape.affine(wp, lo, net.bs[l])?;
            let b = tape.matmul(wn, hi)?;
            tape.add(a, b)?
        };
        let pre_hi = {
            let a = tape.affine(wp, hi, net.bs[l])?;
            let b = tape.matmul(wn, lo)?;
            tape.add(a, b)?
        };
        bounds.pre_lo.push(pre_lo);
        bounds.pre_hi.push(pre_hi);
        if l + 1 < n {
            lo = tape.relu(pre_lo)?;
            hi = tape.relu(pre_hi)?;
            bounds.post_lo.push(lo);
            bounds.post_hi.push(hi);
        }
    }
    Ok(bounds)
}

/// Plain-f64 propagation; identical arithmetic order to the tape version,
/// so the two paths agree bit-exactly.
pub fn propagate_ibp(net: &Network, input: &InputBox) -> BoundsProfile {
    assert_eq!(input.dim(), net.n_inputs(), "box dimension mismatch");
    let mut lo = Mat::column(input.lb());
    let mut hi = Mat::column(input.ub());
    let n = net.n_layers();
    let mut layers = Vec::with_capacity(n);
    for l in 0..n {
        let wp = net.weight(l).map(|v| v.max(0.0));
        let wn = net.weight(l).map(|v| v.min(0.0));
        let pre_lo = wp.matmul(&lo).add(net.bias(l)).add(&wn.matmul(&hi));
        let pre_hi = wp.matmul(&hi).add(net.bias(l)).add(&wn.matmul(&lo));
        let hidden = l + 1 < n;
        if hidden {
            lo = pre_lo.map(|v| v.max(0.0));
            hi = pre_hi.map(|v| v.max(0.0));
        }
        layers.push(LayerBounds {
            pre_lo: pre_lo.into_vec(),
            pre_hi: pre_hi.into_vec(),
            post_lo: hidden.then(|| lo.as_slice().to_vec()),
            post_hi: hidden.then(|| hi.as_slice().to_vec()),
        });
    }
    BoundsProfile { layers }
}

/// Sampled soundness evidence for a bounds profile.
#[derive(Clone, Debug)]
pub struct SoundnessReport {
    pub samples: usize,
    pub violations: usize,
    /// Largest observed excursion beyond [L − tol, U + tol]; 0 when sound.
    pub max_violation: f64,
}

pub const SOUNDNESS_TOL: f64 = 1e-9;

/// Checks L − tol ≤ z^(ℓ)(x) ≤ U + tol at every neuron for sampled x ∈ box.
/// Violations are reported, never thrown.
pub fn soundness_check(
    net: &Network,
    input: &InputBox,
    profile: &BoundsProfile,
    n_samples: usize,
    seed: u64,
) -> SoundnessReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut max_violation = 0.0f64;
    for _ in 0..n_samples {
        let x = input.sample(&mut rng);
        let trace = net.forward(&x).expect("box dimension matches network");
        let mut bad = false;
        for l in 0..profile.layers.len() {
            let z = trace.preactivation(l).as_slice();
            let lay = &profile.layers[l];
            for j in 0..z.len() {
                let under = lay.pre_lo[j] - SOUNDNESS_TOL - z[j];
                let over = z[j] - (lay.pre_hi[j] + SOUNDNESS_TOL);
                let exc = under.max(over);
                if exc > 0.0 {
                    bad = true;
                    max_violation = max_violation.max(exc);
                }
            }
        }
        if bad {
            violations += 1;
        }
    }
    SoundnessReport { samples: n_samples, violations, max_violation }
}
