//! Feedforward ReLU networks: forward passes, losses, Adam, model files.
//!
//! Hidden layers apply ReLU; the output layer is linear. A network is a
//! flat list of (W, b) pairs whose shapes chain, and the same parameters
//! can be evaluated either directly (f64 paths used by the solver) or as
//! tape leaves (training paths that need gradients).

use std::fmt::Write as _;

use rand::Rng;

use crate::autodiff::{Tape, TapeError, Var};
use crate::mat::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    dims: Vec<usize>,
    weights: Vec<Mat>,
    biases: Vec<Mat>,
}

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("input length {got} does not match n_0 = {want}")]
    InputDim { got: usize, want: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("quantile levels must be strictly increasing in (0,1): {0:?}")]
    BadTaus(Vec<f64>),
    #[error("gradient shape mismatch at layer {layer}")]
    GradShape { layer: usize },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

impl Network {
    /// Builds from per-layer parameters; panics if shapes do not chain.
    pub fn from_layers(weights: Vec<Mat>, biases: Vec<Mat>) -> Self {
        assert_eq!(weights.len(), biases.len());
        assert!(!weights.is_empty(), "network needs at least one layer");
        let mut dims = vec![weights[0].cols()];
        for (w, b) in weights.iter().zip(&biases) {
            assert_eq!(w.cols(), *dims.last().unwrap(), "layer shapes must chain");
            assert_eq!(b.shape(), (w.rows(), 1), "bias shape must match layer rows");
            dims.push(w.rows());
        }
        Network { dims, weights, biases }
    }

    /// Seeded uniform init in [-sqrt(1/fan_in), +sqrt(1/fan_in)] per layer.
    pub fn init(dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 1..dims.len() {
            let fan_in = dims[l - 1];
            let bound = (1.0 / fan_in as f64).sqrt();
            let mut w = Mat::zeros(dims[l], fan_in);
            for v in w.as_mut_slice() {
                *v = rng.gen_range(-bound..=bound);
            }
            let mut b = Mat::zeros(dims[l], 1);
            for v in b.as_mut_slice() {
                *v = rng.gen_range(-bound..=bound);
            }
            weights.push(w);
            biases.push(b);
        }
        Network { dims: dims.to_vec(), weights, biases }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn n_inputs(&self) -> usize {
        self.dims[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Number of layers with parameters (hidden layers + output layer).
    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    /// Number of hidden (ReLU) layers.
    pub fn n_hidden_layers(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn weight(&self, layer: usize) -> &Mat {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &Mat {
        &self.biases[layer]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Mat {
        &mut self.weights[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Mat {
        &mut self.biases[layer]
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(Mat::len).sum::<usize>()
            + self.biases.iter().map(Mat::len).sum::<usize>()
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace, NetError> {
        if x.len() != self.n_inputs() {
            return Err(NetError::InputDim { got: x.len(), want: self.n_inputs() });
        }
        let mut pre = Vec::with_capacity(self.n_layers());
        let mut post = Vec::with_capacity(self.n_layers());
        let mut cur = Mat::column(x);
        for l in 0..self.n_layers() {
            let z = self.weights[l].matmul(&cur).add(&self.biases[l]);
            if l + 1 < self.n_layers() {
                cur = z.map(|v| v.max(0.0));
                post.push(cur.clone());
            } else {
                cur = z.clone();
            }
            pre.push(z);
        }
        Ok(ForwardTrace { input: x.to_vec(), pre, post })
    }

    /// Output vector only (length n_{L+1}).
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        Ok(self.forward(x)?.output().to_vec())
    }

    /// Registers all parameters as leaves on `tape`.
    pub fn on_tape(&self, tape: &mut Tape) -> TapeNet {
        let ws = self.weights.iter().map(|w| tape.param(w.clone())).collect();
        let bs = self.biases.iter().map(|b| tape.param(b.clone())).collect();
        TapeNet { ws, bs }
    }

    /// Applies `delta` elementwise to every parameter (used by optimizers).
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(usize, bool, &mut Mat)) {
        for l in 0..self.weights.len() {
            f(l, true, &mut self.weights[l]);
            f(l, false, &mut self.biases[l]);
        }
    }
}

/// Pre-/post-activations from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    input: Vec<f64>,
    /// z^(l) for every layer, output layer last.
    pre: Vec<Mat>,
    /// x̂^(l) for hidden layers only.
    post: Vec<Mat>,
}

impl ForwardTrace {
    pub fn input(&self) -> &[f64] {
        &self.input
    }

    pub fn preactivation(&self, layer: usize) -> &Mat {
        &self.pre[layer]
    }

    pub fn postactivation(&self, layer: usize) -> &Mat {
        &self.post[layer]
    }

    pub fn output(&self) -> &[f64] {
        self.pre.last().unwrap().as_slice()
    }
}

/// Network parameters registered on a tape.
pub struct TapeNet {
    pub ws: Vec<Var>,
    pub bs: Vec<Var>,
}

impl TapeNet {
    pub fn n_layers(&self) -> usize {
        self.ws.len()
    }

    /// Forward pass over a batch laid out as columns (n_0 x N) -> (K x N).
    pub fn forward_batch(&self, tape: &mut Tape, x: Var) -> Result<Var, TapeError> {
        let mut cur = x;
        for l in 0..self.ws.len() {
            let z = tape.affine(self.ws[l], cur, self.bs[l])?;
            cur = if l + 1 < self.ws.len() { tape.relu(z)? } else { z };
        }
        Ok(cur)
    }

    /// All parameter Vars, weights then biases per layer.
    pub fn params(&self) -> Vec<Var> {
        let mut out = Vec::with_capacity(2 * self.ws.len());
        for l in 0..self.ws.len() {
            out.push(self.ws[l]);
            out.push(self.bs[l]);
        }
        out
    }
}

/// Mean squared error over a batch: (1/N) Σ ||f(x_i) − y_i||².
/// `xs` is n_0 x N, `ys` is K x N.
pub fn mse_loss(tape: &mut Tape, net: &TapeNet, xs: &Mat, ys: &Mat) -> Result<Var, NetError> {
    if xs.cols() == 0 {
        return Err(NetError::EmptyBatch);
    }
    let x = tape.constant(xs.clone());
    let y = tape.constant(ys.clone());
    let preds = net.forward_batch(tape, x)?;
    let diff = tape.sub(preds, y)?;
    let sq = tape.mul(diff, diff)?;
    // mean over all K*N entries times K gives (1/N) Σ ||·||²; for K = 1 the
    // mean itself is the MSE.
    let m = tape.mean(sq)?;
    Ok(if ys.rows() > 1 { tape.scale(m, ys.rows() as f64)? } else { m })
}

/// Pinball (quantile) loss: (1/NK) Σ_i Σ_k max{τ_k e_ik, (τ_k−1) e_ik}
/// with e_ik = v_i − f_k(x_i). `preds` is K x N on tape, `targets` has
/// length N, `taus` has length K.
pub fn pinball_loss(
    tape: &mut Tape,
    preds: Var,
    targets: &[f64],
    taus: &[f64],
) -> Result<Var, NetError> {
    let (k, n) = preds.shape();
    if targets.len() != n {
        return Err(TapeError::ShapeMismatch { op: "pinball", lhs: (k, n), rhs: (targets.len(), 1) }
            .into());
    }
    if taus.len() != k
        || taus.iter().any(|t| !(0.0 < *t && *t < 1.0))
        || taus.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(NetError::BadTaus(taus.to_vec()));
    }
    let mut tgt = Mat::zeros(k, n);
    let mut tau_hi = Mat::zeros(k, n);
    let mut tau_lo = Mat::zeros(k, n);
    for r in 0..k {
        for c in 0..n {
            tgt[(r, c)] = targets[c];
            tau_hi[(r, c)] = taus[r];
            tau_lo[(r, c)] = taus[r] - 1.0;
        }
    }
    let tgt = tape.constant(tgt);
    let tau_hi = tape.constant(tau_hi);
    let tau_lo = tape.constant(tau_lo);
    let err = tape.sub(tgt, preds)?;
    let hi = tape.mul(tau_hi, err)?;
    let lo = tape.mul(tau_lo, err)?;
    let elem = tape.max(hi, lo)?;
    Ok(tape.mean(elem)?)
}

/// Plain-f64 pinball loss of fixed predictions (evaluation path).
pub fn pinball_value(preds: &Mat, targets: &[f64], taus: &[f64]) -> f64 {
    let (k, n) = preds.shape();
    assert_eq!(targets.len(), n);
    assert_eq!(taus.len(), k);
    let mut acc = 0.0;
    for r in 0..k {
        for c in 0..n {
            let e = targets[c] - preds[(r, c)];
            acc += (taus[r] * e).max((taus[r] - 1.0) * e);
        }
    }
    acc / (k * n) as f64
}

/// Gradients for every layer, mirroring Network's parameter layout.
#[derive(Clone, Debug)]
pub struct NetGrads {
    pub ws: Vec<Mat>,
    pub bs: Vec<Mat>,
}

impl NetGrads {
    /// Extracts parameter gradients of `loss` from the tape.
    pub fn of(tape: &Tape, net: &TapeNet, loss: Var) -> Result<Self, NetError> {
        let grads = tape.gradient(loss, &net.params())?;
        let n = net.n_layers();
        let mut ws = Vec::with_capacity(n);
        let mut bs = Vec::with_capacity(n);
        for (l, pair) in grads.chunks(2).enumerate() {
            debug_assert_eq!(l * 2 + 1, l * 2 + 1);
            ws.push(pair[0].clone());
            bs.push(pair[1].clone());
        }
        Ok(NetGrads { ws, bs })
    }

    pub fn max_abs(&self) -> f64 {
        self.ws
            .iter()
            .chain(self.bs.iter())
            .fold(0.0f64, |m, g| m.max(g.abs_max()))
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct AdamState {
    m_w: Vec<Mat>,
    v_w: Vec<Mat>,
    m_b: Vec<Mat>,
    v_b: Vec<Mat>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(net: &Network, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zero_like = |ms: &[Mat]| ms.iter().map(|m| Mat::zeros(m.rows(), m.cols())).collect();
        AdamState {
            m_w: zero_like(&net.weights),
            v_w: zero_like(&net.weights),
            m_b: zero_like(&net.biases),
            v_b: zero_like(&net.biases),
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn with_defaults(net: &Network) -> Self {
        Self::new(net, 1e-3, 0.9, 0.999, 1e-8)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

pub fn adam_step(
    net: &mut Network,
    grads: &NetGrads,
    state: &mut AdamState,
) -> Result<(), NetError> {
    for l in 0..net.n_layers() {
        if grads.ws[l].shape() != net.weights[l].shape()
            || grads.bs[l].shape() != net.biases[l].shape()
        {
            return Err(NetError::GradShape { layer: l + 1 });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    let update = |p: &mut Mat, g: &Mat, m: &mut Mat, v: &mut Mat| {
        let (pd, gd, md, vd) =
            (p.as_mut_slice(), g.as_slice(), m.as_mut_slice(), v.as_mut_slice());
        for i in 0..pd.len() {
            md[i] = b1 * md[i] + (1.0 - b1) * gd[i];
            vd[i] = b2 * vd[i] + (1.0 - b2) * gd[i] * gd[i];
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    };
    for l in 0..net.weights.len() {
        update(&mut net.weights[l], &grads.ws[l], &mut state.m_w[l], &mut state.v_w[l]);
        update(&mut net.biases[l], &grads.bs[l], &mut state.m_b[l], &mut state.v_b[l]);
    }
    Ok(())
}

/// How the trained inputs are meant to be used downstream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    Continuous,
    Binary,
}

/// A network plus the input domain it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub net: Network,
    pub input_kind: InputKind,
    pub box_lb: Vec<f64>,
    pub box_ub: Vec<f64>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelParseError {
    #[error("byte {offset}: {message}")]
    Malformed { offset: usize, message: String },
    #[error("layer {layer}: {message}")]
    DimMismatch { layer: usize, message: String },
}

const MODEL_MAGIC: &str = "relumilp-model v1";

/// Textual model file: versioned header, dims, input domain, then row-major
/// parameters printed at 17 significant digits (round trips bit-exactly).
pub fn serialize(model: &ModelFile) -> String {
    let net = &model.net;
    let mut out = String::new();
    let _ = writeln!(out, "{MODEL_MAGIC}");
    let _ = write!(out, "dims");
    for d in net.dims() {
        let _ = write!(out, " {d}");
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "inputs {}",
        match model.input_kind {
            InputKind::Continuous => "continuous",
            InputKind::Binary => "binary",
        }
    );
    let fmt_row = |row: &[f64]| {
        row.iter().map(|v| format!("{v:.16e}")).collect::<Vec<_>>().join(" ")
    };
    let _ = writeln!(out, "box_lb {}", fmt_row(&model.box_lb));
    let _ = writeln!(out, "box_ub {}", fmt_row(&model.box_ub));
    for l in 0..net.n_layers() {
        let _ = writeln!(out, "layer {}", l + 1);
        for r in 0..net.weights[l].rows() {
            let _ = writeln!(out, "W {}", fmt_row(net.weights[l].row(r)));
        }
        let _ = writeln!(out, "b {}", fmt_row(net.biases[l].as_slice()));
    }
    let _ = writeln!(out, "end");
    out
}

pub fn deserialize(text: &str) -> Result<ModelFile, ModelParseError> {
    let mut offset = 0usize;
    let malformed = |offset: usize, message: String| ModelParseError::Malformed { offset, message };

    // (byte offset, line) pairs, skipping blank lines.
    let mut lines = Vec::new();
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let trimmed = line.trim_end_matches(['\n', '\r']);
        if !trimmed.trim().is_empty() {
            lines.push((start, trimmed));
        }
    }
    let mut it = lines.into_iter().peekable();

    let (off, magic) =
        it.next().ok_or_else(|| malformed(0, "empty model file".into()))?;
    if magic != MODEL_MAGIC {
        return Err(malformed(off, format!("bad header {magic:?}, expected {MODEL_MAGIC:?}")));
    }

    let parse_floats = |off: usize, body: &str| -> Result<Vec<f64>, ModelParseError> {
        body.split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|e| malformed(off, format!("bad number {tok:?}: {e}")))
            })
            .collect()
    };

    let (off, dims_line) =
        it.next().ok_or_else(|| malformed(text.len(), "missing dims line".into()))?;
    let dims: Vec<usize> = dims_line
        .strip_prefix("dims ")
        .ok_or_else(|| malformed(off, format!("expected dims line, got {dims_line:?}")))?
        .split_whitespace()
        .map(|tok| {
            tok.parse::<usize>().map_err(|e| malformed(off, format!("bad dim {tok:?}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
        return Err(malformed(off, format!("invalid dims {dims:?}")));
    }

    let (off, inputs_line) =
        it.next().ok_or_else(|| malformed(text.len(), "missing inputs line".into()))?;
    let input_kind = match inputs_line.strip_prefix("inputs ") {
        Some("continuous") => InputKind::Continuous,
        Some("binary") => InputKind::Binary,
        _ => return Err(malformed(off, format!("expected inputs line, got {inputs_line:?}"))),
    };

    let mut expect_vec = |prefix: &str, want_len: usize| -> Result<Vec<f64>, ModelParseError> {
        let (off, line) = it
            .next()
            .ok_or_else(|| malformed(text.len(), format!("missing {prefix} line")))?;
        let body = line
            .strip_prefix(prefix)
            .ok_or_else(|| malformed(off, format!("expected {prefix} line, got {line:?}")))?;
        let v = parse_floats(off, body)?;
        if v.len() != want_len {
            return Err(malformed(off, format!("{prefix} has {} entries, expected {want_len}", v.len())));
        }
        Ok(v)
    };

    let box_lb = expect_vec("box_lb ", dims[0])?;
    let box_ub = expect_vec("box_ub ", dims[0])?;

    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 1..dims.len() {
        let (off, line) =
            it.next().ok_or_else(|| malformed(text.len(), format!("missing layer {l}")))?;
        if line != format!("layer {l}") {
            return Err(malformed(off, format!("expected \"layer {l}\", got {line:?}")));
        }
        let mut w = Mat::zeros(dims[l], dims[l - 1]);
        for r in 0..dims[l] {
            let (off, line) = it.next().ok_or_else(|| {
                malformed(text.len(), format!("layer {l}: truncated weight rows"))
            })?;
            let body = line.strip_prefix("W ").ok_or_else(|| {
                malformed(off, format!("layer {l}: expected weight row, got {line:?}"))
            })?;
            let row = parse_floats(off, body)?;
            if row.len() != dims[l - 1] {
                return Err(ModelParseError::DimMismatch {
                    layer: l,
                    message: format!(
                        "weight row has {} columns, dims header says {}",
                        row.len(),
                        dims[l - 1]
                    ),
                });
            }
            for (c, v) in row.into_iter().enumerate() {
                w[(r, c)] = v;
            }
        }
        let (off, line) = it
            .next()
            .ok_or_else(|| malformed(text.len(), format!("layer {l}: missing bias line")))?;
        let body = line
            .strip_prefix("b ")
            .ok_or_else(|| malformed(off, format!("layer {l}: expected bias line, got {line:?}")))?;
        let b = parse_floats(off, body)?;
        if b.len() != dims[l] {
            return Err(ModelParseError::DimMismatch {
                layer: l,
                message: format!("bias has {} entries, dims header says {}", b.len(), dims[l]),
            });
        }
        weights.push(w);
        biases.push(Mat::column(&b));
    }

    let (off, endline) =
        it.next().ok_or_else(|| malformed(text.len(), "missing end marker".into()))?;
    if endline != "end" {
        return Err(malformed(off, format!("expected end marker, got {endline:?}")));
    }

    Ok(ModelFile { net: Network::from_layers(weights, biases), input_kind, box_lb, box_ub })
}
