//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles together
//! with its forward value; [`Tape::gradient`] replays the record backwards,
//! accumulating one vector-Jacobian product per node. Tapes are built for a
//! single loss evaluation and discarded afterwards.
//!
//! Subgradient conventions at kinks are fixed so training is deterministic:
//! `relu`, `abs`, `pos_part` and `neg_part` use subgradient 0 at 0, and the
//! elementwise `max`/`min` split the adjoint 0.5/0.5 on exact ties.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::mat::Mat;

static TAPE_IDS: AtomicU64 = AtomicU64::new(0);

/// Handle to a tape node. Copyable; only valid with the tape that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TapeError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("gradient target must be scalar, got {shape:?}")]
    NonScalarOutput { shape: (usize, usize) },
    #[error("variable belongs to a different tape")]
    ForeignVar,
}

enum Op {
    Leaf,
    /// w * x + b with b broadcast across the columns of x.
    Affine { w: usize, x: usize, b: usize },
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Max { a: usize, b: usize },
    Min { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    Neg { a: usize },
    Relu { a: usize },
    Abs { a: usize },
    Tanh { a: usize },
    PosPart { a: usize },
    NegPart { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    Detach,
}

struct Node {
    op: Op,
    value: Mat,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: TAPE_IDS.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        let (rows, cols) = value.shape();
        let id = self.nodes.len();
        self.nodes.push(Node { op, value });
        Var { tape: self.id, id, rows, cols }
    }

    fn check(&self, v: Var) -> Result<(), TapeError> {
        if v.tape != self.id {
            return Err(TapeError::ForeignVar);
        }
        debug_assert!(v.id < self.nodes.len());
        Ok(())
    }

    /// Leaf that gradients are usually requested for.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Leaf treated as data; gradients for it are valid but rarely wanted.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(Op::Leaf, Mat::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Mat {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.id].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).scalar_value()
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(Var, Var), TapeError> {
        self.check(a)?;
        self.check(b)?;
        if a.shape() != b.shape() {
            return Err(TapeError::ShapeMismatch { op: op_name, lhs: a.shape(), rhs: b.shape() });
        }
        Ok((a, b))
    }

    /// w*x + b, with b (m x 1) broadcast over the columns of x (k x n).
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var, TapeError> {
        self.check(w)?;
        self.check(x)?;
        self.check(b)?;
        if w.cols != x.rows {
            return Err(TapeError::ShapeMismatch { op: "affine", lhs: w.shape(), rhs: x.shape() });
        }
        if b.rows != w.rows || b.cols != 1 {
            return Err(TapeError::ShapeMismatch { op: "affine", lhs: w.shape(), rhs: b.shape() });
        }
        let mut value = self.nodes[w.id].value.matmul(&self.nodes[x.id].value);
        let bias = &self.nodes[b.id].value;
        for r in 0..value.rows() {
            let bv = bias[(r, 0)];
            for c in 0..value.cols() {
                value[(r, c)] += bv;
            }
        }
        Ok(self.push(Op::Affine { w: w.id, x: x.id, b: b.id }, value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.check(a)?;
        self.check(b)?;
        if a.cols != b.rows {
            return Err(TapeError::ShapeMismatch { op: "matmul", lhs: a.shape(), rhs: b.shape() });
        }
        let value = self.nodes[a.id].value.matmul(&self.nodes[b.id].value);
        Ok(self.push(Op::Matmul { a: a.id, b: b.id }, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (a, b) = self.binary_same_shape("add", a, b)?;
        let value = self.nodes[a.id].value.add(&self.nodes[b.id].value);
        Ok(self.push(Op::Add { a: a.id, b: b.id }, value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (a, b) = self.binary_same_shape("sub", a, b)?;
        let value = self.nodes[a.id].value.sub(&self.nodes[b.id].value);
        Ok(self.push(Op::Sub { a: a.id, b: b.id }, value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (a, b) = self.binary_same_shape("mul", a, b)?;
        let value = self.nodes[a.id].value.zip(&self.nodes[b.id].value, |x, y| x * y);
        Ok(self.push(Op::Mul { a: a.id, b: b.id }, value))
    }

    pub fn max(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (a, b) = self.binary_same_shape("max", a, b)?;
        let value = self.nodes[a.id].value.zip(&self.nodes[b.id].value, f64::max);
        Ok(self.push(Op::Max { a: a.id, b: b.id }, value))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (a, b) = self.binary_same_shape("min", a, b)?;
        let value = self.nodes[a.id].value.zip(&self.nodes[b.id].value, f64::min);
        Ok(self.push(Op::Min { a: a.id, b: b.id }, value))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TapeError> {
        self.check(a)?;
        let value = self.nodes[a.id].value.scale(c);
        Ok(self.push(Op::Scale { a: a.id, c }, value))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TapeError> {
        self.check(a)?;
        let value = self.nodes[a.id].value.map(|v| v + c);
        Ok(self.push(Op::AddScalar { a: a.id }, value))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, TapeError> {
        self.check(a)?;
        let value = self.nodes[a.id].value.map(|v| -v);
        Ok(self.push(Op::Neg { a: a.id }, value))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TapeError> {
        self.check(a)?;
        let value = self.nodes[a.id].value.map(|v| v.max(0.0));
        Ok(self.push(Op::Relu { a: a.id }, value))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, TapeError> {
        self.check(a)?;
        let value = self.nodes[a.id].value.map(f64::abs);
        Ok(self.push(Op::Abs { a: a.id }, value))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TapeError> {
        self.check(a)?;
        let value = self.nodes[a.id].value.map(f64::tanh);
        Ok(self.push(Op::Tanh { a: a.id }, value))
    }

    /// Elementwise max(v, 0).
    pub fn pos_part(&mut self, a: Var) -> Result<Var, TapeError> {
        self.check(a)?;
        let value = self.nodes[a.id].value.map(|v| v.max(0.0));
        Ok(self.push(Op::PosPart { a: a.id }, value))
    }

    /// Elementwise min(v, 0).
    pub fn neg_part(&mut self, a: Var) -> Result<Var, TapeError> {
        self.check(a)?;
        let value = self.nodes[a.id].value.map(|v| v.min(0.0));
        Ok(self.push(Op::NegPart { a: a.id }, value))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TapeError> {
        self.check(a)?;
        let value = Mat::scalar(self.nodes[a.id].value.sum());
        Ok(self.push(Op::Sum { a: a.id }, value))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TapeError> {
        self.check(a)?;
        let m = &self.nodes[a.id].value;
        let value = Mat::scalar(m.sum() / m.len() as f64);
        Ok(self.push(Op::Mean { a: a.id }, value))
    }

    /// Stop-gradient: forward value is the same object, backward contributes nothing.
    pub fn detach(&mut self, a: Var) -> Result<Var, TapeError> {
        self.check(a)?;
        let value = self.nodes[a.id].value.clone();
        Ok(self.push(Op::Detach, value))
    }

    /// d(output)/d(wrt) for a scalar output, as one matrix per requested leaf.
    /// Variables that do not influence the output get zero gradients.
    pub fn gradient(&self, output: Var, wrt: &[Var]) -> Result<Vec<Mat>, TapeError> {
        self.check(output)?;
        for v in wrt {
            self.check(*v)?;
        }
        if !output.is_scalar() {
            return Err(TapeError::NonScalarOutput { shape: output.shape() });
        }

        let mut adjoint: Vec<Option<Mat>> = (0..=output.id).map(|_| None).collect();
        adjoint[output.id] = Some(Mat::scalar(1.0));

        for id in (0..=output.id).rev() {
            let Some(g) = adjoint[id].take() else { continue };
            // Re-insert taken adjoint when this node is itself a requested leaf.
            let keep = matches!(self.nodes[id].op, Op::Leaf);
            match &self.nodes[id].op {
                Op::Leaf | Op::Detach => {}
                Op::Affine { w, x, b } => {
                    let xv = &self.nodes[*x].value;
                    let wv = &self.nodes[*w].value;
                    {
                        let gw = Self::slot(&mut adjoint, *w, wv.shape());
                        gw.add_assign_outer(&g, xv);
                    }
                    {
                        let gx = Self::slot(&mut adjoint, *x, xv.shape());
                        gx.add_assign(&wv.transpose().matmul(&g));
                    }
                    {
                        let gb = Self::slot(&mut adjoint, *b, (wv.rows(), 1));
                        for r in 0..g.rows() {
                            let mut acc = 0.0;
                            for c in 0..g.cols() {
                                acc += g[(r, c)];
                            }
                            gb[(r, 0)] += acc;
                        }
                    }
                }
                Op::Matmul { a, b } => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    {
                        let ga = Self::slot(&mut adjoint, *a, av.shape());
                        ga.add_assign_outer(&g, bv);
                    }
                    {
                        let gb = Self::slot(&mut adjoint, *b, bv.shape());
                        gb.add_assign(&av.transpose().matmul(&g));
                    }
                }
                Op::Add { a, b } => {
                    Self::slot(&mut adjoint, *a, g.shape()).add_assign(&g);
                    Self::slot(&mut adjoint, *b, g.shape()).add_assign(&g);
                }
                Op::Sub { a, b } => {
                    Self::slot(&mut adjoint, *a, g.shape()).add_assign(&g);
                    Self::slot(&mut adjoint, *b, g.shape()).add_assign(&g.scale(-1.0));
                }
                Op::Mul { a, b } => {
                    let av = self.nodes[*a].value.clone();
                    let bv = self.nodes[*b].value.clone();
                    Self::slot(&mut adjoint, *a, g.shape()).add_assign(&g.zip(&bv, |x, y| x * y));
                    Self::slot(&mut adjoint, *b, g.shape()).add_assign(&g.zip(&av, |x, y| x * y));
                }
                Op::Max { a, b } | Op::Min { a, b } => {
                    let take_a = {
                        let av = &self.nodes[*a].value;
                        let bv = &self.nodes[*b].value;
                        let is_max = matches!(self.nodes[id].op, Op::Max { .. });
                        av.zip(bv, |x, y| {
                            if x == y {
                                0.5
                            } else if (x > y) == is_max {
                                1.0
                            } else {
                                0.0
                            }
                        })
                    };
                    Self::slot(&mut adjoint, *a, g.shape())
                        .add_assign(&g.zip(&take_a, |gv, t| gv * t));
                    Self::slot(&mut adjoint, *b, g.shape())
                        .add_assign(&g.zip(&take_a, |gv, t| gv * (1.0 - t)));
                }
                Op::Scale { a, c } => {
                    Self::slot(&mut adjoint, *a, g.shape()).add_assign(&g.scale(*c));
                }
                Op::AddScalar { a } => {
                    Self::slot(&mut adjoint, *a, g.shape()).add_assign(&g);
                }
                Op::Neg { a } => {
                    Self::slot(&mut adjoint, *a, g.shape()).add_assign(&g.scale(-1.0));
                }
                Op::Relu { a } | Op::PosPart { a } => {
                    let mask = self.nodes[*a].value.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    Self::slot(&mut adjoint, *a, g.shape()).add_assign(&g.zip(&mask, |gv, m| gv * m));
                }
                Op::NegPart { a } => {
                    let mask = self.nodes[*a].value.map(|v| if v < 0.0 { 1.0 } else { 0.0 });
                    Self::slot(&mut adjoint, *a, g.shape()).add_assign(&g.zip(&mask, |gv, m| gv * m));
                }
                Op::Abs { a } => {
                    let sign = self.nodes[*a].value.map(|v| {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    Self::slot(&mut adjoint, *a, g.shape()).add_assign(&g.zip(&sign, |gv, s| gv * s));
                }
                Op::Tanh { a } => {
                    let deriv = self.nodes[id].value.map(|t| 1.0 - t * t);
                    Self::slot(&mut adjoint, *a, g.shape())
                        .add_assign(&g.zip(&deriv, |gv, d| gv * d));
                }
                Op::Sum { a } => {
                    let gv = g.scalar_value();
                    let shape = self.nodes[*a].value.shape();
                    Self::slot(&mut adjoint, *a, shape).add_assign(&Mat::filled(shape.0, shape.1, gv));
                }
                Op::Mean { a } => {
                    let shape = self.nodes[*a].value.shape();
                    let gv = g.scalar_value() / (shape.0 * shape.1) as f64;
                    Self::slot(&mut adjoint, *a, shape).add_assign(&Mat::filled(shape.0, shape.1, gv));
                }
            }
            if keep {
                adjoint[id] = Some(g);
            }
        }

        Ok(wrt
            .iter()
            .map(|v| match &adjoint[v.id] {
                Some(m) => m.clone(),
                None => Mat::zeros(v.rows, v.cols),
            })
            .collect())
    }

    fn slot(adjoint: &mut [Option<Mat>], id: usize, shape: (usize, usize)) -> &mut Mat {
        adjoint[id].get_or_insert_with(|| Mat::zeros(shape.0, shape.1))
    }
}
