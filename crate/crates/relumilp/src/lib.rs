//! Training ReLU surrogate networks that stay tractable as mixed-integer programs.
//!
//! The crate covers the full loop: train a feedforward ReLU network with
//! tractability regularizers (bound width, neuron stability, LP relaxation
//! gap), embed the trained network in a big-M MILP, and solve it with a
//! built-in branch-and-bound engine that reports how tractable the encoding
//! actually was.

pub mod autodiff;
pub mod data;
pub mod gradcheck;
pub mod ibp;
pub mod lp;
pub mod mat;
pub mod milp;
pub mod net;
pub mod reg;
pub mod simplex;
pub mod train;
