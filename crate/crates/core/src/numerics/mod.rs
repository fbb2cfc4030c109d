//! Dense-array numerics: matrices, MLP scoring networks with analytic
//! gradients, binary cross-entropy, Adam and finite-difference checking.

pub mod gradcheck;
pub mod loss;
pub mod matrix;
pub mod network;
pub mod optim;

pub use gradcheck::{grad_check, GradCheck};
pub use loss::{bce_loss, LossOutput, BCE_EPSILON};
pub use matrix::DenseMatrix;
pub use network::{sigmoid, Activation, ForwardCache, Gradients, Layer, LayerGradient, ScoringNetwork};
pub use optim::{backward_and_step, OptimizerState};
