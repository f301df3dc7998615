//! Tensor arithmetic with reverse-mode differentiation, layers, SGD,
//! gradient checking and the checkpoint container.

pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod parallel;
pub mod tape;

pub use conv::ConvGeom;
pub use gradcheck::{gradcheck, gradcheck_skip_kinks, GradcheckReport};
pub use layers::{absorb_grads, seeded, ConvLayer, Parameter, Rng64};
pub use optim::Sgd;
pub use tape::{Gradients, Tape, Var};
