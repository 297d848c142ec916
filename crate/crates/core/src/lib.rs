//! Virtual adversarial training on the attention scores of a bidirectional
//! LSTM text classifier, plus the word-level and supervised baselines it is
//! compared against and the metrics used to evaluate them.

pub mod advtrain;
pub mod autodiff;
pub mod checkpoint;
pub mod eval;
pub mod model;
pub mod rng;
pub mod synth;
pub mod textdata;
