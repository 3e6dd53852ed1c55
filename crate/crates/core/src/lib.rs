pub mod ckpt;
pub mod classifier;
pub mod data;
pub mod error;
pub mod eval;
pub mod fader;
pub mod linalg;
pub mod logreg;
pub mod nn;
pub mod synth;
