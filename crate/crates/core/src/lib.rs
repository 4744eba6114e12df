//! SMAP/CARD lab: a semantic-aware prefix tokenizer and a hybrid causal
//! autoregressive + flow-matching generator, trained and evaluated on
//! synthetic shape data through a deterministic f64 autodiff core.

pub mod card;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod gradsuite;
pub mod io;
pub mod nn;
pub mod optim;
pub mod regu;
pub mod tensor;
pub mod tokenizer;
pub mod train;
