//! Joint pre-training of a relational graph attention module and a
//! decomposed transformer language module over a shared entity memory,
//! with synthetic world generation and adaptation harnesses.

pub mod adapt;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod km;
pub mod lm;
pub mod memory;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
