//! Segmented decoder-transformer execution with a differentiable carried KV
//! tail, forward-only top-k retrieval over a KV pool, and exact truncated
//! backpropagation through the segment chain.

pub mod attention;
pub mod carry;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod error;
pub mod executor;
pub mod experiment;
pub mod model;
pub mod pool;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use carry::CarriedState;
pub use config::{ModelConfig, RetrievalConfig};
pub use error::{Error, Result};
pub use executor::{generate, run_chain, run_inference, segment_sample, ChainTrace, Segment, SegmentChain};
pub use model::{forward_segment, Mode, ModelParams, SegmentRun};
pub use pool::{KvPool, RetrievedPrefix};
pub use tensor::{Tape, Tensor};
