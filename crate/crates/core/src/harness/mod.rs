//! Command-line orchestration: one run directory per experiment.
//!
//! ```text
//! <run>/config.resolved   <run>/config.hash
//! <run>/data/{train,test}/manifest.json
//! <run>/checkpoints/{codec,diffusion}.ckpt
//! <run>/codec_logs.jsonl  <run>/logs.jsonl
//! <run>/samples/<id>.{bin,png}
//! <run>/metrics.json      <run>/attn_bench.json
//! <run>/viz/<id>.png
//! ```

pub mod commands;
pub mod config;

pub use commands::{run, Command, EvalSummary, Invocation, RunDir};
pub use config::RunConfig;
