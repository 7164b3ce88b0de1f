pub mod dataset;
pub mod eval;
pub mod gridtool;
pub mod infer;
pub mod synth;
pub mod train;
