pub mod eval;
pub mod features;
pub mod infer;
pub mod report;
pub mod sweep;
pub mod train;
