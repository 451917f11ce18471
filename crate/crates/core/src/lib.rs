pub mod checkpoint;
pub mod colorspace;
pub mod dataset;
pub mod eval;
pub mod flow;
pub mod latent;
pub mod payload;
pub mod pipeline;
pub mod training;
