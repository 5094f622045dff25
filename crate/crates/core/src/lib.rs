pub mod acwe;
pub mod autodiff;
pub mod error;
pub mod gradsuite;
pub mod infer;
pub mod losses;
pub mod metrics;
pub mod morphology;
pub mod network;
pub mod train;
pub mod volume;
