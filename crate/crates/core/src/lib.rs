pub mod autodiff;
pub mod makd;
pub mod env;
pub mod harness;
pub mod icod;
pub mod metrics;
pub mod model;
pub mod weighting;
pub mod seed;
