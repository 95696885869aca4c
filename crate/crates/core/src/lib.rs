pub mod image;
pub mod lie;
pub mod rng;
pub mod scene;
pub mod splat;
pub mod blur;
pub mod priors;
pub mod explore;
pub mod metrics;
pub mod par;
pub mod train;
pub mod harness;
