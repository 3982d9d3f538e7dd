pub mod checkpoint;
pub mod dataio;
pub mod effects;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod numerics;
pub mod omics;
pub mod pipeline;
pub mod survival;
