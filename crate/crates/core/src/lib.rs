#![allow(clippy::needless_range_loop, clippy::should_implement_trait)]

pub mod ingest;
pub mod numerics;
pub mod schema;
pub mod encoder;
pub mod checks;
pub mod cli;
pub mod crf;
pub mod metrics;
pub mod story;
pub mod trainer;
