pub mod workload;
pub mod bucket;
pub mod predictor;
pub mod pool;
pub mod racm;
pub mod engine;
pub mod metrics;
