pub mod geometry;
pub mod geotools;
pub mod kg;
pub mod ingest;
pub mod gateway;
pub mod instruct;
pub mod agent;
pub mod postprocess;
pub mod eval;
pub mod config;
pub mod pipeline;
