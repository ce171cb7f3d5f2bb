//! Benchmark library for robot-arm action recognition from keypoint time
//! series under input noise.

pub mod config;
pub mod dataset;
pub mod harness;
pub mod models;
pub mod noise;
pub mod report;
pub mod seed;
pub mod tensor;
