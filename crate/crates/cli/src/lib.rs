pub mod checkpoint;
pub mod config;
pub mod error;
pub mod idx;
pub mod pipeline;
pub mod report;
