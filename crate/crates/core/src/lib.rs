pub mod cli;
pub mod config;
pub mod criteria;
pub mod extinction;
pub mod fixedpoints;
pub mod linalg;
pub mod model;
pub mod moments;
pub mod montecarlo;
pub mod output;
