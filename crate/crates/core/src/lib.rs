pub mod artifact;
pub mod config;
pub mod corpus;
pub mod linalg;
pub mod nn;
pub mod model;
pub mod rank;
pub mod eval;
pub mod synth;
pub mod trainer;
