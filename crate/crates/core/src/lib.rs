pub mod cli;
pub mod corpus;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod relgraph;
pub mod synth;
pub mod train;
pub mod viewgen;
