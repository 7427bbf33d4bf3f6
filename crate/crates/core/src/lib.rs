pub mod cli;
pub mod config;
pub mod corpus;
pub mod embed;
pub mod episode;
pub mod eval;
pub mod index;
pub mod llm;
pub mod reasoner;
pub mod refine;
pub mod reward;
pub mod synth;
pub mod tracker;
