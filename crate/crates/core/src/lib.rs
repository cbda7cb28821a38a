pub mod dataset;
pub mod encoding;
pub mod evaluation;
pub mod explainer;
pub mod fusion;
pub mod human_eval;
pub mod interpret;
pub mod jsonl;
pub mod model;
pub mod pipeline;
pub mod synthetic;
pub mod training;
