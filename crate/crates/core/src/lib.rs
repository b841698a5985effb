pub mod autodiff;
pub mod classify;
pub mod cli;
pub mod inference;
pub mod metrics;
pub mod nets;
pub mod phantom;
pub mod pose;
pub mod training;
pub mod volio;
