//! Command-line workbench around the multi-model defense engine: config
//! files, named presets, and the train/attack/defend/eval pipeline.

pub mod config;
pub mod pipeline;
pub mod presets;
