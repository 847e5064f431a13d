//! File format, configuration, reports and the pipeline driver.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod vvf;

pub use config::PipelineConfig;
pub use pipeline::{run_in_memory, run_pipeline, AtlasInput, PipelineInputs, PipelineOutcome};
pub use report::{metric_report_text, objective_report_text, sig6};
pub use vvf::{read_volume, write_volume, Volume, VolumeKind};
