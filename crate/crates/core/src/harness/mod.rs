//! Experiment driver: configuration, the six pipeline commands, artifact layout, the
//! manifest, and SVG/table reporting.

mod commands;
mod config;
mod manifest;
mod report;

pub use commands::{Context, Layout, RunSummary};
pub use config::{ConceptOverride, ConceptsSection, DiffusionSection, EvalSection, RunConfig};
pub use manifest::{scan_artifacts, ArtifactEntry, ExperimentManifest, MANIFEST_FILE};
pub use report::{
    comparison_csv, comparison_markdown, scatter_svg, sort_rows, ComparisonRow, COMPARISON_HEADER,
    MAX_POINTS,
};
