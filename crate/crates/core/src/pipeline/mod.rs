//! Dataset handling, split inference over a modelled link, experiment grids
//! with CSV results, and bit-rate / TV map rendering.

mod data;
mod grid;
mod inference;
mod maps;
mod synth;

pub use data::{load_dataset, split_files, Dataset, Split, CIFAR_SHAPE, RECORD_LEN};
pub use grid::{
    append_results, defense_descriptor, perturbation_descriptor, read_results, run_grid, ExperimentConfig, GridSpec,
    Resources, ResultRow, CSV_HEADER,
};
pub use inference::{
    evaluate_pipeline, prepare_batch, run_split_inference, EvalOptions, InferenceResult, Link, SplitInference,
};
pub use maps::{
    bitrate_maps, comparison_map, pearson, render_maps, tv_bitrate_correlations, tv_map, MapImage, MapOptions,
    MapSummary, RenderMode,
};
pub use synth::{generate, write_synthetic, SynthConfig, CLASS_NAMES};
