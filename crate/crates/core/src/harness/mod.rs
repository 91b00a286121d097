//! Preprocessing, datasets, cross-validation, metrics and ablations.

pub mod ablation;
pub mod cv;
pub mod dataset;
pub mod folds;
pub mod metrics;
pub mod preprocess;
pub mod synth;

pub use dataset::{dataset_stats, load_dataset, parse_csv, parse_jsonl, Dataset, DatasetFormat, DatasetStats, Example};
pub use folds::{stratified_kfold, FoldPlan};
pub use metrics::{mean_metrics, MeanMetrics, Metrics};
pub use preprocess::{preprocess, PreprocessRules, Preprocessor};
pub use synth::{generate_synthetic, SynthSpec, SyntheticData};
pub use ablation::{run_ablation, variant_config, AblationRow, AblationTable, VARIANTS};
pub use cv::{leakage_guard, run_cv, CvReport, FoldResult};
