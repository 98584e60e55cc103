//! Data ingestion, synthetic scenes, the training loop with its optimizer
//! schedule, evaluation metrics and prediction output.

mod ablation;
mod config_file;
mod data;
mod loss;
mod metrics;
mod optim;
mod predict;
pub mod raster;
mod schedule;
mod synth;
mod train;

pub use ablation::{ablation_table, run_ablations, variant_label, Ablation, AblationRow};
pub use config_file::RunConfig;
pub use data::{load_dataset, save_dataset, Layout, Sample};
pub use loss::{loss, CLAMP, DICE_SMOOTH};
pub use metrics::Metrics;
pub use optim::{adamw_step, AdamHyper, AdamState};
pub use predict::{overlay, predict, predict_raster, PredictOutput};
pub use schedule::{lr_at, wd_at, LossKind, TrainConfig};
pub use synth::{synth_vessels, NOISE_STD};
pub use train::{evaluate, train, EpochLog, Model, TrainReport};
