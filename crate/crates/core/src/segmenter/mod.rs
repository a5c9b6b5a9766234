//! A small multi-layer few-shot segmentation pipeline: per-layer attention
//! over support tokens, coarse masks, top-down refinement, loss, metric and
//! a toy trainer.

mod episode;
mod loss;
mod metric;
mod pipeline;
mod refiner;
mod train;

pub use episode::{
    area_fraction, downsample_mask, grid_side, Episode, FeatureProvider, LayerStack, SupportItem,
};
pub use loss::bce_loss;
pub use metric::{miou, PredictionMask};
pub use pipeline::{
    coarse_mask, dataset_loss, flat_gradient, forward_episode, loss_and_gradient, select_supports,
    EpisodeOutput, PipelineConfig, Pooling, SegModel,
};
pub use refiner::{ConvLayer, RefinerWeights, DEFAULT_HIDDEN};
pub use train::{train_toy, SgdConfig, TrainConfig, TrainOutcome};
