//! Chest X-ray classification pipeline: image preprocessing, a small
//! differentiable CNN, snapshot-ensemble training, spectral model selection,
//! ensembling, saliency maps and evaluation metrics.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ensemble;
pub mod explain;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod preprocess;
pub mod selection;
pub mod synth;
pub mod tensor;
pub mod training;

pub use ensemble::{EnsembleMethod, PosteriorMatrix, Prediction};
pub use explain::{Method, RelevanceMap, SaliencyMap};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use nn::{LayerSpec, Mode, NetError, Network};
pub use preprocess::{GrayImage, PreprocessConfig, Regime};
pub use selection::SpectralStats;
pub use tensor::{Shape3, Tensor4};
pub use training::{ScheduleConfig, Snapshot, TrainConfig};
