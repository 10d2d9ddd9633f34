//! Local-learning training library built around distance-forward goodness
//! objectives: networks are trained unit-by-unit from per-layer losses on
//! positive/negative sample pairs, with optional overlapping gradient
//! windows or random direct feedback in place of a full backward pass.

pub mod alloc;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod profile;
pub mod rng;
pub mod samples;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use config::RunConfig;
pub use data::{load, standardize, Dataset, DatasetKind, Normalizer, PreparedData};
pub use error::{Error, Result};
pub use layers::{Delta, Dense};
pub use loss::{goodness, goodness_separation, LossKind, NegMode};
pub use model::{parse_arch, segment_units, uniform_mlp, LayerSpec, Model, Network, Unit};
pub use samples::{make_batch, sample_negative_labels, EmbedMode, LabelEmbedding, SampleBatch};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::{build_network, FitResult, Strategy, TrainConfig, Trainer};
