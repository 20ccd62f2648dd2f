//! Feed-forward classifiers with Bernoulli dropout, trained by SGD.

mod checkpoint;
mod config;
mod dropout;
mod grid;
mod network;
mod train;

pub use checkpoint::{Checkpoint, TrainerState, CHECKPOINT_FORMAT_VERSION};
pub use config::{Activation, LayerSpec, NetworkConfig, DEFAULT_L2_LAMBDA};
pub use dropout::{DropoutLayer, Mask};
pub use grid::{cross_validate, grid_search_dropout, kfold_indices, GridSearchResult};
pub use network::{
    argmax, softmax, Batch, DenseLayer, ForwardMode, GradientTape, Gradients, LayerGradient,
    MaskSource, Network,
};
pub use train::{train, train_on, EpochRecord, SgdMomentum, TrainConfig, Trained, Trainer};
