//! Small fully connected networks trained on the autodiff tape.

pub mod adam;
pub mod checkpoint;
pub mod gumbel;
pub mod layers;
pub mod models;
pub mod params;
pub mod train;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use layers::{Dense, Mlp};
pub use models::{
    argmax_rows, sigmoid, EtaNet, OutputTransform, PartitionNet, PartitionSpec, XzNet, XzSpec,
    ZSpec,
};
pub use params::ParamStore;
pub use train::{train, EpochStats, TrainConfig, TrainLog};
