//! Loss-trajectory correlation (LTC) for coreset selection and training
//! data attribution, with a toy trainer, evaluation metrics and an
//! analytic cost model.

pub mod coreset;
pub mod cost;
pub mod data;
pub mod eval;
pub mod kv;
pub mod ltc;
pub mod ltcm;
pub mod pipeline;
pub mod stats;
pub mod trainer;
pub mod trajectory;
pub mod util;

pub use coreset::{CoresetManifest, SelectionPolicy};
pub use data::LabeledDataset;
pub use ltc::{ltc_avg, ltc_matrix, ltc_pair, LtcMatrix};
pub use trainer::{ModelKind, TrainConfig};
pub use trajectory::{compute_deltas, read_dataset, write_dataset, DeltaMatrix, TrajectoryDataset};
