//! Numerical substrate: dense arrays, a small velocity network with exact
//! analytic gradients, a finite-difference gradient oracle, the Adam
//! optimizer, and checkpoint serialization.

mod adam;
mod array;
mod checkpoint;
mod net;

pub use adam::AdamState;
pub use array::DenseArray;
pub(crate) use array::std_all;
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use net::{finite_diff_grad, time_features, NetGradients, VelocityNet, TIME_FEATURE_DIM};
