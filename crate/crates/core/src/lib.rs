//! Row-balanced dual-ratio sparse LSTM: fixed-point datapath, sparse storage,
//! pruning search, training and a cycle-level accelerator model.

pub mod accel;
pub mod error;
pub mod lstm;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod pruning;
pub mod sparse;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use lstm::{FixedParams, Gate, LstmDims, LstmParams, LstmState};
pub use memory::{ImageContents, MemoryImage, MemorySizes, WeightSet};
pub use model::{Model, Storage};
pub use numerics::{ActivationTables, Fixed, FixedSpec, PwlSettings, PwlTable};
pub use sparse::RowBalancedMatrix;
pub use tensor::{Mask, Matrix};
pub use pruning::{DualMasks, PruneResult, SparsityConfig};
pub use accel::{AccelConfig, Accelerator, CycleReport};
