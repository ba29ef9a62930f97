//! Architecture presets, unit-level block partitioning and the base and
//! decoupled models built from them.

mod model;
mod partition;
mod spec;

pub use model::{attach_aux, param_snapshot, Block, DecoupledModel, Head, Network, Unit};
pub use partition::{partition, BlockPartition};
pub use spec::{build_preset, ArchitectureSpec, FeatureShape, StemSpec, UnitSpec, PRESETS};
