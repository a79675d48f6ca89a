//! Shadow-art synthesis: learn a 3D occupancy field whose directional-light shadows
//! match a set of binary target images, jointly refining light directions and screen
//! orientations, then extract a printable triangle mesh.

pub mod error;
pub mod field;
pub mod geometry;
pub mod imageio;
pub mod losses;
pub mod reconstruct;
pub mod registration;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
pub use field::{Checkpoint, FieldConfig, OccupancyField};
pub use geometry::{Frustum, ProjectionConstraint, Vec3};
pub use imageio::{BinaryImage, TargetImage};
pub use losses::{LossBreakdown, LossWeights};
pub use reconstruct::{ExtractedMesh, MeshMetrics, ScalarGrid};
pub use registration::{IcpConfig, RigidTransform2D};
pub use trainer::{train, TrainConfig, TrainReport, Trained};
