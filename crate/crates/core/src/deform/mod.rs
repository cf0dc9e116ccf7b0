//! Time-conditioned deformation prediction.

pub mod encoding;
pub mod field;
pub mod knn;
pub mod mlp;
pub mod noise;

pub use encoding::positional_encoding;
pub use field::{
    coarse_deform, compose_deformation, DeformField, DeformationOffsets, FieldConfig, FieldGrads,
    OffsetTape,
};
pub use knn::{knn_all, knn_dynamic, KdTree};
pub use mlp::Mlp;
pub use noise::NoiseSchedule;
