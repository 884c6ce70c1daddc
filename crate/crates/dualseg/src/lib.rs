//! Dual-student semi-supervised segmentation on synthetic volumes.
//!
//! Two structurally different students and an EMA teacher train on
//! copy-paste-mixed labeled/unlabeled volumes; voxels where the students
//! disagree get extra correction losses (masked MSE toward the mixed label,
//! masked KL toward uniform on disagreed-and-wrong voxels).
//!
//! The math core is generic over the scalar type; `*64` aliases pin the
//! default f64 instantiation used by the trainer and CLI.

pub mod losses;
pub mod maskops;
pub mod metrics;
pub mod mixing;
pub mod nets;
pub mod oracle;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use scalar::Scalar;

/// Default f64 instantiations.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = tensor::Tape<f64>;
pub type SegNet64 = nets::SegNet<f64>;
pub type TeacherNet64 = nets::TeacherNet<f64>;
pub type Volume64 = synthdata::Volume<f64>;
pub type VolumeRecord64 = synthdata::VolumeRecord<f64>;
