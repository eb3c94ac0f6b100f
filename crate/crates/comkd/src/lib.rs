//! Two-stage knowledge distillation for contrastive dual-encoder
//! classifiers, built on a small reverse-mode autodiff core.
//!
//! A frozen teacher (image encoder + learnable prompt + class-text embedding
//! table) is pretrained with cross-entropy on labeled data; a lighter
//! student then distills from it on unlabeled data through three coupled
//! signals:
//!
//! * feature-statistics alignment ([`ifalign`]) — L1 matching of
//!   per-dimension batch mean and variance between projected student
//!   features and teacher features;
//! * gated cross-attention fusion ([`eduattn`]) — scaled dot-product
//!   attention from student image features onto the teacher's class-text
//!   features, blended in by a learnable scalar gate that starts at 0;
//! * temperature-scaled KL refinement of the class logits ([`losses`]).
//!
//! Everything runs on the [`tensor`] engine, so every loss is checked by
//! finite differences ([`gradcheck`]) and the whole pipeline is
//! bit-deterministic per seed. See the crate examples for runnable
//! walkthroughs of each capability, or the `comkd` binary for the CLI.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eduattn;
pub mod encoders;
pub mod evaluator;
pub mod gradcheck;
pub mod ifalign;
pub mod losses;
pub mod tensor;
pub mod trainer;

mod error;

pub use config::{AlignKind, KdKind, TrainConfig};
pub use data::{Dataset, GeneratorSpec};
pub use error::{Error, Result};
pub use evaluator::{Metrics, SplitSpec};
pub use tensor::{Tape, Tensor, VarId};
pub use trainer::{RunLog, StudentModel, TeacherModel};
