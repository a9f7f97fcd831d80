//! Cosine-loss classification on small datasets: a tape-based autodiff
//! engine, losses, hierarchy-derived class embeddings, an MLP backbone, the
//! warm-restart SGD schedule, synthetic data and a seeded experiment harness.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod embeddings;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod hierarchy;
pub mod losses;
pub mod model;
pub mod optim;
pub mod stats;
pub mod tape;
pub mod tensor;

pub use data::{make_blobs, BlobSpec, Dataset, Split, Standardizer};
pub use embeddings::{verify_embeddings, EmbeddingKind, EmbeddingMatrix, EmbeddingReport};
pub use error::{Error, Result};
pub use hierarchy::{ClassHierarchy, SimilarityMatrix};
pub use losses::{AuxHead, LossKind, LossSpec};
pub use model::{MlpConfig, ModelState};
pub use optim::{clip_gradients, sgd_step, ClipSpec, ScheduleProfile, SgdrSchedule};
pub use stats::{welch_t_test, Alternative, WelchResult};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
