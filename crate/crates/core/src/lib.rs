//! Self-supervised coincidence learning, entropy clustering and
//! cluster-based active learning on synthetic two-modality data.

// Negated comparisons double as NaN rejection.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod active;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod hashing;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use active::{ClusterAssignment, ClusterSelection, LabelQuality, PropagatedLabelSet, Provenance};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use losses::{CurriculumWeights, LabeledBatch, Modality, NegativeMode, PairBatch};
pub use metrics::{EvalReport, QbeConfig};
pub use models::{EncoderConfig, ModelConfig, ModelParams, ParamGroup};
pub use optim::Adam;
pub use synth::{generate_world, split, Split, SplitPart, SynthWorld, WorldConfig};
pub use tensor::Tensor;
pub use trainer::{Checkpoint, CurriculumConfig, HistoryRow, Session, StageConfig, StageLoss, TrainingData};
