pub mod cluster;
pub mod context;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod item_encoder;
pub mod model;
pub mod recommender;
pub mod responder;
pub mod tensor;
pub mod text;
pub mod trainer;
pub mod transformer;

pub use context::{ContextOptions, Dialog, ItePlacement, Mention, Speaker, Turn};
pub use corpus::{Split, SplitMode, SyntheticSpec};
pub use error::{Error, Result};
pub use evaluator::{AblationReport, ClusterReport, EvalOptions, EvalReport};
pub use item_encoder::{EncoderInstance, Field, FieldSet, ItemId, ItemMetadata};
pub use model::{Catalog, ItemCache, Model, ModelConfig};
pub use recommender::{ApproxOptions, NNIndex, Recommendation, SearchMode};
pub use responder::{Decoding, GenerationConfig, JointLossWeights, Response};
pub use text::Vocab;
pub use trainer::{StepLog, TrainConfig, Trainer};
pub use transformer::TransformerConfig;
