pub mod error;
pub mod io;
pub mod netgraph;
pub mod planner;
pub mod similarity;
pub mod stitcher;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
pub use netgraph::{Network, NetworkSpec, Signature, StitchableUnit, WeightStore};
pub use planner::{Budget, Direction, Metric, StitchPlan};
pub use similarity::SimilarityMatrix;
pub use stitcher::{AdapterSpec, StitchedModel};
pub use tape::ActivationTape;
pub use tensor::{DType, Graph, Tensor, Var};
pub use trainer::{Dataset, Scope, TrainConfig};
