//! Line-level text recognition with CTC and manifold mixup.

pub mod autodiff;
pub mod ctc;
pub mod data;
pub mod gradcheck;
pub mod metrics;
pub mod mixup;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use ctc::{LabelSequence, ProbSequence, Vocabulary};
pub use data::{Batch, LineImage, PreparedLine};
pub use metrics::EvalReport;
pub use mixup::{MixPlan, MixupConfig};
pub use model::{Network, NetworkConfig};
pub use tensor::{Tensor, TensorError};
pub use trainer::{TrainConfig, TrainError};
