//! Label-free concept bottleneck models: concept filtering, a cos-cubed
//! trained projection into concept space, a sparse elastic-net head,
//! explanations and final-layer editing.

pub mod adam;
pub mod cbl;
pub mod concepts;
pub mod edit;
pub mod explain;
pub mod fixtures;
pub mod head;
pub mod manifest;
pub mod npy;
pub mod oracle;
pub mod pipeline;
pub mod session;
pub mod synth;
pub mod tensor;

pub use cbl::{cbl_loss, cbl_loss_grad, cos_cubed, train_cbl, CblError, CblModel, CblTrainConfig, TrainReport};
pub use concepts::{
    run_filter_pipeline, ConceptSet, ConceptStatus, FilterConfig, FilterError, FilterId, FilterReport, RemovalReason,
};
pub use edit::{
    compute_delta_w, evaluate_impact, intervene, EditError, EditRecord, EditRequest, EditSession, EditStatus,
    ErrorTag, ErrorType, ImpactReport,
};
pub use explain::{contributions, export_weight_graph, top_explanations, Contribution, ExplanationView, WeightGraph};
pub use head::{fit_head, fit_path, FitOptions, HeadError, PathConfig, PathReport, SparseHead};
pub use manifest::{load_bundle, write_bundle, BundleError, DatasetBundle, EmbeddingSpace, Manifest};
pub use npy::{read_labels, read_tensor, write_labels, write_tensor, NpyError};
pub use pipeline::{run_pipeline, LoadedModel, ModelInfo, PipelineConfig, PipelineError, PipelineReport};
pub use synth::{generate_planted, SynthConfig, SyntheticBundle};
pub use tensor::Tensor;
pub use session::{SessionError, SessionState, Split};
