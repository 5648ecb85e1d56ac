mod checkpoint;
mod interventions;
mod model;
mod registry;
mod spec;

pub use checkpoint::{Checkpoint, GoldenVector, TrainingMeta, MAGIC, VERSION};
pub use interventions::{perturb_filters, prune_filters, randomize_stages};
pub use model::{argmax, BnMode, ForwardOutput, Model, Param, ParamKind, Prediction, BN_EPS, BN_MOMENTUM};
pub use registry::{Companions, ConvLayerInfo, FilterGroup, FilterRegistry, ParamElem};
pub use spec::{Architecture, ModelSpec};
