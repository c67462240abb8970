//! Post-hoc concept explanations for frozen image classifiers.
//!
//! A learned orthogonal rotation of the backbone's feature channels makes
//! each channel respond to one concept, while a bank of text-embedding
//! perturbations drives a frozen generator to synthesize that concept.
//! Explanations attribute a prediction to channels and show sampled
//! prototypes with heatmaps and bounding boxes. The rotation is folded into
//! the classifier head, so predictions are unchanged.
//!
//! All numerics run in `f64` with hand-written vector-Jacobian products.
//! The [`backends::toy`] world provides small differentiable stand-ins for
//! the backbone, text encoder, generator and perceptual metric.

pub mod backends;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod explainer;
pub mod feature;
pub mod linalg;
pub mod objectives;
pub mod optim;
pub mod orthobasis;
pub mod par;
pub mod promptbank;
pub mod seed;
pub mod trainer;

pub use backends::{build_backends, BackendKinds, Backends, EncoderDims, Image, TextEmbedding};
pub use error::{ProdgError, Result};
pub use explainer::{attribute, concept_heatmap, explain, extract_bbox, BoundingBox, Connectivity, ExplainOptions};
pub use feature::FeatureMap;
pub use objectives::LossConfig;
pub use orthobasis::{fuse_head, purity, FusedHead, OrthogonalBasis};
pub use promptbank::{discover_anchors, BankConfig, LogvarMode, PromptBank};
pub use trainer::{train, resume, TrainConfig, TrainState};
