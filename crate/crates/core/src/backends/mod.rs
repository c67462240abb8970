//! Frozen model interfaces: backbone + head, text encoder, generator, and a
//! perceptual metric. Differentiable backends expose vector-Jacobian
//! products so losses can be pulled back to the prompt parameters.

pub mod toy;

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, ProdgError, Result};
use crate::feature::FeatureMap;

pub use toy::{
    concept_names, ToyCosineMetric, ToyDecoderGenerator, ToyHashEncoder, ToyPlantedExtractor,
    ToyWorld, ToyWorldConfig,
};

/// Images are channel-major `channels × height × width` arrays.
pub type Image = Array3<f64>;

pub trait FeatureExtractor: Send + Sync {
    fn kind(&self) -> &str;
    fn image_shape(&self) -> (usize, usize, usize);
    /// (C, H, W) of the produced feature maps.
    fn feature_dim(&self) -> (usize, usize, usize);
    fn head_weights(&self) -> ArrayView2<'_, f64>;
    fn head_bias(&self) -> ArrayView1<'_, f64>;
    fn extract(&self, image: &ArrayView3<f64>) -> Result<FeatureMap>;
    /// Pulls `∂f/∂features` back to `∂f/∂image`.
    fn extract_vjp(&self, image: &ArrayView3<f64>, grad_features: &ArrayView3<f64>) -> Result<Array3<f64>>;

    fn num_classes(&self) -> usize {
        self.head_weights().nrows()
    }
}

/// Embedding sizes shared by an encoder and the generator it conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub token_count: usize,
    pub embed_dim: usize,
    pub pooled_dim: usize,
}

impl EncoderDims {
    /// Sequence encoder 512×4096 with a 768-wide pooled encoder, as used by
    /// FLUX-style generators.
    pub const FLUX_T5_CLIP: EncoderDims = EncoderDims { token_count: 512, embed_dim: 4096, pooled_dim: 768 };
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    /// token_count × embed_dim
    pub pe: Array2<f64>,
    /// pooled_dim
    pub ppe: Array1<f64>,
}

pub trait TextEncoder: Send + Sync {
    fn kind(&self) -> &str;
    fn dims(&self) -> EncoderDims;
    fn encode(&self, prompt: &str) -> Result<TextEmbedding>;
}

pub trait Generator: Send + Sync {
    fn kind(&self) -> &str;
    fn dims(&self) -> EncoderDims;
    fn image_shape(&self) -> (usize, usize, usize);
    fn latent_dim(&self) -> usize;
    fn generate(&self, pe: &ArrayView2<f64>, ppe: &ArrayView1<f64>, latent_seed: u64) -> Result<Image>;
    /// Pulls `∂f/∂image` back to `(∂f/∂pe, ∂f/∂ppe)`.
    fn generate_vjp(
        &self,
        pe: &ArrayView2<f64>,
        ppe: &ArrayView1<f64>,
        latent_seed: u64,
        grad_image: &ArrayView3<f64>,
    ) -> Result<(Array2<f64>, Array1<f64>)>;
}

/// Symmetric, nonnegative image distance that is zero on identical images.
pub trait PerceptualMetric: Send + Sync {
    fn name(&self) -> &str;
    fn distance(&self, a: &ArrayView3<f64>, b: &ArrayView3<f64>) -> Result<f64>;
}

/// The full set of frozen models a run works against.
#[derive(Clone)]
pub struct Backends {
    pub extractor: Arc<dyn FeatureExtractor>,
    pub encoder: Arc<dyn TextEncoder>,
    pub generator: Arc<dyn Generator>,
    pub metric: Arc<dyn PerceptualMetric>,
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backends")
            .field("extractor", &self.extractor.kind())
            .field("encoder", &self.encoder.kind())
            .field("generator", &self.generator.kind())
            .field("metric", &self.metric.name())
            .finish()
    }
}

impl Backends {
    /// Checks that encoder, generator and extractor agree on shapes.
    pub fn check_compatible(&self) -> Result<()> {
        if self.encoder.dims() != self.generator.dims() {
            return Err(invalid_arg(format!(
                "encoder dims {:?} do not match generator dims {:?}",
                self.encoder.dims(),
                self.generator.dims()
            )));
        }
        if self.generator.image_shape() != self.extractor.image_shape() {
            return Err(invalid_arg(format!(
                "generator image shape {:?} does not match extractor input {:?}",
                self.generator.image_shape(),
                self.extractor.image_shape()
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.extractor.feature_dim().0
    }
}

/// Backend selection keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendKinds {
    pub extractor: String,
    pub generator: String,
    pub encoder: String,
    pub metric: String,
}

impl Default for BackendKinds {
    fn default() -> Self {
        Self {
            extractor: "toy_planted".into(),
            generator: "toy_decoder".into(),
            encoder: "toy_hash".into(),
            metric: "toy_cosine".into(),
        }
    }
}

/// Options forwarded verbatim to an external diffusion adapter (denoising
/// steps, guidance and so on). No defaults are assumed.
pub type AdapterOptions = std::collections::BTreeMap<String, String>;

/// Builds backends from selection keys. Only the toy backends ship with this
/// crate; `adapter:*` kinds are accepted by the config schema but must be
/// provided by an embedding application.
pub fn build_backends(kinds: &BackendKinds, toy: &ToyWorldConfig) -> Result<Backends> {
    for (slot, kind, want) in [
        ("extractor", &kinds.extractor, "toy_planted"),
        ("generator", &kinds.generator, "toy_decoder"),
        ("encoder", &kinds.encoder, "toy_hash"),
        ("metric", &kinds.metric, "toy_cosine"),
    ] {
        if kind.starts_with("adapter:") {
            return Err(ProdgError::Backend(format!(
                "{slot} kind '{kind}' requires an external adapter that is not bundled"
            )));
        }
        if kind != want {
            return Err(ProdgError::InvalidConfig(format!("unknown {slot} kind '{kind}'")));
        }
    }
    Ok(ToyWorld::build(toy)?.backends())
}

/// Runs the extractor after checking the image shape.
pub fn extract_features(extractor: &dyn FeatureExtractor, image: &ArrayView3<f64>) -> Result<FeatureMap> {
    if image.dim() != extractor.image_shape() {
        return Err(invalid_arg(format!(
            "image shape {:?} does not match extractor input {:?}",
            image.dim(),
            extractor.image_shape()
        )));
    }
    extractor.extract(image)
}

/// Original-head logits `W·GAP(feat) + b`.
pub fn classify(extractor: &dyn FeatureExtractor, feat: &FeatureMap) -> Result<Array1<f64>> {
    if feat.dim() != extractor.feature_dim() {
        return Err(invalid_arg(format!(
            "feature shape {:?} does not match extractor output {:?}",
            feat.dim(),
            extractor.feature_dim()
        )));
    }
    Ok(extractor.head_weights().dot(&feat.gap()) + extractor.head_bias())
}

pub fn encode_text(encoder: &dyn TextEncoder, prompt: &str) -> Result<TextEmbedding> {
    if prompt.is_empty() {
        return Err(invalid_arg("prompt must be nonempty"));
    }
    encoder.encode(prompt)
}

/// Runs the generator after checking embedding shapes.
pub fn generate(
    generator: &dyn Generator,
    pe: &ArrayView2<f64>,
    ppe: &ArrayView1<f64>,
    latent_seed: u64,
) -> Result<Image> {
    check_embedding_dims(generator.dims(), pe, ppe)?;
    generator.generate(pe, ppe, latent_seed)
}

pub(crate) fn check_embedding_dims(dims: EncoderDims, pe: &ArrayView2<f64>, ppe: &ArrayView1<f64>) -> Result<()> {
    if pe.dim() != (dims.token_count, dims.embed_dim) || ppe.len() != dims.pooled_dim {
        return Err(invalid_arg(format!(
            "embedding shapes {:?}/{} do not match generator dims {:?}",
            pe.dim(),
            ppe.len(),
            dims
        )));
    }
    Ok(())
}

pub fn perceptual_distance(metric: &dyn PerceptualMetric, a: &ArrayView3<f64>, b: &ArrayView3<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(invalid_arg(format!("image shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    metric.distance(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flux_adapter_dims() {
        let d = EncoderDims::FLUX_T5_CLIP;
        assert_eq!((d.token_count, d.embed_dim), (512, 4096));
    }

    #[test]
    fn adapter_kinds_are_reported_as_unavailable() {
        let kinds = BackendKinds { generator: "adapter:flux-schnell".into(), ..Default::default() };
        let err = build_backends(&kinds, &ToyWorldConfig::default()).unwrap_err();
        assert!(matches!(err, ProdgError::Backend(_)));
        let kinds = BackendKinds { metric: "lpips".into(), ..Default::default() };
        assert!(matches!(
            build_backends(&kinds, &ToyWorldConfig::default()),
            Err(ProdgError::InvalidConfig(_))
        ));
    }
}
