//! Small deterministic backends with a planted ground truth.
//!
//! Every concept `q` owns a nonnegative texture template; templates have
//! disjoint supports, so they are orthonormal. The extractor measures template
//! responses per patch and entangles them with a fixed rotation `M` close to
//! the identity, so raw channel `q` still prefers concept `q` but is impure.
//! The decoder paints per-patch softplus amplitudes of every template; its
//! readout is aligned with the hash encoder's embedding of each concept name.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    check_embedding_dims, Backends, EncoderDims, FeatureExtractor, Generator, Image, PerceptualMetric,
    TextEmbedding, TextEncoder,
};
use crate::error::{invalid_arg, ProdgError, Result};
use crate::feature::{gap, FeatureMap};
use crate::linalg;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyWorldConfig {
    /// Feature channels C (one planted concept per channel).
    pub channels: usize,
    /// Square image side in pixels; images have 3 color planes.
    pub image_size: usize,
    /// Square patch side; features are `image_size / patch` on a side.
    pub patch: usize,
    pub token_count: usize,
    pub embed_dim: usize,
    pub pooled_dim: usize,
    /// Names whose embeddings the decoder is aligned with, in channel order.
    /// Empty means `class_0 … class_{C-1}`.
    pub concept_names: Vec<String>,
    /// Rotation angle scale of the entangling matrix.
    pub mixing_strength: f64,
    /// Scale of the per-patch latent.
    pub latent_scale: f64,
    /// Scale of the per-image latent shared by all patches of a concept.
    pub global_latent_scale: f64,
    pub gain: f64,
    pub offset: f64,
    pub seed: u64,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            image_size: 16,
            patch: 4,
            token_count: 8,
            embed_dim: 32,
            pooled_dim: 16,
            concept_names: Vec::new(),
            mixing_strength: 0.6,
            latent_scale: 0.3,
            global_latent_scale: 0.3,
            gain: 4.0,
            offset: 2.5,
            seed: 0,
        }
    }
}

/// `class_0 … class_{n-1}`
pub fn concept_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class_{i}")).collect()
}

impl ToyWorldConfig {
    pub fn resolved_concept_names(&self) -> Vec<String> {
        if self.concept_names.is_empty() {
            concept_names(self.channels)
        } else {
            self.concept_names.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.patch == 0 || self.image_size == 0 {
            return Err(invalid_arg("toy world dimensions must be positive"));
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return Err(invalid_arg("image_size must be a multiple of patch"));
        }
        if self.channels > 3 * self.patch * self.patch {
            return Err(invalid_arg("too many channels for the patch size"));
        }
        if self.token_count == 0 || self.embed_dim == 0 || self.pooled_dim == 0 {
            return Err(invalid_arg("encoder dimensions must be positive"));
        }
        for (name, v) in [("latent_scale", self.latent_scale), ("global_latent_scale", self.global_latent_scale)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid_arg(format!("{name} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

/// Disjoint-support unit templates, `channels × (3·patch·patch)`.
fn build_templates(cfg: &ToyWorldConfig) -> Array2<f64> {
    let slots = 3 * cfg.patch * cfg.patch;
    let mut order: Vec<usize> = (0..slots).collect();
    order.shuffle(&mut seed::rng(seed::derive(&[cfg.seed, 1])));
    let mut t = Array2::<f64>::zeros((cfg.channels, slots));
    for (rank, &slot) in order.iter().enumerate() {
        t[[rank % cfg.channels, slot]] = 1.0;
    }
    for mut row in t.rows_mut() {
        let n = row.sum().sqrt();
        row.mapv_inplace(|v| v / n);
    }
    t
}

fn patch_vec(image: &ArrayView3<f64>, p: usize, i: usize, j: usize) -> Array1<f64> {
    image
        .slice(s![.., i * p..(i + 1) * p, j * p..(j + 1) * p])
        .iter()
        .copied()
        .collect()
}

fn write_patch(image: &mut Array3<f64>, p: usize, i: usize, j: usize, v: &ArrayView1<f64>) {
    let mut view = image.slice_mut(s![.., i * p..(i + 1) * p, j * p..(j + 1) * p]);
    for (dst, src) in view.iter_mut().zip(v.iter()) {
        *dst = *src;
    }
}

/// Patch-wise template responses entangled by a fixed rotation, followed by
/// a linear head.
#[derive(Debug, Clone)]
pub struct ToyPlantedExtractor {
    templates: Array2<f64>,
    mixing: Array2<f64>,
    bias: Array1<f64>,
    head_w: Array2<f64>,
    head_b: Array1<f64>,
    image_size: usize,
    patch: usize,
}

impl ToyPlantedExtractor {
    /// The entangling rotation (channels × channels).
    pub fn mixing(&self) -> ArrayView2<'_, f64> {
        self.mixing.view()
    }

    fn grid(&self) -> usize {
        self.image_size / self.patch
    }
}

impl FeatureExtractor for ToyPlantedExtractor {
    fn kind(&self) -> &str {
        "toy_planted"
    }

    fn image_shape(&self) -> (usize, usize, usize) {
        (3, self.image_size, self.image_size)
    }

    fn feature_dim(&self) -> (usize, usize, usize) {
        (self.templates.nrows(), self.grid(), self.grid())
    }

    fn head_weights(&self) -> ArrayView2<'_, f64> {
        self.head_w.view()
    }

    fn head_bias(&self) -> ArrayView1<'_, f64> {
        self.head_b.view()
    }

    fn extract(&self, image: &ArrayView3<f64>) -> Result<FeatureMap> {
        if image.dim() != self.image_shape() {
            return Err(invalid_arg("image shape mismatch"));
        }
        let g = self.grid();
        let c = self.templates.nrows();
        let proj = self.mixing.dot(&self.templates);
        let mut out = Array3::<f64>::zeros((c, g, g));
        for i in 0..g {
            for j in 0..g {
                let v = proj.dot(&patch_vec(image, self.patch, i, j)) + &self.bias;
                out.slice_mut(s![.., i, j]).assign(&v);
            }
        }
        FeatureMap::new(out, self.kind())
    }

    fn extract_vjp(&self, image: &ArrayView3<f64>, grad_features: &ArrayView3<f64>) -> Result<Array3<f64>> {
        if image.dim() != self.image_shape() || grad_features.dim() != self.feature_dim() {
            return Err(invalid_arg("shape mismatch in extractor vjp"));
        }
        let g = self.grid();
        let proj_t = self.mixing.dot(&self.templates).reversed_axes();
        let mut out = Array3::<f64>::zeros(self.image_shape());
        for i in 0..g {
            for j in 0..g {
                let gp = proj_t.dot(&grad_features.slice(s![.., i, j]));
                write_patch(&mut out, self.patch, i, j, &gp.view());
            }
        }
        Ok(out)
    }
}

/// Deterministic pseudo-embeddings keyed by a hash of the prompt.
#[derive(Debug, Clone)]
pub struct ToyHashEncoder {
    dims: EncoderDims,
    seed: u64,
}

impl ToyHashEncoder {
    pub fn new(dims: EncoderDims, seed: u64) -> Self {
        Self { dims, seed }
    }
}

impl TextEncoder for ToyHashEncoder {
    fn kind(&self) -> &str {
        "toy_hash"
    }

    fn dims(&self) -> EncoderDims {
        self.dims
    }

    fn encode(&self, prompt: &str) -> Result<TextEmbedding> {
        if prompt.is_empty() {
            return Err(invalid_arg("prompt must be nonempty"));
        }
        let digest = Sha256::digest(prompt.as_bytes());
        let key = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let pe = seed::normal_array((self.dims.token_count, self.dims.embed_dim), seed::derive(&[self.seed, key, 0]));
        let ppe = seed::normal_array(self.dims.pooled_dim, seed::derive(&[self.seed, key, 1]));
        Ok(TextEmbedding { pe, ppe })
    }
}

/// Softplus template painter conditioned on pooled embeddings plus a seeded
/// latent with per-patch and per-image parts.
#[derive(Debug, Clone)]
pub struct ToyDecoderGenerator {
    dims: EncoderDims,
    templates: Array2<f64>,
    read_pe: Array2<f64>,
    read_ppe: Array2<f64>,
    image_size: usize,
    patch: usize,
    gain: f64,
    offset: f64,
    latent_scale: f64,
    global_latent_scale: f64,
    seed: u64,
}

impl ToyDecoderGenerator {
    fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    fn latent(&self, latent_seed: u64) -> (Array3<f64>, Array1<f64>) {
        let g = self.grid();
        let c = self.templates.nrows();
        let local = seed::normal_array((c, g, g), seed::derive(&[self.seed, 2, latent_seed]));
        let global = seed::normal_array(c, seed::derive(&[self.seed, 5, latent_seed]));
        (local, global)
    }

    /// Concept code `read_pe·mean_tokens(pe) + read_ppe·ppe`.
    pub fn code(&self, pe: &ArrayView2<f64>, ppe: &ArrayView1<f64>) -> Array1<f64> {
        let pooled = pe.mean_axis(Axis(0)).expect("nonempty tokens");
        self.read_pe.dot(&pooled) + self.read_ppe.dot(ppe)
    }

    fn preactivations(&self, pe: &ArrayView2<f64>, ppe: &ArrayView1<f64>, latent_seed: u64) -> Array3<f64> {
        let code = self.code(pe, ppe);
        let (local, global) = self.latent(latent_seed);
        let mut pre = local * self.latent_scale;
        for (q, mut plane) in pre.outer_iter_mut().enumerate() {
            plane += self.gain * code[q] - self.offset + self.global_latent_scale * global[q];
        }
        pre
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Generator for ToyDecoderGenerator {
    fn kind(&self) -> &str {
        "toy_decoder"
    }

    fn dims(&self) -> EncoderDims {
        self.dims
    }

    fn image_shape(&self) -> (usize, usize, usize) {
        (3, self.image_size, self.image_size)
    }

    fn latent_dim(&self) -> usize {
        self.templates.nrows() * (self.grid() * self.grid() + 1)
    }

    fn generate(&self, pe: &ArrayView2<f64>, ppe: &ArrayView1<f64>, latent_seed: u64) -> Result<Image> {
        check_embedding_dims(self.dims, pe, ppe)?;
        let amp = self.preactivations(pe, ppe, latent_seed).mapv(softplus);
        let g = self.grid();
        let mut img = Array3::<f64>::zeros(self.image_shape());
        let tt = self.templates.t();
        for i in 0..g {
            for j in 0..g {
                let v = tt.dot(&amp.slice(s![.., i, j]));
                write_patch(&mut img, self.patch, i, j, &v.view());
            }
        }
        Ok(img)
    }

    fn generate_vjp(
        &self,
        pe: &ArrayView2<f64>,
        ppe: &ArrayView1<f64>,
        latent_seed: u64,
        grad_image: &ArrayView3<f64>,
    ) -> Result<(Array2<f64>, Array1<f64>)> {
        check_embedding_dims(self.dims, pe, ppe)?;
        if grad_image.dim() != self.image_shape() {
            return Err(invalid_arg("gradient image shape mismatch"));
        }
        let pre = self.preactivations(pe, ppe, latent_seed);
        let g = self.grid();
        let mut grad_code = Array1::<f64>::zeros(self.templates.nrows());
        for i in 0..g {
            for j in 0..g {
                let ga = self.templates.dot(&patch_vec(grad_image, self.patch, i, j));
                for q in 0..ga.len() {
                    grad_code[q] += ga[q] * sigmoid(pre[[q, i, j]]) * self.gain;
                }
            }
        }
        let grad_pooled = self.read_pe.t().dot(&grad_code);
        let tokens = self.dims.token_count as f64;
        let grad_pe = Array2::from_shape_fn((self.dims.token_count, self.dims.embed_dim), |(_, e)| {
            grad_pooled[e] / tokens
        });
        let grad_ppe = self.read_ppe.t().dot(&grad_code);
        Ok((grad_pe, grad_ppe))
    }
}

/// `1 − cos` between pooled toy-backbone features. A stand-in for a learned
/// perceptual metric.
#[derive(Clone)]
pub struct ToyCosineMetric {
    extractor: Arc<dyn FeatureExtractor>,
}

impl ToyCosineMetric {
    pub fn new(extractor: Arc<dyn FeatureExtractor>) -> Self {
        Self { extractor }
    }
}

impl PerceptualMetric for ToyCosineMetric {
    fn name(&self) -> &str {
        "toy_cosine"
    }

    fn distance(&self, a: &ArrayView3<f64>, b: &ArrayView3<f64>) -> Result<f64> {
        if a.dim() != b.dim() {
            return Err(invalid_arg("image shapes differ"));
        }
        if a == b {
            return Ok(0.0);
        }
        let va = gap(&self.extractor.extract(a)?.values());
        let vb = gap(&self.extractor.extract(b)?.values());
        Ok((1.0 - crate::objectives::cosine(&va.view(), &vb.view())).max(0.0))
    }
}

/// A coherent set of toy backends sharing one planted ground truth.
#[derive(Clone)]
pub struct ToyWorld {
    config: ToyWorldConfig,
    pub extractor: Arc<ToyPlantedExtractor>,
    pub encoder: Arc<ToyHashEncoder>,
    pub generator: Arc<ToyDecoderGenerator>,
    templates: Array2<f64>,
}

impl ToyWorld {
    pub fn build(cfg: &ToyWorldConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let templates = build_templates(cfg);

        let raw: Array2<f64> = seed::normal_array((c, c), seed::derive(&[cfg.seed, 3]));
        let skew = (&raw - &raw.t()) * (cfg.mixing_strength / (2.0 * c as f64).sqrt());
        let mixing = linalg::expm(&skew.view())?;

        let names = cfg.resolved_concept_names();
        if names.iter().any(|n| n.is_empty()) {
            return Err(invalid_arg("concept names must be nonempty"));
        }
        let num_classes = names.len();
        // Class k reads concept k back out of the entangled features.
        let noise: Array2<f64> = seed::normal_array((num_classes, c), seed::derive(&[cfg.seed, 4]));
        let head_w = Array2::from_shape_fn((num_classes, c), |(k, j)| {
            let base = if k < c { mixing[[j, k]] } else { 0.0 };
            base + 0.05 * noise[[k, j]]
        });
        let extractor = ToyPlantedExtractor {
            templates: templates.clone(),
            mixing,
            bias: Array1::zeros(c),
            head_w,
            head_b: Array1::zeros(num_classes),
            image_size: cfg.image_size,
            patch: cfg.patch,
        };

        let dims = EncoderDims { token_count: cfg.token_count, embed_dim: cfg.embed_dim, pooled_dim: cfg.pooled_dim };
        let encoder = ToyHashEncoder::new(dims, cfg.seed);

        // Each readout row is the dual of concept q's anchor embedding, so that
        // the anchor produces code ≈ e_q.
        let mut read_pe = Array2::<f64>::zeros((c, cfg.embed_dim));
        let mut read_ppe = Array2::<f64>::zeros((c, cfg.pooled_dim));
        for q in 0..c {
            let (pooled, ppe) = match names.get(q) {
                Some(name) => {
                    let e = encoder.encode(name)?;
                    (e.pe.mean_axis(Axis(0)).expect("tokens"), e.ppe)
                }
                None => (
                    seed::normal_array(cfg.embed_dim, seed::derive(&[cfg.seed, 5, q as u64])),
                    seed::normal_array(cfg.pooled_dim, seed::derive(&[cfg.seed, 6, q as u64])),
                ),
            };
            read_pe.row_mut(q).assign(&(&pooled * (0.5 / pooled.dot(&pooled))));
            read_ppe.row_mut(q).assign(&(&ppe * (0.5 / ppe.dot(&ppe))));
        }
        let generator = ToyDecoderGenerator {
            dims,
            templates: templates.clone(),
            read_pe,
            read_ppe,
            image_size: cfg.image_size,
            patch: cfg.patch,
            gain: cfg.gain,
            offset: cfg.offset,
            latent_scale: cfg.latent_scale,
            global_latent_scale: cfg.global_latent_scale,
            seed: cfg.seed,
        };

        Ok(Self {
            config: cfg.clone(),
            extractor: Arc::new(extractor),
            encoder: Arc::new(encoder),
            generator: Arc::new(generator),
            templates,
        })
    }

    pub fn config(&self) -> &ToyWorldConfig {
        &self.config
    }

    pub fn concept_names(&self) -> Vec<String> {
        self.config.resolved_concept_names()
    }

    pub fn backends(&self) -> Backends {
        let extractor: Arc<dyn FeatureExtractor> = self.extractor.clone();
        Backends {
            metric: Arc::new(ToyCosineMetric::new(extractor.clone())),
            extractor,
            encoder: self.encoder.clone(),
            generator: self.generator.clone(),
        }
    }

    /// Concept `q`'s template tiled over every patch at unit amplitude.
    pub fn concept_image(&self, q: usize) -> Result<Image> {
        let g = self.config.image_size / self.config.patch;
        self.concept_image_in_region(q, 0..g, 0..g)
    }

    /// Concept `q` painted only on the given patch rows/cols; other patches
    /// carry a faint uniform background.
    pub fn concept_image_in_region(
        &self,
        q: usize,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Result<Image> {
        if q >= self.config.channels {
            return Err(ProdgError::InvalidArgument(format!("concept {q} out of range")));
        }
        let p = self.config.patch;
        let g = self.config.image_size / p;
        let background = self.templates.sum_axis(Axis(0)) * 0.05;
        let mut img = Array3::<f64>::zeros((3, self.config.image_size, self.config.image_size));
        let tq = self.templates.row(q);
        for i in 0..g {
            for j in 0..g {
                if rows.contains(&i) && cols.contains(&j) {
                    write_patch(&mut img, p, i, j, &tq);
                } else {
                    write_patch(&mut img, p, i, j, &background.view());
                }
            }
        }
        Ok(img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{classify, encode_text, extract_features, generate, perceptual_distance};

    fn world() -> ToyWorld {
        ToyWorld::build(&ToyWorldConfig::default()).unwrap()
    }

    #[test]
    fn templates_are_orthonormal() {
        let t = build_templates(&ToyWorldConfig::default());
        let gram = t.dot(&t.t());
        assert!(linalg::frobenius(&(gram - Array2::<f64>::eye(8)).view()) < 1e-12);
        assert!(t.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn extraction_is_deterministic() {
        let w = world();
        let zero = Array3::<f64>::zeros((3, 16, 16));
        let a = extract_features(w.extractor.as_ref(), &zero.view()).unwrap();
        let b = extract_features(w.extractor.as_ref(), &zero.view()).unwrap();
        assert_eq!(a, b);
        let v = a.values();
        let first = v.slice(s![.., 0, 0]).to_owned();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(v.slice(s![.., i, j]), first);
            }
        }
        let bad = Array3::<f64>::zeros((3, 8, 8));
        assert!(extract_features(w.extractor.as_ref(), &bad.view()).is_err());
    }

    #[test]
    fn planted_concepts_dominate_their_channel() {
        let w = world();
        for q in 0..8 {
            let img = w.concept_image(q).unwrap();
            let means = extract_features(w.extractor.as_ref(), &img.view()).unwrap().gap();
            for c in 0..8 {
                if c != q {
                    assert!(means[q] > means[c], "concept {q}: channel {c} mean {} >= {}", means[c], means[q]);
                }
            }
        }
    }

    #[test]
    fn classify_uses_head() {
        let w = world();
        let img = w.concept_image(3).unwrap();
        let f = extract_features(w.extractor.as_ref(), &img.view()).unwrap();
        let logits = classify(w.extractor.as_ref(), &f).unwrap();
        let oracle = w.extractor.head_weights().dot(&f.gap()) + w.extractor.head_bias();
        assert_eq!(logits, oracle);
        let argmax = logits.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax, 3);
    }

    #[test]
    fn hash_encoder_is_stable_and_distinct() {
        let w = world();
        let a = encode_text(w.encoder.as_ref(), "class_0").unwrap();
        assert_eq!(a, encode_text(w.encoder.as_ref(), "class_0").unwrap());
        let b = encode_text(w.encoder.as_ref(), "class_1").unwrap();
        assert_ne!(a.pe, b.pe);
        assert!(encode_text(w.encoder.as_ref(), "").is_err());
    }

    #[test]
    fn generator_is_seeded() {
        let w = world();
        let e = w.encoder.encode("class_2").unwrap();
        let g = w.generator.as_ref();
        let a = generate(g, &e.pe.view(), &e.ppe.view(), 5).unwrap();
        assert_eq!(a, generate(g, &e.pe.view(), &e.ppe.view(), 5).unwrap());
        assert_ne!(a, generate(g, &e.pe.view(), &e.ppe.view(), 6).unwrap());
        let short = Array1::<f64>::zeros(3);
        assert!(generate(g, &e.pe.view(), &short.view(), 5).is_err());
    }

    #[test]
    fn anchor_embedding_paints_its_concept() {
        let w = world();
        let e = w.encoder.encode("class_5").unwrap();
        let code = w.generator.code(&e.pe.view(), &e.ppe.view());
        assert!((code[5] - 1.0).abs() < 1e-9);
        for q in 0..8 {
            if q != 5 {
                assert!(code[q].abs() < 0.6, "crosstalk {q}: {}", code[q]);
            }
        }
    }

    #[test]
    fn generator_vjp_matches_finite_differences() {
        let w = world();
        let e = w.encoder.encode("class_1").unwrap();
        let g = w.generator.as_ref();
        let weights: Array3<f64> = seed::normal_array((3, 16, 16), 77);
        let f = |pe: &Array2<f64>, ppe: &Array1<f64>| (g.generate(&pe.view(), &ppe.view(), 3).unwrap() * &weights).sum();
        let (gpe, gppe) = g.generate_vjp(&e.pe.view(), &e.ppe.view(), 3, &weights.view()).unwrap();
        let h = 1e-5;
        for k in [0usize, 3, 7, 11, 15] {
            let mut p = e.ppe.clone();
            p[k] += h;
            let mut m = e.ppe.clone();
            m[k] -= h;
            let fd = (f(&e.pe, &p) - f(&e.pe, &m)) / (2.0 * h);
            assert!((fd - gppe[k]).abs() <= 1e-3 * fd.abs().max(gppe[k].abs()).max(1e-8), "ppe[{k}]");
        }
        for (t, d) in [(0usize, 0usize), (2, 5), (7, 31), (4, 17), (1, 9)] {
            let mut p = e.pe.clone();
            p[[t, d]] += h;
            let mut m = e.pe.clone();
            m[[t, d]] -= h;
            let fd = (f(&p, &e.ppe) - f(&m, &e.ppe)) / (2.0 * h);
            assert!((fd - gpe[[t, d]]).abs() <= 1e-3 * fd.abs().max(gpe[[t, d]].abs()).max(1e-8));
        }
    }

    #[test]
    fn extractor_vjp_matches_finite_differences() {
        let w = world();
        let ex = w.extractor.as_ref();
        let img: Array3<f64> = seed::normal_array((3, 16, 16), 5);
        let weights: Array3<f64> = seed::normal_array((8, 4, 4), 6);
        let grad = ex.extract_vjp(&img.view(), &weights.view()).unwrap();
        let h = 1e-5;
        for idx in [[0usize, 0, 0], [1, 5, 9], [2, 15, 15], [0, 7, 3], [2, 2, 12]] {
            let mut p = img.clone();
            p[idx] += h;
            let mut m = img.clone();
            m[idx] -= h;
            let fp = (ex.extract(&p.view()).unwrap().into_values() * &weights).sum();
            let fm = (ex.extract(&m.view()).unwrap().into_values() * &weights).sum();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - grad[idx]).abs() <= 1e-3 * fd.abs().max(1e-8));
        }
    }

    #[test]
    fn metric_is_symmetric_and_zero_on_self() {
        let w = world();
        let b = w.backends();
        let x = w.concept_image(0).unwrap();
        let y = w.concept_image(1).unwrap();
        let m = b.metric.as_ref();
        assert_eq!(perceptual_distance(m, &x.view(), &x.view()).unwrap(), 0.0);
        let d1 = perceptual_distance(m, &x.view(), &y.view()).unwrap();
        let d2 = perceptual_distance(m, &y.view(), &x.view()).unwrap();
        assert_eq!(d1, d2);
        assert!(d1 > 0.0);
        let small = Array3::<f64>::zeros((3, 8, 8));
        assert!(perceptual_distance(m, &x.view(), &small.view()).is_err());
    }
}
