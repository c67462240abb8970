//! Concept attribution, concept heatmaps and bounding boxes.

use std::collections::VecDeque;

use ndarray::{Array1, Array2, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::backends::{extract_features, generate, Backends, Image};
use crate::error::{invalid_arg, Result};
use crate::feature::{gap, FeatureMap};
use crate::orthobasis::{fuse_head, purity_of_transformed, FusedHead, OrthogonalBasis, PURITY_EPS};
use crate::par::par_map;
use crate::promptbank::{NoiseSample, PromptBank};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributionScore {
    pub channel: usize,
    pub score: f64,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    pub predicted_class: usize,
    pub logits: Array1<f64>,
    /// Scores of every channel towards the predicted class.
    pub all_scores: Array1<f64>,
    /// Top-k by descending score, ties to the lower channel.
    pub top: Vec<AttributionScore>,
}

fn first_argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Scores `S_c = W_fused[ŷ, c] · relu(GAP(Z_c))` for the class predicted by
/// the fused head, keeping the `k` largest. `k > C` is clamped to `C`.
pub fn attribute(feat: &FeatureMap, basis: &OrthogonalBasis, head: &FusedHead, k: usize) -> Result<Attribution> {
    if k == 0 {
        return Err(invalid_arg("k must be at least 1"));
    }
    let channels = basis.channels();
    if head.weights.ncols() != channels {
        return Err(invalid_arg("head and basis disagree on channel count"));
    }
    let k = if k > channels {
        log::warn!("requested top-{k} concepts but only {channels} channels exist; using {channels}");
        channels
    } else {
        k
    };
    let z = basis.apply(feat)?;
    let pooled = z.gap();
    let logits = head.logits(&pooled.view())?;
    let y = first_argmax(&logits);
    let all_scores = Array1::from_shape_fn(channels, |c| head.weights[[y, c]] * pooled[c].max(0.0));
    let mut order: Vec<usize> = (0..channels).collect();
    order.sort_by(|&a, &b| all_scores[b].total_cmp(&all_scores[a]).then(a.cmp(&b)));
    let top = order[..k]
        .iter()
        .map(|&c| AttributionScore { channel: c, score: all_scores[c], class: y })
        .collect();
    Ok(Attribution { predicted_class: y, logits, all_scores, top })
}

fn check_channel(z: &ArrayView3<f64>, c: usize) -> Result<()> {
    if c >= z.dim().0 {
        return Err(invalid_arg(format!("channel {c} out of range for {} channels", z.dim().0)));
    }
    Ok(())
}

/// `relu(Z_c) / ‖Z[:, h, w]‖` on already transformed features.
pub fn spatial_purity_from_transformed(z: &ArrayView3<f64>, c: usize) -> Result<Array2<f64>> {
    check_channel(z, c)?;
    let (_, h, w) = z.dim();
    Ok(Array2::from_shape_fn((h, w), |(i, j)| {
        let col = z.slice(ndarray::s![.., i, j]);
        let norm = col.dot(&col).sqrt().max(PURITY_EPS);
        // Rounding can push the ratio a hair above 1 when one channel holds
        // all the energy.
        (z[[c, i, j]].max(0.0) / norm).min(1.0)
    }))
}

/// `relu(Z_c) / max relu(Z_c)`; identically zero if the channel never fires.
pub fn relative_magnitude_from_transformed(z: &ArrayView3<f64>, c: usize) -> Result<Array2<f64>> {
    check_channel(z, c)?;
    let plane = z.index_axis(ndarray::Axis(0), c).mapv(|v| v.max(0.0));
    let peak = plane.iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Ok(Array2::zeros(plane.raw_dim()));
    }
    Ok(plane.mapv(|v| v / peak.max(PURITY_EPS)))
}

pub fn spatial_purity_map(feat: &FeatureMap, basis: &OrthogonalBasis, c: usize) -> Result<Array2<f64>> {
    let z = basis.apply_values(&feat.values())?;
    spatial_purity_from_transformed(&z.view(), c)
}

pub fn relative_magnitude_map(feat: &FeatureMap, basis: &OrthogonalBasis, c: usize) -> Result<Array2<f64>> {
    let z = basis.apply_values(&feat.values())?;
    relative_magnitude_from_transformed(&z.view(), c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptHeatmap {
    pub channel: usize,
    /// Feature resolution, entries in [0, 1].
    pub values: Array2<f64>,
    /// Bilinear upsampling of `values` to image resolution.
    pub upsampled: Array2<f64>,
}

/// Bilinear resampling with half-pixel centers and edge clamping. Every
/// output is a convex combination of inputs.
pub fn bilinear_resize(src: &ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let x = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, x - lo as f64)
    };
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let (r0, r1, fr) = coord(i, out_h, h);
        let (c0, c1, fc) = coord(j, out_w, w);
        let top = src[[r0, c0]] * (1.0 - fc) + src[[r0, c1]] * fc;
        let bot = src[[r1, c0]] * (1.0 - fc) + src[[r1, c1]] * fc;
        top * (1.0 - fr) + bot * fr
    })
}

pub fn heatmap_from_transformed(z: &ArrayView3<f64>, c: usize, image_hw: (usize, usize)) -> Result<ConceptHeatmap> {
    let p = spatial_purity_from_transformed(z, c)?;
    let m = relative_magnitude_from_transformed(z, c)?;
    let values = &p * &m;
    let upsampled = bilinear_resize(&values.view(), image_hw.0, image_hw.1);
    Ok(ConceptHeatmap { channel: c, values, upsampled })
}

/// `H_c = P_c ⊙ M_c`, plus its upsampled copy at `image_hw`.
pub fn concept_heatmap(
    feat: &FeatureMap,
    basis: &OrthogonalBasis,
    c: usize,
    image_hw: (usize, usize),
) -> Result<ConceptHeatmap> {
    let z = basis.apply_values(&feat.values())?;
    heatmap_from_transformed(&z.view(), c, image_hw)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(&self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

/// Inclusive box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl BoundingBox {
    pub fn as_array(&self) -> [usize; 4] {
        [self.row_min, self.row_max, self.col_min, self.col_max]
    }
}

/// Box around the largest connected block of pixels at or above
/// `threshold_frac · max`. Equal-size blocks resolve to the one holding the
/// row-major-first active pixel. `None` if the heatmap is empty or has no
/// positive value.
pub fn extract_bbox(heatmap: &ArrayView2<f64>, threshold_frac: f64, connectivity: Connectivity) -> Option<BoundingBox> {
    let (h, w) = heatmap.dim();
    if h == 0 || w == 0 {
        return None;
    }
    let peak = heatmap.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(peak > 0.0) {
        return None;
    }
    let cut = threshold_frac * peak;
    let active = heatmap.mapv(|v| v >= cut);
    let mut seen = Array2::from_elem((h, w), false);
    let mut best: Option<(usize, BoundingBox)> = None;
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if !active[[r, c]] || seen[[r, c]] {
                continue;
            }
            seen[[r, c]] = true;
            queue.push_back((r, c));
            let mut size = 0;
            let mut bb = BoundingBox { row_min: r, row_max: r, col_min: c, col_max: c };
            while let Some((i, j)) = queue.pop_front() {
                size += 1;
                bb.row_min = bb.row_min.min(i);
                bb.row_max = bb.row_max.max(i);
                bb.col_min = bb.col_min.min(j);
                bb.col_max = bb.col_max.max(j);
                for &(di, dj) in connectivity.offsets() {
                    let (ni, nj) = (i as isize + di, j as isize + dj);
                    if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                        continue;
                    }
                    let (ni, nj) = (ni as usize, nj as usize);
                    if active[[ni, nj]] && !seen[[ni, nj]] {
                        seen[[ni, nj]] = true;
                        queue.push_back((ni, nj));
                    }
                }
            }
            if best.is_none_or(|(s, _)| size > s) {
                best = Some((size, bb));
            }
        }
    }
    best.map(|(_, bb)| bb)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainOptions {
    pub k: usize,
    pub samples_per_channel: usize,
    pub threshold_frac: f64,
    pub connectivity: Connectivity,
    /// Also compute each selected channel's heatmap on the input image itself.
    pub input_heatmaps: bool,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        Self { k: 3, samples_per_channel: 4, threshold_frac: 0.8, connectivity: Connectivity::Four, input_heatmaps: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub seed: u64,
    pub image: Image,
    pub heatmap: ConceptHeatmap,
    pub bbox: Option<BoundingBox>,
    /// Purity of the explained channel on this prototype.
    pub purity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelExplanation {
    pub channel: usize,
    pub score: f64,
    pub anchor_label: String,
    pub prototypes: Vec<Prototype>,
    pub input_heatmap: Option<ConceptHeatmap>,
    pub input_bbox: Option<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationReport {
    pub predicted_class: usize,
    pub label: Option<String>,
    pub k: usize,
    pub channels: Vec<ChannelExplanation>,
    pub seed: u64,
    pub options: ExplainOptions,
}

/// Seeds of the `s`-th prototype of channel `c`: (noise, latent).
pub fn prototype_seeds(seed: u64, c: usize, s: usize) -> (u64, u64) {
    let base = seed::derive(&[seed, c as u64, s as u64, 31]);
    (base, seed::derive(&[base, 32]))
}

/// Samples `n` prototype images of channel `c` from the bank.
pub fn sample_prototypes(bank: &PromptBank, backends: &Backends, c: usize, n: usize, seed: u64) -> Result<Vec<(u64, Image)>> {
    let entry = bank.entry(c)?;
    par_map(n, |s| {
        let (noise_seed, latent_seed) = prototype_seeds(seed, c, s);
        let emb = entry.sample(&NoiseSample::draw(bank.dims(), noise_seed))?;
        let img = generate(backends.generator.as_ref(), &emb.pe.view(), &emb.ppe.view(), latent_seed)?;
        Ok((noise_seed, img))
    })
}

/// Full explanation of one input: attribution, then prototypes with
/// heatmaps and boxes computed on the prototypes' own transformed features.
pub fn explain(
    image: &ArrayView3<f64>,
    basis: &OrthogonalBasis,
    bank: &PromptBank,
    backends: &Backends,
    class_labels: Option<&[String]>,
    options: &ExplainOptions,
    seed: u64,
) -> Result<ExplanationReport> {
    if options.samples_per_channel == 0 {
        return Err(invalid_arg("samples_per_channel must be at least 1"));
    }
    if bank.channels() != basis.channels() {
        return Err(invalid_arg("prompt bank and basis disagree on channel count"));
    }
    let ex = backends.extractor.as_ref();
    let feat = extract_features(ex, image)?;
    let head = fuse_head(&ex.head_weights(), &ex.head_bias(), basis)?;
    let attribution = attribute(&feat, basis, &head, options.k)?;
    let (_, ih, iw) = image.dim();
    let input_z = basis.apply_values(&feat.values())?;
    let u = basis.u()?;

    let mut channels = Vec::with_capacity(attribution.top.len());
    for score in &attribution.top {
        let c = score.channel;
        let samples = sample_prototypes(bank, backends, c, options.samples_per_channel, seed)?;
        let prototypes = par_map(samples.len(), |i| {
            let (pseed, img) = &samples[i];
            let f = extract_features(ex, &img.view())?;
            let z = crate::orthobasis::mix_channels(&u, &f.values())?;
            let heatmap = heatmap_from_transformed(&z.view(), c, (img.dim().1, img.dim().2))?;
            let bbox = extract_bbox(&heatmap.upsampled.view(), options.threshold_frac, options.connectivity);
            let purity = purity_of_transformed(&z.view(), c)?.value;
            Ok(Prototype { seed: *pseed, image: img.clone(), heatmap, bbox, purity })
        })?;
        let (input_heatmap, input_bbox) = if options.input_heatmaps {
            let hm = heatmap_from_transformed(&input_z.view(), c, (ih, iw))?;
            let bb = extract_bbox(&hm.upsampled.view(), options.threshold_frac, options.connectivity);
            (Some(hm), bb)
        } else {
            (None, None)
        };
        channels.push(ChannelExplanation {
            channel: c,
            score: score.score,
            anchor_label: bank.entry(c)?.anchor_label().to_string(),
            prototypes,
            input_heatmap,
            input_bbox,
        });
    }
    let label = class_labels.and_then(|l| l.get(attribution.predicted_class).cloned());
    Ok(ExplanationReport {
        predicted_class: attribution.predicted_class,
        label,
        k: attribution.top.len(),
        channels,
        seed,
        options: *options,
    })
}

/// Serialized report. Asset paths are supplied by the caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportDocument {
    pub input: String,
    pub predicted_class: usize,
    pub label: Option<String>,
    pub k: usize,
    pub channels: Vec<ChannelDocument>,
    pub config_echo: serde_json::Value,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelDocument {
    pub channel: usize,
    pub score: f64,
    pub anchor_label: String,
    pub prototypes: Vec<PrototypeDocument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_heatmap: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrototypeDocument {
    pub image: String,
    pub seed: u64,
    pub bbox: Option<[usize; 4]>,
    pub heatmap: String,
}

/// Names of the files a report refers to.
pub trait AssetNamer {
    fn prototype_image(&self, channel: usize, index: usize) -> String;
    fn prototype_heatmap(&self, channel: usize, index: usize) -> String;
    fn input_heatmap(&self, channel: usize) -> String;
}

/// `<prefix>c{channel}_p{index}.png` style names.
pub struct PrefixNamer(pub String);

impl AssetNamer for PrefixNamer {
    fn prototype_image(&self, channel: usize, index: usize) -> String {
        format!("{}c{channel}_p{index}.png", self.0)
    }
    fn prototype_heatmap(&self, channel: usize, index: usize) -> String {
        format!("{}c{channel}_p{index}_heatmap.png", self.0)
    }
    fn input_heatmap(&self, channel: usize) -> String {
        format!("{}c{channel}_input_heatmap.png", self.0)
    }
}

impl ExplanationReport {
    pub fn to_document(&self, input: &str, namer: &dyn AssetNamer, config_echo: serde_json::Value) -> ReportDocument {
        ReportDocument {
            input: input.to_string(),
            predicted_class: self.predicted_class,
            label: self.label.clone(),
            k: self.k,
            channels: self
                .channels
                .iter()
                .map(|ch| ChannelDocument {
                    channel: ch.channel,
                    score: ch.score,
                    anchor_label: ch.anchor_label.clone(),
                    prototypes: ch
                        .prototypes
                        .iter()
                        .enumerate()
                        .map(|(i, p)| PrototypeDocument {
                            image: namer.prototype_image(ch.channel, i),
                            seed: p.seed,
                            bbox: p.bbox.map(|b| b.as_array()),
                            heatmap: namer.prototype_heatmap(ch.channel, i),
                        })
                        .collect(),
                    input_heatmap: ch.input_heatmap.as_ref().map(|_| namer.input_heatmap(ch.channel)),
                })
                .collect(),
            config_echo,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// Pooled backbone features of an image, without the basis.
pub fn pooled_features(backends: &Backends, image: &ArrayView3<f64>) -> Result<Array1<f64>> {
    Ok(gap(&extract_features(backends.extractor.as_ref(), image)?.values()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array3};

    fn fm(v: Array3<f64>) -> FeatureMap {
        FeatureMap::new(v, "test").unwrap()
    }

    #[test]
    fn attribution_hand_example() {
        let basis = OrthogonalBasis::new(3).unwrap();
        let w = array![[2.0, -1.0, 0.5], [0.0, 0.0, 0.0]];
        let head = fuse_head(&w.view(), &array![0.0, -100.0].view(), &basis).unwrap();
        let f = fm(array![[[1.5]], [[3.0]], [[-2.0]]]);
        let a = attribute(&f, &basis, &head, 1).unwrap();
        assert_eq!(a.predicted_class, 0);
        assert_eq!(a.all_scores, array![3.0, -3.0, 0.0]);
        assert_eq!(a.top, vec![AttributionScore { channel: 0, score: 3.0, class: 0 }]);
    }

    #[test]
    fn attribution_ties_and_clamp() {
        let basis = OrthogonalBasis::new(4).unwrap();
        let w = Array2::from_elem((2, 4), 1.0);
        let head = fuse_head(&w.view(), &array![0.0, 0.0].view(), &basis).unwrap();
        let f = fm(Array3::zeros((4, 2, 2)));
        let a = attribute(&f, &basis, &head, 3).unwrap();
        assert_eq!(a.top.iter().map(|s| s.channel).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(a.top.iter().all(|s| s.score == 0.0));
        assert_eq!(attribute(&f, &basis, &head, 10).unwrap().top.len(), 4);
        assert!(attribute(&f, &basis, &head, 0).is_err());
    }

    #[test]
    fn spatial_purity_examples() {
        let id = OrthogonalBasis::new(2).unwrap();
        let p = spatial_purity_map(&fm(array![[[2.0]], [[0.0]]]), &id, 0).unwrap();
        assert_eq!(p[[0, 0]], 1.0);
        let f = fm(array![[[2.0, -1.0], [0.0, 1.0]], [[0.0, 1.0], [2.0, 0.0]]]);
        assert_eq!(spatial_purity_map(&f, &id, 0).unwrap(), array![[1.0, 0.0], [0.0, 1.0]]);
        let neg = fm(array![[[-1.0, -2.0]], [[1.0, 1.0]]]);
        assert!(spatial_purity_map(&neg, &id, 0).unwrap().iter().all(|v| *v == 0.0));
        assert!(spatial_purity_map(&neg, &id, 2).is_err());
    }

    #[test]
    fn relative_magnitude_examples() {
        let id = OrthogonalBasis::new(2).unwrap();
        let f = fm(array![[[2.0, 0.0], [0.0, 1.0]], [[0.0, 1.0], [2.0, 0.0]]]);
        assert_eq!(relative_magnitude_map(&f, &id, 0).unwrap(), array![[1.0, 0.0], [0.0, 0.5]]);
        let flat = fm(Array3::from_elem((2, 2, 2), 0.7));
        assert!(relative_magnitude_map(&flat, &id, 1).unwrap().iter().all(|v| *v == 1.0));
        let neg = fm(Array3::from_elem((2, 2, 2), -0.7));
        assert!(relative_magnitude_map(&neg, &id, 0).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn heatmap_examples() {
        let id = OrthogonalBasis::new(2).unwrap();
        let f = fm(array![[[2.0, -1.0], [0.0, 1.0]], [[0.0, 1.0], [2.0, 0.0]]]);
        let h = concept_heatmap(&f, &id, 0, (8, 8)).unwrap();
        assert_eq!(h.values, array![[1.0, 0.0], [0.0, 0.5]]);
        assert_eq!(h.upsampled.dim(), (8, 8));
        let max_up = h.upsampled.iter().copied().fold(f64::MIN, f64::max);
        assert!(max_up <= 1.0);
        let zero = concept_heatmap(&fm(Array3::zeros((2, 2, 2))), &id, 1, (4, 4)).unwrap();
        assert!(zero.upsampled.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bilinear_identity_and_corners() {
        let src = array![[0.0, 1.0], [2.0, 3.0]];
        assert_eq!(bilinear_resize(&src.view(), 2, 2), src);
        let up = bilinear_resize(&src.view(), 4, 4);
        assert_eq!(up[[0, 0]], 0.0);
        assert_eq!(up[[3, 3]], 3.0);
        assert_abs_diff_eq!(up[[1, 1]], 0.75 * 0.75 * 0.0 + 0.75 * 0.25 * 1.0 + 0.25 * 0.75 * 2.0 + 0.25 * 0.25 * 3.0);
    }

    #[test]
    fn bbox_examples() {
        let h = array![[0.9, 0.85, 0.0], [0.0, 0.0, 0.0], [0.0, 0.82, 0.95]];
        let b = extract_bbox(&h.view(), 0.8, Connectivity::Four).unwrap();
        assert_eq!(b.as_array(), [0, 0, 0, 1]);

        let mut single = Array2::<f64>::zeros((4, 5));
        single[[2, 3]] = 0.4;
        assert_eq!(extract_bbox(&single.view(), 0.8, Connectivity::Four).unwrap().as_array(), [2, 2, 3, 3]);
        assert_eq!(extract_bbox(&Array2::<f64>::zeros((3, 3)).view(), 0.8, Connectivity::Four), None);
        assert_eq!(extract_bbox(&Array2::<f64>::zeros((0, 3)).view(), 0.8, Connectivity::Four), None);
    }

    #[test]
    fn diagonal_blocks_merge_only_with_eight_connectivity() {
        let h = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(extract_bbox(&h.view(), 0.8, Connectivity::Four).unwrap().as_array(), [0, 0, 0, 0]);
        assert_eq!(extract_bbox(&h.view(), 0.8, Connectivity::Eight).unwrap().as_array(), [0, 2, 0, 2]);
    }
}
