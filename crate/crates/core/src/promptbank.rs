//! Concept prompt bank: one entry per feature channel holding frozen anchor
//! embeddings and the trainable distribution parameters around them.
//!
//! Sampled embeddings are
//! `pe = pe_anchor + lora_a·lora_b + exp(½·logvar_pe) ⊙ ε₁` and
//! `ppe = ppe_anchor + delta_ppe + exp(½·logvar_ppe) ⊙ ε₂`.

use ndarray::{Array1, Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::backends::{Backends, EncoderDims, TextEmbedding};
use crate::error::{invalid_arg, Result};
use crate::orthobasis::purity_of_transformed;
use crate::par::par_map;
use crate::seed;

pub const LOGVAR_MIN: f64 = -20.0;
pub const LOGVAR_MAX: f64 = 4.0;

/// Whether log-variances are stored per embedding entry or as one shared
/// scalar per embedding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogvarMode {
    #[default]
    PerEntry,
    Shared,
}

/// Trainable parameters of one channel. Also used to carry gradients and
/// optimizer moments of the same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    /// token_count × r
    pub lora_a: Array2<f64>,
    /// r × embed_dim
    pub lora_b: Array2<f64>,
    pub delta_ppe: Array1<f64>,
    /// token_count × embed_dim, or 1×1 when shared
    pub logvar_pe: Array2<f64>,
    /// pooled_dim, or length 1 when shared
    pub logvar_ppe: Array1<f64>,
}

impl Theta {
    pub const NAMES: [&'static str; 5] = ["lora_A", "lora_B", "delta_ppe", "logvar_pe", "logvar_ppe"];

    pub fn zeros_like(other: &Theta) -> Theta {
        Theta {
            lora_a: Array2::zeros(other.lora_a.raw_dim()),
            lora_b: Array2::zeros(other.lora_b.raw_dim()),
            delta_ppe: Array1::zeros(other.delta_ppe.raw_dim()),
            logvar_pe: Array2::zeros(other.logvar_pe.raw_dim()),
            logvar_ppe: Array1::zeros(other.logvar_ppe.raw_dim()),
        }
    }

    /// The five tensors in [`Theta::NAMES`] order, flattened.
    pub fn slices(&self) -> [&[f64]; 5] {
        [
            self.lora_a.as_slice().expect("standard layout"),
            self.lora_b.as_slice().expect("standard layout"),
            self.delta_ppe.as_slice().expect("standard layout"),
            self.logvar_pe.as_slice().expect("standard layout"),
            self.logvar_ppe.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.lora_a.as_slice_mut().expect("standard layout"),
            self.lora_b.as_slice_mut().expect("standard layout"),
            self.delta_ppe.as_slice_mut().expect("standard layout"),
            self.logvar_pe.as_slice_mut().expect("standard layout"),
            self.logvar_ppe.as_slice_mut().expect("standard layout"),
        ]
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, other: &Theta, scale: f64) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| *v == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn clamp_logvars(&mut self) {
        self.logvar_pe.mapv_inplace(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        self.logvar_ppe.mapv_inplace(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBankEntry {
    pe_anchor: Array2<f64>,
    ppe_anchor: Array1<f64>,
    anchor_label: String,
    pub theta: Theta,
}

impl PromptBankEntry {
    /// Reassembles an entry from stored parts, checking shapes against `dims`.
    pub fn from_parts(
        pe_anchor: Array2<f64>,
        ppe_anchor: Array1<f64>,
        anchor_label: String,
        theta: Theta,
        dims: EncoderDims,
        rank: usize,
    ) -> Result<Self> {
        let entry = Self { pe_anchor, ppe_anchor, anchor_label, theta };
        entry.check_shapes(dims, rank)?;
        Ok(entry)
    }

    fn check_shapes(&self, dims: EncoderDims, rank: usize) -> Result<()> {
        let t = &self.theta;
        let shared_pe = t.logvar_pe.dim() == (1, 1);
        let ok = self.pe_anchor.dim() == (dims.token_count, dims.embed_dim)
            && self.ppe_anchor.len() == dims.pooled_dim
            && t.lora_a.dim() == (dims.token_count, rank)
            && t.lora_b.dim() == (rank, dims.embed_dim)
            && t.delta_ppe.len() == dims.pooled_dim
            && (shared_pe || t.logvar_pe.dim() == (dims.token_count, dims.embed_dim))
            && (t.logvar_ppe.len() == dims.pooled_dim || (shared_pe && t.logvar_ppe.len() == 1));
        if !ok {
            return Err(invalid_arg("prompt bank entry shapes do not match encoder dims/rank"));
        }
        Ok(())
    }

    pub fn pe_anchor(&self) -> ArrayView2<'_, f64> {
        self.pe_anchor.view()
    }

    pub fn ppe_anchor(&self) -> &Array1<f64> {
        &self.ppe_anchor
    }

    pub fn anchor_label(&self) -> &str {
        &self.anchor_label
    }

    /// `Δpe = lora_a · lora_b`
    pub fn delta_pe(&self) -> Array2<f64> {
        self.theta.lora_a.dot(&self.theta.lora_b)
    }

    /// MSE(Δpe) + MSE(Δppe)
    pub fn delta_penalty(&self) -> f64 {
        let d = self.delta_pe();
        let pe = d.mapv(|v| v * v).mean().unwrap_or(0.0);
        let ppe = self.theta.delta_ppe.mapv(|v| v * v).mean().unwrap_or(0.0);
        pe + ppe
    }

    /// Gradient of `scale · delta_penalty` with respect to Θ.
    pub fn delta_penalty_grad(&self, scale: f64) -> Theta {
        let mut g = Theta::zeros_like(&self.theta);
        let d = self.delta_pe();
        let gd = &d * (2.0 * scale / d.len() as f64);
        g.lora_a = gd.dot(&self.theta.lora_b.t());
        g.lora_b = self.theta.lora_a.t().dot(&gd);
        g.delta_ppe = &self.theta.delta_ppe * (2.0 * scale / self.theta.delta_ppe.len() as f64);
        g
    }

    /// Reparameterized draw of `(pe, ppe)` for a fixed noise sample.
    pub fn sample(&self, noise: &NoiseSample) -> Result<TextEmbedding> {
        if noise.eps_pe.dim() != self.pe_anchor.dim() || noise.eps_ppe.len() != self.ppe_anchor.len() {
            return Err(invalid_arg("noise shape does not match prompt bank entry"));
        }
        let sd_pe = self.theta.logvar_pe.mapv(|v| (0.5 * v).exp());
        let sd_ppe = self.theta.logvar_ppe.mapv(|v| (0.5 * v).exp());
        let pe = &self.pe_anchor + &self.delta_pe() + &(&noise.eps_pe * &sd_pe);
        let ppe = &self.ppe_anchor + &self.theta.delta_ppe + &(&noise.eps_ppe * &sd_ppe);
        Ok(TextEmbedding { pe, ppe })
    }

    /// Pulls gradients on a sampled `(pe, ppe)` back to Θ. Anchors and noise
    /// receive no gradient.
    pub fn sample_vjp(&self, noise: &NoiseSample, grad_pe: &Array2<f64>, grad_ppe: &Array1<f64>) -> Theta {
        let t = &self.theta;
        let mut g = Theta::zeros_like(t);
        g.lora_a = grad_pe.dot(&t.lora_b.t());
        g.lora_b = t.lora_a.t().dot(grad_pe);
        g.delta_ppe = grad_ppe.clone();
        // d/dlv exp(lv/2)·ε = ½·exp(lv/2)·ε
        let lv_pe = Zip::from(grad_pe)
            .and(&noise.eps_pe)
            .and_broadcast(&t.logvar_pe)
            .map_collect(|g, e, lv| 0.5 * (0.5 * lv).exp() * e * g);
        let lv_ppe = Zip::from(grad_ppe)
            .and(&noise.eps_ppe)
            .and_broadcast(&t.logvar_ppe)
            .map_collect(|g, e, lv| 0.5 * (0.5 * lv).exp() * e * g);
        if t.logvar_pe.dim() == (1, 1) {
            g.logvar_pe[[0, 0]] = lv_pe.sum();
        } else {
            g.logvar_pe = lv_pe;
        }
        if t.logvar_ppe.len() == 1 && grad_ppe.len() != 1 {
            g.logvar_ppe[0] = lv_ppe.sum();
        } else {
            g.logvar_ppe = lv_ppe;
        }
        g
    }
}

/// Standard-normal noise for one reparameterized draw.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample {
    pub eps_pe: Array2<f64>,
    pub eps_ppe: Array1<f64>,
    pub seed: u64,
}

impl NoiseSample {
    pub fn draw(dims: EncoderDims, seed: u64) -> Self {
        Self {
            eps_pe: seed::normal_array((dims.token_count, dims.embed_dim), seed::derive(&[seed, 0])),
            eps_ppe: seed::normal_array(dims.pooled_dim, seed::derive(&[seed, 1])),
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    pub rank: usize,
    /// Standard deviation of the initial `lora_a` entries.
    pub init_scale: f64,
    pub logvar_init: f64,
    pub logvar_mode: LogvarMode,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self { rank: 128, init_scale: 0.01, logvar_init: -6.0, logvar_mode: LogvarMode::PerEntry }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    entries: Vec<PromptBankEntry>,
    rank: usize,
    dims: EncoderDims,
    logvar_mode: LogvarMode,
}

impl PromptBank {
    /// Fresh bank: `lora_b = 0` so every delta starts at zero, anchors zero
    /// until discovery.
    pub fn new(channels: usize, dims: EncoderDims, cfg: &BankConfig, seed: u64) -> Result<Self> {
        if cfg.rank == 0 {
            return Err(invalid_arg("LoRA rank must be at least 1"));
        }
        if channels == 0 {
            return Err(invalid_arg("prompt bank needs at least one channel"));
        }
        if !cfg.init_scale.is_finite() || cfg.init_scale < 0.0 {
            return Err(invalid_arg("init_scale must be a finite nonnegative number"));
        }
        let lv = cfg.logvar_init.clamp(LOGVAR_MIN, LOGVAR_MAX);
        let (lv_pe_dim, lv_ppe_dim) = match cfg.logvar_mode {
            LogvarMode::PerEntry => ((dims.token_count, dims.embed_dim), dims.pooled_dim),
            LogvarMode::Shared => ((1, 1), 1),
        };
        let entries = (0..channels)
            .map(|c| {
                let lora_a: Array2<f64> =
                    seed::normal_array((dims.token_count, cfg.rank), seed::derive(&[seed, 40, c as u64]));
                PromptBankEntry {
                    pe_anchor: Array2::zeros((dims.token_count, dims.embed_dim)),
                    ppe_anchor: Array1::zeros(dims.pooled_dim),
                    anchor_label: String::new(),
                    theta: Theta {
                        lora_a: lora_a * cfg.init_scale,
                        lora_b: Array2::zeros((cfg.rank, dims.embed_dim)),
                        delta_ppe: Array1::zeros(dims.pooled_dim),
                        logvar_pe: Array2::from_elem(lv_pe_dim, lv),
                        logvar_ppe: Array1::from_elem(lv_ppe_dim, lv),
                    },
                }
            })
            .collect();
        Ok(Self { entries, rank: cfg.rank, dims, logvar_mode: cfg.logvar_mode })
    }

    pub fn from_entries(
        entries: Vec<PromptBankEntry>,
        rank: usize,
        dims: EncoderDims,
        logvar_mode: LogvarMode,
    ) -> Result<Self> {
        if entries.is_empty() {
            return Err(invalid_arg("prompt bank needs at least one entry"));
        }
        let (lv_pe, lv_ppe) = match logvar_mode {
            LogvarMode::PerEntry => ((dims.token_count, dims.embed_dim), dims.pooled_dim),
            LogvarMode::Shared => ((1, 1), 1),
        };
        for e in &entries {
            e.check_shapes(dims, rank)?;
            if e.theta.logvar_pe.dim() != lv_pe || e.theta.logvar_ppe.len() != lv_ppe {
                return Err(invalid_arg(format!("log-variance shapes do not match {logvar_mode:?} mode")));
            }
        }
        Ok(Self { entries, rank, dims, logvar_mode })
    }

    pub fn logvar_mode(&self) -> LogvarMode {
        self.logvar_mode
    }

    pub fn channels(&self) -> usize {
        self.entries.len()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dims(&self) -> EncoderDims {
        self.dims
    }

    pub fn entries(&self) -> &[PromptBankEntry] {
        &self.entries
    }

    pub fn entry(&self, c: usize) -> Result<&PromptBankEntry> {
        self.entries.get(c).ok_or_else(|| invalid_arg(format!("channel {c} out of range")))
    }

    /// Mutable access to a channel's trainable parameters only.
    pub fn theta_mut(&mut self, c: usize) -> Result<&mut Theta> {
        let n = self.entries.len();
        self.entries
            .get_mut(c)
            .map(|e| &mut e.theta)
            .ok_or_else(|| invalid_arg(format!("channel {c} out of range for {n} channels")))
    }

    pub fn anchor_labels(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.anchor_label.clone()).collect()
    }

    fn set_anchor(&mut self, c: usize, embedding: &TextEmbedding, label: &str) {
        let e = &mut self.entries[c];
        e.pe_anchor = embedding.pe.clone();
        e.ppe_anchor = embedding.ppe.clone();
        e.anchor_label = label.to_string();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelAssignment {
    pub channel: usize,
    pub class_index: usize,
    pub label: String,
    pub mean_purity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryReport {
    pub assignments: Vec<ChannelAssignment>,
    /// `mean_purity[class][channel]` with the identity basis.
    pub mean_purity: Vec<Vec<f64>>,
    pub images_per_class: usize,
    pub seed: u64,
}

/// Mean purity per channel (identity basis) of `images_per_class` generations
/// for each class name. Rows are classes.
pub fn class_purity_table(
    class_names: &[String],
    backends: &Backends,
    images_per_class: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let channels = backends.channels();
    par_map(class_names.len(), |k| {
        let emb = crate::backends::encode_text(backends.encoder.as_ref(), &class_names[k])?;
        let mut sums = vec![0.0; channels];
        for i in 0..images_per_class {
            let latent = seed::derive(&[seed, 100, i as u64]);
            let img = crate::backends::generate(backends.generator.as_ref(), &emb.pe.view(), &emb.ppe.view(), latent)?;
            let feat = crate::backends::extract_features(backends.extractor.as_ref(), &img.view())?;
            let z = feat.values();
            for (c, s) in sums.iter_mut().enumerate() {
                *s += purity_of_transformed(&z, c)?.value;
            }
        }
        Ok(sums.into_iter().map(|s| s / images_per_class as f64).collect())
    })
}

/// Anchors every channel to the class name whose generations reach the
/// highest mean purity on it (identity basis). Ties go to the lower class
/// index.
pub fn discover_anchors(
    bank: &mut PromptBank,
    class_names: &[String],
    backends: &Backends,
    images_per_class: usize,
    seed: u64,
) -> Result<DiscoveryReport> {
    if class_names.is_empty() {
        return Err(invalid_arg("discovery needs at least one class name"));
    }
    if images_per_class == 0 {
        return Err(invalid_arg("images_per_class must be at least 1"));
    }
    if backends.channels() != bank.channels() {
        return Err(invalid_arg("prompt bank and extractor disagree on channel count"));
    }
    if backends.encoder.dims() != bank.dims() {
        return Err(invalid_arg("prompt bank and encoder disagree on embedding dims"));
    }
    let table = class_purity_table(class_names, backends, images_per_class, seed)?;
    let mut assignments = Vec::with_capacity(bank.channels());
    for c in 0..bank.channels() {
        let mut best = 0;
        for k in 1..class_names.len() {
            if table[k][c] > table[best][c] {
                best = k;
            }
        }
        let emb = crate::backends::encode_text(backends.encoder.as_ref(), &class_names[best])?;
        bank.set_anchor(c, &emb, &class_names[best]);
        assignments.push(ChannelAssignment {
            channel: c,
            class_index: best,
            label: class_names[best].clone(),
            mean_purity: table[best][c],
        });
    }
    Ok(DiscoveryReport { assignments, mean_purity: table, images_per_class, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{ToyWorld, ToyWorldConfig};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn dims() -> EncoderDims {
        EncoderDims { token_count: 2, embed_dim: 3, pooled_dim: 2 }
    }

    fn small_entry(rank: usize) -> PromptBankEntry {
        let bank = PromptBank::new(1, dims(), &BankConfig { rank, ..Default::default() }, 1).unwrap();
        bank.entries[0].clone()
    }

    #[test]
    fn fresh_bank_has_zero_deltas() {
        let bank = PromptBank::new(3, dims(), &BankConfig::default(), 4).unwrap();
        for e in bank.entries() {
            assert!(e.delta_pe().iter().all(|v| *v == 0.0));
            assert!(e.theta.logvar_pe.iter().all(|v| *v == -6.0));
            assert!(e.theta.lora_a.iter().any(|v| *v != 0.0));
        }
        assert_eq!(bank.rank(), 128);
        let bad = BankConfig { rank: 0, ..Default::default() };
        assert!(PromptBank::new(3, dims(), &bad, 0).is_err());
    }

    #[test]
    fn fresh_sample_is_anchor_plus_small_noise() {
        let e = small_entry(2);
        let noise = NoiseSample::draw(dims(), 3);
        let s = e.sample(&noise).unwrap();
        let sd = (-3.0f64).exp();
        for (got, eps) in s.pe.iter().zip(noise.eps_pe.iter()) {
            assert_abs_diff_eq!(*got, sd * eps, epsilon = 1e-15);
        }
    }

    #[test]
    fn lora_product_hand_example() {
        let mut e = PromptBankEntry {
            pe_anchor: Array2::zeros((2, 2)),
            ppe_anchor: Array1::zeros(1),
            anchor_label: String::new(),
            theta: Theta {
                lora_a: array![[1.0], [2.0]],
                lora_b: array![[3.0, 4.0]],
                delta_ppe: Array1::zeros(1),
                logvar_pe: Array2::zeros((2, 2)),
                logvar_ppe: Array1::zeros(1),
            },
        };
        assert_eq!(e.delta_pe(), array![[3.0, 4.0], [6.0, 8.0]]);
        // mean of squares: (9+16+36+64)/4
        assert_abs_diff_eq!(e.delta_penalty(), 31.25);
        e.theta.lora_a *= 2.0;
        e.theta.lora_b /= 2.0;
        assert_abs_diff_eq!(e.delta_penalty(), 31.25);
    }

    #[test]
    fn penalty_of_constant_delta() {
        let e = PromptBankEntry {
            pe_anchor: Array2::zeros((2, 2)),
            ppe_anchor: Array1::zeros(2),
            anchor_label: String::new(),
            theta: Theta {
                lora_a: array![[1.0], [1.0]],
                lora_b: array![[2.0, 2.0]],
                delta_ppe: Array1::zeros(2),
                logvar_pe: Array2::zeros((2, 2)),
                logvar_ppe: Array1::zeros(2),
            },
        };
        assert_abs_diff_eq!(e.delta_penalty(), 4.0);
    }

    #[test]
    fn sampling_formula_cases() {
        let mut e = small_entry(1);
        e.theta.lora_b.fill(0.5);
        e.theta.logvar_pe.fill(0.0);
        e.theta.logvar_ppe.fill(-20.0);
        e.theta.delta_ppe.fill(0.5);
        let noise = NoiseSample::draw(dims(), 8);
        let s = e.sample(&noise).unwrap();
        let want = e.delta_pe() + &noise.eps_pe;
        assert_eq!(s.pe, want);
        for v in s.ppe.iter() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-4);
        }
        e.theta.logvar_pe.fill(-20.0);
        e.theta.lora_b.fill(0.0);
        let s = e.sample(&noise).unwrap();
        assert!(s.pe.iter().all(|v| v.abs() < 1e-4));
        let wrong = NoiseSample::draw(EncoderDims { token_count: 3, ..dims() }, 1);
        assert!(e.sample(&wrong).is_err());
    }

    #[test]
    fn sample_vjp_matches_finite_differences() {
        for mode in [LogvarMode::PerEntry, LogvarMode::Shared] {
            let cfg = BankConfig { rank: 2, init_scale: 0.5, logvar_init: -1.0, logvar_mode: mode };
            let mut e = PromptBank::new(1, dims(), &cfg, 2).unwrap().entries[0].clone();
            e.theta.lora_b = seed::normal_array((2, 3), 9);
            e.theta.delta_ppe = seed::normal_array(2, 10);
            let noise = NoiseSample::draw(dims(), 5);
            let wpe: Array2<f64> = seed::normal_array((2, 3), 11);
            let wppe: Array1<f64> = seed::normal_array(2, 12);
            let f = |e: &PromptBankEntry| {
                let s = e.sample(&noise).unwrap();
                (&s.pe * &wpe).sum() + (&s.ppe * &wppe).sum() + 0.7 * e.delta_penalty()
            };
            let mut grad = e.sample_vjp(&noise, &wpe, &wppe);
            grad.add_scaled(&e.delta_penalty_grad(0.7), 1.0);
            let h = 1e-6;
            for t in 0..5 {
                for k in 0..grad.slices()[t].len() {
                    let mut p = e.clone();
                    p.theta.slices_mut()[t][k] += h;
                    let mut m = e.clone();
                    m.theta.slices_mut()[t][k] -= h;
                    let fd = (f(&p) - f(&m)) / (2.0 * h);
                    let an = grad.slices()[t][k];
                    assert!((fd - an).abs() <= 1e-6 + 1e-4 * fd.abs(), "{} [{k}] fd={fd} an={an}", Theta::NAMES[t]);
                }
            }
        }
    }

    #[test]
    fn reparameterization_statistics() {
        let mut e = small_entry(1);
        e.pe_anchor = array![[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]];
        e.theta.lora_b.fill(0.25);
        e.theta.logvar_pe = array![[-1.0, 0.0, 0.5], [-2.0, 1.0, 0.0]];
        let mean = &e.pe_anchor + &e.delta_pe();
        let n = 10_000;
        let mut sum = Array2::<f64>::zeros((2, 3));
        let mut sq = Array2::<f64>::zeros((2, 3));
        for s in 0..n {
            let x = e.sample(&NoiseSample::draw(dims(), s)).unwrap().pe;
            sum += &x;
            sq += &(&x * &x);
        }
        let m = &sum / n as f64;
        let var = &sq / n as f64 - &(&m * &m);
        for idx in [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)] {
            let true_var = e.theta.logvar_pe[idx].exp();
            let se = (true_var / n as f64).sqrt();
            assert!((m[idx] - mean[idx]).abs() < 3.0 * se + 1e-12, "mean {idx:?}");
            assert!((var[idx] - true_var).abs() / true_var < 0.1, "var {idx:?}");
        }
    }

    #[test]
    fn discovery_recovers_planted_concepts() {
        let world = ToyWorld::build(&ToyWorldConfig::default()).unwrap();
        let backends = world.backends();
        let names = world.concept_names();
        let mut bank = PromptBank::new(8, backends.encoder.dims(), &BankConfig { rank: 4, ..Default::default() }, 0).unwrap();
        let report = discover_anchors(&mut bank, &names, &backends, 4, 1).unwrap();
        for a in &report.assignments {
            assert_eq!(a.label, format!("class_{}", a.channel));
        }
        assert_eq!(bank.anchor_labels(), names);
        assert_eq!(bank.entry(2).unwrap().pe_anchor(), backends.encoder.encode("class_2").unwrap().pe.view());
    }

    #[test]
    fn discovery_single_class_and_ties() {
        let world = ToyWorld::build(&ToyWorldConfig::default()).unwrap();
        let backends = world.backends();
        let mut bank = PromptBank::new(8, backends.encoder.dims(), &BankConfig { rank: 4, ..Default::default() }, 0).unwrap();
        let one = vec!["class_3".to_string()];
        let r = discover_anchors(&mut bank, &one, &backends, 2, 0).unwrap();
        assert!(r.assignments.iter().all(|a| a.label == "class_3"));

        // The same name twice yields identical purities; the first index wins.
        let dup = vec!["class_1".to_string(), "class_1".to_string()];
        let r = discover_anchors(&mut bank, &dup, &backends, 2, 0).unwrap();
        assert!(r.assignments.iter().all(|a| a.class_index == 0));

        assert!(discover_anchors(&mut bank, &[], &backends, 2, 0).is_err());
    }
}
