//! Browser demo over the toy world: concept heatmaps with a thresholded box,
//! purity under a two-channel rotation of the basis, and step-wise training.
//!
//! Every method returns a JSON string so the same code runs under native tests.

use ndarray::{Array2, ArrayView3};
use prodg::backends::toy::{ToyWorld, ToyWorldConfig};
use prodg::backends::{extract_features, Backends};
use prodg::explainer::{extract_bbox, heatmap_from_transformed, BoundingBox, Connectivity};
use prodg::orthobasis::{mix_channels, purity_of_transformed, OrthogonalBasis};
use prodg::promptbank::{discover_anchors, BankConfig, PromptBank};
use prodg::trainer::{phase_bank_step, phase_for_step, phase_u_step, Phase, StepMetrics, TrainConfig, TrainState};
use prodg::{ProdgError, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const DEMO_RANK: usize = 8;
const DEMO_WARMUP: usize = 20;

#[derive(Debug, Serialize)]
pub struct HeatmapView {
    pub size: usize,
    /// Image as row-major RGBA bytes, min-max normalized.
    pub rgba: Vec<u8>,
    pub grid: usize,
    pub values: Vec<f64>,
    pub upsampled: Vec<f64>,
    pub bbox: Option<BoundingBox>,
    pub purity: f64,
}

#[derive(Debug, Serialize)]
pub struct SweepPoint {
    pub angle: f64,
    pub purity_first: f64,
    pub purity_second: f64,
}

#[wasm_bindgen]
pub struct Demo {
    world: ToyWorld,
    backends: Backends,
    state: TrainState,
    config: TrainConfig,
}

impl Demo {
    pub fn build(seed: u64) -> Result<Self> {
        let world = ToyWorld::build(&ToyWorldConfig { seed, ..Default::default() })?;
        let backends = world.backends();
        let channels = world.config().channels;
        let bank_cfg = BankConfig { rank: DEMO_RANK, ..Default::default() };
        let mut bank = PromptBank::new(channels, backends.encoder.dims(), &bank_cfg, seed)?;
        discover_anchors(&mut bank, &world.concept_names(), &backends, 2, seed)?;
        let state = TrainState::new(OrthogonalBasis::new(channels)?, bank)?;
        let config = TrainConfig { iterations: usize::MAX, warmup: DEMO_WARMUP, batch_size: 8, seed, ..Default::default() };
        Ok(Self { world, backends, state, config })
    }

    fn channels(&self) -> usize {
        self.world.config().channels
    }

    fn check_channel(&self, c: usize) -> Result<()> {
        if c >= self.channels() {
            return Err(ProdgError::InvalidArgument(format!("channel {c} out of range")));
        }
        Ok(())
    }

    /// Features of a toy image under the current basis.
    fn transformed(&self, concept: usize, rows: (usize, usize), cols: (usize, usize)) -> Result<(ndarray::Array3<f64>, ndarray::Array3<f64>)> {
        let img = self.world.concept_image_in_region(concept, rows.0..rows.1, cols.0..cols.1)?;
        let feat = extract_features(&*self.backends.extractor, &img.view())?;
        let z = self.state.basis.apply_values(&feat.values())?;
        Ok((img, z))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn heatmap_view(
        &self,
        concept: usize,
        rows: (usize, usize),
        cols: (usize, usize),
        threshold: f64,
        connectivity: Connectivity,
    ) -> Result<HeatmapView> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(ProdgError::InvalidArgument(format!("threshold {threshold} outside [0, 1]")));
        }
        let (img, z) = self.transformed(concept, rows, cols)?;
        let size = img.dim().1;
        let map = heatmap_from_transformed(&z.view(), concept, (size, img.dim().2))?;
        Ok(HeatmapView {
            size,
            rgba: to_rgba(&img.view()),
            grid: map.values.nrows(),
            values: map.values.iter().copied().collect(),
            upsampled: map.upsampled.iter().copied().collect(),
            bbox: extract_bbox(&map.upsampled.view(), threshold, connectivity),
            purity: purity_of_transformed(&z.view(), concept)?.value,
        })
    }

    /// Purity of both concepts' images while channels `i` and `j` of the
    /// current basis are rotated into each other by angles in [0, π/2].
    pub fn rotation_sweep(&self, i: usize, j: usize, steps: usize) -> Result<Vec<SweepPoint>> {
        self.check_channel(i)?;
        self.check_channel(j)?;
        if i == j || steps < 2 {
            return Err(ProdgError::InvalidArgument("need two distinct channels and at least two steps".into()));
        }
        let g = self.world.config().image_size / self.world.config().patch;
        let (_, zi) = self.transformed(i, (0, g), (0, g))?;
        let (_, zj) = self.transformed(j, (0, g), (0, g))?;
        (0..steps)
            .map(|s| {
                let angle = std::f64::consts::FRAC_PI_2 * s as f64 / (steps - 1) as f64;
                let r = plane_rotation(self.channels(), i, j, angle);
                Ok(SweepPoint {
                    angle,
                    purity_first: purity_of_transformed(&mix_channels(&r.view(), &zi.view())?.view(), i)?.value,
                    purity_second: purity_of_transformed(&mix_channels(&r.view(), &zj.view())?.view(), j)?.value,
                })
            })
            .collect()
    }

    /// Runs `n` schedule steps: basis-only during warmup, then alternating.
    pub fn train_steps(&mut self, n: usize) -> Result<Vec<StepMetrics>> {
        (0..n)
            .map(|_| match phase_for_step(self.state.step, self.config.warmup) {
                Phase::Basis => phase_u_step(&mut self.state, &self.backends, &self.config),
                Phase::Bank => phase_bank_step(&mut self.state, &self.backends, &self.config),
            })
            .collect()
    }
}

fn plane_rotation(n: usize, i: usize, j: usize, angle: f64) -> Array2<f64> {
    let mut r = Array2::eye(n);
    let (s, c) = angle.sin_cos();
    r[[i, i]] = c;
    r[[j, j]] = c;
    r[[i, j]] = -s;
    r[[j, i]] = s;
    r
}

fn to_rgba(img: &ArrayView3<f64>) -> Vec<u8> {
    let (_, h, w) = img.dim();
    let (lo, hi) = img.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((((img[[c, y, x]] - lo) / span) * 255.0).round() as u8);
            }
            out.push(255);
        }
    }
    out
}

fn js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let value = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> std::result::Result<Demo, JsError> {
        Demo::build(u64::from(seed)).map_err(|e| JsError::new(&e.to_string()))
    }

    #[wasm_bindgen(getter)]
    pub fn concepts(&self) -> usize {
        self.channels()
    }

    #[wasm_bindgen(getter)]
    pub fn grid(&self) -> usize {
        self.world.config().image_size / self.world.config().patch
    }

    #[wasm_bindgen(getter)]
    pub fn step(&self) -> usize {
        self.state.step
    }

    /// Concept painted on patch rows `[r0, r1)` and cols `[c0, c1)`.
    #[allow(clippy::too_many_arguments)]
    pub fn heatmap(
        &self,
        concept: usize,
        r0: usize,
        r1: usize,
        c0: usize,
        c1: usize,
        threshold: f64,
        eight_connected: bool,
    ) -> std::result::Result<String, JsError> {
        let conn = if eight_connected { Connectivity::Eight } else { Connectivity::Four };
        js(self.heatmap_view(concept, (r0, r1), (c0, c1), threshold, conn))
    }

    pub fn sweep(&self, i: usize, j: usize, steps: usize) -> std::result::Result<String, JsError> {
        js(self.rotation_sweep(i, j, steps))
    }

    pub fn train(&mut self, n: usize) -> std::result::Result<String, JsError> {
        js(self.train_steps(n))
    }
}
