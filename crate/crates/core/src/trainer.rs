//! Alternating optimization of the basis generator and the prompt bank.
//!
//! Warmup steps update only the basis. Afterwards basis steps and bank steps
//! alternate one-for-one, basis first. Every random draw of step `s` is keyed
//! by `(seed, s, …)`, so a run resumed from a checkpoint replays exactly.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array3, Ix2};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::backends::{Backends, Image, TextEmbedding};
use crate::error::{invalid_arg, ProdgError, Result};
use crate::feature::gap;
use crate::objectives::{combined_prompt_loss, diversity_groups, loss_u, LossConfig};
use crate::optim::{AdamState, ThetaAdam};
use crate::orthobasis::{mix_channels, purity_of_transformed, OrthogonalBasis, PurityEval};
use crate::par::par_map;
use crate::promptbank::{NoiseSample, PromptBank, Theta};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Total steps; each basis or bank step counts as one iteration.
    pub iterations: usize,
    /// Leading steps that update only the basis.
    pub warmup: usize,
    /// Images per batch (B).
    pub batch_size: usize,
    /// Variations generated per sampled channel (K).
    pub k: usize,
    pub lr_u: f64,
    pub lr_bank: f64,
    pub seed: u64,
    pub loss: LossConfig,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Restricts sampling to these channels; `None` trains all of them.
    pub channels_to_train: Option<Vec<usize>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 15_000,
            warmup: 1_500,
            batch_size: 16,
            k: 2,
            lr_u: 1e-3,
            lr_bank: 1e-2,
            seed: 0,
            loss: LossConfig::default(),
            checkpoint_every: 1_000,
            channels_to_train: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        let bad = |m: String| Err(ProdgError::InvalidConfig(m));
        if self.warmup > self.iterations {
            return bad(format!("warmup {} exceeds iterations {}", self.warmup, self.iterations));
        }
        if self.k < 2 {
            return bad("K must be at least 2 for the pairwise diversity term".into());
        }
        if self.batch_size < self.k || !self.batch_size.is_multiple_of(self.k) {
            return bad(format!("batch size {} must be a positive multiple of K={}", self.batch_size, self.k));
        }
        for (name, lr) in [("lr_u", self.lr_u), ("lr_bank", self.lr_bank)] {
            if !lr.is_finite() || lr <= 0.0 {
                return bad(format!("{name} must be positive and finite"));
            }
        }
        self.loss.validate()?;
        if let Some(sel) = &self.channels_to_train {
            if sel.is_empty() {
                return bad("channels_to_train must not be empty".into());
            }
            let mut seen = vec![false; channels];
            for &c in sel {
                if c >= channels || seen[c] {
                    return bad(format!("channels_to_train has invalid or repeated channel {c}"));
                }
                seen[c] = true;
            }
        }
        Ok(())
    }

    pub fn trainable_channels(&self, channels: usize) -> Vec<usize> {
        match &self.channels_to_train {
            Some(sel) => sel.clone(),
            None => (0..channels).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "U")]
    Basis,
    #[serde(rename = "bank")]
    Bank,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Basis => "U",
            Phase::Bank => "bank",
        }
    }
}

pub fn phase_for_step(step: usize, warmup: usize) -> Phase {
    if step < warmup || (step - warmup).is_multiple_of(2) {
        Phase::Basis
    } else {
        Phase::Bank
    }
}

/// One generated image of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchItem {
    pub channel: usize,
    pub variation: usize,
    pub noise_seed: u64,
    pub latent_seed: u64,
}

impl BatchItem {
    pub fn new(run_seed: u64, channel: usize, step: u64, variation: usize) -> Self {
        let c = channel as u64;
        let k = variation as u64;
        Self {
            channel,
            variation,
            noise_seed: seed::derive(&[run_seed, c, step, k, 11]),
            latent_seed: seed::derive(&[run_seed, c, step, k, 12]),
        }
    }
}

/// Samples `B/K` distinct channels (fewer if fewer are trainable) and `K`
/// variations of each; items of a channel are contiguous.
pub fn plan_batch(config: &TrainConfig, channels: usize, step: usize) -> Vec<BatchItem> {
    let pool = config.trainable_channels(channels);
    let unique = (config.batch_size / config.k).min(pool.len());
    let mut rng = seed::rng(seed::derive(&[config.seed, step as u64, 7]));
    let picked = sample(&mut rng, pool.len(), unique);
    let mut items = Vec::with_capacity(unique * config.k);
    for idx in picked.iter() {
        for v in 0..config.k {
            items.push(BatchItem::new(config.seed, pool[idx], step as u64, v));
        }
    }
    items
}

/// Forward pass of one batch item through bank, generator, backbone and basis.
#[derive(Debug, Clone)]
pub struct ItemForward {
    pub noise: NoiseSample,
    pub embedding: TextEmbedding,
    pub image: Image,
    pub features: Array3<f64>,
    pub purity: PurityEval,
    pub pooled: Array1<f64>,
}

pub fn forward_item(
    basis: &OrthogonalBasis,
    bank: &PromptBank,
    backends: &Backends,
    item: &BatchItem,
) -> Result<ItemForward> {
    let noise = NoiseSample::draw(bank.dims(), item.noise_seed);
    let embedding = bank.entry(item.channel)?.sample(&noise)?;
    let image = crate::backends::generate(
        backends.generator.as_ref(),
        &embedding.pe.view(),
        &embedding.ppe.view(),
        item.latent_seed,
    )?;
    if image.iter().any(|v| !v.is_finite()) {
        return Err(ProdgError::Numerical { step: 0, message: "non-finite generated image".into() });
    }
    let features = crate::backends::extract_features(backends.extractor.as_ref(), &image.view())?.into_values();
    let z = mix_channels(&basis.u()?, &features.view())?;
    let purity = purity_of_transformed(&z.view(), item.channel)?;
    let pooled = gap(&features.view());
    Ok(ItemForward { noise, embedding, image, features, purity, pooled })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub mean_purity: f64,
    pub loss_u: f64,
    pub loss_reg: f64,
    pub loss_div: f64,
    pub combined: f64,
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub phase: Phase,
    pub mean_purity: f64,
    pub loss_u: f64,
    pub loss_reg: f64,
    pub loss_div: f64,
    pub combined: f64,
}

impl StepMetrics {
    fn new(step: usize, phase: Phase, m: &BatchMetrics) -> Self {
        Self {
            step,
            phase,
            mean_purity: m.mean_purity,
            loss_u: m.loss_u,
            loss_reg: m.loss_reg,
            loss_div: m.loss_div,
            combined: m.combined,
        }
    }

    fn is_finite(&self) -> bool {
        [self.mean_purity, self.loss_u, self.loss_reg, self.loss_div, self.combined]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn forward_batch(
    basis: &OrthogonalBasis,
    bank: &PromptBank,
    backends: &Backends,
    items: &[BatchItem],
) -> Result<Vec<ItemForward>> {
    if items.is_empty() {
        return Err(invalid_arg("empty batch"));
    }
    par_map(items.len(), |i| forward_item(basis, bank, backends, &items[i]))
}

/// Pooled features grouped by channel in batch order.
fn diversity_input(items: &[BatchItem], fwd: &[ItemForward]) -> (Vec<Vec<Array1<f64>>>, Vec<(usize, usize)>) {
    let mut groups: Vec<Vec<Array1<f64>>> = Vec::new();
    let mut index = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let start_new = i == 0 || items[i - 1].channel != item.channel;
        if start_new {
            groups.push(Vec::new());
        }
        let g = groups.len() - 1;
        index.push((g, groups[g].len()));
        groups[g].push(fwd[i].pooled.clone());
    }
    (groups, index)
}

fn batch_metrics(
    items: &[BatchItem],
    fwd: &[ItemForward],
    bank: &PromptBank,
    loss: &LossConfig,
) -> Result<(BatchMetrics, Vec<Vec<Array1<f64>>>, Vec<(usize, usize)>)> {
    let purities: Vec<f64> = fwd.iter().map(|f| f.purity.value).collect();
    let l_u = loss_u(&purities)?;
    let channels: Vec<usize> = items.iter().map(|i| i.channel).collect();
    let l_reg = crate::objectives::loss_reg(bank, &channels)?;
    let (groups, index) = diversity_input(items, fwd);
    let (l_div, div_grads) = diversity_groups(&groups)?;
    let combined = if [l_u, l_reg, l_div].iter().all(|v| v.is_finite()) {
        combined_prompt_loss(l_u, l_reg, l_div, loss)?
    } else {
        f64::NAN
    };
    let metrics = BatchMetrics { mean_purity: -l_u, loss_u: l_u, loss_reg: l_reg, loss_div: l_div, combined };
    Ok((metrics, div_grads, index))
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// `L_U` on a fixed batch and its gradient with respect to the generator `A`.
pub fn basis_loss_and_grad(
    basis: &OrthogonalBasis,
    bank: &PromptBank,
    backends: &Backends,
    items: &[BatchItem],
    loss: &LossConfig,
) -> Result<(BatchMetrics, Array2<f64>)> {
    let fwd = forward_batch(basis, bank, backends, items)?;
    let (metrics, _, _) = batch_metrics(items, &fwd, bank, loss)?;
    let n = basis.channels();
    let scale = -1.0 / items.len() as f64;
    let mut grad_u = Array2::<f64>::zeros((n, n));
    for f in &fwd {
        let (i, j) = f.purity.location;
        let phi = f.features.slice(s![.., i, j]).to_owned();
        grad_u.scaled_add(scale, &outer(&f.purity.grad_z, &phi));
    }
    let grad_a = basis.generator_grad(&grad_u.view())?;
    Ok((metrics, grad_a))
}

/// Per-term, already weighted gradients of the prompt objective, keyed by
/// channel. A disabled term has no entries at all.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TermGradients {
    pub purity: BTreeMap<usize, Theta>,
    pub reg: BTreeMap<usize, Theta>,
    pub div: BTreeMap<usize, Theta>,
}

impl TermGradients {
    pub fn total(&self) -> BTreeMap<usize, Theta> {
        let mut out: BTreeMap<usize, Theta> = BTreeMap::new();
        for part in [&self.purity, &self.reg, &self.div] {
            for (c, g) in part {
                match out.get_mut(c) {
                    Some(acc) => acc.add_scaled(g, 1.0),
                    None => {
                        out.insert(*c, g.clone());
                    }
                }
            }
        }
        out
    }
}

fn accumulate(map: &mut BTreeMap<usize, Theta>, c: usize, g: Theta) {
    match map.get_mut(&c) {
        Some(acc) => acc.add_scaled(&g, 1.0),
        None => {
            map.insert(c, g);
        }
    }
}

/// Pulls a feature-space gradient of one item back to its channel's Θ.
fn item_theta_grad(
    bank: &PromptBank,
    backends: &Backends,
    item: &BatchItem,
    f: &ItemForward,
    grad_features: &Array3<f64>,
) -> Result<Theta> {
    let grad_image = backends.extractor.extract_vjp(&f.image.view(), &grad_features.view())?;
    let (gpe, gppe) = backends.generator.generate_vjp(
        &f.embedding.pe.view(),
        &f.embedding.ppe.view(),
        item.latent_seed,
        &grad_image.view(),
    )?;
    Ok(bank.entry(item.channel)?.sample_vjp(&f.noise, &gpe, &gppe))
}

/// Combined prompt objective on a fixed batch and its per-term gradients
/// with respect to every sampled channel's Θ. The basis is held fixed.
pub fn bank_loss_and_grad(
    basis: &OrthogonalBasis,
    bank: &PromptBank,
    backends: &Backends,
    items: &[BatchItem],
    loss: &LossConfig,
) -> Result<(BatchMetrics, TermGradients)> {
    loss.validate()?;
    let fwd = forward_batch(basis, bank, backends, items)?;
    let (metrics, div_grads, div_index) = batch_metrics(items, &fwd, bank, loss)?;
    let (w_u, w_reg, w_div) = loss.weights();
    let b = items.len() as f64;
    let u = basis.u()?;

    let per_item: Vec<(Option<Theta>, Option<Theta>)> = par_map(items.len(), |i| {
        let f = &fwd[i];
        let item = &items[i];
        let dims = f.features.dim();
        let purity_grad = if w_u != 0.0 {
            let (r, c) = f.purity.location;
            let g_phi = u.t().dot(&f.purity.grad_z) * (-w_u / b);
            let mut gf = Array3::<f64>::zeros(dims);
            gf.slice_mut(s![.., r, c]).assign(&g_phi);
            Some(item_theta_grad(bank, backends, item, f, &gf)?)
        } else {
            None
        };
        let div_grad = if w_div != 0.0 {
            let (g, k) = div_index[i];
            let gv = &div_grads[g][k] * w_div;
            let hw = (dims.1 * dims.2) as f64;
            let mut gf = Array3::<f64>::zeros(dims);
            for (ch, mut plane) in gf.outer_iter_mut().enumerate() {
                plane.fill(gv[ch] / hw);
            }
            Some(item_theta_grad(bank, backends, item, f, &gf)?)
        } else {
            None
        };
        Ok((purity_grad, div_grad))
    })?;

    let mut grads = TermGradients::default();
    for (item, (pg, dg)) in items.iter().zip(per_item) {
        if let Some(g) = pg {
            accumulate(&mut grads.purity, item.channel, g);
        }
        if let Some(g) = dg {
            accumulate(&mut grads.div, item.channel, g);
        }
    }
    if w_reg != 0.0 {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for item in items {
            *counts.entry(item.channel).or_default() += 1;
        }
        for (c, n) in counts {
            let g = bank.entry(c)?.delta_penalty_grad(w_reg * n as f64 / b);
            grads.reg.insert(c, g);
        }
    }
    Ok((metrics, grads))
}

/// Complete resumable optimization state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub basis: OrthogonalBasis,
    pub bank: PromptBank,
    pub adam_a: AdamState<Ix2>,
    pub adam_bank: Vec<ThetaAdam>,
    pub history: Vec<StepMetrics>,
}

impl TrainState {
    pub fn new(basis: OrthogonalBasis, bank: PromptBank) -> Result<Self> {
        if basis.channels() != bank.channels() {
            return Err(invalid_arg("basis and prompt bank disagree on channel count"));
        }
        let adam_a = AdamState::zeros_like(&basis.generator().to_owned());
        let adam_bank = bank.entries().iter().map(|e| ThetaAdam::zeros_like(&e.theta)).collect();
        Ok(Self { step: 0, basis, bank, adam_a, adam_bank, history: Vec::new() })
    }

    pub fn channels(&self) -> usize {
        self.basis.channels()
    }
}

fn numerical(step: usize, what: &str) -> ProdgError {
    ProdgError::Numerical { step, message: format!("non-finite {what}") }
}

fn at_step(step: usize) -> impl Fn(ProdgError) -> ProdgError {
    move |e| match e {
        ProdgError::Numerical { message, .. } => ProdgError::Numerical { step, message },
        other => other,
    }
}

fn check_dims(state: &TrainState, backends: &Backends) -> Result<()> {
    if state.channels() != backends.channels() {
        return Err(invalid_arg(format!(
            "state has {} channels, extractor has {}",
            state.channels(),
            backends.channels()
        )));
    }
    if state.bank.dims() != backends.encoder.dims() {
        return Err(invalid_arg("prompt bank dims do not match the encoder"));
    }
    backends.check_compatible()
}

/// Freezes the bank, samples a batch and takes one Adam step on `A`.
pub fn phase_u_step(state: &mut TrainState, backends: &Backends, config: &TrainConfig) -> Result<StepMetrics> {
    let step = state.step;
    let items = plan_batch(config, state.channels(), step);
    let (metrics, grad_a) =
        basis_loss_and_grad(&state.basis, &state.bank, backends, &items, &config.loss).map_err(at_step(step))?;
    let record = StepMetrics::new(step, Phase::Basis, &metrics);
    if !record.is_finite() {
        return Err(numerical(step, "loss"));
    }
    if grad_a.iter().any(|v| !v.is_finite()) {
        return Err(numerical(step, "basis gradient"));
    }
    let mut a = state.basis.generator().to_owned();
    let mut adam = state.adam_a.clone();
    adam.step(&mut a, &grad_a, config.lr_u);
    if a.iter().any(|v| !v.is_finite()) {
        return Err(numerical(step, "basis update"));
    }
    state.adam_a = adam;
    *state.basis.generator_mut() = a;
    state.basis.recompute_u()?;
    state.history.push(record);
    state.step += 1;
    Ok(record)
}

/// Freezes `U`, samples a batch and takes one Adam step on the Θ of every
/// sampled channel.
pub fn phase_bank_step(state: &mut TrainState, backends: &Backends, config: &TrainConfig) -> Result<StepMetrics> {
    let step = state.step;
    if step < config.warmup {
        return Err(ProdgError::InvalidState(format!(
            "bank step requested at step {step} inside the {}-step warmup",
            config.warmup
        )));
    }
    let items = plan_batch(config, state.channels(), step);
    let (metrics, grads) =
        bank_loss_and_grad(&state.basis, &state.bank, backends, &items, &config.loss).map_err(at_step(step))?;
    let record = StepMetrics::new(step, Phase::Bank, &metrics);
    if !record.is_finite() {
        return Err(numerical(step, "loss"));
    }
    let total = grads.total();
    if total.values().any(|g| !g.is_finite()) {
        return Err(numerical(step, "prompt gradient"));
    }
    let mut updates = Vec::with_capacity(total.len());
    for (c, g) in &total {
        let mut theta = state.bank.entry(*c)?.theta.clone();
        let mut adam = state.adam_bank[*c].clone();
        adam.step(&mut theta, g, config.lr_bank);
        theta.clamp_logvars();
        if !theta.is_finite() {
            return Err(numerical(step, "prompt update"));
        }
        updates.push((*c, theta, adam));
    }
    for (c, theta, adam) in updates {
        *state.bank.theta_mut(c)? = theta;
        state.adam_bank[c] = adam;
    }
    state.history.push(record);
    state.step += 1;
    Ok(record)
}

/// Hooks for metric logging and checkpoint persistence.
pub trait TrainObserver {
    fn on_step(&mut self, _metrics: &StepMetrics) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

/// Runs the schedule from `state.step` up to `config.iterations`, calling
/// the observer after each step, every `checkpoint_every` steps, and once at
/// the end. A non-finite loss aborts before the bad update is applied.
pub fn train(
    config: &TrainConfig,
    backends: &Backends,
    mut state: TrainState,
    observer: &mut dyn TrainObserver,
) -> Result<TrainState> {
    config.validate(state.channels())?;
    check_dims(&state, backends)?;
    let mut last_checkpoint = None;
    while state.step < config.iterations {
        let metrics = match phase_for_step(state.step, config.warmup) {
            Phase::Basis => phase_u_step(&mut state, backends, config)?,
            Phase::Bank => phase_bank_step(&mut state, backends, config)?,
        };
        observer.on_step(&metrics)?;
        if config.checkpoint_every > 0 && state.step.is_multiple_of(config.checkpoint_every) {
            observer.on_checkpoint(&state)?;
            last_checkpoint = Some(state.step);
        }
    }
    if last_checkpoint != Some(state.step) {
        observer.on_checkpoint(&state)?;
    }
    Ok(state)
}

/// Loads a checkpoint and checks it against the backends and run seed.
pub fn load_for_resume(dir: &std::path::Path, config: &TrainConfig, backends: &Backends) -> Result<TrainState> {
    let (state, manifest) = crate::checkpoint::load(dir)?;
    manifest.check_backends(backends)?;
    if manifest.seed != config.seed {
        return Err(ProdgError::Load(format!(
            "checkpoint was written with seed {}, config has {}",
            manifest.seed, config.seed
        )));
    }
    Ok(state)
}

/// Continues training from a checkpoint directory.
pub fn resume(
    dir: &std::path::Path,
    config: &TrainConfig,
    backends: &Backends,
    observer: &mut dyn TrainObserver,
) -> Result<TrainState> {
    let state = load_for_resume(dir, config, backends)?;
    train(config, backends, state, observer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{ToyWorld, ToyWorldConfig};
    use crate::promptbank::{discover_anchors, BankConfig};

    fn setup(rank: usize) -> (Backends, TrainState) {
        let world = ToyWorld::build(&ToyWorldConfig::default()).unwrap();
        let backends = world.backends();
        let mut bank = PromptBank::new(8, backends.encoder.dims(), &BankConfig { rank, ..Default::default() }, 0).unwrap();
        discover_anchors(&mut bank, &world.concept_names(), &backends, 2, 0).unwrap();
        let state = TrainState::new(OrthogonalBasis::new(8).unwrap(), bank).unwrap();
        (backends, state)
    }

    #[test]
    fn schedule_alternates_after_warmup() {
        let phases: Vec<Phase> = (0..6).map(|s| phase_for_step(s, 2)).collect();
        use Phase::*;
        assert_eq!(phases, vec![Basis, Basis, Basis, Bank, Basis, Bank]);
    }

    #[test]
    fn batch_plan_structure() {
        let cfg = TrainConfig { seed: 3, ..Default::default() };
        let items = plan_batch(&cfg, 20, 5);
        assert_eq!(items.len(), 16);
        let mut chans: Vec<usize> = items.iter().map(|i| i.channel).collect();
        for pair in items.chunks(2) {
            assert_eq!(pair[0].channel, pair[1].channel);
            assert_ne!(pair[0].noise_seed, pair[1].noise_seed);
        }
        chans.dedup();
        let mut uniq = chans.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 8);
        assert_eq!(items, plan_batch(&cfg, 20, 5));
        // Fewer trainable channels than B/K: every one of them is sampled.
        let sub = TrainConfig { channels_to_train: Some(vec![1, 4, 6]), ..cfg };
        let items = plan_batch(&sub, 20, 0);
        assert_eq!(items.len(), 6);
        assert!(items.iter().all(|i| [1, 4, 6].contains(&i.channel)));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate(8).is_ok());
        assert!(TrainConfig { warmup: 20, iterations: 10, ..Default::default() }.validate(8).is_err());
        assert!(TrainConfig { batch_size: 15, ..Default::default() }.validate(8).is_err());
        assert!(TrainConfig { channels_to_train: Some(vec![9]), ..Default::default() }.validate(8).is_err());
        assert!(TrainConfig { channels_to_train: Some(vec![1, 1]), ..Default::default() }.validate(8).is_err());
    }

    #[test]
    fn basis_step_leaves_bank_untouched() {
        let (backends, mut state) = setup(4);
        let cfg = TrainConfig { iterations: 10, warmup: 5, ..Default::default() };
        let bank_before = state.bank.clone();
        let a_before = state.basis.generator().to_owned();
        phase_u_step(&mut state, &backends, &cfg).unwrap();
        assert_eq!(state.bank, bank_before);
        assert_ne!(state.basis.generator(), a_before.view());
        assert_eq!(state.step, 1);
    }

    #[test]
    fn bank_step_leaves_basis_untouched() {
        let (backends, mut state) = setup(4);
        let cfg = TrainConfig { iterations: 10, warmup: 0, ..Default::default() };
        let basis_before = state.basis.clone();
        let bank_before = state.bank.clone();
        phase_bank_step(&mut state, &backends, &cfg).unwrap();
        assert_eq!(state.basis, basis_before);
        assert_ne!(state.bank, bank_before);
        for (a, b) in state.bank.entries().iter().zip(bank_before.entries()) {
            assert_eq!(a.pe_anchor(), b.pe_anchor());
            assert_eq!(a.ppe_anchor(), b.ppe_anchor());
        }
        let in_warmup = TrainConfig { warmup: 5, ..cfg };
        assert!(phase_bank_step(&mut state, &backends, &in_warmup).is_err());
    }

    #[test]
    fn zero_iterations_checkpoints_once() {
        struct Count(usize);
        impl TrainObserver for Count {
            fn on_checkpoint(&mut self, _s: &TrainState) -> Result<()> {
                self.0 += 1;
                Ok(())
            }
        }
        let (backends, state) = setup(4);
        let init = state.clone();
        let mut obs = Count(0);
        let cfg = TrainConfig { iterations: 0, warmup: 0, ..Default::default() };
        let out = train(&cfg, &backends, state, &mut obs).unwrap();
        assert_eq!(out, init);
        assert_eq!(obs.0, 1);
    }

    #[test]
    fn full_warmup_never_touches_bank() {
        let (backends, state) = setup(4);
        let bank = state.bank.clone();
        let cfg = TrainConfig { iterations: 12, warmup: 12, checkpoint_every: 0, ..Default::default() };
        let out = train(&cfg, &backends, state, &mut NoopObserver).unwrap();
        assert_eq!(out.bank, bank);
        assert_eq!(out.history.len(), 12);
    }

    #[test]
    fn runaway_step_is_numerical_and_not_committed() {
        let (backends, mut state) = setup(4);
        let cfg = TrainConfig { iterations: 50, warmup: 0, lr_bank: 1e300, ..Default::default() };
        let mut err = None;
        let mut last_good = state.clone();
        for _ in 0..cfg.iterations {
            let before = state.clone();
            let step = state.step;
            let result = match phase_for_step(step, cfg.warmup) {
                Phase::Basis => phase_u_step(&mut state, &backends, &cfg),
                Phase::Bank => phase_bank_step(&mut state, &backends, &cfg),
            };
            match result {
                Ok(_) => last_good = state.clone(),
                Err(e) => {
                    assert_eq!(state, before, "failed step must not mutate state");
                    err = Some((e, step));
                    break;
                }
            }
        }
        let (err, step) = err.expect("lr 1e300 must blow up");
        assert!(matches!(err, ProdgError::Numerical { step: s, .. } if s == step), "{err}");
        assert_eq!(state, last_good);
    }
}
