//! Held-out measurements on a trained state: purity, feature similarity and
//! perceptual diversity of prototypes.

use serde::{Deserialize, Serialize};

use crate::backends::{perceptual_distance, Backends};
use crate::error::{invalid_arg, Result};
use crate::explainer::sample_prototypes;
use crate::objectives::cosine;
use crate::orthobasis::OrthogonalBasis;
use crate::par::par_map;
use crate::promptbank::PromptBank;
use crate::trainer::{forward_item, BatchItem, ItemForward};

/// Step index reserved for evaluation draws; training never reaches it.
const EVAL_STEP: u64 = u64::MAX - 1;

fn eval_forward(
    basis: &OrthogonalBasis,
    bank: &PromptBank,
    backends: &Backends,
    channels: &[usize],
    samples: usize,
    seed: u64,
) -> Result<Vec<Vec<ItemForward>>> {
    if channels.is_empty() || samples == 0 {
        return Err(invalid_arg("need at least one channel and one sample"));
    }
    channels
        .iter()
        .map(|&c| par_map(samples, |s| forward_item(basis, bank, backends, &BatchItem::new(seed, c, EVAL_STEP, s))))
        .collect()
}

/// Mean purity over `samples` fixed draws per channel.
pub fn mean_purity(
    basis: &OrthogonalBasis,
    bank: &PromptBank,
    backends: &Backends,
    channels: &[usize],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let fwd = eval_forward(basis, bank, backends, channels, samples, seed)?;
    let total: f64 = fwd.iter().flatten().map(|f| f.purity.value).sum();
    Ok(total / (channels.len() * samples) as f64)
}

/// Mean cosine similarity of pooled backbone features over all same-channel
/// pairs of `samples` fixed draws.
pub fn same_channel_cosine(
    basis: &OrthogonalBasis,
    bank: &PromptBank,
    backends: &Backends,
    channels: &[usize],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples < 2 {
        return Err(invalid_arg("need at least two samples per channel"));
    }
    let fwd = eval_forward(basis, bank, backends, channels, samples, seed)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for group in &fwd {
        for i in 0..group.len() {
            for j in i + 1..group.len() {
                sum += cosine(&group[i].pooled.view(), &group[j].pooled.view());
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDiversity {
    pub channel: usize,
    pub anchor_label: String,
    pub mean_distance: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub metric: String,
    pub samples_per_channel: usize,
    pub fixed_seed: bool,
    pub per_channel: Vec<ChannelDiversity>,
    pub global_mean: f64,
}

/// Average pairwise perceptual distance between `n` prototypes per channel.
/// With `fixed_seed` every sample reuses the first sample's seeds, so any
/// remaining spread comes from the model alone.
pub fn diversity_report(
    bank: &PromptBank,
    backends: &Backends,
    channels: &[usize],
    n: usize,
    seed: u64,
    fixed_seed: bool,
) -> Result<DiversityReport> {
    if n < 2 {
        return Err(invalid_arg(format!("diversity needs at least 2 samples per channel, got {n}")));
    }
    if channels.is_empty() {
        return Err(invalid_arg("no channels to evaluate"));
    }
    let metric = backends.metric.as_ref();
    let mut per_channel = Vec::with_capacity(channels.len());
    for &c in channels {
        let images = if fixed_seed {
            let (_, img) = sample_prototypes(bank, backends, c, 1, seed)?.remove(0);
            vec![img; n]
        } else {
            sample_prototypes(bank, backends, c, n, seed)?.into_iter().map(|(_, img)| img).collect()
        };
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let dists = par_map(pairs.len(), |p| {
            let (i, j) = pairs[p];
            perceptual_distance(metric, &images[i].view(), &images[j].view())
        })?;
        per_channel.push(ChannelDiversity {
            channel: c,
            anchor_label: bank.entry(c)?.anchor_label().to_string(),
            mean_distance: dists.iter().sum::<f64>() / dists.len() as f64,
            pairs: dists.len(),
        });
    }
    let global_mean = per_channel.iter().map(|d| d.mean_distance).sum::<f64>() / per_channel.len() as f64;
    Ok(DiversityReport { metric: metric.name().to_string(), samples_per_channel: n, fixed_seed, per_channel, global_mean })
}
