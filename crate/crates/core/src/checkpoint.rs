//! Checkpoint directories: `manifest.json` plus a `tensors.safetensors`
//! archive of float64 arrays keyed by name.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{Backends, EncoderDims};
use crate::error::{ProdgError, Result};
use crate::optim::{AdamState, ThetaAdam};
use crate::orthobasis::OrthogonalBasis;
use crate::promptbank::{LogvarMode, PromptBank, PromptBankEntry, Theta};
use crate::trainer::{Phase, StepMetrics, TrainObserver, TrainState};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.safetensors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub step: usize,
    pub channels: usize,
    pub feature_height: usize,
    pub feature_width: usize,
    pub num_classes: usize,
    pub rank: usize,
    pub token_count: usize,
    pub embed_dim: usize,
    pub pooled_dim: usize,
    pub logvar_mode: LogvarMode,
    pub anchor_labels: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
    pub adam_a_steps: u64,
    pub adam_bank_steps: Vec<u64>,
    pub history_len: usize,
    /// Application data stored alongside the arrays (run config echo, class
    /// names, …). Not interpreted by this module.
    #[serde(default)]
    pub context: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize)]
struct Architecture<'a> {
    channels: usize,
    feature_height: usize,
    feature_width: usize,
    num_classes: usize,
    rank: usize,
    dims: EncoderDims,
    logvar_mode: LogvarMode,
    extractor: &'a str,
    encoder: &'a str,
    generator: &'a str,
}

/// Hash of everything that must agree between a checkpoint and the
/// backends it is loaded under.
pub fn architecture_hash(backends: &Backends, rank: usize, logvar_mode: LogvarMode) -> String {
    let (c, h, w) = backends.extractor.feature_dim();
    let arch = Architecture {
        channels: c,
        feature_height: h,
        feature_width: w,
        num_classes: backends.extractor.num_classes(),
        rank,
        dims: backends.encoder.dims(),
        logvar_mode,
        extractor: backends.extractor.kind(),
        encoder: backends.encoder.kind(),
        generator: backends.generator.kind(),
    };
    let json = serde_json::to_vec(&arch).expect("serializable");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    /// Fails with a load error if the checkpoint was written for a different
    /// architecture than `backends`.
    pub fn check_backends(&self, backends: &Backends) -> Result<()> {
        let (c, h, w) = backends.extractor.feature_dim();
        if (self.channels, self.feature_height, self.feature_width) != (c, h, w) {
            return Err(ProdgError::Load(format!(
                "checkpoint features are {}x{}x{}, extractor produces {c}x{h}x{w}",
                self.channels, self.feature_height, self.feature_width
            )));
        }
        let dims = backends.encoder.dims();
        if (self.token_count, self.embed_dim, self.pooled_dim) != (dims.token_count, dims.embed_dim, dims.pooled_dim) {
            return Err(ProdgError::Load("checkpoint embedding dims do not match the encoder".into()));
        }
        if self.config_hash != architecture_hash(backends, self.rank, self.logvar_mode) {
            return Err(ProdgError::Load("checkpoint config hash does not match the current architecture".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims { token_count: self.token_count, embed_dim: self.embed_dim, pooled_dim: self.pooled_dim }
    }
}

/// Builds the manifest for `state` under `backends`.
pub fn manifest_for(
    state: &TrainState,
    backends: &Backends,
    seed: u64,
    context: BTreeMap<String, serde_json::Value>,
) -> Manifest {
    let (c, h, w) = backends.extractor.feature_dim();
    let dims = state.bank.dims();
    let mode = state.bank.logvar_mode();
    Manifest {
        version: FORMAT_VERSION,
        step: state.step,
        channels: c,
        feature_height: h,
        feature_width: w,
        num_classes: backends.extractor.num_classes(),
        rank: state.bank.rank(),
        token_count: dims.token_count,
        embed_dim: dims.embed_dim,
        pooled_dim: dims.pooled_dim,
        logvar_mode: mode,
        anchor_labels: state.bank.anchor_labels(),
        seed,
        config_hash: architecture_hash(backends, state.bank.rank(), mode),
        adam_a_steps: state.adam_a.t,
        adam_bank_steps: state.adam_bank.iter().map(|a| a.t).collect(),
        history_len: state.history.len(),
        context,
    }
}

const HISTORY_FIELDS: [&str; 7] = ["step", "phase", "mean_purity", "loss_u", "loss_reg", "loss_div", "combined"];

/// Every named array of a training state.
pub fn state_arrays(state: &TrainState) -> Result<BTreeMap<String, ArrayD<f64>>> {
    let mut out = BTreeMap::new();
    out.insert("A".to_string(), state.basis.generator().to_owned().into_dyn());
    out.insert("U".to_string(), state.basis.u()?.to_owned().into_dyn());
    out.insert("adam/A/m".to_string(), state.adam_a.m.clone().into_dyn());
    out.insert("adam/A/v".to_string(), state.adam_a.v.clone().into_dyn());
    for (c, e) in state.bank.entries().iter().enumerate() {
        out.insert(format!("pe_anchor/{c}"), e.pe_anchor().to_owned().into_dyn());
        out.insert(format!("ppe_anchor/{c}"), e.ppe_anchor().clone().into_dyn());
        insert_theta(&mut out, "", c, &e.theta);
        insert_theta(&mut out, "adam/m/", c, &state.adam_bank[c].m);
        insert_theta(&mut out, "adam/v/", c, &state.adam_bank[c].v);
    }
    if !state.history.is_empty() {
        let cols: [Vec<f64>; 7] = [
            state.history.iter().map(|m| m.step as f64).collect(),
            state.history.iter().map(|m| if m.phase == Phase::Basis { 0.0 } else { 1.0 }).collect(),
            state.history.iter().map(|m| m.mean_purity).collect(),
            state.history.iter().map(|m| m.loss_u).collect(),
            state.history.iter().map(|m| m.loss_reg).collect(),
            state.history.iter().map(|m| m.loss_div).collect(),
            state.history.iter().map(|m| m.combined).collect(),
        ];
        for (name, col) in HISTORY_FIELDS.iter().zip(cols) {
            out.insert(format!("history/{name}"), Array1::from(col).into_dyn());
        }
    }
    Ok(out)
}

fn insert_theta(out: &mut BTreeMap<String, ArrayD<f64>>, prefix: &str, c: usize, t: &Theta) {
    out.insert(format!("{prefix}lora_A/{c}"), t.lora_a.clone().into_dyn());
    out.insert(format!("{prefix}lora_B/{c}"), t.lora_b.clone().into_dyn());
    out.insert(format!("{prefix}delta_ppe/{c}"), t.delta_ppe.clone().into_dyn());
    out.insert(format!("{prefix}logvar_pe/{c}"), t.logvar_pe.clone().into_dyn());
    out.insert(format!("{prefix}logvar_ppe/{c}"), t.logvar_ppe.clone().into_dyn());
}

fn to_bytes(a: &ArrayD<f64>) -> Vec<u8> {
    a.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes arrays as a float64 safetensors archive.
pub fn write_tensors(path: &Path, arrays: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> =
        arrays.iter().map(|(k, a)| (k.clone(), a.shape().to_vec(), to_bytes(a))).collect();
    let views = bytes
        .iter()
        .map(|(k, shape, data)| {
            TensorView::new(Dtype::F64, shape.clone(), data)
                .map(|v| (k.clone(), v))
                .map_err(|e| ProdgError::InvalidState(format!("tensor {k}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let buf = safetensors::serialize(views, None).map_err(|e| ProdgError::InvalidState(e.to_string()))?;
    fs::write(path, buf)?;
    Ok(())
}

/// Reads every array of a float64 safetensors archive.
pub fn read_tensors(path: &Path) -> Result<BTreeMap<String, ArrayD<f64>>> {
    let buf = fs::read(path).map_err(|e| ProdgError::Load(format!("{}: {e}", path.display())))?;
    let st = SafeTensors::deserialize(&buf).map_err(|e| ProdgError::Load(format!("corrupt tensor archive: {e}")))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(ProdgError::Load(format!("tensor {name} is {:?}, expected F64", view.dtype())));
        }
        let vals: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), vals)
            .map_err(|e| ProdgError::Load(format!("tensor {name}: {e}")))?;
        out.insert(name, arr);
    }
    Ok(out)
}

/// Writes `state` to `dir` (created if missing). The manifest is written
/// last, so a directory without one is incomplete.
pub fn save(dir: &Path, state: &TrainState, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path)?;
    }
    let tmp = dir.join(format!("{TENSORS_FILE}.tmp"));
    write_tensors(&tmp, &state_arrays(state)?)?;
    fs::rename(&tmp, dir.join(TENSORS_FILE))?;
    let json = serde_json::to_string_pretty(manifest).expect("serializable manifest");
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    fs::write(&tmp, json)?;
    fs::rename(&tmp, manifest_path)?;
    Ok(())
}

/// Directory name of the checkpoint taken after `step` steps.
pub fn step_dir_name(step: usize) -> String {
    format!("step_{step:08}")
}

/// Newest complete checkpoint under `root`, if any.
pub fn latest_checkpoint(root: &Path) -> Result<Option<PathBuf>> {
    if !root.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(root)? {
        let path = entry?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(step) = step {
            if path.join(MANIFEST_FILE).is_file() && best.as_ref().is_none_or(|(s, _)| step > *s) {
                best = Some((step, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Training observer that saves every checkpoint to `root/step_NNNNNNNN`.
pub struct CheckpointWriter {
    pub root: PathBuf,
    pub backends: Backends,
    pub seed: u64,
    pub context: BTreeMap<String, serde_json::Value>,
    /// Directories written so far, oldest first.
    pub written: Vec<PathBuf>,
}

impl CheckpointWriter {
    pub fn new(root: impl Into<PathBuf>, backends: Backends, seed: u64) -> Self {
        Self { root: root.into(), backends, seed, context: BTreeMap::new(), written: Vec::new() }
    }
}

impl TrainObserver for CheckpointWriter {
    fn on_checkpoint(&mut self, state: &TrainState) -> Result<()> {
        let dir = self.root.join(step_dir_name(state.step));
        let manifest = manifest_for(state, &self.backends, self.seed, self.context.clone());
        save(&dir, state, &manifest)?;
        log::info!("checkpoint written to {}", dir.display());
        self.written.push(dir);
        Ok(())
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| ProdgError::Load(format!("{}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| ProdgError::Load(format!("corrupt manifest: {e}")))?;
    if m.version != FORMAT_VERSION {
        return Err(ProdgError::Load(format!("unsupported checkpoint version {}", m.version)));
    }
    Ok(m)
}

struct Archive(BTreeMap<String, ArrayD<f64>>);

impl Archive {
    fn take(&mut self, key: &str, shape: &[usize]) -> Result<ArrayD<f64>> {
        let a = self.0.remove(key).ok_or_else(|| ProdgError::Load(format!("missing tensor '{key}'")))?;
        if a.shape() != shape {
            return Err(ProdgError::Load(format!("tensor '{key}' has shape {:?}, expected {shape:?}", a.shape())));
        }
        Ok(a)
    }

    fn take2(&mut self, key: &str, shape: (usize, usize)) -> Result<Array2<f64>> {
        Ok(self.take(key, &[shape.0, shape.1])?.into_dimensionality().expect("checked rank"))
    }

    fn take1(&mut self, key: &str, len: usize) -> Result<Array1<f64>> {
        Ok(self.take(key, &[len])?.into_dimensionality().expect("checked rank"))
    }

    fn theta(&mut self, prefix: &str, c: usize, m: &Manifest) -> Result<Theta> {
        let (lv_pe, lv_ppe) = match m.logvar_mode {
            LogvarMode::PerEntry => ((m.token_count, m.embed_dim), m.pooled_dim),
            LogvarMode::Shared => ((1, 1), 1),
        };
        Ok(Theta {
            lora_a: self.take2(&format!("{prefix}lora_A/{c}"), (m.token_count, m.rank))?,
            lora_b: self.take2(&format!("{prefix}lora_B/{c}"), (m.rank, m.embed_dim))?,
            delta_ppe: self.take1(&format!("{prefix}delta_ppe/{c}"), m.pooled_dim)?,
            logvar_pe: self.take2(&format!("{prefix}logvar_pe/{c}"), lv_pe)?,
            logvar_ppe: self.take1(&format!("{prefix}logvar_ppe/{c}"), lv_ppe)?,
        })
    }
}

/// Loads a checkpoint written by [`save`]. The stored `U` is restored as-is.
pub fn load(dir: &Path) -> Result<(TrainState, Manifest)> {
    let manifest = read_manifest(dir)?;
    let mut ar = Archive(read_tensors(&dir.join(TENSORS_FILE))?);
    let m = &manifest;
    let c = m.channels;
    if c == 0 || m.anchor_labels.len() != c || m.adam_bank_steps.len() != c {
        return Err(ProdgError::Load("manifest channel fields are inconsistent".into()));
    }
    let a = ar.take2("A", (c, c))?;
    let u = ar.take2("U", (c, c))?;
    let basis = OrthogonalBasis::from_parts(a, u)?;
    let adam_a = AdamState { m: ar.take2("adam/A/m", (c, c))?, v: ar.take2("adam/A/v", (c, c))?, t: m.adam_a_steps };

    let dims = m.dims();
    let mut entries = Vec::with_capacity(c);
    let mut adam_bank = Vec::with_capacity(c);
    for ch in 0..c {
        let pe_anchor = ar.take2(&format!("pe_anchor/{ch}"), (m.token_count, m.embed_dim))?;
        let ppe_anchor = ar.take1(&format!("ppe_anchor/{ch}"), m.pooled_dim)?;
        let theta = ar.theta("", ch, m)?;
        entries.push(PromptBankEntry::from_parts(
            pe_anchor,
            ppe_anchor,
            m.anchor_labels[ch].clone(),
            theta,
            dims,
            m.rank,
        )?);
        adam_bank.push(ThetaAdam { m: ar.theta("adam/m/", ch, m)?, v: ar.theta("adam/v/", ch, m)?, t: m.adam_bank_steps[ch] });
    }
    let bank = PromptBank::from_entries(entries, m.rank, dims, m.logvar_mode)?;

    let mut history = Vec::with_capacity(m.history_len);
    if m.history_len > 0 {
        let cols = HISTORY_FIELDS
            .iter()
            .map(|f| ar.take1(&format!("history/{f}"), m.history_len))
            .collect::<Result<Vec<_>>>()?;
        for i in 0..m.history_len {
            history.push(StepMetrics {
                step: cols[0][i] as usize,
                phase: if cols[1][i] == 0.0 { Phase::Basis } else { Phase::Bank },
                mean_purity: cols[2][i],
                loss_u: cols[3][i],
                loss_reg: cols[4][i],
                loss_div: cols[5][i],
                combined: cols[6][i],
            });
        }
    }
    let state = TrainState { step: m.step, basis, bank, adam_a, adam_bank, history };
    Ok((state, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{ToyWorld, ToyWorldConfig};
    use crate::promptbank::BankConfig;
    use crate::trainer::{train, NoopObserver, TrainConfig};

    fn trained() -> (Backends, TrainState) {
        let backends = ToyWorld::build(&ToyWorldConfig::default()).unwrap().backends();
        let bank = PromptBank::new(8, backends.encoder.dims(), &BankConfig { rank: 3, ..Default::default() }, 0).unwrap();
        let state = TrainState::new(OrthogonalBasis::new(8).unwrap(), bank).unwrap();
        let cfg = TrainConfig { iterations: 6, warmup: 2, checkpoint_every: 0, ..Default::default() };
        (backends.clone(), train(&cfg, &backends, state, &mut NoopObserver).unwrap())
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (backends, state) = trained();
        let dir = tempfile::tempdir().unwrap();
        let manifest = manifest_for(&state, &backends, 0, BTreeMap::new());
        save(dir.path(), &state, &manifest).unwrap();
        let (loaded, m2) = load(dir.path()).unwrap();
        assert_eq!(m2, manifest);
        assert_eq!(state_arrays(&loaded).unwrap(), state_arrays(&state).unwrap());
        assert_eq!(loaded, state);
        m2.check_backends(&backends).unwrap();
    }

    #[test]
    fn missing_tensor_is_named() {
        let (backends, state) = trained();
        let dir = tempfile::tempdir().unwrap();
        let manifest = manifest_for(&state, &backends, 0, BTreeMap::new());
        save(dir.path(), &state, &manifest).unwrap();
        let mut arrays = read_tensors(&dir.path().join(TENSORS_FILE)).unwrap();
        arrays.remove("lora_B/3");
        write_tensors(&dir.path().join(TENSORS_FILE), &arrays).unwrap();
        let err = load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("lora_B/3"), "{err}");
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let (backends, state) = trained();
        let manifest = manifest_for(&state, &backends, 0, BTreeMap::new());
        let other = ToyWorld::build(&ToyWorldConfig { channels: 6, ..Default::default() }).unwrap().backends();
        assert!(matches!(manifest.check_backends(&other), Err(ProdgError::Load(_))));
        let mut tampered = manifest.clone();
        tampered.config_hash = "00".into();
        assert!(matches!(tampered.check_backends(&backends), Err(ProdgError::Load(_))));
    }

    #[test]
    fn corrupt_manifest_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{not json").unwrap();
        assert!(matches!(load(dir.path()), Err(ProdgError::Load(_))));
        assert!(matches!(load(&dir.path().join("absent")), Err(ProdgError::Load(_))));
    }
}
