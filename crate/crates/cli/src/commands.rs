use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::Array3;
use prodg::backends::toy::ToyWorld;
use prodg::backends::{classify, extract_features, Backends};
use prodg::checkpoint::{self, latest_checkpoint, step_dir_name, CheckpointWriter};
use prodg::evaluation::{diversity_report, mean_purity};
use prodg::explainer::{explain, AssetNamer, ExplanationReport, PrefixNamer};
use prodg::objectives::ablation_variants;
use prodg::orthobasis::fuse_head;
use prodg::promptbank::discover_anchors;
use prodg::trainer::{load_for_resume, train, StepMetrics, TrainObserver, TrainState};
use prodg::{build_backends, seed, OrthogonalBasis, PromptBank};
use rand::Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::exit::{UsageError, VerificationFailed};
use crate::imageio;
use crate::workdir::{self, write_json};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const DISCOVERY_FILE: &str = "discovery.json";
pub const DIVERSITY_FILE: &str = "diversity.json";
pub const VERIFY_FILE: &str = "verify.json";
pub const CONFIG_FILE: &str = "config.toml";

pub fn backends(cfg: &RunConfig) -> Result<Backends> {
    if !cfg.backends.options.is_empty() {
        log::info!("adapter options: {:?}", cfg.backends.options);
    }
    Ok(build_backends(&cfg.backends.kinds, &cfg.toy)?)
}

fn uses_toy(cfg: &RunConfig) -> bool {
    cfg.backends.kinds.extractor.starts_with("toy_")
}

fn config_context(cfg: &RunConfig) -> BTreeMap<String, serde_json::Value> {
    let mut ctx = BTreeMap::new();
    ctx.insert("config".to_string(), serde_json::to_value(cfg).expect("config serializes"));
    ctx
}

fn resolve_checkpoint(cfg: &RunConfig, explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    latest_checkpoint(&cfg.checkpoints_dir())?.ok_or_else(|| {
        UsageError(format!("no checkpoint under {}; run `prodg discover` first", cfg.checkpoints_dir().display())).into()
    })
}

/// Loads a checkpoint after checking it against the configured backends.
fn load_state(cfg: &RunConfig, backends: &Backends, explicit: Option<&Path>) -> Result<(TrainState, PathBuf)> {
    let dir = resolve_checkpoint(cfg, explicit)?;
    let (state, manifest) = checkpoint::load(&dir).with_context(|| format!("loading {}", dir.display()))?;
    manifest.check_backends(backends)?;
    Ok((state, dir))
}

pub fn dump_config(cfg: &RunConfig) -> Result<()> {
    print!("{}", cfg.to_toml());
    Ok(())
}

#[derive(Serialize)]
struct DiscoveryOutput<'a> {
    class_names: &'a [String],
    #[serde(flatten)]
    report: &'a prodg::promptbank::DiscoveryReport,
}

pub fn discover(cfg: &RunConfig, force: bool) -> Result<()> {
    let _lock = workdir::lock(cfg.workdir())?;
    let backends = backends(cfg)?;
    let mut names = cfg.class_names()?;
    if names.is_empty() {
        if !uses_toy(cfg) {
            bail!(UsageError("no class names: set discovery.class_names or discovery.class_names_file".into()));
        }
        names = cfg.toy.resolved_concept_names();
        log::info!("no class names given; using the toy world's {} concept names", names.len());
    }
    let ckpt_root = cfg.checkpoints_dir();
    if latest_checkpoint(&ckpt_root)?.is_some() {
        if !force {
            bail!(UsageError(format!(
                "{} already holds checkpoints; pass --force to discard them",
                ckpt_root.display()
            )));
        }
        fs::remove_dir_all(&ckpt_root)?;
        let metrics = cfg.workdir().join(METRICS_FILE);
        if metrics.exists() {
            fs::remove_file(metrics)?;
        }
    }
    let seed = cfg.train.seed;
    let mut bank = PromptBank::new(backends.channels(), backends.encoder.dims(), &cfg.bank, seed)?;
    let report = discover_anchors(&mut bank, &names, &backends, cfg.discovery.images_per_class, seed)?;
    let state = TrainState::new(OrthogonalBasis::new(backends.channels())?, bank)?;
    let mut writer = CheckpointWriter::new(&ckpt_root, backends, seed);
    writer.context = config_context(cfg);
    writer.on_checkpoint(&state)?;
    write_json(&cfg.workdir().join(DISCOVERY_FILE), &DiscoveryOutput { class_names: &names, report: &report })?;
    for a in &report.assignments {
        println!("channel {:>3} -> {} (purity {:.4})", a.channel, a.label, a.mean_purity);
    }
    Ok(())
}

/// Appends each step to the metrics log and forwards checkpoints.
struct RunObserver {
    metrics: BufWriter<File>,
    checkpoints: CheckpointWriter,
}

impl RunObserver {
    fn write_line(&mut self, m: &StepMetrics) -> prodg::Result<()> {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(self.metrics, "{line}")?;
        Ok(())
    }
}

impl TrainObserver for RunObserver {
    fn on_step(&mut self, m: &StepMetrics) -> prodg::Result<()> {
        self.write_line(m)
    }

    fn on_checkpoint(&mut self, state: &TrainState) -> prodg::Result<()> {
        self.metrics.flush()?;
        self.checkpoints.on_checkpoint(state)
    }
}

/// Rewrites the metrics log from `history` and returns an observer that
/// appends to it.
fn open_run(cfg: &RunConfig, dir: &Path, ckpt_root: &Path, backends: &Backends, history: &[StepMetrics]) -> Result<RunObserver> {
    fs::create_dir_all(dir)?;
    let file = File::create(dir.join(METRICS_FILE))?;
    let mut checkpoints = CheckpointWriter::new(ckpt_root, backends.clone(), cfg.train.seed);
    checkpoints.context = config_context(cfg);
    let mut obs = RunObserver { metrics: BufWriter::new(file), checkpoints };
    for m in history {
        obs.write_line(m)?;
    }
    Ok(obs)
}

fn zero_anchor_state(cfg: &RunConfig, backends: &Backends) -> Result<TrainState> {
    let bank = PromptBank::new(backends.channels(), backends.encoder.dims(), &cfg.bank, cfg.train.seed)?;
    Ok(TrainState::new(OrthogonalBasis::new(backends.channels())?, bank)?)
}

pub fn run_train(cfg: &RunConfig, skip_discovery: bool) -> Result<()> {
    let _lock = workdir::lock(cfg.workdir())?;
    let backends = backends(cfg)?;
    fs::write(cfg.workdir().join(CONFIG_FILE), cfg.to_toml())?;
    let ckpt_root = cfg.checkpoints_dir();
    let state = match latest_checkpoint(&ckpt_root)? {
        Some(dir) => {
            log::info!("resuming from {}", dir.display());
            load_for_resume(&dir, &cfg.train, &backends)?
        }
        None if skip_discovery => {
            log::warn!("training without discovered anchors; all anchors are zero");
            zero_anchor_state(cfg, &backends)?
        }
        None => bail!(UsageError(format!(
            "no checkpoint under {}; run `prodg discover` first or pass --skip-discovery",
            ckpt_root.display()
        ))),
    };
    let mut obs = open_run(cfg, cfg.workdir(), &ckpt_root, &backends, &state.history)?;
    let result = train(&cfg.train, &backends, state, &mut obs);
    obs.metrics.flush()?;
    let state = result.inspect_err(|_| {
        if let Some(last) = latest_checkpoint(&ckpt_root).ok().flatten() {
            log::error!("last good checkpoint kept at {}", last.display());
        }
    })?;
    let last = state.history.last();
    println!(
        "trained to step {}; last mean purity {}",
        state.step,
        last.map_or("n/a".to_string(), |m| format!("{:.4}", m.mean_purity))
    );
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    variant: &'static str,
    enable_u: bool,
    enable_reg: bool,
    enable_div: bool,
    steps: usize,
    final_eval_purity: f64,
    final_metrics: Option<StepMetrics>,
    diversity_global_mean: f64,
}

/// Trains every loss subset from the same starting state into
/// `<workdir>/ablation/<variant>/`.
pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let _lock = workdir::lock(cfg.workdir())?;
    let backends = backends(cfg)?;
    let start = match checkpoint_at_step_zero(cfg)? {
        Some(dir) => load_for_resume(&dir, &cfg.train, &backends)?,
        None => bail!(UsageError("ablation starts from the discovery checkpoint; run `prodg discover` first".into())),
    };
    let channels = cfg.train.trainable_channels(backends.channels());
    let root = cfg.workdir().join("ablation");
    let mut rows = Vec::new();
    for (name, loss) in ablation_variants(&cfg.train.loss) {
        let mut variant_cfg = cfg.clone();
        variant_cfg.train.loss = loss;
        let dir = root.join(name);
        let mut obs = open_run(&variant_cfg, &dir, &dir.join("checkpoints"), &backends, &start.history)?;
        let state = train(&variant_cfg.train, &backends, start.clone(), &mut obs)
            .with_context(|| format!("ablation variant {name}"))?;
        obs.metrics.flush()?;
        let seed = cfg.train.seed;
        let purity = mean_purity(&state.basis, &state.bank, &backends, &channels, 8, seed)?;
        let div = if cfg.eval.n_samples >= 2 {
            diversity_report(&state.bank, &backends, &channels, cfg.eval.n_samples, seed, false)?.global_mean
        } else {
            f64::NAN
        };
        println!("variant {name:>4}: eval purity {purity:.4}, diversity {div:.5}");
        rows.push(AblationRow {
            variant: name,
            enable_u: loss.enable_u,
            enable_reg: loss.enable_reg,
            enable_div: loss.enable_div,
            steps: state.step,
            final_eval_purity: purity,
            final_metrics: state.history.last().copied(),
            diversity_global_mean: div,
        });
    }
    write_json(&root.join("summary.json"), &rows)
}

fn checkpoint_at_step_zero(cfg: &RunConfig) -> Result<Option<PathBuf>> {
    let dir = cfg.checkpoints_dir().join(step_dir_name(0));
    Ok(dir.join(checkpoint::MANIFEST_FILE).is_file().then_some(dir))
}

fn write_assets(report: &ExplanationReport, dir: &Path, namer: &dyn AssetNamer) -> Result<()> {
    for ch in &report.channels {
        for (i, p) in ch.prototypes.iter().enumerate() {
            imageio::write_rgb16(&dir.join(namer.prototype_image(ch.channel, i)), &p.image.view())?;
            imageio::write_gray8(&dir.join(namer.prototype_heatmap(ch.channel, i)), &p.heatmap.upsampled.view())?;
        }
        if let Some(hm) = &ch.input_heatmap {
            imageio::write_gray8(&dir.join(namer.input_heatmap(ch.channel)), &hm.upsampled.view())?;
        }
    }
    Ok(())
}

fn report_stem(path: &Path, used: &mut BTreeMap<String, usize>) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("input").to_string();
    let n = used.entry(stem.clone()).or_insert(0);
    *n += 1;
    if *n == 1 {
        stem
    } else {
        format!("{stem}_{n}")
    }
}

pub fn run_explain(cfg: &RunConfig, ckpt: Option<&Path>, images: &[PathBuf]) -> Result<()> {
    if images.is_empty() {
        bail!(UsageError("no input images".into()));
    }
    let _lock = workdir::lock(cfg.workdir())?;
    let backends = backends(cfg)?;
    let (state, ckpt_dir) = load_state(cfg, &backends, ckpt)?;
    let class_names: Option<Vec<String>> = match cfg.class_names()? {
        v if v.is_empty() && uses_toy(cfg) => Some(cfg.toy.resolved_concept_names()),
        v if v.is_empty() => None,
        v => Some(v),
    };
    let echo = serde_json::json!({
        "checkpoint_step": state.step,
        "seed": cfg.train.seed,
        "explain": cfg.explain,
        "backends": cfg.backends.kinds,
    });
    log::info!("explaining with checkpoint {}", ckpt_dir.display());
    let mut used = BTreeMap::new();
    let mut failures = 0;
    for path in images {
        let stem = report_stem(path, &mut used);
        let out_dir = cfg.reports_dir().join(&stem);
        let outcome = (|| -> Result<PathBuf> {
            let img: Array3<f64> = imageio::read_image(path)?;
            let report =
                explain(&img.view(), &state.basis, &state.bank, &backends, class_names.as_deref(), &cfg.explain, cfg.train.seed)?;
            fs::create_dir_all(&out_dir)?;
            let namer = PrefixNamer(String::new());
            write_assets(&report, &out_dir, &namer)?;
            let doc = report.to_document(&path.display().to_string(), &namer, echo.clone());
            let out = out_dir.join("report.json");
            write_json(&out, &doc)?;
            Ok(out)
        })();
        match outcome {
            Ok(out) => println!("{} -> {}", path.display(), out.display()),
            Err(e) => {
                failures += 1;
                eprintln!("error: {}: {e:#}", path.display());
            }
        }
    }
    if failures == images.len() {
        bail!(UsageError(format!("all {failures} inputs failed")));
    }
    Ok(())
}

pub fn run_eval_diversity(cfg: &RunConfig, ckpt: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let n = cfg.eval.n_samples;
    if n < 2 {
        bail!(UsageError(format!("--n-samples must be at least 2, got {n}")));
    }
    let _lock = workdir::lock(cfg.workdir())?;
    let backends = backends(cfg)?;
    let (state, _) = load_state(cfg, &backends, ckpt)?;
    let channels = cfg.train.trainable_channels(backends.channels());
    let report = diversity_report(&state.bank, &backends, &channels, n, cfg.train.seed, cfg.eval.fixed_seed)?;
    for d in &report.per_channel {
        println!("channel {:>3} ({}): {:.6}", d.channel, d.anchor_label, d.mean_distance);
    }
    println!("global mean {:.6} over {} pairs per channel", report.global_mean, n * (n - 1) / 2);
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.workdir().join(DIVERSITY_FILE));
    write_json(&path, &report)
}

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub checkpoint: String,
    pub inputs: usize,
    pub max_logit_diff: f64,
    pub argmax_disagreements: usize,
    pub orthogonality_residual: f64,
    pub logit_tolerance: f64,
    pub orthogonality_tolerance: f64,
    pub passed: bool,
}

pub fn run_verify(cfg: &RunConfig, ckpt: Option<&Path>) -> Result<()> {
    let _lock = workdir::lock(cfg.workdir())?;
    let backends = backends(cfg)?;
    let (state, dir) = load_state(cfg, &backends, ckpt)?;
    let ex = backends.extractor.as_ref();
    let head = fuse_head(&ex.head_weights(), &ex.head_bias(), &state.basis)?;
    let mut rng = seed::rng(seed::derive(&[cfg.train.seed, 77]));
    let shape = ex.image_shape();
    let argmax = |v: &ndarray::Array1<f64>| (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
    let mut max_diff: f64 = 0.0;
    let mut disagreements = 0;
    for _ in 0..cfg.verify.inputs {
        let img = Array3::from_shape_fn(shape, |_| rng.random::<f64>());
        let f = extract_features(ex, &img.view())?;
        let original = classify(ex, &f)?;
        let fused = head.logits(&state.basis.apply(&f)?.gap().view())?;
        max_diff = max_diff.max((&fused - &original).iter().fold(0.0, |m, d| m.max(d.abs())));
        if argmax(&fused) != argmax(&original) {
            disagreements += 1;
        }
    }
    let residual = state.basis.orthogonality_residual()?;
    let v = &cfg.verify;
    let passed = max_diff < v.logit_tolerance && residual < v.orthogonality_tolerance && disagreements == 0;
    let report = VerifyReport {
        checkpoint: dir.display().to_string(),
        inputs: v.inputs,
        max_logit_diff: max_diff,
        argmax_disagreements: disagreements,
        orthogonality_residual: residual,
        logit_tolerance: v.logit_tolerance,
        orthogonality_tolerance: v.orthogonality_tolerance,
        passed,
    };
    write_json(&cfg.workdir().join(VERIFY_FILE), &report)?;
    println!("max |fused - original| logit difference: {max_diff:.3e} (tolerance {:.0e})", v.logit_tolerance);
    println!("argmax disagreements: {disagreements}");
    println!("||UU^T - I||_F: {residual:.3e} (tolerance {:.0e})", v.orthogonality_tolerance);
    if !passed {
        let mut why = Vec::new();
        if max_diff >= v.logit_tolerance || disagreements > 0 {
            why.push(format!("max logit difference {max_diff:.3e}, {disagreements} argmax disagreements"));
        }
        if residual >= v.orthogonality_tolerance {
            why.push(format!("orthogonality residual {residual:.3e}"));
        }
        bail!(VerificationFailed(format!("verification failed: {}", why.join("; "))));
    }
    println!("verification passed");
    Ok(())
}

pub fn toy_image(cfg: &RunConfig, concept: usize, region: Option<&[usize]>, out: &Path) -> Result<()> {
    let world = ToyWorld::build(&cfg.toy)?;
    let img = match region {
        Some([r0, r1, c0, c1]) => world.concept_image_in_region(concept, *r0..*r1, *c0..*c1)?,
        Some(_) => bail!(UsageError("--region takes four patch indices: row_start row_end col_start col_end".into())),
        None => world.concept_image(concept)?,
    };
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    imageio::write_rgb16(out, &img.view())?;
    println!("{}", out.display());
    Ok(())
}
