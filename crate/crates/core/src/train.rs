//! Training harness: run configuration, warm-up/decay schedule, two-group
//! Adam, pseudo-pretraining and method training loops, checkpointing,
//! evaluation, and parameter reports.
//!
//! Determinism contract: every random draw is keyed by `(seed, purpose,
//! step)`, never by sequential RNG state, so a checkpoint (parameters +
//! optimizer moments + step counter) is sufficient for bit-exact resume.

use crate::backbone::{self, BackboneConfig};
use crate::data::{self, rng_tags, seeded_rng, Crop, Manifest};
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{self, DcfParams, TrialSet};
use crate::model::ModelConfig;
use crate::params::{LrGroup, ParamRegistry};
use crate::pet::{ForwardOpts, Method, MethodSpec};
use crate::sv::BackendConfig;
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSpec {
    pub peak: f64,
    pub floor: f64,
}

/// Per-group learning rate: linear warm-up to the peak, then linear decay to
/// the floor, never below it.
#[derive(Clone, Copy, Debug)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if warmup_steps == 0 || total_steps <= warmup_steps {
            return Err(Error::Config(format!(
                "schedule needs 0 < warmup ({warmup_steps}) < total ({total_steps})"
            )));
        }
        Ok(Self { warmup_steps, total_steps })
    }

    pub fn rate(&self, lr: LrSpec, step: u64) -> f64 {
        if step < self.warmup_steps {
            lr.peak * (step + 1) as f64 / self.warmup_steps as f64
        } else if step >= self.total_steps {
            lr.floor
        } else {
            let frac = (step - self.warmup_steps) as f64
                / (self.total_steps - self.warmup_steps) as f64;
            (lr.peak + (lr.floor - lr.peak) * frac).max(lr.floor)
        }
    }
}

fn default_backbone() -> BackboneConfig {
    BackboneConfig::desk()
}
fn default_method() -> MethodSpec {
    MethodSpec::desk(Method::Unipet)
}
fn default_backend() -> BackendConfig {
    BackendConfig::desk()
}
fn default_data_dir() -> PathBuf {
    "data/train".into()
}
fn default_eval_dir() -> PathBuf {
    "data/eval".into()
}
fn default_out_dir() -> PathBuf {
    "out".into()
}
fn default_batch_size() -> usize {
    8
}
fn default_crop_seconds() -> f64 {
    0.8
}
fn default_total_steps() -> u64 {
    300
}
fn default_warmup_fraction() -> f64 {
    0.1
}
fn default_group_a() -> LrSpec {
    LrSpec { peak: 5e-4, floor: 1.5e-5 }
}
fn default_group_b() -> LrSpec {
    LrSpec { peak: 1e-4, floor: 3e-6 }
}
fn default_pretrain_steps() -> u64 {
    150
}
fn default_pretrain_lr() -> f64 {
    1e-4
}
fn default_mask_fraction() -> f64 {
    0.2
}
fn default_eval_speakers() -> usize {
    10
}
fn default_trials() -> usize {
    200
}

/// One JSON document drives every subcommand.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_backbone")]
    pub backbone: BackboneConfig,
    #[serde(default = "default_method")]
    pub method: MethodSpec,
    #[serde(default = "default_backend")]
    pub backend: BackendConfig,
    /// Corpus settings for generation; the eval split reuses them with
    /// `eval_speakers` profiles starting right after the training speakers.
    #[serde(default)]
    pub corpus: data::CorpusConfig,
    #[serde(default = "default_eval_speakers")]
    pub eval_speakers: usize,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default = "default_eval_dir")]
    pub eval_dir: PathBuf,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_crop_seconds")]
    pub crop_seconds: f64,
    #[serde(default = "default_total_steps")]
    pub total_steps: u64,
    #[serde(default = "default_warmup_fraction")]
    pub warmup_fraction: f64,
    /// SV backend + prompt learning rates.
    #[serde(default = "default_group_a")]
    pub group_a: LrSpec,
    /// All other trainables.
    #[serde(default = "default_group_b")]
    pub group_b: LrSpec,
    /// 0 = final checkpoint only.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "default_pretrain_steps")]
    pub pretrain_steps: u64,
    /// Kept gentle by default: aggressive rates let the blocks collapse their
    /// outputs toward a constant (the masked-regression loss still falls, but
    /// across-utterance feature diversity is destroyed).
    #[serde(default = "default_pretrain_lr")]
    pub pretrain_lr: f64,
    #[serde(default = "default_mask_fraction")]
    pub mask_fraction: f64,
    /// Backbone weights (e.g. from pretraining) loaded before training.
    #[serde(default)]
    pub init_weights: Option<PathBuf>,
    #[serde(default)]
    pub resume_from: Option<PathBuf>,
    #[serde(default = "default_trials")]
    pub num_target_trials: usize,
    #[serde(default = "default_trials")]
    pub num_nontarget_trials: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.method.validate(&self.backbone)?;
        self.backend.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) || self.warmup_fraction == 0.0 {
            return Err(Error::Config(format!(
                "warmup_fraction {} must lie in (0, 1)",
                self.warmup_fraction
            )));
        }
        for (name, lr) in [("group_a", self.group_a), ("group_b", self.group_b)] {
            if lr.peak <= 0.0 || lr.floor < 0.0 || lr.floor > lr.peak {
                return Err(Error::Config(format!(
                    "{name} rates need 0 < floor <= peak, got peak {} floor {}",
                    lr.peak, lr.floor
                )));
            }
        }
        if self.crop_len() < self.backbone.min_input_len() {
            return Err(Error::Config(format!(
                "crop of {} samples is below the encoder minimum of {}",
                self.crop_len(),
                self.backbone.min_input_len()
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_fraction) {
            return Err(Error::Config(format!(
                "mask_fraction {} outside [0, 1]",
                self.mask_fraction
            )));
        }
        Ok(())
    }

    pub fn crop_len(&self) -> usize {
        (self.crop_seconds * self.backbone.sample_rate as f64).round() as usize
    }

    pub fn schedule(&self) -> Result<Schedule> {
        let warmup = ((self.total_steps as f64 * self.warmup_fraction).round() as u64).max(1);
        Schedule::new(warmup, self.total_steps)
    }

    /// Corpus settings for the held-out evaluation speakers.
    pub fn eval_corpus(&self) -> data::CorpusConfig {
        data::CorpusConfig {
            num_speakers: self.eval_speakers,
            first_speaker: self.corpus.first_speaker + self.corpus.num_speakers,
            ..self.corpus.clone()
        }
    }
}

/// Adam with bias correction; moments are kept per parameter name so the
/// optimizer state can live inside the checkpoint container.
#[derive(Clone, Debug, Default)]
pub struct AdamState<F: Scalar> {
    pub m: BTreeMap<String, Tensor<F>>,
    pub v: BTreeMap<String, Tensor<F>>,
    /// Completed optimizer steps.
    pub step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new() -> Self {
        Self { m: BTreeMap::new(), v: BTreeMap::new(), step: 0 }
    }

    /// One update over the gradient map. Frozen parameters must not appear.
    pub fn apply(
        &mut self,
        reg: &mut ParamRegistry<F>,
        grads: &BTreeMap<String, Tensor<F>>,
        lr_a: f64,
        lr_b: f64,
    ) -> Result<()> {
        let t = self.step + 1;
        let c1 = F::fl(1.0 - ADAM_BETA1.powi(t as i32));
        let c2 = F::fl(1.0 - ADAM_BETA2.powi(t as i32));
        let b1 = F::fl(ADAM_BETA1);
        let b2 = F::fl(ADAM_BETA2);
        let eps = F::fl(ADAM_EPS);
        for (name, g) in grads {
            let p = reg.get_mut(name)?;
            if !p.trainable {
                return Err(Error::Contract(format!("gradient for frozen parameter `{name}`")));
            }
            if p.tensor.shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "gradient shape {:?} for parameter `{name}` of shape {:?}",
                    g.shape(),
                    p.tensor.shape()
                )));
            }
            let lr = F::fl(match p.group {
                LrGroup::A => lr_a,
                LrGroup::B => lr_b,
            });
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let one = F::one();
            for ((w, gi), (mi, vi)) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mi = b1 * *mi + (one - b1) * *gi;
                *vi = b2 * *vi + (one - b2) * *gi * *gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.step = t;
        Ok(())
    }
}

const STEP_KEY: &str = "meta.step";

/// Checkpoint = every parameter + `opt.m.*` / `opt.v.*` moments + the step
/// counter, all in one container.
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    reg: &ParamRegistry<F>,
    opt: &AdamState<F>,
) -> Result<()> {
    let step = Tensor::<F>::vector(vec![F::fl(opt.step as f64)]);
    let mut entries: Vec<(String, &Tensor<F>)> = vec![(STEP_KEY.to_string(), &step)];
    for (name, p) in reg.iter() {
        entries.push((name.to_string(), &p.tensor));
    }
    for (name, t) in &opt.m {
        entries.push((format!("opt.m.{name}"), t));
    }
    for (name, t) in &opt.v {
        entries.push((format!("opt.v.{name}"), t));
    }
    let borrowed: Vec<(&str, &Tensor<F>)> =
        entries.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    io::save_tensors(path, &borrowed)
}

/// Restore parameters into `reg` and return the optimizer state.
pub fn load_checkpoint<F: Scalar>(path: &Path, reg: &mut ParamRegistry<F>) -> Result<AdamState<F>> {
    let tensors = io::load_tensors::<F>(path)?;
    let mut opt = AdamState::new();
    let mut params = Vec::new();
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix("opt.m.") {
            opt.m.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            opt.v.insert(rest.to_string(), t);
        } else if name == STEP_KEY {
            opt.step = t.item()?.to_f64().unwrap() as u64;
        } else {
            params.push((name, t));
        }
    }
    reg.load_values(&params)?;
    Ok(opt)
}

/// Overwrite only the `backbone.*` tensors of `reg` from a weights file.
pub fn load_backbone_weights<F: Scalar>(path: &Path, reg: &mut ParamRegistry<F>) -> Result<()> {
    let tensors = io::load_tensors::<F>(path)?;
    let backbone_only: Vec<_> = tensors
        .into_iter()
        .filter(|(n, _)| n.starts_with("backbone."))
        .collect();
    if backbone_only.is_empty() {
        return Err(Error::Input(format!(
            "{} contains no backbone tensors",
            path.display()
        )));
    }
    reg.load_values(&backbone_only)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub lr_a: f64,
    pub lr_b: f64,
}

pub fn format_log(rows: &[LogRow]) -> String {
    let mut out = String::from("step,loss,lr_groupA,lr_groupB\n");
    for r in rows {
        out.push_str(&format!("{},{:.8},{:.8e},{:.8e}\n", r.step, r.loss, r.lr_a, r.lr_b));
    }
    out
}

pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub checkpoint: PathBuf,
}

fn sample_batch_indices(n_rows: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut rng = seeded_rng(seed, rng_tags::BATCH, step);
    (0..batch).map(|_| rng.gen_range(0..n_rows)).collect()
}

fn split_batch<F: Scalar>(batch: Vec<(Tensor<F>, usize)>) -> (Vec<Tensor<F>>, Vec<usize>) {
    batch.into_iter().unzip()
}

/// Method training: cross-entropy over the training corpus, two-group Adam,
/// CSV log, checkpoints. Resumable bit-exactly from `resume_from`.
pub fn train<F: Scalar>(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = Manifest::load(&cfg.data_dir.join("manifest.tsv"))?;
    let model = ModelConfig {
        backbone: cfg.backbone.clone(),
        method: cfg.method.clone(),
        backend: cfg.backend,
        num_speakers: manifest.speakers().len(),
    };
    let mut reg = model.init_registry::<F>(cfg.seed)?;
    if let Some(path) = &cfg.init_weights {
        load_backbone_weights(path, &mut reg)?;
    }
    let mut opt = AdamState::new();
    if let Some(path) = &cfg.resume_from {
        opt = load_checkpoint(path, &mut reg)?;
    }
    let sched = cfg.schedule()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let crop_len = cfg.crop_len();
    let mut log = Vec::new();
    for step in opt.step..cfg.total_steps {
        let rows = sample_batch_indices(manifest.rows.len(), cfg.batch_size, cfg.seed, step);
        let batch = data::load_batch::<F>(
            &manifest,
            &cfg.data_dir,
            &rows,
            crop_len,
            Crop::Random { seed: cfg.seed, step },
        )?;
        let (waves, labels) = split_batch(batch);
        let (loss, grads) = model.loss_and_grads(&reg, &waves, &labels, ForwardOpts::default())?;
        let lr_a = sched.rate(cfg.group_a, step);
        let lr_b = sched.rate(cfg.group_b, step);
        opt.apply(&mut reg, &grads, lr_a, lr_b)?;
        log.push(LogRow { step, loss, lr_a, lr_b });
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            save_checkpoint(&cfg.out_dir.join(format!("checkpoint_{}.petw", step + 1)), &reg, &opt)?;
        }
    }
    let checkpoint = cfg.out_dir.join("checkpoint_final.petw");
    save_checkpoint(&checkpoint, &reg, &opt)?;
    fs::write(cfg.out_dir.join("train_log.csv"), format_log(&log))?;
    Ok(TrainOutcome { log, checkpoint })
}

/// Masked-frame pseudo-pretraining of the backbone on the training corpus.
/// Writes the resulting `backbone.*` tensors to `<out_dir>/pretrained.petw`.
pub fn pretrain<F: Scalar>(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.backbone.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let manifest = Manifest::load(&cfg.data_dir.join("manifest.tsv"))?;
    let mut specs = cfg.backbone.param_specs(true, true);
    specs.extend(backbone::pretrain_head_specs(&cfg.backbone));
    let mut reg = ParamRegistry::<F>::from_specs(&specs, cfg.seed)?;
    let mut opt = AdamState::new();
    fs::create_dir_all(&cfg.out_dir)?;
    let crop_len = cfg.crop_len();
    let mut log = Vec::new();
    for step in 0..cfg.pretrain_steps {
        let rows = sample_batch_indices(manifest.rows.len(), cfg.batch_size, cfg.seed, step);
        let batch = data::load_batch::<F>(
            &manifest,
            &cfg.data_dir,
            &rows,
            crop_len,
            Crop::Random { seed: cfg.seed, step },
        )?;
        let (waves, _) = split_batch(batch);
        let (loss, grads) = backbone::pseudo_pretrain_step(
            &reg,
            &cfg.backbone,
            &waves,
            cfg.mask_fraction,
            cfg.seed,
            step,
        )?;
        let grads: BTreeMap<String, Tensor<F>> = grads.into_iter().collect();
        opt.apply(&mut reg, &grads, cfg.pretrain_lr, cfg.pretrain_lr)?;
        log.push(LogRow { step, loss, lr_a: cfg.pretrain_lr, lr_b: cfg.pretrain_lr });
    }
    let out = cfg.out_dir.join("pretrained.petw");
    let entries: Vec<(&str, &Tensor<F>)> = reg
        .iter()
        .filter(|(n, _)| n.starts_with("backbone."))
        .map(|(n, p)| (n, &p.tensor))
        .collect();
    io::save_tensors(&out, &entries)?;
    fs::write(cfg.out_dir.join("pretrain_log.csv"), format_log(&log))?;
    Ok(TrainOutcome { log, checkpoint: out })
}

pub struct EvalOutcome {
    pub eer: f64,
    pub min_dcf: f64,
    pub trials: TrialSet,
}

impl EvalOutcome {
    /// The one-line stdout form.
    pub fn summary(&self) -> String {
        format!("eer={:.6} mindcf={:.6}", self.eer, self.min_dcf)
    }

    pub fn metrics_csv(&self) -> String {
        format!("metric,value\neer,{:.6}\nmindcf,{:.6}\n", self.eer, self.min_dcf)
    }
}

/// Score seeded trials over the evaluation corpus with cosine similarity on
/// center-cropped embeddings, and compute EER / minDCF.
pub fn evaluate<F: Scalar>(
    cfg: &RunConfig,
    model: &ModelConfig,
    reg: &ParamRegistry<F>,
) -> Result<EvalOutcome> {
    let manifest = Manifest::load(&cfg.eval_dir.join("manifest.tsv"))?;
    let trials = data::make_trials(
        &manifest,
        cfg.num_target_trials,
        cfg.num_nontarget_trials,
        cfg.seed,
    )?;
    let needed: BTreeSet<&str> = trials
        .trials
        .iter()
        .flat_map(|t| [t.enroll.as_str(), t.test.as_str()])
        .collect();
    let crop_len = cfg.crop_len();
    let mut embeddings: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (i, row) in manifest.rows.iter().enumerate() {
        if !needed.contains(row.utt_id.as_str()) {
            continue;
        }
        let batch =
            data::load_batch::<F>(&manifest, &cfg.eval_dir, &[i], crop_len, Crop::Center)?;
        let emb = model.embed_utterance(reg, &batch[0].0)?;
        embeddings.insert(row.utt_id.clone(), emb);
    }
    let scored = metrics::score_trials(&trials, |id| embeddings.get(id).cloned())?;
    let scores = scored.scores.as_ref().expect("scored above");
    let labels: Vec<bool> = scored.trials.iter().map(|t| t.target).collect();
    let eer = metrics::compute_eer(scores, &labels)?;
    let min_dcf = metrics::compute_min_dcf(scores, &labels, &DcfParams::default())?;
    Ok(EvalOutcome { eer, min_dcf, trials: scored })
}

/// CSV table: one row per method with trainable count, backbone fraction,
/// and the head size excluding the training classifier.
pub fn report_params(
    backbone_cfg: &BackboneConfig,
    backend_cfg: &BackendConfig,
    methods: &[MethodSpec],
    num_speakers: usize,
) -> Result<String> {
    let mut out = String::from("method,trainable,fraction,backend_params\n");
    for spec in methods {
        let (count, fraction) = crate::pet::count_trainable(spec, backbone_cfg)?;
        let input_dim = if spec.method.uses_inter() {
            spec.inter_dim
        } else {
            backbone_cfg.hidden
        };
        let backend: u64 = crate::sv::backend_param_specs(backend_cfg, input_dim, num_speakers)
            .iter()
            .filter(|s| !s.name.starts_with("head.classifier"))
            .map(|s| s.numel())
            .sum();
        out.push_str(&format!(
            "{},{},{:.6},{}\n",
            spec.method.name(),
            count,
            fraction,
            backend
        ));
    }
    Ok(out)
}

/// CSV of the softmax-normalized layer weights (one row per Transformer
/// layer). Errors when the method has no layer weights.
pub fn export_layer_weights<F: Scalar>(reg: &ParamRegistry<F>) -> Result<String> {
    let logits = reg
        .get("pet.layer_weights")
        .or_else(|_| reg.get("pet.inter.layer_weights"))
        .map_err(|_| Error::Config("this method has no layer weights to export".into()))?;
    let vals: Vec<f64> = logits.tensor.data().iter().map(|v| v.to_f64().unwrap()).collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let mut out = String::from("layer,weight\n");
    for (i, e) in exps.iter().enumerate() {
        out.push_str(&format!("{},{:.8}\n", i + 1, e / sum));
    }
    Ok(out)
}
