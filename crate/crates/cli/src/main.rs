//! `petforge`: corpus generation, pretraining, method training, evaluation,
//! parameter accounting, and scoring, all driven by one JSON config.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric abort, 1 anything
//! else.

use clap::{Args, Parser, Subcommand};
use petforge_core::data;
use petforge_core::metrics;
use petforge_core::model::ModelConfig;
use petforge_core::params::{LrGroup, ParamRegistry};
use petforge_core::pet::{Method, MethodSpec};
use petforge_core::train::{self, RunConfig};
use petforge_core::{Error, Result};
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "petforge", version, about = "Parameter-efficient tuning lab for a frozen speech encoder")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to read; defaults to `<out_dir>/checkpoint_final.petw`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Trial list: `label enroll test` per line, label 1 = same speaker.
    #[arg(long)]
    trials: PathBuf,
    /// Score file: `enroll test score` per line.
    #[arg(long)]
    scores: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic train and eval corpora.
    GenData(Common),
    /// Masked-frame pseudo-pretraining of the backbone.
    Pretrain(Common),
    /// Train the configured method.
    Train(Common),
    /// Score trials and report EER / minDCF.
    Eval(CheckpointArgs),
    /// Trainable-parameter table for every method at the configured scale.
    CountParams(Common),
    /// Export softmax-normalized layer weights from a checkpoint.
    ExportWeights(CheckpointArgs),
    /// Compute EER / minDCF from an existing trial list and score file.
    Score(ScoreArgs),
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let train = data::gen_corpus(&cfg.corpus, cfg.seed, &cfg.data_dir)?;
    let eval = data::gen_corpus(&cfg.eval_corpus(), cfg.seed, &cfg.eval_dir)?;
    println!(
        "wrote {} train utterances to {} and {} eval utterances to {}",
        train.rows.len(),
        cfg.data_dir.display(),
        eval.rows.len(),
        cfg.eval_dir.display()
    );
    Ok(())
}

fn pretrain(cfg: &RunConfig) -> Result<()> {
    let outcome = train::pretrain::<f32>(cfg)?;
    let last = outcome.log.last().map(|r| r.loss).unwrap_or(0.0);
    println!("pretrained backbone -> {} (final loss {last:.6})", outcome.checkpoint.display());
    Ok(())
}

fn run_train(cfg: &RunConfig) -> Result<()> {
    let outcome = train::train::<f32>(cfg)?;
    let last = outcome.log.last().map(|r| r.loss).unwrap_or(0.0);
    println!("checkpoint -> {} (final loss {last:.6})", outcome.checkpoint.display());
    Ok(())
}

/// Rebuild the model around a checkpoint; speaker count comes from the stored
/// classifier shape.
fn model_from_checkpoint(
    cfg: &RunConfig,
    path: &PathBuf,
) -> Result<(ModelConfig, ParamRegistry<f32>)> {
    let tensors = petforge_core::io::load_tensors::<f32>(path)?;
    let classifier = tensors
        .iter()
        .find(|(n, _)| n == "head.classifier.w")
        .ok_or_else(|| Error::Input(format!("{} has no classifier tensor", path.display())))?;
    let num_speakers = classifier.1.shape()[1];
    let model = ModelConfig {
        backbone: cfg.backbone.clone(),
        method: cfg.method.clone(),
        backend: cfg.backend,
        num_speakers,
    };
    let mut reg = model.init_registry::<f32>(cfg.seed)?;
    train::load_checkpoint(path, &mut reg)?;
    Ok((model, reg))
}

fn eval(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    cfg.validate()?;
    let path = checkpoint.unwrap_or_else(|| cfg.out_dir.join("checkpoint_final.petw"));
    let (model, reg) = model_from_checkpoint(cfg, &path)?;
    let outcome = train::evaluate(cfg, &model, &reg)?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("scores.txt"), metrics::format_score_file(&outcome.trials)?)?;
    fs::write(cfg.out_dir.join("metrics.csv"), outcome.metrics_csv())?;
    println!("{}", outcome.summary());
    Ok(())
}

fn count_params(cfg: &RunConfig) -> Result<()> {
    let methods: Vec<MethodSpec> = Method::ALL
        .into_iter()
        .map(|m| MethodSpec { method: m, ..cfg.method.clone() })
        .collect();
    let csv = train::report_params(&cfg.backbone, &cfg.backend, &methods, cfg.corpus.num_speakers)?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("params.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn export_weights(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let path = checkpoint.unwrap_or_else(|| cfg.out_dir.join("checkpoint_final.petw"));
    let tensors = petforge_core::io::load_tensors::<f32>(&path)?;
    let mut reg = ParamRegistry::new();
    for (name, t) in tensors {
        if name == "pet.layer_weights" || name == "pet.inter.layer_weights" {
            reg.insert(&name, t, true, LrGroup::B)?;
        }
    }
    let csv = train::export_layer_weights(&reg)?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("layer_weights.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn score(args: &ScoreArgs) -> Result<()> {
    let trials = metrics::parse_trial_list(&fs::read_to_string(&args.trials)?)?;
    let scored = metrics::parse_score_file(&fs::read_to_string(&args.scores)?)?;
    let mut by_pair = std::collections::BTreeMap::new();
    for (enroll, test, score) in scored {
        by_pair.insert((enroll, test), score);
    }
    let mut scores = Vec::with_capacity(trials.trials.len());
    let mut labels = Vec::with_capacity(trials.trials.len());
    for t in &trials.trials {
        let s = by_pair
            .get(&(t.enroll.clone(), t.test.clone()))
            .ok_or_else(|| Error::Lookup(format!("no score for trial {} {}", t.enroll, t.test)))?;
        scores.push(*s);
        labels.push(t.target);
    }
    let eer = metrics::compute_eer(&scores, &labels)?;
    let min_dcf = metrics::compute_min_dcf(&scores, &labels, &Default::default())?;
    println!("eer={eer:.6} mindcf={min_dcf:.6}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::GenData(c) => gen_data(&c.load()?),
        Cmd::Pretrain(c) => pretrain(&c.load()?),
        Cmd::Train(c) => run_train(&c.load()?),
        Cmd::Eval(a) => eval(&a.common.load()?, a.checkpoint.clone()),
        Cmd::CountParams(c) => count_params(&c.load()?),
        Cmd::ExportWeights(a) => export_weights(&a.common.load()?, a.checkpoint.clone()),
        Cmd::Score(a) => score(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}
