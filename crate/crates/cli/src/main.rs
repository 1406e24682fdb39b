//! `surgcap`: data generation, training, adaptation, captioning and scoring
//! from the command line. Every subcommand reads and writes plain files so
//! the stages can be chained from a shell script.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use surgcap_core::calibration::{calibration_report, PredictionSet};
use surgcap_core::caption_metrics::{score_corpus, ScoreReport};
use surgcap_core::data::{generate_synthetic, load_jsonl, save_jsonl, AdaptMode, DatasetManifest, SynthConfig};
use surgcap_core::decoding::stack_report;
use surgcap_core::text::{normalize_tokenize, Vocab};
use surgcap_core::train::{
    adapt, generate_captions, load_checkpoint, save_checkpoint, teacher_forced_predictions, Datasets, StepLog,
    TrainConfig, Trainer,
};

const SD_TRAIN: &str = "sd_train.jsonl";
const SD_VAL: &str = "sd_val.jsonl";
const TD_TRAIN: &str = "td_train.jsonl";
const TD_VAL: &str = "td_val.jsonl";
const VOCAB: &str = "vocab.txt";
const MANIFEST: &str = "manifest.json";

#[derive(Parser)]
#[command(name = "surgcap", version, about = "Domain-adaptive surgical captioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-domain dataset.
    GenData(GenDataArgs),
    /// Train on the source domain, adversarially by default.
    Train(TrainArgs),
    /// Fine-tune a checkpoint on a target subset chosen by adaptation mode.
    Adapt(AdaptArgs),
    /// Caption every frame of a dataset file.
    Generate(GenerateArgs),
    /// Caption metrics of generated captions against references.
    Score(ScoreArgs),
    /// Calibration metrics from a probability dump.
    Calib(CalibArgs),
    /// Stack generated captions into a report.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` file applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single override, applied after --config. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Start from the full-scale hyperparameters instead of the desk preset.
    #[arg(long)]
    paper_scale: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = if self.paper_scale {
            TrainConfig::paper_scale()
        } else {
            TrainConfig::desk()
        };
        if let Some(path) = &self.config {
            cfg.apply_kv_file(path)?;
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Norm of the target-domain shift.
    #[arg(long)]
    shift: Option<f64>,
    /// 512-dimensional features instead of the 32-dimensional desk preset.
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by gen-data, or any directory with the same files.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines step log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// uda, zero, one or few.
    #[arg(long)]
    mode: AdaptMode,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file to caption.
    #[arg(long)]
    input: PathBuf,
    /// JSON-lines output, one {id, caption, logprob} per frame.
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the beam size stored in the checkpoint.
    #[arg(long)]
    beam: Option<usize>,
    /// Also write teacher-forced token distributions for `calib`.
    #[arg(long)]
    prob_dump: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Output of `generate`.
    #[arg(long)]
    hyps: PathBuf,
    /// Dataset file with reference captions.
    #[arg(long)]
    refs: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibArgs {
    /// Probability dump from `generate --prob-dump`.
    #[arg(long)]
    probs: PathBuf,
    /// Score file to extend with the calibration numbers, in place.
    #[arg(long)]
    score: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Output of `generate`.
    #[arg(long)]
    captions: PathBuf,
    /// Stacked report, one line per frame.
    #[arg(long)]
    out: PathBuf,
    /// Score file whose full ScoreReport is copied next to the report.
    #[arg(long)]
    score: Option<PathBuf>,
    /// Where the ScoreReport copy goes; defaults to the report path with a
    /// `.json` extension.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct CaptionLine {
    id: String,
    caption: String,
    logprob: f64,
}

#[derive(Serialize, Deserialize)]
struct ProbLine {
    probs: Vec<f64>,
    label: usize,
}

#[derive(Serialize)]
struct AdaptSummary<'a> {
    mode: String,
    n_frames: usize,
    ids: &'a [String],
    fingerprint_before: &'a str,
    fingerprint_after: &'a str,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Adapt(a) => run_adapt(a),
        Command::Generate(a) => generate(a),
        Command::Score(a) => score(a),
        Command::Calib(a) => calib(a),
        Command::Report(a) => report(a),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_lines<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn load_datasets(dir: &Path) -> Result<Datasets> {
    let load = |name: &str| load_jsonl(&dir.join(name), None).with_context(|| format!("loading {name}"));
    Ok(Datasets {
        source_train: load(SD_TRAIN)?,
        source_val: load(SD_VAL)?,
        target_train: load(TD_TRAIN)?,
        target_val: load(TD_VAL)?,
    })
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = if a.paper_scale {
        SynthConfig::default()
    } else {
        SynthConfig::desk()
    };
    cfg.seed = a.seed;
    if let Some(shift) = a.shift {
        cfg.shift_magnitude = shift;
    }
    let data = generate_synthetic(&cfg)?;
    let vocab = Vocab::build(&data.all_captions())?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    save_jsonl(&data.source_train, &a.out.join(SD_TRAIN))?;
    save_jsonl(&data.source_val, &a.out.join(SD_VAL))?;
    save_jsonl(&data.target_train, &a.out.join(TD_TRAIN))?;
    save_jsonl(&data.target_val, &a.out.join(TD_VAL))?;
    vocab.save(&a.out.join(VOCAB))?;
    let manifest = DatasetManifest::new(&cfg, &data, vocab.len());
    write_json(&a.out.join(MANIFEST), &manifest)?;
    eprintln!(
        "wrote {} source and {} target frames, vocabulary of {} to {}",
        data.source_train.len() + data.source_val.len(),
        data.target_train.len() + data.target_val.len(),
        vocab.len(),
        a.out.display()
    );
    Ok(())
}

fn dataset_vocab(dir: &Path, data: &Datasets) -> Result<Vocab> {
    let path = dir.join(VOCAB);
    if path.exists() {
        return Ok(Vocab::load(&path)?);
    }
    let captions: Vec<&str> = data
        .source_train
        .iter()
        .chain(&data.target_train)
        .filter_map(|s| s.caption.as_deref())
        .collect();
    Ok(Vocab::build(&captions)?)
}

fn write_log(path: Option<&Path>, history: &[StepLog]) -> Result<()> {
    match path {
        Some(p) => write_lines(p, history),
        None => Ok(()),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let data = load_datasets(&a.data)?;
    let vocab = dataset_vocab(&a.data, &data)?;
    let mut trainer = Trainer::new(cfg.clone(), vocab, data.feature_dim()?)?;
    trainer.fit(&data.source_train, &data.target_train)?;
    write_log(a.log.as_deref(), &trainer.history)?;
    save_checkpoint(&a.out, &trainer.params, &trainer.vocab, &cfg, trainer.steps_taken())?;
    if let Some(last) = trainer.history.last() {
        eprintln!(
            "{} steps, final L={:.4} L_y={:.4} L_S={:.4} L_T={:.4}",
            last.step, last.total, last.caption, last.source_domain, last.target_domain
        );
    }
    Ok(())
}

fn run_adapt(a: AdaptArgs) -> Result<()> {
    let data = load_datasets(&a.data)?;
    let mut trainer = load_checkpoint(&a.checkpoint)?.into_trainer();
    let (ids, before, after) = adapt(&mut trainer, a.mode, &data)?;
    write_log(a.log.as_deref(), &trainer.history)?;
    let cfg = trainer.cfg.clone();
    save_checkpoint(&a.out, &trainer.params, &trainer.vocab, &cfg, trainer.steps_taken())?;
    let summary = AdaptSummary {
        mode: a.mode.to_string(),
        n_frames: ids.len(),
        ids: &ids,
        fingerprint_before: &before,
        fingerprint_after: &after,
    };
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let samples = load_jsonl(&a.input, Some(ckpt.params.config.feature_dim))?;
    let beam = a.beam.unwrap_or(ckpt.train.beam_size);
    let generated = generate_captions(&ckpt.params, &ckpt.vocab, &samples, beam)?;
    write_lines(
        &a.out,
        samples.iter().zip(&generated).map(|(s, (g, text))| CaptionLine {
            id: s.id.clone(),
            caption: text.clone(),
            logprob: g.log_prob,
        }),
    )?;
    if let Some(path) = &a.prob_dump {
        let preds = teacher_forced_predictions(&ckpt.params, &ckpt.vocab, &samples)?;
        write_lines(
            path,
            preds.probs().iter().zip(preds.labels()).map(|(p, &label)| ProbLine {
                probs: p.clone(),
                label,
            }),
        )?;
    }
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let hyps: Vec<CaptionLine> = read_lines(&a.hyps)?;
    let refs = load_jsonl(&a.refs, None)?;
    let by_id: HashMap<&str, &str> = hyps.iter().map(|h| (h.id.as_str(), h.caption.as_str())).collect();
    let mut h = Vec::with_capacity(refs.len());
    let mut r = Vec::with_capacity(refs.len());
    for s in &refs {
        let Some(reference) = s.caption.as_deref() else {
            bail!("reference frame {} has no caption", s.id);
        };
        let Some(hyp) = by_id.get(s.id.as_str()) else {
            bail!("no generated caption for frame {}", s.id);
        };
        h.push(normalize_tokenize(hyp));
        r.push(normalize_tokenize(reference));
    }
    let report = score_corpus(&h, &r)?;
    emit(a.out.as_deref(), &report)
}

fn emit<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    match path {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn calib(a: CalibArgs) -> Result<()> {
    let rows: Vec<ProbLine> = read_lines(&a.probs)?;
    let (probs, labels) = rows.into_iter().map(|r| (r.probs, r.label)).unzip();
    let report = calibration_report(&PredictionSet::new(probs, labels)?)?;
    if let Some(path) = &a.score {
        let mut scores: ScoreReport = read_json(path)?;
        scores.calibration = Some(report);
        write_json(path, &scores)?;
    }
    emit(a.out.as_deref(), &report)
}

fn report(a: ReportArgs) -> Result<()> {
    let lines: Vec<CaptionLine> = read_lines(&a.captions)?;
    let frames: Vec<(&str, &str)> = lines.iter().map(|l| (l.id.as_str(), l.caption.as_str())).collect();
    fs::write(&a.out, stack_report(&frames)).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(score_path) = &a.score {
        let scores: ScoreReport = read_json(score_path)?;
        let json = a.json.clone().unwrap_or_else(|| a.out.with_extension("json"));
        write_json(&json, &scores)?;
        let names = [
            "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR", "ROUGE-L", "CIDEr", "ECE", "SCE", "TACE", "Brier",
        ];
        for (name, value) in names.iter().zip(scores.numbers()) {
            match value {
                Some(v) => println!("{name:<8} {v:.4}"),
                None => println!("{name:<8} -"),
            }
        }
    }
    Ok(())
}
