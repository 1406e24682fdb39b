//! Samples, JSON-lines storage, the synthetic two-domain generator and
//! adaptation-set selection.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain_head::{SOURCE_DOMAIN, TARGET_DOMAIN};
use crate::error::{Error, Result};
use crate::text::normalize_tokenize;

/// One frame: region feature rows plus an optional caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub domain: usize,
    pub regions: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

impl Sample {
    pub fn validate(&self, feature_dim: Option<usize>) -> Result<()> {
        if self.domain != SOURCE_DOMAIN && self.domain != TARGET_DOMAIN {
            return Err(Error::invalid(format!("domain {} is not 0 or 1", self.domain)));
        }
        if self.regions.is_empty() {
            return Err(Error::invalid("sample has no regions"));
        }
        let dim = feature_dim.unwrap_or(self.regions[0].len());
        for (i, row) in self.regions.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::invalid(format!(
                    "region {i} has {} features, expected {dim}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("region {i} has a non-finite feature")));
            }
        }
        Ok(())
    }
}

/// Reads one sample per non-empty line. Errors carry the 1-based line number.
pub fn load_jsonl(path: &Path, feature_dim: Option<usize>) -> Result<Vec<Sample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message,
        };
        let sample: Sample = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        sample.validate(feature_dim).map_err(|e| parse_err(e.to_string()))?;
        out.push(sample);
    }
    Ok(out)
}

pub fn save_jsonl(samples: &[Sample], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Object and predicate vocabulary of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainVocab {
    pub instruments: Vec<String>,
    pub tissues: Vec<String>,
    pub predicates: Vec<String>,
}

impl DomainVocab {
    pub fn objects(&self) -> BTreeSet<&str> {
        self.instruments
            .iter()
            .chain(&self.tissues)
            .map(String::as_str)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub source: DomainVocab,
    pub target: DomainVocab,
    pub feature_dim: usize,
    /// Standard deviation of each class-mean coordinate.
    pub mean_scale: f64,
    /// Scale of the per-predicate offset added to the object2 row.
    pub predicate_scale: f64,
    pub noise_scale: f64,
    /// Leading coordinates that carry class means and predicate offsets.
    /// The shift lives in the remaining coordinates when there are any.
    pub signal_dims: usize,
    /// Noise standard deviation is `noise_scale / tightness`.
    pub tightness: f64,
    /// Norm of the shift vector added to every target-domain row.
    pub shift_magnitude: f64,
    pub n_source_train: usize,
    pub n_source_val: usize,
    pub n_target_train: usize,
    pub n_target_val: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            source: DomainVocab {
                instruments: strings(&[
                    "bipolar forceps",
                    "prograsp forceps",
                    "monopolar curved scissors",
                    "clip applier",
                    "suction",
                    "ultrasound probe",
                    "stapler",
                    "large needle driver",
                ]),
                tissues: strings(&["tissue"]),
                predicates: strings(&[
                    "manipulating",
                    "grasping",
                    "retracting",
                    "cutting",
                    "cauterizing",
                    "looping",
                    "suctioning",
                    "clipping",
                    "ultrasound sensing",
                    "stapling",
                    "suturing",
                ]),
            },
            target: DomainVocab {
                instruments: strings(&[
                    "clip applier",
                    "suction",
                    "spatulated monopolar cautery",
                    "maryland dissector",
                ]),
                tissues: strings(&["tissue"]),
                predicates: strings(&["manipulating", "grasping", "cauterizing", "suctioning", "clipping"]),
            },
            feature_dim: 512,
            mean_scale: 1.0,
            predicate_scale: 1.0,
            noise_scale: 0.5,
            signal_dims: 512,
            tightness: 1.0,
            shift_magnitude: 12.0,
            n_source_train: 400,
            n_source_val: 100,
            n_target_train: 200,
            n_target_val: 100,
            seed: 7,
        }
    }
}

impl SynthConfig {
    /// 32-dimensional features, otherwise the defaults.
    pub fn desk() -> Self {
        Self {
            feature_dim: 32,
            signal_dims: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("source", &self.source), ("target", &self.target)] {
            if v.instruments.is_empty() || v.tissues.is_empty() || v.predicates.is_empty() {
                return Err(Error::invalid(format!("{name} vocabulary has an empty list")));
            }
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature_dim must be positive"));
        }
        if self.signal_dims == 0 || self.signal_dims > self.feature_dim {
            return Err(Error::invalid("signal_dims must be in 1..=feature_dim"));
        }
        if !(self.tightness > 0.0) || self.noise_scale < 0.0 || self.shift_magnitude < 0.0 {
            return Err(Error::invalid("tightness must be positive; noise and shift non-negative"));
        }
        if self.source.objects().is_disjoint(&self.target.objects()) {
            return Err(Error::invalid("domains must share at least one object"));
        }
        Ok(())
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_scale / self.tightness
    }
}

/// Deterministic stream derived from the config seed and a label.
fn named_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, std: f64) -> Vec<f64> {
    (0..dim).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Gaussian on the signal coordinates, zero elsewhere.
fn signal_vec(cfg: &SynthConfig, label: &str, std: f64) -> Vec<f64> {
    let mut v = gaussian_vec(&mut named_rng(cfg.seed, label), cfg.signal_dims, std);
    v.resize(cfg.feature_dim, 0.0);
    v
}

/// Class mean for an object; identical names share a mean across domains.
pub fn object_mean(cfg: &SynthConfig, object: &str) -> Vec<f64> {
    signal_vec(cfg, &format!("object:{object}"), cfg.mean_scale)
}

pub fn predicate_offset(cfg: &SynthConfig, predicate: &str) -> Vec<f64> {
    signal_vec(cfg, &format!("predicate:{predicate}"), cfg.predicate_scale)
}

/// Shift added to target rows: a seeded unit direction times the magnitude.
pub fn shift_vector(cfg: &SynthConfig) -> Vec<f64> {
    let mut dir = gaussian_vec(&mut named_rng(cfg.seed, "shift"), cfg.feature_dim, 1.0);
    if cfg.signal_dims < cfg.feature_dim {
        dir[..cfg.signal_dims].iter_mut().for_each(|v| *v = 0.0);
    }
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    dir.iter().map(|v| v / norm * cfg.shift_magnitude).collect()
}

fn article(word: &str) -> &'static str {
    match word.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

pub fn render_caption(instrument: &str, predicate: &str, tissue: &str) -> String {
    format!("{} {instrument} is {predicate} {tissue}", article(instrument))
}

/// Generated splits of both domains.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub source_train: Vec<Sample>,
    pub source_val: Vec<Sample>,
    pub target_train: Vec<Sample>,
    pub target_val: Vec<Sample>,
}

impl SynthData {
    pub fn all_captions(&self) -> Vec<&str> {
        [&self.source_train, &self.source_val, &self.target_train, &self.target_val]
            .into_iter()
            .flatten()
            .filter_map(|s| s.caption.as_deref())
            .collect()
    }
}

fn generate_domain(cfg: &SynthConfig, domain: usize, n: usize, split: &str) -> Vec<Sample> {
    let (vocab, prefix) = if domain == SOURCE_DOMAIN {
        (&cfg.source, "sd")
    } else {
        (&cfg.target, "td")
    };
    let shift = if domain == TARGET_DOMAIN {
        shift_vector(cfg)
    } else {
        vec![0.0; cfg.feature_dim]
    };
    let std = cfg.noise_std();
    let mut rng = named_rng(cfg.seed, &format!("samples:{prefix}:{split}"));
    (0..n)
        .map(|i| {
            let instrument = &vocab.instruments[rng.random_range(0..vocab.instruments.len())];
            let predicate = &vocab.predicates[rng.random_range(0..vocab.predicates.len())];
            let tissue = &vocab.tissues[rng.random_range(0..vocab.tissues.len())];
            let inst_mean = object_mean(cfg, instrument);
            let tissue_mean = object_mean(cfg, tissue);
            let offset = predicate_offset(cfg, predicate);
            let row0 = inst_mean
                .iter()
                .zip(&shift)
                .map(|(m, s)| m + s + std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let row1 = tissue_mean
                .iter()
                .zip(&offset)
                .zip(&shift)
                .map(|((m, o), s)| m + o + s + std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Sample {
                id: format!("{prefix}-{split}-{i:06}"),
                domain,
                regions: vec![row0, row1],
                caption: Some(render_caption(instrument, predicate, tissue)),
            }
        })
        .collect()
}

/// Both domains, train and validation splits. Deterministic in `cfg.seed`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    Ok(SynthData {
        source_train: generate_domain(cfg, SOURCE_DOMAIN, cfg.n_source_train, "train"),
        source_val: generate_domain(cfg, SOURCE_DOMAIN, cfg.n_source_val, "val"),
        target_train: generate_domain(cfg, TARGET_DOMAIN, cfg.n_target_train, "train"),
        target_val: generate_domain(cfg, TARGET_DOMAIN, cfg.n_target_val, "val"),
    })
}

/// Written beside a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_source_train: usize,
    pub n_source_val: usize,
    pub n_target_train: usize,
    pub n_target_val: usize,
    pub n_source_objects: usize,
    pub n_target_objects: usize,
    pub n_shared_objects: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub config: SynthConfig,
}

impl DatasetManifest {
    pub fn new(cfg: &SynthConfig, data: &SynthData, vocab_size: usize) -> Self {
        let (s, t) = (cfg.source.objects(), cfg.target.objects());
        Self {
            n_source_train: data.source_train.len(),
            n_source_val: data.source_val.len(),
            n_target_train: data.target_train.len(),
            n_target_val: data.target_val.len(),
            n_source_objects: s.len(),
            n_target_objects: t.len(),
            n_shared_objects: s.intersection(&t).count(),
            vocab_size,
            seed: cfg.seed,
            config: cfg.clone(),
        }
    }
}

/// Fine-tuning regime on the target domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptMode {
    Uda,
    Zero,
    One,
    Few,
}

impl AdaptMode {
    pub const ALL: [AdaptMode; 4] = [AdaptMode::Uda, AdaptMode::Zero, AdaptMode::One, AdaptMode::Few];
}

impl fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdaptMode::Uda => "uda",
            AdaptMode::Zero => "zero",
            AdaptMode::One => "one",
            AdaptMode::Few => "few",
        })
    }
}

impl FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uda" => Ok(AdaptMode::Uda),
            "zero" | "zero-shot" => Ok(AdaptMode::Zero),
            "one" | "one-shot" => Ok(AdaptMode::One),
            "few" | "few-shot" => Ok(AdaptMode::Few),
            other => Err(Error::invalid(format!("unknown adaptation mode {other:?}"))),
        }
    }
}

pub const ZERO_SHOT_COVERAGE: f64 = 0.85;
pub const FEW_SHOT_MULTIPLIER: usize = 2;

/// Distinct caption words of a set of samples.
pub fn caption_words(samples: &[Sample]) -> BTreeSet<String> {
    samples
        .iter()
        .filter_map(|s| s.caption.as_deref())
        .flat_map(normalize_tokenize)
        .collect()
}

fn words_of(s: &Sample) -> HashSet<String> {
    s.caption.as_deref().map(normalize_tokenize).unwrap_or_default().into_iter().collect()
}

/// Fraction of `universe` covered by the captions of `chosen`.
pub fn coverage(pool: &[Sample], chosen: &[usize], universe: &BTreeSet<String>) -> f64 {
    if universe.is_empty() {
        return 1.0;
    }
    let covered: HashSet<String> = chosen.iter().flat_map(|&i| words_of(&pool[i])).collect();
    universe.iter().filter(|w| covered.contains(*w)).count() as f64 / universe.len() as f64
}

/// Index of the best remaining sample by `score`, ties to the lowest id.
fn pick_best(pool: &[Sample], taken: &[bool], score: impl Fn(usize) -> usize) -> Option<(usize, usize)> {
    (0..pool.len())
        .filter(|&i| !taken[i])
        .map(|i| (i, score(i)))
        .min_by(|a, b| b.1.cmp(&a.1).then_with(|| pool[a.0].id.cmp(&pool[b.0].id)))
}

/// Greedy set cover until at least `threshold` of `universe` is covered.
fn greedy_cover(pool: &[Sample], universe: &BTreeSet<String>, threshold: f64) -> Result<Vec<usize>> {
    let words: Vec<HashSet<String>> = pool.iter().map(words_of).collect();
    let need = (threshold * universe.len() as f64 - 1e-9).ceil() as usize;
    let mut covered: HashSet<&str> = HashSet::new();
    let mut taken = vec![false; pool.len()];
    let mut chosen = Vec::new();
    let gain = |i: usize, covered: &HashSet<&str>| {
        words[i]
            .iter()
            .filter(|w| universe.contains(*w) && !covered.contains(w.as_str()))
            .count()
    };
    while covered.len() < need {
        let best = pick_best(pool, &taken, |i| gain(i, &covered));
        match best {
            Some((i, g)) if g > 0 => {
                taken[i] = true;
                chosen.push(i);
                for w in &words[i] {
                    if universe.contains(w) {
                        covered.insert(w.as_str());
                    }
                }
            }
            _ => {
                return Err(Error::invalid(format!(
                    "coverage {threshold} unreachable: {} of {} words appear in the pool",
                    covered.len(),
                    universe.len()
                )))
            }
        }
    }
    Ok(chosen)
}

/// Indices into `pool` of the frames used for target fine-tuning, in the
/// order they were selected.
pub fn select_adaptation_set(pool: &[Sample], universe: &BTreeSet<String>, mode: AdaptMode) -> Result<Vec<usize>> {
    if mode != AdaptMode::Uda && pool.iter().any(|s| s.caption.is_none()) {
        return Err(Error::invalid(format!("{mode} adaptation needs captioned samples")));
    }
    match mode {
        AdaptMode::Uda => Ok(Vec::new()),
        AdaptMode::Zero => greedy_cover(pool, universe, ZERO_SHOT_COVERAGE),
        AdaptMode::One => greedy_cover(pool, universe, 1.0),
        AdaptMode::Few => {
            let mut chosen = greedy_cover(pool, universe, 1.0)?;
            let mut taken = vec![false; pool.len()];
            for &i in &chosen {
                taken[i] = true;
            }
            let sizes: Vec<usize> = pool.iter().map(|s| words_of(s).len()).collect();
            for _ in 0..FEW_SHOT_MULTIPLIER * chosen.len() {
                let Some((i, _)) = pick_best(pool, &taken, |i| sizes[i]) else {
                    break;
                };
                taken[i] = true;
                chosen.push(i);
            }
            Ok(chosen)
        }
    }
}
