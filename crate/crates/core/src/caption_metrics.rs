//! Caption quality metrics over tokenised hypothesis/reference pairs, one
//! reference per hypothesis.
//!
//! * BLEU-n: corpus-level clipped n-gram precision, geometric mean over
//!   orders 1..=n, brevity penalty from corpus lengths. Zero precisions are
//!   floored at [`BLEU_FLOOR`].
//! * ROUGE-L: LCS F-measure with β = 1.2, averaged over pairs.
//! * METEOR-lite: exact unigram matches only (no stemming or synonyms).
//! * CIDEr-D: TF-IDF n-gram vectors (n = 1..4), clipped similarity,
//!   Gaussian length penalty with σ = 6, ×10.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationReport;
use crate::error::{Error, Result};
use crate::text::normalize_tokenize;

pub const BLEU_FLOOR: f64 = 1e-9;
pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_MAX_N: usize = 4;

/// Identifies the exact metric definitions used to produce a report.
pub const METRIC_VERSION: &str = "bleu-corpus-floor1e-9/rouge-l-beta1.2/meteor-lite-exact-greedy/cider-d-sigma6";

pub type Tokens = Vec<String>;

/// Scores for one corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub bleu: [f64; 4],
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub corpus_size: usize,
    pub metric_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationReport>,
}

impl ScoreReport {
    /// All eleven numbers, BLEU-1..4, METEOR, ROUGE-L, CIDEr, ECE, SCE,
    /// TACE, Brier. Calibration entries are `None` when absent.
    pub fn numbers(&self) -> Vec<Option<f64>> {
        let mut v: Vec<Option<f64>> = self.bleu.iter().map(|&b| Some(b)).collect();
        v.extend([Some(self.meteor), Some(self.rouge_l), Some(self.cider)]);
        match &self.calibration {
            Some(c) => v.extend([Some(c.ece), Some(c.sce), Some(c.tace), Some(c.brier)]),
            None => v.extend([None; 4]),
        }
        v
    }
}

fn check_pairs(hyps: &[Tokens], refs: &[Tokens]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::invalid(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with orders 1..=n.
pub fn bleu_n(hyps: &[Tokens], refs: &[Tokens], n: usize) -> Result<f64> {
    check_pairs(hyps, refs)?;
    if n == 0 {
        return Err(Error::invalid("BLEU order must be at least 1"));
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (h, r) in hyps.iter().zip(refs) {
            let hc = ngram_counts(h, order);
            let rc = ngram_counts(r, order);
            total += h.len().saturating_sub(order - 1);
            matched += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
        let p = if matched == 0 || total == 0 {
            BLEU_FLOOR
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    let bp = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * (log_sum / n as f64).exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure for a single pair.
pub fn rouge_l_pair(hyp: &[String], reference: &[String]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(hyp, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / hyp.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l(hyps: &[Tokens], refs: &[Tokens]) -> Result<f64> {
    check_pairs(hyps, refs)?;
    Ok(hyps.iter().zip(refs).map(|(h, r)| rouge_l_pair(h, r)).sum::<f64>() / hyps.len() as f64)
}

/// Exact-match alignment: each hypothesis token, left to right, takes the
/// earliest unused identical reference token. Returns (hyp, ref) position
/// pairs in hypothesis order.
pub fn align_exact(hyp: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    for (i, h) in hyp.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && &reference[j] == h) {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs
}

/// Number of runs of matches adjacent in both sentences.
fn chunks(pairs: &[(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

/// METEOR-lite for one pair: `F_mean · (1 − 0.5·(chunks/matches)³)`.
pub fn meteor_lite_pair(hyp: &[String], reference: &[String]) -> f64 {
    let pairs = align_exact(hyp, reference);
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks(&pairs) as f64 / m as f64).powi(3);
    f_mean * (1.0 - penalty)
}

pub fn meteor_lite(hyps: &[Tokens], refs: &[Tokens]) -> Result<f64> {
    check_pairs(hyps, refs)?;
    Ok(hyps.iter().zip(refs).map(|(h, r)| meteor_lite_pair(h, r)).sum::<f64>() / hyps.len() as f64)
}

struct TfIdf {
    vecs: Vec<BTreeMap<Vec<String>, f64>>,
    norms: Vec<f64>,
    len: usize,
}

fn tfidf(tokens: &[String], doc_freq: &BTreeMap<Vec<String>, usize>, log_n: f64) -> TfIdf {
    let mut vecs = Vec::with_capacity(CIDER_MAX_N);
    let mut norms = Vec::with_capacity(CIDER_MAX_N);
    for n in 1..=CIDER_MAX_N {
        let mut v = BTreeMap::new();
        for (g, c) in ngram_counts(tokens, n) {
            let df = doc_freq.get(g).copied().unwrap_or(0).max(1) as f64;
            v.insert(g.to_vec(), c as f64 * (log_n - df.ln()));
        }
        norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
        vecs.push(v);
    }
    TfIdf {
        vecs,
        norms,
        len: tokens.len(),
    }
}

/// CIDEr-D. Document frequencies come from the reference set.
pub fn cider(hyps: &[Tokens], refs: &[Tokens]) -> Result<f64> {
    check_pairs(hyps, refs)?;
    let mut doc_freq: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    for r in refs {
        for n in 1..=CIDER_MAX_N {
            for g in ngram_counts(r, n).into_keys() {
                *doc_freq.entry(g.to_vec()).or_insert(0) += 1;
            }
        }
    }
    let log_n = (refs.len() as f64).ln();
    let mut total = 0.0;
    for (h, r) in hyps.iter().zip(refs) {
        let hv = tfidf(h, &doc_freq, log_n);
        let rv = tfidf(r, &doc_freq, log_n);
        let delta = hv.len as f64 - rv.len as f64;
        let gauss = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        let mut score = 0.0;
        for n in 0..CIDER_MAX_N {
            let mut dot = 0.0;
            for (g, &x) in &hv.vecs[n] {
                if let Some(&y) = rv.vecs[n].get(g) {
                    dot += x.min(y) * y;
                }
            }
            if hv.norms[n] != 0.0 && rv.norms[n] != 0.0 {
                dot /= hv.norms[n] * rv.norms[n];
            }
            score += dot * gauss;
        }
        total += score / CIDER_MAX_N as f64 * 10.0;
    }
    Ok(total / hyps.len() as f64)
}

/// Every caption metric for a corpus.
pub fn score_corpus(hyps: &[Tokens], refs: &[Tokens]) -> Result<ScoreReport> {
    let mut bleu = [0.0; 4];
    for (n, b) in bleu.iter_mut().enumerate() {
        *b = bleu_n(hyps, refs, n + 1)?;
    }
    Ok(ScoreReport {
        bleu,
        meteor: meteor_lite(hyps, refs)?,
        rouge_l: rouge_l(hyps, refs)?,
        cider: cider(hyps, refs)?,
        corpus_size: hyps.len(),
        metric_version: METRIC_VERSION.to_string(),
        calibration: None,
    })
}

/// Tokenises raw caption strings with the caption tokenizer.
pub fn tokenize_all<S: AsRef<str>>(captions: &[S]) -> Vec<Tokens> {
    captions.iter().map(|c| normalize_tokenize(c.as_ref())).collect()
}
