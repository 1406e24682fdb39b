//! Autoregressive caption generation: greedy and beam search, plus report
//! assembly from per-frame captions.
//!
//! Beam scores are raw cumulative log-probabilities with no length
//! normalisation.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{decode, encode, Dropout, ModelParams};
use crate::tensor::{Tape, Var};
use crate::text::{BOS_ID, EOS_ID};

/// Next-token log-probabilities for a prefix.
pub trait StepScorer {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Beam {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

/// Higher score first; ties go to the lexicographically smaller token
/// sequence, then to the shorter one.
fn rank(a: &Beam, b: &Beam) -> Ordering {
    b.log_prob
        .total_cmp(&a.log_prob)
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
}

/// Generated sequence (bos included) and its cumulative log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

/// Beam search from `bos`. Sequences never exceed `max_len` ids including
/// bos. Returns the best finished beam, or the best live one if none finished.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &mut S, beam_size: usize, max_len: usize) -> Result<Generated> {
    if beam_size == 0 {
        return Err(Error::invalid("beam_size must be at least 1"));
    }
    if max_len < 2 {
        return Err(Error::invalid("max_len must be at least 2"));
    }
    let mut beams = vec![Beam {
        tokens: vec![BOS_ID],
        log_prob: 0.0,
        finished: false,
    }];
    while beams.iter().any(|b| !b.finished && b.tokens.len() < max_len) {
        let mut candidates = Vec::new();
        for beam in beams {
            if beam.finished || beam.tokens.len() >= max_len {
                candidates.push(beam);
                continue;
            }
            let lp = scorer.next_log_probs(&beam.tokens)?;
            for (tok, &l) in lp.iter().enumerate() {
                let mut tokens = beam.tokens.clone();
                tokens.push(tok);
                candidates.push(Beam {
                    tokens,
                    log_prob: beam.log_prob + l,
                    finished: tok == EOS_ID,
                });
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(beam_size);
        beams = candidates;
    }
    let best = beams
        .iter()
        .filter(|b| b.finished)
        .min_by(|a, b| rank(a, b))
        .or_else(|| beams.iter().min_by(|a, b| rank(a, b)))
        .expect("beam set is never empty");
    Ok(Generated {
        tokens: best.tokens.clone(),
        log_prob: best.log_prob,
    })
}

/// Argmax decoding; ties go to the smaller token id.
pub fn greedy<S: StepScorer + ?Sized>(scorer: &mut S, max_len: usize) -> Result<Generated> {
    if max_len < 2 {
        return Err(Error::invalid("max_len must be at least 2"));
    }
    let mut tokens = vec![BOS_ID];
    let mut log_prob = 0.0;
    while tokens.len() < max_len {
        let lp = scorer.next_log_probs(&tokens)?;
        let (tok, &l) = lp
            .iter()
            .enumerate()
            .min_by(|a, b| b.1.total_cmp(a.1).then(a.0.cmp(&b.0)))
            .ok_or_else(|| Error::invalid("scorer returned no probabilities"))?;
        tokens.push(tok);
        log_prob += l;
        if tok == EOS_ID {
            break;
        }
    }
    Ok(Generated { tokens, log_prob })
}

/// Scores prefixes with the captioning model for one frame. The encoder
/// runs once; each step re-decodes the prefix on the same tape and then
/// discards those nodes.
pub struct ModelScorer<'a> {
    params: &'a ModelParams,
    tape: Tape,
    bindings: crate::params::Bindings,
    encoder_outputs: Vec<Var>,
    mark: usize,
}

impl<'a> ModelScorer<'a> {
    pub fn new(params: &'a ModelParams, regions: &[Vec<f64>]) -> Result<Self> {
        let mut tape = Tape::new();
        let bindings = params.store.bind(&mut tape)?;
        let x = tape.leaf_rows(regions)?;
        let encoder_outputs = encode(&mut tape, &bindings, params, x, &mut Dropout::eval())?;
        let mark = tape.len();
        Ok(Self {
            params,
            tape,
            bindings,
            encoder_outputs,
            mark,
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let logits = decode(
            &mut self.tape,
            &self.bindings,
            self.params,
            prefix,
            &self.encoder_outputs,
            &mut Dropout::eval(),
        )?;
        let k = self.tape.shape(logits)[1];
        let last = self.tape.slice_rows(logits, prefix.len() - 1, 1)?;
        let lp = self.tape.log_softmax(last, 1)?;
        let out = self.tape.value(lp)[..k].to_vec();
        self.tape.truncate(self.mark);
        Ok(out)
    }
}

/// Captions one frame with the model. `beam_size == 1` is greedy decoding.
pub fn generate(params: &ModelParams, regions: &[Vec<f64>], beam_size: usize, max_len: usize) -> Result<Generated> {
    let max_len = max_len.min(params.config.max_caption_len);
    let mut scorer = ModelScorer::new(params, regions)?;
    beam_search(&mut scorer, beam_size, max_len)
}

/// One `frame <id>: <caption>` line per frame, in input order.
pub fn stack_report<I: AsRef<str>, C: AsRef<str>>(frames: &[(I, C)]) -> String {
    frames
        .iter()
        .map(|(id, c)| format!("frame {}: {}\n", id.as_ref(), c.as_ref()))
        .collect()
}
