//! Label-smoothed cross-entropy for captions, vanilla cross-entropy for the
//! domain head, and their plain sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Smoothing factor for the caption loss.
    pub epsilon: f64,
    /// Smoothing for the domain loss. Zero: domain targets stay one-hot.
    pub domain_epsilon: f64,
    pub pad_id: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            domain_epsilon: 0.0,
            pad_id: crate::text::PAD_ID,
        }
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [0,1]")));
    }
    Ok(())
}

/// `(1-ε)·onehot + ε/K`.
pub fn smooth_labels(true_class: usize, k: usize, epsilon: f64) -> Result<Vec<f64>> {
    check_epsilon(epsilon)?;
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {k}")));
    }
    if true_class >= k {
        return Err(Error::invalid(format!("class {true_class} outside 0..{k}")));
    }
    let off = epsilon / k as f64;
    let mut t = vec![off; k];
    t[true_class] = (1.0 - epsilon) + off;
    Ok(t)
}

/// `-Σ T_LS · log softmax(logits)` for a single [K] or [1, K] logit vector.
pub fn ce_ls(tape: &mut Tape, logits: Var, true_class: usize, epsilon: f64) -> Result<Var> {
    let k = tape.value(logits).len();
    let axis = tape.shape(logits).len() - 1;
    let target = smooth_labels(true_class, k, epsilon)?;
    let logp = tape.log_softmax(logits, axis)?;
    tape.weighted_sum(logp, target.into_iter().map(|t| -t).collect())
}

/// Smoothed cross-entropy summed over the non-pad rows of `logits`
/// ([t, K]) and multiplied by `scale`. Returns the loss and the number of
/// rows that entered it.
pub fn caption_loss_scaled(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    epsilon: f64,
    pad_id: usize,
    scale: f64,
) -> Result<(Var, usize)> {
    let (rows, k) = match tape.shape(logits) {
        [r, k] => (*r, *k),
        s => {
            return Err(Error::Shape {
                op: "caption_loss",
                lhs: s.to_vec(),
                rhs: vec![targets.len()],
            })
        }
    };
    if rows != targets.len() {
        return Err(Error::Shape {
            op: "caption_loss",
            lhs: vec![rows, k],
            rhs: vec![targets.len()],
        });
    }
    let mut weights = vec![0.0; rows * k];
    let mut count = 0;
    for (i, &t) in targets.iter().enumerate() {
        if t == pad_id {
            continue;
        }
        count += 1;
        let row = smooth_labels(t, k, epsilon)?;
        for (w, v) in weights[i * k..(i + 1) * k].iter_mut().zip(row) {
            *w = -v * scale;
        }
    }
    if count == 0 {
        return Err(Error::invalid("caption_loss: every target is padding"));
    }
    let logp = tape.log_softmax(logits, 1)?;
    Ok((tape.weighted_sum(logp, weights)?, count))
}

/// Mean smoothed cross-entropy over the non-pad target positions.
pub fn caption_loss(tape: &mut Tape, logits: Var, targets: &[usize], epsilon: f64, pad_id: usize) -> Result<Var> {
    let count = targets.iter().filter(|&&t| t != pad_id).count();
    if count == 0 {
        return Err(Error::invalid("caption_loss: every target is padding"));
    }
    caption_loss_scaled(tape, logits, targets, epsilon, pad_id, 1.0 / count as f64).map(|(v, _)| v)
}

/// Per-term values of the combined objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub caption: f64,
    pub source_domain: f64,
    pub target_domain: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.caption, self.source_domain, self.target_domain]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `L = L_y + L_S + L_T`. Absent domain terms count as zero.
pub fn total_loss(tape: &mut Tape, caption: Var, source: Option<Var>, target: Option<Var>) -> Result<(Var, LossBreakdown)> {
    let mut total = caption;
    for term in [source, target].into_iter().flatten() {
        total = tape.add(total, term)?;
    }
    let value = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
    let breakdown = LossBreakdown {
        total: tape.scalar(total),
        caption: tape.scalar(caption),
        source_domain: value(source),
        target_domain: value(target),
    };
    Ok((total, breakdown))
}
