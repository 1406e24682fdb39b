//! Domain classifier behind a gradient reversal layer: GRL, then three
//! fully-connected layers with ReLU between them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{Bindings, Init, ParamId, ParamStore};
use crate::tensor::{Tape, Var};

/// Domain labels. Class 2 only widens the softmax; nothing is labelled with it.
pub const SOURCE_DOMAIN: usize = 0;
pub const TARGET_DOMAIN: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainHeadConfig {
    pub input_dim: usize,
    pub hidden: [usize; 2],
    pub n_classes: usize,
    pub grl_lambda: f64,
}

impl DomainHeadConfig {
    pub fn for_model(model: &ModelConfig) -> Self {
        Self {
            input_dim: model.d_model,
            hidden: [64, 32],
            n_classes: 3,
            grl_lambda: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.n_classes) {
            return Err(Error::invalid(format!(
                "n_domain_classes must be 2 or 3, got {}",
                self.n_classes
            )));
        }
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid("domain head dimensions must be positive"));
        }
        if !(self.grl_lambda >= 0.0 && self.grl_lambda.is_finite()) {
            return Err(Error::invalid(format!("grl_lambda {} must be >= 0", self.grl_lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DomainHeadLayout {
    pub layers: [(ParamId, ParamId); 3],
}

impl DomainHeadLayout {
    pub fn register<R: Rng + ?Sized>(cfg: &DomainHeadConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let dims = [cfg.input_dim, cfg.hidden[0], cfg.hidden[1], cfg.n_classes];
        let mut layer = |i: usize| -> Result<(ParamId, ParamId)> {
            Ok((
                store.add(format!("domain.fc{}.w", i + 1), &[dims[i], dims[i + 1]], Init::Xavier, rng)?,
                store.add(format!("domain.fc{}.b", i + 1), &[dims[i + 1]], Init::Zeros, rng)?,
            ))
        };
        Ok(Self {
            layers: [layer(0)?, layer(1)?, layer(2)?],
        })
    }
}

/// Unnormalised domain logits, [1, n_classes], for an encoder summary.
pub fn domain_logits(
    tape: &mut Tape,
    b: &Bindings,
    cfg: &DomainHeadConfig,
    layout: &DomainHeadLayout,
    summary: Var,
) -> Result<Var> {
    let reversed = tape.grad_reverse(summary, cfg.grl_lambda)?;
    classifier(tape, b, cfg, layout, reversed)
}

/// The same three layers without the reversal in front.
pub fn classifier(
    tape: &mut Tape,
    b: &Bindings,
    cfg: &DomainHeadConfig,
    layout: &DomainHeadLayout,
    input: Var,
) -> Result<Var> {
    if tape.shape(input) != [1, cfg.input_dim] {
        return Err(Error::Shape {
            op: "domain_logits",
            lhs: tape.shape(input).to_vec(),
            rhs: vec![1, cfg.input_dim],
        });
    }
    let mut h = input;
    for (i, &(w, bias)) in layout.layers.iter().enumerate() {
        let y = tape.matmul(h, b[w])?;
        h = tape.add_row(y, b[bias])?;
        if i < 2 {
            h = tape.relu(h);
        }
    }
    Ok(h)
}
