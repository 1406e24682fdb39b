//! Memory-augmented encoder and meshed decoder over region features.
//!
//! The encoder is a stack of self-attention + feed-forward blocks whose
//! attention keys and values are extended with learned memory slots. Every
//! encoder layer's output is kept: each decoder layer cross-attends all of
//! them separately and fuses the results through learned sigmoid gates.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain_head::{DomainHeadConfig, DomainHeadLayout};
use crate::error::{Error, Result};
use crate::params::{Bindings, Init, ParamId, ParamStore};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Learned key/value slots per encoder layer; 0 disables memory.
    pub n_memory_slots: usize,
    pub d_ff: usize,
    pub feature_dim: usize,
    /// Longest token sequence (bos and eos included) the decoder accepts.
    pub max_caption_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 3,
            n_memory_slots: 8,
            d_ff: 256,
            feature_dim: 512,
            max_caption_len: 16,
            vocab_size: 49,
            dropout: 0.1,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Small preset used for CI and the acceptance suite.
    pub fn desk(feature_dim: usize, vocab_size: usize) -> Self {
        Self {
            feature_dim,
            vocab_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::invalid("n_layers must be at least 1"));
        }
        if self.d_ff == 0 || self.feature_dim == 0 || self.vocab_size < 2 {
            return Err(Error::invalid("d_ff, feature_dim and vocab_size must be positive"));
        }
        if self.max_caption_len < 2 {
            return Err(Error::invalid("max_caption_len must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Debug, Clone)]
pub struct NormLayout {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct FeedForwardLayout {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncoderLayerLayout {
    pub attn: AttentionLayout,
    /// Memory keys and values, each [n_memory_slots, d_model].
    pub memory: Option<(ParamId, ParamId)>,
    pub norm1: NormLayout,
    pub ff: FeedForwardLayout,
    pub norm2: NormLayout,
}

#[derive(Debug, Clone)]
pub struct MeshGateLayout {
    /// [2·d_model, d_model]
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct DecoderLayerLayout {
    pub self_attn: AttentionLayout,
    pub norm1: NormLayout,
    pub cross_attn: AttentionLayout,
    /// One gate per encoder layer.
    pub gates: Vec<MeshGateLayout>,
    pub norm2: NormLayout,
    pub ff: FeedForwardLayout,
    pub norm3: NormLayout,
}

#[derive(Debug, Clone)]
pub struct ModelLayout {
    pub input_w: ParamId,
    pub input_b: ParamId,
    pub input_norm: NormLayout,
    pub encoder: Vec<EncoderLayerLayout>,
    pub embedding: ParamId,
    pub decoder: Vec<DecoderLayerLayout>,
    pub output_w: ParamId,
    pub output_b: ParamId,
}

/// Every learnable weight: captioning network plus domain head.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub head_config: DomainHeadConfig,
    pub store: ParamStore,
    pub layout: ModelLayout,
    pub head: DomainHeadLayout,
}

struct Registrar<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Registrar<'_, R> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> Result<ParamId> {
        self.store.add(name, shape, init, self.rng)
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Result<AttentionLayout> {
        Ok(AttentionLayout {
            wq: self.add(format!("{prefix}.wq"), &[d, d], Init::Xavier)?,
            bq: self.add(format!("{prefix}.bq"), &[d], Init::Zeros)?,
            wk: self.add(format!("{prefix}.wk"), &[d, d], Init::Xavier)?,
            bk: self.add(format!("{prefix}.bk"), &[d], Init::Zeros)?,
            wv: self.add(format!("{prefix}.wv"), &[d, d], Init::Xavier)?,
            bv: self.add(format!("{prefix}.bv"), &[d], Init::Zeros)?,
            wo: self.add(format!("{prefix}.wo"), &[d, d], Init::Xavier)?,
            bo: self.add(format!("{prefix}.bo"), &[d], Init::Zeros)?,
        })
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<NormLayout> {
        Ok(NormLayout {
            gain: self.add(format!("{prefix}.gain"), &[d], Init::Ones)?,
            bias: self.add(format!("{prefix}.bias"), &[d], Init::Zeros)?,
        })
    }

    fn feed_forward(&mut self, prefix: &str, d: usize, d_ff: usize) -> Result<FeedForwardLayout> {
        Ok(FeedForwardLayout {
            w1: self.add(format!("{prefix}.w1"), &[d, d_ff], Init::Xavier)?,
            b1: self.add(format!("{prefix}.b1"), &[d_ff], Init::Zeros)?,
            w2: self.add(format!("{prefix}.w2"), &[d_ff, d], Init::Xavier)?,
            b2: self.add(format!("{prefix}.b2"), &[d], Init::Zeros)?,
        })
    }
}

impl ModelParams {
    /// Registers and initialises every parameter. The registration order is
    /// fixed, so the layout is a pure function of the two configs.
    pub fn new(config: ModelConfig, head_config: DomainHeadConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        head_config.validate()?;
        if head_config.input_dim != config.d_model {
            return Err(Error::invalid(format!(
                "domain head input_dim {} != d_model {}",
                head_config.input_dim, config.d_model
            )));
        }
        let d = config.d_model;
        let mut store = ParamStore::new();
        let mut reg = Registrar {
            store: &mut store,
            rng,
        };

        let input_w = reg.add("input.w".into(), &[config.feature_dim, d], Init::Xavier)?;
        let input_b = reg.add("input.b".into(), &[d], Init::Zeros)?;
        let input_norm = reg.norm("input.norm", d)?;

        let mut encoder = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("enc.{l}");
            let attn = reg.attention(&format!("{p}.attn"), d)?;
            let memory = if config.n_memory_slots > 0 {
                let m = config.n_memory_slots;
                let std = 1.0 / (config.head_dim() as f64).sqrt();
                Some((
                    reg.add(format!("{p}.mem_k"), &[m, d], Init::Normal(std))?,
                    reg.add(format!("{p}.mem_v"), &[m, d], Init::Normal(std))?,
                ))
            } else {
                None
            };
            encoder.push(EncoderLayerLayout {
                attn,
                memory,
                norm1: reg.norm(&format!("{p}.norm1"), d)?,
                ff: reg.feed_forward(&format!("{p}.ff"), d, config.d_ff)?,
                norm2: reg.norm(&format!("{p}.norm2"), d)?,
            });
        }

        let embedding = reg.add("embed".into(), &[config.vocab_size, d], Init::Normal(0.1))?;

        let mut decoder = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("dec.{l}");
            let self_attn = reg.attention(&format!("{p}.self_attn"), d)?;
            let norm1 = reg.norm(&format!("{p}.norm1"), d)?;
            let cross_attn = reg.attention(&format!("{p}.cross_attn"), d)?;
            let gates = (0..config.n_layers)
                .map(|e| {
                    Ok(MeshGateLayout {
                        w: reg.add(format!("{p}.gate{e}.w"), &[2 * d, d], Init::Xavier)?,
                        b: reg.add(format!("{p}.gate{e}.b"), &[d], Init::Zeros)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            decoder.push(DecoderLayerLayout {
                self_attn,
                norm1,
                cross_attn,
                gates,
                norm2: reg.norm(&format!("{p}.norm2"), d)?,
                ff: reg.feed_forward(&format!("{p}.ff"), d, config.d_ff)?,
                norm3: reg.norm(&format!("{p}.norm3"), d)?,
            });
        }

        let output_w = reg.add("output.w".into(), &[d, config.vocab_size], Init::Xavier)?;
        let output_b = reg.add("output.b".into(), &[config.vocab_size], Init::Zeros)?;
        let head = DomainHeadLayout::register(&head_config, &mut store, rng)?;

        Ok(Self {
            config,
            head_config,
            store,
            layout: ModelLayout {
                input_w,
                input_b,
                input_norm,
                encoder,
                embedding,
                decoder,
                output_w,
                output_b,
            },
            head,
        })
    }

    /// Rebuilds the layout for `config` and fills it with loaded weights.
    pub fn from_store(config: ModelConfig, head_config: DomainHeadConfig, loaded: &ParamStore) -> Result<Self> {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut params = Self::new(config, head_config, &mut rng)?;
        params.store.copy_from(loaded)?;
        Ok(params)
    }
}

/// Dropout applied through a constant mask. Disabled at evaluation time.
pub struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn eval() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => {
                let keep = 1.0 - self.rate;
                let mask = (0..tape.value(x).len())
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                tape.mul_const(x, mask)
            }
            _ => Ok(x),
        }
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn norm(tape: &mut Tape, b: &Bindings, n: &NormLayout, x: Var, eps: f64) -> Result<Var> {
    tape.layer_norm(x, b[n.gain], b[n.bias], eps)
}

fn feed_forward(tape: &mut Tape, b: &Bindings, ff: &FeedForwardLayout, x: Var, drop: &mut Dropout) -> Result<Var> {
    let h = linear(tape, x, b[ff.w1], b[ff.b1])?;
    let h = tape.relu(h);
    let h = drop.apply(tape, h)?;
    linear(tape, h, b[ff.w2], b[ff.b2])
}

/// Multi-head scaled dot-product attention. `memory` slots are appended to
/// the projected keys and values; their columns split across heads like
/// every other row.
pub fn attention(
    tape: &mut Tape,
    b: &Bindings,
    a: &AttentionLayout,
    queries: Var,
    keys_values: Var,
    memory: Option<(ParamId, ParamId)>,
    causal: bool,
    n_heads: usize,
) -> Result<Var> {
    let q = linear(tape, queries, b[a.wq], b[a.bq])?;
    let mut k = linear(tape, keys_values, b[a.wk], b[a.bk])?;
    let mut v = linear(tape, keys_values, b[a.wv], b[a.bv])?;
    if let Some((mk, mv)) = memory {
        k = tape.concat_rows(&[k, b[mk]])?;
        v = tape.concat_rows(&[v, b[mv]])?;
    }
    let d = tape.shape(q)[1];
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let p = if causal {
            tape.causal_softmax(scores)?
        } else {
            tape.softmax(scores, 1)?
        };
        heads.push(tape.matmul(p, vh)?);
    }
    let o = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    linear(tape, o, b[a.wo], b[a.bo])
}

/// Encodes a [n_regions, feature_dim] block and returns every layer's
/// [n_regions, d_model] output, first layer first.
pub fn encode(
    tape: &mut Tape,
    b: &Bindings,
    params: &ModelParams,
    regions: Var,
    drop: &mut Dropout,
) -> Result<Vec<Var>> {
    let cfg = &params.config;
    let lay = &params.layout;
    match tape.shape(regions) {
        [n, f] if *n >= 1 && *f == cfg.feature_dim => {}
        s => {
            return Err(Error::Shape {
                op: "encode",
                lhs: s.to_vec(),
                rhs: vec![cfg.feature_dim],
            })
        }
    }
    let h = linear(tape, regions, b[lay.input_w], b[lay.input_b])?;
    let h = tape.relu(h);
    let h = drop.apply(tape, h)?;
    let mut h = norm(tape, b, &lay.input_norm, h, cfg.ln_eps)?;

    let mut outputs = Vec::with_capacity(lay.encoder.len());
    for layer in &lay.encoder {
        let a = attention(tape, b, &layer.attn, h, h, layer.memory, false, cfg.n_heads)?;
        let a = drop.apply(tape, a)?;
        let r = tape.add(h, a)?;
        let h1 = norm(tape, b, &layer.norm1, r, cfg.ln_eps)?;
        let f = feed_forward(tape, b, &layer.ff, h1, drop)?;
        let f = drop.apply(tape, f)?;
        let r = tape.add(h1, f)?;
        h = norm(tape, b, &layer.norm2, r, cfg.ln_eps)?;
        outputs.push(h);
    }
    Ok(outputs)
}

/// Sinusoidal position table, [len, d].
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Teacher-forced decoding: logits [t, vocab_size] where row `i` predicts
/// the token after `tokens[..=i]`.
pub fn decode(
    tape: &mut Tape,
    b: &Bindings,
    params: &ModelParams,
    tokens: &[usize],
    encoder_outputs: &[Var],
    drop: &mut Dropout,
) -> Result<Var> {
    let cfg = &params.config;
    let lay = &params.layout;
    let t = tokens.len();
    if t == 0 {
        return Err(Error::invalid("decode: empty token sequence"));
    }
    if t > cfg.max_caption_len {
        return Err(Error::invalid(format!(
            "decode: {t} tokens exceed max_caption_len {}",
            cfg.max_caption_len
        )));
    }
    if encoder_outputs.len() != cfg.n_layers {
        return Err(Error::invalid(format!(
            "decode: expected {} encoder outputs, got {}",
            cfg.n_layers,
            encoder_outputs.len()
        )));
    }
    let d = cfg.d_model;
    let emb = tape.embed(b[lay.embedding], tokens)?;
    let pos = tape.leaf(positional_encoding(t, d), &[t, d])?;
    let y = tape.add(emb, pos)?;
    let mut y = drop.apply(tape, y)?;

    let inv_layers = 1.0 / encoder_outputs.len() as f64;
    for layer in &lay.decoder {
        let sa = attention(tape, b, &layer.self_attn, y, y, None, true, cfg.n_heads)?;
        let sa = drop.apply(tape, sa)?;
        let r = tape.add(y, sa)?;
        let s = norm(tape, b, &layer.norm1, r, cfg.ln_eps)?;

        let mut mesh: Option<Var> = None;
        for (gate, &enc) in layer.gates.iter().zip(encoder_outputs) {
            let c = attention(tape, b, &layer.cross_attn, s, enc, None, false, cfg.n_heads)?;
            let sc = tape.concat_cols(&[s, c])?;
            let g = linear(tape, sc, b[gate.w], b[gate.b])?;
            let g = tape.sigmoid(g);
            let gc = tape.mul(g, c)?;
            mesh = Some(match mesh {
                None => gc,
                Some(acc) => tape.add(acc, gc)?,
            });
        }
        let mesh = tape.scale(mesh.expect("n_layers >= 1"), inv_layers);
        let mesh = drop.apply(tape, mesh)?;
        let r = tape.add(s, mesh)?;
        let x = norm(tape, b, &layer.norm2, r, cfg.ln_eps)?;

        let f = feed_forward(tape, b, &layer.ff, x, drop)?;
        let f = drop.apply(tape, f)?;
        let r = tape.add(x, f)?;
        y = norm(tape, b, &layer.norm3, r, cfg.ln_eps)?;
    }
    linear(tape, y, b[lay.output_w], b[lay.output_b])
}

/// Mean over regions of the last encoder layer, [1, d_model].
pub fn encoder_summary(tape: &mut Tape, encoder_outputs: &[Var]) -> Result<Var> {
    let last = *encoder_outputs
        .last()
        .ok_or_else(|| Error::invalid("encoder_summary: no encoder outputs"))?;
    tape.mean_rows(last)
}
