//! Central finite-difference checks of every differentiable op and of the
//! composed model. Shared by the gradient tests and the acceptance suite.

#![allow(dead_code)]

use super::common::{fd_check, random_vec, Input};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surgcap_core::domain_head::{classifier, DomainHeadConfig};
use surgcap_core::losses::{caption_loss, ce_ls};
use surgcap_core::model::{decode, encode, encoder_summary, Dropout, ModelConfig, ModelParams};
use surgcap_core::params::ParamStore;
use surgcap_core::tensor::{Tape, Var};

const OP_TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

fn check_op(name: &str, shapes: &[&[usize]], f: impl Fn(&mut Tape, &[Var]) -> Var) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Input> = shapes
            .iter()
            .map(|s| Input::new(random_vec(&mut rng, s.iter().product()), s))
            .collect();
        let err = fd_check(&inputs, &f, seed);
        assert!(err < OP_TOL, "{name} seed {seed}: relative error {err:e}");
    }
}

fn unwrap(r: surgcap_core::Result<Var>) -> Var {
    r.unwrap()
}

pub fn matmul_family() {
    check_op("matmul", &[&[3, 4], &[4, 2]], |t, v| unwrap(t.matmul(v[0], v[1])));
    check_op("matmul_nt", &[&[3, 4], &[5, 4]], |t, v| unwrap(t.matmul_nt(v[0], v[1])));
    check_op("transpose", &[&[3, 4]], |t, v| unwrap(t.transpose(v[0])));
}

pub fn elementwise() {
    check_op("add", &[&[2, 3], &[2, 3]], |t, v| unwrap(t.add(v[0], v[1])));
    check_op("sub", &[&[2, 3], &[2, 3]], |t, v| unwrap(t.sub(v[0], v[1])));
    check_op("add_row", &[&[3, 4], &[4]], |t, v| unwrap(t.add_row(v[0], v[1])));
    check_op("mul", &[&[2, 3], &[2, 3]], |t, v| unwrap(t.mul(v[0], v[1])));
    check_op("mul_const", &[&[2, 3]], |t, v| {
        unwrap(t.mul_const(v[0], vec![0.5, -1.0, 2.0, 0.0, 3.0, 1.5]))
    });
    check_op("scale", &[&[4]], |t, v| t.scale(v[0], -1.7));
    check_op("sigmoid", &[&[2, 3]], |t, v| t.sigmoid(v[0]));
    check_op("sum", &[&[2, 3]], |t, v| t.sum(v[0]));
    check_op("mean_rows", &[&[3, 4]], |t, v| unwrap(t.mean_rows(v[0])));
    check_op("weighted_sum", &[&[2, 2]], |t, v| unwrap(t.weighted_sum(v[0], vec![1.0, -2.0, 0.5, 3.0])));
}

pub fn relu_away_from_kink() {
    // Inputs bounded away from zero so the finite difference never straddles the kink.
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..12)
            .map(|_| {
                let m = rng.random_range(0.1..2.0);
                if rng.random::<bool>() {
                    m
                } else {
                    -m
                }
            })
            .collect();
        let err = fd_check(&[Input::new(data, &[3, 4])], &|t: &mut Tape, v: &[Var]| t.relu(v[0]), seed);
        assert!(err < OP_TOL, "relu seed {seed}: {err:e}");
    }
}

pub fn normalisations() {
    check_op("softmax axis 1", &[&[3, 4]], |t, v| unwrap(t.softmax(v[0], 1)));
    check_op("softmax axis 0", &[&[3, 4]], |t, v| unwrap(t.softmax(v[0], 0)));
    check_op("softmax 3-d middle axis", &[&[2, 3, 2]], |t, v| unwrap(t.softmax(v[0], 1)));
    check_op("causal_softmax", &[&[4, 4]], |t, v| unwrap(t.causal_softmax(v[0])));
    check_op("log_softmax", &[&[3, 5]], |t, v| unwrap(t.log_softmax(v[0], 1)));
    check_op("layer_norm", &[&[3, 5], &[5], &[5]], |t, v| unwrap(t.layer_norm(v[0], v[1], v[2], 1e-5)));
}

pub fn structural() {
    check_op("concat_rows", &[&[2, 3], &[1, 3]], |t, v| unwrap(t.concat_rows(&[v[0], v[1]])));
    check_op("concat_cols", &[&[2, 3], &[2, 2]], |t, v| unwrap(t.concat_cols(&[v[0], v[1]])));
    check_op("slice_rows", &[&[4, 3]], |t, v| unwrap(t.slice_rows(v[0], 1, 2)));
    check_op("slice_cols", &[&[3, 5]], |t, v| unwrap(t.slice_cols(v[0], 2, 3)));
    check_op("embed", &[&[5, 3]], |t, v| unwrap(t.embed(v[0], &[4, 0, 4, 2])));
}

pub fn losses() {
    check_op("ce_ls", &[&[6]], |t, v| unwrap(ce_ls(t, v[0], 2, 0.1)));
    check_op("caption_loss", &[&[3, 5]], |t, v| unwrap(caption_loss(t, v[0], &[4, 0, 1], 0.1, 1)));
}

fn tiny_model(seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 3,
        n_memory_slots: 2,
        d_ff: 12,
        feature_dim: 5,
        max_caption_len: 6,
        vocab_size: 9,
        dropout: 0.0,
        ln_eps: 1e-5,
    };
    let head = DomainHeadConfig {
        hidden: [6, 4],
        ..DomainHeadConfig::for_model(&cfg)
    };
    ModelParams::new(cfg, head, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Caption loss plus the domain classifier on the encoder summary, with the
/// reversal left out so the analytic gradient is the true derivative.
fn model_loss(params: &ModelParams, store: &ParamStore, regions: &[Vec<f64>], tokens: &[usize], targets: &[usize]) -> (f64, Vec<Vec<f64>>) {
    let mut p = params.clone();
    p.store = store.clone();
    let mut t = Tape::new();
    let b = p.store.bind(&mut t).unwrap();
    let x = t.leaf_rows(regions).unwrap();
    let enc = encode(&mut t, &b, &p, x, &mut Dropout::eval()).unwrap();
    let logits = decode(&mut t, &b, &p, tokens, &enc, &mut Dropout::eval()).unwrap();
    let ly = caption_loss(&mut t, logits, targets, 0.1, 1).unwrap();
    let s = encoder_summary(&mut t, &enc).unwrap();
    let dl = classifier(&mut t, &b, &p.head_config, &p.head, s).unwrap();
    let ld = ce_ls(&mut t, dl, 1, 0.0).unwrap();
    let loss = t.add(ly, ld).unwrap();
    t.backward(loss).unwrap();
    (t.scalar(loss), p.store.grads(&t, &b))
}

pub fn whole_model_matches_finite_differences() {
    let h = 1e-5;
    for seed in 0..SEEDS {
        let params = tiny_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let regions: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut rng, 5)).collect();
        let tokens = [2, rng.random_range(4..9), rng.random_range(4..9), rng.random_range(4..9)];
        let targets = [tokens[1], tokens[2], tokens[3], 3];
        let (_, analytic) = model_loss(&params, &params.store, &regions, &tokens, &targets);

        // A random subset of coordinates per parameter keeps the check fast.
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for (k, id) in params.store.ids().enumerate() {
            let len = params.store.get(id).data.len();
            for _ in 0..len.min(3) {
                let j = rng.random_range(0..len);
                let mut plus = params.store.clone();
                plus.data_mut(id)[j] += h;
                let mut minus = params.store.clone();
                minus.data_mut(id)[j] -= h;
                let fp = model_loss(&params, &plus, &regions, &tokens, &targets).0;
                let fm = model_loss(&params, &minus, &regions, &tokens, &targets).0;
                num.push((fp - fm) / (2.0 * h));
                ana.push(analytic[k][j]);
            }
        }
        let err = super::common::relative_error(&ana, &num);
        assert!(err < 1e-3, "seed {seed}: whole-model relative error {err:e}");
    }
}

pub fn all_ops() {
    matmul_family();
    elementwise();
    relu_away_from_kink();
    normalisations();
    structural();
    losses();
}
