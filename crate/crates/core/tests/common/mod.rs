#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use surgcap_core::tensor::{Tape, Var};

pub struct Input {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Input {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Self {
        Self {
            data,
            shape: shape.to_vec(),
        }
    }
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// `‖a − b‖ / max(‖a‖ + ‖b‖, 1e-12)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-12)
}

/// Reduces the op output to a scalar with fixed random weights, then
/// compares the tape gradient of every input with central differences.
pub fn fd_check(inputs: &[Input], f: &dyn Fn(&mut Tape, &[Var]) -> Var, seed: u64) -> f64 {
    let h = 1e-6;
    let eval = |vals: &[Vec<f64>], want_grad: bool| -> (f64, Vec<Vec<f64>>) {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals
            .iter()
            .zip(inputs)
            .map(|(v, i)| t.leaf(v.clone(), &i.shape).unwrap())
            .collect();
        let out = f(&mut t, &vars);
        let n = t.value(out).len();
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed ^ 0x5eed);
        let w = random_vec(&mut rng, n);
        let loss = t.weighted_sum(out, w).unwrap();
        let value = t.scalar(loss);
        if !want_grad {
            return (value, Vec::new());
        }
        t.backward(loss).unwrap();
        (value, vars.iter().map(|&v| t.grad(v).to_vec()).collect())
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|i| i.data.clone()).collect();
    let (_, analytic) = eval(&base, true);
    let mut ana = Vec::new();
    let mut num = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        for j in 0..input.data.len() {
            let mut plus = base.clone();
            plus[k][j] += h;
            let mut minus = base.clone();
            minus[k][j] -= h;
            num.push((eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h));
            ana.push(analytic[k][j]);
        }
    }
    relative_error(&ana, &num)
}
