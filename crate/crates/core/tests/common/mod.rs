#![allow(dead_code)]

pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempr::numkit::{Grads, Graph, ParamId, ParamStore, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Random probability vector with entries bounded away from zero.
pub fn random_distribution(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// `‖a − b‖ / max(1, ‖a‖ + ‖b‖)`: relative for large gradients, absolute near zero.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale.max(1.0)
}

/// Projects an arbitrary-shape output onto fixed random weights so the
/// scalar depends on every output element.
fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let n = g.value(out).numel();
    let flat = g.reshape(out, &[1, n]).unwrap();
    let w = random_tensor(&mut rng(seed ^ 0xabcdef), &[1, n], 1.0);
    let w = g.constant(w);
    let prod = g.mul(flat, w).unwrap();
    g.sum_all(prod).unwrap()
}

fn eval_scalar(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var, seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars);
    let s = project(&mut g, out, seed);
    g.value(s).data[0]
}

/// Worst relative error between backward and central differences over all inputs.
pub fn check_inputs(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var, eps: f64) -> f64 {
    let seed = inputs.iter().map(|t| t.numel() as u64).sum::<u64>();
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
    let out = build(&mut g, &vars);
    let s = project(&mut g, out, seed);
    g.backward(s).unwrap();
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut numeric = vec![0.0; t.numel()];
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data[j] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data[j] -= eps;
            numeric[j] = (eval_scalar(&plus, &build, seed) - eval_scalar(&minus, &build, seed)) / (2.0 * eps);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Same check against parameters in `store`, for `ids` only.
pub fn check_params(
    store: &ParamStore,
    ids: &[ParamId],
    loss: impl Fn(&mut Graph, &ParamStore) -> Var,
    eps: f64,
) -> f64 {
    let mut g = Graph::new();
    let l = loss(&mut g, store);
    g.backward(l).unwrap();
    let mut grads = Grads::zeros_like(store);
    g.accumulate_param_grads(&mut grads);
    let value = |s: &ParamStore| {
        let mut g = Graph::new();
        let l = loss(&mut g, s);
        g.value(l).data[0]
    };
    let mut worst: f64 = 0.0;
    for &id in ids {
        let n = store.get(id).numel();
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let mut plus = store.clone();
            plus.get_mut(id).data[j] += eps;
            let mut minus = store.clone();
            minus.get_mut(id).data[j] -= eps;
            numeric[j] = (value(&plus) - value(&minus)) / (2.0 * eps);
        }
        worst = worst.max(rel_err(grads.get(id), &numeric));
    }
    worst
}
