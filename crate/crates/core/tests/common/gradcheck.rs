//! Central finite differences against reverse-mode gradients, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textdet::nn::{ParamSet, Session};
use textdet::tensor::{Graph, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const TRIALS: usize = 20;

/// `|a - n| / max(|a|, |n|)`, with a small floor so two near-zero values
/// compare by absolute difference.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero (relu kinks, max ties).
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output element matters.
fn project(g: &mut Graph<f64>, out: Var, weights: &[f64]) -> Var {
    let n = g.value(out).len();
    let flat = g.reshape(out, vec![1, n]).unwrap();
    let w = g.constant(Tensor::new(vec![n, 1], weights.to_vec()).unwrap());
    let b = g.constant(Tensor::zeros(vec![1]));
    g.linear(flat, w, b).unwrap()
}

pub type Build<'a> = dyn Fn(&mut Session<'_, f64>, &[Var]) -> Var + 'a;

/// Max relative error over every input element and up to `param_samples`
/// elements of each parameter tensor.
pub fn check(
    params: &ParamSet<f64>,
    inputs: &[Tensor<f64>],
    build: &Build<'_>,
    param_samples: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let forward = |params: &ParamSet<f64>, inputs: &[Tensor<f64>], w: Option<&[f64]>| -> (f64, Vec<Vec<f64>>, Vec<Option<Vec<f64>>>) {
        let mut s = Session::new(params, true);
        let vars: Vec<Var> = inputs.iter().map(|t| s.graph.leaf(t.clone(), true)).collect();
        let out = build(&mut s, &vars);
        let n = s.graph.value(out).len();
        let ones = vec![1.0; n];
        let loss = project(&mut s.graph, out, w.unwrap_or(&ones));
        let value = s.graph.data(loss)[0];
        if w.is_none() {
            return (value, vec![], vec![]);
        }
        s.graph.backward(loss).unwrap();
        let input_grads = vars.iter().map(|&v| s.graph.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; s.graph.value(v).len()])).collect();
        (value, input_grads, s.param_grads())
    };

    // output size is needed for the projection weights
    let out_len = {
        let mut s = Session::new(params, false);
        let vars: Vec<Var> = inputs.iter().map(|t| s.graph.leaf(t.clone(), true)).collect();
        let out = build(&mut s, &vars);
        s.graph.value(out).len()
    };
    let weights: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, input_grads, param_grads) = forward(params, inputs, Some(&weights));
    let eval = |params: &ParamSet<f64>, inputs: &[Tensor<f64>]| -> f64 {
        let mut s = Session::new(params, false);
        let vars: Vec<Var> = inputs.iter().map(|t| s.graph.leaf(t.clone(), true)).collect();
        let out = build(&mut s, &vars);
        let loss = project(&mut s.graph, out, &weights);
        s.graph.data(loss)[0]
    };

    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(params, &plus) - eval(params, &minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(input_grads[i][j], numeric));
        }
    }
    let ids: Vec<_> = params.iter().map(|(id, p)| (id, p.tensor.len())).collect();
    for (id, len) in ids {
        let picks: Vec<usize> = if len <= param_samples {
            (0..len).collect()
        } else {
            (0..param_samples).map(|_| rng.random_range(0..len)).collect()
        };
        let analytic = param_grads[id.index()].clone().unwrap_or_else(|| vec![0.0; len]);
        for j in picks {
            let mut plus = params.clone();
            plus.tensor_mut(id).data_mut()[j] += STEP;
            let mut minus = params.clone();
            minus.tensor_mut(id).data_mut()[j] -= STEP;
            let numeric = (eval(&plus, inputs) - eval(&minus, inputs)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// Check `TRIALS` random instances produced by `instance`.
pub fn trials(seed: u64, mut instance: impl FnMut(&mut ChaCha8Rng) -> f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..TRIALS).map(|_| instance(&mut rng)).fold(0.0, f64::max)
}
