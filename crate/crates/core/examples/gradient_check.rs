//! Differentiate a small conv + attention network with the autodiff graph
//! and compare against central finite differences in 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textdet::nn::{ParamSet, Session};
use textdet::tensor::{Tensor, Var};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn forward(s: &mut Session<'_, f64>, params: &ParamSet<f64>, image: &Tensor<f64>) -> Var {
    let p = |s: &mut Session<'_, f64>, name: &str| s.param(params.find(name).unwrap());
    let x = s.input(image.clone());
    let (w, b) = (p(s, "conv.w"), p(s, "conv.b"));
    let h = s.graph.conv2d(x, w, b, 1, 1).unwrap();
    let h = s.graph.relu(h);
    // 4 channels over 3x3 positions become a 9-token sequence of width 4
    let h = s.graph.reshape(h, vec![4, 9]).unwrap();
    let seq = s.graph.transpose2d(h).unwrap();
    let y = s.graph.attention(seq, seq, seq, 2, None).unwrap();
    let y = s.graph.l2_normalize(y, 1e-12);
    let (w, b) = (p(s, "head.w"), p(s, "head.b"));
    let logits = s.graph.linear(y, w, b).unwrap();
    let probs = s.graph.sigmoid(logits);
    let probs = s.graph.reshape(probs, vec![9]).unwrap();
    let targets: Vec<f64> = (0..9).map(|i| (i % 2) as f64).collect();
    s.graph.bce_mean(probs, &targets).unwrap()
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ParamSet::new();
    params.add("conv.w", random(&mut rng, &[4, 2, 3, 3]), true);
    params.add("conv.b", random(&mut rng, &[4]), false);
    params.add("head.w", random(&mut rng, &[4, 1]), true);
    params.add("head.b", random(&mut rng, &[1]), false);
    let image = random(&mut rng, &[1, 2, 3, 3]);

    let mut s = Session::new(&params, true);
    let loss = forward(&mut s, &params, &image);
    println!("loss {:.6}", s.graph.data(loss)[0]);
    s.graph.backward(loss).unwrap();
    let grads = s.param_grads();

    let h = 1e-5;
    for (id, p) in params.iter() {
        let analytic = grads[id.index()].as_ref().unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..p.tensor.len() {
            let eval = |delta: f64| {
                let mut shifted = params.clone();
                shifted.tensor_mut(id).data_mut()[i] += delta;
                let mut s = Session::new(&shifted, false);
                let l = forward(&mut s, &shifted, &image);
                s.graph.data(l)[0]
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
        println!("{:>7}: {} values, max relative error {worst:.2e}", p.name, p.tensor.len());
    }
}
