//! One randomized gradient check per differentiable operation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use textdet::alignment::{align_loss, AlignmentConfig, AlignmentHead};
use textdet::backbone::FeatureMap;
use textdet::geometry::{BoxXYXY, RegressionTarget};
use textdet::nn::ParamSet;
use textdet::proposal_encoder::{roi_pool, ProposalEncoder, ProposalEncoderConfig};
use textdet::rpn::{rpn_loss, AnchorLabel, RpnLossConfig, RpnPrediction};
use textdet::tensor::{PoolRegion, Tensor};
use textdet::text_encoder::{TextEncoder, TextEncoderConfig};

use super::gradcheck::{away_from_zero, check, trials, uniform};

fn none() -> ParamSet<f64> {
    ParamSet::new()
}

pub fn conv2d(rng: &mut ChaCha8Rng) -> f64 {
    let (n, c_in, c_out) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
    let k = if rng.random_bool(0.5) { 1 } else { 3 };
    let (stride, pad) = (rng.random_range(1..3), rng.random_range(0..2));
    let (h, w) = (rng.random_range(3..7), rng.random_range(3..7));
    let inputs = [
        uniform(rng, &[n, c_in, h, w], -1.0, 1.0),
        uniform(rng, &[c_out, c_in, k, k], -1.0, 1.0),
        uniform(rng, &[c_out], -1.0, 1.0),
    ];
    check(&none(), &inputs, &|s, v| s.graph.conv2d(v[0], v[1], v[2], stride, pad).unwrap(), 0, rng)
}

pub fn linear(rng: &mut ChaCha8Rng) -> f64 {
    let (n, din, dout) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6));
    let inputs = [
        uniform(rng, &[n, din], -1.0, 1.0),
        uniform(rng, &[din, dout], -1.0, 1.0),
        uniform(rng, &[dout], -1.0, 1.0),
    ];
    check(&none(), &inputs, &|s, v| s.graph.linear(v[0], v[1], v[2]).unwrap(), 0, rng)
}

pub fn relu(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [rng.random_range(1..5), rng.random_range(1..6)];
    let inputs = [away_from_zero(rng, &shape)];
    check(&none(), &inputs, &|s, v| s.graph.relu(v[0]), 0, rng)
}

pub fn sigmoid(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [rng.random_range(1..5), rng.random_range(1..6)];
    let inputs = [uniform(rng, &shape, -4.0, 4.0)];
    check(&none(), &inputs, &|s, v| s.graph.sigmoid(v[0]), 0, rng)
}

pub fn softmax(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [rng.random_range(1..5), rng.random_range(2..6)];
    let inputs = [uniform(rng, &shape, -3.0, 3.0)];
    check(&none(), &inputs, &|s, v| s.graph.softmax(v[0]), 0, rng)
}

pub fn layer_norm(rng: &mut ChaCha8Rng) -> f64 {
    let (n, d) = (rng.random_range(1..4), rng.random_range(2..7));
    let inputs = [
        uniform(rng, &[n, d], -2.0, 2.0),
        uniform(rng, &[d], 0.5, 1.5),
        uniform(rng, &[d], -0.5, 0.5),
    ];
    check(&none(), &inputs, &|s, v| s.graph.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(), 0, rng)
}

pub fn adaptive_max_pool(rng: &mut ChaCha8Rng) -> f64 {
    let (c, h, w) = (rng.random_range(1..3), rng.random_range(1..7), rng.random_range(1..7));
    let (oh, ow) = (rng.random_range(1..=h.min(4)), rng.random_range(1..=w.min(4)));
    // a permutation keeps every window maximum unique
    let mut vals: Vec<f64> = (0..c * h * w).map(|i| i as f64 * 0.1).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    let inputs = [Tensor::new(vec![c, h, w], vals).unwrap()];
    check(&none(), &inputs, &|s, v| s.graph.adaptive_max_pool2d(v[0], oh, ow).unwrap(), 0, rng)
}

pub fn region_max_pool(rng: &mut ChaCha8Rng) -> f64 {
    let (c, h, w) = (rng.random_range(1..3), rng.random_range(2..7), rng.random_range(2..7));
    let mut vals: Vec<f64> = (0..c * h * w).map(|i| i as f64 * 0.1).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    let regions: Vec<PoolRegion> = (0..rng.random_range(1..4))
        .map(|_| {
            let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
            PoolRegion {
                row0: r0,
                col0: c0,
                row1: rng.random_range(r0 + 1..=h),
                col1: rng.random_range(c0 + 1..=w),
            }
        })
        .collect();
    let out = rng.random_range(1..4);
    let inputs = [Tensor::new(vec![c, h, w], vals).unwrap()];
    check(&none(), &inputs, &|s, v| s.graph.region_max_pool(v[0], &regions, out, out).unwrap(), 0, rng)
}

pub fn l2_normalize(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [rng.random_range(1..4), rng.random_range(1..7)];
    let inputs = [uniform(rng, &shape, -2.0, 2.0)];
    check(&none(), &inputs, &|s, v| s.graph.l2_normalize(v[0], 1e-12), 0, rng)
}

pub fn attention(rng: &mut ChaCha8Rng) -> f64 {
    let heads = rng.random_range(1..4);
    let d = heads * rng.random_range(1..4);
    let l = rng.random_range(1..6);
    let mask: Option<Vec<bool>> = rng
        .random_bool(0.5)
        .then(|| (0..l).map(|j| j == 0 || rng.random_bool(0.6)).collect());
    let inputs = [
        uniform(rng, &[l, d], -1.5, 1.5),
        uniform(rng, &[l, d], -1.5, 1.5),
        uniform(rng, &[l, d], -1.5, 1.5),
    ];
    check(
        &none(),
        &inputs,
        &|s, v| s.graph.attention(v[0], v[1], v[2], heads, mask.as_deref()).unwrap(),
        0,
        rng,
    )
}

/// Reshape, transpose, gather, concat, broadcast, add, scale and sum.
pub fn plumbing(rng: &mut ChaCha8Rng) -> f64 {
    let (n, d) = (rng.random_range(2..5), rng.random_range(1..4));
    let idx: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..n)).collect();
    let inputs = [uniform(rng, &[d, n], -1.0, 1.0), uniform(rng, &[1, d], -1.0, 1.0)];
    let factor = rng.random_range(-2.0..2.0);
    check(
        &none(),
        &inputs,
        &|s, v| {
            let g = &mut s.graph;
            let t = g.transpose2d(v[0]).unwrap();
            let picked = g.gather_rows(t, &idx).unwrap();
            let b = g.broadcast_rows(v[1], idx.len()).unwrap();
            let c = g.concat_cols(picked, b).unwrap();
            let c2 = g.scale(c, factor);
            let mixed = g.add(c, c2).unwrap();
            let total = g.sum(mixed);
            let total = g.reshape(total, vec![1, 1]).unwrap();
            let flat = g.reshape(mixed, vec![1, idx.len() * 2 * d]).unwrap();
            g.concat_cols(flat, total).unwrap()
        },
        0,
        rng,
    )
}

pub fn bce(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(1..8);
    let targets: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let inputs = [uniform(rng, &[n], 0.05, 0.95)];
    check(&none(), &inputs, &|s, v| s.graph.bce_mean(v[0], &targets).unwrap(), 0, rng)
}

pub fn smooth_l1(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(1..10);
    let targets: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    // keep every difference clear of the |d| = 1 seam
    let data: Vec<f64> = targets
        .iter()
        .map(|t| {
            let m = if rng.random_bool(0.5) { rng.random_range(0.05..0.9) } else { rng.random_range(1.1..3.0) };
            t + if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    let inputs = [Tensor::new(vec![n], data).unwrap()];
    check(&none(), &inputs, &|s, v| s.graph.smooth_l1_sum(v[0], &targets).unwrap(), 0, rng)
}

pub fn rpn_objective(rng: &mut ChaCha8Rng) -> f64 {
    let a = rng.random_range(2..10);
    // anchor 0 is always positive so both loss terms are present
    let labels: Vec<AnchorLabel> = (0..a)
        .map(|i| match if i == 0 { 0 } else { rng.random_range(0..3) } {
            0 => AnchorLabel::Positive {
                gt: 0,
                target: RegressionTarget::from_array([0.0; 4].map(|_: f64| rng.random_range(-0.5..0.5))),
            },
            1 => AnchorLabel::Negative,
            _ => AnchorLabel::Ignore,
        })
        .collect();
    let sampled: Vec<usize> = (0..a).filter(|&i| !matches!(labels[i], AnchorLabel::Ignore)).collect();
    let inputs = [uniform(rng, &[a], 0.05, 0.95), uniform(rng, &[a, 4], -3.0, 3.0)];
    let cfg = RpnLossConfig::default();
    check(
        &none(),
        &inputs,
        &|s, v| {
            let pred = RpnPrediction {
                objectness: v[0],
                regression: v[1],
            };
            rpn_loss(s, &pred, &labels, &sampled, &cfg).unwrap().total
        },
        0,
        rng,
    )
}

pub fn alignment_head(rng: &mut ChaCha8Rng) -> f64 {
    let (dr, dt, dj) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..6));
    let r = rng.random_range(1..4);
    let mut params = ParamSet::new();
    let head = AlignmentHead::new(&AlignmentConfig { hidden_dim: dj }, dr, dt, &mut params, rng);
    // move the zero-initialized output layer off its trivial point
    let w2 = params.find("align.w2").unwrap();
    let b2 = params.find("align.b2").unwrap();
    *params.tensor_mut(w2) = uniform(rng, &[dj, 1], -1.0, 1.0);
    *params.tensor_mut(b2) = uniform(rng, &[1], -0.5, 0.5);
    let b1 = params.find("align.b1").unwrap();
    *params.tensor_mut(b1) = uniform(rng, &[dj], -0.3, 0.3);
    let inputs = [uniform(rng, &[r, dr], -1.0, 1.0), uniform(rng, &[1, dt], -1.0, 1.0)];
    check(&params, &inputs, &|s, v| head.forward(s, v[0], v[1]).unwrap(), 64, rng)
}

pub fn alignment_loss(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(1..8);
    let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let inputs = [uniform(rng, &[n], 0.05, 0.95)];
    check(&none(), &inputs, &|s, v| align_loss(s, v[0], &labels).unwrap(), 0, rng)
}

pub fn proposal_encoder(rng: &mut ChaCha8Rng) -> f64 {
    let cfg = ProposalEncoderConfig {
        roi_output: 2,
        conv_channels: rng.random_range(1..4),
        embed_dim: rng.random_range(2..5),
    };
    let (c, size, stride) = (rng.random_range(1..3), 4, 4);
    let mut params = ParamSet::new();
    let enc = ProposalEncoder::new(&cfg, c, &mut params, rng);
    for p in params.iter_mut() {
        if !p.decay {
            let n = p.tensor.len();
            p.tensor = uniform(rng, &[n], -0.2, 0.2);
        }
    }
    let mut vals: Vec<f64> = (0..c * size * size).map(|i| 0.1 + i as f64 * 0.07).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    let boxes: Vec<BoxXYXY> = (0..rng.random_range(1..3))
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0));
            BoxXYXY::new(x, y, x + rng.random_range(1.0..6.0), y + rng.random_range(1.0..6.0))
        })
        .collect();
    let inputs = [Tensor::new(vec![c, size, size], vals).unwrap()];
    check(
        &params,
        &inputs,
        &|s, v| {
            let fm = FeatureMap {
                var: v[0],
                channels: c,
                size,
                stride,
            };
            let rois = roi_pool(s, &fm, &boxes, 2).unwrap();
            enc.encode(s, rois).unwrap()
        },
        24,
        rng,
    )
}

pub fn text_encoder(rng: &mut ChaCha8Rng) -> f64 {
    let heads = rng.random_range(1..3);
    let cfg = TextEncoderConfig {
        embed_dim: 2 * heads,
        heads,
        layers: rng.random_range(1..3),
        ffn_dim: rng.random_range(2..5),
        max_len: 8,
    };
    let vocab = 6;
    let mut params = ParamSet::new();
    let enc = TextEncoder::new(&cfg, vocab, &mut params, rng).unwrap();
    let ids: Vec<usize> = std::iter::once(0)
        .chain((0..rng.random_range(0..4)).map(|_| rng.random_range(1..vocab)))
        .collect();
    check(
        &params,
        &[],
        &|s, _| enc.encode_masked(s, &ids, None).unwrap(),
        16,
        rng,
    )
}

type Check = fn(&mut ChaCha8Rng) -> f64;

/// `(name, worst relative error over the trials)` for every check.
pub fn suite() -> Vec<(&'static str, f64)> {
    let checks: [(&str, Check); 18] = [
        ("conv2d", conv2d),
        ("linear", linear),
        ("relu", relu),
        ("sigmoid", sigmoid),
        ("softmax", softmax),
        ("layer_norm", layer_norm),
        ("adaptive_max_pool2d", adaptive_max_pool),
        ("region_max_pool", region_max_pool),
        ("l2_normalize", l2_normalize),
        ("attention", attention),
        ("tensor plumbing", plumbing),
        ("bce_mean", bce),
        ("smooth_l1_sum", smooth_l1),
        ("rpn_loss", rpn_objective),
        ("alignment head", alignment_head),
        ("align_loss", alignment_loss),
        ("proposal encoder", proposal_encoder),
        ("text encoder", text_encoder),
    ];
    checks
        .iter()
        .enumerate()
        .map(|(i, (name, f))| (*name, trials(1000 + i as u64, f)))
        .collect()
}
