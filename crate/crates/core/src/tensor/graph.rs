use super::kernels::{self, ConvGeom};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Softmax over the last dimension.
    SoftmaxLastDim,
}

/// Half-open rectangle of feature cells pooled by [`Graph::region_max_pool`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolRegion {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    RegionMaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    L2Normalize {
        input: Var,
        norms: Vec<T>,
        eps: T,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Reshape {
        input: Var,
    },
    Transpose2d {
        input: Var,
    },
    GatherRows {
        input: Var,
        indices: Vec<usize>,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
    BroadcastRows {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    BceMean {
        probs: Var,
        targets: Vec<T>,
    },
    SmoothL1Sum {
        input: Var,
        targets: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Append-only record of a computation. Nodes are stored in creation order,
/// which is a topological order, so backward is a single reverse sweep.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Probability clamp inside binary cross-entropy.
const BCE_EPS: f64 = 1e-7;

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input. Gradients are only accumulated for leaves created
    /// with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Softmax weights saved by an attention node, laid out `[heads, L, L]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// 2-D convolution over `[N,C_in,H,W]` with a `[C_out,C_in,kH,kW]` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, c_in, h, w) = match *self.shape(input) {
            [n, c, h, w] => (n, c, h, w),
            ref s => return Err(Error::Shape(format!("conv2d input must be 4-D, got {s:?}"))),
        };
        let (c_out, wc_in, kh, kw) = match *self.shape(weight) {
            [o, c, kh, kw] => (o, c, kh, kw),
            ref s => return Err(Error::Shape(format!("conv2d weight must be 4-D, got {s:?}"))),
        };
        if wc_in != c_in {
            return Err(Error::Shape(format!(
                "conv2d: input has {c_in} channels, weight expects {wc_in}"
            )));
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::Shape(format!(
                "conv2d: bias shape {:?}, expected [{c_out}]",
                self.shape(bias)
            )));
        }
        let out_h = kernels::conv2d_output_size(h, kh, stride, padding);
        let out_w = kernels::conv2d_output_size(w, kw, stride, padding);
        let (out_h, out_w) = match (out_h, out_w) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d: kernel {kh}x{kw} stride {stride} does not fit {h}x{w} with padding {padding}"
                )))
            }
        };
        let geom = ConvGeom {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            out_h,
            out_w,
        };
        let rows = geom.col_rows();
        let ncols = geom.col_cols();
        let mut cols = vec![T::zero(); n * rows * ncols];
        let mut out = vec![T::zero(); n * c_out * ncols];
        {
            let x = self.data(input);
            let wt = self.data(weight);
            let b = self.data(bias);
            for i in 0..n {
                let col = &mut cols[i * rows * ncols..(i + 1) * rows * ncols];
                kernels::im2col(&x[i * c_in * h * w..(i + 1) * c_in * h * w], &geom, col);
                let o = &mut out[i * c_out * ncols..(i + 1) * c_out * ncols];
                for (co, row) in o.chunks_mut(ncols).enumerate() {
                    row.fill(b[co]);
                }
                T::gemm(c_out, rows, ncols, wt, false, col, false, T::one(), o);
            }
        }
        let value = Tensor::new(vec![n, c_out, out_h, out_w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            &[input, weight, bias],
        ))
    }

    /// `input[N,d_in] · weight[d_in,d_out] + bias[d_out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, d_in) = match *self.shape(input) {
            [n, d] => (n, d),
            ref s => return Err(Error::Shape(format!("linear input must be 2-D, got {s:?}"))),
        };
        let (w_in, d_out) = match *self.shape(weight) {
            [a, b] => (a, b),
            ref s => return Err(Error::Shape(format!("linear weight must be 2-D, got {s:?}"))),
        };
        if w_in != d_in {
            return Err(Error::Shape(format!(
                "linear: input width {d_in} does not match weight rows {w_in}"
            )));
        }
        if self.shape(bias) != [d_out] {
            return Err(Error::Shape(format!(
                "linear: bias shape {:?}, expected [{d_out}]",
                self.shape(bias)
            )));
        }
        let mut out = Vec::with_capacity(n * d_out);
        let b = self.data(bias);
        for _ in 0..n {
            out.extend_from_slice(b);
        }
        T::gemm(
            n,
            d_in,
            d_out,
            self.data(input),
            false,
            self.data(weight),
            false,
            T::one(),
            &mut out,
        );
        let value = Tensor::new(vec![n, d_out], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }, &[input, weight, bias]))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let x = self.value(input);
        let shape = x.shape().to_vec();
        let mut out: Vec<T> = x.data().to_vec();
        match kind {
            Activation::Relu => out.iter_mut().for_each(|v| *v = v.max(T::zero())),
            Activation::Sigmoid => out.iter_mut().for_each(|v| *v = kernels::sigmoid(*v)),
            Activation::SoftmaxLastDim => {
                let d = shape.last().copied().unwrap_or(1).max(1);
                kernels::softmax_rows(&mut out, d);
            }
        }
        let value = Tensor::new(shape, out).expect("same shape");
        self.push(value, Op::Activation { input, kind }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn softmax(&mut self, input: Var) -> Var {
        self.activation(input, Activation::SoftmaxLastDim)
    }

    /// Normalize over the last dimension (population variance), then apply
    /// the `gamma`/`beta` affine.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::Shape("layer_norm needs at least one dimension".into()))?;
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: gamma/beta must be [{d}], got {:?}/{:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let eps = T::from_f64_lossy(eps);
        let x = self.data(input);
        let g = self.data(gamma);
        let b = self.data(beta);
        let rows = x.len() / d;
        let dt = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[input, gamma, beta],
        ))
    }

    /// Max-pool each region of a `[C,H,W]` map to `out_h x out_w`, producing
    /// `[R,C,out_h,out_w]`. Windows follow the adaptive floor/ceil split.
    pub fn region_max_pool(
        &mut self,
        input: Var,
        regions: &[PoolRegion],
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument(format!(
                "pool output must be at least 1x1, got {out_h}x{out_w}"
            )));
        }
        let (c, h, w) = match *self.shape(input) {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::Shape(format!("pooling input must be [C,H,W], got {s:?}"))),
        };
        for r in regions {
            if r.row0 >= r.row1 || r.col0 >= r.col1 || r.row1 > h || r.col1 > w {
                return Err(Error::DegenerateRegion(format!(
                    "region {r:?} is empty or outside a {h}x{w} map"
                )));
            }
        }
        let cell = out_h * out_w;
        let mut values = vec![T::zero(); regions.len() * c * cell];
        let mut argmax = vec![0usize; regions.len() * c * cell];
        let x = self.data(input);
        for (ri, r) in regions.iter().enumerate() {
            for ch in 0..c {
                let base = (ri * c + ch) * cell;
                kernels::region_max_pool_plane(
                    &x[ch * h * w..(ch + 1) * h * w],
                    w,
                    (r.row0, r.row1),
                    (r.col0, r.col1),
                    out_h,
                    out_w,
                    &mut values[base..base + cell],
                    &mut argmax[base..base + cell],
                );
                for a in &mut argmax[base..base + cell] {
                    *a += ch * h * w;
                }
            }
        }
        let value = Tensor::new(vec![regions.len(), c, out_h, out_w], values)?;
        Ok(self.push(value, Op::RegionMaxPool { input, argmax }, &[input]))
    }

    /// Adaptive max pooling of a whole `[C,h,w]` map to `[C,out_h,out_w]`.
    pub fn adaptive_max_pool2d(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = match *self.shape(input) {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::Shape(format!("pooling input must be [C,H,W], got {s:?}"))),
        };
        if h == 0 || w == 0 {
            return Err(Error::Shape("adaptive_max_pool2d on an empty map".into()));
        }
        let region = PoolRegion {
            row0: 0,
            col0: 0,
            row1: h,
            col1: w,
        };
        let pooled = self.region_max_pool(input, &[region], out_h, out_w)?;
        self.reshape(pooled, vec![c, out_h, out_w])
    }

    /// Divide each last-dimension row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(&mut self, input: Var, eps: f64) -> Var {
        let x = self.value(input);
        let shape = x.shape().to_vec();
        let d = shape.last().copied().unwrap_or(1).max(1);
        let eps = T::from_f64_lossy(eps);
        let mut out = x.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(n);
            let denom = n.max(eps);
            row.iter_mut().for_each(|v| *v = *v / denom);
        }
        let value = Tensor::new(shape, out).expect("same shape");
        self.push(value, Op::L2Normalize { input, norms, eps }, &[input])
    }

    /// Multi-head scaled dot-product attention over `[L,d]` projections.
    /// Heads split `d` into contiguous blocks; outputs are concatenated.
    /// Keys with `key_mask[j] == false` receive zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (l, d) = match *self.shape(q) {
            [l, d] => (l, d),
            ref s => return Err(Error::Shape(format!("attention expects [L,d], got {s:?}"))),
        };
        if self.shape(k) != [l, d] || self.shape(v) != [l, d] {
            return Err(Error::Shape("attention: q, k, v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!(
                "attention: width {d} not divisible by {heads} heads"
            )));
        }
        if let Some(m) = key_mask {
            if m.len() != l {
                return Err(Error::Shape(format!(
                    "attention: mask length {} != sequence length {l}",
                    m.len()
                )));
            }
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![T::zero(); heads * l * l];
        let mut out = vec![T::zero(); l * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..l {
                let row = &mut probs[(h * l + i) * l..(h * l + i + 1) * l];
                let mut max = T::neg_infinity();
                for j in 0..l {
                    if key_mask.is_some_and(|m| !m[j]) {
                        row[j] = T::neg_infinity();
                        continue;
                    }
                    let mut s = T::zero();
                    for c in 0..dh {
                        s = s + qd[i * d + off + c] * kd[j * d + off + c];
                    }
                    row[j] = s * scale;
                    max = max.max(row[j]);
                }
                let mut total = T::zero();
                for p in row.iter_mut() {
                    *p = if *p == T::neg_infinity() {
                        T::zero()
                    } else {
                        (*p - max).exp()
                    };
                    total = total + *p;
                }
                if total > T::zero() {
                    row.iter_mut().for_each(|p| *p = *p / total);
                }
                for j in 0..l {
                    let p = row[j];
                    if p == T::zero() {
                        continue;
                    }
                    for c in 0..dh {
                        out[i * d + off + c] = out[i * d + off + c] + p * vd[j * d + off + c];
                    }
                }
            }
        }
        let value = Tensor::new(vec![l, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { input }, &[input]))
    }

    pub fn transpose2d(&mut self, input: Var) -> Result<Var> {
        let (r, c) = match *self.shape(input) {
            [r, c] => (r, c),
            ref s => return Err(Error::Shape(format!("transpose2d expects 2-D, got {s:?}"))),
        };
        let x = self.data(input);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose2d { input }, &[input]))
    }

    /// Select rows (slices along the first dimension), repeats allowed.
    pub fn gather_rows(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let n = *shape
            .first()
            .ok_or_else(|| Error::Shape("gather_rows on a scalar".into()))?;
        let row: usize = shape[1..].iter().product();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows: index {bad} out of range for {n} rows"
            )));
        }
        let x = self.data(input);
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&x[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                input,
                indices: indices.to_vec(),
            },
            &[input],
        ))
    }

    /// `[N,a] ++ [N,b] -> [N,a+b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, da, db) = match (self.shape(a), self.shape(b)) {
            (&[n, da], &[m, db]) if n == m => (n, da, db),
            (sa, sb) => {
                return Err(Error::Shape(format!(
                    "concat_cols: incompatible shapes {sa:?} and {sb:?}"
                )))
            }
        };
        let (xa, xb) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(n * (da + db));
        for i in 0..n {
            out.extend_from_slice(&xa[i * da..(i + 1) * da]);
            out.extend_from_slice(&xb[i * db..(i + 1) * db]);
        }
        let value = Tensor::new(vec![n, da + db], out)?;
        Ok(self.push(value, Op::ConcatCols { a, b }, &[a, b]))
    }

    /// Repeat a `[1,d]` row `n` times.
    pub fn broadcast_rows(&mut self, input: Var, n: usize) -> Result<Var> {
        let d = match *self.shape(input) {
            [1, d] => d,
            ref s => return Err(Error::Shape(format!("broadcast_rows expects [1,d], got {s:?}"))),
        };
        let x = self.data(input).to_vec();
        let out: Vec<T> = std::iter::repeat_n(x, n).flatten().collect();
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push(value, Op::BroadcastRows { input }, &[input]))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.data(input).iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { input }, &[input])
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let factor = T::from_f64_lossy(factor);
        let x = self.value(input);
        let out = x.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Scale { input, factor }, &[input])
    }

    /// Mean binary cross-entropy of probabilities against `{0,1}` targets.
    /// Probabilities are clamped to `[1e-7, 1-1e-7]`; the gradient is the
    /// cross-entropy derivative evaluated at the clamped probability.
    pub fn bce_mean(&mut self, probs: Var, targets: &[f64]) -> Result<Var> {
        let p = self.data(probs);
        if p.is_empty() || p.len() != targets.len() {
            return Err(Error::InvalidArgument(format!(
                "bce: {} predictions vs {} targets",
                p.len(),
                targets.len()
            )));
        }
        let targets: Vec<T> = targets.iter().map(|&t| T::from_f64_lossy(t)).collect();
        let n = T::from_usize(p.len()).unwrap();
        let total = p
            .iter()
            .zip(&targets)
            .map(|(&p, &y)| {
                let pc = clamp_prob(p);
                -(y * pc.ln() + (T::one() - y) * (T::one() - pc).ln())
            })
            .sum::<T>();
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceMean { probs, targets },
            &[probs],
        ))
    }

    /// `Σ smoothL1(input - targets)` with the unit transition point.
    pub fn smooth_l1_sum(&mut self, input: Var, targets: &[f64]) -> Result<Var> {
        let x = self.data(input);
        if x.len() != targets.len() {
            return Err(Error::InvalidArgument(format!(
                "smooth_l1: {} predictions vs {} targets",
                x.len(),
                targets.len()
            )));
        }
        let targets: Vec<T> = targets.iter().map(|&t| T::from_f64_lossy(t)).collect();
        let half = T::from_f64_lossy(0.5);
        let total = x
            .iter()
            .zip(&targets)
            .map(|(&a, &t)| {
                let d = (a - t).abs();
                if d < T::one() {
                    half * d * d
                } else {
                    d - half
                }
            })
            .sum::<T>();
        Ok(self.push(
            Tensor::scalar(total),
            Op::SmoothL1Sum { input, targets },
            &[input],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of leaves created with
    /// `requires_grad` are added to their accumulators; repeated calls sum.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let n = self.shape(*input)[0];
                let c_out = self.shape(*weight)[0];
                let rows = geom.col_rows();
                let ncols = geom.col_cols();
                let in_sz = geom.c_in * geom.h * geom.w;
                if self.requires_grad(*bias) {
                    let mut db = vec![T::zero(); c_out];
                    for i in 0..n {
                        let go = &g[i * c_out * ncols..(i + 1) * c_out * ncols];
                        for (co, row) in go.chunks(ncols).enumerate() {
                            db[co] = db[co] + row.iter().copied().sum::<T>();
                        }
                    }
                    accumulate(grads, *bias, db);
                }
                if self.requires_grad(*weight) {
                    let mut dw = vec![T::zero(); c_out * rows];
                    for i in 0..n {
                        let go = &g[i * c_out * ncols..(i + 1) * c_out * ncols];
                        let col = &cols[i * rows * ncols..(i + 1) * rows * ncols];
                        T::gemm(c_out, ncols, rows, go, false, col, true, T::one(), &mut dw);
                    }
                    accumulate(grads, *weight, dw);
                }
                if self.requires_grad(*input) {
                    let wt = self.data(*weight);
                    let mut dx = vec![T::zero(); n * in_sz];
                    let mut dcol = vec![T::zero(); rows * ncols];
                    for i in 0..n {
                        let go = &g[i * c_out * ncols..(i + 1) * c_out * ncols];
                        T::gemm(rows, c_out, ncols, wt, true, go, false, T::zero(), &mut dcol);
                        kernels::col2im_add(&dcol, geom, &mut dx[i * in_sz..(i + 1) * in_sz]);
                    }
                    accumulate(grads, *input, dx);
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (n, d_in) = (self.shape(*input)[0], self.shape(*input)[1]);
                let d_out = self.shape(*weight)[1];
                if self.requires_grad(*bias) {
                    let mut db = vec![T::zero(); d_out];
                    for row in g.chunks(d_out) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                    }
                    accumulate(grads, *bias, db);
                }
                if self.requires_grad(*weight) {
                    let mut dw = vec![T::zero(); d_in * d_out];
                    T::gemm(d_in, n, d_out, self.data(*input), true, g, false, T::zero(), &mut dw);
                    accumulate(grads, *weight, dw);
                }
                if self.requires_grad(*input) {
                    let mut dx = vec![T::zero(); n * d_in];
                    T::gemm(n, d_out, d_in, g, false, self.data(*weight), true, T::zero(), &mut dx);
                    accumulate(grads, *input, dx);
                }
            }
            Op::Activation { input, kind } => {
                let y = node.value.data();
                let dx: Vec<T> = match kind {
                    Activation::Relu => y
                        .iter()
                        .zip(g)
                        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
                        .collect(),
                    Activation::Sigmoid => y
                        .iter()
                        .zip(g)
                        .map(|(&y, &g)| g * y * (T::one() - y))
                        .collect(),
                    Activation::SoftmaxLastDim => {
                        let d = node.value.shape().last().copied().unwrap_or(1).max(1);
                        let mut dx = Vec::with_capacity(y.len());
                        for (yr, gr) in y.chunks(d).zip(g.chunks(d)) {
                            let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                            dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                        }
                        dx
                    }
                };
                accumulate(grads, *input, dx);
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gamma)[0];
                let gm = self.data(*gamma);
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + gr[j] * xr[j];
                            db[j] = db[j] + gr[j];
                        }
                    }
                    accumulate(grads, *gamma, dg);
                    accumulate(grads, *beta, db);
                }
                if self.requires_grad(*input) {
                    let dt = T::from_usize(d).unwrap();
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gm[j];
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * xr[j];
                        }
                        for j in 0..d {
                            let dxh = gr[j] * gm[j];
                            dx[r * d + j] = *is / dt * (dt * dxh - s1 - xr[j] * s2);
                        }
                    }
                    accumulate(grads, *input, dx);
                }
            }
            Op::RegionMaxPool { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).len()];
                for (&a, &gv) in argmax.iter().zip(g) {
                    dx[a] = dx[a] + gv;
                }
                accumulate(grads, *input, dx);
            }
            Op::L2Normalize { input, norms, eps } => {
                let y = node.value.data();
                let d = node.value.shape().last().copied().unwrap_or(1).max(1);
                let mut dx = Vec::with_capacity(y.len());
                for ((yr, gr), &n) in y.chunks(d).zip(g.chunks(d)).zip(norms) {
                    if n >= *eps {
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                        dx.extend(yr.iter().zip(gr).map(|(&a, &b)| (b - a * dot) / n));
                    } else {
                        dx.extend(gr.iter().map(|&b| b / *eps));
                    }
                }
                accumulate(grads, *input, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (l, d) = (self.shape(*q)[0], self.shape(*q)[1]);
                let dh = d / heads;
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                let (qd, kd, vd) = (self.data(*q), self.data(*k), self.data(*v));
                let mut dq = vec![T::zero(); l * d];
                let mut dk = vec![T::zero(); l * d];
                let mut dv = vec![T::zero(); l * d];
                let mut dp = vec![T::zero(); l];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..l {
                        let p = &probs[(h * l + i) * l..(h * l + i + 1) * l];
                        for j in 0..l {
                            let mut s = T::zero();
                            for c in 0..dh {
                                s = s + g[i * d + off + c] * vd[j * d + off + c];
                                dv[j * d + off + c] = dv[j * d + off + c] + p[j] * g[i * d + off + c];
                            }
                            dp[j] = s;
                        }
                        let dot = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..l {
                            let ds = p[j] * (dp[j] - dot) * scale;
                            if ds == T::zero() {
                                continue;
                            }
                            for c in 0..dh {
                                dq[i * d + off + c] = dq[i * d + off + c] + ds * kd[j * d + off + c];
                                dk[j * d + off + c] = dk[j * d + off + c] + ds * qd[i * d + off + c];
                            }
                        }
                    }
                }
                accumulate(grads, *q, dq);
                accumulate(grads, *k, dk);
                accumulate(grads, *v, dv);
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.to_vec());
            }
            Op::Reshape { input } => accumulate(grads, *input, g.to_vec()),
            Op::Transpose2d { input } => {
                let (r, c) = (self.shape(*input)[0], self.shape(*input)[1]);
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                accumulate(grads, *input, dx);
            }
            Op::GatherRows { input, indices } => {
                let x = self.value(*input);
                let row = x.shape()[1..].iter().product::<usize>();
                let mut dx = vec![T::zero(); x.len()];
                for (k, &i) in indices.iter().enumerate() {
                    for c in 0..row {
                        dx[i * row + c] = dx[i * row + c] + g[k * row + c];
                    }
                }
                accumulate(grads, *input, dx);
            }
            Op::ConcatCols { a, b } => {
                let da = self.shape(*a)[1];
                let db = self.shape(*b)[1];
                let mut ga = Vec::with_capacity(g.len() / (da + db) * da);
                let mut gb = Vec::with_capacity(g.len() / (da + db) * db);
                for row in g.chunks(da + db) {
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::BroadcastRows { input } => {
                let d = self.shape(*input)[1];
                let mut dx = vec![T::zero(); d];
                for row in g.chunks(d) {
                    dx.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                }
                accumulate(grads, *input, dx);
            }
            Op::Sum { input } => {
                let n = self.value(*input).len();
                accumulate(grads, *input, vec![g[0]; n]);
            }
            Op::Scale { input, factor } => {
                accumulate(grads, *input, g.iter().map(|&v| v * *factor).collect());
            }
            Op::BceMean { probs, targets } => {
                let p = self.data(*probs);
                let n = T::from_usize(p.len()).unwrap();
                let dx = p
                    .iter()
                    .zip(targets)
                    .map(|(&p, &y)| {
                        let pc = clamp_prob(p);
                        g[0] * (-(y / pc) + (T::one() - y) / (T::one() - pc)) / n
                    })
                    .collect();
                accumulate(grads, *probs, dx);
            }
            Op::SmoothL1Sum { input, targets } => {
                let dx = self
                    .data(*input)
                    .iter()
                    .zip(targets)
                    .map(|(&a, &t)| {
                        let d = a - t;
                        if d.abs() < T::one() {
                            g[0] * d
                        } else {
                            g[0] * d.signum()
                        }
                    })
                    .collect();
                accumulate(grads, *input, dx);
            }
        }
    }
}

fn clamp_prob<T: Element>(p: T) -> T {
    let eps = T::from_f64_lossy(BCE_EPS);
    p.max(eps).min(T::one() - eps)
}

fn accumulate<T: Element>(grads: &mut [Option<Vec<T>>], target: Var, delta: Vec<T>) {
    match &mut grads[target.0] {
        Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, &b)| *a = *a + b),
        slot @ None => *slot = Some(delta),
    }
}
