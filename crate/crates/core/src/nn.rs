//! Named parameter storage and the per-forward-pass session that binds
//! parameters into a [`Graph`].

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Whether weight decay applies (weights yes, biases and norm affines no).
    pub decay: bool,
}

/// Ordered collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, tensor, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    decay: p.decay,
                })
                .collect(),
        }
    }

    /// Replace a tensor's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, data: Vec<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if data.len() != p.tensor.len() {
            return Err(Error::Shape(format!(
                "parameter {} has {} elements, got {}",
                p.name,
                p.tensor.len(),
                data.len()
            )));
        }
        p.tensor.data_mut().copy_from_slice(&data);
        Ok(())
    }
}

/// One forward pass: a fresh graph plus lazily bound parameter leaves.
pub struct Session<'p, T> {
    pub graph: Graph<T>,
    params: &'p ParamSet<T>,
    bound: Vec<Option<Var>>,
    track_grad: bool,
}

impl<'p, T: Element> Session<'p, T> {
    /// `track_grad = false` records no gradient requirement on parameters.
    pub fn new(params: &'p ParamSet<T>, track_grad: bool) -> Self {
        Session {
            graph: Graph::new(),
            params,
            bound: vec![None; params.len()],
            track_grad,
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self
            .graph
            .leaf(self.params.tensor(id).clone(), self.track_grad);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        self.graph.constant(tensor)
    }

    /// Gradient per parameter after [`Graph::backward`]; `None` for
    /// parameters the loss did not reach.
    pub fn param_grads(&self) -> Vec<Option<Vec<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.graph.grad(v).map(<[T]>::to_vec)))
            .collect()
    }
}

/// He (fan-in) normal initialization: `N(0, 2 / fan_in)`.
pub fn he_normal<T: Element, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    normal(rng, shape, std)
}

pub fn normal<T: Element, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal) * std))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches element count")
}
