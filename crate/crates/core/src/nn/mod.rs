//! Small dense networks with hand-derived gradients.
//!
//! A layer computes `Y = act(X Wᵀ + b)` row by row, with `X` of shape
//! `n × in` and `W` of shape `out × in`.

mod adam;
mod gradcheck;
mod init;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{sigmoid, Matrix, Scalar};

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, GradCheck, GradCheckReport};
pub use init::init_mlp;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cache does not match this network: {0}")]
    StaleCache(String),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("invalid network description: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::ZERO),
            Activation::Sigmoid => sigmoid(z),
            Activation::None => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    #[inline]
    fn derivative<T: Scalar>(self, z: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::ZERO {
                    T::ONE
                } else {
                    T::ZERO
                }
            }
            Activation::Sigmoid => y * (T::ONE - y),
            Activation::None => T::ONE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    /// `out × in`.
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(weight: Matrix<T>, bias: Vec<T>, activation: Activation) -> Result<Self, NnError> {
        if bias.len() != weight.rows() {
            return Err(NnError::Shape(format!(
                "bias of length {} for {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn pre_activation(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut z = x.matmul_t(&self.weight);
        for i in 0..z.rows() {
            for (zij, &bj) in z.row_mut(i).iter_mut().zip(&self.bias) {
                *zij += bj;
            }
        }
        z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<DenseLayer<T>>,
}

/// Intermediate values from [`Mlp::forward`] needed by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Matrix<T>>,
    /// Pre-activation of each layer.
    pre: Vec<Matrix<T>>,
    output: Matrix<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn output(&self) -> &Matrix<T> {
        &self.output
    }

    /// Pre-activation of the last layer (the logits of a sigmoid head).
    pub fn last_pre_activation(&self) -> &Matrix<T> {
        self.pre.last().expect("network has at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads<T> {
    pub layers: Vec<LayerGrads<T>>,
}

impl<T: Scalar> MlpGrads<T> {
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_assign(&b.weight);
            for (x, &y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for l in &mut self.layers {
            l.weight.scale(s);
            l.bias.iter_mut().for_each(|x| *x *= s);
        }
    }
}

impl<T: Scalar> Mlp<T> {
    pub fn new(layers: Vec<DenseLayer<T>>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Invalid("an MLP needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(NnError::Shape(format!(
                    "layer {k} outputs {} values but layer {} expects {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer<T>] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Layer widths, input first.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(DenseLayer::out_dim))
            .collect()
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: l.weight.cast(),
                    bias: l.bias.iter().map(|&b| U::from_f64(b.to_f64())).collect(),
                    activation: l.activation,
                })
                .collect(),
        }
    }

    /// Forward pass without keeping intermediates.
    pub fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>, NnError> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            let mut z = layer.pre_activation(&h);
            z.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = layer.activation.apply(*v));
            h = z;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, ForwardCache<T>), NnError> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let z = layer.pre_activation(&h);
            let y = z.map(|v| layer.activation.apply(v));
            inputs.push(h);
            pre.push(z);
            h = y;
        }
        let cache = ForwardCache {
            inputs,
            pre,
            output: h.clone(),
        };
        Ok((h, cache))
    }

    /// Gradients of a scalar loss given `dy = ∂loss/∂Y`. Returns parameter
    /// gradients and `∂loss/∂X`.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        dy: &Matrix<T>,
    ) -> Result<(MlpGrads<T>, Matrix<T>), NnError> {
        self.check_cache(cache)?;
        if dy.shape() != cache.output.shape() {
            return Err(NnError::Shape(format!(
                "upstream gradient {:?} vs output {:?}",
                dy.shape(),
                cache.output.shape()
            )));
        }
        let last = self.layers.len() - 1;
        let act = self.layers[last].activation;
        let mut dz = dy.clone();
        for ((g, &z), &y) in dz
            .as_mut_slice()
            .iter_mut()
            .zip(cache.pre[last].as_slice())
            .zip(cache.output.as_slice())
        {
            *g *= act.derivative(z, y);
        }
        Ok(self.backward_pre(cache, dz))
    }

    /// Like [`Mlp::backward`] but starting from `∂loss/∂Z` of the last
    /// layer, skipping its activation. Used by losses defined on logits.
    pub fn backward_from_pre_activation(
        &self,
        cache: &ForwardCache<T>,
        dz_last: &Matrix<T>,
    ) -> Result<(MlpGrads<T>, Matrix<T>), NnError> {
        self.check_cache(cache)?;
        if dz_last.shape() != cache.last_pre_activation().shape() {
            return Err(NnError::Shape(format!(
                "logit gradient {:?} vs logits {:?}",
                dz_last.shape(),
                cache.last_pre_activation().shape()
            )));
        }
        Ok(self.backward_pre(cache, dz_last.clone()))
    }

    fn backward_pre(&self, cache: &ForwardCache<T>, mut dz: Matrix<T>) -> (MlpGrads<T>, Matrix<T>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let x = &cache.inputs[k];
            let weight = dz.t_matmul(x);
            let mut bias = vec![T::ZERO; layer.out_dim()];
            for r in dz.row_iter() {
                for (b, &g) in bias.iter_mut().zip(r) {
                    *b += g;
                }
            }
            grads.push(LayerGrads { weight, bias });
            let mut dx = dz.matmul(&layer.weight);
            if k > 0 {
                let prev = &self.layers[k - 1];
                for ((g, &z), &y) in dx
                    .as_mut_slice()
                    .iter_mut()
                    .zip(cache.pre[k - 1].as_slice())
                    .zip(x.as_slice())
                {
                    *g *= prev.activation.derivative(z, y);
                }
            }
            dz = dx;
        }
        grads.reverse();
        (MlpGrads { layers: grads }, dz)
    }

    pub fn zero_grads(&self) -> MlpGrads<T> {
        MlpGrads {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![T::ZERO; l.out_dim()],
                })
                .collect(),
        }
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<(), NnError> {
        if x.cols() != self.in_dim() {
            return Err(NnError::Shape(format!(
                "input has {} columns, network expects {}",
                x.cols(),
                self.in_dim()
            )));
        }
        Ok(())
    }

    fn check_cache(&self, cache: &ForwardCache<T>) -> Result<(), NnError> {
        if cache.inputs.len() != self.layers.len() {
            return Err(NnError::StaleCache(format!(
                "{} cached layers for a {}-layer network",
                cache.inputs.len(),
                self.layers.len()
            )));
        }
        for (k, (layer, x)) in self.layers.iter().zip(&cache.inputs).enumerate() {
            if x.cols() != layer.in_dim() || cache.pre[k].cols() != layer.out_dim() {
                return Err(NnError::StaleCache(format!("layer {k} shapes differ")));
            }
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed traversal order.
pub trait ParamSet<T> {
    fn tensors(&self) -> Vec<(String, &[T])>;
    fn tensors_mut(&mut self) -> Vec<&mut [T]>;

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

impl<T: Scalar> ParamSet<T> for Mlp<T> {
    fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (k, l) in self.layers.iter().enumerate() {
            out.push((format!("{k}.weight"), l.weight.as_slice()));
            out.push((format!("{k}.bias"), l.bias.as_slice()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }
}

impl<T: Scalar> ParamSet<T> for MlpGrads<T> {
    fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (k, l) in self.layers.iter().enumerate() {
            out.push((format!("{k}.weight"), l.weight.as_slice()));
            out.push((format!("{k}.bias"), l.bias.as_slice()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }
}

/// All parameters concatenated in traversal order.
pub fn flatten<T: Scalar>(p: &impl ParamSet<T>) -> Vec<T> {
    p.tensors().into_iter().flat_map(|(_, t)| t.to_vec()).collect()
}

/// Inverse of [`flatten`]. Panics on length mismatch.
pub fn unflatten_into<T: Scalar>(p: &mut impl ParamSet<T>, flat: &[T]) {
    let mut offset = 0;
    for t in p.tensors_mut() {
        let n = t.len();
        t.copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    assert_eq!(offset, flat.len(), "flat parameter vector has wrong length");
}
