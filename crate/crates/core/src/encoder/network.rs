use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array3, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand_distr::{Distribution, Normal};

use super::layers::{self, ConvCache, PoolCache, Pooling, Scalar, KERNEL};
use super::EncoderError;
use crate::rng::Rng;

static NEXT_PARAM_SET: AtomicU64 = AtomicU64::new(1);

/// One named parameter tensor, stored flat in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            name: name.into(),
            shape,
            data: vec![F::zero(); len],
        }
    }

    pub fn matrix(&self) -> ArrayView2<'_, F> {
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.data).expect("2-d tensor")
    }

    pub fn matrix_mut(&mut self) -> ArrayViewMut2<'_, F> {
        ArrayViewMut2::from_shape((self.shape[0], self.shape[1]), &mut self.data).expect("2-d tensor")
    }

    pub fn vector(&self) -> ArrayView1<'_, F> {
        ArrayView1::from(&self.data[..])
    }

    pub fn vector_mut(&mut self) -> ArrayViewMut1<'_, F> {
        ArrayViewMut1::from(&mut self.data[..])
    }
}

/// All trainable tensors of a network. `version` changes on every update,
/// which lets a backward pass detect a tape recorded against older weights.
#[derive(Clone, Debug)]
pub struct ParamSet<F> {
    pub tensors: Vec<Tensor<F>>,
    id: u64,
    version: u64,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new(tensors: Vec<Tensor<F>>) -> Self {
        ParamSet {
            tensors,
            id: NEXT_PARAM_SET.fetch_add(1, Ordering::Relaxed),
            version: 0,
        }
    }

    pub fn zeros_like(&self) -> ParamSet<F> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
            id: 0,
            version: 0,
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Mark the parameters as modified.
    pub fn bump(&mut self) {
        self.version += 1;
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_shapes(&self, other: &ParamSet<F>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape == b.shape)
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &ParamSet<F>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn iter_values(&self) -> impl Iterator<Item = F> + '_ {
        self.tensors.iter().flat_map(|t| t.data.iter().copied())
    }

    pub fn all_finite(&self) -> bool {
        self.iter_values().all(|v| v.is_finite())
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet::new(
            self.tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
                })
                .collect(),
        )
    }
}

/// One step of the sequential layer graph; `weight`/`bias` index into the [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Layer {
    Conv { weight: usize, bias: usize },
    Relu,
    MaxPool,
    MeanPool(Pooling),
    Dense { weight: usize, bias: usize },
}

#[derive(Clone, Debug)]
pub enum Activation<F> {
    Map(Array3<F>),
    Vector(Array1<F>),
}

impl<F: Scalar> Activation<F> {
    fn as_mut_slice(&mut self) -> &mut [F] {
        match self {
            Activation::Map(a) => a.as_slice_mut().expect("standard layout"),
            Activation::Vector(v) => v.as_slice_mut().expect("standard layout"),
        }
    }

    fn as_slice(&self) -> &[F] {
        match self {
            Activation::Map(a) => a.as_slice().expect("standard layout"),
            Activation::Vector(v) => v.as_slice().expect("standard layout"),
        }
    }

    fn map(self) -> Array3<F> {
        match self {
            Activation::Map(a) => a,
            Activation::Vector(_) => unreachable!("layer plan expects a feature map"),
        }
    }

    fn vector(self) -> Array1<F> {
        match self {
            Activation::Vector(v) => v,
            Activation::Map(_) => unreachable!("layer plan expects a vector"),
        }
    }
}

enum Cache<F> {
    Conv(ConvCache<F>),
    Relu(Activation<F>),
    MaxPool(PoolCache),
    MeanPool((usize, usize, usize)),
    Dense(Array1<F>),
}

/// Record of one forward pass, consumed by [`Network::backward`].
pub struct Tape<F> {
    params_id: u64,
    version: u64,
    caches: Vec<Cache<F>>,
}

impl<F> Tape<F> {
    /// Input of the dense layer at `layer` (e.g. the embedding feeding a head).
    pub(crate) fn dense_input(&self, layer: usize) -> Option<&Array1<F>> {
        match self.caches.get(layer) {
            Some(Cache::Dense(x)) => Some(x),
            _ => None,
        }
    }
}

/// Shapes of a conv trunk followed by dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub input: (usize, usize),
    pub conv_channels: Vec<usize>,
    pub pooling: Pooling,
    /// Dense widths; ReLU follows every dense layer except the last `linear_tail`.
    pub dense: Vec<usize>,
    pub linear_tail: usize,
}

impl Architecture {
    pub fn pooled_width(&self) -> usize {
        let (mut h, mut w) = self.input;
        for _ in &self.conv_channels {
            h /= 2;
            w /= 2;
        }
        let _ = h;
        let channels = *self.conv_channels.last().unwrap_or(&1);
        match self.pooling {
            Pooling::Time => channels * w,
            Pooling::TimeFrequency => channels,
        }
    }
}

/// Sequential network over `(1, time, frequency)` inputs.
#[derive(Clone, Debug)]
pub struct Network<F> {
    pub arch: Architecture,
    pub layers: Vec<Layer>,
    pub params: ParamSet<F>,
}

impl<F: Scalar> Network<F> {
    /// Build with zero weights.
    pub fn zeros(arch: Architecture) -> Result<Self, EncoderError> {
        let (h, w) = arch.input;
        let stages = arch.conv_channels.len();
        if h >> stages == 0 || w >> stages == 0 {
            return Err(EncoderError::InvalidConfig(format!(
                "input {h}x{w} is too small for {stages} pooling stages"
            )));
        }
        if arch.dense.is_empty() || arch.linear_tail > arch.dense.len() {
            return Err(EncoderError::InvalidConfig("dense layer plan is empty".into()));
        }
        let mut tensors = Vec::new();
        let mut layers = Vec::new();
        let mut channels = 1;
        for (i, &out) in arch.conv_channels.iter().enumerate() {
            tensors.push(Tensor::zeros(format!("conv{i}.weight"), vec![out, channels * KERNEL * KERNEL]));
            tensors.push(Tensor::zeros(format!("conv{i}.bias"), vec![out]));
            layers.push(Layer::Conv {
                weight: tensors.len() - 2,
                bias: tensors.len() - 1,
            });
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool);
            channels = out;
        }
        layers.push(Layer::MeanPool(arch.pooling));
        let mut width = arch.pooled_width();
        let relu_until = arch.dense.len() - arch.linear_tail;
        for (i, &out) in arch.dense.iter().enumerate() {
            tensors.push(Tensor::zeros(format!("dense{i}.weight"), vec![out, width]));
            tensors.push(Tensor::zeros(format!("dense{i}.bias"), vec![out]));
            layers.push(Layer::Dense {
                weight: tensors.len() - 2,
                bias: tensors.len() - 1,
            });
            if i < relu_until {
                layers.push(Layer::Relu);
            }
            width = out;
        }
        Ok(Network {
            arch,
            layers,
            params: ParamSet::new(tensors),
        })
    }

    /// He-normal weights before ReLU layers, LeCun-normal for linear outputs, zero biases.
    pub fn init(&mut self, rng: &mut Rng) {
        for (idx, layer) in self.layers.iter().enumerate() {
            let (Layer::Conv { weight, .. } | Layer::Dense { weight, .. }) = *layer else {
                continue;
            };
            let followed_by_relu = matches!(self.layers.get(idx + 1), Some(Layer::Relu));
            let t = &mut self.params.tensors[weight];
            let fan_in = t.shape[1] as f64;
            let gain = if followed_by_relu { 2.0 } else { 1.0 };
            let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive std");
            for v in &mut t.data {
                *v = F::from_f64(normal.sample(rng));
            }
        }
        self.params.bump();
    }

    pub fn output_width(&self) -> usize {
        *self.arch.dense.last().expect("validated non-empty")
    }

    /// Index in `layers` of the last dense layer.
    pub fn last_dense(&self) -> usize {
        self.layers
            .iter()
            .rposition(|l| matches!(l, Layer::Dense { .. }))
            .expect("validated non-empty")
    }

    fn check_input(&self, input: &Array3<F>) -> Result<(), EncoderError> {
        let (c, h, w) = input.dim();
        if c != 1 || (h, w) != self.arch.input {
            return Err(EncoderError::ShapeMismatch {
                expected: vec![1, self.arch.input.0, self.arch.input.1],
                got: vec![c, h, w],
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &Array3<F>) -> Result<Array1<F>, EncoderError> {
        self.forward_impl(input, self.layers.len(), None)
    }

    /// Output of the first `layers` layers; the cut must fall after the mean pool.
    pub fn forward_partial(&self, input: &Array3<F>, layers: usize) -> Result<Array1<F>, EncoderError> {
        let pool = self
            .layers
            .iter()
            .position(|l| matches!(l, Layer::MeanPool(_)))
            .expect("every network has a mean pool");
        if layers <= pool || layers > self.layers.len() {
            return Err(EncoderError::InvalidConfig(format!("cannot cut the network after {layers} layers")));
        }
        self.forward_impl(input, layers, None)
    }

    pub fn forward_with_tape(&self, input: &Array3<F>) -> Result<(Array1<F>, Tape<F>), EncoderError> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let out = self.forward_impl(input, self.layers.len(), Some(&mut caches))?;
        Ok((
            out,
            Tape {
                params_id: self.params.id,
                version: self.params.version,
                caches,
            },
        ))
    }

    fn forward_impl(
        &self,
        input: &Array3<F>,
        stop: usize,
        mut caches: Option<&mut Vec<Cache<F>>>,
    ) -> Result<Array1<F>, EncoderError> {
        self.check_input(input)?;
        let p = &self.params.tensors;
        let mut act = Activation::Map(input.to_owned());
        for layer in &self.layers[..stop] {
            let (next, cache) = match *layer {
                Layer::Conv { weight, bias } => {
                    let (y, c) = layers::conv_forward(&act.map(), p[weight].matrix(), p[bias].vector());
                    (Activation::Map(y), Cache::Conv(c))
                }
                Layer::Relu => {
                    let mut y = act;
                    layers::relu_forward(y.as_mut_slice());
                    let cache = Cache::Relu(if caches.is_some() { y.clone() } else { Activation::Vector(Array1::zeros(0)) });
                    (y, cache)
                }
                Layer::MaxPool => {
                    let (y, c) = layers::maxpool_forward(&act.map());
                    (Activation::Map(y), Cache::MaxPool(c))
                }
                Layer::MeanPool(pooling) => {
                    let x = act.map();
                    let dims = x.dim();
                    (Activation::Vector(layers::meanpool_forward(&x, pooling)), Cache::MeanPool(dims))
                }
                Layer::Dense { weight, bias } => {
                    let x = act.vector();
                    let y = layers::dense_forward(&x, p[weight].matrix(), p[bias].vector());
                    (Activation::Vector(y), Cache::Dense(x))
                }
            };
            if let Some(c) = caches.as_deref_mut() {
                c.push(cache);
            }
            act = next;
        }
        Ok(act.vector())
    }

    /// Reverse pass: parameter gradients of `upstream · output`.
    pub fn backward(&self, tape: &Tape<F>, upstream: &Array1<F>) -> Result<ParamSet<F>, EncoderError> {
        let mut grads = self.params.zeros_like();
        self.backward_into(tape, upstream, &mut grads)?;
        Ok(grads)
    }

    pub fn backward_into(&self, tape: &Tape<F>, upstream: &Array1<F>, grads: &mut ParamSet<F>) -> Result<(), EncoderError> {
        if tape.params_id != self.params.id || tape.version != self.params.version || tape.caches.len() != self.layers.len() {
            return Err(EncoderError::StaleTape);
        }
        if upstream.len() != self.output_width() {
            return Err(EncoderError::ShapeMismatch {
                expected: vec![self.output_width()],
                got: vec![upstream.len()],
            });
        }
        if !grads.same_shapes(&self.params) {
            return Err(EncoderError::ShapeMismatch {
                expected: vec![self.params.len()],
                got: vec![grads.len()],
            });
        }
        let p = &self.params.tensors;
        let mut g = Activation::Vector(upstream.clone());
        for (i, (layer, cache)) in self.layers.iter().zip(&tape.caches).enumerate().rev() {
            g = match (*layer, cache) {
                (Layer::Dense { weight, bias }, Cache::Dense(x)) => {
                    let (dw, db) = pair_mut(&mut grads.tensors, weight, bias);
                    Activation::Vector(layers::dense_backward(
                        x,
                        &g.vector(),
                        p[weight].matrix(),
                        dw.matrix_mut(),
                        db.vector_mut(),
                    ))
                }
                (Layer::Relu, Cache::Relu(out)) => {
                    let mut g = g;
                    layers::relu_backward(out.as_slice(), g.as_mut_slice());
                    g
                }
                (Layer::MeanPool(pooling), Cache::MeanPool(dims)) => {
                    Activation::Map(layers::meanpool_backward(&g.vector(), *dims, pooling))
                }
                (Layer::MaxPool, Cache::MaxPool(c)) => Activation::Map(layers::maxpool_backward(c, &g.map())),
                (Layer::Conv { weight, bias }, Cache::Conv(c)) => {
                    let (dw, db) = pair_mut(&mut grads.tensors, weight, bias);
                    match layers::conv_backward(c, &g.map(), p[weight].matrix(), dw.matrix_mut(), db.vector_mut(), i > 0) {
                        Some(dx) => Activation::Map(dx),
                        None => break,
                    }
                }
                _ => return Err(EncoderError::StaleTape),
            };
        }
        Ok(())
    }
}

fn pair_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert!(a < b);
    let (left, right) = v.split_at_mut(b);
    (&mut left[a], &mut right[0])
}
