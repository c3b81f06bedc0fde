use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::loss::BinaryDist;
use crate::{Error, Result};

/// One fully connected layer. `weights` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    /// Dropout applied to this layer's (post-ReLU) output during training.
    /// Always zero on the sigmoid head.
    pub dropout: f64,
}

impl DenseLayer {
    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

/// Trainable parameters of the classifier: hidden layers use ReLU, the final
/// layer is a single sigmoid unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    layers: Vec<DenseLayer>,
}

impl ModelParameters {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("model has no layers".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.biases.len() != layer.output_dim() {
                return Err(Error::Shape(format!(
                    "layer {k}: {} biases for {} output units",
                    layer.biases.len(),
                    layer.output_dim()
                )));
            }
            if k > 0 && layer.input_dim() != layers[k - 1].output_dim() {
                return Err(Error::Shape(format!(
                    "layer {k} expects {} inputs but layer {} produces {}",
                    layer.input_dim(),
                    k - 1,
                    layers[k - 1].output_dim()
                )));
            }
            if !(0.0..1.0).contains(&layer.dropout) {
                return Err(Error::InvalidArgument(format!(
                    "layer {k}: dropout {} outside [0, 1)",
                    layer.dropout
                )));
            }
            if layer
                .weights
                .iter()
                .chain(layer.biases.iter())
                .any(|v| !v.is_finite())
            {
                return Err(Error::NonFinite(format!("layer {k} parameters")));
            }
        }
        let head = layers.last().expect("non-empty");
        if head.output_dim() != 1 {
            return Err(Error::Shape(format!(
                "final layer must have exactly 1 output unit, has {}",
                head.output_dim()
            )));
        }
        if head.dropout != 0.0 {
            return Err(Error::InvalidArgument("dropout on the sigmoid head".into()));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<DenseLayer> {
        self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Parameters held by layers with index `< boundary`.
    pub fn param_count_below(&self, boundary: usize) -> usize {
        self.layers
            .iter()
            .take(boundary)
            .map(DenseLayer::param_count)
            .sum()
    }

    /// Same layer count, dimensions and dropout rates.
    pub fn check_congruent(&self, other: &ModelParameters) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Shape(format!(
                "{} layers vs {} layers",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for (k, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            if a.weights.dim() != b.weights.dim() || a.biases.len() != b.biases.len() {
                return Err(Error::Shape(format!(
                    "layer {k}: {:?} vs {:?}",
                    a.weights.dim(),
                    b.weights.dim()
                )));
            }
            if a.dropout != b.dropout {
                return Err(Error::Shape(format!("layer {k}: dropout rates differ")));
            }
        }
        Ok(())
    }

    /// All parameters flattened layer by layer (weights row-major, then biases).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend(layer.weights.iter());
            out.extend(layer.biases.iter());
        }
        out
    }

    /// Euclidean distance between two congruent parameter sets.
    pub fn distance(&self, other: &ModelParameters) -> Result<f64> {
        self.check_congruent(other)?;
        let sq: f64 = self
            .flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sq.sqrt())
    }
}

/// Layer sizes for a freshly initialised model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>, dropout: f64) -> Self {
        Self {
            input_dim,
            hidden,
            dropout,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ModelParameters> {
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Shape(format!(
                "zero-width layer in {} -> {:?} -> 1",
                self.input_dim, self.hidden
            )));
        }
        let mut sizes = vec![self.input_dim];
        sizes.extend(&self.hidden);
        sizes.push(1);
        let n_layers = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-limit..=limit));
                DenseLayer {
                    weights,
                    biases: Array1::zeros(fan_out),
                    dropout: if k + 1 < n_layers { self.dropout } else { 0.0 },
                }
            })
            .collect();
        ModelParameters::new(layers)
    }
}

/// How dropout behaves during a forward pass.
pub enum Mode<'a> {
    /// No dropout, no rescaling.
    Eval,
    /// Sample fresh inverted-dropout masks.
    Train(&'a mut dyn RngCore),
    /// Reuse masks from [`sample_masks`]; one per hidden layer.
    Frozen(&'a [Array2<f64>]),
}

/// Activations cached by [`forward`] for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Input to each layer (post-dropout output of the previous one).
    pub inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pub pre: Vec<Array2<f64>>,
    /// Scaled dropout mask per hidden layer, `None` where dropout was off.
    pub masks: Vec<Option<Array2<f64>>>,
    /// Sigmoid output per row.
    pub probs: Array1<f64>,
}

impl ForwardPass {
    pub fn predictions(&self) -> Vec<BinaryDist> {
        self.probs.iter().map(|&p| BinaryDist::new(p)).collect()
    }

    pub fn logits(&self) -> Array1<f64> {
        self.pre
            .last()
            .expect("at least one layer")
            .column(0)
            .to_owned()
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn inverted_mask(rows: usize, cols: usize, rate: f64, rng: &mut dyn RngCore) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_fn((rows, cols), |_| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    })
}

/// Draw one set of inverted-dropout masks for a batch of `rows` examples.
pub fn sample_masks(
    params: &ModelParameters,
    rows: usize,
    rng: &mut dyn RngCore,
) -> Vec<Array2<f64>> {
    let hidden = &params.layers()[..params.num_layers() - 1];
    hidden
        .iter()
        .map(|l| {
            if l.dropout > 0.0 {
                inverted_mask(rows, l.output_dim(), l.dropout, rng)
            } else {
                Array2::ones((rows, l.output_dim()))
            }
        })
        .collect()
}

pub fn forward(
    params: &ModelParameters,
    batch: ArrayView2<'_, f64>,
    mut mode: Mode<'_>,
) -> Result<ForwardPass> {
    if batch.ncols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "batch has {} columns, model expects {}",
            batch.ncols(),
            params.input_dim()
        )));
    }
    if batch.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input batch".into()));
    }
    let rows = batch.nrows();
    let last = params.num_layers() - 1;
    if let Mode::Frozen(masks) = &mode {
        if masks.len() != last {
            return Err(Error::Shape(format!(
                "{} frozen masks for {} hidden layers",
                masks.len(),
                last
            )));
        }
        for (k, m) in masks.iter().enumerate() {
            if m.dim() != (rows, params.layers()[k].output_dim()) {
                return Err(Error::Shape(format!(
                    "frozen mask {k} has shape {:?}",
                    m.dim()
                )));
            }
        }
    }

    let mut inputs = Vec::with_capacity(params.num_layers());
    let mut pre = Vec::with_capacity(params.num_layers());
    let mut masks = Vec::with_capacity(last);
    let mut current = batch.to_owned();
    for (k, layer) in params.layers().iter().enumerate() {
        let z = current.dot(&layer.weights.t()) + &layer.biases;
        inputs.push(current);
        if k == last {
            pre.push(z);
            break;
        }
        let mut a = z.mapv(|v| v.max(0.0));
        let mask = match &mut mode {
            Mode::Eval => None,
            Mode::Train(rng) if layer.dropout > 0.0 => Some(inverted_mask(
                rows,
                layer.output_dim(),
                layer.dropout,
                &mut **rng,
            )),
            Mode::Train(_) => None,
            Mode::Frozen(ms) => Some(ms[k].clone()),
        };
        if let Some(m) = &mask {
            a *= m;
        }
        masks.push(mask);
        pre.push(z);
        current = a;
    }
    let probs = pre[last].index_axis(Axis(1), 0).mapv(sigmoid);
    Ok(ForwardPass {
        inputs,
        pre,
        masks,
        probs,
    })
}
