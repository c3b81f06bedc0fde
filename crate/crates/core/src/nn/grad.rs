use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::loss::{bce_loss, kld_avg, LossMode, LossSpec};
use super::model::{forward, ForwardPass, Mode, ModelParameters};
use crate::{Error, Result};

/// Partial derivatives, one `(weights, biases)` pair per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParameters) -> Self {
        Self {
            layers: params
                .layers()
                .iter()
                .map(|l| {
                    (
                        Array2::zeros(l.weights.dim()),
                        Array1::zeros(l.biases.len()),
                    )
                })
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }

    fn check_congruent(&self, params: &ModelParameters) -> Result<()> {
        if self.layers.len() != params.num_layers() {
            return Err(Error::Shape(format!(
                "{} gradient layers for {} model layers",
                self.layers.len(),
                params.num_layers()
            )));
        }
        for (k, ((gw, gb), l)) in self.layers.iter().zip(params.layers()).enumerate() {
            if gw.dim() != l.weights.dim() || gb.len() != l.biases.len() {
                return Err(Error::Shape(format!(
                    "layer {k}: gradient {:?} vs weights {:?}",
                    gw.dim(),
                    l.weights.dim()
                )));
            }
        }
        Ok(())
    }
}

/// Loss value split into its parts. `kld` is the unweighted average KL term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub bce: f64,
    pub kld: Option<f64>,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn loss_value(pass: &ForwardPass, labels: &[u8], spec: &LossSpec) -> Result<LossValue> {
    let preds = pass.predictions();
    let bce = bce_loss(&preds, labels, spec.epsilon)?;
    match &spec.mode {
        LossMode::BceOnly => Ok(LossValue {
            total: bce,
            bce,
            kld: None,
        }),
        LossMode::BcePlusKld {
            peers,
            direction,
            coefficient,
        } => {
            let kld = kld_avg(&preds, peers, *direction, spec.epsilon)?;
            Ok(LossValue {
                total: bce + coefficient * kld,
                bce,
                kld: Some(kld),
            })
        }
    }
}

/// Loss without gradients; same dropout handling as [`compute_gradients`].
pub fn evaluate_loss(
    params: &ModelParameters,
    batch: ArrayView2<'_, f64>,
    labels: &[u8],
    spec: &LossSpec,
    mode: Mode<'_>,
) -> Result<LossValue> {
    check_labels(batch.nrows(), labels)?;
    spec.validate(labels.len())?;
    let pass = forward(params, batch, mode)?;
    loss_value(&pass, labels, spec)
}

fn check_labels(rows: usize, labels: &[u8]) -> Result<()> {
    if rows != labels.len() {
        return Err(Error::Shape(format!(
            "{rows} rows for {} labels",
            labels.len()
        )));
    }
    if rows == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(())
}

/// Loss and its exact gradient through the clamped sigmoid output.
///
/// Peer predictions are constants; only the model's own output carries
/// gradient. Where the output sits outside `[eps, 1 - eps]` the clamp is flat
/// and that row contributes nothing.
pub fn compute_gradients(
    params: &ModelParameters,
    batch: ArrayView2<'_, f64>,
    labels: &[u8],
    spec: &LossSpec,
    mode: Mode<'_>,
) -> Result<(LossValue, GradientSet)> {
    check_labels(batch.nrows(), labels)?;
    spec.validate(labels.len())?;
    let pass = forward(params, batch, mode)?;
    let value = loss_value(&pass, labels, spec)?;

    let n = labels.len() as f64;
    let eps = spec.epsilon;
    // dL/dz for the head, one entry per row
    let head_delta: Array1<f64> = pass
        .probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if !(p > eps && p < 1.0 - eps) {
                return 0.0;
            }
            let mut g = p - f64::from(labels[i]);
            if let LossMode::BcePlusKld {
                peers,
                direction,
                coefficient,
            } = &spec.mode
            {
                if *coefficient != 0.0 {
                    let sum: f64 = peers
                        .iter()
                        .map(|peer| {
                            let q = peer[i].clamped(eps).positive();
                            match direction {
                                // d/dz [p ln(p/q) + (1-p) ln((1-p)/(1-q))]
                                super::KlDirection::Forward => {
                                    p * (1.0 - p) * (logit(p) - logit(q))
                                }
                                // d/dz [q ln(q/p) + (1-q) ln((1-q)/(1-p))]
                                super::KlDirection::Reverse => p - q,
                            }
                        })
                        .sum();
                    g += coefficient * sum / peers.len() as f64;
                }
            }
            g / n
        })
        .collect();

    let mut grads = GradientSet::zeros_like(params);
    let mut delta = head_delta.insert_axis(Axis(1));
    for k in (0..params.num_layers()).rev() {
        let layer = &params.layers()[k];
        grads.layers[k].0 = delta.t().dot(&pass.inputs[k]);
        grads.layers[k].1 = delta.sum_axis(Axis(0));
        if k == 0 {
            break;
        }
        let mut upstream = delta.dot(&layer.weights);
        if let Some(mask) = &pass.masks[k - 1] {
            upstream *= mask;
        }
        upstream.zip_mut_with(&pass.pre[k - 1], |g, &z| {
            if z <= 0.0 {
                *g = 0.0;
            }
        });
        delta = upstream;
    }
    Ok((value, grads))
}

/// `params - lr * grads`, returned as a new parameter set.
pub fn sgd_step(params: &ModelParameters, grads: &GradientSet, lr: f64) -> Result<ModelParameters> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::InvalidArgument(format!("learning rate {lr}")));
    }
    grads.check_congruent(params)?;
    let mut next = params.clone();
    for (layer, (gw, gb)) in next.layers_mut().iter_mut().zip(&grads.layers) {
        layer.weights.scaled_add(-lr, gw);
        layer.biases.scaled_add(-lr, gb);
    }
    if next.layers().iter().any(|l| {
        l.weights
            .iter()
            .chain(l.biases.iter())
            .any(|v| !v.is_finite())
    }) {
        return Err(Error::NonFinite("parameters after SGD step".into()));
    }
    Ok(next)
}

/// Compare the analytic gradient with central differences over every
/// coordinate and return the largest relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
///
/// Dropout is either off (`masks = None`) or frozen to the given masks.
pub fn finite_difference_check(
    params: &ModelParameters,
    batch: ArrayView2<'_, f64>,
    labels: &[u8],
    spec: &LossSpec,
    h: f64,
    masks: Option<&[Array2<f64>]>,
) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {h} outside [1e-6, 1e-3]"
        )));
    }
    let mode = || match masks {
        Some(m) => Mode::Frozen(m),
        None => Mode::Eval,
    };
    let (_, analytic) = compute_gradients(params, batch, labels, spec, mode())?;
    let loss_at =
        |p: &ModelParameters| evaluate_loss(p, batch, labels, spec, mode()).map(|v| v.total);

    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for k in 0..params.num_layers() {
        let (rows, cols) = params.layers()[k].weights.dim();
        let coords = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| Coord::Weight(r, c)))
            .chain((0..rows).map(Coord::Bias));
        for coord in coords {
            let original = coord.get(&probe, k);
            coord.set(&mut probe, k, original + h);
            let up = loss_at(&probe)?;
            coord.set(&mut probe, k, original - h);
            let down = loss_at(&probe)?;
            coord.set(&mut probe, k, original);
            let numeric = (up - down) / (2.0 * h);
            let a = match coord {
                Coord::Weight(r, c) => analytic.layers[k].0[(r, c)],
                Coord::Bias(r) => analytic.layers[k].1[r],
            };
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[derive(Clone, Copy)]
enum Coord {
    Weight(usize, usize),
    Bias(usize),
}

impl Coord {
    fn get(self, p: &ModelParameters, k: usize) -> f64 {
        let l = &p.layers()[k];
        match self {
            Coord::Weight(r, c) => l.weights[(r, c)],
            Coord::Bias(r) => l.biases[r],
        }
    }

    fn set(self, p: &mut ModelParameters, k: usize, v: f64) {
        let l = &mut p.layers_mut()[k];
        match self {
            Coord::Weight(r, c) => l.weights[(r, c)] = v,
            Coord::Bias(r) => l.biases[r] = v,
        }
    }
}
