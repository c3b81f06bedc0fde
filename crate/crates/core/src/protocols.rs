//! Aggregation and update primitives for the three strategies.

use log::warn;
use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::nn::{
    compute_gradients, evaluate_loss, forward, sgd_step, BinaryDist, KlDirection, LossSpec, Mode,
    ModelParameters, DEFAULT_EPSILON,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartitionKind {
    Shallow,
    Deep,
}

/// Which layers an exchange touches. Shallow covers layer indices
/// `< boundary`; Deep covers every layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerPartition {
    pub kind: PartitionKind,
    pub boundary: usize,
}

impl LayerPartition {
    pub fn new(kind: PartitionKind, boundary: usize, num_layers: usize) -> Result<Self> {
        if boundary < 1 || boundary >= num_layers {
            return Err(Error::InvalidArgument(format!(
                "layer boundary {boundary} must lie in [1, {num_layers})"
            )));
        }
        Ok(Self { kind, boundary })
    }

    /// Number of layers whose parameters are exchanged.
    pub fn shared_layers(&self, num_layers: usize) -> usize {
        match self.kind {
            PartitionKind::Shallow => self.boundary,
            PartitionKind::Deep => num_layers,
        }
    }
}

/// Default shallow/deep boundary: first half of the layers, rounded up.
pub fn default_boundary(num_layers: usize) -> usize {
    num_layers.div_ceil(2)
}

/// Deep iff `(round + 1) % delta == 0 && round >= warmup`, zero-based rounds.
pub fn select_partition(round: usize, delta: usize, warmup: usize) -> PartitionKind {
    if delta > 0 && (round + 1).is_multiple_of(delta) && round >= warmup {
        PartitionKind::Deep
    } else {
        PartitionKind::Shallow
    }
}

/// End-of-training metrics a client reports to the server.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub accuracy: f64,
    pub loss: f64,
    pub examples_seen: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Vanilla,
    AsyncWeights,
    DistributedMutualLearning,
}

impl StrategyKind {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Vanilla => "vanilla",
            StrategyKind::AsyncWeights => "async_weights",
            StrategyKind::DistributedMutualLearning => "dml",
        }
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "vanilla" | "sync" | "synchronous" => Ok(StrategyKind::Vanilla),
            "async" | "async_weights" | "asynchronous" => Ok(StrategyKind::AsyncWeights),
            "dml" | "mutual" | "distributed_mutual_learning" => {
                Ok(StrategyKind::DistributedMutualLearning)
            }
            other => Err(format!(
                "unknown strategy `{other}` (expected vanilla, async_weights or dml)"
            )),
        }
    }
}

/// How clients obtain their starting weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientInit {
    /// Copy the initial global model.
    Global,
    /// Each client initialises its own model and trains it on the public
    /// (first) fold.
    Independent,
}

impl ClientInit {
    pub fn name(&self) -> &'static str {
        match self {
            ClientInit::Global => "global",
            ClientInit::Independent => "independent",
        }
    }
}

impl std::str::FromStr for ClientInit {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "global" => Ok(ClientInit::Global),
            "independent" => Ok(ClientInit::Independent),
            other => Err(format!(
                "unknown client init `{other}` (expected global or independent)"
            )),
        }
    }
}

/// Strategy and training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    pub delta: usize,
    pub warmup: usize,
    pub local_epochs: usize,
    pub mutual_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub kl_direction: KlDirection,
    pub kl_coefficient: f64,
    /// `None` means [`default_boundary`].
    pub shallow_boundary: Option<usize>,
    pub epsilon: f64,
    /// `None` means the strategy default, see [`StrategySpec::client_init`].
    pub client_init: Option<ClientInit>,
}

impl StrategySpec {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            delta: 3,
            warmup: 5,
            local_epochs: 5,
            mutual_epochs: 5,
            lr: 0.05,
            batch_size: 32,
            kl_direction: KlDirection::Forward,
            kl_coefficient: 1.0,
            shallow_boundary: None,
            epsilon: DEFAULT_EPSILON,
            client_init: None,
        }
    }

    /// Weight-sharing strategies start every client from the global model.
    /// Mutual learning keeps no global model, so by default each client
    /// builds its own.
    pub fn client_init(&self) -> ClientInit {
        self.client_init.unwrap_or(match self.kind {
            StrategyKind::DistributedMutualLearning => ClientInit::Independent,
            _ => ClientInit::Global,
        })
    }

    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if self.delta < 1 {
            errs.push("strategy.delta must be >= 1".to_string());
        }
        if self.local_epochs < 1 {
            errs.push("strategy.local_epochs must be >= 1".to_string());
        }
        if self.mutual_epochs < 1 {
            errs.push("strategy.mutual_epochs must be >= 1".to_string());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            errs.push(format!("strategy.lr must be > 0, got {}", self.lr));
        }
        if self.batch_size < 1 {
            errs.push("strategy.batch_size must be >= 1".to_string());
        }
        if !(self.kl_coefficient.is_finite() && self.kl_coefficient >= 0.0) {
            errs.push(format!(
                "strategy.kl_coefficient must be >= 0, got {}",
                self.kl_coefficient
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            errs.push(format!(
                "strategy.epsilon must lie in (0, 0.5), got {}",
                self.epsilon
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    pub fn train_config(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            epsilon: self.epsilon,
        }
    }
}

/// Aggregation coefficients paired with the client models they weight.
#[derive(Debug, Clone)]
pub struct WeightedModels<'a> {
    pub entries: Vec<(f64, &'a ModelParameters)>,
    /// Set when every accuracy was zero and uniform weights were substituted.
    pub degenerate: bool,
}

/// Accuracy-proportional aggregation coefficients.
pub fn preprocess_weights<'a>(
    client_params: &'a [ModelParameters],
    reports: &[ClientReport],
) -> Result<WeightedModels<'a>> {
    if client_params.is_empty() || client_params.len() != reports.len() {
        return Err(Error::Shape(format!(
            "{} models for {} reports",
            client_params.len(),
            reports.len()
        )));
    }
    if let Some(r) = reports.iter().find(|r| !(0.0..=1.0).contains(&r.accuracy)) {
        return Err(Error::InvalidArgument(format!(
            "accuracy {} outside [0, 1]",
            r.accuracy
        )));
    }
    let total: f64 = reports.iter().map(|r| r.accuracy).sum();
    let degenerate = total == 0.0;
    let coefficients: Vec<f64> = if degenerate {
        warn!("all client accuracies are zero; using uniform aggregation weights");
        vec![1.0 / reports.len() as f64; reports.len()]
    } else {
        reports.iter().map(|r| r.accuracy / total).collect()
    };
    Ok(WeightedModels {
        entries: coefficients.into_iter().zip(client_params).collect(),
        degenerate,
    })
}

/// Uniform coefficients `1/K`.
pub fn uniform_weights(client_params: &[ModelParameters]) -> WeightedModels<'_> {
    let c = 1.0 / client_params.len() as f64;
    WeightedModels {
        entries: client_params.iter().map(|p| (c, p)).collect(),
        degenerate: false,
    }
}

/// Convex combination `Σ c_i θ_i`, accumulated as `θ_0 + Σ c_i (θ_i − θ_0)`
/// so that averaging identical models returns them bit for bit.
pub fn average_weights(weighted: &WeightedModels<'_>) -> Result<ModelParameters> {
    let entries = &weighted.entries;
    let (_, base) = *entries
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to average".into()))?;
    let sum: f64 = entries.iter().map(|(c, _)| c).sum();
    if (sum - 1.0).abs() > 1e-9 || entries.iter().any(|(c, _)| !c.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "coefficients sum to {sum}, not 1"
        )));
    }
    for (i, (_, p)) in entries.iter().enumerate().skip(1) {
        base.check_congruent(p)
            .map_err(|e| Error::Shape(format!("client {i} vs client 0: {e}")))?;
    }
    let mut avg = (*base).clone();
    for (c, p) in entries.iter().skip(1) {
        for (out, (theta, theta0)) in avg
            .layers_mut()
            .iter_mut()
            .zip(p.layers().iter().zip(base.layers()))
        {
            out.weights
                .zip_mut_with(&(&theta.weights - &theta0.weights), |o, d| *o += c * d);
            out.biases
                .zip_mut_with(&(&theta.biases - &theta0.biases), |o, d| *o += c * d);
        }
    }
    Ok(avg)
}

/// Deep: take `avg` wholesale. Shallow: layers below the boundary from `avg`,
/// the rest from `current`.
pub fn update_weights(
    current: &ModelParameters,
    avg: &ModelParameters,
    partition: LayerPartition,
) -> Result<ModelParameters> {
    current.check_congruent(avg)?;
    if partition.boundary < 1 || partition.boundary >= current.num_layers() {
        return Err(Error::InvalidArgument(format!(
            "layer boundary {} invalid for {} layers",
            partition.boundary,
            current.num_layers()
        )));
    }
    match partition.kind {
        PartitionKind::Deep => Ok(avg.clone()),
        PartitionKind::Shallow => {
            let layers = avg
                .layers()
                .iter()
                .zip(current.layers())
                .enumerate()
                .map(|(k, (a, c))| {
                    if k < partition.boundary {
                        a.clone()
                    } else {
                        c.clone()
                    }
                })
                .collect();
            ModelParameters::new(layers)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epsilon: f64,
}

/// Accuracy with the `p >= 0.5 → 1` rule, and mean BCE, in eval mode.
pub fn evaluate(params: &ModelParameters, data: &Dataset) -> Result<(f64, f64)> {
    evaluate_with_eps(params, data, DEFAULT_EPSILON)
}

pub(crate) fn evaluate_with_eps(
    params: &ModelParameters,
    data: &Dataset,
    eps: f64,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let pass = forward(params, data.features().view(), Mode::Eval)?;
    let correct = pass
        .probs
        .iter()
        .zip(data.labels())
        .filter(|(&p, &y)| u8::from(p >= 0.5) == y)
        .count();
    let bce = crate::nn::bce_loss(&pass.predictions(), data.labels(), eps)?;
    Ok((correct as f64 / data.len() as f64, bce))
}

/// Eval-mode predictions for every row.
pub fn predict(params: &ModelParameters, features: ArrayView2<'_, f64>) -> Result<Vec<BinaryDist>> {
    Ok(forward(params, features, Mode::Eval)?.predictions())
}

/// Peer term for [`run_epochs`]: per-row peer predictions plus KL settings.
struct PeerTerm<'a> {
    peers: &'a [Vec<BinaryDist>],
    direction: KlDirection,
    coefficient: f64,
}

/// Mini-batch SGD over `data`; returns the trained model and the mean batch
/// loss of each epoch.
fn run_epochs(
    mut params: ModelParameters,
    data: &Dataset,
    cfg: &TrainConfig,
    peers: Option<&PeerTerm<'_>>,
    rng: &mut dyn RngCore,
    mut on_epoch_start: impl FnMut(&ModelParameters) -> Result<()>,
) -> Result<(ModelParameters, Vec<f64>)> {
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        on_epoch_start(&params)?;
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let x = data.features().select(Axis(0), chunk);
            let y: Vec<u8> = chunk.iter().map(|&i| data.labels()[i]).collect();
            let spec = match peers {
                Some(term) if term.coefficient != 0.0 => {
                    let batch_peers = term
                        .peers
                        .iter()
                        .map(|p| chunk.iter().map(|&i| p[i]).collect())
                        .collect();
                    LossSpec {
                        epsilon: cfg.epsilon,
                        ..LossSpec::mutual(batch_peers, term.direction, term.coefficient)
                    }
                }
                _ => LossSpec {
                    epsilon: cfg.epsilon,
                    ..LossSpec::bce()
                },
            };
            let (loss, grads) =
                compute_gradients(&params, x.view(), &y, &spec, Mode::Train(&mut *rng))?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite("training loss".into()));
            }
            params = sgd_step(&params, &grads, cfg.lr)?;
            total += loss.total;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok((params, epoch_losses))
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub params: ModelParameters,
    pub report: ClientReport,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Train on a fold with plain cross-entropy, then report fold accuracy/loss.
pub fn local_train(
    params: ModelParameters,
    fold: &Dataset,
    cfg: &TrainConfig,
    rng: &mut dyn RngCore,
) -> Result<LocalOutcome> {
    if fold.is_empty() {
        return Err(Error::InvalidArgument(
            "local training on an empty fold".into(),
        ));
    }
    let (params, epoch_losses) = run_epochs(params, fold, cfg, None, rng, |_| Ok(()))?;
    let (accuracy, loss) = evaluate_with_eps(&params, fold, cfg.epsilon)?;
    Ok(LocalOutcome {
        params,
        report: ClientReport {
            accuracy,
            loss,
            examples_seen: fold.len() * cfg.epochs,
        },
        epoch_losses,
    })
}

/// Eval-mode loss components on the whole common set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MutualEpoch {
    pub total: f64,
    pub bce: f64,
    pub kld: f64,
}

#[derive(Debug, Clone)]
pub struct MutualOutcome {
    pub params: ModelParameters,
    /// One entry per mutual epoch, measured in eval mode before that epoch's
    /// updates; entry 0 is the loss at exchange time.
    pub trace: Vec<MutualEpoch>,
    /// Mean train-mode batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Train on the common set against `bce + kl_coefficient · KLD_avg`, with peer
/// predictions held fixed for the whole phase.
pub fn mutual_update(
    params: ModelParameters,
    common: &Dataset,
    peer_predictions: &[Vec<BinaryDist>],
    spec: &StrategySpec,
    rng: &mut dyn RngCore,
) -> Result<MutualOutcome> {
    if peer_predictions.is_empty() {
        return Err(Error::InvalidArgument(
            "mutual update needs at least one peer".into(),
        ));
    }
    if common.is_empty() {
        return Err(Error::InvalidArgument("empty common set".into()));
    }
    if let Some((j, p)) = peer_predictions
        .iter()
        .enumerate()
        .find(|(_, p)| p.len() != common.len())
    {
        return Err(Error::Shape(format!(
            "peer {j} sent {} predictions for a common set of {}",
            p.len(),
            common.len()
        )));
    }
    let cfg = spec.train_config(spec.mutual_epochs);
    let term = PeerTerm {
        peers: peer_predictions,
        direction: spec.kl_direction,
        coefficient: spec.kl_coefficient,
    };
    let full_spec = LossSpec {
        epsilon: spec.epsilon,
        ..LossSpec::mutual(
            peer_predictions.to_vec(),
            spec.kl_direction,
            spec.kl_coefficient,
        )
    };
    let mut trace = Vec::with_capacity(cfg.epochs);
    let (params, epoch_losses) = run_epochs(params, common, &cfg, Some(&term), rng, |p| {
        let v = evaluate_loss(
            p,
            common.features().view(),
            common.labels(),
            &full_spec,
            Mode::Eval,
        )?;
        trace.push(MutualEpoch {
            total: v.total,
            bce: v.bce,
            kld: v.kld.unwrap_or(0.0),
        });
        Ok(())
    })?;
    Ok(MutualOutcome {
        params,
        trace,
        epoch_losses,
    })
}
