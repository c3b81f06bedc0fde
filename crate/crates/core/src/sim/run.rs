use log::{debug, info};
use rayon::prelude::*;
use serde::Serialize;

use super::comm::{account_communication, CommLedger, MessageKind};
use super::config::{DataSource, SimulationConfig};
use crate::data::{
    generate_synthetic, load_csv, normalize, stratified_kfold, Dataset, FoldSchedule,
};
use crate::nn::ModelParameters;
use crate::protocols::{
    average_weights, evaluate_with_eps, local_train, mutual_update, predict, preprocess_weights,
    select_partition, uniform_weights, update_weights, ClientInit, ClientReport, LayerPartition,
    LocalOutcome, MutualEpoch, PartitionKind, StrategyKind,
};
use crate::rng::{stream, tag};
use crate::{Error, Result};

/// Synchronisation action taken at the end of a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    None,
    ShallowShare,
    DeepShare,
    MutualExchange,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::None => "none",
            EventKind::ShallowShare => "shallow_share",
            EventKind::DeepShare => "deep_share",
            EventKind::MutualExchange => "mutual_exchange",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientRoundMetrics {
    pub client: usize,
    /// Mean training loss of the final local epoch.
    pub train_loss: f64,
    pub fold_acc: f64,
    /// Accuracy on the round's common set after the mutual phase.
    pub common_acc: Option<f64>,
    /// Mutual learning: BCE on the common set at exchange time. Otherwise the
    /// reported end-of-training fold loss.
    pub bce_term: f64,
    /// Average KL to peers on the common set at exchange time.
    pub kld_term: Option<f64>,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub local_losses: Vec<f64>,
    pub mutual_trace: Vec<MutualEpoch>,
    pub mutual_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub event: EventKind,
    pub layer_boundary: Option<usize>,
    pub clients: Vec<ClientRoundMetrics>,
    /// Server model after its per-round retrain (weight-sharing strategies).
    pub global: Option<ClientReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FinalMetric {
    pub client: usize,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct SimulationOutcome {
    pub config: SimulationConfig,
    pub records: Vec<RoundRecord>,
    pub ledger: CommLedger,
    pub final_models: Vec<ModelParameters>,
    pub global_model: Option<ModelParameters>,
    /// Per-client accuracy and loss on the evaluation set.
    pub final_metrics: Vec<FinalMetric>,
    /// `holdout` or `train`.
    pub eval_set: &'static str,
    pub folds_consumed: usize,
    pub folds_remaining: usize,
    pub param_count: usize,
    /// Intermediate snapshots `(round, client models)`.
    pub checkpoints: Vec<(usize, Vec<ModelParameters>)>,
}

/// Normalised training data and evaluation set.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub eval: Dataset,
    pub eval_is_holdout: bool,
}

/// Load or generate the data and standardise it with training statistics.
pub fn prepare_data(config: &SimulationConfig) -> Result<PreparedData> {
    let (train, eval, eval_is_holdout) = match &config.data {
        DataSource::Synthetic(s) => {
            let train = generate_synthetic(
                s.n,
                s.dim,
                s.separation,
                &mut stream(config.seed, &[tag::DATA]),
            )?;
            let holdout = generate_synthetic(
                s.holdout_n,
                s.dim,
                s.separation,
                &mut stream(config.seed, &[tag::HOLDOUT]),
            )?;
            (train, holdout, true)
        }
        DataSource::Csv { path, holdout_path } => {
            let train = load_csv(path)?;
            match holdout_path {
                Some(h) => (train, load_csv(h)?, true),
                None => (train.clone(), train, false),
            }
        }
    };
    if train.dim() != eval.dim() {
        return Err(Error::Shape(format!(
            "training data has {} features, evaluation data {}",
            train.dim(),
            eval.dim()
        )));
    }
    if !config.normalize {
        return Ok(PreparedData {
            train,
            eval,
            eval_is_holdout,
        });
    }
    let (train, stats) = normalize(&train)?;
    let eval = stats.apply(&eval)?;
    Ok(PreparedData {
        train,
        eval,
        eval_is_holdout,
    })
}

pub fn run_simulation(config: &SimulationConfig) -> Result<SimulationOutcome> {
    run_simulation_with(config, |_, _| {})
}

fn pop(schedule: &mut FoldSchedule, round: usize, what: &str) -> Result<Vec<usize>> {
    schedule.pop_fold().map_err(|_| Error::FoldsExhausted {
        consumed: schedule.consumed(),
        context: format!("round {round}, {what}"),
    })
}

fn nonfinite_as_round_error(round: usize, client: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::NonFiniteLoss { round, client },
        other => other,
    }
}

/// Run the simulation; `observer` sees the client models after every round's
/// synchronisation step.
pub fn run_simulation_with(
    config: &SimulationConfig,
    mut observer: impl FnMut(usize, &[ModelParameters]),
) -> Result<SimulationOutcome> {
    config.validate()?;
    let data = prepare_data(config)?;
    let train = &data.train;
    let strategy = &config.strategy;
    let n_clients = config.clients;
    let seed = config.seed;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;

    let mut schedule = stratified_kfold(
        train,
        n_clients,
        config.rounds,
        &mut stream(seed, &[tag::FOLDS]),
    )?;
    let arch = config.model.architecture(train.dim());
    let init = arch.init(&mut stream(seed, &[tag::INIT]))?;
    let param_count = init.param_count();
    let num_layers = init.num_layers();
    let boundary = config.shallow_boundary();
    let local_cfg = strategy.train_config(strategy.local_epochs);

    // The first (public) fold builds the initial global model and/or the
    // clients' starting points.
    let first = train.subset(&pop(&mut schedule, 0, "initial global model")?);
    let keeps_global = strategy.kind != StrategyKind::DistributedMutualLearning;
    let client_init = strategy.client_init();
    let initial = if keeps_global || client_init == ClientInit::Global {
        let g = local_train(init, &first, &local_cfg, &mut stream(seed, &[tag::GLOBAL]))?;
        info!(
            "initial global model: fold accuracy {:.4}, loss {:.4}",
            g.report.accuracy, g.report.loss
        );
        Some(g.params)
    } else {
        None
    };
    let mut clients = match (client_init, &initial) {
        (ClientInit::Global, Some(g)) => vec![g.clone(); n_clients],
        _ => pool.install(|| {
            (0..n_clients)
                .into_par_iter()
                .map(|c| {
                    let own = arch.init(&mut stream(seed, &[tag::INIT, c as u64 + 1]))?;
                    let mut rng = stream(seed, &[tag::CLIENT_INIT, c as u64]);
                    local_train(own, &first, &local_cfg, &mut rng).map(|o| o.params)
                })
                .collect::<Result<Vec<_>>>()
        })?,
    };
    let mut global = if keeps_global { initial } else { None };

    let mut records = Vec::with_capacity(config.rounds);
    let mut ledger = CommLedger::default();
    let mut checkpoints = Vec::new();

    for round in 0..config.rounds {
        let folds: Vec<Dataset> = (0..n_clients)
            .map(|c| pop(&mut schedule, round, &format!("client {c}")).map(|f| train.subset(&f)))
            .collect::<Result<_>>()?;

        let locals: Vec<LocalOutcome> = pool.install(|| {
            clients
                .par_iter()
                .zip(folds.par_iter())
                .enumerate()
                .map(|(c, (params, fold))| {
                    let mut rng = stream(seed, &[tag::LOCAL, round as u64, c as u64]);
                    local_train(params.clone(), fold, &local_cfg, &mut rng)
                        .map_err(nonfinite_as_round_error(round, c))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        for (c, l) in locals.iter().enumerate() {
            if !l.report.loss.is_finite() {
                return Err(Error::NonFiniteLoss { round, client: c });
            }
        }
        let reports: Vec<ClientReport> = locals.iter().map(|l| l.report).collect();
        clients = locals.iter().map(|l| l.params.clone()).collect();

        let mut metrics: Vec<ClientRoundMetrics> = locals
            .into_iter()
            .enumerate()
            .map(|(c, l)| ClientRoundMetrics {
                client: c,
                train_loss: *l.epoch_losses.last().expect("at least one epoch"),
                fold_acc: l.report.accuracy,
                common_acc: None,
                bce_term: l.report.loss,
                kld_term: None,
                bytes_sent: 0,
                bytes_received: 0,
                local_losses: l.epoch_losses,
                mutual_trace: Vec::new(),
                mutual_losses: Vec::new(),
            })
            .collect();

        let (event, layer_boundary, global_report) = match strategy.kind {
            StrategyKind::Vanilla | StrategyKind::AsyncWeights => {
                let (partition, weighted) = if strategy.kind == StrategyKind::Vanilla {
                    (
                        LayerPartition {
                            kind: PartitionKind::Deep,
                            boundary,
                        },
                        uniform_weights(&clients),
                    )
                } else {
                    let kind = select_partition(round, strategy.delta, strategy.warmup);
                    (
                        LayerPartition::new(kind, boundary, num_layers)?,
                        preprocess_weights(&clients, &reports)?,
                    )
                };
                let avg = average_weights(&weighted)?;
                drop(weighted);

                let g = global
                    .take()
                    .expect("weight strategies keep a global model");
                let g = if strategy.kind == StrategyKind::Vanilla {
                    avg.clone()
                } else {
                    update_weights(&g, &avg, partition)?
                };
                let g_fold = train.subset(&pop(&mut schedule, round, "global model")?);
                let g_out = local_train(
                    g,
                    &g_fold,
                    &local_cfg,
                    &mut stream(seed, &[tag::GLOBAL, round as u64]),
                )?;
                global = Some(g_out.params);

                clients = if strategy.kind == StrategyKind::Vanilla {
                    vec![avg; n_clients]
                } else {
                    clients
                        .iter()
                        .map(|c| update_weights(c, &avg, partition))
                        .collect::<Result<_>>()?
                };

                let (kind, payload, event, lb) = match partition.kind {
                    PartitionKind::Deep => (
                        MessageKind::FullWeights,
                        param_count,
                        EventKind::DeepShare,
                        None,
                    ),
                    PartitionKind::Shallow => (
                        MessageKind::ShallowWeights,
                        clients[0].param_count_below(boundary),
                        EventKind::ShallowShare,
                        Some(boundary),
                    ),
                };
                let weights = account_communication(kind, payload);
                let extra = if strategy.kind == StrategyKind::AsyncWeights {
                    account_communication(MessageKind::Metrics, 0)
                } else {
                    0
                };
                for m in &mut metrics {
                    m.bytes_sent = weights + extra;
                    m.bytes_received = weights;
                }
                (event, lb, Some(g_out.report))
            }
            StrategyKind::DistributedMutualLearning => {
                let common = train.subset(&pop(&mut schedule, round, "common set")?);
                let predictions: Vec<_> = pool.install(|| {
                    clients
                        .par_iter()
                        .map(|p| predict(p, common.features().view()))
                        .collect::<Result<Vec<_>>>()
                })?;
                let outcomes = pool.install(|| {
                    clients
                        .par_iter()
                        .enumerate()
                        .map(|(c, params)| {
                            let peers: Vec<_> = predictions
                                .iter()
                                .enumerate()
                                .filter(|(j, _)| *j != c)
                                .map(|(_, p)| p.clone())
                                .collect();
                            let mut rng = stream(seed, &[tag::MUTUAL, round as u64, c as u64]);
                            mutual_update(params.clone(), &common, &peers, strategy, &mut rng)
                                .map_err(nonfinite_as_round_error(round, c))
                        })
                        .collect::<Result<Vec<_>>>()
                })?;
                let sent = account_communication(MessageKind::Predictions, common.len());
                let received =
                    account_communication(MessageKind::Predictions, common.len() * n_clients);
                clients = Vec::with_capacity(n_clients);
                for (m, out) in metrics.iter_mut().zip(outcomes) {
                    let at_exchange = out.trace[0];
                    if !at_exchange.total.is_finite() {
                        return Err(Error::NonFiniteLoss {
                            round,
                            client: m.client,
                        });
                    }
                    let (acc, _) = evaluate_with_eps(&out.params, &common, strategy.epsilon)?;
                    m.common_acc = Some(acc);
                    m.bce_term = at_exchange.bce;
                    m.kld_term = Some(at_exchange.kld);
                    m.bytes_sent = sent;
                    m.bytes_received = received;
                    m.mutual_trace = out.trace;
                    m.mutual_losses = out.epoch_losses;
                    clients.push(out.params);
                }
                (EventKind::MutualExchange, None, None)
            }
        };

        for m in &metrics {
            ledger.record(round, m.client, m.bytes_sent, m.bytes_received);
        }
        debug!(
            "round {round}: {} | mean fold acc {:.4}",
            event.as_str(),
            metrics.iter().map(|m| m.fold_acc).sum::<f64>() / n_clients as f64
        );
        observer(round, &clients);
        if config.checkpoint_every > 0 && (round + 1) % config.checkpoint_every == 0 {
            checkpoints.push((round, clients.clone()));
        }
        records.push(RoundRecord {
            round,
            event,
            layer_boundary,
            clients: metrics,
            global: global_report,
        });
    }

    let final_metrics = clients
        .iter()
        .enumerate()
        .map(|(c, p)| {
            evaluate_with_eps(p, &data.eval, strategy.epsilon).map(|(accuracy, loss)| FinalMetric {
                client: c,
                accuracy,
                loss,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SimulationOutcome {
        config: config.clone(),
        records,
        ledger,
        final_models: clients,
        global_model: global,
        final_metrics,
        eval_set: if data.eval_is_holdout {
            "holdout"
        } else {
            "train"
        },
        folds_consumed: schedule.consumed(),
        folds_remaining: schedule.len(),
        param_count,
        checkpoints,
    })
}
