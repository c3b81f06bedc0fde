//! Acceptance suite. Prints one PASS/FAIL line per criterion and a summary.
//!
//! Failing criteria are reported but do not fail `cargo test` unless
//! `ACCEPTANCE_STRICT=1` is set, so the rest of the workspace suite still runs.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::Rng;

use fedmutual::data::{fold_budget, generate_synthetic, stratified_kfold};
use fedmutual::nn::{
    finite_difference_check, kl_divergence, kld_avg, sample_masks, LossSpec, DEFAULT_EPSILON,
};
use fedmutual::rng::stream;
use fedmutual::sim::{
    run_simulation, run_simulation_with, write_outputs, DataSource, SyntheticSpec,
};
use fedmutual::{
    Architecture, BinaryDist, KlDirection, ModelParameters, SimulationConfig, StrategyKind,
};

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

const ALL: [StrategyKind; 3] = [
    StrategyKind::Vanilla,
    StrategyKind::AsyncWeights,
    StrategyKind::DistributedMutualLearning,
];

fn synthetic(kind: StrategyKind, separation: f64, seed: u64) -> SimulationConfig {
    let mut c = SimulationConfig::new(
        5,
        12,
        kind,
        DataSource::Synthetic(SyntheticSpec {
            separation,
            ..SyntheticSpec::default()
        }),
    );
    c.seed = seed;
    c
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, started: Instant) -> std::result::Result<Duration, String> {
    let took = started.elapsed();
    if took < limit {
        Ok(took)
    } else {
        Err(format!("took {took:.2?}, limit {limit:?}"))
    }
}

/// Glorot weights with small random biases so no ReLU sits exactly on its kink.
fn fd_model(seed: u64) -> ModelParameters {
    let params = Architecture::new(5, vec![8, 6], 0.25)
        .init(&mut stream(seed, &[1]))
        .unwrap();
    let mut rng = stream(seed, &[2]);
    let layers = params
        .into_layers()
        .into_iter()
        .map(|mut l| {
            l.biases.mapv_inplace(|_| rng.random_range(-0.3..0.3));
            l
        })
        .collect();
    ModelParameters::new(layers).unwrap()
}

fn criterion_1() -> Check {
    let started = Instant::now();
    let params = fd_model(11);
    let rows = 16;
    let mut rng = stream(12, &[]);
    let x = Array2::from_shape_fn((rows, 5), |_| rng.random_range(-1.5..1.5));
    let y: Vec<u8> = (0..rows).map(|i| (i % 2) as u8).collect();
    let peers: Vec<Vec<BinaryDist>> = (0..3)
        .map(|_| {
            (0..rows)
                .map(|_| BinaryDist::new(rng.random_range(0.05..0.95)))
                .collect()
        })
        .collect();
    let masks = sample_masks(&params, rows, &mut stream(13, &[]));

    let modes = [
        ("bce", LossSpec::bce()),
        (
            "bce+kld",
            LossSpec::mutual(peers.clone(), KlDirection::Forward, 1.0),
        ),
        (
            "bce+kld(reverse)",
            LossSpec::mutual(peers, KlDirection::Reverse, 1.0),
        ),
    ];
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    for (name, spec) in &modes {
        for masked in [false, true] {
            let m = masked.then_some(masks.as_slice());
            let err = finite_difference_check(&params, x.view(), &y, spec, 1e-5, m)
                .map_err(|e| e.to_string())?;
            worst = worst.max(err);
            parts.push(format!(
                "{name}{} {err:.1e}",
                if masked { "/dropout" } else { "" }
            ));
        }
    }
    let took = within(Duration::from_secs(10), started)?;
    ensure(
        worst < 1e-4,
        format!(
            "max relative error {worst:.2e} < 1e-4 [{}] in {took:.2?}",
            parts.join(", ")
        ),
    )
}

fn criterion_2() -> Check {
    let mut rng = stream(21, &[]);
    let mut min = f64::INFINITY;
    for _ in 0..100_000 {
        let p = BinaryDist::new(rng.random::<f64>());
        let q = BinaryDist::new(rng.random::<f64>());
        min = min.min(kl_divergence(p, q, DEFAULT_EPSILON));
    }
    if min < 0.0 {
        return Err(format!("negative KL {min:e} over random pairs"));
    }
    let mut worst_identical = 0.0f64;
    for i in 0..=1000 {
        let p = BinaryDist::new(i as f64 / 1000.0);
        worst_identical = worst_identical.max(kl_divergence(p, p, DEFAULT_EPSILON).abs());
    }
    if worst_identical != 0.0 {
        return Err(format!("KL of identical pair {worst_identical:e}"));
    }
    let value = kld_avg(
        &[BinaryDist::new(0.6)],
        &[vec![BinaryDist::new(0.5)], vec![BinaryDist::new(0.7)]],
        KlDirection::Forward,
        DEFAULT_EPSILON,
    )
    .map_err(|e| e.to_string())?;
    // Independent scalar computation of both pairwise terms.
    let kl = |p: f64, q: f64| p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln();
    let oracle = (kl(0.6, 0.5) + kl(0.6, 0.7)) / 2.0;
    ensure(
        (value - 0.021359).abs() < 1e-6 && (value - oracle).abs() < 1e-12,
        format!("min KL over 1e5 pairs {min:.3e}, identical pairs 0, 3-client kld_avg {value:.6} (expected 0.021359)"),
    )
}

fn criterion_3() -> Check {
    let max_folds = fold_budget(10, 20);
    let data = generate_synthetic(4 * max_folds, 4, 2.0, &mut stream(31, &[]))
        .map_err(|e| e.to_string())?;
    let mut checked = 0;
    for c in 2..=10 {
        for r in 1..=20 {
            let schedule = stratified_kfold(&data, c, r, &mut stream(32, &[c as u64, r as u64]))
                .map_err(|e| e.to_string())?;
            let expected = (1 + c) * r + 1;
            if schedule.len() != expected {
                return Err(format!(
                    "C={c} R={r}: {} folds, expected {expected}",
                    schedule.len()
                ));
            }
            for fold in schedule.folds() {
                let pos = fold.iter().filter(|&&i| data.labels()[i] == 1).count();
                let neg = fold.len() - pos;
                if pos.abs_diff(neg) > 1 {
                    return Err(format!(
                        "C={c} R={r}: fold with {pos} positive, {neg} negative"
                    ));
                }
            }
            checked += 1;
        }
    }
    ensure(
        checked == 180,
        format!("{checked} (C,R) pairs, fold count (1+C)R+1 and imbalance <= 1"),
    )
}

fn criterion_4() -> Check {
    let mut worst = 0.0f64;
    let mut rounds = Vec::new();
    run_simulation_with(
        &synthetic(StrategyKind::Vanilla, 2.0, 41),
        |round, clients| {
            rounds.push(round);
            for a in clients {
                for b in clients {
                    worst = worst.max(a.distance(b).unwrap());
                }
            }
        },
    )
    .map_err(|e| e.to_string())?;
    ensure(
        worst == 0.0 && rounds == (0..12).collect::<Vec<_>>(),
        format!(
            "max pairwise distance {worst:e} over {} rounds",
            rounds.len()
        ),
    )
}

fn criterion_5() -> Check {
    let mut config = synthetic(StrategyKind::AsyncWeights, 2.0, 51);
    config.strategy.delta = 3;
    config.strategy.warmup = 5;
    let out = run_simulation(&config).map_err(|e| e.to_string())?;
    let deep: BTreeSet<usize> = out
        .records
        .iter()
        .filter(|r| r.event == fedmutual::EventKind::DeepShare)
        .map(|r| r.round)
        .collect();
    ensure(
        deep == BTreeSet::from([5, 8, 11]) && out.records.len() == 12,
        format!("deep-share rounds {deep:?}"),
    )
}

fn spread(accuracies: &[f64]) -> f64 {
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn criterion_6() -> Check {
    let started = Instant::now();
    let mut means = Vec::new();
    for kind in [
        StrategyKind::DistributedMutualLearning,
        StrategyKind::AsyncWeights,
    ] {
        let mut total = 0.0;
        for seed in 0..10 {
            let out = run_simulation(&synthetic(kind, 2.0, seed)).map_err(|e| e.to_string())?;
            let acc: Vec<f64> = out.final_metrics.iter().map(|m| m.accuracy).collect();
            total += spread(&acc);
        }
        means.push(total / 10.0);
    }
    let took = within(Duration::from_secs(300), started)?;
    ensure(
        means[0] < means[1],
        format!(
            "mean held-out accuracy std: dml {:.5}, async_weights {:.5} (need dml < async) in {took:.2?}",
            means[0], means[1]
        ),
    )
}

fn criterion_7() -> Check {
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..10 {
        let out = run_simulation(&synthetic(
            StrategyKind::DistributedMutualLearning,
            2.0,
            seed,
        ))
        .map_err(|e| e.to_string())?;
        let mean_kld = |i: usize| {
            let r = &out.records[i];
            r.clients.iter().map(|c| c.kld_term.unwrap()).sum::<f64>() / r.clients.len() as f64
        };
        let (first, last) = (mean_kld(0), mean_kld(out.records.len() - 1));
        if last < first {
            wins += 1;
        }
        detail.push(format!("{first:.4}->{last:.4}"));
    }
    ensure(
        wins >= 8,
        format!(
            "{wins}/10 seeds with final KLD < first [{}]",
            detail.join(" ")
        ),
    )
}

/// `(round, bytes_sent + bytes_received)` rows of comm.csv.
fn comm_rows(dir: &Path) -> Vec<(usize, u64)> {
    let text = fs::read_to_string(dir.join("comm.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("round,client,bytes_sent,bytes_received"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (
                f[0].parse().unwrap(),
                f[2].parse::<u64>().unwrap() + f[3].parse::<u64>().unwrap(),
            )
        })
        .collect()
}

fn event_rounds(dir: &Path, kind: &str) -> BTreeSet<usize> {
    fs::read_to_string(dir.join("events.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["kind"] == kind)
        .map(|v| v["round"].as_u64().unwrap() as usize)
        .collect()
}

fn criterion_8() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut dirs = Vec::new();
    let mut param_count = 0;
    let mut common_rows = 0;
    for kind in ALL {
        let out = run_simulation(&synthetic(kind, 2.0, 81)).map_err(|e| e.to_string())?;
        let dir = tmp.path().join(kind.name());
        write_outputs(&out, &dir).map_err(|e| e.to_string())?;
        param_count = out.param_count;
        if kind == StrategyKind::DistributedMutualLearning {
            common_rows = out.records[0].clients[0].bytes_sent as usize / 4;
        }
        dirs.push(dir);
    }
    if param_count <= common_rows {
        return Err(format!(
            "parameter count {param_count} does not exceed common set {common_rows}"
        ));
    }

    let shallow_rounds = event_rounds(&dirs[1], "shallow_share");
    let deep_rounds = event_rounds(&dirs[1], "deep_share");
    let mut full: Vec<u64> = comm_rows(&dirs[0]).into_iter().map(|(_, b)| b).collect();
    full.extend(
        comm_rows(&dirs[1])
            .into_iter()
            .filter(|(r, _)| deep_rounds.contains(r))
            .map(|(_, b)| b),
    );
    let shallow: Vec<u64> = comm_rows(&dirs[1])
        .into_iter()
        .filter(|(r, _)| shallow_rounds.contains(r))
        .map(|(_, b)| b)
        .collect();
    let dml: Vec<u64> = comm_rows(&dirs[2]).into_iter().map(|(_, b)| b).collect();
    if shallow.is_empty() || full.is_empty() || dml.is_empty() {
        return Err("missing ledger rows".into());
    }
    let max_dml = *dml.iter().max().unwrap();
    let (min_shallow, max_shallow) = (
        *shallow.iter().min().unwrap(),
        *shallow.iter().max().unwrap(),
    );
    let min_full = *full.iter().min().unwrap();
    ensure(
        max_dml < min_shallow && max_shallow < min_full,
        format!(
            "per client per round: dml <= {max_dml} < shallow {min_shallow}..{max_shallow} < full >= {min_full} \
             ({param_count} parameters, {common_rows} common rows)"
        ),
    )
}

fn criterion_9() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let files = ["history.csv", "comm.csv", "events.jsonl"];
    for kind in ALL {
        let mut snapshots = Vec::new();
        for (run, threads) in [1usize, 1, 4].into_iter().enumerate() {
            let mut config = synthetic(kind, 2.0, 91);
            config.threads = threads;
            let dir = tmp.path().join(format!("{}-{run}", kind.name()));
            write_outputs(&run_simulation(&config).map_err(|e| e.to_string())?, &dir)
                .map_err(|e| e.to_string())?;
            let bytes: Vec<Vec<u8>> = files
                .iter()
                .map(|f| fs::read(dir.join(f)).unwrap())
                .collect();
            snapshots.push(bytes);
        }
        for (run, snap) in snapshots.iter().enumerate().skip(1) {
            for (f, name) in files.iter().enumerate() {
                if snap[f] != snapshots[0][f] {
                    return Err(format!(
                        "{}: {name} differs between run 0 and run {run}",
                        kind.name()
                    ));
                }
            }
        }
    }
    Ok(
        "history.csv, comm.csv, events.jsonl byte-identical across repeat runs and 1 vs 4 threads"
            .into(),
    )
}

fn criterion_10() -> Check {
    let mut parts = Vec::new();
    let mut ok = true;
    for kind in ALL {
        let started = Instant::now();
        let out = run_simulation(&synthetic(kind, 6.0, 101)).map_err(|e| e.to_string())?;
        let took = within(Duration::from_secs(60), started)?;
        let worst = out
            .final_metrics
            .iter()
            .map(|m| m.accuracy)
            .fold(f64::INFINITY, f64::min);
        ok &= worst >= 0.95 && out.eval_set == "holdout";
        parts.push(format!("{} min {worst:.4} in {took:.2?}", kind.name()));
    }
    ensure(
        ok,
        format!(
            "held-out accuracy >= 0.95 for every client [{}]",
            parts.join(", ")
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("gradient correctness", criterion_1),
        ("KL suite", criterion_2),
        ("fold formula and stratification", criterion_3),
        ("vanilla identity", criterion_4),
        ("async schedule", criterion_5),
        ("generalization spread", criterion_6),
        ("mimicry trend", criterion_7),
        ("bandwidth ordering", criterion_8),
        ("determinism", criterion_9),
        ("learning sanity", criterion_10),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed.push(i + 1);
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failed.len(),
        criteria.len()
    );
    if failed.is_empty() {
        return ExitCode::SUCCESS;
    }
    println!("acceptance: failing criteria {failed:?}");
    if std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
