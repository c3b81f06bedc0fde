use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::run::SimulationOutcome;
use crate::nn::{DenseLayer, ModelParameters};
use crate::{Error, Result};

/// Files every run writes.
pub const OUTPUT_FILES: [&str; 5] = [
    "history.csv",
    "events.jsonl",
    "comm.csv",
    "config_resolved.toml",
    "final_metrics.csv",
];

const HISTORY_HEADER: &str =
    "round,client,train_loss,fold_acc,common_acc,bce_term,kld_term,bytes_sent,bytes_received";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn history_csv(outcome: &SimulationOutcome) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in &outcome.records {
        for m in &r.clients {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.round,
                m.client,
                m.train_loss,
                m.fold_acc,
                opt(m.common_acc),
                m.bce_term,
                opt(m.kld_term),
                m.bytes_sent,
                m.bytes_received
            )
            .expect("writing to a String");
        }
    }
    s
}

#[derive(Serialize)]
struct EventLine {
    round: usize,
    kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    layer_boundary: Option<usize>,
}

fn events_jsonl(outcome: &SimulationOutcome) -> String {
    let mut s = String::new();
    for r in &outcome.records {
        let line = EventLine {
            round: r.round,
            kind: r.event.as_str(),
            layer_boundary: r.layer_boundary,
        };
        s.push_str(&serde_json::to_string(&line).expect("plain struct"));
        s.push('\n');
    }
    s
}

fn comm_csv(outcome: &SimulationOutcome) -> String {
    let mut s = String::from("round,client,bytes_sent,bytes_received\n");
    for e in outcome.ledger.entries() {
        writeln!(
            s,
            "{},{},{},{}",
            e.round, e.client, e.bytes_sent, e.bytes_received
        )
        .expect("writing to a String");
    }
    s
}

fn final_metrics_csv(outcome: &SimulationOutcome) -> String {
    let mut s = String::from("client,eval_set,accuracy,loss\n");
    for m in &outcome.final_metrics {
        writeln!(
            s,
            "{},{},{},{}",
            m.client, outcome.eval_set, m.accuracy, m.loss
        )
        .expect("writing to a String");
    }
    s
}

fn global_csv(outcome: &SimulationOutcome) -> Option<String> {
    let mut s = String::from("round,fold_acc,fold_loss\n");
    let mut any = false;
    for r in &outcome.records {
        if let Some(g) = &r.global {
            writeln!(s, "{},{},{}", r.round, g.accuracy, g.loss).expect("writing to a String");
            any = true;
        }
    }
    any.then_some(s)
}

fn epochs_csv(outcome: &SimulationOutcome) -> String {
    let mut s = String::from("round,client,phase,epoch,loss,bce,kld\n");
    for r in &outcome.records {
        for m in &r.clients {
            for (e, l) in m.local_losses.iter().enumerate() {
                writeln!(s, "{},{},local,{e},{l},,", r.round, m.client)
                    .expect("writing to a String");
            }
            for (e, l) in m.mutual_losses.iter().enumerate() {
                let t = m.mutual_trace.get(e);
                writeln!(
                    s,
                    "{},{},mutual,{e},{l},{},{}",
                    r.round,
                    m.client,
                    opt(t.map(|t| t.bce)),
                    opt(t.map(|t| t.kld))
                )
                .expect("writing to a String");
            }
        }
    }
    s
}

fn write(dir: &Path, name: &str, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Write all run artefacts into `dir` (created if missing). Returns the paths
/// written.
pub fn write_outputs(outcome: &SimulationOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    write(dir, "history.csv", &history_csv(outcome), &mut written)?;
    write(dir, "events.jsonl", &events_jsonl(outcome), &mut written)?;
    write(dir, "comm.csv", &comm_csv(outcome), &mut written)?;
    write(
        dir,
        "config_resolved.toml",
        &outcome.config.to_resolved_toml(),
        &mut written,
    )?;
    write(
        dir,
        "final_metrics.csv",
        &final_metrics_csv(outcome),
        &mut written,
    )?;
    if let Some(g) = global_csv(outcome) {
        write(dir, "global.csv", &g, &mut written)?;
    }
    if outcome.config.verbose {
        write(dir, "epochs.csv", &epochs_csv(outcome), &mut written)?;
    }

    let mut models: Vec<(String, &ModelParameters)> = outcome
        .final_models
        .iter()
        .enumerate()
        .map(|(c, p)| (format!("client_{c}"), p))
        .collect();
    if let Some(g) = &outcome.global_model {
        models.push(("global".into(), g));
    }
    let path = dir.join("final_models.json");
    write_checkpoint(&path, None, &models)?;
    written.push(path);

    if !outcome.checkpoints.is_empty() {
        let cdir = dir.join("checkpoints");
        fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
        for (round, snapshot) in &outcome.checkpoints {
            let named: Vec<(String, &ModelParameters)> = snapshot
                .iter()
                .enumerate()
                .map(|(c, p)| (format!("client_{c}"), p))
                .collect();
            let path = cdir.join(format!("round_{round:04}.json"));
            write_checkpoint(&path, Some(*round), &named)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// One tensor of one layer of one model.
#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    model: String,
    layer: usize,
    tensor: String,
    shape: Vec<usize>,
    dropout: f64,
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    round: Option<usize>,
    entries: Vec<CheckpointEntry>,
}

const CHECKPOINT_FORMAT: &str = "fedmutual-checkpoint";

/// Persist models as a flat JSON list of layer-tagged arrays.
pub fn write_checkpoint(
    path: &Path,
    round: Option<usize>,
    models: &[(String, &ModelParameters)],
) -> Result<()> {
    let mut entries = Vec::new();
    for (name, params) in models {
        for (k, layer) in params.layers().iter().enumerate() {
            entries.push(CheckpointEntry {
                model: name.clone(),
                layer: k,
                tensor: "weights".into(),
                shape: vec![layer.output_dim(), layer.input_dim()],
                dropout: layer.dropout,
                values: layer.weights.iter().copied().collect(),
            });
            entries.push(CheckpointEntry {
                model: name.clone(),
                layer: k,
                tensor: "biases".into(),
                shape: vec![layer.output_dim()],
                dropout: layer.dropout,
                values: layer.biases.to_vec(),
            });
        }
    }
    let ckpt = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        round,
        entries,
    };
    let text = serde_json::to_string_pretty(&ckpt).expect("plain struct");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read back a checkpoint written by [`write_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, ModelParameters)>> {
    let bad = |message: String| Error::Input {
        path: path.to_path_buf(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(bad(format!("unexpected format `{}`", ckpt.format)));
    }
    let mut out: Vec<(String, Vec<DenseLayer>)> = Vec::new();
    let mut pending: Option<Array2<f64>> = None;
    for e in ckpt.entries {
        match e.tensor.as_str() {
            "weights" => {
                let [rows, cols] = e.shape[..] else {
                    return Err(bad(format!(
                        "{} layer {}: weights need a 2-d shape",
                        e.model, e.layer
                    )));
                };
                pending = Some(
                    Array2::from_shape_vec((rows, cols), e.values)
                        .map_err(|err| bad(format!("{} layer {}: {err}", e.model, e.layer)))?,
                );
            }
            "biases" => {
                let weights = pending.take().ok_or_else(|| {
                    bad(format!(
                        "{} layer {}: biases before weights",
                        e.model, e.layer
                    ))
                })?;
                let layer = DenseLayer {
                    weights,
                    biases: Array1::from(e.values),
                    dropout: e.dropout,
                };
                match out.last_mut() {
                    Some((name, layers)) if *name == e.model => layers.push(layer),
                    _ => out.push((e.model, vec![layer])),
                }
            }
            other => return Err(bad(format!("unknown tensor kind `{other}`"))),
        }
    }
    out.into_iter()
        .map(|(name, layers)| ModelParameters::new(layers).map(|p| (name, p)))
        .collect()
}
