//! Simulation configuration: a TOML file with `[run]`, `[model]`, `[data]`
//! and `[strategy]` sections. Only `run.clients`, `run.rounds`,
//! `strategy.kind` and `data.source` are mandatory.

use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::data::fold_budget;
use crate::nn::{Architecture, KlDirection};
use crate::protocols::{default_boundary, StrategyKind, StrategySpec};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: vec![32, 16],
            dropout: 0.2,
        }
    }
}

impl ModelSpec {
    pub fn architecture(&self, input_dim: usize) -> Architecture {
        Architecture::new(input_dim, self.hidden.clone(), self.dropout)
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub dim: usize,
    pub separation: f64,
    pub holdout_n: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 2920,
            dim: 4,
            separation: 2.0,
            holdout_n: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Csv {
        path: PathBuf,
        /// Evaluation set for final metrics; the training file when absent.
        holdout_path: Option<PathBuf>,
    },
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub clients: usize,
    pub rounds: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads for per-client work. Results do not depend on it.
    pub threads: usize,
    /// Also write per-epoch training traces.
    pub verbose: bool,
    /// Snapshot all models every this many rounds; 0 disables.
    pub checkpoint_every: usize,
    pub model: ModelSpec,
    pub data: DataSource,
    pub normalize: bool,
    pub strategy: StrategySpec,
}

impl SimulationConfig {
    /// Config with every optional field at its default.
    pub fn new(clients: usize, rounds: usize, kind: StrategyKind, data: DataSource) -> Self {
        Self {
            clients,
            rounds,
            seed: 0,
            output_dir: PathBuf::from("out"),
            threads: 1,
            verbose: false,
            checkpoint_every: 0,
            model: ModelSpec::default(),
            data,
            normalize: true,
            strategy: StrategySpec::new(kind),
        }
    }

    pub fn shallow_boundary(&self) -> usize {
        self.strategy
            .shallow_boundary
            .unwrap_or_else(|| default_boundary(self.model.num_layers()))
    }

    /// Check every constraint and report all violations together.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.clients < 2 {
            errs.push(format!("run.clients must be >= 2, got {}", self.clients));
        }
        if self.rounds < 1 {
            errs.push(format!("run.rounds must be >= 1, got {}", self.rounds));
        }
        if self.threads < 1 {
            errs.push("run.threads must be >= 1".to_string());
        }
        if self.model.hidden.contains(&0) {
            errs.push("model.hidden sizes must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            errs.push(format!(
                "model.dropout must lie in [0, 1), got {}",
                self.model.dropout
            ));
        }
        if let Err(mut e) = self.strategy.validate() {
            errs.append(&mut e);
        }
        let layers = self.model.num_layers();
        if self.strategy.kind == StrategyKind::AsyncWeights {
            if layers < 2 {
                errs.push(
                    "async_weights needs at least one hidden layer to split shallow from deep"
                        .to_string(),
                );
            } else {
                let b = self.shallow_boundary();
                if b < 1 || b >= layers {
                    errs.push(format!(
                        "strategy.shallow_boundary must lie in [1, {layers}), got {b}"
                    ));
                }
            }
        }
        if let DataSource::Synthetic(s) = &self.data {
            if s.n == 0 || s.n % 2 != 0 {
                errs.push(format!("data.n must be even and positive, got {}", s.n));
            }
            if s.dim < 2 {
                errs.push(format!("data.dim must be >= 2, got {}", s.dim));
            }
            if !(s.separation.is_finite() && s.separation >= 0.0) {
                errs.push(format!(
                    "data.separation must be >= 0, got {}",
                    s.separation
                ));
            }
            if s.holdout_n == 0 || s.holdout_n % 2 != 0 {
                errs.push(format!(
                    "data.holdout_n must be even and positive, got {}",
                    s.holdout_n
                ));
            }
            if self.clients >= 1 && self.rounds >= 1 {
                let folds = fold_budget(self.clients, self.rounds);
                if s.n / 2 < folds {
                    errs.push(format!(
                        "data.n = {} is too small for {folds} stratified folds (need at least {})",
                        s.n,
                        2 * folds
                    ));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }

    /// Parse and validate. Relative CSV and output paths are resolved against
    /// `base_dir`. Parse errors and constraint violations are reported together.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut root: Table =
            toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let mut p = Parser { errors: Vec::new() };

        let mut run = p.section(&mut root, "run");
        let clients = p.required_usize(&mut run, "run", "clients");
        let rounds = p.required_usize(&mut run, "run", "rounds");
        let seed = p.u64(&mut run, "run", "seed", 0);
        let output_dir = base_dir.join(p.string(&mut run, "run", "output_dir", "out"));
        let threads = p.usize(&mut run, "run", "threads", 1);
        let verbose = p.bool(&mut run, "run", "verbose", false);
        let checkpoint_every = p.usize(&mut run, "run", "checkpoint_every", 0);
        p.unknown(run, "run");

        let mut model_t = p.section(&mut root, "model");
        let defaults = ModelSpec::default();
        let hidden = p.usize_list(&mut model_t, "model", "hidden", defaults.hidden);
        let dropout = p.f64(&mut model_t, "model", "dropout", defaults.dropout);
        p.unknown(model_t, "model");

        let mut data_t = p.section(&mut root, "data");
        let source = p.required_string(&mut data_t, "data", "source");
        let normalize = p.bool(&mut data_t, "data", "normalize", true);
        let syn = SyntheticSpec::default();
        let data = match source.as_deref() {
            Some("csv") => {
                let path = p.required_string(&mut data_t, "data", "path");
                let holdout = p.optional_string(&mut data_t, "data", "holdout_path");
                path.map(|path| DataSource::Csv {
                    path: base_dir.join(path),
                    holdout_path: holdout.map(|h| base_dir.join(h)),
                })
            }
            Some("synthetic") => Some(DataSource::Synthetic(SyntheticSpec {
                n: p.usize(&mut data_t, "data", "n", syn.n),
                dim: p.usize(&mut data_t, "data", "dim", syn.dim),
                separation: p.f64(&mut data_t, "data", "separation", syn.separation),
                holdout_n: p.usize(&mut data_t, "data", "holdout_n", syn.holdout_n),
            })),
            Some(other) => {
                p.errors.push(format!(
                    "data.source must be `csv` or `synthetic`, got `{other}`"
                ));
                None
            }
            None => None,
        };
        if data.is_some() {
            p.unknown(data_t, "data");
        }

        let mut st = p.section(&mut root, "strategy");
        let kind = p
            .required_string(&mut st, "strategy", "kind")
            .and_then(|k| match k.parse::<StrategyKind>() {
                Ok(kind) => Some(kind),
                Err(e) => {
                    p.errors.push(format!("strategy.kind: {e}"));
                    None
                }
            });
        let d = StrategySpec::new(kind.unwrap_or(StrategyKind::Vanilla));
        let delta = p.usize(&mut st, "strategy", "delta", d.delta);
        let warmup = p.usize(&mut st, "strategy", "warmup", d.warmup);
        let local_epochs = p.usize(&mut st, "strategy", "local_epochs", d.local_epochs);
        let mutual_epochs = p.usize(&mut st, "strategy", "mutual_epochs", d.mutual_epochs);
        let lr = p.f64(&mut st, "strategy", "lr", d.lr);
        let batch_size = p.usize(&mut st, "strategy", "batch_size", d.batch_size);
        let kl_direction = match p
            .string(&mut st, "strategy", "kl_direction", "forward")
            .as_str()
        {
            "forward" => KlDirection::Forward,
            "reverse" => KlDirection::Reverse,
            other => {
                p.errors.push(format!(
                    "strategy.kl_direction must be `forward` or `reverse`, got `{other}`"
                ));
                KlDirection::Forward
            }
        };
        let kl_coefficient = p.f64(&mut st, "strategy", "kl_coefficient", d.kl_coefficient);
        let shallow_boundary = p.optional_usize(&mut st, "strategy", "shallow_boundary");
        let epsilon = p.f64(&mut st, "strategy", "epsilon", d.epsilon);
        let client_init = p
            .optional_string(&mut st, "strategy", "client_init")
            .and_then(|s| {
                s.parse()
                    .map_err(|e| p.errors.push(format!("strategy.client_init: {e}")))
                    .ok()
            });
        p.unknown(st, "strategy");

        for key in root.keys() {
            p.errors.push(format!("unknown section `{key}`"));
        }

        // Missing or unparsable fields get placeholders so the remaining
        // constraints can still be checked in the same pass.
        let complete = clients.is_some() && rounds.is_some() && kind.is_some() && data.is_some();
        let config = SimulationConfig {
            clients: clients.unwrap_or(2),
            rounds: rounds.unwrap_or(1),
            seed,
            output_dir,
            threads,
            verbose,
            checkpoint_every,
            model: ModelSpec { hidden, dropout },
            data: data.unwrap_or(DataSource::Csv {
                path: PathBuf::new(),
                holdout_path: None,
            }),
            normalize,
            strategy: StrategySpec {
                kind: kind.unwrap_or(StrategyKind::Vanilla),
                delta,
                warmup,
                local_epochs,
                mutual_epochs,
                lr,
                batch_size,
                kl_direction,
                kl_coefficient,
                shallow_boundary,
                epsilon,
                client_init,
            },
        };
        let mut errors = p.errors;
        if let Err(Error::Config(mut more)) = config.validate() {
            errors.append(&mut more);
        }
        if errors.is_empty() && complete {
            Ok(config)
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Echo of the configuration with every default filled in.
    pub fn to_resolved_toml(&self) -> String {
        let mut run = Table::new();
        run.insert("clients".into(), int(self.clients));
        run.insert("rounds".into(), int(self.rounds));
        // toml integers are i64; seeds above i64::MAX are written as strings
        run.insert(
            "seed".into(),
            i64::try_from(self.seed)
                .map_or_else(|_| Value::String(self.seed.to_string()), Value::Integer),
        );
        run.insert(
            "output_dir".into(),
            Value::String(self.output_dir.display().to_string()),
        );
        run.insert("threads".into(), int(self.threads));
        run.insert("verbose".into(), Value::Boolean(self.verbose));
        run.insert("checkpoint_every".into(), int(self.checkpoint_every));

        let mut model = Table::new();
        model.insert(
            "hidden".into(),
            Value::Array(self.model.hidden.iter().map(|&h| int(h)).collect()),
        );
        model.insert("dropout".into(), Value::Float(self.model.dropout));

        let mut data = Table::new();
        match &self.data {
            DataSource::Csv { path, holdout_path } => {
                data.insert("source".into(), Value::String("csv".into()));
                data.insert("path".into(), Value::String(path.display().to_string()));
                if let Some(h) = holdout_path {
                    data.insert(
                        "holdout_path".into(),
                        Value::String(h.display().to_string()),
                    );
                }
            }
            DataSource::Synthetic(s) => {
                data.insert("source".into(), Value::String("synthetic".into()));
                data.insert("n".into(), int(s.n));
                data.insert("dim".into(), int(s.dim));
                data.insert("separation".into(), Value::Float(s.separation));
                data.insert("holdout_n".into(), int(s.holdout_n));
            }
        }
        data.insert("normalize".into(), Value::Boolean(self.normalize));

        let s = &self.strategy;
        let mut strategy = Table::new();
        strategy.insert("kind".into(), Value::String(s.kind.name().into()));
        strategy.insert("delta".into(), int(s.delta));
        strategy.insert("warmup".into(), int(s.warmup));
        strategy.insert("local_epochs".into(), int(s.local_epochs));
        strategy.insert("mutual_epochs".into(), int(s.mutual_epochs));
        strategy.insert("lr".into(), Value::Float(s.lr));
        strategy.insert("batch_size".into(), int(s.batch_size));
        strategy.insert(
            "kl_direction".into(),
            Value::String(
                match s.kl_direction {
                    KlDirection::Forward => "forward",
                    KlDirection::Reverse => "reverse",
                }
                .into(),
            ),
        );
        strategy.insert("kl_coefficient".into(), Value::Float(s.kl_coefficient));
        if self.model.num_layers() >= 2 {
            strategy.insert("shallow_boundary".into(), int(self.shallow_boundary()));
        }
        strategy.insert("epsilon".into(), Value::Float(s.epsilon));
        strategy.insert(
            "client_init".into(),
            Value::String(s.client_init().name().into()),
        );

        let mut root = Table::new();
        root.insert("run".into(), Value::Table(run));
        root.insert("model".into(), Value::Table(model));
        root.insert("data".into(), Value::Table(data));
        root.insert("strategy".into(), Value::Table(strategy));
        toml::to_string(&root).expect("plain table serialises")
    }
}

fn int(v: usize) -> Value {
    Value::Integer(v as i64)
}

/// Pulls typed values out of TOML tables, collecting every problem.
struct Parser {
    errors: Vec<String>,
}

impl Parser {
    fn section(&mut self, root: &mut Table, name: &str) -> Table {
        match root.remove(name) {
            Some(Value::Table(t)) => t,
            Some(_) => {
                self.errors.push(format!("`{name}` must be a table"));
                Table::new()
            }
            None => Table::new(),
        }
    }

    fn unknown(&mut self, rest: Table, section: &str) {
        for key in rest.keys() {
            self.errors.push(format!("unknown key `{section}.{key}`"));
        }
    }

    fn raw_usize(&mut self, t: &mut Table, section: &str, key: &str) -> Option<Option<usize>> {
        match t.remove(key) {
            None => Some(None),
            Some(Value::Integer(v)) if v >= 0 => Some(Some(v as usize)),
            Some(v) => {
                self.errors.push(format!(
                    "{section}.{key} must be a non-negative integer, got {v}"
                ));
                None
            }
        }
    }

    fn required_usize(&mut self, t: &mut Table, section: &str, key: &str) -> Option<usize> {
        match self.raw_usize(t, section, key) {
            Some(Some(v)) => Some(v),
            Some(None) => {
                self.errors
                    .push(format!("missing required key {section}.{key}"));
                None
            }
            None => None,
        }
    }

    fn optional_usize(&mut self, t: &mut Table, section: &str, key: &str) -> Option<usize> {
        self.raw_usize(t, section, key).flatten()
    }

    fn usize(&mut self, t: &mut Table, section: &str, key: &str, default: usize) -> usize {
        self.raw_usize(t, section, key).flatten().unwrap_or(default)
    }

    fn u64(&mut self, t: &mut Table, section: &str, key: &str, default: u64) -> u64 {
        match t.remove(key) {
            None => default,
            Some(Value::Integer(v)) if v >= 0 => v as u64,
            Some(Value::String(s)) if s.parse::<u64>().is_ok() => s.parse().expect("checked"),
            Some(v) => {
                self.errors.push(format!(
                    "{section}.{key} must be a non-negative integer, got {v}"
                ));
                default
            }
        }
    }

    fn f64(&mut self, t: &mut Table, section: &str, key: &str, default: f64) -> f64 {
        match t.remove(key) {
            None => default,
            Some(Value::Float(v)) => v,
            Some(Value::Integer(v)) => v as f64,
            Some(v) => {
                self.errors
                    .push(format!("{section}.{key} must be a number, got {v}"));
                default
            }
        }
    }

    fn bool(&mut self, t: &mut Table, section: &str, key: &str, default: bool) -> bool {
        match t.remove(key) {
            None => default,
            Some(Value::Boolean(b)) => b,
            Some(v) => {
                self.errors
                    .push(format!("{section}.{key} must be true or false, got {v}"));
                default
            }
        }
    }

    fn optional_string(&mut self, t: &mut Table, section: &str, key: &str) -> Option<String> {
        match t.remove(key) {
            None => None,
            Some(Value::String(s)) => Some(s),
            Some(v) => {
                self.errors
                    .push(format!("{section}.{key} must be a string, got {v}"));
                None
            }
        }
    }

    fn required_string(&mut self, t: &mut Table, section: &str, key: &str) -> Option<String> {
        let present = t.contains_key(key);
        let v = self.optional_string(t, section, key);
        if !present {
            self.errors
                .push(format!("missing required key {section}.{key}"));
        }
        v
    }

    fn string(&mut self, t: &mut Table, section: &str, key: &str, default: &str) -> String {
        self.optional_string(t, section, key)
            .unwrap_or_else(|| default.to_string())
    }

    fn usize_list(
        &mut self,
        t: &mut Table,
        section: &str,
        key: &str,
        default: Vec<usize>,
    ) -> Vec<usize> {
        match t.remove(key) {
            None => default,
            Some(Value::Array(items)) => {
                let parsed: Option<Vec<usize>> = items
                    .iter()
                    .map(|v| v.as_integer().filter(|&i| i >= 0).map(|i| i as usize))
                    .collect();
                parsed.unwrap_or_else(|| {
                    self.errors.push(format!(
                        "{section}.{key} must be a list of non-negative integers"
                    ));
                    default
                })
            }
            Some(v) => {
                self.errors
                    .push(format!("{section}.{key} must be a list, got {v}"));
                default
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::ClientInit;

    fn parse(text: &str) -> Result<SimulationConfig> {
        SimulationConfig::from_toml_str(text, Path::new("/cfg"))
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse(
            "[run]\nclients = 5\nrounds = 12\n[data]\nsource = \"synthetic\"\n[strategy]\nkind = \"async_weights\"\n",
        )
        .unwrap();
        assert_eq!(c.strategy.delta, 3);
        assert_eq!(c.strategy.warmup, 5);
        assert_eq!(c.strategy.local_epochs, 5);
        assert_eq!(c.strategy.mutual_epochs, 5);
        assert_eq!(c.strategy.lr, 0.05);
        assert_eq!(c.strategy.batch_size, 32);
        assert_eq!(c.strategy.epsilon, 1e-7);
        assert_eq!(c.model.hidden, vec![32, 16]);
        assert_eq!(c.shallow_boundary(), 2);
    }

    #[test]
    fn csv_paths_resolve_against_config_dir() {
        let c = parse(
            "[run]\nclients = 2\nrounds = 1\n[data]\nsource = \"csv\"\npath = \"train.csv\"\n[strategy]\nkind = \"dml\"\n",
        )
        .unwrap();
        assert_eq!(
            c.data,
            DataSource::Csv {
                path: PathBuf::from("/cfg/train.csv"),
                holdout_path: None
            }
        );
    }

    #[test]
    fn reports_every_problem_at_once() {
        let err = parse(
            "[run]\nrounds = 0\nbogus = 1\n[model]\ndropout = \"high\"\n[data]\nsource = \"synthetic\"\n[strategy]\nkind = \"fedprox\"\nlr = -1\n",
        )
        .unwrap_err();
        let Error::Config(errs) = err else {
            panic!("{err}")
        };
        let joined = errs.join("\n");
        for needle in ["run.clients", "run.bogus", "model.dropout", "strategy.kind"] {
            assert!(joined.contains(needle), "{needle} missing from:\n{joined}");
        }
    }

    #[test]
    fn range_violations_are_collected() {
        let err = parse(
            "[run]\nclients = 1\nrounds = 0\n[data]\nsource = \"synthetic\"\nn = 7\n[strategy]\nkind = \"vanilla\"\nlr = 0.0\ndelta = 0\n",
        )
        .unwrap_err();
        let Error::Config(errs) = err else {
            panic!("{err}")
        };
        assert!(errs.len() >= 5, "{errs:?}");
    }

    #[test]
    fn resolved_echo_parses_back_identically() {
        let c = parse(
            "[run]\nclients = 3\nrounds = 4\nseed = 99\n[data]\nsource = \"synthetic\"\nn = 400\n[strategy]\nkind = \"dml\"\nkl_direction = \"reverse\"\n",
        )
        .unwrap();
        let echoed =
            SimulationConfig::from_toml_str(&c.to_resolved_toml(), Path::new("/cfg")).unwrap();
        let mut expected = c.clone();
        expected.strategy.shallow_boundary = Some(c.shallow_boundary());
        expected.strategy.client_init = Some(c.strategy.client_init());
        assert_eq!(echoed, expected);
    }

    #[test]
    fn client_init_defaults_follow_strategy() {
        let text = |kind: &str, extra: &str| {
            format!("[run]\nclients = 2\nrounds = 1\n[data]\nsource = \"synthetic\"\nn = 400\n[strategy]\nkind = \"{kind}\"\n{extra}")
        };
        let dml = parse(&text("dml", "")).unwrap();
        assert_eq!(dml.strategy.client_init(), ClientInit::Independent);
        let shared = parse(&text("dml", "client_init = \"global\"\n")).unwrap();
        assert_eq!(shared.strategy.client_init(), ClientInit::Global);
        assert_eq!(
            parse(&text("async_weights", ""))
                .unwrap()
                .strategy
                .client_init(),
            ClientInit::Global
        );
        let Err(Error::Config(errs)) = parse(&text("dml", "client_init = \"random\"\n")) else {
            panic!("expected a config error")
        };
        assert!(errs[0].contains("strategy.client_init"), "{errs:?}");
    }

    #[test]
    fn output_dir_resolves_against_config_dir() {
        let c = parse("[run]\nclients = 2\nrounds = 1\noutput_dir = \"runs/a\"\n[data]\nsource = \"synthetic\"\nn = 400\n[strategy]\nkind = \"vanilla\"\n").unwrap();
        assert_eq!(c.output_dir, PathBuf::from("/cfg/runs/a"));
    }
}
