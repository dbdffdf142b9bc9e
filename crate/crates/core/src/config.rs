//! Sectioned `key = value` run configuration.
//!
//! ```text
//! [train]
//! rounds = 10
//! lr = 0.001
//! ```
//!
//! Lists are comma separated. `#` starts a comment. Unknown sections or keys
//! are rejected, and [`RunConfig::echo`] prints every key so that the echo
//! can be parsed back into an identical configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{Schema, DEFAULT_SEEDS};
use crate::error::{Error, Result};
use crate::experiment::{ExperimentPlan, Method};
use crate::federation::TrainConfig;
use crate::graph::StaticWeights;
use crate::head::HeadConfig;
use crate::losses::Reduction;
use crate::model::Fusion;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Schema,
    /// Empty means `data/<dataset>.csv`.
    pub data_path: String,
    /// 0 selects the dataset's default silo count.
    pub n_silos: usize,
    pub dirichlet_alpha: f64,
    pub synth_rows: usize,
    pub train: TrainConfig,
    pub head: HeadConfig,
    pub methods: Vec<Method>,
    pub scarcity: Vec<f64>,
    pub folds: usize,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub out: String,
    /// Empty disables message dumps.
    pub dump_messages: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: Schema::Pima,
            data_path: String::new(),
            n_silos: 0,
            dirichlet_alpha: 0.5,
            synth_rows: 3525,
            train: TrainConfig::default(),
            head: HeadConfig::default(),
            methods: vec![Method::FedTgnn],
            scarcity: vec![0.8],
            folds: 5,
            seeds: DEFAULT_SEEDS.to_vec(),
            jobs: 1,
            out: "results".into(),
            dump_messages: String::new(),
        }
    }
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: Display,
{
    raw.parse().map_err(|e| Error::Config(format!("{key}: cannot parse {raw:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {raw:?}"))),
    }
}

type Getter = fn(&RunConfig) -> String;
type Setter = fn(&mut RunConfig, &str) -> Result<()>;

macro_rules! keys {
    ($( $section:literal $key:literal : |$c:ident| $get:expr, |$s:ident, $raw:ident| $set:expr; )*) => {
        const KEYS: &[(&str, &str, Getter, Setter)] = &[$((
            $section,
            $key,
            |$c: &RunConfig| -> String { $get },
            |$s: &mut RunConfig, $raw: &str| -> Result<()> {
                $set;
                Ok(())
            },
        )),*];
    };
}

keys! {
    "data" "dataset": |c| c.dataset.name().into(), |s, v| s.dataset = v.parse()?;
    "data" "path": |c| c.data_path.clone(), |s, v| s.data_path = v.into();
    "data" "n_silos": |c| c.n_silos.to_string(), |s, v| s.n_silos = parse("n_silos", v)?;
    "data" "dirichlet_alpha": |c| c.dirichlet_alpha.to_string(), |s, v| s.dirichlet_alpha = parse("dirichlet_alpha", v)?;
    "data" "synth_rows": |c| c.synth_rows.to_string(), |s, v| s.synth_rows = parse("synth_rows", v)?;

    "graph" "k": |c| c.train.k.to_string(), |s, v| s.train.k = parse("k", v)?;
    "graph" "k_agr": |c| c.train.k_agr.to_string(), |s, v| s.train.k_agr = parse("k_agr", v)?;
    "graph" "agr_period": |c| c.train.agr_period.to_string(), |s, v| s.train.agr_period = parse("agr_period", v)?;
    "graph" "agr": |c| c.train.agr.to_string(), |s, v| s.train.agr = parse_bool("agr", v)?;
    "graph" "use_graph": |c| c.train.use_graph.to_string(), |s, v| s.train.use_graph = parse_bool("use_graph", v)?;
    "graph" "static_weights": |c| match c.train.static_weights {
        StaticWeights::Gaussian => "gaussian".into(),
        StaticWeights::Unit => "unit".into(),
    }, |s, v| s.train.static_weights = match v {
        "gaussian" => StaticWeights::Gaussian,
        "unit" => StaticWeights::Unit,
        _ => return Err(Error::Config(format!("static_weights: expected gaussian or unit, got {v:?}"))),
    };

    "model" "hidden": |c| c.train.model.hidden.to_string(), |s, v| s.train.model.hidden = parse("hidden", v)?;
    "model" "attn_hidden": |c| c.train.model.attn_hidden.to_string(), |s, v| s.train.model.attn_hidden = parse("attn_hidden", v)?;
    "model" "dropout": |c| c.train.model.dropout.to_string(), |s, v| s.train.model.dropout = parse("dropout", v)?;
    "model" "bn_momentum": |c| c.train.model.bn_momentum.to_string(), |s, v| s.train.model.bn_momentum = parse("bn_momentum", v)?;
    "model" "bn_eps": |c| c.train.model.bn_eps.to_string(), |s, v| s.train.model.bn_eps = parse("bn_eps", v)?;
    "model" "fusion": |c| match c.train.model.fusion {
        Fusion::Learned => "learned".into(),
        Fusion::Fixed(a) => a.to_string(),
    }, |s, v| s.train.model.fusion = if v == "learned" { Fusion::Learned } else { Fusion::Fixed(parse("fusion", v)?) };
    "model" "edge_attention": |c| c.train.model.edge_attention.to_string(), |s, v| s.train.model.edge_attention = parse_bool("edge_attention", v)?;

    "train" "rounds": |c| c.train.rounds.to_string(), |s, v| s.train.rounds = parse("rounds", v)?;
    "train" "local_epochs": |c| c.train.local_epochs.to_string(), |s, v| s.train.local_epochs = parse("local_epochs", v)?;
    "train" "lr": |c| c.train.lr.to_string(), |s, v| s.train.lr = parse("lr", v)?;
    "train" "reset_optimizer_each_round": |c| c.train.reset_optimizer_each_round.to_string(),
        |s, v| s.train.reset_optimizer_each_round = parse_bool("reset_optimizer_each_round", v)?;

    "loss" "eta": |c| c.train.weights.eta.to_string(), |s, v| s.train.weights.eta = parse("eta", v)?;
    "loss" "mu": |c| c.train.weights.mu.to_string(), |s, v| s.train.weights.mu = parse("mu", v)?;
    "loss" "beta": |c| c.train.weights.beta.to_string(), |s, v| s.train.weights.beta = parse("beta", v)?;
    "loss" "gamma_aug": |c| c.train.weights.gamma_aug.to_string(), |s, v| s.train.weights.gamma_aug = parse("gamma_aug", v)?;
    "loss" "mu_prox": |c| c.train.weights.mu_prox.to_string(), |s, v| s.train.weights.mu_prox = parse("mu_prox", v)?;
    "loss" "focal_alpha": |c| c.train.weights.focal_alpha.to_string(), |s, v| s.train.weights.focal_alpha = parse("focal_alpha", v)?;
    "loss" "focal_gamma": |c| c.train.weights.focal_gamma.to_string(), |s, v| s.train.weights.focal_gamma = parse("focal_gamma", v)?;
    "loss" "contrast_tau": |c| c.train.weights.contrast_tau.to_string(), |s, v| s.train.weights.contrast_tau = parse("contrast_tau", v)?;
    "loss" "pl_reduction": |c| match c.train.weights.pl_reduction {
        Reduction::Sum => "sum".into(),
        Reduction::Mean => "mean".into(),
    }, |s, v| s.train.weights.pl_reduction = match v {
        "sum" => Reduction::Sum,
        "mean" => Reduction::Mean,
        _ => return Err(Error::Config(format!("pl_reduction: expected sum or mean, got {v:?}"))),
    };

    "ssl" "tau0": |c| c.train.schedule.tau0.to_string(), |s, v| s.train.schedule.tau0 = parse("tau0", v)?;
    "ssl" "lambda": |c| c.train.schedule.lambda.to_string(), |s, v| s.train.schedule.lambda = parse("lambda", v)?;
    "ssl" "tau_min": |c| c.train.schedule.tau_min.to_string(), |s, v| s.train.schedule.tau_min = parse("tau_min", v)?;
    "ssl" "prototype_gate": |c| c.train.gates.prototype.to_string(), |s, v| s.train.gates.prototype = parse_bool("prototype_gate", v)?;
    "ssl" "neighborhood_gate": |c| c.train.gates.neighborhood.to_string(), |s, v| s.train.gates.neighborhood = parse_bool("neighborhood_gate", v)?;
    "ssl" "share_prototypes": |c| c.train.share_prototypes.to_string(), |s, v| s.train.share_prototypes = parse_bool("share_prototypes", v)?;
    "ssl" "prototype_blend": |c| c.train.prototype_blend.to_string(), |s, v| s.train.prototype_blend = parse("prototype_blend", v)?;
    "ssl" "noise_sigma": |c| c.train.weights.noise_sigma.to_string(), |s, v| s.train.weights.noise_sigma = parse("noise_sigma", v)?;

    "head" "c": |c| c.head.c.to_string(), |s, v| s.head.c = parse("c", v)?;
    "head" "tolerance": |c| c.head.tolerance.to_string(), |s, v| s.head.tolerance = parse("tolerance", v)?;
    "head" "max_iter": |c| c.head.max_iter.to_string(), |s, v| s.head.max_iter = parse("max_iter", v)?;

    "experiment" "methods": |c| list(&c.methods), |s, v| s.methods = parse_list("methods", v)?;
    "experiment" "scarcity": |c| list(&c.scarcity), |s, v| s.scarcity = parse_list("scarcity", v)?;
    "experiment" "folds": |c| c.folds.to_string(), |s, v| s.folds = parse("folds", v)?;
    "experiment" "seeds": |c| list(&c.seeds), |s, v| s.seeds = parse_list("seeds", v)?;
    "experiment" "jobs": |c| c.jobs.to_string(), |s, v| s.jobs = parse("jobs", v)?;
    "experiment" "out": |c| c.out.clone(), |s, v| s.out = v.into();
    "experiment" "dump_messages": |c| c.dump_messages.clone(), |s, v| s.dump_messages = v.into();
}

impl RunConfig {
    /// Sets `section.key` from its text form.
    pub fn set(&mut self, dotted: &str, value: &str) -> Result<()> {
        let (section, key) = dotted
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("expected section.key, got {dotted:?}")))?;
        let (.., setter) = KEYS
            .iter()
            .find(|(s, k, ..)| *s == section && *k == key)
            .ok_or_else(|| Error::Config(format!("unknown key {section}.{key}")))?;
        setter(self, value.trim())
    }

    /// Applies `text` on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        let mut section: Option<String> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !KEYS.iter().any(|(s, ..)| *s == name) {
                    return Err(Error::Config(format!("line {}: unknown section [{name}]", no + 1)));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            let sec = section
                .as_deref()
                .ok_or_else(|| Error::Config(format!("line {}: key outside any section", no + 1)))?;
            self.set(&format!("{sec}.{}", key.trim()), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    /// Every key with its current value, parseable by [`RunConfig::parse`].
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key, getter, _) in KEYS {
            if *section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            let value = getter(self);
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn effective_silos(&self) -> usize {
        match (self.n_silos, self.dataset) {
            (0, Schema::SyntheticGdm) => 3,
            (0, _) => 2,
            (n, _) => n,
        }
    }

    pub fn effective_data_path(&self) -> PathBuf {
        if self.data_path.is_empty() {
            PathBuf::from(format!("data/{}.csv", self.dataset.name()))
        } else {
            PathBuf::from(&self.data_path)
        }
    }

    pub fn dataset_name(&self) -> &'static str {
        self.dataset.name()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.methods.is_empty() || self.scarcity.is_empty() {
            return Err(Error::Config("methods and scarcity must not be empty".into()));
        }
        if let Some(r) = self.scarcity.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::Config(format!("scarcity {r} outside [0, 1)")));
        }
        if !(self.dirichlet_alpha > 0.0) {
            return Err(Error::Config("dirichlet_alpha must be positive".into()));
        }
        if !(self.head.c > 0.0) {
            return Err(Error::Config("head c must be positive".into()));
        }
        Ok(())
    }

    pub fn plan(&self) -> Result<ExperimentPlan> {
        self.validate()?;
        Ok(ExperimentPlan {
            dataset: self.dataset_name().into(),
            scarcity: self.scarcity.clone(),
            methods: self.methods.clone(),
            folds: self.folds,
            seeds: self.seeds.clone(),
            n_silos: self.effective_silos(),
            dirichlet_alpha: self.dirichlet_alpha,
            train: self.train.clone(),
            head: self.head,
            jobs: self.jobs,
            dump_messages: (!self.dump_messages.is_empty()).then(|| PathBuf::from(&self.dump_messages)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.echo()).unwrap(), cfg);
        let echo = cfg.echo();
        for (s, k, ..) in KEYS {
            assert!(echo.contains(&format!("{k} = ")), "{s}.{k} missing from echo");
        }
    }

    #[test]
    fn echo_round_trips_changes() {
        let mut cfg = RunConfig::default();
        cfg.set("train.lr", "0.0037").unwrap();
        cfg.set("model.fusion", "0.25").unwrap();
        cfg.set("experiment.methods", "fedtgnn,no_pgpl,local_gcn").unwrap();
        cfg.set("experiment.scarcity", "0.1,0.8").unwrap();
        cfg.set("graph.static_weights", "unit").unwrap();
        cfg.set("loss.pl_reduction", "mean").unwrap();
        let back = RunConfig::parse(&cfg.echo()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.train.model.fusion, Fusion::Fixed(0.25));
        assert_eq!(back.methods.len(), 3);
    }

    #[test]
    fn unknown_keys_and_sections_rejected() {
        assert!(RunConfig::parse("[train]\nrounds = 3\nlearning_rate = 1\n").is_err());
        assert!(RunConfig::parse("[nope]\n").is_err());
        assert!(RunConfig::parse("rounds = 3\n").is_err());
        assert!(RunConfig::parse("[train]\nrounds\n").is_err());
        assert!(RunConfig::parse("[train]\nrounds = many\n").is_err());
        let mut c = RunConfig::default();
        assert!(c.set("train.nope", "1").is_err());
        assert!(c.set("rounds", "1").is_err());
    }

    #[test]
    fn comments_and_overrides() {
        let mut c = RunConfig::parse("# top\n[train]\nrounds = 4 # fewer\n[data]\ndataset = synthetic_gdm\n").unwrap();
        assert_eq!(c.train.rounds, 4);
        assert_eq!(c.effective_silos(), 3);
        c.set("train.rounds", "7").unwrap();
        assert_eq!(c.train.rounds, 7);
    }
}
