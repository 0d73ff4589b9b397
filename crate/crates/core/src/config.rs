//! Run configuration: a line-oriented `key = value` file with `#` comments
//! and dotted keys.
//!
//! ```text
//! # three blobs, hashed Siamese path
//! dataset.kind = blobs
//! model.variant = fast-T
//! optimizer.t.lr = 0.01
//! ```
//!
//! Keys not given keep their defaults. Unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::datasets::{gen_blobs, gen_moons, load_csv, make_episode, split, Dataset};
use crate::error::{Error, Result};
use crate::trilevel::{run_episode, LbeConfig, LossMode, PredictMode, SimInit, Variant, XiPolicy};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Blobs {
        n_classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
    },
    Moons {
        per_class: usize,
        noise: f64,
    },
    Csv {
        path: PathBuf,
    },
}

impl DatasetSpec {
    /// Generated datasets draw from `seed`.
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DatasetSpec::Blobs {
                n_classes,
                per_class,
                dim,
                spread,
            } => gen_blobs(*n_classes, *per_class, *dim, *spread, seed),
            DatasetSpec::Moons { per_class, noise } => gen_moons(*per_class, *noise, seed),
            DatasetSpec::Csv { path } => load_csv(path),
        }
    }
}

/// Few-shot protocol: `episodes` tasks for each of `seeds` consecutive seeds
/// starting at the run seed.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub episodes: usize,
    pub seeds: usize,
    pub epochs: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            n_way: 5,
            k_shot: 1,
            q_query: 5,
            episodes: 10,
            seeds: 10,
            epochs: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub val_fraction: f64,
    pub lbe: LbeConfig,
    pub episode: EpisodeSpec,
    /// Training examples shown in similarity snapshots.
    pub snapshot_size: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSpec::Blobs {
                n_classes: 3,
                per_class: 40,
                dim: 2,
                spread: 1.0,
            },
            val_fraction: 0.1,
            lbe: LbeConfig::default(),
            episode: EpisodeSpec::default(),
            snapshot_size: 20,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("invalid value {raw:?} for key {key}")))
}

fn flag(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value {raw:?} for key {key}: expected true or false"
        ))),
    }
}

fn choice<'a>(key: &str, raw: &str, allowed: &[&'a str]) -> Result<&'a str> {
    allowed.iter().copied().find(|a| *a == raw).ok_or_else(|| {
        Error::Config(format!(
            "invalid value {raw:?} for key {key}: expected one of {}",
            allowed.join(", ")
        ))
    })
}

/// Splits the file into key/value pairs, rejecting malformed lines and
/// repeated keys.
fn entries(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("duplicate key {k}")));
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = entries(text)?;
        let mut take = |k: &str| kv.remove(k);
        let mut c = RunConfig::default();

        let kind = match take("dataset.kind") {
            Some(raw) => choice("dataset.kind", &raw, &["blobs", "moons", "csv"])?,
            None => "blobs",
        };
        c.dataset = match kind {
            "blobs" => DatasetSpec::Blobs {
                n_classes: take("dataset.n_classes").map_or(Ok(3), |v| value("dataset.n_classes", &v))?,
                per_class: take("dataset.per_class").map_or(Ok(40), |v| value("dataset.per_class", &v))?,
                dim: take("dataset.dim").map_or(Ok(2), |v| value("dataset.dim", &v))?,
                spread: take("dataset.spread").map_or(Ok(1.0), |v| value("dataset.spread", &v))?,
            },
            "moons" => DatasetSpec::Moons {
                per_class: take("dataset.per_class").map_or(Ok(40), |v| value("dataset.per_class", &v))?,
                noise: take("dataset.noise").map_or(Ok(0.1), |v| value("dataset.noise", &v))?,
            },
            _ => DatasetSpec::Csv {
                path: take("dataset.path")
                    .map(PathBuf::from)
                    .ok_or_else(|| Error::Config("dataset.kind = csv needs dataset.path".into()))?,
            },
        };

        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = take($key) {
                    $field = value($key, &v)?;
                }
            };
        }
        macro_rules! set_flag {
            ($key:literal, $field:expr) => {
                if let Some(v) = take($key) {
                    $field = flag($key, &v)?;
                }
            };
        }

        set!("dataset.val_fraction", c.val_fraction);
        let l = &mut c.lbe;
        if let Some(v) = take("model.hidden") {
            l.hidden = if v.is_empty() {
                Vec::new()
            } else {
                v.split(',')
                    .map(|d| value("model.hidden", d.trim()))
                    .collect::<Result<_>>()?
            };
        }
        set!("model.embed_dim", l.embed_dim);
        set!("model.tau", l.tau);
        set!("model.gumbel_temp", l.gumbel_temp);
        set!("model.code_bits", l.code_bits);
        if let Some(v) = take("model.variant") {
            l.variant = Variant::parse(&v).map_err(|_| {
                Error::Config(format!(
                    "invalid value {v:?} for key model.variant: expected one of lbe, fast-T, fast-S, fast-TS"
                ))
            })?;
        }
        set_flag!("model.tie_weights", l.tie_weights);
        if let Some(v) = take("loss.mode") {
            l.loss_mode = match choice("loss.mode", &v, &["bce", "literal"])? {
                "bce" => LossMode::Bce,
                _ => LossMode::Literal,
            };
        }
        set_flag!("loss.allow_self_match", l.allow_self_match);
        let mode = take("predict.mode");
        let k = take("predict.k");
        l.predict_mode = match mode
            .as_deref()
            .map(|m| choice("predict.mode", m, &["soft", "topk"]))
            .transpose()?
        {
            None | Some("soft") => {
                if k.is_some() {
                    return Err(Error::Config("predict.k needs predict.mode = topk".into()));
                }
                PredictMode::Soft
            }
            _ => PredictMode::TopK(value(
                "predict.k",
                &k.ok_or_else(|| Error::Config("predict.mode = topk needs predict.k".into()))?,
            )?),
        };
        set_flag!("hash.straight_through", l.straight_through);
        set_flag!("hash.stochastic_eval", l.stochastic_eval);
        set!("train.epochs", l.epochs);
        set!("train.batch_size", l.batch_size);
        set!("train.patience", l.patience);
        set!("optimizer.t.lr", l.opt_t.lr);
        set!("optimizer.t.momentum", l.opt_t.momentum);
        set!("optimizer.t.weight_decay", l.opt_t.weight_decay);
        set!("optimizer.s.lr", l.opt_s.lr);
        set!("optimizer.s.momentum", l.opt_s.momentum);
        set!("optimizer.s.weight_decay", l.opt_s.weight_decay);
        set!("optimizer.a.lr", l.opt_a.lr);
        set!("optimizer.a.weight_decay", l.opt_a.weight_decay);
        let policy = take("xi.policy");
        let xt = take("xi.t");
        let xs = take("xi.s");
        l.xi = match policy
            .as_deref()
            .map(|p| choice("xi.policy", p, &["scheduled", "fixed"]))
            .transpose()?
        {
            Some("fixed") => {
                let need = |k: &str, v: Option<String>| {
                    v.ok_or_else(|| Error::Config(format!("xi.policy = fixed needs {k}")))
                        .and_then(|v| value::<f64>(k, &v))
                };
                XiPolicy::Fixed {
                    t: need("xi.t", xt)?,
                    s: need("xi.s", xs)?,
                }
            }
            _ => {
                if xt.is_some() || xs.is_some() {
                    return Err(Error::Config("xi.t and xi.s need xi.policy = fixed".into()));
                }
                XiPolicy::Scheduled
            }
        };
        if let Some(v) = take("sim.init") {
            l.sim_init = match choice("sim.init", &v, &["uniform", "labels"])? {
                "uniform" => SimInit::Uniform,
                _ => SimInit::Labels,
            };
        }
        set_flag!("sim.frozen", l.freeze_a);
        set!("seed", l.seed);
        set!("episode.n_way", c.episode.n_way);
        set!("episode.k_shot", c.episode.k_shot);
        set!("episode.q_query", c.episode.q_query);
        set!("episode.episodes", c.episode.episodes);
        set!("episode.seeds", c.episode.seeds);
        set!("episode.epochs", c.episode.epochs);
        set!("snapshot.size", c.snapshot_size);
        if let Some(v) = take("output.dir") {
            c.output_dir = PathBuf::from(v);
        }

        if let Some(k) = kv.keys().next() {
            return Err(Error::Config(format!("unknown key {k}")));
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.lbe.validate()?;
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "dataset.val_fraction must be in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if let DatasetSpec::Blobs { spread, .. } = self.dataset {
            if !(spread >= 0.0 && spread.is_finite()) {
                return Err(Error::Config(format!("dataset.spread must be >= 0, got {spread}")));
            }
        }
        if let DatasetSpec::Moons { noise, .. } = self.dataset {
            if !(noise >= 0.0 && noise.is_finite()) {
                return Err(Error::Config(format!("dataset.noise must be >= 0, got {noise}")));
            }
        }
        let e = &self.episode;
        if e.n_way == 0 || e.k_shot == 0 || e.q_query == 0 || e.episodes == 0 || e.seeds == 0 {
            return Err(Error::Config("episode sizes and counts must be positive".into()));
        }
        Ok(())
    }

    /// Every key, in a fixed order; `parse` of the result gives back `self`.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(o, "{k} = {v}");
        };
        match &self.dataset {
            DatasetSpec::Blobs {
                n_classes,
                per_class,
                dim,
                spread,
            } => {
                kv("dataset.kind", &"blobs");
                kv("dataset.n_classes", n_classes);
                kv("dataset.per_class", per_class);
                kv("dataset.dim", dim);
                kv("dataset.spread", spread);
            }
            DatasetSpec::Moons { per_class, noise } => {
                kv("dataset.kind", &"moons");
                kv("dataset.per_class", per_class);
                kv("dataset.noise", noise);
            }
            DatasetSpec::Csv { path } => {
                kv("dataset.kind", &"csv");
                kv("dataset.path", &path.display());
            }
        }
        kv("dataset.val_fraction", &self.val_fraction);
        let l = &self.lbe;
        let hidden: Vec<String> = l.hidden.iter().map(ToString::to_string).collect();
        kv("model.hidden", &hidden.join(","));
        kv("model.embed_dim", &l.embed_dim);
        kv("model.tau", &l.tau);
        kv("model.gumbel_temp", &l.gumbel_temp);
        kv("model.code_bits", &l.code_bits);
        kv("model.variant", &l.variant.name());
        kv("model.tie_weights", &l.tie_weights);
        kv(
            "loss.mode",
            &match l.loss_mode {
                LossMode::Bce => "bce",
                LossMode::Literal => "literal",
            },
        );
        kv("loss.allow_self_match", &l.allow_self_match);
        match l.predict_mode {
            PredictMode::Soft => kv("predict.mode", &"soft"),
            PredictMode::TopK(k) => {
                kv("predict.mode", &"topk");
                kv("predict.k", &k);
            }
        }
        kv("hash.straight_through", &l.straight_through);
        kv("hash.stochastic_eval", &l.stochastic_eval);
        kv("train.epochs", &l.epochs);
        kv("train.batch_size", &l.batch_size);
        kv("train.patience", &l.patience);
        kv("optimizer.t.lr", &l.opt_t.lr);
        kv("optimizer.t.momentum", &l.opt_t.momentum);
        kv("optimizer.t.weight_decay", &l.opt_t.weight_decay);
        kv("optimizer.s.lr", &l.opt_s.lr);
        kv("optimizer.s.momentum", &l.opt_s.momentum);
        kv("optimizer.s.weight_decay", &l.opt_s.weight_decay);
        kv("optimizer.a.lr", &l.opt_a.lr);
        kv("optimizer.a.weight_decay", &l.opt_a.weight_decay);
        match l.xi {
            XiPolicy::Scheduled => kv("xi.policy", &"scheduled"),
            XiPolicy::Fixed { t, s } => {
                kv("xi.policy", &"fixed");
                kv("xi.t", &t);
                kv("xi.s", &s);
            }
        }
        kv(
            "sim.init",
            &match l.sim_init {
                SimInit::Uniform => "uniform",
                SimInit::Labels => "labels",
            },
        );
        kv("sim.frozen", &l.freeze_a);
        kv("seed", &l.seed);
        let e = &self.episode;
        kv("episode.n_way", &e.n_way);
        kv("episode.k_shot", &e.k_shot);
        kv("episode.q_query", &e.q_query);
        kv("episode.episodes", &e.episodes);
        kv("episode.seeds", &e.seeds);
        kv("episode.epochs", &e.epochs);
        kv("snapshot.size", &self.snapshot_size);
        kv("output.dir", &self.output_dir.display());
        o
    }
}

/// Per-seed mean query accuracy of the few-shot protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub seeds: Vec<u64>,
    pub per_seed: Vec<f64>,
    /// Every episode's accuracy, seed-major.
    pub accuracies: Vec<f64>,
}

impl EpisodeSummary {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }

    /// Sample standard deviation of the per-seed means.
    pub fn std_over_seeds(&self) -> f64 {
        let n = self.per_seed.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.per_seed.iter().sum::<f64>() / n as f64;
        (self.per_seed.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

impl RunConfig {
    /// Generates or loads the dataset and splits it, both from the run seed.
    pub fn load_split(&self) -> Result<(Dataset, Dataset)> {
        let data = self.dataset.load(self.lbe.seed)?;
        split(&data, self.val_fraction, self.lbe.seed)
    }

    /// For each seed a fresh pool from the dataset spec, then `episodes`
    /// tasks drawn from it, each trained from scratch for `episode.epochs`.
    pub fn run_episodes(&self) -> Result<EpisodeSummary> {
        let e = &self.episode;
        let mut summary = EpisodeSummary {
            seeds: Vec::new(),
            per_seed: Vec::new(),
            accuracies: Vec::new(),
        };
        for seed in (0..e.seeds as u64).map(|k| self.lbe.seed + k) {
            let pool = self.dataset.load(seed)?;
            let lbe = LbeConfig {
                epochs: e.epochs,
                seed,
                ..self.lbe.clone()
            };
            let mut total = 0.0;
            for k in 0..e.episodes as u64 {
                let episode = make_episode(&pool, e.n_way, e.k_shot, e.q_query, (seed << 32) | k)?;
                let acc = run_episode(&lbe, &episode)?;
                summary.accuracies.push(acc);
                total += acc;
            }
            summary.seeds.push(seed);
            summary.per_seed.push(total / e.episodes as f64);
        }
        Ok(summary)
    }
}
