//! Run configuration: a line-based `key = value` text format.
//!
//! Every key has a default. Unknown keys, malformed values and out-of-range
//! values are rejected. [`RunConfig::to_text`] emits every key in a fixed
//! order, and parsing that text yields the same config.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backbone {
    /// Concatenated ID and media embeddings, no graphs.
    Vbpr,
    /// Bipartite propagation of concatenated embeddings.
    VLightGcn,
    /// Bipartite propagation of ID embeddings plus the semantic item graph.
    Lattice,
    /// Both graphs over concatenated embeddings.
    VLattice,
}

impl Backbone {
    pub const ALL: [Backbone; 4] = [
        Backbone::Vbpr,
        Backbone::VLightGcn,
        Backbone::Lattice,
        Backbone::VLattice,
    ];

    pub fn uses_media_embeddings(self) -> bool {
        !matches!(self, Backbone::Lattice)
    }

    pub fn uses_bipartite_graph(self) -> bool {
        !matches!(self, Backbone::Vbpr)
    }

    pub fn uses_item_graph(self) -> bool {
        matches!(self, Backbone::Lattice | Backbone::VLattice)
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::Vbpr => "vbpr",
            Backbone::VLightGcn => "vlightgcn",
            Backbone::Lattice => "lattice",
            Backbone::VLattice => "vlattice",
        })
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vbpr" => Ok(Backbone::Vbpr),
            "vlightgcn" => Ok(Backbone::VLightGcn),
            "lattice" => Ok(Backbone::Lattice),
            "vlattice" => Ok(Backbone::VLattice),
            other => Err(Error::Config(format!("unknown backbone `{other}`"))),
        }
    }
}

/// When the second-stage contrastive update runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage2Schedule {
    PerBatch,
    PerEpoch,
}

/// Whether semantic kNN graphs are rebuilt during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphRefresh {
    /// Built once from raw features.
    Frozen,
    /// Rebuilt from projected features after every epoch.
    PerEpoch,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text),+ })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"), other
                    ))),
                }
            }
        }
    };
}

keyword_enum!(Stage2Schedule { PerBatch => "per_batch", PerEpoch => "per_epoch" });
keyword_enum!(GraphRefresh { Frozen => "frozen", PerEpoch => "per_epoch" });

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub embedding_dim: usize,
    pub gcn_layers: usize,
    pub knn_topk: usize,
    pub alpha: f64,
    pub beta: f64,
    pub sigma_sq_fib: f64,
    pub sigma_sq_gib: f64,
    pub hsic_normalize_inputs: bool,
    pub tau: f64,
    pub lambda_reg: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mask_temperature: f64,
    pub backbone: Backbone,
    pub fib_enabled: bool,
    pub gib_enabled: bool,
    pub stage2_enabled: bool,
    pub stage2_schedule: Stage2Schedule,
    pub graph_refresh: GraphRefresh,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub eval_topk: Vec<usize>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::new(),
            embedding_dim: 64,
            gcn_layers: 2,
            knn_topk: 10,
            alpha: 1.0,
            beta: 0.5,
            sigma_sq_fib: 0.2,
            sigma_sq_gib: 0.2,
            hsic_normalize_inputs: true,
            tau: 0.2,
            lambda_reg: 1e-5,
            learning_rate: 0.0005,
            batch_size: 1024,
            mask_temperature: 0.5,
            backbone: Backbone::VLattice,
            fib_enabled: true,
            gib_enabled: true,
            stage2_enabled: true,
            stage2_schedule: Stage2Schedule::PerBatch,
            graph_refresh: GraphRefresh::Frozen,
            early_stop_patience: 10,
            max_epochs: 200,
            eval_topk: vec![10, 20],
            seed: 2024,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean `{value}` for `{key}`"
        ))),
    }
}

impl RunConfig {
    /// Every recognised key, in echo order.
    pub const KEYS: [&'static str; 24] = [
        "dataset",
        "embedding_dim",
        "gcn_layers",
        "knn_topk",
        "alpha",
        "beta",
        "sigma_sq_fib",
        "sigma_sq_gib",
        "hsic_normalize_inputs",
        "tau",
        "lambda_reg",
        "learning_rate",
        "batch_size",
        "mask_temperature",
        "backbone",
        "fib_enabled",
        "gib_enabled",
        "stage2_enabled",
        "stage2_schedule",
        "graph_refresh",
        "early_stop_patience",
        "max_epochs",
        "eval_topk",
        "seed",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "dataset" => self.dataset = PathBuf::from(value),
            "embedding_dim" => self.embedding_dim = parse(key, value)?,
            "gcn_layers" => self.gcn_layers = parse(key, value)?,
            "knn_topk" => self.knn_topk = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "sigma_sq_fib" => self.sigma_sq_fib = parse(key, value)?,
            "sigma_sq_gib" => self.sigma_sq_gib = parse(key, value)?,
            "hsic_normalize_inputs" => self.hsic_normalize_inputs = parse_bool(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "lambda_reg" => self.lambda_reg = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "mask_temperature" => self.mask_temperature = parse(key, value)?,
            "backbone" => self.backbone = value.parse()?,
            "fib_enabled" => self.fib_enabled = parse_bool(key, value)?,
            "gib_enabled" => self.gib_enabled = parse_bool(key, value)?,
            "stage2_enabled" => self.stage2_enabled = parse_bool(key, value)?,
            "stage2_schedule" => self.stage2_schedule = value.parse()?,
            "graph_refresh" => self.graph_refresh = value.parse()?,
            "early_stop_patience" => self.early_stop_patience = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "eval_topk" => {
                self.eval_topk = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "seed" => self.seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Reads `key = value` lines; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Applies `key=value` overrides on top of the current values.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o.as_ref().split_once('=').ok_or_else(|| {
                Error::Config(format!("override `{}` is not key=value", o.as_ref()))
            })?;
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.embedding_dim == 0 {
            return fail("embedding_dim must be positive");
        }
        if self.gcn_layers == 0 {
            return fail("gcn_layers must be at least 1");
        }
        if self.knn_topk == 0 {
            return fail("knn_topk must be at least 1");
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda_reg", self.lambda_reg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0")));
            }
        }
        for (name, v) in [
            ("tau", self.tau),
            ("sigma_sq_fib", self.sigma_sq_fib),
            ("sigma_sq_gib", self.sigma_sq_gib),
            ("learning_rate", self.learning_rate),
            ("mask_temperature", self.mask_temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value > 0")));
            }
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2");
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be positive");
        }
        if self.eval_topk.is_empty() || self.eval_topk.contains(&0) {
            return fail("eval_topk must list cutoffs >= 1");
        }
        Ok(())
    }

    pub fn fib_active(&self) -> bool {
        self.fib_enabled && self.backbone.uses_media_embeddings()
    }

    pub fn gib_active(&self) -> bool {
        self.gib_enabled && self.backbone.uses_item_graph()
    }

    pub fn stage2_active(&self) -> bool {
        self.stage2_enabled && self.backbone.uses_media_embeddings()
    }

    /// Switches off regularizers the backbone has no pathway for.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.fib_enabled = self.fib_active();
        c.gib_enabled = self.gib_active();
        c.stage2_enabled = self.stage2_active();
        c
    }

    pub fn value_of(&self, key: &str) -> Option<String> {
        Some(match key {
            "dataset" => self.dataset.display().to_string(),
            "embedding_dim" => self.embedding_dim.to_string(),
            "gcn_layers" => self.gcn_layers.to_string(),
            "knn_topk" => self.knn_topk.to_string(),
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "sigma_sq_fib" => self.sigma_sq_fib.to_string(),
            "sigma_sq_gib" => self.sigma_sq_gib.to_string(),
            "hsic_normalize_inputs" => self.hsic_normalize_inputs.to_string(),
            "tau" => self.tau.to_string(),
            "lambda_reg" => self.lambda_reg.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "mask_temperature" => self.mask_temperature.to_string(),
            "backbone" => self.backbone.to_string(),
            "fib_enabled" => self.fib_enabled.to_string(),
            "gib_enabled" => self.gib_enabled.to_string(),
            "stage2_enabled" => self.stage2_enabled.to_string(),
            "stage2_schedule" => self.stage2_schedule.to_string(),
            "graph_refresh" => self.graph_refresh.to_string(),
            "early_stop_patience" => self.early_stop_patience.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "eval_topk" => self
                .eval_topk
                .iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    /// Fully resolved echo of every key. Parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# backbone components: bipartite_graph = {}, item_graph = {}, media_embeddings = {}\n",
            self.backbone.uses_bipartite_graph(),
            self.backbone.uses_item_graph(),
            self.backbone.uses_media_embeddings()
        ));
        for key in Self::KEYS {
            let v = self.value_of(key).expect("every listed key has a value");
            out.push_str(&format!("{key} = {v}\n"));
        }
        out
    }

    /// Short stable digest of the echo text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.apply_overrides(&[
            "alpha=3.0",
            "backbone=lattice",
            "eval_topk=5,50",
            "tau=0.07",
        ])
        .unwrap();
        let back = RunConfig::parse_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(RunConfig::parse_text("nope = 1").is_err());
        assert!(RunConfig::parse_text("alpha = abc").is_err());
        assert!(RunConfig::parse_text("tau = 0").is_err());
        assert!(RunConfig::parse_text("alpha = -1").is_err());
        assert!(RunConfig::parse_text("just words").is_err());
        assert!(RunConfig::parse_text("sigma_sq_fib = 0").is_err());
    }

    #[test]
    fn overrides_apply_after_file_values() {
        let mut c = RunConfig::parse_text("alpha = 2.0\n# comment\nbeta = 4 # trailing\n").unwrap();
        assert_eq!((c.alpha, c.beta), (2.0, 4.0));
        c.apply_overrides(&["alpha=0.25"]).unwrap();
        assert_eq!(c.alpha, 0.25);
    }

    #[test]
    fn vbpr_echo_disables_both_graphs() {
        let c = RunConfig {
            backbone: Backbone::Vbpr,
            ..Default::default()
        };
        let r = c.resolved();
        assert!(!r.gib_enabled && r.fib_enabled && r.stage2_enabled);
        let text = r.to_text();
        assert!(text.contains("bipartite_graph = false, item_graph = false"));
        assert!(text.contains("gib_enabled = false"));
        assert_eq!(r.resolved(), r);
    }

    #[test]
    fn training_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.embedding_dim, 64);
        assert_eq!(c.learning_rate, 0.0005);
        assert_eq!(c.batch_size, 1024);
        assert_eq!(c.early_stop_patience, 10);
    }
}
