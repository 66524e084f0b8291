//! Flat `key = value` run configuration.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ode::{Method, SolverConfig};
use crate::operator::{ModelConfig, ModelKind, TrunkKind};
use crate::pde_data::{PoissonConfig, SignalConfig, SignalFamily};
use crate::training::{GradMode, TrainConfig};

/// Splits config text into `(line, key, value)` entries. Blank lines and
/// lines starting with `#` are skipped; trailing `# ...` is not a comment.
pub fn parse_entries(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (k, v) = trimmed.split_once('=').ok_or_else(|| Error::Config {
            line,
            msg: format!("expected `key = value`, found {trimmed:?}"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(Error::Config {
                line,
                msg: format!("invalid key {k:?}"),
            });
        }
        if out.iter().any(|(_, key, _)| key == k) {
            return Err(Error::Config {
                line,
                msg: format!("duplicate key {k:?}"),
            });
        }
        out.push((line, k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Every tunable of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub signal: SignalConfig,
    pub poisson: PoissonConfig,
    pub model: ModelConfig,
    pub solver: SolverConfig,
    pub train: TrainConfig,
    /// Worker threads; 0 picks the machine default.
    pub threads: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            seed: 2024,
            n_train: 400,
            n_test: 100,
            signal: SignalConfig::default(),
            poisson: PoissonConfig::default(),
            model: ModelConfig::default(),
            solver: SolverConfig::default(),
            train: TrainConfig::default(),
            threads: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "n_train",
    "n_test",
    "family",
    "amplitude",
    "max_modes",
    "min_freq",
    "max_freq",
    "min_knots",
    "max_knots",
    "nx",
    "ny",
    "horizon",
    "saves",
    "substeps",
    "cg_tol",
    "cg_max_iter",
    "model",
    "trunk",
    "latent",
    "field_width",
    "field_depth",
    "trunk_width",
    "trunk_depth",
    "embed",
    "gru_hidden",
    "gru_layers",
    "solver",
    "rtol",
    "atol",
    "max_steps",
    "fixed_steps",
    "batch_size",
    "epochs",
    "lr_init",
    "lr_final",
    "warmup_fraction",
    "queries",
    "grad",
    "failure_budget",
    "threads",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidArgument(format!("cannot parse {key} = {v:?}")))
}

impl Settings {
    /// Sets one key. Horizon and fixed step count are shared between the
    /// sections that use them; `seed` also seeds training.
    pub fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => {
                self.seed = num(key, v)?;
                self.train.seed = self.seed;
            }
            "n_train" => self.n_train = num(key, v)?,
            "n_test" => self.n_test = num(key, v)?,
            "family" => self.signal.family = SignalFamily::from_str(v)?,
            "amplitude" => self.signal.amplitude = num(key, v)?,
            "max_modes" => self.signal.max_modes = num(key, v)?,
            "min_freq" => self.signal.min_freq = num(key, v)?,
            "max_freq" => self.signal.max_freq = num(key, v)?,
            "min_knots" => self.signal.min_knots = num(key, v)?,
            "max_knots" => self.signal.max_knots = num(key, v)?,
            "nx" => self.poisson.nx = num(key, v)?,
            "ny" => self.poisson.ny = num(key, v)?,
            "horizon" => {
                self.poisson.horizon = num(key, v)?;
                self.signal.horizon = self.poisson.horizon;
            }
            "saves" => self.poisson.saves = num(key, v)?,
            "substeps" => self.poisson.substeps = num(key, v)?,
            "cg_tol" => self.poisson.cg_tol = num(key, v)?,
            "cg_max_iter" => self.poisson.cg_max_iter = num(key, v)?,
            "model" => self.model.kind = ModelKind::from_str(v)?,
            "trunk" => self.model.trunk = TrunkKind::from_str(v)?,
            "latent" => self.model.latent = num(key, v)?,
            "field_width" => self.model.field_width = num(key, v)?,
            "field_depth" => self.model.field_depth = num(key, v)?,
            "trunk_width" => self.model.trunk_width = num(key, v)?,
            "trunk_depth" => self.model.trunk_depth = num(key, v)?,
            "embed" => self.model.embed = num(key, v)?,
            "gru_hidden" => self.model.gru_hidden = num(key, v)?,
            "gru_layers" => self.model.gru_layers = num(key, v)?,
            "solver" => self.solver.method = Method::from_str(v)?,
            "rtol" => self.solver.rtol = num(key, v)?,
            "atol" => self.solver.atol = num(key, v)?,
            "max_steps" => self.solver.max_steps = num(key, v)?,
            "fixed_steps" => {
                self.solver.fixed_steps = num(key, v)?;
                self.train.fixed_steps = self.solver.fixed_steps;
            }
            "batch_size" => self.train.batch_size = num(key, v)?,
            "epochs" => self.train.epochs = num(key, v)?,
            "lr_init" => self.train.lr_init = num(key, v)?,
            "lr_final" => self.train.lr_final = num(key, v)?,
            "warmup_fraction" => self.train.warmup_fraction = num(key, v)?,
            "queries" => self.train.queries = num(key, v)?,
            "grad" => self.train.grad = GradMode::from_str(v)?,
            "failure_budget" => self.train.failure_budget = num(key, v)?,
            "threads" => self.threads = num(key, v)?,
            other => return Err(Error::InvalidArgument(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        for (line, k, v) in parse_entries(text)? {
            s.apply(&k, &v).map_err(|e| Error::Config {
                line,
                msg: e.to_string(),
            })?;
        }
        Ok(s)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.signal.validate()?;
        self.poisson.validate()?;
        self.solver.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Canonical text form; `from_text` of the result gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            s.push_str(&format!("{key} = {}\n", self.value(key)));
        }
        s
    }

    fn value(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "n_train" => self.n_train.to_string(),
            "n_test" => self.n_test.to_string(),
            "family" => self.signal.family.name().into(),
            "amplitude" => format!("{:?}", self.signal.amplitude),
            "max_modes" => self.signal.max_modes.to_string(),
            "min_freq" => format!("{:?}", self.signal.min_freq),
            "max_freq" => format!("{:?}", self.signal.max_freq),
            "min_knots" => self.signal.min_knots.to_string(),
            "max_knots" => self.signal.max_knots.to_string(),
            "nx" => self.poisson.nx.to_string(),
            "ny" => self.poisson.ny.to_string(),
            "horizon" => format!("{:?}", self.poisson.horizon),
            "saves" => self.poisson.saves.to_string(),
            "substeps" => self.poisson.substeps.to_string(),
            "cg_tol" => format!("{:?}", self.poisson.cg_tol),
            "cg_max_iter" => self.poisson.cg_max_iter.to_string(),
            "model" => self.model.kind.name().into(),
            "trunk" => self.model.trunk.name().into(),
            "latent" => self.model.latent.to_string(),
            "field_width" => self.model.field_width.to_string(),
            "field_depth" => self.model.field_depth.to_string(),
            "trunk_width" => self.model.trunk_width.to_string(),
            "trunk_depth" => self.model.trunk_depth.to_string(),
            "embed" => self.model.embed.to_string(),
            "gru_hidden" => self.model.gru_hidden.to_string(),
            "gru_layers" => self.model.gru_layers.to_string(),
            "solver" => self.solver.method.name().into(),
            "rtol" => format!("{:?}", self.solver.rtol),
            "atol" => format!("{:?}", self.solver.atol),
            "max_steps" => self.solver.max_steps.to_string(),
            "fixed_steps" => self.solver.fixed_steps.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "epochs" => self.train.epochs.to_string(),
            "lr_init" => format!("{:?}", self.train.lr_init),
            "lr_final" => format!("{:?}", self.train.lr_final),
            "warmup_fraction" => format!("{:?}", self.train.warmup_fraction),
            "queries" => self.train.queries.to_string(),
            "grad" => self.train.grad.name().into(),
            "failure_budget" => self.train.failure_budget.to_string(),
            "threads" => self.threads.to_string(),
            _ => unreachable!("key list and match agree"),
        }
    }
}
