//! TOML run configuration.
//!
//! ```toml
//! [run]
//! name = "mixture"
//! methods = ["gep", "gp"]
//! epsilons = [2.0, 8.0]
//! seeds = [0, 1]
//!
//! [data]
//! source = "synth"
//! n_private = 1000
//! n_aux = 200
//! n_eval = 1000
//! task = { kind = "gaussian-mixture", n = 0, dim = 20, classes = 3 }
//! ```

use std::path::{Path, PathBuf};

use gep_core::accountant::DpBudget;
use gep_core::mechanism::{BasisMode, GepConfig, ReleaseMode};
use gep_core::models::ModelKind;
use gep_core::synth::SynthSpec;
use gep_core::trainer::{AuxLabelMode, BatchRule, Calibration, Method, SgdParams, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::ingest::Normalize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub gep: GepSection,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_name")]
    pub name: String,
    /// Output directory for metrics and the summary.
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_calibration")]
    pub calibration: Calibration,
    /// Skips calibration and uses this multiplier (unit-sensitivity form).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub aux_labels: AuxLabelMode,
    #[serde(default)]
    pub diagnostics_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSection {
    Synth {
        task: SynthSpec,
        n_private: usize,
        n_aux: usize,
        n_eval: usize,
    },
    Csv {
        train: PathBuf,
        /// Evaluation file; the training file is reused when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        eval: Option<PathBuf>,
        /// Auxiliary (anchor) file. When absent, `holdout` trailing training
        /// rows are set aside instead, or Gaussian anchors are drawn if
        /// `holdout` is zero.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        aux: Option<PathBuf>,
        #[serde(default)]
        holdout: usize,
        label: String,
        #[serde(default)]
        normalize: Normalize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    #[serde(default)]
    pub hidden: Vec<usize>,
    /// Defaults to one more than the largest training label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Logistic,
            hidden: Vec::new(),
            classes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GepSection {
    pub k: usize,
    pub m: usize,
    pub power_iters: usize,
    pub clip_embedding: f64,
    pub clip_residual: f64,
    pub release: ReleaseMode,
    pub basis: BasisMode,
    pub gp_clip: f64,
    pub rebuild_every: usize,
}

impl Default for GepSection {
    fn default() -> Self {
        let g = GepConfig::default();
        Self {
            k: g.k,
            m: g.m,
            power_iters: g.power_iters,
            clip_embedding: g.clip_embedding,
            clip_residual: g.clip_residual,
            release: g.release,
            basis: g.basis,
            gp_clip: 10.0,
            rebuild_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: bool,
    /// Poisson sampling rate; full batch when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_rate: Option<f64>,
}

impl Default for OptimSection {
    fn default() -> Self {
        let s = SgdParams::default();
        Self {
            lr: s.lr,
            momentum: s.momentum,
            weight_decay: s.weight_decay,
            lr_decay: true,
            batch_rate: None,
        }
    }
}

/// Values of `k` and `m` to sweep; empty lists use `gep.k` and `gep.m`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub k: Vec<usize>,
    pub m: Vec<usize>,
}

fn default_name() -> String {
    "run".into()
}
fn default_out() -> PathBuf {
    "out".into()
}
fn default_methods() -> Vec<Method> {
    vec![Method::Gep]
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_epsilons() -> Vec<f64> {
    vec![8.0]
}
fn default_delta() -> f64 {
    1e-5
}
fn default_steps() -> usize {
    100
}
fn default_calibration() -> Calibration {
    Calibration::Search
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and resolves every relative path against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.run.out);
        if let DataSection::Csv { train, eval, aux, .. } = &mut self.data {
            join(train);
            eval.iter_mut().for_each(join);
            aux.iter_mut().for_each(join);
        }
    }

    /// Fails unless every input file exists.
    pub fn check_inputs(&self) -> Result<()> {
        if let DataSection::Csv { train, eval, aux, .. } = &self.data {
            for p in std::iter::once(train).chain(eval).chain(aux) {
                if !p.is_file() {
                    return Err(CliError::Config(format!("input file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        let r = &self.run;
        if r.methods.is_empty() || r.seeds.is_empty() || r.epsilons.is_empty() {
            return bad("run.methods, run.seeds and run.epsilons must be non-empty".into());
        }
        for &eps in &r.epsilons {
            DpBudget::new(eps, r.delta).map_err(|e| CliError::Config(format!("run.epsilons: {e}")))?;
        }
        if r.steps == 0 {
            return bad("run.steps must be >= 1".into());
        }
        if let Some(s) = r.sigma {
            if !s.is_finite() || s < 0.0 {
                return bad(format!("run.sigma must be finite and >= 0, got {s}"));
            }
        }
        if self.model.kind == ModelKind::Mlp && self.model.hidden.is_empty() {
            return bad("model.hidden must list at least one layer for kind = \"mlp\"".into());
        }
        if self.sweep.k.contains(&0) || self.sweep.m.contains(&0) {
            return bad("sweep values must be >= 1".into());
        }
        if let DataSection::Synth { n_private, .. } = &self.data {
            if *n_private == 0 {
                return bad("data.n_private must be >= 1".into());
            }
        }
        // Remaining numeric checks are shared with the trainer.
        let probe = self.train_config(r.methods[0], r.epsilons[0], self.gep.k, self.gep.m, r.seeds[0])?;
        probe.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn ks(&self) -> Vec<usize> {
        if self.sweep.k.is_empty() {
            vec![self.gep.k]
        } else {
            self.sweep.k.clone()
        }
    }

    pub fn ms(&self) -> Vec<usize> {
        if self.sweep.m.is_empty() {
            vec![self.gep.m]
        } else {
            self.sweep.m.clone()
        }
    }

    /// Trainer configuration of one sweep point, with σ still unset.
    pub fn train_config(&self, method: Method, epsilon: f64, k: usize, m: usize, seed: u64) -> Result<TrainConfig> {
        let budget = DpBudget::new(epsilon, self.run.delta).map_err(|e| CliError::Config(e.to_string()))?;
        let mut cfg = TrainConfig::new(method, budget, self.run.steps);
        let g = &self.gep;
        cfg.gep = GepConfig {
            k,
            m,
            power_iters: g.power_iters,
            clip_embedding: g.clip_embedding,
            clip_residual: g.clip_residual,
            release: g.release,
            basis: g.basis,
            sigma: 0.0,
        };
        cfg.gp_clip = g.gp_clip;
        cfg.rebuild_every = g.rebuild_every;
        cfg.sgd = SgdParams {
            lr: self.optim.lr,
            momentum: self.optim.momentum,
            weight_decay: self.optim.weight_decay,
        };
        cfg.lr_decay = self.optim.lr_decay;
        cfg.batch = match self.optim.batch_rate {
            Some(rate) => BatchRule::Poisson { rate },
            None => BatchRule::Full,
        };
        cfg.seed = seed;
        cfg.aux_labels = self.run.aux_labels;
        cfg.diagnostics_every = self.run.diagnostics_every;
        Ok(cfg)
    }
}
