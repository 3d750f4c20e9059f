//! JSON experiment configuration.
//!
//! Config files may contain whole-line `//` comments; they are stripped
//! before parsing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dope_core::darcy::DarcyConfig;
use dope_core::functional::FunctionalSpec;
use dope_core::operators::{BackboneConfig, DeepONetConfig, TrainConfig};
use dope_core::pk::PkConfig;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dgp {
    Pk,
    Darcy,
}

impl Dgp {
    pub fn name(self) -> &'static str {
        match self {
            Dgp::Pk => "pk",
            Dgp::Darcy => "darcy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    #[default]
    Fno,
    Deeponet,
}

/// Network used for both nuisances on a benchmark.
pub fn backbone_config(dgp: Dgp, backbone: Backbone) -> BackboneConfig {
    match (dgp, backbone) {
        (Dgp::Pk, Backbone::Fno) => BackboneConfig::pk_fno(),
        (Dgp::Pk, Backbone::Deeponet) => BackboneConfig::pk_deeponet(),
        (Dgp::Darcy, Backbone::Fno) => BackboneConfig::darcy_fno(),
        (Dgp::Darcy, Backbone::Deeponet) => BackboneConfig::DeepOnet(DeepONetConfig {
            in_channels: 3,
            branch_width: 32,
            trunk_width: 32,
            latent: 32,
            out_channels: 1,
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Plugin,
    Dope,
    DopeStructured,
    DopeOracle,
    DopePpi,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Plugin => "plugin",
            Method::Dope => "dope",
            Method::DopeStructured => "dope_structured",
            Method::DopeOracle => "dope_oracle",
            Method::DopePpi => "dope_ppi",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        [
            Method::Plugin,
            Method::Dope,
            Method::DopeStructured,
            Method::DopeOracle,
            Method::DopePpi,
        ]
        .into_iter()
        .find(|m| m.name() == name)
    }
}

/// The swept quantity and its grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variable", content = "values", rename_all = "snake_case")]
pub enum Sweep {
    /// Design irregularity of the PK benchmark.
    Rho(Vec<f64>),
    /// Sharpness of the smooth excess functional; data are shared across values.
    Kappa(Vec<f64>),
    /// Nuisance error inflation; data and fits are shared across values.
    Delta(Vec<f64>),
    /// Size of the unlabeled input pool; pools are nested across values.
    NUnlabeled(Vec<usize>),
}

impl Sweep {
    pub fn variable(&self) -> &'static str {
        match self {
            Sweep::Rho(_) => "rho",
            Sweep::Kappa(_) => "kappa",
            Sweep::Delta(_) => "delta",
            Sweep::NUnlabeled(_) => "n_unlabeled",
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            Sweep::Rho(v) | Sweep::Kappa(v) | Sweep::Delta(v) => v.clone(),
            Sweep::NUnlabeled(v) => v.iter().map(|&n| n as f64).collect(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Sweep::Rho(v) | Sweep::Kappa(v) | Sweep::Delta(v) => v.len(),
            Sweep::NUnlabeled(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether different sweep values need different simulated data.
    pub fn changes_data(&self) -> bool {
        matches!(self, Sweep::Rho(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for Splits {
    fn default() -> Self {
        Self {
            train: 256,
            val: 64,
            test: 64,
        }
    }
}

/// Which fitted nuisances a `delta` sweep inflates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorruptTarget {
    #[default]
    Both,
    Solution,
    Weight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct OutputPaths {
    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default)]
    pub plot: Option<PathBuf>,
    /// Directory for cached ground-truth values.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

fn default_repeats() -> usize {
    50
}
fn default_folds() -> usize {
    2
}
fn default_rho() -> f64 {
    0.5
}
fn default_truth_seed() -> u64 {
    0x5EED_7777
}
fn default_truth_pool() -> usize {
    2000
}
fn default_true() -> bool {
    true
}
fn default_lambda() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dgp: Dgp,
    /// Target functionals; must be empty for a `kappa` sweep.
    #[serde(default)]
    pub functionals: Vec<FunctionalSpec>,
    pub sweep: Sweep,
    /// PK design irregularity when `rho` is not swept.
    #[serde(default = "default_rho")]
    pub rho: f64,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub backbone: Backbone,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub splits: Splits,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_truth_seed")]
    pub truth_seed: u64,
    #[serde(default = "default_truth_pool")]
    pub truth_pool: usize,
    #[serde(default)]
    pub corrupt: CorruptTarget,
    /// Fit the solution operator inside every fold on the fold's complement.
    /// When false, one operator fitted on the training split serves all folds.
    #[serde(default = "default_true")]
    pub crossfit_solution: bool,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_lambda")]
    pub riesz_lambda: f64,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub output: OutputPaths,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cleaned: String = text
            .lines()
            .filter(|l| !l.trim_start().starts_with("//"))
            .collect::<Vec<_>>()
            .join("\n");
        let cfg: Self =
            serde_json::from_str(&cleaned).map_err(|e| HarnessError::Usage(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::MissingFile {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Usage(m));
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if self.methods.is_empty() {
            return bad("no methods requested".into());
        }
        if self.sweep.is_empty() {
            return bad("empty sweep".into());
        }
        if self.folds < 2 {
            return bad("cross-fitting needs at least 2 folds".into());
        }
        if self.splits.train == 0 || self.splits.test < 2 * self.folds {
            return bad(format!(
                "split sizes {:?} leave too few samples for {} folds",
                self.splits, self.folds
            ));
        }
        if self.truth_pool < 2 {
            return bad("truth pool needs at least 2 samples".into());
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho {} outside [0, 1]", self.rho));
        }
        if !(self.riesz_lambda >= 0.0 && self.riesz_lambda.is_finite()) {
            return bad(format!("Riesz penalty {}", self.riesz_lambda));
        }
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return bad("training needs a positive batch size and epoch count".into());
        }
        let in_range = |v: &[f64], lo: f64, hi: f64| v.iter().all(|x| (lo..=hi).contains(x));
        match &self.sweep {
            Sweep::Rho(v) => {
                if self.dgp != Dgp::Pk {
                    return bad("rho sweeps apply to the pk benchmark only".into());
                }
                if !in_range(v, 0.0, 1.0) {
                    return bad("rho values must lie in [0, 1]".into());
                }
            }
            Sweep::Kappa(v) => {
                if !in_range(v, 0.0, 1.0) {
                    return bad("kappa values must lie in [0, 1]".into());
                }
                if !self.functionals.is_empty() {
                    return bad("a kappa sweep defines its own functional; leave functionals empty".into());
                }
            }
            Sweep::Delta(v) => {
                if !in_range(v, 0.0, 0.5) {
                    return bad("delta values must lie in [0, 0.5]".into());
                }
            }
            Sweep::NUnlabeled(_) => {}
        }
        if !matches!(self.sweep, Sweep::Kappa(_)) && self.functionals.is_empty() {
            return bad("no functionals requested".into());
        }
        for f in &self.functionals {
            f.validate().map_err(|e| HarnessError::Usage(e.to_string()))?;
        }
        for m in &self.methods {
            let ok = match (&self.sweep, m) {
                (Sweep::NUnlabeled(_), Method::Plugin | Method::DopePpi) => true,
                (Sweep::NUnlabeled(_), _) | (_, Method::DopePpi) => false,
                (Sweep::Delta(_), Method::DopeOracle) => false,
                _ => true,
            };
            if !ok {
                return bad(format!("method {} is not defined for a {} sweep", m.name(), self.sweep.variable()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of the configuration.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        backbone_config(self.dgp, self.backbone)
    }

    /// Functionals evaluated at one sweep value.
    pub fn functionals_at(&self, sweep_value: f64) -> Vec<FunctionalSpec> {
        match self.sweep {
            Sweep::Kappa(_) => vec![FunctionalSpec::smooth_excess_sweep(sweep_value)],
            _ => self.functionals.clone(),
        }
    }

    /// Design irregularity used to simulate data at one sweep value.
    pub fn rho_at(&self, sweep_value: f64) -> f64 {
        match self.sweep {
            Sweep::Rho(_) => sweep_value,
            _ => self.rho,
        }
    }

    /// `base + 1000 * repeat + sweep index`, with the index fixed at 0 for
    /// sweeps that do not change the data.
    pub fn repeat_seed(&self, repeat: usize, sweep_index: usize) -> u64 {
        let idx = if self.sweep.changes_data() { sweep_index } else { 0 };
        self.seed + 1000 * repeat as u64 + idx as u64
    }

    /// Identity of the simulated population, used to key cached truths.
    pub fn population_key(&self, functional: &FunctionalSpec, rho: f64) -> String {
        let text = match self.dgp {
            Dgp::Pk => serde_json::to_string(&(
                "pk",
                PkConfig::default(),
                rho,
                functional,
                self.truth_seed,
                self.truth_pool,
            )),
            Dgp::Darcy => serde_json::to_string(&(
                "darcy",
                DarcyConfig::default(),
                functional,
                self.truth_seed,
                self.truth_pool,
            )),
        }
        .expect("population serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        // comment lines are allowed
        "dgp": "pk",
        "functionals": [{"kind": "auc"}],
        "sweep": {"variable": "rho", "values": [0.0, 0.5]},
        "methods": ["plugin", "dope"]
    }"#;

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::from_json(BASE).unwrap();
        assert_eq!(c.repeats, 50);
        assert_eq!(c.splits, Splits::default());
        assert_eq!(c.folds, 2);
        assert_eq!(c.train.epochs, 20);
        assert_eq!(c.riesz_lambda, 0.1);
        assert_eq!(c.repeat_seed(2, 1), 2001);
    }

    #[test]
    fn rejects_out_of_range() {
        let bad = BASE.replace("0.5]", "1.5]");
        assert!(matches!(ExperimentConfig::from_json(&bad), Err(HarnessError::Usage(_))));
        let bad = BASE.replace("\"dope\"", "\"dope_ppi\"");
        assert!(ExperimentConfig::from_json(&bad).is_err());
        let bad = BASE.replace("\"dgp\": \"pk\"", "\"dgp\": \"darcy\"");
        assert!(ExperimentConfig::from_json(&bad).is_err());
        let bad = BASE.replace("\"methods\"", "\"repeats\": 0, \"methods\"");
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }

    #[test]
    fn kappa_sweep_shares_data() {
        let c = ExperimentConfig::from_json(
            r#"{"dgp": "darcy", "sweep": {"variable": "kappa", "values": [0.0, 0.2]}, "methods": ["plugin"]}"#,
        )
        .unwrap();
        assert_eq!(c.repeat_seed(3, 1), c.repeat_seed(3, 0));
        assert_eq!(c.functionals_at(0.2)[0], FunctionalSpec::smooth_excess_sweep(0.2));
    }
}
