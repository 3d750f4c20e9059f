//! Ground truth `θ = E[g(S₀(A))]` from a large independent simulation pool,
//! cached on disk by population key.

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use dope_core::darcy::{generate_darcy_dataset, DarcyConfig};
use dope_core::functional::{functional_value, FunctionalSpec};
use dope_core::grid::QuadratureWeights;
use dope_core::pk::{generate_pk_dataset, PkConfig};
use dope_core::rng::Role;

use crate::config::{Dgp, ExperimentConfig};
use crate::error::Result;
use crate::results::write_atomic;

const CACHE_FILE: &str = "truth_cache.json";

/// Latent trajectories of the truth pool with their quadrature weights.
pub fn truth_pool(dgp: Dgp, rho: f64, n: usize, seed: u64) -> Result<(Vec<Vec<f64>>, QuadratureWeights)> {
    let ds = match dgp {
        Dgp::Pk => generate_pk_dataset(n, rho, &PkConfig::default(), seed, Role::TruthPool, 0)?,
        Dgp::Darcy => generate_darcy_dataset(n, &DarcyConfig::default(), seed, Role::TruthPool, 0)?,
    };
    let w = ds.domain.weights();
    let u = ds
        .samples
        .iter()
        .map(|o| o.oracle_trajectory().map(<[f64]>::to_vec))
        .collect::<std::result::Result<_, _>>()?;
    Ok((u, w))
}

pub fn pool_mean(pool: &[Vec<f64>], spec: &FunctionalSpec, w: &QuadratureWeights) -> Result<f64> {
    let mut total = 0.0;
    for u in pool {
        total += functional_value(spec, u, w)?;
    }
    Ok(total / pool.len() as f64)
}

#[derive(Debug, Default)]
pub struct TruthCache {
    dir: Option<PathBuf>,
    values: BTreeMap<String, f64>,
    pools: HashMap<(Dgp, u64), (Vec<Vec<f64>>, QuadratureWeights)>,
    dirty: bool,
}

impl TruthCache {
    /// Open the cache in `dir`, or an in-memory cache when `dir` is `None`.
    pub fn open(dir: Option<&Path>) -> Result<Self> {
        let mut cache = TruthCache {
            dir: dir.map(Path::to_path_buf),
            ..Default::default()
        };
        if let Some(d) = dir {
            let file = d.join(CACHE_FILE);
            if file.exists() {
                cache.values = serde_json::from_str(&std::fs::read_to_string(file)?)?;
            }
        }
        Ok(cache)
    }

    pub fn get(&mut self, cfg: &ExperimentConfig, spec: &FunctionalSpec, rho: f64) -> Result<f64> {
        let key = cfg.population_key(spec, rho);
        if let Some(&v) = self.values.get(&key) {
            return Ok(v);
        }
        // Latent trajectories do not depend on the design, so Darcy pools
        // are shared across every rho.
        let rho_key = if cfg.dgp == Dgp::Darcy { 0 } else { rho.to_bits() };
        let pool_key = (cfg.dgp, rho_key);
        if let Entry::Vacant(slot) = self.pools.entry(pool_key) {
            slot.insert(truth_pool(cfg.dgp, rho, cfg.truth_pool, cfg.truth_seed)?);
        }
        let (u, w) = &self.pools[&pool_key];
        let v = pool_mean(u, spec, w)?;
        self.values.insert(key, v);
        self.dirty = true;
        Ok(v)
    }

    pub fn save(&mut self) -> Result<()> {
        if let (Some(d), true) = (&self.dir, self.dirty) {
            write_atomic(&d.join(CACHE_FILE), &serde_json::to_string_pretty(&self.values)?)?;
            self.dirty = false;
        }
        Ok(())
    }
}
