//! Observation records, sampling designs and the dataset file format.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DopeError, Result};
use crate::grid::{Domain, Grid1D, Grid2D, QuadratureWeights};

/// Function-valued input of one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum InputField {
    /// Dosing-rate profile on the time grid plus log clearance and log volume.
    Pk { r: Vec<f64>, log_cl: f64, log_v: f64 },
    /// Permeability field on the spatial grid, row-major.
    Darcy { a: Vec<f64> },
}

impl InputField {
    /// Operator input channels on the grid, channel-major.
    ///
    /// PK: `[r, log CL, log V, t/T]`; Darcy: `[a, x, y]`.
    pub fn channels(&self, domain: &Domain) -> Result<Vec<Vec<f64>>> {
        let n = domain.len();
        match (self, domain) {
            (InputField::Pk { r, log_cl, log_v }, Domain::Line(g)) if r.len() == n => {
                let t = g.points().iter().map(|t| t / g.horizon()).collect();
                Ok(vec![r.clone(), vec![*log_cl; n], vec![*log_v; n], t])
            }
            (InputField::Darcy { a }, Domain::Square(g)) if a.len() == n => {
                let (xs, ys): (Vec<f64>, Vec<f64>) = (0..n).map(|i| g.point(i)).unzip();
                Ok(vec![a.clone(), xs, ys])
            }
            _ => Err(DopeError::Shape(format!(
                "input field does not live on a {}-point {}D grid",
                n,
                domain.dim()
            ))),
        }
    }

    pub fn channel_count(&self) -> usize {
        match self {
            InputField::Pk { .. } => 4,
            InputField::Darcy { .. } => 3,
        }
    }
}

/// Sampling distribution over grid points and the inverse design weight
/// `ξ = w / p`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignWeights {
    p: Vec<f64>,
    xi: Vec<f64>,
}

impl DesignWeights {
    /// Validates overlap (`p > 0` everywhere) and normalization.
    pub fn new(p: Vec<f64>, w: &QuadratureWeights) -> Result<Self> {
        if p.len() != w.len() {
            return Err(DopeError::Shape(format!(
                "design of length {} for {} grid points",
                p.len(),
                w.len()
            )));
        }
        if let Some(i) = p.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(DopeError::OverlapViolation(i));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DopeError::InvalidParameter(format!(
                "design masses sum to {total}, expected 1"
            )));
        }
        let xi = p.iter().zip(w.values()).map(|(p, w)| w / p).collect();
        Ok(Self { p, xi })
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn xi(&self) -> &[f64] {
        &self.xi
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// One sample: input, sparse noisy observations and the design that produced
/// their locations.
///
/// The simulated latent trajectory is kept private; only the oracle paths
/// (ground truth, oracle debiasing weight, corruption protocol) read it via
/// [`Observation::oracle_trajectory`].
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub input: InputField,
    pub obs_indices: Vec<usize>,
    pub y: Vec<f64>,
    pub design: DesignWeights,
    latent: Option<Vec<f64>>,
}

impl Observation {
    pub fn new(
        input: InputField,
        obs_indices: Vec<usize>,
        y: Vec<f64>,
        design: DesignWeights,
        latent: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = design.len();
        if obs_indices.is_empty() {
            return Err(DopeError::Data("observation with K = 0".into()));
        }
        if obs_indices.len() != y.len() {
            return Err(DopeError::Data(format!(
                "{} indices but {} values",
                obs_indices.len(),
                y.len()
            )));
        }
        if obs_indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DopeError::Data("observation indices not strictly increasing".into()));
        }
        if let Some(&bad) = obs_indices.iter().find(|&&i| i >= n) {
            return Err(DopeError::Data(format!("index {bad} outside a {n}-point grid")));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(DopeError::NumericInput("non-finite observation value".into()));
        }
        if let Some(u) = &latent {
            if u.len() != n {
                return Err(DopeError::Shape("latent trajectory length".into()));
            }
        }
        Ok(Self {
            input,
            obs_indices,
            y,
            design,
            latent,
        })
    }

    pub fn k(&self) -> usize {
        self.obs_indices.len()
    }

    /// Simulated latent trajectory; only available for simulated data.
    pub fn oracle_trajectory(&self) -> Result<&[f64]> {
        self.latent
            .as_deref()
            .ok_or_else(|| DopeError::OracleUnavailable("latent trajectory not retained".into()))
    }

    pub fn has_oracle(&self) -> bool {
        self.latent.is_some()
    }

    /// Copy without the latent trajectory.
    pub fn without_oracle(&self) -> Self {
        Self {
            latent: None,
            ..self.clone()
        }
    }
}

/// Draw `k` distinct indices with probability proportional to `p`, one at a
/// time with renormalization over the remaining mass; returned sorted.
pub fn sample_without_replacement<R: Rng + ?Sized>(p: &[f64], k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k > p.len() {
        return Err(DopeError::InvalidK {
            requested: k,
            available: p.len(),
        });
    }
    let mut mass = p.to_vec();
    let mut remaining: f64 = mass.iter().sum();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let target = rng.gen::<f64>() * remaining;
        let mut acc = 0.0;
        let mut chosen = None;
        for (i, &m) in mass.iter().enumerate() {
            if m <= 0.0 {
                continue;
            }
            acc += m;
            chosen = Some(i);
            if acc > target {
                break;
            }
        }
        let i = chosen.ok_or_else(|| DopeError::Data("design mass exhausted".into()))?;
        remaining -= mass[i];
        mass[i] = 0.0;
        // guard against drift after many subtractions
        if remaining <= 0.0 {
            remaining = mass.iter().sum();
        }
        out.push(i);
    }
    out.sort_unstable();
    Ok(out)
}

/// Sample locations from `design` and add Gaussian noise to `u` there.
pub fn sample_observations<R: Rng + ?Sized>(
    design: &DesignWeights,
    u: &[f64],
    k: usize,
    sigma_eps: f64,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if !(sigma_eps >= 0.0 && sigma_eps.is_finite()) {
        return Err(DopeError::InvalidParameter(format!("noise sd {sigma_eps}")));
    }
    if u.len() != design.len() {
        return Err(DopeError::Shape("trajectory and design lengths differ".into()));
    }
    let idx = sample_without_replacement(design.p(), k, rng)?;
    let y = idx
        .iter()
        .map(|&i| u[i] + sigma_eps * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok((idx, y))
}

/// A collection of observations on one shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub domain: Domain,
    pub samples: Vec<Observation>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum GridFile {
    Line {
        #[serde(rename = "T")]
        horizon: f64,
        delta: usize,
    },
    Square {
        #[serde(rename = "H")]
        h: usize,
        #[serde(rename = "W")]
        w: usize,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SampleFile {
    Pk {
        r: Vec<f64>,
        log_cl: f64,
        log_v: f64,
        obs_indices: Vec<usize>,
        y: Vec<f64>,
        p: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        latent_u: Option<Vec<f64>>,
    },
    Darcy {
        a: Vec<f64>,
        obs_indices: Vec<usize>,
        y: Vec<f64>,
        q: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        latent_u: Option<Vec<f64>>,
    },
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    grid: GridFile,
    samples: Vec<SampleFile>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// JSON document; latent trajectories are written only if `with_oracle`.
    pub fn to_json(&self, with_oracle: bool) -> Result<String> {
        let grid = match &self.domain {
            Domain::Line(g) => GridFile::Line {
                horizon: g.horizon(),
                delta: g.len(),
            },
            Domain::Square(g) => GridFile::Square { h: g.rows(), w: g.cols() },
        };
        let samples = self
            .samples
            .iter()
            .map(|o| {
                let latent_u = if with_oracle { o.latent.clone() } else { None };
                match &o.input {
                    InputField::Pk { r, log_cl, log_v } => SampleFile::Pk {
                        r: r.clone(),
                        log_cl: *log_cl,
                        log_v: *log_v,
                        obs_indices: o.obs_indices.clone(),
                        y: o.y.clone(),
                        p: o.design.p.clone(),
                        latent_u,
                    },
                    InputField::Darcy { a } => SampleFile::Darcy {
                        a: a.clone(),
                        obs_indices: o.obs_indices.clone(),
                        y: o.y.clone(),
                        q: o.design.p.clone(),
                        latent_u,
                    },
                }
            })
            .collect();
        Ok(serde_json::to_string(&DatasetFile { grid, samples })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(text)?;
        let domain = match file.grid {
            GridFile::Line { horizon, delta } => Domain::Line(Grid1D::new(horizon, delta)?),
            GridFile::Square { h, w } => Domain::Square(Grid2D::new(h, w)?),
        };
        let w = domain.weights();
        let samples = file
            .samples
            .into_iter()
            .map(|s| match s {
                SampleFile::Pk {
                    r,
                    log_cl,
                    log_v,
                    obs_indices,
                    y,
                    p,
                    latent_u,
                } => Observation::new(
                    InputField::Pk { r, log_cl, log_v },
                    obs_indices,
                    y,
                    DesignWeights::new(p, &w)?,
                    latent_u,
                ),
                SampleFile::Darcy {
                    a,
                    obs_indices,
                    y,
                    q,
                    latent_u,
                } => Observation::new(InputField::Darcy { a }, obs_indices, y, DesignWeights::new(q, &w)?, latent_u),
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset { domain, samples };
        for o in &ds.samples {
            o.input.channels(&ds.domain)?;
        }
        Ok(ds)
    }
}
