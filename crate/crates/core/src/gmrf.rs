//! Model hyperparameters and the conditional (posterior) problem they induce.
//!
//! The prior over densities `x` is the Gaussian field
//!
//! ```text
//! p(x) ∝ exp( βᵀx − (ηε/2) Σᵢ xᵢ² − (η/2) Σ_{(i,j)∈E} (xᵢ − xⱼ)² ) = exp( βᵀx − (η/2) xᵀCx )
//! ```
//!
//! Observed roads are fixed exactly at their measured values. Conditioning on
//! them leaves a Gaussian over the unobserved roads with precision `ηA` and
//! linear term `b`, where `A` is C restricted to the unobserved rows and
//! columns, and `b` folds the observed neighbor values into β.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::graph::{precision_pattern, subgraph_pattern, PrecisionPattern, RoadGraph};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// One complete density vector over all roads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Snapshot(pub Vec<f64>);

impl Snapshot {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Snapshot {
    fn from(v: Vec<f64>) -> Self {
        Snapshot(v)
    }
}

/// Learned hyperparameters tied to one road graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub eta: f64,
    pub epsilon: f64,
    #[serde(rename = "lambda")]
    pub lambda_used: f64,
    pub beta: Vec<f64>,
    pub graph_fingerprint: String,
    pub format_version: u32,
}

impl Model {
    pub fn new(
        g: &RoadGraph,
        beta: Vec<f64>,
        eta: f64,
        epsilon: f64,
        lambda_used: f64,
    ) -> Result<Self> {
        let model = Model {
            eta,
            epsilon,
            lambda_used,
            beta,
            graph_fingerprint: g.fingerprint().to_owned(),
            format_version: MODEL_FORMAT_VERSION,
        };
        model.validate()?;
        ensure_len("model beta", g.n(), model.beta.len())?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.lambda_used >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be nonnegative, got {}",
                self.lambda_used
            )));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Domain("beta contains a non-finite value".into()));
        }
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model format version {}",
                self.format_version
            )));
        }
        Ok(())
    }

    pub fn check_graph(&self, g: &RoadGraph) -> Result<()> {
        if self.graph_fingerprint != g.fingerprint() {
            return Err(Error::Incompatible {
                model: self.graph_fingerprint.clone(),
                graph: g.fingerprint().to_owned(),
            });
        }
        ensure_len("model beta", g.n(), self.beta.len())
    }

    /// Prior mean `(1/η) C⁻¹ β`.
    pub fn prior_mean(&self, g: &RoadGraph) -> Result<Vec<f64>> {
        let c = precision_pattern(g, self.epsilon)?;
        let f = crate::sparse::EnvelopeCholesky::scaled(&c, self.eta, 0.0)?;
        Ok(f.solve(&self.beta))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let model: Model = serde_json::from_str(&text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// A snapshot in which only some roads were measured.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialSnapshot {
    values: Vec<Option<f64>>,
}

impl PartialSnapshot {
    /// `values[i]` is the measured density of road `i`, `None` if unobserved.
    pub fn new(values: Vec<Option<f64>>) -> Result<Self> {
        for (i, v) in values.iter().enumerate() {
            if let Some(v) = *v {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Domain(format!(
                        "observed density at vertex {i} must be finite and nonnegative, got {v}"
                    )));
                }
            }
        }
        Ok(PartialSnapshot { values })
    }

    pub fn fully_observed(s: &Snapshot) -> Result<Self> {
        Self::new(s.0.iter().map(|&v| Some(v)).collect())
    }

    /// Observes every road of `s` except those in `unobserved`.
    pub fn hiding(s: &Snapshot, unobserved: &[usize]) -> Result<Self> {
        let mut values: Vec<Option<f64>> = s.0.iter().map(|&v| Some(v)).collect();
        for &i in unobserved {
            *values
                .get_mut(i)
                .ok_or_else(|| Error::Structure(format!("vertex {i} out of range")))? = None;
        }
        Self::new(values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<f64> {
        self.values[i]
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    pub fn unobserved(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.values[i].is_none())
            .collect()
    }

    pub fn observed(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
    }
}

/// Conditional Gaussian over the unobserved roads: precision `η A`, linear term `b`.
#[derive(Clone, Debug)]
pub struct PosteriorProblem {
    pub pattern: PrecisionPattern,
    pub bias: Vec<f64>,
    pub eta: f64,
    /// Full-length vector holding observed values and zeros elsewhere.
    pub(crate) base: Vec<f64>,
    pub(crate) observed_mask: Vec<bool>,
    /// Mean of observed neighbor values per unknown (0 when none).
    pub(crate) neighbor_average: Vec<f64>,
}

impl PosteriorProblem {
    pub fn dim(&self) -> usize {
        self.pattern.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.dim() == 0
    }

    /// Graph vertex of each unknown.
    pub fn index_map(&self) -> &[usize] {
        self.pattern.vertices()
    }

    /// Number of vertices in the whole graph.
    pub fn n_total(&self) -> usize {
        self.base.len()
    }

    /// Unknowns whose road has no neighbors at all.
    pub fn isolated(&self) -> Vec<usize> {
        let eps = self.pattern.epsilon();
        (0..self.dim())
            .filter(|&r| self.pattern.diag()[r] == eps)
            .map(|r| self.index_map()[r])
            .collect()
    }

    /// Full-length vector with `x_u` placed on the unobserved roads.
    pub fn merge(&self, x_u: &[f64]) -> Vec<f64> {
        let mut full = self.base.clone();
        for (&v, &x) in self.index_map().iter().zip(x_u) {
            full[v] = x;
        }
        full
    }

    pub fn observed_mask(&self) -> &[bool] {
        &self.observed_mask
    }
}

/// Conditions the model prior on the observed roads of `s`.
pub fn assemble_posterior(
    g: &RoadGraph,
    m: &Model,
    s: &PartialSnapshot,
) -> Result<PosteriorProblem> {
    m.check_graph(g)?;
    ensure_len("partial snapshot", g.n(), s.len())?;
    // Re-validated here because PartialSnapshot values may come from anywhere.
    if let Some((i, v)) = s.observed().find(|&(_, v)| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::Domain(format!(
            "observed density at vertex {i} is {v}"
        )));
    }
    let unobserved = s.unobserved();
    let pattern = subgraph_pattern(g, &unobserved, m.epsilon)?;
    let base: Vec<f64> = s.values().iter().map(|v| v.unwrap_or(0.0)).collect();
    let mut bias = Vec::with_capacity(pattern.dim());
    let mut neighbor_average = Vec::with_capacity(pattern.dim());
    for &i in pattern.vertices() {
        let (mass, count) = g
            .neighbors(i)
            .iter()
            .filter_map(|&j| s.get(j))
            .fold((0.0, 0usize), |(sum, n), y| (sum + y, n + 1));
        bias.push(m.beta[i] + m.eta * mass);
        neighbor_average.push(if count > 0 { mass / count as f64 } else { 0.0 });
    }
    Ok(PosteriorProblem {
        pattern,
        bias,
        eta: m.eta,
        base,
        observed_mask: s.values().iter().map(Option::is_some).collect(),
        neighbor_average,
    })
}

/// `βᵀx − (ηε/2) Σ xᵢ² − (η/2) Σ_E (xᵢ − xⱼ)²`, the prior exponent.
pub fn prior_log_density_unnormalized(g: &RoadGraph, m: &Model, x: &[f64]) -> Result<f64> {
    ensure_len("density vector", g.n(), x.len())?;
    ensure_len("model beta", g.n(), m.beta.len())?;
    let linear: f64 = m.beta.iter().zip(x).map(|(b, v)| b * v).sum();
    let field: f64 = x.iter().map(|v| v * v).sum();
    let smooth: f64 = g.edges().iter().map(|&(i, j)| (x[i] - x[j]).powi(2)).sum();
    Ok(linear - 0.5 * m.eta * m.epsilon * field - 0.5 * m.eta * smooth)
}

/// `bᵀx_u − (η/2) x_uᵀ A x_u`, the posterior exponent up to a constant.
pub fn posterior_log_density_unnormalized(p: &PosteriorProblem, x_u: &[f64]) -> Result<f64> {
    ensure_len("unobserved vector", p.dim(), x_u.len())?;
    let linear: f64 = p.bias.iter().zip(x_u).map(|(b, v)| b * v).sum();
    Ok(linear - 0.5 * p.eta * p.pattern.quadratic_form(x_u))
}
