//! Mean-field reconstruction of unobserved roads.
//!
//! For a Gaussian field the mean-field equations are exact: the fixed point of
//!
//! ```text
//! xᵢ = (βᵢ + η Σ_{j∈∂i} zⱼ) / (η Aᵢᵢ),   zⱼ = xⱼ if j unobserved, y°ⱼ otherwise
//! ```
//!
//! is the posterior mean `(1/η) A⁻¹ b`. Iterating it is a Jacobi or
//! Gauss-Seidel sweep on a strictly diagonally dominant system, which
//! converges from any starting point. Negative estimates are clamped to zero
//! only after the iteration has finished.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmrf::{assemble_posterior, Model, PartialSnapshot, PosteriorProblem};
use crate::graph::RoadGraph;

/// Dimension above which Jacobi sweeps are split across threads.
const PARALLEL_JACOBI_MIN: usize = 8192;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Jacobi,
    #[default]
    GaussSeidel,
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jacobi" => Ok(Scheme::Jacobi),
            "gauss_seidel" | "gauss-seidel" => Ok(Scheme::GaussSeidel),
            other => Err(Error::InvalidParameter(format!(
                "unknown scheme {other:?} (expected jacobi or gauss_seidel)"
            ))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Jacobi => "jacobi",
            Scheme::GaussSeidel => "gauss_seidel",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Largest per-coordinate change in a sweep at which iteration stops.
    pub tolerance: f64,
    /// Sweep cap; `None` means ten times the number of graph vertices.
    pub max_iterations: Option<usize>,
    pub scheme: Scheme,
    /// Start from observed-neighbor averages instead of zeros.
    pub warm_start: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tolerance: 1e-8,
            max_iterations: None,
            scheme: Scheme::GaussSeidel,
            warm_start: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.max_iterations == Some(0) {
            return Err(Error::InvalidParameter(
                "max_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn sweep_cap(&self, n_total: usize) -> usize {
        self.max_iterations.unwrap_or(10 * n_total.max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionResult {
    /// Full-length densities: clamped estimates on unobserved roads, observations elsewhere.
    pub estimates: Vec<f64>,
    /// Unclamped solution, aligned with `unobserved`.
    pub raw_estimates: Vec<f64>,
    /// Unobserved vertices in ascending order.
    pub unobserved: Vec<usize>,
    pub iterations_used: usize,
    /// Largest per-coordinate change in the final sweep.
    pub final_residual: f64,
    pub converged: bool,
    /// Unobserved vertices with no neighbors; their estimate is `βᵢ / (η ε)`.
    pub isolated: Vec<usize>,
}

impl ReconstructionResult {
    pub(crate) fn from_raw(
        p: &PosteriorProblem,
        raw: Vec<f64>,
        iterations_used: usize,
        final_residual: f64,
        converged: bool,
    ) -> Self {
        let clamped: Vec<f64> = raw.iter().map(|&x| clamp_density(x)).collect();
        ReconstructionResult {
            estimates: p.merge(&clamped),
            raw_estimates: raw,
            unobserved: p.index_map().to_vec(),
            iterations_used,
            final_residual,
            converged,
            isolated: p.isolated(),
        }
    }

    pub fn is_observed(&self, i: usize) -> bool {
        self.unobserved.binary_search(&i).is_err()
    }
}

/// Densities cannot be negative.
pub fn clamp_density(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        0.0
    }
}

/// Iterates the mean-field equations until the largest update falls below
/// `cfg.tolerance`. Exhausting the sweep budget yields `converged = false`
/// with the last iterate, never an error.
pub fn mean_field_solve(
    p: &PosteriorProblem,
    cfg: &SolverConfig,
    initial: Option<&[f64]>,
) -> Result<ReconstructionResult> {
    cfg.validate()?;
    let n = p.dim();
    if n == 0 {
        return Ok(ReconstructionResult::from_raw(p, Vec::new(), 0, 0.0, true));
    }
    let mut x = match initial {
        Some(init) => {
            crate::error::ensure_len("initial point", n, init.len())?;
            init.to_vec()
        }
        None if cfg.warm_start => p.neighbor_average.clone(),
        None => vec![0.0; n],
    };

    let eta = p.eta;
    let pattern = &p.pattern;
    let update = |r: usize, x: &[f64]| -> f64 {
        let coupled: f64 = pattern.row_neighbors(r).iter().map(|&s| x[s]).sum();
        (p.bias[r] + eta * coupled) / (eta * pattern.diag()[r])
    };

    let cap = cfg.sweep_cap(p.n_total());
    let mut next = vec![0.0; n];
    let mut delta = f64::INFINITY;
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < cap {
        sweeps += 1;
        delta = match cfg.scheme {
            Scheme::GaussSeidel => {
                let mut worst = 0.0f64;
                for r in 0..n {
                    let v = update(r, &x);
                    worst = worst.max((v - x[r]).abs());
                    x[r] = v;
                }
                worst
            }
            Scheme::Jacobi => {
                if n >= PARALLEL_JACOBI_MIN {
                    next.par_iter_mut()
                        .enumerate()
                        .for_each(|(r, slot)| *slot = update(r, &x));
                } else {
                    for (r, slot) in next.iter_mut().enumerate() {
                        *slot = update(r, &x);
                    }
                }
                let worst = x
                    .iter()
                    .zip(&next)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                std::mem::swap(&mut x, &mut next);
                worst
            }
        };
        if !delta.is_finite() {
            log::warn!("mean-field iteration diverged numerically at sweep {sweeps}");
            break;
        }
        if delta <= cfg.tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "mean-field iteration stopped after {sweeps} sweeps with update {delta:.3e} > {:.3e}",
            cfg.tolerance
        );
    }
    Ok(ReconstructionResult::from_raw(
        p, x, sweeps, delta, converged,
    ))
}

/// Posterior mean `(1/η) A⁻¹ b` by dense Cholesky. Meant for small problems
/// and as an independent check on [`mean_field_solve`].
pub fn direct_solve(p: &PosteriorProblem) -> Result<Vec<f64>> {
    if p.is_empty() {
        return Ok(Vec::new());
    }
    let a = p.pattern.to_dense() * p.eta;
    let chol = a
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { pivot: 0 })?;
    let b = nalgebra::DVector::from_column_slice(&p.bias);
    Ok(chol.solve(&b).iter().copied().collect())
}

/// Conditions on the observed roads, solves for the rest and merges.
pub fn reconstruct_snapshot(
    g: &RoadGraph,
    m: &Model,
    s: &PartialSnapshot,
    cfg: &SolverConfig,
) -> Result<ReconstructionResult> {
    let problem = assemble_posterior(g, m, s)?;
    let result = mean_field_solve(&problem, cfg, None)?;
    if !result.isolated.is_empty() {
        log::info!(
            "{} unobserved road(s) have no neighbors; their estimate is the prior ratio beta/(eta*epsilon)",
            result.isolated.len()
        );
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmrf::Snapshot;
    use crate::graph::RoadId;

    fn toy() -> RoadGraph {
        RoadGraph::from_pairs([
            (1, 2),
            (1, 3),
            (1, 4),
            (2, 3),
            (2, 4),
            (3, 4),
            (4, 5),
            (4, 6),
            (5, 6),
        ])
        .unwrap()
    }

    fn hub_problem() -> (RoadGraph, PosteriorProblem) {
        let g = toy();
        let m = Model::new(&g, vec![0.0; 6], 2.0, 1e-4, 0.0).unwrap();
        let hub = g.index_of(&RoadId::from(4)).unwrap();
        let mut values = vec![
            Some(0.1),
            Some(0.1),
            Some(0.1),
            Some(0.2),
            Some(0.2),
            Some(0.2),
        ];
        for (i, v) in values.iter_mut().enumerate() {
            if g.label(i).as_str() == "4" {
                *v = None;
            }
        }
        assert!(values[hub].is_none());
        let p = assemble_posterior(&g, &m, &PartialSnapshot::new(values).unwrap()).unwrap();
        (g, p)
    }

    #[test]
    fn scalar_fixed_point_in_one_sweep() {
        let (_, p) = hub_problem();
        let cfg = SolverConfig {
            max_iterations: Some(1),
            ..Default::default()
        };
        let r = mean_field_solve(&p, &cfg, None).unwrap();
        assert!((r.raw_estimates[0] - 1.4 / 10.0002).abs() < 1e-15);
        assert!((r.raw_estimates[0] - 0.139997).abs() < 1e-6);

        let r = mean_field_solve(&p, &SolverConfig::default(), None).unwrap();
        assert!(r.converged);
        assert!((r.raw_estimates[0] - 0.139997).abs() < 1e-6);
    }

    #[test]
    fn negative_solution_is_clamped_but_kept_raw() {
        let g = RoadGraph::from_pairs([(1, 2)]).unwrap();
        let m = Model::new(&g, vec![-5.0, 0.0], 1.0, 1e-4, 0.0).unwrap();
        let s = PartialSnapshot::new(vec![None, Some(0.0)]).unwrap();
        let r = reconstruct_snapshot(&g, &m, &s, &SolverConfig::default()).unwrap();
        assert!(r.raw_estimates[0] < 0.0);
        assert_eq!(r.estimates[0], 0.0);
        assert_eq!(r.estimates[1], 0.0);
    }

    #[test]
    fn fully_observed_needs_no_iterations() {
        let g = toy();
        let m = Model::new(&g, vec![1.0; 6], 1.0, 1e-4, 0.0).unwrap();
        let truth = Snapshot(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let s = PartialSnapshot::fully_observed(&truth).unwrap();
        let r = reconstruct_snapshot(&g, &m, &s, &SolverConfig::default()).unwrap();
        assert_eq!(r.estimates, truth.0);
        assert_eq!(r.iterations_used, 0);
        assert!(r.converged);
    }

    #[test]
    fn isolated_vertex_gets_prior_ratio_and_is_flagged() {
        let g = RoadGraph::with_vertices(["lonely"], [("a", "b")]).unwrap();
        let lonely = g.index_of(&"lonely".into()).unwrap();
        let mut beta = vec![0.0; 3];
        beta[lonely] = 2e-5;
        let m = Model::new(&g, beta, 2.0, 1e-4, 0.0).unwrap();
        let mut values = vec![Some(0.1); 3];
        values[lonely] = None;
        let r = reconstruct_snapshot(
            &g,
            &m,
            &PartialSnapshot::new(values).unwrap(),
            &SolverConfig::default(),
        )
        .unwrap();
        assert_eq!(r.isolated, vec![lonely]);
        assert!((r.estimates[lonely] - 2e-5 / (2.0 * 1e-4)).abs() < 1e-12);

        // With β = 0 the direct solve is exactly zero.
        let m = Model::new(&g, vec![0.0; 3], 2.0, 1e-4, 0.0).unwrap();
        let mut values = vec![Some(0.1); 3];
        values[lonely] = None;
        let p = assemble_posterior(&g, &m, &PartialSnapshot::new(values).unwrap()).unwrap();
        assert_eq!(direct_solve(&p).unwrap(), vec![0.0]);
    }

    #[test]
    fn pair_matches_closed_form() {
        let g = toy();
        let m = Model::new(&g, vec![0.0; 6], 1.0, 1e-4, 0.0).unwrap();
        let s = PartialSnapshot::new(vec![Some(0.0), Some(0.0), Some(0.0), Some(0.3), None, None])
            .unwrap();
        let p = assemble_posterior(&g, &m, &s).unwrap();
        // [[d, -1], [-1, d]] x = (0.3, 0.3)  ⇒  x = 0.3 / (d - 1) on both.
        let d = 2.0001;
        let closed = 0.3 / (d - 1.0);
        let direct = direct_solve(&p).unwrap();
        for x in &direct {
            assert!((x - closed).abs() < 1e-12);
        }
        for scheme in [Scheme::Jacobi, Scheme::GaussSeidel] {
            let cfg = SolverConfig {
                scheme,
                tolerance: 1e-13,
                ..Default::default()
            };
            let r = mean_field_solve(&p, &cfg, None).unwrap();
            assert!(r.converged);
            for x in &r.raw_estimates {
                assert!((x - closed).abs() < 1e-11, "{scheme}: {x}");
            }
        }
    }

    #[test]
    fn non_convergence_is_reported() {
        let g = RoadGraph::from_pairs([(1, 2), (2, 3), (3, 4)]).unwrap();
        let m = Model::new(&g, vec![0.01; 4], 1.0, 1e-4, 0.0).unwrap();
        let s = PartialSnapshot::new(vec![None; 4]).unwrap();
        let cfg = SolverConfig {
            max_iterations: Some(3),
            ..Default::default()
        };
        let r = reconstruct_snapshot(&g, &m, &s, &cfg).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations_used, 3);
        assert!(r.final_residual > cfg.tolerance);
    }

    #[test]
    fn warm_start_and_explicit_start_reach_same_point() {
        let (_, p) = hub_problem();
        let warm = SolverConfig {
            warm_start: true,
            ..Default::default()
        };
        let a = mean_field_solve(&p, &warm, None).unwrap();
        let b = mean_field_solve(&p, &SolverConfig::default(), Some(&[7.0])).unwrap();
        assert!((a.raw_estimates[0] - b.raw_estimates[0]).abs() < 1e-8);
        assert!(mean_field_solve(&p, &SolverConfig::default(), Some(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = SolverConfig {
            tolerance: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SolverConfig {
            max_iterations: Some(0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("jacobi".parse::<Scheme>().unwrap(), Scheme::Jacobi);
        assert!("sor".parse::<Scheme>().is_err());
    }
}
