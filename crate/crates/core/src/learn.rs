//! Maximum-likelihood estimation of β and η from complete snapshots.
//!
//! With the ridge penalty the objective is
//!
//! ```text
//! L(β, η) = βᵀ⟨x⟩ − (η/2)⟨xᵀCx⟩ + (N/2) ln η − (1/2η) βᵀC⁻¹β − (λ/2)(η² + |β|²)
//! ```
//!
//! up to terms independent of (β, η). It is jointly concave, so any
//! stationary point is the maximizer. At λ = 0 the stationary point has a
//! closed form, `β = η C⟨x⟩` and `η = N / ⟨(x − ⟨x⟩)ᵀ C (x − ⟨x⟩)⟩`, which is
//! used as the starting point for every fit.
//!
//! C is factorized once per fit; every `C⁻¹β` is a pair of triangular solves.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::gmrf::{Model, Snapshot};
use crate::graph::{precision_pattern, PrecisionPattern, RoadGraph};
use crate::sparse::{EnvelopeCholesky, EnvelopeLayout};

/// Above this `ln η` the data are treated as fluctuation-free.
pub const LN_ETA_CAP: f64 = 40.0;

/// Sample moments of a set of complete snapshots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    pub mean: Vec<f64>,
    pub second_moment: Vec<f64>,
    /// `⟨xᵢxⱼ⟩` for each edge, in `RoadGraph::edges` order.
    pub edge_moment: Vec<f64>,
    pub count: usize,
}

pub fn compute_stats(snapshots: &[Snapshot], g: &RoadGraph) -> Result<SufficientStats> {
    if snapshots.is_empty() {
        return Err(Error::InvalidParameter(
            "at least one snapshot is required".into(),
        ));
    }
    for s in snapshots {
        ensure_len("snapshot", g.n(), s.len())?;
        if let Some(v) = s.values().iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("snapshot contains {v}")));
        }
    }
    let k = snapshots.len() as f64;
    // Each entry sums over snapshots in order, so results do not depend on the thread count.
    let mean = (0..g.n())
        .into_par_iter()
        .map(|i| snapshots.iter().map(|s| s.0[i]).sum::<f64>() / k)
        .collect();
    let second_moment = (0..g.n())
        .into_par_iter()
        .map(|i| snapshots.iter().map(|s| s.0[i] * s.0[i]).sum::<f64>() / k)
        .collect();
    let edge_moment = g
        .edges()
        .par_iter()
        .map(|&(i, j)| snapshots.iter().map(|s| s.0[i] * s.0[j]).sum::<f64>() / k)
        .collect();
    Ok(SufficientStats {
        mean,
        second_moment,
        edge_moment,
        count: snapshots.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnConfig {
    pub lambda: f64,
    /// Initial fraction of the Newton step tried at each iteration; halved
    /// until the objective does not decrease.
    pub step_size: f64,
    pub max_steps: usize,
    /// Stop once the ∞-norm of the (β, η) gradient is below this.
    pub grad_tolerance: f64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            lambda: 0.0,
            step_size: 1.0,
            max_steps: 500,
            grad_tolerance: 1e-8,
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidParameter("step size must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidParameter(
                "max_steps must be at least 1".into(),
            ));
        }
        if !(self.grad_tolerance > 0.0) {
            return Err(Error::InvalidParameter(
                "gradient tolerance must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub beta: Vec<f64>,
    pub eta: f64,
}

impl Gradient {
    pub fn norm_inf(&self) -> f64 {
        self.beta
            .iter()
            .fold(self.eta.abs(), |acc, g| acc.max(g.abs()))
    }
}

/// Regularized log-likelihood of one data set on one graph, with C factorized.
pub struct Likelihood<'a> {
    stats: &'a SufficientStats,
    pattern: PrecisionPattern,
    layout: EnvelopeLayout,
    c_factor: EnvelopeCholesky,
    /// `⟨xᵀCx⟩`
    data_quadratic: f64,
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "eta must be positive, got {eta}"
        )))
    }
}

impl<'a> Likelihood<'a> {
    pub fn new(stats: &'a SufficientStats, g: &RoadGraph, epsilon: f64) -> Result<Self> {
        ensure_len("stats mean", g.n(), stats.mean.len())?;
        ensure_len("stats second moment", g.n(), stats.second_moment.len())?;
        ensure_len("stats edge moment", g.edge_count(), stats.edge_moment.len())?;
        let pattern = precision_pattern(g, epsilon)?;
        let layout = EnvelopeLayout::new(&pattern);
        let c_factor = layout.factorize(pattern.diag(), -1.0)?;
        let diag_part: f64 = pattern
            .diag()
            .iter()
            .zip(&stats.second_moment)
            .map(|(d, m)| d * m)
            .sum();
        let edge_part: f64 = stats.edge_moment.iter().sum();
        Ok(Likelihood {
            stats,
            pattern,
            layout,
            c_factor,
            data_quadratic: diag_part - 2.0 * edge_part,
        })
    }

    pub fn n(&self) -> usize {
        self.pattern.dim()
    }

    pub fn epsilon(&self) -> f64 {
        self.pattern.epsilon()
    }

    pub fn pattern(&self) -> &PrecisionPattern {
        &self.pattern
    }

    /// `C⁻¹ v` through the stored factorization.
    pub fn solve_c(&self, v: &[f64]) -> Vec<f64> {
        self.c_factor.solve(v)
    }

    /// `⟨(x − ⟨x⟩)ᵀ C (x − ⟨x⟩)⟩`, the total fluctuation seen by the model.
    pub fn data_spread(&self) -> f64 {
        self.data_quadratic - self.pattern.quadratic_form(&self.stats.mean)
    }

    pub fn objective(&self, beta: &[f64], eta: f64, lambda: f64) -> Result<f64> {
        check_eta(eta)?;
        ensure_len("beta", self.n(), beta.len())?;
        let u = self.solve_c(beta);
        Ok(self.objective_with(beta, &u, eta, lambda))
    }

    fn objective_with(&self, beta: &[f64], c_inv_beta: &[f64], eta: f64, lambda: f64) -> f64 {
        let linear = dot(beta, &self.stats.mean);
        let beta_c_beta = dot(beta, c_inv_beta);
        let ridge = eta * eta + dot(beta, beta);
        linear - 0.5 * eta * self.data_quadratic + 0.5 * self.n() as f64 * eta.ln()
            - beta_c_beta / (2.0 * eta)
            - 0.5 * lambda * ridge
    }

    pub fn gradient(&self, beta: &[f64], eta: f64, lambda: f64) -> Result<Gradient> {
        check_eta(eta)?;
        ensure_len("beta", self.n(), beta.len())?;
        let u = self.solve_c(beta);
        Ok(self.gradient_with(beta, &u, eta, lambda))
    }

    fn gradient_with(&self, beta: &[f64], c_inv_beta: &[f64], eta: f64, lambda: f64) -> Gradient {
        let grad_beta = self
            .stats
            .mean
            .iter()
            .zip(c_inv_beta)
            .zip(beta)
            .map(|((m, u), b)| m - u / eta - lambda * b)
            .collect();
        let grad_eta = -0.5 * self.data_quadratic
            + self.n() as f64 / (2.0 * eta)
            + dot(beta, c_inv_beta) / (2.0 * eta * eta)
            - lambda * eta;
        Gradient {
            beta: grad_beta,
            eta: grad_eta,
        }
    }

    /// `‖⟨x⟩ − (1/η) C⁻¹β‖∞`, zero exactly at the λ = 0 stationary β.
    pub fn mean_mismatch(&self, beta: &[f64], eta: f64) -> f64 {
        let u = self.solve_c(beta);
        self.stats
            .mean
            .iter()
            .zip(&u)
            .map(|(m, u)| (m - u / eta).abs())
            .fold(0.0, f64::max)
    }

    /// Closed-form λ = 0 maximizer; for λ > 0 eta is additionally limited to
    /// the scale where the penalty takes over.
    pub fn starting_point(&self, lambda: f64) -> (Vec<f64>, f64) {
        let n = self.n() as f64;
        let mut eta = n / self.data_spread().max(f64::MIN_POSITIVE);
        if lambda > 0.0 {
            eta = eta.min((n / (2.0 * lambda)).sqrt());
        }
        let c_mean = self.pattern.mul_vec(&self.stats.mean);
        let beta = c_mean.iter().map(|v| eta * v).collect();
        (beta, eta)
    }

    /// Solves `(-Hessian) d = g` for the ascent direction in (β, η).
    fn newton_direction(
        &self,
        beta_c_inv: &[f64],
        grad: &Gradient,
        eta: f64,
        lambda: f64,
    ) -> Result<(Vec<f64>, f64)> {
        let n = self.n() as f64;
        // The β block of -H is M = C⁻¹/η + λI, so M⁻¹ v = (I + ληC)⁻¹ (ηCv).
        let shifted = if lambda > 0.0 {
            let diag: Vec<f64> = self
                .pattern
                .diag()
                .iter()
                .map(|d| 1.0 + lambda * eta * d)
                .collect();
            Some(self.layout.factorize(&diag, -lambda * eta)?)
        } else {
            None
        };
        let apply_m_inv = |v: &[f64]| -> Vec<f64> {
            let scaled: Vec<f64> = self.pattern.mul_vec(v).iter().map(|x| eta * x).collect();
            match &shifted {
                Some(f) => f.solve(&scaled),
                None => scaled,
            }
        };
        let cross: Vec<f64> = beta_c_inv.iter().map(|u| u / (eta * eta)).collect();
        let q = n / (2.0 * eta * eta) + dot(&cross, &self.pattern.mul_vec(&cross)) * eta + lambda;
        let m_inv_grad = apply_m_inv(&grad.beta);
        let m_inv_cross = apply_m_inv(&cross);
        let schur = q - dot(&cross, &m_inv_cross);
        if !(schur > 0.0) || !schur.is_finite() {
            return Ok((grad.beta.clone(), grad.eta));
        }
        let d_eta = (grad.eta + dot(&cross, &m_inv_grad)) / schur;
        let d_beta = m_inv_grad
            .iter()
            .zip(&m_inv_cross)
            .map(|(a, b)| a + d_eta * b)
            .collect();
        Ok((d_beta, d_eta))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `L(β, η)` as defined in the module docs.
pub fn objective(
    stats: &SufficientStats,
    g: &RoadGraph,
    beta: &[f64],
    eta: f64,
    epsilon: f64,
    lambda: f64,
) -> Result<f64> {
    Likelihood::new(stats, g, epsilon)?.objective(beta, eta, lambda)
}

/// Ascent gradient of [`objective`].
pub fn gradient(
    stats: &SufficientStats,
    g: &RoadGraph,
    beta: &[f64],
    eta: f64,
    epsilon: f64,
    lambda: f64,
) -> Result<Gradient> {
    Likelihood::new(stats, g, epsilon)?.gradient(beta, eta, lambda)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub final_objective: f64,
    pub grad_norm: f64,
    pub steps: usize,
    /// Objective after the start and after every accepted step.
    pub objective_trace: Vec<f64>,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug)]
pub struct Fit {
    pub model: Model,
    pub report: TrainingReport,
}

pub fn fit(snapshots: &[Snapshot], g: &RoadGraph, epsilon: f64, cfg: &LearnConfig) -> Result<Fit> {
    let stats = compute_stats(snapshots, g)?;
    fit_stats(&stats, g, epsilon, cfg)
}

/// Damped Newton ascent in (β, ln η) from the closed-form starting point.
///
/// Each step solves the Newton system of the concave objective and tries the
/// full step first, halving it until the objective does not decrease. Near
/// the optimum, where objective differences drop below rounding, a step is
/// also accepted when it shrinks the gradient without losing more than
/// rounding noise.
pub fn fit_stats(
    stats: &SufficientStats,
    g: &RoadGraph,
    epsilon: f64,
    cfg: &LearnConfig,
) -> Result<Fit> {
    cfg.validate()?;
    let started = Instant::now();
    let lik = Likelihood::new(stats, g, epsilon)?;
    let lambda = cfg.lambda;
    let (mut beta, mut eta) = lik.starting_point(lambda);

    let degenerate = |ln_eta: f64| -> Result<Fit> {
        let capped = LN_ETA_CAP.exp();
        let beta: Vec<f64> = lik
            .pattern()
            .mul_vec(&stats.mean)
            .iter()
            .map(|v| capped * v)
            .collect();
        Err(Error::DegenerateData {
            ln_eta,
            best: Box::new(Model::new(g, beta, capped, epsilon, lambda)?),
        })
    };
    if !(eta.ln() < LN_ETA_CAP) {
        return degenerate(eta.ln());
    }

    let mut c_inv_beta = lik.solve_c(&beta);
    let mut value = lik.objective_with(&beta, &c_inv_beta, eta, lambda);
    let mut grad = lik.gradient_with(&beta, &c_inv_beta, eta, lambda);
    let mut trace = vec![value];
    let mut steps = 0;

    while grad.norm_inf() >= cfg.grad_tolerance {
        if steps == cfg.max_steps {
            return Err(Error::NonConvergence {
                steps,
                grad_norm: grad.norm_inf(),
                best: Box::new(Model::new(g, beta, eta, epsilon, lambda)?),
            });
        }
        let (d_beta, d_eta) = lik.newton_direction(&c_inv_beta, &grad, eta, lambda)?;
        let d_log_eta = d_eta / eta;
        // Keep a single step within a factor e^2 in eta.
        let mut t = cfg
            .step_size
            .min(2.0 / d_log_eta.abs().max(f64::MIN_POSITIVE));
        let noise = 64.0 * f64::EPSILON * (1.0 + value.abs());
        let mut accepted = None;
        for _ in 0..64 {
            let cand_ln_eta = eta.ln() + t * d_log_eta;
            if cand_ln_eta > LN_ETA_CAP {
                return degenerate(cand_ln_eta);
            }
            let cand_eta = cand_ln_eta.exp();
            let cand_beta: Vec<f64> = beta.iter().zip(&d_beta).map(|(b, d)| b + t * d).collect();
            let cand_u = lik.solve_c(&cand_beta);
            let cand_value = lik.objective_with(&cand_beta, &cand_u, cand_eta, lambda);
            if cand_value >= value {
                accepted = Some((cand_beta, cand_eta, cand_u, cand_value));
                break;
            }
            if cand_value >= value - noise {
                let cand_grad = lik.gradient_with(&cand_beta, &cand_u, cand_eta, lambda);
                if cand_grad.norm_inf() < grad.norm_inf() {
                    accepted = Some((cand_beta, cand_eta, cand_u, cand_value));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((b, e, u, v)) = accepted else {
            return Err(Error::NonConvergence {
                steps,
                grad_norm: grad.norm_inf(),
                best: Box::new(Model::new(g, beta, eta, epsilon, lambda)?),
            });
        };
        beta = b;
        eta = e;
        c_inv_beta = u;
        value = v;
        grad = lik.gradient_with(&beta, &c_inv_beta, eta, lambda);
        trace.push(value);
        steps += 1;
        log::debug!(
            "ascent step {steps}: objective {value:.12e}, gradient {:.3e}, eta {eta:.6e}",
            grad.norm_inf()
        );
    }

    let report = TrainingReport {
        final_objective: value,
        grad_norm: grad.norm_inf(),
        steps,
        objective_trace: trace,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(Fit {
        model: Model::new(g, beta, eta, epsilon, lambda)?,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single() -> RoadGraph {
        RoadGraph::with_vertices(["a"], Vec::<(&str, &str)>::new()).unwrap()
    }

    #[test]
    fn stats_single_snapshot_on_edge() {
        let g = RoadGraph::from_pairs([(1, 2)]).unwrap();
        let s = compute_stats(&[Snapshot(vec![1.0, 2.0])], &g).unwrap();
        assert_eq!(s.mean, vec![1.0, 2.0]);
        assert_eq!(s.second_moment, vec![1.0, 4.0]);
        assert_eq!(s.edge_moment, vec![2.0]);
        assert_eq!(s.count, 1);
    }

    #[test]
    fn stats_two_snapshots() {
        let g = RoadGraph::from_pairs([(1, 2)]).unwrap();
        let snaps = [Snapshot(vec![0.0, 0.0]), Snapshot(vec![2.0, 2.0])];
        let s = compute_stats(&snaps, &g).unwrap();
        assert_eq!(s.mean, vec![1.0, 1.0]);
        assert_eq!(s.second_moment, vec![2.0, 2.0]);
        assert_eq!(s.edge_moment, vec![2.0]);
        let rev = [snaps[1].clone(), snaps[0].clone()];
        assert_eq!(compute_stats(&rev, &g).unwrap(), s);
    }

    #[test]
    fn stats_errors() {
        let g = RoadGraph::from_pairs([(1, 2)]).unwrap();
        assert!(compute_stats(&[], &g).is_err());
        assert!(matches!(
            compute_stats(&[Snapshot(vec![1.0])], &g),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn scalar_objective_closed_form() {
        let g = single();
        let s = compute_stats(&[Snapshot(vec![2.0])], &g).unwrap();
        for &(beta, eta) in &[(0.5, 0.3), (1.0, 2.0), (-3.0, 0.7)] {
            let expected = 2.0 * beta - 2.0 * eta + 0.5 * f64::ln(eta) - beta * beta / (2.0 * eta);
            let got = objective(&s, &g, &[beta], eta, 1.0, 0.0).unwrap();
            assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        }
        // d/dβ = 2 − β/η vanishes on β = 2η.
        let grad = gradient(&s, &g, &[3.0], 1.5, 1.0, 0.0).unwrap();
        assert!(grad.beta[0].abs() < 1e-15);
    }

    #[test]
    fn beta_zero_gradient_is_the_mean() {
        let g = RoadGraph::from_pairs([(1, 2), (2, 3)]).unwrap();
        let s = compute_stats(
            &[Snapshot(vec![0.1, 0.4, 0.2]), Snapshot(vec![0.3, 0.2, 0.0])],
            &g,
        )
        .unwrap();
        let grad = gradient(&s, &g, &[0.0; 3], 2.0, 1e-4, 0.7).unwrap();
        assert_eq!(grad.beta, s.mean);

        let lik = Likelihood::new(&s, &g, 1e-4).unwrap();
        let eta = 2.0;
        let lambda = 0.3;
        let quad = lik.data_quadratic;
        let expected = -0.5 * eta * quad + 1.5 * eta.ln() - 0.5 * lambda * eta * eta;
        assert!((lik.objective(&[0.0; 3], eta, lambda).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn penalty_lowers_objective() {
        let g = RoadGraph::from_pairs([(1, 2), (2, 3)]).unwrap();
        let s = compute_stats(
            &[Snapshot(vec![0.1, 0.4, 0.2]), Snapshot(vec![0.3, 0.2, 0.0])],
            &g,
        )
        .unwrap();
        let lik = Likelihood::new(&s, &g, 1e-4).unwrap();
        let beta = [0.2, -0.1, 0.05];
        let mut last = f64::INFINITY;
        for lambda in [0.0, 0.1, 1.0, 10.0] {
            let v = lik.objective(&beta, 1.3, lambda).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn eta_must_be_positive() {
        let g = single();
        let s = compute_stats(&[Snapshot(vec![2.0])], &g).unwrap();
        assert!(objective(&s, &g, &[0.0], 0.0, 1.0, 0.0).is_err());
        assert!(gradient(&s, &g, &[0.0], -1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn constant_data_is_degenerate_but_keeps_mean_ratio() {
        let g = single();
        let snaps = vec![Snapshot(vec![2.0]); 5];
        let err = fit(&snaps, &g, 1.0, &LearnConfig::default()).unwrap_err();
        let Error::DegenerateData { best, .. } = err else {
            panic!("expected degeneracy, got {err}");
        };
        assert!((best.beta[0] / best.eta - 2.0).abs() < 1e-12);
    }

    #[test]
    fn large_penalty_shrinks_toward_zero() {
        let g = RoadGraph::from_pairs([(1, 2), (2, 3), (3, 4)]).unwrap();
        let snaps = vec![
            Snapshot(vec![0.1, 0.3, 0.2, 0.4]),
            Snapshot(vec![0.2, 0.1, 0.3, 0.1]),
            Snapshot(vec![0.5, 0.2, 0.1, 0.2]),
        ];
        let free = fit(&snaps, &g, 1e-4, &LearnConfig::default())
            .unwrap()
            .model;
        let cfg = LearnConfig {
            lambda: 1e6,
            ..Default::default()
        };
        let tight = fit(&snaps, &g, 1e-4, &cfg).unwrap().model;
        let norm = |b: &[f64]| b.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(tight.eta < 0.01 * free.eta, "{} vs {}", tight.eta, free.eta);
        assert!(norm(&tight.beta) < 1e-3 * norm(&free.beta));
        assert!(tight.eta > 0.0);
    }

    #[test]
    fn non_convergence_carries_best_parameters() {
        let g = RoadGraph::from_pairs([(1, 2), (2, 3)]).unwrap();
        let snaps = vec![Snapshot(vec![0.1, 0.4, 0.2]), Snapshot(vec![0.3, 0.2, 0.0])];
        let cfg = LearnConfig {
            lambda: 5.0,
            max_steps: 1,
            grad_tolerance: 1e-14,
            ..Default::default()
        };
        match fit(&snaps, &g, 1e-4, &cfg) {
            Err(Error::NonConvergence {
                best, grad_norm, ..
            }) => {
                assert_eq!(best.beta.len(), 3);
                assert!(grad_norm > 0.0);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let bad = LearnConfig {
            lambda: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = LearnConfig {
            max_steps: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
