//! Leave-one-out evaluation with repeated random masking.
//!
//! For each held-out snapshot `m` the model is refitted on the other `K − 1`
//! snapshots (once per λ), then `trials_per_snapshot` random masks are drawn at
//! each masking probability `p`. A trial's error is the mean absolute error over
//! the hidden roads; `[MAE]_m` averages the trials, and the reported MAE
//! averages `[MAE]_m` over all folds.
//!
//! Masks depend on `(seed, m, p index, trial)` only, so every λ (and the
//! constant-mean baseline) is scored on identical masks.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::mask_indices;
use crate::error::{ensure_len, Error, Result};
use crate::gmrf::{assemble_posterior, Model, PartialSnapshot, Snapshot};
use crate::graph::RoadGraph;
use crate::learn::{compute_stats, fit_stats, LearnConfig};
use crate::reconstruct::{clamp_density, mean_field_solve, ReconstructionResult, SolverConfig};
use crate::seeds::stream;

/// Redraw budget per trial when a mask hides nothing.
const MAX_REDRAWS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPlan {
    pub p_values: Vec<f64>,
    pub lambda_values: Vec<f64>,
    pub trials_per_snapshot: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub solver: SolverConfig,
    pub learn: LearnConfig,
}

impl Default for EvalPlan {
    fn default() -> Self {
        EvalPlan {
            p_values: vec![0.5, 0.7, 0.9],
            lambda_values: vec![0.0],
            trials_per_snapshot: 500,
            seed: 0,
            epsilon: 1e-4,
            solver: SolverConfig::default(),
            learn: LearnConfig::default(),
        }
    }
}

impl EvalPlan {
    pub fn validate(&self) -> Result<()> {
        if self.trials_per_snapshot == 0 {
            return Err(Error::InvalidParameter("trials must be at least 1".into()));
        }
        if self.p_values.is_empty() || self.lambda_values.is_empty() {
            return Err(Error::InvalidParameter(
                "at least one p and one lambda are required".into(),
            ));
        }
        if let Some(p) = self.p_values.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(Error::InvalidParameter(format!(
                "masking probability {p} must lie in (0, 1]; p = 0 never hides a road"
            )));
        }
        if let Some(l) = self.lambda_values.iter().find(|l| !(**l >= 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "lambda {l} must be nonnegative"
            )));
        }
        self.solver.validate()?;
        self.learn.validate()
    }
}

/// `[0, e^lo, …, e^hi]` with `count` log-spaced points after the zero.
pub fn lambda_grid(ln_min: f64, ln_max: f64, count: usize) -> Vec<f64> {
    let mut grid = vec![0.0];
    match count {
        0 => {}
        1 => grid.push(ln_min.exp()),
        _ => grid.extend((0..count).map(|i| {
            let t = i as f64 / (count - 1) as f64;
            (ln_min + t * (ln_max - ln_min)).exp()
        })),
    }
    grid
}

/// Mean absolute error over the hidden roads.
pub fn mae(truth: &Snapshot, result: &ReconstructionResult, unobserved: &[usize]) -> Result<f64> {
    mae_values(&truth.0, &result.estimates, unobserved)
}

pub fn mae_values(truth: &[f64], estimates: &[f64], unobserved: &[usize]) -> Result<f64> {
    if unobserved.is_empty() {
        return Err(Error::UndefinedMetric(
            "MAE needs at least one unobserved road".into(),
        ));
    }
    ensure_len("estimates", truth.len(), estimates.len())?;
    if let Some(&i) = unobserved.iter().find(|&&i| i >= truth.len()) {
        return Err(Error::InvalidParameter(format!(
            "road index {i} out of range"
        )));
    }
    let total: f64 = unobserved
        .iter()
        .map(|&i| (estimates[i] - truth[i]).abs())
        .sum();
    Ok(total / unobserved.len() as f64)
}

/// Predicts every hidden road by its training mean.
pub fn baseline_constant_mean(
    train: &[Snapshot],
    s: &PartialSnapshot,
) -> Result<ReconstructionResult> {
    if train.is_empty() {
        return Err(Error::InvalidParameter("training set is empty".into()));
    }
    for t in train {
        ensure_len("training snapshot", s.len(), t.len())?;
    }
    let k = train.len() as f64;
    let mean: Vec<f64> = (0..s.len())
        .map(|i| train.iter().map(|t| t.0[i]).sum::<f64>() / k)
        .collect();
    Ok(baseline_from_mean(&mean, s))
}

fn baseline_from_mean(mean: &[f64], s: &PartialSnapshot) -> ReconstructionResult {
    let unobserved = s.unobserved();
    let raw: Vec<f64> = unobserved.iter().map(|&i| mean[i]).collect();
    let estimates = s
        .values()
        .iter()
        .zip(mean)
        .map(|(v, m)| v.unwrap_or_else(|| clamp_density(*m)))
        .collect();
    ReconstructionResult {
        estimates,
        raw_estimates: raw,
        unobserved,
        iterations_used: 0,
        final_residual: 0.0,
        converged: true,
        isolated: Vec::new(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub p: f64,
    pub lambda: f64,
    /// Average of `per_snapshot`.
    pub mae: f64,
    /// `[MAE]_m` for each held-out snapshot.
    pub per_snapshot: Vec<f64>,
    /// Standard deviation of single-trial MAEs over all folds.
    pub trial_std: f64,
    /// Constant-training-mean predictor on the same masks.
    pub baseline_mae: f64,
    pub converged_trials: usize,
    pub total_trials: usize,
    pub convergence_rate: f64,
    /// Folds whose fit hit the eta cap (no fluctuation in the training data).
    pub degenerate_fits: usize,
    /// Folds whose fit stopped before reaching the gradient tolerance.
    pub unconverged_fits: usize,
}

impl CellReport {
    pub fn fully_converged(&self) -> bool {
        self.converged_trials == self.total_trials
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CellTiming {
    pub p: f64,
    pub lambda: f64,
    pub mean_solve_ms: f64,
    pub max_solve_ms: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub folds: usize,
    pub trials_per_snapshot: usize,
    /// Masks redrawn because they hid no road.
    pub redraws: usize,
    /// Ordered by λ, then p, following the plan.
    pub cells: Vec<CellReport>,
    /// Wall-clock statistics; excluded from equality and serialization.
    #[serde(skip)]
    pub timing: Vec<CellTiming>,
}

impl PartialEq for EvalReport {
    fn eq(&self, other: &Self) -> bool {
        self.folds == other.folds
            && self.trials_per_snapshot == other.trials_per_snapshot
            && self.redraws == other.redraws
            && self.cells == other.cells
    }
}

impl EvalReport {
    pub fn cell(&self, p: f64, lambda: f64) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.p == p && c.lambda == lambda)
    }

    /// Cells where some solve did not converge.
    pub fn flagged(&self) -> impl Iterator<Item = &CellReport> {
        self.cells.iter().filter(|c| !c.fully_converged())
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>12} {:>6} {:>12} {:>12} {:>12} {:>10} {:>6}",
            "lambda", "p", "mae", "trial_std", "baseline", "converged", "degen"
        );
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{:>12.6e} {:>6.3} {:>12.6e} {:>12.6e} {:>12.6e} {:>9.1}% {:>6}{}",
                c.lambda,
                c.p,
                c.mae,
                c.trial_std,
                c.baseline_mae,
                100.0 * c.convergence_rate,
                c.degenerate_fits,
                if c.fully_converged() { "" } else { "  !" }
            );
        }
        let _ = writeln!(
            out,
            "{} folds x {} trials per snapshot, {} redrawn masks",
            self.folds, self.trials_per_snapshot, self.redraws
        );
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `lambda,p,mae` rows for plotting MAE against λ.
    pub fn to_curve_csv(&self) -> String {
        let mut out = String::from("lambda,p,mae\n");
        for c in &self.cells {
            let _ = writeln!(out, "{},{},{}", c.lambda, c.p, c.mae);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct FoldModel {
    pub model: Model,
    pub degenerate: bool,
    pub converged: bool,
}

/// Fitted models keyed by `(fold, λ, data fingerprint)`.
#[derive(Default)]
pub struct ModelCache {
    entries: HashMap<(usize, u64, String), FoldModel>,
}

impl ModelCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, fold: usize, lambda: f64, data: &str) -> Option<&FoldModel> {
        self.entries.get(&(fold, lambda.to_bits(), data.to_owned()))
    }

    fn fill(
        &mut self,
        snapshots: &[Snapshot],
        g: &RoadGraph,
        plan: &EvalPlan,
        data: &str,
    ) -> Result<()> {
        let missing: Vec<(usize, f64)> = (0..snapshots.len())
            .flat_map(|m| plan.lambda_values.iter().map(move |&l| (m, l)))
            .filter(|&(m, l)| self.get(m, l, data).is_none())
            .collect();
        let fitted: Vec<Result<FoldModel>> = missing
            .par_iter()
            .map(|&(m, lambda)| fit_fold(snapshots, g, plan, m, lambda))
            .collect();
        for ((m, lambda), fm) in missing.into_iter().zip(fitted) {
            self.entries
                .insert((m, lambda.to_bits(), data.to_owned()), fm?);
        }
        Ok(())
    }
}

fn fit_fold(
    snapshots: &[Snapshot],
    g: &RoadGraph,
    plan: &EvalPlan,
    held_out: usize,
    lambda: f64,
) -> Result<FoldModel> {
    let train: Vec<Snapshot> = snapshots
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != held_out)
        .map(|(_, s)| s.clone())
        .collect();
    let stats = compute_stats(&train, g)?;
    let cfg = LearnConfig {
        lambda,
        ..plan.learn
    };
    match fit_stats(&stats, g, plan.epsilon, &cfg) {
        Ok(fit) => Ok(FoldModel {
            model: fit.model,
            degenerate: false,
            converged: true,
        }),
        Err(Error::DegenerateData { best, .. }) => {
            log::warn!(
                "fold {held_out}, lambda {lambda}: training data have no spread; using capped eta"
            );
            Ok(FoldModel {
                model: *best,
                degenerate: true,
                converged: true,
            })
        }
        Err(Error::NonConvergence {
            best, grad_norm, ..
        }) => {
            log::warn!("fold {held_out}, lambda {lambda}: fit stopped at gradient {grad_norm:.3e}");
            Ok(FoldModel {
                model: *best,
                degenerate: false,
                converged: false,
            })
        }
        Err(e) => Err(e),
    }
}

/// Hash of the raw snapshot values.
pub fn data_fingerprint(snapshots: &[Snapshot]) -> String {
    let mut h = Sha256::new();
    for s in snapshots {
        h.update((s.len() as u64).to_le_bytes());
        for v in &s.0 {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

struct TrialBatch {
    /// `[λ][trial]`
    model_mae: Vec<Vec<f64>>,
    model_converged: Vec<usize>,
    solve_ms: Vec<Vec<f64>>,
    baseline_mae: Vec<f64>,
    redraws: usize,
}

pub fn loocv(snapshots: &[Snapshot], g: &RoadGraph, plan: &EvalPlan) -> Result<EvalReport> {
    loocv_with_cache(snapshots, g, plan, &mut ModelCache::default())
}

pub fn loocv_with_cache(
    snapshots: &[Snapshot],
    g: &RoadGraph,
    plan: &EvalPlan,
    cache: &mut ModelCache,
) -> Result<EvalReport> {
    plan.validate()?;
    let k = snapshots.len();
    if k < 2 {
        return Err(Error::InvalidParameter(format!(
            "leave-one-out needs at least two snapshots, got {k}"
        )));
    }
    for s in snapshots {
        ensure_len("snapshot", g.n(), s.len())?;
        if s.0.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Domain(
                "evaluation snapshots must be finite and nonnegative".into(),
            ));
        }
    }
    if g.n() == 0 {
        return Err(Error::InvalidParameter("graph has no vertices".into()));
    }

    let data = data_fingerprint(snapshots);
    cache.fill(snapshots, g, plan, &data)?;
    let models: Vec<Vec<&FoldModel>> = (0..k)
        .map(|m| {
            plan.lambda_values
                .iter()
                .map(|&l| cache.get(m, l, &data).expect("filled above"))
                .collect()
        })
        .collect();
    let train_means: Vec<Vec<f64>> = (0..k)
        .map(|m| {
            (0..g.n())
                .map(|i| {
                    snapshots
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != m)
                        .map(|(_, s)| s.0[i])
                        .sum::<f64>()
                        / (k - 1) as f64
                })
                .collect()
        })
        .collect();

    let tasks: Vec<(usize, usize)> = (0..k)
        .flat_map(|m| (0..plan.p_values.len()).map(move |pi| (m, pi)))
        .collect();
    let batches: Vec<TrialBatch> = tasks
        .par_iter()
        .map(|&(m, pi)| run_trials(g, &snapshots[m], &models[m], &train_means[m], plan, m, pi))
        .collect::<Result<_>>()?;

    let n_p = plan.p_values.len();
    let trials = plan.trials_per_snapshot;
    let mut cells = Vec::new();
    let mut timing = Vec::new();
    for (li, &lambda) in plan.lambda_values.iter().enumerate() {
        for (pi, &p) in plan.p_values.iter().enumerate() {
            let fold_batches: Vec<&TrialBatch> = (0..k).map(|m| &batches[m * n_p + pi]).collect();
            let per_snapshot: Vec<f64> = fold_batches
                .iter()
                .map(|b| b.model_mae[li].iter().sum::<f64>() / trials as f64)
                .collect();
            let overall = per_snapshot.iter().sum::<f64>() / k as f64;
            let all: Vec<f64> = fold_batches
                .iter()
                .flat_map(|b| b.model_mae[li].iter().copied())
                .collect();
            let grand = all.iter().sum::<f64>() / all.len() as f64;
            let trial_std = if all.len() > 1 {
                (all.iter().map(|v| (v - grand).powi(2)).sum::<f64>() / (all.len() - 1) as f64)
                    .sqrt()
            } else {
                0.0
            };
            let baseline = fold_batches
                .iter()
                .map(|b| b.baseline_mae.iter().sum::<f64>() / trials as f64)
                .sum::<f64>()
                / k as f64;
            let converged: usize = fold_batches.iter().map(|b| b.model_converged[li]).sum();
            let total = k * trials;
            let solve_ms: Vec<f64> = fold_batches
                .iter()
                .flat_map(|b| b.solve_ms[li].iter().copied())
                .collect();
            timing.push(CellTiming {
                p,
                lambda,
                mean_solve_ms: solve_ms.iter().sum::<f64>() / solve_ms.len() as f64,
                max_solve_ms: solve_ms.iter().copied().fold(0.0, f64::max),
            });
            cells.push(CellReport {
                p,
                lambda,
                mae: overall,
                per_snapshot,
                trial_std,
                baseline_mae: baseline,
                converged_trials: converged,
                total_trials: total,
                convergence_rate: converged as f64 / total as f64,
                degenerate_fits: models.iter().filter(|fm| fm[li].degenerate).count(),
                unconverged_fits: models.iter().filter(|fm| !fm[li].converged).count(),
            });
        }
    }
    let report = EvalReport {
        folds: k,
        trials_per_snapshot: trials,
        redraws: batches.iter().map(|b| b.redraws).sum(),
        cells,
        timing,
    };
    for c in report.flagged() {
        log::warn!(
            "p = {}, lambda = {}: {} of {} solves did not converge",
            c.p,
            c.lambda,
            c.total_trials - c.converged_trials,
            c.total_trials
        );
    }
    Ok(report)
}

fn run_trials(
    g: &RoadGraph,
    truth: &Snapshot,
    models: &[&FoldModel],
    train_mean: &[f64],
    plan: &EvalPlan,
    fold: usize,
    p_index: usize,
) -> Result<TrialBatch> {
    let p = plan.p_values[p_index];
    let n_l = models.len();
    let mut batch = TrialBatch {
        model_mae: vec![Vec::with_capacity(plan.trials_per_snapshot); n_l],
        model_converged: vec![0; n_l],
        solve_ms: vec![Vec::with_capacity(plan.trials_per_snapshot); n_l],
        baseline_mae: Vec::with_capacity(plan.trials_per_snapshot),
        redraws: 0,
    };
    for trial in 0..plan.trials_per_snapshot {
        let mut attempt = 0;
        let hidden = loop {
            let mut rng = stream(
                plan.seed,
                &[fold as u64, p_index as u64, trial as u64, attempt as u64],
            );
            let hidden = mask_indices(g.n(), p, &mut rng);
            if !hidden.is_empty() {
                break hidden;
            }
            attempt += 1;
            if attempt == MAX_REDRAWS {
                return Err(Error::UndefinedMetric(format!(
                    "no road hidden after {MAX_REDRAWS} draws at p = {p}"
                )));
            }
        };
        batch.redraws += attempt;
        let partial = PartialSnapshot::hiding(truth, &hidden)?;
        for (li, fm) in models.iter().enumerate() {
            let started = Instant::now();
            let problem = assemble_posterior(g, &fm.model, &partial)?;
            let result = mean_field_solve(&problem, &plan.solver, None)?;
            batch.solve_ms[li].push(started.elapsed().as_secs_f64() * 1e3);
            if result.converged {
                batch.model_converged[li] += 1;
            }
            batch.model_mae[li].push(mae(truth, &result, &hidden)?);
        }
        let base = baseline_from_mean(train_mean, &partial);
        batch.baseline_mae.push(mae(truth, &base, &hidden)?);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::grid;

    #[test]
    fn mae_examples() {
        let truth = Snapshot(vec![1.0, 3.0]);
        let s = PartialSnapshot::new(vec![None, None]).unwrap();
        let mut r = baseline_constant_mean(&[Snapshot(vec![0.0, 1.0])], &s).unwrap();
        assert_eq!(mae(&truth, &r, &[0, 1]).unwrap(), 1.5);
        r.estimates = truth.0.clone();
        assert_eq!(mae(&truth, &r, &[0, 1]).unwrap(), 0.0);
        assert!(matches!(
            mae(&truth, &r, &[]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn baseline_predicts_training_mean() {
        let train = vec![Snapshot(vec![0.2; 4]); 3];
        let s = PartialSnapshot::new(vec![Some(0.9), None, None, Some(0.1)]).unwrap();
        let r = baseline_constant_mean(&train, &s).unwrap();
        for (got, want) in r.estimates.iter().zip([0.9, 0.2, 0.2, 0.1]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(baseline_constant_mean(&[], &s).is_err());
    }

    #[test]
    fn lambda_grid_is_log_spaced_with_zero() {
        let grid = lambda_grid(-2.0, 2.0, 5);
        assert_eq!(grid.len(), 6);
        assert_eq!(grid[0], 0.0);
        for w in grid[1..].windows(2) {
            assert!((w[1] / w[0] - 1f64.exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_folds_score_identically() {
        let g = grid(3, 3).unwrap();
        let s = Snapshot((0..9).map(|i| 0.05 * i as f64).collect());
        let plan = EvalPlan {
            p_values: vec![0.5],
            lambda_values: vec![0.0],
            trials_per_snapshot: 20,
            ..Default::default()
        };
        let report = loocv(&[s.clone(), s], &g, &plan).unwrap();
        let cell = &report.cells[0];
        assert_eq!(cell.degenerate_fits, 2);
        assert_eq!(cell.per_snapshot.len(), 2);
        assert!(cell.mae >= 0.0);
    }

    #[test]
    fn plan_validation() {
        let g = grid(2, 2).unwrap();
        let snaps = vec![Snapshot(vec![0.1; 4]); 3];
        let bad = EvalPlan {
            p_values: vec![0.0],
            ..Default::default()
        };
        assert!(loocv(&snaps, &g, &bad).is_err());
        let bad = EvalPlan {
            trials_per_snapshot: 0,
            ..Default::default()
        };
        assert!(loocv(&snaps, &g, &bad).is_err());
        assert!(loocv(&snaps[..1], &g, &EvalPlan::default()).is_err());
    }

    #[test]
    fn cache_is_reused_across_calls() {
        let g = grid(3, 2).unwrap();
        let snaps: Vec<Snapshot> = (0..4)
            .map(|k| {
                Snapshot(
                    (0..6)
                        .map(|i| 0.1 + 0.01 * ((i * 7 + k * 3) % 5) as f64)
                        .collect(),
                )
            })
            .collect();
        let plan = EvalPlan {
            p_values: vec![0.5],
            lambda_values: vec![0.0, 1.0],
            trials_per_snapshot: 3,
            ..Default::default()
        };
        let mut cache = ModelCache::default();
        let a = loocv_with_cache(&snaps, &g, &plan, &mut cache).unwrap();
        assert_eq!(cache.len(), 8);
        let b = loocv_with_cache(&snaps, &g, &plan, &mut cache).unwrap();
        assert_eq!(cache.len(), 8);
        assert_eq!(a, b);
    }
}
