use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use log::info;
use roadmrf::colors::ColorBinning;
use roadmrf::datagen::{
    self, hotspot_profile, pick_centers, GenerationMetadata, GroundTruth, NetworkKind, NetworkSpec,
    TrafficSpec,
};
use roadmrf::eval::{loocv, EvalPlan};
use roadmrf::io;
use roadmrf::learn::{compute_stats, fit, LearnConfig, Likelihood};
use roadmrf::{Model, RoadGraph, Scheme, SolverConfig};

use crate::{
    Command, EvaluateArgs, ExportColorsArgs, GenerateNetworkArgs, GenerateSnapshotsArgs, LearnArgs,
    MaskArgs, NetworkKindArg, ReconstructArgs, SchemeArg, SolverArgs, TruthArg,
};

/// Bad command-line input detected outside the library.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Stationarity residual accepted by `learn --verify`.
const VERIFY_TOLERANCE: f64 = 1e-6;

pub fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenerateNetwork(a) => generate_network(a),
        Command::GenerateSnapshots(a) => generate_snapshots(a),
        Command::Mask(a) => mask(a),
        Command::Learn(a) => learn(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Evaluate(a) => evaluate(a),
        Command::ExportColors(a) => export_colors(a),
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

fn read_network(path: &Path) -> Result<RoadGraph> {
    RoadGraph::read_json(path).with_context(|| format!("reading network {}", path.display()))
}

fn read_snapshots(path: &Path, g: &RoadGraph) -> Result<Vec<roadmrf::Snapshot>> {
    let file = io::open(path).with_context(|| format!("opening {}", path.display()))?;
    io::read_snapshots(file, g).with_context(|| format!("reading snapshots {}", path.display()))
}

fn solver_config(a: &SolverArgs) -> SolverConfig {
    SolverConfig {
        tolerance: a.tol,
        max_iterations: a.max_iters,
        scheme: match a.scheme {
            SchemeArg::Jacobi => Scheme::Jacobi,
            SchemeArg::GaussSeidel => Scheme::GaussSeidel,
        },
        warm_start: a.warm_start,
    }
}

fn generate_network(a: GenerateNetworkArgs) -> Result<ExitCode> {
    let kind = match a.kind {
        NetworkKindArg::Grid => NetworkKind::Grid {
            width: a.width.unwrap_or_default(),
            height: a.height.unwrap_or_default(),
        },
        NetworkKindArg::RandomPlanar => NetworkKind::RandomPlanar {
            n: a.n.unwrap_or_default(),
            density: a.density,
        },
    };
    let spec = NetworkSpec { kind, seed: a.seed };
    let g = datagen::generate_network(&spec)?;
    g.write_json(&a.out)?;
    let meta = GenerationMetadata {
        network: Some(spec),
        traffic: None,
        graph_fingerprint: g.fingerprint().to_owned(),
        clamp_negative: false,
    };
    io::write_json(sidecar(&a.out), &meta)?;
    println!(
        "{} roads, {} links -> {}",
        g.n(),
        g.edge_count(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn generate_snapshots(a: GenerateSnapshotsArgs) -> Result<ExitCode> {
    let g = read_network(&a.network)?;
    let ground_truth = if let Some(path) = &a.from_model {
        let m = Model::read_json(path)?;
        m.check_graph(&g)?;
        GroundTruth::Gmrf {
            beta: m.beta,
            eta: m.eta,
            epsilon: m.epsilon,
        }
    } else {
        let centers = pick_centers(&g, a.centers, a.seed)?;
        match a.model {
            TruthArg::Hotspot => GroundTruth::Hotspot {
                centers,
                peak: a.peak,
                decay: a.decay,
            },
            TruthArg::Gmrf => {
                let mut mean = vec![a.base; g.n()];
                for &c in &centers {
                    for (m, h) in mean.iter_mut().zip(hotspot_profile(&g, c, a.peak, a.decay)) {
                        *m += h;
                    }
                }
                GroundTruth::gmrf_with_mean(&g, &mean, a.eta, a.gen_epsilon)?
            }
        }
    };
    let spec = TrafficSpec {
        ground_truth,
        snapshots: a.snapshots,
        clamp_negative: a.clamp_negative,
        seed: a.seed,
    };
    let snaps = datagen::sample_snapshots(&g, &spec)?;
    io::write_snapshots(io::create(&a.out)?, &g, &snaps)?;
    let meta = GenerationMetadata {
        network: None,
        clamp_negative: spec.clamp_negative,
        traffic: Some(spec),
        graph_fingerprint: g.fingerprint().to_owned(),
    };
    io::write_json(sidecar(&a.out), &meta)?;
    println!(
        "{} snapshots of {} roads -> {}",
        snaps.len(),
        g.n(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn mask(a: MaskArgs) -> Result<ExitCode> {
    let g = read_network(&a.network)?;
    let snaps = read_snapshots(&a.snapshots, &g)?;
    let s = snaps.get(a.index).ok_or_else(|| {
        UsageError(format!(
            "--index {} out of range: the file holds {} snapshots",
            a.index,
            snaps.len()
        ))
    })?;
    let partial = datagen::mask_snapshot(s, a.p, a.seed)?;
    io::write_partial(io::create(&a.out)?, &g, &partial)?;
    println!(
        "{} of {} roads hidden -> {}",
        partial.unobserved().len(),
        g.n(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn learn(a: LearnArgs) -> Result<ExitCode> {
    if !(a.epsilon > 0.0 && a.epsilon.is_finite()) {
        return Err(UsageError(format!("--epsilon must be positive, got {}", a.epsilon)).into());
    }
    let cfg = LearnConfig {
        lambda: a.lambda,
        max_steps: a.max_steps,
        grad_tolerance: a.grad_tol,
        ..Default::default()
    };
    cfg.validate()?;
    let g = read_network(&a.network)?;
    let snaps = read_snapshots(&a.snapshots, &g)?;
    let fitted = fit(&snaps, &g, a.epsilon, &cfg)?;
    fitted.model.write_json(&a.out)?;
    let report_path = a.report.unwrap_or_else(|| {
        let mut name = a.out.as_os_str().to_owned();
        name.push(".report.json");
        PathBuf::from(name)
    });
    io::write_json(&report_path, &fitted.report)?;
    info!("training took {:.3} s", fitted.report.wall_time_secs);
    println!(
        "eta = {:.6e}, final objective = {:.10e}, gradient norm = {:.3e}, steps = {}",
        fitted.model.eta,
        fitted.report.final_objective,
        fitted.report.grad_norm,
        fitted.report.steps
    );

    if a.verify {
        let stats = compute_stats(&snaps, &g)?;
        let lik = Likelihood::new(&stats, &g, a.epsilon)?;
        let m = &fitted.model;
        let grad = lik.gradient(&m.beta, m.eta, a.lambda)?;
        let ok = if a.lambda == 0.0 {
            let mismatch = lik.mean_mismatch(&m.beta, m.eta);
            println!(
                "verify: |mean - C^-1 beta / eta| = {mismatch:.3e}, |d/d eta| = {:.3e}",
                grad.eta.abs()
            );
            mismatch < VERIFY_TOLERANCE && grad.eta.abs() < VERIFY_TOLERANCE
        } else {
            println!("verify: gradient norm = {:.3e}", grad.norm_inf());
            grad.norm_inf() < VERIFY_TOLERANCE
        };
        if !ok {
            eprintln!("verification failed (tolerance {VERIFY_TOLERANCE:e})");
            return Ok(ExitCode::from(1));
        }
        println!("verify: ok");
    }
    Ok(ExitCode::SUCCESS)
}

fn reconstruct(a: ReconstructArgs) -> Result<ExitCode> {
    let cfg = solver_config(&a.solver);
    cfg.validate()?;
    let g = read_network(&a.network)?;
    let model = Model::read_json(&a.model)
        .with_context(|| format!("reading model {}", a.model.display()))?;
    let file = io::open(&a.partial).with_context(|| format!("opening {}", a.partial.display()))?;
    let partial = io::read_partial(file, &g)
        .with_context(|| format!("reading partial snapshot {}", a.partial.display()))?;
    let result = roadmrf::reconstruct_snapshot(&g, &model, &partial, &cfg)?;
    io::write_reconstruction(io::create(&a.out)?, &g, &result)?;
    println!(
        "{} unobserved roads, {} sweeps, last update {:.3e} -> {}",
        result.unobserved.len(),
        result.iterations_used,
        result.final_residual,
        a.out.display()
    );
    if !result.converged {
        eprintln!(
            "error: solver did not reach tolerance {:e} within {} sweeps",
            cfg.tolerance, result.iterations_used
        );
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn evaluate(a: EvaluateArgs) -> Result<ExitCode> {
    let plan = EvalPlan {
        p_values: a.p,
        lambda_values: a.lambda,
        trials_per_snapshot: a.trials,
        seed: a.seed,
        epsilon: a.epsilon,
        solver: solver_config(&a.solver),
        learn: LearnConfig::default(),
    };
    plan.validate()?;
    let g = read_network(&a.network)?;
    let snaps = read_snapshots(&a.snapshots, &g)?;
    let report = loocv(&snaps, &g, &plan)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    io::write_json(a.out_dir.join("report.json"), &report)?;
    let table = report.to_table();
    fs::write(a.out_dir.join("table.txt"), &table)?;
    fs::write(a.out_dir.join("curve.csv"), report.to_curve_csv())?;
    for t in &report.timing {
        info!(
            "lambda {} p {}: mean solve {:.3} ms, max {:.3} ms",
            t.lambda, t.p, t.mean_solve_ms, t.max_solve_ms
        );
    }
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

fn export_colors(a: ExportColorsArgs) -> Result<ExitCode> {
    let binning = ColorBinning::new(a.bin_width)?;
    let file = io::open(&a.reconstruction)
        .with_context(|| format!("opening {}", a.reconstruction.display()))?;
    let rows = io::read_reconstruction(file)?;
    let colored = io::color_rows(&rows, &binning)?;
    io::write_colors(io::create(&a.out)?, &colored)?;
    println!("{} roads -> {}", colored.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}
