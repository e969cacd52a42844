//! Synthetic road networks and traffic data.
//!
//! Two network families: rectangular grids, and random planar graphs cut out
//! of a triangulated grid (a random spanning tree plus a random share of the
//! remaining non-crossing edges, so they are always connected). Traffic is
//! either drawn exactly from a Gaussian field or built from hotspot bumps
//! with random per-snapshot amplitudes.

use std::collections::VecDeque;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::gmrf::{PartialSnapshot, Snapshot};
use crate::graph::{precision_pattern, RoadGraph};
use crate::seeds::stream;
use crate::sparse::EnvelopeCholesky;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetworkKind {
    Grid { width: usize, height: usize },
    RandomPlanar { n: usize, density: f64 },
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    #[serde(flatten)]
    pub kind: NetworkKind,
    pub seed: u64,
}

pub fn generate_network(spec: &NetworkSpec) -> Result<RoadGraph> {
    match &spec.kind {
        NetworkKind::Grid { width, height } => grid(*width, *height),
        NetworkKind::RandomPlanar { n, density } => random_planar(*n, *density, spec.seed),
        NetworkKind::File { path } => RoadGraph::read_json(path),
    }
}

/// `width × height` lattice; vertex `y·width + x`.
pub fn grid(width: usize, height: usize) -> Result<RoadGraph> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidParameter(format!(
            "grid dimensions must be at least 1, got {width}x{height}"
        )));
    }
    let mut edges = Vec::with_capacity(2 * width * height);
    for y in 0..height {
        for x in 0..width {
            let v = y * width + x;
            if x + 1 < width {
                edges.push((v, v + 1));
            }
            if y + 1 < height {
                edges.push((v, v + width));
            }
        }
    }
    RoadGraph::from_index_edges(width * height, edges)
}

/// Connected planar graph on `n` vertices. Candidates are the edges of a
/// triangulated `⌈√n⌉`-wide lattice; a random spanning tree is kept, plus
/// `round(density · r)` of the `r` remaining candidates.
pub fn random_planar(n: usize, density: f64, seed: u64) -> Result<RoadGraph> {
    if n == 0 {
        return Err(Error::InvalidParameter("n must be at least 1".into()));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "density must lie in (0, 1], got {density}"
        )));
    }
    let mut rng = stream(seed, &[0x706c_616e]);
    let side = (n as f64).sqrt().ceil() as usize;
    let at = |x: usize, y: usize| -> Option<usize> {
        let v = y * side + x;
        (x < side && v < n).then_some(v)
    };
    let mut candidates = Vec::new();
    for y in 0..side {
        for x in 0..side {
            let Some(v) = at(x, y) else { continue };
            if let Some(r) = at(x + 1, y) {
                candidates.push((v, r));
            }
            if let Some(d) = at(x, y + 1) {
                candidates.push((v, d));
            }
            let diagonal = if rng.random::<bool>() {
                at(x + 1, y + 1).map(|w| (v, w))
            } else {
                at(x + 1, y).zip(at(x, y + 1))
            };
            if let Some(e) = diagonal {
                candidates.push(e);
            }
        }
    }
    candidates.shuffle(&mut rng);

    let mut parent: Vec<usize> = (0..n).collect();
    fn root(parent: &mut [usize], mut v: usize) -> usize {
        while parent[v] != v {
            parent[v] = parent[parent[v]];
            v = parent[v];
        }
        v
    }
    let mut tree = Vec::with_capacity(n.saturating_sub(1));
    let mut rest = Vec::new();
    for (a, b) in candidates {
        let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            tree.push((a, b));
        } else {
            rest.push((a, b));
        }
    }
    if tree.len() + 1 != n {
        return Err(Error::Generation(format!(
            "candidate lattice for n = {n} is disconnected"
        )));
    }
    let extra = (density * rest.len() as f64).round() as usize;
    tree.extend(rest.into_iter().take(extra));
    RoadGraph::from_index_edges(n, tree)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum GroundTruth {
    /// Exact draws from the field with precision `ηC` and mean `(1/η)C⁻¹β`.
    Gmrf {
        beta: Vec<f64>,
        eta: f64,
        epsilon: f64,
    },
    /// `Σ_c a_c · peak · exp(−decay · hops(v, c))` with `a_c ~ U(0.5, 1.5)`
    /// drawn per snapshot.
    Hotspot {
        centers: Vec<usize>,
        peak: f64,
        decay: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficSpec {
    pub ground_truth: GroundTruth,
    pub snapshots: usize,
    pub clamp_negative: bool,
    pub seed: u64,
}

impl TrafficSpec {
    pub fn validate(&self, g: &RoadGraph) -> Result<()> {
        if self.snapshots == 0 {
            return Err(Error::InvalidParameter(
                "at least one snapshot must be requested".into(),
            ));
        }
        match &self.ground_truth {
            GroundTruth::Gmrf { beta, eta, epsilon } => {
                ensure_len("ground-truth beta", g.n(), beta.len())?;
                if !(*eta > 0.0 && *epsilon > 0.0) {
                    return Err(Error::InvalidParameter(
                        "eta and epsilon must be positive".into(),
                    ));
                }
            }
            GroundTruth::Hotspot {
                centers,
                peak,
                decay,
            } => {
                if !(*peak > 0.0 && *decay > 0.0) {
                    return Err(Error::InvalidParameter(
                        "peak and decay must be positive".into(),
                    ));
                }
                if let Some(c) = centers.iter().find(|&&c| c >= g.n()) {
                    return Err(Error::Structure(format!("hotspot center {c} not in graph")));
                }
            }
        }
        Ok(())
    }
}

impl GroundTruth {
    /// Gaussian ground truth whose mean is `mean`: `β = η C mean`.
    pub fn gmrf_with_mean(g: &RoadGraph, mean: &[f64], eta: f64, epsilon: f64) -> Result<Self> {
        ensure_len("mean profile", g.n(), mean.len())?;
        if !(eta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "eta must be positive, got {eta}"
            )));
        }
        let c = precision_pattern(g, epsilon)?;
        let beta = c.mul_vec(mean).iter().map(|v| eta * v).collect();
        Ok(GroundTruth::Gmrf { beta, eta, epsilon })
    }
}

/// `count` distinct vertices in ascending order.
pub fn pick_centers(g: &RoadGraph, count: usize, seed: u64) -> Result<Vec<usize>> {
    if count > g.n() {
        return Err(Error::InvalidParameter(format!(
            "cannot place {count} hotspots on {} roads",
            g.n()
        )));
    }
    let mut centers =
        rand::seq::index::sample(&mut stream(seed, &[u64::MAX]), g.n(), count).into_vec();
    centers.sort_unstable();
    Ok(centers)
}

/// Exact sampler for the Gaussian field with precision `ηC`.
pub struct GmrfSampler {
    factor: EnvelopeCholesky,
    mean: Vec<f64>,
}

impl GmrfSampler {
    pub fn new(g: &RoadGraph, beta: &[f64], eta: f64, epsilon: f64) -> Result<Self> {
        ensure_len("beta", g.n(), beta.len())?;
        if !(eta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "eta must be positive, got {eta}"
            )));
        }
        let c = precision_pattern(g, epsilon)?;
        let factor = EnvelopeCholesky::scaled(&c, eta, 0.0)?;
        let mean = factor.solve(beta);
        Ok(GmrfSampler { factor, mean })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.mean.len())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        self.factor
            .solve_upper(&z)
            .into_iter()
            .zip(&self.mean)
            .map(|(dx, m)| m + dx)
            .collect()
    }
}

/// Hop distances from `source`; unreachable vertices get `usize::MAX`.
pub fn hop_distances(g: &RoadGraph, source: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; g.n()];
    dist[source] = 0;
    let mut queue = VecDeque::from([source]);
    while let Some(v) = queue.pop_front() {
        for &w in g.neighbors(v) {
            if dist[w] == usize::MAX {
                dist[w] = dist[v] + 1;
                queue.push_back(w);
            }
        }
    }
    dist
}

/// `peak · exp(−decay · hops)`, exactly `peak` at the center even for infinite decay.
pub fn hotspot_profile(g: &RoadGraph, center: usize, peak: f64, decay: f64) -> Vec<f64> {
    hop_distances(g, center)
        .into_iter()
        .map(|d| match d {
            0 => peak,
            usize::MAX => 0.0,
            d => peak * (-decay * d as f64).exp(),
        })
        .collect()
}

pub fn sample_snapshots(g: &RoadGraph, spec: &TrafficSpec) -> Result<Vec<Snapshot>> {
    spec.validate(g)?;
    let clamp = |mut v: Vec<f64>| {
        if spec.clamp_negative {
            v.iter_mut().for_each(|x| *x = x.max(0.0));
        }
        Snapshot(v)
    };
    let snapshots = match &spec.ground_truth {
        GroundTruth::Gmrf { beta, eta, epsilon } => {
            let sampler = GmrfSampler::new(g, beta, *eta, *epsilon)?;
            (0..spec.snapshots)
                .into_par_iter()
                .map(|k| clamp(sampler.sample(&mut stream(spec.seed, &[k as u64]))))
                .collect()
        }
        GroundTruth::Hotspot {
            centers,
            peak,
            decay,
        } => {
            let profiles: Vec<Vec<f64>> = centers
                .iter()
                .map(|&c| hotspot_profile(g, c, *peak, *decay))
                .collect();
            (0..spec.snapshots)
                .into_par_iter()
                .map(|k| {
                    let mut rng = stream(spec.seed, &[k as u64]);
                    let mut x = vec![0.0; g.n()];
                    for profile in &profiles {
                        let a: f64 = rng.random_range(0.5..1.5);
                        for (xi, p) in x.iter_mut().zip(profile) {
                            *xi += a * p;
                        }
                    }
                    clamp(x)
                })
                .collect()
        }
    };
    Ok(snapshots)
}

/// Each vertex is independently unobserved with probability `p`.
pub fn mask_indices<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<usize> {
    (0..n).filter(|_| rng.random::<f64>() < p).collect()
}

pub fn mask_snapshot(s: &Snapshot, p: f64, seed: u64) -> Result<PartialSnapshot> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!(
            "masking probability must lie in [0, 1], got {p}"
        )));
    }
    let hidden = mask_indices(s.len(), p, &mut stream(seed, &[]));
    PartialSnapshot::hiding(s, &hidden)
}

/// Provenance written next to generated files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerationMetadata {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub traffic: Option<TrafficSpec>,
    pub graph_fingerprint: String,
    pub clamp_negative: bool,
}
