//! UMAP projection of latent trajectories to 2D.
//!
//! Stages: exact kNN, smooth-kNN bandwidths and fuzzy-union graph, fitting
//! the low-dimensional curve `1 / (1 + a·x^(2b))`, and a single-threaded
//! SGD layout. Every stage is deterministic given its inputs and seed.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::sampler::Trajectory;
use crate::scheduler::LatentTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PointLabel {
    pub trajectory: usize,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    dim: usize,
    points: Vec<f32>,
    labels: Vec<PointLabel>,
}

impl PointSet {
    pub fn new(dim: usize, points: Vec<f32>, labels: Vec<PointLabel>) -> Result<Self> {
        if dim == 0 || points.len() != dim * labels.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![labels.len(), dim],
                found: vec![points.len()],
            });
        }
        if labels.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "a point set needs at least 2 points, got {}",
                labels.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point coordinates".into()));
        }
        Ok(Self { dim, points, labels })
    }

    /// Unlabelled rows; labels are `(0, row index)`.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidParameter("rows differ in length".into()));
        }
        let labels = (0..rows.len())
            .map(|step| PointLabel { trajectory: 0, step })
            .collect();
        Self::new(dim, rows.concat(), labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f32] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[PointLabel] {
        &self.labels
    }
}

/// Euclidean distance accumulated in f64.
pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// `k` nearest neighbours of every point, closest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors {
    k: usize,
    indices: Vec<usize>,
    distances: Vec<f64>,
}

impl Neighbors {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn distances(&self, i: usize) -> &[f64] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }
}

/// Exact brute-force kNN; equal distances are ordered by lower index.
pub fn knn(points: &PointSet, k: usize) -> Result<Neighbors> {
    let n = points.len();
    if k == 0 || k >= n {
        return Err(Error::InvalidParameter(format!("k = {k} outside 1..={}", n - 1)));
    }
    let mut indices = Vec::with_capacity(n * k);
    let mut distances = Vec::with_capacity(n * k);
    let mut row: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        row.clear();
        row.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (euclidean(points.point(i), points.point(j)), j)),
        );
        row.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d, j) in &row[..k] {
            indices.push(j);
            distances.push(d);
        }
    }
    Ok(Neighbors { k, indices, distances })
}

pub const SIGMA_ITERATIONS: usize = 64;
pub const SIGMA_TOLERANCE: f64 = 1e-5;
/// Bandwidth recorded for points whose neighbours are all equidistant.
pub const DEGENERATE_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyGraph {
    n: usize,
    /// Both directions of every undirected edge, sorted by `(i, j)`.
    edges: Vec<Edge>,
    rho: Vec<f64>,
    sigma: Vec<f64>,
    degenerate: Vec<bool>,
}

impl FuzzyGraph {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Whether point `i` had all neighbours at the same distance, in which
    /// case its directed weights are all 1 and its sigma is
    /// [`DEGENERATE_SIGMA`].
    pub fn is_degenerate(&self, i: usize) -> bool {
        self.degenerate[i]
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.edges
            .binary_search_by(|e| (e.i, e.j).cmp(&(i, j)))
            .map_or(0.0, |p| self.edges[p].weight)
    }
}

fn membership_sum(distances: &[f64], rho: f64, sigma: f64) -> f64 {
    distances.iter().map(|&d| (-(d - rho).max(0.0) / sigma).exp()).sum()
}

/// Finds `sigma` with `sum_j exp(-max(0, d_j - rho) / sigma) = log2(k)`.
/// Bisection on `[0, inf)` starting at 1, doubling while unbounded above.
pub fn solve_sigma(distances: &[f64], rho: f64) -> f64 {
    let target = (distances.len() as f64).log2();
    let (mut lo, mut hi, mut mid) = (0.0f64, f64::INFINITY, 1.0f64);
    for _ in 0..SIGMA_ITERATIONS {
        let psum = membership_sum(distances, rho, mid);
        if (psum - target).abs() < SIGMA_TOLERANCE {
            break;
        }
        if psum > target {
            hi = mid;
            mid = (lo + hi) / 2.0;
        } else {
            lo = mid;
            mid = if hi.is_infinite() { mid * 2.0 } else { (lo + hi) / 2.0 };
        }
    }
    mid
}

pub fn fuzzy_graph(neighbors: &Neighbors) -> FuzzyGraph {
    let n = neighbors.len();
    let mut rho = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut degenerate = Vec::with_capacity(n);
    let mut directed: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for i in 0..n {
        let d = neighbors.distances(i);
        let r = d[0];
        let flat = d.iter().all(|&x| x == r);
        let s = if flat { DEGENERATE_SIGMA } else { solve_sigma(d, r) };
        for (&j, &dj) in neighbors.indices(i).iter().zip(d) {
            let w = if flat { 1.0 } else { (-(dj - r).max(0.0) / s).exp() };
            directed.insert((i, j), w);
        }
        rho.push(r);
        sigma.push(s);
        degenerate.push(flat);
    }
    let mut edges = Vec::new();
    for (&(i, j), &w_ij) in &directed {
        let reverse = directed.get(&(j, i)).copied();
        if reverse.is_some() && i > j {
            continue;
        }
        let w_ji = reverse.unwrap_or(0.0);
        // a + b - ab, arranged so a weight of 1 in either direction stays 1.
        let (hi, lo) = if w_ij >= w_ji { (w_ij, w_ji) } else { (w_ji, w_ij) };
        let w = (hi + lo * (1.0 - hi)).min(1.0);
        if w > 0.0 {
            edges.push(Edge { i, j, weight: w });
            edges.push(Edge { i: j, j: i, weight: w });
        }
    }
    edges.sort_by_key(|a| (a.i, a.j));
    FuzzyGraph {
        n,
        edges,
        rho,
        sigma,
        degenerate,
    }
}

pub const CURVE_GRID_POINTS: usize = 300;
pub const CURVE_FIT_ITERATIONS: usize = 100;

/// Target membership curve: 1 below `min_dist`, exponential decay beyond.
pub fn target_curve(x: f64, min_dist: f64, spread: f64) -> f64 {
    if x < min_dist {
        1.0
    } else {
        (-(x - min_dist) / spread).exp()
    }
}

pub fn curve(x: f64, a: f64, b: f64) -> f64 {
    1.0 / (1.0 + a * libm::pow(x, 2.0 * b))
}

/// Least-squares fit of `1 / (1 + a·x^(2b))` to [`target_curve`] on 300
/// evenly spaced points of `[0, 3·spread]`. Levenberg–Marquardt from
/// `(a, b) = (1, 1)` with an analytic Jacobian, 100 iterations.
pub fn fit_ab(min_dist: f64, spread: f64) -> Result<(f64, f64)> {
    if !(spread > 0.0 && min_dist > 0.0 && min_dist < 10.0 * spread) || !spread.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "min_dist {min_dist} and spread {spread} must satisfy 0 < min_dist < 10·spread"
        )));
    }
    let xs: Vec<f64> = (0..CURVE_GRID_POINTS)
        .map(|i| 3.0 * spread * i as f64 / (CURVE_GRID_POINTS - 1) as f64)
        .collect();
    let ys: Vec<f64> = xs.iter().map(|&x| target_curve(x, min_dist, spread)).collect();
    let cost = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| (curve(x, a, b) - y).powi(2))
            .sum()
    };
    let (mut a, mut b) = (1.0f64, 1.0f64);
    let mut lambda = 1e-3;
    let mut current = cost(a, b);
    for _ in 0..CURVE_FIT_ITERATIONS {
        let (mut jtj, mut jtr) = ([[0.0f64; 2]; 2], [0.0f64; 2]);
        for (&x, &y) in xs.iter().zip(&ys) {
            if x == 0.0 {
                // the curve is 1 at the origin whatever (a, b)
                continue;
            }
            let u = libm::pow(x, 2.0 * b);
            let denom = 1.0 + a * u;
            let f = 1.0 / denom;
            let da = -u / (denom * denom);
            let db = -a * u * 2.0 * x.ln() / (denom * denom);
            let r = f - y;
            jtj[0][0] += da * da;
            jtj[0][1] += da * db;
            jtj[1][1] += db * db;
            jtr[0] += da * r;
            jtr[1] += db * r;
        }
        jtj[1][0] = jtj[0][1];
        let mut accepted = false;
        for _ in 0..32 {
            let m00 = jtj[0][0] * (1.0 + lambda);
            let m11 = jtj[1][1] * (1.0 + lambda);
            let det = m00 * m11 - jtj[0][1] * jtj[1][0];
            if det == 0.0 || !det.is_finite() {
                lambda *= 10.0;
                continue;
            }
            let step_a = -(m11 * jtr[0] - jtj[0][1] * jtr[1]) / det;
            let step_b = -(m00 * jtr[1] - jtj[1][0] * jtr[0]) / det;
            let (na, nb) = (a + step_a, b + step_b);
            if na > 0.0 && nb > 0.0 {
                let c = cost(na, nb);
                if c <= current {
                    a = na;
                    b = nb;
                    current = c;
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    Ok((a, b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UmapParams {
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub spread: f64,
    pub epochs: usize,
    pub negative_sample_rate: usize,
}

impl Default for UmapParams {
    fn default() -> Self {
        Self {
            n_neighbors: 15,
            min_dist: 0.1,
            spread: 1.0,
            epochs: 500,
            negative_sample_rate: 5,
        }
    }
}

impl UmapParams {
    pub fn effective_neighbors(&self, n: usize) -> usize {
        self.n_neighbors.min(n.saturating_sub(1)).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding2D {
    pub coords: Vec<[f64; 2]>,
    pub seed: u64,
    pub params: UmapParams,
    pub a: f64,
    pub b: f64,
}

pub const INIT_RANGE: f64 = 10.0;
pub const GRADIENT_CLIP: f64 = 4.0;
pub const REPULSION_EPSILON: f64 = 0.001;

fn clip(v: f64) -> f64 {
    v.clamp(-GRADIENT_CLIP, GRADIENT_CLIP)
}

fn dist_sq(p: [f64; 2], q: [f64; 2]) -> f64 {
    (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)
}

/// SGD layout. Initial coordinates are uniform in `[-10, 10]²`. Edge `e`
/// is sampled every `max_w / w_e` epochs (edges lighter than
/// `max_w / epochs` are never sampled); each sample pulls both endpoints
/// together and pushes the head away from `negative_sample_rate` random
/// points. Gradients are clipped to ±4 and the learning rate falls linearly
/// from 1 to 0.
pub fn layout(graph: &FuzzyGraph, params: &UmapParams, seed: u64) -> Result<Embedding2D> {
    let (a, b) = fit_ab(params.min_dist, params.spread)?;
    if params.epochs == 0 {
        return Err(Error::InvalidParameter("epochs must be positive".into()));
    }
    let n = graph.len();
    let mut rng = SeededRng::new(seed);
    let mut coords: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let x = rng.uniform_range(-INIT_RANGE, INIT_RANGE);
            let y = rng.uniform_range(-INIT_RANGE, INIT_RANGE);
            [x, y]
        })
        .collect();

    let epochs = params.epochs as f64;
    let max_w = graph.edges().iter().map(|e| e.weight).fold(0.0, f64::max);
    let edges: Vec<(usize, usize, f64)> = graph
        .edges()
        .iter()
        .filter(|e| e.weight >= max_w / epochs)
        .map(|e| (e.i, e.j, max_w / e.weight))
        .collect();
    let neg_rate = params.negative_sample_rate as f64;
    let mut next_sample: Vec<f64> = edges.iter().map(|e| e.2).collect();
    let per_negative: Vec<f64> = edges.iter().map(|e| e.2 / neg_rate).collect();
    let mut next_negative = per_negative.clone();

    for epoch in 0..params.epochs {
        let alpha = 1.0 - epoch as f64 / epochs;
        let now = epoch as f64;
        for (e, &(head, tail, per_sample)) in edges.iter().enumerate() {
            if next_sample[e] > now {
                continue;
            }
            let (current, other) = (coords[head], coords[tail]);
            let d2 = dist_sq(current, other);
            let coeff = if d2 > 0.0 {
                -2.0 * a * b * libm::pow(d2, b - 1.0) / (a * libm::pow(d2, b) + 1.0)
            } else {
                0.0
            };
            for d in 0..2 {
                let grad = clip(coeff * (current[d] - other[d]));
                coords[head][d] += grad * alpha;
                coords[tail][d] -= grad * alpha;
            }
            next_sample[e] += per_sample;

            if neg_rate > 0.0 {
                let count = ((now - next_negative[e]) / per_negative[e]) as usize;
                for _ in 0..count {
                    let k = rng.below(n);
                    if k == head {
                        continue;
                    }
                    let (current, other) = (coords[head], coords[k]);
                    let d2 = dist_sq(current, other);
                    if d2 <= 0.0 {
                        continue;
                    }
                    let coeff = 2.0 * b / ((REPULSION_EPSILON + d2) * (a * libm::pow(d2, b) + 1.0));
                    for d in 0..2 {
                        coords[head][d] += clip(coeff * (current[d] - other[d])) * alpha;
                    }
                }
                next_negative[e] += count as f64 * per_negative[e];
            }
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::LayoutDiverged { epoch });
        }
    }
    Ok(Embedding2D {
        coords,
        seed,
        params: *params,
        a,
        b,
    })
}

/// Full pipeline on a point set. Bitwise-identical points are embedded once
/// and share their coordinates.
pub fn embed(points: &PointSet, params: &UmapParams, seed: u64) -> Result<Embedding2D> {
    let mut first_of: HashMap<Vec<u32>, usize> = HashMap::new();
    let mut unique_rows: Vec<usize> = Vec::new();
    let assignment: Vec<usize> = (0..points.len())
        .map(|i| {
            let key: Vec<u32> = points.point(i).iter().map(|v| v.to_bits()).collect();
            *first_of.entry(key).or_insert_with(|| {
                unique_rows.push(i);
                unique_rows.len() - 1
            })
        })
        .collect();
    let (a, b) = fit_ab(params.min_dist, params.spread)?;
    if unique_rows.len() < 2 {
        return Ok(Embedding2D {
            coords: vec![[0.0, 0.0]; points.len()],
            seed,
            params: *params,
            a,
            b,
        });
    }
    let unique = if unique_rows.len() == points.len() {
        points.clone()
    } else {
        let data = unique_rows.iter().flat_map(|&i| points.point(i).to_vec()).collect();
        let labels = unique_rows.iter().map(|&i| points.labels()[i]).collect();
        PointSet::new(points.dim(), data, labels)?
    };
    let k = params.effective_neighbors(unique.len());
    let graph = fuzzy_graph(&knn(&unique, k)?);
    let unique_embedding = layout(&graph, params, seed)?;
    Ok(Embedding2D {
        coords: assignment.iter().map(|&u| unique_embedding.coords[u]).collect(),
        ..unique_embedding
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub trajectory_id: String,
    pub points: Vec<[f64; 2]>,
}

/// Embeds every latent of every sequence jointly and returns one polyline
/// per sequence in step order.
pub fn project_sequences(
    sequences: &[(&str, &[LatentTensor])],
    params: &UmapParams,
    seed: u64,
) -> Result<(Vec<Polyline>, Embedding2D)> {
    let total: usize = sequences.iter().map(|(_, s)| s.len()).sum();
    if total < 2 {
        return Err(Error::InvalidParameter(format!(
            "projection needs at least 2 points, got {total}"
        )));
    }
    let shape = sequences
        .iter()
        .find_map(|(_, s)| s.first())
        .map(LatentTensor::shape)
        .expect("non-empty");
    let mut data = Vec::with_capacity(total * shape.len());
    let mut labels = Vec::with_capacity(total);
    for (t, (_, seq)) in sequences.iter().enumerate() {
        for (step, latent) in seq.iter().enumerate() {
            if latent.shape() != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape.dims(),
                    found: latent.shape().dims(),
                });
            }
            data.extend_from_slice(latent.data());
            labels.push(PointLabel { trajectory: t, step });
        }
    }
    let points = PointSet::new(shape.len(), data, labels)?;
    let embedding = embed(&points, params, seed)?;
    let mut coords = embedding.coords.iter();
    let polylines = sequences
        .iter()
        .map(|(id, seq)| Polyline {
            trajectory_id: id.to_string(),
            points: coords.by_ref().take(seq.len()).copied().collect(),
        })
        .collect();
    Ok((polylines, embedding))
}

pub fn project_trajectories(
    trajectories: &[Trajectory],
    params: &UmapParams,
    seed: u64,
) -> Result<(Vec<Polyline>, Embedding2D)> {
    let sequences: Vec<(&str, &[LatentTensor])> = trajectories
        .iter()
        .map(|t| (t.prompt_key.as_str(), t.latents.as_slice()))
        .collect();
    project_sequences(&sequences, params, seed)
}
