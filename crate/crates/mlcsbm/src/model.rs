//! Generative model: parameters, community labels, sparse SBM layers and
//! Gaussian covariates.
//!
//! `ModelParams` carries the scalar parameters together with the derived
//! per-layer edge intensities `a_k = d_k + lambda_k * sqrt(d_k)` and
//! `b_k = d_k - lambda_k * sqrt(d_k)`, and the aspect ratio `gamma = n / p`.
//! Each unordered node pair is an edge of layer k with probability `a_k/n`
//! when the labels agree and `b_k/n` otherwise. Covariate rows are
//! `B_i = sqrt(mu/n) * sigma_i * u + R_i` with `u` and `R_i` standard normal.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeedTree;

/// Parameter validation errors.
#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("lambda and d must have the same length (got {lambda} and {d})")]
    LengthMismatch { lambda: usize, d: usize },

    #[error("need at least one layer")]
    NoLayers,

    #[error("n and p must both be >= 2 (got n={n}, p={p})")]
    DimensionsTooSmall { n: usize, p: usize },

    #[error("d[{k}] = {d} but average degrees must exceed 1")]
    DegreeTooSmall { k: usize, d: f64 },

    #[error("lambda[{k}] = {lambda} is outside [0, sqrt(d_k)] = [0, {max}]")]
    LambdaOutOfRange { k: usize, lambda: f64, max: f64 },

    #[error("mu = {0} must be nonnegative")]
    NegativeMu(f64),

    #[error("a[{k}] = {a} >= n = {n}: within-community edge probability would reach 1")]
    EdgeProbabilityTooLarge { k: usize, a: f64, n: usize },

    #[error("parameter {0} is not finite")]
    NotFinite(&'static str),
}

/// All scalar parameters of the generative model plus derived quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub n: usize,
    pub p: usize,
    pub m: usize,
    pub lambda: Vec<f64>,
    pub mu: f64,
    pub d: Vec<f64>,
    #[serde(skip)]
    a: Vec<f64>,
    #[serde(skip)]
    b: Vec<f64>,
    #[serde(skip)]
    gamma: f64,
}

impl ModelParams {
    /// Validate raw parameters and populate the derived fields.
    pub fn new(
        lambda: Vec<f64>,
        mu: f64,
        d: Vec<f64>,
        n: usize,
        p: usize,
    ) -> Result<Self, ModelError> {
        if lambda.len() != d.len() {
            return Err(ModelError::LengthMismatch { lambda: lambda.len(), d: d.len() });
        }
        if d.is_empty() {
            return Err(ModelError::NoLayers);
        }
        if n < 2 || p < 2 {
            return Err(ModelError::DimensionsTooSmall { n, p });
        }
        if !mu.is_finite() {
            return Err(ModelError::NotFinite("mu"));
        }
        if mu < 0.0 {
            return Err(ModelError::NegativeMu(mu));
        }
        let m = d.len();
        let mut a = Vec::with_capacity(m);
        let mut b = Vec::with_capacity(m);
        for k in 0..m {
            if !d[k].is_finite() {
                return Err(ModelError::NotFinite("d"));
            }
            if !lambda[k].is_finite() {
                return Err(ModelError::NotFinite("lambda"));
            }
            if d[k] <= 1.0 {
                return Err(ModelError::DegreeTooSmall { k, d: d[k] });
            }
            let max = d[k].sqrt();
            if lambda[k] < 0.0 || lambda[k] > max {
                return Err(ModelError::LambdaOutOfRange { k, lambda: lambda[k], max });
            }
            let ak = d[k] + lambda[k] * max;
            let bk = d[k] - lambda[k] * max;
            if ak >= n as f64 {
                return Err(ModelError::EdgeProbabilityTooLarge { k, a: ak, n });
            }
            a.push(ak);
            b.push(bk);
        }
        let gamma = n as f64 / p as f64;
        Ok(Self { n, p, m, lambda, mu, d, a, b, gamma })
    }

    /// Null parameters (no community signal) with the same dimensions and degrees.
    pub fn null_of(&self) -> Self {
        Self::new(vec![0.0; self.m], 0.0, self.d.clone(), self.n, self.p)
            .expect("null parameters of valid parameters are valid")
    }

    /// Within-community edge intensity `a_k`.
    pub fn a(&self, k: usize) -> f64 {
        self.a[k]
    }

    /// Cross-community edge intensity `b_k`.
    pub fn b(&self, k: usize) -> f64 {
        self.b[k]
    }

    /// Aspect ratio `gamma = n / p`.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Effective signal-to-noise ratio `sum_k lambda_k^2 + mu^2 / gamma`.
    ///
    /// The comparison of this quantity with 1 separates the detectable
    /// from the undetectable regime.
    pub fn effective_snr(&self) -> f64 {
        let net: f64 = self.lambda.iter().map(|l| l * l).sum();
        net + self.mu * self.mu / self.gamma
    }
}

/// Convenience wrapper matching the operation-style API.
pub fn effective_snr(params: &ModelParams) -> f64 {
    params.effective_snr()
}

/// A vector of community labels in {-1, +1}.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommunityAssignment(pub Vec<i8>);

impl CommunityAssignment {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Label of node `i` as a float (+1.0 or -1.0).
    pub fn sign(&self, i: usize) -> f64 {
        f64::from(self.0[i])
    }
}

/// One sparse layer graph, stored both as a sorted edge list and as
/// adjacency lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerGraph {
    /// 1-based layer index, matching the `layer_<k>.edges` file names.
    pub layer_index: usize,
    pub n: usize,
    /// Unordered edges (i, j) with i < j, ascending lexicographic.
    pub edges: Vec<(u32, u32)>,
    adj: Vec<Vec<u32>>,
}

impl LayerGraph {
    /// Build from an edge list; normalizes orientation and sorts.
    pub fn from_edges(layer_index: usize, n: usize, mut edges: Vec<(u32, u32)>) -> Self {
        for e in edges.iter_mut() {
            assert!(e.0 != e.1, "self-loop in layer {layer_index}");
            if e.0 > e.1 {
                *e = (e.1, e.0);
            }
            assert!((e.1 as usize) < n, "node id out of range");
        }
        edges.sort_unstable();
        edges.dedup();
        let mut adj = vec![Vec::new(); n];
        for &(i, j) in &edges {
            adj[i as usize].push(j);
            adj[j as usize].push(i);
        }
        for list in adj.iter_mut() {
            list.sort_unstable();
        }
        Self { layer_index, n, edges, adj }
    }

    /// Sorted neighbors of node `i`.
    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.adj[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adj[i].len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i].binary_search(&(j as u32)).is_ok()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }
}

/// The n x p covariate matrix together with the latent direction `u`.
///
/// `u` is kept for diagnostics only; no inference entry point reads it
/// (they are parameterized on layers, B and params alone), and it is not
/// part of the on-disk dataset format.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateMatrix {
    pub b: Array2<f64>,
    pub u: Option<Array1<f64>>,
}

impl CovariateMatrix {
    pub fn n(&self) -> usize {
        self.b.nrows()
    }

    pub fn p(&self) -> usize {
        self.b.ncols()
    }
}

/// One sampled instance of the generative model.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub params: ModelParams,
    pub sigma: CommunityAssignment,
    pub layers: Vec<LayerGraph>,
    pub covariates: CovariateMatrix,
    pub seed: u64,
}

impl Dataset {
    /// Assemble a dataset from parts, checking dimensions.
    pub fn from_parts(
        params: ModelParams,
        sigma: CommunityAssignment,
        layers: Vec<LayerGraph>,
        covariates: CovariateMatrix,
        seed: u64,
    ) -> Self {
        assert_eq!(sigma.len(), params.n);
        assert!(sigma.0.iter().all(|&s| s == 1 || s == -1), "labels must be +-1");
        assert_eq!(layers.len(), params.m);
        for (k, g) in layers.iter().enumerate() {
            assert_eq!(g.n, params.n);
            assert_eq!(g.layer_index, k + 1);
        }
        assert_eq!(covariates.n(), params.n);
        assert_eq!(covariates.p(), params.p);
        Self { params, sigma, layers, covariates, seed }
    }

    pub fn n(&self) -> usize {
        self.params.n
    }

    pub fn p(&self) -> usize {
        self.params.p
    }
}

/// Sample i.i.d. uniform +-1 labels.
pub fn sample_assignment<R: Rng>(n: usize, rng: &mut R) -> CommunityAssignment {
    CommunityAssignment((0..n).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect())
}

/// Sample layer `k` (0-based index into params) given the labels.
///
/// Avoids the O(n^2) Bernoulli scan: within each community block the edge
/// probability is constant, so the edge count is Binomial over the pair
/// count and the edge set is a uniform subset of that size, sampled
/// rejection-free by Floyd's algorithm over pair ranks.
pub fn sample_layer<R: Rng>(
    params: &ModelParams,
    k: usize,
    sigma: &CommunityAssignment,
    rng: &mut R,
) -> LayerGraph {
    let n = params.n;
    assert_eq!(sigma.len(), n);
    let plus: Vec<u32> = (0..n as u32).filter(|&i| sigma.0[i as usize] == 1).collect();
    let minus: Vec<u32> = (0..n as u32).filter(|&i| sigma.0[i as usize] == -1).collect();
    let p_in = params.a(k) / n as f64;
    let p_out = params.b(k) / n as f64;

    let mut edges = Vec::new();
    sample_within_block(&plus, p_in, rng, &mut edges);
    sample_within_block(&minus, p_in, rng, &mut edges);
    sample_cross_block(&plus, &minus, p_out, rng, &mut edges);
    LayerGraph::from_edges(k + 1, n, edges)
}

fn sample_within_block<R: Rng>(
    nodes: &[u32],
    prob: f64,
    rng: &mut R,
    out: &mut Vec<(u32, u32)>,
) {
    let s = nodes.len() as u64;
    if s < 2 || prob <= 0.0 {
        return;
    }
    let pairs = s * (s - 1) / 2;
    let count = Binomial::new(pairs, prob).unwrap().sample(rng);
    for rank in floyd_sample(pairs, count, rng) {
        // rank = j*(j-1)/2 + i with i < j.
        let j = ((1.0 + (1.0 + 8.0 * rank as f64).sqrt()) / 2.0).floor() as u64;
        let j = fix_triangular(rank, j);
        let i = rank - j * (j - 1) / 2;
        out.push((nodes[i as usize], nodes[j as usize]));
    }
}

fn sample_cross_block<R: Rng>(
    plus: &[u32],
    minus: &[u32],
    prob: f64,
    rng: &mut R,
    out: &mut Vec<(u32, u32)>,
) {
    let pairs = plus.len() as u64 * minus.len() as u64;
    if pairs == 0 || prob <= 0.0 {
        return;
    }
    let count = Binomial::new(pairs, prob).unwrap().sample(rng);
    let w = minus.len() as u64;
    for rank in floyd_sample(pairs, count, rng) {
        out.push((plus[(rank / w) as usize], minus[(rank % w) as usize]));
    }
}

/// Correct a float-derived triangular root so that j*(j-1)/2 <= rank < j*(j+1)/2.
fn fix_triangular(rank: u64, mut j: u64) -> u64 {
    while j > 0 && j * (j - 1) / 2 > rank {
        j -= 1;
    }
    while (j + 1) * j / 2 <= rank {
        j += 1;
    }
    j
}

/// Floyd's algorithm: a uniform `count`-subset of [0, total), no rejection.
fn floyd_sample<R: Rng>(total: u64, count: u64, rng: &mut R) -> Vec<u64> {
    let mut chosen = std::collections::HashSet::with_capacity(count as usize);
    let mut out = Vec::with_capacity(count as usize);
    for j in total - count..total {
        let t = rng.gen_range(0..=j);
        let pick = if chosen.insert(t) { t } else { chosen.insert(j); j };
        out.push(pick);
    }
    out
}

/// Sample the covariate matrix given the labels.
///
/// Draw order is fixed (u first, then R row-major) so replays are stable.
pub fn sample_covariates<R: Rng>(
    params: &ModelParams,
    sigma: &CommunityAssignment,
    rng: &mut R,
) -> CovariateMatrix {
    let (n, p) = (params.n, params.p);
    assert_eq!(sigma.len(), n);
    let u = Array1::from_iter((0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let scale = (params.mu / n as f64).sqrt();
    let mut b = Array2::zeros((n, p));
    for i in 0..n {
        let s = scale * sigma.sign(i);
        for q in 0..p {
            let r: f64 = rng.sample(StandardNormal);
            b[[i, q]] = s * u[q] + r;
        }
    }
    CovariateMatrix { b, u: Some(u) }
}

/// Sample a full dataset as a deterministic function of (params, seed).
///
/// Each component draws from its own labeled substream, so e.g. layer 2
/// can be re-drawn without touching sigma or B.
pub fn sample_dataset(params: &ModelParams, seed: u64) -> Dataset {
    let root = SeedTree::from_seed(seed);
    let sigma = sample_assignment(params.n, &mut root.child("sigma").rng());
    let layers = (0..params.m)
        .map(|k| {
            let mut rng = root.child_idx("layer", (k + 1) as u64).rng();
            sample_layer(params, k, &sigma, &mut rng)
        })
        .collect();
    let covariates = sample_covariates(params, &sigma, &mut root.child("covariates").rng());
    Dataset::from_parts(params.clone(), sigma, layers, covariates, seed)
}
