//! Weak recovery via self-avoiding walks: normalized wedge weights, the
//! walk-averaged estimator of sigma sigma^T, the Frobenius-minimizing PSD
//! program and Gaussian sign rounding.
//!
//! Layer weights are centered and scaled so that E[w | sigma] equals
//! sigma_i sigma_j for every wedge type; a walk's weight is the product
//! over its wedges, and the pair estimate averages over the full walk set
//! (exactly, via inclusion-exclusion over factor coincidences) or over
//! uniform walk samples.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::factor_graph::{
    count_saws, sample_saws, visit_saw_skeletons, Caps, FactorGraphError, SelfAvoidingWalk,
    Wedge, WedgeComposition,
};
use crate::model::{CommunityAssignment, Dataset, ModelParams};
use crate::rng::SeedTree;

#[derive(Debug, Error, PartialEq)]
pub enum RecoveryError {
    #[error(transparent)]
    FactorGraph(#[from] FactorGraphError),

    #[error("layer {0} has lambda = 0: its normalized weight is undefined; use k_j = 0")]
    LayerNotNormalizable(usize),

    #[error("mu = 0: covariate wedges are undefined; use ell = 0")]
    CovariatesNotNormalizable,

    #[error("exact estimation supports at most 3 covariate wedges (got {0}); use sampling")]
    TooManyCovariateWedges(usize),

    #[error("delta must be positive, got {0}")]
    BadDelta(f64),

    #[error(
        "PSD program infeasible or unconverged after {sweeps} sweeps \
         (diag dev {diag_dev:.2e}, min eig {min_eig:.2e}, halfspace gap {halfspace_gap:.2e})"
    )]
    Infeasible { sweeps: usize, diag_dev: f64, min_eig: f64, halfspace_gap: f64 },

    #[error("eigendecomposition failed even after adding a ridge")]
    FactorizationFailed,

    #[error("label vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

/// Centered, scaled layer weight: (2n/(a_k - b_k)) (A - (a_k + b_k)/(2n)),
/// so that E[w | sigma] = sigma_i sigma_j exactly.
pub fn normalize_layer_entry(
    params: &ModelParams,
    k: usize,
    present: bool,
) -> Result<f64, RecoveryError> {
    let (a, b) = (params.a(k), params.b(k));
    if a == b {
        return Err(RecoveryError::LayerNotNormalizable(k));
    }
    let n = params.n as f64;
    let ind = if present { 1.0 } else { 0.0 };
    Ok(2.0 * n / (a - b) * (ind - (a + b) / (2.0 * n)))
}

/// Covariate wedge weight (n/mu) B_{i1,j} B_{i2,j}; E[. | sigma] = sigma_i1 sigma_i2.
pub fn normalize_covariate_wedge(
    params: &ModelParams,
    ds: &Dataset,
    i1: usize,
    i2: usize,
    j: usize,
) -> Result<f64, RecoveryError> {
    if params.mu == 0.0 {
        return Err(RecoveryError::CovariatesNotNormalizable);
    }
    debug_assert!(i1 != i2);
    Ok(params.n as f64 / params.mu * ds.covariates.b[[i1, j]] * ds.covariates.b[[i2, j]])
}

/// Product of normalized wedge weights along a walk.
pub fn path_weight(
    walk: &SelfAvoidingWalk,
    ds: &Dataset,
    params: &ModelParams,
) -> Result<f64, RecoveryError> {
    let mut w = 1.0;
    let mut b_idx = 0;
    for (s, wedge) in walk.wedges.iter().enumerate() {
        let (u, v) = (walk.nodes[s] as usize, walk.nodes[s + 1] as usize);
        match wedge {
            Wedge::Layer(r) => {
                w *= normalize_layer_entry(params, *r, ds.layers[*r].has_edge(u, v))?;
            }
            Wedge::Covariate => {
                let q = walk.b_factors[b_idx] as usize;
                b_idx += 1;
                w *= normalize_covariate_wedge(params, ds, u, v, q)?;
            }
        }
    }
    Ok(w)
}

/// How the pair averages are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaMode {
    /// Average over the whole walk set.
    Exact,
    /// Average over this many uniform walk samples per pair.
    Sampled(usize),
}

impl std::fmt::Display for SigmaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SigmaMode::Exact => write!(f, "exact"),
            SigmaMode::Sampled(k) => write!(f, "sampled:{k}"),
        }
    }
}

/// The walk-averaged estimator of sigma sigma^T.
#[derive(Debug, Clone)]
pub struct SigmaHatMatrix {
    /// Symmetric, zero diagonal.
    pub values: DMatrix<f64>,
    pub comp: WedgeComposition,
    /// Walks averaged per pair (walk-set size or sample count).
    pub coverage: DMatrix<u64>,
}

/// Estimate sigma sigma^T by averaging walk weights for every node pair.
///
/// Pairs are processed in parallel; sampled mode draws each pair from its
/// own substream of `tree`, so results do not depend on thread count.
pub fn estimate_sigma_matrix(
    ds: &Dataset,
    comp: &WedgeComposition,
    mode: SigmaMode,
    caps: &Caps,
    tree: &SeedTree,
) -> Result<SigmaHatMatrix, RecoveryError> {
    let params = &ds.params;
    for (r, &kr) in comp.k.iter().enumerate() {
        if kr > 0 && params.lambda[r] == 0.0 {
            return Err(RecoveryError::LayerNotNormalizable(r));
        }
    }
    if comp.ell > 0 && params.mu == 0.0 {
        return Err(RecoveryError::CovariatesNotNormalizable);
    }
    if mode == SigmaMode::Exact {
        let total = comp.total();
        if total > caps.saw_enum_total || ds.n() > caps.saw_enum_nodes {
            return Err(FactorGraphError::CapExceeded {
                comp: comp.to_string(),
                what: "exact walk averaging",
                limit: caps.saw_enum_total,
                total,
            }
            .into());
        }
        if comp.ell > 3 {
            return Err(RecoveryError::TooManyCovariateWedges(comp.ell));
        }
    }

    let n = ds.n();
    use rayon::prelude::*;
    let rows: Vec<Vec<(f64, u64)>> = (0..n)
        .into_par_iter()
        .map(|i1| {
            ((i1 + 1)..n)
                .map(|i2| match mode {
                    SigmaMode::Exact => exact_pair(ds, i1, i2, comp, caps),
                    SigmaMode::Sampled(k) => {
                        let mut rng =
                            tree.child_idx("pair", (i1 * n + i2) as u64).rng();
                        sampled_pair(ds, i1, i2, comp, k, caps, &mut rng)
                    }
                })
                .collect()
        })
        .collect();

    let mut values = DMatrix::zeros(n, n);
    let mut coverage = DMatrix::zeros(n, n);
    for (i1, row) in rows.iter().enumerate() {
        for (off, &(v, c)) in row.iter().enumerate() {
            let i2 = i1 + 1 + off;
            values[(i1, i2)] = v;
            values[(i2, i1)] = v;
            coverage[(i1, i2)] = c;
            coverage[(i2, i1)] = c;
        }
    }
    Ok(SigmaHatMatrix { values, comp: comp.clone(), coverage })
}

/// Exact pair average: sum over walk skeletons, with the distinct-factor
/// sums collapsed by inclusion-exclusion, divided by the walk count.
fn exact_pair(
    ds: &Dataset,
    i1: usize,
    i2: usize,
    comp: &WedgeComposition,
    caps: &Caps,
) -> (f64, u64) {
    let params = &ds.params;
    let count = count_saws(ds, i1, i2, comp, caps).expect("checked by caller");
    if count == 0 {
        return (0.0, 0);
    }
    let b = &ds.covariates.b;
    let scale = params.n as f64 / params.mu; // only used when ell > 0
    let mut sum = 0.0;
    visit_saw_skeletons(ds, i1, i2, comp, |nodes, wedges| {
        let mut a_weight = 1.0;
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(comp.ell);
        for (s, wedge) in wedges.iter().enumerate() {
            let (u, v) = (nodes[s] as usize, nodes[s + 1] as usize);
            match wedge {
                Wedge::Layer(r) => {
                    a_weight *= normalize_layer_entry(params, *r, ds.layers[*r].has_edge(u, v))
                        .expect("validated");
                }
                Wedge::Covariate => pairs.push((u, v)),
            }
        }
        let b_weight = match pairs.len() {
            0 => 1.0,
            1 => scale * b.row(pairs[0].0).dot(&b.row(pairs[0].1)),
            2 => {
                let (mut s0, mut s1, mut s01) = (0.0, 0.0, 0.0);
                for q in 0..b.ncols() {
                    let w0 = b[[pairs[0].0, q]] * b[[pairs[0].1, q]];
                    let w1 = b[[pairs[1].0, q]] * b[[pairs[1].1, q]];
                    s0 += w0;
                    s1 += w1;
                    s01 += w0 * w1;
                }
                scale * scale * (s0 * s1 - s01)
            }
            3 => {
                let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
                let (mut s01, mut s02, mut s12, mut s012) = (0.0, 0.0, 0.0, 0.0);
                for q in 0..b.ncols() {
                    let w0 = b[[pairs[0].0, q]] * b[[pairs[0].1, q]];
                    let w1 = b[[pairs[1].0, q]] * b[[pairs[1].1, q]];
                    let w2 = b[[pairs[2].0, q]] * b[[pairs[2].1, q]];
                    s0 += w0;
                    s1 += w1;
                    s2 += w2;
                    s01 += w0 * w1;
                    s02 += w0 * w2;
                    s12 += w1 * w2;
                    s012 += w0 * w1 * w2;
                }
                scale.powi(3) * (s0 * s1 * s2 - s01 * s2 - s02 * s1 - s12 * s0 + 2.0 * s012)
            }
            _ => unreachable!("exact mode caps ell at 3"),
        };
        sum += a_weight * b_weight;
    });
    (sum / count as f64, count.min(u64::MAX as u128) as u64)
}

fn sampled_pair<R: Rng>(
    ds: &Dataset,
    i1: usize,
    i2: usize,
    comp: &WedgeComposition,
    n_samples: usize,
    caps: &Caps,
    rng: &mut R,
) -> (f64, u64) {
    match sample_saws(ds, i1, i2, comp, n_samples, caps, rng) {
        Ok(walks) => {
            let sum: f64 = walks
                .iter()
                .map(|w| path_weight(w, ds, &ds.params).expect("validated"))
                .sum();
            (sum / n_samples as f64, n_samples as u64)
        }
        Err(_) => (0.0, 0),
    }
}

/// Solution of the Frobenius-minimizing PSD program.
#[derive(Debug, Clone)]
pub struct PsdCorrelation {
    /// Symmetric PSD with unit diagonal.
    pub values: DMatrix<f64>,
    pub achieved_inner: f64,
    pub delta_used: f64,
    pub iterations: usize,
}

/// Minimize ||Psi||_F subject to diag(Psi) = 1, <Sigma-hat, Psi> >= delta n
/// ||Sigma-hat||_F and Psi PSD.
///
/// The minimizer is the projection of the zero matrix onto the feasible
/// intersection, computed by Dykstra's alternating projections (halfspace,
/// PSD cone, diagonal). Reports infeasibility if the residuals have not
/// closed after the sweep budget.
pub fn fit_psd_correlation(
    sigma_hat: &SigmaHatMatrix,
    delta: f64,
) -> Result<PsdCorrelation, RecoveryError> {
    if delta <= 0.0 {
        return Err(RecoveryError::BadDelta(delta));
    }
    let s = &sigma_hat.values;
    let n = s.nrows();
    let frob = s.norm();
    let required = delta * n as f64 * frob;
    let s_norm_sq = frob * frob;

    let max_sweeps = 5000;
    let tol = 1e-10;
    let mut x = DMatrix::<f64>::zeros(n, n);
    let mut inc_half = DMatrix::<f64>::zeros(n, n);
    let mut inc_psd = DMatrix::<f64>::zeros(n, n);
    let mut inc_diag = DMatrix::<f64>::zeros(n, n);
    let mut sweeps = 0;
    let scale = (n as f64 * frob).max(1.0);

    while sweeps < max_sweeps {
        sweeps += 1;
        let prev = x.clone();

        // Halfspace <S, Psi> >= required.
        let y = &x + &inc_half;
        let inner = y.dot(s);
        let proj = if inner < required && s_norm_sq > 0.0 {
            &y + &(s * ((required - inner) / s_norm_sq))
        } else {
            y.clone()
        };
        inc_half = y - &proj;
        x = proj;

        // PSD cone.
        let y = &x + &inc_psd;
        let sym = (&y + y.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let clipped = eig.eigenvalues.map(|v| v.max(0.0));
        let proj =
            &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        inc_psd = y - &proj;
        x = proj;

        // Unit diagonal (always last, so the returned diagonal is exact).
        let mut y = &x + &inc_diag;
        let mut proj = y.clone();
        for i in 0..n {
            proj[(i, i)] = 1.0;
        }
        inc_diag = {
            y -= &proj;
            y
        };
        x = proj;

        // When the intersection is nonempty, the Dykstra iterates settle;
        // when it is empty they keep cycling and the sweep budget runs out.
        let change = (&x - &prev).norm();
        let halfspace_ok = x.dot(s) >= required - 1e-8 * scale;
        if change < tol * x.norm().max(1.0) && halfspace_ok {
            break;
        }
    }

    // Final feasibility audit with the strict tolerances.
    let mut diag_dev: f64 = 0.0;
    for i in 0..n {
        diag_dev = diag_dev.max((x[(i, i)] - 1.0).abs());
    }
    let eig = SymmetricEigen::new((&x + x.transpose()) * 0.5);
    let min_eig = eig.eigenvalues.min();
    let inner = x.dot(s);
    let halfspace_gap = required - inner;
    if diag_dev > 1e-8 || min_eig < -1e-8 || halfspace_gap > 1e-6 * scale {
        return Err(RecoveryError::Infeasible {
            sweeps,
            diag_dev,
            min_eig,
            halfspace_gap: halfspace_gap.max(0.0),
        });
    }
    Ok(PsdCorrelation { values: x, achieved_inner: inner, delta_used: delta, iterations: sweeps })
}

/// Draw Z ~ N(0, Psi) through the eigendecomposition and return its signs
/// (sign(0) = +1).
pub fn gaussian_rounding<R: Rng>(
    psi: &PsdCorrelation,
    rng: &mut R,
) -> Result<CommunityAssignment, RecoveryError> {
    let n = psi.values.nrows();
    let factor = |m: &DMatrix<f64>| -> Option<DMatrix<f64>> {
        let eig = SymmetricEigen::try_new(m.clone(), 1e-13, 0)?;
        let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        Some(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
    };
    let sym = (&psi.values + psi.values.transpose()) * 0.5;
    let l = match factor(&sym) {
        Some(l) => l,
        None => {
            let ridged = &sym + DMatrix::identity(n, n) * 1e-10;
            factor(&ridged).ok_or(RecoveryError::FactorizationFailed)?
        }
    };
    let g = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let z = l * g;
    Ok(CommunityAssignment(
        z.iter().map(|&v| if v < 0.0 { -1i8 } else { 1i8 }).collect(),
    ))
}

/// |<sigma-hat, sigma>| / n.
pub fn overlap(a: &CommunityAssignment, b: &CommunityAssignment) -> Result<f64, RecoveryError> {
    if a.len() != b.len() {
        return Err(RecoveryError::LengthMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    Ok(dot.abs() / a.len() as f64)
}

/// Outcome of a recovery run.
#[derive(Debug, Clone, Serialize)]
pub struct RecoveryResult {
    pub sigma_hat: Vec<i8>,
    pub overlap: Option<f64>,
    pub delta_used: Option<f64>,
    pub comp: Option<WedgeComposition>,
    pub mode: String,
    pub iterations: usize,
}

/// Full pipeline: walk averages, PSD program, Gaussian rounding, overlap
/// against the dataset's ground truth.
pub fn weak_recovery_pipeline(
    ds: &Dataset,
    comp: &WedgeComposition,
    delta: f64,
    mode: SigmaMode,
    caps: &Caps,
    tree: &SeedTree,
) -> Result<RecoveryResult, RecoveryError> {
    let sigma_hat = estimate_sigma_matrix(ds, comp, mode, caps, &tree.child("pairs"))?;
    let psi = fit_psd_correlation(&sigma_hat, delta)?;
    let labels = gaussian_rounding(&psi, &mut tree.child("rounding").rng())?;
    let ov = overlap(&labels, &ds.sigma)?;
    Ok(RecoveryResult {
        sigma_hat: labels.0,
        overlap: Some(ov),
        delta_used: Some(delta),
        comp: Some(comp.clone()),
        mode: mode.to_string(),
        iterations: psi.iterations,
    })
}

/// Pilot estimate of the program margin: half the average of
/// <Sigma-hat, sigma sigma^T> / (n ||Sigma-hat||_F) over replicas with
/// known truth, floored away from zero.
pub fn pilot_delta(
    params: &ModelParams,
    comp: &WedgeComposition,
    mode: SigmaMode,
    replicas: usize,
    caps: &Caps,
    tree: &SeedTree,
) -> Result<f64, RecoveryError> {
    let mut acc = 0.0;
    for r in 0..replicas {
        let sub = tree.child_idx("pilot", r as u64);
        let ds = crate::model::sample_dataset(params, sub.seed_u64());
        let sh = estimate_sigma_matrix(&ds, comp, mode, caps, &sub.child("pairs"))?;
        let n = ds.n();
        let mut inner = 0.0;
        for i in 0..n {
            for j in 0..n {
                inner += sh.values[(i, j)] * ds.sigma.sign(i) * ds.sigma.sign(j);
            }
        }
        let frob = sh.values.norm();
        if frob > 0.0 {
            acc += inner / (n as f64 * frob);
        }
    }
    Ok((0.5 * acc / replicas as f64).max(1e-3))
}
