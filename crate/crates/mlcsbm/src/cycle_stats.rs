//! Weighted cycle statistics, their limiting moments, the composition-based
//! detection test and the truncated log-likelihood-ratio expansion.
//!
//! The statistic of composition (k_1, ..., k_m; ell) sums over factor-graph
//! cycles the product of layer edge indicators and covariate entries (both
//! legs of each covariate wedge), with the ell covariate factor indices
//! pairwise distinct, scaled by n^-ell.
//!
//! Evaluation strategy per composition shape:
//!   ell = 0                 -> sparse anchored cycle search;
//!   ell = 1, some layers    -> open layer paths closed by one covariate
//!                              wedge, whose factor sum is a Gram entry;
//!   (0;2), (0;3)            -> closed forms in Gram/trace sums;
//!   ell = 2, one layer slot -> per-edge formula using B^T B and B(B^T B);
//!   anything else           -> generic skeleton search with explicit
//!                              inclusion-exclusion over factor coincidences
//!                              (exact, but not built for large n).
//!
//! Distinct-factor sums are collapsed by inclusion-exclusion over
//! coincidence partitions of the covariate slots (exact for ell <= 3).

use ndarray::Array2;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::factor_graph::{visit_cycle_skeletons, Caps, FactorGraphError, Wedge, WedgeComposition};
use crate::model::{Dataset, ModelParams};

#[derive(Debug, Error, PartialEq)]
pub enum CycleStatError {
    #[error(transparent)]
    Cap(#[from] FactorGraphError),

    #[error("effective SNR is zero; no informative composition exists")]
    ZeroSnr,

    #[error("truncation depth {got} exceeds {max} (covariate wedge cap)")]
    TruncationTooDeep { got: usize, max: usize },

    #[error("alpha must lie in (0,1), got {0}")]
    BadAlpha(f64),
}

/// Observed statistic with its limiting moments under both hypotheses.
///
/// `h1_mean` is the mean shift: the Gaussian mean for ell > 0, or the
/// increment of the Poisson rate over the null for ell = 0.
#[derive(Debug, Clone, Serialize)]
pub struct CycleStatReport {
    pub comp: WedgeComposition,
    pub y: f64,
    pub h0_mean: f64,
    pub h0_var: f64,
    pub h1_mean: f64,
    pub score: f64,
}

/// Poisson rate under the null for a pure-network composition:
/// (1/2k) k!/(k_1!...k_m!) prod d_j^{k_j}.
pub fn h0_poisson_mean(comp: &WedgeComposition, params: &ModelParams) -> f64 {
    poisson_mean_formula(comp, &params.d, None)
}

/// Poisson rate under the alternative: the null rate plus
/// (1/2k) k!/(k_1!...k_m!) prod (lambda_j sqrt(d_j))^{k_j}.
pub fn h1_poisson_mean(comp: &WedgeComposition, params: &ModelParams) -> f64 {
    poisson_mean_formula(comp, &params.d, Some(&params.lambda))
}

pub(crate) fn poisson_mean_formula(
    comp: &WedgeComposition,
    d: &[f64],
    lambda: Option<&[f64]>,
) -> f64 {
    assert_eq!(comp.ell, 0, "Poisson branch requires ell = 0");
    let k = comp.total();
    assert!(k >= 2, "cycle statistics need at least two wedges");
    let base = comp.arrangements() as f64 / (2.0 * k as f64);
    let mut dd = 1.0;
    for (j, &kj) in comp.k.iter().enumerate() {
        dd *= d[j].powi(kj as i32);
    }
    match lambda {
        None => base * dd,
        Some(l) => {
            let mut ss = 1.0;
            for (j, &kj) in comp.k.iter().enumerate() {
                ss *= (l[j] * d[j].sqrt()).powi(kj as i32);
            }
            base * (dd + ss)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hypothesis {
    Null,
    Alternative,
}

/// Limiting (mean, variance) of a composition with covariate wedges: mean
/// (1/2k) k!/(ell! prod k_j!) prod (lambda_j sqrt(d_j))^{k_j} (mu/gamma)^ell
/// under the alternative (0 under the null), variance
/// (1/(2k gamma^ell)) k!/(ell! prod k_j!) prod d_j^{k_j}.
pub fn gaussian_moments(
    comp: &WedgeComposition,
    params: &ModelParams,
    hypothesis: Hypothesis,
) -> (f64, f64) {
    assert!(comp.ell >= 1, "Gaussian branch requires ell >= 1");
    let k = comp.total() as f64;
    let mult = comp.arrangements() as f64;
    let gamma = params.gamma();
    let mut dd = 1.0;
    for (j, &kj) in comp.k.iter().enumerate() {
        dd *= params.d[j].powi(kj as i32);
    }
    let var = mult * dd / (2.0 * k * gamma.powi(comp.ell as i32));
    let mean = match hypothesis {
        Hypothesis::Null => 0.0,
        Hypothesis::Alternative => {
            let mut ss = 1.0;
            for (j, &kj) in comp.k.iter().enumerate() {
                ss *= (params.lambda[j] * params.d[j].sqrt()).powi(kj as i32);
            }
            mult * ss * (params.mu / gamma).powi(comp.ell as i32) / (2.0 * k)
        }
    };
    (mean, var)
}

/// Contiguity coefficient delta = prod ((a_j - b_j)/(a_j + b_j))^{k_j}.
pub fn delta_coeff(comp: &WedgeComposition, params: &ModelParams) -> f64 {
    assert_eq!(comp.ell, 0, "delta is defined for pure-network compositions");
    let mut v = 1.0;
    for (j, &kj) in comp.k.iter().enumerate() {
        if kj > 0 {
            let (a, b) = (params.a(j), params.b(j));
            v *= ((a - b) / (a + b)).powi(kj as i32);
        }
    }
    v
}

/// The consistent-test composition: k_j = floor(lambda_j^2 k / snr) and the
/// rest covariate wedges. Layers with lambda_j = 0 get no wedges.
pub fn select_composition(
    params: &ModelParams,
    k_total: usize,
) -> Result<WedgeComposition, CycleStatError> {
    let snr = params.effective_snr();
    if snr <= 0.0 {
        return Err(CycleStatError::ZeroSnr);
    }
    let mut k = Vec::with_capacity(params.m);
    let mut used = 0usize;
    for j in 0..params.m {
        let share = params.lambda[j] * params.lambda[j] * k_total as f64 / snr;
        let kj = (share + 1e-9).floor() as usize;
        used += kj;
        k.push(kj);
    }
    debug_assert!(used <= k_total);
    Ok(WedgeComposition::new(k, k_total - used))
}

/// Cycle-statistic evaluator with lazily computed covariate kernels shared
/// across compositions on one dataset: row/column square sums, K = B^T B,
/// C = B K and tr(K^3).
pub struct StatEngine<'a> {
    ds: &'a Dataset,
    caps: Caps,
    row_sq: Option<Vec<f64>>,
    col_sq: Option<Vec<f64>>,
    k_mat: Option<Array2<f64>>,
    c_mat: Option<Array2<f64>>,
    tr_k3: Option<f64>,
}

impl<'a> StatEngine<'a> {
    pub fn new(ds: &'a Dataset, caps: Caps) -> Self {
        Self { ds, caps, row_sq: None, col_sq: None, k_mat: None, c_mat: None, tr_k3: None }
    }

    fn row_sq(&mut self) -> &[f64] {
        let b = &self.ds.covariates.b;
        self.row_sq
            .get_or_insert_with(|| (0..b.nrows()).map(|i| b.row(i).dot(&b.row(i))).collect())
    }

    fn col_sq(&mut self) -> &[f64] {
        let b = &self.ds.covariates.b;
        self.col_sq.get_or_insert_with(|| {
            let mut c = vec![0.0; b.ncols()];
            for i in 0..b.nrows() {
                for (q, cq) in c.iter_mut().enumerate() {
                    *cq += b[[i, q]] * b[[i, q]];
                }
            }
            c
        })
    }

    fn k_mat(&mut self) -> &Array2<f64> {
        let b = &self.ds.covariates.b;
        self.k_mat.get_or_insert_with(|| b.t().dot(b))
    }

    fn c_mat(&mut self) -> &Array2<f64> {
        if self.c_mat.is_none() {
            let k = self.k_mat().clone();
            self.c_mat = Some(self.ds.covariates.b.dot(&k));
        }
        self.c_mat.as_ref().unwrap()
    }

    fn tr_k3(&mut self) -> f64 {
        if self.tr_k3.is_none() {
            let k = self.k_mat();
            let k2 = k.dot(k);
            self.tr_k3 = Some((&k2 * k).sum());
        }
        self.tr_k3.unwrap()
    }

    /// The cycle statistic for one composition.
    pub fn statistic(&mut self, comp: &WedgeComposition) -> Result<f64, CycleStatError> {
        if comp.k.len() != self.ds.params.m {
            return Err(FactorGraphError::LayerCountMismatch {
                got: comp.k.len(),
                expect: self.ds.params.m,
            }
            .into());
        }
        let total = comp.total();
        if total < 2 {
            return Err(FactorGraphError::TotalTooSmall { min: 2, got: total }.into());
        }
        if total > self.caps.cycle_total || comp.ell > self.caps.cycle_ell {
            return Err(FactorGraphError::CapExceeded {
                comp: comp.to_string(),
                what: "cycle statistic",
                limit: if comp.ell > self.caps.cycle_ell {
                    self.caps.cycle_ell
                } else {
                    self.caps.cycle_total
                },
                total,
            }
            .into());
        }
        let ka = comp.network_total();
        let y = match (comp.ell, ka) {
            (0, _) => self.pure_network(comp),
            (1, 1..) => self.single_covariate(comp),
            (2, 0) => self.two_covariate_closed(),
            (3, 0) => self.three_covariate_closed(),
            (2, 1) => self.edge_plus_two_covariates(comp),
            _ => self.generic(comp),
        };
        Ok(y)
    }

    /// ell = 0: every present cycle contributes 1.
    fn pure_network(&mut self, comp: &WedgeComposition) -> f64 {
        let mut count = 0u64;
        visit_cycle_skeletons(self.ds, comp, |_, _| count += 1);
        count as f64
    }

    /// ell = 1: cut each cycle at its covariate wedge, leaving an open
    /// layer path; the free factor index sums to a Gram entry.
    fn single_covariate(&mut self, comp: &WedgeComposition) -> f64 {
        let ds = self.ds;
        let n = ds.n();
        let ka = comp.network_total();
        let mut pool: Vec<usize> = comp.k.clone();
        let mut sum = 0.0;
        let b = &ds.covariates.b;
        let mut nodes: Vec<u32> = Vec::with_capacity(ka + 1);
        let mut visited = vec![false; n];
        for start in 0..n as u32 {
            nodes.push(start);
            visited[start as usize] = true;
            path_dfs(ds, ka, &mut pool, &mut nodes, &mut visited, &mut |path| {
                let (x, y) = (path[0], *path.last().unwrap());
                if x < y {
                    sum += b.row(x as usize).dot(&b.row(y as usize));
                }
            });
            visited[start as usize] = false;
            nodes.pop();
        }
        sum / n as f64
    }

    /// (0;2): pairs of covariate wedges on a node pair. Over i < j and
    /// unordered distinct factor pairs this collapses to
    ///   1/4 [ tr(G^2) - sum_i G_ii^2 - sum_q c_q^2 + sum_{i,q} B_iq^4 ].
    fn two_covariate_closed(&mut self) -> f64 {
        let n = self.ds.n() as f64;
        let b = &self.ds.covariates.b;
        let b4: f64 = b.iter().map(|x| x.powi(4)).sum();
        let tr_g2: f64 = self.k_mat().iter().map(|x| x * x).sum();
        let row2: f64 = self.row_sq().iter().map(|x| x * x).sum();
        let col2: f64 = self.col_sq().iter().map(|x| x * x).sum();
        0.25 * (tr_g2 - row2 - col2 + b4) / (n * n)
    }

    /// (0;3): covariate-wedge triangles on distinct node triples with
    /// distinct factors. Node distinctness is inclusion-exclusion over the
    /// three node slots (free sums minus pairwise merges plus twice the
    /// triple merge), nested with the factor-coincidence partitions of the
    /// three covariate slots; every piece reduces to Gram/trace sums.
    fn three_covariate_closed(&mut self) -> f64 {
        let tr_g3 = self.tr_k3();
        self.c_mat();
        self.row_sq();
        self.col_sq();
        let b = &self.ds.covariates.b;
        let (n, p) = (b.nrows(), b.ncols());
        let nf = n as f64;
        let c = self.c_mat.as_ref().unwrap();
        let row_sq = self.row_sq.as_ref().unwrap();
        let col_sq = self.col_sq.as_ref().unwrap();

        let mut b4_col = vec![0.0; p];
        let mut b6_col = vec![0.0; p];
        let mut g_q = vec![0.0; p]; // sum_i G_ii B_iq^2
        let mut t1 = 0.0; // sum_{q,i} B_iq^3 C_iq
        let mut t3 = 0.0; // sum_{q,i} G_ii B_iq^4
        let mut g2_diag_dot_g_diag = 0.0; // sum_i G_ii (G^2)_ii
        let mut g_diag_cubed = 0.0;
        for i in 0..n {
            let gii = row_sq[i];
            g_diag_cubed += gii.powi(3);
            let mut g2ii = 0.0;
            for q in 0..p {
                let x = b[[i, q]];
                let x2 = x * x;
                b4_col[q] += x2 * x2;
                b6_col[q] += x2 * x2 * x2;
                g_q[q] += gii * x2;
                t1 += x2 * x * c[[i, q]];
                t3 += gii * x2 * x2;
                g2ii += c[[i, q]] * x;
            }
            g2_diag_dot_g_diag += gii * g2ii;
        }

        // Distinct-node sum of G_ij G_jh G_hi over ordered triples.
        let a3 = tr_g3 - 3.0 * g2_diag_dot_g_diag + 2.0 * g_diag_cubed;

        // Distinct-node sum of (sum_q B_iq B_jq^2 B_hq) G_hi: the free sum
        // is sum_q c_q ||K e_q||^2 since (G B e_q) = B K e_q = C e_q.
        let k = self.k_mat.as_ref().unwrap();
        let mut u_free = 0.0;
        for q in 0..p {
            let col_norm_sq: f64 = (0..p).map(|r| k[[r, q]] * k[[r, q]]).sum();
            u_free += col_sq[q] * col_norm_sq;
        }
        let t2: f64 = (0..p).map(|q| g_q[q] * col_sq[q]).sum();
        let m1 = u_free - 2.0 * t1 - t2 + 2.0 * t3;

        // Distinct-node sum of sum_q B_iq^2 B_jq^2 B_hq^2.
        let s3: f64 = (0..p)
            .map(|q| col_sq[q].powi(3) - 3.0 * col_sq[q] * b4_col[q] + 2.0 * b6_col[q])
            .sum();

        (a3 - 3.0 * m1 + 2.0 * s3) / 6.0 / nf.powi(3)
    }

    /// (one layer wedge; 2): cycles edge(i,j) - wedge(j,h) - wedge(h,i).
    /// Per present edge, the sum over the free node h and ordered distinct
    /// factors is (G^2)_ji minus node/factor coincidence corrections, with
    /// (G^2)_ji = (B K)_j . B_i.
    fn edge_plus_two_covariates(&mut self, comp: &WedgeComposition) -> f64 {
        let layer = comp.k.iter().position(|&kj| kj == 1).expect("one layer slot");
        self.c_mat();
        self.row_sq();
        self.col_sq();
        let ds = self.ds;
        let b = &ds.covariates.b;
        let n = ds.n() as f64;
        let c = self.c_mat.as_ref().unwrap();
        let row_sq = self.row_sq.as_ref().unwrap();
        let col_sq = self.col_sq.as_ref().unwrap();
        let mut sum = 0.0;
        for &(i, j) in &ds.layers[layer].edges {
            let (i, j) = (i as usize, j as usize);
            let g_ij = b.row(i).dot(&b.row(j));
            let g2_ij: f64 = c.row(j).dot(&b.row(i));
            let mut coincident = 0.0;
            for q in 0..b.ncols() {
                let (x, y) = (b[[j, q]], b[[i, q]]);
                coincident += x * y * (col_sq[q] - x * x - y * y);
            }
            sum += g2_ij - (row_sq[i] + row_sq[j]) * g_ij - coincident;
        }
        sum / (n * n)
    }

    /// Fallback: enumerate skeletons, resolving distinct-factor sums by
    /// inclusion-exclusion over coincidence partitions of the covariate
    /// slots. Exact for ell <= 3; cost grows with n^(covariate wedges).
    fn generic(&mut self, comp: &WedgeComposition) -> f64 {
        let ds = self.ds;
        let b = &ds.covariates.b;
        let p = b.ncols();
        debug_assert!(!(comp.total() == 2 && comp.ell == 2), "routed to closed form");
        let mut sum = 0.0;
        visit_cycle_skeletons(ds, comp, |nodes, wedges| {
            let total = wedges.len();
            let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(comp.ell);
            for (s, w) in wedges.iter().enumerate() {
                if *w == Wedge::Covariate {
                    pairs.push((nodes[s] as usize, nodes[(s + 1) % total] as usize));
                }
            }
            sum += match pairs.len() {
                0 => 1.0,
                1 => {
                    let (u, v) = pairs[0];
                    b.row(u).dot(&b.row(v))
                }
                2 => {
                    let (mut s0, mut s1, mut s01) = (0.0, 0.0, 0.0);
                    for q in 0..p {
                        let w0 = b[[pairs[0].0, q]] * b[[pairs[0].1, q]];
                        let w1 = b[[pairs[1].0, q]] * b[[pairs[1].1, q]];
                        s0 += w0;
                        s1 += w1;
                        s01 += w0 * w1;
                    }
                    s0 * s1 - s01
                }
                3 => {
                    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
                    let (mut s01, mut s02, mut s12, mut s012) = (0.0, 0.0, 0.0, 0.0);
                    for q in 0..p {
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
                    s0 * s1 * s2 - s01 * s2 - s02 * s1 - s12 * s0 + 2.0 * s012
                }
                _ => unreachable!("covariate wedge cap is 3"),
            };
        });
        sum / (ds.n() as f64).powi(comp.ell as i32)
    }
}

/// Open-path DFS over layer wedges with the given remaining type counts.
fn path_dfs<F: FnMut(&[u32])>(
    ds: &Dataset,
    ka: usize,
    pool: &mut [usize],
    nodes: &mut Vec<u32>,
    visited: &mut [bool],
    visit: &mut F,
) {
    if nodes.len() == ka + 1 {
        visit(nodes);
        return;
    }
    let cur = *nodes.last().unwrap() as usize;
    for r in 0..pool.len() {
        if pool[r] == 0 {
            continue;
        }
        pool[r] -= 1;
        for &w in ds.layers[r].neighbors(cur) {
            if !visited[w as usize] {
                nodes.push(w);
                visited[w as usize] = true;
                path_dfs(ds, ka, pool, nodes, visited, visit);
                visited[w as usize] = false;
                nodes.pop();
            }
        }
        pool[r] += 1;
    }
}

/// The cycle statistic for a single composition.
pub fn cycle_statistic(
    ds: &Dataset,
    comp: &WedgeComposition,
    caps: &Caps,
) -> Result<f64, CycleStatError> {
    StatEngine::new(ds, caps.clone()).statistic(comp)
}

/// Observed statistic plus moments and a standardized score under the null.
pub fn report(
    ds: &Dataset,
    comp: &WedgeComposition,
    params: &ModelParams,
    caps: &Caps,
) -> Result<CycleStatReport, CycleStatError> {
    let y = cycle_statistic(ds, comp, caps)?;
    Ok(build_report(comp, params, y))
}

fn build_report(comp: &WedgeComposition, params: &ModelParams, y: f64) -> CycleStatReport {
    if comp.ell == 0 {
        let h0 = h0_poisson_mean(comp, params);
        let h1 = h1_poisson_mean(comp, params);
        CycleStatReport {
            comp: comp.clone(),
            y,
            h0_mean: h0,
            h0_var: h0,
            h1_mean: h1 - h0,
            score: if h0 > 0.0 { (y - h0) / h0.sqrt() } else { 0.0 },
        }
    } else {
        let (_, var) = gaussian_moments(comp, params, Hypothesis::Null);
        let (shift, _) = gaussian_moments(comp, params, Hypothesis::Alternative);
        CycleStatReport {
            comp: comp.clone(),
            y,
            h0_mean: 0.0,
            h0_var: var,
            h1_mean: shift,
            score: y / var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectionOutcome {
    pub reject: bool,
    pub score: f64,
    pub comp: WedgeComposition,
}

/// Cycle-statistic detection test at level alpha.
///
/// Computes the statistic at the composition selected for the alternative,
/// standardizes by the null moments (centered and scaled Poisson when
/// ell = 0, Gaussian otherwise) and rejects above the standard normal
/// (1 - alpha) quantile.
pub fn detection_test(
    ds: &Dataset,
    params_alt: &ModelParams,
    k_total: usize,
    alpha: f64,
    caps: &Caps,
) -> Result<DetectionOutcome, CycleStatError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CycleStatError::BadAlpha(alpha));
    }
    let comp = select_composition(params_alt, k_total)?;
    let y = cycle_statistic(ds, &comp, caps)?;
    let score = if comp.ell == 0 {
        // The pure-network statistic is an integer cycle count.
        debug_assert!((y - y.round()).abs() < 1e-9);
        let mean = h0_poisson_mean(&comp, params_alt);
        (y - mean) / mean.sqrt()
    } else {
        let (_, var) = gaussian_moments(&comp, params_alt, Hypothesis::Null);
        y / var.sqrt()
    };
    let threshold = Normal::new(0.0, 1.0).unwrap().inverse_cdf(1.0 - alpha);
    Ok(DetectionOutcome { reject: score > threshold, score, comp })
}

/// All compositions with wedge total r over m layers and ell <= max_ell.
fn compositions_of_total(m: usize, r: usize, max_ell: usize) -> Vec<WedgeComposition> {
    fn rec(
        k: &mut Vec<usize>,
        j: usize,
        left: usize,
        max_ell: usize,
        out: &mut Vec<WedgeComposition>,
    ) {
        if j == k.len() {
            if left <= max_ell {
                out.push(WedgeComposition::new(k.clone(), left));
            }
            return;
        }
        for kj in 0..=left {
            k[j] = kj;
            rec(k, j + 1, left - kj, max_ell, out);
        }
        k[j] = 0;
    }
    let mut out = Vec::new();
    let mut k = vec![0usize; m];
    rec(&mut k, 0, r, max_ell, &mut out);
    out
}

/// A composition indexes actual cycles only if some cycle of that wedge
/// multiset exists: at least two wedges, and a two-wedge cycle cannot use
/// the same layer twice (one factor node per layer and pair).
fn admissible(comp: &WedgeComposition) -> bool {
    let total = comp.total();
    if total < 2 {
        return false;
    }
    if total == 2 && comp.k.iter().any(|&kj| kj == 2) {
        return false;
    }
    true
}

/// Finite truncation of the log-likelihood-ratio expansion: sum over
/// compositions with wedge total r <= k_max of
///   Y log(1 + delta) - lambda delta     (ell = 0)
///   (2 mu Y - mu^2) / (2 sigma^2)       (ell > 0)
/// with the coefficient functions above. Compositions that cannot index
/// any cycle are skipped, which preserves the unit-mean property of the
/// exponentiated truncation under the null.
pub fn truncated_log_lr(
    ds: &Dataset,
    params: &ModelParams,
    k_max: usize,
    caps: &Caps,
) -> Result<f64, CycleStatError> {
    if k_max > caps.cycle_ell {
        // Depth r includes the pure-covariate composition (0,...,0; r), so
        // truncations deeper than the covariate cap would be partial.
        return Err(CycleStatError::TruncationTooDeep { got: k_max, max: caps.cycle_ell });
    }
    let mut engine = StatEngine::new(ds, caps.clone());
    let mut total = 0.0;
    for r in 2..=k_max {
        for comp in compositions_of_total(params.m, r, caps.cycle_ell) {
            if !admissible(&comp) {
                continue;
            }
            let y = engine.statistic(&comp)?;
            if comp.ell == 0 {
                let delta = delta_coeff(&comp, params);
                let rate = h0_poisson_mean(&comp, params);
                total += y * (1.0 + delta).ln() - rate * delta;
            } else {
                let (shift, var) = gaussian_moments(&comp, params, Hypothesis::Alternative);
                total += (2.0 * shift * y - shift * shift) / (2.0 * var);
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sample_dataset, CommunityAssignment, CovariateMatrix, LayerGraph};
    use crate::oracles::brute_cycle_statistic;
    use ndarray::Array2;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn triangle_statistic() {
        let params = ModelParams::new(vec![0.5], 0.5, vec![1.5], 3, 2).unwrap();
        let ds = Dataset::from_parts(
            params,
            CommunityAssignment(vec![1; 3]),
            vec![LayerGraph::from_edges(1, 3, vec![(0, 1), (1, 2), (0, 2)])],
            CovariateMatrix { b: Array2::zeros((3, 2)), u: None },
            0,
        );
        let y = cycle_statistic(&ds, &WedgeComposition::new(vec![3], 0), &Caps::default());
        assert_eq!(y, Ok(1.0));
    }

    #[test]
    fn matches_oracle_on_random_instances() {
        let mut checked = 0;
        for seed in 0..40u64 {
            let n = 5 + (seed % 5) as usize;
            let p = 2 + (seed % 3) as usize;
            let m = 1 + (seed % 2) as usize;
            let params = ModelParams::new(
                vec![0.8; m],
                0.6,
                vec![2.0 + 0.5 * (seed % 3) as f64; m],
                n,
                p,
            )
            .unwrap();
            let ds = sample_dataset(&params, seed);
            let mut comps = vec![
                WedgeComposition::new(vec![0; m], 2),
                WedgeComposition::new(vec![0; m], 3),
            ];
            let mut one = vec![0; m];
            one[0] = 1;
            for ell in 1..=3 {
                comps.push(WedgeComposition::new(one.clone(), ell));
            }
            let mut two = vec![0; m];
            two[0] = 2;
            comps.push(WedgeComposition::new(two.clone(), 0));
            comps.push(WedgeComposition::new(two.clone(), 2));
            let mut three = vec![0; m];
            three[0] = 3;
            comps.push(WedgeComposition::new(three.clone(), 0));
            comps.push(WedgeComposition::new(three, 1));
            if m == 2 {
                comps.push(WedgeComposition::new(vec![1, 1], 0));
                comps.push(WedgeComposition::new(vec![1, 1], 2));
                comps.push(WedgeComposition::new(vec![2, 1], 1));
            }
            for comp in comps {
                let fast = cycle_statistic(&ds, &comp, &Caps::default()).unwrap();
                let brute = brute_cycle_statistic(&ds, &comp);
                assert!(
                    approx(fast, brute, 1e-12),
                    "seed {seed} comp {comp}: {fast} vs {brute}"
                );
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn poisson_means() {
        let p1 = ModelParams::new(vec![0.0], 0.0, vec![2.0], 100, 100).unwrap();
        let y = h0_poisson_mean(&WedgeComposition::new(vec![3], 0), &p1);
        assert!(approx(y, 4.0 / 3.0, 1e-12));

        let p2 = ModelParams::new(vec![0.0, 0.0], 0.0, vec![2.0, 3.0], 100, 100).unwrap();
        let y = h0_poisson_mean(&WedgeComposition::new(vec![1, 1], 0), &p2);
        assert!(approx(y, 3.0, 1e-12));

        let p3 = ModelParams::new(vec![1.0, 1.0], 0.0, vec![2.0, 3.0], 100, 100).unwrap();
        let y = h1_poisson_mean(&WedgeComposition::new(vec![1, 1], 0), &p3);
        assert!(approx(y, 3.0 + 6f64.sqrt() / 2.0, 1e-12));

        let p4 = ModelParams::new(vec![2.0], 0.0, vec![4.0], 100, 100).unwrap();
        let y = h1_poisson_mean(&WedgeComposition::new(vec![3], 0), &p4);
        assert!(approx(y, 128.0 / 6.0, 1e-12));

        // Zero-signal layers leave the alternative rate at the null rate.
        let y0 = h0_poisson_mean(&WedgeComposition::new(vec![1, 1], 0), &p2);
        let y1 = h1_poisson_mean(&WedgeComposition::new(vec![1, 1], 0), &p2);
        assert_eq!(y0, y1);

        // A zero average degree zeroes the rate (formula-level check).
        let y = poisson_mean_formula(&WedgeComposition::new(vec![1, 1], 0), &[0.0, 3.0], None);
        assert_eq!(y, 0.0);
    }

    #[test]
    fn gaussian_moment_examples() {
        let params = ModelParams::new(vec![1.0], 0.5, vec![2.0], 100, 100).unwrap();
        let comp = WedgeComposition::new(vec![1], 1);
        let (m0, v0) = gaussian_moments(&comp, &params, Hypothesis::Null);
        assert_eq!(m0, 0.0);
        assert!(approx(v0, 1.0, 1e-12));
        let (m1, v1) = gaussian_moments(&comp, &params, Hypothesis::Alternative);
        assert!(approx(m1, 2f64.sqrt() / 4.0, 1e-12));
        assert_eq!(v0, v1);

        let null_mu = ModelParams::new(vec![1.0], 0.0, vec![2.0], 100, 100).unwrap();
        let (m1, _) = gaussian_moments(&comp, &null_mu, Hypothesis::Alternative);
        assert_eq!(m1, 0.0);
    }

    #[test]
    fn delta_examples() {
        let params = ModelParams::new(vec![1.0], 0.0, vec![4.0], 100, 100).unwrap();
        assert!(approx(delta_coeff(&WedgeComposition::new(vec![2], 0), &params), 0.25, 1e-12));
        let zero = ModelParams::new(vec![0.0], 0.0, vec![4.0], 100, 100).unwrap();
        assert_eq!(delta_coeff(&WedgeComposition::new(vec![2], 0), &zero), 0.0);
        assert_eq!(delta_coeff(&WedgeComposition::new(vec![0], 0), &params), 1.0);
    }

    #[test]
    fn composition_selection() {
        // lambda^2 = (0.5, 0.3), mu^2/gamma = 0.4, k = 10 -> (4, 2; 4).
        let params = ModelParams::new(
            vec![0.5f64.sqrt(), 0.3f64.sqrt()],
            0.4f64.sqrt(),
            vec![2.0, 2.0],
            100,
            100,
        )
        .unwrap();
        let comp = select_composition(&params, 10).unwrap();
        assert_eq!(comp, WedgeComposition::new(vec![4, 2], 4));

        let net = ModelParams::new(vec![1.0], 0.0, vec![2.0], 100, 100).unwrap();
        assert_eq!(select_composition(&net, 5).unwrap(), WedgeComposition::new(vec![5], 0));

        let cov = ModelParams::new(vec![0.0], 1.0, vec![2.0], 100, 100).unwrap();
        assert_eq!(select_composition(&cov, 5).unwrap(), WedgeComposition::new(vec![0], 5));

        let null = ModelParams::new(vec![0.0], 0.0, vec![2.0], 100, 100).unwrap();
        assert_eq!(select_composition(&null, 5), Err(CycleStatError::ZeroSnr));
    }

    #[test]
    fn zero_snr_log_lr_is_zero() {
        let params = ModelParams::new(vec![0.0, 0.0], 0.0, vec![2.0, 3.0], 30, 20).unwrap();
        let ds = sample_dataset(&params, 3);
        let v = truncated_log_lr(&ds, &params, 3, &Caps::default()).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn log_lr_matches_hand_composition() {
        let params = ModelParams::new(vec![0.9], 0.7, vec![2.5], 12, 4).unwrap();
        let ds = sample_dataset(&params, 17);
        let caps = Caps::default();
        let got = truncated_log_lr(&ds, &params, 3, &caps).unwrap();

        let mut expect = 0.0;
        for comp in [
            WedgeComposition::new(vec![1], 1),
            WedgeComposition::new(vec![0], 2),
            WedgeComposition::new(vec![3], 0),
            WedgeComposition::new(vec![2], 1),
            WedgeComposition::new(vec![1], 2),
            WedgeComposition::new(vec![0], 3),
        ] {
            let y = cycle_statistic(&ds, &comp, &caps).unwrap();
            if comp.ell == 0 {
                let d = delta_coeff(&comp, &params);
                expect += y * (1.0 + d).ln() - h0_poisson_mean(&comp, &params) * d;
            } else {
                let (mu, var) = gaussian_moments(&comp, &params, Hypothesis::Alternative);
                expect += (2.0 * mu * y - mu * mu) / (2.0 * var);
            }
        }
        assert!(approx(got, expect, 1e-12), "{got} vs {expect}");
    }

    #[test]
    fn layer_permutation_equivariance() {
        let params = ModelParams::new(vec![1.0, 0.5], 0.4, vec![2.0, 3.0], 10, 3).unwrap();
        let ds = sample_dataset(&params, 23);
        let swapped = Dataset::from_parts(
            ModelParams::new(vec![0.5, 1.0], 0.4, vec![3.0, 2.0], 10, 3).unwrap(),
            ds.sigma.clone(),
            vec![
                LayerGraph::from_edges(1, 10, ds.layers[1].edges.clone()),
                LayerGraph::from_edges(2, 10, ds.layers[0].edges.clone()),
            ],
            ds.covariates.clone(),
            0,
        );
        let caps = Caps::default();
        for (k_a, k_b) in [(vec![2, 1], vec![1, 2]), (vec![1, 0], vec![0, 1])] {
            let a = cycle_statistic(&ds, &WedgeComposition::new(k_a, 1), &caps).unwrap();
            let b = cycle_statistic(&swapped, &WedgeComposition::new(k_b, 1), &caps).unwrap();
            assert!(approx(a, b, 1e-12));
        }
    }

    #[test]
    fn detection_rejects_zero_snr_alternative() {
        let params = ModelParams::new(vec![0.0], 0.0, vec![2.0], 50, 50).unwrap();
        let ds = sample_dataset(&params, 1);
        assert_eq!(
            detection_test(&ds, &params, 4, 0.05, &Caps::default()).unwrap_err(),
            CycleStatError::ZeroSnr
        );
    }
}
