//! Slow, obviously correct reference implementations used by tests to pin
//! the fast paths. These transcribe the definitions directly and share no
//! code with the fast paths beyond the domain types.

use nalgebra::DMatrix;

use crate::factor_graph::{SelfAvoidingWalk, Wedge, WedgeComposition};
use crate::model::Dataset;

/// Direct transcription of the cycle statistic: sum over all ordered node
/// tuples, all wedge-type interleavings and all ordered distinct factor
/// assignments, divided by the 2k symmetry count and scaled by n^-ell.
///
/// Guarded to n <= 12, p <= 4, total <= 4.
pub fn brute_cycle_statistic(ds: &Dataset, comp: &WedgeComposition) -> f64 {
    let n = ds.n();
    let p = ds.p();
    let total = comp.total();
    assert!(n <= 12 && p <= 4 && (2..=4).contains(&total), "oracle size guard");
    assert_eq!(comp.k.len(), ds.params.m);

    let types: Vec<Wedge> = {
        let mut t = Vec::new();
        for (r, &kr) in comp.k.iter().enumerate() {
            t.extend(std::iter::repeat(Wedge::Layer(r)).take(kr));
        }
        t.extend(std::iter::repeat(Wedge::Covariate).take(comp.ell));
        t
    };

    let mut sum = 0.0;
    let mut tuple = Vec::with_capacity(total);
    ordered_tuples(n, total, &mut tuple, &mut |nodes| {
        let mut arrangement = Vec::with_capacity(total);
        let mut used = vec![false; total];
        type_arrangements(&types, &mut used, &mut arrangement, &mut |wedges| {
            // Every A wedge must sit on a present edge and use a distinct
            // factor node (layer, pair); pairs are distinct automatically
            // except in two-wedge cycles.
            let mut a_factors: Vec<(usize, u32, u32)> = Vec::new();
            let mut ok = true;
            for (s, w) in wedges.iter().enumerate() {
                if let Wedge::Layer(r) = w {
                    let u = nodes[s];
                    let v = nodes[(s + 1) % total];
                    if !ds.layers[*r].has_edge(u as usize, v as usize) {
                        ok = false;
                        break;
                    }
                    let key = (*r, u.min(v), u.max(v));
                    if a_factors.contains(&key) {
                        ok = false;
                        break;
                    }
                    a_factors.push(key);
                }
            }
            if !ok {
                return;
            }
            let b_slots: Vec<usize> =
                (0..total).filter(|&s| wedges[s] == Wedge::Covariate).collect();
            let mut assignment = Vec::with_capacity(b_slots.len());
            factor_assignments(p, b_slots.len(), &mut assignment, &mut |qs| {
                let mut w = 1.0;
                for (slot, &q) in b_slots.iter().zip(qs) {
                    let u = nodes[*slot] as usize;
                    let v = nodes[(*slot + 1) % total] as usize;
                    w *= ds.covariates.b[[u, q as usize]] * ds.covariates.b[[v, q as usize]];
                }
                sum += w;
            });
        });
    });

    sum / (2.0 * total as f64) / (n as f64).powi(comp.ell as i32)
}

fn ordered_tuples(n: usize, len: usize, cur: &mut Vec<u32>, f: &mut impl FnMut(&[u32])) {
    if cur.len() == len {
        f(cur);
        return;
    }
    for v in 0..n as u32 {
        if !cur.contains(&v) {
            cur.push(v);
            ordered_tuples(n, len, cur, f);
            cur.pop();
        }
    }
}

fn type_arrangements(
    types: &[Wedge],
    used: &mut [bool],
    cur: &mut Vec<Wedge>,
    f: &mut impl FnMut(&[Wedge]),
) {
    if cur.len() == types.len() {
        f(cur);
        return;
    }
    let mut seen: Vec<Wedge> = Vec::new();
    for i in 0..types.len() {
        if used[i] || seen.contains(&types[i]) {
            continue;
        }
        seen.push(types[i]);
        used[i] = true;
        cur.push(types[i]);
        type_arrangements(types, used, cur, f);
        cur.pop();
        used[i] = false;
    }
}

fn factor_assignments(p: usize, len: usize, cur: &mut Vec<u32>, f: &mut impl FnMut(&[u32])) {
    if cur.len() == len {
        f(cur);
        return;
    }
    for q in 0..p as u32 {
        if !cur.contains(&q) {
            cur.push(q);
            factor_assignments(p, len, cur, f);
            cur.pop();
        }
    }
}

/// Exhaustive recursion over walks from i1 to i2 honoring the three
/// self-avoidance rules: all variable nodes distinct, no covariate factor
/// node twice, no two layer wedges between the same node pair.
pub fn brute_enumerate_saws(
    ds: &Dataset,
    i1: usize,
    i2: usize,
    comp: &WedgeComposition,
) -> Vec<SelfAvoidingWalk> {
    let n = ds.n();
    let total = comp.total();
    assert!(n <= 12 && ds.p() <= 4 && (1..=4).contains(&total), "oracle size guard");
    assert!(i1 != i2);

    let mut remaining = comp.k.clone();
    remaining.push(comp.ell);
    let mut out = Vec::new();
    let mut nodes = vec![i1 as u32];
    let mut wedges = Vec::new();
    let mut factors = Vec::new();
    saw_recurse(ds, i2, total, &mut remaining, &mut nodes, &mut wedges, &mut factors, &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
fn saw_recurse(
    ds: &Dataset,
    target: usize,
    total: usize,
    remaining: &mut Vec<usize>,
    nodes: &mut Vec<u32>,
    wedges: &mut Vec<Wedge>,
    factors: &mut Vec<u32>,
    out: &mut Vec<SelfAvoidingWalk>,
) {
    if wedges.len() == total {
        if *nodes.last().unwrap() as usize == target {
            out.push(SelfAvoidingWalk {
                nodes: nodes.clone(),
                wedges: wedges.clone(),
                b_factors: factors.clone(),
            });
        }
        return;
    }
    let cur = *nodes.last().unwrap();
    let m = remaining.len() - 1;
    for idx in 0..remaining.len() {
        if remaining[idx] == 0 {
            continue;
        }
        let wedge = if idx == m { Wedge::Covariate } else { Wedge::Layer(idx) };
        for next in 0..ds.n() as u32 {
            // Rule 1: variable nodes all distinct.
            if nodes.contains(&next) {
                continue;
            }
            // Endpoint only at the final position.
            if next as usize == target && wedges.len() + 1 != total {
                continue;
            }
            // Rule 3: no two layer wedges between the same pair. With all
            // variable nodes distinct no pair can repeat; checked anyway
            // for fidelity to the definition.
            if let Wedge::Layer(_) = wedge {
                let dup = wedges.iter().enumerate().any(|(s, w)| {
                    matches!(w, Wedge::Layer(_)) && {
                        let (a, b) = (nodes[s], nodes[s + 1]);
                        (a == cur && b == next) || (a == next && b == cur)
                    }
                });
                if dup {
                    continue;
                }
            }
            remaining[idx] -= 1;
            nodes.push(next);
            wedges.push(wedge);
            if wedge == Wedge::Covariate {
                // Rule 2: no covariate factor node twice.
                for q in 0..ds.p() as u32 {
                    if factors.contains(&q) {
                        continue;
                    }
                    factors.push(q);
                    saw_recurse(ds, target, total, remaining, nodes, wedges, factors, out);
                    factors.pop();
                }
            } else {
                saw_recurse(ds, target, total, remaining, nodes, wedges, factors, out);
            }
            wedges.pop();
            nodes.pop();
            remaining[idx] += 1;
        }
    }
}

/// Independent verification of a PSD-program solution: unit diagonal,
/// minimum eigenvalue via shifted power iteration, and the inner-product
/// halfspace constraint.
#[derive(Debug, Clone)]
pub struct PsdCheckReport {
    pub diag_max_dev: f64,
    pub min_eigenvalue: f64,
    pub inner: f64,
    pub required_inner: f64,
    pub pass_diag: bool,
    pub pass_psd: bool,
    pub pass_halfspace: bool,
}

impl PsdCheckReport {
    pub fn pass_all(&self) -> bool {
        self.pass_diag && self.pass_psd && self.pass_halfspace
    }
}

pub fn check_psd_solution(
    psi: &DMatrix<f64>,
    sigma_hat: &DMatrix<f64>,
    delta: f64,
) -> PsdCheckReport {
    let n = psi.nrows();
    let diag_max_dev = (0..n).map(|i| (psi[(i, i)] - 1.0).abs()).fold(0.0, f64::max);
    let min_eigenvalue = min_eig_power_iteration(psi);
    let inner = psi.dot(sigma_hat);
    let frob = sigma_hat.norm();
    let required_inner = delta * n as f64 * frob;
    let scale = (n as f64 * frob).max(1.0);
    PsdCheckReport {
        diag_max_dev,
        min_eigenvalue,
        inner,
        required_inner,
        pass_diag: diag_max_dev <= 1e-8,
        pass_psd: min_eigenvalue >= -1e-8,
        pass_halfspace: inner >= required_inner - 1e-6 * scale,
    }
}

/// Smallest eigenvalue of a symmetric matrix via power iteration on the
/// Gershgorin shift c*I - Psi.
fn min_eig_power_iteration(psi: &DMatrix<f64>) -> f64 {
    let n = psi.nrows();
    let c = (0..n)
        .map(|i| (0..n).map(|j| psi[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max)
        .max(1.0);
    // Deterministic start vector with no special structure.
    let mut v: Vec<f64> = (0..n)
        .map(|i| {
            let x = ((i as u64).wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407)
                >> 11) as f64;
            x / (1u64 << 53) as f64 + 0.5
        })
        .collect();
    normalize(&mut v);
    let mut rayleigh = 0.0;
    let mut prev = f64::INFINITY;
    for it in 0..20_000 {
        let mut w = vec![0.0; n];
        for i in 0..n {
            let mut acc = c * v[i];
            for j in 0..n {
                acc -= psi[(i, j)] * v[j];
            }
            w[i] = acc;
        }
        rayleigh = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        normalize(&mut w);
        v = w;
        if it > 50 && (rayleigh - prev).abs() <= 1e-14 * rayleigh.abs().max(1.0) {
            break;
        }
        prev = rayleigh;
    }
    c - rayleigh
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sample_dataset, ModelParams};

    #[test]
    fn triangle_statistic_is_one() {
        use crate::model::{CommunityAssignment, CovariateMatrix, Dataset, LayerGraph};
        use ndarray::Array2;
        let params = ModelParams::new(vec![0.5], 0.5, vec![1.5], 4, 2).unwrap();
        let ds = Dataset::from_parts(
            params,
            CommunityAssignment(vec![1; 4]),
            vec![LayerGraph::from_edges(1, 4, vec![(0, 1), (1, 2), (0, 2)])],
            CovariateMatrix { b: Array2::zeros((4, 2)), u: None },
            0,
        );
        let y = brute_cycle_statistic(&ds, &WedgeComposition::new(vec![3], 0));
        assert_eq!(y, 1.0);
        let empty = Dataset::from_parts(
            ds.params.clone(),
            ds.sigma.clone(),
            vec![LayerGraph::from_edges(1, 4, vec![])],
            ds.covariates.clone(),
            0,
        );
        assert_eq!(brute_cycle_statistic(&empty, &WedgeComposition::new(vec![3], 0)), 0.0);
    }

    #[test]
    fn brute_saws_match_fast_counts() {
        let params = ModelParams::new(vec![0.9], 0.4, vec![2.0], 7, 3).unwrap();
        let ds = sample_dataset(&params, 5);
        let caps = crate::factor_graph::Caps::default();
        for comp in [
            WedgeComposition::new(vec![2], 0),
            WedgeComposition::new(vec![1], 1),
            WedgeComposition::new(vec![0], 2),
            WedgeComposition::new(vec![2], 2),
        ] {
            let brute = brute_enumerate_saws(&ds, 0, 3, &comp);
            let fast = crate::factor_graph::count_saws(&ds, 0, 3, &comp, &caps).unwrap();
            assert_eq!(brute.len() as u128, fast, "comp {comp}");
            let mut a: Vec<_> = brute.into_iter().collect();
            let mut b = crate::factor_graph::enumerate_saws(&ds, 0, 3, &comp, &caps).unwrap();
            a.sort();
            b.sort();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn psd_checker_flags_negative_eigenvalue() {
        let eye = DMatrix::<f64>::identity(5, 5);
        let zero = DMatrix::<f64>::zeros(5, 5);
        let report = check_psd_solution(&eye, &zero, 0.5);
        assert!(report.pass_all());

        let mut bad = eye.clone();
        bad[(0, 1)] = 1.01;
        bad[(1, 0)] = 1.01;
        let report = check_psd_solution(&bad, &zero, 0.5);
        assert!(!report.pass_psd);
        assert!(report.min_eigenvalue < -0.005);
    }
}
