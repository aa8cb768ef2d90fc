//! Wedges, cycles and self-avoiding walks on the factor graph.
//!
//! The factor graph has one variable node per subject, one factor node per
//! (layer, node pair) and one factor node per covariate. A wedge is a
//! length-2 path through a factor node; cycles and walks are indexed by
//! their wedge composition (k_1, ..., k_m, ell).
//!
//! Cycles are enumerated once up to rotation and reflection by anchoring at
//! the minimum variable node and fixing the orientation. Layer wedges are
//! followed along present edges only; covariate wedges connect every node
//! pair, with factor indices required pairwise distinct.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Dataset;

/// Counts of wedges of each type: k_j layer-j wedges and ell covariate wedges.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WedgeComposition {
    pub k: Vec<usize>,
    pub ell: usize,
}

impl WedgeComposition {
    pub fn new(k: Vec<usize>, ell: usize) -> Self {
        Self { k, ell }
    }

    /// Total number of wedges.
    pub fn total(&self) -> usize {
        self.k.iter().sum::<usize>() + self.ell
    }

    /// Number of layer wedges.
    pub fn network_total(&self) -> usize {
        self.k.iter().sum()
    }

    /// Wedge arrangements around a cycle or along a walk:
    /// total! / (k_1! ... k_m! ell!).
    pub fn arrangements(&self) -> u128 {
        let mut v = factorial(self.total());
        for &kj in &self.k {
            v /= factorial(kj);
        }
        v / factorial(self.ell)
    }
}

impl std::fmt::Display for WedgeComposition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let ks: Vec<String> = self.k.iter().map(|k| k.to_string()).collect();
        write!(f, "({};{})", ks.join(","), self.ell)
    }
}

/// A single wedge type: layer r (0-based) or covariate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Wedge {
    Layer(usize),
    Covariate,
}

/// A cycle on the factor graph. Slot s joins `nodes[s]` to
/// `nodes[(s+1) % len]`; `b_factors` lists the covariate factor index of
/// each covariate slot, in slot order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FactorCycle {
    pub nodes: Vec<u32>,
    pub wedges: Vec<Wedge>,
    pub b_factors: Vec<u32>,
}

/// A self-avoiding walk from `nodes[0]` to `nodes[last]`. Slot s joins
/// `nodes[s]` to `nodes[s+1]`. A walk and its reversal are distinct.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SelfAvoidingWalk {
    pub nodes: Vec<u32>,
    pub wedges: Vec<Wedge>,
    pub b_factors: Vec<u32>,
}

/// Enumeration cost caps.
#[derive(Debug, Clone)]
pub struct Caps {
    /// Max wedge total for cycle enumeration and statistics.
    pub cycle_total: usize,
    /// Max covariate wedges per cycle.
    pub cycle_ell: usize,
    /// Max wedge total for walk counting and sampling.
    pub saw_total: usize,
    /// Max wedge total for exact walk enumeration.
    pub saw_enum_total: usize,
    /// Max node count for exact walk enumeration.
    pub saw_enum_nodes: usize,
}

impl Default for Caps {
    fn default() -> Self {
        Self { cycle_total: 8, cycle_ell: 3, saw_total: 8, saw_enum_total: 4, saw_enum_nodes: 64 }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FactorGraphError {
    #[error("composition {comp} exceeds cap ({what} limit {limit}): enumeration cost grows as O(n^{total})")]
    CapExceeded { comp: String, what: &'static str, limit: usize, total: usize },

    #[error("composition has {got} layer slots but the dataset has {expect} layers")]
    LayerCountMismatch { got: usize, expect: usize },

    #[error("composition total must be at least {min} (got {got})")]
    TotalTooSmall { min: usize, got: usize },

    #[error("walk endpoints must be distinct")]
    EqualEndpoints,

    #[error("the walk set is empty")]
    EmptyWalkSet,
}

fn factorial(k: usize) -> u128 {
    (1..=k as u128).product()
}

/// (x)(x-1)...(x-len+1) as u128; 0 if the range dips below 1.
fn falling(x: usize, len: usize) -> u128 {
    if len == 0 {
        return 1;
    }
    if x < len {
        return 0;
    }
    ((x - len + 1)..=x).map(|v| v as u128).product()
}

fn check_comp(comp: &WedgeComposition, ds: &Dataset) -> Result<(), FactorGraphError> {
    if comp.k.len() != ds.params.m {
        return Err(FactorGraphError::LayerCountMismatch {
            got: comp.k.len(),
            expect: ds.params.m,
        });
    }
    Ok(())
}

fn check_cycle_caps(comp: &WedgeComposition, caps: &Caps) -> Result<(), FactorGraphError> {
    if comp.total() > caps.cycle_total {
        return Err(FactorGraphError::CapExceeded {
            comp: comp.to_string(),
            what: "cycle total",
            limit: caps.cycle_total,
            total: comp.total(),
        });
    }
    if comp.ell > caps.cycle_ell {
        return Err(FactorGraphError::CapExceeded {
            comp: comp.to_string(),
            what: "covariate wedges",
            limit: caps.cycle_ell,
            total: comp.total(),
        });
    }
    Ok(())
}

/// Remaining-wedge counts during a DFS, indexed m layers then covariate.
#[derive(Clone)]
struct TypePool {
    counts: Vec<usize>,
    left: usize,
}

impl TypePool {
    fn new(comp: &WedgeComposition) -> Self {
        let mut counts = comp.k.clone();
        counts.push(comp.ell);
        Self { left: counts.iter().sum(), counts }
    }

    fn wedge_of(&self, idx: usize) -> Wedge {
        if idx == self.counts.len() - 1 {
            Wedge::Covariate
        } else {
            Wedge::Layer(idx)
        }
    }

    fn take(&mut self, idx: usize) {
        self.counts[idx] -= 1;
        self.left -= 1;
    }

    fn put(&mut self, idx: usize) {
        self.counts[idx] += 1;
        self.left += 1;
    }
}

/// Visit every cycle skeleton (nodes + wedge types, covariate factors left
/// implicit) of the given composition exactly once up to cycle symmetry.
///
/// Layer slots follow present edges only; covariate slots range over all
/// node pairs. The visitor receives the node cycle and the slot types.
pub(crate) fn visit_cycle_skeletons<F: FnMut(&[u32], &[Wedge])>(
    ds: &Dataset,
    comp: &WedgeComposition,
    mut visit: F,
) {
    let total = comp.total();
    assert!(total >= 2);
    let n = ds.n();
    if total == 2 {
        visit_two_wedge_skeletons(ds, comp, &mut visit);
        return;
    }
    let mut pool = TypePool::new(comp);
    let mut nodes: Vec<u32> = Vec::with_capacity(total);
    let mut wedges: Vec<Wedge> = Vec::with_capacity(total);
    let mut visited = vec![false; n];
    for anchor in 0..n as u32 {
        nodes.push(anchor);
        visited[anchor as usize] = true;
        cycle_dfs(ds, anchor, total, &mut pool, &mut nodes, &mut wedges, &mut visited, &mut visit);
        visited[anchor as usize] = false;
        nodes.pop();
    }
}

#[allow(clippy::too_many_arguments)]
fn cycle_dfs<F: FnMut(&[u32], &[Wedge])>(
    ds: &Dataset,
    anchor: u32,
    total: usize,
    pool: &mut TypePool,
    nodes: &mut Vec<u32>,
    wedges: &mut Vec<Wedge>,
    visited: &mut [bool],
    visit: &mut F,
) {
    let cur = *nodes.last().unwrap() as usize;
    let closing = wedges.len() == total - 1;
    for idx in 0..pool.counts.len() {
        if pool.counts[idx] == 0 {
            continue;
        }
        let wedge = pool.wedge_of(idx);
        if closing {
            // Final slot returns to the anchor; orientation is canonical
            // when the second node is smaller than the last.
            if nodes[1] < nodes[total - 1] {
                let ok = match wedge {
                    Wedge::Layer(r) => ds.layers[r].has_edge(cur, anchor as usize),
                    Wedge::Covariate => true,
                };
                if ok {
                    wedges.push(wedge);
                    visit(nodes, wedges);
                    wedges.pop();
                }
            }
            continue;
        }
        pool.take(idx);
        wedges.push(wedge);
        match wedge {
            Wedge::Layer(r) => {
                for &w in ds.layers[r].neighbors(cur) {
                    if w > anchor && !visited[w as usize] {
                        nodes.push(w);
                        visited[w as usize] = true;
                        cycle_dfs(ds, anchor, total, pool, nodes, wedges, visited, visit);
                        visited[w as usize] = false;
                        nodes.pop();
                    }
                }
            }
            Wedge::Covariate => {
                for w in (anchor + 1)..ds.n() as u32 {
                    if !visited[w as usize] {
                        nodes.push(w);
                        visited[w as usize] = true;
                        cycle_dfs(ds, anchor, total, pool, nodes, wedges, visited, visit);
                        visited[w as usize] = false;
                        nodes.pop();
                    }
                }
            }
        }
        wedges.pop();
        pool.put(idx);
    }
}

/// Two-wedge cycles: both wedges join the same node pair and must be
/// distinct factor objects, which rules out two same-layer wedges.
fn visit_two_wedge_skeletons<F: FnMut(&[u32], &[Wedge])>(
    ds: &Dataset,
    comp: &WedgeComposition,
    visit: &mut F,
) {
    let types: Vec<Wedge> = {
        let mut t = Vec::new();
        for (r, &kr) in comp.k.iter().enumerate() {
            for _ in 0..kr {
                t.push(Wedge::Layer(r));
            }
        }
        for _ in 0..comp.ell {
            t.push(Wedge::Covariate);
        }
        t
    };
    debug_assert_eq!(types.len(), 2);
    if types[0] == types[1] {
        if let Wedge::Layer(_) = types[0] {
            return; // one factor node per (layer, pair): no such cycle
        }
    }
    match (types[0], types[1]) {
        (Wedge::Layer(r), Wedge::Layer(s)) => {
            // Intersection of two edge sets; walk the shorter one.
            let (small, big) = if ds.layers[r].num_edges() <= ds.layers[s].num_edges() {
                (r, s)
            } else {
                (s, r)
            };
            for &(i, j) in &ds.layers[small].edges {
                if ds.layers[big].has_edge(i as usize, j as usize) {
                    visit(&[i, j], &[Wedge::Layer(r.min(s)), Wedge::Layer(r.max(s))]);
                }
            }
        }
        (Wedge::Layer(r), Wedge::Covariate) | (Wedge::Covariate, Wedge::Layer(r)) => {
            for &(i, j) in &ds.layers[r].edges {
                visit(&[i, j], &[Wedge::Layer(r), Wedge::Covariate]);
            }
        }
        (Wedge::Covariate, Wedge::Covariate) => {
            let n = ds.n() as u32;
            for i in 0..n {
                for j in (i + 1)..n {
                    visit(&[i, j], &[Wedge::Covariate, Wedge::Covariate]);
                }
            }
        }
    }
}

/// Enumerate every cycle of the given composition exactly once up to
/// rotation and reflection, with covariate factor indices materialized.
pub fn enumerate_cycles(
    ds: &Dataset,
    comp: &WedgeComposition,
    caps: &Caps,
) -> Result<Vec<FactorCycle>, FactorGraphError> {
    check_comp(comp, ds)?;
    check_cycle_caps(comp, caps)?;
    if comp.total() < 2 {
        return Err(FactorGraphError::TotalTooSmall { min: 2, got: comp.total() });
    }
    let p = ds.p();
    let mut out = Vec::new();
    visit_cycle_skeletons(ds, comp, |nodes, wedges| {
        let b_slots = wedges.iter().filter(|w| **w == Wedge::Covariate).count();
        // Two covariate wedges on the same pair form an unordered factor
        // pair; that happens exactly for the (ell = 2, total = 2) cycle.
        let unordered_pair = nodes.len() == 2 && b_slots == 2;
        let mut assignment = Vec::with_capacity(b_slots);
        assign_factors(p, b_slots, unordered_pair, &mut assignment, &mut |assignment| {
            out.push(FactorCycle {
                nodes: nodes.to_vec(),
                wedges: wedges.to_vec(),
                b_factors: assignment.to_vec(),
            });
        });
    });
    Ok(out)
}

fn assign_factors(
    p: usize,
    slots: usize,
    unordered_pair: bool,
    cur: &mut Vec<u32>,
    emit: &mut impl FnMut(&[u32]),
) {
    if cur.len() == slots {
        emit(cur);
        return;
    }
    for q in 0..p as u32 {
        if cur.contains(&q) {
            continue;
        }
        if unordered_pair && cur.len() == 1 && q < cur[0] {
            continue; // canonical order for the symmetric two-wedge cycle
        }
        cur.push(q);
        assign_factors(p, slots, unordered_pair, cur, emit);
        cur.pop();
    }
}

/// Number of self-avoiding walks from i1 to i2 with the given composition
/// on the complete wedge structure (layer wedges counted whether or not the
/// edge is present; the weight, not existence, carries the data).
pub fn count_saws(
    ds: &Dataset,
    i1: usize,
    i2: usize,
    comp: &WedgeComposition,
    caps: &Caps,
) -> Result<u128, FactorGraphError> {
    check_comp(comp, ds)?;
    if i1 == i2 {
        return Err(FactorGraphError::EqualEndpoints);
    }
    let total = comp.total();
    if total < 1 {
        return Err(FactorGraphError::TotalTooSmall { min: 1, got: total });
    }
    if total > caps.saw_total {
        return Err(FactorGraphError::CapExceeded {
            comp: comp.to_string(),
            what: "walk total",
            limit: caps.saw_total,
            total,
        });
    }
    // Interior nodes: ordered distinct choices outside {i1, i2}; wedge
    // types: multiset arrangements; covariate factors: ordered distinct.
    Ok(falling(ds.n() - 2, total - 1) * comp.arrangements() * falling(ds.p(), comp.ell))
}

/// Visit every walk skeleton (nodes + types, factors implicit) once.
pub(crate) fn visit_saw_skeletons<F: FnMut(&[u32], &[Wedge])>(
    ds: &Dataset,
    i1: usize,
    i2: usize,
    comp: &WedgeComposition,
    mut visit: F,
) {
    let total = comp.total();
    let mut pool = TypePool::new(comp);
    let mut nodes = vec![i1 as u32];
    let mut wedges = Vec::with_capacity(total);
    let mut visited = vec![false; ds.n()];
    visited[i1] = true;
    visited[i2] = true;
    saw_dfs(ds, i2 as u32, total, &mut pool, &mut nodes, &mut wedges, &mut visited, &mut visit);
}

#[allow(clippy::too_many_arguments)]
fn saw_dfs<F: FnMut(&[u32], &[Wedge])>(
    ds: &Dataset,
    target: u32,
    total: usize,
    pool: &mut TypePool,
    nodes: &mut Vec<u32>,
    wedges: &mut Vec<Wedge>,
    visited: &mut [bool],
    visit: &mut F,
) {
    let last = wedges.len() == total - 1;
    for idx in 0..pool.counts.len() {
        if pool.counts[idx] == 0 {
            continue;
        }
        let wedge = pool.wedge_of(idx);
        if last {
            wedges.push(wedge);
            nodes.push(target);
            visit(nodes, wedges);
            nodes.pop();
            wedges.pop();
            continue;
        }
        pool.take(idx);
        wedges.push(wedge);
        for w in 0..ds.n() as u32 {
            if !visited[w as usize] {
                nodes.push(w);
                visited[w as usize] = true;
                saw_dfs(ds, target, total, pool, nodes, wedges, visited, visit);
                visited[w as usize] = false;
                nodes.pop();
            }
        }
        wedges.pop();
        pool.put(idx);
    }
}

/// Enumerate the walk set explicitly, factors materialized.
pub fn enumerate_saws(
    ds: &Dataset,
    i1: usize,
    i2: usize,
    comp: &WedgeComposition,
    caps: &Caps,
) -> Result<Vec<SelfAvoidingWalk>, FactorGraphError> {
    check_comp(comp, ds)?;
    if i1 == i2 {
        return Err(FactorGraphError::EqualEndpoints);
    }
    let total = comp.total();
    if total < 1 {
        return Err(FactorGraphError::TotalTooSmall { min: 1, got: total });
    }
    if total > caps.saw_enum_total || ds.n() > caps.saw_enum_nodes {
        return Err(FactorGraphError::CapExceeded {
            comp: comp.to_string(),
            what: "exact walk enumeration",
            limit: caps.saw_enum_total,
            total,
        });
    }
    let p = ds.p();
    let mut out = Vec::new();
    visit_saw_skeletons(ds, i1, i2, comp, |nodes, wedges| {
        let b_slots = wedges.iter().filter(|w| **w == Wedge::Covariate).count();
        let mut assignment = Vec::with_capacity(b_slots);
        assign_factors(p, b_slots, false, &mut assignment, &mut |assignment| {
            out.push(SelfAvoidingWalk {
                nodes: nodes.to_vec(),
                wedges: wedges.to_vec(),
                b_factors: assignment.to_vec(),
            });
        });
    });
    Ok(out)
}

/// Draw `n_samples` i.i.d. uniform walks from the walk set.
///
/// Sequential sampling: the number of completions of a prefix has a closed
/// form (falling factorials times arrangements), so choosing the next wedge
/// type with probability remaining/slots-left, the next node uniformly
/// among the unused, and the factor uniformly among the unused is exactly
/// uniform over the walk set.
pub fn sample_saws<R: Rng>(
    ds: &Dataset,
    i1: usize,
    i2: usize,
    comp: &WedgeComposition,
    n_samples: usize,
    caps: &Caps,
    rng: &mut R,
) -> Result<Vec<SelfAvoidingWalk>, FactorGraphError> {
    let count = count_saws(ds, i1, i2, comp, caps)?;
    if count == 0 {
        return Err(FactorGraphError::EmptyWalkSet);
    }
    let total = comp.total();
    let n = ds.n();
    let p = ds.p();
    let base_avail: Vec<u32> =
        (0..n as u32).filter(|&v| v as usize != i1 && v as usize != i2).collect();
    let mut out = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut avail = base_avail.clone();
        let mut pool = TypePool::new(comp);
        let mut nodes = vec![i1 as u32];
        let mut wedges = Vec::with_capacity(total);
        let mut b_factors: Vec<u32> = Vec::with_capacity(comp.ell);
        for slot in 0..total {
            // Wedge type with probability remaining / slots-left.
            let mut pick = rng.gen_range(0..pool.left);
            let mut idx = 0;
            loop {
                if pool.counts[idx] > pick {
                    break;
                }
                pick -= pool.counts[idx];
                idx += 1;
            }
            let wedge = pool.wedge_of(idx);
            pool.take(idx);
            wedges.push(wedge);
            if wedge == Wedge::Covariate {
                loop {
                    let q = rng.gen_range(0..p as u32);
                    if !b_factors.contains(&q) {
                        b_factors.push(q);
                        break;
                    }
                }
            }
            if slot == total - 1 {
                nodes.push(i2 as u32);
            } else {
                let at = rng.gen_range(0..avail.len());
                nodes.push(avail.swap_remove(at));
            }
        }
        out.push(SelfAvoidingWalk { nodes, wedges, b_factors });
    }
    Ok(out)
}
