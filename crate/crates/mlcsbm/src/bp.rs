//! Linearized belief propagation on the combined factor graph, the
//! sign-of-eta label estimator and the norm-growth detection test.
//!
//! Message state per step: directed per-edge messages S and eta for each
//! layer, per-node S and eta, covariate precisions tau, covariate means m
//! (two history slots; the m update reaches back two steps) and node
//! fields T. All t+1 quantities are computed synchronously from the t
//! buffer in the order S messages, S node, eta, tau, m, T. The eta at
//! t = 0 is assembled from the random T at t = -1 and S at t = 0, which is
//! why the initialization carries two history slots.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::model::{CommunityAssignment, Dataset, ModelParams};
use crate::rng::SeedTree;

#[derive(Debug, Error, PartialEq)]
pub enum BpError {
    #[error("layer {0}: lambda = sqrt(d) makes atanh(lambda/sqrt(d)) infinite")]
    AtanhDomain(usize),

    #[error("non-finite value in {what} at iteration {t}")]
    NonFinite { what: &'static str, t: usize },

    #[error("tau[{q}] = {value} is not positive at iteration {t}")]
    TauNotPositive { q: usize, value: f64, t: usize },

    #[error("eta norm {norm:.3e} exceeded the divergence guard at iteration {t}")]
    Diverged { norm: f64, t: usize },
}

/// Tilted log-odds transfer: f(z; rho) = (1/2) log(cosh(z+rho)/cosh(z-rho)).
///
/// For |z| > 20 the asymptotic value sign(z) * rho is exact to double
/// precision.
pub fn f_tilt(z: f64, rho: f64) -> f64 {
    if z.abs() > 20.0 {
        return z.signum() * rho;
    }
    0.5 * (log_cosh(z + rho) - log_cosh(z - rho))
}

fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

fn sech_sq(z: f64) -> f64 {
    if z.abs() > 20.0 {
        return 0.0;
    }
    let c = z.cosh();
    1.0 / (c * c)
}

/// rho_l = atanh(lambda_l / sqrt(d_l)).
pub fn rho_layer(params: &ModelParams, layer: usize) -> Result<f64, BpError> {
    let ratio = params.lambda[layer] / params.d[layer].sqrt();
    if ratio >= 1.0 {
        return Err(BpError::AtanhDomain(layer));
    }
    Ok(ratio.atanh())
}

/// rho_{n;l} = atanh(lambda_l sqrt(d_l) / (n - d_l)).
pub fn rho_layer_far(params: &ModelParams, layer: usize) -> Result<f64, BpError> {
    let ratio = params.lambda[layer] * params.d[layer].sqrt() / (params.n as f64 - params.d[layer]);
    if ratio >= 1.0 {
        return Err(BpError::AtanhDomain(layer));
    }
    Ok(ratio.atanh())
}

/// Initialization scheme for the message iterates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BpInit {
    /// Scalars ~ Normal(0, 0.01) (variance), tau ~ Uniform(0.9, 1.3), for
    /// both history slots.
    Random,
    /// Everything zero (tau = 1); the zero-information fixed point.
    Zero,
}

#[derive(Debug, Clone)]
pub struct BpConfig {
    pub t_max: usize,
    pub init: BpInit,
    pub seed: u64,
}

impl BpConfig {
    pub fn new(t_max: usize, seed: u64) -> Self {
        Self { t_max, init: BpInit::Random, seed }
    }
}

/// All message and node iterates at one time step.
///
/// Directed messages are stored per layer, indexed by 2*edge + orientation
/// (0 for low->high endpoint). `m_prev` holds the mean field one step
/// behind `m`, which the next m update consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct BpState {
    pub t: usize,
    pub s_dir: Vec<Vec<f64>>,
    pub s_node: Vec<Vec<f64>>,
    pub eta_dir: Vec<Vec<f64>>,
    pub eta_node: Vec<f64>,
    pub tau: Vec<f64>,
    pub m: Vec<f64>,
    pub m_prev: Vec<f64>,
    pub t_node: Vec<f64>,
}

impl BpState {
    pub fn eta_norm(&self) -> f64 {
        self.eta_node.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Per-node adjacency with directed-message indices: (neighbor, incoming
/// message id, outgoing message id).
type Adjacency = Vec<Vec<(u32, u32, u32)>>;

/// BP driver bound to one dataset.
pub struct BpEngine<'a> {
    ds: &'a Dataset,
    rho: Vec<f64>,
    rho_far: Vec<f64>,
    adj: Vec<Adjacency>,
    edge_counts: Vec<usize>,
}

impl<'a> BpEngine<'a> {
    pub fn new(ds: &'a Dataset) -> Result<Self, BpError> {
        let params = &ds.params;
        let mut rho = Vec::with_capacity(params.m);
        let mut rho_far = Vec::with_capacity(params.m);
        for l in 0..params.m {
            rho.push(rho_layer(params, l)?);
            rho_far.push(rho_layer_far(params, l)?);
        }
        let mut adj = Vec::with_capacity(params.m);
        let mut edge_counts = Vec::with_capacity(params.m);
        for g in &ds.layers {
            let mut layer_adj: Adjacency = vec![Vec::new(); params.n];
            for (e, &(i, j)) in g.edges.iter().enumerate() {
                let low_high = (2 * e) as u32; // message i -> j
                let high_low = (2 * e + 1) as u32; // message j -> i
                layer_adj[i as usize].push((j, high_low, low_high));
                layer_adj[j as usize].push((i, low_high, high_low));
            }
            edge_counts.push(g.num_edges());
            adj.push(layer_adj);
        }
        Ok(Self { ds, rho, rho_far, adj, edge_counts })
    }

    /// Build the t = 0 state; the random scheme draws both history slots
    /// in a fixed order from a substream of the seed.
    pub fn init_state(&self, config: &BpConfig) -> BpState {
        let params = &self.ds.params;
        let (n, p, m) = (params.n, params.p, params.m);
        match config.init {
            BpInit::Zero => {
                let s_dir: Vec<Vec<f64>> =
                    self.edge_counts.iter().map(|&e| vec![0.0; 2 * e]).collect();
                BpState {
                    t: 0,
                    s_dir: s_dir.clone(),
                    s_node: vec![vec![0.0; m]; n],
                    eta_dir: s_dir,
                    eta_node: vec![0.0; n],
                    tau: vec![1.0; p],
                    m: vec![0.0; p],
                    m_prev: vec![0.0; p],
                    t_node: vec![0.0; n],
                }
            }
            BpInit::Random => {
                let mut rng = SeedTree::from_seed(config.seed).child("bp-init").rng();
                let sd = 0.1; // Normal(0, 0.01) has standard deviation 0.1
                let norm = |rng: &mut rand_chacha::ChaCha12Rng| -> f64 {
                    sd * rng.sample::<f64, _>(StandardNormal)
                };
                // Slot order: S0 dir per layer, S-1 dir per layer, S0 node,
                // S-1 node, m0, m-1, T0, T-1, tau0, tau-1.
                let s0_dir: Vec<Vec<f64>> = self
                    .edge_counts
                    .iter()
                    .map(|&e| (0..2 * e).map(|_| norm(&mut rng)).collect())
                    .collect();
                let _s_minus_dir: Vec<Vec<f64>> = self
                    .edge_counts
                    .iter()
                    .map(|&e| (0..2 * e).map(|_| norm(&mut rng)).collect())
                    .collect();
                let s0_node: Vec<Vec<f64>> =
                    (0..n).map(|_| (0..m).map(|_| norm(&mut rng)).collect()).collect();
                let _s_minus_node: Vec<Vec<f64>> =
                    (0..n).map(|_| (0..m).map(|_| norm(&mut rng)).collect()).collect();
                let m0: Vec<f64> = (0..p).map(|_| norm(&mut rng)).collect();
                let m_minus: Vec<f64> = (0..p).map(|_| norm(&mut rng)).collect();
                let t0: Vec<f64> = (0..n).map(|_| norm(&mut rng)).collect();
                let t_minus: Vec<f64> = (0..n).map(|_| norm(&mut rng)).collect();
                let tau0: Vec<f64> = (0..p).map(|_| rng.gen_range(0.9..1.3)).collect();
                let _tau_minus: Vec<f64> = (0..p).map(|_| rng.gen_range(0.9..1.3)).collect();

                // eta at t = 0 follows the update driven by T at t = -1 and
                // S at t = 0.
                let row_sums: Vec<f64> = s0_node.iter().map(|row| row.iter().sum()).collect();
                let mut eta_dir = Vec::with_capacity(m);
                for l in 0..m {
                    let mut layer = vec![0.0; 2 * self.edge_counts[l]];
                    for k in 0..n {
                        for &(_, _, out_id) in &self.adj[l][k] {
                            layer[out_id as usize] = t_minus[k] + row_sums[k] - s0_node[k][l]
                                + s0_dir[l][out_id as usize];
                        }
                    }
                    eta_dir.push(layer);
                }
                let eta_node: Vec<f64> =
                    (0..n).map(|k| t_minus[k] + row_sums[k]).collect();

                BpState {
                    t: 0,
                    s_dir: s0_dir,
                    s_node: s0_node,
                    eta_dir,
                    eta_node,
                    tau: tau0,
                    m: m0,
                    m_prev: m_minus,
                    t_node: t0,
                }
            }
        }
    }

    /// One synchronous update; all t+1 quantities from the t buffer.
    pub fn step(&self, state: &BpState) -> Result<BpState, BpError> {
        let params = &self.ds.params;
        let (n, p, m) = (params.n, params.p, params.m);
        let b = &self.ds.covariates.b;
        let t_next = state.t + 1;

        // Shared per-layer global sums sum_k f(eta_k; rho_{n,l}).
        let global_f: Vec<f64> = (0..m)
            .map(|l| state.eta_node.iter().map(|&e| f_tilt(e, self.rho_far[l])).sum())
            .collect();

        let mut s_dir: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut s_node = vec![vec![0.0; m]; n];
        for l in 0..m {
            let mut layer = vec![0.0; 2 * self.edge_counts[l]];
            for i in 0..n {
                let mut full = 0.0;
                for &(_, in_id, _) in &self.adj[l][i] {
                    full += f_tilt(state.eta_dir[l][in_id as usize], self.rho[l]);
                }
                s_node[i][l] = full - global_f[l];
                for &(_, in_id, out_id) in &self.adj[l][i] {
                    let without =
                        full - f_tilt(state.eta_dir[l][in_id as usize], self.rho[l]);
                    layer[out_id as usize] = without - global_f[l];
                }
            }
            s_dir.push(layer);
        }

        let row_sums: Vec<f64> = s_node.iter().map(|row| row.iter().sum()).collect();
        let mut eta_dir: Vec<Vec<f64>> = Vec::with_capacity(m);
        for l in 0..m {
            let mut layer = vec![0.0; 2 * self.edge_counts[l]];
            for k in 0..n {
                for &(_, _, out_id) in &self.adj[l][k] {
                    layer[out_id as usize] = state.t_node[k] + row_sums[k] - s_node[k][l]
                        + s_dir[l][out_id as usize];
                }
            }
            eta_dir.push(layer);
        }
        let eta_node: Vec<f64> = (0..n).map(|k| state.t_node[k] + row_sums[k]).collect();

        // Covariate side, driven by eta at time t.
        let mu = params.mu;
        let gamma = params.gamma();
        let pf = p as f64;
        let tanh_eta: Vec<f64> = state.eta_node.iter().map(|&e| e.tanh()).collect();
        let sech2_eta: Vec<f64> = state.eta_node.iter().map(|&e| sech_sq(e)).collect();
        let sqrt_mu_gamma = (mu / gamma).sqrt();
        let sqrt_p = pf.sqrt();

        let mut tau = vec![0.0; p];
        let mut m_new = vec![0.0; p];
        for q in 0..p {
            let mut b2_sech = 0.0;
            let mut b_tanh = 0.0;
            for j in 0..n {
                let bqj = b[[j, q]];
                b2_sech += bqj * bqj * sech2_eta[j];
                b_tanh += bqj * tanh_eta[j];
            }
            let denom = 1.0 + mu - mu / (pf * gamma) * b2_sech;
            let tq = 1.0 / denom;
            if !tq.is_finite() {
                return Err(BpError::NonFinite { what: "tau", t: t_next });
            }
            if tq <= 0.0 {
                return Err(BpError::TauNotPositive { q, value: tq, t: t_next });
            }
            tau[q] = tq;
            m_new[q] = sqrt_mu_gamma / tq * (b_tanh / sqrt_p)
                - mu / (gamma * tq) * (b2_sech / pf) * state.m_prev[q];
        }

        let mut t_node = vec![0.0; n];
        for k in 0..n {
            let mut b_m = 0.0;
            let mut b2_tau = 0.0;
            for r in 0..p {
                let brk = b[[k, r]];
                b_m += brk * m_new[r];
                b2_tau += brk * brk / tau[r];
            }
            t_node[k] = sqrt_mu_gamma * (b_m / sqrt_p) - mu / (pf * gamma) * b2_tau * tanh_eta[k];
        }

        let next = BpState {
            t: t_next,
            s_dir,
            s_node,
            eta_dir,
            eta_node,
            tau,
            m: m_new,
            m_prev: state.m.clone(),
            t_node,
        };
        let norm = next.eta_norm();
        if !norm.is_finite()
            || next.t_node.iter().any(|v| !v.is_finite())
            || next.m.iter().any(|v| !v.is_finite())
        {
            return Err(BpError::NonFinite { what: "iterates", t: t_next });
        }
        if norm > 1e8 {
            return Err(BpError::Diverged { norm, t: t_next });
        }
        Ok(next)
    }
}

/// One BP step as a free function.
pub fn bp_step(state: &BpState, ds: &Dataset) -> Result<BpState, BpError> {
    BpEngine::new(ds)?.step(state)
}

/// A finished run: per-iteration eta norms (t = 0 ..= t_max) and the final
/// state.
#[derive(Debug, Clone)]
pub struct BpRun {
    pub trace: Vec<f64>,
    pub state: BpState,
}

/// Run t_max iterations from the configured initialization.
pub fn run_bp(ds: &Dataset, config: &BpConfig) -> Result<BpRun, BpError> {
    let engine = BpEngine::new(ds)?;
    let mut state = engine.init_state(config);
    let mut trace = Vec::with_capacity(config.t_max + 1);
    trace.push(state.eta_norm());
    for _ in 0..config.t_max {
        state = engine.step(&state)?;
        trace.push(state.eta_norm());
    }
    Ok(BpRun { trace, state })
}

/// Coordinate-wise signs of eta, sign(0) = +1.
pub fn bp_estimate(state: &BpState) -> CommunityAssignment {
    CommunityAssignment(
        state.eta_node.iter().map(|&v| if v < 0.0 { -1i8 } else { 1i8 }).collect(),
    )
}

#[derive(Debug, Clone)]
pub struct BpTestOutcome {
    pub reject: bool,
    pub stat: f64,
    pub trace: Vec<f64>,
}

/// Norm-growth test: reject when ||eta^{t_max}|| > ||eta^0||.
pub fn bp_test(ds: &Dataset, config: &BpConfig) -> Result<BpTestOutcome, BpError> {
    let run = run_bp(ds, config)?;
    let start = run.trace[0].max(1e-300);
    let stat = run.trace[run.trace.len() - 1] / start;
    Ok(BpTestOutcome { reject: stat > 1.0, stat, trace: run.trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sample_dataset;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn f_tilt_values_and_properties() {
        assert_eq!(f_tilt(0.0, 0.7), 0.0);
        assert_eq!(f_tilt(3.1, 0.0), 0.0);
        let v = f_tilt(1.0, 0.5);
        let direct = 0.5 * ((1.5f64.cosh() / 0.5f64.cosh()).ln());
        assert!(close(v, direct, 1e-14));
        assert!(close(v, 0.36766283202775957, 1e-12));
        // Odd in z, bounded by rho, monotone.
        for z in [-5.0, -1.0, -0.2, 0.3, 2.0, 40.0] {
            assert!(close(f_tilt(-z, 0.8), -f_tilt(z, 0.8), 1e-14));
            assert!(f_tilt(z, 0.8).abs() <= 0.8 + 1e-14);
        }
        let grid: Vec<f64> = (-40..=40).map(|i| i as f64 / 4.0).collect();
        for w in grid.windows(2) {
            assert!(f_tilt(w[1], 0.6) >= f_tilt(w[0], 0.6));
        }
        // Small-rho linearization: |f(z; rho) - tanh(rho) tanh(z)| <= C rho^3.
        for rho in [0.05, 0.1, 0.3, 0.5] {
            for &z in &grid {
                let err = (f_tilt(z, rho) - rho.tanh() * z.tanh()).abs();
                assert!(err <= 0.5 * rho.powi(3), "z {z} rho {rho} err {err}");
            }
        }
        // Asymptotic branch continuity.
        assert!(close(f_tilt(20.0001, 0.9), 0.9, 1e-12));
    }

    #[test]
    fn rho_values() {
        let params = crate::model::ModelParams::new(vec![1.0], 0.0, vec![4.0], 300, 450).unwrap();
        assert!(close(rho_layer(&params, 0).unwrap(), 0.5f64.atanh(), 1e-14));
        assert!(close(rho_layer(&params, 0).unwrap(), 0.549306, 1e-5));
        assert!(close(rho_layer_far(&params, 0).unwrap(), (2.0f64 / 296.0).atanh(), 1e-14));
        assert!(close(rho_layer_far(&params, 0).unwrap(), 0.0067568, 1e-4));
        let zero = crate::model::ModelParams::new(vec![0.0], 0.0, vec![4.0], 300, 450).unwrap();
        assert_eq!(rho_layer(&zero, 0).unwrap(), 0.0);
        assert_eq!(rho_layer_far(&zero, 0).unwrap(), 0.0);
        let hard = crate::model::ModelParams::new(vec![2.0], 0.0, vec![4.0], 300, 450).unwrap();
        assert_eq!(rho_layer(&hard, 0).unwrap_err(), BpError::AtanhDomain(0));
    }

    #[test]
    fn zero_information_fixed_point_is_exact() {
        let params =
            crate::model::ModelParams::new(vec![0.0, 0.0], 0.0, vec![3.0, 2.0], 40, 30).unwrap();
        let ds = sample_dataset(&params, 6);
        let engine = BpEngine::new(&ds).unwrap();
        let mut state = engine.init_state(&BpConfig { t_max: 0, init: BpInit::Zero, seed: 0 });
        for _ in 0..25 {
            state = engine.step(&state).unwrap();
            assert!(state.eta_node.iter().all(|&v| v == 0.0));
            assert!(state.t_node.iter().all(|&v| v == 0.0));
            assert!(state.s_node.iter().flatten().all(|&v| v == 0.0));
            assert!(state.s_dir.iter().flatten().all(|&v| v == 0.0));
            assert!(state.tau.iter().all(|&v| v == 1.0));
        }
    }

    /// Straight-line transcription of the seven update displays, no index
    /// tricks or shared sums, for the one-step oracle test.
    fn oracle_step(state: &BpState, ds: &Dataset) -> BpState {
        let params = &ds.params;
        let (n, p, m) = (params.n, params.p, params.m);
        let b = &ds.covariates.b;
        let rho: Vec<f64> = (0..m).map(|l| rho_layer(params, l).unwrap()).collect();
        let rho_far: Vec<f64> = (0..m).map(|l| rho_layer_far(params, l).unwrap()).collect();
        let mu = params.mu;
        let gamma = params.gamma();

        // Directed-message bookkeeping identical to the engine layout.
        let msg = |l: usize, from: usize, to: usize| -> usize {
            let e = ds.layers[l]
                .edges
                .iter()
                .position(|&(i, j)| {
                    (i as usize == from && j as usize == to)
                        || (i as usize == to && j as usize == from)
                })
                .unwrap();
            let (i, _) = ds.layers[l].edges[e];
            if i as usize == from {
                2 * e
            } else {
                2 * e + 1
            }
        };

        let mut s_dir: Vec<Vec<f64>> =
            (0..m).map(|l| vec![0.0; 2 * ds.layers[l].num_edges()]).collect();
        let mut s_node = vec![vec![0.0; m]; n];
        for l in 0..m {
            for i in 0..n {
                let mut global = 0.0;
                for k in 0..n {
                    global += f_tilt(state.eta_node[k], rho_far[l]);
                }
                let mut full = 0.0;
                for &k in ds.layers[l].neighbors(i) {
                    full += f_tilt(state.eta_dir[l][msg(l, k as usize, i)], rho[l]);
                }
                s_node[i][l] = full - global;
                for &j in ds.layers[l].neighbors(i) {
                    let mut without = 0.0;
                    for &k in ds.layers[l].neighbors(i) {
                        if k != j {
                            without += f_tilt(state.eta_dir[l][msg(l, k as usize, i)], rho[l]);
                        }
                    }
                    s_dir[l][msg(l, i, j as usize)] = without - global;
                }
            }
        }

        let mut eta_dir: Vec<Vec<f64>> =
            (0..m).map(|l| vec![0.0; 2 * ds.layers[l].num_edges()]).collect();
        let mut eta_node = vec![0.0; n];
        for k in 0..n {
            let mut all = 0.0;
            for r in 0..m {
                all += s_node[k][r];
            }
            eta_node[k] = state.t_node[k] + all;
            for l in 0..m {
                for &i in ds.layers[l].neighbors(k) {
                    let mut others = 0.0;
                    for r in 0..m {
                        if r != l {
                            others += s_node[k][r];
                        }
                    }
                    eta_dir[l][msg(l, k, i as usize)] =
                        state.t_node[k] + others + s_dir[l][msg(l, k, i as usize)];
                }
            }
        }

        let mut tau = vec![0.0; p];
        let mut m_new = vec![0.0; p];
        for q in 0..p {
            let mut acc = 0.0;
            for j in 0..n {
                acc += b[[j, q]] * b[[j, q]] * sech_sq(state.eta_node[j]);
            }
            tau[q] = 1.0 / (1.0 + mu - mu / (p as f64 * gamma) * acc);
            let mut bt = 0.0;
            for j in 0..n {
                bt += b[[j, q]] / (p as f64).sqrt() * state.eta_node[j].tanh();
            }
            let mut b2s = 0.0;
            for j in 0..n {
                b2s += b[[j, q]] * b[[j, q]] / p as f64 * sech_sq(state.eta_node[j]);
            }
            m_new[q] = (mu / gamma).sqrt() / tau[q] * bt - mu / (gamma * tau[q]) * b2s * state.m_prev[q];
        }

        let mut t_node = vec![0.0; n];
        for k in 0..n {
            let mut bm = 0.0;
            for r in 0..p {
                bm += b[[k, r]] / (p as f64).sqrt() * m_new[r];
            }
            let mut b2t = 0.0;
            for r in 0..p {
                b2t += b[[k, r]] * b[[k, r]] / tau[r];
            }
            t_node[k] = (mu / gamma).sqrt() * bm
                - mu / (p as f64 * gamma) * b2t * state.eta_node[k].tanh();
        }

        BpState {
            t: state.t + 1,
            s_dir,
            s_node,
            eta_dir,
            eta_node,
            tau,
            m: m_new,
            m_prev: state.m.clone(),
            t_node,
        }
    }

    #[test]
    fn step_matches_straight_line_oracle() {
        let params =
            crate::model::ModelParams::new(vec![0.9, 0.6], 0.8, vec![3.0, 2.0], 24, 18).unwrap();
        let ds = sample_dataset(&params, 44);
        let engine = BpEngine::new(&ds).unwrap();
        let config = BpConfig { t_max: 0, init: BpInit::Random, seed: 5 };
        let state = engine.init_state(&config);
        let fast = engine.step(&state).unwrap();
        let slow = oracle_step(&state, &ds);
        let cmp = |a: &[f64], b: &[f64], what: &str| {
            for (x, y) in a.iter().zip(b) {
                assert!(close(*x, *y, 1e-12), "{what}: {x} vs {y}");
            }
        };
        cmp(&fast.eta_node, &slow.eta_node, "eta_node");
        cmp(&fast.t_node, &slow.t_node, "t_node");
        cmp(&fast.tau, &slow.tau, "tau");
        cmp(&fast.m, &slow.m, "m");
        for l in 0..2 {
            cmp(&fast.s_dir[l], &slow.s_dir[l], "s_dir");
            cmp(&fast.eta_dir[l], &slow.eta_dir[l], "eta_dir");
        }
    }

    #[test]
    fn two_node_single_edge_hand_check() {
        // n = 2, one layer, one edge: the message 0 -> 1 has an empty
        // neighbor sum (only neighbor is the receiver), so S = -global.
        use crate::model::{CommunityAssignment, CovariateMatrix, Dataset, LayerGraph};
        use ndarray::Array2;
        let params = crate::model::ModelParams::new(vec![0.5], 0.0, vec![1.5], 4, 2).unwrap();
        let ds = Dataset::from_parts(
            params.clone(),
            CommunityAssignment(vec![1, -1, 1, -1]),
            vec![LayerGraph::from_edges(1, 4, vec![(0, 1)])],
            CovariateMatrix { b: Array2::zeros((4, 2)), u: None },
            0,
        );
        let engine = BpEngine::new(&ds).unwrap();
        let mut state = engine.init_state(&BpConfig { t_max: 0, init: BpInit::Zero, seed: 0 });
        state.eta_node = vec![0.3, -0.2, 0.1, 0.4];
        state.eta_dir = vec![vec![0.15, -0.1]];
        let next = engine.step(&state).unwrap();
        let rho_far = rho_layer_far(&params, 0).unwrap();
        let global: f64 =
            state.eta_node.iter().map(|&e| f_tilt(e, rho_far)).sum();
        assert!(close(next.s_dir[0][0], -global, 1e-14));
        let rho = rho_layer(&params, 0).unwrap();
        assert!(close(next.s_node[0][0], f_tilt(-0.1, rho) - global, 1e-14));
    }

    #[test]
    fn message_index_sets_track_edges() {
        let params = crate::model::ModelParams::new(vec![1.0], 0.5, vec![3.0], 30, 20).unwrap();
        let ds = sample_dataset(&params, 2);
        let engine = BpEngine::new(&ds).unwrap();
        let state = engine.init_state(&BpConfig::new(0, 3));
        let next = engine.step(&state).unwrap();
        assert_eq!(next.s_dir[0].len(), 2 * ds.layers[0].num_edges());
        assert_eq!(next.eta_dir[0].len(), 2 * ds.layers[0].num_edges());
    }

    #[test]
    fn run_is_deterministic() {
        let params =
            crate::model::ModelParams::new(vec![1.0, 0.8, 0.9], 0.5, vec![3.0; 3], 60, 90).unwrap();
        let ds = sample_dataset(&params, 10);
        let config = BpConfig::new(12, 99);
        let a = run_bp(&ds, &config).unwrap();
        let b = run_bp(&ds, &config).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn estimate_signs() {
        let params = crate::model::ModelParams::new(vec![0.0], 0.0, vec![1.5], 2, 2).unwrap();
        let ds = sample_dataset(&params, 0);
        let engine = BpEngine::new(&ds).unwrap();
        let mut state = engine.init_state(&BpConfig { t_max: 0, init: BpInit::Zero, seed: 0 });
        state.eta_node = vec![2.0, -1.0];
        assert_eq!(bp_estimate(&state).0, vec![1, -1]);
        state.eta_node = vec![0.0, 0.0];
        assert_eq!(bp_estimate(&state).0, vec![1, 1]);
        state.eta_node = vec![-2.0, 1.0];
        assert_eq!(bp_estimate(&state).0, vec![-1, 1]);
    }

    #[test]
    fn inference_never_reads_ground_truth() {
        // Flipping the stored labels (a symmetry of the model) leaves the
        // whole trace unchanged: BP reads only layers, B and params.
        let params = crate::model::ModelParams::new(vec![1.0], 0.7, vec![3.0], 40, 60).unwrap();
        let ds = sample_dataset(&params, 8);
        let flipped = crate::model::Dataset::from_parts(
            ds.params.clone(),
            crate::model::CommunityAssignment(ds.sigma.0.iter().map(|&s| -s).collect()),
            ds.layers.clone(),
            ds.covariates.clone(),
            ds.seed,
        );
        let config = BpConfig::new(8, 4);
        let a = run_bp(&ds, &config).unwrap();
        let b = run_bp(&flipped, &config).unwrap();
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn null_test_never_rejects_after_collapse() {
        // With lambda = 0 and mu = 0, f vanishes and T feeds zero, so eta
        // collapses by t = 2 and the statistic stays below 1.
        let params = crate::model::ModelParams::new(vec![0.0], 0.0, vec![2.0], 50, 40).unwrap();
        let mut rejects = 0;
        for seed in 0..30 {
            let ds = sample_dataset(&params, seed);
            let out = bp_test(&ds, &BpConfig::new(10, seed)).unwrap();
            if out.reject {
                rejects += 1;
            }
            assert!(out.stat < 1.0);
        }
        assert_eq!(rejects, 0);
    }

    #[test]
    fn signal_grows_eta() {
        // Effective SNR 4 split over one layer plus covariates.
        let params =
            crate::model::ModelParams::new(vec![1.5], 1.2, vec![3.0], 150, 150).unwrap();
        let mut grew = 0;
        for seed in 0..10 {
            let ds = sample_dataset(&params, 1000 + seed);
            let out = bp_test(&ds, &BpConfig::new(30, seed)).unwrap();
            if out.stat > 1.0 {
                grew += 1;
            }
        }
        assert!(grew >= 9, "eta grew in only {grew}/10 runs");
    }
}
