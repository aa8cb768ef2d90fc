//! Monte Carlo experiment driver: power and overlap curves over an
//! effective-SNR grid, and the moment-verification suite for the cycle
//! statistics.
//!
//! Replicas run in parallel but are collected in replica order and reduced
//! sequentially, so aggregates are byte-identical for any worker count.
//! Per-replica failures are counted in the output, never dropped.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::bp::{bp_estimate, BpConfig, BpInit};
use crate::cycle_stats::{
    detection_test, gaussian_moments, h0_poisson_mean, h1_poisson_mean, Hypothesis, StatEngine,
};
use crate::factor_graph::{Caps, WedgeComposition};
use crate::model::{sample_dataset, ModelError, ModelParams};
use crate::rng::SeedTree;
use crate::saw_recovery::{overlap, weak_recovery_pipeline, SigmaMode};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("ratios must have m+1 entries summing to 1 (got {0:?})")]
    BadRatios(Vec<f64>),

    #[error("grid point {snr}: {source}")]
    BadGridPoint {
        snr: f64,
        #[source]
        source: ModelError,
    },

    #[error("replicas must be at least 1")]
    NoReplicas,

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    CycleStat(#[from] crate::cycle_stats::CycleStatError),
}

/// Which test/estimator to run at each grid point.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Bp { t_max: usize },
    CycleTest { k_total: usize, alpha: f64 },
    Saw { comp: WedgeComposition, delta: f64, mode: SigmaMode },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Bp { .. } => "bp",
            Method::CycleTest { .. } => "cycle-test",
            Method::Saw { .. } => "saw",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub n: usize,
    pub p: usize,
    pub d: Vec<f64>,
    /// Effective-SNR grid values t_k.
    pub snr_grid: Vec<f64>,
    /// m+1 nonnegative shares summing to 1: lambda_i^2 = r_i t and
    /// mu^2/gamma = r_{m+1} t, so the grid value is the effective SNR.
    pub ratios: Vec<f64>,
    pub replicas: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub caps: Caps,
}

impl ExperimentConfig {
    pub fn m(&self) -> usize {
        self.d.len()
    }

    /// Model parameters at one grid value.
    pub fn params_at(&self, snr: f64) -> Result<ModelParams, ModelError> {
        let m = self.m();
        let gamma = self.n as f64 / self.p as f64;
        let lambda: Vec<f64> = (0..m).map(|i| (self.ratios[i] * snr).sqrt()).collect();
        let mu = (self.ratios[m] * gamma * snr).sqrt();
        ModelParams::new(lambda, mu, self.d.clone(), self.n, self.p)
    }

    fn validate(&self) -> Result<(), HarnessError> {
        if self.replicas == 0 {
            return Err(HarnessError::NoReplicas);
        }
        let m = self.m();
        let sum: f64 = self.ratios.iter().sum();
        if self.ratios.len() != m + 1
            || (sum - 1.0).abs() > 1e-12
            || self.ratios.iter().any(|&r| r < 0.0)
        {
            return Err(HarnessError::BadRatios(self.ratios.clone()));
        }
        for &t in &self.snr_grid {
            self.params_at(t).map_err(|source| HarnessError::BadGridPoint { snr: t, source })?;
        }
        Ok(())
    }
}

/// One aggregated row of the power/overlap curve.
#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub snr: f64,
    pub method: String,
    pub power: Option<f64>,
    pub power_se: Option<f64>,
    pub overlap: Option<f64>,
    pub overlap_se: Option<f64>,
    pub replicas: usize,
    pub failures: usize,
}

struct ReplicaOutcome {
    reject: Option<bool>,
    overlap: Option<f64>,
    failed: bool,
}

/// Monte Carlo power/overlap curve: for every grid point and method,
/// sample `replicas` datasets and aggregate rejection rates and overlaps
/// with their standard errors.
pub fn run_power_curve(config: &ExperimentConfig) -> Result<Vec<CurvePoint>, HarnessError> {
    config.validate()?;
    let root = SeedTree::from_seed(config.seed);
    let mut points = Vec::new();
    for (gi, &snr) in config.snr_grid.iter().enumerate() {
        let params = config.params_at(snr).expect("validated");
        let grid_tree = root.child_idx("grid", gi as u64);
        let outcomes: Vec<Vec<ReplicaOutcome>> = (0..config.replicas)
            .into_par_iter()
            .map(|ri| {
                let rep_tree = grid_tree.child_idx("replica", ri as u64);
                let ds = sample_dataset(&params, rep_tree.child("data").seed_u64());
                config
                    .methods
                    .iter()
                    .map(|method| run_method(method, &ds, &params, &rep_tree, &config.caps))
                    .collect()
            })
            .collect();

        for (mi, method) in config.methods.iter().enumerate() {
            let mut rejects = Vec::new();
            let mut overlaps = Vec::new();
            let mut failures = 0usize;
            for rep in &outcomes {
                let o = &rep[mi];
                if o.failed {
                    failures += 1;
                    continue;
                }
                if let Some(r) = o.reject {
                    rejects.push(if r { 1.0 } else { 0.0 });
                }
                if let Some(v) = o.overlap {
                    overlaps.push(v);
                }
            }
            let (power, power_se) = mean_se_binomial(&rejects);
            let (ov, ov_se) = mean_se(&overlaps);
            points.push(CurvePoint {
                snr,
                method: method.name().to_string(),
                power,
                power_se,
                overlap: ov,
                overlap_se: ov_se,
                replicas: config.replicas,
                failures,
            });
        }
    }
    Ok(points)
}

fn run_method(
    method: &Method,
    ds: &crate::model::Dataset,
    params: &ModelParams,
    rep_tree: &SeedTree,
    caps: &Caps,
) -> ReplicaOutcome {
    match method {
        Method::Bp { t_max } => {
            let config = BpConfig {
                t_max: *t_max,
                init: BpInit::Random,
                seed: rep_tree.child("bp").seed_u64(),
            };
            match crate::bp::run_bp(ds, &config) {
                Ok(run) => {
                    let start = run.trace[0].max(1e-300);
                    let reject = run.trace[run.trace.len() - 1] / start > 1.0;
                    let est = overlap(&bp_estimate(&run.state), &ds.sigma).ok();
                    ReplicaOutcome { reject: Some(reject), overlap: est, failed: false }
                }
                Err(_) => ReplicaOutcome { reject: None, overlap: None, failed: true },
            }
        }
        Method::CycleTest { k_total, alpha } => {
            match detection_test(ds, params, *k_total, *alpha, caps) {
                Ok(out) => {
                    ReplicaOutcome { reject: Some(out.reject), overlap: None, failed: false }
                }
                Err(_) => ReplicaOutcome { reject: None, overlap: None, failed: true },
            }
        }
        Method::Saw { comp, delta, mode } => {
            match weak_recovery_pipeline(ds, comp, *delta, *mode, caps, &rep_tree.child("saw")) {
                Ok(res) => ReplicaOutcome { reject: None, overlap: res.overlap, failed: false },
                Err(_) => ReplicaOutcome { reject: None, overlap: None, failed: true },
            }
        }
    }
}

fn mean_se(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (Some(mean), Some(0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some((var / n).sqrt()))
}

fn mean_se_binomial(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let p = values.iter().sum::<f64>() / n;
    (Some(p), Some((p * (1.0 - p) / n).sqrt()))
}

/// Write curve rows as CSV (empty cells for undefined columns).
pub fn write_curve_csv<W: std::io::Write>(
    points: &[CurvePoint],
    out: W,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["snr", "method", "power", "power_se", "overlap", "overlap_se", "replicas", "failures"])?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for pt in points {
        w.write_record([
            pt.snr.to_string(),
            pt.method.clone(),
            fmt(pt.power),
            fmt(pt.power_se),
            fmt(pt.overlap),
            fmt(pt.overlap_se),
            pt.replicas.to_string(),
            pt.failures.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the moment-verification table.
#[derive(Debug, Clone, Serialize)]
pub struct MomentRow {
    pub comp: String,
    pub emp_mean: f64,
    pub emp_var: f64,
    pub theo_mean: f64,
    pub theo_var: f64,
    pub z_mean: f64,
    pub flagged: bool,
}

/// Estimate means and variances of cycle statistics over replicas and
/// compare with the limiting values (null formulas when the parameters
/// carry no signal, alternative formulas otherwise).
pub fn run_moment_suite(
    params: &ModelParams,
    comps: &[WedgeComposition],
    replicas: usize,
    seed: u64,
    caps: &Caps,
) -> Result<Vec<MomentRow>, HarnessError> {
    if replicas == 0 {
        return Err(HarnessError::NoReplicas);
    }
    let root = SeedTree::from_seed(seed);
    let samples: Vec<Result<Vec<f64>, crate::cycle_stats::CycleStatError>> = (0..replicas)
        .into_par_iter()
        .map(|ri| {
            let ds = sample_dataset(params, root.child_idx("replica", ri as u64).seed_u64());
            let mut engine = StatEngine::new(&ds, caps.clone());
            comps.iter().map(|c| engine.statistic(c)).collect()
        })
        .collect();

    let mut per_comp: Vec<Vec<f64>> = vec![Vec::with_capacity(replicas); comps.len()];
    for rep in samples {
        let rep = rep?;
        for (ci, y) in rep.into_iter().enumerate() {
            per_comp[ci].push(y);
        }
    }

    let null_params = params.effective_snr() == 0.0;
    let mut rows = Vec::with_capacity(comps.len());
    for (ci, comp) in comps.iter().enumerate() {
        let values = &per_comp[ci];
        let (mean, se) = mean_se(values);
        let (mean, se) = (mean.unwrap(), se.unwrap());
        let nf = values.len() as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0);
        let (theo_mean, theo_var) = if comp.ell == 0 {
            let rate = if null_params {
                h0_poisson_mean(comp, params)
            } else {
                h1_poisson_mean(comp, params)
            };
            (rate, rate)
        } else {
            let hyp = if null_params { Hypothesis::Null } else { Hypothesis::Alternative };
            let (m, v) = gaussian_moments(comp, params, hyp);
            (m, v)
        };
        let z_mean = if se > 0.0 { (mean - theo_mean) / se } else { 0.0 };
        rows.push(MomentRow {
            comp: comp.to_string(),
            emp_mean: mean,
            emp_var: var,
            theo_mean,
            theo_var,
            z_mean,
            flagged: z_mean.abs() > 4.0,
        });
    }
    Ok(rows)
}

/// Write moment rows as CSV.
pub fn write_moments_csv<W: std::io::Write>(
    rows: &[MomentRow],
    out: W,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["comp", "emp_mean", "emp_var", "theo_mean", "theo_var", "z_mean", "flagged"])?;
    for r in rows {
        w.write_record([
            r.comp.clone(),
            r.emp_mean.to_string(),
            r.emp_var.to_string(),
            r.theo_mean.to_string(),
            r.theo_var.to_string(),
            r.z_mean.to_string(),
            r.flagged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(methods: Vec<Method>) -> ExperimentConfig {
        ExperimentConfig {
            n: 40,
            p: 30,
            d: vec![2.5],
            snr_grid: vec![0.5, 2.0],
            ratios: vec![0.6, 0.4],
            replicas: 6,
            seed: 11,
            methods,
            caps: Caps::default(),
        }
    }

    #[test]
    fn grid_params_hit_the_effective_snr() {
        let config = ExperimentConfig {
            n: 300,
            p: 450,
            d: vec![3.0, 3.0, 3.0],
            snr_grid: vec![4.0],
            ratios: vec![0.25, 0.25, 0.25, 0.25],
            replicas: 1,
            seed: 0,
            methods: vec![],
            caps: Caps::default(),
        };
        let params = config.params_at(4.0).unwrap();
        assert!((params.effective_snr() - 4.0).abs() < 1e-12);
        assert!((params.lambda[0] - 1.0).abs() < 1e-12);
        for &t in &[0.5, 1.3, 2.9] {
            let p = config.params_at(t).unwrap();
            assert!((p.effective_snr() - t).abs() < 1e-12, "snr at t = {t}");
        }
    }

    #[test]
    fn rejects_bad_ratios() {
        let mut config = tiny_config(vec![]);
        config.ratios = vec![0.5, 0.4];
        assert!(matches!(run_power_curve(&config), Err(HarnessError::BadRatios(_))));
    }

    #[test]
    fn curve_is_deterministic_and_ordered() {
        let config = tiny_config(vec![
            Method::Bp { t_max: 6 },
            Method::CycleTest { k_total: 3, alpha: 0.05 },
        ]);
        let a = run_power_curve(&config).unwrap();
        let b = run_power_curve(&config).unwrap();
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        write_curve_csv(&a, &mut buf_a).unwrap();
        write_curve_csv(&b, &mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b);
        assert_eq!(a.len(), 4); // 2 grid points x 2 methods
        assert_eq!(a[0].method, "bp");
        assert_eq!(a[1].method, "cycle-test");
        assert!(a.iter().all(|pt| pt.failures == 0), "{a:?}");
        for pt in &a {
            if let Some(p) = pt.power {
                assert!((0.0..=1.0).contains(&p));
            }
        }
    }

    #[test]
    fn replica_order_does_not_affect_aggregates() {
        // Single-threaded pool vs default pool must agree byte for byte.
        let config = tiny_config(vec![Method::Bp { t_max: 5 }]);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let seq = pool.install(|| run_power_curve(&config).unwrap());
        let par = run_power_curve(&config).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_curve_csv(&seq, &mut a).unwrap();
        write_curve_csv(&par, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn moment_suite_flags_nothing_under_matching_theory() {
        let params = ModelParams::new(vec![0.0, 0.0], 0.0, vec![2.0, 3.0], 300, 300).unwrap();
        let comps = vec![WedgeComposition::new(vec![1, 1], 0), WedgeComposition::new(vec![1, 0], 1)];
        let rows =
            run_moment_suite(&params, &comps, 400, 5, &Caps::default()).unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            // Finite-n bias is O(1/n); 400 replicas keep |z| modest.
            assert!(!row.flagged, "{row:?}");
        }
        // Null grid point: the (1,1;0) rate is d1 d2 / 2 = 3.
        assert!((rows[0].theo_mean - 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_composition_matches_zero_theory() {
        // A composition using a zero-signal layer under the alternative
        // formulas: mean shift 0 for the ell = 1 statistic.
        let params = ModelParams::new(vec![0.0, 1.0], 0.5, vec![2.0, 3.0], 200, 200).unwrap();
        let comps = vec![WedgeComposition::new(vec![1, 0], 1)];
        let rows = run_moment_suite(&params, &comps, 300, 9, &Caps::default()).unwrap();
        assert_eq!(rows[0].theo_mean, 0.0);
        assert!(!rows[0].flagged, "{:?}", rows[0]);
    }
}
