//! Linear-Gaussian data-generating process and the coverage experiment.

use std::fmt::Write as _;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::{make_split, Dataset};
use crate::eif::{Estimand, EstimandKind};
use crate::error::{Result, VitlError};
use crate::estimators::{estimate, EstimatorConfig, EstimatorKind};
use crate::linalg::cholesky;

/// `(X, Z) ~ N(0, Σ)` with unit variances and all correlations `rho`; `Y = beta·X + noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpSpec {
    pub n: usize,
    /// Total covariate dimension (X plus Z).
    pub d: usize,
    pub rho: f64,
    pub beta: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for DgpSpec {
    fn default() -> Self {
        Self { n: 500, d: 2, rho: 0.5, beta: 5.0, noise_sd: 1.0, seed: 0 }
    }
}

impl DgpSpec {
    fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(VitlError::Parameter(format!("n must be >= 10, got {}", self.n)));
        }
        if self.d < 2 {
            return Err(VitlError::Parameter(format!("d must be >= 2, got {}", self.d)));
        }
        if !(self.noise_sd >= 0.0) || !self.beta.is_finite() || !self.rho.is_finite() {
            return Err(VitlError::Parameter("beta, rho and noise_sd must be finite with noise_sd >= 0".into()));
        }
        Ok(())
    }
}

/// Draws a dataset; X is the first covariate, the remaining `d - 1` form Z.
pub fn generate(spec: &DgpSpec) -> Result<Dataset<f64>> {
    spec.validate()?;
    let d = spec.d;
    let sigma: Vec<f64> = (0..d * d).map(|k| if k / d == k % d { 1.0 } else { spec.rho }).collect();
    let l = cholesky(&sigma, d, 1e-12).map_err(|_| {
        VitlError::Parameter(format!("covariance with rho = {} is not positive definite", spec.rho))
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut y, mut x, mut z) = (Vec::with_capacity(spec.n), Vec::with_capacity(spec.n), Vec::new());
    let mut e = vec![0.0; d];
    for _ in 0..spec.n {
        for v in e.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let row: Vec<f64> = (0..d).map(|i| (0..=i).map(|j| l[i * d + j] * e[j]).sum()).collect();
        let noise: f64 = StandardNormal.sample(&mut rng);
        x.push(row[0]);
        y.push(spec.beta * row[0] + spec.noise_sd * noise);
        z.extend_from_slice(&row[1..]);
    }
    Dataset::new(y, x, z, d - 1)
}

/// Population value of `estimand` under the two-covariate DGP with the true regression function.
pub fn true_importance(spec: &DgpSpec, estimand: Estimand) -> Result<f64> {
    if spec.d != 2 {
        return Err(VitlError::Unsupported(format!("closed forms exist for d = 2 only, got d = {}", spec.d)));
    }
    let (b2, s2, r2) = (spec.beta * spec.beta, spec.noise_sd * spec.noise_sd, spec.rho * spec.rho);
    let value = |k: EstimandKind| match k {
        EstimandKind::RefLoss => s2,
        EstimandKind::CondPermLoss => s2 + 2.0 * b2 * (1.0 - r2),
        EstimandKind::LocoLoss => s2 + b2 * (1.0 - r2),
        EstimandKind::MargPermLoss => s2 + 2.0 * b2,
    };
    let (k, minus) = estimand.components();
    Ok(value(k) - minus.map_or(0.0, value))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub rhos: Vec<f64>,
    pub reps: usize,
    pub n: usize,
    pub estimators: Vec<EstimatorKind>,
    pub estimand: Estimand,
    /// Signal, noise and dimension of the DGP; `n`, `rho` and `seed` are set per repetition.
    pub dgp: DgpSpec,
    pub estimator: EstimatorConfig,
    /// Number of sample-splitting parts.
    pub parts: usize,
    pub seed: u64,
    /// Worker threads; `None` uses every available core.
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            rhos: vec![0.1, 0.5, 0.9],
            reps: 40,
            n: 500,
            estimators: vec![EstimatorKind::OneStep, EstimatorKind::Tmle],
            estimand: Estimand::CondPerm,
            dgp: DgpSpec::default(),
            estimator: EstimatorConfig::default(),
            parts: 3,
            seed: 20240,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub rho: f64,
    pub estimator: EstimatorKind,
    pub rep: usize,
    pub truth: f64,
    pub point: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub covered: bool,
    pub bias: f64,
    pub k_n: usize,
    pub converged: bool,
    /// Error message when the estimator failed; the numeric fields are then NaN.
    pub failure: Option<String>,
}

impl ExperimentRow {
    /// Counted in coverage and bias summaries.
    pub fn usable(&self) -> bool {
        self.failure.is_none() && self.converged
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub rho: f64,
    pub estimator: EstimatorKind,
    pub coverage: f64,
    pub mean_bias: f64,
    pub mean_ci_width: f64,
    pub used: usize,
    pub failed: usize,
    pub nonconverged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub rows: Vec<ExperimentRow>,
    pub aggregates: Vec<Aggregate>,
}

/// Seed for repetition `rep` at grid position `cell`, derived by a fixed counter scheme.
pub fn rep_seed(master: u64, cell: usize, rep: usize) -> u64 {
    let mut v = master ^ ((cell as u64) << 32) ^ rep as u64;
    v = v.wrapping_add(0x9e37_79b9_7f4a_7c15);
    v = (v ^ (v >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    v = (v ^ (v >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    v ^ (v >> 31)
}

/// Coverage, bias and width per `(rho, estimator)` from the rows, in row order of first appearance.
pub fn aggregate(rows: &[ExperimentRow]) -> Vec<Aggregate> {
    let mut keys: Vec<(f64, EstimatorKind)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|&(rho, e)| rho == r.rho && e == r.estimator) {
            keys.push((r.rho, r.estimator));
        }
    }
    keys.into_iter()
        .map(|(rho, estimator)| {
            let cell: Vec<&ExperimentRow> = rows.iter().filter(|r| r.rho == rho && r.estimator == estimator).collect();
            let used: Vec<&&ExperimentRow> = cell.iter().filter(|r| r.usable()).collect();
            let k = used.len() as f64;
            let mean = |f: &dyn Fn(&ExperimentRow) -> f64| if used.is_empty() { f64::NAN } else { used.iter().map(|r| f(r)).sum::<f64>() / k };
            Aggregate {
                rho,
                estimator,
                coverage: mean(&|r| if r.covered { 1.0 } else { 0.0 }),
                mean_bias: mean(&|r| r.bias),
                mean_ci_width: mean(&|r| r.ci_hi - r.ci_lo),
                used: used.len(),
                failed: cell.iter().filter(|r| r.failure.is_some()).count(),
                nonconverged: cell.iter().filter(|r| r.failure.is_none() && !r.converged).count(),
            }
        })
        .collect()
}

fn run_cell(cfg: &ExperimentConfig, cell: usize, rep: usize) -> Vec<ExperimentRow> {
    let rho = cfg.rhos[cell];
    let seed = rep_seed(cfg.seed, cell, rep);
    let spec = DgpSpec { n: cfg.n, rho, seed, ..cfg.dgp.clone() };
    let truth = true_importance(&spec, cfg.estimand).unwrap_or(f64::NAN);
    let prepared = generate(&spec).and_then(|d| make_split(d.n(), cfg.parts, seed).map(|p| (d, p)));
    cfg.estimators
        .iter()
        .map(|&kind| {
            let res = prepared
                .as_ref()
                .map_err(|e| e.to_string())
                .and_then(|(d, plan)| estimate(d, plan, cfg.estimand, kind, &cfg.estimator, seed).map_err(|e| e.to_string()));
            match res {
                Ok(r) => ExperimentRow {
                    rho,
                    estimator: kind,
                    rep,
                    truth,
                    point: r.point,
                    se: r.se,
                    ci_lo: r.ci_lo,
                    ci_hi: r.ci_hi,
                    covered: r.ci_lo <= truth && truth <= r.ci_hi,
                    bias: r.point - truth,
                    k_n: r.k_n,
                    converged: r.converged,
                    failure: None,
                },
                Err(msg) => ExperimentRow {
                    rho,
                    estimator: kind,
                    rep,
                    truth,
                    point: f64::NAN,
                    se: f64::NAN,
                    ci_lo: f64::NAN,
                    ci_hi: f64::NAN,
                    covered: false,
                    bias: f64::NAN,
                    k_n: 0,
                    converged: false,
                    failure: Some(msg),
                },
            }
        })
        .collect()
}

/// Generates, estimates and scores every `(rho, repetition)` cell. Rows come
/// back ordered by `(rho, estimator, rep)` regardless of the thread count.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    if cfg.reps == 0 {
        return Err(VitlError::Parameter("reps must be >= 1".into()));
    }
    if cfg.rhos.is_empty() || cfg.estimators.is_empty() {
        return Err(VitlError::Parameter("the rho grid and the estimator list must be nonempty".into()));
    }
    cfg.estimator.validate()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cfg.threads {
        pool = pool.num_threads(t.max(1));
    }
    let pool = pool.build().map_err(|e| VitlError::Config(format!("thread pool: {e}")))?;
    let tasks: Vec<(usize, usize)> = (0..cfg.rhos.len()).flat_map(|c| (0..cfg.reps).map(move |r| (c, r))).collect();
    let per_task: Vec<Vec<ExperimentRow>> = pool.install(|| tasks.par_iter().map(|&(c, r)| run_cell(cfg, c, r)).collect());
    let mut rows = Vec::with_capacity(per_task.len() * cfg.estimators.len());
    for c in 0..cfg.rhos.len() {
        for e in 0..cfg.estimators.len() {
            for r in 0..cfg.reps {
                rows.push(per_task[c * cfg.reps + r][e].clone());
            }
        }
    }
    let aggregates = aggregate(&rows);
    Ok(ExperimentResult { rows, aggregates })
}

impl ExperimentResult {
    pub fn write_rows_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "rho,estimator,rep,truth,point,se,ci_lo,ci_hi,covered,bias,k_n,converged,failed")?;
        for r in &self.rows {
            writeln!(
                out,
                "{:?},{},{},{:?},{:?},{:?},{:?},{:?},{},{:?},{},{},{}",
                r.rho,
                r.estimator,
                r.rep,
                r.truth,
                r.point,
                r.se,
                r.ci_lo,
                r.ci_hi,
                r.covered,
                r.bias,
                r.k_n,
                r.converged,
                r.failure.is_some()
            )?;
        }
        Ok(())
    }

    pub fn write_aggregates_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "rho,estimator,coverage,mean_bias,mean_ci_width,used,failed,nonconverged")?;
        for a in &self.aggregates {
            writeln!(
                out,
                "{:?},{},{:?},{:?},{:?},{},{},{}",
                a.rho, a.estimator, a.coverage, a.mean_bias, a.mean_ci_width, a.used, a.failed, a.nonconverged
            )?;
        }
        Ok(())
    }

    /// Two panels, coverage and mean bias against rho, one polyline per estimator.
    pub fn svg(&self, alpha: f64) -> String {
        let (w, h, pad) = (360.0, 260.0, 40.0);
        let colors = ["#1b6ca8", "#d1495b", "#2e933c", "#8f5ba5"];
        let mut estimators: Vec<EstimatorKind> = Vec::new();
        for a in &self.aggregates {
            if !estimators.contains(&a.estimator) {
                estimators.push(a.estimator);
            }
        }
        let rhos: Vec<f64> = self.aggregates.iter().map(|a| a.rho).collect();
        let (rlo, rhi) = rhos.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &r| (l.min(r), h.max(r)));
        let rspan = if rhi > rlo { rhi - rlo } else { 1.0 };
        let biases: Vec<f64> = self.aggregates.iter().map(|a| a.mean_bias).filter(|b| b.is_finite()).collect();
        let bmax = biases.iter().fold(1e-9f64, |m, b| m.max(b.abs()));
        let mut s = String::new();
        let _ = write!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="11">"#, 2.0 * w, h);
        for (panel, title) in [(0, "coverage"), (1, "mean bias")] {
            let x0 = panel as f64 * w;
            let px = |r: f64| x0 + pad + (r - rlo) / rspan * (w - 2.0 * pad);
            let py = |v: f64| match panel {
                0 => h - pad - v * (h - 2.0 * pad),
                _ => h / 2.0 - v / bmax * (h / 2.0 - pad),
            };
            let _ = write!(s, r#"<text x="{}" y="20">{title}</text>"#, x0 + pad);
            let _ = write!(s, r#"<rect x="{}" y="{pad}" width="{}" height="{}" fill="none" stroke="gray"/>"#, x0 + pad, w - 2.0 * pad, h - 2.0 * pad);
            let reference = if panel == 0 { py(1.0 - alpha) } else { py(0.0) };
            let _ = write!(s, r#"<line x1="{}" y1="{reference}" x2="{}" y2="{reference}" stroke="gray" stroke-dasharray="4 3"/>"#, x0 + pad, x0 + w - pad);
            for &r in &rhos {
                let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="middle">{r}</text>"#, px(r), h - pad + 14.0);
            }
            for (ei, e) in estimators.iter().enumerate() {
                let pts: Vec<String> = self
                    .aggregates
                    .iter()
                    .filter(|a| a.estimator == *e)
                    .map(|a| (a.rho, if panel == 0 { a.coverage } else { a.mean_bias }))
                    .filter(|(_, v)| v.is_finite())
                    .map(|(r, v)| format!("{:.2},{:.2}", px(r), py(v)))
                    .collect();
                let color = colors[ei % colors.len()];
                let _ = write!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
                let _ = write!(s, r#"<text x="{}" y="{}" fill="{color}">{e}</text>"#, x0 + w - pad - 50.0, pad + 14.0 * (ei as f64 + 1.0));
            }
        }
        s.push_str("</svg>\n");
        s
    }
}
