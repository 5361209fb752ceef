//! Plug-in, one-step and targeted estimators over a sample-splitting plan.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::conddens::{CondDensityModel, DensityConfig};
use crate::data::{make_split, Dataset, SplitPlan};
use crate::eif::{self, EifContext, Estimand, LearnerMode, ModelLaws, SampledLaws, LawProvider};
use crate::error::{Result, VitlError};
use crate::law::WeightedSample;
use crate::learners::{self, FittedLearner, LearnerConfig};
use crate::real::{mean_sd, Real};
use crate::targeting::{TargetConfig, Targeter, TargetingTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    Plugin,
    OneStep,
    Tmle,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Plugin => "plugin",
            Self::OneStep => "onestep",
            Self::Tmle => "tmle",
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = VitlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plugin" => Ok(Self::Plugin),
            "onestep" => Ok(Self::OneStep),
            "tmle" => Ok(Self::Tmle),
            other => Err(VitlError::Parameter(format!("unknown estimator `{other}` (plugin|onestep|tmle)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    pub learner: LearnerConfig,
    pub density: DensityConfig,
    pub alpha: f64,
    pub eif_mode: LearnerMode,
    pub target: TargetConfig,
    /// Grid points per axis in each targeting block.
    pub target_m: usize,
    /// Compute the standard error on a third part instead of the targeting part.
    pub use_i3: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            learner: LearnerConfig::default(),
            density: DensityConfig::default(),
            alpha: 0.05,
            eif_mode: LearnerMode::Fixed,
            target: TargetConfig::default(),
            target_m: 32,
            use_i3: true,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(VitlError::Parameter(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.density.m < 2 || self.target_m < 2 {
            return Err(VitlError::Parameter("support sizes m and target_m must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FoldScheme {
    Single,
    KFold(usize),
}

impl std::fmt::Display for FoldScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Single => f.write_str("single"),
            Self::KFold(k) => write!(f, "kfold{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport<T> {
    pub estimand: Estimand,
    pub estimator: EstimatorKind,
    pub point: T,
    pub se: T,
    pub ci_lo: T,
    pub ci_hi: T,
    pub alpha: f64,
    pub n_inf: usize,
    /// Targeting iterations (zero for the other estimators).
    pub k_n: usize,
    pub converged: bool,
    /// The influence values had (numerically) zero spread.
    pub degenerate: bool,
    pub seed: u64,
    pub scheme: FoldScheme,
    /// Plug-in value before any correction.
    pub plugin: T,
    /// Weights clamped at zero while replaying targeting on the inference part.
    pub clamped: usize,
    pub trace: Option<TargetingTrace<T>>,
    pub folds: Vec<EstimateReport<T>>,
    /// Influence values on the inference part, in row order of that part.
    pub influence: Vec<T>,
}

pub const REPORT_FIELDS: [&str; 11] =
    ["estimand", "estimator", "point", "se", "ci_lo", "ci_hi", "alpha", "n_inf", "k_n", "converged", "seed"];

impl<T: Real> EstimateReport<T> {
    fn values(&self) -> [String; 11] {
        [
            self.estimand.to_string(),
            self.estimator.to_string(),
            format!("{:?}", self.point),
            format!("{:?}", self.se),
            format!("{:?}", self.ci_lo),
            format!("{:?}", self.ci_hi),
            format!("{:?}", self.alpha),
            self.n_inf.to_string(),
            self.k_n.to_string(),
            self.converged.to_string(),
            self.seed.to_string(),
        ]
    }

    /// `key = value` lines in the fixed field order.
    pub fn to_kv(&self) -> String {
        REPORT_FIELDS.iter().zip(self.values()).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn csv_header() -> String {
        REPORT_FIELDS.join(",")
    }

    pub fn csv_row(&self) -> String {
        self.values().join(",")
    }

    /// True when the report should be surfaced as a statistical warning.
    pub fn warning(&self) -> bool {
        !self.converged || self.degenerate
    }
}

/// Two-sided Wald interval `point ∓ z_{1−α/2}·se`.
pub fn wald_ci<T: Real>(point: T, se: T, alpha: f64) -> Result<(T, T)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(VitlError::Parameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if !(se >= T::zero()) {
        return Err(VitlError::Parameter(format!("standard error must be >= 0, got {se}")));
    }
    let z = Normal::standard().inverse_cdf(1.0 - alpha / 2.0);
    let half = T::lit(z) * se;
    Ok((point - half, point + half))
}

/// Nuisance objects fitted on the training part.
struct Nuisance<T> {
    f: FittedLearner<T>,
    g: Option<FittedLearner<T>>,
    px: CondDensityModel<T>,
    py: CondDensityModel<T>,
    rmse: T,
}

fn fit_nuisance<T: Real>(data: &Dataset<T>, i1: &[usize], estimand: Estimand, cfg: &EstimatorConfig) -> Result<Nuisance<T>> {
    let train = data.subset(i1);
    let f = learners::fit(&train, &cfg.learner)?;
    let needs_g = matches!(estimand.components().0, eif::EstimandKind::LocoLoss);
    let g = if needs_g { Some(learners::fit_without_x(&train, &cfg.learner)?) } else { None };
    let px = CondDensityModel::fit(&cfg.density, train.x(), train.z_flat(), train.dz())?;
    let py = CondDensityModel::fit(&cfg.density, train.y(), train.z_flat(), train.dz())?;
    let rmse = f.rmse(&train);
    Ok(Nuisance { f, g, px, py, rmse })
}

fn degenerate<T: Real>(se: T, point: T) -> bool {
    se <= T::lit(1e-10) * (T::one() + point.abs())
}

#[allow(clippy::too_many_arguments)]
fn finish<T: Real>(
    estimand: Estimand,
    estimator: EstimatorKind,
    point: T,
    plugin: T,
    influence: Vec<T>,
    cfg: &EstimatorConfig,
    seed: u64,
    zero_se: bool,
) -> Result<EstimateReport<T>> {
    let n = influence.len();
    let se = if zero_se { T::zero() } else { mean_sd(&influence).1 / T::from_usize_lossy(n).sqrt() };
    let is_degenerate = !zero_se && degenerate(se, point);
    let se = if is_degenerate { T::zero() } else { se };
    let (ci_lo, ci_hi) = wald_ci(point, se, cfg.alpha)?;
    Ok(EstimateReport {
        estimand,
        estimator,
        point,
        se,
        ci_lo,
        ci_hi,
        alpha: cfg.alpha,
        n_inf: n,
        k_n: 0,
        converged: true,
        degenerate: is_degenerate,
        seed,
        scheme: FoldScheme::Single,
        plugin,
        clamped: 0,
        trace: None,
        folds: Vec::new(),
        influence,
    })
}

/// Plug-in value and influence values on `eval` for the (possibly differenced) estimand.
fn plugin_and_influence<T: Real>(
    nu: &Nuisance<T>,
    estimand: Estimand,
    cfg: &EstimatorConfig,
    eval: &WeightedSample<T>,
) -> Result<(T, Vec<T>)> {
    let laws = ModelLaws { px: &nu.px, py: &nu.py, m: cfg.density.m };
    let mut ctx = EifContext::new(&nu.f).with_mode(cfg.eif_mode).with_pool(eval);
    if let Some(g) = &nu.g {
        ctx = ctx.with_reduced(g);
    }
    let (k, minus) = estimand.components();
    let psi_k = eif::plugin_value(&ctx, &laws, k, eval)?;
    let mut psi = eif::eif_values(&ctx.with_psi(psi_k), &laws, k, eval)?;
    let mut plugin = psi_k;
    if let Some(m) = minus {
        let psi_m = eif::plugin_value(&ctx, &laws, m, eval)?;
        let other = eif::eif_values(&ctx.with_psi(psi_m), &laws, m, eval)?;
        for (a, b) in psi.iter_mut().zip(other) {
            *a = *a - b;
        }
        plugin = plugin - psi_m;
    }
    Ok((plugin, psi))
}

fn correction_estimate<T: Real>(
    data: &Dataset<T>,
    i1: &[usize],
    i2: &[usize],
    estimand: Estimand,
    kind: EstimatorKind,
    cfg: &EstimatorConfig,
    seed: u64,
) -> Result<EstimateReport<T>> {
    cfg.validate()?;
    let nu = fit_nuisance(data, i1, estimand, cfg)?;
    let eval = WeightedSample::empirical(data, i2);
    let (plugin, psi) = plugin_and_influence(&nu, estimand, cfg, &eval)?;
    match kind {
        EstimatorKind::Plugin => finish(estimand, kind, plugin, plugin, psi, cfg, seed, true),
        _ => {
            let mean = psi.iter().copied().sum::<T>() / T::from_usize_lossy(psi.len());
            finish(estimand, EstimatorKind::OneStep, plugin + mean, plugin, psi, cfg, seed, false)
        }
    }
}

/// Plug-in value on fold 1, reported with a zero-width interval.
pub fn estimate_plugin<T: Real>(data: &Dataset<T>, plan: &SplitPlan, estimand: Estimand, cfg: &EstimatorConfig, seed: u64) -> Result<EstimateReport<T>> {
    correction_estimate(data, &plan.fold(0), &plan.fold(1), estimand, EstimatorKind::Plugin, cfg, seed)
}

/// Plug-in value plus the mean influence, fitted on fold 0 and evaluated on fold 1.
/// Folds past 1 are left unused, so a three-part plan gives the same roles as targeting.
pub fn estimate_onestep<T: Real>(data: &Dataset<T>, plan: &SplitPlan, estimand: Estimand, cfg: &EstimatorConfig, seed: u64) -> Result<EstimateReport<T>> {
    correction_estimate(data, &plan.fold(0), &plan.fold(1), estimand, EstimatorKind::OneStep, cfg, seed)
}

fn tmle_roles<T: Real>(
    data: &Dataset<T>,
    i1: &[usize],
    i2: &[usize],
    i3: Option<&[usize]>,
    estimand: Estimand,
    cfg: &EstimatorConfig,
    seed: u64,
) -> Result<EstimateReport<T>> {
    cfg.validate()?;
    if cfg.eif_mode != LearnerMode::Fixed {
        return Err(VitlError::Unsupported("targeting holds the learner fixed; use --eif-mode fixed".into()));
    }
    let nu = fit_nuisance(data, i1, estimand, cfg)?;
    let kernel_sd = nu.rmse.max(T::lit(1e-6));
    let targeter = Targeter::new(&nu.f, estimand, kernel_sd)?;
    let points = WeightedSample::empirical(data, i2);
    let laws = ModelLaws { px: &nu.px, py: &nu.py, m: cfg.target_m };
    let (support, trace) = match cfg.target.fresh_draws {
        None => {
            let support = targeter.build_support(&laws, &points)?;
            targeter.target(support, &cfg.target)?
        }
        Some(fresh_seed) => {
            let (px, py, m) = (&nu.px, &nu.py, cfg.target_m);
            let laws_at = move |iter: usize| -> Box<dyn LawProvider<T> + '_> {
                Box::new(SampledLaws { px, py, m, seed: fresh_seed.wrapping_add(iter as u64) })
            };
            targeter.target_fresh(&laws_at, &points, &cfg.target)?
        }
    };
    let point = trace.final_psi_hat;
    let (influence, clamped) = match i3 {
        Some(i3) => {
            let inf_points = WeightedSample::empirical(data, i3);
            let mut s = targeter.build_support(&laws, &inf_points)?;
            let clamped = targeter.replay(&mut s, &trace.epsilons());
            (targeter.anchor_influence(&s, point), clamped)
        }
        None => (targeter.evaluate(&support)?.anchor_psi, 0),
    };
    let mut report = finish(estimand, EstimatorKind::Tmle, point, trace.initial_psi_hat, influence, cfg, seed, false)?;
    report.k_n = trace.k_n;
    report.converged = trace.converged;
    report.clamped = clamped;
    report.trace = Some(trace);
    Ok(report)
}

/// Targeted estimator with nuisances fitted on fold 0.
///
/// With `use_i3`, targeting runs on fold 1 and the standard error comes from the
/// remaining folds. Otherwise targeting and standard error share folds `1..K`.
pub fn estimate_tmle<T: Real>(data: &Dataset<T>, plan: &SplitPlan, estimand: Estimand, cfg: &EstimatorConfig, seed: u64) -> Result<EstimateReport<T>> {
    if cfg.use_i3 {
        if plan.k() < 3 {
            return Err(VitlError::Parameter("targeting with a separate inference part needs a plan with >= 3 parts".into()));
        }
        let rest: Vec<usize> = (2..plan.k()).collect();
        tmle_roles(data, &plan.fold(0), &plan.fold(1), Some(&plan.folds_union(&rest)), estimand, cfg, seed)
    } else {
        let rest: Vec<usize> = (1..plan.k()).collect();
        tmle_roles(data, &plan.fold(0), &plan.folds_union(&rest), None, estimand, cfg, seed)
    }
}

pub fn estimate<T: Real>(
    data: &Dataset<T>,
    plan: &SplitPlan,
    estimand: Estimand,
    kind: EstimatorKind,
    cfg: &EstimatorConfig,
    seed: u64,
) -> Result<EstimateReport<T>> {
    match kind {
        EstimatorKind::Plugin => estimate_plugin(data, plan, estimand, cfg, seed),
        EstimatorKind::OneStep => estimate_onestep(data, plan, estimand, cfg, seed),
        EstimatorKind::Tmle => estimate_tmle(data, plan, estimand, cfg, seed),
    }
}

/// K-fold rotation with a fresh split of `data`.
pub fn estimate_kfold<T: Real>(
    data: &Dataset<T>,
    k: usize,
    estimand: Estimand,
    kind: EstimatorKind,
    cfg: &EstimatorConfig,
    seed: u64,
) -> Result<EstimateReport<T>> {
    let plan = make_split(data.n(), k, seed)?;
    estimate_kfold_with_plan(data, &plan, estimand, kind, cfg, seed)
}

/// Rotates fold roles over `plan`, averages the fold points and pools the
/// within-fold-centred influence values for the standard error.
pub fn estimate_kfold_with_plan<T: Real>(
    data: &Dataset<T>,
    plan: &SplitPlan,
    estimand: Estimand,
    kind: EstimatorKind,
    cfg: &EstimatorConfig,
    seed: u64,
) -> Result<EstimateReport<T>> {
    cfg.validate()?;
    let kk = plan.k();
    if kind == EstimatorKind::Tmle && cfg.use_i3 && kk < 3 {
        return Err(VitlError::Parameter("K-fold targeting with a separate inference fold needs K >= 3".into()));
    }
    let mut folds = Vec::with_capacity(kk);
    for r in 0..kk {
        let i2 = plan.fold(r);
        let i3_fold = (r + 1) % kk;
        let tmle_i3 = kind == EstimatorKind::Tmle && cfg.use_i3;
        let train: Vec<usize> = (0..kk).filter(|&f| f != r && !(tmle_i3 && f == i3_fold)).collect();
        let i1 = plan.folds_union(&train);
        let sub = match kind {
            EstimatorKind::Tmle => {
                let i3 = plan.fold(i3_fold);
                tmle_roles(data, &i1, &i2, tmle_i3.then_some(i3.as_slice()), estimand, cfg, seed.wrapping_add(r as u64))
            }
            _ => correction_estimate(data, &i1, &i2, estimand, kind, cfg, seed),
        }
        .map_err(|e| match e {
            VitlError::Size(m) => VitlError::Size(format!("fold {r}: {m}")),
            other => other,
        })?;
        folds.push(sub);
    }
    let kf = T::from_usize_lossy(kk);
    let point = folds.iter().map(|f| f.point).sum::<T>() / kf;
    let plugin = folds.iter().map(|f| f.plugin).sum::<T>() / kf;
    let n_inf: usize = folds.iter().map(|f| f.n_inf).sum();
    let se = if kind == EstimatorKind::Plugin {
        T::zero()
    } else {
        let ss: T = folds
            .iter()
            .map(|f| {
                let (m, _) = mean_sd(&f.influence);
                f.influence.iter().map(|&v| (v - m) * (v - m)).sum::<T>()
            })
            .sum();
        let dof = n_inf.saturating_sub(kk).max(1);
        (ss / T::from_usize_lossy(dof)).sqrt() / T::from_usize_lossy(n_inf).sqrt()
    };
    let (ci_lo, ci_hi) = wald_ci(point, se, cfg.alpha)?;
    Ok(EstimateReport {
        estimand,
        estimator: kind,
        point,
        se,
        ci_lo,
        ci_hi,
        alpha: cfg.alpha,
        n_inf,
        k_n: folds.iter().map(|f| f.k_n).max().unwrap_or(0),
        converged: folds.iter().all(|f| f.converged),
        degenerate: kind != EstimatorKind::Plugin && degenerate(se, point),
        seed,
        scheme: FoldScheme::KFold(kk),
        plugin,
        clamped: folds.iter().map(|f| f.clamped).sum(),
        trace: None,
        influence: folds.iter().flat_map(|f| f.influence.iter().copied()).collect(),
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conddens::DensityKind;
    use crate::eif::EstimandKind;
    use crate::sim::{generate, DgpSpec};

    fn data(n: usize, rho: f64, seed: u64) -> Dataset<f64> {
        generate(&DgpSpec { n, rho, seed, ..DgpSpec::default() }).unwrap()
    }

    fn small_cfg() -> EstimatorConfig {
        EstimatorConfig { density: DensityConfig { m: 32, ..DensityConfig::default() }, target_m: 12, ..EstimatorConfig::default() }
    }

    fn check_invariants(r: &EstimateReport<f64>) {
        let z = 1.959963984540054;
        assert!(r.ci_lo <= r.point && r.point <= r.ci_hi);
        assert!(((r.ci_hi - r.ci_lo) - 2.0 * z * r.se).abs() <= 1e-12 * (1.0 + r.point.abs()));
        assert!(r.se >= 0.0);
    }

    #[test]
    fn wald_examples() {
        let (lo, hi) = wald_ci(0.0f64, 1.0, 0.05).unwrap();
        assert!((hi - 1.959963984540054).abs() < 1e-10 && (lo + hi).abs() < 1e-15);
        assert_eq!(wald_ci(5.0, 0.0, 0.05).unwrap(), (5.0, 5.0));
        let (lo, hi) = wald_ci(2.0f64, 1.0, 0.3173).unwrap();
        assert!((hi - 3.0).abs() < 1e-4 && (lo - 1.0).abs() < 1e-4);
        assert!(wald_ci(0.0, 1.0, 1.5).is_err());
        assert!(wald_ci(0.0, -1.0, 0.05).is_err());
    }

    #[test]
    fn onestep_is_plugin_plus_mean_influence() {
        let d = data(300, 0.5, 1);
        let plan = make_split(300, 3, 1).unwrap();
        let r = estimate_onestep(&d, &plan, Estimand::CondPerm, &small_cfg(), 1).unwrap();
        let mean = r.influence.iter().sum::<f64>() / r.influence.len() as f64;
        assert!((r.point - (r.plugin + mean)).abs() < 1e-12);
        assert_eq!(r.n_inf, 100);
        check_invariants(&r);
        let p = estimate_plugin(&d, &plan, Estimand::CondPerm, &small_cfg(), 1).unwrap();
        assert_eq!(p.point, r.plugin);
        assert_eq!(p.ci_lo, p.ci_hi);
    }

    #[test]
    fn noiseless_null_importance_is_degenerate() {
        let d = generate(&DgpSpec { n: 90, beta: 0.0, noise_sd: 0.0, seed: 2, ..DgpSpec::default() }).unwrap();
        let plan = make_split(90, 3, 2).unwrap();
        let r = estimate_onestep(&d, &plan, Estimand::CondPerm, &small_cfg(), 2).unwrap();
        assert!(r.point.abs() < 1e-12);
        assert_eq!(r.se, 0.0);
        assert!(r.degenerate && r.warning());
    }

    #[test]
    fn tmle_without_iterations_reports_plugin() {
        let d = data(300, 0.5, 3);
        let plan = make_split(300, 3, 3).unwrap();
        let mut cfg = small_cfg();
        cfg.target.max_iter = 0;
        let r = estimate_tmle(&d, &plan, Estimand::CondPerm, &cfg, 3).unwrap();
        assert_eq!(r.point, r.plugin);
        assert_eq!(r.k_n, 0);
        check_invariants(&r);
    }

    #[test]
    fn tmle_report_echoes_stopping_rule_and_is_deterministic() {
        let d = data(450, 0.5, 4);
        let plan = make_split(450, 3, 4).unwrap();
        let r = estimate_tmle(&d, &plan, Estimand::CondPerm, &small_cfg(), 4).unwrap();
        let t = r.trace.as_ref().unwrap();
        assert!(r.converged && t.final_mean_eif.abs() <= t.threshold.max(1e-12));
        assert_eq!(r.n_inf, 150);
        check_invariants(&r);
        assert!((r.point - 37.5).abs() < 6.0 * r.se + 3.0, "{r:?}");
        assert_eq!(estimate_tmle(&d, &plan, Estimand::CondPerm, &small_cfg(), 4).unwrap(), r);
        let cfg2 = EstimatorConfig { use_i3: false, ..small_cfg() };
        let r2 = estimate_tmle(&d, &plan, Estimand::CondPerm, &cfg2, 4).unwrap();
        assert_eq!(r2.n_inf, 300);
    }

    #[test]
    fn kfold_on_identical_copies_matches_single_split() {
        let base = data(120, 0.5, 5);
        let mut y = Vec::new();
        let mut x = Vec::new();
        let mut z = Vec::new();
        for _ in 0..3 {
            y.extend_from_slice(base.y());
            x.extend_from_slice(base.x());
            z.extend_from_slice(base.z_flat());
        }
        let d = Dataset::new(y, x, z, 1).unwrap();
        let plan = SplitPlan::from_assignment((0..360).map(|i| i / 120).collect(), 3, 0).unwrap();
        let cfg = small_cfg();
        let single = estimate_tmle(&d, &plan, Estimand::CondPerm, &cfg, 5).unwrap();
        let kf = estimate_kfold_with_plan(&d, &plan, Estimand::CondPerm, EstimatorKind::Tmle, &cfg, 5).unwrap();
        assert!((kf.point - single.point).abs() < 1e-12, "{} vs {}", kf.point, single.point);
        assert_eq!(kf.folds.len(), 3);
    }

    #[test]
    fn pooled_se_bounded_by_fold_se() {
        for seed in 0..4 {
            let d = data(300, 0.4, 10 + seed);
            let r = estimate_kfold(&d, 3, Estimand::CondPerm, EstimatorKind::OneStep, &small_cfg(), seed).unwrap();
            let max = r.folds.iter().map(|f| f.se).fold(0.0, f64::max);
            assert!(r.se <= max + 1e-12);
            check_invariants(&r);
        }
    }

    #[test]
    fn loco_and_margperm_onestep() {
        let d = data(600, 0.5, 6);
        let plan = make_split(600, 3, 6).unwrap();
        let loco = estimate_onestep(&d, &plan, Estimand::Loco, &small_cfg(), 6).unwrap();
        assert!((loco.point - 18.75).abs() < 5.0 * loco.se + 1.0, "{loco:?}");
        let mp = estimate_onestep(&d, &plan, Estimand::MargPerm, &small_cfg(), 6).unwrap();
        assert!((mp.point - 50.0).abs() < 5.0 * mp.se + 2.0, "{mp:?}");
        let part = EstimatorConfig { density: DensityConfig { kind: DensityKind::Partition, min_leaf: 20, m: 32 }, ..small_cfg() };
        assert!(matches!(
            estimate_onestep(&d, &plan, Estimand::MargPerm, &part, 6),
            Err(VitlError::Unsupported(_))
        ));
    }

    #[test]
    fn configuration_errors() {
        let d = data(90, 0.5, 7);
        let plan = make_split(90, 3, 7).unwrap();
        let bad = EstimatorConfig { alpha: 1.5, ..small_cfg() };
        assert!(matches!(estimate_onestep(&d, &plan, Estimand::CondPerm, &bad, 7), Err(VitlError::Parameter(_))));
        assert!(matches!(estimate_tmle(&d, &plan, Estimand::Loco, &small_cfg(), 7), Err(VitlError::Unsupported(_))));
        let reg = EstimatorConfig { eif_mode: LearnerMode::Regression, ..small_cfg() };
        assert!(matches!(estimate_tmle(&d, &plan, Estimand::CondPerm, &reg, 7), Err(VitlError::Unsupported(_))));
        let two = make_split(90, 2, 7).unwrap();
        assert!(estimate_tmle(&d, &two, Estimand::CondPerm, &small_cfg(), 7).is_err());
        let r = estimate_onestep(&d, &plan, Estimand::Loss(EstimandKind::RefLoss), &small_cfg(), 7).unwrap();
        assert!(r.point > 0.0);
    }

    #[test]
    fn report_serialization() {
        let d = data(90, 0.5, 8);
        let plan = make_split(90, 3, 8).unwrap();
        let r = estimate_onestep(&d, &plan, Estimand::CondPerm, &small_cfg(), 8).unwrap();
        assert_eq!(EstimateReport::<f64>::csv_header(), "estimand,estimator,point,se,ci_lo,ci_hi,alpha,n_inf,k_n,converged,seed");
        assert_eq!(r.csv_row().split(',').count(), 11);
        assert!(r.to_kv().starts_with("estimand = condperm\nestimator = onestep\n"));
    }
}
