//! Exact discrete-distribution oracles for the loss functionals and their
//! Gateaux derivatives, used to certify the influence functions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::eif::{self, EifContext, EstimandKind, LawProvider, LearnerMode, Point};
use crate::error::{Result, VitlError};
use crate::law::{WeightedLaw, WeightedSample};
use crate::learners::Regressor;
use crate::real::Real;

pub const MAX_SUPPORT: usize = 50;

/// Finite law on `(x, y, z)` points with strictly positive masses.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint<T> {
    x: Vec<T>,
    y: Vec<T>,
    z: Vec<T>,
    dz: usize,
    probs: Vec<T>,
}

impl<T: Real> DiscreteJoint<T> {
    pub fn new(x: Vec<T>, y: Vec<T>, z: Vec<T>, dz: usize, probs: Vec<T>) -> Result<Self> {
        let n = x.len();
        if n == 0 || n > MAX_SUPPORT {
            return Err(VitlError::Size(format!("support must hold 1..={MAX_SUPPORT} points, got {n}")));
        }
        if y.len() != n || probs.len() != n || z.len() != n * dz {
            return Err(VitlError::Size("support columns have mismatched lengths".into()));
        }
        if probs.iter().any(|&p| !(p > T::zero())) {
            return Err(VitlError::Parameter("all probabilities must be > 0".into()));
        }
        let total: T = probs.iter().copied().sum();
        if (total - T::one()).abs() > T::lit(1e-12) {
            return Err(VitlError::Parameter(format!("probabilities sum to {total}, not 1")));
        }
        let d = Self { x, y, z, dz, probs };
        for i in 0..n {
            for j in 0..i {
                if d.x[i] == d.x[j] && d.y[i] == d.y[j] && d.z_row(i) == d.z_row(j) {
                    return Err(VitlError::Parameter(format!("support points {j} and {i} coincide")));
                }
            }
        }
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x(&self) -> &[T] {
        &self.x
    }

    pub fn y(&self) -> &[T] {
        &self.y
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn dz(&self) -> usize {
        self.dz
    }

    pub fn z_row(&self, i: usize) -> &[T] {
        &self.z[i * self.dz..(i + 1) * self.dz]
    }

    pub fn point(&self, i: usize) -> Point<'_, T> {
        Point { x: self.x[i], y: self.y[i], z: self.z_row(i) }
    }

    pub fn as_sample(&self) -> WeightedSample<T> {
        WeightedSample { x: self.x.clone(), y: self.y.clone(), z: self.z.clone(), dz: self.dz, w: self.probs.clone() }
    }

    /// Same support with the points listed in `order`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut z = Vec::with_capacity(self.z.len());
        for &i in order {
            z.extend_from_slice(self.z_row(i));
        }
        Self::new(
            order.iter().map(|&i| self.x[i]).collect(),
            order.iter().map(|&i| self.y[i]).collect(),
            z,
            self.dz,
            order.iter().map(|&i| self.probs[i]).collect(),
        )
    }

    /// Masses reweighted without validation; used for the contamination path.
    fn with_probs(&self, probs: Vec<T>) -> Self {
        Self { probs, ..self.clone() }
    }

    fn z_mass(&self, z: &[T]) -> T {
        (0..self.len()).filter(|&k| self.z_row(k) == z).map(|k| self.probs[k]).sum()
    }
}

/// Conditional laws of a [`DiscreteJoint`], by exact Bayes over the support.
pub struct DiscreteLaws<'a, T>(pub &'a DiscreteJoint<T>);

impl<T: Real> DiscreteLaws<'_, T> {
    fn conditional(&self, z: &[T], pick: impl Fn(usize) -> T) -> WeightedLaw<T> {
        let d = self.0;
        let pz = d.z_mass(z);
        let idx: Vec<usize> = (0..d.len()).filter(|&k| d.z_row(k) == z).collect();
        WeightedLaw::new(idx.iter().map(|&k| pick(k)).collect(), idx.iter().map(|&k| d.probs[k] / pz).collect())
    }
}

impl<T: Real> LawProvider<T> for DiscreteLaws<'_, T> {
    fn x_law(&self, z: &[T]) -> WeightedLaw<T> {
        self.conditional(z, |k| self.0.x[k])
    }

    fn y_law(&self, z: &[T]) -> WeightedLaw<T> {
        self.conditional(z, |k| self.0.y[k])
    }

    fn x_density(&self, x: T, z: &[T]) -> Result<T> {
        let d = self.0;
        let pz = d.z_mass(z);
        if !(pz > T::zero()) {
            return Ok(T::zero());
        }
        let pxz: T = (0..d.len()).filter(|&k| d.x[k] == x && d.z_row(k) == z).map(|k| d.probs[k]).sum();
        Ok(pxz / pz)
    }
}

/// Exact `E[Y | x, z]` (or `E[Y | z]` when `uses_x` is false) under a discrete law.
pub struct CondMeanRegressor<'a, T> {
    pub dist: &'a DiscreteJoint<T>,
    pub uses_x: bool,
}

impl<T: Real> Regressor<T> for CondMeanRegressor<'_, T> {
    fn predict(&self, x: T, z: &[T]) -> T {
        let d = self.dist;
        let (mut num, mut den) = (T::zero(), T::zero());
        for k in 0..d.len() {
            if d.z_row(k) == z && (!self.uses_x || d.x[k] == x) {
                num = num + d.probs[k] * d.y[k];
                den = den + d.probs[k];
            }
        }
        // Undefined off the support; NaN surfaces as a numeric error downstream.
        num / den
    }
}

/// How the oracle obtains the regression maps.
#[derive(Clone, Copy)]
pub enum OracleLearner<'a, T> {
    /// Given functions, unaffected by contamination.
    Fixed { f: &'a dyn Regressor<T>, g: Option<&'a dyn Regressor<T>> },
    /// Exact conditional means of whichever law is being evaluated.
    ConditionalMean,
}

impl<T> OracleLearner<'_, T> {
    pub fn mode(&self) -> LearnerMode {
        match self {
            Self::Fixed { .. } => LearnerMode::Fixed,
            Self::ConditionalMean => LearnerMode::Regression,
        }
    }
}

fn oracle_loss<T: Real>(y: T, yhat: T) -> T {
    (y - yhat) * (y - yhat)
}

/// Estimand value by exhaustive nested sums over the support.
pub fn exact_estimand<T: Real>(dist: &DiscreteJoint<T>, kind: EstimandKind, learner: OracleLearner<'_, T>) -> Result<T> {
    let full = CondMeanRegressor { dist, uses_x: true };
    let reduced = CondMeanRegressor { dist, uses_x: false };
    let (f, g): (&dyn Regressor<T>, Option<&dyn Regressor<T>>) = match learner {
        OracleLearner::Fixed { f, g } => (f, g),
        OracleLearner::ConditionalMean => (&full, Some(&reduced)),
    };
    let n = dist.len();
    let p = &dist.probs;
    let mut total = T::zero();
    match kind {
        EstimandKind::RefLoss => {
            for k in 0..n {
                total = total + p[k] * oracle_loss(dist.y[k], f.predict(dist.x[k], dist.z_row(k)));
            }
        }
        EstimandKind::LocoLoss => {
            let g = g.ok_or_else(|| VitlError::Config("LOCO needs an X-free learner".into()))?;
            for k in 0..n {
                total = total + p[k] * oracle_loss(dist.y[k], g.predict(dist.x[k], dist.z_row(k)));
            }
        }
        EstimandKind::CondPermLoss => {
            // Σ_z p(z) Σ_{k,l in stratum z} p(x_k|z) p(y_l|z) L(y_l, f(x_k, z))
            for l in 0..n {
                let zl = dist.z_row(l);
                let pz = dist.z_mass(zl);
                for k in 0..n {
                    if dist.z_row(k) == zl {
                        total = total + p[k] * p[l] / pz * oracle_loss(dist.y[l], f.predict(dist.x[k], zl));
                    }
                }
            }
        }
        EstimandKind::MargPermLoss => {
            for l in 0..n {
                for k in 0..n {
                    total = total + p[k] * p[l] * oracle_loss(dist.y[l], f.predict(dist.x[k], dist.z_row(l)));
                }
            }
        }
    }
    if total.is_finite() {
        Ok(total)
    } else {
        Err(VitlError::Numeric(format!("exact {kind} value")))
    }
}

/// Largest admissible contamination step toward support point `j`.
pub fn step_bound<T: Real>(dist: &DiscreteJoint<T>, j: usize) -> f64 {
    let pj = dist.probs[j].to_f64_lossy();
    if pj >= 1.0 {
        f64::INFINITY
    } else {
        pj / (1.0 - pj)
    }
}

/// Central finite difference `[Ψ((1−t)P + tδ_j) − Ψ((1+t)P − tδ_j)] / (2t)`.
pub fn gateaux_fd<T: Real>(
    dist: &DiscreteJoint<T>,
    kind: EstimandKind,
    learner: OracleLearner<'_, T>,
    j: usize,
    t: T,
) -> Result<T> {
    if j >= dist.len() {
        return Err(VitlError::Size(format!("support index {j} out of range")));
    }
    let bound = step_bound(dist, j);
    let tf = t.to_f64_lossy();
    if !(tf > 0.0 && tf < bound) {
        return Err(VitlError::Step { t: tf, bound });
    }
    let shift = |sign: T| {
        let probs = dist
            .probs
            .iter()
            .enumerate()
            .map(|(k, &pk)| (T::one() - sign * t) * pk + if k == j { sign * t } else { T::zero() })
            .collect();
        dist.with_probs(probs)
    };
    let plus = exact_estimand(&shift(T::one()), kind, learner)?;
    let minus = exact_estimand(&shift(-T::one()), kind, learner)?;
    Ok((plus - minus) / (T::lit(2.0) * t))
}

/// Influence values of `kind` at every support point, with Ψ̂ set to the exact value.
pub fn eif_on_support<T: Real>(dist: &DiscreteJoint<T>, kind: EstimandKind, learner: OracleLearner<'_, T>) -> Result<Vec<T>> {
    let full = CondMeanRegressor { dist, uses_x: true };
    let reduced = CondMeanRegressor { dist, uses_x: false };
    let psi_hat = exact_estimand(dist, kind, learner)?;
    let pool = dist.as_sample();
    let mut ctx = match learner {
        OracleLearner::Fixed { f, g } => {
            let c = EifContext::new(f);
            match g {
                Some(g) => c.with_reduced(g),
                None => c,
            }
        }
        OracleLearner::ConditionalMean => EifContext::new(&full).with_reduced(&reduced).with_cond_mean(&full),
    };
    ctx = ctx.with_mode(learner.mode()).with_psi(psi_hat).with_pool(&pool);
    eif::eif_values(&ctx, &DiscreteLaws(dist), kind, &pool)
}

/// Random polynomial regression maps used as fixed learners by the checks.
#[derive(Debug, Clone)]
pub struct PolyLearner {
    pub c: [f64; 6],
    pub uses_x: bool,
}

impl PolyLearner {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, uses_x: bool) -> Self {
        let mut c = [0.0; 6];
        for v in c.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        Self { c, uses_x }
    }
}

impl<T: Real> Regressor<T> for PolyLearner {
    fn predict(&self, x: T, z: &[T]) -> T {
        let c = |i: usize| T::lit(self.c[i]);
        let zs: T = z.iter().copied().sum();
        let base = c(0) + c(2) * zs + c(5) * zs * zs;
        if self.uses_x {
            base + c(1) * x + c(3) * x * zs + c(4) * x * x
        } else {
            base
        }
    }
}

fn random_probs<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|r| r / s).collect();
    // Push the rounding residue onto the largest mass so the sum is 1 to machine precision.
    let resid = 1.0 - p.iter().sum::<f64>();
    let imax = (0..n).max_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap()).unwrap();
    p[imax] += resid;
    p
}

/// Random law on `n` points whose `z` takes a few shared values, so strata hold several points.
pub fn random_joint<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Result<DiscreteJoint<f64>> {
    let strata = 1 + n / 4;
    let zvals: Vec<f64> = (0..strata).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let z = (0..n).map(|_| zvals[rng.random_range(0..strata)]).collect();
    let x = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let y = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    DiscreteJoint::new(x, y, z, 1, random_probs(rng, n))
}

/// Random law on the full grid `x-values × z-values × y-values`, every cell positive.
pub fn random_grid<R: Rng + ?Sized>(rng: &mut R, nx: usize, nz: usize, ny: usize) -> Result<DiscreteJoint<f64>> {
    let draw = |rng: &mut R, k: usize| -> Vec<f64> { (0..k).map(|i| i as f64 + rng.random_range(0.0..0.9)).collect() };
    let (xs, zs, ys) = (draw(rng, nx), draw(rng, nz), draw(rng, ny));
    let (mut x, mut y, mut z) = (Vec::new(), Vec::new(), Vec::new());
    for &xv in &xs {
        for &zv in &zs {
            for &yv in &ys {
                x.push(xv);
                z.push(zv);
                y.push(yv);
            }
        }
    }
    let n = x.len();
    DiscreteJoint::new(x, y, z, 1, random_probs(rng, n))
}

/// Tolerance on the Gateaux relative error for `kind`.
pub fn gateaux_tolerance(kind: EstimandKind) -> f64 {
    match kind {
        EstimandKind::MargPermLoss => 1e-3,
        _ => 1e-4,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EifCheckRow {
    pub kind: EstimandKind,
    pub trials: usize,
    /// Largest `|ψ − fd| / (1 + |ψ|)` over trials and support points.
    pub max_rel_err: f64,
    /// Largest `|Σ p ψ|` over trials.
    pub max_mean_abs: f64,
    pub tol: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct EifCheckConfig {
    pub trials: usize,
    pub kinds: Vec<EstimandKind>,
    pub mode: LearnerMode,
    pub max_support: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for EifCheckConfig {
    fn default() -> Self {
        Self { trials: 100, kinds: EstimandKind::ALL.to_vec(), mode: LearnerMode::Fixed, max_support: 20, step: 1e-5, seed: 2024 }
    }
}

/// Gateaux check of every requested kind over random discrete laws.
///
/// Fixed mode draws laws with up to `max_support` points and random polynomial
/// learners. Regression mode draws full-grid laws (3 × 2 × 3) so the exact
/// conditional mean is defined wherever the functionals evaluate it.
pub fn check_eif(cfg: &EifCheckConfig) -> Result<Vec<EifCheckRow>> {
    if cfg.trials == 0 {
        return Err(VitlError::Parameter("trials must be >= 1".into()));
    }
    if cfg.max_support < 2 || cfg.max_support > MAX_SUPPORT {
        return Err(VitlError::Parameter(format!("max support must lie in 2..={MAX_SUPPORT}")));
    }
    let mut rows = Vec::new();
    for (ki, &kind) in cfg.kinds.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(ki as u64));
        let (mut max_rel, mut max_mean) = (0.0f64, 0.0f64);
        for _ in 0..cfg.trials {
            let (dist, f, g);
            let learner = match cfg.mode {
                LearnerMode::Fixed => {
                    let n = rng.random_range(2..=cfg.max_support);
                    dist = random_joint(&mut rng, n)?;
                    f = PolyLearner::random(&mut rng, true);
                    g = PolyLearner::random(&mut rng, false);
                    OracleLearner::Fixed { f: &f, g: Some(&g) }
                }
                LearnerMode::Regression => {
                    dist = random_grid(&mut rng, 3, 2, 3)?;
                    OracleLearner::ConditionalMean
                }
            };
            let psi = eif_on_support(&dist, kind, learner)?;
            let mean: f64 = psi.iter().zip(dist.probs()).map(|(a, p)| a * p).sum();
            max_mean = max_mean.max(mean.abs());
            for (j, &pj) in psi.iter().enumerate() {
                let t = cfg.step.min(0.5 * step_bound(&dist, j));
                let fd = gateaux_fd(&dist, kind, learner, j, t)?;
                max_rel = max_rel.max((pj - fd).abs() / (1.0 + pj.abs()));
            }
        }
        let tol = gateaux_tolerance(kind);
        rows.push(EifCheckRow {
            kind,
            trials: cfg.trials,
            max_rel_err: max_rel,
            max_mean_abs: max_mean,
            tol,
            pass: max_rel <= tol && max_mean <= 1e-10,
        });
    }
    Ok(rows)
}
