//! Efficient influence functions of the loss functionals under squared loss.
//!
//! Every integral over `x | z` or `y | z` is a weighted sum over a
//! [`WeightedLaw`]. The low-level functions take those laws explicitly so the
//! same code serves fitted densities, exact discrete distributions and the
//! targeting working distribution.

use rand::SeedableRng;

use crate::conddens::{CondDensityModel, DensityKind};
use crate::error::{Result, VitlError};
use crate::law::{WeightedLaw, WeightedSample};
use crate::learners::Regressor;
use crate::real::Real;

/// The four loss functionals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimandKind {
    RefLoss,
    CondPermLoss,
    LocoLoss,
    MargPermLoss,
}

impl EstimandKind {
    pub const ALL: [EstimandKind; 4] = [Self::RefLoss, Self::CondPermLoss, Self::LocoLoss, Self::MargPermLoss];

    pub fn name(self) -> &'static str {
        match self {
            Self::RefLoss => "refloss",
            Self::CondPermLoss => "condperm-loss",
            Self::LocoLoss => "loco-loss",
            Self::MargPermLoss => "margperm-loss",
        }
    }
}

impl std::fmt::Display for EstimandKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EstimandKind {
    type Err = VitlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "refloss" | "ref" => Ok(Self::RefLoss),
            "condperm-loss" | "condpermloss" => Ok(Self::CondPermLoss),
            "loco-loss" | "locoloss" => Ok(Self::LocoLoss),
            "margperm-loss" | "margpermloss" => Ok(Self::MargPermLoss),
            other => Err(VitlError::Parameter(format!("unknown estimand kind `{other}`"))),
        }
    }
}

/// A loss functional or an importance (loss functional minus the reference loss).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Estimand {
    Loss(EstimandKind),
    CondPerm,
    Loco,
    MargPerm,
}

impl Estimand {
    /// `(kind, subtracted kind)`; the estimand is `Ψ_kind − Ψ_subtracted`.
    pub fn components(self) -> (EstimandKind, Option<EstimandKind>) {
        match self {
            Self::Loss(k) => (k, None),
            Self::CondPerm => (EstimandKind::CondPermLoss, Some(EstimandKind::RefLoss)),
            Self::Loco => (EstimandKind::LocoLoss, Some(EstimandKind::RefLoss)),
            Self::MargPerm => (EstimandKind::MargPermLoss, Some(EstimandKind::RefLoss)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Loss(k) => k.name(),
            Self::CondPerm => "condperm",
            Self::Loco => "loco",
            Self::MargPerm => "margperm",
        }
    }
}

impl std::fmt::Display for Estimand {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Estimand {
    type Err = VitlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "condperm" => Ok(Self::CondPerm),
            "loco" => Ok(Self::Loco),
            "margperm" => Ok(Self::MargPerm),
            other => other.parse().map(Self::Loss).map_err(|_| {
                VitlError::Parameter(format!(
                    "unknown estimand `{other}` (condperm|loco|margperm|refloss|condperm-loss|loco-loss|margperm-loss)"
                ))
            }),
        }
    }
}

/// How the regression map is treated when the data law is perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LearnerMode {
    /// The learner is a fixed function; only the integrating law moves.
    #[default]
    Fixed,
    /// The learner is the regression function of the law and moves with it.
    Regression,
}

impl std::str::FromStr for LearnerMode {
    type Err = VitlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "regression" => Ok(Self::Regression),
            other => Err(VitlError::Parameter(format!("unknown eif mode `{other}` (fixed|regression)"))),
        }
    }
}

/// Squared loss.
#[inline]
pub fn loss<T: Real>(y: T, yhat: T) -> T {
    (y - yhat) * (y - yhat)
}

/// Derivative of [`loss`] in its second argument.
#[inline]
pub fn loss_deriv<T: Real>(y: T, yhat: T) -> T {
    T::lit(-2.0) * (y - yhat)
}

#[derive(Debug, Clone, Copy)]
pub struct Point<'p, T> {
    pub x: T,
    pub y: T,
    pub z: &'p [T],
}

/// Source of the conditional laws `x | z` and `y | z`.
pub trait LawProvider<T: Real>: Sync {
    fn x_law(&self, z: &[T]) -> WeightedLaw<T>;
    fn y_law(&self, z: &[T]) -> WeightedLaw<T>;
    /// Conditional density (or mass) of `x` given `z`.
    fn x_density(&self, _x: T, _z: &[T]) -> Result<T> {
        Err(VitlError::Unsupported("this law provider has no density for x | z".into()))
    }
}

/// Laws backed by fitted conditional density models.
pub struct ModelLaws<'a, T> {
    pub px: &'a CondDensityModel<T>,
    pub py: &'a CondDensityModel<T>,
    pub m: usize,
}

impl<T: Real> LawProvider<T> for ModelLaws<'_, T> {
    fn x_law(&self, z: &[T]) -> WeightedLaw<T> {
        self.px.support_points(z, self.m)
    }

    fn y_law(&self, z: &[T]) -> WeightedLaw<T> {
        self.py.support_points(z, self.m)
    }

    fn x_density(&self, x: T, z: &[T]) -> Result<T> {
        match self.px.kind() {
            DensityKind::Partition => Err(VitlError::Unsupported(
                "density ratio p(x)/p(x|z) is unstable under the partition density kind; use gaussian".into(),
            )),
            DensityKind::GaussianLinear => Ok(self.px.density(x, z)),
        }
    }
}

/// Laws made of `m` equally weighted draws from fitted density models.
///
/// Draws depend only on `seed` and the bits of `z`, so repeated calls agree.
pub struct SampledLaws<'a, T> {
    pub px: &'a CondDensityModel<T>,
    pub py: &'a CondDensityModel<T>,
    pub m: usize,
    pub seed: u64,
}

fn splitmix(mut v: u64) -> u64 {
    v = v.wrapping_add(0x9e37_79b9_7f4a_7c15);
    v = (v ^ (v >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    v = (v ^ (v >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    v ^ (v >> 31)
}

impl<T: Real> SampledLaws<'_, T> {
    fn draws(&self, model: &CondDensityModel<T>, z: &[T], salt: u64) -> WeightedLaw<T> {
        let key = z.iter().fold(splitmix(self.seed ^ salt), |h, v| splitmix(h ^ v.to_f64_lossy().to_bits()));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(key);
        WeightedLaw::uniform((0..self.m).map(|_| model.sample(z, &mut rng)).collect())
    }
}

impl<T: Real> LawProvider<T> for SampledLaws<'_, T> {
    fn x_law(&self, z: &[T]) -> WeightedLaw<T> {
        self.draws(self.px, z, 1)
    }

    fn y_law(&self, z: &[T]) -> WeightedLaw<T> {
        self.draws(self.py, z, 2)
    }
}

/// Everything the influence functions need besides the conditional laws.
pub struct EifContext<'a, T> {
    pub learner: &'a dyn Regressor<T>,
    /// X-free learner `g(z)`, required for LOCO.
    pub reduced: Option<&'a dyn Regressor<T>>,
    /// Separate estimate of `E[Y | x, z]`; defaults to the learner itself.
    pub cond_mean: Option<&'a dyn Regressor<T>>,
    pub mode: LearnerMode,
    pub psi_hat: T,
    /// Weighted points whose `x` marginal and `(y, z)` joint define the marginal permutation.
    pub pool: Option<&'a WeightedSample<T>>,
}

impl<T: Copy> Clone for EifContext<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Copy> Copy for EifContext<'_, T> {}

impl<'a, T: Real> EifContext<'a, T> {
    pub fn new(learner: &'a dyn Regressor<T>) -> Self {
        Self { learner, reduced: None, cond_mean: None, mode: LearnerMode::Fixed, psi_hat: T::zero(), pool: None }
    }

    pub fn with_psi(mut self, psi_hat: T) -> Self {
        self.psi_hat = psi_hat;
        self
    }

    pub fn with_mode(mut self, mode: LearnerMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_reduced(mut self, g: &'a dyn Regressor<T>) -> Self {
        self.reduced = Some(g);
        self
    }

    pub fn with_cond_mean(mut self, m: &'a dyn Regressor<T>) -> Self {
        self.cond_mean = Some(m);
        self
    }

    pub fn with_pool(mut self, pool: &'a WeightedSample<T>) -> Self {
        self.pool = Some(pool);
        self
    }

    fn reduced(&self) -> Result<&'a dyn Regressor<T>> {
        self.reduced
            .ok_or_else(|| VitlError::Config("LOCO needs an X-free learner in the context".into()))
    }

    fn pool(&self) -> Result<&'a WeightedSample<T>> {
        self.pool
            .ok_or_else(|| VitlError::Config("marginal permutation needs a weighted pool in the context".into()))
    }
}

fn finite<T: Real>(v: T, term: &str) -> Result<T> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(VitlError::Numeric(term.to_string()))
    }
}

/// First and second moments of a law.
fn moments<T: Real>(law: &WeightedLaw<T>) -> (T, T) {
    law.iter().fold((T::zero(), T::zero()), |(m1, m2), (v, w)| (m1 + w * v, m2 + w * v * v))
}

/// `E_{y ~ law} L(y, c)` from the law's moments.
#[inline]
fn expected_loss<T: Real>(m1: T, m2: T, c: T) -> T {
    m2 - T::lit(2.0) * m1 * c + c * c
}

pub fn eif_ref<T: Real>(ctx: &EifContext<'_, T>, p: Point<'_, T>) -> Result<T> {
    let f = finite(ctx.learner.predict(p.x, p.z), "learner prediction")?;
    let mut psi = loss(p.y, f) - ctx.psi_hat;
    if ctx.mode == LearnerMode::Regression {
        if let Some(m) = ctx.cond_mean {
            let mean = finite(m.predict(p.x, p.z), "conditional mean")?;
            psi = psi + (p.y - f) * loss_deriv(mean, f);
        }
    }
    finite(psi, "reference-loss influence")
}

pub fn eif_condperm<T: Real>(
    ctx: &EifContext<'_, T>,
    p: Point<'_, T>,
    x_law: &WeightedLaw<T>,
    y_law: &WeightedLaw<T>,
) -> Result<T> {
    let f = finite(ctx.learner.predict(p.x, p.z), "learner prediction")?;
    let (m1, m2) = moments(y_law);
    let a = expected_loss(m1, m2, f);
    let mut b = T::zero();
    let mut c = T::zero();
    for (xv, w) in x_law.iter() {
        let fx = ctx.learner.predict(xv, p.z);
        b = b + w * expected_loss(m1, m2, fx);
        c = c + w * loss(p.y, fx);
    }
    finite(a, "E_y|z L(y, f(X,Z))")?;
    finite(b, "E_x|z E_y|z L(y, f(x,Z))")?;
    finite(c, "E_x|z L(Y, f(x,Z))")?;
    let mut psi = a - b + c - ctx.psi_hat;
    if ctx.mode == LearnerMode::Regression {
        psi = psi + (p.y - f) * loss_deriv(m1, f);
    }
    finite(psi, "conditional-permutation influence")
}

pub fn eif_loco<T: Real>(ctx: &EifContext<'_, T>, p: Point<'_, T>, y_law: &WeightedLaw<T>) -> Result<T> {
    let g = finite(ctx.reduced()?.predict(p.x, p.z), "X-free learner prediction")?;
    let mut psi = loss(p.y, g) - ctx.psi_hat;
    if ctx.mode == LearnerMode::Regression {
        psi = psi + (p.y - g) * loss_deriv(y_law.mean(), g);
    }
    finite(psi, "LOCO influence")
}

/// Influence function of the marginal-permutation loss. `ratio` is `p(X)/p(X|Z)`,
/// used only in regression mode.
pub fn eif_margperm<T: Real>(ctx: &EifContext<'_, T>, p: Point<'_, T>, y_law: &WeightedLaw<T>, ratio: T) -> Result<T> {
    let pool = ctx.pool()?;
    let f = finite(ctx.learner.predict(p.x, p.z), "learner prediction")?;
    let mut over_x = T::zero();
    let mut over_yz = T::zero();
    for k in 0..pool.len() {
        let w = pool.w[k];
        over_x = over_x + w * loss(p.y, ctx.learner.predict(pool.x[k], p.z));
        over_yz = over_yz + w * loss(pool.y[k], ctx.learner.predict(p.x, pool.z_row(k)));
    }
    finite(over_x, "E_x' L(Y, f(x',Z))")?;
    finite(over_yz, "E_(y,z) L(y, f(X,z))")?;
    let mut psi = over_x + over_yz - T::lit(2.0) * ctx.psi_hat;
    if ctx.mode == LearnerMode::Regression {
        finite(ratio, "density ratio p(X)/p(X|Z)")?;
        psi = psi + ratio * (p.y - f) * loss_deriv(y_law.mean(), f);
    }
    finite(psi, "marginal-permutation influence")
}

/// `p(X) / p(X|Z)` with `p(X)` the pool-weighted average of `p(X | z_k)`.
pub fn density_ratio<T: Real>(laws: &dyn LawProvider<T>, pool: &WeightedSample<T>, x: T, z: &[T]) -> Result<T> {
    let cond = laws.x_density(x, z)?;
    let mut marg = T::zero();
    for k in 0..pool.len() {
        marg = marg + pool.w[k] * laws.x_density(x, pool.z_row(k))?;
    }
    if !(cond > T::zero()) {
        return Err(VitlError::Numeric("density ratio p(X)/p(X|Z): zero conditional density".into()));
    }
    finite(marg / cond, "density ratio p(X)/p(X|Z)")
}

/// Influence function of `kind` at `p`, pulling conditional laws from `laws`.
pub fn eif<T: Real>(ctx: &EifContext<'_, T>, laws: &dyn LawProvider<T>, kind: EstimandKind, p: Point<'_, T>) -> Result<T> {
    match kind {
        EstimandKind::RefLoss => eif_ref(ctx, p),
        EstimandKind::CondPermLoss => eif_condperm(ctx, p, &laws.x_law(p.z), &laws.y_law(p.z)),
        EstimandKind::LocoLoss => {
            let y_law = if ctx.mode == LearnerMode::Regression { laws.y_law(p.z) } else { WeightedLaw::point_mass(p.y) };
            eif_loco(ctx, p, &y_law)
        }
        EstimandKind::MargPermLoss => {
            // Refuse kinds without a usable density even when the ratio is not needed.
            laws.x_density(p.x, p.z)?;
            if ctx.mode == LearnerMode::Regression {
                let ratio = density_ratio(laws, ctx.pool()?, p.x, p.z)?;
                eif_margperm(ctx, p, &laws.y_law(p.z), ratio)
            } else {
                eif_margperm(ctx, p, &WeightedLaw::point_mass(p.y), T::one())
            }
        }
    }
}

/// Influence values at every point of `points`.
pub fn eif_values<T: Real>(
    ctx: &EifContext<'_, T>,
    laws: &dyn LawProvider<T>,
    kind: EstimandKind,
    points: &WeightedSample<T>,
) -> Result<Vec<T>> {
    (0..points.len())
        .map(|i| eif(ctx, laws, kind, Point { x: points.x[i], y: points.y[i], z: points.z_row(i) }))
        .collect()
}

/// Plug-in value of `kind` under the weighted points, with `x | z` integrated over `laws`.
pub fn plugin_value<T: Real>(
    ctx: &EifContext<'_, T>,
    laws: &dyn LawProvider<T>,
    kind: EstimandKind,
    points: &WeightedSample<T>,
) -> Result<T> {
    if points.is_empty() {
        return Err(VitlError::Size("plug-in value over an empty point set".into()));
    }
    let mut total = T::zero();
    for i in 0..points.len() {
        let (x, y, z, w) = (points.x[i], points.y[i], points.z_row(i), points.w[i]);
        let term = match kind {
            EstimandKind::RefLoss => loss(y, ctx.learner.predict(x, z)),
            EstimandKind::CondPermLoss => laws.x_law(z).expect(|xv| loss(y, ctx.learner.predict(xv, z))),
            EstimandKind::LocoLoss => loss(y, ctx.reduced()?.predict(x, z)),
            EstimandKind::MargPermLoss => {
                let mut s = T::zero();
                for k in 0..points.len() {
                    s = s + points.w[k] * loss(y, ctx.learner.predict(points.x[k], z));
                }
                s
            }
        };
        total = total + w * term;
    }
    finite(total, &format!("{kind} plug-in value"))
}
