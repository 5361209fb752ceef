//! Regression learners `f(x, z)` and their X-free counterparts `f(z)`.

use crate::data::Dataset;
use crate::error::{Result, VitlError};
use crate::linalg::ridge_fit;
use crate::real::Real;

/// A frozen regression map. Implementations must be pure.
pub trait Regressor<T>: Sync {
    fn predict(&self, x: T, z: &[T]) -> T;
}

/// Adapts a closure into a [`Regressor`].
pub struct FnRegressor<F>(pub F);

impl<T, F> Regressor<T> for FnRegressor<F>
where
    F: Fn(T, &[T]) -> T + Sync,
{
    fn predict(&self, x: T, z: &[T]) -> T {
        (self.0)(x, z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LearnerKind {
    Ridge,
    Knn,
}

impl std::str::FromStr for LearnerKind {
    type Err = VitlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ridge" => Ok(Self::Ridge),
            "knn" => Ok(Self::Knn),
            other => Err(VitlError::Parameter(format!("unknown learner `{other}` (ridge|knn)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearnerConfig {
    pub kind: LearnerKind,
    pub penalty: f64,
    /// Neighbour count; `None` means `ceil(sqrt(n_fold))`.
    pub k: Option<usize>,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self { kind: LearnerKind::Ridge, penalty: 1e-6, k: None }
    }
}

#[derive(Debug, Clone)]
enum Model<T> {
    Ridge {
        intercept: T,
        coef_x: T,
        coef_z: Vec<T>,
    },
    Knn {
        k: usize,
        center: Vec<T>,
        scale: Vec<T>,
        /// Standardized training features, row-major with `center.len()` columns.
        features: Vec<T>,
        targets: Vec<T>,
    },
}

#[derive(Debug, Clone)]
pub struct FittedLearner<T> {
    model: Model<T>,
    uses_x: bool,
    fold: Option<usize>,
    config: LearnerConfig,
}

impl<T: Real> FittedLearner<T> {
    pub fn kind(&self) -> LearnerKind {
        self.config.kind
    }

    pub fn uses_x(&self) -> bool {
        self.uses_x
    }

    pub fn fold(&self) -> Option<usize> {
        self.fold
    }

    pub fn with_fold(mut self, fold: usize) -> Self {
        self.fold = Some(fold);
        self
    }

    pub fn config(&self) -> LearnerConfig {
        self.config
    }

    /// `(intercept, coefficient on x, coefficients on z)` for ridge learners.
    pub fn ridge_coefficients(&self) -> Option<(T, T, &[T])> {
        match &self.model {
            Model::Ridge { intercept, coef_x, coef_z } => Some((*intercept, *coef_x, coef_z)),
            Model::Knn { .. } => None,
        }
    }

    /// Root-mean-square residual on `data`.
    pub fn rmse(&self, data: &Dataset<T>) -> T {
        let n = T::from_usize_lossy(data.n());
        let ss: T = (0..data.n())
            .map(|i| {
                let r = data.y()[i] - self.predict(data.x()[i], data.z_row(i));
                r * r
            })
            .sum();
        (ss / n).sqrt()
    }
}

impl<T: Real> Regressor<T> for FittedLearner<T> {
    fn predict(&self, x: T, z: &[T]) -> T {
        match &self.model {
            Model::Ridge { intercept, coef_x, coef_z } => {
                let mut v = *intercept;
                if self.uses_x {
                    v = v + *coef_x * x;
                }
                v + coef_z.iter().zip(z).map(|(&b, &zi)| b * zi).sum::<T>()
            }
            Model::Knn { k, center, scale, features, targets } => {
                let p = center.len();
                let mut q = Vec::with_capacity(p);
                if self.uses_x {
                    q.push(x);
                }
                q.extend_from_slice(z);
                for j in 0..p {
                    q[j] = (q[j] - center[j]) / scale[j];
                }
                let mut dist: Vec<(T, usize)> = targets
                    .iter()
                    .enumerate()
                    .map(|(i, _)| {
                        let row = &features[i * p..(i + 1) * p];
                        let d: T = row.iter().zip(&q).map(|(&a, &b)| (a - b) * (a - b)).sum();
                        (d, i)
                    })
                    .collect();
                // (distance, row index) ordering breaks ties by lowest row index.
                dist.select_nth_unstable_by(*k - 1, |a, b| {
                    a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
                });
                let s: T = dist[..*k].iter().map(|&(_, i)| targets[i]).sum();
                s / T::from_usize_lossy(*k)
            }
        }
    }
}

fn design_rows<T: Real>(data: &Dataset<T>, with_x: bool) -> Vec<Vec<T>> {
    (0..data.n())
        .map(|i| {
            let mut r = Vec::with_capacity(data.d());
            if with_x {
                r.push(data.x()[i]);
            }
            r.extend_from_slice(data.z_row(i));
            r
        })
        .collect()
}

fn ridge<T: Real>(data: &Dataset<T>, penalty: f64, with_x: bool) -> Result<FittedLearner<T>> {
    if !(penalty >= 0.0) || !penalty.is_finite() {
        return Err(VitlError::Parameter(format!("ridge penalty must be finite and >= 0, got {penalty}")));
    }
    let p = data.dz() + usize::from(with_x);
    if data.n() < p + 1 {
        return Err(VitlError::Size(format!("ridge needs at least {} rows, fold has {}", p + 1, data.n())));
    }
    let (intercept, beta) = ridge_fit(&design_rows(data, with_x), data.y(), T::lit(penalty))?;
    let (coef_x, coef_z) = if with_x { (beta[0], beta[1..].to_vec()) } else { (T::zero(), beta) };
    Ok(FittedLearner {
        model: Model::Ridge { intercept, coef_x, coef_z },
        uses_x: with_x,
        fold: None,
        config: LearnerConfig { kind: LearnerKind::Ridge, penalty, k: None },
    })
}

fn knn<T: Real>(data: &Dataset<T>, k: Option<usize>, with_x: bool) -> Result<FittedLearner<T>> {
    let n = data.n();
    let k = k.unwrap_or_else(|| default_k(n));
    if k == 0 || k > n {
        return Err(VitlError::Parameter(format!("k must lie in 1..={n}, got {k}")));
    }
    let rows = design_rows(data, with_x);
    let p = rows.first().map_or(0, Vec::len);
    let nf = T::from_usize_lossy(n);
    let mut center = vec![T::zero(); p];
    let mut scale = vec![T::zero(); p];
    for j in 0..p {
        center[j] = rows.iter().map(|r| r[j]).sum::<T>() / nf;
        let var = rows.iter().map(|r| (r[j] - center[j]).powi(2)).sum::<T>() / nf;
        scale[j] = if var > T::zero() { var.sqrt() } else { T::one() };
    }
    let features = rows
        .iter()
        .flat_map(|r| (0..p).map(|j| (r[j] - center[j]) / scale[j]).collect::<Vec<_>>())
        .collect();
    Ok(FittedLearner {
        model: Model::Knn { k, center, scale, features, targets: data.y().to_vec() },
        uses_x: with_x,
        fold: None,
        config: LearnerConfig { kind: LearnerKind::Knn, penalty: 0.0, k: Some(k) },
    })
}

/// `ceil(sqrt(n))`, the default neighbour count.
pub fn default_k(n: usize) -> usize {
    ((n as f64).sqrt().ceil() as usize).clamp(1, n.max(1))
}

/// Penalized least squares on `(x, z)` with an unpenalized intercept.
pub fn fit_ridge<T: Real>(data: &Dataset<T>, penalty: f64) -> Result<FittedLearner<T>> {
    ridge(data, penalty, true)
}

/// k-nearest-neighbour mean over standardized `(x, z)`.
pub fn fit_knn<T: Real>(data: &Dataset<T>, k: usize) -> Result<FittedLearner<T>> {
    knn(data, Some(k), true)
}

pub fn fit<T: Real>(data: &Dataset<T>, cfg: &LearnerConfig) -> Result<FittedLearner<T>> {
    match cfg.kind {
        LearnerKind::Ridge => ridge(data, cfg.penalty, true),
        LearnerKind::Knn => knn(data, cfg.k, true),
    }
}

/// Same learner family fitted on `z` alone; the `x` argument of `predict` is ignored.
pub fn fit_without_x<T: Real>(data: &Dataset<T>, cfg: &LearnerConfig) -> Result<FittedLearner<T>> {
    match cfg.kind {
        LearnerKind::Ridge => ridge(data, cfg.penalty, false),
        LearnerKind::Knn => knn(data, cfg.k, false),
    }
}
