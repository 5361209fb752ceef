//! Conditional laws `p(v | z)` used for `X | Z` and `Y | Z`.
//!
//! Two kinds are available. The partition kind grows a regression tree on
//! `z -> v` and uses each leaf's empirical distribution. The gaussian-linear
//! kind fits `v = a + bᵀz + s·N(0,1)` by least squares and integrates with
//! Gauss–Hermite nodes.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, VitlError};
use crate::law::WeightedLaw;
use crate::linalg::ridge_fit;
use crate::real::Real;

/// Smallest conditional standard deviation the gaussian kind will report.
pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityKind {
    Partition,
    GaussianLinear,
}

impl std::str::FromStr for DensityKind {
    type Err = VitlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "partition" => Ok(Self::Partition),
            "gaussian" | "gaussian-linear" => Ok(Self::GaussianLinear),
            other => Err(VitlError::Parameter(format!("unknown density kind `{other}` (partition|gaussian)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityConfig {
    pub kind: DensityKind,
    pub min_leaf: usize,
    /// Support points per conditioning value.
    pub m: usize,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self { kind: DensityKind::GaussianLinear, min_leaf: 30, m: 256 }
    }
}

#[derive(Debug, Clone)]
pub enum CondDensityModel<T> {
    Partition(PartitionDensity<T>),
    Gaussian(GaussianLinear<T>),
}

impl<T: Real> CondDensityModel<T> {
    pub fn fit(cfg: &DensityConfig, values: &[T], z: &[T], dz: usize) -> Result<Self> {
        match cfg.kind {
            DensityKind::Partition => fit_partition_density(values, z, dz, cfg.min_leaf).map(Self::Partition),
            DensityKind::GaussianLinear => fit_gaussian_linear(values, z, dz).map(Self::Gaussian),
        }
    }

    pub fn kind(&self) -> DensityKind {
        match self {
            Self::Partition(_) => DensityKind::Partition,
            Self::Gaussian(_) => DensityKind::GaussianLinear,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, z: &[T], rng: &mut R) -> T {
        match self {
            Self::Partition(p) => p.sample(z, rng),
            Self::Gaussian(g) => g.sample(z, rng),
        }
    }

    pub fn density(&self, v: T, z: &[T]) -> T {
        match self {
            Self::Partition(p) => p.density(v, z),
            Self::Gaussian(g) => g.density(v, z),
        }
    }

    pub fn support_points(&self, z: &[T], m: usize) -> WeightedLaw<T> {
        match self {
            Self::Partition(p) => p.support_points(z, m),
            Self::Gaussian(g) => g.support_points(z, m),
        }
    }

    pub fn mean(&self, z: &[T]) -> T {
        match self {
            Self::Partition(p) => p.leaf(z).mean,
            Self::Gaussian(g) => g.mean(z),
        }
    }
}

// ---------------------------------------------------------------------------
// Partition kind

#[derive(Debug, Clone)]
pub struct Leaf<T> {
    /// Sorted leaf values.
    values: Vec<T>,
    /// Training row indices that fell in this leaf.
    rows: Vec<usize>,
    mean: T,
    lo: T,
    bin_width: T,
}

#[derive(Debug, Clone)]
enum Node<T> {
    Leaf(Leaf<T>),
    Split {
        feature: usize,
        threshold: T,
        left: Box<Node<T>>,
        right: Box<Node<T>>,
    },
}

#[derive(Debug, Clone)]
pub struct PartitionDensity<T> {
    root: Node<T>,
    min_leaf: usize,
}

fn quantile_sorted<T: Real>(sorted: &[T], q: f64) -> T {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::lit(pos - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn make_leaf<T: Real>(values: &[T], rows: Vec<usize>) -> Leaf<T> {
    let mut vals: Vec<T> = rows.iter().map(|&i| values[i]).collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = vals.len();
    let mean = vals.iter().copied().sum::<T>() / T::from_usize_lossy(n);
    let iqr = quantile_sorted(&vals, 0.75) - quantile_sorted(&vals, 0.25);
    // Freedman–Diaconis width, falling back to the range and then to a floor.
    let mut h = T::lit(2.0) * iqr / T::lit((n as f64).cbrt());
    if !(h > T::zero()) {
        h = (vals[n - 1] - vals[0]) / T::lit((n as f64).cbrt());
    }
    let h = h.max(T::lit(SIGMA_FLOOR));
    Leaf { lo: vals[0], values: vals, rows, mean, bin_width: h }
}

fn sse_from_sums<T: Real>(s: T, s2: T, n: usize) -> T {
    s2 - s * s / T::from_usize_lossy(n)
}

fn grow<T: Real>(values: &[T], z: &[T], dz: usize, rows: Vec<usize>, min_leaf: usize) -> Node<T> {
    let n = rows.len();
    if n < 2 * min_leaf || dz == 0 {
        return Node::Leaf(make_leaf(values, rows));
    }
    let tot_s: T = rows.iter().map(|&i| values[i]).sum();
    let tot_s2: T = rows.iter().map(|&i| values[i] * values[i]).sum();
    let parent = sse_from_sums(tot_s, tot_s2, n);
    let mut best: Option<(T, usize, T)> = None;
    let mut order = rows.clone();
    for j in 0..dz {
        order.sort_by(|&a, &b| z[a * dz + j].partial_cmp(&z[b * dz + j]).unwrap().then(a.cmp(&b)));
        let (mut ls, mut ls2) = (T::zero(), T::zero());
        for s in 1..n {
            let v = values[order[s - 1]];
            ls = ls + v;
            ls2 = ls2 + v * v;
            if s < min_leaf || n - s < min_leaf {
                continue;
            }
            let zl = z[order[s - 1] * dz + j];
            let zr = z[order[s] * dz + j];
            if !(zl < zr) {
                continue;
            }
            let child = sse_from_sums(ls, ls2, s) + sse_from_sums(tot_s - ls, tot_s2 - ls2, n - s);
            let gain = parent - child;
            if best.is_none_or(|(g, _, _)| gain > g) {
                best = Some((gain, j, (zl + zr) / T::lit(2.0)));
            }
        }
    }
    match best {
        Some((gain, feature, threshold)) if gain > T::lit(1e-12) * parent.max(T::min_positive_value()) => {
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| z[i * dz + feature] <= threshold);
            Node::Split {
                feature,
                threshold,
                left: Box::new(grow(values, z, dz, l, min_leaf)),
                right: Box::new(grow(values, z, dz, r, min_leaf)),
            }
        }
        _ => Node::Leaf(make_leaf(values, rows)),
    }
}

/// Grows a variance-reduction tree on `z -> values` with leaves of at least `min_leaf` rows.
pub fn fit_partition_density<T: Real>(values: &[T], z: &[T], dz: usize, min_leaf: usize) -> Result<PartitionDensity<T>> {
    if min_leaf == 0 {
        return Err(VitlError::Parameter("min_leaf must be >= 1".into()));
    }
    if values.len() < 2 * min_leaf || z.len() != values.len() * dz {
        return Err(VitlError::Size(format!(
            "partition density needs at least {} rows, got {}",
            2 * min_leaf,
            values.len()
        )));
    }
    let root = grow(values, z, dz, (0..values.len()).collect(), min_leaf);
    Ok(PartitionDensity { root, min_leaf })
}

impl<T: Real> PartitionDensity<T> {
    pub fn min_leaf(&self) -> usize {
        self.min_leaf
    }

    fn leaf(&self, z: &[T]) -> &Leaf<T> {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf(l) => return l,
                Node::Split { feature, threshold, left, right } => {
                    node = if z[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    /// Training rows per leaf, in tree order.
    pub fn leaf_rows(&self) -> Vec<Vec<usize>> {
        fn walk<T>(n: &Node<T>, out: &mut Vec<Vec<usize>>) {
            match n {
                Node::Leaf(l) => out.push(l.rows.clone()),
                Node::Split { left, right, .. } => {
                    walk(left, out);
                    walk(right, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.root, &mut out);
        out
    }

    /// Range of the training `z` values in the leaf that contains `z`, per coordinate.
    pub fn leaf_values(&self, z: &[T]) -> &[T] {
        &self.leaf(z).values
    }

    pub fn sample<R: Rng + ?Sized>(&self, z: &[T], rng: &mut R) -> T {
        let l = self.leaf(z);
        l.values[rng.random_range(0..l.values.len())]
    }

    /// Leaf histogram with Freedman–Diaconis bins anchored at the leaf minimum.
    pub fn density(&self, v: T, z: &[T]) -> T {
        let l = self.leaf(z);
        let h = l.bin_width;
        let pos = (v - l.lo) / h;
        if pos < T::zero() || !pos.is_finite() {
            return T::zero();
        }
        let bin = pos.floor();
        let count = l.values.iter().filter(|&&u| ((u - l.lo) / h).floor() == bin).count();
        T::from_usize_lossy(count) / (T::from_usize_lossy(l.values.len()) * h)
    }

    /// All leaf values when the leaf holds at most `m`; otherwise `m` evenly spaced order statistics.
    pub fn support_points(&self, z: &[T], m: usize) -> WeightedLaw<T> {
        let vals = &self.leaf(z).values;
        let len = vals.len();
        if len <= m {
            return WeightedLaw::uniform(vals.clone());
        }
        let picked = (0..m).map(|k| vals[((2 * k + 1) * len) / (2 * m)]).collect();
        WeightedLaw::uniform(picked)
    }
}

// ---------------------------------------------------------------------------
// Gaussian-linear kind

#[derive(Debug, Clone)]
pub struct GaussianLinear<T> {
    pub intercept: T,
    pub coef: Vec<T>,
    pub sigma: T,
    /// Residual scale fell below the floor and was clamped.
    pub degenerate: bool,
}

pub fn fit_gaussian_linear<T: Real>(values: &[T], z: &[T], dz: usize) -> Result<GaussianLinear<T>> {
    let n = values.len();
    if n < dz + 1 || z.len() != n * dz {
        return Err(VitlError::Size(format!("gaussian-linear density needs at least {} rows, got {n}", dz + 1)));
    }
    let rows: Vec<Vec<T>> = (0..n).map(|i| z[i * dz..(i + 1) * dz].to_vec()).collect();
    let (intercept, coef) = ridge_fit(&rows, values, T::zero()).map_err(|e| match e {
        VitlError::Singular(m) => VitlError::Singular(format!("gaussian-linear design: {m}")),
        other => other,
    })?;
    let rss: T = rows
        .iter()
        .zip(values)
        .map(|(r, &v)| {
            let mu = intercept + coef.iter().zip(r).map(|(&b, &zi)| b * zi).sum::<T>();
            (v - mu) * (v - mu)
        })
        .sum();
    let dof = if n > dz + 1 { n - dz - 1 } else { n };
    let sigma = (rss / T::from_usize_lossy(dof)).sqrt();
    let floor = T::lit(SIGMA_FLOOR);
    let degenerate = !(sigma >= floor);
    Ok(GaussianLinear { intercept, coef, sigma: if degenerate { floor } else { sigma }, degenerate })
}

impl<T: Real> GaussianLinear<T> {
    pub fn mean(&self, z: &[T]) -> T {
        self.intercept + self.coef.iter().zip(z).map(|(&b, &zi)| b * zi).sum::<T>()
    }

    pub fn sample<R: Rng + ?Sized>(&self, z: &[T], rng: &mut R) -> T {
        let e: f64 = rng.sample(StandardNormal);
        self.mean(z) + self.sigma * T::lit(e)
    }

    pub fn density(&self, v: T, z: &[T]) -> T {
        let u = (v - self.mean(z)) / self.sigma;
        (-(u * u) / T::lit(2.0)).exp() / (self.sigma * (T::lit(2.0) * T::PI()).sqrt())
    }

    pub fn support_points(&self, z: &[T], m: usize) -> WeightedLaw<T> {
        let rule = gauss_hermite(m);
        let mu = self.mean(z);
        WeightedLaw::new(
            rule.0.iter().map(|&x| mu + self.sigma * T::lit(x)).collect(),
            rule.1.iter().map(|&w| T::lit(w)).collect(),
        )
    }
}

type Rule = Arc<(Vec<f64>, Vec<f64>)>;

/// Gauss–Hermite rule for the standard normal weight (Golub–Welsch), weights summing to one.
pub fn gauss_hermite(m: usize) -> Rule {
    static CACHE: OnceLock<Mutex<HashMap<usize, Rule>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(r) = cache.lock().unwrap().get(&m) {
        return r.clone();
    }
    let m = m.max(1);
    let jac = nalgebra::DMatrix::<f64>::from_fn(m, m, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = nalgebra::SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..m)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // Symmetrize to remove eigen-solver noise.
    for k in 0..m / 2 {
        let (a, b) = (pairs[k], pairs[m - 1 - k]);
        let x = (b.0 - a.0) / 2.0;
        let w = (a.1 + b.1) / 2.0;
        pairs[k] = (-x, w);
        pairs[m - 1 - k] = (x, w);
    }
    if m % 2 == 1 {
        pairs[m / 2].0 = 0.0;
    }
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let rule = Arc::new((pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1 / total).collect()));
    cache.lock().unwrap().insert(m, rule.clone());
    rule
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate, DgpSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gauss_hermite_moments() {
        for m in [1usize, 2, 5, 32, 256] {
            let r = gauss_hermite(m);
            let s: f64 = r.1.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            if m >= 3 {
                let m2: f64 = r.0.iter().zip(&r.1).map(|(x, w)| w * x * x).sum();
                let m4: f64 = r.0.iter().zip(&r.1).map(|(x, w)| w * x.powi(4)).sum();
                assert!((m2 - 1.0).abs() < 1e-10, "m={m} m2={m2}");
                assert!((m4 - 3.0).abs() < 1e-9, "m={m} m4={m4}");
            }
        }
    }

    #[test]
    fn constant_z_gives_single_leaf() {
        let v: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let z = vec![1.0; 40];
        let p = fit_partition_density(&v, &z, 1, 5).unwrap();
        assert_eq!(p.leaf_rows().len(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws: Vec<f64> = (0..4000).map(|_| p.sample(&[1.0], &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / 4000.0;
        assert!((mean - 19.5).abs() < 1.0);
        assert!(draws.iter().all(|d| v.contains(d)));
    }

    #[test]
    fn deterministic_values_stay_local() {
        let z: Vec<f64> = (0..400).map(|i| i as f64 / 40.0).collect();
        let p = fit_partition_density(&z, &z, 1, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &q in &[0.5, 3.3, 9.0] {
            let leaf = p.leaf_values(&[q]);
            let range = leaf[leaf.len() - 1] - leaf[0];
            let mad: f64 = (0..500).map(|_| (p.sample(&[q], &mut rng) - q).abs()).sum::<f64>() / 500.0;
            assert!(mad < 2.0 * range + 1e-12, "q={q} mad={mad} range={range}");
        }
    }

    #[test]
    fn partition_conditional_mean_bivariate_normal() {
        // A single fit's leaf mean varies by about 0.2 across datasets, so the
        // band is checked on the average over independent datasets.
        let mut total = 0.0;
        for seed in 0..40 {
            let d = generate(&DgpSpec { n: 2000, rho: 0.5, seed, ..DgpSpec::default() }).unwrap();
            let p = fit_partition_density(d.x(), d.z_flat(), 1, 50).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            total += (0..10_000).map(|_| p.sample(&[1.0], &mut rng)).sum::<f64>() / 1e4;
        }
        let mean = total / 40.0;
        assert!((mean - 0.5).abs() < 0.1, "mean {mean}");
    }

    #[test]
    fn partition_leaves_partition_rows_and_respect_min_leaf() {
        let d = generate(&DgpSpec { n: 700, rho: 0.5, seed: 12, ..DgpSpec::default() }).unwrap();
        let p = fit_partition_density(d.x(), d.z_flat(), 1, 25).unwrap();
        let mut all: Vec<usize> = p.leaf_rows().concat();
        assert!(p.leaf_rows().iter().all(|r| r.len() >= 25));
        all.sort();
        assert_eq!(all, (0..700).collect::<Vec<_>>());
    }

    #[test]
    fn partition_density_and_support() {
        let d = generate(&DgpSpec { n: 600, rho: 0.3, seed: 13, ..DgpSpec::default() }).unwrap();
        let p = fit_partition_density(d.x(), d.z_flat(), 1, 40).unwrap();
        let grid: Vec<f64> = (-4000..4000).map(|i| i as f64 * 1e-3).collect();
        let integral: f64 = grid.iter().map(|&v| p.density(v, &[0.2]) * 1e-3).sum();
        assert!((integral - 1.0).abs() < 0.02, "integral {integral}");
        assert!(grid.iter().all(|&v| p.density(v, &[0.2]) >= 0.0));
        for m in [3usize, 256] {
            let s = p.support_points(&[0.2], m);
            assert!((s.total() - 1.0).abs() < 1e-12);
            assert!(s.len() <= m);
        }
        assert!(matches!(fit_partition_density(&[1.0, 2.0], &[0.0, 1.0], 1, 2), Err(VitlError::Size(_))));
    }

    #[test]
    fn gaussian_linear_examples() {
        let d = generate(&DgpSpec { n: 2000, rho: 0.5, seed: 14, ..DgpSpec::default() }).unwrap();
        let g = fit_gaussian_linear(d.x(), d.z_flat(), 1).unwrap();
        assert!((g.coef[0] - 0.5).abs() < 0.05);
        assert!((g.sigma - 0.75f64.sqrt()).abs() < 0.05);

        let d0 = generate(&DgpSpec { n: 2000, rho: 0.0, seed: 15, ..DgpSpec::default() }).unwrap();
        assert!(fit_gaussian_linear(d0.x(), d0.z_flat(), 1).unwrap().coef[0].abs() < 0.1);

        let z: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let v: Vec<f64> = z.iter().map(|zi| 1.0 + 2.0 * zi).collect();
        let g = fit_gaussian_linear(&v, &z, 1).unwrap();
        assert!(g.degenerate && g.sigma == SIGMA_FLOOR);

        assert!(matches!(fit_gaussian_linear(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0], 1), Err(VitlError::Singular(_))));
    }

    #[test]
    fn gaussian_sampling_matches_analytic_mean() {
        let g = GaussianLinear { intercept: 0.3, coef: vec![0.5], sigma: 0.8, degenerate: false };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let mean = (0..n).map(|_| g.sample(&[2.0], &mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 1.3).abs() < 4.0 * 0.8 / (n as f64).sqrt());
        let s = g.support_points(&[2.0], 64);
        assert!((s.total() - 1.0).abs() < 1e-12 && (s.mean() - 1.3).abs() < 1e-12);
        assert!(s.values.iter().all(|v| v.is_finite()));
    }
}
