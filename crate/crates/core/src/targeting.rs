//! Targeted update of a finite working distribution along the influence function.
//!
//! The working distribution has one block per observation. A block holds the
//! observation's `z`, a product grid of `x` and `y` support points with a
//! joint weight table, and the observed point itself as a zero-weight anchor.
//! Block masses (the `z` marginal) never change; only the `(x, y) | z` table is
//! fluctuated, along the block-centred influence function.

use crate::eif::{loss, Estimand, EstimandKind, LawProvider};
use crate::error::{Result, VitlError};
use crate::law::{WeightedLaw, WeightedSample};
use crate::learners::Regressor;
use crate::real::{log_sum_exp, mean_sd, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Observed,
    Synthetic,
}

/// Learner-dependent quantities of one block, fixed for the whole targeting run.
#[derive(Debug, Clone)]
struct Block<T> {
    z: Vec<T>,
    xs: Vec<T>,
    ys: Vec<T>,
    /// `L(y_b, f(x_a, z))`, row-major over `(a, b)`.
    loss: Vec<T>,
    /// `L(y_obs, f(x_a, z))` over `a`.
    anchor_loss_x: Vec<T>,
    /// `L(y_b, f(x_obs, z))` over `b`.
    anchor_loss_y: Vec<T>,
    /// `L(y_obs, f(x_obs, z))`.
    anchor_loss: T,
    start: usize,
    mass: T,
}

impl<T> Block<T> {
    fn cells(&self) -> usize {
        self.xs.len() * self.ys.len()
    }

    fn anchor(&self) -> usize {
        self.start + self.cells()
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.cells() + 1
    }
}

/// Finite weighted support representing the working distribution.
#[derive(Debug, Clone)]
pub struct FluctuationSupport<T> {
    x: Vec<T>,
    y: Vec<T>,
    w: Vec<T>,
    origin: Vec<Origin>,
    block_of: Vec<usize>,
    blocks: Vec<Block<T>>,
}

impl<T: Real> FluctuationSupport<T> {
    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn weights(&self) -> &[T] {
        &self.w
    }

    pub fn origin(&self, i: usize) -> Origin {
        self.origin[i]
    }

    /// `(x, y, z)` of point `i`.
    pub fn point(&self, i: usize) -> (T, T, &[T]) {
        (self.x[i], self.y[i], &self.blocks[self.block_of[i]].z)
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Index of the observed point of every block.
    pub fn anchors(&self) -> Vec<usize> {
        self.blocks.iter().map(Block::anchor).collect()
    }

    /// Synthetic points as a weighted sample (anchors carry no mass and are left out).
    pub fn synthetic_sample(&self) -> WeightedSample<T> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.origin[i] == Origin::Synthetic).collect();
        let mut z = Vec::new();
        for &i in &idx {
            z.extend_from_slice(self.point(i).2);
        }
        WeightedSample {
            x: idx.iter().map(|&i| self.x[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            z,
            dz: self.blocks.first().map_or(0, |b| b.z.len()),
            w: idx.iter().map(|&i| self.w[i]).collect(),
        }
    }

    /// Conditional laws `x | z` and `y | z` of the current weights, looked up by block `z`.
    pub fn block_laws(&self) -> BlockLaws<'_, T> {
        BlockLaws(self)
    }

    fn marginals(&self, b: &Block<T>) -> (Vec<T>, Vec<T>) {
        let (nx, ny) = (b.xs.len(), b.ys.len());
        let w = &self.w[b.start..b.start + nx * ny];
        let total: T = w.iter().copied().sum();
        let mut p = vec![T::zero(); nx];
        let mut q = vec![T::zero(); ny];
        for a in 0..nx {
            for bb in 0..ny {
                let v = w[a * ny + bb] / total;
                p[a] = p[a] + v;
                q[bb] = q[bb] + v;
            }
        }
        (p, q)
    }
}

/// [`LawProvider`] view of a support's block marginals.
pub struct BlockLaws<'s, T>(&'s FluctuationSupport<T>);

impl<T: Real> LawProvider<T> for BlockLaws<'_, T> {
    fn x_law(&self, z: &[T]) -> WeightedLaw<T> {
        let s = self.0;
        let b = s.blocks.iter().find(|b| b.z == z).expect("z belongs to a block");
        WeightedLaw::new(b.xs.clone(), s.marginals(b).0)
    }

    fn y_law(&self, z: &[T]) -> WeightedLaw<T> {
        let s = self.0;
        let b = s.blocks.iter().find(|b| b.z == z).expect("z belongs to a block");
        WeightedLaw::new(b.ys.clone(), s.marginals(b).1)
    }
}

/// Influence values of one block before subtracting the plug-in value.
struct BlockEval<T> {
    /// Uncentred influence at each cell.
    cells: Vec<T>,
    /// Uncentred influence at the anchor.
    anchor: T,
    /// Block-conditional expectation of the uncentred influence; also the block's plug-in level.
    level: T,
}

fn eval_kind<T: Real>(b: &Block<T>, w: &[T], p: &[T], q: &[T], kind: EstimandKind, sign: T, out: &mut BlockEval<T>) {
    let (nx, ny) = (b.xs.len(), b.ys.len());
    let total: T = w.iter().copied().sum();
    match kind {
        EstimandKind::RefLoss => {
            let mut lambda = T::zero();
            for k in 0..nx * ny {
                out.cells[k] = out.cells[k] + sign * b.loss[k];
                lambda = lambda + w[k] / total * b.loss[k];
            }
            out.anchor = out.anchor + sign * b.anchor_loss;
            out.level = out.level + sign * lambda;
        }
        EstimandKind::CondPermLoss => {
            let a_row: Vec<T> = (0..nx).map(|a| (0..ny).map(|bb| q[bb] * b.loss[a * ny + bb]).sum()).collect();
            let c_col: Vec<T> = (0..ny).map(|bb| (0..nx).map(|a| p[a] * b.loss[a * ny + bb]).sum()).collect();
            let big_b: T = (0..nx).map(|a| p[a] * a_row[a]).sum();
            for a in 0..nx {
                for bb in 0..ny {
                    let k = a * ny + bb;
                    out.cells[k] = out.cells[k] + sign * (a_row[a] - big_b + c_col[bb]);
                }
            }
            let a_obs: T = (0..ny).map(|bb| q[bb] * b.anchor_loss_y[bb]).sum();
            let c_obs: T = (0..nx).map(|a| p[a] * b.anchor_loss_x[a]).sum();
            out.anchor = out.anchor + sign * (a_obs - big_b + c_obs);
            out.level = out.level + sign * big_b;
        }
        EstimandKind::LocoLoss | EstimandKind::MargPermLoss => unreachable!("rejected at construction"),
    }
}

/// Full influence at an observation: `anchor − Ψ̂`; block-centred influence at every point: `φ − level`.
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    /// Block-centred influence at every support point (anchors included).
    pub centred: Vec<T>,
    /// Full influence at each block's anchor, in block order.
    pub anchor_psi: Vec<T>,
    pub psi_hat: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TolKind {
    /// `|mean ψ| ≤ sd / (√n log n)` or `|ε̂| ≤ 1e-7`.
    #[default]
    TmleStandard,
    /// `|mean ψ| ≤ 1e-9`; stops on `ε̂ = 0` only.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetConfig {
    pub max_iter: usize,
    pub tol: TolKind,
    /// Seed for fresh support draws; `None` keeps one fixed support.
    pub fresh_draws: Option<u64>,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self { max_iter: 100, tol: TolKind::TmleStandard, fresh_draws: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord<T> {
    pub iter: usize,
    pub epsilon: T,
    /// Mean influence over the fit points before the step.
    pub mean_eif: T,
    /// Cumulative log-likelihood ratio against the initial distribution after the step.
    pub loglik: T,
    /// Plug-in value after the step.
    pub psi_hat: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetingTrace<T> {
    pub records: Vec<TraceRecord<T>>,
    pub converged: bool,
    pub k_n: usize,
    pub initial_psi_hat: T,
    pub final_psi_hat: T,
    pub final_mean_eif: T,
    pub final_sd_eif: T,
    pub threshold: T,
}

impl<T: Real> TargetingTrace<T> {
    pub fn epsilons(&self) -> Vec<T> {
        self.records.iter().map(|r| r.epsilon).collect()
    }

    pub fn write_csv(&self, out: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(out, "iter,epsilon,mean_eif,loglik,psi_hat")?;
        for r in &self.records {
            writeln!(out, "{},{:?},{:?},{:?},{:?}", r.iter, r.epsilon, r.mean_eif, r.loglik, r.psi_hat)?;
        }
        Ok(())
    }
}

fn fluctuation_loglik<T: Real>(weights: &[T], psi: &[T], fit: &[usize], eps: T) -> T {
    let c: T = weights.iter().zip(psi).map(|(&w, &p)| w * (T::one() + eps * p)).sum();
    let s: T = fit.iter().map(|&i| (T::one() + eps * psi[i]).ln()).sum();
    s - T::from_usize_lossy(fit.len()) * c.ln()
}

fn fluctuation_score<T: Real>(weights: &[T], psi: &[T], fit: &[usize], eps: T) -> T {
    let mu: T = weights.iter().zip(psi).map(|(&w, &p)| w * p).sum();
    let total: T = weights.iter().copied().sum();
    let s: T = fit.iter().map(|&i| psi[i] / (T::one() + eps * psi[i])).sum();
    s - T::from_usize_lossy(fit.len()) * mu / (total + eps * mu)
}

/// Maximizes `Σ_fit log(1 + εψ_i) − |fit| log c(ε)` over `{ε : 1 + εψ_j > 0}`,
/// where `j` ranges over points with positive weight and the fit points.
/// Returns `(ε̂, c(ε̂))`.
pub fn epsilon_mle<T: Real>(weights: &[T], psi: &[T], fit: &[usize]) -> Result<(T, T)> {
    if weights.len() != psi.len() {
        return Err(VitlError::Size("weights and influence values differ in length".into()));
    }
    if fit.is_empty() {
        return Err(VitlError::Size("empty fit set".into()));
    }
    if psi.iter().any(|p| !p.is_finite()) {
        return Err(VitlError::Numeric("influence values passed to the likelihood step".into()));
    }
    if psi.iter().all(|&p| p == T::zero()) {
        return Ok((T::zero(), T::one()));
    }
    let shrink = T::lit(0.999);
    let (mut lo, mut hi) = (T::neg_infinity(), T::infinity());
    let mut bound = |p: T| {
        if p > T::zero() {
            lo = lo.max(-T::one() / p);
        } else if p < T::zero() {
            hi = hi.min(-T::one() / p);
        }
    };
    for (&w, &p) in weights.iter().zip(psi) {
        if w > T::zero() {
            bound(p);
        }
    }
    for &i in fit {
        bound(psi[i]);
    }
    let (lo, hi) = (lo * shrink, hi * shrink);
    let score = |e: T| fluctuation_score(weights, psi, fit, e);
    let s0 = score(T::zero());
    if s0 == T::zero() {
        return Ok((T::zero(), T::one()));
    }
    // Bracket the root on the side the score points to.
    let (mut a, mut b) = (T::zero(), if s0 > T::zero() { hi } else { lo });
    if !b.is_finite() {
        let dir = if s0 > T::zero() { T::one() } else { -T::one() };
        let mut step = T::one();
        b = dir * step;
        while score(b) * s0 > T::zero() && step < T::lit(1e12) {
            a = b;
            step = step * T::lit(2.0);
            b = dir * step;
        }
    }
    let tol = T::lit(1e-10);
    let eps = if score(b) * s0 > T::zero() {
        b
    } else {
        let mut mid = (a + b) / T::lit(2.0);
        for _ in 0..300 {
            mid = (a + b) / T::lit(2.0);
            let sm = score(mid);
            if sm.abs() <= tol || mid == a || mid == b {
                break;
            }
            if sm * s0 > T::zero() {
                a = mid;
            } else {
                b = mid;
            }
        }
        mid
    };
    let eps = if fluctuation_loglik(weights, psi, fit, eps) < T::zero() { T::zero() } else { eps };
    let c: T = weights.iter().zip(psi).map(|(&w, &p)| w * (T::one() + eps * p)).sum();
    Ok((eps, c))
}

/// `w_j ← w_j (1 + εψ_j) / c`, then each block is rescaled to its fixed mass.
pub fn apply_fluctuation<T: Real>(support: &FluctuationSupport<T>, psi: &[T], eps: T, c: T) -> Result<FluctuationSupport<T>> {
    if eps == T::zero() {
        return Ok(support.clone());
    }
    let mut out = support.clone();
    for (j, w) in out.w.iter_mut().enumerate() {
        let v = *w * (T::one() + eps * psi[j]) / c;
        if v < T::zero() || !v.is_finite() {
            return Err(VitlError::Invariant(format!("weight {j} became {v} after the fluctuation step")));
        }
        *w = v;
    }
    for b in &out.blocks {
        let r = b.range();
        let total: T = out.w[r.clone()].iter().copied().sum();
        for w in &mut out.w[r] {
            *w = *w * b.mass / total;
        }
    }
    Ok(out)
}

/// Sinkhorn coupling of `p` and `q` under the kernel `exp(−(y_b − f_a)² / 2σ²)`.
fn sinkhorn<T: Real>(p: &[T], q: &[T], fx: &[T], ys: &[T], sigma: T) -> Vec<T> {
    let (nx, ny) = (p.len(), q.len());
    let two_s2 = T::lit(2.0) * sigma * sigma;
    let log_k: Vec<T> = (0..nx * ny).map(|k| -(ys[k % ny] - fx[k / ny]).powi(2) / two_s2).collect();
    sinkhorn_scaled(p, q, &log_k).unwrap_or_else(|| sinkhorn_log(p, q, &log_k))
}

const SINKHORN_ITERS: usize = 1000;
const SINKHORN_TOL: f64 = 1e-12;

/// Scaling in the kernel domain; `None` when the kernel underflows or the scalings overflow.
fn sinkhorn_scaled<T: Real>(p: &[T], q: &[T], log_k: &[T]) -> Option<Vec<T>> {
    let (nx, ny) = (p.len(), q.len());
    let k: Vec<T> = log_k.iter().map(|v| v.exp()).collect();
    let mut u = vec![T::one(); nx];
    let mut v = vec![T::one(); ny];
    let mut kv = vec![T::zero(); nx];
    for it in 0..SINKHORN_ITERS {
        for a in 0..nx {
            kv[a] = (0..ny).map(|b| k[a * ny + b] * v[b]).sum();
            if !(kv[a] > T::zero()) {
                return None;
            }
            u[a] = p[a] / kv[a];
        }
        for b in 0..ny {
            let ku: T = (0..nx).map(|a| k[a * ny + b] * u[a]).sum();
            if !(ku > T::zero()) {
                return None;
            }
            v[b] = q[b] / ku;
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return None;
        }
        if it % 10 == 9 || it + 1 == SINKHORN_ITERS {
            let err = (0..nx)
                .map(|a| (u[a] * (0..ny).map(|b| k[a * ny + b] * v[b]).sum::<T>() - p[a]).abs())
                .fold(T::zero(), T::max);
            if err < T::lit(SINKHORN_TOL) {
                break;
            }
        }
    }
    Some((0..nx * ny).map(|i| u[i / ny] * k[i] * v[i % ny]).collect())
}

fn sinkhorn_log<T: Real>(p: &[T], q: &[T], log_k: &[T]) -> Vec<T> {
    let (nx, ny) = (p.len(), q.len());
    let lp: Vec<T> = p.iter().map(|v| v.ln()).collect();
    let lq: Vec<T> = q.iter().map(|v| v.ln()).collect();
    let mut lu = vec![T::zero(); nx];
    let mut lv = vec![T::zero(); ny];
    for _ in 0..SINKHORN_ITERS {
        for a in 0..nx {
            lu[a] = lp[a] - log_sum_exp((0..ny).map(|b| log_k[a * ny + b] + lv[b]));
        }
        for b in 0..ny {
            lv[b] = lq[b] - log_sum_exp((0..nx).map(|a| log_k[a * ny + b] + lu[a]));
        }
        let err = (0..nx)
            .map(|a| ((0..ny).map(|b| (lu[a] + log_k[a * ny + b] + lv[b]).exp()).sum::<T>() - p[a]).abs())
            .fold(T::zero(), T::max);
        if err < T::lit(SINKHORN_TOL) {
            break;
        }
    }
    (0..nx * ny).map(|k| (lu[k / ny] + log_k[k] + lv[k % ny]).exp()).collect()
}

/// Runs the targeting loop for one estimand with a fixed learner.
pub struct Targeter<'a, T> {
    pub learner: &'a dyn Regressor<T>,
    pub estimand: Estimand,
    /// Kernel scale coupling `x` and `y` in the initial block tables.
    pub kernel_sd: T,
}

impl<'a, T: Real> Targeter<'a, T> {
    pub fn new(learner: &'a dyn Regressor<T>, estimand: Estimand, kernel_sd: T) -> Result<Self> {
        let ok = |k: EstimandKind| matches!(k, EstimandKind::RefLoss | EstimandKind::CondPermLoss);
        let (k, minus) = estimand.components();
        if !ok(k) || !minus.is_none_or(ok) {
            return Err(VitlError::Unsupported(format!(
                "targeting supports condperm, refloss and condperm-loss, not {estimand}"
            )));
        }
        if !(kernel_sd > T::zero()) || !kernel_sd.is_finite() {
            return Err(VitlError::Parameter(format!("kernel scale must be positive, got {kernel_sd}")));
        }
        Ok(Self { learner, estimand, kernel_sd })
    }

    /// One block per point of `points`, grids from `laws`, initial tables by Sinkhorn coupling.
    pub fn build_support(&self, laws: &dyn LawProvider<T>, points: &WeightedSample<T>) -> Result<FluctuationSupport<T>> {
        if points.is_empty() {
            return Err(VitlError::Size("targeting needs at least one observation".into()));
        }
        let total_w: T = points.w.iter().copied().sum();
        let f = self.learner;
        let mut s = FluctuationSupport { x: vec![], y: vec![], w: vec![], origin: vec![], block_of: vec![], blocks: vec![] };
        for i in 0..points.len() {
            let z = points.z_row(i).to_vec();
            let (xo, yo) = (points.x[i], points.y[i]);
            let xl = laws.x_law(&z);
            let yl = laws.y_law(&z);
            let fx: Vec<T> = xl.values.iter().map(|&x| f.predict(x, &z)).collect();
            let fo = f.predict(xo, &z);
            if fx.iter().chain(std::iter::once(&fo)).any(|v| !v.is_finite()) {
                return Err(VitlError::Numeric("learner prediction on the targeting grid".into()));
            }
            let (nx, ny) = (xl.len(), yl.len());
            let mass = points.w[i] / total_w;
            let table = sinkhorn(&xl.weights, &yl.weights, &fx, &yl.values, self.kernel_sd);
            let table_total: T = table.iter().copied().sum();
            let start = s.w.len();
            for a in 0..nx {
                for b in 0..ny {
                    s.x.push(xl.values[a]);
                    s.y.push(yl.values[b]);
                    s.w.push(table[a * ny + b] / table_total * mass);
                    s.origin.push(Origin::Synthetic);
                    s.block_of.push(i);
                }
            }
            s.x.push(xo);
            s.y.push(yo);
            s.w.push(T::zero());
            s.origin.push(Origin::Observed);
            s.block_of.push(i);
            let loss_tab = (0..nx * ny).map(|k| loss(yl.values[k % ny], fx[k / ny])).collect();
            s.blocks.push(Block {
                anchor_loss_x: fx.iter().map(|&v| loss(yo, v)).collect(),
                anchor_loss_y: yl.values.iter().map(|&yb| loss(yb, fo)).collect(),
                anchor_loss: loss(yo, fo),
                loss: loss_tab,
                z,
                xs: xl.values,
                ys: yl.values,
                start,
                mass,
            });
        }
        Ok(s)
    }

    fn eval_block(&self, s: &FluctuationSupport<T>, b: &Block<T>) -> BlockEval<T> {
        let (p, q) = s.marginals(b);
        let w = &s.w[b.start..b.start + b.cells()];
        let mut out = BlockEval { cells: vec![T::zero(); b.cells()], anchor: T::zero(), level: T::zero() };
        let (k, minus) = self.estimand.components();
        eval_kind(b, w, &p, &q, k, T::one(), &mut out);
        if let Some(m) = minus {
            eval_kind(b, w, &p, &q, m, -T::one(), &mut out);
        }
        out
    }

    /// Influence values and plug-in value of the current weights.
    pub fn evaluate(&self, s: &FluctuationSupport<T>) -> Result<Evaluation<T>> {
        let evals: Vec<BlockEval<T>> = s.blocks.iter().map(|b| self.eval_block(s, b)).collect();
        let psi_hat: T = s.blocks.iter().zip(&evals).map(|(b, e)| b.mass * e.level).sum();
        let mut centred = vec![T::zero(); s.len()];
        let mut anchor_psi = Vec::with_capacity(s.blocks.len());
        for (b, e) in s.blocks.iter().zip(&evals) {
            for (k, &v) in e.cells.iter().enumerate() {
                centred[b.start + k] = v - e.level;
            }
            centred[b.anchor()] = e.anchor - e.level;
            anchor_psi.push(e.anchor - psi_hat);
        }
        if !psi_hat.is_finite() || centred.iter().any(|v| !v.is_finite()) {
            return Err(VitlError::Numeric(format!("{} influence on the working distribution", self.estimand)));
        }
        Ok(Evaluation { centred, anchor_psi, psi_hat })
    }

    fn threshold(&self, tol: TolKind, sd: T, n: usize) -> T {
        match tol {
            TolKind::TmleStandard => {
                let nf = T::from_usize_lossy(n);
                if n < 2 {
                    T::infinity()
                } else {
                    sd / (nf.sqrt() * nf.ln())
                }
            }
            TolKind::Strict => T::lit(1e-9),
        }
    }

    /// Fits on every anchor of `support`.
    pub fn target(&self, support: FluctuationSupport<T>, cfg: &TargetConfig) -> Result<(FluctuationSupport<T>, TargetingTrace<T>)> {
        let fit = support.anchors();
        self.target_with_fit(support, &fit, cfg)
    }

    /// Iterates influence evaluation, likelihood step and fluctuation until the stopping rule holds.
    pub fn target_with_fit(
        &self,
        support: FluctuationSupport<T>,
        fit: &[usize],
        cfg: &TargetConfig,
    ) -> Result<(FluctuationSupport<T>, TargetingTrace<T>)> {
        self.run(support, fit, cfg, None)
    }

    fn run(
        &self,
        mut support: FluctuationSupport<T>,
        fit: &[usize],
        cfg: &TargetConfig,
        mut rebuild: Option<&mut dyn FnMut(usize, &[T]) -> Result<FluctuationSupport<T>>>,
    ) -> Result<(FluctuationSupport<T>, TargetingTrace<T>)> {
        if fit.is_empty() || fit.iter().any(|&i| i >= support.len() || support.origin[i] != Origin::Observed) {
            return Err(VitlError::Parameter("fit indices must be nonempty and refer to observed points".into()));
        }
        let anchor_pos: Vec<usize> = fit.iter().map(|&i| support.block_of[i]).collect();
        let eps_floor = match cfg.tol {
            TolKind::TmleStandard => T::lit(1e-7),
            TolKind::Strict => T::zero(),
        };
        let mut records = Vec::new();
        let mut history: Vec<T> = Vec::new();
        let mut loglik = T::zero();
        let mut ev = self.evaluate(&support)?;
        let initial_psi_hat = ev.psi_hat;
        let (converged, mut mean, mut sd, mut thr);
        loop {
            let vals: Vec<T> = anchor_pos.iter().map(|&b| ev.anchor_psi[b]).collect();
            (mean, sd) = mean_sd(&vals);
            thr = self.threshold(cfg.tol, sd, vals.len());
            // Rounding noise in an influence function that is identically zero.
            let noise = T::lit(1e-12) * (T::one() + ev.psi_hat.abs() + sd);
            if mean.abs() <= thr.max(noise) {
                converged = true;
                break;
            }
            if records.len() >= cfg.max_iter {
                converged = false;
                break;
            }
            let (eps, c) = epsilon_mle(&support.w, &ev.centred, fit)?;
            if eps.abs() <= eps_floor {
                converged = true;
                break;
            }
            loglik = loglik + fluctuation_loglik(&support.w, &ev.centred, fit, eps);
            support = apply_fluctuation(&support, &ev.centred, eps, c)?;
            history.push(eps);
            if let Some(rb) = rebuild.as_deref_mut() {
                support = rb(history.len(), &history)?;
            }
            ev = self.evaluate(&support)?;
            records.push(TraceRecord { iter: records.len() + 1, epsilon: eps, mean_eif: mean, loglik, psi_hat: ev.psi_hat });
        }
        let trace = TargetingTrace {
            k_n: records.len(),
            records,
            converged,
            initial_psi_hat,
            final_psi_hat: ev.psi_hat,
            final_mean_eif: mean,
            final_sd_eif: sd,
            threshold: thr,
        };
        Ok((support, trace))
    }

    /// Replays a sequence of steps block by block, each block normalized on its own.
    /// Negative weights are clamped to zero; returns how many were clamped.
    pub fn replay(&self, support: &mut FluctuationSupport<T>, history: &[T]) -> usize {
        let mut clamped = 0;
        for bi in 0..support.blocks.len() {
            for &eps in history {
                let b = &support.blocks[bi];
                let e = self.eval_block(support, b);
                let (start, n, mass) = (b.start, b.cells(), b.mass);
                let w = &mut support.w[start..start + n];
                for (k, wk) in w.iter_mut().enumerate() {
                    let v = *wk * (T::one() + eps * (e.cells[k] - e.level));
                    *wk = if v < T::zero() {
                        clamped += 1;
                        T::zero()
                    } else {
                        v
                    };
                }
                let total: T = w.iter().copied().sum();
                for wk in w.iter_mut() {
                    *wk = *wk * mass / total;
                }
            }
        }
        clamped
    }

    /// Full influence at the anchors of `support` against the plug-in value `psi_hat`.
    pub fn anchor_influence(&self, support: &FluctuationSupport<T>, psi_hat: T) -> Vec<T> {
        support.blocks.iter().map(|b| self.eval_block(support, b).anchor - psi_hat).collect()
    }

    /// Targeting with a new support drawn from `laws_at(iteration)` before every iteration;
    /// earlier steps are replayed on each new support.
    pub fn target_fresh(
        &self,
        laws_at: &dyn Fn(usize) -> Box<dyn LawProvider<T> + 'a>,
        points: &WeightedSample<T>,
        cfg: &TargetConfig,
    ) -> Result<(FluctuationSupport<T>, TargetingTrace<T>)> {
        let support = self.build_support(laws_at(0).as_ref(), points)?;
        let fit = support.anchors();
        let mut rebuild = |iter: usize, history: &[T]| -> Result<FluctuationSupport<T>> {
            let mut s = self.build_support(laws_at(iter).as_ref(), points)?;
            self.replay(&mut s, history);
            Ok(s)
        };
        self.run(support, &fit, cfg, Some(&mut rebuild))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conddens::{fit_gaussian_linear, CondDensityModel};
    use crate::eif::{eif_condperm, eif_ref, plugin_value, EifContext, ModelLaws, Point};
    use crate::learners::{fit_ridge, FittedLearner, FnRegressor};
    use crate::sim::{generate, DgpSpec};
    use proptest::prelude::*;

    struct Setup {
        f: FittedLearner<f64>,
        px: CondDensityModel<f64>,
        py: CondDensityModel<f64>,
        eval: WeightedSample<f64>,
    }

    fn setup(n: usize, rho: f64, seed: u64) -> Setup {
        let d = generate(&DgpSpec { n, rho, seed, ..DgpSpec::default() }).unwrap();
        let train: Vec<usize> = (0..n / 2).collect();
        let rest: Vec<usize> = (n / 2..n).collect();
        let t = d.subset(&train);
        Setup {
            f: fit_ridge(&t, 1e-6).unwrap(),
            px: CondDensityModel::Gaussian(fit_gaussian_linear(t.x(), t.z_flat(), 1).unwrap()),
            py: CondDensityModel::Gaussian(fit_gaussian_linear(t.y(), t.z_flat(), 1).unwrap()),
            eval: WeightedSample::empirical(&d, &rest),
        }
    }

    fn support(s: &Setup, m: usize, estimand: Estimand) -> (Targeter<'_, f64>, FluctuationSupport<f64>) {
        let t = Targeter::new(&s.f, estimand, 1.0).unwrap();
        let laws = ModelLaws { px: &s.px, py: &s.py, m };
        let sup = t.build_support(&laws, &s.eval).unwrap();
        (t, sup)
    }

    #[test]
    fn zero_influence_gives_zero_step() {
        assert_eq!(epsilon_mle(&[0.5, 0.5], &[0.0, 0.0], &[0]).unwrap(), (0.0, 1.0));
    }

    #[test]
    fn mle_matches_grid_search() {
        let w: [f64; 5] = [0.1, 0.3, 0.2, 0.25, 0.15];
        let psi = [1.0, -0.5, 0.4, -0.8, 0.2];
        let fit = [0, 1, 2];
        let (eps, c) = epsilon_mle(&w, &psi, &fit).unwrap();
        let score = fluctuation_score(&w, &psi, &fit, eps);
        assert!(score.abs() < 1e-8, "score {score}");
        let c_direct: f64 = w.iter().zip(&psi).map(|(a, b)| a * (1.0 + eps * b)).sum();
        assert!((c - c_direct).abs() < 1e-15);
        let (lo, hi) = (-0.999, 1.25 * 0.999);
        let mut best = (f64::NEG_INFINITY, 0.0);
        for k in 0..=1_000_000 {
            let e = lo + (hi - lo) * k as f64 / 1e6;
            let l = fluctuation_loglik(&w, &psi, &fit, e);
            if l > best.0 {
                best = (l, e);
            }
        }
        assert!((best.1 - eps).abs() < 1e-5, "grid {} vs {eps}", best.1);
    }

    #[test]
    fn unbounded_direction_is_bracketed() {
        // Only nonnegative influence among weighted points: no upper bound from positivity.
        let w: [f64; 3] = [0.5, 0.5, 0.0];
        let psi = [0.0, 1.0, -0.5];
        let (eps, _) = epsilon_mle(&w, &psi, &[2]).unwrap();
        assert!(eps < 0.0 && eps.is_finite());
    }

    #[test]
    fn block_influence_matches_generic_formulas() {
        let s = setup(300, 0.5, 1);
        let (t, sup) = support(&s, 6, Estimand::CondPerm);
        let ev = t.evaluate(&sup).unwrap();
        let laws = sup.block_laws();
        let syn = sup.synthetic_sample();
        let ctx = EifContext::new(&s.f);
        let cp = plugin_value(&ctx, &laws, EstimandKind::CondPermLoss, &syn).unwrap();
        let rf = plugin_value(&ctx, &laws, EstimandKind::RefLoss, &syn).unwrap();
        assert!((ev.psi_hat - (cp - rf)).abs() < 1e-10);
        let anchors = sup.anchors();
        for (bi, &a) in anchors.iter().enumerate().take(20) {
            let (x, y, z) = sup.point(a);
            let p = Point { x, y, z };
            let xl = laws.x_law(z);
            let yl = laws.y_law(z);
            let full = eif_condperm(&ctx.with_psi(cp), p, &xl, &yl).unwrap() - eif_ref(&ctx.with_psi(rf), p).unwrap();
            assert!((full - ev.anchor_psi[bi]).abs() < 1e-9, "{full} vs {}", ev.anchor_psi[bi]);
        }
        // Centred influence has zero conditional mean in every block.
        for b in &sup.blocks {
            let r = b.start..b.start + b.cells();
            let m: f64 = r.clone().map(|k| sup.w[k] * ev.centred[k]).sum();
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn zero_step_is_identity_and_single_positive_point_grows() {
        let s = setup(60, 0.5, 2);
        let (_, sup) = support(&s, 4, Estimand::CondPerm);
        let psi: Vec<f64> = (0..sup.len()).map(|i| (i % 7) as f64 - 3.0).collect();
        let same = apply_fluctuation(&sup, &psi, 0.0, 1.0).unwrap();
        assert_eq!(same.w.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), sup.w.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let j = (0..16).max_by(|&a, &b| sup.w[a].partial_cmp(&sup.w[b]).unwrap()).unwrap();
        let mut single = vec![0.0; sup.len()];
        single[j] = 1.0;
        let up = apply_fluctuation(&sup, &single, 0.01, 1.0).unwrap();
        assert!(up.w[j] > sup.w[j]);
        for k in 0..sup.len() {
            if k != j && sup.block_of[k] == sup.block_of[j] {
                assert!(up.w[k] <= sup.w[k]);
            } else if sup.block_of[k] != sup.block_of[j] {
                assert!((up.w[k] - sup.w[k]).abs() <= 1e-14 * sup.w[k]);
            }
        }
    }

    proptest! {
        #[test]
        fn fluctuation_preserves_mass(seed in 0u64..1000, eps in -0.05f64..0.05) {
            let s = setup(40, 0.3, seed);
            let (t, sup) = support(&s, 4, Estimand::CondPerm);
            let ev = t.evaluate(&sup).unwrap();
            let (lo, hi) = ev.centred.iter().fold((f64::NEG_INFINITY, f64::INFINITY), |(lo, hi), &p| {
                if p > 0.0 { (lo.max(-1.0 / p), hi) } else if p < 0.0 { (lo, hi.min(-1.0 / p)) } else { (lo, hi) }
            });
            let e = eps.clamp(0.9 * lo, 0.9 * hi);
            let c: f64 = sup.w.iter().zip(&ev.centred).map(|(w, p)| w * (1.0 + e * p)).sum();
            let out = apply_fluctuation(&sup, &ev.centred, e, c).unwrap();
            let total: f64 = out.w.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(out.w.iter().all(|&w| w >= 0.0));
            for b in &out.blocks {
                let m: f64 = out.w[b.range()].iter().sum();
                prop_assert!((m - b.mass).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn x_free_learner_needs_no_targeting() {
        let s = setup(100, 0.5, 3);
        let g = FnRegressor(|_x: f64, z: &[f64]| 0.4 * z[0]);
        let t = Targeter::new(&g, Estimand::CondPerm, 1.0).unwrap();
        let laws = ModelLaws { px: &s.px, py: &s.py, m: 5 };
        let sup = t.build_support(&laws, &s.eval).unwrap();
        let before = sup.w.clone();
        let (out, trace) = t.target(sup, &TargetConfig::default()).unwrap();
        assert_eq!(trace.k_n, 0);
        assert!(trace.converged);
        assert_eq!(out.w, before);
    }

    #[test]
    fn converges_with_monotone_likelihood() {
        let s = setup(500, 0.5, 4);
        let (t, sup) = support(&s, 16, Estimand::CondPerm);
        let (out, trace) = t.target(sup, &TargetConfig::default()).unwrap();
        assert!(trace.converged && trace.k_n <= 50, "{trace:?}");
        assert!(trace.final_mean_eif.abs() <= trace.threshold);
        let mut prev = 0.0;
        for r in &trace.records {
            assert!(r.loglik >= prev);
            prev = r.loglik;
        }
        // Idempotence.
        let (_, again) = t.target(out, &TargetConfig::default()).unwrap();
        assert_eq!(again.k_n, 0);
    }

    #[test]
    fn strict_tolerance_kills_plug_in_bias() {
        let s = setup(300, 0.5, 5);
        let (t, sup) = support(&s, 12, Estimand::CondPerm);
        let cfg = TargetConfig { tol: TolKind::Strict, ..TargetConfig::default() };
        let (out, trace) = t.target(sup, &cfg).unwrap();
        assert!(trace.converged, "{trace:?}");
        let ev = t.evaluate(&out).unwrap();
        let mean = ev.anchor_psi.iter().sum::<f64>() / ev.anchor_psi.len() as f64;
        assert!(mean.abs() <= 1e-8, "mean {mean}");
    }

    #[test]
    fn replay_reproduces_targeted_weights() {
        let s = setup(200, 0.5, 6);
        let (t, sup) = support(&s, 8, Estimand::CondPerm);
        let mut fresh = sup.clone();
        let (out, trace) = t.target(sup, &TargetConfig::default()).unwrap();
        assert!(trace.k_n >= 1);
        let clamped = t.replay(&mut fresh, &trace.epsilons());
        assert_eq!(clamped, 0);
        for (a, b) in fresh.w.iter().zip(&out.w) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unsupported_estimands_are_refused() {
        let f = FnRegressor(|x: f64, _z: &[f64]| x);
        for e in [Estimand::Loco, Estimand::MargPerm, Estimand::Loss(EstimandKind::LocoLoss)] {
            assert!(matches!(Targeter::new(&f, e, 1.0), Err(VitlError::Unsupported(_))));
        }
        assert!(Targeter::new(&f, Estimand::Loss(EstimandKind::RefLoss), 1.0).is_ok());
    }

    #[test]
    fn fresh_draws_run() {
        let s = setup(200, 0.5, 7);
        let t = Targeter::new(&s.f, Estimand::CondPerm, 1.0).unwrap();
        let (px, py) = (&s.px, &s.py);
        let laws_at = move |_iter: usize| -> Box<dyn LawProvider<f64>> { Box::new(ModelLaws { px, py, m: 8 }) };
        let (_, trace) = t.target_fresh(&laws_at, &s.eval, &TargetConfig::default()).unwrap();
        assert!(trace.converged);
    }
}
