//! Entropic optimal transport between weighted point clouds, and the two
//! divergences built on it: the debiased Sinkhorn divergence and the
//! ε-Hausdorff divergence.
//!
//! Cost is always `C(x, y) = ½‖x − y‖²`. All iterations run in the log
//! domain with max-shifted log-sum-exp. Symmetric entry points canonicalize
//! their operands (atoms sorted lexicographically, operand pair ordered), so
//! swapping arguments or relabelling atoms gives bit-identical values.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OtError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sinkhorn did not converge after {iterations} iterations (residual {residual:.3e})")]
    Convergence { iterations: usize, residual: f64 },
}

/// Weighted point cloud `Σ wᵢ δ_{xᵢ}` in `ℝ^dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure {
    points: Vec<f64>,
    dim: usize,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    /// `points` is row-major `N × dim`.
    pub fn new(points: Vec<f64>, dim: usize, weights: Vec<f64>) -> Result<Self, OtError> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(OtError::InvalidArgument(format!(
                "{} coordinates do not form points of dimension {dim}",
                points.len()
            )));
        }
        let n = points.len() / dim;
        if weights.len() != n {
            return Err(OtError::InvalidArgument(format!("{n} points but {} weights", weights.len())));
        }
        if points.iter().chain(&weights).any(|v| !v.is_finite()) {
            return Err(OtError::InvalidArgument("non-finite coordinate or weight".into()));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(OtError::InvalidArgument("negative weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(OtError::InvalidArgument(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { points, dim, weights })
    }

    pub fn uniform(points: Vec<f64>, dim: usize) -> Result<Self, OtError> {
        let n = if dim == 0 { 0 } else { points.len() / dim };
        let w = if n == 0 { vec![] } else { vec![1.0 / n as f64; n] };
        Self::new(points, dim, w)
    }

    /// Uniform measure over equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, OtError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(OtError::InvalidArgument("rows differ in length".into()));
        }
        Self::uniform(rows.concat(), dim)
    }

    pub fn dirac(point: Vec<f64>) -> Result<Self, OtError> {
        let dim = point.len();
        Self::new(point, dim, vec![1.0])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..][..self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn log_weights(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.ln()).collect()
    }

    fn cmp_atoms(&self, i: usize, j: usize) -> Ordering {
        for (a, b) in self.point(i).iter().zip(self.point(j)) {
            match a.total_cmp(b) {
                Ordering::Equal => {}
                o => return o,
            }
        }
        self.weights[i].total_cmp(&self.weights[j])
    }

    /// Atoms sorted lexicographically, plus `perm[k]` = original index of
    /// sorted atom `k`.
    fn canonical(&self) -> (DiscreteMeasure, Vec<usize>) {
        let mut perm: Vec<usize> = (0..self.len()).collect();
        perm.sort_by(|&i, &j| self.cmp_atoms(i, j));
        let mut points = Vec::with_capacity(self.points.len());
        for &i in &perm {
            points.extend_from_slice(self.point(i));
        }
        let weights = perm.iter().map(|&i| self.weights[i]).collect();
        (
            DiscreteMeasure {
                points,
                dim: self.dim,
                weights,
            },
            perm,
        )
    }

    fn total_cmp(&self, other: &Self) -> Ordering {
        self.len()
            .cmp(&other.len())
            .then_with(|| {
                self.points
                    .iter()
                    .zip(&other.points)
                    .map(|(a, b)| a.total_cmp(b))
                    .find(|o| o.is_ne())
                    .unwrap_or(Ordering::Equal)
            })
            .then_with(|| {
                self.weights
                    .iter()
                    .zip(&other.weights)
                    .map(|(a, b)| a.total_cmp(b))
                    .find(|o| o.is_ne())
                    .unwrap_or(Ordering::Equal)
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    /// Entropic regularization ε (same units as the cost).
    pub epsilon: f64,
    /// Iteration cap per annealing stage.
    pub max_iters: usize,
    /// Stopping threshold on the sup-norm change of the potentials,
    /// measured in units of the current ε.
    pub tol: f64,
    /// ε-annealing factor per stage.
    pub scaling: f64,
}

pub const DEFAULT_BLUR: f64 = 0.05;

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_BLUR * DEFAULT_BLUR,
            max_iters: 500,
            tol: 1e-6,
            scaling: 0.5,
        }
    }
}

impl SinkhornConfig {
    /// Default settings with `ε = blur² · diam²`, where `diam²` is the largest
    /// squared distance between any two atoms of `a` and `b`.
    pub fn for_measures(a: &DiscreteMeasure, b: &DiscreteMeasure, blur: f64) -> Self {
        let d2 = squared_diameter(&[a, b]);
        Self {
            epsilon: blur * blur * if d2 > 0.0 { d2 } else { 1.0 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), OtError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(OtError::InvalidArgument(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.scaling > 0.0 && self.scaling < 1.0) {
            return Err(OtError::InvalidArgument(format!("scaling must lie in (0, 1), got {}", self.scaling)));
        }
        if self.max_iters == 0 || !(self.tol > 0.0) {
            return Err(OtError::InvalidArgument("max_iters and tol must be positive".into()));
        }
        Ok(())
    }
}

/// Largest squared Euclidean distance between atoms of the union of `clouds`.
pub fn squared_diameter(clouds: &[&DiscreteMeasure]) -> f64 {
    let pts: Vec<&[f64]> = clouds.iter().flat_map(|m| (0..m.len()).map(move |i| m.point(i))).collect();
    let mut best: f64 = 0.0;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            best = best.max(sq_dist(pts[i], pts[j]));
        }
    }
    best
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Dense `rows × cols` matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }
}

/// `C[i][j] = ½‖aᵢ − bⱼ‖²`.
pub fn cost_matrix(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<CostMatrix, OtError> {
    if a.dim != b.dim {
        return Err(OtError::InvalidArgument(format!("point dimensions differ: {} vs {}", a.dim, b.dim)));
    }
    let mut data = Vec::with_capacity(a.len() * b.len());
    for i in 0..a.len() {
        for j in 0..b.len() {
            data.push(0.5 * sq_dist(a.point(i), b.point(j)));
        }
    }
    Ok(CostMatrix {
        rows: a.len(),
        cols: b.len(),
        data,
    })
}

fn lse(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `out_i = −ε log Σ_j exp(log w_j + (pot_j − C_ij)/ε)` (softmin over columns).
fn softmin_rows(eps: f64, c: &CostMatrix, log_w: &[f64], pot: &[f64]) -> Vec<f64> {
    (0..c.rows)
        .map(|i| {
            let row = &c.data[i * c.cols..][..c.cols];
            -eps * lse((0..c.cols).map(|j| log_w[j] + (pot[j] - row[j]) / eps))
        })
        .collect()
}

/// `out_j = −ε log Σ_i exp(log w_i + (pot_i − C_ij)/ε)` (softmin over rows).
fn softmin_cols(eps: f64, c: &CostMatrix, log_w: &[f64], pot: &[f64]) -> Vec<f64> {
    (0..c.cols)
        .map(|j| -eps * lse((0..c.rows).map(|i| log_w[i] + (pot[i] - c.data[i * c.cols + j]) / eps)))
        .collect()
}

fn sup_change(old: &[f64], new: &[f64]) -> f64 {
    old.iter().zip(new).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// ε values from the largest cost down to the target, geometric in `scaling`.
fn eps_schedule(max_cost: f64, cfg: &SinkhornConfig) -> Vec<f64> {
    let mut out = vec![];
    let mut e = max_cost;
    while e > cfg.epsilon {
        out.push(e);
        e *= cfg.scaling;
    }
    out.push(cfg.epsilon);
    out
}

/// Converged dual potentials.
#[derive(Clone, Debug, PartialEq)]
pub struct Potentials {
    /// Potential on the support of the first measure.
    pub f: Vec<f64>,
    /// Potential on the support of the second measure.
    pub g: Vec<f64>,
    pub iterations: usize,
}

/// Plain sweeps per annealing stage before the final stage switches to Newton.
const SWEEPS_BEFORE_NEWTON: usize = 50;

fn dual_objective(c: &CostMatrix, la: &[f64], lb: &[f64], f: &[f64], g: &[f64], eps: f64) -> f64 {
    let mass: f64 = plan(c, la, lb, f, g, eps).iter().sum();
    let (a, b): (Vec<f64>, Vec<f64>) = (la.iter().map(|v| v.exp()).collect(), lb.iter().map(|v| v.exp()).collect());
    dot(&a, f) + dot(&b, g) - eps * (mass - 1.0)
}

/// One damped Newton ascent step on the (concave) dual. The constant gauge
/// direction `(1, −1)` is handled by a tiny ridge.
fn newton_step(c: &CostMatrix, la: &[f64], lb: &[f64], f: &mut [f64], g: &mut [f64], eps: f64) {
    let (n, m) = (c.rows, c.cols);
    let pi = plan(c, la, lb, f, g, eps);
    let mut h = DMatrix::zeros(n + m, n + m);
    let mut rhs = DVector::zeros(n + m);
    for i in 0..n {
        let row: f64 = pi[i * m..][..m].iter().sum();
        h[(i, i)] = row / eps;
        rhs[i] = la[i].exp() - row;
    }
    for j in 0..m {
        let col: f64 = (0..n).map(|i| pi[i * m + j]).sum();
        h[(n + j, n + j)] = col / eps;
        rhs[n + j] = lb[j].exp() - col;
        for i in 0..n {
            h[(i, n + j)] = pi[i * m + j] / eps;
            h[(n + j, i)] = pi[i * m + j] / eps;
        }
    }
    let ridge = 1e-12 * (0..n + m).map(|k| h[(k, k)]).fold(0.0, f64::max);
    for k in 0..n + m {
        h[(k, k)] += ridge;
    }
    let Some(step) = h.cholesky().map(|ch| ch.solve(&rhs)) else {
        return;
    };
    let base = dual_objective(c, la, lb, f, g, eps);
    let mut t = 1.0;
    for _ in 0..30 {
        let nf: Vec<f64> = (0..n).map(|i| f[i] + t * step[i]).collect();
        let ng: Vec<f64> = (0..m).map(|j| g[j] + t * step[n + j]).collect();
        let val = dual_objective(c, la, lb, &nf, &ng, eps);
        if val.is_finite() && val >= base {
            f.copy_from_slice(&nf);
            g.copy_from_slice(&ng);
            return;
        }
        t *= 0.5;
    }
}

/// Alternating log-domain sweeps with ε-scaling. When the final stage is
/// slow to converge (small ε), it is finished with Newton steps on the dual;
/// the stopping rule is always the size of a plain sweep.
fn solve_two_sided(c: &CostMatrix, la: &[f64], lb: &[f64], cfg: &SinkhornConfig) -> Result<Potentials, OtError> {
    let mut f = vec![0.0; c.rows];
    let mut g = vec![0.0; c.cols];
    let schedule = eps_schedule(c.max(), cfg);
    let mut iterations = 0;
    let sweep = |f: &mut Vec<f64>, g: &mut Vec<f64>, eps: f64| {
        let f_new = softmin_rows(eps, c, lb, g);
        let g_new = softmin_cols(eps, c, la, &f_new);
        let r = sup_change(f, &f_new).max(sup_change(g, &g_new)) / eps;
        *f = f_new;
        *g = g_new;
        r
    };
    for (s, &eps) in schedule.iter().enumerate() {
        let last = s + 1 == schedule.len();
        let mut residual = f64::INFINITY;
        for k in 0..cfg.max_iters {
            if last && k >= SWEEPS_BEFORE_NEWTON {
                newton_step(c, la, lb, &mut f, &mut g, eps);
            }
            residual = sweep(&mut f, &mut g, eps);
            iterations += 1;
            if residual < cfg.tol || (!last && k + 1 >= SWEEPS_BEFORE_NEWTON) {
                break;
            }
        }
        if last && residual >= cfg.tol {
            return Err(OtError::Convergence { iterations, residual });
        }
    }
    Ok(Potentials { f, g, iterations })
}

/// Symmetric potential of `OT_ε(a, a)` via the averaged update
/// `f ← ½(f + softmin(f))`.
fn solve_symmetric(c: &CostMatrix, la: &[f64], cfg: &SinkhornConfig) -> Result<(Vec<f64>, usize), OtError> {
    let mut f = vec![0.0; c.rows];
    let schedule = eps_schedule(c.max(), cfg);
    let mut iterations = 0;
    for (s, &eps) in schedule.iter().enumerate() {
        let mut residual = f64::INFINITY;
        for _ in 0..cfg.max_iters {
            let t = softmin_rows(eps, c, la, &f);
            let f_new: Vec<f64> = f.iter().zip(&t).map(|(a, b)| 0.5 * (a + b)).collect();
            residual = sup_change(&f, &f_new) / eps;
            f = f_new;
            iterations += 1;
            if residual < cfg.tol {
                break;
            }
        }
        if s + 1 == schedule.len() && residual >= cfg.tol {
            return Err(OtError::Convergence { iterations, residual });
        }
    }
    Ok((f, iterations))
}

/// Log-domain Sinkhorn with ε-scaling. `f` lives on `a`, `g` on `b`.
pub fn sinkhorn_potentials(a: &DiscreteMeasure, b: &DiscreteMeasure, cfg: &SinkhornConfig) -> Result<Potentials, OtError> {
    cfg.validate()?;
    let c = cost_matrix(a, b)?;
    solve_two_sided(&c, &a.log_weights(), &b.log_weights(), cfg)
}

/// Plan `πᵢⱼ = aᵢ bⱼ exp((fᵢ + gⱼ − Cᵢⱼ)/ε)`.
fn plan(c: &CostMatrix, la: &[f64], lb: &[f64], f: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let mut p = Vec::with_capacity(c.data.len());
    for i in 0..c.rows {
        for j in 0..c.cols {
            p.push((la[i] + lb[j] + (f[i] + g[j] - c.get(i, j)) / eps).exp());
        }
    }
    p
}

/// Transport plan for `(a, b)` at the converged potentials.
pub fn transport_plan(a: &DiscreteMeasure, b: &DiscreteMeasure, cfg: &SinkhornConfig) -> Result<CostMatrix, OtError> {
    cfg.validate()?;
    let c = cost_matrix(a, b)?;
    let (la, lb) = (a.log_weights(), b.log_weights());
    let pot = solve_two_sided(&c, &la, &lb, cfg)?;
    Ok(CostMatrix {
        rows: c.rows,
        cols: c.cols,
        data: plan(&c, &la, &lb, &pot.f, &pot.g, cfg.epsilon),
    })
}

/// Value of a divergence together with its gradient with respect to the
/// atom positions of each operand (row-major, same layout as the points).
#[derive(Clone, Debug, PartialEq)]
pub struct ValueAndGrad {
    pub value: f64,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
}

/// Sensitivities of a scalar with respect to the three cost matrices.
struct CostSensitivity {
    ab: Vec<f64>,
    aa: Option<Vec<f64>>,
    bb: Option<Vec<f64>>,
}

/// Chain rule from cost sensitivities to atom positions.
fn position_grads(a: &DiscreteMeasure, b: &DiscreteMeasure, s: &CostSensitivity) -> (Vec<f64>, Vec<f64>) {
    let d = a.dim;
    let mut ga = vec![0.0; a.points.len()];
    let mut gb = vec![0.0; b.points.len()];
    for i in 0..a.len() {
        for j in 0..b.len() {
            let w = s.ab[i * b.len() + j];
            if w == 0.0 {
                continue;
            }
            for k in 0..d {
                let diff = a.point(i)[k] - b.point(j)[k];
                ga[i * d + k] += w * diff;
                gb[j * d + k] -= w * diff;
            }
        }
    }
    let self_term = |m: &DiscreteMeasure, sens: &[f64], out: &mut [f64]| {
        let n = m.len();
        for i in 0..n {
            for j in 0..n {
                let w = sens[i * n + j] + sens[j * n + i];
                if i == j || w == 0.0 {
                    continue;
                }
                for k in 0..d {
                    out[i * d + k] += w * (m.point(i)[k] - m.point(j)[k]);
                }
            }
        }
    };
    if let Some(aa) = &s.aa {
        self_term(a, aa, &mut ga);
    }
    if let Some(bb) = &s.bb {
        self_term(b, bb, &mut gb);
    }
    (ga, gb)
}

fn unpermute(grad: &[f64], perm: &[usize], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; grad.len()];
    for (k, &orig) in perm.iter().enumerate() {
        out[orig * dim..][..dim].copy_from_slice(&grad[k * dim..][..dim]);
    }
    out
}

/// Self-transport `OT_ε(a, a)` on a canonical measure: value and plan.
struct SelfTransport {
    value: f64,
    plan: Vec<f64>,
}

fn self_transport(a: &DiscreteMeasure, cfg: &SinkhornConfig) -> Result<SelfTransport, OtError> {
    let c = cost_matrix(a, a)?;
    let la = a.log_weights();
    let (f, _) = solve_symmetric(&c, &la, cfg)?;
    let pi = plan(&c, &la, &la, &f, &f, cfg.epsilon);
    let mass: f64 = pi.iter().sum();
    let value = 2.0 * dot(&a.weights, &f) - cfg.epsilon * (mass - 1.0);
    Ok(SelfTransport {
        value,
        plan: pi,
    })
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// `OT_ε(a, b)` and its plan, for canonical operands.
fn cross_transport(a: &DiscreteMeasure, b: &DiscreteMeasure, cfg: &SinkhornConfig) -> Result<(f64, Vec<f64>), OtError> {
    if a.total_cmp(b).is_eq() {
        let s = self_transport(a, cfg)?;
        return Ok((s.value, s.plan));
    }
    let c = cost_matrix(a, b)?;
    let (la, lb) = (a.log_weights(), b.log_weights());
    let pot = solve_two_sided(&c, &la, &lb, cfg)?;
    let pi = plan(&c, &la, &lb, &pot.f, &pot.g, cfg.epsilon);
    let mass: f64 = pi.iter().sum();
    let value = dot(&a.weights, &pot.f) + dot(&b.weights, &pot.g) - cfg.epsilon * (mass - 1.0);
    Ok((value, pi))
}

/// Canonicalize both operands and order the pair; run `f` on canonical
/// operands and map gradients back to the caller's atom order.
fn symmetric_call<F>(a: &DiscreteMeasure, b: &DiscreteMeasure, cfg: &SinkhornConfig, f: F) -> Result<ValueAndGrad, OtError>
where
    F: Fn(&DiscreteMeasure, &DiscreteMeasure, &SinkhornConfig) -> Result<ValueAndGrad, OtError>,
{
    cfg.validate()?;
    if a.dim != b.dim {
        return Err(OtError::InvalidArgument(format!("point dimensions differ: {} vs {}", a.dim, b.dim)));
    }
    let (ca, pa) = a.canonical();
    let (cb, pb) = b.canonical();
    let swapped = ca.total_cmp(&cb).is_gt();
    let out = if swapped { f(&cb, &ca, cfg)? } else { f(&ca, &cb, cfg)? };
    let (ga, gb) = if swapped { (out.grad_b, out.grad_a) } else { (out.grad_a, out.grad_b) };
    Ok(ValueAndGrad {
        value: out.value,
        grad_a: unpermute(&ga, &pa, a.dim),
        grad_b: unpermute(&gb, &pb, b.dim),
    })
}

/// Entropy-regularized transport cost, evaluated at the converged potentials.
pub fn ot_eps(a: &DiscreteMeasure, b: &DiscreteMeasure, cfg: &SinkhornConfig) -> Result<f64, OtError> {
    Ok(ot_eps_with_grad(a, b, cfg)?.value)
}

/// [`ot_eps`] with envelope-theorem gradients.
pub fn ot_eps_with_grad(a: &DiscreteMeasure, b: &DiscreteMeasure, cfg: &SinkhornConfig) -> Result<ValueAndGrad, OtError> {
    cfg.validate()?;
    let (ca, pa) = a.canonical();
    let (cb, pb) = b.canonical();
    let (value, pi) = cross_transport(&ca, &cb, cfg)?;
    let sens = CostSensitivity {
        ab: pi,
        aa: None,
        bb: None,
    };
    let (ga, gb) = position_grads(&ca, &cb, &sens);
    Ok(ValueAndGrad {
        value,
        grad_a: unpermute(&ga, &pa, a.dim),
        grad_b: unpermute(&gb, &pb, b.dim),
    })
}

/// `F_ε(a) = −½ OT_ε(a, a)`.
pub fn sinkhorn_negentropy(a: &DiscreteMeasure, cfg: &SinkhornConfig) -> Result<f64, OtError> {
    cfg.validate()?;
    let (ca, _) = a.canonical();
    Ok(-0.5 * self_transport(&ca, cfg)?.value)
}

/// Debiased Sinkhorn divergence `OT_ε(a,b) − ½OT_ε(a,a) − ½OT_ε(b,b)`.
pub fn sinkhorn_divergence(a: &DiscreteMeasure, b: &DiscreteMeasure, cfg: &SinkhornConfig) -> Result<f64, OtError> {
    Ok(sinkhorn_divergence_with_grad(a, b, cfg)?.value)
}

pub fn sinkhorn_divergence_with_grad(
    a: &DiscreteMeasure,
    b: &DiscreteMeasure,
    cfg: &SinkhornConfig,
) -> Result<ValueAndGrad, OtError> {
    symmetric_call(a, b, cfg, |a, b, cfg| {
        let (ab, pi_ab) = cross_transport(a, b, cfg)?;
        let sa = self_transport(a, cfg)?;
        let sb = self_transport(b, cfg)?;
        let value = ab - 0.5 * (sa.value + sb.value);
        let sens = CostSensitivity {
            ab: pi_ab,
            aa: Some(sa.plan.iter().map(|p| -0.5 * p).collect()),
            bb: Some(sb.plan.iter().map(|p| -0.5 * p).collect()),
        };
        let (grad_a, grad_b) = position_grads(a, b, &sens);
        Ok(ValueAndGrad { value, grad_a, grad_b })
    })
}

/// Row-wise softmax weights of `log w_j + (pot_j − C_ij)/ε` and the
/// matching softmin values.
fn softmin_weights_rows(eps: f64, c: &CostMatrix, log_w: &[f64], pot: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut w = vec![0.0; c.data.len()];
    let mut vals = vec![0.0; c.rows];
    for i in 0..c.rows {
        let logits: Vec<f64> = (0..c.cols).map(|j| log_w[j] + (pot[j] - c.get(i, j)) / eps).collect();
        let l = lse(logits.iter().copied());
        vals[i] = -eps * l;
        for j in 0..c.cols {
            w[i * c.cols + j] = (logits[j] - l).exp();
        }
    }
    (w, vals)
}

fn transpose(c: &CostMatrix) -> CostMatrix {
    let mut data = vec![0.0; c.data.len()];
    for i in 0..c.rows {
        for j in 0..c.cols {
            data[j * c.rows + i] = c.get(i, j);
        }
    }
    CostMatrix {
        rows: c.cols,
        cols: c.rows,
        data,
    }
}

/// One operand's contribution to the Hausdorff divergence.
struct HausdorffSide {
    /// `Σ wᵢ f@self(xᵢ)` with the symmetric potential re-extended once.
    own: f64,
    /// Self potential extended onto the other operand's atoms.
    extended_other: Vec<f64>,
    /// `∂ extended_other_j / ∂ C_ij` as column-stochastic weights
    /// (rows: this operand, columns: other operand).
    ext_w: Vec<f64>,
    self_w: Vec<f64>,
}

fn hausdorff_side(
    m: &DiscreteMeasure,
    c_self: &CostMatrix,
    c_to_other: &CostMatrix,
    cfg: &SinkhornConfig,
) -> Result<HausdorffSide, OtError> {
    let lw = m.log_weights();
    let (f, _) = solve_symmetric(c_self, &lw, cfg)?;
    let (self_w, own_vals) = softmin_weights_rows(cfg.epsilon, c_self, &lw, &f);
    // Extension: softmin over this operand's atoms for every other atom.
    let (wt, extended_other) = softmin_weights_rows(cfg.epsilon, &transpose(c_to_other), &lw, &f);
    let (rows, cols) = (c_to_other.rows, c_to_other.cols);
    let mut ext_w = vec![0.0; rows * cols];
    for j in 0..cols {
        for i in 0..rows {
            ext_w[i * cols + j] = wt[j * rows + i];
        }
    }
    Ok(HausdorffSide {
        own: dot(&m.weights, &own_vals),
        extended_other,
        ext_w,
        self_w,
    })
}

/// Sensitivity of the Hausdorff value to this operand's self-cost matrix,
/// including the implicit dependence of its symmetric potential.
///
/// `u` is the partial derivative with respect to the potential; the
/// fixed point `f = T(f, C)` gives `λ = (I + W)⁻ᵀ u` and contributes `λᵢ Wᵢₖ`.
fn hausdorff_self_sensitivity(side: &HausdorffSide, m: &DiscreteMeasure, other: &DiscreteMeasure) -> Vec<f64> {
    let n = m.len();
    let mo = other.len();
    let w = &side.self_w;
    let mut u = DVector::zeros(n);
    for k in 0..n {
        let own: f64 = (0..n).map(|i| m.weights[i] * w[i * n + k]).sum();
        let ext: f64 = (0..mo).map(|j| other.weights[j] * side.ext_w[k * mo + j]).sum();
        u[k] = 0.5 * (own - ext);
    }
    let mut sys = DMatrix::identity(n, n);
    for i in 0..n {
        for k in 0..n {
            // Transposed system (I + W)ᵀ.
            sys[(k, i)] += w[i * n + k];
        }
    }
    let lambda = sys.lu().solve(&u).unwrap_or_else(|| DVector::zeros(n));
    let mut sens = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            sens[i * n + k] = w[i * n + k] * (lambda[i] - 0.5 * m.weights[i]);
        }
    }
    sens
}

/// ε-Hausdorff divergence: the symmetric Bregman divergence of the Sinkhorn
/// negentropy, `½[⟨a, f_b@a − f_a@a⟩ + ⟨b, f_a@b − f_b@b⟩]` with `f_a`, `f_b` the
/// symmetric self-transport potentials.
pub fn hausdorff_divergence(a: &DiscreteMeasure, b: &DiscreteMeasure, cfg: &SinkhornConfig) -> Result<f64, OtError> {
    Ok(hausdorff_divergence_with_grad(a, b, cfg)?.value)
}

pub fn hausdorff_divergence_with_grad(
    a: &DiscreteMeasure,
    b: &DiscreteMeasure,
    cfg: &SinkhornConfig,
) -> Result<ValueAndGrad, OtError> {
    symmetric_call(a, b, cfg, |a, b, cfg| {
        let c_ab = cost_matrix(a, b)?;
        let c_ba = transpose(&c_ab);
        let c_aa = cost_matrix(a, a)?;
        let c_bb = cost_matrix(b, b)?;
        let sa = hausdorff_side(a, &c_aa, &c_ab, cfg)?;
        let sb = hausdorff_side(b, &c_bb, &c_ba, cfg)?;
        // sb.extended_other = f_b@a, sa.extended_other = f_a@b.
        let value = 0.5 * ((dot(&a.weights, &sb.extended_other) - sa.own) + (dot(&b.weights, &sa.extended_other) - sb.own));

        let (n, m) = (a.len(), b.len());
        let mut ab = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                // f_a@b_j depends on C_ij through column-stochastic weights of a;
                // f_b@a_i through those of b.
                ab[i * m + j] = 0.5 * (b.weights[j] * sa.ext_w[i * m + j] + a.weights[i] * sb.ext_w[j * n + i]);
            }
        }
        let sens = CostSensitivity {
            ab,
            aa: Some(hausdorff_self_sensitivity(&sa, a, b)),
            bb: Some(hausdorff_self_sensitivity(&sb, b, a)),
        };
        let (grad_a, grad_b) = position_grads(a, b, &sens);
        Ok(ValueAndGrad {
            value,
            grad_a,
            grad_b,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut impl Rng, n: usize, d: usize) -> DiscreteMeasure {
        DiscreteMeasure::uniform((0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(), d).unwrap()
    }

    fn weighted_cloud(rng: &mut impl Rng, n: usize, d: usize) -> DiscreteMeasure {
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
        let s: f64 = w.iter().sum();
        DiscreteMeasure::new(
            (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            d,
            w.iter().map(|v| v / s).collect(),
        )
        .unwrap()
    }

    #[test]
    fn measure_validation() {
        assert!(DiscreteMeasure::new(vec![0.0, 1.0], 2, vec![0.5]).is_err());
        assert!(DiscreteMeasure::new(vec![0.0, 1.0], 1, vec![0.5, 0.4]).is_err());
        assert!(DiscreteMeasure::new(vec![f64::NAN], 1, vec![1.0]).is_err());
        assert!(DiscreteMeasure::uniform(vec![], 2).is_err());
    }

    #[test]
    fn cost_matrix_examples() {
        let z = DiscreteMeasure::dirac(vec![0.0, 0.0]).unwrap();
        assert_eq!(cost_matrix(&z, &z).unwrap().data, vec![0.0]);
        let p = DiscreteMeasure::dirac(vec![3.0, 4.0]).unwrap();
        assert_eq!(cost_matrix(&z, &p).unwrap().data, vec![12.5]);
        let q = DiscreteMeasure::dirac(vec![1.0]).unwrap();
        assert!(cost_matrix(&z, &q).is_err());
    }

    #[test]
    fn cost_matrix_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = cloud(&mut rng, 4, 3);
        let b = cloud(&mut rng, 5, 3);
        let c = cost_matrix(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += (a.point(i)[k] - b.point(j)[k]).powi(2);
                }
                assert!((c.get(i, j) - 0.5 * s).abs() < 1e-15);
            }
        }
        let cs = cost_matrix(&a, &a).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(cs.get(i, j), cs.get(j, i));
            }
        }
    }

    #[test]
    fn dirac_potentials() {
        let cfg = SinkhornConfig::default();
        let x = DiscreteMeasure::dirac(vec![1.0, -2.0]).unwrap();
        let p = sinkhorn_potentials(&x, &x, &cfg).unwrap();
        assert!(p.f[0].abs() < 1e-12 && p.g[0].abs() < 1e-12);
        let y = DiscreteMeasure::dirac(vec![0.5, 3.0]).unwrap();
        let p = sinkhorn_potentials(&x, &y, &cfg).unwrap();
        let c = 0.5 * (0.25 + 25.0);
        assert!((p.f[0] + p.g[0] - c).abs() < 1e-9);
        assert!((ot_eps(&x, &y, &cfg).unwrap() - c).abs() < 1e-9);
        assert_eq!(ot_eps(&x, &x, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn plan_marginals_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = weighted_cloud(&mut rng, 4, 2);
        let b = weighted_cloud(&mut rng, 3, 2);
        let cfg = SinkhornConfig {
            epsilon: 0.05,
            tol: 1e-12,
            ..Default::default()
        };
        let pi = transport_plan(&a, &b, &cfg).unwrap();
        for i in 0..4 {
            let row: f64 = (0..3).map(|j| pi.get(i, j)).sum();
            assert!((row - a.weights()[i]).abs() < 1e-9);
        }
        for j in 0..3 {
            let col: f64 = (0..4).map(|i| pi.get(i, j)).sum();
            assert!((col - b.weights()[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn negentropy_examples() {
        let cfg = SinkhornConfig {
            epsilon: 0.1,
            tol: 1e-12,
            ..Default::default()
        };
        let d = DiscreteMeasure::dirac(vec![0.3, 0.1]).unwrap();
        assert_eq!(sinkhorn_negentropy(&d, &cfg).unwrap(), 0.0);
        let coincident = DiscreteMeasure::uniform(vec![1.0, 1.0, 1.0, 1.0], 2).unwrap();
        assert!(sinkhorn_negentropy(&coincident, &cfg).unwrap().abs() < 1e-12);

        // Two atoms at distance 1: compare with the generic two-sided solver.
        let two = DiscreteMeasure::uniform(vec![0.0, 0.0, 1.0, 0.0], 2).unwrap();
        let c = cost_matrix(&two, &two).unwrap();
        let lw = two.log_weights();
        let pot = solve_two_sided(&c, &lw, &lw, &cfg).unwrap();
        let pi = plan(&c, &lw, &lw, &pot.f, &pot.g, cfg.epsilon);
        let generic = dot(two.weights(), &pot.f) + dot(two.weights(), &pot.g) - cfg.epsilon * (pi.iter().sum::<f64>() - 1.0);
        let f = sinkhorn_negentropy(&two, &cfg).unwrap();
        assert!((f + 0.5 * generic).abs() < 1e-10, "{f} vs {}", -0.5 * generic);
    }

    #[test]
    fn divergences_vanish_on_identical_measures() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = SinkhornConfig::default();
        for _ in 0..10 {
            let a = weighted_cloud(&mut rng, 5, 3);
            assert_eq!(sinkhorn_divergence(&a, &a, &cfg).unwrap(), 0.0);
            assert_eq!(hausdorff_divergence(&a, &a, &cfg).unwrap(), 0.0);
        }
    }

    #[test]
    fn dirac_closed_forms() {
        let cfg = SinkhornConfig::default();
        let x = DiscreteMeasure::dirac(vec![0.0, 0.0]).unwrap();
        let y = DiscreteMeasure::dirac(vec![3.0, 4.0]).unwrap();
        assert!((sinkhorn_divergence(&x, &y, &cfg).unwrap() - 12.5).abs() < 1e-9);
        assert!((hausdorff_divergence(&x, &y, &cfg).unwrap() - 12.5).abs() < 1e-9);
    }

    #[test]
    fn symmetry_and_nonnegativity_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let a = cloud(&mut rng, 5, 2);
            let b = cloud(&mut rng, 5, 2);
            let cfg = SinkhornConfig::for_measures(&a, &b, DEFAULT_BLUR);
            let (s_ab, s_ba) = (sinkhorn_divergence(&a, &b, &cfg).unwrap(), sinkhorn_divergence(&b, &a, &cfg).unwrap());
            let (h_ab, h_ba) = (hausdorff_divergence(&a, &b, &cfg).unwrap(), hausdorff_divergence(&b, &a, &cfg).unwrap());
            assert_eq!(s_ab, s_ba);
            assert_eq!(h_ab, h_ba);
            assert!(s_ab >= -1e-9 && h_ab >= -1e-9, "{s_ab} {h_ab}");
        }
    }

    #[test]
    fn relabelling_atoms_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = weighted_cloud(&mut rng, 5, 2);
        let b = weighted_cloud(&mut rng, 4, 2);
        let perm = [3, 0, 4, 1, 2];
        let mut pts = vec![];
        for &i in &perm {
            pts.extend_from_slice(a.point(i));
        }
        let a2 = DiscreteMeasure::new(pts, 2, perm.iter().map(|&i| a.weights()[i]).collect()).unwrap();
        let cfg = SinkhornConfig::default();
        let s1 = sinkhorn_divergence_with_grad(&a, &b, &cfg).unwrap();
        let s2 = sinkhorn_divergence_with_grad(&a2, &b, &cfg).unwrap();
        assert_eq!(s1.value, s2.value);
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(&s2.grad_a[k * 2..k * 2 + 2], &s1.grad_a[i * 2..i * 2 + 2]);
        }
        assert_eq!(hausdorff_divergence(&a, &b, &cfg).unwrap(), hausdorff_divergence(&a2, &b, &cfg).unwrap());
        assert_eq!(ot_eps(&a, &b, &cfg).unwrap(), ot_eps(&a2, &b, &cfg).unwrap());
    }

    fn fd_check(div: fn(&DiscreteMeasure, &DiscreteMeasure, &SinkhornConfig) -> Result<ValueAndGrad, OtError>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = weighted_cloud(&mut rng, 4, 3);
        let b = weighted_cloud(&mut rng, 5, 3);
        let cfg = SinkhornConfig {
            epsilon: 0.1,
            tol: 1e-13,
            max_iters: 5000,
            ..Default::default()
        };
        let vg = div(&a, &b, &cfg).unwrap();
        let h = 1e-5;
        let shift = |m: &DiscreteMeasure, k: usize, d: f64| {
            let mut p = m.points().to_vec();
            p[k] += d;
            DiscreteMeasure::new(p, m.dim(), m.weights().to_vec()).unwrap()
        };
        for k in 0..a.points().len() {
            let num = (div(&shift(&a, k, h), &b, &cfg).unwrap().value - div(&shift(&a, k, -h), &b, &cfg).unwrap().value) / (2.0 * h);
            let err = (vg.grad_a[k] - num).abs() / num.abs().max(1.0);
            assert!(err < 1e-6, "grad_a[{k}]: {} vs {num}", vg.grad_a[k]);
        }
        for k in 0..b.points().len() {
            let num = (div(&a, &shift(&b, k, h), &cfg).unwrap().value - div(&a, &shift(&b, k, -h), &cfg).unwrap().value) / (2.0 * h);
            let err = (vg.grad_b[k] - num).abs() / num.abs().max(1.0);
            assert!(err < 1e-6, "grad_b[{k}]: {} vs {num}", vg.grad_b[k]);
        }
    }

    #[test]
    fn sinkhorn_gradient_matches_finite_differences() {
        fd_check(sinkhorn_divergence_with_grad, 11);
    }

    #[test]
    fn hausdorff_gradient_matches_finite_differences() {
        fd_check(hausdorff_divergence_with_grad, 12);
    }

    #[test]
    fn ot_gradient_matches_finite_differences() {
        fd_check(ot_eps_with_grad, 13);
    }

    #[test]
    fn quadratic_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = cloud(&mut rng, 4, 2);
        let b = cloud(&mut rng, 3, 2);
        let cfg = SinkhornConfig::for_measures(&a, &b, DEFAULT_BLUR);
        let lambda: f64 = 3.0;
        let scale = |m: &DiscreteMeasure| {
            DiscreteMeasure::new(m.points().iter().map(|v| v * lambda).collect(), m.dim(), m.weights().to_vec()).unwrap()
        };
        let scaled_cfg = SinkhornConfig {
            epsilon: cfg.epsilon * lambda * lambda,
            ..cfg
        };
        let s = sinkhorn_divergence(&a, &b, &cfg).unwrap();
        let s2 = sinkhorn_divergence(&scale(&a), &scale(&b), &scaled_cfg).unwrap();
        assert!((s2 - lambda * lambda * s).abs() <= 1e-9 * s2.abs().max(1.0), "{s2} vs {}", lambda * lambda * s);
        let h = hausdorff_divergence(&a, &b, &cfg).unwrap();
        let h2 = hausdorff_divergence(&scale(&a), &scale(&b), &scaled_cfg).unwrap();
        assert!((h2 - lambda * lambda * h).abs() <= 1e-9 * h2.abs().max(1.0));
    }

    #[test]
    fn non_convergence_is_reported() {
        let a = DiscreteMeasure::uniform(vec![0.0, 1.0, 2.0], 1).unwrap();
        let b = DiscreteMeasure::uniform(vec![0.5, 1.7], 1).unwrap();
        let cfg = SinkhornConfig {
            epsilon: 1e-4,
            max_iters: 1,
            tol: 1e-15,
            scaling: 0.5,
        };
        assert!(matches!(ot_eps(&a, &b, &cfg), Err(OtError::Convergence { .. })));
    }

    #[test]
    fn config_validation() {
        let bad = SinkhornConfig {
            scaling: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SinkhornConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    /// Exact OT between equal-size uniform clouds: the best assignment.
    fn assignment_ot(c: &CostMatrix) -> f64 {
        fn rec(c: &CostMatrix, i: usize, used: &mut [bool], acc: f64, best: &mut f64) {
            if i == c.rows {
                *best = best.min(acc);
                return;
            }
            for j in 0..c.cols {
                if !used[j] {
                    used[j] = true;
                    rec(c, i + 1, used, acc + c.get(i, j), best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(c, 0, &mut vec![false; c.cols], 0.0, &mut best);
        best / c.rows as f64
    }

    fn unit_cloud(rng: &mut impl Rng, n: usize, shift_x: f64) -> DiscreteMeasure {
        let pts = (0..2 * n).map(|k| rng.random_range(0.0..1.0) + if k % 2 == 0 { shift_x } else { 0.0 }).collect();
        DiscreteMeasure::uniform(pts, 2).unwrap()
    }

    #[test]
    fn plan_cost_matches_assignment_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for n in [3, 4] {
            for _ in 0..50 {
                let a = unit_cloud(&mut rng, n, 0.0);
                let b = unit_cloud(&mut rng, n, 0.0);
                let cfg = SinkhornConfig {
                    epsilon: 1e-3 * squared_diameter(&[&a, &b]),
                    ..Default::default()
                };
                let c = cost_matrix(&a, &b).unwrap();
                let pi = transport_plan(&a, &b, &cfg).unwrap();
                let cost: f64 = pi.data.iter().zip(&c.data).map(|(p, c)| p * c).sum();
                let exact = assignment_ot(&c);
                assert!((cost - exact).abs() <= 0.02 * exact, "{cost} vs {exact}");
            }
        }
    }

    #[test]
    fn ot_value_matches_assignment_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for n in [3, 4] {
            for _ in 0..50 {
                let a = unit_cloud(&mut rng, n, 0.0);
                let b = unit_cloud(&mut rng, n, 1.5);
                let cfg = SinkhornConfig {
                    epsilon: 1e-3 * squared_diameter(&[&a, &b]),
                    ..Default::default()
                };
                let exact = assignment_ot(&cost_matrix(&a, &b).unwrap());
                let v = ot_eps(&a, &b, &cfg).unwrap();
                assert!((v - exact).abs() <= 0.02 * exact, "{v} vs {exact}");
                let s = sinkhorn_divergence(&a, &b, &cfg).unwrap();
                assert!((s - exact).abs() <= 0.03 * exact, "{s} vs {exact}");
            }
        }
    }

    #[test]
    fn ot_value_decreases_toward_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let a = unit_cloud(&mut rng, 4, 0.0);
        let b = unit_cloud(&mut rng, 4, 0.0);
        let exact = assignment_ot(&cost_matrix(&a, &b).unwrap());
        let d2 = squared_diameter(&[&a, &b]);
        let mut prev = f64::INFINITY;
        for rel in [1e-1, 3e-2, 1e-2, 3e-3, 1e-3] {
            let cfg = SinkhornConfig {
                epsilon: rel * d2,
                ..Default::default()
            };
            let v = ot_eps(&a, &b, &cfg).unwrap();
            assert!(v < prev && v >= exact - 1e-9, "{rel}: {v} (prev {prev}, exact {exact})");
            prev = v;
        }
        assert!(prev - exact < 0.01 * d2);
    }
}
