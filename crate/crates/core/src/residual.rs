//! Residual models: L2-regularized logistic regressions on an explicit
//! polynomial feature expansion, estimating the true event rate from the
//! audited model's score and the subject's metadata.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{design_matrix, AuditDataset, ColumnMeta, ColumnOrigin, FeatureBlocks, FeatureMatrix, FitStats};
use crate::error::{AuditError, Result};
use crate::linalg::{axpy, cholesky, cholesky_solve, dot, gram, norm2};

/// Default cap on the width of a polynomial expansion.
pub const DEFAULT_MAX_WIDTH: usize = 20_000;

/// Above this many parameters the solver switches from Newton steps with an
/// explicit Hessian to L-BFGS.
const NEWTON_MAX_DIM: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualModelConfig {
    /// Total degree of the polynomial expansion, 1..=8.
    pub degree: usize,
    /// L2 penalty on the non-intercept weights.
    pub l2_strength: f64,
    pub max_iter: usize,
    /// Gradient-norm tolerance.
    pub tol: f64,
    /// Relative weight of samples with outcome 0.
    pub zero_label_weight: f64,
}

impl Default for ResidualModelConfig {
    fn default() -> Self {
        ResidualModelConfig {
            degree: 2,
            l2_strength: 1e-3,
            max_iter: 2000,
            tol: 1e-6,
            zero_label_weight: 1.0,
        }
    }
}

impl ResidualModelConfig {
    pub fn new(degree: usize, l2_strength: f64) -> Self {
        ResidualModelConfig {
            degree,
            l2_strength,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.degree) {
            return Err(AuditError::InvalidConfig(format!(
                "degree {} outside 1..=8",
                self.degree
            )));
        }
        if !(self.l2_strength > 0.0 && self.l2_strength.is_finite()) {
            return Err(AuditError::InvalidConfig(format!(
                "l2_strength {} must be positive",
                self.l2_strength
            )));
        }
        if self.max_iter == 0 || !(self.tol > 0.0) {
            return Err(AuditError::InvalidConfig("max_iter and tol must be positive".into()));
        }
        if !(self.zero_label_weight > 0.0 && self.zero_label_weight.is_finite()) {
            return Err(AuditError::InvalidConfig("zero_label_weight must be positive".into()));
        }
        Ok(())
    }
}

/// The eight-member grid: λ ∈ {1e-3, 1e-2} × degree ∈ {2, 3, 4, 5}.
pub fn default_grid() -> Vec<ResidualModelConfig> {
    [1e-3, 1e-2]
        .into_iter()
        .flat_map(|l2| (2..=5).map(move |d| ResidualModelConfig::new(d, l2)))
        .collect()
}

/// `C(p + d, d) − 1`, or `None` on overflow.
pub fn expanded_width(base: usize, degree: usize) -> Option<usize> {
    let mut c: usize = 1;
    for i in 1..=degree {
        c = c.checked_mul(base + i)? / i;
    }
    Some(c - 1)
}

fn monomial_name(factors: &[usize], base: &[ColumnMeta]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < factors.len() {
        let mut j = i;
        while j < factors.len() && factors[j] == factors[i] {
            j += 1;
        }
        let name = &base[factors[i]].name;
        parts.push(if j - i == 1 {
            name.clone()
        } else {
            format!("{name}^{}", j - i)
        });
        i = j;
    }
    parts.join("*")
}

/// All monomials of total degree 1..=`degree` over the columns of `fm`, in
/// graded lexicographic order. Because of that order the expansion of a lower
/// degree is a column prefix of a higher one.
pub fn polynomial_expand(fm: &FeatureMatrix, degree: usize) -> Result<FeatureMatrix> {
    polynomial_expand_capped(fm, degree, DEFAULT_MAX_WIDTH)
}

pub fn polynomial_expand_capped(fm: &FeatureMatrix, degree: usize, cap: usize) -> Result<FeatureMatrix> {
    if degree == 0 {
        return Err(AuditError::InvalidConfig("degree must be at least 1".into()));
    }
    let p = fm.n_cols();
    let n = fm.n_rows();
    let width = expanded_width(p, degree).unwrap_or(usize::MAX);
    if width > cap {
        return Err(AuditError::DimensionBlowup { width, cap });
    }
    let base = fm.columns();
    let mut meta: Vec<ColumnMeta> = Vec::with_capacity(width);
    let mut data: Vec<f64> = Vec::with_capacity(width * n);
    let mut index: HashMap<Vec<usize>, usize> = HashMap::with_capacity(width);
    let mut previous: Vec<Vec<usize>> = Vec::new();

    for k in 1..=degree {
        let current: Vec<Vec<usize>> = if k == 1 {
            (0..p).map(|j| vec![j]).collect()
        } else {
            previous
                .iter()
                .flat_map(|f| {
                    let last = *f.last().unwrap();
                    (last..p).map(move |j| {
                        let mut g = f.clone();
                        g.push(j);
                        g
                    })
                })
                .collect()
        };
        for factors in &current {
            let last = *factors.last().unwrap();
            let start = data.len();
            if k == 1 {
                data.extend_from_slice(fm.column(last));
            } else {
                let parent = index[&factors[..k - 1]];
                data.extend_from_within(parent * n..(parent + 1) * n);
                for (v, b) in data[start..].iter_mut().zip(fm.column(last)) {
                    *v *= b;
                }
            }
            let mut groups: Vec<&str> = factors.iter().map(|&j| base[j].group.as_str()).collect();
            groups.dedup();
            groups.sort_unstable();
            groups.dedup();
            index.insert(factors.clone(), meta.len());
            meta.push(ColumnMeta {
                name: monomial_name(factors, base),
                origin: if k == 1 {
                    base[last].origin.clone()
                } else {
                    ColumnOrigin::Monomial {
                        factors: factors.clone(),
                    }
                },
                group: groups.join("*"),
                constant: factors.iter().any(|&j| base[j].constant),
            });
        }
        previous = current;
    }
    debug_assert_eq!(meta.len(), width);
    Ok(FeatureMatrix::new(n, meta, data, fm.stats().clone()))
}

/// Column bookkeeping of a fitted residual model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    /// Base (unexpanded) design-matrix columns, in order.
    pub base_columns: Vec<String>,
    /// Expanded column names, aligned with `weights[1..]`.
    pub expanded_columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualModel {
    pub config: ResidualModelConfig,
    pub fit_stats: FitStats,
    pub feature_meta: FeatureMeta,
    /// Intercept first, then one weight per expanded column.
    pub weights: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl ResidualModel {
    pub fn intercept(&self) -> f64 {
        self.weights[0]
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.weights[1..]
    }

    fn check_schema(&self, fm: &FeatureMatrix) -> Result<()> {
        let names = fm.column_names();
        if names != self.feature_meta.base_columns {
            return Err(AuditError::SchemaMismatch(format!(
                "model expects columns {:?}, got {:?}",
                self.feature_meta.base_columns, names
            )));
        }
        Ok(())
    }

    /// Predicted event rates on an already expanded view (first `width` columns).
    fn predict_expanded(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut eta = vec![self.intercept(); n];
        for (j, &w) in self.coefficients().iter().enumerate() {
            if w != 0.0 {
                axpy(w, &x[j * n..(j + 1) * n], &mut eta);
            }
        }
        eta.into_iter().map(event_rate).collect()
    }
}

/// Probabilities are kept strictly inside (0, 1).
fn event_rate(eta: f64) -> f64 {
    sigmoid(eta).clamp(1e-15, 1.0 - 1e-15)
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn softplus(eta: f64) -> f64 {
    eta.max(0.0) + (-eta.abs()).exp().ln_1p()
}

/// Weighted logistic objective on a column-major design (no intercept column).
struct Problem<'a> {
    x: &'a [f64],
    n: usize,
    p: usize,
    y: Vec<f64>,
    /// Sample weights normalized to sum to one.
    s: Vec<f64>,
    l2: f64,
}

impl Problem<'_> {
    fn linear(&self, w: &[f64]) -> Vec<f64> {
        let mut eta = vec![w[0]; self.n];
        for j in 0..self.p {
            if w[j + 1] != 0.0 {
                axpy(w[j + 1], &self.x[j * self.n..(j + 1) * self.n], &mut eta);
            }
        }
        eta
    }

    fn objective_at(&self, eta: &[f64], w: &[f64]) -> f64 {
        let loss: f64 = eta
            .iter()
            .zip(&self.y)
            .zip(&self.s)
            .map(|((&e, &y), &s)| s * (softplus(e) - y * e))
            .sum();
        loss + 0.5 * self.l2 * dot(&w[1..], &w[1..])
    }

    fn objective(&self, w: &[f64]) -> f64 {
        self.objective_at(&self.linear(w), w)
    }

    /// Gradient and the residual vector `s·(μ − y)`.
    fn gradient_at(&self, eta: &[f64], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let r: Vec<f64> = eta
            .iter()
            .zip(&self.y)
            .zip(&self.s)
            .map(|((&e, &y), &s)| s * (sigmoid(e) - y))
            .collect();
        let mut g = Vec::with_capacity(self.p + 1);
        g.push(r.iter().sum());
        for j in 0..self.p {
            g.push(dot(&r, &self.x[j * self.n..(j + 1) * self.n]) + self.l2 * w[j + 1]);
        }
        (g, r)
    }

    fn hessian_at(&self, eta: &[f64]) -> Vec<f64> {
        let n = self.n;
        let dim = self.p + 1;
        let root: Vec<f64> = eta
            .iter()
            .zip(&self.s)
            .map(|(&e, &s)| {
                let mu = sigmoid(e);
                (s * mu * (1.0 - mu)).sqrt()
            })
            .collect();
        let mut z = Vec::with_capacity(n * dim);
        z.extend_from_slice(&root);
        for j in 0..self.p {
            z.extend(self.x[j * n..(j + 1) * n].iter().zip(&root).map(|(x, r)| x * r));
        }
        let mut h = gram(&z, n, dim);
        for j in 1..dim {
            h[j * dim + j] += self.l2;
        }
        h
    }
}

struct Solution {
    weights: Vec<f64>,
    converged: bool,
    iterations: usize,
}

fn solve_newton(pr: &Problem, cfg: &ResidualModelConfig) -> Solution {
    let dim = pr.p + 1;
    let mut w = vec![0.0; dim];
    let mut eta = pr.linear(&w);
    let mut obj = pr.objective_at(&eta, &w);
    for iter in 0..cfg.max_iter {
        let (g, _) = pr.gradient_at(&eta, &w);
        if norm2(&g) < cfg.tol {
            return Solution {
                weights: w,
                converged: true,
                iterations: iter,
            };
        }
        let h = pr.hessian_at(&eta);
        let max_diag = (0..dim).map(|j| h[j * dim + j]).fold(0.0f64, f64::max);
        let mut jitter = 0.0;
        let step = loop {
            let mut l = h.clone();
            if jitter > 0.0 {
                for j in 0..dim {
                    l[j * dim + j] += jitter;
                }
            }
            if cholesky(&mut l, dim) {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                break cholesky_solve(&l, dim, &neg);
            }
            jitter = if jitter == 0.0 {
                1e-12 * (1.0 + max_diag)
            } else {
                jitter * 10.0
            };
        };
        let slope = dot(&g, &step);
        let xd = pr.linear(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let w_try: Vec<f64> = w.iter().zip(&step).map(|(a, d)| a + t * d).collect();
            let eta_try: Vec<f64> = eta.iter().zip(&xd).map(|(e, d)| e + t * d).collect();
            let obj_try = pr.objective_at(&eta_try, &w_try);
            if obj_try <= obj + 1e-4 * t * slope {
                w = w_try;
                eta = eta_try;
                obj = obj_try;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // no further decrease is representable
            let (g, _) = pr.gradient_at(&eta, &w);
            return Solution {
                converged: norm2(&g) < cfg.tol,
                weights: w,
                iterations: iter + 1,
            };
        }
    }
    let (g, _) = pr.gradient_at(&eta, &w);
    Solution {
        converged: norm2(&g) < cfg.tol,
        weights: w,
        iterations: cfg.max_iter,
    }
}

fn solve_lbfgs(pr: &Problem, cfg: &ResidualModelConfig) -> Solution {
    const MEMORY: usize = 10;
    let dim = pr.p + 1;
    let mut w = vec![0.0; dim];
    let mut eta = pr.linear(&w);
    let mut obj = pr.objective_at(&eta, &w);
    let (mut g, _) = pr.gradient_at(&eta, &w);
    let mut hist: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::with_capacity(MEMORY);
    for iter in 0..cfg.max_iter {
        if norm2(&g) < cfg.tol {
            return Solution {
                weights: w,
                converged: true,
                iterations: iter,
            };
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            axpy(-a, y, &mut q);
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.last() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            axpy(a - b, s, &mut q);
        }
        let mut dir: Vec<f64> = q.into_iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            hist.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let xd = pr.linear(&dir);
        let mut t = if hist.is_empty() { 1.0 / norm2(&g).max(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let w_try: Vec<f64> = w.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
            let eta_try: Vec<f64> = eta.iter().zip(&xd).map(|(e, d)| e + t * d).collect();
            let obj_try = pr.objective_at(&eta_try, &w_try);
            if obj_try <= obj + 1e-4 * t * slope {
                accepted = Some((w_try, eta_try, obj_try));
                break;
            }
            t *= 0.5;
        }
        let Some((w_new, eta_new, obj_new)) = accepted else {
            return Solution {
                converged: norm2(&g) < cfg.tol,
                weights: w,
                iterations: iter + 1,
            };
        };
        let (g_new, _) = pr.gradient_at(&eta_new, &w_new);
        let s: Vec<f64> = w_new.iter().zip(&w).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm2(&s) * norm2(&y) {
            if hist.len() == MEMORY {
                hist.remove(0);
            }
            hist.push((s, y, 1.0 / sy));
        }
        w = w_new;
        eta = eta_new;
        obj = obj_new;
        g = g_new;
    }
    Solution {
        converged: norm2(&g) < cfg.tol,
        weights: w,
        iterations: cfg.max_iter,
    }
}

fn check_target(outcomes: &[bool], n: usize) -> Result<()> {
    if outcomes.len() != n {
        return Err(AuditError::LengthMismatch(format!(
            "{} outcomes for {} feature rows",
            outcomes.len(),
            n
        )));
    }
    if n < 2 || outcomes.iter().all(|&y| y) || outcomes.iter().all(|&y| !y) {
        return Err(AuditError::SingleClassTarget);
    }
    Ok(())
}

fn check_finite(fm: &FeatureMatrix) -> Result<()> {
    for (j, meta) in fm.columns().iter().enumerate() {
        if fm.column(j).iter().any(|x| !x.is_finite()) {
            return Err(AuditError::NonFiniteFeature {
                column: meta.name.clone(),
            });
        }
    }
    Ok(())
}

/// Fits one residual model on the first `width` columns of an expanded matrix.
fn fit_prefix(
    base: &FeatureMatrix,
    expanded: &FeatureMatrix,
    outcomes: &[bool],
    cfg: &ResidualModelConfig,
) -> Result<ResidualModel> {
    let width = expanded_width(base.n_cols(), cfg.degree).unwrap_or(usize::MAX);
    if width > expanded.n_cols() {
        return Err(AuditError::InvalidConfig(format!(
            "expansion holds {} columns, degree {} needs {width}",
            expanded.n_cols(),
            cfg.degree
        )));
    }
    let n = base.n_rows();
    let y: Vec<f64> = outcomes.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
    let raw: Vec<f64> = outcomes
        .iter()
        .map(|&o| if o { 1.0 } else { cfg.zero_label_weight })
        .collect();
    let total: f64 = raw.iter().sum();
    let problem = Problem {
        x: &expanded.data()[..n * width],
        n,
        p: width,
        y,
        s: raw.into_iter().map(|v| v / total).collect(),
        l2: cfg.l2_strength,
    };
    let sol = if width < NEWTON_MAX_DIM {
        solve_newton(&problem, cfg)
    } else {
        solve_lbfgs(&problem, cfg)
    };
    Ok(ResidualModel {
        config: *cfg,
        fit_stats: base.stats().clone(),
        feature_meta: FeatureMeta {
            base_columns: base.column_names(),
            expanded_columns: expanded.columns()[..width].iter().map(|c| c.name.clone()).collect(),
        },
        weights: sol.weights,
        converged: sol.converged,
        iterations: sol.iterations,
    })
}

/// Fits an L2-regularized logistic regression on the degree-`cfg.degree`
/// polynomial expansion of `features`.
///
/// Minimizes the weighted mean logistic loss plus `l2_strength·‖w‖²/2` with
/// an unpenalized intercept. Deterministic: no randomness is involved.
pub fn fit_klr(features: &FeatureMatrix, outcomes: &[bool], cfg: &ResidualModelConfig) -> Result<ResidualModel> {
    cfg.validate()?;
    check_target(outcomes, features.n_rows())?;
    check_finite(features)?;
    let expanded = polynomial_expand(features, cfg.degree)?;
    fit_prefix(features, &expanded, outcomes, cfg)
}

/// Predicted event rate per row of the base design matrix `fm`.
pub fn predict_event_rate(model: &ResidualModel, fm: &FeatureMatrix) -> Result<Vec<f64>> {
    model.check_schema(fm)?;
    let expanded = polynomial_expand(fm, model.config.degree)?;
    Ok(model.predict_expanded(expanded.data(), fm.n_rows()))
}

/// Objective value of `model`'s weights on the given data (for diagnostics
/// and tests).
pub fn objective(model: &ResidualModel, fm: &FeatureMatrix, outcomes: &[bool], weights: &[f64]) -> Result<f64> {
    model.check_schema(fm)?;
    let expanded = polynomial_expand(fm, model.config.degree)?;
    let pr = problem_for(&expanded, outcomes, &model.config);
    Ok(pr.objective(weights))
}

/// Gradient of the objective at `weights` (intercept first).
pub fn gradient(model: &ResidualModel, fm: &FeatureMatrix, outcomes: &[bool], weights: &[f64]) -> Result<Vec<f64>> {
    model.check_schema(fm)?;
    let expanded = polynomial_expand(fm, model.config.degree)?;
    let pr = problem_for(&expanded, outcomes, &model.config);
    let eta = pr.linear(weights);
    Ok(pr.gradient_at(&eta, weights).0)
}

fn problem_for<'a>(expanded: &'a FeatureMatrix, outcomes: &[bool], cfg: &ResidualModelConfig) -> Problem<'a> {
    let raw: Vec<f64> = outcomes
        .iter()
        .map(|&o| if o { 1.0 } else { cfg.zero_label_weight })
        .collect();
    let total: f64 = raw.iter().sum();
    Problem {
        x: expanded.data(),
        n: expanded.n_rows(),
        p: expanded.n_cols(),
        y: outcomes.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect(),
        s: raw.into_iter().map(|v| v / total).collect(),
        l2: cfg.l2_strength,
    }
}

/// K residual models fitted on one design matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualEnsemble {
    pub blocks: FeatureBlocks,
    pub members: Vec<ResidualModel>,
}

impl ResidualEnsemble {
    /// Fits every config on the same base design matrix. Members are fitted
    /// in parallel; each fit is sequential and deterministic.
    pub fn fit(
        features: &FeatureMatrix,
        outcomes: &[bool],
        configs: &[ResidualModelConfig],
        blocks: FeatureBlocks,
    ) -> Result<Self> {
        if configs.is_empty() {
            return Err(AuditError::InvalidConfig("empty residual model grid".into()));
        }
        for cfg in configs {
            cfg.validate()?;
        }
        check_target(outcomes, features.n_rows())?;
        check_finite(features)?;
        let max_degree = configs.iter().map(|c| c.degree).max().unwrap_or(1);
        let expanded = polynomial_expand(features, max_degree)?;
        let members = configs
            .par_iter()
            .map(|cfg| fit_prefix(features, &expanded, outcomes, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(ResidualEnsemble { blocks, members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn fit_stats(&self) -> &FitStats {
        &self.members[0].fit_stats
    }

    /// Base design matrix of `ds` in this ensemble's encoding.
    pub fn design(&self, ds: &AuditDataset) -> Result<FeatureMatrix> {
        design_matrix(ds, self.blocks, Some(self.fit_stats()))
    }

    /// Predicted event rates of every member on the base matrix `fm`; the
    /// expansion is computed once at the largest member degree.
    pub fn predict(&self, fm: &FeatureMatrix) -> Result<Vec<Vec<f64>>> {
        for m in &self.members {
            m.check_schema(fm)?;
        }
        let max_degree = self.members.iter().map(|m| m.config.degree).max().unwrap_or(1);
        let expanded = polynomial_expand(fm, max_degree)?;
        let n = fm.n_rows();
        let data = expanded.data();
        Ok(self
            .members
            .iter()
            .map(|m| m.predict_expanded(data, n))
            .collect())
    }
}

/// Fits the residual ensemble on `ds` (attributes, score, and optionally
/// embeddings).
pub fn fit_ensemble(
    ds: &AuditDataset,
    include_embeddings: bool,
    configs: &[ResidualModelConfig],
) -> Result<ResidualEnsemble> {
    let blocks = FeatureBlocks::residual_inputs(include_embeddings);
    let fm = design_matrix(ds, blocks, None)?;
    ResidualEnsemble::fit(&fm, &ds.outcomes(), configs, blocks)
}
