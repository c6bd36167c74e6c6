//! Weighted least squares with block fixed effects, CR1 cluster-robust
//! covariance and linear-hypothesis Wald tests.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use crate::linalg::{symmetrize, PivotedQr};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    pub name: String,
    pub values: Vec<f64>,
}

impl Regressor {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Regressor {
            name: name.into(),
            values,
        }
    }
}

/// A weighted regression problem: outcome, named regressors, optional
/// fixed-effect groups (expanded into dummies with the first group omitted),
/// weights and cluster ids. An intercept is always included.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSpec {
    pub outcome: String,
    pub y: Vec<f64>,
    pub regressors: Vec<Regressor>,
    pub fixed_effects: Option<Vec<usize>>,
    pub weights: Vec<f64>,
    pub clusters: Vec<usize>,
}

impl RegressionSpec {
    pub fn new(outcome: impl Into<String>, y: Vec<f64>) -> Self {
        let n = y.len();
        RegressionSpec {
            outcome: outcome.into(),
            y,
            regressors: Vec::new(),
            fixed_effects: None,
            weights: vec![1.0; n],
            clusters: (0..n).collect(),
        }
    }

    pub fn regressor(mut self, name: impl Into<String>, values: Vec<f64>) -> Self {
        self.regressors.push(Regressor::new(name, values));
        self
    }

    pub fn fixed_effects(mut self, groups: Vec<usize>) -> Self {
        self.fixed_effects = Some(groups);
        self
    }

    pub fn weights(mut self, w: Vec<f64>) -> Self {
        self.weights = w;
        self
    }

    pub fn clusters(mut self, c: Vec<usize>) -> Self {
        self.clusters = c;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    /// Cluster-robust sandwich; reference distributions use G−1 degrees of freedom.
    Cluster,
    /// Heteroskedasticity-robust (HC1); reference distributions use N−K.
    Hc1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WlsOptions {
    pub covariance: CovarianceKind,
    /// Apply the G/(G−1)·(N−1)/(N−K) small-sample factor.
    pub small_sample: bool,
    pub rank_tol: f64,
}

impl Default for WlsOptions {
    fn default() -> Self {
        WlsOptions {
            covariance: CovarianceKind::Cluster,
            small_sample: true,
            rank_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub outcome: String,
    pub names: Vec<String>,
    pub coef: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// `(X'WX)^{-1}`.
    pub bread: DMatrix<f64>,
    /// Row `i` is `w_i x_i e_i`, the observation's score contribution.
    pub scores: DMatrix<f64>,
    pub residuals: Vec<f64>,
    pub fitted: Vec<f64>,
    /// Indices (into the spec's rows) of the positive-weight rows used.
    pub rows: Vec<usize>,
    pub weights: Vec<f64>,
    pub cluster_ids: Vec<usize>,
    pub n: usize,
    pub clusters: usize,
    pub k: usize,
    pub r2: f64,
    /// Denominator degrees of freedom for t and F reference distributions.
    pub df: f64,
    pub options: WlsOptions,
}

/// Expanded design matrix for the positive-weight rows.
struct Expanded {
    x: DMatrix<f64>,
    names: Vec<String>,
    rows: Vec<usize>,
}

fn expand(spec: &RegressionSpec) -> Result<Expanded> {
    let n_all = spec.y.len();
    if spec.weights.len() != n_all || spec.clusters.len() != n_all {
        return Err(Error::invalid("weights and clusters must match the outcome length"));
    }
    for r in &spec.regressors {
        if r.values.len() != n_all {
            return Err(Error::invalid(format!("regressor `{}` has the wrong length", r.name)));
        }
    }
    if let Some(fe) = &spec.fixed_effects {
        if fe.len() != n_all {
            return Err(Error::invalid("fixed-effect groups must match the outcome length"));
        }
    }
    for (i, w) in spec.weights.iter().enumerate() {
        if !(w.is_finite() && *w >= 0.0) {
            return Err(Error::invalid(format!("row {i} has invalid weight {w}")));
        }
    }
    let rows: Vec<usize> = (0..n_all).filter(|&i| spec.weights[i] > 0.0).collect();
    for &i in &rows {
        if !spec.y[i].is_finite() || spec.regressors.iter().any(|r| !r.values[i].is_finite()) {
            return Err(Error::invalid(format!("row {i} has a non-finite value")));
        }
    }

    let mut names = vec!["(intercept)".to_string()];
    names.extend(spec.regressors.iter().map(|r| r.name.clone()));
    let mut fe_levels = Vec::new();
    if let Some(fe) = &spec.fixed_effects {
        let levels: BTreeSet<usize> = rows.iter().map(|&i| fe[i]).collect();
        fe_levels = levels.into_iter().skip(1).collect();
        names.extend(fe_levels.iter().map(|g| format!("fe[{g}]")));
    }
    let k = names.len();
    let mut x = DMatrix::<f64>::zeros(rows.len(), k);
    for (r, &i) in rows.iter().enumerate() {
        x[(r, 0)] = 1.0;
        for (j, reg) in spec.regressors.iter().enumerate() {
            x[(r, 1 + j)] = reg.values[i];
        }
        if let Some(fe) = &spec.fixed_effects {
            if let Ok(pos) = fe_levels.binary_search(&fe[i]) {
                x[(r, 1 + spec.regressors.len() + pos)] = 1.0;
            }
        }
    }
    Ok(Expanded { x, names, rows })
}

/// The expanded design matrix (intercept, regressors, fixed-effect dummies)
/// over positive-weight rows, with column names and the rows used.
pub fn design_matrix(spec: &RegressionSpec) -> Result<(DMatrix<f64>, Vec<String>, Vec<usize>)> {
    let e = expand(spec)?;
    Ok((e.x, e.names, e.rows))
}

/// Fits the weighted regression and its robust covariance.
pub fn fit(spec: &RegressionSpec, opts: &WlsOptions) -> Result<FitResult> {
    let Expanded { x, names, rows } = expand(spec)?;
    let (n, k) = x.shape();
    if n < k {
        return Err(Error::TooFewRows { rows: n, params: k });
    }
    let w: Vec<f64> = rows.iter().map(|&i| spec.weights[i]).collect();
    let y: Vec<f64> = rows.iter().map(|&i| spec.y[i]).collect();

    let mut xw = x.clone();
    let mut yw = DVector::zeros(n);
    for r in 0..n {
        let s = w[r].sqrt();
        xw.row_mut(r).scale_mut(s);
        yw[r] = y[r] * s;
    }
    let qr = PivotedQr::new(xw, opts.rank_tol);
    if !qr.is_full_rank() {
        return Err(Error::RankDeficient {
            columns: qr.deficient_columns().into_iter().map(|j| names[j].clone()).collect(),
        });
    }
    let coef = qr.solve(&yw)?;
    let bread = qr.gram_inverse()?;

    let fitted_v = &x * &coef;
    let fitted: Vec<f64> = fitted_v.iter().copied().collect();
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let mut scores = x.clone();
    for r in 0..n {
        scores.row_mut(r).scale_mut(w[r] * residuals[r]);
    }

    let wsum: f64 = w.iter().sum();
    let ybar = w.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / wsum;
    let sst: f64 = w.iter().zip(&y).map(|(a, b)| a * (b - ybar).powi(2)).sum();
    let ssr: f64 = w.iter().zip(&residuals).map(|(a, e)| a * e * e).sum();
    let r2 = if sst > 1e-14 * wsum * (1.0 + ybar * ybar) {
        1.0 - ssr / sst
    } else {
        0.0
    };

    let cluster_ids: Vec<usize> = rows.iter().map(|&i| spec.clusters[i]).collect();
    let clusters = cluster_ids.iter().collect::<BTreeSet<_>>().len();
    let mut result = FitResult {
        outcome: spec.outcome.clone(),
        names,
        coef,
        cov: DMatrix::zeros(k, k),
        bread,
        scores,
        residuals,
        fitted,
        rows,
        weights: w,
        cluster_ids,
        n,
        clusters,
        k,
        r2,
        df: 0.0,
        options: *opts,
    };
    match opts.covariance {
        CovarianceKind::Cluster => {
            let ids = result.cluster_ids.clone();
            result.cov = cluster_cov(&result, &ids)?;
            result.df = (clusters - 1) as f64;
        }
        CovarianceKind::Hc1 => {
            let ids: Vec<usize> = (0..n).collect();
            result.cov = cluster_cov(&result, &ids)?;
            result.df = (n.saturating_sub(k)).max(1) as f64;
        }
    }
    Ok(result)
}

/// Sandwich covariance clustered on `cluster_ids` (one id per used row):
/// `B (Σ_g s_g s_g') B`, with `s_g` the within-cluster score sum, scaled by
/// `G/(G−1)·(N−1)/(N−K)` when the fit asks for the small-sample factor.
pub fn cluster_cov(fit: &FitResult, cluster_ids: &[usize]) -> Result<DMatrix<f64>> {
    if cluster_ids.len() != fit.n {
        return Err(Error::invalid("one cluster id per used row is required"));
    }
    let k = fit.k;
    let mut sums: BTreeMap<usize, DVector<f64>> = BTreeMap::new();
    for (r, &g) in cluster_ids.iter().enumerate() {
        let s = sums.entry(g).or_insert_with(|| DVector::zeros(k));
        *s += fit.scores.row(r).transpose();
    }
    let g = sums.len();
    if g < 2 {
        return Err(Error::TooFewClusters(g));
    }
    let mut meat = DMatrix::<f64>::zeros(k, k);
    for s in sums.values() {
        meat += s * s.transpose();
    }
    let mut v = &fit.bread * meat * &fit.bread;
    if fit.options.small_sample {
        let (n, gf, kf) = (fit.n as f64, g as f64, k as f64);
        if fit.n <= k {
            return Err(Error::TooFewRows { rows: fit.n, params: k });
        }
        v *= gf / (gf - 1.0) * (n - 1.0) / (n - kf);
    }
    symmetrize(&mut v);
    Ok(v)
}

impl FitResult {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn idx(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| Error::invalid(format!("no coefficient named `{name}`")))
    }

    pub fn coef_of(&self, name: &str) -> Result<f64> {
        Ok(self.coef[self.idx(name)?])
    }

    pub fn se_of(&self, name: &str) -> Result<f64> {
        let i = self.idx(name)?;
        Ok(self.cov[(i, i)].max(0.0).sqrt())
    }

    /// Two-sided p-value of `coef = 0` against t(df).
    pub fn p_value(&self, name: &str) -> Result<f64> {
        let (b, se) = (self.coef_of(name)?, self.se_of(name)?);
        Ok(t_two_sided(b / se, self.df))
    }

    /// `level` two-sided confidence interval using the t(df) critical value.
    pub fn conf_int(&self, name: &str, level: f64) -> Result<(f64, f64)> {
        let (b, se) = (self.coef_of(name)?, self.se_of(name)?);
        let crit = t_critical(level, self.df);
        Ok((b - crit * se, b + crit * se))
    }

    /// Hypothesis that a single named coefficient equals `value`.
    pub fn single(&self, name: &str, value: f64) -> Result<LinearHypothesis> {
        let mut r = DMatrix::zeros(1, self.k);
        r[(0, self.idx(name)?)] = 1.0;
        LinearHypothesis::new(r, DVector::from_element(1, value))
    }

    /// Hypothesis `Σ coef[name] = value` over the listed names.
    pub fn sum_of(&self, names: &[&str], value: f64) -> Result<LinearHypothesis> {
        let mut r = DMatrix::zeros(1, self.k);
        for n in names {
            r[(0, self.idx(n)?)] += 1.0;
        }
        LinearHypothesis::new(r, DVector::from_element(1, value))
    }

    /// Hypothesis `coef[a] = coef[b]`.
    pub fn equal(&self, a: &str, b: &str) -> Result<LinearHypothesis> {
        let mut r = DMatrix::zeros(1, self.k);
        r[(0, self.idx(a)?)] = 1.0;
        r[(0, self.idx(b)?)] = -1.0;
        LinearHypothesis::new(r, DVector::zeros(1))
    }
}

pub fn t_two_sided(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return if t.is_nan() { f64::NAN } else { 0.0 };
    }
    let dist = StudentsT::new(0.0, 1.0, df.max(1.0)).expect("valid t distribution");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

pub fn t_critical(level: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df.max(1.0)).expect("valid t distribution");
    dist.inverse_cdf(0.5 + level / 2.0)
}

/// `R β = r` with `R` of full row rank.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHypothesis {
    pub r: DMatrix<f64>,
    pub target: DVector<f64>,
}

impl LinearHypothesis {
    pub fn new(r: DMatrix<f64>, target: DVector<f64>) -> Result<Self> {
        if r.nrows() != target.len() || r.nrows() == 0 {
            return Err(Error::invalid("restriction matrix and target disagree"));
        }
        let qr = PivotedQr::new(r.transpose(), 1e-12);
        if qr.rank() < r.nrows() {
            return Err(Error::invalid("restriction matrix is not of full row rank"));
        }
        Ok(LinearHypothesis { r, target })
    }

    /// Stacks several single-row hypotheses into one joint test.
    pub fn joint(parts: &[LinearHypothesis]) -> Result<Self> {
        let k = parts
            .first()
            .ok_or_else(|| Error::invalid("empty joint hypothesis"))?
            .r
            .ncols();
        let q: usize = parts.iter().map(|h| h.r.nrows()).sum();
        let mut r = DMatrix::zeros(q, k);
        let mut t = DVector::zeros(q);
        let mut row = 0;
        for h in parts {
            for i in 0..h.r.nrows() {
                r.set_row(row, &h.r.row(i));
                t[row] = h.target[i];
                row += 1;
            }
        }
        LinearHypothesis::new(r, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaldTest {
    pub f: f64,
    pub q: usize,
    pub df2: f64,
    pub p: f64,
}

fn f_pvalue(f: f64, q: usize, df2: f64) -> f64 {
    if !f.is_finite() {
        return 0.0;
    }
    let dist = FisherSnedecor::new(q as f64, df2.max(1.0)).expect("valid F distribution");
    (1.0 - dist.cdf(f.max(0.0))).clamp(0.0, 1.0)
}

/// `F = (Rβ−r)' [R V R']^{-1} (Rβ−r) / q` against F(q, df).
pub fn wald(fit: &FitResult, h: &LinearHypothesis) -> Result<WaldTest> {
    if h.r.ncols() != fit.k {
        return Err(Error::invalid("hypothesis width does not match the model"));
    }
    let q = h.r.nrows();
    if q > fit.k {
        return Err(Error::invalid("more restrictions than parameters"));
    }
    let diff = &h.r * &fit.coef - &h.target;
    let mid = &h.r * &fit.cov * h.r.transpose();
    let inv = mid
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::Singular("R V R'"))?;
    let f = (diff.transpose() * inv * &diff)[(0, 0)] / q as f64;
    Ok(WaldTest {
        f,
        q,
        df2: fit.df,
        p: f_pvalue(f, q, fit.df),
    })
}

/// Equal benefit-cost ratios `β_i/c_i = β_j/c_j`, restated as the linear
/// restriction `c_j β_i − c_i β_j = 0` over a `k`-parameter model.
pub fn bcr_equality_hypothesis(k: usize, i: usize, j: usize, c_i: f64, c_j: f64) -> Result<LinearHypothesis> {
    if !(c_i.is_finite() && c_j.is_finite()) || c_i <= 0.0 || c_j <= 0.0 {
        return Err(Error::invalid("benefit-cost tests need positive costs"));
    }
    if i >= k || j >= k || i == j {
        return Err(Error::invalid("bad coefficient indices for ratio test"));
    }
    let mut r = DMatrix::zeros(1, k);
    r[(0, i)] = c_j;
    r[(0, j)] = -c_i;
    LinearHypothesis::new(r, DVector::zeros(1))
}

/// Delta-method Wald test of `(β_i/c_i)/(β_j/c_j) = 1`; agrees with the linear
/// restriction to first order near the null.
pub fn bcr_ratio_delta_wald(fit: &FitResult, i: usize, j: usize, c_i: f64, c_j: f64) -> Result<WaldTest> {
    let (bi, bj) = (fit.coef[i], fit.coef[j]);
    if bj == 0.0 {
        return Err(Error::Singular("ratio with zero denominator coefficient"));
    }
    let s = c_j / c_i;
    let g = s * bi / bj - 1.0;
    let mut grad = DVector::zeros(fit.k);
    grad[i] = s / bj;
    grad[j] = -s * bi / (bj * bj);
    let var = (grad.transpose() * &fit.cov * &grad)[(0, 0)];
    if var <= 0.0 {
        return Err(Error::Singular("delta-method variance"));
    }
    let f = g * g / var;
    Ok(WaldTest {
        f,
        q: 1,
        df2: fit.df,
        p: f_pvalue(f, 1, fit.df),
    })
}
