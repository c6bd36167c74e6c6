//! Weighted LASSO with penalty loadings, and post-double-selection of controls.
//!
//! Objective, on internally standardized candidates and weights normalized to
//! mean one:
//!
//! ```text
//! Σ_i w_i (y_i − ȳ − x_i β)² + λ Σ_j ψ_j |β_j|
//! ```
//!
//! KKT residuals are reported per observation, i.e. on
//! `(2/n) Σ_i w_i x_ij r_i` against `λ ψ_j / n`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::linalg::PivotedQr;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LassoConfig {
    pub c: f64,
    /// Defaults to `0.1 / ln N` when absent.
    pub gamma: Option<f64>,
    pub loading_iterations: usize,
    pub tol: f64,
    pub max_sweeps: usize,
    /// Use observation weights inside the penalty loadings as well as the loss.
    pub weights_in_loadings: bool,
}

impl Default for LassoConfig {
    fn default() -> Self {
        LassoConfig {
            c: 1.1,
            gamma: None,
            loading_iterations: 2,
            tol: 1e-7,
            max_sweeps: 10_000,
            weights_in_loadings: true,
        }
    }
}

/// `λ = 2c √N Φ⁻¹(1 − γ/(2p))`.
pub fn penalty_level(n: usize, p: usize, cfg: &LassoConfig) -> Result<f64> {
    if n < 2 || p < 1 {
        return Err(Error::invalid("penalty level needs N > 1 and p >= 1"));
    }
    let gamma = cfg.gamma.unwrap_or(0.1 / (n as f64).ln());
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::invalid(format!("gamma {gamma} outside (0, 1)")));
    }
    let z = Normal::standard().inverse_cdf(1.0 - gamma / (2.0 * p as f64));
    Ok(2.0 * cfg.c * (n as f64).sqrt() * z)
}

#[derive(Debug, Clone)]
pub struct LassoProblem {
    pub y: Vec<f64>,
    /// `n × p` candidate matrix (raw scale).
    pub x: DMatrix<f64>,
    pub weights: Vec<f64>,
    pub lambda: f64,
    /// Per-candidate loadings on the standardized scale; zero marks an unpenalized column.
    pub loadings: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LassoFit {
    /// Coefficients on the raw candidate scale.
    pub coef: Vec<f64>,
    pub intercept: f64,
    pub active: Vec<usize>,
    pub sweeps: usize,
    pub max_kkt_violation: f64,
}

struct Standardized {
    xs: DMatrix<f64>,
    ys: Vec<f64>,
    w: Vec<f64>,
    xmean: Vec<f64>,
    xsd: Vec<f64>,
    ymean: f64,
}

fn normalized_weights(w: &[f64]) -> Result<Vec<f64>> {
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid("lasso weights must be finite and non-negative"));
    }
    let s: f64 = w.iter().sum();
    if s <= 0.0 {
        return Err(Error::invalid("lasso weights sum to zero"));
    }
    let n = w.len() as f64;
    Ok(w.iter().map(|v| v * n / s).collect())
}

fn standardize(y: &[f64], x: &DMatrix<f64>, weights: &[f64]) -> Result<Standardized> {
    let (n, p) = x.shape();
    if y.len() != n || weights.len() != n {
        return Err(Error::invalid("lasso inputs have mismatched lengths"));
    }
    if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("lasso inputs must be finite"));
    }
    let w = normalized_weights(weights)?;
    let nf = n as f64;
    let ymean = w.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / nf;
    let ys: Vec<f64> = y.iter().map(|v| v - ymean).collect();
    let mut xs = x.clone();
    let mut xmean = vec![0.0; p];
    let mut xsd = vec![0.0; p];
    for j in 0..p {
        let m = (0..n).map(|i| w[i] * x[(i, j)]).sum::<f64>() / nf;
        let v = (0..n).map(|i| w[i] * (x[(i, j)] - m).powi(2)).sum::<f64>() / nf;
        xmean[j] = m;
        xsd[j] = v.sqrt();
        for i in 0..n {
            xs[(i, j)] = if xsd[j] > 0.0 { (x[(i, j)] - m) / xsd[j] } else { 0.0 };
        }
    }
    Ok(Standardized {
        xs,
        ys,
        w,
        xmean,
        xsd,
        ymean,
    })
}

fn soft(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Per-observation KKT violation on the standardized problem.
fn kkt_violation(s: &Standardized, beta: &[f64], resid: &[f64], lambda: f64, loadings: &[f64]) -> f64 {
    let n = s.ys.len() as f64;
    let mut worst = 0.0f64;
    for j in 0..beta.len() {
        if s.xsd[j] == 0.0 {
            continue;
        }
        let g = 2.0 / n * (0..resid.len()).map(|i| s.w[i] * s.xs[(i, j)] * resid[i]).sum::<f64>();
        let pen = lambda * loadings[j] / n;
        let v = if beta[j] != 0.0 {
            (g - pen * beta[j].signum()).abs()
        } else {
            (g.abs() - pen).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

fn descend(s: &Standardized, lambda: f64, loadings: &[f64], cfg: &LassoConfig) -> Result<(Vec<f64>, usize, f64)> {
    let (n, p) = s.xs.shape();
    let nf = n as f64;
    let mut beta = vec![0.0; p];
    let mut resid = s.ys.clone();
    let denom: Vec<f64> = (0..p)
        .map(|j| 2.0 / nf * (0..n).map(|i| s.w[i] * s.xs[(i, j)].powi(2)).sum::<f64>())
        .collect();
    for sweep in 1..=cfg.max_sweeps {
        let mut max_change = 0.0f64;
        for j in 0..p {
            if denom[j] <= 0.0 {
                continue;
            }
            let col = s.xs.column(j);
            let rho = 2.0 / nf * (0..n).map(|i| s.w[i] * col[i] * (resid[i] + col[i] * beta[j])).sum::<f64>();
            let new = soft(rho, lambda * loadings[j] / nf) / denom[j];
            let delta = new - beta[j];
            if delta != 0.0 {
                for i in 0..n {
                    resid[i] -= col[i] * delta;
                }
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < cfg.tol {
            let kkt = kkt_violation(s, &beta, &resid, lambda, loadings);
            if kkt < cfg.tol {
                return Ok((beta, sweep, kkt));
            }
        }
    }
    Err(Error::NoConvergence {
        sweeps: cfg.max_sweeps,
        max_kkt_violation: kkt_violation(s, &beta, &resid, lambda, loadings),
    })
}

/// Cyclic coordinate descent for the weighted, loading-adjusted LASSO.
pub fn lasso_fit(problem: &LassoProblem, cfg: &LassoConfig) -> Result<LassoFit> {
    if !(problem.lambda >= 0.0 && problem.lambda.is_finite()) {
        return Err(Error::invalid("lambda must be finite and non-negative"));
    }
    if problem.loadings.len() != problem.x.ncols() || problem.loadings.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::invalid("one non-negative loading per candidate is required"));
    }
    let s = standardize(&problem.y, &problem.x, &problem.weights)?;
    let (beta, sweeps, kkt) = descend(&s, problem.lambda, &problem.loadings, cfg)?;
    Ok(finish(&s, beta, sweeps, kkt))
}

fn finish(s: &Standardized, beta: Vec<f64>, sweeps: usize, kkt: f64) -> LassoFit {
    let coef: Vec<f64> = beta
        .iter()
        .zip(&s.xsd)
        .map(|(b, sd)| if *sd > 0.0 { b / sd } else { 0.0 })
        .collect();
    let intercept = s.ymean - coef.iter().zip(&s.xmean).map(|(b, m)| b * m).sum::<f64>();
    LassoFit {
        active: (0..coef.len()).filter(|&j| beta[j] != 0.0).collect(),
        coef,
        intercept,
        sweeps,
        max_kkt_violation: kkt,
    }
}

fn post_lasso_residuals(s: &Standardized, active: &[usize]) -> Vec<f64> {
    let n = s.ys.len();
    if active.is_empty() {
        return s.ys.clone();
    }
    let mut a = DMatrix::zeros(n, active.len());
    let mut b = DVector::zeros(n);
    for i in 0..n {
        let sw = s.w[i].sqrt();
        for (k, &j) in active.iter().enumerate() {
            a[(i, k)] = s.xs[(i, j)] * sw;
        }
        b[i] = s.ys[i] * sw;
    }
    let qr = PivotedQr::new(a, 1e-10);
    match qr.solve(&b) {
        Ok(coef) => (0..n)
            .map(|i| s.ys[i] - active.iter().enumerate().map(|(k, &j)| s.xs[(i, j)] * coef[k]).sum::<f64>())
            .collect(),
        Err(_) => s.ys.clone(),
    }
}

fn loadings_from(s: &Standardized, resid: &[f64], weighted: bool) -> Vec<f64> {
    let (n, p) = s.xs.shape();
    (0..p)
        .map(|j| {
            let m = (0..n)
                .map(|i| {
                    let w = if weighted { s.w[i] } else { 1.0 };
                    w * s.xs[(i, j)].powi(2) * resid[i].powi(2)
                })
                .sum::<f64>()
                / n as f64;
            m.sqrt()
        })
        .collect()
}

/// Data-driven LASSO: plug-in λ and iteratively refined heteroskedasticity-robust loadings.
pub fn lasso_rigorous(y: &[f64], x: &DMatrix<f64>, weights: &[f64], cfg: &LassoConfig) -> Result<LassoFit> {
    let mut s = standardize(y, x, weights)?;
    let (n, p) = s.xs.shape();
    if p == 0 {
        return Ok(finish(&s, Vec::new(), 0, 0.0));
    }
    // standardize the response so unit starting loadings are on its scale
    let ysd = (s.w.iter().zip(&s.ys).map(|(w, v)| w * v * v).sum::<f64>() / n as f64).sqrt();
    if ysd == 0.0 {
        return Ok(finish(&s, vec![0.0; p], 0, 0.0));
    }
    for v in &mut s.ys {
        *v /= ysd;
    }
    let lambda = penalty_level(n, p, cfg)?;
    let mut loadings = vec![1.0; p];
    let mut fit = descend(&s, lambda, &loadings, cfg)?;
    for _ in 0..cfg.loading_iterations {
        let active: Vec<usize> = (0..p).filter(|&j| fit.0[j] != 0.0).collect();
        let resid = post_lasso_residuals(&s, &active);
        loadings = loadings_from(&s, &resid, cfg.weights_in_loadings);
        for (l, sd) in loadings.iter_mut().zip(&s.xsd) {
            if *sd == 0.0 || *l == 0.0 {
                *l = 1.0;
            }
        }
        fit = descend(&s, lambda, &loadings, cfg)?;
    }
    let (beta, sweeps, kkt) = fit;
    let mut out = finish(&s, beta, sweeps, kkt);
    for c in &mut out.coef {
        *c *= ysd;
    }
    out.intercept = s.ymean - out.coef.iter().zip(&s.xmean).map(|(b, m)| b * m).sum::<f64>();
    Ok(out)
}

/// Residualizes each column of `targets` on `[1, keep]` by weighted least squares.
pub fn residualize_on(keep: &DMatrix<f64>, targets: &DMatrix<f64>, weights: &[f64]) -> Result<DMatrix<f64>> {
    let n = targets.nrows();
    if keep.nrows() != n || weights.len() != n {
        return Err(Error::invalid("residualization inputs have mismatched lengths"));
    }
    let mut k = DMatrix::zeros(n, keep.ncols() + 1);
    k.column_mut(0).fill(1.0);
    k.columns_mut(1, keep.ncols()).copy_from(keep);
    let mut kw = k.clone();
    for i in 0..n {
        kw.row_mut(i).scale_mut(weights[i].sqrt());
    }
    let qr = PivotedQr::new(kw, 1e-10);
    if !qr.is_full_rank() {
        return Err(Error::RankDeficient {
            columns: qr.deficient_columns().iter().map(|j| format!("keep[{j}]")).collect(),
        });
    }
    let mut out = targets.clone();
    for j in 0..targets.ncols() {
        let b = DVector::from_iterator(n, (0..n).map(|i| targets[(i, j)] * weights[i].sqrt()));
        let coef = qr.solve(&b)?;
        let fitted = &k * coef;
        for i in 0..n {
            out[(i, j)] -= fitted[i];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selection {
    /// Candidate indices in the union, ascending.
    pub selected: Vec<usize>,
    pub selected_names: Vec<String>,
    pub always_keep: Vec<String>,
    /// Active candidate indices for the outcome equation, then each treatment.
    pub per_target: Vec<Vec<usize>>,
    /// Candidates residualized to zero by the always-keep set.
    pub dropped: Vec<usize>,
    pub max_kkt_violation: f64,
}

impl Selection {
    /// Always-keep names followed by the selected candidates.
    pub fn controls(&self) -> Vec<String> {
        let mut v = self.always_keep.clone();
        v.extend(self.selected_names.iter().cloned());
        v
    }
}

/// Inputs to post-double-selection; `keep` must not include an intercept.
pub struct DoubleSelectionInput<'a> {
    pub y: &'a [f64],
    pub treatments: &'a [Vec<f64>],
    pub candidates: &'a DMatrix<f64>,
    pub candidate_names: &'a [String],
    pub keep: &'a DMatrix<f64>,
    pub keep_names: &'a [String],
    pub weights: &'a [f64],
}

/// Union of candidates chosen as predictors of the outcome or of any treatment,
/// after partialling out the always-keep set.
pub fn post_double_select(input: &DoubleSelectionInput, cfg: &LassoConfig) -> Result<Selection> {
    let n = input.y.len();
    let p = input.candidates.ncols();
    if input.candidate_names.len() != p || input.keep_names.len() != input.keep.ncols() {
        return Err(Error::invalid("names do not match matrices"));
    }
    let mut targets = DMatrix::zeros(n, 1 + input.treatments.len() + p);
    for i in 0..n {
        targets[(i, 0)] = input.y[i];
    }
    for (t, d) in input.treatments.iter().enumerate() {
        if d.len() != n {
            return Err(Error::invalid("treatment column has the wrong length"));
        }
        for i in 0..n {
            targets[(i, 1 + t)] = d[i];
        }
    }
    let off = 1 + input.treatments.len();
    targets.columns_mut(off, p).copy_from(input.candidates);
    let r = residualize_on(input.keep, &targets, input.weights)?;

    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..p {
        let raw = input.candidates.column(j);
        let scale = raw.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
        let resid_max = r.column(off + j).iter().map(|v| v.abs()).fold(0.0, f64::max);
        if resid_max <= 1e-9 * scale {
            dropped.push(j);
        } else {
            kept.push(j);
        }
    }
    let mut xc = DMatrix::zeros(n, kept.len());
    for (k, &j) in kept.iter().enumerate() {
        xc.set_column(k, &r.column(off + j));
    }

    let mut union = std::collections::BTreeSet::new();
    let mut per_target = Vec::new();
    let mut worst = 0.0f64;
    for t in 0..off {
        let yt: Vec<f64> = r.column(t).iter().copied().collect();
        let fit = lasso_rigorous(&yt, &xc, input.weights, cfg)?;
        worst = worst.max(fit.max_kkt_violation);
        let active: Vec<usize> = fit.active.iter().map(|&k| kept[k]).collect();
        union.extend(active.iter().copied());
        per_target.push(active);
    }
    let selected: Vec<usize> = union.into_iter().collect();
    Ok(Selection {
        selected_names: selected.iter().map(|&j| input.candidate_names[j].clone()).collect(),
        selected,
        always_keep: input.keep_names.to_vec(),
        per_target,
        dropped,
        max_kkt_violation: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_problem(n: usize, p: usize, seed: u64) -> (Vec<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = (0..n)
            .map(|i| 2.0 * x[(i, 0)] - x[(i, 1)] + rng.sample::<f64, _>(StandardNormal))
            .collect();
        (y, x)
    }

    #[test]
    fn penalty_matches_formula() {
        let cfg = LassoConfig::default();
        // reference values evaluated independently with scipy.stats.norm.ppf
        assert!((penalty_level(100, 10, &cfg).unwrap() - 67.44581941286555).abs() < 1e-9);
        assert!((penalty_level(500, 50, &cfg).unwrap() - 176.95242751955496).abs() < 1e-9);
        assert!(penalty_level(100, 1, &cfg).unwrap() < penalty_level(100, 100, &cfg).unwrap());
    }

    #[test]
    fn huge_lambda_zeroes_everything() {
        let (y, x) = random_problem(80, 5, 1);
        let fit = lasso_fit(
            &LassoProblem {
                y,
                x,
                weights: vec![1.0; 80],
                lambda: 1e9,
                loadings: vec![1.0; 5],
            },
            &LassoConfig::default(),
        )
        .unwrap();
        assert!(fit.active.is_empty());
    }

    #[test]
    fn zero_lambda_is_least_squares() {
        let (y, x) = random_problem(60, 4, 2);
        let w: Vec<f64> = (0..60).map(|i| 1.0 + (i % 3) as f64).collect();
        let fit = lasso_fit(
            &LassoProblem {
                y: y.clone(),
                x: x.clone(),
                weights: w.clone(),
                lambda: 0.0,
                loadings: vec![1.0; 4],
            },
            &LassoConfig {
                tol: 1e-12,
                ..Default::default()
            },
        )
        .unwrap();
        let mut a = DMatrix::from_element(60, 5, 1.0);
        a.columns_mut(1, 4).copy_from(&x);
        let wm = DMatrix::from_diagonal(&DVector::from_vec(w));
        let yv = DVector::from_vec(y);
        let ols = (a.transpose() * &wm * &a).try_inverse().unwrap() * a.transpose() * wm * yv;
        for j in 0..4 {
            assert!((fit.coef[j] - ols[j + 1]).abs() < 1e-8, "{j}");
        }
        assert!((fit.intercept - ols[0]).abs() < 1e-8);
    }

    #[test]
    fn univariate_soft_threshold() {
        // standardized single regressor: β = S(2ρ, λ/n)/2 with ρ = mean(x y)
        let x: Vec<f64> = vec![-1.5, -0.5, 0.5, 1.5, -1.0, 1.0];
        let m = x.iter().sum::<f64>() / 6.0;
        let sd = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 6.0).sqrt();
        let xs: Vec<f64> = x.iter().map(|v| (v - m) / sd).collect();
        let y = vec![-2.0, -0.4, 0.9, 2.1, -1.1, 0.5];
        let ym = y.iter().sum::<f64>() / 6.0;
        let rho = xs.iter().zip(&y).map(|(a, b)| a * (b - ym)).sum::<f64>() / 6.0;
        let lambda = 3.0;
        let expected = rho.signum() * (rho.abs() - lambda / (2.0 * 6.0)).max(0.0);
        let fit = lasso_fit(
            &LassoProblem {
                y,
                x: DMatrix::from_column_slice(6, 1, &xs),
                weights: vec![1.0; 6],
                lambda,
                loadings: vec![1.0],
            },
            &LassoConfig::default(),
        )
        .unwrap();
        assert!((fit.coef[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn rescaling_a_candidate_keeps_selection() {
        let (y, x) = random_problem(200, 8, 3);
        let cfg = LassoConfig::default();
        let w = vec![1.0; 200];
        let a = lasso_rigorous(&y, &x, &w, &cfg).unwrap();
        let mut x2 = x.clone();
        x2.column_mut(1).scale_mut(1000.0);
        let b = lasso_rigorous(&y, &x2, &w, &cfg).unwrap();
        assert_eq!(a.active, b.active);
        assert!((a.coef[1] - 1000.0 * b.coef[1]).abs() < 1e-6);
    }

    #[test]
    fn duplicate_of_keep_column_is_never_selected() {
        let (y, x) = random_problem(150, 4, 4);
        let keep = x.columns(0, 1).into_owned();
        let names: Vec<String> = (0..4).map(|j| format!("c{j}")).collect();
        let d: Vec<f64> = (0..150).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let sel = post_double_select(
            &DoubleSelectionInput {
                y: &y,
                treatments: &[d],
                candidates: &x,
                candidate_names: &names,
                keep: &keep,
                keep_names: &["c0_keep".to_string()],
                weights: &vec![1.0; 150],
            },
            &LassoConfig::default(),
        )
        .unwrap();
        assert_eq!(sel.dropped, vec![0]);
        assert!(!sel.selected.contains(&0));
        assert!(sel.selected.contains(&1));
        assert!(sel.controls().starts_with(&["c0_keep".to_string()]));
        assert!(sel.max_kkt_violation <= 1e-6);
    }
}
