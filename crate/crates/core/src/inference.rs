//! Multiple-inference and attrition adjustments: sharpened two-stage FDR
//! q-values and inverse remain-propensity weights.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Arm, Family, Panel, Stratum};
use crate::{Error, Result};

/// Grid step for q-value search.
pub const Q_GRID_STEPS: usize = 1000;

fn check_pvals(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::invalid("q-values of an empty p-value set"));
    }
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("p-value {bad} outside [0, 1]")));
    }
    Ok(())
}

/// Number of rejections of the step-up procedure at `level`, given ascending `sorted` p-values.
fn step_up_count(sorted: &[f64], level: f64) -> usize {
    let m = sorted.len() as f64;
    (1..=sorted.len())
        .rev()
        .find(|&r| sorted[r - 1] <= level * r as f64 / m)
        .unwrap_or(0)
}

/// Rejection threshold of the two-stage procedure at nominal level `q`:
/// every p-value at or below the returned value is rejected.
fn two_stage_threshold(sorted: &[f64], q: f64) -> Option<f64> {
    let m = sorted.len();
    let q1 = q / (1.0 + q);
    let r1 = step_up_count(sorted, q1);
    if r1 == 0 {
        return None;
    }
    let m0 = m - r1;
    if m0 == 0 {
        return Some(f64::INFINITY);
    }
    let q2 = q1 * m as f64 / m0 as f64;
    match step_up_count(sorted, q2) {
        0 => None,
        r2 => Some(sorted[r2 - 1]),
    }
}

fn grid(k: usize) -> f64 {
    k as f64 / Q_GRID_STEPS as f64
}

/// Sharpened q-values: for each test the smallest level on the 0.001 grid at
/// which the two-stage step-up procedure rejects it; 1 if never rejected.
pub fn sharpened_q(p: &[f64]) -> Result<Vec<f64>> {
    check_pvals(p)?;
    let mut sorted = p.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut q = vec![1.0; p.len()];
    let mut open = p.len();
    for k in 1..=Q_GRID_STEPS {
        if open == 0 {
            break;
        }
        if let Some(t) = two_stage_threshold(&sorted, grid(k)) {
            for (i, pi) in p.iter().enumerate() {
                if q[i] == 1.0 && *pi <= t && k < Q_GRID_STEPS {
                    q[i] = grid(k);
                    open -= 1;
                }
            }
        }
    }
    Ok(q)
}

/// Plain Benjamini–Hochberg adjusted p-values (continuous, no grid).
pub fn bh_q(p: &[f64]) -> Result<Vec<f64>> {
    check_pvals(p)?;
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut q = vec![1.0; m];
    let mut running = 1.0f64;
    for r in (0..m).rev() {
        let i = order[r];
        running = running.min(p[i] * m as f64 / (r + 1) as f64);
        q[i] = running.min(1.0);
    }
    Ok(q)
}

/// Smallest grid level `q` at which a single-stage step-up at `q/(1+q)` rejects
/// each test; the two-stage procedure can only reject weakly more at each level,
/// so sharpened q-values never exceed these.
pub fn first_stage_q(p: &[f64]) -> Result<Vec<f64>> {
    check_pvals(p)?;
    let mut sorted = p.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut q = vec![1.0; p.len()];
    for k in (1..Q_GRID_STEPS).rev() {
        let level = grid(k) / (1.0 + grid(k));
        let r = step_up_count(&sorted, level);
        if r > 0 {
            let t = sorted[r - 1];
            for (i, pi) in p.iter().enumerate() {
                if *pi <= t {
                    q[i] = grid(k);
                }
            }
        }
    }
    Ok(q)
}

/// Q-values computed separately within each outcome family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QValueReport {
    pub family: Vec<Family>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

pub fn sharpened_q_by_family(tests: &[(Family, f64)]) -> Result<QValueReport> {
    let mut q = vec![f64::NAN; tests.len()];
    let mut groups: BTreeMap<Family, Vec<usize>> = BTreeMap::new();
    for (i, (f, _)) in tests.iter().enumerate() {
        groups.entry(*f).or_default().push(i);
    }
    for idx in groups.values() {
        let ps: Vec<f64> = idx.iter().map(|&i| tests[i].1).collect();
        for (k, qi) in sharpened_q(&ps)?.into_iter().enumerate() {
            q[idx[k]] = qi;
        }
    }
    Ok(QValueReport {
        family: tests.iter().map(|t| t.0).collect(),
        p: tests.iter().map(|t| t.1).collect(),
        q,
    })
}

// ---------------------------------------------------------------------------
// attrition: remain propensity and IPW

/// Design for the remain-in-sample model.
#[derive(Debug, Clone)]
pub struct PropensityData {
    pub ids: Vec<String>,
    pub names: Vec<String>,
    /// Includes the intercept column.
    pub x: DMatrix<f64>,
    pub remain: Vec<bool>,
    pub sampling_weight: Vec<f64>,
    pub tracking_weight: Vec<f64>,
}

/// Baseline eligible households with covariates, treatment dummies
/// (Gikuriro, GD-Main, GD-Large) and, optionally, covariate × treatment terms.
pub fn remain_design(panel: &Panel, covariates: &[String], interactions: bool) -> Result<PropensityData> {
    let rows: Vec<usize> = (0..panel.households.len())
        .filter(|&h| panel.households[h].stratum == Stratum::Eligible)
        .collect();
    if rows.is_empty() {
        return Err(Error::invalid("no eligible households for the remain model"));
    }
    let treatments: [(&str, fn(Arm) -> bool); 3] = [
        ("gikuriro", |a| a == Arm::Gikuriro),
        ("gd_main", |a| a.is_gd_main()),
        ("gd_large", |a| a == Arm::GdLarge),
    ];
    let present: Vec<_> = treatments
        .iter()
        .filter(|(_, f)| rows.iter().any(|&h| f(panel.arm_of(h))))
        .collect();

    let mut means = vec![0.0; covariates.len()];
    for (j, c) in covariates.iter().enumerate() {
        let vals: Vec<f64> = rows
            .iter()
            .filter_map(|&h| panel.households[h].covariates.get(c).copied())
            .collect();
        if vals.is_empty() {
            return Err(Error::invalid(format!("covariate `{c}` never observed")));
        }
        means[j] = vals.iter().sum::<f64>() / vals.len() as f64;
    }

    let mut names = vec!["(intercept)".to_string()];
    names.extend(covariates.iter().cloned());
    names.extend(present.iter().map(|(n, _)| n.to_string()));
    if interactions {
        for (n, _) in &present {
            for c in covariates {
                names.push(format!("{n}:{c}"));
            }
        }
    }
    let k = names.len();
    let mut x = DMatrix::zeros(rows.len(), k);
    for (r, &h) in rows.iter().enumerate() {
        let hh = &panel.households[h];
        let arm = panel.arm_of(h);
        let cv: Vec<f64> = covariates
            .iter()
            .enumerate()
            .map(|(j, c)| hh.covariates.get(c).copied().unwrap_or(means[j]))
            .collect();
        let mut col = 0;
        x[(r, col)] = 1.0;
        col += 1;
        for v in &cv {
            x[(r, col)] = *v;
            col += 1;
        }
        let d: Vec<f64> = present.iter().map(|(_, f)| if f(arm) { 1.0 } else { 0.0 }).collect();
        for v in &d {
            x[(r, col)] = *v;
            col += 1;
        }
        if interactions {
            for dv in &d {
                for v in &cv {
                    x[(r, col)] = dv * v;
                    col += 1;
                }
            }
        }
    }
    Ok(PropensityData {
        ids: rows.iter().map(|&h| panel.households[h].id.clone()).collect(),
        names,
        x,
        remain: rows.iter().map(|&h| !panel.households[h].is_attriter()).collect(),
        sampling_weight: rows.iter().map(|&h| panel.households[h].sampling_weight).collect(),
        tracking_weight: rows.iter().map(|&h| panel.households[h].tracking_weight).collect(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropensityModel {
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    pub iterations: usize,
    /// Ridge penalty used, if the fit had to be stabilized.
    pub ridge: Option<f64>,
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

impl PropensityModel {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        sigmoid(self.coef.iter().zip(x).map(|(b, v)| b * v).sum())
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|r| self.predict_row(&x.row(r).iter().copied().collect::<Vec<_>>()))
            .collect()
    }
}

const SEPARATION_ETA: f64 = 30.0;

fn log_lik(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, ridge: f64) -> f64 {
    let eta = x * beta;
    let mut ll = 0.0;
    for (e, yi) in eta.iter().zip(y) {
        // log(1+exp(e)) computed stably
        let softplus = if *e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
        ll += yi * e - softplus;
    }
    ll - 0.5 * ridge * beta.iter().skip(1).map(|b| b * b).sum::<f64>()
}

fn newton(x: &DMatrix<f64>, y: &[f64], ridge: f64, max_iter: usize) -> Result<(DVector<f64>, usize)> {
    let (n, k) = x.shape();
    let mut beta = DVector::zeros(k);
    let ybar = y.iter().sum::<f64>() / n as f64;
    beta[0] = (ybar / (1.0 - ybar)).ln();
    let mut ll = log_lik(x, y, &beta, ridge);
    for it in 0..max_iter {
        let eta = x * &beta;
        let mut grad = DVector::zeros(k);
        let mut hess = DMatrix::zeros(k, k);
        for r in 0..n {
            let p = sigmoid(eta[r]);
            let xr = x.row(r).transpose();
            grad += &xr * (y[r] - p);
            hess += &xr * xr.transpose() * (p * (1.0 - p));
        }
        for j in 1..k {
            grad[j] -= ridge * beta[j];
            hess[(j, j)] += ridge;
        }
        if grad.amax() / (n as f64) < 1e-8 {
            return Ok((beta, it));
        }
        let step = match hess.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => return Err(Error::Separation("singular information matrix".into())),
        };
        let mut t = 1.0;
        loop {
            let cand = &beta + &step * t;
            let ll_new = log_lik(x, y, &cand, ridge);
            if ll_new >= ll - 1e-12 * ll.abs() || t < 1e-10 {
                beta = cand;
                ll = ll_new;
                break;
            }
            t *= 0.5;
        }
        if ridge == 0.0 && (x * &beta).amax() > SEPARATION_ETA {
            return Err(Error::Separation(format!(
                "linear predictor exceeded {SEPARATION_ETA} at iteration {it}"
            )));
        }
    }
    Err(Error::Separation(format!("no convergence after {max_iter} Newton steps")))
}

fn check_remain(data: &PropensityData) -> Result<Vec<f64>> {
    let y: Vec<f64> = data.remain.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect();
    let stay = y.iter().filter(|v| **v == 1.0).count();
    if stay == 0 || stay == y.len() {
        return Err(Error::Degenerate("remain model needs both stayers and attriters".into()));
    }
    Ok(y)
}

/// Logistic MLE of the probability of remaining in the sample.
pub fn fit_remain_propensity(data: &PropensityData) -> Result<PropensityModel> {
    let y = check_remain(data)?;
    let (beta, iterations) = newton(&data.x, &y, 0.0, 200)?;
    Ok(PropensityModel {
        names: data.names.clone(),
        coef: beta.iter().copied().collect(),
        iterations,
        ridge: None,
    })
}

/// Ridge-stabilized logistic fit (intercept unpenalized).
pub fn fit_remain_propensity_ridge(data: &PropensityData, ridge: f64) -> Result<PropensityModel> {
    if !(ridge > 0.0) {
        return Err(Error::invalid("ridge penalty must be positive"));
    }
    let y = check_remain(data)?;
    let (beta, iterations) = newton(&data.x, &y, ridge, 500)?;
    Ok(PropensityModel {
        names: data.names.clone(),
        coef: beta.iter().copied().collect(),
        iterations,
        ridge: Some(ridge),
    })
}

/// Tries the plain MLE; on separation returns a ridge fit and the warning text.
pub fn fit_remain_propensity_or_ridge(data: &PropensityData, ridge: f64) -> Result<(PropensityModel, Option<String>)> {
    match fit_remain_propensity(data) {
        Ok(m) => Ok((m, None)),
        Err(Error::Separation(msg)) => {
            let m = fit_remain_propensity_ridge(data, ridge)?;
            Ok((m, Some(format!("separation ({msg}); used ridge penalty {ridge}"))))
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IpwWeights {
    /// Household id → `1 / max(p̂, floor)` for households that remain.
    pub multipliers: BTreeMap<String, f64>,
    /// Household id → `sampling × tracking / max(p̂, floor)`.
    pub weights: BTreeMap<String, f64>,
    pub floor: f64,
    pub floor_binding: usize,
}

pub const DEFAULT_PROPENSITY_FLOOR: f64 = 0.05;

/// Inverse remain-propensity weights for the households that remain.
pub fn ipw_weights(model: &PropensityModel, data: &PropensityData, floor: f64) -> Result<IpwWeights> {
    if !(floor > 0.0 && floor <= 1.0) {
        return Err(Error::invalid("propensity floor must lie in (0, 1]"));
    }
    if model.coef.len() != data.x.ncols() {
        return Err(Error::invalid("propensity model does not match the design"));
    }
    let p = model.predict(&data.x);
    let mut out = IpwWeights {
        multipliers: BTreeMap::new(),
        weights: BTreeMap::new(),
        floor,
        floor_binding: 0,
    };
    for i in 0..p.len() {
        if !data.remain[i] {
            continue;
        }
        if p[i] < floor {
            out.floor_binding += 1;
        }
        let m = 1.0 / p[i].max(floor);
        out.multipliers.insert(data.ids[i].clone(), m);
        out.weights
            .insert(data.ids[i].clone(), data.sampling_weight[i] * data.tracking_weight[i] * m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_ones_map_to_one() {
        assert_eq!(sharpened_q(&[1.0, 1.0, 1.0]).unwrap(), vec![1.0; 3]);
        assert!(sharpened_q(&[]).is_err());
        assert!(sharpened_q(&[1.2]).is_err());
    }

    #[test]
    fn single_tiny_p() {
        // one test: stage one rejects as soon as p <= q/(1+q), then m0 = 0
        let q = sharpened_q(&[0.001]).unwrap();
        assert_eq!(q, vec![0.002]);
        let q = sharpened_q(&[0.04]).unwrap();
        assert_eq!(q, vec![0.042]);
    }

    #[test]
    fn bh_matches_hand_values() {
        let q = bh_q(&[0.01, 0.04, 0.03, 0.5]).unwrap();
        assert!((q[0] - 0.04).abs() < 1e-15);
        assert!((q[1] - 0.0533333333333333).abs() < 1e-12);
        assert!((q[2] - 0.0533333333333333).abs() < 1e-12);
        assert!((q[3] - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn q_monotone_in_p(p in proptest::collection::vec(0.0f64..=1.0, 1..15)) {
            let q = sharpened_q(&p).unwrap();
            for i in 0..p.len() {
                prop_assert!(q[i] > 0.0 && q[i] <= 1.0);
                for j in 0..p.len() {
                    if p[i] <= p[j] {
                        prop_assert!(q[i] <= q[j]);
                    }
                }
            }
        }

        #[test]
        fn q_permutation_equivariant(p in proptest::collection::vec(0.0f64..=1.0, 2..12), rot in 0usize..12) {
            let q = sharpened_q(&p).unwrap();
            let r = rot % p.len();
            let mut pr = p.clone();
            pr.rotate_left(r);
            let mut qr = q.clone();
            qr.rotate_left(r);
            prop_assert_eq!(sharpened_q(&pr).unwrap(), qr);
        }

        #[test]
        fn sharpening_never_raises_above_first_stage(p in proptest::collection::vec(0.0f64..=1.0, 1..20)) {
            let s = sharpened_q(&p).unwrap();
            let f = first_stage_q(&p).unwrap();
            for i in 0..p.len() {
                prop_assert!(s[i] <= f[i]);
            }
        }
    }

    fn toy(remain: Vec<bool>, x1: Vec<f64>) -> PropensityData {
        let n = remain.len();
        let mut x = DMatrix::from_element(n, 2, 1.0);
        for (i, v) in x1.iter().enumerate() {
            x[(i, 1)] = *v;
        }
        PropensityData {
            ids: (0..n).map(|i| format!("h{i}")).collect(),
            names: vec!["(intercept)".into(), "x".into()],
            x,
            remain,
            sampling_weight: vec![2.0; n],
            tracking_weight: vec![1.5; n],
        }
    }

    #[test]
    fn intercept_only_recovers_share() {
        let remain: Vec<bool> = (0..100).map(|i| i % 10 != 0).collect();
        let mut d = toy(remain, vec![0.0; 100]);
        d.x = d.x.columns(0, 1).into_owned();
        d.names.truncate(1);
        let m = fit_remain_propensity(&d).unwrap();
        for p in m.predict(&d.x) {
            assert!((p - 0.9).abs() < 1e-10);
        }
    }

    #[test]
    fn separation_is_reported_then_ridged() {
        let x1: Vec<f64> = (0..20).map(f64::from).collect();
        let remain: Vec<bool> = (0..20).map(|i| i >= 10).collect();
        let d = toy(remain, x1);
        assert!(matches!(fit_remain_propensity(&d), Err(Error::Separation(_))));
        let (m, warn) = fit_remain_propensity_or_ridge(&d, 1.0).unwrap();
        assert!(warn.is_some());
        assert!(m.coef.iter().all(|b| b.is_finite()));
    }

    #[test]
    fn ipw_floor_and_identity() {
        let model = PropensityModel {
            names: vec!["(intercept)".into(), "x".into()],
            coef: vec![-10.0, 0.0],
            iterations: 0,
            ridge: None,
        };
        let d = toy(vec![true, false, true], vec![0.0; 3]);
        let w = ipw_weights(&model, &d, 0.05).unwrap();
        assert_eq!(w.weights.len(), 2);
        assert_eq!(w.weights["h0"], 3.0 / 0.05);
        assert_eq!(w.floor_binding, 2);
        let certain = PropensityModel {
            coef: vec![50.0, 0.0],
            ..model
        };
        let w = ipw_weights(&certain, &d, 0.05).unwrap();
        assert_eq!(w.weights["h2"], 3.0);
    }
}
