//! Residualized honest causal forest for cash-versus-kind heterogeneity,
//! with CATE summaries and plug-in targeting gains.
//!
//! Trees follow the causal-tree recipe: each tree draws a subsample, grows its
//! structure on one half with the honest variance-penalized criterion, and
//! estimates leaf effects on the other half as `cov(D̃, Ỹ) / var(D̃)`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AnalysisFrame, Arm};
use crate::linalg::{kahan_sum, pearson, PivotedQr};
use crate::wls::{design_matrix, RegressionSpec};
use crate::{Error, Result};

/// Smallest sample the forest accepts.
pub const MIN_FOREST_ROWS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub trees: usize,
    pub subsample: f64,
    /// Share of each subsample used to grow the structure.
    pub honesty_split: f64,
    /// Minimum treated and minimum control rows per leaf, in both halves.
    pub min_leaf: usize,
    pub max_depth: usize,
    /// Share of moderators tried at each split; `None` means `√m / m`.
    pub feature_fraction: Option<f64>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            trees: 2000,
            subsample: 0.5,
            honesty_split: 0.5,
            min_leaf: 5,
            max_depth: 64,
            feature_fraction: None,
            seed: 20_180_901,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trees == 0 {
            return Err(Error::invalid("forest needs at least one tree"));
        }
        for (name, v) in [("subsample", self.subsample), ("honesty split", self.honesty_split)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::invalid(format!("{name} fraction {v} outside (0, 1)")));
            }
        }
        if let Some(f) = self.feature_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::invalid(format!("feature fraction {f} outside (0, 1]")));
            }
        }
        if self.min_leaf == 0 {
            return Err(Error::invalid("minimum leaf size must be at least 1"));
        }
        Ok(())
    }

    fn mtry(&self, m: usize) -> usize {
        let f = self.feature_fraction.unwrap_or((m as f64).sqrt() / m as f64);
        ((f * m as f64).ceil() as usize).clamp(1, m)
    }
}

/// Outcome and treatment after partialling out the controls.
#[derive(Debug, Clone, PartialEq)]
pub struct Residualized {
    pub y: Vec<f64>,
    pub d: Vec<f64>,
    /// Raw binary treatment, used for leaf-size constraints.
    pub treated: Vec<bool>,
    pub weights: Vec<f64>,
    pub y_coef: Vec<(String, f64)>,
    pub d_coef: Vec<(String, f64)>,
}

fn wls_residuals(
    y: &[f64],
    x: &DMatrix<f64>,
    w: &[f64],
    names: &[String],
) -> Result<(Vec<f64>, Vec<(String, f64)>)> {
    let n = x.nrows();
    let mut xw = x.clone();
    for r in 0..n {
        xw.row_mut(r).scale_mut(w[r].sqrt());
    }
    // drop columns outside the numerical rank and refit on the rest
    let keep: Vec<usize> = {
        let qr = PivotedQr::new(xw.clone(), 1e-10);
        let bad = qr.deficient_columns();
        (0..x.ncols()).filter(|j| !bad.contains(j)).collect()
    };
    let xk = x.select_columns(&keep);
    let xwk = xw.select_columns(&keep);
    let yw = DVector::from_iterator(n, y.iter().zip(w).map(|(v, wi)| v * wi.sqrt()));
    let qr = PivotedQr::new(xwk, 1e-10);
    let b = qr.solve(&yw)?;
    let fitted = &xk * &b;
    let res = y.iter().zip(fitted.iter()).map(|(a, f)| a - f).collect();
    let coef = keep.iter().zip(b.iter()).map(|(&j, v)| (names[j].clone(), *v)).collect();
    Ok((res, coef))
}

/// WLS-residualizes outcome and treatment on `covariates` plus block fixed effects.
pub fn residualize(
    y: &[f64],
    treated: &[bool],
    covariates: &[(String, Vec<f64>)],
    blocks: Option<&[usize]>,
    weights: &[f64],
) -> Result<Residualized> {
    let n = y.len();
    if treated.len() != n || weights.len() != n || covariates.iter().any(|(_, c)| c.len() != n) {
        return Err(Error::invalid("residualization inputs differ in length"));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::invalid("residualization needs positive finite weights"));
    }
    let d: Vec<f64> = treated.iter().map(|t| f64::from(u8::from(*t))).collect();
    let mut spec = RegressionSpec::new("y", y.to_vec()).weights(weights.to_vec());
    for (name, v) in covariates {
        spec = spec.regressor(name.clone(), v.clone());
    }
    if let Some(b) = blocks {
        spec = spec.fixed_effects(b.to_vec());
    }
    let (x, names, _) = design_matrix(&spec)?;
    let (y_res, y_coef) = wls_residuals(y, &x, weights, &names)?;
    let (d_res, d_coef) = wls_residuals(&d, &x, weights, &names)?;
    Ok(Residualized {
        y: y_res,
        d: d_res,
        treated: treated.to_vec(),
        weights: weights.to_vec(),
        y_coef,
        d_coef,
    })
}

/// The cash-versus-kind sample: GiveDirectly Main against Gikuriro only.
#[derive(Debug, Clone)]
pub struct ForestInput {
    pub residualized: Residualized,
    /// Row-major moderators, one row per kept frame row.
    pub moderators: DMatrix<f64>,
    pub moderator_names: Vec<String>,
    /// Indices into the source frame.
    pub frame_rows: Vec<usize>,
}

/// Builds the forest sample from a frame: keeps positive-weight GD-Main and
/// Gikuriro rows, residualizes on the lagged outcome, covariates and blocks,
/// and uses the lagged outcome plus covariates as moderators.
pub fn cash_vs_kind_input(frame: &AnalysisFrame) -> Result<ForestInput> {
    let frame_rows: Vec<usize> = frame
        .rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.weight > 0.0 && (r.arm == Arm::Gikuriro || r.arm.is_gd_main()))
        .map(|(i, _)| i)
        .collect();
    if frame_rows.is_empty() {
        return Err(Error::invalid("no Gikuriro or GD-Main rows in the frame"));
    }
    let rows: Vec<_> = frame_rows.iter().map(|&i| &frame.rows[i]).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.y).collect();
    let treated: Vec<bool> = rows.iter().map(|r| r.arm.is_gd_main()).collect();
    let w: Vec<f64> = rows.iter().map(|r| r.weight).collect();
    let blocks: Vec<usize> = rows.iter().map(|r| r.block).collect();

    let mut controls: Vec<(String, Vec<f64>)> = Vec::new();
    let mut names = Vec::new();
    if frame.has_baseline {
        controls.push(("y_lag".into(), rows.iter().map(|r| r.y_lag).collect()));
        controls.push((
            "y_lag_missing".into(),
            rows.iter().map(|r| f64::from(u8::from(r.lag_missing))).collect(),
        ));
        names.push("y_lag".to_string());
    }
    for (j, name) in frame.covariate_names.iter().enumerate() {
        controls.push((name.clone(), rows.iter().map(|r| r.covariates[j]).collect()));
        names.push(name.clone());
    }
    let residualized = residualize(&y, &treated, &controls, Some(&blocks), &w)?;
    let m = names.len();
    if m == 0 {
        return Err(Error::invalid("forest needs at least one moderator"));
    }
    let moderators = DMatrix::from_fn(rows.len(), m, |i, j| {
        if frame.has_baseline {
            if j == 0 {
                rows[i].y_lag
            } else {
                rows[i].covariates[j - 1]
            }
        } else {
            rows[i].covariates[j]
        }
    });
    Ok(ForestInput {
        residualized,
        moderators,
        moderator_names: names,
        frame_rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        tau: f64,
        id: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
    /// Rows that grew the structure.
    pub structure: Vec<usize>,
    /// Rows that estimated the leaf effects.
    pub estimation: Vec<usize>,
    pub leaves: usize,
}

impl Tree {
    fn leaf_of(&self, x: &DMatrix<f64>, row: usize) -> (f64, usize) {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    k = if x[(row, *feature)] <= *threshold { *left } else { *right };
                }
                Node::Leaf { tau, id } => return (*tau, *id),
            }
        }
    }

    /// True when the structure and estimation samples are disjoint.
    pub fn is_honest(&self) -> bool {
        let mut a = self.structure.clone();
        let mut b = self.estimation.clone();
        a.sort_unstable();
        b.sort_unstable();
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Equal => return false,
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
            }
        }
        true
    }
}

#[derive(Debug, Clone)]
pub struct CateModel {
    pub trees: Vec<Tree>,
    pub config: ForestConfig,
    pub moderator_names: Vec<String>,
    pub y_coef: Vec<(String, f64)>,
    pub d_coef: Vec<(String, f64)>,
}

/// Weighted moments of (D̃, Ỹ) over a set of rows.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: usize,
    treated: usize,
    w: f64,
    wd: f64,
    wy: f64,
    wdd: f64,
    wdy: f64,
    wyy: f64,
}

impl Moments {
    fn add(&mut self, d: f64, y: f64, w: f64, t: bool) {
        self.n += 1;
        self.treated += usize::from(t);
        self.w += w;
        self.wd += w * d;
        self.wy += w * y;
        self.wdd += w * d * d;
        self.wdy += w * d * y;
        self.wyy += w * y * y;
    }

    fn minus(&self, o: &Moments) -> Moments {
        Moments {
            n: self.n - o.n,
            treated: self.treated - o.treated,
            w: self.w - o.w,
            wd: self.wd - o.wd,
            wy: self.wy - o.wy,
            wdd: self.wdd - o.wdd,
            wdy: self.wdy - o.wdy,
            wyy: self.wyy - o.wyy,
        }
    }

    fn control(&self) -> usize {
        self.n - self.treated
    }

    fn sdd(&self) -> f64 {
        self.wdd - self.wd * self.wd / self.w
    }

    fn tau(&self) -> Option<f64> {
        let sdd = self.sdd();
        if self.w > 0.0 && sdd > 1e-12 * self.wdd.max(1e-300) {
            Some((self.wdy - self.wd * self.wy / self.w) / sdd)
        } else {
            None
        }
    }

    /// Honest causal-tree leaf score, in units of rows:
    /// `n τ̂² − (1 + n_s/n_e) n V̂(τ̂)` with the homoskedastic slope variance.
    fn score(&self, penalty: f64) -> Option<f64> {
        let tau = self.tau()?;
        let n = self.n as f64;
        let sdd = self.sdd();
        let syy = self.wyy - self.wy * self.wy / self.w;
        let sdy = self.wdy - self.wd * self.wy / self.w;
        let dof = (n - 2.0).max(1.0);
        let s2 = ((syy - tau * sdy) / self.w * n / dof).max(0.0);
        let var = s2 / (sdd / self.w * n);
        Some(n * tau * tau - penalty * n * var)
    }
}

struct Grower<'a> {
    x: &'a DMatrix<f64>,
    data: &'a Residualized,
    cfg: &'a ForestConfig,
    mtry: usize,
    penalty: f64,
    nodes: Vec<Node>,
    leaves: usize,
}

impl Grower<'_> {
    fn moments(&self, rows: &[usize]) -> Moments {
        let mut m = Moments::default();
        for &i in rows {
            m.add(self.data.d[i], self.data.y[i], self.data.weights[i], self.data.treated[i]);
        }
        m
    }

    fn admissible(&self, m: &Moments) -> bool {
        m.treated >= self.cfg.min_leaf && m.control() >= self.cfg.min_leaf
    }

    fn leaf(&mut self, est: &[usize]) -> usize {
        let tau = self.moments(est).tau().unwrap_or(0.0);
        self.nodes.push(Node::Leaf { tau, id: self.leaves });
        self.leaves += 1;
        self.nodes.len() - 1
    }

    fn grow(&mut self, s: Vec<usize>, e: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let parent = self.moments(&s);
        let parent_score = parent.score(self.penalty);
        if depth >= self.cfg.max_depth || parent_score.is_none() {
            return self.leaf(&e);
        }
        let m = self.x.ncols();
        let features = index::sample(rng, m, self.mtry).into_vec();
        let mut best: Option<(f64, usize, f64)> = None;
        for &f in &features {
            let mut s_sorted = s.clone();
            s_sorted.sort_by(|&a, &b| self.x[(a, f)].total_cmp(&self.x[(b, f)]).then(a.cmp(&b)));
            let mut e_sorted = e.clone();
            e_sorted.sort_by(|&a, &b| self.x[(a, f)].total_cmp(&self.x[(b, f)]).then(a.cmp(&b)));
            let e_all = self.moments(&e_sorted);
            let mut left = Moments::default();
            let mut e_left = Moments::default();
            let mut ep = 0;
            for k in 0..s_sorted.len().saturating_sub(1) {
                let i = s_sorted[k];
                left.add(self.data.d[i], self.data.y[i], self.data.weights[i], self.data.treated[i]);
                let (v, next) = (self.x[(i, f)], self.x[(s_sorted[k + 1], f)]);
                if v == next {
                    continue;
                }
                let thr = v + (next - v) / 2.0;
                while ep < e_sorted.len() && self.x[(e_sorted[ep], f)] <= thr {
                    let j = e_sorted[ep];
                    e_left.add(self.data.d[j], self.data.y[j], self.data.weights[j], self.data.treated[j]);
                    ep += 1;
                }
                let right = parent.minus(&left);
                let e_right = e_all.minus(&e_left);
                if !(self.admissible(&left)
                    && self.admissible(&right)
                    && self.admissible(&e_left)
                    && self.admissible(&e_right))
                {
                    continue;
                }
                let (Some(sl), Some(sr)) = (left.score(self.penalty), right.score(self.penalty)) else {
                    continue;
                };
                let gain = sl + sr;
                if best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, f, thr));
                }
            }
        }
        match best {
            Some((gain, f, thr)) if gain > parent_score.unwrap_or(f64::NEG_INFINITY) => {
                let (sl, sr): (Vec<usize>, Vec<usize>) = s.into_iter().partition(|&i| self.x[(i, f)] <= thr);
                let (el, er): (Vec<usize>, Vec<usize>) = e.into_iter().partition(|&i| self.x[(i, f)] <= thr);
                let slot = self.nodes.len();
                self.nodes.push(Node::Leaf { tau: 0.0, id: usize::MAX });
                let left = self.grow(sl, el, depth + 1, rng);
                let right = self.grow(sr, er, depth + 1, rng);
                self.nodes[slot] = Node::Split {
                    feature: f,
                    threshold: thr,
                    left,
                    right,
                };
                slot
            }
            _ => self.leaf(&e),
        }
    }
}

fn grow_tree(x: &DMatrix<f64>, data: &Residualized, cfg: &ForestConfig, tree: usize) -> Tree {
    let n = x.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(tree as u64);
    let size = ((cfg.subsample * n as f64).round() as usize).clamp(2, n);
    let mut sample = index::sample(&mut rng, n, size).into_vec();
    let cut = ((cfg.honesty_split * size as f64).round() as usize).clamp(1, size - 1);
    let mut estimation = sample.split_off(cut);
    let mut structure = sample;
    structure.sort_unstable();
    estimation.sort_unstable();
    let penalty = 1.0 + structure.len() as f64 / estimation.len() as f64;
    let mut g = Grower {
        x,
        data,
        cfg,
        mtry: cfg.mtry(x.ncols()),
        penalty,
        nodes: Vec::new(),
        leaves: 0,
    };
    let root = g.grow(structure.clone(), estimation.clone(), 0, &mut rng);
    debug_assert_eq!(root, 0);
    Tree {
        nodes: g.nodes,
        structure,
        estimation,
        leaves: g.leaves,
    }
}

fn map_trees(n: usize, f: impl Fn(usize) -> Tree + Sync + Send) -> Vec<Tree> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Fits the honest forest on residualized data and moderators `x` (one row per observation).
pub fn fit_forest(
    data: &Residualized,
    x: &DMatrix<f64>,
    moderator_names: &[String],
    config: &ForestConfig,
) -> Result<CateModel> {
    config.validate()?;
    let n = data.y.len();
    if n < MIN_FOREST_ROWS {
        return Err(Error::TooFewRows {
            rows: n,
            params: MIN_FOREST_ROWS,
        });
    }
    if x.nrows() != n || data.d.len() != n || data.treated.len() != n || data.weights.len() != n {
        return Err(Error::invalid("forest inputs differ in length"));
    }
    if x.ncols() == 0 || moderator_names.len() != x.ncols() {
        return Err(Error::invalid("moderator names do not match the moderator matrix"));
    }
    if x.iter().any(|v| !v.is_finite()) || data.y.iter().chain(&data.d).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite forest input"));
    }
    let trees = map_trees(config.trees, |t| grow_tree(x, data, config, t));
    Ok(CateModel {
        trees,
        config: *config,
        moderator_names: moderator_names.to_vec(),
        y_coef: data.y_coef.clone(),
        d_coef: data.d_coef.clone(),
    })
}

impl CateModel {
    /// Per-row CATE: the average of leaf effects across trees.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.moderator_names.len() {
            return Err(Error::invalid(format!(
                "expected {} moderators, got {}",
                self.moderator_names.len(),
                x.ncols()
            )));
        }
        let t = self.trees.len() as f64;
        Ok((0..x.nrows())
            .map(|r| kahan_sum(self.trees.iter().map(|tree| tree.leaf_of(x, r).0)) / t)
            .collect())
    }

    /// Per-row predictions averaged within the leaves of the first tree, a
    /// coarse "subgroup mean" alternative to per-row CATEs.
    pub fn predict_leaf_means(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let per_row = self.predict(x)?;
        let tree = &self.trees[0];
        let ids: Vec<usize> = (0..x.nrows()).map(|r| tree.leaf_of(x, r).1).collect();
        let mut groups: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (id, p) in ids.iter().zip(&per_row) {
            let g = groups.entry(*id).or_insert((0.0, 0));
            g.0 += p;
            g.1 += 1;
        }
        Ok(ids.iter().map(|id| groups[id].0 / groups[id].1 as f64).collect())
    }

    pub fn all_honest(&self) -> bool {
        self.trees.iter().all(Tree::is_honest)
    }
}

/// Empirical CDF of predictions: sorted values with `F = rank / n`.
pub fn cate_cdf(predictions: &[f64]) -> Result<Vec<(f64, f64)>> {
    if predictions.is_empty() {
        return Err(Error::invalid("CDF of an empty sample"));
    }
    let mut v = predictions.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(v.len());
    for (i, x) in v.into_iter().enumerate() {
        let f = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == x => last.1 = f,
            _ => out.push((x, f)),
        }
    }
    Ok(out)
}

/// Mean of z-scored prediction vectors (e.g. a child-growth index).
pub fn standardized_index(parts: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = parts.first().map(Vec::len).ok_or_else(|| Error::invalid("empty index"))?;
    if parts.iter().any(|p| p.len() != n) || n < 2 {
        return Err(Error::invalid("index components must share at least two rows"));
    }
    let mut out = vec![0.0; n];
    for p in parts {
        let mean = p.iter().sum::<f64>() / n as f64;
        let sd = (p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        if sd == 0.0 {
            return Err(Error::Degenerate("index component has zero variance".into()));
        }
        for (o, v) in out.iter_mut().zip(p) {
            *o += (v - mean) / sd / parts.len() as f64;
        }
    }
    Ok(out)
}

/// Pearson correlations between outcome-specific CATE vectors on one sample.
pub fn cross_outcome_correlation(predictions: &[(String, Vec<f64>)]) -> Result<DMatrix<f64>> {
    let k = predictions.len();
    if k == 0 {
        return Err(Error::invalid("no prediction vectors"));
    }
    let n = predictions[0].1.len();
    if predictions.iter().any(|(_, p)| p.len() != n) {
        return Err(Error::invalid("prediction vectors come from different samples"));
    }
    let mut c = DMatrix::identity(k, k);
    for i in 0..k {
        for j in (i + 1)..k {
            let r = pearson(&predictions[i].1, &predictions[j].1).ok_or_else(|| {
                Error::Degenerate(format!(
                    "zero-variance predictions for `{}` or `{}`",
                    predictions[i].0, predictions[j].0
                ))
            })?;
            c[(i, j)] = r;
            c[(j, i)] = r;
        }
    }
    Ok(c)
}

/// Standardizes to the control-group (weighted) mean and SD.
pub fn control_standardize(y: &[f64], control: &[bool], weights: &[f64]) -> Result<Vec<f64>> {
    let (mut w, mut s, mut ss) = (0.0, 0.0, 0.0);
    for ((v, c), wi) in y.iter().zip(control).zip(weights) {
        if *c {
            w += wi;
            s += wi * v;
            ss += wi * v * v;
        }
    }
    if w <= 0.0 {
        return Err(Error::invalid("no control rows to standardize on"));
    }
    let mean = s / w;
    let var = ss / w - mean * mean;
    if var <= 0.0 {
        return Err(Error::Degenerate("control group has zero variance".into()));
    }
    let sd = var.sqrt();
    Ok(y.iter().map(|v| (v - mean) / sd).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetingReport {
    pub outcomes: Vec<String>,
    /// Gain on each outcome when each row gets cash iff its own CATE is positive.
    pub per_outcome_gain: Vec<f64>,
    /// Gain on each outcome under the single composite assignment.
    pub composite_by_outcome: Vec<f64>,
    pub composite_gain: f64,
    pub mean_per_outcome_gain: f64,
    /// Share of rows assigned cash by the composite rule.
    pub composite_cash_share: f64,
}

/// Plug-in targeting gains relative to giving everyone the in-kind program.
/// CATEs are cash minus kind, in control-SD units. The composite rule assigns
/// cash when the mean CATE across outcomes is positive.
pub fn targeting_gains(cates: &[(String, Vec<f64>)]) -> Result<TargetingReport> {
    let k = cates.len();
    if k == 0 {
        return Err(Error::invalid("no CATE vectors"));
    }
    let n = cates[0].1.len();
    if n == 0 || cates.iter().any(|(_, c)| c.len() != n) {
        return Err(Error::invalid("CATE vectors come from different samples"));
    }
    if cates.iter().any(|(_, c)| c.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("non-finite CATE"));
    }
    let assign: Vec<bool> = (0..n)
        .map(|i| cates.iter().map(|(_, c)| c[i]).sum::<f64>() / k as f64 > 0.0)
        .collect();
    // plain left-to-right sums: both sides accumulate in the same order, so
    // the termwise bound a·τ ≤ max(τ, 0) survives rounding
    let per_outcome_gain: Vec<f64> = cates
        .iter()
        .map(|(_, c)| c.iter().fold(0.0, |acc, t| acc + t.max(0.0)) / n as f64)
        .collect();
    let composite_by_outcome: Vec<f64> = cates
        .iter()
        .map(|(_, c)| {
            c.iter()
                .zip(&assign)
                .fold(0.0, |acc, (t, a)| acc + if *a { *t } else { 0.0 })
                / n as f64
        })
        .collect();
    let mean_per_outcome_gain = per_outcome_gain.iter().fold(0.0, |a, g| a + g) / k as f64;
    let composite_gain = composite_by_outcome.iter().fold(0.0, |a, g| a + g) / k as f64;
    Ok(TargetingReport {
        outcomes: cates.iter().map(|(n, _)| n.clone()).collect(),
        per_outcome_gain,
        composite_by_outcome,
        composite_gain,
        mean_per_outcome_gain,
        composite_cash_share: assign.iter().filter(|a| **a).count() as f64 / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simlab::{forest_draw, CateShape};
    use crate::wls::{fit, WlsOptions};

    fn draw_input(shape: CateShape, n: usize, seed: u64) -> (Residualized, DMatrix<f64>, Vec<String>, Vec<f64>) {
        let fd = forest_draw(shape, n, 3, seed, 0);
        let treated: Vec<bool> = fd.d.iter().map(|d| *d > 0.5).collect();
        let covs: Vec<(String, Vec<f64>)> = (0..3)
            .map(|j| (format!("m{j}"), fd.x.column(j).iter().copied().collect()))
            .collect();
        let res = residualize(&fd.y, &treated, &covs, None, &vec![1.0; n]).unwrap();
        let names = covs.iter().map(|c| c.0.clone()).collect();
        (res, fd.x, names, fd.cate)
    }

    #[test]
    fn residualized_slope_reproduces_itt() {
        let fd = forest_draw(CateShape::Homogeneous { tau: 0.4 }, 300, 3, 5, 1);
        let treated: Vec<bool> = fd.d.iter().map(|d| *d > 0.5).collect();
        let covs: Vec<(String, Vec<f64>)> = (0..3)
            .map(|j| (format!("m{j}"), fd.x.column(j).iter().copied().collect()))
            .collect();
        let w: Vec<f64> = (0..300).map(|i| 0.5 + (i % 7) as f64 / 7.0).collect();
        let blocks: Vec<usize> = (0..300).map(|i| i % 6).collect();
        let r = residualize(&fd.y, &treated, &covs, Some(&blocks), &w).unwrap();

        let mut full = RegressionSpec::new("y", fd.y.clone())
            .weights(w.clone())
            .fixed_effects(blocks)
            .regressor("d", fd.d.clone());
        for (n, v) in &covs {
            full = full.regressor(n.clone(), v.clone());
        }
        let itt = fit(&full, &WlsOptions::default()).unwrap().coef_of("d").unwrap();
        let short = RegressionSpec::new("y", r.y.clone()).weights(w).regressor("d", r.d.clone());
        let slope = fit(&short, &WlsOptions::default()).unwrap().coef_of("d").unwrap();
        assert!((itt - slope).abs() < 1e-8, "{itt} vs {slope}");
    }

    #[test]
    fn constant_covariate_is_dropped() {
        let fd = forest_draw(CateShape::Zero, 250, 2, 9, 0);
        let treated: Vec<bool> = fd.d.iter().map(|d| *d > 0.5).collect();
        let base = vec![("m0".to_string(), fd.x.column(0).iter().copied().collect::<Vec<_>>())];
        let mut with_const = base.clone();
        with_const.push(("k".to_string(), vec![3.0; 250]));
        let a = residualize(&fd.y, &treated, &base, None, &vec![1.0; 250]).unwrap();
        let b = residualize(&fd.y, &treated, &with_const, None, &vec![1.0; 250]).unwrap();
        for (u, v) in a.y.iter().zip(&b.y) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn trees_are_honest_and_deterministic() {
        let (res, x, names, _) = draw_input(CateShape::Step { low: 0.0, high: 1.0 }, 400, 2);
        let cfg = ForestConfig {
            trees: 40,
            ..ForestConfig::default()
        };
        let a = fit_forest(&res, &x, &names, &cfg).unwrap();
        let b = fit_forest(&res, &x, &names, &cfg).unwrap();
        assert!(a.all_honest());
        assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
    }

    #[test]
    fn affine_rescaling_leaves_predictions_unchanged() {
        let (res, x, names, _) = draw_input(CateShape::Step { low: -0.5, high: 0.5 }, 300, 4);
        let cfg = ForestConfig {
            trees: 30,
            ..ForestConfig::default()
        };
        let mut x2 = x.clone();
        for v in x2.column_mut(0).iter_mut() {
            *v = 3.0 * *v + 7.0;
        }
        let a = fit_forest(&res, &x, &names, &cfg).unwrap().predict(&x).unwrap();
        let b = fit_forest(&res, &x2, &names, &cfg).unwrap().predict(&x2).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn small_samples_rejected() {
        let (res, x, names, _) = draw_input(CateShape::Zero, 150, 1);
        assert!(matches!(
            fit_forest(&res, &x, &names, &ForestConfig::default()),
            Err(Error::TooFewRows { .. })
        ));
    }

    #[test]
    fn cdf_matches_sorted_oracle() {
        let p = [0.3, -0.1, 0.3, 0.9];
        let cdf = cate_cdf(&p).unwrap();
        assert_eq!(cdf, vec![(-0.1, 0.25), (0.3, 0.75), (0.9, 1.0)]);
        assert_eq!(cate_cdf(&[2.0, 2.0]).unwrap(), vec![(2.0, 1.0)]);
    }

    #[test]
    fn correlation_matrix_shape() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![4.0, 1.0, 3.0, 2.0];
        let c = cross_outcome_correlation(&[("a".into(), a.clone()), ("b".into(), b), ("a2".into(), a)]).unwrap();
        assert_eq!(c[(0, 2)], 1.0);
        assert_eq!(c[(1, 0)], c[(0, 1)]);
        assert!(cross_outcome_correlation(&[("a".into(), vec![1.0; 4]), ("b".into(), vec![1.0, 2.0, 3.0, 4.0])]).is_err());
    }

    #[test]
    fn targeting_one_sided_and_anti_correlated() {
        let r = targeting_gains(&[("x".into(), vec![0.2, 0.4])]).unwrap();
        assert!((r.per_outcome_gain[0] - 0.3).abs() < 1e-15);
        // anti-correlated: composite rule sees mean 0 and gives nobody cash
        let r = targeting_gains(&[("a".into(), vec![1.0, -1.0]), ("b".into(), vec![-1.0, 1.0])]).unwrap();
        assert_eq!(r.composite_gain, 0.0);
        assert_eq!(r.mean_per_outcome_gain, 0.5);
    }

    #[test]
    fn standardized_index_is_centered() {
        let idx = standardized_index(&[vec![1.0, 2.0, 3.0], vec![10.0, 30.0, 20.0]]).unwrap();
        assert!(idx.iter().sum::<f64>().abs() < 1e-12);
    }
}
