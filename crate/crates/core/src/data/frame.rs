use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Arm, Level, OutcomeSpec, Panel, QuantileMethod, Round, Stratum};
use crate::{Error, Result};

/// Which sample and weights an analysis frame represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Eligible stratum only, sampling × tracking weights.
    EligibleItt,
    /// Both strata pooled with population weights.
    PopulationTce,
    /// Never-treated ineligibles in control and cash villages; treated households
    /// get weight zero, control households are scaled by the probability of not
    /// being treated.
    SpilloverNeverTreat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRow {
    /// Index into `Panel::households`.
    pub household: usize,
    /// Index into `Panel::individuals` for individual-level outcomes.
    pub individual: Option<usize>,
    pub village: usize,
    pub block: usize,
    pub arm: Arm,
    pub stratum: Stratum,
    pub y: f64,
    pub y_lag: f64,
    pub lag_missing: bool,
    pub covariates: Vec<f64>,
    pub weight: f64,
    pub treated: bool,
}

/// Regression-ready rows for one outcome. Immutable once built.
#[derive(Debug, Clone)]
pub struct AnalysisFrame {
    pub outcome: OutcomeSpec,
    pub mode: WeightMode,
    pub covariate_names: Vec<String>,
    /// False when the outcome is never observed at baseline (endline cross-section).
    pub has_baseline: bool,
    pub rows: Vec<FrameRow>,
}

impl AnalysisFrame {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn y(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.y).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.weight).collect()
    }

    pub fn clusters(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.village).collect()
    }

    pub fn blocks(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.block).collect()
    }

    pub fn any_lag_missing(&self) -> bool {
        self.rows.iter().any(|r| r.lag_missing)
    }

    /// A copy keeping only rows that satisfy `keep`.
    pub fn filtered(&self, mut keep: impl FnMut(&FrameRow) -> bool) -> AnalysisFrame {
        AnalysisFrame {
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
            ..self.clone_header()
        }
    }

    /// A copy with every row's weight multiplied by `factor(row)`.
    pub fn reweighted(&self, factor: impl Fn(&FrameRow) -> f64) -> AnalysisFrame {
        AnalysisFrame {
            rows: self
                .rows
                .iter()
                .map(|r| FrameRow {
                    weight: r.weight * factor(r),
                    ..r.clone()
                })
                .collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> AnalysisFrame {
        AnalysisFrame {
            outcome: self.outcome.clone(),
            mode: self.mode,
            covariate_names: self.covariate_names.clone(),
            has_baseline: self.has_baseline,
            rows: Vec::new(),
        }
    }

    /// Weighted mean and standard deviation of the outcome among control rows.
    pub fn control_mean_sd(&self) -> Option<(f64, f64)> {
        let (mut sw, mut swy, mut swyy) = (0.0, 0.0, 0.0);
        for r in self.rows.iter().filter(|r| r.arm == Arm::Control) {
            sw += r.weight;
            swy += r.weight * r.y;
            swyy += r.weight * r.y * r.y;
        }
        if sw <= 0.0 {
            return None;
        }
        let mean = swy / sw;
        let var = (swyy / sw - mean * mean).max(0.0);
        Some((mean, var.sqrt()))
    }
}

struct Candidate {
    household: usize,
    individual: Option<usize>,
    baseline: Option<f64>,
    endline: f64,
}

/// Builds the frame for one outcome under one weighting scheme.
///
/// `ipw` optionally maps household ids to inverse remain-propensity multipliers;
/// when given, every retained household must appear in it.
pub fn build_analysis_frame(
    panel: &Panel,
    spec: &OutcomeSpec,
    mode: WeightMode,
    ipw: Option<&BTreeMap<String, f64>>,
) -> Result<AnalysisFrame> {
    spec.transform.validate()?;
    let design = &panel.design;

    let in_sample = |h: usize| -> bool {
        let hh = &panel.households[h];
        match mode {
            WeightMode::EligibleItt => hh.stratum == Stratum::Eligible,
            WeightMode::PopulationTce => true,
            WeightMode::SpilloverNeverTreat => {
                let arm = panel.arm_of(h);
                hh.stratum == Stratum::Ineligible
                    && hh.never_treat
                    && (arm == Arm::Control || arm.is_gd())
            }
        }
    };

    let mut observed_anywhere = false;
    let mut candidates = Vec::new();
    match spec.level {
        Level::Household => {
            for (h, hh) in panel.households.iter().enumerate() {
                let end = hh.outcome(&spec.name, Round::Endline);
                observed_anywhere |= end.is_some() || hh.outcome(&spec.name, Round::Baseline).is_some();
                if !in_sample(h) {
                    continue;
                }
                if let Some(endline) = end {
                    candidates.push(Candidate {
                        household: h,
                        individual: None,
                        baseline: hh.outcome(&spec.name, Round::Baseline),
                        endline,
                    });
                }
            }
        }
        Level::Individual => {
            for (i, ind) in panel.individuals.iter().enumerate() {
                let end = ind.outcome(&spec.name, Round::Endline);
                observed_anywhere |= end.is_some() || ind.outcome(&spec.name, Round::Baseline).is_some();
                let h = panel
                    .household_idx(&ind.household)
                    .expect("panel validated household links");
                if !in_sample(h) || !spec.filter.admits(ind) {
                    continue;
                }
                if let Some(endline) = end {
                    candidates.push(Candidate {
                        household: h,
                        individual: Some(i),
                        baseline: ind.outcome(&spec.name, Round::Baseline),
                        endline,
                    });
                }
            }
        }
    }
    if !observed_anywhere {
        return Err(Error::UnknownOutcome(spec.name.clone()));
    }
    if candidates.is_empty() {
        return Err(Error::invalid(format!(
            "weight mode {mode:?} leaves no rows with endline `{}`",
            spec.name
        )));
    }
    if mode == WeightMode::PopulationTce {
        let has = |s: Stratum| candidates.iter().any(|c| panel.households[c.household].stratum == s);
        if !(has(Stratum::Eligible) && has(Stratum::Ineligible)) {
            return Err(Error::invalid(
                "population weighting needs both eligible and ineligible rows",
            ));
        }
    }

    // weights
    let not_treated_share = if mode == WeightMode::SpilloverNeverTreat {
        let (mut w_all, mut w_treated) = (0.0, 0.0);
        for (h, hh) in panel.households.iter().enumerate() {
            if hh.stratum == Stratum::Ineligible && hh.never_treat && panel.arm_of(h).is_gd() {
                w_all += hh.sampling_weight;
                if hh.treated {
                    w_treated += hh.sampling_weight;
                }
            }
        }
        if w_all > 0.0 {
            1.0 - w_treated / w_all
        } else {
            1.0
        }
    } else {
        1.0
    };

    let mut weights = Vec::with_capacity(candidates.len());
    for c in &candidates {
        let hh = &panel.households[c.household];
        let mut w = hh.sampling_weight * hh.tracking_weight;
        if let Some(map) = ipw {
            let m = map.get(&hh.id).ok_or_else(|| {
                Error::invalid(format!("no inverse-propensity weight for household `{}`", hh.id))
            })?;
            w *= m;
        }
        if mode == WeightMode::SpilloverNeverTreat {
            let arm = panel.arm_of(c.household);
            if arm == Arm::Control {
                w *= not_treated_share;
            } else if hh.treated {
                w = 0.0;
            }
        }
        weights.push(w);
    }

    // transforms, one round at a time over the retained rows
    let endline_raw: Vec<f64> = candidates.iter().map(|c| c.endline).collect();
    let endline = spec.transform.apply(&endline_raw, QuantileMethod::default())?;
    let base_idx: Vec<usize> = (0..candidates.len())
        .filter(|&i| candidates[i].baseline.is_some())
        .collect();
    let base_raw: Vec<f64> = base_idx.iter().map(|&i| candidates[i].baseline.unwrap()).collect();
    let base_tr = spec.transform.apply(&base_raw, QuantileMethod::default())?;
    let mut baseline: Vec<Option<f64>> = vec![None; candidates.len()];
    for (k, &i) in base_idx.iter().enumerate() {
        baseline[i] = Some(base_tr[k]);
    }
    let has_baseline = !base_idx.is_empty();

    // weighted arm-specific baseline means for imputation
    let mut arm_sums: BTreeMap<Arm, (f64, f64)> = BTreeMap::new();
    let (mut tot_w, mut tot_wy) = (0.0, 0.0);
    for (i, c) in candidates.iter().enumerate() {
        if let Some(b) = baseline[i] {
            let w = panel.households[c.household].sampling_weight;
            let e = arm_sums.entry(panel.arm_of(c.household)).or_default();
            e.0 += w;
            e.1 += w * b;
            tot_w += w;
            tot_wy += w * b;
        }
    }
    let overall_mean = if tot_w > 0.0 { tot_wy / tot_w } else { 0.0 };

    // covariates, missing entries filled with the weighted frame mean
    let covariate_names = panel.covariate_names();
    let mut cov_fill = vec![0.0; covariate_names.len()];
    for (j, name) in covariate_names.iter().enumerate() {
        let (mut sw, mut swx) = (0.0, 0.0);
        for (c, w) in candidates.iter().zip(&weights) {
            if let Some(x) = panel.households[c.household].covariates.get(name) {
                sw += w.max(f64::MIN_POSITIVE);
                swx += w.max(f64::MIN_POSITIVE) * x;
            }
        }
        cov_fill[j] = if sw > 0.0 { swx / sw } else { 0.0 };
    }

    let rows = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let hh = &panel.households[c.household];
            let arm = panel.arm_of(c.household);
            let (y_lag, lag_missing) = match (has_baseline, baseline[i]) {
                (false, _) => (0.0, false),
                (true, Some(b)) => (b, false),
                (true, None) => {
                    let fill = arm_sums
                        .get(&arm)
                        .filter(|(w, _)| *w > 0.0)
                        .map(|(w, wy)| wy / w)
                        .unwrap_or(overall_mean);
                    (fill, true)
                }
            };
            FrameRow {
                household: c.household,
                individual: c.individual,
                village: panel.village_of(c.household),
                block: design.block_of(panel.village_of(c.household)),
                arm,
                stratum: hh.stratum,
                y: endline[i],
                y_lag,
                lag_missing,
                covariates: covariate_names
                    .iter()
                    .enumerate()
                    .map(|(j, n)| hh.covariates.get(n).copied().unwrap_or(cov_fill[j]))
                    .collect(),
                weight: weights[i],
                treated: hh.treated,
            }
        })
        .collect();

    Ok(AnalysisFrame {
        outcome: spec.clone(),
        mode,
        covariate_names,
        has_baseline,
        rows,
    })
}
