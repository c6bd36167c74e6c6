//! Named analyses built on the regression core.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::costing::{assign_tau, CostBasis, CostLedger};
use crate::data::{
    build_analysis_frame, AnalysisFrame, Arm, ChoiceRecord, Modality, OutcomeSpec, Panel, Round,
    Stratum, WeightMode,
};
use crate::selection::{post_double_select, DoubleSelectionInput, LassoConfig, Selection};
use crate::wls::{
    bcr_equality_hypothesis, fit, wald, FitResult, LinearHypothesis, RegressionSpec, WaldTest,
    WlsOptions,
};
use crate::{Error, Result};

/// How ANCOVA controls beyond the lagged outcome and block effects are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ControlPolicy {
    /// Lagged outcome and block effects only.
    None,
    Fixed { covariates: Vec<String> },
    /// Post-double-selection over all frame covariates; `always_keep` are
    /// covariates retained unpenalized next to the lag and block effects.
    DoubleSelection {
        #[serde(default)]
        always_keep: Vec<String>,
        #[serde(default)]
        lasso: LassoConfig,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterLevel {
    Village,
    Household,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorOptions {
    pub controls: ControlPolicy,
    pub cluster: ClusterLevel,
    pub wls: WlsOptions,
    /// Override for the interpolation benchmark C (USD).
    pub benchmark: Option<f64>,
    /// Control for the baseline value of the outcome (ANCOVA).
    pub ancova: bool,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions {
            controls: ControlPolicy::DoubleSelection {
                always_keep: Vec::new(),
                lasso: LassoConfig::default(),
            },
            cluster: ClusterLevel::Village,
            wls: WlsOptions::default(),
            benchmark: None,
            ancova: true,
        }
    }
}

/// A fitted analysis together with the descriptive columns of a published table.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub outcome: String,
    pub fit: FitResult,
    pub controls: Vec<String>,
    pub selection: Option<Selection>,
    pub control_mean: Option<f64>,
    pub control_sd: Option<f64>,
}

impl Estimate {
    pub fn coef(&self, name: &str) -> Result<f64> {
        self.fit.coef_of(name)
    }

    pub fn se(&self, name: &str) -> Result<f64> {
        self.fit.se_of(name)
    }

    pub fn p(&self, name: &str) -> Result<f64> {
        self.fit.p_value(name)
    }
}

pub type Column = (String, Vec<f64>);

fn indicator(frame: &AnalysisFrame, f: impl Fn(Arm) -> bool) -> Vec<f64> {
    frame.rows.iter().map(|r| if f(r.arm) { 1.0 } else { 0.0 }).collect()
}

fn present(col: &[f64]) -> bool {
    col.iter().any(|v| *v != 0.0)
}

/// Arm dummies for the pooled (GK, GD-Main, GD-Large) or granular layout,
/// keeping only arms present in the frame.
pub fn treatment_columns(frame: &AnalysisFrame, granular: bool) -> Vec<Column> {
    let mut cols: Vec<Column> = vec![("gikuriro".into(), indicator(frame, |a| a == Arm::Gikuriro))];
    if granular {
        cols.push(("gd_lower".into(), indicator(frame, |a| a == Arm::GdLower)));
        cols.push(("gd_middle".into(), indicator(frame, |a| a == Arm::GdMiddle)));
        cols.push(("gd_upper".into(), indicator(frame, |a| a == Arm::GdUpper)));
    } else {
        cols.push(("gd_main".into(), indicator(frame, Arm::is_gd_main)));
    }
    cols.push(("gd_large".into(), indicator(frame, |a| a == Arm::GdLarge)));
    cols.retain(|(_, v)| present(v));
    cols
}

/// Assembles and fits `y ~ focal + lag + controls + block FE`.
pub fn fit_with_controls(
    frame: &AnalysisFrame,
    focal: Vec<Column>,
    use_lag: bool,
    opts: &EstimatorOptions,
) -> Result<Estimate> {
    if frame.is_empty() {
        return Err(Error::invalid(format!("no rows for `{}`", frame.outcome.name)));
    }
    let n = frame.len();
    let y = frame.y();
    let weights = frame.weights();
    let mut base: Vec<Column> = Vec::new();
    if use_lag && opts.ancova && frame.has_baseline {
        base.push(("y_lag".into(), frame.rows.iter().map(|r| r.y_lag).collect()));
        if frame.any_lag_missing() {
            base.push((
                "y_lag_missing".into(),
                frame.rows.iter().map(|r| f64::from(u8::from(r.lag_missing))).collect(),
            ));
        }
    }
    let cov_col = |name: &str| -> Result<Vec<f64>> {
        let j = frame
            .covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::invalid(format!("unknown covariate `{name}`")))?;
        Ok(frame.rows.iter().map(|r| r.covariates[j]).collect())
    };

    let mut selection = None;
    let mut controls: Vec<Column> = Vec::new();
    match &opts.controls {
        ControlPolicy::None => {}
        ControlPolicy::Fixed { covariates } => {
            for c in covariates {
                controls.push((c.clone(), cov_col(c)?));
            }
        }
        ControlPolicy::DoubleSelection { always_keep, lasso } => {
            let mut keep_cols = base.clone();
            for c in always_keep {
                keep_cols.push((c.clone(), cov_col(c)?));
            }
            // block dummies, first block omitted (the intercept is added downstream)
            let blocks: Vec<usize> = frame
                .blocks()
                .into_iter()
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            let fe_count = blocks.len().saturating_sub(1);
            let mut keep = DMatrix::zeros(n, keep_cols.len() + fe_count);
            for (j, (_, v)) in keep_cols.iter().enumerate() {
                for i in 0..n {
                    keep[(i, j)] = v[i];
                }
            }
            for (i, r) in frame.rows.iter().enumerate() {
                if let Ok(pos) = blocks[1..].binary_search(&r.block) {
                    keep[(i, keep_cols.len() + pos)] = 1.0;
                }
            }
            let mut keep_names: Vec<String> = keep_cols.iter().map(|c| c.0.clone()).collect();
            keep_names.extend(blocks[1..].iter().map(|b| format!("fe[{b}]")));

            let cand_names: Vec<String> = frame
                .covariate_names
                .iter()
                .filter(|c| !always_keep.contains(c))
                .cloned()
                .collect();
            let mut cand = DMatrix::zeros(n, cand_names.len());
            for (j, c) in cand_names.iter().enumerate() {
                for (i, v) in cov_col(c)?.into_iter().enumerate() {
                    cand[(i, j)] = v;
                }
            }
            let targets: Vec<Vec<f64>> = focal.iter().map(|c| c.1.clone()).collect();
            let sel = post_double_select(
                &DoubleSelectionInput {
                    y: &y,
                    treatments: &targets,
                    candidates: &cand,
                    candidate_names: &cand_names,
                    keep: &keep,
                    keep_names: &keep_names,
                    weights: &weights,
                },
                lasso,
            )?;
            for c in always_keep {
                controls.push((c.clone(), cov_col(c)?));
            }
            for c in &sel.selected_names {
                controls.push((c.clone(), cov_col(c)?));
            }
            selection = Some(sel);
        }
    }

    let clusters = match opts.cluster {
        ClusterLevel::Village => frame.clusters(),
        ClusterLevel::Household => frame.rows.iter().map(|r| r.household).collect(),
    };
    let mut spec = RegressionSpec::new(frame.outcome.name.clone(), y)
        .weights(weights)
        .clusters(clusters)
        .fixed_effects(frame.blocks());
    let control_names: Vec<String> = base.iter().chain(&controls).map(|c| c.0.clone()).collect();
    for (name, v) in focal.into_iter().chain(base).chain(controls) {
        spec = spec.regressor(name, v);
    }
    let fit = fit(&spec, &opts.wls)?;
    let (control_mean, control_sd) = match frame.control_mean_sd() {
        Some((m, s)) => (Some(m), Some(s)),
        None => (None, None),
    };
    Ok(Estimate {
        outcome: frame.outcome.name.clone(),
        fit,
        controls: control_names,
        selection,
        control_mean,
        control_sd,
    })
}

/// Interpolation regressors: any-treatment and Gikuriro dummies plus the τ
/// polynomial (τ in $100), which is omitted when τ is identically zero.
pub fn ce_regressors(frame: &AnalysisFrame, variant: CeVariant, tau_by_village: &[f64]) -> Vec<Column> {
    let t_any = indicator(frame, Arm::is_treated);
    let t_gk = indicator(frame, |a| a == Arm::Gikuriro);
    let tau100: Vec<f64> = frame.rows.iter().map(|r| tau_by_village[r.village] / 100.0).collect();
    let mut focal: Vec<Column> = vec![("any_treatment".into(), t_any), ("gikuriro".into(), t_gk)];
    if tau100.iter().any(|t| *t != 0.0) {
        for k in 1..=variant.degree() {
            focal.push((tau_name(k), tau100.iter().map(|t| t.powi(k as i32)).collect()));
        }
    }
    focal
}

/// Entry point for the named analyses over one panel and cost ledger.
pub struct Analysis<'a> {
    pub panel: &'a Panel,
    pub ledger: &'a CostLedger,
    pub options: EstimatorOptions,
    /// Household id → inverse remain-propensity multiplier, applied to every frame.
    pub ipw: Option<&'a BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Pooled,
    Granular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeVariant {
    Linear,
    Quadratic,
    Cubic,
    DropLower,
    DropMid,
    DropUpper,
    DropLarge,
}

impl CeVariant {
    pub const ALL: [CeVariant; 7] = [
        CeVariant::Linear,
        CeVariant::Quadratic,
        CeVariant::Cubic,
        CeVariant::DropLower,
        CeVariant::DropMid,
        CeVariant::DropUpper,
        CeVariant::DropLarge,
    ];

    pub fn degree(self) -> usize {
        match self {
            CeVariant::Quadratic => 2,
            CeVariant::Cubic => 3,
            _ => 1,
        }
    }

    pub fn dropped_arm(self) -> Option<Arm> {
        match self {
            CeVariant::DropLower => Some(Arm::GdLower),
            CeVariant::DropMid => Some(Arm::GdMiddle),
            CeVariant::DropUpper => Some(Arm::GdUpper),
            CeVariant::DropLarge => Some(Arm::GdLarge),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            CeVariant::Linear => "linear",
            CeVariant::Quadratic => "quadratic",
            CeVariant::Cubic => "cubic",
            CeVariant::DropLower => "drop_lower",
            CeVariant::DropMid => "drop_mid",
            CeVariant::DropUpper => "drop_upper",
            CeVariant::DropLarge => "drop_large",
        }
    }

    pub fn parse(s: &str) -> Result<CeVariant> {
        CeVariant::ALL
            .into_iter()
            .find(|v| v.label() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown cost-equivalent variant `{s}`")))
    }
}

/// Coefficient with its clustered SE and p-value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coef {
    pub estimate: f64,
    pub se: f64,
    pub p: f64,
}

impl Coef {
    fn of(fit: &FitResult, name: &str) -> Result<Coef> {
        Ok(Coef {
            estimate: fit.coef_of(name)?,
            se: fit.se_of(name)?,
            p: fit.p_value(name)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CostEquivalentResult {
    pub variant: CeVariant,
    pub basis: CostBasis,
    pub benchmark: f64,
    /// Gikuriro minus cash at exactly the benchmark cost.
    pub delta_gk: Coef,
    /// Cash impact at the benchmark cost.
    pub delta_t: Coef,
    /// Slope per additional $100; absent when τ is identically zero.
    pub gamma1: Option<Coef>,
    /// Test of proportional scaling through the origin, `δ^T = γ_1·C/100`.
    pub linear_scaling: Option<WaldTest>,
    pub estimate: Estimate,
}

impl CostEquivalentResult {
    /// Interpolated cash impact at absolute cost `cost` (USD).
    pub fn cash_impact_at(&self, cost: f64) -> f64 {
        let t = (cost - self.benchmark) / 100.0;
        let mut out = self.delta_t.estimate;
        for k in 1..=self.variant.degree() {
            if let Some(i) = self.estimate.fit.index_of(&tau_name(k)) {
                out += self.estimate.fit.coef[i] * t.powi(k as i32);
            }
        }
        out
    }
}

fn tau_name(k: usize) -> String {
    if k == 1 {
        "tau".into()
    } else {
        format!("tau{k}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttritionLevel {
    Household,
    Roster,
    Anthro,
    Anemia,
    NewMember,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttritionOptions {
    pub anthro_outcome: String,
    pub anemia_outcome: String,
    pub with_covariates: bool,
}

impl Default for AttritionOptions {
    fn default() -> Self {
        AttritionOptions {
            anthro_outcome: "haz".into(),
            anemia_outcome: "anemia".into(),
            with_covariates: false,
        }
    }
}

/// One benefit-cost row: GK, GD-Main, GD-Large and tests (a) GK=GD-Main,
/// (b) GK=GD-Large, (c) GD-Main=GD-Large.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcrRow {
    pub outcome: String,
    pub arms: [String; 3],
    pub itt: [f64; 3],
    /// Cost per eligible household, USD.
    pub cost: [f64; 3],
    /// ITT per $100 of cost.
    pub bcr: [f64; 3],
    pub se: [f64; 3],
    pub p_equal: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct LumpSumResult {
    pub estimate: Estimate,
    /// `gd_main + gd_main:lump_sum = 0`.
    pub total_lump_main: WaldTest,
    /// `gd_large + gd_large:lump_sum = 0`.
    pub total_lump_large: Option<WaldTest>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Moderator {
    BaselineAnthro,
    FirstThousandDays,
    Newborn,
    Impatient,
    Inconsistent,
    LackOtherControl,
}

impl Moderator {
    pub fn label(self) -> &'static str {
        match self {
            Moderator::BaselineAnthro => "baseline_anthro",
            Moderator::FirstThousandDays => "first_1000_days",
            Moderator::Newborn => "newborn",
            Moderator::Impatient => "impatient",
            Moderator::Inconsistent => "inconsistent",
            Moderator::LackOtherControl => "lack_other_control",
        }
    }
}

/// Endline age cutoffs (months) for the age-window moderators.
pub const FIRST_1000_DAYS_MONTHS: f64 = 33.0;
pub const NEWBORN_MONTHS: f64 = 13.0;

#[derive(Debug, Clone)]
pub struct HeterogeneityResult {
    pub moderator: Moderator,
    pub estimate: Estimate,
    /// Weighted mean subtracted from a continuous moderator (zero for binary ones).
    pub centered_at: f64,
    /// Cross-arm equality of interaction terms, labelled like `gd_main=gikuriro`.
    pub interaction_tests: Vec<(String, WaldTest)>,
}

/// Traits derived from the convex-time-budget module and control questions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BehavioralTraits {
    pub impatient: Option<bool>,
    pub inconsistent: Option<bool>,
    pub lack_other_control: Option<bool>,
}

/// Impatient: any money taken today when waiting 30 days doubles it.
/// Inconsistent: strictly more allocated to the sooner date when the menu
/// starts today than when it starts at 90 days. Lacking other control: any
/// listed flag set. Incomplete records give a missing trait, never `false`.
pub fn ctb_classify(record: &ChoiceRecord) -> BehavioralTraits {
    let ctb = record.ctb.as_ref();
    let impatient = ctb.and_then(|c| c.soon_at_double).map(|s| s > 0.0);
    let inconsistent = ctb.and_then(|c| {
        if c.near.is_empty() || c.near.len() != c.far.len() {
            return None;
        }
        let near: Option<Vec<f64>> = c.near.iter().copied().collect();
        let far: Option<Vec<f64>> = c.far.iter().copied().collect();
        match (near, far) {
            (Some(n), Some(f)) => Some(n.iter().sum::<f64>() > f.iter().sum::<f64>()),
            _ => None,
        }
    });
    let flags = &record.other_control_flags;
    let lack_other_control = if flags.iter().any(|f| *f == Some(true)) {
        Some(true)
    } else if flags.is_empty() || flags.iter().any(|f| f.is_none()) {
        None
    } else {
        Some(false)
    };
    BehavioralTraits {
        impatient,
        inconsistent,
        lack_other_control,
    }
}

fn weighted_mean(v: &[f64], w: &[f64]) -> f64 {
    let sw: f64 = w.iter().sum();
    v.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw
}

impl<'a> Analysis<'a> {
    pub fn new(panel: &'a Panel, ledger: &'a CostLedger, options: EstimatorOptions) -> Self {
        Analysis {
            panel,
            ledger,
            options,
            ipw: None,
        }
    }

    pub fn with_ipw(mut self, ipw: &'a BTreeMap<String, f64>) -> Self {
        self.ipw = Some(ipw);
        self
    }

    pub fn frame(&self, spec: &OutcomeSpec, mode: WeightMode) -> Result<AnalysisFrame> {
        build_analysis_frame(self.panel, spec, mode, self.ipw)
    }

    /// ANCOVA intention-to-treat on the eligible stratum.
    pub fn itt(&self, spec: &OutcomeSpec, granularity: Granularity) -> Result<Estimate> {
        let frame = self.frame(spec, WeightMode::EligibleItt)?;
        self.itt_on(&frame, granularity)
    }

    pub fn itt_on(&self, frame: &AnalysisFrame, granularity: Granularity) -> Result<Estimate> {
        let focal = treatment_columns(frame, granularity == Granularity::Granular);
        fit_with_controls(frame, focal, true, &self.options)
    }

    /// Interpolation against cash at exactly the benchmark cost per eligible.
    pub fn cost_equivalent(&self, spec: &OutcomeSpec, variant: CeVariant) -> Result<CostEquivalentResult> {
        let frame = self.frame(spec, WeightMode::EligibleItt)?;
        self.cost_equivalent_on(&frame, variant, CostBasis::PerEligible, self.options.benchmark)
    }

    /// Cost-equivalent interpolation on the pooled population with costs per village household.
    pub fn benchmarked_tce(&self, spec: &OutcomeSpec, variant: CeVariant) -> Result<CostEquivalentResult> {
        let frame = self.frame(spec, WeightMode::PopulationTce)?;
        self.cost_equivalent_on(&frame, variant, CostBasis::PerVillageHousehold, self.options.benchmark)
    }

    pub fn cost_equivalent_on(
        &self,
        frame: &AnalysisFrame,
        variant: CeVariant,
        basis: CostBasis,
        benchmark: Option<f64>,
    ) -> Result<CostEquivalentResult> {
        let tau = assign_tau(&self.panel.design, self.ledger, benchmark, basis)?;
        let frame = match variant.dropped_arm() {
            Some(arm) => frame.filtered(|r| r.arm != arm),
            None => frame.clone(),
        };
        let focal = ce_regressors(&frame, variant, &tau.by_village);
        let tau_nonzero = focal.len() > 2;
        let estimate = fit_with_controls(&frame, focal, true, &self.options)?;
        let f = &estimate.fit;
        let gamma1 = if tau_nonzero { Some(Coef::of(f, "tau")?) } else { None };
        let linear_scaling = if tau_nonzero {
            let mut r = DMatrix::zeros(1, f.k);
            r[(0, f.index_of("any_treatment").unwrap())] = 1.0;
            r[(0, f.index_of("tau").unwrap())] = -tau.benchmark / 100.0;
            Some(wald(f, &LinearHypothesis::new(r, nalgebra::DVector::zeros(1))?)?)
        } else {
            None
        };
        Ok(CostEquivalentResult {
            variant,
            basis,
            benchmark: tau.benchmark,
            delta_gk: Coef::of(f, "gikuriro")?,
            delta_t: Coef::of(f, "any_treatment")?,
            gamma1,
            linear_scaling,
            estimate,
        })
    }

    /// Total causal effect on the pooled population.
    pub fn tce(&self, spec: &OutcomeSpec) -> Result<Estimate> {
        let frame = self.frame(spec, WeightMode::PopulationTce)?;
        self.itt_on(&frame, Granularity::Pooled)
    }

    /// Cash-village effects on never-treated ineligibles.
    pub fn spillover(&self, spec: &OutcomeSpec) -> Result<Estimate> {
        let frame = self.frame(spec, WeightMode::SpilloverNeverTreat)?;
        let frame = frame.filtered(|r| r.weight > 0.0);
        if frame.is_empty() {
            return Err(Error::invalid("spillover subsample is empty"));
        }
        let focal = vec![
            ("gd_main".to_string(), indicator(&frame, Arm::is_gd_main)),
            ("gd_large".to_string(), indicator(&frame, |a| a == Arm::GdLarge)),
        ];
        let focal = focal.into_iter().filter(|(_, v)| present(v)).collect();
        fit_with_controls(&frame, focal, true, &self.options)
    }

    /// Regresses an attrition indicator on treatment dummies and block effects.
    pub fn attrition_regression(&self, level: AttritionLevel, opts: &AttritionOptions) -> Result<Estimate> {
        let p = self.panel;
        // (household index, attrited)
        let mut rows: Vec<(usize, bool)> = Vec::new();
        let eligible = |h: usize| p.households[h].stratum == Stratum::Eligible;
        match level {
            AttritionLevel::Household => {
                for h in (0..p.households.len()).filter(|&h| eligible(h)) {
                    rows.push((h, p.households[h].is_attriter()));
                }
            }
            _ => {
                for ind in &p.individuals {
                    let h = p.household_idx(&ind.household).expect("validated link");
                    if !eligible(h) {
                        continue;
                    }
                    let has_round = |r: Round| ind.outcomes.keys().any(|(_, rr)| *rr == r);
                    let seen_base = has_round(Round::Baseline) || ind.age_months_baseline.is_some();
                    let seen_end = has_round(Round::Endline) || ind.age_months_endline.is_some();
                    match level {
                        AttritionLevel::Roster if seen_base => rows.push((h, !seen_end)),
                        AttritionLevel::NewMember if seen_end => rows.push((h, !seen_base)),
                        AttritionLevel::Anthro | AttritionLevel::Anemia => {
                            let name = if level == AttritionLevel::Anthro {
                                &opts.anthro_outcome
                            } else {
                                &opts.anemia_outcome
                            };
                            if ind.outcome(name, Round::Baseline).is_some() {
                                rows.push((h, ind.outcome(name, Round::Endline).is_none()));
                            }
                        }
                        _ => {}
                    }
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::invalid(format!("no rows at attrition level {level:?}")));
        }
        let y: Vec<f64> = rows.iter().map(|(_, a)| f64::from(u8::from(*a))).collect();
        if y.iter().all(|v| *v == y[0]) {
            return Err(Error::Degenerate(format!(
                "attrition indicator at level {level:?} has no variation"
            )));
        }
        let arm = |h: usize| p.arm_of(h);
        let mut spec = RegressionSpec::new(format!("attrit_{level:?}").to_lowercase(), y)
            .weights(rows.iter().map(|(h, _)| p.households[*h].sampling_weight).collect())
            .clusters(rows.iter().map(|(h, _)| p.village_of(*h)).collect())
            .fixed_effects(rows.iter().map(|(h, _)| p.block_of(*h)).collect());
        let dummies: [(&str, fn(Arm) -> bool); 3] = [
            ("gikuriro", |a| a == Arm::Gikuriro),
            ("gd_main", Arm::is_gd_main),
            ("gd_large", |a| a == Arm::GdLarge),
        ];
        for (name, f) in dummies {
            let v: Vec<f64> = rows.iter().map(|(h, _)| f64::from(u8::from(f(arm(*h))))).collect();
            if present(&v) {
                spec = spec.regressor(name, v);
            }
        }
        let mut controls = Vec::new();
        if opts.with_covariates {
            for c in p.covariate_names() {
                let obs: Vec<f64> = rows
                    .iter()
                    .filter_map(|(h, _)| p.households[*h].covariates.get(&c).copied())
                    .collect();
                let fill = obs.iter().sum::<f64>() / obs.len().max(1) as f64;
                let v: Vec<f64> = rows
                    .iter()
                    .map(|(h, _)| p.households[*h].covariates.get(&c).copied().unwrap_or(fill))
                    .collect();
                spec = spec.regressor(c.clone(), v);
                controls.push(c);
            }
        }
        let control_rows: Vec<f64> = rows
            .iter()
            .zip(&spec.y)
            .filter(|((h, _), _)| arm(*h) == Arm::Control)
            .map(|(_, y)| *y)
            .collect();
        let control_mean = (!control_rows.is_empty())
            .then(|| control_rows.iter().sum::<f64>() / control_rows.len() as f64);
        let fit = fit(&spec, &self.options.wls)?;
        Ok(Estimate {
            outcome: spec.outcome.clone(),
            fit,
            controls,
            selection: None,
            control_mean,
            control_sd: None,
        })
    }

    /// Cost per eligible household for GK, GD-Main and GD-Large; GD-Main is the
    /// village-count-weighted mean of the three small cash arms.
    pub fn bcr_costs(&self) -> Result<[f64; 3]> {
        let counts = self.panel.design.arm_counts();
        let (mut num, mut den) = (0.0, 0.0);
        for arm in [Arm::GdLower, Arm::GdMiddle, Arm::GdUpper] {
            let n = counts[&arm] as f64;
            if n > 0.0 {
                num += n * self.ledger.require(arm)?.cost_per_eligible();
                den += n;
            }
        }
        if den == 0.0 {
            return Err(Error::invalid("no GD-Main villages for benefit-cost ratios"));
        }
        Ok([
            self.ledger.require(Arm::Gikuriro)?.cost_per_eligible(),
            num / den,
            self.ledger.require(Arm::GdLarge)?.cost_per_eligible(),
        ])
    }

    pub fn bcr_row(&self, est: &Estimate) -> Result<BcrRow> {
        let cost = self.bcr_costs()?;
        let names = ["gikuriro", "gd_main", "gd_large"];
        let f = &est.fit;
        let idx: Vec<usize> = names
            .iter()
            .map(|n| f.index_of(n).ok_or_else(|| Error::invalid(format!("ITT fit lacks `{n}`"))))
            .collect::<Result<_>>()?;
        let mut row = BcrRow {
            outcome: est.outcome.clone(),
            arms: names.map(String::from),
            itt: [0.0; 3],
            cost,
            bcr: [0.0; 3],
            se: [0.0; 3],
            p_equal: [0.0; 3],
        };
        for a in 0..3 {
            let c100 = cost[a] / 100.0;
            if c100 <= 0.0 {
                return Err(Error::invalid(format!("{} has zero cost", names[a])));
            }
            row.itt[a] = f.coef[idx[a]];
            row.bcr[a] = f.coef[idx[a]] / c100;
            row.se[a] = f.cov[(idx[a], idx[a])].sqrt() / c100;
        }
        for (t, (i, j)) in [(0, 1), (0, 2), (1, 2)].into_iter().enumerate() {
            let h = bcr_equality_hypothesis(f.k, idx[i], idx[j], cost[i], cost[j])?;
            row.p_equal[t] = wald(f, &h)?.p;
        }
        Ok(row)
    }

    /// Benefit-cost ratios per $100 with pairwise equality tests.
    pub fn bcr_table(&self, specs: &[OutcomeSpec]) -> Result<Vec<BcrRow>> {
        specs
            .iter()
            .map(|s| self.bcr_row(&self.itt(s, Granularity::Pooled)?))
            .collect()
    }

    /// Lump-sum versus flow contrasts among cash villages (choice households excluded).
    pub fn lumpsum_flow(&self, spec: &OutcomeSpec) -> Result<LumpSumResult> {
        let frame = self.frame(spec, WeightMode::EligibleItt)?;
        let mut missing = None;
        let frame = frame.filtered(|r| {
            if r.arm == Arm::Control {
                return true;
            }
            if !r.arm.is_gd() {
                return false;
            }
            match self.panel.households[r.household].modality {
                Some(Modality::Choice) => false,
                Some(_) => true,
                None => {
                    missing.get_or_insert(r.household);
                    true
                }
            }
        });
        if let Some(h) = missing {
            return Err(Error::invalid(format!(
                "cash household `{}` has no modality label",
                self.panel.households[h].id
            )));
        }
        let lump: Vec<f64> = frame
            .rows
            .iter()
            .map(|r| f64::from(u8::from(self.panel.households[r.household].modality == Some(Modality::LumpSum))))
            .collect();
        let main = indicator(&frame, Arm::is_gd_main);
        let large = indicator(&frame, |a| a == Arm::GdLarge);
        let mut focal = vec![
            ("gd_main".to_string(), main.clone()),
            ("gd_main:lump_sum".to_string(), main.iter().zip(&lump).map(|(a, b)| a * b).collect()),
        ];
        let has_large = present(&large);
        if has_large {
            focal.push(("gd_large".into(), large.clone()));
            focal.push(("gd_large:lump_sum".into(), large.iter().zip(&lump).map(|(a, b)| a * b).collect()));
        }
        let estimate = fit_with_controls(&frame, focal, true, &self.options)?;
        let f = &estimate.fit;
        let total_lump_main = wald(f, &f.sum_of(&["gd_main", "gd_main:lump_sum"], 0.0)?)?;
        let total_lump_large = if has_large {
            Some(wald(f, &f.sum_of(&["gd_large", "gd_large:lump_sum"], 0.0)?)?)
        } else {
            None
        };
        Ok(LumpSumResult {
            estimate,
            total_lump_main,
            total_lump_large,
        })
    }

    /// Chose-lump-sum, received-lump-sum and got-what-I-wanted dummies among cash households.
    pub fn choice_effect(&self, spec: &OutcomeSpec) -> Result<Estimate> {
        let frame = self.frame(spec, WeightMode::EligibleItt)?;
        let hh = |r: &crate::data::FrameRow| &self.panel.households[r.household];
        let frame = frame.filtered(|r| r.arm.is_gd());
        if frame.is_empty() {
            return Err(Error::invalid("no cash-arm households"));
        }
        let mut chose = Vec::with_capacity(frame.len());
        let mut received = Vec::with_capacity(frame.len());
        for r in &frame.rows {
            let h = hh(r);
            let c = h
                .choice
                .as_ref()
                .and_then(|c| c.chose_lump_sum)
                .ok_or_else(|| Error::invalid(format!("household `{}` has no recorded choice", h.id)))?;
            let got_ls = match h.modality {
                Some(Modality::LumpSum) => true,
                Some(Modality::Flow) => false,
                Some(Modality::Choice) => c,
                None => return Err(Error::invalid(format!("household `{}` has no modality", h.id))),
            };
            chose.push(f64::from(u8::from(c)));
            received.push(f64::from(u8::from(got_ls)));
        }
        let got: Vec<f64> = chose.iter().zip(&received).map(|(a, b)| f64::from(u8::from(a == b))).collect();
        let mut focal = vec![
            ("chose_lump_sum".to_string(), chose),
            ("received_lump_sum".to_string(), received),
            ("got_what_wanted".to_string(), got),
        ];
        let large = indicator(&frame, |a| a == Arm::GdLarge);
        if present(&large) && large.iter().any(|v| *v == 0.0) {
            focal.push(("gd_large".into(), large));
        }
        fit_with_controls(&frame, focal, true, &self.options)
    }

    /// Treatment × moderator interactions with cross-arm equality tests.
    pub fn prespecified_heterogeneity(&self, spec: &OutcomeSpec, moderator: Moderator) -> Result<HeterogeneityResult> {
        let frame = self.frame(spec, WeightMode::EligibleItt)?;
        let mut use_lag = true;
        let (frame, values, continuous): (AnalysisFrame, Vec<f64>, bool) = match moderator {
            Moderator::BaselineAnthro => {
                let fr = frame.filtered(|r| !r.lag_missing);
                if !fr.has_baseline {
                    return Err(Error::invalid("baseline moderator needs a baseline outcome"));
                }
                let v = fr.rows.iter().map(|r| r.y_lag).collect();
                (fr, v, true)
            }
            Moderator::FirstThousandDays | Moderator::Newborn => {
                let cutoff = if moderator == Moderator::Newborn {
                    NEWBORN_MONTHS
                } else {
                    FIRST_1000_DAYS_MONTHS
                };
                let age = |r: &crate::data::FrameRow| {
                    r.individual
                        .and_then(|i| self.panel.individuals[i].age_months_endline)
                };
                let fr = frame.filtered(|r| age(r).is_some());
                if fr.is_empty() {
                    return Err(Error::invalid("age moderators need individual rows with endline age"));
                }
                let v = fr.rows.iter().map(|r| f64::from(u8::from(age(r).unwrap() < cutoff))).collect();
                use_lag = false;
                (fr, v, false)
            }
            _ => {
                let trait_of = |r: &crate::data::FrameRow| {
                    let t = self.panel.households[r.household]
                        .choice
                        .as_ref()
                        .map(ctb_classify)
                        .unwrap_or_default();
                    match moderator {
                        Moderator::Impatient => t.impatient,
                        Moderator::Inconsistent => t.inconsistent,
                        _ => t.lack_other_control,
                    }
                };
                let fr = frame.filtered(|r| r.arm != Arm::GdLarge && trait_of(r).is_some());
                let v = fr.rows.iter().map(|r| f64::from(u8::from(trait_of(r).unwrap()))).collect();
                (fr, v, false)
            }
        };
        if values.is_empty() || values.iter().all(|v| *v == values[0]) {
            return Err(Error::Degenerate(format!("moderator {} is constant", moderator.label())));
        }
        let centered_at = if continuous {
            weighted_mean(&values, &frame.weights())
        } else {
            0.0
        };
        let m: Vec<f64> = values.iter().map(|v| v - centered_at).collect();
        let arms = treatment_columns(&frame, false);
        let mut focal = arms.clone();
        // the baseline moderator is the lagged outcome, whose main effect the lag already carries
        if !(moderator == Moderator::BaselineAnthro && use_lag) {
            focal.push((moderator.label().to_string(), m.clone()));
        }
        for (name, d) in &arms {
            focal.push((
                format!("{name}:{}", moderator.label()),
                d.iter().zip(&m).map(|(a, b)| a * b).collect(),
            ));
        }
        let estimate = fit_with_controls(&frame, focal, use_lag, &self.options)?;
        let mut interaction_tests = Vec::new();
        let lab = moderator.label();
        let has = |n: &str| arms.iter().any(|(a, _)| a == n);
        for other in ["gd_main", "gd_large"] {
            if has("gikuriro") && has(other) {
                let h = estimate
                    .fit
                    .equal(&format!("{other}:{lab}"), &format!("gikuriro:{lab}"))?;
                interaction_tests.push((format!("{other}=gikuriro"), wald(&estimate.fit, &h)?));
            }
        }
        Ok(HeterogeneityResult {
            moderator,
            estimate,
            centered_at,
            interaction_tests,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CtbRecord;

    fn record(soon: Option<f64>, near: Vec<Option<f64>>, far: Vec<Option<f64>>, flags: Vec<Option<bool>>) -> ChoiceRecord {
        ChoiceRecord {
            chose_lump_sum: Some(true),
            ctb: Some(CtbRecord {
                soon_at_double: soon,
                near,
                far,
            }),
            other_control_flags: flags,
        }
    }

    #[test]
    fn patient_and_consistent_chooser() {
        let r = record(Some(0.0), vec![Some(0.2), Some(0.1)], vec![Some(0.2), Some(0.1)], vec![Some(false), Some(false)]);
        let t = ctb_classify(&r);
        assert_eq!(t.impatient, Some(false));
        assert_eq!(t.inconsistent, Some(false));
        assert_eq!(t.lack_other_control, Some(false));
    }

    #[test]
    fn incomplete_records_are_missing_not_false() {
        let r = record(None, vec![Some(0.2), None], vec![Some(0.2), Some(0.1)], vec![Some(false), None]);
        let t = ctb_classify(&r);
        assert_eq!(t, BehavioralTraits::default());
        let r = record(Some(0.5), vec![], vec![], vec![None, Some(true)]);
        let t = ctb_classify(&r);
        assert_eq!(t.impatient, Some(true));
        assert_eq!(t.inconsistent, None);
        assert_eq!(t.lack_other_control, Some(true));
    }

    #[test]
    fn present_biased_chooser_is_inconsistent() {
        let rates = [0.1, 0.25, 0.5, 1.0];
        let near = crate::simlab::ctb_allocations(0.7, 0.99, 0.5, &rates, true);
        let far = crate::simlab::ctb_allocations(0.7, 0.99, 0.5, &rates, false);
        let r = record(Some(near[3]), near.iter().map(|v| Some(*v)).collect(), far.iter().map(|v| Some(*v)).collect(), vec![]);
        assert_eq!(ctb_classify(&r).inconsistent, Some(true));
        let near = crate::simlab::ctb_allocations(1.0, 0.99, 0.5, &rates, true);
        let far = crate::simlab::ctb_allocations(1.0, 0.99, 0.5, &rates, false);
        let r = record(None, near.iter().map(|v| Some(*v)).collect(), far.iter().map(|v| Some(*v)).collect(), vec![]);
        assert_eq!(ctb_classify(&r).inconsistent, Some(false));
    }

    #[test]
    fn variant_labels_round_trip() {
        for v in CeVariant::ALL {
            assert_eq!(CeVariant::parse(v.label()).unwrap(), v);
        }
        assert!(CeVariant::parse("quartic").is_err());
    }
}
