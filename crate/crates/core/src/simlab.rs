//! Synthetic cluster-randomized trials with known ground truth, and a Monte
//! Carlo harness reporting bias, coverage, size and power.
//!
//! Every replication draws from its own ChaCha8 stream (`seed`, `stream = rep`),
//! so results do not depend on thread scheduling.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::costing::{scale_transfers, ArmCostLedger, CostBasis, CostLedger, TransferRule};
use crate::data::{
    build_analysis_frame, Arm, ChoiceRecord, CtbRecord, HouseholdRow, IndividualRow, Level,
    Modality, OutcomeMap, OutcomeSpec, Panel, Role, Round, Sex, Stratum, StudyDesign, Village,
    WeightMode,
};
use crate::estimators::{ce_regressors, Analysis, CeVariant, ControlPolicy, EstimatorOptions, Granularity};
use crate::wls::{design_matrix, t_critical, RegressionSpec};
use crate::{Error, Result};

/// One count per arm, in the order Control, Gikuriro, Lower, Middle, Upper, Large.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmCounts {
    pub control: usize,
    pub gikuriro: usize,
    pub gd_lower: usize,
    pub gd_middle: usize,
    pub gd_upper: usize,
    pub gd_large: usize,
}

impl ArmCounts {
    pub fn get(&self, arm: Arm) -> usize {
        match arm {
            Arm::Control => self.control,
            Arm::Gikuriro => self.gikuriro,
            Arm::GdLower => self.gd_lower,
            Arm::GdMiddle => self.gd_middle,
            Arm::GdUpper => self.gd_upper,
            Arm::GdLarge => self.gd_large,
        }
    }

    pub fn from_array(a: [usize; 6]) -> Self {
        ArmCounts {
            control: a[0],
            gikuriro: a[1],
            gd_lower: a[2],
            gd_middle: a[3],
            gd_upper: a[4],
            gd_large: a[5],
        }
    }

    pub fn total(&self) -> usize {
        Arm::ALL.iter().map(|a| self.get(*a)).sum()
    }
}

/// Per-arm average treatment effect (ITT scale).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum EffectModel {
    PerArm {
        gikuriro: f64,
        gd_lower: f64,
        gd_middle: f64,
        gd_upper: f64,
        gd_large: f64,
    },
    /// Cash effect linear in cost per eligible; Gikuriro equals cash at the
    /// benchmark cost plus `gikuriro_offset`.
    LinearInCost {
        cash_at_benchmark: f64,
        per_100: f64,
        gikuriro_offset: f64,
    },
}

impl EffectModel {
    pub fn constant(v: f64) -> Self {
        EffectModel::PerArm {
            gikuriro: v,
            gd_lower: v,
            gd_middle: v,
            gd_upper: v,
            gd_large: v,
        }
    }

    pub fn arm_effect(&self, arm: Arm, ledger: &CostLedger, benchmark: f64) -> Result<f64> {
        Ok(match self {
            EffectModel::PerArm {
                gikuriro,
                gd_lower,
                gd_middle,
                gd_upper,
                gd_large,
            } => match arm {
                Arm::Control => 0.0,
                Arm::Gikuriro => *gikuriro,
                Arm::GdLower => *gd_lower,
                Arm::GdMiddle => *gd_middle,
                Arm::GdUpper => *gd_upper,
                Arm::GdLarge => *gd_large,
            },
            EffectModel::LinearInCost {
                cash_at_benchmark,
                per_100,
                gikuriro_offset,
            } => match arm {
                Arm::Control => 0.0,
                Arm::Gikuriro => cash_at_benchmark + gikuriro_offset,
                gd => cash_at_benchmark + per_100 * (ledger.require(gd)?.cost_per_eligible() - benchmark) / 100.0,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutcomeDgp {
    pub name: String,
    pub level: Level,
    pub mean: f64,
    pub effect: EffectModel,
    /// Effect gradient in the (centered) baseline outcome among treated arms.
    pub baseline_gradient: f64,
    /// Effect gradient in the first covariate among treated arms.
    pub covariate_gradient: f64,
    /// Extra effect for cash households that receive a lump sum.
    pub lump_sum_extra: f64,
    /// Extra effect for cash households that receive the modality they chose.
    pub matched_choice_extra: f64,
    /// Effect on untreated ineligibles in cash villages.
    pub spillover: f64,
    /// Report `1{latent > mean}` instead of the latent value.
    pub binary: bool,
}

impl Default for OutcomeDgp {
    fn default() -> Self {
        OutcomeDgp {
            name: "y".into(),
            level: Level::Household,
            mean: 0.0,
            effect: EffectModel::constant(0.0),
            baseline_gradient: 0.0,
            covariate_gradient: 0.0,
            lump_sum_extra: 0.0,
            matched_choice_extra: 0.0,
            spillover: 0.0,
            binary: false,
        }
    }
}

/// Logistic attrition: `logit P(attrit) = logit(control_rate) + shift·T + slope·x₀ + treated_slope·T·x₀`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttritionDgp {
    pub control_rate: f64,
    pub treatment_shift: f64,
    pub covariate_slope: f64,
    pub treated_covariate_slope: f64,
}

impl Default for AttritionDgp {
    fn default() -> Self {
        AttritionDgp {
            control_rate: 0.033,
            treatment_shift: 0.0,
            covariate_slope: 0.0,
            treated_covariate_slope: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModalityDgp {
    pub flow: f64,
    pub lump_sum: f64,
    pub choice: f64,
    /// Share choosing the lump sum in the elicitation.
    pub lump_sum_preference: f64,
}

impl Default for ModalityDgp {
    fn default() -> Self {
        ModalityDgp {
            flow: 421.0 / 732.0,
            lump_sum: 210.0 / 732.0,
            choice: 101.0 / 732.0,
            lump_sum_preference: 0.65,
        }
    }
}

/// Quasi-hyperbolic preferences behind the simulated time-budget allocations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorDgp {
    pub present_biased_share: f64,
    pub beta: f64,
    pub delta: f64,
    pub curvature: f64,
    pub other_control_rate: f64,
}

impl Default for BehaviorDgp {
    fn default() -> Self {
        BehaviorDgp {
            present_biased_share: 0.3,
            beta: 0.5,
            delta: 0.99,
            curvature: 0.8,
            other_control_rate: 0.15,
        }
    }
}

pub const CTB_RATES: [f64; 4] = [0.1, 0.25, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpSpec {
    pub blocks: usize,
    pub villages: ArmCounts,
    pub eligible_per_village: usize,
    pub ineligible_per_village: usize,
    /// Exact eligible household totals per arm, spread evenly over villages.
    pub eligible_totals: Option<ArmCounts>,
    pub ineligible_totals: Option<ArmCounts>,
    /// Exact (flow, lump sum, choice) counts per cash arm, in Lower/Middle/Upper/Large order.
    pub modality_totals: Option<[[usize; 3]; 4]>,
    pub eligible_weight: f64,
    pub ineligible_weight: f64,
    /// Village-level multiplicative spread of sampling weights, `U(1−s, 1+s)`.
    pub weight_spread: f64,
    pub covariates: usize,
    pub covariate_effect: f64,
    pub icc: f64,
    pub noise_sd: f64,
    /// Correlation of the idiosyncratic shock between rounds.
    pub persistence: f64,
    pub outcomes: Vec<OutcomeDgp>,
    pub children_per_household: usize,
    pub ledger: Vec<ArmCostLedger>,
    pub benchmark: Option<f64>,
    pub attrition: AttritionDgp,
    pub modality: ModalityDgp,
    pub behavior: BehaviorDgp,
    pub never_treat_share: f64,
    /// Share of treatable ineligibles in cash villages who receive transfers.
    pub ineligible_treat_rate: f64,
}

impl Default for DgpSpec {
    fn default() -> Self {
        DgpSpec {
            blocks: 22,
            villages: ArmCounts::from_array([74, 74, 22, 22, 22, 34]),
            eligible_per_village: 7,
            ineligible_per_village: 4,
            eligible_totals: None,
            ineligible_totals: None,
            modality_totals: None,
            eligible_weight: 2.0,
            ineligible_weight: 24.4,
            weight_spread: 0.2,
            covariates: 5,
            covariate_effect: 0.2,
            icc: 0.1,
            noise_sd: 1.0,
            persistence: 0.5,
            outcomes: vec![OutcomeDgp::default()],
            children_per_household: 0,
            ledger: CostLedger::reference().entries().copied().collect(),
            benchmark: None,
            attrition: AttritionDgp::default(),
            modality: ModalityDgp::default(),
            behavior: BehaviorDgp::default(),
            never_treat_share: 0.6,
            ineligible_treat_rate: 0.3,
        }
    }
}

impl DgpSpec {
    /// The published arm shape with exact household and modality counts.
    pub fn reference() -> Self {
        DgpSpec {
            eligible_totals: Some(ArmCounts::from_array([521, 541, 165, 154, 167, 246])),
            ineligible_totals: Some(ArmCounts::from_array([298, 297, 88, 87, 88, 137])),
            modality_totals: Some([[83, 51, 31], [87, 50, 17], [104, 41, 22], [147, 68, 31]]),
            ..DgpSpec::default()
        }
    }

    /// Cash effect linear in cost and Gikuriro offset from cash at the benchmark.
    pub fn cost_equivalence(offset: f64) -> Self {
        DgpSpec {
            outcomes: vec![OutcomeDgp {
                effect: EffectModel::LinearInCost {
                    cash_at_benchmark: 0.2,
                    per_100: 0.1,
                    gikuriro_offset: offset,
                },
                ..OutcomeDgp::default()
            }],
            ..DgpSpec::reference()
        }
    }

    /// Effects heterogeneous in the first covariate, with treated-arm attrition
    /// that selects on it (missing at random given observables).
    pub fn mar_attrition() -> Self {
        DgpSpec {
            outcomes: vec![OutcomeDgp {
                effect: EffectModel::constant(0.3),
                covariate_gradient: 0.6,
                ..OutcomeDgp::default()
            }],
            attrition: AttritionDgp {
                control_rate: 0.1,
                treatment_shift: 0.0,
                covariate_slope: 0.0,
                treated_covariate_slope: 2.0,
            },
            ..DgpSpec::reference()
        }
    }

    /// Effects proportional to cost per eligible household, so Gikuriro,
    /// pooled GD-Main and GD-Large share the benefit-cost ratio `per_100`.
    /// The three Main arms get the same effect, set at their mean cost.
    pub fn equal_bcr(per_100: f64) -> Result<Self> {
        let base = DgpSpec::reference();
        let ledger = base.cost_ledger()?;
        let c = |a: Arm| ledger.require(a).map(|l| l.cost_per_eligible());
        let main = (c(Arm::GdLower)? + c(Arm::GdMiddle)? + c(Arm::GdUpper)?) / 3.0;
        let m = per_100 * main / 100.0;
        Ok(DgpSpec {
            outcomes: vec![OutcomeDgp {
                effect: EffectModel::PerArm {
                    gikuriro: per_100 * c(Arm::Gikuriro)? / 100.0,
                    gd_lower: m,
                    gd_middle: m,
                    gd_upper: m,
                    gd_large: per_100 * c(Arm::GdLarge)? / 100.0,
                },
                ..OutcomeDgp::default()
            }],
            ..base
        })
    }

    pub fn cost_ledger(&self) -> Result<CostLedger> {
        CostLedger::new(self.ledger.iter().copied())
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::invalid("need at least one block"));
        }
        if !(0.0..1.0).contains(&self.icc) {
            return Err(Error::invalid(format!("ICC {} outside [0, 1)", self.icc)));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::invalid("noise SD must be non-negative"));
        }
        if self.noise_sd == 0.0 && self.icc > 0.0 {
            return Err(Error::invalid("a positive ICC needs positive idiosyncratic noise"));
        }
        if !(-1.0..=1.0).contains(&self.persistence) {
            return Err(Error::invalid("persistence must lie in [-1, 1]"));
        }
        let probs = [
            ("attrition control rate", self.attrition.control_rate),
            ("flow share", self.modality.flow),
            ("lump-sum share", self.modality.lump_sum),
            ("choice share", self.modality.choice),
            ("lump-sum preference", self.modality.lump_sum_preference),
            ("present-biased share", self.behavior.present_biased_share),
            ("other-control rate", self.behavior.other_control_rate),
            ("never-treat share", self.never_treat_share),
            ("ineligible treat rate", self.ineligible_treat_rate),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} {p} outside [0, 1]")));
            }
        }
        if self.attrition.control_rate >= 1.0 {
            return Err(Error::invalid("attrition control rate must be below 1"));
        }
        let msum = self.modality.flow + self.modality.lump_sum + self.modality.choice;
        if (msum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("modality shares sum to {msum}, not 1")));
        }
        if !(self.eligible_weight > 0.0 && self.ineligible_weight > 0.0) {
            return Err(Error::invalid("sampling weights must be positive"));
        }
        if !(0.0..1.0).contains(&self.weight_spread) {
            return Err(Error::invalid("weight spread must lie in [0, 1)"));
        }
        if self.outcomes.is_empty() {
            return Err(Error::invalid("the DGP needs at least one outcome"));
        }
        let ledger = self.cost_ledger()?;
        for arm in Arm::GD {
            if self.villages.get(arm) > 0 {
                ledger.require(arm)?;
            }
        }
        if let (Some(tot), name) = (self.eligible_totals, "eligible") {
            for arm in Arm::ALL {
                if tot.get(arm) > 0 && self.villages.get(arm) == 0 {
                    return Err(Error::invalid(format!("{name} households in an arm without villages")));
                }
            }
        }
        if let Some(m) = self.modality_totals {
            let tot = self
                .eligible_totals
                .ok_or_else(|| Error::invalid("exact modality counts need exact eligible counts"))?;
            for (k, arm) in Arm::GD.iter().enumerate() {
                if m[k].iter().sum::<usize>() != tot.get(*arm) {
                    return Err(Error::invalid(format!(
                        "modality counts for {} do not sum to its eligible households",
                        arm.label()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// What the generator put in.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub benchmark: f64,
    /// Outcome → arm → base effect on eligible households.
    pub arm_effects: BTreeMap<String, BTreeMap<Arm, f64>>,
    /// Outcome → Gikuriro minus cash at the benchmark cost.
    pub delta_gk: BTreeMap<String, f64>,
    /// Outcome → per-household realized effect (household-level outcomes only),
    /// indexed like `Panel::households`.
    pub household_effects: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SimDataset {
    pub panel: Panel,
    pub truth: Truth,
    pub ledger: CostLedger,
    pub outcomes: Vec<OutcomeDgp>,
}

/// Optimal share taken at the sooner date under `u(x) = (ω + x)^α/α`,
/// background consumption ω = half the budget, for each interest rate. `near`
/// applies the present-bias factor (sooner date today).
pub fn ctb_allocations(beta: f64, delta: f64, curvature: f64, rates: &[f64], near: bool) -> Vec<f64> {
    let omega = 0.5;
    let d = if near { beta * delta } else { delta };
    rates
        .iter()
        .map(|r| {
            let gross = 1.0 + r;
            let k = (d * gross).powf(1.0 / (1.0 - curvature));
            ((omega * (1.0 - k) + gross) / (gross + k)).clamp(0.0, 1.0)
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn split_even(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| total / parts + usize::from(i < total % parts))
        .collect()
}

/// Deterministic dataset for `(spec, seed)`.
pub fn generate(spec: &DgpSpec, seed: u64) -> Result<SimDataset> {
    generate_stream(spec, seed, 0)
}

/// Dataset drawn from stream `stream` of the seed's generator.
pub fn generate_stream(spec: &DgpSpec, seed: u64, stream: u64) -> Result<SimDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let ledger = spec.cost_ledger()?;
    let benchmark = match spec.benchmark {
        Some(b) => b,
        None => ledger.default_benchmark(CostBasis::PerEligible)?,
    };
    let sigma = spec.noise_sd;
    let sigma_u = if spec.icc > 0.0 {
        sigma * (spec.icc / (1.0 - spec.icc)).sqrt()
    } else {
        0.0
    };
    let rho = spec.persistence;
    let fresh = (1.0 - rho * rho).max(0.0).sqrt();
    let rule = TransferRule::default();

    let mut arm_effects = BTreeMap::new();
    let mut delta_gk = BTreeMap::new();
    for o in &spec.outcomes {
        let mut m = BTreeMap::new();
        for arm in Arm::ALL {
            let e = if arm.is_gd() && spec.villages.get(arm) == 0 {
                0.0
            } else {
                o.effect.arm_effect(arm, &ledger, benchmark)?
            };
            m.insert(arm, e);
        }
        let cash_at_c = match &o.effect {
            EffectModel::LinearInCost { cash_at_benchmark, .. } => *cash_at_benchmark,
            EffectModel::PerArm { .. } => f64::NAN,
        };
        delta_gk.insert(o.name.clone(), m[&Arm::Gikuriro] - cash_at_c);
        arm_effects.insert(o.name.clone(), m);
    }

    // villages, spread round-robin over blocks within each arm
    let mut villages = Vec::new();
    let mut offset = 0;
    for arm in Arm::ALL {
        for j in 0..spec.villages.get(arm) {
            let assigned = if arm.is_gd() {
                Some(ledger.require(arm)?.cost_per_beneficiary)
            } else {
                None
            };
            villages.push(Village {
                id: format!("v{:03}", villages.len() + 1),
                block: format!("b{:02}", (j + offset) % spec.blocks + 1),
                arm,
                assigned_transfer: assigned,
            });
        }
        offset += spec.villages.get(arm);
    }
    let design = StudyDesign::new(villages.clone())?;

    let per_village = |totals: Option<ArmCounts>, fixed: usize, arm: Arm| -> Vec<usize> {
        let nv = spec.villages.get(arm);
        match totals {
            Some(t) => split_even(t.get(arm), nv),
            None => vec![fixed; nv],
        }
    };
    let mut elig_counts: BTreeMap<Arm, Vec<usize>> = BTreeMap::new();
    let mut inel_counts: BTreeMap<Arm, Vec<usize>> = BTreeMap::new();
    for arm in Arm::ALL {
        elig_counts.insert(arm, per_village(spec.eligible_totals, spec.eligible_per_village, arm));
        inel_counts.insert(arm, per_village(spec.ineligible_totals, spec.ineligible_per_village, arm));
    }

    // modality labels per cash arm, shuffled
    let mut modality_pool: BTreeMap<Arm, Vec<Modality>> = BTreeMap::new();
    if let Some(m) = spec.modality_totals {
        for (k, arm) in Arm::GD.iter().enumerate() {
            let mut pool = Vec::new();
            pool.extend(std::iter::repeat_n(Modality::Flow, m[k][0]));
            pool.extend(std::iter::repeat_n(Modality::LumpSum, m[k][1]));
            pool.extend(std::iter::repeat_n(Modality::Choice, m[k][2]));
            pool.shuffle(&mut rng);
            modality_pool.insert(*arm, pool);
        }
    }

    let std_normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    let mut households = Vec::new();
    let mut individuals = Vec::new();
    let mut household_effects: BTreeMap<String, Vec<f64>> = spec
        .outcomes
        .iter()
        .filter(|o| o.level == Level::Household)
        .map(|o| (o.name.clone(), Vec::new()))
        .collect();
    let mut arm_village_pos: BTreeMap<Arm, usize> = BTreeMap::new();
    let mut arm_elig_pos: BTreeMap<Arm, usize> = BTreeMap::new();

    for v in &villages {
        let arm = v.arm;
        let pos = arm_village_pos.entry(arm).or_insert(0);
        let n_elig = elig_counts[&arm][*pos];
        let n_inel = inel_counts[&arm][*pos];
        *pos += 1;
        let u_v = sigma_u * std_normal(&mut rng);
        let wmult = 1.0 + spec.weight_spread * (2.0 * rng.random::<f64>() - 1.0);
        let ledger_arm = if arm.is_treated() { Some(ledger.require(arm)?) } else { None };

        let first_hh = households.len();
        for k in 0..(n_elig + n_inel) {
            let stratum = if k < n_elig { Stratum::Eligible } else { Stratum::Ineligible };
            let eligible = stratum == Stratum::Eligible;
            let id = format!("{}h{:02}", v.id, k + 1);
            let size: u32 = rng.random_range(2..=9);
            let x: Vec<f64> = (0..spec.covariates).map(|_| std_normal(&mut rng)).collect();
            let never_treat = !eligible && rng.random::<f64>() < spec.never_treat_share;
            let treated = match (eligible, ledger_arm) {
                (_, None) => false,
                (true, Some(l)) => rng.random::<f64>() < l.compliance_eligible,
                (false, Some(_)) => arm.is_gd() && !never_treat && rng.random::<f64>() < spec.ineligible_treat_rate,
            };
            let (modality, chose) = if eligible && arm.is_gd() {
                let m = if let Some(pool) = modality_pool.get(&arm) {
                    let i = arm_elig_pos.entry(arm).or_insert(0);
                    let m = pool[*i];
                    *i += 1;
                    m
                } else {
                    let r: f64 = rng.random();
                    if r < spec.modality.flow {
                        Modality::Flow
                    } else if r < spec.modality.flow + spec.modality.lump_sum {
                        Modality::LumpSum
                    } else {
                        Modality::Choice
                    }
                };
                (Some(m), Some(rng.random::<f64>() < spec.modality.lump_sum_preference))
            } else {
                (None, None)
            };
            let received_ls = match (modality, chose) {
                (Some(Modality::LumpSum), _) => true,
                (Some(Modality::Choice), Some(c)) => c,
                _ => false,
            };
            let got_wanted = chose.is_some_and(|c| c == received_ls);
            let choice = if eligible {
                let b = &spec.behavior;
                let beta = if rng.random::<f64>() < b.present_biased_share { b.beta } else { 1.0 };
                let near = ctb_allocations(beta, b.delta, b.curvature, &CTB_RATES, true);
                let far = ctb_allocations(beta, b.delta, b.curvature, &CTB_RATES, false);
                let flags = (0..3).map(|_| Some(rng.random::<f64>() < b.other_control_rate)).collect();
                Some(ChoiceRecord {
                    chose_lump_sum: chose,
                    ctb: Some(CtbRecord {
                        soon_at_double: Some(near[CTB_RATES.len() - 1]),
                        near: near.into_iter().map(Some).collect(),
                        far: far.into_iter().map(Some).collect(),
                    }),
                    other_control_flags: flags,
                })
            } else {
                None
            };
            let mut covariates = BTreeMap::new();
            for (j, xj) in x.iter().enumerate() {
                covariates.insert(format!("x{}", j + 1), *xj);
            }
            let x0 = x.first().copied().unwrap_or(0.0);
            let xsum: f64 = x.iter().sum();
            let t_assigned = arm.is_treated() && (eligible || treated);
            let attr = spec.attrition;
            let attrit_logit = logit(attr.control_rate.max(1e-12))
                + attr.treatment_shift * f64::from(u8::from(t_assigned))
                + attr.covariate_slope * x0
                + attr.treated_covariate_slope * f64::from(u8::from(t_assigned)) * x0;
            let attrited = attr.control_rate > 0.0 && rng.random::<f64>() < sigmoid(attrit_logit);

            let mut outcomes = OutcomeMap::new();
            for o in spec.outcomes.iter().filter(|o| o.level == Level::Household) {
                let e0 = std_normal(&mut rng);
                let e1 = std_normal(&mut rng);
                let base = o.mean + u_v + spec.covariate_effect * xsum;
                let y0 = base + sigma * e0;
                let effect = household_effect(o, arm, eligible, treated, &arm_effects[&o.name], y0 - base, x0, received_ls, got_wanted);
                let y1 = base + sigma * (rho * e0 + fresh * e1) + effect;
                let (y0, y1) = if o.binary {
                    (f64::from(u8::from(y0 > o.mean)), f64::from(u8::from(y1 > o.mean)))
                } else {
                    (y0, y1)
                };
                outcomes.insert((o.name.clone(), Round::Baseline), y0);
                if !attrited {
                    outcomes.insert((o.name.clone(), Round::Endline), y1);
                }
                household_effects.get_mut(&o.name).unwrap().push(effect);
            }
            if outcomes.is_empty() && !attrited {
                // keep the attrition flag derivable when only individual outcomes exist
                outcomes.insert(("_observed".into(), Round::Endline), 1.0);
            }

            if eligible {
                for c in 0..spec.children_per_household {
                    let age0: f64 = rng.random_range(-12.0..60.0);
                    let born_after = age0 < 0.0;
                    let mut ind_out = OutcomeMap::new();
                    for o in spec.outcomes.iter().filter(|o| o.level == Level::Individual) {
                        let e0 = std_normal(&mut rng);
                        let e1 = std_normal(&mut rng);
                        let base = o.mean + u_v + spec.covariate_effect * xsum;
                        let y0 = base + sigma * e0;
                        let effect = household_effect(o, arm, true, treated, &arm_effects[&o.name], y0 - base, x0, received_ls, got_wanted);
                        let y1 = base + sigma * (rho * e0 + fresh * e1) + effect;
                        if !born_after {
                            ind_out.insert((o.name.clone(), Round::Baseline), y0);
                        }
                        if !attrited {
                            ind_out.insert((o.name.clone(), Round::Endline), y1);
                        }
                    }
                    individuals.push(IndividualRow {
                        id: format!("{id}c{}", c + 1),
                        household: id.clone(),
                        role: Role::ChildU6,
                        sex: if rng.random::<bool>() { Sex::Female } else { Sex::Male },
                        age_months_baseline: (!born_after).then_some(age0.max(0.0)),
                        age_months_endline: (!attrited).then_some(age0 + 12.0),
                        outcomes: ind_out,
                    });
                }
            }

            let w = if eligible { spec.eligible_weight } else { spec.ineligible_weight } * wmult;
            households.push(HouseholdRow {
                id,
                village: v.id.clone(),
                stratum,
                sampling_weight: w,
                tracking_weight: 1.0,
                treated,
                never_treat,
                size,
                modality,
                transfer_usd: None,
                choice,
                covariates,
                outcomes,
            });
        }

        // transfers for treated eligible households in cash villages
        if let Some(target) = v.assigned_transfer {
            let idx: Vec<usize> = (first_hh..households.len())
                .filter(|&h| households[h].treated && households[h].stratum == Stratum::Eligible)
                .collect();
            if !idx.is_empty() {
                let sizes: Vec<u32> = idx.iter().map(|&h| households[h].size).collect();
                let sched = scale_transfers(target, &sizes, &rule)?;
                for (k, &h) in idx.iter().enumerate() {
                    households[h].transfer_usd = Some(sched.usd[k]);
                }
            }
        }
    }

    let panel = Panel::new(design, households, individuals)?;
    Ok(SimDataset {
        panel,
        ledger,
        outcomes: spec.outcomes.clone(),
        truth: Truth {
            benchmark,
            arm_effects,
            delta_gk,
            household_effects,
        },
    })
}

#[allow(clippy::too_many_arguments)]
fn household_effect(
    o: &OutcomeDgp,
    arm: Arm,
    eligible: bool,
    treated: bool,
    effects: &BTreeMap<Arm, f64>,
    baseline_dev: f64,
    x0: f64,
    received_ls: bool,
    got_wanted: bool,
) -> f64 {
    if !arm.is_treated() {
        return 0.0;
    }
    if !eligible {
        return if treated {
            effects[&arm]
        } else if arm.is_gd() {
            o.spillover
        } else {
            0.0
        };
    }
    let mut e = effects[&arm] + o.baseline_gradient * baseline_dev + o.covariate_gradient * x0;
    if arm.is_gd() {
        if received_ls {
            e += o.lump_sum_extra;
        }
        if got_wanted {
            e += o.matched_choice_extra;
        }
    }
    e
}

/// One-way ANOVA estimator of the intra-cluster correlation.
pub fn anova_icc(values: &[f64], groups: &[usize]) -> Option<f64> {
    let mut by: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (v, g) in values.iter().zip(groups) {
        by.entry(*g).or_default().push(*v);
    }
    let k = by.len() as f64;
    let n = values.len() as f64;
    if k < 2.0 || n <= k {
        return None;
    }
    let grand = values.iter().sum::<f64>() / n;
    let (mut ssb, mut ssw, mut sum_n2) = (0.0, 0.0, 0.0);
    for g in by.values() {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        ssb += g.len() as f64 * (m - grand).powi(2);
        ssw += g.iter().map(|v| (v - m).powi(2)).sum::<f64>();
        sum_n2 += (g.len() as f64).powi(2);
    }
    let msb = ssb / (k - 1.0);
    let msw = ssw / (n - k);
    let n0 = (n - sum_n2 / n) / (k - 1.0);
    let s2b = ((msb - msw) / n0).max(0.0);
    Some(s2b / (s2b + msw))
}

/// Realized cost per eligible implied by generated compliance.
pub fn realized_cost_per_eligible(panel: &Panel, ledger: &CostLedger, arm: Arm) -> Result<f64> {
    let l = ledger.require(arm)?;
    let (mut n, mut t) = (0usize, 0usize);
    for (h, hh) in panel.households.iter().enumerate() {
        if hh.stratum == Stratum::Eligible && panel.arm_of(h) == arm {
            n += 1;
            t += usize::from(hh.treated);
        }
    }
    if n == 0 {
        return Err(Error::invalid(format!("no eligible households in {}", arm.label())));
    }
    let r = t as f64 / n as f64;
    let c = l.cost_per_beneficiary;
    Ok(c * (1.0 - l.averted_share) + c * l.averted_share * r)
}

// ---------------------------------------------------------------------------
// Monte Carlo harness

/// One replication's estimate, its standard error, p-value for the null of
/// zero, reference degrees of freedom and the truth it should recover.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Draw {
    pub estimate: f64,
    pub se: f64,
    pub p: f64,
    pub df: f64,
    pub truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub estimator: String,
    pub reps: usize,
    pub failures: usize,
    pub mean_truth: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    pub sd_estimate: f64,
    /// Monte Carlo standard error of the bias.
    pub mc_se: f64,
    pub mean_se: f64,
    pub coverage: f64,
    /// Share of replications with p < 0.05 for the null of zero.
    pub rejection_rate: f64,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl McReport {
    pub fn summary(&self) -> String {
        format!(
            "{}: reps={} failures={} truth={:.4} mean={:.4} bias={:.4} (mc se {:.4}) sd={:.4} mean se={:.4} coverage={:.3} reject={:.3} [{:.1}s]",
            self.estimator,
            self.reps,
            self.failures,
            self.mean_truth,
            self.mean_estimate,
            self.bias,
            self.mc_se,
            self.sd_estimate,
            self.mean_se,
            self.coverage,
            self.rejection_rate,
            self.wall_clock_secs
        )
    }
}

/// Maximum share of failed replications before a study is aborted.
pub const MAX_FAILURE_RATE: f64 = 0.05;

fn map_reps<T: Send>(reps: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..reps).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..reps).map(f).collect()
    }
}

/// Runs `draw(rep)` for `rep in 0..reps` and aggregates in replication order.
pub fn run_replications(
    label: &str,
    reps: usize,
    draw: impl Fn(usize) -> Result<Draw> + Sync + Send,
) -> Result<McReport> {
    if reps == 0 {
        return Err(Error::invalid("need at least one replication"));
    }
    let start = Instant::now();
    let results = map_reps(reps, draw);
    let mut ok = Vec::with_capacity(reps);
    let mut first_err = None;
    for r in results {
        match r {
            Ok(d) => ok.push(d),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let failures = reps - ok.len();
    if failures as f64 > MAX_FAILURE_RATE * reps as f64 || ok.is_empty() {
        return Err(Error::Degenerate(format!(
            "{label}: {failures} of {reps} replications failed; first error: {}",
            first_err.map(|e| e.to_string()).unwrap_or_default()
        )));
    }
    let m = ok.len() as f64;
    let mean = |f: &dyn Fn(&Draw) -> f64| ok.iter().map(f).sum::<f64>() / m;
    let mean_estimate = mean(&|d| d.estimate);
    let mean_truth = mean(&|d| d.truth);
    let bias = mean(&|d| d.estimate - d.truth);
    let sd = if ok.len() > 1 {
        (ok.iter().map(|d| (d.estimate - d.truth - bias).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
    } else {
        0.0
    };
    let coverage = mean(&|d| {
        let crit = t_critical(0.95, d.df);
        f64::from(u8::from((d.estimate - d.truth).abs() <= crit * d.se))
    });
    Ok(McReport {
        estimator: label.to_string(),
        reps,
        failures,
        mean_truth,
        mean_estimate,
        bias,
        sd_estimate: sd,
        mc_se: sd / m.sqrt(),
        mean_se: mean(&|d| d.se),
        coverage,
        rejection_rate: mean(&|d| f64::from(u8::from(d.p < 0.05))),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum EstimatorDescriptor {
    /// A named ITT coefficient (`gikuriro`, `gd_main`, `gd_large`, or a granular cell).
    Itt { outcome: String, coefficient: String, granular: bool },
    /// `delta_gk`, `delta_t` or `gamma1` from the cost-equivalent regression.
    CostEquivalent { outcome: String, variant: CeVariant, coefficient: String },
    Tce { outcome: String, coefficient: String },
    Spillover { outcome: String, coefficient: String },
    /// Equal benefit-cost test (0 = GK vs GD-Main, 1 = GK vs GD-Large, 2 = Main vs Large);
    /// only the rejection rate is meaningful.
    BcrEquality { outcome: String, pair: usize },
}

impl EstimatorDescriptor {
    pub fn label(&self) -> String {
        match self {
            EstimatorDescriptor::Itt { outcome, coefficient, granular } => {
                format!("itt{}:{outcome}:{coefficient}", if *granular { "_granular" } else { "" })
            }
            EstimatorDescriptor::CostEquivalent { outcome, variant, coefficient } => {
                format!("ce_{}:{outcome}:{coefficient}", variant.label())
            }
            EstimatorDescriptor::Tce { outcome, coefficient } => format!("tce:{outcome}:{coefficient}"),
            EstimatorDescriptor::Spillover { outcome, coefficient } => format!("spillover:{outcome}:{coefficient}"),
            EstimatorDescriptor::BcrEquality { outcome, pair } => format!("bcr_equal:{outcome}:{pair}"),
        }
    }
}

fn mean_effect(ds: &SimDataset, outcome: &str, keep: impl Fn(usize) -> bool) -> Result<f64> {
    let eff = ds
        .truth
        .household_effects
        .get(outcome)
        .ok_or_else(|| Error::UnknownOutcome(outcome.to_string()))?;
    let (mut s, mut n) = (0.0, 0usize);
    for (h, e) in eff.iter().enumerate() {
        if keep(h) {
            s += e;
            n += 1;
        }
    }
    Ok(if n > 0 { s / n as f64 } else { 0.0 })
}

fn coefficient_truth(ds: &SimDataset, outcome: &str, coefficient: &str, stratum: Option<Stratum>) -> Result<f64> {
    let p = &ds.panel;
    let arm_filter: Box<dyn Fn(Arm) -> bool> = match coefficient {
        "gikuriro" => Box::new(|a| a == Arm::Gikuriro),
        "gd_main" => Box::new(Arm::is_gd_main),
        "gd_large" => Box::new(|a| a == Arm::GdLarge),
        "gd_lower" => Box::new(|a| a == Arm::GdLower),
        "gd_middle" => Box::new(|a| a == Arm::GdMiddle),
        "gd_upper" => Box::new(|a| a == Arm::GdUpper),
        other => return Err(Error::invalid(format!("no truth for coefficient `{other}`"))),
    };
    mean_effect(ds, outcome, |h| {
        arm_filter(p.arm_of(h)) && stratum.is_none_or(|s| p.households[h].stratum == s)
    })
}

/// Population-weighted mean effect for the pooled-strata target.
fn population_truth(ds: &SimDataset, outcome: &str, coefficient: &str) -> Result<f64> {
    let p = &ds.panel;
    let eff = &ds.truth.household_effects[outcome];
    let (mut s, mut w) = (0.0, 0.0);
    for (h, hh) in p.households.iter().enumerate() {
        let a = p.arm_of(h);
        let hit = match coefficient {
            "gikuriro" => a == Arm::Gikuriro,
            "gd_main" => a.is_gd_main(),
            "gd_large" => a == Arm::GdLarge,
            _ => false,
        };
        if hit {
            s += hh.sampling_weight * eff[h];
            w += hh.sampling_weight;
        }
    }
    Ok(if w > 0.0 { s / w } else { 0.0 })
}

/// Realized Gikuriro-minus-cash gap at the benchmark: the Gikuriro mean effect
/// among eligible households minus the least-squares polynomial in τ (of the
/// variant's degree, without its dropped arm) through the eligible cash
/// households' effects. Equals the structural offset when cash effects are
/// exactly polynomial in cost; otherwise it is the estimand the regression targets.
fn realized_delta_gk(ds: &SimDataset, outcome: &str, variant: CeVariant) -> Result<f64> {
    let p = &ds.panel;
    let eff = ds
        .truth
        .household_effects
        .get(outcome)
        .ok_or_else(|| Error::UnknownOutcome(outcome.to_string()))?;
    let eligible = |h: usize| p.households[h].stratum == Stratum::Eligible;
    let gk = mean_effect(ds, outcome, |h| eligible(h) && p.arm_of(h) == Arm::Gikuriro)?;
    let k = variant.degree() + 1;
    let mut xtx = DMatrix::<f64>::zeros(k, k);
    let mut xty = DMatrix::<f64>::zeros(k, 1);
    for h in (0..p.households.len()).filter(|&h| eligible(h)) {
        let arm = p.arm_of(h);
        if !arm.is_gd() || variant.dropped_arm() == Some(arm) {
            continue;
        }
        let t = (ds.ledger.require(arm)?.cost_per_eligible() - ds.truth.benchmark) / 100.0;
        let row: Vec<f64> = (0..k).map(|j| t.powi(j as i32)).collect();
        for a in 0..k {
            xty[a] += row[a] * eff[h];
            for b in 0..k {
                xtx[(a, b)] += row[a] * row[b];
            }
        }
    }
    let beta = xtx
        .lu()
        .solve(&xty)
        .ok_or(Error::Singular("cash effect interpolation"))?;
    Ok(gk - beta[0])
}

/// Runs one descriptor on one generated dataset.
pub fn draw_once(ds: &SimDataset, descriptor: &EstimatorDescriptor, opts: &EstimatorOptions) -> Result<Draw> {
    let analysis = Analysis::new(&ds.panel, &ds.ledger, opts.clone());
    let spec = |o: &str| OutcomeSpec::household(o);
    let pick = |e: &crate::estimators::Estimate, c: &str, truth: f64| -> Result<Draw> {
        Ok(Draw {
            estimate: e.coef(c)?,
            se: e.se(c)?,
            p: e.p(c)?,
            df: e.fit.df,
            truth,
        })
    };
    match descriptor {
        EstimatorDescriptor::Itt { outcome, coefficient, granular } => {
            let g = if *granular { Granularity::Granular } else { Granularity::Pooled };
            let e = analysis.itt(&spec(outcome), g)?;
            pick(&e, coefficient, coefficient_truth(ds, outcome, coefficient, Some(Stratum::Eligible))?)
        }
        EstimatorDescriptor::Tce { outcome, coefficient } => {
            let e = analysis.tce(&spec(outcome))?;
            pick(&e, coefficient, population_truth(ds, outcome, coefficient)?)
        }
        EstimatorDescriptor::Spillover { outcome, coefficient } => {
            let e = analysis.spillover(&spec(outcome))?;
            let o = ds
                .spec_outcome(outcome)
                .ok_or_else(|| Error::UnknownOutcome(outcome.clone()))?;
            pick(&e, coefficient, o.spillover)
        }
        EstimatorDescriptor::CostEquivalent { outcome, variant, coefficient } => {
            let r = analysis.cost_equivalent(&spec(outcome), *variant)?;
            let (c, truth) = match coefficient.as_str() {
                "delta_gk" => (r.delta_gk, realized_delta_gk(ds, outcome, *variant)?),
                "delta_t" => (r.delta_t, f64::NAN),
                "gamma1" => (
                    r.gamma1.ok_or_else(|| Error::invalid("no cost slope in this fit"))?,
                    f64::NAN,
                ),
                other => return Err(Error::invalid(format!("unknown cost-equivalent coefficient `{other}`"))),
            };
            Ok(Draw {
                estimate: c.estimate,
                se: c.se,
                p: c.p,
                df: r.estimate.fit.df,
                truth,
            })
        }
        EstimatorDescriptor::BcrEquality { outcome, pair } => {
            if *pair > 2 {
                return Err(Error::invalid("BCR pair index must be 0, 1 or 2"));
            }
            let e = analysis.itt(&spec(outcome), Granularity::Pooled)?;
            let row = analysis.bcr_row(&e)?;
            Ok(Draw {
                estimate: row.bcr[0],
                se: row.se[0],
                p: row.p_equal[*pair],
                df: e.fit.df,
                truth: f64::NAN,
            })
        }
    }
}

impl SimDataset {
    fn spec_outcome(&self, name: &str) -> Option<&OutcomeDgp> {
        self.outcomes.iter().find(|o| o.name == name)
    }
}

/// Monte Carlo study of one estimator over `reps` independent datasets.
pub fn monte_carlo(
    spec: &DgpSpec,
    descriptor: &EstimatorDescriptor,
    reps: usize,
    seed: u64,
    opts: &EstimatorOptions,
) -> Result<McReport> {
    spec.validate()?;
    run_replications(&descriptor.label(), reps, |rep| {
        let ds = generate_stream(spec, seed, rep as u64)?;
        draw_once(&ds, descriptor, opts)
    })
}

/// Complete-case and inverse-propensity-weighted ITT for one coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttritionStudy {
    pub naive: McReport,
    pub ipw: McReport,
    /// `1 − |bias_ipw| / |bias_naive|`.
    pub bias_reduction: f64,
    /// Replications where the remain model fell back to the ridge fit.
    pub ridge_fallbacks: usize,
}

/// Runs the complete-case ITT and its IPW-corrected version on the same
/// datasets. The remain model uses every simulated covariate with
/// treatment interactions.
pub fn attrition_study(
    spec: &DgpSpec,
    outcome: &str,
    coefficient: &str,
    reps: usize,
    seed: u64,
    opts: &EstimatorOptions,
) -> Result<AttritionStudy> {
    use crate::inference::{fit_remain_propensity_or_ridge, ipw_weights, remain_design, DEFAULT_PROPENSITY_FLOOR};
    spec.validate()?;
    let covs: Vec<String> = (1..=spec.covariates).map(|j| format!("x{j}")).collect();
    let pairs = map_reps(reps, |rep| -> Result<(Draw, Draw, bool)> {
        let ds = generate_stream(spec, seed, rep as u64)?;
        let truth = coefficient_truth(&ds, outcome, coefficient, Some(Stratum::Eligible))?;
        let os = OutcomeSpec::household(outcome);
        let naive = Analysis::new(&ds.panel, &ds.ledger, opts.clone()).itt(&os, Granularity::Pooled)?;
        let data = remain_design(&ds.panel, &covs, true)?;
        let (model, warning) = fit_remain_propensity_or_ridge(&data, 1.0)?;
        let w = ipw_weights(&model, &data, DEFAULT_PROPENSITY_FLOOR)?;
        let ipw = Analysis::new(&ds.panel, &ds.ledger, opts.clone())
            .with_ipw(&w.multipliers)
            .itt(&os, Granularity::Pooled)?;
        let mk = |e: &crate::estimators::Estimate| -> Result<Draw> {
            Ok(Draw {
                estimate: e.coef(coefficient)?,
                se: e.se(coefficient)?,
                p: e.p(coefficient)?,
                df: e.fit.df,
                truth,
            })
        };
        Ok((mk(&naive)?, mk(&ipw)?, warning.is_some()))
    });
    let pairs: Vec<_> = pairs.into_iter().collect::<Result<_>>()?;
    let ridge_fallbacks = pairs.iter().filter(|p| p.2).count();
    let naive = run_replications(&format!("itt_complete_case:{outcome}:{coefficient}"), reps, |r| Ok(pairs[r].0))?;
    let ipw = run_replications(&format!("itt_ipw:{outcome}:{coefficient}"), reps, |r| Ok(pairs[r].1))?;
    let bias_reduction = 1.0 - ipw.bias.abs() / naive.bias.abs();
    Ok(AttritionStudy {
        naive,
        ipw,
        bias_reduction,
        ridge_fallbacks,
    })
}

// ---------------------------------------------------------------------------
// interpolation power study

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub variant: CeVariant,
    pub analytic_var: f64,
    pub mc_var: f64,
    pub analytic_ratio: f64,
    pub mc_ratio: f64,
    /// `|mc_ratio / analytic_ratio − 1|`.
    pub ratio_gap: f64,
    /// `|mc_var / analytic_var − 1|`.
    pub var_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerStudy {
    pub reps: usize,
    pub rows: Vec<PowerRow>,
    /// Sample-size increase implied by the published "158 percent" statement.
    pub published_ratio: f64,
}

pub const PUBLISHED_CUBIC_RATIO: f64 = 2.58;

/// Variance of δ^GK across interpolation variants, from the analytic sandwich
/// under the DGP's error structure and from Monte Carlo. Uses the raw endline
/// regression (no lag or covariates) so both paths target the same estimator;
/// attrition is switched off so the design is fixed across replications.
pub fn interpolation_power_study(spec: &DgpSpec, reps: usize, seed: u64) -> Result<PowerStudy> {
    let mut spec = spec.clone();
    spec.attrition.control_rate = 0.0;
    spec.validate()?;
    if spec.outcomes[0].binary || spec.outcomes[0].level != Level::Household {
        return Err(Error::invalid("the power study needs a continuous household outcome"));
    }
    let outcome = spec.outcomes[0].name.clone();
    let opts = EstimatorOptions {
        controls: ControlPolicy::None,
        ancova: false,
        ..EstimatorOptions::default()
    };
    let ledger = spec.cost_ledger()?;

    // analytic: V = A⁻¹ [Σ_g X_g' W_g Ω_g W_g X_g] A⁻¹ with Ω_g = σ_u² 11' + σ_ε² I
    let ds0 = generate_stream(&spec, seed, 0)?;
    let sigma2 = spec.noise_sd.powi(2);
    let sigma_u2 = if spec.icc > 0.0 { sigma2 * spec.icc / (1.0 - spec.icc) } else { 0.0 };
    let sigma_e2 = sigma2 + spec.covariate_effect.powi(2) * spec.covariates as f64;
    let frame0 = build_analysis_frame(&ds0.panel, &OutcomeSpec::household(&outcome), WeightMode::EligibleItt, None)?;
    let tau = crate::costing::assign_tau(&ds0.panel.design, &ledger, spec.benchmark, CostBasis::PerEligible)?;

    let mut analytic = BTreeMap::new();
    for variant in CeVariant::ALL {
        let frame = match variant.dropped_arm() {
            Some(a) => frame0.filtered(|r| r.arm != a),
            None => frame0.clone(),
        };
        let mut rs = RegressionSpec::new(outcome.clone(), frame.y())
            .weights(frame.weights())
            .clusters(frame.clusters())
            .fixed_effects(frame.blocks());
        for (name, v) in ce_regressors(&frame, variant, &tau.by_village) {
            rs = rs.regressor(name, v);
        }
        let (x, names, rows) = design_matrix(&rs)?;
        let k = x.ncols();
        let gk = names.iter().position(|n| n == "gikuriro").unwrap();
        let mut a = DMatrix::<f64>::zeros(k, k);
        let mut mid = DMatrix::<f64>::zeros(k, k);
        let mut by_cluster: BTreeMap<usize, nalgebra::DVector<f64>> = BTreeMap::new();
        for (r, &i) in rows.iter().enumerate() {
            let w = rs.weights[i];
            let xr = x.row(r).transpose();
            a += &xr * xr.transpose() * w;
            mid += &xr * xr.transpose() * (w * w * sigma_e2);
            *by_cluster.entry(rs.clusters[i]).or_insert_with(|| nalgebra::DVector::zeros(k)) += &xr * w;
        }
        for s in by_cluster.values() {
            mid += s * s.transpose() * sigma_u2;
        }
        let ainv = crate::linalg::spd_inverse(&a, "X'WX")?;
        let v = &ainv * mid * &ainv;
        analytic.insert(variant, v[(gk, gk)]);
    }

    let draws = map_reps(reps, |rep| -> Result<Vec<f64>> {
        let ds = generate_stream(&spec, seed, rep as u64)?;
        let analysis = Analysis::new(&ds.panel, &ledger, opts.clone());
        let frame = analysis.frame(&OutcomeSpec::household(&outcome), WeightMode::EligibleItt)?;
        CeVariant::ALL
            .iter()
            .map(|v| {
                analysis
                    .cost_equivalent_on(&frame, *v, CostBasis::PerEligible, spec.benchmark)
                    .map(|r| r.delta_gk.estimate)
            })
            .collect()
    });
    let draws: Vec<Vec<f64>> = draws.into_iter().collect::<Result<_>>()?;
    let m = draws.len() as f64;
    let mc_var = |j: usize| {
        let mean = draws.iter().map(|d| d[j]).sum::<f64>() / m;
        draws.iter().map(|d| (d[j] - mean).powi(2)).sum::<f64>() / (m - 1.0)
    };
    let lin_a = analytic[&CeVariant::Linear];
    let lin_mc = mc_var(0);
    let rows = CeVariant::ALL
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let av = analytic[v];
            let mv = mc_var(j);
            let ar = av / lin_a;
            let mr = mv / lin_mc;
            PowerRow {
                variant: *v,
                analytic_var: av,
                mc_var: mv,
                analytic_ratio: ar,
                mc_ratio: mr,
                ratio_gap: (mr / ar - 1.0).abs(),
                var_gap: (mv / av - 1.0).abs(),
            }
        })
        .collect();
    Ok(PowerStudy {
        reps,
        rows,
        published_ratio: PUBLISHED_CUBIC_RATIO,
    })
}

// ---------------------------------------------------------------------------
// auxiliary DGPs for selection and forest checks

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparseDgp {
    pub n: usize,
    pub p: usize,
    pub confounders: usize,
    pub effect: f64,
    pub outcome_loading: f64,
    pub treatment_loading: f64,
}

impl Default for SparseDgp {
    fn default() -> Self {
        SparseDgp {
            n: 500,
            p: 50,
            confounders: 5,
            effect: 0.5,
            outcome_loading: 1.0,
            treatment_loading: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SparseDraw {
    pub y: Vec<f64>,
    pub d: Vec<f64>,
    pub x: DMatrix<f64>,
    pub names: Vec<String>,
    /// Indices of the true confounders.
    pub confounders: Vec<usize>,
}

/// `d = Σ_{j<k} a·x_j + v`, `y = θd + Σ_{j<k} b·x_j + e`, standard normal candidates.
pub fn sparse_draw(dgp: &SparseDgp, seed: u64, stream: u64) -> SparseDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let x = DMatrix::from_fn(dgp.n, dgp.p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut d = Vec::with_capacity(dgp.n);
    let mut y = Vec::with_capacity(dgp.n);
    for i in 0..dgp.n {
        let s: f64 = (0..dgp.confounders).map(|j| x[(i, j)]).sum();
        let di = dgp.treatment_loading * s + rng.sample::<f64, _>(StandardNormal);
        d.push(di);
        y.push(dgp.effect * di + dgp.outcome_loading * s + rng.sample::<f64, _>(StandardNormal));
    }
    SparseDraw {
        y,
        d,
        x,
        names: (0..dgp.p).map(|j| format!("x{}", j + 1)).collect(),
        confounders: (0..dgp.confounders).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CateShape {
    Zero,
    Homogeneous { tau: f64 },
    /// `low` below zero in the first moderator, `high` above.
    Step { low: f64, high: f64 },
}

impl CateShape {
    pub fn at(&self, x0: f64) -> f64 {
        match *self {
            CateShape::Zero => 0.0,
            CateShape::Homogeneous { tau } => tau,
            CateShape::Step { low, high } => {
                if x0 < 0.0 {
                    low
                } else {
                    high
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForestDraw {
    pub y: Vec<f64>,
    pub d: Vec<f64>,
    /// `n × m` moderators (also the residualization covariates).
    pub x: DMatrix<f64>,
    pub cate: Vec<f64>,
}

/// Randomized binary treatment, moderators `U(−1, 1)`, prognostic term in the
/// second moderator, unit normal noise.
pub fn forest_draw(shape: CateShape, n: usize, m: usize, seed: u64, stream: u64) -> ForestDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let x = DMatrix::from_fn(n, m.max(1), |_, _| rng.random_range(-1.0..1.0));
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut y = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);
    let mut cate = Vec::with_capacity(n);
    for i in 0..n {
        let di = f64::from(u8::from(rng.random::<bool>()));
        let tau = shape.at(x[(i, 0)]);
        let prog = if x.ncols() > 1 { 0.5 * x[(i, 1)] } else { 0.0 };
        y.push(prog + tau * di + noise.sample(&mut rng));
        d.push(di);
        cate.push(tau);
    }
    ForestDraw { y, d, x, cate }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_design_matches_published_counts() {
        let ds = generate(&DgpSpec::reference(), 7).unwrap();
        let counts = ds.panel.design.arm_counts();
        let v: Vec<usize> = Arm::ALL.iter().map(|a| counts[a]).collect();
        assert_eq!(v, vec![74, 74, 22, 22, 22, 34]);
        let sc = ds.panel.stratum_counts();
        let el: Vec<usize> = Arm::ALL.iter().map(|a| sc[&(*a, Stratum::Eligible)]).collect();
        let inel: Vec<usize> = Arm::ALL.iter().map(|a| sc[&(*a, Stratum::Ineligible)]).collect();
        assert_eq!(el, vec![521, 541, 165, 154, 167, 246]);
        assert_eq!(inel, vec![298, 297, 88, 87, 88, 137]);
        let mc = ds.panel.modality_counts();
        assert_eq!(mc[&(Arm::GdLower, Modality::Flow)], 83);
        assert_eq!(mc[&(Arm::GdLarge, Modality::Choice)], 31);
        assert_eq!(mc[&(Arm::GdUpper, Modality::LumpSum)], 41);
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate(&DgpSpec::default(), 11).unwrap();
        let b = generate(&DgpSpec::default(), 11).unwrap();
        assert_eq!(a.panel.households, b.panel.households);
        let c = generate(&DgpSpec::default(), 12).unwrap();
        assert_ne!(a.panel.households, c.panel.households);
    }

    #[test]
    fn infeasible_icc_rejected() {
        let spec = DgpSpec {
            noise_sd: 0.0,
            icc: 0.2,
            ..DgpSpec::default()
        };
        assert!(generate(&spec, 1).is_err());
    }

    #[test]
    fn ctb_patient_chooser_is_consistent() {
        let near = ctb_allocations(1.0, 0.99, 0.8, &CTB_RATES, true);
        let far = ctb_allocations(1.0, 0.99, 0.8, &CTB_RATES, false);
        assert_eq!(near, far);
        assert_eq!(near[3], 0.0);
        let biased = ctb_allocations(0.5, 0.99, 0.8, &CTB_RATES, true);
        assert!(biased[3] > 0.0);
    }

    #[test]
    fn anova_icc_on_balanced_groups() {
        // two groups with identical spread: between variance dominates
        let v = [0.0, 0.1, -0.1, 5.0, 5.1, 4.9];
        let g = [0, 0, 0, 1, 1, 1];
        assert!(anova_icc(&v, &g).unwrap() > 0.99);
    }

    #[test]
    fn realized_gap_matches_structural_offset_without_extras() {
        let ds = generate(&DgpSpec::cost_equivalence(0.5), 3).unwrap();
        for v in [CeVariant::Linear, CeVariant::Quadratic, CeVariant::DropLarge] {
            let d = realized_delta_gk(&ds, "y", v).unwrap();
            assert!((d - 0.5).abs() < 1e-10, "{v:?}: {d}");
        }
        let mut spec = DgpSpec::cost_equivalence(0.5);
        spec.outcomes[0].lump_sum_extra = 0.2;
        let ds = generate(&spec, 3).unwrap();
        assert!(realized_delta_gk(&ds, "y", CeVariant::Linear).unwrap() < 0.5 - 0.02);
    }
}
