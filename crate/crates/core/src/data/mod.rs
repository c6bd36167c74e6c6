//! The two-level trial panel (village → household → individual) and the
//! regression-ready frames built from it.

mod csvio;
mod frame;
mod transform;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use csvio::{
    read_households, read_individuals, read_panel, read_villages, write_households,
    write_individuals, write_villages, ColumnMap,
};
pub use frame::{build_analysis_frame, AnalysisFrame, FrameRow, WeightMode};
pub use transform::{ihs, quantile, winsorize, QuantileMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Control,
    Gikuriro,
    GdLower,
    GdMiddle,
    GdUpper,
    GdLarge,
}

impl Arm {
    pub const ALL: [Arm; 6] = [
        Arm::Control,
        Arm::Gikuriro,
        Arm::GdLower,
        Arm::GdMiddle,
        Arm::GdUpper,
        Arm::GdLarge,
    ];

    pub const GD: [Arm; 4] = [Arm::GdLower, Arm::GdMiddle, Arm::GdUpper, Arm::GdLarge];

    pub fn is_gd(self) -> bool {
        matches!(self, Arm::GdLower | Arm::GdMiddle | Arm::GdUpper | Arm::GdLarge)
    }

    /// The three small cash arms pooled as "GD-Main".
    pub fn is_gd_main(self) -> bool {
        matches!(self, Arm::GdLower | Arm::GdMiddle | Arm::GdUpper)
    }

    pub fn is_treated(self) -> bool {
        self != Arm::Control
    }

    pub fn label(self) -> &'static str {
        match self {
            Arm::Control => "Control",
            Arm::Gikuriro => "Gikuriro",
            Arm::GdLower => "GD_Lower",
            Arm::GdMiddle => "GD_Middle",
            Arm::GdUpper => "GD_Upper",
            Arm::GdLarge => "GD_Large",
        }
    }

    pub fn parse(s: &str) -> Result<Arm> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        Ok(match norm.as_str() {
            "control" => Arm::Control,
            "gikuriro" => Arm::Gikuriro,
            "gd_lower" => Arm::GdLower,
            "gd_middle" => Arm::GdMiddle,
            "gd_upper" => Arm::GdUpper,
            "gd_large" => Arm::GdLarge,
            _ => return Err(Error::invalid(format!("unknown arm `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Flow,
    LumpSum,
    Choice,
}

impl Modality {
    pub fn label(self) -> &'static str {
        match self {
            Modality::Flow => "flow",
            Modality::LumpSum => "lump_sum",
            Modality::Choice => "choice",
        }
    }

    pub fn parse(s: &str) -> Result<Modality> {
        match s.trim().to_ascii_lowercase().as_str() {
            "flow" => Ok(Modality::Flow),
            "lump_sum" | "lumpsum" => Ok(Modality::LumpSum),
            "choice" => Ok(Modality::Choice),
            other => Err(Error::invalid(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Village {
    pub id: String,
    pub block: String,
    pub arm: Arm,
    /// Assigned mean household transfer in USD; present exactly for cash arms.
    pub assigned_transfer: Option<f64>,
}

/// Villages, their randomization blocks and assigned arms.
#[derive(Debug, Clone)]
pub struct StudyDesign {
    blocks: Vec<String>,
    villages: Vec<Village>,
    village_index: HashMap<String, usize>,
    block_index: HashMap<String, usize>,
}

impl StudyDesign {
    pub fn new(villages: Vec<Village>) -> Result<Self> {
        let mut village_index = HashMap::with_capacity(villages.len());
        for (i, v) in villages.iter().enumerate() {
            if village_index.insert(v.id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate village id `{}`", v.id)));
            }
            match (v.arm.is_gd(), v.assigned_transfer) {
                (true, None) => {
                    return Err(Error::invalid(format!(
                        "cash village `{}` has no assigned transfer",
                        v.id
                    )))
                }
                (false, Some(_)) => {
                    return Err(Error::invalid(format!(
                        "non-cash village `{}` has an assigned transfer",
                        v.id
                    )))
                }
                (true, Some(t)) if !(t.is_finite() && t > 0.0) => {
                    return Err(Error::invalid(format!(
                        "village `{}` has non-positive transfer {t}",
                        v.id
                    )))
                }
                _ => {}
            }
        }
        let blocks: Vec<String> = villages
            .iter()
            .map(|v| v.block.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let block_index = blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (b.clone(), i))
            .collect();
        Ok(StudyDesign {
            blocks,
            villages,
            village_index,
            block_index,
        })
    }

    pub fn villages(&self) -> &[Village] {
        &self.villages
    }

    pub fn blocks(&self) -> &[String] {
        &self.blocks
    }

    pub fn village_idx(&self, id: &str) -> Option<usize> {
        self.village_index.get(id).copied()
    }

    pub fn village(&self, id: &str) -> Option<&Village> {
        self.village_idx(id).map(|i| &self.villages[i])
    }

    pub fn block_of(&self, village_idx: usize) -> usize {
        self.block_index[&self.villages[village_idx].block]
    }

    pub fn arm_counts(&self) -> BTreeMap<Arm, usize> {
        let mut out: BTreeMap<Arm, usize> = Arm::ALL.iter().map(|a| (*a, 0)).collect();
        for v in &self.villages {
            *out.entry(v.arm).or_default() += 1;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    Eligible,
    Ineligible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Round {
    Baseline,
    Endline,
}

/// Convex-time-budget allocations, stored as the share of the budget taken at
/// the sooner date.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CtbRecord {
    /// Today vs. 30 days when waiting doubles the payout.
    pub soon_at_double: Option<f64>,
    /// Menu with the sooner date today (today vs. 30 days), one entry per interest rate.
    pub near: Vec<Option<f64>>,
    /// The same menu shifted to 90 vs. 120 days.
    pub far: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChoiceRecord {
    pub chose_lump_sum: Option<bool>,
    pub ctb: Option<CtbRecord>,
    /// Survey flags for threats to control over money (theft, distrust, spousal conflict).
    pub other_control_flags: Vec<Option<bool>>,
}

pub type OutcomeMap = BTreeMap<(String, Round), f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct HouseholdRow {
    pub id: String,
    pub village: String,
    pub stratum: Stratum,
    pub sampling_weight: f64,
    pub tracking_weight: f64,
    /// Compliance: the household actually received its arm's program.
    pub treated: bool,
    /// Ineligible household outside every cash-transfer targeting rule.
    pub never_treat: bool,
    pub size: u32,
    pub modality: Option<Modality>,
    pub transfer_usd: Option<f64>,
    pub choice: Option<ChoiceRecord>,
    pub covariates: BTreeMap<String, f64>,
    pub outcomes: OutcomeMap,
}

impl HouseholdRow {
    pub fn outcome(&self, name: &str, round: Round) -> Option<f64> {
        self.outcomes.get(&(name.to_string(), round)).copied()
    }

    /// Endline-missing households are attriters.
    pub fn is_attriter(&self) -> bool {
        !self.outcomes.keys().any(|(_, r)| *r == Round::Endline)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    ChildU6,
    WomanChildbearing,
    OtherMember,
}

impl Role {
    pub fn label(self) -> &'static str {
        match self {
            Role::ChildU6 => "child_u6",
            Role::WomanChildbearing => "woman",
            Role::OtherMember => "other",
        }
    }

    pub fn parse(s: &str) -> Result<Role> {
        match s.trim().to_ascii_lowercase().as_str() {
            "child_u6" => Ok(Role::ChildU6),
            "woman" | "woman_childbearing" => Ok(Role::WomanChildbearing),
            "other" | "other_member" => Ok(Role::OtherMember),
            other => Err(Error::invalid(format!("unknown role `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Female,
    Male,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndividualRow {
    pub id: String,
    pub household: String,
    pub role: Role,
    pub sex: Sex,
    /// Absent for members born or joined after baseline.
    pub age_months_baseline: Option<f64>,
    pub age_months_endline: Option<f64>,
    pub outcomes: OutcomeMap,
}

impl IndividualRow {
    pub fn outcome(&self, name: &str, round: Round) -> Option<f64> {
        self.outcomes.get(&(name.to_string(), round)).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Household,
    Individual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Primary,
    Secondary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Transform {
    None,
    Ihs,
    Winsorize { lo: f64, hi: f64 },
    /// Winsorize in natural units first, then take the inverse hyperbolic sine.
    WinsorizeThenIhs { lo: f64, hi: f64 },
}

impl Transform {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Transform::Winsorize { lo, hi } | Transform::WinsorizeThenIhs { lo, hi } => {
                if !(0.0..1.0).contains(&lo) || !(lo < hi && hi <= 1.0) {
                    return Err(Error::invalid(format!(
                        "winsor quantiles must satisfy 0 <= lo < hi <= 1, got ({lo}, {hi})"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Applies the transform to one round's observed values.
    pub fn apply(&self, values: &[f64], method: QuantileMethod) -> Result<Vec<f64>> {
        self.validate()?;
        if values.is_empty() {
            return Ok(Vec::new());
        }
        match *self {
            Transform::None => Ok(values.to_vec()),
            Transform::Ihs => values.iter().map(|&v| ihs(v)).collect(),
            Transform::Winsorize { lo, hi } => winsorize(values, lo, hi, method),
            Transform::WinsorizeThenIhs { lo, hi } => winsorize(values, lo, hi, method)?
                .into_iter()
                .map(ihs)
                .collect(),
        }
    }
}

/// Restricts an individual-level outcome to a role and baseline-age window.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubpopFilter {
    #[serde(default)]
    pub roles: Option<Vec<Role>>,
    #[serde(default)]
    pub min_age_months: Option<f64>,
    #[serde(default)]
    pub max_age_months: Option<f64>,
}

impl SubpopFilter {
    pub fn admits(&self, ind: &IndividualRow) -> bool {
        if let Some(roles) = &self.roles {
            if !roles.contains(&ind.role) {
                return false;
            }
        }
        let age = ind.age_months_baseline.or(ind.age_months_endline);
        if let Some(min) = self.min_age_months {
            if age.is_none_or(|a| a < min) {
                return false;
            }
        }
        if let Some(max) = self.max_age_months {
            if age.is_none_or(|a| a >= max) {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeSpec {
    pub name: String,
    pub level: Level,
    #[serde(default = "default_transform")]
    pub transform: Transform,
    #[serde(default = "default_family")]
    pub family: Family,
    #[serde(default)]
    pub filter: SubpopFilter,
}

fn default_transform() -> Transform {
    Transform::None
}

fn default_family() -> Family {
    Family::Primary
}

impl OutcomeSpec {
    pub fn household(name: &str) -> Self {
        OutcomeSpec {
            name: name.to_string(),
            level: Level::Household,
            transform: Transform::None,
            family: Family::Primary,
            filter: SubpopFilter::default(),
        }
    }

    pub fn individual(name: &str, filter: SubpopFilter) -> Self {
        OutcomeSpec {
            level: Level::Individual,
            filter,
            ..OutcomeSpec::household(name)
        }
    }
}

/// Validated panel: design plus household and individual rows with lookups.
#[derive(Debug, Clone)]
pub struct Panel {
    pub design: StudyDesign,
    pub households: Vec<HouseholdRow>,
    pub individuals: Vec<IndividualRow>,
    household_index: HashMap<String, usize>,
    household_village: Vec<usize>,
}

impl Panel {
    pub fn new(
        design: StudyDesign,
        households: Vec<HouseholdRow>,
        individuals: Vec<IndividualRow>,
    ) -> Result<Self> {
        let mut household_index = HashMap::with_capacity(households.len());
        let mut household_village = Vec::with_capacity(households.len());
        for (i, h) in households.iter().enumerate() {
            if household_index.insert(h.id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate household id `{}`", h.id)));
            }
            let v = design.village_idx(&h.village).ok_or_else(|| {
                Error::invalid(format!(
                    "household `{}` references unknown village `{}`",
                    h.id, h.village
                ))
            })?;
            household_village.push(v);
            for (name, w) in [
                ("sampling", h.sampling_weight),
                ("tracking", h.tracking_weight),
            ] {
                if !(w.is_finite() && w > 0.0) {
                    return Err(Error::invalid(format!(
                        "household `{}` has non-positive {name} weight {w}",
                        h.id
                    )));
                }
            }
            if let Some(m) = h.modality {
                if !design.villages()[v].arm.is_gd() {
                    return Err(Error::invalid(format!(
                        "household `{}` has modality {} outside a cash arm",
                        h.id,
                        m.label()
                    )));
                }
            }
            if h.outcomes.values().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "household `{}` has a non-finite outcome",
                    h.id
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for ind in &individuals {
            if !seen.insert(ind.id.as_str()) {
                return Err(Error::invalid(format!("duplicate individual id `{}`", ind.id)));
            }
            if !household_index.contains_key(&ind.household) {
                return Err(Error::invalid(format!(
                    "individual `{}` references unknown household `{}`",
                    ind.id, ind.household
                )));
            }
            for age in [ind.age_months_baseline, ind.age_months_endline].into_iter().flatten() {
                if !(age.is_finite() && age >= 0.0) {
                    return Err(Error::invalid(format!(
                        "individual `{}` has invalid age {age}",
                        ind.id
                    )));
                }
            }
            if ind.role == Role::ChildU6 && ind.age_months_baseline.is_some_and(|a| a >= 72.0) {
                return Err(Error::invalid(format!(
                    "child `{}` is 72 months or older at baseline",
                    ind.id
                )));
            }
        }
        Ok(Panel {
            design,
            households,
            individuals,
            household_index,
            household_village,
        })
    }

    pub fn household_idx(&self, id: &str) -> Option<usize> {
        self.household_index.get(id).copied()
    }

    /// Village index of household `h`.
    pub fn village_of(&self, h: usize) -> usize {
        self.household_village[h]
    }

    pub fn arm_of(&self, h: usize) -> Arm {
        self.design.villages()[self.village_of(h)].arm
    }

    pub fn block_of(&self, h: usize) -> usize {
        self.design.block_of(self.village_of(h))
    }

    /// Sorted covariate names present on any household.
    pub fn covariate_names(&self) -> Vec<String> {
        self.households
            .iter()
            .flat_map(|h| h.covariates.keys().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Household counts by arm and stratum.
    pub fn stratum_counts(&self) -> BTreeMap<(Arm, Stratum), usize> {
        let mut out = BTreeMap::new();
        for arm in Arm::ALL {
            for s in [Stratum::Eligible, Stratum::Ineligible] {
                out.insert((arm, s), 0);
            }
        }
        for (i, h) in self.households.iter().enumerate() {
            *out.entry((self.arm_of(i), h.stratum)).or_default() += 1;
        }
        out
    }

    /// Eligible household counts by arm and modality.
    pub fn modality_counts(&self) -> BTreeMap<(Arm, Modality), usize> {
        let mut out = BTreeMap::new();
        for (i, h) in self.households.iter().enumerate() {
            if let (Some(m), Stratum::Eligible) = (h.modality, h.stratum) {
                *out.entry((self.arm_of(i), m)).or_default() += 1;
            }
        }
        out
    }
}
