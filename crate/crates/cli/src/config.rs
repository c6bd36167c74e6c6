//! The run configuration file.
//!
//! A run reads its panel either from CSV files (`[data]`) or from a simulated
//! trial (`[dgp]`), never both. Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use cashbench::costing::{ArmCostLedger, CostLedger};
use cashbench::data::{ColumnMap, Level, OutcomeSpec};
use cashbench::estimators::{AttritionLevel, AttritionOptions, CeVariant, EstimatorOptions, Moderator};
use cashbench::forest::ForestConfig;
use cashbench::simlab::{DgpSpec, EstimatorDescriptor};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub dgp: Option<DgpSpec>,
    /// Cost ledger for the analyses. A simulated run falls back to the DGP's own ledger.
    #[serde(default)]
    pub ledger: Option<LedgerSection>,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub forest: ForestSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub power: PowerSection,
    #[serde(default)]
    pub report: ReportSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub villages: PathBuf,
    pub households: PathBuf,
    #[serde(default)]
    pub individuals: Option<PathBuf>,
    #[serde(default)]
    pub columns: ColumnMap,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerSection {
    pub arms: Vec<ArmCostLedger>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub outcomes: Vec<OutcomeSpec>,
    pub variant: CeVariant,
    pub options: EstimatorOptions,
    pub moderators: Vec<Moderator>,
    pub attrition_levels: Vec<AttritionLevel>,
    pub attrition: AttritionOptions,
    /// Covariates for the remain model; empty means every panel covariate.
    pub ipw_covariates: Vec<String>,
    /// Reweight by inverse remain propensities before estimating.
    pub ipw: bool,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            outcomes: Vec::new(),
            variant: CeVariant::Linear,
            options: EstimatorOptions::default(),
            moderators: vec![Moderator::Impatient, Moderator::Inconsistent, Moderator::LackOtherControl],
            attrition_levels: vec![AttritionLevel::Household],
            attrition: AttritionOptions::default(),
            ipw_covariates: Vec::new(),
            ipw: false,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestSection {
    /// Outcomes for the cash-versus-kind forest; empty means every household outcome.
    pub outcomes: Vec<String>,
    pub config: ForestConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub reps: usize,
    pub estimators: Vec<EstimatorDescriptor>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            reps: 200,
            estimators: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerSection {
    pub reps: usize,
}

impl Default for PowerSection {
    fn default() -> Self {
        PowerSection { reps: 500 }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Binary household outcomes, one per food group, for the dietary-diversity chart.
    pub food_groups: Vec<String>,
    /// Outcome for the cost-equivalence figure; defaults to the first configured outcome.
    pub cost_equivalence_outcome: Option<String>,
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config `{}`: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(d) = cfg.data.as_mut() {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [Some(&mut d.villages), Some(&mut d.households), d.individuals.as_mut()]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    fn check(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError(format!(
                "unsupported schema_version {} (this build reads {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        match (&self.data, &self.dgp) {
            (Some(_), Some(_)) => return Err(ConfigError("give either [data] or [dgp], not both".into())),
            (None, None) => return Err(ConfigError("one of [data] or [dgp] is required".into())),
            _ => {}
        }
        if let Some(l) = &self.ledger {
            CostLedger::new(l.arms.iter().copied()).map_err(|e| ConfigError(format!("ledger: {e}")))?;
        }
        if let Some(d) = &self.dgp {
            d.validate().map_err(|e| ConfigError(format!("dgp: {e}")))?;
        }
        self.forest.config.validate().map_err(|e| ConfigError(format!("forest: {e}")))?;
        for o in &self.analysis.outcomes {
            o.transform.validate().map_err(|e| ConfigError(format!("outcome `{}`: {e}", o.name)))?;
        }
        Ok(())
    }

    /// The ledger used by costed analyses, or a config error when there is none.
    pub fn analysis_ledger(&self, command: &str) -> Result<CostLedger, ConfigError> {
        if let Some(l) = &self.ledger {
            return CostLedger::new(l.arms.iter().copied()).map_err(|e| ConfigError(format!("ledger: {e}")));
        }
        if let Some(d) = &self.dgp {
            return d.cost_ledger().map_err(|e| ConfigError(format!("dgp ledger: {e}")));
        }
        Err(ConfigError(format!("`{command}` needs a cost ledger: add a [ledger] section")))
    }

    /// Configured outcomes, or every simulated outcome when none are listed.
    pub fn outcomes(&self) -> Vec<OutcomeSpec> {
        if !self.analysis.outcomes.is_empty() {
            return self.analysis.outcomes.clone();
        }
        match &self.dgp {
            Some(d) => d
                .outcomes
                .iter()
                .map(|o| OutcomeSpec {
                    level: o.level,
                    ..OutcomeSpec::household(&o.name)
                })
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn household_outcomes(&self) -> Vec<OutcomeSpec> {
        self.outcomes().into_iter().filter(|o| o.level == Level::Household).collect()
    }
}

/// The configuration shipped with the binary: the published arm shape with
/// a handful of simulated outcomes.
pub const REFERENCE_CONFIG: &str = include_str!("../reference.toml");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_config_parses() {
        let cfg = RunConfig::parse(REFERENCE_CONFIG).unwrap();
        let d = cfg.dgp.unwrap();
        let r = DgpSpec::reference();
        assert_eq!(d.villages, r.villages);
        assert_eq!(d.eligible_totals, r.eligible_totals);
        assert_eq!(d.ineligible_totals, r.ineligible_totals);
        assert_eq!(d.modality_totals, r.modality_totals);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{REFERENCE_CONFIG}\n[extra]\nx = 1\n");
        assert!(RunConfig::parse(&text).is_err());
        let typo = REFERENCE_CONFIG.replacen("schema_version", "schema_verison", 1);
        assert!(RunConfig::parse(&typo).is_err());
    }

    #[test]
    fn exactly_one_source() {
        let none = "schema_version = 1\n";
        assert!(RunConfig::parse(none).unwrap_err().0.contains("required"));
        let both = "schema_version = 1\n[data]\nvillages = \"v.csv\"\nhouseholds = \"h.csv\"\n[dgp]\n";
        assert!(RunConfig::parse(both).unwrap_err().0.contains("not both"));
    }

    #[test]
    fn schema_version_checked() {
        assert!(RunConfig::parse("schema_version = 2\n[dgp]\n").is_err());
    }

    #[test]
    fn data_run_without_ledger() {
        let cfg = RunConfig::parse("schema_version = 1\n[data]\nvillages = \"v.csv\"\nhouseholds = \"h.csv\"\n").unwrap();
        assert!(cfg.analysis_ledger("ce").is_err());
    }
}
