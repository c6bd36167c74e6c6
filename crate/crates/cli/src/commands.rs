//! One function per command. Every command writes its tables into the output
//! directory and returns the list of files it wrote.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use cashbench::costing::{CostBasis, CostLedger};
use cashbench::data::{read_panel, Arm, Family, Modality, OutcomeSpec, Panel, Round, Stratum, WeightMode};
use cashbench::estimators::{Analysis, CeVariant, Estimate, Granularity};
use cashbench::figures::{
    cate_cdf_plot, cost_equivalence_figure, dietary_diversity_bars, transfer_box_whisker, ArmPoint, TransferGroup,
};
use cashbench::forest::{
    cash_vs_kind_input, cate_cdf, cross_outcome_correlation, fit_forest, targeting_gains, ForestConfig,
};
use cashbench::inference::{fit_remain_propensity_or_ridge, ipw_weights, remain_design, DEFAULT_PROPENSITY_FLOOR};
use cashbench::simlab::{generate, interpolation_power_study, monte_carlo, DgpSpec, McReport, PUBLISHED_CUBIC_RATIO};
use cashbench::tables::{emit_matrix, emit_records, emit_table, CoefTable};
use cashbench::wls::wald;

use crate::config::{ConfigError, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Validation(String),
    Estimation(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Validation(_) => "validation",
            CliError::Estimation(_) => "estimation",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Validation(m) | CliError::Estimation(m) => m,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Estimation(_) => 2,
            _ => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<cashbench::Error> for CliError {
    fn from(e: cashbench::Error) -> Self {
        use cashbench::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidInput(_) | E::UnknownOutcome(_) | E::MissingLedger(_) | E::Csv(_) | E::Io(_) => {
                CliError::Validation(msg)
            }
            _ => CliError::Estimation(msg),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub const COMMANDS: &[&str] = &[
    "validate", "itt", "ce", "tce", "bcr", "spillover", "modality", "choice", "hetero", "forest", "attrition",
    "simulate", "power", "report",
];

pub struct Context {
    pub cfg: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub variant: Option<CeVariant>,
}

struct Loaded {
    panel: Panel,
    ledger: Option<CostLedger>,
    ipw: Option<BTreeMap<String, f64>>,
}

impl Loaded {
    fn ledger(&self, cfg: &RunConfig, command: &str) -> Result<&CostLedger> {
        match &self.ledger {
            Some(l) => Ok(l),
            None => Err(cfg.analysis_ledger(command).unwrap_err().into()),
        }
    }

    fn analysis<'a>(&'a self, cfg: &RunConfig, ledger: &'a CostLedger) -> Analysis<'a> {
        let a = Analysis::new(&self.panel, ledger, cfg.analysis.options.clone());
        match &self.ipw {
            Some(w) => a.with_ipw(w),
            None => a,
        }
    }
}

impl Context {
    fn load(&self) -> Result<Loaded> {
        let cfg = &self.cfg;
        let panel = match (&cfg.data, &cfg.dgp) {
            (Some(d), _) => {
                let open = |p: &Path| {
                    File::open(p)
                        .map(BufReader::new)
                        .map_err(|e| CliError::Validation(format!("cannot open `{}`: {e}", p.display())))
                };
                let ind = d.individuals.as_deref().map(open).transpose()?;
                read_panel(open(&d.villages)?, open(&d.households)?, ind, &d.columns)?
            }
            (None, Some(spec)) => generate(spec, self.seed)?.panel,
            (None, None) => unreachable!("checked when the config was parsed"),
        };
        let ledger = cfg.analysis_ledger("").ok();
        let ipw = if cfg.analysis.ipw {
            let covs = if cfg.analysis.ipw_covariates.is_empty() {
                panel.covariate_names()
            } else {
                cfg.analysis.ipw_covariates.clone()
            };
            let data = remain_design(&panel, &covs, true)?;
            let (model, warning) = fit_remain_propensity_or_ridge(&data, 1.0)?;
            if let Some(w) = warning {
                eprintln!("warning: {w}");
            }
            Some(ipw_weights(&model, &data, DEFAULT_PROPENSITY_FLOOR)?.multipliers)
        } else {
            None
        };
        Ok(Loaded { panel, ledger, ipw })
    }

    fn outcomes(&self) -> Result<Vec<OutcomeSpec>> {
        let o = self.cfg.outcomes();
        if o.is_empty() {
            return Err(CliError::Config("no outcomes configured: add [[analysis.outcomes]]".into()));
        }
        Ok(o)
    }

    fn dgp(&self, command: &str) -> Result<&DgpSpec> {
        self.cfg
            .dgp
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("`{command}` needs a [dgp] section")))
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out)
            .map_err(|e| CliError::Validation(format!("cannot create `{}`: {e}", self.out.display())))?;
        let path = self.out.join(name);
        std::fs::write(&path, contents)
            .map_err(|e| CliError::Validation(format!("cannot write `{}`: {e}", path.display())))?;
        Ok(path)
    }
}

pub fn run(command: &str, ctx: &Context) -> Result<Vec<PathBuf>> {
    match command {
        "validate" => validate(ctx),
        "itt" => coef_command(ctx, "itt", Kind::Itt),
        "tce" => coef_command(ctx, "tce", Kind::Tce),
        "spillover" => coef_command(ctx, "spillover", Kind::Spillover),
        "modality" => coef_command(ctx, "lumpsum_flow", Kind::Modality),
        "choice" => coef_command(ctx, "choice", Kind::Choice),
        "ce" => ce(ctx),
        "bcr" => bcr(ctx),
        "hetero" => hetero(ctx),
        "forest" => forest(ctx),
        "attrition" => attrition(ctx),
        "simulate" => simulate(ctx),
        "power" => power(ctx),
        "report" => report(ctx),
        other => Err(CliError::Config(format!("unknown command `{other}`"))),
    }
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct DesignCountRow {
    arm: &'static str,
    villages: usize,
    eligible: usize,
    ineligible: usize,
    flow: usize,
    lump_sum: usize,
    choice: usize,
}

#[derive(Serialize)]
struct LedgerRow {
    arm: &'static str,
    cost_per_beneficiary: f64,
    averted_share: f64,
    compliance_eligible: f64,
    compliance_population: f64,
    cost_per_eligible: f64,
    cost_per_village_household: f64,
    tau_per_eligible: f64,
}

fn validate(ctx: &Context) -> Result<Vec<PathBuf>> {
    let data = ctx.load()?;
    let p = &data.panel;
    let villages = p.design.arm_counts();
    let strata = p.stratum_counts();
    let modality = p.modality_counts();
    let rows: Vec<DesignCountRow> = Arm::ALL
        .iter()
        .map(|&a| DesignCountRow {
            arm: a.label(),
            villages: villages.get(&a).copied().unwrap_or(0),
            eligible: strata.get(&(a, Stratum::Eligible)).copied().unwrap_or(0),
            ineligible: strata.get(&(a, Stratum::Ineligible)).copied().unwrap_or(0),
            flow: modality.get(&(a, Modality::Flow)).copied().unwrap_or(0),
            lump_sum: modality.get(&(a, Modality::LumpSum)).copied().unwrap_or(0),
            choice: modality.get(&(a, Modality::Choice)).copied().unwrap_or(0),
        })
        .collect();
    println!("{:<12} {:>8} {:>9} {:>10}", "arm", "villages", "eligible", "ineligible");
    for r in &rows {
        println!("{:<12} {:>8} {:>9} {:>10}", r.arm, r.villages, r.eligible, r.ineligible);
    }
    println!(
        "{:<12} {:>8} {:>9} {:>10}",
        "total",
        rows.iter().map(|r| r.villages).sum::<usize>(),
        rows.iter().map(|r| r.eligible).sum::<usize>(),
        rows.iter().map(|r| r.ineligible).sum::<usize>()
    );
    let mut written = vec![ctx.write("design_counts.csv", &emit_records(&rows, None)?)?];

    let header = [
        "arm",
        "cost_per_beneficiary",
        "averted_share",
        "compliance_eligible",
        "compliance_population",
        "cost_per_eligible",
        "cost_per_village_household",
        "tau_per_eligible",
    ];
    let ledger_rows = match &data.ledger {
        Some(l) => {
            let c = l.default_benchmark(CostBasis::PerEligible).ok();
            l.entries()
                .map(|e| LedgerRow {
                    arm: e.arm.label(),
                    cost_per_beneficiary: e.cost_per_beneficiary,
                    averted_share: e.averted_share,
                    compliance_eligible: e.compliance_eligible,
                    compliance_population: e.compliance_population,
                    cost_per_eligible: e.cost_per_eligible(),
                    cost_per_village_household: e.cost_per_village_household(),
                    tau_per_eligible: c.map_or(f64::NAN, |c| e.cost_per_eligible() - c),
                })
                .collect()
        }
        None => Vec::new(),
    };
    written.push(ctx.write("cost_ledger.csv", &emit_records(&ledger_rows, Some(&header))?)?);
    Ok(written)
}

// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum Kind {
    Itt,
    Tce,
    Spillover,
    Modality,
    Choice,
}

const POOLED: [&str; 3] = ["gikuriro", "gd_main", "gd_large"];
const POOLED_TESTS: [&str; 3] = ["gk_eq_main", "gk_eq_large", "main_eq_large"];

fn equality_tests(e: &Estimate) -> Vec<Option<f64>> {
    let f = &e.fit;
    [("gikuriro", "gd_main"), ("gikuriro", "gd_large"), ("gd_main", "gd_large")]
        .iter()
        .map(|(a, b)| f.equal(a, b).ok().and_then(|h| wald(f, &h).ok()).map(|w| w.p))
        .collect()
}

fn coef_command(ctx: &Context, layout: &str, kind: Kind) -> Result<Vec<PathBuf>> {
    let data = ctx.load()?;
    let outcomes = ctx.outcomes()?;
    let ledger = match kind {
        Kind::Tce => data.ledger(&ctx.cfg, "tce")?.clone(),
        _ => data.ledger.clone().unwrap_or_default(),
    };
    let analysis = data.analysis(&ctx.cfg, &ledger);
    let (columns, tests): (Vec<&str>, Vec<&str>) = match kind {
        Kind::Itt | Kind::Tce => (POOLED.to_vec(), POOLED_TESTS.to_vec()),
        Kind::Spillover => (vec!["gd_main", "gd_large"], vec![]),
        Kind::Modality => (
            vec!["gd_main", "gd_main:lump_sum", "gd_large", "gd_large:lump_sum"],
            vec!["main_total_lump", "large_total_lump"],
        ),
        Kind::Choice => (vec!["chose_lump_sum", "received_lump_sum", "got_what_wanted", "gd_large"], vec![]),
    };
    let results: Vec<Result<(Estimate, Vec<Option<f64>>)>> = outcomes
        .par_iter()
        .map(|o| {
            Ok(match kind {
                Kind::Itt => {
                    let e = analysis.itt(o, Granularity::Pooled)?;
                    let t = equality_tests(&e);
                    (e, t)
                }
                Kind::Tce => {
                    let e = analysis.tce(o)?;
                    let t = equality_tests(&e);
                    (e, t)
                }
                Kind::Spillover => (analysis.spillover(o)?, vec![]),
                Kind::Modality => {
                    let r = analysis.lumpsum_flow(o)?;
                    let t = vec![Some(r.total_lump_main.p), r.total_lump_large.map(|w| w.p)];
                    (r.estimate, t)
                }
                Kind::Choice => (analysis.choice_effect(o)?, vec![]),
            })
        })
        .collect();
    let mut table = CoefTable::new(&columns, &tests);
    for (o, r) in outcomes.iter().zip(results) {
        let (e, t) = r?;
        table.push(&e, o.family, t)?;
    }
    table.attach_sharpened_q()?;
    Ok(vec![ctx.write(&format!("{layout}.csv"), &emit_table(&table)?)?])
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct CeRow {
    outcome: String,
    family: Family,
    variant: &'static str,
    benchmark: f64,
    delta_gk: f64,
    delta_gk_se: f64,
    delta_gk_p: f64,
    delta_gk_q: f64,
    delta_t: f64,
    delta_t_se: f64,
    delta_t_p: f64,
    gamma1: Option<f64>,
    gamma1_se: Option<f64>,
    gamma1_p: Option<f64>,
    p_linear_scaling: Option<f64>,
    control_mean: Option<f64>,
    n: usize,
}

fn ce(ctx: &Context) -> Result<Vec<PathBuf>> {
    let ledger = ctx.cfg.analysis_ledger("ce")?;
    let data = ctx.load()?;
    let outcomes = ctx.outcomes()?;
    let variant = ctx.variant.unwrap_or(ctx.cfg.analysis.variant);
    let analysis = data.analysis(&ctx.cfg, &ledger);
    let fits: Vec<_> = outcomes.par_iter().map(|o| analysis.cost_equivalent(o, variant)).collect();
    let mut rows = Vec::with_capacity(outcomes.len());
    for (o, r) in outcomes.iter().zip(fits) {
        let r = r?;
        rows.push(CeRow {
            outcome: o.name.clone(),
            family: o.family,
            variant: variant.label(),
            benchmark: r.benchmark,
            delta_gk: r.delta_gk.estimate,
            delta_gk_se: r.delta_gk.se,
            delta_gk_p: r.delta_gk.p,
            delta_gk_q: f64::NAN,
            delta_t: r.delta_t.estimate,
            delta_t_se: r.delta_t.se,
            delta_t_p: r.delta_t.p,
            gamma1: r.gamma1.map(|c| c.estimate),
            gamma1_se: r.gamma1.map(|c| c.se),
            gamma1_p: r.gamma1.map(|c| c.p),
            p_linear_scaling: r.linear_scaling.map(|w| w.p),
            control_mean: r.estimate.control_mean,
            n: r.estimate.fit.n,
        });
    }
    for fam in [Family::Primary, Family::Secondary] {
        let idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].family == fam).collect();
        if idx.is_empty() {
            continue;
        }
        let q = cashbench::inference::sharpened_q(&idx.iter().map(|&i| rows[i].delta_gk_p).collect::<Vec<_>>())?;
        for (i, q) in idx.into_iter().zip(q) {
            rows[i].delta_gk_q = q;
        }
    }
    Ok(vec![ctx.write("cost_equivalence.csv", &emit_records(&rows, None)?)?])
}

#[derive(Serialize)]
struct BcrRecord {
    outcome: String,
    itt_gk: f64,
    itt_main: f64,
    itt_large: f64,
    cost_gk: f64,
    cost_main: f64,
    cost_large: f64,
    bcr_gk: f64,
    bcr_main: f64,
    bcr_large: f64,
    se_gk: f64,
    se_main: f64,
    se_large: f64,
    p_gk_eq_main: f64,
    p_gk_eq_large: f64,
    p_main_eq_large: f64,
}

fn bcr(ctx: &Context) -> Result<Vec<PathBuf>> {
    let ledger = ctx.cfg.analysis_ledger("bcr")?;
    let data = ctx.load()?;
    let outcomes = ctx.outcomes()?;
    let analysis = data.analysis(&ctx.cfg, &ledger);
    let rows: Vec<_> = outcomes.par_iter().map(|o| analysis.bcr_table(std::slice::from_ref(o))).collect();
    let mut out = Vec::new();
    for r in rows {
        for b in r? {
            out.push(BcrRecord {
                outcome: b.outcome,
                itt_gk: b.itt[0],
                itt_main: b.itt[1],
                itt_large: b.itt[2],
                cost_gk: b.cost[0],
                cost_main: b.cost[1],
                cost_large: b.cost[2],
                bcr_gk: b.bcr[0],
                bcr_main: b.bcr[1],
                bcr_large: b.bcr[2],
                se_gk: b.se[0],
                se_main: b.se[1],
                se_large: b.se[2],
                p_gk_eq_main: b.p_equal[0],
                p_gk_eq_large: b.p_equal[1],
                p_main_eq_large: b.p_equal[2],
            });
        }
    }
    Ok(vec![ctx.write("bcr.csv", &emit_records(&out, None)?)?])
}

#[derive(Serialize)]
struct HeteroRow {
    outcome: String,
    moderator: &'static str,
    term: String,
    estimate: Option<f64>,
    se: Option<f64>,
    p: f64,
    centered_at: f64,
}

fn hetero(ctx: &Context) -> Result<Vec<PathBuf>> {
    let data = ctx.load()?;
    let ledger = data.ledger.clone().unwrap_or_default();
    let analysis = data.analysis(&ctx.cfg, &ledger);
    let outcomes = ctx.outcomes()?;
    let jobs: Vec<_> = outcomes
        .iter()
        .flat_map(|o| ctx.cfg.analysis.moderators.iter().map(move |m| (o, *m)))
        .collect();
    let fits: Vec<_> = jobs
        .par_iter()
        .map(|(o, m)| analysis.prespecified_heterogeneity(o, *m))
        .collect();
    let mut rows = Vec::new();
    for ((o, m), r) in jobs.iter().zip(fits) {
        let r = r?;
        let f = &r.estimate.fit;
        for (i, name) in f.names.iter().enumerate() {
            if POOLED.contains(&name.as_str()) || name.contains(':') || name == m.label() {
                rows.push(HeteroRow {
                    outcome: o.name.clone(),
                    moderator: m.label(),
                    term: name.clone(),
                    estimate: Some(f.coef[i]),
                    se: Some(f.se_of(name)?),
                    p: f.p_value(name)?,
                    centered_at: r.centered_at,
                });
            }
        }
        for (label, w) in &r.interaction_tests {
            rows.push(HeteroRow {
                outcome: o.name.clone(),
                moderator: m.label(),
                term: format!("test:{label}"),
                estimate: None,
                se: None,
                p: w.p,
                centered_at: r.centered_at,
            });
        }
    }
    let header = ["outcome", "moderator", "term", "estimate", "se", "p", "centered_at"];
    Ok(vec![ctx.write("heterogeneity.csv", &emit_records(&rows, Some(&header))?)?])
}

// ---------------------------------------------------------------------------

struct ForestOutput {
    outcomes: Vec<String>,
    /// Household index → standardized CATE per outcome, for households present in every outcome.
    aligned: Vec<(String, Vec<f64>)>,
    households: Vec<usize>,
    per_outcome: Vec<(String, Vec<(usize, f64, f64)>)>,
}

fn forest_config(ctx: &Context) -> ForestConfig {
    ctx.cfg.forest.config
}

fn run_forests(ctx: &Context, data: &Loaded) -> Result<ForestOutput> {
    let ledger = data.ledger.clone().unwrap_or_default();
    let analysis = data.analysis(&ctx.cfg, &ledger);
    let mut specs: Vec<OutcomeSpec> = ctx.cfg.household_outcomes();
    if !ctx.cfg.forest.outcomes.is_empty() {
        let wanted = &ctx.cfg.forest.outcomes;
        for w in wanted {
            if !specs.iter().any(|s| &s.name == w) {
                specs.push(OutcomeSpec::household(w));
            }
        }
        specs.retain(|s| wanted.contains(&s.name));
        specs.sort_by_key(|s| wanted.iter().position(|w| *w == s.name));
    }
    if specs.is_empty() {
        return Err(CliError::Config("no household outcomes for the forest".into()));
    }
    let cfg = forest_config(ctx);
    let mut per_outcome = Vec::new();
    for spec in &specs {
        let frame = analysis.frame(spec, WeightMode::EligibleItt)?;
        let sd = frame
            .control_mean_sd()
            .map(|(_, sd)| sd)
            .filter(|sd| *sd > 0.0)
            .ok_or_else(|| CliError::Estimation(format!("`{}` has no control variation", spec.name)))?;
        let input = cash_vs_kind_input(&frame)?;
        let model = fit_forest(&input.residualized, &input.moderators, &input.moderator_names, &cfg)?;
        let pred = model.predict(&input.moderators)?;
        let rows: Vec<(usize, f64, f64)> = input
            .frame_rows
            .iter()
            .zip(pred)
            .map(|(&i, p)| (frame.rows[i].household, p, p / sd))
            .collect();
        per_outcome.push((spec.name.clone(), rows));
    }
    let mut common: Option<BTreeSet<usize>> = None;
    for (_, rows) in &per_outcome {
        let s: BTreeSet<usize> = rows.iter().map(|r| r.0).collect();
        common = Some(match common {
            Some(c) => c.intersection(&s).copied().collect(),
            None => s,
        });
    }
    let households: Vec<usize> = common.unwrap_or_default().into_iter().collect();
    let aligned = per_outcome
        .iter()
        .map(|(name, rows)| {
            let by_h: BTreeMap<usize, f64> = rows.iter().map(|r| (r.0, r.2)).collect();
            (name.clone(), households.iter().map(|h| by_h[h]).collect())
        })
        .collect();
    Ok(ForestOutput {
        outcomes: specs.iter().map(|s| s.name.clone()).collect(),
        aligned,
        households,
        per_outcome,
    })
}

#[derive(Serialize)]
struct CateRow<'a> {
    outcome: &'a str,
    household_id: &'a str,
    cate: f64,
    cate_sd_units: f64,
}

#[derive(Serialize)]
struct TargetingRow {
    outcome: String,
    own_rule_gain: f64,
    composite_rule_gain: f64,
}

fn forest(ctx: &Context) -> Result<Vec<PathBuf>> {
    let data = ctx.load()?;
    let f = run_forests(ctx, &data)?;
    let mut cate_rows = Vec::new();
    for (name, rows) in &f.per_outcome {
        for &(h, cate, std) in rows {
            cate_rows.push(CateRow {
                outcome: name,
                household_id: &data.panel.households[h].id,
                cate,
                cate_sd_units: std,
            });
        }
    }
    let mut written = vec![ctx.write("cate_predictions.csv", &emit_records(&cate_rows, None)?)?];
    if f.households.is_empty() {
        return Err(CliError::Estimation("no household has a prediction for every forest outcome".into()));
    }
    let corr = cross_outcome_correlation(&f.aligned)?;
    written.push(ctx.write("cate_correlation.csv", &emit_matrix(&f.outcomes, &corr)?)?);
    let t = targeting_gains(&f.aligned)?;
    let mut rows: Vec<TargetingRow> = t
        .outcomes
        .iter()
        .enumerate()
        .map(|(k, o)| TargetingRow {
            outcome: o.clone(),
            own_rule_gain: t.per_outcome_gain[k],
            composite_rule_gain: t.composite_by_outcome[k],
        })
        .collect();
    rows.push(TargetingRow {
        outcome: "mean".into(),
        own_rule_gain: t.mean_per_outcome_gain,
        composite_rule_gain: t.composite_gain,
    });
    written.push(ctx.write("targeting.csv", &emit_records(&rows, None)?)?);
    println!(
        "composite rule assigns cash to {:.1}% of {} households",
        100.0 * t.composite_cash_share,
        f.households.len()
    );
    Ok(written)
}

// ---------------------------------------------------------------------------

fn attrition(ctx: &Context) -> Result<Vec<PathBuf>> {
    let data = ctx.load()?;
    let ledger = data.ledger.clone().unwrap_or_default();
    let analysis = data.analysis(&ctx.cfg, &ledger);
    let levels = &ctx.cfg.analysis.attrition_levels;
    let fits: Vec<_> = levels
        .par_iter()
        .map(|l| analysis.attrition_regression(*l, &ctx.cfg.analysis.attrition))
        .collect();
    let mut table = CoefTable::new(&POOLED, &POOLED_TESTS);
    for r in fits {
        let e = r?;
        let t = equality_tests(&e);
        table.push(&e, Family::Primary, t)?;
    }
    Ok(vec![ctx.write("attrition.csv", &emit_table(&table)?)?])
}

fn simulate(ctx: &Context) -> Result<Vec<PathBuf>> {
    let spec = ctx.dgp("simulate")?;
    let sim = &ctx.cfg.simulate;
    if sim.estimators.is_empty() {
        return Err(CliError::Config("no estimators listed under [[simulate.estimators]]".into()));
    }
    let mut reports: Vec<McReport> = Vec::new();
    for d in &sim.estimators {
        let r = monte_carlo(spec, d, sim.reps, ctx.seed, &ctx.cfg.analysis.options)?;
        println!("{}", r.summary());
        reports.push(r);
    }
    Ok(vec![ctx.write("mc_report.csv", &emit_records(&reports, None)?)?])
}

#[derive(Serialize)]
struct PowerRecord {
    variant: &'static str,
    analytic_var: f64,
    mc_var: f64,
    analytic_ratio: f64,
    mc_ratio: f64,
    ratio_gap: f64,
    var_gap: f64,
    published_cubic_ratio: f64,
}

fn power(ctx: &Context) -> Result<Vec<PathBuf>> {
    let spec = ctx.dgp("power")?;
    let study = interpolation_power_study(spec, ctx.cfg.power.reps, ctx.seed)?;
    let rows: Vec<PowerRecord> = study
        .rows
        .iter()
        .map(|r| PowerRecord {
            variant: r.variant.label(),
            analytic_var: r.analytic_var,
            mc_var: r.mc_var,
            analytic_ratio: r.analytic_ratio,
            mc_ratio: r.mc_ratio,
            ratio_gap: r.ratio_gap,
            var_gap: r.var_gap,
            published_cubic_ratio: PUBLISHED_CUBIC_RATIO,
        })
        .collect();
    for r in &rows {
        println!("{:<11} analytic {:.3}  monte carlo {:.3}", r.variant, r.analytic_ratio, r.mc_ratio);
    }
    Ok(vec![ctx.write("power.csv", &emit_records(&rows, None)?)?])
}

// ---------------------------------------------------------------------------

fn report(ctx: &Context) -> Result<Vec<PathBuf>> {
    let ledger = ctx.cfg.analysis_ledger("report")?;
    let data = ctx.load()?;
    let p = &data.panel;
    let mut written = Vec::new();

    let groups: Vec<TransferGroup> = Arm::GD
        .iter()
        .filter_map(|&arm| {
            let assigned: Vec<f64> = p
                .design
                .villages()
                .iter()
                .filter(|v| v.arm == arm)
                .filter_map(|v| v.assigned_transfer)
                .collect();
            if assigned.is_empty() {
                return None;
            }
            let received = p
                .households
                .iter()
                .enumerate()
                .filter(|(h, hh)| p.arm_of(*h) == arm && hh.stratum == Stratum::Eligible)
                .filter_map(|(_, hh)| hh.transfer_usd)
                .collect();
            Some(TransferGroup {
                label: arm.label().into(),
                assigned: assigned.iter().sum::<f64>() / assigned.len() as f64,
                received,
            })
        })
        .collect();
    written.push(ctx.write("transfer_box_whisker.svg", &transfer_box_whisker(&groups)?)?);

    let outcomes = ctx.outcomes()?;
    let spec = match &ctx.cfg.report.cost_equivalence_outcome {
        Some(name) => outcomes
            .iter()
            .find(|o| &o.name == name)
            .cloned()
            .unwrap_or_else(|| OutcomeSpec::household(name)),
        None => outcomes[0].clone(),
    };
    let analysis = data.analysis(&ctx.cfg, &ledger);
    let ce = analysis.cost_equivalent(&spec, CeVariant::Linear)?;
    let granular = analysis.itt(&spec, Granularity::Granular)?;
    let control_mean = granular
        .control_mean
        .ok_or_else(|| CliError::Estimation(format!("`{}` has no control observations", spec.name)))?;
    let mut points = Vec::new();
    for (arm, coef) in [
        (Arm::Gikuriro, "gikuriro"),
        (Arm::GdLower, "gd_lower"),
        (Arm::GdMiddle, "gd_middle"),
        (Arm::GdUpper, "gd_upper"),
        (Arm::GdLarge, "gd_large"),
    ] {
        if let (Ok(b), Some(l)) = (granular.coef(coef), ledger.get(arm)) {
            points.push(ArmPoint {
                label: arm.label().into(),
                cost: l.cost_per_eligible(),
                mean: control_mean + b,
                cash: arm.is_gd(),
            });
        }
    }
    let slope = ce.gamma1.map_or(0.0, |g| g.estimate) / 100.0;
    let intercept = control_mean + ce.delta_t.estimate - slope * ce.benchmark;
    let svg = cost_equivalence_figure(&spec.name, control_mean, &points, (intercept, slope), ce.benchmark)?;
    written.push(ctx.write("cost_equivalence.svg", &svg)?);

    let foods = &ctx.cfg.report.food_groups;
    if foods.is_empty() {
        return Err(CliError::Config("no food groups listed under [report]".into()));
    }
    let arms: Vec<String> = Arm::ALL.iter().map(|a| a.label().to_string()).collect();
    let mut shares = Vec::new();
    for g in foods {
        let mut row = Vec::new();
        for &arm in &Arm::ALL {
            let (mut sw, mut swy) = (0.0, 0.0);
            for (h, hh) in p.households.iter().enumerate() {
                if p.arm_of(h) != arm || hh.stratum != Stratum::Eligible {
                    continue;
                }
                if let Some(y) = hh.outcome(g, Round::Endline) {
                    let w = hh.sampling_weight * hh.tracking_weight;
                    sw += w;
                    swy += w * y;
                }
            }
            if sw <= 0.0 {
                return Err(CliError::Validation(format!("no endline `{g}` observations in {}", arm.label())));
            }
            row.push(swy / sw);
        }
        shares.push(row);
    }
    written.push(ctx.write("dietary_diversity.svg", &dietary_diversity_bars(foods, &arms, &shares)?)?);

    let f = run_forests(ctx, &data)?;
    let series = f
        .per_outcome
        .iter()
        .map(|(name, rows)| {
            let v: Vec<f64> = rows.iter().map(|r| r.2).collect();
            Ok((name.clone(), cate_cdf(&v)?))
        })
        .collect::<Result<Vec<_>>>()?;
    written.push(ctx.write("cate_cdf.svg", &cate_cdf_plot(&series)?)?);
    Ok(written)
}
