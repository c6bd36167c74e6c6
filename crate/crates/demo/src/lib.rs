//! Browser bindings for a few cashbench operations. Build with
//! `wasm-pack build crates/demo --target web`, serve `crates/demo` over HTTP
//! and open `www/index.html`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use cashbench::costing::{ArmCostLedger, CostBasis, CostLedger};
use cashbench::data::Arm;
use cashbench::estimators::{Analysis, CeVariant, ControlPolicy, EstimatorOptions, Granularity};
use cashbench::figures::{cost_equivalence_figure, ArmPoint};
use cashbench::inference::sharpened_q;
use cashbench::simlab::{generate, DgpSpec, EffectModel};

#[derive(Debug, Serialize)]
pub struct CostRow {
    pub arm: &'static str,
    pub cost_per_beneficiary: f64,
    pub cost_per_eligible: f64,
    pub cost_per_village_household: f64,
    /// Deviation from the benchmark in $100, cash arms only.
    pub tau: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct CostTable {
    pub benchmark: f64,
    pub rows: Vec<CostRow>,
}

/// The reference ledger with Gikuriro's per-beneficiary cost replaced and all
/// cash arms scaled by `cash_scale`.
pub fn cost_table_for(gikuriro_cost: f64, cash_scale: f64) -> cashbench::Result<CostTable> {
    let base = CostLedger::reference();
    let ledger = CostLedger::new(base.entries().map(|l| {
        let cost = match l.arm {
            Arm::Gikuriro => gikuriro_cost,
            _ => l.cost_per_beneficiary * cash_scale,
        };
        ArmCostLedger {
            cost_per_beneficiary: cost,
            ..*l
        }
    }))?;
    let benchmark = ledger.default_benchmark(CostBasis::PerEligible)?;
    let rows = ledger
        .entries()
        .map(|l| CostRow {
            arm: l.arm.label(),
            cost_per_beneficiary: l.cost_per_beneficiary,
            cost_per_eligible: l.cost_per_eligible(),
            cost_per_village_household: l.cost_per_village_household(),
            tau: l.arm.is_gd().then(|| (l.cost_per_eligible() - benchmark) / 100.0),
        })
        .collect();
    Ok(CostTable { benchmark, rows })
}

#[derive(Debug, Serialize)]
pub struct CeDemo {
    pub delta_gk: f64,
    pub se: f64,
    pub p: f64,
    pub benchmark: f64,
    pub svg: String,
}

/// Simulates one trial with the given Gikuriro offset and cash slope, runs the
/// linear cost-equivalent regression and draws the cost-equivalence figure.
pub fn cost_equivalence_for(offset: f64, per_100: f64, seed: u64) -> cashbench::Result<CeDemo> {
    let mut spec = DgpSpec::cost_equivalence(offset);
    if let EffectModel::LinearInCost { per_100: p, .. } = &mut spec.outcomes[0].effect {
        *p = per_100;
    }
    let ds = generate(&spec, seed)?;
    let opts = EstimatorOptions {
        controls: ControlPolicy::None,
        ..EstimatorOptions::default()
    };
    let analysis = Analysis::new(&ds.panel, &ds.ledger, opts);
    let outcome = cashbench::data::OutcomeSpec::household("y");
    let ce = analysis.cost_equivalent(&outcome, CeVariant::Linear)?;
    let granular = analysis.itt(&outcome, Granularity::Granular)?;
    let control_mean = granular.control_mean.unwrap_or(0.0);
    let mut points = Vec::new();
    for (arm, coef) in [
        (Arm::Gikuriro, "gikuriro"),
        (Arm::GdLower, "gd_lower"),
        (Arm::GdMiddle, "gd_middle"),
        (Arm::GdUpper, "gd_upper"),
        (Arm::GdLarge, "gd_large"),
    ] {
        if let (Ok(b), Some(l)) = (granular.coef(coef), ds.ledger.get(arm)) {
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
    let svg = cost_equivalence_figure("y", control_mean, &points, (intercept, slope), ce.benchmark)?;
    Ok(CeDemo {
        delta_gk: ce.delta_gk.estimate,
        se: ce.delta_gk.se,
        p: ce.delta_gk.p,
        benchmark: ce.benchmark,
        svg,
    })
}

/// Parses p-values separated by commas, spaces or newlines.
pub fn parse_pvalues(text: &str) -> cashbench::Result<Vec<f64>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| cashbench::Error::InvalidInput(format!("`{s}` is not a number")))
        })
        .collect()
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json(v: &impl Serialize) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(js_err)
}

/// JSON cost table; see [`cost_table_for`].
#[wasm_bindgen]
pub fn cost_table(gikuriro_cost: f64, cash_scale: f64) -> Result<String, JsError> {
    to_json(&cost_table_for(gikuriro_cost, cash_scale).map_err(js_err)?)
}

/// JSON array of sharpened q-values for the listed p-values.
#[wasm_bindgen]
pub fn q_values(pvalues: &str) -> Result<String, JsError> {
    let p = parse_pvalues(pvalues).map_err(js_err)?;
    to_json(&sharpened_q(&p).map_err(js_err)?)
}

/// JSON with the estimate and an SVG figure; see [`cost_equivalence_for`].
#[wasm_bindgen]
pub fn cost_equivalence(offset: f64, per_100: f64, seed: u32) -> Result<String, JsError> {
    to_json(&cost_equivalence_for(offset, per_100, u64::from(seed)).map_err(js_err)?)
}
