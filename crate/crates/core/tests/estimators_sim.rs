use std::collections::BTreeSet;

use cashbench::costing::CostBasis;
use cashbench::data::{OutcomeSpec, Round, Stratum, WeightMode};
use cashbench::estimators::{
    fit_with_controls, treatment_columns, Analysis, AttritionLevel, AttritionOptions, CeVariant, ControlPolicy,
    EstimatorOptions, Granularity, Moderator,
};
use cashbench::simlab::{
    generate, generate_stream, monte_carlo, run_replications, Draw, DgpSpec, EffectModel, EstimatorDescriptor,
    OutcomeDgp,
};

fn plain() -> EstimatorOptions {
    EstimatorOptions {
        controls: ControlPolicy::None,
        ..EstimatorOptions::default()
    }
}

fn with_outcome(o: OutcomeDgp) -> DgpSpec {
    DgpSpec {
        outcomes: vec![o],
        ..DgpSpec::reference()
    }
}

fn y() -> OutcomeSpec {
    OutcomeSpec::household("y")
}

#[test]
fn frames_follow_their_weighting_mode() {
    let ds = generate(&DgpSpec::reference(), 21).unwrap();
    let a = Analysis::new(&ds.panel, &ds.ledger, plain());
    let p = &ds.panel;

    let itt = a.frame(&y(), WeightMode::EligibleItt).unwrap();
    assert!(itt.rows.iter().all(|r| r.stratum == Stratum::Eligible));

    let tce = a.frame(&y(), WeightMode::PopulationTce).unwrap();
    let mean_w = |s: Stratum| {
        let w: Vec<f64> = tce.rows.iter().filter(|r| r.stratum == s).map(|r| r.weight).collect();
        w.iter().sum::<f64>() / w.len() as f64
    };
    assert!(mean_w(Stratum::Ineligible) > 5.0 * mean_w(Stratum::Eligible));

    let sp = a.frame(&y(), WeightMode::SpilloverNeverTreat).unwrap();
    for r in &sp.rows {
        if r.treated {
            assert_eq!(r.weight, 0.0);
        }
    }

    // one row per household with an observed endline, never more
    for f in [&itt, &tce, &sp] {
        let ids: BTreeSet<usize> = f.rows.iter().map(|r| r.household).collect();
        assert_eq!(ids.len(), f.rows.len());
        for r in &f.rows {
            assert_eq!(Some(r.y), p.households[r.household].outcome("y", Round::Endline));
        }
    }
}

#[test]
fn itt_recovers_a_constant_effect() {
    let spec = with_outcome(OutcomeDgp {
        effect: EffectModel::constant(0.3),
        ..OutcomeDgp::default()
    });
    let d = EstimatorDescriptor::Itt {
        outcome: "y".into(),
        coefficient: "gd_large".into(),
        granular: false,
    };
    let mc = monte_carlo(&spec, &d, 200, 31, &EstimatorOptions::default()).unwrap();
    assert!((mc.mean_estimate - 0.3).abs() < 0.02, "{}", mc.summary());
    assert!(mc.bias.abs() < 2.0 * mc.mc_se, "{}", mc.summary());
}

#[test]
fn cost_equivalence_is_unbiased_at_zero_offset() {
    let d = EstimatorDescriptor::CostEquivalent {
        outcome: "y".into(),
        variant: CeVariant::Linear,
        coefficient: "delta_gk".into(),
    };
    let mc = monte_carlo(&DgpSpec::cost_equivalence(0.0), &d, 200, 32, &EstimatorOptions::default()).unwrap();
    assert!(mc.mean_estimate.abs() < 0.02, "{}", mc.summary());
}

#[test]
fn higher_degree_interpolation_is_noisier() {
    let ds = generate(&DgpSpec::cost_equivalence(0.0), 33).unwrap();
    let a = Analysis::new(&ds.panel, &ds.ledger, plain());
    let lin = a.cost_equivalent(&y(), CeVariant::Linear).unwrap();
    let cub = a.cost_equivalent(&y(), CeVariant::Cubic).unwrap();
    assert!(lin.delta_gk.se < cub.delta_gk.se);
}

#[test]
fn moving_the_benchmark_reparametrizes_the_same_curve() {
    let ds = generate(&DgpSpec::cost_equivalence(0.1), 34).unwrap();
    let a = Analysis::new(&ds.panel, &ds.ledger, plain());
    let frame = a.frame(&y(), WeightMode::EligibleItt).unwrap();
    for variant in [CeVariant::Linear, CeVariant::Quadratic] {
        let base = a.cost_equivalent_on(&frame, variant, CostBasis::PerEligible, None).unwrap();
        let shifted = a
            .cost_equivalent_on(&frame, variant, CostBasis::PerEligible, Some(base.benchmark + 37.0))
            .unwrap();
        for cost in [80.0, 120.0, 160.0, 400.0] {
            assert!((base.cash_impact_at(cost) - shifted.cash_impact_at(cost)).abs() < 1e-8);
        }
        let gk = base.delta_gk.estimate + base.cash_impact_at(base.benchmark);
        let expect = gk - base.cash_impact_at(shifted.benchmark);
        assert!((shifted.delta_gk.estimate - expect).abs() < 1e-8);
    }
}

#[test]
fn scaling_costs_scales_ratios_only() {
    let ds = generate(&DgpSpec::equal_bcr(0.05).unwrap(), 35).unwrap();
    let scaled = ds.ledger.scaled(2.0).unwrap();
    let a = Analysis::new(&ds.panel, &ds.ledger, plain());
    let b = Analysis::new(&ds.panel, &scaled, plain());
    let est = a.itt(&y(), Granularity::Pooled).unwrap();
    let (ra, rb) = (a.bcr_row(&est).unwrap(), b.bcr_row(&est).unwrap());
    for j in 0..3 {
        assert!((rb.cost[j] - 2.0 * ra.cost[j]).abs() < 1e-9 * ra.cost[j]);
        assert!((rb.bcr[j] - ra.bcr[j] / 2.0).abs() < 1e-12);
        assert!((rb.p_equal[j] - ra.p_equal[j]).abs() < 1e-10);
    }
}

#[test]
fn spillover_is_recovered() {
    let spec = with_outcome(OutcomeDgp {
        effect: EffectModel::constant(0.2),
        spillover: -0.4,
        ..OutcomeDgp::default()
    });
    let d = EstimatorDescriptor::Spillover {
        outcome: "y".into(),
        coefficient: "gd_main".into(),
    };
    let mc = monte_carlo(&spec, &d, 200, 36, &plain()).unwrap();
    assert!((mc.mean_estimate + 0.4).abs() < 0.05, "{}", mc.summary());
    assert!(mc.bias.abs() < 3.0 * mc.mc_se, "{}", mc.summary());
}

#[test]
fn treated_ineligibles_do_not_move_the_spillover_estimate() {
    let ds = generate(&DgpSpec::reference(), 37).unwrap();
    let mut panel = ds.panel.clone();
    let mut touched = 0;
    for hh in panel.households.iter_mut() {
        if hh.stratum == Stratum::Ineligible && hh.treated {
            if let Some(v) = hh.outcomes.get_mut(&("y".to_string(), Round::Endline)) {
                *v = 1e6;
                touched += 1;
            }
        }
    }
    assert!(touched > 0);
    let before = Analysis::new(&ds.panel, &ds.ledger, plain()).spillover(&y()).unwrap();
    let after = Analysis::new(&panel, &ds.ledger, plain()).spillover(&y()).unwrap();
    for name in ["gd_main", "gd_large"] {
        assert!((before.coef(name).unwrap() - after.coef(name).unwrap()).abs() < 1e-12);
        assert!((before.se(name).unwrap() - after.se(name).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn attrition_without_attriters_is_an_error() {
    let mut spec = DgpSpec::reference();
    spec.attrition.control_rate = 0.0;
    let ds = generate(&spec, 38).unwrap();
    let a = Analysis::new(&ds.panel, &ds.ledger, plain());
    assert!(a.attrition_regression(AttritionLevel::Household, &AttritionOptions::default()).is_err());
}

fn coefficient_mc(spec: &DgpSpec, seed: u64, reps: usize, truth: f64, pick: impl Fn(&Analysis) -> (f64, f64, f64, f64) + Sync + Send) -> cashbench::simlab::McReport {
    run_replications("custom", reps, |rep| {
        let ds = generate_stream(spec, seed, rep as u64)?;
        let (estimate, se, p, df) = pick(&Analysis::new(&ds.panel, &ds.ledger, plain()));
        Ok(Draw { estimate, se, p, df, truth })
    })
    .unwrap()
}

#[test]
fn lump_sum_premium_is_recovered() {
    let spec = with_outcome(OutcomeDgp {
        effect: EffectModel::constant(0.2),
        lump_sum_extra: 0.3,
        ..OutcomeDgp::default()
    });
    let mc = coefficient_mc(&spec, 39, 150, 0.3, |a| {
        let r = a.lumpsum_flow(&y()).unwrap();
        let e = &r.estimate;
        let c = "gd_main:lump_sum";
        (e.coef(c).unwrap(), e.se(c).unwrap(), e.p(c).unwrap(), e.fit.df)
    });
    assert!(mc.bias.abs() < 0.05 && mc.bias.abs() < 3.0 * mc.mc_se, "{}", mc.summary());
}

#[test]
fn matched_choice_premium_is_recovered() {
    let spec = with_outcome(OutcomeDgp {
        effect: EffectModel::constant(0.2),
        matched_choice_extra: 0.3,
        ..OutcomeDgp::default()
    });
    let mc = coefficient_mc(&spec, 40, 150, 0.3, |a| {
        let e = a.choice_effect(&y()).unwrap();
        let c = "got_what_wanted";
        (e.coef(c).unwrap(), e.se(c).unwrap(), e.p(c).unwrap(), e.fit.df)
    });
    assert!(mc.bias.abs() < 0.05 && mc.bias.abs() < 3.0 * mc.mc_se, "{}", mc.summary());
}

#[test]
fn centered_moderator_shifts_main_effects_only() {
    let spec = with_outcome(OutcomeDgp {
        effect: EffectModel::constant(0.2),
        baseline_gradient: -0.3,
        ..OutcomeDgp::default()
    });
    let ds = generate(&spec, 41).unwrap();
    let opts = plain();
    let a = Analysis::new(&ds.panel, &ds.ledger, opts.clone());
    let h = a.prespecified_heterogeneity(&y(), Moderator::BaselineAnthro).unwrap();
    let lab = Moderator::BaselineAnthro.label();

    // refit by hand with the raw, uncentered moderator
    let frame = a
        .frame(&y(), WeightMode::EligibleItt)
        .unwrap()
        .filtered(|r| !r.lag_missing);
    let m: Vec<f64> = frame.rows.iter().map(|r| r.y_lag).collect();
    let arms = treatment_columns(&frame, false);
    // the lag carries the moderator's main effect
    let mut focal = arms.clone();
    for (name, d) in &arms {
        focal.push((format!("{name}:{lab}"), d.iter().zip(&m).map(|(a, b)| a * b).collect()));
    }
    let raw = fit_with_controls(&frame, focal, true, &opts).unwrap();
    for (name, _) in &arms {
        let inter = format!("{name}:{lab}");
        let slope = raw.coef(&inter).unwrap();
        assert!((h.estimate.coef(&inter).unwrap() - slope).abs() < 1e-9);
        let main = raw.coef(name).unwrap() + slope * h.centered_at;
        assert!((h.estimate.coef(name).unwrap() - main).abs() < 1e-9);
    }
}
