use cashbench_demo::{cost_equivalence_for, cost_table_for, parse_pvalues};

#[test]
fn reference_costs_per_eligible() {
    let t = cost_table_for(141.84, 1.0).unwrap();
    let gk = t.rows.iter().find(|r| r.arm == "Gikuriro").unwrap();
    // 141.84 · 0.4 + 141.84 · 0.6 · 0.8
    assert!((gk.cost_per_eligible - 124.8192).abs() < 1e-9);
    assert!(gk.tau.is_none());
    let lower = t.rows.iter().find(|r| r.arm == "GD_Lower").unwrap();
    assert!((lower.tau.unwrap() - (66.02 * 0.81 - t.benchmark) / 100.0).abs() < 1e-12);
}

#[test]
fn scaling_cash_moves_tau() {
    let a = cost_table_for(141.84, 1.0).unwrap();
    let b = cost_table_for(141.84, 2.0).unwrap();
    let large = |t: &cashbench_demo::CostTable| t.rows.iter().find(|r| r.arm == "GD_Large").unwrap().cost_per_eligible;
    assert!((large(&b) - 2.0 * large(&a)).abs() < 1e-9);
    assert!(cost_table_for(-1.0, 1.0).is_err());
}

#[test]
fn pvalue_parsing() {
    assert_eq!(parse_pvalues("0.01, 0.2\n0.5  0.04").unwrap(), vec![0.01, 0.2, 0.5, 0.04]);
    assert!(parse_pvalues("0.1, abc").is_err());
}

#[test]
fn simulated_figure_is_svg() {
    let r = cost_equivalence_for(0.0, 0.1, 3).unwrap();
    assert!(r.svg.starts_with("<svg"));
    assert!(r.se > 0.0 && r.delta_gk.abs() < 5.0 * r.se);
}
