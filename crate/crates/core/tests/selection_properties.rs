use nalgebra::DMatrix;
use proptest::prelude::*;

use cashbench::selection::{lasso_rigorous, penalty_level, post_double_select, DoubleSelectionInput, LassoConfig};
use cashbench::simlab::{sparse_draw, SparseDgp};

fn keep_columns(x: &DMatrix<f64>, cols: &[usize]) -> (DMatrix<f64>, Vec<String>) {
    (x.select_columns(cols), cols.iter().map(|j| format!("x{}", j + 1)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rigorous_lasso_meets_kkt(seed in any::<u64>(), confounders in 0usize..6, effect in -1.0f64..1.0) {
        let dgp = SparseDgp { n: 200, p: 30, confounders, effect, ..SparseDgp::default() };
        let d = sparse_draw(&dgp, seed, 0);
        let w: Vec<f64> = (0..dgp.n).map(|i| 1.0 + (i % 3) as f64).collect();
        let fit = lasso_rigorous(&d.y, &d.x, &w, &LassoConfig::default()).unwrap();
        prop_assert!(fit.max_kkt_violation <= 1e-6, "kkt {}", fit.max_kkt_violation);
        for j in 0..dgp.p {
            prop_assert_eq!(fit.coef[j] != 0.0, fit.active.contains(&j));
        }
    }

    #[test]
    fn always_keep_is_retained(seed in any::<u64>(), nkeep in 1usize..4) {
        let dgp = SparseDgp { n: 300, p: 20, ..SparseDgp::default() };
        let d = sparse_draw(&dgp, seed, 1);
        let keep_idx: Vec<usize> = (dgp.p - nkeep..dgp.p).collect();
        let cand_idx: Vec<usize> = (0..dgp.p - nkeep).collect();
        let (keep, keep_names) = keep_columns(&d.x, &keep_idx);
        let (cand, cand_names) = keep_columns(&d.x, &cand_idx);
        let sel = post_double_select(
            &DoubleSelectionInput {
                y: &d.y,
                treatments: std::slice::from_ref(&d.d),
                candidates: &cand,
                candidate_names: &cand_names,
                keep: &keep,
                keep_names: &keep_names,
                weights: &vec![1.0; dgp.n],
            },
            &LassoConfig::default(),
        )
        .unwrap();
        let controls = sel.controls();
        for k in &keep_names {
            prop_assert!(controls.contains(k));
        }
        prop_assert!(sel.max_kkt_violation <= 1e-6);
    }
}

#[test]
fn penalty_grows_with_candidate_count() {
    let cfg = LassoConfig::default();
    let mut last = 0.0;
    for p in [1, 2, 5, 10, 50, 200, 1000] {
        let l = penalty_level(500, p, &cfg).unwrap();
        assert!(l > last, "p = {p}");
        last = l;
    }
}

#[test]
fn pure_noise_is_rarely_selected() {
    let dgp = SparseDgp {
        n: 500,
        p: 50,
        confounders: 0,
        ..SparseDgp::default()
    };
    let reps = 100;
    let mut any = 0;
    for rep in 0..reps {
        let d = sparse_draw(&dgp, 77, rep);
        let sel = post_double_select(
            &DoubleSelectionInput {
                y: &d.y,
                treatments: std::slice::from_ref(&d.d),
                candidates: &d.x,
                candidate_names: &d.names,
                keep: &DMatrix::zeros(dgp.n, 0),
                keep_names: &[],
                weights: &vec![1.0; dgp.n],
            },
            &LassoConfig::default(),
        )
        .unwrap();
        if !sel.selected.is_empty() {
            any += 1;
        }
    }
    assert!((any as f64) < 0.2 * reps as f64, "noise selected in {any} of {reps} draws");
}
