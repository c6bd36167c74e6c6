use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Inverse hyperbolic sine, `ln(x + sqrt(x^2 + 1))`.
pub fn ihs(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::invalid(format!("ihs of non-finite value {x}")));
    }
    // std's asinh is odd by construction (copysign) and avoids overflow in x^2
    Ok(x.asinh())
}

/// Sample quantile definition used for winsorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileMethod {
    /// Hyndman–Fan type 7: linear interpolation between order statistics.
    #[default]
    Linear,
    /// Hyndman–Fan type 1: inverse of the empirical CDF (always a data value).
    InverseCdf,
}

/// Quantile of already-sorted data.
pub fn quantile(sorted: &[f64], p: f64, method: QuantileMethod) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    match method {
        QuantileMethod::Linear => {
            let h = (n - 1) as f64 * p;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
        QuantileMethod::InverseCdf => {
            let k = (n as f64 * p).ceil() as usize;
            sorted[k.clamp(1, n) - 1]
        }
    }
}

/// Clamps values below the `lo` quantile and above the `hi` quantile
/// (unweighted quantiles).
pub fn winsorize(values: &[f64], lo: f64, hi: f64, method: QuantileMethod) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::invalid("winsorize of empty input"));
    }
    if !(0.0..1.0).contains(&lo) || !(lo < hi && hi <= 1.0) {
        return Err(Error::invalid(format!(
            "winsor quantiles must satisfy 0 <= lo < hi <= 1, got ({lo}, {hi})"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("winsorize of non-finite value"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let floor = quantile(&sorted, lo, method);
    let cap = quantile(&sorted, hi, method);
    Ok(values.iter().map(|v| v.clamp(floor, cap)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ihs_fixed_points() {
        assert_eq!(ihs(0.0).unwrap(), 0.0);
        assert!((ihs(1.0f64.sinh()).unwrap() - 1.0).abs() < 1e-15);
        // 40-digit reference: asinh(1000) = 7.600902709541988611523289784664939633568
        assert!((ihs(1000.0).unwrap() - 7.600_902_709_541_988_6).abs() < 1e-14);
    }

    #[test]
    fn ihs_rejects_non_finite() {
        assert!(ihs(f64::NAN).is_err());
        assert!(ihs(f64::INFINITY).is_err());
    }

    // sort-based oracle: with 100 points, type-7 quantile(0.01) sits 0.99 of the
    // way from x(1) to x(2); quantile(0.99) 0.01 of the way from x(99) to x(100)
    #[test]
    fn winsorize_one_to_hundred() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let w = winsorize(&v, 0.01, 0.99, QuantileMethod::Linear).unwrap();
        let min = w.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((min - 1.99).abs() < 1e-12);
        assert!((max - 99.01).abs() < 1e-12);
        let w1 = winsorize(&v, 0.01, 0.99, QuantileMethod::InverseCdf).unwrap();
        assert_eq!(w1[0], 1.0);
        assert_eq!(w1[99], 99.0);
    }

    #[test]
    fn winsorize_constant_and_empty() {
        let v = vec![3.5; 17];
        assert_eq!(winsorize(&v, 0.01, 0.99, QuantileMethod::Linear).unwrap(), v);
        assert!(winsorize(&[], 0.01, 0.99, QuantileMethod::Linear).is_err());
        assert!(winsorize(&v, 0.5, 0.5, QuantileMethod::Linear).is_err());
    }

    #[test]
    fn linear_winsorize_second_pass_stays_between_order_statistics() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let once = winsorize(&v, 0.01, 0.99, QuantileMethod::Linear).unwrap();
        let twice = winsorize(&once, 0.01, 0.99, QuantileMethod::Linear).unwrap();
        // the floor moves from 1.99 toward x(2) = 2 but never past it
        assert!(twice[0] >= once[0] && twice[0] <= 2.0);
        assert!(twice[99] <= once[99] && twice[99] >= 99.0);
    }

    proptest! {
        #[test]
        fn ihs_is_odd(x in -1e6f64..1e6) {
            prop_assert!((ihs(-x).unwrap() + ihs(x).unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn ihs_is_monotone(a in -1e6f64..1e6, b in -1e6f64..1e6) {
            if a < b {
                prop_assert!(ihs(a).unwrap() <= ihs(b).unwrap());
            }
        }

        #[test]
        fn inverse_cdf_winsorize_is_idempotent(v in proptest::collection::vec(-1e3f64..1e3, 1..200)) {
            let once = winsorize(&v, 0.05, 0.95, QuantileMethod::InverseCdf).unwrap();
            let twice = winsorize(&once, 0.05, 0.95, QuantileMethod::InverseCdf).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn winsorize_preserves_weak_order(v in proptest::collection::vec(-1e3f64..1e3, 2..100)) {
            let w = winsorize(&v, 0.1, 0.9, QuantileMethod::Linear).unwrap();
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] <= v[j] {
                        prop_assert!(w[i] <= w[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn winsorize_clamps_configured_tail_mass() {
        // continuous data on a fine grid: exactly the configured share of points is moved
        let n = 10_001;
        let v: Vec<f64> = (0..n).map(|i| ((i * 7919) % n) as f64 / n as f64).collect();
        let w = winsorize(&v, 0.01, 0.99, QuantileMethod::InverseCdf).unwrap();
        let moved = v.iter().zip(&w).filter(|(a, b)| a != b).count();
        let expected = 2.0 * 0.01 * n as f64;
        assert!((moved as f64 - expected).abs() <= 2.0, "moved {moved}");
    }
}
