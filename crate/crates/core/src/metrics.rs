//! Relative error norms over a set of test points.

use serde::{Deserialize, Serialize};

/// Relative `L∞` and `L²` errors of one field component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeErrors {
    pub linf: f64,
    pub l2: f64,
    /// Set when the exact field vanishes on the test set and the values are
    /// absolute errors instead.
    #[serde(default)]
    pub absolute: bool,
}

/// `max|a − e| / max|e|` and `‖a − e‖₂ / ‖e‖₂` over paired samples.
pub fn relative_errors(numeric: &[f64], exact: &[f64]) -> RelativeErrors {
    assert_eq!(numeric.len(), exact.len(), "paired samples");
    let mut max_err = 0.0_f64;
    let mut max_ref = 0.0_f64;
    let mut sum_err = 0.0;
    let mut sum_ref = 0.0;
    for (a, e) in numeric.iter().zip(exact) {
        let d = a - e;
        max_err = max_err.max(d.abs());
        max_ref = max_ref.max(e.abs());
        sum_err += d * d;
        sum_ref += e * e;
    }
    if max_ref == 0.0 {
        let n = numeric.len().max(1) as f64;
        return RelativeErrors {
            linf: max_err,
            l2: (sum_err / n).sqrt(),
            absolute: true,
        };
    }
    RelativeErrors {
        linf: max_err / max_ref,
        l2: (sum_err / sum_ref).sqrt(),
        absolute: false,
    }
}

/// Relative errors of a vector field, with the Euclidean norm taken at each
/// point (`numeric` and `exact` hold one vector per point).
pub fn relative_errors_vector(numeric: &[Vec<f64>], exact: &[Vec<f64>]) -> RelativeErrors {
    assert_eq!(numeric.len(), exact.len(), "paired samples");
    let (mut max_err, mut max_ref, mut sum_err, mut sum_ref) = (0.0_f64, 0.0_f64, 0.0, 0.0);
    for (a, e) in numeric.iter().zip(exact) {
        let d2: f64 = a.iter().zip(e).map(|(x, y)| (x - y) * (x - y)).sum();
        let e2: f64 = e.iter().map(|y| y * y).sum();
        max_err = max_err.max(d2.sqrt());
        max_ref = max_ref.max(e2.sqrt());
        sum_err += d2;
        sum_ref += e2;
    }
    if max_ref == 0.0 {
        let n = numeric.len().max(1) as f64;
        return RelativeErrors {
            linf: max_err,
            l2: (sum_err / n).sqrt(),
            absolute: true,
        };
    }
    RelativeErrors {
        linf: max_err / max_ref,
        l2: (sum_err / sum_ref).sqrt(),
        absolute: false,
    }
}

/// Median of a nonempty sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_and_scaled() {
        let e = vec![1.0, -2.0, 0.5, 3.0];
        assert_eq!(relative_errors(&e, &e), RelativeErrors { linf: 0.0, l2: 0.0, absolute: false });
        let a: Vec<f64> = e.iter().map(|v| 1.01 * v).collect();
        let r = relative_errors(&a, &e);
        assert!((r.linf - 0.01).abs() < 1e-12 && (r.l2 - 0.01).abs() < 1e-12);
    }

    #[test]
    fn single_spike() {
        let n = 400;
        let e = vec![2.0; n];
        let mut a = e.clone();
        a[17] += 0.5;
        let r = relative_errors(&a, &e);
        // ‖u‖ is the RMS value 2.
        assert!((r.l2 - 0.5 / 2.0 * (1.0 / n as f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_reference_is_flagged() {
        let r = relative_errors(&[0.1, -0.1], &[0.0, 0.0]);
        assert!(r.absolute);
        assert!((r.linf - 0.1).abs() < 1e-15);
    }

    #[test]
    fn median_of_three() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    proptest! {
        #[test]
        fn scale_invariance(vals in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..40), c in prop_oneof![-100.0f64..-0.01, 0.01f64..100.0]) {
            let e: Vec<f64> = vals.iter().map(|p| p.0).collect();
            prop_assume!(e.iter().any(|v| v.abs() > 1e-3));
            let a: Vec<f64> = vals.iter().map(|p| p.1).collect();
            let r1 = relative_errors(&a, &e);
            let sa: Vec<f64> = a.iter().map(|v| c * v).collect();
            let se: Vec<f64> = e.iter().map(|v| c * v).collect();
            let r2 = relative_errors(&sa, &se);
            prop_assert!((r1.linf - r2.linf).abs() <= 1e-12 * r1.linf.max(1.0));
            prop_assert!((r1.l2 - r2.l2).abs() <= 1e-12 * r1.l2.max(1.0));
        }
    }
}
