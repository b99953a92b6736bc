use conplan_core::{
    calibrate, consistency_of_values, decide, order_statistic_index,
    order_statistic_index_rational, ConsistencyParams, DecisionKind, LookaheadPrediction,
    Threshold,
};
use num_rational::Ratio;
use proptest::prelude::*;

fn params(beta: f64) -> ConsistencyParams<f64> {
    ConsistencyParams::new(beta).unwrap()
}

fn to_preds(values: &[f64]) -> Vec<LookaheadPrediction<f64>> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| LookaheadPrediction::new(i + 1, v).unwrap())
        .collect()
}

/// Exponent evaluated exactly over rationals.
fn exact_exponent(values: &[i64], beta: Ratio<i64>) -> Ratio<i64> {
    let n = values.len() as i64;
    let mean = Ratio::new(values.iter().sum::<i64>(), n);
    let ss: Ratio<i64> = values
        .iter()
        .map(|&v| {
            let d = Ratio::from_integer(v) - mean;
            d * d
        })
        .sum();
    -(beta / Ratio::from_integer(n)) * ss
}

/// Smallest γ with #{s ≤ γ} ≥ m, searched over the scores themselves.
fn brute_force_threshold(scores: &[f64], m: u64) -> Option<f64> {
    if m == 0 {
        return Some(0.0);
    }
    let mut candidates = scores.to_vec();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates
        .into_iter()
        .find(|&g| scores.iter().filter(|&&s| s <= g).count() as u64 >= m)
}

#[test]
fn scenario_two_exponent_against_exact_arithmetic() {
    let exact = exact_exponent(&[5, 60, 120], Ratio::new(9, 10));
    assert_eq!(exact, Ratio::from_integer(-1985));
    let score = consistency_of_values(&[5.0, 60.0, 120.0], &params(0.9)).unwrap();
    assert!((score.exponent - (-1985.0)).abs() < 1e-9);
    // exp(-1985) is far below the smallest positive double
    assert!(-1985.0 < f64::MIN_POSITIVE.ln());
    assert_eq!(score.value, 0.0);
    assert!(score.underflow);
}

#[test]
fn scenario_one_exponent_against_exact_arithmetic() {
    let exact = exact_exponent(&[10, 12, 11], Ratio::new(9, 10));
    assert_eq!(exact, Ratio::new(-3, 5));
    let score = consistency_of_values(&[10.0, 12.0, 11.0], &params(0.9)).unwrap();
    assert!((score.value - 0.5488).abs() < 1e-4);
}

proptest! {
    #[test]
    fn exponent_matches_exact_rational(
        values in prop::collection::vec(0i64..200, 1..8),
        beta_num in 1i64..50,
    ) {
        let beta = Ratio::new(beta_num, 10);
        let exact = exact_exponent(&values, beta);
        let exact_f = *exact.numer() as f64 / *exact.denom() as f64;
        let floats: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        let score = consistency_of_values(&floats, &params(beta_num as f64 / 10.0)).unwrap();
        prop_assert!((score.exponent - exact_f).abs() <= 1e-9 * exact_f.abs().max(1.0));
    }

    #[test]
    fn permutation_invariance(values in prop::collection::vec(0.0f64..50.0, 1..7), beta in 0.01f64..3.0) {
        let a = consistency_of_values(&values, &params(beta)).unwrap();
        let mut rev = values.clone();
        rev.reverse();
        let mut rot = values.clone();
        rot.rotate_left(1);
        for perm in [rev, rot] {
            let b = consistency_of_values(&perm, &params(beta)).unwrap();
            prop_assert!((a.value - b.value).abs() <= 1e-12);
        }
    }

    #[test]
    fn bounded_and_one_iff_unanimous(values in prop::collection::vec(0u8..6, 1..6), beta in 0.01f64..3.0) {
        let floats: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        let s = consistency_of_values(&floats, &params(beta)).unwrap();
        prop_assert!((0.0..=1.0).contains(&s.value));
        let unanimous = values.iter().all(|&v| v == values[0]);
        prop_assert_eq!(s.value == 1.0, unanimous);
    }

    #[test]
    fn dispersion_monotonicity(
        values in prop::collection::vec(0.0f64..20.0, 2..6),
        stretch in 1.05f64..3.0,
    ) {
        let p = params(0.05);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let spread = values.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
        prop_assume!(spread > 1e-3);
        let stretched: Vec<f64> = values.iter().map(|v| mean + stretch * (v - mean) + 100.0).collect();
        let shifted: Vec<f64> = values.iter().map(|v| v + 100.0).collect();
        let a = consistency_of_values(&shifted, &p).unwrap();
        let b = consistency_of_values(&stretched, &p).unwrap();
        prop_assume!(a.value > 0.0);
        prop_assert!(b.value < a.value);
    }

    #[test]
    fn beta_monotonicity(values in prop::collection::vec(0.0f64..5.0, 2..5), b1 in 0.01f64..1.0, factor in 1.1f64..3.0) {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        prop_assume!(values.iter().any(|v| (v - mean).abs() > 1e-3));
        let lo = consistency_of_values(&values, &params(b1)).unwrap();
        let hi = consistency_of_values(&values, &params(b1 * factor)).unwrap();
        prop_assume!(lo.value > 0.0);
        prop_assert!(hi.value < lo.value);
    }

    #[test]
    fn translation_invariance(values in prop::collection::vec(0.0f64..30.0, 1..6), shift in 0.0f64..100.0) {
        let p = params(0.9);
        let a = consistency_of_values(&values, &p).unwrap();
        let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
        let b = consistency_of_values(&shifted, &p).unwrap();
        prop_assert!((a.value - b.value).abs() <= 1e-9);
    }

    #[test]
    fn gate_and_argmin_soundness(
        values in prop::collection::vec(0u8..10, 2..6),
        gamma in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let floats: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        let p = params(0.9);
        let d = decide(&to_preds(&floats), &Threshold::Finite(gamma), &p, seed).unwrap();
        let lambda = consistency_of_values(&floats, &p).unwrap().value;
        prop_assert_eq!(d.kind == DecisionKind::Abstain, lambda <= gamma);
        let min = floats.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(floats[d.argmin_index - 1], min);
        prop_assert_eq!(d.tie_break_count, floats.iter().filter(|&&v| v == min).count());
        if let Some(i) = d.selected_index {
            prop_assert_eq!(floats[i - 1], min);
        }
        let again = decide(&to_preds(&floats), &Threshold::Finite(gamma), &p, seed).unwrap();
        prop_assert_eq!(d, again);
    }

    #[test]
    fn float_index_agrees_with_rational(n in 1u64..2000, num in 1u64..=1000) {
        let kappa = Ratio::new(num, 1000);
        let exact = order_statistic_index_rational(n, kappa).unwrap();
        let float = order_statistic_index(n as usize, num as f64 / 1000.0).unwrap();
        prop_assert_eq!(exact, float);
    }

    #[test]
    fn calibration_matches_brute_force_infimum(
        scores in prop::collection::vec(1u32..=100, 1..40),
        num in 1u64..=100,
    ) {
        let scores: Vec<f64> = scores.iter().map(|&s| s as f64 / 100.0).collect();
        let kappa = num as f64 / 100.0;
        let model = calibrate(&scores, kappa).unwrap();
        let m = order_statistic_index_rational(scores.len() as u64, Ratio::new(num, 100)).unwrap();
        prop_assert_eq!(model.order_index, m);
        match brute_force_threshold(&scores, m) {
            Some(g) if m as usize <= scores.len() => prop_assert_eq!(model.threshold, Threshold::Finite(g)),
            _ => prop_assert_eq!(model.threshold, Threshold::AlwaysAbstain),
        }
    }

    #[test]
    fn calibration_monotone_in_kappa(
        scores in prop::collection::vec(0.001f64..=1.0, 1..50),
        k1 in 0.001f64..1.0,
        k2 in 0.001f64..1.0,
    ) {
        let (lo, hi) = if k1 < k2 { (k1, k2) } else { (k2, k1) };
        let g_lo = calibrate(&scores, lo).unwrap().threshold.as_extended();
        let g_hi = calibrate(&scores, hi).unwrap().threshold.as_extended();
        prop_assert!(g_lo >= g_hi);
    }

    #[test]
    fn threshold_constant_within_ceiling_cell(
        scores in prop::collection::vec(0.001f64..=1.0, 5..60),
        kappa in 0.01f64..0.99,
    ) {
        let n = scores.len();
        let x = (n as f64 + 1.0) * (1.0 - kappa);
        let frac = x - x.floor();
        prop_assume!(frac > 0.05 && frac < 0.95);
        // shift kappa by a quarter of the remaining distance to the cell edge
        let delta = 0.25 * frac.min(1.0 - frac) / (n as f64 + 1.0);
        let a = calibrate(&scores, kappa).unwrap();
        let b = calibrate(&scores, kappa + delta).unwrap();
        prop_assert_eq!(a.order_index, b.order_index);
        prop_assert_eq!(a.threshold, b.threshold);
    }
}
