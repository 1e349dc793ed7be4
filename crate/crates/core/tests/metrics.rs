use fedpr::metrics::{accuracy, auc, eer, EvalMatrix, EvalResult};
use proptest::prelude::*;

/// Scores on a coarse grid so ties are common, with both classes present.
fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..=100).prop_flat_map(|n| {
        (prop::collection::vec(-10i32..=10, n), prop::collection::vec(0u8..=1, n)).prop_map(|(s, mut l)| {
            l[0] = 0;
            l[1] = 1;
            (s.into_iter().map(f64::from).collect(), l)
        })
    })
}

fn brute_accuracy(s: &[f64], l: &[u8], t: f64) -> f64 {
    let mut correct = 0;
    for i in 0..s.len() {
        let predicted = u8::from(s[i] >= t);
        if predicted == l[i] {
            correct += 1;
        }
    }
    correct as f64 / s.len() as f64
}

fn brute_auc(s: &[f64], l: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if l[i] == 1 && l[j] == 0 {
                pairs += 1.0;
                if s[i] > s[j] {
                    wins += 1.0;
                } else if s[i] == s[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Operating points by direct counting at each candidate threshold, then the
/// first sign change of `FPR − FNR`, linearly interpolated.
fn brute_eer(s: &[f64], l: &[u8]) -> f64 {
    let mut thresholds: Vec<f64> = s.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.insert(0, f64::NEG_INFINITY);
    thresholds.push(f64::INFINITY);
    let pos = l.iter().filter(|&&x| x == 1).count() as f64;
    let neg = l.len() as f64 - pos;
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let fp = (0..s.len()).filter(|&i| l[i] == 0 && s[i] >= t).count() as f64;
            let fn_ = (0..s.len()).filter(|&i| l[i] == 1 && s[i] < t).count() as f64;
            (fp / neg, fn_ / pos)
        })
        .collect();
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a.0 == a.1 {
            return a.0;
        }
        let (d1, d2) = (a.0 - a.1, b.0 - b.1);
        if d1 > 0.0 && d2 <= 0.0 {
            return a.0 + d1 / (d1 - d2) * (b.0 - a.0);
        }
    }
    panic!("no crossing");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn metrics_match_brute_force((s, l) in scored(), t in -11i32..=11) {
        let t = f64::from(t);
        prop_assert_eq!(accuracy(&s, &l, t).unwrap(), brute_accuracy(&s, &l, t));
        prop_assert!((auc(&s, &l).unwrap() - brute_auc(&s, &l)).abs() < 1e-12);
        prop_assert!((eer(&s, &l).unwrap() - brute_eer(&s, &l)).abs() < 1e-12);
    }

    #[test]
    fn auc_is_antisymmetric((s, l) in scored()) {
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        prop_assert!((auc(&s, &l).unwrap() + auc(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_ignores_monotone_rescaling((s, l) in scored()) {
        // exact in f64 for these integer scores
        let warped: Vec<f64> = s.iter().map(|x| x * x * x + 5.0 * x - 7.0).collect();
        prop_assert_eq!(auc(&s, &l).unwrap(), auc(&warped, &l).unwrap());
        prop_assert_eq!(eer(&s, &l).unwrap(), eer(&warped, &l).unwrap());
    }

    #[test]
    fn metrics_stay_in_the_unit_interval((s, l) in scored()) {
        for m in [accuracy(&s, &l, 0.0).unwrap(), auc(&s, &l).unwrap(), eer(&s, &l).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }
}

#[test]
fn single_class_auc_and_eer_are_degenerate() {
    assert!(matches!(auc(&[0.1, 0.9], &[1, 1]), Err(fedpr::Error::Degenerate(_))));
    assert!(matches!(eer(&[0.1, 0.9], &[0, 0]), Err(fedpr::Error::Degenerate(_))));
    assert_eq!(accuracy(&[0.1, 0.9], &[0, 0], 0.5).unwrap(), 0.5);
}

#[test]
fn matrix_csv_layout() {
    let cell = |a: f64| EvalResult {
        accuracy: a,
        auc: 0.5,
        eer: 0.5,
        n_samples: 4,
    };
    let m = EvalMatrix::new(2, vec![cell(0.9), cell(0.123456), cell(0.5), cell(1.0)]).unwrap();
    assert_eq!(m.accuracy_csv(), "train\\test,0,1\n0,0.9000,0.1235\n1,0.5000,1.0000\n");
    assert!(m.diagonal_dominant());
    let tied = EvalMatrix::new(2, vec![cell(0.5), cell(0.5), cell(0.1), cell(0.9)]).unwrap();
    assert!(!tied.diagonal_dominant());
}
