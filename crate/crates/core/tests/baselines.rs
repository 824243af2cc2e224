use cohort::baselines::{freeze, greedy_select, initial_policy_pi0, threshold_select, DEFAULT_GPA_THRESHOLD};
use cohort::outcome_model::{NigPrior, PosteriorState};
use cohort::policy::{LinearPolicy, Policy};
use cohort::types::{FeatureMatrix, OutcomeMatrix, OutcomeScale};
use cohort::Error;
use proptest::prelude::*;

fn raw(values: &[f64]) -> OutcomeMatrix {
    OutcomeMatrix::new(values.len() / 3, 3, values.to_vec(), OutcomeScale::Raw).unwrap()
}

fn gpa_rows() -> impl Strategy<Value = Vec<f64>> {
    (1usize..30).prop_flat_map(|n| proptest::collection::vec(0.0f64..4.0, n * 3))
}

proptest! {
    #[test]
    fn greedy_selects_exactly_m_of_the_best(values in gpa_rows(), frac in 0.0f64..=1.0) {
        let y = raw(&values);
        let n = y.rows();
        let m = (frac * n as f64).floor() as usize;
        let a = greedy_select(&y, m).unwrap();
        prop_assert_eq!(a.selected(), m);
        let totals = y.row_totals();
        let worst_in = a.selected_indices().iter().map(|&i| totals[i]).fold(f64::INFINITY, f64::min);
        let best_out = (0..n).filter(|&i| !a.get(i)).map(|i| totals[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m == 0 || m == n || worst_in >= best_out);
    }

    #[test]
    fn raising_the_threshold_never_admits_more(values in gpa_rows(), lo in 0.0f64..4.0, gap in 0.0f64..2.0) {
        let y = raw(&values);
        let loose = threshold_select(&y, lo).unwrap();
        let strict = threshold_select(&y, lo + gap).unwrap();
        for i in 0..y.rows() {
            prop_assert!(!strict.get(i) || loose.get(i));
        }
    }

    #[test]
    fn pi0_is_the_threshold_rule_on_predicted_means(
        rows in proptest::collection::vec(proptest::collection::vec(0.0f64..=1.0, 2), 1..20),
        shift in -1.0f64..3.0,
    ) {
        let prior = PosteriorState::prior(2, 3, NigPrior::default()).unwrap();
        // A few observations so the predicted means are not all zero.
        let fit = FeatureMatrix::from_rows(&[vec![0.1, 0.9], vec![0.8, 0.2], vec![0.5, 0.5]], vec![0, 1, 0], 2).unwrap();
        let obs = raw(&[3.0 + shift.min(1.0), 2.5, 3.2, 1.0, 1.5, 2.0, 2.2, 2.8, 2.4]);
        let model = prior.update(&fit, &obs).unwrap();
        let groups = vec![0; rows.len()];
        let x = FeatureMatrix::from_rows(&rows, groups, 2).unwrap();
        let a = initial_policy_pi0(&model, &x, DEFAULT_GPA_THRESHOLD).unwrap();
        let b = threshold_select(&model.predict_mean(&x).unwrap(), DEFAULT_GPA_THRESHOLD).unwrap();
        prop_assert_eq!(&a, &b);

        // Decisions follow the candidates when the pool is reordered.
        let rev: Vec<usize> = (0..rows.len()).rev().collect();
        let ar = initial_policy_pi0(&model, &x.select_rows(&rev), DEFAULT_GPA_THRESHOLD).unwrap();
        for (k, &i) in rev.iter().enumerate() {
            prop_assert_eq!(ar.get(k), a.get(i));
        }
    }
}

#[test]
fn greedy_rejects_more_than_available() {
    let y = raw(&[1.0, 2.0, 3.0]);
    assert!(matches!(greedy_select(&y, 2), Err(Error::SelectionTooLarge { requested: 2, available: 1 })));
}

#[test]
fn baselines_refuse_normalized_predictions() {
    let y = OutcomeMatrix::new(1, 3, vec![0.5; 3], OutcomeScale::Normalized).unwrap();
    assert!(threshold_select(&y, 2.5).is_err());
    assert!(greedy_select(&y, 1).is_err());
}

#[test]
fn frozen_policy_ignores_later_updates() {
    let mut live = Policy::Linear(LinearPolicy::from_theta(vec![1.0, -2.0, 0.5]).unwrap());
    let x = FeatureMatrix::from_rows(&[vec![0.2, 0.4], vec![0.9, 0.1]], vec![0, 1], 2).unwrap();
    let frozen = freeze(&live);
    let before = frozen.accept_prob(&x).unwrap();
    live.set_params(&[-3.0, 3.0, 0.0]).unwrap();
    assert_ne!(live.accept_prob(&x).unwrap(), before);
    assert_eq!(frozen.accept_prob(&x).unwrap(), before);
    let restored: cohort::baselines::FrozenPolicy = serde_json::from_str(&serde_json::to_string(&frozen).unwrap()).unwrap();
    assert_eq!(restored, frozen);
}
