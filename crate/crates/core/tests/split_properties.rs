use proptest::prelude::*;
use std::collections::HashSet;
use stenograph::cohort::{Cohort, Vessel};
use stenograph::split::stratified_group_kfold;
use stenograph::synth::{synth_cohort, CohortParams};

fn small_cohort(n_patients: usize, prevalence: [f64; 4], seed: u64) -> Cohort {
    let params = CohortParams {
        n_patients,
        prevalence,
        fs: 100.0,
        duration_s: 2.0,
        ..CohortParams::default()
    };
    synth_cohort(&params, seed).unwrap()
}

fn positive_fraction(cohort: &Cohort, idx: &[usize], v: Vessel) -> f64 {
    let pos = idx
        .iter()
        .filter(|&&i| cohort.records()[i].labels.severe(v))
        .count();
    pos as f64 / idx.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn folds_are_patient_disjoint_and_balanced(
        n in 200usize..320,
        k in 3usize..=6,
        p in prop::array::uniform4(0.0f64..0.35),
        seed in any::<u64>(),
    ) {
        let cohort = small_cohort(n, p, seed);
        let folds = stratified_group_kfold(&cohort, k, seed).unwrap();
        folds.validate(&cohort).unwrap();
        let all: Vec<usize> = (0..cohort.len()).collect();
        let mut seen = vec![0usize; cohort.len()];
        for fold in 0..k {
            let (train, val) = folds.split_indices(&cohort, fold).unwrap();
            prop_assert!(!val.is_empty());
            prop_assert_eq!(train.len() + val.len(), cohort.len());
            let train_patients: HashSet<&str> =
                train.iter().map(|&i| cohort.records()[i].ecg.patient_id.as_str()).collect();
            for &i in &val {
                prop_assert!(!train_patients.contains(cohort.records()[i].ecg.patient_id.as_str()));
                seen[i] += 1;
            }
            for v in Vessel::ALL {
                let global = positive_fraction(&cohort, &all, v);
                if global >= 0.05 {
                    let dev = (positive_fraction(&cohort, &val, v) - global).abs() / global;
                    prop_assert!(dev <= 0.5, "fold {} {:?}: deviation {}", fold, v, dev);
                }
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }
}

#[test]
fn same_seed_gives_same_assignment() {
    let cohort = small_cohort(220, [0.2, 0.02, 0.2, 0.2], 8);
    let a = stratified_group_kfold(&cohort, 5, 3).unwrap();
    let b = stratified_group_kfold(&cohort, 5, 3).unwrap();
    assert_eq!(a, b);
}
