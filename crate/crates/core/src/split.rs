//! Patient-grouped, multi-label stratified k-fold assignment.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Vessel};
use crate::error::{Error, Result};
use crate::rng::{self, stream};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    /// patient_id -> fold index.
    pub assignments: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, patient_id: &str) -> Option<usize> {
        self.assignments.get(patient_id).copied()
    }

    pub fn patients_in(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    /// Record indices of `cohort` split into (train, validation) for `fold`.
    pub fn split_indices(&self, cohort: &Cohort, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if fold >= self.k {
            return Err(Error::InvalidArgument(format!(
                "fold {fold} out of range for k={}",
                self.k
            )));
        }
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (i, r) in cohort.records().iter().enumerate() {
            match self.fold_of(&r.ecg.patient_id) {
                Some(f) if f == fold => val.push(i),
                Some(_) => train.push(i),
                None => {
                    return Err(Error::Data(format!(
                        "patient {} has no fold assignment",
                        r.ecg.patient_id
                    )))
                }
            }
        }
        Ok((train, val))
    }

    /// Checks that every cohort patient is assigned to exactly one valid fold.
    pub fn validate(&self, cohort: &Cohort) -> Result<()> {
        for p in cohort.patients() {
            match self.fold_of(p) {
                Some(f) if f < self.k => {}
                Some(f) => return Err(Error::Data(format!("patient {p} in fold {f} >= k"))),
                None => return Err(Error::Data(format!("patient {p} unassigned"))),
            }
        }
        Ok(())
    }
}

struct Group {
    patient: String,
    records: usize,
    positives: [usize; 4],
}

/// Greedy iterative stratification over patient groups.
///
/// Each fold has a target size `n / k` and a target positive count
/// `positives_v / k` per vessel. Groups are visited by descending positive
/// count (ties in seeded random order) and each goes to the fold where it
/// least increases the summed squared relative deviation from those
/// targets; exact ties go to a seeded random choice. A group is forced
/// into an empty fold when the remaining groups are only just enough to
/// fill every fold.
pub fn stratified_group_kfold(cohort: &Cohort, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be >= 2, got {k}")));
    }
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<Group> = Vec::new();
    for r in cohort.records() {
        let gi = *index.entry(r.ecg.patient_id.as_str()).or_insert_with(|| {
            groups.push(Group {
                patient: r.ecg.patient_id.clone(),
                records: 0,
                positives: [0; 4],
            });
            groups.len() - 1
        });
        groups[gi].records += 1;
        for v in Vessel::ALL {
            if r.labels.severe(v) {
                groups[gi].positives[v.index()] += 1;
            }
        }
    }
    if groups.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} patients cannot fill {k} folds",
            groups.len()
        )));
    }

    let total: usize = groups.iter().map(|g| g.records).sum();
    let target_size = total as f64 / k as f64;
    let mut target_pos = [0.0; 4];
    for g in &groups {
        for v in 0..4 {
            target_pos[v] += g.positives[v] as f64;
        }
    }
    target_pos.iter_mut().for_each(|x| *x /= k as f64);

    let mut rng = rng::keyed(seed, &[stream::SPLIT]);
    groups.shuffle(&mut rng);
    groups.sort_by_key(|g| std::cmp::Reverse(g.positives.iter().sum::<usize>()));

    let mut fold_records = vec![0usize; k];
    let mut fold_pos = vec![[0usize; 4]; k];
    let mut assignments = BTreeMap::new();
    let n_groups = groups.len();
    let sq = |x: f64, target: f64| {
        let d = (x - target) / target;
        d * d
    };
    for (visited, g) in groups.iter().enumerate() {
        let remaining = n_groups - visited;
        let empty: Vec<usize> = (0..k).filter(|&f| fold_records[f] == 0).collect();
        let candidates: Vec<usize> = if !empty.is_empty() && empty.len() >= remaining {
            empty
        } else {
            (0..k).collect()
        };
        // increase of the fold's deviation if `g` joins it
        let delta = |f: usize| -> f64 {
            let mut d = sq((fold_records[f] + g.records) as f64, target_size)
                - sq(fold_records[f] as f64, target_size);
            for v in 0..4 {
                if target_pos[v] > 0.0 && g.positives[v] > 0 {
                    d += sq((fold_pos[f][v] + g.positives[v]) as f64, target_pos[v])
                        - sq(fold_pos[f][v] as f64, target_pos[v]);
                }
            }
            d
        };
        let best = candidates
            .iter()
            .map(|&f| delta(f))
            .fold(f64::INFINITY, f64::min);
        let tied: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&f| delta(f) <= best + 1e-12)
            .collect();
        let chosen = tied[rng.random_range(0..tied.len())];
        fold_records[chosen] += g.records;
        for v in 0..4 {
            fold_pos[chosen][v] += g.positives[v];
        }
        assignments.insert(g.patient.clone(), chosen);
    }
    Ok(FoldAssignment {
        k,
        seed,
        assignments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{CohortRecord, EcgRecord, Severity, VesselLabels, N_LEADS};
    use chrono::{TimeZone, Utc};

    fn cohort(patients: &[(usize, [bool; 4])]) -> Cohort {
        let mut recs = Vec::new();
        for (p, &(n, flags)) in patients.iter().enumerate() {
            for j in 0..n {
                let t = Utc.with_ymd_and_hms(2022, 1, 1, 0, 0, 0).unwrap();
                let ecg = EcgRecord::new(
                    format!("E{p}_{j}"),
                    format!("P{p}"),
                    100.0,
                    t,
                    vec![0.0; N_LEADS * 2],
                )
                .unwrap();
                let severity = flags.map(|s| {
                    if s {
                        Severity::Severe
                    } else {
                        Severity::Normal
                    }
                });
                recs.push(CohortRecord {
                    ecg,
                    labels: VesselLabels {
                        severity,
                        ccta_time: t + chrono::Duration::hours(1),
                    },
                    follow_up: None,
                });
            }
        }
        Cohort::new(recs).unwrap()
    }

    #[test]
    fn uniform_case_balances_sizes() {
        let c = cohort(&[(1, [false; 4]); 10]);
        let f = stratified_group_kfold(&c, 5, 3).unwrap();
        for fold in 0..5 {
            assert_eq!(f.patients_in(fold).len(), 2);
        }
    }

    #[test]
    fn patient_records_stay_together() {
        let mut spec = vec![(1, [false, false, true, false]); 9];
        spec.push((3, [true, false, false, false]));
        let c = cohort(&spec);
        let f = stratified_group_kfold(&c, 5, 11).unwrap();
        let fold = f.fold_of("P9").unwrap();
        let (_, val) = f.split_indices(&c, fold).unwrap();
        let in_val = val
            .iter()
            .filter(|&&i| c.records()[i].ecg.patient_id == "P9")
            .count();
        assert_eq!(in_val, 3);
    }

    #[test]
    fn too_few_patients() {
        let c = cohort(&[(2, [false; 4]), (1, [true; 4])]);
        assert!(stratified_group_kfold(&c, 3, 0).is_err());
        assert!(stratified_group_kfold(&c, 1, 0).is_err());
    }

    #[test]
    fn every_fold_nonempty_with_exactly_k_patients() {
        let c = cohort(&[
            (1, [true; 4]),
            (1, [true, false, false, false]),
            (1, [false; 4]),
        ]);
        let f = stratified_group_kfold(&c, 3, 5).unwrap();
        for fold in 0..3 {
            assert_eq!(f.patients_in(fold).len(), 1);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec: Vec<_> = (0..40)
            .map(|i| (1 + i % 3, [i % 4 == 0, i % 7 == 0, i % 5 == 0, i % 3 == 0]))
            .collect();
        let c = cohort(&spec);
        assert_eq!(
            stratified_group_kfold(&c, 5, 9).unwrap(),
            stratified_group_kfold(&c, 5, 9).unwrap()
        );
    }
}
