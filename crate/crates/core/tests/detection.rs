use stenograph::explain::detect_r_peaks;
use stenograph::synth::{synth_ecg, SynthEcgParams};

/// Greedy one-to-one matching within `tol` samples; returns the match count.
fn matched(found: &[usize], truth: &[usize], tol: usize) -> usize {
    let mut used = vec![false; found.len()];
    let mut hits = 0;
    for &t in truth {
        let best = found
            .iter()
            .enumerate()
            .filter(|(j, f)| !used[*j] && f.abs_diff(t) <= tol)
            .min_by_key(|(_, f)| f.abs_diff(t));
        if let Some((j, _)) = best {
            used[j] = true;
            hits += 1;
        }
    }
    hits
}

fn record(seed: u64, noise_mv: f64) -> SynthEcgParams {
    SynthEcgParams {
        heart_rate_bpm: 45.0 + (seed % 12) as f64 * 10.0,
        fs: if seed.is_multiple_of(3) { 250.0 } else { 500.0 },
        noise_mv,
        ..SynthEcgParams::default()
    }
}

#[test]
fn clean_records_are_detected_exactly() {
    for seed in 0..40 {
        let p = record(seed, 0.0);
        let ecg = synth_ecg(&p, seed).unwrap();
        let found = detect_r_peaks(&ecg.record).unwrap();
        let truth = ecg.r_peaks();
        let tol = (0.030 * p.fs).floor() as usize;
        let hits = matched(&found, &truth, tol);
        assert_eq!(
            hits,
            truth.len(),
            "seed {seed}: recall {hits}/{}",
            truth.len()
        );
        assert_eq!(
            hits,
            found.len(),
            "seed {seed}: precision {hits}/{}",
            found.len()
        );
    }
}

#[test]
fn noisy_records_keep_high_recall() {
    let (mut hits, mut total) = (0, 0);
    for seed in 0..100 {
        let p = record(seed, 0.1);
        let ecg = synth_ecg(&p, 1000 + seed).unwrap();
        let found = detect_r_peaks(&ecg.record).unwrap();
        let truth = ecg.r_peaks();
        hits += matched(&found, &truth, (0.030 * p.fs).floor() as usize);
        total += truth.len();
    }
    let recall = hits as f64 / total as f64;
    assert!(recall >= 0.95, "recall {recall}");
}

/// Beats whose R peak sits in the first or last few samples used to vanish
/// into the filter start-up transient.
#[test]
fn beats_at_the_record_edges_are_found() {
    let mut edge_beats = 0;
    for seed in 0..300u64 {
        let fs = [100.0, 250.0, 500.0][(seed % 3) as usize];
        let p = SynthEcgParams {
            heart_rate_bpm: 30.0 + (seed as f64 * 1.37) % 170.0,
            fs,
            ..SynthEcgParams::default()
        };
        let ecg = synth_ecg(&p, seed).unwrap();
        let n = ecg.record.n_samples();
        let truth = ecg.r_peaks();
        let edge = (0.040 * fs) as usize;
        edge_beats += truth.iter().filter(|&&t| t < edge || t + edge >= n).count();
        let found = detect_r_peaks(&ecg.record).unwrap();
        let hits = matched(&found, &truth, (0.030 * fs).floor() as usize);
        assert_eq!(
            (hits, hits),
            (truth.len(), found.len()),
            "seed {seed} at {fs} Hz"
        );
    }
    assert!(edge_beats >= 5, "only {edge_beats} edge beats exercised");
}
