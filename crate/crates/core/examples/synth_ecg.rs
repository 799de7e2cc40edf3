//! Generates one record, plants an RCA lesion and shows which leads moved.

use stenograph::cohort::{Lead, StenosisGrade, Vessel};
use stenograph::explain::detect_r_peaks;
use stenograph::synth::{plant_lesion, synth_ecg, SynthEcgParams};

fn main() -> stenograph::Result<()> {
    let params = SynthEcgParams {
        heart_rate_bpm: 72.0,
        ..SynthEcgParams::default()
    };
    let clean = synth_ecg(&params, 7)?;
    let lesion = plant_lesion(&clean, Vessel::Rca, StenosisGrade::new(3)?, 7);

    let truth = clean.r_peaks();
    let found = detect_r_peaks(&clean.record)?;
    println!("{} beats planted, {} detected", truth.len(), found.len());

    // mean shift over the ST window (R+60 ms to R+140 ms) of every beat
    let fs = params.fs;
    let (from, to) = ((0.06 * fs) as usize, (0.14 * fs) as usize);
    let window = |r: usize| r + from..=r + to;
    for lead in Lead::ALL {
        let a = clean.record.lead(lead.index());
        let b = lesion.record.lead(lead.index());
        let (mut sum, mut n) = (0.0, 0);
        for &r in truth.iter().filter(|&&r| r + to < a.len()) {
            for i in window(r) {
                sum += b[i] - a[i];
                n += 1;
            }
        }
        println!("{:>4}: ST shift {:+.3} mV", lead.name(), sum / n as f64);
    }
    Ok(())
}
