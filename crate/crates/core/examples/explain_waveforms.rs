//! Mean aligned beats of severe-RCA records against the rest.

use stenograph::cohort::{Lead, Vessel};
use stenograph::explain::{group_waveforms, record_beats, st_separation, BeatMatrix};
use stenograph::plots::waveforms_svg;
use stenograph::survival::RiskGroup;
use stenograph::synth::{synth_cohort, CohortParams};

fn main() -> stenograph::Result<()> {
    let params = CohortParams {
        n_patients: 200,
        fs: 250.0,
        duration_s: 6.0,
        ..CohortParams::default()
    };
    let cohort = synth_cohort(&params, 2)?;
    let beats: Vec<BeatMatrix> = cohort
        .records()
        .iter()
        .map(|r| record_beats(&r.ecg))
        .collect::<Result<_, _>>()?;
    let groups: Vec<RiskGroup> = cohort
        .records()
        .iter()
        .map(|r| {
            if r.labels.severe(Vessel::Rca) {
                RiskGroup::High
            } else {
                RiskGroup::Low
            }
        })
        .collect();
    for lead in Lead::ALL {
        let s = st_separation(&beats, &groups, lead)?;
        println!(
            "{:>4}: ST mean high {:+.3} low {:+.3}, separation {:.1} SE",
            lead.name(),
            s.mean_high,
            s.mean_low,
            s.ratio
        );
    }
    let summary = group_waveforms(&beats, &groups)?;
    let path = std::env::temp_dir().join("stenograph-waveforms-rca.svg");
    std::fs::write(&path, waveforms_svg(&summary, Vessel::Rca)?)
        .map_err(|e| stenograph::Error::io(&path, e))?;
    println!("overlay written to {}", path.display());
    Ok(())
}
