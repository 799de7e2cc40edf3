//! Writes a small synthetic cohort to disk and reads it back.

use stenograph::dataset::{load_dataset, load_manifest, save_dataset};
use stenograph::synth::{synth_cohort, CohortParams};

fn main() -> stenograph::Result<()> {
    let params = CohortParams {
        n_patients: 50,
        fs: 100.0,
        duration_s: 5.0,
        ..CohortParams::default()
    };
    let cohort = synth_cohort(&params, 3)?;
    let dir = std::env::temp_dir().join("stenograph-dataset-example");
    let generator = serde_json::to_value(&params).ok();
    let manifest = save_dataset(&cohort, &dir, generator, Some(params.prevalence))?;
    println!(
        "wrote {} records of {} patients to {}",
        manifest.n_records,
        manifest.n_patients,
        dir.display()
    );
    println!("observed prevalence {:?}", manifest.prevalence_observed);

    let back = load_dataset(&dir)?;
    assert_eq!(back.digest(), cohort.digest());
    assert_eq!(load_manifest(&dir)?.digest, manifest.digest);
    println!("reloaded, digest {}", &manifest.digest[..16]);
    Ok(())
}
