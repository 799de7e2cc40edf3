//! Augmentation intensity over training and what each epoch does to a record.

use stenograph::augment::{augment, AugConfig, AugSchedule};
use stenograph::rng::keyed;
use stenograph::synth::{synth_ecg, SynthEcgParams};

fn main() -> stenograph::Result<()> {
    let record = synth_ecg(&SynthEcgParams::default(), 1)?.record;
    let config = AugConfig::default();
    let epochs = 10;
    println!("epoch  alpha  rms change  occluded samples/lead");
    for epoch in 0..=epochs {
        let alpha = AugSchedule::new(epoch, epochs)?.alpha(config.alpha_floor);
        let out = augment(
            &record,
            epoch,
            epochs,
            &config,
            &mut keyed(1, &[epoch as u64]),
        )?;
        let diff = record
            .signal()
            .iter()
            .zip(out.signal())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
        let rms = (diff / record.signal().len() as f64).sqrt();
        let zeroed = out
            .lead(0)
            .iter()
            .zip(record.lead(0))
            .filter(|(&b, &a)| b == 0.0 && a != 0.0)
            .count();
        println!("{epoch:>5}  {alpha:.3}  {rms:>10.4}  {zeroed:>6}");
    }
    Ok(())
}
