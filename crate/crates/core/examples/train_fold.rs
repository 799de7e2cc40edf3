//! Trains one cross-validation fold on a small synthetic cohort.

use stenograph::model::{save_checkpoint, Net1DConfig};
use stenograph::split::stratified_group_kfold;
use stenograph::synth::{synth_cohort, CohortParams};
use stenograph::train::{train_fold, TrainConfig};

fn main() -> stenograph::Result<()> {
    let params = CohortParams {
        n_patients: 400,
        fs: 100.0,
        duration_s: 5.0,
        ..CohortParams::default()
    };
    let cohort = synth_cohort(&params, 11)?;
    let folds = stratified_group_kfold(&cohort, 5, 11)?;
    let net = Net1DConfig {
        input_len: cohort.records()[0].ecg.n_samples(),
        stem_channels: 8,
        stem_stride: 4,
        seed: 11,
        ..Net1DConfig::default()
    };
    let config = TrainConfig {
        epochs: 6,
        seed: 11,
        ..TrainConfig::default()
    };
    let out = train_fold(&cohort, &folds, 0, &config, &net)?;
    for r in &out.log {
        println!(
            "epoch {} lr {:.2e} alpha {:.2} loss {:.3?} sigma {:.2?} macro-AUC {:.3?}",
            r.epoch, r.lr, r.alpha, r.task_loss, r.sigma, r.macro_auc
        );
    }
    let path = std::env::temp_dir().join("stenograph-fold0.ckpt");
    save_checkpoint(&out.checkpoint, &path)?;
    println!(
        "kept epoch {}, saved {}",
        out.checkpoint.provenance.epoch,
        path.display()
    );
    Ok(())
}
