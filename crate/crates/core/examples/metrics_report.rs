//! Evaluation report and plots for scores that track the true grades.

use rand::Rng as _;
use stenograph::cohort::{Subgroup, Vessel};
use stenograph::plots::{grade_boxes_svg, roc_svg};
use stenograph::report::{evaluate_predictions, EvalOptions};
use stenograph::rng::keyed;
use stenograph::synth::{synth_cohort, CohortParams};

fn main() -> stenograph::Result<()> {
    let params = CohortParams {
        n_patients: 300,
        fs: 100.0,
        duration_s: 2.0,
        ..CohortParams::default()
    };
    let cohort = synth_cohort(&params, 5)?;
    let mut rng = keyed(5, &[0]);
    // a noisy stand-in for a model: probability rises with the grade
    let probs: Vec<[f64; 4]> = cohort
        .records()
        .iter()
        .map(|r| {
            r.labels.grades().map(|g| {
                (0.1 + 0.2 * g.code() as f64 + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0)
            })
        })
        .collect();
    let opts = EvalOptions {
        n_boot: 500,
        ..EvalOptions::default()
    };
    let report = evaluate_predictions(
        &cohort,
        &probs,
        &[Subgroup::NormalEcg, Subgroup::Age65Plus],
        &opts,
    )?;
    for g in &report.groups {
        println!(
            "{} ({} records), macro-AUC {:.3?}",
            g.label, g.n_records, g.macro_auc
        );
        for v in &g.vessels {
            match (v.roc.value(), v.spearman.value()) {
                (Some(roc), Some(sp)) => println!(
                    "  {:<4} AUC {:.3} [{:.3}, {:.3}]  rho {:.3} (p {:.1e})",
                    v.vessel.name(),
                    roc.auc,
                    roc.ci.0,
                    roc.ci.1,
                    sp.rho,
                    sp.p_value
                ),
                _ => println!("  {:<4} undefined", v.vessel.name()),
            }
        }
    }
    let dir = std::env::temp_dir();
    std::fs::write(
        dir.join("stenograph-roc-lad.svg"),
        roc_svg(report.overall(), Vessel::Lad)?,
    )
    .map_err(|e| stenograph::Error::io(&dir, e))?;
    std::fs::write(
        dir.join("stenograph-grades.svg"),
        grade_boxes_svg(report.overall())?,
    )
    .map_err(|e| stenograph::Error::io(&dir, e))?;
    println!("plots written to {}", dir.display());
    Ok(())
}
