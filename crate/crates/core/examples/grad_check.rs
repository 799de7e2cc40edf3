//! Checks reverse-mode gradients of a small network against finite differences.

use rand::Rng as _;
use stenograph::autodiff::grad_check;
use stenograph::model::{ModelParams, Net1DConfig};
use stenograph::rng::keyed;
use stenograph::tensor::Tensor;
use stenograph::train::{sum_vars, task_loss_vars, weighted_terms};

fn main() -> stenograph::Result<()> {
    let cfg = Net1DConfig {
        input_len: 64,
        stem_channels: 3,
        stem_stride: 2,
        n_blocks: 2,
        kernel_size: 5,
        seed: 1,
        ..Net1DConfig::default()
    };
    let model = ModelParams::init(&cfg)?;
    let mut rng = keyed(1, &[0]);
    let input = Tensor::new(
        vec![2, 12, cfg.input_len],
        (0..2 * 12 * cfg.input_len)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )?;
    let targets = [[1.0, 0.0, 0.0, 1.0], [0.0, 0.0, 1.0, 0.0]];
    let n = model.tensors.len();
    let mut params = model.tensors.clone();
    params.push(Tensor::new(vec![1, 4], vec![0.1, -0.2, 0.0, 0.3])?);

    let report = grad_check(
        &params,
        |tape, vars| {
            let x = tape.constant(input.clone());
            let logits = model.logits(tape, &vars[..n], x)?;
            let losses = task_loss_vars(tape, logits, &targets)?;
            let terms = weighted_terms(tape, &losses, Some(vars[n]))?;
            sum_vars(tape, &terms)
        },
        1e-4,
    )?;
    let layout = cfg.param_layout();
    for p in &report.params {
        let name = layout
            .get(p.param_index)
            .map_or("task.log_var", |(name, _)| name.as_str());
        println!(
            "{name:<24} {:>5} elements  max rel error {:.2e}",
            p.checked_elements, p.max_rel_error
        );
    }
    println!(
        "passed: {} ({} kink elements skipped)",
        report.passed, report.kink_elements
    );
    Ok(())
}
