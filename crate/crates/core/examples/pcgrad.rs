//! Gradient surgery on conflicting task gradients.

use stenograph::autodiff::GradientVector;
use stenograph::rng::keyed;
use stenograph::train::pcgrad_traced;

fn main() -> stenograph::Result<()> {
    let grads = vec![
        GradientVector::new(vec![1.0, 0.0, 0.5]),
        GradientVector::new(vec![-1.0, 1.0, 0.0]),
        GradientVector::new(vec![0.2, -0.8, 0.3]),
        GradientVector::new(vec![0.0, 0.0, 1.0]),
    ];
    for (i, a) in grads.iter().enumerate() {
        let dots: Vec<String> = grads.iter().map(|b| format!("{:+.2}", a.dot(b))).collect();
        println!("g{i} . g_j = [{}]", dots.join(", "));
    }
    let (total, trace) = pcgrad_traced(&grads, &mut keyed(0, &[1]))?;
    for p in &trace.projections {
        println!(
            "g{} projected off g{}: dot now {:+.1e}",
            p.task, p.against, p.adjusted_dot
        );
    }
    let mut plain = grads[0].clone();
    grads[1..].iter().for_each(|g| plain.add_assign(g));
    println!("plain sum {:?}", plain.as_slice());
    println!("surgery   {:?}", total.as_slice());
    Ok(())
}
