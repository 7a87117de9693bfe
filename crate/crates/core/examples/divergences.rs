//! Debiased Sinkhorn and Hausdorff divergences with their point gradients,
//! used here to flow one cloud onto another.

use pulaski::ot::{hausdorff_divergence_with_grad, sinkhorn_divergence_with_grad, DiscreteMeasure, SinkhornConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let target = DiscreteMeasure::from_rows(&[vec![3.0, 1.0], vec![3.5, 2.0], vec![4.0, 1.2], vec![3.2, 1.8]])?;
    let pts = vec![0.0, 0.0, 0.5, 0.3, 0.2, 0.8, 0.9, 0.6];

    for (name, hausdorff) in [("sinkhorn", false), ("hausdorff", true)] {
        let mut x = pts.clone();
        for step in 0..=60 {
            let a = DiscreteMeasure::uniform(x.clone(), 2)?;
            let cfg = SinkhornConfig::for_measures(&a, &target, 0.05);
            let vg = if hausdorff {
                hausdorff_divergence_with_grad(&a, &target, &cfg)?
            } else {
                sinkhorn_divergence_with_grad(&a, &target, &cfg)?
            };
            if step % 20 == 0 {
                println!("{name:>9} step {step:>2}: divergence {:.5}", vg.value);
            }
            // Atom weights are 1/4, so the gradient is scaled back to a
            // per-atom displacement.
            for (p, g) in x.iter_mut().zip(&vg.grad_a) {
                *p -= 0.5 * 4.0 * g;
            }
        }
    }
    Ok(())
}
