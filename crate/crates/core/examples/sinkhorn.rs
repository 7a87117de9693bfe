//! Entropic OT between two small clouds versus the exact assignment cost.

use pulaski::ot::{ot_eps, squared_diameter, transport_plan, DiscreteMeasure, SinkhornConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let a = DiscreteMeasure::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.2], vec![0.3, 0.9]])?;
    let b = DiscreteMeasure::from_rows(&[vec![2.1, 0.1], vec![1.6, 1.0], vec![2.4, 0.7]])?;
    let cfg = SinkhornConfig { epsilon: 1e-3 * squared_diameter(&[&a, &b]), ..SinkhornConfig::default() };

    let value = ot_eps(&a, &b, &cfg)?;
    let plan = transport_plan(&a, &b, &cfg)?;

    let cost = |i: usize, j: usize| -> f64 {
        a.point(i).iter().zip(b.point(j)).map(|(x, y)| 0.5 * (x - y) * (x - y)).sum()
    };
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let exact = perms
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| cost(i, j)).sum::<f64>() / 3.0)
        .fold(f64::INFINITY, f64::min);

    println!("OT_eps = {value:.5}, exact optimum = {exact:.5}");
    for i in 0..3 {
        println!("plan row {i}: {:.3} {:.3} {:.3}", plan.get(i, 0), plan.get(i, 1), plan.get(i, 2));
    }
    Ok(())
}
