//! Reverse-mode gradients on a small conv + sigmoid graph, checked against
//! central differences.

use pulaski::engine::{grad_check, Graph, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let x = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let w = Tensor::new(vec![2, 1, 3, 3], (0..18).map(|i| (i as f64 * 0.11).cos() * 0.3).collect())?;

    let g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.param(w.clone());
    let y = g.sigmoid(g.conv(xv, wv, None)?)?;
    let loss = g.mean(g.mul(y, y)?)?;
    let grads = g.backward(loss)?;
    println!("loss = {:.6}", g.item(loss));
    println!("dL/dw[0..3] = {:?}", &grads.get(wv).data()[..3]);

    let err = grad_check(
        |g, w| {
            let y = g.sigmoid(g.conv(g.constant(x.clone()), w, None)?)?;
            g.mean(g.mul(y, y)?)
        },
        &w,
        1e-5,
    )?;
    println!("max relative error vs finite differences: {err:.2e}");
    Ok(())
}
