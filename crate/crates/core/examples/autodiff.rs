//! Reverse-mode autodiff on the tape, checked against central differences.
//!
//! cargo run --example autodiff

use dinomm::tensor::grad_check;
use dinomm::{Tape, Tensor};

fn main() -> dinomm::Result<()> {
    // loss = mean(log_softmax(x W / 0.5))
    let x = Tensor::matrix(&[&[0.2, -1.0, 0.5], &[1.5, 0.3, -0.7]])?;
    let w = Tensor::matrix(&[&[0.1, 0.4], &[-0.3, 0.2], &[0.6, -0.5]])?;

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let wv = tape.constant(w.clone());
    let z = tape.matmul(xv, wv)?;
    let lp = tape.log_softmax(z, 0.5)?;
    let loss = tape.mean(lp)?;
    let grads = tape.backward(loss)?;
    println!("loss = {:.6}", tape.value(loss).item()?);
    println!("dloss/dx = {:?}", grads.get(xv).expect("x is a leaf").data());

    let err = grad_check(
        |t, x| {
            let w = t.constant(w.clone());
            let z = t.matmul(x, w)?;
            let lp = t.log_softmax(z, 0.5)?;
            t.mean(lp)
        },
        &x,
        1e-5,
    )?;
    println!("max relative error vs finite differences: {err:.2e}");
    Ok(())
}
