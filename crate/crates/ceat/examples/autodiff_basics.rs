//! Record a small computation on the tape, read gradients back, and
//! confirm them against central finite differences.
//!
//!     cargo run --example autodiff_basics

use ceat::gradcheck::{finite_diff_check, DEFAULT_FD_STEP};
use ceat::tape::Tape;
use ceat::tensor::Tensor;

fn main() -> ceat::Result<()> {
    // f(x, w) = mean(gelu(x @ w)), a one-layer toy network
    let x = Tensor::from_vec(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5])?.with_grad();
    let w = Tensor::from_vec(vec![3, 2], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6])?.with_grad();

    let mut tape: Tape<f64> = Tape::new();
    let xv = tape.leaf(&x)?;
    let wv = tape.leaf(&w)?;
    let h = tape.matmul(xv, wv)?;
    let act = tape.gelu(h)?;
    let loss = tape.mean_all(act)?;

    println!("loss = {:.6}", tape.value(loss).item());

    let grads = tape.backward(loss)?;
    let gx = grads.get(xv).expect("x is trainable");
    let gw = grads.get(wv).expect("w is trainable");
    println!("dloss/dx = {:?}", gx.data());
    println!("dloss/dw = {:?}", gw.data());

    // the same computation, replayed under perturbation of every element
    let err = finite_diff_check(&[x, w], DEFAULT_FD_STEP, |tape, vs| {
        let h = tape.matmul(vs[0], vs[1])?;
        let act = tape.gelu(h)?;
        tape.mean_all(act)
    })?;
    println!("max relative error vs finite differences: {err:.2e}");
    assert!(err < 1e-4);
    Ok(())
}
