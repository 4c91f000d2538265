//! Evaluate every training loss term on one small hand-built batch and
//! print the task-dependent weights that combine them.
//!
//!     cargo run --example losses_tour

use ceat::losses::{self, LossWeights};
use ceat::tape::Tape;
use ceat::tensor::Tensor;
use rand::Rng;

fn main() -> ceat::Result<()> {
    let mut rng = ceat::rng::stream(3, 0, "losses-demo");
    let n = 6;
    let d = 16;
    let old_classes = 4;
    let classes = 6;

    let feats = Tensor::from_vec(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())?
        .with_grad();
    let logits =
        Tensor::from_vec(vec![n, classes], (0..n * classes).map(|_| rng.random_range(-2.0..2.0)).collect())?
            .with_grad();
    let old_feats =
        Tensor::from_vec(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let old_logits = Tensor::from_vec(
        vec![n, old_classes],
        (0..n * old_classes).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )?;
    let protos =
        Tensor::from_vec(vec![old_classes, d], (0..old_classes * d).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let labels = [4usize, 5, 4, 5, 4, 5];
    let proto_labels = [0usize, 1, 2, 3];

    // two new classes on top of four old ones
    let w = LossWeights::for_task(classes, classes - old_classes, 0.1)?;
    println!("alpha = {}  mu = {}  delta = {}  tau = {}", w.alpha, w.mu, w.delta, w.tau);

    let mut tape: Tape<f64> = Tape::new();
    let f = tape.leaf(&feats)?;
    let z = tape.leaf(&logits)?;

    let bce = losses::classification_loss(&mut tape, z, &labels)?;
    let (ld, fd) = losses::kd_losses(&mut tape, f, z, &old_feats, &old_logits, old_classes, 2.0)?;
    let pseudo_logits = tape.slice_cols(z, 0, old_classes)?;
    let ipf = losses::ipf_loss(&mut tape, Some((pseudo_logits, &[0, 1, 2, 3, 0, 1])), old_classes)?;
    let pcl = losses::pcl(&mut tape, f, &labels, &protos, &proto_labels, w.tau, true, true)?;
    let total = losses::total_loss(&mut tape, bce, Some((ld, fd)), Some(ipf), Some(pcl), &w)?;

    for (name, var) in [
        ("classification", bce),
        ("logit distillation", ld),
        ("feature distillation", fd),
        ("pseudo-feature classification", ipf),
        ("prototype contrastive", pcl),
        ("total", total),
    ] {
        println!("{name:>30}: {:.6}", tape.value(var).item());
    }

    // the combination rule, reproduced by hand
    let by_hand = tape.value(bce).item()
        + w.alpha * (tape.value(ld).item() + tape.value(fd).item())
        + w.mu * tape.value(ipf).item()
        + w.delta * tape.value(pcl).item();
    assert!((by_hand - tape.value(total).item()).abs() < 1e-12);

    let grads = tape.backward(total)?;
    println!(
        "gradient reaches features ({} elements) and logits ({} elements)",
        grads.get(f).map_or(0, |g| g.numel()),
        grads.get(z).map_or(0, |g| g.numel())
    );
    Ok(())
}
