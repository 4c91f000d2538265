//! Store class prototypes, walk the interpolation schedule across
//! tasks, and generate a pseudo-feature batch for rehearsal.
//!
//!     cargo run --example pseudo_features

use ceat::prototypes::{
    compute_prototypes, generate_pseudo_batch, sample_eta, zeta_for_task, PrototypeStore,
};
use ceat::tensor::Tensor;
use rand::Rng;

fn main() -> ceat::Result<()> {
    let mut rng = ceat::rng::stream(21, 0, "pseudo-demo");
    let d = 8;

    // fake "features" for two old classes, clustered around distinct means
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for class in 0..2usize {
        for _ in 0..10 {
            let center = if class == 0 { 1.0 } else { -1.0 };
            rows.push((0..d).map(|_| center + rng.random_range(-0.1..0.1)).collect::<Vec<f64>>());
            labels.push(class);
        }
    }
    let feats = Tensor::from_rows(&rows)?;
    let protos = compute_prototypes(&feats, &labels, &[0, 1], 0)?;
    let mut store = PrototypeStore::new();
    store.extend(protos)?;
    for p in store.all() {
        println!(
            "prototype class {} (task {}): first coords {:?}",
            p.class_id,
            p.task_of_origin,
            &p.vector.data()[..3]
        );
    }

    // the interpolation reach grows from 0.5 to 0.7 across the run
    let total = 5;
    for t in 1..=total {
        let zeta = zeta_for_task(t, total)?;
        let mut acc = 0.0;
        let draws = 10_000;
        for _ in 0..draws {
            acc += sample_eta(&mut rng, zeta)?;
        }
        println!("task {t}: zeta = {zeta:.3}, mean eta over {draws} draws = {:.3}", acc / draws as f64);
    }

    // a current batch near the origin pulls pseudo features toward it
    let batch = Tensor::from_rows(
        &(0..6)
            .map(|_| (0..d).map(|_| rng.random_range(-0.2..0.2)).collect::<Vec<f64>>())
            .collect::<Vec<_>>(),
    )?;
    let batch_labels = [2usize, 2, 3, 3, 2, 3];
    let (pseudo, pseudo_labels) = generate_pseudo_batch(&store, &batch, &batch_labels, 0.5, &mut rng)?;
    println!("pseudo batch: {} rows, labels {:?}", pseudo.rows(), pseudo_labels);
    for i in 0..pseudo.rows() {
        println!("  row {i} -> class {}, first coords {:?}", pseudo_labels[i], &pseudo.row_slice(i)[..3]);
    }
    Ok(())
}
