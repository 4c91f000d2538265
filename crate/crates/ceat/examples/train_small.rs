//! Run the whole incremental protocol on a small synthetic problem and
//! print the accuracy matrix next to the fine-tuning baseline.
//!
//!     cargo run --example train_small

use ceat::config::RunConfig;
use ceat::trainer;

fn main() -> ceat::Result<()> {
    let out = std::env::temp_dir().join("ceat_train_small_example");
    let cfg = RunConfig {
        synthetic_classes: 6,
        synthetic_train_per_class: 40,
        synthetic_test_per_class: 20,
        image_size: 8,
        channels: 1,
        base_classes: 2,
        classes_per_task: 2,
        patch_size: 4,
        model_dim: 32,
        heads: 2,
        blocks: 3,
        mlp_ratio: 2,
        incremental_from: 1,
        epochs_base: 10,
        epochs_incremental: 8,
        batch_size: 16,
        seed: 5,
        output_dir: out.to_string_lossy().into_owned(),
        ..RunConfig::default()
    };

    println!("training 3 tasks of 2 classes each ...");
    let report = trainer::run(&cfg)?;

    println!("\naccuracy after each task (rows), on each past task (columns):");
    for (t, row) in report.matrix.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|a| format!("{a:.3}")).collect();
        println!("  task {t}: [{}]", cells.join(", "));
    }
    println!("average incremental accuracy: {:.4}", report.average_incremental_accuracy);
    println!("average forgetting:           {:.4}", report.average_forgetting);
    if let Some(b) = &report.baseline {
        println!("baseline incremental accuracy: {:.4}", b.average_incremental_accuracy);
        println!("baseline forgetting:           {:.4}", b.average_forgetting);
    }
    for rec in &report.tasks {
        if let Some(r) = rec.absorption_residual {
            println!("task {}: absorption residual {r:.2e}", rec.task);
        }
    }
    println!("\nartifacts in {}", out.display());
    Ok(())
}
