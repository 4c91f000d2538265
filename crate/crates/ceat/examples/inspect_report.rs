//! Recompute a run's headline metrics from its persisted accuracy
//! matrix and check them against the stored report.
//!
//!     cargo run --example inspect_report [run_dir]
//!
//! Without an argument a quick run is trained first.

use ceat::config::RunConfig;
use ceat::metrics;
use ceat::report::{self, RunReport};
use ceat::trainer;
use std::path::PathBuf;

fn main() -> ceat::Result<()> {
    let run_dir = match std::env::args().nth(1) {
        Some(dir) => PathBuf::from(dir),
        None => {
            let out = std::env::temp_dir().join("ceat_inspect_report_example");
            let cfg = RunConfig {
                synthetic_classes: 4,
                synthetic_train_per_class: 24,
                synthetic_test_per_class: 12,
                image_size: 8,
                channels: 1,
                base_classes: 2,
                classes_per_task: 1,
                patch_size: 4,
                model_dim: 16,
                heads: 2,
                blocks: 2,
                mlp_ratio: 2,
                incremental_from: 1,
                epochs_base: 4,
                epochs_incremental: 3,
                batch_size: 8,
                seed: 13,
                output_dir: out.to_string_lossy().into_owned(),
                ..RunConfig::default()
            };
            println!("no run directory given, training a small one first ...");
            trainer::run(&cfg)?;
            out
        }
    };

    let stored = RunReport::load(&run_dir.join("report.json"))?;
    let matrix = report::read_matrix_csv(&run_dir.join("matrix.csv"))?;
    println!("loaded {} tasks from {}", matrix.num_tasks(), run_dir.display());

    let aia = metrics::average_incremental_accuracy(&matrix, &stored.test_sizes)?;
    let af = metrics::average_forgetting(&matrix)?;
    println!("recomputed from CSV: incremental accuracy {aia:.6}, forgetting {af:.6}");
    println!(
        "stored in report:    incremental accuracy {:.6}, forgetting {:.6}",
        stored.average_incremental_accuracy, stored.average_forgetting
    );
    assert_eq!(aia.to_bits(), stored.average_incremental_accuracy.to_bits());
    assert_eq!(af.to_bits(), stored.average_forgetting.to_bits());
    println!("CSV and JSON agree bit for bit");

    for line in &stored.deviations {
        println!("note: {line}");
    }
    Ok(())
}
