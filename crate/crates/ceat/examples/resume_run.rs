//! Interrupt a run after its first tasks, resume it from the
//! checkpoint, and confirm the result matches an uninterrupted run
//! exactly.
//!
//!     cargo run --example resume_run

use ceat::config::RunConfig;
use ceat::trainer;

fn small_config(out: &std::path::Path, tag: &str) -> RunConfig {
    RunConfig {
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
        seed: 31,
        output_dir: out.join(tag).to_string_lossy().into_owned(),
        ..RunConfig::default()
    }
}

fn main() -> ceat::Result<()> {
    let out = std::env::temp_dir().join("ceat_resume_example");

    let uninterrupted = trainer::run(&small_config(&out, "full"))?;
    println!("uninterrupted run finished {} tasks", uninterrupted.tasks.len());

    let cfg = small_config(&out, "staged");
    let partial = trainer::run_until(&cfg, 2)?;
    println!("staged run stopped after {} tasks", partial.tasks.len());
    let resumed = trainer::resume(&cfg)?;
    println!("resumed to {} tasks", resumed.tasks.len());

    assert_eq!(resumed.matrix, uninterrupted.matrix, "resume must not change results");
    println!("final matrices are identical, to the last bit:");
    for (t, row) in resumed.matrix.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|a| format!("{a:.3}")).collect();
        println!("  task {t}: [{}]", cells.join(", "));
    }
    Ok(())
}
