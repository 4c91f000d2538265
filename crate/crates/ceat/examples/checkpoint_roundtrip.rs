//! Load a checkpoint, save it again, and compare the two files byte for
//! byte; then rebuild the model from it and score the test split.
//!
//!     cargo run --example checkpoint_roundtrip

use ceat::checkpoint::{decode_model, Checkpoint};
use ceat::config::RunConfig;
use ceat::trainer::{self, Schedule};

fn main() -> ceat::Result<()> {
    let out = std::env::temp_dir().join("ceat_checkpoint_example");
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
        seed: 17,
        output_dir: out.to_string_lossy().into_owned(),
        ..RunConfig::default()
    };
    trainer::run_until(&cfg, 2)?;

    let path = trainer::checkpoint_path(&cfg);
    let ckpt = Checkpoint::load(&path)?;
    println!(
        "checkpoint: {} tasks done, {} tensors, {} prototypes",
        ckpt.tasks_completed,
        ckpt.tensors.len(),
        ckpt.prototypes.len()
    );

    let copy = path.with_extension("copy.json");
    ckpt.save(&copy)?;
    let original_bytes = std::fs::read(&path)?;
    let copied_bytes = std::fs::read(&copy)?;
    assert_eq!(original_bytes, copied_bytes, "load -> save must be the identity");
    println!("load -> save reproduced all {} bytes", original_bytes.len());

    // every weight travels as an exact bit pattern, so the rebuilt model
    // scores exactly like the one that was saved
    let model = decode_model::<f32>(&ckpt.shape, &ckpt.head_sizes, &ckpt.tensors)?;
    let (_, test) = trainer::load_datasets(&cfg)?;
    let schedule = Schedule::split(test.num_classes, cfg.base_classes, cfg.classes_per_task, cfg.seed)?;
    let row = trainer::evaluate_through(&model, &test, &schedule, ckpt.tasks_completed - 1)?;
    println!("per-task accuracy from the rebuilt model: {row:?}");
    Ok(())
}
