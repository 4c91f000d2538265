//! Attach expansion branches to a frozen backbone, give them nonzero
//! weights, fold them back in, and show that the network computes the
//! same function before and after.
//!
//!     cargo run --example absorption_roundtrip

use ceat::absorb::{self, AbsorptionPlan};
use ceat::tensor::Tensor;
use ceat::vit::{IncrementalViT, ModelShape};
use rand::Rng;

fn main() -> ceat::Result<()> {
    let shape = ModelShape {
        image_size: 8,
        channels: 1,
        patch_size: 4,
        dim: 32,
        heads: 2,
        blocks: 3,
        mlp_ratio: 2,
        incremental_from: 1,
    };
    let mut model: IncrementalViT<f64> = IncrementalViT::new(shape.clone(), 7)?;
    model.expand_classifier(4, 7, 0)?;

    // a new 2-class task arrives: freeze, expand, pretend to train
    absorb::freeze_backbone(&mut model, 1)?;
    let sites = model.default_sites();
    let lambda = absorb::lambda_for(2)?;
    model.attach_exfusion(lambda, &sites)?;
    model.expand_classifier(2, 7, 1)?;
    println!("branches attached at {} sites, lambda = {lambda}", sites.len());

    let mut rng = ceat::rng::stream(7, 1, "demo-psi");
    for (name, p) in model.named_params_mut() {
        if name.starts_with("ex.") {
            for v in p.data_mut() {
                *v = rng.random_range(-0.05..0.05);
            }
        }
    }

    let expanded = model.clone();
    let before = model.backbone_param_count();
    absorb::absorb_all(&mut model, &AbsorptionPlan::new(1, 2, sites)?)?;
    let after = model.backbone_param_count();
    println!("backbone parameters: {before} before absorption, {after} after");
    assert_eq!(before, after, "absorption must not grow the backbone");

    let probe_data: Vec<f64> = (0..16 * shape.image_pixels())
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let probes = Tensor::from_vec(vec![16, shape.image_pixels()], probe_data)?;
    let residual = absorb::verify_equivalence(&expanded, &model, &probes)?;
    println!("max logit residual over 16 probes: {residual:.3e}");
    assert!(residual < 1e-10);
    Ok(())
}
