//! Branch lifecycle: freeze the backbone, train parallel branches, fold
//! them back into host weights without changing what the network computes.
//!
//! A branch site computes host(x) + lambda*(x psi), which is the same
//! affine map as x (W + lambda psi) + b, so folding is a weight update and
//! nothing else. The fold itself runs in f64 and casts back to storage
//! precision. Convolution hosts fold a 1x1 branch kernel by zero-padding
//! it to 3x3 around the center tap first.

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};
use crate::vit::{IncrementalViT, SABlock, Site};

/// Branch scale for a task introducing this many classes.
pub fn lambda_for(num_new_classes: usize) -> Result<f64> {
    if num_new_classes == 0 {
        return Err(Error::invalid("lambda_for", "zero new classes"));
    }
    Ok(num_new_classes as f64 / 10.0)
}

/// Mark every backbone parameter non-trainable. Only branches and
/// classifier heads receive gradients afterwards. The first task trains
/// the backbone itself, so freezing it is an error there.
pub fn freeze_backbone<T: Element>(model: &mut IncrementalViT<T>, task: usize) -> Result<()> {
    if task == 0 {
        return Err(Error::invalid("freeze_backbone", "the base task trains the backbone"));
    }
    model.set_backbone_trainable(false);
    Ok(())
}

/// W + lambda*psi, computed elementwise in f64.
pub fn absorb_linear<T: Element>(w_host: &Tensor<T>, psi: &Tensor<T>, lambda: f64) -> Result<Tensor<T>> {
    if w_host.shape() != psi.shape() {
        return Err(Error::shape(
            "absorb_linear",
            format!("{:?} vs {:?}", w_host.shape(), psi.shape()),
        ));
    }
    let data: Vec<T> = w_host
        .data()
        .iter()
        .zip(psi.data().iter())
        .map(|(w, p)| T::from_f64(w.to_f64() + lambda * p.to_f64()))
        .collect();
    let mut out = Tensor::from_vec(w_host.shape().to_vec(), data)?;
    out.set_requires_grad(w_host.requires_grad());
    Ok(out)
}

/// Fold a projection branch into a block's attention output projection.
/// Q, K, V weights are untouched.
pub fn absorb_mhsa<T: Element>(block: &mut SABlock<T>, psi_proj: &Tensor<T>, lambda: f64) -> Result<()> {
    block.wproj.w = absorb_linear(&block.wproj.w, psi_proj, lambda)?;
    Ok(())
}

/// Zero-pad a stack of 1x1 kernels to 3x3 with the tap at the center.
pub fn zero_pad_1x1_to_3x3<T: Element>(psi: &Tensor<T>) -> Result<Tensor<T>> {
    let s = psi.shape();
    if s.len() != 4 || s[2] != 1 || s[3] != 1 {
        return Err(Error::shape("zero_pad_1x1_to_3x3", format!("want [o,i,1,1], got {s:?}")));
    }
    let (o, i) = (s[0], s[1]);
    let mut out = Tensor::zeros(vec![o, i, 3, 3]);
    for oc in 0..o {
        for ic in 0..i {
            out.data_mut()[((oc * i + ic) * 3 + 1) * 3 + 1] = psi.data()[oc * i + ic];
        }
    }
    Ok(out)
}

/// Fold a 1x1 branch kernel stack into a 3x3 host kernel stack.
pub fn absorb_conv<T: Element>(w3: &Tensor<T>, psi1: &Tensor<T>, lambda: f64) -> Result<Tensor<T>> {
    let s = w3.shape();
    if s.len() != 4 || s[2] != 3 || s[3] != 3 {
        return Err(Error::shape("absorb_conv", format!("want [o,i,3,3], got {s:?}")));
    }
    let padded = zero_pad_1x1_to_3x3(psi1)?;
    if padded.shape()[0] != s[0] || padded.shape()[1] != s[1] {
        return Err(Error::shape(
            "absorb_conv",
            format!("channels {:?} vs {:?}", psi1.shape(), s),
        ));
    }
    absorb_linear(w3, &padded, lambda)
}

/// Plain single-image 2-D convolution, stride 1, symmetric zero padding.
/// `input` is [c,h,w], `kernel` is [o,c,kh,kw]; output is [o,h',w'].
pub fn conv2d<T: Element>(input: &Tensor<T>, kernel: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let is = input.shape();
    let ks = kernel.shape();
    if is.len() != 3 || ks.len() != 4 || is[0] != ks[1] {
        return Err(Error::shape("conv2d", format!("input {is:?}, kernel {ks:?}")));
    }
    let (c, h, w) = (is[0], is[1], is[2]);
    let (o, kh, kw) = (ks[0], ks[2], ks[3]);
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::shape("conv2d", "kernel larger than padded input"));
    }
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    let mut out = Tensor::zeros(vec![o, oh, ow]);
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for ic in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = oy + ky;
                            let ix = ox + kx;
                            if iy < pad || ix < pad {
                                continue;
                            }
                            let (iy, ix) = (iy - pad, ix - pad);
                            if iy >= h || ix >= w {
                                continue;
                            }
                            acc += input.data()[(ic * h + iy) * w + ix].to_f64()
                                * kernel.data()[((oc * c + ic) * kh + ky) * kw + kx].to_f64();
                        }
                    }
                }
                out.data_mut()[(oc * oh + oy) * ow + ox] = T::from_f64(acc);
            }
        }
    }
    Ok(out)
}

/// What to fold after a task finishes training.
#[derive(Debug, Clone)]
pub struct AbsorptionPlan {
    pub task: usize,
    pub lambda: f64,
    pub sites: Vec<Site>,
}

impl AbsorptionPlan {
    pub fn new(task: usize, num_new_classes: usize, sites: Vec<Site>) -> Result<Self> {
        Ok(AbsorptionPlan {
            task,
            lambda: lambda_for(num_new_classes)?,
            sites,
        })
    }
}

/// Fold every attached branch per the plan and drop the branch set. The
/// backbone parameter count is the same before expansion and after this.
pub fn absorb_all<T: Element>(model: &mut IncrementalViT<T>, plan: &AbsorptionPlan) -> Result<()> {
    let set = match model.take_exfusion() {
        None if plan.sites.is_empty() => return Ok(()),
        None => return Err(Error::invalid("absorb_all", "no branches attached")),
        Some(s) => s,
    };
    // compare at f32 granularity so a model cast up from f32 for
    // verification still matches its plan
    if set.lambda.to_f64() as f32 != plan.lambda as f32 {
        return Err(Error::invalid(
            "absorb_all",
            format!("plan lambda {} vs attached {}", plan.lambda, set.lambda),
        ));
    }
    let attached: Vec<Site> = set.branches.iter().map(|(s, _)| *s).collect();
    if attached != plan.sites {
        return Err(Error::invalid(
            "absorb_all",
            format!("plan sites {:?} vs attached {:?}", plan.sites, attached),
        ));
    }
    for (site, psi) in &set.branches {
        let host = model.host_weight_mut(*site)?;
        *host = absorb_linear(host, psi, plan.lambda)?;
    }
    Ok(())
}

/// Max absolute logit difference between two models over an image batch.
pub fn verify_equivalence<T: Element>(
    a: &IncrementalViT<T>,
    b: &IncrementalViT<T>,
    images: &Tensor<T>,
) -> Result<f64> {
    if a.num_classes() != b.num_classes() {
        return Err(Error::Model(format!(
            "class counts differ: {} vs {}",
            a.num_classes(),
            b.num_classes()
        )));
    }
    let mut ta = Tape::new();
    let la = a.forward(&mut ta, images)?.logits;
    let mut tb = Tape::new();
    let lb = b.forward(&mut tb, images)?.logits;
    ta.value(la).max_abs_diff(tb.value(lb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{ModelShape, SiteKind};
    use rand::Rng;

    #[test]
    fn lambda_matches_class_count_over_ten() {
        assert_eq!(lambda_for(10).unwrap(), 1.0);
        assert_eq!(lambda_for(5).unwrap(), 0.5);
        assert_eq!(lambda_for(3).unwrap(), 0.3);
        assert!(lambda_for(0).is_err());
    }

    #[test]
    fn absorb_linear_zero_branch_is_identity() {
        let w = Tensor::<f32>::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let psi = Tensor::zeros(vec![2, 2]);
        let out = absorb_linear(&w, &psi, 0.7).unwrap();
        assert!(out.bitwise_eq(&w));
    }

    #[test]
    fn absorb_linear_direct_arithmetic() {
        let w = Tensor::<f64>::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = absorb_linear(&w, &eye, 0.5).unwrap();
        assert_eq!(out.data(), &[1.5, 2.0, 3.0, 4.5]);
    }

    #[test]
    fn fused_weight_equals_parallel_branch_over_random_inputs() {
        let mut rng = crate::rng::stream(31, 0, "absorb-test");
        let d = 8;
        let rand_mat = |rng: &mut rand_chacha::ChaCha8Rng, r: usize, c: usize| -> Tensor<f32> {
            Tensor::from_vec(vec![r, c], (0..r * c).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap()
        };
        let w = rand_mat(&mut rng, d, d);
        let psi = rand_mat(&mut rng, d, d);
        let b = rand_mat(&mut rng, 1, d);
        let lambda = 0.3f64;
        let fused = absorb_linear(&w, &psi, lambda).unwrap();
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let x = rand_mat(&mut rng, 1, d);
            let mut tape = Tape::new();
            let xv = tape.leaf(&x).unwrap();
            let wv = tape.leaf(&w).unwrap();
            let pv = tape.leaf(&psi).unwrap();
            let bv = tape.leaf(&b).unwrap();
            let branch =
                crate::vit::linear_with_branch(&mut tape, xv, wv, bv, Some((pv, lambda as f32))).unwrap();
            let fv = tape.leaf(&fused).unwrap();
            let direct = crate::vit::linear_with_branch(&mut tape, xv, fv, bv, None).unwrap();
            worst = worst.max(tape.value(branch).max_abs_diff(tape.value(direct)).unwrap());
        }
        assert!(worst <= 1e-6, "max abs diff {worst}");
    }

    fn small_model(seed: u64) -> IncrementalViT<f32> {
        let shape = ModelShape {
            image_size: 8,
            channels: 1,
            patch_size: 4,
            dim: 16,
            heads: 2,
            blocks: 2,
            mlp_ratio: 2,
            incremental_from: 1,
        };
        let mut m = IncrementalViT::new(shape, seed).unwrap();
        m.expand_classifier(3, seed, 0).unwrap();
        m
    }

    fn rand_images(model: &IncrementalViT<f32>, batch: usize, seed: u64) -> Tensor<f32> {
        let mut rng = crate::rng::stream(seed, 0, "absorb-images");
        Tensor::from_vec(
            vec![batch, model.shape.image_pixels()],
            (0..batch * model.shape.image_pixels())
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn randomize_branches(model: &mut IncrementalViT<f32>, seed: u64) {
        let mut rng = crate::rng::stream(seed, 0, "absorb-psi");
        if let Some(set) = model.exfusion.as_mut() {
            for (_, psi) in &mut set.branches {
                for v in psi.data_mut() {
                    *v = rng.random_range(-0.1..0.1);
                }
            }
        }
    }

    #[test]
    fn mhsa_fold_leaves_qkv_untouched() {
        let mut model = small_model(3);
        let psi = {
            let mut rng = crate::rng::stream(4, 0, "psi");
            Tensor::<f32>::from_vec(vec![16, 16], (0..256).map(|_| rng.random_range(-0.2..0.2)).collect())
                .unwrap()
        };
        let before_q = model.blocks[1].wq.w.clone();
        let before_k = model.blocks[1].wk.w.clone();
        let before_v = model.blocks[1].wv.w.clone();
        absorb_mhsa(&mut model.blocks[1], &psi, 0.3).unwrap();
        assert!(model.blocks[1].wq.w.bitwise_eq(&before_q));
        assert!(model.blocks[1].wk.w.bitwise_eq(&before_k));
        assert!(model.blocks[1].wv.w.bitwise_eq(&before_v));
    }

    #[test]
    fn projection_only_fold_preserves_block_output() {
        let mut expanded = small_model(5);
        let site = Site { block: 1, kind: SiteKind::Proj };
        expanded.attach_exfusion(0.3, &[site]).unwrap();
        randomize_branches(&mut expanded, 6);

        let mut absorbed = expanded.clone();
        let set = absorbed.take_exfusion().unwrap();
        absorb_mhsa(&mut absorbed.blocks[1], &set.branches[0].1, 0.3).unwrap();

        let images = rand_images(&expanded, 20, 7);
        let diff = verify_equivalence(&expanded, &absorbed, &images).unwrap();
        assert!(diff <= 1e-6, "max abs diff {diff}");
    }

    #[test]
    fn conv_pad_places_tap_at_center() {
        let psi = Tensor::<f32>::from_vec(vec![1, 1, 1, 1], vec![2.5]).unwrap();
        let padded = zero_pad_1x1_to_3x3(&psi).unwrap();
        assert_eq!(padded.shape(), &[1, 1, 3, 3]);
        for (i, &v) in padded.data().iter().enumerate() {
            if i == 4 {
                assert_eq!(v, 2.5);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn conv_fold_with_zero_lambda_is_identity() {
        let mut rng = crate::rng::stream(8, 0, "conv");
        let w3 = Tensor::<f32>::from_vec(vec![2, 3, 3, 3], (0..54).map(|_| rng.random_range(-0.5..0.5)).collect())
            .unwrap();
        let psi = Tensor::from_vec(vec![2, 3, 1, 1], (0..6).map(|_| rng.random_range(-0.5..0.5)).collect())
            .unwrap();
        let out = absorb_conv(&w3, &psi, 0.0).unwrap();
        assert!(out.bitwise_eq(&w3));
    }

    #[test]
    fn conv_fold_matches_two_branch_sum() {
        let mut rng = crate::rng::stream(9, 0, "conv-eq");
        let (o, c, h, w) = (2, 3, 5, 5);
        let w3 = Tensor::<f32>::from_vec(
            vec![o, c, 3, 3],
            (0..o * c * 9).map(|_| rng.random_range(-0.5..0.5)).collect(),
        )
        .unwrap();
        let psi = Tensor::from_vec(vec![o, c, 1, 1], (0..o * c).map(|_| rng.random_range(-0.5..0.5)).collect())
            .unwrap();
        let lambda = 0.3f64;
        let fused = absorb_conv(&w3, &psi, lambda).unwrap();
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let x = Tensor::<f32>::from_vec(
                vec![c, h, w],
                (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let host = conv2d(&x, &w3, 1).unwrap();
            let branch = conv2d(&x, &psi, 0).unwrap();
            let direct = conv2d(&x, &fused, 1).unwrap();
            for i in 0..host.numel() {
                let two = host.data()[i].to_f64() + lambda * branch.data()[i].to_f64();
                worst = worst.max((two - direct.data()[i].to_f64()).abs());
            }
        }
        assert!(worst <= 1e-6, "max abs diff {worst}");
    }

    #[test]
    fn empty_plan_leaves_model_unchanged() {
        let mut model = small_model(10);
        let reference = model.clone();
        let plan = AbsorptionPlan { task: 1, lambda: 0.3, sites: vec![] };
        absorb_all(&mut model, &plan).unwrap();
        for ((_, a), (_, b)) in model.named_params().iter().zip(reference.named_params().iter()) {
            assert!(a.bitwise_eq(b));
        }
    }

    #[test]
    fn full_fold_keeps_param_count_and_logits() {
        let mut expanded = small_model(11);
        let before_count = expanded.backbone_param_count();
        let sites = expanded.default_sites();
        let plan = AbsorptionPlan::new(1, 3, sites.clone()).unwrap();
        expanded
            .attach_exfusion(plan.lambda as f32, &sites)
            .unwrap();
        randomize_branches(&mut expanded, 12);

        let mut absorbed = expanded.clone();
        absorb_all(&mut absorbed, &plan).unwrap();
        assert!(absorbed.exfusion.is_none());
        assert_eq!(absorbed.backbone_param_count(), before_count);

        let images = rand_images(&expanded, 100, 13);
        let diff = verify_equivalence(&expanded, &absorbed, &images).unwrap();
        assert!(diff <= 1e-5, "max abs diff {diff}");
    }

    #[test]
    fn double_precision_fold_is_much_tighter() {
        let mut expanded = small_model(14);
        let sites = expanded.default_sites();
        let plan = AbsorptionPlan::new(1, 3, sites.clone()).unwrap();
        expanded.attach_exfusion(plan.lambda as f32, &sites).unwrap();
        randomize_branches(&mut expanded, 15);
        let expanded = expanded.cast::<f64>();
        let mut absorbed = expanded.clone();
        absorb_all(&mut absorbed, &plan).unwrap();
        let images = rand_images(&small_model(14), 50, 16).cast::<f64>();
        let diff = verify_equivalence(&expanded, &absorbed, &images).unwrap();
        assert!(diff <= 1e-10, "max abs diff {diff}");
    }

    #[test]
    fn zero_branch_fold_matches_bare_backbone_exactly() {
        let mut model = small_model(17);
        let bare = model.clone();
        let sites = model.default_sites();
        let plan = AbsorptionPlan::new(1, 3, sites.clone()).unwrap();
        model.attach_exfusion(plan.lambda as f32, &sites).unwrap();
        let images = rand_images(&model, 10, 18);
        let diff = verify_equivalence(&model, &bare, &images).unwrap();
        assert_eq!(diff, 0.0);
        absorb_all(&mut model, &plan).unwrap();
        let diff = verify_equivalence(&model, &bare, &images).unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn absorb_then_reexpand_with_zero_branches_reproduces_logits() {
        let mut model = small_model(19);
        let sites = model.default_sites();
        let plan = AbsorptionPlan::new(1, 3, sites.clone()).unwrap();
        model.attach_exfusion(plan.lambda as f32, &sites).unwrap();
        randomize_branches(&mut model, 20);
        absorb_all(&mut model, &plan).unwrap();

        let images = rand_images(&model, 10, 21);
        let after_absorb = {
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &images).unwrap();
            tape.value(pass.logits).clone()
        };
        model.attach_exfusion(0.5, &sites).unwrap();
        let reexpanded = {
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &images).unwrap();
            tape.value(pass.logits).clone()
        };
        assert!(after_absorb.bitwise_eq(&reexpanded));
    }

    #[test]
    fn freeze_refuses_base_task() {
        let mut model = small_model(22);
        assert!(freeze_backbone(&mut model, 0).is_err());
        assert!(freeze_backbone(&mut model, 1).is_ok());
    }
}
