//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default perturbation step for the 64-bit checker.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Relative-error floor so near-zero gradients compare sanely.
const REL_FLOOR: f64 = 1e-8;

/// Compare tape gradients of a scalar function against central finite
/// differences, returning the max over all trainable parameter elements of
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
///
/// `build` must replay the same computation for the same inputs; this is
/// checked by evaluating twice and requiring bitwise-identical losses.
/// Parameters with `requires_grad` unset are held as constants.
pub fn finite_diff_check<F>(params: &[Tensor<f64>], step: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::GradCheck(format!("bad step {step}")));
    }
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p)).collect::<Result<_>>()?;
        let loss = build(&mut tape, &vars)?;
        if !tape.value(loss).is_scalar() {
            return Err(Error::GradCheck(format!(
                "function must be scalar, got {:?}",
                tape.value(loss).shape()
            )));
        }
        Ok(tape.value(loss).item())
    };

    let base = eval(params)?;
    let again = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::GradCheck(format!(
            "function is not deterministic: {base} vs {again}"
        )));
    }

    // analytic gradients at the base point
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect::<Result<_>>()?;
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut max_rel = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        if !p.requires_grad() {
            continue;
        }
        for e in 0..p.numel() {
            let orig = p.data()[e];
            work[pi].data_mut()[e] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[e] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.get(vars[pi]).map_or(0.0, |g| g.data()[e]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Finite-difference pass over every loss term and their weighted sum,
/// on small fixed instances. Returns (name, max relative error) pairs.
pub fn check_loss_gradients(seed: u64, step: f64) -> Result<Vec<(String, f64)>> {
    use crate::losses;
    use rand::Rng;

    let mut rng = crate::rng::stream(seed, 0, "loss-gradcheck");
    let mut rand_mat = |r: usize, c: usize, lo: f64, hi: f64| -> Result<Tensor<f64>> {
        let data = (0..r * c).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_vec(vec![r, c], data)
    };

    let (n, d, classes, old) = (6usize, 8usize, 5usize, 3usize);
    let features = rand_mat(n, d, -1.0, 1.0)?.with_grad();
    let logits = rand_mat(n, classes, -2.0, 2.0)?.with_grad();
    let protos = rand_mat(4, d, -1.0, 1.0)?;
    // keep |new - old| features away from the L1 kink at zero
    let old_features = {
        let data: Vec<f64> = features
            .data()
            .iter()
            .map(|x| {
                let mag = rng.random_range(0.1..0.9);
                if rng.random::<bool>() { x + mag } else { x - mag }
            })
            .collect();
        Tensor::from_vec(vec![n, d], data)?
    };
    let old_logits = {
        let data = (0..n * old).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::from_vec(vec![n, old], data)?
    };
    let labels = vec![0usize, 1, 2, 3, 4, 0];
    let proto_labels = vec![0usize, 1, 2, 0];
    let pseudo_labels = vec![0usize, 1, 2, 0, 1, 2];
    let weights = losses::LossWeights::for_task(classes, classes - old, 0.1)?;

    let mut out = Vec::new();
    let push = |name: &str, err: Result<f64>, out: &mut Vec<(String, f64)>| -> Result<()> {
        out.push((name.to_string(), err?));
        Ok(())
    };
    fn scaled(t: &Tensor<f64>, by: f64) -> Tensor<f64> {
        let data = t.data().iter().map(|v| v * by).collect();
        Tensor::from_vec(t.shape().to_vec(), data).expect("same shape")
    }

    {
        let labels = labels.clone();
        push(
            "classification",
            finite_diff_check(&[logits.clone()], step, move |tape, vs| {
                losses::classification_loss(tape, vs[0], &labels)
            }),
            &mut out,
        )?;
    }
    for (name, normalize) in [("contrastive/normalized", true), ("contrastive/raw", false)] {
        let labels = labels.clone();
        let proto_labels = proto_labels.clone();
        // without row normalization the similarities are raw dot products
        // over tau; keep them O(1) so the symmetric difference through
        // exp() stays well conditioned
        let shrink = if normalize { 1.0 } else { 0.2 };
        let feats = scaled(&features, shrink).with_grad();
        let protos = scaled(&protos, shrink);
        push(
            name,
            finite_diff_check(&[feats], step, move |tape, vs| {
                losses::pcl(tape, vs[0], &labels, &protos, &proto_labels, 0.1, normalize, true)
            }),
            &mut out,
        )?;
    }
    {
        let old_features = old_features.clone();
        push(
            "feature_distill",
            finite_diff_check(&[features.clone()], step, move |tape, vs| {
                losses::feature_distill(tape, vs[0], &old_features)
            }),
            &mut out,
        )?;
    }
    {
        let old_logits = old_logits.clone();
        push(
            "logit_distill",
            finite_diff_check(&[logits.clone()], step, move |tape, vs| {
                losses::logit_distill(tape, vs[0], &old_logits, old, 2.0)
            }),
            &mut out,
        )?;
    }
    {
        let pseudo_labels = pseudo_labels.clone();
        push(
            "pseudo_classification",
            finite_diff_check(&[logits.clone()], step, move |tape, vs| {
                let narrowed = tape.slice_cols(vs[0], 0, old)?;
                losses::ipf_loss(tape, Some((narrowed, &pseudo_labels)), old)
            }),
            &mut out,
        )?;
    }
    {
        let params = [features.clone(), logits.clone()];
        push(
            "total",
            finite_diff_check(&params, step, move |tape, vs| {
                let bce = losses::classification_loss(tape, vs[1], &labels)?;
                let kd = losses::kd_losses(tape, vs[0], vs[1], &old_features, &old_logits, old, 2.0)?;
                let narrowed = tape.slice_cols(vs[1], 0, old)?;
                let ipf = losses::ipf_loss(tape, Some((narrowed, &pseudo_labels)), old)?;
                let pcl = losses::pcl(tape, vs[0], &labels, &protos, &proto_labels, weights.tau, true, true)?;
                losses::total_loss(tape, bce, Some(kd), Some(ipf), Some(pcl), &weights)
            }),
            &mut out,
        )?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor<f64> {
        let data = (0..r * c).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_vec(vec![r, c], data).unwrap().with_grad()
    }

    fn check<F>(params: &[Tensor<f64>], build: F) -> f64
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        finite_diff_check(params, DEFAULT_FD_STEP, build).unwrap()
    }

    #[test]
    fn quadratic_is_nearly_exact() {
        let x = Tensor::from_vec(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.1, -1.5])
            .unwrap()
            .with_grad();
        // the symmetric difference has no truncation error on a quadratic,
        // so a coarse step leaves only rounding noise
        let err = finite_diff_check(&[x], 1e-3, |tape, vs| {
            let sq = tape.mul(vs[0], vs[0])?;
            tape.sum_all(sq)
        })
        .unwrap();
        assert!(err < 1e-9, "quadratic rel err {err}");
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::cell::Cell;
        let flip = Cell::new(0.0f64);
        let x = Tensor::scalar(1.0).with_grad();
        let res = finite_diff_check(&[x], DEFAULT_FD_STEP, |tape, vs| {
            flip.set(flip.get() + 1.0);
            let shifted = tape.add_scalar(vs[0], flip.get())?;
            tape.sum_all(shifted)
        });
        assert!(matches!(res, Err(Error::GradCheck(_))));
    }

    #[test]
    fn frozen_params_are_skipped() {
        let x = Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap().with_grad();
        let frozen = Tensor::from_vec(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let err = check(&[x, frozen], |tape, vs| {
            let prod = tape.mul(vs[0], vs[1])?;
            tape.sum_all(prod)
        });
        assert!(err < 1e-9);
    }

    // one finite-difference pass per primitive with a backward rule,
    // randomized shapes up to 8x8 and several parameters

    #[test]
    fn fd_matmul_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let n = rng.random_range(1..5usize);
            let k = rng.random_range(1..9usize);
            let m = rng.random_range(1..9usize);
            let a = rand_tensor(&mut rng, n, k, -1.0, 1.0);
            let b = rand_tensor(&mut rng, k, m, -1.0, 1.0);
            let err = check(&[a, b], |tape, vs| {
                let bt = tape.transpose(vs[1])?;
                let btt = tape.transpose(bt)?;
                let prod = tape.matmul(vs[0], btt)?;
                tape.mean_all(prod)
            });
            assert!(err < 1e-4, "matmul rel err {err}");
        }
    }

    #[test]
    fn fd_elementwise_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = rand_tensor(&mut rng, 4, 8, -1.0, 1.0);
        let b = rand_tensor(&mut rng, 4, 8, -1.0, 1.0);
        let err = check(&[a, b], |tape, vs| {
            let sum = tape.add(vs[0], vs[1])?;
            let diff = tape.sub(sum, vs[1])?;
            let prod = tape.mul(diff, vs[1])?;
            let fused = tape.add_scaled(prod, vs[0], 0.37)?;
            tape.mean_all(fused)
        });
        assert!(err < 1e-4, "binary ops rel err {err}");
    }

    #[test]
    fn fd_scalar_and_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = rand_tensor(&mut rng, 5, 6, -1.0, 1.0);
        let row = rand_tensor(&mut rng, 1, 6, -1.0, 1.0);
        let col = rand_tensor(&mut rng, 5, 1, -1.0, 1.0);
        let err = check(&[a, row, col], |tape, vs| {
            let scaled = tape.scale(vs[0], -1.7)?;
            let shifted = tape.add_scalar(scaled, 0.3)?;
            let plus_row = tape.add_row(shifted, vs[1])?;
            let minus_col = tape.sub_col_broadcast(plus_row, vs[2])?;
            tape.mean_all(minus_col)
        });
        assert!(err < 1e-4, "broadcast ops rel err {err}");
    }

    #[test]
    fn fd_mul_const_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = rand_tensor(&mut rng, 4, 4, -1.0, 1.0);
        let mask_data: Vec<f64> = (0..16).map(|i| if i % 3 == 0 { 0.0 } else { 1.5 }).collect();
        let mask = Tensor::from_vec(vec![4, 4], mask_data).unwrap();
        let err = check(&[a], move |tape, vs| {
            let masked = tape.mul_const(vs[0], &mask)?;
            tape.sum_all(masked)
        });
        assert!(err < 1e-4, "mul_const rel err {err}");
    }

    #[test]
    fn fd_concat_and_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let a = rand_tensor(&mut rng, 3, 4, -1.0, 1.0);
        let b = rand_tensor(&mut rng, 2, 4, -1.0, 1.0);
        let c = rand_tensor(&mut rng, 5, 3, -1.0, 1.0);
        let err = check(&[a, b, c], |tape, vs| {
            let stacked = tape.concat_rows(&[vs[0], vs[1]])?;
            let wide = tape.concat_cols(&[stacked, vs[2]])?;
            let rows = tape.slice_rows(wide, 1, 3)?;
            let cols = tape.slice_cols(rows, 2, 4)?;
            let picked = tape.gather_rows(cols, &[0, 2, 2, 1])?;
            tape.mean_all(picked)
        });
        assert!(err < 1e-4, "concat/slice rel err {err}");
    }

    #[test]
    fn fd_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let a = rand_tensor(&mut rng, 4, 7, -1.0, 1.0);
        let err = check(&[a], |tape, vs| {
            let cols = tape.sum_cols(vs[0])?;
            let c = tape.sum_all(cols)?;
            let rows = tape.mean_rows(vs[0])?;
            let r = tape.mean_all(rows)?;
            tape.add(c, r)
        });
        assert!(err < 1e-4, "reductions rel err {err}");
    }

    #[test]
    fn fd_l1_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = rand_tensor(&mut rng, 4, 5, -1.0, 1.0);
        // keep |a - b| away from the kink at zero
        let offsets: Vec<f64> = (0..20)
            .map(|_| {
                let mag = rng.random_range(0.1..1.0);
                if rng.random::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let b_data: Vec<f64> = a.data().iter().zip(offsets.iter()).map(|(x, o)| x + o).collect();
        let b = Tensor::from_vec(vec![4, 5], b_data).unwrap().with_grad();
        let err = check(&[a, b], |tape, vs| tape.l1_distance(vs[0], vs[1]));
        assert!(err < 1e-4, "l1 rel err {err}");
    }

    #[test]
    fn fd_exp_log() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let a = rand_tensor(&mut rng, 3, 6, 0.5, 2.0);
        let err = check(&[a], |tape, vs| {
            let lg = tape.log(vs[0])?;
            let back = tape.exp(lg)?;
            tape.mean_all(back)
        });
        assert!(err < 1e-4, "exp/log rel err {err}");
    }

    #[test]
    fn fd_softmax_gelu() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let a = rand_tensor(&mut rng, 4, 8, -2.0, 2.0);
        let w = rand_tensor(&mut rng, 8, 8, -0.5, 0.5);
        let err = check(&[a, w], |tape, vs| {
            let sm = tape.softmax_rows(vs[0])?;
            let mixed = tape.matmul(sm, vs[1])?;
            let act = tape.gelu(mixed)?;
            tape.sum_all(act)
        });
        assert!(err < 1e-4, "softmax/gelu rel err {err}");
    }

    #[test]
    fn fd_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = rand_tensor(&mut rng, 4, 8, -1.0, 1.0);
        let gamma = rand_tensor(&mut rng, 1, 8, 0.5, 1.5);
        let beta = rand_tensor(&mut rng, 1, 8, -0.5, 0.5);
        let probe = rand_tensor(&mut rng, 4, 8, -1.0, 1.0);
        let probe2 = probe.clone();
        let err = check(&[x, gamma, beta], move |tape, vs| {
            let normed = tape.layer_norm(vs[0], vs[1], vs[2])?;
            // weight the outputs so the gradient is not row-degenerate
            let weighted = tape.mul_const(normed, &probe2)?;
            tape.sum_all(weighted)
        });
        assert!(err < 1e-4, "layer_norm rel err {err}");
    }

    #[test]
    fn fd_l2_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = rand_tensor(&mut rng, 3, 6, 0.2, 1.2);
        let probe = rand_tensor(&mut rng, 3, 6, -1.0, 1.0);
        let err = check(&[x], move |tape, vs| {
            let normed = tape.l2_normalize_rows(vs[0])?;
            let weighted = tape.mul_const(normed, &probe)?;
            tape.sum_all(weighted)
        });
        assert!(err < 1e-4, "l2_normalize rel err {err}");
    }

    #[test]
    fn fd_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        // two blocks of three tokens, two heads over four features
        let q = rand_tensor(&mut rng, 6, 4, -1.0, 1.0);
        let k = rand_tensor(&mut rng, 6, 4, -1.0, 1.0);
        let v = rand_tensor(&mut rng, 6, 4, -1.0, 1.0);
        let probe = rand_tensor(&mut rng, 6, 4, -1.0, 1.0);
        let err = check(&[q, k, v], move |tape, vs| {
            let out = tape.attention(vs[0], vs[1], vs[2], 3, 2)?;
            let weighted = tape.mul_const(out, &probe)?;
            tape.sum_all(weighted)
        });
        assert!(err < 1e-4, "attention rel err {err}");
    }

    #[test]
    fn loss_suite_passes_and_names_every_term() {
        let report = check_loss_gradients(4, DEFAULT_FD_STEP).unwrap();
        let names: Vec<&str> = report.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            [
                "classification",
                "contrastive/normalized",
                "contrastive/raw",
                "feature_distill",
                "logit_distill",
                "pseudo_classification",
                "total",
            ]
        );
        for (name, err) in &report {
            assert!(*err < 1e-4, "{name} rel err {err}");
        }
    }

    #[test]
    fn fd_bce_with_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let logits = rand_tensor(&mut rng, 4, 6, -3.0, 3.0);
        let targets_data: Vec<f64> = (0..24).map(|i| if i % 6 == i / 6 { 1.0 } else { 0.0 }).collect();
        let targets = Tensor::from_vec(vec![4, 6], targets_data).unwrap();
        let err = check(&[logits], move |tape, vs| tape.bce_with_logits(vs[0], &targets));
        assert!(err < 1e-4, "bce rel err {err}");
    }
}
