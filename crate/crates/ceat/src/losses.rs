//! The training objective: classification, prototype-contrastive,
//! distillation, and pseudo-feature terms, combined with a per-task
//! weighting schedule.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Per-task weights of the combined objective. With `seen` classes total
/// after this task and `new` classes introduced by it: alpha = seen/new,
/// mu = seen/20, delta fixed at 0.5.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub mu: f64,
    pub delta: f64,
    pub tau: f64,
}

impl LossWeights {
    pub fn for_task(seen_classes: usize, new_classes: usize, tau: f64) -> Result<Self> {
        if new_classes == 0 || seen_classes < new_classes {
            return Err(Error::invalid(
                "loss_weights",
                format!("seen {seen_classes} vs new {new_classes}"),
            ));
        }
        if tau <= 0.0 {
            return Err(Error::invalid("loss_weights", format!("tau {tau} must be positive")));
        }
        Ok(LossWeights {
            alpha: seen_classes as f64 / new_classes as f64,
            mu: seen_classes as f64 / 20.0,
            delta: 0.5,
            tau,
        })
    }
}

/// Mean binary cross-entropy of logits against one-hot labels over all
/// seen classes.
pub fn classification_loss<T: Element>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
) -> Result<Var> {
    let (n, c) = (tape.value(logits).rows(), tape.value(logits).cols());
    if labels.len() != n {
        return Err(Error::invalid(
            "classification_loss",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    let mut targets = Tensor::zeros(vec![n, c]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::invalid(
                "classification_loss",
                format!("label {y} outside {c} classes"),
            ));
        }
        *targets.at_mut(i, y) = T::one();
    }
    tape.bce_with_logits(logits, &targets)
}

/// Prototype contrastive loss over a labeled feature batch plus a frozen
/// prototype set. Two terms share one positive definition (same-label
/// members of the batch): the first anchors on batch features with
/// denominators over the rest of the batch; the second anchors on batch
/// and prototypes with denominators further extended by every prototype.
/// Anchors with no positives contribute zero. Gradient reaches only the
/// features; prototypes enter as constants.
///
/// `anchor_mean` divides each term by its anchor-set size (batch for the
/// first, batch plus prototypes for the second); the written form is a
/// plain sum, but that grows linearly with batch size and drowns the
/// batch-mean classification loss it is combined with.
pub fn pcl<T: Element>(
    tape: &mut Tape<T>,
    features: Var,
    labels: &[usize],
    prototypes: &Tensor<T>,
    proto_labels: &[usize],
    tau: f64,
    normalize: bool,
    anchor_mean: bool,
) -> Result<Var> {
    let n = tape.value(features).rows();
    let d = tape.value(features).cols();
    if n < 2 {
        return Err(Error::invalid("pcl", "need at least two features"));
    }
    if labels.len() != n {
        return Err(Error::invalid("pcl", format!("{} labels for {n} features", labels.len())));
    }
    let m = proto_labels.len();
    if m > 0 && (prototypes.rows() != m || prototypes.cols() != d) {
        return Err(Error::shape(
            "pcl",
            format!("{m} prototype labels vs {:?}", prototypes.shape()),
        ));
    }
    if tau <= 0.0 {
        return Err(Error::invalid("pcl", format!("tau {tau} must be positive")));
    }

    let z = if normalize {
        tape.l2_normalize_rows(features)?
    } else {
        features
    };
    let all = if m > 0 {
        let protos = if normalize {
            let mut p = prototypes.clone();
            for i in 0..m {
                let norm = p.row_slice(i).iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
                for j in 0..d {
                    *p.at_mut(i, j) = T::from_f64(p.at(i, j).to_f64() / norm);
                }
            }
            p
        } else {
            prototypes.clone()
        };
        let pv = tape.constant(&protos)?;
        tape.concat_rows(&[z, pv])?
    } else {
        z
    };

    let total = n + m;
    let allt = tape.transpose(all)?;
    let sims = tape.matmul(all, allt)?;
    let sims = tape.scale(sims, T::from_f64(1.0 / tau))?;

    // anchor label per row: batch labels then prototype labels
    let label_of = |i: usize| if i < n { labels[i] } else { proto_labels[i - n] };
    // positives are always same-label batch members other than the anchor
    let positives: Vec<Vec<usize>> = (0..total)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && labels[j] == label_of(i))
                .collect()
        })
        .collect();

    // term 1: batch anchors, denominator = batch minus self
    let mut den1 = Tensor::zeros(vec![total, total]);
    let mut pos1 = Tensor::zeros(vec![total, total]);
    for i in 0..n {
        for j in 0..n {
            if j != i {
                *den1.at_mut(i, j) = T::one();
            }
        }
        if !positives[i].is_empty() {
            let w = T::from_f64(-1.0 / positives[i].len() as f64);
            for &p in &positives[i] {
                *pos1.at_mut(i, p) = w;
            }
        }
    }
    // rows n.. of den1 are zero; keep their denominator sums away from
    // log(0) with a sentinel that the zero positive mask then discards
    for i in n..total {
        *den1.at_mut(i, i) = T::one();
    }

    // term 2: batch and prototype anchors, denominator extended by P
    let mut den2 = Tensor::zeros(vec![total, total]);
    let mut pos2 = Tensor::zeros(vec![total, total]);
    for i in 0..total {
        for j in 0..n {
            if j != i {
                *den2.at_mut(i, j) = T::one();
            }
        }
        for j in n..total {
            *den2.at_mut(i, j) = T::one();
        }
        if !positives[i].is_empty() {
            let w = T::from_f64(-1.0 / positives[i].len() as f64);
            for &p in &positives[i] {
                *pos2.at_mut(i, p) = w;
            }
        }
    }

    let term = |tape: &mut Tape<T>, den_mask: &Tensor<T>, pos_mask: &Tensor<T>| -> Result<Var> {
        let e = tape.exp(sims)?;
        let masked = tape.mul_const(e, den_mask)?;
        let den = tape.sum_cols(masked)?;
        let logden = tape.log(den)?;
        let centered = tape.sub_col_broadcast(sims, logden)?;
        let weighted = tape.mul_const(centered, pos_mask)?;
        tape.sum_all(weighted)
    };
    let t1 = term(tape, &den1, &pos1)?;
    let t2 = term(tape, &den2, &pos2)?;
    if anchor_mean {
        let t1 = tape.scale(t1, T::from_f64(1.0 / n as f64))?;
        let t2 = tape.scale(t2, T::from_f64(1.0 / total as f64))?;
        tape.add(t1, t2)
    } else {
        tape.add(t1, t2)
    }
}

/// Mean absolute difference between current and snapshot features.
pub fn feature_distill<T: Element>(
    tape: &mut Tape<T>,
    new_features: Var,
    old_features: &Tensor<T>,
) -> Result<Var> {
    let old = tape.constant(old_features)?;
    tape.l1_distance(new_features, old)
}

/// KL divergence from the snapshot's softened class distribution to the
/// current one, over old classes only, averaged across the batch.
pub fn logit_distill<T: Element>(
    tape: &mut Tape<T>,
    new_logits: Var,
    old_logits: &Tensor<T>,
    old_classes: usize,
    temperature: f64,
) -> Result<Var> {
    let n = tape.value(new_logits).rows();
    if old_logits.rows() != n {
        return Err(Error::shape(
            "logit_distill",
            format!("{n} new rows vs {} old rows", old_logits.rows()),
        ));
    }
    if old_classes == 0
        || old_classes > tape.value(new_logits).cols()
        || old_classes > old_logits.cols()
    {
        return Err(Error::invalid(
            "logit_distill",
            format!("{old_classes} old classes out of range"),
        ));
    }
    if temperature <= 0.0 {
        return Err(Error::invalid("logit_distill", "temperature must be positive"));
    }

    // snapshot distribution and its entropy term, computed off-tape
    let mut p = Tensor::<T>::zeros(vec![n, old_classes]);
    let mut p_logp_sum = 0.0f64;
    for i in 0..n {
        let row: Vec<f64> = (0..old_classes)
            .map(|j| old_logits.at(i, j).to_f64() / temperature)
            .collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let den: f64 = exps.iter().sum();
        for j in 0..old_classes {
            let pj = exps[j] / den;
            *p.at_mut(i, j) = T::from_f64(pj);
            if pj > 0.0 {
                p_logp_sum += pj * pj.ln();
            }
        }
    }

    let sliced = tape.slice_cols(new_logits, 0, old_classes)?;
    let scaled = tape.scale(sliced, T::from_f64(1.0 / temperature))?;
    let q = tape.softmax_rows(scaled)?;
    let logq = tape.log(q)?;
    let cross = tape.mul_const(logq, &p)?;
    let s = tape.sum_all(cross)?;
    let neg_cross = tape.scale(s, T::from_f64(-1.0 / n as f64))?;
    tape.add_scalar(neg_cross, T::from_f64(p_logp_sum / n as f64))
}

/// Both distillation terms against the frozen end-of-previous-task model.
pub fn kd_losses<T: Element>(
    tape: &mut Tape<T>,
    new_features: Var,
    new_logits: Var,
    old_features: &Tensor<T>,
    old_logits: &Tensor<T>,
    old_classes: usize,
    temperature: f64,
) -> Result<(Var, Var)> {
    let ld = logit_distill(tape, new_logits, old_logits, old_classes, temperature)?;
    let fd = feature_distill(tape, new_features, old_features)?;
    Ok((ld, fd))
}

/// Classification loss on pseudo-feature logits; labels must be old
/// classes. `None` (no pseudo batch, as on the base task) scores zero.
pub fn ipf_loss<T: Element>(
    tape: &mut Tape<T>,
    pseudo: Option<(Var, &[usize])>,
    old_classes: usize,
) -> Result<Var> {
    match pseudo {
        None => tape.constant(&Tensor::scalar(T::zero())),
        Some((logits, labels)) => {
            if let Some(&bad) = labels.iter().find(|&&y| y >= old_classes) {
                return Err(Error::invalid(
                    "ipf_loss",
                    format!("pseudo label {bad} is not an old class (< {old_classes})"),
                ));
            }
            classification_loss(tape, logits, labels)
        }
    }
}

/// L_total = L_bce + alpha*(L_ld + L_fd) + mu*L_ipf + delta*L_pcl.
/// Absent terms are skipped.
pub fn total_loss<T: Element>(
    tape: &mut Tape<T>,
    bce: Var,
    kd: Option<(Var, Var)>,
    ipf: Option<Var>,
    pcl_term: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let mut total = bce;
    if let Some((ld, fd)) = kd {
        let kd_sum = tape.add(ld, fd)?;
        total = tape.add_scaled(total, kd_sum, T::from_f64(w.alpha))?;
    }
    if let Some(ipf) = ipf {
        total = tape.add_scaled(total, ipf, T::from_f64(w.mu))?;
    }
    if let Some(p) = pcl_term {
        total = tape.add_scaled(total, p, T::from_f64(w.delta))?;
    }
    Ok(total)
}
