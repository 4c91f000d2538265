//! Class prototypes and the batch-interpolation pseudo-feature generator
//! that compensates the classifier for old classes without stored
//! exemplars.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// A frozen class-mean feature, recorded once when its class's task ends.
#[derive(Debug, Clone)]
pub struct Prototype<T: Element> {
    pub class_id: usize,
    pub vector: Tensor<T>,
    pub task_of_origin: usize,
}

/// Append-only collection of prototypes, one per class ever seen.
#[derive(Debug, Clone, Default)]
pub struct PrototypeStore<T: Element> {
    entries: Vec<Prototype<T>>,
}

impl<T: Element> PrototypeStore<T> {
    pub fn new() -> Self {
        PrototypeStore { entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, proto: Prototype<T>) -> Result<()> {
        if proto.vector.rows() != 1 {
            return Err(Error::shape(
                "prototype_store",
                format!("vector must be a single row, got {:?}", proto.vector.shape()),
            ));
        }
        if let Some(first) = self.entries.first() {
            if first.vector.cols() != proto.vector.cols() {
                return Err(Error::shape(
                    "prototype_store",
                    format!(
                        "dimension {} vs existing {}",
                        proto.vector.cols(),
                        first.vector.cols()
                    ),
                ));
            }
        }
        if self.entries.iter().any(|p| p.class_id == proto.class_id) {
            return Err(Error::invalid(
                "prototype_store",
                format!("class {} already has a prototype", proto.class_id),
            ));
        }
        self.entries.push(proto);
        Ok(())
    }

    pub fn extend(&mut self, protos: Vec<Prototype<T>>) -> Result<()> {
        for p in protos {
            self.push(p)?;
        }
        Ok(())
    }

    pub fn get(&self, class_id: usize) -> Option<&Prototype<T>> {
        self.entries.iter().find(|p| p.class_id == class_id)
    }

    pub fn all(&self) -> &[Prototype<T>] {
        &self.entries
    }

    pub fn classes(&self) -> Vec<usize> {
        self.entries.iter().map(|p| p.class_id).collect()
    }

    /// Stacks every prototype into a matrix with its label list, in
    /// insertion order.
    pub fn as_matrix(&self) -> Result<(Tensor<T>, Vec<usize>)> {
        if self.is_empty() {
            return Err(Error::invalid("prototype_store", "no prototypes stored"));
        }
        let rows: Vec<Vec<T>> = self.entries.iter().map(|p| p.vector.data().to_vec()).collect();
        Ok((Tensor::from_rows(&rows)?, self.classes()))
    }

    pub fn cast<U: Element>(&self) -> PrototypeStore<U> {
        PrototypeStore {
            entries: self
                .entries
                .iter()
                .map(|p| Prototype {
                    class_id: p.class_id,
                    vector: p.vector.cast(),
                    task_of_origin: p.task_of_origin,
                })
                .collect(),
        }
    }
}

/// Per-class feature means for `classes`; every listed class must appear
/// in the batch. Accumulation is in f64.
pub fn compute_prototypes<T: Element>(
    features: &Tensor<T>,
    labels: &[usize],
    classes: &[usize],
    task: usize,
) -> Result<Vec<Prototype<T>>> {
    let n = features.rows();
    if labels.len() != n {
        return Err(Error::invalid(
            "compute_prototypes",
            format!("{} labels for {n} feature rows", labels.len()),
        ));
    }
    let d = features.cols();
    let mut out = Vec::with_capacity(classes.len());
    for &class in classes {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            return Err(Error::invalid(
                "compute_prototypes",
                format!("class {class} has no samples"),
            ));
        }
        let mut mean = vec![0.0f64; d];
        for &i in &members {
            for (acc, v) in mean.iter_mut().zip(features.row_slice(i)) {
                *acc += v.to_f64();
            }
        }
        let inv = 1.0 / members.len() as f64;
        let vector = Tensor::from_vec(
            vec![1, d],
            mean.iter().map(|v| T::from_f64(v * inv)).collect(),
        )?;
        out.push(Prototype { class_id: class, vector, task_of_origin: task });
    }
    Ok(out)
}

/// Mean feature of every class present in the batch, ascending class id.
pub fn batch_class_centers<T: Element>(
    features: &Tensor<T>,
    labels: &[usize],
) -> Result<Vec<(usize, Vec<f64>)>> {
    let n = features.rows();
    if labels.len() != n {
        return Err(Error::invalid(
            "batch_class_centers",
            format!("{} labels for {n} feature rows", labels.len()),
        ));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let d = features.cols();
    let mut centers = Vec::with_capacity(classes.len());
    for class in classes {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        let mut mean = vec![0.0f64; d];
        for &i in &members {
            for (acc, v) in mean.iter_mut().zip(features.row_slice(i)) {
                *acc += v.to_f64();
            }
        }
        let inv = 1.0 / members.len() as f64;
        mean.iter_mut().for_each(|v| *v *= inv);
        centers.push((class, mean));
    }
    Ok(centers)
}

/// Class of the center closest to `point` in L2 distance; ties break to
/// the lowest class id.
pub fn nearest_center(point: &[f64], centers: &[(usize, Vec<f64>)]) -> Result<usize> {
    if centers.is_empty() {
        return Err(Error::invalid("nearest_center", "no centers"));
    }
    let mut best: Option<(usize, f64)> = None;
    for (class, center) in centers {
        if center.len() != point.len() {
            return Err(Error::shape(
                "nearest_center",
                format!("center dim {} vs point {}", center.len(), point.len()),
            ));
        }
        let dist: f64 = point
            .iter()
            .zip(center)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        // centers arrive in ascending class order, so strict improvement
        // leaves ties with the lowest class id
        match best {
            Some((_, d)) if dist >= d => {}
            _ => best = Some((*class, dist)),
        }
    }
    Ok(best.unwrap().0)
}

/// Interpolation reach for an incremental task numbered `t` of `total`
/// (both 1-based): 0.5 on the first, growing linearly to 0.7 on the last.
pub fn zeta_for_task(t: usize, total: usize) -> Result<f64> {
    if total == 0 || t == 0 || t > total {
        return Err(Error::Schedule(format!(
            "incremental task {t} of {total} out of range"
        )));
    }
    if total == 1 {
        return Ok(0.5);
    }
    // lerp between the endpoints so the first and last task hit 0.5 and
    // 0.7 exactly instead of accumulating rounding from 0.5 + 0.2*frac
    let frac = (t - 1) as f64 / (total - 1) as f64;
    Ok((1.0 - frac) * 0.5 + frac * 0.7)
}

/// Draws eta = zeta * Beta(0.8, 0.5), the mixing weight toward the batch
/// feature.
pub fn sample_eta(rng: &mut ChaCha8Rng, zeta: f64) -> Result<f64> {
    if !(zeta > 0.0 && zeta <= 1.0) {
        return Err(Error::invalid("sample_eta", format!("zeta {zeta} outside (0, 1]")));
    }
    let beta = Beta::new(0.8, 0.5)
        .map_err(|e| Error::invalid("sample_eta", format!("beta distribution: {e}")))?;
    Ok(zeta * beta.sample(rng))
}

/// (1 - eta) * prototype + eta * feature, elementwise in f64.
pub fn interpolate<T: Element>(proto: &[T], feature: &[T], eta: f64) -> Result<Vec<T>> {
    if proto.len() != feature.len() {
        return Err(Error::shape(
            "interpolate",
            format!("{} vs {}", proto.len(), feature.len()),
        ));
    }
    Ok(proto
        .iter()
        .zip(feature)
        .map(|(p, f)| T::from_f64((1.0 - eta) * p.to_f64() + eta * f.to_f64()))
        .collect())
}

/// One pseudo-feature per real batch row: pick a stored prototype
/// uniformly, walk to the batch class center nearest to it, pick one of
/// that class's members uniformly, and interpolate with a fresh eta. The
/// pseudo label is the prototype's class.
pub fn generate_pseudo_batch<T: Element>(
    store: &PrototypeStore<T>,
    batch_features: &Tensor<T>,
    batch_labels: &[usize],
    zeta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if store.is_empty() {
        return Err(Error::invalid("generate_pseudo_batch", "no prototypes stored"));
    }
    let count = batch_features.rows();
    let d = batch_features.cols();
    if let Some(first) = store.all().first() {
        if first.vector.cols() != d {
            return Err(Error::shape(
                "generate_pseudo_batch",
                format!("prototype dim {} vs batch {}", first.vector.cols(), d),
            ));
        }
    }
    let centers = batch_class_centers(batch_features, batch_labels)?;
    let mut members: Vec<(usize, Vec<usize>)> = centers
        .iter()
        .map(|(class, _)| (*class, Vec::new()))
        .collect();
    for (i, &y) in batch_labels.iter().enumerate() {
        members.iter_mut().find(|(c, _)| *c == y).unwrap().1.push(i);
    }

    let mut rows = Vec::with_capacity(count * d);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let proto = &store.all()[rng.random_range(0..store.len())];
        let pvec: Vec<f64> = proto.vector.data().iter().map(|v| v.to_f64()).collect();
        let class = nearest_center(&pvec, &centers)?;
        let pool = &members.iter().find(|(c, _)| *c == class).unwrap().1;
        let pick = pool[rng.random_range(0..pool.len())];
        let eta = sample_eta(rng, zeta)?;
        let mixed = interpolate(proto.vector.data(), batch_features.row_slice(pick), eta)?;
        rows.extend(mixed);
        labels.push(proto.class_id);
    }
    Ok((Tensor::from_vec(vec![count, d], rows)?, labels))
}
