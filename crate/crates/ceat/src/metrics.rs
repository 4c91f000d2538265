//! Incremental-learning metrics: the lower-triangular accuracy matrix,
//! average incremental accuracy, and average forgetting.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// `a[t][j]`: accuracy on task j's test set measured after finishing
/// task t. Row t therefore has t+1 entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix { rows: Vec::new() }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccuracyMatrix::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::invalid(
                "accuracy_matrix",
                format!("row {} must have {} entries, got {}", self.rows.len(), self.rows.len() + 1, row.len()),
            ));
        }
        if let Some(&bad) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("accuracy_matrix", format!("accuracy {bad} outside [0,1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, t: usize, j: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(j)).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Accuracy over the union of test sets, from per-task accuracies and
/// test-set sizes.
pub fn overall_accuracy(per_task: &[f64], sizes: &[usize]) -> Result<f64> {
    if per_task.is_empty() || per_task.len() > sizes.len() {
        return Err(Error::invalid(
            "overall_accuracy",
            format!("{} accuracies vs {} sizes", per_task.len(), sizes.len()),
        ));
    }
    let mut correct = 0.0;
    let mut total = 0usize;
    for (a, &n) in per_task.iter().zip(sizes) {
        if n == 0 {
            return Err(Error::invalid("overall_accuracy", "empty test set"));
        }
        correct += a * n as f64;
        total += n;
    }
    Ok(correct / total as f64)
}

/// Mean over every task checkpoint of the accuracy on all classes seen
/// so far.
pub fn average_incremental_accuracy(matrix: &AccuracyMatrix, sizes: &[usize]) -> Result<f64> {
    if matrix.num_tasks() == 0 {
        return Err(Error::invalid("average_incremental_accuracy", "empty matrix"));
    }
    if sizes.len() < matrix.num_tasks() {
        return Err(Error::invalid(
            "average_incremental_accuracy",
            format!("{} sizes for {} tasks", sizes.len(), matrix.num_tasks()),
        ));
    }
    let mut sum = 0.0;
    for row in matrix.rows() {
        sum += overall_accuracy(row, sizes)?;
    }
    Ok(sum / matrix.num_tasks() as f64)
}

/// Mean over past tasks of the drop from their peak accuracy to their
/// final accuracy. Zero when only one task exists.
pub fn average_forgetting(matrix: &AccuracyMatrix) -> Result<f64> {
    let t_last = match matrix.num_tasks() {
        0 => return Err(Error::invalid("average_forgetting", "empty matrix")),
        n => n - 1,
    };
    if t_last == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for j in 0..t_last {
        let peak = (j..=t_last)
            .map(|t| matrix.get(t, j).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        sum += peak - matrix.get(t_last, j).unwrap();
    }
    Ok(sum / t_last as f64)
}

/// Number of rows whose argmax equals the label; argmax ties resolve to
/// the lowest column.
pub fn top1_correct<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    let n = logits.rows();
    if labels.len() != n {
        return Err(Error::invalid(
            "top1_correct",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    let mut correct = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row_slice(i);
        let mut best = 0usize;
        for (j, v) in row.iter().enumerate().skip(1) {
            if *v > row[best] {
                best = j;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    Ok(correct)
}

/// Top-1 accuracy of logits against labels.
pub fn top1_accuracy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    Ok(top1_correct(logits, labels)? as f64 / logits.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn rows_must_grow_one_at_a_time() {
        let mut m = AccuracyMatrix::new();
        m.push_row(vec![0.9]).unwrap();
        assert!(m.push_row(vec![0.8]).is_err());
        m.push_row(vec![0.8, 0.7]).unwrap();
        assert!(m.push_row(vec![0.5, 0.5, 1.5]).is_err());
        assert_eq!(m.num_tasks(), 2);
        assert_eq!(m.get(1, 0), Some(0.8));
        assert_eq!(m.get(0, 1), None);
    }

    #[test]
    fn constant_accuracy_averages_to_itself() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.8], vec![0.8, 0.8], vec![0.8, 0.8, 0.8]]).unwrap();
        let avg = average_incremental_accuracy(&m, &[50, 50, 50]).unwrap();
        assert!((avg - 0.8).abs() < 1e-15);
    }

    #[test]
    fn two_step_average_with_equal_sizes() {
        let m = AccuracyMatrix::from_rows(vec![vec![1.0], vec![0.25, 0.75]]).unwrap();
        let avg = average_incremental_accuracy(&m, &[10, 10]).unwrap();
        assert!((avg - 0.75).abs() < 1e-15);
    }

    #[test]
    fn overall_accuracy_weights_by_test_size() {
        // 90% of 100 and 50% of 10 -> 95/110
        let got = overall_accuracy(&[0.9, 0.5], &[100, 10]).unwrap();
        assert!((got - 95.0 / 110.0).abs() < 1e-15);
    }

    #[test]
    fn no_degradation_means_no_forgetting() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.9, 0.6], vec![0.9, 0.6, 0.7]]).unwrap();
        assert_eq!(average_forgetting(&m).unwrap(), 0.0);
    }

    #[test]
    fn single_old_task_peak_minus_final() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.7, 0.8]]).unwrap();
        assert!((average_forgetting(&m).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn single_task_run_has_zero_forgetting() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.4]]).unwrap();
        assert_eq!(average_forgetting(&m).unwrap(), 0.0);
    }

    #[test]
    fn forgetting_matches_brute_force_on_random_matrix() {
        let mut rng = crate::rng::stream(80, 0, "metrics");
        for _ in 0..20 {
            let t = rng.random_range(2..6usize);
            let rows: Vec<Vec<f64>> = (0..t)
                .map(|i| (0..=i).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect();
            let m = AccuracyMatrix::from_rows(rows.clone()).unwrap();
            let got = average_forgetting(&m).unwrap();
            let mut want = 0.0;
            for j in 0..t - 1 {
                let mut peak = f64::NEG_INFINITY;
                for r in rows.iter().skip(j) {
                    if r.len() > j {
                        peak = peak.max(r[j]);
                    }
                }
                want += peak - rows[t - 1][j];
            }
            want /= (t - 1) as f64;
            assert_eq!(got.to_bits(), want.to_bits());
        }
    }

    #[test]
    fn top1_breaks_ties_toward_lowest_column() {
        let logits = Tensor::from_vec(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(top1_accuracy(&logits, &[0, 1]).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&logits, &[1, 2]).unwrap(), 0.0);
    }

    #[test]
    fn top1_matches_count_oracle() {
        let mut rng = crate::rng::stream(81, 0, "top1");
        let n = 40;
        let c = 5;
        let data: Vec<f64> = (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let logits = Tensor::from_vec(vec![n, c], data.clone()).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let got = top1_accuracy(&logits, &labels).unwrap();
        let mut correct = 0;
        for i in 0..n {
            let row = &data[i * c..(i + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == labels[i] {
                correct += 1;
            }
        }
        assert_eq!(got.to_bits(), (correct as f64 / n as f64).to_bits());
    }
}
