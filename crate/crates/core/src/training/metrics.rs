use crate::tensor::{Float, Tensor};

/// Whether `label` ranks among the `k` largest entries of `row`.
/// Ties rank the lower class index first.
pub fn in_top_k<T: Float>(row: &[T], label: usize, k: usize) -> bool {
    let target = row[label];
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > target || (v == target && j < label))
        .count();
    ahead < k
}

/// Number of rows of `logits` (`B×K`) whose label is in the top `k`.
pub fn top_k_hits<T: Float>(logits: &Tensor<T>, labels: &[usize], k: usize) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &l)| in_top_k(row, l, k))
        .count()
}
