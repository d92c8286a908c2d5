//! Deterministic top-k selection shared by prompt retrieval and routing.

/// Indices of the `k` largest scores, ordered by score (descending) with
/// ties broken by lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // adding 0.0 maps -0.0 to +0.0 so signed zeros tie
    idx.sort_by(|&a, &b| (scores[b] + 0.0).total_cmp(&(scores[a] + 0.0)).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}
