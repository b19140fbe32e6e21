use std::collections::BTreeSet;

use super::SparseSymmetric;

/// Minimum-degree elimination ordering on the graph of `a`.
///
/// Returns `perm` with `perm[k]` the original index eliminated at step `k`.
/// Ties go to the smallest index so the ordering is deterministic. Each
/// elimination turns the neighbourhood of the pivot into a clique, so the
/// degrees seen are exact external degrees of the elimination graph.
pub fn minimum_degree(a: &SparseSymmetric) -> Vec<usize> {
    let n = a.order();
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for j in 0..n {
        for (i, _) in a.column(j) {
            if i != j {
                adj[i].insert(j);
                adj[j].insert(i);
            }
        }
    }
    let mut alive = vec![true; n];
    let mut perm = Vec::with_capacity(n);
    for _ in 0..n {
        let pivot = (0..n)
            .filter(|&v| alive[v])
            .min_by_key(|&v| (adj[v].len(), v))
            .expect("an uneliminated node remains");
        alive[pivot] = false;
        perm.push(pivot);
        let nbrs: Vec<usize> = std::mem::take(&mut adj[pivot]).into_iter().collect();
        for &u in &nbrs {
            adj[u].remove(&pivot);
        }
        for (k, &u) in nbrs.iter().enumerate() {
            for &w in &nbrs[k + 1..] {
                adj[u].insert(w);
                adj[w].insert(u);
            }
        }
    }
    perm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arrow_matrix_eliminates_hub_last() {
        // Node 0 is connected to everything; eliminating it first fills the matrix.
        let n = 6;
        let trip = (0..n)
            .map(|i| (i, i, 4.0))
            .chain((1..n).map(|i| (i, 0, 1.0)));
        let a = SparseSymmetric::from_triplets(n, trip).unwrap();
        let perm = minimum_degree(&a);
        assert!(perm.iter().position(|&v| v == 0).unwrap() >= n - 2);
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    }
}
