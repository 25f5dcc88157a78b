//! User-item and item-item graph construction.

use std::sync::Arc;

use crate::autodiff::{Matrix, Tape, Var};
use crate::data::InteractionSet;
use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

/// `A = [[0, R], [Rᵀ, 0]]` over `M + N` nodes, users first, from the training split.
pub fn build_bipartite_adjacency(set: &InteractionSet) -> SparseMatrix {
    let m = set.num_users();
    let size = m + set.num_items();
    let mut triplets = Vec::with_capacity(2 * set.num_train());
    for (u, items) in set.train.iter().enumerate() {
        for &i in items {
            triplets.push((u, m + i, 1.0));
            triplets.push((m + i, u, 1.0));
        }
    }
    SparseMatrix::from_triplets(size, size, triplets).expect("train ids are in range")
}

/// `D^{-1/2} A D^{-1/2}` with row-sum degrees. Rows with zero degree stay empty.
pub fn sym_normalize(adj: &SparseMatrix) -> SparseMatrix {
    let deg: Vec<f64> = (0..adj.rows())
        .map(|r| adj.row_range(r).map(|e| adj.values()[e]).sum())
        .collect();
    let inv: Vec<f64> = deg
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let values = adj.entries().map(|(r, c, v)| v * inv[r] * inv[c]).collect();
    adj.with_values(values).expect("same entry count")
}

/// Top-`k` cosine neighbours per item, excluding the item itself and
/// zero-similarity pairs. Ties go to the lower item id.
pub fn build_modality_knn(features: &Matrix, k: usize) -> Result<SparseMatrix> {
    let n = features.rows();
    if k == 0 || k >= n {
        return Err(Error::Config(format!(
            "knn_topk = {k} must be in 1..{n} (number of items)"
        )));
    }
    let mut unit = features.clone();
    let mut zero_rows = 0usize;
    for r in 0..n {
        let row = unit.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        } else {
            zero_rows += 1;
        }
    }
    if zero_rows > 0 {
        log::warn!("{zero_rows} items have all-zero features and will be isolated");
    }

    const BLOCK: usize = 256;
    let mut triplets = Vec::with_capacity(n * k);
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(n);
    let by_rank = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    for start in (0..n).step_by(BLOCK) {
        let end = (start + BLOCK).min(n);
        let block = unit.gather_rows(&(start..end).collect::<Vec<_>>());
        let sims = block.matmul_t(&unit);
        for (bi, i) in (start..end).enumerate() {
            candidates.clear();
            candidates.extend(
                sims.row(bi)
                    .iter()
                    .enumerate()
                    .filter(|&(j, &s)| j != i && s != 0.0)
                    .map(|(j, &s)| (s.clamp(-1.0, 1.0), j)),
            );
            if candidates.len() > k {
                candidates.select_nth_unstable_by(k - 1, by_rank);
                candidates.truncate(k);
            }
            candidates.sort_by(by_rank);
            triplets.extend(candidates.iter().map(|&(s, j)| (i, j, s)));
        }
    }
    SparseMatrix::from_triplets(n, n, triplets)
}

/// Per-modality kNN topologies aligned on the union of their sparsity patterns.
#[derive(Debug, Clone)]
pub struct SemanticItemGraph {
    pub topologies: Vec<SparseMatrix>,
    /// Union pattern; stored values are unused placeholders.
    pub pattern: Arc<SparseMatrix>,
    /// nnz × K matrix; column `m` holds modality `m`'s value on each union entry (0 if absent).
    pub modality_values: Matrix,
    pub entry_rows: Vec<usize>,
    pub entry_cols: Vec<usize>,
}

impl SemanticItemGraph {
    pub fn new(topologies: Vec<SparseMatrix>) -> Result<Self> {
        let first = topologies
            .first()
            .ok_or_else(|| Error::Structure("no modality topologies".into()))?;
        let n = first.rows();
        if topologies.iter().any(|t| t.rows() != n || t.cols() != n) {
            return Err(Error::Structure(
                "modality topologies differ in size".into(),
            ));
        }
        let mut keys: Vec<(usize, usize)> = topologies
            .iter()
            .flat_map(|t| t.entries().map(|(r, c, _)| (r, c)))
            .collect();
        keys.sort_unstable();
        keys.dedup();
        if keys.is_empty() {
            return Err(Error::Structure("item-item graph has no edges".into()));
        }
        let pattern =
            SparseMatrix::from_triplets(n, n, keys.iter().map(|&(r, c)| (r, c, 1.0)).collect())?;
        let kmod = topologies.len();
        let mut modality_values = Matrix::zeros(keys.len(), kmod);
        for (m, t) in topologies.iter().enumerate() {
            for (r, c, v) in t.entries() {
                let e = keys.binary_search(&(r, c)).expect("key from union");
                modality_values.set(e, m, v);
            }
        }
        Ok(SemanticItemGraph {
            topologies,
            entry_rows: keys.iter().map(|k| k.0).collect(),
            entry_cols: keys.iter().map(|k| k.1).collect(),
            pattern: Arc::new(pattern),
            modality_values,
        })
    }

    /// Builds one kNN topology per feature matrix.
    pub fn from_features<'a>(
        features: impl IntoIterator<Item = &'a Matrix>,
        k: usize,
    ) -> Result<Self> {
        let topologies = features
            .into_iter()
            .map(|f| build_modality_knn(f, k))
            .collect::<Result<Vec<_>>>()?;
        Self::new(topologies)
    }

    pub fn num_items(&self) -> usize {
        self.pattern.rows()
    }

    pub fn num_edges(&self) -> usize {
        self.pattern.nnz()
    }
}

/// `S = Σ_m softmax(logits)_m · S^m` on the union pattern, as an nnz×1 node.
/// `logits` is a 1×K node.
pub fn fuse_modalities(tape: &mut Tape, graph: &SemanticItemGraph, logits: Var) -> Result<Var> {
    let k = graph.modality_values.cols();
    if tape.shape(logits) != (1, k) {
        return Err(Error::dim(
            "fuse_modalities",
            format!("{:?} logits for {k} modalities", tape.shape(logits)),
        ));
    }
    let values = tape.constant(graph.modality_values.clone())?;
    let log_w = tape.log_softmax_rows(logits)?;
    let w = tape.exp(log_w)?;
    let w = tape.transpose(w)?;
    tape.mat_mul(values, w)
}

/// Fused edge values scaled to `s_ij / sqrt(d_i d_j)`, where `d` sums
/// absolute values over each row.
pub fn fuse_and_normalize(tape: &mut Tape, graph: &SemanticItemGraph, logits: Var) -> Result<Var> {
    let fused = fuse_modalities(tape, graph, logits)?;
    let magnitude = tape.abs(fused)?;
    let degree = tape.segment_sum(magnitude, &graph.entry_rows, graph.num_items())?;
    let inv = tape.inv_sqrt(degree, 1e-12)?;
    let inv_r = tape.row_gather(inv, &graph.entry_rows)?;
    let inv_c = tape.row_gather(inv, &graph.entry_cols)?;
    let scaled = tape.mul(fused, inv_r)?;
    tape.mul(scaled, inv_c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::InteractionSet;

    fn set(train: Vec<Vec<usize>>, items: usize) -> InteractionSet {
        let m = train.len();
        InteractionSet {
            user_ids: (0..m).map(|u| u.to_string()).collect(),
            item_ids: (0..items).map(|i| i.to_string()).collect(),
            train,
            val: vec![vec![]; m],
            test: vec![vec![]; m],
        }
    }

    #[test]
    fn smallest_bipartite_graph() {
        let a = build_bipartite_adjacency(&set(vec![vec![0]], 1));
        assert_eq!(a.to_dense(), Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]));
    }

    #[test]
    fn bipartite_structure() {
        let s = set(vec![vec![0, 2], vec![1], vec![0, 1, 2]], 3);
        let a = build_bipartite_adjacency(&s);
        assert_eq!(a.nnz(), 2 * s.num_train());
        assert!(a.is_symmetric(0.0));
        for (r, c, _) in a.entries() {
            assert!((r < 3) != (c < 3), "({r}, {c}) is not user-item");
        }
    }

    #[test]
    fn hand_normalization() {
        // R = [[1,1],[1,0]]: users 0,1 then items 2,3.
        let a = build_bipartite_adjacency(&set(vec![vec![0, 1], vec![0]], 2));
        let n = sym_normalize(&a);
        assert!((n.get(0, 2) - 0.5).abs() < 1e-12);
        assert!((n.get(0, 3) - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((n.get(1, 2) - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!(n.is_symmetric(1e-15));

        let single = sym_normalize(&build_bipartite_adjacency(&set(vec![vec![0]], 1)));
        assert_eq!(single.get(0, 1), 1.0);
    }

    #[test]
    fn knn_hand_cosine() {
        let f = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let g = build_modality_knn(&f, 1).unwrap();
        assert_eq!(g.get(0, 1), 1.0);
        assert_eq!(g.row_nnz(0), 1);
        assert_eq!(g.get(1, 0), 1.0);
        // Item 2 is orthogonal to both others: no nonzero neighbour.
        assert_eq!(g.row_nnz(2), 0);
    }

    #[test]
    fn knn_full_boundary_and_ties() {
        let f = Matrix::from_rows(&[[1.0, 0.2], [0.3, 1.0], [-1.0, 0.5], [0.7, 0.7]]);
        let g = build_modality_knn(&f, 3).unwrap();
        assert_eq!(g.nnz(), 12);
        for i in 0..4 {
            assert_eq!(g.get(i, i), 0.0);
        }
        // Items 1 and 2 are equally similar to item 0 (both identical rows): lower id wins.
        let tie = Matrix::from_rows(&[[1.0, 0.0], [1.0, 1.0], [1.0, 1.0]]);
        let g = build_modality_knn(&tie, 1).unwrap();
        assert_eq!(
            g.entries()
                .filter(|e| e.0 == 0)
                .map(|e| e.1)
                .collect::<Vec<_>>(),
            vec![1]
        );
        assert!((g.get(1, 2) - 1.0).abs() < 1e-15);

        assert!(build_modality_knn(&tie, 3).is_err());
    }

    fn fused(graph: &SemanticItemGraph, logits: &[f64]) -> Vec<f64> {
        let mut t = Tape::new();
        let l = t.constant(Matrix::from_rows(&[logits])).unwrap();
        let v = fuse_and_normalize(&mut t, graph, l).unwrap();
        t.value(v).data().to_vec()
    }

    #[test]
    fn single_modality_fusion_is_plain_normalization() {
        let f = Matrix::from_rows(&[[1.0, 0.1], [0.9, 0.3], [0.2, 1.0], [0.5, 0.5]]);
        let topo = build_modality_knn(&f, 2).unwrap();
        let one = SemanticItemGraph::new(vec![topo.clone()]).unwrap();
        let two = SemanticItemGraph::new(vec![topo.clone(), topo.clone()]).unwrap();
        let a = fused(&one, &[0.0]);
        let b = fused(&two, &[0.3, 0.3]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        let deg: Vec<f64> = (0..4)
            .map(|r| topo.row_range(r).map(|e| topo.values()[e].abs()).sum())
            .collect();
        for (e, (r, c, v)) in topo.entries().enumerate() {
            assert!((a[e] - v / (deg[r] * deg[c]).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn two_item_chain() {
        let s01 = 0.8;
        let s10 = 0.3;
        let topo = SparseMatrix::from_triplets(2, 2, vec![(0, 1, s01), (1, 0, s10)]).unwrap();
        let g = SemanticItemGraph::new(vec![topo]).unwrap();
        let v = fused(&g, &[0.0]);
        assert!((v[0] - s01 / (s01 * s10).sqrt()).abs() < 1e-15);
        assert!((v[1] - s10 / (s10 * s01).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn fused_values_are_convex_combinations() {
        let a =
            SparseMatrix::from_triplets(3, 3, vec![(0, 1, 0.5), (1, 2, 0.9), (2, 0, 0.1)]).unwrap();
        let b =
            SparseMatrix::from_triplets(3, 3, vec![(0, 1, 0.2), (1, 2, 0.4), (2, 1, 0.7)]).unwrap();
        let g = SemanticItemGraph::new(vec![a, b]).unwrap();
        assert_eq!(g.num_edges(), 4);
        let mut t = Tape::new();
        let l = t.constant(Matrix::from_rows(&[[0.4, -0.2]])).unwrap();
        let fused = fuse_modalities(&mut t, &g, l).unwrap();
        for e in 0..4 {
            let (x, y) = (g.modality_values.get(e, 0), g.modality_values.get(e, 1));
            if x != 0.0 && y != 0.0 {
                let f = t.value(fused).get(e, 0);
                assert!(f >= x.min(y) - 1e-15 && f <= x.max(y) + 1e-15);
            }
        }
    }

    #[test]
    fn empty_union_is_a_structure_error() {
        let empty = SparseMatrix::from_triplets(3, 3, vec![]).unwrap();
        assert!(matches!(
            SemanticItemGraph::new(vec![empty]),
            Err(Error::Structure(_))
        ));
    }
}
