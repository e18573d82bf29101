use crate::knn::KdTree;
use crate::spline::PointCloud;
use crate::{Error, Result};

/// Symmetrised k-nearest-neighbour adjacency in CSR form. Neighbour lists
/// are sorted ascending and never contain the node itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnGraph {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl KnnGraph {
    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Number of directed edges (each undirected edge counted twice).
    pub fn edge_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Target node of every directed edge, grouped by source node.
    pub fn targets(&self) -> &[usize] {
        &self.neighbors
    }

    /// Sorted `(a, b)` edge list.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.node_count())
            .flat_map(|a| self.neighbors(a).iter().map(move |&b| (a, b)))
            .collect()
    }
}

/// Exact k nearest neighbours (ties to the lower index), then symmetrised.
pub fn build_knn_graph(cloud: &PointCloud, k: usize) -> Result<KnnGraph> {
    let n = cloud.len();
    if k == 0 || n <= k {
        return Err(Error::config(format!(
            "knn graph needs |cloud| > k >= 1 (|cloud|={n}, k={k})"
        )));
    }
    let tree = KdTree::new(cloud.points());
    let mut lists: Vec<Vec<usize>> = vec![Vec::with_capacity(k + 4); n];
    for (i, &p) in cloud.points().iter().enumerate() {
        for (j, _) in tree.knn(p, k, Some(i)) {
            lists[i].push(j);
            lists[j].push(i);
        }
    }
    let mut offsets = Vec::with_capacity(n + 1);
    let mut neighbors = Vec::with_capacity(n * (k + 4));
    offsets.push(0);
    for mut l in lists {
        l.sort_unstable();
        l.dedup();
        neighbors.extend(l);
        offsets.push(neighbors.len());
    }
    Ok(KnnGraph { offsets, neighbors })
}
