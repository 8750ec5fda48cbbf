use crate::data::{ItemId, UserId};

/// Symmetric user–item bipartite adjacency in CSR form with weights
/// `1 / sqrt(deg(a) · deg(b))`. Node ids are users `0..U` followed by items
/// `U..U+I`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseAdjacency {
    num_users: usize,
    num_items: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    weights: Vec<f32>,
    degree: Vec<u32>,
}

impl SparseAdjacency {
    /// Builds from distinct (user, item) edges.
    pub fn from_edges(num_users: usize, num_items: usize, edges: &[(UserId, ItemId)]) -> Self {
        let n = num_users + num_items;
        let mut degree = vec![0u32; n];
        for &(u, i) in edges {
            degree[u as usize] += 1;
            degree[num_users + i as usize] += 1;
        }
        let mut indptr = vec![0usize; n + 1];
        for v in 0..n {
            indptr[v + 1] = indptr[v] + degree[v] as usize;
        }
        let mut fill = indptr.clone();
        let mut indices = vec![0u32; indptr[n]];
        for &(u, i) in edges {
            let (a, b) = (u as usize, num_users + i as usize);
            indices[fill[a]] = b as u32;
            fill[a] += 1;
            indices[fill[b]] = a as u32;
            fill[b] += 1;
        }
        for v in 0..n {
            indices[indptr[v]..indptr[v + 1]].sort_unstable();
        }
        let mut weights = vec![0f32; indices.len()];
        for v in 0..n {
            for e in indptr[v]..indptr[v + 1] {
                let w = indices[e] as usize;
                weights[e] = (1.0 / ((degree[v] as f64) * (degree[w] as f64)).sqrt()) as f32;
            }
        }
        Self {
            num_users,
            num_items,
            indptr,
            indices,
            weights,
            degree,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_edges(&self) -> usize {
        self.indices.len() / 2
    }

    pub fn degree(&self, node: usize) -> u32 {
        self.degree[node]
    }

    /// Neighbours and weights of one node.
    pub fn row(&self, node: usize) -> (&[u32], &[f32]) {
        let r = self.indptr[node]..self.indptr[node + 1];
        (&self.indices[r.clone()], &self.weights[r])
    }

    /// `out = Â · x` for `x: [num_nodes, dim]`.
    pub fn propagate(&self, x: &[f32], dim: usize, out: &mut [f32]) {
        debug_assert_eq!(x.len(), self.num_nodes() * dim);
        debug_assert_eq!(out.len(), x.len());
        for v in 0..self.num_nodes() {
            let dst = &mut out[v * dim..(v + 1) * dim];
            dst.iter_mut().for_each(|o| *o = 0.0);
            let (nbrs, ws) = self.row(v);
            for (&w, &a) in nbrs.iter().zip(ws) {
                let src = &x[w as usize * dim..(w as usize + 1) * dim];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += a * s;
                }
            }
        }
    }
}
