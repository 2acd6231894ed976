//! Joint graphs with spatial partitioning into root / centripetal / centrifugal sets.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// NTU RGB+D joint count.
pub const NTU_JOINTS: usize = 25;

/// Zero-based index of the NTU "middle of the spine" joint.
pub const NTU_CENTER: usize = 1;

/// Bone links of the NTU 25-joint skeleton, zero-based.
pub const NTU_EDGES: [(usize, usize); 24] = [
    (0, 1),
    (1, 20),
    (2, 20),
    (3, 2),
    (4, 20),
    (5, 4),
    (6, 5),
    (7, 6),
    (8, 20),
    (9, 8),
    (10, 9),
    (11, 10),
    (12, 0),
    (13, 12),
    (14, 13),
    (15, 14),
    (16, 0),
    (17, 16),
    (18, 17),
    (19, 18),
    (21, 22),
    (22, 7),
    (23, 24),
    (24, 11),
];

pub const ROOT: usize = 0;
pub const CENTRIPETAL: usize = 1;
pub const CENTRIFUGAL: usize = 2;

/// A skeleton graph and its partitioned normalized adjacency.
///
/// `partitions[p]` is indexed `[v, w]`: the contribution of joint `v` to output joint `w`.
#[derive(Clone, Debug)]
pub struct SkeletonGraph {
    num_joints: usize,
    edges: Vec<(usize, usize)>,
    center: usize,
    parents: Option<Vec<usize>>,
    partitions: Vec<Tensor<f64>>,
}

impl SkeletonGraph {
    pub fn ntu() -> Self {
        normalize_adjacency(NTU_JOINTS, &NTU_EDGES, NTU_CENTER).expect("NTU graph is valid")
    }

    /// Path graph `0 - 1 - ... - (v-1)` centered at its middle joint.
    pub fn chain(v: usize) -> Result<Self> {
        let edges: Vec<_> = (1..v).map(|i| (i - 1, i)).collect();
        normalize_adjacency(v, &edges, v / 2)
    }

    /// A graph given directly by its partition matrices; it has no parent map.
    pub fn from_partitions(partitions: Vec<Tensor<f64>>) -> Result<Self> {
        let v = partitions.first().map(|p| p.shape()[0]).unwrap_or(0);
        if partitions.iter().any(|p| p.shape() != [v, v]) {
            return Err(Error::invalid("SkeletonGraph", "partition matrices must all be V×V"));
        }
        Ok(SkeletonGraph {
            num_joints: v,
            edges: Vec::new(),
            center: 0,
            parents: None,
            partitions,
        })
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    pub fn num_partitions(&self) -> usize {
        self.partitions.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn center(&self) -> usize {
        self.center
    }

    pub fn partitions(&self) -> &[Tensor<f64>] {
        &self.partitions
    }

    pub fn parents(&self) -> Option<&[usize]> {
        self.parents.as_deref()
    }

    /// Sum of the partition matrices: the normalized `A + I`.
    pub fn normalized_full(&self) -> Tensor<f64> {
        let v = self.num_joints;
        let mut out = Tensor::zeros(vec![v, v]);
        for p in &self.partitions {
            for (o, &x) in out.data_mut().iter_mut().zip(p.data()) {
                *o += x;
            }
        }
        out
    }

    /// Relabels joints so that new joint `i` is old joint `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let v = self.num_joints;
        let mut inv = vec![usize::MAX; v];
        for (i, &p) in perm.iter().enumerate() {
            if p >= v || inv[p] != usize::MAX {
                return Err(Error::invalid("SkeletonGraph::permuted", format!("{perm:?} is not a permutation of {v}")));
            }
            inv[p] = i;
        }
        if perm.len() != v {
            return Err(Error::invalid("SkeletonGraph::permuted", "permutation length differs from joint count"));
        }
        let partitions = self
            .partitions
            .iter()
            .map(|a| Tensor::from_fn(vec![v, v], |ix| a.at(&[perm[ix[0]], perm[ix[1]]])))
            .collect();
        Ok(SkeletonGraph {
            num_joints: v,
            edges: self.edges.iter().map(|&(a, b)| (inv[a], inv[b])).collect(),
            center: inv[self.center],
            parents: self.parents.as_ref().map(|ps| (0..v).map(|i| inv[ps[perm[i]]]).collect()),
            partitions,
        })
    }
}

/// Builds `Λ^{-1/2}(A + I)Λ^{-1/2}` and splits it by hop distance to `center`.
///
/// For output joint `w` and neighbor `v`: equal distance goes to the root set
/// (this includes the self loop), a neighbor closer to the center to the
/// centripetal set, and a farther one to the centrifugal set. Joints not
/// reachable from the center only keep their self loop, in the root set.
pub fn normalize_adjacency(num_joints: usize, edges: &[(usize, usize)], center: usize) -> Result<SkeletonGraph> {
    let v = num_joints;
    if center >= v {
        return Err(Error::invalid(
            "normalize_adjacency",
            format!("center joint {center} out of range for {v} joints"),
        ));
    }
    if let Some(&(a, b)) = edges.iter().find(|&&(a, b)| a >= v || b >= v) {
        return Err(Error::invalid(
            "normalize_adjacency",
            format!("edge ({a}, {b}) out of range for {v} joints"),
        ));
    }
    let mut adj = vec![vec![false; v]; v];
    for i in 0..v {
        adj[i][i] = true;
    }
    for &(a, b) in edges {
        adj[a][b] = true;
        adj[b][a] = true;
    }
    let deg: Vec<f64> = adj.iter().map(|row| row.iter().filter(|&&e| e).count() as f64).collect();

    // hop distance and BFS tree from the center
    let mut hop: Vec<Option<usize>> = vec![None; v];
    let mut parent = vec![usize::MAX; v];
    hop[center] = Some(0);
    parent[center] = center;
    let mut queue = VecDeque::from([center]);
    while let Some(u) = queue.pop_front() {
        for w in 0..v {
            if adj[u][w] && hop[w].is_none() {
                hop[w] = Some(hop[u].unwrap() + 1);
                parent[w] = u;
                queue.push_back(w);
            }
        }
    }

    let mut partitions = vec![Tensor::<f64>::zeros(vec![v, v]); 3];
    for a in 0..v {
        for b in 0..v {
            if !adj[a][b] {
                continue;
            }
            let value = 1.0 / (deg[a] * deg[b]).sqrt();
            // a is the contributing joint, b the output joint
            let p = match (hop[a], hop[b]) {
                (Some(ha), Some(hb)) if ha < hb => CENTRIPETAL,
                (Some(ha), Some(hb)) if ha > hb => CENTRIFUGAL,
                _ => ROOT,
            };
            partitions[p].set(&[a, b], value);
        }
    }
    let parents = parent.iter().all(|&p| p != usize::MAX).then_some(parent);
    Ok(SkeletonGraph {
        num_joints: v,
        edges: edges.to_vec(),
        center,
        parents,
        partitions,
    })
}
