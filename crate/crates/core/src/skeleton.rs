//! The human skeleton graph, its normalized adjacency, and the
//! root / centripetal / centrifugal partition of each joint's neighborhood.

use std::collections::{BTreeSet, VecDeque};
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COCO_JOINTS: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

pub const COCO_EDGES: [(usize, usize); 19] = [
    (0, 1),
    (0, 2),
    (1, 2),
    (1, 3),
    (2, 4),
    (3, 5),
    (4, 6),
    (5, 6),
    (5, 7),
    (7, 9),
    (6, 8),
    (8, 10),
    (5, 11),
    (6, 12),
    (11, 12),
    (11, 13),
    (13, 15),
    (12, 14),
    (14, 16),
];

pub const COCO_LEFT_RIGHT: [(usize, usize); 8] = [
    (1, 2),
    (3, 4),
    (5, 6),
    (7, 8),
    (9, 10),
    (11, 12),
    (13, 14),
    (15, 16),
];

/// Dense square matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        SquareMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidTopology(format!(
                "adjacency must be square, got {} rows of lengths {:?}",
                n,
                rows.iter().map(Vec::len).collect::<Vec<_>>()
            )));
        }
        Ok(SquareMatrix {
            n,
            data: rows.concat(),
        })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self[(i, j)] == self[(j, i)]))
    }

    pub fn add(&self, other: &SquareMatrix) -> SquareMatrix {
        SquareMatrix {
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    /// `P A P^T` where `perm[old] = new`.
    pub fn permuted(&self, perm: &[usize]) -> SquareMatrix {
        let mut out = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                out[(perm[i], perm[j])] = self[(i, j)];
            }
        }
        out
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data.chunks(self.n.max(1)).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.n).map(|j| (0..self.n).map(|i| self[(i, j)]).sum()).collect()
    }
}

impl Index<(usize, usize)> for SquareMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.n + j]
    }
}

impl IndexMut<(usize, usize)> for SquareMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.n + j]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonTopology {
    pub joint_names: Vec<String>,
    pub edges: Vec<(usize, usize)>,
    pub left_right_pairs: Vec<(usize, usize)>,
    pub center_joints: Vec<usize>,
}

impl SkeletonTopology {
    /// Validates joint indices, edge uniqueness and the left/right pairing.
    /// Connectivity is checked where it matters, by [`spatial_partition`].
    pub fn new(
        joint_names: Vec<String>,
        edges: Vec<(usize, usize)>,
        left_right_pairs: Vec<(usize, usize)>,
        center_joints: Vec<usize>,
    ) -> Result<Self> {
        let n = joint_names.len();
        let mut seen = BTreeSet::new();
        for &(a, b) in &edges {
            if a >= n || b >= n {
                return Err(Error::InvalidTopology(format!(
                    "edge ({a}, {b}) out of range for {n} joints"
                )));
            }
            if a == b {
                return Err(Error::InvalidTopology(format!("self edge on joint {a}")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::InvalidTopology(format!("duplicate edge ({a}, {b})")));
            }
        }
        let mut lateral = BTreeSet::new();
        for &(l, r) in &left_right_pairs {
            if l >= n || r >= n || l == r || !lateral.insert(l) || !lateral.insert(r) {
                return Err(Error::InvalidTopology(format!(
                    "left/right pair ({l}, {r}) is not part of an involution"
                )));
            }
        }
        if let Some(&c) = center_joints.iter().find(|&&c| c >= n) {
            return Err(Error::InvalidTopology(format!("center joint {c} out of range")));
        }
        Ok(SkeletonTopology {
            joint_names,
            edges,
            left_right_pairs,
            center_joints,
        })
    }

    /// The 17-keypoint COCO skeleton with 19 bones, centered on the hips.
    pub fn coco17() -> Self {
        SkeletonTopology::new(
            COCO_JOINTS.iter().map(|s| s.to_string()).collect(),
            COCO_EDGES.to_vec(),
            COCO_LEFT_RIGHT.to_vec(),
            vec![11, 12],
        )
        .expect("COCO-17 topology is valid")
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|j| j == name)
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.iter().any(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a))
    }

    /// Joint index after swapping sides; central joints map to themselves.
    pub fn mirror_map(&self) -> Vec<usize> {
        let mut map: Vec<usize> = (0..self.num_joints()).collect();
        for &(l, r) in &self.left_right_pairs {
            map[l] = r;
            map[r] = l;
        }
        map
    }

    /// Binary symmetric adjacency without self loops.
    pub fn adjacency(&self) -> SquareMatrix {
        let mut a = SquareMatrix::zeros(self.num_joints());
        for &(i, j) in &self.edges {
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
        }
        a
    }

    fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_joints()];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    /// Minimum hop count from every joint to the nearest center joint.
    pub fn hop_distances(&self) -> Vec<Option<usize>> {
        let adj = self.neighbors();
        let mut hops = vec![None; self.num_joints()];
        let mut queue = VecDeque::new();
        for &c in &self.center_joints {
            if hops[c].is_none() {
                hops[c] = Some(0);
                queue.push_back(c);
            }
        }
        while let Some(v) = queue.pop_front() {
            let d = hops[v].unwrap_or(0);
            for &w in &adj[v] {
                if hops[w].is_none() {
                    hops[w] = Some(d + 1);
                    queue.push_back(w);
                }
            }
        }
        hops
    }

    pub fn is_connected(&self) -> bool {
        let n = self.num_joints();
        if n == 0 {
            return true;
        }
        let adj = self.neighbors();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Relabels joints with `perm[old] = new`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_joints();
        let mut names = vec![String::new(); n];
        for (old, &new) in perm.iter().enumerate() {
            names[new] = self.joint_names[old].clone();
        }
        SkeletonTopology::new(
            names,
            self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect(),
            self.left_right_pairs
                .iter()
                .map(|&(a, b)| (perm[a], perm[b]))
                .collect(),
            self.center_joints.iter().map(|&c| perm[c]).collect(),
        )
    }

    /// `{"joints": [...], "edges": [[i, j], ...]}` for inspection.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "joints": self.joint_names,
            "edges": self.edges.iter().map(|&(a, b)| [a, b]).collect::<Vec<_>>(),
        })
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(a: &SquareMatrix) -> Result<SquareMatrix> {
    if !a.is_symmetric() {
        return Err(Error::InvalidTopology("adjacency is not symmetric".into()));
    }
    if a.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidTopology("adjacency entries must be 0 or 1".into()));
    }
    Ok(normalize_mask(&a.add(&SquareMatrix::identity(a.size()))))
}

/// Degree-normalizes a (possibly directed) mask: entry `(i, j)` becomes
/// `m_ij / sqrt(r_i) / sqrt(c_j)` with `r` the row sums and `c` the column sums.
/// For symmetric masks this is `D^{-1/2} M D^{-1/2}`; zero rows stay zero.
pub fn normalize_mask(mask: &SquareMatrix) -> SquareMatrix {
    let rows = mask.row_sums();
    let cols = mask.col_sums();
    let n = mask.size();
    let mut out = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let m = mask[(i, j)];
            if m != 0.0 {
                out[(i, j)] = m / (rows[i].sqrt() * cols[j].sqrt());
            }
        }
    }
    out
}

/// Normalized adjacency operators used by the graph convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencySet {
    /// Normalized `A + I`.
    pub full: SquareMatrix,
    /// One normalized operator per partition.
    pub partitions: Vec<SquareMatrix>,
    /// Binary masks; they sum to `A + I`.
    pub masks: Vec<SquareMatrix>,
}

impl AdjacencySet {
    pub fn num_joints(&self) -> usize {
        self.full.size()
    }

    pub fn num_partitions(&self) -> usize {
        self.partitions.len()
    }

    /// Single-operator form: one partition equal to the normalized `A + I`.
    pub fn uniform(topology: &SkeletonTopology) -> Result<Self> {
        let a = topology.adjacency();
        let full = normalize_adjacency(&a)?;
        Ok(AdjacencySet {
            partitions: vec![full.clone()],
            masks: vec![a.add(&SquareMatrix::identity(a.size()))],
            full,
        })
    }

    /// Builds the operator set for `num_partitions` of 1 (uniform) or 3 (spatial).
    pub fn build(topology: &SkeletonTopology, num_partitions: usize) -> Result<Self> {
        match num_partitions {
            1 => Self::uniform(topology),
            3 => spatial_partition(topology),
            k => Err(Error::InvalidTopology(format!(
                "unsupported partition count {k}, expected 1 or 3"
            ))),
        }
    }
}

/// Splits `A + I` into root (self), centripetal (neighbor closer to the
/// center) and centrifugal (all other neighbors) masks and normalizes each.
pub fn spatial_partition(topology: &SkeletonTopology) -> Result<AdjacencySet> {
    if topology.center_joints.is_empty() {
        return Err(Error::InvalidTopology("no center joints".into()));
    }
    if !topology.is_connected() {
        return Err(Error::InvalidTopology("skeleton graph is disconnected".into()));
    }
    let n = topology.num_joints();
    let hops: Vec<usize> = topology
        .hop_distances()
        .into_iter()
        .map(|h| h.expect("connected graph reaches every joint"))
        .collect();
    let a = topology.adjacency();
    let mut masks = vec![SquareMatrix::zeros(n), SquareMatrix::zeros(n), SquareMatrix::zeros(n)];
    for i in 0..n {
        masks[0][(i, i)] = 1.0;
        for j in 0..n {
            if a[(i, j)] == 0.0 {
                continue;
            }
            let k = if hops[j] < hops[i] { 1 } else { 2 };
            masks[k][(i, j)] = 1.0;
        }
    }
    Ok(AdjacencySet {
        full: normalize_adjacency(&a)?,
        partitions: masks.iter().map(normalize_mask).collect(),
        masks,
    })
}
