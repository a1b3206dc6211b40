//! Communication graphs and the Laplacian-derived matrices used by the
//! controller and the stability analysis.
//!
//! Weights follow the receiver-first convention: `a[(i, j)] > 0` means vehicle
//! `i` receives vehicle `j`'s state. Information therefore flows along the edge
//! `j -> i`, and a leader is a valid root when every vehicle can be reached from
//! it by following those edges.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("invalid topology: {0}")]
    Invalid(String),
    #[error("assumption violated: {0}")]
    AssumptionViolated(String),
}

/// A weighted directed communication graph with a designated leader.
///
/// Construction enforces zero diagonal, non-negative finite weights and a
/// spanning tree rooted at the leader.
#[derive(Debug, Clone, PartialEq)]
pub struct CommTopology {
    adjacency: DMatrix<f64>,
    leader: usize,
}

impl CommTopology {
    pub fn new(adjacency: DMatrix<f64>, leader: usize) -> Result<Self, TopologyError> {
        check_structure(&adjacency)?;
        let n = adjacency.nrows();
        if leader >= n {
            return Err(TopologyError::Invalid(format!(
                "leader index {leader} out of range for {n} vehicles"
            )));
        }
        if !has_rooted_spanning_tree(&adjacency, leader) {
            return Err(TopologyError::AssumptionViolated(format!(
                "no spanning tree rooted at vehicle {}",
                leader + 1
            )));
        }
        Ok(Self { adjacency, leader })
    }

    /// Builds a topology from row-major adjacency rows, as stored in scenario files.
    pub fn from_rows(rows: &[Vec<f64>], leader: usize) -> Result<Self, TopologyError> {
        let n = rows.len();
        if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(TopologyError::Invalid(format!(
                "adjacency row {i} has {} entries, expected {n}",
                row.len()
            )));
        }
        let adjacency = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
        Self::new(adjacency, leader)
    }

    /// Directed edges given as `(source, receiver)` pairs with unit weight.
    pub fn from_edges(n: usize, edges: &[(usize, usize)], leader: usize) -> Result<Self, TopologyError> {
        let mut adjacency = DMatrix::zeros(n, n);
        for &(src, dst) in edges {
            if src >= n || dst >= n {
                return Err(TopologyError::Invalid(format!(
                    "edge {src}->{dst} out of range for {n} vehicles"
                )));
            }
            adjacency[(dst, src)] = 1.0;
        }
        Self::new(adjacency, leader)
    }

    pub fn n(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn leader(&self) -> usize {
        self.leader
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    pub fn weight(&self, receiver: usize, source: usize) -> f64 {
        self.adjacency[(receiver, source)]
    }

    /// True when some vehicle receives `vehicle`'s state.
    pub fn transmits(&self, vehicle: usize) -> bool {
        self.adjacency.column(vehicle).iter().any(|&w| w > 0.0)
    }

    pub fn laplacian(&self) -> DMatrix<f64> {
        laplacian(&self.adjacency)
    }

    pub fn has_rooted_spanning_tree(&self, root: usize) -> bool {
        has_rooted_spanning_tree(&self.adjacency, root)
    }

    /// Stops `victim` from transmitting. Its incoming links are kept.
    ///
    /// Fails when the victim is the leader (the graph would lose its root) or
    /// when some other vehicle only heard about the leader through the victim.
    pub fn isolate(&self, victim: usize) -> Result<Self, TopologyError> {
        if victim == self.leader {
            return Err(TopologyError::AssumptionViolated(format!(
                "vehicle {} is the only root; elect a new leader before isolating it",
                victim + 1
            )));
        }
        self.isolate_and_reroot(victim, self.leader)
    }

    /// Stops `victim` from transmitting and makes `new_leader` the root.
    pub fn isolate_and_reroot(&self, victim: usize, new_leader: usize) -> Result<Self, TopologyError> {
        let n = self.n();
        if victim >= n || new_leader >= n {
            return Err(TopologyError::Invalid("vehicle index out of range".into()));
        }
        if victim == new_leader {
            return Err(TopologyError::Invalid(
                "the isolated vehicle cannot lead the platoon".into(),
            ));
        }
        let mut adjacency = self.adjacency.clone();
        adjacency.column_mut(victim).fill(0.0);
        Self::new(adjacency, new_leader)
    }
}

fn check_structure(adjacency: &DMatrix<f64>) -> Result<(), TopologyError> {
    let (rows, cols) = adjacency.shape();
    if rows != cols {
        return Err(TopologyError::Invalid(format!("adjacency is {rows}x{cols}, expected square")));
    }
    if rows < 2 {
        return Err(TopologyError::Invalid("a platoon needs at least two vehicles".into()));
    }
    for i in 0..rows {
        if adjacency[(i, i)] != 0.0 {
            return Err(TopologyError::Invalid(format!("self-loop on vehicle {}", i + 1)));
        }
        for j in 0..cols {
            let w = adjacency[(i, j)];
            if !w.is_finite() || w < 0.0 {
                return Err(TopologyError::Invalid(format!(
                    "weight a[{}][{}] = {w} must be finite and non-negative",
                    i + 1,
                    j + 1
                )));
            }
        }
    }
    Ok(())
}

/// Degree-minus-adjacency: `L[i][i] = sum_j a_ij`, `L[i][j] = -a_ij`.
pub fn laplacian(adjacency: &DMatrix<f64>) -> DMatrix<f64> {
    let n = adjacency.nrows();
    let mut l = -adjacency.clone();
    for i in 0..n {
        l[(i, i)] = adjacency.row(i).sum() - adjacency[(i, i)];
    }
    l
}

/// Breadth-first reachability from `root` along information flow.
pub fn has_rooted_spanning_tree(adjacency: &DMatrix<f64>, root: usize) -> bool {
    reachable_from(adjacency, root).iter().all(|&r| r)
}

pub(crate) fn reachable_from(adjacency: &DMatrix<f64>, root: usize) -> Vec<bool> {
    let n = adjacency.nrows();
    let mut seen = vec![false; n];
    if root >= n {
        return seen;
    }
    seen[root] = true;
    let mut queue = VecDeque::from([root]);
    while let Some(src) = queue.pop_front() {
        for dst in 0..n {
            if !seen[dst] && adjacency[(dst, src)] > 0.0 {
                seen[dst] = true;
                queue.push_back(dst);
            }
        }
    }
    seen
}

/// The Laplacian family for one operating mode.
///
/// `l_hat` keeps every term the controller evaluates with current data, and
/// `g = l - l_hat` collects the terms evaluated with delayed data. When the
/// victim's outgoing links are delayed, `l_hat` is `l` with the victim's
/// off-diagonal column removed, so its rows no longer sum to zero while
/// `l_hat + g = l` still does.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianFamily {
    pub l: DMatrix<f64>,
    pub l_hat: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub q_red: DMatrix<f64>,
    pub w_red: DMatrix<f64>,
}

impl LaplacianFamily {
    /// No delayed links: `l_hat = l`, `g = 0`.
    pub fn nominal(topology: &CommTopology) -> Self {
        let l = topology.laplacian();
        let g = DMatrix::zeros(l.nrows(), l.ncols());
        Self::from_parts(l.clone(), l, g, topology.leader())
    }

    /// All links carrying `victim`'s state are delayed.
    pub fn attacked(topology: &CommTopology, victim: usize) -> Self {
        let l = topology.laplacian();
        let mut l_hat = l.clone();
        for i in 0..l.nrows() {
            if i != victim {
                l_hat[(i, victim)] = 0.0;
            }
        }
        let g = &l - &l_hat;
        Self::from_parts(l, l_hat, g, topology.leader())
    }

    fn from_parts(l: DMatrix<f64>, l_hat: DMatrix<f64>, g: DMatrix<f64>, leader: usize) -> Self {
        let (q_red, w_red) = reduce(&l_hat, &g, leader);
        Self { l, l_hat, g, q_red, w_red }
    }
}

/// Removes the leader from the error dynamics.
///
/// `Q[i][j] = L_hat[i][j] - L_hat[leader][j]` and
/// `W[i][j] = G[i][j] - G[leader][j]`, with `i, j` ranging over non-leader
/// vehicles in increasing order.
pub fn reduce(l_hat: &DMatrix<f64>, g: &DMatrix<f64>, leader: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let followers = followers_of(l_hat.nrows(), leader);
    let m = followers.len();
    let q = DMatrix::from_fn(m, m, |a, b| {
        let (i, j) = (followers[a], followers[b]);
        l_hat[(i, j)] - l_hat[(leader, j)]
    });
    let w = DMatrix::from_fn(m, m, |a, b| {
        let (i, j) = (followers[a], followers[b]);
        g[(i, j)] - g[(leader, j)]
    });
    (q, w)
}

/// Non-leader vehicle indices in increasing order.
pub fn followers_of(n: usize, leader: usize) -> Vec<usize> {
    (0..n).filter(|&i| i != leader).collect()
}

/// A named graph snapshot together with the formation it should hold.
///
/// `spacings[i]` is the desired `s_i - s_leader`; the leader's own entry is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyPhase {
    pub id: String,
    pub topology: CommTopology,
    pub spacings: Vec<f64>,
}

impl TopologyPhase {
    pub fn new(id: impl Into<String>, topology: CommTopology, spacings: Vec<f64>) -> Result<Self, TopologyError> {
        let id = id.into();
        if spacings.len() != topology.n() {
            return Err(TopologyError::Invalid(format!(
                "phase '{id}': {} spacings for {} vehicles",
                spacings.len(),
                topology.n()
            )));
        }
        if spacings[topology.leader()] != 0.0 {
            return Err(TopologyError::Invalid(format!(
                "phase '{id}': leader spacing must be 0"
            )));
        }
        if spacings.iter().any(|d| !d.is_finite()) {
            return Err(TopologyError::Invalid(format!("phase '{id}': non-finite spacing")));
        }
        Ok(Self { id, topology, spacings })
    }

    pub fn leader(&self) -> usize {
        self.topology.leader()
    }
}
