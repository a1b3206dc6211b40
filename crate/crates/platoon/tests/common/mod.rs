//! Generators shared by the integration tests.
#![allow(dead_code)]

use nalgebra::DMatrix;
use platoon::topology::CommTopology;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A directed graph with a spanning tree rooted at a random leader, random
/// extra edges (possibly into the leader) and weights in [0.5, 2].
pub fn random_rooted(rng: &mut ChaCha8Rng, n: usize) -> CommTopology {
    let leader = rng.gen_range(0..n);
    let mut adj = DMatrix::zeros(n, n);
    let mut reached = vec![leader];
    let mut rest: Vec<usize> = (0..n).filter(|&i| i != leader).collect();
    while !rest.is_empty() {
        let v = rest.swap_remove(rng.gen_range(0..rest.len()));
        let src = reached[rng.gen_range(0..reached.len())];
        adj[(v, src)] = rng.gen_range(0.5..2.0);
        reached.push(v);
    }
    for i in 0..n {
        for j in 0..n {
            if i != j && adj[(i, j)] == 0.0 && rng.gen_bool(0.25) {
                adj[(i, j)] = rng.gen_range(0.5..2.0);
            }
        }
    }
    CommTopology::new(adj, leader).expect("tree edges make the graph rooted")
}

/// Rooted topology with `2..=max_n` vehicles.
pub fn rooted(max_n: usize) -> impl Strategy<Value = CommTopology> {
    (2..=max_n, any::<u64>()).prop_map(|(n, seed)| random_rooted(&mut ChaCha8Rng::seed_from_u64(seed), n))
}

/// Rooted topology together with a vehicle index inside it.
pub fn rooted_with_vehicle(max_n: usize) -> impl Strategy<Value = (CommTopology, usize)> {
    rooted(max_n).prop_flat_map(|t| {
        let n = t.n();
        (Just(t), 0..n)
    })
}
