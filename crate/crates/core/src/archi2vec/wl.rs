//! Weisfeiler-Lehman subtree tokens over node attributes.

use std::collections::BTreeMap;

use super::graph::ArchGraph;
use crate::io::stable_hash64;

/// Relabel key for one node: its own token followed by its sorted
/// predecessor tokens.
pub fn relabel_key(own: &str, neighbors: &[&str]) -> String {
    let mut sorted = neighbors.to_vec();
    sorted.sort_unstable();
    format!("{own}({})", sorted.join(","))
}

pub fn hash_token(key: &str) -> String {
    format!("{:016x}", stable_hash64(key))
}

/// Token multiset over iterations `0..=iterations`, sorted. Iteration 0
/// contributes each node's atom; iteration t hashes the node's previous
/// token together with its in-neighbors' previous tokens.
pub fn wl_relabel(g: &ArchGraph, iterations: usize) -> Vec<String> {
    let preds = g.in_neighbors();
    let mut current: Vec<String> = g.nodes.iter().map(|n| n.atom.clone()).collect();
    let mut tokens = current.clone();
    for _ in 0..iterations {
        let next: Vec<String> = (0..g.nodes.len())
            .map(|i| {
                let nbrs: Vec<&str> = preds[i].iter().map(|&j| current[j].as_str()).collect();
                hash_token(&relabel_key(&current[i], &nbrs))
            })
            .collect();
        tokens.extend(next.iter().cloned());
        current = next;
    }
    tokens.sort_unstable();
    tokens
}

/// Token counts, the graph's "document".
pub fn wl_document(g: &ArchGraph, iterations: usize) -> BTreeMap<String, usize> {
    let mut doc = BTreeMap::new();
    for t in wl_relabel(g, iterations) {
        *doc.entry(t).or_insert(0) += 1;
    }
    doc
}
