//! Synthetic network generators: a rectangular grid for experiments and
//! small random networks (acyclic by construction, optionally with back
//! edges) for oracle-based testing.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::network::{LinkRecord, Network};

/// Rectangular grid of `rows x cols` nodes with links in both directions
/// between 4-neighbours. Travel times mimic a street hierarchy: a seeded
/// mix of fast (around 0.6) and slow (around 2.4) links, so routes
/// concentrate instead of spreading over near-equal alternatives. Link
/// attributes: `travel_time`, `const` (1 for every link). Node coordinates
/// are emitted, so turn dummies are available.
pub fn grid_network(rows: usize, cols: usize, seed: u64) -> Network {
    assert!(rows >= 2 && cols >= 2, "grid needs at least 2x2 nodes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let node_name = |r: usize, c: usize| format!("n{r}_{c}");
    let mut names = Vec::new();
    let mut coords = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            names.push(node_name(r, c));
            coords.push((c as f64, r as f64));
        }
    }
    let mut links = Vec::new();
    let mut add = |from: (usize, usize), to: (usize, usize), rng: &mut ChaCha8Rng| {
        let base = if rng.random::<f64>() < 0.5 { 0.6 } else { 2.4 };
        let tt = base * (0.8 + 0.4 * rng.random::<f64>());
        links.push(LinkRecord {
            name: format!("{}-{}", node_name(from.0, from.1), node_name(to.0, to.1)),
            from: node_name(from.0, from.1),
            to: node_name(to.0, to.1),
            attrs: vec![tt, 1.0],
        });
    };
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                add((r, c), (r, c + 1), &mut rng);
                add((r, c + 1), (r, c), &mut rng);
            }
            if r + 1 < rows {
                add((r, c), (r + 1, c), &mut rng);
                add((r + 1, c), (r, c), &mut rng);
            }
        }
    }
    Network::build(
        links,
        vec!["travel_time".into(), "const".into()],
        Some((names, coords)),
        None,
    )
    .expect("grid construction cannot fail")
}

/// A small random network whose *link graph* is acyclic: nodes are ordered
/// and every link goes from a lower to a strictly higher node, so successor
/// links always start deeper in the order. A chain through all nodes
/// guarantees the last node is reachable from every link.
///
/// Returns the network and the destination node (the last one). Attributes:
/// `travel_time` in [0.5, 2], `const` = 1.
pub fn random_acyclic_network(n_links: usize, seed: u64) -> (Network, crate::network::NodeId) {
    assert!(n_links >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Node count scales with the link budget so real branching exists
    // (too few nodes would make every choice set a singleton).
    let max_nodes = (n_links + 1).min(7).max(3);
    let min_nodes = (n_links / 2).clamp(3, max_nodes);
    let n_nodes = rng.random_range(min_nodes..=max_nodes);
    let node = |i: usize| format!("v{i}");
    let mut links = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for i in 0..n_nodes - 1 {
        links.push((i, i + 1));
        seen.insert((i, i + 1));
    }
    let mut guard = 0;
    while links.len() < n_links && guard < 10_000 {
        guard += 1;
        let i = rng.random_range(0..n_nodes - 1);
        let j = rng.random_range(i + 1..n_nodes);
        if seen.insert((i, j)) {
            links.push((i, j));
        }
    }
    let recs = links
        .iter()
        .enumerate()
        .map(|(idx, &(i, j))| LinkRecord {
            name: format!("e{idx}"),
            from: node(i),
            to: node(j),
            attrs: vec![0.5 + 1.5 * rng.random::<f64>(), 1.0],
        })
        .collect();
    let names: Vec<String> = (0..n_nodes).map(node).collect();
    let net = Network::build(
        recs,
        vec!["travel_time".into(), "const".into()],
        Some((names, (0..n_nodes).map(|i| (i as f64, 0.0)).collect())),
        None,
    )
    .expect("random acyclic construction cannot fail");
    let dest = crate::network::NodeId(n_nodes - 1);
    (net, dest)
}

/// Random acyclic network plus a few backward links, producing cycles in the
/// link graph. Destination stays the last node.
pub fn random_cyclic_network(
    n_links: usize,
    n_back: usize,
    seed: u64,
) -> (Network, crate::network::NodeId) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let (base, dest) = random_acyclic_network(n_links, seed);
    let n_nodes = base.n_nodes();
    let mut recs: Vec<LinkRecord> = (0..base.n_links())
        .map(|k| LinkRecord {
            name: base.link_names[k].clone(),
            from: base.node_names[base.from_node[k].0].clone(),
            to: base.node_names[base.to_node[k].0].clone(),
            attrs: base.link_attrs(crate::network::LinkId(k)).to_vec(),
        })
        .collect();
    let mut added = 0;
    let mut guard = 0;
    while added < n_back && guard < 1000 {
        guard += 1;
        let j = rng.random_range(1..n_nodes);
        let i = rng.random_range(0..j);
        let name = format!("b{added}");
        if recs.iter().any(|r| r.from == format!("v{j}") && r.to == format!("v{i}")) {
            continue;
        }
        recs.push(LinkRecord {
            name,
            from: format!("v{j}"),
            to: format!("v{i}"),
            attrs: vec![0.5 + 1.5 * rng.random::<f64>(), 1.0],
        });
        added += 1;
    }
    let names: Vec<String> = (0..n_nodes).map(|i| format!("v{i}")).collect();
    let net = Network::build(
        recs,
        vec!["travel_time".into(), "const".into()],
        Some((names, (0..n_nodes).map(|i| (i as f64, 0.0)).collect())),
        None,
    )
    .expect("random cyclic construction cannot fail");
    (net, dest)
}

/// Shared test fixture: the 5-link diamond. Link 0 is the origin link
/// s->o, links 1/2 branch o->a / o->b, links 3/4 merge a->t / b->t, and the
/// destination is t. `tt` gives the travel time of each of the five links.
pub fn diamond_network(tt: [f64; 5]) -> Arc<Network> {
    diamond_network_with(
        vec!["travel_time".into()],
        (0..5).map(|i| vec![tt[i]]).collect(),
    )
}

/// Diamond with arbitrary per-link attribute rows (one row per link, in the
/// order s-o, o-a, o-b, a-t, b-t).
pub fn diamond_network_with(attr_names: Vec<String>, rows: Vec<Vec<f64>>) -> Arc<Network> {
    assert_eq!(rows.len(), 5);
    let names = ["s-o", "o-a", "o-b", "a-t", "b-t"];
    let ends = [("s", "o"), ("o", "a"), ("o", "b"), ("a", "t"), ("b", "t")];
    let links = (0..5)
        .map(|i| LinkRecord {
            name: names[i].into(),
            from: ends[i].0.into(),
            to: ends[i].1.into(),
            attrs: rows[i].clone(),
        })
        .collect();
    Arc::new(
        Network::build(links, attr_names, None, None).expect("diamond construction cannot fail"),
    )
}
