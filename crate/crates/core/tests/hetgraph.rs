mod support;

use std::collections::BTreeSet;

use bhg_core::hetgraph::{build_bhg, edge_count_oracle, GraphConfig, NodeId, NodeType, RelationType, Variant};
use proptest::prelude::*;
use support::{random_conversation, rng, Topology};

fn graph_for(m: &[usize], wf: usize, wb: usize, variant: Variant) -> bhg_core::hetgraph::BHGraph {
    let conv = random_conversation(&mut rng(m.len() as u64), "c", m, 4, 3, 2);
    let cfg = GraphConfig {
        forward_window: wf,
        backward_window: wb,
        variant,
    };
    build_bhg(&conv, 3, &cfg, &[0.5; 3], &[-0.5; 3]).unwrap()
}

fn edge_set(g: &bhg_core::hetgraph::BHGraph) -> BTreeSet<(RelationType, usize, usize)> {
    g.edges.iter().map(|e| (e.relation, e.src.index, e.dst.index)).collect()
}

fn oracle_set(topo: &Topology) -> BTreeSet<(RelationType, usize, usize)> {
    let mut out = BTreeSet::new();
    for rel in RelationType::ALL {
        for s in 0..topo.count(rel.source()) {
            for d in 0..topo.count(rel.target()) {
                if topo.has_edge(rel, s, d) {
                    out.insert((rel, s, d));
                }
            }
        }
    }
    out
}

fn shape() -> impl Strategy<Value = (Vec<usize>, usize, usize)> {
    (prop::collection::vec(0usize..=4, 1..=8), 0usize..=4, 0usize..=4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn edge_count_matches_closed_form((m, wf, wb) in shape()) {
        let g = graph_for(&m, wf, wb, Variant::Full);
        prop_assert_eq!(g.edges.len(), edge_count_oracle(m.len(), &m, wf, wb));
        prop_assert_eq!(g.edges.len(), Topology::new(&m, wf, wb).edge_count());
    }

    #[test]
    fn edges_are_exactly_the_criteria((m, wf, wb) in shape()) {
        let g = graph_for(&m, wf, wb, Variant::Full);
        prop_assert_eq!(edge_set(&g), oracle_set(&Topology::new(&m, wf, wb)));
        // No duplicates.
        prop_assert_eq!(edge_set(&g).len(), g.edges.len());
    }

    #[test]
    fn ablations_remove_exactly_their_relations((m, wf, wb) in shape()) {
        for variant in [Variant::NoForward, Variant::NoBackward, Variant::NoKnowledge] {
            let g = graph_for(&m, wf, wb, variant);
            let mut topo = Topology::new(&m, wf, wb);
            topo.variant = variant;
            prop_assert_eq!(edge_set(&g), oracle_set(&topo));
            prop_assert_eq!(g.node_count(), 3 * m.len() + m.iter().sum::<usize>());
        }
    }

    #[test]
    fn graph_is_bipartite_and_typed((m, wf, wb) in shape()) {
        let g = graph_for(&m, wf, wb, Variant::Full);
        let left = |t: NodeType| matches!(t, NodeType::H | NodeType::K);
        for e in &g.edges {
            prop_assert_eq!(e.src.kind, e.relation.source());
            prop_assert_eq!(e.dst.kind, e.relation.target());
            prop_assert!(left(e.src.kind) != left(e.dst.kind));
            if !left(e.src.kind) {
                prop_assert_eq!(e.dst.kind, NodeType::H);
            }
        }
    }

    #[test]
    fn in_degrees_meet_their_minimums((m, wf, wb) in shape()) {
        let g = graph_for(&m, wf, wb, Variant::Full);
        for i in 0..m.len() {
            prop_assert!(g.incoming(NodeId::new(NodeType::H, i)).len() >= 2);
            prop_assert!(!g.incoming(NodeId::new(NodeType::F, i)).is_empty());
            prop_assert!(!g.incoming(NodeId::new(NodeType::B, i)).is_empty());
        }
        for k in 0..m.iter().sum::<usize>() {
            prop_assert!(g.neighbors_in(NodeId::new(NodeType::K, k)).unwrap().is_empty());
        }
    }

    #[test]
    fn node_store_counts_and_copies((m, wf, wb) in shape()) {
        let g = graph_for(&m, wf, wb, Variant::Full);
        let n = m.len();
        prop_assert_eq!(g.nodes.count(NodeType::H), n);
        prop_assert_eq!(g.nodes.count(NodeType::F), n);
        prop_assert_eq!(g.nodes.count(NodeType::B), n);
        prop_assert_eq!(g.nodes.count(NodeType::K), m.iter().sum::<usize>());
        for i in 0..n {
            prop_assert_eq!(g.nodes.features[NodeType::F.index()].row(i), &[0.5; 3][..]);
            prop_assert_eq!(g.nodes.features[NodeType::B.index()].row(i), &[-0.5; 3][..]);
        }
    }

    #[test]
    fn construction_is_deterministic((m, wf, wb) in shape()) {
        let a = graph_for(&m, wf, wb, Variant::Full);
        let b = graph_for(&m, wf, wb, Variant::Full);
        prop_assert_eq!(a.edges, b.edges);
    }

    #[test]
    fn neighbors_follow_relation_then_insertion_order((m, wf, wb) in shape()) {
        let g = graph_for(&m, wf, wb, Variant::Full);
        for t in [NodeType::H, NodeType::F, NodeType::B] {
            for v in 0..g.nodes.count(t) {
                let ns = g.neighbors_in(NodeId::new(t, v)).unwrap();
                let rels: Vec<RelationType> = ns.iter().map(|n| n.1).collect();
                let mut sorted = rels.clone();
                sorted.sort();
                prop_assert_eq!(&rels, &sorted);
                // Within a relation, sources come in construction order.
                for w in ns.windows(2) {
                    if w[0].1 == w[1].1 {
                        prop_assert!(w[0].0.index < w[1].0.index);
                    }
                }
            }
        }
    }
}

#[test]
fn unknown_node_is_an_error() {
    let g = graph_for(&[1, 1], 1, 1, Variant::Full);
    assert!(g.neighbors_in(NodeId::new(NodeType::H, 2)).is_err());
    assert!(g.neighbors_in(NodeId::new(NodeType::K, 2)).is_err());
}

#[test]
fn past_only_windows_give_single_forward_edges() {
    let m = [1, 0, 2, 1, 0, 3];
    let conv = random_conversation(&mut rng(1), "c", &m, 4, 3, 2);
    let g = build_bhg(&conv, 3, &GraphConfig::past_only(), &[0.0; 3], &[0.0; 3]).unwrap();
    for i in 0..m.len() {
        let fwd: Vec<_> = g
            .edges
            .iter()
            .filter(|e| e.relation == RelationType::Fwd && e.src.index == i)
            .collect();
        assert_eq!(fwd.len(), 1);
        assert_eq!(fwd[0].dst.index, i);
        let bwd = g.edges.iter().filter(|e| e.relation == RelationType::Bwd && e.src.index == i).count();
        assert_eq!(bwd, i + 1);
    }
}

#[test]
fn dump_lists_every_node_and_edge() {
    let g = graph_for(&[2, 1, 2], 1, 2, Variant::Full);
    let dump = serde_json::to_value(g.dump()).unwrap();
    assert_eq!(dump["nodes"].as_array().unwrap().len(), 14);
    assert_eq!(dump["edges"].as_array().unwrap().len(), 27);
}
