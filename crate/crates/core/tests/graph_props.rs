use proptest::prelude::*;
use sgedit::graph::{apply_edits, validate_graph, BBox, Direction, NewEdge, ObjectNode, RelationEdge, VocabSizes};
use sgedit::{EditOp, SceneGraph};

const VOCAB: VocabSizes = VocabSizes {
    objects: 12,
    predicates: 4,
};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..0.9f64, 0.0..0.9f64, 0.01..0.5f64, 0.01..0.5f64)
        .prop_map(|(t, l, h, w)| BBox::new(t, l, (t + h).min(1.0), (l + w).min(1.0)))
}

fn node() -> impl Strategy<Value = ObjectNode> {
    (
        0..VOCAB.objects,
        proptest::option::weighted(0.9, bbox()),
        proptest::option::of(proptest::collection::vec(-10.0f32..10.0, 4)),
        any::<(bool, bool)>(),
        "[a-z]{0,6}",
    )
        .prop_map(|(c, b, f, (fm, bm), tag)| {
            let mut n = ObjectNode::new(c, b);
            n.visual_feature = f;
            n.feature_masked = fm;
            n.bbox_masked = bm;
            n.attributes.insert("tag".into(), serde_json::json!(tag));
            n
        })
}

/// Valid graphs; parallel edges are allowed.
fn graph() -> impl Strategy<Value = SceneGraph> {
    proptest::collection::vec(node(), 1..7).prop_flat_map(|nodes| {
        let n = nodes.len();
        // the object index skips the subject, so there are no self edges
        let edge = (0..n, 0..VOCAB.predicates, 0..n.max(2) - 1)
            .prop_map(|(s, p, o)| RelationEdge::new(s, p, if o >= s { o + 1 } else { o }));
        let count = if n > 1 { 0..2 * n + 1 } else { 0..1 };
        proptest::collection::vec(edge, count).prop_map(move |edges| SceneGraph::new(nodes.clone(), edges))
    })
}

/// Edits whose ids are in the vocabulary; indices may be out of range.
fn edit() -> impl Strategy<Value = EditOp> {
    let new_edge = (0..VOCAB.predicates, 0..8usize, any::<bool>()).prop_map(|(p, o, out)| NewEdge {
        predicate_id: p,
        other_node_index: o,
        direction: if out { Direction::Outgoing } else { Direction::Incoming },
    });
    prop_oneof![
        (0..8usize).prop_map(|node_index| EditOp::RemoveNode { node_index }),
        (0..8usize, 0..VOCAB.objects).prop_map(|(node_index, new_category_id)| EditOp::ReplaceCategory {
            node_index,
            new_category_id
        }),
        (0..16usize, 0..VOCAB.predicates).prop_map(|(edge_index, new_predicate_id)| EditOp::ChangePredicate {
            edge_index,
            new_predicate_id
        }),
        (0..VOCAB.objects, proptest::collection::vec(new_edge, 0..4))
            .prop_map(|(category_id, new_edges)| EditOp::AddNode { category_id, new_edges }),
        (0..8usize).prop_map(|node_index| EditOp::RepositionNode { node_index }),
    ]
}

proptest! {
    #[test]
    fn json_round_trip_is_lossless(g in graph()) {
        let back = SceneGraph::from_json(&g.to_json().unwrap()).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(back.digest(), g.digest());
    }

    #[test]
    fn generated_graphs_validate(g in graph()) {
        prop_assert!(validate_graph(&g, VOCAB).is_empty());
    }

    #[test]
    fn accepted_edit_sequences_keep_graphs_valid(g in graph(), edits in proptest::collection::vec(edit(), 1..5)) {
        if let Ok((out, mask)) = apply_edits(&g, &edits) {
            prop_assert!(validate_graph(&out, VOCAB).is_empty());
            let n = out.nodes.len();
            prop_assert!(mask.nodes_feature_masked.iter().chain(&mask.nodes_bbox_masked).all(|&i| i < n));
            for r in &mask.occlude_regions {
                prop_assert!(r.node.is_none_or(|i| i < n));
                let b = r.bbox;
                prop_assert!(0.0 <= b.top && b.top <= b.bottom && b.bottom <= 1.0);
                prop_assert!(0.0 <= b.left && b.left <= b.right && b.right <= 1.0);
            }
            let rem = edits.iter().filter(|e| matches!(e, EditOp::RemoveNode { .. })).count();
            let add = edits.iter().filter(|e| matches!(e, EditOp::AddNode { .. })).count();
            prop_assert_eq!(n + rem, g.nodes.len() + add);
        }
    }

    #[test]
    fn edits_are_pure(g in graph(), e in edit()) {
        let a = apply_edits(&g, std::slice::from_ref(&e));
        let b = apply_edits(&g, std::slice::from_ref(&e));
        match (a, b) {
            (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "same edit gave different outcomes"),
        }
    }
}
