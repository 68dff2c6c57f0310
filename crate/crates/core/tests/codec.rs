mod common;

use std::path::PathBuf;

use cloudnet_core::codec::{deserialize, deserialize_graph, deserialize_mapping, serialize, serialize_graph, serialize_mapping, CodecError, Document};
use cloudnet_core::rdl::{Feature, Layer, NetworkElement, Resource, ResourceKind, TopologyGraph};
use cloudnet_core::scenario::{pip_substrate, star_request, transit_graph, PipSpec};
use cloudnet_core::solver::{EntryClass, MappingEntry, MappingLayer, Segment};
use common::drive::random_graph;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: 512, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn deserialize_inverts_serialize(seed in any::<u64>()) {
        let g = random_graph(seed);
        let bytes = serialize_graph(&g).unwrap();
        let back = deserialize_graph(&bytes).unwrap();
        prop_assert_eq!(&back, &g);
        // canonical: serializing the decoded graph reproduces the bytes
        prop_assert_eq!(serialize_graph(&back).unwrap(), bytes);
    }

    #[test]
    fn storage_order_does_not_change_bytes(seed in any::<u64>()) {
        let g = random_graph(seed);
        let shuffled = g.reordered(|id| id.chars().rev().collect());
        prop_assert_eq!(serialize_graph(&shuffled).unwrap(), serialize_graph(&g).unwrap());
    }

    #[test]
    fn garbage_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        let _ = deserialize(&bytes);
    }
}

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn sample_mapping() -> MappingLayer {
    let mut ml = MappingLayer::new("star13");
    ml.entries.insert(
        "hub".into(),
        MappingEntry {
            class: EntryClass::Node,
            segments: vec![Segment::new("pip1").with(ResourceKind::Ram, 512.0).with(ResourceKind::Cpu, 1.0)],
            via: vec![],
        },
    );
    ml.entries.insert(
        "hub-leaf12".into(),
        MappingEntry {
            class: EntryClass::Link,
            segments: vec![
                Segment::new("pip1").with(ResourceKind::Bandwidth, 10.0),
                Segment::new("pip2").with(ResourceKind::Bandwidth, 10.0),
            ],
            via: vec![Segment::new("t-pip1-pip2").with(ResourceKind::Bandwidth, 10.0)],
        },
    );
    ml.vlan_by_link.insert("hub-leaf12".into(), 2000);
    ml
}

fn goldens() -> Vec<(&'static str, Document)> {
    let mut escaped = TopologyGraph::new("odd;id=x", Layer::Ol0);
    escaped
        .add_node(
            NetworkElement::of_type("a\\b", "/node/host/generic")
                .with_resource(Resource::ram(0.1))
                .with_feature(Feature::new("note", "line1\nline2;x=y"))
                .with_feature(Feature::unspecified("arch").in_group("compat")),
        )
        .unwrap();
    vec![
        ("star13.cng", Document::Graph(star_request(12, 512.0, 10.0))),
        ("pip1_substrate.cng", Document::Graph(pip_substrate(&PipSpec::uniform("pip1", 3, 2048.0, 4.0)))),
        ("transit.cng", Document::Graph(transit_graph(&["pip1", "pip2"], &[("pip1".into(), "pip2".into(), 1000.0)]))),
        ("mapping.cng", Document::Mapping(sample_mapping())),
        ("escaped.cng", Document::Graph(escaped)),
    ]
}

#[test]
fn golden_files_are_byte_stable() {
    let bless = std::env::var_os("CLOUDNET_BLESS").is_some();
    for (name, doc) in goldens() {
        let path = golden_dir().join(name);
        let bytes = serialize(&doc).unwrap();
        if bless {
            std::fs::write(&path, &bytes).unwrap();
        }
        let stored = std::fs::read(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(String::from_utf8_lossy(&bytes), String::from_utf8_lossy(&stored), "{name} drifted");
        let decoded = deserialize(&stored).unwrap();
        assert_eq!(decoded, doc, "{name} decodes to a different document");
        assert_eq!(serialize(&decoded).unwrap(), stored, "{name} does not re-encode identically");
    }
}

#[test]
fn golden_mapping_keeps_vlan_and_allocations() {
    let ml = deserialize_mapping(&std::fs::read(golden_dir().join("mapping.cng")).unwrap()).unwrap();
    assert_eq!(ml.vlan_by_link["hub-leaf12"], 2000);
    assert_eq!(ml.entries["hub-leaf12"].path(), ["pip1", "t-pip1-pip2", "pip2"]);
    assert_eq!(serialize_mapping(&ml).unwrap(), std::fs::read(golden_dir().join("mapping.cng")).unwrap());
}

#[test]
fn malformed_documents_are_rejected_with_a_line() {
    let cases: &[(&str, usize)] = &[
        ("", 1),
        ("cloudnet-graph/2;id=x;layer=UL\n", 1),
        ("cloudnet-graph/1;id=x;layer=XX\n", 1),
        ("cloudnet-graph/1;id=x;layer=UL\nNE;id=a;type=/node/host;res.ram=abc:mib\n", 2),
        ("cloudnet-graph/1;id=x;layer=UL\nNE;id=a;type=/node/host\nNE;id=a;type=/node/host\n", 3),
        ("cloudnet-graph/1;id=x;layer=UL\nXX;id=a\n", 2),
        ("cloudnet-graph/1;id=x;layer=UL\n\nNE;id=a;type=/node/host\n", 2),
    ];
    for (text, line) in cases {
        match deserialize(text.as_bytes()) {
            Err(CodecError::MalformedDocument { line: l, .. }) => assert_eq!(l, *line, "{text:?}"),
            other => panic!("{text:?} gave {other:?}"),
        }
    }
}

#[test]
fn invalid_graphs_do_not_serialize() {
    let mut g = TopologyGraph::new("x", Layer::Ol1);
    g.add_node(NetworkElement::of_type("a", "/node/host").with_feature(Feature::unspecified("arch"))).unwrap();
    assert!(matches!(serialize_graph(&g), Err(CodecError::InvalidGraph(_))));
}
