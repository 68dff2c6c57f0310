//! Canonical line-record text format for graphs and mapping layers (`.cng`).
//!
//! ```text
//! cloudnet-graph/1;id=<graph>;layer=<UL|OL0|OL1|ML>
//! NE;id=<ne>;type=<path>;res.<kind>=<amount>:<unit>[:shared];feat.<key>=<value>;grp.<key>=<group>
//! NI;id=<ni>;owner=<ne>[;peer=<ni>]
//! MAP;id=<ol-ne>;class=<node|link>;seg.<i>=<ul-ne>;seg.<i>.<kind>=<amount>;via.<i>=<ul-ne>;...;vlan=<tag>
//! ```
//!
//! Records are sorted by class, then id. Field values escape `\`, `;`, `=`,
//! CR and LF. See `docs/format.md` for the full grammar.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::rdl::{
    validate_graph, Feature, Layer, NetworkElement, NetworkInterface, Resource,
    ResourceKind, TopologyGraph, TypePath, ValidationReport,
};
use crate::solver::{EntryClass, MappingEntry, MappingLayer, Segment};

pub const FORMAT_TAG: &str = "cloudnet-graph/1";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodecError {
    #[error("graph failed validation: {0}")]
    InvalidGraph(ValidationReport),
    #[error("invalid mapping entry {0:?}")]
    InvalidMapping(String),
    #[error("malformed document at line {line}: {reason}")]
    MalformedDocument { line: usize, reason: String },
}

fn malformed(line: usize, reason: impl Into<String>) -> CodecError {
    CodecError::MalformedDocument {
        line,
        reason: reason.into(),
    }
}

pub fn escape(value: &str) -> String {
    let mut out = String::with_capacity(value.len());
    for c in value.chars() {
        match c {
            '\\' => out.push_str("\\x5c"),
            ';' => out.push_str("\\x3b"),
            '=' => out.push_str("\\x3d"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\x0d"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape(value: &str) -> Result<String, String> {
    let mut out = String::with_capacity(value.len());
    let mut chars = value.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('x') => {
                let hex: String = chars.by_ref().take(2).collect();
                let byte = u8::from_str_radix(&hex, 16)
                    .ok()
                    .filter(|b| b.is_ascii() && hex.len() == 2)
                    .ok_or_else(|| format!("bad escape \\x{hex}"))?;
                out.push(byte as char);
            }
            other => return Err(format!("bad escape \\{}", other.map(String::from).unwrap_or_default())),
        }
    }
    Ok(out)
}

/// Splits `key=value;key=value` into ordered pairs, rejecting duplicates.
pub fn parse_fields(line: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    if line.is_empty() {
        return Ok(out);
    }
    for part in line.split(';') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| format!("field {part:?} has no '='"))?;
        let k = unescape(k)?;
        if !seen.insert(k.clone()) {
            return Err(format!("duplicate field {k:?}"));
        }
        out.push((k, unescape(v)?));
    }
    Ok(out)
}

fn push_field(line: &mut String, key: &str, value: &str) {
    if !line.is_empty() {
        line.push(';');
    }
    line.push_str(&escape(key));
    line.push('=');
    line.push_str(&escape(value));
}

/// Joins fields into one record line.
pub fn format_fields<'a>(fields: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    let mut line = String::new();
    for (k, v) in fields {
        push_field(&mut line, k, v);
    }
    line
}

fn format_amount(v: f64) -> String {
    format!("{v}")
}

fn parse_amount(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn header(id: &str, layer: Layer) -> String {
    let mut line = FORMAT_TAG.to_string();
    push_field(&mut line, "id", id);
    push_field(&mut line, "layer", layer.as_str());
    line
}

fn element_record(ne: &NetworkElement) -> String {
    let mut line = "NE".to_string();
    push_field(&mut line, "id", &ne.id);
    push_field(&mut line, "type", &ne.type_path.to_string());
    for r in ne.resources.values() {
        let mut v = format!("{}:{}", format_amount(r.amount), r.unit());
        if r.shareable {
            v.push_str(":shared");
        }
        push_field(&mut line, &format!("res.{}", r.kind), &v);
    }
    for f in ne.features.values() {
        push_field(&mut line, &format!("feat.{}", f.key), f.value.as_text());
        if let Some(g) = &f.group {
            push_field(&mut line, &format!("grp.{}", f.key), g);
        }
    }
    line
}

fn interface_record(ni: &NetworkInterface) -> String {
    let mut line = "NI".to_string();
    push_field(&mut line, "id", &ni.id);
    push_field(&mut line, "owner", &ni.owner);
    if let Some(p) = &ni.peer {
        push_field(&mut line, "peer", p);
    }
    line
}

fn map_record(id: &str, entry: &MappingEntry, vlan: Option<u16>) -> String {
    let mut line = "MAP".to_string();
    push_field(&mut line, "id", id);
    push_field(&mut line, "class", entry.class.as_str());
    for (prefix, list) in [("seg", &entry.segments), ("via", &entry.via)] {
        for (i, seg) in list.iter().enumerate() {
            push_field(&mut line, &format!("{prefix}.{i}"), &seg.ul_ne_id);
            for (kind, amount) in &seg.allocations {
                push_field(&mut line, &format!("{prefix}.{i}.{kind}"), &format_amount(*amount));
            }
        }
    }
    if let Some(tag) = vlan {
        push_field(&mut line, "vlan", &tag.to_string());
    }
    line
}

fn assemble(head: String, mut records: Vec<(&'static str, String, String)>) -> Vec<u8> {
    records.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    let mut out = head;
    out.push('\n');
    for (_, _, line) in records {
        out.push_str(&line);
        out.push('\n');
    }
    out.into_bytes()
}

/// Canonical bytes for a graph. Equal graphs give identical bytes regardless
/// of storage order.
pub fn serialize_graph(g: &TopologyGraph) -> Result<Vec<u8>, CodecError> {
    let report = validate_graph(g);
    if !report.is_ok() {
        return Err(CodecError::InvalidGraph(report));
    }
    let mut records = Vec::with_capacity(g.element_count() + g.interface_count());
    for ne in g.elements() {
        records.push(("NE", ne.id.clone(), element_record(ne)));
    }
    for ni in g.interfaces() {
        records.push(("NI", ni.id.clone(), interface_record(ni)));
    }
    Ok(assemble(header(&g.id, g.layer), records))
}

pub fn serialize_mapping(ml: &MappingLayer) -> Result<Vec<u8>, CodecError> {
    ml.check_shape().map_err(CodecError::InvalidMapping)?;
    let records = ml
        .entries
        .iter()
        .map(|(id, e)| ("MAP", id.clone(), map_record(id, e, ml.vlan_by_link.get(id).copied())))
        .collect();
    Ok(assemble(header(&ml.request_graph_id, Layer::Ml), records))
}

/// Either kind of document.
#[derive(Debug, Clone, PartialEq)]
pub enum Document {
    Graph(TopologyGraph),
    Mapping(MappingLayer),
}

pub fn serialize(doc: &Document) -> Result<Vec<u8>, CodecError> {
    match doc {
        Document::Graph(g) => serialize_graph(g),
        Document::Mapping(m) => serialize_mapping(m),
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<Document, CodecError> {
    let text = std::str::from_utf8(bytes).map_err(|_| malformed(1, "not UTF-8"))?;
    let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l));
    let (_, head) = lines.next().ok_or_else(|| malformed(1, "empty document"))?;
    let (tag, rest) = head.split_once(';').unwrap_or((head, ""));
    if tag != FORMAT_TAG {
        return Err(malformed(1, format!("expected header tag {FORMAT_TAG}")));
    }
    let fields = parse_fields(rest).map_err(|e| malformed(1, e))?;
    let mut id = None;
    let mut layer = None;
    for (k, v) in fields {
        match k.as_str() {
            "id" => id = Some(v),
            "layer" => layer = Some(v.parse::<Layer>().map_err(|e| malformed(1, e.to_string()))?),
            _ => return Err(malformed(1, format!("unknown header field {k:?}"))),
        }
    }
    let id = id.filter(|s| !s.is_empty()).ok_or_else(|| malformed(1, "missing id"))?;
    let layer = layer.ok_or_else(|| malformed(1, "missing layer"))?;

    let mut records = Vec::new();
    let mut saw_end = false;
    for (n, line) in lines {
        if saw_end {
            return Err(malformed(n - 1, "blank line inside document"));
        }
        if line.is_empty() {
            saw_end = true;
            continue;
        }
        let (class, rest) = line.split_once(';').unwrap_or((line, ""));
        let fields = parse_fields(rest).map_err(|e| malformed(n, e))?;
        records.push((n, class.to_string(), fields));
    }

    if layer == Layer::Ml {
        decode_mapping(id, records).map(Document::Mapping)
    } else {
        decode_graph(id, layer, records).map(Document::Graph)
    }
}

pub fn deserialize_graph(bytes: &[u8]) -> Result<TopologyGraph, CodecError> {
    match deserialize(bytes)? {
        Document::Graph(g) => Ok(g),
        Document::Mapping(_) => Err(malformed(1, "expected a topology graph, found a mapping layer")),
    }
}

pub fn deserialize_mapping(bytes: &[u8]) -> Result<MappingLayer, CodecError> {
    match deserialize(bytes)? {
        Document::Mapping(m) => Ok(m),
        Document::Graph(_) => Err(malformed(1, "expected a mapping layer, found a topology graph")),
    }
}

type Record = (usize, String, Vec<(String, String)>);

fn take_id(n: usize, fields: &mut Vec<(String, String)>) -> Result<String, CodecError> {
    let pos = fields
        .iter()
        .position(|(k, _)| k == "id")
        .ok_or_else(|| malformed(n, "record has no id"))?;
    let (_, id) = fields.remove(pos);
    if id.is_empty() {
        return Err(malformed(n, "empty id"));
    }
    Ok(id)
}

fn decode_graph(id: String, layer: Layer, records: Vec<Record>) -> Result<TopologyGraph, CodecError> {
    let mut elements: BTreeMap<String, (usize, NetworkElement)> = BTreeMap::new();
    let mut interfaces: BTreeMap<String, (usize, NetworkInterface)> = BTreeMap::new();

    for (n, class, mut fields) in records {
        let rid = take_id(n, &mut fields)?;
        match class.as_str() {
            "NE" => {
                let ne = decode_element(n, rid.clone(), fields)?;
                if elements.insert(rid.clone(), (n, ne)).is_some() {
                    return Err(malformed(n, format!("duplicate element id {rid:?}")));
                }
            }
            "NI" => {
                let mut ni = NetworkInterface::new(rid.clone(), String::new());
                let mut has_owner = false;
                for (k, v) in fields {
                    match k.as_str() {
                        "owner" => {
                            ni.owner = v;
                            has_owner = true;
                        }
                        "peer" => ni.peer = Some(v),
                        _ => return Err(malformed(n, format!("unknown interface field {k:?}"))),
                    }
                }
                if !has_owner {
                    return Err(malformed(n, "interface has no owner"));
                }
                if interfaces.insert(rid.clone(), (n, ni)).is_some() {
                    return Err(malformed(n, format!("duplicate interface id {rid:?}")));
                }
            }
            "MAP" => return Err(malformed(n, "MAP record in a topology graph")),
            other => return Err(malformed(n, format!("unknown record class {other:?}"))),
        }
    }

    for (n, ni) in interfaces.values() {
        let Some((_, owner)) = elements.get_mut(&ni.owner) else {
            return Err(malformed(*n, format!("unresolved owner {:?}", ni.owner)));
        };
        owner.interfaces.insert(ni.id.clone());
        if let Some(peer) = &ni.peer {
            if !interfaces.contains_key(peer) {
                return Err(malformed(*n, format!("unresolved peer {peer:?}")));
            }
        }
    }

    Ok(TopologyGraph::from_parts(
        id,
        layer,
        elements.into_values().map(|(_, e)| e).collect(),
        interfaces.into_values().map(|(_, i)| i).collect(),
    ))
}

fn decode_element(n: usize, id: String, fields: Vec<(String, String)>) -> Result<NetworkElement, CodecError> {
    let mut type_path = None;
    let mut resources = Vec::new();
    let mut features: BTreeMap<String, Feature> = BTreeMap::new();
    let mut groups = Vec::new();
    for (k, v) in fields {
        if k == "type" {
            type_path = Some(TypePath::parse(&v).map_err(|e| malformed(n, e.to_string()))?);
        } else if let Some(kind) = k.strip_prefix("res.") {
            let kind: ResourceKind = kind.parse().map_err(|e: crate::rdl::RdlError| malformed(n, e.to_string()))?;
            let mut parts = v.split(':');
            let amount = parts
                .next()
                .and_then(parse_amount)
                .ok_or_else(|| malformed(n, format!("bad amount in {v:?}")))?;
            if parts.next() != Some(kind.unit()) {
                return Err(malformed(n, format!("{kind} must be given in {}", kind.unit())));
            }
            let shareable = match parts.next() {
                None => false,
                Some("shared") => true,
                Some(other) => return Err(malformed(n, format!("unknown resource flag {other:?}"))),
            };
            if parts.next().is_some() {
                return Err(malformed(n, format!("trailing data in {v:?}")));
            }
            resources.push(Resource {
                kind,
                amount,
                shareable,
            });
        } else if let Some(key) = k.strip_prefix("feat.") {
            features.insert(key.to_string(), Feature::new(key, &v));
        } else if let Some(key) = k.strip_prefix("grp.") {
            groups.push((key.to_string(), v));
        } else {
            return Err(malformed(n, format!("unknown element field {k:?}")));
        }
    }
    for (key, group) in groups {
        let f = features
            .get_mut(&key)
            .ok_or_else(|| malformed(n, format!("group for missing feature {key:?}")))?;
        f.group = Some(group);
    }
    let type_path = type_path.ok_or_else(|| malformed(n, "element has no type"))?;
    let mut ne = NetworkElement::new(id, type_path);
    for r in resources {
        ne.set_resource(r);
    }
    for f in features.into_values() {
        ne.set_feature(f);
    }
    Ok(ne)
}

fn decode_mapping(id: String, records: Vec<Record>) -> Result<MappingLayer, CodecError> {
    let mut ml = MappingLayer::new(id);
    for (n, class, mut fields) in records {
        if class != "MAP" {
            return Err(malformed(n, format!("unexpected {class:?} record in a mapping layer")));
        }
        let rid = take_id(n, &mut fields)?;
        let mut entry_class = None;
        let mut segs: BTreeMap<usize, Segment> = BTreeMap::new();
        let mut vias: BTreeMap<usize, Segment> = BTreeMap::new();
        let mut allocs = Vec::new();
        for (k, v) in fields {
            if k == "class" {
                entry_class = Some(match v.as_str() {
                    "node" => EntryClass::Node,
                    "link" => EntryClass::Link,
                    _ => return Err(malformed(n, format!("unknown entry class {v:?}"))),
                });
                continue;
            }
            if k == "vlan" {
                let tag = v.parse::<u16>().map_err(|_| malformed(n, format!("bad vlan tag {v:?}")))?;
                ml.vlan_by_link.insert(rid.clone(), tag);
                continue;
            }
            let mut parts = k.splitn(3, '.');
            let (Some(prefix), Some(idx)) = (parts.next(), parts.next()) else {
                return Err(malformed(n, format!("unknown mapping field {k:?}")));
            };
            if prefix != "seg" && prefix != "via" {
                return Err(malformed(n, format!("unknown mapping field {k:?}")));
            }
            let idx: usize = idx.parse().map_err(|_| malformed(n, format!("bad index in {k:?}")))?;
            match parts.next() {
                None => {
                    let target = if prefix == "seg" { &mut segs } else { &mut vias };
                    target.insert(idx, Segment::new(v));
                }
                Some(kind) => {
                    let kind: ResourceKind =
                        kind.parse().map_err(|e: crate::rdl::RdlError| malformed(n, e.to_string()))?;
                    let amount = parse_amount(&v).ok_or_else(|| malformed(n, format!("bad amount {v:?}")))?;
                    allocs.push((prefix == "seg", idx, kind, amount));
                }
            }
        }
        for (is_seg, idx, kind, amount) in allocs {
            let target = if is_seg { &mut segs } else { &mut vias };
            target
                .get_mut(&idx)
                .ok_or_else(|| malformed(n, format!("allocation for missing segment {idx}")))?
                .allocations
                .insert(kind, amount);
        }
        let contiguous = |m: &BTreeMap<usize, Segment>| m.keys().copied().eq(0..m.len());
        if !contiguous(&segs) || !contiguous(&vias) {
            return Err(malformed(n, "segment indices are not contiguous"));
        }
        let entry = MappingEntry {
            class: entry_class.ok_or_else(|| malformed(n, "entry has no class"))?,
            segments: segs.into_values().collect(),
            via: vias.into_values().collect(),
        };
        if ml.entries.insert(rid.clone(), entry).is_some() {
            return Err(malformed(n, format!("duplicate mapping id {rid:?}")));
        }
    }
    ml.check_shape()
        .map_err(|e| malformed(0, format!("entry {e:?} has an invalid shape")))?;
    Ok(ml)
}

/// Reads and decodes a `.cng` graph file.
pub fn read_graph_file(path: &std::path::Path) -> Result<TopologyGraph, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    deserialize_graph(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn write_graph_file(path: &std::path::Path, g: &TopologyGraph) -> Result<(), String> {
    let bytes = serialize_graph(g).map_err(|e| e.to_string())?;
    std::fs::write(path, bytes).map_err(|e| format!("{}: {e}", path.display()))
}

/// Human-readable one-line summary, used in logs.
pub fn describe(g: &TopologyGraph) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "{} [{}] {} nodes, {} links",
        g.id,
        g.layer,
        g.nodes().count(),
        g.links().count()
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rdl::NetworkElement;

    fn pair() -> TopologyGraph {
        let mut g = TopologyGraph::new("g1", Layer::Ul);
        g.add_node(NetworkElement::of_type("a", "/node/host/sim").with_resource(Resource::ram(1024.0)))
            .unwrap();
        g.add_node(NetworkElement::of_type("b", "/node/host/sim").with_resource(Resource::ram(512.5).shared()))
            .unwrap();
        g.add_link(
            NetworkElement::of_type("l", "/link/eth").with_resource(Resource::bandwidth(100.0)),
            "a",
            "b",
        )
        .unwrap();
        g
    }

    #[test]
    fn counts_records() {
        let text = String::from_utf8(serialize_graph(&pair()).unwrap()).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("NE;")).count(), 3);
        assert_eq!(text.lines().filter(|l| l.starts_with("NI;")).count(), 4);
        assert!(text.starts_with("cloudnet-graph/1;id=g1;layer=UL\n"));
    }

    #[test]
    fn escapes_reserved_characters() {
        let nasty = "a;b=c\\d\ne\rf";
        assert_eq!(unescape(&escape(nasty)).unwrap(), nasty);
        assert_eq!(escape(";=\n"), "\\x3b\\x3d\\n");
        assert!(unescape("\\q").is_err());
        assert!(unescape("\\x4").is_err());
    }

    #[test]
    fn rejects_bad_documents() {
        let good = String::from_utf8(serialize_graph(&pair()).unwrap()).unwrap();
        let cases = [
            good.replace("cloudnet-graph/1", "cloudnet-graph/2"),
            good.replace("NI;id=a.l;", "XX;id=a.l;"),
            format!("{good}NE;id=a;type=/node/host/sim\n"),
            good.replace("peer=l.0", "peer=nope"),
            good.replace("owner=a", "owner=ghost"),
            good.replace("1024:mib", "1024:gib"),
            good.replace("layer=UL", "layer=XL"),
            good.replace("\nNE;id=a;", "\n\nNE;id=a;"),
        ];
        for doc in cases {
            assert!(
                matches!(deserialize(doc.as_bytes()), Err(CodecError::MalformedDocument { .. })),
                "{doc}"
            );
        }
    }

    #[test]
    fn refuses_invalid_graphs() {
        let mut g = pair();
        g.layer = Layer::Ol1;
        g.element_mut("a").unwrap().set_feature(Feature::unspecified("arch"));
        assert!(matches!(serialize_graph(&g), Err(CodecError::InvalidGraph(_))));
    }

    #[test]
    fn mapping_round_trip() {
        let mut ml = MappingLayer::new("req");
        ml.entries.insert(
            "v1".into(),
            MappingEntry {
                class: EntryClass::Node,
                segments: vec![Segment::new("h1").with(ResourceKind::Ram, 512.0)],
                via: vec![],
            },
        );
        ml.entries.insert(
            "l1".into(),
            MappingEntry {
                class: EntryClass::Link,
                segments: vec![
                    Segment::new("h1").with(ResourceKind::Bandwidth, 10.0),
                    Segment::new("sw").with(ResourceKind::Bandwidth, 10.0),
                ],
                via: vec![Segment::new("h1-sw").with(ResourceKind::Bandwidth, 10.0)],
            },
        );
        ml.vlan_by_link.insert("l1".into(), 101);
        let bytes = serialize_mapping(&ml).unwrap();
        assert_eq!(deserialize_mapping(&bytes).unwrap(), ml);
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.contains("MAP;id=l1;class=link;seg.0=h1;seg.0.bandwidth=10;seg.1=sw;"));
        assert!(text.ends_with(";vlan=101\nMAP;id=v1;class=node;seg.0=h1;seg.0.ram=512\n"));
    }
}
