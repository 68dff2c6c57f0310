use std::collections::BTreeMap;

use crate::rdl::ResourceKind;

/// One substrate element carrying part of a request element.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub ul_ne_id: String,
    pub allocations: BTreeMap<ResourceKind, f64>,
}

impl Segment {
    pub fn new(ul_ne_id: impl Into<String>) -> Self {
        Segment {
            ul_ne_id: ul_ne_id.into(),
            allocations: BTreeMap::new(),
        }
    }

    pub fn with(mut self, kind: ResourceKind, amount: f64) -> Self {
        self.allocations.insert(kind, amount);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryClass {
    Node,
    Link,
}

impl EntryClass {
    pub fn as_str(self) -> &'static str {
        match self {
            EntryClass::Node => "node",
            EntryClass::Link => "link",
        }
    }
}

/// Placement of one request element.
///
/// `segments` are the substrate nodes the element occupies, in path order.
/// For links, `via[i]` is the substrate link between `segments[i]` and
/// `segments[i + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingEntry {
    pub class: EntryClass,
    pub segments: Vec<Segment>,
    pub via: Vec<Segment>,
}

impl MappingEntry {
    /// Full substrate path, alternating node and link ids.
    pub fn path(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.segments.len() + self.via.len());
        for (i, seg) in self.segments.iter().enumerate() {
            if i > 0 {
                out.push(self.via[i - 1].ul_ne_id.clone());
            }
            out.push(seg.ul_ne_id.clone());
        }
        out
    }

    /// Every (substrate element, allocations) pair, segments first.
    pub fn all_segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().chain(self.via.iter())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappingLayer {
    pub request_graph_id: String,
    pub entries: BTreeMap<String, MappingEntry>,
    pub vlan_by_link: BTreeMap<String, u16>,
}

impl MappingLayer {
    pub fn new(request_graph_id: impl Into<String>) -> Self {
        MappingLayer {
            request_graph_id: request_graph_id.into(),
            entries: BTreeMap::new(),
            vlan_by_link: BTreeMap::new(),
        }
    }

    pub fn host_of(&self, ol_ne_id: &str) -> Option<&str> {
        let entry = self.entries.get(ol_ne_id)?;
        (entry.class == EntryClass::Node).then(|| entry.segments[0].ul_ne_id.as_str())
    }

    pub fn node_entries(&self) -> impl Iterator<Item = (&String, &MappingEntry)> {
        self.entries.iter().filter(|(_, e)| e.class == EntryClass::Node)
    }

    pub fn link_entries(&self) -> impl Iterator<Item = (&String, &MappingEntry)> {
        self.entries.iter().filter(|(_, e)| e.class == EntryClass::Link)
    }

    /// Checks segment-count invariants; returns the first offending entry.
    pub fn check_shape(&self) -> Result<(), String> {
        for (id, e) in &self.entries {
            let ok = match e.class {
                EntryClass::Node => e.segments.len() == 1 && e.via.is_empty(),
                EntryClass::Link => !e.segments.is_empty() && e.via.len() + 1 == e.segments.len(),
            };
            if !ok {
                return Err(id.clone());
            }
        }
        for link in self.vlan_by_link.keys() {
            if self.entries.get(link).map(|e| e.class) != Some(EntryClass::Link) {
                return Err(link.clone());
            }
        }
        Ok(())
    }
}
