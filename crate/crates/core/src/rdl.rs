//! Resource and CloudNet description language.
//!
//! Nodes and links are both [`NetworkElement`]s, glued together by
//! [`NetworkInterface`]s. Every element carries a hierarchical [`TypePath`]
//! plus typed resources and free-form features.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RdlError {
    #[error("malformed type path {path:?}: {reason}")]
    MalformedPath { path: String, reason: &'static str },
    #[error("unknown resource kind {0:?}")]
    UnknownResourceKind(String),
    #[error("unknown graph layer {0:?}")]
    UnknownLayer(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("unknown element or interface {0:?}")]
    UnknownElement(String),
    #[error("interface {0:?} is already peered")]
    AlreadyPeered(String),
    #[error("link {link:?} would lose endpoint {endpoint:?}")]
    DanglingEndpoint { link: String, endpoint: String },
    #[error("consistency group {group:?} carries conflicting values {first:?} and {second:?}")]
    ConflictingGroup {
        group: String,
        first: String,
        second: String,
    },
    #[error("no default for unspecified feature {key:?} on {ne:?}")]
    NoDefault { ne: String, key: String },
}

pub type Result<T, E = RdlError> = std::result::Result<T, E>;

fn is_token(s: &str) -> bool {
    !s.is_empty()
        && s
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
}

/// Hierarchical element type such as `/node/host/generic`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TypePath {
    segments: Vec<String>,
}

impl TypePath {
    /// Trailing segment that matches any deeper substrate type.
    pub const WILDCARD: &'static str = "generic";

    pub fn parse(text: &str) -> Result<Self> {
        let malformed = |reason| RdlError::MalformedPath {
            path: text.to_string(),
            reason,
        };
        let rest = text
            .strip_prefix('/')
            .ok_or_else(|| malformed("missing leading '/'"))?;
        let mut segments = Vec::new();
        for seg in rest.split('/') {
            if seg.is_empty() {
                return Err(malformed("empty segment"));
            }
            if !is_token(seg) {
                return Err(malformed("illegal character"));
            }
            segments.push(seg.to_string());
        }
        Ok(TypePath { segments })
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn root(&self) -> &str {
        &self.segments[0]
    }

    pub fn is_node(&self) -> bool {
        self.root() == "node"
    }

    pub fn is_link(&self) -> bool {
        self.root() == "link"
    }

    /// True if `prefix` names this path or one of its ancestors.
    pub fn starts_with(&self, prefix: &TypePath) -> bool {
        self.segments.len() >= prefix.segments.len()
            && self.segments[..prefix.segments.len()] == prefix.segments[..]
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for TypePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for seg in &self.segments {
            write!(f, "/{seg}")?;
        }
        Ok(())
    }
}

impl FromStr for TypePath {
    type Err = RdlError;

    fn from_str(s: &str) -> Result<Self> {
        TypePath::parse(s)
    }
}

pub fn parse_type_path(text: &str) -> Result<TypePath> {
    TypePath::parse(text)
}

/// Whether a substrate element of type `substrate` may host a request element
/// of type `request`.
///
/// Equal paths always match. A request path ending in `generic` matches any
/// substrate path that agrees on all preceding segments.
pub fn is_assignable(request: &TypePath, substrate: &TypePath) -> bool {
    if request == substrate {
        return true;
    }
    let (last, head) = request
        .segments
        .split_last()
        .expect("type paths have at least one segment");
    last == TypePath::WILDCARD
        && substrate.segments.len() >= head.len()
        && substrate.segments[..head.len()] == *head
}

/// Resource kinds known to the unit registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ResourceKind {
    Ram,
    Cpu,
    Bandwidth,
}

impl ResourceKind {
    pub const ALL: [ResourceKind; 3] = [ResourceKind::Ram, ResourceKind::Cpu, ResourceKind::Bandwidth];

    pub fn as_str(self) -> &'static str {
        match self {
            ResourceKind::Ram => "ram",
            ResourceKind::Cpu => "cpu",
            ResourceKind::Bandwidth => "bandwidth",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            ResourceKind::Ram => "mib",
            ResourceKind::Cpu => "cores",
            ResourceKind::Bandwidth => "mbit",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Kinds consumed by hosting a node (as opposed to carrying a link).
    pub fn is_node_kind(self) -> bool {
        matches!(self, ResourceKind::Ram | ResourceKind::Cpu)
    }
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ResourceKind {
    type Err = RdlError;

    fn from_str(s: &str) -> Result<Self> {
        ResourceKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| RdlError::UnknownResourceKind(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resource {
    pub kind: ResourceKind,
    pub amount: f64,
    pub shareable: bool,
}

impl Resource {
    pub fn new(kind: ResourceKind, amount: f64) -> Self {
        Resource {
            kind,
            amount,
            shareable: false,
        }
    }

    pub fn ram(mib: f64) -> Self {
        Resource::new(ResourceKind::Ram, mib)
    }

    pub fn cpu(cores: f64) -> Self {
        Resource::new(ResourceKind::Cpu, cores)
    }

    pub fn bandwidth(mbit: f64) -> Self {
        Resource::new(ResourceKind::Bandwidth, mbit)
    }

    pub fn shared(mut self) -> Self {
        self.shareable = true;
        self
    }

    pub fn unit(&self) -> &'static str {
        self.kind.unit()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FeatureValue {
    Unspecified,
    Value(String),
}

impl FeatureValue {
    pub const UNSPECIFIED: &'static str = "unspecified";

    /// `unspecified` is a reserved token and never a literal value.
    pub fn from_text(text: &str) -> Self {
        if text == Self::UNSPECIFIED {
            FeatureValue::Unspecified
        } else {
            FeatureValue::Value(text.to_string())
        }
    }

    pub fn as_text(&self) -> &str {
        match self {
            FeatureValue::Unspecified => Self::UNSPECIFIED,
            FeatureValue::Value(v) => v,
        }
    }

    pub fn specified(&self) -> Option<&str> {
        match self {
            FeatureValue::Unspecified => None,
            FeatureValue::Value(v) => Some(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Feature {
    pub key: String,
    pub value: FeatureValue,
    /// Consistency group: all members must end up with the same value.
    pub group: Option<String>,
}

impl Feature {
    pub fn new(key: impl Into<String>, value: &str) -> Self {
        Feature {
            key: key.into(),
            value: FeatureValue::from_text(value),
            group: None,
        }
    }

    pub fn unspecified(key: impl Into<String>) -> Self {
        Feature {
            key: key.into(),
            value: FeatureValue::Unspecified,
            group: None,
        }
    }

    pub fn in_group(mut self, group: impl Into<String>) -> Self {
        self.group = Some(group.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkInterface {
    pub id: String,
    pub owner: String,
    pub peer: Option<String>,
}

impl NetworkInterface {
    pub fn new(id: impl Into<String>, owner: impl Into<String>) -> Self {
        NetworkInterface {
            id: id.into(),
            owner: owner.into(),
            peer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkElement {
    pub id: String,
    pub type_path: TypePath,
    pub resources: BTreeMap<ResourceKind, Resource>,
    pub features: BTreeMap<String, Feature>,
    pub interfaces: BTreeSet<String>,
}

impl NetworkElement {
    pub fn new(id: impl Into<String>, type_path: TypePath) -> Self {
        NetworkElement {
            id: id.into(),
            type_path,
            resources: BTreeMap::new(),
            features: BTreeMap::new(),
            interfaces: BTreeSet::new(),
        }
    }

    /// Panics on a malformed literal; meant for fixtures and builders.
    pub fn of_type(id: impl Into<String>, type_path: &str) -> Self {
        let tp = TypePath::parse(type_path).expect("valid type path literal");
        NetworkElement::new(id, tp)
    }

    pub fn with_resource(mut self, resource: Resource) -> Self {
        self.set_resource(resource);
        self
    }

    pub fn with_feature(mut self, feature: Feature) -> Self {
        self.set_feature(feature);
        self
    }

    pub fn set_resource(&mut self, resource: Resource) {
        self.resources.insert(resource.kind, resource);
    }

    pub fn set_feature(&mut self, feature: Feature) {
        self.features.insert(feature.key.clone(), feature);
    }

    pub fn resource(&self, kind: ResourceKind) -> Option<&Resource> {
        self.resources.get(&kind)
    }

    /// Declared amount, or zero.
    pub fn amount(&self, kind: ResourceKind) -> f64 {
        self.resources.get(&kind).map_or(0.0, |r| r.amount)
    }

    pub fn feature_value(&self, key: &str) -> Option<&str> {
        self.features.get(key).and_then(|f| f.value.specified())
    }

    pub fn is_node(&self) -> bool {
        self.type_path.is_node()
    }

    pub fn is_link(&self) -> bool {
        self.type_path.is_link()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Layer {
    /// Substrate.
    Ul,
    /// Raw request, may be vague.
    Ol0,
    /// Completed request.
    Ol1,
    /// Mapping layer.
    Ml,
}

impl Layer {
    pub fn as_str(self) -> &'static str {
        match self {
            Layer::Ul => "UL",
            Layer::Ol0 => "OL0",
            Layer::Ol1 => "OL1",
            Layer::Ml => "ML",
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Layer {
    type Err = RdlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "UL" => Ok(Layer::Ul),
            "OL0" => Ok(Layer::Ol0),
            "OL1" => Ok(Layer::Ol1),
            "ML" => Ok(Layer::Ml),
            _ => Err(RdlError::UnknownLayer(s.to_string())),
        }
    }
}

/// A set of elements and interfaces in one layer.
///
/// Storage keeps insertion order; equality ignores it.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyGraph {
    pub id: String,
    pub layer: Layer,
    elements: IndexMap<String, NetworkElement>,
    interfaces: IndexMap<String, NetworkInterface>,
}

impl TopologyGraph {
    pub fn new(id: impl Into<String>, layer: Layer) -> Self {
        TopologyGraph {
            id: id.into(),
            layer,
            elements: IndexMap::new(),
            interfaces: IndexMap::new(),
        }
    }

    /// Inserts an element. Its interface set is rebuilt from interfaces added
    /// later, so any ids it already lists are dropped.
    pub fn add_element(&mut self, mut ne: NetworkElement) -> Result<()> {
        if self.elements.contains_key(&ne.id) {
            return Err(RdlError::DuplicateId(ne.id));
        }
        ne.interfaces.clear();
        self.elements.insert(ne.id.clone(), ne);
        Ok(())
    }

    /// Inserts an unpeered interface and registers it with its owner.
    pub fn add_interface(&mut self, mut ni: NetworkInterface) -> Result<()> {
        if self.interfaces.contains_key(&ni.id) {
            return Err(RdlError::DuplicateId(ni.id));
        }
        let owner = self
            .elements
            .get_mut(&ni.owner)
            .ok_or_else(|| RdlError::UnknownElement(ni.owner.clone()))?;
        owner.interfaces.insert(ni.id.clone());
        ni.peer = None;
        self.interfaces.insert(ni.id.clone(), ni);
        Ok(())
    }

    pub fn connect(&mut self, a: &str, b: &str) -> Result<()> {
        for id in [a, b] {
            match self.interfaces.get(id) {
                None => return Err(RdlError::UnknownElement(id.to_string())),
                Some(ni) if ni.peer.is_some() => return Err(RdlError::AlreadyPeered(id.to_string())),
                Some(_) => {}
            }
        }
        self.interfaces[a].peer = Some(b.to_string());
        self.interfaces[b].peer = Some(a.to_string());
        Ok(())
    }

    pub fn disconnect(&mut self, ni: &str) {
        let peer = self.interfaces.get_mut(ni).and_then(|n| n.peer.take());
        if let Some(peer) = peer {
            if let Some(p) = self.interfaces.get_mut(&peer) {
                p.peer = None;
            }
        }
    }

    pub fn add_node(&mut self, ne: NetworkElement) -> Result<()> {
        self.add_element(ne)
    }

    /// Adds `link` between nodes `a` and `b`.
    ///
    /// Interface ids follow the builder convention: `<link>.0` and `<link>.1`
    /// on the link, `<node>.<link>` on each node.
    pub fn add_link(&mut self, link: NetworkElement, a: &str, b: &str) -> Result<()> {
        for n in [a, b] {
            if !self.elements.contains_key(n) {
                return Err(RdlError::UnknownElement(n.to_string()));
            }
        }
        let lid = link.id.clone();
        self.add_element(link)?;
        for (i, node) in [a, b].into_iter().enumerate() {
            let link_side = format!("{lid}.{i}");
            let node_side = format!("{node}.{lid}");
            self.add_interface(NetworkInterface::new(&link_side, &lid))?;
            self.add_interface(NetworkInterface::new(&node_side, node))?;
            self.connect(&link_side, &node_side)?;
        }
        Ok(())
    }

    pub fn element(&self, id: &str) -> Option<&NetworkElement> {
        self.elements.get(id)
    }

    pub fn element_mut(&mut self, id: &str) -> Option<&mut NetworkElement> {
        self.elements.get_mut(id)
    }

    pub fn interface(&self, id: &str) -> Option<&NetworkInterface> {
        self.interfaces.get(id)
    }

    pub fn elements(&self) -> impl Iterator<Item = &NetworkElement> {
        self.elements.values()
    }

    pub fn interfaces(&self) -> impl Iterator<Item = &NetworkInterface> {
        self.interfaces.values()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NetworkElement> {
        self.elements.values().filter(|e| e.is_node())
    }

    pub fn links(&self) -> impl Iterator<Item = &NetworkElement> {
        self.elements.values().filter(|e| e.is_link())
    }

    pub fn element_count(&self) -> usize {
        self.elements.len()
    }

    pub fn interface_count(&self) -> usize {
        self.interfaces.len()
    }

    /// The nodes a link connects, ordered by the link's interface ids.
    pub fn link_endpoints(&self, link: &str) -> Option<(String, String)> {
        let ne = self.elements.get(link)?;
        let mut ends = ne.interfaces.iter().filter_map(|ni| {
            let peer = self.interfaces.get(ni)?.peer.as_ref()?;
            Some(self.interfaces.get(peer)?.owner.clone())
        });
        let a = ends.next()?;
        let b = ends.next()?;
        Some((a, b))
    }

    /// Rebuilds storage in the given element order (test helper for
    /// order-independence checks).
    pub fn reordered(&self, mut key: impl FnMut(&str) -> String) -> TopologyGraph {
        let mut elements: Vec<_> = self.elements.values().cloned().collect();
        elements.sort_by_key(|e| key(&e.id));
        let mut interfaces: Vec<_> = self.interfaces.values().cloned().collect();
        interfaces.sort_by_key(|n| key(&n.id));
        TopologyGraph {
            id: self.id.clone(),
            layer: self.layer,
            elements: elements.into_iter().map(|e| (e.id.clone(), e)).collect(),
            interfaces: interfaces.into_iter().map(|n| (n.id.clone(), n)).collect(),
        }
    }

    /// Raw insertion used by decoders that have already resolved references.
    pub(crate) fn from_parts(
        id: String,
        layer: Layer,
        elements: Vec<NetworkElement>,
        interfaces: Vec<NetworkInterface>,
    ) -> Self {
        TopologyGraph {
            id,
            layer,
            elements: elements.into_iter().map(|e| (e.id.clone(), e)).collect(),
            interfaces: interfaces.into_iter().map(|n| (n.id.clone(), n)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    BadRoot { ne: String, root: String },
    UnspecifiedInCompletedGraph { ne: String, key: String },
    GroupConflict { group: String, first: String, second: String },
    LinkArity { ne: String, count: usize },
    InvalidAmount { ne: String, kind: ResourceKind, amount: f64 },
    UnknownOwner { ni: String, owner: String },
    OwnershipMismatch { ne: String, ni: String },
    DanglingPeer { ni: String, peer: String },
    AsymmetricPeer { ni: String, peer: String },
    LinkEndpointNotNode { link: String, ni: String },
    NodePeeredToNode { ni: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::BadRoot { ne, root } => write!(f, "{ne}: type root {root:?} is neither node nor link"),
            Violation::UnspecifiedInCompletedGraph { ne, key } => {
                write!(f, "{ne}: feature {key:?} unspecified in a completed graph")
            }
            Violation::GroupConflict { group, first, second } => {
                write!(f, "group {group:?}: values {first:?} and {second:?} differ")
            }
            Violation::LinkArity { ne, count } => write!(f, "{ne}: link has {count} interfaces, expected 2"),
            Violation::InvalidAmount { ne, kind, amount } => write!(f, "{ne}: {kind} amount {amount} is invalid"),
            Violation::UnknownOwner { ni, owner } => write!(f, "{ni}: owner {owner:?} does not exist"),
            Violation::OwnershipMismatch { ne, ni } => write!(f, "{ne}: interface {ni:?} ownership mismatch"),
            Violation::DanglingPeer { ni, peer } => write!(f, "{ni}: peer {peer:?} does not exist"),
            Violation::AsymmetricPeer { ni, peer } => write!(f, "{ni}: peering with {peer:?} is not symmetric"),
            Violation::LinkEndpointNotNode { link, ni } => {
                write!(f, "{link}: interface {ni:?} is not attached to a node")
            }
            Violation::NodePeeredToNode { ni } => write!(f, "{ni}: node interface peered directly to a node"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("no violations");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

pub fn validate_graph(g: &TopologyGraph) -> ValidationReport {
    let mut out = Vec::new();
    let mut groups: BTreeMap<&str, &str> = BTreeMap::new();

    for ne in g.elements() {
        if !ne.is_node() && !ne.is_link() {
            out.push(Violation::BadRoot {
                ne: ne.id.clone(),
                root: ne.type_path.root().to_string(),
            });
        }
        for r in ne.resources.values() {
            if !(r.amount.is_finite() && r.amount >= 0.0) {
                out.push(Violation::InvalidAmount {
                    ne: ne.id.clone(),
                    kind: r.kind,
                    amount: r.amount,
                });
            }
        }
        for feat in ne.features.values() {
            match &feat.value {
                FeatureValue::Unspecified => {
                    if g.layer != Layer::Ol0 {
                        out.push(Violation::UnspecifiedInCompletedGraph {
                            ne: ne.id.clone(),
                            key: feat.key.clone(),
                        });
                    }
                }
                FeatureValue::Value(v) => {
                    if let Some(group) = feat.group.as_deref() {
                        match groups.get(group) {
                            Some(first) if first != v => out.push(Violation::GroupConflict {
                                group: group.to_string(),
                                first: first.to_string(),
                                second: v.clone(),
                            }),
                            Some(_) => {}
                            None => {
                                groups.insert(group, v);
                            }
                        }
                    }
                }
            }
        }
        for ni in &ne.interfaces {
            if g.interface(ni).is_none_or(|n| n.owner != ne.id) {
                out.push(Violation::OwnershipMismatch {
                    ne: ne.id.clone(),
                    ni: ni.clone(),
                });
            }
        }
        if ne.is_link() {
            if ne.interfaces.len() != 2 {
                out.push(Violation::LinkArity {
                    ne: ne.id.clone(),
                    count: ne.interfaces.len(),
                });
            }
            for ni in &ne.interfaces {
                let peer_owner = g
                    .interface(ni)
                    .and_then(|n| n.peer.as_deref())
                    .and_then(|p| g.interface(p))
                    .and_then(|p| g.element(&p.owner));
                if !peer_owner.is_some_and(|o| o.is_node()) {
                    out.push(Violation::LinkEndpointNotNode {
                        link: ne.id.clone(),
                        ni: ni.clone(),
                    });
                }
            }
        }
    }

    for ni in g.interfaces() {
        let Some(owner) = g.element(&ni.owner) else {
            out.push(Violation::UnknownOwner {
                ni: ni.id.clone(),
                owner: ni.owner.clone(),
            });
            continue;
        };
        if !owner.interfaces.contains(&ni.id) {
            out.push(Violation::OwnershipMismatch {
                ne: owner.id.clone(),
                ni: ni.id.clone(),
            });
        }
        let Some(peer) = &ni.peer else { continue };
        match g.interface(peer) {
            None => out.push(Violation::DanglingPeer {
                ni: ni.id.clone(),
                peer: peer.clone(),
            }),
            Some(p) => {
                if p.peer.as_deref() != Some(ni.id.as_str()) {
                    out.push(Violation::AsymmetricPeer {
                        ni: ni.id.clone(),
                        peer: peer.clone(),
                    });
                }
                let peer_is_node = g.element(&p.owner).is_some_and(|e| e.is_node());
                if owner.is_node() && peer_is_node {
                    out.push(Violation::NodePeeredToNode { ni: ni.id.clone() });
                }
            }
        }
    }

    ValidationReport { violations: out }
}

/// Sum of `kind` over all node elements.
pub fn aggregate_resources(g: &TopologyGraph, kind: ResourceKind) -> f64 {
    g.nodes().map(|n| n.amount(kind)).sum()
}

/// Induced subgraph over the node ids in `ne_ids`.
///
/// A link is kept when both endpoints are selected. Links listed in
/// `stub_links` are kept when at least one endpoint is selected; the
/// interface facing the missing endpoint is left unpeered for the caller to
/// attach a stub. Explicitly selected links with a missing endpoint that are
/// not stubbed fail with [`RdlError::DanglingEndpoint`].
pub fn extract_partial(
    g: &TopologyGraph,
    new_id: &str,
    ne_ids: &BTreeSet<String>,
    stub_links: &BTreeSet<String>,
) -> Result<TopologyGraph> {
    for id in ne_ids.iter().chain(stub_links) {
        if g.element(id).is_none() {
            return Err(RdlError::UnknownElement(id.clone()));
        }
    }
    let selected_nodes: BTreeSet<&str> = ne_ids
        .iter()
        .filter(|id| g.element(id).is_some_and(|e| e.is_node()))
        .map(String::as_str)
        .collect();

    let mut kept_links = BTreeSet::new();
    for link in g.links() {
        let Some((a, b)) = g.link_endpoints(&link.id) else {
            continue;
        };
        let has_a = selected_nodes.contains(a.as_str());
        let has_b = selected_nodes.contains(b.as_str());
        if (has_a && has_b) || (stub_links.contains(&link.id) && (has_a || has_b)) {
            kept_links.insert(link.id.as_str());
        } else if ne_ids.contains(&link.id) {
            let endpoint = if has_a { b } else { a };
            return Err(RdlError::DanglingEndpoint {
                link: link.id.clone(),
                endpoint,
            });
        }
    }

    let kept = |id: &str| selected_nodes.contains(id) || kept_links.contains(id);
    let mut out = TopologyGraph::new(new_id, g.layer);
    for ne in g.elements().filter(|e| kept(&e.id)) {
        out.add_element(ne.clone())?;
    }
    for ni in g.interfaces().filter(|n| kept(&n.owner)) {
        let peer_kept = ni
            .peer
            .as_deref()
            .and_then(|p| g.interface(p))
            .map(|p| kept(&p.owner));
        match peer_kept {
            // Node-side interface of a dropped link.
            Some(false) if g.element(&ni.owner).is_some_and(|e| e.is_node()) => continue,
            _ => out.add_interface(NetworkInterface::new(&ni.id, &ni.owner))?,
        }
    }
    for ni in g.interfaces() {
        let (Some(peer), true) = (&ni.peer, out.interface(&ni.id).is_some()) else {
            continue;
        };
        if ni.id < *peer && out.interface(peer).is_some() {
            out.connect(&ni.id, peer)?;
        }
    }
    Ok(out)
}

/// Values used to resolve vagueness when completing an OL0 graph.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompletionDefaults {
    pub features: BTreeMap<String, String>,
    /// Filled into host-like nodes that do not declare the kind at all.
    pub resources: BTreeMap<ResourceKind, f64>,
}

/// Node types that stand for hosts a virtual node can run on, excluding
/// provider stubs.
pub fn is_vnode_type(tp: &TypePath) -> bool {
    let s = tp.segments();
    s.len() >= 2 && s[0] == "node" && s[1] == "host" && !(s.len() == 3 && s[2] == "pip")
}

/// Completes a vague graph: every `unspecified` feature receives a value and
/// every consistency group is settled on a single value. The result is
/// labelled OL1.
pub fn complete(g: &TopologyGraph, defaults: &CompletionDefaults) -> Result<TopologyGraph> {
    let mut out = g.clone();
    out.layer = Layer::Ol1;

    // group -> members (ne, key) in element id order, plus the agreed value
    let mut members: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
    let mut chosen: BTreeMap<String, String> = BTreeMap::new();
    let mut ids: Vec<&String> = g.elements.keys().collect();
    ids.sort();
    for id in &ids {
        let ne = &g.elements[*id];
        for feat in ne.features.values() {
            let Some(group) = &feat.group else { continue };
            members
                .entry(group.clone())
                .or_default()
                .push((ne.id.clone(), feat.key.clone()));
            if let Some(v) = feat.value.specified() {
                match chosen.get(group) {
                    Some(first) if first != v => {
                        return Err(RdlError::ConflictingGroup {
                            group: group.clone(),
                            first: first.clone(),
                            second: v.to_string(),
                        })
                    }
                    Some(_) => {}
                    None => {
                        chosen.insert(group.clone(), v.to_string());
                    }
                }
            }
        }
    }
    for (group, list) in &members {
        if !chosen.contains_key(group) {
            let (ne, key) = &list[0];
            let v = defaults.features.get(key).ok_or_else(|| RdlError::NoDefault {
                ne: ne.clone(),
                key: key.clone(),
            })?;
            chosen.insert(group.clone(), v.clone());
        }
    }

    for id in ids {
        let ne = out.elements.get_mut(id).expect("id taken from graph");
        for feat in ne.features.values_mut() {
            if let Some(group) = &feat.group {
                feat.value = FeatureValue::Value(chosen[group].clone());
            } else if feat.value == FeatureValue::Unspecified {
                let v = defaults.features.get(&feat.key).ok_or_else(|| RdlError::NoDefault {
                    ne: id.clone(),
                    key: feat.key.clone(),
                })?;
                feat.value = FeatureValue::Value(v.clone());
            }
        }
        if is_vnode_type(&ne.type_path) {
            for (&kind, &amount) in &defaults.resources {
                ne.resources
                    .entry(kind)
                    .or_insert_with(|| Resource::new(kind, amount));
            }
        }
    }
    Ok(out)
}
