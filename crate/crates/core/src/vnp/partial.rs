use std::collections::{BTreeMap, BTreeSet};

use crate::rdl::{extract_partial, Feature, Layer, NetworkElement, NetworkInterface, TopologyGraph, TypePath};
use crate::solver::MappingLayer;

use super::VnpError;
use crate::pip::VlanRange;

/// Id of the stub standing for `pip` inside a neighbour's partial.
pub fn stub_id(pip: &str) -> String {
    format!("stub.{pip}")
}

/// A request link whose endpoints sit in different providers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossLink {
    pub link: String,
    pub ends: [(String, String); 2],
    pub vlan: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub partials: BTreeMap<String, TopologyGraph>,
    pub cross_links: Vec<CrossLink>,
}

impl Partition {
    pub fn transit_tags(&self) -> BTreeMap<String, u16> {
        self.cross_links.iter().map(|c| (c.link.clone(), c.vlan)).collect()
    }
}

/// Splits a completed request by provider. Cross-provider links become
/// `/link/transit` elements tagged `vlan=<tag>`, attached to a
/// `/node/host/pip` stub naming the remote provider, in both partials.
pub fn generate_partials(
    cn_id: &str,
    ol1: &TopologyGraph,
    ml: &MappingLayer,
    pool: VlanRange,
    in_use: &BTreeSet<u16>,
) -> Result<Partition, VnpError> {
    let mut by_pip: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for n in ol1.nodes() {
        let pip = ml
            .host_of(&n.id)
            .ok_or_else(|| VnpError::InvalidRequest(format!("{} is not mapped", n.id)))?;
        by_pip.entry(pip.to_string()).or_default().insert(n.id.clone());
    }
    let pip_of = |node: &str| ml.host_of(node).unwrap_or_default().to_string();

    let mut cross_links = Vec::new();
    let mut taken = in_use.clone();
    let mut links: Vec<&NetworkElement> = ol1.links().collect();
    links.sort_by(|a, b| a.id.cmp(&b.id));
    for l in links {
        let Some((a, b)) = ol1.link_endpoints(&l.id) else { continue };
        let (pa, pb) = (pip_of(&a), pip_of(&b));
        if pa == pb {
            continue;
        }
        let vlan = pool
            .iter()
            .find(|t| !taken.contains(t))
            .ok_or(VnpError::TransitVlanExhausted)?;
        taken.insert(vlan);
        cross_links.push(CrossLink {
            link: l.id.clone(),
            ends: [(a, pa), (b, pb)],
            vlan,
        });
    }

    let transit = TypePath::parse("/link/transit").expect("static type path");
    let mut partials = BTreeMap::new();
    for (pip, nodes) in &by_pip {
        let stubs: BTreeSet<String> = cross_links
            .iter()
            .filter(|c| c.ends.iter().any(|(_, p)| p == pip))
            .map(|c| c.link.clone())
            .collect();
        let mut g = extract_partial(ol1, &format!("{cn_id}@{pip}"), nodes, &stubs)
            .map_err(|e| VnpError::InvalidRequest(e.to_string()))?;
        g.layer = Layer::Ol0;
        for c in cross_links.iter().filter(|c| stubs.contains(&c.link)) {
            let remote = &c.ends.iter().find(|(_, p)| p != pip).expect("cross link").1;
            let stub = stub_id(remote);
            if g.element(&stub).is_none() {
                if ol1.element(&stub).is_some() {
                    return Err(VnpError::InvalidRequest(format!("request uses reserved id {stub}")));
                }
                g.add_node(
                    NetworkElement::of_type(&stub, "/node/host/pip").with_feature(Feature::new("pip", remote)),
                )
                .map_err(|e| VnpError::InvalidRequest(e.to_string()))?;
            }
            let dangling = g
                .element(&c.link)
                .expect("stub link kept")
                .interfaces
                .iter()
                .find(|ni| g.interface(ni).is_some_and(|n| n.peer.is_none()))
                .cloned()
                .ok_or_else(|| VnpError::InvalidRequest(format!("{} has no free interface", c.link)))?;
            let link = g.element_mut(&c.link).expect("stub link kept");
            link.type_path = transit.clone();
            link.set_feature(Feature::new("vlan", &c.vlan.to_string()));
            let stub_ni = format!("{stub}.{}", c.link);
            let err = |e: crate::rdl::RdlError| VnpError::InvalidRequest(e.to_string());
            g.add_interface(NetworkInterface::new(&stub_ni, &stub)).map_err(err)?;
            g.connect(&dangling, &stub_ni).map_err(err)?;
        }
        partials.insert(pip.clone(), g);
    }
    Ok(Partition { partials, cross_links })
}
