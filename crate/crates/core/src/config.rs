//! TOML configuration for the provider and broker daemons. Relative file
//! paths are resolved against the directory of the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use crate::codec::read_graph_file;
use crate::pip::{PipConfig, VlanRange};
use crate::rdl::ResourceKind;
use crate::solver::{ObjectiveMode, ObjectiveSpec};
use crate::vnp::VnpConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Toml {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipdFile {
    pub id: String,
    pub substrate: PathBuf,
    pub listen: Option<String>,
    pub journal: Option<PathBuf>,
    pub ttl_ms: Option<u64>,
    pub vlan_pool: Option<[u16; 2]>,
    pub image_cache: Option<bool>,
    pub objective: Option<String>,
    pub max_path_len: Option<usize>,
    #[serde(default)]
    pub neighbors: BTreeMap<String, f64>,
    #[serde(default)]
    pub defaults: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefaultsSection {
    #[serde(default)]
    pub features: BTreeMap<String, String>,
    #[serde(default)]
    pub resources: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VnpdFile {
    pub transit: PathBuf,
    pub listen: Option<String>,
    pub journal: Option<PathBuf>,
    pub transit_vlans: Option<[u16; 2]>,
    pub timeout_ms: Option<u64>,
    pub pips: BTreeMap<String, String>,
    #[serde(default)]
    pub defaults: DefaultsSection,
}

/// A loaded daemon config plus the optional listen address and journal
/// directory it names.
#[derive(Debug, Clone)]
pub struct Loaded<C> {
    pub config: C,
    pub listen: Option<String>,
    pub journal: Option<PathBuf>,
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.into(),
        source,
    })?;
    toml::from_str(&text).map_err(|source| ConfigError::Toml {
        path: path.into(),
        source,
    })
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn range(r: [u16; 2], what: &str) -> Result<VlanRange, ConfigError> {
    if r[0] > r[1] || r[0] == 0 || r[1] > 4094 {
        return Err(ConfigError::Invalid(format!("bad {what} range {}-{}", r[0], r[1])));
    }
    Ok(VlanRange::new(r[0], r[1]))
}

pub fn load_pipd(path: &Path) -> Result<Loaded<PipConfig>, ConfigError> {
    let f: PipdFile = read_toml(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let substrate = read_graph_file(&resolve(base, &f.substrate)).map_err(ConfigError::Invalid)?;
    let mut cfg = PipConfig::new(&f.id, substrate);
    if let Some(t) = f.ttl_ms {
        cfg.ttl_ms = t;
    }
    if let Some(r) = f.vlan_pool {
        cfg.vlan_pool = range(r, "vlan_pool")?;
    }
    if let Some(c) = f.image_cache {
        cfg.image_cache = c;
    }
    if let Some(o) = &f.objective {
        let mode: ObjectiveMode = o.parse().map_err(ConfigError::Invalid)?;
        cfg.objective = match mode {
            ObjectiveMode::MinCongestion => ObjectiveSpec::min_congestion(),
            ObjectiveMode::Compact => ObjectiveSpec::compact(),
            ObjectiveMode::MigrationAware => {
                return Err(ConfigError::Invalid("migration-aware needs a prior embedding".into()))
            }
        };
    }
    if let Some(l) = f.max_path_len {
        cfg.max_path_len = l;
    }
    cfg.neighbors = f.neighbors;
    cfg.defaults.features.extend(f.defaults);
    Ok(Loaded {
        config: cfg,
        listen: f.listen,
        journal: f.journal.map(|j| resolve(base, &j)),
    })
}

pub fn load_vnpd(path: &Path) -> Result<Loaded<VnpConfig>, ConfigError> {
    let f: VnpdFile = read_toml(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let transit = read_graph_file(&resolve(base, &f.transit)).map_err(ConfigError::Invalid)?;
    let mut cfg = VnpConfig::new(transit);
    cfg.pips = f.pips;
    if let Some(r) = f.transit_vlans {
        cfg.transit_vlans = range(r, "transit_vlans")?;
    }
    if let Some(t) = f.timeout_ms {
        cfg.timeout = Duration::from_millis(t);
    }
    cfg.defaults.features.extend(f.defaults.features);
    for (k, v) in f.defaults.resources {
        let kind: ResourceKind = k.parse().map_err(|e| ConfigError::Invalid(format!("{e}")))?;
        cfg.defaults.resources.insert(kind, v);
    }
    Ok(Loaded {
        config: cfg,
        listen: f.listen,
        journal: f.journal.map(|j| resolve(base, &j)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::write_graph_file;
    use crate::rdl::{Layer, NetworkElement, Resource, TopologyGraph};

    #[test]
    fn pipd_file_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut ul = TopologyGraph::new("ul", Layer::Ul);
        ul.add_node(NetworkElement::of_type("h1", "/node/host/sim").with_resource(Resource::ram(1024.0)))
            .unwrap();
        write_graph_file(&dir.path().join("ul.cng"), &ul).unwrap();
        let cfg = dir.path().join("pipd.toml");
        std::fs::write(
            &cfg,
            "id = \"pip1\"\nsubstrate = \"ul.cng\"\nvlan_pool = [300, 310]\njournal = \"j\"\n[neighbors]\npip2 = 100.0\n",
        )
        .unwrap();
        let l = load_pipd(&cfg).unwrap();
        assert_eq!(l.config.id, "pip1");
        assert_eq!(l.config.vlan_pool, VlanRange::new(300, 310));
        assert_eq!(l.config.neighbors["pip2"], 100.0);
        assert_eq!(l.journal, Some(dir.path().join("j")));
        assert_eq!(l.config.substrate, ul);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("vnpd.toml");
        std::fs::write(&cfg, "transit = \"t.cng\"\nbogus = 1\n[pips]\n").unwrap();
        assert!(matches!(load_vnpd(&cfg), Err(ConfigError::Toml { .. })));
    }
}
