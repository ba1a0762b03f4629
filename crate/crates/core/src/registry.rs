//! Site registry loaded from `sites.json`: canonical model, per-site mapping
//! tables, command allow-lists, inter-site links and operator credentials.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::command::CommandKind;
use crate::model::{validate_model, validate_table, CanonicalModel, MappingRow, MappingTable, ModelIssue};
use crate::netem::{link_seed, LinkModel, LinkSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("ConfigError: cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("ConfigError: {0}")]
    Document(String),
    #[error("ConfigError: {}", .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<ModelIssue>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteConfig {
    pub id: String,
    /// Local name ↔ canonical topic rows of this site.
    #[serde(default)]
    pub mapping: Vec<MappingRow>,
    #[serde(default)]
    pub allow_list: BTreeSet<CommandKind>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
}

impl SiteConfig {
    pub fn table(&self) -> MappingTable {
        MappingTable { site_id: self.id.clone(), rows: self.mapping.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorConfig {
    pub id: String,
    pub site: String,
    pub token: String,
    /// Commands this operator may use; defaults to the site's allow-list and
    /// is always intersected with it.
    #[serde(default)]
    pub commands: Option<BTreeSet<CommandKind>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Registry {
    pub model: CanonicalModel,
    pub sites: Vec<SiteConfig>,
    #[serde(default)]
    pub operators: Vec<OperatorConfig>,
}

impl Registry {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let reg: Registry = serde_json::from_str(text).map_err(|e| ConfigError::Document(e.to_string()))?;
        let issues = reg.validate();
        if issues.is_empty() {
            Ok(reg)
        } else {
            Err(ConfigError::Invalid(issues))
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    /// Model, table, link and operator issues; empty means usable.
    pub fn validate(&self) -> Vec<ModelIssue> {
        let mut issues = validate_model(&self.model);
        let mut ids = BTreeSet::new();
        for site in &self.sites {
            if !ids.insert(site.id.as_str()) {
                issues.push(ModelIssue::new("duplicate-site", &site.id));
            }
            for mut issue in validate_table(&site.table(), &self.model) {
                issue.subject = format!("{}:{}", site.id, issue.subject);
                issues.push(issue);
            }
        }
        for site in &self.sites {
            for link in &site.links {
                if !ids.contains(link.peer.as_str()) || link.peer == site.id {
                    issues.push(ModelIssue::new("unknown-peer", &format!("{}:{}", site.id, link.peer)));
                }
                if !link.is_valid() {
                    issues.push(ModelIssue::new("invalid-link", &format!("{}:{}", site.id, link.peer)));
                }
            }
        }
        let mut ops = BTreeSet::new();
        for op in &self.operators {
            if !ops.insert(op.id.as_str()) {
                issues.push(ModelIssue::new("duplicate-operator", &op.id));
            }
            if !ids.contains(op.site.as_str()) {
                issues.push(ModelIssue::new("unknown-site", &op.site));
            }
        }
        issues.sort();
        issues
    }

    pub fn site(&self, id: &str) -> Option<&SiteConfig> {
        self.sites.iter().find(|s| s.id == id)
    }

    /// The link between two sites. A link declared on only one side applies
    /// in both directions; a declaration on the sending side wins.
    pub fn link_spec(&self, from: &str, to: &str) -> Option<&LinkSpec> {
        let direct = self.site(from).and_then(|s| s.links.iter().find(|l| l.peer == to));
        direct.or_else(|| self.site(to).and_then(|s| s.links.iter().find(|l| l.peer == from)))
    }

    /// Stable id of the directed link `from → to`.
    pub fn link_id(from: &str, to: &str) -> String {
        format!("{from}->{to}")
    }

    /// Seeded link model for `from → to`; ideal inside one site.
    pub fn link_model(&self, from: &str, to: &str, experiment_seed: u64) -> Option<LinkModel> {
        let seed = link_seed(experiment_seed, &Self::link_id(from, to));
        if from == to {
            return Some(LinkModel { seed, ..LinkModel::ideal() });
        }
        self.link_spec(from, to).map(|l| l.to_model(seed))
    }

    /// Commands granted to an operator: its own set intersected with the site allow-list.
    pub fn operator_grants(&self, op: &OperatorConfig) -> BTreeSet<CommandKind> {
        let allow = self.site(&op.site).map(|s| s.allow_list.clone()).unwrap_or_default();
        match &op.commands {
            Some(c) => c.intersection(&allow).copied().collect(),
            None => allow,
        }
    }

    pub fn operator_by_token(&self, token: &str) -> Option<&OperatorConfig> {
        self.operators.iter().find(|o| o.token == token)
    }

    /// Replaces every inter-site link with `profile` (peer kept), for latency sweeps.
    pub fn with_uniform_links(&self, profile: &LinkSpec) -> Registry {
        let mut reg = self.clone();
        for site in &mut reg.sites {
            for link in &mut site.links {
                let peer = link.peer.clone();
                *link = LinkSpec { peer, ..profile.clone() };
            }
        }
        reg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = r#"{
        "model": {"version": "1.0.0",
            "units": [{"symbol": "V", "base": "V", "scale": 1.0, "offset": 0.0}],
            "entries": [{"name": "siteA.bus.v", "kind": "measurement", "unit": "V", "domain": "real"}]},
        "sites": [
            {"id": "siteA", "mapping": [{"local": "V1", "canonical": "siteA.bus.v", "unit": "V"}],
             "allow_list": ["get_status", "set_value"],
             "links": [{"peer": "siteB", "base_delay_ms": 15, "jitter": {"uniform": {"a_ms": 5}}, "loss": 0.001}]},
            {"id": "siteB", "allow_list": ["get_status"]}
        ],
        "operators": [{"id": "op", "site": "siteA", "token": "t", "commands": ["set_value", "start_experiment"]}]
    }"#;

    #[test]
    fn links_are_symmetric_and_seeded_per_direction() {
        let reg = Registry::from_json(DOC).unwrap();
        let ab = reg.link_model("siteA", "siteB", 7).unwrap();
        let ba = reg.link_model("siteB", "siteA", 7).unwrap();
        assert_eq!(ab.base_delay, 15_000_000);
        assert_eq!(ab.base_delay, ba.base_delay);
        assert_ne!(ab.seed, ba.seed);
        assert_eq!(reg.link_model("siteA", "siteA", 7).unwrap().base_delay, 0);
    }

    #[test]
    fn operator_grants_are_intersected_with_allow_list() {
        let reg = Registry::from_json(DOC).unwrap();
        let grants = reg.operator_grants(&reg.operators[0]);
        assert_eq!(grants, BTreeSet::from([CommandKind::SetValue]));
    }

    #[test]
    fn unknown_command_kind_rejected() {
        let doc = DOC.replace(r#""get_status", "set_value""#, r#""reboot""#);
        assert!(matches!(Registry::from_json(&doc), Err(ConfigError::Document(_))));
    }

    #[test]
    fn bad_mapping_reported() {
        let doc = DOC.replace(r#""canonical": "siteA.bus.v""#, r#""canonical": "siteA.bus.q""#);
        let Err(ConfigError::Invalid(issues)) = Registry::from_json(&doc) else { panic!() };
        assert_eq!(issues[0].code, "unknown-canonical");
    }
}
