//! TOML run configuration: cluster shape and cost model coefficients.
//!
//! ```toml
//! [cluster]
//! nodes = 4
//! ranks_per_node = 8          # or per-node: [8, 8, 4, 2]
//! placement = "smp"           # or an explicit rank->node map: [0, 1, 0, 1]
//!
//! [cost]
//! alpha = 1000.0              # any coefficient may be omitted; defaults apply
//! beta = 0.5
//! ```
//!
//! Both sections are optional; command-line flags take precedence over the
//! file, and the file over built-in defaults.

use std::path::Path;

use serde::Deserialize;

use crate::cluster::{ClusterSpec, NodeId, Placement};
use crate::error::{config_err, Result, SimError};
use crate::sim::CostModel;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub cluster: Option<ClusterSection>,
    pub cost: Option<CostSection>,
}

/// Rank count per node: one number for a uniform cluster, a list for an
/// irregular one.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum RankCounts {
    Uniform(usize),
    PerNode(Vec<usize>),
}

/// `"smp"` for consecutive fill, or an explicit rank-to-node map.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum PlacementSpec {
    Named(String),
    Map(Vec<NodeId>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    pub nodes: Option<usize>,
    pub ranks_per_node: RankCounts,
    pub placement: Option<PlacementSpec>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub barrier_base: Option<f64>,
    pub barrier_per_rank: Option<f64>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<ConfigFile> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Io(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            SimError::Config(msg) => SimError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<ConfigFile> {
        toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))
    }

    /// The cluster described by the file, if it has a `[cluster]` section.
    pub fn cluster_spec(&self) -> Result<Option<ClusterSpec>> {
        let Some(section) = &self.cluster else {
            return Ok(None);
        };
        section.to_spec().map(Some)
    }

    /// The cost model from the file, with defaults for anything omitted.
    pub fn cost_model(&self) -> Result<CostModel> {
        let section = self.cost.clone().unwrap_or_default();
        let dflt = CostModel::default();
        let cost = CostModel {
            alpha: section.alpha.unwrap_or(dflt.alpha),
            beta: section.beta.unwrap_or(dflt.beta),
            gamma: section.gamma.unwrap_or(dflt.gamma),
            barrier_base: section.barrier_base.unwrap_or(dflt.barrier_base),
            barrier_per_rank: section.barrier_per_rank.unwrap_or(dflt.barrier_per_rank),
        };
        cost.validate()?;
        Ok(cost)
    }
}

impl ClusterSection {
    fn to_spec(&self) -> Result<ClusterSpec> {
        let mut spec = match &self.ranks_per_node {
            RankCounts::Uniform(ppn) => {
                let Some(nodes) = self.nodes else {
                    return config_err(
                        "a uniform ranks_per_node needs an explicit node count (`nodes = ...`)",
                    );
                };
                ClusterSpec::uniform(nodes, *ppn)
            }
            RankCounts::PerNode(counts) => {
                if let Some(nodes) = self.nodes {
                    if nodes != counts.len() {
                        return config_err(format!(
                            "nodes = {nodes} but ranks_per_node lists {} nodes",
                            counts.len()
                        ));
                    }
                }
                ClusterSpec::irregular(counts.clone())
            }
        };
        spec = match &self.placement {
            None => spec,
            Some(PlacementSpec::Named(name)) if name == "smp" => {
                spec.with_placement(Placement::SmpStyle)
            }
            Some(PlacementSpec::Named(name)) => {
                return config_err(format!(
                    "unknown placement \"{name}\" (expected \"smp\" or a rank->node map)"
                ));
            }
            Some(PlacementSpec::Map(map)) => {
                spec.with_placement(Placement::ExplicitMap(map.clone()))
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}
