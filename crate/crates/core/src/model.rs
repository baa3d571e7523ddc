//! Structural models, sensor bindings, thresholds, and the resolved runtime
//! view the monitoring engine computes against.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::kinematics::{ColumnGeometry, Point3};

/// Horizontal offset (relative to column length) tolerated between the rest
/// endpoints of a column before it is rejected as non-vertical.
pub const VERTICAL_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub node_id: String,
    pub rest_position: Point3,
    #[serde(default)]
    pub is_ground: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub column_id: String,
    pub bottom_node_id: String,
    pub top_node_id: String,
}

fn unit_scale() -> f64 {
    1.0
}

/// The monitored geometry of one structure.
///
/// Rest positions are in model units. Measured displacements (meters) are
/// multiplied by `scale_factor` before they are applied to the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuralModel {
    pub structure_id: String,
    pub nodes: Vec<Node>,
    pub columns: Vec<Column>,
    /// Ordered column ids, each chain starting on a ground node.
    pub chains: Vec<Vec<String>>,
    #[serde(default = "unit_scale")]
    pub scale_factor: f64,
}

/// A single violated model invariant.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelViolation {
    EmptyStructureId,
    InvalidScaleFactor(f64),
    DuplicateNode(String),
    NonFiniteNode(String),
    DuplicateColumn(String),
    UnknownNode { column_id: String, node_id: String },
    ZeroLengthColumn(String),
    NonVerticalColumn(String),
    SharedTopNode(String),
    EmptyChain(usize),
    UnknownChainColumn { chain: usize, column_id: String },
    NonContiguousChain { chain: usize, position: usize },
    UngroundedChainBase { chain: usize, node_id: String },
    ColumnInSeveralChains(String),
    UnchainedColumn(String),
}

impl fmt::Display for ModelViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ModelViolation::*;
        match self {
            EmptyStructureId => write!(f, "structure_id is empty"),
            InvalidScaleFactor(s) => write!(f, "scale_factor must be positive and finite, got {s}"),
            DuplicateNode(id) => write!(f, "duplicate node id {id:?}"),
            NonFiniteNode(id) => write!(f, "node {id:?} has a non-finite rest position"),
            DuplicateColumn(id) => write!(f, "duplicate column id {id:?}"),
            UnknownNode { column_id, node_id } => {
                write!(f, "column {column_id:?} references unknown node {node_id:?}")
            }
            ZeroLengthColumn(id) => write!(f, "column {id:?} has zero rest length"),
            NonVerticalColumn(id) => write!(f, "column {id:?} is not vertical at rest"),
            SharedTopNode(id) => write!(f, "node {id:?} is the top of more than one column"),
            EmptyChain(i) => write!(f, "chain {i} is empty"),
            UnknownChainColumn { chain, column_id } => {
                write!(f, "chain {chain} references unknown column {column_id:?}")
            }
            NonContiguousChain { chain, position } => write!(
                f,
                "chain {chain} is not contiguous: column {position} does not start where column {} ends",
                position - 1
            ),
            UngroundedChainBase { chain, node_id } => {
                write!(f, "chain {chain} starts on node {node_id:?}, which is not a ground node")
            }
            ColumnInSeveralChains(id) => write!(f, "column {id:?} appears in more than one chain"),
            UnchainedColumn(id) => write!(f, "column {id:?} is not part of any chain"),
        }
    }
}

/// All invariant violations found in a model.
#[derive(Clone, Debug, PartialEq, thiserror::Error)]
#[error("invalid structural model: {}", join(.0))]
pub struct ValidationErrors(pub Vec<ModelViolation>);

fn join(violations: &[ModelViolation]) -> String {
    use core::fmt::Write;
    let mut out = String::new();
    for (i, v) in violations.iter().enumerate() {
        if i > 0 {
            out.push_str("; ");
        }
        let _ = write!(out, "{v}");
    }
    out
}

impl StructuralModel {
    pub fn node(&self, node_id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.node_id == node_id)
    }

    pub fn column(&self, column_id: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.column_id == column_id)
    }

    /// Checks every model invariant and reports all violations at once.
    pub fn validate(&self) -> Result<(), ValidationErrors> {
        let mut violations = Vec::new();
        if self.structure_id.is_empty() {
            violations.push(ModelViolation::EmptyStructureId);
        }
        if self.scale_factor.is_nan() || self.scale_factor <= 0.0 || !self.scale_factor.is_finite() {
            violations.push(ModelViolation::InvalidScaleFactor(self.scale_factor));
        }

        let mut nodes: BTreeMap<&str, &Node> = BTreeMap::new();
        for node in &self.nodes {
            if nodes.insert(node.node_id.as_str(), node).is_some() {
                violations.push(ModelViolation::DuplicateNode(node.node_id.clone()));
            }
            if !node.rest_position.is_finite() {
                violations.push(ModelViolation::NonFiniteNode(node.node_id.clone()));
            }
        }

        let mut columns: BTreeMap<&str, &Column> = BTreeMap::new();
        let mut tops: BTreeSet<&str> = BTreeSet::new();
        for column in &self.columns {
            if columns.insert(column.column_id.as_str(), column).is_some() {
                violations.push(ModelViolation::DuplicateColumn(column.column_id.clone()));
                continue;
            }
            let bottom = nodes.get(column.bottom_node_id.as_str());
            let top = nodes.get(column.top_node_id.as_str());
            for (found, id) in [(bottom, &column.bottom_node_id), (top, &column.top_node_id)] {
                if found.is_none() {
                    violations.push(ModelViolation::UnknownNode {
                        column_id: column.column_id.clone(),
                        node_id: id.clone(),
                    });
                }
            }
            if !tops.insert(column.top_node_id.as_str()) {
                violations.push(ModelViolation::SharedTopNode(column.top_node_id.clone()));
            }
            if let (Some(b), Some(t)) = (bottom, top) {
                let (b, t) = (b.rest_position, t.rest_position);
                if !b.is_finite() || !t.is_finite() {
                    continue;
                }
                let length = t.distance(&b);
                if length.is_nan() || length <= 0.0 {
                    violations.push(ModelViolation::ZeroLengthColumn(column.column_id.clone()));
                } else {
                    let horizontal = libm::hypot(t.x - b.x, t.y - b.y);
                    if t.z <= b.z || horizontal > VERTICAL_TOLERANCE * length {
                        violations.push(ModelViolation::NonVerticalColumn(column.column_id.clone()));
                    }
                }
            }
        }

        let mut chained: BTreeSet<&str> = BTreeSet::new();
        for (chain_index, chain) in self.chains.iter().enumerate() {
            if chain.is_empty() {
                violations.push(ModelViolation::EmptyChain(chain_index));
                continue;
            }
            let mut previous: Option<&Column> = None;
            for (position, column_id) in chain.iter().enumerate() {
                if !chained.insert(column_id.as_str()) {
                    violations.push(ModelViolation::ColumnInSeveralChains(column_id.clone()));
                }
                let Some(column) = columns.get(column_id.as_str()).copied() else {
                    violations.push(ModelViolation::UnknownChainColumn {
                        chain: chain_index,
                        column_id: column_id.clone(),
                    });
                    previous = None;
                    continue;
                };
                match previous {
                    None if position == 0 => {
                        let grounded = nodes
                            .get(column.bottom_node_id.as_str())
                            .is_some_and(|n| n.is_ground);
                        if !grounded {
                            violations.push(ModelViolation::UngroundedChainBase {
                                chain: chain_index,
                                node_id: column.bottom_node_id.clone(),
                            });
                        }
                    }
                    Some(prev) if prev.top_node_id != column.bottom_node_id => {
                        violations.push(ModelViolation::NonContiguousChain {
                            chain: chain_index,
                            position,
                        });
                    }
                    _ => {}
                }
                previous = Some(column);
            }
        }
        for column in &self.columns {
            if !chained.contains(column.column_id.as_str()) {
                violations.push(ModelViolation::UnchainedColumn(column.column_id.clone()));
            }
        }

        if violations.is_empty() {
            Ok(())
        } else {
            Err(ValidationErrors(violations))
        }
    }

    /// Same model with every rest position multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> StructuralModel {
        let mut out = self.clone();
        for node in &mut out.nodes {
            node.rest_position = node.rest_position * factor;
        }
        out
    }
}

/// Maps a device onto a node of a structure.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorBinding {
    pub device_id: String,
    pub structure_id: String,
    pub node_id: String,
    pub active: bool,
    pub updated_at_ms: i64,
}

/// Per-axis maximum displacement, meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub structure_id: String,
    #[serde(rename = "max_dx_m")]
    pub max_dx: f64,
    #[serde(rename = "max_dy_m")]
    pub max_dy: f64,
    #[serde(rename = "max_dz_m")]
    pub max_dz: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, thiserror::Error)]
#[error("threshold maxima must be positive and finite, got ({max_dx}, {max_dy}, {max_dz})")]
pub struct InvalidThresholds {
    pub max_dx: f64,
    pub max_dy: f64,
    pub max_dz: f64,
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<(), InvalidThresholds> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if ok(self.max_dx) && ok(self.max_dy) && ok(self.max_dz) {
            Ok(())
        } else {
            Err(InvalidThresholds { max_dx: self.max_dx, max_dy: self.max_dy, max_dz: self.max_dz })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedNode {
    pub node_id: String,
    pub rest_position: Point3,
    pub is_ground: bool,
    /// Device actively bound to this node, if any.
    pub device_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedColumn {
    pub column_id: String,
    pub bottom_node_id: String,
    pub top_node_id: String,
    pub geometry: ColumnGeometry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedChain {
    pub base_node_id: String,
    pub columns: Vec<ResolvedColumn>,
}

/// Immutable view of one structure at a given registry version.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    pub structure_id: String,
    pub config_version: u64,
    pub scale_factor: f64,
    pub nodes: Vec<ResolvedNode>,
    pub chains: Vec<ResolvedChain>,
    pub node_devices: BTreeMap<String, String>,
    /// Non-ground nodes without an active binding.
    pub unbound_nodes: Vec<String>,
    pub thresholds: Option<ThresholdConfig>,
}

impl RuntimeConfig {
    /// Resolves a validated model against its bindings and thresholds.
    ///
    /// Inactive bindings and bindings for other structures are ignored.
    pub fn resolve<'a>(
        model: &StructuralModel,
        bindings: impl IntoIterator<Item = &'a SensorBinding>,
        thresholds: Option<&ThresholdConfig>,
        config_version: u64,
    ) -> Result<RuntimeConfig, ValidationErrors> {
        model.validate()?;

        let mut node_devices = BTreeMap::new();
        for b in bindings {
            if b.active && b.structure_id == model.structure_id && model.node(&b.node_id).is_some() {
                node_devices.insert(b.node_id.clone(), b.device_id.clone());
            }
        }

        let nodes: Vec<ResolvedNode> = model
            .nodes
            .iter()
            .map(|n| ResolvedNode {
                node_id: n.node_id.clone(),
                rest_position: n.rest_position,
                is_ground: n.is_ground,
                device_id: node_devices.get(&n.node_id).cloned(),
            })
            .collect();
        let unbound_nodes = nodes
            .iter()
            .filter(|n| !n.is_ground && n.device_id.is_none())
            .map(|n| n.node_id.clone())
            .collect();

        let chains = model
            .chains
            .iter()
            .map(|chain| {
                let columns: Vec<ResolvedColumn> = chain
                    .iter()
                    .map(|id| {
                        // validate() guarantees every lookup below succeeds.
                        let c = model.column(id).expect("validated column");
                        let b = model.node(&c.bottom_node_id).expect("validated node");
                        let t = model.node(&c.top_node_id).expect("validated node");
                        ResolvedColumn {
                            column_id: c.column_id.clone(),
                            bottom_node_id: c.bottom_node_id.clone(),
                            top_node_id: c.top_node_id.clone(),
                            geometry: ColumnGeometry::new(b.rest_position, t.rest_position)
                                .expect("validated length"),
                        }
                    })
                    .collect();
                ResolvedChain { base_node_id: columns[0].bottom_node_id.clone(), columns }
            })
            .collect();

        Ok(RuntimeConfig {
            structure_id: model.structure_id.clone(),
            config_version,
            scale_factor: model.scale_factor,
            nodes,
            chains,
            node_devices,
            unbound_nodes,
            thresholds: thresholds.cloned(),
        })
    }

    pub fn node(&self, node_id: &str) -> Option<&ResolvedNode> {
        self.nodes.iter().find(|n| n.node_id == node_id)
    }

    pub fn column_count(&self) -> usize {
        self.chains.iter().map(|c| c.columns.len()).sum()
    }
}

/// The two-level, four-bay frame used throughout the examples and tests:
/// four ground nodes at the corners of a `width` x `depth` rectangle and two
/// stories of height `story_height`, one vertical column per corner and story.
///
/// Node ids are `G-N{k}`, `L1-N{k}` and `L2-N{k}` for corners `k = 1..=4`;
/// column ids are `C{level}-{k}`.
pub fn two_level_frame(structure_id: &str, width: f64, depth: f64, story_height: f64) -> StructuralModel {
    use alloc::format;

    let corners = [(0.0, 0.0), (width, 0.0), (width, depth), (0.0, depth)];
    let mut nodes = Vec::new();
    let mut columns = Vec::new();
    let mut chains = Vec::new();
    for (level, prefix) in ["G", "L1", "L2"].iter().enumerate() {
        for (k, &(x, y)) in corners.iter().enumerate() {
            nodes.push(Node {
                node_id: format!("{prefix}-N{}", k + 1),
                rest_position: Point3::new(x, y, level as f64 * story_height),
                is_ground: level == 0,
            });
        }
    }
    for k in 1..=4 {
        let mut chain = Vec::new();
        for (level, (bottom, top)) in [("G", "L1"), ("L1", "L2")].iter().enumerate() {
            let column_id = format!("C{}-{k}", level + 1);
            columns.push(Column {
                column_id: column_id.clone(),
                bottom_node_id: format!("{bottom}-N{k}"),
                top_node_id: format!("{top}-N{k}"),
            });
            chain.push(column_id);
        }
        chains.push(chain);
    }
    StructuralModel {
        structure_id: structure_id.into(),
        nodes,
        columns,
        chains,
        scale_factor: 1.0,
    }
}
