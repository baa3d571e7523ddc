//! Time-aligned displacement frames, pose snapshots and threshold warnings.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::kinematics::{center_pose, solve_chain, ColumnPose, KinematicsError, Point3};
use crate::model::{RuntimeConfig, ThresholdConfig};

/// Default staleness window: four sample periods at 20 Hz.
pub const DEFAULT_STALENESS_WINDOW_MS: i64 = 200;

/// One device reading, displacements in meters along the global axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementSample {
    pub device_id: String,
    pub t_ms: i64,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl DisplacementSample {
    pub fn displacement(&self) -> Point3 {
        Point3::new(self.dx, self.dy, self.dz)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SampleRejection {
    #[error("timestamp {t_ms} does not follow previous sample at {last_t_ms}")]
    OutOfOrder { t_ms: i64, last_t_ms: i64 },
    #[error("displacement has a non-finite component")]
    NonFinite,
}

/// Recent samples of one device, ordered by strictly increasing timestamp.
///
/// Only the newest `capacity` samples are retained; frames are assembled
/// close to real time so older history is never consulted.
#[derive(Clone, Debug)]
pub struct SampleBuffer {
    samples: VecDeque<(i64, Point3)>,
    capacity: usize,
}

impl SampleBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        SampleBuffer { samples: VecDeque::with_capacity(capacity.min(64)), capacity }
    }

    pub fn last_t_ms(&self) -> Option<i64> {
        self.samples.back().map(|s| s.0)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn push(&mut self, t_ms: i64, displacement: Point3) -> Result<(), SampleRejection> {
        if let Some(last_t_ms) = self.last_t_ms() {
            if t_ms <= last_t_ms {
                return Err(SampleRejection::OutOfOrder { t_ms, last_t_ms });
            }
        }
        if !displacement.is_finite() {
            return Err(SampleRejection::NonFinite);
        }
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back((t_ms, displacement));
        Ok(())
    }

    /// Newest sample with `t <= t_ms`.
    pub fn latest_at_or_before(&self, t_ms: i64) -> Option<(i64, Point3)> {
        let idx = self.samples.partition_point(|&(t, _)| t <= t_ms);
        idx.checked_sub(1).map(|i| self.samples[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeDisplacement {
    pub node_id: String,
    pub device_id: Option<String>,
    pub displacement: Point3,
    pub source_t_ms: Option<i64>,
    pub stale: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeDisplacementFrame {
    pub structure_id: String,
    pub frame_t_ms: i64,
    pub config_version: u64,
    pub nodes: Vec<NodeDisplacement>,
}

impl NodeDisplacementFrame {
    pub fn node(&self, node_id: &str) -> Option<&NodeDisplacement> {
        self.nodes.iter().find(|n| n.node_id == node_id)
    }

    pub fn stale_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.stale).count()
    }
}

/// Builds the displacement frame for `frame_t_ms`.
///
/// `latest` returns, for a device, its newest sample at or before
/// `frame_t_ms`. Every sensed node and every non-ground node gets an entry;
/// a node is stale when its source sample is older than `staleness_window_ms`
/// or missing, in which case it holds its last value (zero if none).
pub fn assemble_frame<F>(
    config: &RuntimeConfig,
    frame_t_ms: i64,
    staleness_window_ms: i64,
    mut latest: F,
) -> NodeDisplacementFrame
where
    F: FnMut(&str, i64) -> Option<(i64, Point3)>,
{
    let mut nodes = Vec::new();
    for node in &config.nodes {
        let sample = node.device_id.as_deref().and_then(|d| latest(d, frame_t_ms));
        if node.is_ground && node.device_id.is_none() {
            continue;
        }
        let (source_t_ms, displacement) = match sample {
            Some((t, d)) => (Some(t), d),
            None => (None, Point3::ZERO),
        };
        let stale = source_t_ms.is_none_or(|t| t < frame_t_ms - staleness_window_ms);
        nodes.push(NodeDisplacement {
            node_id: node.node_id.clone(),
            device_id: node.device_id.clone(),
            displacement,
            source_t_ms,
            stale,
        });
    }
    NodeDisplacementFrame {
        structure_id: config.structure_id.clone(),
        frame_t_ms,
        config_version: config.config_version,
        nodes,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodePosition {
    pub node_id: String,
    pub position: Point3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnState {
    pub column_id: String,
    pub chain_index: usize,
    pub bottom_node_id: String,
    pub top_node_id: String,
    pub length: f64,
    pub pose: ColumnPose,
    /// Measured top z displacement minus the computed one; `None` when the
    /// top node has never reported.
    pub z_residual: Option<f64>,
}

/// A chain that could not be solved in a frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainFailure {
    pub chain_index: usize,
    pub column_index: usize,
    pub column_id: String,
    pub reason: String,
}

/// Error carried for a chain that failed to solve.
#[derive(Clone, Copy, Debug, PartialEq, thiserror::Error)]
#[error("chain {chain_index}, column {column_index}: {source}")]
pub struct FrameComputationError {
    pub chain_index: usize,
    pub column_index: usize,
    pub source: KinematicsError,
}

/// Fully solved structure state at one instant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSnapshot {
    pub structure_id: String,
    pub frame_t_ms: i64,
    pub config_version: u64,
    /// Deformed node positions, model order.
    pub nodes: Vec<NodePosition>,
    /// Column poses in chain order.
    pub columns: Vec<ColumnState>,
    pub failed_chains: Vec<ChainFailure>,
}

impl FrameSnapshot {
    pub fn node_position(&self, node_id: &str) -> Option<Point3> {
        self.nodes.iter().find(|n| n.node_id == node_id).map(|n| n.position)
    }

    pub fn column(&self, column_id: &str) -> Option<&ColumnState> {
        self.columns.iter().find(|c| c.column_id == column_id)
    }
}

/// Solves every chain of `config` against `frame`.
///
/// Top node heights always come from the rigid-length constraint; measured z
/// is only used for ground nodes and for the reported residual. A chain that
/// fails is reported in `failed_chains` and contributes no columns, while
/// every other chain is still solved. The errors are returned alongside.
pub fn compute_snapshot(
    config: &RuntimeConfig,
    frame: &NodeDisplacementFrame,
) -> (FrameSnapshot, Vec<FrameComputationError>) {
    let scale = config.scale_factor;
    let measured: BTreeMap<&str, &NodeDisplacement> =
        frame.nodes.iter().map(|n| (n.node_id.as_str(), n)).collect();
    let displacement_of = |node_id: &str| {
        measured.get(node_id).map(|n| n.displacement * scale).unwrap_or(Point3::ZERO)
    };

    let mut positions: BTreeMap<&str, Point3> = BTreeMap::new();
    let mut columns = Vec::with_capacity(config.column_count());
    let mut failed_chains = Vec::new();
    let mut errors = Vec::new();

    for (chain_index, chain) in config.chains.iter().enumerate() {
        let base_rest = chain.columns[0].geometry.rest_bottom();
        let base_primed = base_rest + displacement_of(&chain.base_node_id);
        let geometry: Vec<_> = chain.columns.iter().map(|c| c.geometry).collect();
        let measured_xy: Vec<(f64, f64)> = chain
            .columns
            .iter()
            .map(|c| {
                let rest = c.geometry.rest_top();
                let d = displacement_of(&c.top_node_id);
                (rest.x + d.x, rest.y + d.y)
            })
            .collect();

        let solutions = match solve_chain(&geometry, &measured_xy, base_primed) {
            Ok(s) => s,
            Err(e) => {
                let column_id = chain.columns[e.column_index].column_id.clone();
                failed_chains.push(ChainFailure {
                    chain_index,
                    column_index: e.column_index,
                    column_id,
                    reason: alloc::format!("{}", e.source),
                });
                errors.push(FrameComputationError {
                    chain_index,
                    column_index: e.column_index,
                    source: e.source,
                });
                positions.entry(chain.base_node_id.as_str()).or_insert(base_primed);
                continue;
            }
        };

        positions.entry(chain.base_node_id.as_str()).or_insert(base_primed);
        for (column, solution) in chain.columns.iter().zip(&solutions) {
            let bottom_shift = solution.bottom_primed - column.geometry.rest_bottom();
            let z_residual = measured
                .get(column.top_node_id.as_str())
                .filter(|n| n.source_t_ms.is_some())
                .map(|n| n.displacement.z * scale - (solution.top_primed.z - column.geometry.rest_top().z));
            positions.insert(column.top_node_id.as_str(), solution.top_primed);
            columns.push(ColumnState {
                column_id: column.column_id.clone(),
                chain_index,
                bottom_node_id: column.bottom_node_id.clone(),
                top_node_id: column.top_node_id.clone(),
                length: column.geometry.length(),
                pose: center_pose(solution, bottom_shift),
                z_residual,
            });
        }
    }

    let nodes = config
        .nodes
        .iter()
        .filter_map(|n| {
            positions.get(n.node_id.as_str()).map(|&position| NodePosition {
                node_id: n.node_id.clone(),
                position,
            })
        })
        .collect();

    (
        FrameSnapshot {
            structure_id: config.structure_id.clone(),
            frame_t_ms: frame.frame_t_ms,
            config_version: frame.config_version,
            nodes,
            columns,
            failed_chains,
        },
        errors,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

/// A node displacement strictly beyond its axis maximum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarningEvent {
    pub structure_id: String,
    pub node_id: String,
    pub axis: Axis,
    pub value: f64,
    pub max: f64,
    pub frame_t_ms: i64,
}

/// One warning per (node, axis) whose `|displacement|` exceeds the axis
/// maximum, ordered by node id then axis.
pub fn evaluate_thresholds(frame: &NodeDisplacementFrame, thresholds: &ThresholdConfig) -> Vec<WarningEvent> {
    let mut out = Vec::new();
    for node in &frame.nodes {
        let d = node.displacement;
        for (axis, value, max) in [
            (Axis::X, d.x, thresholds.max_dx),
            (Axis::Y, d.y, thresholds.max_dy),
            (Axis::Z, d.z, thresholds.max_dz),
        ] {
            if libm::fabs(value) > max {
                out.push(WarningEvent {
                    structure_id: frame.structure_id.clone(),
                    node_id: node.node_id.clone(),
                    axis,
                    value,
                    max,
                    frame_t_ms: frame.frame_t_ms,
                });
            }
        }
    }
    out.sort_by(|a, b| (&a.node_id, a.axis).cmp(&(&b.node_id, b.axis)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{two_level_frame, SensorBinding};
    use alloc::format;
    use alloc::vec;

    fn config_with_all_bound() -> RuntimeConfig {
        let model = two_level_frame("s1", 4.0, 3.0, 2.0);
        let bindings: Vec<_> = model
            .nodes
            .iter()
            .filter(|n| !n.is_ground)
            .enumerate()
            .map(|(i, n)| SensorBinding {
                device_id: format!("dev-{:03}", i + 1),
                structure_id: "s1".into(),
                node_id: n.node_id.clone(),
                active: true,
                updated_at_ms: 0,
            })
            .collect();
        RuntimeConfig::resolve(&model, &bindings, None, 1).unwrap()
    }

    #[test]
    fn buffer_rejects_non_increasing_timestamps() {
        let mut b = SampleBuffer::new(4);
        b.push(10, Point3::ZERO).unwrap();
        assert_eq!(
            b.push(10, Point3::ZERO),
            Err(SampleRejection::OutOfOrder { t_ms: 10, last_t_ms: 10 })
        );
        assert_eq!(b.push(11, Point3::new(f64::NAN, 0.0, 0.0)), Err(SampleRejection::NonFinite));
        for t in 20..30 {
            b.push(t, Point3::new(t as f64, 0.0, 0.0)).unwrap();
        }
        assert_eq!(b.len(), 4);
        assert_eq!(b.latest_at_or_before(27).unwrap().0, 27);
        assert_eq!(b.latest_at_or_before(100).unwrap().0, 29);
        assert!(b.latest_at_or_before(25).is_none());
    }

    #[test]
    fn empty_frame_is_all_stale_rest_pose() {
        let cfg = config_with_all_bound();
        let frame = assemble_frame(&cfg, 1_000, DEFAULT_STALENESS_WINDOW_MS, |_, _| None);
        assert_eq!(frame.nodes.len(), 8);
        assert_eq!(frame.stale_count(), 8);
        let (snap, errs) = compute_snapshot(&cfg, &frame);
        assert!(errs.is_empty());
        assert_eq!(snap.columns.len(), 8);
        for c in &snap.columns {
            assert_eq!(c.pose.center_translation, Point3::ZERO);
            assert_eq!((c.pose.r_y, c.pose.t_x), (0.0, 0.0));
            assert_eq!(c.z_residual, None);
        }
        for n in &cfg.nodes {
            assert_eq!(snap.node_position(&n.node_id), Some(n.rest_position));
        }
    }

    #[test]
    fn staleness_window_is_inclusive_of_its_edge() {
        let cfg = config_with_all_bound();
        let frame = assemble_frame(&cfg, 1_000, 200, |dev, _| match dev {
            "dev-001" => Some((800, Point3::new(0.1, 0.0, 0.0))),
            "dev-002" => Some((799, Point3::new(0.2, 0.0, 0.0))),
            _ => Some((1_000, Point3::ZERO)),
        });
        assert!(!frame.node("L1-N1").unwrap().stale);
        let held = frame.node("L1-N2").unwrap();
        assert!(held.stale);
        assert_eq!(held.displacement.x, 0.2);
    }

    #[test]
    fn partial_failure_keeps_healthy_chains() {
        let cfg = config_with_all_bound();
        let frame = assemble_frame(&cfg, 1_000, 200, |dev, _| match dev {
            // L1-N1 pushed 3 m sideways on a 2 m column
            "dev-001" => Some((1_000, Point3::new(3.0, 0.0, 0.0))),
            _ => Some((1_000, Point3::ZERO)),
        });
        let (snap, errs) = compute_snapshot(&cfg, &frame);
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].chain_index, 0);
        assert_eq!(errs[0].column_index, 0);
        assert_eq!(snap.failed_chains.len(), 1);
        assert_eq!(snap.columns.len(), 6);
        assert!(snap.node_position("L1-N1").is_none());
        assert!(snap.node_position("G-N1").is_some());
    }

    #[test]
    fn thresholds_fire_strictly_and_in_order() {
        let frame = NodeDisplacementFrame {
            structure_id: "s1".into(),
            frame_t_ms: 50,
            config_version: 1,
            nodes: vec![
                NodeDisplacement {
                    node_id: "b".into(),
                    device_id: None,
                    displacement: Point3::new(0.25, -0.3, 0.0),
                    source_t_ms: Some(50),
                    stale: false,
                },
                NodeDisplacement {
                    node_id: "a".into(),
                    device_id: None,
                    displacement: Point3::new(0.0, 0.0, -0.2),
                    source_t_ms: Some(50),
                    stale: false,
                },
            ],
        };
        let t = ThresholdConfig { structure_id: "s1".into(), max_dx: 0.25, max_dy: 0.25, max_dz: 0.1 };
        let w = evaluate_thresholds(&frame, &t);
        assert_eq!(w.len(), 2);
        assert_eq!((w[0].node_id.as_str(), w[0].axis), ("a", Axis::Z));
        assert_eq!((w[1].node_id.as_str(), w[1].axis), ("b", Axis::Y));
        assert!(w.iter().all(|e| e.value.abs() > e.max));
    }
}
