//! JSON wire formats of the HTTP and stream endpoints.

use serde::{Deserialize, Serialize};
use shm_core::frame::{Axis, FrameSnapshot, WarningEvent};

/// Body of `POST /api/v1/ingest`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestRequest {
    pub device_id: String,
    pub samples: Vec<WireSample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireSample {
    pub t_ms: i64,
    pub dx_m: f64,
    pub dy_m: f64,
    pub dz_m: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestResponse {
    pub accepted: usize,
    pub rejected: Vec<RejectedSample>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedSample {
    pub index: usize,
    pub reason: String,
}

/// Body of `PUT /api/v1/structures/{id}/bindings/{device_id}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindingBody {
    pub node_id: String,
    #[serde(default = "yes")]
    pub active: bool,
    #[serde(default)]
    pub replace: bool,
}

fn yes() -> bool {
    true
}

/// Body of `PUT /api/v1/structures/{id}/thresholds`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdsBody {
    pub max_dx_m: f64,
    pub max_dy_m: f64,
    pub max_dz_m: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationResponse {
    pub config_version: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub details: Vec<String>,
}

/// Client to server stream messages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Subscribe { structure_id: String },
}

/// Server to client stream messages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    PoseUpdate(PoseUpdate),
    Warning(WarningMessage),
    Error(ErrorMessage),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseUpdate {
    pub structure_id: String,
    pub t_ms: i64,
    pub config_version: u64,
    pub columns: Vec<WireColumn>,
    pub nodes: Vec<WireNode>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed_chains: Vec<WireChainFailure>,
    pub seq: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireColumn {
    pub column_id: String,
    pub r_y_rad: f64,
    pub t_x_rad: f64,
    pub center_translation_m: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_residual_m: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireNode {
    pub node_id: String,
    pub position_m: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireChainFailure {
    pub chain_index: usize,
    pub column_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarningMessage {
    pub structure_id: String,
    pub node_id: String,
    pub axis: Axis,
    pub value_m: f64,
    pub max_m: f64,
    pub t_ms: i64,
    pub seq: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorMessage {
    pub message: String,
}

impl PoseUpdate {
    pub fn from_snapshot(snapshot: &FrameSnapshot, seq: u64) -> Self {
        PoseUpdate {
            structure_id: snapshot.structure_id.clone(),
            t_ms: snapshot.frame_t_ms,
            config_version: snapshot.config_version,
            columns: snapshot
                .columns
                .iter()
                .map(|c| WireColumn {
                    column_id: c.column_id.clone(),
                    r_y_rad: c.pose.r_y,
                    t_x_rad: c.pose.t_x,
                    center_translation_m: c.pose.center_translation.into(),
                    z_residual_m: c.z_residual,
                })
                .collect(),
            nodes: snapshot
                .nodes
                .iter()
                .map(|n| WireNode { node_id: n.node_id.clone(), position_m: n.position.into() })
                .collect(),
            failed_chains: snapshot
                .failed_chains
                .iter()
                .map(|f| WireChainFailure {
                    chain_index: f.chain_index,
                    column_id: f.column_id.clone(),
                    reason: f.reason.clone(),
                })
                .collect(),
            seq,
        }
    }
}

impl WarningMessage {
    pub fn from_event(event: &WarningEvent, seq: u64) -> Self {
        WarningMessage {
            structure_id: event.structure_id.clone(),
            node_id: event.node_id.clone(),
            axis: event.axis,
            value_m: event.value,
            max_m: event.max,
            t_ms: event.frame_t_ms,
            seq,
        }
    }
}
