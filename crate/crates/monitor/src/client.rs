//! Operator-side HTTP and stream clients.

use std::io::Write;

use futures_util::{SinkExt, StreamExt};
use serde::de::DeserializeOwned;
use serde::Serialize;
use shm_core::model::{RuntimeConfig, StructuralModel};
use tokio_tungstenite::tungstenite::Message;

use crate::wire::{
    BindingBody, ClientMessage, MutationResponse, PoseUpdate, ServerMessage, ThresholdsBody, WarningMessage,
};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// Non-success response; `body` is the server's reply verbatim.
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("{0}")]
    Transport(String),
    #[error("unexpected response: {0}")]
    Decode(String),
    #[error("server error: {0}")]
    Server(String),
    #[error("stream closed by server")]
    Closed,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct AdminClient {
    client: reqwest::Client,
    base: String,
}

impl AdminClient {
    /// `base` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: &str) -> Self {
        AdminClient { client: reqwest::Client::new(), base: base.trim_end_matches('/').to_owned() }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/api/v1{path}", self.base)
    }

    async fn send(&self, request: reqwest::RequestBuilder) -> Result<String, ClientError> {
        let response = request.send().await.map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = response.status();
        let body = response.text().await.map_err(|e| ClientError::Transport(e.to_string()))?;
        if status.is_success() {
            Ok(body)
        } else {
            Err(ClientError::Http { status: status.as_u16(), body })
        }
    }

    async fn put<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R, ClientError> {
        let text = self.send(self.client.put(self.url(path)).json(body)).await?;
        serde_json::from_str(&text).map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub async fn apply_model(&self, model: &StructuralModel) -> Result<u64, ClientError> {
        let r: MutationResponse = self.put(&format!("/structures/{}", model.structure_id), model).await?;
        Ok(r.config_version)
    }

    pub async fn bind(&self, structure_id: &str, device_id: &str, body: &BindingBody) -> Result<u64, ClientError> {
        let r: MutationResponse = self.put(&format!("/structures/{structure_id}/bindings/{device_id}"), body).await?;
        Ok(r.config_version)
    }

    pub async fn thresholds(&self, structure_id: &str, body: &ThresholdsBody) -> Result<u64, ClientError> {
        let r: MutationResponse = self.put(&format!("/structures/{structure_id}/thresholds"), body).await?;
        Ok(r.config_version)
    }

    pub async fn runtime_config(&self, structure_id: &str) -> Result<RuntimeConfig, ClientError> {
        let text = self.send(self.client.get(self.url(&format!("/structures/{structure_id}/config")))).await?;
        serde_json::from_str(&text).map_err(|e| ClientError::Decode(e.to_string()))
    }

    /// Recorded snapshots as JSON lines.
    pub async fn export(&self, structure_id: &str, from_ms: Option<i64>, to_ms: Option<i64>) -> Result<String, ClientError> {
        let mut query = Vec::new();
        if let Some(f) = from_ms {
            query.push(("from_ms", f));
        }
        if let Some(t) = to_ms {
            query.push(("to_ms", t));
        }
        let url = format!("{}?{}", self.url(&format!("/structures/{structure_id}/export")), encode_query(&query));
        self.send(self.client.get(url.trim_end_matches('?'))).await
    }
}

fn encode_query(pairs: &[(&str, i64)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join("&")
}

/// Stream endpoint for a server root: `http://h:p` becomes
/// `ws://h:p/api/v1/stream`.
pub fn stream_url(base: &str) -> String {
    let base = base.trim_end_matches('/');
    let ws = if let Some(rest) = base.strip_prefix("https://") {
        format!("wss://{rest}")
    } else if let Some(rest) = base.strip_prefix("http://") {
        format!("ws://{rest}")
    } else {
        base.to_owned()
    };
    format!("{ws}/api/v1/stream")
}

pub fn format_pose(p: &PoseUpdate) -> String {
    let mut line = format!("t={} v{}", p.t_ms, p.config_version);
    for c in &p.columns {
        let [x, y, z] = c.center_translation_m;
        line.push_str(&format!(
            " | {} r_y={:+.3}° t_x={:+.3}° c=({:+.4},{:+.4},{:+.4})",
            c.column_id,
            c.r_y_rad.to_degrees(),
            c.t_x_rad.to_degrees(),
            x,
            y,
            z
        ));
    }
    for f in &p.failed_chains {
        line.push_str(&format!(" | chain {} failed at {}: {}", f.chain_index, f.column_id, f.reason));
    }
    line
}

pub fn format_warning(w: &WarningMessage) -> String {
    format!(
        "!! WARNING t={} {} {}: {:+.4} m exceeds {:.4} m",
        w.t_ms, w.node_id, axis_name(w), w.value_m, w.max_m
    )
}

fn axis_name(w: &WarningMessage) -> &'static str {
    match w.axis {
        shm_core::frame::Axis::X => "dx",
        shm_core::frame::Axis::Y => "dy",
        shm_core::frame::Axis::Z => "dz",
    }
}

/// Subscribes to `structure_id` and writes one line per event to `out`.
///
/// Returns after `limit` pose lines, or with an error when the server reports
/// one or the connection ends.
pub async fn tail(url: &str, structure_id: &str, out: &mut impl Write, limit: Option<usize>) -> Result<(), ClientError> {
    let (mut socket, _) = tokio_tungstenite::connect_async(url)
        .await
        .map_err(|e| ClientError::Transport(e.to_string()))?;
    let subscribe = serde_json::to_string(&ClientMessage::Subscribe { structure_id: structure_id.to_owned() })
        .expect("client messages serialize");
    socket
        .send(Message::text(subscribe))
        .await
        .map_err(|e| ClientError::Transport(e.to_string()))?;
    let mut poses = 0;
    while limit.is_none_or(|l| poses < l) {
        let text = match socket.next().await {
            Some(Ok(Message::Text(text))) => text,
            Some(Ok(Message::Close(_))) | None => return Err(ClientError::Closed),
            Some(Ok(_)) => continue,
            Some(Err(e)) => return Err(ClientError::Transport(e.to_string())),
        };
        match serde_json::from_str::<ServerMessage>(&text) {
            Ok(ServerMessage::PoseUpdate(p)) => {
                writeln!(out, "{}", format_pose(&p))?;
                poses += 1;
            }
            Ok(ServerMessage::Warning(w)) => writeln!(out, "{}", format_warning(&w))?,
            Ok(ServerMessage::Error(e)) => return Err(ClientError::Server(e.message)),
            Err(e) => return Err(ClientError::Decode(e.to_string())),
        }
        out.flush()?;
    }
    let _ = socket.close(None).await;
    Ok(())
}
