use std::time::{SystemTime, UNIX_EPOCH};

use tokio::time::Instant;

/// Epoch-millisecond clock driven by the tokio timer.
///
/// Anchoring on `tokio::time::Instant` lets tests run the whole pipeline on
/// paused (virtual) time.
#[derive(Clone, Copy, Debug)]
pub struct Clock {
    anchor: Instant,
    anchor_ms: i64,
}

impl Clock {
    pub fn system() -> Self {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).expect("clock after epoch");
        Clock { anchor: Instant::now(), anchor_ms: now.as_millis() as i64 }
    }

    /// A clock reading `epoch_ms` now.
    pub fn starting_at(epoch_ms: i64) -> Self {
        Clock { anchor: Instant::now(), anchor_ms: epoch_ms }
    }

    pub fn now_ms(&self) -> i64 {
        self.anchor_ms + self.anchor.elapsed().as_millis() as i64
    }

    /// Timer instant at which this clock reads `epoch_ms`.
    pub fn instant_at(&self, epoch_ms: i64) -> Instant {
        let offset = epoch_ms - self.anchor_ms;
        if offset >= 0 {
            self.anchor + std::time::Duration::from_millis(offset as u64)
        } else {
            self.anchor
        }
    }
}
