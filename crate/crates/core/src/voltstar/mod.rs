//! Centralised mode: Transfer Units (TUs) stream encrypted CSV files to a
//! Master Unit (MU) over TCP. The MU decrypts, analyses and stores each file,
//! and pushes fault notices to every TU over a separate broadcast listener.

pub mod crypto;
pub mod frame;
pub mod ledger;
pub mod mu;
pub mod tu;

use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use crypto::{CryptoError, EncryptedBlob, Sealer, SymmetricKey};
pub use frame::{Ack, Frame, FrameError, MsgType};
pub use ledger::{GeneratedEntry, SendOutcome, SentEntry, TransferLedger};
pub use mu::{mu_serve, BroadcastFailure, BroadcastOutcome, MuConfig, MuError, MuHandle, MuStats};
pub use tu::{tu_run, FileFault, TuConfig, TuError, TuHandle};

/// Exponential backoff between send attempts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub initial_ms: u64,
    pub max_ms: u64,
    /// `None` retries forever.
    pub max_retries: Option<u32>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            initial_ms: 200,
            max_ms: 5000,
            max_retries: None,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        let shift = attempt.saturating_sub(1).min(32);
        let ms = self.initial_ms.saturating_mul(1u64 << shift).min(self.max_ms);
        Duration::from_millis(ms)
    }

    pub fn exhausted(&self, attempts: u32) -> bool {
        self.max_retries.is_some_and(|m| attempts > m)
    }
}

/// Polls `cond` until it holds or `timeout` elapses.
pub fn wait_until(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    loop {
        if cond() {
            return true;
        }
        if Instant::now() >= deadline {
            return false;
        }
        thread::sleep(Duration::from_millis(5));
    }
}

/// Sleeps up to `d`, waking early if `stop` is set. Returns false if stopped.
pub(crate) fn sleep_unless(d: Duration, stop: &AtomicBool) -> bool {
    let deadline = Instant::now() + d;
    loop {
        if stop.load(Ordering::SeqCst) {
            return false;
        }
        let now = Instant::now();
        if now >= deadline {
            return true;
        }
        thread::sleep((deadline - now).min(Duration::from_millis(20)));
    }
}
