//! Engine-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadDimensions { rows: usize, cols: usize, len: usize },

    #[error("degenerate gaussian draw: numerically rank-deficient after {retries} retries")]
    DegenerateDraw { retries: usize },

    #[error("non-finite loss encountered ({context})")]
    NonFiniteLoss { context: String },

    #[error(
        "sequential basis pool '{pool}' exhausted: cursor {cursor} + r1 {r1} exceeds d {d}; \
         reconfigure the world with a direct basis strategy (gaussian-direct or uniform-direct)"
    )]
    PoolExhausted { pool: String, cursor: usize, r1: usize, d: usize },

    #[error("stale subspace handle for pool '{pool}': handle epoch {handle_epoch}, pool epoch {pool_epoch}")]
    StaleHandle { pool: String, handle_epoch: u64, pool_epoch: u64 },

    #[error("handle pool key '{handle}' does not match pool '{pool}'")]
    PoolMismatch { handle: String, pool: String },

    #[error("duplicate character id '{0}'")]
    DuplicateCharacter(String),

    #[error("unknown character id '{0}'")]
    UnknownCharacter(String),

    #[error("character '{later}' was integrated after '{earlier}'; interference is defined for an earlier character against a later one")]
    OrderViolation { earlier: String, later: String },

    #[error("word '{0}' is not in the world vocabulary")]
    UnknownWord(String),

    #[error("prompt must contain exactly one character placeholder, found {0}")]
    PlaceholderCount(usize),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid render request: {0}")]
    Request(String),

    #[error("bbox ({ws}, {hs}, {we}, {he}) maps to an empty token mask on a {h}x{w} grid")]
    EmptyMask { ws: f64, hs: f64, we: f64, he: f64, h: usize, w: usize },

    #[error("decay contract violated: mean score {mean} exceeds threshold {tau}")]
    DecayContract { mean: f64, tau: f64 },

    #[error("scripted judge queue is empty")]
    ScriptedQueueEmpty,

    #[error("judge response unparseable: {reason}; raw text: {raw:?}")]
    JudgeParse { reason: String, raw: String },

    #[error("judge unavailable: {0}")]
    JudgeUnavailable(String),

    #[error("snapshot error: {0}")]
    Snapshot(String),

    #[error("snapshot checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
