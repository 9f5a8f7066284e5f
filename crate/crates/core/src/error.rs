use thiserror::Error;

/// Errors surfaced by the protocol, the simulator and the codecs.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition (dimension mismatch, empty chunk, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A loss probe produced a non-finite value.
    #[error("non-finite loss while estimating scalar gradient (loss(+) = {loss_plus}, loss(-) = {loss_minus})")]
    NonFiniteLoss { loss_plus: f64, loss_minus: f64 },

    /// A message or history does not match the agreed protocol state.
    #[error("protocol violation: {0}")]
    Protocol(String),

    /// A value cannot be represented on the wire.
    #[error("encode error: {0}")]
    Encode(String),

    #[error("cannot draw {requested} distinct 32-bit seeds")]
    ImpossiblePool { requested: u64 },

    /// Every active client of a round failed.
    #[error("round {round} failed: no client produced a usable history")]
    RoundFailed { round: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
