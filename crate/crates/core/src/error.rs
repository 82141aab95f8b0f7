use crate::{ClientId, ExpertId, ServerId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("expert {expert} has no live replica")]
    ExpertUnavailable { expert: ExpertId },

    #[error("connection error ({client} -> {server}): {reason}")]
    Connection {
        client: ClientId,
        server: ServerId,
        reason: String,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("transport failure talking to {0}")]
    TransportFailure(ServerId),

    #[error(transparent)]
    Decode(#[from] crate::protocol::DecodeError),

    #[error("worker {0} is not registered with the monitor")]
    Registration(String),

    #[error("monitor is unavailable")]
    MonitorDown,

    #[error("request {request} failed: {source}")]
    FatalRequest {
        request: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("static group is restarting")]
    GroupRestart,

    #[error("client was shut down")]
    Shutdown,

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn rejected(msg: impl Into<String>) -> Self {
        Error::RejectedInput(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    /// Whether a fresh attempt against another replica may succeed.
    pub fn is_retriable(&self) -> bool {
        matches!(
            self,
            Error::Connection { .. } | Error::TransportFailure(_) | Error::GroupRestart
        )
    }
}
