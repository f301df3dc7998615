use serde::Serialize;

pub const EXIT_FAILED_CHECK: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NON_FINITE: u8 = 3;
pub const EXIT_CHECKPOINT: u8 = 4;

/// Machine-readable error, printed as one JSON line on stderr.
#[derive(Debug, Serialize)]
pub struct Failure {
    #[serde(skip)]
    pub code: u8,
    pub error: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub message: String,
    pub exit_code: u8,
}

impl Failure {
    pub fn new(code: u8, error: &'static str, message: impl Into<String>) -> Self {
        Failure { code, error, field: None, message: message.into(), exit_code: code }
    }

    pub fn io(e: std::io::Error) -> Self {
        Failure::new(EXIT_FAILED_CHECK, "io", e.to_string())
    }

    pub fn internal(msg: String) -> Self {
        Failure::new(EXIT_FAILED_CHECK, "internal", msg)
    }

    pub fn config(field: &str, msg: impl Into<String>) -> Self {
        Failure { field: Some(field.to_string()), ..Failure::new(EXIT_CONFIG, "config", msg) }
    }

    /// Checkpoint-loading errors become exit 4 rather than a generic failure.
    pub fn checkpoint(e: pmss::Error) -> Self {
        match e {
            pmss::Error::Io(_) | pmss::Error::Checkpoint(_) | pmss::Error::Version { .. } | pmss::Error::Json(_) => {
                Failure::new(EXIT_CHECKPOINT, "checkpoint", e.to_string())
            }
            other => other.into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).unwrap_or_else(|_| format!("{{\"error\":\"internal\",\"message\":{:?}}}", self.message))
    }
}

impl From<pmss::Error> for Failure {
    fn from(e: pmss::Error) -> Self {
        use pmss::Error as E;
        match &e {
            E::Config { field, reason } => Failure::config(field, reason.clone()),
            E::NonFinite(_) => Failure::new(EXIT_NON_FINITE, "non_finite", e.to_string()),
            E::Checkpoint(_) | E::Version { .. } => Failure::new(EXIT_CHECKPOINT, "checkpoint", e.to_string()),
            E::Io(_) => Failure::new(EXIT_FAILED_CHECK, "io", e.to_string()),
            _ => Failure::new(EXIT_FAILED_CHECK, "runtime", e.to_string()),
        }
    }
}
