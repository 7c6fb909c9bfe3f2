use std::io::Read;

use super::{ScoreReply, ScoreRequest, ScorerEndpoint, Transport, TransportError, WireError};

/// Blocking JSON-over-HTTP transport.
#[derive(Clone)]
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self {
            agent: ureq::AgentBuilder::new().build(),
        }
    }
}

#[derive(serde::Deserialize)]
struct ErrorBody {
    error: WireError,
}

impl Transport for HttpTransport {
    fn send(&self, endpoint: &ScorerEndpoint, request: &ScoreRequest) -> Result<ScoreReply, TransportError> {
        let body = serde_json::to_string(request).map_err(|e| TransportError::Decode(e.to_string()))?;
        let result = self
            .agent
            .post(&endpoint.url())
            .timeout(endpoint.timeout)
            .set("Content-Type", "application/json")
            .send_string(&body);
        match result {
            Ok(resp) => {
                let mut text = String::new();
                resp.into_reader()
                    .read_to_string(&mut text)
                    .map_err(|e| TransportError::Io(e.to_string()))?;
                serde_json::from_str(&text).map_err(|e| TransportError::Decode(e.to_string()))
            }
            Err(ureq::Error::Status(status, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                let (code, message) = match serde_json::from_str::<ErrorBody>(&text) {
                    Ok(b) => (b.error.code, b.error.message),
                    Err(_) => ("http".to_string(), text),
                };
                Err(TransportError::Status { status, code, message })
            }
            Err(ureq::Error::Transport(t)) => {
                let msg = t.to_string();
                if msg.contains("timed out") || msg.contains("Timeout") {
                    Err(TransportError::Timeout)
                } else {
                    Err(TransportError::Io(msg))
                }
            }
        }
    }
}
