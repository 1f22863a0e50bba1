//! Streaming interaction: synthetic speech codec, modality routing, and the
//! session loop producing interleaved ASR, text and speech-unit events.

mod backend;
mod codec;
mod event;
mod route;
mod session;

pub use backend::{MockBackend, ModelBackend, StreamBackend};
pub use codec::{SyntheticSpeechCodec, MARKER, MAX_TAIL};
pub use event::{EventKind, Payload, StreamEvent, TraceRecord};
pub use route::{modality_route, Inputs, Output, Route};
pub use session::{spawn_session, Session, SessionConfig, SessionInput};

use crate::vocab::TokenId;

/// Packages a unit stream into per-token chunks given the number of units
/// spoken for each completed token.
pub fn speech_synthesize(units: &[TokenId], per_token: &[usize]) -> Vec<Vec<TokenId>> {
    let mut out = Vec::new();
    let mut at = 0;
    for &n in per_token {
        let end = (at + n).min(units.len());
        if end > at {
            out.push(units[at..end].to_vec());
        }
        at = end;
    }
    if at < units.len() {
        out.push(units[at..].to_vec());
    }
    out
}
