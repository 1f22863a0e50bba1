//! Stream events and their line-delimited trace records.

use serde::{Deserialize, Serialize};

use crate::vocab::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    AsrPartial,
    TextToken,
    SpeechUnit,
    SpeechChunk,
    Warning,
    Eos,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    /// Collapsed ASR text so far.
    Text(Vec<TokenId>),
    Token(TokenId),
    Unit(TokenId),
    /// Units spoken for the 1-based text token `token`.
    Chunk { token: usize, units: Vec<TokenId> },
    Warning(String),
    /// Generated text and the CTC collapse of the generated units.
    Summary { text: Vec<TokenId>, speech_text: Vec<TokenId> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamEvent {
    pub step: u64,
    pub kind: EventKind,
    pub payload: Payload,
    /// Nanoseconds since the session started.
    pub wall_ns: u64,
}

/// One trace line. Field order is fixed: step, kind, payload, wall_ns.
#[derive(Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub kind: EventKind,
    pub payload: Payload,
    pub wall_ns: u64,
}

impl StreamEvent {
    pub fn to_record(&self, with_time: bool) -> TraceRecord {
        TraceRecord {
            step: self.step,
            kind: self.kind,
            payload: self.payload.clone(),
            wall_ns: if with_time { self.wall_ns } else { 0 },
        }
    }

    /// Serialized trace line without the trailing newline.
    pub fn to_json_line(&self, with_time: bool) -> String {
        serde_json::to_string(&self.to_record(with_time)).expect("trace records serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_order_is_stable() {
        let e = StreamEvent {
            step: 3,
            kind: EventKind::SpeechChunk,
            payload: Payload::Chunk {
                token: 1,
                units: vec![64, 70],
            },
            wall_ns: 99,
        };
        assert_eq!(
            e.to_json_line(true),
            r#"{"step":3,"kind":"SpeechChunk","payload":{"token":1,"units":[64,70]},"wall_ns":99}"#
        );
        assert_eq!(
            e.to_json_line(false),
            r#"{"step":3,"kind":"SpeechChunk","payload":{"token":1,"units":[64,70]},"wall_ns":0}"#
        );
        let eos = StreamEvent {
            step: 4,
            kind: EventKind::Eos,
            payload: Payload::Summary {
                text: vec![7],
                speech_text: vec![7],
            },
            wall_ns: 0,
        };
        assert_eq!(
            eos.to_json_line(false),
            r#"{"step":4,"kind":"Eos","payload":{"text":[7],"speech_text":[7]},"wall_ns":0}"#
        );
    }
}
