//! Wire protocol for the TCP service: one JSON object per line in each
//! direction. Requests carry an `op` tag; responses always carry `ok`, plus
//! either the operation's payload (tagged by `kind`) or an `error` string.
//!
//! Example session:
//!
//! ```text
//! → {"op":"update","head":"alice","relation":"works_at","tail":"acme","timestamp_ms":1000}
//! ← {"ok":true,"kind":"update","fact_id":0,"epoch":4,"server_latency_us":180,"created_entities":2}
//! → {"op":"query","question":"what is the works_at of alice ?"}
//! ← {"ok":true,"kind":"query","answer":"acme", ...}
//! ```
//!
//! The parser is total: any byte sequence yields either a `Request` or an
//! error string, never a panic, and a malformed line must not tear down the
//! connection.

use serde::{Deserialize, Serialize};

fn default_true() -> bool {
    true
}

/// One client request (one line of JSON, tagged by `op`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Request {
    /// Commit one fact, creating entities/relations as needed.
    Update {
        head: String,
        relation: String,
        tail: String,
        timestamp_ms: i64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        head_description: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tail_description: Option<String>,
    },
    /// Answer a question with the trained model.
    Query {
        question: String,
        #[serde(default = "default_true")]
        use_knowledge: bool,
        #[serde(default)]
        dense_attention: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        static_kg_epoch: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_new_tokens: Option<usize>,
    },
    /// Current epoch and object counts.
    SnapshotInfo,
    /// Liveness check.
    Health,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedFact {
    pub fact_id: u32,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEntity {
    pub entity_id: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateResponse {
    pub fact_id: u32,
    pub epoch: u64,
    /// Ingress-to-commit time as measured by the server.
    pub server_latency_us: u64,
    pub created_entities: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub answer: String,
    pub selected: Vec<SelectedFact>,
    pub seeds: Vec<SeedEntity>,
    pub retrieve_us: u64,
    pub attend_us: u64,
    pub generate_us: u64,
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotInfoResponse {
    pub epoch: u64,
    pub entities: u32,
    pub relations: u32,
    pub live_facts: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub has_model: bool,
    pub indexed_entities: usize,
}

/// Success payloads, tagged by `kind` so clients can dispatch without
/// tracking which request a line answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ResponseBody {
    Update(UpdateResponse),
    Query(QueryResponse),
    SnapshotInfo(SnapshotInfoResponse),
    Health(HealthResponse),
}

/// One server response line. Exactly one of `body` / `error` is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(flatten, default, skip_serializing_if = "Option::is_none")]
    pub body: Option<ResponseBody>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Response {
    pub fn success(body: ResponseBody) -> Self {
        Response {
            ok: true,
            body: Some(body),
            error: None,
        }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        Response {
            ok: false,
            body: None,
            error: Some(message.into()),
        }
    }
}

/// Parse one request line. Never panics; all failures become `Err(reason)`.
pub fn parse_request(line: &str) -> Result<Request, String> {
    serde_json::from_str(line.trim()).map_err(|e| format!("bad request: {e}"))
}

/// Serialize any protocol value as a single line (no trailing newline).
pub fn encode_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("protocol types serialize infallibly")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn requests_round_trip_through_json() {
        let cases = vec![
            Request::Update {
                head: "a".into(),
                relation: "r".into(),
                tail: "b".into(),
                timestamp_ms: -5,
                head_description: Some("desc".into()),
                tail_description: None,
            },
            Request::Query {
                question: "what is the r of a ?".into(),
                use_knowledge: true,
                dense_attention: false,
                static_kg_epoch: Some(7),
                max_new_tokens: Some(4),
            },
            Request::SnapshotInfo,
            Request::Health,
        ];
        for req in cases {
            let line = encode_line(&req);
            assert!(!line.contains('\n'));
            assert_eq!(parse_request(&line).unwrap(), req);
        }
    }

    #[test]
    fn query_flags_default_when_omitted() {
        let req = parse_request(r#"{"op":"query","question":"hi ?"}"#).unwrap();
        match req {
            Request::Query {
                use_knowledge,
                dense_attention,
                static_kg_epoch,
                max_new_tokens,
                ..
            } => {
                assert!(use_knowledge);
                assert!(!dense_attention);
                assert_eq!(static_kg_epoch, None);
                assert_eq!(max_new_tokens, None);
            }
            other => panic!("wrong variant: {other:?}"),
        }
    }

    #[test]
    fn responses_round_trip_and_separate_ok_from_error() {
        let ok = Response::success(ResponseBody::Update(UpdateResponse {
            fact_id: 3,
            epoch: 9,
            server_latency_us: 120,
            created_entities: 1,
        }));
        let line = encode_line(&ok);
        assert!(line.contains(r#""ok":true"#) && line.contains(r#""kind":"update""#));
        assert_eq!(serde_json::from_str::<Response>(&line).unwrap(), ok);

        let err = Response::failure("duplicate fact");
        let line = encode_line(&err);
        assert!(line.contains(r#""ok":false"#) && !line.contains("kind"));
        assert_eq!(serde_json::from_str::<Response>(&line).unwrap(), err);
    }

    #[test]
    fn malformed_lines_become_errors() {
        for line in ["", "not json", "{}", r#"{"op":"launch"}"#, r#"{"op":"update"}"#] {
            assert!(parse_request(line).is_err(), "line {line:?} should fail");
        }
    }

    proptest! {
        /// Totality: arbitrary bytes never panic the parser.
        #[test]
        fn parser_is_total(line in ".{0,200}") {
            let _ = parse_request(&line);
        }

        /// Any update request survives a round trip.
        #[test]
        fn update_round_trip(
            head in "[a-z]{1,8}",
            rel in "[a-z]{1,8}",
            tail in "[a-z]{1,8}",
            ts in any::<i64>(),
        ) {
            let req = Request::Update {
                head, relation: rel, tail, timestamp_ms: ts,
                head_description: None, tail_description: None,
            };
            prop_assert_eq!(parse_request(&encode_line(&req)).unwrap(), req);
        }
    }
}
