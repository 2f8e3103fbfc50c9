//! Line-oriented TCP front end over an [`Engine`]: one thread per
//! connection, one JSON request per line, one JSON response per line.
//!
//! A malformed line produces an error response and leaves the connection
//! open; only socket failure or client hangup ends a session. The accept
//! loop polls a shutdown flag so a service can be stopped cleanly (open
//! connections finish on their own threads).

use crate::engine::{Engine, QueryFlags};
use crate::protocol::{
    encode_line, parse_request, HealthResponse, QueryResponse, Request, Response, ResponseBody,
    SeedEntity, SelectedFact, SnapshotInfoResponse, UpdateResponse,
};
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("failed to bind {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
}

/// A running listener. Dropping (or calling [`Service::shutdown`]) stops
/// accepting new connections and joins the accept thread.
pub struct Service {
    local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept_handle: Option<JoinHandle<()>>,
}

impl Service {
    /// Bind `addr` (e.g. `127.0.0.1:4871`, port 0 for ephemeral) and start
    /// serving the engine.
    pub fn start(engine: Arc<Engine>, addr: &str) -> Result<Service, ServiceError> {
        let listener = TcpListener::bind(addr).map_err(|source| ServiceError::Bind {
            addr: addr.to_string(),
            source,
        })?;
        let local_addr = listener.local_addr().map_err(|source| ServiceError::Bind {
            addr: addr.to_string(),
            source,
        })?;
        listener
            .set_nonblocking(true)
            .map_err(|source| ServiceError::Bind {
                addr: addr.to_string(),
                source,
            })?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = Arc::clone(&stop);
        let accept_handle = std::thread::spawn(move || loop {
            match listener.accept() {
                Ok((stream, _)) => {
                    let engine = Arc::clone(&engine);
                    std::thread::spawn(move || handle_connection(&engine, stream));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if stop_flag.load(Ordering::SeqCst) {
                        break;
                    }
                    std::thread::sleep(Duration::from_millis(20));
                }
                Err(_) => {
                    if stop_flag.load(Ordering::SeqCst) {
                        break;
                    }
                }
            }
        });
        Ok(Service {
            local_addr,
            stop,
            accept_handle: Some(accept_handle),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Stop accepting connections and wait for the accept loop to exit.
    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept_handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

fn handle_connection(engine: &Engine, stream: TcpStream) {
    // Blocking reads on the connection thread; the listener's non-blocking
    // flag must not leak onto accepted sockets.
    if stream.set_nonblocking(false).is_err() {
        return;
    }
    let mut writer = match stream.try_clone() {
        Ok(w) => w,
        Err(_) => return,
    };
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = match line {
            Ok(l) => l,
            Err(_) => break,
        };
        if line.trim().is_empty() {
            continue;
        }
        let response = respond(engine, &line);
        let mut out = encode_line(&response);
        out.push('\n');
        if writer.write_all(out.as_bytes()).is_err() || writer.flush().is_err() {
            break;
        }
    }
}

/// One request line → one response, never a panic or connection loss.
pub fn respond(engine: &Engine, line: &str) -> Response {
    match parse_request(line) {
        Ok(req) => dispatch(engine, req),
        Err(msg) => Response::failure(msg),
    }
}

/// Execute a parsed request against the engine.
pub fn dispatch(engine: &Engine, request: Request) -> Response {
    match request {
        Request::Update {
            head,
            relation,
            tail,
            timestamp_ms,
            head_description,
            tail_description,
        } => match engine.update(
            &head,
            &relation,
            &tail,
            timestamp_ms,
            head_description.as_deref(),
            tail_description.as_deref(),
        ) {
            Ok(out) => Response::success(ResponseBody::Update(UpdateResponse {
                fact_id: out.fact_id.0,
                epoch: out.epoch,
                server_latency_us: out.latency_us,
                created_entities: out.created_entities,
            })),
            Err(e) => Response::failure(e.to_string()),
        },
        Request::Query {
            question,
            use_knowledge,
            dense_attention,
            static_kg_epoch,
            max_new_tokens,
        } => {
            let flags = QueryFlags {
                use_knowledge,
                dense_attention,
                static_kg_epoch,
                max_new_tokens,
            };
            match engine.query(&question, &flags) {
                Ok(out) => Response::success(ResponseBody::Query(QueryResponse {
                    answer: out.answer,
                    selected: out
                        .selected
                        .iter()
                        .map(|(f, w)| SelectedFact {
                            fact_id: f.0,
                            weight: *w,
                        })
                        .collect(),
                    seeds: out
                        .seeds
                        .iter()
                        .map(|(e, s)| SeedEntity {
                            entity_id: e.0,
                            score: *s,
                        })
                        .collect(),
                    retrieve_us: out.retrieve_us,
                    attend_us: out.attend_us,
                    generate_us: out.generate_us,
                    epoch: out.epoch,
                })),
                Err(e) => Response::failure(e.to_string()),
            }
        }
        Request::SnapshotInfo => {
            let info = engine.snapshot_info();
            Response::success(ResponseBody::SnapshotInfo(SnapshotInfoResponse {
                epoch: info.epoch,
                entities: info.entities,
                relations: info.relations,
                live_facts: info.live_facts,
            }))
        }
        Request::Health => Response::success(ResponseBody::Health(HealthResponse {
            status: "ok".to_string(),
            has_model: engine.has_model(),
            indexed_entities: engine.ann().indexed_count(),
        })),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    fn start_test_service() -> (Arc<Engine>, Service) {
        let engine = Arc::new(Engine::new(Config::default()));
        let service = Service::start(Arc::clone(&engine), "127.0.0.1:0").expect("bind");
        (engine, service)
    }

    fn send_lines(addr: SocketAddr, lines: &[&str]) -> Vec<Response> {
        let stream = TcpStream::connect(addr).expect("connect");
        let mut writer = stream.try_clone().expect("clone");
        let mut reader = BufReader::new(stream);
        let mut out = Vec::new();
        for line in lines {
            writer.write_all(line.as_bytes()).unwrap();
            writer.write_all(b"\n").unwrap();
            writer.flush().unwrap();
            let mut buf = String::new();
            reader.read_line(&mut buf).unwrap();
            out.push(serde_json::from_str(&buf).expect("well-formed response"));
        }
        out
    }

    #[test]
    fn serves_update_snapshot_and_health_over_tcp() {
        let (_engine, service) = start_test_service();
        let responses = send_lines(
            service.local_addr(),
            &[
                r#"{"op":"health"}"#,
                r#"{"op":"update","head":"a","relation":"r","tail":"b","timestamp_ms":100}"#,
                r#"{"op":"snapshot-info"}"#,
            ],
        );
        match &responses[0].body {
            Some(ResponseBody::Health(h)) => {
                assert_eq!(h.status, "ok");
                assert!(!h.has_model);
            }
            other => panic!("unexpected: {other:?}"),
        }
        match &responses[1].body {
            Some(ResponseBody::Update(u)) => {
                assert_eq!(u.fact_id, 0);
                assert_eq!(u.created_entities, 2);
                assert!(u.epoch > 0);
            }
            other => panic!("unexpected: {other:?}"),
        }
        match &responses[2].body {
            Some(ResponseBody::SnapshotInfo(s)) => {
                assert_eq!(s.entities, 2);
                assert_eq!(s.live_facts, 1);
            }
            other => panic!("unexpected: {other:?}"),
        }
        service.shutdown();
    }

    #[test]
    fn malformed_line_errors_but_keeps_the_connection() {
        let (_engine, service) = start_test_service();
        let responses = send_lines(
            service.local_addr(),
            &["this is not json", r#"{"op":"health"}"#],
        );
        assert!(!responses[0].ok);
        assert!(responses[0].error.as_deref().unwrap().contains("bad request"));
        assert!(responses[1].ok, "connection survives a bad line");
    }

    #[test]
    fn engine_failures_come_back_as_error_responses() {
        let (_engine, service) = start_test_service();
        let update = r#"{"op":"update","head":"a","relation":"r","tail":"b","timestamp_ms":5}"#;
        let query = r#"{"op":"query","question":"anything ?"}"#;
        let responses = send_lines(service.local_addr(), &[update, update, query]);
        assert!(responses[0].ok);
        assert!(!responses[1].ok, "duplicate fact is rejected");
        assert!(responses[1].error.as_deref().unwrap().contains("already exists"));
        assert!(!responses[2].ok, "query without a model is rejected");
        assert!(responses[2].error.as_deref().unwrap().contains("not ready"));
    }

    #[test]
    fn concurrent_clients_get_consistent_epochs() {
        let (_engine, service) = start_test_service();
        let addr = service.local_addr();
        let handles: Vec<_> = (0..4)
            .map(|i| {
                std::thread::spawn(move || {
                    let line = format!(
                        r#"{{"op":"update","head":"h{i}","relation":"r","tail":"t{i}","timestamp_ms":{i}}}"#
                    );
                    send_lines(addr, &[&line]).remove(0)
                })
            })
            .collect();
        let mut epochs = Vec::new();
        for h in handles {
            let resp = h.join().unwrap();
            assert!(resp.ok);
            match resp.body {
                Some(ResponseBody::Update(u)) => epochs.push(u.epoch),
                other => panic!("unexpected: {other:?}"),
            }
        }
        epochs.sort_unstable();
        epochs.dedup();
        assert_eq!(epochs.len(), 4, "each commit gets its own epoch");
        let info = send_lines(addr, &[r#"{"op":"snapshot-info"}"#]).remove(0);
        match info.body {
            Some(ResponseBody::SnapshotInfo(s)) => assert_eq!(s.live_facts, 4),
            other => panic!("unexpected: {other:?}"),
        }
        service.shutdown();
    }
}
