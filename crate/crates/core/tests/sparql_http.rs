//! HTTP transport against a throwaway local endpoint.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use kgned::context::{build_context, ContextConfig};
use kgned::kg::sparql::{fetch_entity, fetch_remote, FetchOptions, HttpMethod, HttpTransport, SparqlTransport};
use kgned::kg::{EntityId, HopSet, TripleStore};
use kgned::Error;

const LABELS: &str = r#"{"head":{"vars":["kind","text"]},"results":{"bindings":[
  {"kind":{"type":"literal","value":"label"},"text":{"type":"literal","xml:lang":"en","value":"National Highway"}},
  {"kind":{"type":"literal","value":"description"},"text":{"type":"literal","xml:lang":"en","value":"highway system in Australia"}}
]}}"#;

const HOP1: &str = r#"{"head":{"vars":["rel","relLabel","tail","tailLabel"]},"results":{"bindings":[
  {"rel":{"type":"uri","value":"http://schema.org/description"},"tail":{"type":"literal","xml:lang":"en","value":"highway system in Australia"}},
  {"rel":{"type":"uri","value":"http://www.w3.org/2000/01/rdf-schema#label"},"tail":{"type":"literal","xml:lang":"en","value":"National Highway"}},
  {"rel":{"type":"uri","value":"http://schema.org/dateModified"},"tail":{"type":"literal","datatype":"http://www.w3.org/2001/XMLSchema#string","value":"31 May 2019"}}
]}}"#;

const EMPTY: &str = r#"{"head":{"vars":[]},"results":{"bindings":[]}}"#;

struct Server {
    url: String,
    hits: Arc<AtomicUsize>,
}

fn read_request(stream: &mut TcpStream) -> String {
    let mut reader = BufReader::new(stream);
    let mut head = String::new();
    let mut content_length = 0;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            content_length = v.trim().parse().unwrap_or(0);
        }
        head.push_str(&line);
    }
    let mut body = vec![0; content_length];
    reader.read_exact(&mut body).unwrap();
    head + &String::from_utf8_lossy(&body)
}

/// Serves every request with `respond(request) -> (status, body)` and
/// closes the connection afterwards.
fn serve(respond: fn(&str) -> (u16, &'static str)) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/sparql", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = Arc::clone(&hits);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let request = read_request(&mut stream);
            counter.fetch_add(1, Ordering::SeqCst);
            let (status, body) = respond(&request);
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/sparql-results+json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    Server { url, hits }
}

fn fig2(request: &str) -> (u16, &'static str) {
    if request.contains("kind") {
        (200, LABELS)
    } else if request.contains("mid") {
        (200, EMPTY)
    } else {
        (200, HOP1)
    }
}

fn entity() -> EntityId {
    EntityId::new("Q1967298").unwrap()
}

#[test]
fn fetch_over_http_reproduces_verbalized_context() {
    let server = serve(fig2);
    let dir = tempfile::tempdir().unwrap();
    let res = fetch_remote(&server.url, &entity(), HopSet::One, 10, dir.path()).unwrap();
    assert_eq!(res.triples.len(), 3);
    assert_eq!(server.hits.load(Ordering::SeqCst), 2);

    let store = TripleStore::load_dir(dir.path()).unwrap();
    let bundle = build_context(&store, &entity(), &ContextConfig::default(), 512);
    let texts: Vec<&str> = bundle.kept.iter().map(|t| t.text.as_str()).collect();
    assert_eq!(
        texts,
        [
            "National Highway description highway system in Australia",
            "National Highway label National Highway",
            "National Highway date modified 31 May 2019",
        ]
    );
}

#[test]
fn post_requests_and_cap() {
    let server = serve(fig2);
    let t = HttpTransport::new(&server.url).unwrap().with_method(HttpMethod::Post);
    let res = fetch_entity(&t, &entity(), &FetchOptions::new(HopSet::OneAndTwo, 2)).unwrap();
    assert_eq!(res.triples.len(), 2);
    assert_eq!(server.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn server_error_is_reported_without_retry() {
    let server = serve(|_| (500, "boom"));
    let t = HttpTransport::new(&server.url).unwrap().with_retries(3);
    match t.select("SELECT * WHERE {}") {
        Err(Error::Endpoint { status: 500, body }) => assert_eq!(body, "boom"),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn malformed_body_is_a_protocol_error() {
    let server = serve(|_| (200, "{\"results\": 5}"));
    let t = HttpTransport::new(&server.url).unwrap();
    assert!(matches!(t.select("SELECT * WHERE {}"), Err(Error::Protocol(_))));
}

#[test]
fn unreachable_endpoint_is_retryable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let t = HttpTransport::new(format!("http://127.0.0.1:{port}/sparql")).unwrap().with_retries(0);
    let err = t.select("SELECT * WHERE {}").unwrap_err();
    assert!(err.is_retryable(), "{err}");
}
