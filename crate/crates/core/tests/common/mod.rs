#![allow(dead_code)]

use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde_json::Value;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// A request seen by [`MockServer`].
#[derive(Debug, Clone)]
pub struct Seen {
    pub path: String,
    pub body: Value,
}

type Handler = Box<dyn FnMut(&Seen) -> (u16, String) + Send>;

/// Local HTTP server answering with a closure; records every request.
pub struct MockServer {
    pub url: String,
    pub seen: Arc<Mutex<Vec<Seen>>>,
    server: Arc<tiny_http::Server>,
    thread: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(handler: impl FnMut(&Seen) -> (u16, String) + Send + 'static) -> Self {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").expect("bind mock server"));
        let url = format!("http://{}", server.server_addr().to_ip().expect("ip listener"));
        let seen = Arc::new(Mutex::new(Vec::new()));
        let (srv, log) = (server.clone(), seen.clone());
        let mut handler: Handler = Box::new(handler);
        let thread = std::thread::spawn(move || {
            for mut req in srv.incoming_requests() {
                let mut body = String::new();
                req.as_reader().read_to_string(&mut body).ok();
                let s = Seen {
                    path: req.url().to_string(),
                    body: serde_json::from_str(&body).unwrap_or(Value::Null),
                };
                let (status, reply) = handler(&s);
                log.lock().unwrap().push(s);
                let header = tiny_http::Header::from_bytes("Content-Type", "application/json").unwrap();
                let resp = tiny_http::Response::from_string(reply)
                    .with_status_code(status)
                    .with_header(header);
                req.respond(resp).ok();
            }
        });
        MockServer {
            url,
            seen,
            server,
            thread: Some(thread),
        }
    }

    pub fn requests(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            t.join().ok();
        }
    }
}

/// A base URL nothing is listening on.
pub fn dead_url() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    drop(l);
    format!("http://{addr}")
}
