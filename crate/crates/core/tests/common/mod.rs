#![allow(dead_code)]

use std::sync::{Arc, Mutex};
use std::thread;

/// A recorded request: method, path, body.
pub type Seen = (String, String, String);

/// HTTP server answering with scripted status codes (the last one repeats).
pub struct MockHost {
    pub url: String,
    pub seen: Arc<Mutex<Vec<Seen>>>,
    server: Arc<tiny_http::Server>,
    handle: Option<thread::JoinHandle<()>>,
}

impl MockHost {
    pub fn start(codes: Vec<u16>) -> Self {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
        let url = format!("http://{}", server.server_addr().to_ip().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let handle = {
            let server = server.clone();
            let seen = seen.clone();
            thread::spawn(move || {
                for mut req in server.incoming_requests() {
                    let mut body = String::new();
                    let _ = req.as_reader().read_to_string(&mut body);
                    let n = {
                        let mut s = seen.lock().unwrap();
                        s.push((req.method().to_string(), req.url().to_owned(), body));
                        s.len()
                    };
                    let code = codes.get(n - 1).or(codes.last()).copied().unwrap_or(200);
                    let _ = req.respond(tiny_http::Response::from_string("{}").with_status_code(code));
                }
            })
        };
        Self { url, seen, server, handle: Some(handle) }
    }

    pub fn count(&self) -> usize {
        self.seen.lock().unwrap().len()
    }

    pub fn requests(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

impl Drop for MockHost {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
