//! Scripted local HTTP server speaking the chat-completions reply shape.
//!
//! Used by the integration tests and the acceptance suite to exercise the
//! service backend without network access. Replies are served in order; once
//! the script runs out the last reply repeats.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::json;

#[derive(Debug, Clone)]
pub enum StubReply {
    /// 200 with `choices[0].message.content = content`.
    Chat(String),
    /// Arbitrary status and body.
    Status(u16, String),
    /// Sleep before answering with the inner reply.
    Delay(Duration, Box<StubReply>),
}

impl StubReply {
    pub fn chat(content: impl Into<String>) -> Self {
        StubReply::Chat(content.into())
    }

    fn render(&self) -> (u16, String) {
        match self {
            StubReply::Chat(content) => {
                (200, json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]}).to_string())
            }
            StubReply::Status(code, body) => (*code, body.clone()),
            StubReply::Delay(d, inner) => {
                std::thread::sleep(*d);
                inner.render()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RecordedRequest {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl RecordedRequest {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }
}

pub struct StubServer {
    addr: SocketAddr,
    requests: Arc<Mutex<Vec<RecordedRequest>>>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Binds to an ephemeral localhost port and starts serving `script`.
    pub fn start(script: Vec<StubReply>) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let requests = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let handle = {
            let requests = requests.clone();
            let stop = stop.clone();
            std::thread::spawn(move || {
                let mut served = 0usize;
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let reply = script.get(served).or(script.last()).cloned().unwrap_or(StubReply::Status(500, "{}".into()));
                    served += 1;
                    if let Err(e) = handle_connection(stream, &reply, &requests) {
                        log::debug!("stub connection error: {e}");
                    }
                }
            })
        };
        Ok(Self { addr, requests, stop, handle: Some(handle) })
    }

    /// Base URL suitable for `GatewayConfig::base_url`.
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.requests.lock().unwrap().clone()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn handle_connection(stream: TcpStream, reply: &StubReply, requests: &Mutex<Vec<RecordedRequest>>) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    let mut parts = request_line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();

    let mut headers = Vec::new();
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k.eq_ignore_ascii_case("content-length") {
                content_length = v.parse().unwrap_or(0);
            }
            headers.push((k, v));
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    requests.lock().unwrap().push(RecordedRequest {
        method,
        path,
        headers,
        body: String::from_utf8_lossy(&body).into_owned(),
    });

    let (status, body) = reply.render();
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {status} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    stream.flush()
}
