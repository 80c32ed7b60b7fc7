//! Minimal HTTP/1.1 server standing in for a remote classifier.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

enum Mode {
    Echo { vectors: Vec<Vec<f64>>, limit: Option<usize> },
    Status(u16),
}

pub struct StubServer {
    addr: String,
    stop: Arc<AtomicBool>,
    seen: Arc<Mutex<Vec<String>>>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Answers tile `i` with `vectors[i % len]`, truncated to `limit` results.
    pub fn echo(vectors: Vec<Vec<f64>>, limit: Option<usize>) -> Self {
        Self::start(Mode::Echo { vectors, limit })
    }

    pub fn status(code: u16) -> Self {
        Self::start(Mode::Status(code))
    }

    fn start(mode: Mode) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let stop = Arc::new(AtomicBool::new(false));
        let seen = Arc::new(Mutex::new(Vec::new()));
        let (stop2, seen2) = (stop.clone(), seen.clone());
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if stop2.load(Ordering::SeqCst) {
                    break;
                }
                if let Ok(s) = stream {
                    let _ = handle(s, &mode, &seen2);
                }
            }
        });
        Self { addr, stop, seen, handle: Some(handle) }
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Request bodies received so far.
    pub fn requests(&self) -> Vec<String> {
        self.seen.lock().unwrap().clone()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(&self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn handle(stream: TcpStream, mode: &Mode, seen: &Mutex<Vec<String>>) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((k, v)) = l.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body)?;
    let body = String::from_utf8_lossy(&body).into_owned();
    seen.lock().unwrap().push(body.clone());

    let (code, payload) = match mode {
        Mode::Status(code) => (*code, String::new()),
        Mode::Echo { vectors, limit } => {
            let req: serde_json::Value = serde_json::from_str(&body).unwrap_or_default();
            let tiles = req["tiles"].as_array().cloned().unwrap_or_default();
            let n = limit.unwrap_or(tiles.len()).min(tiles.len());
            let results: Vec<serde_json::Value> = tiles[..n]
                .iter()
                .enumerate()
                .map(|(i, t)| serde_json::json!({"id": t["id"], "probs": vectors[i % vectors.len()]}))
                .collect();
            (200, serde_json::json!({ "results": results }).to_string())
        }
    };
    let mut out = stream;
    write!(
        out,
        "HTTP/1.1 {code} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    )?;
    out.flush()
}
