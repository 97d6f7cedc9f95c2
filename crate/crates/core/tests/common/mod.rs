#![allow(dead_code)]

use std::cell::RefCell;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use frameloop::error::Result;
use frameloop::store::{EmbeddingStore, FrameSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn random_store(n: usize, dim: usize, seed: u64) -> EmbeddingStore {
    let mut r = rng(seed);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut r, dim)).collect();
    let mut t = 0.0;
    let ts = (0..n)
        .map(|_| {
            t += r.random_range(0.1..1.0);
            t
        })
        .collect();
    EmbeddingStore::from_rows(&rows, ts).unwrap()
}

/// Store whose rows are given directly, one second apart.
pub fn store_of(rows: &[Vec<f64>]) -> EmbeddingStore {
    EmbeddingStore::from_rows(rows, (0..rows.len()).map(|i| i as f64).collect()).unwrap()
}

/// Frame source that counts reads per frame.
pub struct CountingSource {
    inner: EmbeddingStore,
    pub reads: RefCell<Vec<usize>>,
}

impl CountingSource {
    pub fn new(inner: EmbeddingStore) -> Self {
        let n = inner.n_frames();
        Self {
            inner,
            reads: RefCell::new(vec![0; n]),
        }
    }
}

impl FrameSource for CountingSource {
    fn n_frames(&self) -> usize {
        self.inner.n_frames()
    }
    fn timestamp(&self, frame: usize) -> f64 {
        self.inner.timestamps()[frame]
    }
    fn embedding(&self, frame: usize) -> Result<Vec<f64>> {
        self.reads.borrow_mut()[frame] += 1;
        Ok(self.inner.row(frame).to_vec())
    }
}

/// Central finite difference of `f` at `x`.
pub fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|k| {
            xp[k] = x[k] + h;
            let up = f(&xp);
            xp[k] = x[k] - h;
            let down = f(&xp);
            xp[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)` in the Euclidean norm.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-6)
}

/// One scripted HTTP reply.
#[derive(Clone, Debug)]
pub enum Reply {
    /// Sleep, then answer 200 with a chat-completion body carrying `content`.
    Content { delay: Duration, content: String },
    /// Answer with a status and raw body.
    Raw { status: u16, body: String },
    /// Close the connection without answering.
    Drop,
}

impl Reply {
    pub fn ok(content: &str) -> Self {
        Reply::Content {
            delay: Duration::ZERO,
            content: content.to_string(),
        }
    }
}

/// A received request: header block and body.
#[derive(Clone, Debug)]
pub struct Received {
    pub head: String,
    pub body: String,
}

/// Minimal HTTP/1.1 server answering connection `i` with `replies[i]`
/// (the last reply repeats).
pub struct ScriptedServer {
    pub url: String,
    pub received: Arc<Mutex<Vec<Received>>>,
}

fn read_request(stream: &mut TcpStream) -> Option<Received> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut head = String::new();
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            content_length = v.trim().parse().ok()?;
        }
        let end = line == "\r\n";
        head.push_str(&line);
        if end {
            break;
        }
    }
    let mut body = vec![0; content_length];
    reader.read_exact(&mut body).ok()?;
    Some(Received {
        head,
        body: String::from_utf8_lossy(&body).into_owned(),
    })
}

fn respond(stream: &mut TcpStream, status: u16, body: &str) {
    let msg = format!(
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.write_all(msg.as_bytes());
    let _ = stream.flush();
}

pub fn completion_body(content: &str) -> String {
    serde_json::json!({
        "choices": [{ "index": 0, "message": { "role": "assistant", "content": content } }]
    })
    .to_string()
}

impl ScriptedServer {
    pub fn start(replies: Vec<Reply>) -> Self {
        assert!(!replies.is_empty());
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let received = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&received);
        thread::spawn(move || {
            for (i, stream) in listener.incoming().enumerate() {
                let Ok(mut stream) = stream else { continue };
                let reply = replies[i.min(replies.len() - 1)].clone();
                let log = Arc::clone(&log);
                thread::spawn(move || {
                    let Some(req) = read_request(&mut stream) else { return };
                    log.lock().unwrap().push(req);
                    match reply {
                        Reply::Content { delay, content } => {
                            thread::sleep(delay);
                            respond(&mut stream, 200, &completion_body(&content));
                        }
                        Reply::Raw { status, body } => respond(&mut stream, status, &body),
                        Reply::Drop => {}
                    }
                });
            }
        });
        Self { url, received }
    }

    pub fn requests(&self) -> Vec<Received> {
        self.received.lock().unwrap().clone()
    }
}

/// A local port with nothing listening on it.
pub fn dead_url() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    format!("http://{addr}/v1/chat/completions")
}

pub const SEEDS: [&str; 6] = [
    r#"{"score":0.8,"verdict":"accept","brief_reason":"..."}"#,
    r#"{"refined_query":"bowler releasing ball near lane"}"#,
    r#"{"qtype":"dynamic","rationale":"counting"}"#,
    r#"Sure! {"score":0.2,"verdict":"reject","brief_reason":["a","b"]} hope this helps"#,
    r#"```json
{"qtype":"static","rationale":"attribute"}
```"#,
    r#"{"nested":{"a":[1,2,{"b":"}"}]},"refined_query":"x"}"#,
];

/// Random mutation of a seed reply: byte flips, truncations, insertions of
/// structural characters and random unicode.
pub fn mutate(seed: &str, r: &mut impl Rng) -> String {
    let mut chars: Vec<char> = seed.chars().collect();
    for _ in 0..r.random_range(1..6) {
        let op = r.random_range(0..5);
        let at = if chars.is_empty() { 0 } else { r.random_range(0..chars.len()) };
        match op {
            0 if !chars.is_empty() => {
                chars.remove(at);
            }
            1 => chars.insert(at, ['{', '}', '"', '\\', ':', ',', '[', ']'][r.random_range(0..8)]),
            2 => chars.truncate(at),
            3 => chars.insert(at, char::from_u32(r.random_range(0..0x11000)).unwrap_or('\u{fffd}')),
            _ => {
                let dup: Vec<char> = chars.clone();
                chars.extend(dup);
            }
        }
    }
    chars.into_iter().collect()
}

/// Fuzz case `i`: raw random bytes on even cases, a mutated seed reply on odd.
pub fn fuzz_input(i: usize, r: &mut ChaCha8Rng) -> String {
    if i.is_multiple_of(2) {
        let len = r.random_range(0..300);
        let bytes: Vec<u8> = (0..len).map(|_| r.random()).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    } else {
        mutate(SEEDS[i % SEEDS.len()], r)
    }
}
