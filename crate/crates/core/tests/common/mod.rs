//! Brute-force reference implementations and fixtures shared by the
//! integration tests.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use rand::Rng;

pub const BETA: f64 = 2.0;
pub const EPS: f64 = 1e-16;

/// Every length-`n` character window, whitespace removed.
fn char_grams(text: &str, n: usize) -> Vec<String> {
    let chars: Vec<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
    let mut out = Vec::new();
    if chars.len() >= n {
        for i in 0..=chars.len() - n {
            out.push(chars[i..i + n].iter().collect());
        }
    }
    out
}

fn word_grams(text: &str, n: usize) -> Vec<String> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut out = Vec::new();
    if words.len() >= n {
        for i in 0..=words.len() - n {
            out.push(words[i..i + n].join(" "));
        }
    }
    out
}

fn occurrences(grams: &[String], g: &str) -> u64 {
    grams.iter().filter(|x| x.as_str() == g).count() as u64
}

/// Clipped matches by enumerating distinct hypothesis grams.
fn clipped_matches(hyp: &[String], reference: &[String]) -> u64 {
    let mut seen: Vec<&str> = Vec::new();
    let mut m = 0;
    for g in hyp {
        if seen.contains(&g.as_str()) {
            continue;
        }
        seen.push(g);
        m += occurrences(hyp, g).min(occurrences(reference, g));
    }
    m
}

/// `(hyp_total, ref_total, matches)` for char orders 1..=6 then word orders 1..=2.
pub fn oracle_stats(hyp: &str, reference: &str) -> Vec<(u64, u64, u64)> {
    let mut out = Vec::new();
    for n in 1..=6 {
        let (h, r) = (char_grams(hyp, n), char_grams(reference, n));
        out.push((h.len() as u64, r.len() as u64, clipped_matches(&h, &r)));
    }
    for n in 1..=2 {
        let (h, r) = (word_grams(hyp, n), word_grams(reference, n));
        out.push((h.len() as u64, r.len() as u64, clipped_matches(&h, &r)));
    }
    out
}

pub fn oracle_f(stats: &[(u64, u64, u64)]) -> f64 {
    let b2 = BETA * BETA;
    let mut sum = 0.0;
    let mut used = 0usize;
    for &(h, r, m) in stats {
        if h == 0 && r == 0 {
            continue;
        }
        used += 1;
        let p = if h > 0 { m as f64 / h as f64 } else { EPS };
        let rc = if r > 0 { m as f64 / r as f64 } else { EPS };
        let d = b2 * p + rc;
        sum += if d > 0.0 { (1.0 + b2) * p * rc / d } else { EPS };
    }
    if used == 0 {
        0.0
    } else {
        sum / used as f64
    }
}

pub fn oracle_chrf(hyp: &str, reference: &str) -> f64 {
    oracle_f(&oracle_stats(hyp, reference))
}

pub fn oracle_chrf_corpus(pairs: &[(&str, &str)]) -> f64 {
    let mut totals = vec![(0u64, 0u64, 0u64); 8];
    for (h, r) in pairs {
        for (acc, s) in totals.iter_mut().zip(oracle_stats(h, r)) {
            acc.0 += s.0;
            acc.1 += s.1;
            acc.2 += s.2;
        }
    }
    oracle_f(&totals)
}

/// Double-loop MBR without caching: scores and lowest-index argmax.
pub fn oracle_mbr(texts: &[String]) -> (Vec<f64>, usize) {
    let n = texts.len() as f64;
    let mut scores = Vec::with_capacity(texts.len());
    for h in texts {
        let mut s = 0.0;
        for r in texts {
            s += oracle_chrf(h, r);
        }
        scores.push(s / n);
    }
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    (scores, best)
}

/// Trim fraction as an exact ratio `num / den`.
#[derive(Debug, Clone, Copy)]
pub struct Fraction {
    pub num: usize,
    pub den: usize,
}

impl Fraction {
    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    fn keep(self, len: usize) -> usize {
        (self.num * len).div_ceil(self.den).clamp(1, len)
    }
}

/// Rank-based trim: an entry survives when fewer than `keep` entries beat it
/// on magnitude (ties broken by lower index).
fn oracle_trim(v: &[f64], k: Fraction) -> Vec<f64> {
    let keep = k.keep(v.len());
    (0..v.len())
        .map(|i| {
            let rank = (0..v.len())
                .filter(|&j| v[j].abs() > v[i].abs() || (v[j].abs() == v[i].abs() && j < i))
                .count();
            if rank < keep {
                v[i]
            } else {
                0.0
            }
        })
        .collect()
}

pub fn oracle_ties(tasks: &[Vec<f64>], k: Fraction, lambda: f64) -> Vec<f64> {
    let trimmed: Vec<Vec<f64>> = tasks.iter().map(|t| oracle_trim(t, k)).collect();
    let len = tasks[0].len();
    (0..len)
        .map(|i| {
            let mut total = 0.0;
            for t in &trimmed {
                total += t[i];
            }
            let positive = total >= 0.0;
            let mut s = 0.0;
            let mut c = 0usize;
            for t in &trimmed {
                let v = t[i];
                if (positive && v > 0.0) || (!positive && v < 0.0) {
                    s += v;
                    c += 1;
                }
            }
            if c == 0 {
                0.0
            } else {
                s / c as f64 * lambda
            }
        })
        .collect()
}

pub fn random_string<R: Rng>(rng: &mut R, alphabet: &[char], max_len: usize) -> String {
    let len = rng.gen_range(0..=max_len);
    (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
}

/// Raw archive bytes from a header string and payload.
pub fn raw_archive(header: &str, payload: &[u8]) -> Vec<u8> {
    let mut out = (header.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(payload);
    out
}

#[derive(Debug, Clone)]
pub struct Request {
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

type Handler = dyn Fn(&Request) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server answering each connection with `handler`.
pub struct FixtureServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<Request>>>,
}

impl FixtureServer {
    pub fn start<F>(handler: F) -> Self
    where
        F: Fn(&Request) -> (u16, String) + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let log = Arc::clone(&requests);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let handler = Arc::clone(&handler);
                let log = Arc::clone(&log);
                thread::spawn(move || serve(stream, &*handler, &log));
            }
        });
        Self { url, requests }
    }

    pub fn bodies(&self) -> Vec<serde_json::Value> {
        self.requests
            .lock()
            .unwrap()
            .iter()
            .map(|r| serde_json::from_str(&r.body).unwrap())
            .collect()
    }

    pub fn count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

fn serve(stream: TcpStream, handler: &Handler, log: &Mutex<Vec<Request>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let path = line.split_whitespace().nth(1).unwrap_or("/").to_string();
    let mut headers = Vec::new();
    let mut len = 0usize;
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h).unwrap_or(0) == 0 || h == "\r\n" {
            break;
        }
        if let Some((k, v)) = h.trim_end().split_once(':') {
            let (k, v) = (k.trim().to_ascii_lowercase(), v.trim().to_string());
            if k == "content-length" {
                len = v.parse().unwrap_or(0);
            }
            headers.push((k, v));
        }
    }
    let mut body = vec![0; len];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let req = Request { path, headers, body: String::from_utf8_lossy(&body).into_owned() };
    let (status, resp) = handler(&req);
    log.lock().unwrap().push(req);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{resp}",
        resp.len()
    );
    let _ = stream.flush();
}

/// Chat-completions response carrying `content`.
pub fn chat_reply(content: &str) -> String {
    serde_json::json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]}).to_string()
}

/// Non-marker filler words.
pub const FILLER: &[&str] = &[
    "ماذا", "الآن", "كثيرا", "جيد", "أريد", "لماذا", "هكذا", "الذي", "في", "من", "إلى", "على", "البيت", "الطريق",
    "اليوم", "غدا", "نحن", "هم", "كان", "سوف",
];

pub const SYR: &[&str] = &["شو", "هلق", "كتير", "منيح", "بدي", "هيك"];
pub const MOR: &[&str] = &["واش", "دابا", "بزاف", "ديال", "مزيان", "كيفاش"];
pub const SAU: &[&str] = &["وش", "ابغى", "ابي", "كذا", "زين", "مره"];

pub fn markers_for(dialect: &str) -> &'static [&'static str] {
    match dialect {
        "syr" => SYR,
        "mor" => MOR,
        "sau" => SAU,
        other => panic!("no markers for {other}"),
    }
}

/// Sampled-looking candidates around one base sentence. Some candidates
/// carry target-dialect markers, which pull them away from the consensus
/// string; a few carry markers of a competing dialect.
pub fn synthetic_candidates<R: Rng>(rng: &mut R, target: &str, n: usize) -> Vec<String> {
    let len = rng.gen_range(5..=8);
    let base: Vec<&str> = (0..len).map(|_| FILLER[rng.gen_range(0..FILLER.len())]).collect();
    let others: Vec<&str> = ["syr", "mor", "sau"].into_iter().filter(|d| *d != target).collect();
    (0..n)
        .map(|_| {
            let mut words = base.clone();
            for _ in 0..rng.gen_range(0..=1) {
                let pos = rng.gen_range(0..words.len());
                words[pos] = FILLER[rng.gen_range(0..FILLER.len())];
            }
            if rng.gen_bool(0.35) {
                let own = markers_for(target);
                for _ in 0..rng.gen_range(1..=2) {
                    let pos = rng.gen_range(0..words.len());
                    words[pos] = own[rng.gen_range(0..own.len())];
                }
            }
            if rng.gen_bool(0.15) {
                let other = markers_for(others[rng.gen_range(0..others.len())]);
                let pos = rng.gen_range(0..words.len());
                words[pos] = other[rng.gen_range(0..other.len())];
            }
            words.join(" ")
        })
        .collect()
}
