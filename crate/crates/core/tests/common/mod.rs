//! Shared test helpers: brute-force geometry oracles, random region sets and
//! a scripted HTTP server.

#![allow(dead_code)]

use std::cmp::Ordering;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use glotran::regions::{AlignTolerance, BoundingBox, GroupingParams};
use rand::Rng;

pub fn colinear(a: &BoundingBox, b: &BoundingBox) -> bool {
    let overlap = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    overlap >= 0.5 * a.height().min(b.height())
}

/// Reachability closure of a symmetric relation by repeated squaring
/// (Warshall), returned as component labels = smallest reachable index.
#[allow(clippy::needless_range_loop)]
pub fn closure_labels(n: usize, related: impl Fn(usize, usize) -> bool) -> Vec<usize> {
    let mut reach = vec![vec![false; n]; n];
    for i in 0..n {
        reach[i][i] = true;
        for j in 0..n {
            if i != j && (related(i, j) || related(j, i)) {
                reach[i][j] = true;
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    (0..n).map(|i| (0..n).find(|&j| reach[i][j]).unwrap()).collect()
}

fn lex(a: &BoundingBox, b: &BoundingBox) -> Ordering {
    let ka = [a.x_min, a.y_min, a.x_max, a.y_max, a.confidence];
    let kb = [b.x_min, b.y_min, b.x_max, b.y_max, b.confidence];
    for (x, y) in ka.iter().zip(&kb) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Reading order by exhaustive pairwise comparison: each box's position is
/// the number of boxes that must precede it.
pub fn order_oracle(boxes: &[BoundingBox]) -> Vec<usize> {
    let n = boxes.len();
    let line = closure_labels(n, |i, j| colinear(&boxes[i], &boxes[j]));
    let top = |l: usize| {
        (0..n)
            .filter(|&i| line[i] == l)
            .map(|i| boxes[i].y_min)
            .fold(f64::INFINITY, f64::min)
    };
    let within = |i: usize, j: usize| lex(&boxes[i], &boxes[j]).then(i.cmp(&j));
    let lead = |l: usize| {
        (0..n)
            .filter(|&i| line[i] == l)
            .min_by(|&a, &b| within(a, b))
            .unwrap()
    };
    let precedes = |i: usize, j: usize| -> bool {
        if line[i] == line[j] {
            return within(i, j) == Ordering::Less;
        }
        let (li, lj) = (line[i], line[j]);
        top(li)
            .total_cmp(&top(lj))
            .then_with(|| within(lead(li), lead(lj)))
            == Ordering::Less
    };
    let mut out = vec![usize::MAX; n];
    for i in 0..n {
        let rank = (0..n).filter(|&j| j != i && precedes(j, i)).count();
        out[rank] = i;
    }
    out
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Slice groups of an already ordered box list, as member index lists in
/// group order.
pub fn merge_oracle(boxes: &[BoundingBox], p: &GroupingParams) -> Vec<Vec<usize>> {
    let n = boxes.len();
    if n == 0 {
        return Vec::new();
    }
    let h = median(boxes.iter().map(|b| b.height()).collect());
    let align = match p.align_tol {
        AlignTolerance::Pixels(px) => px,
        AlignTolerance::LineHeights(k) => k * h,
    };
    let line = closure_labels(n, |i, j| colinear(&boxes[i], &boxes[j]));
    // rank lines by the reading-order position of their first member
    let order = order_oracle(boxes);
    let mut line_rank = vec![usize::MAX; n];
    let mut next = 0;
    for &i in &order {
        if line_rank[line[i]] == usize::MAX {
            line_rank[line[i]] = next;
            next += 1;
        }
    }
    let rank = |i: usize| line_rank[line[i]];
    let related = |i: usize, j: usize| -> bool {
        let (a, b) = (&boxes[i], &boxes[j]);
        if rank(i) == rank(j) {
            let gap = a.x_min.max(b.x_min) - a.x_max.min(b.x_max);
            let dy = ((a.y_min + a.y_max) / 2.0 - (b.y_min + b.y_max) / 2.0).abs();
            p.alpha > 0.0 && gap <= p.alpha * h && dy <= p.beta * h
        } else if rank(j) == rank(i) + 1 {
            p.gamma > 0.0 && (a.x_min - b.x_min).abs() <= align && b.y_min - a.y_max <= p.gamma * h
        } else {
            false
        }
    };
    let labels = closure_labels(n, related);
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        match groups.iter_mut().find(|g| labels[g[0]] == labels[i]) {
            Some(g) => g.push(i),
            None => groups.push(vec![i]),
        }
    }
    groups
}

/// Up to `max` boxes on a coarse grid so that lines, ties and overlaps occur.
pub fn random_boxes(rng: &mut impl Rng, max: usize) -> Vec<BoundingBox> {
    let n = rng.gen_range(0..=max);
    (0..n)
        .map(|_| {
            let x = rng.gen_range(0..40) as f64 * 8.0;
            let y = rng.gen_range(0..30) as f64 * 6.0;
            let w = rng.gen_range(1..12) as f64 * 8.0;
            let h = rng.gen_range(2..6) as f64 * 4.0;
            let c = rng.gen_range(0..4) as f64 * 0.25;
            BoundingBox::with_confidence(x, y, x + w, y + h, c)
        })
        .collect()
}

/// One recorded request.
#[derive(Debug, Clone)]
pub struct Seen {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl Seen {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).expect("json body")
    }
}

/// Canned reply: status and body.
pub type Reply = (u16, String);

/// Minimal HTTP/1.1 server answering `replies` in turn (the last one
/// repeats), one request per connection.
pub struct MockServer {
    pub url: String,
    pub seen: Arc<Mutex<Vec<Seen>>>,
    _handle: JoinHandle<()>,
}

impl MockServer {
    pub fn start(replies: Vec<Reply>) -> Self {
        Self::start_with(move |_, k| replies[k.min(replies.len() - 1)].clone())
    }

    pub fn start_with(respond: impl Fn(&Seen, usize) -> Reply + Send + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
        let url = format!("http://{}", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        let handle = std::thread::spawn(move || {
            for (k, stream) in listener.incoming().enumerate() {
                let Ok(mut stream) = stream else { break };
                let Some(req) = read_request(&mut stream) else { continue };
                let (status, body) = respond(&req, k);
                log.lock().unwrap().push(req);
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
            }
        });
        Self {
            url,
            seen,
            _handle: handle,
        }
    }

    pub fn requests(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

fn read_request(stream: &mut std::net::TcpStream) -> Option<Seen> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut first = String::new();
    reader.read_line(&mut first).ok()?;
    let mut parts = first.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let mut headers = Vec::new();
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).ok()?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().ok()?;
            }
            headers.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(Seen {
        method,
        path,
        headers,
        body,
    })
}

/// A port nothing listens on.
pub fn dead_url() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", l.local_addr().unwrap());
    drop(l);
    url
}
