//! Talk to a chat-completion endpoint. Without an argument a throwaway local
//! server answers every request with a fixed completion.
//!
//! Usage: `cargo run --example chat_backend [base_url]`

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::time::Duration;

use glotran::http::{payload_views, ChatBackend};
use glotran::imaging::Image;
use glotran::orchestrator::{translate_image, PipelineConfig, RetryPolicy};
use glotran::regions::{BoundingBox, StaticDetector};

fn serve_once(listener: TcpListener) {
    for stream in listener.incoming().take(2) {
        let mut stream = stream.expect("connection");
        let mut reader = BufReader::new(stream.try_clone().expect("clone"));
        let mut len = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).expect("header");
            if line == "\r\n" {
                break;
            }
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().expect("length");
            }
        }
        let mut body = vec![0; len];
        reader.read_exact(&mut body).expect("body");
        let req: serde_json::Value = serde_json::from_slice(&body).expect("json");
        eprintln!("server: image payloads {:?}", payload_views(&req));
        let reply = r#"{"choices":[{"message":{"role":"assistant","content":"你好"}}]}"#;
        write!(
            stream,
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{reply}",
            reply.len()
        )
        .expect("write");
    }
}

fn main() {
    let url = match std::env::args().nth(1) {
        Some(u) => u,
        None => {
            let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
            let url = format!("http://{}", listener.local_addr().expect("addr"));
            std::thread::spawn(move || serve_once(listener));
            url
        }
    };
    let backend = ChatBackend::from_env(url, "demo", Duration::from_secs(10));
    let image = Image::filled(128, 96, [240, 240, 240]);
    let det = StaticDetector {
        boxes: vec![BoundingBox::new(8.0, 8.0, 100.0, 24.0), BoundingBox::new(8.0, 60.0, 100.0, 76.0)],
    };
    let cfg = PipelineConfig {
        retry: RetryPolicy::immediate(1),
        ..PipelineConfig::default()
    };
    let doc = translate_image("demo", &image, &cfg, &det, &backend).expect("pipeline");
    println!("{}", serde_json::to_string_pretty(&doc.without_timing()).expect("json"));
}
