use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use pico_icl::llmgateway::{Backend, GenerationRequest};

/// A minimal OpenAI-compatible `/chat/completions` server backed by `backend`.
/// Runs until the process exits; keeps connections alive.
pub struct OpenAiStub {
    pub base_url: String,
    pub requests: Arc<AtomicUsize>,
}

pub fn serve(backend: Arc<dyn Backend>) -> OpenAiStub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base_url = format!("http://{}/v1", listener.local_addr().unwrap());
    let requests = Arc::new(AtomicUsize::new(0));
    let counter = requests.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let backend = backend.clone();
            let counter = counter.clone();
            std::thread::spawn(move || handle(stream, backend, counter));
        }
    });
    OpenAiStub { base_url, requests }
}

fn handle(stream: TcpStream, backend: Arc<dyn Backend>, counter: Arc<AtomicUsize>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
            return;
        }
        let mut length = 0;
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                return;
            }
            if line == "\r\n" {
                break;
            }
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                length = v.trim().parse().unwrap_or(0);
            }
        }
        let mut body = vec![0; length];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        counter.fetch_add(1, Ordering::SeqCst);
        let reply = if request_line.contains("/chat/completions") {
            let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
            let req = GenerationRequest {
                prompt: v["messages"][0]["content"].as_str().unwrap_or_default().to_string(),
                model: v["model"].as_str().unwrap_or_default().to_string(),
                temperature: v["temperature"].as_f64().unwrap_or(0.0),
                max_tokens: v["max_tokens"].as_u64().unwrap_or(256) as u32,
                seed: v["seed"].as_u64(),
            };
            let resp = backend.complete(&req);
            let finish =
                if resp.finish_reason == pico_icl::llmgateway::FinishReason::Length { "length" } else { "stop" };
            (200, serde_json::json!({"choices": [{"message": {"role": "assistant", "content": resp.text}, "finish_reason": finish}]}).to_string())
        } else {
            (404, "{}".to_string())
        };
        let out = format!(
            "HTTP/1.1 {} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{}",
            reply.0,
            reply.1.len(),
            reply.1
        );
        if writer.write_all(out.as_bytes()).is_err() {
            return;
        }
    }
}
