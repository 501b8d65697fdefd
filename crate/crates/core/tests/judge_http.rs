use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use cci_core::diagnose::judge::{user_prompt, SYSTEM_PROMPT};
use cci_core::diagnose::{HttpJudge, HttpJudgeConfig, Judge, Verdict};
use serde_json::Value;

struct Captured {
    authorization: Option<String>,
    body: Value,
}

/// Serves one canned `(status, body)` per connection and records requests.
fn fake_endpoint(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Captured>>>, JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let handle = std::thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0usize;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((name, value)) = line.split_once(':') {
                    match name.to_ascii_lowercase().as_str() {
                        "content-length" => length = value.trim().parse().unwrap(),
                        "authorization" => authorization = Some(value.trim().to_string()),
                        _ => {}
                    }
                }
            }
            let mut raw = vec![0u8; length];
            reader.read_exact(&mut raw).unwrap();
            log.lock().unwrap().push(Captured {
                authorization,
                body: serde_json::from_slice(&raw).unwrap(),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen, handle)
}

fn reply(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

fn judge(endpoint: String) -> HttpJudge {
    let config = HttpJudgeConfig {
        endpoint,
        model: "judge-model".into(),
        max_retries: 3,
        backoff_base: Duration::from_millis(5),
        timeout: Duration::from_secs(10),
        requests_per_second: 1000.0,
    };
    HttpJudge::new(config, "test-key".into())
}

#[test]
fn sends_prompts_and_credential() {
    let (url, seen, handle) = fake_endpoint(vec![(200, reply("Similar."))]);
    let verdict = judge(url).judge("tabby cat", "tiger cat").unwrap();
    handle.join().unwrap();
    assert_eq!(verdict, Verdict::Similar);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer test-key"));
    let body = &seen[0].body;
    assert_eq!(body["model"], "judge-model");
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][0]["content"], SYSTEM_PROMPT);
    assert_eq!(body["messages"][1]["role"], "user");
    let prompt = body["messages"][1]["content"].as_str().unwrap();
    assert_eq!(prompt, user_prompt("tabby cat", "tiger cat"));
    assert!(prompt.starts_with("Ground truth class: tabby cat\nPredicted class: tiger cat\n"));
}

#[test]
fn rate_limit_is_retried() {
    let (url, seen, handle) = fake_endpoint(vec![
        (429, "{}".into()),
        (503, "{}".into()),
        (200, reply("different")),
    ]);
    let verdict = judge(url).judge("goldfish", "airliner").unwrap();
    handle.join().unwrap();
    assert_eq!(verdict, Verdict::Different);
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn retries_are_bounded() {
    let (url, seen, handle) = fake_endpoint(vec![(429, "{}".into()); 4]);
    assert!(judge(url).judge("a", "b").is_err());
    handle.join().unwrap();
    assert_eq!(seen.lock().unwrap().len(), 4);
}

#[test]
fn client_errors_are_fatal() {
    let (url, seen, handle) = fake_endpoint(vec![(401, "{}".into())]);
    assert!(judge(url).judge("a", "b").is_err());
    handle.join().unwrap();
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn unparseable_answer_is_an_error() {
    let (url, _, handle) = fake_endpoint(vec![(200, reply("maybe"))]);
    assert!(judge(url).judge("a", "b").is_err());
    handle.join().unwrap();
}
