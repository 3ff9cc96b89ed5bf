use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use avtta::audiomap::{ChatClient, HttpChatClient, LlmConfig};
use avtta::Error;

struct Captured {
    body: String,
    authorization: Option<String>,
}

/// Serves one scripted `(status, body)` reply per connection, then stops.
fn serve(script: Vec<(u16, &'static str)>) -> (String, JoinHandle<()>, Arc<Mutex<Vec<Captured>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = std::thread::spawn(move || {
        for (status, body) in script {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    authorization = Some(line["authorization:".len()..].trim().to_string());
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Captured { body: String::from_utf8(buf).unwrap(), authorization });
            let mut out = stream;
            write!(
                out,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, handle, seen)
}

fn config(endpoint: String, key_env: &str) -> LlmConfig {
    LlmConfig { endpoint, api_key_env: key_env.into(), timeout_secs: 5.0, max_retries: 3, backoff_ms: 1, ..LlmConfig::default() }
}

const OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":" barking\n"}}]}"#;

#[test]
fn retries_transient_failures_then_succeeds() {
    let (url, handle, seen) = serve(vec![(503, "{}"), (429, "{}"), (200, OK)]);
    std::env::set_var("AVTTA_TEST_KEY_A", "secret-a");
    let client = HttpChatClient::new(config(url, "AVTTA_TEST_KEY_A")).unwrap();
    assert_eq!(client.complete("#Human: hi #Assistant:").unwrap(), " barking\n");
    handle.join().unwrap();
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    let req: serde_json::Value = serde_json::from_str(&seen[2].body).unwrap();
    assert_eq!(req["temperature"], 0.0);
    assert_eq!(req["messages"][0]["content"], "#Human: hi #Assistant:");
    assert_eq!(seen[2].authorization.as_deref(), Some("Bearer secret-a"));
}

#[test]
fn malformed_reply_is_an_error_without_retry() {
    let (url, handle, seen) = serve(vec![(200, r#"{"answer":"barking"}"#)]);
    let client = HttpChatClient::new(config(url, "AVTTA_TEST_KEY_UNSET")).unwrap();
    let err = client.complete("p").unwrap_err();
    assert!(matches!(err, Error::Llm(ref m) if m.contains("malformed")), "{err}");
    handle.join().unwrap();
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].authorization, None);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, handle, seen) = serve(vec![(400, "{}")]);
    let client = HttpChatClient::new(config(url, "AVTTA_TEST_KEY_UNSET")).unwrap();
    assert!(matches!(client.complete("p"), Err(Error::Llm(_))));
    handle.join().unwrap();
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn gives_up_after_max_retries() {
    let (url, handle, seen) = serve(vec![(500, "{}"); 4]);
    let client = HttpChatClient::new(config(url, "AVTTA_TEST_KEY_UNSET")).unwrap();
    let err = client.complete("p").unwrap_err();
    assert!(err.to_string().contains("4 attempts"), "{err}");
    handle.join().unwrap();
    assert_eq!(seen.lock().unwrap().len(), 4);
}

#[test]
fn bad_endpoint_is_a_config_error() {
    let cfg = LlmConfig { endpoint: "ftp://x".into(), ..LlmConfig::default() };
    assert!(matches!(HttpChatClient::new(cfg), Err(Error::Config { .. })));
}
