use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use svagent::model_client::{
    AgentTag, ChatModel, ChatRequest, ClientError, HttpChatClient, HttpEmbedClient, Message, RetryPolicy,
    TextEmbedder,
};

struct Seen {
    path: String,
    headers: Vec<String>,
    body: String,
}

/// Serves one scripted `(status, body)` per connection, in order.
fn stub(script: Vec<(u16, &'static str)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in script {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut headers = Vec::new();
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_string();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                headers.push(line);
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                path: request_line.split_whitespace().nth(1).unwrap_or_default().to_string(),
                headers,
                body: String::from_utf8(buf).unwrap(),
            });
            let resp = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

const OK: &str = r#"{"choices": [{"message": {"role": "assistant", "content": "{\"narrative\": \"n\"}"}}], "usage": {"prompt_tokens": 12, "completion_tokens": 3}}"#;

fn policy() -> RetryPolicy {
    RetryPolicy { max_attempts: 3, backoff_base_ms: 1 }
}

fn request() -> ChatRequest {
    ChatRequest {
        run_id: "r".into(),
        agent: AgentTag::Storyline,
        model: "m".into(),
        messages: vec![Message::system("sys"), Message::user("hi")],
        temperature: 0.0,
        max_tokens: 16,
    }
}

#[test]
fn rate_limits_are_retried() {
    let (url, seen) = stub(vec![(429, "{}"), (429, "{}"), (200, OK)]);
    let client = HttpChatClient::new(&url, Some("secret".into()), policy()).unwrap();
    let resp = client.chat_complete(&request()).unwrap();
    assert_eq!(resp.text, r#"{"narrative": "n"}"#);
    assert_eq!(resp.attempts, 3);
    assert_eq!(resp.usage.prompt_tokens, 12);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert!(seen[0].headers.iter().any(|h| h.eq_ignore_ascii_case("authorization: Bearer secret")));
    let body: serde_json::Value = serde_json::from_str(&seen[2].body).unwrap();
    assert_eq!(body["model"], "m");
    assert_eq!(body["messages"][1]["content"][0]["text"], "hi");
}

#[test]
fn unauthorized_fails_immediately() {
    let (url, seen) = stub(vec![(401, r#"{"error": "bad key"}"#), (200, OK)]);
    let client = HttpChatClient::new(&url, None, policy()).unwrap();
    match client.chat_complete(&request()).unwrap_err() {
        ClientError::Status { status, body } => {
            assert_eq!(status, 401);
            assert!(body.contains("bad key"));
        }
        e => panic!("unexpected {e}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn server_errors_exhaust_retries() {
    let (url, seen) = stub(vec![(500, "{}"), (503, "{}"), (502, "{}")]);
    let client = HttpChatClient::new(&url, None, policy()).unwrap();
    assert!(matches!(
        client.chat_complete(&request()).unwrap_err(),
        ClientError::RetriesExhausted { attempts: 3, .. }
    ));
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn malformed_success_is_a_decode_error() {
    let (url, _) = stub(vec![(200, r#"{"choices": []}"#)]);
    let client = HttpChatClient::new(&url, None, policy()).unwrap();
    assert!(matches!(client.chat_complete(&request()).unwrap_err(), ClientError::Decode(_)));
}

#[test]
fn embeddings_are_normalized() {
    let (url, seen) = stub(vec![(200, r#"{"data": [{"embedding": [3.0, 4.0]}]}"#)]);
    let client = HttpEmbedClient::new(&url, "emb", None, policy()).unwrap();
    assert_eq!(client.embed_text("query").unwrap(), vec![0.6, 0.8]);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/embeddings");
    let body: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body, serde_json::json!({"model": "emb", "input": "query"}));
}
