use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use air_refinery::stages::embed_text;
use air_refinery::{
    stage1_summarize_filter, BackendConfig, BackendError, ChatBackend, ChatMessage, EmbeddingBackend, Error,
    HttpChat, HttpEmbedding, NewsArticle, RetryPolicy, StageExec,
};
use serde_json::{json, Value};

struct Captured {
    request_line: String,
    headers: Vec<(String, String)>,
    body: Value,
}

impl Captured {
    fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

/// Serves one scripted `(status, body)` reply per connection and reports
/// every request it saw.
fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<Captured>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, reply) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut headers = Vec::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (k, v) = line.split_once(':').unwrap();
                headers.push((k.trim().to_string(), v.trim().to_string()));
            }
            let len: usize = headers
                .iter()
                .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
                .map_or(0, |(_, v)| v.parse().unwrap());
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            tx.send(Captured {
                request_line: request_line.trim_end().to_string(),
                headers,
                body: serde_json::from_slice(&body).unwrap_or(Value::Null),
            })
            .unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}/v1"), rx)
}

fn config(base_url: String, auth_env: &str) -> BackendConfig {
    std::env::set_var(auth_env, "sk-test");
    BackendConfig {
        base_url,
        chat_model: "chat-m".into(),
        embedding_model: "embed-m".into(),
        auth_env: auth_env.into(),
        timeout_secs: 5,
        max_in_flight: 1,
        retry_base_ms: 0,
    }
}

fn recv(rx: &mpsc::Receiver<Captured>) -> Captured {
    rx.recv_timeout(Duration::from_secs(5)).unwrap()
}

#[test]
fn chat_request_shape_and_reply() {
    let reply = json!({"choices": [{"message": {"role": "assistant", "content": "hello"}}]}).to_string();
    let (url, rx) = serve(vec![(200, reply)]);
    let chat = HttpChat::new(&config(url, "AIR_TEST_TOKEN_CHAT")).unwrap();
    let out = chat
        .complete(&[ChatMessage::system("sys"), ChatMessage::user("hi")])
        .unwrap();
    assert_eq!(out, "hello");

    let req = recv(&rx);
    assert_eq!(req.request_line, "POST /v1/chat/completions HTTP/1.1");
    assert_eq!(req.header("authorization"), Some("Bearer sk-test"));
    assert_eq!(
        req.body,
        json!({
            "model": "chat-m",
            "temperature": 0,
            "messages": [{"role": "system", "content": "sys"}, {"role": "user", "content": "hi"}],
        })
    );
}

#[test]
fn embedding_request_and_parse() {
    let replies = vec![
        (200, json!({"data": [{"embedding": [0.5, -0.25]}]}).to_string()),
        (200, json!({"embedding": [1.0]}).to_string()),
        (200, "[0.1, 0.2, 0.3]".to_string()),
        (200, json!({"data": []}).to_string()),
    ];
    let (url, rx) = serve(replies);
    let emb = HttpEmbedding::new(&config(url, "AIR_TEST_TOKEN_EMB")).unwrap();
    assert_eq!(emb.embed("some text").unwrap(), [0.5, -0.25]);
    let req = recv(&rx);
    assert_eq!(req.request_line, "POST /v1/embeddings HTTP/1.1");
    assert_eq!(req.body, json!({"model": "embed-m", "input": "some text"}));
    assert_eq!(emb.embed("x").unwrap(), [1.0]);
    assert_eq!(emb.embed("x").unwrap(), [0.1, 0.2, 0.3]);
    assert!(matches!(emb.embed("x"), Err(BackendError::Response(_))));
}

#[test]
fn empty_text_is_rejected_without_a_request() {
    let (url, rx) = serve(vec![]);
    let emb = HttpEmbedding::new(&config(url, "AIR_TEST_TOKEN_EMPTY")).unwrap();
    assert!(embed_text("   ", &emb).is_err());
    assert!(rx.recv_timeout(Duration::from_millis(100)).is_err());
}

#[test]
fn server_errors_are_retried_up_to_four_times() {
    let ok = json!({"choices": [{"message": {"content": "N/A"}}]}).to_string();
    let mut replies: Vec<(u16, String)> = (0..3).map(|_| (500, "{\"error\":\"busy\"}".to_string())).collect();
    replies.push((200, ok));
    // A second article that fails every attempt.
    replies.extend((0..4).map(|_| (503, "down".to_string())));
    let (url, rx) = serve(replies);
    let chat = HttpChat::new(&config(url, "AIR_TEST_TOKEN_RETRY")).unwrap();
    let exec = StageExec {
        retry: RetryPolicy {
            max_attempts: 10,
            base_delay: Duration::ZERO,
        },
        max_in_flight: 1,
    };
    let articles: Vec<NewsArticle> = ["a1", "a2"]
        .iter()
        .map(|id| NewsArticle {
            id: id.to_string(),
            datetime: "2024-03-04T08:00:00".parse().unwrap(),
            headline: "h".into(),
            body: "b".into(),
        })
        .collect();
    let out = stage1_summarize_filter(&articles, "crude oil", "crude oil market", &chat, &exec).unwrap();
    assert_eq!(out.items.len(), 1);
    assert_eq!(out.errors.len(), 1);
    assert_eq!(out.errors[0].item, "a2");
    assert_eq!(out.errors[0].attempts, 4);
    assert!(out.errors[0].message.contains("503"), "{}", out.errors[0].message);
    assert_eq!(rx.try_iter().count(), 8);
}

#[test]
fn unreachable_server_is_a_transport_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let chat = HttpChat::new(&config(url, "AIR_TEST_TOKEN_DOWN")).unwrap();
    assert!(matches!(chat.complete(&[ChatMessage::user("x")]), Err(BackendError::Transport(_))));
}

#[test]
fn invalid_settings_are_config_errors() {
    let mut cfg = config("http://localhost".into(), "AIR_TEST_TOKEN_CFG");
    cfg.max_in_flight = 0;
    assert!(matches!(HttpChat::new(&cfg), Err(Error::Config(_))));
    let cfg = BackendConfig {
        auth_env: "AIR_TEST_TOKEN_NEVER_SET".into(),
        ..BackendConfig::default()
    };
    assert!(matches!(HttpEmbedding::new(&cfg), Err(Error::Config(_))));
}
