use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use decc_core::chain::{run_corpus, run_document, ChainConfig, RunMode};
use decc_core::dataset::{load_corpus, Corpus, CorpusFormat};
use decc_core::llm::{
    ChatBackend, ChatMessage, ChatRequest, GenerationParams, LiveBackend, LiveConfig, RecordingBackend, ReplayBackend,
    RetryPolicy, Script, ScriptedBackend,
};
use decc_core::types::Language;
use decc_core::LlmError;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn corpus() -> Corpus {
    load_corpus(&fixture("ecpe_en.jsonl"), CorpusFormat::CanonicalJsonl).unwrap()
}

fn scripted() -> ScriptedBackend {
    ScriptedBackend::new(Script::load(&fixture("ecpe_en.script.json")).unwrap())
}

struct Captured {
    authorization: Option<String>,
    body: String,
}

/// Serves one canned `(status, body)` per connection, recording requests.
fn mock_server(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Captured>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
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
                    length = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    authorization = Some(line["authorization:".len()..].trim().to_string());
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Captured { authorization, body: String::from_utf8(buf).unwrap() });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen)
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy { max_attempts: 3, base_delay: Duration::from_millis(5), max_delay: Duration::from_millis(20) }
}

fn hello() -> ChatRequest {
    ChatRequest::new(vec![ChatMessage::system("sys"), ChatMessage::user("hello")], GenerationParams::default())
}

const OK_BODY: &str = r#"{"choices":[{"message":{"role":"assistant","content":"happy"}}],"usage":{"total_tokens":12}}"#;

#[test]
fn live_backend_retries_server_errors() {
    let (url, seen) = mock_server(vec![(500, "{}".into()), (200, OK_BODY.into())]);
    std::env::set_var("DECC_TEST_KEY_RETRY", "sk-test");
    let backend = LiveBackend::new(&LiveConfig::new(url, "DECC_TEST_KEY_RETRY")).unwrap().with_retry(fast_retry());
    assert_eq!(backend.complete(&hello()).unwrap(), "happy");
    assert_eq!(backend.requests_sent(), 2);
    assert_eq!(backend.tokens_used(), 12);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[1].authorization.as_deref(), Some("Bearer sk-test"));
    let body: serde_json::Value = serde_json::from_str(&seen[1].body).unwrap();
    assert_eq!(body["messages"][1]["content"], "hello");
    assert_eq!(body["temperature"], 0.7);
    assert_eq!(body["frequency_penalty"], 0.3);
}

#[test]
fn live_backend_does_not_retry_client_errors() {
    let (url, seen) = mock_server(vec![(400, r#"{"error":"bad"}"#.into())]);
    let backend = LiveBackend::new(&LiveConfig::new(url, "DECC_TEST_KEY_UNSET")).unwrap().with_retry(fast_retry());
    match backend.complete(&hello()) {
        Err(LlmError::Http { status: 400, .. }) => {}
        other => panic!("{other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
    assert!(seen.lock().unwrap()[0].authorization.is_none());
}

#[test]
fn live_backend_gives_up_after_max_attempts() {
    let (url, _) = mock_server(vec![(503, "{}".into()), (503, "{}".into()), (429, "{}".into())]);
    let backend = LiveBackend::new(&LiveConfig::new(url, "DECC_TEST_KEY_UNSET")).unwrap().with_retry(fast_retry());
    match backend.complete(&hello()) {
        Err(LlmError::RetriesExhausted { attempts: 3, .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn remote_endpoint_without_key_is_rejected() {
    let err = LiveBackend::new(&LiveConfig::new("https://api.example.com/v1", "DECC_TEST_KEY_NEVER_SET")).err();
    assert!(matches!(err, Some(LlmError::MissingApiKey(v)) if v == "DECC_TEST_KEY_NEVER_SET"));
}

#[test]
fn replay_reproduces_a_recorded_run() {
    let corpus = corpus();
    let cfg = ChainConfig::default();
    let recorder = RecordingBackend::new(scripted());
    let recorded = run_corpus(corpus.documents(), &cfg, &recorder, RunMode::Chain).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    recorder.into_transcript().save(&path).unwrap();
    let replayed = run_corpus(corpus.documents(), &cfg, &ReplayBackend::open(&path).unwrap(), RunMode::Chain).unwrap();
    assert_eq!(recorded, replayed);
}

#[test]
fn edited_prompt_fails_replay_with_drift() {
    let corpus = corpus();
    let doc = corpus.get("fig1").unwrap();
    let recorder = RecordingBackend::new(scripted());
    run_document(doc, &ChainConfig::default(), &recorder).unwrap();
    let replay = ReplayBackend::new(recorder.into_transcript());

    let mut cfg = ChainConfig::default();
    let mut set = cfg.prompts.get(Language::En).clone();
    set.recognize.push_str(" Be brief.");
    cfg.prompts.insert(set);
    let run = run_document(doc, &cfg, &replay).unwrap();
    let failure = run.trace.failure.expect("drift is reported");
    assert!(failure.contains("prompt drift at request #1"), "{failure}");
    assert!(run.pairs.is_empty());
}

#[test]
fn missing_transcript_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("absent.jsonl");
    match ReplayBackend::open(&path) {
        Err(LlmError::TranscriptNotFound(p)) => assert_eq!(p, path),
        Err(e) => panic!("{e}"),
        Ok(_) => panic!("opened a missing transcript"),
    }
}

#[test]
fn tampered_transcript_is_rejected() {
    let recorder = RecordingBackend::new(scripted());
    run_document(corpus().get("fig1").unwrap(), &ChainConfig::default(), &recorder).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    recorder.into_transcript().save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap().replacen("wallet", "purse", 1);
    std::fs::write(&path, text).unwrap();
    assert!(matches!(ReplayBackend::open(&path), Err(LlmError::TranscriptCorrupt { line: 1, .. })));
}
