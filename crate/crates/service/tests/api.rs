use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use decc_core::dataset::{parse_corpus, CorpusFormat};
use decc_core::eval::{aggregate_judgments, HumanJudgment, ItemStatus, Prediction, Verdict};
use decc_service::{build_items, read_items, router, write_items, ItemRecord, Store, StoreConfig, StoreError};

const CORPUS: &str = r#"{"id":"a","language":"en","clauses":["he lost his wallet","so he was sad","then he went home"],"pairs":[[2,1]]}
{"id":"b","language":"en","clauses":["the rain stopped","she was glad","and the sun came out"],"pairs":[[2,1],[2,3]]}
{"id":"c","language":"en","clauses":["nothing happened today"],"pairs":[]}
"#;

fn items() -> Vec<ItemRecord> {
    let corpus = parse_corpus("t", CORPUS, CorpusFormat::CanonicalJsonl).unwrap();
    let pred = |id: &str, pairs: Vec<(usize, usize)>| Prediction {
        document_id: id.into(),
        pairs,
        trace_ref: None,
        cause_spans: vec![],
    };
    let preds = vec![pred("a", vec![(2, 1), (2, 2)]), pred("b", vec![(2, 1), (2, 3), (2, 2), (1, 1)])];
    build_items(&corpus, &preds).unwrap()
}

fn config(annotators: &[&str]) -> StoreConfig {
    StoreConfig { annotators: annotators.iter().map(|a| a.to_string()).collect(), panel: 5, threshold: 3 }
}

fn five() -> StoreConfig {
    config(&["ann1", "ann2", "ann3", "ann4", "ann5"])
}

fn open(dir: &Path, cfg: StoreConfig) -> Store {
    Store::open(items(), &dir.join("judgments.jsonl"), cfg).unwrap()
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, value)
}

async fn judge(app: &Router, annotator: &str, item: &str, verdict: &str) -> (StatusCode, Value) {
    call(app, "POST", "/judgments", Some(json!({ "annotator": annotator, "item": item, "verdict": verdict }))).await
}

#[test]
fn items_follow_corpus_order() {
    let items = items();
    let ids: Vec<&str> = items.iter().map(|i| i.id.as_str()).collect();
    assert_eq!(ids, ["i00001", "i00002", "i00003", "i00004", "i00005", "i00006"]);
    assert_eq!(items[2].document_id, "b");
    assert_eq!(items[2].gold_pairs, vec![(2, 1), (2, 3)]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("items.jsonl");
    write_items(&path, &items).unwrap();
    assert_eq!(read_items(&path).unwrap(), items);
}

#[tokio::test]
async fn queue_resolves_at_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(Arc::new(open(dir.path(), five())), None);

    let (status, item) = call(&app, "GET", "/items/next?annotator=ann1", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(item["id"], "i00001");
    assert_eq!(item["clauses"][0]["text"], "he lost his wallet");

    let (status, body) = judge(&app, "ann1", "i00001", "correct").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "pending");
    let (_, next) = call(&app, "GET", "/items/next?annotator=ann1", None).await;
    assert_eq!(next["id"], "i00002");

    judge(&app, "ann2", "i00001", "correct").await;
    let (_, body) = judge(&app, "ann3", "i00001", "correct").await;
    assert_eq!(body["status"], "resolved-correct");
    assert_eq!(body["correct"], 3);

    // resolved early: the remaining annotators never see it
    let (_, next) = call(&app, "GET", "/items/next?annotator=ann4", None).await;
    assert_eq!(next["id"], "i00002");
    let (status, _) = judge(&app, "ann4", "i00001", "incorrect").await;
    assert_eq!(status, StatusCode::CONFLICT);

    for a in ["ann1", "ann2", "ann3"] {
        judge(&app, a, "i00002", "incorrect").await;
    }
    let (_, progress) = call(&app, "GET", "/progress", None).await;
    assert_eq!(progress["resolved_correct"], 1);
    assert_eq!(progress["resolved_incorrect"], 1);
    assert_eq!(progress["pending"], 4);
    assert_eq!(progress["judgments"], 6);
    assert_eq!(progress["per_annotator"]["ann1"], 2);
}

#[tokio::test]
async fn rejects_bad_submissions_without_touching_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(Arc::new(open(dir.path(), five())), None);
    judge(&app, "ann1", "i00003", "correct").await;
    let log = dir.path().join("judgments.jsonl");
    let before = std::fs::read(&log).unwrap();

    let (status, body) = judge(&app, "ann1", "i00003", "incorrect").await;
    assert_eq!(status, StatusCode::CONFLICT, "{body}");
    assert_eq!(judge(&app, "ann1", "i99999", "correct").await.0, StatusCode::NOT_FOUND);
    assert_eq!(judge(&app, "mallory", "i00003", "correct").await.0, StatusCode::FORBIDDEN);
    assert_eq!(call(&app, "GET", "/items/next?annotator=mallory", None).await.0, StatusCode::FORBIDDEN);
    let (status, _) =
        call(&app, "POST", "/judgments", Some(json!({ "annotator": "ann2", "item": "i00003", "verdict": "maybe" }))).await;
    assert!(status.is_client_error());
    assert_eq!(std::fs::read(&log).unwrap(), before);
}

#[tokio::test]
async fn annotator_exhausts_the_queue() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(Arc::new(open(dir.path(), five())), None);
    let mut seen = Vec::new();
    loop {
        let (status, item) = call(&app, "GET", "/items/next?annotator=ann5", None).await;
        if status == StatusCode::NO_CONTENT {
            break;
        }
        let id = item["id"].as_str().unwrap().to_string();
        assert!(!seen.contains(&id), "served {id} twice");
        judge(&app, "ann5", &id, "correct").await;
        seen.push(id);
    }
    assert_eq!(seen.len(), 6);
}

#[tokio::test]
async fn export_matches_aggregation_of_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(open(dir.path(), config(&["x", "y", "z"])));
    let app = router(Arc::clone(&store), None);
    let plan = [
        ("x", "i00001", "correct"),
        ("y", "i00001", "correct"),
        ("z", "i00001", "correct"),
        ("x", "i00002", "incorrect"),
        ("y", "i00002", "incorrect"),
        ("z", "i00002", "incorrect"),
        ("x", "i00003", "correct"),
    ];
    for (a, i, v) in plan {
        judge(&app, a, i, v).await;
    }
    let (_, export) = call(&app, "GET", "/export", None).await;
    let export = export.as_array().unwrap();
    assert_eq!(export.len(), 6);

    let log = std::fs::read_to_string(dir.path().join("judgments.jsonl")).unwrap();
    let judgments: Vec<HumanJudgment> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let expected = aggregate_judgments(&judgments, 5, 3).unwrap();
    for record in export {
        let id = record["item"].as_str().unwrap();
        let want = expected.get(id).copied().unwrap_or(ItemStatus::Pending);
        assert_eq!(record["status"], serde_json::to_value(want).unwrap(), "{id}");
    }
    assert_eq!(export[0]["status"], "resolved-correct");
    assert_eq!(export[1]["status"], "resolved-incorrect");
    assert_eq!(export[2]["status"], "pending");
    assert_eq!(export[2]["correct"], 1);
}

#[test]
fn empty_queue_exports_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(Vec::new(), &dir.path().join("j.jsonl"), five()).unwrap();
    assert!(store.export().is_empty());
    assert!(store.next_item("ann1").unwrap().is_none());
}

#[test]
fn restart_replays_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let first = open(dir.path(), five());
    for (a, v) in [("ann1", Verdict::Correct), ("ann2", Verdict::Incorrect), ("ann3", Verdict::Correct)] {
        first.submit(a, "i00004", v).unwrap();
    }
    first.submit("ann1", "i00005", Verdict::Incorrect).unwrap();
    let exported = first.export();
    let progress = first.progress();
    drop(first);

    let second = open(dir.path(), five());
    assert_eq!(second.export(), exported);
    assert_eq!(second.progress(), progress);
    assert!(matches!(second.submit("ann1", "i00004", Verdict::Correct), Err(StoreError::Duplicate { .. })));
    assert_eq!(second.next_item("ann1").unwrap().unwrap().record.id, "i00001");
}

#[test]
fn torn_final_line_is_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let store = open(dir.path(), five());
    store.submit("ann1", "i00001", Verdict::Correct).unwrap();
    let exported = store.export();
    drop(store);
    let log = dir.path().join("judgments.jsonl");
    let mut text = std::fs::read_to_string(&log).unwrap();
    text.push_str(r#"{"item":"i00002","annot"#);
    std::fs::write(&log, text).unwrap();

    let store = open(dir.path(), five());
    assert_eq!(store.export(), exported);
    store.submit("ann2", "i00002", Verdict::Correct).unwrap();
    drop(store);
    let reopened = open(dir.path(), five());
    assert_eq!(reopened.judgments().len(), 2);
}

#[test]
fn corrupt_log_line_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("judgments.jsonl");
    std::fs::write(&log, "{\"item\":\"i00001\",\"annotator\":\"nobody\",\"verdict\":\"correct\"}\n").unwrap();
    assert!(matches!(Store::open(items(), &log, five()), Err(StoreError::Corrupt { line: 1, .. })));
}

#[test]
fn invalid_panel_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = StoreConfig { threshold: 6, ..five() };
    assert!(matches!(Store::open(items(), &dir.path().join("j"), cfg), Err(StoreError::Config(_))));
}

#[test]
fn concurrent_annotators_never_double_judge() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(open(dir.path(), five()));
    let handles: Vec<_> = ["ann1", "ann2", "ann3", "ann4", "ann5"]
        .into_iter()
        .map(|a| {
            let store = Arc::clone(&store);
            std::thread::spawn(move || {
                let mut served = HashSet::new();
                while let Some(item) = store.next_item(a).unwrap() {
                    assert!(served.insert(item.record.id.clone()));
                    match store.submit(a, &item.record.id, Verdict::Correct) {
                        Ok(_) | Err(StoreError::Resolved(_)) => {}
                        Err(e) => panic!("{e}"),
                    }
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert!(store.export().iter().all(|r| r.status == ItemStatus::ResolvedCorrect));
    assert!(store.export().iter().all(|r| r.correct == 3));
    let reopened = open(dir.path(), five());
    assert_eq!(reopened.export(), store.export());
}

#[tokio::test]
async fn serves_the_ui_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let ui = dir.path().join("ui");
    std::fs::create_dir(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<html>review</html>").unwrap();
    let app = router(Arc::new(open(dir.path(), five())), Some(ui));
    let resp = app.clone().oneshot(Request::get("/ui/").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let body = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&body[..], b"<html>review</html>");
    let resp = app.oneshot(Request::get("/").body(Body::empty()).unwrap()).await.unwrap();
    assert!(resp.status().is_redirection());
}
