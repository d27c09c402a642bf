mod common;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use skinmap_core::session::SessionLayout;
use skinmap_service::server::router;
use tower::ServiceExt;

use common::{fused_session, small_config};

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>, Option<String>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes, ctype)
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b, _) = call(app, Method::GET, uri, None).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

#[tokio::test]
async fn empty_root_lists_no_sessions() {
    let root = tempfile::tempdir().unwrap();
    let app = router(root.path());
    let (s, v) = get_json(&app, "/api/sessions").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!([]));
    let (s, _) = get_json(&app, "/api/sessions/nope/manifest").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    // a root that does not exist yet is also empty
    let app = router(root.path().join("missing"));
    assert_eq!(get_json(&app, "/api/sessions").await.1, json!([]));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn read_endpoints_mirror_session_files() {
    let root = tempfile::tempdir().unwrap();
    let dir = fused_session(root.path(), "visit1", &small_config(6));
    let layout = SessionLayout::new(&dir);
    let app = router(root.path());

    let (s, v) = get_json(&app, "/api/sessions").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v[0]["session_id"], "visit1");
    assert_eq!(v[0]["stages"]["fused"], true);
    assert_eq!(v[0]["image_count"], 60);

    let (s, m) = get_json(&app, "/api/sessions/visit1/manifest").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(m["images"].as_array().unwrap().len(), 60);
    assert_eq!(m["images"][0]["pole"], "A");

    let (s, body, ctype) = call(&app, Method::GET, "/api/sessions/visit1/lesions", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("application/json"));
    assert_eq!(body, std::fs::read(layout.lesions()).unwrap());

    let (s, body, ctype) = call(&app, Method::GET, "/api/sessions/visit1/images/C2", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("image/png"));
    assert_eq!(body, std::fs::read(layout.image("C2")).unwrap());

    let (s, body, _) = call(&app, Method::GET, "/api/sessions/visit1/mesh", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, std::fs::read(layout.mesh()).unwrap());
    let (s, body, _) = call(&app, Method::GET, "/api/sessions/visit1/texture", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, std::fs::read(layout.texture()).unwrap());

    let (s, dets) = get_json(&app, "/api/sessions/visit1/detections/A3").await;
    assert_eq!(s, StatusCode::OK);
    let first = &dets.as_array().unwrap()[0];
    let id = first["det_id"].as_u64().unwrap();
    let (s, one) = get_json(&app, &format!("/api/sessions/visit1/detections/A3/{id}")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&one, first);

    for uri in [
        "/api/sessions/visit1/tracks",
        "/api/sessions/visit1/images/Z9",
        "/api/sessions/visit1/detections/Z9",
        "/api/sessions/visit1/detections/A3/99999",
        "/api/sessions/visit2/lesions",
        "/api/sessions/../manifest",
        "/api/sessions/%2E%2E/manifest",
    ] {
        let (s, _) = get_json(&app, uri).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{uri}");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn patch_remove_is_reflected_and_persisted() {
    let root = tempfile::tempdir().unwrap();
    fused_session(root.path(), "s", &small_config(6));
    let app = router(root.path());
    let (_, dets) = get_json(&app, "/api/sessions/s/detections/A3").await;
    let id = dets[0]["det_id"].as_u64().unwrap();
    let uri = format!("/api/sessions/s/detections/A3/{id}");

    let (s, ack, _) = call(&app, Method::PATCH, &uri, Some(json!({"action": "remove"}))).await;
    assert_eq!(s, StatusCode::OK);
    let ack: Value = serde_json::from_slice(&ack).unwrap();
    assert_eq!(ack["removed"], true);
    assert_eq!(get_json(&app, &uri).await.1["removed"], true);

    // a new server instance over the same files sees the removal
    let restarted = router(root.path());
    assert_eq!(get_json(&restarted, &uri).await.1["removed"], true);

    // the image-level route takes det_id from the body
    let (s, _, _) = call(
        &restarted,
        Method::PATCH,
        "/api/sessions/s/detections/A3",
        Some(json!({"det_id": id, "action": "annotate", "notes": "monitor at next visit"})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let d = get_json(&app, &uri).await.1;
    assert_eq!(d["notes"], "monitor at next visit");
    assert_eq!(d["removed"], true);

    let (s, _, _) = call(&app, Method::PATCH, "/api/sessions/s/detections/A3", Some(json!({"action": "remove"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _, _) = call(&app, Method::PATCH, &uri, Some(json!({"action": "explode"}))).await;
    assert!(s.is_client_error());
    let (s, _, _) = call(&app, Method::PATCH, "/api/sessions/s/detections/A3/99999", Some(json!({"action": "remove"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn malformed_session_is_a_server_error() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("broken");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("manifest.json"), "{ not json").unwrap();
    let app = router(root.path());
    let (s, v) = get_json(&app, "/api/sessions/broken/manifest").await;
    assert_eq!(s, StatusCode::INTERNAL_SERVER_ERROR);
    assert!(v["error"].as_str().unwrap().contains("broken"));
    assert_eq!(get_json(&app, "/api/sessions").await.0, StatusCode::INTERNAL_SERVER_ERROR);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn reads_during_writes_never_see_torn_files() {
    let root = tempfile::tempdir().unwrap();
    fused_session(root.path(), "s", &small_config(6));
    let app = router(root.path());
    let (_, dets) = get_json(&app, "/api/sessions/s/detections/A3").await;
    let ids: Vec<u64> = dets.as_array().unwrap().iter().map(|d| d["det_id"].as_u64().unwrap()).collect();

    let writer = {
        let app = app.clone();
        let ids = ids.clone();
        tokio::spawn(async move {
            for round in 0..10 {
                for id in &ids {
                    let action = if round % 2 == 0 { "remove" } else { "restore" };
                    let uri = format!("/api/sessions/s/detections/A3/{id}");
                    let (s, _, _) = call(&app, Method::PATCH, &uri, Some(json!({ "action": action }))).await;
                    assert_eq!(s, StatusCode::OK);
                }
            }
        })
    };
    let mut reads = 0;
    while !writer.is_finished() {
        let (s, body, _) = call(&app, Method::GET, "/api/sessions/s/detections/A3", None).await;
        assert_eq!(s, StatusCode::OK);
        let v: Value = serde_json::from_slice(&body).expect("complete JSON document");
        assert_eq!(v.as_array().unwrap().len(), ids.len());
        reads += 1;
    }
    writer.await.unwrap();
    assert!(reads > 0);
}
