use std::path::Path;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use proptest::prelude::*;
use serde_json::{json, Value};
use shadowsam::service::{decode_mask, AppState, Mode, Session, Store};
use shadowsam_core::data_io::{load_video_sequence, save_video_sequence};
use shadowsam_core::lstn::{Lstn, LstnConfig};
use shadowsam_core::propagation::PlusSettings;
use shadowsam_core::segmenter::{SamLite, Segmenter, SegmenterConfig};
use shadowsam_core::synthetic::BlobVideo;
use tower::ServiceExt;

const FRAMES: usize = 5;

fn dataset(root: &Path) {
    let v = BlobVideo::new(32, 32, FRAMES).build("v").unwrap();
    save_video_sequence(root, &v).unwrap();
}

fn models() -> (SamLite, Lstn) {
    (
        SamLite::new(SegmenterConfig::toy(32, 8)).unwrap(),
        Lstn::new(LstnConfig::toy(8, 1)).unwrap(),
    )
}

fn open(root: &Path, state: &Path) -> AppState {
    let (s, l) = models();
    AppState::open(root, state, s, l, PlusSettings::default()).unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
    state: std::path::PathBuf,
    app: AppState,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let state = dir.path().join("state");
    dataset(&root);
    let app = open(&root, &state);
    Fixture { _dir: dir, root, state, app }
}

async fn call(app: &AppState, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or(Body::empty(), |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.router().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, v)
}

async fn create(app: &AppState) -> String {
    let (st, v) = call(app, "POST", "/sessions", Some(json!({"video": "v"}))).await;
    assert_eq!(st, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

async fn wait_idle(app: &AppState, id: &str) -> Value {
    for _ in 0..3000 {
        let (st, v) = call(app, "GET", &format!("/sessions/{id}"), None).await;
        assert_eq!(st, StatusCode::OK);
        if v["state"] != "propagating" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("propagation did not finish");
}

async fn seeded(app: &AppState, id: &str, boxes: Value) -> Value {
    let (st, _) = call(app, "PUT", &format!("/sessions/{id}/frames/0/prompts"), Some(json!({"boxes": boxes}))).await;
    assert_eq!(st, StatusCode::OK);
    let (st, v) = call(app, "POST", &format!("/sessions/{id}/seed"), Some(json!({"frame": 0}))).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    v
}

async fn propagated(app: &AppState, id: &str, mode: &str) -> Value {
    let (st, v) = call(app, "POST", &format!("/sessions/{id}/propagate"), Some(json!({"mode": mode}))).await;
    assert_eq!(st, StatusCode::ACCEPTED, "{v}");
    let v = wait_idle(app, id).await;
    assert_eq!(v["state"], "propagated", "{v}");
    v
}

async fn all_masks(app: &AppState, id: &str) -> Vec<String> {
    let mut out = Vec::new();
    for t in 0..FRAMES {
        let (st, v) = call(app, "GET", &format!("/sessions/{id}/frames/{t}/mask"), None).await;
        assert_eq!(st, StatusCode::OK, "{v}");
        out.push(v["png_base64"].as_str().unwrap().to_string());
    }
    out
}

#[tokio::test]
async fn happy_path_returns_every_mask() {
    let f = fixture();
    let id = create(&f.app).await;
    let seed = seeded(&f.app, &id, json!([[4, 6, 20, 22]])).await;
    assert!(seed["warning"].is_null());
    let v = propagated(&f.app, &id, "forward").await;
    assert_eq!(v["frame_status"][0], "seeded");
    let masks = all_masks(&f.app, &id).await;
    assert_eq!(masks[0], seed["png_base64"].as_str().unwrap());
    let m = decode_mask(&masks[3]).unwrap();
    assert_eq!(m.shape(), (32, 32));

    let (seg, _) = models();
    let video = load_video_sequence(&f.root, "v").unwrap();
    let direct = seg
        .predict_mask(video.frame(0), &[shadowsam_core::prompt_gen::BoxPrompt::new(4, 6, 20, 22).unwrap()])
        .unwrap();
    assert_eq!(decode_mask(&masks[0]).unwrap(), direct.quantized());
}

#[tokio::test]
async fn illegal_transitions_conflict() {
    let f = fixture();
    let id = create(&f.app).await;
    let (st, _) = call(&f.app, "POST", &format!("/sessions/{id}/propagate"), Some(json!({"mode": "forward"}))).await;
    assert_eq!(st, StatusCode::CONFLICT);
    let (st, _) = call(&f.app, "POST", &format!("/sessions/{id}/seed"), Some(json!({"frame": 0}))).await;
    assert_eq!(st, StatusCode::CONFLICT);
    let (st, v) = call(&f.app, "GET", &format!("/sessions/{id}/frames/0/mask"), None).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(v["revision"], 1);
    let (st, _) = call(&f.app, "GET", &format!("/sessions/{id}/agreement"), None).await;
    assert_eq!(st, StatusCode::CONFLICT);
    seeded(&f.app, &id, json!([])).await;
    let (st, _) = call(&f.app, "POST", &format!("/sessions/{id}/frames/1/repredict"), Some(json!({"boxes": []}))).await;
    assert_eq!(st, StatusCode::CONFLICT);
    let (st, _) = call(&f.app, "POST", &format!("/sessions/{id}/propagate"), Some(json!({"mode": "plus"}))).await;
    assert_eq!(st, StatusCode::CONFLICT, "plus needs last-frame prompts");
}

#[tokio::test]
async fn unknown_resources_and_bad_boxes() {
    let f = fixture();
    let (st, _) = call(&f.app, "GET", "/sessions/nope", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call(&f.app, "POST", "/sessions", Some(json!({"video": "missing"}))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call(&f.app, "POST", "/sessions", Some(json!({"video": "../v"}))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let id = create(&f.app).await;
    let put = |frame: usize, boxes: Value| {
        let app = f.app.clone();
        let id = id.clone();
        async move { call(&app, "PUT", &format!("/sessions/{id}/frames/{frame}/prompts"), Some(json!({"boxes": boxes}))).await.0 }
    };
    assert_eq!(put(FRAMES, json!([])).await, StatusCode::NOT_FOUND);
    assert_eq!(put(0, json!([[0, 0, 32, 10]])).await, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(put(0, json!([[10, 0, 5, 10]])).await, StatusCode::UNPROCESSABLE_ENTITY);
    let (_, v) = call(&f.app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(v["state"], "created");
    assert_eq!(v["revision"], 1);
    assert_eq!(put(0, json!([[0, 0, 31, 31]])).await, StatusCode::OK);
    let (st, _) = call(&f.app, "POST", &format!("/sessions/{id}/seed"), Some(json!({"frame": 9}))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn empty_prompt_seeds_whole_image_with_warning() {
    let f = fixture();
    let id = create(&f.app).await;
    let v = seeded(&f.app, &id, json!([])).await;
    assert!(v["warning"].as_str().unwrap().contains("whole image"));
    assert_eq!(v["state"], "seeded");
}

#[tokio::test]
async fn repredict_changes_only_downstream_masks() {
    let f = fixture();
    let id = create(&f.app).await;
    seeded(&f.app, &id, json!([[4, 6, 20, 22]])).await;
    let before_rev = propagated(&f.app, &id, "forward").await["revision"].as_u64().unwrap();
    let before = all_masks(&f.app, &id).await;
    let k = 2;

    let (st, v) = call(
        &f.app,
        "POST",
        &format!("/sessions/{id}/frames/{k}/repredict"),
        Some(json!({"boxes": [[0, 0, 12, 12]], "repropagate": true})),
    )
    .await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert!(v["revision"].as_u64().unwrap() > before_rev);
    assert_eq!(v["repropagated"], json!([3, 4]));
    assert_eq!(v["state"], "repredicted");
    let after = all_masks(&f.app, &id).await;
    assert_eq!(after[..k], before[..k]);
    assert_ne!(after[k], before[k]);

    let (st, v2) = call(
        &f.app,
        "POST",
        &format!("/sessions/{id}/frames/3/repredict"),
        Some(json!({"boxes": [[20, 20, 31, 31]]})),
    )
    .await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v2["repropagated"], json!([]));
    let last = all_masks(&f.app, &id).await;
    assert_eq!(last[..3], after[..3]);
    assert_eq!(last[4], after[4]);
    let (_, s) = call(&f.app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(s["prompts"]["3"], json!([[20, 20, 31, 31]]));
    assert_eq!(s["frame_status"][3], "re_predicted");
}

#[tokio::test]
async fn plus_mode_records_agreement() {
    let f = fixture();
    let id = create(&f.app).await;
    let (st, _) = call(&f.app, "PUT", &format!("/sessions/{id}/frames/4/prompts"), Some(json!({"boxes": [[8, 8, 28, 28]]}))).await;
    assert_eq!(st, StatusCode::OK);
    seeded(&f.app, &id, json!([[4, 6, 20, 22]])).await;
    propagated(&f.app, &id, "plus").await;
    let (st, v) = call(&f.app, "GET", &format!("/sessions/{id}/agreement"), None).await;
    assert_eq!(st, StatusCode::OK);
    let records = v["records"].as_array().unwrap();
    assert_eq!(records.len(), FRAMES);
    for r in records {
        assert_eq!(r["gated"].as_bool().unwrap(), r["iou"].as_f64().unwrap() < 0.75);
    }
    for layer in ["forward", "backward", "final"] {
        let (st, _) = call(&f.app, "GET", &format!("/sessions/{id}/frames/1/mask?layer={layer}"), None).await;
        assert_eq!(st, StatusCode::OK);
    }

    let other = create(&f.app).await;
    seeded(&f.app, &other, json!([])).await;
    propagated(&f.app, &other, "forward").await;
    let (st, _) = call(&f.app, "GET", &format!("/sessions/{other}/frames/1/mask?layer=backward"), None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (_, v) = call(&f.app, "GET", &format!("/sessions/{other}/agreement"), None).await;
    assert_eq!(v["records"], json!([]));
}

#[tokio::test]
async fn reads_never_mutate() {
    let f = fixture();
    let id = create(&f.app).await;
    seeded(&f.app, &id, json!([[1, 1, 9, 9]])).await;
    propagated(&f.app, &id, "forward").await;
    let (_, first) = call(&f.app, "GET", &format!("/sessions/{id}"), None).await;
    for _ in 0..3 {
        all_masks(&f.app, &id).await;
        call(&f.app, "GET", &format!("/sessions/{id}/agreement"), None).await;
        call(&f.app, "GET", "/sessions", None).await;
        let (_, again) = call(&f.app, "GET", &format!("/sessions/{id}"), None).await;
        assert_eq!(again, first);
    }
}

#[tokio::test]
async fn restart_recovers_sessions() {
    let f = fixture();
    let a = create(&f.app).await;
    seeded(&f.app, &a, json!([[4, 6, 20, 22]])).await;
    propagated(&f.app, &a, "forward").await;
    let b = create(&f.app).await;
    call(&f.app, "PUT", &format!("/sessions/{b}/frames/0/prompts"), Some(json!({"boxes": []}))).await;
    let (_, va) = call(&f.app, "GET", &format!("/sessions/{a}"), None).await;
    let (_, vb) = call(&f.app, "GET", &format!("/sessions/{b}"), None).await;
    let masks = all_masks(&f.app, &a).await;
    drop(f.app);

    let app = open(&f.root, &f.state);
    let (_, ra) = call(&app, "GET", &format!("/sessions/{a}"), None).await;
    let (_, rb) = call(&app, "GET", &format!("/sessions/{b}"), None).await;
    assert_eq!(ra, va);
    assert_eq!(rb, vb);
    assert_eq!(all_masks(&app, &a).await, masks);
    let c = create(&app).await;
    assert!(c != a && c != b);
}

#[tokio::test]
async fn interrupted_propagation_resumes_after_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (root, state) = (dir.path().join("data"), dir.path().join("state"));
    dataset(&root);
    let video = load_video_sequence(&root, "v").unwrap();
    let (seg, _) = models();
    let mut s = Session::new("s000001".into(), &video);
    s.put_prompts(0, vec![]).unwrap();
    s.apply_seed(0, &seg.predict_mask(video.frame(0), &[]).unwrap()).unwrap();
    s.begin_propagation(Mode::Forward).unwrap();
    let rev = s.revision;
    Store::open(&state).unwrap().save(&s).unwrap();

    let app = open(&root, &state);
    let v = wait_idle(&app, "s000001").await;
    assert_eq!(v["state"], "propagated");
    assert_eq!(v["revision"].as_u64().unwrap(), rev + 1);
    assert_eq!(all_masks(&app, "s000001").await.len(), FRAMES);
}

#[derive(Debug, Clone)]
enum Op {
    Prompts(usize, bool),
    Seed(usize),
    Propagate(bool),
    Mask(usize),
    Agreement,
    Repredict(usize, bool),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0..FRAMES + 1, any::<bool>()).prop_map(|(f, ok)| Op::Prompts(f, ok)),
        (0..FRAMES + 1).prop_map(Op::Seed),
        any::<bool>().prop_map(Op::Propagate),
        (0..FRAMES).prop_map(Op::Mask),
        Just(Op::Agreement),
        (0..FRAMES, any::<bool>()).prop_map(|(f, r)| Op::Repredict(f, r)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn masks_are_unreachable_before_propagation(ops in proptest::collection::vec(op(), 1..10)) {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async {
            let f = fixture();
            let id = create(&f.app).await;
            let mut last_rev = 1u64;
            let mut completed = false;
            for op in ops {
                let (st, v) = match op {
                    Op::Prompts(fr, ok) => {
                        let boxes = if ok { json!([[2, 2, 12, 14]]) } else { json!([[2, 2, 40, 14]]) };
                        call(&f.app, "PUT", &format!("/sessions/{id}/frames/{fr}/prompts"), Some(json!({"boxes": boxes}))).await
                    }
                    Op::Seed(fr) => {
                        let r = call(&f.app, "POST", &format!("/sessions/{id}/seed"), Some(json!({"frame": fr}))).await;
                        if r.0 == StatusCode::OK {
                            completed = false;
                        }
                        r
                    }
                    Op::Propagate(plus) => {
                        let mode = if plus { "plus" } else { "forward" };
                        let r = call(&f.app, "POST", &format!("/sessions/{id}/propagate"), Some(json!({"mode": mode}))).await;
                        if r.0 == StatusCode::ACCEPTED {
                            let done = wait_idle(&f.app, &id).await;
                            completed = done["state"] == "propagated";
                        }
                        r
                    }
                    Op::Mask(fr) => {
                        let r = call(&f.app, "GET", &format!("/sessions/{id}/frames/{fr}/mask"), None).await;
                        assert!(r.0 != StatusCode::OK || completed, "mask served before propagation: {:?}", r.1);
                        r
                    }
                    Op::Agreement => call(&f.app, "GET", &format!("/sessions/{id}/agreement"), None).await,
                    Op::Repredict(fr, rep) => {
                        call(&f.app, "POST", &format!("/sessions/{id}/frames/{fr}/repredict"), Some(json!({"boxes": [], "repropagate": rep}))).await
                    }
                };
                if let Some(r) = v["revision"].as_u64() {
                    assert!(r >= last_rev, "revision went backwards");
                    last_rev = r;
                }
                assert!(st.is_success() || [StatusCode::NOT_FOUND, StatusCode::CONFLICT, StatusCode::UNPROCESSABLE_ENTITY].contains(&st), "{st}");
            }
        });
    }
}
