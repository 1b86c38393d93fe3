use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use protosplit::bundle::{read_log, replay, PatchBundle};
use protosplit::detect::{detect, top_activated_patches, DetectionConfig};
use protosplit::metrics::pattern_purity;
use protosplit::split::{concepts_from_labels, ConceptLabel};
use protosplit::synth::{generate_bank, SynthConfig};
use protosplit::{corpus_activations, Execution};
use protosplit_server::{router, AppState, ServerConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

fn bundle(seed: u64) -> PatchBundle {
    let wb = generate_bank(&SynthConfig::with_seed(seed)).unwrap();
    let mut b = PatchBundle::from_workbench(&wb);
    b.render_feature_thumbnails();
    b
}

fn app(bundle: PatchBundle, log: &Path, detected: bool) -> Arc<AppState> {
    let report = detected.then(|| {
        detect(&bundle.corpus, &bundle.bank, &DetectionConfig::default(), Execution::default()).unwrap()
    });
    Arc::new(AppState::new(bundle, ServerConfig::default(), report, log).unwrap())
}

async fn call(app: &Arc<AppState>, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req
            .header("content-type", "application/json")
            .body(Body::from(v.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let res = router(app.clone()).oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

async fn get(app: &Arc<AppState>, uri: &str) -> (StatusCode, Value) {
    call(app, Method::GET, uri, None).await
}

async fn post(app: &Arc<AppState>, uri: &str, body: Value) -> (StatusCode, Value) {
    call(app, Method::POST, uri, Some(body)).await
}

/// Polls a job to a terminal state, checking progress never goes back.
async fn wait(app: &Arc<AppState>, job: u64) -> Value {
    let mut last_step = 0;
    for _ in 0..30_000 {
        let (status, j) = get(app, &format!("/v1/jobs/{job}")).await;
        assert_eq!(status, StatusCode::OK);
        if let Some(step) = j["progress"]["step"].as_u64() {
            assert!(step >= last_step, "progress went from {last_step} to {step}");
            last_step = step;
        }
        if j["status"] == "done" || j["status"] == "failed" {
            return j;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("job {job} did not finish");
}

fn patch_ids(v: &Value) -> Vec<usize> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|p| p["patch"].as_u64().unwrap() as usize)
        .collect()
}

#[tokio::test(flavor = "multi_thread")]
async fn listing_requires_detection_and_paginates() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(bundle(0), &dir.path().join("log.jsonl"), false);
    let (status, body) = get(&app, "/v1/prototypes").await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "run detection first");

    let (status, body) = post(&app, "/v1/detect", json!({})).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let job = wait(&app, body["job"].as_u64().unwrap()).await;
    assert_eq!(job["status"], "done");
    assert_eq!(job["kind"], "detect");

    let (status, list) = get(&app, "/v1/prototypes?limit=10").await;
    assert_eq!(status, StatusCode::OK);
    let truth = app.bundle.truth.clone().unwrap();
    let top: Vec<usize> = list["items"].as_array().unwrap().iter().map(|i| i["id"].as_u64().unwrap() as usize).collect();
    assert_eq!(top.len(), 10);
    let planted = top.iter().filter(|&&d| truth.is_entangled(d)).count();
    assert!(planted >= 7, "{planted} planted prototypes in the top 10");
    assert_eq!(list["items"][0]["rank"], 0);
    assert_eq!(list["items"][0]["split_status"], "none");

    // the full list is browsable and stable across requests
    let total = list["total"].as_u64().unwrap();
    let (_, all) = get(&app, &format!("/v1/prototypes?limit={total}")).await;
    let (_, again) = get(&app, &format!("/v1/prototypes?limit={total}")).await;
    assert_eq!(all, again);
    let ids: BTreeSet<u64> = all["items"].as_array().unwrap().iter().map(|i| i["id"].as_u64().unwrap()).collect();
    assert_eq!(ids.len() as u64, total);

    let (status, page) = get(&app, &format!("/v1/prototypes?offset={}", total + 5)).await;
    assert_eq!(status, StatusCode::OK);
    assert!(page["items"].as_array().unwrap().is_empty());
}

#[tokio::test(flavor = "multi_thread")]
async fn consistent_bank_lists_no_flagged_prototypes() {
    let dir = tempfile::tempdir().unwrap();
    let wb = generate_bank(&SynthConfig {
        entangled_count: 0,
        ..SynthConfig::with_seed(3)
    })
    .unwrap();
    let app = app(PatchBundle::from_workbench(&wb), &dir.path().join("log.jsonl"), true);
    let (status, list) = get(&app, "/v1/prototypes?limit=1000").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(list["flagged"], 0);
    assert_eq!(list["items"].as_array().unwrap().len(), wb.bank.num_prototypes());
    assert!(list["items"].as_array().unwrap().iter().all(|i| i["rank"].is_null()));
}

#[tokio::test(flavor = "multi_thread")]
async fn patches_match_ranking_and_serve_thumbnails() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(bundle(1), &dir.path().join("log.jsonl"), false);
    let acts = corpus_activations(&app.bundle.corpus, &app.bundle.bank, Execution::Sequential).unwrap();
    for d in [0usize, 5, 40] {
        let (status, body) = get(&app, &format!("/v1/prototypes/{d}/patches?k=7")).await;
        assert_eq!(status, StatusCode::OK);
        let want = top_activated_patches(&app.bundle.corpus, &acts, d, 7, true).unwrap();
        assert_eq!(patch_ids(&body["patches"]), want.patches);
        let shown: Vec<f64> = body["patches"].as_array().unwrap().iter().map(|p| p["activation"].as_f64().unwrap()).collect();
        assert!(shown.windows(2).all(|w| w[0] >= w[1]));
    }
    let (status, _) = get(&app, "/v1/prototypes/9999/patches").await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (_, body) = get(&app, "/v1/prototypes/0/patches").await;
    let url = body["patches"][0]["thumbnail"].as_str().unwrap().to_string();
    let req = Request::builder().uri(&url).body(Body::empty()).unwrap();
    let res = router(app.clone()).oneshot(req).await.unwrap();
    assert_eq!(res.status(), StatusCode::OK);
    assert_eq!(res.headers()["content-type"], "image/x-portable-graymap");
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    assert!(bytes.starts_with(b"P5"));
    let (status, _) = get(&app, "/v1/thumbnails/999999").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

fn ab_labels(served: &[usize], n_a: usize) -> Value {
    let m: BTreeMap<String, &str> = served
        .iter()
        .enumerate()
        .map(|(k, &p)| (p.to_string(), if k < n_a { "a" } else { "b" }))
        .collect();
    json!(m)
}

#[tokio::test(flavor = "multi_thread")]
async fn labels_are_gated_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let app = app(bundle(2), &log, false);
    let e = 3;
    let (_, body) = get(&app, &format!("/v1/prototypes/{e}/patches")).await;
    let served = patch_ids(&body["patches"]);

    let (status, v) = post(&app, &format!("/v1/prototypes/{e}/labels"), json!({"session": "s1", "labels": ab_labels(&served, 9)})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"].as_str().unwrap().contains("concept B below minimum size"), "{v}");

    let outsider = (0..app.bundle.corpus.patches.len()).find(|p| !served.contains(p)).unwrap();
    let (status, _) = post(
        &app,
        &format!("/v1/prototypes/{e}/labels"),
        json!({"session": "s1", "labels": {outsider.to_string(): "a"}}),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (status, v) = post(&app, &format!("/v1/prototypes/{e}/labels"), json!({"session": "s1", "labels": ab_labels(&served, 5)})).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!((v["concept_a"].as_u64(), v["concept_b"].as_u64()), (Some(5), Some(5)));
    assert_eq!(v["submission"], 1);

    // rejected submissions leave no trace; the accepted one replays to the
    // same concept sets
    let records = read_log(&log).unwrap();
    assert_eq!(records.len(), 10);
    let state = replay(&records);
    let labels = &state.sessions["s1"].prototypes[&e].labels;
    let acts = app.activations();
    let from_log = concepts_from_labels(&app.bundle.corpus, acts, &app.bundle.bank, e, labels, 2, true).unwrap();
    let direct: BTreeMap<usize, ConceptLabel> = served
        .iter()
        .enumerate()
        .map(|(k, &p)| (p, if k < 5 { ConceptLabel::A } else { ConceptLabel::B }))
        .collect();
    let expected = concepts_from_labels(&app.bundle.corpus, acts, &app.bundle.bank, e, &direct, 2, true).unwrap();
    assert_eq!(from_log, expected);

    let (status, _) = post(&app, "/v1/prototypes/3/labels", json!({"session": "", "labels": {}})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn auto_split_job_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(bundle(4), &dir.path().join("log.jsonl"), true);
    let truth = app.bundle.truth.clone().unwrap();
    let report = app.detection().unwrap();
    let e = *report.ranking.iter().find(|&&d| truth.is_entangled(d)).unwrap();
    let ent = truth.entangled_prototype(e).unwrap().clone();

    // nothing to assess yet
    let (status, _) = post(&app, &format!("/v1/prototypes/{e}/assessment"), json!({"session": "u", "channel": e, "verdict": "more"})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = post(&app, &format!("/v1/prototypes/{e}/split"), json!({"session": "u"})).await;
    assert_eq!(status, StatusCode::CONFLICT, "label mode needs accepted labels");

    let (status, body) = post(&app, &format!("/v1/prototypes/{e}/split"), json!({"session": "u", "auto": true})).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let job = body["job"].as_u64().unwrap();
    let (status, _) = post(&app, &format!("/v1/prototypes/{e}/split"), json!({"session": "v", "auto": true})).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let done = wait(&app, job).await;
    assert_eq!(done["status"], "done", "{done}");
    assert_eq!(wait(&app, job).await, done, "terminal payload is stable");

    let (status, result) = get(&app, &format!("/v1/prototypes/{e}/split?session=u")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(result["record"]["converged"].as_bool().unwrap());
    let dup = result["record"]["duplicate"].as_u64().unwrap() as usize;
    assert_eq!(dup, app.bundle.bank.num_prototypes());
    let mut clusters = Vec::new();
    for ch in result["channels"].as_array().unwrap() {
        let ids = patch_ids(&ch["patches"]);
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for i in &ids {
            *counts.entry(truth.patch_cluster[*i]).or_default() += 1;
        }
        let (&top, &n) = counts.iter().max_by_key(|(_, &n)| n).unwrap();
        assert!(n * 10 >= ids.len() * 9, "channel {}: {counts:?}", ch["channel"]);
        clusters.push(top);
    }
    clusters.sort();
    let mut planted = vec![ent.cluster_a, ent.cluster_b];
    planted.sort();
    assert_eq!(clusters, planted);

    let (status, _) = get(&app, &format!("/v1/prototypes/{e}/split?session=v")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (_, list) = get(&app, "/v1/prototypes?limit=1000").await;
    let entry = list["items"].as_array().unwrap().iter().find(|i| i["id"] == e).unwrap().clone();
    assert_eq!(entry["split_status"], "done");

    let uri = format!("/v1/prototypes/{e}/assessment");
    let (status, _) = post(&app, &uri, json!({"session": "u", "channel": 1000, "verdict": "more"})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = post(&app, &uri, json!({"session": "u", "channel": e, "verdict": "more"})).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, _) = post(&app, &uri, json!({"session": "u", "channel": dup, "verdict": "less"})).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (_, agg) = get(&app, "/v1/aggregates").await;
    assert_eq!(agg["assessments"], 2);
    assert_eq!(agg["more_consistent"], 1);
    assert_eq!(agg["more_consistent_fraction"], 0.5);
    assert_eq!(agg["splits_started"], 1);
    assert_eq!(agg["splits_finished"], 1);

    let (status, _) = get(&app, "/v1/jobs/424242").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

/// A scripted participant: judges each of the top-ranked prototypes,
/// labels served patches by their true cluster, splits, and calls a result
/// channel more consistent exactly when its pattern purity went up.
#[tokio::test(flavor = "multi_thread")]
async fn simulated_protocol_aggregates_match_purity_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let app = app(bundle(5), &log, true);
    let truth = app.bundle.truth.clone().unwrap();
    let ranking = app.detection().unwrap().ranking.clone();
    let purity = |ids: &[usize]| {
        let parts: Vec<BTreeSet<String>> = ids.iter().map(|&i| truth.patch_parts(i)).collect();
        pattern_purity(&parts).unwrap()
    };

    let (mut judgments, mut labels, mut increased, mut channels) = (0, 0, 0, 0);
    for &e in ranking.iter().take(4) {
        let (_, body) = get(&app, &format!("/v1/prototypes/{e}/patches")).await;
        let served = patch_ids(&body["patches"]);
        let before = purity(&served);
        let Some(ent) = truth.entangled_prototype(e).cloned() else {
            post(&app, &format!("/v1/prototypes/{e}/judgment"), json!({"session": "p1", "inconsistent": false})).await;
            judgments += 1;
            continue;
        };
        let (status, _) = post(&app, &format!("/v1/prototypes/{e}/judgment"), json!({"session": "p1", "inconsistent": true})).await;
        assert_eq!(status, StatusCode::NO_CONTENT);
        judgments += 1;

        let map: BTreeMap<String, &str> = served
            .iter()
            .map(|&p| {
                let c = truth.patch_cluster[p];
                let l = if c == ent.cluster_a { "a" } else if c == ent.cluster_b { "b" } else { "something_else" };
                (p.to_string(), l)
            })
            .collect();
        let (status, v) = post(&app, &format!("/v1/prototypes/{e}/labels"), json!({"session": "p1", "labels": map})).await;
        assert_eq!(status, StatusCode::OK, "{v}");
        labels += served.len();

        let (_, job) = post(&app, &format!("/v1/prototypes/{e}/split"), json!({"session": "p1"})).await;
        let done = wait(&app, job["job"].as_u64().unwrap()).await;
        assert_eq!(done["status"], "done", "{done}");
        let (_, result) = get(&app, &format!("/v1/prototypes/{e}/split?session=p1")).await;
        for ch in result["channels"].as_array().unwrap() {
            let after = purity(&patch_ids(&ch["patches"]));
            let verdict = if after > before { "more" } else { "less" };
            increased += usize::from(after > before);
            channels += 1;
            let (status, _) = post(
                &app,
                &format!("/v1/prototypes/{e}/assessment"),
                json!({"session": "p1", "channel": ch["channel"], "verdict": verdict}),
            )
            .await;
            assert_eq!(status, StatusCode::NO_CONTENT);
        }
    }
    assert!(channels >= 4, "at least two planted prototypes in the top 4");

    let (_, agg) = get(&app, "/v1/aggregates").await;
    assert_eq!(agg["more_consistent_fraction"].as_f64().unwrap(), increased as f64 / channels as f64);
    assert_eq!(agg["decisions"], judgments + labels + channels);
    assert_eq!(agg["patch_labels"], labels);

    // restart on the same log: identical aggregates and session state
    let (_, session_before) = get(&app, "/v1/sessions/p1").await;
    drop(app);
    let restarted = self::app(bundle(5), &log, true);
    let (_, agg_after) = get(&restarted, "/v1/aggregates").await;
    assert_eq!(agg, agg_after);
    let (_, session_after) = get(&restarted, "/v1/sessions/p1").await;
    assert_eq!(session_before, session_after);

    // assessments remain possible after a restart; job ids keep increasing
    let e = ranking[0];
    let (status, _) = post(&restarted, &format!("/v1/prototypes/{e}/assessment"), json!({"session": "p1", "channel": e, "verdict": "more"})).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let max_logged = session_after["prototypes"]
        .as_object()
        .unwrap()
        .values()
        .flat_map(|p| p["splits"].as_array().unwrap().iter().map(|s| s["job"].as_u64().unwrap()))
        .max()
        .unwrap();
    let (_, job) = post(&restarted, "/v1/detect", json!({})).await;
    assert!(job["job"].as_u64().unwrap() > max_logged);
}

#[tokio::test(flavor = "multi_thread")]
async fn at_most_two_jobs_run_at_once() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(bundle(6), &dir.path().join("log.jsonl"), true);
    let ranking = app.detection().unwrap().ranking.clone();
    let mut jobs = Vec::new();
    for &e in ranking.iter().take(4) {
        let (status, body) = post(&app, &format!("/v1/prototypes/{e}/split"), json!({"session": "c", "auto": true})).await;
        assert_eq!(status, StatusCode::ACCEPTED);
        jobs.push(body["job"].as_u64().unwrap());
    }
    loop {
        let statuses: Vec<String> = jobs.iter().map(|&j| app.job(j).unwrap().status).map(|s| format!("{s:?}")).collect();
        let running = statuses.iter().filter(|s| *s == "Running").count();
        assert!(running <= 2, "{statuses:?}");
        if statuses.iter().all(|s| s == "Done" || s == "Failed") {
            assert!(statuses.iter().all(|s| s == "Done"), "{statuses:?}");
            break;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}
