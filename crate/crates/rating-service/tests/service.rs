use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use reqwest::StatusCode;
use serde_json::Value;
use sgctx_core::dataset::{generate_shapes_world, ShapesWorldConfig};
use sgctx_core::image::RgbImage;
use sgctx_core::metrics::{aggregate_study, read_ratings, Answer, CategoryMap, Design, DEFAULT_MIN_CONTROL_ACCURACY};
use sgctx_core::study::{export_study, ExportItem, ExportOptions, StudyManifest};
use sgctx_rating_service::{Service, ServiceConfig, Submission};
use tokio::sync::oneshot;

fn study(dir: &Path, design: Design, trials: usize, id: &str) -> StudyManifest {
    let split = generate_shapes_world(&ShapesWorldConfig { seed: 4, scenes: 40, image_size: 16, ..Default::default() }).unwrap();
    let items: Vec<ExportItem> = split
        .examples
        .iter()
        .enumerate()
        .map(|(i, e)| ExportItem {
            name: format!("scene{i:03}"),
            graph: e.graph.clone(),
            ground_truth: e.image.clone().unwrap(),
            generated: [("ours", 0.2), ("baseline", 0.7)].iter().map(|(m, v)| (m.to_string(), RgbImage::filled(16, 16, [*v, i as f64 / 40.0, 0.5]))).collect(),
        })
        .collect();
    let opts = ExportOptions { study_id: id.into(), design, trials, control_rate: 0.1, seed: 21, target_ratings: 5 };
    let s = export_study(&items, &split.vocab, &opts).unwrap();
    let media = dir.join("media");
    fs::create_dir_all(&media).unwrap();
    for (name, bytes) in &s.media {
        fs::write(media.join(name), bytes).unwrap();
    }
    s.manifest
}

struct Server {
    base: String,
    stop: Option<oneshot::Sender<()>>,
    handle: tokio::task::JoinHandle<()>,
    client: reqwest::Client,
}

impl Server {
    async fn start(data: &Path) -> Self {
        let svc = Service::open(ServiceConfig::new(data)).unwrap();
        Self::with(svc).await
    }

    async fn with(svc: Arc<Service>) -> Self {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = oneshot::channel();
        let handle = tokio::spawn(async move {
            sgctx_rating_service::serve(listener, svc, async {
                let _ = rx.await;
            })
            .await
            .unwrap();
        });
        Self { base, stop: Some(tx), handle, client: reqwest::Client::new() }
    }

    async fn stop(mut self) {
        self.stop.take().unwrap().send(()).unwrap();
        self.handle.await.unwrap();
    }

    async fn create(&self, m: &StudyManifest) -> (StatusCode, Value) {
        let r = self.client.post(format!("{}/studies", self.base)).body(m.to_json()).send().await.unwrap();
        (r.status(), r.json().await.unwrap())
    }

    async fn next(&self, id: &str, worker: &str) -> (StatusCode, Value) {
        let r = self.client.get(format!("{}/studies/{id}/next?worker={worker}", self.base)).send().await.unwrap();
        (r.status(), r.json().await.unwrap())
    }

    async fn rate(&self, id: &str, worker: &str, trial: &str, answer: Answer) -> StatusCode {
        let s = Submission { worker_id: worker.into(), trial_id: trial.into(), answer };
        let r = self.client.post(format!("{}/studies/{id}/ratings", self.base)).json(&s).send().await.unwrap();
        r.status()
    }

    async fn results(&self, id: &str) -> (StatusCode, String) {
        let r = self.client.get(format!("{}/studies/{id}/results", self.base)).send().await.unwrap();
        (r.status(), r.text().await.unwrap())
    }
}

/// Deterministic simulated rater; `noisy` workers fail controls.
fn answer(m: &StudyManifest, trial_id: &str, worker: usize, noisy: bool) -> Answer {
    let t = &m.trials[m.trial_index(trial_id).unwrap()];
    if let Some(truth) = t.control_truth {
        if !noisy {
            return truth;
        }
        return match truth {
            Answer::Yes => Answer::No,
            Answer::No => Answer::Yes,
            Answer::A => Answer::B,
            Answer::B => Answer::A,
        };
    }
    let k = trial_id.bytes().map(|b| b as usize).sum::<usize>() + worker;
    match (m.design, k % 3) {
        (Design::Mors, 0) => Answer::No,
        (Design::Mors, _) => Answer::Yes,
        (_, 0) => Answer::B,
        _ => Answer::A,
    }
}

async fn full_pass(server: &Server, m: &StudyManifest, workers: &[(&str, bool)]) -> usize {
    let mut rated = 0;
    let mut active = true;
    while active {
        active = false;
        for (k, (w, noisy)) in workers.iter().enumerate() {
            let (status, body) = server.next(&m.study_id, w).await;
            assert_eq!(status, StatusCode::OK);
            if body["done"] == true {
                continue;
            }
            let trial = body["trial"]["trial_id"].as_str().unwrap().to_string();
            assert_eq!(server.rate(&m.study_id, w, &trial, answer(m, &trial, k, *noisy)).await, StatusCode::CREATED);
            rated += 1;
            active = true;
        }
    }
    rated
}

fn offline(data: &Path, m: &StudyManifest) -> String {
    let recs = read_ratings(fs::File::open(data.join("studies").join(&m.study_id).join("ratings.csv")).unwrap()).unwrap();
    aggregate_study(&recs, DEFAULT_MIN_CONTROL_ACCURACY, &CategoryMap::default(), m.model_pair()).unwrap().to_json()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn five_worker_simulation_matches_offline_aggregation() {
    for design in [Design::Mors, Design::AvB, Design::Abx] {
        let dir = tempfile::tempdir().unwrap();
        let m = study(dir.path(), design, 30, "sim");
        let server = Server::start(dir.path()).await;
        assert_eq!(server.create(&m).await.0, StatusCode::CREATED);
        assert_eq!(server.create(&m).await.0, StatusCode::OK);
        let workers = [("w1", false), ("w2", false), ("w3", false), ("w4", false), ("w5", false)];
        assert_eq!(full_pass(&server, &m, &workers).await, 150);

        let recs = read_ratings(fs::File::open(dir.path().join("studies/sim/ratings.csv")).unwrap()).unwrap();
        let mut per_trial: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &recs {
            *per_trial.entry(&r.trial_id).or_default() += 1;
        }
        assert_eq!(per_trial.len(), 30);
        assert!(per_trial.values().all(|&c| c == 5));

        let (status, body) = server.results("sim").await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body, offline(dir.path(), &m));
        let v: Value = serde_json::from_str(&body).unwrap();
        assert_eq!(v["excluded_workers"].as_array().unwrap().len(), 0);
        server.stop().await;
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn double_submission_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = study(dir.path(), Design::Mors, 10, "dup");
    let server = Server::start(dir.path()).await;
    server.create(&m).await;
    let (_, body) = server.next("dup", "w1").await;
    let trial = body["trial"]["trial_id"].as_str().unwrap().to_string();
    let (a, b) = tokio::join!(server.rate("dup", "w1", &trial, Answer::Yes), server.rate("dup", "w1", &trial, Answer::Yes));
    let mut got = [a, b];
    got.sort();
    assert_eq!(got, [StatusCode::CREATED, StatusCode::CONFLICT]);
    assert_eq!(server.rate("dup", "w1", &trial, Answer::No).await, StatusCode::CONFLICT);
    let recs = read_ratings(fs::File::open(dir.path().join("studies/dup/ratings.csv")).unwrap()).unwrap();
    assert_eq!(recs.len(), 1);
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let m = study(dir.path(), Design::Mors, 10, "err");
    let server = Server::start(dir.path()).await;
    assert_eq!(server.results("err").await.0, StatusCode::NOT_FOUND);
    assert_eq!(server.next("nope", "w1").await.0, StatusCode::NOT_FOUND);

    let mut dup = m.clone();
    dup.trials[1].trial_id = dup.trials[0].trial_id.clone();
    assert_eq!(server.create(&dup).await.0, StatusCode::BAD_REQUEST);
    let mut missing = m.clone();
    missing.trials[0].media[0] = "0000.ppm".into();
    let (status, body) = server.create(&missing).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"].as_str().unwrap().contains("0000.ppm"));

    assert_eq!(server.create(&m).await.0, StatusCode::CREATED);
    let mut changed = m.clone();
    changed.seed += 1;
    assert_eq!(server.create(&changed).await.0, StatusCode::CONFLICT);
    assert_eq!(server.results("err").await.0, StatusCode::NOT_FOUND);
    assert_eq!(server.rate("err", "w1", &m.trials[0].trial_id, Answer::Yes).await, StatusCode::BAD_REQUEST);
    assert_eq!(server.rate("err", "w1", "t9999", Answer::Yes).await, StatusCode::NOT_FOUND);
    let (_, body) = server.next("err", "w1").await;
    let trial = body["trial"]["trial_id"].as_str().unwrap().to_string();
    assert_eq!(server.rate("err", "w1", &trial, Answer::A).await, StatusCode::BAD_REQUEST);
    assert_eq!(server.next("err", "w%20x").await.0, StatusCode::BAD_REQUEST);

    let media = body["trial"]["media"][0].as_str().unwrap();
    let r = server.client.get(format!("{}{media}", server.base)).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    assert_eq!(r.headers()["content-type"], "image/x-portable-pixmap");
    assert!(r.bytes().await.unwrap().starts_with(b"P6"));
    let r = server.client.get(format!("{}/media/..%2Fsecret", server.base)).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn restart_keeps_every_acknowledged_rating() {
    let dir = tempfile::tempdir().unwrap();
    let m = study(dir.path(), Design::Mors, 20, "crash");
    let server = Server::start(dir.path()).await;
    server.create(&m).await;
    let mut answered = Vec::new();
    for _ in 0..4 {
        let (_, body) = server.next("crash", "w1").await;
        let trial = body["trial"]["trial_id"].as_str().unwrap().to_string();
        assert_eq!(server.rate("crash", "w1", &trial, Answer::Yes).await, StatusCode::CREATED);
        answered.push(trial);
    }
    let (_, pending) = server.next("crash", "w1").await;
    let before = server.results("crash").await.1;
    server.handle.abort();
    let _ = server.handle.await;
    // A write torn by the crash, never acknowledged.
    let log = dir.path().join("studies/crash/ratings.csv");
    let mut bytes = fs::read(&log).unwrap();
    bytes.extend_from_slice(b"w9,t00");
    fs::write(&log, bytes).unwrap();

    let server = Server::start(dir.path()).await;
    assert_eq!(server.results("crash").await.1, before);
    for t in &answered {
        assert_eq!(server.rate("crash", "w1", t, Answer::No).await, StatusCode::CONFLICT);
    }
    let (_, again) = server.next("crash", "w1").await;
    assert_eq!(again["trial"]["trial_id"], pending["trial"]["trial_id"]);
    let t = again["trial"]["trial_id"].as_str().unwrap();
    assert_eq!(server.rate("crash", "w1", t, Answer::Yes).await, StatusCode::CREATED);
    let recs = read_ratings(fs::File::open(&log).unwrap()).unwrap();
    assert_eq!(recs.len(), 5);
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn noisy_worker_is_excluded() {
    let dir = tempfile::tempdir().unwrap();
    let m = study(dir.path(), Design::Mors, 30, "noisy");
    let server = Server::start(dir.path()).await;
    server.create(&m).await;
    let workers = [("w1", false), ("w2", false), ("w3", false), ("w4", false), ("bad", true)];
    full_pass(&server, &m, &workers).await;
    let (_, body) = server.results("noisy").await;
    let v: Value = serde_json::from_str(&body).unwrap();
    let ex = v["excluded_workers"].as_array().unwrap();
    assert_eq!(ex.len(), 1);
    assert_eq!(ex[0]["worker_id"], "bad");
    assert_eq!(ex[0]["controls_correct"], 0);
    assert_eq!(body, offline(dir.path(), &m));
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn payloads_are_blinded() {
    let dir = tempfile::tempdir().unwrap();
    let m = study(dir.path(), Design::AvB, 20, "blind");
    let server = Server::start(dir.path()).await;
    server.create(&m).await;
    for _ in 0..20 {
        let r = server.client.get(format!("{}/studies/blind/next?worker=w1", server.base)).send().await.unwrap();
        let text = r.text().await.unwrap();
        for word in ["ours", "baseline", "ground_truth", "scrambled", "is_control", "side_a", "scene0"] {
            assert!(!text.contains(word), "{word} leaked in {text}");
        }
        let v: Value = serde_json::from_str(&text).unwrap();
        if v["done"] == true {
            break;
        }
        let t = v["trial"]["trial_id"].as_str().unwrap();
        server.rate("blind", "w1", t, Answer::A).await;
    }
    server.stop().await;
}
