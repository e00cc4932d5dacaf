//! The review service exercised over real HTTP on a loopback port.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use forge_core::manifest::{DatasetManifest, Split};
use forge_core::model::{Format, PreferenceKind, PreferenceSample, Provenance, Task, VideoContext};
use forge_review::{ReviewConfig, ReviewState};
use reqwest::StatusCode;
use serde_json::{json, Value};

fn sample(i: usize, format: Format) -> PreferenceSample {
    let task = if format == Format::OrderList { Task::TemporalOrdering } else { Task::ActionRecognition };
    let anchor = format!("anchor{:03}", i / 4);
    PreferenceSample {
        sample_id: String::new(),
        kind: if i % 3 == 0 { PreferenceKind::TPref } else { PreferenceKind::VPref },
        task,
        format,
        question: format!("What happens in clip {i}?"),
        chosen_context: VideoContext::single(&anchor, (i % 4) as u32),
        rejected_context: (i % 3 != 0).then(|| VideoContext::single(&anchor, ((i + 1) % 4) as u32)),
        chosen_answer: format!("action {i}"),
        rejected_answer: (i % 3 == 0).then(|| format!("other action {i}")),
        provenance: Provenance {
            anchor_id: anchor.clone(),
            action_ids: vec![(i % 4) as u32, ((i + 1) % 4) as u32],
            permutation: None,
            option_order: None,
        },
    }
    .with_computed_id()
}

/// Writes a manifest with `counts[f]` samples per format, all in `split`.
fn write_manifest(dir: &Path, counts: &[(Format, usize)], split: Split) -> (PathBuf, Vec<PreferenceSample>) {
    let mut m = DatasetManifest::new();
    let mut i = 0;
    for &(f, n) in counts {
        for _ in 0..n {
            m.push(sample(i, f), split).unwrap();
            i += 1;
        }
    }
    let path = dir.join("holdout.jsonl");
    m.write(&path).unwrap();
    (path, m.samples().to_vec())
}

struct Server {
    base: String,
    client: reqwest::Client,
    handle: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl Server {
    async fn start(cfg: ReviewConfig) -> Server {
        let state: Arc<ReviewState> = ReviewState::open(cfg).unwrap();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let handle = tokio::spawn(forge_review::serve(state, listener));
        Server { base, client: reqwest::Client::new(), handle }
    }

    async fn stop(self) {
        self.handle.abort();
        let _ = self.handle.await;
    }

    async fn label(&self, id: &str, evaluator: &str, label: &str) -> (StatusCode, Value) {
        let r = self
            .client
            .post(format!("{}/samples/{id}/label", self.base))
            .json(&json!({ "evaluator": evaluator, "label": label }))
            .send()
            .await
            .unwrap();
        let status = r.status();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        let status = r.status();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    async fn post(&self, path: &str) -> (StatusCode, Value) {
        let r = self.client.post(format!("{}{path}", self.base)).send().await.unwrap();
        let status = r.status();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    async fn stats(&self) -> Value {
        let (s, v) = self.get("/stats").await;
        assert_eq!(s, StatusCode::OK);
        v
    }
}

fn format_row<'a>(stats: &'a Value, f: Format) -> &'a Value {
    stats["formats"].as_array().unwrap().iter().find(|r| r["format"] == f.as_str()).unwrap()
}

/// Tenths of a percent, rounded half up, in integer arithmetic.
fn oracle_tenths(count: usize, total: usize) -> usize {
    (2000 * count + total) / (2 * total)
}

const LABELS: [&str; 4] = ["good", "wrong", "ambiguous", "bad_quality"];

/// Reference per-format label percentages with their format sizes.
const REFERENCE_ROWS: [(Format, usize, [f64; 4]); 4] = [
    (Format::FreeForm, 88, [64.8, 12.5, 17.0, 5.7]),
    (Format::BinaryChoice, 84, [69.0, 15.5, 8.3, 7.1]),
    (Format::MultipleChoice, 37, [78.4, 8.1, 5.4, 8.1]),
    (Format::OrderList, 35, [62.9, 11.4, 17.1, 8.6]),
];

/// Integer counts per label that reproduce a printed row.
fn reconcile(n: usize, pct: [f64; 4]) -> [usize; 4] {
    let counts = pct.map(|p| (p * n as f64 / 100.0).round() as usize);
    assert_eq!(counts.iter().sum::<usize>(), n, "counts for {pct:?} do not cover {n} samples");
    for (c, p) in counts.iter().zip(pct) {
        assert_eq!(oracle_tenths(*c, n), (p * 10.0).round() as usize);
    }
    counts
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn four_evaluators_reproduce_reference_rows() {
    let dir = tempfile::tempdir().unwrap();
    let sizes: Vec<(Format, usize)> = REFERENCE_ROWS.iter().map(|(f, n, _)| (*f, *n)).collect();
    let (manifest, samples) = write_manifest(dir.path(), &sizes, Split::Holdout);
    let srv = Server::start(ReviewConfig::new(&manifest, dir.path().join("labels.log"))).await;

    let (s, mc) = srv.get("/samples?split=holdout&format=multiple_choice&page_size=500").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(mc["total"], 37);

    // Three evaluators agree on the target label and a fourth dissents, so the
    // consensus is the target.
    for (f, n, pct) in REFERENCE_ROWS {
        let counts = reconcile(n, pct);
        let ids: Vec<&str> = samples.iter().filter(|s| s.format == f).map(|s| s.sample_id.as_str()).collect();
        let mut k = 0;
        for (li, c) in counts.iter().enumerate() {
            for _ in 0..*c {
                let id = ids[k];
                k += 1;
                for ev in ["ann", "ben", "cho"] {
                    assert_eq!(srv.label(id, ev, LABELS[li]).await.0, StatusCode::OK);
                }
                assert_eq!(srv.label(id, "dee", LABELS[(li + 1) % 4]).await.0, StatusCode::OK);
            }
        }
    }

    let stats = srv.stats().await;
    let mut good = 0;
    let mut bad = 0;
    for (f, n, pct) in REFERENCE_ROWS {
        let row = format_row(&stats, f);
        assert_eq!(row["labeled"], n);
        let counts = reconcile(n, pct);
        for (li, name) in LABELS.iter().enumerate() {
            assert_eq!(row["counts"][name], counts[li], "{f:?} {name}");
            assert_eq!(row["percent"][name].as_f64().unwrap(), pct[li], "{f:?} {name}");
        }
        good += counts[0];
        bad += counts[3];
    }
    assert_eq!(stats["labeled_samples"], 244);
    assert_eq!(stats["records"], 244 * 4);
    assert_eq!(stats["evaluators"], json!(["ann", "ben", "cho", "dee"]));
    assert_eq!(oracle_tenths(good, 244), 680);
    assert_eq!((oracle_tenths(bad, 244) + 5) / 10, 7);
    srv.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn majority_and_tie_consensus() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, samples) = write_manifest(dir.path(), &[(Format::FreeForm, 2)], Split::Holdout);
    let srv = Server::start(ReviewConfig::new(&manifest, dir.path().join("labels.log"))).await;
    let (a, b) = (&samples[0].sample_id, &samples[1].sample_id);
    for (ev, l) in [("e1", "good"), ("e2", "good"), ("e3", "wrong"), ("e4", "ambiguous")] {
        srv.label(a, ev, l).await;
    }
    for (ev, l) in [("e1", "good"), ("e2", "good"), ("e3", "wrong"), ("e4", "wrong")] {
        srv.label(b, ev, l).await;
    }
    let stats = srv.stats().await;
    assert_eq!(stats["consensus"][a], "good");
    assert_eq!(stats["consensus"][b], "ambiguous");
    let row = format_row(&stats, Format::FreeForm);
    assert_eq!(row["counts"], json!({"good": 1, "wrong": 0, "ambiguous": 1, "bad_quality": 0}));
    assert_eq!(row["percent"]["good"], 50.0);
    srv.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn label_validation_and_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, samples) = write_manifest(dir.path(), &[(Format::BinaryChoice, 3)], Split::Holdout);
    let srv = Server::start(ReviewConfig::new(&manifest, dir.path().join("labels.log"))).await;
    let id = &samples[0].sample_id;

    let (s, rec) = srv.label(id, "alice", "good").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(
        (rec["sample_id"].as_str(), rec["evaluator"].as_str(), rec["label"].as_str()),
        (Some(id.as_str()), Some("alice"), Some("good"))
    );
    assert!(rec["noted_at"].is_string());

    assert_eq!(srv.label(id, "alice", "excellent").await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(srv.label(id, "  ", "good").await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(srv.label("no-such-sample", "alice", "good").await.0, StatusCode::NOT_FOUND);
    let missing = srv
        .client
        .post(format!("{}/samples/{id}/label", srv.base))
        .json(&json!({"evaluator": "alice"}))
        .send()
        .await
        .unwrap();
    assert_eq!(missing.status(), StatusCode::UNPROCESSABLE_ENTITY);

    assert_eq!(srv.label(id, "alice", "wrong").await.0, StatusCode::OK);
    let stats = srv.stats().await;
    assert_eq!(stats["records"], 1);
    assert_eq!(stats["consensus"][id], "wrong");
    let row = format_row(&stats, Format::BinaryChoice);
    assert_eq!((row["labeled"].as_u64(), row["counts"]["wrong"].as_u64()), (Some(1), Some(1)));
    srv.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn labels_survive_restart_including_concurrent_posts() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, samples) = write_manifest(dir.path(), &[(Format::OrderList, 20)], Split::Holdout);
    let cfg = ReviewConfig::new(&manifest, dir.path().join("state/labels.log"));
    let srv = Server::start(cfg.clone()).await;
    let mut posts = tokio::task::JoinSet::new();
    for s in &samples {
        for ev in ["p", "q", "r"] {
            let (client, url, id) =
                (srv.client.clone(), format!("{}/samples/{}/label", srv.base, s.sample_id), s.sample_id.clone());
            posts.spawn(async move {
                let r = client
                    .post(url)
                    .json(&json!({"evaluator": ev, "label": "bad_quality", "comment": id}))
                    .send()
                    .await
                    .unwrap();
                r.status()
            });
        }
    }
    while let Some(status) = posts.join_next().await {
        assert_eq!(status.unwrap(), StatusCode::OK);
    }
    let before = srv.stats().await;
    let (_, first_page) = srv.get("/samples?page_size=500").await;
    srv.stop().await;

    let srv = Server::start(cfg).await;
    let after = srv.stats().await;
    assert_eq!(before, after);
    assert_eq!(after["records"], 60);
    assert_eq!(format_row(&after, Format::OrderList)["counts"]["bad_quality"], 20);
    let (_, again) = srv.get("/samples?page_size=500").await;
    assert_eq!(first_page, again, "ordering and labelled-by sets are stable across restarts");
    srv.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn listing_filters_and_pages() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, samples) =
        write_manifest(dir.path(), &[(Format::FreeForm, 6), (Format::MultipleChoice, 5)], Split::Holdout);
    let srv = Server::start(ReviewConfig::new(&manifest, dir.path().join("labels.log"))).await;

    let (s, all) = srv.get("/samples?split=holdout&page_size=500").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(all["total"], 11);
    let order: Vec<String> =
        all["samples"].as_array().unwrap().iter().map(|v| v["sample_id"].as_str().unwrap().to_string()).collect();

    // Pages tile the same stable order.
    let mut paged = Vec::new();
    for page in 1..=3 {
        let (_, p) = srv.get(&format!("/samples?page={page}&page_size=4")).await;
        paged.extend(p["samples"].as_array().unwrap().iter().map(|v| v["sample_id"].as_str().unwrap().to_string()));
    }
    assert_eq!(paged, order);

    let first = &all["samples"][0];
    let src = samples.iter().find(|s| s.sample_id == first["sample_id"]).unwrap();
    assert_eq!(first["question"], src.question);
    assert_eq!(first["chosen"]["answer"], src.chosen_answer);
    let c = &src.chosen_context.clip_sequence[0];
    assert_eq!(first["chosen"]["media"], json!([format!("/media/{}/{}/clip.mp4", c.anchor_id, c.action_id)]));

    let mc_ids: Vec<&str> =
        samples.iter().filter(|s| s.format == Format::MultipleChoice).map(|s| s.sample_id.as_str()).collect();
    srv.label(mc_ids[0], "alice", "good").await;
    srv.label(mc_ids[1], "bob", "good").await;
    let (_, mine) = srv.get("/samples?format=multiple_choice&unlabeled_by=alice").await;
    assert_eq!(mine["total"], 4);
    assert!(mine["samples"].as_array().unwrap().iter().all(|v| v["sample_id"] != mc_ids[0]));
    let (_, mc) = srv.get("/samples?format=MC").await;
    assert_eq!(mc["total"], 5);

    assert_eq!(srv.get("/samples?format=essay").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(srv.get("/samples?split=validation").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(srv.get("/samples?page=0").await.0, StatusCode::BAD_REQUEST);
    let (_, train) = srv.get("/samples?split=train").await;
    assert_eq!(train["total"], 0);
    srv.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn empty_holdout_gives_an_empty_page() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = write_manifest(dir.path(), &[(Format::FreeForm, 3)], Split::Train);
    let srv = Server::start(ReviewConfig::new(&manifest, dir.path().join("labels.log"))).await;
    let (s, page) = srv.get("/samples?split=holdout").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(page["total"], 0);
    assert_eq!(page["samples"], json!([]));
    srv.stop().await;

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    std::fs::write(empty.join("holdout.jsonl"), "").unwrap();
    let srv = Server::start(ReviewConfig::new(empty.join("holdout.jsonl"), empty.join("labels.log"))).await;
    let (s, page) = srv.get("/samples").await;
    assert_eq!((s, page["total"].as_u64()), (StatusCode::OK, Some(0)));
    let stats = srv.stats().await;
    assert!(stats["formats"].as_array().unwrap().iter().all(|r| r["percent"].is_null()));
    srv.stop().await;
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn export_filters_by_consensus_and_leaves_the_source_alone() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    let (manifest, samples) =
        write_manifest(&data, &[(Format::FreeForm, 6), (Format::BinaryChoice, 4)], Split::Holdout);
    let source_before = read_tree(&data);
    let srv = Server::start(ReviewConfig::new(&manifest, dir.path().join("review/labels.log"))).await;

    let (s, _) = srv.post("/export?keep=good").await;
    assert_eq!(s, StatusCode::CONFLICT);

    // 7 good, 2 ambiguous, 1 wrong.
    for (i, smp) in samples.iter().enumerate() {
        let l = match i {
            0..=6 => "good",
            7 | 8 => "ambiguous",
            _ => "wrong",
        };
        srv.label(&smp.sample_id, "alice", l).await;
    }
    assert_eq!(srv.post("/export?keep=great").await.0, StatusCode::BAD_REQUEST);

    let (s, good) = srv.post("/export?keep=good").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(
        (good["exported"].as_u64(), good["labeled"].as_u64(), good["source_total"].as_u64()),
        (Some(7), Some(10), Some(10))
    );
    let good_path = PathBuf::from(good["path"].as_str().unwrap());
    let good_bytes = std::fs::read(&good_path).unwrap();

    // Exported lines are verbatim source lines in source order.
    let src_text = String::from_utf8(source_before["holdout.jsonl"].clone()).unwrap();
    let src_lines: Vec<&str> = src_text.lines().collect();
    let out_text = String::from_utf8(good_bytes.clone()).unwrap();
    let out_lines: Vec<&str> = out_text.lines().collect();
    assert_eq!(out_lines, src_lines[..7].to_vec());
    let reloaded = DatasetManifest::load(&good_path).unwrap();
    assert_eq!(reloaded.len(), 7);
    assert!(reloaded.samples().iter().all(|s| reloaded.split_of(&s.sample_id) == Some(Split::Holdout)));

    let (_, union) = srv.post("/export?keep=ambiguous,good").await;
    assert_eq!(union["exported"], 9);
    assert_eq!(union["keep"], json!(["good", "ambiguous"]));

    let (_, again) = srv.post("/export?keep=good").await;
    assert_eq!(again, good);
    assert_eq!(std::fs::read(&good_path).unwrap(), good_bytes);
    assert_eq!(read_tree(&data), source_before);
    srv.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn media_supports_ranges_and_cors() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, samples) = write_manifest(dir.path(), &[(Format::FreeForm, 1)], Split::Holdout);
    let c = &samples[0].chosen_context.clip_sequence[0];
    let clip_dir = dir.path().join(&c.anchor_id).join(c.action_id.to_string());
    std::fs::create_dir_all(&clip_dir).unwrap();
    std::fs::write(clip_dir.join("clip.mp4"), b"0123456789").unwrap();
    let srv = Server::start(ReviewConfig::new(&manifest, dir.path().join("labels.log"))).await;

    let url = format!("{}/media/{}/{}/clip.mp4", srv.base, c.anchor_id, c.action_id);
    let r = srv.client.get(&url).header("Range", "bytes=2-5").send().await.unwrap();
    assert_eq!(r.status(), StatusCode::PARTIAL_CONTENT);
    assert_eq!(r.bytes().await.unwrap().as_ref(), b"2345");

    let r =
        srv.client.get(format!("{}/stats", srv.base)).header("Origin", "http://localhost:5173").send().await.unwrap();
    assert!(r.headers().contains_key("access-control-allow-origin"));
    assert_eq!(srv.get("/media/none/0/clip.mp4").await.0, StatusCode::NOT_FOUND);
    srv.stop().await;
}
