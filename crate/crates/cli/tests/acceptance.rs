//! Acceptance suite: one pass/fail line per criterion, each at its stated
//! tolerance. Runs without the libtest harness so the lines always print.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;
use std::time::Instant;

use forge_core::evalharness::{aggregate, average_of_cells, REPORT_CELLS};
use forge_core::manifest::{read_samples, DatasetManifest, Split, StatsTable};
use forge_core::mixdpo::synthetic::{preference_set, visual_gap};
use forge_core::mixdpo::{
    dpo_loss, grad_mixdpo, mixdpo_loss, tpref_loss, train_toy, vpref_loss, LossConfig, PreferenceBatch, TextPreference,
    ToyPolicy, TrainOptions, TrainOutcome, VisualPreference,
};
use forge_core::model::{EditVerdict, Format, PreferenceKind, PreferenceSample, Provenance, Task, VideoContext};
use forge_core::pairing::{all_cells, build_sequence, ClipEntry, ClipSet};
use forge_pipeline::editloop::{run_edit_job, EditConfig, EditJob, JobOutcome, JobState};
use forge_pipeline::generate::{generate, AnchorInput, GenerateConfig};
use forge_pipeline::keyframe::{select_keyframe, SamplingPlan, SyntheticFrameSource, VideoFrames};
use forge_pipeline::providers::mock::{MockEmbedder, MockOptions, MockSuite};
use forge_pipeline::providers::{Crop, ProviderKind};
use forge_review::{ReviewConfig, ReviewState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rt() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build().unwrap()
}

const LN2: f64 = std::f64::consts::LN_2;

// ---------------------------------------------------------------- losses

fn random_batch(rng: &mut ChaCha8Rng, nc: usize, nr: usize, n: usize) -> PreferenceBatch {
    let mut b = PreferenceBatch::default();
    for _ in 0..n {
        let c = rng.random_range(0..nc);
        let chosen = rng.random_range(0..nr);
        let rejected = (chosen + rng.random_range(1..nr)) % nr;
        b.t_items.push(TextPreference { context: c, chosen, rejected });
        let c2 = (c + rng.random_range(1..nc)) % nc;
        b.v_items.push(VisualPreference { chosen_context: c, rejected_context: c2, answer: chosen });
    }
    b
}

fn loss_fixed_points() -> Check {
    let zero: f64 = dpo_loss(&[0.25, -3.0, 7.5], &[0.25, -3.0, 7.5], 0.7).map_err(|e| e.to_string())?;
    ensure!((zero - LN2).abs() <= 1e-12, "zero-margin loss {zero}");
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = ToyPolicy::<f64>::random(6, 5, 2.0, &mut rng);
        let batch = random_batch(&mut rng, 6, 5, 12);
        let t = tpref_loss(&batch.t_items, &theta, &theta, 0.7).unwrap();
        let v = vpref_loss(&batch.v_items, &theta, &theta, 0.7).unwrap();
        worst = worst.max((t - LN2).abs()).max((v - LN2).abs());
    }
    ensure!(worst <= 1e-12, "theta = ref deviates from ln 2 by {worst:e}");
    Ok(format!("max |loss - ln 2| = {worst:.1e} over 20 seeded batches"))
}

/// ln(1 + e^-x) from the alternating series of ln(1 + y), y = e^-x < 1,
/// summed until terms drop below 1e-20.
fn series_softplus_neg(x: f64) -> f64 {
    let y = (-x).exp();
    let (mut sum, mut pow, mut k) = (0.0f64, y, 1.0f64);
    while pow / k > 1e-20 {
        sum += if k as u64 % 2 == 1 { pow / k } else { -pow / k };
        pow *= y;
        k += 1.0;
    }
    sum
}

fn softplus_values() -> Check {
    let l: f64 = dpo_loss(&[1.0], &[0.0], 0.7).unwrap();
    let oracle = series_softplus_neg(0.7);
    ensure!((l - 0.403186).abs() <= 1e-6, "loss {l} vs reference 0.403186");
    ensure!((l - oracle).abs() <= 1e-12, "loss {l} vs series oracle {oracle}");
    let big: f64 = dpo_loss(&[1e4], &[0.0], 1.0).unwrap();
    let neg: f64 = dpo_loss(&[-1e4], &[0.0], 1.0).unwrap();
    ensure!(big.is_finite() && neg.is_finite(), "non-finite at |margin| = 1e4: {big} {neg}");
    ensure!((neg - 1e4).abs() <= 1e-9 && (0.0..1e-300).contains(&big), "large-margin values {big} {neg}");
    Ok(format!("loss(1.0) = {l:.9}, oracle {oracle:.9}; margin ±1e4 -> {big:e}, {neg}"))
}

fn gradient_check() -> Check {
    const H: f64 = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in 0..120u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (nc, nr) = (rng.random_range(2..6), rng.random_range(2..6));
        let reference = ToyPolicy::<f64>::random(nc, nr, 1.0, &mut rng);
        let theta = ToyPolicy::<f64>::random(nc, nr, 1.0, &mut rng);
        let n = rng.random_range(1..8);
        let batch = random_batch(&mut rng, nc, nr, n);
        let cfg = LossConfig::new(rng.random_range(0.1..2.0), rng.random_range(0.0..2.0)).unwrap();
        let g = grad_mixdpo(&batch, &theta, &reference, &cfg).unwrap();
        for i in 0..theta.logits().len() {
            let (mut p, mut m) = (theta.clone(), theta.clone());
            p.logits_mut()[i] += H;
            m.logits_mut()[i] -= H;
            let fd = (mixdpo_loss(&batch, &p, &reference, &cfg).unwrap().total
                - mixdpo_loss(&batch, &m, &reference, &cfg).unwrap().total)
                / (2.0 * H);
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    ensure!(worst < 1e-4, "max relative error {worst:e}");
    Ok(format!("max relative error {worst:.2e} over 120 configurations"))
}

fn train(batch: &PreferenceBatch, reference: &ToyPolicy<f64>, lambda: f64) -> TrainOutcome<f64> {
    let opts =
        TrainOptions { steps: 200, lr: 0.1, config: LossConfig::new(0.7, lambda).unwrap(), seed: 7, minibatch: None };
    train_toy(batch, reference, &opts).unwrap()
}

fn toy_training() -> Check {
    let set = preference_set::<f64>(10, 7);
    let out = train(&set.train, &set.reference, 1.0);
    let (first, last) = (out.trace.first(), out.trace.last());
    ensure!(last.total < first.total, "loss {} -> {}", first.total, last.total);
    ensure!(last.mean_margin > 0.0, "final mean margin {}", last.mean_margin);
    let before = visual_gap(&set.holdout.v_items, &set.reference).unwrap();
    let v_only = train(&set.train.visual_only(), &set.reference, 1.0);
    let after = visual_gap(&set.holdout.v_items, &v_only.policy).unwrap();
    ensure!(after > before, "held-out visual gap {before} -> {after}");
    Ok(format!(
        "loss {:.4} -> {:.4}, margin {:.4}; v-pref-only held-out gap {before:.4} -> {after:.4}",
        first.total, last.total, last.mean_margin
    ))
}

fn lambda_composition() -> Check {
    let set = preference_set::<f64>(10, 3);
    let mixed = train(&set.train, &set.reference, 0.0);
    let text = train(&set.train.text_only(), &set.reference, 1.0);
    ensure!(mixed.policy == text.policy, "lambda = 0 policy differs from text-only policy");
    let bits_equal =
        mixed.trace.rows.iter().zip(&text.trace.rows).all(|(a, b)| a.t_loss.to_bits() == b.t_loss.to_bits());
    ensure!(bits_equal, "lambda = 0 trace differs from text-only trace");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let theta = ToyPolicy::<f64>::random(5, 4, 1.5, &mut rng);
        let reference = ToyPolicy::<f64>::random(5, 4, 1.5, &mut rng);
        let batch = random_batch(&mut rng, 5, 4, 6);
        let lambda = rng.random_range(0.0..3.0);
        let l = mixdpo_loss(&batch, &theta, &reference, &LossConfig::new(0.7, lambda).unwrap()).unwrap();
        let t = tpref_loss(&batch.t_items, &theta, &reference, 0.7).unwrap();
        let v = vpref_loss(&batch.v_items, &theta, &reference, 0.7).unwrap();
        ensure!(
            l.t_loss == t && l.v_loss == v && l.total == t + lambda * v,
            "total != t + lambda v at lambda {lambda}"
        );
    }
    Ok("lambda = 0 bit-identical to text-only over 200 steps; total = t + lambda v exact on 200 draws".into())
}

// ---------------------------------------------------------------- pipeline

fn oracle_keyframe(v: &VideoFrames, caption: &str, seed: u64, plan: &SamplingPlan) -> (usize, usize, Vec<f64>) {
    let t = MockEmbedder::text_vector(seed, caption);
    let (w, h) = (v.width, v.height);
    let side = w.min(h);
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let n = |u: &[f64]| u.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (n(a) * n(b))
    };
    let scores: Vec<f64> = v
        .frames
        .iter()
        .map(|f| {
            [0, (w.max(h) - side) / 2, w.max(h) - side]
                .iter()
                .map(|&o| {
                    let (x, y) = if w >= h { (o, 0) } else { (0, o) };
                    cos(&MockEmbedder::image_vector(seed, &f.locator, &Crop { x, y, width: side, height: side }), &t)
                })
                .sum::<f64>()
                / 3.0
        })
        .collect();
    let n = v.frames.len();
    let fps = v.fps;
    let argmax = |c: &[usize]| {
        let best = c.iter().map(|&i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
        *c.iter().filter(|&&i| scores[i] == best).min().unwrap()
    };
    let duration = n as f64 / fps;
    if duration < 1.0 / plan.coarse_fps {
        let w = argmax(&(0..n).collect::<Vec<_>>());
        return (w, w, scores);
    }
    let nearest = |t: f64| ((t * fps).round() as usize).min(n - 1);
    let grid = |rate: f64| (0..).map(move |k| k as f64 / rate).take_while(move |t| *t < duration - 1e-12);
    let coarse: Vec<usize> = grid(plan.coarse_fps).map(nearest).collect();
    let cw = argmax(&coarse);
    let tw = cw as f64 / fps;
    let refined: Vec<usize> = grid(plan.refined_fps)
        .filter(|t| (t - tw).abs() <= plan.neighborhood_s + 1e-9)
        .map(nearest)
        .filter(|&i| (i as f64 / fps - tw).abs() <= plan.neighborhood_s + 1e-9)
        .collect();
    (cw, argmax(&refined), scores)
}

fn keyframe_oracle() -> Check {
    let plan = SamplingPlan::default();
    ensure!(plan.coarse_stride_s() == 0.5, "coarse stride {}", plan.coarse_stride_s());
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let rt = rt();
    let mut agree = 0;
    for case in 0..50 {
        let n = rng.random_range(1..=200);
        let fps = [10.0, 12.0, 24.0, 25.0, 29.97, 30.0][rng.random_range(0..6)];
        let (w, h) = [(640, 360), (360, 640), (480, 480)][rng.random_range(0..3)];
        let seed = rng.random::<u64>();
        let v = VideoFrames::from_locators(fps, w, h, (0..n).map(|i| format!("acc{case}/{i}.png")).collect());
        let caption = format!("someone does thing {case}");
        let suite = MockSuite::new(seed, "/nonexistent");
        let sel = rt.block_on(select_keyframe(&v, &caption, suite.embedder.as_ref(), &plan)).unwrap();
        let (cw, want, scores) = oracle_keyframe(&v, &caption, seed, &plan);
        if sel.index == want && sel.coarse_winner == cw && (sel.frame.similarity - scores[want]).abs() < 1e-12 {
            agree += 1;
        }
    }
    ensure!(agree == 50, "{agree}/50 agree with exhaustive argmax");
    Ok(format!("{agree}/50 agree with exhaustive argmax; coarse stride 0.5 s"))
}

fn edit_loop_bound() -> Check {
    let rt = rt();
    let job = EditJob {
        anchor_id: "anc".into(),
        action_id: 1,
        caption: "the person waves".into(),
        start_frame: "anc/start.png".into(),
    };
    let dir = tempfile::tempdir().unwrap();
    let suite = MockSuite::with_options(MockOptions::new(5, dir.path()).edit_verdicts(vec![]));
    let out = rt.block_on(run_edit_job(&job, &suite.provider_set(), &EditConfig::default(), dir.path())).unwrap();
    ensure!(
        out.state() == JobState::Exhausted && out.attempts().len() == 5,
        "all-NO gave {:?} after {}",
        out.state(),
        out.attempts().len()
    );
    ensure!(suite.calls(ProviderKind::ImageEditor) == 5, "{} edits", suite.calls(ProviderKind::ImageEditor));
    ensure!(suite.calls(ProviderKind::VideoSynthesizer) == 0, "synthesized after exhaustion");

    let dir = tempfile::tempdir().unwrap();
    let suite = MockSuite::with_options(MockOptions::new(5, dir.path()).edit_verdicts(vec![false, false, true]));
    let out = rt.block_on(run_edit_job(&job, &suite.provider_set(), &EditConfig::default(), dir.path())).unwrap();
    let JobOutcome::Done(clip) = out else { return Err("[NO, NO, YES] did not finish".into()) };
    let verdicts: Vec<EditVerdict> = clip.edit_attempts.iter().map(|a| a.verdict).collect();
    ensure!(verdicts == [EditVerdict::Rejected, EditVerdict::Rejected, EditVerdict::Accepted], "verdicts {verdicts:?}");
    let indices: Vec<u32> = clip.edit_attempts.iter().map(|a| a.attempt_index).collect();
    ensure!(indices == [1, 2, 3], "attempt indices {indices:?}");
    ensure!(
        clip.edit_attempts[..2].iter().all(|a| a.judge_explanation.as_deref().is_some_and(|e| !e.is_empty())),
        "rejected attempts lack explanations"
    );
    ensure!(clip.end_frame.ends_with("attempt_3_end.png") && clip.violations(5).is_empty(), "clip provenance {clip:?}");
    Ok("all-NO -> exhausted after 5 attempts; [NO, NO, YES] -> done at attempt 3 with explanations".into())
}

fn chi_square_p(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

fn permutation_uniformity() -> Check {
    let clips =
        |n: u32| ClipSet::new("a", (0..n).map(|i| ClipEntry { action_id: i, caption: format!("c{i}") }).collect());
    let three = clips(3);
    let mut rng = ChaCha8Rng::seed_from_u64(31337);
    let mut counts: BTreeMap<Vec<u32>, usize> = BTreeMap::new();
    for _ in 0..10_000 {
        let s = build_sequence(&three, 3, &mut rng).map_err(|e| e.to_string())?;
        *counts.entry(s.s_minus.action_ids()).or_default() += 1;
    }
    ensure!(counts.len() == 5 && !counts.contains_key(&vec![0, 1, 2]), "orders seen: {:?}", counts.keys());
    let p = chi_square_p(&counts.values().copied().collect::<Vec<_>>());
    ensure!(p > 0.001, "chi-square p = {p}");
    let five = clips(5);
    for _ in 0..2000 {
        let s = build_sequence(&five, 2, &mut rng).map_err(|e| e.to_string())?;
        let plus = s.s_plus.action_ids();
        ensure!(s.s_minus.action_ids() == vec![plus[1], plus[0]], "K = 2 negative is not the swap");
    }
    Ok(format!("K = 3 chi-square p = {p:.3} over 5 orders; K = 2 always the swap"))
}

fn forge() -> Command {
    Command::new(env!("CARGO_BIN_EXE_forge"))
}

fn run_forge(cwd: &Path, args: &[&str]) -> Output {
    forge().current_dir(cwd).args(args).env_remove("FORGE_CONFIG").output().expect("running forge")
}

fn write_anchors(dir: &Path, n: usize) {
    let lines: String = (0..n)
        .map(|i| {
            format!(
                "{{\"source_video\":\"videos/clip{i:03}.mp4\",\"source_caption\":\"A person stands in room {i}.\"}}\n"
            )
        })
        .collect();
    std::fs::write(dir.join("anchors.jsonl"), lines).unwrap();
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn dataset_run(dir: &Path) -> Result<(), String> {
    write_anchors(dir, 40);
    let g = run_forge(
        dir,
        &[
            "generate",
            "--inputs",
            "anchors.jsonl",
            "--data-root",
            "data",
            "--mock",
            "--mock-seed",
            "3",
            "--workers",
            "4",
        ],
    );
    ensure!(g.status.success(), "generate failed: {}", String::from_utf8_lossy(&g.stderr));
    let p = run_forge(dir, &["pair", "--data-root", "data", "--target-samples", "1000", "--seed", "5"]);
    ensure!(p.status.success(), "pair failed: {}", String::from_utf8_lossy(&p.stderr));
    Ok(())
}

fn dataset_shape() -> Check {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    dataset_run(a.path())?;
    dataset_run(b.path())?;
    let manifest = a.path().join("data/dataset/manifest.jsonl");
    let samples = read_samples(&manifest).map_err(|e| e.to_string())?;
    ensure!(samples.len() == 1000, "{} samples", samples.len());
    let v = samples.iter().filter(|s| s.kind == PreferenceKind::VPref).count();
    let frac = v as f64 / samples.len() as f64;
    ensure!((frac - 0.70).abs() <= 0.01, "v-pref fraction {frac}");
    // Equal split of 1000 over six cells: four cells of 167 then two of 166.
    for (i, (task, format)) in all_cells().into_iter().enumerate() {
        let n = samples.iter().filter(|s| s.task == task && s.format == format).count();
        let want = if i < 4 { 167 } else { 166 };
        ensure!(n == want, "{task}/{format}: {n} samples, configured {want}");
    }
    let stats: StatsTable =
        serde_json::from_slice(&std::fs::read(a.path().join("data/dataset/stats.json")).unwrap()).unwrap();
    ensure!(stats.total == 1000 && stats.v_pref == v, "stats sidecar disagrees with manifest");
    let m = DatasetManifest::load(&manifest).map_err(|e| e.to_string())?;
    let holdout = m.split.values().filter(|s| **s == Split::Holdout).count();
    ensure!(m.uncovered().is_empty() && holdout > 0, "split coverage");
    let (ta, tb) = (tree(&a.path().join("data")), tree(&b.path().join("data")));
    ensure!(ta == tb, "re-run differs in {} files", ta.iter().filter(|(k, v)| tb.get(*k) != Some(v)).count());
    Ok(format!("1000 samples, v-pref {frac:.3}, cells 167x4 + 166x2, {} files byte-identical on re-run", ta.len()))
}

fn cell_average() -> Check {
    let cells = [29.8, 1.6, 48.9, 28.0, 48.4, 64.6];
    let avg = average_of_cells(&cells.map(Some)).ok_or("no average")?;
    let oracle = (cells.iter().sum::<f64>() / 6.0 * 10.0).round() / 10.0;
    ensure!(avg == 36.9 && oracle == 36.9, "avg {avg}, oracle {oracle}");
    let all: Vec<(Task, Format, u8)> = REPORT_CELLS.iter().flat_map(|&(t, f)| (0..7).map(move |_| (t, f, 1))).collect();
    let r = aggregate(&all);
    ensure!(r.cells.iter().all(|c| c.accuracy == Some(100.0)) && r.avg == Some(100.0), "all-correct report {r:?}");
    Ok(format!("[29.8, 1.6, 48.9, 28.0, 48.4, 64.6] -> avg {avg}; all-correct -> 100.0 everywhere"))
}

fn review_sample(i: usize) -> PreferenceSample {
    let anchor = format!("anc{:02}", i / 4);
    PreferenceSample {
        sample_id: String::new(),
        kind: PreferenceKind::VPref,
        task: Task::ActionRecognition,
        format: Format::FreeForm,
        question: "What action is shown?".into(),
        chosen_context: VideoContext::single(&anchor, (i % 4) as u32),
        rejected_context: Some(VideoContext::single(&anchor, ((i + 1) % 4) as u32)),
        chosen_answer: format!("action {i}"),
        rejected_answer: None,
        provenance: Provenance {
            anchor_id: anchor.clone(),
            action_ids: vec![(i % 4) as u32],
            permutation: None,
            option_order: None,
        },
    }
    .with_computed_id()
}

fn review_percentages() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let mut m = DatasetManifest::new();
    for i in 0..88 {
        m.push(review_sample(i), Split::Holdout).unwrap();
    }
    let path = dir.path().join("holdout.jsonl");
    m.write(&path).unwrap();
    let ids: Vec<String> = m.samples().iter().map(|s| s.sample_id.clone()).collect();
    let counts = [("good", 57), ("wrong", 11), ("ambiguous", 15), ("bad_quality", 5)];
    let rt = rt();
    let stats: serde_json::Value = rt.block_on(async {
        let state = ReviewState::open(ReviewConfig::new(&path, dir.path().join("labels.log"))).unwrap();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let server = tokio::spawn(forge_review::serve(state, listener));
        let client = reqwest::Client::new();
        let mut k = 0;
        for (label, n) in counts {
            for _ in 0..n {
                let r = client
                    .post(format!("{base}/samples/{}/label", ids[k]))
                    .json(&serde_json::json!({"evaluator": "e1", "label": label}))
                    .send()
                    .await
                    .unwrap();
                assert!(r.status().is_success());
                k += 1;
            }
        }
        let stats = client.get(format!("{base}/stats")).send().await.unwrap().json().await.unwrap();
        server.abort();
        stats
    });
    let row = stats["formats"].as_array().unwrap().iter().find(|r| r["format"] == "free_form").unwrap();
    let got: Vec<f64> = counts.iter().map(|(l, _)| row["percent"][l].as_f64().unwrap()).collect();
    // Tenths of a percent, half up, on integers.
    let oracle: Vec<f64> = counts.iter().map(|(_, c)| ((2000 * c + 88) / 176) as f64 / 10.0).collect();
    ensure!(got == [64.8, 12.5, 17.0, 5.7] && got == oracle, "percentages {got:?}, oracle {oracle:?}");
    Ok(format!("57/11/15/5 of 88 -> {got:?} via GET /stats"))
}

fn mock_call_total(inputs: &[AnchorInput], seed: u64) -> u64 {
    let dir = tempfile::tempdir().unwrap();
    let suite = MockSuite::new(seed, dir.path());
    let cfg = GenerateConfig { workers: 3, ..GenerateConfig::new(dir.path()) };
    let frames = Arc::new(SyntheticFrameSource::new(dir.path(), seed));
    rt().block_on(generate(inputs, cfg, suite.provider_set(), frames)).unwrap();
    suite.counters.total()
}

fn crash_resume() -> Check {
    const ANCHORS: usize = 6;
    let gen_args = [
        "generate",
        "--inputs",
        "anchors.jsonl",
        "--data-root",
        "data",
        "--mock",
        "--mock-seed",
        "8",
        "--workers",
        "3",
    ];
    let reference = tempfile::tempdir().unwrap();
    write_anchors(reference.path(), ANCHORS);
    let out = run_forge(reference.path(), &gen_args);
    ensure!(out.status.success(), "uninterrupted run failed: {}", String::from_utf8_lossy(&out.stderr));
    let want = tree(&reference.path().join("data"));

    let inputs: Vec<AnchorInput> = (0..ANCHORS)
        .map(|i| AnchorInput {
            source_video: format!("videos/clip{i:03}.mp4"),
            source_caption: format!("A person stands in room {i}."),
        })
        .collect();
    let total = mock_call_total(&inputs, 8);
    let mut points = Vec::new();
    let mut with_state = 0;
    for crash_at in (1..8).map(|k| total * k / 8) {
        let dir = tempfile::tempdir().unwrap();
        write_anchors(dir.path(), ANCHORS);
        let crash_flag = crash_at.to_string();
        let mut args = gen_args.to_vec();
        args.extend(["--mock-crash-after", crash_flag.as_str()]);
        let crashed = run_forge(dir.path(), &args);
        ensure!(!crashed.status.success(), "run did not crash at call {crash_at} of {total}");
        // A crash before the first state write leaves nothing to protect.
        let persisted = !tree(&dir.path().join("data")).is_empty();
        if persisted {
            let fresh = run_forge(dir.path(), &gen_args);
            ensure!(fresh.status.code() == Some(2), "restart without --resume exited {:?}", fresh.status.code());
            with_state += 1;
        }
        let mut resume = gen_args.to_vec();
        resume.push("--resume");
        let resumed = run_forge(dir.path(), &resume);
        ensure!(resumed.status.success(), "resume failed: {}", String::from_utf8_lossy(&resumed.stderr));
        let got = tree(&dir.path().join("data"));
        ensure!(
            got == want,
            "crash at {crash_at}: {} files differ",
            want.iter().filter(|(k, v)| got.get(*k) != Some(v)).count() + got.len().abs_diff(want.len())
        );
        points.push(crash_at);
    }
    ensure!(with_state > 0, "no crash point left state on disk");
    Ok(format!(
        "crashes at calls {points:?} of {total} ({with_state} with state on disk), resumed output byte-identical ({} files)",
        want.len()
    ))
}

fn main() {
    let criteria: Vec<(&str, fn() -> Check)> = vec![
        ("loss fixed points", loss_fixed_points),
        ("softplus values", softplus_values),
        ("gradient check", gradient_check),
        ("toy training", toy_training),
        ("mixed-objective composition", lambda_composition),
        ("keyframe oracle equivalence", keyframe_oracle),
        ("edit-loop bound", edit_loop_bound),
        ("permutation uniformity", permutation_uniformity),
        ("dataset shape", dataset_shape),
        ("eval cell averaging", cell_average),
        ("review label percentages", review_percentages),
        ("crash-resume", crash_resume),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or(p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {:>2}. {name} [{secs:.2}s]: {detail}", i + 1),
            Err(why) => {
                failures += 1;
                println!("FAIL  {:>2}. {name} [{secs:.2}s]: {why}", i + 1);
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
