//! End-to-end generation under mock providers.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use forge_pipeline::generate::{
    generate, load_clip_sets, AnchorInput, GenerateConfig, GenerateError, GenerateReport, NO_VIABLE_ACTIONS,
};
use forge_pipeline::keyframe::SyntheticFrameSource;
use forge_pipeline::providers::mock::{MockOptions, MockSuite};

fn inputs(n: usize) -> Vec<AnchorInput> {
    (0..n)
        .map(|i| AnchorInput { source_video: format!("videos/v{i}.mp4"), source_caption: format!("scene {i} caption") })
        .collect()
}

fn run(root: &Path, opts: MockOptions, inputs: &[AnchorInput], resume: bool) -> Result<GenerateReport, GenerateError> {
    let suite = MockSuite::with_options(opts);
    let cfg = GenerateConfig { resume, ..GenerateConfig::new(root) };
    let frames = Arc::new(SyntheticFrameSource::new(root, 7));
    tokio::runtime::Builder::new_multi_thread().worker_threads(4).build().unwrap().block_on(generate(
        inputs,
        cfg,
        suite.provider_set(),
        frames,
    ))
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

#[test]
fn all_yes_yields_every_clip() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(dir.path(), MockOptions::new(1, dir.path()), &inputs(3), false).unwrap();
    assert_eq!(r.anchors, 3);
    assert_eq!(r.clips, 3 * 4);
    assert_eq!(r.clip_sets, 3);
    assert_eq!(r.edit.done, 12);
    assert!(!r.has_failures());
    let sets = load_clip_sets(dir.path()).unwrap();
    assert_eq!(sets.len(), 3);
    assert!(sets.iter().all(|s| s.len() == 4));
}

#[test]
fn exhausted_anchor_is_dropped_not_failed() {
    let dir = tempfile::tempdir().unwrap();
    let bad = forge_core::model::AnchorScene::new("videos/v1.mp4", "scene 1 caption").anchor_id;
    let opts = MockOptions::new(1, dir.path()).edit_script(move |anchor, _, _| anchor != bad);
    let r = run(dir.path(), opts, &inputs(3), false).unwrap();
    assert!(!r.has_failures());
    assert_eq!(r.edit.edit_exhausted, 4);
    assert_eq!(r.clip_sets, 2);
    assert_eq!(r.dropped_anchors.len(), 1);
}

#[test]
fn no_viable_actions_fails_the_anchor() {
    let dir = tempfile::tempdir().unwrap();
    let opts = MockOptions::new(1, dir.path()).filter_script(|caption, _, _| caption != "scene 0 caption");
    let r = run(dir.path(), opts, &inputs(2), false).unwrap();
    assert!(r.has_failures());
    assert_eq!(r.failures.len(), 1);
    assert_eq!(r.failures[0].reason, NO_VIABLE_ACTIONS);
    assert_eq!(r.proposal.failed, 1);
    assert_eq!(r.clip_sets, 1);
}

#[test]
fn runs_are_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let verdicts = |anchor: &str, action: u32, attempt: u32| (anchor.len() as u32 + action + attempt).is_multiple_of(3);
    run(a.path(), MockOptions::new(4, a.path()).edit_script(verdicts), &inputs(4), false).unwrap();
    run(b.path(), MockOptions::new(4, b.path()).edit_script(verdicts), &inputs(4), false).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.len() > 20);
    assert_eq!(ta, tb);
}

#[test]
fn existing_state_requires_resume() {
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), MockOptions::new(1, dir.path()), &inputs(2), false).unwrap();
    let before = tree(dir.path());
    let e = run(dir.path(), MockOptions::new(1, dir.path()), &inputs(2), false).unwrap_err();
    assert!(matches!(e, GenerateError::ExistingState(_)));
    run(dir.path(), MockOptions::new(1, dir.path()), &inputs(2), true).unwrap();
    assert_eq!(tree(dir.path()), before);
}

#[test]
fn resume_after_partial_loss_restores_identical_outputs() {
    let reference = tempfile::tempdir().unwrap();
    run(reference.path(), MockOptions::new(2, reference.path()).edit_verdicts(vec![false, true]), &inputs(3), false)
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), MockOptions::new(2, dir.path()).edit_verdicts(vec![false, true]), &inputs(3), false).unwrap();
    // Remove everything after the proposal stage for one anchor and leave a stale temp file.
    let victim = forge_core::model::AnchorScene::new("videos/v2.mp4", "scene 2 caption").anchor_id;
    for entry in std::fs::read_dir(dir.path().join(&victim)).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            std::fs::remove_dir_all(&p).unwrap();
        }
    }
    std::fs::remove_file(dir.path().join(&victim).join("clipset.json")).unwrap();
    std::fs::remove_file(dir.path().join("report.json")).unwrap();
    std::fs::write(dir.path().join(&victim).join("anchor.json.tmp"), b"{").unwrap();
    run(dir.path(), MockOptions::new(2, dir.path()).edit_verdicts(vec![false, true]), &inputs(3), true).unwrap();
    assert_eq!(tree(dir.path()), tree(reference.path()));
}

#[test]
fn duplicate_inputs_are_merged() {
    let dir = tempfile::tempdir().unwrap();
    let mut ins = inputs(2);
    ins.push(ins[0].clone());
    let r = run(dir.path(), MockOptions::new(1, dir.path()), &ins, false).unwrap();
    assert_eq!(r.anchors, 2);
}
