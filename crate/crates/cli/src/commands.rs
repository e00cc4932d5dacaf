//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use forge_core::evalharness::{evaluate, EvalReport, RawPrediction, REPORT_CELLS};
use forge_core::manifest::{manifest_stats, DatasetManifest, ManifestError, Split};
use forge_core::mixdpo::synthetic::{preference_set, visual_gap};
use forge_core::mixdpo::{train_toy, LossConfig, PreferenceBatch, TabularDataset, ToyPolicy, TrainOptions};
use forge_core::model::{validate_sample, PreferenceSample, Task};
use forge_core::pairing::{assemble_dataset, foreign_clips, PairingConfig, SplitUnit};
use forge_pipeline::generate::{generate, load_clip_sets, read_anchor_inputs, GenerateConfig, GenerateError};
use forge_pipeline::judge::LlmAnswerJudge;
use forge_pipeline::keyframe::{CommandFrameExtractor, FrameSource, SyntheticFrameSource};
use forge_pipeline::providers::http::HttpProvider;
use forge_pipeline::providers::mock::{MockOptions, MockSuite};
use forge_pipeline::providers::{Llm, ProviderKind, ProviderSet};
use forge_review::{ReviewConfig, ReviewState};

use crate::cli::{
    Cli, Command, EvalArgs, GenerateArgs, PairArgs, ReviewServeArgs, SplitArgs, SplitUnitArg, StatsArgs, TrainToyArgs,
    ValidateArgs,
};
use crate::config::{FileConfig, Overrides, RunConfig, RUN_CONFIG_FILE};

/// Failure of a subcommand, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration or input files. Exit 2.
    Usage(anyhow::Error),
    /// Work that ran and failed. Exit 1.
    Failed(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Usage(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(e) | CliError::Failed(e) => write!(f, "{e:#}"),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Usage(e.into())
}

fn failed(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Failed(e.into())
}

pub fn run(cli: Cli) -> CliResult {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p).map_err(usage)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Generate(a) => cmd_generate(file, a),
        Command::Pair(a) => cmd_pair(file, a),
        Command::Split(a) => cmd_split(a),
        Command::TrainToy(a) => cmd_train_toy(file, a),
        Command::Eval(a) => cmd_eval(file, a),
        Command::ReviewServe(a) => cmd_review_serve(file, a),
        Command::Stats(a) => cmd_stats(a),
        Command::Validate(a) => cmd_validate(a),
    }
}

fn resolve(file: FileConfig, over: &Overrides) -> CliResult<RunConfig> {
    RunConfig::resolve(file, over, |k| std::env::var(k).ok()).map_err(usage)
}

fn runtime(workers: usize) -> CliResult<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(workers.max(2))
        .enable_all()
        .build()
        .context("starting async runtime")
        .map_err(failed)
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(failed)?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display())).map_err(failed)
}

/// Manifest load errors are input errors; the message carries the line.
fn load_manifest(path: &Path) -> CliResult<DatasetManifest> {
    DatasetManifest::load(path).map_err(|e: ManifestError| usage(anyhow!("manifest {}: {e}", path.display())))
}

fn http_providers(cfg: &RunConfig) -> CliResult<ProviderSet> {
    let make = |kind: ProviderKind| {
        HttpProvider::new(kind, cfg.provider(kind).clone()).map(Arc::new).map_err(|e| {
            usage(anyhow!("provider {kind}: {e}; set [providers.{kind}] or FORGE_{}_ENDPOINT", kind.env_segment()))
        })
    };
    Ok(ProviderSet {
        embedder: make(ProviderKind::Embedding)?,
        proposer: make(ProviderKind::ProposerLlm)?,
        editor: make(ProviderKind::ImageEditor)?,
        synthesizer: make(ProviderKind::VideoSynthesizer)?,
        judge: make(ProviderKind::JudgeLlm)?,
    })
}

fn cmd_generate(file: FileConfig, args: GenerateArgs) -> CliResult {
    let cfg = resolve(file, &args.overrides())?;
    let inputs = read_anchor_inputs(&args.inputs).map_err(usage)?;
    let root = cfg.data_root.clone();

    let (providers, default_frames): (ProviderSet, Option<Arc<dyn FrameSource>>) = if args.mock {
        let opts = MockOptions::new(cfg.seeds.mock, &root).crash_after(args.mock_crash_after);
        let frames: Arc<dyn FrameSource> = Arc::new(SyntheticFrameSource::new(&root, cfg.seeds.mock));
        (MockSuite::with_options(opts).provider_set(), Some(frames))
    } else {
        (http_providers(&cfg)?, None)
    };
    let frames: Arc<dyn FrameSource> = match (&args.frame_extractor_cmd, default_frames) {
        (Some(cmd), _) => Arc::new(CommandFrameExtractor { command: cmd.clone(), data_root: root.clone() }),
        (None, Some(f)) => f,
        (None, None) => {
            return Err(usage(anyhow!("--frame-extractor-cmd is required unless --mock is set")));
        }
    };

    let gen_cfg = GenerateConfig {
        data_root: root.clone(),
        num_actions: cfg.num_actions,
        workers: cfg.workers,
        sampling: cfg.sampling,
        edit: cfg.edit,
        resume: cfg.resume,
    };
    let rt = runtime(cfg.workers)?;
    let report = rt.block_on(generate(&inputs, gen_cfg, providers, frames)).map_err(|e| match e {
        GenerateError::BadInput { .. } | GenerateError::ExistingState(_) | GenerateError::Config(_) => usage(e),
        other => failed(other),
    })?;
    write_file(&root.join(RUN_CONFIG_FILE), &cfg.to_json())?;

    println!(
        "anchors {}  clips {}  clip sets {}  dropped {}",
        report.anchors,
        report.clips,
        report.clip_sets,
        report.dropped_anchors.len()
    );
    for (stage, c) in [("keyframe", &report.keyframe), ("proposal", &report.proposal), ("edit", &report.edit)] {
        println!("{stage:<9} done {:>6}  edit-exhausted {:>6}  failed {:>6}", c.done, c.edit_exhausted, c.failed);
    }
    for f in &report.failures {
        println!(
            "failed {} at {:?}: {}{}",
            f.anchor_id,
            f.stage,
            f.reason,
            if f.retryable { " (retry with --resume)" } else { "" }
        );
    }
    if report.has_failures() {
        return Err(failed(anyhow!("{} anchor(s) failed", report.failures.len())));
    }
    Ok(())
}

fn cmd_pair(file: FileConfig, args: PairArgs) -> CliResult {
    let cfg = resolve(file, &args.overrides())?;
    let clip_sets = load_clip_sets(&cfg.data_root).map_err(usage)?;
    let pairing = PairingConfig {
        vpref_ratio: cfg.vpref_ratio,
        rng_seed: cfg.seeds.pairing,
        holdout_fraction: cfg.holdout_fraction,
        split_unit: match args.split_unit {
            SplitUnitArg::Anchor => SplitUnit::Anchor,
            SplitUnitArg::Sample => SplitUnit::Sample,
        },
        target_samples: cfg.target_samples,
        ..PairingConfig::default()
    };
    let out = assemble_dataset(&clip_sets, &pairing).map_err(usage)?;
    let path = args.out.unwrap_or_else(|| cfg.data_root.join("dataset").join("manifest.jsonl"));
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).map(Path::to_path_buf).unwrap_or_else(|| ".".into());
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())).map_err(failed)?;
    out.manifest.write(&path).map_err(failed)?;
    let mut report = serde_json::to_string_pretty(&out.report).expect("report serializes");
    report.push('\n');
    write_file(&dir.join("pairing_report.json"), &report)?;
    write_file(&dir.join(RUN_CONFIG_FILE), &cfg.to_json())?;
    println!("{}", out.manifest.stats());
    let holdout = out.manifest.split.values().filter(|s| **s == Split::Holdout).count();
    println!("wrote {} ({} samples, {} holdout)", path.display(), out.manifest.len(), holdout);
    for (cell, missing) in &out.report.shortfall {
        println!("shortfall {cell}: {missing}");
    }
    Ok(())
}

fn cmd_split(args: SplitArgs) -> CliResult {
    let m = load_manifest(&args.manifest)?;
    let uncovered = m.uncovered();
    if !uncovered.is_empty() {
        return Err(usage(anyhow!(
            "{} sample(s) have no split assignment (first: {}); run `forge pair` to assign splits",
            uncovered.len(),
            uncovered[0]
        )));
    }
    let out = args.out_dir.unwrap_or_else(|| {
        args.manifest
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| ".".into())
    });
    for (name, side) in [("train", Split::Train), ("holdout", Split::Holdout)] {
        let part = m.filtered(|_, s| s == Some(side));
        let dir = out.join(name);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())).map_err(failed)?;
        let path = dir.join("manifest.jsonl");
        part.write(&path).map_err(failed)?;
        println!("{name:<8} {:>8} samples -> {}", part.len(), path.display());
    }
    Ok(())
}

fn cmd_train_toy(file: FileConfig, args: TrainToyArgs) -> CliResult {
    let seed = args.seed.unwrap_or(file.seeds.train);
    let config = LossConfig::new(args.beta, args.lambda).map_err(usage)?;
    let (train, reference, heldout): (PreferenceBatch, ToyPolicy<f64>, Option<PreferenceBatch>) = match &args.manifest {
        Some(path) => {
            let m = load_manifest(path)?;
            let train: Vec<&PreferenceSample> =
                m.samples().iter().filter(|s| m.split_of(&s.sample_id) != Some(Split::Holdout)).collect();
            let ds = TabularDataset::from_samples(train);
            let reference = ToyPolicy::zeros(ds.contexts.len(), ds.responses.len());
            (ds.batch, reference, None)
        }
        None => {
            if args.contexts < 3 {
                return Err(usage(anyhow!("--contexts must be >= 3")));
            }
            let set = preference_set::<f64>(args.contexts, seed);
            (set.train, set.reference, Some(set.holdout))
        }
    };
    let opts = TrainOptions { steps: args.steps, lr: args.lr, config, seed, minibatch: args.minibatch };
    let out = train_toy(&train, &reference, &opts).map_err(|e| failed(anyhow!("training: {e}")))?;
    if let Some(path) = &args.trace {
        let mut buf = Vec::new();
        out.trace.write_csv(&mut buf).expect("writing to memory");
        write_file(path, &String::from_utf8(buf).expect("csv is utf-8"))?;
    }
    let (first, last) = (out.trace.first(), out.trace.last());
    println!("items: {} text, {} visual", train.t_items.len(), train.v_items.len());
    println!("loss   {:.6} -> {:.6}", first.total, last.total);
    println!("t_loss {:.6} -> {:.6}", first.t_loss, last.t_loss);
    println!("v_loss {:.6} -> {:.6}", first.v_loss, last.v_loss);
    println!("margin {:.6} -> {:.6}", first.mean_margin, last.mean_margin);
    if let Some(h) = heldout {
        let before = visual_gap(&h.v_items, &reference).map_err(|e| failed(anyhow!("{e}")))?;
        let after = visual_gap(&h.v_items, &out.policy).map_err(|e| failed(anyhow!("{e}")))?;
        println!("held-out visual gap {before:.6} -> {after:.6}");
    }
    Ok(())
}

fn read_predictions(path: &Path) -> CliResult<Vec<RawPrediction>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(usage)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| usage(anyhow!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// Table-style rendering: six cells then the average.
pub fn render_eval(report: &EvalReport) -> String {
    let mut s = String::new();
    let task = |t: Task| match t {
        Task::TemporalOrdering => "TO",
        Task::ActionRecognition => "AR",
    };
    let head: Vec<String> = REPORT_CELLS.iter().map(|(t, f)| format!("{}-{}", task(*t), f.abbrev())).collect();
    let _ = writeln!(s, "{}  {:>6}", head.iter().map(|h| format!("{h:>6}")).collect::<Vec<_>>().join(" "), "Avg");
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:>6.1}")).unwrap_or_else(|| format!("{:>6}", "-"));
    let cells: Vec<String> = report.cells.iter().map(|c| fmt(c.accuracy)).collect();
    let _ = write!(s, "{}  {}", cells.join(" "), fmt(report.avg));
    s
}

fn cmd_eval(file: FileConfig, args: EvalArgs) -> CliResult {
    let m = load_manifest(&args.manifest)?;
    let predictions = read_predictions(&args.predictions)?;
    let cfg = resolve(file, &Overrides { workers: Some(2), ..Default::default() })?;
    let judge: Option<LlmAnswerJudge> = if args.mock_judge {
        let llm: Arc<dyn Llm> = MockSuite::new(cfg.seeds.mock, &cfg.data_root).judge;
        Some(LlmAnswerJudge::new(llm))
    } else if !cfg.provider(ProviderKind::JudgeLlm).endpoint.is_empty() {
        let http =
            HttpProvider::new(ProviderKind::JudgeLlm, cfg.provider(ProviderKind::JudgeLlm).clone()).map_err(usage)?;
        Some(LlmAnswerJudge::new(Arc::new(http)))
    } else {
        None
    };
    let rt = runtime(2)?;
    let report =
        rt.block_on(evaluate(m.samples(), &predictions, judge.as_ref().map(|j| j as _))).map_err(|e| match e {
            forge_core::evalharness::EvalError::JudgeRequired => {
                usage(anyhow!("{e}; pass --mock-judge or set FORGE_JUDGE_LLM_ENDPOINT"))
            }
            other => failed(other),
        })?;
    println!("{}", render_eval(&report));
    for w in &report.warnings {
        println!("warning: {w}");
    }
    if let Some(out) = &args.out {
        let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
        json.push('\n');
        write_file(out, &json)?;
    }
    Ok(())
}

fn cmd_review_serve(file: FileConfig, args: ReviewServeArgs) -> CliResult {
    let cfg = resolve(
        file,
        &Overrides {
            data_root: args.root.data_root.clone(),
            workers: Some(2),
            review_order_seed: args.order_seed,
            ..Default::default()
        },
    )?;
    let mut rc = ReviewConfig::new(&args.manifest, &args.labels);
    rc.media_root = args.media_root.clone().unwrap_or_else(|| cfg.data_root.clone());
    if let Some(d) = &args.export_dir {
        rc.export_dir = d.clone();
    }
    rc.order_seed = cfg.seeds.review_order;
    let state = ReviewState::open(rc).map_err(usage)?;
    let rt = runtime(4)?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port))
            .await
            .with_context(|| format!("binding {}:{}", args.host, args.port))
            .map_err(usage)?;
        println!("review service on http://{}", listener.local_addr().map_err(failed)?);
        tokio::select! {
            r = forge_review::serve(state, listener) => r.map_err(failed),
            _ = tokio::signal::ctrl_c() => Ok(()),
        }
    })
}

fn cmd_stats(args: StatsArgs) -> CliResult {
    let samples = forge_core::manifest::read_samples(&args.manifest)
        .map_err(|e| usage(anyhow!("manifest {}: {e}", args.manifest.display())))?;
    let stats = manifest_stats(&samples);
    if args.json {
        println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
    } else {
        println!("{stats}");
    }
    Ok(())
}

fn clip_path(root: &Path, anchor: &str, action: u32) -> PathBuf {
    root.join(anchor).join(action.to_string()).join("clip.json")
}

fn cmd_validate(args: ValidateArgs) -> CliResult {
    let m = load_manifest(&args.manifest)?;
    let mut problems = 0usize;
    for s in m.samples() {
        let mut msgs: Vec<String> = validate_sample(s).iter().map(|v| format!("{v:?}")).collect();
        msgs.extend(
            foreign_clips(s).iter().map(|c| format!("clip {}/{} belongs to another anchor", c.anchor_id, c.action_id)),
        );
        if let Some(root) = &args.data_root {
            let clips =
                s.chosen_context.clip_sequence.iter().chain(s.rejected_context.iter().flat_map(|c| &c.clip_sequence));
            for c in clips {
                if !clip_path(root, &c.anchor_id, c.action_id).exists() {
                    msgs.push(format!("clip {}/{} not found under {}", c.anchor_id, c.action_id, root.display()));
                }
            }
        }
        for msg in &msgs {
            println!("{}: {msg}", s.sample_id);
        }
        problems += usize::from(!msgs.is_empty());
    }
    let uncovered = m.uncovered().len();
    println!("{} samples, {} invalid, {} without split", m.len(), problems, uncovered);
    if problems > 0 {
        return Err(failed(anyhow!("{problems} invalid sample(s)")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use forge_core::evalharness::aggregate;
    use forge_core::model::Format;

    #[test]
    fn eval_table_has_six_cells_and_average() {
        let mut scores = Vec::new();
        for (t, f) in REPORT_CELLS {
            scores.push((t, f, 1));
            scores.push((t, f, 0));
        }
        scores.push((Task::ActionRecognition, Format::MultipleChoice, 1));
        let text = render_eval(&aggregate(&scores));
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let head: Vec<&str> = lines[0].split_whitespace().collect();
        assert_eq!(head, ["TO-FF", "TO-OL", "TO-BC", "AR-FF", "AR-MC", "AR-BC", "Avg"]);
        assert!(lines[1].contains("66.7"));
        assert_eq!(lines[1].split_whitespace().count(), 7);
        // Right-aligned columns: every header label ends where its value ends.
        let ends = |l: &str| {
            l.char_indices()
                .filter(|&(i, c)| c != ' ' && l[i + c.len_utf8()..].chars().next().is_none_or(|n| n == ' '))
                .map(|(i, _)| i)
                .collect::<Vec<_>>()
        };
        assert_eq!(ends(lines[0]), ends(lines[1]));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(usage(anyhow!("x")).exit_code(), 2);
        assert_eq!(failed(anyhow!("x")).exit_code(), 1);
    }
}
