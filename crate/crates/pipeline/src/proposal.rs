//! Action proposal and plausibility/uniqueness filtering for one anchor.
//!
//! Both stages send a rendered prompt template plus the anchor keyframe to a
//! language model and parse a JSON object out of the reply. A reply that does
//! not parse or breaks the schema earns one corrective re-prompt; a second
//! failure fails the stage.

use std::collections::BTreeSet;

use forge_core::model::{ActionProposal, AnchorScene, AnchorStatus, FilterVerdict};
use serde::{Deserialize, Serialize};

use crate::prompts::Template;
use crate::providers::{ChatRequest, Llm, ProviderError};

pub const DEFAULT_NUM_ACTIONS: usize = 4;
/// Anchors with fewer retained actions cannot form any hard negative.
pub const MIN_RETAINED_ACTIONS: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum ProposalError {
    #[error("anchor {0} has no keyframe yet")]
    NotKeyframed(String),
    #[error("at least 2 actions must be requested, got {0}")]
    TooFewRequested(usize),
    #[error("proposal response unusable after re-prompt: {0}")]
    ProposalParse(String),
    #[error("filter response unusable after re-prompt: {0}")]
    FilterParse(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalBatch {
    pub anchor_id: String,
    pub requested_n: usize,
    pub raw_response: String,
    pub proposals: Vec<ActionProposal>,
}

/// Extracts the outermost JSON object from an LLM reply and rewrites the
/// Python literals `True`, `False` and `None` that appear outside strings.
pub fn extract_json(raw: &str) -> Result<serde_json::Value, String> {
    let start = raw.find('{').ok_or("no JSON object in response")?;
    let end = raw.rfind('}').ok_or("no JSON object in response")?;
    if end < start {
        return Err("no JSON object in response".into());
    }
    let normalized = normalize_python_literals(&raw[start..=end]);
    serde_json::from_str(&normalized).map_err(|e| format!("invalid JSON: {e}"))
}

fn normalize_python_literals(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut in_string = false;
    let mut escaped = false;
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        out.push_str(match word.as_str() {
            "True" => "true",
            "False" => "false",
            "None" => "null",
            w => w,
        });
        word.clear();
    };
    for ch in s.chars() {
        if in_string {
            out.push(ch);
            if escaped {
                escaped = false;
            } else if ch == '\\' {
                escaped = true;
            } else if ch == '"' {
                in_string = false;
            }
        } else if ch.is_ascii_alphanumeric() || ch == '_' {
            word.push(ch);
        } else {
            flush(&mut word, &mut out);
            if ch == '"' {
                in_string = true;
            }
            out.push(ch);
        }
    }
    flush(&mut word, &mut out);
    out
}

fn correction(prompt: &str, reason: &str) -> String {
    format!(
        "{prompt}\n\nYour previous response could not be used ({reason}). Return ONLY the JSON in the required format."
    )
}

/// Sends `prompt`, parses with `parse`, and re-prompts once on failure.
async fn ask_with_retry<T>(
    llm: &dyn Llm,
    prompt: String,
    images: Vec<String>,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<(T, String), Result<String, ProviderError>> {
    let raw = llm.chat(&ChatRequest::new(prompt.clone(), images.clone())).await.map_err(Err)?;
    let reason = match parse(&raw) {
        Ok(v) => return Ok((v, raw)),
        Err(reason) => reason,
    };
    tracing::warn!(%reason, "unusable LLM response, re-prompting once");
    let raw = llm.chat(&ChatRequest::new(correction(&prompt, &reason), images)).await.map_err(Err)?;
    parse(&raw).map(|v| (v, raw)).map_err(Ok)
}

pub fn render_proposal_prompt(caption: &str, n: usize) -> String {
    Template::ActionProposal
        .render(&[("caption", caption), ("num_actions", &n.to_string())])
        .expect("template placeholders are fixed")
}

#[derive(Deserialize)]
struct RawActions {
    actions: Vec<RawAction>,
}

#[derive(Deserialize)]
struct RawAction {
    action_id: u32,
    action_caption: String,
}

fn parse_proposals(raw: &str, n: usize) -> Result<Vec<(u32, String)>, String> {
    let v = extract_json(raw)?;
    let parsed: RawActions = serde_json::from_value(v).map_err(|e| format!("schema: {e}"))?;
    if parsed.actions.len() != n {
        return Err(format!("expected {n} actions, got {}", parsed.actions.len()));
    }
    let mut ids = BTreeSet::new();
    let mut captions = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    for a in parsed.actions {
        let caption = a.action_caption.trim().to_string();
        if caption.is_empty() {
            return Err(format!("action {} has an empty caption", a.action_id));
        }
        if !ids.insert(a.action_id) {
            return Err(format!("duplicate action_id {}", a.action_id));
        }
        if !captions.insert(caption.to_lowercase()) {
            return Err(format!("duplicate caption {caption:?}"));
        }
        out.push((a.action_id, caption));
    }
    if ids != (0..n as u32).collect() {
        return Err(format!("action ids must be 0..{}", n - 1));
    }
    out.sort_by_key(|(id, _)| *id);
    Ok(out)
}

pub async fn propose_actions(anchor: &AnchorScene, n: usize, llm: &dyn Llm) -> Result<ProposalBatch, ProposalError> {
    if anchor.keyframe.is_none() || !anchor.status.reached(AnchorStatus::Keyframed) {
        return Err(ProposalError::NotKeyframed(anchor.anchor_id.clone()));
    }
    if n < 2 {
        return Err(ProposalError::TooFewRequested(n));
    }
    let prompt = render_proposal_prompt(&anchor.source_caption, n);
    let (actions, raw_response) =
        ask_with_retry(llm, prompt, vec![anchor.start_frame_locator()], |raw| parse_proposals(raw, n)).await.map_err(
            |e| match e {
                Ok(reason) => ProposalError::ProposalParse(reason),
                Err(p) => ProposalError::Provider(p),
            },
        )?;
    let proposals = actions
        .into_iter()
        .map(|(action_id, caption)| ActionProposal {
            anchor_id: anchor.anchor_id.clone(),
            action_id,
            caption,
            filter_verdict: FilterVerdict::Pending,
            rejection_reason: None,
        })
        .collect();
    Ok(ProposalBatch { anchor_id: anchor.anchor_id.clone(), requested_n: n, raw_response, proposals })
}

/// The action list as shown to the filter: one line of JSON.
pub fn render_filter_prompt(caption: &str, proposals: &[ActionProposal]) -> String {
    let listed: Vec<serde_json::Value> = proposals
        .iter()
        .map(|p| serde_json::json!({ "action_id": p.action_id, "action_caption": p.caption }))
        .collect();
    let listed = serde_json::to_string(&listed).expect("json");
    Template::ActionFilter
        .render(&[("caption", caption), ("actions", &listed)])
        .expect("template placeholders are fixed")
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Evaluation {
    passed: bool,
    reason: Option<String>,
}

fn text_field(v: &serde_json::Value) -> Option<String> {
    v.as_str().map(str::trim).filter(|s| !s.is_empty() && !s.eq_ignore_ascii_case("none")).map(str::to_string)
}

fn parse_evaluations(raw: &str, ids: &BTreeSet<u32>) -> Result<Vec<(u32, Evaluation)>, String> {
    let v = extract_json(raw)?;
    let evals = v.get("evaluations").and_then(|e| e.as_array()).ok_or("missing evaluations array")?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for e in evals {
        let id = e
            .get("action_id")
            .and_then(|x| x.as_u64())
            .and_then(|x| u32::try_from(x).ok())
            .ok_or("evaluation without a numeric action_id")?;
        let passed = match e.get("passed") {
            Some(serde_json::Value::Bool(b)) => *b,
            Some(serde_json::Value::String(s)) if s.eq_ignore_ascii_case("true") => true,
            Some(serde_json::Value::String(s)) if s.eq_ignore_ascii_case("false") => false,
            _ => return Err(format!("evaluation {id} has no boolean passed field")),
        };
        if !ids.contains(&id) {
            return Err(format!("evaluation for unknown action_id {id}"));
        }
        if !seen.insert(id) {
            return Err(format!("duplicate evaluation for action_id {id}"));
        }
        let reason = if passed {
            None
        } else {
            Some(
                e.get("similarity_issues")
                    .and_then(text_field)
                    .or_else(|| e.get("uniqueness_check").and_then(text_field))
                    .unwrap_or_else(|| "failed evaluation criteria".into()),
            )
        };
        out.push((id, Evaluation { passed, reason }));
    }
    if let Some(missing) = ids.difference(&seen).next() {
        return Err(format!("missing evaluation for action_id {missing}"));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    /// Every proposal with its verdict, in action_id order.
    pub proposals: Vec<ActionProposal>,
    pub raw_response: String,
}

impl FilterOutcome {
    pub fn retained(&self) -> Vec<&ActionProposal> {
        self.proposals.iter().filter(|p| p.filter_verdict == FilterVerdict::Passed).collect()
    }
}

pub async fn filter_actions(
    batch: &ProposalBatch,
    anchor: &AnchorScene,
    llm: &dyn Llm,
) -> Result<FilterOutcome, ProposalError> {
    let ids: BTreeSet<u32> = batch.proposals.iter().map(|p| p.action_id).collect();
    let prompt = render_filter_prompt(&anchor.source_caption, &batch.proposals);
    let (evals, raw_response) =
        ask_with_retry(llm, prompt, vec![anchor.start_frame_locator()], |raw| parse_evaluations(raw, &ids))
            .await
            .map_err(|e| match e {
                Ok(reason) => ProposalError::FilterParse(reason),
                Err(p) => ProposalError::Provider(p),
            })?;
    let mut proposals = batch.proposals.clone();
    proposals.sort_by_key(|p| p.action_id);
    for p in &mut proposals {
        let (_, e) = evals.iter().find(|(id, _)| *id == p.action_id).expect("coverage checked while parsing");
        p.filter_verdict = if e.passed { FilterVerdict::Passed } else { FilterVerdict::Rejected };
        p.rejection_reason = e.reason.clone();
    }
    Ok(FilterOutcome { proposals, raw_response })
}
