//! Free-form answer matching backed by a judge language model.

use std::sync::Arc;

use async_trait::async_trait;
use forge_core::evalharness::{AnswerJudge, EvalError};

use crate::editloop::parse_evaluation;
use crate::prompts::Template;
use crate::providers::{ChatRequest, Llm};

pub struct LlmAnswerJudge {
    llm: Arc<dyn Llm>,
}

impl LlmAnswerJudge {
    pub fn new(llm: Arc<dyn Llm>) -> Self {
        LlmAnswerJudge { llm }
    }
}

pub fn render_answer_match(question: &str, reference: &str, candidate: &str) -> String {
    Template::AnswerMatch
        .render(&[("question", question), ("reference", reference), ("candidate", candidate)])
        .expect("template placeholders are fixed")
}

#[async_trait]
impl AnswerJudge for LlmAnswerJudge {
    async fn matches(&self, question: &str, gold: &str, predicted: &str) -> Result<bool, EvalError> {
        let prompt = render_answer_match(question, gold, predicted);
        for _ in 0..2 {
            let raw = self
                .llm
                .chat(&ChatRequest::new(prompt.clone(), Vec::new()))
                .await
                .map_err(|e| EvalError::Judge(e.to_string()))?;
            if let Some(v) = parse_evaluation(&raw) {
                return Ok(v);
            }
        }
        Err(EvalError::Judge("judge gave no EVALUATION line twice".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn match_verdicts() {
        assert_eq!(parse_evaluation("EVALUATION: YES"), Some(true));
        assert_eq!(parse_evaluation("EVALUATION: NO"), Some(false));
        assert_eq!(parse_evaluation("maybe"), None);
    }
}
