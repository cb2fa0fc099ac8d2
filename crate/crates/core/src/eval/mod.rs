//! Benchmark evaluation: item formats, scoring rules, scale-normalized
//! aggregation, the run harness, ablations, and report emission.

mod harness;
pub mod report;
pub mod toy;

pub use harness::{
    Harness, ItemResult, LeaveOneOut, LooPoint, RoundsPoint, RunOutcome, ScalePoint, Variant,
    SERVER_PARTICIPANT,
};

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendBinding, BackendError, CallParams, Gateway, Message};
use crate::orchestrator::PipelineError;
use crate::template;
use crate::types::{ImageRef, InvariantError};

/// Prompt used to have a judge model grade a free-form response.
pub const JUDGE_GRADING_TEMPLATE: &str = "Please act as an impartial judge and evaluate the quality of the response provided by an AI assistant to the user question displayed below. Rate the response on a scale of 1 to 10.\n\n[Question]\n{question}\n\n[Response]\n{response}\n\nReply with a single integer rating from 1 to 10.";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("benchmark io: {0}")]
    Io(#[from] std::io::Error),
    #[error("benchmark line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("item '{0}': gold answer required for this answer type")]
    MissingGold(String),
    #[error("no scale entry for benchmark '{0}'")]
    MissingScale(String),
    #[error("nothing to aggregate")]
    EmptyAggregate,
    #[error("judged scoring requires a judge binding")]
    JudgeRequired,
    #[error("item '{item}': judge reply is not a 1-10 rating: {reply:?}")]
    JudgeUnparseable { item: String, reply: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Invariant(#[from] InvariantError),
    #[error("encode: {0}")]
    Encode(#[from] serde_json::Error),
}

/// How an item's predictions are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerType {
    /// Multiple choice A–E; score 1 when the extracted letter matches gold.
    Choice,
    /// Casefolded alphanumeric equality against gold.
    Exact,
    /// A judge model rates the response 1–10.
    Judged,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceOption {
    pub letter: String,
    pub text: String,
}

/// One benchmark question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
    pub answer_type: AnswerType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub choices: Vec<ChoiceOption>,
}

impl BenchmarkItem {
    pub fn validate(&self) -> Result<(), InvariantError> {
        if self.id.trim().is_empty() {
            return Err(InvariantError::new("item id: empty"));
        }
        if self.question.trim().is_empty() {
            return Err(InvariantError::new(format!(
                "item question: empty for '{}'",
                self.id
            )));
        }
        match self.answer_type {
            AnswerType::Choice => {
                let gold = self.gold.as_deref().ok_or_else(|| {
                    InvariantError::new(format!("item gold: missing for choice item '{}'", self.id))
                })?;
                if gold.len() != 1 || !matches!(gold.as_bytes()[0], b'A'..=b'E') {
                    return Err(InvariantError::new(format!(
                        "item gold: '{gold}' is not a letter A-E for '{}'",
                        self.id
                    )));
                }
                if self.choices.is_empty() {
                    return Err(InvariantError::new(format!(
                        "item choices: missing for choice item '{}'",
                        self.id
                    )));
                }
                if !self.choices.iter().any(|c| c.letter == *gold) {
                    return Err(InvariantError::new(format!(
                        "item gold: letter '{gold}' not among the choices of '{}'",
                        self.id
                    )));
                }
            }
            AnswerType::Exact => {
                if self.gold.as_deref().is_none_or(|g| g.trim().is_empty()) {
                    return Err(InvariantError::new(format!(
                        "item gold: missing for exact item '{}'",
                        self.id
                    )));
                }
            }
            AnswerType::Judged => {}
        }
        Ok(())
    }

    /// The question as posed to models, with any choices listed.
    pub fn rendered_question(&self) -> String {
        if self.choices.is_empty() {
            return self.question.clone();
        }
        let options = self
            .choices
            .iter()
            .map(|c| format!("{}. {}", c.letter, c.text))
            .collect::<Vec<_>>()
            .join("\n");
        format!("{}\n\nOptions:\n{options}", self.question)
    }
}

/// Load a JSONL benchmark file, validating every item and id uniqueness.
pub fn load_benchmark(path: &Path) -> Result<Vec<BenchmarkItem>, EvalError> {
    let raw = std::fs::read_to_string(path)?;
    let mut items = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (index, line) in raw.lines().enumerate() {
        let line_no = index + 1;
        if line.trim().is_empty() {
            continue;
        }
        let item: BenchmarkItem = serde_json::from_str(line).map_err(|e| EvalError::Malformed {
            line: line_no,
            reason: e.to_string(),
        })?;
        item.validate().map_err(|e| EvalError::Malformed {
            line: line_no,
            reason: e.to_string(),
        })?;
        if !seen.insert(item.id.clone()) {
            return Err(EvalError::Malformed {
                line: line_no,
                reason: format!("duplicate item id '{}'", item.id),
            });
        }
        items.push(item);
    }
    Ok(items)
}

fn choice_patterns() -> &'static [Regex; 3] {
    static PATTERNS: OnceLock<[Regex; 3]> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        [
            // Parenthesized letter, either case: "(B)", "(c)".
            Regex::new(r"\(([A-Ea-e])\)").unwrap(),
            // Standalone uppercase letter: "B", "B.", "B)". Lowercase is
            // excluded here so articles ("a cat") don't read as answers.
            Regex::new(r"\b([A-E])\b").unwrap(),
            // Stated answer, either case: "answer is c", "Answer is: (d)".
            Regex::new(r"(?i)answer\s+is\s*:?\s*\(?([A-Ea-e])\b").unwrap(),
        ]
    })
}

/// Pull the answer letter out of a free-form reply: the first standalone
/// A–E (by byte position) across the recognized shapes. Uppercase `A` at a
/// sentence start is taken at face value — extraction is deliberately
/// format-driven, not semantic.
pub fn extract_choice(text: &str) -> Option<char> {
    let mut best: Option<(usize, char)> = None;
    for pattern in choice_patterns() {
        if let Some(captures) = pattern.captures(text) {
            let group = captures.get(1).expect("every pattern has one group");
            let letter = group
                .as_str()
                .chars()
                .next()
                .expect("group is one letter")
                .to_ascii_uppercase();
            let at = captures.get(0).expect("whole match").start();
            if best.is_none_or(|(so_far, _)| at < so_far) {
                best = Some((at, letter));
            }
        }
    }
    best.map(|(_, letter)| letter)
}

/// Casefolded alphanumeric projection used for exact-match scoring.
pub fn normalize_exact(text: &str) -> String {
    text.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// First standalone integer 1–10 in a judge reply.
pub fn parse_judge_rating(reply: &str) -> Option<f64> {
    static RATING: OnceLock<Regex> = OnceLock::new();
    let rating = RATING.get_or_init(|| Regex::new(r"\b(10|[1-9])\b").unwrap());
    rating
        .captures(reply)
        .and_then(|c| c.get(1))
        .and_then(|m| m.as_str().parse::<f64>().ok())
}

/// Judge context for [`AnswerType::Judged`] items.
pub struct JudgeScorer<'a> {
    pub gateway: &'a Gateway,
    pub binding: &'a BackendBinding,
    pub params: &'a CallParams,
}

/// Score one prediction for one item on the item's raw scale
/// (0/1 for choice and exact, 1–10 for judged).
pub async fn score_item(
    item: &BenchmarkItem,
    prediction: &str,
    judge: Option<&JudgeScorer<'_>>,
) -> Result<f64, EvalError> {
    match item.answer_type {
        AnswerType::Choice => {
            let gold = item
                .gold
                .as_deref()
                .ok_or_else(|| EvalError::MissingGold(item.id.clone()))?;
            let gold_letter = gold.chars().next().map(|c| c.to_ascii_uppercase());
            Ok((extract_choice(prediction) == gold_letter) as u8 as f64)
        }
        AnswerType::Exact => {
            let gold = item
                .gold
                .as_deref()
                .ok_or_else(|| EvalError::MissingGold(item.id.clone()))?;
            Ok((normalize_exact(prediction) == normalize_exact(gold)) as u8 as f64)
        }
        AnswerType::Judged => {
            let judge = judge.ok_or(EvalError::JudgeRequired)?;
            let prompt = template::fill(
                JUDGE_GRADING_TEMPLATE,
                &[
                    ("{question}", item.question.as_str()),
                    ("{response}", prediction),
                ],
            );
            let completion = judge
                .gateway
                .complete(judge.binding, &[Message::user(prompt)], judge.params)
                .await?;
            parse_judge_rating(&completion.text).ok_or_else(|| EvalError::JudgeUnparseable {
                item: item.id.clone(),
                reply: completion.text.clone(),
            })
        }
    }
}

/// Affine normalization for one benchmark's raw score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleEntry {
    #[serde(default)]
    pub offset: f64,
    pub divisor: f64,
}

/// Benchmark name → normalization, so scores on different raw scales can be
/// averaged on a common 0–100 footing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScaleMap(pub BTreeMap<String, ScaleEntry>);

impl ScaleMap {
    /// Scales for the common report benchmarks: 1–10 judge ratings divide by
    /// 10; win-rate percentages pass through.
    pub fn default_scales() -> Self {
        let mut map = BTreeMap::new();
        map.insert(
            "mt_bench".to_string(),
            ScaleEntry {
                offset: 0.0,
                divisor: 10.0,
            },
        );
        map.insert(
            "alpacaeval".to_string(),
            ScaleEntry {
                offset: 0.0,
                divisor: 100.0,
            },
        );
        map.insert(
            "arena_hard".to_string(),
            ScaleEntry {
                offset: 0.0,
                divisor: 100.0,
            },
        );
        ScaleMap(map)
    }

    pub fn get(&self, benchmark: &str) -> Option<ScaleEntry> {
        self.0.get(benchmark).copied()
    }

    pub fn insert(&mut self, benchmark: impl Into<String>, entry: ScaleEntry) {
        self.0.insert(benchmark.into(), entry);
    }

    pub fn validate(&self) -> Result<(), InvariantError> {
        for (name, entry) in &self.0 {
            if !entry.divisor.is_finite() || entry.divisor <= 0.0 {
                return Err(InvariantError::new(format!(
                    "scale map: divisor for '{name}' must be finite and positive"
                )));
            }
            if !entry.offset.is_finite() {
                return Err(InvariantError::new(format!(
                    "scale map: offset for '{name}' must be finite"
                )));
            }
        }
        Ok(())
    }
}

impl Default for ScaleMap {
    fn default() -> Self {
        Self::default_scales()
    }
}

/// Round to two decimals, halves away from zero (half-up for scores).
pub fn round2(value: f64) -> f64 {
    (value * 100.0).round() / 100.0
}

/// Mean of scale-normalized per-benchmark scores, as a 0–100 figure rounded
/// to two decimals: each raw score becomes `(raw − offset) / divisor × 100`.
pub fn aggregate_score(
    per_benchmark: &BTreeMap<String, f64>,
    scales: &ScaleMap,
) -> Result<f64, EvalError> {
    if per_benchmark.is_empty() {
        return Err(EvalError::EmptyAggregate);
    }
    let mut total = 0.0;
    for (benchmark, raw) in per_benchmark {
        let entry = scales
            .get(benchmark)
            .ok_or_else(|| EvalError::MissingScale(benchmark.clone()))?;
        total += (raw - entry.offset) / entry.divisor * 100.0;
    }
    Ok(round2(total / per_benchmark.len() as f64))
}
