//! Expert selection: ask a judge model to pick the `k` most relevant
//! clients, with a deterministic lexical fallback that keeps routing total —
//! a broken judge can degrade ranking quality but never a run.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendBinding, CallParams, Gateway, Message};
use crate::template;
use crate::types::{ClientPool, ClientProfile, InvariantError, Query, Selection, SelectionMethod};

/// Prompt used to ask the judge for a selection.
pub const DEFAULT_SELECTION_TEMPLATE: &str = "You are given the following specialized assistants:\n{profile_list}\n\nGiven the question: {question}, select the {top_k} most relevant specializations from the list above. Return only their names, separated by commas.";

const QUESTION_SLOT: &str = "{question}";
const TOP_K_SLOT: &str = "{top_k}";
const PROFILE_LIST_SLOT: &str = "{profile_list}";

/// A judge model and the prompt it is asked with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeConfig {
    pub binding: BackendBinding,
    #[serde(default = "default_selection_template")]
    pub prompt_template: String,
}

fn default_selection_template() -> String {
    DEFAULT_SELECTION_TEMPLATE.to_string()
}

impl JudgeConfig {
    pub fn new(binding: BackendBinding) -> Self {
        JudgeConfig {
            binding,
            prompt_template: default_selection_template(),
        }
    }

    pub fn with_template(
        binding: BackendBinding,
        template: impl Into<String>,
    ) -> Result<Self, InvariantError> {
        let config = JudgeConfig {
            binding,
            prompt_template: template.into(),
        };
        config.validate()?;
        Ok(config)
    }

    /// A selection template must name each placeholder exactly once.
    pub fn validate(&self) -> Result<(), InvariantError> {
        for slot in [QUESTION_SLOT, TOP_K_SLOT, PROFILE_LIST_SLOT] {
            let count = template::occurrences(&self.prompt_template, slot);
            if count != 1 {
                return Err(InvariantError::new(format!(
                    "selection template: placeholder {slot} appears {count} times (expected 1)"
                )));
            }
        }
        Ok(())
    }
}

/// The judge reply named no known client.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RouterError {
    #[error("judge reply named no known client")]
    EmptySelection,
}

/// Fill the selection template for one query against one pool.
pub fn build_selection_prompt(
    template: &str,
    query: &Query,
    pool: &ClientPool,
    k: usize,
) -> String {
    let profile_list = pool
        .iter()
        .enumerate()
        .map(|(i, p)| format!("{}. {}: {}", i + 1, p.name, p.role_prompt))
        .collect::<Vec<_>>()
        .join("\n");
    template::fill(
        template,
        &[
            (PROFILE_LIST_SLOT, profile_list.as_str()),
            (QUESTION_SLOT, query.text.as_str()),
            (TOP_K_SLOT, &k.to_string()),
        ],
    )
}

/// Interpret a judge reply as an ordered client selection.
///
/// The reply is split on commas and newlines; each piece is matched against
/// pool names case-insensitively after trimming surrounding whitespace and
/// punctuation. Unknown names are dropped, duplicates keep their first
/// position, and the result is truncated to `k`. A reply that names no known
/// client at all is an error so the caller can fall back.
pub fn parse_selection_reply(
    raw: &str,
    pool: &ClientPool,
    k: usize,
) -> Result<Selection, RouterError> {
    let mut chosen: Vec<ClientProfile> = Vec::new();
    let mut seen = BTreeSet::new();
    for piece in raw.split([',', '\n']) {
        let cleaned = piece
            .trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
            .to_lowercase();
        if cleaned.is_empty() {
            continue;
        }
        if let Some(profile) = pool.iter().find(|p| p.name.to_lowercase() == cleaned) {
            if seen.insert(profile.name.clone()) && chosen.len() < k {
                chosen.push(profile.clone());
            }
        }
    }
    if chosen.is_empty() {
        return Err(RouterError::EmptySelection);
    }
    Ok(
        Selection::new(k, chosen, SelectionMethod::Judge, Some(raw.to_string()))
            .expect("parsed selection is structurally sound"),
    )
}

/// Deterministic lexical routing: rank clients by cosine similarity between
/// the query text and each client's name, role prompt, and domain tags
/// (term-frequency vectors over lowercase alphanumeric tokens). Ties keep
/// pool order. Total: never fails on a non-empty pool.
pub fn fallback_select(query: &Query, pool: &ClientPool, k: usize) -> Selection {
    let ranked = fallback_ranking(query, pool);
    let take = k.min(pool.len());
    let selected = ranked.into_iter().take(take).cloned().collect();
    Selection::new(k, selected, SelectionMethod::Fallback, None)
        .expect("fallback selection is structurally sound")
}

/// Full fallback ranking over the pool (best first).
fn fallback_ranking<'a>(query: &Query, pool: &'a ClientPool) -> Vec<&'a ClientProfile> {
    let query_tokens = tokenize(&query.text);
    let query_vector = term_frequencies(&query_tokens);
    let mut scored: Vec<(usize, f64, &ClientProfile)> = pool
        .iter()
        .enumerate()
        .map(|(i, p)| {
            (
                i,
                cosine(&query_vector, &term_frequencies(&profile_tokens(p))),
                p,
            )
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    scored.into_iter().map(|(_, _, p)| p).collect()
}

/// Similarity score between a query text and one profile (exposed so tests
/// can cross-check the ranking against a brute-force oracle).
pub fn profile_similarity(query_text: &str, profile: &ClientProfile) -> f64 {
    cosine(
        &term_frequencies(&tokenize(query_text)),
        &term_frequencies(&profile_tokens(profile)),
    )
}

fn profile_tokens(profile: &ClientProfile) -> Vec<String> {
    let mut tokens = tokenize(&profile.name);
    tokens.extend(tokenize(&profile.role_prompt));
    for tag in &profile.domain_tags {
        tokens.extend(tokenize(tag));
    }
    tokens
}

fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn term_frequencies(tokens: &[String]) -> HashMap<&str, f64> {
    let mut counts: HashMap<&str, f64> = HashMap::new();
    for token in tokens {
        *counts.entry(token.as_str()).or_insert(0.0) += 1.0;
    }
    counts
}

fn cosine(a: &HashMap<&str, f64>, b: &HashMap<&str, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(token, weight)| b.get(token).map(|other| weight * other))
        .sum();
    let norm_a: f64 = a.values().map(|w| w * w).sum::<f64>().sqrt();
    let norm_b: f64 = b.values().map(|w| w * w).sum::<f64>().sqrt();
    if norm_a == 0.0 || norm_b == 0.0 {
        0.0
    } else {
        dot / (norm_a * norm_b)
    }
}

/// Resolve the participants for one query.
///
/// When `k` covers the whole pool the pool is returned as-is and the judge is
/// never consulted. Otherwise the judge (when configured) picks; a judge
/// failure or useless reply falls back to lexical routing, and a partial
/// judge reply is backfilled from the fallback ranking.
pub async fn select_experts(
    gateway: &Gateway,
    query: &Query,
    pool: &ClientPool,
    k: usize,
    judge: Option<&JudgeConfig>,
    params: &CallParams,
) -> Selection {
    debug_assert!(!pool.is_empty(), "selection requires a non-empty pool");
    if k >= pool.len() {
        return Selection::new(k, pool.profiles().to_vec(), SelectionMethod::Fallback, None)
            .expect("whole-pool selection is structurally sound");
    }

    let Some(judge) = judge else {
        return fallback_select(query, pool, k);
    };

    let prompt = build_selection_prompt(&judge.prompt_template, query, pool, k);
    let reply = match gateway
        .complete(&judge.binding, &[Message::user(prompt)], params)
        .await
    {
        Ok(completion) => completion.text,
        Err(error) => {
            tracing::warn!(judge = %judge.binding.key(), %error, "judge call failed; falling back");
            return fallback_select(query, pool, k);
        }
    };

    match parse_selection_reply(&reply, pool, k) {
        Ok(mut selection) => {
            // Top up a short judge reply from the fallback ranking.
            if selection.selected.len() < k {
                let present: BTreeSet<String> =
                    selection.selected.iter().map(|p| p.name.clone()).collect();
                for profile in fallback_ranking(query, pool) {
                    if selection.selected.len() == k {
                        break;
                    }
                    if !present.contains(&profile.name) {
                        selection.selected.push(profile.clone());
                    }
                }
            }
            selection
        }
        Err(RouterError::EmptySelection) => {
            tracing::warn!(judge = %judge.binding.key(), "judge reply named no client; falling back");
            fallback_select(query, pool, k)
        }
    }
}
