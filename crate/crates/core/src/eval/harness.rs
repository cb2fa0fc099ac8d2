//! Benchmark runs: a baseline client answering alone, or the full
//! collaboration pipeline, scored per participant and normalized.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{aggregate_score, round2, score_item, BenchmarkItem, EvalError, JudgeScorer, ScaleMap};
use crate::backend::{BackendBinding, CallParams, Gateway, Message, MockScript, Usage};
use crate::canonical;
use crate::orchestrator::{PromptSet, Runner, DEFAULT_AGGREGATION_SYSTEM_PROMPT};
use crate::router::JudgeConfig;
use crate::types::{ClientPool, InvariantError, Query, RunConfig};
use crate::vlm::DEFAULT_VLM_FEEDBACK_INSTRUCTION;

/// Ledger name for the aggregation output when it is scored alongside the
/// clients. Client names are forbidden from colliding with it.
pub const SERVER_PARTICIPANT: &str = "server_output";

/// What answers a benchmark run: one client alone, or the collaboration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Variant {
    /// A single client answers every item with its own role prompt and no
    /// server, guidance, or refinement.
    Baseline { client: String },
    /// The full pipeline: routing, aggregation, refinement.
    Colm,
}

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Variant::Baseline { client } => format!("baseline:{client}"),
            Variant::Colm => "colm".to_string(),
        }
    }
}

/// Per-item predictions and raw scores, keyed by participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub item_id: String,
    pub predictions: BTreeMap<String, String>,
    pub scores: BTreeMap<String, f64>,
}

/// Everything one benchmark run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run_id: String,
    pub benchmark: String,
    pub variant: Variant,
    pub config: RunConfig,
    pub items: Vec<ItemResult>,
    /// Mean raw score per participant, over all items (absences score 0).
    pub raw_scores: BTreeMap<String, f64>,
    /// Scale-normalized 0–100 score per participant.
    pub aggregates: BTreeMap<String, f64>,
    /// Mean of the client aggregates (the server output is reported but
    /// excluded here so variants stay comparable).
    pub run_score: f64,
    pub usage: BTreeMap<String, Usage>,
}

impl RunOutcome {
    pub fn client_aggregates(&self) -> impl Iterator<Item = (&str, f64)> {
        self.aggregates
            .iter()
            .filter(|(name, _)| name.as_str() != SERVER_PARTICIPANT)
            .map(|(name, score)| (name.as_str(), *score))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooPoint {
    pub removed: String,
    pub outcome: RunOutcome,
}

/// Full pipeline run next to one rerun per removed client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaveOneOut {
    pub full: RunOutcome,
    pub points: Vec<LooPoint>,
}

impl LeaveOneOut {
    /// Score lost when `removed` sat out, relative to the full pool.
    pub fn drop_for(&self, removed: &str) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.removed == removed)
            .map(|p| round2(self.full.run_score - p.outcome.run_score))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalePoint {
    pub k: usize,
    pub outcome: RunOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundsPoint {
    pub rounds: u32,
    pub outcome: RunOutcome,
}

#[derive(Serialize)]
struct RunFingerprint<'a> {
    benchmark: &'a str,
    variant: &'a Variant,
    config: &'a RunConfig,
    item_ids: Vec<&'a str>,
    client_names: Vec<&'a str>,
}

/// Configured environment for benchmark runs. Every run gets a fresh
/// [`Gateway`] so usage ledgers never bleed between runs.
#[derive(Debug, Clone)]
pub struct Harness {
    pub scripts: BTreeMap<String, MockScript>,
    pub server: BackendBinding,
    pub judge: Option<JudgeConfig>,
    pub prompts: PromptSet,
    pub aggregation_system_prompt: String,
    pub vlm_feedback_instruction: String,
    pub scale: ScaleMap,
    /// Grader for judged answer types; None restricts runs to choice/exact.
    pub score_judge: Option<BackendBinding>,
}

impl Harness {
    pub fn new(scripts: BTreeMap<String, MockScript>, server: BackendBinding) -> Self {
        Harness {
            scripts,
            server,
            judge: None,
            prompts: PromptSet::default(),
            aggregation_system_prompt: DEFAULT_AGGREGATION_SYSTEM_PROMPT.to_string(),
            vlm_feedback_instruction: DEFAULT_VLM_FEEDBACK_INSTRUCTION.to_string(),
            scale: ScaleMap::default_scales(),
            score_judge: None,
        }
    }

    fn runner(&self) -> Runner {
        Runner {
            gateway: Arc::new(Gateway::with_scripts(self.scripts.clone())),
            server: self.server.clone(),
            judge: self.judge.clone(),
            prompts: self.prompts.clone(),
            aggregation_system_prompt: self.aggregation_system_prompt.clone(),
            vlm_feedback_instruction: self.vlm_feedback_instruction.clone(),
        }
    }

    fn run_id(
        benchmark: &str,
        variant: &Variant,
        cfg: &RunConfig,
        items: &[BenchmarkItem],
        pool: &ClientPool,
    ) -> Result<String, EvalError> {
        let fingerprint = RunFingerprint {
            benchmark,
            variant,
            config: cfg,
            item_ids: items.iter().map(|i| i.id.as_str()).collect(),
            client_names: pool.iter().map(|p| p.name.as_str()).collect(),
        };
        let bytes = canonical::to_canonical_bytes(&fingerprint)?;
        let digest = Sha256::digest(&bytes);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        Ok(format!("run-{}", &hex[..12]))
    }

    fn item_query(item: &BenchmarkItem) -> Result<Query, InvariantError> {
        match &item.image {
            Some(image) => Query::vision(item.rendered_question(), vec![image.clone()]),
            None => Query::language(item.rendered_question()),
        }
    }

    /// Answer every item under `variant`, score each participant's final
    /// answer, and normalize through the scale map entry for `benchmark`.
    pub async fn run_benchmark(
        &self,
        benchmark: &str,
        items: &[BenchmarkItem],
        pool: &ClientPool,
        cfg: &RunConfig,
        variant: &Variant,
    ) -> Result<RunOutcome, EvalError> {
        if items.is_empty() {
            return Err(EvalError::EmptyAggregate);
        }
        cfg.validate()?;
        self.scale.validate()?;
        if pool.get(SERVER_PARTICIPANT).is_some() {
            return Err(InvariantError::new(format!(
                "client pool: the name '{SERVER_PARTICIPANT}' is reserved"
            ))
            .into());
        }
        let runner = self.runner();
        let params = CallParams::from(cfg);
        let mut results = Vec::with_capacity(items.len());

        for item in items {
            item.validate()?;
            let query = Self::item_query(item)?;
            let mut predictions = BTreeMap::new();
            match variant {
                Variant::Baseline { client } => {
                    let profile = pool.get(client).ok_or_else(|| {
                        InvariantError::new(format!("baseline client '{client}' not in the pool"))
                    })?;
                    let messages = vec![
                        Message::system(profile.role_prompt.clone()),
                        if query.attachments.is_empty() {
                            Message::user(query.text.clone())
                        } else {
                            Message::user_with_images(query.text.clone(), &query.attachments)
                        },
                    ];
                    let completion = runner
                        .gateway
                        .complete(&profile.backend, &messages, &params)
                        .await?;
                    predictions.insert(profile.name.clone(), completion.text);
                }
                Variant::Colm => {
                    let transcript = match query.mode {
                        crate::types::QueryMode::Language => {
                            runner.run_collaboration(&query, pool, cfg, None).await?
                        }
                        crate::types::QueryMode::VisionLanguage => {
                            runner.run_vlm(&query, &pool.vision_profiles(), cfg).await?
                        }
                    };
                    predictions.extend(transcript.finals.clone());
                    if let Some(guidance) = transcript.final_guidance() {
                        predictions.insert(SERVER_PARTICIPANT.to_string(), guidance.text.clone());
                    }
                }
            }

            let mut scores = BTreeMap::new();
            for (participant, prediction) in &predictions {
                let judge = self.score_judge.as_ref().map(|binding| JudgeScorer {
                    gateway: &runner.gateway,
                    binding,
                    params: &params,
                });
                let score = score_item(item, prediction, judge.as_ref()).await?;
                scores.insert(participant.clone(), score);
            }
            results.push(ItemResult {
                item_id: item.id.clone(),
                predictions,
                scores,
            });
        }

        let participants: BTreeSet<String> = results
            .iter()
            .flat_map(|r| r.predictions.keys().cloned())
            .collect();
        if participants.is_empty() || participants.iter().all(|p| p == SERVER_PARTICIPANT) {
            return Err(EvalError::EmptyAggregate);
        }

        let mut raw_scores = BTreeMap::new();
        let mut aggregates = BTreeMap::new();
        for participant in &participants {
            let total: f64 = results
                .iter()
                .map(|r| r.scores.get(participant).copied().unwrap_or(0.0))
                .sum();
            let raw = total / results.len() as f64;
            let mut per_benchmark = BTreeMap::new();
            per_benchmark.insert(benchmark.to_string(), raw);
            let scaled = aggregate_score(&per_benchmark, &self.scale)?;
            raw_scores.insert(participant.clone(), raw);
            aggregates.insert(participant.clone(), scaled);
        }

        let client_scores: Vec<f64> = aggregates
            .iter()
            .filter(|(name, _)| name.as_str() != SERVER_PARTICIPANT)
            .map(|(_, score)| *score)
            .collect();
        let run_score = round2(client_scores.iter().sum::<f64>() / client_scores.len() as f64);

        Ok(RunOutcome {
            run_id: Self::run_id(benchmark, variant, cfg, items, pool)?,
            benchmark: benchmark.to_string(),
            variant: variant.clone(),
            config: cfg.clone(),
            items: results,
            raw_scores,
            aggregates,
            run_score,
            usage: runner.gateway.usage_by_binding(),
        })
    }

    /// Rerun the full pipeline once per client with that client removed.
    /// The reduced runs never touch the removed client's backend, so its
    /// binding is absent from their usage ledgers.
    pub async fn ablate_leave_one_out(
        &self,
        benchmark: &str,
        items: &[BenchmarkItem],
        pool: &ClientPool,
        cfg: &RunConfig,
    ) -> Result<LeaveOneOut, EvalError> {
        if pool.len() < 2 {
            return Err(InvariantError::new("leave-one-out: needs at least two clients").into());
        }
        let full = self
            .run_benchmark(benchmark, items, pool, cfg, &Variant::Colm)
            .await?;
        let mut points = Vec::with_capacity(pool.len());
        for profile in pool.iter() {
            let reduced = pool.without(&profile.name);
            let outcome = self
                .run_benchmark(benchmark, items, &reduced, cfg, &Variant::Colm)
                .await?;
            points.push(LooPoint {
                removed: profile.name.clone(),
                outcome,
            });
        }
        Ok(LeaveOneOut { full, points })
    }

    /// Rerun the full pipeline for each requested expert count.
    pub async fn ablate_user_scale(
        &self,
        benchmark: &str,
        items: &[BenchmarkItem],
        pool: &ClientPool,
        cfg: &RunConfig,
        ks: &[usize],
    ) -> Result<Vec<ScalePoint>, EvalError> {
        let mut points = Vec::with_capacity(ks.len());
        for &k in ks {
            let mut scaled = cfg.clone();
            scaled.k = k;
            let outcome = self
                .run_benchmark(benchmark, items, pool, &scaled, &Variant::Colm)
                .await?;
            points.push(ScalePoint { k, outcome });
        }
        Ok(points)
    }

    /// Rerun the full pipeline for each requested round budget, with early
    /// stopping disabled so every budget is actually spent.
    pub async fn ablate_rounds(
        &self,
        benchmark: &str,
        items: &[BenchmarkItem],
        pool: &ClientPool,
        cfg: &RunConfig,
        rounds: &[u32],
    ) -> Result<Vec<RoundsPoint>, EvalError> {
        let mut points = Vec::with_capacity(rounds.len());
        for &budget in rounds {
            let mut swept = cfg.clone();
            swept.max_rounds = budget;
            swept.early_stop = false;
            let outcome = self
                .run_benchmark(benchmark, items, pool, &swept, &Variant::Colm)
                .await?;
            points.push(RoundsPoint {
                rounds: budget,
                outcome,
            });
        }
        Ok(points)
    }
}
