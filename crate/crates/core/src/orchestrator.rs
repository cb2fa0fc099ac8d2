//! The language-mode collaboration pipeline.
//!
//! Stage 1: every selected client answers the query independently.
//! Stage 2: the server synthesizes those answers into a guidance summary.
//! Stage 3: each client refines its own answer against the guidance.
//! Stages 2–3 repeat up to `max_rounds` times, optionally stopping early
//! once every client's refinement reproduces its previous answer.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    BackendBinding, BackendError, CallParams, Completion, Gateway, Message, Usage,
};
use crate::canonical::SCHEMA_VERSION;
use crate::router::{select_experts, JudgeConfig};
use crate::template;
use crate::types::{
    ClientPool, ClientResponse, CollaborationTranscript, ConfigSnapshot, ErrorRecord,
    GuidancePacket, InvariantError, Query, QueryMode, ResponseRef, RoundRecord, RunConfig,
    Selection, Stage,
};

/// Server-side instruction for synthesizing client answers.
pub const DEFAULT_SUMMARY_TEMPLATE: &str = "Here are multiple responses from different perspectives: {combined_responses}.\n\nPlease synthesize and refine these answers by:\n- Removing redundant or repetitive content.\n- Keeping only the most relevant, accurate, and useful information.\n- Improving clarity and conciseness while maintaining completeness.\n- Presenting the final response in a well-structured and easy-to-read format.\n\nEnsure that the final answer is cohesive, logically structured, and provides the best possible explanation.";

/// Client-side instruction for refining against the server's summary.
pub const DEFAULT_FINAL_TEMPLATE: &str = "Here is the best answer synthesized from multiple perspectives:\n\n{summary_response}\n\nNow, refine your original response while incorporating the key takeaways.";

/// System prompt given to the server model during aggregation.
pub const DEFAULT_AGGREGATION_SYSTEM_PROMPT: &str = "You are a helpful assistant that synthesizes multiple expert answers into one accurate, concise answer.";

const COMBINED_SLOT: &str = "{combined_responses}";
const SUMMARY_SLOT: &str = "{summary_response}";

/// The two prompt templates a run is parameterized by.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    #[serde(default = "default_summary_template")]
    pub summary_template: String,
    #[serde(default = "default_final_template")]
    pub final_template: String,
}

fn default_summary_template() -> String {
    DEFAULT_SUMMARY_TEMPLATE.to_string()
}

fn default_final_template() -> String {
    DEFAULT_FINAL_TEMPLATE.to_string()
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            summary_template: default_summary_template(),
            final_template: default_final_template(),
        }
    }
}

impl PromptSet {
    /// Each template must name its placeholder exactly once.
    pub fn validate(&self) -> Result<(), InvariantError> {
        for (name, text, slot) in [
            ("summary template", &self.summary_template, COMBINED_SLOT),
            ("final template", &self.final_template, SUMMARY_SLOT),
        ] {
            let count = template::occurrences(text, slot);
            if count != 1 {
                return Err(InvariantError::new(format!(
                    "{name}: placeholder {slot} appears {count} times (expected 1)"
                )));
            }
        }
        Ok(())
    }
}

/// Why a run could not produce a transcript.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("every selected client failed")]
    AllClientsFailed,
    #[error("server aggregation failed: {0}")]
    ServerFailed(#[source] BackendError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Invariant(#[from] InvariantError),
}

/// Shared counter a long-running caller can poll for completed refinement
/// rounds while a run is in flight.
#[derive(Debug, Clone, Default)]
pub struct RoundProgress(Arc<AtomicU32>);

impl RoundProgress {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn completed_rounds(&self) -> u32 {
        self.0.load(Ordering::SeqCst)
    }

    fn record(&self, rounds: u32) {
        self.0.store(rounds, Ordering::SeqCst);
    }
}

/// Joined expert answers, one labeled block per successful response.
pub fn build_combined_responses(responses: &[ClientResponse]) -> String {
    responses
        .iter()
        .filter(|r| r.is_ok())
        .map(|r| format!("### Response from {}:\n{}\n", r.client_name, r.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Everything fixed across runs: the gateway, the server model, the optional
/// judge, and the prompt wording.
#[derive(Clone)]
pub struct Runner {
    pub gateway: Arc<Gateway>,
    pub server: BackendBinding,
    pub judge: Option<JudgeConfig>,
    pub prompts: PromptSet,
    pub aggregation_system_prompt: String,
    pub vlm_feedback_instruction: String,
}

impl Runner {
    pub fn new(gateway: Arc<Gateway>, server: BackendBinding) -> Self {
        Runner {
            gateway,
            server,
            judge: None,
            prompts: PromptSet::default(),
            aggregation_system_prompt: DEFAULT_AGGREGATION_SYSTEM_PROMPT.to_string(),
            vlm_feedback_instruction: crate::vlm::DEFAULT_VLM_FEEDBACK_INSTRUCTION.to_string(),
        }
    }

    pub fn with_judge(mut self, judge: JudgeConfig) -> Self {
        self.judge = Some(judge);
        self
    }

    pub fn with_prompts(mut self, prompts: PromptSet) -> Self {
        self.prompts = prompts;
        self
    }

    pub(crate) fn config_snapshot(&self, cfg: &RunConfig) -> ConfigSnapshot {
        ConfigSnapshot {
            run: cfg.clone(),
            summary_template: self.prompts.summary_template.clone(),
            final_template: self.prompts.final_template.clone(),
            aggregation_system_prompt: self.aggregation_system_prompt.clone(),
            vlm_feedback_instruction: self.vlm_feedback_instruction.clone(),
        }
    }

    /// Stage 1: fan the query out to every selected client independently.
    ///
    /// Individual failures become error records; only a unanimous failure
    /// aborts the run.
    pub async fn stage1_generate(
        &self,
        query: &Query,
        selection: &Selection,
        params: &CallParams,
    ) -> Result<Vec<ClientResponse>, PipelineError> {
        let calls = selection.selected.iter().map(|profile| {
            let messages = vec![
                Message::system(&profile.role_prompt),
                Message::user(&query.text),
            ];
            async move {
                let outcome = self
                    .gateway
                    .complete(&profile.backend, &messages, params)
                    .await;
                into_response(&profile.name, Stage::Initial, 0, outcome)
            }
        });
        let responses = join_all(calls).await;
        if responses.iter().all(|r| !r.is_ok()) {
            return Err(PipelineError::AllClientsFailed);
        }
        Ok(responses)
    }

    /// Stage 2: one server call synthesizing the given responses into the
    /// guidance packet feeding refinement round `round`.
    pub async fn stage2_aggregate(
        &self,
        query: &Query,
        inputs: &[ClientResponse],
        round: u32,
        params: &CallParams,
    ) -> Result<GuidancePacket, PipelineError> {
        let survivors: Vec<&ClientResponse> = inputs.iter().filter(|r| r.is_ok()).collect();
        if survivors.is_empty() {
            return Err(PipelineError::AllClientsFailed);
        }

        let combined = build_combined_responses(inputs);
        let instruction = template::fill(
            &self.prompts.summary_template,
            &[(COMBINED_SLOT, combined.as_str())],
        );
        let messages = vec![
            Message::system(&self.aggregation_system_prompt),
            Message::user(format!("Question: {}\n\n{instruction}", query.text)),
        ];
        let completion = self
            .gateway
            .complete(&self.server, &messages, params)
            .await
            .map_err(PipelineError::ServerFailed)?;
        if completion.text.is_empty() {
            return Err(PipelineError::ServerFailed(
                BackendError::MalformedResponse("empty aggregation text".into()),
            ));
        }

        let sources = survivors
            .iter()
            .map(|r| ResponseRef {
                client_name: r.client_name.clone(),
                stage: r.stage,
                round: r.round,
            })
            .collect();
        GuidancePacket::new(round, completion.text, sources, completion.usage)
            .map_err(PipelineError::Invariant)
    }

    /// Stage 3: every surviving client revises its own latest answer against
    /// the guidance. Returns one response (or error record) per survivor.
    pub async fn stage3_refine(
        &self,
        query: &Query,
        selection: &Selection,
        guidance: &GuidancePacket,
        latest: &BTreeMap<String, String>,
        params: &CallParams,
    ) -> Vec<ClientResponse> {
        let instruction = template::fill(
            &self.prompts.final_template,
            &[(SUMMARY_SLOT, guidance.text.as_str())],
        );
        let calls = selection
            .selected
            .iter()
            .filter_map(|profile| latest.get(&profile.name).map(|prior| (profile, prior)))
            .map(|(profile, prior)| {
                let messages = vec![
                    Message::system(&profile.role_prompt),
                    Message::user(&query.text),
                    Message::assistant(prior),
                    Message::user(&instruction),
                ];
                let round = guidance.round;
                async move {
                    let outcome = self
                        .gateway
                        .complete(&profile.backend, &messages, params)
                        .await;
                    into_response(&profile.name, Stage::Refined, round, outcome)
                }
            });
        join_all(calls).await
    }

    /// Run the full pipeline for one language query and assemble the
    /// transcript.
    pub async fn run_collaboration(
        &self,
        query: &Query,
        pool: &ClientPool,
        cfg: &RunConfig,
        progress: Option<&RoundProgress>,
    ) -> Result<CollaborationTranscript, PipelineError> {
        cfg.validate()?;
        self.prompts.validate()?;
        if pool.is_empty() {
            return Err(InvariantError::new("client pool: empty").into());
        }
        if query.mode != QueryMode::Language {
            return Err(InvariantError::new(
                "query mode: run_collaboration handles language queries (use run_vlm)",
            )
            .into());
        }

        let params = CallParams::from(cfg);
        let selection = select_experts(
            &self.gateway,
            query,
            pool,
            cfg.k,
            self.judge.as_ref(),
            &params,
        )
        .await;

        let initial = self.stage1_generate(query, &selection, &params).await?;
        let mut latest: BTreeMap<String, ClientResponse> = initial
            .iter()
            .filter(|r| r.is_ok())
            .map(|r| (r.client_name.clone(), r.clone()))
            .collect();
        let mut rounds = vec![RoundRecord {
            responses: initial,
            guidance: None,
        }];
        if let Some(progress) = progress {
            progress.record(0);
        }

        for round in 1..=cfg.max_rounds {
            let inputs: Vec<ClientResponse> = selection
                .selected
                .iter()
                .filter_map(|p| latest.get(&p.name).cloned())
                .collect();
            let guidance = self
                .stage2_aggregate(query, &inputs, round, &params)
                .await?;
            rounds
                .last_mut()
                .expect("at least the initial round exists")
                .guidance = Some(guidance.clone());

            let latest_texts: BTreeMap<String, String> = latest
                .iter()
                .map(|(name, resp)| (name.clone(), resp.text.clone()))
                .collect();
            let refined = self
                .stage3_refine(query, &selection, &guidance, &latest_texts, &params)
                .await;

            // Compare against the pre-update texts to detect a fixed point.
            let mut any_success = false;
            let mut stabilized = true;
            for response in refined.iter().filter(|r| r.is_ok()) {
                any_success = true;
                let unchanged = latest
                    .get(&response.client_name)
                    .is_some_and(|prev| prev.text.trim_end() == response.text.trim_end());
                if !unchanged {
                    stabilized = false;
                }
            }
            for response in refined.iter().filter(|r| r.is_ok()) {
                latest.insert(response.client_name.clone(), response.clone());
            }
            rounds.push(RoundRecord {
                responses: refined,
                guidance: None,
            });
            if let Some(progress) = progress {
                progress.record(round);
            }
            if cfg.early_stop && any_success && stabilized {
                break;
            }
        }

        let finals: BTreeMap<String, String> = latest
            .iter()
            .map(|(name, resp)| (name.clone(), resp.text.clone()))
            .collect();
        let totals = transcript_totals(&rounds);
        let transcript = CollaborationTranscript {
            schema: SCHEMA_VERSION.to_string(),
            id: uuid::Uuid::new_v4().to_string(),
            query: query.clone(),
            selection,
            rounds,
            finals,
            totals,
            config_snapshot: self.config_snapshot(cfg),
        };
        debug_assert_eq!(
            crate::types::validate_transcript(&transcript),
            Vec::<String>::new(),
            "assembled transcript must satisfy every structural rule"
        );
        Ok(transcript)
    }
}

/// Sum every usage figure recorded across rounds and guidance packets.
pub(crate) fn transcript_totals(rounds: &[RoundRecord]) -> Usage {
    let responses = rounds
        .iter()
        .flat_map(|r| r.responses.iter())
        .map(|r| r.usage);
    let guidance = rounds
        .iter()
        .filter_map(|r| r.guidance.as_ref())
        .map(|g| g.usage);
    Usage::sum(responses.chain(guidance))
}

/// Convert a raw backend outcome into a transcript-ready response.
pub(crate) fn into_response(
    name: &str,
    stage: Stage,
    round: u32,
    outcome: Result<Completion, BackendError>,
) -> ClientResponse {
    match outcome {
        Ok(completion) if completion.text.is_empty() => ClientResponse::failure(
            name,
            stage,
            round,
            ErrorRecord {
                kind: "empty_completion".into(),
                message: "backend returned empty text".into(),
            },
            completion.usage,
        ),
        Ok(completion) => {
            ClientResponse::success(name, stage, round, completion.text, completion.usage)
        }
        Err(error) => ClientResponse::failure(
            name,
            stage,
            round,
            ErrorRecord {
                kind: error.kind().into(),
                message: error.to_string(),
            },
            Usage::default(),
        ),
    }
    .expect("responses assembled from outcomes are structurally sound")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockReply, MockScript};
    use crate::types::{validate_transcript, ClientProfile};

    fn profile(name: &str) -> ClientProfile {
        ClientProfile::new(
            name,
            format!("You are a helpful {name} assistant."),
            BackendBinding::mock(format!("model-{name}")),
        )
        .unwrap()
    }

    /// Clients answer a fixed draft, then copy the guidance verbatim when
    /// asked to refine; the server always issues the same instruction. This
    /// reaches a fixed point after the second refinement round.
    fn converging_scripts(names: &[&str]) -> BTreeMap<String, MockScript> {
        let mut scripts = BTreeMap::new();
        for name in names {
            scripts.insert(
                format!("model-{name}"),
                MockScript::constant(format!("{name} first draft")).on_user(
                    "refine your original response",
                    MockReply::EchoBetween {
                        start: "perspectives:\n\n".into(),
                        end: "\n\nNow, refine".into(),
                    },
                ),
            );
        }
        scripts.insert(
            "model-server".to_string(),
            MockScript::constant("Use the shared method."),
        );
        scripts
    }

    fn runner(scripts: BTreeMap<String, MockScript>) -> Runner {
        Runner::new(
            Arc::new(Gateway::with_scripts(scripts).recording()),
            BackendBinding::mock("model-server"),
        )
    }

    fn pool(names: &[&str]) -> ClientPool {
        ClientPool::new(names.iter().map(|n| profile(n)).collect()).unwrap()
    }

    fn cfg(k: usize, max_rounds: u32) -> RunConfig {
        RunConfig {
            k,
            max_rounds,
            ..RunConfig::default()
        }
    }

    #[test]
    fn combined_responses_use_labeled_blocks_and_skip_failures() {
        let ok_a =
            ClientResponse::success("alpha", Stage::Initial, 0, "answer one", Usage::default())
                .unwrap();
        let failed = ClientResponse::failure(
            "broken",
            Stage::Initial,
            0,
            ErrorRecord {
                kind: "timeout".into(),
                message: "call timed out".into(),
            },
            Usage::default(),
        )
        .unwrap();
        let ok_b =
            ClientResponse::success("beta", Stage::Initial, 0, "answer two", Usage::default())
                .unwrap();

        let combined = build_combined_responses(&[ok_a, failed, ok_b]);
        assert_eq!(
            combined,
            "### Response from alpha:\nanswer one\n\n### Response from beta:\nanswer two\n"
        );
    }

    #[test]
    fn prompt_set_validation_requires_each_placeholder_once() {
        PromptSet::default().validate().unwrap();
        let bad = PromptSet {
            summary_template: "no placeholder".into(),
            ..PromptSet::default()
        };
        assert!(bad.validate().is_err());
        let doubled = PromptSet {
            final_template: "{summary_response} {summary_response}".into(),
            ..PromptSet::default()
        };
        assert!(doubled.validate().is_err());
    }

    #[tokio::test]
    async fn run_produces_a_valid_transcript_with_expected_call_count() {
        let names = ["math", "code"];
        let runner = runner(converging_scripts(&names));
        let query = Query::language("What is 2 + 2?").unwrap();
        let transcript = runner
            .run_collaboration(&query, &pool(&names), &cfg(2, 1), None)
            .await
            .unwrap();

        assert_eq!(validate_transcript(&transcript), Vec::<String>::new());
        assert_eq!(transcript.rounds.len(), 2);
        assert_eq!(transcript.completed_rounds(), 1);
        // n + R(n+1) = 2 + 1·3 pipeline calls, and no judge existed.
        assert_eq!(runner.gateway.recorded_calls().len(), 5);

        // Totals match the per-record sum, and the ledger agrees on calls.
        let ledger_calls: u64 = runner
            .gateway
            .usage_by_binding()
            .values()
            .map(|u| u.call_count)
            .sum();
        assert_eq!(transcript.totals.call_count, 5);
        assert_eq!(ledger_calls, 5);
    }

    #[tokio::test]
    async fn zero_rounds_means_no_server_contact() {
        let names = ["solo"];
        let runner = runner(converging_scripts(&names));
        let query = Query::language("State your draft.").unwrap();
        let transcript = runner
            .run_collaboration(&query, &pool(&names), &cfg(1, 0), None)
            .await
            .unwrap();

        assert_eq!(transcript.rounds.len(), 1);
        assert!(transcript.rounds[0].guidance.is_none());
        assert_eq!(transcript.finals["solo"], "solo first draft");
        assert!(runner.gateway.calls_for_model("model-server").is_empty());
        assert_eq!(validate_transcript(&transcript), Vec::<String>::new());
    }

    #[tokio::test]
    async fn refinement_requests_carry_prior_answer_and_guidance() {
        let names = ["math"];
        let runner = runner(converging_scripts(&names));
        let query = Query::language("What is 2 + 2?").unwrap();
        runner
            .run_collaboration(&query, &pool(&names), &cfg(1, 1), None)
            .await
            .unwrap();

        let client_calls = runner.gateway.calls_for_model("model-math");
        assert_eq!(client_calls.len(), 2);
        let refinement = &client_calls[1].body;
        assert!(
            refinement.contains("math first draft"),
            "prior answer threads through"
        );
        assert!(
            refinement.contains("Use the shared method."),
            "guidance threads through"
        );
        assert!(refinement.contains("refine your original response"));

        let server_calls = runner.gateway.calls_for_model("model-server");
        assert_eq!(server_calls.len(), 1);
        assert!(server_calls[0].body.contains("Response from math"));
        assert!(server_calls[0].body.contains("What is 2 + 2?"));
    }

    #[tokio::test]
    async fn failed_client_is_recorded_but_excluded_downstream() {
        let mut scripts = converging_scripts(&["math", "code"]);
        scripts.insert(
            "model-flaky".to_string(),
            MockScript {
                rules: vec![],
                default: MockReply::Fail {
                    message: "backend offline".into(),
                },
            },
        );
        let names = ["math", "code", "flaky"];
        let runner = runner(scripts);
        let query = Query::language("What is 2 + 2?").unwrap();
        let transcript = runner
            .run_collaboration(&query, &pool(&names), &cfg(3, 1), None)
            .await
            .unwrap();

        let failed = &transcript.rounds[0].responses[2];
        assert_eq!(failed.client_name, "flaky");
        assert_eq!(failed.error.as_ref().unwrap().kind, "scripted");

        // The server never saw the failed client...
        let server_body = &runner.gateway.calls_for_model("model-server")[0].body;
        assert!(!server_body.contains("Response from flaky"));
        // ...it was never asked to refine...
        assert_eq!(runner.gateway.calls_for_model("model-flaky").len(), 1);
        // ...and it has no final.
        assert!(!transcript.finals.contains_key("flaky"));
        assert_eq!(transcript.finals.len(), 2);
        assert_eq!(validate_transcript(&transcript), Vec::<String>::new());
    }

    #[tokio::test]
    async fn unanimous_stage1_failure_aborts() {
        let mut scripts = BTreeMap::new();
        for name in ["a1", "a2"] {
            scripts.insert(
                format!("model-{name}"),
                MockScript {
                    rules: vec![],
                    default: MockReply::Fail {
                        message: "offline".into(),
                    },
                },
            );
        }
        scripts.insert("model-server".to_string(), MockScript::constant("unused"));
        let runner = runner(scripts);
        let query = Query::language("anything").unwrap();
        let err = runner
            .run_collaboration(&query, &pool(&["a1", "a2"]), &cfg(2, 1), None)
            .await
            .unwrap_err();
        assert!(matches!(err, PipelineError::AllClientsFailed));
    }

    #[tokio::test]
    async fn server_failure_aborts_with_server_error() {
        let mut scripts = converging_scripts(&["math"]);
        scripts.insert(
            "model-server".to_string(),
            MockScript {
                rules: vec![],
                default: MockReply::Fail {
                    message: "aggregator offline".into(),
                },
            },
        );
        let runner = runner(scripts);
        let query = Query::language("anything").unwrap();
        let err = runner
            .run_collaboration(&query, &pool(&["math"]), &cfg(1, 1), None)
            .await
            .unwrap_err();
        assert!(matches!(err, PipelineError::ServerFailed(_)));
    }

    #[tokio::test]
    async fn early_stop_halts_at_the_fixed_point() {
        let names = ["math", "code"];
        let runner = runner(converging_scripts(&names));
        let query = Query::language("What is 2 + 2?").unwrap();
        let config = RunConfig {
            k: 2,
            max_rounds: 5,
            early_stop: true,
            ..RunConfig::default()
        };
        let progress = RoundProgress::new();
        let transcript = runner
            .run_collaboration(&query, &pool(&names), &config, Some(&progress))
            .await
            .unwrap();

        // Round 1 replaces the drafts with the guidance; round 2 reproduces
        // round 1 exactly; rounds 3–5 never run.
        assert_eq!(transcript.completed_rounds(), 2);
        assert_eq!(progress.completed_rounds(), 2);
        assert_eq!(transcript.finals["math"], "Use the shared method.");
        assert_eq!(
            runner.gateway.calls_for_model("model-server").len(),
            2,
            "one aggregation per executed round"
        );
        assert_eq!(validate_transcript(&transcript), Vec::<String>::new());
    }

    #[tokio::test]
    async fn without_early_stop_all_rounds_run() {
        let names = ["math"];
        let runner = runner(converging_scripts(&names));
        let query = Query::language("What is 2 + 2?").unwrap();
        let transcript = runner
            .run_collaboration(&query, &pool(&names), &cfg(1, 3), None)
            .await
            .unwrap();
        assert_eq!(transcript.completed_rounds(), 3);
        assert_eq!(runner.gateway.calls_for_model("model-server").len(), 3);
    }

    #[tokio::test]
    async fn vision_queries_are_refused() {
        let runner = runner(converging_scripts(&["math"]));
        let query = Query::vision(
            "look at this",
            vec![crate::types::ImageRef::from_bytes("image/png", b"\x89PNG")],
        )
        .unwrap();
        let err = runner
            .run_collaboration(&query, &pool(&["math"]), &cfg(1, 1), None)
            .await
            .unwrap_err();
        assert!(matches!(err, PipelineError::Invariant(_)));
    }
}
