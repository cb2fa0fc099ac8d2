//! The vision-language collaboration pipeline.
//!
//! VLM collaboration is a two-step peer exchange with no server model: the
//! query (text + images) goes to every vision client independently, then the
//! concatenated candidate answers are fed back to each surviving client,
//! which produces its final answer with both the candidates and the original
//! images in view.

use std::collections::BTreeMap;

use futures::future::join_all;

use crate::backend::{CallParams, Message};
use crate::canonical::SCHEMA_VERSION;
use crate::orchestrator::{
    build_combined_responses, into_response, transcript_totals, PipelineError, Runner,
};
use crate::types::{
    ClientProfile, ClientResponse, CollaborationTranscript, InvariantError, Query, QueryMode,
    RoundRecord, RunConfig, Selection, SelectionMethod, Stage,
};

/// Closing instruction of the feedback prompt.
pub const DEFAULT_VLM_FEEDBACK_INSTRUCTION: &str =
    "Considering these candidate answers and the image, give your final answer.";

/// Fixed header introducing the candidate blocks in the feedback prompt.
/// Structural (not configurable), so replays can key on it reliably.
pub const VLM_CANDIDATES_HEADER: &str = "Here are candidate answers from multiple assistants:";

/// Step-two responses plus the per-client final answers (step-two text when
/// it succeeded, otherwise the client's step-one answer).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VlmReintegration {
    pub responses: Vec<ClientResponse>,
    pub finals: BTreeMap<String, String>,
}

/// The prompt fed back to every surviving client in step two: the question,
/// every candidate answer in labeled blocks, and the closing instruction.
pub fn build_vlm_feedback_prompt(
    query: &Query,
    responses: &[ClientResponse],
    instruction: &str,
) -> String {
    format!(
        "{}\n\n{VLM_CANDIDATES_HEADER}\n\n{}\n{instruction}",
        query.text,
        build_combined_responses(responses),
    )
}

impl Runner {
    /// Step one: the full multimodal query goes to every client at once.
    ///
    /// Every client must be vision-capable; a mismatch fails the whole run
    /// before any backend is contacted.
    pub async fn vlm_distribute(
        &self,
        query: &Query,
        clients: &[ClientProfile],
        params: &CallParams,
    ) -> Result<Vec<ClientResponse>, PipelineError> {
        if query.mode != QueryMode::VisionLanguage {
            return Err(InvariantError::new(
                "query mode: vlm_distribute handles vision_language queries",
            )
            .into());
        }
        if clients.is_empty() {
            return Err(InvariantError::new("vlm clients: empty").into());
        }
        for client in clients {
            if !client.backend.vision {
                return Err(PipelineError::Backend(
                    crate::backend::BackendError::CapabilityMismatch(
                        client.backend.model_id.clone(),
                    ),
                ));
            }
        }

        let calls = clients.iter().map(|profile| {
            let messages = vec![
                Message::system(&profile.role_prompt),
                Message::user_with_images(&query.text, &query.attachments),
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

    /// Step two: feed everyone's candidate answers (and the images) back to
    /// each client that survived step one.
    pub async fn vlm_reintegrate(
        &self,
        query: &Query,
        clients: &[ClientProfile],
        step_one: &[ClientResponse],
        params: &CallParams,
    ) -> Result<VlmReintegration, PipelineError> {
        let survivors: BTreeMap<&str, &ClientResponse> = step_one
            .iter()
            .filter(|r| r.is_ok())
            .map(|r| (r.client_name.as_str(), r))
            .collect();
        if survivors.is_empty() {
            return Err(PipelineError::AllClientsFailed);
        }

        let feedback = build_vlm_feedback_prompt(query, step_one, &self.vlm_feedback_instruction);
        let calls = clients
            .iter()
            .filter(|profile| survivors.contains_key(profile.name.as_str()))
            .map(|profile| {
                let messages = vec![Message::user_with_images(&feedback, &query.attachments)];
                async move {
                    let outcome = self
                        .gateway
                        .complete(&profile.backend, &messages, params)
                        .await;
                    into_response(&profile.name, Stage::Refined, 1, outcome)
                }
            });
        let responses = join_all(calls).await;

        // A step-two failure keeps the client's step-one answer as final.
        let mut finals = BTreeMap::new();
        for (name, initial) in &survivors {
            let final_text = responses
                .iter()
                .find(|r| r.is_ok() && r.client_name == **name)
                .map(|r| r.text.clone())
                .unwrap_or_else(|| initial.text.clone());
            finals.insert((*name).to_string(), final_text);
        }
        Ok(VlmReintegration { responses, finals })
    }

    /// Run the two-step pipeline end to end and assemble the transcript.
    ///
    /// The transcript records the given clients as a whole-pool selection;
    /// no judge and no server model are involved.
    pub async fn run_vlm(
        &self,
        query: &Query,
        clients: &[ClientProfile],
        cfg: &RunConfig,
    ) -> Result<CollaborationTranscript, PipelineError> {
        cfg.validate()?;
        let params = CallParams::from(cfg);
        let step_one = self.vlm_distribute(query, clients, &params).await?;
        let reintegrated = self
            .vlm_reintegrate(query, clients, &step_one, &params)
            .await?;

        let selection = Selection::new(
            clients.len(),
            clients.to_vec(),
            SelectionMethod::Fallback,
            None,
        )
        .map_err(PipelineError::Invariant)?;
        let rounds = vec![
            RoundRecord {
                responses: step_one,
                guidance: None,
            },
            RoundRecord {
                responses: reintegrated.responses,
                guidance: None,
            },
        ];
        let totals = transcript_totals(&rounds);
        let transcript = CollaborationTranscript {
            schema: SCHEMA_VERSION.to_string(),
            id: uuid::Uuid::new_v4().to_string(),
            query: query.clone(),
            selection,
            rounds,
            finals: reintegrated.finals,
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
