//! Domain types for collaboration runs and their persisted transcripts.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendBinding, Usage};
use crate::canonical::{self, duration_millis, SCHEMA_VERSION};

/// A structural rule some value failed to satisfy at construction time.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("invariant violated: {0}")]
pub struct InvariantError(pub String);

impl InvariantError {
    pub fn new(message: impl Into<String>) -> Self {
        Self(message.into())
    }
}

/// How a query should travel through the system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Text-only: route to k experts, aggregate on the server, refine.
    Language,
    /// Text plus images: two-step peer feedback across vision clients.
    VisionLanguage,
}

/// An image attachment, either on disk or carried inline as base64.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImageRef {
    Path { path: String },
    Bytes { media_type: String, b64: String },
}

impl ImageRef {
    pub fn path(path: impl Into<String>) -> Self {
        ImageRef::Path { path: path.into() }
    }

    /// Wrap raw image bytes; `media_type` should be `image/png` or `image/jpeg`.
    pub fn from_bytes(media_type: impl Into<String>, bytes: &[u8]) -> Self {
        use base64::Engine as _;
        ImageRef::Bytes {
            media_type: media_type.into(),
            b64: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
    }
}

/// A question posed to the pool, with optional image attachments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub attachments: Vec<ImageRef>,
    pub mode: QueryMode,
}

impl Query {
    /// Text-only query. Fails if `text` is empty after trimming.
    pub fn language(text: impl Into<String>) -> Result<Self, InvariantError> {
        Self::new(text, Vec::new(), QueryMode::Language)
    }

    /// Vision-language query; requires at least one attachment.
    pub fn vision(
        text: impl Into<String>,
        attachments: Vec<ImageRef>,
    ) -> Result<Self, InvariantError> {
        if attachments.is_empty() {
            return Err(InvariantError::new(
                "query attachments: vision_language query needs at least one image",
            ));
        }
        Self::new(text, attachments, QueryMode::VisionLanguage)
    }

    fn new(
        text: impl Into<String>,
        attachments: Vec<ImageRef>,
        mode: QueryMode,
    ) -> Result<Self, InvariantError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(InvariantError::new("query text: empty after trimming"));
        }
        Ok(Query {
            id: uuid::Uuid::new_v4().to_string(),
            text,
            attachments,
            mode,
        })
    }
}

/// One specialized client: a persona prompt bound to a concrete backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub name: String,
    pub role_prompt: String,
    pub backend: BackendBinding,
    #[serde(default)]
    pub domain_tags: Vec<String>,
}

impl ClientProfile {
    pub fn new(
        name: impl Into<String>,
        role_prompt: impl Into<String>,
        backend: BackendBinding,
    ) -> Result<Self, InvariantError> {
        let profile = ClientProfile {
            name: name.into(),
            role_prompt: role_prompt.into(),
            backend,
            domain_tags: Vec::new(),
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn with_tags(mut self, tags: impl IntoIterator<Item = impl Into<String>>) -> Self {
        self.domain_tags = tags.into_iter().map(Into::into).collect();
        self
    }

    pub fn validate(&self) -> Result<(), InvariantError> {
        if self.name.trim().is_empty() {
            return Err(InvariantError::new("client name: empty after trimming"));
        }
        if self.role_prompt.trim().is_empty() {
            return Err(InvariantError::new(format!(
                "client role_prompt: empty for '{}'",
                self.name
            )));
        }
        self.backend.validate()
    }
}

/// The set of clients a run can draw from. Names are unique within a pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct ClientPool {
    profiles: Vec<ClientProfile>,
}

impl ClientPool {
    pub fn new(profiles: Vec<ClientProfile>) -> Result<Self, InvariantError> {
        let mut seen = BTreeSet::new();
        for profile in &profiles {
            profile.validate()?;
            if !seen.insert(profile.name.clone()) {
                return Err(InvariantError::new(format!(
                    "client pool uniqueness: duplicate name '{}'",
                    profile.name
                )));
            }
        }
        Ok(ClientPool { profiles })
    }

    pub fn profiles(&self) -> &[ClientProfile] {
        &self.profiles
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ClientProfile> {
        self.profiles.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClientProfile> {
        self.profiles.iter()
    }

    /// A copy of the pool with one client removed (for leave-one-out runs).
    pub fn without(&self, name: &str) -> Self {
        ClientPool {
            profiles: self
                .profiles
                .iter()
                .filter(|p| p.name != name)
                .cloned()
                .collect(),
        }
    }

    /// Clients whose binding can accept image content.
    pub fn vision_profiles(&self) -> Vec<ClientProfile> {
        self.profiles
            .iter()
            .filter(|p| p.backend.vision)
            .cloned()
            .collect()
    }
}

impl<'de> Deserialize<'de> for ClientPool {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let profiles = Vec::<ClientProfile>::deserialize(de)?;
        ClientPool::new(profiles).map_err(serde::de::Error::custom)
    }
}

/// How the participating clients were chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    /// A judge model named the clients.
    Judge,
    /// Lexical-similarity ranking (also used when the judge is absent or fails).
    Fallback,
}

/// The resolved participant list for one run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    /// Requested participant count (the selection may be smaller only when
    /// the pool itself is smaller).
    pub k: usize,
    /// Chosen clients, in ranking order.
    pub selected: Vec<ClientProfile>,
    pub method: SelectionMethod,
    /// Raw judge reply, kept for audit when `method` is `Judge`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_raw: Option<String>,
}

impl Selection {
    pub fn new(
        k: usize,
        selected: Vec<ClientProfile>,
        method: SelectionMethod,
        judge_raw: Option<String>,
    ) -> Result<Self, InvariantError> {
        if selected.is_empty() {
            return Err(InvariantError::new("selection size: empty"));
        }
        if selected.len() > k {
            return Err(InvariantError::new(format!(
                "selection size: {} exceeds k = {}",
                selected.len(),
                k
            )));
        }
        let mut seen = BTreeSet::new();
        for profile in &selected {
            if !seen.insert(profile.name.clone()) {
                return Err(InvariantError::new(format!(
                    "selection uniqueness: duplicate name '{}'",
                    profile.name
                )));
            }
        }
        Ok(Selection {
            k,
            selected,
            method,
            judge_raw,
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.selected.iter().map(|p| p.name.as_str()).collect()
    }
}

/// Which leg of the pipeline produced a response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Independent first answer (round 0).
    Initial,
    /// Answer revised against guidance (rounds ≥ 1).
    Refined,
}

/// A failure preserved in the transcript instead of text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    /// Stable machine-readable failure class (e.g. `timeout`, `remote`).
    pub kind: String,
    pub message: String,
}

/// One client's output (or failure) at one stage of one round.
///
/// Exactly one of `text` (non-empty) and `error` is populated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientResponse {
    pub client_name: String,
    pub stage: Stage,
    pub round: u32,
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorRecord>,
    #[serde(default)]
    pub usage: Usage,
}

impl ClientResponse {
    pub fn success(
        client_name: impl Into<String>,
        stage: Stage,
        round: u32,
        text: impl Into<String>,
        usage: Usage,
    ) -> Result<Self, InvariantError> {
        let text = text.into();
        if text.is_empty() {
            return Err(InvariantError::new(
                "response exclusivity: successful response with empty text",
            ));
        }
        Self::check_stage(stage, round)?;
        Ok(ClientResponse {
            client_name: client_name.into(),
            stage,
            round,
            text,
            error: None,
            usage,
        })
    }

    pub fn failure(
        client_name: impl Into<String>,
        stage: Stage,
        round: u32,
        error: ErrorRecord,
        usage: Usage,
    ) -> Result<Self, InvariantError> {
        Self::check_stage(stage, round)?;
        Ok(ClientResponse {
            client_name: client_name.into(),
            stage,
            round,
            text: String::new(),
            error: Some(error),
            usage,
        })
    }

    fn check_stage(stage: Stage, round: u32) -> Result<(), InvariantError> {
        match (stage, round) {
            (Stage::Initial, 0) | (Stage::Refined, 1..) => Ok(()),
            (Stage::Initial, r) => Err(InvariantError::new(format!(
                "round monotonicity: initial response tagged round {r}"
            ))),
            (Stage::Refined, 0) => Err(InvariantError::new(
                "round monotonicity: refined response tagged round 0",
            )),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Pointer from a guidance packet back to a response it summarized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRef {
    pub client_name: String,
    pub stage: Stage,
    pub round: u32,
}

/// The server's synthesized takeaways for one refinement round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidancePacket {
    /// The refinement round this guidance feeds (1-based).
    pub round: u32,
    pub text: String,
    /// The client responses the synthesis drew from.
    pub source_responses: Vec<ResponseRef>,
    #[serde(default)]
    pub usage: Usage,
}

impl GuidancePacket {
    pub fn new(
        round: u32,
        text: impl Into<String>,
        source_responses: Vec<ResponseRef>,
        usage: Usage,
    ) -> Result<Self, InvariantError> {
        let text = text.into();
        if round == 0 {
            return Err(InvariantError::new(
                "guidance placement: guidance cannot feed round 0",
            ));
        }
        if text.is_empty() {
            return Err(InvariantError::new("guidance text: empty"));
        }
        if source_responses.is_empty() {
            return Err(InvariantError::new("guidance lineage: no source responses"));
        }
        Ok(GuidancePacket {
            round,
            text,
            source_responses,
            usage,
        })
    }
}

/// Everything recorded for one round: the responses produced in it, plus the
/// guidance synthesized *from* them (feeding the next round), when any.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub responses: Vec<ClientResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance: Option<GuidancePacket>,
}

/// Hard ceiling on refinement rounds, independent of configuration.
pub const MAX_ROUNDS_CAP: u32 = 16;

/// Tunable knobs for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Number of experts to select.
    pub k: usize,
    /// Refinement rounds after the initial answers (0 = no server pass).
    pub max_rounds: u32,
    /// Stop early once every refined answer repeats its previous round.
    pub early_stop: bool,
    #[serde(with = "duration_millis", rename = "per_call_timeout_ms")]
    pub per_call_timeout: Duration,
    /// Extra attempts after the first, for transient backend failures.
    pub max_retries: u32,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Seed for deterministic jitter and tie-breaking in tests.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            k: 3,
            max_rounds: 1,
            early_stop: false,
            per_call_timeout: Duration::from_secs(30),
            max_retries: 2,
            temperature: 0.0,
            max_tokens: 1024,
            seed: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), InvariantError> {
        if self.k == 0 {
            return Err(InvariantError::new("run config: k must be at least 1"));
        }
        if self.max_rounds > MAX_ROUNDS_CAP {
            return Err(InvariantError::new(format!(
                "run config: max_rounds {} exceeds cap {MAX_ROUNDS_CAP}",
                self.max_rounds
            )));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(InvariantError::new(
                "run config: temperature must be finite and non-negative",
            ));
        }
        if self.max_tokens == 0 {
            return Err(InvariantError::new(
                "run config: max_tokens must be at least 1",
            ));
        }
        if self.per_call_timeout.is_zero() {
            return Err(InvariantError::new(
                "run config: per_call_timeout must be positive",
            ));
        }
        Ok(())
    }
}

/// The full recipe a transcript was produced under, embedded so a stored run
/// is self-describing and replayable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub run: RunConfig,
    pub summary_template: String,
    pub final_template: String,
    pub aggregation_system_prompt: String,
    pub vlm_feedback_instruction: String,
}

/// Complete record of one collaboration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollaborationTranscript {
    /// Always [`SCHEMA_VERSION`].
    pub schema: String,
    pub id: String,
    pub query: Query,
    pub selection: Selection,
    /// `rounds[0]` holds the initial answers; `rounds[r]` (r ≥ 1) holds the
    /// round-r refinements. Guidance feeding round r+1 lives on `rounds[r]`.
    pub rounds: Vec<RoundRecord>,
    /// Latest successful answer per client that succeeded at least once.
    pub finals: BTreeMap<String, String>,
    /// Sum of all usage recorded in rounds and guidance packets.
    pub totals: Usage,
    pub config_snapshot: ConfigSnapshot,
}

impl CollaborationTranscript {
    /// Canonical JSON line for persistence.
    pub fn encode(&self) -> serde_json::Result<String> {
        canonical::to_canonical_json(self)
    }

    pub fn decode(text: &str) -> serde_json::Result<Self> {
        canonical::from_json(text)
    }

    /// Guidance packet of the highest round, if any round produced one.
    pub fn final_guidance(&self) -> Option<&GuidancePacket> {
        self.rounds.iter().rev().find_map(|r| r.guidance.as_ref())
    }

    /// Number of refinement rounds actually performed.
    pub fn completed_rounds(&self) -> u32 {
        (self.rounds.len().saturating_sub(1)) as u32
    }
}

/// Check every structural rule a well-formed transcript must satisfy.
///
/// Returns one human-readable violation per broken rule; an empty vector
/// means the transcript is valid. Each message names the rule and the path
/// of the offending element.
pub fn validate_transcript(t: &CollaborationTranscript) -> Vec<String> {
    let mut violations = Vec::new();

    if t.schema != SCHEMA_VERSION {
        violations.push(format!(
            "schema: expected '{SCHEMA_VERSION}', found '{}'",
            t.schema
        ));
    }
    if t.query.text.trim().is_empty() {
        violations.push("query text: empty after trimming".to_string());
    }

    if t.selection.selected.is_empty() {
        violations.push("selection size: empty".to_string());
    }
    if t.selection.selected.len() > t.selection.k {
        violations.push(format!(
            "selection size: {} exceeds k = {}",
            t.selection.selected.len(),
            t.selection.k
        ));
    }
    let mut selected_names = BTreeSet::new();
    for profile in &t.selection.selected {
        if !selected_names.insert(profile.name.as_str()) {
            violations.push(format!(
                "selection uniqueness: duplicate name '{}'",
                profile.name
            ));
        }
    }

    if t.rounds.is_empty() {
        violations.push("round monotonicity: transcript has no rounds".to_string());
    }

    let mut computed = Usage::default();
    for (idx, record) in t.rounds.iter().enumerate() {
        for (ri, resp) in record.responses.iter().enumerate() {
            let path = format!("rounds[{idx}].responses[{ri}]");
            let (want_stage, want_round) = if idx == 0 {
                (Stage::Initial, 0)
            } else {
                (Stage::Refined, idx as u32)
            };
            if resp.stage != want_stage || resp.round != want_round {
                violations.push(format!(
                    "round monotonicity: {path} is {:?}/round {} (expected {:?}/round {})",
                    resp.stage, resp.round, want_stage, want_round
                ));
            }
            match (&resp.error, resp.text.is_empty()) {
                (Some(_), false) => violations.push(format!(
                    "response exclusivity: {path} carries both text and an error"
                )),
                (None, true) => violations.push(format!(
                    "response exclusivity: {path} carries neither text nor an error"
                )),
                _ => {}
            }
            if !selected_names.contains(resp.client_name.as_str()) {
                violations.push(format!(
                    "response membership: {path} names unselected client '{}'",
                    resp.client_name
                ));
            }
            computed += resp.usage;
        }

        if let Some(guidance) = &record.guidance {
            let path = format!("rounds[{idx}].guidance");
            if t.config_snapshot.run.max_rounds == 0 {
                violations.push(format!(
                    "guidance presence: {path} exists but max_rounds = 0"
                ));
            }
            let expected = idx as u32 + 1;
            if guidance.round != expected {
                violations.push(format!(
                    "guidance placement: {path} feeds round {} (expected {expected})",
                    guidance.round
                ));
            }
            if guidance.text.is_empty() {
                violations.push(format!("guidance text: {path} is empty"));
            }
            for (si, source) in guidance.source_responses.iter().enumerate() {
                let resolved = t.rounds.iter().take(idx + 1).any(|r| {
                    r.responses.iter().any(|resp| {
                        resp.is_ok()
                            && resp.client_name == source.client_name
                            && resp.stage == source.stage
                            && resp.round == source.round
                    })
                });
                if !resolved {
                    violations.push(format!(
                        "guidance lineage: {path}.source_responses[{si}] does not resolve \
                         to a successful response ('{}' {:?}/round {})",
                        source.client_name, source.stage, source.round
                    ));
                }
            }
            computed += guidance.usage;
        }
    }

    // Finals: exactly the selected clients that succeeded at least once.
    let succeeded: BTreeSet<&str> = t
        .rounds
        .iter()
        .flat_map(|r| r.responses.iter())
        .filter(|r| r.is_ok())
        .map(|r| r.client_name.as_str())
        .collect();
    for name in &selected_names {
        if succeeded.contains(name) && !t.finals.contains_key(*name) {
            violations.push(format!(
                "finals completeness: missing entry for client '{name}'"
            ));
        }
    }
    for name in t.finals.keys() {
        if !selected_names.contains(name.as_str()) || !succeeded.contains(name.as_str()) {
            violations.push(format!(
                "finals completeness: unexpected entry for client '{name}'"
            ));
        }
    }

    if computed != t.totals {
        violations.push(format!(
            "usage additivity: totals {:?} do not equal the recorded sum {:?}",
            t.totals, computed
        ));
    }

    violations
}
