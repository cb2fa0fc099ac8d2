//! Transcript persistence and replay.
//!
//! Transcripts live as canonical-JSON lines in `transcripts.jsonl` under the
//! store's data directory. Appends rewrite the file through a temp file and
//! an atomic rename, so a crash can never leave a torn line. Loading
//! tolerates foreign corruption: damaged lines are skipped while searching
//! and only reported when they make the answer uncertain.
//!
//! Replay reconstructs a stored run against scripted mocks derived from the
//! transcript itself: every client (and the server) is scripted to reproduce
//! its recorded replies, so a replayed run must retrace the original texts
//! unless a caller-supplied override changes the world.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::backend::{BackendBinding, Gateway, MockReply, MockRule, MockScript};
use crate::canonical;
use crate::orchestrator::{build_combined_responses, PipelineError, PromptSet, Runner};
use crate::types::{
    validate_transcript, ClientPool, ClientProfile, ClientResponse, CollaborationTranscript,
    QueryMode,
};
use crate::vlm::VLM_CANDIDATES_HEADER;

/// Reserved override key addressing the aggregation server during replay.
/// A client that happens to share this name takes precedence.
pub const SERVER_OVERRIDE_KEY: &str = "server";

const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("transcript '{0}' not found")]
    NotFound(String),
    #[error("corrupt transcript data at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("refusing to persist an invalid transcript: {0}")]
    Invalid(String),
    #[error("encode: {0}")]
    Encode(#[from] serde_json::Error),
    #[error(transparent)]
    Replay(#[from] PipelineError),
}

/// File-backed transcript store rooted at one data directory.
pub struct Store {
    data_dir: PathBuf,
    append_lock: Mutex<()>,
}

impl Store {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Store {
            data_dir: data_dir.into(),
            append_lock: Mutex::new(()),
        }
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn transcripts_path(&self) -> PathBuf {
        self.data_dir.join(TRANSCRIPTS_FILE)
    }

    /// Append one transcript as a canonical JSON line and return the byte
    /// offset its line starts at. Refuses transcripts that fail validation.
    pub fn append_transcript(&self, t: &CollaborationTranscript) -> Result<u64, StoreError> {
        let violations = validate_transcript(t);
        if !violations.is_empty() {
            return Err(StoreError::Invalid(violations.join("; ")));
        }
        let line = t.encode()?;

        let _guard = self.append_lock.lock().unwrap();
        fs::create_dir_all(&self.data_dir)?;
        let path = self.transcripts_path();
        let existing = match fs::read(&path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let offset = existing.len() as u64;

        let tmp = self
            .data_dir
            .join(format!("{TRANSCRIPTS_FILE}.tmp-{}", uuid::Uuid::new_v4()));
        {
            let mut file = fs::File::create(&tmp)?;
            file.write_all(&existing)?;
            file.write_all(line.as_bytes())?;
            file.write_all(b"\n")?;
            file.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        if let Ok(dir) = fs::File::open(&self.data_dir) {
            let _ = dir.sync_all();
        }
        Ok(offset)
    }

    /// Find a transcript by id, skipping over damaged lines.
    ///
    /// Returns `Corrupt` when the requested transcript itself fails
    /// validation, or when it is absent from a file that contains damage
    /// (the damaged line might have been it). A clean miss is `NotFound`.
    pub fn load_transcript(&self, id: &str) -> Result<CollaborationTranscript, StoreError> {
        let path = self.transcripts_path();
        let raw = match fs::read_to_string(&path) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound(id.to_string()))
            }
            Err(e) => return Err(e.into()),
        };

        let mut first_damage: Option<(usize, String)> = None;
        for (index, line) in raw.lines().enumerate() {
            let line_no = index + 1;
            if line.trim().is_empty() {
                continue;
            }
            match CollaborationTranscript::decode(line) {
                Ok(t) if t.id == id => {
                    let violations = validate_transcript(&t);
                    if violations.is_empty() {
                        return Ok(t);
                    }
                    return Err(StoreError::Corrupt {
                        line: line_no,
                        reason: violations.join("; "),
                    });
                }
                Ok(_) => {}
                Err(e) => {
                    first_damage.get_or_insert((line_no, e.to_string()));
                }
            }
        }
        match first_damage {
            Some((line, reason)) => Err(StoreError::Corrupt { line, reason }),
            None => Err(StoreError::NotFound(id.to_string())),
        }
    }

    /// Write an arbitrary run artifact as canonical JSON under
    /// `manifests/<name>.json`, atomically. Returns the final path.
    pub fn write_manifest<T: serde::Serialize>(
        &self,
        name: &str,
        value: &T,
    ) -> Result<PathBuf, StoreError> {
        let dir = self.data_dir.join("manifests");
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{name}.json"));
        let tmp = dir.join(format!("{name}.json.tmp-{}", uuid::Uuid::new_v4()));
        let body = canonical::to_canonical_json(value)?;
        {
            let mut file = fs::File::create(&tmp)?;
            file.write_all(body.as_bytes())?;
            file.write_all(b"\n")?;
            file.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    /// Re-execute a stored run against mocks scripted from the transcript
    /// itself, returning the freshly produced transcript.
    ///
    /// `overrides` replaces the derived script for the named client (or the
    /// server via [`SERVER_OVERRIDE_KEY`]) to ask counterfactual questions;
    /// with no overrides the replay must reproduce every recorded text, which
    /// [`replay_divergences`] can verify.
    pub async fn replay(
        &self,
        id: &str,
        overrides: &BTreeMap<String, MockScript>,
    ) -> Result<CollaborationTranscript, StoreError> {
        let stored = self.load_transcript(id)?;
        let plan = ReplayPlan::from_transcript(&stored, overrides);

        let runner = Runner {
            gateway: Arc::new(Gateway::with_scripts(plan.scripts)),
            server: plan.server,
            judge: None,
            prompts: PromptSet {
                summary_template: stored.config_snapshot.summary_template.clone(),
                final_template: stored.config_snapshot.final_template.clone(),
            },
            aggregation_system_prompt: stored.config_snapshot.aggregation_system_prompt.clone(),
            vlm_feedback_instruction: stored.config_snapshot.vlm_feedback_instruction.clone(),
        };
        let cfg = stored.config_snapshot.run.clone();

        let replayed = match stored.query.mode {
            QueryMode::Language => {
                let pool = ClientPool::new(plan.profiles).map_err(PipelineError::Invariant)?;
                runner
                    .run_collaboration(&stored.query, &pool, &cfg, None)
                    .await?
            }
            QueryMode::VisionLanguage => {
                runner.run_vlm(&stored.query, &plan.profiles, &cfg).await?
            }
        };
        Ok(replayed)
    }
}

/// Mock world derived from one transcript: one scripted binding per selected
/// client plus a scripted aggregation server.
struct ReplayPlan {
    profiles: Vec<ClientProfile>,
    scripts: BTreeMap<String, MockScript>,
    server: BackendBinding,
}

impl ReplayPlan {
    fn from_transcript(
        stored: &CollaborationTranscript,
        overrides: &BTreeMap<String, MockScript>,
    ) -> Self {
        let mut scripts = BTreeMap::new();
        let mut profiles = Vec::with_capacity(stored.selection.selected.len());

        let mut client_rules: BTreeMap<String, Vec<MockRule>> = BTreeMap::new();
        let mut server_rules: Vec<MockRule> = Vec::new();

        match stored.query.mode {
            QueryMode::Language => {
                // Walk the recorded rounds, reconstructing what each client
                // and the server were asked and what they answered.
                let mut latest: BTreeMap<String, ClientResponse> = latest_of(&stored.rounds[0]);
                for round in 1..stored.rounds.len() {
                    let Some(guidance) = stored.rounds[round - 1].guidance.as_ref() else {
                        break;
                    };
                    let inputs: Vec<ClientResponse> = stored
                        .selection
                        .selected
                        .iter()
                        .filter_map(|p| latest.get(&p.name).cloned())
                        .collect();
                    server_rules.push(MockRule {
                        system_contains: None,
                        user_contains: Some(build_combined_responses(&inputs)),
                        reply: MockReply::Text(guidance.text.clone()),
                    });
                    for resp in &stored.rounds[round].responses {
                        client_rules
                            .entry(resp.client_name.clone())
                            .or_default()
                            .push(MockRule {
                                system_contains: None,
                                user_contains: Some(guidance.text.clone()),
                                reply: recorded_reply(resp),
                            });
                    }
                    for resp in stored.rounds[round].responses.iter().filter(|r| r.is_ok()) {
                        latest.insert(resp.client_name.clone(), resp.clone());
                    }
                }
            }
            QueryMode::VisionLanguage => {
                // Step two is recognized by the structural candidates header.
                if let Some(step_two) = stored.rounds.get(1) {
                    for resp in &step_two.responses {
                        client_rules
                            .entry(resp.client_name.clone())
                            .or_default()
                            .push(MockRule {
                                system_contains: None,
                                user_contains: Some(VLM_CANDIDATES_HEADER.to_string()),
                                reply: recorded_reply(resp),
                            });
                    }
                }
            }
        }

        for profile in &stored.selection.selected {
            // Later rounds first: a later prompt can contain an earlier
            // guidance text as a substring, never the other way around.
            let mut rules = client_rules.remove(&profile.name).unwrap_or_default();
            rules.reverse();
            let default = stored.rounds[0]
                .responses
                .iter()
                .find(|r| r.client_name == profile.name)
                .map(recorded_reply)
                .unwrap_or(MockReply::Fail {
                    message: "replay: client absent from the initial round".into(),
                });
            let script = overrides
                .get(&profile.name)
                .cloned()
                .unwrap_or(MockScript { rules, default });

            let model_id = format!("replay-{}", profile.name);
            scripts.insert(model_id.clone(), script);
            let mut binding = BackendBinding::mock(model_id);
            binding.vision = profile.backend.vision;
            profiles.push(ClientProfile {
                name: profile.name.clone(),
                role_prompt: profile.role_prompt.clone(),
                backend: binding,
                domain_tags: profile.domain_tags.clone(),
            });
        }

        server_rules.reverse();
        // Counterfactual aggregation input (a client override changed the
        // combined block) falls back to the earliest recorded guidance: the
        // server's recorded behavior stays fixed so the override's effect is
        // isolated to the clients. A guidance-free transcript never called
        // the server, so the default is unreachable and may fail loudly.
        let server_default = stored
            .rounds
            .first()
            .and_then(|r| r.guidance.as_ref())
            .map(|g| MockReply::Text(g.text.clone()))
            .unwrap_or(MockReply::Fail {
                message: "replay: aggregation input did not match any recorded round".into(),
            });
        let server_script = overrides
            .get(SERVER_OVERRIDE_KEY)
            .filter(|_| {
                !stored
                    .selection
                    .selected
                    .iter()
                    .any(|p| p.name == SERVER_OVERRIDE_KEY)
            })
            .cloned()
            .unwrap_or(MockScript {
                rules: server_rules,
                default: server_default,
            });
        scripts.insert("replay-aggregation-server".to_string(), server_script);

        ReplayPlan {
            profiles,
            scripts,
            server: BackendBinding::mock("replay-aggregation-server"),
        }
    }
}

fn latest_of(round: &crate::types::RoundRecord) -> BTreeMap<String, ClientResponse> {
    round
        .responses
        .iter()
        .filter(|r| r.is_ok())
        .map(|r| (r.client_name.clone(), r.clone()))
        .collect()
}

fn recorded_reply(resp: &ClientResponse) -> MockReply {
    if resp.is_ok() {
        MockReply::Text(resp.text.clone())
    } else {
        MockReply::Fail {
            message: resp
                .error
                .as_ref()
                .map(|e| e.message.clone())
                .unwrap_or_else(|| "recorded failure".into()),
        }
    }
}

/// Compare a replayed transcript against the original on everything replay
/// promises to reproduce: final texts, round structure, response texts and
/// outcomes, and guidance texts. Identifiers, usage figures, and selection
/// provenance are free to differ. An empty result means the replay is
/// faithful.
pub fn replay_divergences(
    original: &CollaborationTranscript,
    replayed: &CollaborationTranscript,
) -> Vec<String> {
    let mut diffs = Vec::new();

    for (name, text) in &original.finals {
        match replayed.finals.get(name) {
            None => diffs.push(format!("finals: '{name}' missing from replay")),
            Some(other) if other != text => diffs.push(format!("finals: '{name}' text differs")),
            _ => {}
        }
    }
    for name in replayed.finals.keys() {
        if !original.finals.contains_key(name) {
            diffs.push(format!("finals: unexpected '{name}' in replay"));
        }
    }

    if original.rounds.len() != replayed.rounds.len() {
        diffs.push(format!(
            "rounds: {} recorded vs {} replayed",
            original.rounds.len(),
            replayed.rounds.len()
        ));
        return diffs;
    }
    for (idx, (ours, theirs)) in original.rounds.iter().zip(&replayed.rounds).enumerate() {
        match (&ours.guidance, &theirs.guidance) {
            (Some(a), Some(b)) if a.text != b.text => {
                diffs.push(format!("rounds[{idx}].guidance: text differs"))
            }
            (Some(_), None) => diffs.push(format!("rounds[{idx}].guidance: missing from replay")),
            (None, Some(_)) => diffs.push(format!("rounds[{idx}].guidance: unexpected in replay")),
            _ => {}
        }
        if ours.responses.len() != theirs.responses.len() {
            diffs.push(format!(
                "rounds[{idx}]: {} responses recorded vs {} replayed",
                ours.responses.len(),
                theirs.responses.len()
            ));
            continue;
        }
        for (a, b) in ours.responses.iter().zip(&theirs.responses) {
            if a.client_name != b.client_name || a.stage != b.stage || a.round != b.round {
                diffs.push(format!(
                    "rounds[{idx}]: response identity differs ('{}' vs '{}')",
                    a.client_name, b.client_name
                ));
            } else if a.is_ok() != b.is_ok() {
                diffs.push(format!(
                    "rounds[{idx}]: '{}' outcome differs (ok vs error)",
                    a.client_name
                ));
            } else if a.text != b.text {
                diffs.push(format!("rounds[{idx}]: '{}' text differs", a.client_name));
            }
        }
    }
    diffs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ImageRef, Query, RunConfig};

    fn store() -> (tempfile::TempDir, Store) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::new(dir.path());
        (dir, store)
    }

    fn profile(name: &str) -> ClientProfile {
        ClientProfile::new(
            name,
            format!("You are a helpful {name} assistant."),
            BackendBinding::mock(format!("model-{name}")),
        )
        .unwrap()
    }

    /// A deterministic two-client, two-round run against converging mocks.
    async fn sample_run(max_rounds: u32, early_stop: bool) -> CollaborationTranscript {
        let names = ["math", "code"];
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
        let runner = Runner::new(
            Arc::new(Gateway::with_scripts(scripts)),
            BackendBinding::mock("model-server"),
        );
        let pool = ClientPool::new(names.iter().map(|n| profile(n)).collect()).unwrap();
        let cfg = RunConfig {
            k: 2,
            max_rounds,
            early_stop,
            ..RunConfig::default()
        };
        runner
            .run_collaboration(
                &Query::language("What is 2 + 2?").unwrap(),
                &pool,
                &cfg,
                None,
            )
            .await
            .unwrap()
    }

    #[tokio::test]
    async fn append_then_load_round_trips_by_value_and_bytes() {
        let (_dir, store) = store();
        let t = sample_run(1, false).await;
        let offset = store.append_transcript(&t).unwrap();
        assert_eq!(offset, 0);

        let loaded = store.load_transcript(&t.id).unwrap();
        assert_eq!(loaded, t);
        assert_eq!(loaded.encode().unwrap(), t.encode().unwrap());
    }

    #[tokio::test]
    async fn appends_accumulate_and_offsets_advance() {
        let (_dir, store) = store();
        let first = sample_run(1, false).await;
        let second = sample_run(2, false).await;
        let off1 = store.append_transcript(&first).unwrap();
        let off2 = store.append_transcript(&second).unwrap();
        assert_eq!(off1, 0);
        assert_eq!(off2, first.encode().unwrap().len() as u64 + 1);

        assert_eq!(store.load_transcript(&first.id).unwrap(), first);
        assert_eq!(store.load_transcript(&second.id).unwrap(), second);

        let file = fs::read_to_string(store.transcripts_path()).unwrap();
        assert_eq!(file.lines().count(), 2);
    }

    #[tokio::test]
    async fn damaged_lines_are_skipped_but_reported_when_the_target_is_missing() {
        let (_dir, store) = store();
        let keeper = sample_run(1, false).await;
        store.append_transcript(&keeper).unwrap();
        // Simulate torn bytes from a foreign writer.
        {
            use std::io::Write as _;
            let mut file = fs::OpenOptions::new()
                .append(true)
                .open(store.transcripts_path())
                .unwrap();
            writeln!(file, "{{\"schema\": \"colm/1\", truncated...").unwrap();
        }
        let survivor = sample_run(2, false).await;
        store.append_transcript(&survivor).unwrap();

        // Both intact transcripts load despite the damage between them.
        assert_eq!(store.load_transcript(&keeper.id).unwrap(), keeper);
        assert_eq!(store.load_transcript(&survivor.id).unwrap(), survivor);

        // A miss in a damaged file cannot be proven absent.
        match store.load_transcript("no-such-id").unwrap_err() {
            StoreError::Corrupt { line, .. } => assert_eq!(line, 2),
            other => panic!("expected Corrupt, got {other:?}"),
        }
    }

    #[tokio::test]
    async fn missing_file_and_missing_id_are_not_found() {
        let (_dir, store) = store();
        assert!(matches!(
            store.load_transcript("anything").unwrap_err(),
            StoreError::NotFound(_)
        ));
        let t = sample_run(1, false).await;
        store.append_transcript(&t).unwrap();
        assert!(matches!(
            store.load_transcript("other").unwrap_err(),
            StoreError::NotFound(_)
        ));
    }

    #[tokio::test]
    async fn invalid_transcripts_are_refused_on_append() {
        let (_dir, store) = store();
        let mut t = sample_run(1, false).await;
        t.finals.clear();
        match store.append_transcript(&t).unwrap_err() {
            StoreError::Invalid(reason) => assert!(reason.contains("finals completeness")),
            other => panic!("expected Invalid, got {other:?}"),
        }
        assert!(!store.transcripts_path().exists());
    }

    #[tokio::test]
    async fn invalid_stored_line_is_corrupt_with_violations() {
        let (_dir, store) = store();
        let mut t = sample_run(1, false).await;
        let id = t.id.clone();
        t.totals.call_count += 7; // break usage additivity, then bypass append validation
        fs::create_dir_all(store.data_dir()).unwrap();
        fs::write(
            store.transcripts_path(),
            format!("{}\n", t.encode().unwrap()),
        )
        .unwrap();

        match store.load_transcript(&id).unwrap_err() {
            StoreError::Corrupt { line, reason } => {
                assert_eq!(line, 1);
                assert!(reason.contains("usage additivity"));
            }
            other => panic!("expected Corrupt, got {other:?}"),
        }
    }

    #[tokio::test]
    async fn language_replay_reproduces_every_text() {
        let (_dir, store) = store();
        let original = sample_run(2, false).await;
        store.append_transcript(&original).unwrap();

        let replayed = store.replay(&original.id, &BTreeMap::new()).await.unwrap();
        assert_eq!(
            replay_divergences(&original, &replayed),
            Vec::<String>::new()
        );
        assert_eq!(replayed.finals, original.finals);
        // Finals are byte-identical through canonical encoding too.
        assert_eq!(
            canonical::to_canonical_json(&replayed.finals).unwrap(),
            canonical::to_canonical_json(&original.finals).unwrap()
        );
    }

    #[tokio::test]
    async fn early_stopped_replay_stops_at_the_same_round() {
        let (_dir, store) = store();
        let original = sample_run(5, true).await;
        assert_eq!(original.completed_rounds(), 2);
        store.append_transcript(&original).unwrap();

        let replayed = store.replay(&original.id, &BTreeMap::new()).await.unwrap();
        assert_eq!(replayed.completed_rounds(), 2);
        assert_eq!(
            replay_divergences(&original, &replayed),
            Vec::<String>::new()
        );
    }

    #[tokio::test]
    async fn overrides_change_the_outcome_and_divergence_reports_it() {
        let (_dir, store) = store();
        let original = sample_run(1, false).await;
        store.append_transcript(&original).unwrap();

        let mut overrides = BTreeMap::new();
        overrides.insert(
            "math".to_string(),
            MockScript::constant("a completely different answer"),
        );
        let replayed = store.replay(&original.id, &overrides).await.unwrap();
        let diffs = replay_divergences(&original, &replayed);
        assert!(!diffs.is_empty());
        assert!(diffs.iter().any(|d| d.contains("math")));
        // The untouched client still reproduces its recorded texts.
        assert_eq!(replayed.finals["code"], original.finals["code"]);
    }

    #[tokio::test]
    async fn vlm_replay_reproduces_finals() {
        let (_dir, store) = store();
        let names = ["north", "south"];
        let scripts: BTreeMap<String, MockScript> = names
            .iter()
            .map(|name| {
                (
                    format!("model-{name}"),
                    MockScript::constant(format!("{name} sees a cat")).on_user(
                        "candidate answers",
                        MockReply::Text(format!("{name} final answer")),
                    ),
                )
            })
            .collect();
        let runner = Runner::new(
            Arc::new(Gateway::with_scripts(scripts)),
            BackendBinding::mock("model-server"),
        );
        let clients: Vec<ClientProfile> = names
            .iter()
            .map(|name| {
                ClientProfile::new(
                    *name,
                    format!("You are {name}."),
                    BackendBinding::mock(format!("model-{name}")).with_vision(),
                )
                .unwrap()
            })
            .collect();
        let query = Query::vision(
            "What animal is shown?",
            vec![ImageRef::from_bytes("image/png", &[0x89, b'P', b'N', b'G'])],
        )
        .unwrap();
        let original = runner
            .run_vlm(&query, &clients, &RunConfig::default())
            .await
            .unwrap();
        store.append_transcript(&original).unwrap();

        let replayed = store.replay(&original.id, &BTreeMap::new()).await.unwrap();
        assert_eq!(
            replay_divergences(&original, &replayed),
            Vec::<String>::new()
        );
        assert_eq!(replayed.finals, original.finals);
    }

    #[test]
    fn manifests_are_written_atomically_as_canonical_json() {
        let (_dir, store) = store();
        let path = store
            .write_manifest("run-abc", &serde_json::json!({"z": 1, "a": 2}))
            .unwrap();
        let body = fs::read_to_string(path).unwrap();
        assert_eq!(body, "{\"a\":2,\"z\":1}\n");
    }
}
