//! Scripted in-process backend. Replies are chosen by first-match-wins rules
//! over the system prompt and the last user message, consume zero wall-clock
//! time, and account usage by whitespace tokenization — deterministic enough
//! to assert byte-exact transcripts in tests.

use serde::{Deserialize, Serialize};

use super::{BackendError, Message, Role, Usage};

/// What a mock returns when a rule (or the default) fires.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockReply {
    /// A fixed string.
    Text(String),
    /// The last user message, verbatim.
    EchoUser,
    /// The slice of the last user message strictly between the first
    /// occurrence of `start` and the next occurrence of `end`. When the
    /// markers are absent the whole message is echoed.
    EchoBetween { start: String, end: String },
    /// A scripted, non-retryable failure.
    Fail { message: String },
}

/// One matching rule. Absent matchers match everything, so a rule with both
/// fields unset always fires.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    /// Substring the system prompt must contain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_contains: Option<String>,
    /// Substring the last user message must contain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_contains: Option<String>,
    pub reply: MockReply,
}

impl MockRule {
    fn matches(&self, system_text: &str, last_user: &str) -> bool {
        self.system_contains
            .as_deref()
            .is_none_or(|needle| system_text.contains(needle))
            && self
                .user_contains
                .as_deref()
                .is_none_or(|needle| last_user.contains(needle))
    }
}

/// A mock model: ordered rules plus a default reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    pub default: MockReply,
}

impl MockScript {
    /// Script that always answers with the same text.
    pub fn constant(text: impl Into<String>) -> Self {
        MockScript {
            rules: Vec::new(),
            default: MockReply::Text(text.into()),
        }
    }

    /// Script that parrots the last user message back.
    pub fn echo_user() -> Self {
        MockScript {
            rules: Vec::new(),
            default: MockReply::EchoUser,
        }
    }

    /// Append a rule keyed on a user-message substring.
    pub fn on_user(mut self, needle: impl Into<String>, reply: MockReply) -> Self {
        self.rules.push(MockRule {
            system_contains: None,
            user_contains: Some(needle.into()),
            reply,
        });
        self
    }

    /// Append a rule keyed on a system-prompt substring.
    pub fn on_system(mut self, needle: impl Into<String>, reply: MockReply) -> Self {
        self.rules.push(MockRule {
            system_contains: Some(needle.into()),
            user_contains: None,
            reply,
        });
        self
    }

    /// First rule that matches, or the default.
    pub fn respond(&self, system_text: &str, last_user: &str) -> &MockReply {
        self.rules
            .iter()
            .find(|rule| rule.matches(system_text, last_user))
            .map(|rule| &rule.reply)
            .unwrap_or(&self.default)
    }
}

/// Tokens as counted by the mock: whitespace-separated words.
pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Resolve a reply against the conversation it answers.
fn realize(reply: &MockReply, last_user: &str) -> Result<String, BackendError> {
    match reply {
        MockReply::Text(text) => Ok(text.clone()),
        MockReply::EchoUser => Ok(last_user.to_string()),
        MockReply::EchoBetween { start, end } => {
            let sliced = last_user.find(start.as_str()).and_then(|at| {
                let after = &last_user[at + start.len()..];
                after.find(end.as_str()).map(|stop| &after[..stop])
            });
            Ok(sliced.unwrap_or(last_user).to_string())
        }
        MockReply::Fail { message } => Err(BackendError::Scripted(message.clone())),
    }
}

/// Run one mock completion: pick a reply, realize it, count tokens.
///
/// Prompt tokens count every message's text; completion tokens count the
/// reply. Returns the reply text and usage for a single call.
pub(super) fn complete(
    script: &MockScript,
    messages: &[Message],
) -> Result<(String, Usage), BackendError> {
    let system_text = messages
        .iter()
        .filter(|m| m.role == Role::System)
        .map(|m| m.text_content())
        .collect::<Vec<_>>()
        .join("\n");
    let last_user = messages
        .iter()
        .rev()
        .find(|m| m.role == Role::User)
        .map(|m| m.text_content())
        .unwrap_or_default();
    let prompt_tokens: u64 = messages
        .iter()
        .map(|m| whitespace_tokens(&m.text_content()))
        .sum();

    let text = realize(script.respond(&system_text, &last_user), &last_user)?;
    let usage = Usage {
        prompt_tokens,
        completion_tokens: whitespace_tokens(&text),
        call_count: 1,
    };
    Ok((text, usage))
}
