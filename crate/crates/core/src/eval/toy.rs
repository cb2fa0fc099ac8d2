//! A fully scripted micro-benchmark: sixty multiple-choice drills split
//! across three domains, three mock experts that each know exactly their own
//! domain, and a mock aggregation server. Every answer is deterministic, so
//! scores, gains, and ablation deltas have exact expected values.

use std::collections::BTreeMap;

use crate::backend::{BackendBinding, MockReply, MockScript};
use crate::canonical;
use crate::config::ColmConfig;
use crate::eval::{AnswerType, BenchmarkItem, ChoiceOption, Harness, ScaleEntry, ScaleMap};
use crate::types::{ClientPool, ClientProfile, RunConfig};

pub const TOY_BENCHMARK: &str = "toy-mcq";
pub const TOY_DOMAINS: [&str; 3] = ["algebra", "syntax", "geography"];
const ITEMS_PER_DOMAIN: usize = 20;
const GOLD_CYCLE: [&str; 4] = ["A", "B", "C", "D"];
const CHOICE_TEXTS: [&str; 4] = [
    "first option",
    "second option",
    "third option",
    "fourth option",
];
const UNKNOWN_REPLY: &str = "I do not know.";
/// Marker every refinement request carries (part of the refinement prompt).
const REFINE_MARKER: &str = "Now, refine your original response";

fn item_id(domain: &str, j: usize) -> String {
    format!("{domain}-{j:02}")
}

fn gold_for(index: usize) -> &'static str {
    GOLD_CYCLE[index % GOLD_CYCLE.len()]
}

fn correct_reply(index: usize) -> String {
    format!("The answer is ({}).", gold_for(index))
}

/// Sixty choice items: `[domain-NN]` markers let the mock scripts recognize
/// which item a prompt is about.
pub fn toy_items() -> Vec<BenchmarkItem> {
    let mut items = Vec::with_capacity(TOY_DOMAINS.len() * ITEMS_PER_DOMAIN);
    for (s, domain) in TOY_DOMAINS.iter().enumerate() {
        for j in 0..ITEMS_PER_DOMAIN {
            let index = s * ITEMS_PER_DOMAIN + j;
            let id = item_id(domain, j);
            items.push(BenchmarkItem {
                id: id.clone(),
                question: format!("[{id}] In the {domain} drill, which option is correct?"),
                image: None,
                answer_type: AnswerType::Choice,
                gold: Some(gold_for(index).to_string()),
                choices: GOLD_CYCLE
                    .iter()
                    .zip(CHOICE_TEXTS.iter())
                    .map(|(letter, text)| ChoiceOption {
                        letter: letter.to_string(),
                        text: text.to_string(),
                    })
                    .collect(),
            });
        }
    }
    items
}

fn expert_name(domain: &str) -> String {
    format!("{domain}-expert")
}

fn expert_model(domain: &str) -> String {
    format!("toy-{domain}")
}

/// Three experts, one per domain, all on mock backends.
pub fn toy_pool() -> ClientPool {
    let profiles = TOY_DOMAINS
        .iter()
        .map(|domain| {
            ClientProfile::new(
                expert_name(domain),
                format!("You are a helpful {domain} assistant."),
                BackendBinding::mock(expert_model(domain)),
            )
            .expect("static profile is valid")
            .with_tags([domain.to_string()])
        })
        .collect();
    ClientPool::new(profiles).expect("static names are unique")
}

pub fn toy_server() -> BackendBinding {
    BackendBinding::mock("toy-server")
}

fn expert_script(s: usize, domain: &str) -> MockScript {
    // The refinement rule comes first: a refinement prompt quotes the shared
    // guidance, and the expert adopts that guidance verbatim.
    let mut script = MockScript::constant(UNKNOWN_REPLY).on_user(
        REFINE_MARKER,
        MockReply::EchoBetween {
            start: "perspectives:\n\n".to_string(),
            end: "\n\nNow, refine".to_string(),
        },
    );
    for j in 0..ITEMS_PER_DOMAIN {
        let index = s * ITEMS_PER_DOMAIN + j;
        script = script.on_user(
            format!("[{}]", item_id(domain, j)),
            MockReply::Text(correct_reply(index)),
        );
    }
    script
}

fn client_scripts() -> BTreeMap<String, MockScript> {
    TOY_DOMAINS
        .iter()
        .enumerate()
        .map(|(s, domain)| (expert_model(domain), expert_script(s, domain)))
        .collect()
}

/// Scripts with a concatenating server: guidance is the verbatim block of
/// everyone's latest answers, so whichever expert knew the item, the letter
/// reaches everyone on the next refinement.
pub fn toy_scripts() -> BTreeMap<String, MockScript> {
    let mut scripts = client_scripts();
    scripts.insert(
        "toy-server".to_string(),
        MockScript {
            rules: Vec::new(),
            default: MockReply::EchoBetween {
                start: "different perspectives: ".to_string(),
                end: ".\n\nPlease synthesize".to_string(),
            },
        },
    );
    scripts
}

/// Scripts with a resolving server: it answers each item with the single
/// correct line, so refinement reaches a fixed point after one round and
/// extra round budgets change nothing.
pub fn toy_convergent_scripts() -> BTreeMap<String, MockScript> {
    let mut scripts = client_scripts();
    let mut server = MockScript::constant(UNKNOWN_REPLY);
    for (s, domain) in TOY_DOMAINS.iter().enumerate() {
        for j in 0..ITEMS_PER_DOMAIN {
            let index = s * ITEMS_PER_DOMAIN + j;
            server = server.on_user(
                format!("[{}]", item_id(domain, j)),
                MockReply::Text(correct_reply(index)),
            );
        }
    }
    scripts.insert("toy-server".to_string(), server);
    scripts
}

/// Raw scores are fractions correct; report them directly as percentages.
pub fn toy_scale() -> ScaleMap {
    let mut scale = ScaleMap::default_scales();
    scale.insert(
        TOY_BENCHMARK,
        ScaleEntry {
            offset: 0.0,
            divisor: 1.0,
        },
    );
    scale
}

/// One refinement round, all three experts, no early stopping.
pub fn toy_run_config() -> RunConfig {
    RunConfig {
        k: 3,
        max_rounds: 1,
        early_stop: false,
        ..RunConfig::default()
    }
}

pub fn toy_harness() -> Harness {
    let mut harness = Harness::new(toy_scripts(), toy_server());
    harness.scale = toy_scale();
    harness
}

pub fn toy_convergent_harness() -> Harness {
    let mut harness = Harness::new(toy_convergent_scripts(), toy_server());
    harness.scale = toy_scale();
    harness
}

/// The whole toy setup as a loadable configuration.
pub fn toy_config() -> ColmConfig {
    ColmConfig {
        clients: toy_pool().profiles().to_vec(),
        server: toy_server(),
        judge: None,
        prompts: Default::default(),
        scale_map: toy_scale(),
        run: toy_run_config(),
        mock_scripts: toy_scripts(),
        score_judge: None,
        service: Default::default(),
    }
}

/// The toy benchmark as committed-fixture bytes (one canonical JSON line per
/// item).
pub fn toy_items_jsonl() -> String {
    toy_items()
        .iter()
        .map(|item| {
            let mut line = canonical::to_canonical_json(item).expect("static item encodes");
            line.push('\n');
            line
        })
        .collect()
}

/// The toy configuration as committed-fixture bytes.
pub fn toy_config_json() -> String {
    let mut body = canonical::to_canonical_json(&toy_config()).expect("static config encodes");
    body.push('\n');
    body
}
