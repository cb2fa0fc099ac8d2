//! The gateway fronts every outbound model call: it renders the request,
//! enforces a per-binding concurrency ceiling, retries transient failures
//! with jittered exponential backoff, and keeps a per-binding usage ledger.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng as _;
use serde::Deserialize;
use tokio::sync::Semaphore;

use super::{
    mock, render, BackendBinding, BackendError, BackendKind, CallParams, Completion, Message,
    MockScript, Usage,
};

/// Maximum simultaneous in-flight calls per binding.
const MAX_IN_FLIGHT_PER_BINDING: usize = 4;

/// First backoff ceiling; doubles per failed attempt (full jitter below it).
const DEFAULT_BACKOFF_BASE: Duration = Duration::from_millis(500);

/// Largest backoff ceiling regardless of attempt count.
const BACKOFF_CAP: Duration = Duration::from_secs(8);

/// One rendered request, captured when recording is enabled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallRecord {
    pub binding_key: String,
    pub model_id: String,
    /// Canonical JSON request body.
    pub body: String,
}

/// Uniform front door to every backend.
pub struct Gateway {
    http: reqwest::Client,
    scripts: BTreeMap<String, MockScript>,
    limiters: Mutex<HashMap<String, Arc<Semaphore>>>,
    ledger: Mutex<BTreeMap<String, Usage>>,
    records: Mutex<Vec<CallRecord>>,
    recording: bool,
    backoff_base: Duration,
}

impl Default for Gateway {
    fn default() -> Self {
        Self::new()
    }
}

impl Gateway {
    pub fn new() -> Self {
        Gateway {
            http: reqwest::Client::new(),
            scripts: BTreeMap::new(),
            limiters: Mutex::new(HashMap::new()),
            ledger: Mutex::new(BTreeMap::new()),
            records: Mutex::new(Vec::new()),
            recording: false,
            backoff_base: DEFAULT_BACKOFF_BASE,
        }
    }

    /// Gateway whose mock models answer from the given scripts (keyed by
    /// model id).
    pub fn with_scripts(scripts: BTreeMap<String, MockScript>) -> Self {
        Gateway {
            scripts,
            ..Gateway::new()
        }
    }

    /// Capture every rendered request body (tests, replay fidelity checks).
    pub fn recording(mut self) -> Self {
        self.recording = true;
        self
    }

    /// Shrink the backoff base so retry tests do not sleep for real.
    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    pub fn register_script(&mut self, model_id: impl Into<String>, script: MockScript) {
        self.scripts.insert(model_id.into(), script);
    }

    /// Usage accumulated per binding key since construction. Failed attempts
    /// count toward `call_count`; tokens are only added on success.
    pub fn usage_by_binding(&self) -> BTreeMap<String, Usage> {
        self.ledger.lock().unwrap().clone()
    }

    pub fn usage_total(&self) -> Usage {
        Usage::sum(self.ledger.lock().unwrap().values().copied())
    }

    /// All captured requests, in call order. Empty unless recording.
    pub fn recorded_calls(&self) -> Vec<CallRecord> {
        self.records.lock().unwrap().clone()
    }

    pub fn calls_for_model(&self, model_id: &str) -> Vec<CallRecord> {
        self.recorded_calls()
            .into_iter()
            .filter(|r| r.model_id == model_id)
            .collect()
    }

    /// Issue one chat completion through retries and the concurrency limit.
    pub async fn complete(
        &self,
        binding: &BackendBinding,
        messages: &[Message],
        params: &CallParams,
    ) -> Result<Completion, BackendError> {
        let body = render::render_chat_request(binding, messages, params)?;
        let key = binding.key();

        if self.recording {
            self.records.lock().unwrap().push(CallRecord {
                binding_key: key.clone(),
                model_id: binding.model_id.clone(),
                body: String::from_utf8(body.clone())
                    .map_err(|e| BackendError::InvalidRequest(format!("non-UTF-8 body: {e}")))?,
            });
        }

        let limiter = self.limiter(&key);
        let _permit = limiter
            .acquire()
            .await
            .map_err(|_| BackendError::Transport("concurrency limiter closed".into()))?;

        match &binding.kind {
            BackendKind::Mock => self.complete_mock(binding, messages, &key),
            BackendKind::Http {
                endpoint,
                auth_env_var,
            } => {
                self.complete_http(endpoint, auth_env_var.as_deref(), body, params, &key)
                    .await
            }
        }
    }

    fn complete_mock(
        &self,
        binding: &BackendBinding,
        messages: &[Message],
        key: &str,
    ) -> Result<Completion, BackendError> {
        let script = self
            .scripts
            .get(&binding.model_id)
            .ok_or_else(|| BackendError::NoScript(binding.model_id.clone()))?;
        match mock::complete(script, messages) {
            Ok((text, usage)) => {
                self.absorb(key, usage);
                Ok(Completion {
                    text,
                    usage,
                    latency: Duration::ZERO,
                })
            }
            Err(err) => {
                self.absorb(
                    key,
                    Usage {
                        call_count: 1,
                        ..Usage::default()
                    },
                );
                Err(err)
            }
        }
    }

    async fn complete_http(
        &self,
        endpoint: &str,
        auth_env_var: Option<&str>,
        body: Vec<u8>,
        params: &CallParams,
        key: &str,
    ) -> Result<Completion, BackendError> {
        // Resolve auth up front: a missing variable is a configuration
        // error, not a transient failure, and must not burn attempts.
        let token = match auth_env_var {
            Some(var) => {
                Some(std::env::var(var).map_err(|_| BackendError::MissingAuth(var.to_string()))?)
            }
            None => None,
        };

        let started = Instant::now();
        let mut attempt: u32 = 0;
        loop {
            attempt += 1;
            let mut request = self
                .http
                .post(endpoint)
                .header(reqwest::header::CONTENT_TYPE, "application/json")
                .timeout(params.timeout)
                .body(body.clone());
            if let Some(token) = &token {
                request = request.bearer_auth(token);
            }

            let error = match request.send().await {
                Ok(response) => {
                    let status = response.status();
                    let text = response.text().await.unwrap_or_default();
                    if status.is_success() {
                        let (reply, mut usage) = parse_completion(&text)?;
                        usage.call_count = attempt as u64;
                        self.absorb(key, usage);
                        return Ok(Completion {
                            text: reply,
                            usage,
                            latency: started.elapsed(),
                        });
                    }
                    BackendError::Remote {
                        status: status.as_u16(),
                        body: text,
                    }
                }
                Err(e) if e.is_timeout() => BackendError::Timeout(params.timeout),
                Err(e) => BackendError::Transport(e.to_string()),
            };

            if attempt > params.max_retries || !error.is_retryable() {
                self.absorb(
                    key,
                    Usage {
                        call_count: attempt as u64,
                        ..Usage::default()
                    },
                );
                return Err(error);
            }
            tokio::time::sleep(self.backoff_delay(attempt)).await;
        }
    }

    /// Full-jitter backoff: uniform in [0, base·2^(failures−1)], capped.
    fn backoff_delay(&self, failures: u32) -> Duration {
        let ceiling = self
            .backoff_base
            .saturating_mul(1u32 << (failures - 1).min(16))
            .min(BACKOFF_CAP);
        let micros = ceiling.as_micros() as u64;
        Duration::from_micros(rand::rng().random_range(0..=micros))
    }

    fn limiter(&self, key: &str) -> Arc<Semaphore> {
        self.limiters
            .lock()
            .unwrap()
            .entry(key.to_string())
            .or_insert_with(|| Arc::new(Semaphore::new(MAX_IN_FLIGHT_PER_BINDING)))
            .clone()
    }

    fn absorb(&self, key: &str, usage: Usage) {
        let mut ledger = self.ledger.lock().unwrap();
        *ledger.entry(key.to_string()).or_default() += usage;
    }
}

#[derive(Deserialize)]
struct WireCompletion {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: WireUsage,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: String,
}

#[derive(Deserialize, Default)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

fn parse_completion(body: &str) -> Result<(String, Usage), BackendError> {
    let wire: WireCompletion =
        serde_json::from_str(body).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::MalformedResponse("no choices".into()))?;
    Ok((
        choice.message.content,
        Usage {
            prompt_tokens: wire.usage.prompt_tokens,
            completion_tokens: wire.usage.completion_tokens,
            call_count: 0, // set by the caller to the attempt count
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::SocketAddr;
    use std::sync::atomic::{AtomicUsize, Ordering};

    use axum::extract::State;
    use axum::routing::post;
    use axum::{Json, Router};

    fn fast_params(max_retries: u32) -> CallParams {
        CallParams {
            max_retries,
            timeout: Duration::from_secs(5),
            ..CallParams::default()
        }
    }

    async fn spawn(router: Router) -> SocketAddr {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move {
            axum::serve(listener, router).await.unwrap();
        });
        addr
    }

    fn ok_completion(content: &str) -> serde_json::Value {
        serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": content}}],
            "usage": {"prompt_tokens": 9, "completion_tokens": 2},
        })
    }

    #[tokio::test]
    async fn mock_completion_flows_through_ledger_and_recorder() {
        let mut gateway = Gateway::new();
        gateway.register_script("solver", MockScript::constant("it is 4"));
        let gateway = gateway.recording();
        let binding = BackendBinding::mock("solver");

        let done = gateway
            .complete(
                &binding,
                &[Message::system("be terse"), Message::user("2 + 2?")],
                &fast_params(0),
            )
            .await
            .unwrap();
        assert_eq!(done.text, "it is 4");
        assert_eq!(done.usage.completion_tokens, 3);
        assert_eq!(done.usage.prompt_tokens, 5); // "be terse" + "2 + 2?"
        assert_eq!(done.latency, Duration::ZERO);

        let ledger = gateway.usage_by_binding();
        assert_eq!(ledger["mock:solver"].call_count, 1);

        let calls = gateway.recorded_calls();
        assert_eq!(calls.len(), 1);
        assert_eq!(calls[0].model_id, "solver");
        assert!(calls[0].body.contains("2 + 2?"));
    }

    #[tokio::test]
    async fn unscripted_mock_model_is_an_error() {
        let gateway = Gateway::new();
        let err = gateway
            .complete(
                &BackendBinding::mock("ghost"),
                &[Message::user("hi")],
                &fast_params(0),
            )
            .await
            .unwrap_err();
        assert!(matches!(err, BackendError::NoScript(m) if m == "ghost"));
    }

    #[tokio::test]
    async fn http_completion_parses_text_and_usage() {
        let addr = spawn(Router::new().route(
            "/v1/chat/completions",
            post(|| async { Json(ok_completion("the answer is 4")) }),
        ))
        .await;
        let gateway = Gateway::new();
        let binding =
            BackendBinding::http(format!("http://{addr}/v1/chat/completions"), "remote-7b");

        let done = gateway
            .complete(&binding, &[Message::user("2 + 2?")], &fast_params(0))
            .await
            .unwrap();
        assert_eq!(done.text, "the answer is 4");
        assert_eq!(done.usage.prompt_tokens, 9);
        assert_eq!(done.usage.completion_tokens, 2);
        assert_eq!(done.usage.call_count, 1);
    }

    #[tokio::test]
    async fn transient_failures_are_retried_until_success() {
        let hits = Arc::new(AtomicUsize::new(0));
        let router = Router::new()
            .route(
                "/",
                post(|State(hits): State<Arc<AtomicUsize>>| async move {
                    if hits.fetch_add(1, Ordering::SeqCst) < 2 {
                        Err(axum::http::StatusCode::SERVICE_UNAVAILABLE)
                    } else {
                        Ok(Json(ok_completion("recovered")))
                    }
                }),
            )
            .with_state(hits.clone());
        let addr = spawn(router).await;

        let gateway = Gateway::new().with_backoff_base(Duration::from_millis(2));
        let binding = BackendBinding::http(format!("http://{addr}/"), "flaky");
        let done = gateway
            .complete(&binding, &[Message::user("q")], &fast_params(2))
            .await
            .unwrap();
        assert_eq!(done.text, "recovered");
        assert_eq!(hits.load(Ordering::SeqCst), 3);
        // The successful completion reports every attempt it took.
        assert_eq!(done.usage.call_count, 3);
    }

    #[tokio::test]
    async fn attempts_never_exceed_retry_budget() {
        let hits = Arc::new(AtomicUsize::new(0));
        let router = Router::new()
            .route(
                "/",
                post(|State(hits): State<Arc<AtomicUsize>>| async move {
                    hits.fetch_add(1, Ordering::SeqCst);
                    axum::http::StatusCode::INTERNAL_SERVER_ERROR
                }),
            )
            .with_state(hits.clone());
        let addr = spawn(router).await;

        let gateway = Gateway::new().with_backoff_base(Duration::from_millis(2));
        let binding = BackendBinding::http(format!("http://{addr}/"), "down");
        let err = gateway
            .complete(&binding, &[Message::user("q")], &fast_params(2))
            .await
            .unwrap_err();
        assert!(matches!(err, BackendError::Remote { status: 500, .. }));
        assert_eq!(hits.load(Ordering::SeqCst), 3); // 1 + max_retries
        assert_eq!(gateway.usage_by_binding()[&binding.key()].call_count, 3);
    }

    #[tokio::test]
    async fn non_retryable_statuses_fail_immediately() {
        let hits = Arc::new(AtomicUsize::new(0));
        let router = Router::new()
            .route(
                "/",
                post(|State(hits): State<Arc<AtomicUsize>>| async move {
                    hits.fetch_add(1, Ordering::SeqCst);
                    axum::http::StatusCode::UNAUTHORIZED
                }),
            )
            .with_state(hits.clone());
        let addr = spawn(router).await;

        let gateway = Gateway::new();
        let binding = BackendBinding::http(format!("http://{addr}/"), "denied");
        let err = gateway
            .complete(&binding, &[Message::user("q")], &fast_params(5))
            .await
            .unwrap_err();
        assert!(matches!(err, BackendError::Remote { status: 401, .. }));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[tokio::test]
    async fn slow_upstream_times_out() {
        let addr = spawn(Router::new().route(
            "/",
            post(|| async {
                tokio::time::sleep(Duration::from_millis(500)).await;
                Json(ok_completion("too late"))
            }),
        ))
        .await;

        let gateway = Gateway::new();
        let binding = BackendBinding::http(format!("http://{addr}/"), "sluggish");
        let params = CallParams {
            timeout: Duration::from_millis(50),
            max_retries: 0,
            ..CallParams::default()
        };
        let err = gateway
            .complete(&binding, &[Message::user("q")], &params)
            .await
            .unwrap_err();
        assert!(matches!(err, BackendError::Timeout(_)));
    }

    #[tokio::test]
    async fn per_binding_concurrency_stays_at_or_below_the_ceiling() {
        let gauge = Arc::new((AtomicUsize::new(0), AtomicUsize::new(0))); // (current, peak)
        let router = Router::new()
            .route(
                "/",
                post(
                    |State(gauge): State<Arc<(AtomicUsize, AtomicUsize)>>| async move {
                        let now = gauge.0.fetch_add(1, Ordering::SeqCst) + 1;
                        gauge.1.fetch_max(now, Ordering::SeqCst);
                        tokio::time::sleep(Duration::from_millis(25)).await;
                        gauge.0.fetch_sub(1, Ordering::SeqCst);
                        Json(ok_completion("ok"))
                    },
                ),
            )
            .with_state(gauge.clone());
        let addr = spawn(router).await;

        let gateway = Arc::new(Gateway::new());
        let binding = BackendBinding::http(format!("http://{addr}/"), "busy");
        let calls = (0..12).map(|_| {
            let gateway = gateway.clone();
            let binding = binding.clone();
            tokio::spawn(async move {
                gateway
                    .complete(&binding, &[Message::user("q")], &fast_params(0))
                    .await
                    .unwrap()
            })
        });
        for handle in calls.collect::<Vec<_>>() {
            handle.await.unwrap();
        }

        let peak = gauge.1.load(Ordering::SeqCst);
        assert!(peak <= MAX_IN_FLIGHT_PER_BINDING, "peak in-flight {peak}");
        assert_eq!(gateway.usage_by_binding()[&binding.key()].call_count, 12);
    }

    #[tokio::test]
    async fn bearer_token_is_read_from_env_at_call_time() {
        let seen = Arc::new(Mutex::new(None::<String>));
        let router = Router::new()
            .route(
                "/",
                post(
                    |State(seen): State<Arc<Mutex<Option<String>>>>,
                     headers: axum::http::HeaderMap| async move {
                        *seen.lock().unwrap() = headers
                            .get("authorization")
                            .map(|v| v.to_str().unwrap().to_string());
                        Json(ok_completion("ok"))
                    },
                ),
            )
            .with_state(seen.clone());
        let addr = spawn(router).await;

        std::env::set_var("GATEWAY_TEST_TOKEN_A", "sk-sesame");
        let gateway = Gateway::new();
        let binding = BackendBinding::http(format!("http://{addr}/"), "authed")
            .with_auth_env("GATEWAY_TEST_TOKEN_A");
        gateway
            .complete(&binding, &[Message::user("q")], &fast_params(0))
            .await
            .unwrap();
        assert_eq!(seen.lock().unwrap().as_deref(), Some("Bearer sk-sesame"));

        // Unset variable: configuration error before any attempt.
        let missing = BackendBinding::http(format!("http://{addr}/"), "authed")
            .with_auth_env("GATEWAY_TEST_TOKEN_UNSET");
        let err = gateway
            .complete(&missing, &[Message::user("q")], &fast_params(3))
            .await
            .unwrap_err();
        assert!(matches!(err, BackendError::MissingAuth(v) if v == "GATEWAY_TEST_TOKEN_UNSET"));
    }

    #[test]
    fn backoff_ceiling_doubles_and_caps() {
        let gateway = Gateway::new();
        for _ in 0..200 {
            assert!(gateway.backoff_delay(1) <= Duration::from_millis(500));
            assert!(gateway.backoff_delay(2) <= Duration::from_millis(1000));
            assert!(gateway.backoff_delay(10) <= BACKOFF_CAP);
        }
    }

    #[test]
    fn malformed_bodies_are_rejected() {
        assert!(matches!(
            parse_completion("not json"),
            Err(BackendError::MalformedResponse(_))
        ));
        assert!(matches!(
            parse_completion(r#"{"choices": []}"#),
            Err(BackendError::MalformedResponse(_))
        ));
        let (text, usage) =
            parse_completion(r#"{"choices":[{"message":{"content":"hi"}}]}"#).unwrap();
        assert_eq!(text, "hi");
        assert_eq!(usage.prompt_tokens, 0);
    }
}
