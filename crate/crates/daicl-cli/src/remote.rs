//! Remote-completion client, a local stub server for offline testing, and
//! inference-only evaluation over chat-completion endpoints.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Result;
use serde::{Deserialize, Serialize};

use daicl_core::corpus::{EntitySpan, Sentiment};
use daicl_core::embed::{join_tokens, NgramEmbedder, RetrievalIndex};
use daicl_core::eval::{accuracy, entities_to_spans, span_f1};
use daicl_core::prompt::{
    parse_entity_response, parse_sentiment_response, render_entity_label,
    render_inference_prompt, InferMode, Task,
};
use daicl_core::rng::{mix_seed, rng_from_seed, sample_without_replacement};
use daicl_core::trainer::{ExampleLabel, LabeledExample};

/// Default environment variable holding the bearer token.
pub const TOKEN_ENV: &str = "DAICL_API_TOKEN";

/// A chat-completion endpoint. The auth token is read from the environment
/// only, never from configuration files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionEndpoint {
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_token_env")]
    pub token_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    /// Path to the completion text inside the response JSON.
    #[serde(default = "default_response_path")]
    pub response_path: Vec<String>,
}

fn default_token_env() -> String {
    TOKEN_ENV.to_string()
}

fn default_timeout() -> u64 {
    30
}

fn default_retries() -> usize {
    2
}

fn default_response_path() -> Vec<String> {
    ["choices", "0", "message", "content"]
        .into_iter()
        .map(String::from)
        .collect()
}

impl CompletionEndpoint {
    pub fn new(base_url: &str, model: &str) -> Self {
        CompletionEndpoint {
            base_url: base_url.to_string(),
            model: model.to_string(),
            token_env: default_token_env(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            response_path: default_response_path(),
        }
    }
}

/// Remote-call failures.
#[derive(Debug)]
pub enum RemoteError {
    Http { status: u16, body: String },
    Timeout(String),
    MalformedResponse(String),
}

impl std::fmt::Display for RemoteError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RemoteError::Http { status, body } => write!(f, "HTTP {status}: {body}"),
            RemoteError::Timeout(what) => write!(f, "timed out: {what}"),
            RemoteError::MalformedResponse(what) => write!(f, "malformed response: {what}"),
        }
    }
}

impl std::error::Error for RemoteError {}

fn walk_path<'a>(value: &'a serde_json::Value, path: &[String]) -> Option<&'a serde_json::Value> {
    let mut cur = value;
    for step in path {
        cur = match cur {
            serde_json::Value::Array(items) => items.get(step.parse::<usize>().ok()?)?,
            serde_json::Value::Object(map) => map.get(step)?,
            _ => return None,
        };
    }
    Some(cur)
}

/// Sends one prompt to the endpoint as a single-message chat completion and
/// returns the completion text. Transient failures (transport errors, 5xx)
/// retry with exponential backoff up to `max_retries` extra attempts.
pub fn complete_remote(prompt: &str, ep: &CompletionEndpoint) -> Result<String, RemoteError> {
    let agent = ureq::AgentBuilder::new()
        .timeout(Duration::from_secs(ep.timeout_secs))
        .build();
    let body = serde_json::json!({
        "model": ep.model,
        "messages": [{"role": "user", "content": prompt}],
    });
    let token = std::env::var(&ep.token_env).ok();
    let mut last_err = RemoteError::Timeout("no attempt made".to_string());
    for attempt in 0..=ep.max_retries {
        if attempt > 0 {
            std::thread::sleep(Duration::from_millis(100 << attempt));
        }
        let mut req = agent.post(&ep.base_url).set("Content-Type", "application/json");
        if let Some(token) = &token {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        match req.send_json(body.clone()) {
            Ok(resp) => {
                let text = resp
                    .into_string()
                    .map_err(|e| RemoteError::MalformedResponse(e.to_string()))?;
                let value: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| RemoteError::MalformedResponse(e.to_string()))?;
                let content = walk_path(&value, &ep.response_path)
                    .and_then(|v| v.as_str())
                    .ok_or_else(|| {
                        RemoteError::MalformedResponse(format!(
                            "no string at {:?}",
                            ep.response_path
                        ))
                    })?;
                return Ok(content.to_string());
            }
            Err(ureq::Error::Status(status, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                let err = RemoteError::Http { status, body };
                if status < 500 {
                    return Err(err);
                }
                last_err = err;
            }
            Err(ureq::Error::Transport(t)) => {
                last_err = RemoteError::Timeout(t.to_string());
            }
        }
    }
    Err(last_err)
}

/// A tiny loopback chat-completion server cycling through canned responses.
/// Used by the offline test suite and the `stub-serve` subcommand.
pub struct StubServer {
    pub addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
    pub hits: Arc<AtomicUsize>,
}

impl StubServer {
    /// Binds an ephemeral loopback port and serves `responses` round-robin.
    pub fn spawn(responses: Vec<String>) -> Result<StubServer> {
        Self::spawn_on(0, responses)
    }

    /// Binds a specific loopback port (0 for ephemeral).
    pub fn spawn_on(port: u16, responses: Vec<String>) -> Result<StubServer> {
        let listener = TcpListener::bind(("127.0.0.1", port))?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let hits = Arc::new(AtomicUsize::new(0));
        let shutdown_flag = shutdown.clone();
        let hit_counter = hits.clone();
        let handle = std::thread::spawn(move || {
            let mut counter = 0usize;
            while !shutdown_flag.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let response = responses[counter % responses.len()].clone();
                        counter += 1;
                        hit_counter.fetch_add(1, Ordering::Relaxed);
                        let _ = serve_one(stream, &response);
                    }
                    Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(5));
                    }
                    Err(_) => break,
                }
            }
        });
        Ok(StubServer {
            addr,
            shutdown,
            handle: Some(handle),
            hits,
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}/v1/chat/completions", self.addr)
    }

    pub fn endpoint(&self, model: &str) -> CompletionEndpoint {
        CompletionEndpoint::new(&self.url(), model)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve_one(mut stream: TcpStream, content: &str) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    reader.read_line(&mut line)?; // request line
    let mut content_length = 0usize;
    loop {
        let mut header = String::new();
        reader.read_line(&mut header)?;
        if header.trim().is_empty() {
            break;
        }
        if let Some(rest) = header.to_ascii_lowercase().strip_prefix("content-length:") {
            content_length = rest.trim().parse().unwrap_or(0);
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    let payload = serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": content}}]
    })
    .to_string();
    let response = format!(
        "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        payload.len(),
        payload
    );
    stream.write_all(response.as_bytes())?;
    stream.flush()
}

/// One graded example in an inference run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceLine {
    pub index: usize,
    pub prompt: String,
    pub response: String,
    /// Rendered prediction (label word, or comma-joined entities).
    pub prediction: String,
    /// SA: 1 if correct. NER: unused.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    /// NER: per-example (tp, fp, fn).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub span_counts: Option<(usize, usize, usize)>,
}

/// Aggregate of an inference-only evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceReport {
    pub task: Task,
    pub mode: InferMode,
    pub metric: f64,
    pub examples: usize,
    pub traces: Vec<TraceLine>,
}

/// Runs inference-only evaluation: renders prompts with `k` source-domain
/// demonstrations (per `mode`), queries the endpoint with bounded
/// concurrency, parses and grades the responses. Output order matches input
/// order regardless of concurrency.
#[allow(clippy::too_many_arguments)]
pub fn inference_eval(
    task: Task,
    mode: InferMode,
    ep: &CompletionEndpoint,
    test: &[LabeledExample],
    source_pool: &[LabeledExample],
    source_index: Option<&RetrievalIndex>,
    k: usize,
    seed: u64,
    concurrency: usize,
) -> Result<InferenceReport> {
    let demo_label = |e: &LabeledExample| -> String {
        match &e.label {
            ExampleLabel::Sentiment(s) => s.as_str().to_string(),
            ExampleLabel::Bio(_) => {
                let spans = e.gold_spans().expect("bio label has spans");
                let entities: Vec<String> = spans
                    .iter()
                    .map(|sp| join_tokens(&e.tokens[sp.start..sp.end]))
                    .collect();
                render_entity_label(&entities)
            }
        }
    };

    // Resolve demos per query up front (retrieval is cheap and keeps the
    // request loop pure).
    let mut prompts = Vec::with_capacity(test.len());
    for (i, example) in test.iter().enumerate() {
        let demos: Vec<(String, String)> = match mode {
            InferMode::None => Vec::new(),
            InferMode::Random => {
                let mut rng = rng_from_seed(mix_seed(seed, i as u64));
                sample_without_replacement(&mut rng, source_pool.len(), k.min(source_pool.len()))
                    .into_iter()
                    .map(|id| {
                        (
                            join_tokens(&source_pool[id].tokens),
                            demo_label(&source_pool[id]),
                        )
                    })
                    .collect()
            }
            InferMode::Retrieved => {
                let index = source_index
                    .ok_or_else(|| anyhow::anyhow!("retrieved mode needs a source index"))?;
                let embedder = NgramEmbedder::from_spec(&index.spec)
                    .map_err(|e| anyhow::anyhow!("embedder: {e}"))?;
                index
                    .top_k(&example.tokens, &embedder, k)
                    .map_err(|e| anyhow::anyhow!("retrieval: {e}"))?
                    .into_iter()
                    .map(|hit| {
                        (
                            join_tokens(&source_pool[hit.corpus_id].tokens),
                            demo_label(&source_pool[hit.corpus_id]),
                        )
                    })
                    .collect()
            }
        };
        let prompt = render_inference_prompt(&join_tokens(&example.tokens), &demos, task, mode)
            .map_err(|e| anyhow::anyhow!("prompt: {e}"))?;
        prompts.push(prompt);
    }

    // Query with bounded concurrency, preserving input order.
    let workers = concurrency.max(1).min(prompts.len().max(1));
    let mut responses: Vec<Option<Result<String, RemoteError>>> =
        (0..prompts.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<Vec<usize>> = (0..workers)
            .map(|w| (0..prompts.len()).filter(|i| i % workers == w).collect())
            .collect();
        let mut handles = Vec::new();
        for chunk in chunks {
            let prompts = &prompts;
            let ep = ep.clone();
            handles.push(scope.spawn(move || {
                chunk
                    .into_iter()
                    .map(|i| (i, complete_remote(&prompts[i], &ep)))
                    .collect::<Vec<_>>()
            }));
        }
        for h in handles {
            for (i, result) in h.join().expect("worker panicked") {
                responses[i] = Some(result);
            }
        }
    });

    // Grade.
    let mut traces = Vec::with_capacity(test.len());
    let mut gold_labels = Vec::new();
    let mut pred_labels = Vec::new();
    let mut gold_spans: Vec<BTreeSet<EntitySpan>> = Vec::new();
    let mut pred_spans: Vec<BTreeSet<EntitySpan>> = Vec::new();
    for (i, (example, response)) in test.iter().zip(responses).enumerate() {
        let response = response.expect("every index filled")?;
        match &example.label {
            ExampleLabel::Sentiment(gold) => {
                let pred = parse_sentiment_response(&response).unwrap_or(Sentiment::Neutral);
                gold_labels.push(*gold);
                pred_labels.push(pred);
                traces.push(TraceLine {
                    index: i,
                    prompt: prompts[i].clone(),
                    response,
                    prediction: pred.as_str().to_string(),
                    correct: Some(pred == *gold),
                    span_counts: None,
                });
            }
            ExampleLabel::Bio(_) => {
                let parsed = parse_entity_response(&response);
                let pred = entities_to_spans(&parsed, &example.tokens);
                let gold = example.gold_spans().expect("bio label");
                let tp = gold.intersection(&pred).count();
                let fp = pred.difference(&gold).count();
                let fn_ = gold.difference(&pred).count();
                traces.push(TraceLine {
                    index: i,
                    prompt: prompts[i].clone(),
                    response,
                    prediction: render_entity_label(&parsed.entities),
                    correct: None,
                    span_counts: Some((tp, fp, fn_)),
                });
                gold_spans.push(gold);
                pred_spans.push(pred);
            }
        }
    }
    let metric = match task {
        Task::Sa => accuracy(&gold_labels, &pred_labels)
            .map_err(|e| anyhow::anyhow!("grading: {e}"))?
            .accuracy,
        Task::Ner => span_f1(&gold_spans, &pred_spans)
            .map_err(|e| anyhow::anyhow!("grading: {e}"))?
            .f1,
    };
    Ok(InferenceReport {
        task,
        mode,
        metric,
        examples: test.len(),
        traces,
    })
}
