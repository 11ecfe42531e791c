//! Client for OpenAI-compatible endpoints that return per-token
//! log-probabilities.
//!
//! Every query asks for a single generated token and scores the candidate
//! answers (option labels, digits, or Yes/No) by a softmax over their
//! first-token log-probabilities. Log-probabilities differ from logits by
//! a per-position constant, so the restricted softmax is the same.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dependency::PrerequisiteScorer;
use crate::model::{renormalize, ObservationScores, ProgressDistribution, PROGRESS_LEVELS};

use super::prompts::{
    build_binary_vsg_prompt, build_next_step_prompt, build_prereq_prompt, build_progress_prompt,
    build_vsg_prompt, FULL_LABEL_INSTRUCTION,
};
use super::{
    option_labels, restricted_softmax, MediaRef, ObservationProvider, ProviderError, SegmentRequest,
};

/// Request and response field layout of the endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dialect {
    /// `POST {base}/chat/completions` with `logprobs`/`top_logprobs`;
    /// media is sent as a `video_url` content part.
    #[default]
    Chat,
    /// `POST {base}/completions` with integer `logprobs`; text only, media
    /// references travel in a top-level `media` field.
    Completions,
}

/// Multi-choice prompt style used for step scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VsgPrompt {
    /// One query per segment listing every step.
    #[default]
    MultiChoice,
    /// One yes/no query per step and segment.
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteEndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub max_concurrent: usize,
    pub timeout_s: f64,
    pub retries: u32,
    pub backoff_ms: u64,
    /// Frames the endpoint should sample from each segment.
    pub frames_per_segment: u32,
    pub top_logprobs: u32,
    pub dialect: Dialect,
    pub vsg_prompt: VsgPrompt,
    /// Samples drawn when the endpoint cannot return log-probabilities for
    /// a yes/no question.
    pub fallback_samples: u32,
}

impl Default for RemoteEndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: String::new(),
            api_key_env: None,
            max_concurrent: 4,
            timeout_s: 60.0,
            retries: 3,
            backoff_ms: 500,
            frames_per_segment: 8,
            top_logprobs: 20,
            dialect: Dialect::Chat,
            vsg_prompt: VsgPrompt::MultiChoice,
            fallback_samples: 5,
        }
    }
}

impl RemoteEndpointConfig {
    pub fn validate(&self) -> Result<(), ProviderError> {
        if !(self.timeout_s.is_finite() && self.timeout_s > 0.0) {
            return Err(ProviderError::Config("timeout must be positive".into()));
        }
        if self.max_concurrent == 0 {
            return Err(ProviderError::Config(
                "concurrency must be at least 1".into(),
            ));
        }
        if self.top_logprobs == 0 {
            return Err(ProviderError::Config(
                "top_logprobs must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

struct Semaphore {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            available: Mutex::new(permits),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut available = self.available.lock().unwrap();
        while *available == 0 {
            available = self.freed.wait(available).unwrap();
        }
        *available -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

/// Top alternatives at each generated position.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenLogprobs {
    /// Token actually generated at each position.
    pub generated: Vec<String>,
    /// `(token, logprob)` alternatives at each position.
    pub top: Vec<Vec<(String, f64)>>,
}

/// Video segment attached to a query.
#[derive(Debug, Clone, Copy)]
pub struct SegmentMedia<'a> {
    pub media: &'a MediaRef,
    pub start_s: f64,
    pub end_s: f64,
}

pub struct RemoteClient {
    config: RemoteEndpointConfig,
    http: reqwest::blocking::Client,
    token: Option<String>,
    permits: Semaphore,
}

impl RemoteClient {
    pub fn new(config: RemoteEndpointConfig) -> Result<Self, ProviderError> {
        config.validate()?;
        let token = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                ProviderError::Config(format!("environment variable `{var}` is not set"))
            })?),
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_s))
            .build()
            .map_err(|e| ProviderError::Config(e.to_string()))?;
        let permits = Semaphore::new(config.max_concurrent);
        Ok(Self {
            config,
            http,
            token,
            permits,
        })
    }

    pub fn config(&self) -> &RemoteEndpointConfig {
        &self.config
    }

    fn url(&self) -> String {
        let base = self.config.base_url.trim_end_matches('/');
        match self.config.dialect {
            Dialect::Chat => format!("{base}/chat/completions"),
            Dialect::Completions => format!("{base}/completions"),
        }
    }

    fn post(&self, body: &Value) -> Result<Value, ProviderError> {
        let _permit = self.permits.acquire();
        let url = self.url();
        let mut last = ProviderError::Unavailable("no attempt made".into());
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                let delay = self
                    .config
                    .backoff_ms
                    .saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            let mut request = self.http.post(&url).json(body);
            if let Some(token) = &self.token {
                request = request.bearer_auth(token);
            }
            match request.send() {
                Ok(response) => {
                    let status = response.status();
                    let text = response
                        .text()
                        .map_err(|e| ProviderError::Unavailable(e.to_string()));
                    let text = match text {
                        Ok(t) => t,
                        Err(e) => {
                            last = e;
                            continue;
                        }
                    };
                    if status.is_success() {
                        return serde_json::from_str(&text)
                            .map_err(|_| ProviderError::MalformedResponse { raw: text });
                    }
                    if status.as_u16() == 429 || status.is_server_error() {
                        last = ProviderError::Unavailable(format!("status {status}: {text}"));
                        continue;
                    }
                    return Err(ProviderError::Rejected {
                        status: status.as_u16(),
                        body: text,
                    });
                }
                Err(e) => last = ProviderError::Unavailable(e.to_string()),
            }
            warn!("request to {url} failed (attempt {}): {last}", attempt + 1);
        }
        Err(last)
    }

    fn request_body(
        &self,
        prompt: &str,
        media: Option<SegmentMedia<'_>>,
        max_tokens: u32,
    ) -> Value {
        let cfg = &self.config;
        match cfg.dialect {
            Dialect::Chat => {
                let mut content = Vec::new();
                if let Some(m) = media {
                    content.push(json!({
                        "type": "video_url",
                        "video_url": {
                            "url": format!("{}#t={},{}", m.media.uri, m.start_s, m.end_s),
                            "num_frames": cfg.frames_per_segment,
                        }
                    }));
                }
                content.push(json!({"type": "text", "text": prompt}));
                json!({
                    "model": cfg.model,
                    "messages": [{"role": "user", "content": content}],
                    "max_tokens": max_tokens,
                    "temperature": 0.0,
                    "logprobs": true,
                    "top_logprobs": cfg.top_logprobs,
                })
            }
            Dialect::Completions => {
                let mut body = json!({
                    "model": cfg.model,
                    "prompt": prompt,
                    "max_tokens": max_tokens,
                    "temperature": 0.0,
                    "logprobs": cfg.top_logprobs,
                });
                if let Some(m) = media {
                    body["media"] = json!({
                        "url": m.media.uri,
                        "start_s": m.start_s,
                        "end_s": m.end_s,
                        "num_frames": cfg.frames_per_segment,
                    });
                }
                body
            }
        }
    }

    /// Generates up to `max_tokens` greedy tokens and returns the top
    /// alternatives at each position.
    pub fn token_logprobs(
        &self,
        prompt: &str,
        media: Option<SegmentMedia<'_>>,
        max_tokens: u32,
    ) -> Result<TokenLogprobs, ProviderError> {
        let response = self.post(&self.request_body(prompt, media, max_tokens))?;
        let parsed = match self.config.dialect {
            Dialect::Chat => parse_chat_logprobs(&response),
            Dialect::Completions => parse_completion_logprobs(&response),
        }?;
        if parsed.top.first().is_none_or(Vec::is_empty) {
            return Err(ProviderError::LogitsUnavailable(
                "response carries no first-token alternatives".into(),
            ));
        }
        Ok(parsed)
    }

    /// Draws `n` sampled completions without log-probabilities.
    pub fn sample_texts(&self, prompt: &str, n: u32) -> Result<Vec<String>, ProviderError> {
        let cfg = &self.config;
        let body = match cfg.dialect {
            Dialect::Chat => json!({
                "model": cfg.model,
                "messages": [{"role": "user", "content": [{"type": "text", "text": prompt}]}],
                "max_tokens": 3,
                "temperature": 1.0,
                "n": n,
            }),
            Dialect::Completions => json!({
                "model": cfg.model,
                "prompt": prompt,
                "max_tokens": 3,
                "temperature": 1.0,
                "n": n,
            }),
        };
        let response = self.post(&body)?;
        let malformed = || ProviderError::MalformedResponse {
            raw: response.to_string(),
        };
        let choices = response["choices"].as_array().ok_or_else(malformed)?;
        choices
            .iter()
            .map(|c| {
                c["message"]["content"]
                    .as_str()
                    .or_else(|| c["text"].as_str())
                    .map(str::to_string)
                    .ok_or_else(malformed)
            })
            .collect()
    }
}

fn parse_chat_logprobs(response: &Value) -> Result<TokenLogprobs, ProviderError> {
    let choice = response["choices"]
        .get(0)
        .ok_or_else(|| ProviderError::MalformedResponse {
            raw: response.to_string(),
        })?;
    let Some(content) = choice["logprobs"]["content"].as_array() else {
        return Err(ProviderError::LogitsUnavailable(
            "chat response has no logprobs.content".into(),
        ));
    };
    let mut out = TokenLogprobs::default();
    for position in content {
        let generated = position["token"].as_str().unwrap_or_default().to_string();
        let alternatives = position["top_logprobs"]
            .as_array()
            .map(|alts| {
                alts.iter()
                    .filter_map(|a| {
                        Some((a["token"].as_str()?.to_string(), a["logprob"].as_f64()?))
                    })
                    .collect()
            })
            .unwrap_or_default();
        out.generated.push(generated);
        out.top.push(alternatives);
    }
    Ok(out)
}

fn parse_completion_logprobs(response: &Value) -> Result<TokenLogprobs, ProviderError> {
    let choice = response["choices"]
        .get(0)
        .ok_or_else(|| ProviderError::MalformedResponse {
            raw: response.to_string(),
        })?;
    let logprobs = &choice["logprobs"];
    let Some(top) = logprobs["top_logprobs"].as_array() else {
        return Err(ProviderError::LogitsUnavailable(
            "completion response has no logprobs.top_logprobs".into(),
        ));
    };
    let generated = logprobs["tokens"]
        .as_array()
        .map(|t| {
            t.iter()
                .filter_map(|s| s.as_str().map(str::to_string))
                .collect()
        })
        .unwrap_or_default();
    let top = top
        .iter()
        .map(|position| {
            position
                .as_object()
                .map(|m| {
                    let mut alts: Vec<(String, f64)> = m
                        .iter()
                        .filter_map(|(k, v)| Some((k.clone(), v.as_f64()?)))
                        .collect();
                    alts.sort_by(|a, b| a.0.cmp(&b.0));
                    alts
                })
                .unwrap_or_default()
        })
        .collect();
    Ok(TokenLogprobs { generated, top })
}

/// Total probability (unnormalized, relative to the position's
/// log-partition) of alternatives whose trimmed text satisfies `matches`.
fn mass(alternatives: &[(String, f64)], matches: impl Fn(&str) -> bool) -> f64 {
    alternatives
        .iter()
        .filter(|(tok, _)| matches(tok.trim()))
        .map(|(_, lp)| lp.exp())
        .sum()
}

fn log_mass(alternatives: &[(String, f64)], matches: impl Fn(&str) -> bool) -> f64 {
    let m = mass(alternatives, matches);
    if m > 0.0 {
        m.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Scores candidate answers by their first-token log-probabilities.
///
/// Fails with [`ProviderError::LabelTokenCollision`] when a multi-letter
/// label never appears as a token while one of its prefixes that is also a
/// label does, which means the labels share a first token.
pub fn score_first_token(
    logprobs: &TokenLogprobs,
    candidates: &[String],
) -> Result<Vec<f64>, ProviderError> {
    let first = &logprobs.top[0];
    let present = |label: &str| first.iter().any(|(tok, _)| tok.trim() == label);
    let mut collided = Vec::new();
    for label in candidates.iter().filter(|l| l.len() > 1) {
        if present(label) {
            continue;
        }
        if let Some(prefix) = candidates
            .iter()
            .find(|p| p.len() < label.len() && label.starts_with(p.as_str()) && present(p))
        {
            collided.push(prefix.clone());
            collided.push(label.clone());
        }
    }
    if !collided.is_empty() {
        collided.sort();
        collided.dedup();
        return Err(ProviderError::LabelTokenCollision { labels: collided });
    }
    let logits: Vec<f64> = candidates
        .iter()
        .map(|c| log_mass(first, |tok| tok == c))
        .collect();
    restricted_softmax(&logits).ok_or_else(|| {
        ProviderError::LogitsUnavailable("no candidate answer among the top first tokens".into())
    })
}

/// Scores labels spelled over up to two generated tokens. Labels sharing
/// the generated first token are separated by the second position; labels
/// whose shared first token was not the generated one cannot be separated.
pub fn score_full_labels(
    logprobs: &TokenLogprobs,
    labels: &[String],
) -> Result<Vec<f64>, ProviderError> {
    let first = &logprobs.top[0];
    let generated = logprobs.generated.first().map(|g| g.trim().to_string());
    let second = logprobs.top.get(1);
    let mut unresolved = Vec::new();
    let mut weights = Vec::with_capacity(labels.len());
    for label in labels {
        let extended = labels
            .iter()
            .any(|l| l.len() > label.len() && l.starts_with(label.as_str()));
        // Longest prefix of the label that was offered as a first token.
        let prefix = (1..=label.len())
            .rev()
            .map(|n| &label[..n])
            .find(|p| first.iter().any(|(tok, _)| tok.trim() == *p));
        let weight = match prefix {
            None => 0.0,
            Some(p) if p == label && !extended => mass(first, |tok| tok == p),
            Some(p) => {
                if generated.as_deref() != Some(p) {
                    unresolved.push(label.clone());
                    0.0
                } else {
                    let rest = &label[p.len()..];
                    let continuation = second.map_or(0.0, |alts| {
                        if rest.is_empty() {
                            mass(alts, |tok| {
                                !tok.starts_with(|c: char| c.is_ascii_uppercase())
                            })
                        } else {
                            mass(alts, |tok| tok == rest)
                        }
                    });
                    mass(first, |tok| tok == p) * continuation
                }
            }
        };
        weights.push(weight);
    }
    if !unresolved.is_empty() {
        return Err(ProviderError::LabelTokenCollision { labels: unresolved });
    }
    renormalize(&weights)
        .ok_or_else(|| ProviderError::LogitsUnavailable("no option label could be scored".into()))
}

fn yes_no(alternatives: &TokenLogprobs) -> Result<f64, ProviderError> {
    let first = &alternatives.top[0];
    let logits = [
        log_mass(first, |t| t.eq_ignore_ascii_case("yes")),
        log_mass(first, |t| t.eq_ignore_ascii_case("no")),
    ];
    restricted_softmax(&logits).map(|p| p[0]).ok_or_else(|| {
        ProviderError::LogitsUnavailable("neither Yes nor No among the top first tokens".into())
    })
}

/// Observation provider and prerequisite scorer backed by a remote model.
pub struct RemoteProvider {
    client: RemoteClient,
}

impl RemoteProvider {
    pub fn new(config: RemoteEndpointConfig) -> Result<Self, ProviderError> {
        Ok(Self {
            client: RemoteClient::new(config)?,
        })
    }

    pub fn client(&self) -> &RemoteClient {
        &self.client
    }

    fn media<'a>(req: &SegmentRequest<'a>) -> Option<SegmentMedia<'a>> {
        req.media.map(|media| SegmentMedia {
            media,
            start_s: req.start_s,
            end_s: req.end_s,
        })
    }

    /// Multi-choice scoring, re-querying for full labels on a collision.
    fn score_options(
        &self,
        prompt: &str,
        media: Option<SegmentMedia<'_>>,
        labels: &[String],
    ) -> Result<Vec<f64>, ProviderError> {
        let first = self.client.token_logprobs(prompt, media, 1)?;
        match score_first_token(&first, labels) {
            Err(ProviderError::LabelTokenCollision { labels: collided }) => {
                warn!(
                    "option labels {collided:?} share a first token; re-querying for full labels"
                );
                let prompt = format!("{prompt}\n{FULL_LABEL_INSTRUCTION}");
                let longest = labels.iter().map(String::len).max().unwrap_or(1) as u32;
                let full = self.client.token_logprobs(&prompt, media, longest + 1)?;
                score_full_labels(&full, labels)
            }
            other => other,
        }
    }

    fn binary_scores(&self, req: &SegmentRequest<'_>) -> Result<ObservationScores, ProviderError> {
        let task = req.task;
        let mut weights = Vec::with_capacity(task.num_states());
        for step in 0..task.num_steps() {
            let prompt = build_binary_vsg_prompt(task, step);
            let answer = self.client.token_logprobs(&prompt, Self::media(req), 1)?;
            weights.push(yes_no(&answer)?);
        }
        let most_likely = weights.iter().copied().fold(0.0, f64::max);
        weights.push(1.0 - most_likely);
        ObservationScores::from_weights(&weights)
            .map_err(|e| ProviderError::MalformedResponse { raw: e.to_string() })
    }
}

fn to_scores(weights: Vec<f64>) -> Result<ObservationScores, ProviderError> {
    ObservationScores::new(weights)
        .map_err(|e| ProviderError::MalformedResponse { raw: e.to_string() })
}

impl ObservationProvider for RemoteProvider {
    fn vsg_scores(&self, req: &SegmentRequest<'_>) -> Result<ObservationScores, ProviderError> {
        match self.client.config.vsg_prompt {
            VsgPrompt::MultiChoice => {
                let labels = option_labels(req.task.num_steps());
                let weights =
                    self.score_options(&build_vsg_prompt(req.task), Self::media(req), &labels)?;
                to_scores(weights)
            }
            VsgPrompt::Binary => self.binary_scores(req),
        }
    }

    fn progress_scores(
        &self,
        req: &SegmentRequest<'_>,
        step: usize,
    ) -> Result<ProgressDistribution, ProviderError> {
        let prompt = build_progress_prompt(req.task, step);
        let answer = self.client.token_logprobs(&prompt, Self::media(req), 1)?;
        let digits: Vec<String> = (0..PROGRESS_LEVELS).map(|d| d.to_string()).collect();
        let weights = score_first_token(&answer, &digits)?;
        ProgressDistribution::new(weights)
            .map_err(|e| ProviderError::MalformedResponse { raw: e.to_string() })
    }

    fn next_step_scores(
        &self,
        req: &SegmentRequest<'_>,
    ) -> Result<Option<ObservationScores>, ProviderError> {
        let labels = option_labels(req.task.num_steps());
        let weights =
            self.score_options(&build_next_step_prompt(req.task), Self::media(req), &labels)?;
        to_scores(weights).map(Some)
    }
}

impl PrerequisiteScorer for RemoteProvider {
    fn prerequisite_probability(
        &self,
        goal: &str,
        step: &str,
        prerequisite: &str,
    ) -> Result<f64, ProviderError> {
        let prompt = build_prereq_prompt(goal, step, prerequisite);
        match self.client.token_logprobs(&prompt, None, 1) {
            Ok(answer) => yes_no(&answer),
            Err(ProviderError::LogitsUnavailable(reason)) => {
                let n = self.client.config.fallback_samples.max(1);
                debug!("no logprobs ({reason}); estimating from {n} samples");
                let samples = self.client.sample_texts(&prompt, n)?;
                let yes = samples
                    .iter()
                    .filter(|s| s.trim_start().to_ascii_lowercase().starts_with("yes"))
                    .count();
                Ok(yes as f64 / samples.len().max(1) as f64)
            }
            Err(e) => Err(e),
        }
    }
}
