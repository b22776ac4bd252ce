//! The quality gate's judging surface: a judge contract, deterministic mock
//! judges for offline runs, and an external MLLM client speaking
//! JSON-over-HTTP chat with editable instruction templates.

use std::collections::VecDeque;
use std::time::Duration;

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::generator::PLACEHOLDER;
use crate::linalg::DetRng;
use crate::sampler::RenderOutput;

/// Default evaluation-prompt instruction, editable at `judge/t_e.txt`.
pub const DEFAULT_T_E: &str = include_str!("../../../judge/t_e.txt");
/// Default assessment instruction, editable at `judge/t_a.txt`.
pub const DEFAULT_T_A: &str = include_str!("../../../judge/t_a.txt");

/// Scored judgement of a generated image against its reference.
#[derive(Clone, Debug, Serialize)]
pub struct JudgeVerdict {
    /// Customization score, 0 (worst) to 4 (best). Out-of-range values are
    /// rejected at parse time, never clamped.
    pub score: u8,
    pub rationale: String,
    pub criteria: CriteriaNotes,
}

/// Sub-notes along the three scoring criteria.
#[derive(Clone, Debug, Default, Serialize)]
pub struct CriteriaNotes {
    /// Does the target character appear at all?
    pub attendance: String,
    /// How closely does it match the reference?
    pub consistency: String,
    /// Does the overall look fit the story world?
    pub style: String,
}

impl JudgeVerdict {
    pub fn new(score: u8, rationale: String, criteria: CriteriaNotes) -> Result<Self> {
        if score > 4 {
            return Err(Error::JudgeParse {
                reason: format!("score {score} outside 0..=4"),
                raw: rationale,
            });
        }
        Ok(Self { score, rationale, criteria })
    }
}

/// Request phases of the judging protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JudgePhase {
    PromptGeneration,
    Assessment,
}

/// One wire request: instruction template plus image payloads. Assessment
/// requests always carry both images.
#[derive(Clone, Debug)]
pub struct JudgeRequest {
    pub phase: JudgePhase,
    pub template: String,
    pub reference_ppm: Vec<u8>,
    pub candidate_ppm: Option<Vec<u8>>,
}

impl JudgeRequest {
    pub fn prompt_generation(template: &str, reference_ppm: Vec<u8>) -> Self {
        Self {
            phase: JudgePhase::PromptGeneration,
            template: template.to_string(),
            reference_ppm,
            candidate_ppm: None,
        }
    }

    pub fn assessment(template: &str, reference_ppm: Vec<u8>, candidate_ppm: Vec<u8>) -> Self {
        Self {
            phase: JudgePhase::Assessment,
            template: template.to_string(),
            reference_ppm,
            candidate_ppm: Some(candidate_ppm),
        }
    }
}

/// The gate's view of a judge: produce an evaluation prompt from a sampled
/// reference image, then score a rendered candidate against it. Judging is
/// observation-only; implementations never touch engine state.
pub trait Judge {
    fn generate_prompt(
        &mut self,
        rng: &mut DetRng,
        character_id: &str,
        reference: &RenderOutput,
    ) -> Result<String>;

    fn assess(&mut self, reference: &RenderOutput, candidate: &RenderOutput)
        -> Result<JudgeVerdict>;
}

/// Novel-context phrases combined with the character placeholder by the
/// deterministic prompt generator. All words sit in the default vocabulary.
const PROMPT_CONTEXTS: [&str; 8] = [
    "in a snowy forest",
    "by the quiet sea",
    "under tall trees",
    "beside a campfire",
    "on a mountain trail",
    "in a busy market",
    "near the old bridge",
    "at the harbor at dusk",
];

/// Seeded pick from the fixed template list; always contains the
/// character placeholder.
pub fn mock_generate_prompt(rng: &mut DetRng, _character_id: &str) -> String {
    let context = PROMPT_CONTEXTS[rng.index(PROMPT_CONTEXTS.len())];
    format!("{PLACEHOLDER} {context}")
}

/// Judge with a preset score queue; assessments pop scores in order.
#[derive(Debug, Default)]
pub struct ScriptedJudge {
    queue: VecDeque<u8>,
}

impl ScriptedJudge {
    pub fn new(scores: &[u8]) -> Self {
        assert!(scores.iter().all(|&s| s <= 4), "scripted scores must be 0..=4");
        Self { queue: scores.iter().copied().collect() }
    }

    /// Endless repetition of one score.
    pub fn constant(score: u8, len: usize) -> Self {
        Self::new(&vec![score; len])
    }
}

impl Judge for ScriptedJudge {
    fn generate_prompt(
        &mut self,
        rng: &mut DetRng,
        character_id: &str,
        _reference: &RenderOutput,
    ) -> Result<String> {
        Ok(mock_generate_prompt(rng, character_id))
    }

    fn assess(
        &mut self,
        _reference: &RenderOutput,
        _candidate: &RenderOutput,
    ) -> Result<JudgeVerdict> {
        let score = self.queue.pop_front().ok_or(Error::ScriptedQueueEmpty)?;
        JudgeVerdict::new(
            score,
            format!("scripted score {score}"),
            CriteriaNotes::default(),
        )
    }
}

/// Cosine bin edges of the similarity judge: [-1,0.2) -> 0, [0.2,0.4) -> 1,
/// [0.4,0.6) -> 2, [0.6,0.8) -> 3, [0.8,1] -> 4.
#[derive(Clone, Copy, Debug)]
pub struct SimilarityBins(pub [f64; 4]);

impl Default for SimilarityBins {
    fn default() -> Self {
        Self([0.2, 0.4, 0.6, 0.8])
    }
}

impl SimilarityBins {
    pub fn score(&self, cosine: f64) -> u8 {
        let mut score = 0u8;
        for edge in self.0 {
            if cosine >= edge {
                score += 1;
            }
        }
        score
    }
}

/// Offline stand-in for MLLM judgement: maps the cosine between candidate
/// and reference latent features onto the 0..4 scale.
#[derive(Debug, Default)]
pub struct SimilarityJudge {
    pub bins: SimilarityBins,
}

pub fn latent_cosine(a: &RenderOutput, b: &RenderOutput) -> f64 {
    let av = a.latent.tokens.data();
    let bv = b.latent.tokens.data();
    assert_eq!(av.len(), bv.len(), "latent features must have equal shapes");
    let dot: f64 = av.iter().zip(bv).map(|(x, y)| x * y).sum();
    let na: f64 = av.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = bv.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

impl Judge for SimilarityJudge {
    fn generate_prompt(
        &mut self,
        rng: &mut DetRng,
        character_id: &str,
        _reference: &RenderOutput,
    ) -> Result<String> {
        Ok(mock_generate_prompt(rng, character_id))
    }

    fn assess(
        &mut self,
        reference: &RenderOutput,
        candidate: &RenderOutput,
    ) -> Result<JudgeVerdict> {
        let cosine = latent_cosine(reference, candidate);
        let score = self.bins.score(cosine);
        JudgeVerdict::new(
            score,
            format!("latent feature cosine {cosine:.4}"),
            CriteriaNotes {
                attendance: format!("feature energy present: cosine {cosine:.4} vs reference"),
                consistency: format!("cosine bin -> score {score}"),
                style: "not separately assessed by the similarity stand-in".into(),
            },
        )
    }
}

/// Connection settings for the external MLLM judge.
#[derive(Clone, Debug)]
pub struct HttpJudgeConfig {
    pub url: String,
    pub token: Option<String>,
    pub timeout: Duration,
    pub model: String,
    /// Total tries per request (first try + retries) on transport failure.
    pub max_tries: usize,
    /// Base backoff, doubled per retry.
    pub backoff: Duration,
    pub template_t_e: String,
    pub template_t_a: String,
}

impl HttpJudgeConfig {
    /// Read JUDGE_URL, JUDGE_TOKEN, JUDGE_TIMEOUT_MS from the environment.
    /// Templates come from `judge/t_e.txt` / `judge/t_a.txt` when present in
    /// the working directory, else the built-in defaults.
    pub fn from_env() -> Result<Self> {
        let url = std::env::var("JUDGE_URL")
            .map_err(|_| Error::JudgeUnavailable("JUDGE_URL is not set".into()))?;
        let token = std::env::var("JUDGE_TOKEN").ok();
        let timeout_ms = std::env::var("JUDGE_TIMEOUT_MS")
            .ok()
            .and_then(|v| v.parse::<u64>().ok())
            .unwrap_or(30_000);
        let load = |path: &str, fallback: &str| {
            std::fs::read_to_string(path).unwrap_or_else(|_| fallback.to_string())
        };
        Ok(Self {
            url,
            token,
            timeout: Duration::from_millis(timeout_ms),
            model: std::env::var("JUDGE_MODEL").unwrap_or_else(|_| "default".into()),
            max_tries: 3,
            backoff: Duration::from_millis(200),
            template_t_e: load("judge/t_e.txt", DEFAULT_T_E),
            template_t_a: load("judge/t_a.txt", DEFAULT_T_A),
        })
    }
}

/// Chat-completions client for MLLM judging.
pub struct HttpJudge {
    cfg: HttpJudgeConfig,
    agent: ureq::Agent,
}

/// The JSON chat body for a judge request: a single user message whose
/// content holds the instruction text plus base-64 data-URI image parts.
pub fn chat_body(model: &str, request: &JudgeRequest) -> Value {
    let mut content = vec![json!({ "type": "text", "text": request.template })];
    let data_uri = |bytes: &[u8]| {
        format!("data:image/x-portable-pixmap;base64,{}", base64_encode(bytes))
    };
    content.push(json!({ "type": "image", "data": data_uri(&request.reference_ppm) }));
    if let Some(candidate) = &request.candidate_ppm {
        content.push(json!({ "type": "image", "data": data_uri(candidate) }));
    }
    json!({
        "model": model,
        "messages": [ { "role": "user", "content": content } ],
    })
}

/// Minimal base64 (standard alphabet, padded); the payloads are small PPMs.
pub fn base64_encode(bytes: &[u8]) -> String {
    const TABLE: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    let mut out = String::with_capacity(bytes.len().div_ceil(3) * 4);
    for chunk in bytes.chunks(3) {
        let b = [chunk[0], *chunk.get(1).unwrap_or(&0), *chunk.get(2).unwrap_or(&0)];
        let n = ((b[0] as u32) << 16) | ((b[1] as u32) << 8) | b[2] as u32;
        out.push(TABLE[(n >> 18) as usize & 63] as char);
        out.push(TABLE[(n >> 12) as usize & 63] as char);
        out.push(if chunk.len() > 1 { TABLE[(n >> 6) as usize & 63] as char } else { '=' });
        out.push(if chunk.len() > 2 { TABLE[n as usize & 63] as char } else { '=' });
    }
    out
}

/// Pull the assistant text out of a chat-completions response, accepting
/// the common shapes: choices[0].message.content as a string or an array of
/// text parts, a top-level content field, or raw text.
pub fn extract_text(body: &str) -> String {
    if let Ok(v) = serde_json::from_str::<Value>(body) {
        let content = v
            .pointer("/choices/0/message/content")
            .or_else(|| v.get("content"))
            .cloned()
            .unwrap_or(Value::Null);
        match content {
            Value::String(s) => return s,
            Value::Array(parts) => {
                let text: Vec<String> = parts
                    .iter()
                    .filter_map(|p| p.get("text").and_then(|t| t.as_str()).map(String::from))
                    .collect();
                if !text.is_empty() {
                    return text.join("\n");
                }
            }
            _ => {}
        }
    }
    body.to_string()
}

/// The final structured line of an assessment reply: `Score: <0-4>`.
/// Out-of-range or missing scores are parse errors, never clamped.
pub fn parse_score(text: &str) -> Result<u8> {
    for line in text.lines().rev() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("Score:") {
            let value: i64 = rest.trim().parse().map_err(|_| Error::JudgeParse {
                reason: format!("unparseable score value '{}'", rest.trim()),
                raw: text.to_string(),
            })?;
            if !(0..=4).contains(&value) {
                return Err(Error::JudgeParse {
                    reason: format!("score {value} outside 0..=4"),
                    raw: text.to_string(),
                });
            }
            return Ok(value as u8);
        }
    }
    Err(Error::JudgeParse { reason: "no 'Score: <0-4>' line found".into(), raw: text.to_string() })
}

impl HttpJudge {
    pub fn new(cfg: HttpJudgeConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(true)
            .build()
            .into();
        Self { cfg, agent }
    }

    pub fn from_env() -> Result<Self> {
        Ok(Self::new(HttpJudgeConfig::from_env()?))
    }

    /// POST with retries on transport failure, exponential backoff.
    fn send(&self, request: &JudgeRequest) -> Result<String> {
        let body = chat_body(&self.cfg.model, request).to_string();
        let mut last_err = String::new();
        for attempt in 0..self.cfg.max_tries {
            if attempt > 0 {
                std::thread::sleep(self.cfg.backoff * (1 << (attempt - 1)) as u32);
            }
            let mut req = self
                .agent
                .post(&self.cfg.url)
                .header("content-type", "application/json");
            if let Some(token) = &self.cfg.token {
                req = req.header("authorization", &format!("Bearer {token}"));
            }
            match req.send(body.as_bytes()) {
                Ok(mut resp) => match resp.body_mut().read_to_string() {
                    Ok(text) => return Ok(text),
                    Err(e) => last_err = format!("read error: {e}"),
                },
                Err(e) => last_err = format!("transport error: {e}"),
            }
        }
        Err(Error::JudgeUnavailable(format!(
            "{} after {} tries: {last_err}",
            self.cfg.url, self.cfg.max_tries
        )))
    }
}

impl Judge for HttpJudge {
    fn generate_prompt(
        &mut self,
        _rng: &mut DetRng,
        _character_id: &str,
        reference: &RenderOutput,
    ) -> Result<String> {
        let request =
            JudgeRequest::prompt_generation(&self.cfg.template_t_e, reference.ppm.clone());
        let text = extract_text(&self.send(&request)?);
        let prompt = text.trim();
        if prompt.is_empty() {
            return Err(Error::JudgeParse {
                reason: "empty evaluation prompt".into(),
                raw: text.clone(),
            });
        }
        Ok(prompt.to_string())
    }

    fn assess(
        &mut self,
        reference: &RenderOutput,
        candidate: &RenderOutput,
    ) -> Result<JudgeVerdict> {
        let request = JudgeRequest::assessment(
            &self.cfg.template_t_a,
            reference.ppm.clone(),
            candidate.ppm.clone(),
        );
        let text = extract_text(&self.send(&request)?);
        let score = parse_score(&text)?;
        JudgeVerdict::new(score, text, CriteriaNotes::default())
    }
}
