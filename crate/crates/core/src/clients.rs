//! Text generation, judging and embedding services.
//!
//! Each interface has a deterministic offline stub (a pure function of its
//! inputs) and an HTTP implementation configured from `PRESSLM_LLM_ENDPOINT` and
//! `PRESSLM_LLM_KEY`.

use std::hash::Hasher;
use std::time::Duration;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::metrics::tokenize;

pub const ENDPOINT_VAR: &str = "PRESSLM_LLM_ENDPOINT";
pub const KEY_VAR: &str = "PRESSLM_LLM_KEY";

pub trait TextGenClient: Send + Sync {
    fn id(&self) -> String;
    fn generate(&self, prompt: &str, n: usize) -> Result<Vec<String>>;
}

pub trait JudgeClient: Send + Sync {
    fn id(&self) -> String;
    /// Quality of `candidate` against `reference`; nominally in `[0, 1]`.
    fn judge(&self, question: &str, candidate: &str, reference: &str, rubric: &str) -> Result<f64>;
}

pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    /// Unit-norm embedding of `text`.
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn l2_normalize(v: &mut [f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::data("cannot normalize a zero or non-finite vector"));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

fn fnv(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Signed feature hashing of lowercase words and character trigrams.
#[derive(Clone, Debug)]
pub struct HashEmbedding {
    pub dim: usize,
}

impl Default for HashEmbedding {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

impl EmbeddingProvider for HashEmbedding {
    fn id(&self) -> String {
        format!("hash-ngram-{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        let mut add = |feature: &[u8], weight: f64| {
            let h = fnv(feature);
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign * weight;
        };
        for word in tokenize(text) {
            add(word.as_bytes(), 1.0);
            let padded: Vec<u8> = std::iter::once(b' ')
                .chain(word.bytes())
                .chain(std::iter::once(b' '))
                .collect();
            for tri in padded.windows(3) {
                add(tri, 0.5);
            }
        }
        l2_normalize(&mut v).map_err(|_| Error::data(format!("nothing to embed in {text:?}")))?;
        Ok(v)
    }
}

/// Section markers the pipeline writes into generation prompts; the stub
/// generator reads them back.
pub const DESCRIPTION_TAG: &str = "description:";
pub const KNOWLEDGE_TAG: &str = "knowledge:";
pub const TASK_TAG: &str = "task:";
pub const QUESTION_TAG: &str = "question:";

fn section<'a>(prompt: &'a str, tag: &str) -> Option<&'a str> {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(tag))
        .map(str::trim)
}

fn bullet_lines(prompt: &str) -> Vec<&str> {
    prompt
        .lines()
        .filter_map(|l| l.strip_prefix("- "))
        .map(str::trim)
        .collect()
}

/// Template generator. Without a knowledge section it writes a question for
/// the task; with one it writes answers that quote the description and rotate
/// through the knowledge lines.
#[derive(Clone, Debug, Default)]
pub struct StubTextGen;

impl TextGenClient for StubTextGen {
    fn id(&self) -> String {
        "stub-template".into()
    }

    fn generate(&self, prompt: &str, n: usize) -> Result<Vec<String>> {
        let task = section(prompt, TASK_TAG)
            .and_then(|t| t.parse().ok())
            .unwrap_or(crate::prompt::TaskType::Description);
        let description = section(prompt, DESCRIPTION_TAG).unwrap_or("");
        let h = fnv(prompt.as_bytes()) as usize;
        if !prompt.contains(KNOWLEDGE_TAG) {
            let pool = crate::synth::instructions(task);
            return Ok((0..n).map(|i| pool[(h + i) % pool.len()].to_string()).collect());
        }
        let knowledge = bullet_lines(prompt);
        Ok((0..n)
            .map(|i| {
                let mut parts = Vec::new();
                match i % 3 {
                    0 => parts.push(description.to_string()),
                    1 => parts.push(format!("the reading shows {description}")),
                    _ => {}
                }
                for j in 0..knowledge.len().min(2) {
                    parts.push(knowledge[(i + j) % knowledge.len()].to_string());
                }
                if parts.is_empty() {
                    parts.push(format!("no details are available for this {task} request."));
                }
                parts.join(" ")
            })
            .collect())
    }
}

/// Unigram F1 between candidate and reference tokens; equal texts score 1.
#[derive(Clone, Debug, Default)]
pub struct StubJudge;

pub fn unigram_f1(candidate: &str, reference: &str) -> f64 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c == r {
        return 1.0;
    }
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut counts = std::collections::HashMap::new();
    for t in &r {
        *counts.entry(t.as_str()).or_insert(0usize) += 1;
    }
    let mut overlap = 0usize;
    for t in &c {
        if let Some(n) = counts.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / c.len() as f64;
    let r = overlap as f64 / r.len() as f64;
    2.0 * p * r / (p + r)
}

impl JudgeClient for StubJudge {
    fn id(&self) -> String {
        "stub-unigram-f1".into()
    }

    fn judge(&self, _question: &str, candidate: &str, reference: &str, _rubric: &str) -> Result<f64> {
        Ok(unigram_f1(candidate, reference))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay_ms: 200,
        }
    }
}

/// JSON-over-HTTP client. Requests go to `{endpoint}/generate`, `/judge` and
/// `/embed` with an optional bearer key.
#[derive(Clone, Debug)]
pub struct HttpClient {
    pub endpoint: String,
    pub key: Option<String>,
    pub retry: RetryPolicy,
    pub timeout: Duration,
}

impl HttpClient {
    pub fn new(endpoint: impl Into<String>, key: Option<String>) -> Self {
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            key,
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(60),
        }
    }

    /// `None` when the endpoint variable is unset or empty.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENDPOINT_VAR).ok().filter(|s| !s.is_empty())?;
        Some(Self::new(endpoint, std::env::var(KEY_VAR).ok().filter(|s| !s.is_empty())))
    }

    fn post(&self, path: &str, body: &serde_json::Value) -> Result<serde_json::Value> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let url = format!("{}/{path}", self.endpoint);
        let mut last = String::new();
        for attempt in 0..self.retry.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.retry.base_delay_ms << (attempt - 1)));
            }
            let mut req = agent.post(&url);
            if let Some(key) = &self.key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            match req.send_json(body) {
                Ok(mut resp) => match resp.body_mut().read_json::<serde_json::Value>() {
                    Ok(v) => return Ok(v),
                    Err(e) => last = format!("bad response body: {e}"),
                },
                Err(e) => last = e.to_string(),
            }
        }
        Err(Error::Client(format!(
            "{url} failed after {} attempts: {last}",
            self.retry.attempts.max(1)
        )))
    }
}

impl TextGenClient for HttpClient {
    fn id(&self) -> String {
        format!("http:{}", self.endpoint)
    }

    fn generate(&self, prompt: &str, n: usize) -> Result<Vec<String>> {
        let v = self.post("generate", &json!({ "prompt": prompt, "n": n }))?;
        let texts = v
            .get("texts")
            .and_then(|t| t.as_array())
            .ok_or_else(|| Error::Client("generation reply lacks \"texts\"".into()))?;
        Ok(texts.iter().filter_map(|t| t.as_str().map(String::from)).collect())
    }
}

impl JudgeClient for HttpClient {
    fn id(&self) -> String {
        format!("http:{}", self.endpoint)
    }

    fn judge(&self, question: &str, candidate: &str, reference: &str, rubric: &str) -> Result<f64> {
        let v = self.post(
            "judge",
            &json!({ "question": question, "candidate": candidate, "reference": reference, "rubric": rubric }),
        )?;
        v.get("score")
            .and_then(|s| s.as_f64())
            .ok_or_else(|| Error::Client("judge reply lacks a numeric \"score\"".into()))
    }
}

impl EmbeddingProvider for HttpClient {
    fn id(&self) -> String {
        format!("http:{}", self.endpoint)
    }

    fn dim(&self) -> usize {
        0
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let v = self.post("embed", &json!({ "text": text }))?;
        let mut e: Vec<f64> = v
            .get("embedding")
            .and_then(|e| e.as_array())
            .ok_or_else(|| Error::Client("embedding reply lacks \"embedding\"".into()))?
            .iter()
            .map(|x| x.as_f64().unwrap_or(f64::NAN))
            .collect();
        l2_normalize(&mut e)?;
        Ok(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_embedding_is_unit_and_deterministic() {
        let p = HashEmbedding::default();
        let a = p.embed("left thigh pressure").unwrap();
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(a, p.embed("left thigh pressure").unwrap());
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-12);
        assert!(p.embed("  ").is_err());
    }

    #[test]
    fn stub_judge_rules() {
        let j = StubJudge;
        assert_eq!(j.judge("q", "The cat.", "the cat.", "").unwrap(), 1.0);
        assert_eq!(j.judge("q", "dog", "cat", "").unwrap(), 0.0);
        let s = unigram_f1("the cat sat", "the cat");
        assert!((s - 0.8).abs() < 1e-12);
    }

    #[test]
    fn stub_generator_is_pure() {
        let g = StubTextGen;
        let p = "task: analysis\ndescription: leaning left\nknowledge:\n- a\n- b\n- c\n";
        let a = g.generate(p, 3).unwrap();
        assert_eq!(a, g.generate(p, 3).unwrap());
        assert_eq!(a.len(), 3);
        assert_eq!(a[0], "leaning left a b");
        let q = g.generate("task: question\ndescription: x\n", 1).unwrap();
        assert!(crate::synth::instructions(crate::prompt::TaskType::Question).contains(&q[0].as_str()));
    }
}
