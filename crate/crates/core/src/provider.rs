//! External model services behind small traits.
//!
//! Every provider has an HTTP client speaking the declared JSON protocol and a
//! deterministic stub for tests and fixture runs. Transport failures are
//! retried with exponential backoff by [`with_retries`]; malformed payloads are
//! not retried.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mask::{BBox, BinaryMask, RleMask};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderError {
    /// Connection failure, timeout or non-success status; retryable.
    Transport(String),
    /// The service answered but the payload does not follow the protocol.
    Malformed(String),
}

impl std::fmt::Display for ProviderError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProviderError::Transport(m) => write!(f, "transport: {m}"),
            ProviderError::Malformed(m) => write!(f, "malformed: {m}"),
        }
    }
}

pub type ProviderResult<T> = std::result::Result<T, ProviderError>;

/// Completion-style language model (extraction, question generation, judging).
pub trait TextProvider: Send + Sync {
    fn complete(&self, prompt: &str, max_tokens: u32) -> ProviderResult<String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDetection {
    pub label: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

impl RawDetection {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.x, self.y, self.w, self.h)
    }
}

/// Open-vocabulary part detector.
pub trait Detector: Send + Sync {
    fn detect(&self, image_uri: &str, labels: &[String]) -> ProviderResult<Vec<RawDetection>>;
}

/// Box-prompted segmenter.
pub trait Segmenter: Send + Sync {
    fn segment(&self, image_uri: &str, bbox: &BBox, width: u32, height: u32)
        -> ProviderResult<RleMask>;
}

/// Vision-language model answering a question about a boxed region.
pub trait Verifier: Send + Sync {
    fn ask(&self, image_uri: &str, bbox: &BBox, question: &str) -> ProviderResult<String>;
}

pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> ProviderResult<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(200),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_retries: u32) -> Self {
        Self {
            max_retries,
            base_delay: Duration::ZERO,
        }
    }
}

/// Calls `call` until it succeeds, retrying transport failures up to
/// `policy.max_retries` times with delays `base, 2*base, 4*base, ...`.
/// Returns the value and the number of attempts made.
pub fn with_retries<T>(
    policy: RetryPolicy,
    mut call: impl FnMut() -> ProviderResult<T>,
) -> Result<(T, u32)> {
    let mut attempt = 0u32;
    loop {
        attempt += 1;
        match call() {
            Ok(v) => return Ok((v, attempt)),
            Err(ProviderError::Malformed(reason)) => {
                return Err(Error::ProviderMalformed {
                    raw: String::new(),
                    reason,
                })
            }
            Err(ProviderError::Transport(reason)) => {
                if attempt > policy.max_retries {
                    return Err(Error::ProviderUnavailable {
                        attempts: attempt,
                        reason,
                    });
                }
                log::warn!("provider attempt {attempt} failed: {reason}; retrying");
                let delay = policy.base_delay.saturating_mul(1 << (attempt - 1).min(16));
                if !delay.is_zero() {
                    std::thread::sleep(delay);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// HTTP clients

#[derive(Debug, Clone)]
pub struct HttpEndpoint {
    pub url: String,
    pub model: String,
    pub token: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpEndpoint {
    pub fn new(url: &str, model: &str, timeout: Duration, token: Option<String>) -> Result<Self> {
        if timeout.is_zero() {
            return Err(Error::InvalidConfig("provider timeout must be positive".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(Self {
            url: url.to_string(),
            model: model.to_string(),
            token,
            client,
        })
    }

    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(&self, body: &B) -> ProviderResult<R> {
        let mut req = self.client.post(&self.url).json(body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(ProviderError::Transport(format!("HTTP {status}")));
        }
        let text = resp
            .text()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| ProviderError::Malformed(e.to_string()))
    }
}

#[derive(Deserialize)]
struct TextResponse {
    text: String,
}

pub struct HttpTextProvider(pub HttpEndpoint);

impl TextProvider for HttpTextProvider {
    fn complete(&self, prompt: &str, max_tokens: u32) -> ProviderResult<String> {
        let body = serde_json::json!({
            "model": self.0.model,
            "prompt": prompt,
            "max_tokens": max_tokens,
        });
        self.0.post::<_, TextResponse>(&body).map(|r| r.text)
    }
}

pub struct HttpDetector(pub HttpEndpoint);

impl Detector for HttpDetector {
    fn detect(&self, image_uri: &str, labels: &[String]) -> ProviderResult<Vec<RawDetection>> {
        #[derive(Deserialize)]
        struct Resp {
            boxes: Vec<RawDetection>,
        }
        let body = serde_json::json!({ "image_uri": image_uri, "labels": labels });
        self.0.post::<_, Resp>(&body).map(|r| r.boxes)
    }
}

pub struct HttpSegmenter(pub HttpEndpoint);

impl Segmenter for HttpSegmenter {
    fn segment(&self, image_uri: &str, bbox: &BBox, _w: u32, _h: u32) -> ProviderResult<RleMask> {
        #[derive(Deserialize)]
        struct Resp {
            rle: Vec<u32>,
            width: u32,
            height: u32,
        }
        let body = serde_json::json!({ "image_uri": image_uri, "box": bbox });
        self.0.post::<_, Resp>(&body).map(|r| RleMask {
            width: r.width,
            height: r.height,
            counts: r.rle,
        })
    }
}

pub struct HttpVerifier(pub HttpEndpoint);

impl Verifier for HttpVerifier {
    fn ask(&self, image_uri: &str, bbox: &BBox, question: &str) -> ProviderResult<String> {
        let body = serde_json::json!({
            "model": self.0.model,
            "prompt": question,
            "max_tokens": 16,
            "image_uri": image_uri,
            "box": bbox,
        });
        self.0.post::<_, TextResponse>(&body).map(|r| r.text)
    }
}

pub struct HttpEmbedder(pub HttpEndpoint);

impl Embedder for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> ProviderResult<Vec<Vec<f64>>> {
        #[derive(Deserialize)]
        struct Resp {
            vectors: Vec<Vec<f64>>,
        }
        let body = serde_json::json!({ "texts": texts });
        let vectors = self.0.post::<_, Resp>(&body)?.vectors;
        if vectors.len() != texts.len() {
            return Err(ProviderError::Malformed(format!(
                "{} vectors for {} texts",
                vectors.len(),
                texts.len()
            )));
        }
        Ok(vectors)
    }
}

// ---------------------------------------------------------------------------
// Stubs

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::CorruptRecord {
                file: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CannedResponse {
    /// Answer is returned for prompts containing this snippet.
    pub contains: String,
    pub text: String,
}

/// Canned text provider. Scripted results (for fault injection) are consumed
/// first, then the first rule whose snippet occurs in the prompt answers,
/// then the default.
#[derive(Default)]
pub struct StubTextProvider {
    rules: Vec<CannedResponse>,
    default: Option<String>,
    script: Mutex<VecDeque<ProviderResult<String>>>,
    calls: Mutex<u32>,
}

impl StubTextProvider {
    pub fn new(rules: Vec<CannedResponse>, default: Option<String>) -> Self {
        Self {
            rules,
            default,
            ..Self::default()
        }
    }

    pub fn always(text: impl Into<String>) -> Self {
        Self::new(Vec::new(), Some(text.into()))
    }

    pub fn scripted(script: Vec<ProviderResult<String>>) -> Self {
        Self {
            script: Mutex::new(script.into()),
            ..Self::default()
        }
    }

    /// Reads `{contains, text}` lines; the default answer is `[]`.
    pub fn from_fixture(path: &Path) -> Result<Self> {
        Ok(Self::new(read_jsonl(path)?, Some("[]".into())))
    }

    pub fn with_default(mut self, default: impl Into<String>) -> Self {
        self.default = Some(default.into());
        self
    }

    pub fn calls(&self) -> u32 {
        *self.calls.lock().expect("stub lock")
    }
}

impl TextProvider for StubTextProvider {
    fn complete(&self, prompt: &str, _max_tokens: u32) -> ProviderResult<String> {
        *self.calls.lock().expect("stub lock") += 1;
        if let Some(next) = self.script.lock().expect("stub lock").pop_front() {
            return next;
        }
        self.rules
            .iter()
            .find(|r| prompt.contains(&r.contains))
            .map(|r| r.text.clone())
            .or_else(|| self.default.clone())
            .ok_or_else(|| ProviderError::Transport("stub has no answer".into()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CannedDetections {
    pub image_uri: String,
    pub boxes: Vec<RawDetection>,
}

/// Detector returning fixed boxes per image uri (restricted to the queried
/// labels, as a real open-vocabulary detector would be).
#[derive(Default)]
pub struct StubDetector {
    by_image: BTreeMap<String, Vec<RawDetection>>,
}

impl StubDetector {
    pub fn new(entries: Vec<CannedDetections>) -> Self {
        let mut by_image: BTreeMap<String, Vec<RawDetection>> = BTreeMap::new();
        for e in entries {
            by_image.entry(e.image_uri).or_default().extend(e.boxes);
        }
        Self { by_image }
    }

    pub fn from_fixture(path: &Path) -> Result<Self> {
        Ok(Self::new(read_jsonl(path)?))
    }
}

impl Detector for StubDetector {
    fn detect(&self, image_uri: &str, labels: &[String]) -> ProviderResult<Vec<RawDetection>> {
        Ok(self
            .by_image
            .get(image_uri)
            .map(|boxes| {
                boxes
                    .iter()
                    .filter(|b| labels.iter().any(|l| l == &b.label))
                    .cloned()
                    .collect()
            })
            .unwrap_or_default())
    }
}

/// Segmenter returning the prompt box as a filled rectangle.
#[derive(Debug, Default, Clone, Copy)]
pub struct BoxEchoSegmenter;

impl Segmenter for BoxEchoSegmenter {
    fn segment(&self, _uri: &str, bbox: &BBox, width: u32, height: u32) -> ProviderResult<RleMask> {
        Ok(BinaryMask::from_box(width, height, bbox).encode())
    }
}

/// Verifier answering per part label, `yes` otherwise. The label is taken as
/// the text between "show the " and " of" in the question.
#[derive(Debug, Default, Clone)]
pub struct StubVerifier {
    answers: BTreeMap<String, String>,
    default: String,
}

impl StubVerifier {
    pub fn new(answers: BTreeMap<String, String>, default: impl Into<String>) -> Self {
        Self {
            answers,
            default: default.into(),
        }
    }

    pub fn from_fixture(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let answers: BTreeMap<String, String> =
            serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
        Ok(Self::new(answers, "Yes"))
    }
}

impl Verifier for StubVerifier {
    fn ask(&self, _uri: &str, _bbox: &BBox, question: &str) -> ProviderResult<String> {
        let answer = self
            .answers
            .iter()
            .find(|(label, _)| question.contains(&format!(" {label} ")))
            .map(|(_, a)| a.clone())
            .unwrap_or_else(|| self.default.clone());
        Ok(answer)
    }
}

/// Deterministic bag-of-character-trigrams embedding, L2-normalized. Labels
/// sharing many trigrams ("tail", "tails") land close together.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
    overrides: BTreeMap<String, Vec<f64>>,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            overrides: BTreeMap::new(),
        }
    }

    /// Fixed vectors for specific texts, hashing for everything else.
    pub fn with_overrides(dim: usize, overrides: BTreeMap<String, Vec<f64>>) -> Self {
        Self { dim, overrides }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        if let Some(v) = self.overrides.get(text) {
            return v.clone();
        }
        let padded: Vec<char> = format!("  {} ", text.to_lowercase()).chars().collect();
        let mut v = vec![0.0; self.dim];
        for w in padded.windows(3) {
            let gram: String = w.iter().collect();
            let digest = Sha256::digest(gram.as_bytes());
            let idx = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) as usize
                % self.dim;
            let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
            v[idx] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, texts: &[String]) -> ProviderResult<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Embedder that always fails with a transport error.
#[derive(Debug, Default, Clone, Copy)]
pub struct UnavailableEmbedder;

impl Embedder for UnavailableEmbedder {
    fn embed(&self, _texts: &[String]) -> ProviderResult<Vec<Vec<f64>>> {
        Err(ProviderError::Transport("embedder offline".into()))
    }
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retries_transport_failures_then_succeeds() {
        let stub = StubTextProvider::scripted(vec![
            Err(ProviderError::Transport("timeout".into())),
            Err(ProviderError::Transport("timeout".into())),
            Ok("[]".into()),
        ]);
        let (text, attempts) =
            with_retries(RetryPolicy::immediate(3), || stub.complete("p", 10)).unwrap();
        assert_eq!(text, "[]");
        assert_eq!(attempts, 3);
    }

    #[test]
    fn gives_up_after_max_retries() {
        let stub = StubTextProvider::scripted(vec![
            Err(ProviderError::Transport("down".into()));
            5
        ]);
        let err = with_retries(RetryPolicy::immediate(2), || stub.complete("p", 10)).unwrap_err();
        assert!(matches!(err, Error::ProviderUnavailable { attempts: 3, .. }));
        assert_eq!(stub.calls(), 3);
    }

    #[test]
    fn malformed_is_not_retried() {
        let stub = StubTextProvider::scripted(vec![Err(ProviderError::Malformed("x".into()))]);
        let err = with_retries(RetryPolicy::immediate(3), || stub.complete("p", 10)).unwrap_err();
        assert!(matches!(err, Error::ProviderMalformed { .. }));
        assert_eq!(stub.calls(), 1);
    }

    #[test]
    fn hash_embedder_is_unit_norm_and_deterministic() {
        let e = HashEmbedder::new(64);
        let a = e.embed_one("long tail");
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(a, e.embed_one("long tail"));
        assert!(cosine(&e.embed_one("tail"), &e.embed_one("tails")) > cosine(&a, &e.embed_one("wing")));
    }

    #[test]
    fn zero_timeout_is_rejected() {
        assert!(HttpEndpoint::new("http://localhost:1", "m", Duration::ZERO, None).is_err());
    }
}
