//! Visual-similarity judge for separating fine-grained confusions from other
//! foreground-driven errors.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{CciError, Result};

pub const SYSTEM_PROMPT: &str = "You are a vision expert with deep knowledge of object categories and visual characteristics. Your task is to determine whether two categories are visually similar or clearly different based on appearance alone. Consider shape, texture, color, size, and typical visual features that a human would notice.";

pub const USER_PROMPT_TEMPLATE: &str = "Ground truth class: [gt_class]
Predicted class: [pred_class]

Question: Evaluate whether these two categories are visually similar or clearly different. Consider the following:
1. Would a human observer easily confuse the two categories in a standard image?
2. Do they share key visual features (shape, color patterns, textures) that make them look alike?
3. If they are visually distinct and unlikely to be confused, classify them as different.

Respond with a single word only: similar if they are visually alike, different if they are clearly distinct.";

/// Environment variable holding the judge endpoint credential.
pub const API_KEY_ENV: &str = "CCI_JUDGE_API_KEY";

pub fn user_prompt(gt: &str, pred: &str) -> String {
    USER_PROMPT_TEMPLATE
        .replace("[gt_class]", gt)
        .replace("[pred_class]", pred)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Similar,
    Different,
}

impl Verdict {
    /// Accepts a single word, ignoring case, whitespace and surrounding
    /// punctuation.
    pub fn parse(text: &str) -> Option<Self> {
        let word = text
            .trim()
            .trim_matches(|c: char| !c.is_alphanumeric())
            .to_ascii_lowercase();
        match word.as_str() {
            "similar" => Some(Verdict::Similar),
            "different" => Some(Verdict::Different),
            _ => None,
        }
    }
}

pub trait Judge: Sync {
    fn judge(&self, gt: &str, pred: &str) -> Result<Verdict>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgePair {
    pub gt: String,
    pub pred: String,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeFixture {
    pub pairs: Vec<JudgePair>,
}

fn key(label: &str) -> String {
    label.trim().to_lowercase()
}

/// Looks verdicts up in a fixture table. Labels compare case-insensitively;
/// a pair is also found when stored in the opposite order.
#[derive(Debug, Clone, Default)]
pub struct OfflineJudge {
    table: HashMap<(String, String), Verdict>,
}

impl OfflineJudge {
    pub fn from_fixture(fixture: &JudgeFixture) -> Self {
        let table = fixture
            .pairs
            .iter()
            .map(|p| ((key(&p.gt), key(&p.pred)), p.verdict))
            .collect();
        Self { table }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CciError::io(path, e))?;
        Ok(Self::from_fixture(&serde_json::from_slice(&bytes)?))
    }

    /// The four worked examples that accompany the judge prompt.
    pub fn reference_examples() -> Self {
        let pair = |gt: &str, pred: &str, verdict| JudgePair {
            gt: gt.into(),
            pred: pred.into(),
            verdict,
        };
        Self::from_fixture(&JudgeFixture {
            pairs: vec![
                pair("siamang", "chimpanzee", Verdict::Similar),
                pair("border collie", "australian shepherd", Verdict::Similar),
                pair("cat", "airplane", Verdict::Different),
                pair("lion", "bicycle", Verdict::Different),
            ],
        })
    }

    pub fn with(mut self, gt: &str, pred: &str, verdict: Verdict) -> Self {
        self.table.insert((key(gt), key(pred)), verdict);
        self
    }
}

impl Judge for OfflineJudge {
    fn judge(&self, gt: &str, pred: &str) -> Result<Verdict> {
        let (g, p) = (key(gt), key(pred));
        self.table
            .get(&(g.clone(), p.clone()))
            .or_else(|| self.table.get(&(p, g)))
            .copied()
            .ok_or_else(|| CciError::Judge(format!("no offline verdict for ({gt}, {pred})")))
    }
}

/// Spaces calls to at most `requests_per_second`; zero disables limiting.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(requests_per_second: f64) -> Self {
        let interval = if requests_per_second > 0.0 {
            Duration::from_secs_f64(1.0 / requests_per_second)
        } else {
            Duration::ZERO
        };
        Self {
            interval,
            next: Mutex::new(None),
        }
    }

    pub fn acquire(&self) {
        if self.interval.is_zero() {
            return;
        }
        let wait = {
            let mut next = self.next.lock().expect("rate limiter poisoned");
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpJudgeConfig {
    /// Chat-completions URL.
    pub endpoint: String,
    pub model: String,
    pub max_retries: u32,
    pub backoff_base: Duration,
    pub timeout: Duration,
    pub requests_per_second: f64,
}

impl Default for HttpJudgeConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
            timeout: Duration::from_secs(60),
            requests_per_second: 2.0,
        }
    }
}

/// Chat-completion client that sends the judge prompts and parses the
/// one-word answer. Transport errors, 429 and 5xx responses are retried with
/// exponential backoff.
pub struct HttpJudge {
    config: HttpJudgeConfig,
    api_key: String,
    agent: ureq::Agent,
    limiter: RateLimiter,
}

enum Attempt {
    Retry(String),
    Fatal(CciError),
}

impl HttpJudge {
    pub fn new(config: HttpJudgeConfig, api_key: String) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let limiter = RateLimiter::new(config.requests_per_second);
        Self {
            config,
            api_key,
            agent,
            limiter,
        }
    }

    /// Reads the credential from [`API_KEY_ENV`].
    pub fn from_env(config: HttpJudgeConfig) -> Result<Self> {
        match std::env::var(API_KEY_ENV) {
            Ok(key) if !key.is_empty() => Ok(Self::new(config, key)),
            _ => Err(CciError::Judge(format!("{API_KEY_ENV} is not set"))),
        }
    }

    pub fn request_body(&self, gt: &str, pred: &str) -> Value {
        json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": user_prompt(gt, pred)},
            ],
        })
    }

    fn attempt(&self, body: &Value) -> std::result::Result<Verdict, Attempt> {
        self.limiter.acquire();
        let mut response = self
            .agent
            .post(&self.config.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body)
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = response.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err(Attempt::Fatal(CciError::Judge(format!("endpoint returned HTTP {status}"))));
        }
        let payload: Value = response
            .body_mut()
            .read_json()
            .map_err(|e| Attempt::Fatal(CciError::Judge(format!("malformed response: {e}"))))?;
        let content = payload
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| Attempt::Fatal(CciError::Judge("response has no message content".into())))?;
        Verdict::parse(content)
            .ok_or_else(|| Attempt::Fatal(CciError::Judge(format!("unparseable verdict `{content}`"))))
    }
}

impl Judge for HttpJudge {
    fn judge(&self, gt: &str, pred: &str) -> Result<Verdict> {
        let body = self.request_body(gt, pred);
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.config.backoff_base * 2u32.pow(attempt - 1));
            }
            match self.attempt(&body) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(reason)) => {
                    log::warn!("judge request failed (attempt {}): {reason}", attempt + 1);
                    last = reason;
                }
            }
        }
        Err(CciError::Judge(format!(
            "giving up after {} retries: {last}",
            self.config.max_retries
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_examples() {
        let j = OfflineJudge::reference_examples();
        assert_eq!(j.judge("siamang", "chimpanzee").unwrap(), Verdict::Similar);
        assert_eq!(j.judge("border collie", "australian shepherd").unwrap(), Verdict::Similar);
        assert_eq!(j.judge("cat", "airplane").unwrap(), Verdict::Different);
        assert_eq!(j.judge("lion", "bicycle").unwrap(), Verdict::Different);
    }

    #[test]
    fn lookup_is_case_insensitive_and_symmetric() {
        let j = OfflineJudge::reference_examples();
        assert_eq!(j.judge("Chimpanzee", " SIAMANG").unwrap(), Verdict::Similar);
        assert!(matches!(j.judge("cat", "dog"), Err(CciError::Judge(_))));
    }

    #[test]
    fn verdict_parsing() {
        assert_eq!(Verdict::parse("similar"), Some(Verdict::Similar));
        assert_eq!(Verdict::parse("  Different.\n"), Some(Verdict::Different));
        assert_eq!(Verdict::parse("`SIMILAR`"), Some(Verdict::Similar));
        assert_eq!(Verdict::parse("they are similar"), None);
        assert_eq!(Verdict::parse(""), None);
    }

    #[test]
    fn prompt_substitutes_both_labels() {
        let p = user_prompt("border collie", "australian shepherd");
        assert!(p.starts_with("Ground truth class: border collie\nPredicted class: australian shepherd\n"));
        assert!(!p.contains("[gt_class]") && !p.contains("[pred_class]"));
    }

    #[test]
    fn fixture_json_shape() {
        let raw = r#"{"pairs": [{"gt": "a", "pred": "b", "verdict": "similar"}]}"#;
        let fixture: JudgeFixture = serde_json::from_str(raw).unwrap();
        let j = OfflineJudge::from_fixture(&fixture);
        assert_eq!(j.judge("a", "b").unwrap(), Verdict::Similar);
    }

    #[test]
    fn limiter_spaces_calls() {
        let limiter = RateLimiter::new(50.0);
        let start = Instant::now();
        for _ in 0..4 {
            limiter.acquire();
        }
        assert!(start.elapsed() >= Duration::from_millis(55));
    }
}
