//! Text-to-vector embedding through prompted chat completions.
//!
//! Each output dimension has its own prompt; the model answers with a marker
//! (`Score=`) followed by a number. Replies are cached on disk keyed by a
//! SHA-256 of (model, prompt, text), so re-running a corpus costs nothing.
//! An offline embedder derives scores from a keyed hash for tests and CI.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{fill_embeddings, Observation, SlDataset, SubjectTrajectory};
use crate::error::{Error, Result};

pub const TITLE_SLOT: &str = "{review_title}";
pub const TEXT_SLOT: &str = "{review_text}";
pub const MARKER_SLOT: &str = "{marker}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub name: String,
    pub axis_prompts: Vec<String>,
    pub score_range: Vec<(f64, f64)>,
    #[serde(default = "default_marker")]
    pub output_marker: String,
}

fn default_marker() -> String {
    "Score=".into()
}

struct Petal {
    positive: [&'static str; 3],
    negative: [&'static str; 3],
    positive_gloss: &'static str,
    negative_gloss: &'static str,
}

// (mild, moderate, intense)
const PETALS: [Petal; 4] = [
    Petal {
        positive: ["Serenity", "Joy", "Ecstasy"],
        negative: ["Pensiveness", "Sadness", "Grief"],
        positive_gloss: "Indicates happiness or pleasure derived from product satisfaction.",
        negative_gloss: "Reveals disappointment or sorrow due to unmet product expectations.",
    },
    Petal {
        positive: ["Acceptance", "Trust", "Admiration"],
        negative: ["Boredom", "Disgust", "Loathing"],
        positive_gloss: "Indicates confidence in the product or the seller.",
        negative_gloss: "Reveals revulsion or strong rejection of the product.",
    },
    Petal {
        positive: ["Apprehension", "Fear", "Terror"],
        negative: ["Annoyance", "Anger", "Rage"],
        positive_gloss: "Indicates worry about safety, harm or loss caused by the product.",
        negative_gloss: "Reveals irritation or hostility caused by the product or service.",
    },
    Petal {
        positive: ["Distraction", "Surprise", "Amazement"],
        negative: ["Interest", "Anticipation", "Vigilance"],
        positive_gloss: "Indicates that the product defied expectations.",
        negative_gloss: "Reveals looking forward to the product or its future use.",
    },
];

fn petal_prompt(p: &Petal) -> String {
    let [pm, pd, pi] = p.positive;
    let [nm, nd, ni] = p.negative;
    format!(
        "You are an expert at honestly classifying and scoring emotion from text.
This task involves analyzing user's review of a product, consisting of a review_title and review_text.
The objective is to quantitatively measure emotions, and score them based on a structured framework of emotions on a scale of -1 and 1.

Emotions can be represented using Plutchik's wheel of emotion using 4 pairs of petals and opposing petal combinations.
For this task, focus on one petal and its opposing pair. The petal includes: {pi}, {pd} and {pm}.
The opposing petal includes: {ni}, {nd} and {nm}. The emotions on each petal are arranged on the basis of their intensities.
{pi} is the most intense form of emotion and its opposing pair is {ni}. {pd} is a moderate form and its opposing pair is {nd}.
Similarly {pm} is a mild form, and {nm} is its opposing pair.

--- INSTRUCTIONS ---
Carefully read the user's review, including both the review_title and review_text. Based on the emotional cues present,
use the structured framework of the emotions, described below, along with their respective intensities, to guide your analysis,
and score the review, on a scale of -1 and 1.

The emotion score should lie between 0 and 1 if the review suggests {pi}, {pd} or {pm}, while it should lie between 0 and -1
if the review suggests {ni}, {nd} or {nm}. The score should be determined based on the intensity of the emotion.
{pi} should be scored between 2/3 and 1 and {ni} between -2/3 and -1. {pd} should be scored between 1/3 and 2/3
and {nd} between -1/3 and -2/3. {pm} should be scored between 0 and 1/3 and {nm} between 0 and -1/3.
Absence of these emotions defaults to a score of 0.
The final score should be a single number between -1 and 1, reflecting the emotion and its intensity.

Petal Dynamics:
   {pd}: {pg}
    - {pm} (Mild)
    - {pd} (Moderate)
    - {pi} (Intense)

Opposing Petal Dynamics:
   {nd}: {ng}
    - {nm} (Mild)
    - {nd} (Moderate)
    - {ni} (Intense)

--- TASK ---
For each user's review_title and review_text, follow the instructions to score the emotion expressed
on a scale of -1 and 1. Ensure the final score is a single number between -1 and 1 based on petal or opposing petal dynamics, without any additional explanation.
in the format: '{MARKER_SLOT} '

review_title: {TITLE_SLOT}
review_text: {TEXT_SLOT}
",
        pg = p.positive_gloss,
        ng = p.negative_gloss,
    )
}

fn rating_prompt(quality: &str, description: &str) -> String {
    format!(
        "You are an expert content moderator scoring online discussion comments.
Rate the {quality} of the comment below on a scale of 0 and 1, where 0 means no {quality} at all and 1 means extreme {quality}.
{description}
Reply with a single number between 0 and 1 and no additional explanation,
in the format: '{MARKER_SLOT} '

comment_title: {TITLE_SLOT}
comment_text: {TEXT_SLOT}
"
    )
}

impl PromptSpec {
    /// Four opposing-petal pairs of Plutchik's wheel, each on [-1, 1]:
    /// joy-sadness, trust-disgust, fear-anger, surprise-anticipation.
    pub fn plutchik() -> Self {
        Self {
            name: "plutchik".into(),
            axis_prompts: PETALS.iter().map(petal_prompt).collect(),
            score_range: vec![(-1.0, 1.0); 4],
            output_marker: default_marker(),
        }
    }

    /// Toxicity and aggression, each on [0, 1].
    pub fn toxicity() -> Self {
        Self {
            name: "toxicity".into(),
            axis_prompts: vec![
                rating_prompt("toxicity", "Toxic comments are rude, disrespectful or unreasonable and likely to make someone leave the discussion."),
                rating_prompt("aggression", "Aggressive comments attack, threaten or intimidate another person."),
            ],
            score_range: vec![(0.0, 1.0); 2],
            output_marker: default_marker(),
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let spec: PromptSpec = serde_json::from_str(&fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }

    /// `plutchik`, `toxicity` or `custom:<path>`.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "plutchik" => Ok(Self::plutchik()),
            "toxicity" => Ok(Self::toxicity()),
            other => match other.strip_prefix("custom:") {
                Some(path) => Self::from_json_file(Path::new(path)),
                None => Err(Error::Config(format!("unknown embed spec '{other}'"))),
            },
        }
    }

    pub fn p(&self) -> usize {
        self.axis_prompts.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.axis_prompts.is_empty() || self.axis_prompts.len() != self.score_range.len() {
            return Err(Error::Config(format!(
                "prompt spec '{}' has {} prompts but {} score ranges",
                self.name,
                self.axis_prompts.len(),
                self.score_range.len()
            )));
        }
        if let Some((lo, hi)) = self.score_range.iter().find(|(lo, hi)| !(lo < hi)) {
            return Err(Error::Config(format!("score range [{lo}, {hi}] is empty")));
        }
        if self.output_marker.trim().is_empty() {
            return Err(Error::Config("output marker is empty".into()));
        }
        Ok(())
    }
}

/// Fills the title, text and marker slots of one axis prompt. Substituted
/// text is never rescanned, so slot names inside a review stay literal.
pub fn render_prompt(spec: &PromptSpec, axis: usize, title: &str, body: &str) -> Result<String> {
    let template = spec.axis_prompts.get(axis).ok_or_else(|| {
        Error::Config(format!("axis {axis} out of range for spec '{}' with p={}", spec.name, spec.p()))
    })?;
    let slots = [(TITLE_SLOT, title), (TEXT_SLOT, body), (MARKER_SLOT, spec.output_marker.as_str())];
    let mut out = String::with_capacity(template.len() + title.len() + body.len());
    let mut rest = template.as_str();
    'outer: while !rest.is_empty() {
        for (slot, value) in slots {
            if rest.starts_with(slot) {
                out.push_str(value);
                rest = &rest[slot.len()..];
                continue 'outer;
            }
        }
        let ch = rest.chars().next().unwrap();
        out.push(ch);
        rest = &rest[ch.len_utf8()..];
    }
    Ok(out)
}

fn leading_number(s: &str) -> Option<f64> {
    let b = s.as_bytes();
    let mut i = 0;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        i += 1;
    }
    let int_start = i;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    let mut digits = i - int_start;
    if i < b.len() && b[i] == b'.' {
        i += 1;
        let frac = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        digits += i - frac;
    }
    if digits == 0 {
        return None;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        let mut j = i + 1;
        if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
            j += 1;
        }
        let e = j;
        while j < b.len() && b[j].is_ascii_digit() {
            j += 1;
        }
        if j > e {
            i = j;
        }
    }
    s[..i].parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Extracts the number following the last occurrence of `marker` and clamps
/// it into `range`. Returns the value and whether it was clamped.
pub fn parse_score(reply: &str, marker: &str, range: (f64, f64)) -> Result<(f64, bool)> {
    let key = marker.trim().trim_end_matches('=').trim().to_ascii_lowercase();
    let has_eq = marker.trim().ends_with('=');
    let lower = reply.to_ascii_lowercase();
    let mut found = None;
    for (pos, _) in lower.match_indices(&key) {
        let mut tail = reply[pos + key.len()..].trim_start();
        if has_eq {
            match tail.strip_prefix('=') {
                Some(t) => tail = t,
                None => continue,
            }
        }
        found = Some(tail.trim_start());
    }
    let tail = found.ok_or_else(|| Error::Parse(format!("marker '{marker}' not found in {reply:?}")))?;
    let v = leading_number(tail).ok_or_else(|| Error::Parse(format!("no number after marker in {reply:?}")))?;
    let c = v.clamp(range.0, range.1);
    Ok((c, c != v))
}

/// A chat-completion endpoint.
pub trait ChatBackend: Send + Sync {
    fn model_id(&self) -> &str;
    fn complete(&self, prompt: &str) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub temperature: f64,
    pub timeout_secs: u64,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            token_env: "OPENAI_API_KEY".into(),
            temperature: 0.0,
            timeout_secs: 60,
        }
    }
}

/// Blocking client for an OpenAI-style `/chat/completions` endpoint.
pub struct LiveBackend {
    cfg: LiveConfig,
    token: String,
    agent: ureq::Agent,
}

impl LiveBackend {
    pub fn new(cfg: LiveConfig) -> Result<Self> {
        let token = std::env::var(&cfg.token_env)
            .map_err(|_| Error::Backend(format!("environment variable {} is not set", cfg.token_env)))?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .build()
            .into();
        Ok(Self { cfg, token, agent })
    }
}

impl ChatBackend for LiveBackend {
    fn model_id(&self) -> &str {
        &self.cfg.model
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let body = serde_json::json!({
            "model": self.cfg.model,
            "temperature": self.cfg.temperature,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut resp = self
            .agent
            .post(&url)
            .header("Authorization", &format!("Bearer {}", self.token))
            .send_json(&body)
            .map_err(|e| Error::Backend(e.to_string()))?;
        let v: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Backend(e.to_string()))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Backend(format!("unexpected response shape: {v}")))
    }
}

/// Deterministic score in `[lo, hi]` from a SHA-256 of (axis, text).
pub fn offline_score(axis: usize, text: &str, range: (f64, f64)) -> f64 {
    let mut h = Sha256::new();
    h.update(b"sltraj-offline-v1\0");
    h.update((axis as u64).to_le_bytes());
    h.update(text.as_bytes());
    let d = h.finalize();
    let x = u64::from_le_bytes(d[..8].try_into().unwrap());
    let u = (x >> 11) as f64 / (1u64 << 53) as f64;
    range.0 + u * (range.1 - range.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub value: f64,
    pub model: String,
    pub created_at: u64,
}

/// One file per entry: the decimal score on the first line, metadata JSON on
/// the second. Writes go through a temp file and a rename.
#[derive(Debug, Clone)]
pub struct DiskCache {
    dir: PathBuf,
}

impl DiskCache {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn key(model: &str, prompt: &str, text: &str) -> String {
        let mut h = Sha256::new();
        for part in [model, prompt, text] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(key)
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        let raw = fs::read_to_string(self.path(key)).ok()?;
        let mut lines = raw.lines();
        let value: f64 = lines.next()?.trim().parse().ok()?;
        let meta: serde_json::Value = lines.next().and_then(|l| serde_json::from_str(l).ok()).unwrap_or_default();
        value.is_finite().then(|| CacheEntry {
            value,
            model: meta["model"].as_str().unwrap_or_default().to_string(),
            created_at: meta["created_at"].as_u64().unwrap_or(0),
        })
    }

    pub fn put(&self, key: &str, entry: &CacheEntry) -> Result<()> {
        let meta = serde_json::json!({"model": entry.model, "created_at": entry.created_at});
        let tmp = self.dir.join(format!(".{key}.{}.tmp", std::process::id()));
        fs::write(&tmp, format!("{}\n{}\n", entry.value, meta))?;
        fs::rename(&tmp, self.path(key))?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        fs::read_dir(&self.dir)
            .map(|it| it.filter_map(|e| e.ok()).filter(|e| !e.file_name().to_string_lossy().starts_with('.')).count())
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub enum Backend {
    Offline,
    Live(Box<dyn ChatBackend>),
}

impl Backend {
    pub fn model_id(&self) -> &str {
        match self {
            Backend::Offline => "offline",
            Backend::Live(b) => b.model_id(),
        }
    }
}

/// Minimum spacing between live calls.
struct RateLimiter {
    interval: Option<Duration>,
    next: Mutex<Instant>,
}

impl RateLimiter {
    fn new(per_second: Option<f64>) -> Self {
        Self {
            interval: per_second.filter(|r| *r > 0.0).map(|r| Duration::from_secs_f64(1.0 / r)),
            next: Mutex::new(Instant::now()),
        }
    }

    fn acquire(&self) {
        let Some(step) = self.interval else { return };
        let wait = {
            let mut next = self.next.lock().unwrap();
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + step;
            slot - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

pub struct Embedder {
    pub spec: PromptSpec,
    backend: Backend,
    cache: Option<DiskCache>,
    pub attempts: usize,
    pub backoff: Duration,
    limiter: RateLimiter,
    calls: AtomicUsize,
}

impl Embedder {
    pub fn new(spec: PromptSpec, backend: Backend, cache: Option<DiskCache>) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            backend,
            cache,
            attempts: 3,
            backoff: Duration::from_millis(500),
            limiter: RateLimiter::new(None),
            calls: AtomicUsize::new(0),
        })
    }

    pub fn with_rate_limit(mut self, per_second: Option<f64>) -> Self {
        self.limiter = RateLimiter::new(per_second);
        self
    }

    /// Number of backend calls made so far (cache hits excluded).
    pub fn backend_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn axis_score(&self, axis: usize, title: &str, body: &str) -> std::result::Result<f64, String> {
        let prompt = render_prompt(&self.spec, axis, title, body).map_err(|e| e.to_string())?;
        let range = self.spec.score_range[axis];
        let text = format!("{title}\n{body}");
        let key = DiskCache::key(self.backend.model_id(), &prompt, &text);
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            return Ok(hit.value.clamp(range.0, range.1));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let value = match &self.backend {
            Backend::Offline => offline_score(axis, &text, range),
            Backend::Live(b) => {
                let mut last = String::new();
                let mut got = None;
                for attempt in 0..self.attempts {
                    if attempt > 0 {
                        std::thread::sleep(self.backoff * (1 << (attempt - 1)));
                    }
                    self.limiter.acquire();
                    match b.complete(&prompt).and_then(|r| parse_score(&r, &self.spec.output_marker, range)) {
                        Ok((v, clamped)) => {
                            if clamped {
                                log::warn!("axis {axis}: reply outside [{}, {}], clamped to {v}", range.0, range.1);
                            }
                            got = Some(v);
                            break;
                        }
                        Err(e) => {
                            log::debug!("axis {axis} attempt {}: {e}", attempt + 1);
                            last = e.to_string();
                        }
                    }
                }
                got.ok_or(last)?
            }
        };
        if let Some(c) = &self.cache {
            let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
            c.put(&key, &CacheEntry { value, model: self.backend.model_id().into(), created_at })
                .map_err(|e| format!("cache write failed: {e}"))?;
        }
        Ok(value)
    }

    /// Scores one text on every axis.
    pub fn embed_text(&self, title: &str, body: &str) -> std::result::Result<Vec<f64>, String> {
        (0..self.spec.p()).map(|a| self.axis_score(a, title, body)).collect()
    }

    pub fn embed_observation(&self, subject_id: &str, obs: &Observation) -> Result<Vec<f64>> {
        let body = obs.text.as_deref().ok_or_else(|| Error::Embed {
            subject_id: subject_id.into(),
            timestamp: obs.time,
            reason: "record has no text".into(),
        })?;
        let title = obs.metadata.get("title").map_or("", String::as_str);
        self.embed_text(title, body).map_err(|reason| Error::Embed {
            subject_id: subject_id.into(),
            timestamp: obs.time,
            reason,
        })
    }
}

/// Records that could not be embedded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedFailure {
    pub subject_id: String,
    pub timestamp: f64,
    pub reason: String,
}

/// Embeds every record still lacking values, at most `max_concurrency` at a
/// time. Failed records are dropped (subjects left empty are dropped too) and
/// returned for the manifest.
pub fn embed_dataset(dataset: &SlDataset, embedder: &Embedder, max_concurrency: usize) -> Result<(SlDataset, Vec<EmbedFailure>)> {
    let jobs: Vec<(usize, usize)> = dataset
        .subjects
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.records.iter().enumerate().filter(|(_, r)| r.values.is_none()).map(move |(j, _)| (i, j)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_concurrency.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let results: Vec<((usize, usize), Result<Vec<f64>>)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, j)| {
                let s = &dataset.subjects[i];
                ((i, j), embedder.embed_observation(&s.subject_id, &s.records[j]))
            })
            .collect()
    });
    let mut filled = HashMap::new();
    let mut failures = Vec::new();
    for ((i, j), r) in results {
        match r {
            Ok(v) => {
                filled.insert((i, j), v);
            }
            Err(e) => {
                log::warn!("{e}");
                let s = &dataset.subjects[i];
                failures.push(EmbedFailure {
                    subject_id: s.subject_id.clone(),
                    timestamp: s.records[j].time,
                    reason: e.to_string(),
                });
            }
        }
    }
    let mut out = dataset.clone();
    fill_embeddings(&mut out, &filled, embedder.spec.p());
    if failures.is_empty() {
        return Ok((out, failures));
    }
    let subjects: Vec<SubjectTrajectory> = out
        .subjects
        .into_iter()
        .filter_map(|mut s| {
            s.records.retain(|r| r.values.is_some());
            if s.records.is_empty() {
                log::warn!("subject {} dropped: no record could be embedded", s.subject_id);
                None
            } else {
                Some(s)
            }
        })
        .collect();
    Ok((SlDataset::from_subjects(subjects, out.p, out.q)?, failures))
}
