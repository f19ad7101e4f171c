//! Intent profiling of anomalous records.
//!
//! Each subject keeps a time-ordered list of intent phrases. A new record is
//! matched against the subject's own intents and the union of every other
//! subject's top-k intents, or else gets a fresh phrase. Matching is done by
//! a chat model or, offline, by normalized substring matching.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::anomaly::WindowReport;
use crate::dataset::SlDataset;
use crate::embed::ChatBackend;
use crate::error::{Error, Result};

/// English stopwords ignored when building lexical intent phrases.
pub const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "also", "am", "an", "and", "any", "are", "as", "at",
    "be", "because", "been", "before", "being", "below", "between", "both", "but", "by", "can", "could", "did",
    "do", "does", "doing", "down", "during", "each", "even", "ever", "every", "few", "for", "from", "further",
    "get", "got", "had", "has", "have", "having", "he", "her", "here", "hers", "herself", "him", "himself", "his",
    "how", "i", "if", "in", "into", "is", "it", "its", "itself", "just", "me", "more", "most", "my", "myself",
    "no", "nor", "not", "now", "of", "off", "on", "once", "one", "only", "or", "other", "our", "ours", "out",
    "over", "own", "really", "same", "she", "should", "so", "some", "such", "than", "that", "the", "their",
    "theirs", "them", "then", "there", "these", "they", "this", "those", "through", "to", "too", "under",
    "until", "up", "very", "was", "we", "were", "what", "when", "where", "which", "while", "who", "whom", "why",
    "will", "with", "would", "you", "your", "yours",
];

/// Lowercase, keep letters/digits/apostrophes, collapse whitespace.
pub fn normalize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_alphanumeric() || c == '\'' { c.to_lowercase().next().unwrap_or(c) } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn contains_words(haystack: &str, needle: &str) -> bool {
    !needle.is_empty() && format!(" {haystack} ").contains(&format!(" {needle} "))
}

/// The (up to) 3 most frequent non-stopword tokens, ties by first appearance.
pub fn lexical_phrase(text: &str) -> Option<String> {
    let norm = normalize(text);
    let tokens: Vec<&str> = norm.split(' ').filter(|t| !t.is_empty()).collect();
    let content: Vec<&str> = tokens.iter().copied().filter(|t| !STOPWORDS.contains(t)).collect();
    let pool = if content.is_empty() { tokens } else { content };
    if pool.is_empty() {
        return None;
    }
    let mut freq: Vec<(&str, usize, usize)> = Vec::new();
    for (pos, t) in pool.iter().enumerate() {
        match freq.iter_mut().find(|f| f.0 == *t) {
            Some(f) => f.1 += 1,
            None => freq.push((t, 1, pos)),
        }
    }
    freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    Some(freq.iter().take(3).map(|f| f.0).collect::<Vec<_>>().join(" "))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentEntry {
    pub phrase: String,
    pub count: usize,
    pub first_seen: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentState {
    pub k: usize,
    pub per_subject: BTreeMap<String, Vec<IntentEntry>>,
}

impl IntentState {
    pub fn new(k: usize) -> Self {
        Self { k, per_subject: BTreeMap::new() }
    }

    pub fn intents(&self, subject: &str) -> &[IntentEntry] {
        self.per_subject.get(subject).map_or(&[], Vec::as_slice)
    }

    /// Top-k of one subject: by count, ties by first_seen.
    pub fn top_k(&self, subject: &str) -> Vec<String> {
        let mut v: Vec<&IntentEntry> = self.intents(subject).iter().collect();
        v.sort_by(|a, b| b.count.cmp(&a.count).then(a.first_seen.total_cmp(&b.first_seen)));
        v.into_iter().take(self.k).map(|e| e.phrase.clone()).collect()
    }

    /// Union of the top-k lists of every other subject, without duplicates.
    pub fn others_top_k(&self, subject: &str) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in self.per_subject.keys().filter(|s| s.as_str() != subject) {
            for p in self.top_k(s) {
                if !out.contains(&p) {
                    out.push(p);
                }
            }
        }
        out
    }

    fn record(&mut self, subject: &str, time: f64, phrase: &str) {
        let list = self.per_subject.entry(subject.to_string()).or_default();
        match list.iter_mut().find(|e| e.phrase == phrase) {
            Some(e) => e.count += 1,
            None => list.push(IntentEntry { phrase: phrase.to_string(), count: 1, first_seen: time }),
        }
    }

    pub fn total_count(&self) -> usize {
        self.per_subject.values().flatten().map(|e| e.count).sum()
    }
}

pub enum MatchMode<'a> {
    Lexical,
    Llm(&'a dyn ChatBackend),
}

const MAX_PHRASE_WORDS: usize = 5;

fn lexical_match(state: &IntentState, subject: &str, text: &str) -> Option<String> {
    let norm = normalize(text);
    let own = state.intents(subject).iter().map(|e| e.phrase.clone());
    let global = state.others_top_k(subject).into_iter();
    own.chain(global)
        .find(|p| contains_words(&norm, p) || contains_words(p, &norm))
}

fn intent_prompt(own: &[String], others: &[String], text: &str, strict: bool) -> String {
    let list = |v: &[String]| if v.is_empty() { "(none)".to_string() } else { v.join("; ") };
    let mut p = format!(
        "You label the intent behind customer reviews with short keyword phrases.
Intents already used by this customer: {}
Frequent intents of other customers: {}

Review: {text}

If the review expresses one of the listed intents, reply with that intent exactly as written.
Otherwise reply with a new intent phrase of at most {MAX_PHRASE_WORDS} words.
Reply in the format: 'Intent= <phrase>'",
        list(own),
        list(others)
    );
    if strict {
        p.push_str(&format!("\nYour previous phrase was too long. Use {MAX_PHRASE_WORDS} words or fewer."));
    }
    p
}

fn parse_intent(reply: &str) -> Option<String> {
    let lower = reply.to_ascii_lowercase();
    let tail = match lower.rfind("intent") {
        Some(pos) => {
            let t = reply[pos + "intent".len()..].trim_start();
            t.strip_prefix('=').or_else(|| t.strip_prefix(':')).unwrap_or(t)
        }
        None => reply,
    };
    let phrase = normalize(tail.lines().next().unwrap_or(""));
    (!phrase.is_empty()).then_some(phrase)
}

fn llm_phrase(backend: &dyn ChatBackend, own: &[String], others: &[String], text: &str, attempts: usize) -> Option<String> {
    let mut strict = false;
    let mut long = None;
    for _ in 0..attempts {
        let reply = match backend.complete(&intent_prompt(own, others, text, strict)) {
            Ok(r) => r,
            Err(e) => {
                log::debug!("intent query failed: {e}");
                continue;
            }
        };
        let Some(phrase) = parse_intent(&reply) else { continue };
        if own.contains(&phrase) || others.contains(&phrase) || phrase.split(' ').count() <= MAX_PHRASE_WORDS {
            return Some(phrase);
        }
        long = Some(phrase);
        strict = true;
    }
    long.map(|p| p.split(' ').take(MAX_PHRASE_WORDS).collect::<Vec<_>>().join(" "))
}

/// Assigns `text` (observed at `time`) to an intent of `subject` and updates
/// the state. Returns the phrase and whether it was newly created.
pub fn match_or_create(state: &mut IntentState, subject: &str, time: f64, text: &str, mode: &MatchMode) -> Result<(String, bool)> {
    if normalize(text).is_empty() {
        return Err(Error::Data(format!("empty text for subject {subject} at t={time}")));
    }
    let own: Vec<String> = state.intents(subject).iter().map(|e| e.phrase.clone()).collect();
    let others = state.others_top_k(subject);
    let chosen = match mode {
        MatchMode::Llm(backend) => match llm_phrase(*backend, &own, &others, text, 3) {
            Some(p) => Some(p),
            None => {
                log::warn!("intent model gave no usable reply for subject {subject} at t={time}; using lexical matching");
                None
            }
        },
        MatchMode::Lexical => None,
    };
    let (phrase, created) = match chosen {
        Some(p) => {
            let known = own.contains(&p) || others.contains(&p);
            (p, !known)
        }
        None => match lexical_match(state, subject, text) {
            Some(p) => (p, false),
            None => {
                let p = lexical_phrase(text).expect("nonempty text");
                let known = own.contains(&p);
                (p, !known)
            }
        },
    };
    state.record(subject, time, &phrase);
    Ok((phrase, created))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfiledRecord {
    pub cluster: usize,
    pub subject_id: String,
    pub time: f64,
    /// 0-based window index.
    pub window: usize,
    pub intent: String,
    pub created: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cluster: usize,
    pub window: usize,
    pub intent: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileOutput {
    pub records: Vec<ProfiledRecord>,
    pub summary: Vec<SummaryRow>,
    pub states: Vec<IntentState>,
}

/// Records to profile: for each confirmed subject, its records in flagged
/// windows, or all its records when no window was flagged. Sorted by
/// (subject_id, time).
pub fn anomalous_records(report: &WindowReport, dataset: &SlDataset) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for &i in report.pvalues.keys() {
        let flagged = report.flagged_windows(i);
        for (j, r) in dataset.subjects[i].records.iter().enumerate() {
            let Some(w) = report.windows.index_of(r.time) else { continue };
            if flagged.is_empty() || flagged.contains(&w) {
                out.push((i, j, w));
            }
        }
    }
    out.sort_by(|a, b| {
        dataset.subjects[a.0]
            .subject_id
            .cmp(&dataset.subjects[b.0].subject_id)
            .then(dataset.subjects[a.0].records[a.1].time.total_cmp(&dataset.subjects[b.0].records[b.1].time))
    });
    out
}

/// Profiles the anomalous records of every cluster. With `per_cluster_scope`
/// each cluster has its own state; otherwise one state is shared and records
/// of all clusters are processed in (subject_id, time) order.
pub fn profile_anomalies(reports: &[WindowReport], dataset: &SlDataset, mode: &MatchMode, k: usize, per_cluster_scope: bool) -> Result<ProfileOutput> {
    let mut jobs: Vec<(usize, usize, usize, usize)> = Vec::new();
    for rep in reports {
        for (i, j, w) in anomalous_records(rep, dataset) {
            if dataset.subjects[i].records[j].text.as_deref().is_some_and(|t| !normalize(t).is_empty()) {
                jobs.push((rep.cluster, i, j, w));
            } else {
                log::warn!("record of {} at t={} has no text; not profiled", dataset.subjects[i].subject_id, dataset.subjects[i].records[j].time);
            }
        }
    }
    let key = |&(c, i, j, _): &(usize, usize, usize, usize)| (if per_cluster_scope { c } else { 0 }, dataset.subjects[i].subject_id.clone(), dataset.subjects[i].records[j].time);
    jobs.sort_by(|a, b| {
        let (ka, kb) = (key(a), key(b));
        ka.0.cmp(&kb.0).then(ka.1.cmp(&kb.1)).then(ka.2.total_cmp(&kb.2))
    });

    let mut states: BTreeMap<usize, IntentState> = BTreeMap::new();
    let mut records = Vec::with_capacity(jobs.len());
    for (c, i, j, w) in jobs {
        let scope = if per_cluster_scope { c } else { 0 };
        let state = states.entry(scope).or_insert_with(|| IntentState::new(k));
        let s = &dataset.subjects[i];
        let r = &s.records[j];
        let (intent, created) = match_or_create(state, &s.subject_id, r.time, r.text.as_deref().unwrap_or_default(), mode)?;
        records.push(ProfiledRecord { cluster: c, subject_id: s.subject_id.clone(), time: r.time, window: w, intent, created });
    }

    let mut counts: HashMap<(usize, usize, String), usize> = HashMap::new();
    for r in &records {
        *counts.entry((r.cluster, r.window, r.intent.clone())).or_default() += 1;
    }
    let mut summary: Vec<SummaryRow> = counts
        .into_iter()
        .map(|((cluster, window, intent), count)| SummaryRow { cluster, window, intent, count })
        .collect();
    summary.sort_by(|a, b| a.cluster.cmp(&b.cluster).then(a.window.cmp(&b.window)).then(b.count.cmp(&a.count)).then(a.intent.cmp(&b.intent)));
    Ok(ProfileOutput { records, summary, states: states.into_values().collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anomaly::Windows;
    use crate::dataset::{Observation, SubjectTrajectory};
    use nalgebra::DMatrix;
    use proptest::prelude::{prop_assert_eq, proptest};
    use std::sync::Mutex;

    #[test]
    fn stopword_list_size() {
        assert!((110..=130).contains(&STOPWORDS.len()), "{}", STOPWORDS.len());
        let mut s = STOPWORDS.to_vec();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), STOPWORDS.len());
    }

    #[test]
    fn matches_existing_intent() {
        let mut st = IntentState::new(5);
        st.record("u1", 0.0, "poor quality");
        let (p, created) = match_or_create(&mut st, "u1", 1.0, "such poor quality plastic", &MatchMode::Lexical).unwrap();
        assert_eq!(p, "poor quality");
        assert!(!created);
        assert_eq!(st.intents("u1")[0].count, 2);
    }

    #[test]
    fn cold_start_creates() {
        let mut st = IntentState::new(5);
        let (p, created) = match_or_create(&mut st, "u1", 0.0, "Leaks fuel everywhere!", &MatchMode::Lexical).unwrap();
        assert_eq!(p, "leaks fuel everywhere");
        assert!(created);
    }

    #[test]
    fn same_record_twice_increments() {
        let mut st = IntentState::new(5);
        let text = "fuel leaks, fuel everywhere";
        let (p1, c1) = match_or_create(&mut st, "u", 0.0, text, &MatchMode::Lexical).unwrap();
        let (p2, c2) = match_or_create(&mut st, "u", 0.0, text, &MatchMode::Lexical).unwrap();
        assert_eq!(p1, p2);
        assert!(c1 && !c2);
        assert_eq!(st.intents("u").len(), 1);
        assert_eq!(st.intents("u")[0].count, 2);
    }

    #[test]
    fn others_context_is_union_of_top_k() {
        let mut st = IntentState::new(1);
        st.record("a", 0.0, "too small");
        st.record("a", 1.0, "late delivery");
        st.record("a", 2.0, "late delivery");
        st.record("b", 0.0, "bad smell");
        assert_eq!(st.others_top_k("c"), vec!["late delivery".to_string(), "bad smell".to_string()]);
        assert_eq!(st.others_top_k("a"), vec!["bad smell".to_string()]);
        // a global match is copied into the subject's own list
        let (p, created) = match_or_create(&mut st, "c", 5.0, "what a bad smell", &MatchMode::Lexical).unwrap();
        assert_eq!((p.as_str(), created), ("bad smell", false));
        assert_eq!(st.intents("c").len(), 1);
    }

    #[test]
    fn own_list_preferred_over_global() {
        let mut st = IntentState::new(5);
        st.record("a", 0.0, "quality");
        st.record("b", 0.0, "poor quality");
        let (p, _) = match_or_create(&mut st, "b", 1.0, "poor quality again", &MatchMode::Lexical).unwrap();
        assert_eq!(p, "poor quality");
    }

    #[test]
    fn empty_text_rejected() {
        let mut st = IntentState::new(5);
        assert!(match_or_create(&mut st, "u", 0.0, " ?! ", &MatchMode::Lexical).is_err());
    }

    struct Script(Mutex<Vec<&'static str>>);

    impl ChatBackend for Script {
        fn model_id(&self) -> &str {
            "script"
        }

        fn complete(&self, _: &str) -> Result<String> {
            self.0.lock().unwrap().pop().map(str::to_string).ok_or_else(|| Error::Backend("done".into()))
        }
    }

    #[test]
    fn llm_long_phrase_reprompted_then_truncated() {
        let b = Script(Mutex::new(vec!["Intent= one two three four five six seven", "Intent= a b c d e f"]));
        let mut st = IntentState::new(5);
        let (p, created) = match_or_create(&mut st, "u", 0.0, "text", &MatchMode::Llm(&b)).unwrap();
        assert_eq!(p, "one two three four five");
        assert!(created);
        let b = Script(Mutex::new(vec!["Intent= Fits Well"]));
        assert_eq!(match_or_create(&mut st, "u", 1.0, "x", &MatchMode::Llm(&b)).unwrap().0, "fits well");
    }

    #[test]
    fn llm_failure_falls_back_to_lexical() {
        let b = Script(Mutex::new(vec![]));
        let mut st = IntentState::new(5);
        let (p, _) = match_or_create(&mut st, "u", 0.0, "broken zipper", &MatchMode::Llm(&b)).unwrap();
        assert_eq!(p, "broken zipper");
    }

    fn fixture() -> (SlDataset, WindowReport) {
        let obs = |t: f64, text: &str| Observation { time: t, values: Some(vec![0.0]), text: Some(text.into()), metadata: Default::default() };
        let subjects = vec![
            SubjectTrajectory { subject_id: "a".into(), records: vec![obs(0.5, "poor quality"), obs(2.5, "such poor quality plastic"), obs(3.5, "late")], covariates: vec![] },
            SubjectTrajectory { subject_id: "b".into(), records: vec![obs(1.5, "broken zipper")], covariates: vec![] },
        ];
        let ds = SlDataset::from_subjects(subjects, 1, 0).unwrap();
        let windows = Windows::equal(0.0, 4.0, 4).unwrap();
        let rep = WindowReport {
            cluster: 1,
            windows,
            alpha: 0.1,
            window_means: DMatrix::zeros(4, 1),
            calib_deviations: BTreeMap::new(),
            pvalues: [(0, vec![None; 4]), (1, vec![None; 4])].into_iter().collect(),
            raw_pvalues: BTreeMap::new(),
            flagged: vec![(0, vec![0, 2])],
        };
        (ds, rep)
    }

    #[test]
    fn flagged_windows_restrict_records() {
        let (ds, rep) = fixture();
        let recs = anomalous_records(&rep, &ds);
        // a: windows 1 and 3 only; b: no flagged window, so every record
        assert_eq!(recs, vec![(0, 0, 0), (0, 1, 2), (1, 0, 1)]);
    }

    #[test]
    fn summary_counts() {
        let (ds, rep) = fixture();
        let out = profile_anomalies(&[rep], &ds, &MatchMode::Lexical, 5, false).unwrap();
        assert_eq!(out.records.len(), 3);
        assert_eq!(out.summary.iter().map(|r| r.count).sum::<usize>(), 3);
        assert_eq!(out.summary.len(), 3);
        assert!(out.summary.iter().all(|r| r.count == 1 && r.cluster == 1));
        assert_eq!(out.records[1].intent, "poor quality");
        assert_eq!(out.states[0].total_count(), 3);
    }

    #[test]
    fn same_intent_same_window_counts_two() {
        let obs = |t: f64, text: &str| Observation { time: t, values: Some(vec![0.0]), text: Some(text.into()), metadata: Default::default() };
        let subjects = vec![SubjectTrajectory { subject_id: "a".into(), records: vec![obs(2.2, "poor quality"), obs(2.8, "poor quality again")], covariates: vec![] }];
        let ds = SlDataset::from_subjects(subjects, 1, 0).unwrap();
        let (_, mut rep) = fixture();
        rep.pvalues = [(0, vec![None; 4])].into_iter().collect();
        rep.flagged = vec![(0, vec![2])];
        let out = profile_anomalies(&[rep], &ds, &MatchMode::Lexical, 5, false).unwrap();
        assert_eq!(out.summary, vec![SummaryRow { cluster: 1, window: 2, intent: "poor quality".into(), count: 2 }]);
    }

    proptest! {
        #[test]
        fn normalize_idempotent(s in "\\PC{0,60}") {
            let n = normalize(&s);
            prop_assert_eq!(normalize(&n), n);
        }

        #[test]
        fn counts_conserved(texts in proptest::collection::vec("[a-z ]{1,20}[a-z]", 1..30)) {
            let mut st = IntentState::new(3);
            for (k, t) in texts.iter().enumerate() {
                match_or_create(&mut st, &format!("s{}", k % 4), k as f64, t, &MatchMode::Lexical).unwrap();
            }
            prop_assert_eq!(st.total_count(), texts.len());
        }
    }
}
