//! Slot-annotated call corpora: loading, validation, vocabulary and splits.
//!
//! A corpus file is JSON Lines with one call per line:
//!
//! ```text
//! {"call_id": "c1", "domain": "banking", "turns": [{"index": 0, "speaker": "agent",
//!   "audio": "clips/c1_t0.wav", "text": "...", "slots": {"payment_amount": "€30"}}]}
//! ```
//!
//! Fields the loader does not know are kept under a `meta` object, on the call
//! or on the turn they appeared in, and written back out there.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::rng::{fnv1a64, SplitMix64};

/// Ordered slot label → value map. Order is annotation order.
pub type SlotMap = IndexMap<String, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Banking,
    Telecom,
    Insurance,
    Retail,
    Other,
}

impl Domain {
    pub const ALL: [Domain; 5] = [
        Domain::Banking,
        Domain::Telecom,
        Domain::Insurance,
        Domain::Retail,
        Domain::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Banking => "banking",
            Domain::Telecom => "telecom",
            Domain::Insurance => "insurance",
            Domain::Retail => "retail",
            Domain::Other => "other",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Agent,
    Customer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawTurn")]
pub struct Turn {
    pub index: usize,
    pub speaker: Speaker,
    #[serde(rename = "audio")]
    pub audio_ref: String,
    #[serde(rename = "text")]
    pub transcript: String,
    pub slots: SlotMap,
    #[serde(skip_serializing_if = "Map::is_empty")]
    pub meta: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawCall")]
pub struct Call {
    pub call_id: String,
    pub domain: Domain,
    pub turns: Vec<Turn>,
    #[serde(skip_serializing_if = "Map::is_empty")]
    pub meta: Map<String, Value>,
}

#[derive(Deserialize)]
struct RawTurn {
    index: usize,
    speaker: Speaker,
    audio: String,
    text: String,
    #[serde(default)]
    slots: SlotMap,
    #[serde(default)]
    meta: Map<String, Value>,
    #[serde(flatten)]
    unknown: Map<String, Value>,
}

impl From<RawTurn> for Turn {
    fn from(raw: RawTurn) -> Self {
        let mut meta = raw.meta;
        meta.extend(raw.unknown);
        Turn {
            index: raw.index,
            speaker: raw.speaker,
            audio_ref: raw.audio,
            transcript: raw.text,
            slots: raw.slots,
            meta,
        }
    }
}

#[derive(Deserialize)]
struct RawCall {
    call_id: String,
    domain: Domain,
    turns: Vec<Turn>,
    #[serde(default)]
    meta: Map<String, Value>,
    #[serde(flatten)]
    unknown: Map<String, Value>,
}

impl From<RawCall> for Call {
    fn from(raw: RawCall) -> Self {
        let mut meta = raw.meta;
        meta.extend(raw.unknown);
        Call {
            call_id: raw.call_id,
            domain: raw.domain,
            turns: raw.turns,
            meta,
        }
    }
}

impl Call {
    pub fn turn(&self, index: usize) -> Option<&Turn> {
        self.turns.get(index)
    }

    pub fn n_turns(&self) -> usize {
        self.turns.len()
    }
}

/// `[a-z][a-z0-9_]*`
pub fn is_valid_label(label: &str) -> bool {
    let mut chars = label.chars();
    match chars.next() {
        Some(c) if c.is_ascii_lowercase() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed record: {cause}")]
    MalformedLine { line: usize, cause: String },
    #[error("line {line}: duplicate call_id {call_id:?}")]
    DuplicateCallId { line: usize, call_id: String },
    #[error("line {line}: call {call_id:?} expected turn index {expected}, found {found}")]
    NonContiguousTurns {
        line: usize,
        call_id: String,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: call {call_id:?} turn {turn}: slot label {label:?} is not snake_case")]
    InvalidSlotLabel {
        line: usize,
        call_id: String,
        turn: usize,
        label: String,
    },
    #[error("line {line}: call {call_id:?} turn {turn}: slot {label:?} has an empty or 'None' value")]
    InvalidSlotValue {
        line: usize,
        call_id: String,
        turn: usize,
        label: String,
    },
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error("{} invalid corpus line(s); first: {}", .0.len(), .0[0])]
    Invalid(Vec<CorpusError>),
}

impl LoadError {
    pub fn errors(&self) -> &[CorpusError] {
        match self {
            LoadError::Invalid(errs) => errs,
            LoadError::Io(_) => &[],
        }
    }
}

/// Checks the per-call invariants. `line` is only used for error reporting.
pub fn validate_call(call: &Call, line: usize) -> Vec<CorpusError> {
    let mut errors = Vec::new();
    if call.call_id.is_empty() {
        errors.push(CorpusError::MalformedLine {
            line,
            cause: "call_id is empty".into(),
        });
    }
    for (expected, turn) in call.turns.iter().enumerate() {
        if turn.index != expected {
            errors.push(CorpusError::NonContiguousTurns {
                line,
                call_id: call.call_id.clone(),
                expected,
                found: turn.index,
            });
            break;
        }
    }
    for turn in &call.turns {
        for (label, value) in &turn.slots {
            if !is_valid_label(label) {
                errors.push(CorpusError::InvalidSlotLabel {
                    line,
                    call_id: call.call_id.clone(),
                    turn: turn.index,
                    label: label.clone(),
                });
            }
            if value.trim().is_empty() || value == "None" {
                errors.push(CorpusError::InvalidSlotValue {
                    line,
                    call_id: call.call_id.clone(),
                    turn: turn.index,
                    label: label.clone(),
                });
            }
        }
    }
    errors
}

/// Parses and validates corpus text, collecting every error rather than
/// stopping at the first one.
pub fn parse_corpus(text: &str) -> Result<Vec<Call>, LoadError> {
    let mut calls = Vec::new();
    let mut errors = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let call: Call = match serde_json::from_str(raw) {
            Ok(c) => c,
            Err(e) => {
                errors.push(CorpusError::MalformedLine {
                    line,
                    cause: e.to_string(),
                });
                continue;
            }
        };
        let call_errors = validate_call(&call, line);
        if !call_errors.is_empty() {
            errors.extend(call_errors);
            continue;
        }
        if !seen.insert(call.call_id.clone()) {
            errors.push(CorpusError::DuplicateCallId {
                line,
                call_id: call.call_id,
            });
            continue;
        }
        calls.push(call);
    }
    if errors.is_empty() {
        Ok(calls)
    } else {
        Err(LoadError::Invalid(errors))
    }
}

pub fn load_corpus(path: &Path) -> Result<Vec<Call>, LoadError> {
    let text = std::fs::read_to_string(path)?;
    parse_corpus(&text)
}

/// Canonical JSON Lines serialization of a corpus.
pub fn serialize_corpus(calls: &[Call]) -> String {
    crate::io::to_jsonl(calls).expect("corpus records always serialize")
}

/// Gold slot labels with per-turn occurrence counts, overall and per domain.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SlotVocabulary {
    counts: BTreeMap<String, usize>,
    by_domain: BTreeMap<Domain, BTreeMap<String, usize>>,
}

impl SlotVocabulary {
    pub fn from_counts<I, S>(counts: I) -> Self
    where
        I: IntoIterator<Item = (S, usize)>,
        S: Into<String>,
    {
        let counts: BTreeMap<String, usize> =
            counts.into_iter().map(|(l, c)| (l.into(), c)).collect();
        let mut by_domain = BTreeMap::new();
        by_domain.insert(Domain::Other, counts.clone());
        Self { counts, by_domain }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.counts.contains_key(label)
    }

    pub fn count(&self, label: &str) -> usize {
        self.counts.get(label).copied().unwrap_or(0)
    }

    /// Labels in lexicographic order.
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.counts.keys().map(String::as_str)
    }

    pub fn labels_in(&self, domain: Domain) -> impl Iterator<Item = &str> {
        self.by_domain
            .get(&domain)
            .into_iter()
            .flat_map(|m| m.keys().map(String::as_str))
    }

    pub fn counts(&self) -> &BTreeMap<String, usize> {
        &self.counts
    }
}

pub fn build_vocabulary(calls: &[Call]) -> SlotVocabulary {
    let mut vocab = SlotVocabulary::default();
    for call in calls {
        let domain_counts = vocab.by_domain.entry(call.domain).or_default();
        for turn in &call.turns {
            for label in turn.slots.keys() {
                *vocab.counts.entry(label.clone()).or_default() += 1;
                *domain_counts.entry(label.clone()).or_default() += 1;
            }
        }
    }
    vocab.by_domain.retain(|_, m| !m.is_empty());
    vocab
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, dev: f64, test: f64) -> Self {
        Self { train, dev, test }
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.dev, self.test]
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplitError {
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    InvalidRatios([f64; 3]),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<Call>,
    pub dev: Vec<Call>,
    pub test: Vec<Call>,
}

/// Call-level split, stratified by domain and deterministic in `seed`.
///
/// Each domain is ordered by call id, shuffled with its own stream, then cut
/// by largest-remainder apportionment of the ratios. Every output list is
/// sorted by call id.
pub fn split_corpus(
    calls: &[Call],
    ratios: SplitRatios,
    seed: u64,
) -> Result<CorpusSplit, SplitError> {
    let r = ratios.as_array();
    let sum: f64 = r.iter().sum();
    if r.iter().any(|x| !x.is_finite() || *x <= 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(SplitError::InvalidRatios(r));
    }

    let mut strata: BTreeMap<Domain, Vec<&Call>> = BTreeMap::new();
    for call in calls {
        strata.entry(call.domain).or_default().push(call);
    }

    let mut split = CorpusSplit::default();
    for (domain, mut members) in strata {
        members.sort_by(|a, b| a.call_id.cmp(&b.call_id));
        let stream_seed = fnv1a64(format!("split|{domain}|{seed}").as_bytes());
        SplitMix64::new(stream_seed).shuffle(&mut members);

        let sizes = apportion(members.len(), &r);
        let (train, rest) = members.split_at(sizes[0]);
        let (dev, test) = rest.split_at(sizes[1]);
        split.train.extend(train.iter().map(|c| (*c).clone()));
        split.dev.extend(dev.iter().map(|c| (*c).clone()));
        split.test.extend(test.iter().map(|c| (*c).clone()));
    }
    for part in [&mut split.train, &mut split.dev, &mut split.test] {
        part.sort_by(|a, b| a.call_id.cmp(&b.call_id));
    }
    Ok(split)
}

/// Largest-remainder apportionment; ties go to the earlier bucket.
fn apportion(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, q) in sizes.iter_mut().zip(&quotas) {
        // Guard against 0.1 * 10 landing a hair under 1.
        *s = (q + 1e-9).floor() as usize;
    }
    let mut left = n.saturating_sub(sizes.iter().sum());
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - sizes[a] as f64;
        let fb = quotas[b] - sizes[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}
