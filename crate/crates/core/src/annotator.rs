//! Turn-by-turn slot annotation of whole calls through a text-completion
//! client.
//!
//! The client is asked for one line per annotated turn:
//!
//! ```text
//! 3: {'payment_amount': '€30', 'payment_frequency': 'monthly'}
//! ```
//!
//! Each dictionary is read with [`crate::genparse::parse_slot_dict`], the same
//! reader used for model generations at evaluation time.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{is_valid_label, Call, SlotMap};
use crate::genparse::parse_slot_dict;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("request timed out")]
    Timeout,
    #[error("service unavailable: {0}")]
    Unavailable(String),
    #[error("request rejected: {0}")]
    Rejected(String),
}

impl ClientError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ClientError::Timeout | ClientError::Unavailable(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClientCapability {
    /// Longest instruction, in characters, the client accepts.
    pub max_input_chars: usize,
    pub timeout: Duration,
}

impl Default for ClientCapability {
    fn default() -> Self {
        Self {
            max_input_chars: 400_000,
            timeout: Duration::from_secs(120),
        }
    }
}

/// A text-completion backend. `complete` must be idempotent so that failed
/// requests can be retried.
pub trait CompletionClient: Send + Sync {
    fn capability(&self) -> ClientCapability;
    fn complete(&self, instruction: &str) -> Result<String, ClientError>;
}

/// Retry budget with an exponential backoff schedule. The schedule is
/// descriptive: callers that talk to a live service sleep for
/// [`RetryPolicy::backoff`] between attempts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff: Duration::from_millis(500),
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = self.multiplier.powi(retry.saturating_sub(1) as i32);
        self.initial_backoff.mul_f64(factor)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnnotateError {
    #[error("call {0:?} has no turns or an empty transcript")]
    EmptyCall(String),
    #[error("annotation prompt has {chars} characters, client accepts {limit}")]
    PromptTooLarge { chars: usize, limit: usize },
    #[error("transport failure after {attempts} attempt(s): {source}")]
    TransportError { attempts: u32, source: ClientError },
    #[error("unparseable annotation: {cause}")]
    UnparseableAnnotation { cause: String, raw: String },
}

/// Builds the whole-call annotation instruction.
///
/// The instruction lists every turn with its index and speaker, leaves the
/// label inventory open, restricts extraction to concrete mentions, and asks
/// for one dictionary line per turn.
pub fn build_annotation_prompt(call: &Call) -> Result<String, AnnotateError> {
    if call.turns.is_empty() || call.turns.iter().any(|t| t.transcript.trim().is_empty()) {
        return Err(AnnotateError::EmptyCall(call.call_id.clone()));
    }
    let mut prompt = String::new();
    prompt.push_str("You are annotating a customer service phone call for slot filling.\n");
    prompt.push_str(&format!("Call: {}\n", call.call_id));
    prompt.push_str(
        "Work through the call one turn at a time and extract slot label and value pairs from each turn.\n\
         Invent labels that describe each value; there is no predefined label set. Write labels in snake_case.\n\
         Extract only mentions of concrete things in the world: entities, events, dates, times and numbers.\n\
         Do not extract abstract notions such as issues, solutions, broader concepts, advice or ideas.\n\
         Copy every value exactly as it appears in the turn.\n\n\
         Transcript:\n",
    );
    for turn in &call.turns {
        let speaker = match turn.speaker {
            crate::corpus::Speaker::Agent => "agent",
            crate::corpus::Speaker::Customer => "customer",
        };
        prompt.push_str(&format!("[{}] {}: {}\n", turn.index, speaker, turn.transcript));
    }
    prompt.push_str(
        "\nAnswer with one line per turn that contains slots, in the form\n\
         <turn index>: {'slot_label': 'value'}\n\
         Leave out turns without slots and write nothing else.\n",
    );
    Ok(prompt)
}

/// One `index: {...}` line of an annotation, or why it could not be read.
#[derive(Debug, Clone, PartialEq, Eq)]
enum AnnotationLine {
    Entry { index: usize, slots: SlotMap },
    Bad { line: usize, cause: String },
}

fn read_annotation_lines(raw: &str) -> Vec<AnnotationLine> {
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with("```") {
            continue;
        }
        let body = trimmed
            .strip_prefix("Turn")
            .or_else(|| trimmed.strip_prefix("turn"))
            .unwrap_or(trimmed)
            .trim_start()
            .trim_start_matches('[');
        let digits: String = body.chars().take_while(char::is_ascii_digit).collect();
        let rest = body[digits.len()..].trim_start_matches(']').trim_start();
        let Some(dict_text) = rest.strip_prefix(':').filter(|_| !digits.is_empty()) else {
            out.push(AnnotationLine::Bad {
                line: line_no,
                cause: format!("expected `<turn index>: {{...}}`, got {trimmed:?}"),
            });
            continue;
        };
        let index = match digits.parse() {
            Ok(i) => i,
            Err(e) => {
                out.push(AnnotationLine::Bad {
                    line: line_no,
                    cause: format!("bad turn index: {e}"),
                });
                continue;
            }
        };
        match parse_slot_dict(dict_text) {
            Ok(dict) => out.push(AnnotationLine::Entry {
                index,
                slots: dict.values,
            }),
            Err(e) => out.push(AnnotationLine::Bad {
                line: line_no,
                cause: e.to_string(),
            }),
        }
    }
    out
}

/// Parses a raw annotation into per-turn slot maps. Entries whose label or
/// value would not pass corpus validation are dropped here and surface as
/// findings in [`validate_annotation`].
pub fn parse_annotation(raw: &str) -> Result<BTreeMap<usize, SlotMap>, AnnotateError> {
    let mut by_turn: BTreeMap<usize, SlotMap> = BTreeMap::new();
    for line in read_annotation_lines(raw) {
        match line {
            AnnotationLine::Entry { index, slots } => {
                let kept = slots
                    .into_iter()
                    .filter(|(l, v)| is_valid_label(l) && !v.trim().is_empty() && v != "None");
                by_turn.entry(index).or_default().extend(kept);
            }
            AnnotationLine::Bad { line, cause } => {
                return Err(AnnotateError::UnparseableAnnotation {
                    cause: format!("line {line}: {cause}"),
                    raw: raw.to_string(),
                })
            }
        }
    }
    Ok(by_turn)
}

/// Sends one call to `client` and returns it with gold slots filled in.
/// Turns the client did not annotate get empty slot maps.
pub fn annotate_call(
    call: &Call,
    client: &dyn CompletionClient,
    policy: &RetryPolicy,
) -> Result<Call, AnnotateError> {
    annotate_call_with_raw(call, client, policy).map(|(annotated, _)| annotated)
}

/// [`annotate_call`], also returning the raw completion for auditing.
pub fn annotate_call_with_raw(
    call: &Call,
    client: &dyn CompletionClient,
    policy: &RetryPolicy,
) -> Result<(Call, String), AnnotateError> {
    let prompt = build_annotation_prompt(call)?;
    let limit = client.capability().max_input_chars;
    let chars = prompt.chars().count();
    if chars > limit {
        return Err(AnnotateError::PromptTooLarge { chars, limit });
    }

    let mut attempts = 0;
    let raw = loop {
        attempts += 1;
        match client.complete(&prompt) {
            Ok(text) => break text,
            Err(e) if e.is_retryable() && attempts <= policy.max_retries => continue,
            Err(source) => return Err(AnnotateError::TransportError { attempts, source }),
        }
    };

    let mut by_turn = parse_annotation(&raw)?;
    let mut out = call.clone();
    for turn in &mut out.turns {
        turn.slots = by_turn.remove(&turn.index).unwrap_or_default();
    }
    Ok((out, raw))
}

/// Annotates calls concurrently with at most `max_in_flight` outstanding
/// requests. Results come back in input order.
pub fn annotate_calls(
    calls: &[Call],
    client: &dyn CompletionClient,
    policy: &RetryPolicy,
    max_in_flight: usize,
) -> Vec<(String, Result<Call, AnnotateError>)> {
    let run = || {
        calls
            .par_iter()
            .map(|c| (c.call_id.clone(), annotate_call(c, client, policy)))
            .collect()
    };
    match rayon::ThreadPoolBuilder::new()
        .num_threads(max_in_flight.max(1))
        .build()
    {
        Ok(pool) => pool.install(run),
        Err(_) => calls
            .iter()
            .map(|c| (c.call_id.clone(), annotate_call(c, client, policy)))
            .collect(),
    }
}

pub const DEFAULT_DENYLIST: [&str; 5] = ["issue", "solution", "concept", "advice", "idea"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Finding {
    UnparseableLine { line: usize, cause: String },
    UnknownTurnIndex { index: usize },
    NonSnakeCaseLabel { turn: usize, label: String },
    EmptyValue { turn: usize, label: String },
    DeniedLabel { turn: usize, label: String, term: String },
}

/// Advisory checks on a raw annotation. Never fails.
pub fn validate_annotation(raw: &str, call: &Call, denylist: &[&str]) -> Vec<Finding> {
    let mut findings = Vec::new();
    for line in read_annotation_lines(raw) {
        let (index, slots) = match line {
            AnnotationLine::Entry { index, slots } => (index, slots),
            AnnotationLine::Bad { line, cause } => {
                findings.push(Finding::UnparseableLine { line, cause });
                continue;
            }
        };
        if index >= call.turns.len() {
            findings.push(Finding::UnknownTurnIndex { index });
        }
        for (label, value) in slots {
            if !is_valid_label(&label) {
                findings.push(Finding::NonSnakeCaseLabel {
                    turn: index,
                    label: label.clone(),
                });
            }
            if value.trim().is_empty() {
                findings.push(Finding::EmptyValue {
                    turn: index,
                    label: label.clone(),
                });
            }
            if let Some(term) = denied_term(&label, denylist) {
                findings.push(Finding::DeniedLabel {
                    turn: index,
                    label,
                    term: term.to_string(),
                });
            }
        }
    }
    findings
}

fn denied_term<'d>(label: &str, denylist: &[&'d str]) -> Option<&'d str> {
    let lower = label.to_lowercase();
    lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|tok| !tok.is_empty())
        .find_map(|tok| {
            let singular = tok.strip_suffix('s').unwrap_or(tok);
            denylist
                .iter()
                .copied()
                .find(|d| *d == tok || *d == singular)
        })
}

#[derive(Debug, Clone, Deserialize)]
struct ScriptEntry {
    call_id: String,
    completion: String,
    /// Number of leading requests for this call that time out.
    #[serde(default)]
    fail_first: u32,
}

/// Deterministic client replaying scripted completions keyed by call id.
///
/// The script is JSON Lines:
/// `{"call_id": "c1", "completion": "0: {...}", "fail_first": 0}`.
#[derive(Debug, Default)]
pub struct MockClient {
    script: HashMap<String, ScriptEntry>,
    attempts: Mutex<HashMap<String, u32>>,
    requests: AtomicUsize,
    capability: ClientCapability,
}

impl MockClient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_completion(mut self, call_id: &str, completion: &str) -> Self {
        self.insert(call_id, completion, 0);
        self
    }

    pub fn with_failures(mut self, call_id: &str, completion: &str, fail_first: u32) -> Self {
        self.insert(call_id, completion, fail_first);
        self
    }

    pub fn with_capability(mut self, capability: ClientCapability) -> Self {
        self.capability = capability;
        self
    }

    fn insert(&mut self, call_id: &str, completion: &str, fail_first: u32) {
        self.script.insert(
            call_id.to_string(),
            ScriptEntry {
                call_id: call_id.to_string(),
                completion: completion.to_string(),
                fail_first,
            },
        );
    }

    pub fn from_script(text: &str) -> Result<Self, String> {
        let mut client = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(line)
                .map_err(|e| format!("script line {}: {e}", i + 1))?;
            client.script.insert(entry.call_id.clone(), entry);
        }
        Ok(client)
    }

    pub fn from_script_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
        Self::from_script(&text)
    }

    /// Total `complete` calls served, including failed ones.
    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl CompletionClient for MockClient {
    fn capability(&self) -> ClientCapability {
        self.capability
    }

    fn complete(&self, instruction: &str) -> Result<String, ClientError> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let call_id = instruction
            .lines()
            .find_map(|l| l.strip_prefix("Call: "))
            .ok_or_else(|| ClientError::Rejected("instruction names no call".into()))?;
        let entry = self
            .script
            .get(call_id)
            .ok_or_else(|| ClientError::Rejected(format!("no scripted completion for {call_id:?}")))?;
        let mut attempts = self.attempts.lock().expect("attempt counter poisoned");
        let seen = attempts.entry(call_id.to_string()).or_default();
        *seen += 1;
        if *seen <= entry.fail_first {
            return Err(ClientError::Timeout);
        }
        Ok(entry.completion.clone())
    }
}
