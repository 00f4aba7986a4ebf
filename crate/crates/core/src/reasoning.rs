//! Chain-of-thought targets and hybrid datasets.
//!
//! A reasoning target wraps the regular target in a templated trace:
//!
//! ```text
//! <thinking>
//! I hear the utterance in the audio clip is
//! ``` <transcript> ```
//! I see that the information bearing mentions in the utterance are monthly | €30.
//! The labels queried for are payment_frequency, payment_amount, new_limit
//! Based on the semantics of payment_frequency, payment_amount slots, the mentions in the utterance can be assigned to them. The others are all 'None'
//! </thinking>
//! <response>
//! {'payment_frequency': 'monthly', 'payment_amount': '€30', 'new_limit': 'None'}
//! </response>
//! ```

use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

use crate::corpus::{Call, Turn};
use crate::forge::{
    compare_examples, example_id, target_label_order, ControlTag, InstructionExample, Mode,
};
use crate::genparse::TagGrammar;
use crate::rng::{derive_seed, SplitMix64};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReasoningTrace {
    pub transcript: String,
    pub mentions: Vec<String>,
    /// Empty when the example queries no specific labels.
    pub queried_labels: Vec<String>,
    pub assigned_labels: Vec<String>,
    pub justification: String,
}

impl ReasoningTrace {
    /// Builds the trace for `turn`, optionally restricted to a queried list.
    pub fn for_turn(turn: &Turn, queried: Option<&[String]>) -> Self {
        let queried_labels = queried
            .map(|q| target_label_order(turn, q))
            .unwrap_or_default();
        let assigned_labels: Vec<String> = match queried {
            Some(_) => queried_labels
                .iter()
                .filter(|l| turn.slots.contains_key(*l))
                .cloned()
                .collect(),
            None => turn.slots.keys().cloned().collect(),
        };
        let justification = justification(&assigned_labels, &queried_labels);
        Self {
            transcript: turn.transcript.clone(),
            mentions: mentions(turn),
            queried_labels,
            assigned_labels,
            justification,
        }
    }
}

/// Gold values, deduplicated, ordered by first position in the transcript;
/// values not found verbatim follow in annotation order.
fn mentions(turn: &Turn) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut found = Vec::new();
    let mut missing = Vec::new();
    for (order, value) in turn.slots.values().enumerate() {
        if value == "None" || !seen.insert(value.clone()) {
            continue;
        }
        match turn.transcript.find(value.as_str()) {
            Some(pos) => found.push((pos, order, value.clone())),
            None => missing.push(value.clone()),
        }
    }
    found.sort();
    found.into_iter().map(|(_, _, v)| v).chain(missing).collect()
}

fn justification(assigned: &[String], queried: &[String]) -> String {
    if assigned.is_empty() {
        return if queried.is_empty() {
            "No slots can be assigned.".to_string()
        } else {
            "None of the queried labels can be assigned. They are all 'None'".to_string()
        };
    }
    let mut s = format!(
        "Based on the semantics of {} slots, the mentions in the utterance can be assigned to them.",
        assigned.join(", ")
    );
    if queried.len() > assigned.len() {
        s.push_str(" The others are all 'None'");
    }
    s
}

/// Renders the trace as newline-separated sentences.
pub fn render_trace(trace: &ReasoningTrace) -> String {
    let mut lines = Vec::with_capacity(5);
    lines.push("I hear the utterance in the audio clip is".to_string());
    lines.push(format!("``` {} ```", trace.transcript));
    if trace.mentions.is_empty() {
        lines.push("I see that there are no information bearing mentions in the utterance.".into());
    } else {
        lines.push(format!(
            "I see that the information bearing mentions in the utterance are {}.",
            trace.mentions.join(" | ")
        ));
    }
    if trace.queried_labels.is_empty() {
        lines.push("No specific labels are queried for".into());
    } else {
        lines.push(format!(
            "The labels queried for are {}",
            trace.queried_labels.join(", ")
        ));
    }
    lines.push(trace.justification.clone());
    lines.join("\n")
}

/// Wraps a trace and a regular target in think and response blocks.
pub fn reasoning_target(trace: &ReasoningTrace, regular_target: &str, grammar: &TagGrammar) -> String {
    format!(
        "{}\n{}\n{}\n{}\n{}\n{}",
        grammar.open_think,
        render_trace(trace),
        grammar.close_think,
        grammar.open_response,
        regular_target,
        grammar.close_response
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReasoningError {
    #[error("example {0} is not a regular example")]
    NotRegular(String),
    #[error("example {example} does not come from turn {turn}")]
    SourceTurnMismatch { example: String, turn: usize },
    #[error("regular and reasoning sets do not cover the same turns: {0}")]
    MismatchedOrigins(String),
}

/// Turns a regular example into its reasoning counterpart. Instruction,
/// audio and context are kept; the response block is the regular target.
pub fn forge_reasoning_example(
    regular: &InstructionExample,
    turn: &Turn,
    grammar: &TagGrammar,
) -> Result<InstructionExample, ReasoningError> {
    if regular.mode != Mode::Regular {
        return Err(ReasoningError::NotRegular(regular.example_id.clone()));
    }
    if regular.meta.turn != turn.index || regular.audio_ref != turn.audio_ref {
        return Err(ReasoningError::SourceTurnMismatch {
            example: regular.example_id.clone(),
            turn: turn.index,
        });
    }
    let trace = ReasoningTrace::for_turn(turn, regular.queried_slots.as_deref());
    Ok(InstructionExample {
        example_id: example_id(&regular.meta.call_id, regular.meta.turn, Mode::Reasoning),
        mode: Mode::Reasoning,
        target: reasoning_target(&trace, &regular.target, grammar),
        ..regular.clone()
    })
}

/// Reasoning counterparts of a whole regular dataset, in the same order.
pub fn forge_reasoning_dataset(
    calls: &[Call],
    regular_set: &[InstructionExample],
    grammar: &TagGrammar,
) -> Result<Vec<InstructionExample>, ReasoningError> {
    let by_id: HashMap<&str, &Call> = calls.iter().map(|c| (c.call_id.as_str(), c)).collect();
    regular_set
        .iter()
        .map(|ex| {
            let turn = by_id
                .get(ex.meta.call_id.as_str())
                .and_then(|c| c.turn(ex.meta.turn))
                .ok_or_else(|| {
                    ReasoningError::MismatchedOrigins(format!(
                        "{} has no source turn in the corpus",
                        ex.example_id
                    ))
                })?;
            forge_reasoning_example(ex, turn, grammar)
        })
        .collect()
}

/// Tags every regular example `\no_think` and every reasoning example
/// `\think`, then merges them in an order fixed by each example's derived
/// seed.
pub fn forge_hybrid_dataset(
    regular_set: &[InstructionExample],
    reasoning_set: &[InstructionExample],
    master_seed: u64,
) -> Result<Vec<InstructionExample>, ReasoningError> {
    let origins = |set: &[InstructionExample], mode: Mode| -> Result<BTreeSet<(String, usize)>, ReasoningError> {
        let mut out = BTreeSet::new();
        for ex in set {
            if ex.mode != mode {
                return Err(ReasoningError::MismatchedOrigins(format!(
                    "{} has mode {:?}, expected {mode:?}",
                    ex.example_id, ex.mode
                )));
            }
            if !out.insert((ex.meta.call_id.clone(), ex.meta.turn)) {
                return Err(ReasoningError::MismatchedOrigins(format!(
                    "turn {}:{} appears twice",
                    ex.meta.call_id, ex.meta.turn
                )));
            }
        }
        Ok(out)
    };
    let regular_origins = origins(regular_set, Mode::Regular)?;
    let reasoning_origins = origins(reasoning_set, Mode::Reasoning)?;
    if let Some((call, turn)) = regular_origins
        .symmetric_difference(&reasoning_origins)
        .next()
    {
        return Err(ReasoningError::MismatchedOrigins(format!(
            "turn {call}:{turn} is only in one set"
        )));
    }

    let tagged = |ex: &InstructionExample, tag: ControlTag, draw: usize| {
        let mut rng = SplitMix64::new(derive_seed(master_seed, &ex.meta.call_id, ex.meta.turn));
        let mut key = rng.next_u64();
        for _ in 0..draw {
            key = rng.next_u64();
        }
        let mut out = ex.clone();
        out.instruction = format!("{} {}", ex.instruction, tag.literal());
        out.control_tag = Some(tag);
        (key, out)
    };
    let mut merged: Vec<(u64, InstructionExample)> = regular_set
        .iter()
        .map(|ex| tagged(ex, ControlTag::NoThink, 0))
        .chain(reasoning_set.iter().map(|ex| tagged(ex, ControlTag::Think, 1)))
        .collect();
    merged.sort_by(|(ka, a), (kb, b)| ka.cmp(kb).then_with(|| compare_examples(a, b)));
    Ok(merged.into_iter().map(|(_, ex)| ex).collect())
}
