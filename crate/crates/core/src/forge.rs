//! Regular instruction examples, one per corpus turn.
//!
//! Each example is forged from its own random stream seeded by
//! [`derive_seed`]`(master_seed, call_id, turn_index)`, so a dataset is a pure
//! function of corpus and config no matter how the work is scheduled. Within
//! one example the draws happen in this order:
//!
//! 1. prompt case, weighted by `case_weights` (`next_f64() * total`, first
//!    case whose cumulative weight exceeds it);
//! 2. template index, `below(bank length)`;
//! 3. context size `T`, `below(min(context_max, turn_index) + 1)`, context
//!    cases only;
//! 4. distractor count `S`, `between(distractors_min, distractors_max)`, then
//!    a partial Fisher-Yates draw of `S` candidates, then a shuffle of the
//!    whole queried list; query cases only.

use std::cmp::Ordering;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Call, Domain, SlotMap, SlotVocabulary, Turn};
use crate::genparse::format_slot_dict;
use crate::rng::{derive_seed, SplitMix64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptCase {
    Plain,
    WithContext,
    WithQuery,
    WithContextAndQuery,
}

impl PromptCase {
    pub const ALL: [PromptCase; 4] = [
        PromptCase::Plain,
        PromptCase::WithContext,
        PromptCase::WithQuery,
        PromptCase::WithContextAndQuery,
    ];

    pub fn has_context(self) -> bool {
        matches!(self, PromptCase::WithContext | PromptCase::WithContextAndQuery)
    }

    pub fn has_query(self) -> bool {
        matches!(self, PromptCase::WithQuery | PromptCase::WithContextAndQuery)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptCase::Plain => "plain",
            PromptCase::WithContext => "with_context",
            PromptCase::WithQuery => "with_query",
            PromptCase::WithContextAndQuery => "with_context_and_query",
        }
    }
}

impl fmt::Display for PromptCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Regular,
    Reasoning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlTag {
    Think,
    NoThink,
}

impl ControlTag {
    /// The literal appended to the instruction.
    pub fn literal(self) -> &'static str {
        match self {
            ControlTag::Think => "\\think",
            ControlTag::NoThink => "\\no_think",
        }
    }
}

pub const QUERY_PLACEHOLDER: &str = "{queried_slots}";
pub const CONTEXT_PLACEHOLDER: &str = "{context}";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub case: PromptCase,
    pub text: String,
    pub format_directive: String,
}

/// Ten instruction templates per prompt case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateBanks {
    pub plain: Vec<String>,
    pub with_context: Vec<String>,
    pub with_query: Vec<String>,
    pub with_context_and_query: Vec<String>,
}

impl TemplateBanks {
    pub fn bank(&self, case: PromptCase) -> &[String] {
        match case {
            PromptCase::Plain => &self.plain,
            PromptCase::WithContext => &self.with_context,
            PromptCase::WithQuery => &self.with_query,
            PromptCase::WithContextAndQuery => &self.with_context_and_query,
        }
    }
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl Default for TemplateBanks {
    fn default() -> Self {
        Self {
            plain: strings(&[
                "Find all slot values in the current audio.",
                "Extract every slot and its value from the current audio.",
                "Listen to the audio and fill in all slots that are mentioned.",
                "Identify the slots mentioned in this audio clip and give their values.",
                "What slot values does the speaker mention in the current audio?",
                "Perform slot filling on the current audio.",
                "List each slot label with the value spoken in the audio.",
                "Pull out all slot-value pairs from the speech in this clip.",
                "Annotate the current utterance with slot labels and values.",
                "Detect the slots in the audio and report their values.",
            ]),
            with_context: strings(&[
                "Previous turns of the conversation:\n{context}\nFind all slot values in the current audio.",
                "Conversation so far:\n{context}\nExtract every slot and its value from the current audio.",
                "Here is what was said before:\n{context}\nNow fill in all slots mentioned in the current audio.",
                "Earlier turns:\n{context}\nIdentify the slots mentioned in this audio clip and give their values.",
                "Context from the call:\n{context}\nWhat slot values does the speaker mention in the current audio?",
                "Dialogue history:\n{context}\nPerform slot filling on the current audio.",
                "The call so far:\n{context}\nList each slot label with the value spoken in the audio.",
                "Preceding turns:\n{context}\nPull out all slot-value pairs from the speech in this clip.",
                "Given the earlier turns below\n{context}\nannotate the current utterance with slot labels and values.",
                "Previous utterances:\n{context}\nDetect the slots in the audio and report their values.",
            ]),
            with_query: strings(&[
                "Find slot values for {queried_slots} in the current audio.",
                "Extract the values of {queried_slots} from the current audio.",
                "Listen to the audio and fill in these slots: {queried_slots}.",
                "What values does the speaker give for {queried_slots}?",
                "Fill the slots {queried_slots} using the current audio.",
                "Give the value of each of {queried_slots} as mentioned in this clip.",
                "For the slots {queried_slots}, report the values spoken in the audio.",
                "Perform slot filling on the current audio for {queried_slots}.",
                "Check the audio for {queried_slots} and give their values.",
                "Return values for the slots {queried_slots} from this utterance.",
            ]),
            with_context_and_query: strings(&[
                "Previous turns of the conversation:\n{context}\nFind slot values for {queried_slots} in the current audio.",
                "Conversation so far:\n{context}\nExtract the values of {queried_slots} from the current audio.",
                "Here is what was said before:\n{context}\nNow fill in these slots from the current audio: {queried_slots}.",
                "Earlier turns:\n{context}\nWhat values does the speaker give for {queried_slots}?",
                "Context from the call:\n{context}\nFill the slots {queried_slots} using the current audio.",
                "Dialogue history:\n{context}\nGive the value of each of {queried_slots} as mentioned in this clip.",
                "The call so far:\n{context}\nFor the slots {queried_slots}, report the values spoken in the audio.",
                "Preceding turns:\n{context}\nPerform slot filling on the current audio for {queried_slots}.",
                "Given the earlier turns below\n{context}\ncheck the audio for {queried_slots} and give their values.",
                "Previous utterances:\n{context}\nReturn values for the slots {queried_slots} from this utterance.",
            ]),
        }
    }
}

/// Relative frequency of each prompt case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseWeights {
    pub plain: f64,
    pub with_context: f64,
    pub with_query: f64,
    pub with_context_and_query: f64,
}

impl Default for CaseWeights {
    fn default() -> Self {
        Self {
            plain: 1.0,
            with_context: 1.0,
            with_query: 1.0,
            with_context_and_query: 1.0,
        }
    }
}

impl CaseWeights {
    fn as_array(&self) -> [f64; 4] {
        [
            self.plain,
            self.with_context,
            self.with_query,
            self.with_context_and_query,
        ]
    }
}

/// Where distractor labels are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorPool {
    #[default]
    Corpus,
    Domain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForgeConfig {
    pub master_seed: u64,
    pub context_max: usize,
    pub distractors_min: usize,
    pub distractors_max: usize,
    pub prompts_per_case: usize,
    pub template_banks: TemplateBanks,
    pub format_directive: String,
    pub case_weights: CaseWeights,
    pub distractor_pool: DistractorPool,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            context_max: 3,
            distractors_min: 1,
            distractors_max: 5,
            prompts_per_case: 10,
            template_banks: TemplateBanks::default(),
            format_directive: "Format the output as JSON.".into(),
            case_weights: CaseWeights::default(),
            distractor_pool: DistractorPool::Corpus,
        }
    }
}

impl ForgeConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            master_seed: seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ForgeError> {
        let bad = |msg: String| Err(ForgeError::InvalidConfig(msg));
        if self.distractors_min < 1 || self.distractors_min > self.distractors_max {
            return bad(format!(
                "need 1 <= distractors_min <= distractors_max, got {}..{}",
                self.distractors_min, self.distractors_max
            ));
        }
        if self.prompts_per_case == 0 {
            return bad("prompts_per_case must be positive".into());
        }
        for case in PromptCase::ALL {
            let bank = self.template_banks.bank(case);
            if bank.len() != self.prompts_per_case {
                return bad(format!(
                    "template bank {case} has {} entries, expected {}",
                    bank.len(),
                    self.prompts_per_case
                ));
            }
            for (i, t) in bank.iter().enumerate() {
                if t.contains(QUERY_PLACEHOLDER) != case.has_query()
                    || t.contains(CONTEXT_PLACEHOLDER) != case.has_context()
                {
                    return bad(format!("template {case}[{i}] has the wrong placeholders"));
                }
            }
        }
        let w = self.case_weights.as_array();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return bad(format!("case weights must be non-negative with a positive sum, got {w:?}"));
        }
        if self.format_directive.trim().is_empty() {
            return bad("format_directive must not be empty".into());
        }
        Ok(())
    }

    pub fn template(&self, case: PromptCase, index: usize) -> PromptTemplate {
        PromptTemplate {
            case,
            text: self.template_banks.bank(case)[index].clone(),
            format_directive: self.format_directive.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ForgeError {
    #[error("invalid forge config: {0}")]
    InvalidConfig(String),
    #[error("call {call_id:?} has no turn {turn}")]
    TurnOutOfRange { call_id: String, turn: usize },
    #[error("slot vocabulary is empty; cannot draw distractors")]
    EmptyVocabulary,
    #[error("template placeholder {0} has no value")]
    UnresolvedPlaceholder(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub call_id: String,
    pub turn: usize,
    #[serde(rename = "T")]
    pub context_size: Option<usize>,
    #[serde(rename = "S")]
    pub distractors: Option<usize>,
    pub template: usize,
    pub case: PromptCase,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub shortfall: bool,
}

/// One supervised fine-tuning record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    #[serde(rename = "id")]
    pub example_id: String,
    #[serde(rename = "audio")]
    pub audio_ref: String,
    pub context: Vec<String>,
    pub instruction: String,
    pub queried_slots: Option<Vec<String>>,
    pub mode: Mode,
    pub control_tag: Option<ControlTag>,
    pub target: String,
    pub meta: ExampleMeta,
}

impl InstructionExample {
    pub fn sort_key(&self) -> (&str, usize) {
        (&self.meta.call_id, self.meta.turn)
    }
}

pub fn example_id(call_id: &str, turn_index: usize, mode: Mode) -> String {
    let suffix = match mode {
        Mode::Regular => "regular",
        Mode::Reasoning => "reasoning",
    };
    format!("{call_id}:{turn_index}:{suffix}")
}

/// Transcripts of the `T` turns before `turn_index`, oldest first, with `T`
/// uniform on `0..=min(context_max, turn_index)`.
pub fn select_context(
    call: &Call,
    turn_index: usize,
    context_max: usize,
    rng: &mut SplitMix64,
) -> Vec<String> {
    let size = rng.below(context_max.min(turn_index) + 1);
    call.turns[turn_index - size..turn_index]
        .iter()
        .map(|t| t.transcript.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySelection {
    /// Gold labels plus distractors, shuffled.
    pub queried: Vec<String>,
    /// Distractors in the order they were drawn.
    pub distractors: Vec<String>,
    /// The drawn `S`; more than `distractors.len()` when the pool ran short.
    pub drawn: usize,
    pub shortfall: bool,
}

/// Gold labels plus `S` distractors drawn without replacement from the pool
/// (the whole vocabulary, or the call's domain), shuffled together.
pub fn select_queried_slots(
    gold: &[String],
    vocabulary: &SlotVocabulary,
    domain: Domain,
    config: &ForgeConfig,
    rng: &mut SplitMix64,
) -> Result<QuerySelection, ForgeError> {
    if vocabulary.is_empty() {
        return Err(ForgeError::EmptyVocabulary);
    }
    let pool: Vec<&str> = match config.distractor_pool {
        DistractorPool::Corpus => vocabulary.labels().collect(),
        DistractorPool::Domain => vocabulary.labels_in(domain).collect(),
    };
    let mut candidates: Vec<&str> = pool
        .into_iter()
        .filter(|l| !gold.iter().any(|g| g == l))
        .collect();

    let drawn = rng.between(config.distractors_min, config.distractors_max);
    let take = drawn.min(candidates.len());
    for i in 0..take {
        let j = i + rng.below(candidates.len() - i);
        candidates.swap(i, j);
    }
    let distractors: Vec<String> = candidates[..take].iter().map(|s| s.to_string()).collect();

    let mut queried: Vec<String> = gold.to_vec();
    queried.extend(distractors.iter().cloned());
    rng.shuffle(&mut queried);
    Ok(QuerySelection {
        queried,
        distractors,
        drawn,
        shortfall: take < drawn,
    })
}

/// Substitutes `{queried_slots}` and `{context}` and appends the output-format
/// directive. Context lines are prefixed `prev: `; an empty context renders as
/// `prev: (none)`.
pub fn render_prompt(
    template: &PromptTemplate,
    queried: Option<&[String]>,
    context: Option<&[String]>,
) -> Result<String, ForgeError> {
    let text = &template.text;
    let mut out = String::with_capacity(text.len() + 64);
    let mut rest = text.as_str();
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        let name_len = tail[1..]
            .find('}')
            .filter(|&n| n > 0 && tail[1..1 + n].chars().all(|c| c.is_ascii_lowercase() || c == '_'));
        let Some(n) = name_len else {
            out.push('{');
            rest = &tail[1..];
            continue;
        };
        let placeholder = &tail[..n + 2];
        match placeholder {
            QUERY_PLACEHOLDER => match queried {
                Some(q) => out.push_str(&q.join(", ")),
                None => return Err(ForgeError::UnresolvedPlaceholder(placeholder.into())),
            },
            CONTEXT_PLACEHOLDER => match context {
                Some([]) => out.push_str("prev: (none)"),
                Some(c) => {
                    let lines: Vec<String> = c.iter().map(|t| format!("prev: {t}")).collect();
                    out.push_str(&lines.join("\n"));
                }
                None => return Err(ForgeError::UnresolvedPlaceholder(placeholder.into())),
            },
            other => return Err(ForgeError::UnresolvedPlaceholder(other.into())),
        }
        rest = &tail[n + 2..];
    }
    out.push_str(rest);
    let directive = template.format_directive.trim();
    if !out.trim_end().ends_with(directive) {
        out.push(' ');
        out.push_str(directive);
    }
    Ok(out)
}

/// Labels in target order: queried gold labels in turn order, then the other
/// queried labels in the order they were queried.
pub fn target_label_order(turn: &Turn, queried: &[String]) -> Vec<String> {
    let mut order: Vec<String> = turn
        .slots
        .keys()
        .filter(|l| queried.contains(l))
        .cloned()
        .collect();
    order.extend(
        queried
            .iter()
            .filter(|l| !turn.slots.contains_key(*l))
            .cloned(),
    );
    order
}

/// The response dictionary for a turn: gold values over the queried labels
/// with `'None'` for absent ones, or just the gold slots when nothing is
/// queried.
pub fn regular_target(turn: &Turn, queried: Option<&[String]>) -> SlotMap {
    match queried {
        None => turn.slots.clone(),
        Some(q) => target_label_order(turn, q)
            .into_iter()
            .map(|label| {
                let value = turn.slots.get(&label).cloned().unwrap_or_else(|| "None".into());
                (label, value)
            })
            .collect(),
    }
}

fn draw_case(weights: &CaseWeights, rng: &mut SplitMix64) -> PromptCase {
    let w = weights.as_array();
    let total: f64 = w.iter().sum();
    let u = rng.next_f64() * total;
    let mut acc = 0.0;
    for (case, weight) in PromptCase::ALL.into_iter().zip(w) {
        acc += weight;
        if u < acc {
            return case;
        }
    }
    // Only reachable through rounding at the top of the range.
    PromptCase::ALL
        .into_iter()
        .zip(w)
        .rev()
        .find(|(_, weight)| *weight > 0.0)
        .map(|(c, _)| c)
        .unwrap_or(PromptCase::Plain)
}

pub fn forge_regular_example(
    call: &Call,
    turn_index: usize,
    config: &ForgeConfig,
    vocabulary: &SlotVocabulary,
) -> Result<InstructionExample, ForgeError> {
    let turn = call.turn(turn_index).ok_or_else(|| ForgeError::TurnOutOfRange {
        call_id: call.call_id.clone(),
        turn: turn_index,
    })?;
    let mut rng = SplitMix64::new(derive_seed(config.master_seed, &call.call_id, turn_index));

    let case = draw_case(&config.case_weights, &mut rng);
    let template_index = rng.below(config.template_banks.bank(case).len());
    let context = case
        .has_context()
        .then(|| select_context(call, turn_index, config.context_max, &mut rng));
    let selection = if case.has_query() {
        let gold: Vec<String> = turn.slots.keys().cloned().collect();
        Some(select_queried_slots(&gold, vocabulary, call.domain, config, &mut rng)?)
    } else {
        None
    };
    let queried = selection.as_ref().map(|s| s.queried.clone());

    let template = config.template(case, template_index);
    let instruction = render_prompt(&template, queried.as_deref(), context.as_deref())?;
    let target = format_slot_dict(&regular_target(turn, queried.as_deref()));

    Ok(InstructionExample {
        example_id: example_id(&call.call_id, turn_index, Mode::Regular),
        audio_ref: turn.audio_ref.clone(),
        context: context.clone().unwrap_or_default(),
        instruction,
        queried_slots: queried,
        mode: Mode::Regular,
        control_tag: None,
        target,
        meta: ExampleMeta {
            call_id: call.call_id.clone(),
            turn: turn_index,
            context_size: context.map(|c| c.len()),
            distractors: selection.as_ref().map(|s| s.distractors.len()),
            template: template_index,
            case,
            shortfall: selection.is_some_and(|s| s.shortfall),
        },
    })
}

pub fn compare_examples(a: &InstructionExample, b: &InstructionExample) -> Ordering {
    a.sort_key().cmp(&b.sort_key()).then_with(|| a.example_id.cmp(&b.example_id))
}

/// One regular example per turn of every call, sorted by `(call_id, turn)`.
/// `parallel` only changes scheduling, never output.
pub fn forge_regular_dataset(
    calls: &[Call],
    config: &ForgeConfig,
    vocabulary: &SlotVocabulary,
    parallel: bool,
) -> Result<Vec<InstructionExample>, ForgeError> {
    config.validate()?;
    let jobs: Vec<(&Call, usize)> = calls
        .iter()
        .flat_map(|c| (0..c.turns.len()).map(move |i| (c, i)))
        .collect();
    let forge = |&(call, i): &(&Call, usize)| forge_regular_example(call, i, config, vocabulary);
    let mut examples: Vec<InstructionExample> = if parallel {
        jobs.par_iter().map(forge).collect::<Result<_, _>>()?
    } else {
        jobs.iter().map(forge).collect::<Result<_, _>>()?
    };
    examples.sort_by(compare_examples);
    Ok(examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, parse_corpus, Speaker};

    fn turn_with(slots: &[(&str, &str)]) -> Turn {
        Turn {
            index: 0,
            speaker: Speaker::Customer,
            audio_ref: "a.wav".into(),
            transcript: "text".into(),
            slots: slots.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            meta: Default::default(),
        }
    }

    fn call_of(n_turns: usize) -> Call {
        Call {
            call_id: "c1".into(),
            domain: Domain::Banking,
            turns: (0..n_turns)
                .map(|i| Turn {
                    index: i,
                    transcript: format!("turn {i}"),
                    ..turn_with(&[])
                })
                .collect(),
            meta: Default::default(),
        }
    }

    fn labels(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn default_config_is_valid() {
        ForgeConfig::default().validate().unwrap();
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut c = ForgeConfig::default();
        c.distractors_min = 0;
        assert!(c.validate().is_err());
        let mut c = ForgeConfig::default();
        c.distractors_min = 6;
        assert!(c.validate().is_err());
        let mut c = ForgeConfig::default();
        c.template_banks.plain.pop();
        assert!(c.validate().is_err());
        let mut c = ForgeConfig::default();
        c.template_banks.plain[0] = "Find {queried_slots}.".into();
        assert!(c.validate().is_err());
        let mut c = ForgeConfig::default();
        c.case_weights.plain = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn first_turn_has_no_context() {
        let call = call_of(4);
        let mut rng = SplitMix64::new(1);
        for _ in 0..100 {
            assert!(select_context(&call, 0, 3, &mut rng).is_empty());
        }
    }

    #[test]
    fn context_window_is_chronological() {
        let call = call_of(6);
        let mut rng = SplitMix64::new(5);
        let mut seen_two = false;
        for _ in 0..200 {
            let ctx = select_context(&call, 5, 3, &mut rng);
            assert!(ctx.len() <= 3);
            let expected: Vec<String> = (5 - ctx.len()..5).map(|i| format!("turn {i}")).collect();
            assert_eq!(ctx, expected);
            if ctx.len() == 2 {
                assert_eq!(ctx, ["turn 3", "turn 4"]);
                seen_two = true;
            }
        }
        assert!(seen_two);
    }

    #[test]
    fn context_sizes_are_uniform() {
        let call = call_of(8);
        let mut rng = SplitMix64::new(11);
        let mut hist = [0usize; 4];
        let n = 10_000;
        for i in 0..n {
            hist[select_context(&call, 3 + i % 5, 3, &mut rng).len()] += 1;
        }
        for count in hist {
            let freq = count as f64 / n as f64;
            assert!((freq - 0.25).abs() <= 0.02, "{hist:?}");
        }
    }

    fn fixed_s(s: usize) -> ForgeConfig {
        ForgeConfig {
            distractors_min: s,
            distractors_max: s,
            ..ForgeConfig::default()
        }
    }

    #[test]
    fn gold_plus_three_distractors() {
        let vocab = SlotVocabulary::from_counts(["a", "b", "c", "d", "e", "f", "g"].map(|l| (l, 1)));
        let mut rng = SplitMix64::new(2);
        let sel = select_queried_slots(&labels(&["a"]), &vocab, Domain::Other, &fixed_s(3), &mut rng)
            .unwrap();
        assert_eq!(sel.queried.len(), 4);
        assert!(sel.queried.contains(&"a".to_string()));
        assert_eq!(sel.distractors.len(), 3);
        assert!(!sel.distractors.contains(&"a".to_string()));
        let mut uniq = sel.queried.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 4);
        assert!(!sel.shortfall);
    }

    #[test]
    fn shortfall_uses_every_candidate() {
        let vocab = SlotVocabulary::from_counts([("a", 1), ("b", 1)]);
        let mut rng = SplitMix64::new(2);
        let sel = select_queried_slots(&[], &vocab, Domain::Other, &fixed_s(5), &mut rng).unwrap();
        assert_eq!(sel.queried.len(), 2);
        assert_eq!(sel.drawn, 5);
        assert!(sel.shortfall);
    }

    #[test]
    fn empty_vocabulary_is_an_error() {
        let mut rng = SplitMix64::new(2);
        let err = select_queried_slots(
            &[],
            &SlotVocabulary::default(),
            Domain::Other,
            &ForgeConfig::default(),
            &mut rng,
        );
        assert_eq!(err, Err(ForgeError::EmptyVocabulary));
    }

    #[test]
    fn sample_distractor_set() {
        let vocab = SlotVocabulary::from_counts(
            [
                "new_limit",
                "family_members_count",
                "review_period",
                "payment_frequency",
                "payment_amount",
            ]
            .map(|l| (l, 1)),
        );
        let gold = labels(&["payment_frequency", "payment_amount"]);
        let mut rng = SplitMix64::new(9);
        let sel = select_queried_slots(&gold, &vocab, Domain::Other, &fixed_s(3), &mut rng).unwrap();
        assert_eq!(sel.queried.len(), 5);
        let mut d = sel.distractors.clone();
        d.sort();
        assert_eq!(d, ["family_members_count", "new_limit", "review_period"]);
    }

    #[test]
    fn domain_pool_restricts_distractors() {
        let text = [
            r#"{"call_id": "b", "domain": "banking", "turns": [{"index": 0, "speaker": "agent", "audio": "a", "text": "t", "slots": {"iban": "x", "amount": "y"}}]}"#,
            r#"{"call_id": "t", "domain": "telecom", "turns": [{"index": 0, "speaker": "agent", "audio": "a", "text": "t", "slots": {"plan": "x", "sim_number": "y"}}]}"#,
        ]
        .join("\n");
        let vocab = build_vocabulary(&parse_corpus(&text).unwrap());
        let config = ForgeConfig {
            distractor_pool: DistractorPool::Domain,
            ..fixed_s(5)
        };
        let mut rng = SplitMix64::new(4);
        let sel = select_queried_slots(&labels(&["iban"]), &vocab, Domain::Banking, &config, &mut rng)
            .unwrap();
        assert_eq!(sel.distractors, ["amount"]);
        assert!(sel.shortfall);
    }

    #[test]
    fn render_query_template() {
        let t = ForgeConfig::default().template(PromptCase::WithQuery, 0);
        let s = render_prompt(&t, Some(&labels(&["payment_amount"])), None).unwrap();
        assert_eq!(
            s,
            "Find slot values for payment_amount in the current audio. Format the output as JSON."
        );
    }

    #[test]
    fn render_context_lines() {
        let t = ForgeConfig::default().template(PromptCase::WithContext, 0);
        let ctx = labels(&["Hello.", "I want to pay."]);
        let s = render_prompt(&t, None, Some(&ctx)).unwrap();
        assert_eq!(s.matches("prev:").count(), 2);
        assert!(s.contains("prev: Hello.\nprev: I want to pay.\n"));
        let empty = render_prompt(&t, None, Some(&[])).unwrap();
        assert!(empty.contains("prev: (none)"));
    }

    #[test]
    fn stray_placeholder_is_unresolved() {
        let t = PromptTemplate {
            case: PromptCase::Plain,
            text: "Find {queried_slots}.".into(),
            format_directive: "Format the output as JSON.".into(),
        };
        assert_eq!(
            render_prompt(&t, None, None),
            Err(ForgeError::UnresolvedPlaceholder("{queried_slots}".into()))
        );
        let unknown = PromptTemplate {
            text: "Find {slots}.".into(),
            ..t.clone()
        };
        assert!(render_prompt(&unknown, None, None).is_err());
    }

    #[test]
    fn braces_in_context_are_not_placeholders() {
        let t = ForgeConfig::default().template(PromptCase::WithContext, 0);
        let ctx = labels(&["my code is {queried_slots}"]);
        let s = render_prompt(&t, None, Some(&ctx)).unwrap();
        assert!(s.contains("prev: my code is {queried_slots}"));
    }

    #[test]
    fn fig3_regular_target() {
        let turn = turn_with(&[("payment_frequency", "monthly"), ("payment_amount", "€30")]);
        let queried = labels(&[
            "new_limit",
            "family_members_count",
            "review_period",
            "payment_frequency",
            "payment_amount",
        ]);
        let target = format_slot_dict(&regular_target(&turn, Some(&queried)));
        assert_eq!(
            target,
            "{'payment_frequency': 'monthly', 'payment_amount': '€30', 'new_limit': 'None', 'family_members_count': 'None', 'review_period': 'None'}"
        );
    }

    #[test]
    fn unqueried_empty_turn_targets_empty_dict() {
        let turn = turn_with(&[]);
        assert_eq!(format_slot_dict(&regular_target(&turn, None)), "{}");
    }

    #[test]
    fn forging_is_deterministic() {
        let call = call_of(5);
        let vocab = SlotVocabulary::from_counts([("a", 1), ("b", 1)]);
        let config = ForgeConfig::with_seed(42);
        for i in 0..5 {
            let a = forge_regular_example(&call, i, &config, &vocab).unwrap();
            let b = forge_regular_example(&call, i, &config, &vocab).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.mode, Mode::Regular);
            assert_eq!(a.example_id, format!("c1:{i}:regular"));
        }
    }

    #[test]
    fn out_of_range_turn() {
        let vocab = SlotVocabulary::from_counts([("a", 1)]);
        assert!(matches!(
            forge_regular_example(&call_of(2), 2, &ForgeConfig::default(), &vocab),
            Err(ForgeError::TurnOutOfRange { turn: 2, .. })
        ));
    }

    #[test]
    fn zero_weight_cases_never_appear() {
        let config = ForgeConfig {
            case_weights: CaseWeights {
                plain: 0.0,
                with_context: 0.0,
                with_query: 1.0,
                with_context_and_query: 0.0,
            },
            ..ForgeConfig::default()
        };
        let call = call_of(30);
        let vocab = SlotVocabulary::from_counts([("a", 1), ("b", 1)]);
        for i in 0..30 {
            let ex = forge_regular_example(&call, i, &config, &vocab).unwrap();
            assert_eq!(ex.meta.case, PromptCase::WithQuery);
            assert!(ex.context.is_empty());
            assert_eq!(ex.meta.context_size, None);
        }
    }

    #[test]
    fn example_serializes_to_the_dataset_schema() {
        let call = call_of(3);
        let vocab = SlotVocabulary::from_counts([("a", 1)]);
        let ex = forge_regular_example(&call, 2, &ForgeConfig::with_seed(1), &vocab).unwrap();
        let v: serde_json::Value = serde_json::to_value(&ex).unwrap();
        for key in [
            "id",
            "audio",
            "context",
            "instruction",
            "queried_slots",
            "mode",
            "control_tag",
            "target",
            "meta",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        for key in ["call_id", "turn", "T", "S", "template"] {
            assert!(v["meta"].get(key).is_some(), "missing meta.{key}");
        }
        assert_eq!(v["mode"], "regular");
        assert!(v["control_tag"].is_null());
        let back: InstructionExample = serde_json::from_value(v).unwrap();
        assert_eq!(back, ex);
    }
}
