//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::path::Path;

use indexmap::IndexMap;
use slotcot::corpus::{serialize_corpus, Call, Domain, Speaker, Turn};
use slotcot::rng::SplitMix64;

/// Label pools per domain, with value banks. Some values carry quotes and
/// non-ASCII symbols so the round trip exercises escaping.
const LABELS: &[(Domain, &[(&str, &[&str])])] = &[
    (
        Domain::Banking,
        &[
            ("payment_amount", &["€30", "$1,250.00", "£7.50", "300 dollars"]),
            ("payment_frequency", &["monthly", "every two weeks", "yearly"]),
            ("new_limit", &["5000", "€2,000", "ten thousand"]),
            ("account_type", &["savings", "checking", "joint account"]),
            ("card_last_digits", &["4421", "0097", "1865"]),
            ("due_date", &["the 15th", "next Friday", "March 3rd"]),
            ("branch_name", &["Elm Street", "Downtown", "O'Hare Plaza"]),
        ],
    ),
    (
        Domain::Telecom,
        &[
            ("plan_name", &["Unlimited Plus", "Basic 5GB", "Family Share"]),
            ("phone_number", &["(555) 123-4567", "555 0199", "+44 20 7946 0958"]),
            ("device_model", &["Pixel 8", "iPhone 15", "Galaxy S24"]),
            ("data_allowance", &["20 GB", "unlimited", "500 MB"]),
            ("contract_length", &["24 months", "one year", "no contract"]),
            ("outage_area", &["north side", "zip 94110", "the harbor"]),
        ],
    ),
    (
        Domain::Insurance,
        &[
            ("policy_number", &["PN-88213", "ZX 4410 2", "A-7"]),
            ("claim_type", &["water damage", "collision", "theft"]),
            ("deductible", &["$500", "1000 euros", "zero"]),
            ("incident_date", &["last Tuesday", "June 2nd", "yesterday"]),
            ("vehicle_make", &["Toyota", "Ford", "Škoda"]),
            ("coverage_level", &["comprehensive", "third party", "premium"]),
        ],
    ),
    (
        Domain::Retail,
        &[
            ("order_number", &["#55102", "ORD-19-XK", "77340"]),
            ("product_name", &["the \"Comfy\" sofa", "running shoes", "a 4K monitor"]),
            ("delivery_address", &["12 Baker St", "Rue de l'Église 4", "PO Box 90"]),
            ("refund_amount", &["€45.99", "$12", "half the price"]),
            ("size", &["XL", "size 9", "medium"]),
            ("color", &["navy blue", "red", "off-white"]),
            ("store_location", &["Main Mall", "airport shop", "online"]),
        ],
    ),
];

const FILLER: &[&str] = &[
    "Thanks for holding, how can I help you today?",
    "Could you repeat that please?",
    "Sure, one moment while I check.",
    "Okay, that sounds good.",
    "Is there anything else I can do for you?",
    "Hmm, let me think about that.",
];

/// A deterministic corpus of `n_calls` calls with `turns_per_call` turns.
/// Roughly a third of turns carry no slots.
pub fn synthetic_corpus(n_calls: usize, turns_per_call: usize, seed: u64) -> Vec<Call> {
    let mut rng = SplitMix64::new(seed);
    (0..n_calls)
        .map(|c| {
            let (domain, labels) = LABELS[rng.below(LABELS.len())];
            let call_id = format!("call{c:05}");
            let turns = (0..turns_per_call)
                .map(|t| {
                    let speaker = if t % 2 == 0 { Speaker::Agent } else { Speaker::Customer };
                    let n_slots = match rng.below(6) {
                        0 | 1 => 0,
                        2 | 3 => 1,
                        4 => 2,
                        _ => 3,
                    };
                    let mut picks: Vec<usize> = (0..labels.len()).collect();
                    rng.shuffle(&mut picks);
                    let mut slots = IndexMap::new();
                    let mut parts = Vec::new();
                    for &i in picks.iter().take(n_slots) {
                        let (label, values) = labels[i];
                        let value = values[rng.below(values.len())];
                        slots.insert(label.to_string(), value.to_string());
                        parts.push(format!("the {} is {value}", label.replace('_', " ")));
                    }
                    let transcript = if parts.is_empty() {
                        FILLER[rng.below(FILLER.len())].to_string()
                    } else {
                        format!("Yes, {}.", parts.join(" and "))
                    };
                    Turn {
                        index: t,
                        speaker,
                        audio_ref: format!("clips/{call_id}_t{t}.wav"),
                        transcript,
                        slots,
                        meta: Default::default(),
                    }
                })
                .collect();
            Call {
                call_id,
                domain,
                turns,
                meta: Default::default(),
            }
        })
        .collect()
}

pub fn write_corpus(path: &Path, calls: &[Call]) {
    std::fs::write(path, serialize_corpus(calls)).unwrap();
}

/// One comparison row from a published results table:
/// `(system, base P/R/F1, new P/R/F1, printed ΔF1)`.
pub type PublishedRow = (&'static str, [f64; 3], [f64; 3], f64);

/// Reasoning fine-tuning versus regular fine-tuning, per foundation model.
pub const REASONING_VS_REGULAR: [PublishedRow; 7] = [
    ("Llama 3.1 8B Instruct", [0.6292, 0.8726, 0.7312], [0.6431, 0.9319, 0.7610], 4.08),
    ("Llama 3.1 8B Base", [0.5596, 0.9073, 0.6923], [0.6691, 0.9168, 0.7736], 11.74),
    ("Llama 3.2 1B Instruct", [0.5571, 0.8541, 0.6743], [0.5580, 0.9156, 0.6934], 2.83),
    ("Deepseek R1 Distill Llama 3.1 8B", [0.4296, 0.8257, 0.5652], [0.5616, 0.9065, 0.6936], 22.72),
    ("Phi4-mini reasoning 3.68B", [0.5359, 0.8685, 0.6628], [0.4957, 0.8431, 0.6243], -5.81),
    ("Qwen3 4B", [0.6308, 0.9400, 0.7550], [0.4979, 0.8717, 0.6338], -16.05),
    ("Qwen3 0.6B", [0.5176, 0.8633, 0.6472], [0.4889, 0.7935, 0.6050], -6.52),
];

/// Hybrid fine-tuning versus the single-mode run of the same model.
pub const HYBRID_VS_SINGLE: [PublishedRow; 4] = [
    ("Qwen3 0.6B regular", [0.5176, 0.8633, 0.6472], [0.5600, 0.8721, 0.6821], 5.39),
    ("Qwen3 0.6B reasoning", [0.4889, 0.7935, 0.6050], [0.5797, 0.8700, 0.6958], 15.01),
    ("Qwen3 4B regular", [0.6308, 0.9400, 0.7550], [0.6821, 0.9340, 0.7884], 4.42),
    ("Qwen3 4B reasoning", [0.4979, 0.8717, 0.6338], [0.6958, 0.9377, 0.7988], 26.03),
];

pub const SAMPLE_TRANSCRIPT: &str = "Ok, thanks again for calling today, \"Patrick\". And you are paying a month- you have a monthly payment set up for €30 a month. Is that correct?";

/// Reasoning-format sample: the generation a reasoning model is trained to
/// produce for [`sample_turn`], in the backslash closing-tag orthography.
pub const SAMPLE_REASONING: &str = "<thinking>\nI hear the utterance in the audio clip is \n``` Ok, thanks again for calling today, \"Patrick\". And you are paying a month- you have a monthly payment set up for €30 a month. Is that correct? ```\nI see that the information bearing mentions in the utterance are monthly | €30.\nThe labels queried for are payment_frequency, payment_amount, new_limit, family_members_count, review_period\nBased on the semantics of payment_frequency, payment_amount slots, the mentions in the utterance can be assigned to them. The others are all 'None'\n<\\thinking>\n <response>\n{'payment_frequency': 'monthly', 'payment_amount': '€30', 'new_limit': 'None', 'family_members_count': 'None', 'review_period': 'None'}\n <\\response><\\eos>";

pub const SAMPLE_TARGET: &str = "{'payment_frequency': 'monthly', 'payment_amount': '€30', 'new_limit': 'None', 'family_members_count': 'None', 'review_period': 'None'}";

pub fn sample_turn() -> Turn {
    let mut slots = IndexMap::new();
    slots.insert("payment_frequency".to_string(), "monthly".to_string());
    slots.insert("payment_amount".to_string(), "€30".to_string());
    Turn {
        index: 0,
        speaker: Speaker::Agent,
        audio_ref: "clips/sample_t0.wav".into(),
        transcript: SAMPLE_TRANSCRIPT.into(),
        slots,
        meta: Default::default(),
    }
}

/// Queried labels in an arbitrary (shuffled) order.
pub fn sample_queried() -> Vec<String> {
    ["new_limit", "family_members_count", "review_period", "payment_frequency", "payment_amount"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}
