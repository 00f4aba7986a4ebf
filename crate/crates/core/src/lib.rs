//! Slot-filling instruction data for speech LLMs.
//!
//! The crate turns a slot-annotated conversational corpus into three kinds of
//! supervised fine-tuning data:
//!
//! - **regular** examples whose target is a flat slot dictionary,
//! - **reasoning** examples whose target wraps the same dictionary in a
//!   `<thinking>` trace followed by a `<response>` block,
//! - **hybrid** datasets mixing both, switched by `\think` / `\no_think`.
//!
//! On the evaluation side it parses raw model generations back into slot maps
//! ([`genparse`]) and scores them with partial-match precision/recall/F1
//! ([`slotmetrics`]). [`adapter`] is a 64-bit reference model of the
//! frame-stacking MLP that projects speech-encoder frames into the LLM.

pub mod adapter;
pub mod annotator;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod forge;
pub mod genparse;
pub mod io;
pub mod reasoning;
pub mod report;
pub mod rng;
pub mod slotmetrics;

pub use corpus::{Call, Domain, SlotMap, SlotVocabulary, Speaker, Turn};
pub use forge::{ForgeConfig, InstructionExample, Mode, PromptCase};
pub use genparse::{parse_generation, parse_slot_dict, ParsedGeneration, TagGrammar};
pub use slotmetrics::{MatchConfig, ScoreReport};
