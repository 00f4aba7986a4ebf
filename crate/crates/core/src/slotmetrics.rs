//! Partial-match slot precision, recall and F1.
//!
//! Values are compared after normalization (compatibility folding,
//! lowercasing, whitespace collapse, and trimming of symbols at token edges).
//! In containment mode a prediction matches when either normalized token
//! sequence is a contiguous run inside the other, so `€30` matches
//! `30 euros`.
//!
//! Per label, with `None` and absent both meaning "no value":
//!
//! | pred      | gold      | outcome                   |
//! |-----------|-----------|---------------------------|
//! | value     | matching  | tp                        |
//! | value     | other     | fp and fn                 |
//! | value     | none      | fp                        |
//! | none      | value     | fn                        |
//! | none      | none      | true negative (if queried)|
//!
//! Counts are summed over the dataset before P/R/F1 are computed.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::corpus::SlotMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matching {
    Exact,
    Containment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub matching: Matching,
    pub lowercase: bool,
    pub compat_fold: bool,
    pub collapse_whitespace: bool,
    pub strip_edge_symbols: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self::containment()
    }
}

impl MatchConfig {
    pub fn containment() -> Self {
        Self {
            matching: Matching::Containment,
            lowercase: true,
            compat_fold: true,
            collapse_whitespace: true,
            strip_edge_symbols: true,
        }
    }

    /// Byte equality of raw values.
    pub fn exact() -> Self {
        Self {
            matching: Matching::Exact,
            lowercase: false,
            compat_fold: false,
            collapse_whitespace: false,
            strip_edge_symbols: false,
        }
    }
}

pub fn normalize_value(s: &str, config: &MatchConfig) -> String {
    let mut v: String = if config.compat_fold {
        s.nfkc().collect()
    } else {
        s.to_string()
    };
    if config.lowercase {
        v = v.to_lowercase();
    }
    if config.strip_edge_symbols {
        // Keep the original separators unless collapsing.
        let mut out = String::with_capacity(v.len());
        let mut token = String::new();
        let flush = |token: &mut String, out: &mut String| {
            out.push_str(token.trim_matches(|c: char| !c.is_alphanumeric()));
            token.clear();
        };
        for c in v.chars() {
            if c.is_whitespace() {
                flush(&mut token, &mut out);
                out.push(c);
            } else {
                token.push(c);
            }
        }
        flush(&mut token, &mut out);
        v = out;
    }
    if config.collapse_whitespace {
        v = v.split_whitespace().collect::<Vec<_>>().join(" ");
    }
    v
}

fn contains_run(hay: &[&str], needle: &[&str]) -> bool {
    needle.len() <= hay.len() && hay.windows(needle.len()).any(|w| w == needle)
}

pub fn values_match(pred: &str, gold: &str, config: &MatchConfig) -> bool {
    let p = normalize_value(pred, config);
    let g = normalize_value(gold, config);
    match config.matching {
        Matching::Exact => p == g,
        Matching::Containment => {
            let pt: Vec<&str> = p.split_whitespace().collect();
            let gt: Vec<&str> = g.split_whitespace().collect();
            if pt.is_empty() || gt.is_empty() {
                return p == g;
            }
            contains_run(&gt, &pt) || contains_run(&pt, &gt)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotOutcome {
    Tp,
    Fp,
    Fn,
    FpAndFn,
    TrueNegative,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub per_slot: BTreeMap<String, SlotOutcome>,
    pub malformed: bool,
}

impl ExampleScore {
    fn record(&mut self, label: String, outcome: SlotOutcome) {
        match outcome {
            SlotOutcome::Tp => self.tp += 1,
            SlotOutcome::Fp => self.fp += 1,
            SlotOutcome::Fn => self.fn_ += 1,
            SlotOutcome::FpAndFn => {
                self.fp += 1;
                self.fn_ += 1;
            }
            SlotOutcome::TrueNegative => {}
        }
        self.per_slot.insert(label, outcome);
    }
}

fn present<'a>(map: &'a SlotMap, label: &str) -> Option<&'a str> {
    map.get(label)
        .map(String::as_str)
        .filter(|v| v.trim() != "None")
}

/// Scores one example. When `queried` is given only those labels count, and
/// labels absent from both sides are true negatives.
pub fn score_example(
    pred: &SlotMap,
    gold: &SlotMap,
    queried: Option<&[String]>,
    config: &MatchConfig,
) -> ExampleScore {
    let labels: BTreeSet<&str> = match queried {
        Some(q) => q.iter().map(String::as_str).collect(),
        None => pred
            .keys()
            .chain(gold.keys())
            .map(String::as_str)
            .collect(),
    };
    let mut score = ExampleScore::default();
    for label in labels {
        let outcome = match (present(pred, label), present(gold, label)) {
            (Some(p), Some(g)) if values_match(p, g, config) => SlotOutcome::Tp,
            (Some(_), Some(_)) => SlotOutcome::FpAndFn,
            (Some(_), None) => SlotOutcome::Fp,
            (None, Some(_)) => SlotOutcome::Fn,
            (None, None) if queried.is_some() => SlotOutcome::TrueNegative,
            (None, None) => continue,
        };
        score.record(label.to_string(), outcome);
    }
    score
}

/// A generation with no usable dictionary: every gold slot is missed.
pub fn score_malformed(gold: &SlotMap, queried: Option<&[String]>, config: &MatchConfig) -> ExampleScore {
    let mut score = score_example(&SlotMap::new(), gold, queried, config);
    score.malformed = true;
    score
}

pub fn harmonic_f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    /// Precision, recall and F1, with 1.0 for an all-zero tally and 0.0 for
    /// any other zero denominator.
    pub fn prf(&self) -> (f64, f64, f64) {
        let empty = self.tp == 0 && self.fp == 0 && self.fn_ == 0;
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                if empty {
                    1.0
                } else {
                    0.0
                }
            } else {
                num as f64 / den as f64
            }
        };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        (p, r, harmonic_f1(p, r))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
    pub per_slot: BTreeMap<String, SlotCounts>,
    pub n_examples: usize,
    pub n_malformed: usize,
    #[serde(default)]
    pub match_config: MatchConfig,
}

impl ScoreReport {
    /// A report carrying only headline numbers, for published results.
    pub fn from_prf(precision: f64, recall: f64, f1: f64, match_config: MatchConfig) -> Self {
        Self {
            precision,
            recall,
            f1,
            counts: Counts::default(),
            per_slot: BTreeMap::new(),
            n_examples: 0,
            n_malformed: 0,
            match_config,
        }
    }
}

/// Micro-aggregates example scores.
pub fn aggregate(scores: &[ExampleScore], match_config: MatchConfig) -> ScoreReport {
    let mut counts = Counts::default();
    let mut per_slot: BTreeMap<String, SlotCounts> = BTreeMap::new();
    for s in scores {
        counts.tp += s.tp;
        counts.fp += s.fp;
        counts.fn_ += s.fn_;
        for (label, outcome) in &s.per_slot {
            let c = per_slot.entry(label.clone()).or_default();
            match outcome {
                SlotOutcome::Tp => c.tp += 1,
                SlotOutcome::Fp => c.fp += 1,
                SlotOutcome::Fn => c.fn_ += 1,
                SlotOutcome::FpAndFn => {
                    c.fp += 1;
                    c.fn_ += 1;
                }
                SlotOutcome::TrueNegative => c.tn += 1,
            }
        }
    }
    let (precision, recall, f1) = counts.prf();
    ScoreReport {
        precision,
        recall,
        f1,
        counts,
        per_slot,
        n_examples: scores.len(),
        n_malformed: scores.iter().filter(|s| s.malformed).count(),
        match_config,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(pairs: &[(&str, &str)]) -> SlotMap {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn normalization_examples() {
        let c = MatchConfig::default();
        assert_eq!(normalize_value("€30", &c), "30");
        assert_eq!(normalize_value("  Monthly  ", &c), "monthly");
        assert_eq!(normalize_value("Patrick.", &c), "patrick");
        assert_eq!(normalize_value("ＡＢＣ  12", &c), "abc 12");
        assert_eq!(normalize_value("(555) 123-4567", &c), "555 123-4567");
        assert_eq!(normalize_value("  Monthly  ", &MatchConfig::exact()), "  Monthly  ");
    }

    #[test]
    fn containment_examples() {
        let c = MatchConfig::default();
        assert!(values_match("€30", "30 euros", &c));
        assert!(values_match("30 euros", "€30", &c));
        assert!(!values_match("monthly", "yearly", &c));
        assert!(!values_match("30 euros", "euros 30", &c));
        assert!(!values_match("€", "30", &c));
        assert!(values_match("€", "$", &c));
        assert!(!values_match("€30", "30", &MatchConfig::exact()));
        assert!(values_match("€30", "€30", &MatchConfig::exact()));
    }

    #[test]
    fn identical_maps_are_all_tp() {
        let gold = map(&[("amount", "€30"), ("freq", "monthly")]);
        let s = score_example(&gold, &gold, None, &MatchConfig::default());
        assert_eq!((s.tp, s.fp, s.fn_), (2, 0, 0));
    }

    #[test]
    fn wrong_value_is_fp_and_fn() {
        let gold = map(&[("amount", "€30"), ("freq", "monthly")]);
        let pred = map(&[("amount", "30"), ("freq", "yearly")]);
        let s = score_example(&pred, &gold, None, &MatchConfig::default());
        assert_eq!((s.tp, s.fp, s.fn_), (1, 1, 1));
        assert_eq!(s.per_slot["freq"], SlotOutcome::FpAndFn);
    }

    #[test]
    fn fig3_self_match_under_query() {
        let target = map(&[
            ("payment_frequency", "monthly"),
            ("payment_amount", "€30"),
            ("new_limit", "None"),
            ("family_members_count", "None"),
            ("review_period", "None"),
        ]);
        let gold = map(&[("payment_frequency", "monthly"), ("payment_amount", "€30")]);
        let queried: Vec<String> = target.keys().cloned().collect();
        let s = score_example(&target, &gold, Some(&queried), &MatchConfig::default());
        assert_eq!((s.tp, s.fp, s.fn_), (2, 0, 0));
        let tn = s.per_slot.values().filter(|o| **o == SlotOutcome::TrueNegative).count();
        assert_eq!(tn, 3);
    }

    #[test]
    fn unqueried_predictions_are_ignored_under_query() {
        let gold = map(&[("a", "1")]);
        let pred = map(&[("a", "1"), ("zzz", "x")]);
        let s = score_example(&pred, &gold, Some(&["a".to_string()]), &MatchConfig::default());
        assert_eq!((s.tp, s.fp, s.fn_), (1, 0, 0));
    }

    #[test]
    fn malformed_is_all_fn() {
        let gold = map(&[("a", "1"), ("b", "2")]);
        let s = score_malformed(&gold, None, &MatchConfig::default());
        assert_eq!((s.tp, s.fp, s.fn_), (0, 0, 2));
        assert!(s.malformed);
    }

    #[test]
    fn aggregate_arithmetic() {
        let s = ExampleScore {
            tp: 1,
            fp: 1,
            fn_: 1,
            ..Default::default()
        };
        let r = aggregate(&[s], MatchConfig::default());
        assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn empty_dataset_is_perfect() {
        let r = aggregate(&[], MatchConfig::default());
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let only_fn = ExampleScore {
            fn_: 2,
            ..Default::default()
        };
        let r = aggregate(&[only_fn], MatchConfig::default());
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn f1_from_published_precision_recall() {
        assert!((harmonic_f1(0.6292, 0.8726) - 0.7312).abs() <= 5e-4);
        assert!((harmonic_f1(0.6431, 0.9319) - 0.7610).abs() <= 5e-4);
        assert!((harmonic_f1(0.6308, 0.9400) - 0.7550).abs() <= 5e-4);
        assert_eq!(harmonic_f1(0.0, 0.0), 0.0);
    }

    #[test]
    fn per_slot_breakdown() {
        let gold = map(&[("a", "1"), ("b", "2")]);
        let pred = map(&[("a", "1"), ("c", "3")]);
        let s = score_example(&pred, &gold, None, &MatchConfig::default());
        let r = aggregate(&[s.clone(), s], MatchConfig::default());
        assert_eq!(r.per_slot["a"].tp, 2);
        assert_eq!(r.per_slot["b"].fn_, 2);
        assert_eq!(r.per_slot["c"].fp, 2);
    }

    #[test]
    fn report_json_keys() {
        let r = aggregate(&[], MatchConfig::default());
        let v = serde_json::to_value(&r).unwrap();
        for key in ["precision", "recall", "f1", "counts", "per_slot", "n_examples", "n_malformed"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert!(v["counts"].get("fn").is_some());
        let back: ScoreReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    fn small_map() -> impl Strategy<Value = SlotMap> {
        prop::collection::vec(
            ("[a-d]", prop::sample::select(vec!["x", "x y", "y", "None", "€30", "30"])),
            0..5,
        )
        .prop_map(|v| v.into_iter().map(|(k, v)| (k, v.to_string())).collect())
    }

    proptest! {
        #[test]
        fn self_score_has_no_errors(x in small_map(), extra in prop::collection::vec("[e-h]", 0..3)) {
            let mut queried: Vec<String> = x.keys().cloned().collect();
            queried.extend(extra);
            let c = MatchConfig::default();
            for q in [None, Some(queried.as_slice())] {
                let s = score_example(&x, &x, q, &c);
                prop_assert_eq!((s.fp, s.fn_), (0, 0));
            }
        }

        #[test]
        fn counts_rebuild_from_per_slot(pred in small_map(), gold in small_map()) {
            let s = score_example(&pred, &gold, None, &MatchConfig::default());
            let mut rebuilt = ExampleScore::default();
            for (l, o) in &s.per_slot {
                rebuilt.record(l.clone(), *o);
            }
            prop_assert_eq!((rebuilt.tp, rebuilt.fp, rebuilt.fn_), (s.tp, s.fp, s.fn_));
        }

        #[test]
        fn reflexive_match(x in "\\PC{0,20}") {
            prop_assert!(values_match(&x, &x, &MatchConfig::default()));
            prop_assert!(values_match(&x, &x, &MatchConfig::exact()));
        }

        #[test]
        fn adding_a_wrong_prediction_never_raises_precision(
            pred in small_map(), gold in small_map(), label in "[p-s]"
        ) {
            let c = MatchConfig::default();
            let before = aggregate(&[score_example(&pred, &gold, None, &c)], c);
            let mut more = pred.clone();
            if !gold.contains_key(&label) && !more.contains_key(&label) {
                more.insert(label, "wrong".into());
                let after = aggregate(&[score_example(&more, &gold, None, &c)], c);
                prop_assert!(after.precision <= before.precision);
            }
        }

        #[test]
        fn adding_a_matched_gold_slot_never_lowers_recall(
            pred in small_map(), gold in small_map(), label in "[p-s]"
        ) {
            let c = MatchConfig::default();
            let before = aggregate(&[score_example(&pred, &gold, None, &c)], c);
            if !gold.contains_key(&label) && !pred.contains_key(&label) {
                let mut g = gold.clone();
                let mut p = pred.clone();
                g.insert(label.clone(), "v".into());
                p.insert(label, "v".into());
                let after = aggregate(&[score_example(&p, &g, None, &c)], c);
                prop_assert!(after.recall >= before.recall);
            }
        }

        #[test]
        fn micro_aggregate_is_additive(
            pairs in prop::collection::vec((small_map(), small_map()), 0..6)
        ) {
            let c = MatchConfig::default();
            let scores: Vec<ExampleScore> = pairs.iter().map(|(p, g)| score_example(p, g, None, &c)).collect();
            let report = aggregate(&scores, c);
            // One big example with labels namespaced by example index.
            let prefix = |i: usize, m: &SlotMap| -> SlotMap {
                m.iter().map(|(k, v)| (format!("{i}_{k}"), v.clone())).collect()
            };
            let mut big_p = SlotMap::new();
            let mut big_g = SlotMap::new();
            for (i, (p, g)) in pairs.iter().enumerate() {
                big_p.extend(prefix(i, p));
                big_g.extend(prefix(i, g));
            }
            let concat = score_example(&big_p, &big_g, None, &c);
            prop_assert_eq!(report.counts, Counts { tp: concat.tp, fp: concat.fp, fn_: concat.fn_ });
        }
    }
}
