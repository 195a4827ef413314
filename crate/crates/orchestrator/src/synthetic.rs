//! Synthetic corpora with known truth, and scripted mock providers that
//! answer from it.
//!
//! Every generated text ends in a `(truth: <class>)` marker. The marker is
//! what the mock scripts read; the topical vocabulary before it is what the
//! mock embedder clusters on. Gold labels can be corrupted independently of
//! the marker to simulate annotation noise in a reference set.

use std::collections::BTreeMap;

use labelkit_core::gateway::{MockRule, MockScript};
use labelkit_core::store::{Corpus, LabelSchema, StoreError, TextRecord};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain (coarse) annotation prompt.
pub const QUERY_PATTERN: &str = r"(?s)### Query\nText: [^\n]*\(truth: (\w+)\)";
/// Chain-of-thought annotation prompt.
pub const COT_PATTERN: &str = r"(?s)### Query\nText: [^\n]*\(truth: (\w+)\).*Let.s think step by step";
/// Judge prompt.
pub const JUDGE_PATTERN: &str = r"(?s)^You are given 2 responses.*### Query\nText: [^\n]*\(truth: (\w+)\)";
pub const RATIONALE_PATTERN: &str = r"(?s)### Rationale request.*Human label: (\w+)";
pub const RULE_PATTERN: &str = r"(?s)### Rule summary.*?\nClass: (\w+)";

const FILLER: [&str; 8] = ["the", "report", "said", "today", "new", "people", "week", "city"];

fn vocabulary(class: &str) -> Vec<String> {
    let words: &[&str] = match class {
        "politics" => &[
            "senate", "election", "vote", "governor", "campaign", "policy", "congress", "ballot", "minister",
            "parliament", "coalition", "referendum",
        ],
        "business" => &[
            "market", "shares", "profit", "merger", "revenue", "investor", "quarterly", "retail", "earnings",
            "startup", "dividend", "acquisition",
        ],
        "technology" => &[
            "software", "chip", "network", "algorithm", "device", "cloud", "robot", "processor", "app", "encryption",
            "satellite", "browser",
        ],
        "positive" => &[
            "great", "wonderful", "love", "delighted", "excellent", "happy", "brilliant", "thrilled", "superb",
            "enjoy", "grateful", "proud",
        ],
        "negative" => &[
            "awful", "terrible", "hate", "angry", "disappointed", "worst", "sad", "furious", "poor", "broken",
            "regret", "failure",
        ],
        _ => return (0..12).map(|j| format!("{class}w{j}")).collect(),
    };
    words.iter().map(|w| w.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub classes: Vec<String>,
    pub seed: u64,
    /// Share of records whose gold label is replaced by a wrong class.
    pub gold_noise: f64,
    pub task_name: String,
}

impl SyntheticSpec {
    pub fn new(n: usize, classes: &[&str], seed: u64) -> Self {
        Self {
            n,
            classes: classes.iter().map(|c| c.to_string()).collect(),
            seed,
            gold_noise: 0.0,
            task_name: "synthetic".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// The class in each record's marker.
    pub truth: BTreeMap<String, String>,
    /// Records whose gold label differs from the truth.
    pub corrupted: Vec<String>,
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus, StoreError> {
    let classes: Vec<&str> = spec.classes.iter().map(String::as_str).collect();
    let schema = LabelSchema::new(spec.task_name.clone(), &classes)?;
    let vocab: Vec<Vec<String>> = spec.classes.iter().map(|c| vocabulary(c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.n);
    let mut truth = BTreeMap::new();
    let mut corrupted = Vec::new();
    for i in 0..spec.n {
        let c = i % classes.len();
        let mut words: Vec<&str> = vocab[c].choose_multiple(&mut rng, 6).map(String::as_str).collect();
        words.extend(FILLER.choose_multiple(&mut rng, 3));
        words.shuffle(&mut rng);
        let id = format!("s{i:04}");
        let text = format!("{} (truth: {})", words.join(" "), classes[c]);
        let mut gold = classes[c];
        if classes.len() > 1 && rng.gen::<f64>() < spec.gold_noise {
            let shift = rng.gen_range(1..classes.len());
            gold = classes[(c + shift) % classes.len()];
            corrupted.push(id.clone());
        }
        truth.insert(id.clone(), classes[c].to_string());
        records.push(TextRecord::new(id, text).with_gold(gold));
    }
    Ok(SyntheticCorpus {
        corpus: Corpus::new(schema, records)?,
        truth,
        corrupted,
    })
}

fn generator_rules() -> Vec<MockRule> {
    vec![
        MockRule::new(
            RATIONALE_PATTERN,
            "The vocabulary of the text is typical of $1 coverage, which matches the human label.",
        ),
        MockRule::new(
            RULE_PATTERN,
            "Choose <$1> when the text uses vocabulary typical of $1 coverage.",
        ),
    ]
}

/// An annotator that answers correctly except at `error_rate`, where it
/// names a different class. Plain and chain-of-thought errors are drawn
/// independently.
pub fn annotator_script(classes: &[String], error_rate: f64) -> MockScript {
    let mut rules = vec![
        MockRule::new(
            COT_PATTERN,
            "The text mostly uses {label} vocabulary and the rules for {label} apply. \
             Therefore, the correct answer is <{label}>.",
        )
        .with_noise(error_rate, classes.to_vec()),
        MockRule::new(QUERY_PATTERN, "<{label}>").with_noise(error_rate, classes.to_vec()),
    ];
    rules.extend(generator_rules());
    MockScript {
        rules,
        ..Default::default()
    }
}

/// A judge that names the true class except at `error_rate`. It also
/// answers rationale and rule requests so it can serve as the generator.
pub fn judge_script(classes: &[String], error_rate: f64) -> MockScript {
    let mut rules = vec![MockRule::new(
        JUDGE_PATTERN,
        "Comparing both responses with the labeling rules, the text is about {label}. \
         Therefore, the correct answer is <{label}>.",
    )
    .with_noise(error_rate, classes.to_vec())];
    rules.extend(generator_rules());
    MockScript {
        rules,
        ..Default::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use labelkit_core::gateway::MockChat;

    #[test]
    fn deterministic_with_requested_noise() {
        let mut spec = SyntheticSpec::new(1000, &["politics", "business", "technology"], 3);
        spec.gold_noise = 0.1;
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.corpus.to_jsonl(), b.corpus.to_jsonl());
        let share = a.corrupted.len() as f64 / 1000.0;
        assert!((0.07..0.13).contains(&share), "{share}");
        for r in a.corpus.records() {
            let corrupted = a.corrupted.contains(&r.record_id);
            assert_eq!(r.gold_label.as_ref() != Some(&a.truth[&r.record_id]), corrupted);
            assert!(r.text.ends_with(&format!("(truth: {})", a.truth[&r.record_id])));
        }
    }

    #[test]
    fn scripts_read_the_marker() {
        let classes: Vec<String> = vec!["positive".into(), "negative".into()];
        let chat = MockChat::new(0, annotator_script(&classes, 0.0)).unwrap();
        let q = "Task\n\n### Query\nText: awful day (truth: negative)\n\nPlease choose";
        assert_eq!(chat.respond(q).unwrap(), "<negative>");
        let cot = format!("{q}\nLet's think step by step.");
        assert!(chat.respond(&cot).unwrap().ends_with("<negative>."));
        let rule = chat
            .respond("### Rule summary\nWhich?\n\nClass: positive\nObservations")
            .unwrap();
        assert_eq!(rule, "Choose <positive> when the text uses vocabulary typical of positive coverage.");
    }
}
