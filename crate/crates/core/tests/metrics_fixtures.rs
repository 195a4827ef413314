//! Replays hand-computed tables for small labelings.

use labelkit_core::metrics::{confusion, jaccard, pearson, prf1, BinaryCoding, Labeling};
use serde::Deserialize;

#[derive(Deserialize)]
struct Tables {
    classification: Vec<Classification>,
    binary: Vec<Binary>,
}

#[derive(Deserialize)]
struct Classification {
    name: String,
    classes: Vec<String>,
    gold: Vec<String>,
    pred: Vec<String>,
    /// Per class: tp, fp, fn, tn.
    counts: Vec<[usize; 4]>,
    precision: Vec<f64>,
    recall: Vec<f64>,
    f1: Vec<f64>,
    degenerate: Vec<bool>,
    macro_precision: f64,
    macro_recall: f64,
    macro_f1: f64,
    accuracy: f64,
    excluded: Vec<String>,
}

#[derive(Deserialize)]
struct Binary {
    x: Vec<u8>,
    y: Vec<u8>,
    pearson: f64,
    jaccard: f64,
}

fn tables() -> Tables {
    serde_json::from_str(include_str!("fixtures/metrics_tables.json")).unwrap()
}

fn labeling(labels: &[String]) -> Labeling {
    labels.iter().enumerate().map(|(i, l)| (format!("r{i}"), l.clone())).collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

#[test]
fn classification_tables() {
    for case in tables().classification {
        assert!(case.gold.len() <= 6, "{}", case.name);
        let t = confusion(&labeling(&case.pred), &labeling(&case.gold), &case.classes).unwrap();
        let counts: Vec<[usize; 4]> = t.classes.iter().map(|c| [c.tp, c.fp, c.fn_, c.tn]).collect();
        assert_eq!(counts, case.counts, "{}", case.name);
        let r = prf1(&t).unwrap();
        for (i, m) in r.per_class.iter().enumerate() {
            assert!(close(m.precision, case.precision[i]), "{} precision {i}", case.name);
            assert!(close(m.recall, case.recall[i]), "{} recall {i}", case.name);
            assert!(close(m.f1, case.f1[i]), "{} f1 {i}", case.name);
            assert_eq!(m.degenerate, case.degenerate[i], "{} degenerate {i}", case.name);
        }
        assert!(close(r.macro_precision, case.macro_precision), "{}", case.name);
        assert!(close(r.macro_recall, case.macro_recall), "{}", case.name);
        assert!(close(r.macro_f1, case.macro_f1), "{}", case.name);
        assert!(close(r.accuracy, case.accuracy), "{}", case.name);
        assert_eq!(r.excluded_from_macro, case.excluded, "{}", case.name);
    }
}

#[test]
fn binary_tables() {
    for case in tables().binary {
        let (x, y) = (BinaryCoding::from_bits(&case.x), BinaryCoding::from_bits(&case.y));
        assert!(close(pearson(&x, &y).unwrap(), case.pearson), "{:?} {:?}", case.x, case.y);
        assert!(close(jaccard(&x, &y).unwrap(), case.jaccard), "{:?} {:?}", case.x, case.y);
    }
}
