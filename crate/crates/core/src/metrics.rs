//! Evaluation against reference labels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("labelings cover different records")]
    CoverageMismatch,
    #[error("label `{0}` is not among the evaluated classes")]
    UnknownLabel(String),
    #[error("nothing to evaluate")]
    Empty,
    #[error("correlation is undefined for a constant coding")]
    ConstantVector,
    #[error("neither coding has a positive")]
    BothEmpty,
    #[error("correlation test needs |r| < 1 and n > 3 (r = {r}, n = {n})")]
    DegenerateR { r: f64, n: usize },
}

/// record id → class name.
pub type Labeling = BTreeMap<String, String>;

/// Prediction placeholder for an answer that named no class. It counts as a
/// false negative for the gold class and as nothing else.
pub const UNPARSED: &str = "<unparsed>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub class: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionTable {
    pub classes: Vec<ClassCounts>,
    pub total: usize,
}

fn same_keys(a: &Labeling, b: &Labeling) -> bool {
    a.len() == b.len() && a.keys().zip(b.keys()).all(|(x, y)| x == y)
}

/// One-vs-rest counts for every class.
pub fn confusion(pred: &Labeling, gold: &Labeling, classes: &[String]) -> Result<ConfusionTable, MetricsError> {
    if !same_keys(pred, gold) {
        return Err(MetricsError::CoverageMismatch);
    }
    let mut counts: Vec<ClassCounts> = classes
        .iter()
        .map(|c| ClassCounts {
            class: c.clone(),
            tp: 0,
            fp: 0,
            fn_: 0,
            tn: 0,
        })
        .collect();
    let index = |label: &str| {
        classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| MetricsError::UnknownLabel(label.to_string()))
    };
    for (id, g) in gold {
        let p = match pred[id].as_str() {
            UNPARSED => None,
            label => Some(index(label)?),
        };
        let g = index(g)?;
        for (c, row) in counts.iter_mut().enumerate() {
            match (p == Some(c), g == c) {
                (true, true) => row.tp += 1,
                (true, false) => row.fp += 1,
                (false, true) => row.fn_ += 1,
                (false, false) => row.tn += 1,
            }
        }
    }
    Ok(ConfusionTable {
        classes: counts,
        total: gold.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// Some ratio was 0/0 and reported as 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub total: usize,
    /// Classes neither present nor predicted; left out of the macro means.
    pub excluded_from_macro: Vec<String>,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn prf1(table: &ConfusionTable) -> Result<MetricsReport, MetricsError> {
    if table.total == 0 {
        return Err(MetricsError::Empty);
    }
    let mut per_class = Vec::with_capacity(table.classes.len());
    let mut excluded = Vec::new();
    let (mut sp, mut sr, mut sf, mut counted) = (0.0, 0.0, 0.0, 0usize);
    let mut correct = 0;
    for c in &table.classes {
        let (precision, dp) = ratio(c.tp, c.tp + c.fp);
        let (recall, dr) = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        correct += c.tp;
        if c.tp + c.fp + c.fn_ == 0 {
            excluded.push(c.class.clone());
        } else {
            sp += precision;
            sr += recall;
            sf += f1;
            counted += 1;
        }
        per_class.push(ClassMetrics {
            class: c.class.clone(),
            precision,
            recall,
            f1,
            support: c.tp + c.fn_,
            degenerate: dp || dr,
        });
    }
    let mean = |s: f64| if counted == 0 { 0.0 } else { s / counted as f64 };
    Ok(MetricsReport {
        per_class,
        macro_precision: mean(sp),
        macro_recall: mean(sr),
        macro_f1: mean(sf),
        accuracy: correct as f64 / table.total as f64,
        total: table.total,
        excluded_from_macro: excluded,
    })
}

impl MetricsReport {
    /// Fixed-width table with scores in percent.
    pub fn render_table(&self) -> String {
        let width = self
            .per_class
            .iter()
            .map(|c| c.class.len())
            .chain([9])
            .max()
            .unwrap_or(9);
        let mut out = format!("{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}\n", "class", "precision", "recall", "f1", "support");
        for c in &self.per_class {
            out.push_str(&format!(
                "{:<width$}  {:>9.2}  {:>9.2}  {:>9.2}  {:>7}{}\n",
                c.class,
                c.precision * 100.0,
                c.recall * 100.0,
                c.f1 * 100.0,
                c.support,
                if c.degenerate { "  *" } else { "" }
            ));
        }
        out.push_str(&format!(
            "{:<width$}  {:>9.2}  {:>9.2}  {:>9.2}  {:>7}\n",
            "macro",
            self.macro_precision * 100.0,
            self.macro_recall * 100.0,
            self.macro_f1 * 100.0,
            self.total
        ));
        out.push_str(&format!("accuracy {:.2}%\n", self.accuracy * 100.0));
        if !self.excluded_from_macro.is_empty() {
            out.push_str(&format!("excluded from macro: {}\n", self.excluded_from_macro.join(", ")));
        }
        out
    }
}

/// record id → 0/1 for one class of interest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCoding {
    pub positive_class: String,
    pub codes: BTreeMap<String, u8>,
}

impl BinaryCoding {
    pub fn from_labeling(labeling: &Labeling, positive_class: &str) -> Self {
        Self {
            positive_class: positive_class.to_string(),
            codes: labeling
                .iter()
                .map(|(id, l)| (id.clone(), u8::from(l == positive_class)))
                .collect(),
        }
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        Self {
            positive_class: "1".into(),
            codes: bits.iter().enumerate().map(|(i, &b)| (format!("{i:06}"), b.min(1))).collect(),
        }
    }

    fn paired<'a>(&'a self, other: &'a Self) -> Result<impl Iterator<Item = (f64, f64)> + 'a, MetricsError> {
        if self.codes.len() != other.codes.len() || self.codes.keys().zip(other.codes.keys()).any(|(a, b)| a != b) {
            return Err(MetricsError::CoverageMismatch);
        }
        Ok(self
            .codes
            .values()
            .zip(other.codes.values())
            .map(|(&a, &b)| (a as f64, b as f64)))
    }
}

/// Sample Pearson correlation.
pub fn pearson(x: &BinaryCoding, y: &BinaryCoding) -> Result<f64, MetricsError> {
    let pairs: Vec<(f64, f64)> = x.paired(y)?.collect();
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in &pairs {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::ConstantVector);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Intersection over union of the positive sets.
pub fn jaccard(x: &BinaryCoding, y: &BinaryCoding) -> Result<f64, MetricsError> {
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in x.paired(y)? {
        if a > 0.0 && b > 0.0 {
            inter += 1;
        }
        if a > 0.0 || b > 0.0 {
            union += 1;
        }
    }
    if union == 0 {
        return Err(MetricsError::BothEmpty);
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTest {
    pub z: f64,
    pub p_value: f64,
}

/// Two-sided Fisher z test for the difference of two independent correlations.
pub fn correlation_delta_test(r1: f64, n1: usize, r2: f64, n2: usize) -> Result<CorrelationTest, MetricsError> {
    for (r, n) in [(r1, n1), (r2, n2)] {
        if !(r.abs() < 1.0) || n <= 3 {
            return Err(MetricsError::DegenerateR { r, n });
        }
    }
    let se = (1.0 / (n1 - 3) as f64 + 1.0 / (n2 - 3) as f64).sqrt();
    let z = (r1.atanh() - r2.atanh()) / se;
    let p_value = statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2);
    Ok(CorrelationTest {
        z,
        p_value: p_value.min(1.0),
    })
}

/// Share of records on which two labelings agree.
pub fn agreement_rate(a: &Labeling, b: &Labeling) -> Result<f64, MetricsError> {
    if !same_keys(a, b) {
        return Err(MetricsError::CoverageMismatch);
    }
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    let same = a.iter().filter(|(id, l)| &b[*id] == *l).count();
    Ok(same as f64 / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labeling(labels: &[&str]) -> Labeling {
        labels
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("r{i}"), l.to_string()))
            .collect()
    }

    fn classes(c: &[&str]) -> Vec<String> {
        c.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn four_record_fixture() {
        let t = confusion(
            &labeling(&["P", "P", "P", "P"]),
            &labeling(&["P", "P", "N", "N"]),
            &classes(&["P", "N"]),
        )
        .unwrap();
        assert_eq!(
            t.classes[0],
            ClassCounts {
                class: "P".into(),
                tp: 2,
                fp: 2,
                fn_: 0,
                tn: 0
            }
        );
        let r = prf1(&t).unwrap();
        assert_eq!(r.per_class[0].precision, 0.5);
        assert_eq!(r.per_class[0].recall, 1.0);
        assert!((r.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(r.per_class[1].degenerate);
        assert!(r.excluded_from_macro.is_empty());
    }

    #[test]
    fn perfect_and_coverage() {
        let g = labeling(&["a", "b", "a"]);
        let r = prf1(&confusion(&g, &g, &classes(&["a", "b", "c"])).unwrap()).unwrap();
        assert_eq!((r.accuracy, r.macro_f1, r.macro_precision, r.macro_recall), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(r.excluded_from_macro, vec!["c"]);
        assert!(r.per_class[2].degenerate);
        let mut other = g.clone();
        other.remove("r0");
        other.insert("zz".into(), "a".into());
        assert_eq!(
            confusion(&other, &g, &classes(&["a", "b"])),
            Err(MetricsError::CoverageMismatch)
        );
        assert!(r.render_table().contains("excluded from macro: c"));
    }

    #[test]
    fn unparsed_prediction_is_a_miss() {
        let t = confusion(
            &labeling(&["a", UNPARSED, "b"]),
            &labeling(&["a", "b", "b"]),
            &classes(&["a", "b"]),
        )
        .unwrap();
        assert_eq!((t.classes[1].tp, t.classes[1].fp, t.classes[1].fn_, t.classes[1].tn), (1, 0, 1, 1));
        assert_eq!((t.classes[0].tp, t.classes[0].fp, t.classes[0].fn_, t.classes[0].tn), (1, 0, 0, 2));
        assert!((prf1(&t).unwrap().accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert!(confusion(&labeling(&["a"]), &labeling(&[UNPARSED]), &classes(&["a"])).is_err());
    }

    #[test]
    fn pearson_and_jaccard_examples() {
        let x = BinaryCoding::from_bits(&[1, 1, 0, 0]);
        let y = BinaryCoding::from_bits(&[1, 0, 1, 0]);
        assert_eq!(pearson(&x, &x).unwrap(), 1.0);
        assert!(pearson(&x, &y).unwrap().abs() < 1e-15);
        assert_eq!(pearson(&x, &BinaryCoding::from_bits(&[0, 0, 1, 1])).unwrap(), -1.0);
        assert_eq!(
            pearson(&x, &BinaryCoding::from_bits(&[1, 1, 1, 1])),
            Err(MetricsError::ConstantVector)
        );
        let a = BinaryCoding::from_bits(&[0, 1, 1, 0]);
        let b = BinaryCoding::from_bits(&[0, 0, 1, 1]);
        assert!((jaccard(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&x, &BinaryCoding::from_bits(&[0, 0, 1, 1])).unwrap(), 0.0);
        let zero = BinaryCoding::from_bits(&[0, 0, 0, 0]);
        assert_eq!(jaccard(&zero, &zero), Err(MetricsError::BothEmpty));
    }

    #[test]
    fn fisher_z() {
        assert_eq!(correlation_delta_test(0.3, 50, 0.3, 80).unwrap().p_value, 1.0);
        let t = correlation_delta_test(0.38, 3660, 0.14, 3660).unwrap();
        assert!(t.p_value < 0.05);
        assert!(correlation_delta_test(0.5, 4, 0.1, 4).unwrap().p_value > 0.5);
        assert!(matches!(
            correlation_delta_test(1.0, 10, 0.1, 10),
            Err(MetricsError::DegenerateR { .. })
        ));
        assert!(correlation_delta_test(0.1, 3, 0.1, 10).is_err());
    }

    fn bits(n: usize) -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..2, n)
    }

    proptest! {
        #[test]
        fn prf1_consistency(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40)) {
            let cls = classes(&["a", "b", "c", "d"]);
            let pred: Labeling = pairs.iter().enumerate().map(|(i, p)| (format!("{i:03}"), cls[p.0].clone())).collect();
            let gold: Labeling = pairs.iter().enumerate().map(|(i, p)| (format!("{i:03}"), cls[p.1].clone())).collect();
            let t = confusion(&pred, &gold, &cls).unwrap();
            for c in &t.classes {
                prop_assert_eq!(c.tp + c.fp + c.fn_ + c.tn, t.total);
            }
            let r = prf1(&t).unwrap();
            let tp: usize = t.classes.iter().map(|c| c.tp).sum();
            prop_assert_eq!(r.accuracy, tp as f64 / t.total as f64);
            prop_assert_eq!(r.accuracy, agreement_rate(&pred, &gold).unwrap());
            for m in &r.per_class {
                if m.precision > 0.0 && m.recall > 0.0 {
                    prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-12);
                    prop_assert!(m.f1 >= m.precision.min(m.recall) - 1e-12);
                }
            }
        }

        #[test]
        fn pearson_symmetry_and_flip((x, y) in (2usize..30).prop_flat_map(|n| (bits(n), bits(n)))) {
            let (cx, cy) = (BinaryCoding::from_bits(&x), BinaryCoding::from_bits(&y));
            let flipped: Vec<u8> = y.iter().map(|b| 1 - b).collect();
            let cf = BinaryCoding::from_bits(&flipped);
            match (pearson(&cx, &cy), pearson(&cy, &cx), pearson(&cx, &cf)) {
                (Ok(a), Ok(b), Ok(c)) => {
                    prop_assert!((a - b).abs() < 1e-12);
                    prop_assert!((a + c).abs() < 1e-12);
                    prop_assert!((-1.0..=1.0).contains(&a));
                }
                (Err(e), _, _) => prop_assert_eq!(e, MetricsError::ConstantVector),
                _ => prop_assert!(false, "asymmetric failure"),
            }
        }

        #[test]
        fn jaccard_bounds_and_monotone(
            (x, y) in (2usize..30).prop_flat_map(|n| (bits(n), bits(n))),
            extra in 0usize..30,
        ) {
            let (cx, cy) = (BinaryCoding::from_bits(&x), BinaryCoding::from_bits(&y));
            if let Ok(j) = jaccard(&cx, &cy) {
                prop_assert!((0.0..=1.0).contains(&j));
                let i = extra % x.len();
                let (mut x2, mut y2) = (x.clone(), y.clone());
                x2[i] = 1;
                y2[i] = 1;
                let j2 = jaccard(&BinaryCoding::from_bits(&x2), &BinaryCoding::from_bits(&y2)).unwrap();
                prop_assert!(j2 >= j - 1e-15);
            }
        }
    }
}
