use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::corpus::GroundTruth;
use super::EvalError;
use crate::idmodel::NormalizedIdentity;
use crate::linkage::{dedup_candidates, BlockingSpec, LinkageResult};

/// Predicted equivalence classes as recordId → cluster label. Records
/// absent from the map count as singletons.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction(pub BTreeMap<String, String>);

fn find(parent: &mut HashMap<String, String>, x: &str) -> String {
    let mut root = x.to_string();
    while let Some(p) = parent.get(&root).filter(|p| **p != root) {
        root = p.clone();
    }
    // Path compression.
    let mut cur = x.to_string();
    while cur != root {
        let next = parent.insert(cur, root.clone()).expect("on path");
        cur = next;
    }
    root
}

impl Prediction {
    pub fn from_clusters<I, C, S>(clusters: I) -> Self
    where
        I: IntoIterator<Item = C>,
        C: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut map = BTreeMap::new();
        for (i, c) in clusters.into_iter().enumerate() {
            for id in c {
                map.insert(id.into(), format!("C{i}"));
            }
        }
        Prediction(map)
    }

    /// Transitive closure of linked pairs.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut parent: HashMap<String, String> = HashMap::new();
        for (a, b) in pairs {
            parent.entry(a.to_string()).or_insert_with(|| a.to_string());
            parent.entry(b.to_string()).or_insert_with(|| b.to_string());
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
                parent.insert(hi, lo);
            }
        }
        let ids: Vec<String> = parent.keys().cloned().collect();
        Prediction(ids.into_iter().map(|id| {
            let r = find(&mut parent, &id);
            (id, r)
        }).collect())
    }

    /// Clusters of record indexes, as returned by [`crate::linkage::dedupe`].
    pub fn from_index_clusters(records: &[NormalizedIdentity], clusters: &[Vec<usize>]) -> Self {
        Self::from_clusters(clusters.iter().map(|c| c.iter().map(|&i| records[i].source_record_id.clone())))
    }

    /// MATCH pairs of a two-dataset linkage.
    pub fn from_linkage(result: &LinkageResult) -> Self {
        Self::from_pairs(result.matches.iter().map(|p| (p.a_id.as_str(), p.b_id.as_str())))
    }

    /// The truth itself, as a prediction.
    pub fn from_truth(truth: &GroundTruth) -> Self {
        Prediction(truth.0.clone())
    }

    pub fn with_pair(&self, a: &str, b: &str) -> Self {
        let mut pairs: Vec<(String, String)> = self.0.iter().map(|(r, c)| (r.clone(), format!("\u{0}{c}"))).collect();
        pairs.push((a.to_string(), b.to_string()));
        Prediction::from_pairs(pairs.iter().map(|(x, y)| (x.as_str(), y.as_str())))
            .0
            .into_iter()
            .filter(|(r, _)| !r.starts_with('\u{0}'))
            .collect::<BTreeMap<_, _>>()
            .into()
    }

    fn label<'a>(&'a self, id: &'a str) -> &'a str {
        self.0.get(id).map_or(id, String::as_str)
    }
}

impl From<BTreeMap<String, String>> for Prediction {
    fn from(m: BTreeMap<String, String>) -> Self {
        Prediction(m)
    }
}

/// Candidate pairs the linkage actually considered; the denominator for
/// specificity.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CandidateUniverse {
    pub pairs: BTreeSet<(String, String)>,
}

impl CandidateUniverse {
    pub fn from_blocking(records: &[NormalizedIdentity], blocking: &[BlockingSpec]) -> Self {
        let pairs = dedup_candidates(records, blocking)
            .into_iter()
            .map(|(i, j)| ordered(&records[i].source_record_id, &records[j].source_record_id))
            .collect();
        CandidateUniverse { pairs }
    }
}

fn ordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LinkageReport {
    pub records: usize,
    pub true_pairs: u64,
    pub predicted_pairs: u64,
    pub true_positive_pairs: u64,
    /// Predicted same, truly different.
    pub homonym_errors: u64,
    /// Truly same, predicted different.
    pub synonym_errors: u64,
    pub homonym_rate: f64,
    pub synonym_rate: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub recall: f64,
    /// Truly-different pairs in the specificity denominator.
    pub negative_pairs: u64,
    /// `"blocked"` or `"all"`.
    pub specificity_universe: String,
    /// Share of true pairs inside the blocked universe.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_coverage: Option<f64>,
}

fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

fn choose2(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

impl LinkageReport {
    fn build(records: usize, true_pairs: u64, predicted: u64, tp: u64, negatives: u64, false_pos: u64) -> Self {
        LinkageReport {
            records,
            true_pairs,
            predicted_pairs: predicted,
            true_positive_pairs: tp,
            homonym_errors: predicted - tp,
            synonym_errors: true_pairs - tp,
            homonym_rate: ratio(predicted - tp, predicted, 0.0),
            synonym_rate: ratio(true_pairs - tp, true_pairs, 0.0),
            sensitivity: ratio(tp, true_pairs, 1.0),
            specificity: 1.0 - ratio(false_pos, negatives, 0.0),
            precision: ratio(tp, predicted, 1.0),
            recall: ratio(tp, true_pairs, 1.0),
            negative_pairs: negatives,
            specificity_universe: "all".into(),
            block_coverage: None,
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let rows: [(&str, String); 12] = [
            ("records", self.records.to_string()),
            ("true pairs", self.true_pairs.to_string()),
            ("predicted pairs", self.predicted_pairs.to_string()),
            ("homonym errors", self.homonym_errors.to_string()),
            ("synonym errors", self.synonym_errors.to_string()),
            ("homonym rate", format!("{:.4}%", 100.0 * self.homonym_rate)),
            ("synonym rate", format!("{:.4}%", 100.0 * self.synonym_rate)),
            ("sensitivity", format!("{:.4}", self.sensitivity)),
            ("specificity", format!("{:.6} ({} universe)", self.specificity, self.specificity_universe)),
            ("precision", format!("{:.4}", self.precision)),
            ("recall", format!("{:.4}", self.recall)),
            ("block coverage", self.block_coverage.map_or("-".into(), |c| format!("{c:.4}"))),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<18}{v}");
        }
        s
    }
}

fn check(prediction: &Prediction, truth: &GroundTruth) -> Result<(), EvalError> {
    match prediction.0.keys().find(|r| truth.entity(r).is_none()) {
        Some(r) => Err(EvalError::UnknownRecord(r.clone())),
        None => Ok(()),
    }
}

/// Pairwise comparison of predicted clusters with the truth over every
/// record in the truth. With a universe, specificity counts only the
/// candidate pairs.
pub fn evaluate(
    prediction: &Prediction,
    truth: &GroundTruth,
    universe: Option<&CandidateUniverse>,
) -> Result<LinkageReport, EvalError> {
    check(prediction, truth)?;
    let mut by_entity: HashMap<&str, u64> = HashMap::new();
    let mut by_pred: HashMap<&str, u64> = HashMap::new();
    let mut by_both: HashMap<(&str, &str), u64> = HashMap::new();
    for (r, e) in &truth.0 {
        let p = prediction.label(r);
        *by_entity.entry(e).or_default() += 1;
        *by_pred.entry(p).or_default() += 1;
        *by_both.entry((p, e)).or_default() += 1;
    }
    let true_pairs: u64 = by_entity.values().map(|&n| choose2(n)).sum();
    let predicted: u64 = by_pred.values().map(|&n| choose2(n)).sum();
    let tp: u64 = by_both.values().map(|&n| choose2(n)).sum();
    let n = truth.len() as u64;
    let mut report = LinkageReport::build(truth.len(), true_pairs, predicted, tp, choose2(n) - true_pairs, predicted - tp);
    if let Some(u) = universe {
        let (mut negatives, mut false_pos, mut covered) = (0u64, 0u64, 0u64);
        for (a, b) in &u.pairs {
            let (ea, eb) = match (truth.entity(a), truth.entity(b)) {
                (Some(x), Some(y)) => (x, y),
                (None, _) => return Err(EvalError::UnknownRecord(a.clone())),
                (_, None) => return Err(EvalError::UnknownRecord(b.clone())),
            };
            if ea == eb {
                covered += 1;
            } else {
                negatives += 1;
                if prediction.label(a) == prediction.label(b) {
                    false_pos += 1;
                }
            }
        }
        report.specificity = 1.0 - ratio(false_pos, negatives, 0.0);
        report.negative_pairs = negatives;
        report.specificity_universe = "blocked".into();
        report.block_coverage = Some(ratio(covered, true_pairs, 1.0));
    }
    Ok(report)
}

/// Like [`evaluate`], restricted to pairs with at least one record in
/// `subset`.
pub fn evaluate_subset(
    prediction: &Prediction,
    truth: &GroundTruth,
    subset: &BTreeSet<String>,
) -> Result<LinkageReport, EvalError> {
    check(prediction, truth)?;
    if let Some(r) = subset.iter().find(|r| truth.entity(r).is_none()) {
        return Err(EvalError::UnknownRecord(r.clone()));
    }
    let mut entity_members: HashMap<&str, Vec<&str>> = HashMap::new();
    let mut pred_members: HashMap<&str, Vec<&str>> = HashMap::new();
    for (r, e) in &truth.0 {
        entity_members.entry(e).or_default().push(r);
        pred_members.entry(prediction.label(r)).or_default().push(r);
    }
    let mut true_set = BTreeSet::new();
    let mut pred_set = BTreeSet::new();
    for r in subset {
        let e = truth.entity(r).expect("checked");
        for &x in &entity_members[e] {
            if x != r {
                true_set.insert(ordered(r, x));
            }
        }
        for &x in &pred_members[prediction.label(r)] {
            if x != r {
                pred_set.insert(ordered(r, x));
            }
        }
    }
    let tp = true_set.intersection(&pred_set).count() as u64;
    let (t, p) = (true_set.len() as u64, pred_set.len() as u64);
    let n = truth.len() as u64;
    let touching = choose2(n) - choose2(n - subset.len() as u64);
    let mut r = LinkageReport::build(subset.len(), t, p, tp, touching - t, p - tp);
    r.specificity_universe = "subset".into();
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn truth(pairs: &[(&str, &str)]) -> GroundTruth {
        GroundTruth(pairs.iter().map(|(r, e)| (r.to_string(), e.to_string())).collect())
    }

    #[test]
    fn merging_everything_costs_two_homonym_pairs() {
        let t = truth(&[("r1", "E1"), ("r2", "E1"), ("r3", "E2")]);
        let p = Prediction::from_clusters([["r1", "r2", "r3"]]);
        let rep = evaluate(&p, &t, None).unwrap();
        assert_eq!((rep.homonym_errors, rep.synonym_errors), (2, 0));
        assert_eq!((rep.true_pairs, rep.predicted_pairs), (1, 3));
        assert!((rep.homonym_rate - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rep.sensitivity, 1.0);
        assert_eq!(rep.specificity, 0.0);
    }

    #[test]
    fn perfect_prediction() {
        let t = truth(&[("r1", "E1"), ("r2", "E1"), ("r3", "E2"), ("r4", "E3"), ("r5", "E3")]);
        let rep = evaluate(&Prediction::from_truth(&t), &t, None).unwrap();
        assert_eq!((rep.homonym_errors, rep.synonym_errors), (0, 0));
        assert_eq!((rep.sensitivity, rep.specificity), (1.0, 1.0));
        assert_eq!((rep.homonym_rate, rep.synonym_rate), (0.0, 0.0));
    }

    #[test]
    fn nothing_predicted_means_all_synonyms() {
        let t = truth(&[("r1", "E1"), ("r2", "E1"), ("r3", "E1")]);
        let rep = evaluate(&Prediction::default(), &t, None).unwrap();
        assert_eq!((rep.synonym_errors, rep.synonym_rate), (3, 1.0));
        assert_eq!((rep.homonym_rate, rep.precision), (0.0, 1.0));
    }

    #[test]
    fn unknown_record() {
        let t = truth(&[("r1", "E1")]);
        let p = Prediction::from_pairs([("r1", "zz")]);
        assert_eq!(evaluate(&p, &t, None).unwrap_err().code(), "UNKNOWN_RECORD");
    }

    #[test]
    fn blocked_universe_specificity() {
        let t = truth(&[("a", "E1"), ("b", "E1"), ("c", "E2"), ("d", "E3")]);
        let p = Prediction::from_pairs([("a", "b"), ("b", "c")]);
        let u = CandidateUniverse { pairs: [ordered("a", "b"), ordered("b", "c"), ordered("c", "d")].into() };
        let rep = evaluate(&p, &t, Some(&u)).unwrap();
        // Negatives in the universe: (b,c) and (c,d); (b,c) was linked.
        assert_eq!(rep.negative_pairs, 2);
        assert_eq!(rep.specificity, 0.5);
        assert_eq!(rep.block_coverage, Some(1.0));
        assert!(rep.to_table().contains("blocked"));
    }

    #[test]
    fn subset_counts_only_touching_pairs() {
        let t = truth(&[("a", "E1"), ("b", "E1"), ("c", "E2"), ("d", "E2")]);
        let p = Prediction::from_pairs([("c", "d")]);
        let sub: BTreeSet<String> = ["a".to_string()].into();
        let rep = evaluate_subset(&p, &t, &sub).unwrap();
        assert_eq!((rep.true_pairs, rep.synonym_errors), (1, 1));
        let sub: BTreeSet<String> = ["c".to_string()].into();
        assert_eq!(evaluate_subset(&p, &t, &sub).unwrap().synonym_errors, 0);
    }

    /// Counts over all record pairs directly.
    fn brute(p: &Prediction, t: &GroundTruth) -> (u64, u64, u64) {
        let ids: Vec<&String> = t.0.keys().collect();
        let (mut tp, mut hom, mut syn) = (0, 0, 0);
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                let same_t = t.0[ids[i]] == t.0[ids[j]];
                let same_p = p.label(ids[i]) == p.label(ids[j]);
                match (same_t, same_p) {
                    (true, true) => tp += 1,
                    (false, true) => hom += 1,
                    (true, false) => syn += 1,
                    _ => {}
                }
            }
        }
        (tp, hom, syn)
    }

    fn arb_case() -> impl Strategy<Value = (GroundTruth, Prediction)> {
        (1usize..25).prop_flat_map(|n| {
            (prop::collection::vec(0u8..6, n), prop::collection::vec(0u8..6, n)).prop_map(move |(e, c)| {
                let t = GroundTruth((0..n).map(|i| (format!("r{i:02}"), format!("E{}", e[i]))).collect());
                let p = Prediction((0..n).map(|i| (format!("r{i:02}"), format!("C{}", c[i]))).collect());
                (t, p)
            })
        })
    }

    proptest! {
        #[test]
        fn matches_pairwise_enumeration((t, p) in arb_case()) {
            let rep = evaluate(&p, &t, None).unwrap();
            let (tp, hom, syn) = brute(&p, &t);
            prop_assert_eq!((rep.true_positive_pairs, rep.homonym_errors, rep.synonym_errors), (tp, hom, syn));
            for r in [rep.homonym_rate, rep.synonym_rate, rep.sensitivity, rep.specificity, rep.precision] {
                prop_assert!((0.0..=1.0).contains(&r));
            }
        }

        #[test]
        fn adding_a_pair_moves_errors_monotonically((t, p) in arb_case(), i in 0usize..25, j in 0usize..25) {
            let ids: Vec<String> = t.0.keys().cloned().collect();
            let (a, b) = (&ids[i % ids.len()], &ids[j % ids.len()]);
            let before = evaluate(&p, &t, None).unwrap();
            let q = p.with_pair(a, b);
            let after = evaluate(&q, &t, None).unwrap();
            prop_assert!(after.synonym_errors <= before.synonym_errors);
            // Newly implied pairs: every pair across the two joined clusters.
            let members = |x: &str| -> Vec<&String> { ids.iter().filter(|r| p.label(r) == p.label(x)).collect() };
            let wrong = if p.label(a) == p.label(b) {
                0
            } else {
                let (ca, cb) = (members(a), members(b));
                ca.iter().flat_map(|x| cb.iter().map(move |y| (x, y))).filter(|(x, y)| t.0[**x] != t.0[**y]).count() as u64
            };
            prop_assert_eq!(after.homonym_errors - before.homonym_errors, wrong);
            if t.0[a] != t.0[b] && p.label(a) != p.label(b) {
                prop_assert!(after.homonym_errors > before.homonym_errors);
            }
        }

        #[test]
        fn identity_prediction_has_no_errors((t, _) in arb_case()) {
            let rep = evaluate(&Prediction::from_truth(&t), &t, None).unwrap();
            prop_assert_eq!((rep.homonym_errors, rep.synonym_errors), (0, 0));
        }
    }
}
