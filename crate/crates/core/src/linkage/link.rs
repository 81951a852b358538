use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::blocking::{dedup_candidates, generate_candidates};
use super::score::{MatchScore, Scorer, Verdict};
use super::LinkageError;
use crate::idmodel::NormalizedIdentity;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScoredPair {
    pub a_id: String,
    pub b_id: String,
    pub verdict: Verdict,
    pub score: MatchScore,
}

impl ScoredPair {
    pub fn total(&self) -> f64 {
        self.score.total
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LinkageResult {
    pub matches: Vec<ScoredPair>,
    pub possibles: Vec<ScoredPair>,
    pub non_matched_a: Vec<String>,
    pub non_matched_b: Vec<String>,
}

impl LinkageResult {
    /// One line per reported pair: `a_id,b_id,verdict,total`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), LinkageError> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| LinkageError::Input(e.to_string());
        w.write_record(["a_id", "b_id", "verdict", "total"]).map_err(io)?;
        for p in self.matches.iter().chain(&self.possibles) {
            let verdict = serde_json::to_value(p.verdict).expect("enum");
            w.write_record([
                p.a_id.as_str(),
                p.b_id.as_str(),
                verdict.as_str().unwrap_or_default(),
                &format!("{:.6}", p.total()),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| LinkageError::Input(e.to_string()))
    }

    pub fn matched_ids(&self) -> BTreeSet<(String, String)> {
        self.matches.iter().map(|p| (p.a_id.clone(), p.b_id.clone())).collect()
    }
}

/// Greedy one-to-one selection: descending total, ties by `(a_id, b_id)`.
pub fn assign_one_to_one(mut pairs: Vec<ScoredPair>) -> Vec<ScoredPair> {
    pairs.sort_by(|x, y| {
        y.total()
            .total_cmp(&x.total())
            .then_with(|| x.a_id.cmp(&y.a_id))
            .then_with(|| x.b_id.cmp(&y.b_id))
    });
    let mut used_a = BTreeSet::new();
    let mut used_b = BTreeSet::new();
    pairs
        .into_iter()
        .filter(|p| {
            if used_a.contains(&p.a_id) || used_b.contains(&p.b_id) {
                return false;
            }
            used_a.insert(p.a_id.clone());
            used_b.insert(p.b_id.clone());
            true
        })
        .collect()
}

pub fn link_datasets(a: &[NormalizedIdentity], b: &[NormalizedIdentity], scorer: &Scorer) -> LinkageResult {
    let candidates = generate_candidates(a, b, &scorer.config().blocking);
    let scored: Vec<ScoredPair> = candidates
        .par_iter()
        .filter_map(|&(i, j)| {
            let score = scorer.score(&a[i], &b[j]);
            let verdict = scorer.classify(&score).verdict;
            (verdict != Verdict::NonMatch).then(|| ScoredPair {
                a_id: a[i].source_record_id.clone(),
                b_id: b[j].source_record_id.clone(),
                verdict,
                score,
            })
        })
        .collect();
    let (matches, possibles): (Vec<_>, Vec<_>) = scored.into_iter().partition(|p| p.verdict == Verdict::Match);
    let matches = assign_one_to_one(matches);
    let in_a: BTreeSet<&str> = matches.iter().map(|p| p.a_id.as_str()).collect();
    let in_b: BTreeSet<&str> = matches.iter().map(|p| p.b_id.as_str()).collect();
    LinkageResult {
        non_matched_a: a
            .iter()
            .map(|r| &r.source_record_id)
            .filter(|id| !in_a.contains(id.as_str()))
            .cloned()
            .collect(),
        non_matched_b: b
            .iter()
            .map(|r| &r.source_record_id)
            .filter(|id| !in_b.contains(id.as_str()))
            .cloned()
            .collect(),
        matches,
        possibles,
    }
}

/// Pairs within one dataset (`a_id < b_id` by position), without the
/// one-to-one restriction. `non_matched_a` lists records in no MATCH pair;
/// `non_matched_b` stays empty.
pub fn link_within(records: &[NormalizedIdentity], scorer: &Scorer) -> LinkageResult {
    let candidates = dedup_candidates(records, &scorer.config().blocking);
    let scored: Vec<ScoredPair> = candidates
        .par_iter()
        .filter_map(|&(i, j)| {
            let score = scorer.score(&records[i], &records[j]);
            let verdict = scorer.classify(&score).verdict;
            (verdict != Verdict::NonMatch).then(|| ScoredPair {
                a_id: records[i].source_record_id.clone(),
                b_id: records[j].source_record_id.clone(),
                verdict,
                score,
            })
        })
        .collect();
    let (matches, possibles): (Vec<_>, Vec<_>) = scored.into_iter().partition(|p| p.verdict == Verdict::Match);
    let linked: BTreeSet<&str> = matches.iter().flat_map(|p| [p.a_id.as_str(), p.b_id.as_str()]).collect();
    LinkageResult {
        non_matched_a: records
            .iter()
            .map(|r| &r.source_record_id)
            .filter(|id| !linked.contains(id.as_str()))
            .cloned()
            .collect(),
        non_matched_b: Vec::new(),
        matches,
        possibles,
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Clusters of record indexes connected by MATCH pairs within one dataset.
/// Singletons included, clusters sorted by their smallest index.
pub fn dedupe(records: &[NormalizedIdentity], scorer: &Scorer) -> Vec<Vec<usize>> {
    let candidates = dedup_candidates(records, &scorer.config().blocking);
    let links: Vec<(usize, usize)> = candidates
        .into_par_iter()
        .filter(|&(i, j)| {
            let s = scorer.score(&records[i], &records[j]);
            scorer.classify(&s).verdict == Verdict::Match
        })
        .collect();
    let mut parent: Vec<usize> = (0..records.len()).collect();
    for (i, j) in links {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri != rj {
            parent[ri.max(rj)] = ri.min(rj);
        }
    }
    let mut clusters: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..records.len() {
        let r = find(&mut parent, i);
        clusters.entry(r).or_default().push(i);
    }
    clusters.into_values().collect()
}
