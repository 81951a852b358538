//! Deterministic linkage of claims data to registry data over coarse
//! attributes, narrowing ambiguous candidate sets step by step.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::LinkageError;

/// Maximum distance between diagnosis dates, in days.
pub const MAX_DATE_DELTA_DAYS: i64 = 90;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DiagnosisSource {
    Inpatient,
    Outpatient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CascadeRecord {
    pub record_id: String,
    pub birth_year: i32,
    pub sex: String,
    pub municipality_code: String,
    pub cancer_type: String,
    pub diagnosis_date: NaiveDate,
    pub icd_code: String,
    pub diagnosis_source: DiagnosisSource,
}

impl CascadeRecord {
    fn icd_prefix(&self, n: usize) -> Option<String> {
        let code: String = self.icd_code.chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        (code.len() >= n).then(|| code[..n].to_ascii_uppercase())
    }

    fn days_to(&self, other: &CascadeRecord) -> i64 {
        (self.diagnosis_date - other.diagnosis_date).num_days().abs()
    }

    /// Exact agreement on the base attributes with dates close enough.
    pub fn base_candidate(&self, other: &CascadeRecord) -> bool {
        self.birth_year == other.birth_year
            && self.sex == other.sex
            && self.municipality_code == other.municipality_code
            && self.cancer_type == other.cancer_type
            && self.days_to(other) <= MAX_DATE_DELTA_DAYS
    }
}

/// Step at which a claims record's candidate set became a single record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CascadeStep {
    Unique,
    Icd4,
    Icd3,
    Inpatient,
    DateDifference,
    Random,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CascadeResult {
    pub seed: u64,
    /// claims record id → registry record id
    pub assignments: BTreeMap<String, String>,
    pub steps: BTreeMap<String, CascadeStep>,
    pub unassigned_claims: Vec<String>,
}

impl CascadeResult {
    pub fn step_counts(&self) -> BTreeMap<CascadeStep, usize> {
        let mut out = BTreeMap::new();
        for s in self.steps.values() {
            *out.entry(*s).or_default() += 1;
        }
        out
    }
}

type Filter<'a> = Box<dyn Fn(&CascadeRecord) -> bool + 'a>;

fn narrow(cands: Vec<&CascadeRecord>, keep: impl Fn(&CascadeRecord) -> bool) -> Vec<&CascadeRecord> {
    let kept: Vec<_> = cands.iter().copied().filter(|r| keep(r)).collect();
    if kept.is_empty() {
        cands
    } else {
        kept
    }
}

/// Claims records are processed in record id order. Each takes its best
/// still-unassigned registry candidate, so a registry record is assigned
/// at most once.
pub fn deterministic_cascade(claims: &[CascadeRecord], registry: &[CascadeRecord], seed: u64) -> CascadeResult {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut order: Vec<&CascadeRecord> = claims.iter().collect();
    order.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    let mut registry_sorted: Vec<&CascadeRecord> = registry.iter().collect();
    registry_sorted.sort_by(|a, b| a.record_id.cmp(&b.record_id));

    let mut taken: BTreeSet<&str> = BTreeSet::new();
    let mut out = CascadeResult { seed, ..Default::default() };
    for c in order {
        let mut cands: Vec<&CascadeRecord> = registry_sorted
            .iter()
            .copied()
            .filter(|r| !taken.contains(r.record_id.as_str()) && c.base_candidate(r))
            .collect();
        if cands.is_empty() {
            out.unassigned_claims.push(c.record_id.clone());
            continue;
        }
        let mut step = CascadeStep::Unique;
        let icd4 = c.icd_prefix(4);
        let icd3 = c.icd_prefix(3);
        let filters: [(CascadeStep, Filter); 3] = [
            (CascadeStep::Icd4, Box::new(|r| icd4.is_some() && r.icd_prefix(4) == icd4)),
            (CascadeStep::Icd3, Box::new(|r| icd3.is_some() && r.icd_prefix(3) == icd3)),
            (CascadeStep::Inpatient, Box::new(|r| r.diagnosis_source == DiagnosisSource::Inpatient)),
        ];
        for (s, keep) in filters.iter() {
            if cands.len() == 1 {
                break;
            }
            cands = narrow(cands, keep);
            step = *s;
        }
        if cands.len() > 1 {
            let best = cands.iter().map(|r| c.days_to(r)).min().expect("non-empty");
            cands.retain(|r| c.days_to(r) == best);
            step = CascadeStep::DateDifference;
        }
        let chosen = if cands.len() > 1 {
            step = CascadeStep::Random;
            cands[rng.gen_range(0..cands.len())]
        } else {
            cands[0]
        };
        taken.insert(&chosen.record_id);
        out.assignments.insert(c.record_id.clone(), chosen.record_id.clone());
        out.steps.insert(c.record_id.clone(), step);
    }
    out
}

pub fn read_cascade_records<R: Read>(input: R) -> Result<Vec<CascadeRecord>, LinkageError> {
    let mut reader = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, row) in reader.deserialize().enumerate() {
        out.push(row.map_err(|e| LinkageError::Input(format!("row {}: {e}", i + 2)))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, date: &str, icd: &str, src: DiagnosisSource) -> CascadeRecord {
        CascadeRecord {
            record_id: id.into(),
            birth_year: 1950,
            sex: "F".into(),
            municipality_code: "03241001".into(),
            cancer_type: "BREAST".into(),
            diagnosis_date: date.parse().unwrap(),
            icd_code: icd.into(),
            diagnosis_source: src,
        }
    }

    use DiagnosisSource::{Inpatient as IN, Outpatient as OUT};

    #[test]
    fn single_candidate_within_window() {
        let claims = [rec("c1", "2015-03-01", "C50.4", OUT)];
        let reg = [rec("r1", "2015-05-20", "C50.9", OUT), rec("r2", "2015-07-01", "C50.4", OUT)];
        let out = deterministic_cascade(&claims, &reg, 1);
        // r2 is 122 days away.
        assert_eq!(out.assignments["c1"], "r1");
        assert_eq!(out.steps["c1"], CascadeStep::Unique);
    }

    #[test]
    fn four_digit_icd_wins() {
        let claims = [rec("c1", "2015-03-01", "C50.4", OUT)];
        let reg = [rec("r1", "2015-03-02", "C50.9", IN), rec("r2", "2015-04-01", "C50.4", OUT)];
        let out = deterministic_cascade(&claims, &reg, 1);
        assert_eq!(out.assignments["c1"], "r2");
        assert_eq!(out.steps["c1"], CascadeStep::Icd4);
    }

    #[test]
    fn later_steps() {
        let claims = [rec("c1", "2015-03-01", "C50.4", OUT)];
        let reg = [rec("r1", "2015-03-02", "C51.1", OUT), rec("r2", "2015-04-01", "C50.1", IN)];
        assert_eq!(deterministic_cascade(&claims, &reg, 1).steps["c1"], CascadeStep::Icd3);
        let reg = [rec("r1", "2015-03-02", "C50.1", OUT), rec("r2", "2015-04-01", "C50.2", IN)];
        let out = deterministic_cascade(&claims, &reg, 1);
        assert_eq!((out.assignments["c1"].as_str(), out.steps["c1"]), ("r2", CascadeStep::Inpatient));
        let reg = [rec("r1", "2015-03-09", "C50.1", IN), rec("r2", "2015-03-04", "C50.2", IN)];
        let out = deterministic_cascade(&claims, &reg, 1);
        assert_eq!((out.assignments["c1"].as_str(), out.steps["c1"]), ("r2", CascadeStep::DateDifference));
        let reg = [rec("r1", "2015-03-04", "C50.1", IN), rec("r2", "2015-02-26", "C50.2", IN)];
        let a = deterministic_cascade(&claims, &reg, 7);
        assert_eq!(a.steps["c1"], CascadeStep::Random);
        assert_eq!(a, deterministic_cascade(&claims, &reg, 7));
    }

    #[test]
    fn registry_records_are_used_once() {
        let claims = [rec("c1", "2015-03-01", "C50.4", OUT), rec("c2", "2015-03-01", "C50.4", OUT)];
        let reg = [rec("r1", "2015-03-02", "C50.4", IN)];
        let out = deterministic_cascade(&claims, &reg, 1);
        assert_eq!(out.assignments.len(), 1);
        assert_eq!(out.unassigned_claims, vec!["c2"]);
    }

    #[test]
    fn csv_roundtrip() {
        let text = "record_id,birth_year,sex,municipality_code,cancer_type,diagnosis_date,icd_code,diagnosis_source\n\
                    c1,1950,F,03241001,BREAST,2015-03-01,C50.4,INPATIENT\n";
        let rows = read_cascade_records(text.as_bytes()).unwrap();
        assert_eq!(rows[0], rec("c1", "2015-03-01", "C50.4", IN));
        assert!(read_cascade_records("record_id\nx\n".as_bytes()).is_err());
    }

    /// Argmin over the lexicographic key, then the same seeded draw.
    pub(crate) fn oracle(claims: &[CascadeRecord], registry: &[CascadeRecord], seed: u64) -> BTreeMap<String, String> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut claims = claims.to_vec();
        claims.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        let mut registry = registry.to_vec();
        registry.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        let mut used = vec![false; registry.len()];
        let mut out = BTreeMap::new();
        for c in &claims {
            let strip = |s: &str| s.replace('.', "");
            let key = |r: &CascadeRecord| {
                let (ci, ri) = (strip(&c.icd_code), strip(&r.icd_code));
                (
                    !(ci.len() >= 4 && ri.len() >= 4 && ci[..4] == ri[..4]),
                    !(ci.len() >= 3 && ri.len() >= 3 && ci[..3] == ri[..3]),
                    r.diagnosis_source != DiagnosisSource::Inpatient,
                    (c.diagnosis_date - r.diagnosis_date).num_days().abs(),
                )
            };
            let cands: Vec<usize> = (0..registry.len())
                .filter(|&j| {
                    let r = &registry[j];
                    !used[j]
                        && r.birth_year == c.birth_year
                        && r.sex == c.sex
                        && r.municipality_code == c.municipality_code
                        && r.cancer_type == c.cancer_type
                        && (c.diagnosis_date - r.diagnosis_date).num_days().abs() <= 90
                })
                .collect();
            let Some(best) = cands.iter().map(|&j| key(&registry[j])).min() else { continue };
            let tied: Vec<usize> = cands.into_iter().filter(|&j| key(&registry[j]) == best).collect();
            let j = if tied.len() > 1 { tied[rand::Rng::gen_range(&mut rng, 0..tied.len())] } else { tied[0] };
            used[j] = true;
            out.insert(c.record_id.clone(), registry[j].record_id.clone());
        }
        out
    }

    fn arb_record(prefix: &'static str) -> impl Strategy<Value = CascadeRecord> {
        (0u32..1000, 0i64..200, 0usize..4, any::<bool>(), 1949i32..1951, 0usize..2).prop_map(
            move |(id, day, icd, inpatient, year, muni)| CascadeRecord {
                record_id: format!("{prefix}{id:04}"),
                birth_year: year,
                sex: "F".into(),
                municipality_code: ["A", "B"][muni].into(),
                cancer_type: "BREAST".into(),
                diagnosis_date: NaiveDate::from_ymd_opt(2015, 1, 1).unwrap() + chrono::Duration::days(day),
                icd_code: ["C50.1", "C50.2", "C51.1", "C50"][icd].into(),
                diagnosis_source: if inpatient { IN } else { OUT },
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn matches_exhaustive_oracle(
            claims in proptest::collection::vec(arb_record("c"), 1..30),
            reg in proptest::collection::vec(arb_record("r"), 1..30),
            seed in any::<u64>(),
        ) {
            let dedup = |v: Vec<CascadeRecord>| {
                let mut seen = BTreeSet::new();
                v.into_iter().filter(|r| seen.insert(r.record_id.clone())).collect::<Vec<_>>()
            };
            let (claims, reg) = (dedup(claims), dedup(reg));
            let got = deterministic_cascade(&claims, &reg, seed);
            prop_assert_eq!(got.assignments, oracle(&claims, &reg, seed));
        }
    }
}
