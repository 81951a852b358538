use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::OnceLock;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corrupt::{corrupt, CorruptionConfig};
use super::EvalError;
use crate::idmodel::{IdentityRecord, PartialDate, Sex};

struct Weighted<T> {
    items: Vec<T>,
    dist: WeightedIndex<u32>,
}

impl<T> Weighted<T> {
    fn pick<R: Rng>(&self, rng: &mut R) -> &T {
        &self.items[self.dist.sample(rng)]
    }
}

fn weighted<T>(text: &str, mut row: impl FnMut(&[&str]) -> T) -> Weighted<T> {
    let mut items = Vec::new();
    let mut weights = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        let (w, rest) = cols.split_last().expect("non-empty line");
        weights.push(w.trim().parse::<u32>().expect("numeric weight"));
        items.push(row(rest));
    }
    Weighted { items, dist: WeightedIndex::new(&weights).expect("positive weights") }
}

/// Bundled frequency lists the generator draws from.
pub struct NameLists {
    female: Weighted<String>,
    male: Weighted<String>,
    surnames: Weighted<String>,
    streets: Weighted<String>,
    /// (postal code, city)
    places: Weighted<(String, String)>,
}

impl NameLists {
    pub fn bundled() -> &'static NameLists {
        static LISTS: OnceLock<NameLists> = OnceLock::new();
        LISTS.get_or_init(|| {
            let one = |c: &[&str]| c[0].to_string();
            NameLists {
                female: weighted(include_str!("../../data/names/female.csv"), one),
                male: weighted(include_str!("../../data/names/male.csv"), one),
                surnames: weighted(include_str!("../../data/names/surnames.csv"), one),
                streets: weighted(include_str!("../../data/names/streets.csv"), one),
                places: weighted(include_str!("../../data/names/places.csv"), |c| (c[0].to_string(), c[1].to_string())),
            }
        })
    }

    pub fn surname<R: Rng>(&self, rng: &mut R) -> &str {
        self.surnames.pick(rng)
    }

    pub fn first_name<R: Rng>(&self, sex: Sex, rng: &mut R) -> &str {
        match sex {
            Sex::Male => self.male.pick(rng),
            _ => self.female.pick(rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RecordsPerEntity {
    Fixed { n: usize },
    /// Uniform over `min..=max`.
    Uniform { min: usize, max: usize },
}

impl RecordsPerEntity {
    fn validate(&self) -> Result<(), EvalError> {
        let ok = match *self {
            RecordsPerEntity::Fixed { n } => n >= 1,
            RecordsPerEntity::Uniform { min, max } => min >= 1 && min <= max,
        };
        if ok {
            Ok(())
        } else {
            Err(EvalError::InvalidRequest("every entity needs at least one record".into()))
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        match *self {
            RecordsPerEntity::Fixed { n } => n,
            RecordsPerEntity::Uniform { min, max } => rng.gen_range(min..=max),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            RecordsPerEntity::Fixed { n } => n as f64,
            RecordsPerEntity::Uniform { min, max } => (min + max) as f64 / 2.0,
        }
    }
}

/// recordId → entityId, total over the corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth(pub BTreeMap<String, String>);

impl GroundTruth {
    pub fn entity(&self, record_id: &str) -> Option<&str> {
        self.0.get(record_id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Corpus {
    pub records: Vec<IdentityRecord>,
    pub truth: GroundTruth,
    /// recordId → applied corruptions; clean records are absent.
    pub provenance: BTreeMap<String, Vec<String>>,
}

impl Corpus {
    /// Records carrying a note with the given prefix, e.g. `"swap"`.
    pub fn records_with(&self, prefix: &str) -> Vec<&str> {
        self.provenance
            .iter()
            .filter(|(_, n)| n.iter().any(|x| x.starts_with(prefix)))
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

fn entity<R: Rng>(lists: &NameLists, rng: &mut R) -> IdentityRecord {
    let sex = if rng.gen_bool(0.5) { Sex::Female } else { Sex::Male };
    let year = rng.gen_range(1930..=2010);
    let month = rng.gen_range(1..=12);
    let day = rng.gen_range(1..=28);
    let date = PartialDate::new(year, Some(month), Some(day)).expect("valid date");
    let mut r = IdentityRecord::new("", lists.first_name(sex, rng), lists.surname(rng), date);
    r.sex = sex;
    let (plz, city) = lists.places.pick(rng).clone();
    r.postal_code = Some(plz);
    r.city = Some(city);
    r.street = Some(lists.streets.pick(rng).clone());
    r.house_number = Some(rng.gen_range(1..=140).to_string());
    r.nationality = Some(if rng.gen_bool(0.9) { "DE" } else { ["TR", "PL", "IT", "SY", "RO"].choose(rng).expect("non-empty") }.into());
    if rng.gen_bool(0.8) {
        let letter = (b'A' + rng.gen_range(0..26)) as char;
        r.kvnr = Some(format!("{letter}{:09}", rng.gen_range(0..1_000_000_000u32)));
    }
    r
}

/// Draws `n_entities` people; each emits one clean record and further
/// corrupted copies. Entity `i` uses its own RNG stream, so the result does
/// not depend on thread scheduling. Records are shuffled before ids are
/// assigned.
pub fn generate_corpus(
    n_entities: usize,
    per_entity: RecordsPerEntity,
    corruption: &CorruptionConfig,
) -> Result<Corpus, EvalError> {
    if n_entities == 0 {
        return Err(EvalError::InvalidRequest("nEntities must be at least 1".into()));
    }
    per_entity.validate()?;
    corruption.validate()?;
    let lists = NameLists::bundled();
    let per: Vec<Vec<(IdentityRecord, Vec<String>)>> = (0..n_entities)
        .into_par_iter()
        .map(|e| {
            let mut rng = ChaCha20Rng::seed_from_u64(corruption.seed);
            rng.set_stream(e as u64 + 1);
            let base = entity(lists, &mut rng);
            let n = per_entity.sample(&mut rng);
            let mut out = vec![(base.clone(), Vec::new())];
            for _ in 1..n {
                out.push(corrupt(&base, corruption, lists, &mut rng));
            }
            out
        })
        .collect();
    let mut flat: Vec<(usize, IdentityRecord, Vec<String>)> = per
        .into_iter()
        .enumerate()
        .flat_map(|(e, rs)| rs.into_iter().map(move |(r, n)| (e, r, n)))
        .collect();
    let mut rng = ChaCha20Rng::seed_from_u64(corruption.seed);
    flat.shuffle(&mut rng);
    let width = (n_entities.to_string().len()).max(4);
    let rwidth = flat.len().to_string().len().max(5);
    let mut corpus = Corpus { records: Vec::new(), truth: GroundTruth::default(), provenance: BTreeMap::new() };
    for (i, (e, mut r, notes)) in flat.into_iter().enumerate() {
        r.record_id = format!("R{:0rwidth$}", i + 1);
        corpus.truth.0.insert(r.record_id.clone(), format!("E{:0width$}", e + 1));
        if !notes.is_empty() {
            corpus.provenance.insert(r.record_id.clone(), notes);
        }
        corpus.records.push(r);
    }
    Ok(corpus)
}

pub const DEMO_SEED: u64 = 2024;

/// The 100-record corpus shipped for demos and determinism checks.
pub fn demo_corpus() -> Corpus {
    let cfg = CorruptionConfig {
        typo_rate: 0.2,
        field_swap_rate: 0.05,
        date_error_rate: 0.05,
        missing_rate: 0.1,
        name_change_rate: 0.05,
        seed: DEMO_SEED,
    };
    generate_corpus(50, RecordsPerEntity::Fixed { n: 2 }, &cfg).expect("fixed parameters are valid")
}

#[derive(Serialize, Deserialize)]
struct TruthRow {
    record_id: String,
    entity_id: String,
}

/// Sidecar truth CSV: `record_id,entity_id`.
pub fn write_truth<W: Write>(out: W, truth: &GroundTruth) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for (r, e) in &truth.0 {
        w.serialize(TruthRow { record_id: r.clone(), entity_id: e.clone() })?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_truth<R: Read>(input: R) -> Result<GroundTruth, EvalError> {
    let mut rd = csv::Reader::from_reader(input);
    let mut t = GroundTruth::default();
    for (i, row) in rd.deserialize::<TruthRow>().enumerate() {
        let row = row.map_err(|e| EvalError::Truth { line: i + 2, msg: e.to_string() })?;
        if t.0.insert(row.record_id.clone(), row.entity_id).is_some() {
            return Err(EvalError::Truth { line: i + 2, msg: format!("duplicate record {}", row.record_id) });
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::idmodel::csv::write_records;
    use crate::idmodel::normalize;

    #[test]
    fn one_clean_record() {
        let c = generate_corpus(1, RecordsPerEntity::Fixed { n: 1 }, &CorruptionConfig::none(9)).unwrap();
        assert_eq!(c.records.len(), 1);
        assert!(c.provenance.is_empty());
        normalize(&c.records[0]).unwrap();
        assert_eq!(c.truth.entity(&c.records[0].record_id), Some("E0001"));
    }

    #[test]
    fn zero_corruption_gives_exact_duplicates() {
        let c = generate_corpus(20, RecordsPerEntity::Fixed { n: 2 }, &CorruptionConfig::none(9)).unwrap();
        assert_eq!(c.records.len(), 40);
        let mut by_entity: BTreeMap<&str, Vec<&IdentityRecord>> = BTreeMap::new();
        for r in &c.records {
            by_entity.entry(c.truth.entity(&r.record_id).unwrap()).or_default().push(r);
        }
        for rs in by_entity.values() {
            let (mut a, b) = (rs[0].clone(), rs[1]);
            a.record_id.clone_from(&b.record_id);
            assert_eq!(&a, b);
        }
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let cfg = CorruptionConfig { typo_rate: 0.3, missing_rate: 0.2, seed: 5, ..CorruptionConfig::none(5) };
        let bytes = |c: &Corpus| {
            let mut v = Vec::new();
            write_records(&mut v, &c.records).unwrap();
            write_truth(&mut v, &c.truth).unwrap();
            v.extend(serde_json::to_vec(&c.provenance).unwrap());
            v
        };
        let per = RecordsPerEntity::Uniform { min: 1, max: 4 };
        let a = generate_corpus(200, per, &cfg).unwrap();
        let b = generate_corpus(200, per, &cfg).unwrap();
        assert_eq!(bytes(&a), bytes(&b));
        let other = CorruptionConfig { seed: 6, ..cfg };
        assert_ne!(bytes(&a), bytes(&generate_corpus(200, per, &other).unwrap()));
    }

    #[test]
    fn every_record_normalizes_and_has_truth() {
        let cfg = CorruptionConfig {
            typo_rate: 0.5,
            field_swap_rate: 0.2,
            date_error_rate: 0.2,
            missing_rate: 0.3,
            name_change_rate: 0.2,
            seed: 1,
        };
        let c = generate_corpus(300, RecordsPerEntity::Uniform { min: 1, max: 4 }, &cfg).unwrap();
        assert_eq!(c.truth.len(), c.records.len());
        for r in &c.records {
            normalize(r).unwrap();
        }
        assert!(!c.records_with("swap").is_empty());
    }

    #[test]
    fn invalid_requests() {
        let z = CorruptionConfig::none(0);
        assert!(generate_corpus(0, RecordsPerEntity::Fixed { n: 1 }, &z).is_err());
        assert!(generate_corpus(1, RecordsPerEntity::Fixed { n: 0 }, &z).is_err());
        assert!(generate_corpus(1, RecordsPerEntity::Uniform { min: 3, max: 2 }, &z).is_err());
    }

    #[test]
    fn truth_roundtrip() {
        let c = demo_corpus();
        assert_eq!(c.records.len(), 100);
        let mut buf = Vec::new();
        write_truth(&mut buf, &c.truth).unwrap();
        assert_eq!(read_truth(buf.as_slice()).unwrap(), c.truth);
        let bad = "record_id,entity_id\nR1,E1\nR1,E2\n";
        match read_truth(bad.as_bytes()) {
            Err(EvalError::Truth { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
