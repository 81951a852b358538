use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::config::BlockingSpec;
use super::{config_err, LinkageError};
use crate::idmodel::{cologne_phonetic, Field, NormalizedIdentity};

/// Stand-in for a missing key part.
pub const MISSING: &str = "⟂";

const SEPARATOR: char = '|';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Transform {
    #[default]
    Value,
    Phonetic,
    Year,
    Month,
    Day,
    Initial,
}

/// One transformed field, used in blocking keys and rule predicates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct KeyPart {
    pub field: Field,
    #[serde(default)]
    pub transform: Transform,
}

impl KeyPart {
    pub fn new(field: Field, transform: Transform) -> Self {
        KeyPart { field, transform }
    }

    pub(crate) fn validate(&self) -> Result<(), LinkageError> {
        if matches!(self.transform, Transform::Year | Transform::Month | Transform::Day)
            && self.field != Field::BirthDate
        {
            return config_err(format!("{:?} applies to birthDate only", self.transform));
        }
        Ok(())
    }

    pub fn apply(&self, n: &NormalizedIdentity) -> Option<String> {
        let date = &n.birth_date;
        let v = match self.transform {
            Transform::Year => return Some(date.year.to_string()),
            Transform::Month => return date.month.map(|m| format!("{m:02}")),
            Transform::Day => return date.day.map(|d| format!("{d:02}")),
            _ => n.field(self.field)?,
        };
        let out = match self.transform {
            Transform::Phonetic => match self.field {
                Field::FirstName => n.phonetic_first_name.clone(),
                Field::LastName => n.phonetic_last_name.clone(),
                _ => cologne_phonetic(&v),
            },
            Transform::Initial => v.chars().next().map(String::from).unwrap_or_default(),
            _ => v,
        };
        (!out.is_empty()).then_some(out)
    }
}

/// Key parts joined by `|`, missing parts as [`MISSING`].
pub fn block_key(n: &NormalizedIdentity, spec: &BlockingSpec) -> String {
    let mut key = String::new();
    for (i, part) in spec.key_parts.iter().enumerate() {
        if i > 0 {
            key.push(SEPARATOR);
        }
        key.push_str(part.apply(n).as_deref().unwrap_or(MISSING));
    }
    key
}

fn index(records: &[NormalizedIdentity], spec: &BlockingSpec) -> HashMap<String, Vec<usize>> {
    let mut map: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        map.entry(block_key(r, spec)).or_default().push(i);
    }
    map
}

/// Index pairs `(i in a, j in b)` sharing a block key under at least one
/// spec, deduplicated and sorted. No specs means the full cross product.
pub fn generate_candidates(
    a: &[NormalizedIdentity],
    b: &[NormalizedIdentity],
    blocking: &[BlockingSpec],
) -> Vec<(usize, usize)> {
    if blocking.is_empty() {
        return (0..a.len()).flat_map(|i| (0..b.len()).map(move |j| (i, j))).collect();
    }
    let mut pairs = BTreeSet::new();
    for spec in blocking {
        let idx = index(b, spec);
        for (i, r) in a.iter().enumerate() {
            if let Some(js) = idx.get(&block_key(r, spec)) {
                pairs.extend(js.iter().map(|&j| (i, j)));
            }
        }
    }
    pairs.into_iter().collect()
}

/// Within-dataset candidates `(i, j)` with `i < j`.
pub fn dedup_candidates(records: &[NormalizedIdentity], blocking: &[BlockingSpec]) -> Vec<(usize, usize)> {
    let n = records.len();
    if blocking.is_empty() {
        return (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    }
    let mut pairs = BTreeSet::new();
    for spec in blocking {
        for block in index(records, spec).values() {
            for (x, &i) in block.iter().enumerate() {
                pairs.extend(block[x + 1..].iter().map(|&j| (i.min(j), i.max(j))));
            }
        }
    }
    pairs.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::idmodel::{normalize, IdentityRecord};

    fn person(id: &str, last: &str, date: &str, plz: Option<&str>) -> NormalizedIdentity {
        let mut r = IdentityRecord::new(id, "Anna", last, date.parse().unwrap());
        r.postal_code = plz.map(str::to_string);
        normalize(&r).unwrap()
    }

    fn spec(parts: &[(Field, Transform)]) -> BlockingSpec {
        BlockingSpec { key_parts: parts.iter().map(|&(f, t)| KeyPart::new(f, t)).collect() }
    }

    #[test]
    fn key_formats() {
        let p = person("1", "Maier", "1980-05-02", Some("28359"));
        let phon_year = spec(&[(Field::LastName, Transform::Phonetic), (Field::BirthDate, Transform::Year)]);
        assert_eq!(block_key(&p, &phon_year), "67|1980");
        assert_eq!(block_key(&p, &spec(&[(Field::PostalCode, Transform::Value)])), "28359");
        let q = person("2", "Maier", "1980", None);
        assert_eq!(block_key(&q, &spec(&[(Field::PostalCode, Transform::Value)])), "⟂");
        assert_eq!(block_key(&q, &spec(&[(Field::BirthDate, Transform::Month)])), MISSING);
    }

    #[test]
    fn year_transform_requires_birth_date() {
        assert!(KeyPart::new(Field::LastName, Transform::Year).validate().is_err());
    }

    #[test]
    fn candidate_sets() {
        let a = vec![person("a1", "Maier", "1980", None), person("a2", "Mayer", "1980", None)];
        let b = vec![person("b1", "Meyer", "1980", None), person("b2", "Maier", "1980", None)];
        let by_phon = spec(&[(Field::LastName, Transform::Phonetic)]);
        assert_eq!(generate_candidates(&a, &b, std::slice::from_ref(&by_phon)).len(), 4);
        assert_eq!(generate_candidates(&a, &b, &[]).len(), 4);

        let c = vec![person("c1", "Schmidt", "1990", None)];
        assert!(generate_candidates(&a, &c, std::slice::from_ref(&by_phon)).is_empty());

        // Two overlapping specs: the union, each pair once.
        let by_year = spec(&[(Field::BirthDate, Transform::Year)]);
        let both = generate_candidates(&a, &b, &[by_phon.clone(), by_year.clone()]);
        let mut oracle = BTreeSet::new();
        for s in [&by_phon, &by_year] {
            for (i, x) in a.iter().enumerate() {
                for (j, y) in b.iter().enumerate() {
                    if block_key(x, s) == block_key(y, s) {
                        oracle.insert((i, j));
                    }
                }
            }
        }
        assert_eq!(both, oracle.into_iter().collect::<Vec<_>>());
    }

    #[test]
    fn dedup_pairs_are_ordered_and_unique() {
        let r = vec![
            person("1", "Maier", "1980", None),
            person("2", "Mayer", "1980", None),
            person("3", "Schmidt", "1980", None),
        ];
        let by_phon = spec(&[(Field::LastName, Transform::Phonetic)]);
        let by_year = spec(&[(Field::BirthDate, Transform::Year)]);
        assert_eq!(dedup_candidates(&r, std::slice::from_ref(&by_phon)), vec![(0, 1)]);
        assert_eq!(dedup_candidates(&r, &[by_phon, by_year]), vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(dedup_candidates(&r, &[]).len(), 3);
    }
}
