use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::LinkageError;
use crate::idmodel::{Field, NormalizedIdentity};

/// Random bits in a version-4 UUID (128 minus version and variant).
pub const UUID4_RANDOM_BITS: u32 = 122;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IdFormat {
    #[default]
    Any,
    Uuid4,
}

impl IdFormat {
    pub fn check(self, id: &str) -> Result<(), LinkageError> {
        match self {
            IdFormat::Any if !id.is_empty() => Ok(()),
            IdFormat::Uuid4 => match uuid::Uuid::try_parse(id) {
                Ok(u) if u.get_version_num() == 4 => Ok(()),
                _ => Err(LinkageError::InvalidIdentifier(id.to_string())),
            },
            _ => Err(LinkageError::InvalidIdentifier(id.to_string())),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct UniqueIdLinkage {
    /// `(index in a, index in b)`
    pub pairs: Vec<(usize, usize)>,
    pub unlinked_a: Vec<usize>,
    pub unlinked_b: Vec<usize>,
    /// Identifiers occurring more than once within one dataset, with the
    /// indexes carrying them. These are never linked.
    pub duplicates_a: BTreeMap<String, Vec<usize>>,
    pub duplicates_b: BTreeMap<String, Vec<usize>>,
}

impl UniqueIdLinkage {
    /// Share of records in `a` without a partner.
    pub fn unlinked_share(&self, a_len: usize) -> f64 {
        if a_len == 0 {
            0.0
        } else {
            1.0 - linked_share(self.pairs.len(), a_len)
        }
    }
}

pub fn linked_share(linked: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        linked as f64 / total as f64
    }
}

/// Unique ids → record, duplicated ids → records, records without an id.
type IdIndex = (BTreeMap<String, usize>, BTreeMap<String, Vec<usize>>, Vec<usize>);

fn index(
    records: &[NormalizedIdentity],
    field: Field,
    format: IdFormat,
) -> Result<IdIndex, LinkageError> {
    let mut seen: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut missing = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match r.field(field) {
            Some(id) => {
                let id = if format == IdFormat::Uuid4 { id.to_ascii_lowercase() } else { id };
                format.check(&id)?;
                seen.entry(id).or_default().push(i);
            }
            None => missing.push(i),
        }
    }
    let (dups, unique): (BTreeMap<_, _>, BTreeMap<_, _>) = seen.into_iter().partition(|(_, v)| v.len() > 1);
    Ok((unique.into_iter().map(|(k, v)| (k, v[0])).collect(), dups, missing))
}

/// Exact linkage on a unique identifier field.
pub fn unique_id_link(
    a: &[NormalizedIdentity],
    b: &[NormalizedIdentity],
    field: Field,
    format: IdFormat,
) -> Result<UniqueIdLinkage, LinkageError> {
    let (ia, duplicates_a, _) = index(a, field, format)?;
    let (ib, duplicates_b, _) = index(b, field, format)?;
    let mut pairs: Vec<(usize, usize)> =
        ia.iter().filter_map(|(id, &i)| ib.get(id).map(|&j| (i, j))).collect();
    pairs.sort_unstable();
    let linked_a: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
    let linked_b: BTreeSet<usize> = pairs.iter().map(|p| p.1).collect();
    Ok(UniqueIdLinkage {
        unlinked_a: (0..a.len()).filter(|i| !linked_a.contains(i)).collect(),
        unlinked_b: (0..b.len()).filter(|j| !linked_b.contains(j)).collect(),
        pairs,
        duplicates_a,
        duplicates_b,
    })
}
