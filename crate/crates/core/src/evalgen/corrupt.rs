use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corpus::NameLists;
use super::EvalError;
use crate::idmodel::{IdentityRecord, PartialDate, Sex};

/// Per-channel corruption probabilities. Typo and missing rates apply per
/// field, the others per record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CorruptionConfig {
    #[serde(default)]
    pub typo_rate: f64,
    #[serde(default)]
    pub field_swap_rate: f64,
    #[serde(default)]
    pub date_error_rate: f64,
    #[serde(default)]
    pub missing_rate: f64,
    #[serde(default)]
    pub name_change_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl CorruptionConfig {
    pub fn none(seed: u64) -> Self {
        CorruptionConfig {
            typo_rate: 0.0,
            field_swap_rate: 0.0,
            date_error_rate: 0.0,
            missing_rate: 0.0,
            name_change_rate: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        for (name, r) in [
            ("typoRate", self.typo_rate),
            ("fieldSwapRate", self.field_swap_rate),
            ("dateErrorRate", self.date_error_rate),
            ("missingRate", self.missing_rate),
            ("nameChangeRate", self.name_change_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(EvalError::InvalidRate(name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TypoKind {
    Substitution,
    Deletion,
}

const LOWER: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

/// One edit at an ASCII letter position: a different letter or nothing.
/// Returns `None` when the value offers no such position.
fn typo<R: Rng>(s: &str, rng: &mut R) -> Option<(String, TypoKind, usize)> {
    let chars: Vec<char> = s.chars().collect();
    let spots: Vec<usize> = (0..chars.len()).filter(|&i| chars[i].is_ascii_alphabetic()).collect();
    let &pos = spots.choose(rng)?;
    let kind = if chars.len() > 2 && rng.gen_bool(0.5) { TypoKind::Deletion } else { TypoKind::Substitution };
    let mut out = chars.clone();
    match kind {
        TypoKind::Deletion => {
            out.remove(pos);
        }
        TypoKind::Substitution => {
            let orig = chars[pos].to_ascii_lowercase();
            let c = loop {
                let c = LOWER[rng.gen_range(0..LOWER.len())] as char;
                if c != orig {
                    break c;
                }
            };
            out[pos] = if chars[pos].is_ascii_uppercase() { c.to_ascii_uppercase() } else { c };
        }
    }
    Some((out.into_iter().collect(), kind, pos))
}

/// Applies each channel independently and returns the corrupted record
/// plus one note per applied corruption.
pub fn corrupt<R: Rng>(
    record: &IdentityRecord,
    cfg: &CorruptionConfig,
    lists: &NameLists,
    rng: &mut R,
) -> (IdentityRecord, Vec<String>) {
    let mut r = record.clone();
    let mut notes = Vec::new();

    if rng.gen_bool(cfg.field_swap_rate) {
        std::mem::swap(&mut r.first_name, &mut r.last_name);
        notes.push("swap:firstName<->lastName".to_string());
    }
    if rng.gen_bool(cfg.name_change_rate) {
        let new = loop {
            let n = lists.surname(rng);
            if n != r.last_name {
                break n.to_string();
            }
        };
        let old = std::mem::replace(&mut r.last_name, new);
        r.former_names.insert(0, old);
        notes.push("nameChange:lastName".to_string());
    }
    for (field, value) in [
        ("firstName", &mut r.first_name),
        ("lastName", &mut r.last_name),
    ] {
        if rng.gen_bool(cfg.typo_rate) {
            if let Some((v, kind, pos)) = typo(value, rng) {
                *value = v;
                notes.push(format!("typo:{field}:{kind:?}@{pos}").to_lowercase());
            }
        }
    }
    for (field, value) in [("street", &mut r.street), ("city", &mut r.city)] {
        if let Some(v) = value.as_mut() {
            if rng.gen_bool(cfg.typo_rate) {
                if let Some((t, kind, pos)) = typo(v, rng) {
                    *v = t;
                    notes.push(format!("typo:{field}:{kind:?}@{pos}").to_lowercase());
                }
            }
        }
    }
    if rng.gen_bool(cfg.date_error_rate) {
        let d = r.birth_date;
        if let (Some(m), Some(day)) = (d.month, d.day) {
            if day <= 12 && day != m {
                if let Ok(t) = PartialDate::new(d.year, Some(day), Some(m)) {
                    r.birth_date = t;
                    notes.push("date:dayMonthTransposed".to_string());
                }
            }
        }
    }
    macro_rules! blank {
        ($name:literal, $field:expr) => {
            if $field.is_some() && rng.gen_bool(cfg.missing_rate) {
                $field = None;
                notes.push(concat!("missing:", $name).to_string());
            }
        };
    }
    blank!("postalCode", r.postal_code);
    blank!("city", r.city);
    blank!("street", r.street);
    blank!("houseNumber", r.house_number);
    blank!("birthPlace", r.birth_place);
    blank!("nationality", r.nationality);
    blank!("kvnr", r.kvnr);
    if r.sex != Sex::Unknown && rng.gen_bool(cfg.missing_rate) {
        r.sex = Sex::Unknown;
        notes.push("missing:sex".to_string());
    }
    (r, notes)
}
