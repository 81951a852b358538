//! Identity data model: raw and normalized identity records, the
//! normalization pipeline, phonetic codes, comparators and KVNR checks.

mod compare;
pub mod csv;
mod kvnr;
mod phonetic;

use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub use compare::{compare_dates, levenshtein, levenshtein_similarity, Agreement, DateAgreement};
pub use kvnr::{validate_kvnr, ErsatzCategory, KvnrKind, KvnrStatus};
pub use phonetic::cologne_phonetic;

pub const MIN_BIRTH_YEAR: i32 = 1850;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdentityError {
    #[error("record {0}: name fields are empty after normalization")]
    EmptyIdentity(String),
    #[error("invalid date {0:?}: {1}")]
    InvalidDate(String, &'static str),
    #[error("invalid sex code {0:?}")]
    InvalidSex(String),
    #[error("record id must not be empty")]
    MissingRecordId,
    #[error("duplicate record id {0}")]
    DuplicateRecordId(String),
    #[error("csv: {0}")]
    Csv(String),
}

impl IdentityError {
    pub fn code(&self) -> &'static str {
        match self {
            IdentityError::EmptyIdentity(_) => "EMPTY_IDENTITY",
            IdentityError::InvalidDate(..) => "INVALID_DATE",
            IdentityError::InvalidSex(_) => "INVALID_SEX",
            IdentityError::MissingRecordId => "MISSING_RECORD_ID",
            IdentityError::DuplicateRecordId(_) => "DUPLICATE_RECORD_ID",
            IdentityError::Csv(_) => "CSV",
        }
    }
}

/// A date of birth where only the year is mandatory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PartialDate {
    pub year: i32,
    pub month: Option<u32>,
    pub day: Option<u32>,
}

impl PartialDate {
    pub fn new(year: i32, month: Option<u32>, day: Option<u32>) -> Result<Self, IdentityError> {
        let d = PartialDate { year, month, day };
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<(), IdentityError> {
        let err = |why| Err(IdentityError::InvalidDate(self.to_string(), why));
        if self.year < MIN_BIRTH_YEAR || self.year > Utc::now().year() {
            return err("year out of range");
        }
        match (self.month, self.day) {
            (None, Some(_)) => err("day without month"),
            (Some(m), _) if !(1..=12).contains(&m) => err("month out of range"),
            (Some(m), Some(d)) if NaiveDate::from_ymd_opt(self.year, m, d).is_none() => {
                err("no such day")
            }
            _ => Ok(()),
        }
    }

    /// Digits only, e.g. `19800502`, used as a q-gram source.
    pub fn compact(&self) -> String {
        let mut s = format!("{:04}", self.year);
        if let Some(m) = self.month {
            s.push_str(&format!("{m:02}"));
            if let Some(d) = self.day {
                s.push_str(&format!("{d:02}"));
            }
        }
        s
    }

    pub fn to_naive(&self) -> Option<NaiveDate> {
        NaiveDate::from_ymd_opt(self.year, self.month?, self.day?)
    }
}

impl fmt::Display for PartialDate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}", self.year)?;
        if let Some(m) = self.month {
            write!(f, "-{m:02}")?;
            if let Some(d) = self.day {
                write!(f, "-{d:02}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for PartialDate {
    type Err = IdentityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |why| IdentityError::InvalidDate(s.to_string(), why);
        let mut parts = s.trim().split('-');
        let num = |p: Option<&str>, width: usize| -> Result<Option<u32>, IdentityError> {
            match p {
                None => Ok(None),
                Some(p) if p.len() == width && p.bytes().all(|b| b.is_ascii_digit()) => {
                    Ok(Some(p.parse().map_err(|_| bad("not a number"))?))
                }
                Some(_) => Err(bad("expected YYYY[-MM[-DD]]")),
            }
        };
        let year = num(parts.next(), 4)?.ok_or_else(|| bad("missing year"))? as i32;
        let month = num(parts.next(), 2)?;
        let day = num(parts.next(), 2)?;
        if parts.next().is_some() {
            return Err(bad("expected YYYY[-MM[-DD]]"));
        }
        PartialDate::new(year, month, day)
    }
}

impl Serialize for PartialDate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PartialDate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Sex {
    #[serde(rename = "M")]
    Male,
    #[serde(rename = "F")]
    Female,
    #[serde(rename = "X")]
    Diverse,
    #[default]
    #[serde(rename = "U")]
    Unknown,
}

impl Sex {
    pub fn code(self) -> &'static str {
        match self {
            Sex::Male => "M",
            Sex::Female => "F",
            Sex::Diverse => "X",
            Sex::Unknown => "U",
        }
    }
}

impl FromStr for Sex {
    type Err = IdentityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "M" | "m" => Ok(Sex::Male),
            "F" | "f" | "W" | "w" => Ok(Sex::Female),
            "X" | "x" | "D" | "d" => Ok(Sex::Diverse),
            "U" | "u" | "" => Ok(Sex::Unknown),
            other => Err(IdentityError::InvalidSex(other.to_string())),
        }
    }
}

/// Identifying data as submitted by a site.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct IdentityRecord {
    pub record_id: String,
    pub first_name: String,
    pub last_name: String,
    #[serde(default)]
    pub former_names: Vec<String>,
    pub birth_date: PartialDate,
    #[serde(default)]
    pub sex: Sex,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nationality: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub street: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub house_number: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub postal_code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub city: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub birth_place: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kvnr: Option<String>,
}

impl IdentityRecord {
    /// Minimal record with names and birth date; all optional fields empty.
    pub fn new(record_id: &str, first_name: &str, last_name: &str, birth_date: PartialDate) -> Self {
        IdentityRecord {
            record_id: record_id.to_string(),
            first_name: first_name.to_string(),
            last_name: last_name.to_string(),
            former_names: Vec::new(),
            birth_date,
            sex: Sex::Unknown,
            nationality: None,
            street: None,
            house_number: None,
            postal_code: None,
            city: None,
            birth_place: None,
            kvnr: None,
        }
    }

    /// Every free-text value in the record, for plaintext scans.
    pub fn text_values(&self) -> Vec<&str> {
        let mut v = vec![self.first_name.as_str(), self.last_name.as_str()];
        v.extend(self.former_names.iter().map(String::as_str));
        v.extend(
            [
                &self.nationality,
                &self.street,
                &self.house_number,
                &self.postal_code,
                &self.city,
                &self.birth_place,
                &self.kvnr,
            ]
            .into_iter()
            .flatten()
            .map(String::as_str),
        );
        v
    }
}

/// Canonicalized identity. String fields use only `A-Z`, `0-9`, space and
/// hyphen.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NormalizedIdentity {
    pub source_record_id: String,
    pub first_name: String,
    pub last_name: String,
    #[serde(default)]
    pub former_names: Vec<String>,
    pub birth_date: PartialDate,
    pub sex: Sex,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nationality: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub street: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub house_number: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub postal_code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub city: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub birth_place: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kvnr: Option<String>,
    pub phonetic_first_name: String,
    pub phonetic_last_name: String,
}

impl NormalizedIdentity {
    /// Back to the raw shape; `normalize(n.to_record()) == n`.
    pub fn to_record(&self) -> IdentityRecord {
        IdentityRecord {
            record_id: self.source_record_id.clone(),
            first_name: self.first_name.clone(),
            last_name: self.last_name.clone(),
            former_names: self.former_names.clone(),
            birth_date: self.birth_date,
            sex: self.sex,
            nationality: self.nationality.clone(),
            street: self.street.clone(),
            house_number: self.house_number.clone(),
            postal_code: self.postal_code.clone(),
            city: self.city.clone(),
            birth_place: self.birth_place.clone(),
            kvnr: self.kvnr.clone(),
        }
    }

    /// Equality of the identifying content, ignoring the source record id.
    pub fn same_content(&self, other: &NormalizedIdentity) -> bool {
        let mut a = self.clone();
        a.source_record_id.clone_from(&other.source_record_id);
        a == *other
    }

    pub fn field(&self, field: Field) -> Option<String> {
        let opt = |o: &Option<String>| o.clone();
        match field {
            Field::RecordId => Some(self.source_record_id.clone()),
            Field::FirstName => Some(self.first_name.clone()),
            Field::LastName => Some(self.last_name.clone()),
            Field::FormerName => self.former_names.first().cloned(),
            Field::BirthDate => Some(self.birth_date.to_string()),
            Field::BirthYear => Some(self.birth_date.year.to_string()),
            Field::BirthMonth => self.birth_date.month.map(|m| format!("{m:02}")),
            Field::BirthDay => self.birth_date.day.map(|d| format!("{d:02}")),
            Field::Sex => match self.sex {
                Sex::Unknown => None,
                s => Some(s.code().to_string()),
            },
            Field::Nationality => opt(&self.nationality),
            Field::Street => opt(&self.street),
            Field::HouseNumber => opt(&self.house_number),
            Field::PostalCode => opt(&self.postal_code),
            Field::City => opt(&self.city),
            Field::BirthPlace => opt(&self.birth_place),
            Field::Kvnr => opt(&self.kvnr),
        }
    }
}

/// Addressable identity attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Field {
    RecordId,
    FirstName,
    LastName,
    FormerName,
    BirthDate,
    BirthYear,
    BirthMonth,
    BirthDay,
    Sex,
    Nationality,
    Street,
    HouseNumber,
    PostalCode,
    City,
    BirthPlace,
    Kvnr,
}

impl Field {
    pub fn name(self) -> &'static str {
        match self {
            Field::RecordId => "recordId",
            Field::FirstName => "firstName",
            Field::LastName => "lastName",
            Field::FormerName => "formerName",
            Field::BirthDate => "birthDate",
            Field::BirthYear => "birthYear",
            Field::BirthMonth => "birthMonth",
            Field::BirthDay => "birthDay",
            Field::Sex => "sex",
            Field::Nationality => "nationality",
            Field::Street => "street",
            Field::HouseNumber => "houseNumber",
            Field::PostalCode => "postalCode",
            Field::City => "city",
            Field::BirthPlace => "birthPlace",
            Field::Kvnr => "kvnr",
        }
    }
}

fn push_mapped(out: &mut String, ch: char) {
    let mapped = match ch {
        'Ä' | 'ä' => "AE",
        'Ö' | 'ö' => "OE",
        'Ü' | 'ü' => "UE",
        'ß' | 'ẞ' => "SS",
        'Æ' | 'æ' => "AE",
        'Œ' | 'œ' => "OE",
        'Ø' | 'ø' => "O",
        'Ł' | 'ł' => "L",
        'Đ' | 'đ' => "D",
        'Þ' | 'þ' => "TH",
        _ => "",
    };
    if !mapped.is_empty() {
        out.push_str(mapped);
        return;
    }
    if ch.is_whitespace() {
        out.push(' ');
    } else if matches!(ch, '-' | '‐' | '‑' | '–' | '—') {
        out.push('-');
    } else if ch.is_ascii_alphanumeric() {
        out.push(ch.to_ascii_uppercase());
    } else if !ch.is_ascii() {
        // Strip diacritics: keep the ASCII base of the canonical decomposition.
        for base in std::iter::once(ch).nfd().filter(char::is_ascii_alphanumeric) {
            out.push(base.to_ascii_uppercase());
        }
    }
}

/// Canonical form of one free-text value.
pub fn normalize_text(s: &str) -> String {
    let mut mapped = String::with_capacity(s.len());
    for ch in s.chars() {
        push_mapped(&mut mapped, ch);
    }
    // Collapse whitespace, then glue hyphenated parts together.
    let spaced = mapped.split_whitespace().collect::<Vec<_>>().join(" ");
    let parts: Vec<&str> = spaced
        .split('-')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .collect();
    parts.join("-")
}

fn normalize_opt(s: &Option<String>) -> Option<String> {
    s.as_deref().map(normalize_text).filter(|v| !v.is_empty())
}

/// Uppercases, transliterates umlauts, strips diacritics and punctuation,
/// collapses whitespace and computes the phonetic codes of both names.
pub fn normalize(r: &IdentityRecord) -> Result<NormalizedIdentity, IdentityError> {
    if r.record_id.is_empty() {
        return Err(IdentityError::MissingRecordId);
    }
    r.birth_date.validate()?;
    let first_name = normalize_text(&r.first_name);
    let last_name = normalize_text(&r.last_name);
    if first_name.is_empty() || last_name.is_empty() {
        return Err(IdentityError::EmptyIdentity(r.record_id.clone()));
    }
    Ok(NormalizedIdentity {
        source_record_id: r.record_id.clone(),
        phonetic_first_name: cologne_phonetic(&first_name),
        phonetic_last_name: cologne_phonetic(&last_name),
        first_name,
        last_name,
        former_names: r
            .former_names
            .iter()
            .map(|n| normalize_text(n))
            .filter(|n| !n.is_empty())
            .collect(),
        birth_date: r.birth_date,
        sex: r.sex,
        nationality: normalize_opt(&r.nationality),
        street: normalize_opt(&r.street),
        house_number: normalize_opt(&r.house_number),
        postal_code: normalize_opt(&r.postal_code),
        city: normalize_opt(&r.city),
        birth_place: normalize_opt(&r.birth_place),
        kvnr: normalize_opt(&r.kvnr).map(|k| k.replace([' ', '-'], "")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(first: &str, last: &str) -> IdentityRecord {
        IdentityRecord::new("r1", first, last, "1980-05-02".parse().unwrap())
    }

    fn alphabet_ok(s: &str) -> bool {
        s.chars().all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == ' ' || c == '-')
    }

    #[test]
    fn umlauts_and_case() {
        let n = normalize(&rec("müller", "MAIER")).unwrap();
        assert_eq!(n.first_name, "MUELLER");
        assert_eq!(n.last_name, "MAIER");
        assert_eq!(n.phonetic_last_name, "67");
        assert_eq!(normalize_text("Straße"), "STRASSE");
        assert_eq!(normalize_text("Ölçek"), "OELCEK");
    }

    #[test]
    fn whitespace_and_punctuation() {
        assert_eq!(normalize_text("  de  Vries "), "DE VRIES");
        assert_eq!(normalize_text("O'Brien"), "OBRIEN");
        assert_eq!(normalize_text("Müller - Lüdenscheidt"), "MUELLER-LUEDENSCHEIDT");
        assert_eq!(normalize_text("José-María"), "JOSE-MARIA");
        assert_eq!(normalize_text("Dr. h.c. Łukasz"), "DR HC LUKASZ");
    }

    #[test]
    fn empty_names_are_rejected() {
        let err = normalize(&rec("...", "Meyer")).unwrap_err();
        assert_eq!(err.code(), "EMPTY_IDENTITY");
    }

    #[test]
    fn dates_parse_and_validate() {
        assert_eq!("1980".parse::<PartialDate>().unwrap().month, None);
        assert_eq!("1980-05-02".parse::<PartialDate>().unwrap().to_string(), "1980-05-02");
        assert!("1849-01-01".parse::<PartialDate>().is_err());
        assert!("1980-02-30".parse::<PartialDate>().is_err());
        assert!("1980-13".parse::<PartialDate>().is_err());
        assert!("80-01-01".parse::<PartialDate>().is_err());
        assert!(PartialDate::new(1980, None, Some(3)).is_err());
        assert_eq!("1980-05".parse::<PartialDate>().unwrap().compact(), "198005");
    }

    #[test]
    fn kvnr_is_compacted() {
        let mut r = rec("Anna", "Meyer");
        r.kvnr = Some("a 123456789".into());
        assert_eq!(normalize(&r).unwrap().kvnr.as_deref(), Some("A123456789"));
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(
            first in "[a-zA-ZäöüÄÖÜßéèçñ '.-]{1,16}",
            last in "[a-zA-ZäöüÄÖÜßøłÆ '.-]{1,16}",
            city in proptest::option::of("[a-zäöü ]{0,12}"),
        ) {
            let mut r = rec(&first, &last);
            r.city = city;
            if let Ok(n) = normalize(&r) {
                prop_assert!(alphabet_ok(&n.first_name) && alphabet_ok(&n.last_name));
                prop_assert!(n.city.as_deref().is_none_or(alphabet_ok));
                let again = normalize(&n.to_record()).unwrap();
                prop_assert_eq!(again, n);
            }
        }
    }
}
