//! CSV exchange format for identity records.
//!
//! Header: `record_id,first_name,last_name,former_names,birth_date,sex,
//! nationality,street,house_number,postal_code,city,birth_place,kvnr`.
//! Former names are pipe-separated, dates `YYYY[-MM[-DD]]`, sex `M|F|X|U`.

use std::collections::HashSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{IdentityError, IdentityRecord};

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    record_id: String,
    first_name: String,
    last_name: String,
    former_names: String,
    birth_date: String,
    sex: String,
    nationality: String,
    street: String,
    house_number: String,
    postal_code: String,
    city: String,
    birth_place: String,
    kvnr: String,
}

fn blank_to_none(s: String) -> Option<String> {
    if s.trim().is_empty() {
        None
    } else {
        Some(s)
    }
}

impl TryFrom<Row> for IdentityRecord {
    type Error = IdentityError;

    fn try_from(r: Row) -> Result<Self, Self::Error> {
        if r.record_id.is_empty() {
            return Err(IdentityError::MissingRecordId);
        }
        Ok(IdentityRecord {
            record_id: r.record_id,
            first_name: r.first_name,
            last_name: r.last_name,
            former_names: r
                .former_names
                .split('|')
                .filter(|s| !s.trim().is_empty())
                .map(str::to_string)
                .collect(),
            birth_date: r.birth_date.parse()?,
            sex: r.sex.parse()?,
            nationality: blank_to_none(r.nationality),
            street: blank_to_none(r.street),
            house_number: blank_to_none(r.house_number),
            postal_code: blank_to_none(r.postal_code),
            city: blank_to_none(r.city),
            birth_place: blank_to_none(r.birth_place),
            kvnr: blank_to_none(r.kvnr),
        })
    }
}

impl From<&IdentityRecord> for Row {
    fn from(r: &IdentityRecord) -> Self {
        let s = |o: &Option<String>| o.clone().unwrap_or_default();
        Row {
            record_id: r.record_id.clone(),
            first_name: r.first_name.clone(),
            last_name: r.last_name.clone(),
            former_names: r.former_names.join("|"),
            birth_date: r.birth_date.to_string(),
            sex: r.sex.code().to_string(),
            nationality: s(&r.nationality),
            street: s(&r.street),
            house_number: s(&r.house_number),
            postal_code: s(&r.postal_code),
            city: s(&r.city),
            birth_place: s(&r.birth_place),
            kvnr: s(&r.kvnr),
        }
    }
}

/// Reads identity records; record ids must be unique within the input.
pub fn read_records<R: Read>(input: R) -> Result<Vec<IdentityRecord>, IdentityError> {
    let mut reader = ::csv::Reader::from_reader(input);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| IdentityError::Csv(format!("row {}: {e}", line + 2)))?;
        let rec = IdentityRecord::try_from(row)?;
        if !seen.insert(rec.record_id.clone()) {
            return Err(IdentityError::DuplicateRecordId(rec.record_id));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records<W: Write>(out: W, records: &[IdentityRecord]) -> Result<(), IdentityError> {
    let mut w = ::csv::Writer::from_writer(out);
    for r in records {
        w.serialize(Row::from(r)).map_err(|e| IdentityError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| IdentityError::Csv(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
record_id,first_name,last_name,former_names,birth_date,sex,nationality,street,house_number,postal_code,city,birth_place,kvnr
r1,Anna,Maier,Schulz|Kraus,1980-05-02,F,DE,Hauptstraße,3a,28359,Bremen,Kiel,A123456789
r2,Jörg,Meyer,,1975,M,,,,,,,
";

    #[test]
    fn reads_and_writes_back() {
        let recs = read_records(SAMPLE.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].former_names, vec!["Schulz", "Kraus"]);
        assert_eq!(recs[1].birth_date.month, None);
        assert_eq!(recs[1].city, None);
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), SAMPLE);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dup = format!("{SAMPLE}r1,X,Y,,1990,U,,,,,,,\n");
        assert_eq!(
            read_records(dup.as_bytes()).unwrap_err(),
            IdentityError::DuplicateRecordId("r1".into())
        );
    }

    #[test]
    fn bad_date_is_an_error() {
        let bad = SAMPLE.replace("1975", "19x5");
        assert_eq!(read_records(bad.as_bytes()).unwrap_err().code(), "INVALID_DATE");
    }
}
