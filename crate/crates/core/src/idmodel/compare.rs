//! String and date comparators.

use serde::{Deserialize, Serialize};

use super::PartialDate;

/// Unit-cost edit distance (insert, delete, substitute) over chars.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - d(a, b) / max(|a|, |b|)`, with two empty strings counting as equal.
pub fn levenshtein_similarity(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / longest as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Agreement {
    Agree,
    Disagree,
    Unknown,
}

impl Agreement {
    fn of<T: PartialEq>(a: Option<T>, b: Option<T>) -> Self {
        match (a, b) {
            (Some(x), Some(y)) if x == y => Agreement::Agree,
            (Some(_), Some(_)) => Agreement::Disagree,
            _ => Agreement::Unknown,
        }
    }
}

/// Per-component agreement of two partial dates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateAgreement {
    pub year: Agreement,
    pub month: Agreement,
    pub day: Agreement,
}

impl DateAgreement {
    /// Share of known components that agree, `None` when nothing is known.
    pub fn similarity(&self) -> Option<f64> {
        let parts = [self.year, self.month, self.day];
        let known = parts.iter().filter(|p| **p != Agreement::Unknown).count();
        if known == 0 {
            return None;
        }
        let agree = parts.iter().filter(|p| **p == Agreement::Agree).count();
        Some(agree as f64 / known as f64)
    }
}

/// Missing components on either side are `Unknown`, never a disagreement.
pub fn compare_dates(a: &PartialDate, b: &PartialDate) -> DateAgreement {
    DateAgreement {
        year: Agreement::of(Some(a.year), Some(b.year)),
        month: Agreement::of(a.month, b.month),
        day: Agreement::of(a.day, b.day),
    }
}
