//! Cologne phonetics (Kölner Phonetik, Postel 1969).
//!
//! Rule table, applied left to right over the letters A–Z of a normalized
//! token (any other character is skipped):
//!
//! | letter                  | context                                          | code |
//! |-------------------------|--------------------------------------------------|------|
//! | A E I J O U Y           |                                                  | 0    |
//! | H                       |                                                  | –    |
//! | B                       |                                                  | 1    |
//! | P                       | not before H                                     | 1    |
//! | D T                     | not before C S Z                                 | 2    |
//! | F V W                   |                                                  | 3    |
//! | P                       | before H                                         | 3    |
//! | G K Q                   |                                                  | 4    |
//! | C                       | initial, before A H K L O Q R U X                | 4    |
//! | C                       | before A H K O Q U X, not after S Z              | 4    |
//! | X                       | not after C K Q                                  | 48   |
//! | L                       |                                                  | 5    |
//! | M N                     |                                                  | 6    |
//! | R                       |                                                  | 7    |
//! | S Z                     |                                                  | 8    |
//! | C                       | after S Z; initial not before A H K L O Q R U X; | 8    |
//! |                         | not before A H K O Q U X                         |      |
//! | D T                     | before C S Z                                     | 8    |
//! | X                       | after C K Q                                      | 8    |
//!
//! Afterwards runs of equal digits collapse to one (H does not interrupt a
//! run) and every `0` except a leading one is dropped.

/// Cologne phonetic code of `s`. Empty input (or input without letters)
/// yields an empty code.
pub fn cologne_phonetic(s: &str) -> String {
    let letters: Vec<u8> = s
        .bytes()
        .map(|b| b.to_ascii_uppercase())
        .filter(u8::is_ascii_uppercase)
        .collect();

    let mut raw: Vec<u8> = Vec::with_capacity(letters.len() + 2);
    for (i, &c) in letters.iter().enumerate() {
        let prev = i.checked_sub(1).map(|j| letters[j]);
        let next = letters.get(i + 1).copied();
        match c {
            b'A' | b'E' | b'I' | b'J' | b'O' | b'U' | b'Y' => raw.push(b'0'),
            b'H' => {}
            b'B' => raw.push(b'1'),
            b'P' => raw.push(if next == Some(b'H') { b'3' } else { b'1' }),
            b'D' | b'T' => {
                raw.push(if matches!(next, Some(b'C' | b'S' | b'Z')) { b'8' } else { b'2' })
            }
            b'F' | b'V' | b'W' => raw.push(b'3'),
            b'G' | b'K' | b'Q' => raw.push(b'4'),
            b'C' => {
                let hard = if i == 0 {
                    matches!(
                        next,
                        Some(b'A' | b'H' | b'K' | b'L' | b'O' | b'Q' | b'R' | b'U' | b'X')
                    )
                } else {
                    !matches!(prev, Some(b'S' | b'Z'))
                        && matches!(next, Some(b'A' | b'H' | b'K' | b'O' | b'Q' | b'U' | b'X'))
                };
                raw.push(if hard { b'4' } else { b'8' });
            }
            b'X' => {
                if !matches!(prev, Some(b'C' | b'K' | b'Q')) {
                    raw.push(b'4');
                }
                raw.push(b'8');
            }
            b'L' => raw.push(b'5'),
            b'M' | b'N' => raw.push(b'6'),
            b'R' => raw.push(b'7'),
            b'S' | b'Z' => raw.push(b'8'),
            _ => {}
        }
    }

    let mut out = String::with_capacity(raw.len());
    let mut last = None;
    for (i, &d) in raw.iter().enumerate() {
        if last == Some(d) {
            continue;
        }
        last = Some(d);
        if d != b'0' || i == 0 {
            out.push(d as char);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maier_family_shares_one_code() {
        assert_eq!(cologne_phonetic("MAIER"), "67");
        assert_eq!(cologne_phonetic("MAYER"), "67");
        assert_eq!(cologne_phonetic("MEYER"), "67");
        assert_eq!(cologne_phonetic("MEIER"), "67");
    }

    #[test]
    fn published_reference_codes() {
        // Reference values from the published rule table.
        assert_eq!(cologne_phonetic("MUELLER-LUEDENSCHEIDT"), "65752682");
        assert_eq!(cologne_phonetic("WIKIPEDIA"), "3412");
        assert_eq!(cologne_phonetic("SCHMIDT"), "862");
        assert_eq!(cologne_phonetic("BRESCHNEW"), "17863");
        assert_eq!(cologne_phonetic("CHRISTIAN"), "47826");
        assert_eq!(cologne_phonetic("XAVER"), "4837");
        assert_eq!(cologne_phonetic("AACHEN"), "046");
    }

    #[test]
    fn empty_and_letterless_input() {
        assert_eq!(cologne_phonetic(""), "");
        assert_eq!(cologne_phonetic("12 - "), "");
    }

    #[test]
    fn h_does_not_break_a_run() {
        // S, C after S, H ignored: one 8.
        assert_eq!(cologne_phonetic("SCH"), "8");
    }
}
