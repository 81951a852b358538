use std::collections::BTreeSet;
use std::fmt;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::keys::{hmac_sha256, KeyRing};
use super::CodecError;

const PAD: char = '_';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Hardening {
    #[default]
    None,
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BloomParams {
    pub m_bits: usize,
    pub k_hashes: u32,
    #[serde(default = "default_q")]
    pub q_gram_size: usize,
    #[serde(default)]
    pub padding: bool,
    pub key_id: String,
    #[serde(default)]
    pub hardening: Hardening,
}

fn default_q() -> usize {
    2
}

impl BloomParams {
    /// m = 1024, k = 8, bigrams, no padding, no hardening.
    pub fn new(key_id: &str) -> Self {
        BloomParams {
            m_bits: 1024,
            k_hashes: 8,
            q_gram_size: 2,
            padding: false,
            key_id: key_id.to_string(),
            hardening: Hardening::None,
        }
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.k_hashes < 1 {
            return Err(CodecError::InvalidParams("kHashes must be >= 1".into()));
        }
        if self.m_bits < 64 {
            return Err(CodecError::InvalidParams("mBits must be >= 64".into()));
        }
        if !(1..=3).contains(&self.q_gram_size) {
            return Err(CodecError::InvalidParams("qGramSize must be 1, 2 or 3".into()));
        }
        Ok(())
    }

    /// Hex digest of the canonical JSON form (first 16 bytes of SHA-256).
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("params serialize");
        hex::encode(&Sha256::digest(&json)[..16])
    }

    pub fn encoded_len(&self) -> usize {
        match self.hardening {
            Hardening::None => self.m_bits,
            Hardening::Balanced => 2 * self.m_bits,
        }
    }
}

/// Overlapping q-grams in order of occurrence. Inputs shorter than `q`
/// (after optional padding) yield themselves as the only gram.
pub fn qgrams(s: &str, q: usize, padding: bool) -> Vec<String> {
    let mut chars: Vec<char> = s.chars().collect();
    if padding {
        chars.insert(0, PAD);
        chars.push(PAD);
    }
    if chars.len() < q {
        return if chars.is_empty() { Vec::new() } else { vec![chars.into_iter().collect()] };
    }
    chars.windows(q).map(|w| w.iter().collect()).collect()
}

/// Dice coefficient of the q-gram sets of two strings.
pub fn qgram_dice(a: &str, b: &str, q: usize, padding: bool) -> f64 {
    let a: BTreeSet<String> = qgrams(a, q, padding).into_iter().collect();
    let b: BTreeSet<String> = qgrams(b, q, padding).into_iter().collect();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * a.intersection(&b).count() as f64 / (a.len() + b.len()) as f64
}

/// Fixed-length bit vector.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitVector {
    words: Vec<u64>,
    len: usize,
}

impl BitVector {
    pub fn zeros(len: usize) -> Self {
        BitVector { words: vec![0; len.div_ceil(64)], len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn set(&mut self, i: usize) {
        debug_assert!(i < self.len);
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn and_count(&self, other: &BitVector) -> usize {
        self.words.iter().zip(&other.words).map(|(a, b)| (a & b).count_ones() as usize).sum()
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(|&i| self.get(i))
    }

    /// Little-endian byte image, `ceil(len / 8)` bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        out.truncate(self.len.div_ceil(8));
        out
    }

    pub fn from_bytes(bytes: &[u8], len: usize) -> Result<Self, CodecError> {
        if bytes.len() != len.div_ceil(8) {
            return Err(CodecError::Malformed("bit length does not match payload".into()));
        }
        let mut v = BitVector::zeros(len);
        for (i, chunk) in bytes.chunks(8).enumerate() {
            let mut w = [0u8; 8];
            w[..chunk.len()].copy_from_slice(chunk);
            v.words[i] = u64::from_le_bytes(w);
        }
        if !len.is_multiple_of(64) && v.words.last().is_some_and(|w| w >> (len % 64) != 0) {
            return Err(CodecError::Malformed("bits set beyond length".into()));
        }
        Ok(v)
    }
}

impl fmt::Debug for BitVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitVector({} of {} set)", self.count_ones(), self.len)
    }
}

/// A Bloom-filter encoding tied to the parameters that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BloomEncoding {
    pub bits: BitVector,
    pub params_fingerprint: String,
    pub hardened: bool,
}

impl BloomEncoding {
    /// `bf1:<fingerprint>:<0|1 hardened>:<bit length>:<base64 bits>`.
    pub fn to_wire(&self) -> String {
        format!(
            "bf1:{}:{}:{}:{}",
            self.params_fingerprint,
            u8::from(self.hardened),
            self.bits.len(),
            B64.encode(self.bits.to_bytes())
        )
    }

    pub fn from_wire(s: &str) -> Result<Self, CodecError> {
        let bad = |m: &str| CodecError::Malformed(m.to_string());
        let mut parts = s.split(':');
        if parts.next() != Some("bf1") {
            return Err(bad("unknown header"));
        }
        let fp = parts.next().ok_or_else(|| bad("missing fingerprint"))?;
        let hardened = match parts.next() {
            Some("0") => false,
            Some("1") => true,
            _ => return Err(bad("hardening flag")),
        };
        let len: usize = parts
            .next()
            .and_then(|l| l.parse().ok())
            .ok_or_else(|| bad("bit length"))?;
        let payload = B64
            .decode(parts.next().ok_or_else(|| bad("missing payload"))?)
            .map_err(|e| CodecError::Malformed(e.to_string()))?;
        if parts.next().is_some() {
            return Err(bad("trailing fields"));
        }
        Ok(BloomEncoding {
            bits: BitVector::from_bytes(&payload, len)?,
            params_fingerprint: fp.to_string(),
            hardened,
        })
    }
}

impl Serialize for BloomEncoding {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_wire())
    }
}

impl<'de> Deserialize<'de> for BloomEncoding {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        BloomEncoding::from_wire(&s).map_err(serde::de::Error::custom)
    }
}

/// `2|a ∧ b| / (|a| + |b|)`; two empty filters count as identical.
pub fn dice_similarity(a: &BloomEncoding, b: &BloomEncoding) -> Result<f64, CodecError> {
    if a.params_fingerprint != b.params_fingerprint
        || a.hardened != b.hardened
        || a.bits.len() != b.bits.len()
    {
        return Err(CodecError::ParamsMismatch);
    }
    let total = a.bits.count_ones() + b.bits.count_ones();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * a.bits.and_count(&b.bits) as f64 / total as f64)
}

/// Encoder bound to one parameter set and its resolved key.
#[derive(Debug, Clone)]
pub struct BloomEncoder {
    params: BloomParams,
    fingerprint: String,
    key: [u8; 32],
    // Output position j takes bit permutation[j] of `bits ++ !bits`.
    permutation: Option<Vec<u32>>,
}

impl BloomEncoder {
    pub fn new(params: BloomParams, keys: &KeyRing) -> Result<Self, CodecError> {
        params.validate()?;
        let secret = keys.get(&params.key_id)?;
        let key = secret.derive("bloom-positions");
        let permutation = match params.hardening {
            Hardening::None => None,
            Hardening::Balanced => {
                let seed = hmac_sha256(
                    &secret.derive("bloom-balance-permutation"),
                    &[&(params.m_bits as u64).to_be_bytes()],
                );
                let mut perm: Vec<u32> = (0..2 * params.m_bits as u32).collect();
                perm.shuffle(&mut ChaCha20Rng::from_seed(seed));
                Some(perm)
            }
        };
        Ok(BloomEncoder { fingerprint: params.fingerprint(), params, key, permutation })
    }

    pub fn params(&self) -> &BloomParams {
        &self.params
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Bit positions for one q-gram of field `field`: `k` independent keyed
    /// PRF outputs, domain-separated by the hash index.
    fn positions(&self, field: u32, gram: &str) -> impl Iterator<Item = usize> + '_ {
        let gram = gram.as_bytes().to_vec();
        (0..self.params.k_hashes).map(move |i| {
            let h = hmac_sha256(&self.key, &[&field.to_be_bytes(), &i.to_be_bytes(), &gram]);
            let v = u64::from_be_bytes(h[..8].try_into().expect("8 bytes"));
            (v % self.params.m_bits as u64) as usize
        })
    }

    /// Encodes the q-grams of all `fields` into one filter.
    pub fn encode<S: AsRef<str>>(&self, fields: &[S]) -> Result<BloomEncoding, CodecError> {
        if fields.iter().all(|f| f.as_ref().is_empty()) {
            return Err(CodecError::EmptyFields);
        }
        let mut bits = BitVector::zeros(self.params.m_bits);
        for (fi, field) in fields.iter().enumerate() {
            for gram in qgrams(field.as_ref(), self.params.q_gram_size, self.params.padding) {
                for pos in self.positions(fi as u32, &gram) {
                    bits.set(pos);
                }
            }
        }
        let (bits, hardened) = match &self.permutation {
            None => (bits, false),
            Some(perm) => {
                let m = self.params.m_bits;
                let mut out = BitVector::zeros(2 * m);
                for (j, &src) in perm.iter().enumerate() {
                    let src = src as usize;
                    let bit = if src < m { bits.get(src) } else { !bits.get(src - m) };
                    if bit {
                        out.set(j);
                    }
                }
                (out, true)
            }
        };
        Ok(BloomEncoding { bits, params_fingerprint: self.fingerprint.clone(), hardened })
    }
}
