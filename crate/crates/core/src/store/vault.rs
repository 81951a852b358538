use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::rngs::OsRng;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::StoreError;

/// Ciphertext under a key that exists only in the vault.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SealedBlob {
    pub id: String,
    #[serde(serialize_with = "ser_b64", deserialize_with = "de_b64")]
    pub ciphertext: Vec<u8>,
}

fn ser_b64<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&B64.encode(v))
}

fn de_b64<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
    let s = String::deserialize(d)?;
    B64.decode(s).map_err(serde::de::Error::custom)
}

enum KeySource {
    Os,
    Seeded(Box<ChaCha20Rng>),
}

/// One fresh key per blob; every key is used for exactly one encryption,
/// so a fixed nonce is safe.
pub struct Vault {
    keys: BTreeMap<String, [u8; 32]>,
    path: Option<PathBuf>,
    source: KeySource,
}

impl std::fmt::Debug for Vault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Vault").field("keys", &self.keys.len()).field("path", &self.path).finish()
    }
}

impl Vault {
    pub fn memory(seed: Option<u64>) -> Self {
        let source = seed.map_or(KeySource::Os, |s| KeySource::Seeded(Box::new(ChaCha20Rng::seed_from_u64(s))));
        Vault { keys: BTreeMap::new(), path: None, source }
    }

    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let mut keys = BTreeMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(path)?;
            let raw: BTreeMap<String, String> = serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
                path: path.display().to_string(),
                line: e.line(),
                msg: e.to_string(),
            })?;
            for (id, k) in raw {
                let bytes = B64.decode(&k).ok().and_then(|b| <[u8; 32]>::try_from(b).ok()).ok_or_else(|| {
                    StoreError::Corrupt { path: path.display().to_string(), line: 0, msg: format!("bad key for {id}") }
                })?;
                keys.insert(id, bytes);
            }
        }
        Ok(Vault { keys, path: Some(path.to_path_buf()), source: KeySource::Os })
    }

    fn fill(&mut self, buf: &mut [u8]) {
        match &mut self.source {
            KeySource::Os => OsRng.fill_bytes(buf),
            KeySource::Seeded(r) => r.fill_bytes(buf),
        }
    }

    pub fn seal(&mut self, plaintext: &[u8]) -> Result<SealedBlob, StoreError> {
        let mut id = [0u8; 12];
        let mut key = [0u8; 32];
        self.fill(&mut id);
        self.fill(&mut key);
        let id = hex::encode(id);
        let ciphertext = ChaCha20Poly1305::new(Key::from_slice(&key))
            .encrypt(Nonce::from_slice(&[0u8; 12]), plaintext)
            .expect("in-memory encryption");
        self.keys.insert(id.clone(), key);
        self.persist()?;
        Ok(SealedBlob { id, ciphertext })
    }

    pub fn open_blob(&self, blob: &SealedBlob) -> Result<Vec<u8>, StoreError> {
        let key = self.keys.get(&blob.id).ok_or_else(|| StoreError::Shredded(blob.id.clone()))?;
        ChaCha20Poly1305::new(Key::from_slice(key))
            .decrypt(Nonce::from_slice(&[0u8; 12]), blob.ciphertext.as_slice())
            .map_err(|_| StoreError::Tampered(blob.id.clone()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.keys.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Destroys keys. Their blobs become unreadable everywhere.
    pub fn shred<'a>(&mut self, ids: impl IntoIterator<Item = &'a str>) -> Result<(), StoreError> {
        let mut changed = false;
        for id in ids {
            changed |= self.keys.remove(id).is_some();
        }
        if changed {
            self.persist()?;
        }
        Ok(())
    }

    /// Shreds every key not in `live`. Run after replay, so a crash between
    /// journaling a deletion and shredding its keys is repaired.
    pub fn retain_only(&mut self, live: &std::collections::BTreeSet<String>) -> Result<usize, StoreError> {
        let dead: Vec<String> = self.keys.keys().filter(|k| !live.contains(*k)).cloned().collect();
        self.shred(dead.iter().map(String::as_str))?;
        Ok(dead.len())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let raw: BTreeMap<&String, String> = self.keys.iter().map(|(k, v)| (k, B64.encode(v))).collect();
        serde_json::to_vec(&raw).expect("map")
    }

    fn persist(&self) -> Result<(), StoreError> {
        let Some(path) = &self.path else { return Ok(()) };
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&self.to_bytes())?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| StoreError::Io(e.error))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seal_open_shred() {
        let mut v = Vault::memory(None);
        let b = v.seal(b"MAIER").unwrap();
        assert_eq!(v.open_blob(&b).unwrap(), b"MAIER");
        assert!(!b.ciphertext.windows(5).any(|w| w == b"MAIER"));
        v.shred([b.id.as_str()]).unwrap();
        assert!(matches!(v.open_blob(&b), Err(StoreError::Shredded(_))));
    }

    #[test]
    fn tampering_is_detected() {
        let mut v = Vault::memory(Some(1));
        let mut b = v.seal(b"x").unwrap();
        b.ciphertext[0] ^= 1;
        assert!(matches!(v.open_blob(&b), Err(StoreError::Tampered(_))));
    }

    #[test]
    fn seeded_vaults_repeat() {
        let (mut a, mut b) = (Vault::memory(Some(9)), Vault::memory(Some(9)));
        assert_eq!(a.seal(b"x").unwrap(), b.seal(b"x").unwrap());
    }

    #[test]
    fn file_vault_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.json");
        let mut v = Vault::open(&path).unwrap();
        let keep = v.seal(b"keep").unwrap();
        let drop = v.seal(b"drop").unwrap();
        v.shred([drop.id.as_str()]).unwrap();
        let v = Vault::open(&path).unwrap();
        assert_eq!(v.open_blob(&keep).unwrap(), b"keep");
        assert!(v.open_blob(&drop).is_err());
    }
}
