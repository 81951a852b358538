use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use hmac::{Hmac, Mac};
use rand::RngCore;
use sha2::Sha256;

use super::CodecError;

/// Named secret key material.
#[derive(Clone, PartialEq, Eq)]
pub struct Secret {
    id: String,
    bytes: Vec<u8>,
}

impl Secret {
    pub fn new(id: impl Into<String>, bytes: impl Into<Vec<u8>>) -> Self {
        Secret { id: id.into(), bytes: bytes.into() }
    }

    pub fn generate<R: RngCore>(id: impl Into<String>, rng: &mut R) -> Self {
        let mut bytes = vec![0u8; 32];
        rng.fill_bytes(&mut bytes);
        Secret::new(id, bytes)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Sub-key bound to `label`, so one secret can serve several purposes.
    pub fn derive(&self, label: &str) -> [u8; 32] {
        hmac_sha256(&self.bytes, &[b"linkwerk-kdf-v1", label.as_bytes()])
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Secret").field("id", &self.id).finish_non_exhaustive()
    }
}

pub fn hmac_sha256(key: &[u8], parts: &[&[u8]]) -> [u8; 32] {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    for p in parts {
        mac.update(p);
    }
    mac.finalize().into_bytes().into()
}

/// Read-only key store, loaded from a JSON map `keyId -> base64 secret`.
#[derive(Debug, Clone, Default)]
pub struct KeyRing {
    keys: BTreeMap<String, Secret>,
}

impl KeyRing {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, secret: Secret) {
        self.keys.insert(secret.id.clone(), secret);
    }

    pub fn with(mut self, secret: Secret) -> Self {
        self.insert(secret);
        self
    }

    pub fn get(&self, id: &str) -> Result<&Secret, CodecError> {
        self.keys.get(id).ok_or_else(|| CodecError::KeyNotFound(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.keys.keys().map(String::as_str)
    }

    pub fn from_json(text: &str) -> Result<Self, CodecError> {
        let map: BTreeMap<String, String> =
            serde_json::from_str(text).map_err(|e| CodecError::KeyFile(e.to_string()))?;
        let mut ring = KeyRing::new();
        for (id, b64) in map {
            let bytes = B64
                .decode(b64.trim())
                .map_err(|e| CodecError::KeyFile(format!("{id}: {e}")))?;
            if bytes.len() < 16 {
                return Err(CodecError::KeyFile(format!("{id}: secret shorter than 16 bytes")));
            }
            ring.insert(Secret::new(id, bytes));
        }
        Ok(ring)
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, String> =
            self.keys.iter().map(|(k, v)| (k.as_str(), B64.encode(&v.bytes))).collect();
        serde_json::to_string_pretty(&map).expect("string map serializes")
    }

    pub fn load(path: &Path) -> Result<Self, CodecError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CodecError::KeyFile(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
