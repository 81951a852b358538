use crypto_box::{PublicKey, SecretKey};
use rand::rngs::OsRng;

use super::{DerivedPseudonym, RegistryError};

/// Anonymous public-key encryption of a pseudonym for its recipient. Each
/// call uses a fresh ephemeral key, so equal inputs give distinct blobs.
pub fn seal_pseudonym(p: &DerivedPseudonym, recipient_public_key: &[u8]) -> Result<Vec<u8>, RegistryError> {
    let bytes: [u8; 32] = recipient_public_key.try_into().map_err(|_| RegistryError::InvalidKey)?;
    let pk = PublicKey::from(bytes);
    let plain = serde_json::to_vec(p).expect("pseudonym serializes");
    pk.seal(&mut OsRng, &plain).map_err(|_| RegistryError::InvalidKey)
}

pub fn open_sealed_pseudonym(blob: &[u8], secret: &SecretKey) -> Result<DerivedPseudonym, RegistryError> {
    let plain = secret.unseal(blob).map_err(|_| RegistryError::OpenFailed)?;
    serde_json::from_slice(&plain).map_err(|_| RegistryError::OpenFailed)
}
