//! Control numbers: 22 one-way hashed identity components, optionally
//! wrapped in a reversible keyed layer (site stage) and re-keyable to a
//! project layer for cross-site comparison.

use aes::cipher::{BlockDecrypt, BlockEncrypt, KeyInit};
use aes::Aes256;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::keys::{hmac_sha256, Secret};
use super::CodecError;
use crate::idmodel::{cologne_phonetic, NormalizedIdentity, Sex};

pub const TOKEN_WIDTH: usize = 16;
pub type Token = [u8; TOKEN_WIDTH];

/// Marks a component whose source field is absent.
pub const EMPTY_TOKEN: Token = [0u8; TOKEN_WIDTH];

/// Canonical component order. The birth name is the first former name, the
/// former surname the second one.
pub const CONTROL_COMPONENTS: [&str; 22] = [
    "firstNameToken1",
    "firstNameToken2",
    "surnameToken1",
    "surnameToken2",
    "birthNameToken1",
    "birthNameToken2",
    "phoneticFirstNameToken1",
    "phoneticSurnameToken1",
    "phoneticBirthNameToken1",
    "birthDay",
    "birthMonth",
    "birthYear",
    "sex",
    "postalCode",
    "city",
    "street",
    "firstNameInitial",
    "surnameInitial",
    "birthNameInitial",
    "formerSurnameToken1",
    "phoneticFormerSurnameToken1",
    "fullNameDigest",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    Stage1,
    Stage2,
    Project,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ControlNumberSet {
    #[serde(with = "token_list")]
    pub components: Vec<Token>,
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_id: Option<String>,
    /// Integrity tag over the keyed layer; absent for stage 1.
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_hex")]
    pub tag: Option<Token>,
}

fn tokens(s: &str) -> Vec<&str> {
    s.split([' ', '-']).filter(|t| !t.is_empty()).collect()
}

fn nth(s: Option<&str>, n: usize) -> Option<String> {
    s.and_then(|s| tokens(s).get(n).map(|t| t.to_string()))
}

fn component_values(n: &NormalizedIdentity) -> [Option<String>; 22] {
    let first = Some(n.first_name.as_str());
    let last = Some(n.last_name.as_str());
    let birth = n.former_names.first().map(String::as_str);
    let former = n.former_names.get(1).map(String::as_str);
    let phon = |s: Option<String>| s.map(|t| cologne_phonetic(&t)).filter(|c| !c.is_empty());
    let initial = |s: Option<&str>| s.and_then(|s| s.chars().next()).map(String::from);
    [
        nth(first, 0),
        nth(first, 1),
        nth(last, 0),
        nth(last, 1),
        nth(birth, 0),
        nth(birth, 1),
        phon(nth(first, 0)),
        phon(nth(last, 0)),
        phon(nth(birth, 0)),
        n.birth_date.day.map(|d| d.to_string()),
        n.birth_date.month.map(|m| m.to_string()),
        Some(n.birth_date.year.to_string()),
        (n.sex != Sex::Unknown).then(|| n.sex.code().to_string()),
        n.postal_code.clone(),
        n.city.clone(),
        n.street.clone(),
        initial(first),
        initial(last),
        initial(birth),
        nth(former, 0),
        phon(nth(former, 0)),
        Some(format!("{} {}", n.first_name, n.last_name)),
    ]
}

/// Stage-1 control numbers: every component through one fixed unkeyed
/// one-way hash (SHA-256, truncated), missing fields as [`EMPTY_TOKEN`].
pub fn derive_control_numbers(n: &NormalizedIdentity) -> ControlNumberSet {
    let components = component_values(n)
        .into_iter()
        .enumerate()
        .map(|(i, v)| match v {
            None => EMPTY_TOKEN,
            Some(v) => {
                let mut h = Sha256::new();
                h.update(b"linkwerk-control-number-v1");
                h.update([i as u8]);
                h.update(v.as_bytes());
                h.finalize()[..TOKEN_WIDTH].try_into().expect("16 bytes")
            }
        })
        .collect();
    ControlNumberSet { components, stage: Stage::Stage1, key_id: None, tag: None }
}

struct Layer {
    cipher: Aes256,
    mac_key: [u8; 32],
    key_id: String,
}

impl Layer {
    fn new(key: &Secret, purpose: &str) -> Self {
        Layer {
            cipher: Aes256::new(&key.derive(&format!("control-{purpose}-enc")).into()),
            mac_key: key.derive(&format!("control-{purpose}-mac")),
            key_id: key.id().to_string(),
        }
    }

    fn tag(&self, stage: Stage, comps: &[Token]) -> Token {
        let stage_byte = [stage as u8];
        let mut parts: Vec<&[u8]> = vec![&stage_byte];
        parts.extend(comps.iter().map(|c| c.as_slice()));
        hmac_sha256(&self.mac_key, &parts)[..TOKEN_WIDTH].try_into().expect("16 bytes")
    }

    fn wrap(&self, plain: &[Token], stage: Stage) -> ControlNumberSet {
        let components: Vec<Token> = plain
            .iter()
            .map(|t| {
                let mut block = (*t).into();
                self.cipher.encrypt_block(&mut block);
                block.into()
            })
            .collect();
        let tag = self.tag(stage, &components);
        ControlNumberSet { components, stage, key_id: Some(self.key_id.clone()), tag: Some(tag) }
    }

    fn unwrap(&self, c: &ControlNumberSet) -> Result<Vec<Token>, CodecError> {
        if c.tag != Some(self.tag(c.stage, &c.components)) {
            return Err(CodecError::WrongKey);
        }
        Ok(c.components
            .iter()
            .map(|t| {
                let mut block = (*t).into();
                self.cipher.decrypt_block(&mut block);
                block.into()
            })
            .collect())
    }
}

impl ControlNumberSet {
    fn expect(&self, stage: Stage) -> Result<(), CodecError> {
        if self.stage != stage {
            return Err(CodecError::Stage { expected: stage, found: self.stage });
        }
        if self.components.len() != CONTROL_COMPONENTS.len() {
            return Err(CodecError::Malformed("expected 22 components".into()));
        }
        Ok(())
    }

    /// Site-specific reversible layer: AES-256 as a keyed permutation of
    /// each 16-byte token, plus an integrity tag.
    pub fn encrypt_stage2(&self, site_key: &Secret) -> Result<ControlNumberSet, CodecError> {
        self.expect(Stage::Stage1)?;
        Ok(Layer::new(site_key, "site").wrap(&self.components, Stage::Stage2))
    }

    pub fn decrypt_stage2(&self, site_key: &Secret) -> Result<ControlNumberSet, CodecError> {
        self.expect(Stage::Stage2)?;
        let components = Layer::new(site_key, "site").unwrap(self)?;
        Ok(ControlNumberSet { components, stage: Stage::Stage1, key_id: None, tag: None })
    }

    /// Removes the site layer and applies the project layer.
    pub fn reencrypt_to_project(
        &self,
        site_key: &Secret,
        project_key: &Secret,
    ) -> Result<ControlNumberSet, CodecError> {
        self.expect(Stage::Stage2)?;
        let plain = Layer::new(site_key, "site").unwrap(self)?;
        Ok(Layer::new(project_key, "project").wrap(&plain, Stage::Project))
    }

    /// Indices of components that differ.
    pub fn diff(&self, other: &ControlNumberSet) -> Vec<usize> {
        (0..self.components.len().min(other.components.len()))
            .filter(|&i| self.components[i] != other.components[i])
            .collect()
    }
}

mod token_list {
    use super::Token;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[Token], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(hex::encode))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Token>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|h| {
                let bytes = hex::decode(h).map_err(serde::de::Error::custom)?;
                Token::try_from(bytes.as_slice()).map_err(serde::de::Error::custom)
            })
            .collect()
    }
}

mod opt_hex {
    use super::Token;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Token>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(t) => s.serialize_str(&hex::encode(t)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Token>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|h| {
                let bytes = hex::decode(&h).map_err(serde::de::Error::custom)?;
                Token::try_from(bytes.as_slice()).map_err(serde::de::Error::custom)
            })
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::idmodel::{normalize, IdentityRecord};

    fn person(first: &str, last: &str, plz: Option<&str>) -> NormalizedIdentity {
        let mut r = IdentityRecord::new("r", first, last, "1980-05-02".parse().unwrap());
        r.postal_code = plz.map(str::to_string);
        r.sex = Sex::Female;
        normalize(&r).unwrap()
    }

    fn key(id: &str, b: u8) -> Secret {
        Secret::new(id, vec![b; 32])
    }

    #[test]
    fn stage1_is_deterministic_with_22_components() {
        let a = derive_control_numbers(&person("Anna", "Maier", Some("28359")));
        let b = derive_control_numbers(&person("ANNA", "maier", Some("28359")));
        assert_eq!(a, b);
        assert_eq!(a.components.len(), 22);
        assert_eq!(a.stage, Stage::Stage1);
    }

    #[test]
    fn postal_code_only_changes_its_component() {
        let a = derive_control_numbers(&person("Anna", "Maier", Some("28359")));
        let b = derive_control_numbers(&person("Anna", "Maier", Some("28195")));
        let plz = CONTROL_COMPONENTS.iter().position(|c| *c == "postalCode").unwrap();
        assert_eq!(a.diff(&b), vec![plz]);
    }

    #[test]
    fn missing_fields_are_empty_tokens() {
        let a = derive_control_numbers(&person("Anna", "Maier", None));
        for name in ["postalCode", "city", "street", "birthNameToken1", "formerSurnameToken1"] {
            let i = CONTROL_COMPONENTS.iter().position(|c| *c == name).unwrap();
            assert_eq!(a.components[i], EMPTY_TOKEN, "{name}");
        }
        let i = CONTROL_COMPONENTS.iter().position(|c| *c == "surnameToken1").unwrap();
        assert_ne!(a.components[i], EMPTY_TOKEN);
    }

    #[test]
    fn stage2_round_trip_and_stage_checks() {
        let s1 = derive_control_numbers(&person("Anna", "Maier", Some("28359")));
        let k = key("site-a", 1);
        let s2 = s1.encrypt_stage2(&k).unwrap();
        assert_eq!(s2.stage, Stage::Stage2);
        assert_eq!(s2.key_id.as_deref(), Some("site-a"));
        assert_eq!(s2.decrypt_stage2(&k).unwrap(), s1);
        assert_eq!(s2.encrypt_stage2(&k).unwrap_err().code(), "STAGE_ERROR");
        assert_eq!(s2.decrypt_stage2(&key("site-b", 2)).unwrap_err(), CodecError::WrongKey);
        let p = s2.reencrypt_to_project(&k, &key("proj", 9)).unwrap();
        assert_eq!(
            p.reencrypt_to_project(&k, &key("proj", 9)).unwrap_err().code(),
            "STAGE_ERROR"
        );
    }

    #[test]
    fn equal_components_encrypt_equally() {
        let s1 = derive_control_numbers(&person("Anna", "Maier", None));
        let s2 = s1.encrypt_stage2(&key("site-a", 1)).unwrap();
        // All EMPTY components map to the same ciphertext.
        let empties: Vec<_> =
            (0..22).filter(|&i| s1.components[i] == EMPTY_TOKEN).map(|i| s2.components[i]).collect();
        assert!(empties.len() > 2);
        assert!(empties.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn cross_site_project_equality() {
        let (ka, kb, kp) = (key("site-a", 1), key("site-b", 2), key("proj", 3));
        let p = person("Anna", "Maier", Some("28359"));
        let at_a = derive_control_numbers(&p).encrypt_stage2(&ka).unwrap();
        let at_b = derive_control_numbers(&p).encrypt_stage2(&kb).unwrap();
        assert_ne!(at_a.components, at_b.components);
        assert_eq!(
            at_a.reencrypt_to_project(&ka, &kp).unwrap(),
            at_b.reencrypt_to_project(&kb, &kp).unwrap()
        );
        assert_eq!(at_a.reencrypt_to_project(&kb, &kp).unwrap_err().code(), "WRONG_KEY");
    }

    #[test]
    fn serde_round_trip() {
        let s2 = derive_control_numbers(&person("Anna", "Maier", None))
            .encrypt_stage2(&key("site-a", 1))
            .unwrap();
        let json = serde_json::to_string(&s2).unwrap();
        assert_eq!(serde_json::from_str::<ControlNumberSet>(&json).unwrap(), s2);
    }
}
