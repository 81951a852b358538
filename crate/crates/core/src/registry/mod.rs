//! Patient list of a trusted third party. Every mutation is journaled as
//! one event; identities are sealed in the vault, so deleting an entry
//! shreds its keys instead of rewriting the journal.

mod seal;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::idmodel::{normalize, validate_kvnr, IdentityError, IdentityRecord, KvnrKind, NormalizedIdentity};
use crate::linkage::{block_key, LinkageConfig, LinkageError, MatchScore, Scorer, Verdict};
use crate::pprl::{hmac_sha256, CodecError, KeyRing};
use crate::pseudonym::{PseudonymCodec, PseudonymError, TokenFormat};
use crate::store::{Clock, JournalEntry, SealedBlob, Store, StoreError};

pub use seal::{open_sealed_pseudonym, seal_pseudonym};

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("KVNR belongs to a different KVNR of the matched patient")]
    KvnrConflictPatient,
    #[error("KVNR is bound to another patient")]
    KvnrConflictOther,
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error("unknown domain {0:?}")]
    UnknownDomain(String),
    #[error("domain {0:?} already registered")]
    DuplicateDomain(String),
    #[error("unknown patient")]
    UnknownPatient,
    #[error("pseudonym not found")]
    NotFound,
    #[error("cannot merge an entry with itself")]
    SelfMerge,
    #[error("actor {0:?} may not perform clearing")]
    Unauthorized(String),
    #[error("invalid subset: {0}")]
    InvalidSubset(String),
    #[error("invalid recipient key")]
    InvalidKey,
    #[error("sealed pseudonym could not be opened")]
    OpenFailed,
    #[error(transparent)]
    Pseudonym(#[from] PseudonymError),
    #[error(transparent)]
    Linkage(#[from] LinkageError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl RegistryError {
    pub fn code(&self) -> &'static str {
        match self {
            RegistryError::KvnrConflictPatient => "KVNR_CONFLICT_PATIENT",
            RegistryError::KvnrConflictOther => "KVNR_CONFLICT_OTHER",
            RegistryError::Identity(e) => e.code(),
            RegistryError::UnknownDomain(_) => "UNKNOWN_DOMAIN",
            RegistryError::DuplicateDomain(_) => "DUPLICATE_DOMAIN",
            RegistryError::UnknownPatient => "UNKNOWN_PATIENT",
            RegistryError::NotFound => "NOT_FOUND",
            RegistryError::SelfMerge => "SELF_MERGE",
            RegistryError::Unauthorized(_) => "UNAUTHORIZED",
            RegistryError::InvalidSubset(_) => "INVALID_SUBSET",
            RegistryError::InvalidKey => "INVALID_KEY",
            RegistryError::OpenFailed => "OPEN_FAILED",
            RegistryError::Pseudonym(_) => "INVALID_PSEUDONYM",
            RegistryError::Linkage(e) => e.code(),
            RegistryError::Codec(e) => e.code(),
            RegistryError::Store(_) => "STORAGE_ERROR",
        }
    }
}

/// Network-wide patient id. Never leaves the registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InternalId(u64);

impl InternalId {
    pub fn value(self) -> u64 {
        self.0
    }
}

impl fmt::Display for InternalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "IDPL-{:012X}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Actor {
    pub name: String,
    pub clearing: bool,
}

impl Actor {
    pub fn clearing(name: &str) -> Self {
        Actor { name: name.into(), clearing: true }
    }

    pub fn plain(name: &str) -> Self {
        Actor { name: name.into(), clearing: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PseudonymDomain {
    pub domain_id: String,
    pub derivation_key_id: String,
    #[serde(default)]
    pub format: TokenFormat,
    /// Site allowed to read identities through this domain's pseudonyms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub owner_site: Option<String>,
}

impl PseudonymDomain {
    pub fn new(domain_id: &str, derivation_key_id: &str) -> Self {
        PseudonymDomain {
            domain_id: domain_id.into(),
            derivation_key_id: derivation_key_id.into(),
            format: TokenFormat::default(),
            owner_site: None,
        }
    }

    pub fn codec(&self, keys: &KeyRing) -> Result<PseudonymCodec, RegistryError> {
        let key = keys.get(&self.derivation_key_id)?.derive(&format!("pseudonym-domain:{}", self.domain_id));
        Ok(PseudonymCodec::new(key, self.format)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DerivedPseudonym {
    pub domain_id: String,
    pub token: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AddOutcome {
    Existing,
    New,
    TentativeNew,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddResult {
    pub pseudonym: DerivedPseudonym,
    pub outcome: AddOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DeleteReason {
    Withdrawal,
    Admin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Tombstone {
    pub tombstone: String,
    pub reason: DeleteReason,
    pub deleted_at: DateTime<Utc>,
}

/// Persisted form of an entry: sealed identities only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EntryRecord {
    pub id: InternalId,
    /// Main identity first.
    pub identities: Vec<SealedBlob>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kvnr_digest: Option<String>,
    pub tentative: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tentative_nearest: Option<InternalId>,
    #[serde(default)]
    pub consent_ids: Vec<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct RegistryState {
    last_id: u64,
    domains: BTreeMap<String, PseudonymDomain>,
    entries: BTreeMap<InternalId, EntryRecord>,
    aliases: BTreeMap<InternalId, InternalId>,
    kvnr_index: BTreeMap<String, InternalId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
enum RegistryEvent {
    DomainRegistered {
        domain: PseudonymDomain,
    },
    PatientAdded {
        id: InternalId,
        identity: SealedBlob,
        #[serde(default)]
        kvnr_digest: Option<String>,
        #[serde(default)]
        tentative_nearest: Option<InternalId>,
        #[serde(default)]
        consent_id: Option<String>,
    },
    PatientMatched {
        id: InternalId,
        #[serde(default)]
        attached: Option<SealedBlob>,
        #[serde(default)]
        kvnr_digest: Option<String>,
        #[serde(default)]
        consent_id: Option<String>,
    },
    PatientsMerged {
        keep: InternalId,
        absorb: InternalId,
        actor: String,
    },
    PatientSplit {
        id: InternalId,
        new_id: InternalId,
        moved: Vec<usize>,
        /// KVNR binding after the split.
        kvnr_to_new: bool,
        actor: String,
    },
    PatientDeleted {
        id: InternalId,
        reason: DeleteReason,
        tombstone: String,
    },
    TentativeResolved {
        id: InternalId,
        actor: String,
    },
}

impl RegistryEvent {
    fn kind(&self) -> &'static str {
        match self {
            RegistryEvent::DomainRegistered { .. } => "DOMAIN_REGISTERED",
            RegistryEvent::PatientAdded { .. } => "PATIENT_ADDED",
            RegistryEvent::PatientMatched { .. } => "PATIENT_MATCHED",
            RegistryEvent::PatientsMerged { .. } => "PATIENTS_MERGED",
            RegistryEvent::PatientSplit { .. } => "PATIENT_SPLIT",
            RegistryEvent::PatientDeleted { .. } => "PATIENT_DELETED",
            RegistryEvent::TentativeResolved { .. } => "TENTATIVE_RESOLVED",
        }
    }
}

/// Externally visible audit record: no internal ids, no identifying data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AuditRecord {
    pub seq: u64,
    pub ts: DateTime<Utc>,
    pub action: String,
    /// Stable opaque reference to the subject entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub other: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RegistryConfig {
    pub linkage: LinkageConfig,
    /// Secret for the KVNR index and audit references.
    pub registry_key_id: String,
}

pub struct Registry {
    cfg: RegistryConfig,
    keys: KeyRing,
    scorer: Scorer,
    store: Store,
    clock: Arc<dyn Clock>,
    state: RegistryState,
    identities: BTreeMap<InternalId, Vec<NormalizedIdentity>>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry").field("entries", &self.state.entries.len()).finish_non_exhaustive()
    }
}

impl Registry {
    /// Replays the store's journal.
    pub fn open(cfg: RegistryConfig, keys: KeyRing, store: Store, clock: Arc<dyn Clock>) -> Result<Self, RegistryError> {
        keys.get(&cfg.registry_key_id)?;
        let scorer = Scorer::new(cfg.linkage.clone(), Some(&keys))?;
        let mut reg = Registry {
            cfg,
            keys,
            scorer,
            store,
            clock,
            state: RegistryState::default(),
            identities: BTreeMap::new(),
        };
        let events: Vec<JournalEntry> = reg.store.journal.entries().to_vec();
        for e in &events {
            let ev: RegistryEvent = serde_json::from_value(serde_json::json!({"type": e.kind, "payload": e.payload}))
                .map_err(StoreError::from)?;
            reg.state.apply(&ev, e.ts);
        }
        let live: BTreeSet<String> =
            reg.state.entries.values().flat_map(|e| e.identities.iter().map(|b| b.id.clone())).collect();
        reg.store.vault.retain_only(&live)?;
        let ids: Vec<InternalId> = reg.state.entries.keys().copied().collect();
        for id in ids {
            reg.refresh(id)?;
        }
        Ok(reg)
    }

    pub fn config(&self) -> &RegistryConfig {
        &self.cfg
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    fn commit(&mut self, ev: RegistryEvent) -> Result<u64, RegistryError> {
        let value = serde_json::to_value(&ev).map_err(StoreError::from)?;
        let payload = value.get("payload").cloned().unwrap_or(serde_json::Value::Null);
        let ts = self.clock.now();
        let seq = self.store.journal.append(ev.kind(), payload, ts)?.seq;
        self.state.apply(&ev, ts);
        Ok(seq)
    }

    fn refresh(&mut self, id: InternalId) -> Result<(), RegistryError> {
        match self.state.entries.get(&id) {
            Some(e) => {
                let ids = e
                    .identities
                    .iter()
                    .map(|b| {
                        let bytes = self.store.vault.open_blob(b)?;
                        Ok(serde_json::from_slice(&bytes).map_err(StoreError::from)?)
                    })
                    .collect::<Result<Vec<NormalizedIdentity>, RegistryError>>()?;
                self.identities.insert(id, ids);
            }
            None => {
                self.identities.remove(&id);
            }
        }
        Ok(())
    }

    fn seal(&mut self, n: &NormalizedIdentity) -> Result<SealedBlob, RegistryError> {
        Ok(self.store.vault.seal(&serde_json::to_vec(n).map_err(StoreError::from)?)?)
    }

    fn secret(&self, label: &str) -> [u8; 32] {
        self.keys.get(&self.cfg.registry_key_id).expect("checked at open").derive(label)
    }

    fn kvnr_digest(&self, kvnr: &str) -> String {
        hex::encode(&hmac_sha256(&self.secret("kvnr-index"), &[kvnr.as_bytes()])[..16])
    }

    fn valid_kvnr_digest(&self, n: &NormalizedIdentity) -> Option<String> {
        let k = n.kvnr.as_deref()?;
        (validate_kvnr(k).kind == KvnrKind::Valid).then(|| self.kvnr_digest(k))
    }

    /// Opaque audit reference for an entry.
    pub fn subject_ref(&self, id: InternalId) -> String {
        hex::encode(&hmac_sha256(&self.secret("audit-subject"), &[&id.0.to_be_bytes()])[..8])
    }

    pub fn register_domain(&mut self, domain: PseudonymDomain) -> Result<(), RegistryError> {
        if self.state.domains.contains_key(&domain.domain_id) {
            return Err(RegistryError::DuplicateDomain(domain.domain_id));
        }
        domain.codec(&self.keys)?;
        self.commit(RegistryEvent::DomainRegistered { domain })?;
        Ok(())
    }

    pub fn domain(&self, domain: &str) -> Result<&PseudonymDomain, RegistryError> {
        self.state.domains.get(domain).ok_or_else(|| RegistryError::UnknownDomain(domain.into()))
    }

    pub fn domains(&self) -> impl Iterator<Item = &PseudonymDomain> {
        self.state.domains.values()
    }

    fn entry_score(&self, id: InternalId, n: &NormalizedIdentity) -> MatchScore {
        self.identities[&id]
            .iter()
            .map(|x| self.scorer.score(n, x))
            .max_by(|a, b| a.total.total_cmp(&b.total))
            .expect("entries hold at least one identity")
    }

    fn shares_block(&self, id: InternalId, n: &NormalizedIdentity) -> bool {
        let blocking = &self.cfg.linkage.blocking;
        blocking.is_empty()
            || self.identities[&id]
                .iter()
                .any(|x| blocking.iter().any(|spec| block_key(x, spec) == block_key(n, spec)))
    }

    /// Best-scoring entry, ties to the lower id.
    fn best_match(&self, n: &NormalizedIdentity) -> Option<(InternalId, MatchScore)> {
        let mut best: Option<(InternalId, MatchScore)> = None;
        for &id in self.state.entries.keys() {
            if !self.shares_block(id, n) {
                continue;
            }
            let s = self.entry_score(id, n);
            if best.as_ref().is_none_or(|(_, b)| s.total > b.total) {
                best = Some((id, s));
            }
        }
        best
    }

    pub fn add_patient(&mut self, identity: &IdentityRecord, domain: &str) -> Result<AddResult, RegistryError> {
        self.add_patient_with_consent(identity, domain, None)
    }

    pub fn add_patient_with_consent(
        &mut self,
        identity: &IdentityRecord,
        domain: &str,
        consent_id: Option<&str>,
    ) -> Result<AddResult, RegistryError> {
        self.domain(domain)?;
        let n = normalize(identity)?;
        let kvnr = self.valid_kvnr_digest(&n);
        let best = self.best_match(&n);
        let verdict = |s: &MatchScore| self.scorer.classify(s).verdict;

        let mut matched = best.as_ref().filter(|(_, s)| verdict(s) == Verdict::Match).map(|(id, _)| *id);
        if let Some(k) = &kvnr {
            if let Some(&bound) = self.state.kvnr_index.get(k) {
                if verdict(&self.entry_score(bound, &n)) == Verdict::Match {
                    matched = Some(bound);
                } else {
                    return Err(RegistryError::KvnrConflictOther);
                }
            }
            if let Some(m) = matched {
                if self.state.entries[&m].kvnr_digest.as_ref().is_some_and(|d| d != k) {
                    return Err(RegistryError::KvnrConflictPatient);
                }
            }
        }
        let consent_id = consent_id.map(String::from);

        let (id, outcome) = if let Some(id) = matched {
            let known = self.identities[&id].iter().any(|x| x.same_content(&n));
            let attached = if known { None } else { Some(self.seal(&n)?) };
            let kvnr_digest = kvnr.filter(|_| self.state.entries[&id].kvnr_digest.is_none());
            self.commit(RegistryEvent::PatientMatched { id, attached, kvnr_digest, consent_id })?;
            (id, AddOutcome::Existing)
        } else {
            let id = InternalId(self.state.last_id + 1);
            let tentative_nearest =
                best.filter(|(_, s)| verdict(s) == Verdict::Possible).map(|(nearest, _)| nearest);
            let outcome = if tentative_nearest.is_some() { AddOutcome::TentativeNew } else { AddOutcome::New };
            let identity = self.seal(&n)?;
            self.commit(RegistryEvent::PatientAdded { id, identity, kvnr_digest: kvnr, tentative_nearest, consent_id })?;
            (id, outcome)
        };
        self.refresh(id)?;
        Ok(AddResult { pseudonym: self.derive_pseudonym(id, domain)?, outcome })
    }

    pub fn derive_pseudonym(&self, id: InternalId, domain: &str) -> Result<DerivedPseudonym, RegistryError> {
        let d = self.domain(domain)?;
        if !self.state.entries.contains_key(&id) {
            return Err(RegistryError::UnknownPatient);
        }
        Ok(DerivedPseudonym { domain_id: d.domain_id.clone(), token: d.codec(&self.keys)?.encode(id.0)? })
    }

    /// Current entry for a pseudonym, following merge aliases.
    pub fn resolve(&self, domain: &str, token: &str) -> Result<InternalId, RegistryError> {
        let raw = self.domain(domain)?.codec(&self.keys)?.decode(token)?;
        let mut id = InternalId(raw);
        while let Some(&next) = self.state.aliases.get(&id) {
            id = next;
        }
        if self.state.entries.contains_key(&id) {
            Ok(id)
        } else {
            Err(RegistryError::NotFound)
        }
    }

    pub fn entry(&self, id: InternalId) -> Result<&EntryRecord, RegistryError> {
        self.state.entries.get(&id).ok_or(RegistryError::UnknownPatient)
    }

    pub fn entries(&self) -> impl Iterator<Item = &EntryRecord> {
        self.state.entries.values()
    }

    pub fn len(&self) -> usize {
        self.state.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.state.entries.is_empty()
    }

    /// Main identity first.
    pub fn identities(&self, id: InternalId) -> Result<&[NormalizedIdentity], RegistryError> {
        self.identities.get(&id).map(Vec::as_slice).ok_or(RegistryError::UnknownPatient)
    }

    pub fn main_identity(&self, id: InternalId) -> Result<&NormalizedIdentity, RegistryError> {
        Ok(&self.identities(id)?[0])
    }

    fn require_clearing(actor: &Actor) -> Result<(), RegistryError> {
        if actor.clearing {
            Ok(())
        } else {
            Err(RegistryError::Unauthorized(actor.name.clone()))
        }
    }

    pub fn merge_patients(&mut self, keep: InternalId, absorb: InternalId, actor: &Actor) -> Result<(), RegistryError> {
        Self::require_clearing(actor)?;
        let (k, a) = (self.entry(keep)?, self.entry(absorb)?);
        if keep == absorb {
            return Err(RegistryError::SelfMerge);
        }
        if let (Some(x), Some(y)) = (&k.kvnr_digest, &a.kvnr_digest) {
            if x != y {
                return Err(RegistryError::KvnrConflictPatient);
            }
        }
        let touched: Vec<InternalId> = self
            .state
            .entries
            .values()
            .filter(|e| matches!(e.tentative_nearest, Some(n) if n == keep || n == absorb))
            .map(|e| e.id)
            .collect();
        self.commit(RegistryEvent::PatientsMerged { keep, absorb, actor: actor.name.clone() })?;
        for id in touched.into_iter().chain([keep, absorb]) {
            self.refresh(id)?;
        }
        Ok(())
    }

    /// Moves the identities at `subset` (indexes into [`Self::identities`])
    /// to a new entry.
    pub fn split_patient(&mut self, id: InternalId, subset: &[usize], actor: &Actor) -> Result<InternalId, RegistryError> {
        Self::require_clearing(actor)?;
        let count = self.identities(id)?.len();
        let moved: BTreeSet<usize> = subset.iter().copied().collect();
        if moved.is_empty() || moved.len() != subset.len() {
            return Err(RegistryError::InvalidSubset("empty or repeated indexes".into()));
        }
        if moved.len() >= count || moved.iter().any(|&i| i >= count) {
            return Err(RegistryError::InvalidSubset("must be a proper subset of the entry's identities".into()));
        }
        let kvnr_to_new = match &self.state.entries[&id].kvnr_digest {
            Some(d) => {
                let ids = &self.identities[&id];
                let holds = |i: usize| self.valid_kvnr_digest(&ids[i]).as_ref() == Some(d);
                !(0..count).any(|i| !moved.contains(&i) && holds(i)) && moved.iter().any(|&i| holds(i))
            }
            None => false,
        };
        let new_id = InternalId(self.state.last_id + 1);
        self.commit(RegistryEvent::PatientSplit {
            id,
            new_id,
            moved: moved.into_iter().collect(),
            kvnr_to_new,
            actor: actor.name.clone(),
        })?;
        self.refresh(id)?;
        self.refresh(new_id)?;
        Ok(new_id)
    }

    /// Clears a tentative flag without merging.
    pub fn resolve_tentative(&mut self, id: InternalId, actor: &Actor) -> Result<(), RegistryError> {
        Self::require_clearing(actor)?;
        self.entry(id)?;
        self.commit(RegistryEvent::TentativeResolved { id, actor: actor.name.clone() })?;
        Ok(())
    }

    pub fn delete_patient(&mut self, id: InternalId, reason: DeleteReason) -> Result<Tombstone, RegistryError> {
        let blobs: Vec<String> = self.entry(id)?.identities.iter().map(|b| b.id.clone()).collect();
        let tombstone = format!("TOMB-{:08}", self.store.journal.last_seq() + 1);
        self.commit(RegistryEvent::PatientDeleted { id, reason, tombstone: tombstone.clone() })?;
        self.store.vault.shred(blobs.iter().map(String::as_str))?;
        self.refresh(id)?;
        let deleted_at = self.store.journal.entries().last().expect("just appended").ts;
        Ok(Tombstone { tombstone, reason, deleted_at })
    }

    /// Audit view of the journal, from sequence number `since` (exclusive).
    pub fn audit(&self, since: u64) -> Vec<AuditRecord> {
        self.store
            .journal
            .since(since)
            .iter()
            .map(|e| {
                let ev: Option<RegistryEvent> =
                    serde_json::from_value(serde_json::json!({"type": e.kind, "payload": e.payload})).ok();
                let mut rec = AuditRecord {
                    seq: e.seq,
                    ts: e.ts,
                    action: e.kind.clone(),
                    subject: None,
                    other: None,
                    actor: None,
                    detail: None,
                };
                match ev {
                    Some(RegistryEvent::DomainRegistered { domain }) => rec.detail = Some(domain.domain_id),
                    Some(RegistryEvent::PatientAdded { id, tentative_nearest, .. }) => {
                        rec.subject = Some(self.subject_ref(id));
                        rec.other = tentative_nearest.map(|n| self.subject_ref(n));
                    }
                    Some(RegistryEvent::PatientMatched { id, attached, .. }) => {
                        rec.subject = Some(self.subject_ref(id));
                        rec.detail = attached.is_some().then(|| "secondary identity attached".into());
                    }
                    Some(RegistryEvent::PatientsMerged { keep, absorb, actor }) => {
                        rec.subject = Some(self.subject_ref(keep));
                        rec.other = Some(self.subject_ref(absorb));
                        rec.actor = Some(actor);
                    }
                    Some(RegistryEvent::PatientSplit { id, new_id, actor, .. }) => {
                        rec.subject = Some(self.subject_ref(id));
                        rec.other = Some(self.subject_ref(new_id));
                        rec.actor = Some(actor);
                    }
                    Some(RegistryEvent::PatientDeleted { reason, tombstone, .. }) => {
                        rec.subject = Some(tombstone);
                        rec.detail = Some(format!("{reason:?}").to_uppercase());
                    }
                    Some(RegistryEvent::TentativeResolved { id, actor }) => {
                        rec.subject = Some(self.subject_ref(id));
                        rec.actor = Some(actor);
                    }
                    None => {}
                }
                rec
            })
            .collect()
    }

    /// Canonical serialization of the persisted state.
    pub fn snapshot(&self) -> Vec<u8> {
        serde_json::to_vec(&self.state).expect("state serializes")
    }

    pub fn snapshot_digest(&self) -> String {
        hex::encode(Sha256::digest(self.snapshot()))
    }

    pub fn write_snapshot(&self, path: &std::path::Path) -> Result<(), RegistryError> {
        std::fs::write(path, self.snapshot()).map_err(StoreError::from)?;
        Ok(())
    }

    /// Every tentative entry points at a live entry, and every valid KVNR
    /// is bound at most once.
    pub fn check_invariants(&self) -> Result<(), String> {
        for e in self.state.entries.values() {
            match (e.tentative, e.tentative_nearest) {
                (true, Some(n)) if self.state.entries.contains_key(&n) => {}
                (true, _) => return Err(format!("{} is tentative without a live nearest entry", e.id)),
                (false, Some(_)) => return Err(format!("{} has a nearest entry but is not tentative", e.id)),
                (false, None) => {}
            }
            if let Some(d) = &e.kvnr_digest {
                if self.state.kvnr_index.get(d) != Some(&e.id) {
                    return Err(format!("KVNR index out of sync for {}", e.id));
                }
            }
        }
        if self.state.kvnr_index.len() != self.state.entries.values().filter(|e| e.kvnr_digest.is_some()).count() {
            return Err("KVNR bound to more than one entry".into());
        }
        Ok(())
    }
}

impl RegistryState {
    fn clear_tentative_refs(&mut self, targets: &[InternalId]) {
        for e in self.entries.values_mut() {
            if e.tentative_nearest.is_some_and(|n| targets.contains(&n)) || targets.contains(&e.id) {
                e.tentative = false;
                e.tentative_nearest = None;
            }
        }
    }

    fn apply(&mut self, ev: &RegistryEvent, ts: DateTime<Utc>) {
        match ev.clone() {
            RegistryEvent::DomainRegistered { domain } => {
                self.domains.insert(domain.domain_id.clone(), domain);
            }
            RegistryEvent::PatientAdded { id, identity, kvnr_digest, tentative_nearest, consent_id } => {
                self.last_id = self.last_id.max(id.0);
                if let Some(d) = &kvnr_digest {
                    self.kvnr_index.insert(d.clone(), id);
                }
                self.entries.insert(
                    id,
                    EntryRecord {
                        id,
                        identities: vec![identity],
                        kvnr_digest,
                        tentative: tentative_nearest.is_some(),
                        tentative_nearest,
                        consent_ids: consent_id.into_iter().collect(),
                        created_at: ts,
                        updated_at: ts,
                    },
                );
            }
            RegistryEvent::PatientMatched { id, attached, kvnr_digest, consent_id } => {
                if let Some(d) = &kvnr_digest {
                    self.kvnr_index.insert(d.clone(), id);
                }
                let e = self.entries.get_mut(&id).expect("journaled against a live entry");
                e.identities.extend(attached);
                if kvnr_digest.is_some() {
                    e.kvnr_digest = kvnr_digest;
                }
                if let Some(c) = consent_id {
                    if !e.consent_ids.contains(&c) {
                        e.consent_ids.push(c);
                    }
                }
                e.updated_at = ts;
            }
            RegistryEvent::PatientsMerged { keep, absorb, .. } => {
                let gone = self.entries.remove(&absorb).expect("live entry");
                for target in self.aliases.values_mut() {
                    if *target == absorb {
                        *target = keep;
                    }
                }
                self.aliases.insert(absorb, keep);
                if let Some(d) = &gone.kvnr_digest {
                    self.kvnr_index.insert(d.clone(), keep);
                }
                let e = self.entries.get_mut(&keep).expect("live entry");
                e.identities.extend(gone.identities);
                if e.kvnr_digest.is_none() {
                    e.kvnr_digest = gone.kvnr_digest;
                }
                for c in gone.consent_ids {
                    if !e.consent_ids.contains(&c) {
                        e.consent_ids.push(c);
                    }
                }
                e.updated_at = ts;
                self.clear_tentative_refs(&[keep, absorb]);
            }
            RegistryEvent::PatientSplit { id, new_id, moved, kvnr_to_new, .. } => {
                self.last_id = self.last_id.max(new_id.0);
                let e = self.entries.get_mut(&id).expect("live entry");
                let all = std::mem::take(&mut e.identities);
                let (out, stay): (Vec<_>, Vec<_>) = all.into_iter().enumerate().partition(|(i, _)| moved.contains(i));
                e.identities = stay.into_iter().map(|(_, b)| b).collect();
                e.updated_at = ts;
                let kvnr_digest = if kvnr_to_new { e.kvnr_digest.take() } else { None };
                if let Some(d) = &kvnr_digest {
                    self.kvnr_index.insert(d.clone(), new_id);
                }
                self.entries.insert(
                    new_id,
                    EntryRecord {
                        id: new_id,
                        identities: out.into_iter().map(|(_, b)| b).collect(),
                        kvnr_digest,
                        tentative: false,
                        tentative_nearest: None,
                        consent_ids: Vec::new(),
                        created_at: ts,
                        updated_at: ts,
                    },
                );
            }
            RegistryEvent::PatientDeleted { id, .. } => {
                if let Some(e) = self.entries.remove(&id) {
                    if let Some(d) = e.kvnr_digest {
                        self.kvnr_index.remove(&d);
                    }
                }
                self.aliases.retain(|from, to| *to != id && *from != id);
                self.clear_tentative_refs(&[id]);
            }
            RegistryEvent::TentativeResolved { id, .. } => {
                if let Some(e) = self.entries.get_mut(&id) {
                    e.tentative = false;
                    e.tentative_nearest = None;
                    e.updated_at = ts;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;
