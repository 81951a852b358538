//! Federated trusted third party: sites submit Bloom-encoded identities,
//! the fTTP links them and answers with site-scoped (DIZ) pseudonyms. The
//! cross-site pseudonym only leaves towards the transfer hub. Unclear
//! matches go to clearing, where plaintext is held sealed until a verdict.

pub mod scan;
pub mod scenario;
mod types;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::idmodel::{normalize, IdentityError, IdentityRecord, NormalizedIdentity};
use crate::pprl::{dice_similarity, hmac_sha256, BloomEncoder, BloomEncoding, CodecError, KeyRing};
use crate::pseudonym::{PseudonymCodec, PseudonymError};
use crate::store::{Clock, SealedBlob, Store, StoreError};

pub use types::*;

#[derive(Debug, Error)]
pub enum FttpError {
    #[error("consent {0:?} is not active for this site")]
    ConsentInactive(String),
    #[error("unknown consent {0:?}")]
    UnknownConsent(String),
    #[error("consent {0:?} already withdrawn")]
    AlreadyWithdrawn(String),
    #[error("consent {0:?} already registered")]
    DuplicateConsent(String),
    #[error("unknown site {0:?}")]
    UnknownSite(String),
    #[error("site {0:?} already registered")]
    DuplicateSite(String),
    #[error("transaction {0:?} reused with different content")]
    DuplicateTx(String),
    #[error("unknown pseudonym")]
    UnknownPseudonym,
    #[error("sites may not translate pseudonyms")]
    CallerIsSite,
    #[error("{0} is not authorized")]
    Unauthorized(String),
    #[error("unknown case {0:?}")]
    UnknownCase(String),
    #[error("case is {0:?}")]
    WrongStatus(CaseStatus),
    #[error("case version is {0}")]
    VersionConflict(u64),
    #[error("site {0:?} is not involved in this case")]
    NotInvolved(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Pseudonym(#[from] PseudonymError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("configuration: {0}")]
    Config(String),
}

impl FttpError {
    pub fn code(&self) -> &'static str {
        match self {
            FttpError::ConsentInactive(_) => "CONSENT_INACTIVE",
            FttpError::UnknownConsent(_) => "UNKNOWN_CONSENT",
            FttpError::AlreadyWithdrawn(_) => "ALREADY_WITHDRAWN",
            FttpError::DuplicateConsent(_) => "DUPLICATE_CONSENT",
            FttpError::UnknownSite(_) => "UNKNOWN_SITE",
            FttpError::DuplicateSite(_) => "DUPLICATE_SITE",
            FttpError::DuplicateTx(_) => "DUPLICATE_TX",
            FttpError::UnknownPseudonym | FttpError::Pseudonym(_) => "UNKNOWN_PSEUDONYM",
            FttpError::CallerIsSite => "CALLER_IS_SITE",
            FttpError::Unauthorized(_) => "UNAUTHORIZED",
            FttpError::UnknownCase(_) => "UNKNOWN_CASE",
            FttpError::WrongStatus(_) => "WRONG_STATUS",
            FttpError::VersionConflict(_) => "VERSION_CONFLICT",
            FttpError::NotInvolved(_) => "NOT_INVOLVED",
            FttpError::Codec(e) => e.code(),
            FttpError::Identity(e) => e.code(),
            FttpError::Store(_) => "STORAGE_ERROR",
            FttpError::Config(_) => "CONFIG_ERROR",
        }
    }
}

/// Bloom encoding of the linkage fields a site submits.
pub fn encode_identity(encoder: &BloomEncoder, n: &NormalizedIdentity) -> Result<BloomEncoding, CodecError> {
    let sex = n.field(crate::idmodel::Field::Sex).unwrap_or_default();
    encoder.encode(&[n.first_name.as_str(), n.last_name.as_str(), &n.birth_date.compact(), &sex])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct StoredEncoding {
    site_id: String,
    digest: String,
    consent_refs: BTreeSet<String>,
    blob: SealedBlob,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct DizRecord {
    site_id: String,
    counter: u64,
    consent_refs: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct EntryState {
    id: u64,
    encodings: Vec<StoredEncoding>,
    diz: Vec<DizRecord>,
    tentative: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tentative_nearest: Option<u64>,
    created_at: DateTime<Utc>,
    updated_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct FttpState {
    sites: BTreeMap<String, u64>,
    consents: BTreeMap<String, ConsentRecord>,
    last_entry: u64,
    entries: BTreeMap<u64, EntryState>,
    aliases: BTreeMap<u64, u64>,
    diz_index: BTreeMap<String, BTreeMap<u64, u64>>,
    exact_index: BTreeMap<String, u64>,
    transactions: BTreeMap<String, TxRecord>,
    last_case: u64,
    cases: BTreeMap<String, ClearingCase>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct TxRecord {
    site_id: String,
    digest: String,
    consent_ref: String,
    response: SubmitResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "SCREAMING_SNAKE_CASE", rename_all_fields = "camelCase")]
enum FttpEvent {
    SiteRegistered {
        site_id: String,
    },
    ConsentRegistered {
        consent_id: String,
        site_id: String,
        subject_ref: String,
    },
    EncodingSubmitted {
        tx_id: String,
        site_id: String,
        consent_ref: String,
        kind: MatchKind,
        entry: u64,
        digest: String,
        #[serde(default)]
        stored: Option<SealedBlob>,
        diz: u64,
        #[serde(default)]
        nearest: Option<u64>,
        #[serde(default)]
        case_id: Option<String>,
        #[serde(default)]
        score: Option<f64>,
        response: SubmitResponse,
    },
    PlaintextRequested {
        case_id: String,
    },
    PlaintextProvided {
        case_id: String,
        slot: usize,
        blob: SealedBlob,
    },
    ClearingResolved {
        case_id: String,
        verdict: ClearingVerdict,
        actor: String,
    },
    ConsentWithdrawn {
        consent_id: String,
        tombstone: String,
    },
}

impl FttpEvent {
    fn kind(&self) -> &'static str {
        match self {
            FttpEvent::SiteRegistered { .. } => "SITE_REGISTERED",
            FttpEvent::ConsentRegistered { .. } => "CONSENT_REGISTERED",
            FttpEvent::EncodingSubmitted { .. } => "ENCODING_SUBMITTED",
            FttpEvent::PlaintextRequested { .. } => "PLAINTEXT_REQUESTED",
            FttpEvent::PlaintextProvided { .. } => "PLAINTEXT_PROVIDED",
            FttpEvent::ClearingResolved { .. } => "CLEARING_RESOLVED",
            FttpEvent::ConsentWithdrawn { .. } => "CONSENT_WITHDRAWN",
        }
    }
}

/// Audit record of the fTTP journal: event type and public references only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FttpAuditRecord {
    pub seq: u64,
    pub ts: DateTime<Utc>,
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consent_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

pub struct Fttp {
    cfg: FttpConfig,
    keys: KeyRing,
    fingerprint: String,
    cross: PseudonymCodec,
    store: Store,
    clock: Arc<dyn Clock>,
    state: FttpState,
    /// Decrypted encodings by blob id.
    cache: BTreeMap<String, BloomEncoding>,
    outbox: Vec<Message>,
}

impl fmt::Debug for Fttp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fttp").field("entries", &self.state.entries.len()).finish_non_exhaustive()
    }
}

fn event_from(kind: &str, payload: &serde_json::Value) -> Result<FttpEvent, StoreError> {
    Ok(serde_json::from_value(serde_json::json!({"type": kind, "payload": payload}))?)
}

impl Fttp {
    pub fn open(cfg: FttpConfig, keys: KeyRing, store: Store, clock: Arc<dyn Clock>) -> Result<Self, FttpError> {
        cfg.bloom.validate()?;
        if !(cfg.lower_threshold <= cfg.upper_threshold && cfg.upper_threshold <= 1.0) {
            return Err(FttpError::Config("need lowerThreshold <= upperThreshold <= 1".into()));
        }
        let hub = keys.get(&cfg.hub_key_id)?;
        let cross = PseudonymCodec::new(hub.derive("fttp-cross-site"), cfg.format)?;
        let mut f = Fttp {
            fingerprint: cfg.bloom.fingerprint(),
            cfg,
            keys,
            cross,
            store,
            clock,
            state: FttpState::default(),
            cache: BTreeMap::new(),
            outbox: Vec::new(),
        };
        let entries = f.store.journal.entries().to_vec();
        for e in &entries {
            let ev = event_from(&e.kind, &e.payload)?;
            let msgs = f.state.apply(&ev, e.ts, e.seq, &f.codecs());
            f.outbox.extend(msgs);
        }
        let live = f.state.live_blobs();
        f.store.vault.retain_only(&live)?;
        f.sync_cache()?;
        Ok(f)
    }

    pub fn config(&self) -> &FttpConfig {
        &self.cfg
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    fn codecs(&self) -> Codecs {
        Codecs { hub: self.keys.get(&self.cfg.hub_key_id).expect("checked").derive("fttp-diz"), format: self.cfg.format }
    }

    fn sync_cache(&mut self) -> Result<(), FttpError> {
        let wanted: BTreeMap<String, SealedBlob> = self
            .state
            .entries
            .values()
            .flat_map(|e| e.encodings.iter().map(|s| (s.blob.id.clone(), s.blob.clone())))
            .collect();
        self.cache.retain(|k, _| wanted.contains_key(k));
        for (id, blob) in wanted {
            if !self.cache.contains_key(&id) {
                let wire = String::from_utf8(self.store.vault.open_blob(&blob)?)
                    .map_err(|_| StoreError::Tampered(id.clone()))?;
                self.cache.insert(id, BloomEncoding::from_wire(&wire)?);
            }
        }
        Ok(())
    }

    /// Journals, applies, shreds keys of blobs the event made unreachable.
    fn commit(&mut self, ev: FttpEvent) -> Result<Vec<Message>, FttpError> {
        let before = self.state.live_blobs();
        let value = serde_json::to_value(&ev).map_err(StoreError::from)?;
        let payload = value.get("payload").cloned().unwrap_or(serde_json::Value::Null);
        let ts = self.clock.now();
        let seq = self.store.journal.append(ev.kind(), payload, ts)?.seq;
        let msgs = self.state.apply(&ev, ts, seq, &self.codecs());
        let after = self.state.live_blobs();
        self.store.vault.shred(before.difference(&after).map(String::as_str))?;
        self.sync_cache()?;
        self.outbox.extend(msgs.iter().cloned());
        Ok(msgs)
    }

    pub fn register_site(&mut self, site_id: &str) -> Result<(), FttpError> {
        if self.state.sites.contains_key(site_id) {
            return Err(FttpError::DuplicateSite(site_id.into()));
        }
        self.commit(FttpEvent::SiteRegistered { site_id: site_id.into() })?;
        Ok(())
    }

    pub fn sites(&self) -> impl Iterator<Item = &str> {
        self.state.sites.keys().map(String::as_str)
    }

    pub fn register_consent(&mut self, consent_id: &str, site_id: &str, subject_ref: &str) -> Result<ConsentRecord, FttpError> {
        self.require_site(site_id)?;
        if self.state.consents.contains_key(consent_id) {
            return Err(FttpError::DuplicateConsent(consent_id.into()));
        }
        self.commit(FttpEvent::ConsentRegistered {
            consent_id: consent_id.into(),
            site_id: site_id.into(),
            subject_ref: subject_ref.into(),
        })?;
        Ok(self.state.consents[consent_id].clone())
    }

    pub fn consent(&self, consent_id: &str) -> Option<&ConsentRecord> {
        self.state.consents.get(consent_id)
    }

    fn require_site(&self, site_id: &str) -> Result<(), FttpError> {
        if self.state.sites.contains_key(site_id) {
            Ok(())
        } else {
            Err(FttpError::UnknownSite(site_id.into()))
        }
    }

    fn digest(&self, wire: &str) -> String {
        let key = self.keys.get(&self.cfg.hub_key_id).expect("checked").derive("fttp-exact");
        hex::encode(&hmac_sha256(&key, &[wire.as_bytes()])[..16])
    }

    /// Highest Dice per entry, best entry first (ties to the older entry).
    fn best_match(&self, enc: &BloomEncoding) -> Result<Option<(u64, f64)>, FttpError> {
        let mut best: Option<(u64, f64)> = None;
        for e in self.state.entries.values() {
            for s in &e.encodings {
                let d = dice_similarity(enc, &self.cache[&s.blob.id])?;
                if best.is_none_or(|(_, b)| d > b) {
                    best = Some((e.id, d));
                }
            }
        }
        Ok(best)
    }

    pub fn submit_encoding(&mut self, msg: &SubmissionMessage) -> Result<SubmitResponse, FttpError> {
        self.require_site(&msg.site_id)?;
        let enc = BloomEncoding::from_wire(&msg.encoding)?;
        let wire = enc.to_wire();
        let digest = self.digest(&wire);
        if let Some(tx) = self.state.transactions.get(&msg.tx_id) {
            return if tx.site_id == msg.site_id && tx.digest == digest && tx.consent_ref == msg.consent_ref {
                Ok(tx.response.clone())
            } else {
                Err(FttpError::DuplicateTx(msg.tx_id.clone()))
            };
        }
        match self.state.consents.get(&msg.consent_ref) {
            Some(c) if c.status == ConsentStatus::Active && c.site_id == msg.site_id => {}
            _ => return Err(FttpError::ConsentInactive(msg.consent_ref.clone())),
        }
        if enc.params_fingerprint != self.fingerprint
            || enc.hardened != (self.cfg.bloom.hardening != crate::pprl::Hardening::None)
            || enc.bits.len() != self.cfg.bloom.encoded_len()
        {
            return Err(CodecError::ParamsMismatch.into());
        }

        let exact = self.state.exact_index.get(&digest).copied();
        let best = if exact.is_some() { None } else { self.best_match(&enc)? };
        let (kind, score) = match (exact, best) {
            (Some(_), _) => (MatchKind::PerfectMatch, Some(1.0)),
            (None, Some((_, d))) if d >= self.cfg.upper_threshold => (MatchKind::AutomaticMerge, Some(d)),
            (None, Some((_, d))) if d >= self.cfg.lower_threshold => (MatchKind::PossibleMatch, Some(d)),
            (None, b) => (MatchKind::NonMatch, b.map(|(_, d)| d)),
        };
        let entry = match kind {
            MatchKind::PerfectMatch => exact.expect("exact"),
            MatchKind::AutomaticMerge => best.expect("scored").0,
            _ => self.state.last_entry + 1,
        };
        let nearest = (kind == MatchKind::PossibleMatch).then(|| best.expect("scored").0);
        let existing_diz = self
            .state
            .entries
            .get(&entry)
            .and_then(|e| e.diz.iter().find(|d| d.site_id == msg.site_id))
            .map(|d| d.counter);
        let diz = existing_diz.unwrap_or(self.state.sites[&msg.site_id] + 1);
        let stored = if kind == MatchKind::PerfectMatch { None } else { Some(self.store.vault.seal(wire.as_bytes())?) };
        let case_id = nearest.map(|_| format!("CASE-{:04}", self.state.last_case + 1));
        let response = SubmitResponse {
            tx_id: msg.tx_id.clone(),
            diz_pseudonym: self.codecs().diz(&msg.site_id).encode(diz)?,
            outcome: MatchOutcome { kind },
            clearing_pending: case_id.is_some(),
        };
        self.commit(FttpEvent::EncodingSubmitted {
            tx_id: msg.tx_id.clone(),
            site_id: msg.site_id.clone(),
            consent_ref: msg.consent_ref.clone(),
            kind,
            entry,
            digest,
            stored,
            diz,
            nearest,
            case_id,
            score,
            response: response.clone(),
        })?;
        Ok(response)
    }

    fn entry_of(&self, site_id: &str, token: &str) -> Result<u64, FttpError> {
        let counter = self.codecs().diz(site_id).decode(token).map_err(|_| FttpError::UnknownPseudonym)?;
        let mut id = *self
            .state
            .diz_index
            .get(site_id)
            .and_then(|m| m.get(&counter))
            .ok_or(FttpError::UnknownPseudonym)?;
        while let Some(&n) = self.state.aliases.get(&id) {
            id = n;
        }
        Ok(id)
    }

    /// DIZ pseudonym to cross-site pseudonym, for the transfer hub only.
    pub fn translate_for_hub(&self, caller: &Principal, diz_pseudonym: &str, site_id: &str) -> Result<String, FttpError> {
        match caller {
            Principal::Hub => {}
            Principal::Site { .. } => return Err(FttpError::CallerIsSite),
            other => return Err(FttpError::Unauthorized(other.label())),
        }
        let entry = self.entry_of(site_id, diz_pseudonym)?;
        Ok(self.cross.encode(entry)?)
    }

    /// Cross-site pseudonym of an entry counter, for scans.
    pub fn cross_site_token(&self, entry: u64) -> Result<String, FttpError> {
        Ok(self.cross.encode(entry)?)
    }

    pub fn entry_counter_bound(&self) -> u64 {
        self.state.last_entry
    }

    fn case(&self, case_id: &str) -> Result<&ClearingCase, FttpError> {
        self.state.cases.get(case_id).ok_or_else(|| FttpError::UnknownCase(case_id.into()))
    }

    pub fn request_plaintext(&mut self, case_id: &str) -> Result<Vec<Message>, FttpError> {
        let c = self.case(case_id)?;
        if c.status != CaseStatus::Open {
            return Err(FttpError::WrongStatus(c.status));
        }
        self.commit(FttpEvent::PlaintextRequested { case_id: case_id.into() })
    }

    /// Fills the site's slot. A site holding several slots in one case
    /// names the DIZ pseudonym; otherwise the first unfilled slot is used,
    /// and a repeated provision overwrites.
    pub fn provide_plaintext(
        &mut self,
        case_id: &str,
        site_id: &str,
        identity: &IdentityRecord,
        diz_pseudonym: Option<&str>,
    ) -> Result<CaseView, FttpError> {
        let c = self.case(case_id)?;
        if c.status != CaseStatus::AwaitingPlaintext {
            return Err(FttpError::WrongStatus(c.status));
        }
        let counter = diz_pseudonym
            .map(|t| self.codecs().diz(site_id).decode(t).map_err(|_| FttpError::UnknownPseudonym))
            .transpose()?;
        let mine: Vec<usize> = (0..c.slots.len())
            .filter(|&i| c.slots[i].site_id == site_id && counter.is_none_or(|n| c.slots[i].diz == n))
            .collect();
        let slot = *mine
            .iter()
            .find(|&&i| c.slots[i].plaintext.is_none())
            .or(mine.first())
            .ok_or_else(|| FttpError::NotInvolved(site_id.into()))?;
        normalize(identity)?;
        let blob = self.store.vault.seal(&serde_json::to_vec(identity).map_err(StoreError::from)?)?;
        self.commit(FttpEvent::PlaintextProvided { case_id: case_id.into(), slot, blob })?;
        self.case_view(case_id, false)
    }

    pub fn resolve_clearing(
        &mut self,
        case_id: &str,
        verdict: ClearingVerdict,
        actor: &Principal,
        expected_version: Option<u64>,
    ) -> Result<CaseView, FttpError> {
        let Principal::ClearingActor { name } = actor else {
            return Err(FttpError::Unauthorized(actor.label()));
        };
        let c = self.case(case_id)?;
        if c.status != CaseStatus::AwaitingPlaintext || !c.all_filled() {
            return Err(FttpError::WrongStatus(c.status));
        }
        if let Some(v) = expected_version {
            if v != c.version {
                return Err(FttpError::VersionConflict(c.version));
            }
        }
        self.commit(FttpEvent::ClearingResolved { case_id: case_id.into(), verdict, actor: name.clone() })?;
        self.case_view(case_id, false)
    }

    pub fn withdraw_consent(&mut self, consent_id: &str) -> Result<DeletionReport, FttpError> {
        let c = self.state.consents.get(consent_id).ok_or_else(|| FttpError::UnknownConsent(consent_id.into()))?;
        if c.status == ConsentStatus::Withdrawn {
            return Err(FttpError::AlreadyWithdrawn(consent_id.into()));
        }
        let (entries_before, cases_before) = (self.state.entries.len(), self.state.cases.clone());
        let encodings_before = self.encoding_count();
        let diz_before: usize = self.state.diz_index.values().map(BTreeMap::len).sum();
        let tombstone = format!("TOMB-{:08}", self.store.journal.last_seq() + 1);
        self.commit(FttpEvent::ConsentWithdrawn { consent_id: consent_id.into(), tombstone: tombstone.clone() })?;
        let diz_after: usize = self.state.diz_index.values().map(BTreeMap::len).sum();
        Ok(DeletionReport {
            consent_id: consent_id.into(),
            tombstone,
            removed_encodings: encodings_before - self.encoding_count(),
            invalidated_pseudonyms: diz_before - diz_after,
            removed_entries: entries_before - self.state.entries.len(),
            voided_cases: self
                .state
                .cases
                .values()
                .filter(|c| c.status == CaseStatus::Void && cases_before[&c.case_id].status != CaseStatus::Void)
                .map(|c| c.case_id.clone())
                .collect(),
        })
    }

    pub fn encoding_count(&self) -> usize {
        self.state.entries.values().map(|e| e.encodings.len()).sum()
    }

    /// Stored encodings still carrying this consent.
    pub fn encodings_for_consent(&self, consent_id: &str) -> usize {
        self.state
            .entries
            .values()
            .flat_map(|e| &e.encodings)
            .filter(|s| s.consent_refs.contains(consent_id))
            .count()
    }

    pub fn entry_count(&self) -> usize {
        self.state.entries.len()
    }

    pub fn case_view(&self, case_id: &str, reveal: bool) -> Result<CaseView, FttpError> {
        let c = self.case(case_id)?;
        let codecs = self.codecs();
        let slots = c
            .slots
            .iter()
            .map(|s| {
                let identity = match (&s.plaintext, reveal) {
                    (Some(b), true) => {
                        let bytes = self.store.vault.open_blob(b)?;
                        Some(serde_json::from_slice(&bytes).map_err(StoreError::from)?)
                    }
                    _ => None,
                };
                Ok(SlotView {
                    site_id: s.site_id.clone(),
                    diz_pseudonym: codecs.diz(&s.site_id).encode(s.diz)?,
                    filled: s.plaintext.is_some(),
                    identity,
                })
            })
            .collect::<Result<Vec<_>, FttpError>>()?;
        Ok(CaseView {
            case_id: c.case_id.clone(),
            status: c.status,
            score: c.score,
            version: c.version,
            resolvable: c.status == CaseStatus::AwaitingPlaintext && c.all_filled(),
            slots,
            resolved_by: c.resolved_by.clone(),
            audit: c.audit.clone(),
            opened_at: c.opened_at,
        })
    }

    pub fn cases(&self, status: Option<CaseStatus>, reveal: bool) -> Result<Vec<CaseView>, FttpError> {
        self.state
            .cases
            .values()
            .filter(|c| status.is_none_or(|s| c.status == s))
            .map(|c| self.case_view(&c.case_id, reveal))
            .collect()
    }

    /// Messages addressed to a recipient, in order.
    pub fn inbox(&self, to: &Recipient) -> Vec<&Message> {
        self.outbox.iter().filter(|m| &m.to == to).collect()
    }

    pub fn messages(&self) -> &[Message] {
        &self.outbox
    }

    pub fn audit(&self, since: u64) -> Vec<FttpAuditRecord> {
        self.store
            .journal
            .since(since)
            .iter()
            .map(|e| {
                let mut r = FttpAuditRecord {
                    seq: e.seq,
                    ts: e.ts,
                    action: e.kind.clone(),
                    site_id: None,
                    case_id: None,
                    consent_id: None,
                    actor: None,
                    detail: None,
                };
                match event_from(&e.kind, &e.payload) {
                    Ok(FttpEvent::SiteRegistered { site_id }) => r.site_id = Some(site_id),
                    Ok(FttpEvent::ConsentRegistered { consent_id, site_id, .. }) => {
                        r.site_id = Some(site_id);
                        r.consent_id = Some(consent_id);
                    }
                    Ok(FttpEvent::EncodingSubmitted { site_id, consent_ref, kind, case_id, .. }) => {
                        r.site_id = Some(site_id);
                        r.consent_id = Some(consent_ref);
                        r.case_id = case_id;
                        r.detail = serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(String::from));
                    }
                    Ok(FttpEvent::PlaintextRequested { case_id }) => r.case_id = Some(case_id),
                    Ok(FttpEvent::PlaintextProvided { case_id, .. }) => r.case_id = Some(case_id),
                    Ok(FttpEvent::ClearingResolved { case_id, verdict, actor }) => {
                        r.case_id = Some(case_id);
                        r.actor = Some(actor);
                        r.detail = Some(format!("{verdict:?}").to_uppercase());
                    }
                    Ok(FttpEvent::ConsentWithdrawn { consent_id, tombstone }) => {
                        r.consent_id = Some(consent_id);
                        r.detail = Some(tombstone);
                    }
                    Err(_) => {}
                }
                r
            })
            .collect()
    }

    pub fn snapshot(&self) -> Vec<u8> {
        serde_json::to_vec(&self.state).expect("state serializes")
    }

    pub fn snapshot_digest(&self) -> String {
        hex::encode(Sha256::digest(self.snapshot()))
    }

    /// Every journaled plaintext blob that can still be opened, with the
    /// status of its case.
    pub fn openable_plaintext(&self) -> Vec<(String, CaseStatus)> {
        self.store
            .journal
            .entries()
            .iter()
            .filter_map(|e| match event_from(&e.kind, &e.payload) {
                Ok(FttpEvent::PlaintextProvided { case_id, blob, .. }) => Some((case_id, blob)),
                _ => None,
            })
            .filter(|(_, b)| self.store.vault.open_blob(b).is_ok())
            .map(|(c, _)| {
                let status = self.state.cases.get(&c).map_or(CaseStatus::Void, |x| x.status);
                (c, status)
            })
            .collect()
    }

    /// Structural invariants of the pseudonym hierarchy and the cases.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen_diz: BTreeSet<(&str, u64)> = BTreeSet::new();
        for e in self.state.entries.values() {
            if e.encodings.is_empty() {
                return Err(format!("entry {} holds no encoding", e.id));
            }
            if e.tentative != e.tentative_nearest.is_some() {
                return Err(format!("entry {} tentative flag inconsistent", e.id));
            }
            for d in &e.diz {
                if !seen_diz.insert((&d.site_id, d.counter)) {
                    return Err(format!("DIZ pseudonym of {} shared by two entries", d.site_id));
                }
                let mapped = self.state.diz_index.get(&d.site_id).and_then(|m| m.get(&d.counter));
                if mapped != Some(&e.id) {
                    return Err(format!("DIZ index out of sync for entry {}", e.id));
                }
            }
        }
        for c in self.state.cases.values() {
            let filled = c.slots.iter().any(|s| s.plaintext.is_some());
            if filled && c.status != CaseStatus::AwaitingPlaintext {
                return Err(format!("{} holds plaintext while {:?}", c.case_id, c.status));
            }
        }
        Ok(())
    }
}

/// DIZ codecs derive per-site keys from one hub secret.
struct Codecs {
    hub: [u8; 32],
    format: crate::pseudonym::TokenFormat,
}

impl Codecs {
    fn diz(&self, site_id: &str) -> PseudonymCodec {
        let key = hmac_sha256(&self.hub, &[site_id.as_bytes()]);
        PseudonymCodec::new(key, self.format).expect("format validated at open")
    }
}

impl FttpState {
    fn live_blobs(&self) -> BTreeSet<String> {
        let enc = self.entries.values().flat_map(|e| e.encodings.iter().map(|s| s.blob.id.clone()));
        let slots = self.cases.values().flat_map(|c| c.slots.iter().filter_map(|s| s.plaintext.as_ref().map(|b| b.id.clone())));
        enc.chain(slots).collect()
    }

    fn resolve(&self, mut id: u64) -> u64 {
        while let Some(&n) = self.aliases.get(&id) {
            id = n;
        }
        id
    }

    fn diz_tokens(codecs: &Codecs, site: &str, counters: impl IntoIterator<Item = u64>) -> Vec<String> {
        let c = codecs.diz(site);
        counters.into_iter().map(|n| c.encode(n).expect("counter in range")).collect()
    }

    fn void_case(&mut self, case_id: &str, ts: DateTime<Utc>, seq: u64, note: &str) -> Vec<Message> {
        let c = self.cases.get_mut(case_id).expect("live case");
        c.status = CaseStatus::Void;
        for s in &mut c.slots {
            s.plaintext = None;
        }
        c.version += 1;
        c.audit.push(CaseNote { ts, note: note.into() });
        let mut msgs = vec![Message { seq, to: Recipient::Clearing, body: MessageBody::CaseVoided { case_id: case_id.into() } }];
        for site in c.sites() {
            msgs.push(Message { seq, to: Recipient::site(site), body: MessageBody::CaseVoided { case_id: case_id.into() } });
        }
        msgs
    }

    fn apply(&mut self, ev: &FttpEvent, ts: DateTime<Utc>, seq: u64, codecs: &Codecs) -> Vec<Message> {
        let mut msgs = Vec::new();
        match ev.clone() {
            FttpEvent::SiteRegistered { site_id } => {
                self.sites.insert(site_id, 0);
            }
            FttpEvent::ConsentRegistered { consent_id, site_id, subject_ref } => {
                self.consents.insert(
                    consent_id.clone(),
                    ConsentRecord { consent_id, site_id, subject_ref, status: ConsentStatus::Active, created_at: ts, withdrawn_at: None },
                );
            }
            FttpEvent::EncodingSubmitted {
                tx_id, site_id, consent_ref, entry, digest, stored, diz, nearest, case_id, score, response, ..
            } => {
                self.last_entry = self.last_entry.max(entry);
                let e = self.entries.entry(entry).or_insert_with(|| EntryState {
                    id: entry,
                    encodings: Vec::new(),
                    diz: Vec::new(),
                    tentative: nearest.is_some(),
                    tentative_nearest: nearest,
                    created_at: ts,
                    updated_at: ts,
                });
                e.updated_at = ts;
                match stored {
                    Some(blob) => {
                        e.encodings.push(StoredEncoding {
                            site_id: site_id.clone(),
                            digest: digest.clone(),
                            consent_refs: [consent_ref.clone()].into(),
                            blob,
                        });
                        self.exact_index.insert(digest.clone(), entry);
                    }
                    None => {
                        if let Some(s) = e.encodings.iter_mut().find(|s| s.digest == digest) {
                            s.consent_refs.insert(consent_ref.clone());
                        }
                    }
                }
                match e.diz.iter_mut().find(|d| d.site_id == site_id && d.counter == diz) {
                    Some(d) => {
                        d.consent_refs.insert(consent_ref.clone());
                    }
                    None => e.diz.push(DizRecord {
                        site_id: site_id.clone(),
                        counter: diz,
                        consent_refs: [consent_ref.clone()].into(),
                    }),
                }
                self.diz_index.entry(site_id.clone()).or_default().insert(diz, entry);
                let next = self.sites.entry(site_id.clone()).or_default();
                *next = (*next).max(diz);
                if let (Some(case_id), Some(near)) = (case_id, nearest) {
                    let mut slots: Vec<PlaintextSlot> = self.entries[&near]
                        .diz
                        .iter()
                        .map(|d| PlaintextSlot { site_id: d.site_id.clone(), diz: d.counter, plaintext: None })
                        .collect();
                    slots.push(PlaintextSlot { site_id: site_id.clone(), diz, plaintext: None });
                    self.last_case += 1;
                    self.cases.insert(
                        case_id.clone(),
                        ClearingCase {
                            case_id: case_id.clone(),
                            involved: vec![near, entry],
                            slots,
                            status: CaseStatus::Open,
                            score: score.unwrap_or_default(),
                            resolved_by: None,
                            audit: vec![CaseNote { ts, note: "opened".into() }],
                            version: 1,
                            opened_at: ts,
                        },
                    );
                    msgs.push(Message { seq, to: Recipient::Clearing, body: MessageBody::CaseOpened { case_id } });
                }
                self.transactions.insert(
                    tx_id,
                    TxRecord { site_id: site_id.clone(), digest, consent_ref, response: response.clone() },
                );
                msgs.insert(0, Message { seq, to: Recipient::site(&site_id), body: MessageBody::SubmissionResult { response } });
            }
            FttpEvent::PlaintextRequested { case_id } => {
                let c = self.cases.get_mut(&case_id).expect("live case");
                c.status = CaseStatus::AwaitingPlaintext;
                c.version += 1;
                c.audit.push(CaseNote { ts, note: "plaintext requested".into() });
                let mut per_site: BTreeMap<String, Vec<u64>> = BTreeMap::new();
                for s in &c.slots {
                    per_site.entry(s.site_id.clone()).or_default().push(s.diz);
                }
                for (site, counters) in per_site {
                    msgs.push(Message {
                        seq,
                        to: Recipient::site(&site),
                        body: MessageBody::PlaintextRequest {
                            case_id: case_id.clone(),
                            diz_pseudonyms: Self::diz_tokens(codecs, &site, counters),
                        },
                    });
                }
            }
            FttpEvent::PlaintextProvided { case_id, slot, blob } => {
                let c = self.cases.get_mut(&case_id).expect("live case");
                let s = &mut c.slots[slot];
                let note = if s.plaintext.is_some() {
                    format!("plaintext from {} replaced", s.site_id)
                } else {
                    format!("plaintext from {} received", s.site_id)
                };
                s.plaintext = Some(blob);
                c.version += 1;
                c.audit.push(CaseNote { ts, note });
                if c.all_filled() {
                    c.audit.push(CaseNote { ts, note: "ready for review".into() });
                }
            }
            FttpEvent::ClearingResolved { case_id, verdict, actor } => {
                let c = self.cases.get_mut(&case_id).expect("live case");
                for s in &mut c.slots {
                    s.plaintext = None;
                }
                c.status = match verdict {
                    ClearingVerdict::Merge => CaseStatus::ResolvedMerge,
                    ClearingVerdict::Separate => CaseStatus::ResolvedSeparate,
                };
                c.resolved_by = Some(actor);
                c.version += 1;
                c.audit.push(CaseNote { ts, note: format!("resolved {verdict:?}").to_uppercase() });
                let involved: Vec<u64> = c.involved.clone();
                let sites: Vec<String> = c.sites().into_iter().map(String::from).collect();
                let ids: Vec<u64> = involved.iter().map(|&i| self.resolve(i)).filter(|i| self.entries.contains_key(i)).collect();
                match verdict {
                    ClearingVerdict::Merge if ids.len() == 2 && ids[0] != ids[1] => self.merge(ids[0], ids[1], ts),
                    _ => {
                        for id in &ids {
                            let e = self.entries.get_mut(id).expect("live entry");
                            e.tentative = false;
                            e.tentative_nearest = None;
                            e.updated_at = ts;
                        }
                    }
                }
                msgs.push(Message { seq, to: Recipient::Clearing, body: MessageBody::CaseResolved { case_id: case_id.clone(), verdict } });
                for site in sites {
                    msgs.push(Message { seq, to: Recipient::site(&site), body: MessageBody::CaseResolved { case_id: case_id.clone(), verdict } });
                }
            }
            FttpEvent::ConsentWithdrawn { consent_id, .. } => {
                let c = self.consents.get_mut(&consent_id).expect("live consent");
                c.status = ConsentStatus::Withdrawn;
                c.withdrawn_at = Some(ts);
                self.transactions.retain(|_, t| t.consent_ref != consent_id);
                let mut touched = BTreeSet::new();
                let mut notices: BTreeMap<String, Vec<u64>> = BTreeMap::new();
                for e in self.entries.values_mut() {
                    let before = (e.encodings.len(), e.diz.len());
                    let mut hit = false;
                    for s in &mut e.encodings {
                        hit |= s.consent_refs.remove(&consent_id);
                    }
                    for d in &mut e.diz {
                        hit |= d.consent_refs.remove(&consent_id);
                    }
                    for s in e.encodings.iter().filter(|s| s.consent_refs.is_empty()) {
                        self.exact_index.remove(&s.digest);
                    }
                    e.encodings.retain(|s| !s.consent_refs.is_empty());
                    for d in e.diz.iter().filter(|d| d.consent_refs.is_empty()) {
                        notices.entry(d.site_id.clone()).or_default().push(d.counter);
                        if let Some(m) = self.diz_index.get_mut(&d.site_id) {
                            m.remove(&d.counter);
                        }
                    }
                    e.diz.retain(|d| !d.consent_refs.is_empty());
                    if hit || before != (e.encodings.len(), e.diz.len()) {
                        touched.insert(e.id);
                        e.updated_at = ts;
                    }
                }
                // An entry without encodings is gone; its remaining DIZ
                // pseudonyms go with it.
                let empty: Vec<u64> = self.entries.values().filter(|e| e.encodings.is_empty()).map(|e| e.id).collect();
                for id in &empty {
                    let e = self.entries.remove(id).expect("listed");
                    for d in e.diz {
                        notices.entry(d.site_id.clone()).or_default().push(d.counter);
                        if let Some(m) = self.diz_index.get_mut(&d.site_id) {
                            m.remove(&d.counter);
                        }
                    }
                }
                self.aliases.retain(|from, to| !empty.contains(to) && !empty.contains(from));
                for e in self.entries.values_mut() {
                    if e.tentative_nearest.is_some_and(|n| empty.contains(&n)) {
                        e.tentative = false;
                        e.tentative_nearest = None;
                    }
                }
                let open: Vec<String> = self
                    .cases
                    .values()
                    .filter(|c| !c.status.is_terminal())
                    .filter(|c| c.involved.iter().any(|&i| touched.contains(&self.resolve(i)) || touched.contains(&i)))
                    .map(|c| c.case_id.clone())
                    .collect();
                for case_id in open {
                    msgs.extend(self.void_case(&case_id, ts, seq, "voided by consent withdrawal"));
                }
                // A void case leaves its tentative entry unresolved; clear it.
                for e in self.entries.values_mut() {
                    if touched.contains(&e.id) || e.tentative_nearest.is_some_and(|n| touched.contains(&n)) {
                        e.tentative = false;
                        e.tentative_nearest = None;
                    }
                }
                for (site, counters) in notices {
                    msgs.push(Message {
                        seq,
                        to: Recipient::site(&site),
                        body: MessageBody::DeletionNotice {
                            consent_id: consent_id.clone(),
                            diz_pseudonyms: Self::diz_tokens(codecs, &site, counters),
                        },
                    });
                }
            }
        }
        msgs
    }

    fn merge(&mut self, keep: u64, absorb: u64, ts: DateTime<Utc>) {
        let gone = self.entries.remove(&absorb).expect("live entry");
        for d in &gone.diz {
            self.diz_index.entry(d.site_id.clone()).or_default().insert(d.counter, keep);
        }
        for s in &gone.encodings {
            self.exact_index.insert(s.digest.clone(), keep);
        }
        for target in self.aliases.values_mut() {
            if *target == absorb {
                *target = keep;
            }
        }
        self.aliases.insert(absorb, keep);
        let e = self.entries.get_mut(&keep).expect("live entry");
        e.encodings.extend(gone.encodings);
        e.diz.extend(gone.diz);
        e.updated_at = ts;
        for e in self.entries.values_mut() {
            if e.id == keep || e.tentative_nearest.is_some_and(|n| n == keep || n == absorb) {
                e.tentative = false;
                e.tentative_nearest = None;
            }
        }
    }
}
