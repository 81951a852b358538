//! Deterministic simulation of sites, transfer hub and clearing talking to
//! one fTTP. Scripts and logs are JSON lines with a versioned header.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::*;
use crate::idmodel::normalize_text;
use crate::pprl::Secret;
use crate::store::LogicalClock;

pub const SCRIPT_FORMAT: &str = "linkwerk-scenario";
pub const LOG_FORMAT: &str = "linkwerk-scenario-log";

/// The three-site demonstration script shipped with the crate.
pub const THREE_SITES: &str = include_str!("../../data/scenarios/three-sites.jsonl");

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct ScriptError {
    pub line: usize,
    pub msg: String,
}

impl ScriptError {
    pub fn code(&self) -> &'static str {
        "SCRIPT_ERROR"
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScriptHeader {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Register,
    Submit,
    Translate,
    RequestPlaintext,
    ProvidePlaintext,
    Resolve,
    Withdraw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub step: u64,
    pub actor: String,
    pub op: Op,
    #[serde(default)]
    pub args: Value,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
}

/// What a step left behind that must not be there.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Probe {
    /// Plaintext name strings found in persisted fTTP state.
    pub plaintext_hits: usize,
    /// Plaintext blobs still decryptable although their case is closed.
    pub openable_closed: usize,
    /// Encodings still stored under a withdrawn consent.
    pub withdrawn_encodings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LogEntry {
    pub seq: u64,
    pub step: u64,
    pub actor: String,
    pub op: Op,
    pub args: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub messages: Vec<Message>,
    pub probe: Probe,
    pub state_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioLog {
    pub header: LogHeader,
    pub entries: Vec<LogEntry>,
}

impl ScenarioLog {
    /// JSON lines, header first. A log without entries renders empty.
    pub fn to_jsonl(&self) -> String {
        if self.entries.is_empty() {
            return String::new();
        }
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn errors(&self) -> impl Iterator<Item = (&LogEntry, &str)> {
        self.entries.iter().filter_map(|e| e.error.as_deref().map(|c| (e, c)))
    }
}

/// A finished run: the log plus what the scans need.
pub struct ScenarioRun {
    pub log: ScenarioLog,
    pub fttp: Fttp,
    pub submissions: Vec<(SubmissionMessage, SubmitResponse)>,
    /// Normalized name values of every identity the sites handled.
    pub plaintexts: Vec<String>,
    /// Messages the runner delivered itself (hub translations).
    pub extra_messages: Vec<Message>,
}

#[derive(Default)]
struct SiteState {
    /// consentId → identity
    patients: BTreeMap<String, IdentityRecord>,
    /// DIZ pseudonym → consentId
    diz: BTreeMap<String, String>,
}

pub fn parse_script(text: &str) -> Result<(ScriptHeader, Vec<Action>), ScriptError> {
    let mut header = None;
    let mut actions: Vec<Action> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |msg: String| ScriptError { line: line_no, msg };
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if v.get("format").is_some() {
            if header.is_some() || !actions.is_empty() {
                return Err(err("header must be the first line".into()));
            }
            let h: ScriptHeader = serde_json::from_value(v).map_err(|e| err(e.to_string()))?;
            if h.format != SCRIPT_FORMAT || h.version != 1 {
                return Err(err(format!("unsupported script {} v{}", h.format, h.version)));
            }
            header = Some(h);
            continue;
        }
        let a: Action = serde_json::from_value(v).map_err(|e| err(e.to_string()))?;
        let Some(p) = Principal::parse(&a.actor) else {
            return Err(err(format!("unknown actor {:?}", a.actor)));
        };
        if actions.last().is_some_and(|l| l.step >= a.step) {
            return Err(err("steps must increase".into()));
        }
        let need = |k: &str| {
            if a.args.get(k).is_none() {
                Err(err(format!("{:?} needs args.{k}", a.op)))
            } else {
                Ok(())
            }
        };
        match a.op {
            Op::Register | Op::Submit | Op::Withdraw | Op::ProvidePlaintext if p.site_id().is_none() => {
                return Err(err(format!("{:?} is a site action", a.op)));
            }
            Op::Submit => {
                need("consentId")?;
                need("identity")?;
                serde_json::from_value::<IdentityRecord>(a.args["identity"].clone()).map_err(|e| err(e.to_string()))?;
            }
            Op::Withdraw => need("consentId")?,
            Op::Translate => {
                need("site")?;
                need("consentId")?;
            }
            Op::RequestPlaintext | Op::ProvidePlaintext => need("caseId")?,
            Op::Resolve => {
                need("caseId")?;
                need("verdict")?;
            }
            Op::Register => {}
        }
        actions.push(a);
    }
    let header = header.unwrap_or(ScriptHeader { format: SCRIPT_FORMAT.into(), version: 1, seed: 0 });
    Ok((header, actions))
}

fn redact(op: Op, args: &Value) -> Value {
    let mut v = args.clone();
    if let (Op::Submit | Op::ProvidePlaintext, Some(o)) = (op, v.as_object_mut()) {
        if o.contains_key("identity") {
            o.insert("identity".into(), json!("<redacted>"));
        }
    }
    v
}

fn names_of(r: &IdentityRecord) -> Vec<String> {
    let mut v = vec![r.first_name.clone(), r.last_name.clone()];
    v.extend(r.former_names.iter().cloned());
    v.into_iter().flat_map(|s| [normalize_text(&s), s]).filter(|s| s.len() >= 4).collect()
}

struct Runner {
    fttp: Fttp,
    encoder: BloomEncoder,
    sites: BTreeMap<String, SiteState>,
    last_case: Option<String>,
    run: Vec<(SubmissionMessage, SubmitResponse)>,
    plaintexts: Vec<String>,
    extra: Vec<Message>,
}

fn arg<'a>(args: &'a Value, k: &str) -> &'a str {
    args.get(k).and_then(Value::as_str).unwrap_or_default()
}

impl Runner {
    fn case_arg(&self, args: &Value) -> String {
        match arg(args, "caseId") {
            "@last" => self.last_case.clone().unwrap_or_default(),
            c => c.to_string(),
        }
    }

    fn step(&mut self, a: &Action, who: &Principal, seq: u64) -> Result<Value, FttpError> {
        let site = who.site_id().unwrap_or_default().to_string();
        match a.op {
            Op::Register => {
                self.fttp.register_site(&site)?;
                self.sites.entry(site).or_default();
                Ok(json!({}))
            }
            Op::Submit => {
                let consent = arg(&a.args, "consentId").to_string();
                let identity: IdentityRecord = serde_json::from_value(a.args["identity"].clone())
                    .map_err(|e| FttpError::Config(e.to_string()))?;
                self.plaintexts.extend(names_of(&identity));
                if self.fttp.consent(&consent).is_none() {
                    let subject = format!("{site}/{}", identity.record_id);
                    self.fttp.register_consent(&consent, &site, &subject)?;
                }
                let tx = match arg(&a.args, "txId") {
                    "" => format!("tx-{}-{:x}", a.step, a.seed),
                    t => t.to_string(),
                };
                let enc = encode_identity(&self.encoder, &normalize(&identity)?)?;
                let msg = SubmissionMessage { tx_id: tx, site_id: site.clone(), encoding: enc.to_wire(), consent_ref: consent.clone() };
                let resp = self.fttp.submit_encoding(&msg)?;
                let st = self.sites.entry(site).or_default();
                st.patients.insert(consent.clone(), identity);
                st.diz.insert(resp.diz_pseudonym.clone(), consent);
                if resp.clearing_pending {
                    self.last_case = self.fttp.state.cases.keys().next_back().cloned();
                }
                self.run.push((msg, resp.clone()));
                Ok(serde_json::to_value(resp).expect("serializes"))
            }
            Op::Translate => {
                let target = arg(&a.args, "site");
                let consent = arg(&a.args, "consentId");
                let token = self
                    .sites
                    .get(target)
                    .and_then(|s| s.diz.iter().rev().find(|(_, c)| c.as_str() == consent))
                    .map(|(t, _)| t.clone())
                    .ok_or(FttpError::UnknownPseudonym)?;
                let cross = self.fttp.translate_for_hub(who, &token, target)?;
                self.extra.push(Message {
                    seq,
                    to: Recipient::Hub,
                    body: MessageBody::Translation { diz_pseudonym: token, cross_site_pseudonym: cross.clone() },
                });
                Ok(json!({ "crossSitePseudonym": cross }))
            }
            Op::RequestPlaintext => {
                if who.site_id().is_some() {
                    return Err(FttpError::Unauthorized(who.label()));
                }
                let case = self.case_arg(&a.args);
                self.fttp.request_plaintext(&case)?;
                Ok(serde_json::to_value(self.fttp.case_view(&case, false)?).expect("serializes"))
            }
            Op::ProvidePlaintext => {
                let case = self.case_arg(&a.args);
                let requested: Vec<String> = self
                    .fttp
                    .inbox(&Recipient::site(&site))
                    .into_iter()
                    .rev()
                    .find_map(|m| match &m.body {
                        MessageBody::PlaintextRequest { case_id, diz_pseudonyms } if *case_id == case => {
                            Some(diz_pseudonyms.clone())
                        }
                        _ => None,
                    })
                    .ok_or_else(|| FttpError::NotInvolved(site.clone()))?;
                let st = self.sites.get(&site).ok_or_else(|| FttpError::UnknownSite(site.clone()))?;
                let override_identity: Option<IdentityRecord> = a
                    .args
                    .get("identity")
                    .map(|v| serde_json::from_value(v.clone()).map_err(|e| FttpError::Config(e.to_string())))
                    .transpose()?;
                let mut jobs = Vec::new();
                for token in requested {
                    let identity = match (&override_identity, st.diz.get(&token)) {
                        (Some(i), _) => i.clone(),
                        (None, Some(c)) => st.patients[c].clone(),
                        (None, None) => return Err(FttpError::UnknownPseudonym),
                    };
                    jobs.push((token, identity));
                }
                let mut view = None;
                for (token, identity) in jobs {
                    self.plaintexts.extend(names_of(&identity));
                    view = Some(self.fttp.provide_plaintext(&case, &site, &identity, Some(&token))?);
                }
                Ok(serde_json::to_value(view).expect("serializes"))
            }
            Op::Resolve => {
                let case = self.case_arg(&a.args);
                let verdict: ClearingVerdict = serde_json::from_value(a.args["verdict"].clone())
                    .map_err(|e| FttpError::Config(e.to_string()))?;
                let expected = a.args.get("expectedVersion").and_then(Value::as_u64);
                Ok(serde_json::to_value(self.fttp.resolve_clearing(&case, verdict, who, expected)?).expect("serializes"))
            }
            Op::Withdraw => {
                let consent = arg(&a.args, "consentId");
                match self.fttp.consent(consent) {
                    Some(c) if c.site_id != site => return Err(FttpError::Unauthorized(who.label())),
                    _ => {}
                }
                let rep = self.fttp.withdraw_consent(consent)?;
                if let Some(st) = self.sites.get_mut(&site) {
                    st.patients.remove(consent);
                    st.diz.retain(|_, c| c != consent);
                }
                Ok(serde_json::to_value(rep).expect("serializes"))
            }
        }
    }

    fn probe(&self) -> Probe {
        let bytes = [self.fttp.store().journal.to_bytes(), self.fttp.store().vault.to_bytes()].concat();
        let plaintext_hits = self
            .plaintexts
            .iter()
            .filter(|n| bytes.windows(n.len()).any(|w| w == n.as_bytes()))
            .count();
        let openable_closed = self.fttp.openable_plaintext().iter().filter(|(_, s)| s.is_terminal()).count();
        let withdrawn_encodings = self
            .fttp
            .state
            .consents
            .values()
            .filter(|c| c.status == ConsentStatus::Withdrawn)
            .map(|c| self.fttp.encodings_for_consent(&c.consent_id))
            .sum();
        Probe { plaintext_hits, openable_closed, withdrawn_encodings }
    }
}

/// Runs a script against a fresh in-memory fTTP. Keys, vault keys and
/// the clock all derive from the header seed.
pub fn run_scenario(script: &str) -> Result<ScenarioRun, ScriptError> {
    run_scenario_with(script, FttpConfig::default_preset())
}

pub fn run_scenario_with(script: &str, cfg: FttpConfig) -> Result<ScenarioRun, ScriptError> {
    let (header, actions) = parse_script(script)?;
    let cfg_err = |e: FttpError| ScriptError { line: 0, msg: e.to_string() };
    let mut rng = ChaCha20Rng::seed_from_u64(header.seed);
    let site_keys = KeyRing::new().with(Secret::generate(cfg.bloom.key_id.clone(), &mut rng));
    let hub_keys = KeyRing::new().with(Secret::generate(cfg.hub_key_id.clone(), &mut rng));
    let encoder = BloomEncoder::new(cfg.bloom.clone(), &site_keys).map_err(|e| cfg_err(e.into()))?;
    let store = Store::memory("fttp", Some(header.seed));
    let fttp = Fttp::open(cfg, hub_keys, store, Arc::new(LogicalClock::default())).map_err(cfg_err)?;
    let mut r = Runner {
        fttp,
        encoder,
        sites: BTreeMap::new(),
        last_case: None,
        run: Vec::new(),
        plaintexts: Vec::new(),
        extra: Vec::new(),
    };
    let mut entries = Vec::new();
    for (i, a) in actions.iter().enumerate() {
        let who = Principal::parse(&a.actor).expect("validated");
        let before = r.fttp.messages().len();
        let extra_before = r.extra.len();
        let seq = r.fttp.store().journal.last_seq();
        let outcome = r.step(a, &who, seq);
        let mut messages = r.fttp.messages()[before..].to_vec();
        messages.extend(r.extra[extra_before..].iter().cloned());
        let (result, error) = match outcome {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(e.code().to_string())),
        };
        entries.push(LogEntry {
            seq: i as u64 + 1,
            step: a.step,
            actor: a.actor.clone(),
            op: a.op,
            args: redact(a.op, &a.args),
            result,
            error,
            messages,
            probe: r.probe(),
            state_digest: r.fttp.snapshot_digest(),
        });
    }
    Ok(ScenarioRun {
        log: ScenarioLog { header: LogHeader { format: LOG_FORMAT.into(), version: 1, seed: header.seed }, entries },
        fttp: r.fttp,
        submissions: r.run,
        plaintexts: r.plaintexts,
        extra_messages: r.extra,
    })
}
