//! Invariant scans over a finished scenario run.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::scenario::ScenarioRun;
use super::{ConsentStatus, Principal, Recipient};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScanReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn report(name: &'static str, failures: Vec<String>, checked: usize) -> ScanReport {
    ScanReport {
        name,
        passed: failures.is_empty(),
        detail: if failures.is_empty() { format!("{checked} checked") } else { failures.join("; ") },
    }
}

/// No site-addressed message carries a cross-site pseudonym.
pub fn cross_site_confinement(run: &ScenarioRun) -> ScanReport {
    let f = &run.fttp;
    let tokens: Vec<String> = (1..=f.entry_counter_bound()).filter_map(|e| f.cross_site_token(e).ok()).collect();
    let mut failures = Vec::new();
    let mut checked = 0;
    for entry in &run.log.entries {
        for m in entry.messages.iter().filter(|m| matches!(m.to, Recipient::Site { .. })) {
            checked += 1;
            let text = serde_json::to_string(m).expect("message serializes");
            if let Some(t) = tokens.iter().find(|t| text.contains(t.as_str())) {
                failures.push(format!("step {} sent {t} to a site", entry.step));
            }
        }
        // Results are returned to the acting principal.
        if entry.actor.starts_with("site:") {
            if let Some(r) = &entry.result {
                let text = r.to_string();
                if let Some(t) = tokens.iter().find(|t| text.contains(t.as_str())) {
                    failures.push(format!("step {} returned {t} to a site", entry.step));
                }
            }
        }
    }
    report("cross-site confinement", failures, checked)
}

/// Persisted state holds no plaintext name, and no closed case can still
/// decrypt its plaintext.
pub fn plaintext_confinement(run: &ScenarioRun) -> ScanReport {
    let f = &run.fttp;
    let bytes = [f.store().journal.to_bytes(), f.store().vault.to_bytes()].concat();
    let mut failures: Vec<String> = run
        .plaintexts
        .iter()
        .filter(|n| bytes.windows(n.len()).any(|w| w == n.as_bytes()))
        .map(|n| format!("{n:?} persisted"))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    for (case, status) in f.openable_plaintext() {
        if status.is_terminal() {
            failures.push(format!("{case} is {status:?} but plaintext still opens"));
        }
    }
    for e in run.log.entries.iter().filter(|e| e.probe.plaintext_hits + e.probe.openable_closed > 0) {
        failures.push(format!("step {}: {:?}", e.step, e.probe));
    }
    report("plaintext confinement", failures, run.plaintexts.len())
}

/// Every DIZ pseudonym of one entry translates to the same cross-site
/// pseudonym; distinct entries never share one.
pub fn hierarchy_soundness(run: &ScenarioRun) -> ScanReport {
    let f = &run.fttp;
    let mut failures = Vec::new();
    let mut by_entry: BTreeMap<u64, BTreeSet<String>> = BTreeMap::new();
    let mut checked = 0;
    for (site, m) in &f.state.diz_index {
        let codec = f.codecs().diz(site);
        for (&counter, &entry) in m {
            checked += 1;
            let token = codec.encode(counter).expect("counter in range");
            match f.translate_for_hub(&Principal::Hub, &token, site) {
                Ok(c) => {
                    by_entry.entry(f.state.resolve(entry)).or_default().insert(c);
                }
                Err(e) => failures.push(format!("{site}/{token}: {}", e.code())),
            }
        }
    }
    let mut owners: BTreeMap<&String, u64> = BTreeMap::new();
    for (entry, tokens) in &by_entry {
        if tokens.len() != 1 {
            failures.push(format!("an entry translates to {} tokens", tokens.len()));
        }
        for t in tokens {
            if owners.insert(t, *entry).is_some() {
                failures.push(format!("{t} shared by two entries"));
            }
        }
    }
    if let Err(e) = f.check_invariants() {
        failures.push(e);
    }
    report("pseudonym hierarchy", failures, checked)
}

/// Replaying every submission yields the original response and leaves
/// the state untouched. Submissions under withdrawn consents are skipped.
pub fn idempotent_replay(run: &mut ScenarioRun) -> ScanReport {
    let digest = run.fttp.snapshot_digest();
    let mut failures = Vec::new();
    let mut checked = 0;
    let subs = run.submissions.clone();
    for (msg, resp) in &subs {
        if run.fttp.consent(&msg.consent_ref).is_some_and(|c| c.status == ConsentStatus::Withdrawn) {
            continue;
        }
        checked += 1;
        match run.fttp.submit_encoding(msg) {
            Ok(r) if &r == resp => {}
            Ok(_) => failures.push(format!("{} answered differently", msg.tx_id)),
            Err(e) => failures.push(format!("{}: {}", msg.tx_id, e.code())),
        }
    }
    if run.fttp.snapshot_digest() != digest {
        failures.push("state changed".into());
    }
    report("idempotent submissions", failures, checked)
}

/// No stored encoding is attributable to a withdrawn consent.
pub fn withdrawal_completeness(run: &ScenarioRun) -> ScanReport {
    let f = &run.fttp;
    let withdrawn: Vec<&str> = f
        .state
        .consents
        .values()
        .filter(|c| c.status == ConsentStatus::Withdrawn)
        .map(|c| c.consent_id.as_str())
        .collect();
    let failures = withdrawn
        .iter()
        .filter(|c| f.encodings_for_consent(c) > 0)
        .map(|c| format!("{c} still has {} encodings", f.encodings_for_consent(c)))
        .collect();
    report("withdrawal completeness", failures, withdrawn.len())
}

pub fn run_all(run: &mut ScenarioRun) -> Vec<ScanReport> {
    vec![
        cross_site_confinement(run),
        plaintext_confinement(run),
        hierarchy_soundness(run),
        idempotent_replay(run),
        withdrawal_completeness(run),
    ]
}
