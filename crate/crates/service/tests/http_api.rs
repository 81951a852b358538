mod support;

use axum::http::{Method, StatusCode};
use linkwerk_service::MEDIA_TYPE;
use serde_json::{json, Value};
use support::*;

const GET: Method = Method::GET;
const POST: Method = Method::POST;
const DELETE: Method = Method::DELETE;

fn anna() -> Value {
    serde_json::to_value(person("Anna", "Maier", "1980-05-02")).unwrap()
}

fn petra() -> Value {
    serde_json::to_value(person("Petra", "Maier", "1980-05-02")).unwrap()
}

async fn consent_and_submit(
    s: &std::sync::Arc<linkwerk_service::AppState>,
    key: &str,
    site: &str,
    consent: &str,
    tx: &str,
    who: &Value,
) -> Value {
    let r = call(s, POST, "/v1/fttp/consents", Some(key), Some(json!({"consentId": consent, "subjectRef": format!("subj-{consent}")}))).await;
    assert_eq!(r.status, StatusCode::OK, "{:?}", r.body);
    let rec: linkwerk::idmodel::IdentityRecord = serde_json::from_value(who.clone()).unwrap();
    let body = json!({"txId": tx, "siteId": site, "encoding": wire(&rec), "consentRef": consent});
    let r = call(s, POST, "/v1/fttp/submissions", Some(key), Some(body)).await;
    assert_eq!(r.status, StatusCode::OK, "{:?}", r.body);
    r.body
}

/// A at entry one, C with a gray-zone variant: one open case.
async fn with_open_case() -> (std::sync::Arc<linkwerk_service::AppState>, String) {
    let s = state(None);
    consent_and_submit(&s, SITE_A, "A", "ca1", "tA1", &anna()).await;
    let r = consent_and_submit(&s, SITE_C, "C", "cc1", "tC1", &petra()).await;
    assert_eq!(r["outcome"]["kind"], "POSSIBLE_MATCH");
    let cases = call(&s, GET, "/v1/clearing/cases?status=OPEN", Some(CLEARING), None).await;
    let id = cases.body["cases"][0]["caseId"].as_str().unwrap().to_string();
    (s, id)
}

#[tokio::test]
async fn unknown_or_missing_key_is_unauthenticated() {
    let s = state(None);
    for key in [None, Some("no-such-key")] {
        let r = call(&s, GET, "/v1/patients?domain=study", key, None).await;
        assert_eq!(r.status, StatusCode::UNAUTHORIZED);
        assert_eq!(r.code(), "UNAUTHENTICATED");
        assert_eq!(r.content_type, MEDIA_TYPE);
    }
    assert_eq!(call(&s, GET, "/v1/health", None, None).await.status, StatusCode::OK);
}

#[tokio::test]
async fn empty_state_has_no_patients() {
    let dir = tempfile::tempdir().unwrap();
    let s = state(Some(dir.path()));
    let r = call(&s, GET, "/v1/patients?domain=study", Some(ADMIN), None).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.body["count"], 0);
    assert_eq!(r.body["patients"], json!([]));
}

#[tokio::test]
async fn patient_lifecycle_and_identity_access() {
    let s = state(None);
    let body = json!({"identity": anna(), "domain": "clinic-a"});
    let before = events(&s);
    let r = call(&s, POST, "/v1/patients", Some(SITE_A), Some(body.clone())).await;
    assert_eq!(r.status, StatusCode::OK, "{:?}", r.body);
    assert_eq!(r.body["outcome"], "NEW");
    assert_eq!(events(&s), before + 1);
    let psn = r.body["pseudonym"].as_str().unwrap().to_string();

    let again = call(&s, POST, "/v1/patients", Some(SITE_A), Some(body)).await;
    assert_eq!(again.body["outcome"], "EXISTING");
    assert_eq!(again.body["pseudonym"], psn.as_str());

    let denied = call(&s, POST, "/v1/patients", Some(SITE_B), Some(json!({"identity": anna(), "domain": "clinic-a"}))).await;
    assert_eq!(denied.status, StatusCode::FORBIDDEN);

    let path = format!("/v1/patients/clinic-a/{psn}");
    for (key, status) in [(SITE_A, 200), (CLEARING, 200), (SITE_B, 403), (HUB, 403), (ADMIN, 403)] {
        let r = call(&s, GET, &path, Some(key), None).await;
        assert_eq!(r.status.as_u16(), status, "{key}: {:?}", r.body);
        if status == 200 {
            assert_eq!(r.body["firstName"], "ANNA");
        }
    }
    let missing = call(&s, GET, "/v1/patients/clinic-a/0000000000", Some(CLEARING), None).await;
    assert_eq!(missing.status, StatusCode::NOT_FOUND, "{:?}", missing.body);

    let del = call(&s, DELETE, &path, Some(SITE_B), Some(json!({"reason": "WITHDRAWAL"}))).await;
    assert_eq!(del.status, StatusCode::FORBIDDEN);
    let before = events(&s);
    let del = call(&s, DELETE, &path, Some(SITE_A), Some(json!({"reason": "WITHDRAWAL"}))).await;
    assert_eq!(del.status, StatusCode::OK, "{:?}", del.body);
    assert!(del.body["tombstone"].as_str().unwrap().starts_with("TOMB-"));
    assert_eq!(events(&s), before + 1);
    assert_eq!(call(&s, GET, &path, Some(CLEARING), None).await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn kvnr_conflict_is_a_409() {
    let s = state(None);
    let mut a = anna();
    a["kvnr"] = json!("A123456789");
    let mut b = serde_json::to_value(person("Bernd", "Kurz", "1950-01-01")).unwrap();
    b["kvnr"] = json!("A123456789");
    assert_eq!(call(&s, POST, "/v1/patients", Some(ADMIN), Some(json!({"identity": a, "domain": "study"}))).await.status, 200);
    let r = call(&s, POST, "/v1/patients", Some(ADMIN), Some(json!({"identity": b, "domain": "study"}))).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert!(r.code().starts_with("KVNR_CONFLICT"), "{:?}", r.body);
}

#[tokio::test]
async fn malformed_bodies_are_400() {
    let s = state(None);
    let r = call(&s, POST, "/v1/patients", Some(ADMIN), Some(json!({"domain": "study"}))).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.code(), "BAD_REQUEST");
    let r = call(&s, POST, "/v1/fttp/submissions", Some(SITE_A), Some(json!({"txId": 1}))).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn submission_translation_and_site_confinement() {
    let s = state(None);
    let a = consent_and_submit(&s, SITE_A, "A", "ca1", "tA1", &anna()).await;
    assert_eq!(a["outcome"]["kind"], "NON_MATCH");
    let diz = a["dizPseudonym"].as_str().unwrap();

    // Another site cannot submit in A's name.
    let forged = json!({"txId": "x", "siteId": "A", "encoding": wire(&person("X", "Y", "1990-01-01")), "consentRef": "ca1"});
    assert_eq!(call(&s, POST, "/v1/fttp/submissions", Some(SITE_B), Some(forged)).await.status, StatusCode::FORBIDDEN);

    let t = json!({"dizPseudonym": diz, "siteId": "A"});
    let as_site = call(&s, POST, "/v1/fttp/translate", Some(SITE_A), Some(t.clone())).await;
    assert_eq!(as_site.status, StatusCode::FORBIDDEN);
    assert_eq!(as_site.code(), "CALLER_IS_SITE");
    assert_eq!(call(&s, POST, "/v1/fttp/translate", Some(CLEARING), Some(t.clone())).await.status, StatusCode::FORBIDDEN);
    let hub = call(&s, POST, "/v1/fttp/translate", Some(HUB), Some(t)).await;
    assert_eq!(hub.status, StatusCode::OK);
    let cross = hub.body["crossSitePseudonym"].as_str().unwrap().to_string();
    assert_ne!(cross, diz);

    let inbox = call(&s, GET, "/v1/messages", Some(SITE_A), None).await;
    let text = inbox.body.to_string();
    assert!(text.contains(diz));
    assert!(!text.contains(&cross));
    let b_inbox = call(&s, GET, "/v1/messages", Some(SITE_B), None).await;
    assert_eq!(b_inbox.body["messages"], json!([]));
}

#[tokio::test]
async fn clearing_workflow_over_http() {
    let (s, case) = with_open_case().await;
    let base = format!("/v1/clearing/cases/{case}");

    // Sites and the hub see no cases; admin sees them without plaintext.
    for key in [SITE_A, SITE_C, HUB] {
        assert_eq!(call(&s, GET, "/v1/clearing/cases", Some(key), None).await.status, StatusCode::FORBIDDEN);
    }
    let listed = call(&s, GET, "/v1/clearing/cases?status=OPEN", Some(ADMIN), None).await;
    assert_eq!(listed.body["cases"].as_array().unwrap().len(), 1);

    assert_eq!(call(&s, POST, &format!("{base}/request"), Some(SITE_A), None).await.status, StatusCode::FORBIDDEN);
    let req = call(&s, POST, &format!("{base}/request"), Some(CLEARING), None).await;
    assert_eq!(req.status, StatusCode::OK, "{:?}", req.body);
    assert_eq!(req.body["status"], "AWAITING_PLAINTEXT");

    // A site may only fill its own slot.
    let wrong = json!({"siteId": "A", "identity": anna()});
    assert_eq!(call(&s, POST, &format!("{base}/plaintext"), Some(SITE_C), Some(wrong)).await.status, StatusCode::FORBIDDEN);
    let b_slot = json!({"siteId": "B", "identity": anna()});
    let r = call(&s, POST, &format!("{base}/plaintext"), Some(SITE_B), Some(b_slot)).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY, "{:?}", r.body);
    assert_eq!(r.code(), "NOT_INVOLVED");

    let early = call(&s, POST, &format!("{base}/resolution"), Some(CLEARING), Some(json!({"verdict": "MERGE"}))).await;
    assert_eq!(early.status, StatusCode::CONFLICT);
    for (key, site, who) in [(SITE_A, "A", anna()), (SITE_C, "C", petra())] {
        let r = call(&s, POST, &format!("{base}/plaintext"), Some(key), Some(json!({"siteId": site, "identity": who}))).await;
        assert_eq!(r.status, StatusCode::OK, "{:?}", r.body);
    }

    let admin_view = call(&s, GET, &base, Some(ADMIN), None).await;
    assert!(admin_view.body["slots"].as_array().unwrap().iter().all(|s| s.get("identity").is_none()));
    let revealed = call(&s, GET, &base, Some(CLEARING), None).await;
    assert_eq!(revealed.body["slots"][1]["identity"]["firstName"], "Petra");
    let version = revealed.body["version"].as_u64().unwrap();
    let fields = revealed.body["fieldComparison"].as_array().unwrap();
    let sim = |f: &str| fields.iter().find(|c| c["field"] == f).unwrap()["similarity"].as_f64().unwrap();
    assert_eq!(sim("lastName"), 1.0);
    assert!(sim("firstName") < 0.5);
    assert_eq!(admin_view.body["fieldComparison"], json!([]));

    assert_eq!(
        call(&s, POST, &format!("{base}/resolution"), Some(ADMIN), Some(json!({"verdict": "MERGE"}))).await.status,
        StatusCode::FORBIDDEN
    );
    let stale = json!({"verdict": "MERGE", "version": version + 7});
    let r = call(&s, POST, &format!("{base}/resolution"), Some(CLEARING), Some(stale)).await;
    assert_eq!(r.code(), "VERSION_CONFLICT");
    assert_eq!(r.status, StatusCode::CONFLICT);

    let before = events(&s);
    let ok = json!({"verdict": "MERGE", "version": version});
    let r = call(&s, POST, &format!("{base}/resolution"), Some(CLEARING), Some(ok.clone())).await;
    assert_eq!(r.status, StatusCode::OK, "{:?}", r.body);
    assert_eq!(r.body["status"], "RESOLVED_MERGE");
    assert_eq!(events(&s), before + 1);
    let again = call(&s, POST, &format!("{base}/resolution"), Some(CLEARING), Some(ok)).await;
    assert_eq!(again.status, StatusCode::CONFLICT);

    let stats = call(&s, GET, "/v1/fttp/stats", Some(ADMIN), None).await;
    assert_eq!(stats.body["entries"], 1);
    let after = call(&s, GET, &base, Some(CLEARING), None).await;
    assert!(after.body["slots"].as_array().unwrap().iter().all(|s| s.get("identity").is_none()));

    let audit = call(&s, GET, "/v1/audit?stream=fttp", Some(ADMIN), None).await;
    let resolved: Vec<&Value> = audit.body["fttp"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|a| a["caseId"] == case.as_str() && a["action"] == "CLEARING_RESOLVED")
        .collect();
    assert_eq!(resolved.len(), 1, "{}", audit.body);
    assert!(!audit.body.to_string().contains("Petra"));
}

#[tokio::test]
async fn withdrawal_is_limited_to_the_owning_site() {
    let (s, case) = with_open_case().await;
    let r = call(&s, POST, "/v1/consents/cc1/withdrawal", Some(SITE_A), None).await;
    assert_eq!(r.status, StatusCode::FORBIDDEN);
    let r = call(&s, POST, "/v1/consents/cc1/withdrawal", Some(HUB), None).await;
    assert_eq!(r.status, StatusCode::FORBIDDEN);
    let r = call(&s, POST, "/v1/consents/nope/withdrawal", Some(SITE_C), None).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    let before = events(&s);
    let r = call(&s, POST, "/v1/consents/cc1/withdrawal", Some(SITE_C), None).await;
    assert_eq!(r.status, StatusCode::OK, "{:?}", r.body);
    assert_eq!(r.body["voidedCases"], json!([case]));
    assert_eq!(events(&s), before + 1);
    let r = call(&s, POST, "/v1/consents/cc1/withdrawal", Some(SITE_C), None).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    let v = call(&s, POST, &format!("/v1/clearing/cases/{case}/resolution"), Some(CLEARING), Some(json!({"verdict": "MERGE"}))).await;
    assert_eq!(v.status, StatusCode::CONFLICT);
}

/// Rejected calls append nothing; accepted mutations append exactly one event.
#[tokio::test]
async fn authorization_matrix() {
    let (s, case) = with_open_case().await;
    let all = [SITE_A, SITE_B, SITE_C, HUB, CLEARING, ADMIN];
    let diz = {
        let f = s.fttp.read().unwrap();
        f.messages()
            .iter()
            .find_map(|m| match &m.body {
                linkwerk::fttp::MessageBody::SubmissionResult { response } if m.to == linkwerk::fttp::Recipient::site("A") => {
                    Some(response.diz_pseudonym.clone())
                }
                _ => None,
            })
            .unwrap()
    };
    // (method, path, body, principals allowed); every POST except translate mutates
    let rows: Vec<(Method, String, Option<Value>, Vec<&str>)> = vec![
        (GET, "/v1/patients?domain=study".into(), None, vec![SITE_A, SITE_B, SITE_C, CLEARING, ADMIN]),
        (GET, "/v1/patients?domain=clinic-a".into(), None, vec![SITE_A, CLEARING, ADMIN]),
        (POST, "/v1/fttp/translate".into(), Some(json!({"dizPseudonym": diz, "siteId": "A"})), vec![HUB]),
        (GET, "/v1/fttp/stats".into(), None, vec![CLEARING, ADMIN]),
        (GET, "/v1/clearing/cases".into(), None, vec![CLEARING, ADMIN]),
        (GET, format!("/v1/clearing/cases/{case}"), None, vec![CLEARING, ADMIN]),
        (GET, "/v1/audit".into(), None, vec![CLEARING, ADMIN]),
        (GET, "/v1/admin/snapshot".into(), None, vec![ADMIN]),
        (POST, "/v1/fttp/consents".into(), Some(json!({"consentId": "m-?", "subjectRef": "s"})), vec![SITE_A, SITE_B, SITE_C]),
        (POST, "/v1/patients".into(), Some(json!({"identity": anna(), "domain": "clinic-a"})), vec![SITE_A, ADMIN]),
        (POST, format!("/v1/clearing/cases/{case}/request"), None, vec![CLEARING]),
    ];
    for (method, path, body, allowed) in rows {
        for key in all {
            let body = body.clone().map(|b| serde_json::from_str(&b.to_string().replace("m-?", &format!("m-{key}"))).unwrap());
            let before = events(&s);
            let r = call(&s, method.clone(), &path, Some(key), body).await;
            let mutating = method != GET && !path.ends_with("/translate");
            if allowed.contains(&key) {
                assert!(r.status.is_success(), "{method} {path} as {key}: {:?}", r.body);
                if mutating {
                    assert_eq!(events(&s), before + 1, "{method} {path} as {key}");
                }
            } else {
                assert_eq!(r.status, StatusCode::FORBIDDEN, "{method} {path} as {key}: {:?}", r.body);
                assert_eq!(events(&s), before, "{method} {path} as {key}");
            }
            if path.ends_with("/request") && r.status.is_success() {
                break;
            }
        }
    }
}

#[tokio::test]
async fn restart_replays_to_the_same_state() {
    let dir = tempfile::tempdir().unwrap();
    let s = state(Some(dir.path()));
    call(&s, POST, "/v1/patients", Some(SITE_A), Some(json!({"identity": anna(), "domain": "clinic-a"}))).await;
    consent_and_submit(&s, SITE_A, "A", "ca1", "tA1", &anna()).await;
    consent_and_submit(&s, SITE_C, "C", "cc1", "tC1", &petra()).await;
    let snap = call(&s, GET, "/v1/admin/snapshot", Some(ADMIN), None).await.body;
    let (reg, fttp) = (s.registry.read().unwrap().snapshot(), s.fttp.read().unwrap().snapshot());
    drop(s);

    let s = state(Some(dir.path()));
    assert_eq!(call(&s, GET, "/v1/admin/snapshot", Some(ADMIN), None).await.body, snap);
    assert_eq!(s.registry.read().unwrap().snapshot(), reg);
    assert_eq!(s.fttp.read().unwrap().snapshot(), fttp);
    assert!(s.fttp.read().unwrap().check_invariants().is_ok());
    let patients = call(&s, GET, "/v1/patients?domain=clinic-a", Some(SITE_A), None).await;
    assert_eq!(patients.body["count"], 1);
}
