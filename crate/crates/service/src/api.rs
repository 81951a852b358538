//! JSON-over-HTTP API. Every mutation goes through one write lock per state
//! machine; reads share a read lock.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use linkwerk::fttp::{
    CaseStatus, CaseView, ClearingVerdict, Fttp, FttpError, Principal, Recipient, SubmissionMessage,
};
use linkwerk::idmodel::{levenshtein_similarity, normalize, Field, IdentityRecord, NormalizedIdentity};
use linkwerk::registry::{DeleteReason, Registry, RegistryError};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const MEDIA_TYPE: &str = "application/vnd.linkwerk.v1+json";
pub const API_KEY_HEADER: &str = "x-api-key";

pub struct AppState {
    pub registry: RwLock<Registry>,
    pub fttp: RwLock<Fttp>,
    pub api_keys: BTreeMap<String, Principal>,
}

pub type Shared = Arc<AppState>;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError { status, code: code.into(), message: message.into() }
    }

    fn forbidden(p: &Principal) -> Self {
        Self::new(StatusCode::FORBIDDEN, "UNAUTHORIZED", format!("{} may not do this", p.label()))
    }

    fn from_code(code: &str, message: String) -> Self {
        let status = match code {
            "UNAUTHORIZED" | "CALLER_IS_SITE" => StatusCode::FORBIDDEN,
            "NOT_FOUND" | "UNKNOWN_DOMAIN" | "UNKNOWN_PATIENT" | "UNKNOWN_CASE" | "UNKNOWN_CONSENT" | "UNKNOWN_SITE"
            | "UNKNOWN_PSEUDONYM" | "INVALID_PSEUDONYM" => StatusCode::NOT_FOUND,
            "STORAGE_ERROR" => StatusCode::INTERNAL_SERVER_ERROR,
            c if c.starts_with("KVNR_CONFLICT")
                || c.starts_with("DUPLICATE")
                || matches!(c, "WRONG_STATUS" | "VERSION_CONFLICT" | "ALREADY_WITHDRAWN" | "CONSENT_INACTIVE" | "SELF_MERGE") =>
            {
                StatusCode::CONFLICT
            }
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError { status, code: code.into(), message }
    }
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        Self::from_code(e.code(), e.to_string())
    }
}

impl From<FttpError> for ApiError {
    fn from(e: FttpError) -> Self {
        Self::from_code(e.code(), e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BAD_REQUEST", e.body_text())
    }
}

fn versioned(status: StatusCode, body: Value) -> Response {
    let mut r = (status, Json(body)).into_response();
    r.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static(MEDIA_TYPE));
    r
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        versioned(self.status, json!({ "error": { "code": self.code, "message": self.message } }))
    }
}

type ApiResult = Result<Response, ApiError>;

fn ok<T: Serialize>(v: T) -> ApiResult {
    Ok(versioned(StatusCode::OK, serde_json::to_value(v).expect("response serializes")))
}

fn body<T: DeserializeOwned>(b: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    Ok(b?.0)
}

fn principal(state: &AppState, headers: &HeaderMap) -> Result<Principal, ApiError> {
    let key = headers
        .get(API_KEY_HEADER)
        .and_then(|v| v.to_str().ok())
        .or_else(|| headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()?.strip_prefix("Bearer ")));
    key.and_then(|k| state.api_keys.get(k))
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "UNAUTHENTICATED", "unknown or missing API key"))
}

fn lock_err<T>(_: T) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "STORAGE_ERROR", "state lock poisoned")
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/v1/health", get(|| async { ok(json!({ "status": "ok" })) }))
        .route("/v1/patients", post(add_patient).get(list_patients))
        .route("/v1/patients/{domain}/{psn}", get(get_patient).delete(delete_patient))
        .route("/v1/fttp/consents", post(register_consent))
        .route("/v1/fttp/submissions", post(submit))
        .route("/v1/fttp/translate", post(translate))
        .route("/v1/fttp/stats", get(fttp_stats))
        .route("/v1/messages", get(messages))
        .route("/v1/clearing/cases", get(list_cases))
        .route("/v1/clearing/cases/{id}", get(get_case))
        .route("/v1/clearing/cases/{id}/request", post(request_plaintext))
        .route("/v1/clearing/cases/{id}/plaintext", post(provide_plaintext))
        .route("/v1/clearing/cases/{id}/resolution", post(resolve))
        .route("/v1/consents/{id}/withdrawal", post(withdraw))
        .route("/v1/audit", get(audit))
        .route("/v1/admin/snapshot", get(snapshot))
        .with_state(state)
}

/// Sites may touch a domain only when they own it or nobody does.
fn site_may_use(p: &Principal, owner: Option<&str>) -> bool {
    match (p, owner) {
        (Principal::Site { site_id }, Some(o)) => site_id == o,
        (Principal::Site { .. }, None) => true,
        _ => false,
    }
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct AddPatient {
    identity: IdentityRecord,
    domain: String,
}

async fn add_patient(State(s): State<Shared>, h: HeaderMap, b: Result<Json<AddPatient>, JsonRejection>) -> ApiResult {
    let p = principal(&s, &h)?;
    let req = body(b)?;
    let mut reg = s.registry.write().map_err(lock_err)?;
    let owner = reg.domain(&req.domain)?.owner_site.clone();
    if p != Principal::Admin && !site_may_use(&p, owner.as_deref()) {
        return Err(ApiError::forbidden(&p));
    }
    let r = reg.add_patient(&req.identity, &req.domain)?;
    ok(json!({ "pseudonym": r.pseudonym.token, "domain": r.pseudonym.domain_id, "outcome": r.outcome }))
}

#[derive(Deserialize)]
struct DomainQuery {
    domain: String,
}

async fn list_patients(State(s): State<Shared>, h: HeaderMap, Query(q): Query<DomainQuery>) -> ApiResult {
    let p = principal(&s, &h)?;
    let reg = s.registry.read().map_err(lock_err)?;
    let owner = reg.domain(&q.domain)?.owner_site.clone();
    let allowed = matches!(p, Principal::Admin | Principal::ClearingActor { .. }) || site_may_use(&p, owner.as_deref());
    if !allowed {
        return Err(ApiError::forbidden(&p));
    }
    let patients = reg
        .entries()
        .map(|e| reg.derive_pseudonym(e.id, &q.domain).map(|d| d.token))
        .collect::<Result<Vec<_>, _>>()?;
    ok(json!({ "domain": q.domain, "count": patients.len(), "patients": patients }))
}

async fn get_patient(State(s): State<Shared>, h: HeaderMap, Path((domain, psn)): Path<(String, String)>) -> ApiResult {
    let p = principal(&s, &h)?;
    let reg = s.registry.read().map_err(lock_err)?;
    let owner = reg.domain(&domain)?.owner_site.clone();
    let allowed = match &p {
        Principal::ClearingActor { .. } => true,
        Principal::Site { site_id } => owner.as_deref() == Some(site_id),
        _ => false,
    };
    if !allowed {
        return Err(ApiError::forbidden(&p));
    }
    let id = reg.resolve(&domain, &psn)?;
    ok(reg.main_identity(id)?.to_record())
}

#[derive(Deserialize)]
struct DeleteBody {
    reason: DeleteReason,
}

async fn delete_patient(
    State(s): State<Shared>,
    h: HeaderMap,
    Path((domain, psn)): Path<(String, String)>,
    b: Result<Json<DeleteBody>, JsonRejection>,
) -> ApiResult {
    let p = principal(&s, &h)?;
    let req = body(b)?;
    let mut reg = s.registry.write().map_err(lock_err)?;
    let owner = reg.domain(&domain)?.owner_site.clone();
    let allowed = p == Principal::Admin || (owner.is_some() && site_may_use(&p, owner.as_deref()));
    if !allowed {
        return Err(ApiError::forbidden(&p));
    }
    let id = reg.resolve(&domain, &psn)?;
    ok(reg.delete_patient(id, req.reason)?)
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct ConsentBody {
    consent_id: String,
    subject_ref: String,
}

async fn register_consent(State(s): State<Shared>, h: HeaderMap, b: Result<Json<ConsentBody>, JsonRejection>) -> ApiResult {
    let p = principal(&s, &h)?;
    let req = body(b)?;
    let Principal::Site { site_id } = &p else {
        return Err(ApiError::forbidden(&p));
    };
    let mut f = s.fttp.write().map_err(lock_err)?;
    ok(f.register_consent(&req.consent_id, site_id, &req.subject_ref)?)
}

async fn submit(State(s): State<Shared>, h: HeaderMap, b: Result<Json<SubmissionMessage>, JsonRejection>) -> ApiResult {
    let p = principal(&s, &h)?;
    let msg = body(b)?;
    if p.site_id() != Some(msg.site_id.as_str()) {
        return Err(ApiError::forbidden(&p));
    }
    let mut f = s.fttp.write().map_err(lock_err)?;
    ok(f.submit_encoding(&msg)?)
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct TranslateBody {
    diz_pseudonym: String,
    site_id: String,
}

async fn translate(State(s): State<Shared>, h: HeaderMap, b: Result<Json<TranslateBody>, JsonRejection>) -> ApiResult {
    let p = principal(&s, &h)?;
    let req = body(b)?;
    let f = s.fttp.read().map_err(lock_err)?;
    let cross = f.translate_for_hub(&p, &req.diz_pseudonym, &req.site_id)?;
    ok(json!({ "crossSitePseudonym": cross }))
}

fn admin_or_clearing(p: &Principal) -> Result<(), ApiError> {
    match p {
        Principal::Admin | Principal::ClearingActor { .. } => Ok(()),
        _ => Err(ApiError::forbidden(p)),
    }
}

async fn fttp_stats(State(s): State<Shared>, h: HeaderMap) -> ApiResult {
    let p = principal(&s, &h)?;
    admin_or_clearing(&p)?;
    let f = s.fttp.read().map_err(lock_err)?;
    let mut by_status: BTreeMap<String, usize> = BTreeMap::new();
    for c in f.cases(None, false)? {
        *by_status.entry(serde_json::to_value(c.status).expect("enum").as_str().unwrap_or_default().to_string()).or_default() += 1;
    }
    ok(json!({ "entries": f.entry_count(), "encodings": f.encoding_count(), "cases": by_status }))
}

#[derive(Deserialize)]
struct SinceQuery {
    #[serde(default)]
    since: u64,
    #[serde(default)]
    stream: Option<String>,
}

async fn messages(State(s): State<Shared>, h: HeaderMap, Query(q): Query<SinceQuery>) -> ApiResult {
    let p = principal(&s, &h)?;
    let f = s.fttp.read().map_err(lock_err)?;
    let to = match &p {
        Principal::Site { site_id } => Some(Recipient::site(site_id)),
        Principal::Hub => Some(Recipient::Hub),
        Principal::ClearingActor { .. } => Some(Recipient::Clearing),
        Principal::Admin => None,
    };
    let msgs: Vec<_> = f
        .messages()
        .iter()
        .filter(|m| m.seq > q.since && to.as_ref().is_none_or(|t| &m.to == t))
        .collect();
    ok(json!({ "messages": msgs }))
}

#[derive(Deserialize)]
struct StatusQuery {
    #[serde(default)]
    status: Option<CaseStatus>,
}

async fn list_cases(State(s): State<Shared>, h: HeaderMap, Query(q): Query<StatusQuery>) -> ApiResult {
    let p = principal(&s, &h)?;
    admin_or_clearing(&p)?;
    let f = s.fttp.read().map_err(lock_err)?;
    let reveal = matches!(p, Principal::ClearingActor { .. });
    ok(json!({ "cases": f.cases(q.status, reveal)? }))
}

const COMPARED: [Field; 10] = [
    Field::FirstName,
    Field::LastName,
    Field::BirthDate,
    Field::Sex,
    Field::Street,
    Field::HouseNumber,
    Field::PostalCode,
    Field::City,
    Field::BirthPlace,
    Field::Kvnr,
];

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct FieldComparison {
    field: &'static str,
    /// Slot index compared against slot 0.
    slot: usize,
    similarity: Option<f64>,
}

/// Normalized-value similarity of every filled slot against the first.
fn compare_slots(view: &CaseView) -> Vec<FieldComparison> {
    let normalized: Vec<Option<NormalizedIdentity>> =
        view.slots.iter().map(|s| s.identity.as_ref().and_then(|r| normalize(r).ok())).collect();
    let Some(Some(first)) = normalized.first() else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for (i, other) in normalized.iter().enumerate().skip(1) {
        let Some(other) = other else { continue };
        for f in COMPARED {
            let similarity = match (first.field(f), other.field(f)) {
                (Some(a), Some(b)) => Some(levenshtein_similarity(&a, &b)),
                _ => None,
            };
            out.push(FieldComparison { field: f.name(), slot: i, similarity });
        }
    }
    out
}

async fn get_case(State(s): State<Shared>, h: HeaderMap, Path(id): Path<String>) -> ApiResult {
    let p = principal(&s, &h)?;
    admin_or_clearing(&p)?;
    let f = s.fttp.read().map_err(lock_err)?;
    let view = f.case_view(&id, matches!(p, Principal::ClearingActor { .. }))?;
    let fields = compare_slots(&view);
    let mut body = serde_json::to_value(&view).expect("view serializes");
    body["fieldComparison"] = serde_json::to_value(fields).expect("serializes");
    ok(body)
}

async fn request_plaintext(State(s): State<Shared>, h: HeaderMap, Path(id): Path<String>) -> ApiResult {
    let p = principal(&s, &h)?;
    admin_or_clearing(&p)?;
    let mut f = s.fttp.write().map_err(lock_err)?;
    f.request_plaintext(&id)?;
    ok(f.case_view(&id, false)?)
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct PlaintextBody {
    site_id: String,
    identity: IdentityRecord,
    #[serde(default)]
    diz_pseudonym: Option<String>,
}

async fn provide_plaintext(
    State(s): State<Shared>,
    h: HeaderMap,
    Path(id): Path<String>,
    b: Result<Json<PlaintextBody>, JsonRejection>,
) -> ApiResult {
    let p = principal(&s, &h)?;
    let req = body(b)?;
    if p.site_id() != Some(req.site_id.as_str()) {
        return Err(ApiError::forbidden(&p));
    }
    let mut f = s.fttp.write().map_err(lock_err)?;
    ok(f.provide_plaintext(&id, &req.site_id, &req.identity, req.diz_pseudonym.as_deref())?)
}

#[derive(Deserialize)]
struct ResolutionBody {
    verdict: ClearingVerdict,
    #[serde(default)]
    version: Option<u64>,
}

async fn resolve(
    State(s): State<Shared>,
    h: HeaderMap,
    Path(id): Path<String>,
    b: Result<Json<ResolutionBody>, JsonRejection>,
) -> ApiResult {
    let p = principal(&s, &h)?;
    let req = body(b)?;
    let mut f = s.fttp.write().map_err(lock_err)?;
    ok(f.resolve_clearing(&id, req.verdict, &p, req.version)?)
}

async fn withdraw(State(s): State<Shared>, h: HeaderMap, Path(id): Path<String>) -> ApiResult {
    let p = principal(&s, &h)?;
    let mut f = s.fttp.write().map_err(lock_err)?;
    let owner = f.consent(&id).map(|c| c.site_id.clone());
    match (&p, owner) {
        (Principal::Admin, _) => {}
        (Principal::Site { site_id }, Some(o)) if *site_id == o => {}
        (Principal::Site { .. }, None) => return Err(FttpError::UnknownConsent(id).into()),
        _ => return Err(ApiError::forbidden(&p)),
    }
    ok(f.withdraw_consent(&id)?)
}

async fn audit(State(s): State<Shared>, h: HeaderMap, Query(q): Query<SinceQuery>) -> ApiResult {
    let p = principal(&s, &h)?;
    admin_or_clearing(&p)?;
    let mut out = serde_json::Map::new();
    let want = |name: &str| q.stream.as_deref().is_none_or(|s| s == name);
    if want("registry") {
        let reg = s.registry.read().map_err(lock_err)?;
        out.insert("registry".into(), serde_json::to_value(reg.audit(q.since)).expect("serializes"));
    }
    if want("fttp") {
        let f = s.fttp.read().map_err(lock_err)?;
        out.insert("fttp".into(), serde_json::to_value(f.audit(q.since)).expect("serializes"));
    }
    if out.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "BAD_REQUEST", "stream is registry or fttp"));
    }
    ok(Value::Object(out))
}

#[derive(Deserialize)]
struct SnapshotQuery {
    #[serde(default)]
    full: bool,
}

/// Digests of both states; `full=true` adds the serialized states.
async fn snapshot(State(s): State<Shared>, h: HeaderMap, Query(q): Query<SnapshotQuery>) -> ApiResult {
    let p = principal(&s, &h)?;
    if p != Principal::Admin {
        return Err(ApiError::forbidden(&p));
    }
    let reg = s.registry.read().map_err(lock_err)?;
    let f = s.fttp.read().map_err(lock_err)?;
    let mut body = json!({
        "registry": { "seq": reg.store().journal.last_seq(), "digest": reg.snapshot_digest(), "patients": reg.len() },
        "fttp": { "seq": f.store().journal.last_seq(), "digest": f.snapshot_digest(), "entries": f.entry_count() },
    });
    if q.full {
        let text = |b: Vec<u8>| String::from_utf8(b).expect("JSON snapshot");
        body["registry"]["state"] = text(reg.snapshot()).into();
        body["fttp"]["state"] = text(f.snapshot()).into();
    }
    ok(body)
}
