#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use linkwerk::fttp::{encode_identity, FttpConfig};
use linkwerk::idmodel::{normalize, IdentityRecord, PartialDate, Sex};
use linkwerk::pprl::{BloomEncoder, KeyRing, Secret};
use linkwerk::store::LogicalClock;
use linkwerk_service::{open_state, router, AppState, ServiceConfig};
use serde_json::Value;
use tower::ServiceExt;

pub const CONFIG: &str = r#"{
  "registry": {
    "linkage": { "preset": "registry-probabilistic" },
    "registryKeyId": "registry",
    "domains": [
      { "domainId": "study", "derivationKeyId": "psn" },
      { "domainId": "clinic-a", "derivationKeyId": "psn", "ownerSite": "A" }
    ]
  },
  "sites": ["A", "B", "C"],
  "apiKeys": [
    { "key": "key-site-a", "principal": { "kind": "SITE", "siteId": "A" } },
    { "key": "key-site-b", "principal": { "kind": "SITE", "siteId": "B" } },
    { "key": "key-site-c", "principal": { "kind": "SITE", "siteId": "C" } },
    { "key": "key-hub-01", "principal": { "kind": "HUB" } },
    { "key": "key-clearing", "principal": { "kind": "CLEARING_ACTOR", "name": "dr-k" } },
    { "key": "key-admin-1", "principal": { "kind": "ADMIN" } }
  ]
}"#;

pub const SITE_A: &str = "key-site-a";
pub const SITE_B: &str = "key-site-b";
pub const SITE_C: &str = "key-site-c";
pub const HUB: &str = "key-hub-01";
pub const CLEARING: &str = "key-clearing";
pub const ADMIN: &str = "key-admin-1";

pub fn keys() -> KeyRing {
    KeyRing::new()
        .with(Secret::new("bloom", vec![3u8; 32]))
        .with(Secret::new("fttp", vec![4u8; 32]))
        .with(Secret::new("registry", vec![5u8; 32]))
        .with(Secret::new("psn", vec![6u8; 32]))
}

pub fn config(state_dir: Option<&Path>) -> ServiceConfig {
    let mut cfg = ServiceConfig::parse(CONFIG, "test-config.json").unwrap();
    cfg.state_dir = state_dir.map(Path::to_path_buf);
    cfg
}

pub fn state(state_dir: Option<&Path>) -> Arc<AppState> {
    Arc::new(open_state(&config(state_dir), keys(), Arc::new(LogicalClock::default())).unwrap())
}

/// Journal length of both state machines.
pub fn events(s: &AppState) -> u64 {
    s.registry.read().unwrap().store().journal.last_seq() + s.fttp.read().unwrap().store().journal.last_seq()
}

pub struct Reply {
    pub status: StatusCode,
    pub content_type: String,
    pub body: Value,
}

impl Reply {
    pub fn code(&self) -> &str {
        self.body["error"]["code"].as_str().unwrap_or("")
    }
}

pub async fn call(s: &Arc<AppState>, method: Method, uri: &str, key: Option<&str>, body: Option<Value>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(k) = key {
        req = req.header("X-Api-Key", k);
    }
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = router(s.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let content_type =
        resp.headers().get("content-type").map(|v| v.to_str().unwrap().to_string()).unwrap_or_default();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let body = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    Reply { status, content_type, body }
}

pub fn person(first: &str, last: &str, date: &str) -> IdentityRecord {
    let mut r = IdentityRecord::new("r", first, last, date.parse::<PartialDate>().unwrap());
    r.sex = Sex::Female;
    r
}

pub fn wire(r: &IdentityRecord) -> String {
    let enc = BloomEncoder::new(FttpConfig::default_preset().bloom, &keys()).unwrap();
    encode_identity(&enc, &normalize(r).unwrap()).unwrap().to_wire()
}
