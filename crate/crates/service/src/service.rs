//! Opening the two state machines from a service configuration.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use linkwerk::fttp::{Fttp, FttpError};
use linkwerk::pprl::{CodecError, KeyRing};
use linkwerk::registry::{Registry, RegistryConfig, RegistryError};
use linkwerk::store::{Clock, Store, StoreError, SystemClock};
use thiserror::Error;

use crate::api::AppState;
use crate::config::{ConfigError, ServiceConfig};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("key file: {0}")]
    Keys(#[from] CodecError),
    #[error("state: {0}")]
    Store(#[from] StoreError),
    #[error("registry: {0}")]
    Registry(#[from] RegistryError),
    #[error("fttp: {0}")]
    Fttp(#[from] FttpError),
    #[error("{0}")]
    Other(String),
}

/// Replays both journals (or starts in memory without a state dir) and
/// registers configured domains and sites that are not known yet.
pub fn open_state(cfg: &ServiceConfig, keys: KeyRing, clock: Arc<dyn Clock>) -> Result<AppState, ServiceError> {
    let (reg_store, fttp_store) = match cfg.state_dir() {
        Some(dir) => (Store::open(&dir, "registry")?, Store::open(&dir, "fttp")?),
        None => (Store::memory("registry", None), Store::memory("fttp", None)),
    };
    let linkage = cfg.linkage().map_err(ServiceError::Other)?;
    let reg_cfg = RegistryConfig { linkage, registry_key_id: cfg.registry.registry_key_id.clone() };
    let mut registry = Registry::open(reg_cfg, keys.clone(), reg_store, clock.clone())?;
    for d in &cfg.registry.domains {
        match registry.domain(&d.domain_id) {
            Ok(existing) if existing == d => {}
            Ok(_) => {
                return Err(ServiceError::Other(format!(
                    "domain {} differs from the journaled definition",
                    d.domain_id
                )))
            }
            Err(_) => registry.register_domain(d.clone())?,
        }
    }
    let mut fttp = Fttp::open(cfg.fttp_config(), keys, fttp_store, clock)?;
    for s in &cfg.sites {
        if !fttp.sites().any(|k| k == s) {
            fttp.register_site(s)?;
        }
    }
    let api_keys: BTreeMap<_, _> = cfg.api_keys.iter().map(|k| (k.key.clone(), k.principal.clone())).collect();
    Ok(AppState { registry: RwLock::new(registry), fttp: RwLock::new(fttp), api_keys })
}

/// Key file named by the config or `LINKWERK_KEYFILE`.
pub fn load_keys(cfg: &ServiceConfig) -> Result<KeyRing, ServiceError> {
    let path = cfg
        .key_file()
        .ok_or_else(|| ServiceError::Other("no key file: set keyFile or LINKWERK_KEYFILE".into()))?;
    Ok(KeyRing::load(&path)?)
}

pub fn open_from_config(cfg: &ServiceConfig) -> Result<AppState, ServiceError> {
    open_state(cfg, load_keys(cfg)?, Arc::new(SystemClock))
}

pub async fn serve(cfg: ServiceConfig) -> Result<(), ServiceError> {
    let state = Arc::new(open_from_config(&cfg)?);
    let listener = tokio::net::TcpListener::bind(&cfg.listen)
        .await
        .map_err(|e| ServiceError::Other(format!("bind {}: {e}", cfg.listen)))?;
    let addr = listener.local_addr().map_err(|e| ServiceError::Other(e.to_string()))?;
    eprintln!("linkwerk listening on {addr}");
    axum::serve(listener, crate::api::router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ServiceError::Other(e.to_string()))
}
