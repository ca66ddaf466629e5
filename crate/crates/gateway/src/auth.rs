//! API keys. Only SHA-256 digests of keys are stored; lookups compare
//! digests in constant time against every record.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AuthError {
    #[error("missing or malformed Authorization header")]
    MissingHeader,
    #[error("unknown API key")]
    UnknownKey,
    #[error("API key is disabled")]
    DisabledKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiKeyRecord {
    pub id: String,
    /// Hex SHA-256 of the key.
    pub key_sha256: String,
    pub requests_per_second: f64,
    pub burst: u32,
    #[serde(default = "enabled")]
    pub enabled: bool,
}

fn enabled() -> bool {
    true
}

#[derive(Debug, Error)]
pub enum KeyStoreError {
    #[error("reading key store: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing key store: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("key {id}: {reason}")]
    Invalid { id: String, reason: String },
}

#[derive(Debug, Deserialize)]
struct KeyFile {
    #[serde(default)]
    keys: Vec<ApiKeyRecord>,
}

pub fn hash_key(key: &str) -> [u8; 32] {
    Sha256::digest(key.as_bytes()).into()
}

pub fn hash_key_hex(key: &str) -> String {
    hex::encode(hash_key(key))
}

#[derive(Debug, Clone, Default)]
pub struct KeyStore {
    records: Vec<(ApiKeyRecord, [u8; 32])>,
}

impl KeyStore {
    pub fn new(records: Vec<ApiKeyRecord>) -> Result<Self, KeyStoreError> {
        let mut out = Vec::with_capacity(records.len());
        for r in records {
            let invalid = |reason: &str| KeyStoreError::Invalid { id: r.id.clone(), reason: reason.into() };
            let digest: [u8; 32] = hex::decode(&r.key_sha256)
                .ok()
                .and_then(|d| d.try_into().ok())
                .ok_or_else(|| invalid("key_sha256 must be 64 hex characters"))?;
            if !(r.requests_per_second > 0.0 && r.requests_per_second.is_finite()) || r.burst == 0 {
                return Err(invalid("rate limit must be positive"));
            }
            out.push((r, digest));
        }
        Ok(Self { records: out })
    }

    /// A store holding one enabled key, for tests and local runs.
    pub fn single(id: &str, key: &str, requests_per_second: f64, burst: u32) -> Self {
        Self::new(vec![ApiKeyRecord {
            id: id.into(),
            key_sha256: hash_key_hex(key),
            requests_per_second,
            burst,
            enabled: true,
        }])
        .expect("valid record")
    }

    pub fn parse(text: &str) -> Result<Self, KeyStoreError> {
        let file: KeyFile = toml::from_str(text)?;
        Self::new(file.keys)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KeyStoreError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn records(&self) -> impl Iterator<Item = &ApiKeyRecord> {
        self.records.iter().map(|(r, _)| r)
    }

    /// Resolves an `Authorization: Bearer <key>` header value.
    pub fn authenticate(&self, header: Option<&str>) -> Result<&ApiKeyRecord, AuthError> {
        let key = header
            .and_then(|h| h.strip_prefix("Bearer "))
            .map(str::trim)
            .filter(|k| !k.is_empty())
            .ok_or(AuthError::MissingHeader)?;
        let digest = hash_key(key);
        let mut found = None;
        for (record, stored) in &self.records {
            if bool::from(stored.ct_eq(&digest)) && found.is_none() {
                found = Some(record);
            }
        }
        match found {
            Some(r) if r.enabled => Ok(r),
            Some(_) => Err(AuthError::DisabledKey),
            None => Err(AuthError::UnknownKey),
        }
    }
}
