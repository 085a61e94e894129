use std::path::PathBuf;
use std::time::Duration;

use put_tensor::Parallelism;

use crate::error::ServiceError;

/// Runtime settings, read from `PUT_*` environment variables.
#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub addr: String,
    pub port: u16,
    pub pvqvae: Option<PathBuf>,
    pub transformer: Option<PathBuf>,
    /// Sessions untouched for this long are dropped.
    pub idle_timeout: Duration,
    /// Request bodies above this size get 413.
    pub max_body_bytes: usize,
    pub parallelism: Parallelism,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1".into(),
            port: 8080,
            pvqvae: None,
            transformer: None,
            idle_timeout: Duration::from_secs(15 * 60),
            max_body_bytes: 16 << 20,
            parallelism: Parallelism::Parallel,
        }
    }
}

impl ServiceConfig {
    /// `PUT_ADDR`, `PUT_PORT`, `PUT_PVQVAE`, `PUT_TRANSFORMER`,
    /// `PUT_IDLE_TIMEOUT_SECS`, `PUT_MAX_BODY_BYTES`, `PUT_SEQUENTIAL`.
    pub fn from_env() -> Result<Self, ServiceError> {
        Self::from_vars(|k| std::env::var(k).ok())
    }

    pub fn from_vars(get: impl Fn(&str) -> Option<String>) -> Result<Self, ServiceError> {
        fn parse<T: std::str::FromStr>(key: &str, v: String) -> Result<T, ServiceError> {
            v.trim().parse().map_err(|_| ServiceError::Env {
                key: key.into(),
                value: v,
            })
        }
        let mut c = Self::default();
        if let Some(v) = get("PUT_ADDR") {
            c.addr = v;
        }
        if let Some(v) = get("PUT_PORT") {
            c.port = parse("PUT_PORT", v)?;
        }
        c.pvqvae = get("PUT_PVQVAE").map(PathBuf::from);
        c.transformer = get("PUT_TRANSFORMER").map(PathBuf::from);
        if let Some(v) = get("PUT_IDLE_TIMEOUT_SECS") {
            c.idle_timeout = Duration::from_secs(parse("PUT_IDLE_TIMEOUT_SECS", v)?);
        }
        if let Some(v) = get("PUT_MAX_BODY_BYTES") {
            c.max_body_bytes = parse("PUT_MAX_BODY_BYTES", v)?;
        }
        if let Some(v) = get("PUT_SEQUENTIAL") {
            if parse::<u8>("PUT_SEQUENTIAL", v)? != 0 {
                c.parallelism = Parallelism::Sequential;
            }
        }
        Ok(c)
    }
}
