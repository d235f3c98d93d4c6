//! Salted password hashes, HTTP Basic credential parsing, and the
//! per-connection limiter for failed sign-ins.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use pbkdf2::pbkdf2_hmac;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;

const SCHEME: &str = "pbkdf2-sha256";
pub const DEFAULT_ITERATIONS: u32 = 100_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("password hash must look like {SCHEME}$<iterations>$<salt>$<hash>")]
pub struct BadPasswordHash;

/// A stored `pbkdf2-sha256$<iterations>$<salt-b64>$<hash-b64>` string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PasswordHash {
    iterations: u32,
    salt: Vec<u8>,
    hash: Vec<u8>,
}

impl PasswordHash {
    pub fn create(password: &str, iterations: u32) -> Self {
        let mut salt = vec![0u8; 16];
        rand::rng().fill_bytes(&mut salt);
        let hash = derive(password, &salt, iterations);
        PasswordHash { iterations, salt, hash }
    }

    pub fn parse(s: &str) -> Result<Self, BadPasswordHash> {
        let mut it = s.split('$');
        if it.next() != Some(SCHEME) {
            return Err(BadPasswordHash);
        }
        let iterations = it.next().and_then(|v| v.parse().ok()).filter(|&n| n > 0).ok_or(BadPasswordHash)?;
        let salt = it.next().and_then(|v| STANDARD.decode(v).ok()).ok_or(BadPasswordHash)?;
        let hash = it.next().and_then(|v| STANDARD.decode(v).ok()).filter(|h| h.len() == 32).ok_or(BadPasswordHash)?;
        if it.next().is_some() || salt.is_empty() {
            return Err(BadPasswordHash);
        }
        Ok(PasswordHash { iterations, salt, hash })
    }

    pub fn verify(&self, password: &str) -> bool {
        derive(password, &self.salt, self.iterations).ct_eq(&self.hash).into()
    }
}

impl std::fmt::Display for PasswordHash {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{SCHEME}${}${}${}", self.iterations, STANDARD.encode(&self.salt), STANDARD.encode(&self.hash))
    }
}

fn derive(password: &str, salt: &[u8], iterations: u32) -> Vec<u8> {
    let mut out = vec![0u8; 32];
    pbkdf2_hmac::<Sha256>(password.as_bytes(), salt, iterations, &mut out);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserEntry {
    pub username: String,
    pub password_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuthFailure {
    Missing,
    Bad,
}

/// Configured users. Successful verifications are remembered as a
/// salted digest so that repeated requests skip the slow key derivation.
pub struct UserStore {
    users: HashMap<String, PasswordHash>,
    verified: Mutex<HashMap<String, [u8; 32]>>,
}

impl UserStore {
    pub fn new(entries: &[UserEntry]) -> Result<Self, BadPasswordHash> {
        let users = entries
            .iter()
            .map(|u| Ok((u.username.clone(), PasswordHash::parse(&u.password_hash)?)))
            .collect::<Result<_, _>>()?;
        Ok(UserStore { users, verified: Mutex::new(HashMap::new()) })
    }

    fn fast_digest(hash: &PasswordHash, password: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(&hash.salt);
        h.update(password.as_bytes());
        h.finalize().into()
    }

    /// Checks an `Authorization` header value. Returns the username.
    pub fn authenticate(&self, header: Option<&str>) -> Result<String, AuthFailure> {
        let (user, password) = header.and_then(parse_basic).ok_or(AuthFailure::Missing)?;
        let Some(hash) = self.users.get(&user) else {
            // spend comparable time for unknown users
            let _ = derive(&password, b"unknown-user-salt", DEFAULT_ITERATIONS.min(10_000));
            return Err(AuthFailure::Bad);
        };
        let digest = Self::fast_digest(hash, &password);
        if let Some(known) = self.verified.lock().unwrap().get(&user) {
            if bool::from(known.ct_eq(&digest)) {
                return Ok(user);
            }
        }
        if hash.verify(&password) {
            self.verified.lock().unwrap().insert(user.clone(), digest);
            Ok(user)
        } else {
            Err(AuthFailure::Bad)
        }
    }
}

/// Decodes `Basic <base64(user:password)>`.
pub fn parse_basic(header: &str) -> Option<(String, String)> {
    let (scheme, rest) = header.trim().split_once(' ')?;
    if !scheme.eq_ignore_ascii_case("basic") {
        return None;
    }
    let decoded = String::from_utf8(STANDARD.decode(rest.trim()).ok()?).ok()?;
    let (user, password) = decoded.split_once(':')?;
    if user.is_empty() {
        return None;
    }
    Some((user.to_owned(), password.to_owned()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateLimit {
    pub failed_auth_per_sec: f64,
    #[serde(default = "one")]
    pub burst: u32,
}

fn one() -> u32 {
    1
}

impl Default for RateLimit {
    fn default() -> Self {
        RateLimit { failed_auth_per_sec: 10.0, burst: 1 }
    }
}

/// Spaces out failed sign-ins on one connection. Nothing is ever refused;
/// an attempt over the limit is answered late instead.
#[derive(Debug)]
pub struct FailureLimiter {
    interval: Duration,
    tolerance: Duration,
    /// Theoretical arrival time of the next conforming attempt.
    tat: Mutex<Option<Instant>>,
}

impl FailureLimiter {
    pub fn new(limit: RateLimit) -> Self {
        let interval = if limit.failed_auth_per_sec > 0.0 {
            Duration::from_secs_f64(1.0 / limit.failed_auth_per_sec)
        } else {
            Duration::ZERO
        };
        FailureLimiter { interval, tolerance: interval * limit.burst.saturating_sub(1), tat: Mutex::new(None) }
    }

    /// Records a failed attempt made at `now` and returns how long its
    /// answer must be held back.
    pub fn on_failure(&self, now: Instant) -> Duration {
        let mut tat = self.tat.lock().unwrap();
        let t = tat.unwrap_or(now).max(now);
        let allowed_at = t.checked_sub(self.tolerance).unwrap_or(now).max(now);
        *tat = Some(t + self.interval);
        allowed_at - now
    }
}
