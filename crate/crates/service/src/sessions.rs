use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use put_core::sampler::{SamplingSession, K1};

/// One interactive request: a sampling session per sample, stepped in lockstep.
#[derive(Debug)]
pub struct Session {
    pub samples: Vec<SamplingSession>,
    pub k1: K1,
    pub k2: usize,
    pub created: Instant,
}

impl Session {
    pub fn is_complete(&self) -> bool {
        self.samples.iter().all(SamplingSession::is_complete)
    }
}

struct Entry {
    session: Arc<Mutex<Session>>,
    touched: Instant,
}

#[derive(Debug, PartialEq, Eq)]
pub enum Lookup {
    Missing,
    Expired,
}

/// Live sessions keyed by id; entries idle past the timeout are dropped on access.
pub struct SessionStore {
    idle_timeout: Duration,
    entries: Mutex<HashMap<String, Entry>>,
}

impl SessionStore {
    pub fn new(idle_timeout: Duration) -> Self {
        Self {
            idle_timeout,
            entries: Mutex::new(HashMap::new()),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<String, Entry>> {
        self.entries.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn insert(&self, session: Session) -> String {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let entry = Entry {
            session: Arc::new(Mutex::new(session)),
            touched: Instant::now(),
        };
        self.lock().insert(id.clone(), entry);
        id
    }

    /// Returns the session and refreshes its idle clock.
    pub fn get(&self, id: &str) -> Result<Arc<Mutex<Session>>, Lookup> {
        let mut map = self.lock();
        let now = Instant::now();
        let entry = map.get_mut(id).ok_or(Lookup::Missing)?;
        if now.duration_since(entry.touched) >= self.idle_timeout {
            map.remove(id);
            return Err(Lookup::Expired);
        }
        entry.touched = now;
        Ok(entry.session.clone())
    }

    pub fn remove(&self, id: &str) -> bool {
        self.lock().remove(id).is_some()
    }

    /// Drops expired sessions; returns how many were removed.
    pub fn sweep(&self) -> usize {
        let now = Instant::now();
        let mut map = self.lock();
        let before = map.len();
        map.retain(|_, e| now.duration_since(e.touched) < self.idle_timeout);
        before - map.len()
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
