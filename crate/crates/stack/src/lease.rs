//! Scene leases: at most one unexpired holder per scene.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use remcap_core::SceneLease;

use crate::clock::Clock;

pub const DEFAULT_LEASE_TTL_SECONDS: u32 = 300;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LeaseError {
    #[error("scene {scene_id} is leased by {holder} until {expires_at_micros}")]
    SceneBusy {
        scene_id: String,
        holder: String,
        expires_at_micros: u64,
    },
    #[error("{researcher} holds no valid lease on scene {scene_id}")]
    LeaseInvalid {
        researcher: String,
        scene_id: String,
    },
}

pub struct LeaseRegistry {
    clock: Arc<dyn Clock>,
    leases: Mutex<HashMap<String, SceneLease>>,
}

impl LeaseRegistry {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        LeaseRegistry {
            clock,
            leases: Mutex::new(HashMap::new()),
        }
    }

    /// Grants a fresh lease if the scene is free or expired; a holder
    /// acquiring again renews.
    pub fn acquire(
        &self,
        researcher: &str,
        scene_id: &str,
        ttl_seconds: u32,
    ) -> Result<SceneLease, LeaseError> {
        let now = self.clock.now_micros();
        let mut leases = self.leases.lock().unwrap();
        if let Some(current) = leases.get(scene_id) {
            if !current.is_expired(now) && current.holder != researcher {
                return Err(LeaseError::SceneBusy {
                    scene_id: scene_id.to_string(),
                    holder: current.holder.clone(),
                    expires_at_micros: current.expires_at_micros(),
                });
            }
        }
        let lease = SceneLease {
            scene_id: scene_id.to_string(),
            holder: researcher.to_string(),
            acquired_ts_micros: now,
            ttl_seconds,
        };
        leases.insert(scene_id.to_string(), lease.clone());
        Ok(lease)
    }

    pub fn release(&self, researcher: &str, scene_id: &str) -> Result<(), LeaseError> {
        let now = self.clock.now_micros();
        let mut leases = self.leases.lock().unwrap();
        match leases.get(scene_id) {
            Some(l) if l.holder == researcher && !l.is_expired(now) => {
                leases.remove(scene_id);
                Ok(())
            }
            _ => Err(LeaseError::LeaseInvalid {
                researcher: researcher.to_string(),
                scene_id: scene_id.to_string(),
            }),
        }
    }

    /// The lease `researcher` holds on `scene_id`, if still valid.
    pub fn check(&self, researcher: &str, scene_id: &str) -> Result<SceneLease, LeaseError> {
        let now = self.clock.now_micros();
        match self.leases.lock().unwrap().get(scene_id) {
            Some(l) if l.holder == researcher && !l.is_expired(now) => Ok(l.clone()),
            _ => Err(LeaseError::LeaseInvalid {
                researcher: researcher.to_string(),
                scene_id: scene_id.to_string(),
            }),
        }
    }

    pub fn current(&self, scene_id: &str) -> Option<SceneLease> {
        let now = self.clock.now_micros();
        self.leases
            .lock()
            .unwrap()
            .get(scene_id)
            .filter(|l| !l.is_expired(now))
            .cloned()
    }
}
