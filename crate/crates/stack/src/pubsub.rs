//! Named publish/subscribe channels.
//!
//! Each channel is a bounded broadcast queue: a subscriber that falls behind
//! loses the oldest messages instead of slowing publishers.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;
use uuid::Uuid;

/// Channel the packer listens on for finished sessions.
pub const PACKING_CHANNEL: &str = "packing";
pub const DEFAULT_CAPACITY: usize = 1024;

pub fn session_events_channel(session_id: Uuid) -> String {
    format!("session.{session_id}.events")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub channel: String,
    pub payload: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid channel name `{0}`")]
pub struct InvalidChannel(pub String);

pub fn validate_channel(name: &str) -> Result<(), InvalidChannel> {
    let ok = !name.is_empty()
        && name.len() <= 200
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_'));
    if ok {
        Ok(())
    } else {
        Err(InvalidChannel(name.to_string()))
    }
}

pub struct PubSub {
    capacity: usize,
    channels: Mutex<HashMap<String, broadcast::Sender<Message>>>,
}

impl Default for PubSub {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

impl PubSub {
    pub fn new(capacity: usize) -> Self {
        PubSub {
            capacity,
            channels: Mutex::new(HashMap::new()),
        }
    }

    fn sender(&self, channel: &str) -> broadcast::Sender<Message> {
        self.channels
            .lock()
            .unwrap()
            .entry(channel.to_string())
            .or_insert_with(|| broadcast::channel(self.capacity).0)
            .clone()
    }

    /// Publishes to every current subscriber; returns how many there were.
    pub fn publish(&self, channel: &str, payload: serde_json::Value) -> usize {
        let msg = Message {
            channel: channel.to_string(),
            payload,
        };
        self.sender(channel).send(msg).unwrap_or(0)
    }

    /// Subscribes to messages published from now on.
    pub fn subscribe(&self, channel: &str) -> Result<Subscription, InvalidChannel> {
        validate_channel(channel)?;
        Ok(Subscription {
            rx: self.sender(channel).subscribe(),
            dropped: 0,
        })
    }
}

pub struct Subscription {
    rx: broadcast::Receiver<Message>,
    dropped: u64,
}

impl Subscription {
    /// Next message in publication order; `None` once the channel is gone.
    pub async fn recv(&mut self) -> Option<Message> {
        loop {
            match self.rx.recv().await {
                Ok(m) => return Some(m),
                Err(broadcast::error::RecvError::Lagged(n)) => self.dropped += n,
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    }

    pub fn try_recv(&mut self) -> Option<Message> {
        loop {
            match self.rx.try_recv() {
                Ok(m) => return Some(m),
                Err(broadcast::error::TryRecvError::Lagged(n)) => self.dropped += n,
                Err(_) => return None,
            }
        }
    }

    /// Messages lost because this subscriber fell behind.
    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[tokio::test]
    async fn delivers_in_order_after_subscription() {
        let ps = PubSub::default();
        assert_eq!(ps.publish("a", json!(0)), 0);
        let mut sub = ps.subscribe("a").unwrap();
        for i in 1..=3 {
            ps.publish("a", json!(i));
        }
        ps.publish("b", json!("other"));
        for i in 1..=3 {
            assert_eq!(sub.recv().await.unwrap().payload, json!(i));
        }
        assert!(sub.try_recv().is_none());
    }

    #[tokio::test]
    async fn slow_subscriber_drops_oldest() {
        let ps = PubSub::new(4);
        let mut sub = ps.subscribe("x").unwrap();
        for i in 0..10 {
            ps.publish("x", json!(i));
        }
        assert_eq!(sub.recv().await.unwrap().payload, json!(6));
        assert_eq!(sub.dropped(), 6);
    }

    #[test]
    fn channel_names() {
        assert!(validate_channel("session.5f0c.events").is_ok());
        assert!(validate_channel("packing").is_ok());
        assert!(validate_channel("").is_err());
        assert!(validate_channel("a b").is_err());
    }
}
