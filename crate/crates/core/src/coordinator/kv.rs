use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvEntry {
    pub value: Vec<u8>,
    pub generation: u32,
    pub seq: u64,
}

/// Append-only publish/query store. Every key keeps its full history;
/// queries see the entry with the highest sequence number.
#[derive(Debug, Default, Clone)]
pub struct KvStore {
    entries: HashMap<String, Vec<KvEntry>>,
    next_seq: u64,
}

impl KvStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish(&mut self, key: &str, value: Vec<u8>, generation: u32) -> u64 {
        self.next_seq += 1;
        let seq = self.next_seq;
        self.entries
            .entry(key.to_string())
            .or_default()
            .push(KvEntry { value, generation, seq });
        seq
    }

    /// Publishes only if the key has never been written. Returns the entry
    /// that is now latest and whether this call created it.
    pub fn claim(&mut self, key: &str, value: Vec<u8>, generation: u32) -> (KvEntry, bool) {
        if let Some(latest) = self.latest(key) {
            return (latest.clone(), false);
        }
        self.publish(key, value, generation);
        (self.latest(key).unwrap().clone(), true)
    }

    pub fn latest(&self, key: &str) -> Option<&KvEntry> {
        self.entries.get(key).and_then(|h| h.last())
    }

    pub fn history(&self, key: &str) -> &[KvEntry] {
        self.entries.get(key).map_or(&[], |h| h.as_slice())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latest_wins_and_history_is_kept() {
        let mut kv = KvStore::new();
        assert!(kv.latest("k").is_none());
        kv.publish("k", b"v1".to_vec(), 0);
        kv.publish("k", b"v2".to_vec(), 1);
        assert_eq!(kv.latest("k").unwrap().value, b"v2");
        let gens: Vec<_> = kv.history("k").iter().map(|e| e.generation).collect();
        assert_eq!(gens, vec![0, 1]);
        assert!(kv.history("k")[0].seq < kv.history("k")[1].seq);
    }

    #[test]
    fn claim_is_first_writer_wins() {
        let mut kv = KvStore::new();
        let (e, won) = kv.claim("ud:1:64", b"a".to_vec(), 0);
        assert!(won);
        assert_eq!(e.value, b"a");
        let (e, won) = kv.claim("ud:1:64", b"b".to_vec(), 0);
        assert!(!won);
        assert_eq!(e.value, b"a");
        assert_eq!(kv.history("ud:1:64").len(), 1);
    }
}
