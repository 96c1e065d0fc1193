use std::collections::{BTreeMap, HashMap};

/// Bounded least-recently-used memo of token encodings, tied to one model.
///
/// Binding the cache to a different model id drops every entry, so stale
/// encodings never survive a model reload.
#[derive(Clone, Debug)]
pub struct EncodingCache<S = f32> {
    capacity: usize,
    model_id: Option<String>,
    entries: HashMap<String, (Vec<S>, u64)>,
    order: BTreeMap<u64, String>,
    tick: u64,
    hits: u64,
    misses: u64,
}

impl<S: Clone> EncodingCache<S> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            model_id: None,
            entries: HashMap::new(),
            order: BTreeMap::new(),
            tick: 0,
            hits: 0,
            misses: 0,
        }
    }

    /// Associates the cache with `model_id`, clearing it if it held
    /// encodings of another model.
    pub fn bind(&mut self, model_id: &str) {
        if self.model_id.as_deref() != Some(model_id) {
            self.clear();
            self.model_id = Some(model_id.to_string());
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.order.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// `(hits, misses)` since creation.
    pub fn stats(&self) -> (u64, u64) {
        (self.hits, self.misses)
    }

    pub fn get(&mut self, token: &str) -> Option<&[S]> {
        self.tick += 1;
        let tick = self.tick;
        match self.entries.get_mut(token) {
            Some((v, last)) => {
                self.order.remove(last);
                *last = tick;
                self.order.insert(tick, token.to_string());
                self.hits += 1;
                Some(v.as_slice())
            }
            None => {
                self.misses += 1;
                None
            }
        }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.entries.contains_key(token)
    }

    pub fn insert(&mut self, token: &str, value: Vec<S>) {
        self.tick += 1;
        if let Some((_, last)) = self.entries.remove(token) {
            self.order.remove(&last);
        }
        while self.entries.len() >= self.capacity {
            let Some((_, oldest)) = self.order.pop_first() else { break };
            self.entries.remove(&oldest);
        }
        self.entries.insert(token.to_string(), (value, self.tick));
        self.order.insert(self.tick, token.to_string());
    }
}
