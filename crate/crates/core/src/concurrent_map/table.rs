use crate::hash::HashValue;
use crate::reducer::Reducer;

/// Maximum load factor, as a fraction `LOAD_NUM / LOAD_DEN`.
const LOAD_NUM: usize = 7;
const LOAD_DEN: usize = 10;

struct Slot<V> {
    hash: u64,
    key: Box<[u8]>,
    value: V,
}

/// Open-addressing hash table with linear probing and reducer-merge inserts.
///
/// A key with hash `h` lives at the first free or matching slot scanning
/// forward (wrapping) from `h mod capacity`. There are no deletions, so no
/// tombstones are needed. Occupancy never exceeds 70% of capacity; an insert
/// that would cross it first doubles the table.
pub struct ProbingTable<V> {
    slots: Vec<Option<Slot<V>>>,
    len: usize,
}

impl<V> ProbingTable<V> {
    /// Creates an empty table. `capacity` must be a power of two and at least 2.
    pub fn with_capacity(capacity: usize) -> Self {
        assert!(
            capacity >= 2 && capacity.is_power_of_two(),
            "table capacity must be a power of two >= 2, got {capacity}"
        );
        let mut slots = Vec::with_capacity(capacity);
        slots.resize_with(capacity, || None);
        ProbingTable { slots, len: 0 }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    #[inline]
    fn mask(&self) -> usize {
        self.slots.len() - 1
    }

    /// Home slot of a hash: `h mod capacity`.
    #[inline]
    pub fn home_slot(&self, hash: HashValue) -> usize {
        hash.0 as usize & self.mask()
    }

    /// Merges `(key, value)` into the table.
    ///
    /// An existing key has its value folded with `reducer`; a new key is
    /// written into the first free slot of its probe sequence.
    pub fn probe_insert<K, R>(&mut self, hash: HashValue, key: K, value: V, reducer: &R)
    where
        K: AsRef<[u8]> + Into<Box<[u8]>>,
        R: Reducer<V> + ?Sized,
    {
        let h = hash.0;
        let mask = self.mask();
        let mut i = h as usize & mask;
        while let Some(slot) = &mut self.slots[i] {
            if slot.hash == h && *slot.key == *key.as_ref() {
                reducer.combine(&mut slot.value, value);
                return;
            }
            i = (i + 1) & mask;
        }
        if (self.len + 1) * LOAD_DEN > self.capacity() * LOAD_NUM {
            self.grow();
            i = self.free_slot_for(h);
        }
        self.slots[i] = Some(Slot {
            hash: h,
            key: key.into(),
            value,
        });
        self.len += 1;
    }

    pub fn get(&self, hash: HashValue, key: &[u8]) -> Option<&V> {
        let mask = self.mask();
        let mut i = hash.0 as usize & mask;
        while let Some(slot) = &self.slots[i] {
            if slot.hash == hash.0 && *slot.key == *key {
                return Some(&slot.value);
            }
            i = (i + 1) & mask;
        }
        None
    }

    /// Position of `key` in the slot array, if present.
    pub fn slot_index(&self, hash: HashValue, key: &[u8]) -> Option<usize> {
        let mask = self.mask();
        let mut i = hash.0 as usize & mask;
        while let Some(slot) = &self.slots[i] {
            if slot.hash == hash.0 && *slot.key == *key {
                return Some(i);
            }
            i = (i + 1) & mask;
        }
        None
    }

    fn free_slot_for(&self, h: u64) -> usize {
        let mask = self.mask();
        let mut i = h as usize & mask;
        while self.slots[i].is_some() {
            i = (i + 1) & mask;
        }
        i
    }

    fn grow(&mut self) {
        let new_cap = self.capacity() * 2;
        let mut fresh = Vec::with_capacity(new_cap);
        fresh.resize_with(new_cap, || None);
        let old = std::mem::replace(&mut self.slots, fresh);
        for slot in old.into_iter().flatten() {
            let i = self.free_slot_for(slot.hash);
            self.slots[i] = Some(slot);
        }
    }

    /// Iterates occupied slots as `(hash, key, value)`.
    pub fn iter(&self) -> impl Iterator<Item = (HashValue, &[u8], &V)> + '_ {
        self.slots
            .iter()
            .flatten()
            .map(|s| (HashValue(s.hash), &*s.key, &s.value))
    }

    /// Removes every entry, keeping the current capacity.
    pub fn drain(&mut self) -> impl Iterator<Item = (HashValue, Box<[u8]>, V)> {
        let mut fresh = Vec::with_capacity(self.capacity());
        fresh.resize_with(self.capacity(), || None);
        let old = std::mem::replace(&mut self.slots, fresh);
        self.len = 0;
        old.into_iter()
            .flatten()
            .map(|s| (HashValue(s.hash), s.key, s.value))
    }
}

impl<V> std::fmt::Debug for ProbingTable<V> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProbingTable")
            .field("len", &self.len)
            .field("capacity", &self.capacity())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hash::hash_key;
    use crate::reducer::sum;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn insert(t: &mut ProbingTable<i64>, key: &str, v: i64) {
        t.probe_insert(hash_key(key.as_bytes()), key.as_bytes(), v, &sum());
    }

    #[test]
    fn combine_on_match() {
        let mut t = ProbingTable::with_capacity(8);
        insert(&mut t, "a", 1);
        insert(&mut t, "a", 2);
        assert_eq!(t.len(), 1);
        assert_eq!(t.get(hash_key(b"a"), b"a"), Some(&3));
    }

    #[test]
    fn colliding_home_slot_goes_to_next_free() {
        // Search for two keys sharing a home slot at capacity 8.
        let mut by_home: HashMap<usize, String> = HashMap::new();
        let (first, second) = (0..)
            .find_map(|i| {
                let k = format!("k{i}");
                let home = hash_key(k.as_bytes()).0 as usize & 7;
                by_home.insert(home, k.clone()).map(|prev| (prev, k))
            })
            .unwrap();
        let home = hash_key(first.as_bytes()).0 as usize & 7;

        let mut t = ProbingTable::with_capacity(8);
        insert(&mut t, &first, 1);
        insert(&mut t, &second, 1);
        assert_eq!(t.capacity(), 8);
        assert_eq!(
            t.slot_index(hash_key(first.as_bytes()), first.as_bytes()),
            Some(home)
        );
        assert_eq!(
            t.slot_index(hash_key(second.as_bytes()), second.as_bytes()),
            Some((home + 1) & 7)
        );
    }

    #[test]
    fn twelfth_key_triggers_resize_at_sixteen() {
        let mut t = ProbingTable::with_capacity(16);
        for i in 0..11 {
            insert(&mut t, &format!("key{i}"), 1);
            assert_eq!(t.capacity(), 16, "after {} inserts", i + 1);
        }
        insert(&mut t, "key11", 1);
        assert_eq!(t.capacity(), 32);
        assert_eq!(t.len(), 12);
        for i in 0..12 {
            let k = format!("key{i}");
            assert_eq!(t.get(hash_key(k.as_bytes()), k.as_bytes()), Some(&1));
        }
    }

    #[test]
    fn smallest_table_grows() {
        let mut t = ProbingTable::with_capacity(2);
        insert(&mut t, "a", 1);
        assert_eq!(t.capacity(), 2);
        insert(&mut t, "b", 1);
        assert_eq!(t.capacity(), 4);
    }

    #[test]
    fn drain_empties() {
        let mut t = ProbingTable::with_capacity(4);
        insert(&mut t, "a", 1);
        insert(&mut t, "b", 2);
        let mut got: Vec<_> = t.drain().map(|(_, k, v)| (k.to_vec(), v)).collect();
        got.sort();
        assert_eq!(got, vec![(b"a".to_vec(), 1), (b"b".to_vec(), 2)]);
        assert!(t.is_empty());
        assert_eq!(t.iter().count(), 0);
        assert_eq!(t.get(hash_key(b"a"), b"a"), None);
    }

    proptest! {
        #[test]
        fn load_factor_and_probe_invariants(keys in prop::collection::vec(0u32..500, 0..2000)) {
            let mut t = ProbingTable::with_capacity(2);
            let mut oracle: HashMap<u32, i64> = HashMap::new();
            for k in &keys {
                let key = k.to_string();
                insert(&mut t, &key, 1);
                *oracle.entry(*k).or_default() += 1;
                prop_assert!(t.len() * 10 <= t.capacity() * 7);
            }
            prop_assert_eq!(t.len(), oracle.len());
            for (k, v) in &oracle {
                let key = k.to_string();
                prop_assert_eq!(t.get(hash_key(key.as_bytes()), key.as_bytes()), Some(v));
            }
            // Every slot between a key's home and its position is occupied.
            for (h, key, _) in t.iter() {
                let pos = t.slot_index(h, key).unwrap();
                let mut i = t.home_slot(h);
                while i != pos {
                    prop_assert!(t.slots[i].is_some());
                    i = (i + 1) & t.mask();
                }
            }
        }
    }
}
