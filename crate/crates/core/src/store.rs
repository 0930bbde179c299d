//! Per-switch key-value storage: an index table mapping keys to slot ids and
//! parallel slot arrays holding values, versions and a validity bit.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Read, Write};

use thiserror::Error;

use crate::wire::{Key, Version, KEY_LEN, MAX_VALUE};

pub const DEFAULT_CAPACITY: usize = 65536;

pub type SlotId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("key not found")]
    NotFound,
    #[error("store full")]
    StoreFull,
    #[error("slot {0} out of range")]
    OutOfRange(SlotId),
    #[error("key already present")]
    AlreadyPresent,
    #[error("value too long ({0} bytes)")]
    ValueTooLong(usize),
    #[error("capacity mismatch: image {image}, store {store}")]
    CapacityMismatch { image: usize, store: usize },
}

/// Contents of one slot.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Slot {
    pub value: Vec<u8>,
    pub version: Version,
    pub valid: bool,
}

/// Index table plus slot arrays. Slots are allocated lowest-id first.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Store {
    capacity: usize,
    index: BTreeMap<Key, SlotId>,
    // Grows lazily up to `capacity`; slots past the end read as empty.
    slots: Vec<Slot>,
    free: BTreeSet<SlotId>,
}

impl Default for Store {
    fn default() -> Self {
        Store::with_capacity(DEFAULT_CAPACITY)
    }
}

impl Store {
    pub fn with_capacity(capacity: usize) -> Self {
        assert!(capacity > 0, "store capacity must be positive");
        Store {
            capacity,
            index: BTreeMap::new(),
            slots: Vec::new(),
            free: BTreeSet::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn lookup(&self, key: &Key) -> Result<SlotId, StoreError> {
        self.index.get(key).copied().ok_or(StoreError::NotFound)
    }

    pub fn insert_index(&mut self, key: Key, value: &[u8]) -> Result<SlotId, StoreError> {
        if self.index.contains_key(&key) {
            return Err(StoreError::AlreadyPresent);
        }
        if value.len() > MAX_VALUE {
            return Err(StoreError::ValueTooLong(value.len()));
        }
        let loc = match self.free.pop_first() {
            Some(loc) => loc,
            None if self.slots.len() < self.capacity => {
                self.slots.push(Slot::default());
                (self.slots.len() - 1) as SlotId
            }
            None => return Err(StoreError::StoreFull),
        };
        self.slots[loc as usize] = Slot {
            value: value.to_vec(),
            version: Version::ZERO,
            valid: true,
        };
        self.index.insert(key, loc);
        Ok(loc)
    }

    pub fn read_slot(&self, loc: SlotId) -> Result<Slot, StoreError> {
        self.check(loc)?;
        Ok(self.slots.get(loc as usize).cloned().unwrap_or_default())
    }

    pub fn slot(&self, loc: SlotId) -> Option<&Slot> {
        self.slots.get(loc as usize)
    }

    /// Unconditional write; ordering checks belong to the caller.
    pub fn write_slot(&mut self, loc: SlotId, value: &[u8], version: Version) -> Result<(), StoreError> {
        self.check(loc)?;
        if value.len() > MAX_VALUE {
            return Err(StoreError::ValueTooLong(value.len()));
        }
        self.ensure(loc);
        let slot = &mut self.slots[loc as usize];
        slot.value.clear();
        slot.value.extend_from_slice(value);
        slot.version = version;
        slot.valid = true;
        Ok(())
    }

    pub fn tombstone(&mut self, loc: SlotId) -> Result<(), StoreError> {
        self.check(loc)?;
        self.ensure(loc);
        self.slots[loc as usize].valid = false;
        Ok(())
    }

    /// Control-plane half of a delete: drops the index entry and frees the slot.
    pub fn gc(&mut self, key: &Key) -> Result<(), StoreError> {
        let loc = self.index.remove(key).ok_or(StoreError::NotFound)?;
        self.slots[loc as usize] = Slot::default();
        if loc as usize + 1 == self.slots.len() {
            self.slots.pop();
            // keep the free list consistent with the shrunken tail
            while let Some(&last) = self.free.last() {
                if last as usize + 1 == self.slots.len() {
                    self.free.pop_last();
                    self.slots.pop();
                } else {
                    break;
                }
            }
        } else {
            self.free.insert(loc);
        }
        Ok(())
    }

    /// Convenience lookup of a key's slot contents.
    pub fn get(&self, key: &Key) -> Option<&Slot> {
        self.index.get(key).and_then(|&loc| self.slots.get(loc as usize))
    }

    pub fn version_of(&self, key: &Key) -> Option<Version> {
        self.get(key).map(|s| s.version)
    }

    pub fn keys(&self) -> impl Iterator<Item = &Key> + '_ {
        self.index.keys()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Key, SlotId, &Slot)> + '_ {
        self.index
            .iter()
            .map(move |(k, &loc)| (k, loc, &self.slots[loc as usize]))
    }

    pub fn snapshot(&self) -> StoreImage {
        StoreImage {
            capacity: self.capacity,
            entries: self
                .entries()
                .map(|(k, loc, s)| ImageEntry {
                    key: *k,
                    slot: loc,
                    value: s.value.clone(),
                    version: s.version,
                    valid: s.valid,
                })
                .collect(),
        }
    }

    /// Image restricted to the given keys. Missing keys are skipped.
    pub fn snapshot_keys<'a>(&self, keys: impl IntoIterator<Item = &'a Key>) -> StoreImage {
        let mut entries: Vec<ImageEntry> = keys
            .into_iter()
            .filter_map(|k| {
                let loc = *self.index.get(k)?;
                let s = &self.slots[loc as usize];
                Some(ImageEntry {
                    key: *k,
                    slot: loc,
                    value: s.value.clone(),
                    version: s.version,
                    valid: s.valid,
                })
            })
            .collect();
        entries.sort_by_key(|e| e.key);
        entries.dedup_by_key(|e| e.key);
        StoreImage {
            capacity: self.capacity,
            entries,
        }
    }

    /// Replaces all state with the image, keeping slot ids.
    pub fn load(&mut self, image: &StoreImage) -> Result<(), StoreError> {
        if image.capacity != self.capacity {
            return Err(StoreError::CapacityMismatch {
                image: image.capacity,
                store: self.capacity,
            });
        }
        let mut fresh = Store::with_capacity(self.capacity);
        let top = image.entries.iter().map(|e| e.slot as usize + 1).max().unwrap_or(0);
        if top > self.capacity {
            return Err(StoreError::OutOfRange(top as SlotId - 1));
        }
        fresh.slots = vec![Slot::default(); top];
        for e in &image.entries {
            if fresh.index.insert(e.key, e.slot).is_some() {
                return Err(StoreError::AlreadyPresent);
            }
            fresh.slots[e.slot as usize] = Slot {
                value: e.value.clone(),
                version: e.version,
                valid: e.valid,
            };
        }
        let used: BTreeSet<SlotId> = fresh.index.values().copied().collect();
        if used.len() != fresh.index.len() {
            return Err(StoreError::AlreadyPresent);
        }
        fresh.free = (0..top as SlotId).filter(|s| !used.contains(s)).collect();
        *self = fresh;
        Ok(())
    }

    /// Copies the image's entries into this store key by key, allocating
    /// slots for unknown keys. Slot ids of the source are not preserved.
    pub fn merge(&mut self, image: &StoreImage) -> Result<(), StoreError> {
        for e in &image.entries {
            let loc = match self.lookup(&e.key) {
                Ok(loc) => loc,
                Err(_) => self.insert_index(e.key, &e.value)?,
            };
            self.write_slot(loc, &e.value, e.version)?;
            if !e.valid {
                self.tombstone(loc)?;
            }
        }
        Ok(())
    }

    fn check(&self, loc: SlotId) -> Result<(), StoreError> {
        if (loc as usize) < self.capacity {
            Ok(())
        } else {
            Err(StoreError::OutOfRange(loc))
        }
    }

    fn ensure(&mut self, loc: SlotId) {
        let len = self.slots.len();
        if loc as usize >= len {
            // unmapped slots stay allocatable
            self.free.extend(len as SlotId..=loc);
            self.slots.resize(loc as usize + 1, Slot::default());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageEntry {
    pub key: Key,
    pub slot: SlotId,
    pub value: Vec<u8>,
    pub version: Version,
    pub valid: bool,
}

/// Deep copy of a store, serializable as a length-prefixed binary stream.
///
/// ```text
/// "NCSS" | version u8 (=1) | capacity u32 | count u32 | count * entry
/// entry = key[16] | slot u32 | session u16 | seq u32 | valid u8 | val_len u8 | value
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StoreImage {
    pub capacity: usize,
    pub entries: Vec<ImageEntry>,
}

const IMAGE_MAGIC: &[u8; 4] = b"NCSS";
const IMAGE_VERSION: u8 = 1;

impl StoreImage {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(IMAGE_MAGIC)?;
        w.write_all(&[IMAGE_VERSION])?;
        w.write_all(&(self.capacity as u32).to_be_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_be_bytes())?;
        for e in &self.entries {
            w.write_all(&e.key.0)?;
            w.write_all(&e.slot.to_be_bytes())?;
            w.write_all(&e.version.session.to_be_bytes())?;
            w.write_all(&e.version.seq.to_be_bytes())?;
            w.write_all(&[e.valid as u8, e.value.len() as u8])?;
            w.write_all(&e.value)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> io::Result<StoreImage> {
        let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
        let mut head = [0u8; 13];
        r.read_exact(&mut head)?;
        if &head[..4] != IMAGE_MAGIC {
            return Err(bad("bad snapshot magic"));
        }
        if head[4] != IMAGE_VERSION {
            return Err(bad("unsupported snapshot version"));
        }
        let capacity = u32::from_be_bytes(head[5..9].try_into().unwrap()) as usize;
        let count = u32::from_be_bytes(head[9..13].try_into().unwrap()) as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let mut fixed = [0u8; KEY_LEN + 12];
            r.read_exact(&mut fixed)?;
            let val_len = fixed[KEY_LEN + 11] as usize;
            if val_len > MAX_VALUE {
                return Err(bad("snapshot value too long"));
            }
            let mut value = vec![0u8; val_len];
            r.read_exact(&mut value)?;
            let f = &fixed[KEY_LEN..];
            entries.push(ImageEntry {
                key: Key::from_bytes(&fixed[..KEY_LEN]),
                slot: u32::from_be_bytes(f[0..4].try_into().unwrap()),
                version: Version::new(
                    u16::from_be_bytes(f[4..6].try_into().unwrap()),
                    u32::from_be_bytes(f[6..10].try_into().unwrap()),
                ),
                valid: f[10] != 0,
                value,
            });
        }
        Ok(StoreImage { capacity, entries })
    }

    pub fn from_bytes(bytes: &[u8]) -> io::Result<StoreImage> {
        StoreImage::read_from(bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k(s: &str) -> Key {
        Key::from_bytes(s.as_bytes())
    }

    #[test]
    fn lookup_after_insert() {
        let mut s = Store::with_capacity(4);
        assert_eq!(s.insert_index(k("X"), b"A"), Ok(0));
        assert_eq!(s.lookup(&k("X")), Ok(0));
        assert_eq!(s.lookup(&k("nope")), Err(StoreError::NotFound));
        let z = s.insert_index(k("Z"), b"C").unwrap();
        assert_ne!(z, s.lookup(&k("X")).unwrap());
    }

    #[test]
    fn store_full() {
        let mut s = Store::with_capacity(1);
        s.insert_index(k("X"), b"A").unwrap();
        assert_eq!(s.insert_index(k("Y"), b"B"), Err(StoreError::StoreFull));
    }

    #[test]
    fn slot_reused_after_delete_and_gc() {
        let mut s = Store::with_capacity(4);
        let loc = s.insert_index(k("X"), b"A").unwrap();
        s.tombstone(loc).unwrap();
        s.gc(&k("X")).unwrap();
        assert_eq!(s.insert_index(k("Y"), b"B"), Ok(0));

        // freeing a middle slot hands it out before fresh ones
        let mut s = Store::with_capacity(4);
        for name in ["a", "b", "c"] {
            s.insert_index(k(name), b"").unwrap();
        }
        s.gc(&k("b")).unwrap();
        assert_eq!(s.insert_index(k("d"), b""), Ok(1));
        assert_eq!(s.insert_index(k("e"), b""), Ok(3));
    }

    #[test]
    fn read_and_write_slots() {
        let mut s = Store::with_capacity(4);
        let loc = s.insert_index(k("X"), b"A").unwrap();
        let slot = s.read_slot(loc).unwrap();
        assert_eq!((slot.value.as_slice(), slot.version, slot.valid), (&b"A"[..], Version::ZERO, true));

        s.write_slot(loc, b"B", Version::new(0, 1)).unwrap();
        s.write_slot(loc, b"C", Version::new(0, 2)).unwrap();
        let slot = s.read_slot(loc).unwrap();
        assert_eq!((slot.value.as_slice(), slot.version), (&b"C"[..], Version::new(0, 2)));

        s.write_slot(loc, b"B", Version::new(0, 5)).unwrap();
        assert_eq!(s.read_slot(loc).unwrap().version, Version::new(0, 5));

        assert_eq!(s.read_slot(4), Err(StoreError::OutOfRange(4)));
        assert_eq!(s.write_slot(9, b"", Version::ZERO), Err(StoreError::OutOfRange(9)));
    }

    #[test]
    fn two_step_delete() {
        let mut s = Store::with_capacity(4);
        let loc = s.insert_index(k("X"), b"A").unwrap();
        s.tombstone(loc).unwrap();
        assert!(!s.read_slot(loc).unwrap().valid);
        assert_eq!(s.lookup(&k("X")), Ok(loc));
        s.write_slot(loc, b"B", Version::new(0, 1)).unwrap();
        assert!(s.read_slot(loc).unwrap().valid);
        s.tombstone(loc).unwrap();
        s.gc(&k("X")).unwrap();
        assert_eq!(s.lookup(&k("X")), Err(StoreError::NotFound));
        assert_eq!(s.gc(&k("X")), Err(StoreError::NotFound));
    }

    #[test]
    fn snapshot_and_load() {
        let empty = Store::with_capacity(8);
        assert!(empty.snapshot().is_empty());

        let mut src = Store::with_capacity(8);
        for (i, name) in ["a", "b", "c"].iter().enumerate() {
            let loc = src.insert_index(k(name), name.as_bytes()).unwrap();
            src.write_slot(loc, b"v", Version::new(1, i as u32 + 3)).unwrap();
        }
        src.gc(&k("a")).unwrap();
        let mut dst = Store::with_capacity(8);
        dst.insert_index(k("zzz"), b"junk").unwrap();
        dst.load(&src.snapshot()).unwrap();
        assert_eq!(dst, src);
        for key in src.keys() {
            assert_eq!(dst.version_of(key), src.version_of(key));
        }
        // next allocation matches on both sides
        assert_eq!(dst.insert_index(k("q"), b""), src.clone().insert_index(k("q"), b""));

        let mut small = Store::with_capacity(2);
        assert!(matches!(small.load(&src.snapshot()), Err(StoreError::CapacityMismatch { .. })));
    }

    #[test]
    fn image_bytes_round_trip() {
        let mut s = Store::with_capacity(16);
        let loc = s.insert_index(k("a"), b"hello").unwrap();
        s.write_slot(loc, b"world", Version::new(2, 9)).unwrap();
        s.insert_index(k("b"), b"").unwrap();
        let img = s.snapshot();
        let bytes = img.to_bytes();
        assert_eq!(&bytes[..4], b"NCSS");
        assert_eq!(StoreImage::from_bytes(&bytes).unwrap(), img);
        assert!(StoreImage::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn merge_copies_selected_keys() {
        let mut src = Store::with_capacity(8);
        for name in ["a", "b", "c"] {
            let loc = src.insert_index(k(name), b"x").unwrap();
            src.write_slot(loc, name.as_bytes(), Version::new(0, 7)).unwrap();
        }
        let mut dst = Store::with_capacity(8);
        dst.merge(&src.snapshot_keys([&k("c"), &k("a")])).unwrap();
        assert_eq!(dst.len(), 2);
        assert_eq!(dst.get(&k("c")).unwrap().value, b"c");
        assert_eq!(dst.version_of(&k("a")), Some(Version::new(0, 7)));
        assert!(dst.get(&k("b")).is_none());
    }

    #[derive(Debug, Clone)]
    enum Op {
        Insert(u8),
        Write(u8, u32),
        Tombstone(u8),
        Gc(u8),
    }

    fn arb_op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u8..12).prop_map(Op::Insert),
            (0u8..12, any::<u32>()).prop_map(|(k, s)| Op::Write(k, s)),
            (0u8..12).prop_map(Op::Tombstone),
            (0u8..12).prop_map(Op::Gc),
        ]
    }

    proptest! {
        #[test]
        fn index_stays_injective(ops in proptest::collection::vec(arb_op(), 0..80)) {
            let mut s = Store::with_capacity(6);
            for op in ops {
                let key = |i: u8| Key::from_index(i as u64);
                match op {
                    Op::Insert(i) => { let _ = s.insert_index(key(i), &[i]); }
                    Op::Write(i, seq) => if let Ok(loc) = s.lookup(&key(i)) {
                        s.write_slot(loc, &[i], Version::new(0, seq)).unwrap();
                    },
                    Op::Tombstone(i) => if let Ok(loc) = s.lookup(&key(i)) { s.tombstone(loc).unwrap(); },
                    Op::Gc(i) => { let _ = s.gc(&key(i)); }
                }
                let slots: Vec<SlotId> = s.entries().map(|(_, loc, _)| loc).collect();
                let distinct: BTreeSet<_> = slots.iter().collect();
                prop_assert_eq!(distinct.len(), slots.len());
                prop_assert!(slots.iter().all(|&l| (l as usize) < s.capacity()));
                prop_assert!(s.len() <= s.capacity());
                let mut copy = Store::with_capacity(6);
                copy.load(&s.snapshot()).unwrap();
                prop_assert_eq!(&copy, &s);
            }
        }
    }
}
