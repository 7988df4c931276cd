//! State-based CRDT map keyed by (origin, key) with per-origin versions.
//! Each writer owns one origin and only ever writes there, so concurrent
//! replicas merge by taking the higher version of every entry — commutative,
//! associative, idempotent, and never losing a newer write.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CrdtError {
    #[error("origin {attempted:?} may not write entries owned by {owner:?}")]
    ForeignOrigin { owner: String, attempted: String },
    #[error("this replica is read-only (merge accumulator)")]
    ReadOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Versioned<V> {
    pub version: u64,
    pub value: V,
}

#[derive(Debug, Clone)]
pub struct CrdtMap<K: Ord + Clone, V: Clone> {
    owner: Option<String>,
    entries: BTreeMap<(String, K), Versioned<V>>,
}

impl<K: Ord + Clone, V: Clone> Default for CrdtMap<K, V> {
    fn default() -> Self {
        Self::unowned()
    }
}

impl<K: Ord + Clone, V: Clone> CrdtMap<K, V> {
    /// A writable replica owned by `origin`.
    pub fn new(origin: &str) -> Self {
        Self {
            owner: Some(origin.to_string()),
            entries: BTreeMap::new(),
        }
    }

    /// A read-only accumulator used to merge other replicas into.
    pub fn unowned() -> Self {
        Self {
            owner: None,
            entries: BTreeMap::new(),
        }
    }

    pub fn owner(&self) -> Option<&str> {
        self.owner.as_deref()
    }

    /// Writes `(origin, key)`, bumping that entry's version. Only the owning
    /// origin may put.
    pub fn put(&mut self, origin: &str, key: K, value: V) -> Result<u64, CrdtError> {
        match &self.owner {
            None => return Err(CrdtError::ReadOnly),
            Some(owner) if owner != origin => {
                return Err(CrdtError::ForeignOrigin {
                    owner: owner.clone(),
                    attempted: origin.to_string(),
                })
            }
            Some(_) => {}
        }
        let slot = self.entries.entry((origin.to_string(), key));
        let versioned = slot.or_insert(Versioned {
            version: 0,
            value: value.clone(),
        });
        versioned.version += 1;
        versioned.value = value;
        Ok(versioned.version)
    }

    /// Merges `other` into `self`: for every (origin, key) the entry with the
    /// higher version wins. Ties cannot disagree for a single-writer origin,
    /// so the existing entry is kept.
    pub fn merge_from(&mut self, other: &Self) {
        for (key, incoming) in &other.entries {
            match self.entries.get_mut(key) {
                Some(existing) if existing.version >= incoming.version => {}
                Some(existing) => *existing = incoming.clone(),
                None => {
                    self.entries.insert(key.clone(), incoming.clone());
                }
            }
        }
    }

    /// Symmetric merge producing a fresh unowned replica.
    pub fn merge(a: &Self, b: &Self) -> Self {
        let mut out = Self::unowned();
        out.merge_from(a);
        out.merge_from(b);
        out
    }

    pub fn get(&self, origin: &str, key: &K) -> Option<&V> {
        self.entries
            .get(&(origin.to_string(), key.clone()))
            .map(|v| &v.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, K), &Versioned<V>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries_eq(&self, other: &Self) -> bool
    where
        V: PartialEq,
    {
        self.entries == other.entries
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn put_bumps_versions_and_rejects_foreign_origin() {
        let mut m: CrdtMap<u32, i64> = CrdtMap::new("r1");
        assert_eq!(m.put("r1", 7, 10).unwrap(), 1);
        assert_eq!(m.put("r1", 7, 11).unwrap(), 2);
        assert_eq!(m.get("r1", &7), Some(&11));
        assert_eq!(
            m.put("r2", 7, 99),
            Err(CrdtError::ForeignOrigin {
                owner: "r1".into(),
                attempted: "r2".into()
            })
        );
    }

    #[test]
    fn merge_identity_and_disjoint_origins() {
        let mut a: CrdtMap<u32, i64> = CrdtMap::new("r1");
        a.put("r1", 1, 5).unwrap();
        let empty = CrdtMap::unowned();
        assert!(CrdtMap::merge(&a, &empty).entries_eq(&CrdtMap::merge(&empty, &a)));
        assert_eq!(CrdtMap::merge(&a, &empty).len(), 1);

        let mut b: CrdtMap<u32, i64> = CrdtMap::new("r2");
        b.put("r2", 1, 9).unwrap();
        let merged = CrdtMap::merge(&a, &b);
        assert_eq!(merged.len(), 2);
        assert_eq!(merged.get("r1", &1), Some(&5));
        assert_eq!(merged.get("r2", &1), Some(&9));
    }

    #[test]
    fn higher_version_wins() {
        let mut old: CrdtMap<u32, i64> = CrdtMap::new("r1");
        old.put("r1", 1, 5).unwrap();
        let mut new = old.clone();
        new.put("r1", 1, 6).unwrap();
        let merged = CrdtMap::merge(&old, &new);
        assert_eq!(merged.get("r1", &1), Some(&6));
        let merged_rev = CrdtMap::merge(&new, &old);
        assert!(merged.entries_eq(&merged_rev));
    }

    /// Builds a random replica that is consistent with single-writer origins:
    /// the value stored at (origin, key, version) is a deterministic function
    /// of the triple, as it would be if one writer produced the sequence.
    fn random_replica(rng: &mut ChaCha8Rng) -> CrdtMap<u8, u64> {
        let mut m = CrdtMap::unowned();
        for origin in 0..3u8 {
            for key in 0..4u8 {
                if rng.gen_bool(0.6) {
                    let version = rng.gen_range(1..6u64);
                    let value = u64::from(origin) * 1_000_003 + u64::from(key) * 101 + version;
                    m.entries
                        .insert((format!("o{origin}"), key), Versioned { version, value });
                }
            }
        }
        m
    }

    #[test]
    fn merge_laws_on_random_replicas() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for _ in 0..1000 {
            let a = random_replica(&mut rng);
            let b = random_replica(&mut rng);
            let c = random_replica(&mut rng);
            let ab = CrdtMap::merge(&a, &b);
            let ba = CrdtMap::merge(&b, &a);
            assert!(ab.entries_eq(&ba), "commutativity");
            let ab_c = CrdtMap::merge(&ab, &c);
            let a_bc = CrdtMap::merge(&a, &CrdtMap::merge(&b, &c));
            assert!(ab_c.entries_eq(&a_bc), "associativity");
            let abb = CrdtMap::merge(&ab, &b);
            assert!(abb.entries_eq(&ab), "idempotence");
        }
    }
}
