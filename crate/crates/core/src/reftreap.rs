//! Uncompressed treap keyed by the tabulation weight function.
//!
//! The pivot of every subtree is its maximum-weight key. Updates rebuild the
//! affected subtree from its key list, so the tree is a pure function of the
//! key set. This is the oracle the compressed treap is checked against.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::weight::WeightFn;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreapNode {
    pub key: u64,
    pub weight: u64,
    /// Size of the left subtree, i.e. the rank of `key` inside this subtree.
    pub r: usize,
    pub size: usize,
    pub left: Option<Box<TreapNode>>,
    pub right: Option<Box<TreapNode>>,
}

/// Where an insertion must start rebuilding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RebuildRoot {
    /// Rebuild the subtree whose root holds this key.
    Node(u64),
    /// The new key becomes a leaf.
    Leaf,
}

fn build_rec(keys: &[u64], weights: &[u64]) -> Option<Box<TreapNode>> {
    if keys.is_empty() {
        return None;
    }
    let (pos, _) = weights.iter().enumerate().max_by_key(|&(_, w)| *w)?;
    Some(Box::new(TreapNode {
        key: keys[pos],
        weight: weights[pos],
        r: pos,
        size: keys.len(),
        left: build_rec(&keys[..pos], &weights[..pos]),
        right: build_rec(&keys[pos + 1..], &weights[pos + 1..]),
    }))
}

/// Builds the treap for a strictly increasing key list.
///
/// Any two keys of equal weight raise [`Error::FailureDetected`].
pub fn build(keys: &[u64], h: &WeightFn) -> Result<Option<Box<TreapNode>>> {
    if keys.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::Precondition("keys must be strictly increasing".into()));
    }
    let weights: Vec<u64> = keys.iter().map(|&k| h.weight(k)).collect();
    let mut seen = vec![false; h.w() as usize];
    for &w in &weights {
        if std::mem::replace(&mut seen[w as usize], true) {
            return Err(Error::FailureDetected(format!("two keys share weight {w}")));
        }
    }
    Ok(build_rec(keys, &weights))
}

fn collect(node: &Option<Box<TreapNode>>, out: &mut Vec<u64>) {
    if let Some(n) = node {
        collect(&n.left, out);
        out.push(n.key);
        collect(&n.right, out);
    }
}

fn fix(n: &mut TreapNode) {
    let l = n.left.as_ref().map_or(0, |c| c.size);
    let r = n.right.as_ref().map_or(0, |c| c.size);
    n.r = l;
    n.size = l + r + 1;
}

#[derive(Clone, Debug)]
pub struct RefTreap {
    h: Arc<WeightFn>,
    root: Option<Box<TreapNode>>,
    weight_count: HashMap<u64, usize>,
}

impl RefTreap {
    pub fn new(h: Arc<WeightFn>) -> Self {
        RefTreap { h, root: None, weight_count: HashMap::new() }
    }

    pub fn from_keys(h: Arc<WeightFn>, keys: &[u64]) -> Result<Self> {
        let root = build(keys, &h)?;
        let mut weight_count = HashMap::new();
        for &k in keys {
            *weight_count.entry(h.weight(k)).or_insert(0) += 1;
        }
        Ok(RefTreap { h, root, weight_count })
    }

    pub fn root(&self) -> Option<&TreapNode> {
        self.root.as_deref()
    }

    pub fn len(&self) -> usize {
        self.root.as_ref().map_or(0, |n| n.size)
    }

    pub fn is_empty(&self) -> bool {
        self.root.is_none()
    }

    pub fn keys(&self) -> Vec<u64> {
        let mut out = Vec::with_capacity(self.len());
        collect(&self.root, &mut out);
        out
    }

    pub fn contains(&self, x: u64) -> bool {
        let mut cur = &self.root;
        while let Some(n) = cur {
            if x == n.key {
                return true;
            }
            cur = if x < n.key { &n.left } else { &n.right };
        }
        false
    }

    /// The highest node on the search path for `x` whose weight is below `h(x)`.
    pub fn locate_rebuild_root(&self, x: u64) -> RebuildRoot {
        let hx = self.h.weight(x);
        let mut cur = &self.root;
        while let Some(n) = cur {
            if n.weight < hx {
                return RebuildRoot::Node(n.key);
            }
            cur = if x < n.key { &n.left } else { &n.right };
        }
        RebuildRoot::Leaf
    }

    /// Inserts `x` and returns the number of nodes rebuilt.
    pub fn insert(&mut self, x: u64) -> Result<usize> {
        if self.contains(x) {
            return Err(Error::Precondition(format!("key {x} already present")));
        }
        let hx = self.h.weight(x);
        if self.weight_count.get(&hx).copied().unwrap_or(0) > 0 {
            return Err(Error::FailureDetected(format!("key {x} ties weight {hx}")));
        }
        let rebuilt = Self::insert_rec(&mut self.root, x, hx, &self.h);
        *self.weight_count.entry(hx).or_insert(0) += 1;
        Ok(rebuilt)
    }

    fn insert_rec(slot: &mut Option<Box<TreapNode>>, x: u64, hx: u64, h: &WeightFn) -> usize {
        match slot {
            None => {
                *slot = Some(Box::new(TreapNode { key: x, weight: hx, r: 0, size: 1, left: None, right: None }));
                1
            }
            Some(n) if n.weight < hx => {
                let mut keys = Vec::with_capacity(n.size + 1);
                collect(slot, &mut keys);
                let pos = keys.partition_point(|&k| k < x);
                keys.insert(pos, x);
                let weights: Vec<u64> = keys.iter().map(|&k| h.weight(k)).collect();
                *slot = build_rec(&keys, &weights);
                keys.len()
            }
            Some(n) => {
                let rebuilt = if x < n.key {
                    Self::insert_rec(&mut n.left, x, hx, h)
                } else {
                    Self::insert_rec(&mut n.right, x, hx, h)
                };
                fix(n);
                rebuilt
            }
        }
    }

    /// Deletes `x` and returns the number of nodes rebuilt.
    pub fn delete(&mut self, x: u64) -> Result<usize> {
        if !self.contains(x) {
            return Err(Error::Precondition(format!("key {x} not present")));
        }
        let rebuilt = Self::delete_rec(&mut self.root, x, &self.h);
        let hx = self.h.weight(x);
        if let Some(c) = self.weight_count.get_mut(&hx) {
            *c -= 1;
            if *c == 0 {
                self.weight_count.remove(&hx);
            }
        }
        Ok(rebuilt)
    }

    fn delete_rec(slot: &mut Option<Box<TreapNode>>, x: u64, h: &WeightFn) -> usize {
        let n = slot.as_mut().expect("delete_rec called on a present key");
        if n.key == x {
            let mut keys = Vec::with_capacity(n.size);
            collect(slot, &mut keys);
            keys.retain(|&k| k != x);
            let weights: Vec<u64> = keys.iter().map(|&k| h.weight(k)).collect();
            *slot = build_rec(&keys, &weights);
            return keys.len();
        }
        let rebuilt = if x < n.key {
            Self::delete_rec(&mut n.left, x, h)
        } else {
            Self::delete_rec(&mut n.right, x, h)
        };
        fix(n);
        rebuilt
    }

    /// Number of keys strictly below `x`.
    pub fn rank(&self, x: u64) -> usize {
        let mut acc = 0;
        let mut cur = &self.root;
        while let Some(n) = cur {
            if x <= n.key {
                cur = &n.left;
            } else {
                acc += n.r + 1;
                cur = &n.right;
            }
        }
        acc
    }

    /// The `i`-th smallest key.
    pub fn select(&self, mut i: usize) -> Result<u64> {
        if i >= self.len() {
            return Err(Error::Precondition(format!("select index {i} out of range {}", self.len())));
        }
        let mut cur = &self.root;
        while let Some(n) = cur {
            match i.cmp(&n.r) {
                std::cmp::Ordering::Less => cur = &n.left,
                std::cmp::Ordering::Equal => return Ok(n.key),
                std::cmp::Ordering::Greater => {
                    i -= n.r + 1;
                    cur = &n.right;
                }
            }
        }
        unreachable!("subtree sizes are consistent")
    }

    /// Number of nodes on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn d(n: &Option<Box<TreapNode>>) -> usize {
            n.as_ref().map_or(0, |n| 1 + d(&n.left).max(d(&n.right)))
        }
        d(&self.root)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hf() -> Arc<WeightFn> {
        Arc::new(WeightFn::new(4096, 1 << 12, 3, 1 << 20).unwrap())
    }

    #[test]
    fn empty_and_single() {
        let h = hf();
        assert!(build(&[], &h).unwrap().is_none());
        let t = build(&[42], &h).unwrap().unwrap();
        assert_eq!((t.key, t.r, t.size), (42, 0, 1));
    }

    #[test]
    fn insert_delete_round_trip_is_identical() {
        let h = hf();
        let keys = [3u64, 900, 5000, 77777, 123456];
        let mut t = RefTreap::from_keys(h.clone(), &keys).unwrap();
        let before = t.root.clone();
        if t.insert(4242).is_ok() {
            t.delete(4242).unwrap();
        }
        assert_eq!(t.root, before);
        assert_eq!(t.rank(3), 0);
        assert_eq!(t.select(0).unwrap(), 3);
    }
}
