//! Node subsets as fixed-width bit masks.
//!
//! Every set the algorithms manipulate (conditioning sets, Fourier keys,
//! Markov blankets, the shrinking working set) is a [`SubsetMask`]. Node `j`
//! is bit `j`; networks are limited to [`MAX_NODES`] nodes.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Largest supported node count.
pub const MAX_NODES: usize = 64;

#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubsetMask(u64);

impl SubsetMask {
    pub const EMPTY: SubsetMask = SubsetMask(0);

    #[inline]
    pub const fn from_bits(bits: u64) -> Self {
        SubsetMask(bits)
    }

    #[inline]
    pub const fn bits(self) -> u64 {
        self.0
    }

    /// `{0, 1, ..., n-1}`.
    pub fn full(n: usize) -> Self {
        assert!(n <= MAX_NODES, "at most {MAX_NODES} nodes are supported");
        if n == MAX_NODES {
            SubsetMask(u64::MAX)
        } else {
            SubsetMask((1u64 << n) - 1)
        }
    }

    #[inline]
    pub fn singleton(i: usize) -> Self {
        debug_assert!(i < MAX_NODES);
        SubsetMask(1u64 << i)
    }

    pub fn pair(a: usize, b: usize) -> Self {
        Self::singleton(a).union(Self::singleton(b))
    }

    pub fn from_nodes<I: IntoIterator<Item = usize>>(nodes: I) -> Self {
        nodes.into_iter().fold(Self::EMPTY, |acc, i| acc.with(i))
    }

    #[inline]
    pub fn contains(self, i: usize) -> bool {
        i < MAX_NODES && self.0 >> i & 1 == 1
    }

    #[inline]
    pub fn with(self, i: usize) -> Self {
        SubsetMask(self.0 | 1u64 << i)
    }

    #[inline]
    pub fn without(self, i: usize) -> Self {
        SubsetMask(self.0 & !(1u64 << i))
    }

    #[inline]
    pub fn union(self, other: Self) -> Self {
        SubsetMask(self.0 | other.0)
    }

    #[inline]
    pub fn intersection(self, other: Self) -> Self {
        SubsetMask(self.0 & other.0)
    }

    #[inline]
    pub fn difference(self, other: Self) -> Self {
        SubsetMask(self.0 & !other.0)
    }

    #[inline]
    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    #[inline]
    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    #[inline]
    pub fn is_subset_of(self, other: Self) -> bool {
        self.0 & !other.0 == 0
    }

    /// Smallest member, if any.
    pub fn first(self) -> Option<usize> {
        (self.0 != 0).then(|| self.0.trailing_zeros() as usize)
    }

    /// Members in ascending order.
    pub fn iter(self) -> Members {
        Members(self.0)
    }

    /// All subsets of `self`, starting from the empty set, in increasing
    /// order of their bit patterns.
    pub fn subsets(self) -> Subsets {
        Subsets {
            set: self.0,
            next: Some(0),
        }
    }

    /// Packs the members of `self` that lie in `ground` into the low bits,
    /// preserving order. This is the table index of `self` in a dense table
    /// over `2^ground`.
    pub fn compress(self, ground: SubsetMask) -> usize {
        let mut out = 0usize;
        for (k, j) in ground.iter().enumerate() {
            if self.contains(j) {
                out |= 1 << k;
            }
        }
        out
    }

    /// Inverse of [`compress`](Self::compress).
    pub fn expand(index: usize, ground: SubsetMask) -> SubsetMask {
        let mut out = SubsetMask::EMPTY;
        for (k, j) in ground.iter().enumerate() {
            if index >> k & 1 == 1 {
                out = out.with(j);
            }
        }
        out
    }

    pub fn to_vec(self) -> Vec<usize> {
        self.iter().collect()
    }
}

impl fmt::Debug for SubsetMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl fmt::Display for SubsetMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (k, j) in self.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{j}")?;
        }
        write!(f, "]")
    }
}

impl FromIterator<usize> for SubsetMask {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        SubsetMask::from_nodes(iter)
    }
}

impl IntoIterator for SubsetMask {
    type Item = usize;
    type IntoIter = Members;

    fn into_iter(self) -> Members {
        self.iter()
    }
}

/// Iterator over the members of a mask.
#[derive(Clone, Debug)]
pub struct Members(u64);

impl Iterator for Members {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        if self.0 == 0 {
            return None;
        }
        let j = self.0.trailing_zeros() as usize;
        self.0 &= self.0 - 1;
        Some(j)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.0.count_ones() as usize;
        (n, Some(n))
    }
}

impl ExactSizeIterator for Members {}

/// Carry-rippler enumeration of all subsets of a mask.
#[derive(Clone, Debug)]
pub struct Subsets {
    set: u64,
    next: Option<u64>,
}

impl Iterator for Subsets {
    type Item = SubsetMask;

    #[inline]
    fn next(&mut self) -> Option<SubsetMask> {
        let cur = self.next?;
        let following = cur.wrapping_sub(self.set) & self.set;
        self.next = (following != 0).then_some(following);
        Some(SubsetMask(cur))
    }
}
