//! IP prefixes and a longest-prefix-match table.
//!
//! Addresses of both families are stored left-aligned in a `u128` so that
//! masking and containment work the same way for IPv4 and IPv6.

use std::collections::BTreeMap;
use std::fmt;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::str::FromStr;

use thiserror::Error;

/// Address family of a prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Family {
    V4,
    V6,
}

impl Family {
    /// Number of address bits in this family.
    pub const fn max_len(self) -> u8 {
        match self {
            Family::V4 => 32,
            Family::V6 => 128,
        }
    }

    pub fn of(addr: IpAddr) -> Self {
        match addr {
            IpAddr::V4(_) => Family::V4,
            IpAddr::V6(_) => Family::V6,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::V4 => "v4",
            Family::V6 => "v6",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PrefixError {
    #[error("missing '/' in prefix {0:?}")]
    MissingLength(String),
    #[error("malformed address in prefix {0:?}")]
    BadAddress(String),
    #[error("malformed prefix length in {0:?}")]
    BadLength(String),
    #[error("prefix length {len} out of range for {family} (max {max})")]
    LengthOutOfRange { family: Family, len: u32, max: u8 },
}

/// A canonical IP prefix: all bits beyond `len` are zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IpPrefix {
    family: Family,
    bits: u128,
    len: u8,
}

fn mask(len: u8) -> u128 {
    if len == 0 {
        0
    } else {
        u128::MAX << (128 - u32::from(len))
    }
}

fn left_aligned(addr: IpAddr) -> u128 {
    match addr {
        IpAddr::V4(a) => u128::from(u32::from(a)) << 96,
        IpAddr::V6(a) => u128::from(a),
    }
}

impl IpPrefix {
    /// Builds a prefix from an address and length, clearing host bits.
    pub fn new(addr: IpAddr, len: u8) -> Result<Self, PrefixError> {
        let family = Family::of(addr);
        if len > family.max_len() {
            return Err(PrefixError::LengthOutOfRange {
                family,
                len: len.into(),
                max: family.max_len(),
            });
        }
        Ok(IpPrefix {
            family,
            bits: left_aligned(addr) & mask(len),
            len,
        })
    }

    /// The host prefix (`/32` or `/128`) of a single address.
    pub fn host(addr: IpAddr) -> Self {
        let family = Family::of(addr);
        IpPrefix {
            family,
            bits: left_aligned(addr),
            len: family.max_len(),
        }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> u8 {
        self.len
    }

    /// Whether this is a zero-length (default) prefix.
    pub fn is_default(&self) -> bool {
        self.len == 0
    }

    pub fn addr(&self) -> IpAddr {
        match self.family {
            Family::V4 => IpAddr::V4(Ipv4Addr::from((self.bits >> 96) as u32)),
            Family::V6 => IpAddr::V6(Ipv6Addr::from(self.bits)),
        }
    }

    /// Truncates this prefix to a shorter length.
    pub fn truncate(&self, len: u8) -> Self {
        let len = len.min(self.len);
        IpPrefix {
            family: self.family,
            bits: self.bits & mask(len),
            len,
        }
    }

    /// True iff `inner` lies within `self`.
    pub fn contains(&self, inner: &IpPrefix) -> bool {
        self.family == inner.family
            && self.len <= inner.len
            && inner.bits & mask(self.len) == self.bits
    }

    pub fn contains_addr(&self, addr: IpAddr) -> bool {
        self.contains(&IpPrefix::host(addr))
    }

    /// Number of addresses covered, as a float (`2^(max - len)`).
    pub fn address_count(&self) -> f64 {
        2f64.powi(i32::from(self.family.max_len() - self.len))
    }
}

impl fmt::Display for IpPrefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.addr(), self.len)
    }
}

impl FromStr for IpPrefix {
    type Err = PrefixError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (addr, len) = s
            .split_once('/')
            .ok_or_else(|| PrefixError::MissingLength(s.to_string()))?;
        let addr: IpAddr = addr
            .parse()
            .map_err(|_| PrefixError::BadAddress(s.to_string()))?;
        let len: u32 = len
            .parse()
            .map_err(|_| PrefixError::BadLength(s.to_string()))?;
        let family = Family::of(addr);
        if len > u32::from(family.max_len()) {
            return Err(PrefixError::LengthOutOfRange {
                family,
                len,
                max: family.max_len(),
            });
        }
        IpPrefix::new(addr, len as u8)
    }
}

/// Parses `addr/len` text into a canonical prefix.
pub fn parse_prefix(text: &str) -> Result<IpPrefix, PrefixError> {
    text.parse()
}

/// Ordered map from prefixes to values with longest-prefix-match lookup.
///
/// Inserting a prefix that is already present appends to its value list, so
/// every value stored under a prefix stays retrievable.
#[derive(Clone, Debug)]
pub struct PrefixTable<V> {
    entries: BTreeMap<IpPrefix, Vec<V>>,
    // Bitmask of populated prefix lengths per family, indexed [v4, v6].
    lengths: [[bool; 129]; 2],
}

impl<V> Default for PrefixTable<V> {
    fn default() -> Self {
        PrefixTable {
            entries: BTreeMap::new(),
            lengths: [[false; 129]; 2],
        }
    }
}

fn family_slot(family: Family) -> usize {
    match family {
        Family::V4 => 0,
        Family::V6 => 1,
    }
}

impl<V> PrefixTable<V> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, prefix: IpPrefix, value: V) {
        self.lengths[family_slot(prefix.family)][usize::from(prefix.len)] = true;
        self.entries.entry(prefix).or_default().push(value);
    }

    /// Number of distinct prefixes.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Values stored under exactly `prefix`.
    pub fn get(&self, prefix: &IpPrefix) -> Option<&[V]> {
        self.entries.get(prefix).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&IpPrefix, &[V])> {
        self.entries.iter().map(|(p, v)| (p, v.as_slice()))
    }

    /// All entries whose prefix contains `prefix`, most specific first.
    pub fn covering<'a>(
        &'a self,
        prefix: &IpPrefix,
    ) -> impl Iterator<Item = (&'a IpPrefix, &'a [V])> + 'a {
        let prefix = *prefix;
        let lengths = &self.lengths[family_slot(prefix.family)];
        (0..=prefix.len)
            .rev()
            .filter(move |&len| lengths[usize::from(len)])
            .filter_map(move |len| {
                self.entries
                    .get_key_value(&prefix.truncate(len))
                    .map(|(p, v)| (p, v.as_slice()))
            })
    }

    /// Most specific entry containing `prefix`.
    pub fn longest_match_prefix(&self, prefix: &IpPrefix) -> Option<(&IpPrefix, &[V])> {
        self.covering(prefix).next()
    }

    /// Most specific entry containing `addr`, with every value stored there.
    pub fn longest_match(&self, addr: IpAddr) -> Option<(&IpPrefix, &[V])> {
        self.longest_match_prefix(&IpPrefix::host(addr))
    }
}

impl<V> FromIterator<(IpPrefix, V)> for PrefixTable<V> {
    fn from_iter<I: IntoIterator<Item = (IpPrefix, V)>>(iter: I) -> Self {
        let mut table = PrefixTable::new();
        for (p, v) in iter {
            table.insert(p, v);
        }
        table
    }
}
