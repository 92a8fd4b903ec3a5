//! ROA storage with route-origin validation, and the ROV enforcement
//! registry fed by published measurement lists.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Read};
use std::str::FromStr;

use thiserror::Error;

use crate::error::{Error, RowError};
use crate::netprefix::{IpPrefix, PrefixTable};

//------------ Asn -----------------------------------------------------------

/// An autonomous system number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Asn(pub u32);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid AS number {0:?}")]
pub struct AsnParseError(pub String);

impl FromStr for Asn {
    type Err = AsnParseError;

    /// Accepts `65001`, `AS65001` and `as65001`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let digits = t
            .strip_prefix("AS")
            .or_else(|| t.strip_prefix("as"))
            .or_else(|| t.strip_prefix("As"))
            .unwrap_or(t);
        digits
            .parse()
            .map(Asn)
            .map_err(|_| AsnParseError(s.to_string()))
    }
}

impl fmt::Display for Asn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AS{}", self.0)
    }
}

//------------ RoaRecord -----------------------------------------------------

/// A route origin authorization: `asn` may originate `prefix` and any
/// more-specific down to `max_length`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoaRecord {
    pub asn: Asn,
    pub prefix: IpPrefix,
    pub max_length: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("max length {max_length} invalid for {prefix}")]
pub struct RoaRecordError {
    pub prefix: IpPrefix,
    pub max_length: u32,
}

impl RoaRecord {
    pub fn new(asn: Asn, prefix: IpPrefix, max_length: u32) -> Result<Self, RoaRecordError> {
        if max_length < u32::from(prefix.len()) || max_length > u32::from(prefix.family().max_len()) {
            return Err(RoaRecordError { prefix, max_length });
        }
        Ok(RoaRecord {
            asn,
            prefix,
            max_length: max_length as u8,
        })
    }

    /// Whether this ROA alone makes `origin` announcing `announced` valid.
    pub fn authorizes(&self, announced: &IpPrefix, origin: Asn) -> bool {
        self.asn == origin && self.prefix.contains(announced) && announced.len() <= self.max_length
    }
}

//------------ ValidationResult ----------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ValidationStatus {
    Valid,
    Invalid,
    NotFound,
}

/// Why an announcement with covering ROAs failed validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InvalidReason {
    /// No covering ROA names the origin, but some allows the length.
    Asn,
    /// A covering ROA names the origin, but none of those allows the length.
    Length,
    /// No covering ROA names the origin and none allows the length.
    AsnAndLength,
}

/// Outcome of origin validation for one announcement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ValidationResult {
    /// `exact_match` is set when a matching ROA's max length equals the
    /// announced prefix length.
    Valid { exact_match: bool },
    Invalid(InvalidReason),
    NotFound,
}

impl ValidationResult {
    pub fn status(&self) -> ValidationStatus {
        match self {
            ValidationResult::Valid { .. } => ValidationStatus::Valid,
            ValidationResult::Invalid(_) => ValidationStatus::Invalid,
            ValidationResult::NotFound => ValidationStatus::NotFound,
        }
    }

    pub fn is_valid(&self) -> bool {
        matches!(self, ValidationResult::Valid { .. })
    }

    /// True when at least one ROA covers the announced prefix.
    pub fn has_roa(&self) -> bool {
        !matches!(self, ValidationResult::NotFound)
    }

    pub fn exact_match(&self) -> bool {
        matches!(self, ValidationResult::Valid { exact_match: true })
    }

    pub fn asn_mismatch(&self) -> bool {
        matches!(
            self,
            ValidationResult::Invalid(InvalidReason::Asn | InvalidReason::AsnAndLength)
        )
    }

    pub fn length_mismatch(&self) -> bool {
        matches!(
            self,
            ValidationResult::Invalid(InvalidReason::Length | InvalidReason::AsnAndLength)
        )
    }
}

impl fmt::Display for ValidationResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValidationResult::Valid { exact_match: true } => "valid-exact",
            ValidationResult::Valid { exact_match: false } => "valid",
            ValidationResult::Invalid(InvalidReason::Asn) => "invalid-asn",
            ValidationResult::Invalid(InvalidReason::Length) => "invalid-length",
            ValidationResult::Invalid(InvalidReason::AsnAndLength) => "invalid-asn-length",
            ValidationResult::NotFound => "not-found",
        })
    }
}

//------------ RoaStore ------------------------------------------------------

/// Prefix-indexed ROA records for both address families.
#[derive(Clone, Debug, Default)]
pub struct RoaStore {
    table: PrefixTable<RoaRecord>,
    count: usize,
}

impl RoaStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, roa: RoaRecord) {
        self.table.insert(roa.prefix, roa);
        self.count += 1;
    }

    /// Number of records (not distinct prefixes).
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn get(&self, prefix: &IpPrefix) -> &[RoaRecord] {
        self.table.get(prefix).unwrap_or(&[])
    }

    pub fn iter(&self) -> impl Iterator<Item = &RoaRecord> {
        self.table.iter().flat_map(|(_, v)| v.iter())
    }

    /// All ROAs whose prefix contains `announced`.
    pub fn covering<'a>(&'a self, announced: &IpPrefix) -> impl Iterator<Item = &'a RoaRecord> + 'a {
        self.table.covering(announced).flat_map(|(_, v)| v.iter())
    }

    /// Origin validation of `origin` announcing `announced`.
    ///
    /// Any authorizing ROA makes the route valid. Otherwise the invalid
    /// class is chosen so that exactly one of ASN-only, length-only, or both
    /// applies.
    pub fn validate_origin(&self, announced: &IpPrefix, origin: Asn) -> ValidationResult {
        let mut covered = false;
        let mut asn_seen = false;
        let mut any_len_ok = false;
        let mut valid = false;
        let mut exact = false;
        for roa in self.covering(announced) {
            covered = true;
            let len_ok = announced.len() <= roa.max_length;
            any_len_ok |= len_ok;
            if roa.asn == origin {
                asn_seen = true;
                if len_ok {
                    valid = true;
                    exact |= roa.max_length == announced.len();
                }
            }
        }
        if !covered {
            ValidationResult::NotFound
        } else if valid {
            ValidationResult::Valid { exact_match: exact }
        } else if asn_seen {
            ValidationResult::Invalid(InvalidReason::Length)
        } else if any_len_ok {
            ValidationResult::Invalid(InvalidReason::Asn)
        } else {
            ValidationResult::Invalid(InvalidReason::AsnAndLength)
        }
    }
}

impl FromIterator<RoaRecord> for RoaStore {
    fn from_iter<I: IntoIterator<Item = RoaRecord>>(iter: I) -> Self {
        let mut store = RoaStore::new();
        for roa in iter {
            store.insert(roa);
        }
        store
    }
}

/// Convenience wrapper for [`RoaStore::validate_origin`].
pub fn validate_origin(store: &RoaStore, announced: &IpPrefix, origin: Asn) -> ValidationResult {
    store.validate_origin(announced, origin)
}

/// Result of loading a line-oriented input: the value plus rejected rows.
#[derive(Debug)]
pub struct Loaded<T> {
    pub value: T,
    pub rejected: Vec<RowError>,
}

/// Loads ROAs from `asn,prefix,max_length` CSV rows.
///
/// A header row is skipped when its first field is not an AS number. Bad
/// rows are collected with their line numbers and do not abort the load.
pub fn load_roas<R: Read>(reader: R) -> Result<Loaded<RoaStore>, Error> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut store = RoaStore::new();
    let mut rejected = Vec::new();
    for (idx, row) in rdr.records().enumerate() {
        let row = row?;
        let line = row.position().map_or(idx as u64 + 1, |p| p.line());
        if row.iter().all(str::is_empty) {
            continue;
        }
        let asn_field = row.get(0).unwrap_or("");
        if idx == 0 && asn_field.parse::<Asn>().is_err() {
            continue;
        }
        match parse_roa_row(&row) {
            Ok(roa) => store.insert(roa),
            Err(message) => rejected.push(RowError { line, message }),
        }
    }
    Ok(Loaded { value: store, rejected })
}

fn parse_roa_row(row: &csv::StringRecord) -> Result<RoaRecord, String> {
    if row.len() < 3 {
        return Err(format!("expected 3 fields, found {}", row.len()));
    }
    let asn: Asn = row[0].parse().map_err(|e: AsnParseError| e.to_string())?;
    let prefix: IpPrefix = row[1].parse().map_err(|e: crate::netprefix::PrefixError| e.to_string())?;
    let max_length: u32 = row[2]
        .parse()
        .map_err(|_| format!("invalid max length {:?}", &row[2]))?;
    RoaRecord::new(asn, prefix, max_length).map_err(|e| e.to_string())
}

//------------ RovRegistry ---------------------------------------------------

/// Where an ROV enforcement score came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RovSource {
    RovMonitor,
    ManrsCase1,
    Rovista,
    Hlavacek,
    ManrsCase2,
    Custom,
}

impl RovSource {
    pub fn label(self) -> &'static str {
        match self {
            RovSource::RovMonitor => "rov-monitor",
            RovSource::ManrsCase1 => "manrs-case1",
            RovSource::Rovista => "rovista",
            RovSource::Hlavacek => "hlavacek",
            RovSource::ManrsCase2 => "manrs-case2",
            RovSource::Custom => "custom",
        }
    }
}

impl fmt::Display for RovSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown ROV source {0:?}")]
pub struct UnknownRovSource(pub String);

impl FromStr for RovSource {
    type Err = UnknownRovSource;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "rov-monitor" => RovSource::RovMonitor,
            "manrs-case1" => RovSource::ManrsCase1,
            "rovista" => RovSource::Rovista,
            "hlavacek" => RovSource::Hlavacek,
            "manrs-case2" => RovSource::ManrsCase2,
            "custom" => RovSource::Custom,
            _ => return Err(UnknownRovSource(s.to_string())),
        })
    }
}

pub const DEFAULT_ROV_THRESHOLD: f64 = 0.5;

/// ROV enforcement scores per AS with a decision threshold.
///
/// An AS is enforcing when its score is at least the threshold. When the
/// same AS appears in several sources the highest score wins, so loading
/// several lists yields the union of their members.
#[derive(Clone, Debug)]
pub struct RovRegistry {
    scores: HashMap<Asn, (f64, RovSource)>,
    threshold: f64,
}

impl Default for RovRegistry {
    fn default() -> Self {
        RovRegistry::new(DEFAULT_ROV_THRESHOLD)
    }
}

impl RovRegistry {
    pub fn new(threshold: f64) -> Self {
        RovRegistry {
            scores: HashMap::new(),
            threshold: threshold.clamp(0.0, 1.0),
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn set_threshold(&mut self, threshold: f64) {
        self.threshold = threshold.clamp(0.0, 1.0);
    }

    pub fn insert(&mut self, asn: Asn, score: f64, source: RovSource) {
        let score = score.clamp(0.0, 1.0);
        match self.scores.get(&asn) {
            Some(&(old, _)) if old >= score => {}
            _ => {
                self.scores.insert(asn, (score, source));
            }
        }
    }

    pub fn score(&self, asn: Asn) -> Option<(f64, RovSource)> {
        self.scores.get(&asn).copied()
    }

    pub fn is_enforcing(&self, asn: Asn) -> bool {
        self.scores
            .get(&asn)
            .is_some_and(|&(score, _)| score >= self.threshold)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Merges a list of `asn[,score]` lines. Binary lists omit the score,
    /// which then defaults to 1.0.
    pub fn load_list<R: Read>(&mut self, reader: R, source: RovSource) -> Result<Vec<RowError>, Error> {
        let mut rejected = Vec::new();
        for (idx, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            let text = line.split('#').next().unwrap_or("").trim();
            if text.is_empty() {
                continue;
            }
            let mut fields = text.split(',').map(str::trim);
            let asn_field = fields.next().unwrap_or("");
            let asn = match asn_field.parse::<Asn>() {
                Ok(asn) => asn,
                Err(_) if idx == 0 => continue,
                Err(e) => {
                    rejected.push(RowError { line: idx as u64 + 1, message: e.to_string() });
                    continue;
                }
            };
            let score = match fields.next().filter(|s| !s.is_empty()) {
                None => 1.0,
                Some(s) => match s.parse::<f64>() {
                    Ok(v) if (0.0..=1.0).contains(&v) => v,
                    _ => {
                        rejected.push(RowError {
                            line: idx as u64 + 1,
                            message: format!("score {s:?} not a number in [0,1]"),
                        });
                        continue;
                    }
                },
            };
            self.insert(asn, score, source);
        }
        Ok(rejected)
    }
}

/// Convenience wrapper for [`RovRegistry::is_enforcing`].
pub fn is_enforcing(registry: &RovRegistry, asn: Asn) -> bool {
    registry.is_enforcing(asn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::net::Ipv4Addr;

    fn p(s: &str) -> IpPrefix {
        s.parse().unwrap()
    }

    fn roa(asn: u32, prefix: &str, max: u32) -> RoaRecord {
        RoaRecord::new(Asn(asn), p(prefix), max).unwrap()
    }

    #[test]
    fn asn_parsing() {
        assert_eq!("AS65001".parse::<Asn>().unwrap(), Asn(65001));
        assert_eq!(" 64512 ".parse::<Asn>().unwrap(), Asn(64512));
        assert!("ASx".parse::<Asn>().is_err());
    }

    #[test]
    fn loads_roa_csv() {
        let data = "asn,prefix,max_length\nAS65001,203.0.113.0/24,24\n65001,203.0.113.0/24,23\n65002,2001:db8::/32,48\n";
        let loaded = load_roas(data.as_bytes()).unwrap();
        assert_eq!(loaded.value.len(), 2);
        assert_eq!(loaded.rejected.len(), 1);
        assert_eq!(loaded.rejected[0].line, 3);

        let loaded = load_roas("AS65001,203.0.113.0/24,24\n".as_bytes()).unwrap();
        assert_eq!(loaded.value.len(), 1);
        assert!(loaded.rejected.is_empty());

        let loaded = load_roas("".as_bytes()).unwrap();
        assert!(loaded.value.is_empty());
    }

    #[test]
    fn validation_hand_table() {
        let store: RoaStore = [roa(65001, "203.0.113.0/24", 24)].into_iter().collect();
        assert_eq!(
            store.validate_origin(&p("203.0.113.0/24"), Asn(65001)),
            ValidationResult::Valid { exact_match: true }
        );
        let r = store.validate_origin(&p("203.0.113.0/25"), Asn(65001));
        assert_eq!(r, ValidationResult::Invalid(InvalidReason::Length));
        assert!(r.length_mismatch() && !r.asn_mismatch());
        let r = store.validate_origin(&p("203.0.113.0/25"), Asn(65002));
        assert!(r.length_mismatch() && r.asn_mismatch());
        let r = store.validate_origin(&p("203.0.113.0/24"), Asn(65002));
        assert_eq!(r, ValidationResult::Invalid(InvalidReason::Asn));
        assert_eq!(
            store.validate_origin(&p("198.51.100.0/24"), Asn(65001)),
            ValidationResult::NotFound
        );
    }

    #[test]
    fn any_valid_roa_wins() {
        let store: RoaStore = [roa(65002, "10.0.0.0/8", 8), roa(65001, "10.0.0.0/8", 24)]
            .into_iter()
            .collect();
        assert_eq!(
            store.validate_origin(&p("10.1.0.0/16"), Asn(65001)),
            ValidationResult::Valid { exact_match: false }
        );
    }

    #[test]
    fn rov_threshold_rules() {
        let mut reg = RovRegistry::new(0.5);
        reg.insert(Asn(1), 0.9, RovSource::Rovista);
        reg.insert(Asn(2), 0.5, RovSource::Rovista);
        reg.insert(Asn(3), 0.2, RovSource::Rovista);
        assert!(reg.is_enforcing(Asn(1)));
        assert!(reg.is_enforcing(Asn(2)));
        assert!(!reg.is_enforcing(Asn(3)));
        assert!(!reg.is_enforcing(Asn(4)));
    }

    #[test]
    fn rov_lists_union() {
        let mut reg = RovRegistry::default();
        let rejected = reg
            .load_list("# monitor list\n65001\nAS65002 # trailing\n".as_bytes(), RovSource::RovMonitor)
            .unwrap();
        assert!(rejected.is_empty());
        let rejected = reg
            .load_list("asn,score\n65003,0.8\n65001,0.1\n65004,0.3\nbogus\n".as_bytes(), RovSource::Rovista)
            .unwrap();
        assert_eq!(rejected.len(), 1);
        for asn in [65001, 65002, 65003] {
            assert!(reg.is_enforcing(Asn(asn)), "{asn}");
        }
        assert!(!reg.is_enforcing(Asn(65004)));
        assert_eq!(reg.score(Asn(65001)), Some((1.0, RovSource::RovMonitor)));
    }

    // Independent scan over the ROA list.
    fn brute_validate(roas: &[RoaRecord], ann: &IpPrefix, origin: Asn) -> ValidationResult {
        let covering: Vec<_> = roas.iter().filter(|r| r.prefix.contains(ann)).collect();
        if covering.is_empty() {
            return ValidationResult::NotFound;
        }
        let matching: Vec<_> = covering
            .iter()
            .filter(|r| r.asn == origin && ann.len() <= r.max_length)
            .collect();
        if !matching.is_empty() {
            let exact = matching.iter().any(|r| r.max_length == ann.len());
            return ValidationResult::Valid { exact_match: exact };
        }
        let asn_ok = covering.iter().any(|r| r.asn == origin);
        let len_ok = covering.iter().any(|r| ann.len() <= r.max_length);
        ValidationResult::Invalid(match (asn_ok, len_ok) {
            (true, _) => InvalidReason::Length,
            (false, true) => InvalidReason::Asn,
            (false, false) => InvalidReason::AsnAndLength,
        })
    }

    fn arb_v4(top_bits: u32) -> impl Strategy<Value = IpPrefix> {
        (0u32..(1 << top_bits), any::<u32>(), 8u8..=28).prop_map(move |(t, r, l)| {
            IpPrefix::new(Ipv4Addr::from((t << (32 - top_bits)) | (r >> top_bits)).into(), l).unwrap()
        })
    }

    fn arb_roa() -> impl Strategy<Value = RoaRecord> {
        (1u32..4, arb_v4(3), 0u8..6).prop_map(|(asn, prefix, extra)| {
            let max = (u32::from(prefix.len()) + u32::from(extra)).min(32);
            RoaRecord::new(Asn(asn), prefix, max).unwrap()
        })
    }

    proptest! {
        #[test]
        fn validate_matches_brute_force(
            roas in proptest::collection::vec(arb_roa(), 0..12),
            ann in arb_v4(3),
            origin in 1u32..5,
        ) {
            let store: RoaStore = roas.iter().copied().collect();
            prop_assert_eq!(
                store.validate_origin(&ann, Asn(origin)),
                brute_validate(&roas, &ann, Asn(origin))
            );
        }

        #[test]
        fn valid_is_monotone_in_max_length(
            prefix in arb_v4(3),
            extra in 0u8..4,
            bump in 1u8..4,
            sub in 0u8..8,
        ) {
            let max = (prefix.len() + extra).min(32);
            let ann = IpPrefix::new(prefix.addr(), (prefix.len() + sub).min(32)).unwrap();
            let before: RoaStore = [RoaRecord::new(Asn(7), prefix, max.into()).unwrap()].into_iter().collect();
            let after: RoaStore = [RoaRecord::new(Asn(7), prefix, (max + bump).min(32).into()).unwrap()].into_iter().collect();
            if before.validate_origin(&ann, Asn(7)).is_valid() {
                prop_assert!(after.validate_origin(&ann, Asn(7)).is_valid());
            }
        }
    }
}
